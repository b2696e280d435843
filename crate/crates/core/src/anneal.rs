//! Kinetic Monte Carlo for vacancy migration during track cool-down and
//! furnace annealing.
//!
//! Vacancies and interstitials hop between diamond lattice sites with
//! Arrhenius rates. Reactions are instantaneous on contact: a vacancy next to
//! an interstitial recombines, next to a substitutional nitrogen it forms an
//! NV center, next to another vacancy or a cluster it aggregates into an
//! immobile, optically dark cluster.

use rand_distr::{Distribution, Poisson};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;
use crate::units::{Diamond, BOLTZMANN_EV};

#[derive(Debug, Error)]
pub enum AnnealError {
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },
    #[error("box too small to place {0} defects")]
    Crowded(usize),
    #[error("event budget of {budget} exhausted in stage {stage}")]
    Budget { budget: u64, stage: usize, partial: Box<AnnealResult> },
}

/// Lattice site in quarter-a0 integer coordinates.
pub type Site = [i32; 3];

const OFFSETS_A: [Site; 4] = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub temperature_k: f64,
    pub duration_s: f64,
    /// Fraction of donor electrons available to charge NV centers after
    /// this stage.
    #[serde(default = "default_activation")]
    pub activation: f64,
}

fn default_activation() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub stages: Vec<Stage>,
}

impl Default for AnnealSchedule {
    /// One hour at 800 °C followed by one hour at 1000 °C.
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { temperature_k: 1073.15, duration_s: 3600.0, activation: 0.4 },
                Stage { temperature_k: 1273.15, duration_s: 3600.0, activation: 0.8 },
            ],
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<(), AnnealError> {
        if self.stages.is_empty() {
            return Err(param("schedule", "needs at least one stage"));
        }
        for s in &self.stages {
            if !(s.temperature_k > 0.0 && s.temperature_k.is_finite()) {
                return Err(param("temperature_k", "must be positive"));
            }
            if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
                return Err(param("duration_s", "must be positive"));
            }
            if !(0.0..=1.0).contains(&s.activation) {
                return Err(param("activation", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn param(name: &'static str, reason: &str) -> AnnealError {
    AnnealError::Parameter { name, reason: reason.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Placement {
    /// Cylinder along z through the box center; density is per nm of track.
    Track { radius_nm: f64, vacancies_per_nm: f64 },
    /// Homogeneous; density is per nm³.
    Uniform { vacancies_per_nm3: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmcParams {
    pub box_nm: [f64; 3],
    pub a0_nm: f64,
    pub nitrogen_ppm: f64,
    pub placement: Placement,
    /// Fraction of vacancies accompanied by a mobile interstitial.
    pub interstitial_fraction: f64,
    pub vacancy_barrier_ev: f64,
    pub interstitial_barrier_ev: f64,
    pub attempt_hz: f64,
    pub capture_radius_nm: f64,
    pub recombination_radius_nm: f64,
    pub aggregation_radius_nm: f64,
    pub max_events: u64,
    /// Events between time-series samples.
    pub record_every: u64,
}

impl Default for KmcParams {
    fn default() -> Self {
        let d = Diamond::default();
        let nn = d.bond_length() * 1.001;
        Self {
            box_nm: [50.0; 3],
            a0_nm: d.a0,
            nitrogen_ppm: 100.0,
            placement: Placement::Track { radius_nm: 2.0, vacancies_per_nm: 1.0 },
            interstitial_fraction: 0.5,
            vacancy_barrier_ev: 2.3,
            interstitial_barrier_ev: 1.6,
            attempt_hz: 1e13,
            capture_radius_nm: nn,
            recombination_radius_nm: nn,
            aggregation_radius_nm: nn,
            max_events: 2_000_000_000,
            record_every: 1_000_000,
        }
    }
}

impl KmcParams {
    pub fn validate(&self) -> Result<(), AnnealError> {
        for (name, v) in [
            ("a0_nm", self.a0_nm),
            ("attempt_hz", self.attempt_hz),
            ("vacancy_barrier_ev", self.vacancy_barrier_ev),
            ("interstitial_barrier_ev", self.interstitial_barrier_ev),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("capture_radius_nm", self.capture_radius_nm),
            ("recombination_radius_nm", self.recombination_radius_nm),
            ("aggregation_radius_nm", self.aggregation_radius_nm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param(name, "must be non-negative"));
            }
        }
        if self.box_nm.iter().any(|&l| !(l >= self.a0_nm && l.is_finite())) {
            return Err(param("box_nm", "each edge must hold at least one cell"));
        }
        if !(self.nitrogen_ppm >= 0.0 && self.nitrogen_ppm.is_finite()) {
            return Err(param("nitrogen_ppm", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.interstitial_fraction) {
            return Err(param("interstitial_fraction", "must lie in [0, 1]"));
        }
        match self.placement {
            Placement::Track { radius_nm, vacancies_per_nm } => {
                if !(radius_nm > 0.0) || !(vacancies_per_nm >= 0.0) {
                    return Err(param("placement", "track radius must be positive and density non-negative"));
                }
            }
            Placement::Uniform { vacancies_per_nm3 } => {
                if !(vacancies_per_nm3 >= 0.0) {
                    return Err(param("placement", "density must be non-negative"));
                }
            }
        }
        if self.record_every == 0 {
            return Err(param("record_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Hop rate per direction, s⁻¹.
    pub fn hop_rate(&self, barrier_ev: f64, temperature_k: f64) -> f64 {
        self.attempt_hz * (-barrier_ev / (BOLTZMANN_EV * temperature_k)).exp()
    }
}

/// Periodic diamond lattice in quarter-a0 units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub cells: [i32; 3],
    pub a0: f64,
}

impl Lattice {
    pub fn new(box_nm: [f64; 3], a0: f64) -> Self {
        Self { cells: box_nm.map(|l| ((l / a0).round() as i32).max(1)), a0 }
    }

    pub fn extent(&self) -> [i32; 3] {
        self.cells.map(|c| 4 * c)
    }

    pub fn box_nm(&self) -> [f64; 3] {
        self.cells.map(|c| c as f64 * self.a0)
    }

    pub fn volume_nm3(&self) -> f64 {
        self.box_nm().iter().product()
    }

    pub fn site_count(&self) -> u64 {
        8 * self.cells.iter().map(|&c| c as u64).product::<u64>()
    }

    pub fn wrap(&self, s: Site) -> Site {
        let e = self.extent();
        [s[0].rem_euclid(e[0]), s[1].rem_euclid(e[1]), s[2].rem_euclid(e[2])]
    }

    pub fn is_site(s: Site) -> bool {
        let all_even = s.iter().all(|v| v.rem_euclid(2) == 0);
        let all_odd = s.iter().all(|v| v.rem_euclid(2) == 1);
        let sum = s[0] + s[1] + s[2];
        (all_even && sum.rem_euclid(4) == 0) || (all_odd && (sum - 3).rem_euclid(4) == 0)
    }

    fn on_a(s: Site) -> bool {
        s[0].rem_euclid(2) == 0
    }

    pub fn neighbors(&self, s: Site) -> [Site; 4] {
        let sign = if Self::on_a(s) { 1 } else { -1 };
        OFFSETS_A.map(|o| self.wrap([s[0] + sign * o[0], s[1] + sign * o[1], s[2] + sign * o[2]]))
    }

    pub fn position_nm(&self, s: Site) -> [f64; 3] {
        s.map(|v| v as f64 * self.a0 / 4.0)
    }

    /// Minimum-image squared distance in nm².
    pub fn distance2(&self, a: Site, b: Site) -> f64 {
        let e = self.extent();
        let mut d2 = 0.0;
        for k in 0..3 {
            let mut d = (a[k] - b[k]).rem_euclid(e[k]);
            if d > e[k] / 2 {
                d -= e[k];
            }
            let x = d as f64 * self.a0 / 4.0;
            d2 += x * x;
        }
        d2
    }

    /// Nearest lattice site to a point in nm.
    pub fn snap(&self, p: [f64; 3]) -> Site {
        let q = p.map(|v| v * 4.0 / self.a0);
        let base = q.map(|v| v.round() as i32);
        let mut best = (f64::INFINITY, base);
        for dx in -2..=2 {
            for dy in -2..=2 {
                for dz in -2..=2 {
                    let s = [base[0] + dx, base[1] + dy, base[2] + dz];
                    if !Self::is_site(s) {
                        continue;
                    }
                    let d2: f64 = (0..3).map(|k| (s[k] as f64 - q[k]).powi(2)).sum();
                    if d2 < best.0 {
                        best = (d2, s);
                    }
                }
            }
        }
        self.wrap(best.1)
    }

    /// Site-to-site displacement vectors (quarter units) within `radius` nm,
    /// for a site on sublattice A (index 0) and B (index 1). Includes zero.
    fn contact_offsets(&self, radius: f64) -> [Vec<Site>; 2] {
        let r_q = radius * 4.0 / self.a0 + 1e-9;
        let m = r_q.ceil() as i32;
        let mut out = [Vec::new(), Vec::new()];
        for (k, origin) in [[0, 0, 0], [1, 1, 1]].into_iter().enumerate() {
            for dx in -m..=m {
                for dy in -m..=m {
                    for dz in -m..=m {
                        let s = [origin[0] + dx, origin[1] + dy, origin[2] + dz];
                        if Self::is_site(s) && ((dx * dx + dy * dy + dz * dz) as f64) <= r_q * r_q {
                            out[k].push([dx, dy, dz]);
                        }
                    }
                }
            }
            out[k].sort_by_key(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2], *o));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Occupant {
    Vacancy(u32),
    Nitrogen,
    Nv,
    Cluster(u32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub vacancies_total: u64,
    pub vacancies_free: u64,
    pub vacancies_in_clusters: u64,
    pub vacancies_in_nv: u64,
    pub vacancies_recombined: u64,
    pub interstitials_total: u64,
    pub interstitials_free: u64,
    pub nitrogen_total: u64,
    pub nitrogen_substitutional: u64,
}

impl Ledger {
    pub fn closes(&self) -> bool {
        self.vacancies_total
            == self.vacancies_free + self.vacancies_in_clusters + self.vacancies_in_nv + self.vacancies_recombined
            && self.nitrogen_total == self.nitrogen_substitutional + self.vacancies_in_nv
            && self.interstitials_total == self.interstitials_free + self.vacancies_recombined
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub vacancy_hops: u64,
    pub interstitial_hops: u64,
    pub captures: u64,
    pub recombinations: u64,
    pub aggregations: u64,
    pub blocked: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    VacancyHop,
    InterstitialHop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub from: Site,
    pub to: Site,
    pub dt_s: f64,
}

#[derive(Debug, Clone)]
pub struct KmcState {
    pub params: KmcParams,
    pub lattice: Lattice,
    pub time_s: f64,
    pub temperature_k: f64,
    pub vacancies: Vec<Site>,
    pub interstitials: Vec<Site>,
    pub nitrogen: Vec<Site>,
    pub nv: Vec<Site>,
    pub clusters: Vec<Vec<Site>>,
    pub ledger: Ledger,
    pub tallies: Tallies,
    occ: FxHashMap<Site, Occupant>,
    imap: FxHashMap<Site, u32>,
    offsets_cap: [Vec<Site>; 2],
    offsets_rec: [Vec<Site>; 2],
    offsets_agg: [Vec<Site>; 2],
    rng: RandomStream,
}

/// Selects an index with probability proportional to `rates[i]` given a
/// uniform draw `u ∈ [0, 1)`. Returns `None` when all rates are zero.
pub fn select_event(rates: &[f64], u: f64) -> Option<usize> {
    let total: f64 = rates.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &r) in rates.iter().enumerate() {
        if r > 0.0 {
            acc += r;
            last = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last
}

fn uniform_in_box(lat: &Lattice, rng: &mut RandomStream) -> [f64; 3] {
    let b = lat.box_nm();
    [rng.uniform() * b[0], rng.uniform() * b[1], rng.uniform() * b[2]]
}

fn sample_defect_point(lat: &Lattice, placement: &Placement, rng: &mut RandomStream) -> [f64; 3] {
    match placement {
        Placement::Track { radius_nm, .. } => {
            let b = lat.box_nm();
            let r = radius_nm * rng.uniform().sqrt();
            let phi = 2.0 * std::f64::consts::PI * rng.uniform();
            [0.5 * b[0] + r * phi.cos(), 0.5 * b[1] + r * phi.sin(), rng.uniform() * b[2]]
        }
        Placement::Uniform { .. } => uniform_in_box(lat, rng),
    }
}

impl KmcState {
    fn sub(s: Site) -> usize {
        (!Lattice::on_a(s)) as usize
    }

    pub fn counts(&self) -> Ledger {
        self.ledger
    }

    /// Vacancies not bound in clusters or NV centers: the GR1 population.
    pub fn isolated_vacancies(&self) -> usize {
        self.vacancies.len()
    }

    fn add_vacancy(&mut self, s: Site) {
        let id = self.vacancies.len() as u32;
        self.vacancies.push(s);
        self.occ.insert(s, Occupant::Vacancy(id));
        self.ledger.vacancies_free += 1;
    }

    fn remove_vacancy(&mut self, id: usize) -> Site {
        let s = self.vacancies.swap_remove(id);
        self.occ.remove(&s);
        if id < self.vacancies.len() {
            let moved = self.vacancies[id];
            self.occ.insert(moved, Occupant::Vacancy(id as u32));
        }
        self.ledger.vacancies_free -= 1;
        s
    }

    fn remove_interstitial(&mut self, id: usize) -> Site {
        let s = self.interstitials.swap_remove(id);
        self.imap.remove(&s);
        if id < self.interstitials.len() {
            let moved = self.interstitials[id];
            self.imap.insert(moved, id as u32);
        }
        self.ledger.interstitials_free -= 1;
        s
    }

    fn find(lat: &Lattice, offsets: &[Vec<Site>; 2], s: Site) -> Vec<Site> {
        offsets[Self::sub(s)].iter().map(|o| lat.wrap([s[0] + o[0], s[1] + o[1], s[2] + o[2]])).collect()
    }

    /// Resolves contacts of the free vacancy at `s`. Order: recombination,
    /// capture, aggregation.
    fn react_vacancy(&mut self, s: Site) {
        for t in Self::find(&self.lattice, &self.offsets_rec, s) {
            if let Some(&iid) = self.imap.get(&t) {
                self.recombine_free(s, iid as usize);
                return;
            }
        }
        for t in Self::find(&self.lattice, &self.offsets_cap, s) {
            if self.occ.get(&t) == Some(&Occupant::Nitrogen) {
                let Some(Occupant::Vacancy(vid)) = self.occ.get(&s).copied() else { return };
                self.remove_vacancy(vid as usize);
                self.occ.insert(t, Occupant::Nv);
                let k = self.nitrogen.iter().position(|&n| n == t).expect("nitrogen listed");
                self.nitrogen.swap_remove(k);
                self.nv.push(t);
                self.ledger.vacancies_in_nv += 1;
                self.ledger.nitrogen_substitutional -= 1;
                self.tallies.captures += 1;
                return;
            }
        }
        for t in Self::find(&self.lattice, &self.offsets_agg, s) {
            if t == s {
                continue;
            }
            match self.occ.get(&t).copied() {
                Some(Occupant::Vacancy(other)) => {
                    let Some(Occupant::Vacancy(vid)) = self.occ.get(&s).copied() else { return };
                    // remove the higher index first so the lower stays valid
                    let (a, b) = (vid.max(other) as usize, vid.min(other) as usize);
                    let sa = self.remove_vacancy(a);
                    let sb = self.remove_vacancy(b);
                    let cid = self.clusters.len() as u32;
                    self.clusters.push(vec![sa, sb]);
                    self.occ.insert(sa, Occupant::Cluster(cid));
                    self.occ.insert(sb, Occupant::Cluster(cid));
                    self.ledger.vacancies_in_clusters += 2;
                    self.tallies.aggregations += 1;
                    return;
                }
                Some(Occupant::Cluster(cid)) => {
                    let Some(Occupant::Vacancy(vid)) = self.occ.get(&s).copied() else { return };
                    self.remove_vacancy(vid as usize);
                    self.clusters[cid as usize].push(s);
                    self.occ.insert(s, Occupant::Cluster(cid));
                    self.ledger.vacancies_in_clusters += 1;
                    self.tallies.aggregations += 1;
                    return;
                }
                _ => {}
            }
        }
    }

    fn recombine_free(&mut self, vsite: Site, iid: usize) {
        let Some(Occupant::Vacancy(vid)) = self.occ.get(&vsite).copied() else { return };
        self.remove_vacancy(vid as usize);
        self.remove_interstitial(iid);
        self.ledger.vacancies_recombined += 1;
        self.tallies.recombinations += 1;
    }

    /// Resolves contacts of the interstitial at `s`: recombination with a free
    /// vacancy or with a cluster member.
    fn react_interstitial(&mut self, s: Site) {
        for t in Self::find(&self.lattice, &self.offsets_rec, s) {
            match self.occ.get(&t).copied() {
                Some(Occupant::Vacancy(_)) => {
                    let iid = self.imap[&s] as usize;
                    self.recombine_free(t, iid);
                    return;
                }
                Some(Occupant::Cluster(cid)) => {
                    let iid = self.imap[&s] as usize;
                    self.remove_interstitial(iid);
                    let c = &mut self.clusters[cid as usize];
                    let k = c.iter().position(|&m| m == t).expect("member listed");
                    c.swap_remove(k);
                    self.occ.remove(&t);
                    self.ledger.vacancies_in_clusters -= 1;
                    self.ledger.vacancies_recombined += 1;
                    self.tallies.recombinations += 1;
                    if c.len() == 1 {
                        // a lone survivor is mobile again
                        let last = c.pop().expect("one member");
                        self.occ.remove(&last);
                        self.ledger.vacancies_in_clusters -= 1;
                        self.add_vacancy(last);
                        self.react_vacancy(last);
                    }
                    return;
                }
                _ => {}
            }
        }
    }

    /// Current hop rates per direction for vacancies and interstitials.
    pub fn hop_rates(&self) -> (f64, f64) {
        (
            self.params.hop_rate(self.params.vacancy_barrier_ev, self.temperature_k),
            self.params.hop_rate(self.params.interstitial_barrier_ev, self.temperature_k),
        )
    }

    pub fn total_rate(&self) -> f64 {
        let (rv, ri) = self.hop_rates();
        4.0 * (rv * self.vacancies.len() as f64 + ri * self.interstitials.len() as f64)
    }

    pub fn has_mobile(&self) -> bool {
        !self.vacancies.is_empty() || !self.interstitials.is_empty()
    }

    /// Draws and applies one event. `None` when nothing can move.
    pub fn kmc_step(&mut self) -> Option<EventRecord> {
        let (rv, ri) = self.hop_rates();
        let rates = [4.0 * rv * self.vacancies.len() as f64, 4.0 * ri * self.interstitials.len() as f64];
        let total = rates[0] + rates[1];
        let class = select_event(&rates, self.rng.uniform())?;
        let dt = self.rng.exponential(total);
        self.time_s += dt;
        let dir = self.rng.index(4);
        if class == 0 {
            let id = self.rng.index(self.vacancies.len());
            let from = self.vacancies[id];
            let to = self.lattice.neighbors(from)[dir];
            self.tallies.vacancy_hops += 1;
            if self.occ.contains_key(&to) {
                // only possible with contact radii shorter than a bond
                self.tallies.blocked += 1;
                return Some(EventRecord { kind: EventKind::VacancyHop, from, to: from, dt_s: dt });
            }
            self.occ.remove(&from);
            self.vacancies[id] = to;
            self.occ.insert(to, Occupant::Vacancy(id as u32));
            self.react_vacancy(to);
            Some(EventRecord { kind: EventKind::VacancyHop, from, to, dt_s: dt })
        } else {
            let id = self.rng.index(self.interstitials.len());
            let from = self.interstitials[id];
            let to = self.lattice.neighbors(from)[dir];
            self.tallies.interstitial_hops += 1;
            if self.imap.contains_key(&to) {
                self.tallies.blocked += 1;
                return Some(EventRecord { kind: EventKind::InterstitialHop, from, to: from, dt_s: dt });
            }
            self.imap.remove(&from);
            self.interstitials[id] = to;
            self.imap.insert(to, id as u32);
            self.react_interstitial(to);
            Some(EventRecord { kind: EventKind::InterstitialHop, from, to, dt_s: dt })
        }
    }
}

/// Places nitrogen, vacancies and interstitials. Vacancy and interstitial
/// counts follow Poisson statistics around the requested densities.
pub fn init_kmc(params: &KmcParams, rng: &RandomStream) -> Result<KmcState, AnnealError> {
    params.validate()?;
    let lattice = Lattice::new(params.box_nm, params.a0_nm);
    let mut place_rng = rng.derive(1);
    let host = Diamond::new(params.a0_nm);
    let volume = lattice.volume_nm3();
    let mut state = KmcState {
        params: params.clone(),
        lattice,
        time_s: 0.0,
        temperature_k: 300.0,
        vacancies: Vec::new(),
        interstitials: Vec::new(),
        nitrogen: Vec::new(),
        nv: Vec::new(),
        clusters: Vec::new(),
        ledger: Ledger::default(),
        tallies: Tallies::default(),
        occ: FxHashMap::default(),
        imap: FxHashMap::default(),
        offsets_cap: lattice.contact_offsets(params.capture_radius_nm),
        offsets_rec: lattice.contact_offsets(params.recombination_radius_nm),
        offsets_agg: lattice.contact_offsets(params.aggregation_radius_nm),
        rng: rng.derive(2),
    };
    let poisson = |mean: f64, r: &mut RandomStream| -> u64 {
        if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(r) as u64).unwrap_or(0)
        } else {
            0
        }
    };
    let n_nitrogen = poisson(host.ppm_to_nm3(params.nitrogen_ppm) * volume, &mut place_rng);
    let n_vac = match params.placement {
        Placement::Track { vacancies_per_nm, .. } => poisson(vacancies_per_nm * lattice.box_nm()[2], &mut place_rng),
        Placement::Uniform { vacancies_per_nm3 } => poisson(vacancies_per_nm3 * volume, &mut place_rng),
    };
    let n_int = (0..n_vac).filter(|_| place_rng.uniform() < params.interstitial_fraction).count() as u64;
    let total = n_nitrogen + n_vac + n_int;
    if total as f64 > 0.25 * lattice.site_count() as f64 {
        return Err(AnnealError::Crowded(total as usize));
    }
    let max_tries = 1000 * (total as usize + 1);
    let mut tries = 0;
    while (state.nitrogen.len() as u64) < n_nitrogen {
        tries += 1;
        if tries > max_tries {
            return Err(AnnealError::Crowded(total as usize));
        }
        let s = lattice.snap(uniform_in_box(&lattice, &mut place_rng));
        if state.occ.contains_key(&s) {
            continue;
        }
        state.occ.insert(s, Occupant::Nitrogen);
        state.nitrogen.push(s);
    }
    // Vacancies and interstitials land on empty sites and are reacted only
    // once all are placed, so placement order does not bias the outcome.
    let mut placed_v = Vec::new();
    while (placed_v.len() as u64) < n_vac {
        tries += 1;
        if tries > max_tries {
            return Err(AnnealError::Crowded(total as usize));
        }
        let s = lattice.snap(sample_defect_point(&lattice, &params.placement, &mut place_rng));
        if state.occ.contains_key(&s) {
            continue;
        }
        state.add_vacancy(s);
        placed_v.push(s);
    }
    let mut placed_i = Vec::new();
    while (placed_i.len() as u64) < n_int {
        tries += 1;
        if tries > max_tries {
            return Err(AnnealError::Crowded(total as usize));
        }
        let s = lattice.snap(sample_defect_point(&lattice, &params.placement, &mut place_rng));
        if state.occ.contains_key(&s) || state.imap.contains_key(&s) {
            continue;
        }
        state.imap.insert(s, state.interstitials.len() as u32);
        state.interstitials.push(s);
        placed_i.push(s);
    }
    state.ledger.vacancies_total = n_vac;
    state.ledger.interstitials_total = n_int;
    state.ledger.interstitials_free = n_int;
    state.ledger.nitrogen_total = n_nitrogen;
    state.ledger.nitrogen_substitutional = n_nitrogen;
    for s in placed_i {
        if state.imap.contains_key(&s) {
            state.react_interstitial(s);
        }
    }
    for s in placed_v {
        if matches!(state.occ.get(&s), Some(Occupant::Vacancy(_))) {
            state.react_vacancy(s);
        }
    }
    debug_assert!(state.ledger.closes());
    Ok(state)
}

/// Mean spacing metrics of the placed nitrogen, nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingMetrics {
    /// Monte Carlo mean distance to the nearest other nitrogen.
    pub mean_nearest_neighbor: f64,
    /// `n^(−1/3)`, the edge of the volume per nitrogen.
    pub mean_spacing: f64,
    /// Radius of the sphere holding one nitrogen on average.
    pub wigner_seitz_radius: f64,
}

pub fn nitrogen_spacing(state: &KmcState) -> Option<SpacingMetrics> {
    let pts: Vec<[f64; 3]> = state.nitrogen.iter().chain(&state.nv).map(|&s| state.lattice.position_nm(s)).collect();
    if pts.len() < 2 {
        return None;
    }
    let b = state.lattice.box_nm();
    let n = pts.len() as f64 / state.lattice.volume_nm3();
    // bin sort for the nearest-neighbour search
    let bin = n.powf(-1.0 / 3.0).max(0.5);
    let nb = b.map(|l| ((l / bin).floor() as usize).max(1));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nb[0] * nb[1] * nb[2]];
    let key = |p: &[f64; 3]| -> [usize; 3] {
        [0, 1, 2].map(|k| (((p[k] / b[k]) * nb[k] as f64) as usize).min(nb[k] - 1))
    };
    for (i, p) in pts.iter().enumerate() {
        let c = key(p);
        bins[(c[0] * nb[1] + c[1]) * nb[2] + c[2]].push(i);
    }
    let mut sum = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let c = key(p);
        let mut best = f64::INFINITY;
        let mut reach = 1i64;
        loop {
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        let w = [0, 1, 2].map(|k| q[k].rem_euclid(nb[k] as i64) as usize);
                        for &j in &bins[(w[0] * nb[1] + w[1]) * nb[2] + w[2]] {
                            if j == i {
                                continue;
                            }
                            let mut d2 = 0.0;
                            for k in 0..3 {
                                let mut d = pts[j][k] - p[k];
                                d -= b[k] * (d / b[k]).round();
                                d2 += d * d;
                            }
                            best = best.min(d2);
                        }
                    }
                }
            }
            // the search cube guarantees correctness once its inner radius
            // exceeds the best distance found
            let inner = reach as f64 * bin;
            let span = (2 * reach + 1) as usize;
            if (best.is_finite() && best.sqrt() <= inner) || nb.iter().all(|&m| span >= m) {
                break;
            }
            reach += 1;
        }
        sum += best.sqrt();
    }
    Some(SpacingMetrics {
        mean_nearest_neighbor: sum / pts.len() as f64,
        mean_spacing: n.powf(-1.0 / 3.0),
        wigner_seitz_radius: (3.0 / (4.0 * std::f64::consts::PI * n)).powf(1.0 / 3.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_s: f64,
    pub stage: usize,
    pub temperature_k: f64,
    pub events: u64,
    pub ledger: Ledger,
    pub clusters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeState {
    pub stage: usize,
    pub nv_minus: f64,
    pub nv_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealResult {
    pub series: Vec<Sample>,
    pub final_ledger: Ledger,
    pub tallies: Tallies,
    pub clusters: Vec<usize>,
    pub charge: Vec<ChargeState>,
    pub volume_nm3: f64,
    pub events: u64,
    pub early_exit: bool,
}

impl AnnealResult {
    pub fn isolated_vacancies(&self) -> u64 {
        self.final_ledger.vacancies_free
    }

    pub fn nv_total(&self) -> u64 {
        self.final_ledger.vacancies_in_nv
    }

    pub fn series_csv(&self) -> String {
        let mut s = String::from(
            "time_s,stage,temperature_k,events,isolated_vacancies,clustered_vacancies,nv,recombined,interstitials,clusters\n",
        );
        for r in &self.series {
            let l = &r.ledger;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.time_s,
                r.stage,
                r.temperature_k,
                r.events,
                l.vacancies_free,
                l.vacancies_in_clusters,
                l.vacancies_in_nv,
                l.vacancies_recombined,
                l.interstitials_free,
                r.clusters
            ));
        }
        s
    }
}

/// Final site listing of a state.
pub fn state_csv(state: &KmcState) -> String {
    let mut s = String::from("kind,x_nm,y_nm,z_nm,cluster\n");
    let mut row = |kind: &str, site: Site, cluster: i64| {
        let p = state.lattice.position_nm(site);
        s.push_str(&format!("{kind},{:.4},{:.4},{:.4},{cluster}\n", p[0], p[1], p[2]));
    };
    for &v in &state.vacancies {
        row("vacancy", v, -1);
    }
    for &i in &state.interstitials {
        row("interstitial", i, -1);
    }
    for &n in &state.nitrogen {
        row("nitrogen", n, -1);
    }
    for &n in &state.nv {
        row("nv", n, -1);
    }
    for (c, members) in state.clusters.iter().enumerate() {
        for &m in members {
            row("cluster", m, c as i64);
        }
    }
    s
}

fn sample(state: &KmcState, stage: usize, events: u64) -> Sample {
    Sample {
        time_s: state.time_s,
        stage,
        temperature_k: state.temperature_k,
        events,
        ledger: state.ledger,
        clusters: state.clusters.iter().filter(|c| !c.is_empty()).count(),
    }
}

/// Advances the state through every stage of the schedule. A stage ends
/// when its next event would fall past the stage boundary; the exponential
/// waiting time is memoryless, so discarding that draw is exact.
pub fn run_anneal(state: &mut KmcState, schedule: &AnnealSchedule) -> Result<AnnealResult, AnnealError> {
    schedule.validate()?;
    let mut series = vec![sample(state, 0, 0)];
    let mut charge = Vec::new();
    let mut events = 0u64;
    let mut early_exit = false;
    let budget = state.params.max_events;
    let every = state.params.record_every;
    let build = |state: &KmcState, series: Vec<Sample>, charge: Vec<ChargeState>, events: u64, early_exit: bool| {
        AnnealResult {
            series,
            final_ledger: state.ledger,
            tallies: state.tallies,
            clusters: state.clusters.iter().map(Vec::len).filter(|&n| n > 0).collect(),
            charge,
            volume_nm3: state.lattice.volume_nm3(),
            events,
            early_exit,
        }
    };
    for (k, stage) in schedule.stages.iter().enumerate() {
        state.temperature_k = stage.temperature_k;
        let end = state.time_s + stage.duration_s;
        while state.has_mobile() {
            let total = state.total_rate();
            // peek the waiting time without consuming the event
            let mut probe = state.rng.clone();
            let dt = probe.exponential(total);
            if state.time_s + dt > end {
                break;
            }
            state.kmc_step();
            events += 1;
            if events % every == 0 {
                series.push(sample(state, k, events));
            }
            if events >= budget {
                series.push(sample(state, k, events));
                let partial = build(state, series, charge, events, false);
                return Err(AnnealError::Budget { budget, stage: k, partial: Box::new(partial) });
            }
        }
        if !state.has_mobile() {
            early_exit = true;
        }
        state.time_s = end;
        let nv = state.ledger.vacancies_in_nv as f64;
        let (m, z) = charge_state_balance(nv, state.ledger.nitrogen_substitutional as f64, stage.activation);
        charge.push(ChargeState { stage: k, nv_minus: m, nv_zero: z });
        series.push(sample(state, k, events));
    }
    Ok(build(state, series, charge, events, early_exit))
}

/// Splits NV centers into charge states: each negative center needs one
/// electron from a substitutional-nitrogen donor.
pub fn charge_state_balance(nv_total: f64, donors: f64, activation: f64) -> (f64, f64) {
    let minus = nv_total.min(activation.clamp(0.0, 1.0) * donors.max(0.0)).max(0.0);
    (minus, nv_total - minus)
}

/// Donor count in a volume from a nitrogen concentration.
pub fn donors_from_ppm(ppm: f64, volume_nm3: f64, host: &Diamond) -> f64 {
    host.ppm_to_nm3(ppm) * volume_nm3
}

/// Volume vacancy density where tracks overlap: fluence times the vacancy
/// yield per nm of track.
pub fn overlapping_track_density(fluence_cm2: f64, vacancies_per_nm: f64) -> f64 {
    fluence_cm2 / crate::units::NM2_PER_CM2 * vacancies_per_nm
}

/// Hop frequency per direction of a single free vacancy, measured by running
/// the kMC for `duration_s` at `temperature_k`.
pub fn measure_hop_rate(params: &KmcParams, temperature_k: f64, duration_s: f64, rng: &RandomStream) -> f64 {
    let p = KmcParams {
        nitrogen_ppm: 0.0,
        placement: Placement::Uniform { vacancies_per_nm3: 0.0 },
        interstitial_fraction: 0.0,
        ..params.clone()
    };
    let mut state = init_kmc(&p, rng).expect("empty box is valid");
    let center = state.lattice.snap(state.lattice.box_nm().map(|l| 0.5 * l));
    state.add_vacancy(center);
    state.ledger.vacancies_total = 1;
    state.temperature_k = temperature_k;
    let mut hops = 0u64;
    loop {
        let mut probe = state.rng.clone();
        if state.time_s + probe.exponential(state.total_rate()) > duration_s {
            break;
        }
        state.kmc_step();
        hops += 1;
    }
    hops as f64 / (4.0 * duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;

    fn empty_params() -> KmcParams {
        KmcParams {
            box_nm: [10.0; 3],
            nitrogen_ppm: 0.0,
            placement: Placement::Uniform { vacancies_per_nm3: 0.0 },
            ..KmcParams::default()
        }
    }

    #[test]
    fn lattice_neighbors_are_bonds() {
        let lat = Lattice::new([3.0; 3], 0.3567);
        for s in [[0, 0, 0], [1, 1, 1], [4, 0, 4], [3, 3, 1]] {
            assert!(Lattice::is_site(s));
            for n in lat.neighbors(s) {
                assert!(Lattice::is_site(n));
                assert!((lat.distance2(s, n).sqrt() - 0.3567 * 3f64.sqrt() / 4.0).abs() < 1e-12);
            }
        }
        let offs = lat.contact_offsets(0.3567 * 3f64.sqrt() / 4.0 * 1.001);
        assert_eq!(offs[0].len(), 5);
        assert_eq!(offs[1].len(), 5);
    }

    #[test]
    fn snap_is_a_site() {
        let lat = Lattice::new([5.0; 3], 0.3567);
        let mut rng = seeded_stream(2, 0);
        for _ in 0..200 {
            let s = lat.snap(uniform_in_box(&lat, &mut rng));
            assert!(Lattice::is_site(s));
        }
    }

    #[test]
    fn zero_ppm_no_nitrogen() {
        let mut p = KmcParams::default();
        p.nitrogen_ppm = 0.0;
        let s = init_kmc(&p, &seeded_stream(1, 0)).unwrap();
        assert!(s.nitrogen.is_empty());
        assert!(s.ledger.closes());
    }

    #[test]
    fn capture_is_absorbing() {
        let mut s = init_kmc(&empty_params(), &seeded_stream(4, 0)).unwrap();
        let n = s.lattice.snap([5.0, 5.0, 5.0]);
        s.occ.insert(n, Occupant::Nitrogen);
        s.nitrogen.push(n);
        s.ledger.nitrogen_total = 1;
        s.ledger.nitrogen_substitutional = 1;
        // two bonds away: not yet in contact
        let v = s.lattice.neighbors(s.lattice.neighbors(n)[0])[1];
        assert_ne!(v, n);
        s.add_vacancy(v);
        s.ledger.vacancies_total = 1;
        s.react_vacancy(v);
        s.temperature_k = 1273.0;
        let mut steps = 0;
        while s.has_mobile() && steps < 10_000_000 {
            s.kmc_step();
            steps += 1;
        }
        assert_eq!(s.nv.len(), 1);
        assert!(s.ledger.closes());
    }

    #[test]
    fn contact_recombines_immediately() {
        let mut s = init_kmc(&empty_params(), &seeded_stream(4, 0)).unwrap();
        let v = s.lattice.snap([5.0, 5.0, 5.0]);
        let i = s.lattice.neighbors(v)[2];
        s.imap.insert(i, 0);
        s.interstitials.push(i);
        s.ledger.interstitials_total = 1;
        s.ledger.interstitials_free = 1;
        s.add_vacancy(v);
        s.ledger.vacancies_total = 1;
        s.react_vacancy(v);
        assert!(!s.has_mobile());
        assert_eq!(s.ledger.vacancies_recombined, 1);
        assert!(s.ledger.closes());
    }

    #[test]
    fn selector_edges() {
        assert_eq!(select_event(&[0.0, 0.0], 0.5), None);
        assert_eq!(select_event(&[1.0, 0.0, 3.0], 0.0), Some(0));
        assert_eq!(select_event(&[1.0, 0.0, 3.0], 0.2499), Some(0));
        assert_eq!(select_event(&[1.0, 0.0, 3.0], 0.25), Some(2));
        assert_eq!(select_event(&[1.0, 0.0, 3.0], 0.999_999), Some(2));
    }

    #[test]
    fn charge_balance_cases() {
        assert_eq!(charge_state_balance(10.0, 0.0, 1.0), (0.0, 10.0));
        assert_eq!(charge_state_balance(10.0, 1e6, 1.0), (10.0, 0.0));
        let (m1, z1) = charge_state_balance(10.0, 12.0, 0.4);
        let (m2, z2) = charge_state_balance(10.0, 12.0, 0.8);
        assert!(m2 / z2 > m1 / z1);
        assert_eq!(m1 + z1, 10.0);
    }

    #[test]
    fn empty_vacancy_set_unchanged() {
        let mut p = empty_params();
        p.nitrogen_ppm = 50.0;
        let mut s = init_kmc(&p, &seeded_stream(9, 0)).unwrap();
        let before = s.ledger;
        let r = run_anneal(&mut s, &AnnealSchedule::default()).unwrap();
        assert_eq!(r.final_ledger, before);
        assert_eq!(r.events, 0);
        assert!(r.early_exit);
    }

    #[test]
    fn nitrogen_count_matches_density() {
        let p = KmcParams { nitrogen_ppm: 100.0, ..KmcParams::default() };
        let s = init_kmc(&p, &seeded_stream(3, 0)).unwrap();
        // 1.763e-2 nm^-3 x (49.94 nm)^3 on the snapped box
        let expected = Diamond::default().ppm_to_nm3(100.0) * s.lattice.volume_nm3();
        assert!((s.nitrogen.len() as f64 - expected).abs() < 4.0 * expected.sqrt());
    }
}
