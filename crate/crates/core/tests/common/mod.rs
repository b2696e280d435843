//! Measurements shared by the focused oracle tests and the acceptance run.
#![allow(dead_code)]

use iontrack::anneal::{measure_hop_rate, select_event, KmcParams};
use iontrack::defects::{cluster_defects, connected_sites, connected_sites_brute, wigner_seitz, wigner_seitz_brute};
use iontrack::rng::{seeded_stream, RandomStream};
use iontrack::ttmd::system::{diamond_sites, AtomSystem, Cell};
use iontrack::ttmd::*;
use iontrack::units::BOLTZMANN_EV;

/// Published Tersoff-carbon diamond values: cohesive energy (eV/atom) and
/// lattice constant (nm).
pub const COHESIVE_EV: f64 = -7.37;
pub const LATTICE_NM: f64 = 0.3566;

fn energy_forces(cell: &Cell, x: &[Vec3], p: &TersoffParams) -> ForceOutput {
    let mut nl = NeighborList::new(p.cutoff(), 0.05);
    nl.build(cell, x);
    let mut out = ForceOutput::default();
    tersoff_energy_forces(cell, x, &nl, p, &mut out).unwrap();
    out
}

/// 50 atoms: a 64-site diamond block with 14 atoms removed and the rest
/// displaced, so bonds sit across the whole cutoff taper.
fn disordered_fifty() -> (Cell, Vec<Vec3>) {
    let a0 = 0.3567;
    let cell = Cell::new([2.0 * a0; 3]);
    let mut rng = seeded_stream(17, 0);
    let mut sites = diamond_sites([2, 2, 2], a0);
    for _ in 0..14 {
        let k = rng.index(sites.len());
        sites.swap_remove(k);
    }
    for s in &mut sites {
        for v in s.iter_mut() {
            *v += 0.012 * rng.normal();
        }
    }
    assert_eq!(sites.len(), 50);
    (cell, sites)
}

/// Largest central-difference force error on the 50-atom block, relative to
/// the largest force component.
pub fn max_force_error() -> f64 {
    let p = TersoffParams::carbon();
    let (cell, x) = disordered_fifty();
    let analytic = energy_forces(&cell, &x, &p).forces;
    let scale = analytic.iter().flat_map(|f| f.iter()).fold(0f64, |m, v| m.max(v.abs()));
    let h = 1e-6;
    let mut worst = 0f64;
    for i in 0..x.len() {
        for k in 0..3 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i][k] += h;
            b[i][k] -= h;
            let fd = -(energy_forces(&cell, &a, &p).energy - energy_forces(&cell, &b, &p).energy) / (2.0 * h);
            worst = worst.max((fd - analytic[i][k]).abs() / scale);
        }
    }
    worst
}

pub struct Drift {
    /// Largest |E(t) − E(0)| per atom, eV.
    pub worst_ev: f64,
    /// Mean temperature over the second half, K.
    pub mean_temperature: f64,
}

/// 10 ps of NVE at dt = 0.2 fs on a 216-atom crystal near 300 K.
pub fn nve_drift() -> Drift {
    let a0 = 0.3567;
    let mut sys: AtomSystem = build_diamond_cell([3.0 * a0; 3], a0, 0.0, &mut seeded_stream(3, 0)).unwrap();
    // Equipartition: starting at 2T with the lattice at rest settles near T.
    sys.thermalize(600.0, &mut seeded_stream(3, 1));
    let mut engine = MdEngine::carbon();
    engine.attach(&sys).unwrap();
    let e0 = engine.total_energy(&sys);
    let n = sys.len() as f64;
    let (dt, steps) = (0.2, 50_000);
    let mut worst = 0f64;
    let mut t_sum = 0.0;
    for s in 0..steps {
        engine.step_nve(&mut sys, dt).unwrap();
        worst = worst.max((engine.total_energy(&sys) - e0).abs() / n);
        if s >= steps / 2 {
            t_sum += sys.temperature();
        }
    }
    Drift { worst_ev: worst, mean_temperature: t_sum / (steps / 2) as f64 }
}

/// Minimizes E(a) of the perfect crystal through the full force routine;
/// returns (lattice constant nm, energy eV/atom).
pub fn relaxed_lattice() -> (f64, f64) {
    let p = TersoffParams::carbon();
    let energy = |a: f64| {
        let cell = Cell::new([3.0 * a; 3]);
        let x = diamond_sites([3, 3, 3], a);
        energy_forces(&cell, &x, &p).energy / x.len() as f64
    };
    let (mut lo, mut hi) = (0.34, 0.37);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if energy(m1) < energy(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let a = 0.5 * (lo + hi);
    (a, energy(a))
}

pub struct DamageCase {
    pub cell: Cell,
    pub reference: Vec<Vec3>,
    pub positions: Vec<Vec3>,
}

/// Damaged diamond block: atoms removed, displaced or scattered at random.
pub fn random_damage(rng: &mut RandomStream) -> DamageCase {
    let a0 = 0.3567;
    let reps = [2 + rng.index(3), 2 + rng.index(3), 1 + rng.index(3)];
    let reference = diamond_sites(reps, a0);
    let cell = Cell::new([reps[0] as f64 * a0, reps[1] as f64 * a0, reps[2] as f64 * a0]);
    let jitter = 0.005 + 0.04 * rng.uniform();
    let mut positions = Vec::new();
    for site in &reference {
        match rng.index(20) {
            0 => {}
            1 => positions.push([
                rng.uniform() * cell.lengths[0],
                rng.uniform() * cell.lengths[1],
                rng.uniform() * cell.lengths[2],
            ]),
            _ => {
                let mut p = *site;
                for v in p.iter_mut() {
                    *v += jitter * rng.normal();
                }
                cell.wrap(&mut p);
                positions.push(p);
            }
        }
    }
    for _ in 0..rng.index(4) {
        positions.push([
            rng.uniform() * cell.lengths[0],
            rng.uniform() * cell.lengths[1],
            rng.uniform() * cell.lengths[2],
        ]);
    }
    DamageCase { cell, reference, positions }
}

/// Cell-list analysis against the all-pairs oracles on `cases` random
/// blocks. Returns how many cases produced at least one cluster.
pub fn compare_with_brute_force(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = seeded_stream(seed, 0);
    let mut nontrivial = 0;
    for case_id in 0..cases {
        let c = random_damage(&mut rng);
        let fast = wigner_seitz(&c.cell, &c.reference, &c.cell, &c.positions).map_err(|e| e.to_string())?;
        let brute = wigner_seitz_brute(&c.cell, &c.reference, &c.positions);
        if fast != brute {
            return Err(format!("case {case_id}: Wigner-Seitz assignment differs"));
        }
        let balance = c.reference.len() as i64 - c.positions.len() as i64;
        if !fast.conserves() || fast.vacancy_count() as i64 - fast.interstitial_count() as i64 != balance {
            return Err(format!("case {case_id}: vacancies minus interstitials != sites minus atoms"));
        }
        let cutoff = [0.16, 0.2522, 0.3, 0.45][case_id % 4];
        let fast_c = connected_sites(&fast.vacancies, &c.reference, &c.cell, cutoff);
        if fast_c != connected_sites_brute(&fast.vacancies, &c.reference, &c.cell, cutoff) {
            return Err(format!("case {case_id}: clusters differ at cutoff {cutoff}"));
        }
        let set = cluster_defects(&fast, &c.reference, &c.cell, cutoff).map_err(|e| e.to_string())?;
        if set.total() != fast.vacancy_count() {
            return Err(format!("case {case_id}: clustering lost vacancies"));
        }
        if set.clustered > 0 {
            nontrivial += 1;
        }
    }
    Ok(nontrivial)
}

pub struct RingTest {
    /// z-scores of observed event counts per (species, direction).
    pub event_z: Vec<f64>,
    /// z-score of the total elapsed time.
    pub time_z: f64,
}

/// Ten-site ring with two hopping species and single occupancy, stepped
/// with `select_event`. Observed event counts are compared with the summed
/// per-step selection probabilities, whose variance is the sum of p(1 − p).
pub fn gillespie_ring(steps: usize, seed: u64) -> RingTest {
    const SITES: usize = 10;
    let species_rate = [1.0, 3.5];
    // occupant species per site
    let mut ring: [Option<usize>; SITES] = [Some(0), None, Some(1), None, None, Some(0), Some(1), None, None, None];
    let mut rng = seeded_stream(seed, 0);
    // per (species, direction)
    let mut observed = [[0f64; 2]; 2];
    let mut expected = [[0f64; 2]; 2];
    let mut variance = [[0f64; 2]; 2];
    let (mut time, mut expected_time) = (0.0, 0.0);
    for _ in 0..steps {
        let mut events = Vec::new();
        let mut rates = Vec::new();
        for s in 0..SITES {
            if let Some(sp) = ring[s] {
                for (d, to) in [(0, (s + SITES - 1) % SITES), (1, (s + 1) % SITES)] {
                    if ring[to].is_none() {
                        events.push((s, to, sp, d));
                        rates.push(species_rate[sp]);
                    }
                }
            }
        }
        let total: f64 = rates.iter().sum();
        let mut by_kind = [[0f64; 2]; 2];
        for (e, r) in events.iter().zip(&rates) {
            by_kind[e.2][e.3] += r / total;
        }
        for sp in 0..2 {
            for d in 0..2 {
                let p = by_kind[sp][d];
                expected[sp][d] += p;
                variance[sp][d] += p * (1.0 - p);
            }
        }
        let k = select_event(&rates, rng.uniform()).unwrap();
        time += rng.exponential(total);
        expected_time += 1.0 / total;
        let (from, to, sp, d) = events[k];
        observed[sp][d] += 1.0;
        ring[to] = ring[from].take();
    }
    let mut event_z = Vec::new();
    for sp in 0..2 {
        for d in 0..2 {
            event_z.push((observed[sp][d] - expected[sp][d]) / variance[sp][d].sqrt());
        }
    }
    // Waiting times: sum of exponentials with known means.
    let sd = (expected_time / steps as f64) * (steps as f64).sqrt();
    RingTest { event_z, time_z: (time - expected_time) / sd }
}

/// Vacancy barrier recovered from a least-squares Arrhenius fit of measured
/// hop rates between 1000 and 1300 K.
pub fn arrhenius_barrier(params: &KmcParams) -> f64 {
    let temps = [1000.0, 1100.0, 1200.0, 1300.0];
    let pts: Vec<(f64, f64)> = temps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            // about 4·10⁴ hops at each temperature
            let duration = 1e4 / params.hop_rate(params.vacancy_barrier_ev, t);
            let rate = measure_hop_rate(params, t, duration, &seeded_stream(7, i as u64));
            (1.0 / (BOLTZMANN_EV * t), rate.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}
