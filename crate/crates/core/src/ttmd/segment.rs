//! One slab of the track: deposit, evolve, quench.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::electronic::{ElectronicGrid, TtmParams};
use super::integrate::MdEngine;
use super::system::{build_diamond_cell, AtomSystem, Vec3};
use super::tersoff::TersoffParams;
use super::MdError;
use crate::radialdose::{DoseKernel, IonState};
use crate::rng::RandomStream;
use crate::units::{BOLTZMANN_EV, DIAMOND_A0_NM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuenchMode {
    /// Only the boundary shell is thermostatted.
    Shell,
    /// Every atom is rescaled toward the bath temperature.
    Cell,
}

/// Numerical and physical settings shared by all segments of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackMdParams {
    /// Requested cell size (x, y, z) in nm, rounded to whole conventional cells.
    pub cell_nm: Vec3,
    pub a0_nm: f64,
    /// Bath temperature, K.
    pub temperature: f64,
    /// Nominal MD timestep, fs.
    pub dt_fs: f64,
    /// Cap on the distance the fastest atom may travel in one step, nm.
    pub max_step_nm: f64,
    pub deposit_fs: f64,
    pub evolve_fs: f64,
    pub quench_fs: f64,
    /// Width of the thermostatted frame at the x/y cell edges, nm.
    pub shell_nm: f64,
    pub shell_tau_fs: f64,
    pub quench: QuenchMode,
    pub quench_tau_fs: f64,
    pub skin_nm: f64,
    pub ttm: TtmParams,
    /// Sub-samples per zone edge when integrating the dose over a zone.
    pub dose_subsamples: usize,
    /// Ledger sampling interval, fs.
    pub record_every_fs: f64,
    /// Abort after this many seconds of wall time (0 disables).
    pub wall_budget_s: f64,
}

impl Default for TrackMdParams {
    fn default() -> Self {
        Self {
            cell_nm: [11.4, 11.4, 5.7],
            a0_nm: DIAMOND_A0_NM,
            temperature: 300.0,
            dt_fs: 0.2,
            max_step_nm: 0.002,
            deposit_fs: 50.0,
            evolve_fs: 10_000.0,
            quench_fs: 20_000.0,
            shell_nm: 1.0,
            shell_tau_fs: 100.0,
            quench: QuenchMode::Shell,
            quench_tau_fs: 100.0,
            skin_nm: 0.1,
            ttm: TtmParams::default(),
            dose_subsamples: 6,
            record_every_fs: 10.0,
            wall_budget_s: 0.0,
        }
    }
}

impl TrackMdParams {
    pub fn validate(&self) -> Result<(), MdError> {
        let pos = [
            ("cell_nm.x", self.cell_nm[0]),
            ("cell_nm.y", self.cell_nm[1]),
            ("cell_nm.z", self.cell_nm[2]),
            ("a0_nm", self.a0_nm),
            ("temperature", self.temperature),
            ("dt_fs", self.dt_fs),
            ("max_step_nm", self.max_step_nm),
            ("deposit_fs", self.deposit_fs),
            ("shell_tau_fs", self.shell_tau_fs),
            ("quench_tau_fs", self.quench_tau_fs),
            ("skin_nm", self.skin_nm),
            ("record_every_fs", self.record_every_fs),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MdError::Params(format!("md.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("evolve_fs", self.evolve_fs),
            ("quench_fs", self.quench_fs),
            ("shell_nm", self.shell_nm),
            ("wall_budget_s", self.wall_budget_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MdError::Params(format!("md.{name} must be non-negative")));
            }
        }
        self.ttm.validate()
    }

    pub fn duration_fs(&self) -> f64 {
        self.deposit_fs + self.evolve_fs + self.quench_fs
    }
}

/// What a single slab simulation needs beyond the shared parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub index: usize,
    pub depth_um: f64,
    pub ion: IonState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub time_fs: f64,
    pub deposited: f64,
    pub electronic: f64,
    pub lattice: f64,
    pub sink: f64,
    pub lattice_temperature: f64,
    pub max_electron_temperature: f64,
}

/// Energy bookkeeping in eV, relative to the start of the segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub deposited: f64,
    pub electronic: f64,
    pub lattice: f64,
    pub sink: f64,
    pub series: Vec<LedgerRow>,
}

impl EnergyLedger {
    /// deposited − (Δelectronic + Δlattice + sink).
    pub fn residual(&self) -> f64 {
        self.deposited - (self.electronic + self.lattice + self.sink)
    }

    /// Residual relative to the deposited energy (absolute when nothing was deposited).
    pub fn relative_residual(&self) -> f64 {
        if self.deposited > 0.0 {
            self.residual().abs() / self.deposited
        } else {
            self.residual().abs()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "time_fs,deposited_ev,electronic_ev,lattice_ev,sink_ev,lattice_temperature_k,max_electron_temperature_k\n",
        );
        for r in &self.series {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.time_fs,
                r.deposited,
                r.electronic,
                r.lattice,
                r.sink,
                r.lattice_temperature,
                r.max_electron_temperature
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub spec: SegmentSpec,
    pub system: AtomSystem,
    pub atom_energy: Vec<f64>,
    pub ledger: EnergyLedger,
    pub steps: usize,
    pub atom_steps: u64,
    pub wall_seconds: f64,
}

/// Runs one slab: the radial dose enters the electrons as a flat pulse,
/// electrons diffuse and heat the lattice, and the boundary shell pulls the
/// cell back to the bath temperature before the final snapshot.
pub fn run_track_segment(
    spec: &SegmentSpec,
    params: &TrackMdParams,
    kernel: &DoseKernel,
    tersoff: &TersoffParams,
    rng: &mut RandomStream,
) -> Result<SegmentResult, MdError> {
    params.validate()?;
    let start = Instant::now();
    let t_bath = params.temperature;
    // Harmonic equipartition halves the initial kinetic temperature.
    let mut sys = build_diamond_cell(params.cell_nm, params.a0_nm, 2.0 * t_bath, &mut rng.derive(1))?;
    let mut noise = rng.derive(2);
    let mut grid = ElectronicGrid::new(&sys.cell, params.ttm.clone(), t_bath)?;
    let zone_dose = grid.dose_per_zone(kernel, &spec.ion, params.dose_subsamples);
    let pulse_total: f64 = zone_dose.iter().sum();

    let mut engine = MdEngine::new(tersoff.clone(), params.skin_nm);
    engine.attach(&sys)?;
    let e_lat0 = engine.total_energy(&sys);
    let e_el0 = grid.energy();

    let shell = shell_mask(&sys, params.shell_nm);
    let mut zone_scratch = Vec::with_capacity(sys.len());
    let mut ledger = EnergyLedger::default();
    let mut thermo_sink = 0.0;
    let t_dep = params.deposit_fs;
    let t_quench = params.deposit_fs + params.evolve_fs;
    let t_end = params.duration_fs();
    let mut next_record = 0.0;
    let mut steps = 0usize;

    while sys.time_fs < t_end - 1e-9 {
        let t = sys.time_fs;
        let vmax = MdEngine::max_speed(&sys);
        let mut dt = params.dt_fs;
        if vmax * dt > params.max_step_nm {
            dt = params.max_step_nm / vmax;
        }
        dt = dt.min(t_end - t);

        if t < t_dep {
            let overlap = (t + dt).min(t_dep) - t;
            let frac = overlap / t_dep;
            grid.deposit(&zone_dose, frac);
            ledger.deposited += frac * pulse_total;
        }
        grid.diffuse(dt)?;
        engine.step_nve(&mut sys, dt)?;
        grid.couple(&mut sys, dt, &mut noise, &mut zone_scratch)?;

        let in_quench = sys.time_fs > t_quench;
        if in_quench && params.quench == QuenchMode::Cell {
            thermo_sink += berendsen(&mut sys, None, t_bath, dt, params.quench_tau_fs);
        } else if params.shell_nm > 0.0 {
            let tau = if in_quench { params.quench_tau_fs } else { params.shell_tau_fs };
            thermo_sink += berendsen(&mut sys, Some(&shell), t_bath, dt, tau);
        }
        steps += 1;

        if sys.time_fs + 1e-9 >= next_record || sys.time_fs >= t_end - 1e-9 {
            ledger.series.push(LedgerRow {
                time_fs: sys.time_fs,
                deposited: ledger.deposited,
                electronic: grid.energy() - e_el0,
                lattice: engine.total_energy(&sys) - e_lat0,
                sink: grid.sink + thermo_sink,
                lattice_temperature: sys.temperature(),
                max_electron_temperature: grid.te.iter().cloned().fold(0.0, f64::max),
            });
            next_record += params.record_every_fs;
        }
        if params.wall_budget_s > 0.0 && start.elapsed().as_secs_f64() > params.wall_budget_s {
            return Err(MdError::WallBudget(params.wall_budget_s));
        }
    }
    ledger.electronic = grid.energy() - e_el0;
    ledger.lattice = engine.total_energy(&sys) - e_lat0;
    ledger.sink = grid.sink + thermo_sink;
    let atom_steps = steps as u64 * sys.len() as u64;
    Ok(SegmentResult {
        spec: spec.clone(),
        atom_energy: engine.out.atom_energy.clone(),
        system: sys,
        ledger,
        steps,
        atom_steps,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Atoms within `width` of an x or y cell face.
pub fn shell_mask(sys: &AtomSystem, width: f64) -> Vec<bool> {
    let [lx, ly, _] = sys.cell.lengths;
    sys.reference
        .iter()
        .map(|p| p[0] < width || p[0] > lx - width || p[1] < width || p[1] > ly - width)
        .collect()
}

/// Berendsen velocity rescale of the selected atoms toward `target`.
/// Returns the kinetic energy removed.
fn berendsen(sys: &mut AtomSystem, mask: Option<&[bool]>, target: f64, dt: f64, tau: f64) -> f64 {
    let mut ke = 0.0;
    let mut n = 0usize;
    for (i, v) in sys.velocities.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            ke += 0.5 * sys.masses[i] * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            n += 1;
        }
    }
    if n == 0 || ke <= 0.0 {
        return 0.0;
    }
    let temp = 2.0 * ke / (3.0 * n as f64 * BOLTZMANN_EV);
    let lambda = (1.0 + dt / tau * (target / temp - 1.0)).max(0.0).sqrt().clamp(0.9, 1.1);
    for (i, v) in sys.velocities.iter_mut().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            for c in v.iter_mut() {
                *c *= lambda;
            }
        }
    }
    ke * (1.0 - lambda * lambda)
}
