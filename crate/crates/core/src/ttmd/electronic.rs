//! Electronic temperature grid of the two-temperature model.
//!
//! The grid spans the cell cross-section (x, y); every zone is a column that
//! runs through the full cell along z, parallel to the track. Diffusion is
//! explicit (FTCS) with automatic sub-cycling, and electron–phonon exchange
//! is applied to the atoms of each zone as a Langevin friction/noise step
//! whose kinetic-energy change is removed from the zone exactly.

use serde::{Deserialize, Serialize};

use super::system::{AtomSystem, Cell};
use super::MdError;
use crate::radialdose::{DoseKernel, IonState};
use crate::rng::RandomStream;
use crate::units::BOLTZMANN_EV;

/// Upper bound on diffusion sub-steps per MD step.
pub const MAX_SUBSTEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Edges held at the bath temperature; outflow is booked as sink.
    Dirichlet,
    Periodic,
}

/// Material parameters of the electronic subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtmParams {
    /// Electronic heat capacity, eV/(nm³·K).
    pub heat_capacity: f64,
    /// Electronic thermal diffusivity, nm²/fs.
    pub diffusivity: f64,
    /// Electron–phonon coupling, eV/(nm³·K·fs).
    pub coupling: f64,
    /// Zone edge length, nm.
    pub zone_nm: f64,
    pub boundary: Boundary,
}

impl Default for TtmParams {
    fn default() -> Self {
        Self {
            heat_capacity: 6.24e-3,
            diffusivity: 0.02,
            coupling: 6.24e-5,
            zone_nm: 0.5,
            boundary: Boundary::Dirichlet,
        }
    }
}

impl TtmParams {
    pub fn validate(&self) -> Result<(), MdError> {
        for (name, v) in [
            ("heat_capacity", self.heat_capacity),
            ("zone_nm", self.zone_nm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MdError::Params(format!("ttm.{name} must be positive")));
            }
        }
        for (name, v) in [("diffusivity", self.diffusivity), ("coupling", self.coupling)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MdError::Params(format!("ttm.{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Thermal conductivity κ = C·D, eV/(nm·K·fs).
    pub fn conductivity(&self) -> f64 {
        self.heat_capacity * self.diffusivity
    }

    /// Electron cooling time C/g, fs.
    pub fn cooling_time(&self) -> f64 {
        self.heat_capacity / self.coupling
    }
}

#[derive(Debug, Clone)]
pub struct ElectronicGrid {
    pub params: TtmParams,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    /// Column length along the track, nm.
    pub lz: f64,
    pub bath: f64,
    /// Electronic temperature per zone, row-major in (x, y), K.
    pub te: Vec<f64>,
    /// Energy that left through Dirichlet edges, eV.
    pub sink: f64,
    scratch: Vec<f64>,
}

impl ElectronicGrid {
    pub fn new(cell: &Cell, params: TtmParams, bath: f64) -> Result<Self, MdError> {
        params.validate()?;
        if !(bath >= 0.0) {
            return Err(MdError::Params("bath temperature must be non-negative".into()));
        }
        let nx = ((cell.lengths[0] / params.zone_nm).round() as usize).max(1);
        let ny = ((cell.lengths[1] / params.zone_nm).round() as usize).max(1);
        Ok(Self {
            hx: cell.lengths[0] / nx as f64,
            hy: cell.lengths[1] / ny as f64,
            lz: cell.lengths[2],
            nx,
            ny,
            bath,
            te: vec![bath; nx * ny],
            sink: 0.0,
            scratch: vec![0.0; nx * ny],
            params,
        })
    }

    pub fn zones(&self) -> usize {
        self.nx * self.ny
    }

    pub fn zone_volume(&self) -> f64 {
        self.hx * self.hy * self.lz
    }

    /// Zone index for an in-cell position.
    #[inline]
    pub fn zone_of(&self, x: f64, y: f64) -> usize {
        let ix = ((x / self.hx) as usize).min(self.nx - 1);
        let iy = ((y / self.hy) as usize).min(self.ny - 1);
        ix * self.ny + iy
    }

    pub fn zone_center(&self, z: usize) -> (f64, f64) {
        let ix = z / self.ny;
        let iy = z % self.ny;
        ((ix as f64 + 0.5) * self.hx, (iy as f64 + 0.5) * self.hy)
    }

    /// Total electronic energy C·V·T summed over zones, eV.
    pub fn energy(&self) -> f64 {
        let cv = self.params.heat_capacity * self.zone_volume();
        self.te.iter().map(|t| cv * t).sum()
    }

    /// Adds energy (eV) to each zone.
    pub fn deposit(&mut self, zone_energy: &[f64], fraction: f64) {
        let cv = self.params.heat_capacity * self.zone_volume();
        for (t, e) in self.te.iter_mut().zip(zone_energy) {
            *t += fraction * e / cv;
        }
    }

    /// Largest stable FTCS sub-step, fs.
    pub fn stable_step(&self) -> f64 {
        let d = self.params.diffusivity;
        if d == 0.0 {
            return f64::INFINITY;
        }
        0.45 / (d * (1.0 / (self.hx * self.hx) + 1.0 / (self.hy * self.hy)))
    }

    /// Diffuses for `dt` fs with as many sub-steps as stability requires.
    pub fn diffuse(&mut self, dt: f64) -> Result<usize, MdError> {
        if self.params.diffusivity == 0.0 {
            return Ok(0);
        }
        let n = (dt / self.stable_step()).ceil().max(1.0) as usize;
        if n > MAX_SUBSTEPS {
            return Err(MdError::Cfl { dt, substeps: n });
        }
        let h = dt / n as f64;
        for _ in 0..n {
            self.ftcs(h)?;
        }
        Ok(n)
    }

    /// One explicit sub-step; rejects steps beyond the stability limit.
    pub fn ftcs(&mut self, h: f64) -> Result<(), MdError> {
        let d = self.params.diffusivity;
        let (ax, ay) = (d * h / (self.hx * self.hx), d * h / (self.hy * self.hy));
        if ax + ay > 0.5 {
            return Err(MdError::Cfl { dt: h, substeps: 1 });
        }
        let (nx, ny) = (self.nx, self.ny);
        let periodic = self.params.boundary == Boundary::Periodic;
        let bath = self.bath;
        let te = &self.te;
        let mut outflow = 0.0; // in K·zone units, converted below
        for ix in 0..nx {
            for iy in 0..ny {
                let c = te[ix * ny + iy];
                let mut get = |jx: isize, jy: isize, axis_coeff: f64| -> f64 {
                    let inside_x = jx >= 0 && (jx as usize) < nx;
                    let inside_y = jy >= 0 && (jy as usize) < ny;
                    if inside_x && inside_y {
                        te[jx as usize * ny + jy as usize]
                    } else if periodic {
                        let wx = jx.rem_euclid(nx as isize) as usize;
                        let wy = jy.rem_euclid(ny as isize) as usize;
                        te[wx * ny + wy]
                    } else {
                        outflow += axis_coeff * (c - bath);
                        bath
                    }
                };
                let (x, y) = (ix as isize, iy as isize);
                let lap_x = get(x - 1, y, ax) + get(x + 1, y, ax) - 2.0 * c;
                let lap_y = get(x, y - 1, ay) + get(x, y + 1, ay) - 2.0 * c;
                let v = c + ax * lap_x + ay * lap_y;
                if v < 0.0 {
                    return Err(MdError::NegativeTemperature { zone: ix * ny + iy, value: v });
                }
                self.scratch[ix * ny + iy] = v;
            }
        }
        std::mem::swap(&mut self.te, &mut self.scratch);
        self.sink += outflow * self.params.heat_capacity * self.zone_volume();
        Ok(())
    }

    /// Langevin exchange between each zone's electrons and its atoms over
    /// `dt`. Returns the energy moved into the lattice (eV).
    pub fn couple(
        &mut self,
        sys: &mut AtomSystem,
        dt: f64,
        rng: &mut RandomStream,
        zone_of_atom: &mut Vec<usize>,
    ) -> Result<f64, MdError> {
        let g = self.params.coupling;
        if g == 0.0 || sys.is_empty() {
            return Ok(0.0);
        }
        let nz = self.zones();
        let mut count = vec![0usize; nz];
        zone_of_atom.clear();
        for p in &sys.positions {
            let z = self.zone_of(p[0], p[1]);
            count[z] += 1;
            zone_of_atom.push(z);
        }
        let v = self.zone_volume();
        let damp: Vec<f64> = count
            .iter()
            .map(|&n| {
                if n == 0 {
                    1.0
                } else {
                    (-g * v / (3.0 * n as f64 * BOLTZMANN_EV) * dt).exp()
                }
            })
            .collect();
        let mut gained = vec![0.0; nz];
        for (i, vel) in sys.velocities.iter_mut().enumerate() {
            let z = zone_of_atom[i];
            let c = damp[z];
            let m = sys.masses[i];
            let sigma = ((1.0 - c * c) * BOLTZMANN_EV * self.te[z] / m).sqrt();
            let before = vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2];
            for q in vel.iter_mut() {
                *q = c * *q + sigma * rng.normal();
            }
            let after = vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2];
            gained[z] += 0.5 * m * (after - before);
        }
        let cv = self.params.heat_capacity * v;
        let mut total = 0.0;
        for (z, de) in gained.iter().enumerate() {
            self.te[z] -= de / cv;
            if self.te[z] < 0.0 {
                return Err(MdError::NegativeTemperature { zone: z, value: self.te[z] });
            }
            total += de;
        }
        Ok(total)
    }

    /// Energy per zone (eV) that the radial dose places in each column over
    /// the whole pulse, with the track along z through the cell centre.
    pub fn dose_per_zone(&self, kernel: &DoseKernel, state: &IonState, subsamples: usize) -> Vec<f64> {
        let m = subsamples.max(1);
        let scale = if state.beta > 0.0 && state.se > 0.0 {
            kernel.normalization(state).unwrap_or(0.0)
        } else {
            0.0
        };
        let (cx, cy) = (0.5 * self.nx as f64 * self.hx, 0.5 * self.ny as f64 * self.hy);
        let da = self.hx * self.hy / (m * m) as f64;
        (0..self.zones())
            .map(|z| {
                if scale == 0.0 {
                    return 0.0;
                }
                let ix = (z / self.ny) as f64;
                let iy = (z % self.ny) as f64;
                let mut e = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        let x = (ix + (a as f64 + 0.5) / m as f64) * self.hx - cx;
                        let y = (iy + (b as f64 + 0.5) / m as f64) * self.hy - cy;
                        let r = (x * x + y * y).sqrt();
                        // The kernel is normalized on [r_min, r_max]; the
                        // core carries no energy of its own.
                        if r >= kernel.r_min_nm {
                            e += kernel.dose_clamped(state, scale, r) * da;
                        }
                    }
                }
                e * self.lz
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, h: f64, boundary: Boundary, d: f64) -> ElectronicGrid {
        let cell = Cell::new([n as f64 * h, n as f64 * h, 1.0]);
        let p = TtmParams {
            diffusivity: d,
            coupling: 0.0,
            zone_nm: h,
            boundary,
            ..TtmParams::default()
        };
        ElectronicGrid::new(&cell, p, 0.0).unwrap()
    }

    #[test]
    fn periodic_diffusion_conserves_energy() {
        let mut g = grid(20, 0.5, Boundary::Periodic, 0.1);
        let c = g.zone_of(5.0, 5.0);
        g.te[c] = 1e5;
        let e0 = g.energy();
        g.diffuse(500.0).unwrap();
        assert!((g.energy() / e0 - 1.0).abs() < 1e-12);
        assert_eq!(g.sink, 0.0);
    }

    #[test]
    fn dirichlet_outflow_is_booked() {
        let mut g = grid(10, 0.5, Boundary::Dirichlet, 0.1);
        let c = g.zone_of(2.5, 2.5);
        g.te[c] = 1e5;
        let e0 = g.energy();
        g.diffuse(2000.0).unwrap();
        assert!(g.sink > 0.0);
        assert!(((g.energy() + g.sink) / e0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn point_source_spreads_like_heat_kernel() {
        // <r²> of a 2-D heat kernel grows as 4Dt; a single zone starts with h²/6.
        let h = 0.1;
        let d = 0.05;
        let mut g = grid(301, h, Boundary::Periodic, d);
        let c = g.zone_of(15.05, 15.05);
        g.te[c] = 1.0;
        let t = 100.0;
        g.diffuse(t).unwrap();
        let (cx, cy) = g.zone_center(c);
        let (mut m0, mut m2) = (0.0, 0.0);
        for z in 0..g.zones() {
            let (x, y) = g.zone_center(z);
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            m0 += g.te[z];
            m2 += g.te[z] * r2;
        }
        let want = 4.0 * d * t + h * h / 6.0;
        assert!((m2 / m0 / want - 1.0).abs() < 0.02, "{} {want}", m2 / m0);
        // centre value against the continuum kernel E/(4πDt)
        let peak = g.te[c] / (h * h);
        let analytic = 1.0 / (4.0 * std::f64::consts::PI * d * t);
        assert!((peak / analytic - 1.0).abs() < 0.02, "{peak} {analytic}");
    }

    #[test]
    fn explicit_step_beyond_limit_rejected() {
        let mut g = grid(4, 0.5, Boundary::Periodic, 0.1);
        assert!(matches!(g.ftcs(10.0), Err(MdError::Cfl { .. })));
    }

    #[test]
    fn zone_dose_conserves_stopping_power() {
        use crate::radialdose::{ion_state_at, DoseKernel};
        use crate::stopping::StoppingTable;
        // Near the end of range r_max fits inside the cell, so the columns
        // must hold the full S_e.
        let table = StoppingTable::uranium_1100mev();
        let kernel = DoseKernel::default();
        let state = ion_state_at(&table, 28.5, &kernel).unwrap();
        assert!(kernel.r_max(state.beta) < 3.5);
        let cell = Cell::new([8.0, 8.0, 1.0]);
        let g = ElectronicGrid::new(&cell, TtmParams::default(), 300.0).unwrap();
        let total: f64 = g.dose_per_zone(&kernel, &state, 24).iter().sum();
        let expected = state.se * 1e3 * cell.lengths[2];
        assert!((total / expected - 1.0).abs() < 0.02, "{total} vs {expected}");
    }
}
