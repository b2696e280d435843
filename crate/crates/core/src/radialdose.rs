//! Delta-ray radial dose around the ion path.
//!
//! The kernel is the Waligórski–Hamm–Katz point-target form
//!
//! ```text
//! D(r) ∝ (1/r) · (1 − (r+θ)/(T+θ))^(1/α) / (r+θ) · (1 + K(r))
//! ```
//!
//! with T the range of the fastest delta electron at the local velocity, θ
//! the range of a 10 eV electron, and K a small near-axis correction. The
//! absolute scale is fixed so that `2π ∫ D r dr` over `[r_min, r_max]`
//! equals `f_local · S_e`, i.e. the table's stopping power sets the energy
//! and the kernel only decides where it goes. Slower ions have a shorter T,
//! so the same energy lands closer to the axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stopping::StoppingTable;
use crate::units::{AMU_MEV, ELECTRON_MASS_KEV};

#[derive(Debug, Error, PartialEq)]
pub enum DoseError {
    #[error("depth {z} µm outside [0, {range}] µm")]
    DepthOutOfRange { z: f64, range: f64 },
    #[error("radius {r} nm outside [{r_min}, {r_max}] nm")]
    RadiusOutOfRange { r: f64, r_min: f64, r_max: f64 },
    #[error("ion is at rest; no delta rays")]
    AtRest,
    #[error("invalid grid: {0}")]
    Grid(String),
}

/// Kernel parameters. Defaults follow the Katz-group fits; all are
/// exposed through the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DoseKernel {
    /// Inner cutoff, nm.
    pub r_min_nm: f64,
    /// Fraction of S_e deposited inside r_max.
    pub f_local: f64,
    /// Electron range-energy prefactor, g cm⁻² keV^-α.
    pub range_k: f64,
    /// Range-energy exponent below 1 keV.
    pub alpha_low: f64,
    /// Range-energy exponent at and above 1 keV.
    pub alpha_high: f64,
    /// Electron energy defining θ, keV.
    pub theta_energy_kev: f64,
    /// Target mass density, g/cm³.
    pub density_g_cm3: f64,
    /// Apply the near-axis 1 + K(r) correction.
    pub near_axis_correction: bool,
    /// Effective-charge coefficient in Z(1 − exp(−c β Z^-2/3)).
    pub barkas_coefficient: f64,
    /// Radial quadrature nodes (log spaced).
    pub quadrature_nodes: usize,
}

impl Default for DoseKernel {
    fn default() -> Self {
        Self {
            r_min_nm: 0.3,
            f_local: 1.0,
            range_k: 6e-6,
            alpha_low: 1.079,
            alpha_high: 1.667,
            theta_energy_kev: 0.01,
            density_g_cm3: 3.515,
            near_axis_correction: false,
            barkas_coefficient: 125.0,
            quadrature_nodes: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IonState {
    pub depth_um: f64,
    pub energy_mev: f64,
    pub beta: f64,
    pub z_eff: f64,
    /// Local electronic stopping, keV/nm.
    pub se: f64,
}

impl IonState {
    /// State with an arbitrary velocity and stopping, for kernel studies.
    pub fn synthetic(beta: f64, z_eff: f64, se: f64) -> Self {
        Self {
            depth_um: 0.0,
            energy_mev: 0.0,
            beta,
            z_eff,
            se,
        }
    }
}

/// Residual energy, velocity and effective charge at depth `z_um`.
pub fn ion_state_at(table: &StoppingTable, z_um: f64, kernel: &DoseKernel) -> Result<IonState, DoseError> {
    let range = table.range();
    if !(0.0..=range).contains(&z_um) {
        return Err(DoseError::DepthOutOfRange { z: z_um, range });
    }
    let energy = (table.energy_mev - table.energy_lost(z_um)).max(0.0);
    let beta = beta_from_energy(energy, table.ion.mass_u);
    let z1 = table.ion.atomic_number;
    let z_eff = z1 * (1.0 - (-kernel.barkas_coefficient * beta * z1.powf(-2.0 / 3.0)).exp());
    Ok(IonState {
        depth_um: z_um,
        energy_mev: energy,
        beta,
        z_eff,
        se: table.stopping_at_depth(z_um).0,
    })
}

pub fn beta_from_energy(energy_mev: f64, mass_u: f64) -> f64 {
    let gamma = 1.0 + energy_mev / (mass_u * AMU_MEV);
    (1.0 - 1.0 / (gamma * gamma)).sqrt()
}

impl DoseKernel {
    /// Maximum delta-electron energy, keV.
    pub fn w_max_kev(&self, beta: f64) -> f64 {
        let g2 = 1.0 / (1.0 - beta * beta);
        2.0 * ELECTRON_MASS_KEV * beta * beta * g2
    }

    fn alpha_for(&self, w_kev: f64) -> f64 {
        if w_kev < 1.0 {
            self.alpha_low
        } else {
            self.alpha_high
        }
    }

    /// Practical electron range in nm for energy `w_kev`.
    pub fn electron_range_nm(&self, w_kev: f64) -> f64 {
        let areal = self.range_k * w_kev.powf(self.alpha_for(w_kev));
        areal / self.density_g_cm3 * 1e7
    }

    /// Outer radius of the dose profile at this velocity, nm.
    pub fn r_max(&self, beta: f64) -> f64 {
        self.electron_range_nm(self.w_max_kev(beta)).max(2.0 * self.r_min_nm)
    }

    /// Unnormalized kernel shape.
    fn shape(&self, beta: f64, r: f64) -> f64 {
        let w = self.w_max_kev(beta);
        let alpha = self.alpha_for(w);
        let t_max = self.r_max(beta);
        let theta = self.electron_range_nm(self.theta_energy_kev);
        let tail = (1.0 - (r + theta) / (t_max + theta)).max(0.0).powf(1.0 / alpha);
        let mut d = tail / (r * (r + theta));
        if self.near_axis_correction {
            d *= 1.0 + self.near_axis_k(beta, r);
        }
        d
    }

    fn near_axis_k(&self, beta: f64, r: f64) -> f64 {
        let b = 0.1;
        if r <= b {
            return 0.0;
        }
        let a = 8.0 * beta.cbrt();
        let c = 1.5 + 5.0 * beta;
        let x = (r - b) / c;
        a * x * (-x * x).exp()
    }

    /// `2π ∫ shape · r dr` over [r_min, r_max], Simpson in ln r.
    fn shape_integral(&self, beta: f64) -> f64 {
        let (a, b) = (self.r_min_nm.ln(), self.r_max(beta).ln());
        let n = self.quadrature_nodes.max(200) * 4;
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let f = |u: f64| {
            let r = u.exp();
            self.shape(beta, r) * r * r
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        std::f64::consts::TAU * s * h / 3.0
    }

    fn scale(&self, state: &IonState) -> Result<f64, DoseError> {
        if !(state.beta > 0.0) {
            return Err(DoseError::AtRest);
        }
        let target = self.f_local * state.se * 1e3; // eV/nm
        Ok(target / self.shape_integral(state.beta))
    }

    /// Dose at radius `r` in eV/nm³.
    pub fn radial_dose(&self, state: &IonState, r: f64) -> Result<f64, DoseError> {
        let r_max = self.r_max(state.beta);
        if !(r >= self.r_min_nm && r <= r_max) {
            return Err(DoseError::RadiusOutOfRange {
                r,
                r_min: self.r_min_nm,
                r_max,
            });
        }
        Ok(self.scale(state)? * self.shape(state.beta, r))
    }

    /// Full radial profile on log-spaced nodes.
    pub fn profile(&self, state: &IonState) -> Result<RadialDoseProfile, DoseError> {
        let n = self.quadrature_nodes.max(200);
        let scale = self.scale(state)?;
        let r_max = self.r_max(state.beta);
        let (a, b) = (self.r_min_nm.ln(), r_max.ln());
        let radii: Vec<f64> = (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
            .collect();
        let mut dose: Vec<f64> = radii.iter().map(|&r| scale * self.shape(state.beta, r)).collect();
        // the outermost node sits exactly on the delta-ray range
        if let Some(last) = dose.last_mut() {
            *last = 0.0;
        }
        Ok(RadialDoseProfile {
            radii,
            dose,
            f_local: self.f_local,
            se: state.se,
            r_min: self.r_min_nm,
            r_max,
            scale,
            beta: state.beta,
        })
    }

    /// Dose evaluated at any radius: clamps inside `r_min` to the core
    /// value and returns zero past `r_max`.
    pub fn dose_clamped(&self, state: &IonState, scale: f64, r: f64) -> f64 {
        let r_max = self.r_max(state.beta);
        if r >= r_max {
            return 0.0;
        }
        scale * self.shape(state.beta, r.max(self.r_min_nm))
    }

    /// Normalization factor (eV/nm³ per unit shape) for a state.
    pub fn normalization(&self, state: &IonState) -> Result<f64, DoseError> {
        self.scale(state)
    }
}

/// Free-function form of [`DoseKernel::radial_dose`].
pub fn radial_dose(kernel: &DoseKernel, state: &IonState, r: f64) -> Result<f64, DoseError> {
    kernel.radial_dose(state, r)
}

#[derive(Debug, Clone, Serialize)]
pub struct RadialDoseProfile {
    pub radii: Vec<f64>,
    pub dose: Vec<f64>,
    pub f_local: f64,
    pub se: f64,
    pub r_min: f64,
    pub r_max: f64,
    scale: f64,
    beta: f64,
}

impl RadialDoseProfile {
    /// `2π ∫ D r dr` over the profile nodes (trapezoid in ln r), eV/nm.
    pub fn integral(&self) -> f64 {
        let mut s = 0.0;
        for i in 1..self.radii.len() {
            let (r0, r1) = (self.radii[i - 1], self.radii[i]);
            let f0 = self.dose[i - 1] * r0 * r0;
            let f1 = self.dose[i] * r1 * r1;
            s += 0.5 * (f0 + f1) * (r1.ln() - r0.ln());
        }
        std::f64::consts::TAU * s
    }
}

/// Rectangular (depth, radius) grid description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FieldGrid {
    pub depth_points: usize,
    pub radius_points: usize,
    pub r_lo_nm: f64,
    pub r_hi_nm: f64,
    /// Upper depth; `None` means the table range.
    pub z_hi_um: Option<f64>,
}

impl Default for FieldGrid {
    fn default() -> Self {
        Self {
            depth_points: 121,
            radius_points: 160,
            r_lo_nm: 0.3,
            r_hi_nm: 30.0,
            z_hi_um: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyDensityField {
    pub depths_um: Vec<f64>,
    /// Log-spaced radii, nm.
    pub radii_nm: Vec<f64>,
    /// `values[iz][ir]`, eV/nm³.
    pub values: Vec<Vec<f64>>,
}

impl EnergyDensityField {
    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|c| c.iter().copied())
            .fold(0.0, f64::max)
    }
}

pub fn energy_density_map(
    table: &StoppingTable,
    kernel: &DoseKernel,
    grid: &FieldGrid,
) -> Result<EnergyDensityField, DoseError> {
    if grid.depth_points < 2 || grid.radius_points < 2 {
        return Err(DoseError::Grid("need at least 2 points per axis".into()));
    }
    if !(grid.r_lo_nm > 0.0 && grid.r_hi_nm > grid.r_lo_nm) {
        return Err(DoseError::Grid("radius bounds must satisfy 0 < lo < hi".into()));
    }
    let z_hi = grid.z_hi_um.unwrap_or(table.range());
    if !(z_hi > 0.0) || z_hi > table.range() {
        return Err(DoseError::Grid(format!("depth bound {z_hi} outside the table range")));
    }
    let depths: Vec<f64> = (0..grid.depth_points)
        .map(|i| z_hi * i as f64 / (grid.depth_points - 1) as f64)
        .collect();
    let (a, b) = (grid.r_lo_nm.ln(), grid.r_hi_nm.ln());
    let radii: Vec<f64> = (0..grid.radius_points)
        .map(|i| (a + (b - a) * i as f64 / (grid.radius_points - 1) as f64).exp())
        .collect();
    let values = depths
        .par_iter()
        .map(|&z| -> Result<Vec<f64>, DoseError> {
            let state = ion_state_at(table, z, kernel)?;
            if state.se <= 0.0 || state.beta <= 0.0 {
                return Ok(vec![0.0; radii.len()]);
            }
            let scale = kernel.normalization(&state)?;
            let r_max = kernel.r_max(state.beta);
            Ok(radii
                .iter()
                .map(|&r| {
                    if r < kernel.r_min_nm || r >= r_max {
                        0.0
                    } else {
                        scale * kernel.shape(state.beta, r)
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EnergyDensityField {
        depths_um: depths,
        radii_nm: radii,
        values,
    })
}

/// One connected piece of an iso-line, as (radius nm, depth µm) points.
pub type Polyline = Vec<(f64, f64)>;

/// Marching-squares iso-contour of the field at `level`.
pub fn iso_contour(field: &EnergyDensityField, level: f64) -> Vec<Polyline> {
    if !(level > 0.0) || level > field.max() {
        return Vec::new();
    }
    let nz = field.depths_um.len();
    let nr = field.radii_nm.len();
    let val = |iz: usize, ir: usize| field.values[iz][ir] - level;
    // edge crossing between two grid nodes, in (r, z)
    let cross = |(z0, r0): (usize, usize), (z1, r1): (usize, usize)| -> (f64, f64) {
        let (v0, v1) = (val(z0, r0), val(z1, r1));
        let t = v0 / (v0 - v1);
        let r = field.radii_nm[r0] + t * (field.radii_nm[r1] - field.radii_nm[r0]);
        let z = field.depths_um[z0] + t * (field.depths_um[z1] - field.depths_um[z0]);
        (r, z)
    };
    let mut segments: Vec<((f64, f64), (f64, f64))> = Vec::new();
    for iz in 0..nz - 1 {
        for ir in 0..nr - 1 {
            let c = [(iz, ir), (iz, ir + 1), (iz + 1, ir + 1), (iz + 1, ir)];
            let inside: Vec<bool> = c.iter().map(|&(z, r)| val(z, r) >= 0.0).collect();
            let mut pts = Vec::with_capacity(4);
            for k in 0..4 {
                let (a, b) = (c[k], c[(k + 1) % 4]);
                if inside[k] != inside[(k + 1) % 4] {
                    pts.push(cross(a, b));
                }
            }
            match pts.len() {
                2 => segments.push((pts[0], pts[1])),
                4 => {
                    segments.push((pts[0], pts[1]));
                    segments.push((pts[2], pts[3]));
                }
                _ => {}
            }
        }
    }
    chain_segments(segments)
}

fn chain_segments(mut segs: Vec<((f64, f64), (f64, f64))>) -> Vec<Polyline> {
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9;
    let mut lines = Vec::new();
    while let Some((a, b)) = segs.pop() {
        let mut line = vec![a, b];
        loop {
            let tail = *line.last().unwrap();
            let head = line[0];
            if let Some(pos) = segs.iter().position(|s| close(s.0, tail) || close(s.1, tail)) {
                let s = segs.swap_remove(pos);
                line.push(if close(s.0, tail) { s.1 } else { s.0 });
            } else if let Some(pos) = segs.iter().position(|s| close(s.0, head) || close(s.1, head)) {
                let s = segs.swap_remove(pos);
                line.insert(0, if close(s.0, head) { s.1 } else { s.0 });
            } else {
                break;
            }
        }
        lines.push(line);
    }
    lines.sort_by(|a, b| b.len().cmp(&a.len()));
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surface_state() -> IonState {
        let t = StoppingTable::uranium_1100mev();
        ion_state_at(&t, 0.0, &DoseKernel::default()).unwrap()
    }

    #[test]
    fn surface_energy_exact() {
        let s = surface_state();
        assert_eq!(s.energy_mev, 1100.0);
        assert!(s.beta > 0.09 && s.beta < 0.11);
    }

    #[test]
    fn end_of_range_energy_small() {
        let t = StoppingTable::uranium_1100mev();
        let s = ion_state_at(&t, t.range(), &DoseKernel::default()).unwrap();
        assert!(s.energy_mev < 0.05 * t.energy_mev);
        assert!(ion_state_at(&t, t.range() + 0.1, &DoseKernel::default()).is_err());
    }

    #[test]
    fn dose_decreasing() {
        let k = DoseKernel::default();
        let s = surface_state();
        let p = k.profile(&s).unwrap();
        for w in p.dose.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn radius_outside_domain() {
        let k = DoseKernel::default();
        let s = surface_state();
        assert!(matches!(k.radial_dose(&s, 0.1), Err(DoseError::RadiusOutOfRange { .. })));
        assert!(matches!(k.radial_dose(&s, 1e6), Err(DoseError::RadiusOutOfRange { .. })));
    }

    #[test]
    fn doubling_stopping_doubles_dose() {
        let k = DoseKernel::default();
        let a = IonState::synthetic(0.05, 30.0, 20.0);
        let b = IonState::synthetic(0.05, 30.0, 40.0);
        for r in [0.3, 0.7, 2.0, 11.0] {
            let da = k.radial_dose(&a, r).unwrap();
            let db = k.radial_dose(&b, r).unwrap();
            assert!((db / da - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slower_ion_denser_core() {
        let k = DoseKernel::default();
        let mut prev = 0.0;
        for beta in [0.12, 0.1, 0.08, 0.06, 0.04, 0.03, 0.02] {
            let d = k.radial_dose(&IonState::synthetic(beta, 40.0, 30.0), k.r_min_nm).unwrap();
            assert!(d > prev, "beta {beta}: {d} <= {prev}");
            prev = d;
        }
    }

    #[test]
    fn contour_above_max_is_empty() {
        let t = StoppingTable::uranium_1100mev();
        let f = energy_density_map(&t, &DoseKernel::default(), &FieldGrid::default()).unwrap();
        assert!(iso_contour(&f, f.max() * 1.01).is_empty());
        assert!(!iso_contour(&f, 100.0).is_empty());
    }
}
