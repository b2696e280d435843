//! Photoluminescence spectra of GR1, NV⁰ and NV⁻: forward synthesis,
//! non-negative decomposition into component weights, and depth profiles.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;
pub use crate::units::stage_to_depth;

pub const BASIS_FILE: &str = include_str!("../data/pl_basis.toml");

/// hc in eV·nm.
const HC_EV_NM: f64 = 1239.841_98;

/// Ridge term relative to each diagonal entry of the normal matrix.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum SpectraError {
    #[error("basis file: {0}")]
    Basis(String),
    #[error("spectrum invalid: {0}")]
    Spectrum(String),
    #[error("grid does not cover component {0}")]
    Coverage(String),
    #[error("components are indistinguishable on this grid")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    pub zpl_nm: f64,
    pub zpl_fwhm_nm: f64,
    pub lorentz_mix: f64,
    pub zpl_fraction: f64,
    pub sideband_shape: f64,
    pub sideband_scale_ev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisFile {
    window_nm: [f64; 2],
    table_step_nm: f64,
    component: Vec<ComponentSpec>,
}

/// Component line shapes tabulated on a fine grid over the instrument window,
/// each normalized to unit area.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentBasis {
    pub components: Vec<ComponentSpec>,
    pub window_nm: [f64; 2],
    step: f64,
    tables: Vec<Vec<f64>>,
}

fn pseudo_voigt(x: f64, center: f64, fwhm: f64, eta: f64) -> f64 {
    let hw = 0.5 * fwhm;
    let lor = hw / std::f64::consts::PI / ((x - center).powi(2) + hw * hw);
    let s = fwhm / 2.354_820_045_030_949;
    let gau = (-0.5 * ((x - center) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    eta * lor + (1.0 - eta) * gau
}

impl ComponentSpec {
    fn validate(&self) -> Result<(), SpectraError> {
        let bad = |what: &str| Err(SpectraError::Basis(format!("{}: {what}", self.name)));
        if !(self.zpl_nm > 0.0 && self.zpl_fwhm_nm > 0.0 && self.sideband_scale_ev > 0.0) {
            return bad("line positions and widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.lorentz_mix) || !(0.0..=1.0).contains(&self.zpl_fraction) {
            return bad("mixing fractions must lie in [0, 1]");
        }
        if self.sideband_shape < 0.0 {
            return bad("sideband shape must be non-negative");
        }
        Ok(())
    }

    /// Unnormalized sideband density per nm.
    fn sideband(&self, lambda: f64) -> f64 {
        let de = HC_EV_NM / self.zpl_nm - HC_EV_NM / lambda;
        if de <= 0.0 {
            return 0.0;
        }
        let jac = HC_EV_NM / (lambda * lambda);
        de.powf(self.sideband_shape) * (-de / self.sideband_scale_ev).exp() * jac
    }
}

impl ComponentBasis {
    pub fn bundled() -> Self {
        Self::from_toml(BASIS_FILE).expect("bundled PL basis parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, SpectraError> {
        let f: BasisFile = toml::from_str(text).map_err(|e| SpectraError::Basis(e.to_string()))?;
        let [lo, hi] = f.window_nm;
        if !(hi > lo && lo > 0.0 && f.table_step_nm > 0.0) {
            return Err(SpectraError::Basis("window must be increasing and step positive".into()));
        }
        if f.component.is_empty() {
            return Err(SpectraError::Basis("no components".into()));
        }
        let n = ((hi - lo) / f.table_step_nm).round() as usize + 1;
        let step = (hi - lo) / (n - 1) as f64;
        let mut tables = Vec::new();
        for c in &f.component {
            c.validate()?;
            let sb: Vec<f64> = (0..n).map(|i| c.sideband(lo + i as f64 * step)).collect();
            let zp: Vec<f64> =
                (0..n).map(|i| pseudo_voigt(lo + i as f64 * step, c.zpl_nm, c.zpl_fwhm_nm, c.lorentz_mix)).collect();
            let (a_sb, a_zp) = (trapezoid(&sb, step), trapezoid(&zp, step));
            if !(a_sb > 0.0 && a_zp > 0.0) {
                return Err(SpectraError::Basis(format!("{} has no support in the window", c.name)));
            }
            let t: Vec<f64> = sb
                .iter()
                .zip(&zp)
                .map(|(s, z)| (1.0 - c.zpl_fraction) * s / a_sb + c.zpl_fraction * z / a_zp)
                .collect();
            tables.push(t);
        }
        Ok(Self { components: f.component, window_nm: f.window_nm, step, tables })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    /// Normalized density of component `k` at wavelength `lambda` (per nm);
    /// zero outside the window.
    pub fn shape(&self, k: usize, lambda: f64) -> f64 {
        let [lo, hi] = self.window_nm;
        if !(lambda >= lo && lambda <= hi) {
            return 0.0;
        }
        let t = &self.tables[k];
        let u = (lambda - lo) / self.step;
        let i = (u.floor() as usize).min(t.len() - 2);
        let f = u - i as f64;
        t[i] * (1.0 - f) + t[i + 1] * f
    }
}

fn trapezoid(y: &[f64], h: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    h * (y.iter().sum::<f64>() - 0.5 * (y[0] + y[y.len() - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub wavelength_nm: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Corrected probe depth, µm.
    pub depth_um: Option<f64>,
}

impl Spectrum {
    pub fn validate(&self) -> Result<(), SpectraError> {
        if self.wavelength_nm.len() != self.intensity.len() {
            return Err(SpectraError::Spectrum("column lengths differ".into()));
        }
        if self.wavelength_nm.len() < 2 || self.wavelength_nm.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpectraError::Spectrum("wavelength grid must be strictly increasing".into()));
        }
        if self.intensity.iter().any(|v| !v.is_finite()) {
            return Err(SpectraError::Spectrum("non-finite intensity".into()));
        }
        Ok(())
    }

    /// Two-column CSV. A header line `# depth_um = <value>` sets the depth;
    /// other non-numeric lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self, SpectraError> {
        let mut s = Spectrum { wavelength_nm: Vec::new(), intensity: Vec::new(), depth_um: None };
        for line in text.lines() {
            let l = line.trim();
            if let Some(rest) = l.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    if k.trim() == "depth_um" {
                        s.depth_um = Some(
                            v.trim().parse().map_err(|_| SpectraError::Spectrum(format!("bad depth '{}'", v.trim())))?,
                        );
                    }
                }
                continue;
            }
            let cols: Vec<&str> = l.split([',', '\t']).map(str::trim).collect();
            if let [a, b] = cols.as_slice() {
                if let (Ok(x), Ok(y)) = (a.parse::<f64>(), b.parse::<f64>()) {
                    s.wavelength_nm.push(x);
                    s.intensity.push(y);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(d) = self.depth_um {
            out.push_str(&format!("# depth_um = {d}\n"));
        }
        out.push_str("wavelength_nm,counts\n");
        for (x, y) in self.wavelength_nm.iter().zip(&self.intensity) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    /// One weight per basis component, in basis order.
    pub weights: Vec<f64>,
    /// Linear baseline `b0 + b1·u` in the reduced coordinate u ∈ [−1, 1]
    /// over the grid. A quadratic term trades off against the broad phonon
    /// sidebands and is left out.
    pub baseline: [f64; 2],
    pub residual_norm: f64,
}

impl ComponentWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights, baseline: [0.0; 2], residual_norm: 0.0 }
    }
}

fn reduced(grid: &[f64]) -> impl Fn(f64) -> f64 {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    move |x| 2.0 * (x - lo) / (hi - lo) - 1.0
}

pub fn synth_spectrum(
    weights: &ComponentWeights,
    basis: &ComponentBasis,
    grid: &[f64],
) -> Result<Spectrum, SpectraError> {
    if weights.weights.len() != basis.len() {
        return Err(SpectraError::Spectrum(format!(
            "{} weights for {} components",
            weights.weights.len(),
            basis.len()
        )));
    }
    let s = Spectrum { wavelength_nm: grid.to_vec(), intensity: vec![0.0; grid.len()], depth_um: None };
    s.validate()?;
    check_coverage(basis, grid)?;
    let u = reduced(grid);
    let b = weights.baseline;
    let intensity = grid
        .iter()
        .map(|&x| {
            let ux = u(x);
            let comp: f64 = weights.weights.iter().enumerate().map(|(k, w)| w * basis.shape(k, x)).sum();
            comp + b[0] + b[1] * ux
        })
        .collect();
    Ok(Spectrum { intensity, ..s })
}

fn check_coverage(basis: &ComponentBasis, grid: &[f64]) -> Result<(), SpectraError> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    for c in &basis.components {
        if c.zpl_nm < lo || c.zpl_nm > hi {
            return Err(SpectraError::Coverage(c.name.clone()));
        }
    }
    Ok(())
}

/// Lawson–Hanson active set for `min ‖Ax − b‖²` with `x[k] ≥ 0` for
/// `k < n_constrained` and the remaining variables free. Works on the normal
/// equations with a small ridge.
/// A column of zeros is treated as unidentifiable.
pub fn nnls_partial(a: &DMatrix<f64>, b: &DVector<f64>, n_constrained: usize) -> Result<DVector<f64>, SpectraError> {
    let m = a.ncols();
    let mut ata = a.transpose() * a;
    let atb = a.transpose() * b;
    // ridge relative to each column's own scale keeps the solution scale-free
    for k in 0..m {
        ata[(k, k)] *= 1.0 + RIDGE;
    }
    let mut passive: Vec<bool> = (0..m).map(|k| k >= n_constrained).collect();
    let mut x = DVector::zeros(m);
    let solve = |passive: &[bool]| -> Result<DVector<f64>, SpectraError> {
        let idx: Vec<usize> = (0..m).filter(|&k| passive[k]).collect();
        let mut out = DVector::zeros(m);
        if idx.is_empty() {
            return Ok(out);
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| ata[(idx[i], idx[j])]);
        let rhs = DVector::from_fn(idx.len(), |i, _| atb[idx[i]]);
        let z = sub.cholesky().ok_or(SpectraError::Singular)?.solve(&rhs);
        for (i, &k) in idx.iter().enumerate() {
            out[k] = z[i];
        }
        Ok(out)
    };
    let tol = 1e-12 * atb.amax().max(1e-300);
    for _ in 0..(10 * m + 10) {
        let mut z = solve(&passive)?;
        // inner loop: back off until every constrained passive variable is positive
        for _ in 0..(m + 1) {
            let bad: Vec<usize> = (0..n_constrained).filter(|&k| passive[k] && z[k] <= 0.0).collect();
            if bad.is_empty() {
                break;
            }
            let alpha = bad.iter().map(|&k| x[k] / (x[k] - z[k])).fold(f64::INFINITY, f64::min);
            x = &x + (&z - &x) * alpha;
            for k in 0..n_constrained {
                if passive[k] && x[k] <= 1e-15 * x.amax().max(1.0) {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            z = solve(&passive)?;
        }
        x = z;
        let grad = &atb - &ata * &x;
        let next = (0..n_constrained).filter(|&k| !passive[k] && grad[k] > tol).max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        match next {
            Some(k) => passive[k] = true,
            None => return Ok(x),
        }
    }
    Ok(x)
}

pub fn deconvolve(spectrum: &Spectrum, basis: &ComponentBasis) -> Result<ComponentWeights, SpectraError> {
    spectrum.validate()?;
    let grid = &spectrum.wavelength_nm;
    check_coverage(basis, grid)?;
    let n = grid.len();
    let nc = basis.len();
    let u = reduced(grid);
    let a = DMatrix::from_fn(n, nc + 2, |i, k| {
        if k < nc {
            basis.shape(k, grid[i])
        } else {
            u(grid[i]).powi((k - nc) as i32)
        }
    });
    // identifiability of the full design
    let sv = a.clone().svd(false, false).singular_values;
    if sv.min() <= 1e-9 * sv.max() {
        return Err(SpectraError::Singular);
    }
    let b = DVector::from_column_slice(&spectrum.intensity);
    let x = nnls_partial(&a, &b, nc)?;
    let r = &b - &a * &x;
    Ok(ComponentWeights {
        weights: x.iter().take(nc).map(|v| v.max(0.0)).collect(),
        baseline: [x[nc], x[nc + 1]],
        residual_norm: r.norm(),
    })
}

/// Photon-counting noise: Gaussian with variance proportional to the
/// local intensity, scaled so the spectrum's maximum has the given SNR.
pub fn add_noise(spectrum: &Spectrum, snr: f64, rng: &mut RandomStream) -> Spectrum {
    let peak = spectrum.intensity.iter().cloned().fold(0.0, f64::max);
    if snr <= 0.0 || peak <= 0.0 {
        return spectrum.clone();
    }
    // counts at the peak are snr², so one count is peak / snr²
    let quantum = peak / (snr * snr);
    Spectrum {
        intensity: spectrum.intensity.iter().map(|v| v + (v.max(0.0) * quantum).sqrt() * rng.normal()).collect(),
        ..spectrum.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlProfile {
    pub names: Vec<String>,
    pub depth_um: Vec<f64>,
    /// Per component, intensity normalized to its own maximum.
    pub intensity: Vec<Vec<f64>>,
    /// Depths whose deconvolution failed (values there are zero).
    pub failed: Vec<bool>,
}

impl PlProfile {
    pub fn component(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|k| self.intensity[k].as_slice())
    }

    /// Decades spanned by the positive values of a component.
    pub fn decades(&self, name: &str) -> Option<f64> {
        let v = self.component(name)?;
        let pos: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0).collect();
        let (lo, hi) = pos.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        if pos.is_empty() {
            None
        } else {
            Some((hi / lo).log10())
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("depth_um");
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",failed\n");
        for (i, d) in self.depth_um.iter().enumerate() {
            s.push_str(&format!("{d}"));
            for c in &self.intensity {
                s.push_str(&format!(",{}", c[i]));
            }
            s.push_str(&format!(",{}\n", self.failed[i]));
        }
        s
    }
}

/// Deconvolves every spectrum of a depth stack and normalizes each component
/// to its maximum over depth.
pub fn depth_profile_pl(stack: &[Spectrum], basis: &ComponentBasis) -> Result<PlProfile, SpectraError> {
    let mut depth_um = Vec::with_capacity(stack.len());
    for (i, s) in stack.iter().enumerate() {
        let d = s.depth_um.ok_or_else(|| SpectraError::Spectrum(format!("spectrum {i} has no depth")))?;
        if depth_um.last().is_some_and(|&p| d < p) {
            return Err(SpectraError::Spectrum("stack not sorted by depth".into()));
        }
        depth_um.push(d);
    }
    let fits: Vec<Option<ComponentWeights>> = stack.par_iter().map(|s| deconvolve(s, basis).ok()).collect();
    let nc = basis.len();
    let mut intensity = vec![vec![0.0; stack.len()]; nc];
    let failed: Vec<bool> = fits.iter().map(Option::is_none).collect();
    for (i, f) in fits.iter().enumerate() {
        if let Some(w) = f {
            for k in 0..nc {
                intensity[k][i] = w.weights[k];
            }
        }
    }
    for c in &mut intensity {
        let m = c.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            c.iter_mut().for_each(|v| *v /= m);
        }
    }
    Ok(PlProfile { names: basis.components.iter().map(|c| c.name.clone()).collect(), depth_um, intensity, failed })
}

/// Defect densities on a common depth grid, per nm of track or per volume;
/// only ratios matter downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectDensities {
    pub depth_um: Vec<f64>,
    pub isolated_vacancies: Vec<f64>,
    pub clustered_vacancies: Vec<f64>,
    pub nv_minus: Vec<f64>,
    pub nv_zero: Vec<f64>,
}

/// Brightness per defect for each emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brightness {
    pub gr1: f64,
    pub nv_zero: f64,
    pub nv_minus: f64,
}

impl Default for Brightness {
    fn default() -> Self {
        Self { gr1: 1.0, nv_zero: 1.0, nv_minus: 1.0 }
    }
}

/// Expected component intensities: GR1 from isolated vacancies, NV lines
/// from NV populations. Clustered vacancies are dark.
pub fn predict_pl_from_defects(d: &DefectDensities, k: &Brightness) -> PlProfile {
    let scale = |v: &[f64], g: f64| v.iter().map(|x| g * x).collect::<Vec<_>>();
    PlProfile {
        names: vec!["GR1".into(), "NV0".into(), "NV-".into()],
        depth_um: d.depth_um.clone(),
        intensity: vec![
            scale(&d.isolated_vacancies, k.gr1),
            scale(&d.nv_zero, k.nv_zero),
            scale(&d.nv_minus, k.nv_minus),
        ],
        failed: vec![false; d.depth_um.len()],
    }
}

/// Uniform wavelength grid across the basis window.
pub fn default_grid(basis: &ComponentBasis, n: usize) -> Vec<f64> {
    let [lo, hi] = basis.window_nm;
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Synthetic depth stack: one spectrum per depth from per-depth weights,
/// with per-spectrum noise at the given peak SNR (0 disables noise).
pub fn synth_stack(
    depths: &[f64],
    weights: &[Vec<f64>],
    basis: &ComponentBasis,
    grid: &[f64],
    snr: f64,
    rng: &mut RandomStream,
) -> Result<Vec<Spectrum>, SpectraError> {
    depths
        .iter()
        .zip(weights)
        .map(|(&z, w)| {
            let mut s = synth_spectrum(&ComponentWeights::new(w.clone()), basis, grid)?;
            if snr > 0.0 {
                s = add_noise(&s, snr, rng);
            }
            s.depth_um = Some(z);
            Ok(s)
        })
        .collect()
}
