//! Least-squares fits of pulsed-ODMR traces: ESR dips, Rabi oscillations,
//! T1 relaxation and Hahn-echo decay.
//!
//! Time constants come back in the abscissa's own unit, so a trace sampled
//! in µs yields τ in µs and f in MHz.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("trace invalid: {0}")]
    Trace(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("model {model} expects {expected} parameters, got {got}")]
    ParamCount { model: String, expected: usize, got: usize },
    #[error("no resolvable feature in trace")]
    NoFeature,
    #[error("spectral peak at {0} sits at the Nyquist limit; sampling too coarse")]
    Aliasing(f64),
    #[error("optimizer did not converge")]
    NoConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl Trace {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, FitError> {
        let t = Self { x, y, sigma: None };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.x.len() != self.y.len() {
            return Err(FitError::Trace("abscissa and ordinate lengths differ".into()));
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.x.len() || s.iter().any(|v| !(*v > 0.0)) {
                return Err(FitError::Trace("uncertainties must be positive, one per point".into()));
            }
        }
        if self.x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FitError::Trace("abscissa must be strictly increasing".into()));
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(FitError::Trace("non-finite value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Two or three numeric columns; lines that do not parse as numbers
    /// (headers, comments) are skipped.
    pub fn from_csv(text: &str) -> Result<Self, FitError> {
        let (mut x, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for line in text.lines() {
            let cols: Vec<&str> = line.split([',', '\t', ' ']).filter(|c| !c.is_empty()).collect();
            let nums: Option<Vec<f64>> = cols.iter().map(|c| c.trim().parse().ok()).collect();
            match nums.as_deref() {
                Some([a, b]) => {
                    x.push(*a);
                    y.push(*b);
                }
                Some([a, b, c]) => {
                    x.push(*a);
                    y.push(*b);
                    s.push(*c);
                }
                _ => continue,
            }
        }
        if !s.is_empty() && s.len() != x.len() {
            return Err(FitError::Trace("mixed two- and three-column rows".into()));
        }
        let t = Self { x, y, sigma: if s.is_empty() { None } else { Some(s) } };
        t.validate()?;
        Ok(t)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.sigma.is_some() { "x,y,sigma\n" } else { "x,y\n" });
        for i in 0..self.len() {
            match &self.sigma {
                Some(s) => out.push_str(&format!("{},{},{}\n", self.x[i], self.y[i], s[i])),
                None => out.push_str(&format!("{},{}\n", self.x[i], self.y[i])),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Gaussian dips on a flat baseline.
    Esr { peaks: usize },
    /// `A·e^(−t/τ)·sin(2πft + φ) + B`
    Rabi,
    /// `A·e^(−t/T1) + B`
    T1,
    /// `A·e^(−t/T2)·[(1 − w) + w·e^(−(t/T2*)²)] + B`
    Hahn,
}

impl FromStr for Model {
    type Err = FitError;
    fn from_str(s: &str) -> Result<Self, FitError> {
        match s.to_ascii_lowercase().as_str() {
            "esr" => Ok(Model::Esr { peaks: 1 }),
            "rabi" => Ok(Model::Rabi),
            "t1" => Ok(Model::T1),
            "hahn" | "t2" => Ok(Model::Hahn),
            _ => Err(FitError::UnknownModel(s.to_string())),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Esr { .. } => write!(f, "esr"),
            Model::Rabi => write!(f, "rabi"),
            Model::T1 => write!(f, "t1"),
            Model::Hahn => write!(f, "hahn"),
        }
    }
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

impl Model {
    pub fn param_names(&self) -> Vec<String> {
        match self {
            Model::Esr { peaks } => {
                let mut v = vec!["baseline".to_string()];
                for k in 0..*peaks {
                    v.push(format!("contrast_{k}"));
                    v.push(format!("center_{k}"));
                    v.push(format!("fwhm_{k}"));
                }
                v
            }
            Model::Rabi => ["amplitude", "tau", "frequency", "phase", "offset"].map(String::from).to_vec(),
            Model::T1 => ["amplitude", "t1", "offset"].map(String::from).to_vec(),
            Model::Hahn => ["amplitude", "t2", "t2_star", "gaussian_weight", "offset"].map(String::from).to_vec(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Model::Esr { peaks } => 1 + 3 * peaks,
            Model::Rabi | Model::Hahn => 5,
            Model::T1 => 3,
        }
    }

    fn admissible(&self, p: &[f64]) -> bool {
        match self {
            Model::Esr { peaks } => (0..*peaks).all(|k| p[3 + 3 * k] > 0.0),
            Model::Rabi => p[1] > 0.0 && p[2] > 0.0,
            Model::T1 => p[1] > 0.0,
            Model::Hahn => p[1] > 0.0 && p[2] > 0.0 && (0.0..=1.0).contains(&p[3]),
        }
    }

    /// Keep parameters inside their natural domain after an optimizer step.
    fn project(&self, p: &mut [f64]) {
        if let Model::Hahn = self {
            p[3] = p[3].clamp(0.0, 1.0);
        }
        if let Model::Rabi = self {
            p[3] = wrap_phase(p[3]);
        }
    }

    pub fn eval(&self, p: &[f64], t: f64) -> f64 {
        self.eval_grad(p, t, None)
    }

    /// Model value and, when `grad` is given, its gradient in parameter order.
    pub fn eval_grad(&self, p: &[f64], t: f64, grad: Option<&mut [f64]>) -> f64 {
        match self {
            Model::Esr { peaks } => {
                let mut y = p[0];
                let mut g = grad;
                if let Some(g) = g.as_deref_mut() {
                    g[0] = 1.0;
                }
                for k in 0..*peaks {
                    let (c, x0, w) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
                    let s = w / FWHM_PER_SIGMA;
                    let u = (t - x0) / s;
                    let e = (-0.5 * u * u).exp();
                    y -= c * e;
                    if let Some(g) = g.as_deref_mut() {
                        g[1 + 3 * k] = -e;
                        g[2 + 3 * k] = -c * e * u / s;
                        g[3 + 3 * k] = -c * e * u * u / w;
                    }
                }
                y
            }
            Model::Rabi => {
                let (a, tau, f, phi, b) = (p[0], p[1], p[2], p[3], p[4]);
                let env = (-t / tau).exp();
                let arg = 2.0 * std::f64::consts::PI * f * t + phi;
                let (sn, cs) = arg.sin_cos();
                if let Some(g) = grad {
                    g[0] = env * sn;
                    g[1] = a * env * sn * t / (tau * tau);
                    g[2] = a * env * cs * 2.0 * std::f64::consts::PI * t;
                    g[3] = a * env * cs;
                    g[4] = 1.0;
                }
                a * env * sn + b
            }
            Model::T1 => {
                let (a, t1, b) = (p[0], p[1], p[2]);
                let e = (-t / t1).exp();
                if let Some(g) = grad {
                    g[0] = e;
                    g[1] = a * e * t / (t1 * t1);
                    g[2] = 1.0;
                }
                a * e + b
            }
            Model::Hahn => {
                let (a, t2, ts, w, b) = (p[0], p[1], p[2], p[3], p[4]);
                let e = (-t / t2).exp();
                let q = t / ts;
                let gs = (-q * q).exp();
                let mix = (1.0 - w) + w * gs;
                if let Some(g) = grad {
                    g[0] = e * mix;
                    g[1] = a * e * mix * t / (t2 * t2);
                    g[2] = a * e * w * gs * 2.0 * q * q / ts;
                    g[3] = a * e * (gs - 1.0);
                    g[4] = 1.0;
                }
                a * e * mix + b
            }
        }
    }
}

fn wrap_phase(phi: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut p = phi.rem_euclid(two_pi);
    if p > std::f64::consts::PI {
        p -= two_pi;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Optimizer stopped on the iteration cap.
    NotConverged,
    /// Fitted time constant lies well beyond the sampled span.
    Extrapolated,
    /// Amplitude indistinguishable from noise; time constant unbounded.
    Unbounded,
    /// The two Hahn-echo scales differ by less than a factor of two.
    Degenerate,
    /// A fitted ESR peak is not resolved from its neighbour.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Model,
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub sigma: Vec<f64>,
    pub reduced_chi2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flags: Vec<FitFlag>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i])
    }

    pub fn uncertainty(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.sigma[i])
    }

    pub fn reliable(&self) -> bool {
        self.converged && !self.flags.contains(&FitFlag::Unbounded)
    }

    pub fn curve(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&t| self.model.eval(&self.params, t)).collect()
    }
}

/// Exact model evaluation on `grid` plus white Gaussian noise of std `noise`.
pub fn synth_trace(
    model: Model,
    params: &[f64],
    grid: &[f64],
    noise: f64,
    rng: &mut RandomStream,
) -> Result<Trace, FitError> {
    if params.len() != model.n_params() {
        return Err(FitError::ParamCount { model: model.to_string(), expected: model.n_params(), got: params.len() });
    }
    let y = grid
        .iter()
        .map(|&t| {
            let v = model.eval(params, t);
            if noise > 0.0 {
                v + noise * rng.normal()
            } else {
                v
            }
        })
        .collect();
    Trace::new(grid.to_vec(), y)
}

/// Synthetic trace from a model id string, for the command line.
pub fn synth_trace_named(
    id: &str,
    params: &[f64],
    grid: &[f64],
    noise: f64,
    rng: &mut RandomStream,
) -> Result<Trace, FitError> {
    let mut model: Model = id.parse()?;
    if let Model::Esr { .. } = model {
        if params.is_empty() || (params.len() - 1) % 3 != 0 {
            return Err(FitError::ParamCount { model: id.into(), expected: 4, got: params.len() });
        }
        model = Model::Esr { peaks: (params.len() - 1) / 3 };
    }
    synth_trace(model, params, grid, noise, rng)
}

/// A reference measurement: model, true parameters, sampling grid and the
/// parameters that characterize it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCase {
    pub name: &'static str,
    pub model: Model,
    pub params: Vec<f64>,
    pub grid: Vec<f64>,
    pub keys: &'static [&'static str],
    /// Relative tolerance on each key at SNR 20.
    pub tolerance: f64,
}

impl ReferenceCase {
    pub fn truth(&self, key: &str) -> f64 {
        let i = self.model.param_names().iter().position(|n| n == key).expect("key names a parameter");
        self.params[i]
    }

    /// Noise std giving the requested per-point SNR, where the signal is the
    /// feature amplitude (dip depth for ESR, prefactor otherwise).
    pub fn noise_for_snr(&self, snr: f64) -> f64 {
        let amplitude = match self.model {
            Model::Esr { .. } => self.params[1],
            _ => self.params[0],
        };
        amplitude.abs() / snr
    }

    /// Synthetic trace at the given SNR; infinite SNR gives the exact model.
    pub fn synth(&self, snr: f64, rng: &mut RandomStream) -> Trace {
        let noise = if snr.is_finite() { self.noise_for_snr(snr) } else { 0.0 };
        synth_trace(self.model, &self.params, &self.grid, noise, rng).expect("reference parameters are consistent")
    }

    /// Largest relative error over the keys of a fit.
    pub fn worst_error(&self, fit: &FitResult) -> f64 {
        self.keys
            .iter()
            .map(|k| fit.get(k).map_or(f64::INFINITY, |v| (v / self.truth(k) - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Reference NV measurements: ESR linewidths, Rabi decay, T1 and
/// Hahn-echo decays. Frequencies in MHz, times in µs except T1 (ms).
pub fn reference_cases() -> Vec<ReferenceCase> {
    let esr = |name, fwhm| ReferenceCase {
        name,
        model: Model::Esr { peaks: 1 },
        params: vec![1.0, 0.08, 2870.0, fwhm],
        grid: linspace(2800.0, 2940.0, ESR_POINTS),
        keys: &["fwhm_0"],
        tolerance: 0.02,
    };
    let rabi = |name, tau: f64| ReferenceCase {
        name,
        model: Model::Rabi,
        params: vec![0.15, tau, 6.0, 0.0, 1.0],
        grid: linspace(0.0, 8.0 * tau, TIME_POINTS),
        keys: &["tau"],
        tolerance: 0.02,
    };
    let t1 = |name, t1: f64| ReferenceCase {
        name,
        model: Model::T1,
        params: vec![0.3, t1, 0.7],
        grid: linspace(0.0, 5.0 * t1, TIME_POINTS),
        keys: &["t1"],
        tolerance: 0.02,
    };
    let hahn = |name, t2_star: f64| {
        let mut grid = linspace(0.0, 5.0 * t2_star, TIME_POINTS / 2);
        let tail = linspace(5.0 * t2_star, 250.0, TIME_POINTS / 2 + 1);
        grid.extend(tail.into_iter().skip(1));
        ReferenceCase {
            name,
            model: Model::Hahn,
            params: vec![0.4, 48.1, t2_star, 0.5, 0.5],
            grid,
            keys: &["t2", "t2_star"],
            tolerance: 0.05,
        }
    };
    vec![
        esr("esr_13.9", 13.9),
        esr("esr_14.4", 14.4),
        esr("esr_15.7", 15.7),
        esr("esr_16.4", 16.4),
        rabi("rabi_0.5", 0.5),
        rabi("rabi_0.3", 0.3),
        t1("t1_5.8", 5.8),
        t1("t1_12.6", 12.6),
        hahn("hahn_2.4", 2.4),
        hahn("hahn_0.4", 0.4),
    ]
}

const ESR_POINTS: usize = 2001;
const TIME_POINTS: usize = 4000;

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
// Levenberg–Marquardt

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 400, tolerance: 1e-13 }
    }
}

struct LmOutcome {
    params: Vec<f64>,
    chi2: f64,
    iterations: usize,
    converged: bool,
}

fn weights(trace: &Trace) -> Vec<f64> {
    match &trace.sigma {
        Some(s) => s.iter().map(|v| 1.0 / v).collect(),
        None => vec![1.0; trace.len()],
    }
}

fn chi2(model: Model, p: &[f64], trace: &Trace, w: &[f64]) -> f64 {
    if !model.admissible(p) {
        return f64::INFINITY;
    }
    trace
        .x
        .iter()
        .zip(&trace.y)
        .zip(w)
        .map(|((&t, &y), &wi)| {
            let r = (y - model.eval(p, t)) * wi;
            r * r
        })
        .sum()
}

fn jacobian(model: Model, p: &[f64], trace: &Trace, w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m) = (trace.len(), p.len());
    let mut jac = DMatrix::zeros(n, m);
    let mut res = DVector::zeros(n);
    let mut g = vec![0.0; m];
    for i in 0..n {
        let v = model.eval_grad(p, trace.x[i], Some(&mut g));
        res[i] = (trace.y[i] - v) * w[i];
        for k in 0..m {
            jac[(i, k)] = g[k] * w[i];
        }
    }
    (jac, res)
}

fn levenberg_marquardt(model: Model, trace: &Trace, start: &[f64], opts: &LmOptions) -> LmOutcome {
    let w = weights(trace);
    let mut p = start.to_vec();
    model.project(&mut p);
    let mut c = chi2(model, &p, trace, &w);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let (jac, res) = jacobian(model, &p, trace, &w);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..p.len() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-30);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            model.project(&mut trial);
            let ct = chi2(model, &trial, trace, &w);
            if ct.is_finite() && ct <= c {
                let rel = (c - ct) / c.max(1e-300);
                let small_step = step.iter().zip(&p).all(|(s, v)| s.abs() <= 1e-12 * v.abs().max(1e-12));
                p = trial;
                c = ct;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < opts.tolerance || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // no downhill direction left: a minimum to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    LmOutcome { params: p, chi2: c, iterations: it, converged }
}

/// Parameter covariance from the Jacobian at the optimum, scaled by the
/// reduced chi-square when no per-point uncertainties were given.
fn covariance(model: Model, p: &[f64], trace: &Trace, chi2: f64) -> Vec<f64> {
    let w = weights(trace);
    let (jac, _) = jacobian(model, p, trace, &w);
    let jtj = jac.transpose() * &jac;
    let m = p.len();
    let dof = (trace.len().saturating_sub(m)).max(1) as f64;
    let scale = if trace.sigma.is_some() { 1.0 } else { chi2 / dof };
    let svd = jtj.svd(true, true);
    let eps = 1e-14 * svd.singular_values.max();
    let inv = svd.pseudo_inverse(eps).unwrap_or_else(|_| DMatrix::zeros(m, m));
    (0..m).map(|k| (inv[(k, k)] * scale).max(0.0).sqrt()).collect()
}

/// Runs LM from each start and keeps the lowest chi-square.
fn fit_multistart(model: Model, trace: &Trace, starts: &[Vec<f64>]) -> Result<FitResult, FitError> {
    let opts = LmOptions::default();
    let best = starts
        .iter()
        .map(|s| levenberg_marquardt(model, trace, s, &opts))
        .filter(|o| o.chi2.is_finite())
        .min_by(|a, b| a.chi2.total_cmp(&b.chi2))
        .ok_or(FitError::NoConvergence)?;
    let dof = trace.len().saturating_sub(model.n_params()).max(1) as f64;
    let sigma = covariance(model, &best.params, trace, best.chi2);
    let mut flags = Vec::new();
    if !best.converged {
        flags.push(FitFlag::NotConverged);
    }
    Ok(FitResult {
        model,
        names: model.param_names(),
        params: best.params,
        sigma,
        reduced_chi2: best.chi2 / dof,
        converged: best.converged,
        iterations: best.iterations,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Initialization helpers

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Robust noise scale from first differences (MAD / 0.6745 / √2).
fn noise_scale(y: &[f64]) -> f64 {
    let d: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let m = median(&d);
    let mad: Vec<f64> = d.iter().map(|v| (v - m).abs()).collect();
    median(&mad) / 0.6745 / 2f64.sqrt()
}

/// Linear least squares on fixed basis columns; returns coefficients and SSE.
fn linear_fit(columns: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = y.len();
    let m = columns.len();
    let a = DMatrix::from_fn(n, m, |i, k| columns[k][i]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12).ok()?;
    let r = &b - &a * &coef;
    Some((coef.iter().copied().collect(), r.norm_squared()))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

// ---------------------------------------------------------------------------
// Model fits

pub fn fit_esr(trace: &Trace, n_peaks: usize) -> Result<FitResult, FitError> {
    trace.validate()?;
    if n_peaks == 0 {
        return Err(FitError::Trace("need at least one peak".into()));
    }
    let model = Model::Esr { peaks: n_peaks };
    if trace.len() < model.n_params() + 2 {
        return Err(FitError::Trace("too few points".into()));
    }
    let y = &trace.y;
    let x = &trace.x;
    let noise = noise_scale(y);
    let edge = (y.len() / 10).max(1);
    let mut ends: Vec<f64> = y[..edge].to_vec();
    ends.extend_from_slice(&y[y.len() - edge..]);
    let baseline = median(&ends);
    // Peel peaks one at a time from the residual dip profile.
    let mut resid: Vec<f64> = y.iter().map(|v| baseline - v).collect();
    let mut start = vec![baseline];
    let span = x[x.len() - 1] - x[0];
    for _ in 0..n_peaks {
        let (imax, &depth) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        if depth < 4.0 * noise.max(1e-300) {
            return Err(FitError::NoFeature);
        }
        let half = 0.5 * depth;
        let mut lo = imax;
        while lo > 0 && resid[lo] > half {
            lo -= 1;
        }
        let mut hi = imax;
        while hi + 1 < resid.len() && resid[hi] > half {
            hi += 1;
        }
        let fwhm = (x[hi] - x[lo]).max(span / x.len() as f64 * 2.0);
        let x0 = x[imax];
        start.extend([depth, x0, fwhm]);
        let s = fwhm / FWHM_PER_SIGMA;
        for (r, &t) in resid.iter_mut().zip(x) {
            *r -= depth * (-0.5 * ((t - x0) / s).powi(2)).exp();
        }
    }
    let starts = perturbed_starts(&start, &[0], 5);
    let mut res = fit_multistart(model, trace, &starts)?;
    // resolvability: centers closer than half the sum of widths
    let mut peaks: Vec<(f64, f64)> =
        (0..n_peaks).map(|k| (res.params[2 + 3 * k], res.params[3 + 3 * k])).collect();
    peaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    if peaks.windows(2).any(|w| (w[1].0 - w[0].0) < 0.5 * (w[0].1 + w[1].1)) {
        res.flags.push(FitFlag::Unresolved);
    }
    Ok(res)
}

/// Deterministic multiplicative jitter on every parameter except `keep`.
fn perturbed_starts(start: &[f64], keep: &[usize], n: usize) -> Vec<Vec<f64>> {
    let factors: [f64; 5] = [1.0, 0.8, 1.25, 0.9, 1.1];
    (0..n)
        .map(|j| {
            start
                .iter()
                .enumerate()
                .map(|(k, &v)| if keep.contains(&k) { v } else { v * factors[(j + k) % factors.len()].powi((j > 0) as i32) })
                .collect()
        })
        .collect()
}

pub fn fit_rabi(trace: &Trace) -> Result<FitResult, FitError> {
    trace.validate()?;
    if trace.len() < 8 {
        return Err(FitError::Trace("too few points".into()));
    }
    let x = &trace.x;
    let y = &trace.y;
    let n = x.len();
    let span = x[n - 1] - x[0];
    let dt = median(&x.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>());
    let nyquist = 0.5 / dt;
    let mean = y.iter().sum::<f64>() / n as f64;
    // Direct DFT on a fine frequency grid (handles non-uniform sampling).
    let df = 0.25 / span;
    let nf = (nyquist / df).floor() as usize;
    if nf < 2 {
        return Err(FitError::Trace("trace too short for a frequency estimate".into()));
    }
    // Per-point phasors advanced by one frequency step at a time.
    let step: Vec<(f64, f64)> = x.iter().map(|t| (2.0 * std::f64::consts::PI * df * t).sin_cos()).collect();
    let mut phasor: Vec<(f64, f64)> = vec![(0.0, 1.0); n];
    let mut best = (0.0, 0usize);
    for k in 1..=nf {
        let (mut re, mut im) = (0.0, 0.0);
        for i in 0..n {
            let (s0, c0) = phasor[i];
            let (ds, dc) = step[i];
            let (s, c) = (s0 * dc + c0 * ds, c0 * dc - s0 * ds);
            phasor[i] = (s, c);
            re += (y[i] - mean) * c;
            im += (y[i] - mean) * s;
        }
        let pw = re * re + im * im;
        if pw > best.0 {
            best = (pw, k);
        }
    }
    let f0 = best.1 as f64 * df;
    if best.1 + 2 >= nf {
        return Err(FitError::Aliasing(f0));
    }
    if noise_scale(y) * (n as f64).sqrt() * 2.0 > best.0.sqrt() {
        return Err(FitError::NoFeature);
    }
    // For fixed (f, τ) the model is linear in (a, b, B); scan τ.
    let mut init: Option<(f64, [f64; 5])> = None;
    for &f in &[f0 - 0.5 * df, f0, f0 + 0.5 * df] {
        for tau in log_grid(span / 30.0, span * 10.0, 24) {
            let e: Vec<f64> = x.iter().map(|t| (-t / tau).exp()).collect();
            let cols = vec![
                x.iter().zip(&e).map(|(t, e)| e * (2.0 * std::f64::consts::PI * f * t).sin()).collect(),
                x.iter().zip(&e).map(|(t, e)| e * (2.0 * std::f64::consts::PI * f * t).cos()).collect(),
                vec![1.0; n],
            ];
            if let Some((c, sse)) = linear_fit(&cols, y) {
                if init.as_ref().is_none_or(|b| sse < b.0) {
                    let amp = c[0].hypot(c[1]);
                    let phi = c[1].atan2(c[0]);
                    init = Some((sse, [amp, tau, f, phi, c[2]]));
                }
            }
        }
    }
    let (_, p0) = init.ok_or(FitError::NoConvergence)?;
    let mut starts = vec![p0.to_vec()];
    for (ft, tt) in [(1.0, 0.7), (1.0, 1.4), (1.0 - 0.1 * df / f0.max(1e-300), 1.0), (1.0 + 0.1 * df / f0.max(1e-300), 1.0)] {
        let mut s = p0.to_vec();
        s[1] *= tt;
        s[2] *= ft;
        starts.push(s);
    }
    let mut res = fit_multistart(Model::Rabi, trace, &starts)?;
    if res.params[1] > 10.0 * span {
        res.flags.push(FitFlag::Extrapolated);
    }
    Ok(res)
}

/// Variable-projection scan over a single decay constant for
/// `A·e^(−t/T) + B`; returns (T, A, B).
fn scan_exponential(x: &[f64], y: &[f64], lo: f64, hi: f64) -> Option<(f64, f64, f64)> {
    let mut best: Option<(f64, (f64, f64, f64))> = None;
    for t1 in log_grid(lo, hi, 60) {
        let cols = vec![x.iter().map(|t| (-t / t1).exp()).collect(), vec![1.0; x.len()]];
        if let Some((c, sse)) = linear_fit(&cols, y) {
            if best.as_ref().is_none_or(|b| sse < b.0) {
                best = Some((sse, (t1, c[0], c[1])));
            }
        }
    }
    best.map(|b| b.1)
}

pub fn fit_t1(trace: &Trace) -> Result<FitResult, FitError> {
    trace.validate()?;
    if trace.len() < 5 {
        return Err(FitError::Trace("too few points".into()));
    }
    let x = &trace.x;
    let y = &trace.y;
    let span = x[x.len() - 1] - x[0];
    let dt_min = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let noise = noise_scale(y);
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 4.0 * noise || hi - lo == 0.0 {
        let b = y.iter().sum::<f64>() / y.len() as f64;
        return Ok(FitResult {
            model: Model::T1,
            names: Model::T1.param_names(),
            params: vec![0.0, f64::INFINITY, b],
            sigma: vec![f64::INFINITY, f64::INFINITY, noise / (y.len() as f64).sqrt()],
            reduced_chi2: f64::NAN,
            converged: false,
            iterations: 0,
            flags: vec![FitFlag::Unbounded],
        });
    }
    let (t1, a, b) = scan_exponential(x, y, dt_min.max(span * 1e-3), span * 20.0).ok_or(FitError::NoConvergence)?;
    let p0 = vec![a, t1, b];
    let mut starts = vec![p0.clone()];
    for f in [0.5, 0.8, 1.25, 2.0] {
        starts.push(vec![a, t1 * f, b]);
    }
    let mut res = fit_multistart(Model::T1, trace, &starts)?;
    if res.params[1] > 5.0 * span {
        res.flags.push(FitFlag::Extrapolated);
    }
    if res.params[0].abs() < 3.0 * res.sigma[0] {
        res.flags.push(FitFlag::Unbounded);
    }
    Ok(res)
}

pub fn fit_hahn(trace: &Trace) -> Result<FitResult, FitError> {
    trace.validate()?;
    if trace.len() < 8 {
        return Err(FitError::Trace("too few points".into()));
    }
    let x = &trace.x;
    let y = &trace.y;
    let n = x.len();
    let span = x[n - 1] - x[0];
    let dt_min = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let noise = noise_scale(y);
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 4.0 * noise || hi - lo == 0.0 {
        return Err(FitError::NoFeature);
    }
    // Slow scale from the late half, fast scale from the early residual.
    let half = n / 2;
    let (t2, _, _) = scan_exponential(&x[half..], &y[half..], span * 0.05, span * 20.0)
        .or_else(|| scan_exponential(x, y, span * 0.05, span * 20.0))
        .ok_or(FitError::NoConvergence)?;
    // For fixed (T2, T2*) the model is linear in (A(1−w), A·w, B).
    let mut init: Option<(f64, Vec<f64>)> = None;
    for t2f in [0.5, 1.0, 2.0] {
        let t2c = t2 * t2f;
        for ts in log_grid(dt_min.max(span * 1e-4), span, 40) {
            let e: Vec<f64> = x.iter().map(|t| (-t / t2c).exp()).collect();
            let cols = vec![
                e.clone(),
                x.iter().zip(&e).map(|(t, e)| e * (-(t / ts).powi(2)).exp()).collect(),
                vec![1.0; n],
            ];
            if let Some((c, sse)) = linear_fit(&cols, y) {
                let a = c[0] + c[1];
                let w = if a != 0.0 { (c[1] / a).clamp(0.0, 1.0) } else { 0.0 };
                if init.as_ref().is_none_or(|b| sse < b.0) {
                    init = Some((sse, vec![a, t2c, ts, w, c[2]]));
                }
            }
        }
    }
    let (_, p0) = init.ok_or(FitError::NoConvergence)?;
    let mut starts = vec![p0.clone()];
    for (f2, fs, w) in [(1.0, 0.7, None), (1.0, 1.4, None), (0.8, 1.0, Some(0.5)), (1.25, 1.0, Some(0.2))] {
        let mut s = p0.clone();
        s[1] *= f2;
        s[2] *= fs;
        if let Some(w) = w {
            s[3] = w;
        }
        starts.push(s);
    }
    let mut res = fit_multistart(Model::Hahn, trace, &starts)?;
    let (t2, ts) = (res.params[1], res.params[2]);
    if t2.max(ts) / t2.min(ts) < 2.0 {
        res.flags.push(FitFlag::Degenerate);
    }
    if t2 > 10.0 * span {
        res.flags.push(FitFlag::Extrapolated);
    }
    Ok(res)
}

/// Dispatches on the model; ESR peak count is taken from the model.
pub fn fit(model: Model, trace: &Trace) -> Result<FitResult, FitError> {
    match model {
        Model::Esr { peaks } => fit_esr(trace, peaks),
        Model::Rabi => fit_rabi(trace),
        Model::T1 => fit_t1(trace),
        Model::Hahn => fit_hahn(trace),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;

    fn rel(a: f64, b: f64) -> f64 {
        (a / b - 1.0).abs()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases: Vec<(Model, Vec<f64>, f64)> = vec![
            (Model::Esr { peaks: 2 }, vec![1.0, 0.1, 2870.0, 13.9, 0.05, 2900.0, 16.4], 2875.0),
            (Model::Rabi, vec![0.2, 0.5, 4.0, 0.3, 1.0], 0.37),
            (Model::T1, vec![0.3, 5.8, 0.9], 2.0),
            (Model::Hahn, vec![0.4, 48.1, 2.4, 0.6, 0.5], 1.7),
        ];
        for (m, p, t) in cases {
            let mut g = vec![0.0; p.len()];
            m.eval_grad(&p, t, Some(&mut g));
            for k in 0..p.len() {
                let h = 1e-6 * p[k].abs().max(1e-3);
                let mut a = p.clone();
                let mut b = p.clone();
                a[k] += h;
                b[k] -= h;
                let num = (m.eval(&a, t) - m.eval(&b, t)) / (2.0 * h);
                assert!((num - g[k]).abs() < 1e-6 * g[k].abs().max(1e-3), "{m} param {k}: {num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn zero_noise_rabi_exact() {
        let p = [0.3, 0.5, 5.0, 0.4, 1.0];
        let t = synth_trace(Model::Rabi, &p, &linspace(0.0, 2.0, 201), 0.0, &mut seeded_stream(0, 0)).unwrap();
        let r = fit_rabi(&t).unwrap();
        for k in 0..5 {
            assert!((r.params[k] - p[k]).abs() < 1e-8 * p[k].abs().max(1.0), "{k}: {}", r.params[k]);
        }
    }

    #[test]
    fn esr_flat_trace_errors() {
        let t = synth_trace(
            Model::Esr { peaks: 1 },
            &[1.0, 0.0, 2870.0, 10.0],
            &linspace(2800.0, 2940.0, 200),
            0.01,
            &mut seeded_stream(3, 0),
        )
        .unwrap();
        assert_eq!(fit_esr(&t, 1).unwrap_err(), FitError::NoFeature);
    }

    #[test]
    fn t1_constant_flagged() {
        let t = Trace::new(linspace(0.0, 20.0, 50), vec![0.7; 50]).unwrap();
        let r = fit_t1(&t).unwrap();
        assert!(r.flags.contains(&FitFlag::Unbounded));
        assert!(!r.reliable());
    }

    #[test]
    fn aliasing_detected() {
        // 9.5 cycles per sample interval pair: the true frequency folds to
        // the band edge.
        let grid = linspace(0.0, 10.0, 41);
        let p = [0.3, 50.0, 1.95, 0.0, 1.0];
        let t = synth_trace(Model::Rabi, &p, &grid, 0.0, &mut seeded_stream(0, 0)).unwrap();
        assert!(matches!(fit_rabi(&t), Err(FitError::Aliasing(_))));
    }

    #[test]
    fn hahn_pure_exponential_limit() {
        let grid = linspace(0.0, 150.0, 400);
        let p = [0.4, 48.1, 2.4, 0.0, 0.5];
        let t = synth_trace(Model::Hahn, &p, &grid, 0.02, &mut seeded_stream(11, 0)).unwrap();
        let r = fit_hahn(&t).unwrap();
        assert!(rel(r.params[1], 48.1) < 0.02, "{:?}", r.params);
        assert!(r.params[3] < 0.1);
    }

    #[test]
    fn csv_round_trip() {
        let t = Trace::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.25]).unwrap();
        let back = Trace::from_csv(&format!("# header\n{}", t.to_csv())).unwrap();
        assert_eq!(back, t);
        assert!(Trace::from_csv("1,2\n0,3\n").is_err());
    }

    #[test]
    fn unknown_model_id() {
        let r = synth_trace_named("ramsey", &[1.0], &[0.0, 1.0], 0.0, &mut seeded_stream(0, 0));
        assert_eq!(r.unwrap_err(), FitError::UnknownModel("ramsey".into()));
    }

    #[test]
    fn rescaling_abscissa_rescales_parameters() {
        let p = [0.4, 48.1, 2.4, 0.5, 0.5];
        let grid = linspace(0.0, 150.0, 500);
        let t = synth_trace(Model::Hahn, &p, &grid, 0.02, &mut seeded_stream(5, 0)).unwrap();
        let ns = Trace::new(t.x.iter().map(|v| v * 1e3).collect(), t.y.clone()).unwrap();
        let a = fit_hahn(&t).unwrap();
        let b = fit_hahn(&ns).unwrap();
        assert!(rel(b.params[1], a.params[1] * 1e3) < 1e-6);
        assert!(rel(b.params[2], a.params[2] * 1e3) < 1e-6);
    }

    #[test]
    fn reference_cases_recovered_at_snr_20() {
        for (k, case) in reference_cases().iter().enumerate() {
            let t = case.synth(20.0, &mut seeded_stream(7, k as u64));
            let r = fit(case.model, &t).unwrap();
            assert!(case.worst_error(&r) < case.tolerance, "{}: {:?}", case.name, r.params);
        }
    }
}
