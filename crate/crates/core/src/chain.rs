//! NV chains along single tracks: Poisson sampling of NV positions, gap
//! statistics, nearest-neighbour dipolar couplings and the expected number of
//! visible chains in a scan field.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::rng::RandomStream;
use crate::units::Diamond;

/// Electron-spin dipolar constant μ0·γe²·ħ/(4π·h), kHz·nm³.
pub const DEFAULT_J0_KHZ_NM3: f64 = 52_000.0;

/// Default capture radius around the track axis, nm.
pub const DEFAULT_CAPTURE_RADIUS_NM: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },
    #[error("need at least two NV centers, found {0}")]
    TooFew(usize),
}

fn check(name: &'static str, v: f64, ok: bool, reason: &str) -> Result<(), ChainError> {
    if ok && v.is_finite() {
        Ok(())
    } else {
        Err(ChainError::Parameter { name, reason: format!("{reason} (got {v})") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub nitrogen_ppm: f64,
    /// Fraction of nitrogen inside the capture cylinder that becomes NV.
    pub efficiency: f64,
    pub capture_radius_nm: f64,
    pub length_um: f64,
}

impl ChainParams {
    pub fn validate(&self) -> Result<(), ChainError> {
        check("nitrogen_ppm", self.nitrogen_ppm, self.nitrogen_ppm >= 0.0, "must be non-negative")?;
        check(
            "efficiency",
            self.efficiency,
            (0.0..=1.0).contains(&self.efficiency),
            "must lie in [0, 1]",
        )?;
        check(
            "capture_radius_nm",
            self.capture_radius_nm,
            self.capture_radius_nm > 0.0,
            "must be positive",
        )?;
        check("length_um", self.length_um, self.length_um > 0.0, "must be positive")
    }

    /// NV centers per nm of track.
    pub fn rate_per_nm(&self, host: &Diamond) -> f64 {
        let r = self.capture_radius_nm;
        self.efficiency * host.ppm_to_nm3(self.nitrogen_ppm) * std::f64::consts::PI * r * r
    }

    pub fn expected_count(&self, host: &Diamond) -> f64 {
        self.rate_per_nm(host) * self.length_um * 1e3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub params: ChainParams,
    /// Sorted axial positions, nm.
    pub positions: Vec<f64>,
}

/// Homogeneous Poisson process along the track. Gaps are drawn as
/// exponentials, so the count is Poisson with mean `rate · L`.
pub fn sample_chain(params: &ChainParams, host: &Diamond, rng: &mut RandomStream) -> Result<ChainSample, ChainError> {
    params.validate()?;
    let rate = params.rate_per_nm(host);
    let length = params.length_um * 1e3;
    let mut positions = Vec::new();
    if rate > 0.0 {
        let mut x = rng.exponential(rate);
        while x <= length {
            positions.push(x);
            x += rng.exponential(rate);
        }
    }
    Ok(ChainSample { params: *params, positions })
}

/// Samples nitrogen at the full density and keeps each site with probability
/// `efficiency`. Distributionally identical to [`sample_chain`].
pub fn sample_chain_thinned(
    params: &ChainParams,
    host: &Diamond,
    rng: &mut RandomStream,
) -> Result<ChainSample, ChainError> {
    params.validate()?;
    let parent = ChainParams { efficiency: 1.0, ..*params };
    let full = sample_chain(&parent, host, rng)?;
    let positions = full
        .positions
        .into_iter()
        .filter(|_| rng.uniform() < params.efficiency)
        .collect();
    Ok(ChainSample { params: *params, positions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingStats {
    pub gaps: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub histogram: Histogram,
    /// Kolmogorov–Smirnov distance to an exponential with the sample mean.
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(data: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let hi = data.iter().cloned().fold(0.0, f64::max);
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &x in data {
            let k = ((x / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower_nm,upper_nm,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

pub fn gaps(sample: &ChainSample) -> Vec<f64> {
    sample.positions.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn spacing_stats(sample: &ChainSample) -> Result<SpacingStats, ChainError> {
    let n = sample.positions.len();
    if n < 2 {
        return Err(ChainError::TooFew(n));
    }
    let gaps = gaps(sample);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    let (ks_statistic, ks_p_value) = if mean > 0.0 {
        let d = ks_distance(&sorted, |x| 1.0 - (-x / mean).exp());
        (d, kolmogorov_p(d, m as f64))
    } else {
        (1.0, 0.0)
    };
    Ok(SpacingStats {
        histogram: Histogram::new(&gaps, 20.min(m).max(1)),
        gaps,
        mean,
        median,
        ks_statistic,
        ks_p_value,
    })
}

/// One-sample KS distance for sorted data against a continuous CDF.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Two-sample KS distance; both inputs sorted.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail probability with the Stephens small-sample
/// correction, `n` being the effective sample size.
pub fn kolmogorov_p(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let t = (sn + 0.12 + 0.11 / sn) * d;
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * t * t).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSet {
    pub distances_nm: Vec<f64>,
    pub couplings_khz: Vec<f64>,
    pub j0_khz_nm3: f64,
}

pub fn dipolar_couplings(sample: &ChainSample, j0_khz_nm3: f64) -> Result<CouplingSet, ChainError> {
    let n = sample.positions.len();
    if n < 2 {
        return Err(ChainError::TooFew(n));
    }
    check("j0", j0_khz_nm3, j0_khz_nm3 > 0.0, "must be positive")?;
    let distances_nm = gaps(sample);
    let couplings_khz = distances_nm.iter().map(|d| j0_khz_nm3 / (d * d * d)).collect();
    Ok(CouplingSet { distances_nm, couplings_khz, j0_khz_nm3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub expected: f64,
    /// Visible chains per cm².
    pub areal_density_cm2: f64,
    /// Central 95% Poisson interval for an observed count equal to the
    /// expectation rounded to the nearest integer.
    pub interval_low: f64,
    pub interval_high: f64,
}

pub fn chain_census(fluence_cm2: f64, area_um2: f64, detection: f64) -> Result<Census, ChainError> {
    check("fluence", fluence_cm2, fluence_cm2 >= 0.0, "must be non-negative")?;
    check("area", area_um2, area_um2 >= 0.0, "must be non-negative")?;
    check("detection", detection, (0.0..=1.0).contains(&detection), "must lie in [0, 1]")?;
    // 1 cm² = 1e8 µm²
    let expected = fluence_cm2 * 1e-8 * area_um2 * detection;
    let (lo, hi) = poisson_interval(expected.round() as u64, 0.95);
    Ok(Census {
        expected,
        areal_density_cm2: fluence_cm2 * detection,
        interval_low: lo,
        interval_high: hi,
    })
}

/// Exact (Garwood) confidence interval for a Poisson mean given `k` events.
pub fn poisson_interval(k: u64, confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let lo = if k == 0 {
        0.0
    } else {
        0.5 * ChiSquared::new(2.0 * k as f64).expect("dof > 0").inverse_cdf(alpha / 2.0)
    };
    let hi = 0.5 * ChiSquared::new(2.0 * (k + 1) as f64).expect("dof > 0").inverse_cdf(1.0 - alpha / 2.0);
    (lo, hi)
}

/// Sorted positions as a one-column CSV.
pub fn positions_csv(sample: &ChainSample) -> String {
    let mut s = String::from("position_nm\n");
    for p in &sample.positions {
        s.push_str(&format!("{p}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;

    fn params(eta: f64, rc: f64) -> ChainParams {
        ChainParams { nitrogen_ppm: 100.0, efficiency: eta, capture_radius_nm: rc, length_um: 10.0 }
    }

    #[test]
    fn expected_count_closed_form() {
        let host = Diamond::default();
        // 0.175 * 1.763e-2 * pi * 1e4
        let oracle = 0.175 * 100e-6 * 8.0 / 0.3567f64.powi(3) * std::f64::consts::PI * 1e4;
        assert!((params(0.175, 1.0).expected_count(&host) - oracle).abs() < 1e-9);
        assert!((params(0.175, 1.0).expected_count(&host) - 97.0).abs() < 1.0);
        assert!((params(0.175, 2.0).expected_count(&host) - 388.0).abs() < 2.0);
    }

    #[test]
    fn zero_efficiency_is_empty() {
        let s = sample_chain(&params(0.0, 2.0), &Diamond::default(), &mut seeded_stream(1, 0)).unwrap();
        assert!(s.positions.is_empty());
    }

    #[test]
    fn equal_spacing_mean() {
        let s = ChainSample { params: params(0.1, 2.0), positions: (0..11).map(|i| 5.0 * i as f64).collect() };
        let st = spacing_stats(&s).unwrap();
        assert_eq!(st.mean, 5.0);
        assert_eq!(st.median, 5.0);
        let c = dipolar_couplings(&s, DEFAULT_J0_KHZ_NM3).unwrap();
        assert!(c.couplings_khz.iter().all(|&j| j == DEFAULT_J0_KHZ_NM3 / 125.0));
    }

    #[test]
    fn cube_law() {
        let a = ChainSample { params: params(0.1, 2.0), positions: vec![0.0, 3.0] };
        let b = ChainSample { params: params(0.1, 2.0), positions: vec![0.0, 6.0] };
        let ja = dipolar_couplings(&a, 1000.0).unwrap().couplings_khz[0];
        let jb = dipolar_couplings(&b, 1000.0).unwrap().couplings_khz[0];
        assert_eq!(ja, 8.0 * jb);
    }

    #[test]
    fn too_few() {
        let s = ChainSample { params: params(0.1, 2.0), positions: vec![1.0] };
        assert_eq!(spacing_stats(&s).unwrap_err(), ChainError::TooFew(1));
    }

    #[test]
    fn census_examples() {
        let c = chain_census(1e8, 16.0, 1.0).unwrap();
        assert!((c.expected - 16.0).abs() < 1e-12);
        assert!(c.interval_low < 16.0 && c.interval_high > 16.0);
        assert_eq!(chain_census(1e8, 16.0, 0.75).unwrap().areal_density_cm2, 0.75e8);
        assert_eq!(chain_census(0.0, 16.0, 1.0).unwrap().expected, 0.0);
        assert!(chain_census(-1.0, 16.0, 1.0).is_err());
    }

    #[test]
    fn garwood_reference_values() {
        // Tabulated exact 95% limits for k = 0 and k = 10.
        let (lo, hi) = poisson_interval(0, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - 3.689).abs() < 1e-3);
        let (lo, hi) = poisson_interval(10, 0.95);
        assert!((lo - 4.795).abs() < 1e-3);
        assert!((hi - 18.39).abs() < 1e-2);
    }

    #[test]
    fn kolmogorov_tail() {
        // Large-n critical value at 5%: sqrt(n)·D = 1.358
        let p = kolmogorov_p(1.358 / 1e4f64.sqrt(), 1e4);
        assert!((p - 0.05).abs() < 3e-3);
    }
}
