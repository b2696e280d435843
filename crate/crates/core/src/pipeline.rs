//! Segmented track simulation: slice the ion path into slabs, run one
//! two-temperature MD job per slab, count defects and assemble the depth
//! profile.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::defects::{cluster_defects, linear_densities, wigner_seitz};
use crate::plot::{Axis, Plot, Series};
use crate::radialdose::{ion_state_at, DoseKernel, IonState};
use crate::rng::seeded_stream;
use crate::stopping::StoppingTable;
use crate::ttmd::{run_track_segment, AtomSystem, CellList, SegmentSpec, TersoffParams, TrackMdParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("segment count must be at least 1")]
    NoSegments,
    #[error("ion state at {depth} um: {reason}")]
    IonState { depth: f64, reason: String },
    #[error("cannot build a worker pool: {0}")]
    Pool(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("workload mismatch: segments report {reported} atom-steps, total {total}")]
    Workload { reported: u64, total: u64 },
}

/// One slab of the trajectory with its midpoint ion state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub index: usize,
    pub z_start_um: f64,
    pub z_end_um: f64,
    pub midpoint_um: f64,
    pub ion: IonState,
    pub seed: u64,
    pub stream: u64,
}

impl SegmentConfig {
    pub fn width_um(&self) -> f64 {
        self.z_end_um - self.z_start_um
    }
}

/// Stream index offset keeping segment streams apart from other uses of
/// the run seed.
const SEGMENT_STREAM_BASE: u64 = 1000;

/// `n` equal-width slabs over `[0, R]`, each carrying the midpoint stopping
/// and velocity.
pub fn segment_trajectory(
    table: &StoppingTable,
    n: usize,
    kernel: &DoseKernel,
    seed: u64,
) -> Result<Vec<SegmentConfig>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::NoSegments);
    }
    let range = table.range();
    let width = range / n as f64;
    (0..n)
        .map(|i| {
            let z0 = i as f64 * width;
            let z1 = if i + 1 == n { range } else { (i + 1) as f64 * width };
            let mid = 0.5 * (z0 + z1);
            let ion = ion_state_at(table, mid, kernel)
                .map_err(|e| PipelineError::IonState { depth: mid, reason: e.to_string() })?;
            Ok(SegmentConfig {
                index: i,
                z_start_um: z0,
                z_end_um: z1,
                midpoint_um: mid,
                ion,
                seed,
                stream: SEGMENT_STREAM_BASE + i as u64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SegmentStatus {
    Ok,
    Failed { message: String },
}

/// Per-segment analysis persisted to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub segment: SegmentConfig,
    pub status: SegmentStatus,
    pub atoms: usize,
    pub track_length_nm: f64,
    pub vacancies: usize,
    pub interstitials: usize,
    pub isolated: usize,
    pub clustered: usize,
    pub largest_cluster: usize,
    pub isolated_per_nm: f64,
    pub clustered_per_nm: f64,
    pub disordered_fraction: f64,
    pub amorphous: bool,
    pub deposited_ev: f64,
    pub energy_residual: f64,
    pub steps: usize,
    pub atom_steps: u64,
    /// Kept out of the persisted record so reruns compare byte for byte.
    #[serde(skip_serializing, default)]
    pub wall_seconds: f64,
}

impl SegmentOutcome {
    fn failed(segment: SegmentConfig, message: String) -> Self {
        Self {
            segment,
            status: SegmentStatus::Failed { message },
            atoms: 0,
            track_length_nm: 0.0,
            vacancies: 0,
            interstitials: 0,
            isolated: 0,
            clustered: 0,
            largest_cluster: 0,
            isolated_per_nm: 0.0,
            clustered_per_nm: 0.0,
            disordered_fraction: 0.0,
            amorphous: false,
            deposited_ev: 0.0,
            energy_residual: 0.0,
            steps: 0,
            atom_steps: 0,
            wall_seconds: 0.0,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == SegmentStatus::Ok
    }
}

/// Fraction of atoms whose coordination within `cutoff` differs from four.
pub fn disordered_fraction(sys: &AtomSystem, cutoff: f64) -> f64 {
    if sys.is_empty() {
        return 0.0;
    }
    let list = CellList::new(sys.cell, cutoff, &sys.positions);
    let c2 = cutoff * cutoff;
    let odd = sys
        .positions
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let n = list
                .candidates(p)
                .filter(|&j| j != *i)
                .filter(|&j| {
                    let d = sys.cell.delta(p, &sys.positions[j]);
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < c2
                })
                .count();
            n != 4
        })
        .count();
    odd as f64 / sys.len() as f64
}

/// Inputs that determine a segment's result; a persisted outcome is reused
/// only when these match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentInputs {
    segment: SegmentConfig,
    md: TrackMdParams,
    dose: DoseKernel,
    cluster_cutoff_nm: f64,
    bond_cutoff_nm: f64,
    amorphous_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentRecord {
    inputs: SegmentInputs,
    outcome: SegmentOutcome,
}

pub fn run_segment(cfg: &RunConfig, segment: &SegmentConfig, tersoff: &TersoffParams) -> SegmentOutcome {
    let spec = SegmentSpec { index: segment.index, depth_um: segment.midpoint_um, ion: segment.ion };
    let mut rng = seeded_stream(segment.seed, segment.stream);
    let res = match run_track_segment(&spec, &cfg.md, &cfg.dose, tersoff, &mut rng) {
        Ok(r) => r,
        Err(e) => return SegmentOutcome::failed(segment.clone(), e.to_string()),
    };
    let sys = &res.system;
    let analysis = wigner_seitz(&sys.cell, &sys.reference, &sys.cell, &sys.positions)
        .map_err(|e| e.to_string())
        .and_then(|d| {
            cluster_defects(&d, &sys.reference, &sys.cell, cfg.track.cluster_cutoff_nm)
                .map(|c| (d, c))
                .map_err(|e| e.to_string())
        });
    let (defects, clusters) = match analysis {
        Ok(x) => x,
        Err(e) => return SegmentOutcome::failed(segment.clone(), e),
    };
    let length = sys.cell.lengths[2];
    let (iso, clu) = linear_densities(&clusters, length);
    let disorder = disordered_fraction(sys, cfg.track.bond_cutoff_nm);
    SegmentOutcome {
        segment: segment.clone(),
        status: SegmentStatus::Ok,
        atoms: sys.len(),
        track_length_nm: length,
        vacancies: defects.vacancy_count(),
        interstitials: defects.interstitial_count(),
        isolated: clusters.isolated,
        clustered: clusters.clustered,
        largest_cluster: clusters.largest(),
        isolated_per_nm: iso,
        clustered_per_nm: clu,
        disordered_fraction: disorder,
        amorphous: disorder > cfg.track.amorphous_threshold,
        deposited_ev: res.ledger.deposited,
        energy_residual: res.ledger.relative_residual(),
        steps: res.steps,
        atom_steps: res.atom_steps,
        wall_seconds: res.wall_seconds,
    }
}

/// Defect densities along the ion path, one row per segment midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub depth_um: Vec<f64>,
    pub isolated_per_nm: Vec<f64>,
    pub clustered_per_nm: Vec<f64>,
    pub nuclear_per_nm: Vec<f64>,
    pub amorphous: Vec<Option<bool>>,
    pub failed: Vec<bool>,
}

impl DepthProfile {
    pub fn from_outcomes(outcomes: &[SegmentOutcome]) -> Self {
        let mut sorted: Vec<&SegmentOutcome> = outcomes.iter().collect();
        sorted.sort_by_key(|o| o.segment.index);
        Self {
            depth_um: sorted.iter().map(|o| o.segment.midpoint_um).collect(),
            isolated_per_nm: sorted.iter().map(|o| o.isolated_per_nm).collect(),
            clustered_per_nm: sorted.iter().map(|o| o.clustered_per_nm).collect(),
            nuclear_per_nm: vec![0.0; sorted.len()],
            amorphous: sorted.iter().map(|o| o.ok().then_some(o.amorphous)).collect(),
            failed: sorted.iter().map(|o| !o.ok()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.depth_um.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth_um.is_empty()
    }

    pub fn partial(&self) -> bool {
        self.failed.iter().any(|&f| f)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("depth_um,isolated_per_nm,clustered_per_nm,nuclear_per_nm,amorphous,failed\n");
        for i in 0..self.len() {
            let amorphous = match self.amorphous[i] {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.depth_um[i],
                self.isolated_per_nm[i],
                self.clustered_per_nm[i],
                self.nuclear_per_nm[i],
                amorphous,
                self.failed[i] as u8
            ));
        }
        s
    }

    /// Log-scale density versus depth with isolated, clustered and nuclear
    /// series. Zero densities are dropped from the log axis.
    pub fn to_svg(&self, title: &str) -> String {
        let pick = |ys: &[f64]| -> Vec<(f64, f64)> {
            self.depth_um.iter().zip(ys).filter(|(_, &y)| y > 0.0).map(|(&x, &y)| (x, y)).collect()
        };
        let series = vec![
            Series::new("isolated vacancies", pick(&self.isolated_per_nm), "#1f77b4"),
            Series::new("vacancy clusters", pick(&self.clustered_per_nm), "#d62728"),
            Series::new("nuclear estimate", pick(&self.nuclear_per_nm), "#7f7f7f").dashed(),
        ];
        let xmax = self.depth_um.iter().cloned().fold(0.0, f64::max);
        Plot {
            title: title.to_string(),
            x: Axis::linear("depth (um)", 0.0, (xmax * 1.1).max(1.0)),
            y: Axis::log_auto("vacancies per nm", series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
            series,
        }
        .render()
    }
}

/// Fills the nuclear column from the table's collision vacancy rate; zero
/// beyond the range. Idempotent.
pub fn merge_nuclear_estimate(profile: &DepthProfile, table: &StoppingTable) -> DepthProfile {
    let mut out = profile.clone();
    out.nuclear_per_nm = profile.depth_um.iter().map(|&z| table.nuclear_vacancy_rate(z)).collect();
    out
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Directory for per-segment records; enables resume.
    pub segment_dir: Option<PathBuf>,
    /// Only run these segment indices.
    pub only: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRun {
    pub segments: Vec<SegmentOutcome>,
    pub profile: DepthProfile,
    pub atom_steps: u64,
    pub resumed: Vec<usize>,
}

fn segment_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("segment_{index:03}.json"))
}

fn load_record(dir: &Path, inputs: &SegmentInputs) -> Option<SegmentOutcome> {
    let text = std::fs::read_to_string(segment_path(dir, inputs.segment.index)).ok()?;
    let rec: SegmentRecord = serde_json::from_str(&text).ok()?;
    (rec.inputs == *inputs && rec.outcome.ok()).then_some(rec.outcome)
}

fn store_record(dir: &Path, rec: &SegmentRecord) -> Result<(), PipelineError> {
    let path = segment_path(dir, rec.inputs.segment.index);
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(rec).expect("record serializes");
    std::fs::write(&tmp, text).map_err(|source| PipelineError::Io { path: tmp.clone(), source })?;
    std::fs::rename(&tmp, &path).map_err(|source| PipelineError::Io { path, source })
}

/// Total atom-steps implied by the plan: each segment contributes its step
/// count times its atom count.
pub fn planned_atom_steps(outcomes: &[SegmentOutcome]) -> u64 {
    outcomes.iter().map(|o| o.steps as u64 * o.atoms as u64).sum()
}

pub fn run_pipeline(cfg: &RunConfig, options: &PipelineOptions) -> Result<PipelineRun, PipelineError> {
    let table = cfg.stopping_table().map_err(|e| PipelineError::IonState { depth: 0.0, reason: e.to_string() })?;
    let plan = segment_trajectory(&table, cfg.track.segments, &cfg.dose, cfg.seed)?;
    let plan: Vec<SegmentConfig> = match &options.only {
        Some(only) => plan.into_iter().filter(|s| only.contains(&s.index)).collect(),
        None => plan,
    };
    if let Some(dir) = &options.segment_dir {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    }
    let tersoff = TersoffParams::carbon();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let results: Vec<Result<(SegmentOutcome, bool), PipelineError>> = pool.install(|| {
        plan.par_iter()
            .map(|seg| {
                let inputs = SegmentInputs {
                    segment: seg.clone(),
                    md: cfg.md.clone(),
                    dose: cfg.dose.clone(),
                    cluster_cutoff_nm: cfg.track.cluster_cutoff_nm,
                    bond_cutoff_nm: cfg.track.bond_cutoff_nm,
                    amorphous_threshold: cfg.track.amorphous_threshold,
                };
                if let Some(dir) = &options.segment_dir {
                    if let Some(done) = load_record(dir, &inputs) {
                        return Ok((done, true));
                    }
                }
                let outcome = run_segment(cfg, seg, &tersoff);
                if let Some(dir) = &options.segment_dir {
                    store_record(dir, &SegmentRecord { inputs, outcome: outcome.clone() })?;
                }
                Ok((outcome, false))
            })
            .collect()
    });
    let mut segments = Vec::with_capacity(results.len());
    let mut resumed = Vec::new();
    for r in results {
        let (o, reused) = r?;
        if reused {
            resumed.push(o.segment.index);
        }
        segments.push(o);
    }
    segments.sort_by_key(|o| o.segment.index);
    let atom_steps: u64 = segments.iter().map(|o| o.atom_steps).sum();
    let planned = planned_atom_steps(&segments);
    if planned != atom_steps {
        return Err(PipelineError::Workload { reported: atom_steps, total: planned });
    }
    let profile = merge_nuclear_estimate(&DepthProfile::from_outcomes(&segments), &table);
    Ok(PipelineRun { segments, profile, atom_steps, resumed })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = 0.5 * (i + j) as f64 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
