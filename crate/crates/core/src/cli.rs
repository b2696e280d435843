//! Command-line driver. Every command resolves its configuration, writes its
//! outputs into a fresh directory together with a manifest, and can be
//! replayed from that manifest.
//!
//! Exit codes: 0 success, 1 runtime failure (partial outputs kept in
//! `<out>.partial`), 2 usage error, 3 configuration error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anneal::{init_kmc, run_anneal, state_csv, AnnealResult};
use crate::chain::{chain_census, dipolar_couplings, sample_chain, spacing_stats, ChainParams};
use crate::config::{load_config_with, parse_config, preset_text, RunConfig};
use crate::odmr::{fit, Model, Trace};
use crate::pipeline::{run_pipeline, segment_trajectory, DepthProfile, PipelineOptions, SegmentOutcome};
use crate::plot::{Axis, Plot, Series};
use crate::radialdose::{energy_density_map, iso_contour, FieldGrid};
use crate::rng::{seeded_stream, ALGORITHM};
use crate::spectra::{depth_profile_pl, stage_to_depth, ComponentBasis, Spectrum};
use crate::units::Diamond;

pub const WORKERS_ENV: &str = "IONTRACK_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

/// Stream offsets per command family, so a shared seed never reuses a stream.
const ANNEAL_STREAM_BASE: u64 = 2000;
const CHAIN_STREAM_BASE: u64 = 3000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "iontrack", version, about = "Ion-track defect simulation and NV spectroscopy analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segmented two-temperature MD along the ion path.
    #[command(subcommand)]
    Track(TrackCmd),
    /// Radial energy-density field around the path.
    #[command(subcommand)]
    Dose(DoseCmd),
    /// Kinetic Monte Carlo annealing into NV centers.
    #[command(subcommand)]
    Anneal(AnnealCmd),
    /// PL spectrum deconvolution.
    #[command(subcommand)]
    Spectra(SpectraCmd),
    /// ODMR trace fitting.
    #[command(subcommand)]
    Odmr(OdmrCmd),
    /// NV-chain statistics.
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrackCmd {
    /// Run all segments and write the depth profile.
    Run(TrackRunArgs),
    /// Rebuild the profile from the segment records of an earlier run.
    Profile(TrackProfileArgs),
}

#[derive(Debug, Subcommand)]
pub enum DoseCmd {
    Map(DoseMapArgs),
}

#[derive(Debug, Subcommand)]
pub enum AnnealCmd {
    Run(AnnealRunArgs),
}

#[derive(Debug, Subcommand)]
pub enum SpectraCmd {
    Fit(SpectraFitArgs),
}

#[derive(Debug, Subcommand)]
pub enum OdmrCmd {
    Fit(OdmrFitArgs),
}

#[derive(Debug, Subcommand)]
pub enum ChainCmd {
    Stats(ChainStatsArgs),
    Census(ChainCensusArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Named preset: desk-U, desk-Au, paper-U, paper-Au, dilute-chain.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set md.evolve_fs=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory; must not exist unless --force is given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Validate and print the plan without computing.
    #[arg(long)]
    pub dry_run: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, env = WORKERS_ENV, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrackRunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Only run these segment indices (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub segments: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct TrackProfileArgs {
    /// Directory written by `track run`.
    #[arg(long)]
    pub from: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DoseMapArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 121)]
    pub depth_points: usize,
    #[arg(long, default_value_t = 160)]
    pub radius_points: usize,
    /// Outer radius of the map, nm.
    #[arg(long, default_value_t = 30.0)]
    pub r_max: f64,
    /// Contour levels, eV/nm³.
    #[arg(long, value_delimiter = ',', default_value = "10,100")]
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnnealRunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SpectraFitArgs {
    /// Spectrum CSV files or directories of them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Treat the `depth_um` header as a stage position and correct it.
    #[arg(long)]
    pub stage: bool,
    #[arg(long, default_value_t = 2.4)]
    pub refractive_index: f64,
    /// Component basis TOML (defaults to the bundled one).
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OdmrFitArgs {
    /// esr, rabi, t1 or hahn.
    #[arg(long)]
    pub model: String,
    /// Number of ESR dips.
    #[arg(long, default_value_t = 1)]
    pub peaks: usize,
    pub trace: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ChainStatsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Independent chains to sample.
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ChainCensusArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Fluence, cm⁻² (defaults to the config's).
    #[arg(long)]
    pub fluence: Option<f64>,
    /// Field area, µm² (defaults to the square of `chain.field_um`).
    #[arg(long)]
    pub area: Option<f64>,
    #[arg(long)]
    pub detection: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Record of a command sufficient to reproduce its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Arguments without output-location and scheduling flags.
    pub argv: Vec<String>,
    /// Resolved configuration, when the command takes one.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub rng: String,
    pub status: String,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
}

/// Output directory built under `<out>.partial` and renamed into place on
/// success.
struct OutDir {
    target: PathBuf,
    work: PathBuf,
}

impl OutDir {
    fn prepare(args: &OutArgs) -> Result<Self, CliError> {
        let target = args.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
        if target.exists() && !args.force {
            return Err(CliError::Usage(format!("{} exists; pass --force to replace it", target.display())));
        }
        let mut name = target.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
        name.push(".partial");
        let work = target.with_file_name(name);
        std::fs::create_dir_all(&work).map_err(runtime)?;
        Ok(Self { target, work })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
        std::fs::write(&p, contents).map_err(|e| runtime(format!("{}: {e}", p.display())))
    }

    fn commit(self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).map_err(runtime)?;
        }
        std::fs::rename(&self.work, &self.target).map_err(runtime)?;
        Ok(self.target)
    }
}

fn list_outputs(root: &Path) -> Vec<OutputEntry> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<OutputEntry>) {
        let Ok(rd) = std::fs::read_dir(dir) else { return };
        let mut entries: Vec<_> = rd.flatten().collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                if rel == MANIFEST_FILE || rel == TIMING_FILE {
                    continue;
                }
                out.push(OutputEntry { path: rel, bytes: e.metadata().map(|m| m.len()).unwrap_or(0) });
            }
        }
    }
    let mut v = Vec::new();
    walk(root, root, &mut v);
    v
}

/// Drops output-location and scheduling flags and makes input paths
/// absolute so the argument list can be replayed from anywhere.
fn canonical_argv(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        let (flag, inline) = match a.split_once('=') {
            Some((f, v)) if a.starts_with("--") => (f.to_string(), Some(v.to_string())),
            _ => (a.clone(), None),
        };
        match flag.as_str() {
            "--out" | "--workers" => {
                i += if inline.is_some() { 1 } else { 2 };
                continue;
            }
            "--force" | "--dry-run" => {
                i += 1;
                continue;
            }
            _ => {}
        }
        let p = Path::new(a);
        if !a.starts_with('-') && p.exists() {
            out.push(std::fs::canonicalize(p).map(|c| c.to_string_lossy().into_owned()).unwrap_or_else(|_| a.clone()));
        } else {
            out.push(a.clone());
        }
        i += 1;
    }
    out
}

struct Session {
    argv: Vec<String>,
    /// Configuration recorded in a manifest being replayed.
    replay_config: Option<RunConfig>,
    started: Instant,
}

impl Session {
    fn resolve(&self, args: &ConfigArgs) -> Result<RunConfig, CliError> {
        if let Some(c) = &self.replay_config {
            return Ok(c.clone());
        }
        let mut cfg = match (&args.preset, &args.config) {
            (Some(p), None) => parse_config(preset_text(p).map_err(config_err)?, &args.overrides).map_err(config_err)?,
            (None, Some(path)) => load_config_with(path, &args.overrides).map_err(config_err)?,
            (None, None) => parse_config("", &args.overrides).map_err(config_err)?,
            (Some(_), Some(_)) => return Err(CliError::Usage("--preset and --config are exclusive".into())),
        };
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn finish(
        &self,
        dir: OutDir,
        config: Option<&RunConfig>,
        status: &str,
        timing: serde_json::Value,
    ) -> Result<PathBuf, CliError> {
        if let Some(c) = config {
            dir.write("config.toml", c.to_toml())?;
        }
        let manifest = Manifest {
            tool: "iontrack".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv: canonical_argv(&self.argv),
            config: config.map(RunConfig::to_toml),
            seed: config.map(|c| c.seed),
            rng: ALGORITHM.into(),
            status: status.into(),
            outputs: list_outputs(&dir.work),
        };
        dir.write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
        let timing = serde_json::json!({
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "detail": timing,
        });
        dir.write(TIMING_FILE, serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n")?;
        dir.commit()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(runtime)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Parses `argv` (without the program name) and runs the command.
/// Returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("iontrack".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let session = Session { argv, replay_config: None, started: Instant::now() };
    match run(cli.command, session) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command, session: Session) -> Result<(), CliError> {
    match command {
        Command::Track(TrackCmd::Run(a)) => track_run(&a, &session),
        Command::Track(TrackCmd::Profile(a)) => track_profile(&a, &session),
        Command::Dose(DoseCmd::Map(a)) => dose_map(&a, &session),
        Command::Anneal(AnnealCmd::Run(a)) => anneal_run(&a, &session),
        Command::Spectra(SpectraCmd::Fit(a)) => spectra_fit(&a, &session),
        Command::Odmr(OdmrCmd::Fit(a)) => odmr_fit(&a, &session),
        Command::Chain(ChainCmd::Stats(a)) => chain_stats(&a, &session),
        Command::Chain(ChainCmd::Census(a)) => chain_census_cmd(&a, &session),
        Command::Replay(a) => replay(&a),
    }
}

fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| config_err(format!("{}: {e}", args.manifest.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| config_err(format!("manifest: {e}")))?;
    let replay_config = match &manifest.config {
        Some(t) => Some(parse_config(t, &[]).map_err(config_err)?),
        None => None,
    };
    let mut argv = manifest.argv.clone();
    if let Some(out) = &args.out.out {
        argv.push("--out".into());
        argv.push(out.to_string_lossy().into_owned());
    }
    if args.out.force {
        argv.push("--force".into());
    }
    if args.out.dry_run {
        argv.push("--dry-run".into());
    }
    argv.push("--workers".into());
    argv.push(args.out.workers.to_string());
    let cli = Cli::try_parse_from(std::iter::once("iontrack".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot replay another replay".into()));
    }
    run(cli.command, Session { argv, replay_config, started: Instant::now() })
}

fn track_run(a: &TrackRunArgs, s: &Session) -> Result<(), CliError> {
    let cfg = s.resolve(&a.config)?;
    let table = cfg.stopping_table().map_err(config_err)?;
    let plan = segment_trajectory(&table, cfg.track.segments, &cfg.dose, cfg.seed).map_err(config_err)?;
    if a.out.dry_run {
        let reps = crate::ttmd::system::cells_for(cfg.md.cell_nm, cfg.md.a0_nm);
        let atoms = 8 * reps[0] * reps[1] * reps[2];
        println!("track run `{}`: {} segments, {} atoms each, {:.0} fs per segment, nominal dt {} fs", cfg.name, plan.len(), atoms, cfg.md.duration_fs(), cfg.md.dt_fs);
        println!("index  z_start_um  z_end_um  midpoint_um  se_kev_nm  beta");
        for p in &plan {
            println!("{:5}  {:10.3}  {:8.3}  {:11.3}  {:9.3}  {:.4}", p.index, p.z_start_um, p.z_end_um, p.midpoint_um, p.ion.se, p.ion.beta);
        }
        return Ok(());
    }
    let dir = OutDir::prepare(&a.out)?;
    let options = PipelineOptions { workers: a.out.workers, segment_dir: Some(dir.path("segments")), only: a.segments.clone() };
    let run = run_pipeline(&cfg, &options).map_err(runtime)?;
    write_profile(&dir, &run.profile, &cfg.name)?;
    dir.write("segments.csv", segments_csv(&run.segments))?;
    let timing = serde_json::json!({
        "atom_steps": run.atom_steps,
        "resumed_segments": run.resumed,
        "segments": run.segments.iter().map(|o| serde_json::json!({"index": o.segment.index, "wall_seconds": o.wall_seconds})).collect::<Vec<_>>(),
    });
    let partial = run.profile.partial();
    let path = s.finish(dir, Some(&cfg), if partial { "partial" } else { "ok" }, timing)?;
    println!("{}", path.display());
    if partial {
        return Err(CliError::Runtime("one or more segments failed; profile marked partial".into()));
    }
    Ok(())
}

fn write_profile(dir: &OutDir, profile: &DepthProfile, name: &str) -> Result<(), CliError> {
    dir.write("profile.csv", profile.to_csv())?;
    dir.write("profile.svg", profile.to_svg(&format!("Vacancy densities along the track ({name})")))
}

fn segments_csv(segments: &[SegmentOutcome]) -> String {
    let mut s = String::from(
        "index,midpoint_um,se_kev_nm,beta,status,atoms,vacancies,interstitials,isolated,clustered,largest_cluster,disordered_fraction,deposited_ev,energy_residual,steps,atom_steps\n",
    );
    for o in segments {
        let status = if o.ok() { "ok" } else { "failed" };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            o.segment.index,
            o.segment.midpoint_um,
            o.segment.ion.se,
            o.segment.ion.beta,
            status,
            o.atoms,
            o.vacancies,
            o.interstitials,
            o.isolated,
            o.clustered,
            o.largest_cluster,
            o.disordered_fraction,
            o.deposited_ev,
            o.energy_residual,
            o.steps,
            o.atom_steps
        ));
    }
    s
}

fn track_profile(a: &TrackProfileArgs, s: &Session) -> Result<(), CliError> {
    let cfg_path = a.from.join("config.toml");
    let cfg = crate::config::load_config(&cfg_path).map_err(config_err)?;
    let table = cfg.stopping_table().map_err(config_err)?;
    let seg_dir = a.from.join("segments");
    let mut outcomes = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(&seg_dir)
        .map_err(|e| config_err(format!("{}: {e}", seg_dir.display())))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(runtime)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
        let o: SegmentOutcome = serde_json::from_value(v["outcome"].clone()).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
        outcomes.push(o);
    }
    if outcomes.is_empty() {
        return Err(CliError::Runtime(format!("no segment records in {}", seg_dir.display())));
    }
    if a.out.dry_run {
        println!("would rebuild a profile from {} segment records", outcomes.len());
        return Ok(());
    }
    let profile = crate::pipeline::merge_nuclear_estimate(&DepthProfile::from_outcomes(&outcomes), &table);
    let dir = OutDir::prepare(&a.out)?;
    write_profile(&dir, &profile, &cfg.name)?;
    let path = s.finish(dir, Some(&cfg), "ok", serde_json::json!({}))?;
    println!("{}", path.display());
    Ok(())
}

fn dose_map(a: &DoseMapArgs, s: &Session) -> Result<(), CliError> {
    let cfg = s.resolve(&a.config)?;
    let table = cfg.stopping_table().map_err(config_err)?;
    let grid = FieldGrid {
        depth_points: a.depth_points,
        radius_points: a.radius_points,
        r_lo_nm: cfg.dose.r_min_nm,
        r_hi_nm: a.r_max,
        z_hi_um: None,
    };
    if a.out.dry_run {
        println!("dose map `{}`: {} x {} grid, r in [{}, {}] nm, levels {:?}", cfg.name, grid.depth_points, grid.radius_points, grid.r_lo_nm, grid.r_hi_nm, a.levels);
        return Ok(());
    }
    let dir = OutDir::prepare(&a.out)?;
    let field = pool(a.out.workers)?.install(|| energy_density_map(&table, &cfg.dose, &grid)).map_err(config_err)?;
    let mut csv = String::from("depth_um,radius_nm,energy_density_ev_nm3\n");
    for (iz, z) in field.depths_um.iter().enumerate() {
        for (ir, r) in field.radii_nm.iter().enumerate() {
            csv.push_str(&format!("{z},{r},{}\n", field.values[iz][ir]));
        }
    }
    dir.write("energy_density.csv", csv)?;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut series = Vec::new();
    for (k, &level) in a.levels.iter().enumerate() {
        let lines = iso_contour(&field, level);
        let mut csv = String::from("piece,radius_nm,depth_um\n");
        for (i, line) in lines.iter().enumerate() {
            for (r, z) in line {
                csv.push_str(&format!("{i},{r},{z}\n"));
            }
        }
        dir.write(&format!("contour_{level}.csv"), csv)?;
        for (i, line) in lines.into_iter().enumerate() {
            let label = if i == 0 { format!("{level} eV/nm3") } else { String::new() };
            let pts = line.into_iter().map(|(r, z)| (z, r)).collect();
            series.push(Series::new(&label, pts, colors[k % colors.len()]).without_markers());
        }
    }
    series.retain(|s| !s.label.is_empty() || s.points.len() > 1);
    let plot = Plot {
        title: format!("Energy-density contours ({})", cfg.name),
        x: Axis::linear("depth (um)", 0.0, table.range()),
        y: Axis::log("radius (nm)", grid.r_lo_nm.min(0.1), grid.r_hi_nm),
        series: series.into_iter().filter(|s| !s.label.is_empty()).collect(),
    };
    dir.write("contours.svg", plot.render())?;
    let path = s.finish(dir, Some(&cfg), "ok", serde_json::json!({}))?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AnnealSummary {
    replicas: usize,
    volume_nm3: f64,
    nitrogen_ppm: f64,
    mean_nv: f64,
    mean_isolated_vacancies: f64,
    mean_clustered_vacancies: f64,
    mean_recombined: f64,
    nv_yield: f64,
    nv_minus_fraction_by_stage: Vec<f64>,
    ledgers_close: bool,
    spacing: Option<crate::anneal::SpacingMetrics>,
    results: Vec<AnnealResult>,
}

fn anneal_run(a: &AnnealRunArgs, s: &Session) -> Result<(), CliError> {
    let cfg = s.resolve(&a.config)?;
    let mut params = cfg.anneal.params.clone();
    params.nitrogen_ppm = cfg.target.nitrogen_ppm;
    params.a0_nm = cfg.target.a0_nm;
    params.validate().map_err(config_err)?;
    let replicas = cfg.anneal.replicas;
    if a.out.dry_run {
        println!("anneal run `{}`: {} replicas, box {:?} nm, {} ppm N, {} stages", cfg.name, replicas, params.box_nm, params.nitrogen_ppm, cfg.anneal.schedule.stages.len());
        for st in &cfg.anneal.schedule.stages {
            println!("  {:.2} K for {} s, activation {}", st.temperature_k, st.duration_s, st.activation);
        }
        return Ok(());
    }
    let dir = OutDir::prepare(&a.out)?;
    let outcome: Vec<Result<(AnnealResult, String, Option<crate::anneal::SpacingMetrics>), CliError>> = pool(a.out.workers)?.install(|| {
        (0..replicas)
            .into_par_iter()
            .map(|r| {
                let rng = seeded_stream(cfg.seed, ANNEAL_STREAM_BASE + r as u64);
                let mut state = init_kmc(&params, &rng).map_err(runtime)?;
                let spacing = if r == 0 { crate::anneal::nitrogen_spacing(&state) } else { None };
                let res = run_anneal(&mut state, &cfg.anneal.schedule).map_err(runtime)?;
                Ok((res, state_csv(&state), spacing))
            })
            .collect()
    });
    let mut results = Vec::with_capacity(replicas);
    let mut spacing = None;
    for (r, o) in outcome.into_iter().enumerate() {
        let (res, sites, sp) = o?;
        dir.write(&format!("replicas/series_{r:03}.csv"), res.series_csv())?;
        dir.write(&format!("replicas/sites_{r:03}.csv"), sites)?;
        if sp.is_some() {
            spacing = sp;
        }
        results.push(res);
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&AnnealResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let total_v: f64 = results.iter().map(|r| r.final_ledger.vacancies_total as f64).sum();
    let total_nv: f64 = results.iter().map(|r| r.nv_total() as f64).sum();
    let stages = cfg.anneal.schedule.stages.len();
    let nv_minus_fraction_by_stage = (0..stages)
        .map(|k| {
            let (m, t) = results.iter().filter_map(|r| r.charge.get(k)).fold((0.0, 0.0), |(m, t), c| (m + c.nv_minus, t + c.nv_minus + c.nv_zero));
            if t > 0.0 {
                m / t
            } else {
                0.0
            }
        })
        .collect();
    let summary = AnnealSummary {
        replicas,
        volume_nm3: results.first().map_or(0.0, |r| r.volume_nm3),
        nitrogen_ppm: params.nitrogen_ppm,
        mean_nv: mean(&|r| r.nv_total() as f64),
        mean_isolated_vacancies: mean(&|r| r.isolated_vacancies() as f64),
        mean_clustered_vacancies: mean(&|r| r.final_ledger.vacancies_in_clusters as f64),
        mean_recombined: mean(&|r| r.final_ledger.vacancies_recombined as f64),
        nv_yield: if total_v > 0.0 { total_nv / total_v } else { 0.0 },
        nv_minus_fraction_by_stage,
        ledgers_close: results.iter().all(|r| r.final_ledger.closes()),
        spacing,
        results,
    };
    dir.write("summary.json", json(&summary))?;
    let path = s.finish(dir, Some(&cfg), "ok", serde_json::json!({}))?;
    println!("{}", path.display());
    Ok(())
}

fn collect_spectra(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?
                .flatten()
                .map(|e| e.path())
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            v.sort();
            files.extend(v);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(CliError::Config(format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Config("no spectrum files found".into()));
    }
    Ok(files)
}

fn spectra_fit(a: &SpectraFitArgs, s: &Session) -> Result<(), CliError> {
    let basis = match &a.basis {
        Some(p) => {
            let t = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            ComponentBasis::from_toml(&t).map_err(config_err)?
        }
        None => ComponentBasis::bundled(),
    };
    if !(a.refractive_index > 0.0) {
        return Err(CliError::Config("refractive index must be positive".into()));
    }
    let files = collect_spectra(&a.inputs)?;
    let mut stack = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| config_err(format!("{}: {e}", f.display())))?;
        let mut sp = Spectrum::from_csv(&text).map_err(|e| config_err(format!("{}: {e}", f.display())))?;
        if a.stage {
            sp.depth_um = sp.depth_um.map(|z| stage_to_depth(z, a.refractive_index));
        }
        stack.push(sp);
    }
    if a.out.dry_run {
        println!("spectra fit: {} spectra, {} components", stack.len(), basis.len());
        return Ok(());
    }
    let dir = OutDir::prepare(&a.out)?;
    let mut weights_csv = String::from("file,depth_um");
    for c in &basis.components {
        weights_csv.push_str(&format!(",{}", c.name));
    }
    weights_csv.push_str(",residual_norm\n");
    let fits: Vec<_> = pool(a.out.workers)?.install(|| stack.par_iter().map(|sp| crate::spectra::deconvolve(sp, &basis)).collect());
    for (f, (sp, w)) in files.iter().zip(stack.iter().zip(&fits)) {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let depth = sp.depth_um.map(|d| d.to_string()).unwrap_or_default();
        match w {
            Ok(w) => {
                weights_csv.push_str(&format!("{name},{depth}"));
                for x in &w.weights {
                    weights_csv.push_str(&format!(",{x}"));
                }
                weights_csv.push_str(&format!(",{}\n", w.residual_norm));
            }
            Err(e) => weights_csv.push_str(&format!("{name},{depth}{},failed: {e}\n", ",".repeat(basis.len()))),
        }
    }
    dir.write("weights.csv", weights_csv)?;
    let has_depths = stack.iter().all(|s| s.depth_um.is_some());
    if has_depths && stack.len() > 1 {
        let mut order: Vec<usize> = (0..stack.len()).collect();
        order.sort_by(|&i, &j| stack[i].depth_um.partial_cmp(&stack[j].depth_um).unwrap_or(std::cmp::Ordering::Equal));
        let sorted: Vec<Spectrum> = order.iter().map(|&i| stack[i].clone()).collect();
        let profile = pool(a.out.workers)?.install(|| depth_profile_pl(&sorted, &basis)).map_err(runtime)?;
        dir.write("profile.csv", profile.to_csv())?;
        let colors = ["#d62728", "#2ca02c", "#1f77b4"];
        let series: Vec<Series> = profile
            .names
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let pts = profile.depth_um.iter().zip(&profile.intensity[k]).map(|(&z, &v)| (z, v)).collect();
                Series::new(n, pts, colors[k % colors.len()])
            })
            .collect();
        let zmax = profile.depth_um.iter().cloned().fold(0.0, f64::max);
        let plot = Plot {
            title: "PL component intensity versus depth".into(),
            x: Axis::linear("depth (um)", 0.0, (zmax * 1.05).max(1.0)),
            y: Axis::log_auto("normalized intensity", profile.intensity.iter().flatten().copied()),
            series,
        };
        dir.write("profile.svg", plot.render())?;
    }
    let path = s.finish(dir, None, "ok", serde_json::json!({}))?;
    println!("{}", path.display());
    Ok(())
}

fn odmr_fit(a: &OdmrFitArgs, s: &Session) -> Result<(), CliError> {
    let mut model: Model = a.model.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    if let Model::Esr { .. } = model {
        if a.peaks == 0 {
            return Err(CliError::Usage("--peaks must be at least 1".into()));
        }
        model = Model::Esr { peaks: a.peaks };
    }
    let text = std::fs::read_to_string(&a.trace).map_err(|e| config_err(format!("{}: {e}", a.trace.display())))?;
    let trace = Trace::from_csv(&text).map_err(|e| config_err(format!("{}: {e}", a.trace.display())))?;
    if a.out.dry_run {
        println!("odmr fit: model {model}, {} points", trace.len());
        return Ok(());
    }
    let result = fit(model, &trace).map_err(runtime)?;
    let text = json(&result);
    print!("{text}");
    if a.out.out.is_some() {
        let dir = OutDir::prepare(&a.out)?;
        dir.write("fit.json", &text)?;
        let curve = result.curve(&trace.x);
        let mut csv = String::from("x,y,model\n");
        for i in 0..trace.len() {
            csv.push_str(&format!("{},{},{}\n", trace.x[i], trace.y[i], curve[i]));
        }
        dir.write("fit_curve.csv", csv)?;
        s.finish(dir, None, "ok", serde_json::json!({}))?;
    }
    Ok(())
}

fn chain_params(cfg: &RunConfig) -> ChainParams {
    ChainParams {
        nitrogen_ppm: cfg.target.nitrogen_ppm,
        efficiency: cfg.chain.efficiency,
        capture_radius_nm: cfg.chain.capture_radius_nm,
        length_um: cfg.chain.length_um,
    }
}

fn chain_stats(a: &ChainStatsArgs, s: &Session) -> Result<(), CliError> {
    let cfg = s.resolve(&a.config)?;
    let params = chain_params(&cfg);
    params.validate().map_err(config_err)?;
    let host = Diamond::new(cfg.target.a0_nm);
    if a.draws == 0 {
        return Err(CliError::Usage("--draws must be at least 1".into()));
    }
    if a.out.dry_run {
        println!("chain stats `{}`: {} draws, expected {:.1} NVs per chain", cfg.name, a.draws, params.expected_count(&host));
        return Ok(());
    }
    let dir = OutDir::prepare(&a.out)?;
    let samples: Vec<_> = (0..a.draws)
        .map(|d| sample_chain(&params, &host, &mut seeded_stream(cfg.seed, CHAIN_STREAM_BASE + d as u64)))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let counts: Vec<usize> = samples.iter().map(|c| c.positions.len()).collect();
    let mut all_gaps = Vec::new();
    for c in &samples {
        all_gaps.extend(crate::chain::gaps(c));
    }
    dir.write("positions.csv", crate::chain::positions_csv(&samples[0]))?;
    let first_stats = spacing_stats(&samples[0]).ok();
    let couplings = dipolar_couplings(&samples[0], cfg.chain.j0_khz_nm3).ok();
    if let Some(c) = &couplings {
        let mut csv = String::from("distance_nm,coupling_khz\n");
        for (d, j) in c.distances_nm.iter().zip(&c.couplings_khz) {
            csv.push_str(&format!("{d},{j}\n"));
        }
        dir.write("couplings.csv", csv)?;
    }
    let hist = crate::chain::Histogram::new(&all_gaps, a.bins);
    dir.write("gap_histogram.csv", hist.to_csv())?;
    let mean_gap = if all_gaps.is_empty() { f64::NAN } else { all_gaps.iter().sum::<f64>() / all_gaps.len() as f64 };
    let report = serde_json::json!({
        "params": params,
        "rate_per_nm": params.rate_per_nm(&host),
        "expected_count": params.expected_count(&host),
        "expected_mean_gap_nm": 1.0 / params.rate_per_nm(&host),
        "draws": a.draws,
        "mean_count": counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        "mean_gap_nm": mean_gap,
        "first_chain": first_stats.map(|st| serde_json::json!({
            "count": samples[0].positions.len(),
            "mean_gap_nm": st.mean,
            "median_gap_nm": st.median,
            "ks_statistic": st.ks_statistic,
            "ks_p_value": st.ks_p_value,
        })),
        "j0_khz_nm3": cfg.chain.j0_khz_nm3,
    });
    dir.write("stats.json", json(&report))?;
    let path = s.finish(dir, Some(&cfg), "ok", serde_json::json!({}))?;
    println!("{}", path.display());
    Ok(())
}

fn chain_census_cmd(a: &ChainCensusArgs, s: &Session) -> Result<(), CliError> {
    let cfg = s.resolve(&a.config)?;
    let fluence = a.fluence.unwrap_or(cfg.ion.fluence_cm2);
    let area = a.area.unwrap_or(cfg.chain.field_um * cfg.chain.field_um);
    let detection = a.detection.unwrap_or(cfg.chain.detection_efficiency);
    let census = chain_census(fluence, area, detection).map_err(config_err)?;
    let report = serde_json::json!({
        "fluence_cm2": fluence,
        "area_um2": area,
        "detection": detection,
        "census": census,
    });
    let text = json(&report);
    print!("{text}");
    if a.out.out.is_some() && !a.out.dry_run {
        let dir = OutDir::prepare(&a.out)?;
        dir.write("census.json", &text)?;
        s.finish(dir, Some(&cfg), "ok", serde_json::json!({}))?;
    }
    Ok(())
}
