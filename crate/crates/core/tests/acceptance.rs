//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 7`.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use iontrack::anneal::{init_kmc, overlapping_track_density, run_anneal, AnnealSchedule, KmcParams, Placement};
use iontrack::chain::{chain_census, dipolar_couplings, sample_chain, ChainParams};
use iontrack::config::preset;
use iontrack::odmr::{fit, linspace, reference_cases, Model, ReferenceCase};
use iontrack::pipeline::{run_pipeline, spearman, PipelineOptions};
use iontrack::radialdose::{ion_state_at, DoseKernel};
use iontrack::rng::{seeded_stream, RandomStream};
use iontrack::spectra::{
    add_noise, deconvolve, default_grid, depth_profile_pl, synth_spectrum, synth_stack, ComponentBasis,
    ComponentWeights,
};
use iontrack::stopping::StoppingTable;
use iontrack::units::{stage_to_depth, Diamond};

type Verdict = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: fn() -> Verdict,
}

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn stopping_ingestion() -> Verdict {
    let u = StoppingTable::uranium_1100mev();
    let au = StoppingTable::gold_950mev();
    let (se_u, se_au) = (u.stopping_at_depth(0.0).0, au.stopping_at_depth(0.0).0);
    let detail = format!("U S_e(0) {se_u:.2} keV/nm, range {:.2} um; Au S_e(0) {se_au:.2} keV/nm", u.range());
    ensure(rel(se_u, 49.0) <= 0.1 && rel(u.range(), 30.0) <= 0.1 && rel(se_au, 40.0) <= 0.1, detail)
}

fn radial_dose() -> Verdict {
    let kernel = DoseKernel::default();
    let mut worst = 0f64;
    for table in [StoppingTable::uranium_1100mev(), StoppingTable::gold_950mev()] {
        for i in 0..20 {
            let z = table.range() * (i as f64 + 0.5) / 20.0;
            let state = ion_state_at(&table, z, &kernel).map_err(|e| e.to_string())?;
            let p = kernel.profile(&state).map_err(|e| e.to_string())?;
            worst = worst.max(rel(p.integral(), kernel.f_local * state.se * 1e3));
        }
    }
    let u = StoppingTable::uranium_1100mev();
    let near = |z| {
        let s = ion_state_at(&u, z, &kernel).unwrap();
        kernel.radial_dose(&s, 2.0 * kernel.r_min_nm).unwrap()
    };
    let (d1, d19) = (near(1.0), near(19.0));
    ensure(
        worst < 0.01 && d19 > d1,
        format!("worst normalization error {:.3}%; near-axis dose 19 um / 1 um = {:.3}", worst * 100.0, d19 / d1),
    )
}

fn md_engine() -> Verdict {
    let force = common::max_force_error();
    let drift = common::nve_drift();
    let (a, e) = common::relaxed_lattice();
    let detail = format!(
        "force error {force:.1e}; drift {:.3} meV/atom at {:.0} K; E_coh {e:.4} eV, a0 {a:.5} nm",
        drift.worst_ev * 1e3,
        drift.mean_temperature
    );
    ensure(
        force < 1e-4
            && drift.worst_ev < 2e-3
            && (200.0..400.0).contains(&drift.mean_temperature)
            && rel(e, common::COHESIVE_EV) < 1e-3
            && rel(a, common::LATTICE_NM) < 1e-3,
        detail,
    )
}

fn defect_analysis() -> Verdict {
    let nontrivial = common::compare_with_brute_force(200, 2024)?;
    ensure(nontrivial > 20, format!("200 cases identical to brute force, {nontrivial} with clusters"))
}

fn track_pipeline() -> Verdict {
    let cfg = preset("desk-U").map_err(|e| e.to_string())?;
    let run = run_pipeline(&cfg, &PipelineOptions::default()).map_err(|e| e.to_string())?;
    if let Some(bad) = run.segments.iter().find(|o| !o.ok()) {
        return Err(format!("segment {} failed: {:?}", bad.segment.index, bad.status));
    }
    let seg = &run.segments;
    let deep: Vec<_> = seg.iter().filter(|o| o.segment.midpoint_um > 25.0).collect();
    let deep_defects: usize = deep.iter().map(|o| o.vacancies + o.interstitials).sum();
    let nearest = |z: f64| {
        seg.iter()
            .min_by(|a, b| (a.segment.midpoint_um - z).abs().total_cmp(&(b.segment.midpoint_um - z).abs()))
            .unwrap()
    };
    let (shallow, peak) = (nearest(1.5), nearest(19.0));
    let first: Vec<_> = seg.iter().take(7).collect();
    let rho = spearman(
        &first.iter().map(|o| o.segment.midpoint_um).collect::<Vec<_>>(),
        &first.iter().map(|o| o.clustered_per_nm).collect::<Vec<_>>(),
    );
    let profile: Vec<String> = seg
        .iter()
        .map(|o| format!("{:.1}:{}/{}", o.segment.midpoint_um, o.isolated, o.clustered))
        .collect();
    let detail = format!(
        "(a) {deep_defects} defects beyond 25 um; (b) clustered {:.4}/nm at {:.1} um vs {:.4}/nm at {:.1} um; \
         (c) Spearman {rho:.3}; isolated/clustered by depth [{}]",
        peak.clustered_per_nm,
        peak.segment.midpoint_um,
        shallow.clustered_per_nm,
        shallow.segment.midpoint_um,
        profile.join(" ")
    );
    ensure(
        !deep.is_empty() && deep_defects == 0 && peak.clustered_per_nm > shallow.clustered_per_nm && rho > 0.8,
        detail,
    )
}

fn kinetic_monte_carlo() -> Verdict {
    let ring = common::gillespie_ring(100_000, 99);
    let worst_z = ring.event_z.iter().chain([&ring.time_z]).fold(0f64, |m, z| m.max(z.abs()));

    let hop = KmcParams { box_nm: [10.0; 3], ..KmcParams::default() };
    let barrier = common::arrhenius_barrier(&hop);

    // Post-anneal state where tracks overlap at 10¹² ions/cm²: equal vacancy
    // supply, nitrogen content the only difference.
    let density = overlapping_track_density(1e12, 1.0);
    let ensemble = |ppm: f64| -> Result<(u64, u64, bool), String> {
        let (mut nv, mut isolated, mut closes) = (0, 0, true);
        for seed in 0..20 {
            let p = KmcParams {
                box_nm: [30.0; 3],
                nitrogen_ppm: ppm,
                placement: Placement::Uniform { vacancies_per_nm3: density },
                ..KmcParams::default()
            };
            let mut state = init_kmc(&p, &seeded_stream(seed, 0)).map_err(|e| e.to_string())?;
            let r = run_anneal(&mut state, &AnnealSchedule::default()).map_err(|e| e.to_string())?;
            nv += r.nv_total();
            isolated += r.isolated_vacancies();
            closes &= r.final_ledger.closes() && r.series.iter().all(|s| s.ledger.closes());
        }
        Ok((nv, isolated, closes))
    };
    let (nv_hi, iso_hi, close_hi) = ensemble(100.0)?;
    let (nv_lo, iso_lo, close_lo) = ensemble(1.0)?;
    let ratio = nv_hi as f64 / (nv_lo.max(1)) as f64;
    let detail = format!(
        "max |z| {worst_z:.2}; barrier {barrier:.4} eV (set {:.2}); NV 100 ppm {nv_hi} vs 1 ppm {nv_lo} \
         (ratio {ratio:.1}); isolated after anneal {}; ledgers close {}",
        hop.vacancy_barrier_ev,
        iso_hi + iso_lo,
        close_hi && close_lo
    );
    ensure(
        worst_z < 3.0
            && rel(barrier, hop.vacancy_barrier_ev) < 0.02
            && ratio > 10.0
            && iso_hi + iso_lo == 0
            && close_hi
            && close_lo,
        detail,
    )
}

fn spectra() -> Verdict {
    let basis = ComponentBasis::bundled();
    let grid = default_grid(&basis, 1441);
    let (gr1, nvm) = (basis.index_of("GR1").unwrap(), basis.index_of("NV-").unwrap());
    let mut rng = seeded_stream(77, 0);

    let mut round_trip = 0f64;
    for _ in 0..20 {
        let w: Vec<f64> = (0..basis.len()).map(|_| 0.1 + rng.uniform()).collect();
        let s = synth_spectrum(&ComponentWeights::new(w.clone()), &basis, &grid).map_err(|e| e.to_string())?;
        let fit = deconvolve(&s, &basis).map_err(|e| e.to_string())?;
        for (a, b) in fit.weights.iter().zip(&w) {
            round_trip = round_trip.max(rel(*a, *b));
        }
    }

    let mut mix = vec![0.0; basis.len()];
    mix[gr1] = 10.0;
    mix[nvm] = 1.0;
    let clean = synth_spectrum(&ComponentWeights::new(mix), &basis, &grid).map_err(|e| e.to_string())?;
    let mut worst_ratio = 0f64;
    for _ in 0..20 {
        let fit = deconvolve(&add_noise(&clean, 20.0, &mut rng), &basis).map_err(|e| e.to_string())?;
        worst_ratio = worst_ratio.max(rel(fit.weights[gr1] / fit.weights[nvm], 10.0));
    }

    // Stage positions 0..12.5 um map onto the whole 30 um range.
    let depths: Vec<f64> = (0..26).map(|i| stage_to_depth(0.5 * i as f64, 2.4)).collect();
    let exact = depths.iter().enumerate().all(|(i, &z)| z == 2.4 * (0.5 * i as f64));
    let range = StoppingTable::uranium_1100mev().range();
    let weights = |g: f64, n: f64| {
        let mut w = vec![0.0; basis.len()];
        w[gr1] = g;
        w[nvm] = n;
        w
    };
    // As implanted: GR1 rises two and a half decades towards the end of
    // range over a weak NV⁻ background.
    let sample_a: Vec<Vec<f64>> =
        depths.iter().map(|&z| weights(10f64.powf(2.5 * (z.min(range) / range - 1.0)), 0.003)).collect();
    // Annealed: vacancies gone, NV⁻ limited by the nitrogen supply and
    // nearly flat along the track.
    let sample_b: Vec<Vec<f64>> =
        depths.iter().map(|&z| weights(0.0, 1.0 - 0.6 * (-(range - z.min(range)) / 4.0).exp())).collect();
    let stack_a = synth_stack(&depths, &sample_a, &basis, &grid, 100.0, &mut rng).map_err(|e| e.to_string())?;
    let stack_b = synth_stack(&depths, &sample_b, &basis, &grid, 100.0, &mut rng).map_err(|e| e.to_string())?;
    let span_a = depth_profile_pl(&stack_a, &basis).map_err(|e| e.to_string())?.decades("GR1").unwrap_or(0.0);
    let span_b = depth_profile_pl(&stack_b, &basis).map_err(|e| e.to_string())?.decades("NV-").unwrap_or(f64::INFINITY);

    ensure(
        round_trip < 0.01 && worst_ratio < 0.15 && span_a >= 2.0 && span_b < 1.0 && exact,
        format!(
            "round trip {:.2e}; 10:1 ratio worst error {:.1}%; GR1 span A {span_a:.2} decades; NV- span B \
             {span_b:.2} decades; stage correction exact {exact}",
            round_trip,
            worst_ratio * 100.0
        ),
    )
}

/// Randomized trace around the reference measurements.
fn random_case(rng: &mut RandomStream) -> ReferenceCase {
    let u = |rng: &mut RandomStream, a: f64, b: f64| a + (b - a) * rng.uniform();
    match rng.index(4) {
        0 => {
            let fwhm = u(rng, 10.0, 20.0);
            ReferenceCase {
                name: "esr",
                model: Model::Esr { peaks: 1 },
                params: vec![u(rng, 0.8, 1.2), u(rng, 0.05, 0.15), u(rng, 2860.0, 2880.0), fwhm],
                grid: linspace(2800.0, 2940.0, 2001),
                keys: &["fwhm_0"],
                tolerance: 0.02,
            }
        }
        1 => {
            let tau = u(rng, 0.2, 1.0);
            ReferenceCase {
                name: "rabi",
                model: Model::Rabi,
                params: vec![u(rng, 0.1, 0.3), tau, u(rng, 4.0, 10.0), u(rng, -0.5, 0.5), 1.0],
                grid: linspace(0.0, 8.0 * tau, 4000),
                keys: &["tau"],
                tolerance: 0.02,
            }
        }
        2 => {
            let t1 = u(rng, 2.0, 20.0);
            ReferenceCase {
                name: "t1",
                model: Model::T1,
                params: vec![u(rng, 0.2, 0.4), t1, u(rng, 0.5, 0.9)],
                grid: linspace(0.0, 5.0 * t1, 4000),
                keys: &["t1"],
                tolerance: 0.02,
            }
        }
        _ => {
            let (t2, t2_star) = (u(rng, 30.0, 80.0), u(rng, 0.3, 3.0));
            let mut grid = linspace(0.0, 5.0 * t2_star, 2000);
            grid.extend(linspace(5.0 * t2_star, 5.0 * t2, 2001).into_iter().skip(1));
            ReferenceCase {
                name: "hahn",
                model: Model::Hahn,
                params: vec![u(rng, 0.3, 0.5), t2, t2_star, u(rng, 0.3, 0.7), 0.5],
                grid,
                keys: &["t2", "t2_star"],
                tolerance: 0.05,
            }
        }
    }
}

fn odmr_fits() -> Verdict {
    let mut failures = Vec::new();
    for (k, case) in reference_cases().iter().enumerate() {
        let trace = case.synth(20.0, &mut seeded_stream(7, k as u64));
        let err = fit(case.model, &trace).map(|f| case.worst_error(&f)).unwrap_or(f64::INFINITY);
        if err > case.tolerance {
            failures.push(format!("{} {:.2}%", case.name, err * 100.0));
        }
    }
    let mut rng = seeded_stream(8, 0);
    let mut errors: Vec<f64> = (0..100)
        .map(|_| {
            let case = random_case(&mut rng);
            let trace = case.synth(20.0, &mut rng);
            fit(case.model, &trace).map(|f| case.worst_error(&f)).unwrap_or(f64::INFINITY)
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    let (median, p95) = (0.5 * (errors[49] + errors[50]), errors[94]);
    ensure(
        failures.is_empty() && median < 0.03 && p95 < 0.10,
        format!(
            "10 reference cases, out of tolerance: [{}]; randomized median {:.2}%, p95 {:.2}%",
            failures.join(", "),
            median * 100.0,
            p95 * 100.0
        ),
    )
}

fn chain_statistics() -> Verdict {
    let host = Diamond::default();
    let params = ChainParams { nitrogen_ppm: 100.0, efficiency: 0.175, capture_radius_nm: 2.0, length_um: 1.0 };
    let mut rng = seeded_stream(9, 0);
    let (mut count, mut length) = (0usize, 0.0);
    let mut cube_exact = true;
    for _ in 0..10_000 {
        let s = sample_chain(&params, &host, &mut rng).map_err(|e| e.to_string())?;
        count += s.positions.len();
        length += params.length_um * 1e3;
        if let Ok(c) = dipolar_couplings(&s, 52_000.0) {
            cube_exact &= c.distances_nm.iter().zip(&c.couplings_khz).all(|(d, j)| *j == 52_000.0 / (d * d * d));
        }
    }
    let rate = count as f64 / length;
    let err = rel(rate, params.rate_per_nm(&host));
    let full = chain_census(1e8, 16.0, 1.0).map_err(|e| e.to_string())?;
    let seen = chain_census(1e8, 16.0, 0.75).map_err(|e| e.to_string())?;
    ensure(
        err < 0.01 && full.expected == 16.0 && seen.areal_density_cm2 == 0.75e8 && cube_exact,
        format!(
            "rate error {:.3}% over 10^4 chains; {} tracks per 4x4 um^2; {:.2e} cm^-2 at detection 0.75; cube law exact {cube_exact}",
            err * 100.0,
            full.expected,
            seen.areal_density_cm2
        ),
    )
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("iontrack-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_iontrack"))
        .args(args)
        .env_remove("IONTRACK_WORKERS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Every output listed in a manifest, with its bytes.
fn listed_outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let text = fs::read(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let manifest: serde_json::Value = serde_json::from_slice(&text).map_err(|e| e.to_string())?;
    let mut files = vec![("manifest.json".to_string(), text)];
    for o in manifest["outputs"].as_array().ok_or("manifest has no outputs")? {
        let p = o["path"].as_str().ok_or("output without path")?;
        files.push((p.to_string(), fs::read(dir.join(p)).map_err(|e| e.to_string())?));
    }
    Ok(files)
}

fn reproducibility() -> Verdict {
    let runs: [(&str, &[&str]); 5] = [
        ("track", &["track", "run", "--preset", "desk-U", "--segments", "9", "--set", "md.cell_nm=[4.0,4.0,1.07]"]),
        ("dose", &["dose", "map", "--preset", "desk-Au", "--depth-points", "31", "--radius-points", "40"]),
        ("anneal", &["anneal", "run", "--preset", "desk-U", "--set", "anneal.replicas=3", "--set", "anneal.params.box_nm=[12.0,12.0,12.0]"]),
        ("chain", &["chain", "stats", "--preset", "dilute-chain", "--draws", "50"]),
        ("census", &["chain", "census", "--preset", "dilute-chain"]),
    ];
    let mut files = 0;
    for (name, args) in runs {
        let (first, second) = (scratch(&format!("{name}-a")), scratch(&format!("{name}-b")));
        let mut argv = args.to_vec();
        argv.extend(["--workers", "1", "--out", first.to_str().unwrap()]);
        run_cli(&argv)?;
        let manifest = first.join("manifest.json");
        run_cli(&["replay", manifest.to_str().unwrap(), "--workers", "1", "--out", second.to_str().unwrap()])?;
        let (a, b) = (listed_outputs(&first)?, listed_outputs(&second)?);
        if a != b {
            return Err(format!("{name}: replay differs"));
        }
        files += a.len();
        let _ = fs::remove_dir_all(&first);
        let _ = fs::remove_dir_all(&second);
    }
    Ok(format!("5 commands replayed from their manifests, {files} files bit-identical"))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "stopping ingestion", budget: Duration::from_secs(1), check: stopping_ingestion },
        Criterion { id: 2, name: "radial dose", budget: Duration::from_secs(10), check: radial_dose },
        Criterion { id: 3, name: "MD engine", budget: Duration::from_secs(600), check: md_engine },
        Criterion { id: 4, name: "Wigner-Seitz and clustering", budget: Duration::from_secs(60), check: defect_analysis },
        Criterion { id: 5, name: "scaled track pipeline", budget: Duration::from_secs(7200), check: track_pipeline },
        Criterion { id: 6, name: "kinetic Monte Carlo", budget: Duration::from_secs(600), check: kinetic_monte_carlo },
        Criterion { id: 7, name: "spectra", budget: Duration::from_secs(60), check: spectra },
        Criterion { id: 8, name: "ODMR fits", budget: Duration::from_secs(120), check: odmr_fits },
        Criterion { id: 9, name: "chain statistics", budget: Duration::from_secs(30), check: chain_statistics },
        Criterion { id: 10, name: "reproducibility", budget: Duration::from_secs(600), check: reproducibility },
    ];
    // Harness flags such as --nocapture are ignored; bare numbers select criteria.
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(c.check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (pass, detail) = match verdict {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {:<28} {}  ({:.1} s) {detail}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
