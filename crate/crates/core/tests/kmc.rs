//! Event selection, Arrhenius kinetics and bookkeeping of the annealing kMC.

mod common;

use common::{arrhenius_barrier, gillespie_ring};
use iontrack::anneal::*;
use iontrack::rng::seeded_stream;

#[test]
fn gillespie_frequencies_on_toy_ring() {
    let r = gillespie_ring(100_000, 99);
    for (k, z) in r.event_z.iter().enumerate() {
        assert!(z.abs() < 3.0, "event class {k}: z = {z:.2}");
    }
    assert!(r.time_z.abs() < 3.0, "elapsed time z = {:.2}", r.time_z);
}

/// Class choice in the production stepper follows the instantaneous rates.
#[test]
fn kmc_class_frequencies() {
    let params = KmcParams {
        box_nm: [12.0; 3],
        nitrogen_ppm: 0.0,
        placement: Placement::Uniform { vacancies_per_nm3: 0.02 },
        interstitial_fraction: 0.6,
        capture_radius_nm: 0.0,
        recombination_radius_nm: 0.0,
        aggregation_radius_nm: 0.0,
        vacancy_barrier_ev: 1.7,
        ..KmcParams::default()
    };
    let mut state = init_kmc(&params, &seeded_stream(5, 0)).unwrap();
    state.temperature_k = 1200.0;
    let (rv, ri) = state.hop_rates();
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    for _ in 0..100_000 {
        let nv = state.vacancies.len() as f64;
        let ni = state.interstitials.len() as f64;
        let p = rv * nv / (rv * nv + ri * ni);
        exp += p;
        var += p * (1.0 - p);
        if state.kmc_step().unwrap().kind == EventKind::VacancyHop {
            obs += 1.0;
        }
    }
    let z = (obs - exp) / var.sqrt();
    assert!(z.abs() < 3.0, "z = {z:.2}");
}

#[test]
fn arrhenius_slope_recovers_barrier() {
    let params = KmcParams { box_nm: [10.0; 3], ..KmcParams::default() };
    let barrier = arrhenius_barrier(&params);
    assert!((barrier / params.vacancy_barrier_ev - 1.0).abs() < 0.02, "fitted barrier {barrier}");
}

#[test]
fn ledger_closes_through_anneal() {
    let params = KmcParams {
        box_nm: [20.0; 3],
        placement: Placement::Uniform { vacancies_per_nm3: 0.01 },
        ..KmcParams::default()
    };
    let mut state = init_kmc(&params, &seeded_stream(11, 0)).unwrap();
    assert!(state.ledger.closes());
    let res = run_anneal(&mut state, &AnnealSchedule::default()).unwrap();
    assert!(res.final_ledger.closes());
    assert!(res.series.iter().all(|s| s.ledger.closes()));
    // 1273 K for an hour leaves no free vacancy in a 20 nm box
    assert_eq!(res.final_ledger.vacancies_free, 0);
}
