//! Invariants checked over randomized inputs.

use iontrack::anneal::{charge_state_balance, init_kmc, select_event, KmcParams, Placement};
use iontrack::chain::{chain_census, dipolar_couplings, sample_chain, ChainParams};
use iontrack::defects::{cluster_defects, wigner_seitz};
use iontrack::pipeline::spearman;
use iontrack::radialdose::{ion_state_at, DoseKernel};
use iontrack::rng::seeded_stream;
use iontrack::stopping::StoppingTable;
use iontrack::ttmd::system::{diamond_sites, Cell};
use iontrack::units::{stage_to_depth, Diamond};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_replay_exactly(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = seeded_stream(seed, stream);
        let mut b = seeded_stream(seed, stream);
        for _ in 0..32 {
            let u = a.uniform();
            prop_assert_eq!(u.to_bits(), b.uniform().to_bits());
            prop_assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn interpolated_stopping_stays_between_nodes(frac in 0.0f64..1.0) {
        let t = StoppingTable::uranium_1100mev();
        let z = frac * t.range();
        let (se, sn) = t.stopping_at_depth(z);
        let d = t.depths();
        let i = d.partition_point(|&x| x <= z).clamp(1, d.len() - 1);
        let (lo, hi) = (t.electronic()[i - 1].min(t.electronic()[i]), t.electronic()[i - 1].max(t.electronic()[i]));
        prop_assert!(se >= lo - 1e-9 && se <= hi + 1e-9, "{} not in [{}, {}]", se, lo, hi);
        prop_assert!(sn >= 0.0);
    }

    #[test]
    fn radial_dose_normalized_and_decreasing(frac in 0.0f64..0.95, gold in any::<bool>()) {
        let t = if gold { StoppingTable::gold_950mev() } else { StoppingTable::uranium_1100mev() };
        let k = DoseKernel::default();
        let s = ion_state_at(&t, frac * t.range(), &k).unwrap();
        let p = k.profile(&s).unwrap();
        let target = k.f_local * s.se * 1e3;
        prop_assert!((p.integral() / target - 1.0).abs() < 0.01);
        prop_assert!(p.dose.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn wigner_seitz_conserves(seed in any::<u64>(), removed in 0usize..10, extra in 0usize..6) {
        let a0 = 0.3567;
        let cell = Cell::new([2.0 * a0; 3]);
        let reference = diamond_sites([2, 2, 2], a0);
        let mut rng = seeded_stream(seed, 0);
        let mut x = reference.clone();
        for _ in 0..removed {
            let k = rng.index(x.len());
            x.swap_remove(k);
        }
        for _ in 0..extra {
            x.push([rng.uniform() * cell.lengths[0], rng.uniform() * cell.lengths[1], rng.uniform() * cell.lengths[2]]);
        }
        let d = wigner_seitz(&cell, &reference, &cell, &x).unwrap();
        prop_assert!(d.conserves());
        prop_assert!(d.vacancy_count() >= removed.saturating_sub(extra));
        let c = cluster_defects(&d, &reference, &cell, 0.2522).unwrap();
        prop_assert_eq!(c.total(), d.vacancy_count());
        prop_assert_eq!(c.sizes().iter().sum::<usize>(), d.vacancy_count());
    }

    #[test]
    fn spearman_is_rank_based(v in prop::collection::vec(-1e3f64..1e3, 3..20)) {
        let x: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let r = spearman(&x, &v);
        if r.is_finite() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            // invariant under a strictly increasing transform
            let cubed: Vec<f64> = v.iter().map(|y| y * y * y + 2.0 * y).collect();
            prop_assert!((spearman(&x, &cubed) - r).abs() < 1e-12);
        }
        let sorted = { let mut s = v.clone(); s.sort_by(f64::total_cmp); s.dedup(); s };
        let xs: Vec<f64> = (0..sorted.len()).map(|i| i as f64).collect();
        if sorted.len() > 2 {
            prop_assert!((spearman(&xs, &sorted) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn census_is_bilinear(f in 0.0f64..1e12, area in 0.0f64..400.0, det in 0.0f64..1.0) {
        let c = chain_census(f, area, det).unwrap();
        prop_assert!((c.expected - f * 1e-8 * area * det).abs() <= 1e-9 * c.expected.max(1.0));
        prop_assert_eq!(c.areal_density_cm2, f * det);
        prop_assert!(c.interval_low <= c.interval_high);
    }

    #[test]
    fn couplings_follow_cube_law(seed in 0u64..1000, j0 in 1.0f64..1e5) {
        let p = ChainParams { nitrogen_ppm: 100.0, efficiency: 0.175, capture_radius_nm: 2.0, length_um: 0.5 };
        let sample = sample_chain(&p, &Diamond::default(), &mut seeded_stream(seed, 0)).unwrap();
        if let Ok(c) = dipolar_couplings(&sample, j0) {
            for (d, j) in c.distances_nm.iter().zip(&c.couplings_khz) {
                prop_assert_eq!(*j, j0 / (d * d * d));
            }
        }
    }

    #[test]
    fn charge_split_is_complete(nv in 0.0f64..1e4, donors in 0.0f64..1e4, act in 0.0f64..1.0) {
        let (minus, zero) = charge_state_balance(nv, donors, act);
        prop_assert!((minus + zero - nv).abs() <= 1e-12 * nv.max(1.0));
        prop_assert!(minus >= 0.0 && zero >= 0.0);
        prop_assert!(minus <= act * donors + 1e-9);
    }

    #[test]
    fn selected_event_has_positive_rate(rates in prop::collection::vec(0.0f64..5.0, 1..12), u in 0.0f64..1.0) {
        match select_event(&rates, u) {
            Some(i) => prop_assert!(rates[i] > 0.0),
            None => prop_assert!(rates.iter().all(|&r| r == 0.0)),
        }
    }

    #[test]
    fn kmc_ledger_closes_after_placement(seed in any::<u64>(), ppm in 0.0f64..500.0, dens in 0.0f64..0.02, frac in 0.0f64..1.0) {
        let p = KmcParams {
            box_nm: [8.0; 3],
            nitrogen_ppm: ppm,
            placement: Placement::Uniform { vacancies_per_nm3: dens },
            interstitial_fraction: frac,
            ..KmcParams::default()
        };
        let s = init_kmc(&p, &seeded_stream(seed, 0)).unwrap();
        prop_assert!(s.ledger.closes());
        prop_assert_eq!(s.ledger.vacancies_free as usize, s.vacancies.len());
    }

    #[test]
    fn stage_correction_is_exact(z in 0.0f64..200.0) {
        prop_assert_eq!(stage_to_depth(z, 2.4), 2.4 * z);
    }
}
