use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sage_hbf_core::adapt::{augment, binomial, flatten_dataset};
use sage_hbf_core::beamforming::{normalize_power, sinr_all, sum_rate, transmit_power, HybridPrecoder, LinkConfig};
use sage_hbf_core::channel::{array_response, AntennaLayout, Dataset};

fn complex_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), rows * cols)
        .prop_map(move |v| DMatrix::from_iterator(rows, cols, v.into_iter().map(|(re, im)| Complex64::new(re, im))))
}

/// Channel, analog phases and digital precoder with matching shapes.
fn instance() -> impl Strategy<Value = (DMatrix<Complex64>, DMatrix<f64>, DMatrix<Complex64>)> {
    (2usize..10, 1usize..4, 0usize..3).prop_flat_map(|(n_t, n_u, extra)| {
        let n_rf = n_u + extra;
        (
            complex_matrix(n_t, n_u),
            prop::collection::vec(0.0f64..std::f64::consts::TAU, n_t * n_rf)
                .prop_map(move |v| DMatrix::from_vec(n_t, n_rf, v)),
            complex_matrix(n_rf, n_u),
        )
    })
}

proptest! {
    #[test]
    fn normalized_power_hits_budget((_, phases, digital) in instance(), p_max in 0.1f64..10.0) {
        prop_assume!(digital.norm() > 1e-3);
        let p = HybridPrecoder::new(phases, digital).unwrap();
        if let Ok(q) = normalize_power(&p, p_max) {
            prop_assert!((transmit_power(&q) - p_max).abs() <= 1e-9 * p_max);
            prop_assert_eq!(q.analog_phases, p.analog_phases);
        }
    }

    #[test]
    fn sinr_is_invariant_to_joint_channel_and_noise_scaling(
        (h, phases, digital) in instance(),
        c in 0.05f64..20.0,
        sigma2 in 1e-3f64..10.0,
    ) {
        let p = HybridPrecoder::new(phases, digital).unwrap();
        let a = sinr_all(&h, &p, &LinkConfig::new(sigma2, 1.0).unwrap());
        let b = sinr_all(&h.map(|z| z * c), &p, &LinkConfig::new(c * c * sigma2, 1.0).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn sum_rate_falls_with_noise((h, phases, digital) in instance(), sigma2 in 1e-3f64..1.0) {
        let p = HybridPrecoder::new(phases, digital).unwrap();
        prop_assume!(h.norm() > 1e-3 && p.digital.norm() > 1e-3);
        let lo = sum_rate(&h, &p, &LinkConfig::new(sigma2, 1.0).unwrap());
        let hi = sum_rate(&h, &p, &LinkConfig::new(2.0 * sigma2, 1.0).unwrap());
        prop_assert!(hi <= lo);
        prop_assert!(lo >= 0.0);
    }

    #[test]
    fn array_response_entries_have_unit_modulus(
        phi in -3.2f64..3.2,
        theta in 0.0f64..3.2,
        n in (1usize..5, 1usize..5, 1usize..5),
    ) {
        let layout = AntennaLayout::new(n.0, n.1, n.2);
        let a = array_response(phi, theta, &layout);
        prop_assert_eq!(a.len(), layout.n_t());
        prop_assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn augmented_samples_reuse_real_columns(n_samples in 1usize..6, n_u in 1usize..4, m in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..n_samples)
            .map(|i| DMatrix::from_fn(4, n_u, |r, c| Complex64::new((i * 100 + r * 10 + c) as f64, 0.0)))
            .collect();
        let d = Dataset::new(samples.clone(), "t".into()).unwrap();
        let f = flatten_dataset(&d).unwrap();
        let a = augment(&f, m, n_u, false, &mut rng).unwrap();
        prop_assert_eq!(a.m(), m);
        for i in 0..m {
            let s = a.sample(i);
            for (k, &col) in a.sample_indices(i).iter().enumerate() {
                let (src, user) = f.provenance[col];
                prop_assert_eq!(s.column(k), samples[src].column(user));
            }
        }
    }

    #[test]
    fn binomial_is_symmetric(n in 0u64..60, k in 0u64..60) {
        prop_assume!(k <= n);
        prop_assert_eq!(binomial(n, k), binomial(n, n - k));
        if k >= 1 {
            // Pascal's rule
            prop_assert_eq!(binomial(n + 1, k).unwrap(), binomial(n, k).unwrap() + binomial(n, k - 1).unwrap());
        }
    }
}
