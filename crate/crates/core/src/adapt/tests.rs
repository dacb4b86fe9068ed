use super::*;
use alloc::vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::NetConfig;

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, n_t: usize, n_u: usize) -> Dataset {
    let samples = (0..n)
        .map(|_| {
            DMatrix::from_fn(n_t, n_u, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        })
        .collect();
    Dataset::new(samples, "random".into()).unwrap()
}

fn tiny_net() -> NetConfig {
    NetConfig {
        n_t: 4,
        n_rf: 2,
        n_u: 2,
        conv_channels: 3,
        conv_layers: 2,
        fc_width: 8,
        fc_layers: 2,
        dropout_rate: 0.25,
        kernel_size: 3,
        use_batchnorm: true,
        width_scale: 1.0,
    }
}

fn link() -> LinkConfig {
    LinkConfig::new(0.1, 1.0).unwrap()
}

#[test]
fn flatten_single_sample_is_that_sample() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(1), 1, 4, 3);
    let f = flatten_dataset(&d).unwrap();
    assert_eq!(f.columns, d.samples[0]);
    assert_eq!(f.provenance, vec![(0, 0), (0, 1), (0, 2)]);
}

#[test]
fn flatten_orders_sample_major() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(2), 2, 3, 2);
    let f = flatten_dataset(&d).unwrap();
    assert_eq!(f.provenance, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    for (k, &(s, u)) in f.provenance.iter().enumerate() {
        assert_eq!(f.columns.column(k), d.samples[s].column(u));
    }
}

#[test]
fn flatten_provenance_is_a_bijection() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(3), 17, 4, 3);
    let f = flatten_dataset(&d).unwrap();
    assert_eq!(f.len(), 51);
    let mut seen = vec![false; 51];
    for &(s, u) in &f.provenance {
        assert!(!seen[s * 3 + u]);
        seen[s * 3 + u] = true;
    }
    assert!(seen.into_iter().all(|x| x));
    assert!(flatten_dataset(&Dataset { samples: vec![], label: "e".into(), scale: 1.0 }).is_err());
}

#[test]
fn augment_single_column() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(4), 1, 4, 1);
    let f = flatten_dataset(&d).unwrap();
    let a = augment(&f, 1, 1, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.m(), 1);
    assert_eq!(a.sample(0), d.samples[0]);
    assert!(augment(&f, 0, 1, false, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
}

#[test]
fn augmented_columns_are_source_columns() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(6), 5, 4, 3);
    let f = flatten_dataset(&d).unwrap();
    let a = augment(&f, 200, 3, false, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a.indices.len(), 600);
    for i in 0..a.m() {
        let s = a.sample(i);
        for u in 0..3 {
            let col = s.column(u);
            let hit = (0..f.len()).any(|k| {
                f.columns
                    .column(k)
                    .iter()
                    .zip(col.iter())
                    .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
            });
            assert!(hit);
        }
    }
}

#[test]
fn column_selection_is_uniform() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(8), 4, 2, 2);
    let f = flatten_dataset(&d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0u64; 8];
    for _ in 0..100_000 {
        let a = augment(&f, 5, 2, false, &mut rng).unwrap();
        a.indices.iter().for_each(|&k| counts[k] += 1);
    }
    let total: u64 = counts.iter().sum();
    let e = total as f64 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 18.475, "{chi2}");
}

#[test]
fn duplicates_follow_birthday_law() {
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(10), 4, 2, 2);
    let f = flatten_dataset(&d).unwrap();
    let n = 200_000;
    let a = augment(&f, n, 3, false, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let dup = (0..n)
        .filter(|&i| {
            let s = a.sample_indices(i);
            s[0] == s[1] || s[0] == s[2] || s[1] == s[2]
        })
        .count();
    let p = 1.0 - (7.0 / 8.0) * (6.0 / 8.0);
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    let freq = dup as f64 / n as f64;
    assert!((freq - p).abs() < 4.0 * sd, "{freq} vs {p}");

    let distinct = augment(&f, 5000, 3, true, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    for i in 0..distinct.m() {
        let s = distinct.sample_indices(i);
        assert!(s[0] != s[1] && s[0] != s[2] && s[1] != s[2]);
    }
    assert!(augment(&f, 1, 9, true, &mut ChaCha8Rng::seed_from_u64(12)).is_err());
}

#[test]
fn binomial_ceiling() {
    assert_eq!(binomial(8, 2), Some(28));
    assert_eq!(binomial(40, 4), Some(91_390));
    assert_eq!(binomial(5, 7), Some(0));
    assert_eq!(binomial(64, 32), Some(1_832_624_140_942_590_534));
    assert_eq!(binomial(10_000, 4000), None);
    let d = random_dataset(&mut ChaCha8Rng::seed_from_u64(13), 20, 4, 2);
    let a = augment(&flatten_dataset(&d).unwrap(), 3, 2, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.combinatorial_ceiling(), Some(780));
}

fn cfg(aug_m: usize, epochs: usize) -> FinetuneConfig {
    FinetuneConfig { aug_m, tau: 0.05, epochs, batch_size: 6, steps_per_epoch: None, distinct_users: false }
}

#[test]
fn zero_epochs_keep_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = random_dataset(&mut rng, 10, 4, 2);
    let val = random_dataset(&mut rng, 8, 4, 2).samples;
    let p = ModelParams::init(tiny_net(), &mut rng).unwrap();
    let (phi, hist) = finetune(&p, &d, &val, &cfg(50, 0), &link(), &mut rng).unwrap();
    assert_eq!(phi, p);
    assert!(hist.epochs.is_empty());
    assert!((hist.zero_shot - mean_sum_rate(&p, &val, &link(), 3).unwrap()).abs() < 1e-12);
    assert_eq!(hist.ceiling, Some(190));
}

#[test]
fn raw_finetuning_records_every_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = random_dataset(&mut rng, 40, 4, 2);
    let val = random_dataset(&mut rng, 8, 4, 2).samples;
    let p = ModelParams::init(tiny_net(), &mut rng).unwrap();
    let (_, hist) = finetune(&p, &d, &val, &cfg(0, 4), &link(), &mut rng).unwrap();
    assert_eq!(hist.epochs.len(), 4);
    assert_eq!(hist.curve().len(), 5);
    assert_eq!(hist.ceiling, None);
}

#[test]
fn finetune_matches_sgd_transcript() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = random_dataset(&mut rng, 3, 4, 2);
    let val = random_dataset(&mut rng, 5, 4, 2).samples;
    let p = ModelParams::init(tiny_net(), &mut rng).unwrap();
    let c = FinetuneConfig { aug_m: 10, steps_per_epoch: None, ..cfg(10, 2) };
    let mut run_rng = ChaCha8Rng::seed_from_u64(17);
    let (phi, hist) = finetune(&p, &d, &val, &c, &link(), &mut run_rng.clone()).unwrap();

    // Ten rebuilt samples, batch 6: one pass is two steps, and a fresh
    // shuffle precedes both steps because only four entries remain after
    // the first. Each shuffle permutes the previous order.
    let f = flatten_dataset(&d).unwrap();
    let aug = augment(&f, 10, 2, false, &mut run_rng).unwrap();
    let mut theta = p.clone();
    let mut vals = vec![];
    let mut order: Vec<usize> = (0..10).collect();
    for _ in 0..2 {
        for _ in 0..2 {
            order.shuffle(&mut run_rng);
            let batch: Vec<ChannelMatrix> = order[..6].iter().map(|&i| aug.sample(i)).collect();
            let g = grad(&theta, &batch, &link(), Mode::Train, &mut run_rng).unwrap();
            for (v, d) in theta.values.iter_mut().zip(&g.gradient.values) {
                *v -= 0.05 * d;
            }
            theta.update_running_stats(g.batch_stats.as_ref().unwrap(), BN_MOMENTUM);
        }
        vals.push(mean_sum_rate(&theta, &val, &link(), 100).unwrap());
    }
    let err = phi.values.iter().zip(&theta.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    assert_eq!(phi.running, theta.running);
    for (r, v) in hist.epochs.iter().zip(&vals) {
        assert!((r.val_sum_rate - v).abs() < 1e-12);
    }
}

#[test]
fn fixed_steps_reuse_a_small_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let d = random_dataset(&mut rng, 4, 4, 2);
    let val = random_dataset(&mut rng, 4, 4, 2).samples;
    let p = ModelParams::init(tiny_net(), &mut rng).unwrap();
    let c = FinetuneConfig { steps_per_epoch: Some(3), ..cfg(0, 2) };
    let (phi, hist) = finetune(&p, &d, &val, &c, &link(), &mut rng).unwrap();
    assert_eq!(hist.epochs.len(), 2);
    assert_ne!(phi.values, p.values);
}
