use super::*;
use crate::channel::AntennaLayout;
use alloc::vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn tiny_net(dropout: f64) -> NetConfig {
    NetConfig {
        n_t: 4,
        n_rf: 2,
        n_u: 2,
        conv_channels: 3,
        conv_layers: 2,
        fc_width: 8,
        fc_layers: 2,
        dropout_rate: dropout,
        kernel_size: 3,
        use_batchnorm: true,
        width_scale: 1.0,
    }
}

fn link() -> LinkConfig {
    LinkConfig::new(0.1, 1.0).unwrap()
}

fn hyper(batch: usize) -> MetaHyper {
    MetaHyper { alpha: 0.05, epsilon: 0.02, beta: 1.0, batch_size: batch, epochs: 2, ..MetaHyper::default() }
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, label: &str) -> Dataset {
    let samples = (0..n)
        .map(|_| DMatrix::from_fn(4, 2, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)))
        .collect();
    Dataset::new(samples, label.into()).unwrap()
}

fn fixed_set(k: usize, n: usize, seed: u64) -> DomainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = (0..k).map(|i| SourceDomain::fixed(i, random_dataset(&mut rng, n, "d")).unwrap()).collect();
    DomainSet::new(domains, 2).unwrap()
}

fn generator_set(seed: u64) -> DomainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = [AntennaLayout::new(4, 1, 1), AntennaLayout::new(2, 2, 1), AntennaLayout::new(1, 2, 2)];
    let domains = layouts
        .iter()
        .enumerate()
        .map(|(i, &l)| SourceDomain::generator(i, Domain::new(l, 2.0), 2, 64, &mut rng).unwrap())
        .collect();
    DomainSet::new(domains, 2).unwrap()
}

fn init(cfg: NetConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn split_sixteen_domains_twelve_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (train, gen) = split_indices(16, 0.25, &mut rng).unwrap();
        assert_eq!((train.len(), gen.len()), (12, 4));
        let mut all: Vec<usize> = train.iter().chain(&gen).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn split_two_domains_and_rejects_one() {
    let ds = fixed_set(2, 3, 2);
    let (t, g) = split_domains(&ds, 0.25, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((t.len(), g.len()), (1, 1));
    assert_ne!(t.domains[0].id, g.domains[0].id);
    assert!(split_indices(1, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert_eq!(gen_count(4, 0.99), 3);
    assert_eq!(gen_count(10, 0.01), 1);
}

#[test]
fn split_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        let (_, gen) = split_indices(4, 0.25, &mut rng).unwrap();
        gen.iter().for_each(|&g| hits[g] += 1);
    }
    for h in hits {
        let f = h as f64 / n as f64;
        assert!((f - 0.25).abs() < 0.02, "{f}");
    }
}

#[test]
fn mldg_zero_meta_step_keeps_parameters() {
    let ds = generator_set(4);
    let p = init(tiny_net(0.25), 5);
    let h = MetaHyper { epsilon: 0.0, ..hyper(8) };
    let out = mldg_epoch(&p, &ds, &h, &link(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(out.params.values, p.values);
    assert_eq!(out.grad_evals, ds.len());
}

/// Mean gradient over `ids` replayed from the public primitives.
fn replay_mean_grad(p: &ModelParams, ds: &DomainSet, ids: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut acc = vec![0.0; p.values.len()];
    for &i in ids {
        let b = ds.domains[i].draw(batch, ds.n_users, rng).unwrap();
        let g = grad(p, &b, &link(), Mode::Train, rng).unwrap().gradient;
        acc.iter_mut().zip(&g.values).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= ids.len() as f64);
    acc
}

#[test]
fn mldg_without_meta_test_weight_is_averaged_step() {
    let ds = generator_set(7);
    let p = init(tiny_net(0.25), 8);
    let h = MetaHyper { beta: 0.0, ..hyper(8) };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let out = mldg_epoch(&p, &ds, &h, &link(), &mut rng.clone()).unwrap();
    let (train, _) = split_indices(ds.len(), h.gen_fraction, &mut rng).unwrap();
    let l = replay_mean_grad(&p, &ds, &train, 8, &mut rng);
    let want: Vec<f64> = p.values.iter().zip(&l).map(|(v, g)| v - h.epsilon * g).collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);
}

#[test]
fn mldg_matches_transcript_on_two_domains() {
    let ds = fixed_set(2, 12, 10);
    let p = init(tiny_net(0.25), 11);
    let h = hyper(6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let out = mldg_epoch(&p, &ds, &h, &link(), &mut rng.clone()).unwrap();

    // split
    let mut order = [0usize, 1];
    order.shuffle(&mut rng);
    let (train, gen) = (order[1], order[0]);
    // L at theta
    let b = ds.domains[train].draw(6, 2, &mut rng).unwrap();
    let l = grad(&p, &b, &link(), Mode::Train, &mut rng).unwrap();
    // theta' = theta - alpha L
    let mut theta2 = p.clone();
    for (v, g) in theta2.values.iter_mut().zip(&l.gradient.values) {
        *v -= h.alpha * g;
    }
    // L' at theta'
    let b2 = ds.domains[gen].draw(6, 2, &mut rng).unwrap();
    let l2 = grad(&theta2, &b2, &link(), Mode::Train, &mut rng).unwrap();
    // meta-update
    let want: Vec<f64> = (0..p.values.len())
        .map(|i| p.values[i] - h.epsilon * (l.gradient.values[i] + h.beta * l2.gradient.values[i]))
        .collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);

    let mut stats = p.clone();
    stats.update_running_stats(l.batch_stats.as_ref().unwrap(), BN_MOMENTUM);
    assert_eq!(out.params.running, stats.running);
    assert_eq!(out.losses.len(), 2);
    assert_eq!(out.losses[0].split, Split::Train);
    assert_eq!(out.losses[0].domain_id, Some(train));
}

#[test]
fn identical_domains_average_to_single_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = random_dataset(&mut rng, 6, "shared");
    let ds = DomainSet::new((0..4).map(|i| SourceDomain::fixed(i, data.clone()).unwrap()).collect(), 2).unwrap();
    let p = init(tiny_net(0.0), 14);
    let h = MetaHyper { beta: 0.0, ..hyper(6) };
    let out = mldg_epoch(&p, &ds, &h, &link(), &mut rng).unwrap();
    let single = grad(&p, &data.samples, &link(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let want: Vec<f64> = p.values.iter().zip(&single.gradient.values).map(|(v, g)| v - h.epsilon * g).collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);
}

#[test]
fn deep_all_single_domain_is_plain_sgd() {
    let ds = DomainSet::new(vec![generator_set(15).domains[1].clone()], 2).unwrap();
    let p = init(tiny_net(0.25), 16);
    let h = hyper(10);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let out = deep_all_epoch(&p, &ds, &h, &link(), &mut rng.clone()).unwrap();
    let owners = pooled_composition(1, 10, &mut rng);
    assert!(owners.iter().all(|&o| o == 0));
    let b = ds.domains[0].draw(10, 2, &mut rng).unwrap();
    let g = grad(&p, &b, &link(), Mode::Train, &mut rng).unwrap();
    let lr = h.epsilon * (1.0 + h.beta);
    let want: Vec<f64> = p.values.iter().zip(&g.gradient.values).map(|(v, d)| v - lr * d).collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);
    assert_eq!(out.grad_evals, 1);
}

#[test]
fn pooled_composition_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let k = 8;
    let n = 10_000;
    let mut counts = vec![0usize; k];
    pooled_composition(k, n, &mut rng).into_iter().for_each(|d| counts[d] += 1);
    let e = n as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 18.475, "{chi2}");
}

#[test]
fn deep_all_zero_rate_keeps_parameters() {
    let ds = generator_set(19);
    let p = init(tiny_net(0.25), 20);
    let h = MetaHyper { pooled_lr: Some(0.0), ..hyper(8) };
    let out = deep_all_epoch(&p, &ds, &h, &link(), &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    assert_eq!(out.params.values, p.values);
}

#[test]
fn fomaml_without_inner_step_averages_query_gradients() {
    let ds = generator_set(22);
    let p = init(tiny_net(0.25), 23);
    let h = hyper(8);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let out = fomaml_epoch(&p, &ds, 0.0, 0.03, &h, &link(), &mut rng.clone()).unwrap();
    let mut acc = vec![0.0; p.values.len()];
    for d in &ds.domains {
        let s = d.draw(8, 2, &mut rng).unwrap();
        grad(&p, &s, &link(), Mode::Train, &mut rng).unwrap();
        let q = d.draw(8, 2, &mut rng).unwrap();
        let g = grad(&p, &q, &link(), Mode::Train, &mut rng).unwrap();
        acc.iter_mut().zip(&g.gradient.values).for_each(|(a, v)| *a += v / 3.0);
    }
    let want: Vec<f64> = p.values.iter().zip(&acc).map(|(v, g)| v - 0.03 * g).collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);

    let frozen = fomaml_epoch(&p, &ds, 0.1, 0.0, &h, &link(), &mut ChaCha8Rng::seed_from_u64(25)).unwrap();
    assert_eq!(frozen.params.values, p.values);
}

#[test]
fn fomaml_matches_transcript_on_one_domain() {
    let ds = fixed_set(1, 20, 26);
    let p = init(tiny_net(0.25), 27);
    let h = hyper(7);
    let (inner, outer) = (0.07, 0.04);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let out = fomaml_epoch(&p, &ds, inner, outer, &h, &link(), &mut rng.clone()).unwrap();

    let support = ds.domains[0].draw(7, 2, &mut rng).unwrap();
    let g1 = grad(&p, &support, &link(), Mode::Train, &mut rng).unwrap().gradient;
    let adapted: Vec<f64> = p.values.iter().zip(&g1.values).map(|(v, g)| v - inner * g).collect();
    let adapted = ModelParams { values: adapted, ..p.clone() };
    let query = ds.domains[0].draw(7, 2, &mut rng).unwrap();
    let g2 = grad(&adapted, &query, &link(), Mode::Train, &mut rng).unwrap().gradient;
    let want: Vec<f64> = p.values.iter().zip(&g2.values).map(|(v, g)| v - outer * g).collect();
    assert!(max_abs_diff(&out.params.values, &want) < 1e-12);
}

#[test]
fn fixed_source_whole_dataset_is_rng_independent() {
    let ds = fixed_set(1, 5, 29);
    let a = ds.domains[0].draw(5, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = ds.domains[0].draw(9, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    let SampleSource::Fixed(d) = &ds.domains[0].source else { unreachable!() };
    assert_eq!(a, d.samples);
    assert!(ds.domains[0].draw(2, 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn generator_scale_normalizes_the_calibration_batch() {
    let domain = Domain::new(AntennaLayout::new(2, 2, 1), 2.0);
    let d = SourceDomain::generator(0, domain.clone(), 2, 500, &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
    let again = sample_domain_batch(&domain, 500, 2, &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
    let p = mean_column_power(&again.scaled(d.scale));
    assert!((p - 1.0).abs() < 1e-12, "{p}");
}

fn setup(method: Method, epochs: usize) -> TrainSetup {
    TrainSetup {
        method,
        net: tiny_net(0.25),
        hyper: MetaHyper { epochs, updates_per_epoch: 2, ..hyper(8) },
        link: link(),
        val_size: 16,
        seed: 33,
    }
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let ds = generator_set(32);
    let want = ModelParams::init(tiny_net(0.25), &mut stream_rng(33, streams::INIT)).unwrap();
    for m in [Method::Mldg, Method::DeepAll, Method::Fomaml, Method::RandomInit] {
        let (p, hist) = train_backbone(&setup(m, 0), &ds, |_| {}).unwrap();
        assert_eq!(p, want);
        assert!(hist.is_empty());
    }
    let (p, hist) = train_backbone(&setup(Method::RandomInit, 5), &ds, |_| {}).unwrap();
    assert_eq!(p, want);
    assert!(hist.is_empty());
}

#[test]
fn history_has_one_record_per_epoch_and_is_deterministic() {
    let ds = generator_set(34);
    for m in [Method::Mldg, Method::DeepAll, Method::Fomaml] {
        let mut seen = 0;
        let (p, hist) = train_backbone(&setup(m, 3), &ds, |_| seen += 1).unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(seen, 3);
        assert_eq!(hist.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(hist.iter().all(|r| r.val_sum_rate.len() == ds.len()));
        let (p2, hist2) = train_backbone(&setup(m, 3), &ds, |_| {}).unwrap();
        assert_eq!(p, p2);
        assert_eq!(hist, hist2);
    }
}

#[test]
fn hyper_validation() {
    assert!(MetaHyper::default().validate().is_ok());
    assert!(MetaHyper { gen_fraction: 1.0, ..MetaHyper::default() }.validate().is_err());
    assert!(MetaHyper { beta: -1.0, ..MetaHyper::default() }.validate().is_err());
    assert!(MetaHyper { alpha: 0.0, ..MetaHyper::default() }.validate().is_err());
    assert_eq!(MetaHyper::default().deep_all_lr(), 2e-5);
    assert_eq!(Method::parse("deepall"), Some(Method::DeepAll));
    assert_eq!(Method::parse("maml"), None);
}
