//! The experiments behind every subcommand, as functions returning plain
//! row structs. Nothing here touches the output directory.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use sage_hbf_core::adapt::{finetune, FinetuneConfig, FinetuneHistory};
use sage_hbf_core::baselines::{oracle_ascent, pe_altmin, zf_fdp};
use sage_hbf_core::beamforming::{precoder_sum_rate, sum_rate, LinkConfig};
use sage_hbf_core::channel::{sample_domain_batch, sample_target_batch, ChannelMatrix, Dataset};
use sage_hbf_core::metatrain::{
    stream_rng, train_backbone, unit_power_scale, DomainSet, EpochRecord, Method, SourceDomain, Split, TrainSetup,
};
use sage_hbf_core::model::{gradient_check, mean_sum_rate, GradCheckReport, Mode, ModelParams};

use crate::config::ExperimentConfig;
use crate::error::{Result, RunError};
use crate::io;

/// Generator streams of the runner. Streams 0-2 of every master seed belong
/// to backbone training.
pub mod streams {
    pub const FINETUNE: u64 = 3;
    pub const TARGET_TRAIN: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    /// Streams of the data seed.
    pub const CALIBRATION: u64 = 16;
    pub const TARGET_VALIDATION: u64 = 17;
    pub const XCONFIG_EVAL: u64 = 18;
    /// Source domain `id` is written by `gen-data` from stream `GEN_SOURCE + id`.
    pub const GEN_SOURCE: u64 = 32;
    /// Sample `i` of the baseline run uses stream `BASELINE + i`.
    pub const BASELINE: u64 = 1 << 32;
}

/// Chunk size of Eval-mode sum-rate evaluation.
const EVAL_CHUNK: usize = 1024;

/// The source domain set: stored datasets when configured, otherwise one
/// generator per `(layout, gamma)` pair, layout-major.
pub fn source_domains(cfg: &ExperimentConfig) -> Result<DomainSet> {
    let n_u = cfg.system.n_u;
    let mut domains = Vec::new();
    if !cfg.domains.files.is_empty() {
        for (id, f) in cfg.domains.files.iter().enumerate() {
            let d = io::read_dataset_with_dims(&cfg.resolve(f), cfg.system.n_t, n_u)?;
            domains.push(SourceDomain::fixed(id, d)?);
        }
    } else {
        domains = layout_domains(cfg, &cfg.domains.layouts)?.domains;
    }
    Ok(DomainSet::new(domains, n_u)?)
}

/// Generator domains for the given arrays crossed with the configured
/// path-loss exponents.
pub fn layout_domains(cfg: &ExperimentConfig, layouts: &[[usize; 3]]) -> Result<DomainSet> {
    let mut cal = stream_rng(cfg.data_seed, streams::CALIBRATION);
    let mut domains = Vec::new();
    for l in layouts {
        for &g in &cfg.domains.gammas {
            let id = domains.len();
            let d = SourceDomain::generator(
                id,
                cfg.source_domain(*l, g),
                cfg.system.n_u,
                cfg.domains.calibration_samples,
                &mut cal,
            )?;
            domains.push(d);
        }
    }
    Ok(DomainSet::new(domains, cfg.system.n_u)?)
}

/// Held-out deployment samples at unit mean column power.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub label: String,
    pub validation: Vec<ChannelMatrix>,
    /// Factor applied to the raw validation channels; reused for the
    /// fine-tuning samples of the same site.
    pub scale: f64,
}

/// The validation set of the surrogate target with the given array. Every
/// array sees the same user drop, so arrays are compared on equal terms.
pub fn target_set(cfg: &ExperimentConfig, layout: [usize; 3]) -> Result<TargetSet> {
    if let (Some(f), true) = (&cfg.target.validation_file, layout == cfg.target.layout) {
        let d = io::read_dataset_with_dims(&cfg.resolve(f), cfg.system.n_t, cfg.system.n_u)?;
        return Ok(TargetSet { label: d.label, validation: d.samples, scale: d.scale });
    }
    let params = cfg.target_params(layout);
    let mut rng = stream_rng(cfg.data_seed, streams::TARGET_VALIDATION);
    let raw = sample_target_batch(&params, cfg.target.validation_samples, cfg.system.n_u, &mut rng)?;
    let scale = unit_power_scale(&raw)?;
    let d = raw.scaled(scale);
    Ok(TargetSet { label: d.label, validation: d.samples, scale })
}

/// `n` deployment samples for fine-tuning under master seed `seed`. Smaller
/// requests are prefixes of larger ones.
pub fn target_train(cfg: &ExperimentConfig, target: &TargetSet, seed: u64, n: usize) -> Result<Dataset> {
    let mut rng = stream_rng(seed, streams::TARGET_TRAIN);
    if let Some(f) = &cfg.target.train_file {
        let d = io::read_dataset_with_dims(&cfg.resolve(f), cfg.system.n_t, cfg.system.n_u)?;
        let take = n.min(d.len());
        let mut picked = index::sample(&mut rng, d.len(), take).into_vec();
        picked.sort_unstable();
        let samples = picked.into_iter().map(|i| d.samples[i].clone()).collect();
        return Ok(Dataset { samples, label: d.label, scale: d.scale });
    }
    let raw = sample_target_batch(&cfg.target_params(cfg.target.layout), n, cfg.system.n_u, &mut rng)?;
    Ok(raw.scaled(target.scale))
}

pub fn link(cfg: &ExperimentConfig) -> Result<LinkConfig> {
    Ok(cfg.link()?)
}

pub fn train_setup(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<TrainSetup> {
    Ok(TrainSetup {
        method,
        net: cfg.net_config(),
        hyper: cfg.meta_hyper(),
        link: link(cfg)?,
        val_size: cfg.train.val_size,
        seed,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub method: &'static str,
    pub domain_id: Option<usize>,
    pub split: &'static str,
    pub mean_sum_rate: f64,
    pub loss: Option<f64>,
    pub wall_ms: u64,
}

/// Rows of one epoch: training losses in update order (their sum-rate is
/// the negated Train-mode loss), then Eval-mode validation per domain.
pub fn history_rows(method: Method, rec: &EpochRecord, wall_ms: u64) -> Vec<HistoryRow> {
    let mut rows: Vec<HistoryRow> = rec
        .losses
        .iter()
        .map(|l| HistoryRow {
            epoch: rec.epoch,
            method: method.as_str(),
            domain_id: l.domain_id,
            split: l.split.as_str(),
            mean_sum_rate: -l.loss,
            loss: Some(l.loss),
            wall_ms,
        })
        .collect();
    rows.extend(rec.val_sum_rate.iter().map(|&(id, r)| HistoryRow {
        epoch: rec.epoch,
        method: method.as_str(),
        domain_id: Some(id),
        split: Split::Val.as_str(),
        mean_sum_rate: r,
        loss: None,
        wall_ms,
    }));
    rows
}

pub struct TrainedBackbone {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
}

/// Trains a backbone on `ds`. Wall times are recorded only on request.
pub fn train(cfg: &ExperimentConfig, ds: &DomainSet, method: Method, seed: u64) -> Result<TrainedBackbone> {
    let setup = train_setup(cfg, method, seed)?;
    let start = Instant::now();
    let mut history = Vec::new();
    let (params, _) = train_backbone(&setup, ds, |rec| {
        let wall = if cfg.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        history.extend(history_rows(method, rec, wall));
    })?;
    Ok(TrainedBackbone { params, history })
}

/// The configured backbone file for `(method, seed)`, or a freshly trained
/// backbone on the source domains.
pub fn backbone(cfg: &ExperimentConfig, ds: &DomainSet, method: Method, seed: u64) -> Result<ModelParams> {
    match &cfg.finetune.backbone {
        Some(template) => {
            let path = template.replace("{seed}", &seed.to_string()).replace("{method}", method.as_str());
            Ok(io::load_params(&cfg.resolve(path.as_ref()), Some(&cfg.net_config()))?)
        }
        None => Ok(train(cfg, ds, method, seed)?.params),
    }
}

pub fn zero_shot(params: &ModelParams, target: &TargetSet, link: &LinkConfig) -> Result<f64> {
    Ok(mean_sum_rate(params, &target.validation, link, EVAL_CHUNK)?)
}

/// One row of a fine-tuning curve; epoch 0 is the zero-shot point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub zero_shot_flag: u8,
    pub val_sum_rate: f64,
    pub loss: Option<f64>,
    pub n_real_samples: usize,
    pub m: usize,
}

pub fn finetune_rows(h: &FinetuneHistory, n_real: usize, m: usize) -> Vec<FinetuneRow> {
    let first =
        FinetuneRow { epoch: 0, zero_shot_flag: 1, val_sum_rate: h.zero_shot, loss: None, n_real_samples: n_real, m };
    std::iter::once(first)
        .chain(h.epochs.iter().map(|r| FinetuneRow {
            epoch: r.epoch,
            zero_shot_flag: 0,
            val_sum_rate: r.val_sum_rate,
            loss: Some(r.loss),
            n_real_samples: n_real,
            m,
        }))
        .collect()
}

/// Fine-tunes `backbone` on `n_real` target samples; `aug_m = 0` trains on
/// the real samples directly.
pub fn adapt(
    cfg: &ExperimentConfig,
    backbone: &ModelParams,
    target: &TargetSet,
    seed: u64,
    n_real: usize,
    aug_m: usize,
) -> Result<(ModelParams, FinetuneHistory)> {
    let data = target_train(cfg, target, seed, n_real)?;
    let ft = FinetuneConfig { aug_m, ..cfg.finetune_config() };
    let mut rng = stream_rng(seed, streams::FINETUNE);
    Ok(finetune(backbone, &data, &target.validation, &ft, &link(cfg)?, &mut rng)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotRow {
    pub method: &'static str,
    pub target: String,
    pub neg_log10_sigma2: f64,
    pub sum_rate: f64,
}

/// Zero-shot sum-rate of one backbone over every deployment array and noise
/// level of the `eval` block.
pub fn zero_shot_sweep(cfg: &ExperimentConfig, params: &ModelParams, method: Method) -> Result<Vec<ZeroShotRow>> {
    let mut rows = Vec::new();
    for &layout in &cfg.eval.target_layouts {
        let target = target_set(cfg, layout)?;
        for &nl in &cfg.eval.neg_log10_sigma2_grid {
            let link = LinkConfig::from_neg_log10(nl, cfg.system.p_max)?;
            rows.push(ZeroShotRow {
                method: method.as_str(),
                target: cfg.layout(layout).label(),
                neg_log10_sigma2: nl,
                sum_rate: zero_shot(params, &target, &link)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XConfigRow {
    pub train_layout: String,
    pub deploy_layout: String,
    pub sum_rate: f64,
}

/// LOS evaluation samples of one array: `eval_samples` per path-loss
/// exponent, each batch brought to unit mean column power.
pub fn los_eval_set(cfg: &ExperimentConfig, layout: [usize; 3]) -> Result<Vec<ChannelMatrix>> {
    let mut rng = stream_rng(cfg.data_seed, streams::XCONFIG_EVAL);
    let mut out = Vec::new();
    for &g in &cfg.domains.gammas {
        let d = sample_domain_batch(&cfg.source_domain(layout, g), cfg.xconfig.eval_samples, cfg.system.n_u, &mut rng)?;
        let s = unit_power_scale(&d)?;
        out.extend(d.scaled(s).samples);
    }
    Ok(out)
}

/// Backbones trained on a single array each, evaluated zero-shot on every
/// array of the `xconfig` block. Row-major over (train, deploy).
pub fn xconfig_table(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<XConfigRow>> {
    let method = crate::config::parse_method(&cfg.xconfig.method, "xconfig.method")?;
    let link = link(cfg)?;
    let evals: Vec<Vec<ChannelMatrix>> =
        cfg.xconfig.layouts.iter().map(|&l| los_eval_set(cfg, l)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &train_layout in &cfg.xconfig.layouts {
        let ds = layout_domains(cfg, &[train_layout])?;
        let params = train(cfg, &ds, method, seed)?.params;
        for (&deploy, eval) in cfg.xconfig.layouts.iter().zip(&evals) {
            rows.push(XConfigRow {
                train_layout: cfg.layout(train_layout).label(),
                deploy_layout: cfg.layout(deploy).label(),
                sum_rate: mean_sum_rate(&params, eval, &link, EVAL_CHUNK)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_real_samples: usize,
    pub augmented: u8,
    pub m: usize,
    pub zero_shot: f64,
    pub final_sum_rate: f64,
}

/// Final fine-tuned sum-rate against the number of real samples, with and
/// without augmentation.
pub fn sweep_samples(
    cfg: &ExperimentConfig,
    backbone: &ModelParams,
    target: &TargetSet,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.sweep.n_real_samples {
        for &aug in &cfg.sweep.augment {
            let m = if aug { cfg.finetune.aug_m } else { 0 };
            let (_, h) = adapt(cfg, backbone, target, seed, n, m)?;
            rows.push(SweepRow {
                n_real_samples: n,
                augmented: u8::from(aug),
                m,
                zero_shot: h.zero_shot,
                final_sum_rate: *h.curve().last().expect("curve holds the zero-shot point"),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRow {
    pub sample_id: usize,
    pub method: &'static str,
    pub sum_rate: f64,
    pub iters: usize,
    pub residual: Option<f64>,
}

/// The samples the baselines are run on.
pub fn baseline_samples(cfg: &ExperimentConfig) -> Result<Vec<ChannelMatrix>> {
    let mut samples = match &cfg.baseline.dataset {
        Some(f) => io::read_dataset_with_dims(&cfg.resolve(f), cfg.system.n_t, cfg.system.n_u)?.samples,
        None => target_set(cfg, cfg.target.layout)?.validation,
    };
    samples.truncate(cfg.baseline.samples);
    Ok(samples)
}

/// Zero-forcing FDP, its PE-AltMin factorization, and the ascent oracle on
/// every sample. Samples are independent and run in parallel; each draws
/// from its own stream of `seed`.
pub fn baselines(cfg: &ExperimentConfig, samples: &[ChannelMatrix], seed: u64) -> Result<Vec<BaselineRow>> {
    let link = link(cfg)?;
    let n_rf = cfg.system.n_rf;
    let (am, oc) = (cfg.altmin_config(), cfg.oracle_config());
    let per_sample: Vec<Result<Vec<BaselineRow>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut rng = stream_rng(seed, streams::BASELINE + i as u64);
            let fdp = zf_fdp(h, link.p_max)?;
            let fdp_rate = precoder_sum_rate(h, &fdp.matrix, &link);
            let am_res = pe_altmin(&fdp, n_rf, &am, &mut rng)?;
            let or = oracle_ascent(h, n_rf, &link, &oc, &mut rng)?;
            Ok(vec![
                BaselineRow { sample_id: i, method: "zf-fdp", sum_rate: fdp_rate, iters: 0, residual: None },
                BaselineRow {
                    sample_id: i,
                    method: "pe-altmin-zf",
                    sum_rate: sum_rate(h, &am_res.precoder, &link),
                    iters: am_res.iterations(),
                    residual: Some(am_res.residual()),
                },
                BaselineRow {
                    sample_id: i,
                    method: "oracle",
                    sum_rate: or.sum_rate,
                    iters: or.iterations,
                    residual: None,
                },
            ])
        })
        .collect();
    let mut rows = Vec::with_capacity(3 * samples.len());
    for r in per_sample {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Finite-difference audit of the configured network at its seed-`seed`
/// initialization, on a normalized batch from the first source array.
pub fn gradcheck(cfg: &ExperimentConfig, seed: u64) -> Result<GradCheckReport> {
    let net = cfg.net_config();
    let params = ModelParams::init(net, &mut stream_rng(seed, sage_hbf_core::metatrain::streams::INIT))?;
    let mut rng = stream_rng(seed, streams::GRADCHECK);
    let layout = cfg.domains.layouts.first().copied().unwrap_or(cfg.target.layout);
    let gamma = cfg.domains.gammas.first().copied().unwrap_or(cfg.target.gamma);
    let raw = sample_domain_batch(&cfg.source_domain(layout, gamma), cfg.gradcheck.batch, cfg.system.n_u, &mut rng)?;
    let batch = sage_hbf_core::channel::normalize_dataset(raw)?.samples;
    let mode = if cfg.gradcheck.train_mode { Mode::Train } else { Mode::Eval };
    let g = &cfg.gradcheck;
    Ok(gradient_check(&params, &batch, &link(cfg)?, mode, seed, g.step, g.tolerance)?)
}

/// Parses a method name from configuration.
pub fn method(name: &str) -> Result<Method> {
    Method::parse(name).ok_or_else(|| RunError::Usage(format!("unknown method {name:?}")))
}
