//! Backbone training over a set of source domains: MLDG meta-updates and the
//! Deep-All and first-order MAML baselines.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

use crate::beamforming::LinkConfig;
use crate::channel::{mean_column_power, sample_domain_batch, ChannelMatrix, Dataset, Domain};
use crate::error::{Error, Result};
use crate::model::{apply_update, grad, mean_sum_rate, Gradient, Mode, ModelParams, NetConfig, BN_MOMENTUM};

/// Step sizes, batch sizes and schedule of backbone training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaHyper {
    /// Inner (meta-train) learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub epsilon: f64,
    /// Weight of the meta-test gradient.
    pub beta: f64,
    /// Samples per domain batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of domains held out as meta-test domains on every update.
    pub gen_fraction: f64,
    /// Parameter updates per reported epoch.
    pub updates_per_epoch: usize,
    /// Deep-All learning rate; `epsilon * (1 + beta)` when unset.
    pub pooled_lr: Option<f64>,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            epsilon: 1e-5,
            beta: 1.0,
            batch_size: 1000,
            epochs: 30,
            gen_fraction: 0.25,
            updates_per_epoch: 1,
            pooled_lr: None,
        }
    }
}

impl MetaHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("alpha and epsilon must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("beta must be non-negative"));
        }
        if !(self.gen_fraction > 0.0 && self.gen_fraction < 1.0) {
            return Err(Error::InvalidConfig("gen_fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.updates_per_epoch == 0 {
            return Err(Error::InvalidConfig("batch_size and updates_per_epoch must be positive"));
        }
        if matches!(self.pooled_lr, Some(lr) if !(lr >= 0.0)) {
            return Err(Error::InvalidConfig("pooled_lr must be non-negative"));
        }
        Ok(())
    }

    /// Step size of the pooled baseline; matches the aggregate MLDG step.
    pub fn deep_all_lr(&self) -> f64 {
        self.pooled_lr.unwrap_or(self.epsilon * (1.0 + self.beta))
    }

    /// Outer step size of first-order MAML.
    pub fn fomaml_outer_lr(&self) -> f64 {
        self.epsilon * (1.0 + self.beta)
    }
}

/// Where a domain's training batches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// Fresh samples from the statistical model on every draw.
    Generator(Domain),
    /// Subsets of a stored dataset.
    Fixed(Dataset),
}

/// One source domain together with the factor that brings its channels to
/// unit mean column power.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    pub id: usize,
    pub label: String,
    pub source: SampleSource,
    pub scale: f64,
}

impl SourceDomain {
    /// Generator-backed domain; the scale is estimated once from
    /// `calibration` samples drawn from `rng`.
    pub fn generator<R: Rng + ?Sized>(
        id: usize,
        domain: Domain,
        n_users: usize,
        calibration: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let probe = sample_domain_batch(&domain, calibration, n_users, rng)?;
        let scale = unit_power_scale(&probe)?;
        Ok(Self { id, label: domain.label(), source: SampleSource::Generator(domain), scale })
    }

    /// Dataset-backed domain; the dataset is used exactly as stored.
    pub fn fixed(id: usize, dataset: Dataset) -> Result<Self> {
        dataset.dims()?;
        Ok(Self { id, label: dataset.label.clone(), source: SampleSource::Fixed(dataset), scale: 1.0 })
    }

    /// `count` scaled samples. Stored datasets yield a uniformly random subset
    /// of `min(count, len)` samples in storage order, so a request for the
    /// whole dataset is the dataset itself.
    pub fn draw<R: Rng + ?Sized>(&self, count: usize, n_users: usize, rng: &mut R) -> Result<Vec<ChannelMatrix>> {
        match &self.source {
            SampleSource::Generator(domain) => {
                let d = sample_domain_batch(domain, count, n_users, rng)?;
                Ok(d.scaled(self.scale).samples)
            }
            SampleSource::Fixed(d) => {
                let (_, n_u) = d.dims()?;
                if n_u != n_users {
                    return Err(Error::ShapeMismatch { expected: n_users, found: n_u });
                }
                let take = count.min(d.len());
                let mut picked = index::sample(rng, d.len(), take).into_vec();
                picked.sort_unstable();
                Ok(picked.into_iter().map(|i| d.samples[i].clone()).collect())
            }
        }
    }
}

/// `1 / sqrt(mean column power)` of a calibration batch.
pub fn unit_power_scale(d: &Dataset) -> Result<f64> {
    let p = mean_column_power(d);
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::ZeroDataset);
    }
    Ok(1.0 / p.sqrt())
}

/// Ordered collection of source domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub domains: Vec<SourceDomain>,
    pub n_users: usize,
}

impl DomainSet {
    pub fn new(domains: Vec<SourceDomain>, n_users: usize) -> Result<Self> {
        if domains.is_empty() || n_users == 0 {
            return Err(Error::Empty("domain set"));
        }
        Ok(Self { domains, n_users })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self { domains: idx.iter().map(|&i| self.domains[i].clone()).collect(), n_users: self.n_users }
    }
}

/// Number of held-out domains: `max(1, round(gen_fraction * n))`, never all.
pub fn gen_count(n: usize, gen_fraction: f64) -> usize {
    let k = ((gen_fraction * n as f64).round() as usize).max(1);
    k.min(n - 1)
}

/// Uniform random split of `0..n` into `(train, gen)` index lists, each in
/// ascending order.
pub fn split_indices<R: Rng + ?Sized>(n: usize, gen_fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidConfig("splitting needs at least two domains"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let k = gen_count(n, gen_fraction);
    let mut gen = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    gen.sort_unstable();
    train.sort_unstable();
    Ok((train, gen))
}

/// Splits into meta-train and meta-test domains.
pub fn split_domains<R: Rng + ?Sized>(
    ds: &DomainSet,
    gen_fraction: f64,
    rng: &mut R,
) -> Result<(DomainSet, DomainSet)> {
    let (train, gen) = split_indices(ds.len(), gen_fraction, rng)?;
    Ok((ds.subset(&train), ds.subset(&gen)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Gen,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gen => "gen",
            Split::Val => "val",
        }
    }
}

/// Loss observed on one domain (or on the pooled batch when `domain_id` is
/// `None`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainLoss {
    pub domain_id: Option<usize>,
    pub split: Split,
    pub loss: f64,
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub params: ModelParams,
    pub losses: Vec<DomainLoss>,
    /// Gradient evaluations spent.
    pub grad_evals: usize,
}

fn check_ds(cfg: &NetConfig, ds: &DomainSet) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty("domain set"));
    }
    if ds.n_users != cfg.n_u {
        return Err(Error::ShapeMismatch { expected: cfg.n_u, found: ds.n_users });
    }
    Ok(())
}

/// Mean Train-mode gradient over `ids`, one fresh batch per domain, drawn and
/// differentiated in list order. Returns the mean gradient and per-domain
/// losses; batch statistics are folded into `stats_into` when given.
#[allow(clippy::too_many_arguments)]
fn mean_domain_grad<R: Rng + ?Sized>(
    params: &ModelParams,
    ds: &DomainSet,
    ids: &[usize],
    split: Split,
    batch_size: usize,
    link: &LinkConfig,
    rng: &mut R,
    mut stats_into: Option<&mut ModelParams>,
    losses: &mut Vec<DomainLoss>,
) -> Result<Gradient> {
    let mut total = Gradient::zeros_like(params);
    for &i in ids {
        let dom = &ds.domains[i];
        let batch = dom.draw(batch_size, ds.n_users, rng)?;
        let out = grad(params, &batch, link, Mode::Train, rng)?;
        total.add_scaled(&out.gradient, 1.0);
        if let (Some(target), Some(stats)) = (stats_into.as_deref_mut(), &out.batch_stats) {
            target.update_running_stats(stats, BN_MOMENTUM);
        }
        losses.push(DomainLoss { domain_id: Some(dom.id), split, loss: out.loss });
    }
    total.scale(1.0 / ids.len() as f64);
    Ok(total)
}

/// One MLDG meta-update:
/// split; `L` = mean meta-train gradient at `params`; `params' = params - alpha L`;
/// `L'` = mean meta-test gradient at `params'`; returns
/// `params - epsilon (L + beta L')`. Running statistics follow the
/// meta-train batches only.
pub fn mldg_epoch<R: Rng + ?Sized>(
    params: &ModelParams,
    ds: &DomainSet,
    hyper: &MetaHyper,
    link: &LinkConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    check_ds(&params.config, ds)?;
    let (train, gen) = split_indices(ds.len(), hyper.gen_fraction, rng)?;
    let mut losses = Vec::with_capacity(ds.len());
    let mut stats = params.clone();
    let l =
        mean_domain_grad(params, ds, &train, Split::Train, hyper.batch_size, link, rng, Some(&mut stats), &mut losses)?;
    let lookahead = apply_update(params, &l, hyper.alpha)?;
    let l_gen = mean_domain_grad(&lookahead, ds, &gen, Split::Gen, hyper.batch_size, link, rng, None, &mut losses)?;
    let mut step = l;
    step.add_scaled(&l_gen, hyper.beta);
    let mut next = apply_update(params, &step, hyper.epsilon)?;
    next.running = stats.running;
    Ok(StepOutcome { params: next, losses, grad_evals: train.len() + gen.len() })
}

/// Domain index of every sample in a pooled batch of `count`, uniform over
/// domains.
pub fn pooled_composition<R: Rng + ?Sized>(n_domains: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n_domains)).collect()
}

/// One SGD step on a batch pooled uniformly across all domains, with step
/// size [`MetaHyper::deep_all_lr`].
pub fn deep_all_epoch<R: Rng + ?Sized>(
    params: &ModelParams,
    ds: &DomainSet,
    hyper: &MetaHyper,
    link: &LinkConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    check_ds(&params.config, ds)?;
    let owner = pooled_composition(ds.len(), hyper.batch_size, rng);
    let mut counts = alloc::vec![0usize; ds.len()];
    owner.iter().for_each(|&d| counts[d] += 1);
    let mut batch = Vec::with_capacity(hyper.batch_size);
    for (dom, &c) in ds.domains.iter().zip(&counts) {
        if c > 0 {
            batch.extend(dom.draw(c, ds.n_users, rng)?);
        }
    }
    let out = grad(params, &batch, link, Mode::Train, rng)?;
    let mut next = apply_update(params, &out.gradient, hyper.deep_all_lr())?;
    if let Some(stats) = &out.batch_stats {
        next.update_running_stats(stats, BN_MOMENTUM);
    }
    Ok(StepOutcome {
        params: next,
        losses: alloc::vec![DomainLoss { domain_id: None, split: Split::Train, loss: out.loss }],
        grad_evals: 1,
    })
}

/// First-order MAML: per domain, one inner step of `inner_lr` on a support
/// batch, then the gradient at the adapted parameters on a query batch;
/// returns `params - outer_lr * mean(query gradients)`. Running statistics
/// follow the support batches.
pub fn fomaml_epoch<R: Rng + ?Sized>(
    params: &ModelParams,
    ds: &DomainSet,
    inner_lr: f64,
    outer_lr: f64,
    hyper: &MetaHyper,
    link: &LinkConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    check_ds(&params.config, ds)?;
    let mut total = Gradient::zeros_like(params);
    let mut losses = Vec::with_capacity(2 * ds.len());
    let mut stats = params.clone();
    for dom in &ds.domains {
        let support = dom.draw(hyper.batch_size, ds.n_users, rng)?;
        let inner = grad(params, &support, link, Mode::Train, rng)?;
        if let Some(s) = &inner.batch_stats {
            stats.update_running_stats(s, BN_MOMENTUM);
        }
        let adapted = apply_update(params, &inner.gradient, inner_lr)?;
        let query = dom.draw(hyper.batch_size, ds.n_users, rng)?;
        let outer = grad(&adapted, &query, link, Mode::Train, rng)?;
        total.add_scaled(&outer.gradient, 1.0);
        losses.push(DomainLoss { domain_id: Some(dom.id), split: Split::Train, loss: inner.loss });
        losses.push(DomainLoss { domain_id: Some(dom.id), split: Split::Gen, loss: outer.loss });
    }
    total.scale(1.0 / ds.len() as f64);
    let mut next = apply_update(params, &total, outer_lr)?;
    next.running = stats.running;
    Ok(StepOutcome { params: next, losses, grad_evals: 2 * ds.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Mldg,
    DeepAll,
    Fomaml,
    RandomInit,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mldg => "mldg",
            Method::DeepAll => "deepall",
            Method::Fomaml => "fomaml",
            Method::RandomInit => "randinit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mldg" => Some(Method::Mldg),
            "deepall" => Some(Method::DeepAll),
            "fomaml" => Some(Method::Fomaml),
            "randinit" => Some(Method::RandomInit),
            _ => None,
        }
    }
}

/// Everything `train_backbone` needs besides the domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSetup {
    pub method: Method,
    pub net: NetConfig,
    pub hyper: MetaHyper,
    pub link: LinkConfig,
    /// Size of the fixed per-domain validation batch.
    pub val_size: usize,
    pub seed: u64,
}

/// Losses of every update in one epoch plus the validation sum-rate per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Every training loss of the epoch, in update order.
    pub losses: Vec<DomainLoss>,
    /// Eval-mode mean sum-rate on each domain's validation batch, in domain order.
    pub val_sum_rate: Vec<(usize, f64)>,
}

impl EpochRecord {
    pub fn mean_val_sum_rate(&self) -> f64 {
        self.val_sum_rate.iter().map(|(_, r)| r).sum::<f64>() / self.val_sum_rate.len().max(1) as f64
    }
}

/// Independent generator streams derived from one master seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const VALIDATION: u64 = 1;
    pub const TRAINING: u64 = 2;
}

/// Generator for stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initializes from the master seed and runs `hyper.epochs` epochs of the
/// chosen method, reporting each epoch to `observe` as it completes.
/// `RandomInit` runs no epochs.
pub fn train_backbone(
    setup: &TrainSetup,
    ds: &DomainSet,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    setup.hyper.validate()?;
    setup.link.validate()?;
    check_ds(&setup.net, ds)?;
    if setup.val_size == 0 {
        return Err(Error::InvalidConfig("val_size must be positive"));
    }
    if setup.method == Method::Mldg && ds.len() < 2 {
        return Err(Error::InvalidConfig("MLDG needs at least two domains"));
    }
    let mut params = ModelParams::init(setup.net, &mut stream_rng(setup.seed, streams::INIT))?;
    let epochs = if setup.method == Method::RandomInit { 0 } else { setup.hyper.epochs };
    if epochs == 0 {
        return Ok((params, Vec::new()));
    }

    let mut val_rng = stream_rng(setup.seed, streams::VALIDATION);
    let val: Vec<Vec<ChannelMatrix>> =
        ds.domains.iter().map(|d| d.draw(setup.val_size, ds.n_users, &mut val_rng)).collect::<Result<_>>()?;

    let mut rng = stream_rng(setup.seed, streams::TRAINING);
    let h = &setup.hyper;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut losses = Vec::new();
        for _ in 0..h.updates_per_epoch {
            let out = match setup.method {
                Method::Mldg => mldg_epoch(&params, ds, h, &setup.link, &mut rng)?,
                Method::DeepAll => deep_all_epoch(&params, ds, h, &setup.link, &mut rng)?,
                Method::Fomaml => fomaml_epoch(&params, ds, h.alpha, h.fomaml_outer_lr(), h, &setup.link, &mut rng)?,
                Method::RandomInit => unreachable!("random init runs no epochs"),
            };
            params = out.params;
            losses.extend(out.losses);
        }
        let val_sum_rate = ds
            .domains
            .iter()
            .zip(&val)
            .map(|(d, b)| Ok((d.id, mean_sum_rate(&params, b, &setup.link, 1024)?)))
            .collect::<Result<_>>()?;
        let record = EpochRecord { epoch, losses, val_sum_rate };
        observe(&record);
        history.push(record);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests;
