//! Fine-tuning at a deployed base station: flattening target CSI into
//! single-user columns, rebuilding multi-user samples by resampling those
//! columns, and unsupervised SGD on the rebuilt set.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::beamforming::LinkConfig;
use crate::channel::{ChannelMatrix, Dataset};
use crate::error::{Error, Result};
use crate::model::{apply_update, grad, mean_sum_rate, Mode, ModelParams, BN_MOMENTUM};

/// Every user column of a dataset, sample-major then user-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedCsi {
    /// `N_T x (N_U * |D|)`.
    pub columns: DMatrix<Complex64>,
    /// `(sample, user)` that each column came from.
    pub provenance: Vec<(usize, usize)>,
}

impl FlattenedCsi {
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }
}

pub fn flatten_dataset(d: &Dataset) -> Result<FlattenedCsi> {
    let (n_t, n_u) = d.dims()?;
    let mut columns = DMatrix::zeros(n_t, n_u * d.len());
    let mut provenance = Vec::with_capacity(n_u * d.len());
    for (s, h) in d.samples.iter().enumerate() {
        for u in 0..n_u {
            columns.set_column(s * n_u + u, &h.column(u));
            provenance.push((s, u));
        }
    }
    Ok(FlattenedCsi { columns, provenance })
}

/// `C(n, k)`, or `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication.
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Rebuilt multi-user samples, stored as column indices into the source.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub source: FlattenedCsi,
    pub n_users: usize,
    /// `m * n_users` indices, sample-major.
    pub indices: Vec<usize>,
}

impl AugmentedDataset {
    pub fn m(&self) -> usize {
        self.indices.len() / self.n_users
    }

    /// Number of distinct user subsets, `C(|F|, N_U)`; informational only.
    pub fn combinatorial_ceiling(&self) -> Option<u128> {
        binomial(self.source.len() as u64, self.n_users as u64)
    }

    pub fn sample_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.n_users..(i + 1) * self.n_users]
    }

    /// Assembles sample `i`.
    pub fn sample(&self, i: usize) -> ChannelMatrix {
        let idx = self.sample_indices(i);
        DMatrix::from_fn(self.source.columns.nrows(), self.n_users, |t, u| self.source.columns[(t, idx[u])])
    }

    pub fn batch(&self, ids: &[usize]) -> Vec<ChannelMatrix> {
        ids.iter().map(|&i| self.sample(i)).collect()
    }
}

/// Draws `m` samples of `n_users` columns each, uniformly over the columns
/// of `f` with replacement. With `distinct_within_sample`, the columns of
/// one sample are drawn without replacement instead.
pub fn augment<R: Rng + ?Sized>(
    f: &FlattenedCsi,
    m: usize,
    n_users: usize,
    distinct_within_sample: bool,
    rng: &mut R,
) -> Result<AugmentedDataset> {
    if m == 0 {
        return Err(Error::InvalidConfig("augmentation size must be at least 1"));
    }
    if f.is_empty() || n_users == 0 {
        return Err(Error::Empty("flattened dataset"));
    }
    if distinct_within_sample && n_users > f.len() {
        return Err(Error::InvalidConfig("not enough columns for distinct users"));
    }
    let mut indices = Vec::with_capacity(m * n_users);
    for _ in 0..m {
        if distinct_within_sample {
            indices.extend(index::sample(rng, f.len(), n_users).iter());
        } else {
            indices.extend((0..n_users).map(|_| rng.random_range(0..f.len())));
        }
    }
    Ok(AugmentedDataset { source: f.clone(), n_users, indices })
}

/// Fine-tuning schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    /// Size of the rebuilt set; 0 trains on the real samples directly.
    pub aug_m: usize,
    /// Learning rate.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// SGD steps per epoch; a full pass over the training pool when unset.
    pub steps_per_epoch: Option<usize>,
    pub distinct_users: bool,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidConfig("tau must be non-negative"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("batch_size and steps_per_epoch must be positive"));
        }
        Ok(())
    }
}

/// Validation sum-rate after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub val_sum_rate: f64,
    /// Mean training-batch loss over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneHistory {
    /// Validation sum-rate of the backbone before any update.
    pub zero_shot: f64,
    pub epochs: Vec<FinetuneRecord>,
    /// `C(|F|, N_U)` of the rebuilt set, when augmentation ran.
    pub ceiling: Option<u128>,
}

impl FinetuneHistory {
    /// Validation curve including the zero-shot point at index 0.
    pub fn curve(&self) -> Vec<f64> {
        core::iter::once(self.zero_shot).chain(self.epochs.iter().map(|r| r.val_sum_rate)).collect()
    }
}

enum Pool<'a> {
    Real(&'a [ChannelMatrix]),
    Augmented(AugmentedDataset),
}

impl Pool<'_> {
    fn len(&self) -> usize {
        match self {
            Pool::Real(s) => s.len(),
            Pool::Augmented(a) => a.m(),
        }
    }

    fn batch(&self, ids: &[usize]) -> Vec<ChannelMatrix> {
        match self {
            Pool::Real(s) => ids.iter().map(|&i| s[i].clone()).collect(),
            Pool::Augmented(a) => a.batch(ids),
        }
    }
}

/// Fine-tunes a copy of `backbone`.
///
/// Generator use, in order: the augmentation indices (when `aug_m > 0`),
/// then for every step an optional reshuffle of the pool order followed by
/// the dropout draws of the gradient. Batches are consecutive slices of a
/// shuffled pool order; the order is reshuffled whenever fewer than
/// `min(batch_size, pool)` unused entries remain.
pub fn finetune<R: Rng + ?Sized>(
    backbone: &ModelParams,
    d_target: &Dataset,
    validation: &[ChannelMatrix],
    cfg: &FinetuneConfig,
    link: &LinkConfig,
    rng: &mut R,
) -> Result<(ModelParams, FinetuneHistory)> {
    cfg.validate()?;
    let (_, n_u) = d_target.dims()?;
    let zero_shot = mean_sum_rate(backbone, validation, link, 1024)?;
    let pool = if cfg.aug_m > 0 {
        let f = flatten_dataset(d_target)?;
        Pool::Augmented(augment(&f, cfg.aug_m, n_u, cfg.distinct_users, rng)?)
    } else {
        Pool::Real(&d_target.samples)
    };
    let ceiling = match &pool {
        Pool::Augmented(a) => a.combinatorial_ceiling(),
        Pool::Real(_) => None,
    };
    let n = pool.len();
    let batch = cfg.batch_size.min(n);
    let steps = cfg.steps_per_epoch.unwrap_or(n.div_ceil(batch));

    let mut params = backbone.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss = 0.0;
        for _ in 0..steps {
            if cursor + batch > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let b = pool.batch(&order[cursor..cursor + batch]);
            cursor += batch;
            let out = grad(&params, &b, link, Mode::Train, rng)?;
            params = apply_update(&params, &out.gradient, cfg.tau)?;
            if let Some(s) = &out.batch_stats {
                params.update_running_stats(s, BN_MOMENTUM);
            }
            loss += out.loss;
        }
        let val_sum_rate = mean_sum_rate(&params, validation, link, 1024)?;
        epochs.push(FinetuneRecord { epoch, val_sum_rate, loss: loss / steps as f64 });
    }
    Ok((params, FinetuneHistory { zero_shot, epochs, ceiling }))
}

#[cfg(test)]
mod tests;
