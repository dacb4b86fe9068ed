//! Precoder network: amplitude/phase CSI planes, a convolutional trunk, a
//! fully connected stack, and two affine heads producing the analog phases
//! and the digital precoder. Gradients are computed by a hand-written
//! backward pass through the normalized sum-rate objective.

mod config;
mod gradcheck;
mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;
// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::beamforming::{normalized_sum_rate_grad, HybridPrecoder, LinkConfig};
use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};

use config::{Dense, Plan};
pub use config::{NetConfig, TensorSpec};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, ZERO_GRADIENT_FLOOR};
use kernels::{bn_backward, bn_eval_forward, bn_train_forward, col2im, gemm_nn, gemm_nt, gemm_tn, im2col, Grid};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout sampling and batch statistics.
    Train,
    /// No dropout; running statistics.
    Eval,
}

/// Trainable tensors plus batch-norm running statistics, stored as flat
/// buffers in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub values: Vec<f64>,
    pub running: Vec<f64>,
}

/// Gradient with the layout of [`ModelParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { values: vec![0.0; params.values.len()] }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-feature `(mean, unbiased variance)` of every batch-norm layer seen in
/// a Train-mode forward, laid out like [`ModelParams::running`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean_var: Vec<(f64, f64)>,
}

impl ModelParams {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// identity batch-norm. Random head biases keep the digital precoder away
    /// from zero even when every trunk unit is inactive.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(&config);
        let mut values = vec![0.0; plan.n_trainable];
        let mut bound = 0.0;
        for spec in &plan.trainable {
            let slot = &mut values[spec.range()];
            if spec.name.ends_with(".weight") || spec.name.ends_with(".bias") {
                if spec.name.ends_with(".weight") {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    bound = (1.0 / fan_in as f64).sqrt();
                }
                slot.iter_mut().for_each(|v| *v = bound * (2.0 * rng.random::<f64>() - 1.0));
            } else if spec.name.ends_with(".gamma") {
                slot.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let mut running = vec![0.0; plan.n_running];
        for spec in &plan.running {
            if spec.name.ends_with("running_var") {
                running[spec.range()].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        Ok(Self { config, values, running })
    }

    pub fn trainable_specs(&self) -> Vec<TensorSpec> {
        Plan::new(&self.config).trainable
    }

    pub fn running_specs(&self) -> Vec<TensorSpec> {
        Plan::new(&self.config).running
    }

    /// Checks buffer sizes and finiteness against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let plan = Plan::new(&self.config);
        if self.values.len() != plan.n_trainable {
            return Err(Error::ShapeMismatch { expected: plan.n_trainable, found: self.values.len() });
        }
        if self.running.len() != plan.n_running {
            return Err(Error::ShapeMismatch { expected: plan.n_running, found: self.running.len() });
        }
        if self.values.iter().chain(&self.running).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter"));
        }
        Ok(())
    }

    /// Exponential moving average of the running statistics toward a batch.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        let plan = Plan::new(&self.config);
        let mut it = stats.mean_var.iter();
        for layer in plan.conv.iter().chain(&plan.fc) {
            if let Some(bn) = layer.bn {
                for f in 0..bn.features {
                    let (m, v) = *it.next().expect("batch stats cover every batch-norm feature");
                    let rm = &mut self.running[bn.mean + f];
                    *rm = (1.0 - momentum) * *rm + momentum * m;
                    let rv = &mut self.running[bn.var + f];
                    *rv = (1.0 - momentum) * *rv + momentum * v;
                }
            }
        }
    }
}

/// `params - lr * g` on the trainable tensors; running statistics are kept.
pub fn apply_update(params: &ModelParams, g: &Gradient, lr: f64) -> Result<ModelParams> {
    if g.values.len() != params.values.len() {
        return Err(Error::ShapeMismatch { expected: params.values.len(), found: g.values.len() });
    }
    let mut out = params.clone();
    for (p, d) in out.values.iter_mut().zip(&g.values) {
        *p -= lr * d;
    }
    Ok(out)
}

/// Amplitude and phase planes, `batch x 2 x N_T x N_U` row-major.
pub fn featurize(batch: &[ChannelMatrix]) -> Result<Vec<f64>> {
    let first = batch.first().ok_or(Error::Empty("channel batch"))?;
    let (n_t, n_u) = first.shape();
    let plane = n_t * n_u;
    let mut out = vec![0.0; batch.len() * 2 * plane];
    for (b, h) in batch.iter().enumerate() {
        if h.shape() != (n_t, n_u) {
            return Err(Error::ShapeMismatch { expected: plane, found: h.nrows() * h.ncols() });
        }
        let base = b * 2 * plane;
        for t in 0..n_t {
            for u in 0..n_u {
                let z = h[(t, u)];
                let mut arg = z.im.atan2(z.re);
                if arg <= -core::f64::consts::PI {
                    arg = core::f64::consts::PI;
                }
                out[base + t * n_u + u] = z.norm();
                out[base + plane + t * n_u + u] = arg;
            }
        }
    }
    Ok(out)
}

struct ConvTape {
    cols: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

struct FcTape {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    act: Vec<f64>,
    mask: Option<Vec<f64>>,
}

pub(crate) struct Tape {
    batch: usize,
    conv: Vec<ConvTape>,
    fc: Vec<FcTape>,
    head_input: Vec<f64>,
    stats: Vec<(f64, f64)>,
}

/// Raw head outputs, feature-major: `phase[N_T*N_RF][batch]`,
/// `digital[2*N_RF*N_U][batch]`.
pub(crate) struct Heads {
    phase: Vec<f64>,
    digital: Vec<f64>,
}

fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Affine map, batch-norm or bias, ReLU on a feature-major block
/// `x[outputs][n]`.
#[allow(clippy::too_many_arguments)]
fn normalize_activate(
    layer: &Dense,
    params: &ModelParams,
    x: &mut [f64],
    n: usize,
    mode: Mode,
    xhat: &mut Vec<f64>,
    inv_std: &mut Vec<f64>,
    stats: &mut Vec<(f64, f64)>,
) {
    if let Some(bn) = layer.bn {
        let gamma = &params.values[bn.gamma..bn.gamma + bn.features];
        let beta = &params.values[bn.beta..bn.beta + bn.features];
        *xhat = vec![0.0; x.len()];
        *inv_std = vec![0.0; bn.features];
        match mode {
            Mode::Train => {
                let mut s = vec![(0.0, 0.0); bn.features];
                bn_train_forward(x, n, gamma, beta, xhat, inv_std, &mut s);
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                stats.extend(s.into_iter().map(|(m, v)| (m, v * unbias)));
            }
            Mode::Eval => {
                let rm = &params.running[bn.mean..bn.mean + bn.features];
                let rv = &params.running[bn.var..bn.var + bn.features];
                bn_eval_forward(x, n, gamma, beta, rm, rv, xhat, inv_std);
            }
        }
    } else if let Some(b) = layer.bias {
        for (f, row) in x.chunks_mut(n).enumerate() {
            let bias = params.values[b + f];
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    relu(x);
}

fn affine_head(layer: &Dense, params: &ModelParams, input: &[f64], batch: usize) -> Vec<f64> {
    let mut y = vec![0.0; layer.outputs * batch];
    let w = &params.values[layer.weight..layer.weight + layer.outputs * layer.inputs];
    gemm_nn(layer.outputs, layer.inputs, batch, w, input, &mut y);
    let b = layer.bias.expect("heads carry a bias");
    for (f, row) in y.chunks_mut(batch).enumerate() {
        let bias = params.values[b + f];
        row.iter_mut().for_each(|v| *v += bias);
    }
    y
}

/// Activation entering a stage of the network.
#[derive(Debug, Clone)]
pub(crate) enum Activation {
    /// `[channels][batch * positions]`
    Spatial { data: Vec<f64>, channels: usize },
    /// `[features][batch]`
    Flat(Vec<f64>),
}

/// `[b][c][pos]` features to the channel-major trunk layout.
fn input_activation(features: &[f64], batch: usize, positions: usize) -> Activation {
    let n = batch * positions;
    let mut x = vec![0.0; features.len()];
    for b in 0..batch {
        for c in 0..2 {
            let src = &features[(b * 2 + c) * positions..(b * 2 + c + 1) * positions];
            x[c * n + b * positions..c * n + (b + 1) * positions].copy_from_slice(src);
        }
    }
    Activation::Spatial { data: x, channels: 2 }
}

/// `[c][b][pos]` -> `[(c, pos)][b]`
fn flatten(act: Activation, batch: usize, positions: usize) -> Vec<f64> {
    match act {
        Activation::Flat(h) => h,
        Activation::Spatial { data, channels } => {
            let n = batch * positions;
            let mut h = vec![0.0; channels * n];
            for c in 0..channels {
                for b in 0..batch {
                    for p in 0..positions {
                        h[(c * positions + p) * batch + b] = data[c * n + b * positions + p];
                    }
                }
            }
            h
        }
    }
}

impl Plan {
    pub(crate) fn stage_count(&self) -> usize {
        self.conv.len() + self.fc.len() + 1
    }

    /// Stage owning trainable coordinate `i`.
    pub(crate) fn stage_of(&self, i: usize) -> usize {
        let owns = |l: &Dense| {
            (l.weight..l.weight + l.outputs * l.inputs).contains(&i)
                || l.bias.is_some_and(|b| (b..b + l.outputs).contains(&i))
                || l.bn.is_some_and(|bn| (bn.gamma..bn.gamma + 2 * bn.features).contains(&i))
        };
        self.conv.iter().chain(&self.fc).position(owns).unwrap_or(self.conv.len() + self.fc.len())
    }
}

/// What a stage consumed and produced before normalization.
pub(crate) struct StageView<'a> {
    /// `cols` for conv stages, the flattened input for dense and head stages.
    pub linear_input: &'a [f64],
    /// Linear output before normalization; empty for the head stage.
    pub pre: &'a [f64],
}

/// Linear part of a trunk stage: returns `(linear_input, pre_activation)`.
fn linear_stage(
    params: &ModelParams,
    plan: &Plan,
    stage: usize,
    act: Activation,
    batch: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let grid = Grid { rows: cfg.n_t, cols: cfg.n_u, kernel: cfg.kernel_size };
    let positions = grid.positions();
    if stage < plan.conv.len() {
        let layer = &plan.conv[stage];
        let Activation::Spatial { data, channels } = act else { unreachable!("conv stages see spatial activations") };
        let n = batch * positions;
        let mut cols = vec![0.0; layer.inputs * n];
        im2col(&data, channels, batch, grid, &mut cols);
        let mut y = vec![0.0; layer.outputs * n];
        let w = &params.values[layer.weight..layer.weight + layer.outputs * layer.inputs];
        gemm_nn(layer.outputs, layer.inputs, n, w, &cols, &mut y);
        (cols, y)
    } else {
        let layer = &plan.fc[stage - plan.conv.len()];
        let h = flatten(act, batch, positions);
        let mut y = vec![0.0; layer.outputs * batch];
        let w = &params.values[layer.weight..layer.weight + layer.outputs * layer.inputs];
        gemm_nn(layer.outputs, layer.inputs, batch, w, &h, &mut y);
        (h, y)
    }
}

/// Normalization, ReLU and (dense stages) dropout applied to the linear
/// output `y` of a trunk stage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_stage<R: Rng + ?Sized>(
    params: &ModelParams,
    plan: &Plan,
    stage: usize,
    mut y: Vec<f64>,
    linear_input: Vec<f64>,
    batch: usize,
    mode: Mode,
    rng: &mut R,
    mut tape: Option<&mut Tape>,
) -> Activation {
    let cfg = &params.config;
    let n_conv = plan.conv.len();
    let conv = stage < n_conv;
    let layer = if conv { &plan.conv[stage] } else { &plan.fc[stage - n_conv] };
    let n = if conv { batch * cfg.n_t * cfg.n_u } else { batch };
    let (mut xhat, mut inv_std, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
    {
        let stats = match tape.as_deref_mut() {
            Some(t) => &mut t.stats,
            None => &mut scratch,
        };
        normalize_activate(layer, params, &mut y, n, mode, &mut xhat, &mut inv_std, stats);
    }
    if conv {
        if let Some(t) = tape {
            t.conv.push(ConvTape { cols: linear_input, xhat, inv_std, out: y.clone() });
        }
        return Activation::Spatial { data: y, channels: layer.outputs };
    }
    let act = tape.is_some().then(|| y.clone());
    let mask = if mode == Mode::Train && cfg.dropout_rate > 0.0 {
        let keep = 1.0 / (1.0 - cfg.dropout_rate);
        let m: Vec<f64> =
            (0..y.len()).map(|_| if rng.random::<f64>() < cfg.dropout_rate { 0.0 } else { keep }).collect();
        y.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
        Some(m)
    } else {
        None
    };
    if let (Some(t), Some(act)) = (tape, act) {
        t.fc.push(FcTape { input: linear_input, xhat, inv_std, act, mask });
    }
    Activation::Flat(y)
}

/// Runs stages `start..` of the network. `observe` sees every stage's
/// linear input and pre-activation together with the generator state
/// before the stage draws anything.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_stages<R: Rng + ?Sized>(
    params: &ModelParams,
    plan: &Plan,
    start: usize,
    mut act: Activation,
    batch: usize,
    mode: Mode,
    rng: &mut R,
    mut tape: Option<&mut Tape>,
    mut observe: impl FnMut(usize, StageView<'_>, &R),
) -> Heads {
    let positions = params.config.n_t * params.config.n_u;
    let last = plan.stage_count() - 1;
    for stage in start..last {
        let (linear_input, pre) = linear_stage(params, plan, stage, act, batch);
        observe(stage, StageView { linear_input: &linear_input, pre: &pre }, rng);
        act = finish_stage(params, plan, stage, pre, linear_input, batch, mode, rng, tape.as_deref_mut());
    }
    let h = flatten(act, batch, positions);
    observe(last, StageView { linear_input: &h, pre: &[] }, rng);
    let heads = Heads {
        phase: affine_head(&plan.head_phase, params, &h, batch),
        digital: affine_head(&plan.head_digital, params, &h, batch),
    };
    if let Some(t) = tape {
        t.head_input = h;
    }
    heads
}

fn run_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    plan: &Plan,
    features: &[f64],
    batch: usize,
    mode: Mode,
    rng: &mut R,
    keep_tape: bool,
) -> (Heads, Option<Tape>) {
    let positions = params.config.n_t * params.config.n_u;
    let act = input_activation(features, batch, positions);
    let mut tape =
        keep_tape.then(|| Tape { batch, conv: Vec::new(), fc: Vec::new(), head_input: Vec::new(), stats: Vec::new() });
    let heads = run_stages(params, plan, 0, act, batch, mode, rng, tape.as_mut(), |_, _, _| {});
    (heads, tape)
}

/// Sum-rate objective of raw head outputs: negative mean normalized sum-rate.
pub(crate) fn heads_loss(cfg: &NetConfig, heads: &Heads, batch: &[ChannelMatrix], link: &LinkConfig) -> Result<f64> {
    let precoders = assemble(cfg, heads, batch.len());
    let mut total = 0.0;
    for (h, p) in batch.iter().zip(&precoders) {
        let p = crate::beamforming::normalize_power(p, link.p_max)?;
        total += crate::beamforming::sum_rate(h, &p, link);
    }
    Ok(-total / batch.len() as f64)
}

fn assemble(cfg: &NetConfig, heads: &Heads, batch: usize) -> Vec<HybridPrecoder> {
    let half = cfg.n_rf * cfg.n_u;
    (0..batch)
        .map(|b| {
            let phases = DMatrix::from_fn(cfg.n_t, cfg.n_rf, |t, m| heads.phase[(t * cfg.n_rf + m) * batch + b]);
            let digital = DMatrix::from_fn(cfg.n_rf, cfg.n_u, |r, u| {
                let i = r * cfg.n_u + u;
                Complex64::new(heads.digital[i * batch + b], heads.digital[(half + i) * batch + b])
            });
            HybridPrecoder { analog_phases: phases, digital }
        })
        .collect()
}

fn check_batch(cfg: &NetConfig, batch: &[ChannelMatrix]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("channel batch"));
    }
    for h in batch {
        if h.shape() != (cfg.n_t, cfg.n_u) {
            return Err(Error::ShapeMismatch { expected: cfg.n_t * cfg.n_u, found: h.nrows() * h.ncols() });
        }
    }
    Ok(())
}

/// Network outputs for every sample; the digital precoder is not yet
/// power-normalized.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[ChannelMatrix],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<HybridPrecoder>> {
    check_batch(&params.config, batch)?;
    let plan = Plan::new(&params.config);
    let features = featurize(batch)?;
    let (heads, _) = run_forward(params, &plan, &features, batch.len(), mode, rng, false);
    Ok(assemble(&params.config, &heads, batch.len()))
}

/// Negative mean sum-rate of the power-normalized network precoders.
pub fn loss<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[ChannelMatrix],
    link: &LinkConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    check_batch(&params.config, batch)?;
    let plan = Plan::new(&params.config);
    let features = featurize(batch)?;
    let (heads, _) = run_forward(params, &plan, &features, batch.len(), mode, rng, false);
    heads_loss(&params.config, &heads, batch, link)
}

/// Mean sum-rate of the Eval-mode network over `batch`, evaluated in
/// chunks of at most `chunk` samples.
pub fn mean_sum_rate(params: &ModelParams, batch: &[ChannelMatrix], link: &LinkConfig, chunk: usize) -> Result<f64> {
    check_batch(&params.config, batch)?;
    let chunk = chunk.max(1);
    // Eval mode draws nothing from the generator.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut total = 0.0;
    for part in batch.chunks(chunk) {
        total -= loss(params, part, link, Mode::Eval, &mut rng)? * part.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct GradOutput {
    pub loss: f64,
    pub gradient: Gradient,
    /// Present for Train-mode calls on networks with batch-norm.
    pub batch_stats: Option<BatchStats>,
}

/// Loss and its exact gradient with respect to every trainable tensor.
/// The dropout mask is drawn once from `rng`, so equal seeds give equal masks.
pub fn grad<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[ChannelMatrix],
    link: &LinkConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<GradOutput> {
    let cfg = params.config;
    check_batch(&cfg, batch)?;
    let plan = Plan::new(&cfg);
    let features = featurize(batch)?;
    let b = batch.len();
    let (heads, tape) = run_forward(params, &plan, &features, b, mode, rng, true);
    let tape = tape.expect("tape requested");
    let precoders = assemble(&cfg, &heads, b);

    let half = cfg.n_rf * cfg.n_u;
    let mut d_phase = vec![0.0; heads.phase.len()];
    let mut d_digital = vec![0.0; heads.digital.len()];
    let mut total = 0.0;
    let scale = -1.0 / b as f64;
    for (i, (h, p)) in batch.iter().zip(&precoders).enumerate() {
        let (rate, g) = normalized_sum_rate_grad(h, p, link)?;
        total += rate;
        for t in 0..cfg.n_t {
            for m in 0..cfg.n_rf {
                d_phase[(t * cfg.n_rf + m) * b + i] = scale * g.analog_phases[(t, m)];
            }
        }
        for r in 0..cfg.n_rf {
            for u in 0..cfg.n_u {
                let k = r * cfg.n_u + u;
                d_digital[k * b + i] = scale * g.digital[(r, u)].re;
                d_digital[(half + k) * b + i] = scale * g.digital[(r, u)].im;
            }
        }
    }
    let gradient = backward(params, &plan, &tape, &d_phase, &d_digital, mode);
    let batch_stats =
        (mode == Mode::Train && !tape.stats.is_empty()).then(|| BatchStats { mean_var: tape.stats.clone() });
    Ok(GradOutput { loss: -total / b as f64, gradient, batch_stats })
}

fn head_backward(
    layer: &Dense,
    params: &ModelParams,
    input: &[f64],
    dy: &[f64],
    batch: usize,
    g: &mut [f64],
    dx: &mut [f64],
) {
    let (o, i) = (layer.outputs, layer.inputs);
    gemm_nt(o, batch, i, dy, input, &mut g[layer.weight..layer.weight + o * i]);
    let b = layer.bias.expect("heads carry a bias");
    for (f, row) in dy.chunks(batch).enumerate() {
        g[b + f] += row.iter().sum::<f64>();
    }
    gemm_tn(i, o, batch, &params.values[layer.weight..layer.weight + o * i], dy, dx);
}

/// Backward through the normalization and activation of one block; `dy`
/// becomes the gradient of the pre-normalization activations.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    layer: &Dense,
    params: &ModelParams,
    act: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dy: &mut [f64],
    n: usize,
    mode: Mode,
    g: &mut [f64],
) {
    dy.iter_mut().zip(act).for_each(|(d, a)| {
        if *a <= 0.0 {
            *d = 0.0
        }
    });
    if let Some(bn) = layer.bn {
        let gamma = &params.values[bn.gamma..bn.gamma + bn.features];
        debug_assert_eq!(bn.beta, bn.gamma + bn.features);
        let (dg, db) = g[bn.gamma..bn.gamma + 2 * bn.features].split_at_mut(bn.features);
        bn_backward(dy, n, gamma, xhat, inv_std, mode == Mode::Train, dg, db);
    } else if let Some(b) = layer.bias {
        for (f, row) in dy.chunks(n).enumerate() {
            g[b + f] += row.iter().sum::<f64>();
        }
    }
}

fn backward(
    params: &ModelParams,
    plan: &Plan,
    tape: &Tape,
    d_phase: &[f64],
    d_digital: &[f64],
    mode: Mode,
) -> Gradient {
    let cfg = &params.config;
    let batch = tape.batch;
    let mut g = vec![0.0; plan.n_trainable];

    let mut dh = vec![0.0; tape.head_input.len()];
    head_backward(&plan.head_phase, params, &tape.head_input, d_phase, batch, &mut g, &mut dh);
    head_backward(&plan.head_digital, params, &tape.head_input, d_digital, batch, &mut g, &mut dh);

    for (layer, t) in plan.fc.iter().zip(&tape.fc).rev() {
        if let Some(mask) = &t.mask {
            dh.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
        }
        block_backward(layer, params, &t.act, &t.xhat, &t.inv_std, &mut dh, batch, mode, &mut g);
        let (o, i) = (layer.outputs, layer.inputs);
        gemm_nt(o, batch, i, &dh, &t.input, &mut g[layer.weight..layer.weight + o * i]);
        let mut dx = vec![0.0; i * batch];
        gemm_tn(i, o, batch, &params.values[layer.weight..layer.weight + o * i], &dh, &mut dx);
        dh = dx;
    }

    if plan.conv.is_empty() {
        return Gradient { values: g };
    }
    let grid = Grid { rows: cfg.n_t, cols: cfg.n_u, kernel: cfg.kernel_size };
    let positions = grid.positions();
    let n = batch * positions;
    let channels = plan.conv.last().map(|l| l.outputs).unwrap_or(2);
    // [(c, pos)][b] -> [c][b][pos]
    let mut dx = vec![0.0; channels * n];
    for c in 0..channels {
        for b in 0..batch {
            for p in 0..positions {
                dx[c * n + b * positions + p] = dh[(c * positions + p) * batch + b];
            }
        }
    }
    for (idx, (layer, t)) in plan.conv.iter().zip(&tape.conv).enumerate().rev() {
        block_backward(layer, params, &t.out, &t.xhat, &t.inv_std, &mut dx, n, mode, &mut g);
        let (o, kk) = (layer.outputs, layer.inputs);
        gemm_nt(o, n, kk, &dx, &t.cols, &mut g[layer.weight..layer.weight + o * kk]);
        if idx == 0 {
            break;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm_tn(kk, o, n, &params.values[layer.weight..layer.weight + o * kk], &dx, &mut dcols);
        let c_in = kk / (grid.kernel * grid.kernel);
        let mut din = vec![0.0; c_in * n];
        col2im(&dcols, c_in, batch, grid, &mut din);
        dx = din;
    }
    Gradient { values: g }
}
