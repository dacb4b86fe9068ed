//! Central finite-difference audit of [`super::grad`].

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Plan;
use super::{featurize, finish_stage, grad, heads_loss, input_activation, run_stages, Activation, Mode, ModelParams};
use crate::beamforming::LinkConfig;
use crate::channel::ChannelMatrix;
use crate::error::Result;
// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

/// Gradients smaller than this (both analytic and numeric) count as zero;
/// central differences of an O(10) loss carry ~1e-10 of rounding noise.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub within_tolerance: usize,
    pub max_rel_error: f64,
    /// 99th percentile of the per-coordinate relative error.
    pub p99_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        self.within_tolerance as f64 / self.coordinates as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_GRADIENT_FLOOR {
        return (analytic - numeric).abs() / ZERO_GRADIENT_FLOOR;
    }
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient with central differences of the loss at
/// every trainable coordinate. Every loss evaluation replays the generator
/// from `seed`, so the dropout mask is identical across evaluations.
///
/// Layer inputs of the unperturbed network are cached, so a perturbed
/// coordinate only re-runs the layers from its own onwards.
pub fn gradient_check(
    params: &ModelParams,
    batch: &[ChannelMatrix],
    link: &LinkConfig,
    mode: Mode,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = grad(params, batch, link, mode, &mut ChaCha8Rng::seed_from_u64(seed))?.gradient;
    let replay = Replay::new(params, batch, mode, seed)?;
    let mut probe = params.clone();
    let mut errors = Vec::with_capacity(params.values.len());
    for i in 0..params.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let plus = replay.loss_from(&probe, i, batch, link)?;
        probe.values[i] = orig - step;
        let minus = replay.loss_from(&probe, i, batch, link)?;
        probe.values[i] = orig;
        errors.push(relative_error(analytic.values[i], (plus - minus) / (2.0 * step)));
    }
    Ok(summarize(errors, tolerance))
}

/// Per-stage linear inputs, pre-activations, and generator states of the
/// unperturbed forward pass.
struct Replay {
    plan: Plan,
    mode: Mode,
    base: ModelParams,
    stages: Vec<(Vec<f64>, Vec<f64>, ChaCha8Rng)>,
}

impl Replay {
    fn new(params: &ModelParams, batch: &[ChannelMatrix], mode: Mode, seed: u64) -> Result<Self> {
        let plan = Plan::new(&params.config);
        let features = featurize(batch)?;
        let positions = params.config.n_t * params.config.n_u;
        let mut stages = Vec::with_capacity(plan.stage_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_stages(
            params,
            &plan,
            0,
            input_activation(&features, batch.len(), positions),
            batch.len(),
            mode,
            &mut rng,
            None,
            |_, view, r: &ChaCha8Rng| stages.push((view.linear_input.to_vec(), view.pre.to_vec(), r.clone())),
        );
        Ok(Self { plan, mode, base: params.clone(), stages })
    }

    /// Loss of `params`, which may differ from the base parameters only in
    /// coordinate `coord`. A perturbed weight changes one row of its stage's
    /// pre-activation by a rank-1 term; later stages are recomputed.
    fn loss_from(&self, params: &ModelParams, coord: usize, batch: &[ChannelMatrix], link: &LinkConfig) -> Result<f64> {
        let b = batch.len();
        let stage = self.plan.stage_of(coord);
        let last = self.plan.stage_count() - 1;
        let (input, pre, rng) = &self.stages[stage];
        let mut rng = rng.clone();
        let heads = if stage == last {
            run_stages(
                params,
                &self.plan,
                last,
                Activation::Flat(input.clone()),
                b,
                self.mode,
                &mut rng,
                None,
                |_, _, _| {},
            )
        } else {
            let n_conv = self.plan.conv.len();
            let layer = if stage < n_conv { &self.plan.conv[stage] } else { &self.plan.fc[stage - n_conv] };
            let mut y = pre.clone();
            let weights = layer.weight..layer.weight + layer.outputs * layer.inputs;
            if weights.contains(&coord) {
                let delta = params.values[coord] - self.base.values[coord];
                let (row, col) = ((coord - layer.weight) / layer.inputs, (coord - layer.weight) % layer.inputs);
                let n = y.len() / layer.outputs;
                let src = &input[col * n..(col + 1) * n];
                y[row * n..(row + 1) * n].iter_mut().zip(src).for_each(|(v, x)| *v += delta * x);
            }
            let act = finish_stage(params, &self.plan, stage, y, input.clone(), b, self.mode, &mut rng, None);
            run_stages(params, &self.plan, stage + 1, act, b, self.mode, &mut rng, None, |_, _, _| {})
        };
        heads_loss(&params.config, &heads, batch, link)
    }
}

fn summarize(mut errors: Vec<f64>, tolerance: f64) -> GradCheckReport {
    let coordinates = errors.len();
    let within_tolerance = errors.iter().filter(|&&e| e < tolerance).count();
    errors.sort_by(f64::total_cmp);
    let max_rel_error = errors.last().copied().unwrap_or(0.0);
    let p99_rel_error = if coordinates == 0 {
        0.0
    } else {
        errors[((coordinates as f64 * 0.99).ceil() as usize).clamp(1, coordinates) - 1]
    };
    GradCheckReport { coordinates, within_tolerance, max_rel_error, p99_rel_error, tolerance }
}
