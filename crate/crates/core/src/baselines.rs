//! Classical reference precoders: zero-forcing fully digital precoding,
//! phase-extraction alternating minimization onto a hybrid structure, and a
//! per-sample projected gradient ascent used as an upper reference.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

use crate::beamforming::{normalize_power, normalized_sum_rate_grad, sum_rate, HybridPrecoder, LinkConfig};
use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A fully digital `N_T x N_U` precoder with total power `p_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdpMatrix {
    pub matrix: DMatrix<Complex64>,
    pub p_max: f64,
}

/// `H (H^H H)^-1` with every column scaled to power `p_max / N_U`.
pub fn zf_fdp(h: &ChannelMatrix, p_max: f64) -> Result<FdpMatrix> {
    let (n_t, n_u) = h.shape();
    if n_u == 0 || n_u > n_t {
        return Err(Error::SingularChannel);
    }
    if !(p_max > 0.0) {
        return Err(Error::InvalidConfig("p_max must be positive"));
    }
    let sv = h.singular_values();
    let max = sv.max();
    if !(max > 0.0) || sv.min() < RANK_TOLERANCE * max {
        return Err(Error::SingularChannel);
    }
    let gram_inv = h.ad_mul(h).try_inverse().ok_or(Error::SingularChannel)?;
    let mut f = h * gram_inv;
    let per_user = (p_max / n_u as f64).sqrt();
    for mut col in f.column_iter_mut() {
        let n = col.norm();
        col *= Complex64::new(per_user / n, 0.0);
    }
    Ok(FdpMatrix { matrix: f, p_max })
}

/// Outcome of [`pe_altmin`].
#[derive(Debug, Clone, PartialEq)]
pub struct AltMinResult {
    /// Final hybrid precoder, normalized to the target's power.
    pub precoder: HybridPrecoder,
    /// `||F - A W||_F` after the initial least-squares fit and after every
    /// iteration, before power normalization.
    pub residuals: Vec<f64>,
    /// False when `max_iters` ran out before the stopping rule fired.
    pub converged: bool,
}

impl AltMinResult {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().expect("at least the initial residual")
    }

    pub fn iterations(&self) -> usize {
        self.residuals.len() - 1
    }
}

fn phase_matrix(phases: &DMatrix<f64>) -> DMatrix<Complex64> {
    phases.map(|p| Complex64::from_polar(1.0, p))
}

fn least_squares_digital(a: &DMatrix<Complex64>, f: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    a.clone().svd(true, true).solve(f, 0.0).map_err(|_| Error::SingularChannel)
}

/// Settings of [`pe_altmin`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltMinConfig {
    pub max_iters: usize,
    /// Stop once the relative residual decrease of an iteration is below this.
    pub tol: f64,
    /// Independent random starts; the lowest final residual wins.
    pub restarts: usize,
}

impl Default for AltMinConfig {
    fn default() -> Self {
        Self { max_iters: 1000, tol: 1e-9, restarts: 4 }
    }
}

/// Hybrid factorization `F ~ A W` by alternating a phase update of the
/// unit-modulus `A` with the least-squares `W = (A^H A)^-1 A^H F`.
///
/// The phase update sweeps the entries of `A`, setting each phase to the
/// exact minimizer of the residual with the others fixed, so the residual
/// never increases. Each start runs until the relative decrease drops below
/// `tol` or `max_iters` is reached.
pub fn pe_altmin<R: Rng + ?Sized>(
    f_opt: &FdpMatrix,
    n_rf: usize,
    cfg: &AltMinConfig,
    rng: &mut R,
) -> Result<AltMinResult> {
    let (n_t, n_u) = f_opt.matrix.shape();
    if n_rf < n_u || n_rf > n_t {
        return Err(Error::InvalidConfig("pe_altmin needs N_U <= n_rf <= N_T"));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidConfig("pe_altmin needs at least one start"));
    }
    let mut best: Option<AltMinResult> = None;
    for _ in 0..cfg.restarts {
        let run = altmin_from_random(f_opt, n_rf, cfg, rng)?;
        if best.as_ref().is_none_or(|b| run.residual() < b.residual()) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn altmin_from_random<R: Rng + ?Sized>(
    f_opt: &FdpMatrix,
    n_rf: usize,
    cfg: &AltMinConfig,
    rng: &mut R,
) -> Result<AltMinResult> {
    let f = &f_opt.matrix;
    let (n_t, n_u) = f.shape();
    let tau = core::f64::consts::TAU;
    let mut phases = DMatrix::from_fn(n_t, n_rf, |_, _| tau * rng.random::<f64>());
    let mut a = phase_matrix(&phases);
    let mut w = least_squares_digital(&a, f)?;
    let scale = f.norm();
    let mut residuals = alloc::vec![(f - &a * &w).norm()];
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let prev = *residuals.last().expect("non-empty");
        if prev <= 1e-14 * scale {
            converged = true;
            break;
        }
        // Rows of F - A W decouple; each phase is set to the exact minimizer
        // with the other phases of its row held fixed.
        for n in 0..n_t {
            let mut row_res: Vec<Complex64> =
                (0..n_u).map(|u| f[(n, u)] - (0..n_rf).map(|m| a[(n, m)] * w[(m, u)]).sum::<Complex64>()).collect();
            for m in 0..n_rf {
                let mut z = Complex64::new(0.0, 0.0);
                for u in 0..n_u {
                    row_res[u] += a[(n, m)] * w[(m, u)];
                    z += row_res[u] * w[(m, u)].conj();
                }
                if z.norm_sqr() > 0.0 {
                    phases[(n, m)] = z.im.atan2(z.re);
                    a[(n, m)] = Complex64::from_polar(1.0, phases[(n, m)]);
                }
                for u in 0..n_u {
                    row_res[u] -= a[(n, m)] * w[(m, u)];
                }
            }
        }
        a = phase_matrix(&phases);
        w = least_squares_digital(&a, f)?;
        let r = (f - &a * &w).norm();
        residuals.push(r);
        if prev - r <= cfg.tol * prev {
            converged = true;
            break;
        }
    }
    let precoder = normalize_power(&HybridPrecoder { analog_phases: phases, digital: w }, f_opt.p_max)?;
    Ok(AltMinResult { precoder, residuals, converged })
}

/// Settings of [`oracle_ascent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub restarts: usize,
    /// Gradient steps per restart.
    pub iters: usize,
    pub initial_step: f64,
    /// Step shrink factor on a rejected step; accepted steps grow the step
    /// by its inverse.
    pub backtrack: f64,
    /// Also ascend from the PE-AltMin factorization of the zero-forcing
    /// precoder (skipped when the channel is rank deficient).
    pub warm_start: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { restarts: 8, iters: 500, initial_step: 0.1, backtrack: 0.5, warm_start: true }
    }
}

/// Best precoder over all restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub precoder: HybridPrecoder,
    pub sum_rate: f64,
    /// Accepted steps of the winning restart.
    pub iterations: usize,
    /// Objective after every accepted step of the winning restart, starting
    /// with the initial point.
    pub trace: Vec<f64>,
}

/// Most shrinks tried before a restart is declared stationary.
const MAX_BACKTRACKS: usize = 40;

/// Projected gradient ascent on `(phases, W)` from random starts and an
/// optional structured start, with power re-normalization after every step
/// and backtracking so that the sum-rate never decreases.
pub fn oracle_ascent<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    n_rf: usize,
    link: &LinkConfig,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<OracleResult> {
    if cfg.restarts == 0 && !cfg.warm_start {
        return Err(Error::InvalidConfig("oracle needs at least one start"));
    }
    if !(cfg.initial_step > 0.0 && cfg.backtrack > 0.0 && cfg.backtrack < 1.0) {
        return Err(Error::InvalidConfig("oracle step must be positive and backtrack in (0, 1)"));
    }
    let (n_t, n_u) = h.shape();
    let tau = core::f64::consts::TAU;
    let mut best: Option<OracleResult> = None;
    if cfg.warm_start {
        if let Ok(zf) = zf_fdp(h, link.p_max) {
            let start = pe_altmin(&zf, n_rf, &AltMinConfig::default(), rng)?.precoder;
            best = Some(ascend(h, start, link, cfg)?);
        }
    }
    for _ in 0..cfg.restarts {
        let phases = DMatrix::from_fn(n_t, n_rf, |_, _| tau * rng.random::<f64>());
        let digital = DMatrix::from_fn(n_rf, n_u, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im)
        });
        let start = normalize_power(&HybridPrecoder { analog_phases: phases, digital }, link.p_max)?;
        let run = ascend(h, start, link, cfg)?;
        if best.as_ref().is_none_or(|b| run.sum_rate > b.sum_rate) {
            best = Some(run);
        }
    }
    // Only reachable without random restarts when the warm start was skipped.
    best.ok_or(Error::SingularChannel)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Phases,
    Digital,
}

/// One backtracked ascent step on a single block; false when no step size
/// down to the shrink limit improves the objective.
fn block_step(
    h: &ChannelMatrix,
    p: &mut HybridPrecoder,
    rate: &mut f64,
    block: Block,
    step: &mut f64,
    link: &LinkConfig,
    cfg: &OracleConfig,
) -> Result<bool> {
    let (_, g) = normalized_sum_rate_grad(h, p, link)?;
    for _ in 0..MAX_BACKTRACKS {
        let cand = match block {
            Block::Phases => HybridPrecoder {
                analog_phases: &p.analog_phases + &g.analog_phases * *step,
                digital: p.digital.clone(),
            },
            Block::Digital => HybridPrecoder {
                analog_phases: p.analog_phases.clone(),
                digital: &p.digital + &g.digital * Complex64::new(*step, 0.0),
            },
        };
        if let Ok(cand) = normalize_power(&cand, link.p_max) {
            let r = sum_rate(h, &cand, link);
            if r >= *rate {
                *p = cand;
                *rate = r;
                *step /= cfg.backtrack;
                return Ok(true);
            }
        }
        *step *= cfg.backtrack;
    }
    Ok(false)
}

/// Alternates backtracked steps on the phases and on `W`, each block with
/// its own step size.
fn ascend(h: &ChannelMatrix, start: HybridPrecoder, link: &LinkConfig, cfg: &OracleConfig) -> Result<OracleResult> {
    let mut p = start;
    let mut rate = sum_rate(h, &p, link);
    let mut trace = alloc::vec![rate];
    let mut steps = [cfg.initial_step; 2];
    for _ in 0..cfg.iters {
        let a = block_step(h, &mut p, &mut rate, Block::Phases, &mut steps[0], link, cfg)?;
        let d = block_step(h, &mut p, &mut rate, Block::Digital, &mut steps[1], link, cfg)?;
        if !(a || d) {
            break;
        }
        trace.push(rate);
    }
    Ok(OracleResult { precoder: p, sum_rate: rate, iterations: trace.len() - 1, trace })
}
