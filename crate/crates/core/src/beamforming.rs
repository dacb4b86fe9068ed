//! Hybrid precoders, per-user SINR, sum-rate, and the total-power constraint.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};
// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

/// Analog phase-shifter network plus digital baseband precoder.
///
/// Only the phases are stored, so the analog matrix `A = exp(j * phases)` is
/// unit-modulus by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrecoder {
    /// `N_T x N_RF`, radians.
    pub analog_phases: DMatrix<f64>,
    /// `N_RF x N_U`; column `u` is `w_u`.
    pub digital: DMatrix<Complex64>,
}

impl HybridPrecoder {
    pub fn new(analog_phases: DMatrix<f64>, digital: DMatrix<Complex64>) -> Result<Self> {
        if analog_phases.ncols() != digital.nrows() {
            return Err(Error::ShapeMismatch { expected: analog_phases.ncols(), found: digital.nrows() });
        }
        Ok(Self { analog_phases, digital })
    }

    pub fn n_t(&self) -> usize {
        self.analog_phases.nrows()
    }

    pub fn n_rf(&self) -> usize {
        self.analog_phases.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.digital.ncols()
    }

    pub fn analog_matrix(&self) -> DMatrix<Complex64> {
        self.analog_phases.map(|p| {
            let (s, c) = p.sin_cos();
            Complex64::new(c, s)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    /// Noise power.
    pub sigma2: f64,
    /// Total transmit power budget.
    pub p_max: f64,
}

impl LinkConfig {
    pub fn new(sigma2: f64, p_max: f64) -> Result<Self> {
        let link = Self { sigma2, p_max };
        link.validate()?;
        Ok(link)
    }

    /// `sigma2 = 10^(-neg_log10_sigma2)`.
    pub fn from_neg_log10(neg_log10_sigma2: f64, p_max: f64) -> Result<Self> {
        Self::new(10f64.powf(-neg_log10_sigma2), p_max)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.sigma2) && ok(self.p_max) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("sigma2 and p_max must be positive and finite"))
        }
    }
}

/// `A W`, the `N_T x N_U` effective precoder.
pub fn effective_precoder(p: &HybridPrecoder) -> DMatrix<Complex64> {
    p.analog_matrix() * &p.digital
}

/// `sum_u w_u^H A^H A w_u`.
pub fn transmit_power(p: &HybridPrecoder) -> f64 {
    effective_precoder(p).norm_squared()
}

/// Received-amplitude matrix `M[u, j] = h_u^H A w_j`.
fn gain_matrix(h: &ChannelMatrix, v: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    assert_eq!(h.nrows(), v.nrows(), "channel and precoder disagree on N_T");
    assert_eq!(h.ncols(), v.ncols(), "channel and precoder disagree on N_U");
    h.ad_mul(v)
}

fn sinr_from_gains(m: &DMatrix<Complex64>, sigma2: f64, u: usize) -> f64 {
    let mut interference = sigma2;
    for j in 0..m.ncols() {
        if j != u {
            interference += m[(u, j)].norm_sqr();
        }
    }
    m[(u, u)].norm_sqr() / interference
}

pub fn sinr(h: &ChannelMatrix, p: &HybridPrecoder, link: &LinkConfig, u: usize) -> f64 {
    assert!(u < p.n_u(), "user index out of range");
    let m = gain_matrix(h, &effective_precoder(p));
    sinr_from_gains(&m, link.sigma2, u)
}

pub fn sinr_all(h: &ChannelMatrix, p: &HybridPrecoder, link: &LinkConfig) -> Vec<f64> {
    let m = gain_matrix(h, &effective_precoder(p));
    (0..m.ncols()).map(|u| sinr_from_gains(&m, link.sigma2, u)).collect()
}

/// Sum over users of `log2(1 + SINR_u)`, bits/s/Hz.
pub fn sum_rate(h: &ChannelMatrix, p: &HybridPrecoder, link: &LinkConfig) -> f64 {
    precoder_sum_rate(h, &effective_precoder(p), link)
}

/// [`sum_rate`] of an unconstrained `N_T x N_U` precoder, e.g. a fully
/// digital reference.
pub fn precoder_sum_rate(h: &ChannelMatrix, f: &DMatrix<Complex64>, link: &LinkConfig) -> f64 {
    let m = gain_matrix(h, f);
    (0..m.ncols()).map(|u| (1.0 + sinr_from_gains(&m, link.sigma2, u)).log2()).sum()
}

/// Scales `W` so the total transmit power equals `p_max` exactly.
pub fn normalize_power(p: &HybridPrecoder, p_max: f64) -> Result<HybridPrecoder> {
    let power = transmit_power(p);
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::DegeneratePrecoder);
    }
    let c = (p_max / power).sqrt();
    Ok(HybridPrecoder { analog_phases: p.analog_phases.clone(), digital: &p.digital * Complex64::new(c, 0.0) })
}

/// Gradient of a real objective with respect to a hybrid precoder.
///
/// `digital[(r, u)] = d/dRe(W_ru) + j d/dIm(W_ru)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderGradient {
    pub analog_phases: DMatrix<f64>,
    pub digital: DMatrix<Complex64>,
}

/// Sum-rate of the power-normalized precoder and its exact gradient with
/// respect to the unnormalized phases and digital weights.
pub fn normalized_sum_rate_grad(
    h: &ChannelMatrix,
    p: &HybridPrecoder,
    link: &LinkConfig,
) -> Result<(f64, PrecoderGradient)> {
    let a = p.analog_matrix();
    let v = &a * &p.digital;
    let power = v.norm_squared();
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::DegeneratePrecoder);
    }
    let norm = power.sqrt();
    let c = link.p_max.sqrt() / norm;
    let v_n = &v * Complex64::new(c, 0.0);
    let m = gain_matrix(h, &v_n);
    let n_u = m.ncols();

    // R = sum_u [ln S_u - ln I_u] / ln 2 with S_u total and I_u interference+noise.
    let ln2 = core::f64::consts::LN_2;
    let mut rate = 0.0;
    let mut g_m = DMatrix::<Complex64>::zeros(n_u, n_u);
    for u in 0..n_u {
        let mut total = link.sigma2;
        for j in 0..n_u {
            total += m[(u, j)].norm_sqr();
        }
        // Summed directly rather than as `total - signal` to avoid cancellation.
        let mut interf = link.sigma2;
        for j in 0..n_u {
            if j != u {
                interf += m[(u, j)].norm_sqr();
            }
        }
        rate += (1.0 + m[(u, u)].norm_sqr() / interf).log2();
        let d_total = 1.0 / (total * ln2);
        let d_interf = 1.0 / (interf * ln2);
        for j in 0..n_u {
            let q = if j == u { d_total } else { d_total - d_interf };
            g_m[(u, j)] = m[(u, j)] * (2.0 * q);
        }
    }

    // Back through M = H^H V_n, then V_n = sqrt(p_max) V / ||V||.
    let g_vn = h * &g_m;
    let proj: f64 = v_n.iter().zip(g_vn.iter()).map(|(x, g)| (x.conj() * g).re).sum();
    let g_v = (&g_vn - &v_n * Complex64::new(proj / link.p_max, 0.0)) * Complex64::new(c, 0.0);

    let g_w = a.ad_mul(&g_v);
    let g_a = &g_v * p.digital.adjoint();
    let g_phase = DMatrix::from_fn(a.nrows(), a.ncols(), |n, k| (g_a[(n, k)] * a[(n, k)].conj()).im);
    Ok((rate, PrecoderGradient { analog_phases: g_phase, digital: g_w }))
}
