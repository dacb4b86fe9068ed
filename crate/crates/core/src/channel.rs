//! Statistical LOS channels over configurable domains, plus a geometric
//! multipath surrogate used as the shifted deployment domain.
//!
//! The BS array sits at the origin of a local frame at height `bs_height`;
//! users stand on a horizontal rectangle at `user_height`. Antenna index `t`
//! maps to `(k_z, k_y, k_x)` with `k_x` varying fastest.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

/// Per-sample CSI, `N_T x N_U`; column `u` is the channel vector of user `u`.
pub type ChannelMatrix = DMatrix<Complex64>;

/// 28 GHz carrier wavelength in meters.
pub const WAVELENGTH_28GHZ: f64 = 299_792_458.0 / 28.0e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntennaLayout {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Element spacing in carrier wavelengths.
    pub d_over_lambda: f64,
}

impl AntennaLayout {
    /// Half-wavelength array with the given per-axis element counts.
    pub fn new(n_x: usize, n_y: usize, n_z: usize) -> Self {
        Self { n_x, n_y, n_z, d_over_lambda: 0.5 }
    }

    pub fn n_t(&self) -> usize {
        self.n_x * self.n_y * self.n_z
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.n_z == 0 {
            return Err(Error::InvalidConfig("antenna counts must be positive"));
        }
        if !(self.d_over_lambda > 0.0) || !self.d_over_lambda.is_finite() {
            return Err(Error::InvalidConfig("antenna spacing must be positive"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("[{},{},{}]", self.n_x, self.n_y, self.n_z)
    }
}

/// Rectangle of user ground positions, meters, in the BS frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for Geometry {
    fn default() -> Self {
        Self { x_range: (10.0, 100.0), y_range: (-25.0, 25.0) }
    }
}

impl Geometry {
    fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if ok(self.x_range) && ok(self.y_range) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("geometry ranges must be finite and ordered"))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, user_height: f64, rng: &mut R) -> [f64; 3] {
        let x = uniform(rng, self.x_range);
        let y = uniform(rng, self.y_range);
        [x, y, user_height]
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A statistical LOS channel configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub layout: AntennaLayout,
    /// Path-loss exponent.
    pub gamma: f64,
    /// Candidate BS heights; one is drawn uniformly per dataset element.
    pub bs_heights: Vec<f64>,
    pub user_height: f64,
    pub gain_bs: f64,
    pub gain_user: f64,
    pub wavelength: f64,
    pub geometry: Geometry,
}

impl Domain {
    /// Unit gains, 1.5 m users, 28 GHz carrier, BS heights 6..=12 m.
    pub fn new(layout: AntennaLayout, gamma: f64) -> Self {
        Self {
            layout,
            gamma,
            bs_heights: (6..=12).map(f64::from).collect(),
            user_height: 1.5,
            gain_bs: 1.0,
            gain_user: 1.0,
            wavelength: WAVELENGTH_28GHZ,
            geometry: Geometry::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.geometry.validate()?;
        if self.bs_heights.is_empty() {
            return Err(Error::InvalidConfig("bs_heights must be non-empty"));
        }
        if !(self.user_height > 0.0) {
            return Err(Error::InvalidConfig("user height must be positive"));
        }
        if self.bs_heights.iter().any(|&h| !(h > self.user_height)) {
            return Err(Error::InvalidConfig("every BS height must exceed the user height"));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::InvalidConfig("path-loss exponent must be >= 1"));
        }
        if !(self.gain_bs > 0.0 && self.gain_user > 0.0 && self.wavelength > 0.0) {
            return Err(Error::InvalidConfig("gains and wavelength must be positive"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("los n={} gamma={}", self.layout.label(), self.gamma)
    }
}

/// Geometric multipath surrogate for a ray-traced deployment site.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomainParams {
    pub layout: AntennaLayout,
    pub num_paths: usize,
    /// Mean power of path `p` (0-based) relative to LOS is `path_decay^p`.
    pub path_decay: f64,
    /// Std-dev of scattered-path angle offsets around the LOS direction, radians.
    pub angle_spread: f64,
    pub bs_height: f64,
    /// Path-loss exponent of the LOS term.
    pub gamma: f64,
    pub user_height: f64,
    pub gain_bs: f64,
    pub gain_user: f64,
    pub wavelength: f64,
    pub geometry: Geometry,
}

impl TargetDomainParams {
    pub fn new(layout: AntennaLayout) -> Self {
        Self {
            layout,
            num_paths: 3,
            path_decay: 0.5,
            angle_spread: 0.2,
            bs_height: 6.0,
            gamma: 2.0,
            user_height: 1.5,
            gain_bs: 1.0,
            gain_user: 1.0,
            wavelength: WAVELENGTH_28GHZ,
            geometry: Geometry { x_range: (15.0, 70.0), y_range: (-30.0, 30.0) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.as_los_domain().validate()?;
        if self.num_paths == 0 {
            return Err(Error::InvalidConfig("num_paths must be >= 1"));
        }
        if !(self.path_decay > 0.0) || !(self.angle_spread >= 0.0) {
            return Err(Error::InvalidConfig("path decay must be positive, spread non-negative"));
        }
        Ok(())
    }

    /// The LOS domain whose channel forms the first path.
    pub fn as_los_domain(&self) -> Domain {
        Domain {
            layout: self.layout,
            gamma: self.gamma,
            bs_heights: alloc::vec![self.bs_height],
            user_height: self.user_height,
            gain_bs: self.gain_bs,
            gain_user: self.gain_user,
            wavelength: self.wavelength,
            geometry: self.geometry,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "multipath n={} paths={} decay={} spread={}",
            self.layout.label(),
            self.num_paths,
            self.path_decay,
            self.angle_spread
        )
    }
}

/// A set of equally sized channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ChannelMatrix>,
    /// Identifier of the generating domain.
    pub label: String,
    /// Factor applied to the raw channels (1.0 if unnormalized).
    pub scale: f64,
}

impl Dataset {
    pub fn new(samples: Vec<ChannelMatrix>, label: String) -> Result<Self> {
        let ds = Self { samples, label, scale: 1.0 };
        ds.dims()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(N_T, N_U)` shared by all samples.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or(Error::Empty("dataset"))?;
        let dims = first.shape();
        for s in &self.samples {
            if s.shape() != dims {
                return Err(Error::ShapeMismatch { expected: dims.0 * dims.1, found: s.nrows() * s.ncols() });
            }
        }
        Ok(dims)
    }

    /// Multiplies every sample by `c` and folds `c` into `scale`.
    pub fn scaled(mut self, c: f64) -> Self {
        for s in &mut self.samples {
            *s *= Complex64::new(c, 0.0);
        }
        self.scale *= c;
        self
    }
}

/// Direction cosines of the arrival direction.
pub fn psi_components(phi: f64, theta: f64) -> (f64, f64, f64) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (st * cp, st * sp, ct)
}

/// Uniform linear phase progression `exp(j 2pi d k psi)`, `k = 0..n`.
pub fn steering_component(psi: f64, n: usize, d_over_lambda: f64) -> Vec<Complex64> {
    let step = 2.0 * PI * d_over_lambda * psi;
    (0..n)
        .map(|k| {
            if k == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                let (s, c) = (step * k as f64).sin_cos();
                Complex64::new(c, s)
            }
        })
        .collect()
}

/// Array response `w(psi_z) (x) w(psi_y) (x) w(psi_x)`.
pub fn array_response(phi: f64, theta: f64, layout: &AntennaLayout) -> DVector<Complex64> {
    let (px, py, pz) = psi_components(phi, theta);
    let wx = steering_component(px, layout.n_x, layout.d_over_lambda);
    let wy = steering_component(py, layout.n_y, layout.d_over_lambda);
    let wz = steering_component(pz, layout.n_z, layout.d_over_lambda);
    let mut out = Vec::with_capacity(layout.n_t());
    for z in &wz {
        for y in &wy {
            let zy = z * y;
            out.extend(wx.iter().map(|x| zy * x));
        }
    }
    DVector::from_vec(out)
}

/// Azimuth, elevation (from zenith), and 3-D distance of a user seen from
/// a BS at `(0, 0, bs_height)`.
pub fn arrival_geometry(user: [f64; 3], bs_height: f64) -> Result<(f64, f64, f64)> {
    let dz = user[2] - bs_height;
    let dist = (user[0] * user[0] + user[1] * user[1] + dz * dz).sqrt();
    if !(dist > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let phi = user[1].atan2(user[0]);
    let theta = (dz / dist).clamp(-1.0, 1.0).acos();
    Ok((phi, theta, dist))
}

/// Complex LOS gain multiplying the array response for a user at distance `dist`.
pub fn los_gain(domain: &Domain, bs_height: f64, dist: f64) -> Complex64 {
    let amp = (domain.gain_bs * domain.gain_user).sqrt() * (bs_height * domain.user_height)
        / (4.0 * PI * dist.powf(domain.gamma));
    let (s, c) = (2.0 * PI * dist / domain.wavelength).sin_cos();
    Complex64::new(amp * c, amp * s)
}

/// LOS channel of a single user.
pub fn los_channel(domain: &Domain, user: [f64; 3], bs_height: f64) -> Result<DVector<Complex64>> {
    let (phi, theta, dist) = arrival_geometry(user, bs_height)?;
    let g = los_gain(domain, bs_height, dist);
    Ok(array_response(phi, theta, &domain.layout) * g)
}

/// Draws `count` samples of `n_users` users each from a LOS domain.
pub fn sample_domain_batch<R: Rng + ?Sized>(
    domain: &Domain,
    count: usize,
    n_users: usize,
    rng: &mut R,
) -> Result<Dataset> {
    domain.validate()?;
    if count == 0 || n_users == 0 {
        return Err(Error::Empty("batch size and user count must be positive"));
    }
    let n_t = domain.layout.n_t();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let bs_height = domain.bs_heights[rng.random_range(0..domain.bs_heights.len())];
        let mut h = ChannelMatrix::zeros(n_t, n_users);
        for u in 0..n_users {
            let pos = domain.geometry.sample(domain.user_height, rng);
            h.set_column(u, &los_channel(domain, pos, bs_height)?);
        }
        samples.push(h);
    }
    Dataset::new(samples, domain.label())
}

/// One propagation path of the multipath surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    pub phi: f64,
    pub theta: f64,
}

/// Paths of a single user: index 0 is the LOS path, the rest are scattered
/// paths with Rayleigh gains of mean power `decay^p` relative to LOS and
/// Gaussian angle offsets.
pub fn multipath_components<R: Rng + ?Sized>(
    params: &TargetDomainParams,
    user: [f64; 3],
    rng: &mut R,
) -> Result<Vec<PathComponent>> {
    let los = params.as_los_domain();
    let (phi, theta, dist) = arrival_geometry(user, params.bs_height)?;
    let g0 = los_gain(&los, params.bs_height, dist);
    let mut paths = Vec::with_capacity(params.num_paths);
    paths.push(PathComponent { gain: g0, phi, theta });
    let los_amp = g0.norm();
    for p in 1..params.num_paths {
        let std = los_amp * params.path_decay.powi(p as i32).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let gain = Complex64::new(re, im) * (std / core::f64::consts::SQRT_2);
        let dphi: f64 = StandardNormal.sample(rng);
        let dtheta: f64 = StandardNormal.sample(rng);
        paths.push(PathComponent {
            gain,
            phi: phi + params.angle_spread * dphi,
            theta: theta + params.angle_spread * dtheta,
        });
    }
    Ok(paths)
}

/// Draws `count` samples from the multipath surrogate.
pub fn sample_target_batch<R: Rng + ?Sized>(
    params: &TargetDomainParams,
    count: usize,
    n_users: usize,
    rng: &mut R,
) -> Result<Dataset> {
    params.validate()?;
    if count == 0 || n_users == 0 {
        return Err(Error::Empty("batch size and user count must be positive"));
    }
    let n_t = params.layout.n_t();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut h = ChannelMatrix::zeros(n_t, n_users);
        for u in 0..n_users {
            let pos = params.geometry.sample(params.user_height, rng);
            let mut col = DVector::zeros(n_t);
            for path in multipath_components(params, pos, rng)? {
                col += array_response(path.phi, path.theta, &params.layout) * path.gain;
            }
            h.set_column(u, &col);
        }
        samples.push(h);
    }
    Dataset::new(samples, params.label())
}

/// Mean squared column norm over every user of every sample.
pub fn mean_column_power(d: &Dataset) -> f64 {
    let mut total = 0.0;
    let mut cols = 0usize;
    for s in &d.samples {
        total += s.iter().map(|z| z.norm_sqr()).sum::<f64>();
        cols += s.ncols();
    }
    total / cols as f64
}

/// Rescales so the mean squared column norm is one.
pub fn normalize_dataset(d: Dataset) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let p = mean_column_power(&d);
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::ZeroDataset);
    }
    let c = 1.0 / p.sqrt();
    Ok(d.scaled(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn psi_axis_cases() {
        let (x, y, z) = psi_components(0.0, 0.0);
        assert_eq!((x, y, z), (0.0, 0.0, 1.0));
        let (x, y, z) = psi_components(PI / 2.0, PI / 2.0);
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15 && z.abs() < 1e-15);
    }

    #[test]
    fn psi_matches_scalar_evaluation() {
        // sin(1.1)cos(0.7), sin(1.1)sin(0.7), cos(1.1)
        let expected = (0.681_632_986_593_423, 0.574_131_544_347_986_1, 0.453_596_121_425_577_3);
        let (x, y, z) = psi_components(0.7, 1.1);
        assert!((x - expected.0).abs() < 1e-12);
        assert!((y - expected.1).abs() < 1e-12);
        assert!((z - expected.2).abs() < 1e-12);
    }

    #[test]
    fn steering_small_cases() {
        assert_eq!(steering_component(0.37, 1, 0.5), alloc::vec![Complex64::new(1.0, 0.0)]);
        assert!(steering_component(0.0, 4, 0.5).iter().all(|z| *z == Complex64::new(1.0, 0.0)));
        let w = steering_component(0.5, 2, 0.5);
        assert_eq!(w[0], Complex64::new(1.0, 0.0));
        assert!(close(w[1], Complex64::new(0.0, 1.0), 1e-15));
    }

    #[test]
    fn array_response_trivial_layouts() {
        let a = array_response(0.4, 0.9, &AntennaLayout::new(1, 1, 1));
        assert_eq!(a.len(), 1);
        assert_eq!(a[0], Complex64::new(1.0, 0.0));
        let a = array_response(PI / 2.0, PI / 2.0, &AntennaLayout::new(4, 1, 1));
        assert!(a.iter().all(|z| close(*z, Complex64::new(1.0, 0.0), 1e-14)));
    }

    #[test]
    fn array_response_matches_double_loop() {
        let layout = AntennaLayout::new(2, 1, 2);
        let (phi, theta) = (0.3f64, 1.0f64);
        let a = array_response(phi, theta, &layout);
        let px = theta.sin() * phi.cos();
        let pz = theta.cos();
        let mut t = 0;
        for kz in 0..2 {
            for kx in 0..2 {
                let arg = PI * (kx as f64 * px + kz as f64 * pz);
                assert!(close(a[t], Complex64::new(arg.cos(), arg.sin()), 1e-12));
                t += 1;
            }
        }
    }

    #[test]
    fn los_unit_case_magnitude() {
        let mut d = Domain::new(AntennaLayout::new(1, 1, 1), 2.0);
        d.user_height = 1.0;
        assert!((los_gain(&d, 1.0, 1.0).norm() - 1.0 / (4.0 * PI)).abs() < 1e-15);
        // Full path: BS 1 m above the user gives x_u = 1 with l_BS = 2.
        let h = los_channel(&d, [0.0, 0.0, 1.0], 2.0).unwrap();
        assert!((h[0].norm() - 2.0 / (4.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn los_power_law() {
        let d = Domain::new(AntennaLayout::new(4, 1, 1), 2.0);
        let near = los_gain(&d, 6.0, 20.0).norm();
        let far = los_gain(&d, 6.0, 40.0).norm();
        assert!((near / far - 4.0).abs() < 1e-12);
    }

    #[test]
    fn los_full_instance_matches_scalar_formula() {
        let mut d = Domain::new(AntennaLayout::new(2, 2, 1), 1.7);
        d.bs_heights = alloc::vec![6.0];
        // Roughly 35 m away; the oracle recomputes the distance itself since
        // the carrier phase amplifies any rounding in x_u by 2pi/lambda.
        let user = [27.7676, 20.8257, 1.5];
        let h = los_channel(&d, user, 6.0).unwrap();
        let dist = (user[0] * user[0] + user[1] * user[1] + 4.5 * 4.5).sqrt();
        assert!((dist - 35.0).abs() < 0.01);
        let amp = 6.0 * 1.5 / (4.0 * PI * dist.powf(1.7));
        let carrier = 2.0 * PI * dist / WAVELENGTH_28GHZ;
        let cos_t = -4.5 / dist;
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let horiz = (user[0] * user[0] + user[1] * user[1]).sqrt();
        let (px, py) = (sin_t * user[0] / horiz, sin_t * user[1] / horiz);
        for (t, (ky, kx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let arg = carrier + PI * (kx as f64 * px + ky as f64 * py);
            let want = Complex64::new(amp * arg.cos(), amp * arg.sin());
            assert!((h[t] - want).norm() <= 1e-12 * amp, "t={t}");
        }
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let d = Domain::new(AntennaLayout::new(2, 1, 1), 2.0);
        assert_eq!(los_channel(&d, [0.0, 0.0, 6.0], 6.0), Err(Error::DegenerateGeometry));
    }

    #[test]
    fn batch_shape_and_determinism() {
        let d = Domain::new(AntennaLayout::new(4, 2, 1), 1.5);
        let one = sample_domain_batch(&d, 1, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.samples[0].shape(), (8, 1));
        let a = sample_domain_batch(&d, 5, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_domain_batch(&d, 5, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_domains_rejected() {
        let mut d = Domain::new(AntennaLayout::new(4, 1, 1), 2.0);
        d.bs_heights.clear();
        assert!(d.validate().is_err());
        let mut d = Domain::new(AntennaLayout::new(4, 1, 1), 0.5);
        assert!(d.validate().is_err());
        d.gamma = 2.0;
        d.bs_heights = alloc::vec![1.0];
        assert!(d.validate().is_err());
        assert!(AntennaLayout::new(0, 1, 1).validate().is_err());
    }

    #[test]
    fn single_path_target_is_los() {
        let mut t = TargetDomainParams::new(AntennaLayout::new(2, 2, 2));
        t.num_paths = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let user = [30.0, -4.0, 1.5];
        let paths = multipath_components(&t, user, &mut rng).unwrap();
        assert_eq!(paths.len(), 1);
        let los = los_channel(&t.as_los_domain(), user, t.bs_height).unwrap();
        let mp = array_response(paths[0].phi, paths[0].theta, &t.layout) * paths[0].gain;
        assert_eq!(los, mp);
    }

    #[test]
    fn normalize_fixed_point_and_homogeneity() {
        let d = Domain::new(AntennaLayout::new(4, 1, 1), 2.0);
        let raw = sample_domain_batch(&d, 20, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let n1 = normalize_dataset(raw.clone()).unwrap();
        assert!((mean_column_power(&n1) - 1.0).abs() < 1e-12);
        let n2 = normalize_dataset(n1.clone()).unwrap();
        assert!((n2.scale / n1.scale - 1.0).abs() < 1e-12);

        let mut fresh = n1.clone();
        fresh.scale = 1.0;
        assert!((normalize_dataset(fresh).unwrap().scale - 1.0).abs() < 1e-12);

        let mut tenfold = raw.clone().scaled(10.0);
        tenfold.scale = 1.0;
        let n10 = normalize_dataset(tenfold).unwrap();
        assert!((n1.scale / n10.scale - 10.0).abs() < 1e-9);
        for (a, b) in n1.samples.iter().zip(&n10.samples) {
            assert!((a - b).norm() < 1e-12 * a.norm());
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        let z = Dataset::new(alloc::vec![ChannelMatrix::zeros(2, 2)], "zero".into()).unwrap();
        assert_eq!(normalize_dataset(z), Err(Error::ZeroDataset));
    }
}
