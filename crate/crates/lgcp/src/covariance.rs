//! Exponential spatial covariance, the fixed-decay heuristic, Gaussian
//! process simulation, and the knot-based predictive-process machinery.
//!
//! Throughout, the correlation between two sites at distance `d` is
//! `exp(-d / phi)`; a 2x2 cross-covariance couples the two process
//! components, so joint covariances take the separable form
//! `Lambda (x) R` with `R` the spatial correlation matrix.

use crate::error::{Error, Result};
use crate::geometry::{pairwise_distances, Location, Window};
use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Correlation at distance `d` for decay range `phi`.
pub fn exp_correlation(d: f64, phi: f64) -> f64 {
    (-d / phi).exp()
}

/// Spatial correlation matrix over a set of sites.
pub fn correlation_matrix(locs: &[Location], phi: f64) -> DMatrix<f64> {
    let mut r = pairwise_distances(locs);
    r.apply(|d| *d = exp_correlation(*d, phi));
    r
}

// -ln(0.05) and -ln(0.95): the decay range is chosen so the correlation
// drops to 0.05 at the 95th percentile distance and sits at 0.95 at the
// 5th percentile distance.
const NEG_LN_005: f64 = 2.995732273553991;
const NEG_LN_095: f64 = 0.051293294387550536;

/// Fixes the decay range from the observed pattern: the average of the two
/// ranges implied by requiring correlation 0.05 at the 95th percentile of
/// pairwise distances and 0.95 at the 5th percentile.
pub fn fix_phi(locs: &[Location]) -> Result<f64> {
    if locs.len() < 2 {
        return Err(Error::invalid("need at least two locations to fix the decay range"));
    }
    let mut dists = Vec::with_capacity(locs.len() * (locs.len() - 1) / 2);
    for i in 0..locs.len() {
        for j in (i + 1)..locs.len() {
            dists.push(locs[i].distance(&locs[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d95 = quantile_sorted(&dists, 0.95);
    let d05 = quantile_sorted(&dists, 0.05);
    let phi = (d95 / NEG_LN_005 + d05 / NEG_LN_095) / 2.0;
    if !(phi.is_finite() && phi > 0.0) {
        return Err(Error::invalid(format!("degenerate pattern: fixed decay range {phi}")));
    }
    Ok(phi)
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n-1)p`). Input must be sorted ascending and non-empty.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cross-covariance between the two process components:
/// `[[s1^2, rho*s1*s2], [rho*s1*s2, s2^2]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl Lambda {
    pub fn new(sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        if !entry_ok(sigma1) || !entry_ok(sigma2) {
            return Err(Error::invalid("component scales must be finite and positive"));
        }
        if !rho.is_finite() || rho.abs() >= 1.0 {
            return Err(Error::invalid("cross-correlation must lie in (-1, 1)"));
        }
        Ok(Lambda { sigma1, sigma2, rho })
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        let c = self.rho * self.sigma1 * self.sigma2;
        Matrix2::new(self.sigma1 * self.sigma1, c, c, self.sigma2 * self.sigma2)
    }

    pub fn det(&self) -> f64 {
        (self.sigma1 * self.sigma2).powi(2) * (1.0 - self.rho * self.rho)
    }

    pub fn inverse(&self) -> Matrix2<f64> {
        let m = self.matrix();
        let d = self.det();
        Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / d
    }

    /// Closed-form lower Cholesky factor.
    pub fn chol_lower(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.sigma1,
            0.0,
            self.rho * self.sigma2,
            self.sigma2 * (1.0 - self.rho * self.rho).sqrt(),
        )
    }
}

fn entry_ok(s: f64) -> bool {
    s.is_finite() && s > 0.0
}

/// Joint covariance of the two components stacked component-major over the
/// given sites: block (a, b) is `Lambda[a,b] * R`.
pub fn build_covariance(locs: &[Location], phi: f64, lambda: &Lambda) -> DMatrix<f64> {
    kron2(&lambda.matrix(), &correlation_matrix(locs, phi))
}

/// Kronecker product of a 2x2 matrix with an m x m matrix.
pub fn kron2(a: &Matrix2<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = r.nrows();
    let mut out = DMatrix::zeros(2 * m, 2 * m);
    for bi in 0..2 {
        for bj in 0..2 {
            let s = a[(bi, bj)];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                for j in 0..m {
                    out[(bi * m + i, bj * m + j)] = s * r[(i, j)];
                }
            }
        }
    }
    out
}

// Diagonal jitter ladder: relative to the largest diagonal entry, starting
// at 1e-8 and escalating tenfold up to 1e-4.
const JITTER_STEPS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Lower Cholesky factor, retrying with escalating diagonal jitter when the
/// plain factorization fails. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let scale = mat.diagonal().amax();
    if let Some(ch) = mat.clone().cholesky() {
        return Ok((ch.unpack(), 0.0));
    }
    for step in JITTER_STEPS {
        let jitter = step * scale;
        let mut jittered = mat.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(ch) = jittered.cholesky() {
            return Ok((ch.unpack(), jitter));
        }
    }
    Err(Error::SingularCovariance {
        max_jitter: JITTER_STEPS[JITTER_STEPS.len() - 1] * scale,
    })
}

fn standard_normal_vector<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draws one mean-zero GP realization with variance `sigma2` at the sites.
pub fn simulate_gp<R: Rng>(
    locs: &[Location],
    phi: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (l, _) = cholesky_with_jitter(&correlation_matrix(locs, phi))?;
    let z = standard_normal_vector(locs.len(), rng);
    let w = l * z * sigma2.sqrt();
    Ok(w.as_slice().to_vec())
}

/// Draws one realization of the coupled pair of GPs at the sites. The two
/// components share the spatial correlation; `lambda` sets their scales and
/// cross-correlation. Uses `chol(L (x) R) = chol(L) (x) chol(R)`.
pub fn simulate_bivariate_gp<R: Rng>(
    locs: &[Location],
    phi: f64,
    lambda: &Lambda,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lr, _) = cholesky_with_jitter(&correlation_matrix(locs, phi))?;
    let ll = lambda.chol_lower();
    let z1 = &lr * standard_normal_vector(locs.len(), rng);
    let z2 = &lr * standard_normal_vector(locs.len(), rng);
    let w1 = &z1 * ll[(0, 0)];
    let w2 = &z1 * ll[(1, 0)] + &z2 * ll[(1, 1)];
    Ok((w1.as_slice().to_vec(), w2.as_slice().to_vec()))
}

/// Structural part of a GP model: fixed decay range and knot sites for the
/// predictive-process approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPSpec {
    pub phi: f64,
    pub knots: Vec<Location>,
}

impl GPSpec {
    pub fn new(phi: f64, knots: Vec<Location>) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return Err(Error::invalid("decay range must be finite and positive"));
        }
        if knots.is_empty() {
            return Err(Error::invalid("at least one knot is required"));
        }
        Ok(GPSpec { phi, knots })
    }
}

/// Precomputed knot-level quantities: the knot correlation matrix factored
/// once, reused for prior densities and for the interpolation transform.
#[derive(Debug, Clone)]
pub struct KnotSystem {
    knots: Vec<Location>,
    phi: f64,
    r_inv: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    ln_det_r: f64,
}

impl KnotSystem {
    pub fn new(spec: &GPSpec) -> Result<Self> {
        let r = correlation_matrix(&spec.knots, spec.phi);
        let (l, _) = cholesky_with_jitter(&r)?;
        let ln_det_r = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ident = DMatrix::identity(l.nrows(), l.nrows());
        // R^-1 = L^-T L^-1 via two triangular solves
        let linv = l
            .clone()
            .solve_lower_triangular(&ident)
            .ok_or(Error::SingularCovariance { max_jitter: 0.0 })?;
        let r_inv = linv.transpose() * &linv;
        Ok(KnotSystem {
            knots: spec.knots.clone(),
            phi: spec.phi,
            r_inv,
            chol_lower: l,
            ln_det_r,
        })
    }

    pub fn m(&self) -> usize {
        self.knots.len()
    }

    pub fn knots(&self) -> &[Location] {
        &self.knots
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Inverse of the knot correlation matrix.
    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// Lower Cholesky factor of the knot correlation matrix.
    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    /// Log-determinant of the knot correlation matrix.
    pub fn ln_det_r(&self) -> f64 {
        self.ln_det_r
    }

    /// Interpolation matrix `G = R_ts R_ss^-1` mapping knot values to the
    /// conditional-mean surface at the targets. `G` depends only on the
    /// geometry and decay range, not on the process scales, so one matrix
    /// serves every model variant and every sampler iteration.
    pub fn transform(&self, targets: &[Location]) -> DMatrix<f64> {
        let n = targets.len();
        let m = self.knots.len();
        let mut r_ts = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                r_ts[(i, j)] = exp_correlation(targets[i].distance(&self.knots[j]), self.phi);
            }
        }
        r_ts * &self.r_inv
    }

    /// Correlation vector between one target and the knots.
    pub fn corr_to_knots(&self, target: &Location) -> DVector<f64> {
        DVector::from_fn(self.m(), |j, _| {
            exp_correlation(target.distance(&self.knots[j]), self.phi)
        })
    }
}

/// Conditional-mean interpolation of knot values to target sites.
pub fn predictive_process(
    targets: &[Location],
    spec: &GPSpec,
    omega_star: &[f64],
) -> Result<Vec<f64>> {
    if omega_star.len() != spec.knots.len() {
        return Err(Error::invalid(format!(
            "knot values length {} does not match {} knots",
            omega_star.len(),
            spec.knots.len()
        )));
    }
    let sys = KnotSystem::new(spec)?;
    let g = sys.transform(targets);
    let w = g * DVector::from_column_slice(omega_star);
    Ok(w.as_slice().to_vec())
}

/// Default knot layout: a `g x g` grid of cell centers over the window's
/// bounding box with `g = floor(sqrt(m))`, keeping centers that fall inside
/// the window. Non-rectangular windows may yield fewer than `m` knots.
pub fn default_knots(window: &Window, m: usize) -> Result<Vec<Location>> {
    if m == 0 {
        return Err(Error::invalid("knot count must be positive"));
    }
    let g = (m as f64).sqrt().floor().max(1.0) as usize;
    let (lo, hi) = window.bbox();
    let dx = (hi.x - lo.x) / g as f64;
    let dy = (hi.y - lo.y) / g as f64;
    let mut knots = Vec::with_capacity(g * g);
    for iy in 0..g {
        for ix in 0..g {
            let s = Location::new(
                lo.x + (ix as f64 + 0.5) * dx,
                lo.y + (iy as f64 + 0.5) * dy,
            );
            if window.contains(&s) {
                knots.push(s);
            }
        }
    }
    if knots.is_empty() {
        return Err(Error::invalid(
            "no default knot centers fall inside the window; supply knots explicitly",
        ));
    }
    Ok(knots)
}

/// A realized surface: values of each process component at a set of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPRealization {
    pub sites: Vec<Location>,
    /// One value vector per component, each aligned with `sites`.
    pub components: Vec<Vec<f64>>,
}

impl GPRealization {
    pub fn new(sites: Vec<Location>, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("realization needs at least one component"));
        }
        for (k, c) in components.iter().enumerate() {
            if c.len() != sites.len() {
                return Err(Error::invalid(format!(
                    "component {k} has {} values for {} sites",
                    c.len(),
                    sites.len()
                )));
            }
        }
        Ok(GPRealization { sites, components })
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k]
    }
}
