//! Model specifications, parameter states, log-likelihoods, and priors.
//!
//! Two families are covered: the two-stage model (a location stage with a
//! log-linear intensity, then a mark stage with a logistic or linear
//! regression) and the per-mark intensity model (one intensity surface per
//! mark level, with nonspatial covariates entering the intensity). Spatial
//! random effects always enter through the knot-based conditional-mean
//! interpolation, never a full event-level covariance.
//!
//! The [`Evaluator`] caches design matrices and interpolation matrices once
//! per fit, and exposes block-wise recomputation so a sampler only pays for
//! the posterior pieces a proposal actually changes. Likelihood overflow
//! saturates to `-inf` (a sampler rejects such states) instead of erroring.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::covariance::{GPSpec, KnotSystem, Lambda};
use crate::error::{Error, Result};
use crate::geometry::{CovariateField, Location};
use crate::integration::{nonspatial_integral, IntegrationScheme, NonspatialBound};
use crate::simulate::PointPattern;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which spatial random effects a two-stage model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomEffects {
    /// Neither stage has a spatial random effect.
    None,
    /// Location stage only.
    LocationOnly,
    /// Both stages, independent processes.
    Independent,
    /// Both stages, coupled through a cross-covariance.
    Coupled,
}

impl RandomEffects {
    pub fn has_stage1(self) -> bool {
        self != RandomEffects::None
    }

    pub fn has_stage2(self) -> bool {
        matches!(self, RandomEffects::Independent | RandomEffects::Coupled)
    }
}

/// Mark-stage regression family of the two-stage model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarkLink {
    /// Binary marks through a logit link; no noise-scale parameter.
    Logistic,
    /// Continuous marks with iid normal noise of scale `sigma_iid`.
    Linear,
}

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    TwoStage { effects: RandomEffects, link: MarkLink },
    PerMark { with_gp: bool },
}

/// Full model description: family, covariate selection by name, and the
/// GP structure when the family carries random effects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Field covariates entering the location stage (both marks share these
    /// in the per-mark family).
    pub stage1_vars: Vec<String>,
    /// Field covariates entering the mark stage (two-stage family only).
    pub stage2_vars: Vec<String>,
    /// Names of the nonspatial covariates carried by the events.
    pub nu_names: Vec<String>,
    pub gp: Option<GPSpec>,
}

/// Per-parameter sampling treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    /// Unconstrained coefficient.
    Free,
    /// Positive scale, sampled on the log scale.
    Scale,
    /// Correlation in (-1, 1), sampled on the Fisher-z scale.
    Correlation,
}

/// Dimension summary used to lay out flattened states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub p1: usize,
    pub p2: usize,
    pub p_nu: usize,
    /// Knot count (0 without a GP).
    pub m: usize,
    pub has_sigma_iid: bool,
    pub has_sigma1: bool,
    pub has_sigma2: bool,
    pub has_rho: bool,
    /// Number of random-effect components (0, 1, or 2).
    pub omega_components: usize,
}

impl ModelSpec {
    pub fn requires_gp(&self) -> bool {
        match self.family {
            ModelFamily::TwoStage { effects, .. } => effects.has_stage1(),
            ModelFamily::PerMark { with_gp } => with_gp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.requires_gp() && self.gp.is_none() {
            return Err(Error::invalid(
                "model carries spatial random effects but no GP structure was given",
            ));
        }
        if !self.requires_gp() && self.gp.is_some() {
            return Err(Error::invalid(
                "model has no spatial random effects; remove the GP structure",
            ));
        }
        if matches!(self.family, ModelFamily::PerMark { .. }) && !self.stage2_vars.is_empty() {
            return Err(Error::invalid(
                "the per-mark family has no mark stage; stage-2 covariates do not apply",
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        let m = self.gp.as_ref().map_or(0, |g| g.knots.len());
        match self.family {
            ModelFamily::TwoStage { effects, link } => ModelDims {
                p1: self.stage1_vars.len(),
                p2: self.stage2_vars.len(),
                p_nu: self.nu_names.len(),
                m,
                has_sigma_iid: link == MarkLink::Linear,
                has_sigma1: effects.has_stage1(),
                has_sigma2: effects.has_stage2(),
                has_rho: effects == RandomEffects::Coupled,
                omega_components: match effects {
                    RandomEffects::None => 0,
                    RandomEffects::LocationOnly => 1,
                    _ => 2,
                },
            },
            ModelFamily::PerMark { with_gp } => ModelDims {
                p1: self.stage1_vars.len(),
                p2: 0,
                p_nu: self.nu_names.len(),
                m,
                has_sigma_iid: false,
                has_sigma1: with_gp,
                has_sigma2: with_gp,
                has_rho: with_gp,
                omega_components: if with_gp { 2 } else { 0 },
            },
        }
    }

    /// Names of the scalar parameters, in flattened order (random-effect
    /// knot values follow these in a flattened state).
    pub fn scalar_names(&self) -> Vec<String> {
        let d = self.dims();
        let mut names = Vec::new();
        match self.family {
            ModelFamily::TwoStage { .. } => {
                names.push("beta0".to_string());
                names.extend(self.stage1_vars.iter().map(|v| format!("beta_{v}")));
                names.extend(self.stage2_vars.iter().map(|v| format!("gamma_{v}")));
                names.push("alpha0".to_string());
                names.extend(self.nu_names.iter().map(|v| format!("alpha_{v}")));
            }
            ModelFamily::PerMark { .. } => {
                for k in 1..=2 {
                    names.push(format!("beta{k}_0"));
                    names.extend(self.stage1_vars.iter().map(|v| format!("beta{k}_{v}")));
                }
                for k in 1..=2 {
                    names.extend(self.nu_names.iter().map(|v| format!("alpha{k}_{v}")));
                }
            }
        }
        if d.has_sigma_iid {
            names.push("sigma_iid".to_string());
        }
        if d.has_sigma1 {
            names.push("sigma1".to_string());
        }
        if d.has_sigma2 {
            names.push("sigma2".to_string());
        }
        if d.has_rho {
            names.push("rho".to_string());
        }
        names
    }

    /// Sampling treatment of each scalar, aligned with `scalar_names`.
    pub fn scalar_kinds(&self) -> Vec<ScalarKind> {
        let d = self.dims();
        let n_coef = match self.family {
            ModelFamily::TwoStage { .. } => 1 + d.p1 + d.p2 + 1 + d.p_nu,
            ModelFamily::PerMark { .. } => 2 * (1 + d.p1) + 2 * d.p_nu,
        };
        let mut kinds = vec![ScalarKind::Free; n_coef];
        for _ in 0..(usize::from(d.has_sigma_iid)
            + usize::from(d.has_sigma1)
            + usize::from(d.has_sigma2))
        {
            kinds.push(ScalarKind::Scale);
        }
        if d.has_rho {
            kinds.push(ScalarKind::Correlation);
        }
        kinds
    }

    /// Names of all flattened parameters for a single-pattern fit: scalars,
    /// then knot values.
    pub fn param_names(&self) -> Vec<String> {
        self.param_names_for(1)
    }

    /// [`param_names`](Self::param_names) for a joint fit of `n_replicates`
    /// patterns: each random-effect component carries one set of knot values
    /// per replicate, so the knot names gain a replicate tag when there is
    /// more than one.
    pub fn param_names_for(&self, n_replicates: usize) -> Vec<String> {
        let d = self.dims();
        let mut names = self.scalar_names();
        for c in 1..=d.omega_components {
            for r in 1..=n_replicates {
                for j in 1..=d.m {
                    if n_replicates == 1 {
                        names.push(format!("omega{c}_{j}"));
                    } else {
                        names.push(format!("omega{c}_r{r}_{j}"));
                    }
                }
            }
        }
        names
    }

    /// Default chain start: coefficients 0, scales 1, correlation 0,
    /// knot values 0.
    pub fn initial_state(&self) -> Result<ParameterState> {
        self.initial_state_for(1)
    }

    /// [`initial_state`](Self::initial_state) laid out for a joint fit of
    /// `n_replicates` patterns.
    pub fn initial_state_for(&self, n_replicates: usize) -> Result<ParameterState> {
        self.validate()?;
        let d = self.dims();
        let flat_len =
            self.scalar_names().len() + d.omega_components * n_replicates * d.m;
        let kinds = self.scalar_kinds();
        let mut flat = vec![0.0; flat_len];
        for (i, k) in kinds.iter().enumerate() {
            if *k == ScalarKind::Scale {
                flat[i] = 1.0;
            }
        }
        self.state_from_flat_for(&flat, n_replicates)
    }

    /// Rebuilds a typed state from its flattened form (see `param_names`
    /// for the ordering).
    pub fn state_from_flat(&self, flat: &[f64]) -> Result<ParameterState> {
        self.state_from_flat_for(flat, 1)
    }

    /// [`state_from_flat`](Self::state_from_flat) for a joint fit of
    /// `n_replicates` patterns: each random-effect component holds the
    /// replicates' knot values back to back.
    pub fn state_from_flat_for(
        &self,
        flat: &[f64],
        n_replicates: usize,
    ) -> Result<ParameterState> {
        if n_replicates == 0 {
            return Err(Error::invalid("at least one replicate is required"));
        }
        let d = self.dims();
        let m_all = n_replicates * d.m;
        let expected = self.scalar_names().len() + d.omega_components * m_all;
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "flattened state has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        let state = match self.family {
            ModelFamily::TwoStage { .. } => {
                let beta = take(1 + d.p1);
                let gamma = take(d.p2);
                let alpha = take(1 + d.p_nu);
                let sigma_iid = d.has_sigma_iid.then(|| take(1)[0]);
                let sigma1 = d.has_sigma1.then(|| take(1)[0]);
                let sigma2 = d.has_sigma2.then(|| take(1)[0]);
                let rho = d.has_rho.then(|| take(1)[0]);
                let omega1 = if d.omega_components >= 1 { take(m_all) } else { Vec::new() };
                let omega2 = if d.omega_components >= 2 { take(m_all) } else { Vec::new() };
                ParameterState::TwoStage(TwoStageState {
                    beta,
                    gamma,
                    alpha,
                    sigma_iid,
                    sigma1,
                    sigma2,
                    rho,
                    omega1,
                    omega2,
                })
            }
            ModelFamily::PerMark { with_gp } => {
                let beta1 = take(1 + d.p1);
                let beta2 = take(1 + d.p1);
                let alpha1 = take(d.p_nu);
                let alpha2 = take(d.p_nu);
                let (sigma, rho, omega) = if with_gp {
                    let s1 = take(1)[0];
                    let s2 = take(1)[0];
                    let r = take(1)[0];
                    let o1 = take(m_all);
                    let o2 = take(m_all);
                    (Some((s1, s2)), Some(r), [o1, o2])
                } else {
                    (None, None, [Vec::new(), Vec::new()])
                };
                ParameterState::PerMark(PerMarkState {
                    beta: [beta1, beta2],
                    alpha: [alpha1, alpha2],
                    sigma,
                    rho,
                    omega,
                })
            }
        };
        Ok(state)
    }
}

/// Parameters of a two-stage model. `beta[0]` and `alpha[0]` are the
/// stage intercepts; `gamma` has no intercept.
///
/// When several replicate patterns are fitted jointly, every replicate
/// carries its own random-effect surface: `omega1`/`omega2` hold the
/// replicates' knot values back to back (`R * m` entries for `R`
/// replicates), while the scalar parameters are shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma_iid: Option<f64>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub rho: Option<f64>,
    pub omega1: Vec<f64>,
    pub omega2: Vec<f64>,
}

/// Parameters of a per-mark intensity model. `beta[k][0]` is mark
/// `k+1`'s intercept; `alpha[k]` has no intercept. As in
/// [`TwoStageState`], `omega[k]` stacks one set of knot values per fitted
/// replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerMarkState {
    pub beta: [Vec<f64>; 2],
    pub alpha: [Vec<f64>; 2],
    pub sigma: Option<(f64, f64)>,
    pub rho: Option<f64>,
    pub omega: [Vec<f64>; 2],
}

/// Parameters of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParameterState {
    TwoStage(TwoStageState),
    PerMark(PerMarkState),
}

impl ParameterState {
    /// Flattened values in `param_names` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        match self {
            ParameterState::TwoStage(s) => {
                flat.extend(&s.beta);
                flat.extend(&s.gamma);
                flat.extend(&s.alpha);
                flat.extend(s.sigma_iid);
                flat.extend(s.sigma1);
                flat.extend(s.sigma2);
                flat.extend(s.rho);
                flat.extend(&s.omega1);
                flat.extend(&s.omega2);
            }
            ParameterState::PerMark(s) => {
                flat.extend(&s.beta[0]);
                flat.extend(&s.beta[1]);
                flat.extend(&s.alpha[0]);
                flat.extend(&s.alpha[1]);
                if let Some((s1, s2)) = s.sigma {
                    flat.push(s1);
                    flat.push(s2);
                }
                flat.extend(s.rho);
                flat.extend(&s.omega[0]);
                flat.extend(&s.omega[1]);
            }
        }
        flat
    }
}

const LN_2PI: f64 = 1.8378770664093453;
// Normal(0, 100) prior on every regression coefficient.
const COEF_PRIOR_VAR: f64 = 100.0;
// Inverse-gamma(shape 2, scale 1/2) prior on every scale parameter; with
// shape 2 the normalizing Gamma term vanishes.
const IG_SHAPE: f64 = 2.0;
const IG_SCALE: f64 = 0.5;
// Uniform prior support for the cross-correlation.
pub const RHO_BOUND: f64 = 0.999;

fn coef_logprior(x: f64) -> f64 {
    -0.5 * (LN_2PI + COEF_PRIOR_VAR.ln()) - x * x / (2.0 * COEF_PRIOR_VAR)
}

/// Inverse-gamma(2, 1/2) log density; `-inf` outside the support.
pub(crate) fn scale_logprior(x: f64) -> f64 {
    if !(x.is_finite() && x > 0.0) {
        return f64::NEG_INFINITY;
    }
    IG_SHAPE * IG_SCALE.ln() - (IG_SHAPE + 1.0) * x.ln() - IG_SCALE / x
}

fn rho_logprior(r: f64) -> f64 {
    if !(r.is_finite() && r.abs() < RHO_BOUND) {
        return f64::NEG_INFINITY;
    }
    -(2.0 * RHO_BOUND).ln()
}

/// A log-likelihood total with one contribution per event (replicates
/// concatenated in order). Each event's entry carries an equal share of
/// its replicate's intensity integral, so the entries of a non-empty
/// replicate sum to that replicate's likelihood.
#[derive(Debug, Clone)]
pub struct LogLik {
    pub total: f64,
    pub pointwise: Vec<f64>,
}

/// Additive pieces of the log posterior, split so a sampler can refresh
/// only what a proposal touches. For the two-stage family `lik1`/`lik2`
/// are the location/mark stages; for the per-mark family they are the
/// mark-1/mark-2 intensity terms.
#[derive(Debug, Clone, Copy)]
pub struct Parts {
    pub lik1: f64,
    pub lik2: f64,
    pub gp_prior: f64,
    pub scalar_prior: f64,
}

impl Parts {
    pub fn total(&self) -> f64 {
        self.lik1 + self.lik2 + self.gp_prior + self.scalar_prior
    }
}

/// Which posterior pieces a proposal invalidates (the scalar prior is
/// always recomputed — it is a handful of closed-form terms).
#[derive(Debug, Clone, Copy)]
pub struct Touch {
    pub lik1: bool,
    pub lik2: bool,
    pub gp: bool,
}

// Logistic success probabilities are clamped to this band.
const PROB_CLAMP: f64 = 1e-12;

struct RepEvents {
    n: usize,
    /// Stage-1 design (intercept column first), events by rows.
    x1: DMatrix<f64>,
    /// Stage-2 spatial design (no intercept), two-stage family only.
    x2: DMatrix<f64>,
    /// Nonspatial covariates, events by rows.
    nu: DMatrix<f64>,
    marks: Vec<f64>,
    /// Mark level as 0/1 index (per-mark family).
    mark_level: Vec<usize>,
    /// Interpolation matrix from knots to event locations.
    g: Option<DMatrix<f64>>,
}

/// Likelihood/prior evaluator with cached designs, shared across sampler
/// iterations and chains. Evaluation is pure given a state.
pub struct Evaluator {
    spec: ModelSpec,
    dims: ModelDims,
    knots: Option<KnotSystem>,
    reps: Vec<RepEvents>,
    /// Stage-1 design at integration points.
    x1_scheme: DMatrix<f64>,
    g_scheme: Option<DMatrix<f64>>,
    weights: Vec<f64>,
    bounds: Vec<NonspatialBound>,
    clamp_count: AtomicU64,
    clamp_warned: AtomicBool,
}

fn design_at(
    field: &CovariateField,
    locs: &[Location],
    var_idx: &[usize],
    intercept: bool,
) -> Result<DMatrix<f64>> {
    let p = var_idx.len() + usize::from(intercept);
    let mut x = DMatrix::zeros(locs.len(), p);
    for (i, s) in locs.iter().enumerate() {
        let z = field.covariates_at(s)?;
        let mut c = 0;
        if intercept {
            x[(i, c)] = 1.0;
            c += 1;
        }
        for &v in var_idx {
            x[(i, c)] = z[v];
            c += 1;
        }
    }
    Ok(x)
}

fn resolve_vars(field: &CovariateField, vars: &[String]) -> Result<Vec<usize>> {
    vars.iter()
        .map(|v| {
            field
                .names()
                .iter()
                .position(|n| n == v)
                .ok_or_else(|| Error::invalid(format!("covariate '{v}' not found in the field")))
        })
        .collect()
}

impl Evaluator {
    /// Builds the cached designs for one or more replicate patterns fitted
    /// jointly. Replicates share every scalar parameter but each carries
    /// its own random-effect surface (independent draws from the same GP
    /// prior), so states must use the stacked layout described on
    /// [`TwoStageState`] — build them through
    /// [`initial_state`](Self::initial_state) /
    /// [`state_from_flat`](Self::state_from_flat) on the evaluator rather
    /// than the single-pattern forms on [`ModelSpec`]. All patterns must
    /// share the window, mark convention, and nonspatial covariate
    /// dimension; `bounds` are required by the per-mark family and ignored
    /// by the two-stage family.
    pub fn new(
        spec: ModelSpec,
        field: &CovariateField,
        patterns: &[&PointPattern],
        scheme: &IntegrationScheme,
        bounds: &[NonspatialBound],
    ) -> Result<Self> {
        spec.validate()?;
        if patterns.is_empty() {
            return Err(Error::invalid("at least one pattern is required"));
        }
        let dims = spec.dims();
        let idx1 = resolve_vars(field, &spec.stage1_vars)?;
        let idx2 = resolve_vars(field, &spec.stage2_vars)?;
        let per_mark = matches!(spec.family, ModelFamily::PerMark { .. });
        if per_mark {
            if bounds.len() != dims.p_nu {
                return Err(Error::invalid(format!(
                    "{} nonspatial range(s) given for {} covariate(s)",
                    bounds.len(),
                    dims.p_nu
                )));
            }
            for (j, b) in bounds.iter().enumerate() {
                b.validate(j)?;
            }
        }

        let knots = spec.gp.as_ref().map(KnotSystem::new).transpose()?;

        let mut reps = Vec::with_capacity(patterns.len());
        for pattern in patterns {
            if pattern.nu_dim() != dims.p_nu {
                return Err(Error::invalid(format!(
                    "pattern carries {} nonspatial covariate(s), model names {}",
                    pattern.nu_dim(),
                    dims.p_nu
                )));
            }
            let locs = pattern.locations();
            let marks = pattern.marks()?;
            let mut mark_level = Vec::new();
            match spec.family {
                ModelFamily::TwoStage { link: MarkLink::Logistic, .. } => {
                    for (i, &m) in marks.iter().enumerate() {
                        if m != 0.0 && m != 1.0 {
                            return Err(Error::InvalidMark {
                                index: i,
                                mark: Some(m),
                                expected: "0 or 1",
                            });
                        }
                    }
                }
                ModelFamily::TwoStage { link: MarkLink::Linear, .. } => {
                    for (i, &m) in marks.iter().enumerate() {
                        if !m.is_finite() {
                            return Err(Error::InvalidMark {
                                index: i,
                                mark: Some(m),
                                expected: "a finite value",
                            });
                        }
                    }
                }
                ModelFamily::PerMark { .. } => {
                    mark_level = marks
                        .iter()
                        .enumerate()
                        .map(|(i, &m)| {
                            if m == 1.0 {
                                Ok(0)
                            } else if m == 2.0 {
                                Ok(1)
                            } else {
                                Err(Error::InvalidMark {
                                    index: i,
                                    mark: Some(m),
                                    expected: "1 or 2",
                                })
                            }
                        })
                        .collect::<Result<_>>()?;
                }
            }
            let n = pattern.n();
            let mut nu = DMatrix::zeros(n, dims.p_nu);
            for (i, e) in pattern.events().iter().enumerate() {
                for j in 0..dims.p_nu {
                    nu[(i, j)] = e.nu[j];
                }
            }
            reps.push(RepEvents {
                n,
                x1: design_at(field, &locs, &idx1, true)?,
                x2: design_at(field, &locs, &idx2, false)?,
                nu,
                marks,
                mark_level,
                g: knots.as_ref().map(|k| k.transform(&locs)),
            });
        }

        Ok(Evaluator {
            dims,
            x1_scheme: design_at(field, scheme.points(), &idx1, true)?,
            g_scheme: knots.as_ref().map(|k| k.transform(scheme.points())),
            weights: scheme.weights().to_vec(),
            bounds: if per_mark { bounds.to_vec() } else { Vec::new() },
            knots,
            reps,
            spec,
            clamp_count: AtomicU64::new(0),
            clamp_warned: AtomicBool::new(false),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// The knot system backing the random effects, when the model has any.
    pub fn knot_system(&self) -> Option<&KnotSystem> {
        self.knots.as_ref()
    }

    pub fn n_replicates(&self) -> usize {
        self.reps.len()
    }

    pub fn n_events(&self) -> usize {
        self.reps.iter().map(|r| r.n).sum()
    }

    /// Parameter names for this fit's replicate count (see
    /// [`ModelSpec::param_names_for`]).
    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_names_for(self.reps.len())
    }

    /// Default chain start laid out for this fit's replicate count.
    pub fn initial_state(&self) -> Result<ParameterState> {
        self.spec.initial_state_for(self.reps.len())
    }

    /// Rebuilds a typed state from its flattened form, laid out for this
    /// fit's replicate count.
    pub fn state_from_flat(&self, flat: &[f64]) -> Result<ParameterState> {
        self.spec.state_from_flat_for(flat, self.reps.len())
    }

    /// Knot values of replicate `r` within a stacked random-effect vector.
    fn rep_slice<'a>(&self, omega: &'a [f64], r: usize) -> &'a [f64] {
        &omega[r * self.dims.m..(r + 1) * self.dims.m]
    }

    /// How many logistic probabilities have been clamped so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    fn note_clamped(&self, count: u64) {
        if count == 0 {
            return;
        }
        self.clamp_count.fetch_add(count, Ordering::Relaxed);
        if !self.clamp_warned.swap(true, Ordering::Relaxed) {
            log::warn!(
                "logistic success probability hit the [{PROB_CLAMP}, 1-{PROB_CLAMP}] clamp; \
                 further occurrences are counted silently"
            );
        }
    }

    /// `sum_j w_j exp(f_j)`, saturating to `+inf` on overflow.
    fn weighted_exp_sum(&self, f: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w * f[j].exp();
        }
        acc
    }

    // ----- two-stage pieces -------------------------------------------

    fn two_stage_f1_scheme(&self, s: &TwoStageState, r: usize) -> DVector<f64> {
        let beta = DVector::from_column_slice(&s.beta);
        let mut f = &self.x1_scheme * beta;
        if let (Some(g), true) = (&self.g_scheme, !s.omega1.is_empty()) {
            f += g * DVector::from_column_slice(self.rep_slice(&s.omega1, r));
        }
        f
    }

    /// Intensity integral of each replicate. Replicates differ only
    /// through their own random-effect surfaces, so without any the value
    /// is computed once and shared.
    fn two_stage_integrals(&self, s: &TwoStageState) -> Vec<f64> {
        if self.g_scheme.is_none() || s.omega1.is_empty() {
            let shared = self.weighted_exp_sum(&self.two_stage_f1_scheme(s, 0));
            return vec![shared; self.reps.len()];
        }
        (0..self.reps.len())
            .map(|r| self.weighted_exp_sum(&self.two_stage_f1_scheme(s, r)))
            .collect()
    }

    fn two_stage_f1_events(&self, r: usize, s: &TwoStageState) -> DVector<f64> {
        let rep = &self.reps[r];
        let beta = DVector::from_column_slice(&s.beta);
        let mut f = &rep.x1 * beta;
        if let (Some(g), true) = (&rep.g, !s.omega1.is_empty()) {
            f += g * DVector::from_column_slice(self.rep_slice(&s.omega1, r));
        }
        f
    }

    fn two_stage_eta(&self, r: usize, s: &TwoStageState) -> DVector<f64> {
        let rep = &self.reps[r];
        let mut eta = DVector::from_element(rep.n, s.alpha[0]);
        if !s.gamma.is_empty() {
            eta += &rep.x2 * DVector::from_column_slice(&s.gamma);
        }
        if s.alpha.len() > 1 {
            eta += &rep.nu * DVector::from_column_slice(&s.alpha[1..]);
        }
        if let (Some(g), true) = (&rep.g, !s.omega2.is_empty()) {
            eta += g * DVector::from_column_slice(self.rep_slice(&s.omega2, r));
        }
        eta
    }

    /// Per-event mark-stage log densities of replicate `r`.
    fn two_stage_mark_terms(&self, r: usize, s: &TwoStageState) -> Vec<f64> {
        let rep = &self.reps[r];
        let eta = self.two_stage_eta(r, s);
        match self.spec.family {
            ModelFamily::TwoStage { link: MarkLink::Logistic, .. } => {
                let mut clamped = 0u64;
                let out = (0..rep.n)
                    .map(|i| {
                        let mut p = 1.0 / (1.0 + (-eta[i]).exp());
                        if p < PROB_CLAMP {
                            p = PROB_CLAMP;
                            clamped += 1;
                        } else if p > 1.0 - PROB_CLAMP {
                            p = 1.0 - PROB_CLAMP;
                            clamped += 1;
                        }
                        if rep.marks[i] > 0.5 {
                            p.ln()
                        } else {
                            (1.0 - p).ln()
                        }
                    })
                    .collect();
                self.note_clamped(clamped);
                out
            }
            ModelFamily::TwoStage { link: MarkLink::Linear, .. } => {
                let sigma = s.sigma_iid.unwrap_or(f64::NAN);
                if !(sigma.is_finite() && sigma > 0.0) {
                    return vec![f64::NEG_INFINITY; rep.n];
                }
                let norm = -0.5 * (LN_2PI + 2.0 * sigma.ln());
                (0..rep.n)
                    .map(|i| {
                        let r = rep.marks[i] - eta[i];
                        norm - r * r / (2.0 * sigma * sigma)
                    })
                    .collect()
            }
            ModelFamily::PerMark { .. } => unreachable!("two-stage path"),
        }
    }

    // ----- per-mark pieces --------------------------------------------

    /// `(per-replicate S_k * F_k, per-event log intensities for mark k)`.
    fn per_mark_pieces(&self, s: &PerMarkState, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let beta = DVector::from_column_slice(&s.beta[k]);
        let alpha = &s.alpha[k];
        let omega = &s.omega[k];

        let nonspatial = nonspatial_integral(&self.bounds, alpha).unwrap_or(f64::INFINITY);
        let base_scheme = &self.x1_scheme * &beta;
        let integrals: Vec<f64> = match (&self.g_scheme, omega.is_empty()) {
            (Some(g), false) => (0..self.reps.len())
                .map(|r| {
                    let f =
                        &base_scheme + g * DVector::from_column_slice(self.rep_slice(omega, r));
                    self.weighted_exp_sum(&f) * nonspatial
                })
                .collect(),
            _ => vec![self.weighted_exp_sum(&base_scheme) * nonspatial; self.reps.len()],
        };

        let mut event_terms = Vec::with_capacity(self.reps.len());
        for (r, rep) in self.reps.iter().enumerate() {
            let mut f = &rep.x1 * &beta;
            if !alpha.is_empty() {
                f += &rep.nu * DVector::from_column_slice(alpha);
            }
            if let (Some(g), true) = (&rep.g, !omega.is_empty()) {
                f += g * DVector::from_column_slice(self.rep_slice(omega, r));
            }
            event_terms.push(
                (0..rep.n)
                    .map(|i| if rep.mark_level[i] == k { f[i] } else { 0.0 })
                    .collect(),
            );
        }
        (integrals, event_terms)
    }

    fn per_mark_lik(&self, s: &PerMarkState, k: usize) -> f64 {
        let (sf, event_terms) = self.per_mark_pieces(s, k);
        let mut total = -sf.iter().sum::<f64>();
        for (rep, terms) in self.reps.iter().zip(&event_terms) {
            for i in 0..rep.n {
                if rep.mark_level[i] == k {
                    total += terms[i];
                }
            }
        }
        total
    }

    // ----- posterior parts --------------------------------------------

    fn lik1(&self, state: &ParameterState) -> f64 {
        match state {
            ParameterState::TwoStage(s) => {
                let integrals = self.two_stage_integrals(s);
                if integrals.iter().any(|v| !v.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                (0..self.reps.len())
                    .map(|r| self.two_stage_f1_events(r, s).sum() - integrals[r])
                    .sum()
            }
            ParameterState::PerMark(s) => {
                let v = self.per_mark_lik(s, 0);
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            }
        }
    }

    fn lik2(&self, state: &ParameterState) -> f64 {
        match state {
            ParameterState::TwoStage(s) => (0..self.reps.len())
                .map(|r| self.two_stage_mark_terms(r, s).iter().sum::<f64>())
                .sum(),
            ParameterState::PerMark(s) => {
                let v = self.per_mark_lik(s, 1);
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            }
        }
    }

    /// Log density of the knot values under their GP prior.
    fn gp_prior(&self, state: &ParameterState) -> f64 {
        let Some(knots) = &self.knots else {
            return 0.0;
        };
        gp_logprior(knots, state)
    }

    fn scalar_prior(&self, state: &ParameterState) -> f64 {
        scalar_logprior_of(state)
    }

    pub fn full_parts(&self, state: &ParameterState) -> Result<Parts> {
        self.check_state(state)?;
        Ok(Parts {
            lik1: self.lik1(state),
            lik2: self.lik2(state),
            gp_prior: self.gp_prior(state),
            scalar_prior: self.scalar_prior(state),
        })
    }

    /// Recomputes only the pieces named in `touch` (plus the scalar prior,
    /// which is always cheap), carrying the rest over from `base`.
    pub fn refresh(&self, state: &ParameterState, base: &Parts, touch: Touch) -> Parts {
        Parts {
            lik1: if touch.lik1 { self.lik1(state) } else { base.lik1 },
            lik2: if touch.lik2 { self.lik2(state) } else { base.lik2 },
            gp_prior: if touch.gp { self.gp_prior(state) } else { base.gp_prior },
            scalar_prior: self.scalar_prior(state),
        }
    }

    /// Log prior of the state (scalar priors plus the GP density).
    pub fn logprior(&self, state: &ParameterState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.scalar_prior(state) + self.gp_prior(state))
    }

    /// Total log-likelihood and per-event contributions.
    pub fn loglik(&self, state: &ParameterState) -> Result<LogLik> {
        self.check_state(state)?;
        match state {
            ParameterState::TwoStage(s) => {
                let integrals = self.two_stage_integrals(s);
                let mut total = 0.0;
                let mut pointwise = Vec::with_capacity(self.n_events());
                for (r, rep) in self.reps.iter().enumerate() {
                    let f1 = self.two_stage_f1_events(r, s);
                    let mark_terms = self.two_stage_mark_terms(r, s);
                    total += f1.sum() - integrals[r] + mark_terms.iter().sum::<f64>();
                    let share = integrals[r] / rep.n as f64;
                    for i in 0..rep.n {
                        pointwise.push(f1[i] - share + mark_terms[i]);
                    }
                }
                Ok(LogLik { total, pointwise })
            }
            ParameterState::PerMark(s) => {
                let (sf1, terms1) = self.per_mark_pieces(s, 0);
                let (sf2, terms2) = self.per_mark_pieces(s, 1);
                let mut total = 0.0;
                let mut pointwise = Vec::with_capacity(self.n_events());
                for (r, rep) in self.reps.iter().enumerate() {
                    let integral = sf1[r] + sf2[r];
                    total -= integral;
                    let share = integral / rep.n as f64;
                    for i in 0..rep.n {
                        let event_term = if rep.mark_level[i] == 0 {
                            terms1[r][i]
                        } else {
                            terms2[r][i]
                        };
                        total += event_term;
                        pointwise.push(event_term - share);
                    }
                }
                Ok(LogLik { total, pointwise })
            }
        }
    }

    fn check_state(&self, state: &ParameterState) -> Result<()> {
        let d = &self.dims;
        let m_all = self.reps.len() * d.m;
        let ok = match (state, self.spec.family) {
            (ParameterState::TwoStage(s), ModelFamily::TwoStage { .. }) => {
                s.beta.len() == 1 + d.p1
                    && s.gamma.len() == d.p2
                    && s.alpha.len() == 1 + d.p_nu
                    && s.sigma_iid.is_some() == d.has_sigma_iid
                    && s.sigma1.is_some() == d.has_sigma1
                    && s.sigma2.is_some() == d.has_sigma2
                    && s.rho.is_some() == d.has_rho
                    && s.omega1.len() == if d.omega_components >= 1 { m_all } else { 0 }
                    && s.omega2.len() == if d.omega_components >= 2 { m_all } else { 0 }
            }
            (ParameterState::PerMark(s), ModelFamily::PerMark { .. }) => {
                s.beta.iter().all(|b| b.len() == 1 + d.p1)
                    && s.alpha.iter().all(|a| a.len() == d.p_nu)
                    && s.sigma.is_some() == d.has_sigma1
                    && s.rho.is_some() == d.has_rho
                    && s.omega.iter().all(|o| {
                        o.len() == if d.omega_components == 2 { m_all } else { 0 }
                    })
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("parameter state does not match the model layout"))
        }
    }
}

fn scalar_logprior_of(state: &ParameterState) -> f64 {
    let mut lp = 0.0;
    match state {
        ParameterState::TwoStage(s) => {
            for &x in s.beta.iter().chain(&s.gamma).chain(&s.alpha) {
                lp += coef_logprior(x);
            }
            for sig in [s.sigma_iid, s.sigma1, s.sigma2].into_iter().flatten() {
                lp += scale_logprior(sig);
            }
            if let Some(r) = s.rho {
                lp += rho_logprior(r);
            }
        }
        ParameterState::PerMark(s) => {
            for &x in s.beta.iter().flatten().chain(s.alpha.iter().flatten()) {
                lp += coef_logprior(x);
            }
            if let Some((s1, s2)) = s.sigma {
                lp += scale_logprior(s1) + scale_logprior(s2);
            }
            if let Some(r) = s.rho {
                lp += rho_logprior(r);
            }
        }
    }
    lp
}

/// Log density of the knot values under the GP prior implied by the state's
/// scales: independent components use `sigma_k^2 R`, coupled components use
/// the cross-covariance Kronecker form. Never factorizes per call — only
/// quadratic forms against the cached `R^-1`. Stacked replicate surfaces
/// are independent a priori, so their densities add.
fn gp_logprior(knots: &KnotSystem, state: &ParameterState) -> f64 {
    let m = knots.m() as f64;
    let quad = |a: &[f64], b: &[f64]| -> f64 {
        let va = DVector::from_column_slice(a);
        let vb = DVector::from_column_slice(b);
        (knots.r_inv() * vb).dot(&va)
    };
    let single = |omega: &[f64], sigma: f64| -> f64 {
        if !(sigma.is_finite() && sigma > 0.0) {
            return f64::NEG_INFINITY;
        }
        let norm = -0.5 * m * LN_2PI - m * sigma.ln() - 0.5 * knots.ln_det_r();
        omega
            .chunks_exact(knots.m())
            .map(|w| norm - quad(w, w) / (2.0 * sigma * sigma))
            .sum()
    };
    let coupled = |o1: &[f64], o2: &[f64], s1: f64, s2: f64, rho: f64| -> f64 {
        let Ok(lambda) = Lambda::new(s1, s2, rho) else {
            return f64::NEG_INFINITY;
        };
        let li = lambda.inverse();
        let norm = -m * LN_2PI - 0.5 * m * lambda.det().ln() - knots.ln_det_r();
        o1.chunks_exact(knots.m())
            .zip(o2.chunks_exact(knots.m()))
            .map(|(w1, w2)| {
                let (q11, q12, q22) = (quad(w1, w1), quad(w1, w2), quad(w2, w2));
                norm - 0.5 * (li[(0, 0)] * q11 + 2.0 * li[(0, 1)] * q12 + li[(1, 1)] * q22)
            })
            .sum()
    };
    match state {
        ParameterState::TwoStage(s) => match (s.sigma1, s.sigma2, s.rho) {
            (Some(s1), None, None) => single(&s.omega1, s1),
            (Some(s1), Some(s2), None) => single(&s.omega1, s1) + single(&s.omega2, s2),
            (Some(s1), Some(s2), Some(r)) => coupled(&s.omega1, &s.omega2, s1, s2, r),
            _ => 0.0,
        },
        ParameterState::PerMark(s) => match (s.sigma, s.rho) {
            (Some((s1, s2)), Some(r)) => coupled(&s.omega[0], &s.omega[1], s1, s2, r),
            _ => 0.0,
        },
    }
}

/// Two-stage log-likelihood for a single pattern (see [`Evaluator`] for
/// the cached multi-replicate form).
pub fn loglik_two_stage(
    spec: &ModelSpec,
    field: &CovariateField,
    pattern: &PointPattern,
    scheme: &IntegrationScheme,
    state: &ParameterState,
) -> Result<LogLik> {
    Evaluator::new(spec.clone(), field, &[pattern], scheme, &[])?.loglik(state)
}

/// Per-mark intensity log-likelihood for a single pattern.
pub fn loglik_bivariate(
    spec: &ModelSpec,
    field: &CovariateField,
    pattern: &PointPattern,
    scheme: &IntegrationScheme,
    bounds: &[NonspatialBound],
    state: &ParameterState,
) -> Result<LogLik> {
    Evaluator::new(spec.clone(), field, &[pattern], scheme, bounds)?.loglik(state)
}

/// Log prior density of a state under its model: Normal(0, 100) per
/// coefficient, inverse-gamma(2, 1/2) per scale, uniform cross-correlation,
/// plus the GP density of the knot values. `-inf` outside the support.
pub fn logprior(spec: &ModelSpec, state: &ParameterState) -> Result<f64> {
    spec.validate()?;
    let scalar = scalar_logprior_of(state);
    let gp = match spec.gp.as_ref() {
        Some(g) => gp_logprior(&KnotSystem::new(g)?, state),
        None => 0.0,
    };
    Ok(scalar + gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArealPartition, ArealUnit, Polygon};
    use crate::simulate::Event;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn unit_field() -> CovariateField {
        let window = Polygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        let units = vec![ArealUnit { polygon: window.clone(), z: vec![] }];
        CovariateField::Areal(ArealPartition::new(units, vec![], window).unwrap())
    }

    fn scheme_for(field: &CovariateField, budget: usize, seed: u64) -> IntegrationScheme {
        let CovariateField::Areal(p) = field else { unreachable!() };
        let mut rng = StdRng::seed_from_u64(seed);
        IntegrationScheme::from_partition(p, budget, &mut rng).unwrap()
    }

    fn model1_logistic() -> ModelSpec {
        ModelSpec {
            family: ModelFamily::TwoStage {
                effects: RandomEffects::None,
                link: MarkLink::Logistic,
            },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec![],
            gp: None,
        }
    }

    fn event(x: f64, y: f64, mark: f64, nu: Vec<f64>) -> Event {
        Event { loc: Location::new(x, y), mark: Some(mark), nu }
    }

    #[test]
    fn empty_pattern_gives_negative_integral() {
        let field = unit_field();
        let pattern = PointPattern::new(vec![], field.window().unwrap()).unwrap();
        let scheme = scheme_for(&field, 64, 1);
        let spec = model1_logistic();
        let state = spec.initial_state().unwrap();
        // beta0 = c = 1.5
        let ParameterState::TwoStage(mut s) = state else { unreachable!() };
        s.beta[0] = 1.5;
        let ll = loglik_two_stage(&spec, &field, &pattern, &scheme, &ParameterState::TwoStage(s))
            .unwrap();
        assert_relative_eq!(ll.total, -1.5f64.exp(), max_relative = 1e-12);
        assert!(ll.pointwise.is_empty());
    }

    #[test]
    fn one_event_hand_value() {
        // intercept-only, all coefficients zero, Y = 1 on a unit window:
        // log 1 - e^0 * 1 + log(1/2) = -1 - log 2
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![event(0.3, 0.7, 1.0, vec![])],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 2);
        let spec = model1_logistic();
        let state = spec.initial_state().unwrap();
        let ll = loglik_two_stage(&spec, &field, &pattern, &scheme, &state).unwrap();
        assert_relative_eq!(ll.total, -1.0 - 2.0f64.ln(), max_relative = 1e-12);
        assert_eq!(ll.pointwise.len(), 1);
        assert_relative_eq!(ll.pointwise[0], ll.total, max_relative = 1e-12);
    }

    fn two_unit_field() -> CovariateField {
        let window = Polygon::rectangle(0.0, 0.0, 2.0, 1.0).unwrap();
        let units = vec![
            ArealUnit {
                polygon: Polygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap(),
                z: vec![0.5],
            },
            ArealUnit {
                polygon: Polygon::rectangle(1.0, 0.0, 2.0, 1.0).unwrap(),
                z: vec![-1.0],
            },
        ];
        CovariateField::Areal(ArealPartition::new(units, vec!["z".into()], window).unwrap())
    }

    fn toy_two_stage_spec(effects: RandomEffects, link: MarkLink) -> ModelSpec {
        let gp = effects.has_stage1().then(|| {
            GPSpec::new(
                0.8,
                vec![
                    Location::new(0.5, 0.3),
                    Location::new(1.0, 0.7),
                    Location::new(1.5, 0.4),
                ],
            )
            .unwrap()
        });
        ModelSpec {
            family: ModelFamily::TwoStage { effects, link },
            stage1_vars: vec!["z".into()],
            stage2_vars: vec!["z".into()],
            nu_names: vec!["v".into()],
            gp,
        }
    }

    fn toy_pattern(field: &CovariateField) -> PointPattern {
        PointPattern::new(
            vec![
                event(0.2, 0.4, 1.0, vec![0.3]),
                event(0.8, 0.9, 0.0, vec![-0.2]),
                event(1.4, 0.5, 1.0, vec![0.9]),
                event(1.9, 0.1, 0.0, vec![0.5]),
            ],
            field.window().unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pointwise_sums_to_total() {
        let field = two_unit_field();
        let pattern = toy_pattern(&field);
        let scheme = scheme_for(&field, 200, 3);
        for link in [MarkLink::Logistic, MarkLink::Linear] {
            let spec = toy_two_stage_spec(RandomEffects::Coupled, link);
            let mut flat: Vec<f64> = spec
                .initial_state()
                .unwrap()
                .to_flat();
            // arbitrary but in-support values
            for (i, v) in flat.iter_mut().enumerate() {
                *v += 0.1 * (i as f64 % 3.0) - 0.05;
            }
            let state = spec.state_from_flat(&flat).unwrap();
            let ll = loglik_two_stage(&spec, &field, &pattern, &scheme, &state).unwrap();
            let sum: f64 = ll.pointwise.iter().sum();
            assert_relative_eq!(sum, ll.total, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_knot_values_reduce_to_no_gp_model() {
        let field = two_unit_field();
        let pattern = toy_pattern(&field);
        let scheme = scheme_for(&field, 200, 4);

        let base = toy_two_stage_spec(RandomEffects::None, MarkLink::Logistic);
        let mut flat0 = base.initial_state().unwrap().to_flat();
        for (i, v) in flat0.iter_mut().enumerate() {
            *v = 0.2 * (i as f64) - 0.3;
        }
        let ll0 = loglik_two_stage(
            &base,
            &field,
            &pattern,
            &scheme,
            &base.state_from_flat(&flat0).unwrap(),
        )
        .unwrap();

        for effects in [
            RandomEffects::LocationOnly,
            RandomEffects::Independent,
            RandomEffects::Coupled,
        ] {
            let spec = toy_two_stage_spec(effects, MarkLink::Logistic);
            let mut state = spec.initial_state().unwrap();
            if let ParameterState::TwoStage(s) = &mut state {
                // same coefficients, scales at 1, knot values at 0
                let k = flat0.len();
                s.beta = flat0[0..2].to_vec();
                s.gamma = flat0[2..3].to_vec();
                s.alpha = flat0[3..k].to_vec();
            }
            let ll = loglik_two_stage(&spec, &field, &pattern, &scheme, &state).unwrap();
            assert_relative_eq!(ll.total, ll0.total, max_relative = 1e-9);
        }
    }

    #[test]
    fn pooled_likelihood_is_sum_of_replicates() {
        // a joint fit shares the scalars but gives each replicate its own
        // surface, so with distinct stacked knot values the pooled
        // likelihood must equal the sum of single-pattern likelihoods
        // evaluated on the matching surface — and the GP prior must count
        // each surface once
        let field = two_unit_field();
        let scheme = scheme_for(&field, 200, 5);
        let pat1 = toy_pattern(&field);
        let pat2 = PointPattern::new(
            vec![
                event(0.6, 0.6, 0.0, vec![1.2]),
                event(1.2, 0.2, 1.0, vec![-0.7]),
            ],
            field.window().unwrap(),
        )
        .unwrap();
        let spec = toy_two_stage_spec(RandomEffects::LocationOnly, MarkLink::Logistic);
        let (w1, w2) = (vec![0.5, -0.2, 0.3], vec![-0.4, 0.1, 0.6]);
        let single = |w: &[f64]| {
            let mut flat = spec.initial_state().unwrap().to_flat();
            flat[0] = 0.4;
            flat[1] = -0.6;
            flat[3] = 0.2;
            flat[6..9].copy_from_slice(w);
            spec.state_from_flat(&flat).unwrap()
        };
        let (state1, state2) = (single(&w1), single(&w2));

        let ev = Evaluator::new(spec.clone(), &field, &[&pat1, &pat2], &scheme, &[]).unwrap();
        let mut flat = ev.initial_state().unwrap().to_flat();
        assert_eq!(flat.len(), 6 + 6);
        flat[0] = 0.4;
        flat[1] = -0.6;
        flat[3] = 0.2;
        flat[6..9].copy_from_slice(&w1);
        flat[9..12].copy_from_slice(&w2);
        let stacked = ev.state_from_flat(&flat).unwrap();

        let pooled = ev.loglik(&stacked).unwrap();
        let a = loglik_two_stage(&spec, &field, &pat1, &scheme, &state1).unwrap();
        let b = loglik_two_stage(&spec, &field, &pat2, &scheme, &state2).unwrap();
        assert_relative_eq!(pooled.total, a.total + b.total, max_relative = 1e-9);
        assert_eq!(pooled.pointwise.len(), a.pointwise.len() + b.pointwise.len());

        // prior: scalars counted once, one GP density per surface
        let scalar = scalar_logprior_of(&state1);
        let gp_of = |s: &ParameterState| logprior(&spec, s).unwrap() - scalar;
        assert_relative_eq!(
            ev.logprior(&stacked).unwrap(),
            scalar + gp_of(&state1) + gp_of(&state2),
            max_relative = 1e-9
        );
    }

    #[test]
    fn event_order_does_not_matter() {
        let field = two_unit_field();
        let scheme = scheme_for(&field, 200, 6);
        let spec = toy_two_stage_spec(RandomEffects::None, MarkLink::Logistic);
        let mut flat = spec.initial_state().unwrap().to_flat();
        flat[0] = 0.3;
        flat[2] = -0.4;
        let state = spec.state_from_flat(&flat).unwrap();

        let events = toy_pattern(&field).events().to_vec();
        let mut reversed = events.clone();
        reversed.reverse();
        let w = field.window().unwrap();
        let p1 = PointPattern::new(events, w.clone()).unwrap();
        let p2 = PointPattern::new(reversed, w).unwrap();
        let a = loglik_two_stage(&spec, &field, &p1, &scheme, &state).unwrap();
        let b = loglik_two_stage(&spec, &field, &p2, &scheme, &state).unwrap();
        assert_relative_eq!(a.total, b.total, max_relative = 1e-12);
    }

    #[test]
    fn empty_pattern_total_decreases_in_intercept() {
        let field = unit_field();
        let pattern = PointPattern::new(vec![], field.window().unwrap()).unwrap();
        let scheme = scheme_for(&field, 64, 7);
        let spec = model1_logistic();
        let at = |b0: f64| {
            let mut flat = spec.initial_state().unwrap().to_flat();
            flat[0] = b0;
            loglik_two_stage(
                &spec,
                &field,
                &pattern,
                &scheme,
                &spec.state_from_flat(&flat).unwrap(),
            )
            .unwrap()
            .total
        };
        assert!(at(1.0) < at(0.0));
        assert!(at(2.0) < at(1.0));
    }

    fn per_mark_spec(with_gp: bool, nu_names: Vec<String>) -> ModelSpec {
        let gp = with_gp.then(|| {
            GPSpec::new(0.8, vec![Location::new(0.3, 0.3), Location::new(0.7, 0.7)]).unwrap()
        });
        ModelSpec {
            family: ModelFamily::PerMark { with_gp },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names,
            gp,
        }
    }

    #[test]
    fn per_mark_hand_value() {
        // unit window, intercepts (ln 2, ln 3), one continuous covariate on
        // [0,1] with alpha = (1, -0.5), one event per mark:
        // total = [-2(e-1) + ln 2 + 0.3] + [-3*2(1-e^-0.5) + ln 3 - 0.4]
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![
                event(0.2, 0.2, 1.0, vec![0.3]),
                event(0.8, 0.8, 2.0, vec![0.8]),
            ],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 8);
        let spec = per_mark_spec(false, vec!["v".into()]);
        let state = ParameterState::PerMark(PerMarkState {
            beta: [vec![2.0f64.ln()], vec![3.0f64.ln()]],
            alpha: [vec![1.0], vec![-0.5]],
            sigma: None,
            rho: None,
            omega: [vec![], vec![]],
        });
        let bounds = [NonspatialBound::Continuous { lower: 0.0, upper: 1.0 }];
        let ll = loglik_bivariate(&spec, &field, &pattern, &scheme, &bounds, &state).unwrap();
        assert_relative_eq!(ll.total, -4.1056202294142344, max_relative = 1e-9);
        let sum: f64 = ll.pointwise.iter().sum();
        assert_relative_eq!(sum, ll.total, max_relative = 1e-9);
    }

    #[test]
    fn per_mark_zero_alpha_is_two_independent_intensities() {
        // with no nonspatial covariates the model is two independent
        // log-linear intensities; verify against the hand value
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![
                event(0.2, 0.2, 1.0, vec![]),
                event(0.8, 0.8, 2.0, vec![]),
            ],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 9);
        let spec = per_mark_spec(false, vec![]);
        let (c1, c2) = (3.0f64.ln(), 5.0f64.ln());
        let state = ParameterState::PerMark(PerMarkState {
            beta: [vec![c1], vec![c2]],
            alpha: [vec![], vec![]],
            sigma: None,
            rho: None,
            omega: [vec![], vec![]],
        });
        let ll = loglik_bivariate(&spec, &field, &pattern, &scheme, &[], &state).unwrap();
        let want = (-3.0 + c1) + (-5.0 + c2);
        assert_relative_eq!(ll.total, want, max_relative = 1e-9);
    }

    #[test]
    fn per_mark_rejects_bad_marks() {
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![event(0.5, 0.5, 3.0, vec![])],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 10);
        let spec = per_mark_spec(false, vec![]);
        let state = spec.initial_state().unwrap();
        let err = loglik_bivariate(&spec, &field, &pattern, &scheme, &[], &state).unwrap_err();
        assert!(matches!(err, Error::InvalidMark { mark: Some(m), .. } if m == 3.0));
    }

    #[test]
    fn logistic_rejects_nonbinary_marks() {
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![event(0.5, 0.5, 0.5, vec![])],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 11);
        let spec = model1_logistic();
        let state = spec.initial_state().unwrap();
        let err = loglik_two_stage(&spec, &field, &pattern, &scheme, &state).unwrap_err();
        assert!(matches!(err, Error::InvalidMark { .. }));
    }

    #[test]
    fn extreme_logit_is_clamped_finite() {
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![event(0.5, 0.5, 0.0, vec![])],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 12);
        let spec = model1_logistic();
        let mut flat = spec.initial_state().unwrap().to_flat();
        flat[1] = 80.0; // alpha0: success probability numerically 1, Y = 0
        let state = spec.state_from_flat(&flat).unwrap();
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let ll = ev.loglik(&state).unwrap();
        assert!(ll.total.is_finite());
        assert_relative_eq!(
            ll.pointwise[0] - (flat[0] - ev.weighted_exp_sum(&ev.two_stage_f1_scheme(
                match &state {
                    ParameterState::TwoStage(s) => s,
                    _ => unreachable!(),
                },
                0
            ))),
            PROB_CLAMP.ln(),
            max_relative = 1e-6
        );
        assert_eq!(ev.clamp_count(), 1);
    }

    #[test]
    fn prior_oracles() {
        // inverse-gamma(2, 1/2) at 1/2 is ln 2 - 1
        assert_relative_eq!(scale_logprior(0.5), 2.0f64.ln() - 1.0, max_relative = 1e-12);
        assert_eq!(scale_logprior(-1.0), f64::NEG_INFINITY);

        // two zero coefficients: twice the normal mode density
        let spec = model1_logistic();
        let state = spec.initial_state().unwrap();
        let lp = logprior(&spec, &state).unwrap();
        assert_relative_eq!(lp, -(200.0 * std::f64::consts::PI).ln(), max_relative = 1e-12);
    }

    #[test]
    fn out_of_support_rho_has_zero_prior_mass() {
        let spec = toy_two_stage_spec(RandomEffects::Coupled, MarkLink::Logistic);
        let mut state = spec.initial_state().unwrap();
        if let ParameterState::TwoStage(s) = &mut state {
            s.rho = Some(0.9995);
        }
        assert_eq!(logprior(&spec, &state).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn gp_prior_matches_direct_density() {
        // coupled prior equals the dense multivariate normal evaluated on
        // the Kronecker covariance
        use crate::covariance::{build_covariance, cholesky_with_jitter};
        let spec = toy_two_stage_spec(RandomEffects::Coupled, MarkLink::Logistic);
        let gp = spec.gp.clone().unwrap();
        let mut state = spec.initial_state().unwrap();
        let (omega1, omega2) = (vec![0.4, -0.3, 0.8], vec![-0.1, 0.6, 0.2]);
        if let ParameterState::TwoStage(s) = &mut state {
            s.sigma1 = Some(1.3);
            s.sigma2 = Some(0.7);
            s.rho = Some(0.5);
            s.omega1 = omega1.clone();
            s.omega2 = omega2.clone();
        }
        let knots = KnotSystem::new(&gp).unwrap();
        let got = gp_logprior(&knots, &state);

        let lambda = Lambda::new(1.3, 0.7, 0.5).unwrap();
        let cov = build_covariance(&gp.knots, gp.phi, &lambda);
        let (l, _) = cholesky_with_jitter(&cov).unwrap();
        let x = DVector::from_iterator(6, omega1.iter().chain(omega2.iter()).copied());
        let z = l.clone().solve_lower_triangular(&x).unwrap();
        let ln_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let want = -0.5 * (6.0 * LN_2PI + ln_det + z.dot(&z));
        assert_relative_eq!(got, want, max_relative = 1e-8);
    }

    #[test]
    fn refresh_matches_full_recomputation() {
        let field = two_unit_field();
        let pattern = toy_pattern(&field);
        let scheme = scheme_for(&field, 200, 13);
        let spec = toy_two_stage_spec(RandomEffects::Coupled, MarkLink::Logistic);
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let s0 = spec.initial_state().unwrap();
        let parts0 = ev.full_parts(&s0).unwrap();

        // change beta only: only lik1 must move
        let mut flat = s0.to_flat();
        flat[1] += 0.7;
        let s1 = spec.state_from_flat(&flat).unwrap();
        let fast = ev.refresh(&s1, &parts0, Touch { lik1: true, lik2: false, gp: false });
        let slow = ev.full_parts(&s1).unwrap();
        assert_relative_eq!(fast.total(), slow.total(), max_relative = 1e-12);

        // change sigma1 only: only the GP prior must move
        let mut flat = s0.to_flat();
        flat[5] = 2.0; // sigma1 position: beta(2) gamma(1) alpha(2) -> index 5
        let s2 = spec.state_from_flat(&flat).unwrap();
        let fast = ev.refresh(&s2, &parts0, Touch { lik1: false, lik2: false, gp: true });
        let slow = ev.full_parts(&s2).unwrap();
        assert_relative_eq!(fast.total(), slow.total(), max_relative = 1e-12);
    }

    #[test]
    fn flatten_roundtrip_and_names() {
        let spec = toy_two_stage_spec(RandomEffects::Coupled, MarkLink::Linear);
        let names = spec.param_names();
        let state = spec.initial_state().unwrap();
        let flat = state.to_flat();
        assert_eq!(names.len(), flat.len());
        let back = spec.state_from_flat(&flat).unwrap();
        assert_eq!(back.to_flat(), flat);
        // layout: beta0, beta_z, gamma_z, alpha0, alpha_v, sigma_iid,
        // sigma1, sigma2, rho, then knot values
        assert_eq!(names[0], "beta0");
        assert_eq!(names[2], "gamma_z");
        assert_eq!(names[3], "alpha0");
        assert_eq!(names[5], "sigma_iid");
        assert_eq!(names[8], "rho");
        assert_eq!(names[9], "omega1_1");
        assert_eq!(names.last().unwrap(), "omega2_3");

        let kinds = spec.scalar_kinds();
        assert_eq!(kinds.len(), 9);
        assert_eq!(kinds[4], ScalarKind::Free);
        assert_eq!(kinds[5], ScalarKind::Scale);
        assert_eq!(kinds[8], ScalarKind::Correlation);
    }
}
