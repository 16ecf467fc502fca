//! Posterior sampling, summaries, information criteria, and chain
//! diagnostics.
//!
//! [`run_mcmc`] drives the adaptive blockwise Metropolis sampler over an
//! [`Evaluator`]: regression coefficients and transformed scale/correlation
//! parameters move one at a time, knot values move as multivariate blocks
//! shaped by the knot correlation factor. Scales are sampled on the log
//! scale and the cross-correlation on the Fisher-z scale, with the change
//! of variables folded into the target so the reported samples stay on the
//! natural scale.

pub mod sampler;

use crate::covariance::quantile_sorted;
use crate::error::{Error, Result};
use crate::likelihood::{
    Evaluator, ModelFamily, ParameterState, Parts, ScalarKind, Touch, RHO_BOUND,
};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::SeedableRng;
pub use sampler::{
    metropolis_accept, AdaptiveSampler, Block, BlockAcceptance, BlockTarget, BLOCK_TARGET,
    SCALAR_TARGET,
};

/// Chain length controls. `iterations` counts post-burn-in sweeps; every
/// `thin`-th of those is retained.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
}

/// One fitted chain: retained natural-scale samples plus everything needed
/// to summarize, compare, and reproduce the fit.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub spec: crate::likelihood::ModelSpec,
    pub param_names: Vec<String>,
    /// Retained samples by rows, `param_names` order by columns.
    pub samples: Vec<Vec<f64>>,
    /// Per-event log-likelihood contributions, retained samples by rows.
    pub pointwise: DMatrix<f64>,
    /// Log-likelihood total of each retained sample.
    pub loglik: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
    pub seed: u64,
}

impl PosteriorChain {
    pub fn n_retained(&self) -> usize {
        self.samples.len()
    }

    /// Column of one parameter across the retained samples.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[j]).collect()
    }

    pub fn waic(&self) -> Result<WaicResult> {
        waic(&self.pointwise)
    }
}

// ----- transform layer ---------------------------------------------------

fn to_transformed(flat: &[f64], kinds: &[ScalarKind]) -> Result<Vec<f64>> {
    let mut t = flat.to_vec();
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            ScalarKind::Free => {}
            ScalarKind::Scale => {
                if !(flat[i].is_finite() && flat[i] > 0.0) {
                    return Err(Error::InvalidInitialState { value: f64::NEG_INFINITY });
                }
                t[i] = flat[i].ln();
            }
            ScalarKind::Correlation => {
                if !(flat[i].is_finite() && flat[i].abs() < RHO_BOUND) {
                    return Err(Error::InvalidInitialState { value: f64::NEG_INFINITY });
                }
                t[i] = (flat[i] / RHO_BOUND).atanh();
            }
        }
    }
    Ok(t)
}

/// `ln sech^2(t)`, computed from the large-|t| side to avoid cancellation.
fn ln_sech2(t: f64) -> f64 {
    let a = t.abs();
    2.0 * (2.0f64.ln() - a - (-2.0 * a).exp().ln_1p())
}

fn to_natural(t: &[f64], kinds: &[ScalarKind]) -> (Vec<f64>, f64) {
    let mut flat = t.to_vec();
    let mut log_jacobian = 0.0;
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            ScalarKind::Free => {}
            ScalarKind::Scale => {
                flat[i] = t[i].exp();
                log_jacobian += t[i];
            }
            ScalarKind::Correlation => {
                flat[i] = RHO_BOUND * t[i].tanh();
                log_jacobian += RHO_BOUND.ln() + ln_sech2(t[i]);
            }
        }
    }
    (flat, log_jacobian)
}

/// The posterior over transformed coordinates. The change-of-variables term
/// rides in the scalar-prior slot, which `refresh` always recomputes.
struct PosteriorTarget<'a> {
    ev: &'a Evaluator,
    kinds: &'a [ScalarKind],
}

impl PosteriorTarget<'_> {
    fn state_of(&self, t: &[f64]) -> (ParameterState, f64) {
        let (flat, lj) = to_natural(t, self.kinds);
        let state = self
            .ev
            .state_from_flat(&flat)
            .expect("flat layout is fixed by the model spec and replicate count");
        (state, lj)
    }
}

impl BlockTarget for PosteriorTarget<'_> {
    fn full(&self, t: &[f64]) -> Parts {
        let (state, lj) = self.state_of(t);
        let mut parts = self
            .ev
            .full_parts(&state)
            .expect("state layout is fixed by the model spec");
        parts.scalar_prior += lj;
        parts
    }

    fn refresh(&self, t: &[f64], base: &Parts, touch: Touch) -> Parts {
        let (state, lj) = self.state_of(t);
        let mut parts = self.ev.refresh(&state, base, touch);
        parts.scalar_prior += lj;
        parts
    }
}

// ----- block layout ------------------------------------------------------

fn build_blocks(ev: &Evaluator) -> Vec<Block> {
    let spec = ev.spec();
    let d = ev.dims();
    let names = spec.scalar_names();
    let mut blocks = Vec::new();

    let touch_of = |name: &str| -> Touch {
        let (lik1, lik2, gp) = match spec.family {
            ModelFamily::TwoStage { .. } => {
                if name.starts_with("beta") {
                    (true, false, false)
                } else if name.starts_with("gamma")
                    || name.starts_with("alpha")
                    || name == "sigma_iid"
                {
                    (false, true, false)
                } else {
                    // sigma1, sigma2, rho
                    (false, false, true)
                }
            }
            ModelFamily::PerMark { .. } => {
                if name.starts_with("beta1") || name.starts_with("alpha1") {
                    (true, false, false)
                } else if name.starts_with("beta2") || name.starts_with("alpha2") {
                    (false, true, false)
                } else {
                    (false, false, true)
                }
            }
        };
        Touch { lik1, lik2, gp }
    };

    for (i, name) in names.iter().enumerate() {
        blocks.push(Block::scalar(name.clone(), i, touch_of(name)));
    }

    if d.omega_components > 0 {
        let shape = ev
            .knot_system()
            .expect("models with random effects carry a knot system")
            .chol_lower()
            .clone();
        let n_scalars = names.len();
        let n_reps = ev.n_replicates();
        for c in 0..d.omega_components {
            // in both families the first component only enters the first
            // likelihood piece and the second only the second
            let lik1 = c == 0;
            let lik2 = c == 1;
            // one block per replicate surface, matching the stacked layout
            for r in 0..n_reps {
                let start = n_scalars + (c * n_reps + r) * d.m;
                let name = if n_reps == 1 {
                    format!("omega{}", c + 1)
                } else {
                    format!("omega{}_r{}", c + 1, r + 1)
                };
                blocks.push(Block {
                    name,
                    indices: (start..start + d.m).collect(),
                    target_accept: BLOCK_TARGET,
                    touch: Touch { lik1, lik2, gp: true },
                    shape: Some(shape.clone()),
                    initial_step: 1.0 / (d.m as f64).sqrt(),
                });
            }
        }
    }
    blocks
}

// ----- the driver --------------------------------------------------------

/// Samples the posterior of `ev`'s model by adaptive blockwise Metropolis.
///
/// Adaptation runs during the burn-in sweeps only; the retained samples come
/// from the frozen kernel. `init` must use the evaluator's layout (see
/// [`Evaluator::initial_state`] when fitting several replicates jointly).
/// Errors with `InvalidInitialState` when the starting state has a
/// non-finite log posterior.
pub fn run_mcmc(ev: &Evaluator, init: &ParameterState, cfg: &McmcConfig) -> Result<PosteriorChain> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let thin = cfg.thin.max(1);
    let spec = ev.spec().clone();
    let kinds = spec.scalar_kinds();
    let param_names = ev.param_names();

    let flat0 = init.to_flat();
    if flat0.len() != param_names.len() {
        return Err(Error::invalid("initial state does not match the model layout"));
    }
    let mut t = to_transformed(&flat0, &kinds)?;
    let target = PosteriorTarget { ev, kinds: &kinds };
    let mut parts = target.full(&t);
    if !parts.total().is_finite() {
        return Err(Error::InvalidInitialState { value: parts.total() });
    }

    let mut sampler = AdaptiveSampler::new(build_blocks(ev));
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.burnin {
        sampler.sweep(&mut t, &mut parts, &target, &mut rng, true);
    }

    let n_retained = cfg.iterations / thin;
    let mut samples = Vec::with_capacity(n_retained);
    let mut loglik = Vec::with_capacity(n_retained);
    let mut pointwise_rows = Vec::with_capacity(n_retained);
    for it in 1..=cfg.iterations {
        sampler.sweep(&mut t, &mut parts, &target, &mut rng, false);
        if it % thin == 0 {
            let (state, _) = target.state_of(&t);
            let ll = ev.loglik(&state)?;
            samples.push(state.to_flat());
            loglik.push(ll.total);
            pointwise_rows.push(ll.pointwise);
        }
    }

    let n_events = ev.n_events();
    let pointwise = DMatrix::from_fn(pointwise_rows.len(), n_events, |r, c| {
        pointwise_rows[r][c]
    });
    Ok(PosteriorChain {
        spec,
        param_names,
        samples,
        pointwise,
        loglik,
        acceptance: sampler.acceptance(),
        seed: cfg.seed,
    })
}

// ----- WAIC ----------------------------------------------------------------

/// Widely applicable information criterion on the deviance scale
/// (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Number of per-event contributions (columns) it was computed from.
    pub n_points: usize,
}

/// Computes WAIC from a samples-by-events matrix of log-likelihood
/// contributions: `-2 (lppd - p_waic)` with the variance-based penalty.
pub fn waic(pointwise: &DMatrix<f64>) -> Result<WaicResult> {
    let (s, n) = (pointwise.nrows(), pointwise.ncols());
    if s < 2 {
        return Err(Error::invalid(format!(
            "WAIC needs at least 2 posterior samples, got {s}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("WAIC needs at least 1 event contribution"));
    }
    for r in 0..s {
        for c in 0..n {
            if !pointwise[(r, c)].is_finite() {
                return Err(Error::NonFiniteLogLik { sample: r, event: c });
            }
        }
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for c in 0..n {
        let col = pointwise.column(c);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col.iter().map(|&v| (v - max).exp()).sum();
        lppd += max + (sum_exp / s as f64).ln();
        let mean = col.iter().sum::<f64>() / s as f64;
        p_waic += col.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
    }
    Ok(WaicResult { waic: -2.0 * (lppd - p_waic), lppd, p_waic, n_points: n })
}

// ----- summaries -----------------------------------------------------------

/// Posterior summary of one parameter.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% posterior quantile.
    pub lower: f64,
    /// 97.5% posterior quantile.
    pub upper: f64,
    /// Whether the 95% interval excludes zero.
    pub excludes_zero: bool,
    pub ess: f64,
    pub mcse: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<ParamSummary>,
}

impl std::fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6}",
            "parameter", "mean", "sd", "2.5%", "97.5%", "ess", "sig"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.0} {:>6}",
                r.name,
                r.mean,
                r.sd,
                r.lower,
                r.upper,
                r.ess,
                if r.excludes_zero { "*" } else { "" }
            )?;
        }
        Ok(())
    }
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() < 2 {
        0.0
    } else {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

/// Summarizes each parameter of a chain: mean, SD, central 95% interval,
/// sign flag, and sampling-noise diagnostics. Requires at least 100
/// retained samples.
pub fn summarize(chain: &PosteriorChain) -> Result<SummaryTable> {
    summarize_samples(&chain.param_names, &chain.samples)
}

/// [`summarize`] on bare columns, for chains loaded back from disk.
pub fn summarize_samples(names: &[String], samples: &[Vec<f64>]) -> Result<SummaryTable> {
    if samples.len() < 100 {
        return Err(Error::invalid(format!(
            "summaries need at least 100 retained samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|row| row.len() != names.len()) {
        return Err(Error::invalid("sample rows do not match the parameter names"));
    }
    let rows = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col: Vec<f64> = samples.iter().map(|row| row[j]).collect();
            let (mean, sd) = mean_sd(&col);
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            let lower = quantile_sorted(&sorted, 0.025);
            let upper = quantile_sorted(&sorted, 0.975);
            let ess = effective_sample_size(&col);
            ParamSummary {
                name: name.clone(),
                mean,
                sd,
                lower,
                upper,
                excludes_zero: lower > 0.0 || upper < 0.0,
                ess,
                mcse: if sd == 0.0 { 0.0 } else { sd / ess.sqrt() },
            }
        })
        .collect();
    Ok(SummaryTable { rows })
}

// ----- model comparison ------------------------------------------------------

/// One model's row in a comparison, ordered best (lowest WAIC) first.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub waic: WaicResult,
    /// Gap to the best model's WAIC.
    pub delta: f64,
}

/// Ranks models by WAIC (ascending; ties broken by name). All entries must
/// have been computed on the same events.
pub fn compare_models(entries: Vec<(String, WaicResult)>) -> Result<Vec<ComparisonRow>> {
    if entries.is_empty() {
        return Err(Error::invalid("nothing to compare"));
    }
    let n0 = entries[0].1.n_points;
    for (name, w) in &entries {
        if w.n_points != n0 {
            return Err(Error::IncomparableModels {
                reason: format!(
                    "'{}' was scored on {} events, '{}' on {n0}",
                    name, w.n_points, entries[0].0
                ),
            });
        }
        if !w.waic.is_finite() {
            return Err(Error::IncomparableModels {
                reason: format!("'{name}' has a non-finite WAIC"),
            });
        }
    }
    let mut rows: Vec<ComparisonRow> = entries
        .into_iter()
        .map(|(name, waic)| ComparisonRow { name, waic, delta: 0.0 })
        .collect();
    rows.sort_by(|a, b| {
        a.waic
            .waic
            .total_cmp(&b.waic.waic)
            .then_with(|| a.name.cmp(&b.name))
    });
    let best = rows[0].waic.waic;
    for r in &mut rows {
        r.delta = r.waic.waic - best;
    }
    Ok(rows)
}

// ----- chain diagnostics ------------------------------------------------------

/// Effective sample size by the initial-positive-sequence rule: sum adjacent
/// autocorrelation pairs while they stay positive. A constant chain returns
/// the sentinel 1.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 1.0;
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let gamma = |k: usize| -> f64 {
        (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum::<f64>() / nf
    };
    let g0 = gamma(0);
    if g0 <= 0.0 || !g0.is_finite() {
        return 1.0;
    }
    let mut pair_sum = 0.0;
    let mut k = 0usize;
    while k + 1 < n {
        let pair = (gamma(k) + gamma(k + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        pair_sum += pair;
        k += 2;
    }
    // tau = -1 + 2 * sum of positive pairs; floor it against antithetic
    // chains driving the estimate through zero
    let tau = (2.0 * pair_sum - 1.0).max(1.0 / nf);
    nf / tau
}

/// Monte Carlo standard error of the chain mean: `sd / sqrt(ess)`.
pub fn mcse(x: &[f64]) -> f64 {
    let (_, sd) = mean_sd(x);
    if sd == 0.0 {
        return 0.0;
    }
    sd / effective_sample_size(x).sqrt()
}

/// Per-parameter effective sample sizes and Monte Carlo standard errors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChainDiagnostics {
    pub names: Vec<String>,
    pub ess: Vec<f64>,
    pub mcse: Vec<f64>,
}

pub fn mcmc_diagnostics(chain: &PosteriorChain) -> ChainDiagnostics {
    let mut ess = Vec::with_capacity(chain.param_names.len());
    let mut errs = Vec::with_capacity(chain.param_names.len());
    for j in 0..chain.param_names.len() {
        let col = chain.column(j);
        ess.push(effective_sample_size(&col));
        errs.push(mcse(&col));
    }
    ChainDiagnostics { names: chain.param_names.clone(), ess, mcse: errs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArealPartition, ArealUnit, CovariateField, Location, Polygon};
    use crate::integration::{IntegrationScheme, NonspatialBound};
    use crate::likelihood::{MarkLink, ModelSpec, RandomEffects};
    use crate::simulate::{
        simulate_two_stage, Event, GpSim, MarkModel, NonspatialDistribution, PointPattern,
        TwoStageConfig,
    };
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

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

    #[test]
    fn waic_hand_oracle() {
        // two samples, one event, contributions (0, ln 3):
        // lppd = ln 2, penalty = (ln 3)^2 / 2
        let pw = DMatrix::from_row_slice(2, 1, &[0.0, 3.0f64.ln()]);
        let w = waic(&pw).unwrap();
        let want = -2.0 * (2.0f64.ln() - 3.0f64.ln().powi(2) / 2.0);
        assert_relative_eq!(w.waic, want, max_relative = 1e-12);
        assert_relative_eq!(w.lppd, 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn waic_input_checks() {
        let one = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(waic(&one), Err(Error::InvalidInput(_))));
        let empty = DMatrix::<f64>::zeros(5, 0);
        assert!(matches!(waic(&empty), Err(Error::InvalidInput(_))));
        let mut bad = DMatrix::from_element(3, 2, 0.5);
        bad[(1, 1)] = f64::NAN;
        assert!(matches!(
            waic(&bad),
            Err(Error::NonFiniteLogLik { sample: 1, event: 1 })
        ));
    }

    #[test]
    fn comparison_ranks_and_ties() {
        // flat rows => zero penalty, so WAIC = -2 * sum of contributions;
        // totals mirror a fit where one model sits ~430 deviance lower
        let at = |total: f64| WaicResult {
            waic: -2.0 * total,
            lppd: total,
            p_waic: 0.0,
            n_points: 1,
        };
        let rows = compare_models(vec![
            ("coupled".into(), at(3535.0)),
            ("independent".into(), at(3748.5)),
        ])
        .unwrap();
        assert_eq!(rows[0].name, "independent");
        assert_relative_eq!(rows[0].waic.waic, -7497.0);
        assert_relative_eq!(rows[1].waic.waic, -7070.0);
        assert_relative_eq!(rows[1].delta, 427.0);

        let tied = compare_models(vec![
            ("b".into(), at(1.0)),
            ("a".into(), at(1.0)),
        ])
        .unwrap();
        assert_eq!(tied[0].name, "a");

        let err = compare_models(vec![
            ("a".into(), at(1.0)),
            (
                "b".into(),
                WaicResult { waic: 0.0, lppd: 0.0, p_waic: 0.0, n_points: 7 },
            ),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::IncomparableModels { .. }));
    }

    #[test]
    fn ess_iid_near_n() {
        let mut rng = StdRng::seed_from_u64(21);
        let x: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ess = effective_sample_size(&x);
        assert!(
            ess > 0.7 * 5000.0 && ess < 1.3 * 5000.0,
            "iid ess {ess}"
        );
    }

    #[test]
    fn ess_constant_sentinel() {
        let x = vec![2.5; 400];
        assert_eq!(effective_sample_size(&x), 1.0);
        assert_eq!(mcse(&x), 0.0);
    }

    #[test]
    fn ess_ar1_matches_theory_window() {
        // AR(1) with coefficient 0.9 has integrated autocorrelation time 19,
        // so ess/n should land near 1/19
        let mut rng = StdRng::seed_from_u64(22);
        let n = 20_000;
        let mut x = Vec::with_capacity(n);
        let mut cur = 0.0f64;
        let innov = (1.0f64 - 0.81).sqrt();
        for _ in 0..n {
            cur = 0.9 * cur + innov * rng.sample::<f64, _>(StandardNormal);
            x.push(cur);
        }
        let ratio = effective_sample_size(&x) / n as f64;
        assert!(ratio > 0.03 && ratio < 0.08, "ess/n {ratio}");
    }

    fn synthetic_chain(samples: Vec<Vec<f64>>, names: Vec<String>) -> PosteriorChain {
        PosteriorChain {
            spec: ModelSpec {
                family: ModelFamily::TwoStage {
                    effects: RandomEffects::None,
                    link: MarkLink::Logistic,
                },
                stage1_vars: vec![],
                stage2_vars: vec![],
                nu_names: vec![],
                gp: None,
            },
            param_names: names,
            samples,
            pointwise: DMatrix::zeros(0, 0),
            loglik: vec![],
            acceptance: vec![],
            seed: 0,
        }
    }

    #[test]
    fn summarize_normal_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![3.0 + rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let chain = synthetic_chain(samples, vec!["x".into()]);
        let table = summarize(&chain).unwrap();
        let row = &table.rows[0];
        assert!((row.mean - 3.0).abs() < 0.05, "mean {}", row.mean);
        assert!((row.lower - 1.04).abs() < 0.15, "lower {}", row.lower);
        assert!((row.upper - 4.96).abs() < 0.15, "upper {}", row.upper);
        assert!(row.excludes_zero);
        assert!(row.lower <= row.upper);
    }

    #[test]
    fn summarize_needs_enough_samples() {
        let chain = synthetic_chain(vec![vec![0.0]; 99], vec!["x".into()]);
        assert!(summarize(&chain).is_err());
    }

    #[test]
    fn summary_intervals_are_ordered() {
        // arbitrary skewed, heavy-tailed, and constant columns
        let mut rng = StdRng::seed_from_u64(24);
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                vec![z * z * z, (i as f64).sin() * 40.0, 7.7]
            })
            .collect();
        let chain =
            synthetic_chain(samples, vec!["a".into(), "b".into(), "c".into()]);
        for row in summarize(&chain).unwrap().rows {
            assert!(row.lower <= row.upper, "{}: {} > {}", row.name, row.lower, row.upper);
            assert!(row.lower <= row.mean && row.mean <= row.upper || row.sd > 0.0);
        }
    }

    /// With no events, the mark-stage intercept never touches the likelihood,
    /// so its marginal posterior is exactly its Normal(0, 100) prior.
    #[test]
    fn empty_pattern_marginal_reproduces_prior() {
        let field = unit_field();
        let pattern = PointPattern::new(vec![], field.window().unwrap()).unwrap();
        let scheme = scheme_for(&field, 64, 31);
        let spec = ModelSpec {
            family: ModelFamily::TwoStage {
                effects: RandomEffects::None,
                link: MarkLink::Logistic,
            },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec![],
            gp: None,
        };
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let chain = run_mcmc(
            &ev,
            &spec.initial_state().unwrap(),
            &McmcConfig { iterations: 30_000, burnin: 4_000, thin: 3, seed: 32 },
        )
        .unwrap();

        let j = chain.param_names.iter().position(|n| n == "alpha0").unwrap();
        let col = chain.column(j);
        let (mean, sd) = mean_sd(&col);
        let err = mcse(&col);
        assert!(
            mean.abs() <= 3.0 * err,
            "prior-only mean {mean} vs 3*mcse {}",
            3.0 * err
        );
        assert!((sd - 10.0).abs() <= 0.5, "prior-only sd {sd}");

        let acc = chain
            .acceptance
            .iter()
            .find(|a| a.name == "alpha0")
            .unwrap();
        assert!(
            (acc.observed - acc.target).abs() <= 0.1,
            "acceptance {} vs target {}",
            acc.observed,
            acc.target
        );
    }

    #[test]
    fn same_seed_reproduces_different_seed_moves() {
        let field = unit_field();
        let pattern = PointPattern::new(
            vec![Event { loc: Location::new(0.4, 0.6), mark: Some(1.0), nu: vec![] }],
            field.window().unwrap(),
        )
        .unwrap();
        let scheme = scheme_for(&field, 64, 33);
        let spec = ModelSpec {
            family: ModelFamily::TwoStage {
                effects: RandomEffects::None,
                link: MarkLink::Logistic,
            },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec![],
            gp: None,
        };
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let init = spec.initial_state().unwrap();
        let cfg = McmcConfig { iterations: 200, burnin: 100, thin: 1, seed: 7 };
        let a = run_mcmc(&ev, &init, &cfg).unwrap();
        let b = run_mcmc(&ev, &init, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = run_mcmc(&ev, &init, &McmcConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn diverging_initial_state_is_rejected() {
        let field = unit_field();
        let pattern = PointPattern::new(vec![], field.window().unwrap()).unwrap();
        let scheme = scheme_for(&field, 64, 34);
        let spec = ModelSpec {
            family: ModelFamily::TwoStage {
                effects: RandomEffects::None,
                link: MarkLink::Logistic,
            },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec![],
            gp: None,
        };
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let mut flat = spec.initial_state().unwrap().to_flat();
        flat[0] = 1000.0; // intensity integral overflows
        let init = spec.state_from_flat(&flat).unwrap();
        let err = run_mcmc(
            &ev,
            &init,
            &McmcConfig { iterations: 10, burnin: 0, thin: 1, seed: 1 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInitialState { .. }));
    }

    /// Newton iteration for the logistic regression MLE and its standard
    /// errors, used as an oracle for the mark-stage coefficients.
    fn logistic_mle(nu: &[f64], y: &[f64]) -> ([f64; 2], [f64; 2]) {
        let n = nu.len();
        let mut b = [0.0f64; 2];
        for _ in 0..50 {
            let mut grad = [0.0f64; 2];
            let mut h = [[0.0f64; 2]; 2];
            for i in 0..n {
                let eta = b[0] + b[1] * nu[i];
                let p = 1.0 / (1.0 + (-eta).exp());
                let r = y[i] - p;
                let w = p * (1.0 - p);
                grad[0] += r;
                grad[1] += r * nu[i];
                h[0][0] += w;
                h[0][1] += w * nu[i];
                h[1][1] += w * nu[i] * nu[i];
            }
            h[1][0] = h[0][1];
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let step = [
                (h[1][1] * grad[0] - h[0][1] * grad[1]) / det,
                (h[0][0] * grad[1] - h[1][0] * grad[0]) / det,
            ];
            b[0] += step[0];
            b[1] += step[1];
            if step[0].abs() + step[1].abs() < 1e-12 {
                break;
            }
        }
        // observed-information standard errors at the optimum
        let mut h = [[0.0f64; 2]; 2];
        for i in 0..n {
            let eta = b[0] + b[1] * nu[i];
            let p = 1.0 / (1.0 + (-eta).exp());
            let w = p * (1.0 - p);
            h[0][0] += w;
            h[0][1] += w * nu[i];
            h[1][1] += w * nu[i] * nu[i];
        }
        h[1][0] = h[0][1];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        ([b[0], b[1]], [(h[1][1] / det).sqrt(), (h[0][0] / det).sqrt()])
    }

    #[test]
    fn mark_stage_posterior_tracks_logistic_mle() {
        let field = unit_field();
        let mut rng = StdRng::seed_from_u64(35);
        let cfg = TwoStageConfig {
            beta: vec![300.0f64.ln()],
            gamma: vec![],
            alpha: vec![0.5, -1.0],
            nu_dists: vec![NonspatialDistribution::Uniform { lower: 0.0, upper: 1.0 }],
            mark_model: MarkModel::Logistic,
            gp: GpSim::None,
        };
        let sim = simulate_two_stage(&field, &cfg, None, &mut rng).unwrap();
        let pattern = sim.pattern;
        assert!(pattern.n() > 150, "simulation too sparse: {}", pattern.n());

        let nu: Vec<f64> = pattern.events().iter().map(|e| e.nu[0]).collect();
        let y = pattern.marks().unwrap();
        let (mle, se) = logistic_mle(&nu, &y);

        let spec = ModelSpec {
            family: ModelFamily::TwoStage {
                effects: RandomEffects::None,
                link: MarkLink::Logistic,
            },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec!["v".into()],
            gp: None,
        };
        let scheme = scheme_for(&field, 128, 36);
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &[]).unwrap();
        let chain = run_mcmc(
            &ev,
            &spec.initial_state().unwrap(),
            &McmcConfig { iterations: 6_000, burnin: 3_000, thin: 2, seed: 37 },
        )
        .unwrap();
        let table = summarize(&chain).unwrap();
        let row = |name: &str| {
            table
                .rows
                .iter()
                .find(|r| r.name == name)
                .unwrap_or_else(|| panic!("missing {name}"))
        };
        let a0 = row("alpha0");
        let a1 = row("alpha_v");
        assert!(
            (a0.mean - mle[0]).abs() <= 3.0 * se[0],
            "alpha0 {} vs mle {} (se {})",
            a0.mean,
            mle[0],
            se[0]
        );
        assert!(
            (a1.mean - mle[1]).abs() <= 3.0 * se[1],
            "alpha_v {} vs mle {} (se {})",
            a1.mean,
            mle[1],
            se[1]
        );
    }

    #[test]
    fn coupled_per_mark_fit_runs_end_to_end() {
        // smoke test for the GP code path: tiny knot set, short chain,
        // finite outputs with the right shapes
        let field = unit_field();
        let mut rng = StdRng::seed_from_u64(38);
        let events: Vec<Event> = (0..40)
            .map(|i| Event {
                loc: Location::new(rng.random::<f64>(), rng.random::<f64>()),
                mark: Some(1.0 + f64::from(i % 2 == 0)),
                nu: vec![rng.random::<f64>()],
            })
            .collect();
        let pattern = PointPattern::new(events, field.window().unwrap()).unwrap();
        let knots = vec![
            Location::new(0.25, 0.25),
            Location::new(0.75, 0.25),
            Location::new(0.25, 0.75),
            Location::new(0.75, 0.75),
        ];
        let spec = ModelSpec {
            family: ModelFamily::PerMark { with_gp: true },
            stage1_vars: vec![],
            stage2_vars: vec![],
            nu_names: vec!["v".into()],
            gp: Some(crate::covariance::GPSpec::new(0.5, knots).unwrap()),
        };
        let scheme = scheme_for(&field, 64, 39);
        let bounds = [NonspatialBound::Continuous { lower: 0.0, upper: 1.0 }];
        let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &bounds).unwrap();
        let chain = run_mcmc(
            &ev,
            &spec.initial_state().unwrap(),
            &McmcConfig { iterations: 300, burnin: 300, thin: 3, seed: 40 },
        )
        .unwrap();
        assert_eq!(chain.n_retained(), 100);
        assert_eq!(chain.pointwise.ncols(), 40);
        assert!(chain.loglik.iter().all(|v| v.is_finite()));
        // scalar blocks + two knot blocks
        assert_eq!(
            chain.acceptance.len(),
            chain.spec.scalar_names().len() + 2
        );
        assert!(chain.waic().unwrap().waic.is_finite());
        let diag = mcmc_diagnostics(&chain);
        assert_eq!(diag.ess.len(), chain.param_names.len());
        assert!(diag.ess.iter().all(|e| *e >= 1.0));
    }
}
