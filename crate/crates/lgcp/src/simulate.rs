//! Marked point patterns and thinning-based simulation of the two model
//! families.
//!
//! Both simulators share the same skeleton: a lattice with at least one
//! site per areal unit carries the spatial random effects, the maximum
//! lattice intensity bounds a homogeneous Poisson proposal over the window,
//! and candidates are retained with probability proportional to the target
//! intensity. The families differ in where the nonspatial covariates enter:
//! the two-stage model draws them after thinning (they influence only the
//! mark), while the per-mark intensity model draws them before thinning
//! (they influence where events survive).

use crate::covariance::{simulate_bivariate_gp, simulate_gp, GPRealization, Lambda};
use crate::error::{Error, Result};
use crate::geometry::{CovariateField, Location, Window};
use crate::integration::NonspatialBound;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// One event: a location, an optional mark, and nonspatial covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub loc: Location,
    pub mark: Option<f64>,
    pub nu: Vec<f64>,
}

/// A point pattern over a window. Either every event carries a mark or
/// none does, and all events share one nonspatial-covariate dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointPattern {
    events: Vec<Event>,
    window: Window,
}

impl PointPattern {
    pub fn new(events: Vec<Event>, window: Window) -> Result<Self> {
        if let Some(first) = events.first() {
            let marked = first.mark.is_some();
            let nu_dim = first.nu.len();
            for (i, e) in events.iter().enumerate() {
                if e.mark.is_some() != marked {
                    return Err(Error::invalid(format!(
                        "event {i}: marks must be present on all events or none"
                    )));
                }
                if e.nu.len() != nu_dim {
                    return Err(Error::invalid(format!(
                        "event {i} has {} nonspatial covariates, expected {nu_dim}",
                        e.nu.len()
                    )));
                }
                if !window.contains(&e.loc) {
                    return Err(Error::invalid(format!(
                        "event {i} at ({}, {}) lies outside the window",
                        e.loc.x, e.loc.y
                    )));
                }
            }
        }
        Ok(PointPattern { events, window })
    }

    pub fn n(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn locations(&self) -> Vec<Location> {
        self.events.iter().map(|e| e.loc).collect()
    }

    pub fn is_marked(&self) -> bool {
        self.events.first().is_some_and(|e| e.mark.is_some())
    }

    pub fn nu_dim(&self) -> usize {
        self.events.first().map_or(0, |e| e.nu.len())
    }

    /// Marks as a plain vector; errors if any event is unmarked.
    pub fn marks(&self) -> Result<Vec<f64>> {
        self.events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.mark.ok_or(Error::InvalidMark {
                    index: i,
                    mark: None,
                    expected: "a mark on every event",
                })
            })
            .collect()
    }
}

/// Sampling distribution of one nonspatial covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NonspatialDistribution {
    Uniform { lower: f64, upper: f64 },
    Beta { a: f64, b: f64 },
    Bernoulli { p: f64 },
}

impl NonspatialDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        Ok(match *self {
            NonspatialDistribution::Uniform { lower, upper } => rng.random_range(lower..upper),
            NonspatialDistribution::Beta { a, b } => Beta::new(a, b)
                .map_err(|e| Error::invalid(format!("invalid beta parameters: {e}")))?
                .sample(rng),
            NonspatialDistribution::Bernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid("bernoulli probability must lie in [0, 1]"));
                }
                f64::from(rng.random_bool(p))
            }
        })
    }

    /// The integration range implied by the distribution's support.
    pub fn bound(&self) -> NonspatialBound {
        match *self {
            NonspatialDistribution::Uniform { lower, upper } => {
                NonspatialBound::Continuous { lower, upper }
            }
            NonspatialDistribution::Beta { .. } => {
                NonspatialBound::Continuous { lower: 0.0, upper: 1.0 }
            }
            NonspatialDistribution::Bernoulli { .. } => NonspatialBound::Binary,
        }
    }

    /// Whether the per-mark intensity model can recover coefficients of a
    /// covariate drawn this way: its likelihood treats the covariate as
    /// uniform over the support, so only uniform continuous draws and
    /// equal-probability binary draws are compatible.
    pub fn is_uniform_like(&self) -> bool {
        match *self {
            NonspatialDistribution::Uniform { .. } => true,
            NonspatialDistribution::Beta { .. } => false,
            NonspatialDistribution::Bernoulli { p } => p == 0.5,
        }
    }
}

/// Integration ranges for a set of covariate distributions.
pub fn bounds_of(dists: &[NonspatialDistribution]) -> Vec<NonspatialBound> {
    dists.iter().map(|d| d.bound()).collect()
}

/// Mark regression family of the two-stage model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MarkModel {
    /// Binary marks via logit link.
    Logistic,
    /// Continuous marks with iid N(0, sigma_iid^2) noise.
    Linear { sigma_iid: f64 },
}

/// Which spatial random effects the two-stage simulation draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GpSim {
    /// No spatial random effect in either stage.
    None,
    /// Location stage only.
    Stage1 { phi: f64, sigma1: f64 },
    /// Both stages, independent processes.
    BothIndependent { phi: f64, sigma1: f64, sigma2: f64 },
    /// Both stages, coupled through a cross-covariance.
    Bivariate { phi: f64, lambda: Lambda },
    /// A surface realized earlier, evaluated at its own sites. Lets several
    /// replicate patterns share one set of random effects: simulate once,
    /// then feed the returned realization back in. One component drives the
    /// location stage only; a second, when present, drives the mark stage.
    Fixed { surface: GPRealization },
}

/// Ground truth for a two-stage simulation.
///
/// `beta[0]` is the location-stage intercept and `beta[1..]` pair with the
/// field covariates; `gamma` are the mark-stage spatial coefficients (no
/// intercept); `alpha[0]` is the mark-stage intercept and `alpha[1..]` pair
/// with the nonspatial covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub nu_dists: Vec<NonspatialDistribution>,
    pub mark_model: MarkModel,
    pub gp: GpSim,
}

/// Ground truth for a per-mark intensity simulation with two mark levels.
///
/// `beta[k][0]` is mark `k+1`'s intercept, `beta[k][1..]` pair with the
/// field covariates, and `alpha[k]` pair with the nonspatial covariates
/// (no separate intercept).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BivariateConfig {
    pub beta: [Vec<f64>; 2],
    pub alpha: [Vec<f64>; 2],
    pub nu_dists: Vec<NonspatialDistribution>,
    pub gp: Option<BivariateGp>,
}

/// Coupled spatial effects for the per-mark intensity simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGp {
    pub phi: f64,
    pub lambda: Lambda,
}

/// A simulated pattern together with the random-effect surface that
/// generated it (when the model has one).
#[derive(Debug, Clone)]
pub struct Simulated {
    pub pattern: PointPattern,
    pub gp: Option<GPRealization>,
}

// Cap on the expected homogeneous candidate count.
const MAX_EXPECTED_CANDIDATES: f64 = 1e8;

/// Nearest-site lookup strategy: constant-time when the lattice is a
/// grid's cell centers in row-major order, linear scan otherwise.
enum LatticeIndex {
    Grid {
        origin: Location,
        dx: f64,
        dy: f64,
        nx: usize,
        ny: usize,
    },
    Scan,
}

/// Lattice carrying the spatial random effects during simulation.
struct Lattice {
    sites: Vec<Location>,
    index: LatticeIndex,
}

impl Lattice {
    /// Index of the site nearest to `s`; ties keep the lowest index.
    fn nearest(&self, s: &Location) -> usize {
        match self.index {
            LatticeIndex::Grid { origin, dx, dy, nx, ny } => {
                let ix = (((s.x - origin.x) / dx - 0.5).ceil() as i64).clamp(0, nx as i64 - 1);
                let iy = (((s.y - origin.y) / dy - 0.5).ceil() as i64).clamp(0, ny as i64 - 1);
                iy as usize * nx + ix as usize
            }
            LatticeIndex::Scan => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, site) in self.sites.iter().enumerate() {
                    let d = site.distance(s);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            }
        }
    }
}

// Target site count for the default lattice over an areal partition.
const DEFAULT_LATTICE_TARGET: usize = 400;

fn build_lattice<R: Rng>(
    field: &CovariateField,
    override_sites: Option<&[Location]>,
    rng: &mut R,
) -> Result<Lattice> {
    if let Some(sites) = override_sites {
        if sites.is_empty() {
            return Err(Error::invalid("lattice override must be non-empty"));
        }
        return Ok(Lattice {
            sites: sites.to_vec(),
            index: LatticeIndex::Scan,
        });
    }
    match field {
        CovariateField::Grid(g) => {
            let (nx, ny) = g.shape();
            let (dx, dy) = g.cell_size();
            let mut sites = Vec::with_capacity(nx * ny);
            for iy in 0..ny {
                for ix in 0..nx {
                    sites.push(g.cell_center(ix, iy));
                }
            }
            let origin = g.cell_center(0, 0);
            Ok(Lattice {
                sites,
                index: LatticeIndex::Grid { origin, dx, dy, nx, ny },
            })
        }
        CovariateField::Areal(p) => {
            // bounding-box grid clipped to the window, densified so every
            // unit holds at least one site
            let target = DEFAULT_LATTICE_TARGET.max(4 * p.units().len());
            let g = (target as f64).sqrt().ceil() as usize;
            let (lo, hi) = p.window().bbox();
            let dx = (hi.x - lo.x) / g as f64;
            let dy = (hi.y - lo.y) / g as f64;
            let mut sites = Vec::new();
            let mut covered = vec![false; p.units().len()];
            for iy in 0..g {
                for ix in 0..g {
                    let s = Location::new(
                        lo.x + (ix as f64 + 0.5) * dx,
                        lo.y + (iy as f64 + 0.5) * dy,
                    );
                    if let Ok(u) = p.unit_index_at(&s) {
                        covered[u] = true;
                        sites.push(s);
                    }
                }
            }
            for (u, unit) in p.units().iter().enumerate() {
                if !covered[u] {
                    sites.push(unit.polygon.sample_uniform(rng));
                }
            }
            Ok(Lattice {
                sites,
                index: LatticeIndex::Scan,
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn poisson_count<R: Rng>(expected: f64, at: Location, rng: &mut R) -> Result<usize> {
    if !expected.is_finite() {
        return Err(Error::NonFiniteIntensity { x: at.x, y: at.y });
    }
    if expected > MAX_EXPECTED_CANDIDATES {
        return Err(Error::IntensityOverflow { expected });
    }
    if expected <= 0.0 {
        return Ok(0);
    }
    let n = Poisson::new(expected)
        .map_err(|e| Error::invalid(format!("invalid candidate mean {expected}: {e}")))?
        .sample(rng);
    Ok(n as usize)
}

/// Simulates a two-stage pattern: locations from a (log Gaussian) Cox
/// process thinned against the lattice maximum, then nonspatial covariates
/// and marks drawn per retained event.
pub fn simulate_two_stage<R: Rng>(
    field: &CovariateField,
    cfg: &TwoStageConfig,
    lattice_override: Option<&[Location]>,
    rng: &mut R,
) -> Result<Simulated> {
    let p = field.dim();
    if cfg.beta.len() != p + 1 {
        return Err(Error::invalid(format!(
            "beta has {} entries; expected {} (intercept + field covariates)",
            cfg.beta.len(),
            p + 1
        )));
    }
    if cfg.gamma.len() != p {
        return Err(Error::invalid(format!(
            "gamma has {} entries; expected {} (field covariates)",
            cfg.gamma.len(),
            p
        )));
    }
    if cfg.alpha.len() != cfg.nu_dists.len() + 1 {
        return Err(Error::invalid(format!(
            "alpha has {} entries; expected {} (intercept + nonspatial covariates)",
            cfg.alpha.len(),
            cfg.nu_dists.len() + 1
        )));
    }
    if let MarkModel::Linear { sigma_iid } = cfg.mark_model {
        if !(sigma_iid.is_finite() && sigma_iid > 0.0) {
            return Err(Error::invalid("mark noise scale must be finite and positive"));
        }
    }

    let window = field.window()?;
    let lattice = if let GpSim::Fixed { surface } = &cfg.gp {
        if lattice_override.is_some() {
            return Err(Error::invalid(
                "a fixed surface carries its own lattice; drop the override",
            ));
        }
        build_lattice(field, Some(&surface.sites), rng)?
    } else {
        build_lattice(field, lattice_override, rng)?
    };

    // draw the random effects at the lattice sites
    let (w1, w2): (Vec<f64>, Option<Vec<f64>>) = match &cfg.gp {
        GpSim::None => (vec![0.0; lattice.sites.len()], None),
        GpSim::Stage1 { phi, sigma1 } => (
            simulate_gp(&lattice.sites, *phi, sigma1 * sigma1, rng)?,
            None,
        ),
        GpSim::BothIndependent { phi, sigma1, sigma2 } => (
            simulate_gp(&lattice.sites, *phi, sigma1 * sigma1, rng)?,
            Some(simulate_gp(&lattice.sites, *phi, sigma2 * sigma2, rng)?),
        ),
        GpSim::Bivariate { phi, lambda } => {
            let (a, b) = simulate_bivariate_gp(&lattice.sites, *phi, lambda, rng)?;
            (a, Some(b))
        }
        GpSim::Fixed { surface } => (
            surface.components[0].clone(),
            surface.components.get(1).cloned(),
        ),
    };

    // intensity bound from the lattice
    let log_lambda_at = |s: &Location, w: f64| -> Result<f64> {
        let z = field.covariates_at(s)?;
        Ok(cfg.beta[0] + dot(z, &cfg.beta[1..]) + w)
    };
    let mut log_max = f64::NEG_INFINITY;
    let mut argmax = lattice.sites[0];
    for (i, site) in lattice.sites.iter().enumerate() {
        let v = log_lambda_at(site, w1[i])?;
        if v > log_max {
            log_max = v;
            argmax = *site;
        }
    }
    let lambda_max = log_max.exp();
    let n_cand = poisson_count(lambda_max * window.area(), argmax, rng)?;

    // thin homogeneous candidates
    let mut events = Vec::new();
    for _ in 0..n_cand {
        let s = window.sample_uniform(rng);
        let site = lattice.nearest(&s);
        let log_lambda = log_lambda_at(&s, w1[site])?;
        if rng.random::<f64>() < (log_lambda - log_max).exp() {
            // mark determination
            let nu: Vec<f64> = cfg
                .nu_dists
                .iter()
                .map(|d| d.sample(rng))
                .collect::<Result<_>>()?;
            let z = field.covariates_at(&s)?;
            let omega2 = w2.as_ref().map_or(0.0, |w| w[site]);
            let eta = cfg.alpha[0] + dot(z, &cfg.gamma) + dot(&nu, &cfg.alpha[1..]) + omega2;
            let mark = match cfg.mark_model {
                MarkModel::Logistic => {
                    let prob = 1.0 / (1.0 + (-eta).exp());
                    f64::from(rng.random_bool(prob))
                }
                MarkModel::Linear { sigma_iid } => {
                    eta + Normal::new(0.0, sigma_iid).unwrap().sample(rng)
                }
            };
            events.push(Event {
                loc: s,
                mark: Some(mark),
                nu,
            });
        }
    }

    let mut components = vec![w1];
    if let Some(w) = w2 {
        components.push(w);
    }
    Ok(Simulated {
        pattern: PointPattern::new(events, window)?,
        gp: Some(GPRealization::new(lattice.sites, components)?).filter(|_| cfg.gp != GpSim::None),
    })
}

/// Largest value `nu' alpha` can take over the covariate ranges.
fn max_nonspatial_term(bounds: &[NonspatialBound], alpha: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (j, (b, &a)) in bounds.iter().zip(alpha.iter()).enumerate() {
        b.validate(j)?;
        acc += match *b {
            NonspatialBound::Continuous { lower, upper } => (a * lower).max(a * upper),
            NonspatialBound::Binary => a.max(0.0),
        };
    }
    Ok(acc)
}

/// Simulates a two-mark pattern where each mark level has its own intensity
/// surface over location and nonspatial covariates. Covariates are drawn
/// per candidate before thinning, so they shape which events survive.
pub fn simulate_bivariate<R: Rng>(
    field: &CovariateField,
    cfg: &BivariateConfig,
    lattice_override: Option<&[Location]>,
    rng: &mut R,
) -> Result<Simulated> {
    let p = field.dim();
    for k in 0..2 {
        if cfg.beta[k].len() != p + 1 {
            return Err(Error::invalid(format!(
                "beta for mark {} has {} entries; expected {}",
                k + 1,
                cfg.beta[k].len(),
                p + 1
            )));
        }
        if cfg.alpha[k].len() != cfg.nu_dists.len() {
            return Err(Error::invalid(format!(
                "alpha for mark {} has {} entries; expected {}",
                k + 1,
                cfg.alpha[k].len(),
                cfg.nu_dists.len()
            )));
        }
    }
    for d in &cfg.nu_dists {
        if !d.is_uniform_like() {
            log::warn!(
                "nonspatial covariate drawn from a non-uniform distribution; \
                 its coefficients are not recoverable by the per-mark intensity model"
            );
        }
    }

    let window = field.window()?;
    let lattice = build_lattice(field, lattice_override, rng)?;
    let bounds = bounds_of(&cfg.nu_dists);

    let (w1, w2) = match cfg.gp {
        Some(BivariateGp { phi, lambda }) => {
            simulate_bivariate_gp(&lattice.sites, phi, &lambda, rng)?
        }
        None => (
            vec![0.0; lattice.sites.len()],
            vec![0.0; lattice.sites.len()],
        ),
    };
    let omegas = [&w1, &w2];

    let mut events = Vec::new();
    for k in 0..2 {
        let beta = &cfg.beta[k];
        let alpha = &cfg.alpha[k];
        let omega = omegas[k];

        let log_spatial_at = |s: &Location, w: f64| -> Result<f64> {
            let z = field.covariates_at(s)?;
            Ok(beta[0] + dot(z, &beta[1..]) + w)
        };
        let mut log_max = f64::NEG_INFINITY;
        let mut argmax = lattice.sites[0];
        for (i, site) in lattice.sites.iter().enumerate() {
            let v = log_spatial_at(site, omega[i])?;
            if v > log_max {
                log_max = v;
                argmax = *site;
            }
        }
        log_max += max_nonspatial_term(&bounds, alpha)?;
        let lambda_max = log_max.exp();
        let n_cand = poisson_count(lambda_max * window.area(), argmax, rng)?;

        for _ in 0..n_cand {
            let s = window.sample_uniform(rng);
            let nu: Vec<f64> = cfg
                .nu_dists
                .iter()
                .map(|d| d.sample(rng))
                .collect::<Result<_>>()?;
            let site = lattice.nearest(&s);
            let log_lambda = log_spatial_at(&s, omega[site])? + dot(&nu, alpha);
            if rng.random::<f64>() < (log_lambda - log_max).exp() {
                events.push(Event {
                    loc: s,
                    mark: Some((k + 1) as f64),
                    nu,
                });
            }
        }
    }

    let gp = cfg
        .gp
        .map(|_| GPRealization::new(lattice.sites, vec![w1, w2]))
        .transpose()?;
    Ok(Simulated {
        pattern: PointPattern::new(events, window)?,
        gp,
    })
}
