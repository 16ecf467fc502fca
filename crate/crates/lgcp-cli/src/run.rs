//! Run configuration (TOML) and the four subcommand implementations.
//!
//! Every run is described by one declarative config file; command-line flags
//! override a handful of common fields (seed, output dir, chain lengths,
//! knots, budget). The resolved config is re-serialized into the output
//! directory, and the run manifest records it plus SHA-256 hashes of every
//! input, so any artifact directory can reproduce itself bit-for-bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lgcp::covariance::{default_knots, fix_phi, GPSpec, Lambda};
use lgcp::error::{Error, Result};
use lgcp::geometry::CovariateField;
use lgcp::inference::{
    compare_models, mcmc_diagnostics, run_mcmc, summarize_samples, waic, McmcConfig,
    PosteriorChain, WaicResult,
};
use lgcp::integration::{IntegrationScheme, NonspatialBound};
use lgcp::likelihood::{
    Evaluator, MarkLink, ModelFamily, ModelSpec, ParameterState, RandomEffects,
};
use lgcp::simulate::{
    simulate_bivariate, simulate_two_stage, BivariateConfig, BivariateGp, Event, GpSim,
    MarkModel, NonspatialDistribution, PointPattern, TwoStageConfig,
};
use lgcp::io;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

// ----- config file ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub paths: Paths,
    #[serde(default)]
    pub data: DataOpts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcCfg>,
    #[serde(default)]
    pub integration: IntegrationCfg,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Covariate field: `.geojson`/`.json` for areal units, `.csv` for grids.
    pub covariates: String,
    /// Event pattern CSV (fit input; simulate writes its own).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub output_dir: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOpts {
    /// Swap the x/y columns of a grid covariate CSV at ingest.
    #[serde(default)]
    pub grid_transpose: bool,
    /// Log-transform the (strictly positive) mark at ingest.
    #[serde(default)]
    pub log_mark: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// Label used in comparisons; defaults to a structural name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// "two-stage" or "per-mark".
    pub family: String,
    /// Two-stage shorthand 1-4: none / location GP / independent GPs /
    /// coupled GPs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<u8>,
    /// Two-stage mark regression: "logistic" or "linear".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
    /// Per-mark family: whether the intensities carry coupled GPs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub with_gp: Option<bool>,
    #[serde(default)]
    pub stage1: Vec<String>,
    #[serde(default)]
    pub stage2: Vec<String>,
    /// Nonspatial covariate columns to use (default: all in the pattern CSV).
    #[serde(default)]
    pub nu: Vec<String>,
    /// Integration ranges of the nonspatial covariates (per-mark fits).
    #[serde(default)]
    pub nu_ranges: Vec<NuRange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<usize>,
    /// Fixed GP decay range; estimated from the event spread when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuRange {
    pub name: String,
    #[serde(default)]
    pub binary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcCfg {
    pub iterations: usize,
    pub burnin: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "one")]
    pub chains: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationCfg {
    #[serde(default = "default_budget")]
    pub budget: usize,
}

impl Default for IntegrationCfg {
    fn default() -> Self {
        IntegrationCfg { budget: default_budget() }
    }
}

fn default_budget() -> usize {
    400
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCfg {
    /// "two-stage" or "per-mark".
    pub family: String,
    pub seed: u64,
    // two-stage truth
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mark_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_iid: Option<f64>,
    // per-mark truth
    #[serde(default)]
    pub beta1: Vec<f64>,
    #[serde(default)]
    pub beta2: Vec<f64>,
    #[serde(default)]
    pub alpha1: Vec<f64>,
    #[serde(default)]
    pub alpha2: Vec<f64>,
    /// Random-effect structure: "none", "stage1", "independent", "coupled"
    /// (two-stage) or "none"/"coupled" (per-mark).
    #[serde(default = "none_str")]
    pub gp: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default)]
    pub nu: Vec<NuSpec>,
}

fn none_str() -> String {
    "none".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuSpec {
    pub name: String,
    /// "uniform", "beta", or "bernoulli".
    pub dist: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
    pub thin: Option<usize>,
    pub chains: Option<usize>,
    pub knots: Option<usize>,
    pub budget: Option<usize>,
}

pub fn load_config(path: &Path, over: &Overrides) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
    let mut cfg: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    if let Some(dir) = &over.output_dir {
        cfg.paths.output_dir = dir.to_string_lossy().into_owned();
    }
    if let Some(budget) = over.budget {
        cfg.integration.budget = budget;
    }
    if let Some(m) = &mut cfg.mcmc {
        if let Some(v) = over.seed {
            m.seed = v;
        }
        if let Some(v) = over.iters {
            m.iterations = v;
        }
        if let Some(v) = over.burnin {
            m.burnin = v;
        }
        if let Some(v) = over.thin {
            m.thin = v;
        }
        if let Some(v) = over.chains {
            m.chains = v;
        }
    }
    if let Some(model) = &mut cfg.model {
        if let Some(v) = over.knots {
            model.knots = Some(v);
        }
    }
    if let Some(sim) = &mut cfg.simulate {
        if let Some(v) = over.seed {
            sim.seed = v;
        }
    }
    Ok(cfg)
}

// ----- shared plumbing --------------------------------------------------------

fn read_field(cfg: &FileConfig) -> Result<CovariateField> {
    let path = &cfg.paths.covariates;
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".geojson") || lower.ends_with(".json") {
        Ok(CovariateField::Areal(io::read_areal_geojson(path)?))
    } else {
        Ok(CovariateField::Grid(io::read_grid_csv(path, cfg.data.grid_transpose)?))
    }
}

fn out_path(cfg: &FileConfig, name: &str) -> String {
    Path::new(&cfg.paths.output_dir)
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn ensure_output_dir(cfg: &FileConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.output_dir)
        .map_err(|e| Error::io(cfg.paths.output_dir.clone(), e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a FileConfig,
    /// SHA-256 of every input file.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(
    cfg: &FileConfig,
    command: &str,
    input_paths: &[&str],
    outputs: Vec<String>,
) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for p in input_paths {
        inputs.insert(p.to_string(), io::sha256_hex(p)?);
    }
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        inputs,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    io::write_text(out_path(cfg, "manifest.json"), &(json + "\n"))?;
    // the resolved config alone re-runs the command
    let toml_text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::invalid(format!("config serialization: {e}")))?;
    io::write_text(out_path(cfg, "resolved.toml"), &toml_text)
}

fn nu_dists(specs: &[NuSpec]) -> Result<Vec<NonspatialDistribution>> {
    specs
        .iter()
        .map(|s| {
            let need = |v: Option<f64>, field: &str| {
                v.ok_or_else(|| {
                    Error::invalid(format!(
                        "covariate '{}': {} distribution needs '{field}'",
                        s.name, s.dist
                    ))
                })
            };
            match s.dist.as_str() {
                "uniform" => Ok(NonspatialDistribution::Uniform {
                    lower: need(s.lower, "lower")?,
                    upper: need(s.upper, "upper")?,
                }),
                "beta" => Ok(NonspatialDistribution::Beta {
                    a: need(s.a, "a")?,
                    b: need(s.b, "b")?,
                }),
                "bernoulli" => Ok(NonspatialDistribution::Bernoulli { p: need(s.p, "p")? }),
                other => Err(Error::invalid(format!(
                    "covariate '{}': unknown distribution '{other}' \
                     (expected uniform, beta, or bernoulli)",
                    s.name
                ))),
            }
        })
        .collect()
}

// ----- simulate ---------------------------------------------------------------

pub fn cmd_simulate(cfg: &FileConfig) -> Result<()> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::invalid("the config has no [simulate] table"))?;
    let field = read_field(cfg)?;
    ensure_output_dir(cfg)?;
    let dists = nu_dists(&sim.nu)?;
    let nu_names: Vec<String> = sim.nu.iter().map(|s| s.name.clone()).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(sim.seed);

    let pattern = match sim.family.as_str() {
        "two-stage" => {
            let need = |v: Option<f64>, what: &str| {
                v.ok_or_else(|| Error::invalid(format!("[simulate] needs '{what}'")))
            };
            let gp = match sim.gp.as_str() {
                "none" => GpSim::None,
                "stage1" => GpSim::Stage1 {
                    phi: need(sim.phi, "phi")?,
                    sigma1: need(sim.sigma1, "sigma1")?,
                },
                "independent" => GpSim::BothIndependent {
                    phi: need(sim.phi, "phi")?,
                    sigma1: need(sim.sigma1, "sigma1")?,
                    sigma2: need(sim.sigma2, "sigma2")?,
                },
                "coupled" => GpSim::Bivariate {
                    phi: need(sim.phi, "phi")?,
                    lambda: Lambda::new(
                        need(sim.sigma1, "sigma1")?,
                        need(sim.sigma2, "sigma2")?,
                        need(sim.rho, "rho")?,
                    )?,
                },
                other => {
                    return Err(Error::invalid(format!(
                        "unknown gp structure '{other}' \
                         (expected none, stage1, independent, or coupled)"
                    )))
                }
            };
            let mark_model = match sim.mark_model.as_deref() {
                Some("logistic") | None => MarkModel::Logistic,
                Some("linear") => MarkModel::Linear {
                    sigma_iid: need(sim.sigma_iid, "sigma_iid")?,
                },
                Some(other) => {
                    return Err(Error::invalid(format!(
                        "unknown mark model '{other}' (expected logistic or linear)"
                    )))
                }
            };
            let two = TwoStageConfig {
                beta: sim.beta.clone(),
                gamma: sim.gamma.clone(),
                alpha: sim.alpha.clone(),
                nu_dists: dists,
                mark_model,
                gp,
            };
            simulate_two_stage(&field, &two, None, &mut rng)?.pattern
        }
        "per-mark" => {
            let gp = match sim.gp.as_str() {
                "none" => None,
                "coupled" => {
                    let need = |v: Option<f64>, what: &str| {
                        v.ok_or_else(|| Error::invalid(format!("[simulate] needs '{what}'")))
                    };
                    Some(BivariateGp {
                        phi: need(sim.phi, "phi")?,
                        lambda: Lambda::new(
                            need(sim.sigma1, "sigma1")?,
                            need(sim.sigma2, "sigma2")?,
                            need(sim.rho, "rho")?,
                        )?,
                    })
                }
                other => {
                    return Err(Error::invalid(format!(
                        "unknown gp structure '{other}' for the per-mark family \
                         (expected none or coupled)"
                    )))
                }
            };
            let biv = BivariateConfig {
                beta: [sim.beta1.clone(), sim.beta2.clone()],
                alpha: [sim.alpha1.clone(), sim.alpha2.clone()],
                nu_dists: dists,
                gp,
            };
            simulate_bivariate(&field, &biv, None, &mut rng)?.pattern
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown family '{other}' (expected two-stage or per-mark)"
            )))
        }
    };

    let pattern_path = out_path(cfg, "pattern.csv");
    io::write_pattern(&pattern_path, &pattern, &nu_names)?;
    log::info!("simulated {} events -> {pattern_path}", pattern.n());
    write_manifest(cfg, "simulate", &[&cfg.paths.covariates], vec!["pattern.csv".into()])
}

// ----- fit ---------------------------------------------------------------------

fn build_model(
    model: &ModelCfg,
    pattern: &PointPattern,
    csv_nu_names: &[String],
    window: &lgcp::geometry::Window,
) -> Result<(ModelSpec, Vec<NonspatialBound>, PointPattern)> {
    // select nonspatial covariate columns (all of them by default)
    let selected: Vec<String> = if model.nu.is_empty() {
        csv_nu_names.to_vec()
    } else {
        model.nu.clone()
    };
    let col_of = |name: &String| {
        csv_nu_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "nonspatial covariate '{name}' is not a column of the pattern file"
                ))
            })
    };
    let cols: Vec<usize> = selected.iter().map(col_of).collect::<Result<_>>()?;
    let events: Vec<Event> = pattern
        .events()
        .iter()
        .map(|e| Event {
            loc: e.loc,
            mark: e.mark,
            nu: cols.iter().map(|&c| e.nu[c]).collect(),
        })
        .collect();
    let pattern = PointPattern::new(events, pattern.window().clone())?;

    let family = match model.family.as_str() {
        "two-stage" => {
            let effects = match model.model.unwrap_or(1) {
                1 => RandomEffects::None,
                2 => RandomEffects::LocationOnly,
                3 => RandomEffects::Independent,
                4 => RandomEffects::Coupled,
                other => {
                    return Err(Error::invalid(format!(
                        "model = {other} is out of range (1-4)"
                    )))
                }
            };
            let link = match model.link.as_deref() {
                Some("logistic") | None => MarkLink::Logistic,
                Some("linear") => MarkLink::Linear,
                Some(other) => {
                    return Err(Error::invalid(format!(
                        "unknown link '{other}' (expected logistic or linear)"
                    )))
                }
            };
            ModelFamily::TwoStage { effects, link }
        }
        "per-mark" => ModelFamily::PerMark { with_gp: model.with_gp.unwrap_or(false) },
        other => {
            return Err(Error::invalid(format!(
                "unknown family '{other}' (expected two-stage or per-mark)"
            )))
        }
    };

    let needs_gp = match family {
        ModelFamily::TwoStage { effects, .. } => effects != RandomEffects::None,
        ModelFamily::PerMark { with_gp } => with_gp,
    };
    let gp = if needs_gp {
        let phi = match model.phi {
            Some(v) => v,
            None => {
                let phi = fix_phi(&pattern.locations())?;
                log::info!("fixed GP decay range from the event spread: phi = {phi:.6}");
                phi
            }
        };
        let knots = default_knots(window, model.knots.unwrap_or(100))?;
        log::info!("using {} knots", knots.len());
        Some(GPSpec::new(phi, knots)?)
    } else {
        None
    };

    let bounds: Vec<NonspatialBound> = if matches!(family, ModelFamily::PerMark { .. }) {
        selected
            .iter()
            .map(|name| {
                let r = model
                    .nu_ranges
                    .iter()
                    .find(|r| &r.name == name)
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "per-mark fits need a [[model.nu_ranges]] entry for '{name}'"
                        ))
                    })?;
                if r.binary {
                    Ok(NonspatialBound::Binary)
                } else {
                    match (r.lower, r.upper) {
                        (Some(lower), Some(upper)) => {
                            Ok(NonspatialBound::Continuous { lower, upper })
                        }
                        _ => Err(Error::invalid(format!(
                            "nu_ranges entry '{name}' needs lower and upper (or binary = true)"
                        ))),
                    }
                }
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let spec = ModelSpec {
        family,
        stage1_vars: model.stage1.clone(),
        stage2_vars: model.stage2.clone(),
        nu_names: selected,
        gp,
    };
    spec.validate()?;
    Ok((spec, bounds, pattern))
}

fn model_label(model: &ModelCfg) -> String {
    if let Some(name) = &model.name {
        return name.clone();
    }
    match model.family.as_str() {
        "two-stage" => format!("two-stage-{}", model.model.unwrap_or(1)),
        _ => {
            if model.with_gp.unwrap_or(false) {
                "per-mark-gp".to_string()
            } else {
                "per-mark".to_string()
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WaicArtifact {
    name: String,
    waic: WaicResult,
}

pub fn cmd_fit(cfg: &FileConfig) -> Result<()> {
    let model = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::invalid("the config has no [model] table"))?;
    let mcmc = cfg
        .mcmc
        .as_ref()
        .ok_or_else(|| Error::invalid("the config has no [mcmc] table"))?;
    let pattern_path = cfg
        .paths
        .pattern
        .as_ref()
        .ok_or_else(|| Error::invalid("fit needs paths.pattern"))?;
    if mcmc.chains == 0 {
        return Err(Error::invalid("chains must be at least 1"));
    }

    let field = read_field(cfg)?;
    let window = field.window()?;
    let (raw_pattern, csv_nu) = io::read_pattern(pattern_path, &window, cfg.data.log_mark)?;
    log::info!("{} events from {pattern_path}", raw_pattern.n());
    let (spec, bounds, pattern) = build_model(model, &raw_pattern, &csv_nu, &window)?;

    let mut scheme_rng = rand::rngs::StdRng::seed_from_u64(mcmc.seed);
    let scheme = match &field {
        CovariateField::Areal(p) => {
            IntegrationScheme::from_partition(p, cfg.integration.budget, &mut scheme_rng)?
        }
        CovariateField::Grid(g) => {
            let (nx, ny) = g.shape();
            let per_cell = (cfg.integration.budget / (nx * ny)).max(1);
            IntegrationScheme::from_grid(g, per_cell, &mut scheme_rng)?
        }
    };
    log::info!("integration scheme with {} points", scheme.len());

    let ev = Evaluator::new(spec.clone(), &field, &[&pattern], &scheme, &bounds)?;
    let init = ev.initial_state()?;

    ensure_output_dir(cfg)?;
    let chains = run_chains(&ev, &init, mcmc)?;

    let mut outputs = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let name = format!("chain_{c}.csv");
        io::write_chain_csv(&out_path(cfg, &name), chain)?;
        outputs.push(name);
    }

    // pool retained samples and pointwise contributions across chains
    let pooled_samples: Vec<Vec<f64>> =
        chains.iter().flat_map(|c| c.samples.iter().cloned()).collect();
    let table = summarize_samples(&chains[0].param_names, &pooled_samples)?;
    io::write_summary_csv(&out_path(cfg, "summary.csv"), &table)?;
    outputs.push("summary.csv".into());
    print!("{table}");

    let total_rows: usize = chains.iter().map(|c| c.pointwise.nrows()).sum();
    let n_events = chains[0].pointwise.ncols();
    let pooled_pointwise = nalgebra::DMatrix::from_fn(total_rows, n_events, |r, c| {
        let mut row = r;
        for chain in &chains {
            if row < chain.pointwise.nrows() {
                return chain.pointwise[(row, c)];
            }
            row -= chain.pointwise.nrows();
        }
        unreachable!()
    });
    let label = model_label(model);
    if n_events > 0 && total_rows >= 2 {
        let w = waic(&pooled_pointwise)?;
        println!(
            "WAIC {:.3} (lppd {:.3}, penalty {:.3}) on {} events",
            w.waic, w.lppd, w.p_waic, w.n_points
        );
        let artifact = WaicArtifact { name: label.clone(), waic: w };
        let json = serde_json::to_string_pretty(&artifact)
            .map_err(|e| Error::invalid(format!("waic serialization: {e}")))?;
        io::write_text(out_path(cfg, "waic.json"), &(json + "\n"))?;
        outputs.push("waic.json".into());
    }

    let mut report = String::new();
    report.push_str(&format!("model: {label}\n"));
    report.push_str(&format!("events: {}\n", pattern.n()));
    report.push_str(&format!(
        "chains: {} x {} retained\n",
        chains.len(),
        chains[0].n_retained()
    ));
    for (c, chain) in chains.iter().enumerate() {
        report.push_str(&format!("\n[chain {c}] seed {}\n", chain.seed));
        report.push_str("acceptance rates (observed vs target):\n");
        for a in &chain.acceptance {
            report.push_str(&format!(
                "  {:<16} {:.3} vs {:.3}\n",
                a.name, a.observed, a.target
            ));
        }
        let diag = mcmc_diagnostics(chain);
        report.push_str("effective sample sizes (ess, mcse):\n");
        for ((name, ess), err) in diag.names.iter().zip(&diag.ess).zip(&diag.mcse) {
            report.push_str(&format!("  {name:<16} {ess:>10.1} {err:>12.6}\n"));
        }
    }
    io::write_text(out_path(cfg, "diagnostics.txt"), &report)?;
    outputs.push("diagnostics.txt".into());

    if let Some(gp) = &spec.gp {
        io::write_knots_csv(&out_path(cfg, "knots.csv"), &gp.knots)?;
        outputs.push("knots.csv".into());
    }
    io::write_scheme_csv(&out_path(cfg, "scheme.csv"), &scheme)?;
    outputs.push("scheme.csv".into());

    write_manifest(
        cfg,
        "fit",
        &[&cfg.paths.covariates, pattern_path.as_str()],
        outputs,
    )
}

/// Runs the requested number of chains concurrently with distinct seeds
/// (base seed + 1 + chain index).
fn run_chains(
    ev: &Evaluator,
    init: &ParameterState,
    mcmc: &McmcCfg,
) -> Result<Vec<PosteriorChain>> {
    let configs: Vec<McmcConfig> = (0..mcmc.chains)
        .map(|c| McmcConfig {
            iterations: mcmc.iterations,
            burnin: mcmc.burnin,
            thin: mcmc.thin,
            seed: mcmc.seed.wrapping_add(1 + c as u64),
        })
        .collect();
    let results: Vec<Result<PosteriorChain>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| scope.spawn(move || run_mcmc(ev, init, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

// ----- compare --------------------------------------------------------------------

pub fn cmd_compare(fit_dirs: &[PathBuf], output_dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for dir in fit_dirs {
        let path = dir.join("waic.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
        let artifact: WaicArtifact = serde_json::from_str(&text).map_err(|e| {
            Error::ParseError {
                path: path.to_string_lossy().into_owned(),
                row: 0,
                reason: e.to_string(),
            }
        })?;
        entries.push((artifact.name, artifact.waic));
    }
    let rows = compare_models(entries)?;

    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::io(output_dir.to_string_lossy().into_owned(), e))?;
    let ranking = output_dir.join("ranking.csv");
    let mut text = String::from("model,waic,lppd,p_waic,delta\n");
    println!("{:<20} {:>12} {:>10}", "model", "waic", "delta");
    for row in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.name, row.waic.waic, row.waic.lppd, row.waic.p_waic, row.delta
        ));
        println!("{:<20} {:>12.3} {:>10.3}", row.name, row.waic.waic, row.delta);
    }
    io::write_text(&ranking, &text)
}

// ----- summarize -----------------------------------------------------------------

pub fn cmd_summarize(chain_paths: &[PathBuf], output_dir: &Path) -> Result<()> {
    if chain_paths.is_empty() {
        return Err(Error::invalid("summarize needs at least one --chain file"));
    }
    let mut names: Vec<String> = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for path in chain_paths {
        let (chain_names, mut chain_samples) =
            io::read_chain_csv(&path.to_string_lossy())?;
        if names.is_empty() {
            names = chain_names;
        } else if names != chain_names {
            return Err(Error::invalid(format!(
                "{} has different parameters than the first chain",
                path.display()
            )));
        }
        samples.append(&mut chain_samples);
    }
    let table = summarize_samples(&names, &samples)?;
    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::io(output_dir.to_string_lossy().into_owned(), e))?;
    io::write_summary_csv(&output_dir.join("summary.csv").to_string_lossy(), &table)?;
    print!("{table}");
    Ok(())
}
