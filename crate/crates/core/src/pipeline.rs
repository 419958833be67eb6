//! Stage runner behind the command-line interface.
//!
//! Every stage writes its artifacts before the next one starts, so a failure
//! leaves the earlier outputs in place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    ExperimentConfig, LikelihoodSpec, NetworkConfig, ObservationSpec, ReferenceKind,
};
use crate::diagnostics::{density_from_samples, kl_riemann, mode_mass, DensityGrid, GridBox};
use crate::diffusion::{generate_labels, BoxPrior, DatasetMeta, LabeledSet, PriorDataset};
use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;
use crate::mcmc::{run_chain, ChainOutput, McmcConfig};
use crate::problems::{
    build_dataset, gaussian_log_kernel, simulate_rows, Fidelity, ForwardProblem, ProblemConfig,
};
use crate::refinement::{
    design_on, fit_kde_with, generate_refined_labels, padded_bounds, refined_bounds, LogDensity,
    ProposalCorrection,
};
use crate::surrogate::{
    generate_samples, mlp_forward, mlp_init, mlp_train, MlpModel, TrainConfig, TrainReport,
};

pub const PRIOR_CSV: &str = "prior.csv";
pub const PRIOR_META: &str = "prior_meta.json";
pub const LABELS_CSV: &str = "labels.csv";
pub const MODEL_LOW: &str = "model_low.json";
pub const METRICS: &str = "metrics.json";
pub const MCMC_METRICS: &str = "mcmc_metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.json";

/// Mesh cells per dimension for density CSVs without a configured grid.
const DEFAULT_DENSITY_CELLS: [usize; 2] = [1000, 100];

pub fn samples_low_file(tag: &str) -> String {
    format!("samples_low_{tag}.csv")
}

pub fn refined_file(tag: &str) -> String {
    format!("refined_{tag}.csv")
}

pub fn labels_high_file(tag: &str) -> String {
    format!("labels_high_{tag}.csv")
}

pub fn model_high_file(tag: &str) -> String {
    format!("model_high_{tag}.json")
}

pub fn samples_high_file(tag: &str) -> String {
    format!("samples_high_{tag}.csv")
}

pub fn samples_mcmc_file(tag: &str) -> String {
    format!("samples_mcmc_{tag}.csv")
}

pub fn density_file(tag: &str) -> String {
    format!("density_{tag}.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stopped_early: bool,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            epochs_run: r.loss_trace.len().saturating_sub(1),
            best_epoch: r.best_epoch,
            initial_loss: r.initial_loss(),
            final_loss: r.final_loss(),
            stopped_early: r.stopped_early,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationMetrics {
    pub tag: String,
    pub y: Vec<f64>,
    pub kl_low: Option<f64>,
    pub kl_labels: Option<f64>,
    pub kl_high: Option<f64>,
    pub mode_mass_low: Option<Vec<f64>>,
    pub mode_mass_high: Option<Vec<f64>>,
    pub refined_bounds: Option<BoxPrior>,
    pub n_refine: Option<usize>,
    pub train_high: Option<TrainSummary>,
    pub reference_acceptance: Option<f64>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub problem: String,
    pub seed: u64,
    pub n_prior: usize,
    pub label_count: usize,
    pub train_low: TrainSummary,
    pub timings: BTreeMap<String, f64>,
    pub observations: Vec<ObservationMetrics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcRunMetrics {
    pub tag: String,
    pub y: Vec<f64>,
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub nan_count: usize,
    pub stagnated: bool,
    /// Wall-clock seconds for burn-in plus sampling.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcMetrics {
    pub problem: String,
    pub seed: u64,
    pub likelihood: String,
    pub surrogate_seconds: Option<f64>,
    pub runs: Vec<McmcRunMetrics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// SHA-256 of every artifact in the run directory.
    pub files: BTreeMap<String, String>,
}

/// Settings that determine `prior.csv`; a stored prior is reused only if they match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PriorFile {
    problem: ProblemConfig,
    prior_grid: crate::problems::GridSpec,
    noisy_training_obs: bool,
    seed: u64,
    meta: DatasetMeta,
}

fn prior_key(cfg: &ExperimentConfig, meta: DatasetMeta) -> PriorFile {
    PriorFile {
        problem: cfg.problem.clone(),
        prior_grid: cfg.prior_grid.clone(),
        noisy_training_obs: cfg.noisy_training_obs,
        seed: cfg.seed,
        meta,
    }
}

fn stage<T>(
    name: &str,
    timings: &mut BTreeMap<String, f64>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    info!("stage {name}");
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage: name.into(),
        source: Box::new(e),
    });
    timings.insert(name.into(), start.elapsed().as_secs_f64());
    out
}

fn noise_seed(cfg: &ExperimentConfig) -> Option<u64> {
    cfg.noisy_training_obs.then_some(cfg.seed)
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(path)?);
    Ok(hex::encode(h.finalize()))
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let mut files = BTreeMap::new();
    let mut names: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    for p in names {
        let name = p
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        if name == MANIFEST || name.ends_with(".tmp") {
            continue;
        }
        files.insert(name, sha256_file(&p)?);
    }
    io::write_json(
        &out.join(MANIFEST),
        &Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            files,
        },
    )
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_COPY))
}

/// Writes via a temporary file so a failed stage never leaves a partial artifact.
fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    match f(&tmp) {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_prior(cfg: &ExperimentConfig, out: &Path) -> Result<PriorDataset> {
    let problem = cfg.problem.forward();
    let thetas = cfg.prior_grid.points(problem.prior())?;
    let path = out.join(PRIOR_CSV);
    let data = match build_dataset(problem, thetas, Fidelity::Low, noise_seed(cfg)) {
        Ok(d) => d,
        Err(e) => {
            let _ = fs::remove_file(&path);
            return Err(e);
        }
    };
    write_atomic(&path, |p| {
        data.write_csv(std::io::BufWriter::new(fs::File::create(p)?))
    })?;
    io::write_json(&out.join(PRIOR_META), &prior_key(cfg, data.meta()))?;
    Ok(data)
}

/// Simulates the prior grid at low fidelity and writes `prior.csv`.
pub fn cmd_generate_prior(cfg: &ExperimentConfig, out: &Path) -> Result<PriorDataset> {
    prepare_out(cfg, out)?;
    let mut timings = BTreeMap::new();
    let data = stage("generate_prior", &mut timings, || write_prior(cfg, out))?;
    info!(
        "prior dataset: {} rows in {:.2}s",
        data.len(),
        timings["generate_prior"]
    );
    write_manifest(out, "generate-prior", cfg)?;
    Ok(data)
}

fn load_or_generate_prior(cfg: &ExperimentConfig, out: &Path) -> Result<PriorDataset> {
    let (csv, meta) = (out.join(PRIOR_CSV), out.join(PRIOR_META));
    if csv.is_file() && meta.is_file() {
        if let Ok(stored) = io::read_json::<PriorFile>(&meta) {
            if stored == prior_key(cfg, stored.meta.clone()) {
                info!("reusing {}", csv.display());
                return PriorDataset::read_csv(fs::File::open(&csv)?, stored.meta);
            }
        }
    }
    write_prior(cfg, out)
}

fn observation_y(problem: &dyn ForwardProblem, o: &ObservationSpec) -> Result<Vec<f64>> {
    match (&o.y, &o.theta) {
        (Some(y), _) => Ok(y.clone()),
        (None, Some(t)) => problem.reference_observe(t),
        (None, None) => Err(Error::Config(format!(
            "observation {} has no y or theta",
            o.tag
        ))),
    }
}

fn train_model(
    network: &NetworkConfig,
    inputs: &Matrix,
    targets: &Matrix,
    train: &TrainConfig,
    seed: u64,
) -> Result<(MlpModel, TrainReport)> {
    let dims = network.layer_dims(inputs.cols(), targets.cols());
    let model = mlp_init(&dims, network.activation, seed)?;
    let mut tc = train.clone();
    tc.seed = seed;
    mlp_train(model, inputs, targets, &tc)
}

fn fit_generator(
    labels: &LabeledSet,
    network: &NetworkConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(MlpModel, TrainReport)> {
    train_model(network, &labels.inputs(), &labels.targets, train, seed)
}

fn density_grid(o: &ObservationSpec, fallback: &BoxPrior) -> GridBox {
    o.kl_grid.clone().unwrap_or_else(|| GridBox {
        lo: fallback.lo.clone(),
        hi: fallback.hi.clone(),
        counts: vec![DEFAULT_DENSITY_CELLS[fallback.dim() - 1]; fallback.dim()],
    })
}

fn mcmc_settings(cfg: &ExperimentConfig) -> McmcConfig {
    McmcConfig {
        walkers: cfg.mcmc.walkers,
        burn_in: cfg.mcmc.burn_in,
        n_samples: cfg.mcmc.n_samples,
        stretch: cfg.mcmc.stretch,
        seed: cfg.seed,
    }
}

/// Ensemble MCMC on `log p(theta) + log L(theta)`.
fn run_posterior_chain<L>(cfg: &ExperimentConfig, loglike: L) -> Result<ChainOutput>
where
    L: Fn(&[f64]) -> Result<f64> + Sync,
{
    let problem = cfg.problem.forward();
    let prior = problem.prior();
    let log_post = |th: &[f64]| {
        if !prior.contains(th) {
            return f64::NEG_INFINITY;
        }
        loglike(th).unwrap_or(f64::NEG_INFINITY)
    };
    let init = cfg.mcmc.init.clone().unwrap_or_else(|| prior.clone());
    run_chain(&log_post, &init, &mcmc_settings(cfg))
}

/// KL of the KDE of `samples` against `reference`; degenerate sample sets are reported, not fatal.
fn kl_of_samples(
    samples: &Matrix,
    reference: &DensityGrid,
    warnings: &mut Vec<String>,
    what: &str,
) -> Result<Option<f64>> {
    match density_from_samples(samples, &reference.grid) {
        Ok(q) => Ok(Some(kl_riemann(reference, &q)?)),
        Err(Error::DegenerateSamples(msg)) => {
            let w = format!("{what}: no KL ({msg})");
            warn!("{w}");
            warnings.push(w);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Runs the full workflow and writes every artifact plus `metrics.json`.
pub fn cmd_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineMetrics> {
    prepare_out(cfg, out)?;
    let problem = cfg.problem.forward();
    let prior = problem.prior().clone();
    let seed = cfg.seed;
    let mut timings = BTreeMap::new();
    let mut warnings = Vec::new();

    let data = stage("generate_prior", &mut timings, || {
        load_or_generate_prior(cfg, out)
    })?;

    let labels = stage("label_generation", &mut timings, || {
        let l = generate_labels(&data, cfg.label_count, &cfg.schedule, cfg.weighting, seed)?;
        l.write_csv(std::io::BufWriter::new(fs::File::create(
            out.join(LABELS_CSV),
        )?))?;
        Ok(l)
    })?;

    let (g_low, report_low) = stage("train_low", &mut timings, || {
        let (m, r) = fit_generator(&labels, &cfg.network, &cfg.train, seed)?;
        m.save_json(&out.join(MODEL_LOW))?;
        Ok((m, r))
    })?;

    let k = cfg.refinement.as_ref().map_or(10_000, |r| r.kde_samples);
    let prior_spacing: Vec<f64> = cfg
        .prior_grid
        .counts(&prior)?
        .iter()
        .zip(prior.lo.iter().zip(&prior.hi))
        .map(|(n, (l, h))| {
            if *n > 1 {
                (h - l) / (*n - 1) as f64
            } else {
                h - l
            }
        })
        .collect();
    let mut observations = Vec::new();
    for o in &cfg.observations {
        let mut om = ObservationMetrics {
            tag: o.tag.clone(),
            ..Default::default()
        };
        let t = &mut om.timings;
        let y = stage("observe", t, || observation_y(problem, o))?;
        om.y = y.clone();

        let low = stage("sample_low", t, || {
            let s = generate_samples(&g_low, k, Some(&y), seed)?;
            io::write_blocks_file(&out.join(samples_low_file(&o.tag)), &[("theta", &s)])?;
            Ok(s)
        })?;

        let mut high: Option<(Matrix, Matrix)> = None;
        if let Some(rc) = &cfg.refinement {
            let kde = stage("kde", t, || fit_kde_with(&low, &rc.bandwidth))?;
            let refine_data = stage("simulate_refined", t, || {
                let min_pad: Vec<f64> =
                    prior_spacing.iter().map(|h| rc.min_pad_cells * h).collect();
                let bounds =
                    padded_bounds(&refined_bounds(&low, &prior)?, rc.padding, &min_pad, &prior)?;
                let counts = rc.grid.counts(&bounds)?;
                let design = design_on(bounds, &counts)?;
                design.write_csv(std::io::BufWriter::new(fs::File::create(
                    out.join(refined_file(&o.tag)),
                )?))?;
                om.refined_bounds = Some(design.bounds.clone());
                om.n_refine = Some(design.len());
                build_dataset(problem, design.thetas, Fidelity::High, noise_seed(cfg))
            })?;
            let t = &mut om.timings;
            let refined_labels = stage("refined_labels", t, || {
                let count = rc.label_count.unwrap_or(refine_data.len());
                let proposal: &(dyn LogDensity + Sync) = match rc.correction {
                    ProposalCorrection::Kde => &kde,
                    ProposalCorrection::UniformDesign => &prior,
                };
                let l = generate_refined_labels(
                    &refine_data,
                    &y,
                    count,
                    &cfg.schedule,
                    proposal,
                    &prior,
                    cfg.weighting,
                    seed,
                )?;
                l.write_csv(std::io::BufWriter::new(fs::File::create(
                    out.join(labels_high_file(&o.tag)),
                )?))?;
                Ok(l)
            })?;
            let network = rc.network.as_ref().unwrap_or(&cfg.network);
            let train = rc.train.as_ref().unwrap_or(&cfg.train);
            let (g_high, report_high) = stage("train_high", t, || {
                let (m, r) = fit_generator(&refined_labels, network, train, seed)?;
                m.save_json(&out.join(model_high_file(&o.tag)))?;
                Ok((m, r))
            })?;
            om.train_high = Some(TrainSummary::from(&report_high));
            let s = stage("sample_high", t, || {
                let s = generate_samples(&g_high, k, None, seed)?;
                io::write_blocks_file(&out.join(samples_high_file(&o.tag)), &[("theta", &s)])?;
                Ok(s)
            })?;
            high = Some((refined_labels.targets, s));
        }

        let t = &mut om.timings;
        let reference = match cfg.reference {
            ReferenceKind::None => None,
            ReferenceKind::Analytic => {
                let ProblemConfig::Quadratic(q) = &cfg.problem else {
                    return Err(Error::Config(
                        "analytic reference needs the quadratic problem".into(),
                    ));
                };
                let post = q.posterior(y[0]);
                let grid = o.kl_grid.clone().expect("validated");
                Some(stage("reference", t, || {
                    DensityGrid::from_fn(grid, |x| post.pdf(x[0]))?.normalized()
                })?)
            }
            ReferenceKind::Mcmc => {
                let grid = o.kl_grid.clone().expect("validated");
                let chain = stage("reference_mcmc", t, || {
                    let c =
                        run_posterior_chain(cfg, |th| problem.reference_log_likelihood(th, &y))?;
                    io::write_blocks_file(
                        &out.join(samples_mcmc_file(&o.tag)),
                        &[("theta", &c.samples)],
                    )?;
                    Ok(c)
                })?;
                om.reference_acceptance = Some(chain.acceptance_rate);
                if chain.stagnated {
                    warnings.push(format!("{}: reference chain stagnated", o.tag));
                }
                Some(stage("reference", t, || {
                    density_from_samples(&chain.samples, &grid)
                })?)
            }
        };

        let t = &mut om.timings;
        let start = Instant::now();
        if let Some(p) = &reference {
            om.kl_low = kl_of_samples(&low, p, &mut warnings, &format!("{} low", o.tag))?;
            if let Some((lab, s)) = &high {
                om.kl_labels = kl_of_samples(lab, p, &mut warnings, &format!("{} labels", o.tag))?;
                om.kl_high = kl_of_samples(s, p, &mut warnings, &format!("{} high", o.tag))?;
            }
        }
        if let Some(m) = &o.modes {
            om.mode_mass_low = Some(mode_mass(&low, &m.centers, m.radius)?);
            if let Some((_, s)) = &high {
                om.mode_mass_high = Some(mode_mass(s, &m.centers, m.radius)?);
            }
        }
        let final_samples = high.as_ref().map_or(&low, |(_, s)| s);
        let bounds = om.refined_bounds.clone().unwrap_or_else(|| prior.clone());
        match density_from_samples(final_samples, &density_grid(o, &bounds)) {
            Ok(g) => g.write_csv_file(&out.join(density_file(&o.tag)))?,
            Err(e) => {
                let w = format!("{}: density not written ({e})", o.tag);
                warn!("{w}");
                warnings.push(w);
            }
        }
        t.insert("diagnostics".into(), start.elapsed().as_secs_f64());
        info!(
            "{}: KL low {:?}, labels {:?}, high {:?}; modes {:?}",
            o.tag, om.kl_low, om.kl_labels, om.kl_high, om.mode_mass_high
        );
        observations.push(om);
    }
    let metrics = PipelineMetrics {
        problem: problem.name().into(),
        seed,
        n_prior: data.len(),
        label_count: cfg.label_count,
        train_low: TrainSummary::from(&report_low),
        timings,
        observations,
        warnings,
    };
    io::write_json(&out.join(METRICS), &metrics)?;
    write_manifest(out, "pipeline", cfg)?;
    Ok(metrics)
}

/// Log-likelihood used by the MCMC baseline.
enum BaselineLikelihood<'a> {
    Reference(&'a dyn ForwardProblem),
    Surrogate { model: MlpModel, var: Vec<f64> },
}

impl BaselineLikelihood<'_> {
    fn eval(&self, theta: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            BaselineLikelihood::Reference(p) => p.reference_log_likelihood(theta, y),
            BaselineLikelihood::Surrogate { model, var } => {
                Ok(gaussian_log_kernel(y, &mlp_forward(model, theta)?, var))
            }
        }
    }
}

/// Runs the ensemble baseline at every observation and records wall-clock time.
pub fn cmd_mcmc(cfg: &ExperimentConfig, out: &Path) -> Result<McmcMetrics> {
    prepare_out(cfg, out)?;
    let problem = cfg.problem.forward();
    let mut warnings = Vec::new();
    let mut timings = BTreeMap::new();
    let (lik, name) = match &cfg.mcmc.likelihood {
        LikelihoodSpec::Reference => {
            if matches!(cfg.problem, ProblemConfig::OuSde(_)) {
                return Err(Error::Config(
                    "the OU problem has no closed-form likelihood; configure a surrogate".into(),
                ));
            }
            (BaselineLikelihood::Reference(problem), "reference")
        }
        LikelihoodSpec::Surrogate {
            grid,
            network,
            train,
        } => {
            let model = stage("surrogate", &mut timings, || {
                let thetas = grid.points(problem.prior())?;
                let ys = simulate_rows(problem, &thetas, Fidelity::High, None)?;
                let (m, _) = train_model(network, &thetas, &ys, train, cfg.seed)?;
                m.save_json(&out.join("surrogate.json"))?;
                Ok(m)
            })?;
            (
                BaselineLikelihood::Surrogate {
                    model,
                    var: problem.noise_var()?,
                },
                "surrogate",
            )
        }
    };
    let mut runs = Vec::new();
    for o in &cfg.observations {
        let y = observation_y(problem, o)?;
        let start = Instant::now();
        let chain = stage("mcmc", &mut timings, || {
            run_posterior_chain(cfg, |th| lik.eval(th, &y))
        })?;
        let seconds = start.elapsed().as_secs_f64();
        io::write_blocks_file(
            &out.join(samples_mcmc_file(&o.tag)),
            &[("theta", &chain.samples)],
        )?;
        if chain.stagnated {
            warnings.push(format!("{}: chain stagnated", o.tag));
        }
        runs.push(McmcRunMetrics {
            tag: o.tag.clone(),
            y,
            n_samples: chain.samples.rows(),
            acceptance_rate: chain.acceptance_rate,
            nan_count: chain.nan_count,
            stagnated: chain.stagnated,
            seconds,
        });
    }
    let metrics = McmcMetrics {
        problem: problem.name().into(),
        seed: cfg.seed,
        likelihood: name.into(),
        surrogate_seconds: timings.get("surrogate").copied(),
        runs,
        warnings,
    };
    io::write_json(&out.join(MCMC_METRICS), &metrics)?;
    write_manifest(out, "mcmc", cfg)?;
    Ok(metrics)
}

/// Process exit code for an error: 2 config, 3 simulation, 4 training divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { source, .. } | Error::LabelFailed { source, .. } => exit_code(source),
        Error::SimulationFailed { .. } => 3,
        Error::Config(_) => 2,
        Error::Unstable(_) | Error::NewtonFailed(_) | Error::IntegrationDiverged { .. } => 3,
        Error::TrainingDiverged { .. } => 4,
        _ => 1,
    }
}
