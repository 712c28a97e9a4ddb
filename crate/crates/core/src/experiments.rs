//! Experiment harness behind the command line: data generation, chain runs,
//! metric evaluation, gradient error curves and buffer selection.
//!
//! Every command reads one [`ExperimentConfig`] and works inside its output
//! directory:
//!
//! ```text
//! out_dir/
//!   train.csv  test.csv  train_latents.csv  test_latents.csv  truth.json
//!   chain_0/trace.csv  chain_0/trace.json  ...
//!   fit_summary.csv  metrics.csv  grad_error.csv  grad_error_fit.json  buffer_report.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::buffer_theory::{
    adaptive_buffer, decay_constants, empirical_grad_error_curve, exhaustive_grad_error_curve, extrapolate_buffer,
    log_error_fit, AdaptiveBufferOptions, DecayConstants, ErrorCurveRow,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    heldout_loglik, ksd_by_block, latent_estimates, latent_rmse, nmi, param_mse_aligned, predictive_k_step,
    running_average, slds_em_lower_bound, write_metrics_csv, MetricReport,
};
use crate::grad_estimators::{buffered_gradient, full_gradient, sample_subsequence, slds_noisy_gradient, SubsequenceScheme};
use crate::models::init::{init_params, InitSpec};
use crate::models::io::{fmt_f64, read_latents_csv, read_observations_csv, read_params_json, write_latents_csv, write_observations_csv, write_params_json};
use crate::models::prior::PriorSpec;
use crate::models::simulate::simulate;
use crate::models::synthetic::{synthetic_star, SyntheticTag};
use crate::models::{Family, GradientVector, InitialDist, ModelParams, ObservationSequence};
use crate::samplers::{read_trace_csv, run_chain, write_trace_csv, write_trace_sidecar, SamplerConfig, Trace, TraceSidecar};

pub const SEED_ENV: &str = "SSM_SGMCMC_SEED";

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const TRAIN_LATENTS_FILE: &str = "train_latents.csv";
pub const TEST_LATENTS_FILE: &str = "test_latents.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const FIT_SUMMARY_FILE: &str = "fit_summary.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRAD_ERROR_FILE: &str = "grad_error.csv";
pub const GRAD_ERROR_FIT_FILE: &str = "grad_error_fit.json";
pub const BUFFER_REPORT_FILE: &str = "buffer_report.json";

/// Series length above which KSD scores use buffered gradients.
const KSD_FULL_GRADIENT_MAX_T: usize = 10_000;
const KSD_SUBSEQ_LEN: usize = 10_000;
const KSD_BUFFER: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DataSource {
    /// Simulate from a built-in parameter set; the test sequence is simulated separately.
    Synthetic {
        tag: String,
        t_len: usize,
        #[serde(default = "default_test_len")]
        test_len: usize,
        /// Falls back to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Observations from a CSV file; the last `test_fraction` becomes the test sequence.
    Csv {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_len() -> usize {
    10_000
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    HeldoutLoglik,
    Predictive,
    Mse,
    Ksd,
    Nmi,
    Rmse,
    EmBound,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::HeldoutLoglik => "heldout_loglik",
            MetricKind::Predictive => "predictive",
            MetricKind::Mse => "mse",
            MetricKind::Ksd => "ksd",
            MetricKind::Nmi => "nmi",
            MetricKind::Rmse => "rmse",
            MetricKind::EmBound => "em_bound",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(json!(s)).map_err(|_| Error::Config(format!("unknown metric '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Evenly spaced trace checkpoints per chain; the last sample is always included.
    pub n_checkpoints: usize,
    pub predictive_k: usize,
    /// Cap on the samples entering KSD, taken from the second half of each trace.
    pub ksd_max_samples: usize,
    pub em_n_mc: usize,
    pub em_burn_in: usize,
    /// Report `sum_t ||x_t - x'_t||` instead of the root mean square.
    pub literal_rmse: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_checkpoints: 10, predictive_k: 10, ksd_max_samples: 200, em_n_mc: 100, em_burn_in: 10, literal_rmse: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradErrorOptions {
    pub s_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub n_trials: usize,
    pub scheme: SubsequenceScheme,
    /// Average over every admissible subsequence instead of sampling.
    pub exhaustive: bool,
}

impl Default for GradErrorOptions {
    fn default() -> Self {
        Self { s_list: vec![4], b_list: (0..=12).collect(), n_trials: 100, scheme: SubsequenceScheme::Uniform, exhaustive: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferOptions {
    pub subseq_len: usize,
    /// Target gradient error.
    pub epsilon: f64,
    /// Scale both tolerances by the full-gradient norm.
    pub relative: bool,
    /// Run the search at this looser tolerance and extrapolate to `epsilon`.
    pub pilot_epsilon: Option<f64>,
    pub search: AdaptiveBufferOptions,
}

impl Default for BufferOptions {
    fn default() -> Self {
        Self { subseq_len: 2, epsilon: 1e-3, relative: false, pilot_epsilon: None, search: AdaptiveBufferOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Required for CSV data; otherwise taken from the synthetic tag.
    pub family: Option<Family>,
    pub data: DataSource,
    /// Initialization settings; defaults to the shape of `truth.json` when absent.
    pub init: Option<InitSpec>,
    /// Start chains at the generating parameters instead of a data-driven guess.
    pub init_at_truth: bool,
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    pub n_chains: usize,
    /// Empty means every metric the family and available files support.
    pub metrics: Vec<MetricKind>,
    pub eval: EvalOptions,
    pub grad_error: GradErrorOptions,
    pub buffer: BufferOptions,
    /// Parameters for `grad-error` and `buffer`; defaults to `truth.json`.
    pub params_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: None,
            data: DataSource::Synthetic { tag: "arhmm".into(), t_len: 10_000, test_len: default_test_len(), seed: None },
            init: None,
            init_at_truth: false,
            prior: PriorSpec::default(),
            sampler: SamplerConfig::default(),
            n_chains: 1,
            metrics: Vec::new(),
            eval: EvalOptions::default(),
            grad_error: GradErrorOptions::default(),
            buffer: BufferOptions::default(),
            params_path: None,
            out_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic { tag, t_len, test_len, .. } => {
                SyntheticTag::from_str(tag)?;
                if *t_len == 0 || *test_len == 0 {
                    return Err(Error::Config("synthetic series lengths must be positive".into()));
                }
            }
            DataSource::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
                }
                if self.family.is_none() {
                    return Err(Error::Config("CSV data needs an explicit family".into()));
                }
            }
        }
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_family(&self) -> Result<Family> {
        if let Some(f) = self.family {
            return Ok(f);
        }
        match &self.data {
            DataSource::Synthetic { tag, .. } => Ok(synthetic_star(SyntheticTag::from_str(tag)?).family()),
            DataSource::Csv { .. } => Err(Error::Config("CSV data needs an explicit family".into())),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn chain_dir(&self, c: usize) -> PathBuf {
        self.out_dir.join(format!("chain_{c}"))
    }
}

/// Explicit seed, then the config, then `SSM_SGMCMC_SEED`.
pub fn resolve_seed(explicit: Option<u64>, config: Option<u64>) -> Result<Option<u64>> {
    if let Some(s) = explicit.or(config) {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn required_seed(cfg: &ExperimentConfig, what: &str) -> Result<u64> {
    resolve_seed(None, cfg.seed)?
        .ok_or_else(|| Error::Config(format!("{what} needs a seed (--seed, config 'seed' or {SEED_ENV})")))
}

fn optional_seed(cfg: &ExperimentConfig) -> Result<u64> {
    Ok(resolve_seed(None, cfg.seed)?.unwrap_or(0))
}

/// Seed of chain `c`; chain 0 uses the experiment seed itself.
pub fn chain_seed(seed: u64, c: usize) -> u64 {
    if c == 0 {
        return seed;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(c as u64);
    rng.next_u64()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} not found; {hint}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub train_len: usize,
    pub test_len: usize,
    pub files: Vec<PathBuf>,
}

/// Write train/test observations, and for synthetic data the latents and `truth.json`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut files = Vec::new();
    let (train, test) = match &cfg.data {
        DataSource::Synthetic { tag, t_len, test_len, seed } => {
            let seed = match seed {
                Some(s) => *s,
                None => required_seed(cfg, "generate")?,
            };
            let truth = synthetic_star(SyntheticTag::from_str(tag)?);
            let train = simulate(&truth, *t_len, &mut stream_rng(seed, 0))?;
            let test = simulate(&truth, *test_len, &mut stream_rng(seed, 1))?;
            for (name, sim) in [(TRAIN_LATENTS_FILE, &train), (TEST_LATENTS_FILE, &test)] {
                write_latents_csv(&cfg.path(name), sim.z.as_deref(), sim.x.as_deref())?;
                files.push(cfg.path(name));
            }
            write_params_json(&cfg.path(TRUTH_FILE), &truth)?;
            files.push(cfg.path(TRUTH_FILE));
            (train.obs, test.obs)
        }
        DataSource::Csv { path, test_fraction } => {
            let all = read_observations_csv(path)?;
            let n_test = ((all.len() as f64) * test_fraction).round() as usize;
            if n_test == 0 || n_test >= all.len() {
                return Err(Error::Config(format!("cannot split {} observations with test fraction {test_fraction}", all.len())));
            }
            let cut = all.len() - n_test;
            (all.slice(0, cut), all.slice(cut, all.len()))
        }
    };
    write_observations_csv(&cfg.path(TRAIN_FILE), &train)?;
    write_observations_csv(&cfg.path(TEST_FILE), &test)?;
    files.splice(0..0, [cfg.path(TRAIN_FILE), cfg.path(TEST_FILE)]);
    Ok(GenerateSummary { train_len: train.len(), test_len: test.len(), files })
}

fn read_train(cfg: &ExperimentConfig) -> Result<ObservationSequence> {
    let p = cfg.path(TRAIN_FILE);
    require_file(&p, "run `generate` first")?;
    read_observations_csv(&p)
}

fn read_truth(cfg: &ExperimentConfig) -> Result<Option<ModelParams>> {
    let p = cfg.path(TRUTH_FILE);
    if p.exists() {
        Ok(Some(read_params_json(&p)?))
    } else {
        Ok(None)
    }
}

fn init_spec(cfg: &ExperimentConfig, truth: Option<&ModelParams>) -> Result<InitSpec> {
    let family = cfg.resolved_family()?;
    if let Some(spec) = &cfg.init {
        return Ok(InitSpec { family, ..spec.clone() });
    }
    let truth = truth.ok_or_else(|| Error::Config("no 'init' settings and no truth.json to copy the model shape from".into()))?;
    Ok(InitSpec {
        family,
        num_states: truth.num_states(),
        lags: truth.lags().max(1),
        latent_dim: truth.latent_dim().unwrap_or(2),
        ..InitSpec::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub last_step: usize,
    pub aborted: Option<String>,
}

/// Run `n_chains` chains in parallel and write one trace per chain plus a merged summary.
pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<Vec<ChainSummary>> {
    cfg.validate()?;
    let seed = required_seed(cfg, "fit")?;
    let train = read_train(cfg)?;
    let truth = read_truth(cfg)?;
    let spec = init_spec(cfg, truth.as_ref())?;
    if cfg.init_at_truth && truth.is_none() {
        return Err(Error::Config("init_at_truth needs truth.json".into()));
    }
    let runs: Vec<(u64, Trace)> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let s = chain_seed(seed, c);
            let init = match (&truth, cfg.init_at_truth) {
                (Some(t), true) => t.clone(),
                _ => init_params(&train, &spec, &mut stream_rng(s, 1))?,
            };
            let sampler = SamplerConfig { seed: s, ..cfg.sampler.clone() };
            Ok((s, run_chain(&train, &sampler, &cfg.prior, &init)?))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(runs.len());
    for (c, (s, trace)) in runs.iter().enumerate() {
        let dir = cfg.chain_dir(c);
        fs::create_dir_all(&dir)?;
        write_trace_csv(&dir.join("trace.csv"), trace)?;
        write_trace_sidecar(&dir.join("trace.json"), &SamplerConfig { seed: *s, ..cfg.sampler.clone() }, trace)?;
        out.push(ChainSummary {
            chain: c,
            seed: *s,
            n_samples: trace.len(),
            last_step: trace.diagnostics.last().map_or(0, |d| d.step),
            aborted: trace.aborted.clone(),
        });
    }
    let mut w = csv::Writer::from_path(cfg.path(FIT_SUMMARY_FILE))?;
    w.write_record(["chain", "seed", "n_samples", "last_step", "aborted"])?;
    for s in &out {
        w.write_record([s.chain.to_string(), s.seed.to_string(), s.n_samples.to_string(), s.last_step.to_string(), s.aborted.clone().unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(out)
}

/// Load the trace of chain `c` written by [`cmd_fit`].
pub fn read_chain(cfg: &ExperimentConfig, c: usize) -> Result<Trace> {
    let dir = cfg.chain_dir(c);
    require_file(&dir.join("trace.csv"), "run `fit` first")?;
    let side: TraceSidecar = serde_json::from_str(&fs::read_to_string(dir.join("trace.json"))?)?;
    let mut trace = read_trace_csv(&dir.join("trace.csv"), &side.final_params)?;
    trace.aborted = side.aborted;
    Ok(trace)
}

fn checkpoints(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut idx: Vec<usize> = (1..=k).map(|i| (i * (n - 1)) / k).collect();
    idx.dedup();
    if k == 1 {
        idx = vec![n - 1];
    }
    idx
}

fn default_metrics(family: Family, has_truth: bool, has_z: bool, has_x: bool) -> Vec<MetricKind> {
    let mut m = Vec::new();
    if family == Family::Slds {
        m.push(MetricKind::EmBound);
    } else {
        m.extend([MetricKind::HeldoutLoglik, MetricKind::Predictive]);
    }
    if has_truth {
        m.push(MetricKind::Mse);
    }
    if has_z && family.has_discrete_states() {
        m.push(MetricKind::Nmi);
    }
    if has_x && matches!(family, Family::Lgssm | Family::Slds) {
        m.push(MetricKind::Rmse);
    }
    m
}

/// Log-posterior gradient used for KSD scores.
pub fn ksd_gradient(params: &ModelParams, obs: &ObservationSequence, prior: &PriorSpec, seed: u64) -> Result<GradientVector> {
    let p0 = InitialDist::stationary(params)?;
    let t = obs.len();
    let slds = params.family() == Family::Slds;
    if t <= KSD_FULL_GRADIENT_MAX_T && !slds {
        return full_gradient(params, obs, Some(prior), &p0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = sample_subsequence(t, KSD_SUBSEQ_LEN.min(t), KSD_BUFFER, SubsequenceScheme::Uniform, &mut rng)?;
    if slds {
        slds_noisy_gradient(params, obs, &sub, Some(prior), &p0, &Default::default(), &mut rng)
    } else {
        buffered_gradient(params, obs, &sub, Some(prior), &p0)
    }
}

struct EvalInputs {
    train: ObservationSequence,
    test: ObservationSequence,
    truth: Option<ModelParams>,
    z_test: Option<Vec<usize>>,
    x_test: Option<Vec<nalgebra::DVector<f64>>>,
}

fn sample_meta(chain: usize, i: usize, trace: &Trace) -> serde_json::Value {
    json!({ "chain": chain, "sample": i, "step": trace.diagnostics[i].step, "wall_seconds": trace.wall_seconds[i] })
}

fn with_meta(mut base: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(b), Some(e)) = (base.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            b.insert(k.clone(), v.clone());
        }
    }
    base
}

fn checkpoint_metrics(
    cfg: &ExperimentConfig,
    inp: &EvalInputs,
    metrics: &[MetricKind],
    chain: usize,
    trace: &Trace,
    avg: &[ModelParams],
    i: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let theta = &trace.samples[i];
    let meta = sample_meta(chain, i, trace);
    let opts = &cfg.eval;
    let mut rows = Vec::new();
    let mut latents = None;
    let rng_seed = chain_seed(seed, chain) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for m in metrics {
        match m {
            MetricKind::HeldoutLoglik => {
                rows.push(MetricReport::new(m.as_str(), "", heldout_loglik(theta, &inp.test)?, meta.clone()));
            }
            MetricKind::Predictive => {
                let v = predictive_k_step(theta, &inp.test, opts.predictive_k)?;
                rows.push(MetricReport::new(m.as_str(), "", v, with_meta(meta.clone(), json!({ "k": opts.predictive_k }))));
            }
            MetricKind::Mse => {
                let truth = inp.truth.as_ref().ok_or_else(|| Error::Config("mse needs truth.json".into()))?;
                let r = param_mse_aligned(&avg[i], truth)?;
                let mm = with_meta(meta.clone(), json!({ "perm": r.perm, "estimator": "running_average" }));
                for (b, v) in &r.blocks {
                    rows.push(MetricReport::new(m.as_str(), b, *v, mm.clone()));
                }
            }
            MetricKind::EmBound => {
                let mut rng = stream_rng(rng_seed, 2);
                let b = slds_em_lower_bound(theta, &inp.test, opts.em_n_mc, opts.em_burn_in, &mut rng)?;
                let mm = with_meta(meta.clone(), json!({ "std_err": b.std_err, "n_mc": b.n_mc }));
                rows.push(MetricReport::new(m.as_str(), "", b.mean, mm));
            }
            MetricKind::Nmi | MetricKind::Rmse => {
                if latents.is_none() {
                    latents = Some(latent_estimates(theta, &inp.test, opts.em_n_mc, opts.em_burn_in, &mut stream_rng(rng_seed, 3))?);
                }
                let est = latents.as_ref().expect("just computed");
                if *m == MetricKind::Nmi {
                    let truth = inp.z_test.as_ref().ok_or_else(|| Error::Config("nmi needs test latents".into()))?;
                    let z = est.z.as_ref().ok_or_else(|| Error::Config("nmi needs a discrete-state family".into()))?;
                    rows.push(MetricReport::new(m.as_str(), "z", nmi(z, truth)?, meta.clone()));
                } else {
                    let truth = inp.x_test.as_ref().ok_or_else(|| Error::Config("rmse needs test latents".into()))?;
                    let x = est.x.as_ref().ok_or_else(|| Error::Config("rmse needs a continuous-state family".into()))?;
                    let mm = with_meta(meta.clone(), json!({ "literal_sum": opts.literal_rmse }));
                    rows.push(MetricReport::new(m.as_str(), "x", latent_rmse(x, truth, opts.literal_rmse)?, mm));
                }
            }
            MetricKind::Ksd => {}
        }
    }
    Ok(rows)
}

/// Evaluate every chain at evenly spaced checkpoints and write `metrics.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let seed = optional_seed(cfg)?;
    let family = cfg.resolved_family()?;
    let test_path = cfg.path(TEST_FILE);
    require_file(&test_path, "run `generate` first")?;
    let (z_test, x_test) = if cfg.path(TEST_LATENTS_FILE).exists() {
        read_latents_csv(&cfg.path(TEST_LATENTS_FILE))?
    } else {
        (None, None)
    };
    let inp = EvalInputs { train: read_train(cfg)?, test: read_observations_csv(&test_path)?, truth: read_truth(cfg)?, z_test, x_test };
    let metrics = if cfg.metrics.is_empty() {
        default_metrics(family, inp.truth.is_some(), inp.z_test.is_some(), inp.x_test.is_some())
    } else {
        cfg.metrics.clone()
    };
    let traces = (0..cfg.n_chains).map(|c| read_chain(cfg, c)).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    if let Some(truth) = &inp.truth {
        let reference = json!({ "reference": "truth" });
        if metrics.contains(&MetricKind::HeldoutLoglik) {
            reports.push(MetricReport::new("heldout_loglik", "truth", heldout_loglik(truth, &inp.test)?, reference.clone()));
        }
        if metrics.contains(&MetricKind::Predictive) {
            let v = predictive_k_step(truth, &inp.test, cfg.eval.predictive_k)?;
            reports.push(MetricReport::new("predictive", "truth", v, with_meta(reference, json!({ "k": cfg.eval.predictive_k }))));
        }
    }
    for (c, trace) in traces.iter().enumerate() {
        if trace.is_empty() {
            return Err(Error::Config(format!("chain {c} has an empty trace")));
        }
        let avg = if metrics.contains(&MetricKind::Mse) { running_average(&trace.samples)? } else { Vec::new() };
        let points = checkpoints(trace.len(), cfg.eval.n_checkpoints);
        let per_point = points
            .par_iter()
            .map(|&i| checkpoint_metrics(cfg, &inp, &metrics, c, trace, &avg, i, seed))
            .collect::<Result<Vec<_>>>()?;
        reports.extend(per_point.into_iter().flatten());
        if metrics.contains(&MetricKind::Ksd) {
            reports.extend(chain_ksd(cfg, &inp.train, c, trace, seed)?);
        }
    }
    write_metrics_csv(&cfg.path(METRICS_FILE), &reports)?;
    Ok(reports)
}

fn chain_ksd(cfg: &ExperimentConfig, train: &ObservationSequence, chain: usize, trace: &Trace, seed: u64) -> Result<Vec<MetricReport>> {
    let start = trace.len() / 2;
    let tail = &trace.samples[start..];
    let stride = tail.len().div_ceil(cfg.eval.ksd_max_samples.max(2)).max(1);
    let picked: Vec<ModelParams> = tail.iter().step_by(stride).cloned().collect();
    if picked.len() < 2 {
        return Err(Error::Config(format!("chain {chain} has too few samples for KSD")));
    }
    let base = chain_seed(seed, chain);
    let blocks = ksd_by_block(&picked, |i, p| ksd_gradient(p, train, &cfg.prior, base ^ i as u64))?;
    let meta = json!({ "chain": chain, "n_samples": picked.len(), "first_sample": start, "stride": stride });
    Ok(blocks.into_iter().map(|(b, v)| MetricReport::new("ksd", &b, v, meta.clone())).collect())
}

fn target_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    match &cfg.params_path {
        Some(p) => read_params_json(p),
        None => read_truth(cfg)?.ok_or_else(|| Error::Config("set params_path or generate synthetic data with truth.json".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFitSummary {
    pub s: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `exp(intercept)`: error at `B = 0` implied by the log-linear fit.
    pub error_constant: f64,
}

/// Error-curve CSV: `s,b,mean_err,sd_err,n_trials`.
pub fn write_error_curve_csv(path: &Path, rows: &[ErrorCurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["s", "b", "mean_err", "sd_err", "n_trials"])?;
    for r in rows {
        w.write_record([r.s.to_string(), r.b.to_string(), fmt_f64(r.mean_err), fmt_f64(r.sd_err), r.n_trials.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_error_curve_csv(path: &Path) -> Result<Vec<ErrorCurveRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format(format!("error-curve row {}: bad value", i + 2));
        out.push(ErrorCurveRow {
            s: rec[0].parse().map_err(|_| bad())?,
            b: rec[1].parse().map_err(|_| bad())?,
            mean_err: rec[2].parse().map_err(|_| bad())?,
            sd_err: rec[3].parse().map_err(|_| bad())?,
            n_trials: rec[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Gradient error against buffer size at the configured parameters.
pub fn cmd_grad_error(cfg: &ExperimentConfig) -> Result<(Vec<ErrorCurveRow>, Vec<ErrorFitSummary>)> {
    let seed = optional_seed(cfg)?;
    let params = target_params(cfg)?;
    let obs = read_train(cfg)?;
    let g = &cfg.grad_error;
    let rows = if g.exhaustive {
        let mut rows = Vec::new();
        for &s in &g.s_list {
            rows.extend(exhaustive_grad_error_curve(&params, &obs, s, &g.b_list, g.scheme)?);
        }
        rows
    } else {
        empirical_grad_error_curve(&params, &obs, &g.s_list, &g.b_list, g.n_trials, seed, g.scheme)?
    };
    fs::create_dir_all(&cfg.out_dir)?;
    write_error_curve_csv(&cfg.path(GRAD_ERROR_FILE), &rows)?;
    let mut fits = Vec::new();
    for &s in &g.s_list {
        let sel: Vec<ErrorCurveRow> = rows.iter().filter(|r| r.s == s).cloned().collect();
        if let Ok(f) = log_error_fit(&sel) {
            fits.push(ErrorFitSummary { s, slope: f.slope, intercept: f.intercept, r2: f.r2, error_constant: f.intercept.exp() });
        }
    }
    fs::write(cfg.path(GRAD_ERROR_FIT_FILE), serde_json::to_string_pretty(&fits)? + "\n")?;
    Ok((rows, fits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferReport {
    pub subseq_len: usize,
    /// Absolute tolerance the buffer was chosen for.
    pub epsilon: f64,
    pub full_gradient_norm: Option<f64>,
    pub searched_epsilon: f64,
    pub searched_buffer: usize,
    pub saturated: bool,
    pub evaluations: Vec<(usize, f64)>,
    pub decay: Option<DecayConstants>,
    /// Buffer extrapolated from the pilot search; absent without a pilot or a contraction rate.
    pub extrapolated_buffer: Option<usize>,
    pub buffer: usize,
}

/// Choose `B` by search at the target tolerance or by pilot search plus extrapolation.
pub fn cmd_buffer(cfg: &ExperimentConfig) -> Result<BufferReport> {
    let seed = optional_seed(cfg)?;
    let params = target_params(cfg)?;
    let obs = read_train(cfg)?;
    let o = &cfg.buffer;
    let norm = if o.relative {
        Some(full_gradient(&params, &obs, None, &InitialDist::stationary(&params)?)?.norm())
    } else {
        None
    };
    let scale = norm.unwrap_or(1.0);
    let epsilon = o.epsilon * scale;
    let searched_epsilon = o.pilot_epsilon.map_or(epsilon, |p| p * scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = adaptive_buffer(&params, &obs, o.subseq_len, searched_epsilon, &o.search, &mut rng)?;
    let decay = decay_constants(&params).ok();
    let extrapolated = match (&o.pilot_epsilon, &decay) {
        (Some(_), Some(d)) if !d.no_contraction && d.l < 1.0 => {
            let err_hat = res.evaluations.iter().find(|e| e.0 == res.buffer).map_or(searched_epsilon, |e| e.1.max(f64::MIN_POSITIVE));
            extrapolate_buffer(res.buffer, err_hat, epsilon, d.l).ok()
        }
        _ => None,
    };
    let report = BufferReport {
        subseq_len: o.subseq_len,
        epsilon,
        full_gradient_norm: norm,
        searched_epsilon,
        searched_buffer: res.buffer,
        saturated: res.saturated,
        evaluations: res.evaluations,
        decay,
        extrapolated_buffer: extrapolated,
        buffer: extrapolated.unwrap_or(res.buffer),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.path(BUFFER_REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
