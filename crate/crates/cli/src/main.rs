use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ssm_sgmcmc::experiments::{self, DataSource, MetricKind, SEED_ENV};
use ssm_sgmcmc::models::Family;
use ssm_sgmcmc::{ExperimentConfig, SamplerKind};

#[derive(Parser, Debug)]
#[command(name = "ssm-sgmcmc", version, about = "Stochastic gradient MCMC for state space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate synthetic data or split a CSV into train and test sequences.
    Generate(GenerateArgs),
    /// Run sampler chains on the training sequence.
    Fit(FitArgs),
    /// Evaluate traces and write metrics.csv.
    Eval(EvalArgs),
    /// Gradient error against buffer size.
    GradError(GradErrorArgs),
    /// Choose a buffer size for a target gradient error.
    Buffer(BufferArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Synthetic parameter set: arhmm, lgssm, slds or rc_hmm.
    #[arg(long, conflicts_with = "csv")]
    tag: Option<String>,
    #[arg(long)]
    t_len: Option<usize>,
    #[arg(long)]
    test_len: Option<usize>,
    /// Observation CSV to split instead of simulating.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long)]
    family: Option<Family>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    kind: Option<SamplerKind>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    subseq_len: Option<usize>,
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    n_chains: Option<usize>,
    /// Stop each chain after this many seconds.
    #[arg(long)]
    wall_limit: Option<f64>,
    /// Record zero timestamps so outputs are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Start chains at truth.json.
    #[arg(long)]
    init_at_truth: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma-separated metrics, e.g. heldout_loglik,mse,ksd.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<MetricKind>,
    #[arg(long)]
    n_checkpoints: Option<usize>,
    #[arg(long)]
    predictive_k: Option<usize>,
    /// Report the summed latent error instead of the root mean square.
    #[arg(long)]
    literal_rmse: bool,
}

#[derive(Args, Debug)]
struct GradErrorArgs {
    #[arg(long, value_delimiter = ',')]
    s: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    b: Vec<usize>,
    #[arg(long)]
    n_trials: Option<usize>,
    #[arg(long)]
    exhaustive: bool,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BufferArgs {
    #[arg(long)]
    subseq_len: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Interpret tolerances relative to the full-gradient norm.
    #[arg(long)]
    rel_eps: bool,
    /// Search at this tolerance and extrapolate to --epsilon.
    #[arg(long)]
    pilot_epsilon: Option<f64>,
    #[arg(long)]
    b_star: Option<usize>,
    #[arg(long)]
    params: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().context("configuring worker pool")?;
    }
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate(a) => {
            if let Some(path) = a.csv {
                cfg.data = DataSource::Csv { path, test_fraction: a.test_fraction };
            } else if let DataSource::Synthetic { tag, t_len, test_len, .. } = &mut cfg.data {
                if let Some(t) = a.tag {
                    *tag = t;
                }
                if let Some(n) = a.t_len {
                    *t_len = n;
                }
                if let Some(n) = a.test_len {
                    *test_len = n;
                }
            }
            if a.family.is_some() {
                cfg.family = a.family;
            }
            print_json(&experiments::cmd_generate(&cfg)?)
        }
        Command::Fit(a) => {
            let s = &mut cfg.sampler;
            if let Some(k) = a.kind {
                s.kind = k;
            }
            if let Some(h) = a.h {
                s.h = h;
            }
            if let Some(v) = a.subseq_len {
                s.subseq_len = v;
            }
            if let Some(v) = a.buffer {
                s.buffer = v;
            }
            if let Some(v) = a.n_steps {
                s.n_steps = v;
            }
            if let Some(v) = a.thin {
                s.thin = v;
            }
            if a.wall_limit.is_some() {
                s.wall_limit = a.wall_limit;
            }
            s.deterministic |= a.deterministic;
            if let Some(n) = a.n_chains {
                cfg.n_chains = n;
            }
            cfg.init_at_truth |= a.init_at_truth;
            print_json(&experiments::cmd_fit(&cfg)?)
        }
        Command::Eval(a) => {
            if !a.metrics.is_empty() {
                cfg.metrics = a.metrics;
            }
            if let Some(n) = a.n_checkpoints {
                cfg.eval.n_checkpoints = n;
            }
            if let Some(k) = a.predictive_k {
                cfg.eval.predictive_k = k;
            }
            cfg.eval.literal_rmse |= a.literal_rmse;
            let reports = experiments::cmd_eval(&cfg)?;
            eprintln!("wrote {} metric rows to {}", reports.len(), cfg.out_dir.join(experiments::METRICS_FILE).display());
            Ok(())
        }
        Command::GradError(a) => {
            let g = &mut cfg.grad_error;
            if !a.s.is_empty() {
                g.s_list = a.s;
            }
            if !a.b.is_empty() {
                g.b_list = a.b;
            }
            if let Some(n) = a.n_trials {
                g.n_trials = n;
            }
            g.exhaustive |= a.exhaustive;
            if a.params.is_some() {
                cfg.params_path = a.params;
            }
            let (_, fits) = experiments::cmd_grad_error(&cfg)?;
            print_json(&fits)
        }
        Command::Buffer(a) => {
            let b = &mut cfg.buffer;
            if let Some(v) = a.subseq_len {
                b.subseq_len = v;
            }
            if let Some(v) = a.epsilon {
                b.epsilon = v;
            }
            b.relative |= a.rel_eps;
            if a.pilot_epsilon.is_some() {
                b.pilot_epsilon = a.pilot_epsilon;
            }
            if let Some(v) = a.b_star {
                b.search.b_star = v;
            }
            if a.params.is_some() {
                cfg.params_path = a.params;
            }
            let r = experiments::cmd_buffer(&cfg)?;
            eprintln!("chosen buffer: {}{}", r.buffer, if r.saturated { " (saturated at b_star)" } else { "" });
            print_json(&r)
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
