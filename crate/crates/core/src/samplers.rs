//! Langevin chain drivers: SGLD, SGRLD and their full-gradient counterparts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer_theory::{adaptive_buffer, AdaptiveBufferOptions};
use crate::error::{dim, Error, Result};
use crate::grad_estimators::{
    buffered_gradient, full_gradient, sample_subsequence, slds_noisy_gradient, BufferedSubsequence, SldsGibbsConfig,
    SubsequenceScheme,
};
use crate::linalg::standard_normal_vec;
use crate::models::io::fmt_f64;
use crate::models::prior::PriorSpec;
use crate::models::{BlockGroup, Family, GradientVector, InitialDist, ModelParams, ObservationSequence};
use crate::preconditioners::{precondition, PreconditionerBlocks, DEFAULT_NU_PHI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Sgld,
    #[default]
    Sgrld,
    Ld,
    Rld,
}

impl SamplerKind {
    pub fn is_stochastic(self) -> bool {
        matches!(self, SamplerKind::Sgld | SamplerKind::Sgrld)
    }

    pub fn is_riemannian(self) -> bool {
        matches!(self, SamplerKind::Sgrld | SamplerKind::Rld)
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgld" => Ok(SamplerKind::Sgld),
            "sgrld" => Ok(SamplerKind::Sgrld),
            "ld" => Ok(SamplerKind::Ld),
            "rld" => Ok(SamplerKind::Rld),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StepSchedule {
    #[default]
    Fixed,
    /// `h (1 + s / s0)^(-kappa)`.
    Poly { s0: f64, kappa: f64 },
}

impl StepSchedule {
    pub fn stepsize(&self, h: f64, s: usize) -> f64 {
        match *self {
            StepSchedule::Fixed => h,
            StepSchedule::Poly { s0, kappa } => h * (1.0 + s as f64 / s0).powf(-kappa),
        }
    }
}

/// Periodic re-selection of the buffer during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSchedule {
    pub every: usize,
    pub epsilon: f64,
    pub relative: bool,
    pub options: AdaptiveBufferOptions,
}

impl Default for AdaptiveSchedule {
    fn default() -> Self {
        Self { every: 1000, epsilon: 1e-3, relative: true, options: AdaptiveBufferOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub h: f64,
    pub schedule: StepSchedule,
    pub subseq_len: usize,
    pub buffer: usize,
    pub scheme: SubsequenceScheme,
    pub n_steps: usize,
    pub seed: u64,
    pub thin: usize,
    pub nu_phi: f64,
    /// Divisor for the non-transition preconditioner blocks; the series length when absent.
    pub fisher_scale: Option<f64>,
    pub slds: SldsGibbsConfig,
    pub adaptive: Option<AdaptiveSchedule>,
    /// Stop after this many seconds of wall time.
    pub wall_limit: Option<f64>,
    /// Record zero timestamps so traces are byte-reproducible.
    pub deterministic: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Sgrld,
            h: 1e-3,
            schedule: StepSchedule::Fixed,
            subseq_len: 2,
            buffer: 2,
            scheme: SubsequenceScheme::Uniform,
            n_steps: 1000,
            seed: 0,
            thin: 1,
            nu_phi: DEFAULT_NU_PHI,
            fisher_scale: None,
            slds: SldsGibbsConfig::default(),
            adaptive: None,
            wall_limit: None,
            deterministic: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config("stepsize h must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if self.kind.is_stochastic() && (self.subseq_len == 0 || self.subseq_len > t_len) {
            return Err(Error::Config(format!("subsequence length must be in 1..={t_len}")));
        }
        if let StepSchedule::Poly { s0, kappa } = self.schedule {
            if !(s0 > 0.0) || !(kappa >= 0.0) {
                return Err(Error::Config("poly schedule needs s0 > 0 and kappa >= 0".into()));
            }
        }
        if !(self.nu_phi >= 0.0) {
            return Err(Error::Config("nu_phi must be >= 0".into()));
        }
        if let Some(f) = self.fisher_scale {
            if !(f > 0.0) {
                return Err(Error::Config("fisher_scale must be positive".into()));
            }
        }
        if let Some(a) = &self.adaptive {
            if a.every == 0 || !(a.epsilon > 0.0) {
                return Err(Error::Config("adaptive buffer needs every >= 1 and epsilon > 0".into()));
            }
        }
        Ok(())
    }
}

/// Diagnostics of the step that produced a retained sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub grad_norm: f64,
    pub buffer: usize,
    pub stepsize: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub samples: Vec<ModelParams>,
    pub wall_seconds: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&ModelParams> {
        self.samples.last()
    }

    fn push(&mut self, p: ModelParams, wall: f64, d: StepDiagnostics) {
        self.samples.push(p);
        self.wall_seconds.push(wall);
        self.diagnostics.push(d);
    }
}

/// First block with a non-finite coordinate, or a log coordinate whose exponential over- or underflows.
fn bad_block(params: &ModelParams, u: &DVector<f64>) -> Option<String> {
    let layout = params.layout();
    let mask = layout.log_mask();
    layout
        .blocks
        .iter()
        .find(|b| {
            b.range().any(|i| {
                let v = u[i];
                !v.is_finite() || (mask[i] && !(v.exp().is_finite() && v.exp() > 0.0))
            })
        })
        .map(|b| b.name.clone())
}

fn diverged(params: &ModelParams, u: &DVector<f64>) -> Error {
    let reason = match bad_block(params, u) {
        Some(name) => format!("non-finite value in block {name}"),
        None => "update left the valid parameter set".into(),
    };
    Error::Diverged { step: 0, reason }
}

fn finish(params: &ModelParams, u: DVector<f64>) -> Result<ModelParams> {
    if bad_block(params, &u).is_some() {
        return Err(diverged(params, &u));
    }
    params.from_unconstrained(&u).map_err(|e| match e {
        Error::InvalidParams(reason) | Error::Numerical(reason) => Error::Diverged { step: 0, reason },
        other => other,
    })
}

/// `theta + h g + sqrt(2h) xi` in unconstrained coordinates.
pub fn sgld_step<R: Rng + ?Sized>(params: &ModelParams, grad: &GradientVector, h: f64, rng: &mut R) -> Result<ModelParams> {
    let u = params.to_unconstrained();
    if grad.values.len() != u.len() {
        return dim(format!("gradient has {} coordinates, parameters {}", grad.values.len(), u.len()));
    }
    finish(params, langevin_update(&u, &grad.values, None, h, rng)?)
}

/// `theta + h (D g + Gamma) + N(0, 2h D)`.
///
/// Every block moves in unconstrained coordinates except a preconditioned
/// transition block, which moves in expanded-mean space with `D = diag(phi) + nu`,
/// `Gamma = 1` and is mirrored at zero. A linear step in `log phi` overshoots
/// badly once the scaled counts dwarf `phi`.
pub fn sgrld_step<R: Rng + ?Sized>(
    params: &ModelParams,
    grad: &GradientVector,
    blocks: &PreconditionerBlocks,
    h: f64,
    rng: &mut R,
) -> Result<ModelParams> {
    let u = params.to_unconstrained();
    if grad.layout != blocks.layout {
        return dim("gradient layout does not match the preconditioner".to_string());
    }
    if h < 0.0 || h.is_nan() {
        return Err(Error::Config("stepsize must be >= 0".into()));
    }
    let xi = standard_normal_vec(rng, u.len());
    let mut next = langevin_core(&u, &grad.values, Some(blocks), h, &xi)?;
    let c = params.constrained_vector();
    for (info, b) in blocks.layout.blocks.iter().zip(&blocks.blocks) {
        if info.group != BlockGroup::Pi || b.d.is_identity() {
            continue;
        }
        let d_u = b.d.diagonal();
        for (k, i) in info.range().enumerate() {
            let phi = c[i];
            let d = d_u[k] * phi * phi;
            // u-space score minus the log-Jacobian, mapped back to phi.
            let score = (grad.values[i] - 1.0) / phi;
            let moved = phi + h * (d * score + 1.0) + (2.0 * h * d).sqrt() * xi[i];
            next[i] = moved.abs().ln();
        }
    }
    finish(params, next)
}

/// One Langevin update on a raw coordinate vector.
///
/// With no preconditioner, or one whose blocks are all identities, this is
/// exactly `u + h g + sqrt(2h) xi` for the same draws of `xi`.
pub fn langevin_update<R: Rng + ?Sized>(
    u: &DVector<f64>,
    g: &DVector<f64>,
    pre: Option<&PreconditionerBlocks>,
    h: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if h < 0.0 || h.is_nan() {
        return Err(Error::Config("stepsize must be >= 0".into()));
    }
    let xi = standard_normal_vec(rng, u.len());
    langevin_core(u, g, pre, h, &xi)
}

fn langevin_core(u: &DVector<f64>, g: &DVector<f64>, pre: Option<&PreconditionerBlocks>, h: f64, xi: &DVector<f64>) -> Result<DVector<f64>> {
    if g.len() != u.len() {
        return dim(format!("gradient has {} coordinates, state {}", g.len(), u.len()));
    }
    let s = (2.0 * h).sqrt();
    let (drift, noise) = match pre {
        None => (g.clone(), xi.clone()),
        Some(p) => {
            let mut drift = p.apply_vec(g)?;
            for (info, b) in p.layout.blocks.iter().zip(&p.blocks) {
                if !b.d.is_identity() {
                    for (d, gm) in drift.as_mut_slice()[info.range()].iter_mut().zip(b.gamma.iter()) {
                        *d += gm;
                    }
                }
            }
            (drift, p.noise(xi)?)
        }
    };
    Ok(u + drift * h + noise * s)
}

struct ChainCtx<'a> {
    obs: &'a ObservationSequence,
    config: &'a SamplerConfig,
    prior: &'a PriorSpec,
}

impl ChainCtx<'_> {
    fn gradient(&self, params: &ModelParams, buffer: usize, rng: &mut ChaCha8Rng) -> Result<GradientVector> {
        let t = self.obs.len();
        let p0 = InitialDist::stationary(params)?;
        let slds = params.family() == Family::Slds;
        if self.config.kind.is_stochastic() {
            let sub = sample_subsequence(t, self.config.subseq_len, buffer, self.config.scheme, rng)?;
            if slds {
                slds_noisy_gradient(params, self.obs, &sub, Some(self.prior), &p0, &self.config.slds, rng)
            } else {
                buffered_gradient(params, self.obs, &sub, Some(self.prior), &p0)
            }
        } else if slds {
            let sub = BufferedSubsequence::new(t, 0, t, 0, SubsequenceScheme::Uniform)?;
            slds_noisy_gradient(params, self.obs, &sub, Some(self.prior), &p0, &self.config.slds, rng)
        } else {
            full_gradient(params, self.obs, Some(self.prior), &p0)
        }
    }

    fn step(&self, params: &ModelParams, buffer: usize, h: f64, rng: &mut ChaCha8Rng) -> Result<(ModelParams, f64)> {
        let g = self.gradient(params, buffer, rng)?;
        if !g.is_finite() {
            return Err(Error::Diverged { step: 0, reason: "non-finite gradient".into() });
        }
        let next = if self.config.kind.is_riemannian() {
            let scale = self.config.fisher_scale.unwrap_or(self.obs.len() as f64);
            let pre = precondition(params, self.config.nu_phi, scale)?;
            sgrld_step(params, &g, &pre, h, rng)?
        } else {
            sgld_step(params, &g, h, rng)?
        };
        Ok((next, g.norm()))
    }
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    }
}

/// Run one chain from `init`. Divergence halves the stepsize once; a second
/// divergence, or any other error, stops the run and is recorded in `aborted`.
pub fn run_chain(obs: &ObservationSequence, config: &SamplerConfig, prior: &PriorSpec, init: &ModelParams) -> Result<Trace> {
    init.validate()?;
    obs.check_dim(init.obs_dim())?;
    prior.validate(init)?;
    config.validate(obs.len())?;
    let ctx = ChainCtx { obs, config, prior };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let clock = |s: &Instant| if config.deterministic { 0.0 } else { s.elapsed().as_secs_f64() };
    let mut buffer = config.buffer;
    let mut h_scale = 1.0;
    let mut halved = false;
    let mut trace = Trace { samples: Vec::new(), wall_seconds: Vec::new(), diagnostics: Vec::new(), aborted: None };
    trace.push(init.clone(), clock(&start), StepDiagnostics { step: 0, grad_norm: 0.0, buffer, stepsize: 0.0 });
    let mut params = init.clone();
    for s in 0..config.n_steps {
        if let Some(limit) = config.wall_limit {
            if start.elapsed().as_secs_f64() > limit {
                trace.aborted = Some(format!("wall limit reached after {s} steps"));
                break;
            }
        }
        if let (Some(a), true) = (&config.adaptive, config.kind.is_stochastic()) {
            if s % a.every == 0 && params.family() != Family::Slds {
                let eps = if a.relative {
                    let p0 = InitialDist::stationary(&params)?;
                    a.epsilon * full_gradient(&params, obs, Some(prior), &p0)?.norm()
                } else {
                    a.epsilon
                };
                match adaptive_buffer(&params, obs, config.subseq_len, eps, &a.options, &mut rng) {
                    Ok(r) => buffer = r.buffer,
                    Err(e) => {
                        trace.aborted = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        let h = config.schedule.stepsize(config.h, s) * h_scale;
        let result = match ctx.step(&params, buffer, h, &mut rng) {
            Err(Error::Diverged { .. }) if !halved => {
                halved = true;
                h_scale *= 0.5;
                ctx.step(&params, buffer, h * 0.5, &mut rng).map(|r| (r, h * 0.5))
            }
            other => other.map(|r| (r, h)),
        };
        match result {
            Ok(((next, gnorm), h_used)) => {
                params = next;
                if (s + 1) % config.thin == 0 {
                    let d = StepDiagnostics { step: s + 1, grad_norm: gnorm, buffer, stepsize: h_used };
                    trace.push(params.clone(), clock(&start), d);
                }
            }
            Err(e) => {
                trace.aborted = Some(with_step(e, s + 1).to_string());
                break;
            }
        }
    }
    Ok(trace)
}

/// Trace CSV: `step,wall_seconds,grad_norm,buffer,stepsize` then one column per constrained coordinate.
pub fn write_trace_csv(path: &Path, trace: &Trace) -> Result<()> {
    let first = trace.samples.first().ok_or_else(|| Error::Config("empty trace".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["step".to_string(), "wall_seconds".into(), "grad_norm".into(), "buffer".into(), "stepsize".into()];
    header.extend(first.layout().coordinate_names());
    writeln!(w, "{}", header.join(","))?;
    for ((p, wall), d) in trace.samples.iter().zip(&trace.wall_seconds).zip(&trace.diagnostics) {
        let mut row = vec![d.step.to_string(), fmt_f64(*wall), fmt_f64(d.grad_norm), d.buffer.to_string(), fmt_f64(d.stepsize)];
        row.extend(p.constrained_vector().iter().map(|v| fmt_f64(*v)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace written by [`write_trace_csv`]; `template` supplies the model shape.
pub fn read_trace_csv(path: &Path, template: &ModelParams) -> Result<Trace> {
    let mut rdr = csv::Reader::from_path(path)?;
    let names = template.layout().coordinate_names();
    let headers = rdr.headers()?.clone();
    if headers.len() != names.len() + 5 || headers.iter().skip(5).zip(&names).any(|(a, b)| a != b) {
        return Err(Error::Format("trace columns do not match the model layout".into()));
    }
    let mut trace = Trace { samples: Vec::new(), wall_seconds: Vec::new(), diagnostics: Vec::new(), aborted: None };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("trace row {}: bad {what}", row + 2));
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad(&headers[i]));
        let vals = (5..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        let d = StepDiagnostics {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            grad_norm: num(2)?,
            buffer: rec[3].parse().map_err(|_| bad("buffer"))?,
            stepsize: num(4)?,
        };
        trace.push(template.from_constrained_vector(&vals)?, num(1)?, d);
    }
    if trace.is_empty() {
        return Err(Error::Format("trace has no samples".into()));
    }
    Ok(trace)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub config: SamplerConfig,
    pub final_params: ModelParams,
    pub n_samples: usize,
    pub aborted: Option<String>,
    /// The regression blocks of the preconditioner use the identity in place of `E[x x^T]`.
    pub identity_second_moment_approximation: bool,
}

pub fn write_trace_sidecar(path: &Path, config: &SamplerConfig, trace: &Trace) -> Result<()> {
    let side = TraceSidecar {
        config: config.clone(),
        final_params: trace.last().ok_or_else(|| Error::Config("empty trace".into()))?.clone(),
        n_samples: trace.len(),
        aborted: trace.aborted.clone(),
        identity_second_moment_approximation: config.kind.is_riemannian(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &side)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
