//! Meta particle flow for sequential Bayesian inference.
//!
//! A set of equally weighted particles approximating `p(x | o_1..o_m)` is
//! moved to an approximation of `p(x | o_1..o_{m+1})` by integrating a
//! learned velocity field
//!
//! ```text
//! dx/dt = h( mean_n phi(x_m^n), feature(o_{m+1}, x), x(t), t/T, (T-t)/T )
//! ```
//!
//! over `[0, T]`. The set embedding is computed from the particles at the
//! start of the stage and held fixed while they move, so the particles flow
//! independently within a stage. Each particle carries its log-density,
//! updated by `d log q/dt = -div f`.
//!
//! The networks are trained across many conjugate-Gaussian tasks by
//! minimizing the summed negative ELBO of every stage, differentiating the
//! discrete Euler flow exactly (positions, frozen embeddings and the
//! log-density transport all included).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{transport, DensityState, TraceMode};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::all_finite;
use crate::nn::{deepset_embed, Activation, ParamSet};
use crate::ode::{Dynamics, Jacobian, Scheme, TimeGrid};
use crate::rng::{mix, seeded};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn gauss_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Gaussian prior with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_len("prior variance", mean.len(), var.len())?;
        if mean.is_empty() || var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("prior variances must be positive and finite"));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        (0..x.len()).map(|i| gauss_logpdf(x[i], self.mean[i], self.var[i])).sum()
    }

    pub fn grad_logpdf(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| (self.mean[i] - x[i]) / self.var[i]).collect()
    }
}

/// `o ~ N(x, var I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    pub var: f64,
}

impl LikelihoodSpec {
    pub fn new(var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(invalid("likelihood variance must be positive and finite"));
        }
        Ok(Self { var })
    }

    pub fn logpdf(&self, o: &[f64], x: &[f64]) -> f64 {
        o.iter().zip(x).map(|(oi, xi)| gauss_logpdf(*oi, *xi, self.var)).sum()
    }

    /// `grad_x log p(o | x)`
    pub fn grad_x(&self, o: &[f64], x: &[f64]) -> Vec<f64> {
        o.iter().zip(x).map(|(oi, xi)| (oi - xi) / self.var).collect()
    }
}

/// Closed-form Gaussian posterior, per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A prior, a likelihood and an observation sequence. `posteriors[m]` is the
/// exact posterior after the first `m` observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTask {
    pub prior: PriorSpec,
    pub likelihood: LikelihoodSpec,
    pub observations: Vec<Vec<f64>>,
    pub latent_true: Option<Vec<f64>>,
    pub posteriors: Vec<Posterior>,
}

impl InferenceTask {
    pub fn new(
        prior: PriorSpec,
        likelihood: LikelihoodSpec,
        observations: Vec<Vec<f64>>,
        latent_true: Option<Vec<f64>>,
    ) -> Result<Self> {
        for o in &observations {
            check_len("observation", prior.dim(), o.len())?;
        }
        let posteriors = conjugate_posteriors(&prior, &likelihood, &observations);
        Ok(Self {
            prior,
            likelihood,
            observations,
            latent_true,
            posteriors,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    /// `log pi(x) + sum_{t <= m} log p(o_t | x)`
    pub fn log_joint(&self, x: &[f64], m: usize) -> f64 {
        let mut v = self.prior.logpdf(x);
        for o in &self.observations[..m] {
            v += self.likelihood.logpdf(o, x);
        }
        v
    }

    pub fn grad_log_joint(&self, x: &[f64], m: usize) -> Vec<f64> {
        let mut g = self.prior.grad_logpdf(x);
        for o in &self.observations[..m] {
            for (gi, li) in g.iter_mut().zip(self.likelihood.grad_x(o, x)) {
                *gi += li;
            }
        }
        g
    }

    /// `log p(o_1..o_m)`, by chaining one-step predictive densities.
    pub fn log_evidence(&self, m: usize) -> f64 {
        (0..m)
            .map(|t| {
                let post = &self.posteriors[t];
                (0..self.dim())
                    .map(|i| gauss_logpdf(self.observations[t][i], post.mean[i], post.var[i] + self.likelihood.var))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn conjugate_posteriors(prior: &PriorSpec, lik: &LikelihoodSpec, obs: &[Vec<f64>]) -> Vec<Posterior> {
    let d = prior.dim();
    let mut out = Vec::with_capacity(obs.len() + 1);
    let mut sum = vec![0.0; d];
    for m in 0..=obs.len() {
        if m > 0 {
            for (s, o) in sum.iter_mut().zip(&obs[m - 1]) {
                *s += o;
            }
        }
        let mut mean = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        for i in 0..d {
            let precision = 1.0 / prior.var[i] + m as f64 / lik.var;
            var.push(1.0 / precision);
            mean.push((prior.mean[i] / prior.var[i] + sum[i] / lik.var) / precision);
        }
        out.push(Posterior { mean, var });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskFamily {
    Gauss1d,
    GaussNd { dim: usize },
}

/// Sampling ranges for generated tasks. Each range is inclusive; equal ends
/// pin the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRanges {
    pub prior_var: (f64, f64),
    pub lik_var: (f64, f64),
    pub observations: usize,
}

impl Default for TaskRanges {
    fn default() -> Self {
        Self {
            prior_var: (0.5, 2.0),
            lik_var: (1.0, 1.0),
            observations: 3,
        }
    }
}

fn draw_in<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        Uniform::new_inclusive(range.0, range.1).expect("checked range").sample(rng)
    }
}

/// Zero-mean Gaussian prior with variance drawn from `prior_var`, likelihood
/// variance from `lik_var`, latent drawn from the prior and observations
/// `o_t ~ N(x*, lik_var)`. Task `i` uses the stream `mix(seed, i)`.
pub fn task_generate(family: TaskFamily, count: usize, ranges: TaskRanges, seed: u64) -> Result<Vec<InferenceTask>> {
    for (name, r) in [("prior_var", ranges.prior_var), ("lik_var", ranges.lik_var)] {
        if !(r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite()) {
            return Err(invalid(format!("{name} range must satisfy 0 < lo <= hi")));
        }
    }
    let d = match family {
        TaskFamily::Gauss1d => 1,
        TaskFamily::GaussNd { dim } if dim >= 1 => dim,
        TaskFamily::GaussNd { .. } => return Err(invalid("task dimension must be at least 1")),
    };
    (0..count)
        .map(|i| {
            let mut rng = seeded(mix(seed, i as u64));
            let sx = draw_in(ranges.prior_var, &mut rng);
            let s = draw_in(ranges.lik_var, &mut rng);
            let prior = PriorSpec::new(vec![0.0; d], vec![sx; d])?;
            let lik = LikelihoodSpec::new(s)?;
            let latent = prior.sample(&mut rng);
            let observations = (0..ranges.observations)
                .map(|_| {
                    latent
                        .iter()
                        .map(|x| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            x + s.sqrt() * z
                        })
                        .collect()
                })
                .collect();
            InferenceTask::new(prior, lik, observations, Some(latent))
        })
        .collect()
}

/// Equally weighted particles with their log-densities, `N x d` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    dim: usize,
    particles: Vec<f64>,
    logq: Vec<f64>,
    stage: usize,
}

impl ParticleSet {
    pub fn new(dim: usize, particles: Vec<f64>, logq: Vec<f64>, stage: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("particle dimension must be positive"));
        }
        check_len("particle buffer", logq.len() * dim, particles.len())?;
        if logq.len() < 2 {
            return Err(invalid("a particle set needs at least two particles"));
        }
        if !all_finite(&particles) || !all_finite(&logq) {
            return Err(invalid("particles and log-densities must be finite"));
        }
        Ok(Self {
            dim,
            particles,
            logq,
            stage,
        })
    }

    /// `n` draws from the prior, tagged with the prior log-density.
    pub fn from_prior<R: Rng + ?Sized>(prior: &PriorSpec, n: usize, rng: &mut R) -> Result<Self> {
        let mut particles = Vec::with_capacity(n * prior.dim());
        let mut logq = Vec::with_capacity(n);
        for _ in 0..n {
            let x = prior.sample(rng);
            logq.push(prior.logpdf(&x));
            particles.extend(x);
        }
        Self::new(prior.dim(), particles, logq, 0)
    }

    pub fn len(&self) -> usize {
        self.logq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logq.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn particle(&self, n: usize) -> &[f64] {
        &self.particles[n * self.dim..(n + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.particles.chunks_exact(self.dim)
    }

    pub fn logq(&self) -> &[f64] {
        &self.logq
    }

    /// Per-coordinate mean and unbiased variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        moments(self.particles(), self.dim)
    }

    /// The same set with particles reordered: output `n` is input `perm[n]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut particles = Vec::with_capacity(self.particles.len());
        let mut logq = Vec::with_capacity(self.len());
        for &i in perm {
            particles.extend_from_slice(self.particle(i));
            logq.push(self.logq[i]);
        }
        Self {
            dim: self.dim,
            particles,
            logq,
            stage: self.stage,
        }
    }
}

fn moments<'a>(points: impl Iterator<Item = &'a [f64]> + Clone, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; d];
    for p in points.clone() {
        n += 1;
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for p in points {
        for i in 0..d {
            let r = p[i] - mean[i];
            var[i] += r * r;
        }
    }
    for v in &mut var {
        *v /= (n - 1) as f64;
    }
    (mean, var)
}

/// What the velocity network sees of the incoming observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsFeature {
    Raw,
    /// `grad_x log p(o | x)` at the particle's current position.
    LikelihoodGradient,
}

/// Embedding network `phi` and velocity network `h`, shared by all stages
/// and all times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVelocityNet {
    pub phi: ParamSet,
    pub h: ParamSet,
    pub feature: ObsFeature,
}

impl FlowVelocityNet {
    pub fn new(phi: ParamSet, h: ParamSet, feature: ObsFeature) -> Result<Self> {
        let d = phi.input_dim();
        check_len("velocity input width", phi.output_dim() + 2 * d + 2, h.input_dim())?;
        check_len("velocity output width", d, h.output_dim())?;
        Ok(Self { phi, h, feature })
    }

    /// Tanh networks `phi: d -> hidden -> embed` and
    /// `h: (embed + 2d + 2) -> hidden -> hidden -> d`. The output layer of
    /// `h` starts at zero, so an untrained flow leaves particles in place.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        embed: usize,
        hidden: usize,
        feature: ObsFeature,
        rng: &mut R,
    ) -> Result<Self> {
        let phi = ParamSet::random(&[d, hidden, embed], &[Activation::Tanh, Activation::Tanh], rng)?;
        let mut h = ParamSet::random(
            &[embed + 2 * d + 2, hidden, hidden, d],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        let tail = hidden * d + d;
        let np = h.num_params();
        h.values_mut()[np - tail..].fill(0.0);
        Self::new(phi, h, feature)
    }

    pub fn dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn embed_width(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.h.num_params()
    }

    /// `phi` parameters followed by `h` parameters.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.phi.values().to_vec();
        v.extend_from_slice(self.h.values());
        v
    }

    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        check_len("flow parameters", self.num_params(), theta.len())?;
        let split = self.phi.num_params();
        Ok(Self {
            phi: self.phi.with_values(theta[..split].to_vec())?,
            h: self.h.with_values(theta[split..].to_vec())?,
            feature: self.feature,
        })
    }

    /// True when the output layer of `h` is all zero, i.e. the flow is the
    /// identity.
    pub fn is_still(&self) -> bool {
        let last = self.h.layer(self.h.num_layers() - 1);
        last.weight.iter().chain(last.bias).all(|v| *v == 0.0)
    }
}

/// The velocity field of one stage, with the embedding already computed.
pub struct StageField<'a> {
    net: &'a FlowVelocityNet,
    emb: Vec<f64>,
    obs: &'a [f64],
    lik: LikelihoodSpec,
    t0: f64,
    span: f64,
}

impl<'a> StageField<'a> {
    pub fn new(net: &'a FlowVelocityNet, ps: &ParticleSet, obs: &'a [f64], lik: LikelihoodSpec, grid: &TimeGrid) -> Result<Self> {
        check_len("particle dimension", net.dim(), ps.dim())?;
        check_len("observation", net.dim(), obs.len())?;
        let members: Vec<&[f64]> = ps.particles().collect();
        let emb = deepset_embed(&net.phi, &members)?.pooled;
        Ok(Self {
            net,
            emb,
            obs,
            lik,
            t0: grid.t0(),
            span: grid.span(),
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.emb
    }

    fn input(&self, x: &[f64], t: f64) -> Vec<f64> {
        let tau = (t - self.t0) / self.span;
        let mut u = Vec::with_capacity(self.net.h.input_dim());
        u.extend_from_slice(&self.emb);
        match self.net.feature {
            ObsFeature::Raw => u.extend_from_slice(self.obs),
            ObsFeature::LikelihoodGradient => u.extend(self.lik.grad_x(self.obs, x)),
        }
        u.extend_from_slice(x);
        u.push(tau);
        u.push(1.0 - tau);
        u
    }

    /// Input-space direction corresponding to moving `x` along `v`.
    fn input_tangent(&self, v: &[f64]) -> Vec<f64> {
        let (e, d) = (self.emb.len(), v.len());
        let mut u = vec![0.0; e + 2 * d + 2];
        if self.net.feature == ObsFeature::LikelihoodGradient {
            for i in 0..d {
                u[e + i] = -v[i] / self.lik.var;
            }
        }
        u[e + d..e + 2 * d].copy_from_slice(v);
        u
    }

    /// Splits an input cotangent into its state part and embedding part.
    fn pull_input(&self, ubar: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (e, d) = (self.emb.len(), self.net.dim());
        let mut xbar = ubar[e + d..e + 2 * d].to_vec();
        if self.net.feature == ObsFeature::LikelihoodGradient {
            for i in 0..d {
                xbar[i] -= ubar[e + i] / self.lik.var;
            }
        }
        (xbar, ubar[..e].to_vec())
    }
}

impl Dynamics for StageField<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.net.h.forward(&self.input(x, t)).expect("width checked")
    }
}

impl Jacobian for StageField<'_> {
    fn jvp(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        let pass = self
            .net
            .h
            .tangent_forward(&self.input(x, t), &[self.input_tangent(v)])
            .expect("width checked");
        pass.output_tangent(0).to_vec()
    }

    fn vjp(&self, x: &[f64], t: f64, cot: &[f64]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.net.h.num_params()];
        let ubar = self.net.h.vjp_accumulate(&self.input(x, t), cot, &mut scratch).expect("width checked");
        self.pull_input(&ubar).0
    }
}

fn blow_up(particle: usize, stage: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::FlowBlowUp { particle, stage },
        other => other,
    }
}

/// Moves `ps` to the next stage given observation `o_next`, with Euler steps
/// on `grid`. With Hutchinson traces, particle `n` draws its probes from
/// `mix(seed, n)` of the mode's seed.
pub fn mpf_step(
    ps: &ParticleSet,
    o_next: &[f64],
    lik: LikelihoodSpec,
    net: &FlowVelocityNet,
    grid: &TimeGrid,
    mode: TraceMode,
) -> Result<ParticleSet> {
    let field = StageField::new(net, ps, o_next, lik, grid)?;
    let stage = ps.stage() + 1;
    let moved = (0..ps.len())
        .into_par_iter()
        .map(|n| {
            let start = DensityState {
                x: ps.particle(n).to_vec(),
                logq: ps.logq()[n],
            };
            let mode = match mode {
                TraceMode::Exact => TraceMode::Exact,
                TraceMode::Hutchinson { probes, seed } => TraceMode::Hutchinson {
                    probes,
                    seed: mix(seed, n as u64),
                },
            };
            transport(&start, grid, &field, Scheme::Euler, mode).map_err(blow_up(n, stage))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut particles = Vec::with_capacity(ps.len() * ps.dim());
    let mut logq = Vec::with_capacity(ps.len());
    for s in moved {
        particles.extend(s.x);
        logq.push(s.logq);
    }
    ParticleSet::new(ps.dim(), particles, logq, stage)
}

/// Samples `n` particles from the prior (stream `seed`) and applies one
/// stage per observation. Returns all `M + 1` stages.
pub fn mpf_sequential(
    task: &InferenceTask,
    net: &FlowVelocityNet,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    mode: TraceMode,
) -> Result<Vec<ParticleSet>> {
    let mut rng = seeded(seed);
    let mut stages = vec![ParticleSet::from_prior(&task.prior, n, &mut rng)?];
    for o in &task.observations {
        let next = mpf_step(stages.last().expect("non-empty"), o, task.likelihood, net, grid, mode)?;
        stages.push(next);
    }
    Ok(stages)
}

/// `sum_n [log q_m(x_m^n) - log p(x_m^n, o_1..o_m)]` for one stage.
pub fn elbo_term(ps: &ParticleSet, task: &InferenceTask) -> Result<f64> {
    if ps.stage() > task.num_observations() {
        return Err(invalid(format!(
            "stage {} exceeds the task's {} observations",
            ps.stage(),
            task.num_observations()
        )));
    }
    check_len("particle dimension", task.dim(), ps.dim())?;
    Ok(ps
        .particles()
        .zip(ps.logq())
        .map(|(x, lq)| lq - task.log_joint(x, ps.stage()))
        .sum())
}

/// Summed negative ELBO over stages `1..=M`. `stages[m]` must be stage `m`.
pub fn elbo_loss(stages: &[ParticleSet], task: &InferenceTask) -> Result<f64> {
    let mut total = 0.0;
    for (m, ps) in stages.iter().enumerate() {
        if ps.stage() != m {
            return Err(invalid(format!("stage list position {m} holds stage {}", ps.stage())));
        }
        if m > 0 {
            total += elbo_term(ps, task)?;
        }
    }
    Ok(total)
}

/// Per-particle record of one stage's flow, enough to replay it backward.
struct StageTape {
    emb: Vec<f64>,
    start: ParticleSet,
    /// `states[n][k]` is particle `n` before Euler step `k`.
    states: Vec<Vec<Vec<f64>>>,
}

fn basis_tangents(field: &StageField<'_>, d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            field.input_tangent(&e)
        })
        .collect()
}

/// Forward flow of one stage that records the Euler states. Produces the
/// same numbers as [`mpf_step`] with exact traces.
fn flow_recorded(
    ps: &ParticleSet,
    o: &[f64],
    lik: LikelihoodSpec,
    net: &FlowVelocityNet,
    grid: &TimeGrid,
) -> Result<(ParticleSet, StageTape)> {
    let field = StageField::new(net, ps, o, lik, grid)?;
    let d = ps.dim();
    let h = grid.h();
    let stage = ps.stage() + 1;
    let tangents = basis_tangents(&field, d);
    let runs = (0..ps.len())
        .into_par_iter()
        .map(|n| {
            let mut x = ps.particle(n).to_vec();
            let mut logq = ps.logq()[n];
            let mut states = Vec::with_capacity(grid.steps());
            for k in 0..grid.steps() {
                let t = grid.time(k);
                let pass = net.h.tangent_forward(&field.input(&x, t), &tangents)?;
                let mut div = 0.0;
                for i in 0..d {
                    div += pass.output_tangent(i)[i];
                }
                let v = pass.output();
                let next: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + h * vi).collect();
                logq += h * -div;
                if !all_finite(&next) || !logq.is_finite() {
                    return Err(Error::FlowBlowUp { particle: n, stage });
                }
                states.push(std::mem::replace(&mut x, next));
            }
            Ok((x, logq, states))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut particles = Vec::with_capacity(ps.len() * d);
    let mut logq = Vec::with_capacity(ps.len());
    let mut states = Vec::with_capacity(ps.len());
    for (x, lq, st) in runs {
        particles.extend(x);
        logq.push(lq);
        states.push(st);
    }
    let out = ParticleSet::new(d, particles, logq, stage)?;
    let tape = StageTape {
        emb: field.emb.clone(),
        start: ps.clone(),
        states,
    };
    Ok((out, tape))
}

/// Options for differentiating the cumulative loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GradOptions {
    /// Stop gradients at stage boundaries, so each stage's term only trains
    /// the flow of that stage.
    pub detach_stages: bool,
}

/// Loss, gradient with respect to [`FlowVelocityNet::flat`], and the stages.
pub fn elbo_gradient(
    task: &InferenceTask,
    net: &FlowVelocityNet,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: GradOptions,
) -> Result<(f64, Vec<f64>, Vec<ParticleSet>)> {
    let mut rng = seeded(seed);
    let mut stages = vec![ParticleSet::from_prior(&task.prior, n, &mut rng)?];
    let mut tapes = Vec::with_capacity(task.num_observations());
    for o in &task.observations {
        let (next, tape) = flow_recorded(stages.last().expect("non-empty"), o, task.likelihood, net, grid)?;
        stages.push(next);
        tapes.push(tape);
    }
    let loss = elbo_loss(&stages, task)?;

    let d = task.dim();
    let np_phi = net.phi.num_params();
    let mut gphi = vec![0.0; np_phi];
    let mut gh = vec![0.0; net.h.num_params()];
    // Cotangents flowing into the end of the current stage from later stages.
    let mut carry_x = vec![vec![0.0; d]; n];
    let mut carry_q = vec![0.0; n];

    for m in (1..stages.len()).rev() {
        let out = &stages[m];
        let tape = &tapes[m - 1];
        let mut xbar: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut qbar = Vec::with_capacity(n);
        for (i, x) in out.particles().enumerate() {
            let g = task.grad_log_joint(x, m);
            xbar.push(g.iter().zip(&carry_x[i]).map(|(gi, c)| c - gi).collect());
            qbar.push(carry_q[i] + 1.0);
        }
        let (xin, phi_part, h_part) = stage_backward(task, net, grid, tape, &task.observations[m - 1], &xbar, &qbar)?;
        add_into(&mut gphi, &phi_part);
        add_into(&mut gh, &h_part);
        if opts.detach_stages {
            carry_x = vec![vec![0.0; d]; n];
            carry_q = vec![0.0; n];
        } else {
            carry_x = xin;
            carry_q = qbar;
        }
    }
    gphi.extend(gh);
    Ok((loss, gphi, stages))
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

type StageGrads = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

/// Reverse sweep through one stage. Returns the cotangents of the stage's
/// starting positions and the `phi` and `h` gradients. The log-density
/// cotangent passes through a stage unchanged.
fn stage_backward(
    task: &InferenceTask,
    net: &FlowVelocityNet,
    grid: &TimeGrid,
    tape: &StageTape,
    o: &[f64],
    xbar_out: &[Vec<f64>],
    qbar: &[f64],
) -> Result<StageGrads> {
    let field = StageField::new(net, &tape.start, o, task.likelihood, grid)?;
    debug_assert_eq!(field.emb, tape.emb);
    let d = task.dim();
    let e = net.embed_width();
    let h = grid.h();
    let tangents = basis_tangents(&field, d);
    let n = tape.start.len();

    let per_particle = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut a = xbar_out[i].clone();
            let mut emb_bar = vec![0.0; e];
            let mut gh = vec![0.0; net.h.num_params()];
            let tcots: Vec<Vec<f64>> = (0..d)
                .map(|j| {
                    let mut c = vec![0.0; d];
                    c[j] = -h * qbar[i];
                    c
                })
                .collect();
            for k in (0..grid.steps()).rev() {
                let x = &tape.states[i][k];
                let pass = net.h.tangent_forward(&field.input(x, grid.time(k)), &tangents)?;
                let out_cot: Vec<f64> = a.iter().map(|v| h * v).collect();
                let ubar = pass.backward(&out_cot, &tcots, &mut gh);
                let (dx, de) = field.pull_input(&ubar);
                add_into(&mut a, &dx);
                add_into(&mut emb_bar, &de);
            }
            Ok((a, emb_bar, gh))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut emb_bar = vec![0.0; e];
    let mut gh = vec![0.0; net.h.num_params()];
    let mut xin = Vec::with_capacity(n);
    for (a, eb, g) in per_particle {
        add_into(&mut emb_bar, &eb);
        add_into(&mut gh, &g);
        xin.push(a);
    }
    let scale = 1.0 / n as f64;
    let pooled_bar: Vec<f64> = emb_bar.iter().map(|v| v * scale).collect();
    let mut gphi = vec![0.0; net.phi.num_params()];
    for (i, x) in tape.start.particles().enumerate() {
        let dx = net.phi.vjp_accumulate(x, &pooled_bar, &mut gphi)?;
        add_into(&mut xin[i], &dx);
    }
    Ok((xin, gphi, gh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct OptState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (w, g) in theta.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub step: f64,
    /// Step size at the last update; the step follows a cosine from `step`
    /// down to this value. Equal to `step` for a constant step.
    pub final_step: f64,
    pub particles: usize,
    pub optimizer: Optimizer,
    pub grad: GradOptions,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            step: 1e-2,
            final_step: 1e-4,
            particles: 100,
            optimizer: Optimizer::adam(),
            grad: GradOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub net: FlowVelocityNet,
    /// Mean loss over the tasks of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub iterations: usize,
}

fn cosine_step(start: f64, end: f64, iter: usize, total: usize) -> f64 {
    if total <= 1 || start == end {
        return start;
    }
    let frac = iter as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Each epoch visits every task once in a shuffled order and takes one
/// update per task. Task `i` in epoch `k` samples its particles from
/// `mix(mix(seed, i), k)`.
pub fn meta_train(
    suite: &[InferenceTask],
    net0: &FlowVelocityNet,
    grid: &TimeGrid,
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutcome> {
    meta_train_with(suite, net0, grid, cfg, |_, _| {})
}

/// [`meta_train`] with a callback `(epoch, mean loss)` after each epoch.
pub fn meta_train_with<F: FnMut(usize, f64)>(
    suite: &[InferenceTask],
    net0: &FlowVelocityNet,
    grid: &TimeGrid,
    cfg: &MetaTrainConfig,
    mut on_epoch: F,
) -> Result<MetaTrainOutcome> {
    if suite.is_empty() {
        return Err(invalid("training suite is empty"));
    }
    if cfg.particles < 2 {
        return Err(invalid("need at least two particles"));
    }
    let mut net = net0.clone();
    let mut theta = net.flat();
    let mut opt = OptState::new(cfg.optimizer, theta.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iterations = 0;
    let total_iters = cfg.epochs * suite.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..suite.len()).collect();
        order.shuffle(&mut seeded(mix(cfg.seed, u64::MAX - epoch as u64)));
        let mut total = 0.0;
        for &i in &order {
            let seed = mix(mix(cfg.seed, i as u64), epoch as u64);
            let (loss, grad, _) = elbo_gradient(&suite[i], &net, cfg.particles, grid, seed, cfg.grad)
                .map_err(|e| match e {
                    Error::FlowBlowUp { .. } => Error::NonFiniteLoss { task: i },
                    other => other,
                })?;
            if !loss.is_finite() || !all_finite(&grad) {
                return Err(Error::NonFiniteLoss { task: i });
            }
            total += loss;
            opt.apply(&mut theta, &grad, cosine_step(cfg.step, cfg.final_step, iterations, total_iters));
            net = net.with_flat(&theta)?;
            iterations += 1;
        }
        let mean = total / suite.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(MetaTrainOutcome {
        net,
        epoch_losses,
        iterations,
    })
}

/// Langevin samples and their moments pooled over chains and post-burn-in
/// steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LangevinRun {
    pub final_states: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Euler-Maruyama for `dx = grad log p(x) dt + sqrt(2) dW`, one chain per
/// starting point. Chain `c` uses the stream `mix(seed, c)`. Steps after
/// `burn_in` are pooled into the moments.
pub fn langevin_reference<G>(
    grad_log_target: G,
    x0: &[Vec<f64>],
    steps: usize,
    dt: f64,
    burn_in: usize,
    seed: u64,
) -> Result<LangevinRun>
where
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    if x0.is_empty() || burn_in >= steps {
        return Err(invalid("need at least one chain and steps beyond burn-in"));
    }
    let d = x0[0].len();
    let noise = (2.0 * dt).sqrt();
    let chains = x0
        .par_iter()
        .enumerate()
        .map(|(c, start)| {
            check_len("chain start", d, start.len())?;
            let mut rng = seeded(mix(seed, c as u64));
            let mut x = start.clone();
            let mut sum = vec![0.0; d];
            let mut sumsq = vec![0.0; d];
            for k in 0..steps {
                let g = grad_log_target(&x);
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[i] += dt * g[i] + noise * z;
                }
                if !all_finite(&x) {
                    return Err(Error::NonFinite { step: k + 1 });
                }
                if k >= burn_in {
                    for i in 0..d {
                        sum[i] += x[i];
                        sumsq[i] += x[i] * x[i];
                    }
                }
            }
            Ok((x, sum, sumsq))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = (chains.len() * (steps - burn_in)) as f64;
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let mut final_states = Vec::with_capacity(chains.len());
    for (x, s, q) in chains {
        add_into(&mut sum, &s);
        add_into(&mut sumsq, &q);
        final_states.push(x);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let var = (0..d)
        .map(|i| (sumsq[i] - count * mean[i] * mean[i]) / (count - 1.0))
        .collect();
    Ok(LangevinRun {
        final_states,
        mean,
        var,
    })
}

/// Langevin reference for stage `m` of a task, started from the prior.
pub fn langevin_for_task(
    task: &InferenceTask,
    m: usize,
    chains: usize,
    steps: usize,
    dt: f64,
    burn_in: usize,
    seed: u64,
) -> Result<LangevinRun> {
    if m > task.num_observations() {
        return Err(invalid("stage beyond the task's observations"));
    }
    let mut rng = seeded(seed);
    let x0: Vec<Vec<f64>> = (0..chains).map(|_| task.prior.sample(&mut rng)).collect();
    langevin_reference(|x| task.grad_log_joint(x, m), &x0, steps, dt, burn_in, mix(seed, 1))
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: usize,
    pub stage: usize,
    pub particle_mean: Vec<f64>,
    pub particle_var: Vec<f64>,
    pub true_post_mean: Vec<f64>,
    pub true_post_var: Vec<f64>,
    pub elbo_term: f64,
}

/// Runs the flow on every task (task `i` samples from `mix(seed, i)`) and
/// compares every stage with the exact posterior.
pub fn evaluate(
    suite: &[InferenceTask],
    net: &FlowVelocityNet,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, task) in suite.iter().enumerate() {
        let stages = mpf_sequential(task, net, n, grid, mix(seed, i as u64), TraceMode::Exact)?;
        for ps in &stages {
            let (mean, var) = ps.moments();
            let post = &task.posteriors[ps.stage()];
            rows.push(EvalRow {
                task_id: i,
                stage: ps.stage(),
                particle_mean: mean,
                particle_var: var,
                true_post_mean: post.mean.clone(),
                true_post_var: post.var.clone(),
                elbo_term: elbo_term(ps, task)?,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `task_id,stage,particle_mean_*,particle_var_*,
/// true_post_mean_*,true_post_var_*,elbo_term`.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let d = rows.first().map_or(0, |r| r.particle_mean.len());
    let mut s = String::from("task_id,stage");
    for name in ["particle_mean", "particle_var", "true_post_mean", "true_post_var"] {
        for k in 0..d {
            s.push_str(&format!(",{name}_{k}"));
        }
    }
    s.push_str(",elbo_term\n");
    for r in rows {
        s.push_str(&format!("{},{}", r.task_id, r.stage));
        for col in [&r.particle_mean, &r.particle_var, &r.true_post_mean, &r.true_post_var] {
            for v in col {
                s.push_str(&format!(",{v:?}"));
            }
        }
        s.push_str(&format!(",{:?}\n", r.elbo_term));
    }
    s
}

/// Flow settings stored with a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub particles: usize,
    pub horizon: f64,
    pub steps: usize,
    pub feature: ObsFeature,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            horizon: 1.0,
            steps: 10,
            feature: ObsFeature::Raw,
        }
    }
}

impl FlowConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, self.steps)
    }
}

/// Trained-operator file: both networks plus the flow settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpfBundle {
    pub phi: ParamSet,
    pub h: ParamSet,
    pub config: FlowConfig,
}

impl MpfBundle {
    pub fn new(net: &FlowVelocityNet, config: FlowConfig) -> Self {
        Self {
            phi: net.phi.clone(),
            h: net.h.clone(),
            config: FlowConfig {
                feature: net.feature,
                ..config
            },
        }
    }

    pub fn net(&self) -> Result<FlowVelocityNet> {
        FlowVelocityNet::new(self.phi.clone(), self.h.clone(), self.config.feature)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        b.net()?;
        Ok(b)
    }
}
