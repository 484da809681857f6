//! Training as open-loop optimal control.
//!
//! A network of depth `T` is the discrete system `X_{t+1} = g(X_t, W_t)`,
//! and the per-layer weights `W_t` are the control. The costate
//! `P_t = -dL/dX_t` is propagated backward by `P_t = (dg/dx)^T P_{t+1}`
//! starting from `P_T = -grad L(X_T)`, and the discrete Hamiltonian
//! `H_t(W) = P_{t+1} . g(X_t, W) - delta R(W)` is maximized per layer
//! (method of successive approximations).
//!
//! The batch loss is the mean of the per-example losses, so each example's
//! terminal costate carries a `1/B` factor and the batch Hamiltonian is the
//! plain sum over examples. With that convention `grad_W H_t = -dJ/dW_t`,
//! where `J` is the regularized training objective, and one gradient-ascent
//! step on `H` is exactly one gradient-descent step on `J`.
//!
//! The adjoint-gradient module uses the opposite sign, `p = +dL/dx`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{dot, max_abs};
use crate::nn::{Activation, ParamSet};
use crate::ode::{TimeGrid, Trajectory};

/// Costate at one node.
pub type AdjointVec = Vec<f64>;

/// How one layer maps its state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerMap {
    /// `g(x, W) = x + h net_W(x)`
    Residual { h: f64 },
    /// `g(x, W) = net_W(x)`
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// `R(W) = |W|^2 / 2` over every weight and bias.
    L2,
}

impl Regularizer {
    pub fn value(self, w: &[f64]) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L2 => 0.5 * dot(w, w),
        }
    }

    fn add_grad(self, scale: f64, w: &[f64], out: &mut [f64]) {
        if let Regularizer::L2 = self {
            crate::linalg::axpy(scale, w, out);
        }
    }
}

/// Per-layer controls `W_0 .. W_{T-1}` plus the running-cost weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub layers: Vec<ParamSet>,
    pub map: LayerMap,
    pub delta: f64,
    pub regularizer: Regularizer,
}

impl ControlPath {
    pub fn new(layers: Vec<ParamSet>, map: LayerMap, delta: f64, regularizer: Regularizer) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("control path needs at least one layer"));
        }
        if !(delta >= 0.0) {
            return Err(invalid("running-cost weight must be non-negative"));
        }
        let d = layers[0].input_dim();
        for p in &layers {
            check_len("layer input width", d, p.input_dim())?;
            check_len("layer output width", d, p.output_dim())?;
            check_len("layer parameter count", layers[0].num_params(), p.num_params())?;
        }
        Ok(Self {
            layers,
            map,
            delta,
            regularizer,
        })
    }

    /// `depth` single-layer tanh maps of width `dim`, weights `N(0, 1/dim)`.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        depth: usize,
        map: LayerMap,
        delta: f64,
        regularizer: Regularizer,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|_| ParamSet::random(&[dim, dim], &[Activation::Tanh], rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, map, delta, regularizer)
    }

    /// Weights and biases drawn uniformly from `{-1, 0, 1}`.
    pub fn random_ternary<R: Rng + ?Sized>(
        dim: usize,
        depth: usize,
        map: LayerMap,
        delta: f64,
        regularizer: Regularizer,
        rng: &mut R,
    ) -> Result<Self> {
        let pick = Uniform::new_inclusive(-1i32, 1).expect("valid range");
        let mut path = Self::random(dim, depth, map, delta, regularizer, rng)?;
        for p in &mut path.layers {
            for v in p.values_mut() {
                *v = pick.sample(rng) as f64;
            }
        }
        Ok(path)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// `g(x, w)`
    pub fn apply(&self, w: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        let v = w.forward(x)?;
        Ok(match self.map {
            LayerMap::Residual { h } => x.iter().zip(&v).map(|(a, b)| a + h * b).collect(),
            LayerMap::Plain => v,
        })
    }

    /// Returns `(dg/dx)^T p` and adds `(dg/dW)^T p` into `grad_w`.
    fn layer_vjp(&self, w: &ParamSet, x: &[f64], p: &[f64], grad_w: &mut [f64]) -> Result<Vec<f64>> {
        match self.map {
            LayerMap::Residual { h } => {
                let scaled: Vec<f64> = p.iter().map(|v| h * v).collect();
                let dx = w.vjp_accumulate(x, &scaled, grad_w)?;
                Ok(p.iter().zip(&dx).map(|(a, b)| a + b).collect())
            }
            LayerMap::Plain => w.vjp_accumulate(x, p, grad_w),
        }
    }

    /// Fraction of parameters that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.layers.iter().map(|p| p.num_params()).sum();
        let zeros: usize = self
            .layers
            .iter()
            .map(|p| p.values().iter().filter(|v| **v == 0.0).count())
            .sum();
        zeros as f64 / total as f64
    }

    pub fn running_cost(&self) -> f64 {
        self.delta
            * self
                .layers
                .iter()
                .map(|p| self.regularizer.value(p.values()))
                .sum::<f64>()
    }

    /// Layer nodes `0, 1, ..., T` as a unit-step grid.
    fn grid(&self) -> TimeGrid {
        TimeGrid::new(0.0, self.depth() as f64, self.depth()).expect("depth >= 1")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(s - y)^2 / 2`
    Squared,
    /// `log(1 + exp(-y s))`, labels in `{-1, +1}`
    Logistic,
}

impl LossKind {
    fn value_and_slope(self, score: f64, y: f64) -> (f64, f64) {
        match self {
            LossKind::Squared => {
                let r = score - y;
                (0.5 * r * r, r)
            }
            LossKind::Logistic => {
                let m = -y * score;
                // log(1 + e^m) and its derivative, overflow-safe
                let value = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
                let sig = 1.0 / (1.0 + (-m).exp());
                (value, -y * sig)
            }
        }
    }
}

/// Examples and targets. The network's score is the first state coordinate
/// of the terminal layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub loss: LossKind,
}

impl SupervisedBatch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, loss: LossKind) -> Result<Self> {
        check_len("target count", inputs.len(), targets.len())?;
        if inputs.is_empty() {
            return Err(invalid("batch must not be empty"));
        }
        let d = inputs[0].len();
        for x in &inputs {
            check_len("input width", d, x.len())?;
        }
        if loss == LossKind::Logistic && targets.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(invalid("logistic targets must be -1 or +1"));
        }
        Ok(Self { inputs, targets, loss })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }
}

/// Two Gaussian blobs in the plane, labelled `+-1` by the side of a random
/// line through the origin. Points closer than `margin` to the line are
/// redrawn.
pub fn blobs(per_class: usize, margin: f64, seed: u64) -> SupervisedBatch {
    let mut rng = crate::rng::seeded(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let normal = [angle.cos(), angle.sin()];
    let noise = Normal::new(0.0, 0.5).expect("positive std");
    let mut inputs = Vec::with_capacity(2 * per_class);
    let mut targets = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        loop {
            let x = [
                label * normal[0] + noise.sample(&mut rng),
                label * normal[1] + noise.sample(&mut rng),
            ];
            let side = dot(&x, &normal);
            if side * label >= margin {
                inputs.push(x.to_vec());
                targets.push(label);
                break;
            }
        }
    }
    SupervisedBatch::new(inputs, targets, LossKind::Logistic).expect("consistent batch")
}

/// `p . g(x, w) - delta R(w)`
pub fn discrete_hamiltonian(path: &ControlPath, x: &[f64], p: &[f64], w: &ParamSet) -> Result<f64> {
    check_len("costate", x.len(), p.len())?;
    let g = path.apply(w, x)?;
    Ok(dot(p, &g) - path.delta * path.regularizer.value(w.values()))
}

/// Forward sweep of one example through the path.
pub fn forward_sweep(path: &ControlPath, x0: &[f64]) -> Result<Trajectory> {
    check_len("input width", path.dim(), x0.len())?;
    let mut traj = Trajectory::new(path.grid(), x0.len());
    let mut x = x0.to_vec();
    traj.push(&x);
    for w in &path.layers {
        x = path.apply(w, &x)?;
        traj.push(&x);
    }
    Ok(traj)
}

/// Backward costate sweep: `P_T = -loss_grad`, `P_t = (dg/dx)^T P_{t+1}`.
/// Returns `P_0 .. P_T`.
pub fn adjoint_sweep(traj: &Trajectory, path: &ControlPath, loss_grad: &[f64]) -> Result<Vec<AdjointVec>> {
    check_len("trajectory nodes", path.depth() + 1, traj.len())?;
    check_len("loss gradient", traj.dim(), loss_grad.len())?;
    let mut out = vec![Vec::new(); path.depth() + 1];
    let mut p: Vec<f64> = loss_grad.iter().map(|v| -v).collect();
    let mut scratch = vec![0.0; path.layers[0].num_params()];
    for t in (0..path.depth()).rev() {
        let next = path.layer_vjp(&path.layers[t], traj.state(t), &p, &mut scratch)?;
        out[t + 1] = std::mem::replace(&mut p, next);
    }
    out[0] = p;
    Ok(out)
}

/// Forward and backward sweeps over a whole batch at the current controls.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub trajectories: Vec<Trajectory>,
    pub adjoints: Vec<Vec<AdjointVec>>,
    /// Mean data loss plus running cost.
    pub objective: f64,
    pub error_rate: f64,
}

pub fn sweep(batch: &SupervisedBatch, path: &ControlPath) -> Result<Sweep> {
    let b = batch.len() as f64;
    let mut trajectories = Vec::with_capacity(batch.len());
    let mut adjoints = Vec::with_capacity(batch.len());
    let mut data_loss = 0.0;
    let mut wrong = 0usize;
    for (x, &y) in batch.inputs.iter().zip(&batch.targets) {
        let traj = forward_sweep(path, x)?;
        let score = traj.last()[0];
        let (l, slope) = batch.loss.value_and_slope(score, y);
        data_loss += l;
        if misclassified(score, y) {
            wrong += 1;
        }
        let mut grad = vec![0.0; traj.dim()];
        grad[0] = slope / b;
        adjoints.push(adjoint_sweep(&traj, path, &grad)?);
        trajectories.push(traj);
    }
    Ok(Sweep {
        trajectories,
        adjoints,
        objective: data_loss / b + path.running_cost(),
        error_rate: wrong as f64 / b,
    })
}

fn misclassified(score: f64, y: f64) -> bool {
    // A zero score counts as wrong for either label.
    !(score * y > 0.0)
}

/// `sum_i P^i_{t+1} . g(X^i_t, w) - delta R(w)` for one layer.
pub fn batch_hamiltonian(path: &ControlPath, sw: &Sweep, t: usize, w: &ParamSet) -> Result<f64> {
    let mut h = 0.0;
    for (traj, adj) in sw.trajectories.iter().zip(&sw.adjoints) {
        h += dot(&adj[t + 1], &path.apply(w, traj.state(t))?);
    }
    Ok(h - path.delta * path.regularizer.value(w.values()))
}

/// `grad_w` of [`batch_hamiltonian`].
pub fn hamiltonian_grad(path: &ControlPath, sw: &Sweep, t: usize, w: &ParamSet) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; w.num_params()];
    for (traj, adj) in sw.trajectories.iter().zip(&sw.adjoints) {
        path.layer_vjp(w, traj.state(t), &adj[t + 1], &mut grad)?;
    }
    path.regularizer.add_grad(-path.delta, w.values(), &mut grad);
    Ok(grad)
}

/// `|grad_W H_t|_inf` per layer, for per-example trajectories and costates.
pub fn pmp_residual(trajs: &[Trajectory], path: &ControlPath, adjoints: &[Vec<AdjointVec>]) -> Result<Vec<f64>> {
    check_len("costate paths", trajs.len(), adjoints.len())?;
    for (traj, adj) in trajs.iter().zip(adjoints) {
        check_len("trajectory nodes", path.depth() + 1, traj.len())?;
        check_len("costate nodes", path.depth() + 1, adj.len())?;
    }
    let sw = Sweep {
        trajectories: trajs.to_vec(),
        adjoints: adjoints.to_vec(),
        objective: f64::NAN,
        error_rate: f64::NAN,
    };
    sweep_residual(path, &sw)
}

fn sweep_residual(path: &ControlPath, sw: &Sweep) -> Result<Vec<f64>> {
    (0..path.depth())
        .map(|t| Ok(max_abs(&hamiltonian_grad(path, sw, t, &path.layers[t])?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MsaMode {
    /// A few backtracking gradient-ascent steps on each `H_t`.
    ArgmaxInnerAscent { inner_steps: usize, lr_scale: f64 },
    /// One plain ascent step `W + step grad H`.
    GradientStep,
    /// Coordinatewise exact maximization over `{-1, 0, +1}`, one sweep per
    /// iteration, ties resolved toward 0. With `rho > 0` the maximized
    /// quantity is `H_t - rho * feasibility_gap`, and `rho` adapts: a move
    /// that raises the objective is rejected and `rho` doubles, an accepted
    /// one halves it (down to a floor). `rho = 0` is the bare argmax.
    DiscreteArgmax { rho: f64 },
}

impl MsaMode {
    pub fn inner_ascent() -> Self {
        MsaMode::ArgmaxInnerAscent {
            inner_steps: 5,
            lr_scale: 0.1,
        }
    }

    pub fn discrete() -> Self {
        MsaMode::DiscreteArgmax { rho: 0.5 }
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub pmp_residual_max: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub path: ControlPath,
    /// Row `k` describes the controls before update `k`; the last row
    /// describes the returned controls.
    pub history: Vec<HistoryRow>,
}

const DIVERGENCE_LOSS: f64 = 1e6;

fn record(iter: usize, path: &ControlPath, sw: &Sweep) -> Result<HistoryRow> {
    if !(sw.objective <= DIVERGENCE_LOSS) {
        return Err(Error::Divergence {
            iter,
            loss: sw.objective,
        });
    }
    let residual = sweep_residual(path, sw)?;
    Ok(HistoryRow {
        iter,
        train_loss: sw.objective,
        train_err: sw.error_rate,
        pmp_residual_max: residual.iter().copied().fold(0.0, f64::max),
        sparsity: path.sparsity(),
    })
}

/// Method of successive approximations.
pub fn msa_train(
    batch: &SupervisedBatch,
    path0: &ControlPath,
    mode: MsaMode,
    iters: usize,
    step: f64,
) -> Result<TrainOutcome> {
    if iters == 0 {
        return Err(invalid("need at least one iteration"));
    }
    check_len("input width", path0.dim(), batch.dim())?;
    let mut path = path0.clone();
    let mut history = Vec::with_capacity(iters + 1);
    let mut mode = mode;
    let mut sw = sweep(batch, &path)?;
    for k in 0..iters {
        history.push(record(k, &path, &sw)?);
        let layers = (0..path.depth())
            .map(|t| maximize_layer(&path, &sw, t, mode, step))
            .collect::<Result<Vec<_>>>()?;
        let cand = ControlPath { layers, ..path.clone() };
        let cand_sw = sweep(batch, &cand)?;
        if let MsaMode::DiscreteArgmax { rho } = &mut mode {
            // Trust region on the penalty: undo a move that raised the
            // objective and penalize drift harder.
            if *rho > 0.0 {
                if cand_sw.objective > sw.objective {
                    *rho *= 2.0;
                    continue;
                }
                *rho = (*rho * 0.5).max(RHO_MIN);
            }
        }
        path = cand;
        sw = cand_sw;
    }
    history.push(record(iters, &path, &sw)?);
    Ok(TrainOutcome { path, history })
}

const RHO_MIN: f64 = 0.05;

fn maximize_layer(path: &ControlPath, sw: &Sweep, t: usize, mode: MsaMode, step: f64) -> Result<ParamSet> {
    let w = &path.layers[t];
    match mode {
        MsaMode::GradientStep => {
            let g = hamiltonian_grad(path, sw, t, w)?;
            let vals = w.values().iter().zip(&g).map(|(a, b)| a + step * b).collect();
            w.with_values(vals)
        }
        MsaMode::ArgmaxInnerAscent { inner_steps, lr_scale } => {
            Ok(inner_ascent(path, sw, t, inner_steps, lr_scale * step)?.0)
        }
        MsaMode::DiscreteArgmax { rho } => discrete_argmax(path, sw, t, rho),
    }
}

/// Backtracking gradient ascent on `H_t`; returns the final weights and the
/// Hamiltonian value after each inner step (starting value first).
pub fn inner_ascent(
    path: &ControlPath,
    sw: &Sweep,
    t: usize,
    inner_steps: usize,
    lr: f64,
) -> Result<(ParamSet, Vec<f64>)> {
    let mut w = path.layers[t].clone();
    let mut h = batch_hamiltonian(path, sw, t, &w)?;
    let mut values = vec![h];
    for _ in 0..inner_steps {
        let g = hamiltonian_grad(path, sw, t, &w)?;
        let mut eta = lr;
        // Halve until the step does not decrease H; keep W if nothing works.
        for _ in 0..30 {
            let vals = w.values().iter().zip(&g).map(|(a, b)| a + eta * b).collect();
            let cand = w.with_values(vals)?;
            let hc = batch_hamiltonian(path, sw, t, &cand)?;
            if hc >= h {
                w = cand;
                h = hc;
                break;
            }
            eta *= 0.5;
        }
        values.push(h);
    }
    Ok((w, values))
}

const TERNARY: [f64; 3] = [-1.0, 0.0, 1.0];

fn discrete_argmax(path: &ControlPath, sw: &Sweep, t: usize, rho: f64) -> Result<ParamSet> {
    let mut w = path.layers[t].clone();
    for i in 0..w.num_params() {
        let mut scores = [0.0; 3];
        for (s, v) in scores.iter_mut().zip(TERNARY) {
            w.values_mut()[i] = v;
            *s = batch_hamiltonian(path, sw, t, &w)?;
            if rho > 0.0 {
                *s -= rho * feasibility_gap(path, sw, t, &w)?;
            }
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tie = 1e-12 * (1.0 + best.abs());
        let choice = if scores[1] >= best - tie {
            0.0
        } else if scores[0] >= scores[2] {
            -1.0
        } else {
            1.0
        };
        w.values_mut()[i] = choice;
    }
    Ok(w)
}

/// Half the batch-mean squared drift of `X_{t+1}` when layer `t` is
/// replaced by `w` while `X_t` stays at the current sweep.
pub fn feasibility_gap(path: &ControlPath, sw: &Sweep, t: usize, w: &ParamSet) -> Result<f64> {
    let mut gap = 0.0;
    for traj in &sw.trajectories {
        let x = path.apply(w, traj.state(t))?;
        gap += x.iter().zip(traj.state(t + 1)).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
    }
    Ok(0.5 * gap / sw.trajectories.len() as f64)
}

/// Full-batch gradient descent on the regularized objective, differentiating
/// the network by plain backpropagation.
pub fn sgd_train(batch: &SupervisedBatch, path0: &ControlPath, iters: usize, step: f64) -> Result<TrainOutcome> {
    if iters == 0 {
        return Err(invalid("need at least one iteration"));
    }
    check_len("input width", path0.dim(), batch.dim())?;
    let mut path = path0.clone();
    let mut history = Vec::with_capacity(iters + 1);
    for k in 0..iters {
        let (grads, sw) = backprop(batch, &path)?;
        history.push(record(k, &path, &sw)?);
        for (w, g) in path.layers.iter_mut().zip(&grads) {
            for (v, gi) in w.values_mut().iter_mut().zip(g) {
                *v -= step * gi;
            }
        }
    }
    let sw = sweep(batch, &path)?;
    history.push(record(iters, &path, &sw)?);
    Ok(TrainOutcome { path, history })
}

/// Gradient of the objective with respect to every layer.
pub fn backprop(batch: &SupervisedBatch, path: &ControlPath) -> Result<(Vec<Vec<f64>>, Sweep)> {
    let b = batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = path.layers.iter().map(|w| vec![0.0; w.num_params()]).collect();
    for (x, &y) in batch.inputs.iter().zip(&batch.targets) {
        let traj = forward_sweep(path, x)?;
        let (_, slope) = batch.loss.value_and_slope(traj.last()[0], y);
        let mut a = vec![0.0; traj.dim()];
        a[0] = slope / b;
        for t in (0..path.depth()).rev() {
            a = path.layer_vjp(&path.layers[t], traj.state(t), &a, &mut grads[t])?;
        }
    }
    for (w, g) in path.layers.iter().zip(grads.iter_mut()) {
        path.regularizer.add_grad(path.delta, w.values(), g);
    }
    // Bookkeeping sweep for the log; not used by the update.
    let sw = sweep(batch, path)?;
    Ok((grads, sw))
}

/// CSV with columns `iter,train_loss,train_err,pmp_residual_max,sparsity`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("iter,train_loss,train_err,pmp_residual_max,sparsity\n");
    for r in history {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.iter, r.train_loss, r.train_err, r.pmp_residual_max, r.sparsity
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use crate::rng::seeded;

    fn resnet_path(seed: u64, delta: f64) -> ControlPath {
        ControlPath::random(2, 3, LayerMap::Residual { h: 0.5 }, delta, Regularizer::L2, &mut seeded(seed)).unwrap()
    }

    fn terminal_loss(path: &ControlPath, x: &[f64], y: f64) -> f64 {
        let traj = forward_sweep(path, x).unwrap();
        LossKind::Logistic.value_and_slope(traj.last()[0], y).0
    }

    #[test]
    fn hamiltonian_trivial_cases() {
        let path = resnet_path(1, 0.0);
        let w = &path.layers[0];
        assert_eq!(discrete_hamiltonian(&path, &[0.3, 0.1], &[0.0, 0.0], w).unwrap(), 0.0);

        let ident = ParamSet::from_flat(&[2, 2], &[Activation::Identity], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let plain = ControlPath::new(vec![ident.clone()], LayerMap::Plain, 0.0, Regularizer::None).unwrap();
        let h = discrete_hamiltonian(&plain, &[0.3, -2.0], &[1.5, 0.25], &ident).unwrap();
        assert_eq!(h, 0.3 * 1.5 + -2.0 * 0.25);
    }

    #[test]
    fn hamiltonian_matches_straight_line_recomputation() {
        let path = resnet_path(3, 0.0);
        let path = ControlPath {
            map: LayerMap::Residual { h: 1.0 },
            ..path
        };
        let w = &path.layers[1];
        let (x, p) = ([0.4, -0.9], [1.2, 0.7]);
        let v = w.values();
        let g0 = x[0] + (v[0] * x[0] + v[1] * x[1] + v[4]).tanh();
        let g1 = x[1] + (v[2] * x[0] + v[3] * x[1] + v[5]).tanh();
        let want = p[0] * g0 + p[1] * g1;
        let got = discrete_hamiltonian(&path, &x, &p, w).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn adjoint_trivial_cases() {
        let path = resnet_path(2, 0.0);
        let traj = forward_sweep(&path, &[0.5, 0.5]).unwrap();
        let adj = adjoint_sweep(&traj, &path, &[0.0, 0.0]).unwrap();
        assert!(adj.iter().all(|p| p.iter().all(|v| *v == 0.0)));

        let z = ParamSet::zeros(&[2, 2], &[Activation::Tanh]).unwrap();
        let ident = ControlPath::new(vec![z], LayerMap::Residual { h: 1.0 }, 0.0, Regularizer::None).unwrap();
        let traj = forward_sweep(&ident, &[1.0, 2.0]).unwrap();
        let adj = adjoint_sweep(&traj, &ident, &[0.25, -3.0]).unwrap();
        assert_eq!(adj[0], vec![-0.25, 3.0]);
        assert_eq!(adj[1], vec![-0.25, 3.0]);
    }

    #[test]
    fn adjoint_is_negative_state_gradient() {
        let path = resnet_path(5, 0.0);
        let (x0, y) = ([0.3, -0.6], 1.0);
        let traj = forward_sweep(&path, &x0).unwrap();
        let (_, slope) = LossKind::Logistic.value_and_slope(traj.last()[0], y);
        let adj = adjoint_sweep(&traj, &path, &[slope, 0.0]).unwrap();
        let eps = 1e-5;
        // -P_t against finite differences on the tail network from node t.
        for t in 0..=path.depth() {
            let tail = ControlPath {
                layers: path.layers[t..].to_vec(),
                ..path.clone()
            };
            for k in 0..2 {
                let mut xp = traj.state(t).to_vec();
                xp[k] += eps;
                let mut xm = traj.state(t).to_vec();
                xm[k] -= eps;
                let fd = if tail.layers.is_empty() {
                    let lp = LossKind::Logistic.value_and_slope(xp[0], y).0;
                    let lm = LossKind::Logistic.value_and_slope(xm[0], y).0;
                    (lp - lm) / (2.0 * eps)
                } else {
                    (terminal_loss(&tail, &xp, y) - terminal_loss(&tail, &xm, y)) / (2.0 * eps)
                };
                assert!(relative_error(fd, -adj[t][k]) < 1e-5, "t={t} k={k}: {fd} vs {}", -adj[t][k]);
            }
        }
    }

    #[test]
    fn adjoint_rejects_mismatched_lengths() {
        let path = resnet_path(5, 0.0);
        let short = ControlPath {
            layers: path.layers[..2].to_vec(),
            ..path.clone()
        };
        let traj = forward_sweep(&short, &[0.1, 0.1]).unwrap();
        assert!(adjoint_sweep(&traj, &path, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let batch = blobs(10, 0.2, 1);
        let path = resnet_path(1, 0.0);
        assert!(msa_train(&batch, &path, MsaMode::GradientStep, 0, 0.1).is_err());
        assert!(sgd_train(&batch, &path, 0, 0.1).is_err());
    }

    #[test]
    fn gradient_step_msa_equals_gradient_descent() {
        let batch = blobs(30, 0.2, 4);
        let path = resnet_path(4, 0.0);
        let msa = msa_train(&batch, &path, MsaMode::GradientStep, 50, 0.5).unwrap();
        let sgd = sgd_train(&batch, &path, 50, 0.5).unwrap();
        for (a, b) in msa.history.iter().zip(&sgd.history) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-10);
        }
        for (wa, wb) in msa.path.layers.iter().zip(&sgd.path.layers) {
            for (a, b) in wa.values().iter().zip(wb.values()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sgd_zero_step_keeps_parameters() {
        let batch = blobs(10, 0.2, 2);
        let path = resnet_path(2, 0.1);
        let out = sgd_train(&batch, &path, 5, 0.0).unwrap();
        assert_eq!(out.path, path);
    }

    #[test]
    fn sgd_linear_quadratic_matches_hand_recursion() {
        // One identity-activation layer, plain map, squared loss on the first
        // coordinate: the objective is quadratic in (w00, w01, b0).
        let xs = vec![vec![1.0, 2.0], vec![-0.5, 0.25], vec![0.3, -1.0]];
        let ys = vec![0.5, -1.0, 2.0];
        let batch = SupervisedBatch::new(xs.clone(), ys.clone(), LossKind::Squared).unwrap();
        let w0 = vec![0.1, -0.2, 0.3, 0.4, 0.05, -0.05];
        let layer = ParamSet::from_flat(&[2, 2], &[Activation::Identity], w0.clone()).unwrap();
        let path = ControlPath::new(vec![layer], LayerMap::Plain, 0.0, Regularizer::None).unwrap();
        let step = 0.3;
        let out = sgd_train(&batch, &path, 20, step).unwrap();

        let (mut a, mut b, mut c) = (w0[0], w0[1], w0[4]);
        for _ in 0..20 {
            let (mut ga, mut gb, mut gc) = (0.0, 0.0, 0.0);
            for (x, y) in xs.iter().zip(&ys) {
                let r = a * x[0] + b * x[1] + c - y;
                ga += r * x[0] / 3.0;
                gb += r * x[1] / 3.0;
                gc += r / 3.0;
            }
            a -= step * ga;
            b -= step * gb;
            c -= step * gc;
        }
        let v = out.path.layers[0].values();
        assert!((v[0] - a).abs() < 1e-14);
        assert!((v[1] - b).abs() < 1e-14);
        assert!((v[4] - c).abs() < 1e-14);
        // second output row never influences the loss
        assert_eq!(&v[2..4], &w0[2..4]);
    }

    #[test]
    fn sgd_learns_blobs() {
        let batch = blobs(50, 0.2, 7);
        let path = resnet_path(7, 0.0);
        let out = sgd_train(&batch, &path, 500, 0.5).unwrap();
        assert!(out.history.last().unwrap().train_err < 0.05);
    }

    #[test]
    fn residual_vanishes_at_closed_form_stationary_point() {
        // g(x, W) = W x + b, H = P1.(W x + b) - delta |(W, b)|^2 / 2,
        // stationary at W = P1 x^T / delta, b = P1 / delta.
        let (x, p1, delta) = ([1.0, 2.0], [0.5, -0.25], 0.5);
        let vals = vec![
            p1[0] * x[0] / delta,
            p1[0] * x[1] / delta,
            p1[1] * x[0] / delta,
            p1[1] * x[1] / delta,
            p1[0] / delta,
            p1[1] / delta,
        ];
        let layer = ParamSet::from_flat(&[2, 2], &[Activation::Identity], vals).unwrap();
        let path = ControlPath::new(vec![layer], LayerMap::Plain, delta, Regularizer::L2).unwrap();
        let traj = forward_sweep(&path, &x).unwrap();
        let adj = vec![vec![vec![0.0, 0.0], p1.to_vec()]];
        let r = pmp_residual(&[traj], &path, &adj).unwrap();
        assert_eq!(r, vec![0.0]);
    }

    #[test]
    fn residual_positive_at_random_init() {
        let batch = blobs(10, 0.2, 9);
        let path = resnet_path(9, 0.01);
        let sw = sweep(&batch, &path).unwrap();
        let r = pmp_residual(&sw.trajectories, &path, &sw.adjoints).unwrap();
        assert!(r.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn residual_small_after_convergence() {
        let batch = blobs(20, 0.2, 11);
        let path = resnet_path(11, 0.05);
        let out = msa_train(&batch, &path, MsaMode::GradientStep, 3000, 1.0).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.pmp_residual_max < 1e-3, "{}", last.pmp_residual_max);
    }

    #[test]
    fn inner_ascent_never_decreases_hamiltonian() {
        let batch = blobs(15, 0.2, 13);
        let path = resnet_path(13, 0.01);
        let sw = sweep(&batch, &path).unwrap();
        for t in 0..path.depth() {
            let (_, values) = inner_ascent(&path, &sw, t, 5, 5.0).unwrap();
            for w in values.windows(2) {
                assert!(w[1] >= w[0]);
            }
        }
        let out = msa_train(&batch, &path, MsaMode::inner_ascent(), 100, 2.0).unwrap();
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn discrete_argmax_stays_in_alphabet() {
        let batch = blobs(20, 0.3, 3);
        let path = ControlPath::random_ternary(2, 2, LayerMap::Plain, 0.01, Regularizer::L2, &mut seeded(3)).unwrap();
        let out = msa_train(&batch, &path, MsaMode::DiscreteArgmax { rho: 1.0 }, 20, 1.0).unwrap();
        for w in &out.path.layers {
            assert!(w.values().iter().all(|v| TERNARY.contains(v)));
        }
        assert!(out.history.iter().all(|r| (0.0..=1.0).contains(&r.sparsity)));
    }

    #[test]
    fn penalized_discrete_msa_never_raises_the_objective() {
        let batch = blobs(20, 0.2, 4);
        let path = ControlPath::random_ternary(2, 2, LayerMap::Plain, 0.0, Regularizer::L2, &mut seeded(9)).unwrap();
        let out = msa_train(&batch, &path, MsaMode::discrete(), 30, 1.0).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let batch = SupervisedBatch::new(vec![vec![1.0, 1.0]], vec![1e9], LossKind::Squared).unwrap();
        let path = resnet_path(1, 0.0);
        assert!(matches!(
            sgd_train(&batch, &path, 3, 0.1),
            Err(Error::Divergence { iter: 0, .. })
        ));
    }

    #[test]
    fn blobs_respect_margin() {
        let b = blobs(100, 0.3, 5);
        assert_eq!(b.len(), 200);
        assert_eq!(b.targets.iter().filter(|y| **y > 0.0).count(), 100);
    }

    #[test]
    fn history_csv_header() {
        let csv = history_csv(&[HistoryRow {
            iter: 0,
            train_loss: 0.5,
            train_err: 0.25,
            pmp_residual_max: 1e-3,
            sparsity: 0.0,
        }]);
        assert_eq!(csv, "iter,train_loss,train_err,pmp_residual_max,sparsity\n0,0.5,0.25,0.001,0.0\n");
    }
}
