//! Dense networks (affine layers with tanh or identity activations) and their
//! hand-written derivatives.
//!
//! Parameters live in one flat buffer, layer by layer, each layer laid out as
//! its row-major `out x in` weight followed by its bias. Gradients use the
//! same layout, so optimizers can work on flat slices.
//!
//! Besides the usual vector-Jacobian product, [`TangentPass`] propagates
//! input-space tangent directions forward and can then be reverse
//! differentiated. That gives gradients of Jacobian-vector products (and so
//! of divergences and Hessian-vector products) without a general tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative, expressed through the activation output `a`.
    #[inline]
    fn d1(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative, expressed through the activation output `a`.
    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Identity => 0.0,
        }
    }
}

/// Borrowed view of one affine layer.
#[derive(Debug, Clone, Copy)]
pub struct Layer<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

/// Parameters of a dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    values: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl ParamSet {
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::from_flat(dims, activations, vec![0.0; param_count(dims)])
    }

    /// Weights drawn from `N(0, 1/in)`, biases zero.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(dims, activations)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / n_in as f64).sqrt()).expect("positive std");
            for v in &mut p.values[off..off + n_in * n_out] {
                *v = normal.sample(rng);
            }
            off += n_in * n_out + n_out;
        }
        Ok(p)
    }

    pub fn from_flat(dims: &[usize], activations: &[Activation], values: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(invalid("a network needs at least an input and an output width"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        check_len("activation list", dims.len() - 1, activations.len())?;
        check_len("flat parameter vector", param_count(dims), values.len())?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            values,
        })
    }

    /// Same architecture, new flat values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_flat(&self.dims, &self.activations, values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    pub fn layer(&self, l: usize) -> Layer<'_> {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let off = self.offset(l);
        Layer {
            weight: &self.values[off..off + n_in * n_out],
            bias: &self.values[off + n_in * n_out..off + n_in * n_out + n_out],
            n_in,
            n_out,
            activation: self.activations[l],
        }
    }

    /// Network output at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut a = x.to_vec();
        for l in 0..self.num_layers() {
            let layer = self.layer(l);
            a = (0..layer.n_out)
                .map(|j| {
                    let row = &layer.weight[j * layer.n_in..(j + 1) * layer.n_in];
                    layer
                        .activation
                        .apply(crate::linalg::dot(row, &a) + layer.bias[j])
                })
                .collect();
        }
        Ok(a)
    }

    /// Vector-Jacobian products with respect to the input and the parameters.
    pub fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<(Vec<f64>, GradSet)> {
        let mut grad = GradSet::zeros_like(self);
        let dx = self.vjp_accumulate(x, cot, grad.values_mut())?;
        Ok((dx, grad))
    }

    /// Like [`ParamSet::vjp`] but adds the parameter part into `grad`.
    pub fn vjp_accumulate(&self, x: &[f64], cot: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        check_len("cotangent", self.output_dim(), cot.len())?;
        check_len("gradient buffer", self.num_params(), grad.len())?;
        let pass = self.tangent_forward(x, &[])?;
        Ok(pass.backward(cot, &[], grad))
    }

    /// Forward pass carrying input-space tangent directions.
    pub fn tangent_forward(&self, x: &[f64], tangents: &[Vec<f64>]) -> Result<TangentPass<'_>> {
        check_len("network input", self.input_dim(), x.len())?;
        for v in tangents {
            check_len("tangent direction", self.input_dim(), v.len())?;
        }
        let n_layers = self.num_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut tans: Vec<Vec<Vec<f64>>> = tangents.iter().map(|v| vec![v.clone()]).collect();
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let layer = self.layer(l);
            let prev = &acts[l];
            let out: Vec<f64> = (0..layer.n_out)
                .map(|j| {
                    let row = &layer.weight[j * layer.n_in..(j + 1) * layer.n_in];
                    layer
                        .activation
                        .apply(crate::linalg::dot(row, prev) + layer.bias[j])
                })
                .collect();
            for dir in tans.iter_mut() {
                let tprev = &dir[l];
                let t: Vec<f64> = (0..layer.n_out)
                    .map(|j| {
                        let row = &layer.weight[j * layer.n_in..(j + 1) * layer.n_in];
                        layer.activation.d1(out[j]) * crate::linalg::dot(row, tprev)
                    })
                    .collect();
                dir.push(t);
            }
            acts.push(out);
        }
        Ok(TangentPass {
            params: self,
            acts,
            tans,
        })
    }
}

/// Record of a forward pass with tangents, ready for reverse differentiation.
pub struct TangentPass<'p> {
    params: &'p ParamSet,
    /// Layer outputs `a_0 = x, a_1, ..., a_L`.
    acts: Vec<Vec<f64>>,
    /// Per direction, the tangents of `a_0 .. a_L`.
    tans: Vec<Vec<Vec<f64>>>,
}

impl TangentPass<'_> {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn output_tangent(&self, dir: usize) -> &[f64] {
        self.tans[dir].last().unwrap()
    }

    pub fn num_directions(&self) -> usize {
        self.tans.len()
    }

    /// Reverse sweep for the scalar `<out_cot, y> + sum_i <tangent_cots[i], dy_i>`.
    ///
    /// `tangent_cots` is either empty (no tangent terms) or holds one
    /// output-sized cotangent per direction. Parameter gradients are added
    /// into `grad`; the input cotangent is returned. Input tangents are
    /// treated as constants.
    pub fn backward(&self, out_cot: &[f64], tangent_cots: &[Vec<f64>], grad: &mut [f64]) -> Vec<f64> {
        let p = self.params;
        let n_dirs = if tangent_cots.is_empty() { 0 } else { self.tans.len() };
        debug_assert!(tangent_cots.is_empty() || tangent_cots.len() == self.tans.len());
        let mut abar = out_cot.to_vec();
        let mut tbar: Vec<Vec<f64>> = tangent_cots.to_vec();

        for l in (0..p.num_layers()).rev() {
            let layer = p.layer(l);
            let (n_in, n_out) = (layer.n_in, layer.n_out);
            let out = &self.acts[l + 1];
            let prev = &self.acts[l];
            let off = p.offset(l);

            let mut zbar = vec![0.0; n_out];
            let mut zdotbar = vec![vec![0.0; n_out]; n_dirs];
            for j in 0..n_out {
                let s1 = layer.activation.d1(out[j]);
                let mut acc = abar[j] * s1;
                if n_dirs > 0 {
                    let s2 = layer.activation.d2(out[j]);
                    for i in 0..n_dirs {
                        // zdot = a_dot / s1 would divide by zero; rebuild it from the previous tangent.
                        let row = &layer.weight[j * n_in..(j + 1) * n_in];
                        let zdot = crate::linalg::dot(row, &self.tans[i][l]);
                        acc += tbar[i][j] * s2 * zdot;
                        zdotbar[i][j] = tbar[i][j] * s1;
                    }
                }
                zbar[j] = acc;
            }

            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let row = &mut gw[j * n_in..(j + 1) * n_in];
                    for k in 0..n_in {
                        row[k] += zbar[j] * prev[k];
                    }
                    for i in 0..n_dirs {
                        let tprev = &self.tans[i][l];
                        for k in 0..n_in {
                            row[k] += zdotbar[i][j] * tprev[k];
                        }
                    }
                    gb[j] += zbar[j];
                }
            }

            let mut next_abar = vec![0.0; n_in];
            for j in 0..n_out {
                let row = &layer.weight[j * n_in..(j + 1) * n_in];
                crate::linalg::axpy(zbar[j], row, &mut next_abar);
            }
            let mut next_tbar = vec![vec![0.0; n_in]; n_dirs];
            for i in 0..n_dirs {
                for j in 0..n_out {
                    let row = &layer.weight[j * n_in..(j + 1) * n_in];
                    crate::linalg::axpy(zdotbar[i][j], row, &mut next_tbar[i]);
                }
            }
            abar = next_abar;
            tbar = next_tbar;
        }
        abar
    }
}

/// Gradient with respect to a [`ParamSet`], in the same flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    values: Vec<f64>,
}

impl GradSet {
    pub fn zeros_like(p: &ParamSet) -> Self {
        Self {
            values: vec![0.0; p.num_params()],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(&self.values)
    }
}

pub fn mlp_forward(p: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
    p.forward(x)
}

pub fn mlp_vjp(p: &ParamSet, x: &[f64], cot: &[f64]) -> Result<(Vec<f64>, GradSet)> {
    p.vjp(x, cot)
}

/// Mean-pooled feature of a set of members.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEmbedding {
    pub pooled: Vec<f64>,
}

impl SetEmbedding {
    pub fn width(&self) -> usize {
        self.pooled.len()
    }
}

/// Indices of `members` ordered by member value (lexicographic, total order).
pub fn canonical_order<M: AsRef<[f64]>>(members: &[M]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ma, mb) = (members[a].as_ref(), members[b].as_ref());
        ma.iter()
            .zip(mb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// `(1/N) sum_n phi(member_n)`, summed in canonical member order so the result
/// is bitwise invariant under permutation of `members`.
pub fn deepset_embed<M: AsRef<[f64]>>(phi: &ParamSet, members: &[M]) -> Result<SetEmbedding> {
    if members.is_empty() {
        return Err(invalid("cannot embed an empty set"));
    }
    let d = members[0].as_ref().len();
    for m in members {
        check_len("set member", d, m.as_ref().len())?;
    }
    let mut pooled = vec![0.0; phi.output_dim()];
    for i in canonical_order(members) {
        let feat = phi.forward(members[i].as_ref())?;
        for (acc, v) in pooled.iter_mut().zip(&feat) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    for v in &mut pooled {
        *v /= n;
    }
    Ok(SetEmbedding { pooled })
}

/// Worst relative error between an analytic gradient and central finite
/// differences, over every coordinate of `theta`.
///
/// `objective` returns the value and its analytic gradient. Relative error of
/// a coordinate is `|fd - g| / max(|fd|, |g|, 1e-8)`.
pub fn grad_check_flat<F>(theta: &[f64], objective: F, eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let (v0, grad) = objective(theta);
    if !v0.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    check_len("analytic gradient", theta.len(), grad.len())?;
    let mut probe = theta.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let (fp, _) = objective(&probe);
        probe[i] = theta[i] - eps;
        let (fm, _) = objective(&probe);
        probe[i] = theta[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        let fd = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(fd, grad[i]));
    }
    Ok(worst)
}

/// [`grad_check_flat`] over the parameters of a network.
pub fn grad_check<F>(p: &ParamSet, objective: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> (f64, GradSet),
{
    grad_check_flat(
        p.values(),
        |theta| {
            let q = p.with_values(theta.to_vec()).expect("same architecture");
            let (v, g) = objective(&q);
            (v, g.into_vec())
        },
        eps,
    )
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// Bit-exact JSON: every value is the 16-digit hex of its IEEE-754 bits.
#[derive(Serialize, Deserialize)]
struct ParamSetRepr {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    flat_values: Vec<String>,
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamSetRepr {
            dims: self.dims.clone(),
            activations: self.activations.clone(),
            flat_values: self
                .values
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ParamSetRepr::deserialize(d)?;
        let values = repr
            .flat_values
            .iter()
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        ParamSet::from_flat(&repr.dims, &repr.activations, values).map_err(D::Error::custom)
    }
}


/// A square network used as autonomous dynamics `dx/dt = p(x)`.
#[derive(Debug, Clone, Copy)]
pub struct NetField<'a> {
    params: &'a ParamSet,
}

impl<'a> NetField<'a> {
    pub fn new(params: &'a ParamSet) -> Result<Self> {
        check_len("vector field output", params.input_dim(), params.output_dim())?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }
}

impl crate::ode::Dynamics for NetField<'_> {
    fn dim(&self) -> usize {
        self.params.input_dim()
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.params.forward(x).expect("state width checked by caller")
    }
}

impl crate::ode::Jacobian for NetField<'_> {
    fn jvp(&self, x: &[f64], _t: f64, v: &[f64]) -> Vec<f64> {
        let pass = self.params.tangent_forward(x, &[v.to_vec()]).expect("width");
        pass.output_tangent(0).to_vec()
    }

    fn vjp(&self, x: &[f64], _t: f64, cot: &[f64]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.params.num_params()];
        self.params
            .vjp_accumulate(x, cot, &mut scratch)
            .expect("width")
    }
}
