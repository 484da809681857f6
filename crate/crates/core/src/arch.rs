//! Network blocks and the discretization schemes they correspond to.
//!
//! | block            | update                                          | scheme            |
//! |------------------|-------------------------------------------------|-------------------|
//! | `ResNet`         | `x + h f(x)`                                    | forward Euler     |
//! | `PolyNet`        | `x + h f(x) + h f(h f(x))`                      | backward Euler    |
//! | `Fractal`        | `mean((f o f)(x), conv(x))`                     | Runge-Kutta       |
//! | `LmResNet`       | `(1-k) x + k x_prev + f(x)`                     | linear multistep  |
//! | `SecondOrder`    | `2 x - x_prev + h^2 f(x)`                       | leapfrog          |
//! | `Antisymmetric`  | `s + eps tanh((W - W^T) s + V u + b)`           | forward Euler     |
//! | `Reversible`     | `y = x + f(x_next)`, `y_next = x_next + g(y)`   | coupled system    |

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Resnet,
    Polynet,
    Fractal2,
    LmResnet,
    SecondOrder,
    AntisymmetricRnn,
    ReversiblePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Resnet { f: ParamSet, h: f64 },
    Polynet { f: ParamSet, h: f64 },
    /// `conv` is a single affine layer at this scale.
    Fractal2 { f: ParamSet, conv: ParamSet },
    LmResnet { f: ParamSet, k: f64 },
    SecondOrder { f: ParamSet, h: f64 },
    /// Hidden state `s` of width `n`, input `u` of width `m`.
    AntisymmetricRnn {
        w: Vec<f64>,
        v: Vec<f64>,
        b: Vec<f64>,
        n: usize,
        m: usize,
        eps: f64,
    },
    ReversiblePair { f: ParamSet, g: ParamSet },
}

fn check_square_field(name: &str, p: &ParamSet) -> Result<usize> {
    if p.input_dim() != p.output_dim() {
        return Err(invalid(format!(
            "{name} must map R^d to R^d, got {} -> {}",
            p.input_dim(),
            p.output_dim()
        )));
    }
    Ok(p.input_dim())
}

impl Block {
    pub fn resnet(f: ParamSet, h: f64) -> Result<Self> {
        check_square_field("resnet f", &f)?;
        Ok(Block::Resnet { f, h })
    }

    pub fn polynet(f: ParamSet, h: f64) -> Result<Self> {
        check_square_field("polynet f", &f)?;
        Ok(Block::Polynet { f, h })
    }

    pub fn fractal2(f: ParamSet, conv: ParamSet) -> Result<Self> {
        let d = check_square_field("fractal f", &f)?;
        check_len("fractal conv width", d, check_square_field("fractal conv", &conv)?)?;
        if conv.num_layers() != 1 {
            return Err(invalid("fractal conv branch is a single affine layer"));
        }
        Ok(Block::Fractal2 { f, conv })
    }

    pub fn lm_resnet(f: ParamSet, k: f64) -> Result<Self> {
        check_square_field("lm-resnet f", &f)?;
        Ok(Block::LmResnet { f, k })
    }

    pub fn second_order(f: ParamSet, h: f64) -> Result<Self> {
        check_square_field("second-order f", &f)?;
        Ok(Block::SecondOrder { f, h })
    }

    pub fn antisymmetric_rnn(w: Vec<f64>, v: Vec<f64>, b: Vec<f64>, n: usize, m: usize, eps: f64) -> Result<Self> {
        check_len("antisymmetric W", n * n, w.len())?;
        check_len("antisymmetric V", n * m, v.len())?;
        check_len("antisymmetric bias", n, b.len())?;
        Ok(Block::AntisymmetricRnn { w, v, b, n, m, eps })
    }

    pub fn reversible_pair(f: ParamSet, g: ParamSet) -> Result<Self> {
        let d = check_square_field("reversible f", &f)?;
        check_len("reversible g width", d, check_square_field("reversible g", &g)?)?;
        Ok(Block::ReversiblePair { f, g })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Resnet { .. } => BlockKind::Resnet,
            Block::Polynet { .. } => BlockKind::Polynet,
            Block::Fractal2 { .. } => BlockKind::Fractal2,
            Block::LmResnet { .. } => BlockKind::LmResnet,
            Block::SecondOrder { .. } => BlockKind::SecondOrder,
            Block::AntisymmetricRnn { .. } => BlockKind::AntisymmetricRnn,
            Block::ReversiblePair { .. } => BlockKind::ReversiblePair,
        }
    }

    /// Applies the block.
    ///
    /// `aux` is the previous state for the multistep kinds, the second
    /// channel for `ReversiblePair`, and the optional input `u` for the
    /// antisymmetric cell. The second return value is the `aux` to hand to
    /// the next block of the same kind (if any).
    pub fn forward(&self, x: &[f64], aux: Option<&[f64]>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let need = |name: &str| invalid(format!("{name} block needs an auxiliary state"));
        match self {
            Block::Resnet { f, h } => {
                let v = f.forward(x)?;
                Ok((x.iter().zip(&v).map(|(a, b)| a + h * b).collect(), None))
            }
            Block::Polynet { f, h } => {
                let y1: Vec<f64> = f.forward(x)?.iter().map(|v| h * v).collect();
                let y2 = f.forward(&y1)?;
                Ok(((0..x.len()).map(|i| x[i] + y1[i] + h * y2[i]).collect(), None))
            }
            Block::Fractal2 { f, conv } => {
                let deep = f.forward(&f.forward(x)?)?;
                let wide = conv.forward(x)?;
                Ok((deep.iter().zip(&wide).map(|(a, b)| 0.5 * (a + b)).collect(), None))
            }
            Block::LmResnet { f, k } => {
                let prev = aux.ok_or_else(|| need("lm-resnet"))?;
                check_len("previous state", x.len(), prev.len())?;
                let v = f.forward(x)?;
                let out = (0..x.len()).map(|i| (1.0 - k) * x[i] + k * prev[i] + v[i]).collect();
                Ok((out, Some(x.to_vec())))
            }
            Block::SecondOrder { f, h } => {
                let prev = aux.ok_or_else(|| need("second-order"))?;
                check_len("previous state", x.len(), prev.len())?;
                let v = f.forward(x)?;
                let h2 = h * h;
                let out = (0..x.len()).map(|i| 2.0 * x[i] - prev[i] + h2 * v[i]).collect();
                Ok((out, Some(x.to_vec())))
            }
            Block::AntisymmetricRnn { w, v, b, n, m, eps } => {
                check_len("hidden state", *n, x.len())?;
                let a = antisymmetric_matrix(w, *n, *n)?;
                let zero = vec![0.0; *m];
                let u = aux.unwrap_or(&zero);
                check_len("cell input", *m, u.len())?;
                let out = (0..*n)
                    .map(|i| {
                        let z = crate::linalg::dot(&a[i * n..(i + 1) * n], x)
                            + crate::linalg::dot(&v[i * m..(i + 1) * m], u)
                            + b[i];
                        x[i] + eps * z.tanh()
                    })
                    .collect();
                Ok((out, None))
            }
            Block::ReversiblePair { f, g } => {
                let x_next = aux.ok_or_else(|| need("reversible"))?;
                check_len("second channel", x.len(), x_next.len())?;
                let fx = f.forward(x_next)?;
                let y: Vec<f64> = x.iter().zip(&fx).map(|(a, b)| a + b).collect();
                let gy = g.forward(&y)?;
                let y_next = x_next.iter().zip(&gy).map(|(a, b)| a + b).collect();
                Ok((y, Some(y_next)))
            }
        }
    }

    /// Recovers `(x, x_next)` from a reversible block's output `(y, y_next)`.
    pub fn inverse(&self, y: &[f64], y_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let Block::ReversiblePair { f, g } = self else {
            return Err(invalid(format!("{:?} blocks are not invertible", self.kind())));
        };
        check_len("second channel", y.len(), y_next.len())?;
        let gy = g.forward(y)?;
        let x_next: Vec<f64> = y_next.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let fx = f.forward(&x_next)?;
        let x = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        Ok((x, x_next))
    }
}

pub fn block_forward(b: &Block, x: &[f64], aux: Option<&[f64]>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    b.forward(x, aux)
}

pub fn block_inverse(b: &Block, y: &[f64], y_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    b.inverse(y, y_next)
}

/// `W - W^T` for a row-major `rows x cols` matrix.
pub fn antisymmetric_matrix(w: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows != cols {
        return Err(invalid(format!("antisymmetric part needs a square matrix, got {rows}x{cols}")));
    }
    check_len("matrix entries", rows * cols, w.len())?;
    let n = rows;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = w[i * n + j] - w[j * n + i];
        }
    }
    Ok(a)
}

/// Runs a chain of reversible blocks forward, keeping only the final pair.
pub fn reversible_chain_forward(blocks: &[Block], x: &[f64], x_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pair = (x.to_vec(), x_next.to_vec());
    for b in blocks {
        let (y, y_next) = b.forward(&pair.0, Some(&pair.1))?;
        pair = (y, y_next.expect("reversible blocks return a pair"));
    }
    Ok(pair)
}

/// Reconstructs the chain input from its final pair alone.
pub fn reversible_chain_inverse(blocks: &[Block], y: &[f64], y_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pair = (y.to_vec(), y_next.to_vec());
    for b in blocks.iter().rev() {
        pair = b.inverse(&pair.0, &pair.1)?;
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetField};
    use crate::ode::{self, ImplicitOptions, Scheme, TimeGrid};
    use crate::rng::seeded;
    use rand_distr::{Distribution, Normal};

    const TANH2: [Activation; 2] = [Activation::Tanh, Activation::Tanh];

    fn net(dims: &[usize], seed: u64, scale: f64) -> ParamSet {
        let acts = vec![Activation::Tanh; dims.len() - 1];
        let mut p = ParamSet::random(dims, &acts, &mut seeded(seed)).unwrap();
        let normal = Normal::new(0.0, scale).unwrap();
        let mut rng = seeded(seed ^ 0xabc);
        for v in p.values_mut() {
            *v = normal.sample(&mut rng);
        }
        p
    }

    fn scalar_linear(lambda: f64) -> ParamSet {
        ParamSet::from_flat(&[1, 1], &[Activation::Identity], vec![lambda, 0.0]).unwrap()
    }

    #[test]
    fn resnet_with_zero_field_is_identity() {
        let b = Block::resnet(ParamSet::zeros(&[3, 4, 3], &TANH2).unwrap(), 0.5).unwrap();
        let (y, aux) = b.forward(&[1.0, -2.0, 3.0], None).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0]);
        assert!(aux.is_none());
    }

    #[test]
    fn polynet_is_truncated_neumann_series() {
        let b = Block::polynet(scalar_linear(0.1), 1.0).unwrap();
        let (y, _) = b.forward(&[1.0], None).unwrap();
        assert!((y[0] - 1.11).abs() < 1e-15);
        assert!((1.0 / 0.9 - y[0] - 0.1f64.powi(3) / 0.9).abs() < 1e-15);
    }

    #[test]
    fn polynet_approaches_backward_euler_at_third_order() {
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&lambda| {
                let (y, _) = Block::polynet(scalar_linear(lambda), 1.0).unwrap().forward(&[1.0], None).unwrap();
                let field = ode::LinearDynamics::scalar(lambda);
                let be = ode::backward_euler_step(&[1.0], 0.0, 1.0, &field, ImplicitOptions::default()).unwrap();
                (y[0] - be[0]).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 3.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn fractal_joins_branches_by_mean() {
        let f = net(&[2, 3, 2], 1, 0.5);
        let conv = ParamSet::from_flat(&[2, 2], &[Activation::Identity], vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let b = Block::fractal2(f.clone(), conv.clone()).unwrap();
        let x = [0.3, -0.2];
        let (y, _) = b.forward(&x, None).unwrap();
        let deep = f.forward(&f.forward(&x).unwrap()).unwrap();
        let wide = conv.forward(&x).unwrap();
        for i in 0..2 {
            assert_eq!(y[i], 0.5 * (deep[i] + wide[i]));
        }
        assert!(Block::fractal2(f.clone(), net(&[2, 2, 2], 1, 0.1)).is_err());
    }

    #[test]
    fn multistep_blocks_need_aux() {
        let f = net(&[2, 2], 1, 0.5);
        for b in [
            Block::lm_resnet(f.clone(), 0.3).unwrap(),
            Block::second_order(f.clone(), 0.1).unwrap(),
            Block::reversible_pair(f.clone(), f.clone()).unwrap(),
        ] {
            assert!(b.forward(&[0.0, 1.0], None).is_err(), "{:?}", b.kind());
        }
    }

    #[test]
    fn lm_resnet_formula() {
        let f = net(&[2, 3, 2], 4, 0.5);
        let b = Block::lm_resnet(f.clone(), 0.25).unwrap();
        let (x, prev) = ([0.5, -1.0], [0.1, 0.2]);
        let (y, aux) = b.forward(&x, Some(&prev)).unwrap();
        let v = f.forward(&x).unwrap();
        for i in 0..2 {
            assert_eq!(y[i], 0.75 * x[i] + 0.25 * prev[i] + v[i]);
        }
        assert_eq!(aux.unwrap(), x.to_vec());
    }

    #[test]
    fn resnet_stack_is_euler_bitwise() {
        let f = net(&[2, 6, 2], 7, 0.7);
        let h = 0.05;
        let depth = 40;
        let block = Block::resnet(f.clone(), h).unwrap();
        let mut x = vec![0.3, -0.9];
        let grid = TimeGrid::new(0.0, depth as f64 * h, depth).unwrap();
        let traj = ode::integrate(&x, &grid, &NetField::new(&f).unwrap(), Scheme::Euler).unwrap();
        for k in 0..depth {
            x = block.forward(&x, None).unwrap().0;
            assert_eq!(traj.state(k + 1), &x[..], "layer {k}");
        }
    }

    #[test]
    fn second_order_stack_matches_leapfrog_on_first_order_system() {
        // x'' = f(x) as (x, v)' = (v, f(x)). Leapfrog with step d yields even
        // nodes obeying x_{k+2} = 2 x_k - x_{k-2} + (2d)^2 f(x_k).
        let f = net(&[2, 5, 2], 12, 0.6);
        let field = NetField::new(&f).unwrap();
        let system = ode::FnDynamics::new(4, |s: &[f64], t| {
            let a = ode::Dynamics::eval(&field, &s[..2], t);
            vec![s[2], s[3], a[0], a[1]]
        });
        let steps = 40;
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let traj = ode::integrate(&[0.4, -0.2, 0.3, 0.1], &grid, &system, Scheme::Leapfrog).unwrap();
        let block = Block::second_order(f, 2.0 * grid.h()).unwrap();
        let mut prev = traj.state(0)[..2].to_vec();
        let mut x = traj.state(2)[..2].to_vec();
        for k in (4..=steps).step_by(2) {
            let (next, aux) = block.forward(&x, Some(&prev)).unwrap();
            prev = aux.unwrap();
            x = next;
            let want = &traj.state(k)[..2];
            assert!(crate::linalg::max_abs_diff(&x, want) < 1e-12, "node {k}");
        }
    }

    #[test]
    fn antisymmetric_matrix_properties() {
        let sym = [1.0, 2.0, 2.0, 5.0];
        assert_eq!(antisymmetric_matrix(&sym, 2, 2).unwrap(), vec![0.0; 4]);
        assert!(antisymmetric_matrix(&[1.0; 6], 2, 3).is_err());

        let mut rng = seeded(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let w: Vec<f64> = (0..16).map(|_| normal.sample(&mut rng)).collect();
        let a = antisymmetric_matrix(&w, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a[j * 4 + i], -a[i * 4 + j]);
            }
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
            let q: f64 = (0..4)
                .map(|i| x[i] * crate::linalg::dot(&a[i * 4..(i + 1) * 4], &x))
                .sum();
            assert!(q.abs() < 1e-12, "x^T A x = {q}");
        }
    }

    #[test]
    fn antisymmetric_cell_update() {
        let (n, m) = (2, 1);
        let b = Block::antisymmetric_rnn(vec![0.0, 1.0, 3.0, 0.0], vec![0.5, -0.5], vec![0.1, 0.0], n, m, 0.2).unwrap();
        let s = [1.0, 2.0];
        let (y, _) = b.forward(&s, Some(&[1.0])).unwrap();
        // W - W^T = [[0, -2], [2, 0]]
        let z0 = -2.0 * 2.0 + 0.5 + 0.1;
        let z1 = 2.0 * 1.0 - 0.5;
        assert_eq!(y, vec![1.0 + 0.2 * f64::tanh(z0), 2.0 + 0.2 * f64::tanh(z1)]);
    }

    #[test]
    fn reversible_zero_fields_are_identity() {
        let z = ParamSet::zeros(&[2, 3, 2], &TANH2).unwrap();
        let b = Block::reversible_pair(z.clone(), z).unwrap();
        let (x, xn) = b.inverse(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!((x, xn), (vec![1.0, 2.0], vec![3.0, 4.0]));
    }

    #[test]
    fn reversible_round_trip() {
        for seed in 0..20 {
            let b = Block::reversible_pair(net(&[3, 6, 3], seed, 0.8), net(&[3, 6, 3], seed + 100, 0.8)).unwrap();
            let x = [0.2 * seed as f64, -0.5, 1.0];
            let xn = [0.7, 0.1, -0.3];
            let (y, yn) = b.forward(&x, Some(&xn)).unwrap();
            let (rx, rxn) = b.inverse(&y, &yn.unwrap()).unwrap();
            assert!(crate::linalg::max_abs_diff(&rx, &x) < 1e-12);
            assert!(crate::linalg::max_abs_diff(&rxn, &xn) < 1e-12);
        }
    }

    #[test]
    fn only_reversible_blocks_invert() {
        let b = Block::resnet(net(&[2, 2], 1, 0.5), 0.1).unwrap();
        assert!(b.inverse(&[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn block_serializes() {
        let b = Block::reversible_pair(net(&[2, 2], 1, 0.5), net(&[2, 2], 2, 0.5)).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        let c: Block = serde_json::from_str(&s).unwrap();
        assert_eq!(b, c);
    }
}
