//! Dense primitives with explicit backward passes: linear layers, ReLU,
//! inverted dropout, AdamW and gradient clipping. All arithmetic is f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ClipMode;
use crate::error::{Error, Result};

/// RNG used everywhere randomness touches training.
pub type TrainRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything made of a fixed, ordered list of flat tensors. Parameters and
/// their gradients share the same layout, which is what the optimizer and
/// the checkpoint writer rely on.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// `y = W x + b`, with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear {out_dim}x{in_dim}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(LinearLayer { in_dim, out_dim, weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform init in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        LinearLayer { in_dim, out_dim, weight, bias }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear expects input of length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x) + self.bias[o])
            .collect())
    }

    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<LinearGrads> {
        if x.len() != self.in_dim || dy.len() != self.out_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear backward {}x{}: x has {}, dy has {}",
                self.out_dim,
                self.in_dim,
                x.len(),
                dy.len()
            )));
        }
        let mut dx = vec![0.0; self.in_dim];
        let mut dw = vec![0.0; self.weight.len()];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dx[i] += row[i] * g;
                drow[i] = g * x[i];
            }
        }
        Ok(LinearGrads { dx, dw, db: dy.to_vec() })
    }
}

impl ParamSet for LinearLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient passes where the pre-activation was strictly positive.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&z, &g)| if z > 0.0 { g } else { 0.0 }).collect()
}

/// Inverted dropout. Returns the output and the per-unit multiplier
/// (`0` or `1/(1-p)`); in eval mode, or with `p == 0`, the multiplier is all
/// ones and the RNG is left untouched.
pub fn dropout(x: &[f64], p: f64, mode: Mode, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::OutOfRange("dropout_rate".into()));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.to_vec(), vec![1.0; x.len()]));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> =
        x.iter().map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((out, mask))
}

pub fn dropout_backward(mask: &[f64], dy: &[f64]) -> Vec<f64> {
    mask.iter().zip(dy).map(|(m, g)| m * g).collect()
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<P: ParamSet + ?Sized>(params: &P, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One optimizer step. Rejects non-finite gradients before touching any
    /// parameter.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if grads.len() != self.m.len()
            || params.len() != self.m.len()
            || params.iter().zip(&grads).zip(&self.m).any(|((p, g), m)| p.len() != m.len() || g.len() != m.len())
        {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                p[i] -= self.lr * self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Element-wise clamp of every gradient entry into `[-c, c]`.
pub fn clip_by_value<P: ParamSet + ?Sized>(grads: &mut P, c: f64) {
    for t in grads.tensors_mut() {
        for v in t.iter_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Rescales all gradients jointly so the global L2 norm is at most `c`.
pub fn clip_by_norm<P: ParamSet + ?Sized>(grads: &mut P, c: f64) {
    let norm = grads.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > c {
        let scale = c / norm;
        for t in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v *= scale;
            }
        }
    }
}

pub fn clip_gradients<P: ParamSet + ?Sized>(grads: &mut P, c: f64, mode: ClipMode) {
    match mode {
        ClipMode::Value => clip_by_value(grads, c),
        ClipMode::Norm => clip_by_norm(grads, c),
    }
}
