//! Parameterized building blocks shared by the encoder, extractor and NMT model.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{AttnLayout, Graph, ParamId, ParamSet, Var};
use crate::tensor::Tensor;

/// Xavier/Glorot uniform initialization for a `fan_in x fan_out` matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Affine map `x · W + b`, weight stored as `in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(set: &mut ParamSet, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = set.add(format!("{name}.weight"), xavier_uniform(input, output, rng));
        let bias = bias.then(|| set.add(format!("{name}.bias"), Tensor::zeros(1, output)));
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, x: Var) -> Var {
        let w = g.param(set, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(set, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Same map with every parameter entered as a constant.
    pub fn forward_frozen(&self, g: &mut Graph, set: &ParamSet, x: Var) -> Var {
        let w = g.constant(set.get(self.weight).clone());
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.constant(set.get(b).clone());
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Plain tensor evaluation, no tape.
    pub fn apply(&self, set: &ParamSet, x: &Tensor) -> Tensor {
        let mut y = crate::tensor::matmul(x, set.get(self.weight));
        if let Some(b) = self.bias {
            let b = set.get(b);
            for r in 0..y.rows() {
                for (o, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = set.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let bias = set.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, x: Var) -> Var {
        let gain = g.param(set, self.gain);
        let bias = g.param(set, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }

    pub fn apply(&self, set: &ParamSet, x: &Tensor) -> Tensor {
        let (gain, bias) = (set.get(self.gain).data(), set.get(self.bias).data());
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            for ((o, g), b) in row.iter_mut().zip(gain).zip(bias) {
                *o = (*o - mean) * inv * g + b;
            }
        }
        y
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(set, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(set, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(set, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(set, &format!("{name}.output"), dim, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, queries: Var, memory: Var, layout: Rc<AttnLayout>) -> Var {
        let q = self.query.forward(g, set, queries);
        let k = self.key.forward(g, set, memory);
        let v = self.value.forward(g, set, memory);
        let ctx = g.attention(q, k, v, layout);
        self.output.forward(g, set, ctx)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(set, &format!("{name}.inner"), dim, hidden, true, rng),
            outer: Linear::new(set, &format!("{name}.outer"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, x: Var, dropout: &mut Dropout<'_>) -> Var {
        let h = self.inner.forward(g, set, x);
        let h = g.relu(h);
        let h = dropout.apply(g, h);
        self.outer.forward(g, set, h)
    }
}

/// Inverted dropout; a `None` rng means evaluation mode.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn train(rate: f64, rng: &'r mut dyn rand::RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = g.constant(Tensor::from_vec(r, c, mask));
        g.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(10, 20, &mut rng);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn linear_apply_matches_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new("p");
        let lin = Linear::new(&mut set, "l", 3, 2, true, &mut rng);
        set.get_mut(lin.bias.unwrap()).data_mut().copy_from_slice(&[0.5, -0.5]);
        let x = xavier_uniform(4, 3, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &set, xv);
        assert_eq!(g.value(y), &lin.apply(&set, &x));
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(2, 2, 3.0));
        let mut d = Dropout::eval();
        assert_eq!(d.apply(&mut g, x), x);
    }
}
