//! Dense multilayer perceptrons with hand-written backpropagation.
//!
//! Everything works on row-major batches (`batch x features`). Hidden layers
//! use a leaky rectifier, the last layer is linear.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Affine layer `y = x W + b` with `W` stored as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Normal init with standard deviation `gain / sqrt(inputs)` and zero bias.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, gain / (inputs as f64).sqrt()).expect("finite std");
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate values kept by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Builds a network with the given layer widths, e.g. `[1024, 256, 64]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let gain_hidden = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let layers = (0..n)
            .map(|l| {
                let gain = if l + 1 == n { 0.5 } else { gain_hidden };
                Dense::random(widths[l], widths[l + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].apply(&x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(leaky);
            h = layer.apply(&h.view());
        }
        h
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n - 1);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h.view());
            inputs.push(h);
            if l + 1 == n {
                return (
                    z,
                    MlpTape {
                        inputs,
                        pre_activations,
                    },
                );
            }
            h = z.mapv(leaky);
            pre_activations.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Propagates `grad_out` (gradient w.r.t. the network output) back to the
    /// input. When `grads` is given, parameter gradients are accumulated into it.
    pub fn backward(
        &self,
        tape: &MlpTape,
        grad_out: Array2<f64>,
        mut grads: Option<&mut Mlp>,
    ) -> Array2<f64> {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                ndarray::Zip::from(&mut g)
                    .and(&tape.pre_activations[l])
                    .for_each(|g, &z| *g *= leaky_grad(z));
            }
            if let Some(acc) = grads.as_deref_mut() {
                let layer = &mut acc.layers[l];
                ndarray::linalg::general_mat_mul(1.0, &tape.inputs[l].t(), &g, 1.0, &mut layer.weight);
                layer.bias += &g.sum_axis(Axis(0));
            }
            g = g.dot(&self.layers[l].weight.t());
        }
        g
    }

    /// Named parameter tensors in canonical order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("{prefix}.{l}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{prefix}.{l}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Adam optimizer over a flat list of parameter slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn descend(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(mlp: &Mlp, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        (&mlp.forward(x.view()) * weights).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&[6, 5, 4, 3], &mut rng);
        let x = Array2::from_shape_simple_fn((2, 6), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((2, 3), || rng.random_range(-1.0..1.0));

        let (out, tape) = mlp.forward_tape(x.clone());
        assert!((&out - &mlp.forward(x.view())).iter().all(|d| d.abs() < 1e-14));
        let mut grads = mlp.zeros_like();
        let gx = mlp.backward(&tape, w.clone(), Some(&mut grads));

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (scalar_loss(&mlp, &xp, &w) - scalar_loss(&mlp, &xm, &w)) / (2.0 * h);
                assert!((fd - gx[[i, j]]).abs() < 1e-7, "input grad {i},{j}: {fd} vs {}", gx[[i, j]]);
            }
        }
        for l in 0..mlp.layers.len() {
            for (a, b) in [(0, 0), (1, 2), (2, 1)] {
                if a >= mlp.layers[l].inputs() || b >= mlp.layers[l].outputs() {
                    continue;
                }
                let mut p = mlp.clone();
                p.layers[l].weight[[a, b]] += h;
                let mut m = mlp.clone();
                m.layers[l].weight[[a, b]] -= h;
                let fd = (scalar_loss(&p, &x, &w) - scalar_loss(&m, &x, &w)) / (2.0 * h);
                assert!((fd - grads.layers[l].weight[[a, b]]).abs() < 1e-7);
            }
            let mut p = mlp.clone();
            p.layers[l].bias[0] += h;
            let mut m = mlp.clone();
            m.layers[l].bias[0] -= h;
            let fd = (scalar_loss(&p, &x, &w) - scalar_loss(&m, &x, &w)) / (2.0 * h);
            assert!((fd - grads.layers[l].bias[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.descend(vec![&mut x[..]], &[&g[..]]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
