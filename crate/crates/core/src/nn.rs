//! Small dense layers with hand-written backward passes, and Adam.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `y = x W + b` with `W` stored in×out and `b` as a 1×out row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Dense {
    /// He-style normal weights; bias uniform in ±1/sqrt(fan-in).
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input.max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Array2::from_shape_fn((input, output), |_| normal.sample(rng));
        let bound = fan_in.sqrt().recip();
        let bias = Array2::from_shape_fn((1, output), |_| rng.random_range(-bound..bound));
        Dense { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array2::zeros(self.bias.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + self.bias.row(0)
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array1<f64>>,
    pre: Vec<Array1<f64>>,
    masks: Vec<Option<Array1<f64>>>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.forward_traced::<rand_chacha::ChaCha8Rng>(x, 0.0, None).0
    }

    /// Forward pass keeping activations. With `dropout > 0` and an RNG,
    /// inverted dropout is applied after every hidden activation.
    pub fn forward_traced<R: Rng>(&self, x: &Array1<f64>, dropout: f64, mut rng: Option<&mut R>) -> (Array1<f64>, MlpTrace) {
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            trace.inputs.push(h);
            if i == last {
                trace.pre.push(z.clone());
                trace.masks.push(None);
                h = z;
            } else {
                let mut a = z.mapv(|v| v.max(0.0));
                let mask = match rng.as_deref_mut() {
                    Some(r) if dropout > 0.0 => {
                        let keep = 1.0 - dropout;
                        let m: Array1<f64> = Array1::from_shape_fn(a.len(), |_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                        a *= &m;
                        Some(m)
                    }
                    _ => None,
                };
                trace.pre.push(z);
                trace.masks.push(mask);
                h = a;
            }
        }
        (h, trace)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, trace: &MlpTrace, upstream: &Array1<f64>, grads: &mut Mlp) -> Array1<f64> {
        let mut g = upstream.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i != last {
                if let Some(mask) = &trace.masks[i] {
                    g *= mask;
                }
                g.zip_mut_with(&trace.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            let input = &trace.inputs[i];
            let gw = &mut grads.layers[i].weight;
            for (r, &xv) in input.iter().enumerate() {
                if xv != 0.0 {
                    gw.row_mut(r).scaled_add(xv, &g);
                }
            }
            grads.layers[i].bias.row_mut(0).scaled_add(1.0, &g);
            g = self.layers[i].weight.dot(&g);
        }
        g
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Adam with bias correction. Moment buffers are indexed by tensor position.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&Array2<f64>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            v: shapes.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Array2<f64>>, grads: Vec<&Array2<f64>>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of `logits` against `target` and its gradient on the logits.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let p = softmax(logits.as_slice().expect("contiguous"));
    let loss = -(p[target].max(1e-300)).ln();
    let mut grad = Array1::from(p);
    grad[target] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[4, 5, 3], &mut rng);
        let x = Array1::from(vec![0.3, -0.7, 1.1, 0.2]);
        let up = Array1::from(vec![0.5, -1.0, 2.0]);
        let loss = |m: &Mlp, x: &Array1<f64>| m.forward(x).dot(&up);
        let (_, trace) = mlp.forward_traced::<ChaCha8Rng>(&x, 0.0, None);
        let mut grads = mlp.zeros_like();
        let dx = mlp.backward(&trace, &up, &mut grads);
        let eps = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
        for l in 0..2 {
            for idx in ndarray::indices(mlp.layers[l].weight.raw_dim()) {
                let mut mp = mlp.clone();
                mp.layers[l].weight[idx] += eps;
                let mut mm = mlp.clone();
                mm.layers[l].weight[idx] -= eps;
                let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * eps);
                assert!((fd - grads.layers[l].weight[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&Array1::from(vec![1.0, 2.0, 0.5]), 1);
        assert!(loss > 0.0);
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut w = Array2::from_elem((1, 1), 1.0);
        let g = Array2::from_elem((1, 1), 2.0);
        let mut opt = Adam::new(0.1, &[&w]);
        opt.update(vec![&mut w], vec![&g]);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
