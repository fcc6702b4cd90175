//! Small dense-network engine with hand-derived reverse-mode gradients and Adam.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the pre-activation `x` and the activation output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
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

/// Affine layer followed by an elementwise activation. Weights are `out x in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::Dimension {
                context: "layer weights",
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension {
                context: "layer bias",
                expected: out_dim,
                actual: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform fan-in initialization, U(-sqrt(3/in), sqrt(3/in)), zero bias.
    pub fn fan_in<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (3.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim, Activation::Identity);
        for i in 0..dim {
            l.weights[i * dim + i] = 1.0;
        }
        l
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

/// Intermediates recorded by [`DenseNet::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl Gradients {
    /// Parameter gradients in [`DenseNet::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }
}

/// Stack of dense layers. Every parameter mutation invalidates outstanding caches.
#[derive(Debug, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
    #[serde(skip, default = "next_stamp")]
    stamp: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            stamp: next_stamp(),
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension {
                    context: "layer chaining",
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(Self {
            layers,
            stamp: next_stamp(),
        })
    }

    /// Fan-in initialized net with `sizes[i] -> sizes[i+1]` layers.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::Dimension {
                context: "activations per layer",
                expected: sizes.len().saturating_sub(1),
                actual: activations.len(),
            });
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::fan_in(w[0], w[1], a, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to a layer; invalidates caches.
    pub fn layer_mut(&mut self, idx: usize) -> &mut Dense {
        self.stamp = next_stamp();
        &mut self.layers[idx]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "network parameters",
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        self.stamp = next_stamp();
        Ok(())
    }

    /// Output only, without recording a cache.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l.pre_activation(&a).into_iter().map(|v| l.activation.apply(v)).collect();
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            stamp: self.stamp,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut a = x.to_vec();
        for l in &self.layers {
            let z = l.pre_activation(&a);
            let y: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            cache.inputs.push(a);
            cache.pre.push(z);
            a = y.clone();
            cache.outputs.push(y);
        }
        Ok((a, cache))
    }

    /// Reverse-mode gradients of a scalar whose gradient w.r.t. the output is `upstream`.
    pub fn backward(&self, upstream: &[f64], cache: &ForwardCache) -> Result<Gradients> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[idx];
            let out = &cache.outputs[idx];
            let input = &cache.inputs[idx];
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(pre.iter().zip(out))
                .map(|(d, (&x, &y))| d * l.activation.derivative(x, y))
                .collect();
            let mut gw = vec![0.0; l.weights.len()];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g = d * xi;
                }
            }
            let mut gin = vec![0.0; l.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                for (g, w) in gin.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            grads.push(LayerGrad { weights: gw, bias: delta });
            delta_out = gin;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta_out,
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension {
            context: "adam step",
            expected: params.len(),
            actual: if grads.len() != params.len() { grads.len() } else { state.m.len() },
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central finite differences and relative-error comparison.
pub mod gradcheck {
    /// Central-difference gradient of `f` at `x` with step `h`.
    pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng) -> DenseNet {
        DenseNet::init(
            &[4, 5, 3, 2],
            &[Activation::Tanh, Activation::Softplus, Activation::Identity],
            rng,
        )
        .unwrap()
    }

    /// Straight-line evaluation written without the layer abstraction.
    fn reference_eval(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in net.layers() {
            let mut next = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = l.bias[o];
                for i in 0..l.in_dim {
                    s += l.weights[o * l.in_dim + i] * a[i];
                }
                next[o] = match l.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                    Activation::Softplus => (1.0 + s.exp()).ln(),
                };
            }
            a = next;
        }
        a
    }

    #[test]
    fn identity_layer_passthrough() {
        let net = DenseNet::new(vec![Dense::identity(3)]).unwrap();
        let x = [0.3, -1.0, 2.5];
        assert_eq!(net.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let net = DenseNet::new(vec![Dense::zeros(4, 2, Activation::Tanh)]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let net = random_net(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (y, _) = net.forward(&x).unwrap();
            for (a, b) in y.iter().zip(reference_eval(&net, &x)) {
                assert!((a - b).abs() < 1e-13);
            }
            assert_eq!(net.eval(&x).unwrap(), y);
        }
    }

    #[test]
    fn forward_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bad_chaining_rejected() {
        let err = DenseNet::new(vec![Dense::zeros(2, 3, Activation::Tanh), Dense::zeros(4, 1, Activation::Identity)]);
        assert!(err.is_err());
    }

    #[test]
    fn identity_layer_weight_gradient_is_outer_product() {
        let net = DenseNet::new(vec![Dense::identity(3)]).unwrap();
        let x = [0.5, -2.0, 3.0];
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&[1.0, 0.0, 0.0], &cache).unwrap();
        assert_eq!(g.layers[0].weights, vec![0.5, -2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.layers[0].bias, vec![1.0, 0.0, 0.0]);
        assert_eq!(g.input, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = net.backward(&[0.0, 0.0], &cache).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = random_net(&mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = net.params();
        net.set_params(&p).unwrap();
        assert!(matches!(net.backward(&[1.0, 1.0], &cache), Err(Error::StaleCache)));
        let other = net.clone();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(matches!(other.backward(&[1.0, 1.0], &cache), Err(Error::StaleCache)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let net = random_net(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let w: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            // scalar loss = w . net(x)
            let (_, cache) = net.forward(&x).unwrap();
            let g = net.backward(&w, &cache).unwrap();
            let mut probe = net.clone();
            let numeric = central_difference(
                |p| {
                    probe.set_params(p).unwrap();
                    probe.eval(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
                },
                &net.params(),
                1e-5,
            );
            assert!(max_relative_error(&g.flatten(), &numeric, 1e-8) < 1e-4);
            let numeric_in = central_difference(
                |xi| net.eval(xi).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum(),
                &x,
                1e-5,
            );
            assert!(max_relative_error(&g.input, &numeric_in, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = random_net(&mut rng);
        let p: Vec<f64> = (0..net.num_params()).map(|i| i as f64).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[1..]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 1e-3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2, 1e-2);
        for _ in 0..100 {
            adam_step(&mut p, &[3.0, -0.5], &mut s).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn adam_scalar_recurrence() {
        // Hand-rolled recurrence for g = 1, lr = 0.1, default betas.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }
        let mut p = vec![1.0];
        let mut s = AdamState::new(1, lr);
        for e in expected {
            adam_step(&mut p, &[1.0], &mut s).unwrap();
            assert!((p[0] - e).abs() < 1e-15);
        }
        // With a constant gradient every bias-corrected step is close to lr.
        assert!((p[0] - (1.0 - 0.3)).abs() < 1e-6);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(2, 1e-3);
        assert!(adam_step(&mut p, &[0.0; 3], &mut s).is_err());
    }

    #[test]
    fn softplus_stable_and_invertible() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        for y in [1e-3, 0.2, 1.0, 5.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12);
        }
    }
}
