//! Small dense networks with hand-written backpropagation, plus the Adam
//! optimizer and input featurization shared by the policy and discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sinusoidal frequencies used to embed `ln sigma`.
pub const SIGMA_FREQUENCIES: usize = 8;
/// Number of sinusoidal frequencies used to embed the step index.
pub const STEP_FREQUENCIES: usize = 4;

/// Fully connected network with `tanh` hidden layers and a linear output layer.
///
/// Parameters live in one flat vector, layer by layer, each layer storing its
/// row-major `[out x in]` weight matrix followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations retained from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Hidden layers get uniform Glorot initialization; the output layer is zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if l + 1 == layers {
                params.extend(std::iter::repeat_n(0.0, fan_in * fan_out + fan_out));
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
                params.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let expected = param_count(&sizes);
        if params.len() != expected {
            return Err(Error::ShapeMismatch { expected, actual: params.len() });
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable view of the output layer bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let n = self.output_dim();
        let len = self.params.len();
        &mut self.params[len - n..]
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.trace(input).activations.pop().expect("output")
    }

    pub fn trace(&self, input: &[f64]) -> MlpTrace {
        debug_assert_eq!(input.len(), self.input_dim());
        let layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let x = &activations[l];
            let mut y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(y);
            offset += n_in * n_out + n_out;
        }
        MlpTrace { activations }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, trace: &MlpTrace, grad_output: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = grad_output.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &trace.activations[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            // hidden activations are tanh outputs: d tanh = 1 - y^2
            for (p, y) in prev.iter_mut().zip(x) {
                *p *= 1.0 - y * y;
            }
            delta = prev;
        }
    }
}

/// Adam optimizer over a flat parameter vector (minimization).
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Noise level used for embedding; `sigma = 0` maps to half the smallest nonzero level.
pub fn embedding_sigma(sigma: f64, sigma_floor: f64) -> f64 {
    sigma.max(sigma_floor)
}

/// Appends `sin`/`cos` features of `ln sigma` at geometric frequencies.
pub fn push_sigma_embedding(out: &mut Vec<f64>, sigma: f64) {
    let u = sigma.ln();
    for k in 0..SIGMA_FREQUENCIES {
        let w = 2f64.powi(k as i32 - 3);
        out.push((w * u).sin());
        out.push((w * u).cos());
    }
}

/// Appends `sin`/`cos` features of the normalized step index `t / horizon`.
pub fn push_step_embedding(out: &mut Vec<f64>, step: usize, horizon: usize) {
    let u = step as f64 / horizon.max(1) as f64;
    for k in 0..STEP_FREQUENCIES {
        let w = std::f64::consts::PI * 2f64.powi(k as i32);
        out.push((w * u).sin());
        out.push((w * u).cos());
    }
}

/// EDM-style input scaling `x / sqrt(sigma^2 + sigma_data^2)`.
pub fn push_scaled_state(out: &mut Vec<f64>, x: &[f64], sigma: f64, sigma_data: f64) {
    let c_in = 1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt();
    out.extend(x.iter().map(|v| v * c_in));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 5, 4, 2], &mut rng).unwrap();
        // randomize the zero output layer too
        for p in net.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let x = [0.3, -0.7, 1.1];
        let upstream = [0.8, -1.3];
        let trace = net.trace(&x);
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&trace, &upstream, &mut grad);
        let loss = |n: &Mlp| {
            let y = n.forward(&x);
            y[0] * upstream[0] + y[1] * upstream[1]
        };
        for i in 0..net.num_params() {
            let mut a = net.clone();
            let mut b = net.clone();
            a.params_mut()[i] += 1e-6;
            b.params_mut()[i] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 8, 1], &mut rng).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]), vec![0.0]);
    }

    #[test]
    fn from_parts_checks_length() {
        assert!(Mlp::from_parts(vec![2, 3, 1], vec![0.0; 13]).is_ok());
        assert!(Mlp::from_parts(vec![2, 3, 1], vec![0.0; 12]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }
}
