use rand::Rng;

use crate::diff::kernels::{elu, gemm};

/// Fully connected layer, weight `[out, in]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            n_in,
            n_out,
            weight: (0..n_in * n_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: (0..n_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    /// `y[b, o] = sum_i x[b, i] w[o, i] + bias[o]`.
    fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(batch * self.n_out);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        gemm(batch, self.n_in, self.n_out, 1.0, x, self.n_in, 1, &self.weight, 1, self.n_in, 1.0, &mut y, self.n_out, 1);
        y
    }
}

/// ELU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs and pre-activations kept for the backward pass.
pub struct MlpCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.forward_cached(x, batch).0
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpCache) {
        assert_eq!(x.len(), batch * self.n_in(), "mlp input size");
        let mut cache = MlpCache {
            batch,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, batch);
            cache.inputs.push(h);
            h = if i < last { z.iter().map(|v| elu(*v)).collect() } else { z.clone() };
            cache.pre.push(z);
        }
        (h, cache)
    }

    /// Accumulate parameter gradients for upstream gradient `dout` into
    /// `grads`, laid out as [`Mlp::params`].
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut [Vec<f64>]) {
        let batch = cache.batch;
        let mut g = dout.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < last {
                for (gv, z) in g.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *gv *= z.exp();
                    }
                }
            }
            let x = &cache.inputs[i];
            // dW[o, i] += sum_b g[b, o] x[b, i]
            gemm(layer.n_out, batch, layer.n_in, 1.0, &g, 1, layer.n_out, x, layer.n_in, 1, 1.0, &mut grads[2 * i], layer.n_in, 1);
            for row in g.chunks_exact(layer.n_out) {
                for (db, v) in grads[2 * i + 1].iter_mut().zip(row) {
                    *db += v;
                }
            }
            if i > 0 {
                let mut dx = vec![0.0; batch * layer.n_in];
                gemm(batch, layer.n_out, layer.n_in, 1.0, &g, layer.n_out, 1, &layer.weight, layer.n_in, 1, 0.0, &mut dx, layer.n_in, 1);
                g = dx;
            }
        }
    }

    /// Flat parameter buffers: weight and bias per layer.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}
