//! Small dense networks with SiLU hidden activations and a linear output layer.
//! All parameters live in one flat vector so they can be optimized and
//! serialized as a block.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    bias: bool,
    pub params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for the reverse pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Input to every layer (the first is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// Its sigmoid, reused by the reverse pass.
    sig: Vec<Vec<f64>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    /// A network with all parameters zero.
    pub fn zeros(sizes: &[usize], bias: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let count = Self::param_count(sizes, bias);
        Self {
            sizes: sizes.to_vec(),
            bias,
            params: vec![0.0; count],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<G: Rng>(sizes: &[usize], bias: bool, rng: &mut G) -> Self {
        let mut mlp = Self::zeros(sizes, bias);
        for l in 0..mlp.layers() {
            let (fan_in, fan_out) = (mlp.sizes[l], mlp.sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = mlp.layer_ranges(l);
            for v in &mut mlp.params[w] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        mlp
    }

    fn param_count(sizes: &[usize], bias: bool) -> usize {
        sizes
            .windows(2)
            .map(|w| w[0] * w[1] + if bias { w[1] } else { 0 })
            .sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Ranges of the weight matrix (row-major `out × in`) and bias of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for k in 0..l {
            off += self.sizes[k] * self.sizes[k + 1] + if self.bias { self.sizes[k + 1] } else { 0 };
        }
        let wlen = self.sizes[l] * self.sizes[l + 1];
        let blen = if self.bias { self.sizes[l + 1] } else { 0 };
        (off..off + wlen, off + wlen..off + wlen + blen)
    }

    /// Zero the last layer so the network outputs zeros for every input.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.layer_ranges(self.layers() - 1);
        self.params[w].iter_mut().for_each(|v| *v = 0.0);
        self.params[b].iter_mut().for_each(|v| *v = 0.0);
    }

    fn layer_forward(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (wr, br) = self.layer_ranges(l);
        let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[wr];
        out.clear();
        out.resize(dout, 0.0);
        for (o, v) in out.iter_mut().enumerate() {
            let b = if self.bias { self.params[br.start + o] } else { 0.0 };
            *v = b + dot(&w[o * din..(o + 1) * din], x);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.layers() {
            self.layer_forward(l, &cur, &mut next);
            if l + 1 < self.layers() {
                next.iter_mut().for_each(|v| *v = silu(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        let layers = self.layers();
        cache.inputs.resize(layers, Vec::new());
        cache.pre.resize(layers.saturating_sub(1), Vec::new());
        cache.sig.resize(layers.saturating_sub(1), Vec::new());
        cache.inputs[0].clear();
        cache.inputs[0].extend_from_slice(x);
        let mut out = Vec::new();
        for l in 0..layers {
            let input = std::mem::take(&mut cache.inputs[l]);
            self.layer_forward(l, &input, &mut out);
            cache.inputs[l] = input;
            if l + 1 < layers {
                cache.pre[l].clear();
                cache.pre[l].extend_from_slice(&out);
                let sig = &mut cache.sig[l];
                sig.clear();
                sig.extend(out.iter().map(|&v| sigmoid(v)));
                let next = &mut cache.inputs[l + 1];
                next.clear();
                next.extend(out.iter().zip(sig.iter()).map(|(&v, &s)| v * s));
            }
        }
        out
    }

    /// Accumulate parameter gradients into `grad` and return the input gradient.
    pub fn backward(&self, cache: &MlpCache, g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len());
        let mut g = g_out.to_vec();
        for l in (0..self.layers()).rev() {
            let (wr, br) = self.layer_ranges(l);
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let x = &cache.inputs[l];
            let w = &self.params[wr.clone()];
            let mut g_in = vec![0.0; din];
            for o in 0..dout {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let gw = &mut grad[wr.start + o * din..wr.start + (o + 1) * din];
                let row = &w[o * din..(o + 1) * din];
                for (a, &xi) in gw.iter_mut().zip(x) {
                    *a += go * xi;
                }
                for (a, &wi) in g_in.iter_mut().zip(row) {
                    *a += go * wi;
                }
                if self.bias {
                    grad[br.start + o] += go;
                }
            }
            if l > 0 {
                let (pre, sig) = (&cache.pre[l - 1], &cache.sig[l - 1]);
                for i in 0..din {
                    g_in[i] *= sig[i] * (1.0 + pre[i] * (1.0 - sig[i]));
                }
            }
            g = g_in;
        }
        g
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for bias in [false, true] {
            let mut mlp = Mlp::xavier(&[3, 5, 4, 2], bias, &mut rng);
            for v in mlp.params.iter_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
            let x = [0.3, -0.7, 1.1];
            let wout = [0.8, -1.3];
            let loss = |m: &Mlp, x: &[f64]| {
                let y = m.forward(x);
                y[0] * wout[0] + y[1] * wout[1]
            };
            let mut cache = MlpCache::default();
            mlp.forward_cached(&x, &mut cache);
            let mut grad = vec![0.0; mlp.params.len()];
            let g_in = mlp.backward(&cache, &wout, &mut grad);
            let h = 1e-6;
            for k in 0..mlp.params.len() {
                let mut a = mlp.clone();
                a.params[k] += h;
                let mut b = mlp.clone();
                b.params[k] -= h;
                let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
                assert!((num - grad[k]).abs() < 1e-7, "param {k}: {num} vs {}", grad[k]);
            }
            for k in 0..3 {
                let mut xa = x;
                xa[k] += h;
                let mut xb = x;
                xb[k] -= h;
                let num = (loss(&mlp, &xa) - loss(&mlp, &xb)) / (2.0 * h);
                assert!((num - g_in[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::xavier(&[4, 8, 3], true, &mut rng);
        mlp.zero_output_layer();
        assert_eq!(mlp.forward(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 3]);
    }
}
