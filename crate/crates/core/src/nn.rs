//! Dense ReLU networks with hand-written backpropagation, plus Adam.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`inputs × outputs`, row-major) followed by its bias. Hidden layers use ReLU;
//! the output layer is linear. Batches are rows of an `Array2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (after the previous activation).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

fn layer_len(inp: usize, out: usize) -> usize {
    inp * out + out
}

impl Network {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + layer_len(w[0], w[1])] {
                *p = rng.random_range(-bound..bound);
            }
            offset += layer_len(w[0], w[1]);
        }
        net
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n = sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Option<Self> {
        let net = Self::zeros(sizes);
        (net.params.len() == params.len()).then(|| Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).map(|w| layer_len(w[0], w[1])).sum()
    }

    fn weights(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (inp, out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.offset(layer);
        let w = ArrayView2::from_shape((inp, out), &self.params[off..off + inp * out]).unwrap();
        let b = ArrayView1::from(&self.params[off + inp * out..off + inp * out + out]);
        (w, b)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in 0..self.layers() {
            let (w, b) = self.weights(l);
            let mut z = h.dot(&w) + b;
            if l + 1 < self.layers() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        h
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        self.forward(view).into_raw_vec_and_offset().0
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers());
        let mut h = x.to_owned();
        for l in 0..self.layers() {
            let (w, b) = self.weights(l);
            let z = h.dot(&w) + b;
            let next = if l + 1 < self.layers() { z.mapv(|v| v.max(0.0)) } else { Array2::zeros((0, 0)) };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Trace { inputs, pre }
    }

    /// Gradient of a scalar loss w.r.t. the parameters and the input, given the
    /// loss gradient w.r.t. the network output.
    pub fn backward(&self, trace: &Trace, grad_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut g = grad_out.to_owned();
        for l in (0..self.layers()).rev() {
            if l + 1 < self.layers() {
                g.zip_mut_with(&trace.pre[l], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let dw = trace.inputs[l].t().dot(&g);
            let db: Array1<f64> = g.sum_axis(Axis(0));
            for (g_dst, v) in grads[off..off + inp * out].iter_mut().zip(dw.iter()) {
                *g_dst = *v;
            }
            for (g_dst, v) in grads[off + inp * out..off + inp * out + out].iter_mut().zip(db.iter()) {
                *g_dst = *v;
            }
            let (w, _) = self.weights(l);
            g = g.dot(&w.t());
        }
        (grads, g)
    }
}

/// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Network, x: &Array2<f64>) -> f64 {
        net.forward(x.view()).iter().map(|v| 0.5 * v * v).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(&[4, 6, 5, 2], &mut rng);
        let x = array![[0.3, -1.2, 0.5, 2.0], [1.0, 0.1, -0.4, 0.7]];
        let trace = net.forward_trace(x.view());
        let out = trace.output().clone();
        let (grads, _) = net.backward(&trace, out.view());
        let h = 1e-6;
        for i in 0..net.param_count() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = loss(&net, &x);
            net.params[i] = orig - h;
            let down = loss(&net, &x);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::new(&[3, 4, 1], &mut rng);
        let x = array![[0.2, -0.5, 0.9]];
        let trace = net.forward_trace(x.view());
        let (_, gx) = net.backward(&trace, array![[1.0]].view());
        let h = 1e-6;
        for j in 0..3 {
            let mut up = x.clone();
            up[[0, j]] += h;
            let mut down = x.clone();
            down[[0, j]] -= h;
            let fd = (net.forward(up.view())[[0, 0]] - net.forward(down.view())[[0, 0]]) / (2.0 * h);
            assert!((fd - gx[[0, j]]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 0.1);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
