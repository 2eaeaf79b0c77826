//! Dense feed-forward networks over a flat parameter vector, with explicit
//! reverse-mode gradients, plus the Adam optimizer.
//!
//! Parameters of layer `l` live at `offsets[l]..offsets[l + 1]`: first the
//! `inputs x outputs` weight matrix in row-major order, then the bias. Keeping
//! everything in one `Vec<f64>` makes snapshots, hashing and optimizer state
//! trivial.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `post`.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if pre > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Activations recorded by [`Mlp::forward_trace`], consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Builds a zero-initialized network; consecutive layers must chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape("a network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(shape(format!(
                    "layer {l} emits {} values but layer {} expects {}",
                    pair[0].outputs,
                    l + 1,
                    pair[1].inputs
                )));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(shape("layer widths must be positive"));
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for layer in &layers {
            total += layer.param_count();
            offsets.push(total);
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn param_count_of(layers: &[Layer]) -> usize {
        layers.iter().map(Layer::param_count).sum()
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn init(&mut self, rng: &mut Rng) {
        for (l, layer) in self.layers.iter().enumerate() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for p in &mut self.params[self.offsets[l]..self.offsets[l + 1]] {
                *p = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// The first `n` layers as a standalone network (parameters copied).
    pub fn prefix(&self, n: usize) -> Result<Mlp> {
        if n == 0 || n > self.layers.len() {
            return Err(shape(format!(
                "prefix of {n} layers requested from a {}-layer network",
                self.layers.len()
            )));
        }
        let mut net = Mlp::new(self.layers[..n].to_vec())?;
        net.params
            .copy_from_slice(&self.params[..self.offsets[n]]);
        Ok(net)
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let layer = &self.layers[l];
        let start = self.offsets[l];
        let end = start + layer.inputs * layer.outputs;
        ArrayView2::from_shape((layer.inputs, layer.outputs), &self.params[start..end])
            .expect("weight block matches layer shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let layer = &self.layers[l];
        let start = self.offsets[l] + layer.inputs * layer.outputs;
        ArrayView1::from(&self.params[start..self.offsets[l + 1]])
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(shape(format!(
                "network expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(l));
        z += &self.bias(l);
        z
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = layer.activation;
            h = self.affine(l, &h.view());
            h.mapv_inplace(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = match post.last() {
                Some(h) => self.affine(l, &h.view()),
                None => self.affine(l, &x),
            };
            let act = layer.activation;
            post.push(z.mapv(|v| act.apply(v)));
            pre.push(z);
        }
        Ok(Trace {
            input: x.to_owned(),
            pre,
            post,
        })
    }

    /// Back-propagates `grad_output` (d loss / d output) through the traced
    /// pass. Parameter gradients are *accumulated* into `param_grad` when
    /// given. Returns d loss / d input.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: ArrayView2<'_, f64>,
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Array2<f64>> {
        if grad_output.dim() != trace.output().dim() {
            return Err(shape(format!(
                "output gradient has shape {:?}, forward output has {:?}",
                grad_output.dim(),
                trace.output().dim()
            )));
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(shape("parameter gradient buffer has the wrong length"));
            }
        }
        let mut delta = grad_output.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let act = layer.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(&trace.pre[l])
                    .and(&trace.post[l])
                    .for_each(|d, &p, &q| *d *= act.derivative(p, q));
            }
            let layer_input = if l == 0 {
                trace.input.view()
            } else {
                trace.post[l - 1].view()
            };
            if let Some(g) = param_grad.as_deref_mut() {
                let start = self.offsets[l];
                let split = start + layer.inputs * layer.outputs;
                let dw = layer_input.t().dot(&delta);
                for (acc, v) in g[start..split].iter_mut().zip(dw.iter()) {
                    *acc += v;
                }
                let db: Array1<f64> = delta.sum_axis(Axis(0));
                for (acc, v) in g[split..self.offsets[l + 1]].iter_mut().zip(db.iter()) {
                    *acc += v;
                }
            }
            delta = delta.dot(&self.weights(l).t());
        }
        Ok(delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
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

/// Row-wise concatenation of a feature block with one-hot label columns.
pub fn append_one_hot(x: ArrayView2<'_, f64>, labels: &[usize], classes: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d + classes));
    out.slice_mut(ndarray::s![.., ..d]).assign(&x);
    for (row, &y) in labels.iter().enumerate() {
        out[[row, d + y]] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};

    fn toy() -> Mlp {
        let mut net = Mlp::new(vec![
            Layer::new(3, 5, Activation::LeakyRelu(0.2)),
            Layer::new(5, 4, Activation::Tanh),
            Layer::new(4, 2, Activation::Identity),
        ])
        .unwrap();
        net.init(&mut seeded(1));
        net
    }

    #[test]
    fn rejects_unchained_layers() {
        let err = Mlp::new(vec![
            Layer::new(3, 5, Activation::Relu),
            Layer::new(4, 2, Activation::Identity),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = toy();
        let x = normal_matrix(&mut seeded(2), 6, 3);
        let weights = normal_matrix(&mut seeded(3), 6, 2);
        // loss = sum(weights * output)
        let loss = |n: &Mlp| (n.forward(x.view()).unwrap() * &weights).sum();
        let trace = net.forward_trace(x.view()).unwrap();
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&trace, weights.view(), Some(&mut grad)).unwrap();
        let h = 1e-6;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = toy();
        let x = normal_matrix(&mut seeded(4), 2, 3);
        let weights = normal_matrix(&mut seeded(5), 2, 2);
        let trace = net.forward_trace(x.view()).unwrap();
        let gx = net.backward(&trace, weights.view(), None).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = ((net.forward(xp.view()).unwrap() - net.forward(xm.view()).unwrap()) * &weights).sum()
                    / (2.0 * h);
                assert!((fd - gx[[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn prefix_reproduces_intermediate_activations() {
        let net = toy();
        let x = normal_matrix(&mut seeded(6), 3, 3);
        let trace = net.forward_trace(x.view()).unwrap();
        let head = net.prefix(2).unwrap();
        assert_eq!(head.forward(x.view()).unwrap(), trace.post[1]);
    }

    #[test]
    fn adam_with_zero_rate_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 0.0, AdamConfig::default());
        opt.step(&mut p, &[0.3, 0.4]);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
