use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rng::RngStream;
use super::tensor::{affine, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    SoftmaxClassifier,
    LinearRegressor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: Head,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation, output_head: Head) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            hidden_activation,
            output_head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

/// One affine layer: `W` is (out, in), `b` has length out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Tensor::zeros(&[outputs, inputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[0]
    }

    /// Shape of the matrix layout used by [`Dense::to_matrix`].
    pub fn matrix_shape(&self) -> [usize; 2] {
        [self.inputs() + 1, self.outputs()]
    }

    /// Arrange the layer as an (in + 1) x out matrix: `Wᵀ` with the bias
    /// appended as the last row.
    pub fn to_matrix(&self) -> Tensor {
        let (o, i) = (self.outputs(), self.inputs());
        let mut m = Tensor::zeros(&[i + 1, o]);
        for r in 0..o {
            for c in 0..i {
                m.set2(c, r, self.w.get2(r, c));
            }
            m.set2(i, r, self.b.data()[r]);
        }
        m
    }

    pub fn from_matrix(m: &Tensor) -> Result<Self> {
        if m.shape().len() != 2 || m.shape()[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer matrix must be 2-D with at least two rows, got {:?}",
                m.shape()
            )));
        }
        let (i, o) = (m.shape()[0] - 1, m.shape()[1]);
        let mut d = Dense::zeros(i, o);
        for r in 0..o {
            for c in 0..i {
                d.w.set2(r, c, m.get2(c, r));
            }
            d.b.data_mut()[r] = m.get2(i, r);
        }
        Ok(d)
    }

    /// Add `scale * m` where `m` is in matrix layout.
    pub fn add_matrix(&mut self, m: &Tensor, scale: f64) -> Result<()> {
        m.ensure_shape(&self.matrix_shape())?;
        let (o, i) = (self.outputs(), self.inputs());
        for r in 0..o {
            for c in 0..i {
                let v = self.w.get2(r, c) + scale * m.get2(c, r);
                self.w.set2(r, c, v);
            }
            self.b.data_mut()[r] += scale * m.get2(i, r);
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.w.data().iter().chain(self.b.data()).map(|v| v * v).sum()
    }

    /// RMS over weights and bias jointly.
    pub fn rms(&self) -> f64 {
        (self.norm_sq() / (self.w.len() + self.b.len()) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Intermediate values of one forward pass.
///
/// `inputs[l]` is the input of layer `l`, `pre[l]` its affine output and
/// `post[l]` its activation. For the last layer `post` is the model output:
/// class probabilities for a classifier head, the raw values for a regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("non-empty trace")
    }

    /// Pre-activation of the final layer (logits for a classifier).
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("non-empty trace")
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradients for each layer; `None` where the backward pass was restricted.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Dense>>,
}

impl Gradients {
    pub fn layer(&self, l: usize) -> Option<&Dense> {
        self.layers.get(l).and_then(|g| g.as_ref())
    }

    /// Flatten as `[W0, b0, W1, b1, ...]`, zero-filling restricted layers.
    pub fn flatten(&self, model: &MlpModel) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (g, layer) in self.layers.iter().zip(&model.layers) {
            match g {
                Some(d) => {
                    out.push(d.w.clone());
                    out.push(d.b.clone());
                }
                None => {
                    out.push(Tensor::zeros(layer.w.shape()));
                    out.push(Tensor::zeros(layer.b.shape()));
                }
            }
        }
        out
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    a.w.axpy(1.0, &b.w);
                    a.b.axpy(1.0, &b.b);
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

impl MlpModel {
    /// Gaussian initialisation with variance `2 / (fan_in + fan_out)`, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let std = (2.0 / (i + o) as f64).sqrt();
                let mut d = Dense::zeros(i, o);
                rng.fill_normal(d.w.data_mut());
                d.w.scale(std);
                d
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.layers.len() {
            return Err(Error::InvalidLayer {
                index: l,
                layers: self.layers.len(),
            });
        }
        Ok(())
    }

    fn activate(&self, l: usize, pre: &[f64]) -> Vec<f64> {
        if l + 1 == self.layers.len() {
            match self.spec.output_head {
                Head::SoftmaxClassifier => softmax(pre),
                Head::LinearRegressor => pre.to_vec(),
            }
        } else {
            let a = self.spec.hidden_activation;
            pre.iter().map(|&v| a.apply(v)).collect()
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let n = self.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            if h.len() != layer.inputs() {
                return Err(Error::Dimension {
                    layer: l,
                    expected: layer.inputs(),
                    got: h.len(),
                });
            }
            let z = affine(&layer.w, layer.b.data(), &h);
            let a = self.activate(l, &z);
            trace.inputs.push(std::mem::replace(&mut h, a.clone()));
            trace.pre.push(z);
            trace.post.push(a);
        }
        Ok(trace)
    }

    /// Model output (probabilities or regression values).
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.post.pop().expect("non-empty"))
    }

    /// Final pre-activation when the forward pass starts at layer `start`
    /// with the given layer input. Skips the trace bookkeeping.
    pub fn logits_from(&self, start: usize, input: &[f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut h = input.to_vec();
        for l in start..n {
            let layer = &self.layers[l];
            let z = affine(&layer.w, layer.b.data(), &h);
            if l + 1 == n {
                return z;
            }
            h = self.activate(l, &z);
        }
        h
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the final pre-activation).
    ///
    /// With `only = Some(l)` the pass stops once layer `l` is reached and only
    /// that layer's gradients are returned.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64], only: Option<usize>) -> Result<Gradients> {
        let n = self.layers.len();
        if trace.pre.len() != n || trace.inputs.len() != n || trace.post.len() != n {
            return Err(Error::StaleTrace(format!(
                "trace has {} layers, model has {}",
                trace.pre.len(),
                n
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if trace.inputs[l].len() != layer.inputs() || trace.pre[l].len() != layer.outputs() {
                return Err(Error::StaleTrace(format!("layer {l} shapes differ")));
            }
        }
        if grad_out.len() != self.spec.output_dim() {
            return Err(Error::Dimension {
                layer: n - 1,
                expected: self.spec.output_dim(),
                got: grad_out.len(),
            });
        }
        if let Some(l) = only {
            self.check_layer(l)?;
        }
        let stop = only.unwrap_or(0);
        let mut grads: Vec<Option<Dense>> = vec![None; n];
        let mut delta = grad_out.to_vec();
        for l in (stop..n).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            if only.is_none() || only == Some(l) {
                let mut g = Dense::zeros(layer.inputs(), layer.outputs());
                for (r, d) in delta.iter().enumerate() {
                    g.b.data_mut()[r] = *d;
                    for (gw, x) in g.w.row_mut(r).iter_mut().zip(input) {
                        *gw = d * x;
                    }
                }
                grads[l] = Some(g);
            }
            if l == stop {
                break;
            }
            // gradient w.r.t. the previous layer's pre-activation
            let act = self.spec.hidden_activation;
            let mut prev = vec![0.0; layer.inputs()];
            for (r, d) in delta.iter().enumerate() {
                for (p, w) in prev.iter_mut().zip(layer.w.row(r)) {
                    *p += d * w;
                }
            }
            for (c, p) in prev.iter_mut().enumerate() {
                *p *= act.derivative(trace.pre[l - 1][c], trace.post[l - 1][c]);
            }
            delta = prev;
        }
        Ok(Gradients { layers: grads })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|d| [&d.w, &d.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|d| [&mut d.w, &mut d.b]).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }

    /// SHA-256 over the spec and the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serialises"));
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
