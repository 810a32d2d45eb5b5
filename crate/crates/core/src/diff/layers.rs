use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::init::orthogonal_init;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    Flatten,
    /// Average pooling over non-overlapping `window x window` blocks.
    SpatialMeanPool {
        window: usize,
    },
    InstanceNorm,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SpatialMeanPool { .. } => "spatial_mean_pool",
            LayerSpec::InstanceNorm => "instance_norm",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |detail: String| Error::Layer {
            index,
            kind: self.kind(),
            detail,
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(fail(format!("expected input [{inputs}], got {input:?}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(fail(format!(
                        "expected input [{in_channels}, h, w], got {input:?}"
                    )));
                }
                if kernel == 0 || stride == 0 || kernel > input[1] || kernel > input[2] {
                    return Err(fail(format!(
                        "kernel {kernel} / stride {stride} invalid for spatial extent {}x{}",
                        input[1], input[2]
                    )));
                }
                Ok(vec![
                    out_channels,
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::SpatialMeanPool { window } => {
                if input.len() != 3 || window == 0 || input[1] % window != 0 || input[2] % window != 0 {
                    return Err(fail(format!("window {window} does not tile {input:?}")));
                }
                Ok(vec![input[0], input[1] / window, input[2] / window])
            }
            LayerSpec::InstanceNorm => {
                if input.len() != 3 || input[1] * input[2] < 2 {
                    return Err(fail(format!("expected [c, h, w] with h*w >= 2, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Parameters registered on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

/// A feed-forward stack of layers with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Vec<Tensor>,
    names: Vec<String>,
    /// first parameter index of each layer
    offsets: Vec<usize>,
}

impl Sequential {
    /// Orthogonally initialized stack; `gains` gives one gain per
    /// parametric layer (dense/conv) in order. Biases start at zero.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], gains: &[f64], seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut gain_iter = gains.iter();
        for (i, spec) in specs.iter().enumerate() {
            offsets.push(params.len());
            let next = spec.output_shape(i, &shape)?;
            if spec.has_params() {
                let gain = *gain_iter.next().ok_or_else(|| Error::Layer {
                    index: i,
                    kind: spec.kind(),
                    detail: "no gain supplied".into(),
                })?;
                let (w_shape, b_len) = match *spec {
                    LayerSpec::Dense { inputs, outputs } => (vec![outputs, inputs], outputs),
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (vec![out_channels, in_channels, kernel, kernel], out_channels),
                    _ => unreachable!(),
                };
                let w = orthogonal_init(&w_shape, gain, derive_seed(seed, i as u64))?;
                params.push(w.tracked());
                params.push(Tensor::zeros(&[b_len]).tracked());
                names.push(format!("layer{i}.weight"));
                names.push(format!("layer{i}.bias"));
            }
            shape = next;
        }
        if gain_iter.next().is_some() {
            return Err(Error::Invalid("more gains than parametric layers".into()));
        }
        Ok(Sequential {
            specs: specs.to_vec(),
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            params,
            names,
            offsets,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, param) in self.names.iter().zip(self.params.iter_mut()) {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
            if src.shape() != param.shape() {
                return Err(Error::shape("load_named", param.shape(), src.shape()));
            }
            param.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Copies all parameter values from a network with the same layout.
    pub fn copy_params_from(&mut self, other: &Sequential) -> Result<()> {
        if self.specs != other.specs || self.input_shape != other.input_shape {
            return Err(Error::Invalid("copy_params_from: architectures differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers the parameters on `tape`; `trainable = false` records them
    /// as constants so no gradient work is done for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p)
                } else {
                    tape.constant(p.shape(), p.data().to_vec()).expect("params are validated")
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            let got = s.to_vec();
            return Err(Error::Layer {
                index: 0,
                kind: self.specs.first().map_or("input", LayerSpec::kind),
                detail: format!("expected [batch, {:?}], got {got:?}", self.input_shape),
            });
        }
        let mut h = x;
        for (i, spec) in self.specs.iter().enumerate() {
            let p = self.offsets[i];
            h = match *spec {
                LayerSpec::Dense { .. } => tape.linear(h, bound.vars[p], bound.vars[p + 1]),
                LayerSpec::Conv2d { stride, .. } => {
                    tape.conv2d(h, bound.vars[p], bound.vars[p + 1], stride)
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Tanh => tape.tanh(h),
                LayerSpec::Flatten => {
                    let n = tape.shape(h)[0];
                    let rest: usize = tape.shape(h)[1..].iter().product();
                    tape.reshape(h, &[n, rest])
                }
                LayerSpec::SpatialMeanPool { window } => tape.mean_pool(h, window),
                LayerSpec::InstanceNorm => tape.instance_norm(h),
            }
            .map_err(|e| match e {
                Error::NonFinite { .. } => e,
                other => Error::Layer {
                    index: i,
                    kind: spec.kind(),
                    detail: format!("{other}"),
                },
            })?;
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.tensor(y))
    }

    /// Moves gradients for the bound parameters into each `Tensor::grad`.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for ((param, var), name) in self.params.iter_mut().zip(&bound.vars).zip(&self.names) {
            let g = grads
                .get(*var)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            param.grad = Some(g.to_vec());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }
}
