use serde::{Deserialize, Serialize};

use super::init_weight;
use crate::autodiff::{Graph, ReduceMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        width: usize,
    },
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

/// Layer list of a feed-forward network. Layers are numbered from 1 and
/// every layer is followed by the activation; the optional head is a
/// plain linear map to `K` logits on the flattened last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    /// Shape of one sample, e.g. `[d]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub head: Option<usize>,
}

/// Name, shape and fan-in (weights only) of one parameter tensor.
type ParamSlot = (String, Vec<usize>, Option<usize>);

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, head: Option<usize>) -> Self {
        Self {
            name: "mlp".into(),
            input_shape: vec![input_dim],
            layers: hidden.iter().map(|&width| LayerSpec::Dense { width }).collect(),
            activation,
            head,
        }
    }

    /// 3x3 convolutions with stride 2 and padding 1, leaky ReLU (slope 0.01).
    pub fn conv_stack(input_shape: [usize; 3], channels: &[usize], head: Option<usize>) -> Self {
        Self {
            name: "conv".into(),
            input_shape: input_shape.to_vec(),
            layers: channels
                .iter()
                .map(|&channels| LayerSpec::Conv {
                    channels,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                })
                .collect(),
            activation: Activation::LeakyRelu { slope: 0.01 },
            head,
        }
    }

    /// Per-sample output shape of every layer.
    pub fn feature_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("architecture has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { width } if width > 0 => vec![width],
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } if channels > 0 && kernel > 0 && stride > 0 => {
                    let [_, h, w] = shape[..] else {
                        return Err(Error::Spec(format!("conv layer {} needs a [C, H, W] input", i + 1)));
                    };
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::Spec(format!("conv layer {} kernel exceeds its input", i + 1)));
                    }
                    let ho = (h + 2 * padding - kernel) / stride + 1;
                    let wo = (w + 2 * padding - kernel) / stride + 1;
                    vec![channels, ho, wo]
                }
                _ => return Err(Error::Spec(format!("layer {} has a zero extent", i + 1))),
            };
            out.push(shape.clone());
        }
        if self.head == Some(0) || self.head == Some(1) {
            return Err(Error::Spec("head needs at least 2 classes".into()));
        }
        Ok(out)
    }

    /// Parameter shapes and fan-ins in storage order: weight and bias of
    /// each layer, then head weight and bias.
    fn param_layout(&self) -> Result<Vec<ParamSlot>> {
        let shapes = self.feature_shapes()?;
        let mut prev = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let n = i + 1;
            match *layer {
                LayerSpec::Dense { width } => {
                    let fan_in: usize = prev.iter().product();
                    out.push((format!("layer{n}.weight"), vec![fan_in, width], Some(fan_in)));
                    out.push((format!("layer{n}.bias"), vec![width], None));
                }
                LayerSpec::Conv { channels, kernel, .. } => {
                    let c = prev[0];
                    out.push((
                        format!("layer{n}.weight"),
                        vec![channels, c, kernel, kernel],
                        Some(c * kernel * kernel),
                    ));
                    out.push((format!("layer{n}.bias"), vec![channels], None));
                }
            }
            prev = shapes[i].clone();
        }
        if let Some(k) = self.head {
            let fan_in: usize = prev.iter().product();
            out.push(("head.weight".into(), vec![fan_in, k], Some(fan_in)));
            out.push(("head.bias".into(), vec![k], None));
        }
        Ok(out)
    }

    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        Ok(self.param_layout()?.into_iter().map(|(_, s, _)| s).collect())
    }

    pub fn param_names(&self) -> Result<Vec<String>> {
        Ok(self.param_layout()?.into_iter().map(|(n, _, _)| n).collect())
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseClassifier {
    pub arch: Architecture,
    pub params: Vec<Tensor>,
}

/// Post-activation output of every layer, plus the head logits.
#[derive(Debug, Clone)]
pub struct BaseForward {
    pub features: Vec<Var>,
    pub logits: Option<Var>,
}

impl BaseClassifier {
    pub fn init(arch: Architecture, rng: &mut SplitMix64) -> Result<Self> {
        let params = arch
            .param_layout()?
            .into_iter()
            .map(|(_, shape, fan_in)| match fan_in {
                Some(f) => init_weight(&shape, f, rng),
                None => Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let params = arch.param_shapes()?.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::dim("parameters do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Runs the network on `input [N, input_shape...]`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<BaseForward> {
        let shape = g.shape(input).to_vec();
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape[..] {
            return Err(Error::dim(format!(
                "input {shape:?} does not match sample shape {:?}",
                self.arch.input_shape
            )));
        }
        let n = shape[0];
        let mut x = input;
        let mut p = params.iter().copied();
        let mut features = Vec::with_capacity(self.arch.layers.len());
        for layer in &self.arch.layers {
            let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
            let h = match *layer {
                LayerSpec::Dense { .. } => {
                    let flat = flatten(g, x, n)?;
                    let h = g.matmul(flat, w)?;
                    g.add(h, b)?
                }
                LayerSpec::Conv {
                    channels,
                    stride,
                    padding,
                    ..
                } => {
                    let h = g.conv2d(x, w, stride, padding)?;
                    let b = g.reshape(b, &[1, channels, 1, 1])?;
                    g.add(h, b)?
                }
            };
            x = self.arch.activation.apply(g, h);
            features.push(x);
        }
        let logits = match self.arch.head {
            Some(_) => {
                let (w, b) = (p.next().expect("head weight"), p.next().expect("head bias"));
                let flat = flatten(g, x, n)?;
                let h = g.matmul(flat, w)?;
                Some(g.add(h, b)?)
            }
            None => None,
        };
        Ok(BaseForward { features, logits })
    }

    /// Head logits `[N, K]` without recording gradients.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        if self.arch.head.is_none() {
            return Err(Error::Spec("model has no classification head".into()));
        }
        let n = inputs.shape()[0];
        let k = self.arch.head.unwrap_or(0);
        let mut out = Vec::with_capacity(n * k);
        for (start, len) in chunks(n) {
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let x = g.constant(slice_rows(inputs, start, len)?);
            let fwd = self.forward(&mut g, &params, x)?;
            out.extend_from_slice(g.value(fwd.logits.expect("head present")).data());
        }
        Tensor::new(vec![n, k], out)
    }
}

fn flatten(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    if g.shape(x).len() == 2 {
        return Ok(x);
    }
    let d: usize = g.shape(x)[1..].iter().product();
    g.reshape(x, &[n, d])
}

/// Rows of an evaluation pass are processed in blocks of this many samples.
pub(crate) const EVAL_CHUNK: usize = 500;

pub(crate) fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s, EVAL_CHUNK.min(n - s)))
}

pub(crate) fn slice_rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * row..(start + len) * row].to_vec())
}

/// Mean over the spatial axes of `[N, C, H, W]`; other shapes pass through.
pub(crate) fn pool_spatial(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).len() == 4 {
        g.reduce(x, &[2, 3], ReduceMode::Mean)
    } else {
        Ok(x)
    }
}
