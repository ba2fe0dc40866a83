//! Classifier architectures trained by the federation and inverted by the
//! attacker. No normalization layers anywhere.

use serde::{Deserialize, Serialize};

use crate::autograd::nn::{flatten, linear};
use crate::autograd::{pool2d, softmax_cross_entropy, PoolKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{derive_stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv5x5(8) relu avgpool2 conv5x5(16) relu avgpool2 fc(120) relu fc(K)
    LenetMini,
    /// 4 x [conv3x3 + relu] with two avgpool2, then fc(128) relu fc(K)
    VggMini,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    /// Width of the variational bottleneck inserted before the classifier head.
    #[serde(default)]
    pub precode: Option<usize>,
}

impl ModelSpec {
    pub fn lenet(input: [usize; 3], classes: usize) -> Self {
        Self {
            architecture: Architecture::LenetMini,
            input,
            classes,
            precode: None,
        }
    }

    pub fn vgg(input: [usize; 3], classes: usize) -> Self {
        Self {
            architecture: Architecture::VggMini,
            input,
            classes,
            precode: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    AvgPool2,
    Flatten,
    Fc {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Encoder `fc(width -> 2 * bottleneck)` producing mean and log-variance,
    /// reparameterized sample, decoder `fc(bottleneck -> width)`.
    Precode {
        name: String,
        width: usize,
        bottleneck: usize,
    },
}

/// Source of the bottleneck noise for PRECODE models.
#[derive(Clone, Debug)]
pub enum PrecodeNoise {
    /// Draw `eps ~ N(0, I)` from this stream.
    Sample(Stream),
    /// Use the mean only (sigma forced to zero).
    Deterministic,
}

impl PrecodeNoise {
    pub fn seeded(seed: u64, label: &str, index: u64) -> Self {
        PrecodeNoise::Sample(derive_stream(seed, label, index))
    }
}

/// Per-layer activations useful for defenses that inspect representations.
pub struct Trace {
    pub logits: Var,
    /// Input of every fully connected layer, keyed by layer name.
    pub fc_inputs: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    layout: Vec<(String, Vec<usize>)>,
}

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    Model::new(spec.clone())
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let [c, h, w] = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", spec.input)));
        }
        if spec.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let conv = |name: &str, i, o, k, p| Layer::Conv {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: k,
            padding: p,
        };
        let fc = |name: &str, i, o| Layer::Fc {
            name: name.into(),
            inputs: i,
            outputs: o,
        };
        let unsupported = || {
            Error::Config(format!(
                "input {}x{}x{} unsupported by {:?}",
                c, h, w, spec.architecture
            ))
        };
        let (mut layers, feature, hidden) = match spec.architecture {
            Architecture::LenetMini => {
                let shrink = |d: usize| -> Option<usize> {
                    let a = d.checked_sub(4)?;
                    if a < 2 {
                        return None;
                    }
                    let b = (a / 2).checked_sub(4)?;
                    (b >= 2).then_some(b / 2)
                };
                let (fh, fw) = (shrink(h).ok_or_else(unsupported)?, shrink(w).ok_or_else(unsupported)?);
                let layers = vec![
                    conv("conv1", c, 8, 5, 0),
                    Layer::Relu,
                    Layer::AvgPool2,
                    conv("conv2", 8, 16, 5, 0),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Flatten,
                ];
                (layers, 16 * fh * fw, 120)
            }
            Architecture::VggMini => {
                if h < 4 || w < 4 {
                    return Err(unsupported());
                }
                let layers = vec![
                    conv("conv1", c, 16, 3, 1),
                    Layer::Relu,
                    conv("conv2", 16, 16, 3, 1),
                    Layer::Relu,
                    Layer::AvgPool2,
                    conv("conv3", 16, 32, 3, 1),
                    Layer::Relu,
                    conv("conv4", 32, 32, 3, 1),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Flatten,
                ];
                (layers, 32 * (h / 4) * (w / 4), 128)
            }
        };
        layers.push(fc("fc1", feature, hidden));
        layers.push(Layer::Relu);
        if let Some(b) = spec.precode {
            if b == 0 {
                return Err(Error::Config("precode bottleneck must be positive".into()));
            }
            layers.push(Layer::Precode {
                name: "precode".into(),
                width: hidden,
                bottleneck: b,
            });
        }
        layers.push(fc("fc2", hidden, spec.classes));

        let mut layout = Vec::new();
        for layer in &layers {
            match layer {
                Layer::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    layout.push((format!("{name}.weight"), vec![*out_channels, *in_channels, *kernel, *kernel]));
                    layout.push((format!("{name}.bias"), vec![*out_channels]));
                }
                Layer::Fc { name, inputs, outputs } => {
                    layout.push((format!("{name}.weight"), vec![*inputs, *outputs]));
                    layout.push((format!("{name}.bias"), vec![*outputs]));
                }
                Layer::Precode { name, width, bottleneck } => {
                    layout.push((format!("{name}.enc.weight"), vec![*width, 2 * bottleneck]));
                    layout.push((format!("{name}.enc.bias"), vec![2 * bottleneck]));
                    layout.push((format!("{name}.dec.weight"), vec![*bottleneck, *width]));
                    layout.push((format!("{name}.dec.bias"), vec![*width]));
                }
                _ => {}
            }
        }
        Ok(Self { spec, layers, layout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(&self.layout)
    }

    /// Fan-in scaled uniform initialization, bound `sqrt(2 / fan_in)`; biases
    /// start at zero. Each segment draws from its own stream.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut p = self.zero_params();
        for i in 0..p.segments().len() {
            let seg = p.segments()[i].clone();
            if !seg.name.ends_with(".weight") {
                continue;
            }
            let fan_in = if seg.shape.len() == 4 {
                seg.shape[1] * seg.shape[2] * seg.shape[3]
            } else {
                seg.shape[0]
            };
            let bound = (2.0 / fan_in as f64).sqrt();
            let mut s = derive_stream(seed, &seg.name, 0);
            for v in p.segment_data_mut(i) {
                *v = s.uniform_range(-bound, bound);
            }
        }
        p
    }

    fn check_input(&self, images: &[usize]) -> Result<()> {
        if images.len() != 4 || images[1..] != self.spec.input {
            return Err(Error::shape(
                "model_input",
                format!("expected [B, {:?}], got {images:?}", self.spec.input),
            ));
        }
        Ok(())
    }

    /// Forward pass recording the inputs of fully connected layers.
    pub fn forward_traced(
        &self,
        params: &[Var],
        images: &Var,
        noise: &mut PrecodeNoise,
    ) -> Result<Trace> {
        self.check_input(&images.shape())?;
        if params.len() != self.layout.len() {
            return Err(Error::shape(
                "model_params",
                format!("{} tensors for {} segments", params.len(), self.layout.len()),
            ));
        }
        let mut next = params.iter();
        let mut take = || next.next().expect("layout checked");
        let mut x = images.clone();
        let mut fc_inputs = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { padding, .. } => {
                    let (w, b) = (take(), take());
                    x.conv2d(w, 1, *padding)?.add_channel_bias(b)?
                }
                Layer::Relu => x.relu()?,
                Layer::AvgPool2 => pool2d(PoolKind::Avg, &x, 2, 2)?,
                Layer::Flatten => flatten(&x)?,
                Layer::Fc { name, .. } => {
                    fc_inputs.push((name.clone(), x.clone()));
                    let (w, b) = (take(), take());
                    linear(&x, w, b)?
                }
                Layer::Precode { bottleneck, .. } => {
                    let (ew, eb, dw, db) = (take(), take(), take(), take());
                    precode_forward(&x, [ew, eb, dw, db], *bottleneck, noise)?
                }
            };
        }
        Ok(Trace { logits: x, fc_inputs })
    }

    pub fn logits(&self, params: &[Var], images: &Var, noise: &mut PrecodeNoise) -> Result<Var> {
        Ok(self.forward_traced(params, images, noise)?.logits)
    }

    /// Mean cross-entropy; differentiable in both parameters and images.
    pub fn forward_loss(
        &self,
        params: &[Var],
        images: &Var,
        labels: &[usize],
        noise: &mut PrecodeNoise,
    ) -> Result<Var> {
        softmax_cross_entropy(&self.logits(params, images, noise)?, labels)
    }

    /// Loss value and parameter gradient on a plain batch.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        images: &Tensor,
        labels: &[usize],
        noise: &mut PrecodeNoise,
    ) -> Result<(f64, ParamVector)> {
        let tape = Tape::new();
        let vars = params.to_vars(&tape, true);
        let x = tape.constant(images.clone());
        let loss = self.forward_loss(&vars, &x, labels, noise)?;
        let refs: Vec<&Var> = vars.iter().collect();
        let grads = tape.grad(&loss, &refs)?;
        Ok((loss.item(), params.from_vars(&grads)?))
    }

    /// Predicted class per image, using the bottleneck mean for PRECODE.
    pub fn predict(&self, params: &ParamVector, images: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let vars = params.to_vars(&tape, false);
        let logits = self
            .logits(&vars, &tape.constant(images.clone()), &mut PrecodeNoise::Deterministic)?
            .value();
        let k = self.spec.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, params: &ParamVector, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(params, images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Variational bottleneck: `[mu, log_var] = enc(h)`,
/// `b = mu + exp(log_var / 2) * eps`, output `dec(b)`.
pub fn precode_forward(
    h: &Var,
    weights: [&Var; 4],
    bottleneck: usize,
    noise: &mut PrecodeNoise,
) -> Result<Var> {
    let [ew, eb, dw, db] = weights;
    let stats = linear(h, ew, eb)?;
    let mu = stats.slice_cols(0, bottleneck)?;
    let sample = match noise {
        PrecodeNoise::Deterministic => mu,
        PrecodeNoise::Sample(stream) => {
            let log_var = stats.slice_cols(bottleneck, 2 * bottleneck)?;
            let sigma = log_var.scale(0.5)?.exp()?;
            let shape = mu.shape();
            let eps = Tensor::from_fn(&shape, |_| stream.gaussian());
            mu.add(&sigma.mul(&h.tape().constant(eps))?)?
        }
    };
    linear(&sample, dw, db)
}
