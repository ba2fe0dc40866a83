//! Layer-level operations composed from tape primitives.

use serde::{Deserialize, Serialize};

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn activation(kind: Activation, x: &Var) -> Result<Var> {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Windowed reduction over the spatial axes of an NCHW tensor.
///
/// Max pooling routes the gradient to the first maximal entry of each window
/// in row-major order.
pub fn pool2d(kind: PoolKind, x: &Var, window: usize, stride: usize) -> Result<Var> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("pool2d", format!("expected NCHW, got {s:?}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool2d", "window and stride must be positive"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window > h || window > w {
        return Err(Error::shape(
            "pool2d",
            format!("window {window} larger than {h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let out_shape = [n, c, oh, ow];
    let cells = n * c * oh * ow;
    let k2 = window * window;

    // Flat input indices for every window, in output order.
    let mut windows = Vec::with_capacity(cells * k2);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..window {
                    for dx in 0..window {
                        let y = oy * stride + dy;
                        let xx = ox * stride + dx;
                        windows.push((plane * h + y) * w + xx);
                    }
                }
            }
        }
    }

    match kind {
        PoolKind::Avg => {
            let gathered = x.gather(windows, &[cells * k2])?;
            let groups = (0..cells * k2).map(|j| j / k2).collect();
            gathered
                .scatter_add(groups, &out_shape)?
                .scale(1.0 / k2 as f64)
        }
        PoolKind::Max => {
            let value = x.value();
            let data = value.data();
            let argmax = windows
                .chunks(k2)
                .map(|win| {
                    let mut best = win[0];
                    for &i in &win[1..] {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            x.gather(argmax, &out_shape)
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    let (b, k) = (s[0], s[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let tape = logits.tape();
    let value = logits.value();
    let row_max: Vec<f64> = value
        .data()
        .chunks(k)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Tensor::from_fn(&[b, k], |j| row_max[j / k]);
    let one_hot = Tensor::from_fn(&[b, k], |j| if labels[j / k] == j % k { 1.0 } else { 0.0 });

    let shifted = logits.sub(&tape.constant(shift))?;
    let lse = shifted
        .exp()?
        .sum_rows()?
        .ln()?
        .add(&tape.constant(Tensor::new(vec![b], row_max)?))?;
    let picked = logits.mul(&tape.constant(one_hot))?.sum_rows()?;
    lse.sub(&picked)?.mean()
}

/// Fully connected layer: `x [n, in] . w [in, out] + b [out]`.
pub fn linear(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    x.matmul(weight)?.add_channel_bias(bias)
}

/// Collapse all but the leading axis.
pub fn flatten(x: &Var) -> Result<Var> {
    let s = x.shape();
    let rest: usize = s[1..].iter().product();
    x.reshape(&[s[0], rest])
}

/// Total variation with forward differences and a replicated boundary,
/// summed per image and averaged over the batch. `eps` keeps the square root
/// differentiable in flat regions; its offset is subtracted back out so a
/// constant image has zero variation.
pub fn total_variation(x: &Var, eps: f64) -> Result<Var> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("total_variation", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let total = n * c * h * w;
    let down: Vec<usize> = (0..total)
        .map(|j| {
            let y = (j / w) % h;
            if y + 1 < h {
                j + w
            } else {
                j
            }
        })
        .collect();
    let right: Vec<usize> = (0..total)
        .map(|j| if j % w + 1 < w { j + 1 } else { j })
        .collect();
    let dy = x.gather(down, &s)?.sub(x)?;
    let dx = x.gather(right, &s)?.sub(x)?;
    dy.square()?
        .add(&dx.square()?)?
        .offset(eps)?
        .sqrt()?
        .offset(-eps.sqrt())?
        .sum()?
        .scale(1.0 / n as f64)
}
