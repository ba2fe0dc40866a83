//! In-memory labelled image sets and a procedural stand-in for digit data.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng::derive_stream;

/// Images in `[0, 1]`, channel-first, stacked as `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), s),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec())
            .expect("image slice")
    }

    /// Stack the selected examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::shape("batch", format!("index {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Dataset::new(images, labels, self.classes)
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot split {} examples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub examples: usize,
    pub classes: usize,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
}

/// Stroke images: every class owns a random polyline, every example jitters
/// its control points, thickness and intensity. Colour images tint the
/// stroke per class over a per-example background.
pub fn synthetic_strokes(spec: &SyntheticSpec) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    if spec.examples == 0 || spec.classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    let templates: Vec<Vec<(f64, f64)>> = (0..spec.classes)
        .map(|k| {
            let mut s = derive_stream(spec.seed, "stroke-template", k as u64);
            (0..4)
                .map(|_| (s.uniform_range(0.2, 0.8), s.uniform_range(0.2, 0.8)))
                .collect()
        })
        .collect();
    let tints: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let mut s = derive_stream(spec.seed, "stroke-tint", k as u64);
            (0..c).map(|_| if c == 1 { 1.0 } else { s.uniform_range(0.3, 1.0) }).collect()
        })
        .collect();

    let plane = h * w;
    let mut data = Vec::with_capacity(spec.examples * c * plane);
    let mut labels = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let mut s = derive_stream(spec.seed, "stroke-example", i as u64);
        let label = i % spec.classes;
        let (dx, dy) = (s.uniform_range(-0.06, 0.06), s.uniform_range(-0.06, 0.06));
        let pts: Vec<(f64, f64)> = templates[label]
            .iter()
            .map(|&(x, y)| (x + dx + 0.03 * s.gaussian(), y + dy + 0.03 * s.gaussian()))
            .collect();
        let thickness = s.uniform_range(0.05, 0.08);
        let intensity = s.uniform_range(0.75, 1.0);
        let background: Vec<f64> = (0..c)
            .map(|_| if c == 1 { 0.0 } else { s.uniform_range(0.0, 0.3) })
            .collect();
        let mut stroke = vec![0.0; plane];
        for (p, v) in stroke.iter_mut().enumerate() {
            let px = ((p % w) as f64 + 0.5) / w as f64;
            let py = ((p / w) as f64 + 0.5) / h as f64;
            let d = pts
                .windows(2)
                .map(|seg| segment_distance((px, py), seg[0], seg[1]))
                .fold(f64::INFINITY, f64::min);
            *v = intensity * (-(d * d) / (2.0 * thickness * thickness)).exp();
        }
        for ch in 0..c {
            for &v in &stroke {
                let noise = 0.02 * s.gaussian();
                let mixed = background[ch] * (1.0 - v) + tints[label][ch] * v + noise;
                data.push(mixed.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![spec.examples, c, h, w], data)?, labels, spec.classes)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}
