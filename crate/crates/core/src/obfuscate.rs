//! Postprocessing applied to a client update before it leaves the client:
//! compression, differential-privacy noise and defenses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Layer, Model, PrecodeNoise};
use crate::params::{GradientVector, ParamVector};
use crate::rng::Stream;

fn default_p() -> f64 {
    2.0
}

fn default_kappa() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage {
    Identity,
    Sign,
    UniformQuant {
        bits: u32,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
        /// Norms per layer segment rather than over the whole vector.
        #[serde(default = "default_true")]
        per_layer: bool,
    },
    Qsgd {
        bits: u32,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
        #[serde(default = "default_true")]
        per_layer: bool,
    },
    Topk {
        sparsity: f64,
    },
    /// Per-example clipping plus Gaussian noise. `snr_db: null` means no noise.
    Fedcdp {
        clip: f64,
        snr_db: Option<f64>,
    },
    Soteria {
        rho: f64,
        defended_layer: String,
    },
}

impl Stage {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Obfuscation(m));
        match self {
            Stage::UniformQuant { bits, p, kappa, .. } | Stage::Qsgd { bits, p, kappa, .. } => {
                if *bits < 2 {
                    return bad(format!("{bits}-bit quantizer has no levels; use the sign stage"));
                }
                if *bits > 32 {
                    return bad(format!("{bits} bits is more than supported"));
                }
                if !(*p > 0.0) || !(*kappa > 0.0) {
                    return bad(format!("p ({p}) and kappa ({kappa}) must be positive"));
                }
            }
            Stage::Topk { sparsity } => {
                if !(0.0..1.0).contains(sparsity) {
                    return bad(format!("sparsity {sparsity} outside [0, 1)"));
                }
            }
            Stage::Fedcdp { clip, snr_db } => {
                if !(*clip > 0.0) || !clip.is_finite() {
                    return bad(format!("clip bound {clip} must be positive"));
                }
                if let Some(s) = snr_db {
                    if !s.is_finite() {
                        return bad("snr_db must be finite (null disables noise)".into());
                    }
                }
            }
            Stage::Soteria { rho, .. } => {
                if !(0.0..=1.0).contains(rho) {
                    return bad(format!("rho {rho} outside [0, 1]"));
                }
            }
            Stage::Identity | Stage::Sign => {}
        }
        Ok(())
    }

    /// Stages that need more than the plain gradient.
    pub fn needs_batch(&self) -> bool {
        matches!(self, Stage::Fedcdp { .. } | Stage::Soteria { .. })
    }
}

/// Left-to-right chain of stages; an empty chain is the identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObfuscationSpec {
    pub stages: Vec<Stage>,
}

impl ObfuscationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let spec = Self { stages };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate()?;
            if i > 0 && stage.needs_batch() {
                return Err(Error::Obfuscation(format!(
                    "stage {i} ({stage:?}) needs per-example data and must come first"
                )));
            }
        }
        Ok(())
    }

    pub fn head(&self) -> Option<&Stage> {
        self.stages.first()
    }

    /// Stages that act on a finished gradient vector.
    pub fn tail(&self) -> &[Stage] {
        match self.stages.first() {
            Some(s) if s.needs_batch() => &self.stages[1..],
            _ => &self.stages,
        }
    }

    pub fn contains_sign(&self) -> bool {
        self.stages.iter().any(|s| matches!(s, Stage::Sign))
    }

    /// Short human-readable label, used in sweep tables.
    pub fn label(&self) -> String {
        if self.stages.is_empty() {
            return "identity".into();
        }
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Identity => "identity".to_string(),
                Stage::Sign => "sign".to_string(),
                Stage::UniformQuant { bits, .. } => format!("q{bits}"),
                Stage::Qsgd { bits, .. } => format!("qsgd{bits}"),
                Stage::Topk { sparsity } => format!("topk{sparsity}"),
                Stage::Fedcdp { clip, snr_db } => match snr_db {
                    Some(s) => format!("fedcdp{clip}@{s}dB"),
                    None => format!("fedcdp{clip}"),
                },
                Stage::Soteria { rho, .. } => format!("soteria{rho}"),
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// `ceil(x)` that tolerates representation error, so `0.05 * 100` gives 5.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as usize
}

pub fn sign_compress(g: &GradientVector) -> GradientVector {
    let data = g
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    g.with_data(data).expect("same layout")
}

/// `s = 2^(bits-1) - 1` unsigned levels per sign.
pub fn levels(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else if p.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Spacing of the quantization grid for a block: `(kappa / s) * ||g||_p`.
pub fn grid_unit(block: &[f64], bits: u32, p: f64, kappa: f64) -> f64 {
    kappa / levels(bits) * lp_norm(block, p)
}

fn quantize_blocks(
    g: &GradientVector,
    bits: u32,
    p: f64,
    kappa: f64,
    per_layer: bool,
    mut level: impl FnMut(f64, f64) -> f64,
) -> Result<GradientVector> {
    if bits < 2 {
        return Err(Error::Obfuscation(format!(
            "{bits}-bit quantizer has no levels; use the sign stage"
        )));
    }
    let s = levels(bits);
    let ranges: Vec<std::ops::Range<usize>> = if per_layer {
        g.segments().iter().map(|seg| seg.range()).collect()
    } else {
        vec![0..g.len()]
    };
    let mut out = g.data().to_vec();
    for r in ranges {
        let block = &g.data()[r.clone()];
        let norm = lp_norm(block, p);
        if norm == 0.0 {
            out[r].iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let unit = kappa / s * norm;
        for (o, &v) in out[r].iter_mut().zip(block) {
            let ratio = s * v.abs() / (kappa * norm);
            let l = level(ratio, s).clamp(0.0, s);
            *o = if v < 0.0 { -(unit * l) } else { unit * l };
        }
    }
    g.with_data(out)
}

/// Deterministic quantizer: level `round(s |g_i| / (kappa ||g||_p))`.
pub fn uniform_quantize(
    g: &GradientVector,
    bits: u32,
    p: f64,
    kappa: f64,
    per_layer: bool,
) -> Result<GradientVector> {
    quantize_blocks(g, bits, p, kappa, per_layer, |r, _| r.round())
}

/// Stochastic quantizer: rounds up from level `l = floor(r)` with
/// probability `r - l`, which makes it unbiased.
pub fn qsgd_quantize(
    g: &GradientVector,
    bits: u32,
    p: f64,
    kappa: f64,
    per_layer: bool,
    stream: &mut Stream,
) -> Result<GradientVector> {
    quantize_blocks(g, bits, p, kappa, per_layer, |r, s| {
        let l = r.floor().min(s);
        let up = r - l;
        // one draw per coordinate keeps the stream aligned with the vector
        let u = stream.uniform();
        if u < up {
            l + 1.0
        } else {
            l
        }
    })
}

/// Keep the `ceil((1 - sparsity) d)` largest magnitudes over the whole
/// vector; ties go to the lower index.
pub fn topk_sparsify(g: &GradientVector, sparsity: f64) -> Result<GradientVector> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Obfuscation(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let d = g.len();
    let k = topk_count(d, sparsity);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        g.data()[b]
            .abs()
            .total_cmp(&g.data()[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; d];
    for &i in &order[..k] {
        out[i] = g.data()[i];
    }
    g.with_data(out)
}

pub fn topk_count(d: usize, sparsity: f64) -> usize {
    ceil_count((1.0 - sparsity) * d as f64).clamp(1.min(d), d)
}

/// Scale every layer segment of `g` to an l2 norm of at most `clip`.
pub fn clip_per_layer(g: &GradientVector, clip: f64) -> GradientVector {
    let mut out = g.clone();
    for i in 0..g.segments().len() {
        let seg = &g.segments()[i];
        let norm = g.segment_data(seg).iter().map(|v| v * v).sum::<f64>().sqrt();
        let factor = 1.0 / (norm / clip).max(1.0);
        if factor < 1.0 {
            out.segment_data_mut(i).iter_mut().for_each(|v| *v *= factor);
        }
    }
    out
}

/// Noise multiplier such that
/// `snr_db = 10 log10(mean(g_hat^2) / (sigma^2 C^2))` for the averaged
/// clipped gradient `g_hat`. `None` (infinite SNR) gives zero.
pub fn fedcdp_sigma(clipped_mean: &[f64], clip: f64, snr_db: Option<f64>) -> f64 {
    let Some(snr) = snr_db else { return 0.0 };
    let power = clipped_mean.iter().map(|v| v * v).sum::<f64>() / clipped_mean.len().max(1) as f64;
    (power / (clip * clip * 10f64.powf(snr / 10.0))).sqrt()
}

#[derive(Clone, Debug)]
pub struct FedcdpOutput {
    pub gradient: GradientVector,
    pub sigma: f64,
    /// Average of the clipped gradients before noise.
    pub clipped_mean: GradientVector,
}

/// Clip each example's gradient per layer, average, and add
/// `N(0, sigma^2 C^2)` noise to every entry.
pub fn fedcdp(
    per_example: &[GradientVector],
    clip: f64,
    snr_db: Option<f64>,
    stream: &mut Stream,
) -> Result<FedcdpOutput> {
    let first = per_example.first().ok_or(Error::Empty("fedcdp examples"))?;
    if !(clip > 0.0) {
        return Err(Error::Obfuscation(format!("clip bound {clip} must be positive")));
    }
    let mut mean = first.zeros_like();
    for g in per_example {
        mean.axpy(1.0, &clip_per_layer(g, clip))?;
    }
    let mean = mean.scale(1.0 / per_example.len() as f64);
    let sigma = fedcdp_sigma(mean.data(), clip, snr_db);
    let std = sigma * clip;
    let noisy = if std > 0.0 {
        mean.data().iter().map(|v| v + std * stream.gaussian()).collect()
    } else {
        mean.data().to_vec()
    };
    Ok(FedcdpOutput {
        gradient: mean.with_data(noisy)?,
        sigma,
        clipped_mean: mean,
    })
}

/// Gradients of the batch loss, one per example.
pub fn per_example_gradients(
    model: &Model,
    params: &ParamVector,
    images: &Tensor,
    labels: &[usize],
    noise: &mut PrecodeNoise,
) -> Result<Vec<GradientVector>> {
    (0..labels.len())
        .map(|i| {
            let x = images.slice_outer(i, i + 1)?;
            Ok(model.loss_and_grad(params, &x, &labels[i..i + 1], noise)?.1)
        })
        .collect()
}

fn fc_width(model: &Model, layer: &str) -> Result<usize> {
    model
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::Fc { name, inputs, .. } if name == layer => Some(*inputs),
            _ => None,
        })
        .ok_or_else(|| {
            Error::Obfuscation(format!("defended layer {layer:?} is not a fully connected layer"))
        })
}

/// Representation components to prune: the `ceil(rho * width)` inputs of the
/// defended layer with the largest accumulated loss sensitivity
/// `sqrt(sum_batch (d loss / d r_i)^2)`. Ties go to the lower index.
pub fn soteria_selection(
    model: &Model,
    params: &ParamVector,
    images: &Tensor,
    labels: &[usize],
    rho: f64,
    defended_layer: &str,
) -> Result<Vec<usize>> {
    let width = fc_width(model, defended_layer)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Obfuscation(format!("rho {rho} outside [0, 1]")));
    }
    let count = ceil_count(rho * width as f64).min(width);
    if count == 0 {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let vars = params.to_vars(&tape, false);
    let x = tape.constant(images.clone());
    let trace = model.forward_traced(&vars, &x, &mut PrecodeNoise::Deterministic)?;
    let r: &Var = trace
        .fc_inputs
        .iter()
        .find(|(n, _)| n == defended_layer)
        .map(|(_, v)| v)
        .expect("layer exists");
    let loss = crate::autograd::softmax_cross_entropy(&trace.logits, labels)?;
    let dr = tape.grad(&loss, &[r])?.remove(0).value();
    let mut score = vec![0.0; width];
    for row in dr.data().chunks(width) {
        for (s, v) in score.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Zero the rows of the defended layer's weight gradient that belong to
/// `rows`; every other segment is untouched.
pub fn zero_defended_rows(g: &GradientVector, defended_layer: &str, rows: &[usize]) -> Result<GradientVector> {
    let name = format!("{defended_layer}.weight");
    let index = g
        .segments()
        .iter()
        .position(|s| s.name == name)
        .ok_or_else(|| Error::Obfuscation(format!("no segment {name}")))?;
    let cols = g.segments()[index].shape[1];
    let mut out = g.clone();
    let data = out.segment_data_mut(index);
    for &r in rows {
        data[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Clean batch gradient with the selected representation rows pruned.
pub fn soteria_prune(
    model: &Model,
    params: &ParamVector,
    images: &Tensor,
    labels: &[usize],
    rho: f64,
    defended_layer: &str,
) -> Result<GradientVector> {
    let rows = soteria_selection(model, params, images, labels, rho, defended_layer)?;
    let (_, g) = model.loss_and_grad(params, images, labels, &mut PrecodeNoise::Deterministic)?;
    zero_defended_rows(&g, defended_layer, &rows)
}

/// Client data available to head stages.
pub struct Batch<'a> {
    pub model: &'a Model,
    pub params: &'a ParamVector,
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

pub enum ChainInput<'a> {
    Gradient(GradientVector),
    PerExample(Vec<GradientVector>),
    Batch(Batch<'a>),
}

/// Apply a plain-gradient stage.
pub fn apply_stage(stage: &Stage, g: &GradientVector, stream: &mut Stream) -> Result<GradientVector> {
    match stage {
        Stage::Identity => Ok(g.clone()),
        Stage::Sign => Ok(sign_compress(g)),
        Stage::UniformQuant {
            bits,
            p,
            kappa,
            per_layer,
        } => uniform_quantize(g, *bits, *p, *kappa, *per_layer),
        Stage::Qsgd {
            bits,
            p,
            kappa,
            per_layer,
        } => qsgd_quantize(g, *bits, *p, *kappa, *per_layer, stream),
        Stage::Topk { sparsity } => topk_sparsify(g, *sparsity),
        Stage::Fedcdp { .. } | Stage::Soteria { .. } => Err(Error::Obfuscation(format!(
            "{stage:?} needs per-example data and must come first"
        ))),
    }
}

pub fn apply_tail(stages: &[Stage], g: GradientVector, stream: &mut Stream) -> Result<GradientVector> {
    stages.iter().try_fold(g, |g, s| apply_stage(s, &g, stream))
}

pub fn apply_chain(spec: &ObfuscationSpec, input: ChainInput<'_>, stream: &mut Stream) -> Result<GradientVector> {
    spec.validate()?;
    let start = match (spec.head(), input) {
        (Some(Stage::Fedcdp { clip, snr_db }), ChainInput::PerExample(grads)) => {
            fedcdp(&grads, *clip, *snr_db, stream)?.gradient
        }
        (Some(Stage::Fedcdp { clip, snr_db }), ChainInput::Batch(b)) => {
            let grads = per_example_gradients(
                b.model,
                b.params,
                b.images,
                b.labels,
                &mut PrecodeNoise::Deterministic,
            )?;
            fedcdp(&grads, *clip, *snr_db, stream)?.gradient
        }
        (Some(Stage::Soteria { rho, defended_layer }), ChainInput::Batch(b)) => {
            soteria_prune(b.model, b.params, b.images, b.labels, *rho, defended_layer)?
        }
        (Some(s), ChainInput::Gradient(_) | ChainInput::PerExample(_)) if s.needs_batch() => {
            return Err(Error::Obfuscation(format!("{s:?} needs the client batch")));
        }
        (_, ChainInput::Gradient(g)) => g,
        (_, ChainInput::PerExample(grads)) => {
            let first = grads.first().ok_or(Error::Empty("per-example gradients"))?;
            let mut mean = first.zeros_like();
            for g in &grads {
                mean.axpy(1.0, g)?;
            }
            mean.scale(1.0 / grads.len() as f64)
        }
        (_, ChainInput::Batch(b)) => {
            b.model
                .loss_and_grad(b.params, b.images, b.labels, &mut PrecodeNoise::Deterministic)?
                .1
        }
    };
    apply_tail(spec.tail(), start, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn vector(values: &[f64]) -> GradientVector {
        ParamVector::zeros(&[("w".to_string(), vec![values.len()])])
            .with_data(values.to_vec())
            .unwrap()
    }

    #[test]
    fn sign_examples() {
        let g = vector(&[-0.2, 0.0, 3.0]);
        let s = sign_compress(&g);
        assert_eq!(s.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(sign_compress(&s), s);
        assert_eq!(sign_compress(&g.scale(7.5)), s);
    }

    #[test]
    fn uniform_quantizer_hand_example() {
        let g = vector(&[0.6, -0.3, 0.0]);
        let q = uniform_quantize(&g, 3, 2.0, 1.0, true).unwrap();
        let norm = (0.6f64 * 0.6 + 0.3 * 0.3).sqrt();
        assert!((q.data()[0] - norm).abs() < 1e-12);
        assert!((q.data()[1] + norm / 3.0).abs() < 1e-12);
        assert_eq!(q.data()[2], 0.0);
        assert!((q.data()[0] - 0.67082).abs() < 1e-5);
        assert!((q.data()[1] + 0.22361).abs() < 1e-5);
    }

    #[test]
    fn quantizers_pass_zero_vectors_through() {
        let z = vector(&[0.0; 4]);
        assert_eq!(uniform_quantize(&z, 3, 2.0, 1.0, true).unwrap(), z);
        let mut s = derive_stream(0, "q", 0);
        assert_eq!(qsgd_quantize(&z, 3, 2.0, 1.0, true, &mut s).unwrap(), z);
    }

    #[test]
    fn one_bit_quantizer_is_rejected() {
        let g = vector(&[1.0]);
        assert!(matches!(uniform_quantize(&g, 1, 2.0, 1.0, true), Err(Error::Obfuscation(_))));
        assert!(ObfuscationSpec::new(vec![Stage::Qsgd { bits: 1, p: 2.0, kappa: 1.0, per_layer: true }]).is_err());
    }

    #[test]
    fn qsgd_never_rounds_up_on_a_level() {
        // ||g|| = 1, s = 3: 1/3 and 2/3 sit exactly on levels 1 and 2 when
        // computed as 3 * |g| / ||g||
        let g = vector(&[0.6, 0.8]);
        for seed in 0..200 {
            let mut s = derive_stream(seed, "edge", 0);
            let q = qsgd_quantize(&g, 2, 2.0, 1.0, true, &mut s).unwrap();
            // s = 1: ratios 0.6 and 0.8, so each lands on 0 or 1
            for v in q.data() {
                assert!(*v == 0.0 || *v == 1.0);
            }
        }
        let on_level = vector(&[1.0, 0.0]);
        for seed in 0..200 {
            let mut s = derive_stream(seed, "edge", 1);
            let q = qsgd_quantize(&on_level, 3, 2.0, 1.0, true, &mut s).unwrap();
            assert_eq!(q.data(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn qsgd_is_seed_deterministic() {
        let g = vector(&[0.3, -0.1, 0.7, 0.05]);
        let run = |seed| {
            let mut s = derive_stream(seed, "qsgd", 0);
            qsgd_quantize(&g, 3, 2.0, 1.0, true, &mut s).unwrap()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn topk_examples() {
        let g = vector(&[0.1, -0.5, 0.3]);
        // k = ceil((1 - 0.7) * 3) = 1
        assert_eq!(topk_sparsify(&g, 0.7).unwrap().data(), &[0.0, -0.5, 0.0]);
        assert_eq!(topk_sparsify(&g, 0.0).unwrap(), g);
        assert_eq!(topk_count(100, 0.95), 5);
        assert_eq!(topk_count(1000, 0.95), 50);
        assert_eq!(topk_count(1001, 0.95), 51);
        let ties = vector(&[1.0, -1.0, 1.0, 0.5]);
        assert_eq!(topk_sparsify(&ties, 0.5).unwrap().data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn clipping_scales_large_layers() {
        let g = ParamVector::zeros(&[("a".into(), vec![2]), ("b".into(), vec![2])])
            .with_data(vec![0.0, 8.0, 0.3, 0.4])
            .unwrap();
        let c = clip_per_layer(&g, 4.0);
        assert_eq!(c.data(), &[0.0, 4.0, 0.3, 0.4]);
    }

    #[test]
    fn fedcdp_without_noise_is_clipped_average() {
        let a = vector(&[0.0, 8.0]);
        let b = vector(&[1.0, 0.0]);
        let mut s = derive_stream(0, "cdp", 0);
        let out = fedcdp(&[a, b], 4.0, None, &mut s).unwrap();
        assert_eq!(out.sigma, 0.0);
        assert_eq!(out.gradient.data(), &[0.5, 2.0]);
        assert!(fedcdp(&[], 1.0, None, &mut s).is_err());
    }

    #[test]
    fn chain_order_and_serialization() {
        let chain = ObfuscationSpec::new(vec![
            Stage::Topk { sparsity: 0.95 },
            Stage::Sign,
        ])
        .unwrap();
        let json = serde_json::to_string(&chain).unwrap();
        let back: ObfuscationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);

        let misplaced = ObfuscationSpec {
            stages: vec![Stage::Sign, Stage::Fedcdp { clip: 1.0, snr_db: Some(10.0) }],
        };
        assert!(misplaced.validate().is_err());

        let unknown = r#"[{"kind": "topk", "sparsity": 0.5, "extra": 1}]"#;
        assert!(serde_json::from_str::<ObfuscationSpec>(unknown).is_err());
    }

    #[test]
    fn empty_chain_is_identity() {
        let g = vector(&[0.25, -1.5]);
        let mut s = derive_stream(0, "chain", 0);
        let out = apply_chain(&ObfuscationSpec::identity(), ChainInput::Gradient(g.clone()), &mut s).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn topk_then_sign_bounds_support() {
        let g = ParamVector::zeros(&[("w".into(), vec![200])])
            .with_data((0..200).map(|i| ((i * 31 % 17) as f64 - 8.0) / 3.0).collect())
            .unwrap();
        let chain = ObfuscationSpec::new(vec![Stage::Topk { sparsity: 0.95 }, Stage::Sign]).unwrap();
        let mut s = derive_stream(0, "chain", 1);
        let out = apply_chain(&chain, ChainInput::Gradient(g), &mut s).unwrap();
        let nonzero = out.data().iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= 10);
        assert!(out.data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
    }
}
