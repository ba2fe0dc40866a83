//! Reconstruction of client images from an observed (possibly obfuscated)
//! update: optimize a low-dimensional latent so that the update the decoded
//! images would produce matches the observation.

use serde::{Deserialize, Serialize};

use crate::autograd::nn::total_variation;
use crate::autograd::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, PrecodeNoise};
use crate::obfuscate::{ObfuscationSpec, Stage};
use crate::params::{GradientVector, ParamVector};
use crate::rng::derive_stream;

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;
/// Smoothing inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

fn keys(t: f64) -> f64 {
    let t = t.abs();
    let a = KEYS_A;
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// `[n_out, n_in]` cubic resampling matrix with half-pixel centres and
/// clamped borders. Rows sum to one.
pub fn resample_matrix(n_in: usize, n_out: usize) -> Tensor {
    let scale = n_in as f64 / n_out as f64;
    let mut m = Tensor::zeros(&[n_out, n_in]);
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let idx = (base as i64 + k).clamp(0, n_in as i64 - 1) as usize;
            m.data_mut()[o * n_in + idx] += keys(t - k as f64);
        }
    }
    m
}

fn resize(x: &Var, h: usize, w: usize) -> Result<Var> {
    let s = x.shape();
    let n = s.len();
    x.axis_map(n - 2, resample_matrix(s[n - 2], h))?
        .axis_map(n - 1, resample_matrix(s[n - 1], w))
}

fn on_tape<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&Var) -> Result<Var>,
{
    let tape = Tape::new();
    Ok(f(&tape.constant(x.clone()))?.value())
}

/// Bicubic downsampling of `[N, C, H, W]` images by `factor`.
pub fn enc_bicubic(img: &Tensor, factor: usize) -> Result<Tensor> {
    let s = img.shape().to_vec();
    check_factor(&s, factor)?;
    on_tape(img, |x| resize(x, s[s.len() - 2] / factor, s[s.len() - 1] / factor))
}

/// Bicubic upsampling of latents by `factor`.
pub fn dec_bicubic(z: &Tensor, factor: usize) -> Result<Tensor> {
    let s = z.shape().to_vec();
    on_tape(z, |x| resize(x, s[s.len() - 2] * factor, s[s.len() - 1] * factor))
}

fn check_factor(shape: &[usize], factor: usize) -> Result<()> {
    let n = shape.len();
    if factor == 0 || n < 2 || shape[n - 2] % factor != 0 || shape[n - 1] % factor != 0 {
        return Err(Error::Config(format!(
            "image {shape:?} is not divisible by factor {factor}"
        )));
    }
    Ok(())
}

fn default_lr() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_iterations() -> usize {
    100
}
fn default_unroll_cap() -> usize {
    10
}
fn default_factor() -> usize {
    4
}
fn default_ae_epochs() -> usize {
    5
}
fn default_denoise_step() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectionConfig {
    Identity,
    Bicubic {
        #[serde(default = "default_factor")]
        factor: usize,
    },
    /// Trained on auxiliary data disjoint from the victim.
    Autoencoder {
        d_z: usize,
        #[serde(default = "default_ae_epochs")]
        epochs: usize,
    },
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig::Bicubic { factor: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    L2,
    CosineTv { tv_weight: f64 },
    SignMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Unrolled while the local step count fits the cap.
    Auto,
    SingleStep,
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Postprocess {
    None,
    HistEq,
    TvDenoise {
        weight: f64,
        steps: usize,
        #[serde(default = "default_denoise_step")]
        step: f64,
    },
    /// Rescale by the largest magnitude, then equalize.
    SignHistEq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    Uniform01,
    Constant { v: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default = "AttackConfig::default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "AttackConfig::default_update")]
    pub update: UpdateMode,
    /// Most local steps replayed differentiably.
    #[serde(default = "default_unroll_cap")]
    pub unroll_cap: usize,
    #[serde(default = "AttackConfig::default_postprocess")]
    pub postprocess: Postprocess,
    #[serde(default = "AttackConfig::default_init")]
    pub init: Init,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            loss: Self::default_loss(),
            iterations: default_iterations(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            update: Self::default_update(),
            unroll_cap: default_unroll_cap(),
            postprocess: Self::default_postprocess(),
            init: Self::default_init(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn default_loss() -> LossKind {
        LossKind::L2
    }
    fn default_update() -> UpdateMode {
        UpdateMode::Auto
    }
    fn default_postprocess() -> Postprocess {
        Postprocess::None
    }
    fn default_init() -> Init {
        Init::Uniform01
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("attack lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps be positive".into());
        }
        match self.projection {
            ProjectionConfig::Bicubic { factor: 0 } => return fail("bicubic factor must be positive".into()),
            ProjectionConfig::Autoencoder { d_z: 0, .. } => return fail("d_z must be positive".into()),
            _ => {}
        }
        if let LossKind::CosineTv { tv_weight } = self.loss {
            if !(tv_weight >= 0.0) {
                return fail(format!("tv_weight {tv_weight} must be non-negative"));
            }
        }
        if let Postprocess::TvDenoise { weight, step, .. } = self.postprocess {
            if !(weight >= 0.0) || !(step > 0.0) {
                return fail("tv_denoise needs weight >= 0 and step > 0".into());
            }
        }
        if let Init::Constant { v } = self.init {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("constant init {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Small convolutional autoencoder: two stride-2 convolutions down to a
/// `[latent_channels, H/4, W/4]` code, two bicubic-upsample + convolution
/// stages back up, sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub image: [usize; 3],
    pub latent_channels: usize,
    pub params: ParamVector,
}

const AE_HIDDEN: usize = 16;

impl Autoencoder {
    pub fn layout(image: [usize; 3], latent_channels: usize) -> Vec<(String, Vec<usize>)> {
        let c = image[0];
        let l = latent_channels;
        vec![
            ("enc1.weight".into(), vec![AE_HIDDEN, c, 3, 3]),
            ("enc1.bias".into(), vec![AE_HIDDEN]),
            ("enc2.weight".into(), vec![l, AE_HIDDEN, 3, 3]),
            ("enc2.bias".into(), vec![l]),
            ("dec1.weight".into(), vec![AE_HIDDEN, l, 3, 3]),
            ("dec1.bias".into(), vec![AE_HIDDEN]),
            ("dec2.weight".into(), vec![c, AE_HIDDEN, 3, 3]),
            ("dec2.bias".into(), vec![c]),
        ]
    }

    /// Fresh network for `d_z` latent values per image.
    pub fn new(image: [usize; 3], d_z: usize, seed: u64) -> Result<Self> {
        let [_, h, w] = image;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("autoencoder needs H, W divisible by 4, got {image:?}")));
        }
        let cells = (h / 4) * (w / 4);
        if d_z == 0 || d_z % cells != 0 {
            return Err(Error::Config(format!(
                "d_z {d_z} is not a multiple of the {cells} latent cells"
            )));
        }
        let latent_channels = d_z / cells;
        let mut params = ParamVector::zeros(&Self::layout(image, latent_channels));
        for i in 0..params.segments().len() {
            let seg = params.segments()[i].clone();
            if seg.shape.len() != 4 {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let bound = (2.0 / fan_in as f64).sqrt();
            let mut s = derive_stream(seed, &seg.name, 0);
            for v in params.segment_data_mut(i) {
                *v = s.uniform_range(-bound, bound);
            }
        }
        Ok(Self {
            image,
            latent_channels,
            params,
        })
    }

    pub fn d_z(&self) -> usize {
        self.latent_channels * (self.image[1] / 4) * (self.image[2] / 4)
    }

    pub fn encode_var(&self, w: &[Var], x: &Var) -> Result<Var> {
        let h = x.conv2d(&w[0], 2, 1)?.add_channel_bias(&w[1])?.relu()?;
        h.conv2d(&w[2], 2, 1)?.add_channel_bias(&w[3])
    }

    pub fn decode_var(&self, w: &[Var], z: &Var) -> Result<Var> {
        let [_, h, wd] = self.image;
        let u = resize(z, h / 2, wd / 2)?;
        let u = u.conv2d(&w[4], 1, 1)?.add_channel_bias(&w[5])?.relu()?;
        let u = resize(&u, h, wd)?;
        u.conv2d(&w[6], 1, 1)?.add_channel_bias(&w[7])?.sigmoid()
    }

    /// Mean squared reconstruction error over `images`.
    pub fn reconstruction_mse(&self, images: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let w = self.params.to_vars(&tape, false);
        let x = tape.constant(images.clone());
        let y = self.decode_var(&w, &self.encode_var(&w, &x)?)?;
        Ok(y.sub(&x)?.square()?.mean()?.item())
    }
}

/// Train an autoencoder on `aux` with Adam on the l2 reconstruction loss.
/// Returns the model and the held-out error after every epoch, measured
/// on `held_out`.
pub fn train_autoencoder(
    aux: &Dataset,
    held_out: Option<&Tensor>,
    d_z: usize,
    epochs: usize,
    seed: u64,
) -> Result<(Autoencoder, Vec<f64>)> {
    if aux.is_empty() {
        return Err(Error::Empty("autoencoder data"));
    }
    let mut ae = Autoencoder::new(aux.image_shape(), d_z, seed)?;
    let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8, ae.params.len());
    let batch = 16.min(aux.len());
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..aux.len()).collect();
        derive_stream(seed, "autoencoder-epoch", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let (x, _) = aux.batch(chunk)?;
            let tape = Tape::new();
            let w = ae.params.to_vars(&tape, true);
            let xv = tape.constant(x);
            let y = ae.decode_var(&w, &ae.encode_var(&w, &xv)?)?;
            let loss = y.sub(&xv)?.square()?.mean()?;
            let refs: Vec<&Var> = w.iter().collect();
            let g = ae.params.from_vars(&tape.grad(&loss, &refs)?)?;
            adam.step(ae.params.data_mut(), g.data());
        }
        if let Some(h) = held_out {
            curve.push(ae.reconstruction_mse(h)?);
        }
    }
    Ok((ae, curve))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Identity { image: [usize; 3] },
    Bicubic { image: [usize; 3], factor: usize },
    Autoencoder(Box<Autoencoder>),
}

impl Projection {
    pub fn identity(image: [usize; 3]) -> Self {
        Projection::Identity { image }
    }

    pub fn bicubic(image: [usize; 3], factor: usize) -> Result<Self> {
        check_factor(&image, factor)?;
        Ok(Projection::Bicubic { image, factor })
    }

    pub fn image(&self) -> [usize; 3] {
        match self {
            Projection::Identity { image } | Projection::Bicubic { image, .. } => *image,
            Projection::Autoencoder(ae) => ae.image,
        }
    }

    /// Latent shape of one image.
    pub fn latent_shape(&self) -> Vec<usize> {
        let [c, h, w] = self.image();
        match self {
            Projection::Identity { .. } => vec![c, h, w],
            Projection::Bicubic { factor, .. } => vec![c, h / factor, w / factor],
            Projection::Autoencoder(ae) => vec![ae.latent_channels, h / 4, w / 4],
        }
    }

    /// Number of unknowns per image.
    pub fn d_z(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn encode_var(&self, x: &Var) -> Result<Var> {
        match self {
            Projection::Identity { .. } => Ok(x.clone()),
            Projection::Bicubic { factor, image } => resize(x, image[1] / factor, image[2] / factor),
            Projection::Autoencoder(ae) => {
                let w = ae.params.to_vars(x.tape(), false);
                ae.encode_var(&w, x)
            }
        }
    }

    pub fn decode_var(&self, z: &Var) -> Result<Var> {
        match self {
            Projection::Identity { .. } => Ok(z.clone()),
            Projection::Bicubic { image, .. } => resize(z, image[1], image[2]),
            Projection::Autoencoder(ae) => {
                let w = ae.params.to_vars(z.tape(), false);
                ae.decode_var(&w, z)
            }
        }
    }

    /// Keep pixel-valued latents inside the image range. Without this,
    /// entries pushed past a bound sit in the flat part of the decoder clamp
    /// and stop receiving gradient.
    pub fn project_latent(&self, z: &mut Tensor) {
        match self {
            Projection::Identity { .. } | Projection::Bicubic { .. } => {
                z.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            Projection::Autoencoder(_) => {}
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        on_tape(x, |v| self.encode_var(v))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        on_tape(z, |v| self.decode_var(v))
    }
}

/// Adam over a flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, len: usize) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// How the attacker simulates the client's local training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DummyUpdate {
    /// `eta * tau * grad f(w0)` on the whole batch.
    SingleStep,
    /// Replay every local step differentiably, in batch order.
    Unrolled { batch: usize },
}

/// The update a client would send for images `x`, as differentiable
/// per-segment values on `x`'s tape.
pub fn dummy_gradient(
    model: &Model,
    w0: &ParamVector,
    x: &Var,
    labels: &[usize],
    mode: DummyUpdate,
    eta: f64,
    tau: usize,
) -> Result<Vec<Var>> {
    let tape = x.tape();
    let w: Vec<Var> = w0.to_vars(tape, true);
    match mode {
        DummyUpdate::SingleStep => {
            let loss = model.forward_loss(&w, x, labels, &mut PrecodeNoise::Deterministic)?;
            let refs: Vec<&Var> = w.iter().collect();
            tape.grad(&loss, &refs)?
                .iter()
                .map(|g| g.scale(eta * tau as f64))
                .collect()
        }
        DummyUpdate::Unrolled { batch } => {
            let n = labels.len();
            let b = batch.clamp(1, n.max(1));
            let mut current = w.clone();
            let mut total: Option<Vec<Var>> = None;
            for _ in 0..tau {
                for start in (0..n).step_by(b) {
                    let end = (start + b).min(n);
                    let xs = if start == 0 && end == n { x.clone() } else { x.slice_outer(start, end)? };
                    let loss = model.forward_loss(&current, &xs, &labels[start..end], &mut PrecodeNoise::Deterministic)?;
                    let refs: Vec<&Var> = current.iter().collect();
                    let g = tape.grad(&loss, &refs)?;
                    let step: Vec<Var> = g.iter().map(|gi| gi.scale(eta)).collect::<Result<_>>()?;
                    current = current
                        .iter()
                        .zip(&step)
                        .map(|(c, s)| c.sub(s))
                        .collect::<Result<_>>()?;
                    total = Some(match total {
                        None => step,
                        Some(t) => t.iter().zip(&step).map(|(a, s)| a.add(s)).collect::<Result<_>>()?,
                    });
                }
            }
            total.ok_or(Error::Empty("local steps"))
        }
    }
}

/// Number of local steps a client performs.
pub fn local_steps(n: usize, batch: usize, tau: usize) -> usize {
    tau * n.div_ceil(batch.clamp(1, n.max(1)))
}

/// Pick the dummy-update model for a client configuration.
pub fn choose_update(mode: UpdateMode, n: usize, batch: usize, tau: usize, cap: usize) -> Result<DummyUpdate> {
    let steps = local_steps(n, batch, tau);
    match mode {
        UpdateMode::SingleStep => Ok(DummyUpdate::SingleStep),
        UpdateMode::Unrolled if steps > cap => Err(Error::Config(format!(
            "unrolling {steps} local steps exceeds the cap of {cap}"
        ))),
        UpdateMode::Unrolled => Ok(DummyUpdate::Unrolled { batch }),
        UpdateMode::Auto if steps <= cap => Ok(DummyUpdate::Unrolled { batch }),
        UpdateMode::Auto => Ok(DummyUpdate::SingleStep),
    }
}

/// Value of the matching objective and whether the cosine fallback fired.
pub struct MatchLoss {
    pub loss: Var,
    pub zero_norm_fallback: bool,
}

pub fn match_loss(kind: &LossKind, dummy: &[Var], observed: &GradientVector, x: &Var) -> Result<MatchLoss> {
    let tape = x.tape();
    let obs: Vec<Var> = observed.to_vars(tape, false);
    if obs.len() != dummy.len() {
        return Err(Error::shape(
            "match_loss",
            format!("{} dummy segments vs {} observed", dummy.len(), obs.len()),
        ));
    }
    let sum_over = |f: &dyn Fn(&Var, &Var) -> Result<Var>| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (d, o) in dummy.iter().zip(&obs) {
            let term = f(d, o)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        acc.ok_or(Error::Empty("gradient segments"))
    };
    match kind {
        LossKind::L2 => Ok(MatchLoss {
            loss: sum_over(&|d, o| d.sub(o)?.square()?.sum())?,
            zero_norm_fallback: false,
        }),
        LossKind::SignMatch => {
            let signs = observed.with_data(observed.data().iter().map(|v| sign(*v)).collect())?;
            let s = signs.to_vars(tape, false);
            let mut acc: Option<Var> = None;
            for (d, si) in dummy.iter().zip(&s) {
                let term = d.tanh()?.sub(si)?.square()?.sum()?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            Ok(MatchLoss {
                loss: acc.ok_or(Error::Empty("gradient segments"))?,
                zero_norm_fallback: false,
            })
        }
        LossKind::CosineTv { tv_weight } => {
            let tv = if *tv_weight > 0.0 {
                Some(total_variation(x, TV_EPS)?.scale(*tv_weight)?)
            } else {
                None
            };
            let dd = sum_over(&|d, _| d.square()?.sum())?;
            let on = observed.norm();
            let (cos, fallback) = if dd.item() == 0.0 || on == 0.0 {
                (tape.scalar(0.0), true)
            } else {
                let dot = sum_over(&|d, o| d.mul(o)?.sum())?;
                (dot.div(&dd.sqrt()?.scale(on)?)?.neg()?, false)
            };
            let loss = match tv {
                Some(t) => cos.add(&t)?,
                None => cos,
            };
            Ok(MatchLoss {
                loss,
                zero_norm_fallback: fallback,
            })
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attacker-side stand-in for the obfuscation: rows that a pruning defense
/// zeroed in the observation are zeroed in the dummy too. Every other stage
/// is matched as identity.
fn surrogate(spec: &ObfuscationSpec, observed: &GradientVector, dummy: Vec<Var>) -> Result<Vec<Var>> {
    let Some(Stage::Soteria { defended_layer, .. }) = spec.head() else {
        return Ok(dummy);
    };
    let name = format!("{defended_layer}.weight");
    let Some(index) = observed.segments().iter().position(|s| s.name == name) else {
        return Ok(dummy);
    };
    let seg = &observed.segments()[index];
    let cols = seg.shape[1];
    let data = observed.segment_data(seg);
    let mask: Vec<f64> = data
        .chunks(cols)
        .flat_map(|row| {
            let keep = if row.iter().all(|v| *v == 0.0) { 0.0 } else { 1.0 };
            std::iter::repeat_n(keep, cols)
        })
        .collect();
    let mask = Tensor::new(seg.shape.clone(), mask)?;
    let mut out = dummy;
    let m = out[index].tape().constant(mask);
    out[index] = out[index].mul(&m)?;
    Ok(out)
}

/// Everything the attacker observes about one client update.
#[derive(Clone, Debug)]
pub struct Observation<'a> {
    pub params: &'a ParamVector,
    pub gradient: &'a GradientVector,
    pub labels: &'a [usize],
    pub eta: f64,
    pub tau: usize,
    pub batch: usize,
    pub obfuscation: &'a ObfuscationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    /// Latent batch `[N, ...latent_shape]`.
    pub z: Tensor,
    pub adam: Adam,
    /// `(iteration, gradient distance)`; the last entry is measured after
    /// the final update.
    pub history: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// Postprocessed reconstructions `[N, C, H, W]`.
    pub images: Tensor,
    /// Decoded and clamped, before postprocessing.
    pub raw: Tensor,
    pub state: AttackState,
    pub d_z: usize,
    pub update: DummyUpdate,
    pub zero_norm_fallbacks: usize,
}

impl AttackOutcome {
    pub fn initial_distance(&self) -> Option<f64> {
        self.state.history.first().map(|h| h.1)
    }

    pub fn min_distance(&self) -> Option<f64> {
        self.state.history.iter().map(|h| h.1).reduce(f64::min)
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.state.history.last().map(|h| h.1)
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("iter,grad_dist\n");
        for (i, d) in &self.state.history {
            out.push_str(&format!("{i},{d}\n"));
        }
        out
    }
}

struct Evaluation {
    distance: f64,
    grad_z: Option<Tensor>,
    fallback: bool,
}

fn evaluate(
    model: &Model,
    projection: &Projection,
    obs: &Observation<'_>,
    cfg: &AttackConfig,
    update: DummyUpdate,
    z: &Tensor,
    with_grad: bool,
) -> Result<Evaluation> {
    let tape = Tape::new();
    let zv = tape.var(z.clone());
    let x = projection.decode_var(&zv)?.clamp(0.0, 1.0)?;
    let dummy = dummy_gradient(model, obs.params, &x, obs.labels, update, obs.eta, obs.tau)?;
    let dummy = surrogate(obs.obfuscation, obs.gradient, dummy)?;
    let m = match_loss(&cfg.loss, &dummy, obs.gradient, &x)?;
    let grad_z = if with_grad {
        Some(tape.grad(&m.loss, &[&zv])?.remove(0).value())
    } else {
        None
    };
    Ok(Evaluation {
        distance: m.loss.item(),
        grad_z,
        fallback: m.zero_norm_fallback,
    })
}

/// Initial dummy images for a batch of `n`.
pub fn initial_images(cfg: &AttackConfig, n: usize, image: [usize; 3]) -> Tensor {
    let [c, h, w] = image;
    match cfg.init {
        Init::Uniform01 => {
            let mut s = derive_stream(cfg.seed, "attack-init", 0);
            Tensor::from_fn(&[n, c, h, w], |_| s.uniform())
        }
        Init::Constant { v } => Tensor::full(&[n, c, h, w], v),
    }
}

/// Optimize the latent batch so the simulated update matches `obs`.
pub fn rog_attack(
    model: &Model,
    projection: &Projection,
    obs: &Observation<'_>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    rog_attack_with(model, projection, obs, cfg, |_, _| {})
}

/// [`rog_attack`] with a per-iteration callback `(iteration, distance)`.
pub fn rog_attack_with(
    model: &Model,
    projection: &Projection,
    obs: &Observation<'_>,
    cfg: &AttackConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if obs.labels.is_empty() {
        return Err(Error::Empty("victim labels"));
    }
    let image = projection.image();
    if image != model.spec().input {
        return Err(Error::Config(format!(
            "projection image {image:?} does not match model input {:?}",
            model.spec().input
        )));
    }
    let n = obs.labels.len();
    let update = choose_update(cfg.update, n, obs.batch, obs.tau, cfg.unroll_cap)?;
    let x0 = initial_images(cfg, n, image);
    let mut z = projection.encode(&x0)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, z.len());
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut fallbacks = 0;

    for it in 0..=cfg.iterations {
        let last = it == cfg.iterations;
        let e = evaluate(model, projection, obs, cfg, update, &z, !last)?;
        fallbacks += e.fallback as usize;
        if !e.distance.is_finite() {
            return Err(Error::NonFinite { op: "match_loss" });
        }
        history.push((it, e.distance));
        progress(it, e.distance);
        if let Some(g) = e.grad_z {
            adam.step(z.data_mut(), g.data());
            projection.project_latent(&mut z);
            if !z.is_finite() {
                return Err(Error::NonFinite { op: "attack latent" });
            }
        }
    }

    let raw = projection.decode(&z)?.map(|v| v.clamp(0.0, 1.0));
    let images = postprocess(&raw, &cfg.postprocess)?;
    Ok(AttackOutcome {
        images,
        raw,
        state: AttackState { z, adam, history },
        d_z: projection.d_z(),
        update,
        zero_norm_fallbacks: fallbacks,
    })
}

/// Per-image, per-channel histogram equalization over 256 bins. Channels
/// with fewer than two distinct levels are left alone.
pub fn hist_eq(img: &Tensor) -> Result<Tensor> {
    let planes = plane_count(img)?;
    let plane = img.len() / planes;
    let mut out = img.clone();
    for p in 0..planes {
        let r = p * plane..(p + 1) * plane;
        let bins: Vec<usize> = img.data()[r.clone()]
            .iter()
            .map(|v| crate::io::quantize_pixel(v.clamp(0.0, 1.0)) as usize)
            .collect();
        let mut hist = [0usize; 256];
        for &b in &bins {
            hist[b] += 1;
        }
        if hist.iter().filter(|&&c| c > 0).count() < 2 {
            continue;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (c, h) in cdf.iter_mut().zip(hist) {
            acc += h;
            *c = acc;
        }
        let cdf_min = *cdf.iter().find(|&&c| c > 0).expect("non-empty");
        let denom = (plane - cdf_min) as f64;
        for (o, b) in out.data_mut()[r].iter_mut().zip(&bins) {
            *o = (cdf[*b] - cdf_min) as f64 / denom;
        }
    }
    Ok(out)
}

fn plane_count(img: &Tensor) -> Result<usize> {
    let s = img.shape();
    match s.len() {
        2 => Ok(1),
        3 => Ok(s[0]),
        4 => Ok(s[0] * s[1]),
        _ => Err(Error::shape("postprocess", format!("{s:?}"))),
    }
}

/// Gradient descent on `0.5 ||u - img||^2 + weight * TV(u)` for a
/// `[N, C, H, W]` batch, clamped to `[0, 1]`.
pub fn tv_denoise(img: &Tensor, weight: f64, steps: usize, step: f64) -> Result<Tensor> {
    if weight == 0.0 || steps == 0 {
        return Ok(img.clone());
    }
    let n = img.shape()[0] as f64;
    let mut u = img.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let uv = tape.var(u.clone());
        let target = tape.constant(img.clone());
        // total_variation averages over the batch; undo that so every image
        // carries its own full penalty
        let fidelity = uv.sub(&target)?.square()?.sum()?.scale(0.5)?;
        let loss = fidelity.add(&total_variation(&uv, TV_EPS)?.scale(weight * n)?)?;
        let g = tape.grad(&loss, &[&uv])?.remove(0).value();
        for (a, b) in u.data_mut().iter_mut().zip(g.data()) {
            *a = (*a - step * b).clamp(0.0, 1.0);
        }
    }
    Ok(u)
}

/// Per image: divide by the largest magnitude and map `[-1, 1]` onto
/// `[0, 1]`. An all-zero image becomes mid-gray.
pub fn normalize_sign_recon(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 4 {
        return Err(Error::shape("normalize_sign_recon", format!("{s:?}")));
    }
    let per = img.len() / s[0];
    let mut out = img.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let m = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for v in chunk.iter_mut() {
            *v = if m == 0.0 { 0.5 } else { (*v / m + 1.0) / 2.0 };
        }
    }
    Ok(out)
}

pub fn postprocess(img: &Tensor, method: &Postprocess) -> Result<Tensor> {
    match method {
        Postprocess::None => Ok(img.map(|v| v.clamp(0.0, 1.0))),
        Postprocess::HistEq => hist_eq(img),
        Postprocess::TvDenoise { weight, steps, step } => tv_denoise(img, *weight, *steps, *step),
        Postprocess::SignHistEq => hist_eq(&normalize_sign_recon(img)?),
    }
}
