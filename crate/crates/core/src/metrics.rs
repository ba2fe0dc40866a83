//! Reconstruction quality: MSE, PSNR, global SSIM and tag-set Jaccard.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() == y.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())))
    }
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("mse", x, y)?;
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn ssim_plane(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    // both factors are symmetric in (x, y), so the result is too
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM from whole-image statistics, averaged over channels. Accepts
/// `[C, H, W]` or `[H, W]` images.
pub fn ssim_with(x: &Tensor, y: &Tensor, c1: f64, c2: f64) -> Result<f64> {
    same_shape("ssim", x, y)?;
    let channels = if x.shape().len() == 3 { x.shape()[0] } else { 1 };
    let plane = x.len() / channels;
    let total: f64 = (0..channels)
        .map(|c| {
            let r = c * plane..(c + 1) * plane;
            ssim_plane(&x.data()[r.clone()], &y.data()[r], c1, c2)
        })
        .sum();
    Ok(total / channels as f64)
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    ssim_with(x, y, SSIM_C1, SSIM_C2)
}

/// Trimmed, case-folded, non-empty tags.
pub fn canonical_tags<'a>(tags: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    tags.into_iter()
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard<'a>(a: impl IntoIterator<Item = &'a str>, b: impl IntoIterator<Item = &'a str>) -> f64 {
    let a = canonical_tags(a);
    let b = canonical_tags(b);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Tag file contents: one tag per line.
pub fn jaccard_text(a: &str, b: &str) -> f64 {
    jaccard(a.lines(), b.lines())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Psnr,
    Ssim,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        Self {
            mean: values.clone().sum::<f64>() / n,
            min: values.clone().fold(f64::INFINITY, f64::min),
            max: values.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageQuality>,
    pub mse: Aggregate,
    pub psnr_db: Aggregate,
    pub ssim: Aggregate,
    pub rank_by: RankBy,
    pub best_index: usize,
    pub worst_index: usize,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "index,mse,psnr_db,ssim";

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, q) in self.images.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", q.mse, fmt_db(q.psnr_db), q.ssim));
        }
        out
    }
}

/// `inf` for the identical-image sentinel, plain float otherwise.
pub fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// Per-image metrics over `[N, ...]` batches with aggregates and the best
/// and worst image under `rank_by` (lowest index on ties).
pub fn batch_report(originals: &Tensor, recon: &Tensor, rank_by: RankBy) -> Result<QualityReport> {
    same_shape("batch_report", originals, recon)?;
    let n = originals.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let images = (0..n)
        .map(|i| {
            let x = originals.slice_outer(i, i + 1)?;
            let y = recon.slice_outer(i, i + 1)?;
            let m = mse(&x, &y)?;
            let single = |t: Tensor| t.reshape(&originals.shape()[1..]);
            Ok(ImageQuality {
                mse: m,
                psnr_db: psnr_from_mse(m, 1.0),
                ssim: ssim(&single(x)?, &single(y)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // higher is better for psnr/ssim, lower for mse
    let score = |q: &ImageQuality| match rank_by {
        RankBy::Psnr => q.psnr_db,
        RankBy::Ssim => q.ssim,
        RankBy::Mse => -q.mse,
    };
    let (mut best, mut worst) = (0, 0);
    for (i, q) in images.iter().enumerate() {
        if score(q) > score(&images[best]) {
            best = i;
        }
        if score(q) < score(&images[worst]) {
            worst = i;
        }
    }
    Ok(QualityReport {
        mse: Aggregate::of(images.iter().map(|q| q.mse)),
        psnr_db: Aggregate::of(images.iter().map(|q| q.psnr_db)),
        ssim: Aggregate::of(images.iter().map(|q| q.ssim)),
        images,
        rank_by,
        best_index: best,
        worst_index: worst,
    })
}
