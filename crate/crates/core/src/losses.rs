//! Global non-contrastive and local contrastive objectives, their samplers,
//! and the supervised pixel loss.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::imaging::{Mask, NormalizedImage};
use crate::metrics::{mse_values, ssim_plane, ssim_plane_grad};
use crate::tensor::Tensor;

/// Patch-level positives kept per query.
pub const TOP_POSITIVES: usize = 4;
/// Chebyshev radius of the hard-negative window.
pub const DEFAULT_NEGATIVE_RADIUS: usize = 7;
/// Random candidates drawn before hard-negative ranking.
pub const DEFAULT_NEGATIVE_POOL: usize = 64;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// One image's `C × H × W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "feature map {channels}x{height}x{width} with {} values",
                data.len()
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Image `n` of a rank-4 tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if n >= b {
            return Err(shape_err!("image {n} of a batch of {b}"));
        }
        Self::new(
            c,
            h,
            w,
            t.data()[n * c * h * w..(n + 1) * c * h * w].to_vec(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel vector at flat spatial index `idx = row·W + col`.
    pub fn vector(&self, idx: usize) -> Vec<f64> {
        let hw = self.pixels();
        (0..self.channels)
            .map(|c| self.data[c * hw + idx])
            .collect()
    }

    fn check_index(&self, idx: usize) -> Result<()> {
        if idx >= self.pixels() {
            return Err(invalid!(
                "index {idx} outside {}x{} grid",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }
}

/// `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine: dimensions {} and {}", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid!("cosine similarity of a zero vector is undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSet {
    pub query: usize,
    pub positives: Vec<usize>,
}

/// Ranks the in-bounds 8-neighbours of `query` by cosine similarity and keeps
/// the top [`TOP_POSITIVES`]; ties resolve in row-major scan order.
pub fn neighbor_positive_match(f: &FeatureMap, query: usize) -> Result<PositiveSet> {
    f.check_index(query)?;
    let (r, c) = f.coords(query);
    let q = f.vector(query);
    let mut scored = Vec::with_capacity(8);
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= f.height as isize || nc >= f.width as isize {
                continue;
            }
            let idx = nr as usize * f.width + nc as usize;
            scored.push((idx, cosine_similarity(&q, &f.vector(idx))?));
        }
    }
    // Stable sort keeps scan order among equal similarities.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(TOP_POSITIVES);
    Ok(PositiveSet {
        query,
        positives: scored.into_iter().map(|(i, _)| i).collect(),
    })
}

/// Mean of the query vector and its positives (global average pooling over patches).
pub fn patch_aggregate(f: &FeatureMap, set: &PositiveSet) -> Result<Vec<f64>> {
    f.check_index(set.query)?;
    let mut acc = f.vector(set.query);
    for &j in &set.positives {
        f.check_index(j)?;
        for (a, v) in acc.iter_mut().zip(f.vector(j)) {
            *a += v;
        }
    }
    let n = (1 + set.positives.len()) as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One query's `‖p/‖p‖ − t/‖t‖‖² = 2 − 2·cos(p, t)` with gradients for both inputs.
pub fn global_term_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(shape_err!(
            "global loss: dimensions {} and {}",
            pred.len(),
            target.len()
        ));
    }
    let (np, nt) = (norm(pred), norm(target));
    if np == 0.0 || nt == 0.0 {
        return Err(invalid!("global loss: zero-norm projection"));
    }
    let cos = pred.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / (np * nt);
    // d cos / dp = t̂/‖p‖ − cos·p/‖p‖²
    let gp = pred
        .iter()
        .zip(target)
        .map(|(p, t)| -2.0 * (t / (nt * np) - cos * p / (np * np)))
        .collect();
    let gt = pred
        .iter()
        .zip(target)
        .map(|(p, t)| -2.0 * (p / (np * nt) - cos * t / (nt * nt)))
        .collect();
    Ok((2.0 - 2.0 * cos, gp, gt))
}

/// Σ over queries of `2 − 2·cos(prediction, target projection)`.
pub fn global_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(invalid!(
            "global loss needs matching non-empty query lists ({} vs {})",
            predictions.len(),
            targets.len()
        ));
    }
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| global_term_grad(p, t).map(|(l, _, _)| l))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub query: usize,
    pub negatives: Vec<usize>,
}

/// Pixels at Chebyshev distance `1..=radius` from `query`, row-major.
pub fn negative_window(height: usize, width: usize, query: usize, radius: usize) -> Vec<usize> {
    let (r, c) = (query / width, query % width);
    let r0 = r.saturating_sub(radius);
    let r1 = (r + radius).min(height - 1);
    let c0 = c.saturating_sub(radius);
    let c1 = (c + radius).min(width - 1);
    let mut out = Vec::new();
    for nr in r0..=r1 {
        for nc in c0..=c1 {
            if nr != r || nc != c {
                out.push(nr * width + nc);
            }
        }
    }
    out
}

/// Hard negatives for the pixel `query` of the target local map: a random pool
/// of at most `pool` pixels within Chebyshev distance `radius`, ranked by cosine
/// similarity to the positive feature at `query`, keeping the top `count`.
pub fn hard_negative_sample<R: Rng + ?Sized>(
    f: &FeatureMap,
    query: usize,
    radius: usize,
    count: usize,
    pool: usize,
    rng: &mut R,
) -> Result<NegativeSet> {
    f.check_index(query)?;
    if radius == 0 {
        return Err(invalid!("negative radius must be at least 1"));
    }
    let eligible = negative_window(f.height, f.width, query, radius);
    if eligible.is_empty() {
        return Err(Error::EmptySampleSet(format!(
            "no eligible negatives around pixel {query}"
        )));
    }
    let mut candidates: Vec<usize> = if pool >= eligible.len() {
        eligible
    } else {
        sample(rng, eligible.len(), pool)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    candidates.sort_unstable();
    let positive = f.vector(query);
    let mut scored = candidates
        .into_iter()
        .map(|j| Ok((j, cosine_similarity(&positive, &f.vector(j))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(count);
    Ok(NegativeSet {
        query,
        negatives: scored.into_iter().map(|(j, _)| j).collect(),
    })
}

/// Gradients of one InfoNCE term.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `−log(exp(q·p/τ) / (exp(q·p/τ) + Σ_j exp(q·n_j/τ)))` for one query.
pub fn local_infonce(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<f64> {
    local_infonce_grad(query, positive, negatives, tau).map(|g| g.loss)
}

pub fn local_infonce_grad(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<InfoNceGrad> {
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    let k = query.len();
    if positive.len() != k || negatives.iter().any(|n| n.len() != k) {
        return Err(shape_err!("infonce: embedding dimensions differ"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut logits = Vec::with_capacity(1 + negatives.len());
    logits.push(dot(query, positive));
    logits.extend(negatives.iter().map(|n| dot(query, n)));
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let loss = (mx + z.ln() - logits[0]).max(0.0);
    let soft: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();

    let coef0 = (soft[0] - 1.0) / tau;
    let mut gq: Vec<f64> = positive.iter().map(|p| coef0 * p).collect();
    for (n, s) in negatives.iter().zip(&soft[1..]) {
        for (g, v) in gq.iter_mut().zip(n.iter()) {
            *g += s / tau * v;
        }
    }
    let gp = query.iter().map(|q| coef0 * q).collect();
    let gn = soft[1..]
        .iter()
        .map(|s| query.iter().map(|q| s / tau * q).collect())
        .collect();
    Ok(InfoNceGrad {
        loss,
        query: gq,
        positive: gp,
        negatives: gn,
    })
}

/// Pixel loss on raw planes: `MSE + (1 − SSIM)`.
pub fn pixel_loss_plane(pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != h * w {
        return Err(shape_err!("pixel loss: planes do not match {h}x{w}"));
    }
    Ok(mse_values(pred, target) + (1.0 - ssim_plane(pred, target, h, w)?))
}

pub fn pixel_loss_plane_grad(
    pred: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() != h * w {
        return Err(shape_err!("pixel loss: planes do not match {h}x{w}"));
    }
    let (s, gs) = ssim_plane_grad(pred, target, h, w)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .zip(gs)
        .map(|((p, t), g)| 2.0 * (p - t) / n - g)
        .collect();
    Ok((mse_values(pred, target) + 1.0 - s, grad))
}

/// `L_MSE + L_SSIM` with `L_SSIM = 1 − SSIM`.
pub fn pixel_loss(pred: &NormalizedImage, target: &NormalizedImage) -> Result<f64> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(shape_err!("pixel loss: image shapes differ"));
    }
    pixel_loss_plane(pred.values(), target.values(), pred.height(), pred.width())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub global: f64,
    pub local: f64,
    pub pixel: f64,
}

/// `L_global + L_local + λ·L_pixel`.
pub fn total_loss(c: &LossComponents, lambda: f64) -> f64 {
    c.global + c.local + lambda * c.pixel
}

/// Loss weighting; the contrastive weights exist for ablations and default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub tau: f64,
    pub global: f64,
    pub local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            global: 1.0,
            local: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0)
            || !(self.tau > 0.0)
            || !(self.global >= 0.0)
            || !(self.local >= 0.0)
        {
            return Err(invalid!(
                "loss weights need λ ≥ 0, τ > 0 and non-negative term weights"
            ));
        }
        Ok(())
    }

    pub fn total(&self, c: &LossComponents) -> f64 {
        self.global * c.global + self.local * c.local + self.lambda * c.pixel
    }

    pub fn contrastive(&self) -> bool {
        self.global > 0.0 || self.local > 0.0
    }
}

/// Draws up to `count` distinct `(image, flat index)` foreground locations
/// uniformly across the batch.
pub fn sample_foreground<R: Rng + ?Sized>(
    masks: &[Mask],
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let pool: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .flat_map(|(n, m)| {
            m.values()
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(move |(i, _)| (n, i))
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptySampleSet(
            "no foreground locations to query".into(),
        ));
    }
    let take = count.min(pool.len());
    let mut picked: Vec<(usize, usize)> = sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Index sets drawn for one training step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSets {
    /// `(image, positive set)` on the patch grid.
    pub patches: Vec<(usize, PositiveSet)>,
    /// `(image, negative set)` on the pixel grid.
    pub pixels: Vec<(usize, NegativeSet)>,
    pub patch_width: usize,
    pub pixel_width: usize,
}

impl SampleSets {
    /// One line per query: kind, image, query `row,col`, positives, negatives.
    pub fn to_diagnostic_text(&self) -> String {
        let fmt = |idx: &[usize], w: usize| {
            if idx.is_empty() {
                "-".to_string()
            } else {
                idx.iter()
                    .map(|i| format!("{},{}", i / w, i % w))
                    .collect::<Vec<_>>()
                    .join(";")
            }
        };
        let mut out = String::new();
        for (n, set) in &self.patches {
            let w = self.patch_width;
            let _ = writeln!(
                out,
                "patch b={n} q={},{} pos={} neg=-",
                set.query / w,
                set.query % w,
                fmt(&set.positives, w)
            );
        }
        for (n, set) in &self.pixels {
            let w = self.pixel_width;
            let _ = writeln!(
                out,
                "pixel b={n} q={},{} pos={},{} neg={}",
                set.query / w,
                set.query % w,
                set.query / w,
                set.query % w,
                fmt(&set.negatives, w)
            );
        }
        out
    }
}
