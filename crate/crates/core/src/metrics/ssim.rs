use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PredictionMap;
use crate::error::{shape_err, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Separable 'valid' Gaussian filtering of `f(a, b)` evaluated per pixel.
fn filter_valid(
    h: usize,
    w: usize,
    g: &[f64; SSIM_WINDOW],
    value: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * value(y * w + x + k);
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) fully inside the image,
/// with `C1 = 0.01²` and `C2 = 0.03²` for a `[0, 1]` dynamic range.
pub fn ssim(a: &PredictionMap, b: &PredictionMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("SSIM of {:?} and {:?} maps", a.dims(), b.dims()));
    }
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let (ad, bd) = (a.data(), b.data());
    let mu_a = filter_valid(h, w, &g, |i| ad[i]);
    let mu_b = filter_valid(h, w, &g, |i| bd[i]);
    let aa = filter_valid(h, w, &g, |i| ad[i] * ad[i]);
    let bb = filter_valid(h, w, &g, |i| bd[i] * bd[i]);
    let ab = filter_valid(h, w, &g, |i| ad[i] * bd[i]);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// `k` distinct unordered pairs `(i, j)`, `i < j`, sorted; all pairs when `k` covers them.
pub fn sample_pairs(n: usize, k: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = pair_count(n);
    let mut ranks: Vec<usize> = if k >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, k).into_vec()
    };
    ranks.sort_unstable();
    // walk rows of the upper triangle once
    let mut out = Vec::with_capacity(ranks.len());
    let (mut row, mut row_start) = (0usize, 0usize);
    for r in ranks {
        while r >= row_start + (n - 1 - row) {
            row_start += n - 1 - row;
            row += 1;
        }
        out.push((row, row + 1 + (r - row_start)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub score: f64,
    pub pairs: usize,
    pub exhaustive: bool,
}

/// Mean SSIM over sampled distinct pairs. Pairs are evaluated in parallel and
/// reduced in sorted order, so the score does not depend on thread count.
pub fn dataset_similarity(images: &[PredictionMap], sample: usize, seed: u64) -> Result<SimilarityResult> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 images, got {}",
            images.len()
        )));
    }
    let pairs = sample_pairs(images.len(), sample, seed);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("zero pairs requested".into()));
    }
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| ssim(&images[i], &images[j]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SimilarityResult {
        score: scores.iter().sum::<f64>() / scores.len() as f64,
        pairs: scores.len(),
        exhaustive: pairs.len() == pair_count(images.len()),
    })
}
