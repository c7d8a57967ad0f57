//! Saliency-style evaluation of a probability map against a binary mask,
//! plus windowed SSIM for dataset similarity.

mod ssim;

pub use ssim::{
    dataset_similarity, pair_count, sample_pairs, ssim, SimilarityResult, SSIM_C1, SSIM_C2,
    SSIM_SIGMA, SSIM_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::polygon::BinaryMask;

pub const DEFAULT_BETA2: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Guard used by the structure measure, `np.spacing(1)`.
const S_EPS: f64 = f64::EPSILON;

/// Real-valued map in `[0, 1]`, row-major. Values are clamped on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("map dims must be at least 1x1, got {height}x{width}"));
        }
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} map needs {} values, got {}", height * width, data.len()));
        }
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self { height, width, data })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            data: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn invert(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(shape_err!("prediction is {}x{}, ground truth is {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
}

fn gt_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Mean absolute error.
pub fn mae(pred: &PredictionMap, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| (p - gt_value(g)).abs())
        .sum();
    Ok(total / pred.data().len() as f64)
}

/// `min(2 · mean(pred), 1)`.
pub fn adaptive_threshold(pred: &PredictionMap) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// Pixels `>= threshold` become foreground.
pub fn binarize(pred: &PredictionMap, threshold: f64) -> BinaryMask {
    BinaryMask::new(
        pred.height(),
        pred.width(),
        pred.data().iter().map(|&v| v >= threshold).collect(),
    )
    .expect("dims")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum Threshold {
    Adaptive,
    Fixed(f64),
}

impl Threshold {
    pub fn resolve(self, pred: &PredictionMap) -> f64 {
        match self {
            Threshold::Adaptive => adaptive_threshold(pred),
            Threshold::Fixed(t) => t,
        }
    }
}

/// `(1 + β²) P R / (β² P + R)` from a binarised prediction.
pub fn f_beta_from_counts(tp: usize, predicted: usize, actual: usize, beta2: f64) -> f64 {
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

pub fn f_beta_at(pred: &PredictionMap, gt: &BinaryMask, beta2: f64, threshold: Threshold) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let actual = gt.count();
    if actual == 0 {
        return Err(Error::Undefined("F-beta with empty ground truth".into()));
    }
    let bin = binarize(pred, threshold.resolve(pred));
    let predicted = bin.count();
    let tp = bin
        .bits()
        .iter()
        .zip(gt.bits())
        .filter(|(&p, &g)| p && g)
        .count();
    Ok(f_beta_from_counts(tp, predicted, actual, beta2))
}

/// F-beta at the adaptive threshold.
pub fn f_beta(pred: &PredictionMap, gt: &BinaryMask, beta2: f64) -> Result<f64> {
    f_beta_at(pred, gt, beta2, Threshold::Adaptive)
}

/// Enhanced-alignment measure of a binary prediction.
///
/// With a mixed ground truth the bias of `gt` is non-zero at every pixel, so
/// the alignment denominator is strictly positive and no guard term is added.
pub fn e_measure(pred_bin: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    e_measure_with_eps(pred_bin, gt, 0.0)
}

/// [`e_measure`] with `eps` added to the alignment denominator.
pub fn e_measure_with_eps(pred_bin: &BinaryMask, gt: &BinaryMask, eps: f64) -> Result<f64> {
    check_dims(pred_bin.dims(), gt.dims())?;
    let n = gt.bits().len() as f64;
    let pred_mean = pred_bin.count() as f64 / n;
    let gt_count = gt.count();
    if gt_count == 0 {
        return Ok(1.0 - pred_mean);
    }
    if gt_count == gt.bits().len() {
        return Ok(pred_mean);
    }
    let gt_mean = gt_count as f64 / n;
    let total: f64 = pred_bin
        .bits()
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let dp = gt_value(p) - pred_mean;
            let dg = gt_value(g) - gt_mean;
            let align = 2.0 * dp * dg / (dp * dp + dg * dg + eps);
            (1.0 + align) * (1.0 + align) / 4.0
        })
        .sum();
    Ok(total / n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let count = values.clone().count();
    if count == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / count as f64;
    let var = if count > 1 {
        values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + S_EPS)
}

fn s_object(pred: &PredictionMap, gt: &BinaryMask) -> f64 {
    let pairs = pred.data().iter().zip(gt.bits());
    let fg = pairs.clone().filter(|(_, &g)| g).map(|(&p, _)| p);
    let bg = pairs.filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p);
    let u = gt.count() as f64 / gt.bits().len() as f64;
    u * object_score(fg) + (1.0 - u) * object_score(bg)
}

/// Split point `(x, y)` of the region term: the rounded foreground centroid plus one.
fn region_split(gt: &BinaryMask) -> (usize, usize) {
    let (h, w) = gt.dims();
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) {
                sx += x as f64;
                sy += y as f64;
                count += 1;
            }
        }
    }
    let (cx, cy) = if count == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        (
            (sx / count as f64).round_ties_even(),
            (sy / count as f64).round_ties_even(),
        )
    };
    ((cx as usize + 1).min(w), (cy as usize + 1).min(h))
}

/// SSIM-style block score of the region term (whole-block statistics, sample variances).
fn block_score(pred: &PredictionMap, gt: &BinaryMask, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
    let n = ys.len() * xs.len();
    let cells = || {
        ys.clone()
            .flat_map(|y| xs.clone().map(move |x| (y, x)))
            .map(|(y, x)| (pred.at(y, x), gt_value(gt.get(y, x))))
    };
    let mx = cells().map(|(p, _)| p).sum::<f64>() / n as f64;
    let my = cells().map(|(_, g)| g).sum::<f64>() / n as f64;
    let denom = n.saturating_sub(1).max(1) as f64;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (p, g) in cells() {
        vx += (p - mx) * (p - mx);
        vy += (g - my) * (g - my);
        cxy += (p - mx) * (g - my);
    }
    let (vx, vy, cxy) = (vx / denom, vy / denom, cxy / denom);
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &PredictionMap, gt: &BinaryMask) -> f64 {
    let (h, w) = gt.dims();
    let (x, y) = region_split(gt);
    let area = (h * w) as f64;
    let quads = [
        (0..y, 0..x),
        (0..y, x..w),
        (y..h, 0..x),
        (y..h, x..w),
    ];
    quads
        .into_iter()
        .filter(|(ys, xs)| !ys.is_empty() && !xs.is_empty())
        .map(|(ys, xs)| {
            let weight = (ys.len() * xs.len()) as f64 / area;
            weight * block_score(pred, gt, ys, xs)
        })
        .sum()
}

/// Structure measure `α · S_object + (1 − α) · S_region`, clamped to `[0, 1]`.
pub fn s_measure(pred: &PredictionMap, gt: &BinaryMask, alpha: f64) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let gt_count = gt.count();
    if gt_count == 0 {
        return Ok(1.0 - pred.mean());
    }
    if gt_count == gt.bits().len() {
        return Ok(pred.mean());
    }
    let s = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beta2: f64,
    pub alpha: f64,
    pub threshold: Threshold,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta2: DEFAULT_BETA2,
            alpha: DEFAULT_ALPHA,
            threshold: Threshold::Adaptive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub mae: f64,
    /// `None` when the ground truth has no foreground.
    pub f_beta: Option<f64>,
    pub e_measure: f64,
    pub s_measure: f64,
}

/// All four metrics for one image. E-measure uses the same binarisation as F-beta.
pub fn evaluate_image(id: &str, pred: &PredictionMap, gt: &BinaryMask, cfg: &EvalConfig) -> Result<ImageRecord> {
    check_dims(pred.dims(), gt.dims())?;
    let f = match f_beta_at(pred, gt, cfg.beta2, cfg.threshold) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let bin = binarize(pred, cfg.threshold.resolve(pred));
    Ok(ImageRecord {
        id: id.to_string(),
        mae: mae(pred, gt)?,
        f_beta: f,
        e_measure: e_measure(&bin, gt)?,
        s_measure: s_measure(pred, gt, cfg.alpha)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub mae: f64,
    pub f_beta: Option<f64>,
    pub f_beta_images: usize,
    pub e_measure: f64,
    pub s_measure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: EvalConfig,
    pub images: Vec<ImageRecord>,
    pub aggregate: Aggregate,
    /// Images whose F-beta is undefined and left out of its mean.
    pub undefined_f_beta: usize,
}

impl MetricReport {
    /// Sorts records by id and reduces in that order.
    pub fn from_records(mut images: Vec<ImageRecord>, config: EvalConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to aggregate".into()));
        }
        images.sort_by(|a, b| a.id.cmp(&b.id));
        let n = images.len() as f64;
        let mean = |f: fn(&ImageRecord) -> f64| images.iter().map(f).sum::<f64>() / n;
        let defined: Vec<f64> = images.iter().filter_map(|r| r.f_beta).collect();
        let aggregate = Aggregate {
            images: images.len(),
            mae: mean(|r| r.mae),
            f_beta: if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            },
            f_beta_images: defined.len(),
            e_measure: mean(|r| r.e_measure),
            s_measure: mean(|r| r.s_measure),
        };
        Ok(Self {
            config,
            undefined_f_beta: images.len() - defined.len(),
            images,
            aggregate,
        })
    }
}
