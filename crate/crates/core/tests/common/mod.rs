//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the defining formula, not from the library code.
#![allow(dead_code)]

use mirrorscope::metrics::{PredictionMap, SSIM_C1, SSIM_C2};
use mirrorscope::polygon::BinaryMask;
use mirrorscope::{FeatureMap, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    mirrorscope::seeded_rng(seed)
}

pub fn random_map(rng: &mut impl Rng, dims: [usize; 4]) -> FeatureMap {
    FeatureMap::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn conv2d(x: &FeatureMap, k: &FeatureMap, bias: Option<&[f64]>, stride: usize, pad: usize) -> FeatureMap {
    let [n, ic, h, w] = x.dims();
    let [oc, _, kh, kw] = k.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = FeatureMap::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..ic {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = (y * stride + dy) as isize - pad as isize;
                                let sx = (xo * stride + dx) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += x.at(b, i, sy as usize, sx as usize) * k.at(o, i, dy, dx);
                            }
                        }
                    }
                    let idx = out.index(b, o, y, xo);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

pub fn pool_global(x: &FeatureMap, max: bool) -> FeatureMap {
    let [n, c, h, w] = x.dims();
    FeatureMap::from_fn([n, c, 1, 1], |b, ch, _, _| {
        let mut vals = Vec::new();
        for y in 0..h {
            for xx in 0..w {
                vals.push(x.at(b, ch, y, xx));
            }
        }
        if max {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    })
}

pub fn pool_channel(x: &FeatureMap, max: bool) -> FeatureMap {
    let [n, c, h, w] = x.dims();
    FeatureMap::from_fn([n, 1, h, w], |b, _, y, xx| {
        let vals: Vec<f64> = (0..c).map(|ch| x.at(b, ch, y, xx)).collect();
        if max {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().sum::<f64>() / c as f64
        }
    })
}

pub fn dense(x: &[f64], w: &Matrix, bias: &[f64], relu: bool) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for r in 0..w.rows() {
        let mut acc = bias[r];
        for c in 0..w.cols() {
            acc += w.at(r, c) * x[c];
        }
        out[r] = if relu && acc < 0.0 { 0.0 } else { acc };
    }
    out
}

pub fn upsample_nearest(x: &FeatureMap, f: usize) -> FeatureMap {
    let [n, c, h, w] = x.dims();
    FeatureMap::from_fn([n, c, h * f, w * f], |b, ch, y, xx| x.at(b, ch, y / f, xx / f))
}

/// Half-pixel-centre bilinear resize, one output pixel at a time.
pub fn upsample_bilinear(x: &FeatureMap, f: usize) -> FeatureMap {
    let [n, c, h, w] = x.dims();
    let src = |o: usize, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(len - 1);
        let hi = if lo + 1 < len { lo + 1 } else { lo };
        (lo, hi, if hi == lo { 0.0 } else { s - lo as f64 })
    };
    FeatureMap::from_fn([n, c, h * f, w * f], |b, ch, y, xx| {
        let (y0, y1, ty) = src(y, h);
        let (x0, x1, tx) = src(xx, w);
        let a = x.at(b, ch, y0, x0);
        let bb = x.at(b, ch, y0, x1);
        let cc = x.at(b, ch, y1, x0);
        let d = x.at(b, ch, y1, x1);
        a * (1.0 - ty) * (1.0 - tx) + bb * (1.0 - ty) * tx + cc * ty * (1.0 - tx) + d * ty * tx
    })
}

/// F-beta from an explicit confusion matrix at the adaptive threshold.
pub fn f_beta(pred: &PredictionMap, gt: &BinaryMask, beta2: f64) -> f64 {
    let n = pred.data().len() as f64;
    let mean = pred.data().iter().sum::<f64>() / n;
    let t = if 2.0 * mean > 1.0 { 1.0 } else { 2.0 * mean };
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (i, &p) in pred.data().iter().enumerate() {
        let (pb, g) = (p >= t, gt.bits()[i]);
        match (pb, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = tp / (tp + fn_);
    if precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
    }
}

/// Enhanced alignment straight from the per-pixel definition.
pub fn e_measure(pred_bin: &[bool], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let fp: Vec<f64> = pred_bin.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let fg: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mp = fp.iter().sum::<f64>() / n;
    let mg = fg.iter().sum::<f64>() / n;
    if mg == 0.0 {
        return 1.0 - mp;
    }
    if mg == 1.0 {
        return mp;
    }
    let mut s = 0.0;
    for i in 0..gt.len() {
        let a = fp[i] - mp;
        let b = fg[i] - mg;
        let xi = 2.0 * a * b / (a * a + b * b);
        s += 0.25 * (1.0 + xi).powi(2);
    }
    s / n
}

/// SSIM of two constant images: only the luminance term differs from 1.
pub fn ssim_constant(a: f64, b: f64) -> f64 {
    (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2)
}

/// Filled convex hull of 4..12 random points, sampled at pixel centres.
pub fn random_convex_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    loop {
        let k = rng.gen_range(4..=12);
        let cx = rng.gen_range(0.3..0.7) * w as f64;
        let cy = rng.gen_range(0.3..0.7) * h as f64;
        let rx = rng.gen_range(0.12..0.3) * w as f64;
        let ry = rng.gen_range(0.12..0.3) * h as f64;
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|_| {
                let t = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.5..1.0);
                (cx + rx * r * t.cos(), cy + ry * r * t.sin())
            })
            .collect();
        let hull = convex_hull(pts);
        if hull.len() < 3 {
            continue;
        }
        let mask = BinaryMask::from_fn(h, w, |y, x| inside_convex(&hull, x as f64 + 0.5, y as f64 + 0.5));
        if mask.count() >= 50 {
            return mask;
        }
    }
}

/// Andrew's monotone chain, counter-clockwise in (x, y).
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_convex(hull: &[(f64, f64)], x: f64, y: f64) -> bool {
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
    })
}

/// Crossing-number point-in-polygon test.
pub fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn random_prediction(rng: &mut impl Rng, h: usize, w: usize) -> PredictionMap {
    PredictionMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}
