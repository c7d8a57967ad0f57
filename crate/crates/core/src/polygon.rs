//! Bounding polygons in polar form around a detection centre.
//!
//! A polygon is `bins` equal angular sectors around the centre; sector `b`
//! spans `[b, b + 1) · 2π / bins` measured with `atan2(dy, dx)` in pixel
//! coordinates (y down) and its vertex sits on the sector's bisector.
//! Centres are normalised by image width/height, distances by the image
//! diagonal.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_BINS: usize = 36;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 2-D `{0, 1}` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("mask dims must be at least 1x1, got {height}x{width}"));
        }
        if bits.len() != height * width {
            return Err(shape_err!("{height}x{width} mask needs {} bits, got {}", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Foreground pixels with a 4-neighbour that is background or off-image.
    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        if !self.get(y, x) {
            return false;
        }
        y == 0
            || x == 0
            || y + 1 == self.height
            || x + 1 == self.width
            || !self.get(y - 1, x)
            || !self.get(y + 1, x)
            || !self.get(y, x - 1)
            || !self.get(y, x + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vertex {
    pub bin: usize,
    pub distance: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolygonDetection {
    /// `(cx, cy)` normalised to `[0, 1]`.
    pub center: (f64, f64),
    pub bins: usize,
    /// Strictly increasing in `bin`.
    pub vertices: Vec<Vertex>,
    pub threshold: f64,
}

impl PolygonDetection {
    pub fn bin_angle(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * TAU / self.bins as f64
    }

    /// Vertex positions in pixel space for an `h × w` image.
    pub fn points(&self, height: usize, width: usize) -> Vec<(f64, f64)> {
        let diag = (height as f64).hypot(width as f64);
        let (cx, cy) = (self.center.0 * width as f64, self.center.1 * height as f64);
        self.vertices
            .iter()
            .map(|v| {
                let a = self.bin_angle(v.bin);
                let r = v.distance * diag;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect()
    }

    pub fn is_well_formed(&self) -> bool {
        self.vertices.windows(2).all(|p| p[0].bin < p[1].bin)
            && self.vertices.iter().all(|v| {
                v.bin < self.bins && v.distance >= 0.0 && (0.0..=1.0).contains(&v.confidence)
            })
    }
}

/// Polar vertex labels for the foreground of `mask`.
///
/// The centre is the foreground centroid (pixel centres). Each sector's
/// vertex takes the largest radius of any boundary pixel whose centre falls
/// in it, with confidence 1; sectors without boundary pixels get distance 0
/// and confidence 0. Concave regions come back convexified per sector.
pub fn encode_mask_to_polygon(mask: &BinaryMask, bins: usize) -> Result<PolygonDetection> {
    if bins < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 bins, got {bins}")));
    }
    let (h, w) = mask.dims();
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let (cx, cy) = (sx / count as f64, sy / count as f64);
    let diag = (h as f64).hypot(w as f64);
    let mut best: Vec<Option<f64>> = vec![None; bins];
    for y in 0..h {
        for x in 0..w {
            if !mask.is_boundary(y, x) {
                continue;
            }
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = dx.hypot(dy);
            let bin = sector_of(dx, dy, bins);
            if best[bin].map_or(true, |b| r > b) {
                best[bin] = Some(r);
            }
        }
    }
    let vertices = best
        .into_iter()
        .enumerate()
        .map(|(bin, r)| Vertex {
            bin,
            distance: r.map_or(0.0, |r| r / diag),
            confidence: if r.is_some() { 1.0 } else { 0.0 },
        })
        .collect();
    Ok(PolygonDetection {
        center: (cx / w as f64, cy / h as f64),
        bins,
        vertices,
        threshold: 0.0,
    })
}

pub(crate) fn sector_of(dx: f64, dy: f64, bins: usize) -> usize {
    let angle = dy.atan2(dx).rem_euclid(TAU);
    ((angle / (TAU / bins as f64)) as usize).min(bins - 1)
}

/// Keeps vertices whose confidence is strictly above `threshold`.
pub fn decode_vertices(raw: &PolygonDetection, threshold: f64) -> PolygonDetection {
    PolygonDetection {
        center: raw.center,
        bins: raw.bins,
        vertices: raw
            .vertices
            .iter()
            .copied()
            .filter(|v| v.confidence > threshold)
            .collect(),
        threshold,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub mask: BinaryMask,
    /// Fewer than three vertices; `mask` is empty.
    pub degenerate: bool,
}

pub fn rasterize_polygon(poly: &PolygonDetection, height: usize, width: usize) -> Rasterized {
    let points = poly.points(height, width);
    if points.len() < 3 {
        return Rasterized {
            mask: BinaryMask::zeros(height, width),
            degenerate: true,
        };
    }
    Rasterized {
        mask: fill_even_odd(&points, height, width),
        degenerate: false,
    }
}

/// Even-odd scanline fill sampling pixel centres. Edges are half-open in y.
pub fn fill_even_odd(points: &[(f64, f64)], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(height, width);
    let mut crossings = Vec::with_capacity(points.len());
    for y in 0..height {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for i in 0..points.len() {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % points.len()];
            if (y0 > yc) != (y1 > yc) {
                crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            let start = (span[0] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            let end = (span[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            for x in start..end {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// `|a ∧ b| / |a ∨ b|`, 1 when both are empty.
pub fn polygon_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("IoU of {:?} and {:?} masks", a.dims(), b.dims()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Parameters added to a YOLO output layer fed by `in_channels` features when
/// each of `anchors` predictions also emits a distance and a confidence per bin.
pub fn head_parameter_overhead(in_channels: usize, anchors: usize, bins: usize) -> usize {
    (in_channels + 1) * anchors * 2 * bins
}

/// One detection per line: `cx cy (bin distance confidence)*`.
pub fn format_labels(polys: &[PolygonDetection]) -> String {
    let mut out = String::new();
    for p in polys {
        let _ = write!(out, "{} {}", p.center.0, p.center.1);
        for v in &p.vertices {
            let _ = write!(out, " {} {} {}", v.bin, v.distance, v.confidence);
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str, bins: usize) -> Result<Vec<PolygonDetection>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("label line {}: malformed", lineno + 1));
        if fields.len() < 2 || (fields.len() - 2) % 3 != 0 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let center = (num(fields[0])?, num(fields[1])?);
        let vertices = fields[2..]
            .chunks_exact(3)
            .map(|t| {
                Ok(Vertex {
                    bin: t[0].parse().map_err(|_| bad())?,
                    distance: num(t[1])?,
                    confidence: num(t[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let poly = PolygonDetection {
            center,
            bins,
            vertices,
            threshold: 0.0,
        };
        if !poly.is_well_formed() {
            return Err(Error::Format(format!(
                "label line {}: bins must increase and stay below {bins}, confidences in [0, 1]",
                lineno + 1
            )));
        }
        out.push(poly);
    }
    Ok(out)
}
