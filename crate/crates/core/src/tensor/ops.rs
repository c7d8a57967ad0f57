use serde::{Deserialize, Serialize};

use super::{FeatureMap, Matrix};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

pub(crate) fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
    }
    if (padded - k) % stride != 0 {
        return Err(shape_err!(
            "non-integer output size: ({len} + 2*{pad} - {k}) / {stride}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Zero-padded cross-correlation. `kernel` is `(out_c, in_c, kh, kw)`.
pub fn conv2d(
    x: &FeatureMap,
    kernel: &FeatureMap,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<FeatureMap> {
    let [n, ic, h, w] = x.dims();
    let [oc, kic, kh, kw] = kernel.dims();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if kic != ic {
        return Err(shape_err!("kernel expects {kic} input channels, input has {ic}"));
    }
    if let Some(b) = bias {
        if b.len() != oc {
            return Err(shape_err!("bias has {} entries for {oc} output channels", b.len()));
        }
    }
    let oh = conv_output_len(h, kh, stride, pad)?;
    let ow = conv_output_len(w, kw, stride, pad)?;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let base = bias.map_or(0.0, |bv| bv[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for i in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((b * ic + i) * h + iy as usize) * w;
                            let krow = ((o * ic + i) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[xrow + ix as usize] * kd[krow + kx];
                            }
                        }
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    FeatureMap::new([n, oc, oh, ow], out)
}

/// Reduces each `(n, c)` plane to one value. Returns the map and, for max
/// pooling, the flat input index that won each reduction (first on ties).
pub(crate) fn pool_global_with_argmax(
    x: &FeatureMap,
    mode: PoolMode,
) -> Result<(FeatureMap, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    if plane == 0 {
        return Err(shape_err!("global pooling over empty spatial extent"));
    }
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::new();
    for (p, chunk) in x.data().chunks(plane).enumerate() {
        match mode {
            PoolMode::Avg => out.push(chunk.iter().sum::<f64>() / plane as f64),
            PoolMode::Max => {
                let (best, value) = first_max(chunk.iter().copied());
                out.push(value);
                arg.push(p * plane + best);
            }
        }
    }
    Ok((FeatureMap::new([n, c, 1, 1], out)?, arg))
}

pub fn pool_global(x: &FeatureMap, mode: PoolMode) -> Result<FeatureMap> {
    pool_global_with_argmax(x, mode).map(|(m, _)| m)
}

pub(crate) fn pool_channelwise_with_argmax(
    x: &FeatureMap,
    mode: PoolMode,
) -> Result<(FeatureMap, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    if c == 0 {
        return Err(shape_err!("channel pooling over zero channels"));
    }
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    let mut arg = Vec::new();
    if mode == PoolMode::Max {
        arg.resize(n * plane, 0);
    }
    let xd = x.data();
    for b in 0..n {
        for s in 0..plane {
            let column = (0..c).map(|ch| xd[(b * c + ch) * plane + s]);
            match mode {
                PoolMode::Avg => out[b * plane + s] = column.sum::<f64>() / c as f64,
                PoolMode::Max => {
                    let (best, value) = first_max(column);
                    out[b * plane + s] = value;
                    arg[b * plane + s] = (b * c + best) * plane + s;
                }
            }
        }
    }
    Ok((FeatureMap::new([n, 1, h, w], out)?, arg))
}

pub fn pool_channelwise(x: &FeatureMap, mode: PoolMode) -> Result<FeatureMap> {
    pool_channelwise_with_argmax(x, mode).map(|(m, _)| m)
}

fn first_max(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if i == 0 || v > value {
            best = i;
            value = v;
        }
    }
    (best, value)
}

/// `act(w · x + bias)` for a single vector.
pub fn dense(x: &[f64], w: &Matrix, bias: &[f64], activation: Activation) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(shape_err!(
            "dense weight is {}x{}, input has {} entries",
            w.rows(),
            w.cols(),
            x.len()
        ));
    }
    if bias.len() != w.rows() {
        return Err(shape_err!("bias has {} entries for {} outputs", bias.len(), w.rows()));
    }
    Ok((0..w.rows())
        .map(|r| {
            let row = &w.data()[r * w.cols()..(r + 1) * w.cols()];
            let v = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[r];
            match activation {
                Activation::None => v,
                Activation::Relu => v.max(0.0),
            }
        })
        .collect())
}

/// Source taps for bilinear resizing along one axis with half-pixel centres
/// (align-corners = false). Entry `o` is `(i0, i1, frac)` with
/// `out[o] = (1 - frac) * in[i0] + frac * in[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample(x: &FeatureMap, factor: usize, mode: UpsampleMode) -> Result<FeatureMap> {
    if factor < 2 {
        return Err(Error::InvalidArgument(format!(
            "upsample factor must be at least 2, got {factor}"
        )));
    }
    Ok(resize_by(x, factor, mode))
}

/// Integer-factor resize; factor 1 is the identity.
pub(crate) fn resize_by(x: &FeatureMap, factor: usize, mode: UpsampleMode) -> FeatureMap {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    match mode {
        UpsampleMode::Nearest => {
            for plane in xd.chunks(h * w) {
                for oy in 0..oh {
                    let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                    for ox in 0..ow {
                        out.push(row[ox / factor]);
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, oh);
            let tx = bilinear_taps(w, ow);
            for plane in xd.chunks(h * w) {
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                        let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                        out.push((1.0 - fy) * top + fy * bot);
                    }
                }
            }
        }
    }
    FeatureMap {
        dims: [n, c, oh, ow],
        data: out,
    }
}

pub(crate) fn broadcast_dims(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("dims {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Element strides of `dims` when read at broadcast shape `out` (0 on stretched axes).
pub(crate) fn broadcast_strides(dims: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let natural = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if dims[i] == 1 && out[i] != 1 { 0 } else { natural[i] };
    }
    s
}

/// Visits every output position with the flat indices of both broadcast operands.
pub(crate) fn for_each_broadcast(
    a: [usize; 4],
    b: [usize; 4],
    out: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ia = n * sa[0] + c * sa[1] + y * sa[2];
                let ib = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(o, ia + x * sa[3], ib + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Elementwise add or multiply with size-1 axes stretched.
pub fn elementwise(a: &FeatureMap, b: &FeatureMap, op: BinaryOp) -> Result<FeatureMap> {
    let out_dims = broadcast_dims(a.dims(), b.dims())?;
    let mut out = vec![0.0; out_dims.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.dims(), b.dims(), out_dims, |o, ia, ib| {
        out[o] = match op {
            BinaryOp::Add => ad[ia] + bd[ib],
            BinaryOp::Mul => ad[ia] * bd[ib],
        };
    });
    FeatureMap::new(out_dims, out)
}

pub fn sigmoid(x: &FeatureMap) -> FeatureMap {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &FeatureMap, slope: f64) -> FeatureMap {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("channel concat of {:?} with {:?}", a.dims(), b.dims()));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    FeatureMap::new([n, ca + cb, h, w], out)
}
