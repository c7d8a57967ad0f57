use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{
    self, broadcast_dims, for_each_broadcast, pool_channelwise_with_argmax,
    pool_global_with_argmax, Activation, BinaryOp, PoolMode, UpsampleMode,
};
use super::FeatureMap;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    PoolGlobal {
        x: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    PoolChannel {
        x: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Dense {
        x: usize,
        w: usize,
        bias: Option<usize>,
        activation: Activation,
    },
    Upsample {
        x: usize,
        factor: usize,
        mode: UpsampleMode,
    },
    Binary {
        a: usize,
        b: usize,
        op: BinaryOp,
    },
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: FeatureMap,
    op: Op,
}

/// Records kernel applications so gradients of a scalar can be pulled back
/// to every recorded tensor.
///
/// A tape is single-writer; record from one context at a time.
#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn slot(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    pub fn leaf(&mut self, value: FeatureMap) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&FeatureMap> {
        Ok(&self.nodes[self.slot(v)?].value)
    }

    fn val(&self, i: usize) -> &FeatureMap {
        &self.nodes[i].value
    }

    /// `bias`, when present, has dims `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (x, kernel) = (self.slot(x)?, self.slot(kernel)?);
        let bias = bias.map(|b| self.slot(b)).transpose()?;
        let value = ops::conv2d(
            self.val(x),
            self.val(kernel),
            bias.map(|b| self.val(b).data()),
            stride,
            pad,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let x = self.slot(x)?;
        let (value, argmax) = pool_global_with_argmax(self.val(x), mode)?;
        Ok(self.push(value, Op::PoolGlobal { x, mode, argmax }))
    }

    pub fn pool_channelwise(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let x = self.slot(x)?;
        let (value, argmax) = pool_channelwise_with_argmax(self.val(x), mode)?;
        Ok(self.push(value, Op::PoolChannel { x, mode, argmax }))
    }

    /// Batched dense layer. `x` is `(n, in, 1, 1)`, `w` is `(out, in, 1, 1)`
    /// and `bias` is `(1, out, 1, 1)`; the result is `(n, out, 1, 1)`.
    pub fn dense(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        activation: Activation,
    ) -> Result<Var> {
        let (x, w) = (self.slot(x)?, self.slot(w)?);
        let bias = bias.map(|b| self.slot(b)).transpose()?;
        let [n, inp, xh, xw] = self.val(x).dims();
        let [out, win, wh, ww] = self.val(w).dims();
        if xh * xw != 1 || wh * ww != 1 || win != inp {
            return Err(shape_err!(
                "dense input {:?} with weight {:?}",
                self.val(x).dims(),
                self.val(w).dims()
            ));
        }
        if let Some(b) = bias {
            if self.val(b).len() != out {
                return Err(shape_err!("dense bias has {} entries for {out} outputs", self.val(b).len()));
            }
        }
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let mut y = Vec::with_capacity(n * out);
        for s in 0..n {
            let xs = &xd[s * inp..(s + 1) * inp];
            for o in 0..out {
                let row = &wd[o * inp..(o + 1) * inp];
                let mut v: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
                if let Some(b) = bias {
                    v += self.val(b).data()[o];
                }
                if activation == Activation::Relu {
                    v = v.max(0.0);
                }
                y.push(v);
            }
        }
        let value = FeatureMap::new([n, out, 1, 1], y)?;
        Ok(self.push(
            value,
            Op::Dense {
                x,
                w,
                bias,
                activation,
            },
        ))
    }

    /// Integer-factor upsampling. Unlike [`ops::upsample`] a factor of 1 is
    /// accepted and records an identity.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let x = self.slot(x)?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor 0".into()));
        }
        let value = ops::resize_by(self.val(x), factor, mode);
        Ok(self.push(value, Op::Upsample { x, factor, mode }))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (a, b) = (self.slot(a)?, self.slot(b)?);
        let value = ops::elementwise(self.val(a), self.val(b), op)?;
        Ok(self.push(value, Op::Binary { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let x = self.slot(x)?;
        let value = ops::sigmoid(self.val(x));
        Ok(self.push(value, Op::Sigmoid(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.slot(x)?;
        let value = ops::relu(self.val(x));
        Ok(self.push(value, Op::Relu(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let x = self.slot(x)?;
        let value = ops::leaky_relu(self.val(x), slope);
        Ok(self.push(value, Op::LeakyRelu { x, slope }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.slot(a)?, self.slot(b)?);
        let value = ops::concat_channels(self.val(a), self.val(b))?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` map.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.slot(x)?;
        let value = FeatureMap::scalar(self.val(x).sum());
        Ok(self.push(value, Op::Sum(x)))
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed = self.slot(seed)?;
        let seed_dims = self.val(seed).dims();
        if self.val(seed).len() != 1 {
            return Err(Error::NonScalarSeed(seed_dims));
        }
        let mut grads: Vec<Option<FeatureMap>> = vec![None; self.nodes.len()];
        grads[seed] = Some(FeatureMap::full(seed_dims, 1.0));

        for i in (0..=seed).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.unwrap_or_else(|| FeatureMap::zeros(node.value.dims())))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// `∂seed/∂wrt`.
    pub fn grad(&self, seed: Var, wrt: Var) -> Result<FeatureMap> {
        let wrt_slot = self.slot(wrt)?;
        let mut g = self.backward(seed)?;
        Ok(std::mem::replace(&mut g.grads[wrt_slot], FeatureMap::zeros([0; 4])))
    }

    fn pull_back(&self, i: usize, g: &FeatureMap, grads: &mut [Option<FeatureMap>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (gx, gk, gb) =
                    conv2d_backward(self.val(*x), self.val(*kernel), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *kernel, gk);
                if let Some(b) = bias {
                    let dims = self.val(*b).dims();
                    accumulate(grads, *b, FeatureMap::new(dims, gb).expect("bias dims"));
                }
            }
            Op::PoolGlobal { x, mode, argmax } => {
                let xv = self.val(*x);
                let plane = xv.height() * xv.width();
                let mut gx = vec![0.0; xv.len()];
                for (p, &gv) in g.data().iter().enumerate() {
                    match mode {
                        PoolMode::Avg => {
                            for v in &mut gx[p * plane..(p + 1) * plane] {
                                *v = gv / plane as f64;
                            }
                        }
                        PoolMode::Max => gx[argmax[p]] += gv,
                    }
                }
                accumulate(grads, *x, FeatureMap::new(xv.dims(), gx).expect("dims"));
            }
            Op::PoolChannel { x, mode, argmax } => {
                let xv = self.val(*x);
                let [n, c, h, w] = xv.dims();
                let plane = h * w;
                let mut gx = vec![0.0; xv.len()];
                for b in 0..n {
                    for s in 0..plane {
                        let gv = g.data()[b * plane + s];
                        match mode {
                            PoolMode::Avg => {
                                for ch in 0..c {
                                    gx[(b * c + ch) * plane + s] += gv / c as f64;
                                }
                            }
                            PoolMode::Max => gx[argmax[b * plane + s]] += gv,
                        }
                    }
                }
                accumulate(grads, *x, FeatureMap::new(xv.dims(), gx).expect("dims"));
            }
            Op::Dense {
                x,
                w,
                bias,
                activation,
            } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let [n, inp, _, _] = xv.dims();
                let out = wv.batch();
                let y = node.value.data();
                let gpre: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| match activation {
                        Activation::None => gv,
                        Activation::Relu => {
                            if yv > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; out];
                for s in 0..n {
                    for o in 0..out {
                        let go = gpre[s * out + o];
                        gb[o] += go;
                        for k in 0..inp {
                            gx[s * inp + k] += go * wv.data()[o * inp + k];
                            gw[o * inp + k] += go * xv.data()[s * inp + k];
                        }
                    }
                }
                accumulate(grads, *x, FeatureMap::new(xv.dims(), gx).expect("dims"));
                accumulate(grads, *w, FeatureMap::new(wv.dims(), gw).expect("dims"));
                if let Some(b) = bias {
                    let dims = self.val(*b).dims();
                    accumulate(grads, *b, FeatureMap::new(dims, gb).expect("dims"));
                }
            }
            Op::Upsample { x, factor, mode } => {
                let gx = upsample_backward(self.val(*x).dims(), g, *factor, *mode);
                accumulate(grads, *x, gx);
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let out = broadcast_dims(av.dims(), bv.dims()).expect("recorded dims");
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let gd = g.data();
                for_each_broadcast(av.dims(), bv.dims(), out, |o, ia, ib| match op {
                    BinaryOp::Add => {
                        ga[ia] += gd[o];
                        gb[ib] += gd[o];
                    }
                    BinaryOp::Mul => {
                        ga[ia] += gd[o] * bv.data()[ib];
                        gb[ib] += gd[o] * av.data()[ia];
                    }
                });
                accumulate(grads, *a, FeatureMap::new(av.dims(), ga).expect("dims"));
                accumulate(grads, *b, FeatureMap::new(bv.dims(), gb).expect("dims"));
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = zip_map(g, self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let gx = zip_map(g, self.val(*x), |gv, xv| if xv >= 0.0 { gv } else { slope * gv });
                accumulate(grads, *x, gx);
            }
            Op::Concat { a, b } => {
                let (ad, bd) = (self.val(*a).dims(), self.val(*b).dims());
                let plane = ad[2] * ad[3];
                let (ca, cb) = (ad[1], bd[1]);
                let mut ga = Vec::with_capacity(self.val(*a).len());
                let mut gb = Vec::with_capacity(self.val(*b).len());
                for chunk in g.data().chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                accumulate(grads, *a, FeatureMap::new(ad, ga).expect("dims"));
                accumulate(grads, *b, FeatureMap::new(bd, gb).expect("dims"));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, FeatureMap::full(self.val(*x).dims(), gv));
            }
        }
    }
}

/// Result of a reverse sweep: one gradient per recorded tensor.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<FeatureMap>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Result<&FeatureMap> {
        if v.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        self.grads.get(v.index).ok_or(Error::NotOnTape)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(grads: &mut [Option<FeatureMap>], i: usize, g: FeatureMap) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &FeatureMap, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> FeatureMap {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    FeatureMap::new(g.dims(), data).expect("dims")
}

fn conv2d_backward(
    x: &FeatureMap,
    kernel: &FeatureMap,
    g: &FeatureMap,
    stride: usize,
    pad: usize,
) -> (FeatureMap, FeatureMap, Vec<f64>) {
    let [n, ic, h, w] = x.dims();
    let [oc, _, kh, kw] = kernel.dims();
    let [_, _, oh, ow] = g.dims();
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; oc];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[((b * oc + o) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    gb[o] += gv;
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
                                gx[xrow + ix as usize] += gv * kd[krow + kx];
                                gk[krow + kx] += gv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        FeatureMap::new(x.dims(), gx).expect("dims"),
        FeatureMap::new(kernel.dims(), gk).expect("dims"),
        gb,
    )
}

fn upsample_backward(
    in_dims: [usize; 4],
    g: &FeatureMap,
    factor: usize,
    mode: UpsampleMode,
) -> FeatureMap {
    let [n, c, h, w] = in_dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = vec![0.0; n * c * h * w];
    let gd = g.data();
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[p * h * w + (oy / factor) * w + ox / factor] +=
                            gd[(p * oh + oy) * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = ops::bilinear_taps(h, oh);
            let tx = ops::bilinear_taps(w, ow);
            for p in 0..n * c {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gd[(p * oh + oy) * ow + ox];
                        plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        plane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
        }
    }
    FeatureMap::new(in_dims, gx).expect("dims")
}
