//! Dense rank-4 tensors and the small kernel set the neck is built from.
//!
//! Every kernel here is a pure function of its inputs. [`GradTape`] records
//! the same kernels and replays them backwards for reverse-mode gradients.

mod io;
mod ops;
mod tape;

pub use io::{read_manifest, write_manifest, ParamStore, TensorFile};
pub use ops::{
    bilinear_taps, concat_channels, conv2d, dense, elementwise, leaky_relu, pool_channelwise,
    pool_global, relu, sigmoid, upsample, Activation, BinaryOp, PoolMode, UpsampleMode,
};
pub use tape::{GradTape, Gradients, Var};

use crate::error::{shape_err, Result};

/// A rank-4 tensor in `(n, c, h, w)` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Builds a map by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite when dims differ.
    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extracts sample `n` as a batch-of-one map.
    pub fn sample(&self, n: usize) -> FeatureMap {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        FeatureMap {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Stacks maps with identical `(c, h, w)` along the batch axis.
    pub fn concat_batch(parts: &[FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cannot concatenate zero maps"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(shape_err!(
                    "batch concat of {:?} with {:?}",
                    first.dims,
                    p.dims
                ));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureMap {
            dims: [n, c, h, w],
            data,
        })
    }
}

/// Row-major dense matrix, `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The matrix viewed as a `(rows, cols, 1, 1)` map, the layout the tape uses for weights.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            dims: [self.rows, self.cols, 1, 1],
            data: self.data.clone(),
        }
    }

    pub fn from_feature_map(fm: &FeatureMap) -> Result<Self> {
        let [r, c, h, w] = fm.dims();
        if h != 1 || w != 1 {
            return Err(shape_err!("expected (rows, cols, 1, 1), got {:?}", fm.dims()));
        }
        Matrix::new(r, c, fm.data().to_vec())
    }
}
