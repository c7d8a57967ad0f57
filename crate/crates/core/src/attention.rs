//! Channel and spatial attention gates (CBAM) and the squeeze-and-excitation
//! baseline.
//!
//! Each block has a pure entry point on [`FeatureMap`]s and an `*_on`
//! variant that records onto a [`GradTape`] so gradients can be taken with
//! respect to the input and every parameter.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    Activation, FeatureMap, GradTape, Matrix, ParamStore, PoolMode, TensorFile, Var,
};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Largest reduction ratio `<= requested` that divides `channels`.
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    let mut r = requested.clamp(1, channels.max(1));
    while channels % r != 0 {
        r -= 1;
    }
    r
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let dist = Uniform::new_inclusive(-scale, scale);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn check_bottleneck(w0: &Matrix, w1: &Matrix) -> Result<(usize, usize)> {
    let (hidden, channels) = (w0.rows(), w0.cols());
    if hidden == 0 || channels == 0 {
        return Err(shape_err!("empty MLP weights"));
    }
    if w1.rows() != channels || w1.cols() != hidden {
        return Err(shape_err!(
            "w0 is {hidden}x{channels} so w1 must be {channels}x{hidden}, got {}x{}",
            w1.rows(),
            w1.cols()
        ));
    }
    if channels % hidden != 0 {
        return Err(shape_err!(
            "hidden width {hidden} does not divide {channels} channels"
        ));
    }
    Ok((hidden, channels))
}

/// Shared two-layer MLP of the channel gate: `w0` is `(c/r, c)`, `w1` is `(c, c/r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    w0: Matrix,
    w1: Matrix,
}

impl ChannelAttentionParams {
    pub fn new(w0: Matrix, w1: Matrix) -> Result<Self> {
        check_bottleneck(&w0, &w1)?;
        Ok(Self { w0, w1 })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = channels / effective_reduction(channels, reduction);
        Self {
            w0: Matrix::zeros(hidden, channels),
            w1: Matrix::zeros(channels, hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = channels / effective_reduction(channels, reduction);
        Self {
            w0: uniform_matrix(hidden, channels, 1.0 / (channels as f64).sqrt(), rng),
            w1: uniform_matrix(channels, hidden, 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn channels(&self) -> usize {
        self.w0.cols()
    }

    pub fn reduction(&self) -> usize {
        self.w0.cols() / self.w0.rows()
    }

    pub fn record(&self, tape: &mut GradTape) -> MlpVars {
        MlpVars {
            w0: tape.leaf(self.w0.to_feature_map()),
            w1: tape.leaf(self.w1.to_feature_map()),
        }
    }
}

/// Squeeze-and-excitation bottleneck, same layout as [`ChannelAttentionParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    w0: Matrix,
    w1: Matrix,
}

impl SeParams {
    pub fn new(w0: Matrix, w1: Matrix) -> Result<Self> {
        check_bottleneck(&w0, &w1)?;
        Ok(Self { w0, w1 })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let ChannelAttentionParams { w0, w1 } = ChannelAttentionParams::zeros(channels, reduction);
        Self { w0, w1 }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let ChannelAttentionParams { w0, w1 } =
            ChannelAttentionParams::random(channels, reduction, rng);
        Self { w0, w1 }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn channels(&self) -> usize {
        self.w0.cols()
    }

    pub fn record(&self, tape: &mut GradTape) -> MlpVars {
        MlpVars {
            w0: tape.leaf(self.w0.to_feature_map()),
            w1: tape.leaf(self.w1.to_feature_map()),
        }
    }
}

/// Tape handles for a bottleneck MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w0: Var,
    pub w1: Var,
}

/// Convolution over the stacked `[avg; max]` channel pools. `kernel` is `(1, 2, k, k)`, k odd.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    kernel: FeatureMap,
    bias: f64,
}

impl SpatialAttentionParams {
    pub fn new(kernel: FeatureMap, bias: f64) -> Result<Self> {
        let [o, i, kh, kw] = kernel.dims();
        if o != 1 || i != 2 || kh != kw {
            return Err(shape_err!(
                "spatial kernel must be (1, 2, k, k), got {:?}",
                kernel.dims()
            ));
        }
        if kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial kernel size must be odd, got {kh}"
            )));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(k: usize) -> Result<Self> {
        Self::new(FeatureMap::zeros([1, 2, k, k]), 0.0)
    }

    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let scale = 1.0 / ((2 * k * k) as f64).sqrt();
        let dist = Uniform::new_inclusive(-scale, scale);
        let kernel = FeatureMap::from_fn([1, 2, k, k], |_, _, _, _| dist.sample(rng));
        let bias = dist.sample(rng);
        Self::new(kernel, bias)
    }

    pub fn kernel(&self) -> &FeatureMap {
        &self.kernel
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.height()
    }

    pub fn record(&self, tape: &mut GradTape) -> SpatialVars {
        SpatialVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(FeatureMap::scalar(self.bias)),
            pad: (self.kernel_size() - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub kernel: Var,
    pub bias: Var,
    pub pad: usize,
}

fn check_channels(tape: &GradTape, f: Var, expected: usize) -> Result<()> {
    let c = tape.value(f)?.channels();
    if c != expected {
        return Err(shape_err!(
            "attention parameters expect {expected} channels, feature map has {c}"
        ));
    }
    Ok(())
}

fn mlp_on(tape: &mut GradTape, pooled: Var, p: &MlpVars) -> Result<Var> {
    let hidden = tape.dense(pooled, p.w0, None, Activation::Relu)?;
    tape.dense(hidden, p.w1, None, Activation::None)
}

/// `σ(MLP(avgpool F) + MLP(maxpool F))`, shape `(n, c, 1, 1)`.
pub fn channel_attention_on(tape: &mut GradTape, f: Var, p: &MlpVars) -> Result<Var> {
    let channels = tape.value(p.w0)?.channels();
    check_channels(tape, f, channels)?;
    let avg = tape.pool_global(f, PoolMode::Avg)?;
    let max = tape.pool_global(f, PoolMode::Max)?;
    let a = mlp_on(tape, avg, p)?;
    let m = mlp_on(tape, max, p)?;
    let s = tape.add(a, m)?;
    tape.sigmoid(s)
}

/// `σ(conv([avg_c F; max_c F]))`, shape `(n, 1, h, w)`.
pub fn spatial_attention_on(tape: &mut GradTape, f: Var, p: &SpatialVars) -> Result<Var> {
    let avg = tape.pool_channelwise(f, PoolMode::Avg)?;
    let max = tape.pool_channelwise(f, PoolMode::Max)?;
    let stacked = tape.concat_channels(avg, max)?;
    let logits = tape.conv2d(stacked, p.kernel, Some(p.bias), 1, p.pad)?;
    tape.sigmoid(logits)
}

pub fn cbam_on(tape: &mut GradTape, f: Var, ca: &MlpVars, sa: &SpatialVars) -> Result<Var> {
    let gate = channel_attention_on(tape, f, ca)?;
    let refined = tape.mul(f, gate)?;
    let gate = spatial_attention_on(tape, refined, sa)?;
    tape.mul(refined, gate)
}

pub fn se_on(tape: &mut GradTape, f: Var, p: &MlpVars) -> Result<Var> {
    let channels = tape.value(p.w0)?.channels();
    check_channels(tape, f, channels)?;
    let avg = tape.pool_global(f, PoolMode::Avg)?;
    let excite = mlp_on(tape, avg, p)?;
    let gate = tape.sigmoid(excite)?;
    tape.mul(f, gate)
}

fn evaluate(
    f: &FeatureMap,
    build: impl FnOnce(&mut GradTape, Var) -> Result<Var>,
) -> Result<FeatureMap> {
    let mut tape = GradTape::new();
    let x = tape.leaf(f.clone());
    let y = build(&mut tape, x)?;
    Ok(tape.value(y)?.clone())
}

pub fn channel_attention(f: &FeatureMap, p: &ChannelAttentionParams) -> Result<FeatureMap> {
    evaluate(f, |t, x| {
        let v = p.record(t);
        channel_attention_on(t, x, &v)
    })
}

pub fn spatial_attention(f: &FeatureMap, p: &SpatialAttentionParams) -> Result<FeatureMap> {
    evaluate(f, |t, x| {
        let v = p.record(t);
        spatial_attention_on(t, x, &v)
    })
}

/// `F' = F ⊗ M_ca(F)`, then `F'' = F' ⊗ M_sa(F')`.
pub fn apply_cbam(
    f: &FeatureMap,
    ca: &ChannelAttentionParams,
    sa: &SpatialAttentionParams,
) -> Result<FeatureMap> {
    evaluate(f, |t, x| {
        let cv = ca.record(t);
        let sv = sa.record(t);
        cbam_on(t, x, &cv, &sv)
    })
}

pub fn apply_se(f: &FeatureMap, p: &SeParams) -> Result<FeatureMap> {
    evaluate(f, |t, x| {
        let v = p.record(t);
        se_on(t, x, &v)
    })
}

/// One attention hook in the neck.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionBlock {
    Cbam {
        channel: ChannelAttentionParams,
        spatial: SpatialAttentionParams,
    },
    Se(SeParams),
}

impl AttentionBlock {
    pub fn channels(&self) -> usize {
        match self {
            AttentionBlock::Cbam { channel, .. } => channel.channels(),
            AttentionBlock::Se(p) => p.channels(),
        }
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap> {
        match self {
            AttentionBlock::Cbam { channel, spatial } => apply_cbam(f, channel, spatial),
            AttentionBlock::Se(p) => apply_se(f, p),
        }
    }

    pub fn apply_on(&self, tape: &mut GradTape, f: Var) -> Result<Var> {
        match self {
            AttentionBlock::Cbam { channel, spatial } => {
                let cv = channel.record(tape);
                let sv = spatial.record(tape);
                cbam_on(tape, f, &cv, &sv)
            }
            AttentionBlock::Se(p) => {
                let v = p.record(tape);
                se_on(tape, f, &v)
            }
        }
    }

    pub fn store(&self, prefix: &str, out: &mut ParamStore) {
        match self {
            AttentionBlock::Cbam { channel, spatial } => {
                out.insert(format!("{prefix}.ca.w0"), TensorFile::from(channel.w0()));
                out.insert(format!("{prefix}.ca.w1"), TensorFile::from(channel.w1()));
                out.insert(format!("{prefix}.sa.kernel"), TensorFile::from(spatial.kernel()));
                out.insert(format!("{prefix}.sa.bias"), TensorFile::vector(vec![spatial.bias()]));
            }
            AttentionBlock::Se(p) => {
                out.insert(format!("{prefix}.se.w0"), TensorFile::from(p.w0()));
                out.insert(format!("{prefix}.se.w1"), TensorFile::from(p.w1()));
            }
        }
    }

    pub fn load_cbam(prefix: &str, store: &ParamStore) -> Result<Self> {
        let channel = ChannelAttentionParams::new(
            store.matrix(&format!("{prefix}.ca.w0"))?,
            store.matrix(&format!("{prefix}.ca.w1"))?,
        )?;
        let bias = store.vector(&format!("{prefix}.sa.bias"))?;
        let bias = match bias.as_slice() {
            [b] => *b,
            _ => return Err(shape_err!("{prefix}.sa.bias must hold one value")),
        };
        let spatial =
            SpatialAttentionParams::new(store.feature_map(&format!("{prefix}.sa.kernel"))?, bias)?;
        Ok(AttentionBlock::Cbam { channel, spatial })
    }

    pub fn load_se(prefix: &str, store: &ParamStore) -> Result<Self> {
        Ok(AttentionBlock::Se(SeParams::new(
            store.matrix(&format!("{prefix}.se.w0"))?,
            store.matrix(&format!("{prefix}.se.w1"))?,
        )?))
    }
}
