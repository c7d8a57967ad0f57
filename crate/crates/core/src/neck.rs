//! DBL blocks, hypercolumn and stairstep fusion, and neck assembly with
//! configurable attention hooks.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionBlock, ChannelAttentionParams, SeParams, SpatialAttentionParams, DEFAULT_REDUCTION,
    DEFAULT_SPATIAL_KERNEL,
};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{FeatureMap, GradTape, ParamStore, TensorFile, UpsampleMode, Var};

/// Conv (no bias) + inference-mode batch norm + leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DblParams {
    kernel: FeatureMap,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
    slope: f64,
}

impl DblParams {
    pub fn new(
        kernel: FeatureMap,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
        slope: f64,
    ) -> Result<Self> {
        let [out, _, kh, kw] = kernel.dims();
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("DBL kernel must be square and odd, got {:?}", kernel.dims()));
        }
        for (name, v) in [
            ("gamma", &gamma),
            ("beta", &beta),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if v.len() != out {
                return Err(shape_err!("{name} has {} entries for {out} channels", v.len()));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("batch-norm eps must be > 0, got {eps}")));
        }
        if running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("running variance must be >= 0".into()));
        }
        Ok(Self {
            kernel,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            slope,
        })
    }

    /// Identity-normalised block: `gamma = 1`, `beta = 0`, `mean = 0`, `var = 1`.
    pub fn with_kernel(kernel: FeatureMap, eps: f64, slope: f64) -> Result<Self> {
        let out = kernel.batch();
        Self::new(kernel, vec![1.0; out], vec![0.0; out], vec![0.0; out], vec![1.0; out], eps, slope)
    }

    pub fn random<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        k: usize,
        eps: f64,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / ((in_c * k * k) as f64).sqrt();
        let w = Uniform::new_inclusive(-scale, scale);
        let kernel = FeatureMap::from_fn([out_c, in_c, k, k], |_, _, _, _| w.sample(rng));
        let near_one = Uniform::new_inclusive(0.5, 1.5);
        let small = Uniform::new_inclusive(-0.1, 0.1);
        let gamma = (0..out_c).map(|_| near_one.sample(rng)).collect();
        let beta = (0..out_c).map(|_| small.sample(rng)).collect();
        let mean = (0..out_c).map(|_| small.sample(rng)).collect();
        let var = (0..out_c).map(|_| near_one.sample(rng)).collect();
        Self::new(kernel, gamma, beta, mean, var, eps, slope)
    }

    pub fn kernel(&self) -> &FeatureMap {
        &self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.channels()
    }

    /// Per-channel `(scale, shift)` of the folded batch norm.
    pub fn folded_norm(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn record(&self, tape: &mut GradTape) -> DblVars {
        let c = self.out_channels();
        let (scale, shift) = self.folded_norm();
        DblVars {
            kernel: tape.leaf(self.kernel.clone()),
            scale: tape.leaf(FeatureMap::new([1, c, 1, 1], scale).expect("dims")),
            shift: tape.leaf(FeatureMap::new([1, c, 1, 1], shift).expect("dims")),
            pad: (self.kernel.height() - 1) / 2,
            slope: self.slope,
        }
    }

    fn store(&self, prefix: &str, out: &mut ParamStore) {
        out.insert(format!("{prefix}.kernel"), TensorFile::from(&self.kernel));
        out.insert(format!("{prefix}.gamma"), TensorFile::vector(self.gamma.clone()));
        out.insert(format!("{prefix}.beta"), TensorFile::vector(self.beta.clone()));
        out.insert(format!("{prefix}.mean"), TensorFile::vector(self.running_mean.clone()));
        out.insert(format!("{prefix}.var"), TensorFile::vector(self.running_var.clone()));
    }

    fn load(prefix: &str, store: &ParamStore, eps: f64, slope: f64) -> Result<Self> {
        Self::new(
            store.feature_map(&format!("{prefix}.kernel"))?,
            store.vector(&format!("{prefix}.gamma"))?,
            store.vector(&format!("{prefix}.beta"))?,
            store.vector(&format!("{prefix}.mean"))?,
            store.vector(&format!("{prefix}.var"))?,
            eps,
            slope,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DblVars {
    pub kernel: Var,
    pub scale: Var,
    pub shift: Var,
    pub pad: usize,
    pub slope: f64,
}

pub fn dbl_on(tape: &mut GradTape, x: Var, p: &DblVars) -> Result<Var> {
    let conv = tape.conv2d(x, p.kernel, None, 1, p.pad)?;
    let scaled = tape.mul(conv, p.scale)?;
    let normed = tape.add(scaled, p.shift)?;
    tape.leaky_relu(normed, p.slope)
}

/// `leaky(bn(conv(x)))` with running statistics.
pub fn dbl(x: &FeatureMap, p: &DblParams) -> Result<FeatureMap> {
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let vars = p.record(&mut tape);
    let y = dbl_on(&mut tape, xv, &vars)?;
    Ok(tape.value(y)?.clone())
}

fn check_projection(x: &FeatureMap, weights: &FeatureMap, delta: usize) -> Result<()> {
    let [out, inp, kh, kw] = weights.dims();
    if (kh, kw) != (1, 1) {
        return Err(shape_err!("projection must be a 1x1 conv, got {:?}", weights.dims()));
    }
    if out != delta {
        return Err(shape_err!("projection has {out} output channels, expected {delta}"));
    }
    if inp != x.channels() {
        return Err(shape_err!(
            "projection expects {inp} input channels, map has {}",
            x.channels()
        ));
    }
    Ok(())
}

/// 1x1 convolution to `delta` channels.
pub fn project_m(x: &FeatureMap, weights: &FeatureMap, delta: usize) -> Result<FeatureMap> {
    check_projection(x, weights, delta)?;
    crate::tensor::conv2d(x, weights, None, 1, 0)
}

/// Backbone levels ordered from highest resolution (`F_1`) to lowest (`F_n`).
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidInput {
    levels: Vec<FeatureMap>,
}

impl PyramidInput {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Pyramid("no levels".into()))?;
        for (i, pair) in levels.windows(2).enumerate() {
            let (hi, lo) = (pair[0].dims(), pair[1].dims());
            if hi[0] != first.batch() || lo[0] != first.batch() {
                return Err(Error::Pyramid(format!(
                    "batch sizes differ: level {} is {:?}, level {} is {:?}",
                    i + 1,
                    hi,
                    i + 2,
                    lo
                )));
            }
            if hi[2] != 2 * lo[2] || hi[3] != 2 * lo[3] {
                return Err(Error::Pyramid(format!(
                    "level {} spatial {}x{} is not twice level {} spatial {}x{} (dims {:?} vs {:?})",
                    i + 1,
                    hi[2],
                    hi[3],
                    i + 2,
                    lo[2],
                    lo[3],
                    hi,
                    lo
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    fn check_projections(&self, m: &[FeatureMap]) -> Result<usize> {
        if m.len() != self.levels.len() {
            return Err(shape_err!(
                "{} projections for {} levels",
                m.len(),
                self.levels.len()
            ));
        }
        let delta = m[0].batch();
        for (x, w) in self.levels.iter().zip(m) {
            check_projection(x, w, delta)?;
        }
        Ok(delta)
    }

    fn record(&self, tape: &mut GradTape) -> Vec<Var> {
        self.levels.iter().map(|l| tape.leaf(l.clone())).collect()
    }
}

/// `Σ_i u(m(F_i), 2^(i-1))`: every projected level resized straight to `F_1`'s resolution.
pub fn hypercolumn_on(
    tape: &mut GradTape,
    levels: &[Var],
    m: &[Var],
    mode: UpsampleMode,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, (&x, &w)) in levels.iter().zip(m).enumerate() {
        let projected = tape.conv2d(x, w, None, 1, 0)?;
        let resized = tape.upsample(projected, 1 << i, mode)?;
        acc = Some(match acc {
            None => resized,
            Some(a) => tape.add(a, resized)?,
        });
    }
    acc.ok_or_else(|| Error::Pyramid("no levels".into()))
}

/// Folds from the lowest resolution upward: `acc ← u(acc, 2) + m(F_i)`,
/// calling `after_add(tape, acc, step)` on the accumulator after every addition.
pub fn stairstep_on(
    tape: &mut GradTape,
    levels: &[Var],
    m: &[Var],
    mode: UpsampleMode,
    mut after_add: impl FnMut(&mut GradTape, Var, usize) -> Result<Var>,
) -> Result<Var> {
    let n = levels.len();
    if n == 0 || m.len() != n {
        return Err(Error::Pyramid(format!("{n} levels with {} projections", m.len())));
    }
    let mut acc = tape.conv2d(levels[n - 1], m[n - 1], None, 1, 0)?;
    for (step, i) in (0..n - 1).rev().enumerate() {
        let up = tape.upsample(acc, 2, mode)?;
        let projected = tape.conv2d(levels[i], m[i], None, 1, 0)?;
        let sum = tape.add(up, projected)?;
        acc = after_add(tape, sum, step)?;
    }
    Ok(acc)
}

fn run_fusion(
    p: &PyramidInput,
    m_weights: &[FeatureMap],
    build: impl FnOnce(&mut GradTape, &[Var], &[Var]) -> Result<Var>,
) -> Result<FeatureMap> {
    p.check_projections(m_weights)?;
    let mut tape = GradTape::new();
    let levels = p.record(&mut tape);
    let m: Vec<Var> = m_weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let out = build(&mut tape, &levels, &m)?;
    Ok(tape.value(out)?.clone())
}

pub fn hypercolumn_fuse(
    p: &PyramidInput,
    m_weights: &[FeatureMap],
    mode: UpsampleMode,
) -> Result<FeatureMap> {
    run_fusion(p, m_weights, |t, l, m| hypercolumn_on(t, l, m, mode))
}

pub fn stairstep_fuse(
    p: &PyramidInput,
    m_weights: &[FeatureMap],
    mode: UpsampleMode,
) -> Result<FeatureMap> {
    run_fusion(p, m_weights, |t, l, m| {
        stairstep_on(t, l, m, mode, |_, acc, _| Ok(acc))
    })
}

/// Where attention blocks are hooked into the neck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// On the accumulator after every fusion addition.
    A,
    /// After each per-level DBL.
    B,
    /// On the raw backbone levels, before DBL.
    C,
    /// Once, on the final fused map.
    D,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Cbam,
    Se,
    None,
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Placement::A),
            "b" => Ok(Placement::B),
            "c" => Ok(Placement::C),
            "d" => Ok(Placement::D),
            "none" => Ok(Placement::None),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::A => "a",
            Placement::B => "b",
            Placement::C => "c",
            Placement::D => "d",
            Placement::None => "none",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbam" => Ok(AttentionKind::Cbam),
            "se" => Ok(AttentionKind::Se),
            "none" => Ok(AttentionKind::None),
            other => Err(Error::Config(format!("unknown attention `{other}`"))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Cbam => "cbam",
            AttentionKind::Se => "se",
            AttentionKind::None => "none",
        })
    }
}

pub(crate) fn parse_upsample(s: &str) -> Result<UpsampleMode> {
    match s {
        "nearest" => Ok(UpsampleMode::Nearest),
        "bilinear" => Ok(UpsampleMode::Bilinear),
        other => Err(Error::Config(format!("unknown upsample mode `{other}`"))),
    }
}

pub(crate) fn upsample_name(m: UpsampleMode) -> &'static str {
    match m {
        UpsampleMode::Nearest => "nearest",
        UpsampleMode::Bilinear => "bilinear",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeckConfig {
    /// Channel width of each backbone level, highest resolution first. DBL keeps the width.
    pub level_channels: Vec<usize>,
    pub delta: usize,
    pub placement: Placement,
    pub attention: AttentionKind,
    pub upsample: UpsampleMode,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub dbl_kernel: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![256, 512, 1024],
            delta: 128,
            placement: Placement::A,
            attention: AttentionKind::Cbam,
            upsample: UpsampleMode::Nearest,
            reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            dbl_kernel: 3,
            leaky_slope: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NeckConfig {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() {
            return Err(Error::Config("at least one level is required".into()));
        }
        if self.level_channels.contains(&0) {
            return Err(Error::Config("level widths must be positive".into()));
        }
        if self.delta == 0 {
            return Err(Error::Config("delta must be at least 1".into()));
        }
        if self.spatial_kernel % 2 == 0 || self.dbl_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be > 0".into()));
        }
        Ok(())
    }

    /// True when the configuration inserts any attention block.
    pub fn hooks_enabled(&self) -> bool {
        self.placement != Placement::None && self.attention != AttentionKind::None
    }

    /// Channel width seen by each attention hook, in evaluation order.
    pub fn hook_channels(&self) -> Vec<usize> {
        if !self.hooks_enabled() {
            return Vec::new();
        }
        match self.placement {
            Placement::A => vec![self.delta; self.levels().saturating_sub(1)],
            Placement::B | Placement::C => self.level_channels.clone(),
            Placement::D => vec![self.delta],
            Placement::None => Vec::new(),
        }
    }

    /// Parses `key=value` lines; unknown keys are rejected, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = NeckConfig::default();
        let mut levels: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} `{value}`", lineno + 1));
            match key {
                "levels" => levels = Some(value.parse().map_err(|_| bad("levels"))?),
                "widths" => {
                    cfg.level_channels = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("widths"))?
                }
                "delta" => cfg.delta = value.parse().map_err(|_| bad("delta"))?,
                "placement" => cfg.placement = value.parse()?,
                "attention" => cfg.attention = value.parse()?,
                "upsample" => cfg.upsample = parse_upsample(value)?,
                "reduction" => cfg.reduction = value.parse().map_err(|_| bad("reduction"))?,
                "spatial_kernel" => {
                    cfg.spatial_kernel = value.parse().map_err(|_| bad("spatial_kernel"))?
                }
                "dbl_kernel" => cfg.dbl_kernel = value.parse().map_err(|_| bad("dbl_kernel"))?,
                "leaky_slope" => cfg.leaky_slope = value.parse().map_err(|_| bad("leaky_slope"))?,
                "bn_eps" => cfg.bn_eps = value.parse().map_err(|_| bad("bn_eps"))?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        if let Some(n) = levels {
            if n != cfg.level_channels.len() {
                return Err(Error::Config(format!(
                    "levels={n} but {} widths given",
                    cfg.level_channels.len()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.level_channels.iter().map(|w| w.to_string()).collect();
        format!(
            "levels={}\nwidths={}\ndelta={}\nplacement={}\nattention={}\nupsample={}\nreduction={}\nspatial_kernel={}\ndbl_kernel={}\nleaky_slope={}\nbn_eps={}\n",
            self.levels(),
            widths.join(","),
            self.delta,
            self.placement,
            self.attention,
            upsample_name(self.upsample),
            self.reduction,
            self.spatial_kernel,
            self.dbl_kernel,
            self.leaky_slope,
            self.bn_eps
        )
    }
}

/// Every learned tensor of the neck.
#[derive(Clone, Debug, PartialEq)]
pub struct NeckParams {
    pub dbl: Vec<DblParams>,
    pub projections: Vec<FeatureMap>,
    pub attention: Vec<AttentionBlock>,
}

impl NeckParams {
    pub fn random<R: Rng + ?Sized>(cfg: &NeckConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut dbl = Vec::with_capacity(cfg.levels());
        let mut projections = Vec::with_capacity(cfg.levels());
        for &c in &cfg.level_channels {
            dbl.push(DblParams::random(c, c, cfg.dbl_kernel, cfg.bn_eps, cfg.leaky_slope, rng)?);
            let scale = 1.0 / (c as f64).sqrt();
            let w = Uniform::new_inclusive(-scale, scale);
            projections.push(FeatureMap::from_fn([cfg.delta, c, 1, 1], |_, _, _, _| w.sample(rng)));
        }
        let attention = cfg
            .hook_channels()
            .into_iter()
            .map(|c| random_block(cfg, c, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            dbl,
            projections,
            attention,
        })
    }

    /// Parameters whose attention blocks are all zero, i.e. constant gates.
    pub fn with_zero_attention(mut self, cfg: &NeckConfig) -> Result<Self> {
        self.attention = cfg
            .hook_channels()
            .into_iter()
            .map(|c| zero_block(cfg, c))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn check(&self, cfg: &NeckConfig) -> Result<()> {
        cfg.validate()?;
        let n = cfg.levels();
        if self.dbl.len() != n || self.projections.len() != n {
            return Err(Error::Config(format!(
                "config has {n} levels but params hold {} DBL blocks and {} projections",
                self.dbl.len(),
                self.projections.len()
            )));
        }
        for (i, &c) in cfg.level_channels.iter().enumerate() {
            let d = &self.dbl[i];
            if d.in_channels() != c || d.out_channels() != c {
                return Err(Error::Config(format!(
                    "DBL {i} maps {} -> {} channels, level width is {c}",
                    d.in_channels(),
                    d.out_channels()
                )));
            }
            if self.projections[i].dims() != [cfg.delta, c, 1, 1] {
                return Err(Error::Config(format!(
                    "projection {i} has dims {:?}, expected {:?}",
                    self.projections[i].dims(),
                    [cfg.delta, c, 1, 1]
                )));
            }
        }
        let hooks = cfg.hook_channels();
        if hooks.len() != self.attention.len() {
            return Err(Error::Config(format!(
                "placement {} with {} expects {} attention blocks, params hold {}",
                cfg.placement,
                cfg.attention,
                hooks.len(),
                self.attention.len()
            )));
        }
        for (j, (block, &c)) in self.attention.iter().zip(&hooks).enumerate() {
            let kind_ok = matches!(
                (block, cfg.attention),
                (AttentionBlock::Cbam { .. }, AttentionKind::Cbam) | (AttentionBlock::Se(_), AttentionKind::Se)
            );
            if !kind_ok || block.channels() != c {
                return Err(Error::Config(format!(
                    "attention block {j} does not match a {} hook over {c} channels",
                    cfg.attention
                )));
            }
        }
        Ok(())
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (i, d) in self.dbl.iter().enumerate() {
            d.store(&format!("dbl.{i}"), &mut store);
        }
        for (i, m) in self.projections.iter().enumerate() {
            store.insert(format!("m.{i}"), TensorFile::from(m));
        }
        for (j, a) in self.attention.iter().enumerate() {
            a.store(&format!("att.{j}"), &mut store);
        }
        store
    }

    pub fn from_store(cfg: &NeckConfig, store: &ParamStore) -> Result<Self> {
        let n = cfg.levels();
        let dbl = (0..n)
            .map(|i| DblParams::load(&format!("dbl.{i}"), store, cfg.bn_eps, cfg.leaky_slope))
            .collect::<Result<_>>()?;
        let projections = (0..n)
            .map(|i| store.feature_map(&format!("m.{i}")))
            .collect::<Result<_>>()?;
        let attention = (0..cfg.hook_channels().len())
            .map(|j| {
                let prefix = format!("att.{j}");
                match cfg.attention {
                    AttentionKind::Se => AttentionBlock::load_se(&prefix, store),
                    _ => AttentionBlock::load_cbam(&prefix, store),
                }
            })
            .collect::<Result<_>>()?;
        let params = Self {
            dbl,
            projections,
            attention,
        };
        params.check(cfg)?;
        Ok(params)
    }
}

fn random_block<R: Rng + ?Sized>(cfg: &NeckConfig, c: usize, rng: &mut R) -> Result<AttentionBlock> {
    Ok(match cfg.attention {
        AttentionKind::Se => AttentionBlock::Se(SeParams::random(c, cfg.reduction, rng)),
        _ => AttentionBlock::Cbam {
            channel: ChannelAttentionParams::random(c, cfg.reduction, rng),
            spatial: SpatialAttentionParams::random(cfg.spatial_kernel, rng)?,
        },
    })
}

fn zero_block(cfg: &NeckConfig, c: usize) -> Result<AttentionBlock> {
    Ok(match cfg.attention {
        AttentionKind::Se => AttentionBlock::Se(SeParams::zeros(c, cfg.reduction)),
        _ => AttentionBlock::Cbam {
            channel: ChannelAttentionParams::zeros(c, cfg.reduction),
            spatial: SpatialAttentionParams::zeros(cfg.spatial_kernel)?,
        },
    })
}

/// Records the full neck on `tape`. `levels` are the backbone maps, highest resolution first.
pub fn assemble_neck_on(
    tape: &mut GradTape,
    levels: &[Var],
    cfg: &NeckConfig,
    params: &NeckParams,
) -> Result<Var> {
    params.check(cfg)?;
    if levels.len() != cfg.levels() {
        return Err(Error::Config(format!(
            "{} input levels for a {}-level config",
            levels.len(),
            cfg.levels()
        )));
    }
    for (i, (&v, &c)) in levels.iter().zip(&cfg.level_channels).enumerate() {
        let got = tape.value(v)?.channels();
        if got != c {
            return Err(Error::Config(format!("level {i} has {got} channels, config says {c}")));
        }
    }
    let hooks = cfg.hooks_enabled();
    let attn = &params.attention;

    let mut feats = Vec::with_capacity(levels.len());
    for (i, &x) in levels.iter().enumerate() {
        let x = if hooks && cfg.placement == Placement::C {
            attn[i].apply_on(tape, x)?
        } else {
            x
        };
        let vars = params.dbl[i].record(tape);
        let mut y = dbl_on(tape, x, &vars)?;
        if hooks && cfg.placement == Placement::B {
            y = attn[i].apply_on(tape, y)?;
        }
        feats.push(y);
    }
    let m: Vec<Var> = params.projections.iter().map(|w| tape.leaf(w.clone())).collect();
    let fused = stairstep_on(tape, &feats, &m, cfg.upsample, |t, acc, step| {
        if hooks && cfg.placement == Placement::A {
            attn[step].apply_on(t, acc)
        } else {
            Ok(acc)
        }
    })?;
    if hooks && cfg.placement == Placement::D {
        attn[0].apply_on(tape, fused)
    } else {
        Ok(fused)
    }
}

/// Per-level DBL, stairstep fusion to `delta` channels, attention per `cfg.placement`.
pub fn assemble_neck(p: &PyramidInput, cfg: &NeckConfig, params: &NeckParams) -> Result<FeatureMap> {
    let mut tape = GradTape::new();
    let levels = p.record(&mut tape);
    let out = assemble_neck_on(&mut tape, &levels, cfg, params)?;
    Ok(tape.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, elementwise, leaky_relu, upsample, BinaryOp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(dims: [usize; 4], rng: &mut ChaCha8Rng) -> FeatureMap {
        let d = Uniform::new_inclusive(-1.0, 1.0);
        FeatureMap::from_fn(dims, |_, _, _, _| d.sample(rng))
    }

    fn identity_kernel(c: usize) -> FeatureMap {
        FeatureMap::from_fn([c, c, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 })
    }

    fn small_cfg(placement: Placement, attention: AttentionKind) -> NeckConfig {
        NeckConfig {
            level_channels: vec![3, 4, 5],
            delta: 4,
            placement,
            attention,
            reduction: 2,
            spatial_kernel: 3,
            ..NeckConfig::default()
        }
    }

    fn pyramid(rng: &mut ChaCha8Rng, widths: &[usize], base: usize) -> PyramidInput {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| random_map([1, c, base >> i, base >> i], rng))
            .collect();
        PyramidInput::new(levels).unwrap()
    }

    #[test]
    fn dbl_leaks_negative_and_removes_mean() {
        let k = FeatureMap::scalar(1.0);
        let p = DblParams::new(k.clone(), vec![1.0], vec![0.0], vec![0.0], vec![1.0], 1e-300, 0.1)
            .unwrap();
        let y = dbl(&FeatureMap::scalar(-1.0), &p).unwrap();
        assert!((y.data()[0] + 0.1).abs() < 1e-12);
        let p = DblParams::new(k, vec![1.0], vec![0.0], vec![4.0], vec![1.0], 1e-5, 0.1).unwrap();
        assert_eq!(dbl(&FeatureMap::scalar(4.0), &p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn dbl_matches_kernel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_map([2, 3, 5, 5], &mut rng);
        let p = DblParams::random(3, 4, 3, 1e-5, 0.1, &mut rng).unwrap();
        let (scale, shift) = p.folded_norm();
        let conv = conv2d(&x, p.kernel(), None, 1, 1).unwrap();
        let s = FeatureMap::new([1, 4, 1, 1], scale).unwrap();
        let b = FeatureMap::new([1, 4, 1, 1], shift).unwrap();
        let bn = elementwise(&elementwise(&conv, &s, BinaryOp::Mul).unwrap(), &b, BinaryOp::Add).unwrap();
        let expected = leaky_relu(&bn, 0.1);
        assert!(dbl(&x, &p).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn dbl_rejects_bad_norm() {
        let k = FeatureMap::scalar(1.0);
        assert!(DblParams::new(k.clone(), vec![1.0], vec![0.0], vec![0.0], vec![1.0], 0.0, 0.1).is_err());
        assert!(DblParams::new(k, vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 1e-5, 0.1).is_err());
    }

    #[test]
    fn projection_cases() {
        let x = FeatureMap::new([1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let w = FeatureMap::new([1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(project_m(&x, &w, 1).unwrap().data(), &[3.0]);
        assert_eq!(project_m(&x, &identity_kernel(2), 2).unwrap(), x);
        assert!(project_m(&x, &w, 2).is_err());
    }

    #[test]
    fn pyramid_rejects_bad_levels() {
        let a = FeatureMap::zeros([1, 1, 4, 4]);
        let b = FeatureMap::zeros([1, 1, 3, 2]);
        assert!(matches!(PyramidInput::new(vec![a.clone(), b]), Err(Error::Pyramid(_))));
        let c = FeatureMap::zeros([2, 1, 2, 2]);
        assert!(PyramidInput::new(vec![a, c]).is_err());
        assert!(PyramidInput::new(vec![]).is_err());
    }

    #[test]
    fn two_level_fusions_of_ones() {
        let p = PyramidInput::new(vec![
            FeatureMap::full([1, 1, 2, 2], 1.0),
            FeatureMap::full([1, 1, 1, 1], 1.0),
        ])
        .unwrap();
        let m = vec![identity_kernel(1), identity_kernel(1)];
        let s = stairstep_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        let h = hypercolumn_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        assert_eq!(s.data(), &[2.0; 4]);
        assert_eq!(h.data(), &[2.0; 4]);
    }

    #[test]
    fn single_level_is_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_map([1, 3, 4, 4], &mut rng);
        let w = random_map([2, 3, 1, 1], &mut rng);
        let p = PyramidInput::new(vec![x.clone()]).unwrap();
        let expected = project_m(&x, &w, 2).unwrap();
        assert_eq!(stairstep_fuse(&p, &[w.clone()], UpsampleMode::Bilinear).unwrap(), expected);
        assert_eq!(hypercolumn_fuse(&p, &[w], UpsampleMode::Bilinear).unwrap(), expected);
    }

    #[test]
    fn hypercolumn_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = pyramid(&mut rng, &[2, 3, 4], 8);
        let m: Vec<FeatureMap> = [2, 3, 4].iter().map(|&c| random_map([3, c, 1, 1], &mut rng)).collect();
        let got = hypercolumn_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        let expected = FeatureMap::from_fn([1, 3, 8, 8], |n, o, y, x| {
            let mut s = 0.0;
            for (i, (lvl, w)) in p.levels().iter().zip(&m).enumerate() {
                let (ly, lx) = (y >> i, x >> i);
                for c in 0..lvl.channels() {
                    s += w.at(o, c, 0, 0) * lvl.at(n, c, ly, lx);
                }
            }
            s
        });
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn stairstep_differs_from_hypercolumn_under_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = pyramid(&mut rng, &[2, 2, 2], 8);
        let m: Vec<FeatureMap> = (0..3).map(|_| random_map([2, 2, 1, 1], &mut rng)).collect();
        let s = stairstep_fuse(&p, &m, UpsampleMode::Bilinear).unwrap();
        let h = hypercolumn_fuse(&p, &m, UpsampleMode::Bilinear).unwrap();
        assert!(s.max_abs_diff(&h) > 1e-6);
        let s = stairstep_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        let h = hypercolumn_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        assert!(s.max_abs_diff(&h) < 1e-9);
    }

    #[test]
    fn no_attention_is_dbl_then_stairstep() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = small_cfg(Placement::A, AttentionKind::None);
        let params = NeckParams::random(&cfg, &mut rng).unwrap();
        assert!(params.attention.is_empty());
        let p = pyramid(&mut rng, &cfg.level_channels, 8);
        let got = assemble_neck(&p, &cfg, &params).unwrap();
        let dbls = p
            .levels()
            .iter()
            .zip(&params.dbl)
            .map(|(x, d)| dbl(x, d))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let expected =
            stairstep_fuse(&PyramidInput::new(dbls).unwrap(), &params.projections, cfg.upsample)
                .unwrap();
        assert_eq!(got, expected);
        assert_eq!(got.dims(), [1, 4, 8, 8]);
    }

    #[test]
    fn zero_cbam_scales_by_quarter_per_hook() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = pyramid(&mut rng, &[3, 4, 5], 8);
        let none_cfg = small_cfg(Placement::None, AttentionKind::None);
        let base = NeckParams::random(&none_cfg, &mut rng).unwrap();
        let plain = assemble_neck(&p, &none_cfg, &base).unwrap();

        let d_cfg = small_cfg(Placement::D, AttentionKind::Cbam);
        let d_params = base.clone().with_zero_attention(&d_cfg).unwrap();
        let d = assemble_neck(&p, &d_cfg, &d_params).unwrap();
        assert!(d.max_abs_diff(&plain.scale(0.25)) < 1e-14);

        // placement a: acc <- 0.25 * (u(acc) + m(D_i)) after each addition
        let a_cfg = small_cfg(Placement::A, AttentionKind::Cbam);
        let a_params = base.clone().with_zero_attention(&a_cfg).unwrap();
        let a = assemble_neck(&p, &a_cfg, &a_params).unwrap();
        let proj: Vec<FeatureMap> = p
            .levels()
            .iter()
            .zip(&base.dbl)
            .zip(&base.projections)
            .map(|((x, d), w)| project_m(&dbl(x, d).unwrap(), w, 4).unwrap())
            .collect();
        let mut acc = proj[2].clone();
        for i in [1, 0] {
            let up = upsample(&acc, 2, UpsampleMode::Nearest).unwrap();
            acc = elementwise(&up, &proj[i], BinaryOp::Add).unwrap().scale(0.25);
        }
        assert!(a.max_abs_diff(&acc) < 1e-14);
    }

    #[test]
    fn placements_a_and_d_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = pyramid(&mut rng, &[3, 4, 5], 8);
        let a_cfg = small_cfg(Placement::A, AttentionKind::Cbam);
        let d_cfg = small_cfg(Placement::D, AttentionKind::Cbam);
        let a = assemble_neck(&p, &a_cfg, &NeckParams::random(&a_cfg, &mut rng).unwrap()).unwrap();
        let d = assemble_neck(&p, &d_cfg, &NeckParams::random(&d_cfg, &mut rng).unwrap()).unwrap();
        assert!(a.max_abs_diff(&d) > 1e-6);
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a_cfg = small_cfg(Placement::A, AttentionKind::Cbam);
        let params = NeckParams::random(&a_cfg, &mut rng).unwrap();
        let b_cfg = small_cfg(Placement::B, AttentionKind::Cbam);
        let p = pyramid(&mut rng, &[3, 4, 5], 8);
        assert!(matches!(assemble_neck(&p, &b_cfg, &params), Err(Error::Config(_))));
        let se_cfg = small_cfg(Placement::A, AttentionKind::Se);
        assert!(assemble_neck(&p, &se_cfg, &params).is_err());
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let cfg = small_cfg(Placement::C, AttentionKind::Se);
        assert_eq!(NeckConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(NeckConfig::parse("levels=2\nwidths=1,2,3\n").is_err());
        assert!(NeckConfig::parse("colour=blue\n").is_err());
        assert!(NeckConfig::parse("delta=0\n").is_err());
        let parsed = NeckConfig::parse("# comment\nwidths = 4, 8\ndelta=2 # inline\n").unwrap();
        assert_eq!(parsed.level_channels, vec![4, 8]);
        assert_eq!(parsed.delta, 2);
    }

    #[test]
    fn params_round_trip_through_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for attention in [AttentionKind::Cbam, AttentionKind::Se] {
            let cfg = small_cfg(Placement::B, attention);
            let params = NeckParams::random(&cfg, &mut rng).unwrap();
            let store = params.to_store();
            let back = NeckParams::from_store(&cfg, &store).unwrap();
            assert_eq!(back.attention.len(), 3);
            assert_eq!(back.dbl.len(), 3);
        }
    }
}
