//! Central finite-difference verification of the tape's analytic gradients.
//!
//! Each check draws a random small configuration, records the block on a
//! tape, seeds the reverse sweep with `sum(out ⊙ R)` for a random `R`, and
//! compares every input's gradient against `(L(x + h) − L(x − h)) / 2h`.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cbam_on, channel_attention_on, se_on, spatial_attention_on, MlpVars, SpatialVars,
};
use crate::error::Result;
use crate::neck::{
    assemble_neck_on, dbl_on, hypercolumn_on, stairstep_on, AttentionKind, DblVars, NeckConfig,
    NeckParams, Placement,
};
use crate::tensor::{Activation, FeatureMap, GradTape, PoolMode, UpsampleMode, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub cases: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Scales analytic gradients by 1.01; for exercising the failure path.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            cases: 20,
            seed: 42,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub options: GradCheckOptions,
    pub ops: Vec<OpResult>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>5} {:>14}  result\n", "op", "cases", "max_rel_err");
        for r in &self.ops {
            out.push_str(&format!(
                "{:<22} {:>5} {:>14.3e}  {}\n",
                r.op,
                r.cases,
                r.max_rel_error,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

type Build = Box<dyn Fn(&mut GradTape, &[Var]) -> Result<Var>>;

/// A differentiable graph over `inputs`, all of which are checked.
pub struct Case {
    pub inputs: Vec<FeatureMap>,
    pub build: Build,
}

impl Case {
    fn forward(&self, inputs: &[FeatureMap]) -> Result<(GradTape, Vec<Var>, Var)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }
}

fn weighted_loss(tape: &mut GradTape, out: Var, weights: &FeatureMap) -> Result<Var> {
    let r = tape.leaf(weights.clone());
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Largest relative error over every element of every input.
pub fn check_case(case: &Case, rng: &mut impl Rng, step: f64, inject_fault: bool) -> Result<f64> {
    let (mut tape, vars, out) = case.forward(&case.inputs)?;
    let weights = uniform(tape.value(out)?.dims(), rng);
    let loss = weighted_loss(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let loss_at = |inputs: &[FeatureMap]| -> Result<f64> {
        let (mut t, _, o) = case.forward(inputs)?;
        let l = weighted_loss(&mut t, o, &weights)?;
        Ok(t.value(l)?.data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = case.inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v)?;
        for e in 0..probe[k].len() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let plus = loss_at(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let minus = loss_at(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let mut a = analytic.data()[e];
            if inject_fault {
                a *= 1.01;
            }
            let denom = a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn uniform(dims: [usize; 4], rng: &mut impl Rng) -> FeatureMap {
    let d = Uniform::new_inclusive(-1.0, 1.0);
    FeatureMap::from_fn(dims, |_, _, _, _| d.sample(rng))
}

/// Gap between the largest value and the runner-up.
fn min_gap(values: impl Iterator<Item = f64>) -> f64 {
    let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in values {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    best - second
}

/// Redraws until every spatial plane and every channel column has a unique maximum.
fn unique_maxima(dims: [usize; 4], margin: f64, rng: &mut impl Rng) -> FeatureMap {
    loop {
        let x = uniform(dims, rng);
        let [n, c, h, w] = dims;
        let plane = h * w;
        let planes_ok = plane < 2
            || x.data().chunks(plane).all(|p| min_gap(p.iter().copied()) > margin);
        let cols_ok = c < 2
            || (0..n).all(|b| {
                (0..plane).all(|s| min_gap((0..c).map(|ch| x.data()[(b * c + ch) * plane + s])) > margin)
            });
        if planes_ok && cols_ok {
            return x;
        }
    }
}

fn dims(rng: &mut impl Rng, n: (usize, usize), c: (usize, usize), hw: (usize, usize)) -> [usize; 4] {
    [
        rng.gen_range(n.0..=n.1),
        rng.gen_range(c.0..=c.1),
        rng.gen_range(hw.0..=hw.1),
        rng.gen_range(hw.0..=hw.1),
    ]
}

fn mlp_inputs(c: usize, rng: &mut impl Rng) -> (FeatureMap, FeatureMap) {
    let hidden = (c / [1, 2].into_iter().filter(|r| c % r == 0).max().unwrap()).max(1);
    (uniform([hidden, c, 1, 1], rng), uniform([c, hidden, 1, 1], rng))
}

/// Every checked operation with a generator of random cases.
pub fn all_ops() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("conv2d", conv_case),
        ("pool_global_avg", |r| pool_global_case(r, PoolMode::Avg)),
        ("pool_global_max", |r| pool_global_case(r, PoolMode::Max)),
        ("pool_channel_avg", |r| pool_channel_case(r, PoolMode::Avg)),
        ("pool_channel_max", |r| pool_channel_case(r, PoolMode::Max)),
        ("dense", dense_case),
        ("upsample_nearest", |r| upsample_case(r, UpsampleMode::Nearest)),
        ("upsample_bilinear", |r| upsample_case(r, UpsampleMode::Bilinear)),
        ("elementwise_mul", elementwise_case),
        ("sigmoid_leaky", activation_case),
        ("channel_attention", channel_attention_case),
        ("spatial_attention", spatial_attention_case),
        ("cbam", cbam_case),
        ("se", se_case),
        ("dbl", dbl_case),
        ("stairstep_nearest", |r| stairstep_case(r, UpsampleMode::Nearest)),
        ("stairstep_bilinear", |r| stairstep_case(r, UpsampleMode::Bilinear)),
        ("hypercolumn_bilinear", hypercolumn_case),
        ("neck_placement_a", neck_case),
    ]
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let [n, c, mut h, mut w] = dims(rng, (1, 2), (1, 3), (3, 6));
    // keep (len + 2 pad - k) divisible by the stride
    while (h + 2 * pad - k) % stride != 0 {
        h += 1;
    }
    while (w + 2 * pad - k) % stride != 0 {
        w += 1;
    }
    let oc = rng.gen_range(1..=3);
    Case {
        inputs: vec![
            uniform([n, c, h, w], rng),
            uniform([oc, c, k, k], rng),
            uniform([1, oc, 1, 1], rng),
        ],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
    }
}

fn pool_global_case(rng: &mut ChaCha8Rng, mode: PoolMode) -> Case {
    let d = dims(rng, (1, 2), (1, 3), (2, 4));
    Case {
        inputs: vec![unique_maxima(d, 1e-3, rng)],
        build: Box::new(move |t, v| t.pool_global(v[0], mode)),
    }
}

fn pool_channel_case(rng: &mut ChaCha8Rng, mode: PoolMode) -> Case {
    let d = dims(rng, (1, 2), (2, 4), (2, 4));
    Case {
        inputs: vec![unique_maxima(d, 1e-3, rng)],
        build: Box::new(move |t, v| t.pool_channelwise(v[0], mode)),
    }
}

fn dense_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=4));
    let act = if rng.gen_bool(0.5) { Activation::Relu } else { Activation::None };
    Case {
        inputs: vec![
            uniform([n, i, 1, 1], rng),
            uniform([o, i, 1, 1], rng),
            uniform([1, o, 1, 1], rng),
        ],
        build: Box::new(move |t, v| t.dense(v[0], v[1], Some(v[2]), act)),
    }
}

fn upsample_case(rng: &mut ChaCha8Rng, mode: UpsampleMode) -> Case {
    let d = dims(rng, (1, 2), (1, 2), (1, 4));
    let factor = rng.gen_range(2..=3);
    Case {
        inputs: vec![uniform(d, rng)],
        build: Box::new(move |t, v| t.upsample(v[0], factor, mode)),
    }
}

fn elementwise_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (1, 3), (2, 4));
    let (gate_c, gate_s) = ([d[0], d[1], 1, 1], [d[0], 1, d[2], d[3]]);
    Case {
        inputs: vec![uniform(d, rng), uniform(gate_c, rng), uniform(gate_s, rng)],
        build: Box::new(|t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.mul(a, v[2])?;
            t.add(b, v[0])
        }),
    }
}

fn activation_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (1, 3), (2, 4));
    let slope = rng.gen_range(0.01..0.3);
    Case {
        inputs: vec![uniform(d, rng)],
        build: Box::new(move |t, v| {
            let s = t.sigmoid(v[0])?;
            let l = t.leaky_relu(v[0], slope)?;
            t.mul(s, l)
        }),
    }
}

fn channel_attention_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (2, 6), (2, 4));
    let (w0, w1) = mlp_inputs(d[1], rng);
    Case {
        inputs: vec![unique_maxima(d, 1e-3, rng), w0, w1],
        build: Box::new(|t, v| channel_attention_on(t, v[0], &MlpVars { w0: v[1], w1: v[2] })),
    }
}

fn spatial_vars(v: &[Var], k: usize) -> SpatialVars {
    SpatialVars {
        kernel: v[0],
        bias: v[1],
        pad: (k - 1) / 2,
    }
}

fn spatial_attention_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (2, 4), (3, 6));
    let k = [3, 5, 7][rng.gen_range(0..3)];
    Case {
        inputs: vec![unique_maxima(d, 1e-3, rng), uniform([1, 2, k, k], rng), uniform([1, 1, 1, 1], rng)],
        build: Box::new(move |t, v| spatial_attention_on(t, v[0], &spatial_vars(&v[1..], k))),
    }
}

fn cbam_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (2, 4), (3, 5));
    let (w0, w1) = mlp_inputs(d[1], rng);
    let k = [3, 7][rng.gen_range(0..2)];
    Case {
        inputs: vec![
            unique_maxima(d, 1e-2, rng),
            w0,
            w1,
            uniform([1, 2, k, k], rng),
            uniform([1, 1, 1, 1], rng),
        ],
        build: Box::new(move |t, v| {
            cbam_on(t, v[0], &MlpVars { w0: v[1], w1: v[2] }, &spatial_vars(&v[3..], k))
        }),
    }
}

fn se_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (2, 6), (2, 4));
    let (w0, w1) = mlp_inputs(d[1], rng);
    Case {
        inputs: vec![uniform(d, rng), w0, w1],
        build: Box::new(|t, v| se_on(t, v[0], &MlpVars { w0: v[1], w1: v[2] })),
    }
}

fn dbl_case(rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng, (1, 2), (1, 3), (3, 5));
    let oc = rng.gen_range(1..=3);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let scale = FeatureMap::from_fn([1, oc, 1, 1], |_, _, _, _| rng.gen_range(0.5..1.5));
    let shift = uniform([1, oc, 1, 1], rng).scale(0.1);
    let slope = 0.1;
    Case {
        inputs: vec![uniform(d, rng), uniform([oc, d[1], k, k], rng)],
        build: Box::new(move |t, v| {
            let vars = DblVars {
                kernel: v[1],
                scale: t.leaf(scale.clone()),
                shift: t.leaf(shift.clone()),
                pad: (k - 1) / 2,
                slope,
            };
            dbl_on(t, v[0], &vars)
        }),
    }
}

fn pyramid_inputs(rng: &mut ChaCha8Rng, delta: usize) -> (usize, Vec<FeatureMap>) {
    let levels = rng.gen_range(2..=3);
    let base = 1 << (levels - 1);
    let n = rng.gen_range(1..=2);
    let mut inputs = Vec::new();
    for i in 0..levels {
        let c = rng.gen_range(1..=3);
        let s = base >> i;
        inputs.push(uniform([n, c, s * 2, s * 2], rng));
    }
    let projections: Vec<FeatureMap> = inputs
        .iter()
        .map(|x| uniform([delta, x.channels(), 1, 1], rng))
        .collect();
    inputs.extend(projections);
    (levels, inputs)
}

fn stairstep_case(rng: &mut ChaCha8Rng, mode: UpsampleMode) -> Case {
    let delta = rng.gen_range(1..=3);
    let (levels, inputs) = pyramid_inputs(rng, delta);
    Case {
        inputs,
        build: Box::new(move |t, v| {
            stairstep_on(t, &v[..levels], &v[levels..], mode, |_, acc, _| Ok(acc))
        }),
    }
}

fn hypercolumn_case(rng: &mut ChaCha8Rng) -> Case {
    let delta = rng.gen_range(1..=3);
    let (levels, inputs) = pyramid_inputs(rng, delta);
    Case {
        inputs,
        build: Box::new(move |t, v| {
            hypercolumn_on(t, &v[..levels], &v[levels..], UpsampleMode::Bilinear)
        }),
    }
}

fn neck_case(rng: &mut ChaCha8Rng) -> Case {
    let cfg = NeckConfig {
        level_channels: vec![rng.gen_range(2..=3), rng.gen_range(2..=4), 4],
        delta: 2,
        placement: Placement::A,
        attention: AttentionKind::Cbam,
        reduction: 2,
        spatial_kernel: 3,
        dbl_kernel: 1,
        ..NeckConfig::default()
    };
    let params = NeckParams::random(&cfg, rng).expect("valid config");
    let inputs = cfg
        .level_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| uniform([1, c, 8 >> i, 8 >> i], rng))
        .collect();
    Case {
        inputs,
        build: Box::new(move |t, v| assemble_neck_on(t, v, &cfg, &params)),
    }
}

/// Runs every op in [`all_ops`] over `opts.cases` random configurations.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut ops = Vec::new();
    for (k, (name, make)) in all_ops().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64 * 0x9E37_79B9));
        let mut worst: f64 = 0.0;
        for _ in 0..opts.cases {
            let case = make(&mut rng);
            worst = worst.max(check_case(&case, &mut rng, opts.step, opts.inject_fault)?);
        }
        ops.push(OpResult {
            op: name.to_string(),
            cases: opts.cases,
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    let passed = ops.iter().all(|o| o.passed);
    Ok(GradCheckReport {
        options: opts.clone(),
        ops,
        passed,
    })
}
