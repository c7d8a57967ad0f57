//! Acceptance suite. Runs without the libtest harness so each criterion prints
//! exactly one PASS/FAIL line; the process exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mirrorscope::attention::{self, ChannelAttentionParams, SpatialAttentionParams};
use mirrorscope::gradcheck::{self, GradCheckOptions};
use mirrorscope::image::{write_mask, write_prediction};
use mirrorscope::metrics::{self, ssim, PredictionMap};
use mirrorscope::neck::{
    assemble_neck, hypercolumn_fuse, stairstep_fuse, AttentionKind, NeckConfig, NeckParams, Placement,
    PyramidInput,
};
use mirrorscope::polygon::{decode_vertices, encode_mask_to_polygon, polygon_iou, rasterize_polygon, BinaryMask};
use mirrorscope::tensor::{self as ops, PoolMode, TensorFile, UpsampleMode};
use mirrorscope::{FeatureMap, Matrix};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(1);
    let mut worst = 0.0f64;
    let shapes = 120;
    for _ in 0..shapes {
        let n = rng.gen_range(1..=2);
        let ic = rng.gen_range(1..=4);
        let oc = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2 + 1);
        let h = rng.gen_range(k.max(1)..=9);
        let w = rng.gen_range(k.max(1)..=9);
        // keep the output length integral for the chosen stride
        let h = h + (h + 2 * pad - k) % stride;
        let w = w + (w + 2 * pad - k) % stride;
        let x = common::random_map(&mut rng, [n, ic, h, w]);
        let kern = common::random_map(&mut rng, [oc, ic, k, k]);
        let bias: Vec<f64> = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let with_bias = rng.gen_bool(0.5).then_some(&bias[..]);
        let got = ops::conv2d(&x, &kern, with_bias, stride, pad).unwrap();
        worst = worst.max(got.max_abs_diff(&common::conv2d(&x, &kern, with_bias, stride, pad)));

        for (mode, max) in [(PoolMode::Avg, false), (PoolMode::Max, true)] {
            worst = worst.max(ops::pool_global(&x, mode).unwrap().max_abs_diff(&common::pool_global(&x, max)));
            worst = worst.max(ops::pool_channelwise(&x, mode).unwrap().max_abs_diff(&common::pool_channel(&x, max)));
        }

        let wm = Matrix::from_fn(oc, ic * h, |_, _| rng.gen_range(-1.0..1.0));
        let v: Vec<f64> = (0..ic * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (act, relu) in [(ops::Activation::None, false), (ops::Activation::Relu, true)] {
            let got = ops::dense(&v, &wm, &bias, act).unwrap();
            let want = common::dense(&v, &wm, &bias, relu);
            worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }

        let f = rng.gen_range(2..=4);
        worst = worst.max(
            ops::upsample(&x, f, UpsampleMode::Nearest)
                .unwrap()
                .max_abs_diff(&common::upsample_nearest(&x, f)),
        );
        worst = worst.max(
            ops::upsample(&x, f, UpsampleMode::Bilinear)
                .unwrap()
                .max_abs_diff(&common::upsample_bilinear(&x, f)),
        );
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(30),
        format!("{shapes} random shapes, max |diff| {worst:.3e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(&GradCheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let required = ["channel_attention", "spatial_attention", "cbam", "se", "dbl", "stairstep_nearest"];
    let covered = required.iter().all(|r| report.ops.iter().any(|o| o.op == *r && o.cases >= 20));
    let worst = report.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    outcome(
        report.passed && covered && elapsed < Duration::from_secs(60),
        format!(
            "{} ops x {} cases, max rel err {worst:.3e}, {:.2}s",
            report.ops.len(),
            report.options.cases,
            elapsed.as_secs_f64()
        ),
    )
}

fn permute_spatial(f: &FeatureMap, perm: &[usize]) -> FeatureMap {
    let [_, _, _, w] = f.dims();
    FeatureMap::from_fn(f.dims(), |n, c, y, x| {
        let s = perm[y * w + x];
        f.at(n, c, s / w, s % w)
    })
}

fn permute_channels(f: &FeatureMap, perm: &[usize]) -> FeatureMap {
    FeatureMap::from_fn(f.dims(), |n, c, y, x| f.at(n, perm[c], y, x))
}

fn attention_invariances() -> Outcome {
    let trials = 1000;
    let mut rng = common::rng(3);
    let (mut ca_err, mut sa_err) = (0.0f64, 0.0f64);
    let (mut gates_ok, mut bounded) = (true, true);
    for _ in 0..trials {
        let dims = [rng.gen_range(1..=2), rng.gen_range(1..=12), rng.gen_range(1..=7), rng.gen_range(1..=7)];
        let [_, c, h, w] = dims;
        let scale = rng.gen_range(0.1..3.0);
        let f = common::random_map(&mut rng, dims).scale(scale);
        let ca = ChannelAttentionParams::random(c, *[1, 2, 4, 16].choose(&mut rng).unwrap(), &mut rng);
        let sa = SpatialAttentionParams::random(*[1, 3, 5, 7].choose(&mut rng).unwrap(), &mut rng).unwrap();

        let mut sp: Vec<usize> = (0..h * w).collect();
        sp.shuffle(&mut rng);
        let g = attention::channel_attention(&f, &ca).unwrap();
        ca_err = ca_err.max(g.max_abs_diff(&attention::channel_attention(&permute_spatial(&f, &sp), &ca).unwrap()));

        let mut cp: Vec<usize> = (0..c).collect();
        cp.shuffle(&mut rng);
        let s = attention::spatial_attention(&f, &sa).unwrap();
        sa_err = sa_err.max(s.max_abs_diff(&attention::spatial_attention(&permute_channels(&f, &cp), &sa).unwrap()));

        let refined = ops::elementwise(&f, &g, ops::BinaryOp::Mul).unwrap();
        let s2 = attention::spatial_attention(&refined, &sa).unwrap();
        gates_ok &= g.data().iter().chain(s2.data()).all(|&v| v > 0.0 && v < 1.0);
        let out = attention::apply_cbam(&f, &ca, &sa).unwrap();
        bounded &= out.data().iter().zip(f.data()).all(|(o, x)| o.abs() <= x.abs());
    }
    outcome(
        ca_err <= 1e-12 && sa_err <= 1e-12 && gates_ok && bounded,
        format!(
            "{trials} trials each: channel gate drift {ca_err:.1e}, spatial gate drift {sa_err:.1e}, gates in (0,1) {gates_ok}, |CBAM(F)| <= |F| {bounded}"
        ),
    )
}

fn random_pyramid(rng: &mut impl Rng) -> (PyramidInput, Vec<FeatureMap>) {
    let levels = rng.gen_range(2..=4);
    let base = rng.gen_range(1..=3);
    let base_w = rng.gen_range(1..=3);
    let delta = rng.gen_range(1..=4);
    let batch = rng.gen_range(1..=2);
    let mut maps = Vec::new();
    let mut m = Vec::new();
    for i in 0..levels {
        let side = base << (levels - 1 - i);
        let c = rng.gen_range(1..=5);
        let width = base_w << (levels - 1 - i);
        maps.push(common::random_map(rng, [batch, c, side, width]));
        m.push(common::random_map(rng, [delta, c, 1, 1]));
    }
    (PyramidInput::new(maps).unwrap(), m)
}

fn fusion_equivalence() -> Outcome {
    let mut rng = common::rng(4);
    let trials = 150;
    let mut worst = 0.0f64;
    let mut bilinear_gap = 0.0f64;
    for _ in 0..trials {
        let (p, m) = random_pyramid(&mut rng);
        let a = stairstep_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        let b = hypercolumn_fuse(&p, &m, UpsampleMode::Nearest).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
        let a = stairstep_fuse(&p, &m, UpsampleMode::Bilinear).unwrap();
        let b = hypercolumn_fuse(&p, &m, UpsampleMode::Bilinear).unwrap();
        bilinear_gap = bilinear_gap.max(a.max_abs_diff(&b));
    }
    outcome(
        worst <= 1e-9 && bilinear_gap > 1e-6,
        format!("{trials} pyramids, nearest max |diff| {worst:.3e}, bilinear max |diff| {bilinear_gap:.3e}"),
    )
}

fn polygon_round_trip() -> Outcome {
    let mut rng = common::rng(5);
    let masks: Vec<BinaryMask> = (0..60).map(|_| common::random_convex_mask(&mut rng, 256, 256)).collect();
    let bins = [3, 6, 12, 36];
    let ious: Vec<Vec<f64>> = bins
        .iter()
        .map(|&b| {
            masks
                .iter()
                .map(|m| {
                    let poly = decode_vertices(&encode_mask_to_polygon(m, b).unwrap(), 0.5);
                    polygon_iou(m, &rasterize_polygon(&poly, 256, 256).mask).unwrap()
                })
                .collect()
        })
        .collect();
    let means: Vec<f64> = ious.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let at36 = &ious[3];
    let worst = at36.iter().cloned().fold(1.0, f64::min);
    let above = at36.iter().filter(|&&v| v >= 0.95).count();
    let shown: Vec<String> = bins.iter().zip(&means).map(|(b, m)| format!("{b}:{m:.4}")).collect();
    outcome(
        means[3] >= 0.95 && monotone,
        format!(
            "{} convex masks 256x256, mean IoU by bins {} (need >= 0.95 at 36; worst mask {worst:.3}, {above} of {} at >= 0.95)",
            masks.len(),
            shown.join(" "),
            at36.len()
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = common::rng(6);
    let mut fails = Vec::new();
    for t in 0..50 {
        let (h, w) = (rng.gen_range(11..=40), rng.gen_range(11..=40));
        let p = rng.gen_range(0.05..0.95);
        let mut gt = common::random_mask(&mut rng, h, w, p);
        if t % 2 == 0 {
            // blob-shaped ground truth as well as noise
            let (cy, cx, r) = (h as f64 / 2.0, w as f64 / 3.0, h.min(w) as f64 / 3.0);
            gt = BinaryMask::from_fn(h, w, |y, x| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() < r);
        }
        if gt.count() == 0 || gt.count() == h * w {
            continue;
        }
        let pred = PredictionMap::from_mask(&gt);
        let mae = metrics::mae(&pred, &gt).unwrap();
        let f = metrics::f_beta(&pred, &gt, 0.3).unwrap();
        let e = metrics::e_measure(&metrics::binarize(&pred, metrics::adaptive_threshold(&pred)), &gt).unwrap();
        let s = metrics::s_measure(&pred, &gt, 0.5).unwrap();
        let q = ssim(&pred, &pred).unwrap();
        if mae != 0.0 || (f - 1.0).abs() > 1e-12 || (e - 1.0).abs() > 1e-12 || (s - 1.0).abs() > 1e-9 || (q - 1.0).abs() > 1e-12 {
            fails.push(format!("perfect {h}x{w}: mae {mae} f {f} e {e} s {s} ssim {q}"));
        }
    }
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let pred = common::random_prediction(&mut rng, h, w);
        let bin = metrics::binarize(&pred, metrics::adaptive_threshold(&pred));
        let bin_mean = bin.count() as f64 / (h * w) as f64;
        for (gt, e_want, s_want) in [
            (BinaryMask::zeros(h, w), 1.0 - bin_mean, 1.0 - pred.mean()),
            (BinaryMask::zeros(h, w).complement(), bin_mean, pred.mean()),
        ] {
            let e = metrics::e_measure(&bin, &gt).unwrap();
            let s = metrics::s_measure(&pred, &gt, 0.5).unwrap();
            if (e - e_want).abs() > 1e-12 || (s - s_want).abs() > 1e-12 {
                fails.push(format!("degenerate gt {h}x{w}: e {e} vs {e_want}, s {s} vs {s_want}"));
            }
        }
    }
    let z = BinaryMask::zeros(8, 8);
    let pz = PredictionMap::constant(8, 8, 0.0).unwrap();
    let po = PredictionMap::constant(8, 8, 1.0).unwrap();
    let fixed = [
        metrics::s_measure(&pz, &z, 0.5).unwrap(),
        1.0 - metrics::s_measure(&po, &z, 0.5).unwrap(),
        metrics::mae(&po, &z).unwrap(),
    ];
    if fixed != [1.0, 1.0, 1.0] {
        fails.push(format!("fixed special cases {fixed:?}"));
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "perfect predictions and all-0/all-1 ground truth closed forms hold".to_string()
        } else {
            fails.join("; ")
        },
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = common::rng(7);
    let (mut f_err, mut e_err) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    while pairs < 100 {
        let pred = common::random_prediction(&mut rng, 16, 16);
        let p = rng.gen_range(0.1..0.9);
        let gt = common::random_mask(&mut rng, 16, 16, p);
        if gt.count() == 0 {
            continue;
        }
        pairs += 1;
        f_err = f_err.max((metrics::f_beta(&pred, &gt, 0.3).unwrap() - common::f_beta(&pred, &gt, 0.3)).abs());
        let t = (2.0 * pred.data().iter().sum::<f64>() / 256.0).min(1.0);
        let bits: Vec<bool> = pred.data().iter().map(|&p| p >= t).collect();
        let bin = BinaryMask::new(16, 16, bits.clone()).unwrap();
        e_err = e_err.max((metrics::e_measure(&bin, &gt).unwrap() - common::e_measure(&bits, gt.bits())).abs());
    }
    let mut s_err = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
        let got = ssim(&PredictionMap::constant(16, 16, a).unwrap(), &PredictionMap::constant(16, 16, b).unwrap()).unwrap();
        s_err = s_err.max((got - common::ssim_constant(a, b)).abs());
    }
    outcome(
        f_err <= 1e-10 && e_err <= 1e-10 && s_err <= 1e-12,
        format!("{pairs} pairs: F-beta {f_err:.1e}, E-measure {e_err:.1e}; 100 constant SSIM pairs {s_err:.1e}"),
    )
}

fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_mirrorscope")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn write_fixtures(dir: &Path) {
    let mut rng = common::rng(8);
    for sub in ["pred", "gt", "img", "levels"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    for i in 0..6 {
        let gt = common::random_convex_mask(&mut rng, 48, 40);
        write_mask(dir.join(format!("gt/im{i}.pgm")), &gt).unwrap();
        let noisy: Vec<f64> = gt
            .bits()
            .iter()
            .map(|&g| (if g { 0.7 } else { 0.2 } + rng.gen_range(-0.2f64..0.2)).clamp(0.0, 1.0))
            .collect();
        write_prediction(dir.join(format!("pred/im{i}.pgm")), &PredictionMap::new(48, 40, noisy).unwrap()).unwrap();
        write_prediction(dir.join(format!("img/im{i}.pgm")), &common::random_prediction(&mut rng, 30, 36)).unwrap();
    }
    for (i, (c, s)) in [(4, 16), (6, 8), (8, 4)].into_iter().enumerate() {
        TensorFile::from(&common::random_map(&mut rng, [1, c, s, s]))
            .write(dir.join(format!("levels/l{i}.fmap")))
            .unwrap();
    }
    std::fs::write(
        dir.join("neck.cfg"),
        "levels=3\nwidths=4,6,8\ndelta=4\nplacement=a\nattention=cbam\nreduction=2\nupsample=bilinear\n",
    )
    .unwrap();
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_fixtures(d);
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<String>, String)> = vec![
        ("eval", vec!["eval".into(), "--pred".into(), p("pred"), "--gt".into(), p("gt"), "--out".into(), p("eval.json")], p("eval.json")),
        (
            "similarity",
            vec!["similarity".into(), "--images".into(), p("img"), "--pairs".into(), "7".into(), "--out".into(), p("sim.json")],
            p("sim.json"),
        ),
        (
            "neck-run",
            vec![
                "neck-run".into(), "--config".into(), p("neck.cfg"),
                "--level".into(), p("levels/l0.fmap"), "--level".into(), p("levels/l1.fmap"), "--level".into(), p("levels/l2.fmap"),
                "--out".into(), p("fused.fmap"),
            ],
            p("fused.fmap"),
        ),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, args, out) in &commands {
        let mut seen: Option<Vec<u8>> = None;
        let mut identical = true;
        for jobs in ["1", "4", "1", "3"] {
            let mut full: Vec<&str> = vec!["--jobs", jobs];
            full.extend(args.iter().map(String::as_str));
            let (code, _) = run_cli(&full);
            let bytes = std::fs::read(out).unwrap_or_default();
            if code != 0 || bytes.is_empty() {
                identical = false;
            }
            match &seen {
                None => seen = Some(bytes),
                Some(b) => identical &= *b == bytes,
            }
        }
        pass &= identical;
        notes.push(format!("{name} {}", if identical { "identical" } else { "DIFFERS" }));
    }
    outcome(pass, format!("4 runs each at jobs 1/4/1/3: {}", notes.join(", ")))
}

fn ablation_smoke() -> Outcome {
    let mut rng = common::rng(9);
    let levels = vec![
        common::random_map(&mut rng, [1, 8, 16, 16]),
        common::random_map(&mut rng, [1, 12, 8, 8]),
        common::random_map(&mut rng, [1, 16, 4, 4]),
    ];
    let pyramid = PyramidInput::new(levels).unwrap();
    let placements = [Placement::A, Placement::B, Placement::C, Placement::D];
    let kinds = [AttentionKind::Cbam, AttentionKind::Se, AttentionKind::None];
    let mut outputs = Vec::new();
    for &attention in &kinds {
        for &placement in &placements {
            let cfg = NeckConfig {
                level_channels: vec![8, 12, 16],
                delta: 8,
                placement,
                attention,
                reduction: 4,
                ..NeckConfig::default()
            };
            let params = NeckParams::random(&cfg, &mut common::rng(10)).unwrap();
            match assemble_neck(&pyramid, &cfg, &params) {
                Ok(out) if out.is_finite() => outputs.push((attention, placement, out)),
                other => return outcome(false, format!("{placement}/{attention} failed: {:?}", other.err())),
            }
        }
    }
    let distinct = |a: &FeatureMap, b: &FeatureMap| a.max_abs_diff(b) > 1e-9;
    let mut clashes = Vec::new();
    for (i, (ka, pa, a)) in outputs.iter().enumerate() {
        for (kb, pb, b) in &outputs[i + 1..] {
            // without an attention block the placement has nothing to place
            let expect_distinct = !(*ka == AttentionKind::None && *kb == AttentionKind::None);
            if expect_distinct && !distinct(a, b) {
                clashes.push(format!("{pa}/{ka} == {pb}/{kb}"));
            }
            if !expect_distinct && distinct(a, b) {
                clashes.push(format!("{pa}/{ka} != {pb}/{kb}"));
            }
        }
    }
    outcome(
        clashes.is_empty(),
        if clashes.is_empty() {
            format!(
                "{} runs on a 3-level pyramid; attended variants pairwise distinct, attention=none identical across placements",
                outputs.len()
            )
        } else {
            clashes.join(", ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kernel oracles", kernel_oracles),
        ("gradient suite", gradient_suite),
        ("attention invariances", attention_invariances),
        ("stairstep = hypercolumn under nearest upsampling", fusion_equivalence),
        ("polygon round trip", polygon_round_trip),
        ("metric identities", metric_identities),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
        ("ablation harness smoke test", ablation_smoke),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {}: {} - {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
