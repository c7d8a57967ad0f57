use std::ffi::{CStr, CString};
use std::ptr;

use mirrorscope_ffi::*;

fn last_error() -> String {
    let p = ms_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn feature_map_round_trip_through_file() {
    let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("x.fmap").to_str().unwrap()).unwrap();
    unsafe {
        let mut fm = ptr::null_mut();
        assert_eq!(ms_feature_map_new(1, 2, 3, 4, data.as_ptr(), &mut fm), MsStatus::Ok);
        assert_eq!(ms_feature_map_len(fm), 24);
        assert_eq!(ms_feature_map_write(fm, path.as_ptr()), MsStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(ms_feature_map_read(path.as_ptr(), &mut back), MsStatus::Ok);
        let mut dims = [0usize; 4];
        assert_eq!(ms_feature_map_dims(back, dims.as_mut_ptr()), MsStatus::Ok);
        assert_eq!(dims, [1, 2, 3, 4]);
        let got = std::slice::from_raw_parts(ms_feature_map_data(back), 24);
        // values are exact in f32
        assert_eq!(got, &data[..]);
        ms_feature_map_free(fm);
        ms_feature_map_free(back);
    }
}

#[test]
fn null_and_missing_file_report_errors() {
    unsafe {
        let mut fm = ptr::null_mut();
        assert_eq!(ms_feature_map_new(1, 1, 2, 2, ptr::null(), &mut fm), MsStatus::NullPointer);
        assert!(last_error().contains("data"));
        let missing = CString::new("/nonexistent/never.fmap").unwrap();
        assert_eq!(ms_feature_map_read(missing.as_ptr(), &mut fm), MsStatus::Io);
        assert!(fm.is_null());
        ms_feature_map_free(ptr::null_mut());
        assert_eq!(ms_feature_map_len(ptr::null()), 0);
        assert!(ms_feature_map_data(ptr::null()).is_null());
    }
    ms_clear_error();
    assert!(ms_last_error().is_null());
    let name = unsafe { CStr::from_ptr(ms_status_name(MsStatus::EmptyMask)) };
    assert_eq!(name.to_str().unwrap(), "empty mask");
}

fn level(c: usize, s: usize, seed: f64) -> Vec<f64> {
    (0..c * s * s).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
}

#[test]
fn neck_runs_and_reports_pyramid_errors() {
    let cfg = CString::new("levels=2\nwidths=4,6\ndelta=3\nplacement=a\nattention=cbam\nreduction=2\n").unwrap();
    unsafe {
        let mut neck = ptr::null_mut();
        assert_eq!(ms_neck_new(cfg.as_ptr(), 7, &mut neck), MsStatus::Ok);
        let (a, b) = (level(4, 8, 0.0), level(6, 4, 1.0));
        let mut l0 = ptr::null_mut();
        let mut l1 = ptr::null_mut();
        assert_eq!(ms_feature_map_new(1, 4, 8, 8, a.as_ptr(), &mut l0), MsStatus::Ok);
        assert_eq!(ms_feature_map_new(1, 6, 4, 4, b.as_ptr(), &mut l1), MsStatus::Ok);

        let levels = [l0 as *const MsFeatureMap, l1 as *const MsFeatureMap];
        let mut out = ptr::null_mut();
        assert_eq!(ms_neck_run(neck, levels.as_ptr(), 2, &mut out), MsStatus::Ok);
        let mut dims = [0usize; 4];
        ms_feature_map_dims(out, dims.as_mut_ptr());
        assert_eq!(dims, [1, 3, 8, 8]);

        // same seed, same output
        let mut neck2 = ptr::null_mut();
        ms_neck_new(cfg.as_ptr(), 7, &mut neck2);
        let mut out2 = ptr::null_mut();
        ms_neck_run(neck2, levels.as_ptr(), 2, &mut out2);
        let n = ms_feature_map_len(out);
        assert_eq!(
            std::slice::from_raw_parts(ms_feature_map_data(out), n),
            std::slice::from_raw_parts(ms_feature_map_data(out2), n)
        );

        // params saved and reloaded into a differently seeded neck reproduce the output
        let dir = tempfile::tempdir().unwrap();
        let d = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(ms_neck_save_params(neck, d.as_ptr()), MsStatus::Ok);
        let mut neck3 = ptr::null_mut();
        ms_neck_new(cfg.as_ptr(), 99, &mut neck3);
        let manifest = CString::new(dir.path().join("params.txt").to_str().unwrap()).unwrap();
        assert_eq!(ms_neck_load_params(neck3, manifest.as_ptr()), MsStatus::Ok);
        let mut out3 = ptr::null_mut();
        ms_neck_run(neck3, levels.as_ptr(), 2, &mut out3);
        let d1 = std::slice::from_raw_parts(ms_feature_map_data(out), n);
        let d3 = std::slice::from_raw_parts(ms_feature_map_data(out3), n);
        // parameters pass through f32 on disk
        assert!(d1.iter().zip(d3).all(|(x, y)| (x - y).abs() < 1e-4));

        let swapped = [l1 as *const MsFeatureMap, l0 as *const MsFeatureMap];
        let mut bad = ptr::null_mut();
        assert_eq!(ms_neck_run(neck, swapped.as_ptr(), 2, &mut bad), MsStatus::Shape);
        assert!(bad.is_null());
        assert!(!last_error().is_empty());

        for f in [l0, l1, out, out2, out3] {
            ms_feature_map_free(f);
        }
        for k in [neck, neck2, neck3] {
            ms_neck_free(k);
        }
    }
}

#[test]
fn metrics_on_raw_arrays() {
    let (h, w) = (16, 16);
    let gt: Vec<u8> = (0..h * w).map(|i| ((i % w) < 8) as u8).collect();
    let pred: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(ms_mae(pred.as_ptr(), gt.as_ptr(), h, w, &mut v), MsStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(ms_f_beta(pred.as_ptr(), gt.as_ptr(), h, w, 0.3, &mut v), MsStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(ms_e_measure(pred.as_ptr(), gt.as_ptr(), h, w, &mut v), MsStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(ms_s_measure(pred.as_ptr(), gt.as_ptr(), h, w, 0.5, &mut v), MsStatus::Ok);
        assert!(v > 0.99);
        assert_eq!(ms_ssim(pred.as_ptr(), pred.as_ptr(), h, w, &mut v), MsStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(ms_mask_iou(gt.as_ptr(), gt.as_ptr(), h, w, &mut v), MsStatus::Ok);
        assert_eq!(v, 1.0);

        let empty = vec![0u8; h * w];
        assert_eq!(ms_f_beta(pred.as_ptr(), empty.as_ptr(), h, w, 0.3, &mut v), MsStatus::Undefined);
        assert_eq!(ms_ssim(pred.as_ptr(), pred.as_ptr(), 4, 4, &mut v), MsStatus::InvalidArgument);
        assert_eq!(ms_mae(pred.as_ptr(), gt.as_ptr(), 0, w, &mut v), MsStatus::InvalidArgument);
    }
}

#[test]
fn polygon_encode_rasterize_iou() {
    let (h, w) = (64, 64);
    let mask: Vec<u8> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            (((y - 32.0).powi(2) + (x - 30.0).powi(2)).sqrt() < 20.0) as u8
        })
        .collect();
    unsafe {
        let mut poly = ptr::null_mut();
        assert_eq!(ms_polygon_encode(mask.as_ptr(), h, w, 36, 0.5, &mut poly), MsStatus::Ok);
        let n = ms_polygon_vertex_count(poly);
        assert_eq!(n, 36);
        let mut center = [0.0; 2];
        let mut bins = vec![0usize; n];
        let mut dist = vec![0.0; n];
        assert_eq!(
            ms_polygon_vertices(poly, center.as_mut_ptr(), bins.as_mut_ptr(), dist.as_mut_ptr(), ptr::null_mut(), n),
            MsStatus::Ok
        );
        assert!((center[0] - 30.0 / 64.0).abs() < 0.01);
        assert_eq!(bins, (0..36).collect::<Vec<_>>());
        assert_eq!(
            ms_polygon_vertices(poly, ptr::null_mut(), bins.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), 3),
            MsStatus::BufferTooSmall
        );

        let mut raster = vec![0u8; h * w];
        let mut degenerate = 9u8;
        assert_eq!(ms_polygon_rasterize(poly, h, w, raster.as_mut_ptr(), &mut degenerate), MsStatus::Ok);
        assert_eq!(degenerate, 0);
        let mut iou = 0.0;
        ms_mask_iou(mask.as_ptr(), raster.as_ptr(), h, w, &mut iou);
        assert!(iou > 0.9, "iou {iou}");
        ms_polygon_free(poly);

        let empty = vec![0u8; h * w];
        let mut p2 = ptr::null_mut();
        assert_eq!(ms_polygon_encode(empty.as_ptr(), h, w, 36, 0.5, &mut p2), MsStatus::EmptyMask);
        assert_eq!(ms_polygon_encode(mask.as_ptr(), h, w, 36, 1.5, &mut p2), MsStatus::InvalidArgument);
    }
}

#[test]
fn header_is_valid_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mirrorscope.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ms_feature_map_new", "ms_neck_run", "ms_polygon_rasterize", "ms_last_error", "MS_STATUS_EMPTY_MASK"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mirrorscope.h\"\nint main(void) { MsFeatureMap *f = 0; return ms_feature_map_len(f) == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let cc = match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(_) => return, // no C compiler on this machine
    };
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
}
