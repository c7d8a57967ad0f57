//! C ABI over `mirrorscope`.
//!
//! Every fallible call returns an [`MsStatus`]; on failure the message is
//! available from [`ms_last_error`] on the same thread. Handles are opaque and
//! owned by the caller once returned; release them with the matching `_free`.
//! Masks cross the boundary as `h * w` bytes, nonzero meaning foreground.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mirrorscope::metrics::{self, PredictionMap};
use mirrorscope::neck::{self, NeckConfig, NeckParams, PyramidInput};
use mirrorscope::polygon::{self, BinaryMask, PolygonDetection};
use mirrorscope::tensor::{ParamStore, TensorFile};
use mirrorscope::{Error, FeatureMap};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    EmptyMask = 6,
    Undefined = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

impl From<&Error> for MsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) | Error::Pyramid(_) | Error::NonScalarSeed(_) => MsStatus::Shape,
            Error::Io { .. } => MsStatus::Io,
            Error::Format(_) | Error::Image { .. } | Error::MissingParam(_) | Error::Config(_) => {
                MsStatus::Format
            }
            Error::EmptyMask => MsStatus::EmptyMask,
            Error::Undefined(_) => MsStatus::Undefined,
            Error::InvalidArgument(_) | Error::NotOnTape => MsStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(MsStatus::from(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

fn null(what: &str) -> Fail {
    Fail(MsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> FfiResult) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn area(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))
}

unsafe fn prediction(p: *const f64, height: usize, width: usize) -> Result<PredictionMap, Fail> {
    let n = area(height, width)?;
    Ok(PredictionMap::new(height, width, slice(p, n, "prediction")?.to_vec())?)
}

unsafe fn mask(p: *const u8, height: usize, width: usize) -> Result<BinaryMask, Fail> {
    let n = area(height, width)?;
    Ok(BinaryMask::new(height, width, slice(p, n, "mask")?.iter().map(|&b| b != 0).collect())?)
}

fn put<T>(out: *mut *mut T, value: T) -> FfiResult {
    let slot = unsafe { out_ptr(out, "out")? };
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ms_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Short static name of a status code.
#[no_mangle]
pub extern "C" fn ms_status_name(status: MsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MsStatus::Ok => c"ok",
        MsStatus::NullPointer => c"null pointer",
        MsStatus::InvalidArgument => c"invalid argument",
        MsStatus::Shape => c"shape mismatch",
        MsStatus::Io => c"i/o error",
        MsStatus::Format => c"format error",
        MsStatus::EmptyMask => c"empty mask",
        MsStatus::Undefined => c"undefined",
        MsStatus::BufferTooSmall => c"buffer too small",
        MsStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Rank-4 (n, c, h, w) tensor of doubles.
pub struct MsFeatureMap(FeatureMap);

/// Copies `n*c*h*w` doubles from `data` into a new handle.
///
/// # Safety
/// `data` must point at `n*c*h*w` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_new(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: *const f64,
    out: *mut *mut MsFeatureMap,
) -> MsStatus {
    guard(|| {
        let len = [n, c, h, w]
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| invalid("dims overflow"))?;
        let fm = FeatureMap::new([n, c, h, w], slice(data, len, "data")?.to_vec())?;
        put(out, MsFeatureMap(fm))
    })
}

/// Reads an FMAP1 file holding a rank-4 tensor.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_read(path: *const c_char, out: *mut *mut MsFeatureMap) -> MsStatus {
    guard(|| {
        let fm = TensorFile::read(string(path, "path")?)?.to_feature_map()?;
        put(out, MsFeatureMap(fm))
    })
}

/// # Safety
/// `fm` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_write(fm: *const MsFeatureMap, path: *const c_char) -> MsStatus {
    guard(|| {
        let fm = reference(fm, "feature map")?;
        TensorFile::from(&fm.0).write(string(path, "path")?)?;
        Ok(())
    })
}

/// Writes (n, c, h, w) into `dims`.
///
/// # Safety
/// `fm` must be a live handle; `dims` must hold 4 elements.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_dims(fm: *const MsFeatureMap, dims: *mut usize) -> MsStatus {
    guard(|| {
        let fm = reference(fm, "feature map")?;
        slice_mut(dims, 4, "dims")?.copy_from_slice(&fm.0.dims());
        Ok(())
    })
}

/// Element count, 0 for NULL.
///
/// # Safety
/// `fm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_len(fm: *const MsFeatureMap) -> usize {
    fm.as_ref().map_or(0, |f| f.0.len())
}

/// Borrowed pointer to the row-major data, NULL for NULL. Valid while the handle lives.
///
/// # Safety
/// `fm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_data(fm: *const MsFeatureMap) -> *const f64 {
    fm.as_ref().map_or(ptr::null(), |f| f.0.data().as_ptr())
}

/// # Safety
/// `fm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_feature_map_free(fm: *mut MsFeatureMap) {
    if !fm.is_null() {
        drop(Box::from_raw(fm));
    }
}

/// A configured neck with its parameters.
pub struct MsNeck {
    config: NeckConfig,
    params: NeckParams,
}

/// Builds a neck from `key=value` configuration text, drawing parameters from `seed`.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_neck_new(config: *const c_char, seed: u64, out: *mut *mut MsNeck) -> MsStatus {
    guard(|| {
        let config = NeckConfig::parse(string(config, "config")?)?;
        let params = NeckParams::random(&config, &mut mirrorscope::seeded_rng(seed))?;
        put(out, MsNeck { config, params })
    })
}

/// Replaces the parameters with those listed in a manifest.
///
/// # Safety
/// `neck` must be a live handle; `manifest` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_neck_load_params(neck: *mut MsNeck, manifest: *const c_char) -> MsStatus {
    guard(|| {
        let neck = out_ptr(neck, "neck")?;
        let store = ParamStore::load(string(manifest, "manifest")?)?;
        neck.params = NeckParams::from_store(&neck.config, &store)?;
        Ok(())
    })
}

/// Writes the current parameters as FMAP1 files plus `params.txt` into `dir`.
///
/// # Safety
/// `neck` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_neck_save_params(neck: *const MsNeck, dir: *const c_char) -> MsStatus {
    guard(|| {
        let neck = reference(neck, "neck")?;
        neck.params.to_store().save(string(dir, "dir")?, "params.txt")?;
        Ok(())
    })
}

/// Fuses `count` levels (highest resolution first) into one map.
///
/// # Safety
/// `neck` must be a live handle; `levels` must hold `count` live handles.
#[no_mangle]
pub unsafe extern "C" fn ms_neck_run(
    neck: *const MsNeck,
    levels: *const *const MsFeatureMap,
    count: usize,
    out: *mut *mut MsFeatureMap,
) -> MsStatus {
    guard(|| {
        let neck = reference(neck, "neck")?;
        let maps = slice(levels, count, "levels")?
            .iter()
            .map(|&l| reference(l, "level").map(|l| l.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let fused = neck::assemble_neck(&PyramidInput::new(maps)?, &neck.config, &neck.params)?;
        put(out, MsFeatureMap(fused))
    })
}

/// # Safety
/// `neck` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_neck_free(neck: *mut MsNeck) {
    if !neck.is_null() {
        drop(Box::from_raw(neck));
    }
}

/// Mean absolute error between a [0,1] map and a mask.
///
/// # Safety
/// `pred` and `gt` must hold `height*width` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_mae(pred: *const f64, gt: *const u8, height: usize, width: usize, out: *mut f64) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = metrics::mae(&prediction(pred, height, width)?, &mask(gt, height, width)?)?;
        Ok(())
    })
}

/// F-measure at the adaptive threshold. `MS_STATUS_UNDEFINED` for an empty mask.
///
/// # Safety
/// As [`ms_mae`].
#[no_mangle]
pub unsafe extern "C" fn ms_f_beta(
    pred: *const f64,
    gt: *const u8,
    height: usize,
    width: usize,
    beta2: f64,
    out: *mut f64,
) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = metrics::f_beta(&prediction(pred, height, width)?, &mask(gt, height, width)?, beta2)?;
        Ok(())
    })
}

/// Enhanced-alignment measure of the adaptively binarized map.
///
/// # Safety
/// As [`ms_mae`].
#[no_mangle]
pub unsafe extern "C" fn ms_e_measure(pred: *const f64, gt: *const u8, height: usize, width: usize, out: *mut f64) -> MsStatus {
    guard(|| {
        let p = prediction(pred, height, width)?;
        let bin = metrics::binarize(&p, metrics::adaptive_threshold(&p));
        *out_ptr(out, "out")? = metrics::e_measure(&bin, &mask(gt, height, width)?)?;
        Ok(())
    })
}

/// Structure measure.
///
/// # Safety
/// As [`ms_mae`].
#[no_mangle]
pub unsafe extern "C" fn ms_s_measure(
    pred: *const f64,
    gt: *const u8,
    height: usize,
    width: usize,
    alpha: f64,
    out: *mut f64,
) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = metrics::s_measure(&prediction(pred, height, width)?, &mask(gt, height, width)?, alpha)?;
        Ok(())
    })
}

/// Mean SSIM of two [0,1] images of the same size (each side at least 11).
///
/// # Safety
/// `a` and `b` must hold `height*width` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = metrics::ssim(&prediction(a, height, width)?, &prediction(b, height, width)?)?;
        Ok(())
    })
}

/// Intersection over union of two masks; 1 when both are empty.
///
/// # Safety
/// `a` and `b` must hold `height*width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_mask_iou(a: *const u8, b: *const u8, height: usize, width: usize, out: *mut f64) -> MsStatus {
    guard(|| {
        *out_ptr(out, "out")? = polygon::polygon_iou(&mask(a, height, width)?, &mask(b, height, width)?)?;
        Ok(())
    })
}

/// A polar polygon label: centre plus the surviving vertices.
pub struct MsPolygon(PolygonDetection);

/// Encodes a mask into `bins` polar vertices and keeps those with confidence above `threshold`.
///
/// # Safety
/// `mask` must hold `height*width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_polygon_encode(
    mask_bits: *const u8,
    height: usize,
    width: usize,
    bins: usize,
    threshold: f64,
    out: *mut *mut MsPolygon,
) -> MsStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid("threshold must be in [0, 1]"));
        }
        let raw = polygon::encode_mask_to_polygon(&mask(mask_bits, height, width)?, bins)?;
        put(out, MsPolygon(polygon::decode_vertices(&raw, threshold)))
    })
}

/// Number of vertices, 0 for NULL.
///
/// # Safety
/// `poly` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_polygon_vertex_count(poly: *const MsPolygon) -> usize {
    poly.as_ref().map_or(0, |p| p.0.vertices.len())
}

/// Copies the normalized centre and per-vertex bin, distance and confidence.
/// Any of the arrays may be NULL; non-NULL ones need `capacity >= vertex count`.
///
/// # Safety
/// `poly` must be a live handle; each non-NULL array must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ms_polygon_vertices(
    poly: *const MsPolygon,
    center: *mut f64,
    bins: *mut usize,
    distances: *mut f64,
    confidences: *mut f64,
    capacity: usize,
) -> MsStatus {
    guard(|| {
        let p = &reference(poly, "polygon")?.0;
        let n = p.vertices.len();
        if !center.is_null() {
            slice_mut(center, 2, "center")?.copy_from_slice(&[p.center.0, p.center.1]);
        }
        if capacity < n && !(bins.is_null() && distances.is_null() && confidences.is_null()) {
            return Err(Fail(MsStatus::BufferTooSmall, format!("need {n} slots, got {capacity}")));
        }
        for (i, v) in p.vertices.iter().enumerate() {
            if !bins.is_null() {
                *bins.add(i) = v.bin;
            }
            if !distances.is_null() {
                *distances.add(i) = v.distance;
            }
            if !confidences.is_null() {
                *confidences.add(i) = v.confidence;
            }
        }
        Ok(())
    })
}

/// Fills `out_mask` (`height*width` bytes, 0 or 1) by even-odd scanline fill.
/// `degenerate` (optional) is set to 1 when fewer than three vertices survive.
///
/// # Safety
/// `poly` must be a live handle; `out_mask` must hold `height*width` bytes.
#[no_mangle]
pub unsafe extern "C" fn ms_polygon_rasterize(
    poly: *const MsPolygon,
    height: usize,
    width: usize,
    out_mask: *mut u8,
    degenerate: *mut u8,
) -> MsStatus {
    guard(|| {
        let p = &reference(poly, "polygon")?.0;
        let n = area(height, width)?;
        let dst = slice_mut(out_mask, n, "out_mask")?;
        let r = polygon::rasterize_polygon(p, height, width);
        for (d, &b) in dst.iter_mut().zip(r.mask.bits()) {
            *d = b as u8;
        }
        if let Some(flag) = degenerate.as_mut() {
            *flag = r.degenerate as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `poly` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_polygon_free(poly: *mut MsPolygon) {
    if !poly.is_null() {
        drop(Box::from_raw(poly));
    }
}
