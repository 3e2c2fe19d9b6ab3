//! C interface to bracketforge.
//!
//! Models, bracket stacks and HDR images are opaque handles released with
//! their `bf_*_free` function. Fallible calls return a [`BfStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`bf_last_error`]. Pixel buffers are row-major `height x width x channels`
//! doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bracketforge::consistency::BracketStack;
use bracketforge::evalharness;
use bracketforge::guidance::{self, GuidanceConfig, LambdaMode, DEFAULT_LAMBDA_CONSTANT, DEFAULT_LAMBDA_QUADRATIC};
use bracketforge::image::{HdrImage, Image, LdrImage};
use bracketforge::merge::{self, io as mio, MergeWeightSpec};
use bracketforge::radiometry::{Crf, ExposureBracket};
use bracketforge::score::{external_model_adapter, ScoreModel};
use bracketforge::Error;

/// Result of every fallible call. Codes 3 to 8 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Capability = 6,
    Contract = 7,
    NonFinite = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfLambdaMode {
    Constant = 0,
    TimeQuadratic = 1,
}

/// Sampling options. `evs == NULL` selects the default -4,-2,0,2,4 stack,
/// `steps == 0` the model's full schedule and a negative `lambda0` the
/// default strength of the chosen mode.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BfSampleOptions {
    pub evs: *const f64,
    pub n_evs: usize,
    pub steps: usize,
    pub lambda_mode: BfLambdaMode,
    pub lambda0: f64,
    pub seed: u64,
    pub serial: bool,
}

pub struct BfModel {
    inner: Box<dyn ScoreModel>,
}

pub struct BfStack {
    inner: BracketStack,
}

pub struct BfHdr {
    inner: HdrImage,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Config(_) => BfStatus::Config,
        Error::Io { .. } => BfStatus::Io,
        Error::Format { .. } | Error::Json(_) => BfStatus::Format,
        Error::Capability(_) => BfStatus::Capability,
        Error::Contract(_) | Error::Shape { .. } | Error::Domain(_) => BfStatus::Contract,
        Error::NonFinite(_) => BfStatus::NonFinite,
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|m| *m.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BfStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            BfStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            BfStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &'static str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a>(p: *mut f64, len: usize, what: &'static str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, what: &'static str, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    put(out, "out", Box::into_raw(Box::new(value)))
}

fn parse_crf(spec: &str) -> FfiResult<Crf> {
    Ok(spec.parse::<Crf>()?)
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> FfiResult<()> {
    if dst.len() != src.len() {
        return Err(Failure::Invalid(format!(
            "buffer holds {} values, {} needed",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one for the terminator.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn bf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|m| {
        let msg = m.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Maps linear values to encoded values in place.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `values` valid for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn bf_crf_apply(spec: *const c_char, values: *mut f64, n: usize) -> BfStatus {
    guard(|| {
        let crf = parse_crf(str_arg(spec, "spec")?)?;
        let v = slice_mut_arg(values, n, "values")?;
        let out = crf.apply(v)?;
        v.copy_from_slice(&out);
        Ok(())
    })
}

/// Maps encoded values in `[0, 1]` back to linear values in place.
///
/// # Safety
/// As for [`bf_crf_apply`].
#[no_mangle]
pub unsafe extern "C" fn bf_crf_invert(spec: *const c_char, values: *mut f64, n: usize) -> BfStatus {
    guard(|| {
        let crf = parse_crf(str_arg(spec, "spec")?)?;
        let v = slice_mut_arg(values, n, "values")?;
        let out = crf.invert(v)?;
        v.copy_from_slice(&out);
        Ok(())
    })
}

/// PSNR in dB between two equally long buffers of values in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must be valid for `n` doubles, `out` for one.
#[no_mangle]
pub unsafe extern "C" fn bf_psnr(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> BfStatus {
    guard(|| {
        let a = slice_arg(a, n, "a")?;
        let b = slice_arg(b, n, "b")?;
        let la = LdrImage::new(Image::from_vec(1, n, 1, a.to_vec())?)?;
        let lb = LdrImage::new(Image::from_vec(1, n, 1, b.to_vec())?)?;
        put(out, "out", evalharness::psnr(&la, &lb)?)
    })
}

/// Opens a model from a backend spec such as `toy:<file>` or
/// `analytic:gauss:mu=0.5,var=0.04`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_model_open(spec: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    guard(|| {
        let inner = external_model_adapter(str_arg(spec, "spec")?)?;
        put_handle(out, BfModel { inner })
    })
}

/// Native resolution of the model.
///
/// # Safety
/// `model` must come from [`bf_model_open`]; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_model_shape(
    model: *const BfModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> BfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let (h, w, c) = m
            .inner
            .resolution()
            .ok_or_else(|| Error::Capability("model has no native resolution".into()))?;
        put(height, "height", h)?;
        put(width, "width", w)?;
        put(channels, "channels", c)
    })
}

/// # Safety
/// `model` must come from [`bf_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Defaults: five brackets, full schedule, time-quadratic strength.
#[no_mangle]
pub extern "C" fn bf_sample_options_default() -> BfSampleOptions {
    BfSampleOptions {
        evs: std::ptr::null(),
        n_evs: 0,
        steps: 0,
        lambda_mode: BfLambdaMode::TimeQuadratic,
        lambda0: -1.0,
        seed: 0,
        serial: false,
    }
}

/// Samples a bracket stack with the model at its native resolution.
///
/// # Safety
/// `model` must come from [`bf_model_open`], `options` must be readable and
/// its `evs` valid for `n_evs` doubles when non-null.
#[no_mangle]
pub unsafe extern "C" fn bf_sample(
    model: *const BfModel,
    options: *const BfSampleOptions,
    out: *mut *mut BfStack,
) -> BfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let o = ref_arg(options, "options")?;
        let mut cfg = GuidanceConfig {
            seed: o.seed,
            serial: o.serial,
            steps: (o.steps > 0).then_some(o.steps),
            ..Default::default()
        };
        if !o.evs.is_null() {
            cfg.evs = slice_arg(o.evs, o.n_evs, "options.evs")?.to_vec();
        }
        let (mode, default_lambda) = match o.lambda_mode {
            BfLambdaMode::Constant => (LambdaMode::Constant, DEFAULT_LAMBDA_CONSTANT),
            BfLambdaMode::TimeQuadratic => (LambdaMode::TimeQuadratic, DEFAULT_LAMBDA_QUADRATIC),
        };
        cfg.lambda_mode = mode;
        cfg.lambda0 = if o.lambda0 < 0.0 { default_lambda } else { o.lambda0 };
        let inner = guidance::sample_brackets(m.inner.as_ref(), &cfg)?;
        put_handle(out, BfStack { inner })
    })
}

/// Builds a stack from `n` brackets stored back to back in `pixels`.
///
/// # Safety
/// `evs` must be valid for `n` doubles, `pixels` for
/// `n * height * width * channels`, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_new(
    evs: *const f64,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: *const f64,
    out: *mut *mut BfStack,
) -> BfStatus {
    guard(|| {
        let evs = slice_arg(evs, n, "evs")?;
        let per = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Failure::Invalid("image size overflows".into()))?;
        let total = per
            .checked_mul(n)
            .ok_or_else(|| Failure::Invalid("stack size overflows".into()))?;
        let px = slice_arg(pixels, total, "pixels")?;
        let brackets = evs
            .iter()
            .zip(px.chunks_exact(per.max(1)))
            .map(|(&ev, chunk)| {
                let img = LdrImage::new(Image::from_vec(height, width, channels, chunk.to_vec())?)?;
                ExposureBracket::new(img, ev)
            })
            .collect::<bracketforge::Result<Vec<_>>>()?;
        put_handle(out, BfStack { inner: BracketStack::new(brackets)? })
    })
}

/// Reads `<stem>_ev<±x>.png` brackets from a directory; `stem` may be null
/// when the directory holds a single stack.
///
/// # Safety
/// `dir` must be a NUL-terminated string, `stem` one or null, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_read(dir: *const c_char, stem: *const c_char, out: *mut *mut BfStack) -> BfStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let stem = opt_str_arg(stem, "stem")?;
        let inner = mio::read_brackets(Path::new(dir), stem)?;
        put_handle(out, BfStack { inner })
    })
}

/// Writes the stack as 8-bit PNGs named `<stem>_ev<±x>.png`.
///
/// # Safety
/// `stack` must be a live handle; `dir` and `stem` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_write(stack: *const BfStack, dir: *const c_char, stem: *const c_char) -> BfStatus {
    guard(|| {
        let s = ref_arg(stack, "stack")?;
        let dir = str_arg(dir, "dir")?;
        let stem = str_arg(stem, "stem")?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        mio::write_brackets(Path::new(dir), stem, &s.inner)?;
        Ok(())
    })
}

/// Number of brackets, or 0 for a null handle.
///
/// # Safety
/// `stack` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_len(stack: *const BfStack) -> usize {
    stack.as_ref().map_or(0, |s| s.inner.len())
}

/// # Safety
/// `stack` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_shape(
    stack: *const BfStack,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> BfStatus {
    guard(|| {
        let (h, w, c) = ref_arg(stack, "stack")?.inner.shape();
        put(height, "height", h)?;
        put(width, "width", w)?;
        put(channels, "channels", c)
    })
}

/// Exposure value of bracket `index` and a copy of its pixels. `pixels` may
/// be null to query only the exposure value.
///
/// # Safety
/// `stack` must be a live handle, `ev` writable and `pixels` valid for `len`
/// doubles when non-null.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_bracket(
    stack: *const BfStack,
    index: usize,
    ev: *mut f64,
    pixels: *mut f64,
    len: usize,
) -> BfStatus {
    guard(|| {
        let s = ref_arg(stack, "stack")?;
        let b = s
            .inner
            .brackets()
            .get(index)
            .ok_or_else(|| Failure::Invalid(format!("bracket index {index} out of range")))?;
        put(ev, "ev", b.ev)?;
        if !pixels.is_null() {
            copy_out(b.image.image().data(), slice_mut_arg(pixels, len, "pixels")?)?;
        }
        Ok(())
    })
}

/// Bracket-consistency PSNR of the stack in dB.
///
/// # Safety
/// `stack` must be a live handle, `crf` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bf_consistency_psnr(stack: *const BfStack, crf: *const c_char, out: *mut f64) -> BfStatus {
    guard(|| {
        let s = ref_arg(stack, "stack")?;
        let crf = parse_crf(str_arg(crf, "crf")?)?;
        put(out, "out", evalharness::bracket_consistency_psnr(&s.inner, &crf)?)
    })
}

/// # Safety
/// `stack` must be a live handle or null and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bf_stack_free(stack: *mut BfStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Merges the stack into linear radiance with the default hat weights.
///
/// # Safety
/// `stack` must be a live handle, `crf` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bf_merge(stack: *const BfStack, crf: *const c_char, out: *mut *mut BfHdr) -> BfStatus {
    guard(|| {
        let s = ref_arg(stack, "stack")?;
        let crf = parse_crf(str_arg(crf, "crf")?)?;
        let inner = merge::merge_stack(&s.inner, &crf, &MergeWeightSpec::default())?;
        put_handle(out, BfHdr { inner })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_read_pfm(path: *const c_char, out: *mut *mut BfHdr) -> BfStatus {
    guard(|| {
        let inner = mio::read_pfm(Path::new(str_arg(path, "path")?))?;
        put_handle(out, BfHdr { inner })
    })
}

/// # Safety
/// `hdr` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_write_pfm(hdr: *const BfHdr, path: *const c_char) -> BfStatus {
    guard(|| {
        let h = ref_arg(hdr, "hdr")?;
        mio::write_pfm(Path::new(str_arg(path, "path")?), &h.inner)?;
        Ok(())
    })
}

/// # Safety
/// `hdr` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_shape(
    hdr: *const BfHdr,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> BfStatus {
    guard(|| {
        let (h, w, c) = ref_arg(hdr, "hdr")?.inner.image().shape();
        put(height, "height", h)?;
        put(width, "width", w)?;
        put(channels, "channels", c)
    })
}

/// Copies the radiance into `pixels`, which must hold exactly
/// `height * width * channels` doubles.
///
/// # Safety
/// `hdr` must be a live handle and `pixels` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_pixels(hdr: *const BfHdr, pixels: *mut f64, len: usize) -> BfStatus {
    guard(|| {
        let h = ref_arg(hdr, "hdr")?;
        copy_out(h.inner.image().data(), slice_mut_arg(pixels, len, "pixels")?)
    })
}

/// Ratio of the largest to the smallest nonzero radiance.
///
/// # Safety
/// `hdr` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_dynamic_range(hdr: *const BfHdr, out: *mut f64) -> BfStatus {
    guard(|| put(out, "out", ref_arg(hdr, "hdr")?.inner.dynamic_range()))
}

/// # Safety
/// `hdr` must be a live handle or null and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bf_hdr_free(hdr: *mut BfHdr) {
    if !hdr.is_null() {
        drop(Box::from_raw(hdr));
    }
}
