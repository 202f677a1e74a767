//! C ABI over the `svq` crate.
//!
//! Conventions: every fallible function returns an [`SvqStatus`]; on failure a
//! message is available from [`svq_last_error`] until the next call on the same
//! thread. Objects are opaque handles created by `*_new`/`*_load`/`*_generate`
//! and released with the matching `*_free`. Buffers are caller-owned and passed
//! with their element count, which must match exactly.
//!
//! Images are `size * size * 3` floats in `[0, 1]`, row-major RGB. Semantic maps
//! and latent grids are row-major `u8` class ids and `u32` codebook indices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use svq::config::RunConfig;
use svq::data::{generate_dataset, read_dataset, write_dataset, PairedSample, RgbImage, SemanticMap};
use svq::metrics::{frechet_distance, miou, ssim};
use svq::pipeline::{load_run, Stage1, Stage1Model, Stage2};
use svq::quantizer::{CodebookId, LatentGrid};
use svq::transformer::SamplingParams;
use svq::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Parse = 6,
    Io = 7,
    Diverged = 8,
    Panic = 9,
}

/// Paired dataset handle.
pub struct SvqDataset {
    samples: Vec<PairedSample>,
}

/// Trained run handle: stage-1 model plus, when trained, the transformer.
pub struct SvqModel {
    config: RunConfig,
    stage1: Stage1,
    stage2: Option<Stage2>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SvqStatus {
    match e {
        Error::Config(_) => SvqStatus::Config,
        Error::Data(_) => SvqStatus::Data,
        Error::Numeric(_) => SvqStatus::Numeric,
        Error::Parse { .. } => SvqStatus::Parse,
        Error::Io { .. } => SvqStatus::Io,
        Error::Diverged { .. } => SvqStatus::Diverged,
    }
}

/// Internal failure carrying the code to return.
struct Fail(SvqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SvqStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SvqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvqStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SvqStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(SvqStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail(SvqStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail(SvqStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(SvqStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(SvqStatus::NullPointer, "output handle pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(invalid(format!("{what} has {got} elements, expected {want}")));
    }
    Ok(())
}

fn image_from(data: &[f32], size: usize) -> Result<RgbImage, Fail> {
    expect_len(data.len(), size * size * 3, "image")?;
    Ok(RgbImage::new(size, size, data.to_vec())?)
}

fn semantics_from(data: &[u8], size: usize) -> Result<SemanticMap, Fail> {
    expect_len(data.len(), size * size, "semantic map")?;
    Ok(SemanticMap::new(size, size, data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn svq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn svq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- datasets ----------------------------------------------------------------------

/// Generates `n` paired samples of `size` x `size` pixels.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_generate(n: usize, seed: u64, size: usize, out: *mut *mut SvqDataset) -> SvqStatus {
    guard(|| put(out, SvqDataset { samples: generate_dataset(n, seed, size)? }))
}

/// Reads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_read(dir: *const c_char, out: *mut *mut SvqDataset) -> SvqStatus {
    guard(|| {
        let d = path(dir)?;
        put(out, SvqDataset { samples: read_dataset(&d)? })
    })
}

/// Writes a dataset directory (PPM images, PGM maps, manifest).
///
/// # Safety
/// `ds` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_write(ds: *const SvqDataset, dir: *const c_char) -> SvqStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        Ok(write_dataset(&path(dir)?, &ds.samples)?)
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_len(ds: *const SvqDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.samples.len())
}

/// Image side length in pixels; 0 for a null or empty dataset.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_image_size(ds: *const SvqDataset) -> usize {
    ds.as_ref().and_then(|d| d.samples.first()).map_or(0, |s| s.size())
}

/// Copies sample `index` into `image` (`size*size*3` floats) and `semantics`
/// (`size*size` class ids). Either buffer may be null to skip it.
///
/// # Safety
/// Non-null buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_get(
    ds: *const SvqDataset,
    index: usize,
    image: *mut f32,
    image_len: usize,
    semantics: *mut u8,
    semantics_len: usize,
) -> SvqStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let s = ds
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} samples", ds.samples.len())))?;
        if !image.is_null() {
            expect_len(image_len, s.image.data.len(), "image buffer")?;
            slice_mut(image, image_len, "image")?.copy_from_slice(&s.image.data);
        }
        if !semantics.is_null() {
            expect_len(semantics_len, s.semantics.classes.len(), "semantics buffer")?;
            slice_mut(semantics, semantics_len, "semantics")?.copy_from_slice(&s.semantics.classes);
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svq_dataset_free(ds: *mut SvqDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- metrics -----------------------------------------------------------------------

/// Mean SSIM over the three channels of two `size x size` images.
///
/// # Safety
/// `a` and `b` must hold `size*size*3` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn svq_ssim(a: *const f32, b: *const f32, size: usize, out: *mut f64) -> SvqStatus {
    guard(|| {
        let n = size * size * 3;
        let ia = image_from(slice(a, n, "a")?, size)?;
        let ib = image_from(slice(b, n, "b")?, size)?;
        let v = ssim(&ia, &ib)?;
        *out.as_mut().ok_or_else(|| Fail(SvqStatus::NullPointer, "out is null".into()))? = v;
        Ok(())
    })
}

/// Mean IoU in percent over classes present in either map.
///
/// # Safety
/// `pred` and `gt` must hold `width*height` ids; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn svq_miou(
    pred: *const u8,
    gt: *const u8,
    width: usize,
    height: usize,
    num_classes: usize,
    out: *mut f64,
) -> SvqStatus {
    guard(|| {
        let n = width * height;
        let p = SemanticMap::new(width, height, slice(pred, n, "pred")?.to_vec())?;
        let g = SemanticMap::new(width, height, slice(gt, n, "gt")?.to_vec())?;
        let (v, _) = miou(&p, &g, num_classes)?;
        *out.as_mut().ok_or_else(|| Fail(SvqStatus::NullPointer, "out is null".into()))? = v;
        Ok(())
    })
}

/// Fréchet distance between the embeddings of two image sets, each given as
/// `count` consecutive `size*size*3` images.
///
/// # Safety
/// `a` must hold `count_a*size*size*3` floats, `b` likewise; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn svq_frechet_distance(
    a: *const f32,
    count_a: usize,
    b: *const f32,
    count_b: usize,
    size: usize,
    out: *mut f64,
) -> SvqStatus {
    guard(|| {
        let per = size * size * 3;
        let load = |p: *const f32, count: usize, what: &str| -> Result<Vec<RgbImage>, Fail> {
            slice(p, count * per, what)?.chunks(per).map(|c| image_from(c, size)).collect()
        };
        let v = frechet_distance(&load(a, count_a, "a")?, &load(b, count_b, "b")?)?;
        *out.as_mut().ok_or_else(|| Fail(SvqStatus::NullPointer, "out is null".into()))? = v;
        Ok(())
    })
}

// ---- trained models ------------------------------------------------------------------

/// Loads a run directory written by `svq train-ae` (and optionally `train-ar`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn svq_model_load(dir: *const c_char, out: *mut *mut SvqModel) -> SvqStatus {
    guard(|| {
        let (config, stage1, stage2) = load_run(&path(dir)?)?;
        put(out, SvqModel { config, stage1, stage2 })
    })
}

/// Image side length the model expects; 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svq_model_image_size(m: *const SvqModel) -> usize {
    m.as_ref().map_or(0, |m| m.config.image_size)
}

/// Latent grid side length; grids hold `latent_size^2` indices. 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svq_model_latent_size(m: *const SvqModel) -> usize {
    m.as_ref().map_or(0, |m| m.config.latent_size)
}

/// Whether the model is the coupled variant (1) or the decoupled baseline (0).
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svq_model_is_coupled(m: *const SvqModel) -> i32 {
    m.as_ref().map_or(0, |m| matches!(m.stage1.model, Stage1Model::Coupled(_)) as i32)
}

/// Encodes one (image, semantic map) pair to its semantic and image grids.
///
/// # Safety
/// Buffers must hold the stated element counts; outputs `latent_size^2` each.
#[no_mangle]
pub unsafe extern "C" fn svq_model_encode(
    m: *const SvqModel,
    image: *const f32,
    image_len: usize,
    semantics: *const u8,
    semantics_len: usize,
    z_semantic: *mut u32,
    z_image: *mut u32,
    grid_len: usize,
) -> SvqStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let size = m.config.image_size;
        let img = image_from(slice(image, image_len, "image")?, size)?;
        let sem = semantics_from(slice(semantics, semantics_len, "semantics")?, size)?;
        let sample = PairedSample::new(img, sem)?;
        let (zs, zx) = m.stage1.encode_pairs(&[&sample])?.remove(0);
        expect_len(grid_len, zs.len(), "grid buffers")?;
        for (dst, src) in [(z_semantic, &zs), (z_image, &zx)] {
            let d = slice_mut(dst, grid_len, "grid output")?;
            for (d, &s) in d.iter_mut().zip(src.indices()) {
                *d = s as u32;
            }
        }
        Ok(())
    })
}

fn grid(m: &SvqModel, data: &[u32], id: CodebookId) -> Result<LatentGrid, Fail> {
    let l = m.config.latent_size;
    expect_len(data.len(), l * l, "latent grid")?;
    let vocab = match id {
        CodebookId::Image => m.config.k_image,
        CodebookId::Semantic => m.config.k_semantic,
    };
    Ok(LatentGrid::new(l, l, data.iter().map(|&v| v as usize).collect(), id, vocab)?)
}

/// Decodes an image grid (with its semantic grid, which the baseline ignores).
///
/// # Safety
/// Grids hold `grid_len` indices; `image` holds `image_len` floats.
#[no_mangle]
pub unsafe extern "C" fn svq_model_decode(
    m: *const SvqModel,
    z_image: *const u32,
    z_semantic: *const u32,
    grid_len: usize,
    image: *mut f32,
    image_len: usize,
) -> SvqStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let zx = grid(m, slice(z_image, grid_len, "z_image")?, CodebookId::Image)?;
        let zs = grid(m, slice(z_semantic, grid_len, "z_semantic")?, CodebookId::Semantic)?;
        let img = m.stage1.decode_images(&[(&zx, &zs)])?.remove(0);
        expect_len(image_len, img.data.len(), "image buffer")?;
        slice_mut(image, image_len, "image")?.copy_from_slice(&img.data);
        Ok(())
    })
}

/// Samples an image grid conditioned on a semantic grid.
///
/// # Safety
/// Grids hold `grid_len` indices.
#[no_mangle]
pub unsafe extern "C" fn svq_model_sample(
    m: *const SvqModel,
    z_semantic: *const u32,
    grid_len: usize,
    temperature: f64,
    top_k: usize,
    seed: u64,
    z_image: *mut u32,
) -> SvqStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let s2 = m
            .stage2
            .as_ref()
            .ok_or_else(|| Fail(SvqStatus::Config, "model has no trained transformer".into()))?;
        let zs = grid(m, slice(z_semantic, grid_len, "z_semantic")?, CodebookId::Semantic)?;
        let zx = s2.model.sample(&zs, SamplingParams { temperature, top_k, seed })?;
        for (d, &s) in slice_mut(z_image, grid_len, "z_image")?.iter_mut().zip(zx.indices()) {
            *d = s as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svq_model_free(m: *mut SvqModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
