//! C ABI over `cvae-nf`: load a checkpoint, sample, reconstruct, score NLL, and compute
//! Fréchet distances.
//!
//! Every function returns a [`CvaeStatus`]. On failure, [`cvae_last_error`] returns a
//! message for the calling thread. Images are row-major `[N, C, H, W]` f32 in `[0, 1]`;
//! attributes are row-major `[N, A]` f32 in `{0, 1}`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cvae_nf::checkpoint;
use cvae_nf::data::{Dataset, LabeledBatch};
use cvae_nf::inference::{sample_images, SampleMode};
use cvae_nf::metrics::{frechet_distance, FeatureStats, ImageModel};
use cvae_nf::models::{CvaeModel, Setting};
use cvae_nf::training::evaluate_nll;
use cvae_nf::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
    Panic = 8,
}

/// Model settings as reported by [`cvae_model_dims`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvaeSetting {
    Gaussian = 0,
    SigmaNonnf = 1,
    SigmaNf = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CvaeDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub attr_dim: usize,
}

/// Opaque handle to a loaded model.
pub struct CvaeModelHandle {
    model: CvaeModel,
    sigma_sq: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CvaeStatus {
    match e {
        Error::Io { .. } | Error::MissingImage(_) => CvaeStatus::Io,
        Error::Checkpoint(_) => CvaeStatus::Checkpoint,
        Error::DimensionMismatch { .. }
        | Error::Shape { .. }
        | Error::EmptyBatch(_)
        | Error::EmptyDataset(_) => CvaeStatus::Shape,
        Error::NonFinite { .. } | Error::MatrixSqrt(_) => CvaeStatus::Numeric,
        Error::Config(_) | Error::Attributes(_) | Error::AttrTable { .. } | Error::FeatureFile { .. } => {
            CvaeStatus::InvalidArgument
        }
        _ => CvaeStatus::Internal,
    }
}

struct Fail(CvaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CvaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CvaeStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(CvaeStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), Fail> {
    if expected != got {
        return Err(Fail(
            CvaeStatus::Shape,
            format!("{what}: expected {expected} values, got {got}"),
        ));
    }
    Ok(())
}

/// # Safety
/// `h` must be null or a live handle from [`cvae_model_load`].
unsafe fn handle<'a>(h: *const CvaeModelHandle) -> Result<&'a CvaeModelHandle, Fail> {
    non_null(h, "model handle")?;
    Ok(&*h)
}

fn rows(attrs: &[f32], a: usize) -> Vec<Vec<f32>> {
    attrs.chunks(a.max(1)).map(<[f32]>::to_vec).collect()
}

/// Message for the last failure on this thread, or null. Valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn cvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by the `cvae-nf train` command.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn cvae_model_load(path: *const c_char, out: *mut *mut CvaeModelHandle) -> CvaeStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(CvaeStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, sigma_sq) = checkpoint::load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(CvaeModelHandle { model, sigma_sq }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle from [`cvae_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cvae_model_free(h: *mut CvaeModelHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `dims` and `setting` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn cvae_model_dims(
    h: *const CvaeModelHandle,
    dims: *mut CvaeDims,
    setting: *mut CvaeSetting,
) -> CvaeStatus {
    guard(|| {
        let h = handle(h)?;
        non_null(dims, "dims")?;
        non_null(setting, "setting")?;
        let c = h.model.config();
        *dims = CvaeDims {
            channels: c.channels,
            height: c.height,
            width: c.width,
            latent_dim: c.latent_dim,
            attr_dim: c.attr_dim,
        };
        *setting = match c.setting {
            Setting::Gaussian => CvaeSetting::Gaussian,
            Setting::SigmaNonnf => CvaeSetting::SigmaNonnf,
            Setting::SigmaNf => CvaeSetting::SigmaNf,
        };
        Ok(())
    })
}

/// Decoder variance stored with the checkpoint.
///
/// # Safety
/// `h` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn cvae_model_sigma_sq(h: *const CvaeModelHandle, out: *mut f64) -> CvaeStatus {
    guard(|| {
        let h = handle(h)?;
        non_null(out, "out")?;
        *out = h.sigma_sq;
        Ok(())
    })
}

/// Draws `n` images, one per attribute row. `out_len` must equal `n * C * H * W`.
///
/// # Safety
/// `attrs` must hold `n * A` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn cvae_sample(
    h: *const CvaeModelHandle,
    attrs: *const f32,
    n: usize,
    seed: u64,
    through_flow: bool,
    out: *mut f32,
    out_len: usize,
) -> CvaeStatus {
    guard(|| {
        let h = handle(h)?;
        let c = h.model.config();
        let attrs = slice(attrs, n * c.attr_dim, "attrs")?;
        check_len("out", n * c.pixels(), out_len)?;
        let out = slice_mut(out, out_len, "out")?;
        let mode = if through_flow {
            SampleMode::ThroughFlow
        } else {
            SampleMode::Affine
        };
        let images = sample_images(&h.model, &rows(attrs, c.attr_dim), seed, mode)?;
        out.copy_from_slice(&images);
        Ok(())
    })
}

/// Reconstructs `n` images at the posterior mean.
///
/// # Safety
/// `images` and `out` must hold `n * C * H * W` values, `attrs` `n * A`.
#[no_mangle]
pub unsafe extern "C" fn cvae_reconstruct(
    h: *const CvaeModelHandle,
    images: *const f32,
    attrs: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> CvaeStatus {
    guard(|| {
        let h = handle(h)?;
        let c = h.model.config();
        let batch = LabeledBatch {
            channels: c.channels,
            height: c.height,
            width: c.width,
            attr_dim: c.attr_dim,
            images: slice(images, n * c.pixels(), "images")?.to_vec(),
            attrs: slice(attrs, n * c.attr_dim, "attrs")?.to_vec(),
        };
        check_len("out", n * c.pixels(), out_len)?;
        let out = slice_mut(out, out_len, "out")?;
        if n > 0 {
            out.copy_from_slice(&h.model.reconstruct_batch(&batch)?);
        }
        Ok(())
    })
}

/// Mean per-image negative log-likelihood of `n` images at the posterior mean, using the
/// checkpoint's decoder variance.
///
/// # Safety
/// `images` must hold `n * C * H * W` values, `attrs` `n * A`, `out` one writable value.
#[no_mangle]
pub unsafe extern "C" fn cvae_nll(
    h: *const CvaeModelHandle,
    images: *const f32,
    attrs: *const f32,
    n: usize,
    out: *mut f64,
) -> CvaeStatus {
    guard(|| {
        let h = handle(h)?;
        non_null(out, "out")?;
        let c = h.model.config();
        if c.channels != 3 {
            return Err(Fail(
                CvaeStatus::InvalidArgument,
                "only RGB models are supported".into(),
            ));
        }
        let data = Dataset::new(
            c.height,
            c.width,
            (0..c.attr_dim).map(|i| format!("a{i}")).collect(),
            (0..n).map(|i| i.to_string()).collect(),
            slice(images, n * c.pixels(), "images")?.to_vec(),
            slice(attrs, n * c.attr_dim, "attrs")?.to_vec(),
        )?;
        *out = evaluate_nll(&h.model, &data, h.sigma_sq, 64)?;
        Ok(())
    })
}

/// Fréchet distance between `N(mean_a, cov_a)` and `N(mean_b, cov_b)` in `dim` dimensions.
/// Covariances are row-major `dim x dim`.
///
/// # Safety
/// Means must hold `dim` values, covariances `dim * dim`, `out` one writable value.
#[no_mangle]
pub unsafe extern "C" fn cvae_frechet(
    mean_a: *const f64,
    cov_a: *const f64,
    mean_b: *const f64,
    cov_b: *const f64,
    dim: usize,
    out: *mut f64,
) -> CvaeStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(Fail(CvaeStatus::InvalidArgument, "dim must be positive".into()));
        }
        let a = FeatureStats::from_slices(
            slice(mean_a, dim, "mean_a")?,
            slice(cov_a, dim * dim, "cov_a")?,
            0,
        )?;
        let b = FeatureStats::from_slices(
            slice(mean_b, dim, "mean_b")?,
            slice(cov_b, dim * dim, "cov_b")?,
            0,
        )?;
        *out = frechet_distance(&a, &b)?;
        Ok(())
    })
}
