//! C interface to `mapdetect`.
//!
//! Every function returns an [`MdStatus`]. On failure a description is
//! available from [`md_last_error_message`] on the same thread. Arrays are
//! row-major `double` images; masks are `uint8_t` with 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mapdetect::calibration::select_threshold;
use mapdetect::evaluation::{dice, roc_from_pool};
use mapdetect::image::{LabeledImage, Mask};
use mapdetect::prior::{load_checkpoint, NormativePrior};
use mapdetect::restoration::{map_restore, tv_norm, RestorationConfig, TvUpdate};
use mapdetect::Error;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numerical = 5,
    Internal = 6,
}

/// Opaque handle to a trained prior.
pub struct MdPrior {
    model: NormativePrior,
}

/// Restoration settings. Obtain defaults from [`md_restore_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MdRestoreOptions {
    pub lambda: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Nonzero for the proximal TV step, zero for the plain subgradient step.
    pub proximal: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MdStatus {
    match e {
        Error::Io { .. } | Error::Artifact { .. } => MdStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => MdStatus::Checkpoint,
        Error::Restoration { .. } | Error::Training { .. } => MdStatus::Numerical,
        _ => MdStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and panics.
fn guard(f: impl FnOnce() -> Result<(), (MdStatus, String)>) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MdStatus::Internal
        }
    }
}

fn lib<T>(r: mapdetect::Result<T>) -> Result<T, (MdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MdStatus, String) {
    (MdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (MdStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (MdStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn mask_from(bytes: &[u8], h: usize, w: usize) -> Result<Mask, (MdStatus, String)> {
    if bytes.iter().any(|&b| b > 1) {
        return Err((MdStatus::InvalidArgument, "mask values must be 0 or 1".into()));
    }
    Ok(Mask::from_shape_vec((h, w), bytes.iter().map(|&b| b == 1).collect()).expect("length matches"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn md_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. Free the handle with [`md_prior_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_prior_load(path: *const c_char, out: *mut *mut MdPrior) -> MdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = lib(load_checkpoint(Path::new(p)))?;
        *out = Box::into_raw(Box::new(MdPrior { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `prior` must come from [`md_prior_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_prior_free(prior: *mut MdPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Image height and width, latent size and number of mixture components
/// (1 for a VAE).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn md_prior_info(
    prior: *const MdPrior,
    height: *mut usize,
    width: *mut usize,
    latent_dim: *mut usize,
    mixture_count: *mut usize,
) -> MdStatus {
    guard(|| {
        let p = prior.as_ref().ok_or_else(|| null("prior"))?;
        if height.is_null() || width.is_null() || latent_dim.is_null() || mixture_count.is_null() {
            return Err(null("output"));
        }
        let c = &p.model.config;
        *height = c.image_shape[0];
        *width = c.image_shape[1];
        *latent_dim = c.latent_dim;
        *mixture_count = c.components();
        Ok(())
    })
}

/// Monte-Carlo ELBO of `count` images stored back to back; one value per
/// image is written to `out`.
///
/// # Safety
/// `pixels` must hold `count * height * width` values and `out` `count`.
#[no_mangle]
pub unsafe extern "C" fn md_prior_elbo(
    prior: *const MdPrior,
    pixels: *const f64,
    count: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        let p = prior.as_ref().ok_or_else(|| null("prior"))?;
        let n = p.model.config.pixels();
        let x = slice(pixels, count * n, "pixels")?;
        let out = slice_mut(out, count, "out")?;
        if samples == 0 {
            return Err((MdStatus::InvalidArgument, "samples must be positive".into()));
        }
        let x = Array2::from_shape_vec((count, n), x.to_vec()).expect("length matches");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = lib(p.model.elbo(x.view(), &mut rng, samples))?;
        out.copy_from_slice(&v);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn md_restore_options_default() -> MdRestoreOptions {
    let d = RestorationConfig::default();
    MdRestoreOptions {
        lambda: d.lambda,
        total_steps: d.total_steps,
        seed: d.seed,
        proximal: u8::from(d.tv_update == TvUpdate::Proximal),
    }
}

/// MAP restoration of one image with the default step schedule. Writes the
/// restored image and the signed difference `Y - X`.
///
/// # Safety
/// `pixels`, `foreground`, `restored` and `difference` must each hold
/// `height * width` elements matching the prior's image shape.
#[no_mangle]
pub unsafe extern "C" fn md_restore(
    prior: *const MdPrior,
    pixels: *const f64,
    foreground: *const u8,
    options: MdRestoreOptions,
    restored: *mut f64,
    difference: *mut f64,
) -> MdStatus {
    guard(|| {
        let p = prior.as_ref().ok_or_else(|| null("prior"))?;
        let [h, w] = p.model.config.image_shape;
        let y = slice(pixels, h * w, "pixels")?;
        let fg = mask_from(slice(foreground, h * w, "foreground")?, h, w)?;
        let restored = slice_mut(restored, h * w, "restored")?;
        let difference = slice_mut(difference, h * w, "difference")?;
        let image = LabeledImage {
            pixels: Array2::from_shape_vec((h, w), y.to_vec()).expect("length matches"),
            anomaly_mask: Mask::from_elem((h, w), false),
            foreground_mask: fg,
            subject_id: "external".into(),
            slice_id: 0,
            seed: options.seed,
            normalization: None,
        };
        let config = RestorationConfig {
            lambda: options.lambda,
            total_steps: options.total_steps,
            seed: options.seed,
            tv_update: if options.proximal != 0 {
                TvUpdate::Proximal
            } else {
                TvUpdate::Subgradient
            },
            ..RestorationConfig::default()
        };
        let r = lib(map_restore(&p.model, &image, &config))?;
        restored.copy_from_slice(r.restored.as_slice().expect("standard layout"));
        difference.copy_from_slice(r.difference.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Anisotropic total variation over in-mask neighbour pairs.
///
/// # Safety
/// `image` and `mask` must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn md_tv_norm(
    image: *const f64,
    mask: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        let x = slice(image, height * width, "image")?;
        let m = mask_from(slice(mask, height * width, "mask")?, height, width)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = Array2::from_shape_vec((height, width), x.to_vec()).expect("length matches");
        *out = tv_norm(&img, &m);
        Ok(())
    })
}

/// Area under the ROC curve of pooled scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `count` elements.
#[no_mangle]
pub unsafe extern "C" fn md_roc_auc(scores: *const f64, labels: *const u8, count: usize, out: *mut f64) -> MdStatus {
    guard(|| {
        let s = slice(scores, count, "scores")?;
        let l = slice(labels, count, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let labels: Vec<bool> = l.iter().map(|&b| b != 0).collect();
        *out = lib(roc_from_pool(s, &labels))?.auc;
        Ok(())
    })
}

/// Dice coefficient of two 0/1 masks; 1 when both are empty.
///
/// # Safety
/// `a` and `b` must hold `count` elements.
#[no_mangle]
pub unsafe extern "C" fn md_dice(a: *const u8, b: *const u8, count: usize, out: *mut f64) -> MdStatus {
    guard(|| {
        let a = mask_from(slice(a, count, "a")?, 1, count)?;
        let b = mask_from(slice(b, count, "b")?, 1, count)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = dice(&a, &b);
        Ok(())
    })
}

/// Smallest pool value `T` with at most `fpr_limit` of the pool above it.
///
/// # Safety
/// `pool` must hold `count` elements.
#[no_mangle]
pub unsafe extern "C" fn md_select_threshold(pool: *const f64, count: usize, fpr_limit: f64, out: *mut f64) -> MdStatus {
    guard(|| {
        let p = slice(pool, count, "pool")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut sorted = p.to_vec();
        sorted.sort_by(f64::total_cmp);
        *out = lib(select_threshold(&sorted, fpr_limit))?;
        Ok(())
    })
}
