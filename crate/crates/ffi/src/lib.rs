//! C ABI over the `aaface` library.
//!
//! Handles are opaque pointers created by `*_new` and released by the
//! matching `*_free`. Every fallible call returns an [`AafStatus`]; on
//! failure [`aaf_last_error`] describes the most recent error raised on the
//! calling thread. Models compute in f32.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use aaface::attention::{AaiConfig, AaiModule};
use aaface::config::RunConfig;
use aaface::evaluation::tar_at_far;
use aaface::network::{cosine_similarity, Branch, Network};
use aaface::params::ParamStore;
use aaface::weights::{load_weights, save_weights};
use aaface::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AafStatus {
    Ok = 0,
    /// Invalid argument, configuration, shape or protocol.
    Invalid = 1,
    /// Non-finite values or degenerate embeddings.
    Numerical = 2,
    /// File access or file format error.
    Io = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Which embedding [`aaf_model_embed`] returns.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AafBranch {
    Baseline = 0,
    Fused = 1,
}

/// Opaque model handle.
pub struct AafModel {
    net: Network<f32>,
}

/// Opaque standalone AAI module.
pub struct AafAai {
    store: ParamStore<f32>,
    module: AaiModule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AafStatus {
    match e.exit_code() {
        2 => AafStatus::Numerical,
        3 => AafStatus::Io,
        _ => AafStatus::Invalid,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Invalid(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AafStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AafStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is NULL"));
            AafStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            AafStatus::Invalid
        }
        Err(_) => {
            set_error("internal panic".to_string());
            AafStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn image_tensor(data: &[f32], n: usize, c: usize, h: usize, w: usize) -> Result<Tensor<f32>, Failure> {
    Ok(Tensor::new([n, c, h, w], data.to_vec())?)
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Failure::Invalid("tensor size overflows".into()))
}

fn copy_out(dst: &mut [f32], src: &[f32], what: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Failure::Invalid(format!(
            "{what} buffer holds {} values, {} required",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aaf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last error on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aaf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from config text (NULL for defaults) for `n_identities`
/// training identities, initialised from `seed`.
///
/// # Safety
/// `config` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_new(
    config: *const c_char,
    n_identities: usize,
    seed: u64,
    out: *mut *mut AafModel,
) -> AafStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse_str(str_arg(config, "config")?)?
        };
        let mut net_cfg = cfg.network.clone();
        net_cfg.n_identities = n_identities;
        net_cfg.in_channels = cfg.data.channels;
        let net = Network::new(net_cfg, seed)?;
        *out = Box::into_raw(Box::new(AafModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`aaf_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_free(model: *mut AafModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_load_weights(model: *mut AafModel, path: *const c_char) -> AafStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Failure::Null("model"))?;
        let path = str_arg(path, "path")?;
        load_weights(Path::new(path), m.net.params_mut())?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_save_weights(model: *const AafModel, path: *const c_char) -> AafStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = str_arg(path, "path")?;
        save_weights(Path::new(path), m.net.params())?;
        Ok(())
    })
}

/// Embedding width, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_embedding_dim(model: *const AafModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config().embedding_dim)
}

/// Number of attribute heads, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_num_attributes(model: *const AafModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config().attributes.len())
}

/// Embeds `n` images of shape `(c, h, w)` into `out` (`n * embedding_dim`
/// floats, row-major).
///
/// # Safety
/// `images` must hold `n * c * h * w` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_embed(
    model: *const AafModel,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    branch: AafBranch,
    out: *mut f32,
    out_len: usize,
) -> AafStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = image_tensor(in_slice(images, checked_len(&[n, c, h, w])?, "images")?, n, c, h, w)?;
        let branch = match branch {
            AafBranch::Baseline => Branch::Baseline,
            AafBranch::Fused => Branch::Fused,
        };
        let e = m.net.embed(&x, branch)?;
        copy_out(out_slice(out, out_len, "out")?, e.data(), "embedding")
    })
}

/// Attribute probabilities of `n` images into `out` (`n * num_attributes`).
///
/// # Safety
/// `images` must hold `n * c * h * w` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn aaf_model_attribute_probs(
    model: *const AafModel,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> AafStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = image_tensor(in_slice(images, checked_len(&[n, c, h, w])?, "images")?, n, c, h, w)?;
        let feats = m.net.backbone_features(&x)?;
        let p = m.net.attribute_probs(&feats)?;
        copy_out(out_slice(out, out_len, "out")?, p.data(), "probability")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aaf_aai_new(channels: usize, reduction: usize, seed: u64, out: *mut *mut AafAai) -> AafStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = AaiConfig::new(channels, reduction)?;
        let (store, module) = AaiModule::standalone(cfg, seed)?;
        *out = Box::into_raw(Box::new(AafAai { store, module }));
        Ok(())
    })
}

/// # Safety
/// `aai` must be NULL or a handle from [`aaf_aai_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aaf_aai_free(aai: *mut AafAai) {
    if !aai.is_null() {
        drop(Box::from_raw(aai));
    }
}

/// Fuses two `(n, c, h, w)` maps. `fused` and `m_c` receive `n*c*h*w`
/// floats, `m_s` receives `n*h*w`. `m_c` and `m_s` may be NULL.
///
/// # Safety
/// All non-NULL buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn aaf_aai_fuse(
    aai: *const AafAai,
    f_fr: *const f32,
    f_sb: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    fused: *mut f32,
    m_c: *mut f32,
    m_s: *mut f32,
) -> AafStatus {
    guard(|| {
        let a = handle(aai, "aai")?;
        let len = checked_len(&[n, c, h, w])?;
        let x = image_tensor(in_slice(f_fr, len, "f_fr")?, n, c, h, w)?;
        let y = image_tensor(in_slice(f_sb, len, "f_sb")?, n, c, h, w)?;
        let (out, gates) = a.module.fuse_values(&a.store, &x, &y)?;
        copy_out(out_slice(fused, len, "fused")?, out.data(), "fused")?;
        if !m_c.is_null() {
            copy_out(out_slice(m_c, len, "m_c")?, gates.m_c.data(), "m_c")?;
        }
        if !m_s.is_null() {
            copy_out(out_slice(m_s, n * h * w, "m_s")?, gates.m_s.data(), "m_s")?;
        }
        Ok(())
    })
}

/// Cosine similarity of two `len`-vectors.
///
/// # Safety
/// `a` and `b` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aaf_cosine_similarity(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> AafStatus {
    guard(|| {
        let s = cosine_similarity(in_slice(a, len, "a")?, in_slice(b, len, "b")?)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = s;
        Ok(())
    })
}

/// Threshold and TAR at each FAR target. `below_resolution` (may be NULL)
/// receives 1 where the target is finer than `1 / n_impostor`.
///
/// # Safety
/// Input buffers must hold the stated counts; each output `n_targets` values.
#[no_mangle]
pub unsafe extern "C" fn aaf_tar_at_far(
    genuine: *const f64,
    n_genuine: usize,
    impostor: *const f64,
    n_impostor: usize,
    far_targets: *const f64,
    n_targets: usize,
    thresholds: *mut f64,
    tars: *mut f64,
    below_resolution: *mut u8,
) -> AafStatus {
    guard(|| {
        let points = tar_at_far(
            in_slice(genuine, n_genuine, "genuine")?,
            in_slice(impostor, n_impostor, "impostor")?,
            in_slice(far_targets, n_targets, "far_targets")?,
        )?;
        let th = out_slice(thresholds, n_targets, "thresholds")?;
        let ta = out_slice(tars, n_targets, "tars")?;
        for (i, p) in points.iter().enumerate() {
            th[i] = p.threshold;
            ta[i] = p.tar;
        }
        if !below_resolution.is_null() {
            let br = out_slice(below_resolution, n_targets, "below_resolution")?;
            for (i, p) in points.iter().enumerate() {
                br[i] = p.below_resolution as u8;
            }
        }
        Ok(())
    })
}
