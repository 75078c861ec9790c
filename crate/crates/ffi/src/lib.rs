//! C ABI over the `stgdance` core.
//!
//! Every fallible function returns an [`StgStatus`]. On failure a message is
//! kept per thread and can be read with [`stg_last_error`]. Handles are
//! opaque, owned by the caller and released with the matching `*_free`
//! function. Panics never cross the boundary; they surface as
//! [`StgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use stgdance::checkpoint::Checkpoint;
use stgdance::data::{self, gen_synthetic, MotionFile, MotionSample, NormStats, Style, SynthConfig};
use stgdance::kv::KvMap;
use stgdance::metrics;
use stgdance::train::TrainConfig;
use stgdance::{Denoiser, DenoiserConfig, Error, Tensor};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument, configuration or shape.
    InvalidArgument = 2,
    Io = 3,
    /// A file did not parse.
    Format = 4,
    /// Non-finite values or training divergence.
    Numeric = 5,
    /// Artifact does not match the requested configuration.
    Mismatch = 6,
    /// The caller's buffer is too small.
    BufferTooSmall = 7,
    /// An internal invariant failed.
    Internal = 8,
    Panic = 9,
}

/// A denoiser with its normalisation statistics and noise schedule.
pub struct StgModel {
    ckpt: Checkpoint,
}

/// Group motion, `dancers x frames x channels`, with its conditioning.
pub struct StgMotion {
    file: MotionFile,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> StgStatus {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Metric(_) => StgStatus::InvalidArgument,
        Error::Io { .. } => StgStatus::Io,
        Error::Format { .. } => StgStatus::Format,
        Error::Numeric { .. } | Error::Divergence { .. } => StgStatus::Numeric,
        Error::Mismatch(_) => StgStatus::Mismatch,
        Error::Bench(_) | Error::Coverage(_) => StgStatus::Internal,
    }
}

struct Fail(StgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(StgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(StgStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            StgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            StgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an untrained model. `config` holds `key=value` lines (may be
/// null for the defaults); unknown keys are rejected.
///
/// # Safety
/// `config` must be null or a valid NUL-terminated string and `out` a valid
/// pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn stg_model_new(config: *const c_char, seed: u64, out: *mut *mut StgModel) -> StgStatus {
    guard(|| {
        let mut kv = KvMap::parse(opt_str_arg(config, "config")?.unwrap_or(""))?;
        let cfg = DenoiserConfig::take_from(&mut kv)?;
        kv.finish()?;
        let d_in = cfg.d_in;
        let ckpt = Checkpoint {
            model: Denoiser::new(cfg, seed)?,
            stats: NormStats::identity(d_in),
            schedule: TrainConfig::default().schedule_spec(),
            epoch: 0,
            adam: None,
        };
        put(out, StgModel { ckpt })
    })
}

/// Loads a checkpoint written by `stgdance train` or [`stg_model_save`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stg_model_load(path: *const c_char, out: *mut *mut StgModel) -> StgStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, StgModel { ckpt })
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn stg_model_save(model: *const StgModel, path: *const c_char) -> StgStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.ckpt.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Input channels and conditioning width the model expects.
///
/// # Safety
/// `model` must come from this library; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn stg_model_dims(model: *const StgModel, d_in: *mut usize, music_dim: *mut usize) -> StgStatus {
    guard(|| {
        let cfg = deref(model, "model")?.ckpt.model.config();
        if let Some(p) = d_in.as_mut() {
            *p = cfg.d_in;
        }
        if let Some(p) = music_dim.as_mut() {
            *p = cfg.music_dim;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_model_free(model: *mut StgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Synthesises a group performance. `style` is one of circle, line,
/// figure8, crossover.
///
/// # Safety
/// `style` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_synthesize(
    style: *const c_char,
    dancers: usize,
    frames: usize,
    seed: u64,
    out: *mut *mut StgMotion,
) -> StgStatus {
    guard(|| {
        let style: Style = str_arg(style, "style")?.parse()?;
        let cfg = SynthConfig {
            n_dancers: dancers,
            length: frames,
            ..SynthConfig::short()
        };
        let sample = gen_synthetic(&cfg, style, seed)?;
        let stats = NormStats::from_motions(&[&sample.motion])?;
        let file = MotionFile {
            sample,
            stats,
            position_channels: DenoiserConfig::default().position_channels,
        };
        put(out, StgMotion { file })
    })
}

/// Wraps caller data (`dancers * frames * channels` values, dancer-major,
/// then frame, then channel). Root positions are channels 0 and 1. The
/// conditioning is the synthetic default for a circle formation.
///
/// # Safety
/// `data` must point to `dancers * frames * channels` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_from_data(
    data: *const f64,
    dancers: usize,
    frames: usize,
    channels: usize,
    out: *mut *mut StgMotion,
) -> StgStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if dancers == 0 || frames == 0 || channels < 2 {
            return Err(invalid("need at least one dancer, one frame and two channels"));
        }
        let len = dancers
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| invalid("motion size overflows"))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let motion = Tensor::new(&[dancers, frames, channels], values)?;
        motion.ensure_finite("motion data")?;
        let stats = NormStats::from_motions(&[&motion])?;
        let tempo = SynthConfig::short().tempo;
        let file = MotionFile {
            sample: MotionSample {
                music: data::conditioning(frames, Style::Circle, tempo),
                contact_mask: Tensor::zeros(&[dancers, frames]),
                motion,
                style: None,
                seed: 0,
                tempo,
            },
            stats,
            position_channels: [0, 1],
        };
        put(out, StgMotion { file })
    })
}

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_load(path: *const c_char, out: *mut *mut StgMotion) -> StgStatus {
    guard(|| {
        let file = MotionFile::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, StgMotion { file })
    })
}

/// # Safety
/// `motion` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_save(motion: *const StgMotion, path: *const c_char) -> StgStatus {
    guard(|| {
        let m = deref(motion, "motion")?;
        m.file.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `motion` must come from this library; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_dims(
    motion: *const StgMotion,
    dancers: *mut usize,
    frames: *mut usize,
    channels: *mut usize,
) -> StgStatus {
    guard(|| {
        let (n, l, d) = deref(motion, "motion")?.file.sample.dims();
        for (p, v) in [(dancers, n), (frames, l), (channels, d)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the motion values into `buf` in the layout of
/// [`stg_motion_from_data`]. `len` is the capacity in doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_copy_data(motion: *const StgMotion, buf: *mut f64, len: usize) -> StgStatus {
    guard(|| {
        let data = deref(motion, "motion")?.file.sample.motion.data();
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len < data.len() {
            return Err(Fail(
                StgStatus::BufferTooSmall,
                format!("buffer holds {len} values, motion has {}", data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `motion` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_motion_free(motion: *mut StgMotion) {
    if !motion.is_null() {
        drop(Box::from_raw(motion));
    }
}

/// Samples `dancers` dancers conditioned on the music of `conditioning`.
/// `steps` of 0 uses the model's training schedule.
///
/// # Safety
/// Handles must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stg_generate(
    model: *const StgModel,
    conditioning: *const StgMotion,
    dancers: usize,
    steps: usize,
    seed: u64,
    deterministic: bool,
    out: *mut *mut StgMotion,
) -> StgStatus {
    guard(|| {
        let ckpt = &deref(model, "model")?.ckpt;
        let cond = &deref(conditioning, "conditioning")?.file.sample;
        let steps = (steps > 0).then_some(steps);
        let motion = ckpt.sample(&cond.music, dancers, steps, seed, deterministic)?;
        let frames = cond.music.rows();
        let file = MotionFile {
            sample: MotionSample {
                motion,
                music: cond.music.clone(),
                contact_mask: Tensor::zeros(&[dancers, frames]),
                style: cond.style,
                seed,
                tempo: cond.tempo,
            },
            stats: ckpt.stats.clone(),
            position_channels: ckpt.model.config().position_channels,
        };
        put(out, StgMotion { file })
    })
}

/// Fraction of frames in which some pair of dancers is closer than `delta`.
///
/// # Safety
/// `motion` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stg_metric_tif(motion: *const StgMotion, delta: f64, out: *mut f64) -> StgStatus {
    guard(|| {
        let f = &deref(motion, "motion")?.file;
        if delta.is_nan() || delta <= 0.0 {
            return Err(invalid(format!("delta must be positive, got {delta}")));
        }
        let v = metrics::tif(&f.sample.motion, delta, f.position_channels)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Mean pairwise correlation of dancer speed profiles.
///
/// # Safety
/// `motion` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stg_metric_gmc(motion: *const StgMotion, out: *mut f64) -> StgStatus {
    guard(|| {
        let f = &deref(motion, "motion")?.file;
        let v = metrics::gmc_proxy(&f.sample.motion, f.position_channels)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
