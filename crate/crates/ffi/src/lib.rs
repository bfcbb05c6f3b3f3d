//! C ABI over the `stagan` library.
//!
//! Every function returns a [`StaganStatus`]; on failure the message is
//! available from [`stagan_last_error_message`] until the next failing call on
//! the same thread. Models are opaque handles released with
//! [`stagan_model_free`]. Frames cross the boundary as `T x 3 x H x W` float
//! arrays in `[-1, 1]`, planar per frame.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stagan::error::Error;
use stagan::frames::{Clip, Frame};
use stagan::metrics;
use stagan::synthdata::{generate_clips, write_dataset, DatasetManifest, SceneConfig};
use stagan::trainkit::{self, synthesize_clip, TrainConfig, TrainState};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Data = 6,
    Checkpoint = 7,
    Numeric = 8,
    Panic = 9,
}

/// A loaded checkpoint.
pub struct StaganModel {
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> StaganStatus {
    match e {
        Error::Config(_) => StaganStatus::Config,
        Error::Shape(_) => StaganStatus::Shape,
        Error::Io { .. } => StaganStatus::Io,
        Error::Checkpoint(_) => StaganStatus::Checkpoint,
        Error::Numeric { .. } => StaganStatus::Numeric,
        _ => StaganStatus::Data,
    }
}

struct Failure(StaganStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StaganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StaganStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            StaganStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(StaganStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(StaganStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn stagan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stagan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the checkpoint directory `path` into `*out`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stagan_model_load(path: *const c_char, out: *mut *mut StaganModel) -> StaganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = string_arg(path, "path")?;
        let state = trainkit::load_checkpoint(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(StaganModel { state }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`stagan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stagan_model_free(model: *mut StaganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frame side the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stagan_model_image_size(model: *const StaganModel, out: *mut usize) -> StaganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.state.config.image_size();
        Ok(())
    })
}

/// Ablation setting of the model as an ASCII letter `A`..`F`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stagan_model_ablation(model: *const StaganModel, out: *mut c_char) -> StaganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.state.config.ablation.letter() as c_char;
        Ok(())
    })
}

/// # Safety
/// `data` must point to `frames * 3 * size * size` floats.
unsafe fn read_clip(data: *const f32, frames: usize, size: usize, what: &str) -> Result<Clip, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let per = 3 * size * size;
    let all = std::slice::from_raw_parts(data, frames * per);
    let frames = all.chunks_exact(per).map(|c| Frame::new(size, size, c.to_vec())).collect::<Result<Vec<_>, _>>()?;
    Ok(Clip::new(frames)?)
}

/// Synthesizes `frames` egocentric frames from exo frames and semantic maps,
/// each `frames x 3 x size x size`, into `out` of the same layout. When the
/// model fuses with attention and `attention_out` is not null, it receives
/// `frames x 4 x size x size` weights in branch order temporal-down,
/// temporal-up, spatial-down, spatial-up.
///
/// # Safety
/// All arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn stagan_synthesize(
    model: *const StaganModel,
    exo: *const f32,
    sem: *const f32,
    frames: usize,
    size: usize,
    out: *mut f32,
    attention_out: *mut f32,
) -> StaganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if frames == 0 || size == 0 {
            return Err(invalid("frames and size must be positive"));
        }
        let exo = read_clip(exo, frames, size, "exo")?;
        let sem = read_clip(sem, frames, size, "sem")?;
        let (clip, maps) = synthesize_clip(&m.state.nets, m.state.config.ablation, &exo, &sem)?;
        let per = 3 * size * size;
        let dst = std::slice::from_raw_parts_mut(out, frames * per);
        for (chunk, f) in dst.chunks_exact_mut(per).zip(clip.frames()) {
            chunk.copy_from_slice(f.data());
        }
        if let (Some(maps), false) = (maps, attention_out.is_null()) {
            let hw = size * size;
            let dst = std::slice::from_raw_parts_mut(attention_out, frames * 4 * hw);
            for (chunk, m) in dst.chunks_exact_mut(4 * hw).zip(&maps) {
                for k in 0..4 {
                    chunk[k * hw..(k + 1) * hw].copy_from_slice(&m.maps[k]);
                }
            }
        }
        Ok(())
    })
}

/// Writes a synthetic dataset (`train_clips` + `test_clips` clips of
/// `frames` frames at `size` pixels) to the directory `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn stagan_generate_dataset(
    out_dir: *const c_char,
    seed: u64,
    train_clips: usize,
    test_clips: usize,
    size: usize,
    frames: usize,
) -> StaganStatus {
    guard(|| {
        let root = PathBuf::from(string_arg(out_dir, "out_dir")?);
        let scene = SceneConfig { image_size: size, clip_length: frames, seed, ..SceneConfig::default() };
        scene.validate()?;
        let first = seed.wrapping_mul(100_000);
        let train = generate_clips(&scene, first, train_clips)?;
        let test = generate_clips(&scene, first + train_clips as u64, test_clips)?;
        for (split, samples) in [("train", &train), ("test", &test)] {
            if !samples.is_empty() {
                write_dataset(samples, &DatasetManifest::describe(samples, split, &scene), &root)?;
            }
        }
        Ok(())
    })
}

/// Trains from a JSON configuration (the CLI schema; missing fields take
/// defaults) and writes the final checkpoint to `<checkpoint_dir>/final`.
///
/// # Safety
/// Both arguments must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn stagan_train(config_json: *const c_char, checkpoint_dir: *const c_char) -> StaganStatus {
    guard(|| {
        let json = string_arg(config_json, "config_json")?;
        let mut cfg: TrainConfig =
            serde_json::from_str(&json).map_err(|e| Failure(StaganStatus::Config, format!("config: {e}")))?;
        cfg.checkpoint_dir = Some(PathBuf::from(string_arg(checkpoint_dir, "checkpoint_dir")?));
        trainkit::train(cfg)?;
        Ok(())
    })
}

type PairMetric = fn(&Frame, &Frame) -> stagan::Result<f64>;

/// # Safety
/// `a` and `b` must hold `3 * size * size` floats; `out` must be valid.
unsafe fn pair_metric(a: *const f32, b: *const f32, size: usize, out: *mut f64, f: PairMetric) -> StaganStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if size == 0 {
            return Err(invalid("size must be positive"));
        }
        let a = read_clip(a, 1, size, "a")?;
        let b = read_clip(b, 1, size, "b")?;
        *out = f(&a[0], &b[0])?;
        Ok(())
    })
}

/// SSIM of two `3 x size x size` frames.
///
/// # Safety
/// See [`stagan_psnr`].
#[no_mangle]
pub unsafe extern "C" fn stagan_ssim(a: *const f32, b: *const f32, size: usize, out: *mut f64) -> StaganStatus {
    pair_metric(a, b, size, out, metrics::ssim)
}

/// PSNR in dB, capped at 100.
///
/// # Safety
/// `a` and `b` must hold `3 * size * size` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stagan_psnr(a: *const f32, b: *const f32, size: usize, out: *mut f64) -> StaganStatus {
    pair_metric(a, b, size, out, metrics::psnr)
}
