//! C ABI for the evheat library.
//!
//! Conventions:
//! - Every fallible call returns an [`EvheatStatus`]; `EVHEAT_OK` is zero.
//! - On failure the per-thread error message is retrievable with
//!   [`evheat_last_error`].
//! - Handles (`EvheatDetector`) are opaque; free them with the matching
//!   `_free` function exactly once. All other pointers are borrowed for the
//!   duration of the call only.
//! - Panics are caught at the boundary and surfaced as `EVHEAT_ERR_PANIC`;
//!   they never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evheat::config::RunConfig;
use evheat::error::Error;
use evheat::heat;
use evheat::model::{apply_checkpoint, load_checkpoint, Detector};
use evheat::tensor::Tensor;
use evheat::train::detector_config;
use evheat::transforms::{self, TransformKind, TransformPath};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EvheatStatus {
    EvheatOk = 0,
    /// A required pointer argument was null.
    EvheatErrNullArg = 1,
    /// A string argument was not valid UTF-8.
    EvheatErrUtf8 = 2,
    /// Invalid configuration or argument values.
    EvheatErrConfig = 3,
    /// Tensor shape mismatch.
    EvheatErrShapes = 4,
    /// A numeric validation failed (degenerate box, non-Hermitian spectrum...).
    EvheatErrValidation = 5,
    /// Checkpoint file malformed or incompatible with the architecture.
    EvheatErrCheckpoint = 6,
    /// A non-finite value was produced.
    EvheatErrNonFinite = 7,
    /// Filesystem or serialization failure.
    EvheatErrIo = 8,
    /// An output buffer was too small.
    EvheatErrBuffer = 9,
    /// Internal panic caught at the ABI boundary.
    EvheatErrPanic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("nul bytes stripped");
    });
}

fn status_of(err: &Error) -> EvheatStatus {
    match err {
        Error::ShapeMismatch { .. } => EvheatStatus::EvheatErrShapes,
        Error::InvalidArgument { .. } | Error::Config(_) => EvheatStatus::EvheatErrConfig,
        Error::Parse { .. } => EvheatStatus::EvheatErrIo,
        Error::Validation(_) | Error::NotHermitian { .. } => EvheatStatus::EvheatErrValidation,
        Error::NonFinite(_) => EvheatStatus::EvheatErrNonFinite,
        Error::Checkpoint(_) => EvheatStatus::EvheatErrCheckpoint,
        Error::Io(_) | Error::Json(_) => EvheatStatus::EvheatErrIo,
    }
}

fn fail(err: &Error) -> EvheatStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs `f` with panics confined to the library.
fn guarded(f: impl FnOnce() -> EvheatStatus) -> EvheatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            EvheatStatus::EvheatErrPanic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evheat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message (NUL-terminated, possibly
/// truncated) into `buf`. Returns the untruncated length, excluding the NUL.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn evheat_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

fn expert_of(code: u32) -> Result<TransformKind, EvheatStatus> {
    match code {
        0 => Ok(TransformKind::Dct),
        1 => Ok(TransformKind::Dft),
        2 => Ok(TransformKind::Haar),
        other => {
            set_error(&format!("expert code must be 0 (DCT), 1 (DFT) or 2 (Haar), got {other}"));
            Err(EvheatStatus::EvheatErrConfig)
        }
    }
}

unsafe fn field_in<'a>(
    ptr: *const f64,
    h: usize,
    w: usize,
) -> Result<&'a [f64], EvheatStatus> {
    if ptr.is_null() {
        set_error("input pointer is null");
        return Err(EvheatStatus::EvheatErrNullArg);
    }
    if h == 0 || w == 0 {
        set_error(&format!("field extents must be positive, got {h}x{w}"));
        return Err(EvheatStatus::EvheatErrConfig);
    }
    Ok(std::slice::from_raw_parts(ptr, h * w))
}

unsafe fn field_out<'a>(
    ptr: *mut f64,
    len: usize,
) -> Result<&'a mut [f64], EvheatStatus> {
    if ptr.is_null() {
        set_error("output pointer is null");
        return Err(EvheatStatus::EvheatErrNullArg);
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Orthonormal 2D DCT-II of a row-major `h x w` field into `out` (same size).
///
/// # Safety
/// `input` and `out` must each point to `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn evheat_dct2(
    input: *const f64,
    h: usize,
    w: usize,
    out: *mut f64,
) -> EvheatStatus {
    guarded(|| {
        let (x, o) = match (field_in(input, h, w), field_out(out, h * w)) {
            (Ok(x), Ok(o)) => (x, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let t = Tensor::<f64>::from_f64_slice(x, &[h, w]);
        o.copy_from_slice(transforms::dct2_path(&t, TransformPath::Auto).data());
        EvheatStatus::EvheatOk
    })
}

/// Inverse of [`evheat_dct2`].
///
/// # Safety
/// `input` and `out` must each point to `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn evheat_idct2(
    input: *const f64,
    h: usize,
    w: usize,
    out: *mut f64,
) -> EvheatStatus {
    guarded(|| {
        let (x, o) = match (field_in(input, h, w), field_out(out, h * w)) {
            (Ok(x), Ok(o)) => (x, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let t = Tensor::<f64>::from_f64_slice(x, &[h, w]);
        o.copy_from_slice(transforms::idct2_path(&t, TransformPath::Auto).data());
        EvheatStatus::EvheatOk
    })
}

/// Applies the heat conduction operator: transform with the chosen expert
/// (0 = DCT, 1 = DFT, 2 = Haar), attenuate each coefficient by
/// `exp(-k * lambda * t)` with the per-frequency diffusivity map `k_map`
/// (row-major `h x w`, nonnegative), and transform back.
///
/// # Safety
/// `u0`, `k_map` and `out` must each point to `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn evheat_hco_apply(
    u0: *const f64,
    h: usize,
    w: usize,
    expert: u32,
    k_map: *const f64,
    t: f64,
    out: *mut f64,
) -> EvheatStatus {
    guarded(|| {
        let kind = match expert_of(expert) {
            Ok(k) => k,
            Err(s) => return s,
        };
        let (x, k, o) = match (field_in(u0, h, w), field_in(k_map, h, w), field_out(out, h * w)) {
            (Ok(x), Ok(k), Ok(o)) => (x, k, o),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let u = Tensor::<f64>::from_f64_slice(x, &[h, w]);
        let km = Tensor::<f64>::from_f64_slice(k, &[h, w]);
        match heat::hco_apply(&u, kind, &km, t) {
            Ok(y) => {
                o.copy_from_slice(y.data());
                EvheatStatus::EvheatOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// A trained detector plus the run configuration it was saved with.
pub struct EvheatDetector {
    det: Detector<f64>,
    cfg: RunConfig,
}

/// One decoded detection in input-resolution pixel coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EvheatDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Classification confidence in (0, 1).
    pub score: f64,
    /// Class index.
    pub cls: u32,
}

/// Loads a detector from a checkpoint written by the trainer; the checkpoint
/// embeds the architecture. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn evheat_detector_load(
    path: *const c_char,
    out: *mut *mut EvheatDetector,
) -> EvheatStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_error("path and out must be non-null");
            return EvheatStatus::EvheatErrNullArg;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return EvheatStatus::EvheatErrUtf8;
            }
        };
        let ckpt = match load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let cfg: RunConfig = match serde_json::from_str(&ckpt.config_json) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("checkpoint config: {e}"));
                return EvheatStatus::EvheatErrCheckpoint;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let det = match Detector::<f64>::new(detector_config(&cfg), &mut rng) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        if let Err(e) = apply_checkpoint(&ckpt, &det.params()) {
            return fail(&e);
        }
        *out = Box::into_raw(Box::new(EvheatDetector { det, cfg }));
        EvheatStatus::EvheatOk
    })
}

/// Frees a detector handle. Null is a no-op.
///
/// # Safety
/// `det` must be a handle from [`evheat_detector_load`], freed at most once.
#[no_mangle]
pub unsafe extern "C" fn evheat_detector_free(det: *mut EvheatDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Reports the stacked-frame tensor layout the detector consumes:
/// `channels x height x width`, row-major.
///
/// # Safety
/// All pointers must be valid; `det` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evheat_detector_input_shape(
    det: *const EvheatDetector,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> EvheatStatus {
    guarded(|| {
        if det.is_null() || channels.is_null() || height.is_null() || width.is_null() {
            set_error("all arguments must be non-null");
            return EvheatStatus::EvheatErrNullArg;
        }
        let cfg = &(*det).cfg;
        *channels = 2 * cfg.data.bins;
        *height = cfg.data.resolution[1];
        *width = cfg.data.resolution[0];
        EvheatStatus::EvheatOk
    })
}

/// Runs detection on one stacked event frame (`channels x height x width`
/// doubles, layout per [`evheat_detector_input_shape`]). Selects the
/// checkpoint's configured top-K queries, then writes at most `cap`
/// detections to `out_dets` and the count to `out_count`.
///
/// # Safety
/// `frame` must point to `frame_len` doubles; `out_dets` to `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn evheat_detector_detect(
    det: *mut EvheatDetector,
    frame: *const f64,
    frame_len: usize,
    out_dets: *mut EvheatDetection,
    cap: usize,
    out_count: *mut usize,
) -> EvheatStatus {
    guarded(|| {
        if det.is_null() || frame.is_null() || out_dets.is_null() || out_count.is_null() {
            set_error("all arguments must be non-null");
            return EvheatStatus::EvheatErrNullArg;
        }
        let h = &mut *det;
        let (c, fh, fw) = (
            2 * h.cfg.data.bins,
            h.cfg.data.resolution[1],
            h.cfg.data.resolution[0],
        );
        if frame_len != c * fh * fw {
            set_error(&format!(
                "frame must hold {} doubles ({c} x {fh} x {fw}), got {frame_len}",
                c * fh * fw
            ));
            return EvheatStatus::EvheatErrShapes;
        }
        let k = h.cfg.eval.k;
        if cap < k {
            set_error(&format!("out_dets capacity {cap} is below the configured top-K {k}"));
            return EvheatStatus::EvheatErrBuffer;
        }
        let x = std::slice::from_raw_parts(frame, frame_len);
        let batch = Tensor::<f64>::from_f64_slice(x, &[1, c, fh, fw]);
        let mut rng = ChaCha8Rng::seed_from_u64(0); // eval draws no randomness
        let dets = match h.det.detect(&batch, k, &mut rng) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        let image = &dets[0];
        for (slot, d) in
            std::slice::from_raw_parts_mut(out_dets, cap).iter_mut().zip(image)
        {
            *slot = EvheatDetection {
                x1: d.bbox[0],
                y1: d.bbox[1],
                x2: d.bbox[2],
                y2: d.bbox[3],
                score: d.score,
                cls: d.cls as u32,
            };
        }
        *out_count = image.len().min(cap);
        EvheatStatus::EvheatOk
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_round_trips_through_the_abi() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64) * 0.25 - 2.0).collect();
        let mut c = vec![0.0; 24];
        let mut y = vec![0.0; 24];
        unsafe {
            assert_eq!(
                evheat_dct2(x.as_ptr(), 4, 6, c.as_mut_ptr()),
                EvheatStatus::EvheatOk
            );
            assert_eq!(
                evheat_idct2(c.as_ptr(), 4, 6, y.as_mut_ptr()),
                EvheatStatus::EvheatOk
            );
        }
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hco_apply_preserves_mean_and_reports_errors() {
        let x: Vec<f64> = (0..64).map(|i| (i % 7) as f64).collect();
        let k = vec![0.5; 64];
        let mut y = vec![0.0; 64];
        let s = unsafe {
            evheat_hco_apply(x.as_ptr(), 8, 8, 0, k.as_ptr(), 1.0, y.as_mut_ptr())
        };
        assert_eq!(s, EvheatStatus::EvheatOk);
        let (mx, my): (f64, f64) = (x.iter().sum(), y.iter().sum());
        assert!((mx - my).abs() < 1e-9);

        // invalid expert code
        let s = unsafe {
            evheat_hco_apply(x.as_ptr(), 8, 8, 9, k.as_ptr(), 1.0, y.as_mut_ptr())
        };
        assert_eq!(s, EvheatStatus::EvheatErrConfig);
        let mut buf = [0i8; 128];
        let n = unsafe { evheat_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);

        // negative time surfaces the core validation
        let s = unsafe {
            evheat_hco_apply(x.as_ptr(), 8, 8, 0, k.as_ptr(), -1.0, y.as_mut_ptr())
        };
        assert_ne!(s, EvheatStatus::EvheatOk);
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut y = vec![0.0; 4];
        let s = unsafe { evheat_dct2(std::ptr::null(), 2, 2, y.as_mut_ptr()) };
        assert_eq!(s, EvheatStatus::EvheatErrNullArg);
        let mut out: *mut EvheatDetector = std::ptr::null_mut();
        let s = unsafe { evheat_detector_load(std::ptr::null(), &mut out) };
        assert_eq!(s, EvheatStatus::EvheatErrNullArg);
        unsafe { evheat_detector_free(std::ptr::null_mut()) };
    }

    #[test]
    fn detector_round_trips_through_the_abi() {
        // train for zero steps to get a valid checkpoint quickly
        let dir = std::env::temp_dir().join(format!("evheat_ffi_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let toml = r#"
precision = 64
[model]
depths = [1, 0, 0, 0]
channels = [4, 4, 4, 4]
head_dim = 8
[data]
bins = 2
resolution = [32, 32]
classes = 2
[data.synthetic]
train_scenes = 1
eval_scenes = 1
duration_ms = 4.0
frames = 1
[train]
steps = 0
eval_every = 0
[eval]
k = 3
"#;
        let cfg = RunConfig::from_toml(toml).unwrap();
        let outcome = evheat::train::run_train::<f64>(&cfg, &dir).unwrap();
        let ckpt_path = CString::new(outcome.checkpoint.to_str().unwrap()).unwrap();

        let mut handle: *mut EvheatDetector = std::ptr::null_mut();
        let s = unsafe { evheat_detector_load(ckpt_path.as_ptr(), &mut handle) };
        assert_eq!(s, EvheatStatus::EvheatOk);

        let (mut c, mut fh, mut fw) = (0usize, 0usize, 0usize);
        unsafe {
            assert_eq!(
                evheat_detector_input_shape(handle, &mut c, &mut fh, &mut fw),
                EvheatStatus::EvheatOk
            );
        }
        assert_eq!((c, fh, fw), (4, 32, 32));

        let frame = vec![0.25; c * fh * fw];
        let mut dets = vec![
            EvheatDetection { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0, score: 0.0, cls: 0 };
            3
        ];
        let mut count = 0usize;
        let s = unsafe {
            evheat_detector_detect(
                handle,
                frame.as_ptr(),
                frame.len(),
                dets.as_mut_ptr(),
                dets.len(),
                &mut count,
            )
        };
        assert_eq!(s, EvheatStatus::EvheatOk);
        assert_eq!(count, 3);
        for d in &dets {
            assert!(d.score > 0.0 && d.score < 1.0);
            assert!(d.x1 <= d.x2 && d.y1 <= d.y2);
        }

        // wrong frame size is a shape error
        let s = unsafe {
            evheat_detector_detect(
                handle,
                frame.as_ptr(),
                frame.len() - 1,
                dets.as_mut_ptr(),
                dets.len(),
                &mut count,
            )
        };
        assert_eq!(s, EvheatStatus::EvheatErrShapes);

        unsafe { evheat_detector_free(handle) };
        std::fs::remove_dir_all(&dir).ok();
    }
}
