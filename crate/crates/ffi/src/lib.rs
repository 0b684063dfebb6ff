//! C ABI over the flowpaint pipeline.
//!
//! Objects cross the boundary as opaque handles created by `fp_*_new`,
//! `fp_*_load` or `fp_*_generate` and released with the matching `fp_*_free`.
//! Every fallible call returns an [`FpStatus`]; on failure the message is
//! kept per thread and read back with [`fp_last_error`]. Images are `f32`
//! planes in channel-major `[C, H, W]` order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowpaint::checkpoint::Checkpoint;
use flowpaint::config::RunConfig;
use flowpaint::eval::psnr_mask;
use flowpaint::model::VelocityNet;
use flowpaint::rewards::evaluate_rewards;
use flowpaint::sampler::{sample_ode, Conditioning, SampleSchedule};
use flowpaint::synth::{generate_scene, GlyphFont, SceneSample};
use flowpaint::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    /// Null pointer, wrong buffer length or otherwise unusable argument.
    InvalidArgument = 1,
    Config = 2,
    Io = 3,
    Numerical = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

/// Image planes of a scene.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpPlane {
    /// `[3, H, W]` source with tags.
    Image = 0,
    /// `[1, H, W]`, 1 inside the region to inpaint.
    Mask = 1,
    /// `[3, H, W]` scene without tags.
    Clean = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FpRewards {
    pub global: f64,
    pub local: f64,
    pub ocr: f64,
}

/// Parsed and validated run configuration.
pub struct FpConfig {
    inner: RunConfig,
}

/// One generated scene.
pub struct FpScene {
    inner: SceneSample,
}

/// Velocity network weights.
pub struct FpModel {
    inner: VelocityNet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> FpStatus {
    match err {
        Error::Config(_) => FpStatus::Config,
        Error::Io { .. } | Error::Format { .. } => FpStatus::Io,
        Error::Numerical { .. } => FpStatus::Numerical,
        Error::InvalidArgument(_) | Error::Shape(_) => FpStatus::InvalidArgument,
    }
}

fn bad_arg(msg: &str) -> Error {
    Error::InvalidArgument(msg.to_string())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> flowpaint::Result<()>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            FpStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> flowpaint::Result<&'a T> {
    p.as_ref().ok_or_else(|| bad_arg(&format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> flowpaint::Result<()> {
    if out.is_null() {
        return Err(bad_arg("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> flowpaint::Result<&'a str> {
    if p.is_null() {
        return Err(bad_arg(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg(&format!("{what} is not UTF-8")))
}

unsafe fn slice_mut<'a>(p: *mut f32, len: usize, want: usize) -> flowpaint::Result<&'a mut [f32]> {
    if p.is_null() {
        return Err(bad_arg("buffer is null"));
    }
    if len != want {
        return Err(bad_arg(&format!("buffer holds {len} floats, need {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn fp_config_default(out: *mut *mut FpConfig) -> FpStatus {
    guard(|| {
        put(
            out,
            FpConfig {
                inner: RunConfig::default(),
            },
        )
    })
}

/// Parses a JSON configuration; missing fields take defaults, unknown fields
/// are rejected.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fp_config_from_json(json: *const c_char, out: *mut *mut FpConfig) -> FpStatus {
    guard(|| {
        let inner = RunConfig::from_json(c_str(json, "json")?)?;
        put(out, FpConfig { inner })
    })
}

/// Image side length of scenes produced under `config`.
///
/// # Safety
/// `config` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_config_image_size(config: *const FpConfig, out: *mut usize) -> FpStatus {
    guard(|| {
        let c = deref(config, "config")?;
        if out.is_null() {
            return Err(bad_arg("output pointer is null"));
        }
        *out = c.inner.data.generator.size;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_config_free(config: *mut FpConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generates the scene for `seed`.
///
/// # Safety
/// `config` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_generate(
    config: *const FpConfig,
    seed: u64,
    out: *mut *mut FpScene,
) -> FpStatus {
    guard(|| {
        let c = deref(config, "config")?;
        let inner = generate_scene(seed, &c.inner.data.generator, &GlyphFont::builtin())?;
        put(out, FpScene { inner })
    })
}

/// Number of floats in `plane` (an [`FpPlane`] value) of `scene`.
///
/// # Safety
/// `scene` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_plane_len(
    scene: *const FpScene,
    plane: u32,
    out: *mut usize,
) -> FpStatus {
    guard(|| {
        let s = deref(scene, "scene")?;
        if out.is_null() {
            return Err(bad_arg("output pointer is null"));
        }
        *out = plane_of(&s.inner, plane)?.len();
        Ok(())
    })
}

fn plane_of(s: &SceneSample, plane: u32) -> flowpaint::Result<&Tensor> {
    match plane {
        p if p == FpPlane::Image as u32 => Ok(&s.image),
        p if p == FpPlane::Mask as u32 => Ok(&s.mask),
        p if p == FpPlane::Clean as u32 => Ok(&s.clean),
        p => Err(bad_arg(&format!("unknown plane {p}"))),
    }
}

/// Copies `plane` into `buf`, which must hold exactly the plane's length.
///
/// # Safety
/// `scene` must be a live handle; `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_copy_plane(
    scene: *const FpScene,
    plane: u32,
    buf: *mut f32,
    len: usize,
) -> FpStatus {
    guard(|| {
        let src = plane_of(&deref(scene, "scene")?.inner, plane)?.data();
        slice_mut(buf, len, src.len())?.copy_from_slice(src);
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_free(scene: *mut FpScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Freshly initialised network for the architecture in `config`.
///
/// # Safety
/// `config` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fp_model_new(
    config: *const FpConfig,
    seed: u64,
    out: *mut *mut FpModel,
) -> FpStatus {
    guard(|| {
        let c = deref(config, "config")?;
        let inner = VelocityNet::new(c.inner.model.architecture.clone(), seed)?;
        put(out, FpModel { inner })
    })
}

/// Loads the network from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fp_model_load(dir: *const c_char, out: *mut *mut FpModel) -> FpStatus {
    guard(|| {
        let ckpt = Checkpoint::load(Path::new(c_str(dir, "dir")?))?;
        put(out, FpModel { inner: ckpt.net })
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_model_free(model: *mut FpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Deterministic inpainting of `scene`, starting from init noise
/// `(noise_seed, noise_id)`. Writes the composited `[3, H, W]` result.
///
/// # Safety
/// Handles must be live; `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fp_inpaint(
    model: *const FpModel,
    config: *const FpConfig,
    scene: *const FpScene,
    noise_seed: u64,
    noise_id: u64,
    matting: bool,
    buf: *mut f32,
    len: usize,
) -> FpStatus {
    guard(|| {
        let net = &deref(model, "model")?.inner;
        let cfg = &deref(config, "config")?.inner;
        let sample = &deref(scene, "scene")?.inner;
        let out = slice_mut(buf, len, sample.image.len())?;
        let schedule = SampleSchedule::new(&cfg.schedule)?.deterministic();
        let cond = Conditioning::new(sample, net.config.patch_size)?;
        let image = sample_ode(net, &cond, &schedule, noise_seed, noise_id, matting)?;
        out.copy_from_slice(image.data());
        Ok(())
    })
}

unsafe fn image_arg(scene: &SceneSample, image: *const f32, len: usize) -> flowpaint::Result<Tensor> {
    if image.is_null() {
        return Err(bad_arg("image is null"));
    }
    let want = scene.image.len();
    if len != want {
        return Err(bad_arg(&format!("image holds {len} floats, need {want}")));
    }
    let data = std::slice::from_raw_parts(image, len).to_vec();
    Tensor::from_vec(scene.image.shape().to_vec(), data)
}

/// Global, local and OCR rewards of a `[3, H, W]` output for `scene`.
///
/// # Safety
/// Handles must be live; `image` must point to `len` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_rewards(
    config: *const FpConfig,
    scene: *const FpScene,
    image: *const f32,
    len: usize,
    out: *mut FpRewards,
) -> FpStatus {
    guard(|| {
        let cfg = &deref(config, "config")?.inner;
        let s = &deref(scene, "scene")?.inner;
        if out.is_null() {
            return Err(bad_arg("output pointer is null"));
        }
        let x = image_arg(s, image, len)?;
        let (r, _) = evaluate_rewards(&x, &s.clean, &s.mask, &s.tag_boxes, &GlyphFont::builtin(), &cfg.rewards)?;
        *out = FpRewards {
            global: r.global,
            local: r.local,
            ocr: r.ocr,
        };
        Ok(())
    })
}

/// PSNR in dB of a `[3, H, W]` output against the clean scene, over the mask.
///
/// # Safety
/// `scene` must be live; `image` must point to `len` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_psnr_mask(
    scene: *const FpScene,
    image: *const f32,
    len: usize,
    out: *mut f64,
) -> FpStatus {
    guard(|| {
        let s = &deref(scene, "scene")?.inner;
        if out.is_null() {
            return Err(bad_arg("output pointer is null"));
        }
        let x = image_arg(s, image, len)?;
        *out = psnr_mask(&x, &s.clean, &s.mask)?;
        Ok(())
    })
}
