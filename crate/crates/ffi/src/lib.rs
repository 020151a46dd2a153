//! C ABI over the `groupcomm` crate.
//!
//! Every function returns a [`GcStatus`]; on failure a message is available
//! from [`gc_last_error`] on the same thread. Models are opaque handles
//! created by [`gc_model_new`] or [`gc_model_load`] and released with
//! [`gc_model_free`]. Panics never cross the boundary; they surface as
//! `GC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use groupcomm::config::RunConfig;
use groupcomm::metrics::{si_sdr_db, snr_db};
use groupcomm::params::ParamRegistry;
use groupcomm::profiler::{count_model_macs, count_model_params};
use groupcomm::separator::{ModelConfig, SeparatorModel};
use groupcomm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    InputTooShort = 5,
    Checkpoint = 6,
    Io = 7,
    Wav = 8,
    Runtime = 9,
    Panic = 10,
}

/// Mirror of the model hyperparameters. `block_hop == 0` means automatic.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcModelConfig {
    pub groups: usize,
    pub group_size: usize,
    pub filters: usize,
    pub hidden_in: usize,
    pub hidden_out: usize,
    pub depth: usize,
    pub window: usize,
    pub stride: usize,
    pub speakers: usize,
    pub sample_rate: u32,
    pub block_hop: usize,
    pub inter_bidirectional: bool,
}

impl From<&ModelConfig> for GcModelConfig {
    fn from(c: &ModelConfig) -> Self {
        GcModelConfig {
            groups: c.groups,
            group_size: c.group_size,
            filters: c.filters,
            hidden_in: c.hidden_in,
            hidden_out: c.hidden_out,
            depth: c.depth,
            window: c.window,
            stride: c.stride,
            speakers: c.speakers,
            sample_rate: c.sample_rate,
            block_hop: c.block_hop.unwrap_or(0),
            inter_bidirectional: c.inter_bidirectional,
        }
    }
}

impl From<&GcModelConfig> for ModelConfig {
    fn from(c: &GcModelConfig) -> Self {
        ModelConfig {
            groups: c.groups,
            group_size: c.group_size,
            filters: c.filters,
            hidden_in: c.hidden_in,
            hidden_out: c.hidden_out,
            depth: c.depth,
            window: c.window,
            stride: c.stride,
            speakers: c.speakers,
            sample_rate: c.sample_rate,
            block_hop: (c.block_hop != 0).then_some(c.block_hop),
            inter_bidirectional: c.inter_bidirectional,
        }
    }
}

/// Opaque model handle.
pub struct GcModel {
    inner: SeparatorModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GcStatus {
    match e {
        Error::Config { .. } => GcStatus::Config,
        Error::Shape { .. } | Error::Axis { .. } => GcStatus::Shape,
        Error::InputTooShort { .. } => GcStatus::InputTooShort,
        Error::Checkpoint(_) => GcStatus::Checkpoint,
        Error::Io { .. } => GcStatus::Io,
        Error::Wav(_) => GcStatus::Wav,
        _ => GcStatus::Runtime,
    }
}

struct Fail(GcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GcStatus::NullPointer, format!("`{what}` is NULL"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GcStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn gc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// The ungrouped reference configuration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_config_baseline(out: *mut GcModelConfig) -> GcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = GcModelConfig::from(&ModelConfig::baseline());
        Ok(())
    })
}

/// Row `index` (0..12, baseline first) of the reference comparison grid.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_config_table2(index: usize, out: *mut GcModelConfig) -> GcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let rows = ModelConfig::table2();
        let row = rows.get(index).ok_or_else(|| {
            Fail(
                GcStatus::InvalidArgument,
                format!("index {index} outside 0..{}", rows.len()),
            )
        })?;
        *out = GcModelConfig::from(row);
        Ok(())
    })
}

/// # Safety
/// `config` must point to a valid struct and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_count_params(config: *const GcModelConfig, out: *mut u64) -> GcStatus {
    guard(|| {
        let cfg = ModelConfig::from(config.as_ref().ok_or_else(|| null("config"))?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = count_model_params(&cfg)? as u64;
        Ok(())
    })
}

/// MACs for `seconds` of input at the config's sample rate.
///
/// # Safety
/// `config` must point to a valid struct and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_count_macs(config: *const GcModelConfig, seconds: f64, out: *mut u64) -> GcStatus {
    guard(|| {
        let cfg = ModelConfig::from(config.as_ref().ok_or_else(|| null("config"))?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(seconds.is_finite() && seconds > 0.0) {
            return Err(Fail(GcStatus::InvalidArgument, "seconds must be positive".into()));
        }
        *out = count_model_macs(&cfg, seconds)?;
        Ok(())
    })
}

/// Freshly initialised model.
///
/// # Safety
/// `config` must point to a valid struct and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_model_new(config: *const GcModelConfig, seed: u64, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        let cfg = ModelConfig::from(config.as_ref().ok_or_else(|| null("config"))?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let model = SeparatorModel::new(&cfg, seed)?;
        *out = Box::into_raw(Box::new(GcModel { inner: model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI `train` command together with its
/// run-config sidecar.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_model_load(
    checkpoint: *const c_char,
    config: *const c_char,
    out: *mut *mut GcModel,
) -> GcStatus {
    guard(|| {
        let ck = path_arg(checkpoint, "checkpoint")?;
        let cfg_path = path_arg(config, "config")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = RunConfig::load(&cfg_path)?;
        let params = ParamRegistry::load(&ck)?;
        let model = SeparatorModel::from_registry(&cfg.model, &params)?;
        *out = Box::into_raw(Box::new(GcModel { inner: model }));
        Ok(())
    })
}

/// Writes the model's parameters in checkpoint format.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gc_model_save(model: *const GcModel, path: *const c_char) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        model.inner.registry().save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is
/// accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn gc_model_free(model: *mut GcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_model_config(model: *const GcModel, out: *mut GcModelConfig) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = GcModelConfig::from(model.inner.config());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_model_num_params(model: *const GcModel, out: *mut u64) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.inner.registry().total() as u64;
        Ok(())
    })
}

/// Separates `len` samples into `speakers × len` row-major output.
/// `output_len` must equal `speakers · len`.
///
/// # Safety
/// `input` must hold `len` values and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn gc_model_separate(
    model: *const GcModel,
    input: *const f64,
    len: usize,
    output: *mut f64,
    output_len: usize,
) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let wave = slice_arg(input, len, "input")?;
        if output.is_null() {
            return Err(null("output"));
        }
        let spk = model.inner.config().speakers;
        if output_len != spk * len {
            return Err(Fail(
                GcStatus::Shape,
                format!("output holds {output_len} values, need {spk} × {len}"),
            ));
        }
        let est = model.inner.separate(wave)?;
        let dst = std::slice::from_raw_parts_mut(output, output_len);
        for (row, chunk) in est.iter().zip(dst.chunks_mut(len)) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Scale-invariant SDR in dB.
///
/// # Safety
/// Both buffers must hold `len` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_si_sdr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> GcStatus {
    guard(|| {
        let (e, r) = (
            slice_arg(estimate, len, "estimate")?,
            slice_arg(reference, len, "reference")?,
        );
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = si_sdr_db(e, r)?;
        Ok(())
    })
}

/// Signal-to-noise ratio in dB.
///
/// # Safety
/// Both buffers must hold `len` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gc_snr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> GcStatus {
    guard(|| {
        let (e, r) = (
            slice_arg(estimate, len, "estimate")?,
            slice_arg(reference, len, "reference")?,
        );
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = snr_db(e, r)?;
        Ok(())
    })
}
