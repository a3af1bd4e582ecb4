//! C ABI for mbsnn.
//!
//! Every fallible function returns an [`MbsnnStatus`]. On failure the
//! message is available from [`mbsnn_last_error`] on the same thread until
//! the next failing call. Models are opaque handles created by
//! `mbsnn_model_load*` and released with [`mbsnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;

use mbsnn::entropy::{entropy_of_pmf, spike_pmf_analytic, MembraneDist};
use mbsnn::model_file::{decode_model, load_model};
use mbsnn::network::{forward_timesteps, ForwardOptions, Network};
use mbsnn::neuron::{fire_quantize, BitFormat, NeuronConfig};
use mbsnn::tensor::Tensor;
use mbsnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbsnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    State = 5,
    Parse = 6,
    Io = 7,
    Config = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

/// Opaque model handle.
pub struct MbsnnModel {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MbsnnStatus {
    match e {
        Error::Shape { .. } => MbsnnStatus::Shape,
        Error::InvalidArgument(_) => MbsnnStatus::InvalidArgument,
        Error::State(_) => MbsnnStatus::State,
        Error::Numeric(_) => MbsnnStatus::Numeric,
        Error::Parse(_) | Error::Json(_) => MbsnnStatus::Parse,
        Error::Config(_) => MbsnnStatus::Config,
        Error::Io(_) => MbsnnStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MbsnnStatus, String)> + UnwindSafe) -> MbsnnStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => MbsnnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MbsnnStatus::Internal
        }
    }
}

fn lib<T>(r: mbsnn::Result<T>) -> Result<T, (MbsnnStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MbsnnStatus, String) {
    (MbsnnStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mbsnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mbsnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_load(path: *const c_char, out: *mut *mut MbsnnModel) -> MbsnnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MbsnnStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let net = lib(load_model(Path::new(path)))?;
        *out = Box::into_raw(Box::new(MbsnnModel { net }));
        Ok(())
    })
}

/// Decodes a model from an in-memory model file.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_load_bytes(bytes: *const u8, len: usize, out: *mut *mut MbsnnModel) -> MbsnnStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let net = lib(decode_model(std::slice::from_raw_parts(bytes, len)))?;
        *out = Box::into_raw(Box::new(MbsnnModel { net }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `mbsnn_model_load*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_free(model: *mut MbsnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_num_classes(model: *const MbsnnModel, out: *mut usize) -> MbsnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.net.num_classes();
        Ok(())
    })
}

/// Number of values in one input sample.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_input_len(model: *const MbsnnModel, out: *mut usize) -> MbsnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.net.spec().input_shape.iter().product();
        Ok(())
    })
}

/// Runs `batch` samples (row-major, `batch * input_len` values) and writes
/// `batch * num_classes` logits. `time_steps = 0` uses the model's own.
///
/// # Safety
/// `input` must hold `batch * input_len` values and `logits` have room
/// for `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_model_forward(
    model: *const MbsnnModel,
    input: *const f64,
    batch: usize,
    time_steps: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MbsnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let per: usize = m.net.spec().input_shape.iter().product();
        let classes = m.net.num_classes();
        if batch == 0 || logits_len != batch * classes {
            return Err((
                MbsnnStatus::Shape,
                format!("logits buffer holds {logits_len} values, need batch * {classes} with batch >= 1"),
            ));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&m.net.spec().input_shape);
        let x = lib(Tensor::new(shape, std::slice::from_raw_parts(input, batch * per).to_vec()))?;
        let opts = ForwardOptions {
            time_steps: (time_steps > 0).then_some(time_steps),
            ..Default::default()
        };
        let out = lib(forward_timesteps(&m.net, &x, &opts))?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(out.logits.data());
        Ok(())
    })
}

/// Entropy in bits of spikes quantized from a Gaussian membrane potential.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_spike_entropy(
    v_th: f64,
    mean: f64,
    std: f64,
    int_bits: u32,
    frac_bits: u32,
    out: *mut f64,
) -> MbsnnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let fmt = lib(BitFormat::new(int_bits, frac_bits))?;
        let dist = lib(MembraneDist::gaussian(mean, std))?;
        *out = entropy_of_pmf(&lib(spike_pmf_analytic(&dist, v_th, fmt))?);
        Ok(())
    })
}

/// Quantizes `len` membrane potentials to spike codes; the spike value is
/// `code * 2^-frac_bits`.
///
/// # Safety
/// `u` must hold `len` values and `codes` have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn mbsnn_fire_quantize(
    u: *const f64,
    len: usize,
    v_th: f64,
    int_bits: u32,
    frac_bits: u32,
    codes: *mut u32,
) -> MbsnnStatus {
    guard(|| {
        if u.is_null() {
            return Err(null("u"));
        }
        if codes.is_null() {
            return Err(null("codes"));
        }
        let cfg = NeuronConfig::lif(v_th, 2.0, lib(BitFormat::new(int_bits, frac_bits))?);
        lib(cfg.validate())?;
        let t = lib(Tensor::new(vec![len], std::slice::from_raw_parts(u, len).to_vec()))?;
        std::slice::from_raw_parts_mut(codes, len).copy_from_slice(fire_quantize(&t, &cfg).codes());
        Ok(())
    })
}
