//! C interface to qspike networks.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`QsStatus`]; on failure, `qs_last_error` describes what went wrong on the
//! calling thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use qspike::ann::{CompiledNet, NetworkDescription};
use qspike::neuron::{NeuronConfig, NeuronKind};
use qspike::snn::{convert, ScaleVector, SpikingNetwork};
use qspike::tensor::Tensor;
use qspike::weights_io::load_weights;
use qspike::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Parse = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QsNeuronKind {
    If = 0,
    SubIf = 1,
    Lif = 2,
    StochasticLif = 3,
}

impl From<QsNeuronKind> for NeuronKind {
    fn from(k: QsNeuronKind) -> Self {
        match k {
            QsNeuronKind::If => NeuronKind::If,
            QsNeuronKind::SubIf => NeuronKind::SubIf,
            QsNeuronKind::Lif => NeuronKind::Lif,
            QsNeuronKind::StochasticLif => NeuronKind::StochasticLif,
        }
    }
}

/// A loaded ReLU network.
pub struct QsNetwork {
    desc: Arc<NetworkDescription>,
    compiled: CompiledNet,
}

/// A spiking twin of a [`QsNetwork`].
pub struct QsSpikingNet {
    inner: SpikingNetwork,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QsStatus {
    match e {
        Error::Dimension(_) => QsStatus::DimensionMismatch,
        Error::NumericOverflow { .. } | Error::NonFiniteLoss(_) => QsStatus::Numeric,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => QsStatus::Parse,
        Error::Io { .. } => QsStatus::Io,
        _ => QsStatus::InvalidArgument,
    }
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (QsStatus, String)>) -> QsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QsStatus::Panic
        }
    }
}

fn lift<T>(r: qspike::Result<T>) -> Result<T, (QsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (QsStatus, String) {
    (QsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice_in<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], (QsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn copy_out(values: &[f32], out: *mut f32, out_len: usize) -> Result<(), (QsStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < values.len() {
        return Err((
            QsStatus::DimensionMismatch,
            format!("output buffer holds {out_len}, need {}", values.len()),
        ));
    }
    // SAFETY: caller guarantees `out` points to `out_len` writable floats.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    Ok(())
}

fn wrap(desc: NetworkDescription) -> qspike::Result<QsNetwork> {
    let compiled = CompiledNet::new(&desc)?;
    Ok(QsNetwork {
        desc: Arc::new(desc),
        compiled,
    })
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn qs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a network from a weights JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_network_load(path: *const c_char, out: *mut *mut QsNetwork) -> QsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (QsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let net = lift(load_weights(Path::new(p)).and_then(wrap))?;
        *out = Box::into_raw(Box::new(net));
        Ok(())
    })
}

/// Randomly initialised shallow network (flattened 80x80 input).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_network_shallow(
    hidden: usize,
    n_actions: usize,
    seed: u64,
    out: *mut *mut QsNetwork,
) -> QsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if hidden == 0 || n_actions == 0 {
            return Err((QsStatus::InvalidArgument, "sizes must be positive".into()));
        }
        let net = lift(wrap(NetworkDescription::shallow(hidden, n_actions, seed)))?;
        *out = Box::into_raw(Box::new(net));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qs_network_free(net: *mut QsNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of input values; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qs_network_input_len(net: *const QsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.desc.input_len())
}

/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qs_network_n_actions(net: *const QsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.desc.n_actions)
}

/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qs_network_n_layers(net: *const QsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.desc.n_layers())
}

/// Q-values for one observation.
///
/// # Safety
/// `input` must hold `input_len` floats and `q_out` have room for `q_len`.
#[no_mangle]
pub unsafe extern "C" fn qs_network_forward(
    net: *const QsNetwork,
    input: *const f32,
    input_len: usize,
    q_out: *mut f32,
    q_len: usize,
) -> QsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("network"))?;
        let x = slice_in(input, input_len, "input")?;
        let q = lift(net.compiled.forward(x))?;
        copy_out(&q, q_out, q_len)
    })
}

/// Convert `net` into a spiking network with one scale per layer and the
/// given neuron model in every layer. `net` stays owned by the caller.
///
/// # Safety
/// `scales` must hold `n_scales` floats; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_spiking_new(
    net: *const QsNetwork,
    scales: *const f32,
    n_scales: usize,
    kind: QsNeuronKind,
    nt: usize,
    out: *mut *mut QsSpikingNet,
) -> QsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("network"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice_in(scales, n_scales, "scales")?;
        let scales = lift(ScaleVector::new(s.to_vec()))?;
        let inner = lift(convert(&net.desc, &scales, NeuronConfig::new(kind.into()), nt))?;
        *out = Box::into_raw(Box::new(QsSpikingNet { inner }));
        Ok(())
    })
}

/// # Safety
/// `snn` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qs_spiking_free(snn: *mut QsSpikingNet) {
    if !snn.is_null() {
        drop(Box::from_raw(snn));
    }
}

/// Simulate one observation; writes the output spike counts. `seed` drives
/// the escape noise of stochastic neurons.
///
/// # Safety
/// As [`qs_network_forward`]; `snn` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qs_spiking_forward(
    snn: *mut QsSpikingNet,
    input: *const f32,
    input_len: usize,
    seed: u64,
    q_out: *mut f32,
    q_len: usize,
) -> QsStatus {
    guard(|| {
        let snn = snn.as_mut().ok_or_else(|| null("spiking network"))?;
        let x = slice_in(input, input_len, "input")?;
        let shape = snn.inner.base().input_shape.clone();
        let obs = lift(Tensor::new(shape, x.to_vec()))?;
        let r = lift(snn.inner.forward_seeded(&obs, seed))?;
        copy_out(r.q_estimates.data(), q_out, q_len)
    })
}
