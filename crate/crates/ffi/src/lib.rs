//! C interface to `nmode`.
//!
//! Every function returns an [`NmodeStatus`]; on failure the message is
//! available from [`nmode_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `_free` function. Arrays are
//! caller-allocated, row-major, with an explicit element count that must
//! match exactly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nmode::config::{parse_config, RunConfig};
use nmode::math::RealArray;
use nmode::modal::{build_modal_basis, ModalBasis, StructuralSystem};
use nmode::model::NeuralModalOde;
use nmode::params::{load_checkpoint, ParameterStore};
use nmode::simulator::{simulate, Response, ReferenceField};
use nmode::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Io = 5,
    Config = 6,
    Incompatible = 7,
    MissingArtifact = 8,
    Panic = 9,
}

/// Structural system: mass, damping, stiffness and cubic spring.
pub struct NmodeSystem(StructuralSystem);

/// Truncated modal basis of a linear system.
pub struct NmodeBasis(ModalBasis);

/// Trained model: architecture, basis and parameters.
pub struct NmodeModel {
    model: NeuralModalOde,
    params: ParameterStore,
    dt: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(e: &Error) -> NmodeStatus {
    match e {
        Error::Dimension { .. } => NmodeStatus::Dimension,
        Error::Divergence { .. }
        | Error::RealizationDivergence { .. }
        | Error::Asymmetric { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::RigidBodyMode { .. }
        | Error::NonFiniteLoss { .. }
        | Error::ConstantChannel { .. } => NmodeStatus::Numerical,
        Error::Io { .. } | Error::Locked { .. } => NmodeStatus::Io,
        Error::ConfigMissing { .. }
        | Error::ConfigMalformed(_)
        | Error::ConfigUnknownKey(_)
        | Error::ConfigInvalid { .. } => NmodeStatus::Config,
        Error::Compatibility(_) => NmodeStatus::Incompatible,
        Error::MissingArtifact { .. } => NmodeStatus::MissingArtifact,
        Error::Contract(_) | Error::Input(_) | Error::Protocol(_) | Error::Parse { .. } => {
            NmodeStatus::InvalidArgument
        }
    }
}

struct Fail(NmodeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(classify(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NmodeStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NmodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NmodeStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            NmodeStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NmodeStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn copy_out(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(Fail(
            NmodeStatus::Dimension,
            format!("`{what}` holds {} values, {} required", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn nmode_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nmode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in four-storey frame with cubic coefficient `cubic`.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn nmode_system_frame_4dof(cubic: f64, out: *mut *mut NmodeSystem) -> NmodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !cubic.is_finite() {
            return Err(Fail(NmodeStatus::InvalidArgument, "cubic coefficient must be finite".into()));
        }
        store(out, NmodeSystem(StructuralSystem::frame_4dof(cubic)));
        Ok(())
    })
}

/// A system from row-major `dof × dof` matrices. The cubic force
/// `cubic·x₁³` enters equation `cubic_equation` (zero-based).
///
/// # Safety
/// Each matrix pointer must reference `dof*dof` readable doubles and `out`
/// must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn nmode_system_new(
    mass: *const f64,
    damping: *const f64,
    stiffness: *const f64,
    dof: usize,
    cubic: f64,
    cubic_equation: usize,
    out: *mut *mut NmodeSystem,
) -> NmodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dof == 0 {
            return Err(Fail(NmodeStatus::InvalidArgument, "dof must be positive".into()));
        }
        let n = dof * dof;
        let m = RealArray::matrix(dof, dof, slice(mass, n, "mass")?.to_vec())?;
        let c = RealArray::matrix(dof, dof, slice(damping, n, "damping")?.to_vec())?;
        let k = RealArray::matrix(dof, dof, slice(stiffness, n, "stiffness")?.to_vec())?;
        let sys = StructuralSystem::new(m, c, k, cubic)?.with_cubic_row(cubic_equation)?;
        store(out, NmodeSystem(sys));
        Ok(())
    })
}

/// # Safety
/// `sys` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmode_system_free(sys: *mut NmodeSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Number of degrees of freedom.
///
/// # Safety
/// `sys` must be a live handle and `dof` writable.
#[no_mangle]
pub unsafe extern "C" fn nmode_system_dof(sys: *const NmodeSystem, dof: *mut usize) -> NmodeStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        let dof = dof.as_mut().ok_or_else(|| null("dof"))?;
        *dof = sys.0.dof();
        Ok(())
    })
}

/// Integrates the full nonlinear system from `(x0, v0)` for `steps`
/// intervals of `dt` (RK4 with `substeps` sub-steps) and writes the
/// `(steps+1) × dof` displacement, velocity and acceleration histories.
/// Any of the outputs may be NULL when its length is zero.
///
/// # Safety
/// `x0`, `v0` must reference `dof` doubles; each output must reference `len`
/// writable doubles where `len = (steps+1)*dof`.
#[no_mangle]
pub unsafe extern "C" fn nmode_simulate(
    sys: *const NmodeSystem,
    x0: *const f64,
    v0: *const f64,
    dt: f64,
    steps: usize,
    substeps: usize,
    disp: *mut f64,
    vel: *mut f64,
    acc: *mut f64,
    len: usize,
) -> NmodeStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        let g = sys.0.dof();
        if !(dt > 0.0) || steps == 0 || substeps == 0 {
            return Err(Fail(NmodeStatus::InvalidArgument, "dt, steps and substeps must be positive".into()));
        }
        let field = ReferenceField::new(&sys.0)?;
        let (_, r) = simulate(&field, slice(x0, g, "x0")?, slice(v0, g, "v0")?, dt, steps, substeps)?;
        write_response(&r, disp, vel, acc, len)
    })
}

unsafe fn write_response(r: &Response, disp: *mut f64, vel: *mut f64, acc: *mut f64, len: usize) -> Result<(), Fail> {
    let need = r.disp.len();
    if len != need {
        return Err(Fail(NmodeStatus::Dimension, format!("output length {len}, {need} required")));
    }
    copy_out(slice_mut(disp, len, "disp")?, r.disp.data(), "disp")?;
    copy_out(slice_mut(vel, len, "vel")?, r.vel.data(), "vel")?;
    copy_out(slice_mut(acc, len, "acc")?, r.acc.data(), "acc")
}

/// The `modes` lowest modes of the linear part of `sys`.
///
/// # Safety
/// `sys` must be a live handle and `out` writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn nmode_modal_basis(
    sys: *const NmodeSystem,
    modes: usize,
    out: *mut *mut NmodeBasis,
) -> NmodeStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let basis = build_modal_basis(&sys.0.linearized(), modes)?;
        store(out, NmodeBasis(basis));
        Ok(())
    })
}

/// # Safety
/// `basis` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmode_basis_free(basis: *mut NmodeBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Natural frequencies (rad/s) and damping ratios, `modes` values each, and
/// the mass-normalized mode shapes as a row-major `dof × modes` matrix.
/// Pass NULL with length zero to skip an output.
///
/// # Safety
/// `basis` must be a live handle; each non-NULL output must reference the
/// stated number of writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nmode_basis_get(
    basis: *const NmodeBasis,
    omegas: *mut f64,
    omegas_len: usize,
    xis: *mut f64,
    xis_len: usize,
    phi: *mut f64,
    phi_len: usize,
) -> NmodeStatus {
    guard(|| {
        let b = &basis.as_ref().ok_or_else(|| null("basis"))?.0;
        if omegas_len > 0 {
            copy_out(slice_mut(omegas, omegas_len, "omegas")?, &b.omegas, "omegas")?;
        }
        if xis_len > 0 {
            copy_out(slice_mut(xis, xis_len, "xis")?, &b.xis, "xis")?;
        }
        if phi_len > 0 {
            copy_out(slice_mut(phi, phi_len, "phi")?, b.phi.data(), "phi")?;
        }
        Ok(())
    })
}

/// Number of retained modes and degrees of freedom.
///
/// # Safety
/// `basis` must be a live handle; `modes` and `dof` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmode_basis_shape(
    basis: *const NmodeBasis,
    modes: *mut usize,
    dof: *mut usize,
) -> NmodeStatus {
    guard(|| {
        let b = &basis.as_ref().ok_or_else(|| null("basis"))?.0;
        *modes.as_mut().ok_or_else(|| null("modes"))? = b.modes();
        *dof.as_mut().ok_or_else(|| null("dof"))? = b.dof();
        Ok(())
    })
}

/// Loads a trained model. `config_path` is the run configuration (NULL for
/// defaults, typically the `effective_config.json` echoed by the run) and
/// `checkpoint_path` the checkpoint written by training.
///
/// # Safety
/// Paths must be NULL-terminated strings (`config_path` may be NULL) and
/// `out` writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn nmode_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut NmodeModel,
) -> NmodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: RunConfig = if config_path.is_null() {
            parse_config(None, &[])?
        } else {
            parse_config(Some(&path_arg(config_path, "config_path")?), &[])?
        };
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let model = nmode::cli::build_model(&cfg)?;
        if !ckpt.exists() {
            return Err(Error::MissingArtifact {
                what: "checkpoint",
                path: ckpt,
            }
            .into());
        }
        let params = load_checkpoint(&ckpt)?;
        params.check_compatible(&model.init_parameters(0))?;
        store(
            out,
            NmodeModel {
                model,
                params,
                dt: cfg.dataset.dt,
            },
        );
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmode_model_free(model: *mut NmodeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Measured channels `m`, encoder window length `n_t + 1`, and degrees of
/// freedom `dof` of the reconstruction.
///
/// # Safety
/// `model` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn nmode_model_shape(
    model: *const NmodeModel,
    channels: *mut usize,
    window: *mut usize,
    dof: *mut usize,
) -> NmodeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *channels.as_mut().ok_or_else(|| null("channels"))? = m.model.obs_dim();
        *window.as_mut().ok_or_else(|| null("window"))? = m.model.config.window + 1;
        *dof.as_mut().ok_or_else(|| null("dof"))? = m.model.basis.dof();
        Ok(())
    })
}

/// Reconstructs the full field for `steps` intervals from a measured
/// window (`rows × channels`, row-major, `rows ≥ n_t + 1`) using the mean
/// initial state. Outputs are `(steps+1) × dof`.
///
/// # Safety
/// `window` must reference `rows*channels` doubles and each output `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nmode_model_reconstruct(
    model: *const NmodeModel,
    window: *const f64,
    rows: usize,
    channels: usize,
    steps: usize,
    disp: *mut f64,
    vel: *mut f64,
    acc: *mut f64,
    len: usize,
) -> NmodeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if channels != m.model.obs_dim() {
            return Err(Fail(
                NmodeStatus::Dimension,
                format!("model expects {} channels, got {channels}", m.model.obs_dim()),
            ));
        }
        let w = RealArray::matrix(rows, channels, slice(window, rows * channels, "window")?.to_vec())?;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * m.dt).collect();
        let pred = m.model.predict_sequence(&m.params, &w, &times, None)?;
        write_response(&pred.response, disp, vel, acc, len)
    })
}
