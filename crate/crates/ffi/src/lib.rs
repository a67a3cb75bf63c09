//! C ABI over the rankjump toolkit.
//!
//! Every function returns an [`RjStatus`]. On failure the message is kept per thread
//! and can be copied out with [`rj_last_error_message`]. Matrices cross the boundary
//! as row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rankjump::absorbing::{self, membership, AbsorbingSpec, BoundsQuery};
use rankjump::experiment::{self, load_config};
use rankjump::linalg::{self, Mat};
use rankjump::linnet::{self, ArchSpec, NetworkParams};
use rankjump::objective::{self, CompletionProblem};
use rankjump::optimizer::{self, InitSpec, RunConfig, Schedule, StepConvention};
use rankjump::Error;

/// Result codes.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RjStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Usage = 3,
    Numerical = 4,
    Divergence = 5,
    UnsupportedDepth = 6,
    NonConvergence = 7,
    Config = 8,
    Io = 9,
    Serialize = 10,
    InvalidUtf8 = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Values accepted wherever a `convention` argument is taken.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RjConvention {
    /// `W − η(T + λW)`.
    HalfDecay = 0,
    /// `(1 − 2ηλ)W − ηT`.
    FullGradient = 1,
    /// `W − η(2T + λW)`.
    Unhalved = 2,
}

/// A completion problem.
pub struct RjProblem {
    inner: CompletionProblem,
}

/// Network weights.
pub struct RjNetwork {
    inner: NetworkParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RjStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape(_) => RjStatus::Shape,
            Error::Usage(_) => RjStatus::Usage,
            Error::Numerical(_) => RjStatus::Numerical,
            Error::Divergence { .. } => RjStatus::Divergence,
            Error::UnsupportedDepth { .. } => RjStatus::UnsupportedDepth,
            Error::NonConvergence { .. } => RjStatus::NonConvergence,
            Error::Config(_) => RjStatus::Config,
            Error::Io { .. } => RjStatus::Io,
            Error::Serialize(_) => RjStatus::Serialize,
        };
        Failure(code, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RjStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RjStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RjStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RjStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RjStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn convention(c: u32) -> Result<StepConvention, Failure> {
    match c {
        0 => Ok(StepConvention::HalfDecay),
        1 => Ok(StepConvention::FullGradient),
        2 => Ok(StepConvention::Unhalved),
        other => Err(Failure(RjStatus::Usage, format!("unknown convention {other}"))),
    }
}

fn row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Mat, Failure> {
    if data.len() != rows * cols {
        return Err(Failure(RjStatus::Shape, format!("expected {} entries, got {}", rows * cols, data.len())));
    }
    Ok(Mat::from_row_slice(rows, cols, data))
}

/// Copies the calling thread's last error message, NUL-terminated, into `buf` and
/// returns the buffer size the full message needs (0 when there is no error).
/// The copy is truncated when `len` is too small.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rj_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Static description of a status code (`"unknown status"` for other values).
#[no_mangle]
pub extern "C" fn rj_status_name(status: u32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"shape mismatch",
        3 => c"invalid argument",
        4 => c"numerical failure",
        5 => c"divergence",
        6 => c"unsupported depth",
        7 => c"no convergence",
        8 => c"configuration error",
        9 => c"i/o error",
        10 => c"serialization error",
        11 => c"invalid UTF-8",
        12 => c"buffer too small",
        13 => c"internal panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}

/// The 2×2 problem `[[1, ?], [ε, 1]]`.
///
/// # Safety
/// `out_problem` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_problem_two_by_two(epsilon: f64, out_problem: *mut *mut RjProblem) -> RjStatus {
    guard(|| {
        let slot = out(out_problem, "out_problem")?;
        let inner = CompletionProblem::two_by_two(epsilon)?;
        *slot = Box::into_raw(Box::new(RjProblem { inner }));
        Ok(())
    })
}

/// A problem from a row-major `rows × cols` target and `n_observed` observed
/// `(obs_rows[k], obs_cols[k])` positions. Unobserved target entries are held-out truth.
///
/// # Safety
/// `target` must hold `rows·cols` doubles, `obs_rows`/`obs_cols` `n_observed` entries
/// each, and `out_problem` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_problem_new(
    rows: usize,
    cols: usize,
    target: *const f64,
    obs_rows: *const usize,
    obs_cols: *const usize,
    n_observed: usize,
    out_problem: *mut *mut RjProblem,
) -> RjStatus {
    guard(|| {
        let slot = out(out_problem, "out_problem")?;
        let t = row_major(rows, cols, slice(target, rows * cols, "target")?)?;
        let is = slice(obs_rows, n_observed, "obs_rows")?;
        let js = slice(obs_cols, n_observed, "obs_cols")?;
        let inner = CompletionProblem::new(t, is.iter().copied().zip(js.iter().copied()).collect())?;
        *slot = Box::into_raw(Box::new(RjProblem { inner }));
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a pointer from an `rj_problem_*` constructor not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rj_problem_free(problem: *mut RjProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

unsafe fn arch(widths: *const usize, n_widths: usize) -> Result<ArchSpec, Failure> {
    Ok(ArchSpec::new(slice(widths, n_widths, "widths")?.to_vec())?)
}

/// Gaussian initialization with per-layer standard deviation `scale/√fan_in`.
/// `widths` lists `d_in, hidden…, d_out`.
///
/// # Safety
/// `widths` must hold `n_widths` entries and `out_network` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_network_gaussian(
    widths: *const usize,
    n_widths: usize,
    scale: f64,
    seed: u64,
    out_network: *mut *mut RjNetwork,
) -> RjStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        let inner = linnet::init_gaussian(&arch(widths, n_widths)?, scale, seed)?;
        *slot = Box::into_raw(Box::new(RjNetwork { inner }));
        Ok(())
    })
}

/// Balanced factorization of the row-major `d_out × d_in` matrix `a`.
///
/// # Safety
/// `a` must hold `d_out·d_in` doubles (`widths[n_widths−1]·widths[0]`), `widths`
/// `n_widths` entries, and `out_network` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_network_balanced(
    a: *const f64,
    widths: *const usize,
    n_widths: usize,
    out_network: *mut *mut RjNetwork,
) -> RjStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        let spec = arch(widths, n_widths)?;
        let (rows, cols) = (spec.d_out(), spec.d_in());
        let m = row_major(rows, cols, slice(a, rows * cols, "a")?)?;
        let inner = linnet::balanced_factorization(&m, &spec)?;
        *slot = Box::into_raw(Box::new(RjNetwork { inner }));
        Ok(())
    })
}

/// # Safety
/// `network` must be null or a pointer from an `rj_network_*` constructor not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rj_network_free(network: *mut RjNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

unsafe fn net<'a>(p: *const RjNetwork) -> Result<&'a NetworkParams, Failure> {
    p.as_ref().map(|n| &n.inner).ok_or_else(|| null("network"))
}

unsafe fn problem<'a>(p: *const RjProblem) -> Result<&'a CompletionProblem, Failure> {
    p.as_ref().map(|n| &n.inner).ok_or_else(|| null("problem"))
}

/// Number of layers.
///
/// # Safety
/// `network` must be a live handle and `out_depth` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_network_depth(network: *const RjNetwork, out_depth: *mut usize) -> RjStatus {
    guard(|| {
        *out(out_depth, "out_depth")? = net(network)?.depth();
        Ok(())
    })
}

/// Writes the row-major end-to-end product `A_θ` (`d_out × d_in`) into `buf`.
///
/// # Safety
/// `network` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rj_network_product(network: *const RjNetwork, buf: *mut f64, len: usize) -> RjStatus {
    guard(|| {
        let a = linnet::forward_product(net(network)?);
        if len < a.len() {
            return Err(Failure(
                RjStatus::BufferTooSmall,
                format!("product has {} entries, buffer holds {len}", a.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, a.len());
        for (k, v) in linalg::to_rows(&a).into_iter().flatten().enumerate() {
            dst[k] = v;
        }
        Ok(())
    })
}

/// `‖θ‖² = Σ‖W_ℓ‖_F²`.
///
/// # Safety
/// `network` must be a live handle and `out_norm_sq` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rj_network_param_norm_sq(network: *const RjNetwork, out_norm_sq: *mut f64) -> RjStatus {
    guard(|| {
        *out(out_norm_sq, "out_norm_sq")? = linnet::param_norm_sq(net(network)?);
        Ok(())
    })
}

/// Training cost `C(A_θ)` and regularized loss `C + λ‖θ‖²`.
///
/// # Safety
/// Handles must be live; `out_cost` and `out_loss` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rj_loss(
    network: *const RjNetwork,
    prob: *const RjProblem,
    lambda: f64,
    out_cost: *mut f64,
    out_loss: *mut f64,
) -> RjStatus {
    guard(|| {
        let (t, p) = (net(network)?, problem(prob)?);
        let c = objective::cost(&linnet::forward_product(t), p)?;
        let l = objective::regularized_loss(t, p, lambda)?;
        *out(out_cost, "out_cost")? = c;
        *out(out_loss, "out_loss")? = l;
        Ok(())
    })
}

/// One SGD step on the observed entry `(i, j)`, in place.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn rj_sgd_step_at(
    network: *mut RjNetwork,
    prob: *const RjProblem,
    eta: f64,
    lambda: f64,
    convention_code: u32,
    i: usize,
    j: usize,
) -> RjStatus {
    guard(|| {
        let p = problem(prob)?;
        let n = network.as_mut().ok_or_else(|| null("network"))?;
        n.inner = optimizer::sgd_step_at(&n.inner, p, eta, lambda, convention(convention_code)?, (i, j))?;
        Ok(())
    })
}

/// `steps` SGD steps at constant `(η, λ)` with entries drawn from the stream `seed`,
/// in place. On divergence the network is left unchanged.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn rj_sgd_run(
    network: *mut RjNetwork,
    prob: *const RjProblem,
    eta: f64,
    lambda: f64,
    convention_code: u32,
    steps: usize,
    seed: u64,
) -> RjStatus {
    guard(|| {
        let p = problem(prob)?;
        let n = network.as_mut().ok_or_else(|| null("network"))?;
        if steps == 0 {
            return Ok(());
        }
        let mut cfg = RunConfig::new(
            p.clone(),
            n.inner.arch().clone(),
            InitSpec { scale: 1.0, seed: 0 },
            Schedule::constant(steps, eta, lambda)?,
            seed,
        );
        cfg.convention = convention(convention_code)?;
        cfg.record_every = steps;
        cfg.full_diagnostics_every = 0;
        let record = optimizer::run_from(n.inner.clone(), &cfg, 0)?;
        if let Some(d) = record.diverged {
            return Err(Error::Divergence {
                step: d.step,
                detail: d.detail,
            }
            .into());
        }
        n.inner = record.final_params;
        Ok(())
    })
}

/// One full-batch gradient step on `ℒ_λ`, in place.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn rj_gd_step(network: *mut RjNetwork, prob: *const RjProblem, eta: f64, lambda: f64) -> RjStatus {
    guard(|| {
        let p = problem(prob)?;
        let n = network.as_mut().ok_or_else(|| null("network"))?;
        n.inner = optimizer::gd_step(&n.inner, p, eta, lambda)?;
        Ok(())
    })
}

/// Membership in the absorbing set with parameters `(r, ε₁, ε₂, α, C)`, with the
/// smallest slack over all clauses (negative when outside).
///
/// # Safety
/// `network` must be a live handle; `out_member` and `out_margin` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rj_membership(
    network: *const RjNetwork,
    r: usize,
    eps1: f64,
    eps2: f64,
    alpha: f64,
    cap_c: f64,
    out_member: *mut bool,
    out_margin: *mut f64,
) -> RjStatus {
    guard(|| {
        let t = net(network)?;
        let spec = AbsorbingSpec::for_arch(r, eps1, eps2, alpha, cap_c, t.arch())?;
        let m = membership(t, &spec)?;
        *out(out_member, "out_member")? = m.member;
        *out(out_margin, "out_margin")? = m.min_margin(&spec);
        Ok(())
    })
}

fn write_string(s: &str, buf: *mut c_char, len: usize, out_needed: *mut usize) -> Result<(), Failure> {
    let needed = s.len() + 1;
    if let Some(n) = unsafe { out_needed.as_mut() } {
        *n = needed;
    }
    if buf.is_null() || len < needed {
        return Err(Failure(
            RjStatus::BufferTooSmall,
            format!("output needs {needed} bytes, buffer holds {len}"),
        ));
    }
    unsafe {
        ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
        *buf.add(s.len()) = 0;
    }
    Ok(())
}

/// Closure and reachability constants as a JSON object written into `buf`.
/// Pass `NaN` for `alpha`, `eta` or `c0` to use their defaults. `out_needed`
/// (optional) receives the byte count including the terminator; with a short
/// buffer the call returns `BufferTooSmall` and still sets it.
///
/// # Safety
/// `buf` must be null or hold `len` bytes; `out_needed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn rj_bounds_json(
    lambda: f64,
    depth: usize,
    cap_c: f64,
    c1: f64,
    n: usize,
    n_min: usize,
    r: usize,
    eps1: f64,
    eps2: f64,
    alpha: f64,
    eta: f64,
    c0: f64,
    buf: *mut c_char,
    len: usize,
    out_needed: *mut usize,
) -> RjStatus {
    guard(|| {
        let opt = |x: f64| if x.is_nan() { None } else { Some(x) };
        let q = BoundsQuery {
            lambda,
            depth,
            c1,
            n,
            n_min,
            r,
            eps1,
            eps2,
            cap_c,
            alpha: opt(alpha),
            eta: opt(eta),
            c0: opt(c0),
        };
        let report = absorbing::bounds(&q)?;
        let json = serde_json::to_string(&report).map_err(|e| Failure(RjStatus::Serialize, e.to_string()))?;
        write_string(&json, buf, len, out_needed)
    })
}

/// Runs a built-in preset (`fig1`…`fig4`) into `out_dir`. `n_seeds < 0` keeps the
/// preset's seeds, otherwise seeds `0..n_seeds` run.
///
/// # Safety
/// `name` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rj_run_preset(name: *const c_char, out_dir: *const c_char, n_seeds: i64) -> RjStatus {
    guard(|| {
        let mut cfg = experiment::preset(str_arg(name, "name")?)?;
        if n_seeds >= 0 {
            cfg.seeds = (0..n_seeds as u64).collect();
        }
        experiment::run_experiment(&cfg, Path::new(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}

/// Runs the experiment described by the TOML file at `config_path` into `out_dir`.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rj_run_config(config_path: *const c_char, out_dir: *const c_char) -> RjStatus {
    guard(|| {
        let cfg = load_config(Path::new(str_arg(config_path, "config_path")?))?;
        experiment::run_experiment(&cfg, Path::new(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}
