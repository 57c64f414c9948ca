//! C ABI for the otrlab training laboratory.
//!
//! The interface follows the usual conventions for embedding a Rust library:
//!
//! - Every fallible call returns an [`OtrStatus`] code; `OTR_STATUS_OK` is
//!   zero. On failure a thread-local message is set and can be read with
//!   [`otr_last_error`].
//! - Trainers are opaque handles created from the same JSON run
//!   configuration the CLI accepts, stepped one optimization step at a
//!   time, and freed explicitly. Handles are not thread-safe; use one per
//!   thread.
//! - Strings returned by a handle (metrics rows) live until the next call
//!   on that handle or its destruction. Static strings (version, CSV
//!   header) live forever. The library never frees caller memory and the
//!   caller never frees library memory.
//! - Panics never cross the boundary: they are caught and reported as
//!   `OTR_STATUS_PANIC`.
//!
//! The matching header `include/otrlab.h` is generated by `cbindgen` at
//! build time and committed alongside the source.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;

use otrlab::config::RunConfig;
use otrlab::data::{gen_task, TaskData, Vocab};
use otrlab::loss::exact_otr_expectation;
use otrlab::train::{evaluate, EvalMode, Trainer, METRICS_HEADER};
use otrlab::verify::{self, SuiteKind};
use otrlab::Error;

/// Result code of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtrStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument violated a documented precondition (shape, range, ...).
    InvalidInput = 3,
    /// The run configuration failed to parse or validate.
    Config = 4,
    /// Training produced a non-finite loss and aborted.
    Numeric = 5,
    /// File I/O, checkpoint, or corpus access failed.
    Io = 6,
    /// The training run has already consumed its full step budget.
    Finished = 7,
    /// A panic was caught at the language boundary; state may be stale.
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let owned = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").expect("static message"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: OtrStatus, message: &str) -> OtrStatus {
    set_last_error(message);
    status
}

fn status_of(err: &Error) -> OtrStatus {
    match err {
        Error::Config(_) => OtrStatus::Config,
        Error::NonFinite { .. } => OtrStatus::Numeric,
        Error::Io(_) | Error::Checkpoint(_) | Error::Corpus { .. } => OtrStatus::Io,
        Error::Shape(_)
        | Error::Autodiff(_)
        | Error::InvalidInput(_)
        | Error::UnknownSymbol { .. } => OtrStatus::InvalidInput,
    }
}

fn fail_with(err: &Error) -> OtrStatus {
    fail(status_of(err), &err.to_string())
}

/// Runs `body` with panics converted to `OTR_STATUS_PANIC`.
fn guarded(body: impl FnOnce() -> OtrStatus) -> OtrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail(OtrStatus::Panic, &format!("caught panic: {message}"))
        }
    }
}

/// Reads a required C string argument.
///
/// Returns the parsed `&str` or an error status already recorded via
/// [`set_last_error`].
unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, OtrStatus> {
    if ptr.is_null() {
        return Err(fail(OtrStatus::NullArgument, &format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(OtrStatus::InvalidUtf8, &format!("{what} is not valid UTF-8")))
}

/// A training run behind an opaque pointer: the resolved configuration, the
/// generated task data, and the trainer itself, plus the buffer backing the
/// most recently returned metrics row.
pub struct OtrTrainer {
    cfg: RunConfig,
    vocab: Vocab,
    data: TaskData,
    trainer: Trainer,
    row: CString,
}

impl OtrTrainer {
    fn create(config_json: &str, resume_dir: Option<&Path>) -> Result<Box<OtrTrainer>, Error> {
        let cfg = RunConfig::from_json(config_json, "<config_json>")?.resolve()?;
        let vocab = cfg.vocab();
        let data = gen_task(&cfg.task, &vocab, cfg.model.context_len)?;
        let trainer = match resume_dir {
            Some(dir) => {
                let state = otrlab::checkpoint::load_training_state(dir, &cfg.model, &cfg.optimizer)?;
                Trainer::from_state(state, cfg.loss, cfg.schedule, cfg.train, data.train.len())?
            }
            None => Trainer::new(
                &cfg.model,
                cfg.optimizer,
                cfg.loss,
                cfg.schedule,
                cfg.train,
                data.train.len(),
            )?,
        };
        Ok(Box::new(OtrTrainer { cfg, vocab, data, trainer, row: CString::default() }))
    }
}

unsafe fn required_trainer<'a>(
    handle: *mut OtrTrainer,
    what: &str,
) -> Result<&'a mut OtrTrainer, OtrStatus> {
    if handle.is_null() {
        return Err(fail(OtrStatus::NullArgument, &format!("{what} is null")));
    }
    Ok(unsafe { &mut *handle })
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the column header matching the metrics rows produced by
/// `otr_trainer_step`, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otr_metrics_header() -> *const c_char {
    static HEADER: OnceLock<CString> = OnceLock::new();
    HEADER
        .get_or_init(|| CString::new(METRICS_HEADER).expect("header has no NUL"))
        .as_ptr()
}

/// Returns the message of the most recent failure on the calling thread, or
/// an empty string if no call has failed yet. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn otr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Computes the exact expectation of the one-token-rollout loss for a
/// single position.
///
/// `log_probs` must point to `len` finite log-probabilities of a full
/// vocabulary distribution, `gt` is the ground-truth token id, `kappa` the
/// sampling temperature, and `beta` the wrong-candidate reward. On success
/// writes the expectation to `out`.
///
/// # Safety
///
/// `log_probs` must be readable for `len` doubles and `out` for one.
#[no_mangle]
pub unsafe extern "C" fn otr_exact_expectation(
    log_probs: *const f64,
    len: usize,
    gt: usize,
    kappa: f64,
    beta: f64,
    out: *mut f64,
) -> OtrStatus {
    guarded(|| {
        if log_probs.is_null() {
            return fail(OtrStatus::NullArgument, "log_probs is null");
        }
        if out.is_null() {
            return fail(OtrStatus::NullArgument, "out is null");
        }
        let lp = unsafe { std::slice::from_raw_parts(log_probs, len) };
        match exact_otr_expectation(lp, gt, kappa, beta) {
            Ok(value) => {
                unsafe { *out = value };
                OtrStatus::Ok
            }
            Err(err) => fail_with(&err),
        }
    })
}

/// Runs one of the built-in verification suites ("gradcheck", "estimator",
/// or "equivalence") with the given seed and writes the number of failed
/// checks to `out_failures`. A suite that runs to completion returns
/// `OTR_STATUS_OK` even when checks fail; inspect `out_failures`.
///
/// # Safety
///
/// `suite` must be a NUL-terminated string and `out_failures` writable.
#[no_mangle]
pub unsafe extern "C" fn otr_verify_suite(
    suite: *const c_char,
    seed: u64,
    out_failures: *mut u32,
) -> OtrStatus {
    guarded(|| {
        let name = match unsafe { required_str(suite, "suite") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out_failures.is_null() {
            return fail(OtrStatus::NullArgument, "out_failures is null");
        }
        let kind: SuiteKind = match name.parse() {
            Ok(kind) => kind,
            Err(err) => return fail_with(&err),
        };
        match verify::run_suite(kind, seed) {
            Ok(checks) => {
                let failures = checks.iter().filter(|c| !c.passed).count() as u32;
                unsafe { *out_failures = failures };
                OtrStatus::Ok
            }
            Err(err) => fail_with(&err),
        }
    })
}

/// Creates a trainer from a JSON run configuration (the same schema the
/// CLI accepts) and writes the handle to `out`.
///
/// The configuration is resolved first: schema errors, impossible shapes,
/// and inconsistent budgets are reported as `OTR_STATUS_CONFIG` before any
/// training state exists.
///
/// # Safety
///
/// `config_json` must be a NUL-terminated string and `out` writable. The
/// returned handle must be released with `otr_trainer_free`.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_new(
    config_json: *const c_char,
    out: *mut *mut OtrTrainer,
) -> OtrStatus {
    unsafe { trainer_create(config_json, std::ptr::null(), out) }
}

/// Creates a trainer that resumes from a checkpoint directory written by
/// `otr_trainer_save`. The configuration must match the one the checkpoint
/// was trained under.
///
/// # Safety
///
/// As `otr_trainer_new`; `checkpoint_dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_resume(
    config_json: *const c_char,
    checkpoint_dir: *const c_char,
    out: *mut *mut OtrTrainer,
) -> OtrStatus {
    if checkpoint_dir.is_null() {
        return fail(OtrStatus::NullArgument, "checkpoint_dir is null");
    }
    unsafe { trainer_create(config_json, checkpoint_dir, out) }
}

unsafe fn trainer_create(
    config_json: *const c_char,
    checkpoint_dir: *const c_char,
    out: *mut *mut OtrTrainer,
) -> OtrStatus {
    guarded(|| {
        let json = match unsafe { required_str(config_json, "config_json") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let resume = if checkpoint_dir.is_null() {
            None
        } else {
            match unsafe { required_str(checkpoint_dir, "checkpoint_dir") } {
                Ok(dir) => Some(Path::new(dir)),
                Err(status) => return status,
            }
        };
        if out.is_null() {
            return fail(OtrStatus::NullArgument, "out is null");
        }
        match OtrTrainer::create(json, resume) {
            Ok(handle) => {
                unsafe { *out = Box::into_raw(handle) };
                OtrStatus::Ok
            }
            Err(err) => fail_with(&err),
        }
    })
}

/// Advances the trainer by one optimization step.
///
/// On success writes a pointer to the step's metrics row — one CSV line
/// matching `otr_metrics_header` — to `out_row`. The pointer stays valid
/// until the next call on this handle or `otr_trainer_free`. When the full
/// step budget has already been consumed, returns `OTR_STATUS_FINISHED`
/// and writes null.
///
/// # Safety
///
/// `handle` must be a live trainer from this library and `out_row`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_step(
    handle: *mut OtrTrainer,
    out_row: *mut *const c_char,
) -> OtrStatus {
    guarded(|| {
        let t = match unsafe { required_trainer(handle, "handle") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        if out_row.is_null() {
            return fail(OtrStatus::NullArgument, "out_row is null");
        }
        if t.trainer.step() >= t.trainer.total_steps() {
            unsafe { *out_row = std::ptr::null() };
            return fail(
                OtrStatus::Finished,
                &format!("all {} steps already taken", t.trainer.total_steps()),
            );
        }
        let stop = t.trainer.step() + 1;
        let mut line = None;
        let run = t.trainer.run(&t.vocab, &t.data, None, Some(stop), |row| {
            line = Some(row.csv_line());
            Ok(())
        });
        match run {
            Ok(()) => {
                let line = line.unwrap_or_default();
                t.row = CString::new(line.replace('\0', " ")).expect("NULs stripped");
                unsafe { *out_row = t.row.as_ptr() };
                OtrStatus::Ok
            }
            Err(err) => fail_with(&err),
        }
    })
}

/// Writes the trainer's current step to `out_step` and its total budget to
/// `out_total`. Either pointer may be null to skip that value.
///
/// # Safety
///
/// `handle` must be a live trainer from this library.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_progress(
    handle: *mut OtrTrainer,
    out_step: *mut u64,
    out_total: *mut u64,
) -> OtrStatus {
    guarded(|| {
        let t = match unsafe { required_trainer(handle, "handle") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        if !out_step.is_null() {
            unsafe { *out_step = t.trainer.step() };
        }
        if !out_total.is_null() {
            unsafe { *out_total = t.trainer.total_steps() };
        }
        OtrStatus::Ok
    })
}

/// Greedy exact-match accuracy over one of the task splits: 0 = train,
/// 1 = in-distribution eval, 2 = out-of-distribution eval. Decoding uses
/// the run configuration's evaluation settings and does not change
/// training state.
///
/// # Safety
///
/// `handle` must be a live trainer from this library and `out_accuracy`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_evaluate(
    handle: *mut OtrTrainer,
    split: u32,
    out_accuracy: *mut f64,
) -> OtrStatus {
    guarded(|| {
        let t = match unsafe { required_trainer(handle, "handle") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        if out_accuracy.is_null() {
            return fail(OtrStatus::NullArgument, "out_accuracy is null");
        }
        let examples = match split {
            0 => &t.data.train,
            1 => &t.data.eval_in,
            2 => &t.data.eval_ood,
            other => {
                return fail(
                    OtrStatus::InvalidInput,
                    &format!("split must be 0 (train), 1 (eval_in), or 2 (eval_ood), got {other}"),
                )
            }
        };
        let acc = evaluate(
            t.trainer.model(),
            &t.vocab,
            examples,
            EvalMode::Greedy,
            t.cfg.train.eval_max_new,
            t.cfg.train.seed,
            t.trainer.step(),
        );
        match acc {
            Ok(value) => {
                unsafe { *out_accuracy = value };
                OtrStatus::Ok
            }
            Err(err) => fail_with(&err),
        }
    })
}

/// Saves a checkpoint of the trainer into `dir` (created if needed). The
/// checkpoint restores byte-identically through `otr_trainer_resume`.
///
/// # Safety
///
/// `handle` must be a live trainer from this library and `dir` a
/// NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_save(
    handle: *mut OtrTrainer,
    dir: *const c_char,
) -> OtrStatus {
    guarded(|| {
        let t = match unsafe { required_trainer(handle, "handle") } {
            Ok(t) => t,
            Err(status) => return status,
        };
        let dir = match unsafe { required_str(dir, "dir") } {
            Ok(d) => d,
            Err(status) => return status,
        };
        match t.trainer.save_checkpoint(Path::new(dir)) {
            Ok(()) => OtrStatus::Ok,
            Err(err) => fail_with(&err),
        }
    })
}

/// Releases a trainer handle. Passing null is a no-op.
///
/// # Safety
///
/// `handle` must be null or a live trainer from this library; it must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn otr_trainer_free(handle: *mut OtrTrainer) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}
