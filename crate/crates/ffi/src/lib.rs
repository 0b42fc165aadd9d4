//! C ABI over the stagepipe rule-memory gate, edit distance and metrics.
//!
//! Every fallible function returns an [`SpStatus`]. On failure a message is
//! available from [`sp_last_error`] on the same thread. Strings returned through
//! out-pointers are owned by the caller and released with [`sp_string_free`];
//! memory handles are released with [`sp_memory_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use stagepipe::eval::{self, ConfusionMatrix, MacroMetrics};
use stagepipe::memory::{self, RuleMemory};
use stagepipe::{Error, StageCategory};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    CategoryMismatch = 6,
    Internal = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpCategory {
    T = 0,
    N = 1,
}

impl From<SpCategory> for StageCategory {
    fn from(c: SpCategory) -> Self {
        match c {
            SpCategory::T => StageCategory::T,
            SpCategory::N => StageCategory::N,
        }
    }
}

/// Opaque rule memory.
pub struct SpMemory {
    inner: RuleMemory,
}

/// One gated-update step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpUpdateTrace {
    pub step: usize,
    pub proposed_len: usize,
    pub current_len: usize,
    pub distance: usize,
    pub similarity: f64,
    pub accepted: bool,
}

/// Per-class and macro-averaged precision, recall and F1. Class `i` is the
/// i-th label of the category (T1..T4 or N0..N3).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub class_precision: [f64; 4],
    pub class_recall: [f64; 4],
    pub class_f1: [f64; 4],
}

/// Predicted-label value marking output that never satisfied the schema.
pub const SP_UNPARSEABLE: i32 = -1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> SpStatus {
    match err {
        Error::Io { .. } => SpStatus::Io,
        Error::Json(_) | Error::CorpusLine { .. } => SpStatus::Parse,
        Error::CategoryMismatch { .. } => SpStatus::CategoryMismatch,
        _ => SpStatus::InvalidArgument,
    }
}

struct Fail(SpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T = ()> = std::result::Result<T, Fail>;

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> FfiResult) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(SpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Fail(SpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn mem_arg<'a>(p: *const SpMemory) -> FfiResult<&'a SpMemory> {
    p.as_ref()
        .ok_or_else(|| Fail(SpStatus::NullPointer, "memory handle is null".into()))
}

fn c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(SpStatus::Internal, "string contains NUL".into()))
}

/// Message for the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Levenshtein distance over Unicode scalar values.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_edit_distance(a: *const c_char, b: *const c_char, out: *mut usize) -> SpStatus {
    guard(|| {
        let (a, b) = (str_arg(a, "a")?, str_arg(b, "b")?);
        *out_arg(out, "out")? = memory::edit_distance(a, b);
        Ok(())
    })
}

/// Similarity on a 0-100 scale: `100 * (max_len - distance) / max_len`.
///
/// # Safety
/// As for [`sp_edit_distance`].
#[no_mangle]
pub unsafe extern "C" fn sp_similarity(a: *const c_char, b: *const c_char, out: *mut f64) -> SpStatus {
    guard(|| {
        let (a, b) = (str_arg(a, "a")?, str_arg(b, "b")?);
        *out_arg(out, "out")? = memory::similarity(a, b);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn sp_gate_accepts(similarity: f64, threshold: f64) -> bool {
    memory::gate_accepts(similarity, threshold)
}

/// Creates an empty memory (version 0).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_new(category: SpCategory, out: *mut *mut SpMemory) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SpMemory {
            inner: RuleMemory::empty(category.into()),
        }));
        Ok(())
    })
}

/// Parses a memory from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_from_json(json: *const c_char, out: *mut *mut SpMemory) -> SpStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner = RuleMemory::from_json(json, None)?;
        *out = Box::into_raw(Box::new(SpMemory { inner }));
        Ok(())
    })
}

/// Loads a memory file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_load(path: *const c_char, out: *mut *mut SpMemory) -> SpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = RuleMemory::load(path, None)?;
        *out = Box::into_raw(Box::new(SpMemory { inner }));
        Ok(())
    })
}

/// # Safety
/// `mem` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_save(mem: *const SpMemory, path: *const c_char) -> SpStatus {
    guard(|| {
        let mem = mem_arg(mem)?;
        mem.inner.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a memory handle. Null is ignored.
///
/// # Safety
/// `mem` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_free(mem: *mut SpMemory) {
    if !mem.is_null() {
        drop(Box::from_raw(mem));
    }
}

/// # Safety
/// `mem` must be a live handle or null (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn sp_memory_version(mem: *const SpMemory) -> u64 {
    mem.as_ref().map_or(0, |m| m.inner.version())
}

/// Number of rules held.
///
/// # Safety
/// `mem` must be a live handle or null (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn sp_memory_rule_count(mem: *const SpMemory) -> usize {
    mem.as_ref().map_or(0, |m| m.inner.rules().len())
}

/// The canonical rule serialization that the gate compares.
///
/// # Safety
/// `mem` must be a live handle; `out` writable. Free the result with
/// [`sp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sp_memory_serialize(mem: *const SpMemory, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        let mem = mem_arg(mem)?;
        *out_arg(out, "out")? = c_string(mem.inner.serialize())?;
        Ok(())
    })
}

/// JSON form of the memory, as written by [`sp_memory_save`].
///
/// # Safety
/// As for [`sp_memory_serialize`].
#[no_mangle]
pub unsafe extern "C" fn sp_memory_to_json(mem: *const SpMemory, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        let mem = mem_arg(mem)?;
        *out_arg(out, "out")? = c_string(mem.inner.to_json())?;
        Ok(())
    })
}

/// Offers a candidate rule list to the memory gate, replacing the memory in
/// place when accepted. An empty memory accepts unconditionally.
///
/// # Safety
/// `mem` must be a live handle; `rules` must point to `n_rules` NUL-terminated
/// strings; `trace` may be null.
#[no_mangle]
pub unsafe extern "C" fn sp_memory_gated_update(
    mem: *mut SpMemory,
    rules: *const *const c_char,
    n_rules: usize,
    threshold: f64,
    step: usize,
    trace: *mut SpUpdateTrace,
) -> SpStatus {
    guard(|| {
        let mem = mem
            .as_mut()
            .ok_or_else(|| Fail(SpStatus::NullPointer, "memory handle is null".into()))?;
        if rules.is_null() && n_rules > 0 {
            return Err(Fail(SpStatus::NullPointer, "rules is null".into()));
        }
        let candidate = (0..n_rules)
            .map(|i| str_arg(*rules.add(i), "rule").map(str::to_string))
            .collect::<FfiResult<Vec<_>>>()?;
        let (next, t) = memory::gated_update(&mem.inner, candidate, threshold, step)?;
        mem.inner = next;
        if let Some(out) = trace.as_mut() {
            *out = SpUpdateTrace {
                step: t.step,
                proposed_len: t.proposed_len,
                current_len: t.current_len,
                distance: t.distance,
                similarity: t.similarity,
                accepted: t.accepted,
            };
        }
        Ok(())
    })
}

/// Macro metrics from parallel arrays of class indices (0..=3). A predicted
/// value of [`SP_UNPARSEABLE`] counts as a miss for the gold class only.
///
/// # Safety
/// `gold` and `predicted` must each point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_score(
    category: SpCategory,
    gold: *const i32,
    predicted: *const i32,
    n: usize,
    out: *mut SpMetrics,
) -> SpStatus {
    guard(|| {
        if n > 0 && (gold.is_null() || predicted.is_null()) {
            return Err(Fail(SpStatus::NullPointer, "label array is null".into()));
        }
        let out = out_arg(out, "out")?;
        let mut m = ConfusionMatrix::new(category.into());
        for i in 0..n {
            let (g, p) = (*gold.add(i), *predicted.add(i));
            let bad = |v: i32| Fail(SpStatus::InvalidArgument, format!("label index {v} at position {i}"));
            let g = usize::try_from(g).ok().filter(|&g| g < 4).ok_or_else(|| bad(g))?;
            match p {
                SP_UNPARSEABLE => m.unparseable[g] += 1,
                0..=3 => m.counts[g][p as usize] += 1,
                _ => return Err(bad(p)),
            }
        }
        let macro_m = MacroMetrics::from_matrix(&m);
        let pick = |f: fn(&eval::ClassMetrics) -> f64| {
            let mut a = [0.0; 4];
            for (slot, c) in a.iter_mut().zip(&macro_m.per_class) {
                *slot = f(c);
            }
            a
        };
        *out = SpMetrics {
            precision: macro_m.precision,
            recall: macro_m.recall,
            f1: macro_m.f1,
            class_precision: pick(|c| c.precision),
            class_recall: pick(|c| c.recall),
            class_f1: pick(|c| c.f1),
        };
        Ok(())
    })
}

/// `100 * num / den` with one decimal, halves rounded away from zero.
///
/// # Safety
/// `out` must be writable; free the result with [`sp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sp_format_percent(num: u64, den: u64, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        if den == 0 {
            return Err(Fail(SpStatus::InvalidArgument, "denominator is zero".into()));
        }
        *out_arg(out, "out")? = c_string(eval::format_percent(u128::from(num), u128::from(den)))?;
        Ok(())
    })
}
