//! C ABI over the pure parts of cdrbench: label maps, response parsing,
//! metrics and prompt rendering from a loaded eval set.
//!
//! Every function returns a [`CdrStatus`]. On failure a description is kept
//! per thread and can be read with [`cdr_last_error`]. Strings returned to the
//! caller are owned by the caller and must be released with
//! [`cdr_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cdrbench::metrics::{mae, mrr_at_k, ndcg_at_k, rmse, RankingOutcome, RatingOutcome};
use cdrbench::promptgen::{render, PromptVariant};
use cdrbench::respparse::{parse_ranking, parse_rating, LabelMap, LikelihoodLabel};
use cdrbench::sampler::{read_eval_set, EvalInstance};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseFailure = 4,
    Io = 5,
    Panic = 6,
}

/// Loaded eval set.
pub struct CdrEvalSet {
    instances: Vec<EvalInstance>,
}

/// Label to rating table.
pub struct CdrLabelMap {
    map: LabelMap,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: CdrStatus, msg: impl Into<String>) -> CdrStatus {
    set_error(msg);
    status
}

/// Run `f`, turning panics into `CdrStatus::Panic`.
fn guard(f: impl FnOnce() -> CdrStatus) -> CdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == CdrStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(CdrStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, CdrStatus> {
    if p.is_null() {
        return Err(fail(CdrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CdrStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(CdrStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

fn out_string(s: String, out: *mut *mut c_char) -> CdrStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            CdrStatus::Ok
        }
        Err(_) => fail(CdrStatus::InvalidArgument, "string contains NUL"),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cdr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn cdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cdr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Number of likelihood labels (6).
#[no_mangle]
pub extern "C" fn cdr_label_count() -> usize {
    LikelihoodLabel::all().count()
}

/// Static name of label `index` (0 = "Very Unlikely"), or null when out of range.
#[no_mangle]
pub extern "C" fn cdr_label_name(index: usize) -> *const c_char {
    const NAMES: [&str; 6] = [
        "Very Unlikely\0",
        "Unlikely\0",
        "Somewhat Unlikely\0",
        "Neutral\0",
        "Likely\0",
        "Highly Likely\0",
    ];
    NAMES.get(index).map_or(ptr::null(), |s| s.as_ptr().cast())
}

// ---------------------------------------------------------------- label map

/// Label map from six strictly increasing values in `[0.5, 5.0]`.
///
/// # Safety
/// `values` must point to 6 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_label_map_new(values: *const f64, out: *mut *mut CdrLabelMap) -> CdrStatus {
    guard(|| {
        non_null!(values, out);
        let mut v = [0.0; 6];
        v.copy_from_slice(std::slice::from_raw_parts(values, 6));
        match LabelMap::new(v) {
            Ok(map) => {
                *out = Box::into_raw(Box::new(CdrLabelMap { map }));
                CdrStatus::Ok
            }
            Err(e) => fail(CdrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Named preset: "default" or "half_point".
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_label_map_preset(name: *const c_char, out: *mut *mut CdrLabelMap) -> CdrStatus {
    guard(|| {
        non_null!(out);
        let name = try_ffi!(str_arg(name, "name"));
        match LabelMap::preset(name) {
            Some(map) => {
                *out = Box::into_raw(Box::new(CdrLabelMap { map }));
                CdrStatus::Ok
            }
            None => fail(CdrStatus::InvalidArgument, format!("unknown preset {name:?}")),
        }
    })
}

/// Rating assigned to label `index`.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_label_map_rating(map: *const CdrLabelMap, index: usize, out: *mut f64) -> CdrStatus {
    guard(|| {
        non_null!(map, out);
        match LikelihoodLabel::new(index) {
            Some(l) => {
                *out = (*map).map.rating(l);
                CdrStatus::Ok
            }
            None => fail(CdrStatus::InvalidArgument, format!("label index {index} out of range")),
        }
    })
}

/// # Safety
/// `map` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cdr_label_map_free(map: *mut CdrLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

// ---------------------------------------------------------------- parsing

/// Find the likelihood label in a model reply and map it to a rating.
/// `map` may be null for the default table. `out_ambiguous` may be null.
///
/// # Safety
/// Pointers must be valid as described.
#[no_mangle]
pub unsafe extern "C" fn cdr_parse_rating(
    text: *const c_char,
    map: *const CdrLabelMap,
    out_label: *mut usize,
    out_rating: *mut f64,
    out_ambiguous: *mut bool,
) -> CdrStatus {
    guard(|| {
        non_null!(out_label, out_rating);
        let text = try_ffi!(str_arg(text, "text"));
        let table = if map.is_null() { LabelMap::default() } else { (*map).map };
        match parse_rating(text) {
            Ok(p) => {
                *out_label = p.label.index();
                *out_rating = table.rating(p.label);
                if !out_ambiguous.is_null() {
                    *out_ambiguous = p.ambiguous;
                }
                CdrStatus::Ok
            }
            Err(e) => fail(CdrStatus::ParseFailure, e.to_string()),
        }
    })
}

/// Recover a full ranking of `n` candidates from a model reply. On success
/// `out_permutation[0..n]` holds candidate indices, best first.
/// `out_dropped` (nullable) receives the number of unmatched emitted items.
///
/// # Safety
/// `candidates` must hold `n` NUL-terminated strings and `out_permutation`
/// room for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn cdr_parse_ranking(
    text: *const c_char,
    candidates: *const *const c_char,
    n: usize,
    threshold: f64,
    out_permutation: *mut usize,
    out_dropped: *mut usize,
) -> CdrStatus {
    guard(|| {
        non_null!(candidates, out_permutation);
        let text = try_ffi!(str_arg(text, "text"));
        let mut titles = Vec::with_capacity(n);
        for i in 0..n {
            titles.push(try_ffi!(str_arg(*candidates.add(i), "candidate")).to_string());
        }
        if !(0.0..=1.0).contains(&threshold) {
            return fail(CdrStatus::InvalidArgument, "threshold must be within [0, 1]");
        }
        match parse_ranking(text, &titles, threshold) {
            Ok(p) => {
                std::slice::from_raw_parts_mut(out_permutation, n).copy_from_slice(&p.permutation);
                if !out_dropped.is_null() {
                    *out_dropped = p.dropped_hallucinations;
                }
                CdrStatus::Ok
            }
            Err(e) => fail(CdrStatus::ParseFailure, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------- metrics

/// MRR@k and NDCG@k over `n` 1-based positive ranks, each out of `k_total`
/// candidates.
///
/// # Safety
/// `ranks` must hold `n` entries; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_ranking_metrics(
    ranks: *const usize,
    n: usize,
    k_total: usize,
    cutoff: usize,
    out_mrr: *mut f64,
    out_ndcg: *mut f64,
) -> CdrStatus {
    guard(|| {
        non_null!(ranks, out_mrr, out_ndcg);
        let outcomes: Vec<RankingOutcome> = std::slice::from_raw_parts(ranks, n)
            .iter()
            .map(|&p_u| RankingOutcome { p_u, k_total })
            .collect();
        if outcomes.iter().any(|o| o.p_u == 0 || o.p_u > k_total) {
            return fail(CdrStatus::InvalidArgument, "ranks must be within 1..=k_total");
        }
        match (mrr_at_k(&outcomes, cutoff), ndcg_at_k(&outcomes, cutoff)) {
            (Ok(m), Ok(g)) => {
                *out_mrr = m;
                *out_ndcg = g;
                CdrStatus::Ok
            }
            (Err(e), _) | (_, Err(e)) => fail(CdrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// MAE and RMSE over `n` (truth, prediction) pairs.
///
/// # Safety
/// `truth` and `predicted` must hold `n` entries; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_rating_metrics(
    truth: *const f64,
    predicted: *const f64,
    n: usize,
    out_mae: *mut f64,
    out_rmse: *mut f64,
) -> CdrStatus {
    guard(|| {
        non_null!(truth, predicted, out_mae, out_rmse);
        let y = std::slice::from_raw_parts(truth, n);
        let y_hat = std::slice::from_raw_parts(predicted, n);
        let outcomes: Vec<RatingOutcome> = y.iter().zip(y_hat).map(|(&y, &y_hat)| RatingOutcome { y, y_hat }).collect();
        match (mae(&outcomes), rmse(&outcomes)) {
            (Ok(a), Ok(r)) => {
                *out_mae = a;
                *out_rmse = r;
                CdrStatus::Ok
            }
            (Err(e), _) | (_, Err(e)) => fail(CdrStatus::InvalidArgument, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------- eval sets

/// Load a line-delimited eval set file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_evalset_open(path: *const c_char, out: *mut *mut CdrEvalSet) -> CdrStatus {
    guard(|| {
        non_null!(out);
        let path = try_ffi!(str_arg(path, "path"));
        match read_eval_set(Path::new(path)) {
            Ok(instances) => {
                *out = Box::into_raw(Box::new(CdrEvalSet { instances }));
                CdrStatus::Ok
            }
            Err(e) => fail(CdrStatus::Io, e.to_string()),
        }
    })
}

/// Number of instances in the set.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_evalset_len(set: *const CdrEvalSet, out: *mut usize) -> CdrStatus {
    guard(|| {
        non_null!(set, out);
        *out = (*set).instances.len();
        CdrStatus::Ok
    })
}

/// Render the prompt of instance `index` for a variant such as
/// "with-ranking-high". The returned string is freed with `cdr_string_free`.
///
/// # Safety
/// `set` must be a live handle, `variant` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_evalset_render(
    set: *const CdrEvalSet,
    index: usize,
    variant: *const c_char,
    out: *mut *mut c_char,
) -> CdrStatus {
    guard(|| {
        non_null!(set, out);
        let v = try_ffi!(str_arg(variant, "variant"));
        let v: PromptVariant = match v.parse() {
            Ok(v) => v,
            Err(e) => return fail(CdrStatus::InvalidArgument, format!("{e}")),
        };
        let set = &*set;
        let Some(inst) = set.instances.get(index) else {
            return fail(CdrStatus::InvalidArgument, format!("index {index} out of range"));
        };
        match render(inst, v) {
            Ok(p) => out_string(p.text, out),
            Err(e) => fail(CdrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// 0-based index of the positive item in instance `index`'s candidate list.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdr_evalset_positive_index(set: *const CdrEvalSet, index: usize, out: *mut usize) -> CdrStatus {
    guard(|| {
        non_null!(set, out);
        let set = &*set;
        match set.instances.get(index) {
            Some(inst) => {
                *out = inst.positive_index;
                CdrStatus::Ok
            }
            None => fail(CdrStatus::InvalidArgument, format!("index {index} out of range")),
        }
    })
}

/// # Safety
/// `set` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cdr_evalset_free(set: *mut CdrEvalSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
