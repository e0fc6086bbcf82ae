use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use cdrbench::promptgen::{render, PromptVariant};
use cdrbench::respparse::LikelihoodLabel;
use cdrbench::sampler::read_eval_set;
use cdrbench_ffi::*;

fn evalset_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/evalset_100.jsonl")
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cdr_last_error()) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn label_names_match_core() {
    assert_eq!(cdr_label_count(), 6);
    for l in LikelihoodLabel::all() {
        let name = unsafe { CStr::from_ptr(cdr_label_name(l.index())) };
        assert_eq!(name.to_str().unwrap(), l.name());
    }
    assert!(cdr_label_name(6).is_null());
    let v = unsafe { CStr::from_ptr(cdr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn label_maps_from_values_and_presets() {
    unsafe {
        let mut map: *mut CdrLabelMap = ptr::null_mut();
        assert_eq!(cdr_label_map_preset(c("half_point").as_ptr(), &mut map), CdrStatus::Ok);
        let mut r = 0.0;
        assert_eq!(cdr_label_map_rating(map, 0, &mut r), CdrStatus::Ok);
        assert_eq!(r, 0.5);
        assert_eq!(cdr_label_map_rating(map, 6, &mut r), CdrStatus::InvalidArgument);
        cdr_label_map_free(map);

        assert_eq!(cdr_label_map_preset(c("nope").as_ptr(), &mut map), CdrStatus::InvalidArgument);
        assert!(last_error().contains("nope"));

        let bad = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(cdr_label_map_new(bad.as_ptr(), &mut map), CdrStatus::InvalidArgument);
        let good = [1.0, 2.0, 3.0, 3.5, 4.0, 5.0];
        assert_eq!(cdr_label_map_new(good.as_ptr(), &mut map), CdrStatus::Ok);
        assert!(last_error().is_empty());
        assert_eq!(cdr_label_map_rating(map, 3, &mut r), CdrStatus::Ok);
        assert_eq!(r, 3.5);

        let (mut label, mut rating, mut amb) = (99usize, 0.0, true);
        let text = c("I think this is Highly Likely.");
        assert_eq!(cdr_parse_rating(text.as_ptr(), map, &mut label, &mut rating, &mut amb), CdrStatus::Ok);
        assert_eq!((label, rating, amb), (5, 5.0, false));
        // null map means the default table
        let text = c("Somewhat Unlikely");
        assert_eq!(cdr_parse_rating(text.as_ptr(), ptr::null(), &mut label, &mut rating, ptr::null_mut()), CdrStatus::Ok);
        assert_eq!((label, rating), (2, 2.6));
        let text = c("no idea");
        assert_eq!(cdr_parse_rating(text.as_ptr(), map, &mut label, &mut rating, ptr::null_mut()), CdrStatus::ParseFailure);
        cdr_label_map_free(map);
        cdr_label_map_free(ptr::null_mut());
    }
}

#[test]
fn ranking_parse_returns_a_permutation() {
    let titles = ["Alpha Movie", "Beta: The Sequel", "Gamma"].map(c);
    let ptrs: Vec<*const c_char> = titles.iter().map(|t| t.as_ptr()).collect();
    let reply = c("[Gamma, Made Up Film, alpha movie]");
    let mut perm = [usize::MAX; 3];
    let mut dropped = 0;
    unsafe {
        let s = cdr_parse_ranking(reply.as_ptr(), ptrs.as_ptr(), 3, 0.85, perm.as_mut_ptr(), &mut dropped);
        assert_eq!(s, CdrStatus::Ok, "{}", last_error());
    }
    assert_eq!(perm, [2, 0, 1]);
    assert_eq!(dropped, 1);
    unsafe {
        let s = cdr_parse_ranking(reply.as_ptr(), ptrs.as_ptr(), 3, 1.5, perm.as_mut_ptr(), ptr::null_mut());
        assert_eq!(s, CdrStatus::InvalidArgument);
        let s = cdr_parse_ranking(ptr::null(), ptrs.as_ptr(), 3, 0.85, perm.as_mut_ptr(), ptr::null_mut());
        assert_eq!(s, CdrStatus::NullPointer);
    }
}

#[test]
fn metrics_over_arrays() {
    let ranks = [1usize, 3, 11];
    let (mut mrr, mut ndcg) = (0.0, 0.0);
    unsafe {
        assert_eq!(cdr_ranking_metrics(ranks.as_ptr(), 3, 21, 10, &mut mrr, &mut ndcg), CdrStatus::Ok);
    }
    assert!((mrr - (1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
    assert!((ndcg - 1.5 / 3.0).abs() < 1e-12);
    let zero = [0usize];
    unsafe {
        assert_eq!(cdr_ranking_metrics(zero.as_ptr(), 1, 21, 10, &mut mrr, &mut ndcg), CdrStatus::InvalidArgument);
    }

    let y = [4.0, 2.0];
    let y_hat = [3.0, 5.0];
    let (mut mae, mut rmse) = (0.0, 0.0);
    unsafe {
        assert_eq!(cdr_rating_metrics(y.as_ptr(), y_hat.as_ptr(), 2, &mut mae, &mut rmse), CdrStatus::Ok);
    }
    assert_eq!(mae, 2.0);
    assert!((rmse - 5f64.sqrt()).abs() < 1e-12);
    unsafe {
        assert_eq!(cdr_rating_metrics(y.as_ptr(), y_hat.as_ptr(), 0, &mut mae, &mut rmse), CdrStatus::InvalidArgument);
    }
}

#[test]
fn evalset_handle_renders_the_same_prompts_as_core() {
    let path = c(evalset_path().to_str().unwrap());
    let core = read_eval_set(&evalset_path()).unwrap();
    unsafe {
        let mut set: *mut CdrEvalSet = ptr::null_mut();
        assert_eq!(cdr_evalset_open(path.as_ptr(), &mut set), CdrStatus::Ok, "{}", last_error());
        let mut n = 0;
        assert_eq!(cdr_evalset_len(set, &mut n), CdrStatus::Ok);
        assert_eq!(n, core.len());
        for v in PromptVariant::all() {
            let name = c(&v.to_string());
            for i in [0, n - 1] {
                let mut out: *mut c_char = ptr::null_mut();
                assert_eq!(cdr_evalset_render(set, i, name.as_ptr(), &mut out), CdrStatus::Ok);
                assert_eq!(CStr::from_ptr(out).to_str().unwrap(), render(&core[i], v).unwrap().text);
                cdr_string_free(out);
            }
        }
        let mut pos = 0;
        assert_eq!(cdr_evalset_positive_index(set, 0, &mut pos), CdrStatus::Ok);
        assert_eq!(pos, core[0].positive_index);

        let mut out: *mut c_char = ptr::null_mut();
        let bad = c("with-ranking-low");
        assert_eq!(cdr_evalset_render(set, 0, bad.as_ptr(), &mut out), CdrStatus::InvalidArgument);
        let ok = c("with-ranking-high");
        assert_eq!(cdr_evalset_render(set, n, ok.as_ptr(), &mut out), CdrStatus::InvalidArgument);
        assert!(out.is_null());
        cdr_evalset_free(set);

        let missing = c("/nonexistent/evalset.jsonl");
        assert_eq!(cdr_evalset_open(missing.as_ptr(), &mut set), CdrStatus::Io);
        assert!(!last_error().is_empty());
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/cdrbench.h")).unwrap();
    assert!(header.contains("#ifndef CDRBENCH_H"));
    assert!(header.contains("typedef enum CdrStatus"));
    assert!(header.contains("CDR_STATUS_PARSE_FAILURE = 4"));
    assert!(header.contains("typedef struct CdrEvalSet CdrEvalSet;"));
    assert!(header.contains("typedef struct CdrLabelMap CdrLabelMap;"));
    for f in [
        "cdr_last_error",
        "cdr_version",
        "cdr_string_free",
        "cdr_label_count",
        "cdr_label_name",
        "cdr_label_map_new",
        "cdr_label_map_preset",
        "cdr_label_map_rating",
        "cdr_label_map_free",
        "cdr_parse_rating",
        "cdr_parse_ranking",
        "cdr_ranking_metrics",
        "cdr_rating_metrics",
        "cdr_evalset_open",
        "cdr_evalset_len",
        "cdr_evalset_render",
        "cdr_evalset_positive_index",
        "cdr_evalset_free",
    ] {
        assert!(header.contains(&format!(" {f}(")) || header.contains(&format!("*{f}(")), "header lacks {f}");
    }
}
