//! Title normalization shared by the sampler, the response parser and the mock.

use std::collections::BTreeSet;

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2018}' | '\u{2019}' | '`')
}

/// Casefold, drop apostrophes, turn remaining punctuation into spaces and
/// collapse whitespace. `"Sherlock: Season 1"` becomes `"sherlock season 1"`.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if is_apostrophe(c) {
            continue;
        }
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn token_set(s: &str) -> BTreeSet<String> {
    normalize(s).split_whitespace().map(str::to_owned).collect()
}

/// Jaccard overlap of the normalized token sets, in `[0, 1]`.
pub fn token_set_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (token_set(a), token_set(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    inter as f64 / union as f64
}
