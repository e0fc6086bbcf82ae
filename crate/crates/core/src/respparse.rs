//! Turning raw completions into likelihood labels and candidate rankings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptgen::likelihood_labels;
use crate::text;

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no likelihood label found in response")]
    UnparseableRating,
    #[error("no candidate title found in response")]
    UnparseableRanking,
    #[error("ranking needs at least 2 unique candidates")]
    BadCandidates,
    #[error("invalid label map: {0}")]
    LabelMap(String),
}

/// Index into the ordered label list; 0 is "Very Unlikely".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LikelihoodLabel(u8);

impl LikelihoodLabel {
    pub fn new(index: usize) -> Option<Self> {
        (index < 6).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        likelihood_labels()[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..6).map(|i| Self(i as u8))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsedRating {
    pub label: LikelihoodLabel,
    /// More than one distinct label appeared in the text.
    pub ambiguous: bool,
}

/// Find the first label occurrence in `text`, case-insensitively. At each
/// position the longest label is tried first, so "Very Unlikely" is never
/// read as "Unlikely".
pub fn parse_rating(text: &str) -> Result<ParsedRating, ParseError> {
    let lower = text.to_lowercase();
    let mut labels: Vec<(usize, String)> = likelihood_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.to_lowercase()))
        .collect();
    labels.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let bytes = lower.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric();
    let mut found: Vec<usize> = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if pos > 0 && is_word(bytes[pos - 1]) && is_word(bytes[pos]) {
            pos += 1;
            continue;
        }
        let hit = labels.iter().find(|(_, l)| {
            lower[pos..].starts_with(l.as_str())
                && bytes.get(pos + l.len()).is_none_or(|b| !is_word(*b))
        });
        match hit {
            Some((idx, l)) => {
                found.push(*idx);
                pos += l.len();
            }
            None => pos += 1,
        }
    }
    let first = *found.first().ok_or(ParseError::UnparseableRating)?;
    let ambiguous = found.iter().any(|&i| i != first);
    Ok(ParsedRating {
        label: LikelihoodLabel(first as u8),
        ambiguous,
    })
}

/// Label → rating table. Values must be strictly increasing and in `[0.5, 5.0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    values: [f64; 6],
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            values: [1.0, 1.8, 2.6, 3.4, 4.2, 5.0],
        }
    }
}

impl LabelMap {
    pub fn new(values: [f64; 6]) -> Result<Self, ParseError> {
        for v in values {
            if !(0.5..=5.0).contains(&v) {
                return Err(ParseError::LabelMap(format!("{v} outside [0.5, 5.0]")));
            }
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ParseError::LabelMap("values must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    pub fn evenly_spaced(lo: f64, hi: f64) -> Self {
        let step = (hi - lo) / 5.0;
        let mut values = [0.0; 6];
        for (i, v) in values.iter_mut().enumerate() {
            *v = lo + step * i as f64;
        }
        values[5] = hi;
        Self { values }
    }

    /// Six points spread over the full half-point range `[0.5, 5.0]`.
    pub fn half_point() -> Self {
        Self {
            values: [0.5, 1.4, 2.3, 3.2, 4.1, 5.0],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "half_point" => Some(Self::half_point()),
            _ => None,
        }
    }

    pub fn values(&self) -> &[f64; 6] {
        &self.values
    }

    pub fn rating(&self, label: LikelihoodLabel) -> f64 {
        self.values[label.index()]
    }

    /// Label whose value is closest to `r`; the lower label wins ties.
    pub fn nearest_label(&self, r: f64) -> LikelihoodLabel {
        let mut best = 0;
        for i in 1..6 {
            if (self.values[i] - r).abs() < (self.values[best] - r).abs() {
                best = i;
            }
        }
        LikelihoodLabel(best as u8)
    }
}

pub fn label_to_rating(label: LikelihoodLabel, map: &LabelMap) -> f64 {
    map.rating(label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchTier {
    Exact,
    Normalized,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostic {
    pub emitted: String,
    pub candidate: Option<usize>,
    pub tier: Option<MatchTier>,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRanking {
    /// Candidate indices, best first. Always a permutation of `0..n`.
    pub permutation: Vec<usize>,
    pub dropped_hallucinations: usize,
    pub appended_missing: usize,
    pub matches: Vec<MatchDiagnostic>,
}

impl ParsedRanking {
    pub fn matched(&self) -> usize {
        self.permutation.len() - self.appended_missing
    }
}

fn is_quote(c: char) -> bool {
    matches!(c, '\'' | '"' | '`' | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}')
}

/// Index just past an optional run of whitespace and closing quotes, if the
/// text there ends an item (end of input, `,` or `]`).
fn item_boundary(s: &str, at: usize) -> bool {
    let tail = s[at..].trim_start_matches(|c: char| c.is_whitespace() || is_quote(c));
    tail.is_empty() || tail.starts_with(',') || tail.starts_with(']') || tail.starts_with('\n')
}

/// Split the body of a list into emitted items. Candidate titles are tried
/// first (longest first) so commas inside titles survive; otherwise a quoted
/// segment or the text up to the next comma is taken.
fn split_items(body: &str, by_len: &[&str]) -> Vec<String> {
    let mut items = Vec::new();
    let mut pos = 0;
    while pos < body.len() {
        let rest = &body[pos..];
        let skip = rest.len()
            - rest
                .trim_start_matches(|c: char| c.is_whitespace() || c == ',')
                .len();
        pos += skip;
        if pos >= body.len() {
            break;
        }
        let rest = &body[pos..];
        let quote = rest.chars().next().filter(|c| is_quote(*c));
        let inner_start = pos + quote.map_or(0, char::len_utf8);
        let inner = &body[inner_start..];

        let inner_lower = inner.to_lowercase();
        let title_hit = if inner_lower.len() == inner.len() {
            by_len.iter().find(|t| {
                let tl = t.to_lowercase();
                tl.len() == t.len()
                    && inner.is_char_boundary(t.len())
                    && inner_lower.starts_with(&tl)
                    && item_boundary(inner, t.len())
            })
        } else {
            None
        };
        if let Some(t) = title_hit {
            items.push(inner[..t.len()].to_string());
            pos = inner_start + t.len();
            if let Some(c) = body[pos..].chars().next().filter(|c| is_quote(*c)) {
                pos += c.len_utf8();
            }
            continue;
        }

        if quote.is_some() {
            // closing quote followed by a separator or the end
            let close = inner
                .char_indices()
                .find(|&(i, c)| is_quote(c) && {
                    let after = inner[i + c.len_utf8()..].trim_start();
                    after.is_empty() || after.starts_with(',') || after.starts_with(']')
                });
            if let Some((i, c)) = close {
                items.push(inner[..i].to_string());
                pos = inner_start + i + c.len_utf8();
                continue;
            }
        }
        let end = inner.find(',').unwrap_or(inner.len());
        let item = inner[..end].trim().trim_matches(is_quote).trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
        pos = inner_start + end;
    }
    items
}

fn strip_list_marker(line: &str) -> &str {
    let l = line.trim();
    let l = l.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = l.len() - l.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let after = &l[digits..];
        if let Some(r) = after.strip_prefix('.').or_else(|| after.strip_prefix(')')) {
            return r.trim();
        }
    }
    l
}

fn emitted_items(raw: &str, by_len: &[&str]) -> Vec<String> {
    if let (Some(open), Some(close)) = (raw.find('['), raw.rfind(']')) {
        if open < close {
            return split_items(&raw[open + 1..close], by_len);
        }
    }
    raw.lines()
        .map(strip_list_marker)
        .map(|l| l.trim_end_matches(',').trim().trim_matches(is_quote).trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn match_item(item: &str, candidates: &[String], normalized: &[String], threshold: f64) -> Option<(usize, MatchTier)> {
    if let Some(i) = candidates.iter().position(|c| c == item) {
        return Some((i, MatchTier::Exact));
    }
    let n = text::normalize(item);
    if let Some(i) = normalized.iter().position(|c| *c == n) {
        return Some((i, MatchTier::Normalized));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = text::token_set_similarity(item, c);
        if s >= threshold && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| (i, MatchTier::Fuzzy))
}

/// Recover a full candidate ranking from free text. Unmatched items are
/// dropped, repeats keep their first position and unmentioned candidates are
/// appended in candidate order.
pub fn parse_ranking(raw: &str, candidates: &[String], threshold: f64) -> Result<ParsedRanking, ParseError> {
    let unique: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    if candidates.len() < 2 || unique.len() != candidates.len() {
        return Err(ParseError::BadCandidates);
    }
    let normalized: Vec<String> = candidates.iter().map(|c| text::normalize(c)).collect();
    let mut by_len: Vec<&str> = candidates.iter().map(String::as_str).collect();
    by_len.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));

    let mut taken = vec![false; candidates.len()];
    let mut permutation = Vec::with_capacity(candidates.len());
    let mut matches = Vec::new();
    let mut dropped = 0;
    for item in emitted_items(raw, &by_len) {
        let hit = match_item(&item, candidates, &normalized, threshold);
        let duplicate = hit.is_some_and(|(i, _)| taken[i]);
        match hit {
            Some((i, _)) if !taken[i] => {
                taken[i] = true;
                permutation.push(i);
            }
            Some(_) => {}
            None => dropped += 1,
        }
        matches.push(MatchDiagnostic {
            emitted: item,
            candidate: hit.map(|h| h.0),
            tier: hit.map(|h| h.1),
            duplicate,
        });
    }
    if permutation.is_empty() {
        return Err(ParseError::UnparseableRanking);
    }
    let before = permutation.len();
    permutation.extend((0..candidates.len()).filter(|&i| !taken[i]));
    Ok(ParsedRanking {
        appended_missing: permutation.len() - before,
        permutation,
        dropped_hallucinations: dropped,
        matches,
    })
}

/// 1-based position of `positive_index` in the parsed ranking.
pub fn rank_of_positive(parsed: &ParsedRanking, positive_index: usize) -> usize {
    parsed
        .permutation
        .iter()
        .position(|&i| i == positive_index)
        .map(|p| p + 1)
        .expect("permutation covers every candidate")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fig2_candidates() -> Vec<String> {
        [
            "Macross Plus, Vol. 2",
            "Barney Miller: Complete Third Season",
            "The Omen Collection",
            "Coen Brothers Collection (Blood Simple/Fargo/Miller's Crossing/Raising Arizona)",
            "Gilbert; Sullivan: Broadway Theatre Archive",
            "Thriller - The Complete Season One",
            "Impostor",
            "Silver Linings Playbook",
            "Project X",
            "Let's Rock Again",
            "Perry Mason: Season 1, Vol. 2",
            "Letters from Iwo Jima",
            "Sesame Street - Learning About Numbers VHS",
            "Of Human Bondage VHS",
            "California Split",
            "Blue Seed: Nightfall",
            "The Lone Ranger",
            "The Cowboys VHS",
            "Harry Potter and the Order of the Phoenix",
            "Gunman's Walk VHS",
            "Sherlock: Season 1",
        ]
        .map(String::from)
        .to_vec()
    }

    #[test]
    fn rating_labels() {
        assert_eq!(parse_rating("Highly Likely").unwrap().label.index(), 5);
        let p = parse_rating("I think the answer is: somewhat unlikely.").unwrap();
        assert_eq!(p.label.name(), "Somewhat Unlikely");
        assert!(!p.ambiguous);
        assert_eq!(parse_rating("VERY UNLIKELY").unwrap().label.index(), 0);
        assert_eq!(parse_rating("Unlikely").unwrap().label.index(), 1);
        assert_eq!(parse_rating("Banana"), Err(ParseError::UnparseableRating));
    }

    #[test]
    fn rating_ambiguity_keeps_first() {
        let p = parse_rating("Likely, or maybe Neutral").unwrap();
        assert_eq!(p.label.name(), "Likely");
        assert!(p.ambiguous);
        // "Likely" inside "Unlikely" is not a separate occurrence
        assert!(!parse_rating("Unlikely").unwrap().ambiguous);
    }

    #[test]
    fn label_map_defaults() {
        let m = LabelMap::default();
        assert_eq!(m.values(), &[1.0, 1.8, 2.6, 3.4, 4.2, 5.0]);
        let hp = LabelMap::half_point();
        assert_eq!(hp.values(), &[0.5, 1.4, 2.3, 3.2, 4.1, 5.0]);
        assert!(LabelMap::new([1.0, 1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(LabelMap::new([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert_eq!(m.nearest_label(5.0).name(), "Highly Likely");
        assert_eq!(m.nearest_label(1.4).name(), "Very Unlikely");
        assert_eq!(m.nearest_label(3.0).name(), "Somewhat Unlikely");
    }

    #[test]
    fn echoed_fig2_list_parses_fully() {
        let c = fig2_candidates();
        let mut order: Vec<usize> = (0..21).rev().collect();
        order.swap(3, 10);
        let body: Vec<&str> = order.iter().map(|&i| c[i].as_str()).collect();
        let raw = format!("[{}]", body.join(", "));
        let p = parse_ranking(&raw, &c, DEFAULT_SIMILARITY_THRESHOLD).unwrap();
        assert_eq!(p.permutation, order);
        assert_eq!((p.dropped_hallucinations, p.appended_missing), (0, 0));
        assert!(p.matches.iter().all(|m| m.tier == Some(MatchTier::Exact)));

        let quoted: Vec<String> = order.iter().map(|&i| format!("'{}'", c[i])).collect();
        let p = parse_ranking(&format!("[{}]", quoted.join(", ")), &c, 0.85).unwrap();
        assert_eq!(p.permutation, order);
    }

    #[test]
    fn hallucinations_and_omissions() {
        let c = fig2_candidates();
        let mut emitted: Vec<&str> = c[..19].iter().map(String::as_str).collect();
        emitted.insert(5, "The Godfather Part IV");
        let raw = format!("[{}]", emitted.join(", "));
        let p = parse_ranking(&raw, &c, 0.85).unwrap();
        assert_eq!(p.dropped_hallucinations, 1);
        assert_eq!(p.appended_missing, 2);
        assert_eq!(&p.permutation[19..], &[19, 20]);
    }

    #[test]
    fn normalized_tier() {
        let c = vec!["Sherlock: Season 1".to_string(), "The Lone Ranger".to_string(), "Impostor".to_string()];
        let p = parse_ranking("[Sherlock: season 1, THE LONE RANGER]", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![0, 1, 2]);
        assert!(p.matches.iter().all(|m| m.tier == Some(MatchTier::Normalized)));
    }

    #[test]
    fn fuzzy_tier_and_lines() {
        let c = vec![
            "Harry Potter and the Order of the Phoenix".to_string(),
            "Project X".to_string(),
        ];
        let p = parse_ranking("1. Project X\n2. Harry Potter and Order of the Phoenix\n", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![1, 0]);
        assert_eq!(p.matches[1].tier, Some(MatchTier::Fuzzy));
    }

    #[test]
    fn duplicates_keep_first() {
        let c = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let p = parse_ranking("[B, A, B]", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![1, 0, 2]);
        assert!(p.matches[2].duplicate);
        assert_eq!(p.dropped_hallucinations, 0);
    }

    #[test]
    fn nothing_matched_is_error() {
        let c = vec!["A".to_string(), "B".to_string()];
        assert_eq!(parse_ranking("I cannot rank these.", &c, 0.85), Err(ParseError::UnparseableRanking));
        assert_eq!(parse_ranking("[A]", &c[..1], 0.85), Err(ParseError::BadCandidates));
    }

    #[test]
    fn prefix_titles_resolve_longest_first() {
        let c = vec!["Impostor".to_string(), "Impostor, The".to_string(), "Lone".to_string()];
        let p = parse_ranking("[Impostor, The, Impostor, Lone]", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![1, 0, 2]);
        let p = parse_ranking("[Impostor, Lone, Impostor, The]", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![0, 2, 1]);
    }

    #[test]
    fn rank_of_positive_tail_rule() {
        let c: Vec<String> = (0..6).map(|i| format!("T{i}")).collect();
        // positive 2 unmentioned, 3 other candidates also unmentioned
        let p = parse_ranking("[T5, T1]", &c, 0.85).unwrap();
        assert_eq!(p.permutation, vec![5, 1, 0, 2, 3, 4]);
        assert_eq!(rank_of_positive(&p, 5), 1);
        assert_eq!(rank_of_positive(&p, 0), p.matched() + 1);
        assert_eq!(rank_of_positive(&p, 2), p.matched() + 2);
    }
}
