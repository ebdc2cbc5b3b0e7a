// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fuzzy alignment of annotated span text back to character offsets.

/// Default tolerance: edit distance over needle length.
pub const MAX_EDIT_RATIO: f64 = 0.3;
/// Candidate window lengths, relative to the needle.
pub const WINDOW_MIN: f64 = 0.7;
pub const WINDOW_MAX: f64 = 1.3;

/// Levenshtein distance over chars.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance from `needle` to every prefix of `text`: entry `k` is the
/// distance to `text[..k]`.
fn prefix_distances(needle: &[char], text: &[char]) -> Vec<usize> {
    // column-wise DP: rows index the text prefix, the needle is the inner axis
    let mut col: Vec<usize> = (0..=needle.len()).collect();
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(needle.len());
    for (k, &c) in text.iter().enumerate() {
        let mut diag = col[0];
        col[0] = k + 1;
        for i in 0..needle.len() {
            let up = col[i + 1];
            col[i + 1] = (diag + usize::from(needle[i] != c)).min(up + 1).min(col[i] + 1);
            diag = up;
        }
        out.push(col[needle.len()]);
    }
    out
}

/// Character range `[start, end)` of `needle` in `haystack`.
///
/// An exact occurrence wins (the leftmost one). Otherwise every window whose
/// length lies within `[0.7, 1.3]` of the needle length is scored by edit
/// distance; the best window is the one with the lowest distance, then the
/// leftmost start, then the length closest to the needle. It is accepted
/// when distance / needle length is at most `max_edit_ratio`.
pub fn align_span(needle: &str, haystack: &str, max_edit_ratio: f64) -> Option<(usize, usize)> {
    let needle: Vec<char> = needle.chars().collect();
    let hay: Vec<char> = haystack.chars().collect();
    let n = needle.len();
    if n == 0 {
        return None;
    }
    if let Some(start) = hay.windows(n).position(|w| w == needle.as_slice()) {
        return Some((start, start + n));
    }
    let min_len = ((WINDOW_MIN * n as f64).ceil() as usize).max(1);
    let max_len = (WINDOW_MAX * n as f64).floor() as usize;
    // (distance, start, |len - n|, len)
    let mut best: Option<(usize, usize, usize, usize)> = None;
    for start in 0..hay.len() {
        if hay.len() - start < min_len {
            break;
        }
        let end = (start + max_len).min(hay.len());
        let dists = prefix_distances(&needle, &hay[start..end]);
        for (len, &d) in dists.iter().enumerate().skip(min_len) {
            let key = (d, start, len.abs_diff(n), len);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let (d, start, _, len) = best?;
    (d as f64 / n as f64 <= max_edit_ratio).then_some((start, start + len))
}
