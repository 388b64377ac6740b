//! Character-level matching helpers shared by the tokenizer, the extractor
//! and the corpus statistics.
//!
//! Case folding is done one `char` at a time so that offsets in the folded
//! text are the same as offsets in the original text. Characters whose
//! lowercase form expands to several chars keep only the first one.

pub fn fold_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

pub fn fold(s: &str) -> Vec<char> {
    s.chars().map(fold_char).collect()
}

pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// True when `pattern` occurs in `haystack` starting at char index `at`.
pub fn matches_at(haystack: &[char], at: usize, pattern: &[char]) -> bool {
    !pattern.is_empty()
        && at + pattern.len() <= haystack.len()
        && haystack[at..at + pattern.len()] == *pattern
}

/// Word boundary on both sides of `[start, end)`.
pub fn bounded(haystack: &[char], start: usize, end: usize) -> bool {
    let before = start == 0 || !is_word_char(haystack[start - 1]);
    let after = end == haystack.len() || !is_word_char(haystack[end]);
    before && after
}

/// Counts non-overlapping, word-bounded occurrences of `pattern`.
pub fn count_bounded(haystack: &[char], pattern: &[char]) -> usize {
    let mut count = 0;
    let mut i = 0;
    while i + pattern.len() <= haystack.len() {
        if matches_at(haystack, i, pattern) && bounded(haystack, i, i + pattern.len()) {
            count += 1;
            i += pattern.len();
        } else {
            i += 1;
        }
    }
    count
}
