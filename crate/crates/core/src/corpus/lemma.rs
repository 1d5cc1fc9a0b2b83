//! Rule-based verb lemmatization.
//!
//! Rather than committing to a single lemma, [`lemma_candidates`] proposes an
//! ordered list of plausible base forms (surface form, irregular table entry,
//! then suffix-stripping variants) and the verb-class index picks the first
//! one it knows.

use std::collections::HashMap;
use std::sync::OnceLock;

static IRREGULAR_TSV: &str = include_str!("../../data/irregular_verbs.tsv");

fn irregular_table() -> &'static HashMap<&'static str, &'static str> {
    static TABLE: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        IRREGULAR_TSV
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let mut cols = l.split('\t');
                Some((cols.next()?.trim(), cols.next()?.trim()))
            })
            .collect()
    })
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// `runn` -> `run`, `stopp` -> `stop`; `None` unless the stem ends in a
/// doubled consonant.
fn undouble(stem: &str) -> Option<&str> {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 3 && b[n - 1] == b[n - 2] && !is_vowel(b[n - 1]) && b[n - 1].is_ascii_alphabetic() {
        Some(&stem[..n - 1])
    } else {
        None
    }
}

/// Ordered, de-duplicated base-form candidates for a (lowercased) word.
pub fn lemma_candidates(word: &str) -> Vec<String> {
    let w = word.to_lowercase();
    let mut out: Vec<String> = Vec::with_capacity(6);
    let mut push = |s: &str| {
        if !s.is_empty() && !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    };
    push(&w);
    if let Some(lemma) = irregular_table().get(w.as_str()) {
        push(lemma);
    }
    if !w.is_ascii() || w.len() < 3 {
        return out;
    }
    if let Some(stem) = w.strip_suffix("ies").filter(|s| s.len() >= 2) {
        push(&format!("{stem}y"));
    }
    if let Some(stem) = w.strip_suffix("ied").filter(|s| s.len() >= 2) {
        push(&format!("{stem}y"));
    }
    if let Some(stem) = w.strip_suffix("ing").filter(|s| s.len() >= 2) {
        if let Some(u) = undouble(stem) {
            push(u);
        }
        push(stem);
        push(&format!("{stem}e"));
    }
    if let Some(stem) = w.strip_suffix("ed").filter(|s| s.len() >= 2) {
        if let Some(u) = undouble(stem) {
            push(u);
        }
        push(stem);
        push(&format!("{stem}e"));
    }
    if let Some(stem) = w.strip_suffix("es").filter(|s| s.len() >= 2) {
        push(stem);
    }
    if w.ends_with('s') && !w.ends_with("ss") {
        push(&w[..w.len() - 1]);
    }
    out
}
