//! Answer scoring: ROUGE-L and ROUGE-1 F1 over normalized tokens, and exact
//! match with multiple-choice option resolution.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const FILLER: [&str; 8] = ["or", "and", "either", "option", "answer", "is", "the", "choice"];

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and collapses whitespace.
fn casefold_strip(text: &str) -> String {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Tokens compared by the ROUGE scorers. Articles are kept.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    casefold_strip(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Normal form for exact match: casefold, strip punctuation, collapse
/// whitespace, then drop leading articles.
pub fn normalize_answer(text: &str) -> String {
    let folded = casefold_strip(text);
    let words: Vec<&str> = folded.split(' ').filter(|t| !t.is_empty()).collect();
    let mut start = 0;
    while start + 1 < words.len() && ARTICLES.contains(&words[start]) {
        start += 1;
    }
    words[start..].join(" ")
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn f1_from_overlap(overlap: usize, m: usize, n: usize) -> f64 {
    if overlap == 0 {
        0.0
    } else {
        // harmonic mean of overlap/m and overlap/n
        2.0 * overlap as f64 / (m + n) as f64
    }
}

fn best_over<F: Fn(&[String], &[String]) -> f64>(candidate: &str, references: &[String], f: F) -> f64 {
    let c = rouge_tokens(candidate);
    if c.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| f(&c, &rouge_tokens(r)))
        .fold(0.0, f64::max)
}

/// ROUGE-L F1, maximized over `references`. 0 for an empty candidate.
pub fn rouge_l_f1(candidate: &str, references: &[String]) -> f64 {
    best_over(candidate, references, |c, r| {
        if r.is_empty() {
            return 0.0;
        }
        f1_from_overlap(lcs_len(c, r), c.len(), r.len())
    })
}

/// ROUGE-1 F1 (clipped unigram overlap), maximized over `references`.
pub fn rouge_1_f1(candidate: &str, references: &[String]) -> f64 {
    best_over(candidate, references, |c, r| {
        if r.is_empty() {
            return 0.0;
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in r {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0;
        for t in c {
            if let Some(n) = counts.get_mut(t.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    overlap += 1;
                }
            }
        }
        f1_from_overlap(overlap, c.len(), r.len())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmOutcome {
    pub score: u8,
    /// The candidate named two or more options.
    pub ambiguous: bool,
    /// Index of the option the candidate resolved to.
    pub resolved: Option<usize>,
}

/// Letter label of option `i` (`A`, `B`, ...).
pub fn option_label(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

fn label_index(c: char, n: usize) -> Option<usize> {
    let c = c.to_ascii_uppercase();
    if !c.is_ascii_uppercase() {
        return None;
    }
    let i = (c as u8 - b'A') as usize;
    (i < n).then_some(i)
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?:^|[\s(\[])\(?([A-Z])(?:\)|\]|\.|:)(?:\s|$)|(?i:\boption\s+\(?([a-z])\b|\banswer\s*(?:is|:)\s*\(?([a-z])\b)",
        )
        .unwrap()
    })
}

fn contains_words(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    format!(" {hay} ").contains(&format!(" {needle} "))
}

/// Option indices named by `candidate`.
///
/// Explicit markers (`B)`, `(B)`, `B.`, `option B`, `answer is B`) win. Failing
/// those, a reply made only of option letters and filler words (`A or B`) names
/// those letters. Failing that, every option whose text appears in the reply
/// counts, except options whose text is part of another matched option's text.
pub fn resolve_options(candidate: &str, options: &[String]) -> Vec<usize> {
    let n = options.len();
    let mut found: Vec<usize> = Vec::new();
    for caps in marker_re().captures_iter(candidate) {
        let c = (1..=3).find_map(|g| caps.get(g)).unwrap().as_str();
        if let Some(i) = c.chars().next().and_then(|c| label_index(c, n)) {
            found.push(i);
        }
    }
    if found.is_empty() {
        let words: Vec<&str> = candidate
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let single = words.len() == 1;
        let mut letters = Vec::new();
        let all_letters_or_filler = !words.is_empty()
            && words.iter().all(|w| {
                let mut cs = w.chars();
                let (first, more) = (cs.next().unwrap(), cs.next().is_some());
                let upper_label = !more && first.is_ascii_uppercase() && label_index(first, n).is_some();
                let lone_label = single && !more && label_index(first, n).is_some();
                if upper_label || lone_label {
                    letters.push(label_index(first, n).unwrap());
                    true
                } else {
                    FILLER.contains(&w.to_lowercase().as_str())
                }
            });
        if all_letters_or_filler && !letters.is_empty() {
            found = letters;
        }
    }
    if found.is_empty() {
        let cand = normalize_answer(candidate);
        let texts: Vec<String> = options.iter().map(|o| normalize_answer(o)).collect();
        let hits: Vec<usize> = (0..n).filter(|&i| contains_words(&cand, &texts[i])).collect();
        found = hits
            .iter()
            .copied()
            .filter(|&i| {
                !hits
                    .iter()
                    .any(|&j| j != i && texts[j] != texts[i] && contains_words(&texts[j], &texts[i]))
            })
            .collect();
    }
    found.sort_unstable();
    found.dedup();
    found
}

/// Exact match after [`normalize_answer`]. With `options`, the candidate is
/// first resolved to the single option it names; naming several scores 0 and
/// sets `ambiguous`. A gold answer that is just an option letter stands for
/// that option's text.
pub fn exact_match(candidate: &str, gold: &str, options: Option<&[String]>) -> EmOutcome {
    let mut outcome = EmOutcome {
        score: 0,
        ambiguous: false,
        resolved: None,
    };
    let mut cand = candidate.to_string();
    let mut gold = gold.to_string();
    if let Some(options) = options {
        let g = gold.trim().trim_matches(|c: char| !c.is_alphanumeric());
        if g.len() == 1 {
            if let Some(i) = g.chars().next().and_then(|c| label_index(c, options.len())) {
                gold = options[i].clone();
            }
        }
        match resolve_options(candidate, options)[..] {
            [] => {}
            [i] => {
                outcome.resolved = Some(i);
                cand = options[i].clone();
            }
            _ => {
                outcome.ambiguous = true;
                return outcome;
            }
        }
    }
    outcome.score = u8::from(normalize_answer(&cand) == normalize_answer(&gold));
    outcome
}
