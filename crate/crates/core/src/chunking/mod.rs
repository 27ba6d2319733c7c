//! Token counting, fixed-size segmentation and middle truncation.

mod tokenizer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tokenizer::{
    count_tokens, tokenizer, RuleTokenizer, Tokenizer, TokenizerId, TokenizerRegistry,
    WhitespaceTokenizer,
};

/// How far (in tokens) a chunk boundary may move back to land on whitespace.
pub const BOUNDARY_SLACK: usize = 64;

/// Inserted between the kept head and tail by [`truncate_middle`].
pub const TRUNCATION_MARKER: &str = "\n…\n";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChunkingError {
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
    #[error("{what} must be greater than zero")]
    ZeroSize { what: &'static str },
}

/// A contiguous, token-counted span of a source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub text: String,
    pub tokens: usize,
}

/// Splits `text` greedily into chunks of at most `chunk_size` tokens.
///
/// Each cut is moved back to the nearest whitespace gap within
/// [`BOUNDARY_SLACK`] tokens; if there is none the cut falls exactly after
/// `chunk_size` tokens. Whitespace at a cut stays with the earlier chunk, so the
/// chunks concatenate back to `text` byte for byte.
pub fn segment(
    text: &str,
    chunk_size: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, ChunkingError> {
    if chunk_size == 0 {
        return Err(ChunkingError::ZeroSize { what: "chunk size" });
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let spans = tokenizer.token_spans(text);
    let n = spans.len();
    let mut chunks = Vec::new();
    let mut push = |piece: &str| {
        chunks.push(Chunk {
            index: chunks.len(),
            text: piece.to_string(),
            tokens: tokenizer.count(piece),
        });
    };

    let mut first_token = 0;
    let mut start_byte = 0;
    while n - first_token > chunk_size {
        let hard = first_token + chunk_size;
        let floor = hard.saturating_sub(BOUNDARY_SLACK).max(first_token + 1);
        let cut = (floor..=hard)
            .rev()
            .find(|&k| spans[k - 1].end < spans[k].start)
            .unwrap_or(hard);
        let cut_byte = spans[cut].start;
        push(&text[start_byte..cut_byte]);
        start_byte = cut_byte;
        first_token = cut;
    }
    push(&text[start_byte..]);
    Ok(chunks)
}

/// Removes sentences from the middle of `text` so it fits in `limit` tokens.
///
/// The budget left after the marker is split `ceil/floor` between head and
/// tail; each cut then retreats outward to a sentence boundary (falling back to
/// a whitespace gap, then to a bare token boundary). Text already within the
/// limit is returned unchanged, which makes the operation idempotent.
pub fn truncate_middle(
    text: &str,
    limit: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<String, ChunkingError> {
    if limit == 0 {
        return Err(ChunkingError::ZeroSize { what: "truncation limit" });
    }
    let spans = tokenizer.token_spans(text);
    let n = spans.len();
    if n <= limit {
        return Ok(text.to_string());
    }
    let marker_tokens = tokenizer.count(TRUNCATION_MARKER);
    if marker_tokens > limit {
        return Ok(String::new());
    }
    let budget = limit - marker_tokens;
    let head = budget.div_ceil(2);
    let tail = budget / 2;

    let ends_sentence = |k: usize| is_sentence_end(text, &spans, k);
    let has_gap = |k: usize| spans[k - 1].end < spans[k].start;

    // Number of head tokens kept: a cut "after token k-1".
    let head_keep = if head == 0 {
        0
    } else {
        (1..=head)
            .rev()
            .find(|&k| ends_sentence(k - 1))
            .or_else(|| (1..=head).rev().find(|&k| has_gap(k)))
            .unwrap_or(head)
    };
    // First tail token kept.
    let tail_start = if tail == 0 {
        n
    } else {
        let lo = n - tail;
        (lo..n)
            .find(|&s| s == 0 || ends_sentence(s - 1))
            .or_else(|| (lo..n).find(|&s| s == 0 || has_gap(s)))
            .unwrap_or(lo)
    };

    let head_end = if head_keep == 0 { 0 } else { spans[head_keep - 1].end };
    let tail_begin = if tail_start == n { text.len() } else { spans[tail_start].start };

    let mut out = String::with_capacity(head_end + TRUNCATION_MARKER.len() + text.len() - tail_begin);
    out.push_str(&text[..head_end]);
    out.push_str(TRUNCATION_MARKER);
    out.push_str(&text[tail_begin..]);
    Ok(out)
}

/// Keeps only the first `limit` tokens. Returns the text and whether anything was cut.
pub fn truncate_head(text: &str, limit: usize, tokenizer: &dyn Tokenizer) -> (String, bool) {
    let spans = tokenizer.token_spans(text);
    if spans.len() <= limit {
        return (text.to_string(), false);
    }
    let end = if limit == 0 { 0 } else { spans[limit - 1].end };
    (text[..end].to_string(), true)
}

const TERMINALS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 6] = ['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

fn is_sentence_end(text: &str, spans: &[std::ops::Range<usize>], k: usize) -> bool {
    let tok = &text[spans[k].clone()];
    let terminal = tok.ends_with(TERMINALS) || {
        // closing quote or bracket glued to a terminal: `end."`
        let closer = tok.chars().all(|c| CLOSERS.contains(&c));
        closer
            && k > 0
            && spans[k - 1].end == spans[k].start
            && text[spans[k - 1].clone()].ends_with(TERMINALS)
    };
    if !terminal {
        return false;
    }
    match spans.get(k + 1) {
        None => true,
        Some(next) => next.start > spans[k].end,
    }
}
