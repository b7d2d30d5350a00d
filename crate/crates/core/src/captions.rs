//! Caption tokenization and the shared caption of a positive/negative pair.
//!
//! The shared caption is the longest common subsequence of the two token
//! sequences. It is carried as a pair of boolean masks rather than as a new
//! token list, so a model can encode it by masking the original caption.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Normalized word tokens with byte spans into the source text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub spans: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }

    /// Tokens whose mask bit is set, in order.
    pub fn select(&self, mask: &[bool]) -> Vec<String> {
        self.tokens
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(t, _)| t.clone())
            .collect()
    }
}

/// Lowercase, split on whitespace, strip leading and trailing punctuation from
/// each word, drop words that end up empty.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                push_word(&mut seq, text, s, i);
                start = None;
            }
            _ => {}
        }
    }
    seq
}

fn push_word(seq: &mut TokenSeq, text: &str, start: usize, end: usize) {
    let word = &text[start..end];
    let trimmed_front = word.trim_start_matches(is_punct);
    let trimmed = trimmed_front.trim_end_matches(is_punct);
    if trimmed.is_empty() {
        return;
    }
    let s = start + (word.len() - trimmed_front.len());
    seq.tokens.push(trimmed.to_lowercase());
    seq.spans.push(s..s + trimmed.len());
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// The shared caption t' of a caption pair, as aligned masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedCaption {
    /// Over the tokens of the positive (real-video) caption.
    pub mask_pos: Vec<bool>,
    /// Over the tokens of the negative (synthetic-video) caption.
    pub mask_neg: Vec<bool>,
    pub text: String,
}

impl SharedCaption {
    pub fn len(&self) -> usize {
        self.mask_pos.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Longest common subsequence of two token sequences.
///
/// Quadratic table, then a backtrack from the end that takes a match when the
/// tokens agree, otherwise skips in `a` when that keeps the optimum, otherwise
/// skips in `b`.
pub fn lcs(a: &TokenSeq, b: &TokenSeq) -> SharedCaption {
    let pairs = lcs_pairs(&a.tokens, &b.tokens);
    let mut mask_pos = vec![false; a.len()];
    let mut mask_neg = vec![false; b.len()];
    let mut words = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        mask_pos[i] = true;
        mask_neg[j] = true;
        words.push(a.tokens[i].as_str());
    }
    SharedCaption {
        mask_pos,
        mask_neg,
        text: words.join(" "),
    }
}

/// Index pairs `(i, j)` of an LCS, increasing in both coordinates.
pub fn lcs_pairs<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * width + j] = if a[i - 1] == b[j - 1] {
                dp[(i - 1) * width + j - 1] + 1
            } else {
                dp[(i - 1) * width + j].max(dp[i * width + j - 1])
            };
        }
    }

    let (mut i, mut j) = (n, m);
    let mut out = Vec::with_capacity(dp[n * width + m]);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[(i - 1) * width + j] >= dp[i * width + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Tokenize both captions and return their shared caption.
pub fn shared_caption(caption_pos: &str, caption_neg: &str) -> SharedCaption {
    lcs(&tokenize(caption_pos), &tokenize(caption_neg))
}

/// Masks rendered as `0`/`1` strings, for debugging output.
pub fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}
