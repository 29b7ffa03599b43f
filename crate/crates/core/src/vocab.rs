//! Closed word-level vocabulary shared by the policy model, the prompt
//! builder, and the output renderer.
//!
//! Tokens are whole words plus a small set of special and JSON-structural
//! tokens. Rendering a token sequence to text and tokenizing text back are
//! exact inverses for well-formed sequences; the renderer knows enough JSON
//! spacing to emit parseable objects (`{"expansion": ["a b", "c"]}`).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Fixed-order tokens present in every vocabulary, before catalog words.
pub const STRUCTURAL: &[&str] = &[
    EOS,
    PAD,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    "{",
    "}",
    "[",
    "]",
    "\"",
    ":",
    ",",
    "expansion",
    "task",
    "expand",
    "query",
    "items",
    "|",
    "=",
];

const JSON_PUNCT: &[char] = &['{', '}', '[', ']', '"', ':', ','];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    /// Builds the vocabulary: structural tokens in fixed order, then the
    /// given words in sorted order (duplicates of structural tokens skipped).
    pub fn build<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut tokens: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
        let mut sorted: Vec<String> = words.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        for w in sorted {
            if !STRUCTURAL.contains(&w.as_str()) {
                tokens.push(w);
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    /// Rebuilds the id map after deserialization.
    pub fn rehydrate(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn eos(&self) -> u32 {
        self.id(EOS).expect("eos always present")
    }

    pub fn pad(&self) -> u32 {
        self.id(PAD).expect("pad always present")
    }

    /// Maps whole words to ids; unknown words are an input error.
    pub fn encode(&self, words: &[String]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("token not in vocabulary: {w:?}")))
            })
            .collect()
    }

    /// Splits text into vocabulary-shaped words: JSON punctuation becomes
    /// single-character tokens, everything else splits on whitespace.
    pub fn split_text(text: &str) -> Vec<String> {
        let mut spaced = String::with_capacity(text.len() + 16);
        for c in text.chars() {
            if JSON_PUNCT.contains(&c) {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        spaced.split_whitespace().map(|s| s.to_string()).collect()
    }

    /// Inverse of [`Vocab::render`] for well-formed sequences.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words = Self::split_text(text);
        self.encode(&words)
    }

    /// Renders token ids to text. Words join with single spaces; JSON
    /// punctuation attaches so that well-formed answer blocks are valid
    /// JSON. An `<eos>` token ends rendering and is not emitted.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut in_string = false;
        let mut prev: Option<&str> = None;
        for &id in ids {
            let tok = match self.token(id) {
                Some(t) => t,
                None => continue,
            };
            if tok == EOS {
                break;
            }
            let sep = match prev {
                None => "",
                Some(p) => {
                    if tok == "\"" {
                        if in_string {
                            "" // closing quote attaches to string content
                        } else if p == "{" || p == "[" {
                            ""
                        } else {
                            " "
                        }
                    } else if in_string {
                        if p == "\"" {
                            "" // first word after opening quote
                        } else {
                            " "
                        }
                    } else if matches!(tok, "}" | "]" | ":" | ",") {
                        ""
                    } else if p == "{" || p == "[" {
                        ""
                    } else {
                        " "
                    }
                }
            };
            out.push_str(sep);
            out.push_str(tok);
            if tok == "\"" {
                in_string = !in_string;
            }
            prev = Some(tok);
        }
        out
    }
}
