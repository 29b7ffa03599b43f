//! Prompt serialization and structured-output validation.
//!
//! The output contract is `<think>` free text `</think>` followed by
//! `<answer>` holding a JSON object whose single key `"expansion"` maps to an
//! array of strings, with only whitespace allowed around and between blocks.
//! Anything else maps to a [`Violation`]; `parse_output` is total and never
//! fails on malformed input. Downstream, any violation means reward zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::search::SearchResult;
use crate::vocab::{self, Vocab};

/// Context items shown in a prompt, per the instruction budget.
pub const MAX_CONTEXT_ITEMS: usize = 10;
/// Title tokens kept per context item line.
const TITLE_TOKENS_PER_ITEM: usize = 6;
/// Attribute pairs kept per context item line.
const ATTRS_PER_ITEM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NoThinkBlock,
    NoAnswerBlock,
    MalformedJson,
    MissingExpansionField,
    UnsupportedAttribute,
    TooManyExpansions,
    ExpansionTooLong,
    EmptyExpansion,
    TrailingGarbage,
}

/// Validation-gate thresholds for generated outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    /// Maximum expansions per answer.
    pub max_expansions: usize,
    /// Maximum tokens per expansion string.
    pub max_expansion_tokens: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            max_expansions: 5,
            max_expansion_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub think_text: String,
    /// Normalized expansions: lowercased, split into tokens, restricted to
    /// the catalog vocabulary.
    pub expansions: Vec<Vec<String>>,
    pub valid: bool,
    pub violation: Option<Violation>,
}

impl ParsedOutput {
    fn invalid(violation: Violation) -> ParsedOutput {
        ParsedOutput {
            think_text: String::new(),
            expansions: vec![],
            valid: false,
            violation: Some(violation),
        }
    }
}

/// Original query plus its expansions; the retrieval set is their union.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSet {
    pub original: Vec<String>,
    pub expansions: Vec<Vec<String>>,
}

impl ExpansionSet {
    pub fn identity(query: &[String]) -> ExpansionSet {
        ExpansionSet {
            original: query.to_vec(),
            expansions: vec![],
        }
    }

    /// All queries in the set, original first.
    pub fn queries(&self) -> Vec<Vec<String>> {
        let mut qs = Vec::with_capacity(1 + self.expansions.len());
        qs.push(self.original.clone());
        qs.extend(self.expansions.iter().cloned());
        qs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub query: Vec<String>,
    pub context_items: Vec<(Vec<String>, Vec<(String, String)>)>,
}

/// Serializes a (query, retrieved context) pair into the canonical prompt
/// token sequence: `task : expand query : <q> items :` then one
/// `| title.. attr = value ..` segment per context item.
pub fn build_prompt(
    query: &[String],
    result: &SearchResult,
    catalog: &Catalog,
    max_len: usize,
) -> Result<(PromptContext, Vec<String>)> {
    let mut context_items = Vec::new();
    for id in result.ids().take(MAX_CONTEXT_ITEMS) {
        let item = catalog
            .item(id)
            .ok_or_else(|| Error::Input(format!("unknown item id {id}")))?;
        let title: Vec<String> = item.title.iter().take(TITLE_TOKENS_PER_ITEM).cloned().collect();
        let attrs: Vec<(String, String)> = item
            .attributes
            .iter()
            .take(ATTRS_PER_ITEM)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        context_items.push((title, attrs));
    }
    let mut tokens: Vec<String> = ["task", ":", "expand", "query", ":"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(query.iter().cloned());
    tokens.push("items".into());
    tokens.push(":".into());
    for (title, attrs) in &context_items {
        tokens.push("|".into());
        tokens.extend(title.iter().cloned());
        for (name, value) in attrs {
            tokens.push(name.clone());
            tokens.push("=".into());
            tokens.push(value.clone());
        }
    }
    if tokens.len() > max_len {
        return Err(Error::Input(format!(
            "prompt length {} exceeds maximum {max_len}",
            tokens.len()
        )));
    }
    Ok((
        PromptContext {
            query: query.to_vec(),
            context_items,
        },
        tokens,
    ))
}

/// Encodes a prompt and right-pads it to a fixed length so generation
/// always starts at the same absolute position.
pub fn encode_prompt_padded(vocab: &Vocab, tokens: &[String], pad_to: usize) -> Result<Vec<u32>> {
    let mut ids = vocab.encode(tokens)?;
    if ids.len() > pad_to {
        return Err(Error::Input(format!(
            "prompt length {} exceeds padded length {pad_to}",
            ids.len()
        )));
    }
    ids.resize(pad_to, vocab.pad());
    Ok(ids)
}

/// Lowercases and splits an expansion string, keeping catalog-vocabulary
/// tokens only.
pub fn normalize_expansion(raw: &str, catalog_vocab: &BTreeSet<String>) -> Vec<String> {
    Vocab::split_text(&raw.to_lowercase())
        .into_iter()
        .filter(|t| catalog_vocab.contains(t))
        .collect()
}

/// Total parse of a raw model output against the output grammar and the
/// validation gate. Never fails; all malformations encode as violations.
pub fn parse_output(raw: &str, gate: &GateConfig, catalog_vocab: &BTreeSet<String>) -> ParsedOutput {
    let s = raw;
    let think_start = match s.find(vocab::THINK_OPEN) {
        Some(i) if s[..i].trim().is_empty() => i + vocab::THINK_OPEN.len(),
        _ => return ParsedOutput::invalid(Violation::NoThinkBlock),
    };
    let think_end_rel = match s[think_start..].find(vocab::THINK_CLOSE) {
        Some(i) => i,
        None => return ParsedOutput::invalid(Violation::NoThinkBlock),
    };
    let think_text = s[think_start..think_start + think_end_rel].trim().to_string();
    let after_think = &s[think_start + think_end_rel + vocab::THINK_CLOSE.len()..];

    let ans_start = match after_think.find(vocab::ANSWER_OPEN) {
        Some(i) if after_think[..i].trim().is_empty() => i + vocab::ANSWER_OPEN.len(),
        _ => return ParsedOutput::invalid(Violation::NoAnswerBlock),
    };
    let ans_end_rel = match after_think[ans_start..].find(vocab::ANSWER_CLOSE) {
        Some(i) => i,
        None => return ParsedOutput::invalid(Violation::NoAnswerBlock),
    };
    let answer_text = after_think[ans_start..ans_start + ans_end_rel].trim();
    let tail = &after_think[ans_start + ans_end_rel + vocab::ANSWER_CLOSE.len()..];
    if !tail.trim().is_empty() {
        return ParsedOutput::invalid(Violation::TrailingGarbage);
    }

    let value: serde_json::Value = match serde_json::from_str(answer_text) {
        Ok(v) => v,
        Err(_) => return ParsedOutput::invalid(Violation::MalformedJson),
    };
    let obj = match value.as_object() {
        Some(o) => o,
        None => return ParsedOutput::invalid(Violation::MalformedJson),
    };
    if obj.keys().any(|k| k != "expansion") {
        return ParsedOutput::invalid(Violation::UnsupportedAttribute);
    }
    let arr = match obj.get("expansion") {
        Some(v) => match v.as_array() {
            Some(a) => a,
            None => return ParsedOutput::invalid(Violation::MalformedJson),
        },
        None => return ParsedOutput::invalid(Violation::MissingExpansionField),
    };
    let mut raw_expansions = Vec::with_capacity(arr.len());
    for v in arr {
        match v.as_str() {
            Some(s) => raw_expansions.push(s),
            None => return ParsedOutput::invalid(Violation::MalformedJson),
        }
    }
    if raw_expansions.len() > gate.max_expansions {
        return ParsedOutput::invalid(Violation::TooManyExpansions);
    }
    let mut expansions = Vec::with_capacity(raw_expansions.len());
    for raw_exp in raw_expansions {
        let words = Vocab::split_text(raw_exp);
        if words.len() > gate.max_expansion_tokens {
            return ParsedOutput::invalid(Violation::ExpansionTooLong);
        }
        let normalized = normalize_expansion(raw_exp, catalog_vocab);
        if normalized.is_empty() {
            // empty string, whitespace, or no catalog-vocabulary token at all
            return ParsedOutput::invalid(Violation::EmptyExpansion);
        }
        expansions.push(normalized);
    }
    ParsedOutput {
        think_text,
        expansions,
        valid: true,
        violation: None,
    }
}

/// Builds the retrieval set from a valid parse: original query first, then
/// expansions with duplicates (and copies of the query) removed.
pub fn to_expansion_set(query: &[String], parsed: &ParsedOutput) -> Result<ExpansionSet> {
    if !parsed.valid {
        return Err(Error::Contract(
            "to_expansion_set called on an invalid parse".into(),
        ));
    }
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    seen.insert(query.to_vec());
    let mut expansions = Vec::new();
    for e in &parsed.expansions {
        if seen.insert(e.clone()) {
            expansions.push(e.clone());
        }
    }
    Ok(ExpansionSet {
        original: query.to_vec(),
        expansions,
    })
}

/// Renders a think/answer trace through the canonical template; inverse of
/// `parse_output` for gate-valid content.
pub fn render_output(think_tokens: &[String], expansions: &[Vec<String>]) -> Vec<String> {
    let mut toks: Vec<String> = vec![vocab::THINK_OPEN.into()];
    toks.extend(think_tokens.iter().cloned());
    toks.push(vocab::THINK_CLOSE.into());
    toks.push(vocab::ANSWER_OPEN.into());
    toks.push("{".into());
    toks.push("\"".into());
    toks.push("expansion".into());
    toks.push("\"".into());
    toks.push(":".into());
    toks.push("[".into());
    for (i, e) in expansions.iter().enumerate() {
        if i > 0 {
            toks.push(",".into());
        }
        toks.push("\"".into());
        toks.extend(e.iter().cloned());
        toks.push("\"".into());
    }
    toks.push("]".into());
    toks.push("}".into());
    toks.push(vocab::ANSWER_CLOSE.into());
    toks
}
