//! Deterministic retrieval backend: inverted index with BM25 ranking,
//! multi-query union retrieval, and a tiered relevance oracle.
//!
//! Scoring accumulates query terms in query order for every document, so the
//! indexed path is float-for-float identical to a brute-force scan (the test
//! oracle). Ties break on ascending item id.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::catalog::{Catalog, Intent, Item};
use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Index {
    /// token -> (item_id, term frequency), ascending by item_id
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_lengths: BTreeMap<u32, u32>,
    avg_doc_length: f64,
    n_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// (item_id, bm25 score), descending score, ascending id on ties
    pub ranked: Vec<(u32, f64)>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ranked.iter().map(|&(id, _)| id)
    }
}

/// Tokens a document contributes to the index: title plus attribute values.
pub fn doc_tokens(item: &Item) -> Vec<&str> {
    item.title
        .iter()
        .map(|s| s.as_str())
        .chain(item.attributes.values().map(|s| s.as_str()))
        .collect()
}

pub fn build_index(catalog: &Catalog) -> Result<Index> {
    if catalog.items.is_empty() {
        return Err(Error::Config("cannot index an empty catalog".into()));
    }
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_lengths = BTreeMap::new();
    let mut total_len = 0u64;
    for item in &catalog.items {
        let toks = doc_tokens(item);
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &toks {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (t, n) in tf {
            postings.entry(t.to_string()).or_default().push((item.id, n));
        }
        doc_lengths.insert(item.id, toks.len() as u32);
        total_len += toks.len() as u64;
    }
    let n_docs = catalog.items.len();
    Ok(Index {
        postings,
        doc_lengths,
        avg_doc_length: total_len as f64 / n_docs as f64,
        n_docs,
    })
}

impl Index {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, id: u32) -> Option<u32> {
        self.doc_lengths.get(&id).copied()
    }

    pub fn postings(&self, token: &str) -> Option<&[(u32, u32)]> {
        self.postings.get(token).map(|v| v.as_slice())
    }

    pub fn doc_frequency(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, |p| p.len())
    }

    /// Lucene-style BM25 idf, strictly positive.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_frequency(token) as f64;
        let n = self.n_docs as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Per-term BM25 contribution for a document with term frequency `tf`.
    pub fn term_score(&self, token: &str, tf: u32, doc_len: u32) -> f64 {
        let tf = tf as f64;
        let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * doc_len as f64 / self.avg_doc_length);
        self.idf(token) * tf * (BM25_K1 + 1.0) / (tf + norm)
    }
}

pub fn search(index: &Index, query: &[String], k: usize) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    if query.is_empty() {
        return Ok(SearchResult { ranked: vec![] });
    }
    // Term contributions accumulate in query order per document, matching the
    // brute-force oracle's summation order exactly.
    let mut acc: HashMap<u32, f64> = HashMap::new();
    for token in query {
        if let Some(plist) = index.postings(token) {
            for &(id, tf) in plist {
                let dl = index.doc_lengths[&id];
                *acc.entry(id).or_insert(0.0) += index.term_score(token, tf, dl);
            }
        }
    }
    let mut ranked: Vec<(u32, f64)> = acc.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("bm25 scores are finite")
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    Ok(SearchResult { ranked })
}

/// Union retrieval over an expansion set: each query's top-k, deduplicated.
pub fn union_retrieve(
    index: &Index,
    queries: &[Vec<String>],
    k_per_query: usize,
) -> Result<(BTreeSet<u32>, Vec<SearchResult>)> {
    if queries.is_empty() {
        return Err(Error::Input("union_retrieve needs at least one query".into()));
    }
    let mut union = BTreeSet::new();
    let mut results = Vec::with_capacity(queries.len());
    for q in queries {
        let r = search(index, q, k_per_query)?;
        union.extend(r.ids());
        results.push(r);
    }
    Ok((union, results))
}

/// Deterministic graded relevance in [0, 4]: category match is worth 2,
/// the satisfied fraction of intent attributes is worth the other 2.
pub fn relevance(intent: &Intent, item: &Item) -> f64 {
    let mut score = if item.category == intent.category {
        2.0
    } else {
        0.0
    };
    let n = intent.attrs.len();
    if n > 0 {
        let per = 2.0 / n as f64;
        for (name, value) in &intent.attrs {
            if item.attributes.get(name) == Some(value) {
                score += per;
            }
        }
    }
    score.clamp(0.0, 4.0)
}

/// Mean relevance over the deduplicated union of each query's top-k items;
/// 0 when the union is empty.
pub fn avg_relevance(
    index: &Index,
    catalog: &Catalog,
    intent: &Intent,
    queries: &[Vec<String>],
    k: usize,
) -> Result<f64> {
    let (union, _) = union_retrieve(index, queries, k)?;
    if union.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for id in &union {
        let item = catalog
            .item(*id)
            .ok_or_else(|| Error::Input(format!("unknown item id {id}")))?;
        sum += relevance(intent, item);
    }
    Ok(sum / union.len() as f64)
}
