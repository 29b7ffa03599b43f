//! Synthetic product catalog and query workload generation.
//!
//! Everything here is a pure function of seeds and size parameters, so a
//! regenerated catalog serializes to byte-identical files. Queries carry a
//! hidden intent (category plus attribute constraints) consumed only by the
//! relevance oracle and the test suite, never by the policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target vocabulary size; filler tokens pad up to this after categories,
/// attribute names and values are allocated.
pub const DEFAULT_VOCAB_SIZE: usize = 200;
const VALUES_PER_ATTRIBUTE: usize = 4;
const TITLE_MIN: usize = 4;
const TITLE_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: u32,
    pub title: Vec<String>,
    pub attributes: BTreeMap<String, String>,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub items: Vec<Item>,
    pub vocabulary: BTreeSet<String>,
    pub attribute_schema: BTreeMap<String, BTreeSet<String>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub category: String,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkQuery {
    pub tokens: Vec<String>,
    pub intent: Intent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryWorkload {
    pub queries: Vec<WorkQuery>,
    pub seed: u64,
}

impl Catalog {
    pub fn item(&self, id: u32) -> Option<&Item> {
        self.items.get(id as usize).filter(|it| it.id == id)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.id) {
                return Err(Error::Schema(format!("duplicate item id {}", item.id)));
            }
            if item.title.is_empty() {
                return Err(Error::Schema(format!("item {} has empty title", item.id)));
            }
            for (name, value) in &item.attributes {
                match self.attribute_schema.get(name) {
                    None => {
                        return Err(Error::Schema(format!(
                            "item {}: unknown attribute name {name:?}",
                            item.id
                        )))
                    }
                    Some(allowed) if !allowed.contains(value) => {
                        return Err(Error::Schema(format!(
                            "item {}: value {value:?} not allowed for attribute {name:?}",
                            item.id
                        )))
                    }
                    _ => {}
                }
            }
            for tok in item.title.iter().chain(item.attributes.values()) {
                if !self.vocabulary.contains(tok) {
                    return Err(Error::Schema(format!(
                        "item {}: token {tok:?} not in vocabulary",
                        item.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic pronounceable token generator (consonant-vowel syllables).
fn synth_token(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const C: &[u8] = b"bcdfghjklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(C[rng.gen_range(0..C.len())] as char);
        s.push(V[rng.gen_range(0..V.len())] as char);
    }
    s
}

fn fresh_tokens(rng: &mut ChaCha8Rng, n: usize, used: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..4);
        let t = synth_token(rng, syllables);
        if used.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

pub fn generate_catalog(
    seed: u64,
    n_items: usize,
    n_categories: usize,
    attrs_per_category: usize,
) -> Result<Catalog> {
    if n_items == 0 || n_categories == 0 {
        return Err(Error::Config(
            "n_items and n_categories must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();

    let categories = fresh_tokens(&mut rng, n_categories, &mut used);
    // Global attribute-name pool; each category draws a subset.
    let n_attr_names = (attrs_per_category + 2).max(attrs_per_category);
    let attr_names = fresh_tokens(&mut rng, n_attr_names, &mut used);
    let mut attribute_schema = BTreeMap::new();
    for name in &attr_names {
        let values = fresh_tokens(&mut rng, VALUES_PER_ATTRIBUTE, &mut used);
        attribute_schema.insert(name.clone(), values.into_iter().collect::<BTreeSet<_>>());
    }
    // Per-category attribute subset, fixed once.
    let mut category_attrs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for cat in &categories {
        let mut names = attr_names.clone();
        names.shuffle(&mut rng);
        names.truncate(attrs_per_category);
        names.sort();
        category_attrs.insert(cat.clone(), names);
    }
    // Filler tokens pad the vocabulary.
    let filler_target = DEFAULT_VOCAB_SIZE.saturating_sub(used.len()).max(20);
    let fillers = fresh_tokens(&mut rng, filler_target, &mut used);

    let mut items = Vec::with_capacity(n_items);
    for id in 0..n_items {
        let category = categories[rng.gen_range(0..categories.len())].clone();
        let mut attributes = BTreeMap::new();
        for name in &category_attrs[&category] {
            let allowed: Vec<&String> = attribute_schema[name].iter().collect();
            attributes.insert(name.clone(), allowed[rng.gen_range(0..allowed.len())].clone());
        }
        let title_len = rng.gen_range(TITLE_MIN..=TITLE_MAX);
        let mut title = vec![category.clone()];
        // A couple of the item's own attribute values appear in the title.
        let mut vals: Vec<&String> = attributes.values().collect();
        vals.shuffle(&mut rng);
        for v in vals.iter().take(2.min(title_len - 1)) {
            title.push((*v).clone());
        }
        while title.len() < title_len {
            title.push(fillers[rng.gen_range(0..fillers.len())].clone());
        }
        items.push(Item {
            id: id as u32,
            title,
            attributes,
            category,
        });
    }

    let mut vocabulary: BTreeSet<String> = used;
    vocabulary.extend(categories.iter().cloned());
    let catalog = Catalog {
        items,
        vocabulary,
        attribute_schema,
        seed,
    };
    catalog.validate()?;
    Ok(catalog)
}

pub fn generate_workload(catalog: &Catalog, seed: u64, n_queries: usize) -> Result<QueryWorkload> {
    if catalog.items.is_empty() {
        return Err(Error::Config("catalog is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(n_queries);
    while queries.len() < n_queries {
        // Sampling the intent from an actual item guarantees satisfiability.
        let item = &catalog.items[rng.gen_range(0..catalog.items.len())];
        let names: Vec<&String> = item.attributes.keys().collect();
        if names.len() < 2 {
            continue;
        }
        let mut picked: Vec<usize> = (0..names.len()).collect();
        picked.shuffle(&mut rng);
        picked.truncate(2);
        picked.sort();
        let mut attrs = BTreeMap::new();
        for &i in &picked {
            attrs.insert(names[i].clone(), item.attributes[names[i]].clone());
        }
        let intent = Intent {
            category: item.category.clone(),
            attrs,
        };
        // The query omits at least one intent attribute: include 0 or 1 of 2.
        let n_included = rng.gen_range(0..2usize);
        let mut tokens = vec![item.category.clone()];
        for (_, v) in intent.attrs.iter().take(n_included) {
            tokens.push(v.clone());
        }
        queries.push(WorkQuery { tokens, intent });
    }
    Ok(QueryWorkload { queries, seed })
}

/// True iff the item satisfies the full intent (category and every attr).
pub fn satisfies_intent(item: &Item, intent: &Intent) -> bool {
    item.category == intent.category
        && intent
            .attrs
            .iter()
            .all(|(k, v)| item.attributes.get(k) == Some(v))
}

// ---------------------------------------------------------------------------
// Persistence: line-delimited JSON with a header line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CatalogHeader {
    format_version: u32,
    kind: String,
    seed: u64,
    vocabulary: Vec<String>,
    attribute_schema: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct WorkloadHeader {
    format_version: u32,
    kind: String,
    seed: u64,
}

pub fn save_catalog(catalog: &Catalog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CatalogHeader {
        format_version: 1,
        kind: "catalog".into(),
        seed: catalog.seed,
        vocabulary: catalog.vocabulary.iter().cloned().collect(),
        attribute_schema: catalog
            .attribute_schema
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
            .collect(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialize"))?;
    for item in &catalog.items {
        writeln!(w, "{}", serde_json::to_string(item).expect("serialize"))?;
    }
    Ok(())
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty catalog file"))?;
    let header: CatalogHeader =
        serde_json::from_str(&first?).map_err(|e| parse_err(1, e))?;
    if header.kind != "catalog" || header.format_version != 1 {
        return Err(parse_err(1, "not a version-1 catalog file"));
    }
    let mut items = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?;
        items.push(item);
    }
    let catalog = Catalog {
        items,
        vocabulary: header.vocabulary.into_iter().collect(),
        attribute_schema: header
            .attribute_schema
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        seed: header.seed,
    };
    catalog.validate()?;
    Ok(catalog)
}

pub fn save_workload(workload: &QueryWorkload, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = WorkloadHeader {
        format_version: 1,
        kind: "workload".into(),
        seed: workload.seed,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialize"))?;
    for q in &workload.queries {
        writeln!(w, "{}", serde_json::to_string(q).expect("serialize"))?;
    }
    Ok(())
}

pub fn load_workload(path: &Path) -> Result<QueryWorkload> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty workload file"))?;
    let header: WorkloadHeader =
        serde_json::from_str(&first?).map_err(|e| parse_err(1, e))?;
    if header.kind != "workload" || header.format_version != 1 {
        return Err(parse_err(1, "not a version-1 workload file"));
    }
    let mut queries = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: WorkQuery = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?;
        queries.push(q);
    }
    Ok(QueryWorkload {
        queries,
        seed: header.seed,
    })
}
