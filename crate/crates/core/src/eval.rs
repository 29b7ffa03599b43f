//! Offline evaluation: retrieval gain, relevance gain, percent-positive
//! rates with repeated-run mean/std, plus the deterministic
//! lexical-neighbor baseline and report emission.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, QueryWorkload, WorkQuery};
use crate::error::{Error, Result};
use crate::format::{self, ExpansionSet, GateConfig};
use crate::policy::{PolicyModel, SampleOptions};
use crate::search::{self, Index};
use crate::trainer::derive_seed;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub runs: usize,
    pub temperature: f64,
    pub k_eval: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 5,
            temperature: 0.5,
            k_eval: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: String,
    pub run_index: usize,
    /// |R_exp \ R_orig|, items the expansion set retrieves beyond the query.
    pub d_ret: usize,
    /// AvgRel(union) - AvgRel(original), both at depth k_eval.
    pub d_rel: f64,
    pub n_expansions: usize,
    pub valid: bool,
    /// Either side's retrieval came back empty (AvgRel defined as 0 there).
    pub empty_retrieval: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunAggregate {
    pub run: usize,
    pub pct_positive_ret: f64,
    pub pct_positive_rel: f64,
    pub mean_d_ret: f64,
    pub mean_d_rel: f64,
    pub valid_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn over(values: &[f64]) -> MeanStd {
        // identical samples (deterministic system) get an exact zero std
        if values.windows(2).all(|w| w[0] == w[1]) {
            return MeanStd {
                mean: values[0],
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub runs: Vec<RunAggregate>,
    pub pct_positive_ret: MeanStd,
    pub pct_positive_rel: MeanStd,
    pub mean_d_ret: MeanStd,
    pub mean_d_rel: MeanStd,
    pub valid_rate: MeanStd,
    pub n_empty_retrieval: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub systems: Vec<SystemReport>,
}

pub const REPORT_VERSION: u32 = 1;

/// Evaluates one expansion system over the workload. The generator maps
/// (run, query index, query) to an expansion set; `Ok(None)` and `Err`
/// both count as an invalid generation for that query, never aborting
/// the sweep.
pub fn evaluate_system<G>(
    name: &str,
    generator: G,
    workload: &QueryWorkload,
    index: &Index,
    catalog: &Catalog,
    cfg: &EvalConfig,
) -> Result<(SystemReport, Vec<EvalRecord>)>
where
    G: Fn(usize, usize, &WorkQuery) -> Result<Option<ExpansionSet>> + Sync,
{
    if cfg.runs == 0 {
        return Err(Error::Config("eval runs must be >= 1".into()));
    }
    if workload.queries.is_empty() {
        return Err(Error::Config("workload is empty".into()));
    }
    let mut records = Vec::with_capacity(cfg.runs * workload.queries.len());
    let mut aggregates = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let run_records: Vec<EvalRecord> = workload
            .queries
            .par_iter()
            .enumerate()
            .map(|(qi, q)| eval_one(&generator, run, qi, q, index, catalog, cfg))
            .collect();
        let n = run_records.len() as f64;
        aggregates.push(RunAggregate {
            run,
            pct_positive_ret: 100.0
                * run_records.iter().filter(|r| r.d_ret > 0).count() as f64
                / n,
            pct_positive_rel: 100.0
                * run_records.iter().filter(|r| r.d_rel > 0.0).count() as f64
                / n,
            mean_d_ret: run_records.iter().map(|r| r.d_ret as f64).sum::<f64>() / n,
            mean_d_rel: run_records.iter().map(|r| r.d_rel).sum::<f64>() / n,
            valid_rate: run_records.iter().filter(|r| r.valid).count() as f64 / n,
        });
        records.extend(run_records);
    }
    let col = |f: fn(&RunAggregate) -> f64| {
        MeanStd::over(&aggregates.iter().map(f).collect::<Vec<_>>())
    };
    let report = SystemReport {
        system: name.to_string(),
        pct_positive_ret: col(|a| a.pct_positive_ret),
        pct_positive_rel: col(|a| a.pct_positive_rel),
        mean_d_ret: col(|a| a.mean_d_ret),
        mean_d_rel: col(|a| a.mean_d_rel),
        valid_rate: col(|a| a.valid_rate),
        n_empty_retrieval: records.iter().filter(|r| r.empty_retrieval).count(),
        runs: aggregates,
    };
    Ok((report, records))
}

fn eval_one<G>(
    generator: &G,
    run: usize,
    qi: usize,
    q: &WorkQuery,
    index: &Index,
    catalog: &Catalog,
    cfg: &EvalConfig,
) -> EvalRecord
where
    G: Fn(usize, usize, &WorkQuery) -> Result<Option<ExpansionSet>>,
{
    let invalid = |n_expansions| EvalRecord {
        query: q.tokens.join(" "),
        run_index: run,
        d_ret: 0,
        d_rel: 0.0,
        n_expansions,
        valid: false,
        empty_retrieval: false,
    };
    let set = match generator(run, qi, q) {
        Ok(Some(set)) => set,
        Ok(None) | Err(_) => return invalid(0),
    };
    let measure = || -> Result<EvalRecord> {
        let queries = set.queries();
        let baseline = std::slice::from_ref(&set.original);
        let (r_exp, _) = search::union_retrieve(index, &queries, cfg.k_eval)?;
        let (r_orig, _) = search::union_retrieve(index, baseline, cfg.k_eval)?;
        let d_ret = r_exp.difference(&r_orig).count();
        let rel_exp = search::avg_relevance(index, catalog, &q.intent, &queries, cfg.k_eval)?;
        let rel_orig = search::avg_relevance(index, catalog, &q.intent, baseline, cfg.k_eval)?;
        Ok(EvalRecord {
            query: q.tokens.join(" "),
            run_index: run,
            d_ret,
            d_rel: rel_exp - rel_orig,
            n_expansions: set.expansions.len(),
            valid: true,
            empty_retrieval: r_exp.is_empty() || r_orig.is_empty(),
        })
    };
    measure().unwrap_or_else(|_| invalid(set.expansions.len()))
}

#[derive(Debug, Clone)]
pub struct ExpandOptions {
    pub temperature: f64,
    pub seed: u64,
    pub greedy: bool,
    pub max_new_tokens: usize,
    pub gate: GateConfig,
}

/// One expansion attempt with a trained policy: retrieve context, build the
/// prompt, sample, parse, gate. Returns the raw generated text alongside
/// the gated result (`None` = failed the gate).
pub fn policy_expand_raw(
    model: &PolicyModel,
    vocab: &Vocab,
    catalog: &Catalog,
    index: &Index,
    query: &[String],
    opts: &ExpandOptions,
) -> Result<(String, Option<ExpansionSet>)> {
    let result = search::search(index, query, format::MAX_CONTEXT_ITEMS)?;
    let pad_to = model.cfg.context_len.saturating_sub(opts.max_new_tokens);
    let (_, tokens) = format::build_prompt(query, &result, catalog, pad_to)?;
    let prompt = format::encode_prompt_padded(vocab, &tokens, pad_to)?;
    let rollout = model.sample(
        &prompt,
        &SampleOptions {
            temperature: opts.temperature,
            max_new_tokens: opts.max_new_tokens,
            seed: opts.seed,
            greedy: opts.greedy,
            eos: vocab.eos(),
        },
    )?;
    let text = vocab.render(&rollout.generated_ids);
    let parsed = format::parse_output(&text, &opts.gate, &catalog.vocabulary);
    if !parsed.valid {
        return Ok((text, None));
    }
    let set = format::to_expansion_set(query, &parsed)?;
    Ok((text, Some(set)))
}

/// [`policy_expand_raw`] without the raw text.
pub fn policy_expand(
    model: &PolicyModel,
    vocab: &Vocab,
    catalog: &Catalog,
    index: &Index,
    query: &[String],
    opts: &ExpandOptions,
) -> Result<Option<ExpansionSet>> {
    Ok(policy_expand_raw(model, vocab, catalog, index, query, opts)?.1)
}

/// Wraps a checkpointed policy as an evaluation system; each (run, query)
/// pair gets its own derived sampling seed.
pub fn policy_generator<'a>(
    model: &'a PolicyModel,
    vocab: &'a Vocab,
    catalog: &'a Catalog,
    index: &'a Index,
    opts: ExpandOptions,
) -> impl Fn(usize, usize, &WorkQuery) -> Result<Option<ExpansionSet>> + Sync + 'a {
    move |run, qi, q| {
        let mut o = opts.clone();
        o.seed = derive_seed(opts.seed, run as u64, qi as u64, 0);
        policy_expand(model, vocab, catalog, index, &q.tokens, &o)
    }
}

/// Identity system: 𝒴 = {q}. All gains are zero by construction.
pub fn identity_generator() -> impl Fn(usize, usize, &WorkQuery) -> Result<Option<ExpansionSet>> {
    |_, _, q: &WorkQuery| Ok(Some(ExpansionSet::identity(&q.tokens)))
}

/// Deterministic baseline: each expansion substitutes one query token with
/// its highest-co-occurrence catalog token (documents sharing both tokens),
/// ranked by co-occurrence count, ties broken by token order.
pub fn lexical_neighbor_baseline(
    query: &[String],
    index: &Index,
    catalog: &Catalog,
    n_expansions: usize,
) -> ExpansionSet {
    // (count, position substituted, neighbor token, expansion)
    let mut candidates: Vec<(usize, usize, String, Vec<String>)> = Vec::new();
    for (pos, token) in query.iter().enumerate() {
        let docs: BTreeSet<u32> = match index.postings(token) {
            Some(p) => p.iter().map(|&(id, _)| id).collect(),
            None => continue,
        };
        let mut best: Option<(usize, &String)> = None;
        for neighbor in &catalog.vocabulary {
            if neighbor == token || query.contains(neighbor) {
                continue;
            }
            let count = match index.postings(neighbor) {
                Some(p) => p.iter().filter(|(id, _)| docs.contains(id)).count(),
                None => 0,
            };
            if count > 0 && best.map_or(true, |(c, _)| count > c) {
                best = Some((count, neighbor)); // vocabulary order breaks ties
            }
        }
        if let Some((count, neighbor)) = best {
            let mut expansion = query.to_vec();
            expansion[pos] = neighbor.clone();
            candidates.push((count, pos, neighbor.clone(), expansion));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    candidates.truncate(n_expansions);
    ExpansionSet {
        original: query.to_vec(),
        expansions: candidates.into_iter().map(|c| c.3).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format: {other}"))),
        }
    }
}

pub fn format_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            Ok(serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.into()))? + "\n")
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "system,run,pct_positive_ret,pct_positive_rel,mean_dret,mean_drel,valid_rate\n",
            );
            for sys in &report.systems {
                for a in &sys.runs {
                    out.push_str(&format!(
                        "{},{},{:.2},{:.2},{:.4},{:.4},{:.4}\n",
                        sys.system,
                        a.run,
                        a.pct_positive_ret,
                        a.pct_positive_rel,
                        a.mean_d_ret,
                        a.mean_d_rel,
                        a.valid_rate
                    ));
                }
            }
            Ok(out)
        }
        ReportFormat::Table => {
            let name_w = report
                .systems
                .iter()
                .map(|s| s.system.len())
                .max()
                .unwrap_or(6)
                .max("system".len());
            let mut out = format!(
                "{:name_w$}  {:>16}  {:>16}  {:>10}  {:>10}  {:>10}\n",
                "system", "%pos dRet", "%pos dRel", "mean dRet", "mean dRel", "valid"
            );
            for sys in &report.systems {
                out.push_str(&format!(
                    "{:name_w$}  {:>7.2} ± {:>5.2}  {:>7.2} ± {:>5.2}  {:>10.3}  {:>10.3}  {:>10.3}\n",
                    sys.system,
                    sys.pct_positive_ret.mean,
                    sys.pct_positive_ret.std,
                    sys.pct_positive_rel.mean,
                    sys.pct_positive_rel.std,
                    sys.mean_d_ret.mean,
                    sys.mean_d_rel.mean,
                    sys.valid_rate.mean
                ));
            }
            Ok(out)
        }
    }
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, format_report(report, format)?)?;
    Ok(())
}
