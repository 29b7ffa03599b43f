//! Search-feedback reward: relevance and recall-size ratios normalized
//! against the original query's own retrieval, gated on output validity.
//!
//! `total = r_rel + lambda * r_size` for a valid set, 0 otherwise, with
//! `r_rel = Rel(Y) / (Rel(q) + eps)` and `r_size = Ret(Y) / (Ret(q) + eps)`.
//! Rel uses the deduplicated union of each query's top-`k_rel` items; Ret
//! counts unique items at depth `k_size` per query.

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Intent};
use crate::error::Result;
use crate::format::ExpansionSet;
use crate::search::{self, Index};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the size component.
    pub lambda: f64,
    /// Division guard.
    pub epsilon: f64,
    /// Retrieval depth per query for the relevance component.
    pub k_rel: usize,
    /// Retrieval depth per query for the size component.
    pub k_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 0.1,
            epsilon: 1e-4,
            k_rel: 10,
            k_size: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_rel: f64,
    pub r_size: f64,
    pub valid: bool,
    pub total: f64,
    pub baseline_rel: f64,
    pub baseline_ret: usize,
    pub union_rel: f64,
    pub union_ret: usize,
}

impl RewardBreakdown {
    pub fn zero() -> RewardBreakdown {
        RewardBreakdown {
            r_rel: 0.0,
            r_size: 0.0,
            valid: false,
            total: 0.0,
            baseline_rel: 0.0,
            baseline_ret: 0,
            union_rel: 0.0,
            union_ret: 0,
        }
    }
}

/// Computes the gated reward for one candidate. `None` means the candidate
/// failed the validation gate and earns exactly zero.
pub fn compute_reward(
    index: &Index,
    catalog: &Catalog,
    intent: &Intent,
    set: Option<&ExpansionSet>,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let set = match set {
        Some(s) => s,
        None => return Ok(RewardBreakdown::zero()),
    };
    let queries = set.queries();
    let baseline = std::slice::from_ref(&set.original);

    let union_rel = search::avg_relevance(index, catalog, intent, &queries, cfg.k_rel)?;
    let baseline_rel = search::avg_relevance(index, catalog, intent, baseline, cfg.k_rel)?;
    let (union_ids, _) = search::union_retrieve(index, &queries, cfg.k_size)?;
    let (baseline_ids, _) = search::union_retrieve(index, baseline, cfg.k_size)?;
    let union_ret = union_ids.len();
    let baseline_ret = baseline_ids.len();

    let r_rel = union_rel / (baseline_rel + cfg.epsilon);
    let r_size = union_ret as f64 / (baseline_ret as f64 + cfg.epsilon);
    Ok(RewardBreakdown {
        r_rel,
        r_size,
        valid: true,
        total: r_rel + cfg.lambda * r_size,
        baseline_rel,
        baseline_ret,
        union_rel,
        union_ret,
    })
}

/// Element-wise rewards for a group of candidates for the same input.
pub fn batch_rewards(
    index: &Index,
    catalog: &Catalog,
    intent: &Intent,
    candidates: &[Option<ExpansionSet>],
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>> {
    candidates
        .iter()
        .map(|c| compute_reward(index, catalog, intent, c.as_ref(), cfg))
        .collect()
}
