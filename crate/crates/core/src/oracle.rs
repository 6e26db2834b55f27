//! Exact posteriors by enumerating every tree in the mixture.
//!
//! Each joint parent choice is visited once (mixed-radix odometer over menu
//! indices in chooser order, last chooser fastest), scored by exact belief
//! propagation, and folded into running totals in log space. Enumeration is
//! sequential and the fold order fixed, so results are bit-reproducible.

use std::cmp::Ordering;

use crate::error::InferenceError;
use crate::math::{increment_mixed_radix, logsumexp};
use crate::model::{DynamicTreeModel, Evidence, TreeStructure};
use crate::tree_bp::tree_posterior;

/// Trees with posterior weight are materialized per tree only up to this
/// count; above it the result keeps aggregates and the top trees only.
pub const MATERIALIZE_LIMIT: u128 = 100_000;

#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Hard cap on the number of trees enumerated.
    pub tree_limit: u128,
    /// How many highest-posterior trees to keep.
    pub top_k: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { tree_limit: 1_000_000, top_k: 16 }
    }
}

/// Exact mixture posterior for one evidence set.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    /// `log P(evidence)` under the full mixture.
    pub log_evidence: f64,
    /// `marginals[flat][k] = P(node = k | evidence)`, all nodes.
    pub node_marginals: Vec<Vec<f64>>,
    /// Posterior probability of each menu entry, indexed by chooser.
    pub edge_posterior: Vec<Vec<f64>>,
    /// Posterior weight per enumerated tree, present only when the tree
    /// count does not exceed [`MATERIALIZE_LIMIT`].
    pub tree_weights: Option<Vec<f64>>,
    /// Highest-posterior trees, best first, with their weights.
    pub top_trees: Vec<(TreeStructure, f64)>,
}

/// Number of trees in the mixture: the product of all menu sizes,
/// saturating at `u128::MAX`.
pub fn tree_count(model: &DynamicTreeModel) -> u128 {
    let mut count: u128 = 1;
    for c in 0..model.num_choosers() {
        let size = model.menu(model.chooser_node(c)).expect("chooser").len() as u128;
        count = count.saturating_mul(size);
    }
    count
}

pub fn exact_posterior(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    tree_limit: u128,
) -> Result<ExactPosterior, InferenceError> {
    exact_posterior_with(model, evidence, &OracleOptions { tree_limit, ..Default::default() })
}

pub fn exact_posterior_with(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    options: &OracleOptions,
) -> Result<ExactPosterior, InferenceError> {
    let count = tree_count(model);
    if count > options.tree_limit {
        return Err(InferenceError::TreeCountExceedsLimit { count, limit: options.tree_limit });
    }
    let materialize = count <= MATERIALIZE_LIMIT;

    let m = model.num_states();
    let n = model.num_nodes();
    let menu_sizes: Vec<usize> = (0..model.num_choosers())
        .map(|c| model.menu(model.chooser_node(c)).expect("chooser").len())
        .collect();
    let log_rhos: Vec<Vec<f64>> = (0..model.num_choosers())
        .map(|c| {
            model
                .menu(model.chooser_node(c))
                .expect("chooser")
                .rhos()
                .iter()
                .map(|r| r.ln())
                .collect()
        })
        .collect();

    // Accumulators live in the scale exp(lw - lmax) of the best tree so far.
    let mut lmax = f64::NEG_INFINITY;
    let mut sum_w = 0.0f64;
    let mut acc_marg = vec![vec![0.0f64; m]; n];
    let mut acc_edge: Vec<Vec<f64>> = menu_sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut log_weights: Vec<f64> = if materialize { Vec::with_capacity(count as usize) } else { Vec::new() };
    let mut top: Vec<(f64, TreeStructure)> = Vec::new();

    let mut chosen = vec![0usize; menu_sizes.len()];
    loop {
        let tree = TreeStructure { chosen: chosen.clone() };
        let mut log_prior = 0.0;
        for (c, &slot) in chosen.iter().enumerate() {
            log_prior += log_rhos[c][slot];
        }
        let result = if log_prior == f64::NEG_INFINITY {
            None
        } else {
            Some(tree_posterior(model, &tree, evidence)?)
        };
        let lw = result
            .as_ref()
            .map(|r| log_prior + r.log_evidence)
            .unwrap_or(f64::NEG_INFINITY);
        if materialize {
            log_weights.push(lw);
        }

        if lw > f64::NEG_INFINITY {
            if lw > lmax {
                let factor = if lmax == f64::NEG_INFINITY { 0.0 } else { (lmax - lw).exp() };
                sum_w *= factor;
                for row in acc_marg.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= factor;
                    }
                }
                for row in acc_edge.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= factor;
                    }
                }
                lmax = lw;
            }
            let w = (lw - lmax).exp();
            sum_w += w;
            let res = result.expect("finite weight implies a result");
            for (row, tree_row) in acc_marg.iter_mut().zip(&res.marginals) {
                for (v, t) in row.iter_mut().zip(tree_row) {
                    *v += w * t;
                }
            }
            for (c, &slot) in chosen.iter().enumerate() {
                acc_edge[c][slot] += w;
            }
            push_top(&mut top, options.top_k, lw, tree);
        }

        if !increment_mixed_radix(&mut chosen, &menu_sizes) {
            break;
        }
    }

    if sum_w == 0.0 {
        return Err(InferenceError::ZeroEvidence);
    }
    let log_evidence = lmax + sum_w.ln();
    for row in acc_marg.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum_w;
        }
    }
    for row in acc_edge.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum_w;
        }
    }
    let tree_weights = if materialize {
        // Normalize through the exact total rather than sum_w so the two
        // paths agree: log of each weight minus log evidence.
        let check = logsumexp(&log_weights);
        debug_assert!((check - log_evidence).abs() < 1e-9);
        Some(log_weights.iter().map(|&lw| (lw - log_evidence).exp()).collect())
    } else {
        None
    };
    top.sort_by(|a, b| cmp_desc(a.0, b.0));
    let top_trees = top
        .into_iter()
        .map(|(lw, tree)| (tree, (lw - log_evidence).exp()))
        .collect();

    Ok(ExactPosterior { log_evidence, node_marginals: acc_marg, edge_posterior: acc_edge, tree_weights, top_trees })
}

fn push_top(top: &mut Vec<(f64, TreeStructure)>, k: usize, lw: f64, tree: TreeStructure) {
    if k == 0 {
        return;
    }
    if top.len() < k {
        top.push((lw, tree));
        return;
    }
    let (worst_idx, worst) = top
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap_or(Ordering::Equal))
        .map(|(i, v)| (i, v.0))
        .expect("non-empty");
    if lw > worst {
        top[worst_idx] = (lw, tree);
    }
}

fn cmp_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}
