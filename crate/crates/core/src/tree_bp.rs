//! Exact belief propagation on one fixed tree of the mixture.
//!
//! Given a joint parent choice, the model is an ordinary tree belief network
//! (the virtual root with its single state ties the top layer together
//! without coupling it). One upward sweep of lambda messages and one
//! downward sweep of pi messages give exact conditionals and the exact
//! log evidence probability for that tree.

pub use crate::model::TreeStructure;

use crate::error::InferenceError;
use crate::model::{DynamicTreeModel, Evidence, NodeRef};

/// Exact per-node conditionals and evidence probability for one tree.
#[derive(Debug, Clone)]
pub struct TreeResult {
    /// `marginals[flat][k] = P(node = k | evidence, tree)`. Rows sum to 1;
    /// uniform rows stand in when the evidence has probability zero.
    pub marginals: Vec<Vec<f64>>,
    /// `log P(evidence | tree)`; minus infinity for impossible evidence.
    pub log_evidence: f64,
}

/// Runs one upward and one downward sweep over the chosen tree.
pub fn tree_posterior(
    model: &DynamicTreeModel,
    tree: &TreeStructure,
    evidence: &Evidence,
) -> Result<TreeResult, InferenceError> {
    assert_eq!(tree.chosen.len(), model.num_choosers(), "tree shape mismatch");
    let m = model.num_states();
    let n = model.num_nodes();
    let bottom = model.bottom_layer();

    // Children of each node under this particular tree.
    let mut tree_children: Vec<Vec<NodeRef>> = vec![Vec::new(); n];
    for d in 1..model.num_layers() {
        for i in 0..model.layer_size(d) {
            let child = NodeRef::new(d, i);
            let slot = tree.chosen[model.chooser_index(child)];
            let parent = model.incoming(child)[slot].parent.expect("real edge");
            tree_children[model.flat(parent)].push(child);
        }
    }

    // Upward sweep. lambda[flat] is kept max-normalized; scale[flat] holds the
    // cumulative log factor so evidence probabilities stay exact.
    let mut lambda = vec![vec![1.0f64; m]; n];
    let mut scale = vec![0.0f64; n];
    // lambda message sent by each node to its (unique) parent in this tree.
    let mut lambda_msg = vec![vec![1.0f64; m]; n];

    for d in (0..model.num_layers()).rev() {
        for i in 0..model.layer_size(d) {
            let node = NodeRef::new(d, i);
            let flat = model.flat(node);
            if d == bottom {
                lambda[flat] = vec![0.0; m];
                lambda[flat][evidence.state_of(i)] = 1.0;
            } else {
                for child in &tree_children[flat] {
                    let cf = model.flat(*child);
                    let slot = tree.chosen[model.chooser_index(*child)];
                    let cpt = model.cpt_view(*child, slot);
                    for l in 0..m {
                        let mut s = 0.0;
                        for g in 0..m {
                            s += cpt.p(g, l) * lambda[cf][g];
                        }
                        lambda[flat][l] *= s;
                    }
                    scale[flat] += scale[cf];
                }
                let hi = lambda[flat].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > 0.0 {
                    for v in lambda[flat].iter_mut() {
                        *v /= hi;
                    }
                    scale[flat] += hi.ln();
                } else {
                    // Evidence impossible below this node under every state.
                    scale[flat] = f64::NEG_INFINITY;
                }
            }
            if d > 0 {
                let slot = tree.chosen[model.chooser_index(node)];
                let cpt = model.cpt_view(node, slot);
                for l in 0..m {
                    let mut s = 0.0;
                    for g in 0..m {
                        s += cpt.p(g, l) * lambda[flat][g];
                    }
                    lambda_msg[flat][l] = s;
                }
            }
        }
    }

    // Evidence probability collected at the virtual root.
    let mut log_evidence = 0.0;
    for i in 0..model.layer_size(0) {
        let flat = model.flat(NodeRef::new(0, i));
        let prior = model.root_prior(i);
        let ev: f64 = (0..m).map(|k| prior[k] * lambda[flat][k]).sum();
        if ev > 0.0 && scale[flat] > f64::NEG_INFINITY {
            log_evidence += ev.ln() + scale[flat];
        } else {
            log_evidence = f64::NEG_INFINITY;
        }
    }

    // Downward sweep. pi[flat] is the prior-direction message into each node.
    let mut pi = vec![vec![1.0f64; m]; n];
    let mut marginals = vec![vec![0.0f64; m]; n];
    for node in model.nodes() {
        let flat = model.flat(node);
        if node.layer == 0 {
            pi[flat] = model.root_prior(node.index).to_vec();
        }
        let mut belief: Vec<f64> = (0..m).map(|k| pi[flat][k] * lambda[flat][k]).collect();
        let sum: f64 = belief.iter().sum();
        if sum > 0.0 {
            for b in belief.iter_mut() {
                *b /= sum;
            }
        } else {
            belief = vec![1.0 / m as f64; m];
        }
        marginals[flat] = belief;

        // Pi messages to tree children: own pi times the lambda messages of
        // the other children, recomputed per child to avoid dividing by zero.
        for child in &tree_children[flat] {
            let cf = model.flat(*child);
            let mut msg: Vec<f64> = pi[flat].clone();
            for other in &tree_children[flat] {
                if other != child {
                    let of = model.flat(*other);
                    for k in 0..m {
                        msg[k] *= lambda_msg[of][k];
                    }
                }
            }
            let sum: f64 = msg.iter().sum();
            if sum > 0.0 {
                for v in msg.iter_mut() {
                    *v /= sum;
                }
            }
            let slot = tree.chosen[model.chooser_index(*child)];
            let cpt = model.cpt_view(*child, slot);
            for k in 0..m {
                let mut s = 0.0;
                for l in 0..m {
                    s += cpt.p(k, l) * msg[l];
                }
                pi[cf][k] = s;
            }
        }
    }

    Ok(TreeResult { marginals, log_evidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_layered_model, log_joint, Assignment, Cpt, CptSpec, MenuEntry, ParentMenu,
        ParentPriorSpec, RootPriorSpec,
    };
    use crate::math::logsumexp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn chain(cpt: Cpt, prior: Vec<f64>) -> crate::model::DynamicTreeModel {
        build_layered_model(
            &[1, 1],
            prior.len(),
            &ParentPriorSpec::GaussianOverDistance { sigma_factor: 3.0 },
            &CptSpec::Shared(cpt),
            &RootPriorSpec::Explicit(vec![prior]),
        )
        .unwrap()
    }

    #[test]
    fn identity_chain_pins_root_to_leaf_state() {
        let model = chain(Cpt::identity(2), vec![0.5, 0.5]);
        let tree = TreeStructure { chosen: vec![0] };
        let ev = Evidence::for_model(&model, vec![1]).unwrap();
        let res = tree_posterior(&model, &tree, &ev).unwrap();
        assert_eq!(res.marginals[0], vec![0.0, 1.0]);
        assert!((res.log_evidence - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn impossible_evidence_gives_minus_infinity() {
        // Root prior forces state 0, identity chain, but the leaf says 1.
        let model = chain(Cpt::identity(2), vec![1.0, 0.0]);
        let tree = TreeStructure { chosen: vec![0] };
        let ev = Evidence::for_model(&model, vec![1]).unwrap();
        let res = tree_posterior(&model, &tree, &ev).unwrap();
        assert_eq!(res.log_evidence, f64::NEG_INFINITY);
        for row in &res.marginals {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Brute-force conditionals by enumerating states of one fixed tree.
    fn enumerate_tree(
        model: &crate::model::DynamicTreeModel,
        tree: &TreeStructure,
        evidence: &Evidence,
    ) -> (Vec<Vec<f64>>, f64) {
        let m = model.num_states();
        let n = model.num_nodes();
        let bottom_offset = n - model.layer_size(model.bottom_layer());
        let mut marginals = vec![vec![0.0f64; m]; n];
        let mut log_terms = Vec::new();
        let mut weights: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut states = vec![0usize; n];
        'outer: loop {
            let leaf_ok = (bottom_offset..n).all(|f| states[f] == evidence.state_of(f - bottom_offset));
            if leaf_ok {
                let a = Assignment { tree: tree.clone(), states: states.clone() };
                let lj = log_joint(model, &a);
                log_terms.push(lj);
                weights.push((states.clone(), lj));
            }
            for i in (0..n).rev() {
                states[i] += 1;
                if states[i] < m {
                    continue 'outer;
                }
                states[i] = 0;
            }
            break;
        }
        // The tree prior factor cancels between joint and evidence terms.
        let log_ev = logsumexp(&log_terms);
        let mut log_prior_z = 0.0;
        for c in 0..model.num_choosers() {
            let node = model.chooser_node(c);
            log_prior_z += model.menu(node).unwrap().entries[tree.chosen[c]].rho.ln();
        }
        for (states, lj) in weights {
            let w = (lj - log_ev).exp();
            for (f, &s) in states.iter().enumerate() {
                marginals[f][s] += w;
            }
        }
        (marginals, log_ev - log_prior_z)
    }

    fn random_singleton_model(seed: u64, layer_sizes: &[usize], m: usize) -> (crate::model::DynamicTreeModel, Evidence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut menus = Vec::new();
        for d in 1..layer_sizes.len() {
            let mut layer = Vec::new();
            for _ in 0..layer_sizes[d] {
                let parent = rng.gen_range(0..layer_sizes[d - 1]);
                layer.push(ParentMenu {
                    entries: vec![MenuEntry {
                        parent: crate::model::NodeRef::new(d - 1, parent),
                        rho: 1.0,
                        tie: format!("layer-{d}"),
                    }],
                });
            }
            menus.push(layer);
        }
        let mut cpts = BTreeMap::new();
        for d in 1..layer_sizes.len() {
            cpts.insert(format!("layer-{d}"), random_positive_cpt(m, &mut rng));
        }
        let priors: Vec<Vec<f64>> = (0..layer_sizes[0]).map(|_| random_dist(m, &mut rng)).collect();
        let model = crate::model::DynamicTreeModel::new(m, layer_sizes.to_vec(), priors, menus, cpts).unwrap();
        let ev_states: Vec<usize> = (0..layer_sizes[layer_sizes.len() - 1])
            .map(|_| rng.gen_range(0..m))
            .collect();
        let ev = Evidence::for_model(&model, ev_states).unwrap();
        (model, ev)
    }

    fn random_positive_cpt(m: usize, rng: &mut impl Rng) -> Cpt {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.gen_range(0.1..1.0)).collect())
            .collect();
        Cpt::normalized_from_rows(&rows).unwrap()
    }

    fn random_dist(m: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn matches_state_enumeration_on_random_trees() {
        for seed in 0..10 {
            let (model, ev) = random_singleton_model(seed, &[1, 2, 3], 3);
            let tree = TreeStructure { chosen: vec![0; model.num_choosers()] };
            let res = tree_posterior(&model, &tree, &ev).unwrap();
            let (want_marg, want_log_ev) = enumerate_tree(&model, &tree, &ev);
            assert!(
                (res.log_evidence - want_log_ev).abs() < 1e-10,
                "seed {seed}: {} vs {}",
                res.log_evidence,
                want_log_ev
            );
            for f in 0..model.num_nodes() {
                for k in 0..model.num_states() {
                    assert!(
                        (res.marginals[f][k] - want_marg[f][k]).abs() < 1e-10,
                        "seed {seed} node {f} state {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn log_evidence_invariant_under_within_layer_relabeling() {
        for seed in 0..5 {
            let (model, ev) = random_singleton_model(100 + seed, &[2, 3, 3], 2);
            let tree = TreeStructure { chosen: vec![0; model.num_choosers()] };
            let base = tree_posterior(&model, &tree, &ev).unwrap();

            // Swap the two bottom-layer... relabel bottom layer by reversal.
            let perm: Vec<usize> = (0..model.layer_size(2)).rev().collect();
            let mut menus = Vec::new();
            for d in 1..model.num_layers() {
                let mut layer = Vec::new();
                for i in 0..model.layer_size(d) {
                    let src = if d == 2 { perm[i] } else { i };
                    layer.push(model.menu(crate::model::NodeRef::new(d, src)).unwrap().clone());
                }
                menus.push(layer);
            }
            let priors: Vec<Vec<f64>> = (0..model.layer_size(0))
                .map(|i| model.root_prior(i).to_vec())
                .collect();
            let permuted = crate::model::DynamicTreeModel::new(
                model.num_states(),
                model.layer_sizes().to_vec(),
                priors,
                menus,
                model.cpts().clone(),
            )
            .unwrap();
            let ev_perm = Evidence::for_model(
                &permuted,
                (0..ev.len()).map(|i| ev.state_of(perm[i])).collect(),
            )
            .unwrap();
            let res = tree_posterior(&permuted, &tree, &ev_perm).unwrap();
            assert!((res.log_evidence - base.log_evidence).abs() < 1e-12);
        }
    }
}
