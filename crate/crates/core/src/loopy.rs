//! Loopy belief propagation with every candidate edge kept as an edge.
//!
//! The graph the messages run on keeps each candidate parent link as a full
//! message-passing edge whose pairwise potential is the conditional table
//! raised to the link's prior weight. A node combines its candidate parents
//! multiplicatively, exactly as tree propagation combines independent
//! subtrees, and sends its full evidence message up every candidate edge.
//! With singleton menus the exponent is one and the scheme reduces to exact
//! tree propagation.
//!
//! Updates are synchronous with optional damping, iterated to a fixed point
//! of the message map. On graphs with cycles the result is the usual loopy
//! approximation, and because evidence circulates through every candidate
//! edge at once the fixed-point beliefs on multiply connected graphs tend to
//! be sharper than the true marginals; nothing here bounds anything.

use crate::error::InferenceError;
use crate::math::cm;
use crate::model::{DynamicTreeModel, Evidence, NodeRef};

#[derive(Debug, Clone)]
pub struct LoopyOptions {
    /// Fraction of the previous message kept at each update.
    pub damping: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the largest entrywise message change.
    pub message_tolerance: f64,
}

impl Default for LoopyOptions {
    fn default() -> Self {
        LoopyOptions { damping: 0.1, max_iterations: 200, message_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LoopyResult {
    /// Per-node state beliefs, flat id order; observed nodes are point masses.
    pub marginals: Vec<Vec<f64>>,
    /// Iterations actually run.
    pub iterations: usize,
    pub converged: bool,
}

/// Message state: one incoming prior-direction message per candidate edge
/// and one outgoing evidence-direction message per candidate edge, both kept
/// normalized. The virtual-root slot of a top node holds a fixed singleton
/// incoming message.
struct Messages {
    /// `pi_in[flat][slot][l]`: from the slot's parent, over parent states.
    pi_in: Vec<Vec<Vec<f64>>>,
    /// `lam_out[flat][slot][l]`: to the slot's parent, over parent states.
    lam_out: Vec<Vec<Vec<f64>>>,
    /// `psi[flat][slot]`: edge potential, the slot's conditional table with
    /// every entry raised to the slot's prior weight; column-major (k, l).
    psi: Vec<Vec<Vec<f64>>>,
    evidential: Vec<Option<usize>>,
}

fn normalize_or_uniform(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x /= sum;
        }
    } else {
        let u = 1.0 / v.len() as f64;
        for x in v.iter_mut() {
            *x = u;
        }
    }
}

impl Messages {
    fn init(model: &DynamicTreeModel, evidence: &Evidence) -> Messages {
        let n = model.num_nodes();
        let bottom = model.bottom_layer();
        let mut evidential = vec![None; n];
        for i in 0..model.layer_size(bottom) {
            evidential[model.flat(NodeRef::new(bottom, i))] = Some(evidence.state_of(i));
        }
        let m = model.num_states();
        let mut pi_in = Vec::with_capacity(n);
        let mut lam_out = Vec::with_capacity(n);
        let mut psi = Vec::with_capacity(n);
        for node in model.nodes() {
            let slots = model.incoming(node);
            pi_in.push(
                slots
                    .iter()
                    .map(|s| {
                        let ps = s.cpt.parent_states();
                        vec![1.0 / ps as f64; ps]
                    })
                    .collect::<Vec<_>>(),
            );
            lam_out.push(
                slots
                    .iter()
                    .map(|s| {
                        let ps = s.cpt.parent_states();
                        vec![1.0 / ps as f64; ps]
                    })
                    .collect::<Vec<_>>(),
            );
            psi.push(
                slots
                    .iter()
                    .map(|s| {
                        let ps = s.cpt.parent_states();
                        let mut table = vec![0.0; m * ps];
                        for l in 0..ps {
                            for k in 0..m {
                                table[cm(k, l, m)] = s.cpt.p(k, l).powf(s.rho);
                            }
                        }
                        table
                    })
                    .collect::<Vec<_>>(),
            );
        }
        Messages { pi_in, lam_out, psi, evidential }
    }

    /// Evidence-direction product at a node: point mass when observed, the
    /// entrywise product of the messages from candidate children otherwise.
    fn lambda_at(&self, model: &DynamicTreeModel, node: NodeRef) -> Vec<f64> {
        let m = model.num_states();
        let flat = model.flat(node);
        if let Some(state) = self.evidential[flat] {
            let mut v = vec![0.0; m];
            v[state] = 1.0;
            return v;
        }
        let mut lam = vec![1.0; m];
        for &(child, slot) in model.children_of(node) {
            let msg = &self.lam_out[model.flat(child)][slot];
            for k in 0..m {
                lam[k] *= msg[k];
            }
        }
        normalize_or_uniform(&mut lam);
        lam
    }

    /// One synchronous update of every message, damped by `damping`.
    /// Returns the largest entrywise change.
    fn step(&mut self, model: &DynamicTreeModel, damping: f64) -> f64 {
        let m = model.num_states();
        let n = model.num_nodes();

        // Per node: evidence-direction product, per-slot prior-direction
        // factors and their product.
        let mut lam_node = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n);
        let mut pi_node = Vec::with_capacity(n);
        for node in model.nodes() {
            let flat = model.flat(node);
            lam_node.push(self.lambda_at(model, node));
            let slots = model.incoming(node);
            let mut per_slot = Vec::with_capacity(slots.len());
            let mut pi = vec![1.0f64; m];
            for (slot, _) in slots.iter().enumerate() {
                let msg = &self.pi_in[flat][slot];
                let psi = &self.psi[flat][slot];
                let mut f = vec![0.0f64; m];
                for k in 0..m {
                    let mut s = 0.0;
                    for (l, &pl) in msg.iter().enumerate() {
                        s += psi[cm(k, l, m)] * pl;
                    }
                    f[k] = s;
                }
                normalize_or_uniform(&mut f);
                for k in 0..m {
                    pi[k] *= f[k];
                }
                per_slot.push(f);
            }
            normalize_or_uniform(&mut pi);
            factors.push(per_slot);
            pi_node.push(pi);
        }

        let mut max_change = 0.0f64;

        // Evidence-direction messages along every real candidate edge: the
        // node's own evidence product, the factors of its other candidate
        // edges, and this edge's potential.
        let mut new_lam_out = self.lam_out.clone();
        for node in model.nodes() {
            let flat = model.flat(node);
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let Some(_) = inc.parent else { continue };
                let ps = inc.cpt.parent_states();
                let psi = &self.psi[flat][slot];
                let mut msg = vec![0.0f64; ps];
                for l in 0..ps {
                    let mut s = 0.0;
                    for k in 0..m {
                        let mut others = lam_node[flat][k];
                        for (s2, f) in factors[flat].iter().enumerate() {
                            if s2 != slot {
                                others *= f[k];
                            }
                        }
                        s += others * psi[cm(k, l, m)];
                    }
                    msg[l] = s;
                }
                normalize_or_uniform(&mut msg);
                for l in 0..ps {
                    let v = (1.0 - damping) * msg[l] + damping * self.lam_out[flat][slot][l];
                    max_change = max_change.max((v - self.lam_out[flat][slot][l]).abs());
                    new_lam_out[flat][slot][l] = v;
                }
            }
        }

        // Prior-direction messages from every node to its candidate children,
        // excluding each recipient's own feedback.
        let mut new_pi_in = self.pi_in.clone();
        for node in model.nodes() {
            let flat = model.flat(node);
            let targets = model.children_of(node);
            for &(child, slot) in targets {
                let cf = model.flat(child);
                let mut msg = pi_node[flat].clone();
                for &(other, oslot) in targets {
                    if other == child && oslot == slot {
                        continue;
                    }
                    let lm = &self.lam_out[model.flat(other)][oslot];
                    for l in 0..m {
                        msg[l] *= lm[l];
                    }
                }
                normalize_or_uniform(&mut msg);
                for l in 0..m {
                    let v = (1.0 - damping) * msg[l] + damping * self.pi_in[cf][slot][l];
                    max_change = max_change.max((v - self.pi_in[cf][slot][l]).abs());
                    new_pi_in[cf][slot][l] = v;
                }
            }
        }

        self.lam_out = new_lam_out;
        self.pi_in = new_pi_in;
        max_change
    }

    fn beliefs(&self, model: &DynamicTreeModel) -> Vec<Vec<f64>> {
        let m = model.num_states();
        let mut out = Vec::with_capacity(model.num_nodes());
        for node in model.nodes() {
            let flat = model.flat(node);
            if let Some(state) = self.evidential[flat] {
                let mut v = vec![0.0; m];
                v[state] = 1.0;
                out.push(v);
                continue;
            }
            let lam = self.lambda_at(model, node);
            let mut belief = vec![1.0f64; m];
            for (slot, _) in model.incoming(node).iter().enumerate() {
                let msg = &self.pi_in[flat][slot];
                let psi = &self.psi[flat][slot];
                let mut f = vec![0.0f64; m];
                for k in 0..m {
                    let mut s = 0.0;
                    for (l, &pl) in msg.iter().enumerate() {
                        s += psi[cm(k, l, m)] * pl;
                    }
                    f[k] = s;
                }
                normalize_or_uniform(&mut f);
                for k in 0..m {
                    belief[k] *= f[k];
                }
            }
            for k in 0..m {
                belief[k] *= lam[k];
            }
            normalize_or_uniform(&mut belief);
            out.push(belief);
        }
        out
    }
}

/// Runs damped synchronous message passing until the messages stop moving
/// or the iteration budget runs out.
pub fn propagate(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    options: &LoopyOptions,
) -> Result<LoopyResult, InferenceError> {
    assert!(
        (0.0..1.0).contains(&options.damping),
        "damping must be in [0, 1)"
    );
    let mut messages = Messages::init(model, evidence);
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=options.max_iterations {
        let change = messages.step(model, options.damping);
        iterations = it;
        if change < options.message_tolerance {
            converged = true;
            break;
        }
    }
    Ok(LoopyResult { marginals: messages.beliefs(model), iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cpt, DynamicTreeModel, Evidence, MenuEntry, ParentMenu};
    use crate::tree_bp::{tree_posterior, TreeStructure};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn exact_options() -> LoopyOptions {
        LoopyOptions { damping: 0.0, max_iterations: 500, message_tolerance: 1e-12 }
    }

    fn random_singleton_model(seed: u64, layer_sizes: &[usize], m: usize) -> (DynamicTreeModel, Evidence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut menus = Vec::new();
        for d in 1..layer_sizes.len() {
            let mut layer = Vec::new();
            for _ in 0..layer_sizes[d] {
                layer.push(ParentMenu {
                    entries: vec![MenuEntry {
                        parent: NodeRef::new(d - 1, rng.gen_range(0..layer_sizes[d - 1])),
                        rho: 1.0,
                        tie: format!("layer-{d}"),
                    }],
                });
            }
            menus.push(layer);
        }
        let mut cpts = BTreeMap::new();
        for d in 1..layer_sizes.len() {
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..m).map(|_| rng.gen_range(0.1..1.0)).collect())
                .collect();
            cpts.insert(format!("layer-{d}"), Cpt::normalized_from_rows(&rows).unwrap());
        }
        let priors: Vec<Vec<f64>> = (0..layer_sizes[0])
            .map(|_| {
                let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            })
            .collect();
        let model = DynamicTreeModel::new(m, layer_sizes.to_vec(), priors, menus, cpts).unwrap();
        let states = (0..layer_sizes[layer_sizes.len() - 1])
            .map(|_| rng.gen_range(0..m))
            .collect();
        let ev = Evidence::for_model(&model, states).unwrap();
        (model, ev)
    }

    #[test]
    fn reduces_to_exact_propagation_on_fixed_trees() {
        for seed in 0..10 {
            let (model, ev) = random_singleton_model(seed, &[2, 3, 5], 3);
            let result = propagate(&model, &ev, &exact_options()).unwrap();
            assert!(result.converged, "seed {seed}");
            let tree = TreeStructure { chosen: vec![0; model.num_choosers()] };
            let exact = tree_posterior(&model, &tree, &ev).unwrap();
            for flat in 0..model.num_nodes() {
                for k in 0..model.num_states() {
                    let got = result.marginals[flat][k];
                    let want = exact.marginals[flat][k];
                    assert!(
                        (got - want).abs() < 1e-9,
                        "seed {seed} node {flat} state {k}: {got} vs {want}"
                    );
                }
            }
        }
    }

    fn two_candidate_model(seed: u64) -> (DynamicTreeModel, Evidence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 2;
        let menus = vec![vec![
            ParentMenu {
                entries: vec![
                    MenuEntry { parent: NodeRef::new(0, 0), rho: 0.6, tie: "layer-1".into() },
                    MenuEntry { parent: NodeRef::new(0, 1), rho: 0.4, tie: "layer-1".into() },
                ],
            },
            ParentMenu {
                entries: vec![
                    MenuEntry { parent: NodeRef::new(0, 1), rho: 0.7, tie: "layer-1".into() },
                    MenuEntry { parent: NodeRef::new(0, 0), rho: 0.3, tie: "layer-1".into() },
                ],
            },
        ]];
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.gen_range(0.1..1.0)).collect())
            .collect();
        let mut cpts = BTreeMap::new();
        cpts.insert("layer-1".to_string(), Cpt::normalized_from_rows(&rows).unwrap());
        let model = DynamicTreeModel::new(
            m,
            vec![2, 2],
            vec![vec![0.5, 0.5]; 2],
            menus,
            cpts,
        )
        .unwrap();
        let states = (0..2).map(|_| rng.gen_range(0..m)).collect();
        let ev = Evidence::for_model(&model, states).unwrap();
        (model, ev)
    }

    #[test]
    fn damped_steps_leave_a_fixed_point_unchanged() {
        let (model, ev) = two_candidate_model(3);
        let mut messages = Messages::init(&model, &ev);
        for _ in 0..500 {
            if messages.step(&model, 0.0) < 1e-14 {
                break;
            }
        }
        let change = messages.step(&model, 0.7);
        assert!(change < 1e-10, "fixed point moved by {change}");
    }

    #[test]
    fn fixed_point_does_not_depend_on_damping() {
        let (model, ev) = two_candidate_model(8);
        let a = propagate(&model, &ev, &exact_options()).unwrap();
        let b = propagate(
            &model,
            &ev,
            &LoopyOptions { damping: 0.5, max_iterations: 2000, message_tolerance: 1e-12 },
        )
        .unwrap();
        assert!(a.converged && b.converged);
        for (ra, rb) in a.marginals.iter().zip(&b.marginals) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beliefs_are_normalized_and_respect_evidence() {
        for seed in 0..5 {
            let (model, ev) = two_candidate_model(20 + seed);
            let result = propagate(&model, &ev, &LoopyOptions::default()).unwrap();
            for (flat, row) in result.marginals.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "seed {seed} node {flat}");
            }
            let offset = model.num_nodes() - model.layer_size(model.bottom_layer());
            for i in 0..ev.len() {
                assert_eq!(result.marginals[offset + i][ev.state_of(i)], 1.0);
            }
        }
    }

    #[test]
    fn uninformative_tables_leave_everything_uniform() {
        let menus = vec![vec![ParentMenu {
            entries: vec![
                MenuEntry { parent: NodeRef::new(0, 0), rho: 0.5, tie: "layer-1".into() },
                MenuEntry { parent: NodeRef::new(0, 1), rho: 0.5, tie: "layer-1".into() },
            ],
        }]];
        let mut cpts = BTreeMap::new();
        cpts.insert("layer-1".to_string(), Cpt::uniform(2));
        let model = DynamicTreeModel::new(
            2,
            vec![2, 1],
            vec![vec![0.5, 0.5]; 2],
            menus,
            cpts,
        )
        .unwrap();
        let ev = Evidence::for_model(&model, vec![1]).unwrap();
        let result = propagate(&model, &ev, &exact_options()).unwrap();
        assert!(result.converged);
        for flat in 0..2 {
            for k in 0..2 {
                assert!((result.marginals[flat][k] - 0.5).abs() < 1e-12);
            }
        }
    }
}
