//! Fully factored variational baseline.
//!
//! The approximating distribution is a product over nodes of independent
//! state marginals and, per node, independent menu weights. Each outer
//! iteration runs several top-down coordinate sweeps over the hidden-node
//! marginals, then one menu-weight update. Both steps are exact coordinate
//! minimizations of the factored free energy, so the recorded trace never
//! increases.
//!
//! This family is a strict subset of the structured one: taking the
//! structured tables on every edge to be copies of the child's marginal
//! reproduces the factored free energy exactly. [`embed_as_structured`]
//! performs that embedding, which is also how a factored solution can seed
//! the structured fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::InferenceError;
use crate::math::{cm, xlog_ratio};
use crate::model::{DynamicTreeModel, Evidence, NodeRef};
use crate::svi::StructuredPosterior;

#[derive(Debug, Clone)]
pub struct MfOptions {
    /// Marginal sweeps per outer iteration, before each menu update.
    pub inner_iters: usize,
    /// Upper bound on outer iterations.
    pub max_outer: usize,
    /// Convergence threshold on the free-energy change per outer iteration.
    pub tolerance: f64,
    /// Relative amplitude of the random perturbation applied to the uniform
    /// starting marginals, to break symmetric ties.
    pub init_jitter: f64,
    /// Seed for the initialization noise.
    pub seed: u64,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions { inner_iters: 20, max_outer: 50, tolerance: 0.01, init_jitter: 1e-3, seed: 0 }
    }
}

/// Factored variational state. Indexing mirrors [`StructuredPosterior`]:
/// per-node vectors are over flat ids, menu weights over menu slots with a
/// single virtual slot for top-layer nodes.
#[derive(Debug, Clone)]
pub struct MeanFieldPosterior {
    mu: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    free_energy_trace: Vec<f64>,
    evidential: Vec<Option<usize>>,
}

impl MeanFieldPosterior {
    fn init(model: &DynamicTreeModel, evidence: &Evidence, options: &MfOptions) -> Self {
        let n = model.num_nodes();
        let m = model.num_states();
        let bottom = model.bottom_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

        let mut evidential = vec![None; n];
        for i in 0..model.layer_size(bottom) {
            evidential[model.flat(NodeRef::new(bottom, i))] = Some(evidence.state_of(i));
        }

        let mut mu = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        for node in model.nodes() {
            let flat = model.flat(node);
            mu.push(if node.layer == 0 {
                vec![1.0]
            } else {
                model.menu(node).expect("below top").rhos()
            });
            match evidential[flat] {
                Some(state) => {
                    let mut one_hot = vec![0.0; m];
                    one_hot[state] = 1.0;
                    means.push(one_hot);
                }
                None => {
                    let mut v: Vec<f64> =
                        (0..m).map(|_| 1.0 + options.init_jitter * rng.gen::<f64>()).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    means.push(v);
                }
            }
        }

        MeanFieldPosterior { mu, means, free_energy_trace: Vec::new(), evidential }
    }

    pub fn mu(&self) -> &[Vec<f64>] {
        &self.mu
    }

    /// Posterior state marginals per node (observed nodes are point masses).
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn free_energy_trace(&self) -> &[f64] {
        &self.free_energy_trace
    }

    pub fn is_evidential(&self, flat: usize) -> bool {
        self.evidential[flat].is_some()
    }

    /// One top-down coordinate sweep over the hidden-node marginals. Each
    /// node is set to the exact minimizer of the free energy given all other
    /// factors, combining log-table votes from its candidate parents and its
    /// candidate children.
    fn sweep_means(&mut self, model: &DynamicTreeModel) -> Result<(), InferenceError> {
        let m = model.num_states();
        for node in model.nodes() {
            let flat = model.flat(node);
            if self.evidential[flat].is_some() {
                continue;
            }
            let mut logits = vec![0.0f64; m];
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let w = self.mu[flat][slot];
                if w == 0.0 {
                    continue;
                }
                let pmean: &[f64] = match inc.parent {
                    Some(parent) => &self.means[model.flat(parent)],
                    None => &[1.0],
                };
                for k in 0..m {
                    let mut vote = 0.0;
                    for (l, &ml) in pmean.iter().enumerate() {
                        if ml == 0.0 {
                            continue;
                        }
                        let p = inc.cpt.p(k, l);
                        if p > 0.0 {
                            vote += ml * p.ln();
                        } else {
                            vote = f64::NEG_INFINITY;
                            break;
                        }
                    }
                    logits[k] += w * vote;
                }
            }
            for &(child, slot) in model.children_of(node) {
                let cf = model.flat(child);
                let w = self.mu[cf][slot];
                if w == 0.0 {
                    continue;
                }
                let cpt = model.cpt_view(child, slot);
                let cmean = &self.means[cf];
                for k in 0..m {
                    let mut vote = 0.0;
                    for (g, &mg) in cmean.iter().enumerate() {
                        if mg == 0.0 {
                            continue;
                        }
                        let p = cpt.p(g, k);
                        if p > 0.0 {
                            vote += mg * p.ln();
                        } else {
                            vote = f64::NEG_INFINITY;
                            break;
                        }
                    }
                    logits[k] += w * vote;
                }
            }
            let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi == f64::NEG_INFINITY {
                return Err(InferenceError::DegenerateState { node });
            }
            let mut sum = 0.0;
            for k in 0..m {
                self.means[flat][k] = (logits[k] - hi).exp();
                sum += self.means[flat][k];
            }
            for k in 0..m {
                self.means[flat][k] /= sum;
            }
        }
        Ok(())
    }

    /// Menu-weight update: exact minimization given the current marginals.
    fn update_mu(&mut self, model: &DynamicTreeModel) -> Result<(), InferenceError> {
        for d in 1..model.num_layers() {
            for i in 0..model.layer_size(d) {
                let node = NodeRef::new(d, i);
                let flat = model.flat(node);
                let slots = model.incoming(node);
                let mut weights = Vec::with_capacity(slots.len());
                for inc in &slots {
                    if inc.rho == 0.0 {
                        weights.push(f64::NEG_INFINITY);
                        continue;
                    }
                    let parent = inc.parent.expect("below top layer");
                    let pmean = &self.means[model.flat(parent)];
                    let mut w = inc.rho.ln();
                    'outer: for (l, &ml) in pmean.iter().enumerate() {
                        if ml == 0.0 {
                            continue;
                        }
                        for (k, &mk) in self.means[flat].iter().enumerate() {
                            if mk == 0.0 {
                                continue;
                            }
                            let p = inc.cpt.p(k, l);
                            if p > 0.0 {
                                w += ml * mk * p.ln();
                            } else {
                                w = f64::NEG_INFINITY;
                                break 'outer;
                            }
                        }
                    }
                    weights.push(w);
                }
                let hi = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi == f64::NEG_INFINITY {
                    return Err(InferenceError::DegenerateMenu { node });
                }
                let mut new: Vec<f64> = weights.iter().map(|&w| (w - hi).exp()).collect();
                let sum: f64 = new.iter().sum();
                for v in new.iter_mut() {
                    *v /= sum;
                }
                self.mu[flat] = new;
            }
        }
        Ok(())
    }

    /// Factored free energy: menu-weight divergence from the structural
    /// priors, state entropies of the hidden nodes, minus the expected
    /// log tables over all candidate edges. Plus infinity when the state
    /// puts mass where the model has none.
    pub fn free_energy(&self, model: &DynamicTreeModel) -> f64 {
        let mut f = 0.0;
        for node in model.nodes() {
            let flat = model.flat(node);
            if self.evidential[flat].is_none() {
                for &v in &self.means[flat] {
                    if v > 0.0 {
                        f += v * v.ln();
                    }
                }
            }
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let w = self.mu[flat][slot];
                if node.layer > 0 {
                    f += xlog_ratio(w, inc.rho);
                }
                if w == 0.0 {
                    continue;
                }
                let pmean: &[f64] = match inc.parent {
                    Some(parent) => &self.means[model.flat(parent)],
                    None => &[1.0],
                };
                for (l, &ml) in pmean.iter().enumerate() {
                    if ml == 0.0 {
                        continue;
                    }
                    for (k, &mk) in self.means[flat].iter().enumerate() {
                        if mk == 0.0 {
                            continue;
                        }
                        let p = inc.cpt.p(k, l);
                        if p > 0.0 {
                            f -= w * ml * mk * p.ln();
                        } else {
                            return f64::INFINITY;
                        }
                    }
                }
            }
        }
        f
    }

    /// Lifts this factored state into the structured family: every edge
    /// table becomes a stack of copies of the child's marginal, menu weights
    /// and marginals carry over. The structured free energy of the result
    /// equals [`free_energy`] exactly.
    pub fn embed_as_structured(
        &self,
        model: &DynamicTreeModel,
        evidence: &Evidence,
    ) -> StructuredPosterior {
        let m = model.num_states();
        let mut state = StructuredPosterior::init(model, evidence);
        for node in model.nodes() {
            let flat = model.flat(node);
            state.mu[flat] = self.mu[flat].clone();
            state.means[flat] = self.means[flat].clone();
            if self.evidential[flat].is_some() {
                continue;
            }
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let ps = inc.cpt.parent_states();
                let q = &mut state.q_tables[flat][slot];
                for l in 0..ps {
                    for k in 0..m {
                        q[cm(k, l, m)] = self.means[flat][k];
                    }
                }
            }
        }
        state
    }
}

/// Runs the factored fit: jittered uniform start, `inner_iters` marginal
/// sweeps then a menu update per outer iteration, free energy recorded after
/// each menu update.
pub fn fit(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    options: &MfOptions,
) -> Result<MeanFieldPosterior, InferenceError> {
    assert!(options.max_outer >= 1, "max_outer must be at least 1");
    assert!(options.inner_iters >= 1, "inner_iters must be at least 1");
    let mut state = MeanFieldPosterior::init(model, evidence, options);
    let mut prev: Option<f64> = None;
    for _ in 0..options.max_outer {
        for _ in 0..options.inner_iters {
            state.sweep_means(model)?;
        }
        state.update_mu(model)?;
        let f = state.free_energy(model);
        state.free_energy_trace.push(f);
        if let Some(pf) = prev {
            if (pf - f).abs() < options.tolerance {
                break;
            }
        }
        prev = Some(f);
    }
    Ok(state)
}
