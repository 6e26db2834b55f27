//! Structured variational inference over trees and hidden states jointly.
//!
//! The approximating family keeps a full distribution over parent choices
//! (factored per node as menu weights `mu`) and, per candidate edge, a
//! column-stochastic table `Q` playing the role of the conditional on that
//! edge. Hidden-node marginals (`means`) follow from `mu` and `Q` by a
//! downward sweep, so they are derived quantities, not free parameters.
//!
//! One outer pass runs: an upward lambda sweep collecting the influence of
//! everything below each node, the closed-form `Q` update, then a downward
//! sweep that alternates per layer between refreshing the menu weights from
//! the just-updated parent means and propagating the means onward through
//! the refreshed weights. Given fixed menu weights the lambda and `Q` sweeps
//! minimize the free energy over all tables exactly in one pass; each menu
//! refresh is an exact per-node coordinate step fed by the freshest means
//! available, which is what lets short pass budgets converge. Free energy is
//! recorded once per pass at the end of the downward sweep, where weights,
//! tables and means agree with each other.
//!
//! Evidence enters through degenerate edges: an observed node's lambda is a
//! point mass and its `Q` tables are frozen with the observed row set to one,
//! which makes every formula below apply unchanged to observed nodes.

use std::collections::BTreeMap;

use crate::error::InferenceError;
use crate::math::{cm, xlog_ratio};
use crate::model::{Cpt, DynamicTreeModel, Evidence, NodeRef, TreeStructure};

/// Outer-loop controls for [`fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Upper bound on outer passes. The default is effectively unlimited;
    /// experiment drivers pass small explicit budgets instead.
    pub max_passes: usize,
    /// Convergence threshold on the absolute free-energy change per pass.
    pub kl_tolerance: f64,
    /// Convex blend weight kept on the previous menu weights (0 = plain
    /// update). Available as an escape hatch against oscillation.
    pub mu_damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_passes: usize::MAX, kl_tolerance: 0.01, mu_damping: 0.0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SviDiagnostics {
    /// Q columns that lost all mass and were reset to uniform.
    pub zero_q_columns: usize,
    /// Passes whose recorded free energy rose by more than 1e-9, with the rise.
    pub non_monotone_steps: Vec<(usize, f64)>,
}

/// Variational state over one model and evidence set.
///
/// All per-node vectors are indexed by flat node id. Top-layer nodes carry a
/// single virtual-root slot (menu weight 1, table column = root prior), so
/// every node has at least one incoming slot.
#[derive(Debug, Clone)]
pub struct StructuredPosterior {
    pub(crate) mu: Vec<Vec<f64>>,
    /// `q_tables[flat][slot]` is column-major `m x parent_states`.
    pub(crate) q_tables: Vec<Vec<Vec<f64>>>,
    /// Max-normalized lambda per node; true lambda is `lambdas * exp(scale)`.
    pub(crate) lambdas: Vec<Vec<f64>>,
    pub(crate) lambda_scales: Vec<f64>,
    pub(crate) means: Vec<Vec<f64>>,
    pub(crate) free_energy_trace: Vec<f64>,
    pub(crate) evidential: Vec<Option<usize>>,
    pub(crate) diagnostics: SviDiagnostics,
}

impl StructuredPosterior {
    /// Fresh state: menu weights at the prior, observed nodes clamped
    /// (point-mass lambda and means, frozen degenerate Q), hidden tables
    /// initialized at the model's own tables.
    pub fn init(model: &DynamicTreeModel, evidence: &Evidence) -> StructuredPosterior {
        let n = model.num_nodes();
        let m = model.num_states();
        let bottom = model.bottom_layer();

        let mut evidential = vec![None; n];
        for i in 0..model.layer_size(bottom) {
            evidential[model.flat(NodeRef::new(bottom, i))] = Some(evidence.state_of(i));
        }

        let mut mu = Vec::with_capacity(n);
        let mut q_tables = Vec::with_capacity(n);
        let mut lambdas = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        for node in model.nodes() {
            let flat = model.flat(node);
            let slots = model.incoming(node);
            mu.push(if node.layer == 0 {
                vec![1.0]
            } else {
                slots.iter().map(|s| s.rho).collect()
            });
            let tables: Vec<Vec<f64>> = slots
                .iter()
                .map(|s| {
                    let ps = s.cpt.parent_states();
                    match evidential[flat] {
                        Some(state) => {
                            let mut q = vec![0.0; m * ps];
                            for l in 0..ps {
                                q[cm(state, l, m)] = 1.0;
                            }
                            q
                        }
                        None => (0..ps).flat_map(|l| s.cpt.column(l).to_vec()).collect(),
                    }
                })
                .collect();
            q_tables.push(tables);
            match evidential[flat] {
                Some(state) => {
                    let mut one_hot = vec![0.0; m];
                    one_hot[state] = 1.0;
                    lambdas.push(one_hot.clone());
                    means.push(one_hot);
                }
                None => {
                    lambdas.push(vec![1.0; m]);
                    means.push(vec![1.0 / m as f64; m]);
                }
            }
        }

        StructuredPosterior {
            mu,
            q_tables,
            lambdas,
            lambda_scales: vec![0.0; n],
            means,
            free_energy_trace: Vec::new(),
            evidential,
            diagnostics: SviDiagnostics::default(),
        }
    }

    pub fn mu(&self) -> &[Vec<f64>] {
        &self.mu
    }

    pub fn q_table(&self, flat: usize, slot: usize) -> &[f64] {
        &self.q_tables[flat][slot]
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

    pub fn diagnostics(&self) -> &SviDiagnostics {
        &self.diagnostics
    }

    pub fn is_evidential(&self, flat: usize) -> bool {
        self.evidential[flat].is_some()
    }

    /// True log lambda of a node, scale folded back in.
    pub fn log_lambda(&self, flat: usize) -> Vec<f64> {
        self.lambdas[flat]
            .iter()
            .map(|&v| v.ln() + self.lambda_scales[flat])
            .collect()
    }

    /// Upward sweep: recomputes lambda for every hidden node from the layer
    /// above the evidence to the top. Each node is max-normalized with the
    /// log factor kept in `lambda_scales`; all consumers are scale-invariant.
    pub fn lambda_pass(&mut self, model: &DynamicTreeModel) -> Result<(), InferenceError> {
        let m = model.num_states();
        for d in (0..model.num_layers()).rev() {
            for i in 0..model.layer_size(d) {
                let node = NodeRef::new(d, i);
                let flat = model.flat(node);
                if self.evidential[flat].is_some() {
                    continue;
                }
                let mut log_lam = vec![0.0f64; m];
                for &(child, slot) in model.children_of(node) {
                    let cf = model.flat(child);
                    let w = self.mu[cf][slot];
                    if w == 0.0 {
                        continue;
                    }
                    let cpt = model.cpt_view(child, slot);
                    let mut any_positive = false;
                    for k in 0..m {
                        let mut bracket = 0.0;
                        for g in 0..m {
                            bracket += cpt.p(g, k) * self.lambdas[cf][g];
                        }
                        if bracket > 0.0 {
                            any_positive = true;
                            log_lam[k] += w * (bracket.ln() + self.lambda_scales[cf]);
                        } else {
                            log_lam[k] = f64::NEG_INFINITY;
                        }
                    }
                    if !any_positive {
                        return Err(InferenceError::ZeroBracket { node: child });
                    }
                }
                let hi = log_lam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi == f64::NEG_INFINITY {
                    return Err(InferenceError::ZeroBracket { node });
                }
                for k in 0..m {
                    self.lambdas[flat][k] = (log_lam[k] - hi).exp();
                }
                self.lambda_scales[flat] = hi;
            }
        }
        Ok(())
    }

    /// Closed-form table update from the current lambdas. A column whose
    /// normalizer vanishes is reset to uniform and counted in diagnostics.
    pub fn q_update(&mut self, model: &DynamicTreeModel) {
        let m = model.num_states();
        for node in model.nodes() {
            let flat = model.flat(node);
            if self.evidential[flat].is_some() {
                continue;
            }
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let ps = inc.cpt.parent_states();
                let q = &mut self.q_tables[flat][slot];
                for l in 0..ps {
                    let mut den = 0.0;
                    for k in 0..m {
                        den += inc.cpt.p(k, l) * self.lambdas[flat][k];
                    }
                    if den > 0.0 {
                        for k in 0..m {
                            q[cm(k, l, m)] = inc.cpt.p(k, l) * self.lambdas[flat][k] / den;
                        }
                    } else {
                        for k in 0..m {
                            q[cm(k, l, m)] = 1.0 / m as f64;
                        }
                        self.diagnostics.zero_q_columns += 1;
                    }
                }
            }
        }
    }

    /// Downward sweep deriving hidden-node marginals from `mu` and `Q`.
    pub fn means_pass(&mut self, model: &DynamicTreeModel) {
        for d in 0..model.num_layers() {
            self.means_layer(model, d);
        }
    }

    /// Marginals for one layer from its menu weights, tables and the means
    /// of the layer above.
    fn means_layer(&mut self, model: &DynamicTreeModel, d: usize) {
        let m = model.num_states();
        for i in 0..model.layer_size(d) {
            let node = NodeRef::new(d, i);
            let flat = model.flat(node);
            if self.evidential[flat].is_some() {
                continue;
            }
            let mut mean = vec![0.0f64; m];
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let w = self.mu[flat][slot];
                if w == 0.0 {
                    continue;
                }
                let q = &self.q_tables[flat][slot];
                match inc.parent {
                    Some(parent) => {
                        let pmean = &self.means[model.flat(parent)];
                        for (l, &ml) in pmean.iter().enumerate() {
                            if ml == 0.0 {
                                continue;
                            }
                            for k in 0..m {
                                mean[k] += w * ml * q[cm(k, l, m)];
                            }
                        }
                    }
                    None => {
                        for k in 0..m {
                            mean[k] += w * q[cm(k, 0, m)];
                        }
                    }
                }
            }
            self.means[flat] = mean;
        }
    }

    /// Menu-weight update from the current lambdas and parent means.
    /// `damping` keeps that fraction of the previous weights.
    pub fn mu_update(
        &mut self,
        model: &DynamicTreeModel,
        damping: f64,
    ) -> Result<(), InferenceError> {
        assert!((0.0..1.0).contains(&damping), "damping must be in [0, 1)");
        for d in 1..model.num_layers() {
            self.mu_layer(model, d, damping)?;
        }
        Ok(())
    }

    /// Menu-weight update for one layer.
    fn mu_layer(
        &mut self,
        model: &DynamicTreeModel,
        d: usize,
        damping: f64,
    ) -> Result<(), InferenceError> {
        let m = model.num_states();
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
                for (l, &ml) in pmean.iter().enumerate() {
                    if ml == 0.0 {
                        continue;
                    }
                    let mut bracket = 0.0;
                    for k in 0..m {
                        bracket += inc.cpt.p(k, l) * self.lambdas[flat][k];
                    }
                    if bracket > 0.0 {
                        w += ml * bracket.ln();
                    } else {
                        w = f64::NEG_INFINITY;
                        break;
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
            for (slot, v) in new.into_iter().enumerate() {
                self.mu[flat][slot] = (1.0 - damping) * v + damping * self.mu[flat][slot];
            }
        }
        Ok(())
    }

    /// Interleaved downward sweep: per layer, refresh the menu weights from
    /// the freshly propagated parent means, then propagate the means through
    /// the refreshed weights. One such sweep plus an upward lambda pass is a
    /// full update of every variational parameter.
    fn descend(
        &mut self,
        model: &DynamicTreeModel,
        damping: f64,
    ) -> Result<(), InferenceError> {
        self.means_layer(model, 0);
        for d in 1..model.num_layers() {
            self.mu_layer(model, d, damping)?;
            self.means_layer(model, d);
        }
        Ok(())
    }

    /// Variational free energy of the current state: the structural
    /// divergence of the menu weights plus the per-edge table divergences
    /// weighted by menu weight and parent means. Plus infinity when the
    /// state puts mass where the model has none.
    pub fn free_energy(&self, model: &DynamicTreeModel) -> f64 {
        let m = model.num_states();
        let mut f = 0.0;
        for node in model.nodes() {
            let flat = model.flat(node);
            for (slot, inc) in model.incoming(node).iter().enumerate() {
                let w = self.mu[flat][slot];
                if node.layer > 0 {
                    f += xlog_ratio(w, inc.rho);
                }
                if w == 0.0 {
                    continue;
                }
                let q = &self.q_tables[flat][slot];
                let ps = inc.cpt.parent_states();
                for l in 0..ps {
                    let ml = match inc.parent {
                        Some(parent) => self.means[model.flat(parent)][l],
                        None => 1.0,
                    };
                    if ml == 0.0 {
                        continue;
                    }
                    let mut edge = 0.0;
                    for k in 0..m {
                        edge += xlog_ratio(q[cm(k, l, m)], inc.cpt.p(k, l));
                    }
                    f += w * ml * edge;
                }
            }
        }
        f
    }

    /// Most probable tree under the menu weights, ties to the lowest slot.
    pub fn map_tree(&self, model: &DynamicTreeModel) -> TreeStructure {
        let mut chosen = Vec::with_capacity(model.num_choosers());
        for c in 0..model.num_choosers() {
            let flat = model.flat(model.chooser_node(c));
            let row = &self.mu[flat];
            let mut best = 0;
            for (slot, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = slot;
                }
            }
            chosen.push(best);
        }
        TreeStructure { chosen }
    }

    /// Adds this state's expected sufficient statistics to `counts`.
    pub fn accumulate_counts(&self, model: &DynamicTreeModel, counts: &mut EmCounts) {
        let m = model.num_states();
        for d in 1..model.num_layers() {
            for i in 0..model.layer_size(d) {
                let node = NodeRef::new(d, i);
                let flat = model.flat(node);
                let chooser = model.chooser_index(node);
                let menu = model.menu(node).expect("below top layer");
                for (slot, entry) in menu.entries.iter().enumerate() {
                    let w = self.mu[flat][slot];
                    counts.rho[chooser][slot] += w;
                    if w == 0.0 {
                        continue;
                    }
                    let pmean = &self.means[model.flat(entry.parent)];
                    let q = &self.q_tables[flat][slot];
                    let table = counts.cpt.get_mut(&entry.tie).expect("class exists");
                    for (l, &ml) in pmean.iter().enumerate() {
                        if ml == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            table[cm(k, l, m)] += w * ml * q[cm(k, l, m)];
                        }
                    }
                }
            }
        }
    }
}

/// Runs the fit from the prior initialization.
pub fn fit(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    options: &FitOptions,
) -> Result<StructuredPosterior, InferenceError> {
    fit_from(model, evidence, None, options)
}

/// Runs the fit from explicit initial menu weights (indexed by flat node id,
/// as produced by [`StructuredPosterior::mu`]).
pub fn fit_from(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    initial_mu: Option<&[Vec<f64>]>,
    options: &FitOptions,
) -> Result<StructuredPosterior, InferenceError> {
    assert!(options.max_passes >= 1, "max_passes must be at least 1");
    let mut state = StructuredPosterior::init(model, evidence);
    if let Some(mu0) = initial_mu {
        assert_eq!(mu0.len(), state.mu.len(), "initial mu shape mismatch");
        for (row, src) in state.mu.iter_mut().zip(mu0) {
            assert_eq!(row.len(), src.len(), "initial mu menu width mismatch");
            row.copy_from_slice(src);
        }
    }

    let mut prev: Option<f64> = None;
    for pass in 1..=options.max_passes {
        state.lambda_pass(model)?;
        state.q_update(model);
        state.descend(model, options.mu_damping)?;
        let f = state.free_energy(model);
        if let Some(pf) = prev {
            if f > pf + 1e-9 {
                state.diagnostics.non_monotone_steps.push((pass, f - pf));
            }
        }
        state.free_energy_trace.push(f);
        if let Some(pf) = prev {
            if (pf - f).abs() < options.kl_tolerance {
                break;
            }
        }
        prev = Some(f);
    }
    Ok(state)
}

/// Expected sufficient statistics for one EM step: per tie class a
/// column-major state-count table, per chooser the expected menu usage.
#[derive(Debug, Clone)]
pub struct EmCounts {
    pub cpt: BTreeMap<String, Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
}

impl EmCounts {
    pub fn zeros(model: &DynamicTreeModel) -> EmCounts {
        let m = model.num_states();
        let cpt = model
            .cpts()
            .keys()
            .map(|class| (class.clone(), vec![0.0; m * m]))
            .collect();
        let rho = (0..model.num_choosers())
            .map(|c| vec![0.0; model.menu(model.chooser_node(c)).expect("chooser").len()])
            .collect();
        EmCounts { cpt, rho }
    }
}

/// Maximization step: columnwise renormalization of the count tables per tie
/// class and of the menu usage per chooser. Columns or menus with no mass
/// keep their previous values.
pub fn m_step(
    model: &DynamicTreeModel,
    counts: &EmCounts,
    smoothing: f64,
) -> Result<DynamicTreeModel, InferenceError> {
    let m = model.num_states();
    let mut new_cpts = BTreeMap::new();
    for (class, old) in model.cpts() {
        let table = match counts.cpt.get(class) {
            Some(t) => t,
            None => {
                new_cpts.insert(class.clone(), old.clone());
                continue;
            }
        };
        let mut rows = vec![vec![0.0f64; m]; m];
        for l in 0..m {
            let col_sum: f64 = (0..m).map(|k| table[cm(k, l, m)] + smoothing).sum();
            for k in 0..m {
                rows[k][l] = if col_sum > 0.0 {
                    (table[cm(k, l, m)] + smoothing) / col_sum
                } else {
                    old.p(k, l)
                };
            }
        }
        new_cpts.insert(class.clone(), Cpt::from_rows(&rows).expect("square"));
    }

    let mut new_rhos = Vec::with_capacity(model.num_choosers());
    for (c, row) in counts.rho.iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v + smoothing).sum();
        if sum > 0.0 {
            new_rhos.push(row.iter().map(|v| (v + smoothing) / sum).collect());
        } else {
            new_rhos.push(model.menu(model.chooser_node(c)).expect("chooser").rhos());
        }
    }

    Ok(model.replace_parameters(new_cpts, Some(&new_rhos))?)
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub iterations: usize,
    /// Additive count smoothing applied in the M step.
    pub smoothing: f64,
    pub fit: FitOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            iterations: 5,
            smoothing: 0.0,
            fit: FitOptions { max_passes: 20, kl_tolerance: 1e-6, mu_damping: 0.0 },
        }
    }
}

/// Variational EM over a dataset of evidence cases. Returns the updated
/// model and the total free energy measured at each iteration's E step.
/// Per-case menu weights warm-start the next iteration's fits, which keeps
/// the trace non-increasing.
pub fn em_fit(
    model: &DynamicTreeModel,
    cases: &[Evidence],
    options: &EmOptions,
) -> Result<(DynamicTreeModel, Vec<f64>), InferenceError> {
    if cases.is_empty() {
        return Err(InferenceError::EmptyDataset);
    }
    let mut current = model.clone();
    let mut warm: Vec<Option<Vec<Vec<f64>>>> = vec![None; cases.len()];
    let mut trace = Vec::with_capacity(options.iterations);
    for _ in 0..options.iterations {
        let mut counts = EmCounts::zeros(&current);
        let mut total_f = 0.0;
        for (ci, evidence) in cases.iter().enumerate() {
            let state = fit_from(&current, evidence, warm[ci].as_deref(), &options.fit)?;
            total_f += *state.free_energy_trace().last().expect("at least one pass");
            state.accumulate_counts(&current, &mut counts);
            warm[ci] = Some(state.mu.clone());
        }
        trace.push(total_f);
        current = m_step(&current, &counts, options.smoothing)?;
    }
    Ok((current, trace))
}
