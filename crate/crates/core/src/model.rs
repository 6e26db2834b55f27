//! The dynamic-tree generative model.
//!
//! Nodes live in layers; layer 0 is the top. Every node below the top picks
//! one parent from a menu of candidates in the layer directly above, entry
//! `j` with prior probability `rho_j`. A joint parent choice `Z` selects one
//! tree out of the mixture; states then propagate root-to-leaf through
//! column-stochastic conditional tables attached to the chosen edges.
//!
//! Top-layer nodes are handled through a virtual root: a single node with one
//! state whose outgoing table column is the node's root prior. [`DynamicTreeModel::incoming`]
//! presents that convention uniformly, so the propagation code never special
//! cases the top layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;

use crate::error::{ModelError, ValidationIssue};
use crate::math::{cm, normalize, PROB_TOL};

/// Identifies a node by layer (0 = top) and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub layer: usize,
    pub index: usize,
}

impl NodeRef {
    pub fn new(layer: usize, index: usize) -> Self {
        NodeRef { layer, index }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

/// Column-stochastic conditional probability table. Entry `(k, l)` is the
/// probability of the child taking state `k` given the parent in state `l`.
/// Stored column-major so a parent-state column is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpt {
    child_states: usize,
    parent_states: usize,
    data: Vec<f64>,
}

impl Cpt {
    /// Builds a table from row-major rows: `rows[k][l] = P(child k | parent l)`.
    /// Checks shape only; stochasticity is checked by model validation.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Cpt, ModelError> {
        let child_states = rows.len();
        if child_states == 0 {
            return Err(ModelError::Invalid(vec![ValidationIssue {
                location: "cpt".into(),
                problem: "no rows".into(),
            }]));
        }
        let parent_states = rows[0].len();
        if parent_states == 0 || rows.iter().any(|r| r.len() != parent_states) {
            return Err(ModelError::Invalid(vec![ValidationIssue {
                location: "cpt".into(),
                problem: "ragged or empty rows".into(),
            }]));
        }
        let mut data = vec![0.0; child_states * parent_states];
        for (k, row) in rows.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                data[cm(k, l, child_states)] = v;
            }
        }
        Ok(Cpt { child_states, parent_states, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.child_states)
            .map(|k| (0..self.parent_states).map(|l| self.p(k, l)).collect())
            .collect()
    }

    pub fn identity(m: usize) -> Cpt {
        let mut data = vec![0.0; m * m];
        for k in 0..m {
            data[cm(k, k, m)] = 1.0;
        }
        Cpt { child_states: m, parent_states: m, data }
    }

    pub fn uniform(m: usize) -> Cpt {
        Cpt { child_states: m, parent_states: m, data: vec![1.0 / m as f64; m * m] }
    }

    /// Square table with `diag` on the diagonal and the remainder spread
    /// evenly over the other states of each column.
    pub fn diagonal(m: usize, diag: f64) -> Cpt {
        let off = (1.0 - diag) / (m as f64 - 1.0);
        let mut data = vec![off; m * m];
        for k in 0..m {
            data[cm(k, k, m)] = diag;
        }
        Cpt { child_states: m, parent_states: m, data }
    }

    /// Explicitly renormalizes each column of a raw non-negative matrix.
    pub fn normalized_from_rows(rows: &[Vec<f64>]) -> Result<Cpt, ModelError> {
        let mut cpt = Cpt::from_rows(rows)?;
        for l in 0..cpt.parent_states {
            let col = &mut cpt.data[l * cpt.child_states..(l + 1) * cpt.child_states];
            normalize(col);
        }
        Ok(cpt)
    }

    #[inline]
    pub fn p(&self, k: usize, l: usize) -> f64 {
        self.data[cm(k, l, self.child_states)]
    }

    pub fn column(&self, l: usize) -> &[f64] {
        &self.data[l * self.child_states..(l + 1) * self.child_states]
    }

    pub fn child_states(&self) -> usize {
        self.child_states
    }

    pub fn parent_states(&self) -> usize {
        self.parent_states
    }

    pub fn view(&self) -> CptView<'_> {
        CptView {
            child_states: self.child_states,
            parent_states: self.parent_states,
            data: &self.data,
        }
    }
}

/// Strong-diagonal table: columns of `3I + R` normalized, `R` a supplied
/// non-negative noise matrix in row-major order.
pub fn strong_diagonal_cpt_from_noise(num_states: usize, noise_rows: &[Vec<f64>]) -> Cpt {
    assert_eq!(noise_rows.len(), num_states);
    let mut rows: Vec<Vec<f64>> = noise_rows.to_vec();
    for (k, row) in rows.iter_mut().enumerate() {
        assert_eq!(row.len(), num_states);
        row[k] += 3.0;
    }
    Cpt::normalized_from_rows(&rows).expect("shape checked above")
}

/// Strong-diagonal table with uniform(0,1) noise drawn from `rng`.
pub fn random_strong_diagonal_cpt(num_states: usize, rng: &mut impl Rng) -> Cpt {
    let rows: Vec<Vec<f64>> = (0..num_states)
        .map(|_| (0..num_states).map(|_| rng.gen::<f64>()).collect())
        .collect();
    strong_diagonal_cpt_from_noise(num_states, &rows)
}

/// Normalized Gaussian decay over horizontal distance from a child to each
/// candidate parent position.
pub fn gaussian_parent_prior(child_pos: f64, candidate_pos: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    assert!(!candidate_pos.is_empty());
    let mut w: Vec<f64> = candidate_pos
        .iter()
        .map(|&p| {
            let d = p - child_pos;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    normalize(&mut w);
    w
}

/// One candidate parent in a menu, with its prior choice probability and the
/// tie class naming the conditional table used on that edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MenuEntry {
    pub parent: NodeRef,
    pub rho: f64,
    pub tie: String,
}

/// The menu of candidate parents of one node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParentMenu {
    pub entries: Vec<MenuEntry>,
}

impl ParentMenu {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.rho).collect()
    }
}

/// A joint parent choice: for each node below the top layer (in flat order,
/// layer-major), the index of the chosen menu entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeStructure {
    pub chosen: Vec<usize>,
}

/// A full configuration: a tree plus one state per node (flat order).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub tree: TreeStructure,
    pub states: Vec<usize>,
}

/// Observed states for every bottom-layer node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    states: Vec<usize>,
}

impl Evidence {
    /// Validates that `states` covers every bottom-layer node of `model`
    /// exactly once with in-range state indices.
    pub fn for_model(model: &DynamicTreeModel, states: Vec<usize>) -> Result<Evidence, ModelError> {
        let want = model.layer_size(model.bottom_layer());
        if states.len() != want {
            return Err(ModelError::BadEvidence(format!(
                "expected {} leaf states, got {}",
                want,
                states.len()
            )));
        }
        if let Some((i, &s)) = states.iter().enumerate().find(|(_, &s)| s >= model.num_states()) {
            return Err(ModelError::BadEvidence(format!(
                "leaf {} has state {} but the model has {} states",
                i,
                s,
                model.num_states()
            )));
        }
        Ok(Evidence { states })
    }

    pub fn state_of(&self, leaf_index: usize) -> usize {
        self.states[leaf_index]
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Borrowed view of a conditional table; also used to present a root prior
/// as the single column of a virtual-root edge.
#[derive(Debug, Clone, Copy)]
pub struct CptView<'a> {
    child_states: usize,
    parent_states: usize,
    data: &'a [f64],
}

impl<'a> CptView<'a> {
    #[inline]
    pub fn p(&self, k: usize, l: usize) -> f64 {
        self.data[cm(k, l, self.child_states)]
    }

    pub fn column(&self, l: usize) -> &'a [f64] {
        &self.data[l * self.child_states..(l + 1) * self.child_states]
    }

    pub fn child_states(&self) -> usize {
        self.child_states
    }

    pub fn parent_states(&self) -> usize {
        self.parent_states
    }
}

/// One incoming edge slot of a node: the candidate parent (`None` for the
/// virtual root above the top layer), the choice prior, and the table.
#[derive(Debug, Clone, Copy)]
pub struct IncomingSlot<'a> {
    pub parent: Option<NodeRef>,
    pub rho: f64,
    pub cpt: CptView<'a>,
}

#[derive(Debug, Clone)]
pub struct DynamicTreeModel {
    num_states: usize,
    layer_sizes: Vec<usize>,
    /// Horizontal position per node, uniform spacing spanning the unit interval.
    positions: Vec<Vec<f64>>,
    root_priors: Vec<Vec<f64>>,
    /// `menus[d][i]` is the menu of node `(d + 1, i)`.
    menus: Vec<Vec<ParentMenu>>,
    cpts: BTreeMap<String, Cpt>,
    // Derived lookups, rebuilt on construction.
    layer_offsets: Vec<usize>,
    children: Vec<Vec<(NodeRef, usize)>>,
}

impl PartialEq for DynamicTreeModel {
    fn eq(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.layer_sizes == other.layer_sizes
            && self.root_priors == other.root_priors
            && self.menus == other.menus
            && self.cpts == other.cpts
    }
}

impl DynamicTreeModel {
    /// Assembles and validates a model. `menus[d][i]` must be the menu of
    /// node `(d + 1, i)`; positions are laid out uniformly per layer.
    pub fn new(
        num_states: usize,
        layer_sizes: Vec<usize>,
        root_priors: Vec<Vec<f64>>,
        menus: Vec<Vec<ParentMenu>>,
        cpts: BTreeMap<String, Cpt>,
    ) -> Result<Self, ModelError> {
        if num_states < 2 {
            return Err(ModelError::BadStateCount(num_states));
        }
        if layer_sizes.is_empty() || layer_sizes.contains(&0) {
            return Err(ModelError::BadLayerSizes);
        }
        let positions = uniform_positions(&layer_sizes);
        let mut offsets = Vec::with_capacity(layer_sizes.len());
        let mut acc = 0;
        for &s in &layer_sizes {
            offsets.push(acc);
            acc += s;
        }
        let mut model = DynamicTreeModel {
            num_states,
            layer_sizes,
            positions,
            root_priors,
            menus,
            cpts,
            layer_offsets: offsets,
            children: Vec::new(),
        };
        let issues = model.validate();
        if !issues.is_empty() {
            return Err(ModelError::Invalid(issues));
        }
        model.rebuild_children();
        Ok(model)
    }

    fn rebuild_children(&mut self) {
        let mut children = vec![Vec::new(); self.num_nodes()];
        for d in 1..self.num_layers() {
            for i in 0..self.layer_size(d) {
                let child = NodeRef::new(d, i);
                for (slot, entry) in self.menus[d - 1][i].entries.iter().enumerate() {
                    children[self.flat(entry.parent)].push((child, slot));
                }
            }
        }
        self.children = children;
    }

    /// Checks every structural invariant and reports all violations found;
    /// never panics on bad probability values.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        let m = self.num_states;
        let push = |issues: &mut Vec<ValidationIssue>, location: String, problem: String| {
            issues.push(ValidationIssue { location, problem });
        };

        if self.root_priors.len() != self.layer_sizes[0] {
            push(
                &mut issues,
                "root_priors".into(),
                format!("expected {} entries, got {}", self.layer_sizes[0], self.root_priors.len()),
            );
        }
        for (i, prior) in self.root_priors.iter().enumerate() {
            if prior.len() != m {
                push(
                    &mut issues,
                    format!("root_prior[{i}]"),
                    format!("length {} != num_states {}", prior.len(), m),
                );
                continue;
            }
            if prior.iter().any(|&p| p < 0.0) {
                push(&mut issues, format!("root_prior[{i}]"), "negative entry".into());
            }
            let sum: f64 = prior.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                push(&mut issues, format!("root_prior[{i}]"), format!("sums to {sum}"));
            }
        }

        if self.menus.len() != self.num_layers() - 1 {
            push(
                &mut issues,
                "menus".into(),
                format!("expected {} layers of menus, got {}", self.num_layers() - 1, self.menus.len()),
            );
            return issues;
        }
        for (d, layer_menus) in self.menus.iter().enumerate() {
            let child_layer = d + 1;
            if layer_menus.len() != self.layer_size(child_layer) {
                push(
                    &mut issues,
                    format!("menus layer {child_layer}"),
                    format!("expected {} menus, got {}", self.layer_size(child_layer), layer_menus.len()),
                );
                continue;
            }
            for (i, menu) in layer_menus.iter().enumerate() {
                let node = NodeRef::new(child_layer, i);
                let loc = format!("menu {node}");
                if menu.is_empty() {
                    push(&mut issues, loc, "empty menu".into());
                    continue;
                }
                let mut seen = BTreeSet::new();
                for (slot, entry) in menu.entries.iter().enumerate() {
                    if entry.parent.layer + 1 != child_layer {
                        push(
                            &mut issues,
                            format!("{loc} entry {slot}"),
                            format!("parent {} not in layer {}", entry.parent, child_layer - 1),
                        );
                    } else if entry.parent.index >= self.layer_size(entry.parent.layer) {
                        push(
                            &mut issues,
                            format!("{loc} entry {slot}"),
                            format!("parent {} out of range", entry.parent),
                        );
                    }
                    if !seen.insert(entry.parent) {
                        push(
                            &mut issues,
                            format!("{loc} entry {slot}"),
                            format!("duplicate parent {}", entry.parent),
                        );
                    }
                    if entry.rho < 0.0 {
                        push(&mut issues, format!("{loc} entry {slot}"), "negative rho".into());
                    }
                    if !self.cpts.contains_key(&entry.tie) {
                        push(
                            &mut issues,
                            format!("{loc} entry {slot}"),
                            format!("unknown tie class '{}'", entry.tie),
                        );
                    }
                }
                let sum: f64 = menu.entries.iter().map(|e| e.rho).sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    push(&mut issues, loc, format!("rho sums to {sum}"));
                }
            }
        }

        for (class, cpt) in &self.cpts {
            if cpt.child_states() != m || cpt.parent_states() != m {
                push(
                    &mut issues,
                    format!("cpt class '{class}'"),
                    format!("shape {}x{} != {m}x{m}", cpt.child_states(), cpt.parent_states()),
                );
                continue;
            }
            for l in 0..m {
                let col = cpt.column(l);
                if col.iter().any(|&p| p < 0.0) {
                    push(&mut issues, format!("cpt class '{class}' column {l}"), "negative entry".into());
                }
                let sum: f64 = col.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    push(&mut issues, format!("cpt class '{class}' column {l}"), format!("sums to {sum}"));
                }
            }
        }

        issues
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn bottom_layer(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    /// Flat id of a node: layer-major, top layer first.
    pub fn flat(&self, node: NodeRef) -> usize {
        self.layer_offsets[node.layer] + node.index
    }

    pub fn node_at(&self, flat: usize) -> NodeRef {
        let layer = match self.layer_offsets.binary_search(&flat) {
            Ok(d) => d,
            Err(d) => d - 1,
        };
        NodeRef::new(layer, flat - self.layer_offsets[layer])
    }

    /// All nodes, top layer first, left to right within a layer.
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        (0..self.num_layers())
            .flat_map(move |d| (0..self.layer_size(d)).map(move |i| NodeRef::new(d, i)))
    }

    pub fn position(&self, node: NodeRef) -> f64 {
        self.positions[node.layer][node.index]
    }

    pub fn layer_positions(&self, layer: usize) -> &[f64] {
        &self.positions[layer]
    }

    pub fn root_prior(&self, index: usize) -> &[f64] {
        &self.root_priors[index]
    }

    pub fn menu(&self, node: NodeRef) -> Option<&ParentMenu> {
        if node.layer == 0 {
            None
        } else {
            Some(&self.menus[node.layer - 1][node.index])
        }
    }

    pub fn cpt(&self, class: &str) -> Option<&Cpt> {
        self.cpts.get(class)
    }

    pub fn cpts(&self) -> &BTreeMap<String, Cpt> {
        &self.cpts
    }

    /// True for bottom-layer nodes, where evidence attaches.
    pub fn is_bottom(&self, node: NodeRef) -> bool {
        node.layer == self.bottom_layer()
    }

    /// Number of nodes that choose a parent (everything below the top layer).
    pub fn num_choosers(&self) -> usize {
        self.num_nodes() - self.layer_sizes[0]
    }

    /// Index of a below-top node in chooser order (flat order minus the top layer).
    pub fn chooser_index(&self, node: NodeRef) -> usize {
        debug_assert!(node.layer >= 1);
        self.flat(node) - self.layer_sizes[0]
    }

    pub fn chooser_node(&self, chooser: usize) -> NodeRef {
        self.node_at(chooser + self.layer_sizes[0])
    }

    /// Incoming edge slots of `node` under the virtual-root convention: a
    /// top-layer node has one slot with no parent, rho 1, and its root prior
    /// as the table's single column.
    pub fn incoming(&self, node: NodeRef) -> Vec<IncomingSlot<'_>> {
        if node.layer == 0 {
            vec![IncomingSlot {
                parent: None,
                rho: 1.0,
                cpt: CptView {
                    child_states: self.num_states,
                    parent_states: 1,
                    data: &self.root_priors[node.index],
                },
            }]
        } else {
            self.menus[node.layer - 1][node.index]
                .entries
                .iter()
                .map(|e| IncomingSlot {
                    parent: Some(e.parent),
                    rho: e.rho,
                    cpt: self.cpts[&e.tie].view(),
                })
                .collect()
        }
    }

    pub fn num_slots(&self, node: NodeRef) -> usize {
        if node.layer == 0 {
            1
        } else {
            self.menus[node.layer - 1][node.index].len()
        }
    }

    /// The table on menu slot `slot` of a below-top node.
    pub fn cpt_view(&self, node: NodeRef, slot: usize) -> CptView<'_> {
        let entry = &self.menus[node.layer - 1][node.index].entries[slot];
        self.cpts[&entry.tie].view()
    }

    /// Nodes in the layer below that list `node` in their menus, with the
    /// menu slot pointing back at it.
    pub fn children_of(&self, node: NodeRef) -> &[(NodeRef, usize)] {
        &self.children[self.flat(node)]
    }

    /// Rebuilds the model with new tables and menu priors, revalidating.
    /// `new_rhos` is indexed by chooser, aligned with each node's menu.
    pub fn replace_parameters(
        &self,
        cpts: BTreeMap<String, Cpt>,
        new_rhos: Option<&[Vec<f64>]>,
    ) -> Result<DynamicTreeModel, ModelError> {
        let mut menus = self.menus.clone();
        if let Some(rhos) = new_rhos {
            for d in 1..self.num_layers() {
                for i in 0..self.layer_size(d) {
                    let node = NodeRef::new(d, i);
                    let menu = &mut menus[d - 1][i];
                    let row = &rhos[self.chooser_index(node)];
                    assert_eq!(row.len(), menu.len(), "rho row length mismatch at {node}");
                    for (entry, &r) in menu.entries.iter_mut().zip(row) {
                        entry.rho = r;
                    }
                }
            }
        }
        DynamicTreeModel::new(
            self.num_states,
            self.layer_sizes.clone(),
            self.root_priors.clone(),
            menus,
            cpts,
        )
    }
}

fn uniform_positions(layer_sizes: &[usize]) -> Vec<Vec<f64>> {
    layer_sizes
        .iter()
        .map(|&w| (0..w).map(|i| (i as f64 + 0.5) / w as f64).collect())
        .collect()
}

/// How menus are generated by [`build_layered_model`].
#[derive(Debug, Clone)]
pub enum ParentPriorSpec {
    /// Explicit menus, outer index over layers 1.., inner over nodes.
    Explicit(Vec<Vec<ParentMenu>>),
    /// Every node of the layer above is a candidate, weighted by a Gaussian
    /// over horizontal distance with sigma = `sigma_factor` times the spacing
    /// of the parent layer.
    GaussianOverDistance { sigma_factor: f64 },
    /// Two candidates: the node directly above and its right neighbour with
    /// wraparound. Collapses to a single candidate over a width-1 layer.
    AboveAndRightWrap { rho_above: f64 },
}

/// How conditional tables are assigned. The default tie grouping is one
/// class per child layer, named `layer-<d>`.
#[derive(Debug, Clone)]
pub enum CptSpec {
    /// The same table cloned into every child layer's class.
    Shared(Cpt),
    /// One table per child layer, index 0 used by layer 1.
    PerLayer(Vec<Cpt>),
    /// Explicit classes with per-edge labels: `labels[d][i][slot]` names the
    /// class for menu slot `slot` of node `(d + 1, i)`.
    Explicit {
        classes: BTreeMap<String, Cpt>,
        labels: Vec<Vec<Vec<String>>>,
    },
}

#[derive(Debug, Clone)]
pub enum RootPriorSpec {
    Uniform,
    Explicit(Vec<Vec<f64>>),
}

/// Builds a layered model from the given specs, laying nodes out uniformly
/// on the unit interval per layer.
pub fn build_layered_model(
    layer_sizes: &[usize],
    num_states: usize,
    parent_prior: &ParentPriorSpec,
    cpt_spec: &CptSpec,
    root_prior: &RootPriorSpec,
) -> Result<DynamicTreeModel, ModelError> {
    if layer_sizes.is_empty() || layer_sizes.contains(&0) {
        return Err(ModelError::BadLayerSizes);
    }
    let positions = uniform_positions(layer_sizes);
    let num_layers = layer_sizes.len();

    let tie_label = |child_layer: usize| format!("layer-{child_layer}");

    // Menus first, without tie labels; labels attached below.
    let mut menus: Vec<Vec<ParentMenu>> = Vec::with_capacity(num_layers.saturating_sub(1));
    for d in 1..num_layers {
        let width_above = layer_sizes[d - 1];
        let mut layer_menus = Vec::with_capacity(layer_sizes[d]);
        for i in 0..layer_sizes[d] {
            let entries: Vec<(NodeRef, f64)> = match parent_prior {
                ParentPriorSpec::Explicit(all) => {
                    let menu = all
                        .get(d - 1)
                        .and_then(|layer| layer.get(i))
                        .ok_or(ModelError::BadLayerSizes)?;
                    menu.entries.iter().map(|e| (e.parent, e.rho)).collect()
                }
                ParentPriorSpec::GaussianOverDistance { sigma_factor } => {
                    let sigma = sigma_factor / width_above as f64;
                    let weights =
                        gaussian_parent_prior(positions[d][i], &positions[d - 1], sigma);
                    (0..width_above)
                        .map(|j| (NodeRef::new(d - 1, j), weights[j]))
                        .collect()
                }
                ParentPriorSpec::AboveAndRightWrap { rho_above } => {
                    let above = i % width_above;
                    let right = (i + 1) % width_above;
                    if above == right {
                        vec![(NodeRef::new(d - 1, above), 1.0)]
                    } else {
                        vec![
                            (NodeRef::new(d - 1, above), *rho_above),
                            (NodeRef::new(d - 1, right), 1.0 - *rho_above),
                        ]
                    }
                }
            };
            let menu = ParentMenu {
                entries: entries
                    .into_iter()
                    .enumerate()
                    .map(|(slot, (parent, rho))| {
                        let tie = match cpt_spec {
                            CptSpec::Explicit { labels, .. } => labels
                                .get(d - 1)
                                .and_then(|layer| layer.get(i))
                                .and_then(|slots| slots.get(slot))
                                .cloned()
                                .unwrap_or_else(|| tie_label(d)),
                            _ => tie_label(d),
                        };
                        MenuEntry { parent, rho, tie }
                    })
                    .collect(),
            };
            layer_menus.push(menu);
        }
        menus.push(layer_menus);
    }

    let cpts: BTreeMap<String, Cpt> = match cpt_spec {
        CptSpec::Shared(cpt) => (1..num_layers).map(|d| (tie_label(d), cpt.clone())).collect(),
        CptSpec::PerLayer(per_layer) => {
            if per_layer.len() != num_layers - 1 {
                return Err(ModelError::Invalid(vec![ValidationIssue {
                    location: "cpt spec".into(),
                    problem: format!(
                        "expected {} per-layer tables, got {}",
                        num_layers - 1,
                        per_layer.len()
                    ),
                }]));
            }
            per_layer
                .iter()
                .enumerate()
                .map(|(d, cpt)| (tie_label(d + 1), cpt.clone()))
                .collect()
        }
        CptSpec::Explicit { classes, .. } => classes.clone(),
    };

    let root_priors = match root_prior {
        RootPriorSpec::Uniform => {
            vec![vec![1.0 / num_states as f64; num_states]; layer_sizes[0]]
        }
        RootPriorSpec::Explicit(p) => p.clone(),
    };

    DynamicTreeModel::new(num_states, layer_sizes.to_vec(), root_priors, menus, cpts)
}

/// Draws a full configuration from the prior: menu choices first, then
/// states top-down through the chosen edges.
pub fn sample_prior(model: &DynamicTreeModel, rng: &mut impl Rng) -> Assignment {
    let mut chosen = Vec::with_capacity(model.num_choosers());
    for d in 1..model.num_layers() {
        for i in 0..model.layer_size(d) {
            let menu = model.menu(NodeRef::new(d, i)).expect("below top layer");
            chosen.push(draw_categorical(&menu.rhos(), rng));
        }
    }
    let tree = TreeStructure { chosen };

    let mut states = vec![0usize; model.num_nodes()];
    for node in model.nodes() {
        let flat = model.flat(node);
        if node.layer == 0 {
            states[flat] = draw_categorical(model.root_prior(node.index), rng);
        } else {
            let slot = tree.chosen[model.chooser_index(node)];
            let inc = model.incoming(node)[slot];
            let parent_state = states[model.flat(inc.parent.expect("real edge"))];
            states[flat] = draw_categorical(inc.cpt.column(parent_state), rng);
        }
    }
    Assignment { tree, states }
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Log joint probability of a complete configuration. Minus infinity when
/// any chosen factor is zero.
pub fn log_joint(model: &DynamicTreeModel, assignment: &Assignment) -> f64 {
    assert_eq!(assignment.states.len(), model.num_nodes());
    assert_eq!(assignment.tree.chosen.len(), model.num_choosers());
    let mut total = 0.0;
    for node in model.nodes() {
        let flat = model.flat(node);
        let state = assignment.states[flat];
        if node.layer == 0 {
            total += model.root_prior(node.index)[state].ln();
        } else {
            let slot = assignment.tree.chosen[model.chooser_index(node)];
            let inc = model.incoming(node)[slot];
            let parent_state = assignment.states[model.flat(inc.parent.expect("real edge"))];
            total += inc.rho.ln() + inc.cpt.p(state, parent_state).ln();
        }
    }
    total
}
