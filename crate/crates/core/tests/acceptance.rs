//! Acceptance suite for the inference stack. Each test states one contract:
//! exactness in the single-parent limit, the free-energy bound, monotone
//! traces, the two head-to-head comparisons at their default settings,
//! gradient consistency of the upward messages, oracle cross-checks against
//! raw joint enumeration, warm-start nesting, learning on self-sampled data,
//! and byte-level reproducibility of the experiment reports.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dyntree::harness::{
    run_free_energy_comparison, run_marginal_comparison, sample_leaf_evidence, FreeEnergyConfig,
    MarginalConfig,
};
use dyntree::loopy::{self, LoopyOptions};
use dyntree::math::{cm, derive_seed, increment_mixed_radix, logsumexp, normalize, xlog_ratio};
use dyntree::mean_field::{self, MfOptions};
use dyntree::model::{
    build_layered_model, log_joint, random_strong_diagonal_cpt, Assignment, Cpt, CptSpec,
    DynamicTreeModel, Evidence, MenuEntry, NodeRef, ParentMenu, ParentPriorSpec, RootPriorSpec,
    TreeStructure,
};
use dyntree::oracle::{exact_posterior, tree_count};
use dyntree::svi::{self, EmOptions, FitOptions, StructuredPosterior};
use dyntree::tree_bp::tree_posterior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random column-stochastic table with entries bounded away from zero.
fn random_cpt(states: usize, rng: &mut ChaCha8Rng) -> Cpt {
    let rows: Vec<Vec<f64>> = (0..states)
        .map(|_| (0..states).map(|_| 0.05 + rng.gen::<f64>()).collect())
        .collect();
    Cpt::normalized_from_rows(&rows).expect("square rows")
}

/// Random model in which every menu has exactly one candidate, so the
/// structure mixture degenerates to a single fixed tree.
fn single_parent_model(rng: &mut ChaCha8Rng) -> (DynamicTreeModel, TreeStructure) {
    let depth = rng.gen_range(2..=6);
    let sizes: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=3)).collect();
    let states = rng.gen_range(2..=4);
    let mut menus: Vec<Vec<ParentMenu>> = Vec::new();
    for d in 1..depth {
        let mut layer = Vec::new();
        for _ in 0..sizes[d] {
            let parent = NodeRef::new(d - 1, rng.gen_range(0..sizes[d - 1]));
            layer.push(ParentMenu {
                entries: vec![MenuEntry { parent, rho: 1.0, tie: String::new() }],
            });
        }
        menus.push(layer);
    }
    let cpts: Vec<Cpt> = (1..depth).map(|_| random_cpt(states, rng)).collect();
    let roots: Vec<Vec<f64>> = (0..sizes[0])
        .map(|_| {
            let mut v: Vec<f64> = (0..states).map(|_| 0.05 + rng.gen::<f64>()).collect();
            normalize(&mut v);
            v
        })
        .collect();
    let model = build_layered_model(
        &sizes,
        states,
        &ParentPriorSpec::Explicit(menus),
        &CptSpec::PerLayer(cpts),
        &RootPriorSpec::Explicit(roots),
    )
    .expect("single-parent build");
    let tree = TreeStructure { chosen: vec![0; model.num_choosers()] };
    (model, tree)
}

/// Random layered model with at least one multi-candidate menu and a tree
/// count no larger than `tree_cap`.
fn assorted_model(
    rng: &mut ChaCha8Rng,
    max_depth: usize,
    max_width: usize,
    tree_cap: u128,
) -> DynamicTreeModel {
    loop {
        let depth = rng.gen_range(2..=max_depth);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=max_width)).collect();
        let states = rng.gen_range(2..=3);
        let prior = if rng.gen_bool(0.5) {
            ParentPriorSpec::GaussianOverDistance { sigma_factor: 1.0 + rng.gen::<f64>() }
        } else {
            ParentPriorSpec::AboveAndRightWrap { rho_above: 0.5 + 0.3 * rng.gen::<f64>() }
        };
        let cpts: Vec<Cpt> =
            (1..depth).map(|_| random_strong_diagonal_cpt(states, rng)).collect();
        let model = build_layered_model(
            &sizes,
            states,
            &prior,
            &CptSpec::PerLayer(cpts),
            &RootPriorSpec::Uniform,
        )
        .expect("assorted build");
        let multi_parent =
            model.nodes().any(|n| n.layer > 0 && model.num_slots(n) > 1);
        if multi_parent && tree_count(&model) <= tree_cap {
            return model;
        }
    }
}

fn uniform_evidence(model: &DynamicTreeModel, rng: &mut ChaCha8Rng) -> Evidence {
    let width = model.layer_size(model.bottom_layer());
    let states: Vec<usize> =
        (0..width).map(|_| rng.gen_range(0..model.num_states())).collect();
    Evidence::for_model(model, states).expect("bottom-layer states")
}

#[test]
fn exact_on_single_parent_menus() {
    let started = Instant::now();
    let mut worst_marginal = 0.0f64;
    let mut worst_f = 0.0f64;
    for instance in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(401, instance));
        let (model, tree) = single_parent_model(&mut rng);
        let evidence = uniform_evidence(&model, &mut rng);
        let exact = tree_posterior(&model, &tree, &evidence).expect("tree propagation");
        let options = FitOptions { max_passes: 1, kl_tolerance: 0.0, mu_damping: 0.0 };
        let state = svi::fit(&model, &evidence, &options).expect("variational fit");
        for (got, want) in state.marginals().iter().zip(&exact.marginals) {
            for (g, w) in got.iter().zip(want) {
                worst_marginal = worst_marginal.max((g - w).abs());
            }
        }
        let f = *state.free_energy_trace().last().expect("one pass recorded");
        worst_f = worst_f.max((f + exact.log_evidence).abs());
    }
    assert!(worst_marginal < 1e-9, "largest marginal gap {worst_marginal:.3e}");
    assert!(worst_f < 1e-9, "largest free-energy gap {worst_f:.3e}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}, budget 5s");
    println!(
        "PASS exact_on_single_parent_menus: marginal gap {worst_marginal:.2e}, \
         free-energy gap {worst_f:.2e}, {elapsed:?}"
    );
}

#[test]
fn free_energy_bounds_log_evidence() {
    let started = Instant::now();
    let mut min_slack_svi = f64::INFINITY;
    let mut min_slack_mf = f64::INFINITY;
    for instance in 0..50u64 {
        let seed = derive_seed(402, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = assorted_model(&mut rng, 4, 4, 4096);
        let evidence = sample_leaf_evidence(&model, &mut rng);
        let exact = exact_posterior(&model, &evidence, 1_000_000).expect("oracle run");
        let options = FitOptions { max_passes: 50, kl_tolerance: 1e-9, mu_damping: 0.0 };
        let state = svi::fit(&model, &evidence, &options).expect("variational fit");
        let f_svi = *state.free_energy_trace().last().expect("non-empty trace");
        let factored =
            mean_field::fit(&model, &evidence, &MfOptions { seed, ..MfOptions::default() })
                .expect("factored fit");
        let f_mf = *factored.free_energy_trace().last().expect("non-empty trace");
        min_slack_svi = min_slack_svi.min(f_svi + exact.log_evidence);
        min_slack_mf = min_slack_mf.min(f_mf + exact.log_evidence);
    }
    assert!(min_slack_svi >= -1e-9, "structured bound violated by {min_slack_svi:.3e}");
    assert!(min_slack_mf >= -1e-9, "factored bound violated by {min_slack_mf:.3e}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}, budget 60s");
    println!(
        "PASS free_energy_bounds_log_evidence: min slack structured {min_slack_svi:.3e}, \
         factored {min_slack_mf:.3e}, {elapsed:?}"
    );
}

#[test]
fn free_energy_traces_never_increase() {
    let started = Instant::now();
    let mut worst_rise = f64::NEG_INFINITY;
    for instance in 0..100u64 {
        let seed = derive_seed(403, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = assorted_model(&mut rng, 4, 5, u128::MAX);
        let evidence = sample_leaf_evidence(&model, &mut rng);
        let options = FitOptions { max_passes: 25, kl_tolerance: 0.0, mu_damping: 0.0 };
        let state = svi::fit(&model, &evidence, &options).expect("variational fit");
        for w in state.free_energy_trace().windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        let mf_options = MfOptions {
            inner_iters: 5,
            max_outer: 25,
            tolerance: 0.0,
            init_jitter: 1e-3,
            seed,
        };
        let factored = mean_field::fit(&model, &evidence, &mf_options).expect("factored fit");
        for w in factored.free_energy_trace().windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    assert!(worst_rise <= 1e-9, "free energy rose by {worst_rise:.3e} within a trace");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}, budget 60s");
    println!("PASS free_energy_traces_never_increase: worst step {worst_rise:.3e}, {elapsed:?}");
}

#[test]
fn structured_fit_beats_loopy_on_marginals() {
    let started = Instant::now();
    let report = run_marginal_comparison(&MarginalConfig::default());
    assert_eq!(report.summary.get("runs_failed"), Some(&0.0), "some runs errored");
    let svi_kl = report.aggregates.get("svi/summed_marginal_kl").expect("svi aggregate");
    let loopy_kl = report.aggregates.get("loopy/summed_marginal_kl").expect("loopy aggregate");
    assert!(
        svi_kl.mean < loopy_kl.mean,
        "structured mean summed KL {:.4} is not below loopy {:.4}",
        svi_kl.mean,
        loopy_kl.mean
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}, budget 10min");
    println!(
        "PASS structured_fit_beats_loopy_on_marginals: mean summed KL to the exact \
         posterior {:.4} (se {:.4}) structured vs {:.4} (se {:.4}) loopy over {} runs, {elapsed:?}",
        svi_kl.mean, svi_kl.std_error, loopy_kl.mean, loopy_kl.std_error, svi_kl.count
    );
}

#[test]
fn structured_fit_beats_mean_field_on_free_energy() {
    let started = Instant::now();
    let report =
        run_free_energy_comparison(&FreeEnergyConfig::default()).expect("chain model builds");
    assert_eq!(report.summary.get("cases_failed"), Some(&0.0), "some cases errored");
    let win_rate = *report.summary.get("svi_win_rate").expect("win rate");
    assert!(win_rate >= 0.90, "structured won only {win_rate:.4} of cases");
    let f_svi = report.aggregates.get("svi/free_energy").expect("svi aggregate").mean;
    let f_mf = report.aggregates.get("mf/free_energy").expect("mf aggregate").mean;
    assert!(f_svi < f_mf, "mean free energy {f_svi:.4} is not below factored {f_mf:.4}");
    let diag = report.aggregates.get("svi/q_diagonal_mean").expect("diagonal aggregate").mean;
    let off = report.aggregates.get("svi/q_off_diagonal_mean").expect("off aggregate").mean;
    assert!(diag > off, "edge tables not diagonal: diag {diag:.4} vs off {off:.4}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}, budget 10min");
    println!(
        "PASS structured_fit_beats_mean_field_on_free_energy: win rate {win_rate:.4}, \
         mean F {f_svi:.4} vs {f_mf:.4}, edge-table mass diag {diag:.3} off {off:.3}, {elapsed:?}"
    );
}

/// Cost of everything below `node`: for each edge in the layers underneath,
/// the menu-weighted expected log ratio between the fitted edge table and the
/// model table, with the means below `node` re-propagated from the supplied
/// (possibly perturbed) table of means while edge tables and menu weights
/// stay fixed.
fn downstream_cost(
    model: &DynamicTreeModel,
    state: &StructuredPosterior,
    node: NodeRef,
    perturbed_means: &[Vec<f64>],
) -> f64 {
    let m = model.num_states();
    let mut means = perturbed_means.to_vec();
    for d in node.layer + 1..model.num_layers() {
        for i in 0..model.layer_size(d) {
            let child = NodeRef::new(d, i);
            let flat = model.flat(child);
            if state.is_evidential(flat) {
                continue;
            }
            let mut fresh = vec![0.0f64; m];
            for (slot, inc) in model.incoming(child).iter().enumerate() {
                let weight = state.mu()[flat][slot];
                let q = state.q_table(flat, slot);
                let parent_flat = model.flat(inc.parent.expect("below top layer"));
                for l in 0..inc.cpt.parent_states() {
                    let p_mean = means[parent_flat][l];
                    if p_mean == 0.0 {
                        continue;
                    }
                    for (k, f) in fresh.iter_mut().enumerate() {
                        *f += weight * q[cm(k, l, m)] * p_mean;
                    }
                }
            }
            means[flat] = fresh;
        }
    }

    let mut cost = 0.0;
    for d in node.layer + 1..model.num_layers() {
        for i in 0..model.layer_size(d) {
            let child = NodeRef::new(d, i);
            let flat = model.flat(child);
            for (slot, inc) in model.incoming(child).iter().enumerate() {
                let weight = state.mu()[flat][slot];
                let q = state.q_table(flat, slot);
                let parent_flat = model.flat(inc.parent.expect("below top layer"));
                for l in 0..inc.cpt.parent_states() {
                    let p_mean = means[parent_flat][l];
                    if p_mean == 0.0 {
                        continue;
                    }
                    let mut column = 0.0;
                    for k in 0..m {
                        column += xlog_ratio(q[cm(k, l, m)], inc.cpt.p(k, l));
                    }
                    cost += weight * p_mean * column;
                }
            }
        }
    }
    cost
}

#[test]
fn log_lambda_matches_downstream_cost_gradient() {
    let started = Instant::now();
    let eps = 1e-6;
    let mut worst_rel = 0.0f64;
    for instance in 0..20u64 {
        let seed = derive_seed(406, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes =
            vec![rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(3..=4)];
        let states = rng.gen_range(2..=3);
        let cpts: Vec<Cpt> =
            (1..3).map(|_| random_strong_diagonal_cpt(states, &mut rng)).collect();
        let model = build_layered_model(
            &sizes,
            states,
            &ParentPriorSpec::GaussianOverDistance { sigma_factor: 1.5 },
            &CptSpec::PerLayer(cpts),
            &RootPriorSpec::Uniform,
        )
        .expect("three-layer build");
        let evidence = uniform_evidence(&model, &mut rng);
        let options = FitOptions { max_passes: 5, kl_tolerance: 0.0, mu_damping: 0.0 };
        let mut state = svi::fit(&model, &evidence, &options).expect("variational fit");
        // Refresh so messages, edge tables and means all correspond to the
        // final menu weights before differentiating.
        state.lambda_pass(&model).expect("message refresh");
        state.q_update(&model);
        state.means_pass(&model);

        for node in model.nodes() {
            let flat = model.flat(node);
            if node.layer + 1 >= model.num_layers() || state.is_evidential(flat) {
                continue;
            }
            let t_values: Vec<f64> = state.log_lambda(flat).iter().map(|v| -v).collect();
            for (k, &t) in t_values.iter().enumerate() {
                let mut plus = state.means().to_vec();
                plus[flat][k] += eps;
                let mut minus = state.means().to_vec();
                minus[flat][k] -= eps;
                let fd = (downstream_cost(&model, &state, node, &plus)
                    - downstream_cost(&model, &state, node, &minus))
                    / (2.0 * eps);
                let rel = (fd - t).abs() / t.abs().max(1e-3);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    assert!(worst_rel < 1e-5, "worst relative gradient error {worst_rel:.3e}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}, budget 30s");
    println!(
        "PASS log_lambda_matches_downstream_cost_gradient: worst relative error \
         {worst_rel:.3e}, {elapsed:?}"
    );
}

/// Runs `visit` over every (structure, full state) assignment compatible
/// with the evidence.
fn for_each_assignment(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    mut visit: impl FnMut(&Assignment),
) {
    let m = model.num_states();
    let bottom = model.bottom_layer();
    let mut base_states = vec![0usize; model.num_nodes()];
    let mut hidden: Vec<usize> = Vec::new();
    for node in model.nodes() {
        let flat = model.flat(node);
        if node.layer == bottom {
            base_states[flat] = evidence.state_of(node.index);
        } else {
            hidden.push(flat);
        }
    }
    let tree_radices: Vec<usize> = (0..model.num_choosers())
        .map(|c| model.menu(model.chooser_node(c)).expect("chooser menu").len())
        .collect();
    let hidden_radices = vec![m; hidden.len()];

    let mut chosen = vec![0usize; tree_radices.len()];
    loop {
        let mut digits = vec![0usize; hidden.len()];
        loop {
            let mut states = base_states.clone();
            for (&st, &flat) in digits.iter().zip(&hidden) {
                states[flat] = st;
            }
            let assignment =
                Assignment { tree: TreeStructure { chosen: chosen.clone() }, states };
            visit(&assignment);
            if !increment_mixed_radix(&mut digits, &hidden_radices) {
                break;
            }
        }
        if !increment_mixed_radix(&mut chosen, &tree_radices) {
            break;
        }
    }
}

/// Evidence likelihood and node marginals by brute summation of the joint
/// over all structures and hidden states.
fn enumerate_joint(model: &DynamicTreeModel, evidence: &Evidence) -> (f64, Vec<Vec<f64>>) {
    let mut logs = Vec::new();
    for_each_assignment(model, evidence, |a| logs.push(log_joint(model, a)));
    let log_z = logsumexp(&logs);
    let mut marginals = vec![vec![0.0f64; model.num_states()]; model.num_nodes()];
    for_each_assignment(model, evidence, |a| {
        let w = (log_joint(model, a) - log_z).exp();
        for (flat, &k) in a.states.iter().enumerate() {
            marginals[flat][k] += w;
        }
    });
    (log_z, marginals)
}

#[test]
fn oracle_matches_joint_enumeration_and_loopy_is_exact_on_trees() {
    let started = Instant::now();
    let shapes: [&[usize]; 5] =
        [&[1, 2, 3], &[2, 2, 4], &[1, 3, 3], &[2, 3, 4], &[1, 2, 2, 3]];
    let mut worst_log_z = 0.0f64;
    let mut worst_marginal = 0.0f64;
    for instance in 0..25u64 {
        let seed = derive_seed(407, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = shapes[(instance % 5) as usize];
        let states = rng.gen_range(2..=3);
        let cpts: Vec<Cpt> = (1..sizes.len())
            .map(|_| random_strong_diagonal_cpt(states, &mut rng))
            .collect();
        let model = build_layered_model(
            sizes,
            states,
            &ParentPriorSpec::GaussianOverDistance { sigma_factor: 1.2 },
            &CptSpec::PerLayer(cpts),
            &RootPriorSpec::Uniform,
        )
        .expect("small build");
        let evidence = uniform_evidence(&model, &mut rng);
        let exact = exact_posterior(&model, &evidence, 1_000_000).expect("oracle run");
        let (log_z, marginals) = enumerate_joint(&model, &evidence);
        worst_log_z = worst_log_z.max((exact.log_evidence - log_z).abs());
        for (got, want) in exact.node_marginals.iter().zip(&marginals) {
            for (g, w) in got.iter().zip(want) {
                worst_marginal = worst_marginal.max((g - w).abs());
            }
        }
    }
    assert!(worst_log_z < 1e-10, "evidence likelihood gap {worst_log_z:.3e}");
    assert!(worst_marginal < 1e-10, "marginal gap {worst_marginal:.3e}");

    let mut worst_tree_gap = 0.0f64;
    for instance in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(417, instance));
        let (model, tree) = single_parent_model(&mut rng);
        let evidence = uniform_evidence(&model, &mut rng);
        let exact = tree_posterior(&model, &tree, &evidence).expect("tree propagation");
        let options =
            LoopyOptions { damping: 0.0, max_iterations: 200, message_tolerance: 1e-12 };
        let loopy = loopy::propagate(&model, &evidence, &options).expect("message passing");
        for (got, want) in loopy.marginals.iter().zip(&exact.marginals) {
            for (g, w) in got.iter().zip(want) {
                worst_tree_gap = worst_tree_gap.max((g - w).abs());
            }
        }
    }
    assert!(worst_tree_gap < 1e-9, "loopy gap on fixed trees {worst_tree_gap:.3e}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}, budget 60s");
    println!(
        "PASS oracle_matches_joint_enumeration_and_loopy_is_exact_on_trees: likelihood gap \
         {worst_log_z:.2e}, marginal gap {worst_marginal:.2e}, fixed-tree loopy gap \
         {worst_tree_gap:.2e}, {elapsed:?}"
    );
}

#[test]
fn warm_start_from_mean_field_never_ends_worse() {
    let started = Instant::now();
    let mut worst_excess = f64::NEG_INFINITY;
    for instance in 0..50u64 {
        let seed = derive_seed(408, instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = assorted_model(&mut rng, 4, 5, u128::MAX);
        let evidence = sample_leaf_evidence(&model, &mut rng);
        let factored =
            mean_field::fit(&model, &evidence, &MfOptions { seed, ..MfOptions::default() })
                .expect("factored fit");
        let f_mf = *factored.free_energy_trace().last().expect("non-empty trace");
        let options = FitOptions { max_passes: 50, kl_tolerance: 1e-12, mu_damping: 0.0 };
        let state = svi::fit_from(&model, &evidence, Some(factored.mu()), &options)
            .expect("warm-started fit");
        let f_svi = *state.free_energy_trace().last().expect("non-empty trace");
        worst_excess = worst_excess.max(f_svi - f_mf);
    }
    assert!(
        worst_excess <= 1e-9,
        "warm-started fit ended {worst_excess:.3e} above the factored value"
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}, budget 120s");
    println!(
        "PASS warm_start_from_mean_field_never_ends_worse: worst excess {worst_excess:.3e}, \
         {elapsed:?}"
    );
}

fn mean_abs_cpt_error(estimate: &DynamicTreeModel, truth: &DynamicTreeModel) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (class, want) in truth.cpts() {
        let got = estimate.cpt(class).expect("same tie classes");
        for l in 0..want.parent_states() {
            for k in 0..want.child_states() {
                total += (got.p(k, l) - want.p(k, l)).abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn em_improves_parameters_on_self_sampled_data() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(409);
    let states = 3;
    let truth_cpts: Vec<Cpt> =
        (0..2).map(|_| random_strong_diagonal_cpt(states, &mut rng)).collect();
    let truth = build_layered_model(
        &[1, 2, 4],
        states,
        &ParentPriorSpec::AboveAndRightWrap { rho_above: 0.7 },
        &CptSpec::PerLayer(truth_cpts),
        &RootPriorSpec::Uniform,
    )
    .expect("truth build");
    let cases: Vec<Evidence> =
        (0..20).map(|_| sample_leaf_evidence(&truth, &mut rng)).collect();

    // Start from the true tables washed out halfway toward uniform.
    let blurred: BTreeMap<String, Cpt> = truth
        .cpts()
        .iter()
        .map(|(class, cpt)| {
            let m = cpt.child_states();
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|k| (0..m).map(|l| 0.5 * cpt.p(k, l) + 0.5 / m as f64).collect())
                .collect();
            (class.clone(), Cpt::from_rows(&rows).expect("square rows"))
        })
        .collect();
    let start = truth.replace_parameters(blurred, None).expect("blurred start");

    let options = EmOptions {
        iterations: 5,
        smoothing: 0.0,
        fit: FitOptions { max_passes: 20, kl_tolerance: 1e-6, mu_damping: 0.0 },
    };
    let (learned, trace) = svi::em_fit(&start, &cases, &options).expect("learning run");
    assert_eq!(trace.len(), 5, "one total free energy per iteration");
    let mut worst_rise = f64::NEG_INFINITY;
    for w in trace.windows(2) {
        worst_rise = worst_rise.max(w[1] - w[0]);
    }
    assert!(worst_rise <= 1e-6, "total free energy rose by {worst_rise:.3e}");

    let before = mean_abs_cpt_error(&start, &truth);
    let after = mean_abs_cpt_error(&learned, &truth);
    assert!(after < before, "table error went from {before:.4} to {after:.4}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}, budget 120s");
    println!(
        "PASS em_improves_parameters_on_self_sampled_data: worst trace step {worst_rise:.3e}, \
         table error {before:.4} -> {after:.4}, {elapsed:?}"
    );
}

#[test]
fn experiments_are_byte_deterministic() {
    let started = Instant::now();
    let marginal_config =
        MarginalConfig { num_runs: 8, master_seed: 11, ..MarginalConfig::default() };
    let marginal_a = run_marginal_comparison(&marginal_config).to_csv();
    let marginal_b = run_marginal_comparison(&marginal_config).to_csv();
    assert_eq!(marginal_a, marginal_b, "marginal comparison CSV drifted between reruns");

    let chain_config =
        FreeEnergyConfig { num_cases: 12, master_seed: 11, ..FreeEnergyConfig::default() };
    let chain_a =
        run_free_energy_comparison(&chain_config).expect("chain model builds").to_csv();
    let chain_b =
        run_free_energy_comparison(&chain_config).expect("chain model builds").to_csv();
    assert_eq!(chain_a, chain_b, "free-energy comparison CSV drifted between reruns");
    let elapsed = started.elapsed();
    println!(
        "PASS experiments_are_byte_deterministic: {} and {} CSV bytes identical across \
         reruns, {elapsed:?}",
        marginal_a.len(),
        chain_a.len()
    );
}
