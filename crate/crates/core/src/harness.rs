//! Seeded experiment drivers: divergence metrics, data generation, and the
//! two built-in method comparisons.
//!
//! The marginal comparison builds a small layered model with strong-diagonal
//! tables per run, instantiates the bottom layer with a sample from the
//! prior, and scores structured variational and loopy marginals against the
//! enumeration oracle by summed KL divergence over the hidden nodes. The
//! free-energy comparison builds one fixed 1-D hierarchy, generates noisy
//! Markov-chain cases, and fits the structured and factored variational
//! methods to each case, comparing their free energies (lower is closer to
//! the true posterior) and the diagonality of the fitted edge tables.
//!
//! Everything is driven by a master seed through per-run derived seeds, so
//! reports and CSV renderings are byte-identical across reruns regardless of
//! thread count. Wall-clock timings are collected in memory for display but
//! never serialized, keeping the determinism contract on output files.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{InferenceError, ModelError};
use crate::loopy;
use crate::math::{derive_seed, kl_divergence};
use crate::mean_field::{self, MfOptions};
use crate::model::{
    build_layered_model, random_strong_diagonal_cpt, sample_prior, Cpt, CptSpec,
    DynamicTreeModel, Evidence, NodeRef, ParentPriorSpec, RootPriorSpec,
};
use crate::oracle;
use crate::svi::{self, FitOptions, StructuredPosterior};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Sum over nodes of KL(truth row, approximation row). Rows must pair up
/// exactly; a truth mass on a state the approximation excludes yields
/// infinity.
pub fn marginal_kl_sum(truth: &[Vec<f64>], approx: &[Vec<f64>]) -> Result<f64, InferenceError> {
    if truth.len() != approx.len() {
        return Err(InferenceError::MarginalShapeMismatch(format!(
            "{} nodes vs {}",
            truth.len(),
            approx.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, q)) in truth.iter().zip(approx).enumerate() {
        if p.len() != q.len() {
            return Err(InferenceError::MarginalShapeMismatch(format!(
                "node {i}: {} states vs {}",
                p.len(),
                q.len()
            )));
        }
        total += kl_divergence(p, q);
    }
    Ok(total)
}

/// The hidden-node prefix of a full per-node table: flat order puts the
/// observed bottom layer last.
pub fn hidden_rows<'a>(model: &DynamicTreeModel, rows: &'a [Vec<f64>]) -> &'a [Vec<f64>] {
    &rows[..model.num_nodes() - model.layer_size(model.bottom_layer())]
}

/// Binary Markov chains with a stay probability per step and independent
/// bit-flip noise applied afterwards, one vector of bottom-layer states per
/// case.
pub fn gen_markov_cases(
    num_cases: usize,
    chain_length: usize,
    stay_prob: f64,
    flip_noise: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut cases = Vec::with_capacity(num_cases);
    for _ in 0..num_cases {
        let mut states = Vec::with_capacity(chain_length);
        let mut current = usize::from(rng.gen_bool(0.5));
        for t in 0..chain_length {
            if t > 0 && !rng.gen_bool(stay_prob) {
                current = 1 - current;
            }
            states.push(current);
        }
        for s in states.iter_mut() {
            if flip_noise > 0.0 && rng.gen_bool(flip_noise) {
                *s = 1 - *s;
            }
        }
        cases.push(states);
    }
    cases
}

/// Settings for the marginal-quality comparison against the oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalConfig {
    pub num_runs: usize,
    pub master_seed: u64,
    pub layer_sizes: Vec<usize>,
    pub num_states: usize,
    /// Structural weight of the parent directly above; the wraparound right
    /// neighbour gets the rest.
    pub rho_above: f64,
    pub svi_max_passes: usize,
    pub svi_tolerance: f64,
    pub loopy_damping: f64,
    pub loopy_max_iterations: usize,
    pub loopy_message_tolerance: f64,
    pub tree_limit: u64,
    /// Replaces every conditional table with the uniform one; a calibration
    /// mode in which every method is exact.
    pub force_uniform_cpts: bool,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        MarginalConfig {
            num_runs: 50,
            master_seed: 0,
            layer_sizes: vec![4, 4, 4, 4],
            num_states: 3,
            rho_above: 0.6,
            svi_max_passes: 50,
            svi_tolerance: 0.01,
            loopy_damping: 0.1,
            loopy_max_iterations: 200,
            loopy_message_tolerance: 1e-6,
            tree_limit: 1_000_000,
            force_uniform_cpts: false,
        }
    }
}

/// Settings for the free-energy comparison on the 1-D hierarchy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FreeEnergyConfig {
    pub num_cases: usize,
    pub master_seed: u64,
    pub layer_sizes: Vec<usize>,
    pub num_states: usize,
    /// Width of the Gaussian parent prior in units of parent-layer spacing.
    pub sigma_factor: f64,
    pub cpt_diagonal: f64,
    pub stay_prob: f64,
    pub flip_noise: f64,
    pub svi_max_passes: usize,
    pub svi_tolerance: f64,
    pub mf_inner_iters: usize,
    pub mf_max_outer: usize,
    pub mf_tolerance: f64,
    pub mf_init_jitter: f64,
    pub force_uniform_cpts: bool,
}

impl Default for FreeEnergyConfig {
    fn default() -> Self {
        FreeEnergyConfig {
            num_cases: 150,
            master_seed: 0,
            layer_sizes: vec![1, 2, 4, 8, 16, 32],
            num_states: 2,
            sigma_factor: 3.0,
            cpt_diagonal: 0.9,
            stay_prob: 0.9,
            flip_noise: 0.1,
            svi_max_passes: 50,
            svi_tolerance: 0.01,
            mf_inner_iters: 20,
            mf_max_outer: 50,
            mf_tolerance: 0.01,
            mf_init_jitter: 1e-3,
            force_uniform_cpts: false,
        }
    }
}

/// Mean, standard error of the mean, and sample count for one metric.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate { mean: f64::NAN, std_error: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, std_error, count: n }
    }
}

/// One run or case: metric values keyed as `method/metric`. Failures leave
/// the metrics empty and the message here. Wall-clock seconds per method are
/// collected in memory only and never serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_clock: BTreeMap<String, f64>,
}

/// Full experiment output: the resolved configuration, per-run records, and
/// aggregates recomputable from the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format_version: u32,
    pub experiment: String,
    pub config: serde_json::Value,
    pub records: Vec<RunRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub summary: BTreeMap<String, f64>,
}

impl ComparisonReport {
    /// Per-metric aggregates over the records that carry the metric, in run
    /// order.
    pub fn compute_aggregates(records: &[RunRecord]) -> BTreeMap<String, Aggregate> {
        let keys: BTreeSet<&String> = records.iter().flat_map(|r| r.metrics.keys()).collect();
        keys.into_iter()
            .map(|key| {
                let values: Vec<f64> =
                    records.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
                (key.clone(), Aggregate::from_values(&values))
            })
            .collect()
    }

    /// Flat rendering, one row per recorded metric value:
    /// `run,seed,method,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,seed,method,metric,value\n");
        for record in &self.records {
            for (key, value) in &record.metrics {
                let (method, metric) = key.split_once('/').unwrap_or(("", key.as_str()));
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    record.run, record.seed, method, metric, value
                ));
            }
        }
        out
    }

    /// Mean seconds per wall-clock key, from the in-memory timings.
    pub fn timing_means(&self) -> BTreeMap<String, f64> {
        let keys: BTreeSet<&String> =
            self.records.iter().flat_map(|r| r.wall_clock.keys()).collect();
        keys.into_iter()
            .map(|key| {
                let values: Vec<f64> =
                    self.records.iter().filter_map(|r| r.wall_clock.get(key).copied()).collect();
                (key.clone(), values.iter().sum::<f64>() / values.len().max(1) as f64)
            })
            .collect()
    }
}

/// The layered comparison model: every node below the top chooses between
/// the node directly above and its wraparound right neighbour, tables drawn
/// with a strong diagonal per child layer.
pub fn build_marginal_model(
    config: &MarginalConfig,
    rng: &mut impl Rng,
) -> Result<DynamicTreeModel, ModelError> {
    let depth = config.layer_sizes.len().saturating_sub(1);
    let cpts: Vec<Cpt> = (0..depth)
        .map(|_| {
            if config.force_uniform_cpts {
                Cpt::uniform(config.num_states)
            } else {
                random_strong_diagonal_cpt(config.num_states, rng)
            }
        })
        .collect();
    build_layered_model(
        &config.layer_sizes,
        config.num_states,
        &ParentPriorSpec::AboveAndRightWrap { rho_above: config.rho_above },
        &CptSpec::PerLayer(cpts),
        &RootPriorSpec::Uniform,
    )
}

/// Draws a full configuration from the prior and keeps the bottom layer.
pub fn sample_leaf_evidence(model: &DynamicTreeModel, rng: &mut impl Rng) -> Evidence {
    let assignment = sample_prior(model, rng);
    let offset = model.num_nodes() - model.layer_size(model.bottom_layer());
    Evidence::for_model(model, assignment.states[offset..].to_vec()).expect("in range")
}

fn marginal_run(config: &MarginalConfig, run: usize) -> RunRecord {
    let seed = derive_seed(config.master_seed, run as u64);
    let mut record = RunRecord {
        run,
        seed,
        metrics: BTreeMap::new(),
        error: None,
        wall_clock: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = (|| -> Result<(), InferenceError> {
        let model = build_marginal_model(config, &mut rng)?;
        let evidence = sample_leaf_evidence(&model, &mut rng);

        let t = Instant::now();
        let exact = oracle::exact_posterior(&model, &evidence, config.tree_limit as u128)?;
        record.wall_clock.insert("oracle/seconds".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let fitted = svi::fit(
            &model,
            &evidence,
            &FitOptions {
                max_passes: config.svi_max_passes,
                kl_tolerance: config.svi_tolerance,
                mu_damping: 0.0,
            },
        )?;
        record.wall_clock.insert("svi/seconds".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let loopy_result = loopy::propagate(
            &model,
            &evidence,
            &loopy::LoopyOptions {
                damping: config.loopy_damping,
                max_iterations: config.loopy_max_iterations,
                message_tolerance: config.loopy_message_tolerance,
            },
        )?;
        record.wall_clock.insert("loopy/seconds".into(), t.elapsed().as_secs_f64());

        let truth = hidden_rows(&model, &exact.node_marginals);
        let kl_svi = marginal_kl_sum(truth, hidden_rows(&model, fitted.marginals()))?;
        let kl_loopy = marginal_kl_sum(truth, hidden_rows(&model, &loopy_result.marginals))?;
        record.metrics.insert("svi/summed_marginal_kl".into(), kl_svi);
        record.metrics.insert("loopy/summed_marginal_kl".into(), kl_loopy);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

/// Runs the marginal-quality comparison. Per-run failures are recorded, not
/// fatal.
pub fn run_marginal_comparison(config: &MarginalConfig) -> ComparisonReport {
    let records: Vec<RunRecord> = (0..config.num_runs)
        .into_par_iter()
        .map(|run| marginal_run(config, run))
        .collect();
    let aggregates = ComparisonReport::compute_aggregates(&records);
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let mut summary = BTreeMap::new();
    summary.insert("runs_failed".into(), failed as f64);
    ComparisonReport {
        format_version: REPORT_FORMAT_VERSION,
        experiment: "marginal-comparison".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        records,
        aggregates,
        summary,
    }
}

/// The fixed 1-D hierarchy for the free-energy comparison: Gaussian parent
/// priors over horizontal distance, shared diagonal-dominant table.
pub fn build_chain_model(config: &FreeEnergyConfig) -> Result<DynamicTreeModel, ModelError> {
    let cpt = if config.force_uniform_cpts {
        Cpt::uniform(config.num_states)
    } else {
        Cpt::diagonal(config.num_states, config.cpt_diagonal)
    };
    build_layered_model(
        &config.layer_sizes,
        config.num_states,
        &ParentPriorSpec::GaussianOverDistance { sigma_factor: config.sigma_factor },
        &CptSpec::Shared(cpt),
        &RootPriorSpec::Uniform,
    )
}

/// Mean diagonal and off-diagonal entry of the fitted edge tables, over the
/// edges whose child is hidden. None when the model has no such edge.
pub fn q_diagonality(
    model: &DynamicTreeModel,
    state: &StructuredPosterior,
) -> Option<(f64, f64)> {
    let m = model.num_states();
    let mut diag = (0.0, 0usize);
    let mut off = (0.0, 0usize);
    for d in 1..model.num_layers() {
        for i in 0..model.layer_size(d) {
            let node = NodeRef::new(d, i);
            let flat = model.flat(node);
            if state.is_evidential(flat) {
                continue;
            }
            for slot in 0..model.num_slots(node) {
                let q = state.q_table(flat, slot);
                for l in 0..m {
                    for k in 0..m {
                        let v = q[crate::math::cm(k, l, m)];
                        if k == l {
                            diag = (diag.0 + v, diag.1 + 1);
                        } else {
                            off = (off.0 + v, off.1 + 1);
                        }
                    }
                }
            }
        }
    }
    if diag.1 == 0 {
        return None;
    }
    Some((diag.0 / diag.1 as f64, off.0 / off.1 as f64))
}

fn free_energy_case(
    config: &FreeEnergyConfig,
    model: &DynamicTreeModel,
    case: usize,
    evidence: &Evidence,
) -> RunRecord {
    let seed = derive_seed(config.master_seed, case as u64);
    let mut record = RunRecord {
        run: case,
        seed,
        metrics: BTreeMap::new(),
        error: None,
        wall_clock: BTreeMap::new(),
    };
    let outcome = (|| -> Result<(), InferenceError> {
        let t = Instant::now();
        let fitted = svi::fit(
            model,
            evidence,
            &FitOptions {
                max_passes: config.svi_max_passes,
                kl_tolerance: config.svi_tolerance,
                mu_damping: 0.0,
            },
        )?;
        record.wall_clock.insert("svi/seconds".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let factored = mean_field::fit(
            model,
            evidence,
            &MfOptions {
                inner_iters: config.mf_inner_iters,
                max_outer: config.mf_max_outer,
                tolerance: config.mf_tolerance,
                init_jitter: config.mf_init_jitter,
                seed,
            },
        )?;
        record.wall_clock.insert("mf/seconds".into(), t.elapsed().as_secs_f64());

        record.metrics.insert(
            "svi/free_energy".into(),
            *fitted.free_energy_trace().last().expect("non-empty"),
        );
        record.metrics.insert(
            "mf/free_energy".into(),
            *factored.free_energy_trace().last().expect("non-empty"),
        );
        if let Some((diag, off)) = q_diagonality(model, &fitted) {
            record.metrics.insert("svi/q_diagonal_mean".into(), diag);
            record.metrics.insert("svi/q_off_diagonal_mean".into(), off);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

/// Runs the free-energy comparison. The model build can fail on a bad
/// configuration; per-case failures are recorded, not fatal.
pub fn run_free_energy_comparison(
    config: &FreeEnergyConfig,
) -> Result<ComparisonReport, InferenceError> {
    let model = build_chain_model(config)?;
    let chain_length = model.layer_size(model.bottom_layer());
    let mut gen_rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let raw = gen_markov_cases(
        config.num_cases,
        chain_length,
        config.stay_prob,
        config.flip_noise,
        &mut gen_rng,
    );
    let cases: Vec<Evidence> = raw
        .into_iter()
        .map(|states| Evidence::for_model(&model, states).expect("binary states fit"))
        .collect();

    let records: Vec<RunRecord> = cases
        .par_iter()
        .enumerate()
        .map(|(case, evidence)| free_energy_case(config, &model, case, evidence))
        .collect();

    let aggregates = ComparisonReport::compute_aggregates(&records);
    let mut summary = BTreeMap::new();
    let paired: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| {
            Some((*r.metrics.get("svi/free_energy")?, *r.metrics.get("mf/free_energy")?))
        })
        .collect();
    if !paired.is_empty() {
        let wins = paired.iter().filter(|(s, f)| *s <= f + 1e-9).count();
        summary.insert("svi_win_rate".into(), wins as f64 / paired.len() as f64);
        summary.insert(
            "mean_free_energy_gap".into(),
            paired.iter().map(|(s, f)| f - s).sum::<f64>() / paired.len() as f64,
        );
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    summary.insert("cases_failed".into(), failed as f64);

    Ok(ComparisonReport {
        format_version: REPORT_FORMAT_VERSION,
        experiment: "free-energy-comparison".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        records,
        aggregates,
        summary,
    })
}
