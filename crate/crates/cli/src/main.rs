//! Command line front end: write example models and sampled data, run
//! single-case inference under any of the four methods, print side-by-side
//! marginal tables against the exact posterior, learn tables by EM, and
//! drive the batch experiments from JSON configs.
//!
//! Exit codes: 0 on success, 2 for unreadable or invalid input, 3 when the
//! computation itself fails (impossible evidence, enumeration over the tree
//! limit, every experiment run failing). All randomness flows from `--seed`
//! or the config file, never from the clock, so rerunning any command with
//! the same inputs produces byte-identical output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyntree::error::InferenceError;
use dyntree::harness::{
    build_chain_model, build_marginal_model, gen_markov_cases, hidden_rows, marginal_kl_sum,
    run_free_energy_comparison, run_marginal_comparison, sample_leaf_evidence, ComparisonReport,
    FreeEnergyConfig, MarginalConfig,
};
use dyntree::io;
use dyntree::loopy::{self, LoopyOptions};
use dyntree::mean_field::{self, MfOptions};
use dyntree::model::{DynamicTreeModel, Evidence};
use dyntree::oracle;
use dyntree::svi::{self, EmOptions, FitOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dyntree", version, about = "Dynamic-tree belief network toolkit")]
struct Cli {
    /// Worker threads for the batch experiments (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a model file, and optionally sampled data, for one of the two
    /// built-in families.
    Generate(GenerateArgs),
    /// Posterior marginals for one evidence case under a chosen method.
    Infer(InferArgs),
    /// Exact posterior by enumeration over every tree in the mixture.
    Oracle(OracleArgs),
    /// Side-by-side marginal table: exact, structured variational, loopy.
    Compare(CompareArgs),
    /// Variational EM over a dataset of evidence cases.
    Learn(LearnArgs),
    /// Batch comparison experiment driven by a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Family {
    /// Layered grid where each node chooses between the parent above and
    /// its wraparound right neighbour.
    Grid,
    /// 1-D hierarchy with Gaussian parent menus and a shared diagonal table.
    Chain,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    /// Structured variational fit over trees and states.
    Svi,
    /// Fully factorized variational fit.
    Mf,
    /// Loopy belief propagation over all candidate edges.
    Loopy,
    /// Exact enumeration over trees.
    Oracle,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Svi => "svi",
            Method::Mf => "mf",
            Method::Loopy => "loopy",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = Family::Grid)]
    family: Family,
    /// Comma-separated layer widths, top to bottom (default: the family's
    /// experiment shape).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file path.
    #[arg(long)]
    out: PathBuf,
    /// Also sample one evidence case to this path.
    #[arg(long)]
    evidence_out: Option<PathBuf>,
    /// Also sample a dataset of `--cases` evidence cases to this path.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    evidence: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result document path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Sweep limit: fit passes for svi, outer iterations for mf, message
    /// iterations for loopy (default 50, 50, 200).
    #[arg(long)]
    max_passes: Option<usize>,
    /// Convergence threshold: free-energy change for svi and mf, largest
    /// message change for loopy (default 1e-6).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Enumeration cap for the oracle.
    #[arg(long, default_value_t = 1_000_000)]
    tree_limit: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    evidence: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Enumeration cap; the command fails with the actual count when the
    /// mixture is larger.
    #[arg(long, default_value_t = 1_000_000)]
    tree_limit: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    evidence: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_passes: usize,
    /// Free-energy convergence threshold for the variational fit.
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    #[arg(long, default_value_t = 1_000_000)]
    tree_limit: u64,
}

#[derive(Args)]
struct LearnArgs {
    /// Starting model; its tables and menu priors are re-estimated.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learned model path.
    #[arg(long)]
    out: PathBuf,
    /// Report document path (default: the model path with a .report.json
    /// extension).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Additive count smoothing for the re-estimation step.
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    #[arg(long, default_value_t = 20)]
    max_passes: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config with an "experiment" field naming the comparison.
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Experiment config file: the `experiment` field picks the comparison and
/// the remaining fields override that comparison's defaults.
#[derive(Deserialize)]
#[serde(tag = "experiment")]
enum ExperimentConfig {
    #[serde(rename = "marginal-comparison")]
    Marginal(MarginalConfig),
    #[serde(rename = "free-energy-comparison")]
    FreeEnergy(FreeEnergyConfig),
}

enum Failure {
    /// Unreadable or invalid input.
    Input(String),
    /// The computation itself failed or refused.
    Compute(String),
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Failure {
        Failure::Compute(e.to_string())
    }
}

fn input_err(context: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{context} {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Learn(args) => cmd_learn(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_model(path: &Path) -> Result<DynamicTreeModel, Failure> {
    io::load_model(path).map_err(|e| input_err("model", path, e))
}

fn load_evidence(path: &Path, model: &DynamicTreeModel) -> Result<Evidence, Failure> {
    io::load_evidence(path, model).map_err(|e| input_err("evidence", path, e))
}

fn write_doc(path: &Path, doc: &Value) -> Result<(), Failure> {
    let mut text =
        serde_json::to_string_pretty(doc).expect("documents built from plain values");
    text.push('\n');
    fs::write(path, text).map_err(|e| input_err("output", path, e))
}

/// One-line record of what actually ran, defaults included, printed by
/// every command.
fn echo(command: &str, config: &Value) {
    println!("{}", json!({ "command": command, "config": config }));
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (model, config) = match args.family {
        Family::Grid => {
            let mut cfg = MarginalConfig { master_seed: args.seed, ..MarginalConfig::default() };
            if let Some(layers) = &args.layers {
                cfg.layer_sizes = layers.clone();
            }
            if let Some(states) = args.states {
                cfg.num_states = states;
            }
            let model = build_marginal_model(&cfg, &mut rng)
                .map_err(|e| Failure::Input(format!("grid model: {e}")))?;
            let config = json!({
                "family": "grid",
                "layers": cfg.layer_sizes,
                "states": cfg.num_states,
                "rho_above": cfg.rho_above,
                "seed": args.seed,
            });
            (model, config)
        }
        Family::Chain => {
            let mut cfg = FreeEnergyConfig { master_seed: args.seed, ..FreeEnergyConfig::default() };
            if let Some(layers) = &args.layers {
                cfg.layer_sizes = layers.clone();
            }
            if let Some(states) = args.states {
                cfg.num_states = states;
            }
            let model = build_chain_model(&cfg)
                .map_err(|e| Failure::Input(format!("chain model: {e}")))?;
            let config = json!({
                "family": "chain",
                "layers": cfg.layer_sizes,
                "states": cfg.num_states,
                "sigma_factor": cfg.sigma_factor,
                "cpt_diagonal": cfg.cpt_diagonal,
                "stay_prob": cfg.stay_prob,
                "flip_noise": cfg.flip_noise,
                "seed": args.seed,
            });
            (model, config)
        }
    };
    io::save_model(&args.out, &model).map_err(|e| input_err("output", &args.out, e))?;

    let draw_case = |rng: &mut ChaCha8Rng| -> Evidence {
        match args.family {
            Family::Grid => sample_leaf_evidence(&model, rng),
            Family::Chain => {
                let length = model.layer_size(model.bottom_layer());
                let states = gen_markov_cases(1, length, 0.9, 0.1, rng).remove(0);
                Evidence::for_model(&model, states).expect("chain states are in range")
            }
        }
    };
    if let Some(path) = &args.evidence_out {
        let case = draw_case(&mut rng);
        io::save_evidence(path, &case).map_err(|e| input_err("output", path, e))?;
    }
    if let Some(path) = &args.dataset_out {
        let cases: Vec<Evidence> = (0..args.cases).map(|_| draw_case(&mut rng)).collect();
        io::save_dataset(path, &cases).map_err(|e| input_err("output", path, e))?;
    }
    let mut config = config;
    let fields = config.as_object_mut().expect("config is an object");
    fields.insert("out".into(), json!(args.out));
    fields.insert("evidence_out".into(), json!(args.evidence_out));
    fields.insert("dataset_out".into(), json!(args.dataset_out));
    fields.insert("cases".into(), json!(args.cases));
    echo("generate", &config);
    Ok(())
}

/// Exact-posterior payload shared by `oracle` and `infer --method oracle`.
fn oracle_payload(
    model: &DynamicTreeModel,
    evidence: &Evidence,
    tree_limit: u64,
) -> Result<Value, Failure> {
    let exact = oracle::exact_posterior(model, evidence, tree_limit as u128)?;
    let top: Vec<Value> = exact
        .top_trees
        .iter()
        .map(|(tree, weight)| json!({ "chosen": tree.chosen, "weight": weight }))
        .collect();
    Ok(json!({
        "log_evidence": exact.log_evidence,
        "marginals": exact.node_marginals,
        "edge_posterior": exact.edge_posterior,
        "tree_count": oracle::tree_count(model) as u64,
        "top_trees": top,
    }))
}

fn cmd_infer(args: InferArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let evidence = load_evidence(&args.evidence, &model)?;
    let mut config = json!({
        "model": args.model,
        "evidence": args.evidence,
        "method": args.method.name(),
        "seed": args.seed,
        "out": args.out,
    });
    let fields = config.as_object_mut().expect("config is an object");

    let result = match args.method {
        Method::Svi => {
            let passes = args.max_passes.unwrap_or(50);
            let tolerance = args.tolerance.unwrap_or(1e-6);
            fields.insert("max_passes".into(), json!(passes));
            fields.insert("tolerance".into(), json!(tolerance));
            let options =
                FitOptions { max_passes: passes, kl_tolerance: tolerance, mu_damping: 0.0 };
            let state = svi::fit(&model, &evidence, &options)?;
            json!({
                "marginals": state.marginals(),
                "free_energy": state.free_energy_trace().last(),
                "free_energy_trace": state.free_energy_trace(),
                "menu_weights": state.mu(),
                "map_tree": state.map_tree(&model).chosen,
            })
        }
        Method::Mf => {
            let passes = args.max_passes.unwrap_or(50);
            let tolerance = args.tolerance.unwrap_or(1e-6);
            fields.insert("max_outer".into(), json!(passes));
            fields.insert("tolerance".into(), json!(tolerance));
            let options = MfOptions {
                max_outer: passes,
                tolerance,
                seed: args.seed,
                ..MfOptions::default()
            };
            fields.insert("inner_iters".into(), json!(options.inner_iters));
            fields.insert("init_jitter".into(), json!(options.init_jitter));
            let state = mean_field::fit(&model, &evidence, &options)?;
            json!({
                "marginals": state.marginals(),
                "free_energy": state.free_energy_trace().last(),
                "free_energy_trace": state.free_energy_trace(),
                "menu_weights": state.mu(),
            })
        }
        Method::Loopy => {
            let iterations = args.max_passes.unwrap_or(200);
            let tolerance = args.tolerance.unwrap_or(1e-6);
            fields.insert("max_iterations".into(), json!(iterations));
            fields.insert("message_tolerance".into(), json!(tolerance));
            fields.insert("damping".into(), json!(0.1));
            let options = LoopyOptions {
                damping: 0.1,
                max_iterations: iterations,
                message_tolerance: tolerance,
            };
            let run = loopy::propagate(&model, &evidence, &options)?;
            json!({
                "marginals": run.marginals,
                "iterations": run.iterations,
                "converged": run.converged,
            })
        }
        Method::Oracle => {
            fields.insert("tree_limit".into(), json!(args.tree_limit));
            oracle_payload(&model, &evidence, args.tree_limit)?
        }
    };

    let doc = json!({
        "format_version": 1,
        "kind": "inference-result",
        "config": config,
        "result": result,
    });
    write_doc(&args.out, &doc)?;
    echo("infer", &config);
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let evidence = load_evidence(&args.evidence, &model)?;
    let config = json!({
        "model": args.model,
        "evidence": args.evidence,
        "seed": args.seed,
        "out": args.out,
        "tree_limit": args.tree_limit,
    });
    let result = oracle_payload(&model, &evidence, args.tree_limit)?;
    let doc = json!({
        "format_version": 1,
        "kind": "exact-posterior",
        "config": config,
        "result": result,
    });
    write_doc(&args.out, &doc)?;
    echo("oracle", &config);
    Ok(())
}

fn format_row(row: &[f64]) -> String {
    row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let evidence = load_evidence(&args.evidence, &model)?;
    let exact = oracle::exact_posterior(&model, &evidence, args.tree_limit as u128)?;
    let options = FitOptions {
        max_passes: args.max_passes,
        kl_tolerance: args.tolerance,
        mu_damping: 0.0,
    };
    let fitted = svi::fit(&model, &evidence, &options)?;
    let loopy_options =
        LoopyOptions { damping: 0.1, max_iterations: 200, message_tolerance: 1e-6 };
    let passed = loopy::propagate(&model, &evidence, &loopy_options)?;

    let truth = hidden_rows(&model, &exact.node_marginals);
    let structured = hidden_rows(&model, fitted.marginals());
    let loopy_rows = hidden_rows(&model, &passed.marginals);
    let kl_svi = marginal_kl_sum(truth, structured)?;
    let kl_loopy = marginal_kl_sum(truth, loopy_rows)?;

    let mut text = String::new();
    writeln!(text, "# marginal comparison: exact posterior vs svi vs loopy").unwrap();
    writeln!(text, "# model {} evidence {}", args.model.display(), args.evidence.display())
        .unwrap();
    writeln!(
        text,
        "# seed {} svi max_passes {} tolerance {} loopy damping {} max_iterations {} \
         message_tolerance {} tree_limit {}",
        args.seed, args.max_passes, args.tolerance, 0.1, 200, 1e-6, args.tree_limit
    )
    .unwrap();
    for (flat, ((t, s), l)) in truth.iter().zip(structured).zip(loopy_rows).enumerate() {
        writeln!(text, "node {}", model.node_at(flat)).unwrap();
        writeln!(text, "  true  {}", format_row(t)).unwrap();
        writeln!(text, "  svi   {}", format_row(s)).unwrap();
        writeln!(text, "  loopy {}", format_row(l)).unwrap();
    }
    writeln!(text, "summed KL true||svi = {kl_svi:.6}").unwrap();
    writeln!(text, "summed KL true||loopy = {kl_loopy:.6}").unwrap();
    fs::write(&args.out, text).map_err(|e| input_err("output", &args.out, e))?;

    let config = json!({
        "model": args.model,
        "evidence": args.evidence,
        "seed": args.seed,
        "out": args.out,
        "max_passes": args.max_passes,
        "tolerance": args.tolerance,
        "tree_limit": args.tree_limit,
        "summed_kl_svi": kl_svi,
        "summed_kl_loopy": kl_loopy,
    });
    echo("compare", &config);
    Ok(())
}

fn cmd_learn(args: LearnArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let cases =
        io::load_dataset(&args.dataset, &model).map_err(|e| input_err("dataset", &args.dataset, e))?;
    let options = EmOptions {
        iterations: args.iterations,
        smoothing: args.smoothing,
        fit: FitOptions {
            max_passes: args.max_passes,
            kl_tolerance: args.tolerance,
            mu_damping: 0.0,
        },
    };
    let (learned, trace) = svi::em_fit(&model, &cases, &options)?;
    io::save_model(&args.out, &learned).map_err(|e| input_err("output", &args.out, e))?;

    let report_path =
        args.report.clone().unwrap_or_else(|| args.out.with_extension("report.json"));
    let config = json!({
        "model": args.model,
        "dataset": args.dataset,
        "cases": cases.len(),
        "seed": args.seed,
        "out": args.out,
        "iterations": args.iterations,
        "smoothing": args.smoothing,
        "max_passes": args.max_passes,
        "tolerance": args.tolerance,
    });
    let doc = json!({
        "format_version": 1,
        "kind": "learning-report",
        "config": config,
        "total_free_energy_trace": trace,
    });
    write_doc(&report_path, &doc)?;
    echo("learn", &config);
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Failure> {
    let text =
        fs::read_to_string(&args.config).map_err(|e| input_err("config", &args.config, e))?;
    let mut parsed: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| input_err("config", &args.config, e))?;
    if let Some(seed) = args.seed {
        match &mut parsed {
            ExperimentConfig::Marginal(c) => c.master_seed = seed,
            ExperimentConfig::FreeEnergy(c) => c.master_seed = seed,
        }
    }
    let report: ComparisonReport = match &parsed {
        ExperimentConfig::Marginal(c) => run_marginal_comparison(c),
        ExperimentConfig::FreeEnergy(c) => run_free_energy_comparison(c).map_err(|e| match e {
            InferenceError::Model(m) => Failure::Input(format!("config: {m}")),
            other => Failure::Compute(other.to_string()),
        })?,
    };
    if !report.records.is_empty() && report.records.iter().all(|r| r.error.is_some()) {
        let first = report.records[0].error.clone().unwrap_or_default();
        return Err(Failure::Compute(format!(
            "all {} runs failed; first error: {first}",
            report.records.len()
        )));
    }

    fs::create_dir_all(&args.out_dir).map_err(|e| input_err("output", &args.out_dir, e))?;
    let json_path = args.out_dir.join("report.json");
    let mut doc =
        serde_json::to_string_pretty(&report).expect("reports serialize");
    doc.push('\n');
    fs::write(&json_path, doc).map_err(|e| input_err("output", &json_path, e))?;
    let csv_path = args.out_dir.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| input_err("output", &csv_path, e))?;

    let config = json!({
        "experiment": report.experiment,
        "out_dir": args.out_dir,
        "threads": rayon::current_num_threads(),
        "resolved": report.config,
        "summary": report.summary,
    });
    echo("experiment", &config);
    Ok(())
}
