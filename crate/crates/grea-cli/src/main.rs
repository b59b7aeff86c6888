//! Operator entry points for the grea engine: dataset generation,
//! training, evaluation, rationale dumps, benchmarking, and a
//! finite-difference gradient self-check.
//!
//! Machine-readable output (JSON/JSONL/CSV) goes to stdout; human
//! summaries go to stderr. Exit codes: 0 success, 1 usage or I/O error,
//! 2 numerical abort, 3 self-check failure.

use clap::{Parser, Subcommand};
use grea::bench::run_bench;
use grea::data::{
    gen_planted_motif_meta, load_jsonl, make_batches, save_jsonl, DataError, DatasetSplit, Graph,
    SyntheticSpec,
};
use grea::model::{forward_losses, infer, ModelParams};
use grea::tensor::{grad_check, Param, TensorError};
use grea::train::{evaluate, train, Checkpoint, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// ── Errors and exit codes ────────────────────────────────────────────

enum CliError {
    /// Bad flags, unreadable files, schema violations. Exit 1.
    UsageIo(String),
    /// NaN/inf reached a loss, gradient, or parameter. Exit 2.
    Numerical(String),
    /// The gradient audit exceeded its tolerance. Exit 3.
    SelfCheck(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::UsageIo(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::SelfCheck(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::UsageIo(m) | CliError::Numerical(m) | CliError::SelfCheck(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::UsageIo(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match &e {
            TensorError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::UsageIo(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::UsageIo(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::UsageIo(format!("{what} {}: {e}", path.display()))
}

// ── Config file ──────────────────────────────────────────────────────

/// One JSON file can drive the whole pipeline: a `train` section
/// (TrainConfig), a `synthetic` section (SyntheticSpec), and default
/// paths. Every section is optional and unknown keys are rejected at
/// every level. Command-line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfigFile {
    train: TrainConfig,
    synthetic: SyntheticSpec,
    data: Option<PathBuf>,
    split_file: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl RunConfigFile {
    fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| io_err("cannot read config", path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err("invalid config", path, e))
    }

    fn load_or_default(path: Option<&PathBuf>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

/// Seed precedence: `--seed` flag, then `GREA_SEED`, then the config file.
fn resolve_seed(flag: Option<u64>, file_seed: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("GREA_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::UsageIo(format!("GREA_SEED must be an integer, got {v:?}"))),
        Err(_) => Ok(file_seed),
    }
}

// ── Command line ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "grea",
    version,
    about = "Graph rationalization: train with latent environment replacement",
    after_help = "Exit codes: 0 ok, 1 usage/I-O, 2 numerical abort, 3 self-check failure."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted-motif dataset (JSONL) plus a sidecar split file.
    GenData {
        /// Config file; the `synthetic` section describes the dataset.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset path; the split lands next to it as <out>.split.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a checkpoint and a per-epoch history JSON.
    Train {
        /// Config file; the `train` section holds hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset JSONL (falls back to the config's `data` path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split index file (default: <data>.split.json if present).
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Checkpoint output path; history goes to <out>.history.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split; prints a metrics JSON object.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split index file (default: <data>.split.json if present).
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Which portion to evaluate: train, valid, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Dump per-graph node masks and top-k rationale indices as JSONL.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split index file (default: <data>.split.json if present).
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Portion to explain: train, valid, test, or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Finite-difference audit of both training losses on a small batch.
    GradCheck {
        /// Config file; without one a compact audit architecture is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Max relative error allowed before exiting 3.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time latent replacement against explicit union re-encoding (CSV).
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,32,128")]
        batch_sizes: Vec<usize>,
        /// Timed repetitions per batch size (median reported).
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Checkpoint supplying the model; omitted → seeded random init.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    // clap would exit 2 on bad flags; route usage problems to exit 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are "errors" to clap but successes to us
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData { spec, out, seed } => cmd_gen_data(spec, out, seed),
        Cmd::Train { config, data, split_file, out, seed } => {
            cmd_train(config, data, split_file, out, seed)
        }
        Cmd::Eval { ckpt, data, split_file, split } => cmd_eval(ckpt, data, split_file, &split),
        Cmd::Explain { ckpt, data, out, split_file, split } => {
            cmd_explain(ckpt, data, out, split_file, &split)
        }
        Cmd::GradCheck { config, tolerance, eps, seed } => {
            cmd_grad_check(config, tolerance, eps, seed)
        }
        Cmd::Bench { data, batch_sizes, reps, ckpt, config, seed } => {
            cmd_bench(data, &batch_sizes, reps, ckpt, config, seed)
        }
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────

fn sidecar_split_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".split.json");
    data.with_file_name(name)
}

fn load_split(data_path: &Path, flag: Option<PathBuf>, n: usize) -> CliResult<DatasetSplit> {
    let path = match flag {
        Some(p) => p,
        None => {
            let sidecar = sidecar_split_path(data_path);
            if !sidecar.exists() {
                return Err(CliError::UsageIo(format!(
                    "no split file: {} not found and --split-file not given",
                    sidecar.display()
                )));
            }
            sidecar
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| io_err("cannot read split", &path, e))?;
    let split: DatasetSplit =
        serde_json::from_str(&text).map_err(|e| io_err("invalid split", &path, e))?;
    for &i in split.train.iter().chain(&split.valid).chain(&split.test) {
        if i >= n {
            return Err(CliError::UsageIo(format!(
                "split {} references graph {i}, dataset has only {n}",
                path.display()
            )));
        }
    }
    Ok(split)
}

fn select_indices(split: &DatasetSplit, name: &str, n: usize) -> CliResult<Vec<usize>> {
    Ok(match name {
        "train" => split.train.clone(),
        "valid" => split.valid.clone(),
        "test" => split.test.clone(),
        "all" => (0..n).collect(),
        other => {
            return Err(CliError::UsageIo(format!(
                "unknown split {other:?}; expected train, valid, test, or all"
            )))
        }
    })
}

fn load_dataset(path: &Path) -> CliResult<Vec<Graph>> {
    let graphs = load_jsonl(path).map_err(|e| io_err("cannot load dataset", path, e))?;
    if graphs.is_empty() {
        return Err(CliError::UsageIo(format!("dataset {} is empty", path.display())));
    }
    Ok(graphs)
}

fn check_feature_width(ckpt: &Checkpoint, graphs: &[Graph]) -> CliResult<()> {
    let actual = graphs[0].num_features;
    if ckpt.num_features != actual {
        return Err(CliError::UsageIo(format!(
            "feature width mismatch: checkpoint expects F={}, dataset has F={actual}",
            ckpt.num_features
        )));
    }
    Ok(())
}

fn write_stdout(value: &serde_json::Value) {
    println!("{value}");
}

// ── gen-data ─────────────────────────────────────────────────────────

fn cmd_gen_data(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> CliResult<()> {
    let file = RunConfigFile::load_or_default(spec.as_ref())?;
    let mut synth = file.synthetic;
    synth.seed = resolve_seed(seed, synth.seed)?;

    let (graphs, meta) = gen_planted_motif_meta(&synth)?;
    save_jsonl(&out, &graphs)?;
    let split_path = sidecar_split_path(&out);
    let split_json = serde_json::to_string(&meta.split)
        .map_err(|e| CliError::UsageIo(format!("serialize split: {e}")))?;
    std::fs::write(&split_path, split_json + "\n")
        .map_err(|e| io_err("cannot write split", &split_path, e))?;

    let n = graphs.len() as f64;
    let label_balance =
        graphs.iter().filter_map(|g| g.label).filter(|&y| y == 1.0).count() as f64 / n;
    let mean_nodes = graphs.iter().map(|g| g.num_nodes as f64).sum::<f64>() / n;
    let mean_edges = graphs.iter().map(|g| g.edges.len() as f64).sum::<f64>() / n;
    let summary = json!({
        "out": out,
        "split_file": split_path,
        "num_graphs": graphs.len(),
        "num_features": graphs[0].num_features,
        "label_balance": label_balance,
        "mean_nodes": mean_nodes,
        "mean_edges": mean_edges,
        "split_sizes": {
            "train": meta.split.train.len(),
            "valid": meta.split.valid.len(),
            "test": meta.split.test.len(),
        },
        "seed": synth.seed,
    });
    write_stdout(&summary);
    eprintln!(
        "wrote {} graphs to {} (balance {:.3}, mean {:.1} nodes / {:.1} edges), split {}",
        graphs.len(),
        out.display(),
        label_balance,
        mean_nodes,
        mean_edges,
        split_path.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    split_file: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult<()> {
    let file = RunConfigFile::load_or_default(config.as_ref())?;
    let mut cfg = file.train;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let data_path = data
        .or(file.data)
        .ok_or_else(|| CliError::UsageIo("no dataset: pass --data or set `data` in the config".into()))?;
    let out_path = out
        .or(file.out)
        .ok_or_else(|| CliError::UsageIo("no output: pass --out or set `out` in the config".into()))?;

    let graphs = load_dataset(&data_path)?;
    let split = load_split(&data_path, split_file.or(file.split_file), graphs.len())?;

    let (params, history) = train(&graphs, &split, &cfg)?;
    let ckpt = Checkpoint::new(cfg, graphs[0].num_features, params);
    ckpt.save(&out_path)?;

    let history_path = PathBuf::from(format!("{}.history.json", out_path.display()));
    let history_json = serde_json::to_string(&history)
        .map_err(|e| CliError::UsageIo(format!("serialize history: {e}")))?;
    std::fs::write(&history_path, history_json + "\n")
        .map_err(|e| io_err("cannot write history", &history_path, e))?;

    write_stdout(&json!({
        "checkpoint": out_path,
        "history": history_path,
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val": history.best_val,
        "stopped_early": history.stopped_early,
    }));
    eprintln!(
        "trained {} epochs; best validation {:.4} at epoch {}{}",
        history.epochs.len(),
        history.best_val,
        history.best_epoch,
        if history.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(ckpt: PathBuf, data: PathBuf, split_file: Option<PathBuf>, split: &str) -> CliResult<()> {
    let ckpt = Checkpoint::load(&ckpt)?;
    let graphs = load_dataset(&data)?;
    check_feature_width(&ckpt, &graphs)?;
    let indices = if split == "all" {
        (0..graphs.len()).collect()
    } else {
        let spl = load_split(&data, split_file, graphs.len())?;
        select_indices(&spl, split, graphs.len())?
    };
    let model_config = ckpt.config.model_config(ckpt.num_features);
    let record = evaluate(&graphs, &indices, &model_config, &ckpt.params, ckpt.config.batch_size)?;
    let value = serde_json::to_value(&record)
        .map_err(|e| CliError::UsageIo(format!("serialize metrics: {e}")))?;
    write_stdout(&value);
    eprintln!("evaluated {} graphs from split {split:?}", indices.len());
    Ok(())
}

// ── explain ──────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ExplainLine<'a> {
    graph_index: usize,
    mask: &'a [f64],
    topk: Vec<usize>,
}

/// Highest-mask node indices; k = max(1, round(γ·n)), ties break toward
/// the lower node index.
fn topk_nodes(mask: &[f64], gamma: f64) -> Vec<usize> {
    let k = ((gamma * mask.len() as f64).round() as usize).max(1).min(mask.len());
    let mut order: Vec<usize> = (0..mask.len()).collect();
    order.sort_by(|&a, &b| mask[b].partial_cmp(&mask[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn cmd_explain(
    ckpt: PathBuf,
    data: PathBuf,
    out: PathBuf,
    split_file: Option<PathBuf>,
    split: &str,
) -> CliResult<()> {
    let ckpt = Checkpoint::load(&ckpt)?;
    let graphs = load_dataset(&data)?;
    check_feature_width(&ckpt, &graphs)?;
    let indices: Vec<usize> = if split == "all" {
        (0..graphs.len()).collect()
    } else {
        let spl = load_split(&data, split_file, graphs.len())?;
        select_indices(&spl, split, graphs.len())?
    };
    if indices.is_empty() {
        return Err(CliError::UsageIo(format!("split {split:?} selects no graphs")));
    }

    let model_config = ckpt.config.model_config(ckpt.num_features);
    let subset: Vec<Graph> = indices.iter().map(|&i| graphs[i].clone()).collect();
    let batches = make_batches(&subset, ckpt.config.batch_size.max(1), None)?;

    let mut lines = Vec::with_capacity(indices.len());
    for batch in &batches {
        let inferred = infer(batch, &model_config, &ckpt.params)?;
        let mut graph_masks: Vec<Vec<f64>> = vec![Vec::new(); batch.num_graphs];
        for (&seg, &m) in batch.segments.iter().zip(&inferred.mask_values) {
            graph_masks[seg].push(m);
        }
        for (local, mask) in graph_masks.into_iter().enumerate() {
            let dataset_index = indices[batch.graph_indices[local]];
            lines.push((dataset_index, mask));
        }
    }
    lines.sort_by_key(|&(i, _)| i);

    let mut body = String::new();
    for (graph_index, mask) in &lines {
        let line = ExplainLine {
            graph_index: *graph_index,
            mask,
            topk: topk_nodes(mask, ckpt.config.gamma),
        };
        body.push_str(
            &serde_json::to_string(&line)
                .map_err(|e| CliError::UsageIo(format!("serialize explanation: {e}")))?,
        );
        body.push('\n');
    }
    std::fs::write(&out, body).map_err(|e| io_err("cannot write explanations", &out, e))?;

    write_stdout(&json!({ "out": out, "graphs": lines.len() }));
    eprintln!("explained {} graphs to {}", lines.len(), out.display());
    Ok(())
}

// ── grad-check ───────────────────────────────────────────────────────

fn cmd_grad_check(
    config: Option<PathBuf>,
    tolerance: f64,
    eps: f64,
    seed: Option<u64>,
) -> CliResult<()> {
    let mut cfg = match &config {
        Some(p) => RunConfigFile::load(p)?.train,
        // compact architecture so the audit stays quick
        None => TrainConfig { d1: 4, d2: 4, l1: 1, l2: 1, ..TrainConfig::default() },
    };
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    cfg.validate()?;

    let spec = SyntheticSpec {
        num_graphs: 3,
        base_size: (4, 6),
        seed: cfg.seed,
        ..SyntheticSpec::default()
    };
    let graphs = gen_planted_motif_meta(&spec)?.0;
    let indices: Vec<usize> = (0..graphs.len()).collect();
    let batch = grea::data::GraphBatch::from_indices(&graphs, &indices, graphs[0].num_features);

    let model_config = cfg.model_config(batch.num_features);
    let aug = cfg.aug_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = ModelParams::init(&model_config, &mut rng);
    let probe: Vec<Param> = template.params().into_iter().cloned().collect();

    let mut worst = json!(null);
    let mut max_rel_err = 0.0f64;
    for (loss_name, pick_sep) in [("l_sep", true), ("l_pred", false)] {
        let report = grad_check(&probe, eps, |tape, ps| {
            let mut model = template.clone();
            for (dst, src) in model.params_mut().into_iter().zip(ps) {
                dst.values = src.values.clone();
            }
            let binds = model.bind(tape, true, true)?;
            let leaves = binds.leaves();
            let losses =
                forward_losses(tape, &batch, &model_config, &binds, &aug, cfg.diag_in_rep)?;
            let loss = if pick_sep { losses.l_sep } else { losses.l_pred };
            Ok((loss, leaves))
        })?;
        if report.max_rel_err >= max_rel_err {
            max_rel_err = report.max_rel_err;
            worst = json!({
                "loss": loss_name,
                "param": report.worst_param,
                "index": report.worst_index,
                "analytic": report.worst_analytic,
                "numeric": report.worst_numeric,
            });
        }
        eprintln!(
            "{loss_name}: checked {} partials, max rel err {:.3e}",
            report.n_checked, report.max_rel_err
        );
    }

    let pass = max_rel_err < tolerance;
    write_stdout(&json!({
        "max_rel_err": max_rel_err,
        "tolerance": tolerance,
        "eps": eps,
        "pass": pass,
        "worst": worst,
    }));
    if pass {
        Ok(())
    } else {
        Err(CliError::SelfCheck(format!(
            "gradient audit failed: max rel err {max_rel_err:.3e} ≥ {tolerance:.1e}"
        )))
    }
}

// ── bench ────────────────────────────────────────────────────────────

fn cmd_bench(
    data: PathBuf,
    batch_sizes: &[usize],
    reps: usize,
    ckpt: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult<()> {
    let graphs = load_dataset(&data)?;
    let (model_config, params) = match ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            check_feature_width(&ckpt, &graphs)?;
            (ckpt.config.model_config(ckpt.num_features), ckpt.params)
        }
        None => {
            let mut cfg = RunConfigFile::load_or_default(config.as_ref())?.train;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            let model_config = cfg.model_config(graphs[0].num_features);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (model_config, ModelParams::init(&model_config, &mut rng))
        }
    };

    let report = run_bench(&graphs, &model_config, &params, batch_sizes, reps)?;
    print!("{}", report.to_csv());
    for case in &report.cases {
        eprintln!(
            "B={}: latent {:.2} ms, explicit {:.2} ms, {:.1}× faster, max dev {:.2e}",
            case.b, case.t_latent_ms, case.t_explicit_ms, case.speedup, case.max_abs_dev
        );
    }
    Ok(())
}
