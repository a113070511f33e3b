//! Command implementations behind the `natforge` binary.
//!
//! Every command is a plain function from parsed flags to a
//! [`CommandResult`], so tests can drive them without spawning processes.
//! Outputs are written atomically (temp file, then rename) and each data
//! file gets a `<file>.manifest.json` recording the seed, the flags that
//! shaped the output, and a hash of both.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use natforge::archgraph::{self, cost_of, parse_many, sample_uniform, serialize_many, CellGraph, ParseError};
use natforge::evaluator::{
    accuracy, DatasetConfig, PlantedOracle, ScoreProvider, SharedWeights, SyntheticDataset,
};
use natforge::gcnpolicy::{PolicyMode, PolicyParams};
use natforge::opspace::{audit, audit_csv, CostConfig, OpError};
use natforge::trainer::{self, dataset_seed, infer, Decode, Provider, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: graph {index}: {message}")]
    Graph {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("invalid flags: {0}")]
    Flags(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<OpError> for CliError {
    fn from(e: OpError) -> Self {
        CliError::Flags(e.to_string())
    }
}

/// Outcome of one command: exit code 0 iff every check passed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "natforge", version, about = "Cost-constrained cell optimization with a GCN transition policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every ordered operation pair against the transition rules.
    Audit(AuditArgs),
    /// Draw cells uniformly at random.
    Sample(SampleArgs),
    /// Cost every cell in a file.
    Cost(CostArgs),
    /// Run the alternating search loop.
    Train(TrainArgs),
    /// Apply a trained policy to every cell in a file.
    Optimize(OptimizeArgs),
    /// Compare original and optimized cells (mean and std).
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, Args)]
pub struct CostFlags {
    /// Input and output channels.
    #[arg(long, default_value_t = 128)]
    pub channels: u64,
    /// Feature-map height and width.
    #[arg(long, default_value_t = 32)]
    pub hw: u64,
}

impl CostFlags {
    fn config(&self) -> Result<CostConfig, CliError> {
        Ok(CostConfig::new(self.channels, self.channels, self.hw, self.hw)?)
    }
}

#[derive(Debug, Clone, Copy, Args)]
pub struct SeedFlag {
    /// Run seed; falls back to NATFORGE_SEED, then 0.
    #[arg(long, env = "NATFORGE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub cost: CostFlags,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Nodes per cell, inputs and output included.
    #[arg(long, default_value_t = 7)]
    pub nodes: usize,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[command(flatten)]
    pub seed: SeedFlag,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub cost: CostFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "nat++")]
    pub mode: PolicyMode,
    #[arg(long, default_value = "oracle")]
    pub provider: Provider,
    /// Entropy weight.
    #[arg(long, default_value_t = 0.003)]
    pub lambda: f64,
    /// Supernet learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub eta_w: f64,
    /// Policy learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub eta_theta: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Supernet and policy iterations per epoch.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Input cells per iteration.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Optimized samples per input cell.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Graph-convolution layers.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Nodes per cell, inputs and output included.
    #[arg(long, default_value_t = 7)]
    pub nodes: usize,
    /// Moving-average reward baseline decay in [0, 1); off when omitted.
    #[arg(long)]
    pub baseline_decay: Option<f64>,
    /// Epochs between evaluation records in the log; 0 disables them.
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub seed: SeedFlag,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "argmax")]
    pub decode: Decode,
    #[command(flatten)]
    pub seed: SeedFlag,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Original cells.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Optimized cells, in the same order.
    #[arg(long)]
    pub optimized: PathBuf,
    /// Directory written by `train`; supplies the scorer.
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub cost: CostFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(command: &Command) -> Result<CommandResult, CliError> {
    match command {
        Command::Audit(a) => cmd_audit(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Train(a) => cmd_train(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(bytes).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_graphs(path: &Path) -> Result<Vec<CellGraph>, CliError> {
    parse_many(&read_text(path)?).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Identifies an input by name and content so manifests do not depend on
/// where a run happened.
fn input_record(path: &Path) -> Result<Value, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(json!({ "name": file_name(path), "sha256": sha256_hex(&bytes) }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub config_hash: String,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, seed: Option<u64>, config: Value, files: Vec<String>) -> Self {
        let canonical = serde_json::to_vec(&json!({ "command": command, "seed": seed, "config": &config }))
            .expect("manifest config serializes");
        Self {
            command: command.to_string(),
            seed,
            config,
            config_hash: sha256_hex(&canonical),
            files,
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// Writes `body` to `out` (plus its manifest), or returns it for stdout.
fn emit(
    out: Option<&Path>,
    body: String,
    command: &str,
    seed: Option<u64>,
    config: Value,
) -> Result<(Vec<PathBuf>, Option<String>), CliError> {
    match out {
        None => Ok((Vec::new(), Some(body))),
        Some(path) => {
            write_atomic(path, body.as_bytes())?;
            let manifest_path = PathBuf::from(format!("{}.manifest.json", path.display()));
            let manifest = Manifest::new(command, seed, config, vec![file_name(path)]);
            write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
            Ok((vec![path.to_path_buf(), manifest_path], None))
        }
    }
}

fn finish(exit_code: i32, mut summary: String, emitted: (Vec<PathBuf>, Option<String>)) -> CommandResult {
    let (artifacts, stdout) = emitted;
    if let Some(body) = stdout {
        summary = format!("{body}{summary}");
    }
    CommandResult {
        exit_code,
        summary,
        artifacts,
    }
}

pub fn cmd_audit(args: &AuditArgs) -> Result<CommandResult, CliError> {
    let cfg = args.cost.config()?;
    let rows = audit(&cfg);
    let violations: Vec<String> = rows
        .iter()
        .filter(|r| r.is_violation())
        .map(|r| format!("{}->{}", r.from, r.to))
        .collect();
    let whitelisted = rows.iter().filter(|r| r.whitelisted).count();
    let summary = if violations.is_empty() {
        format!("audit: {} pairs, 0 violations, {whitelisted} whitelisted\n", rows.len())
    } else {
        format!(
            "audit: {} pairs, {} violations: {}\n",
            rows.len(),
            violations.len(),
            violations.join(", ")
        )
    };
    let config = json!({ "channels": args.cost.channels, "hw": args.cost.hw });
    let emitted = emit(args.out.as_deref(), audit_csv(&rows), "audit", None, config)?;
    Ok(finish(i32::from(!violations.is_empty()), summary, emitted))
}

fn intermediates_for(nodes: usize) -> Result<usize, CliError> {
    if nodes < 4 {
        return Err(CliError::Flags(format!("--nodes must be at least 4, got {nodes}")));
    }
    Ok(nodes - 3)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<CommandResult, CliError> {
    let intermediates = intermediates_for(args.nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.seed);
    let graphs: Vec<CellGraph> = (0..args.count).map(|_| sample_uniform(intermediates, &mut rng)).collect();
    let config = json!({ "nodes": args.nodes, "count": args.count });
    let emitted = emit(
        args.out.as_deref(),
        serialize_many(&graphs),
        "sample",
        Some(args.seed.seed),
        config,
    )?;
    Ok(finish(0, format!("sample: {} cells of {} nodes\n", graphs.len(), args.nodes), emitted))
}

pub const COST_CSV_HEADER: &str = "graph,nodes,params,madds";

pub fn cmd_cost(args: &CostArgs) -> Result<CommandResult, CliError> {
    let cfg = args.cost.config()?;
    let graphs = read_graphs(&args.input)?;
    let mut csv = format!("{COST_CSV_HEADER}\n");
    for (i, g) in graphs.iter().enumerate() {
        let c = cost_of(g, &cfg);
        csv.push_str(&format!("{i},{},{},{}\n", g.num_nodes(), c.total_params, c.total_madds));
    }
    let config = json!({
        "channels": args.cost.channels,
        "hw": args.cost.hw,
        "input": input_record(&args.input)?,
    });
    let emitted = emit(args.out.as_deref(), csv, "cost", None, config)?;
    Ok(finish(0, format!("cost: {} cells\n", graphs.len()), emitted))
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        m: args.m,
        n: args.n,
        entropy_weight: args.lambda,
        lr_supernet: args.eta_w,
        lr_policy: args.eta_theta,
        epochs: args.epochs,
        supernet_iters: args.iters,
        policy_iters: args.iters,
        seed: args.seed.seed,
        mode: args.mode,
        provider: args.provider,
        depth: args.depth,
        num_intermediate: intermediates_for(args.nodes)?,
        baseline_decay: args.baseline_decay,
        eval_interval: args.eval_every,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub const POLICY_FILE: &str = "policy.json";
pub const SUPERNET_FILE: &str = "supernet.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_checkpoint(dir: &Path, policy: &PolicyParams, weights: &SharedWeights) -> Result<Vec<PathBuf>, CliError> {
    let p = dir.join(POLICY_FILE);
    let w = dir.join(SUPERNET_FILE);
    write_atomic(&p, policy.to_json().as_bytes())?;
    write_atomic(&w, weights.to_json().as_bytes())?;
    Ok(vec![p, w])
}

pub fn cmd_train(args: &TrainArgs) -> Result<CommandResult, CliError> {
    let cfg = train_config(args)?;
    let dir = &args.out;
    let mut artifacts = Vec::new();
    let mut checkpoint_error = None;
    let out = trainer::run_with(cfg, |epoch, t| {
        let due = args.checkpoint_every > 0 && (epoch + 1) % args.checkpoint_every == 0 && epoch + 1 < cfg.epochs;
        if due && checkpoint_error.is_none() {
            let sub = dir.join("checkpoints").join(format!("epoch-{:04}", epoch + 1));
            match write_checkpoint(&sub, &t.policy, &t.weights) {
                Ok(paths) => artifacts.extend(paths),
                Err(e) => checkpoint_error = Some(e),
            }
        }
    })?;
    if let Some(e) = checkpoint_error {
        return Err(e);
    }
    artifacts.extend(write_checkpoint(dir, &out.policy, &out.weights)?);
    let oracle_path = dir.join(ORACLE_FILE);
    write_atomic(
        &oracle_path,
        serde_json::to_string_pretty(&out.oracle).expect("oracle serializes").as_bytes(),
    )?;
    artifacts.push(oracle_path);
    let log_path = dir.join(LOG_FILE);
    write_atomic(&log_path, out.log.to_jsonl().as_bytes())?;
    artifacts.push(log_path);

    let files: Vec<String> = artifacts
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
        .collect();
    let config = json!({ "train": cfg, "checkpoint_every": args.checkpoint_every });
    let manifest = Manifest::new("train", Some(cfg.seed), config, files);
    let manifest_path = dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    artifacts.push(manifest_path);

    let last = out.log.records().iter().rev().find(|r| r.phase == trainer::Phase::Policy);
    let summary = format!(
        "train: {} epochs, {} policy iterations, mode {}, provider {}; final mean reward {}, entropy {}\n",
        cfg.epochs,
        cfg.total_policy_iters(),
        cfg.mode,
        cfg.provider,
        last.and_then(|r| r.mean_reward).map_or("n/a".into(), |v| format!("{v:.4}")),
        last.and_then(|r| r.entropy).map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    Ok(CommandResult {
        exit_code: 0,
        summary,
        artifacts,
    })
}

/// A trained run loaded back from its directory.
pub struct TrainedRun {
    pub config: TrainConfig,
    pub policy: PolicyParams,
    pub weights: SharedWeights,
    pub oracle: PlantedOracle,
}

impl TrainedRun {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let bad = |path: &Path, message: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest =
            serde_json::from_str(&read_text(&manifest_path)?).map_err(|e| bad(&manifest_path, e.to_string()))?;
        let config: TrainConfig = serde_json::from_value(manifest.config["train"].clone())
            .map_err(|e| bad(&manifest_path, format!("train config: {e}")))?;
        let policy_path = dir.join(POLICY_FILE);
        let policy =
            PolicyParams::from_json(&read_text(&policy_path)?).map_err(|e| bad(&policy_path, e.to_string()))?;
        if policy.mode != config.mode {
            return Err(bad(&policy_path, format!("policy mode {} but run mode {}", policy.mode, config.mode)));
        }
        let weights_path = dir.join(SUPERNET_FILE);
        let weights =
            SharedWeights::from_json(&read_text(&weights_path)?).map_err(|e| bad(&weights_path, e.to_string()))?;
        let oracle_path = dir.join(ORACLE_FILE);
        let oracle: PlantedOracle =
            serde_json::from_str(&read_text(&oracle_path)?).map_err(|e| bad(&oracle_path, e.to_string()))?;
        Ok(Self {
            config,
            policy,
            weights,
            oracle,
        })
    }

    /// Oracle table score, or supernet accuracy on the whole validation split.
    pub fn scorer(&self) -> RunScorer<'_> {
        let dataset = (self.config.provider == Provider::Supernet)
            .then(|| SyntheticDataset::generate(DatasetConfig::default(), dataset_seed(self.config.seed)));
        RunScorer { run: self, dataset }
    }
}

pub struct RunScorer<'a> {
    run: &'a TrainedRun,
    dataset: Option<SyntheticDataset>,
}

impl ScoreProvider for RunScorer<'_> {
    fn score(&self, graph: &CellGraph) -> f64 {
        match &self.dataset {
            None => self.run.oracle.score(graph),
            Some(d) => accuracy(graph, &self.run.weights, &d.val_x, &d.val_y).expect("cell size matches the run"),
        }
    }
}

fn check_cell_size(path: &Path, graphs: &[CellGraph], run: &TrainedRun) -> Result<(), CliError> {
    for (index, g) in graphs.iter().enumerate() {
        if g.num_intermediate() != run.config.num_intermediate {
            return Err(CliError::Graph {
                path: path.to_path_buf(),
                index,
                message: format!(
                    "{} nodes, the policy was trained on {}-node cells",
                    g.num_nodes(),
                    run.config.num_intermediate + 3
                ),
            });
        }
    }
    Ok(())
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<CommandResult, CliError> {
    let run = TrainedRun::load(&args.policy)?;
    let graphs = read_graphs(&args.input)?;
    check_cell_size(&args.input, &graphs, &run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.seed);
    let encoding = run.config.encoding();
    let mut optimized = Vec::with_capacity(graphs.len());
    for (index, beta) in graphs.iter().enumerate() {
        let alpha = infer(&run.policy, &encoding, beta, args.decode, &mut rng).map_err(|e| CliError::Graph {
            path: args.input.clone(),
            index,
            message: e.to_string(),
        })?;
        archgraph::validate(alpha.num_nodes(), alpha.edges()).expect("optimized cells keep their topology");
        optimized.push(alpha);
    }
    let config = json!({
        "decode": args.decode,
        "input": input_record(&args.input)?,
        "policy": input_record(&args.policy.join(POLICY_FILE))?,
    });
    let emitted = emit(
        args.out.as_deref(),
        serialize_many(&optimized),
        "optimize",
        Some(args.seed.seed),
        config,
    )?;
    Ok(finish(
        0,
        format!("optimize: {} cells, decode {}, all within budget\n", optimized.len(), args.decode),
        emitted,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
}

pub fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub set: &'static str,
    pub count: usize,
    pub params: Stat,
    pub madds: Stat,
    pub score: Stat,
    pub reward: Stat,
}

pub const REPORT_CSV_HEADER: &str =
    "set,count,params_mean,params_std,madds_mean,madds_std,score_mean,score_std,reward_mean,reward_std";

/// Original-vs-optimized summary. Rewards are per-cell score differences;
/// the original row's rewards are zero by definition.
pub fn report_rows(
    originals: &[CellGraph],
    optimized: &[CellGraph],
    scorer: &dyn ScoreProvider,
    cfg: &CostConfig,
) -> [ReportRow; 2] {
    let row = |set, graphs: &[CellGraph], rewards: Vec<f64>| {
        let costs: Vec<_> = graphs.iter().map(|g| cost_of(g, cfg)).collect();
        ReportRow {
            set,
            count: graphs.len(),
            params: stat(&costs.iter().map(|c| c.total_params as f64).collect::<Vec<_>>()),
            madds: stat(&costs.iter().map(|c| c.total_madds as f64).collect::<Vec<_>>()),
            score: stat(&graphs.iter().map(|g| scorer.score(g)).collect::<Vec<_>>()),
            reward: stat(&rewards),
        }
    };
    let rewards: Vec<f64> = originals
        .iter()
        .zip(optimized)
        .map(|(b, a)| scorer.score(a) - scorer.score(b))
        .collect();
    [
        row("original", originals, vec![0.0; originals.len()]),
        row("optimized", optimized, rewards),
    ]
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.6},{:.6},{:.6},{:.6}\n",
            r.set,
            r.count,
            r.params.mean,
            r.params.std,
            r.madds.mean,
            r.madds.std,
            r.score.mean,
            r.score.std,
            r.reward.mean,
            r.reward.std
        ));
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<CommandResult, CliError> {
    let cfg = args.cost.config()?;
    let run = TrainedRun::load(&args.policy)?;
    let originals = read_graphs(&args.input)?;
    let optimized = read_graphs(&args.optimized)?;
    if originals.len() != optimized.len() {
        return Err(CliError::Flags(format!(
            "{} original cells but {} optimized",
            originals.len(),
            optimized.len()
        )));
    }
    check_cell_size(&args.input, &originals, &run)?;
    for (index, (b, a)) in originals.iter().zip(&optimized).enumerate() {
        if !a.same_topology(b) {
            return Err(CliError::Graph {
                path: args.optimized.clone(),
                index,
                message: "topology differs from the original".into(),
            });
        }
        archgraph::check_budget(a, b, &cfg).map_err(|v| CliError::Graph {
            path: args.optimized.clone(),
            index,
            message: format!("exceeds the original's budget: {v:?}"),
        })?;
    }
    let rows = report_rows(&originals, &optimized, &run.scorer(), &cfg);
    let summary = format!(
        "report: params {:.0} -> {:.0}, score {:.4} -> {:.4}, mean reward {:.4}\n",
        rows[0].params.mean, rows[1].params.mean, rows[0].score.mean, rows[1].score.mean, rows[1].reward.mean
    );
    let config = json!({
        "channels": args.cost.channels,
        "hw": args.cost.hw,
        "input": input_record(&args.input)?,
        "optimized": input_record(&args.optimized)?,
        "policy": input_record(&args.policy.join(POLICY_FILE))?,
    });
    let emitted = emit(args.out.as_deref(), report_csv(&rows), "report", None, config)?;
    Ok(finish(0, summary, emitted))
}
