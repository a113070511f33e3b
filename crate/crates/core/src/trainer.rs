//! The alternating search loop and inference-time optimization.
//!
//! Each epoch runs a supernet phase (sample cells uniformly, one SGD step on
//! the shared weights per iteration) followed by a policy phase (sample
//! cells, draw optimized variants from the policy, ascend the REINFORCE
//! objective with an entropy bonus). The planted-oracle provider has no
//! weights to train, so its supernet phase is skipped.
//!
//! Randomness is split into independent ChaCha streams per purpose, so the
//! supernet phase consumes the same draws whatever the policy mode.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{
    apply_transitions, check_budget, encode, sample_uniform, Adjacency, BudgetViolation, CellGraph, EncodingConfig,
    GraphError,
};
use crate::evaluator::{
    reward, supernet_train_step, DatasetConfig, EvalError, PlantedOracle, ScoreProvider, SharedWeights,
    SupernetScorer, SyntheticDataset,
};
use crate::gcnpolicy::{
    argmax_actions, forward, policy_gradient, sample_actions, targets_of, PolicyConfig, PolicyError, PolicyMode,
    PolicyParams,
};
use crate::numkernel::Matrix;
use crate::opspace::{CostConfig, OperationKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at {phase} iteration {iteration}")]
    NonFinite {
        phase: Phase,
        iteration: u64,
        what: &'static str,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("optimized cell exceeds its input budget: params {params:?}, madds {madds:?}")]
    Budget { params: (u64, u64), madds: (u64, u64) },
}

impl From<BudgetViolation> for TrainError {
    fn from(v: BudgetViolation) -> Self {
        TrainError::Budget {
            params: v.params,
            madds: v.madds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Oracle,
    Supernet,
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::Oracle => "oracle",
            Provider::Supernet => "supernet",
        })
    }
}

impl FromStr for Provider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Provider::Oracle),
            "supernet" => Ok(Provider::Supernet),
            other => Err(format!("unknown provider `{other}` (expected oracle or supernet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Sample,
    Argmax,
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decode::Sample => "sample",
            Decode::Argmax => "argmax",
        })
    }
}

impl FromStr for Decode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Decode::Sample),
            "argmax" => Ok(Decode::Argmax),
            other => Err(format!("unknown decode `{other}` (expected sample or argmax)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Input cells per iteration.
    pub m: usize,
    /// Optimized samples per input cell.
    pub n: usize,
    pub entropy_weight: f64,
    pub lr_supernet: f64,
    pub lr_policy: f64,
    pub epochs: usize,
    pub supernet_iters: usize,
    pub policy_iters: usize,
    pub seed: u64,
    pub mode: PolicyMode,
    pub provider: Provider,
    pub depth: usize,
    pub hidden: usize,
    pub adjacency: Adjacency,
    pub num_intermediate: usize,
    pub train_batch: usize,
    pub reward_batch: usize,
    /// Moving-average reward baseline decay; `None` uses raw rewards.
    pub baseline_decay: Option<f64>,
    /// Cells held out for the periodic evaluation snapshot.
    pub eval_cells: usize,
    /// Epochs between evaluation snapshots; 0 disables them.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 1,
            n: 1,
            entropy_weight: 0.003,
            lr_supernet: 0.05,
            lr_policy: 0.01,
            epochs: 200,
            supernet_iters: 10,
            policy_iters: 10,
            seed: 0,
            mode: PolicyMode::NatPlusPlus,
            provider: Provider::Oracle,
            depth: 2,
            hidden: 64,
            adjacency: Adjacency::Directed,
            num_intermediate: 4,
            train_batch: 64,
            reward_batch: 256,
            baseline_decay: None,
            eval_cells: 64,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.m == 0 || self.n == 0 {
            return fail("m and n must be at least 1");
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return fail("entropy weight must be finite and non-negative");
        }
        if !(self.lr_supernet > 0.0 && self.lr_supernet.is_finite()) {
            return fail("supernet learning rate must be positive");
        }
        if !(self.lr_policy > 0.0 && self.lr_policy.is_finite()) {
            return fail("policy learning rate must be positive");
        }
        if self.depth == 0 || self.hidden == 0 {
            return fail("policy depth and width must be at least 1");
        }
        if self.num_intermediate == 0 {
            return fail("cells need at least one intermediate node");
        }
        if self.train_batch == 0 || self.reward_batch == 0 {
            return fail("batch sizes must be at least 1");
        }
        if let Some(d) = self.baseline_decay {
            if !(0.0..1.0).contains(&d) {
                return fail("baseline decay must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            mode: self.mode,
            depth: self.depth,
            hidden: self.hidden,
            encoding: self.encoding(),
        }
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            max_intermediate: self.num_intermediate,
            adjacency: self.adjacency,
        }
    }

    pub fn total_policy_iters(&self) -> u64 {
        (self.epochs * self.policy_iters) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Supernet,
    Policy,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Supernet => "supernet",
            Phase::Policy => "policy",
            Phase::Eval => "eval",
        })
    }
}

/// One log line. `step` is a global counter that increases by one per
/// record and stands in for a timestamp, which keeps logs reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub iter: u64,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub entropy: Option<f64>,
    pub edge_match: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    records: Vec<LogRecord>,
}

impl TrainLog {
    fn push(&mut self, mut record: LogRecord) {
        record.step = self.records.len() as u64;
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Everything one policy iteration saw and did.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub iteration: u64,
    pub inputs: Vec<CellGraph>,
    /// `actions[i][j]` is the j-th draw for input i.
    pub actions: Vec<Vec<Vec<usize>>>,
    pub rewards: Vec<Vec<f64>>,
    /// Rewards after baseline subtraction, as fed to the estimator.
    pub advantages: Vec<Vec<f64>>,
    /// Estimator value that was added to the policy (before the step size).
    pub gradient: PolicyParams,
    pub mean_entropy: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_POLICY_INIT: u64 = 1;
const STREAM_SUPERNET_INIT: u64 = 2;
const STREAM_SUPERNET_PHASE: u64 = 3;
const STREAM_POLICY_PHASE: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_DATA: u64 = 6;
const STREAM_ORACLE: u64 = 7;

/// Seed of the synthetic dataset for a run seed.
pub fn dataset_seed(seed: u64) -> u64 {
    stream(seed, STREAM_DATA).next_u64()
}

/// Seed of the planted oracle for a run seed.
pub fn oracle_seed(seed: u64) -> u64 {
    stream(seed, STREAM_ORACLE).next_u64()
}

/// Held-out cells used for evaluation snapshots.
pub fn eval_cells(cfg: &TrainConfig) -> Vec<CellGraph> {
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    (0..cfg.eval_cells)
        .map(|_| sample_uniform(cfg.num_intermediate, &mut rng))
        .collect()
}

/// Borrowed view of whichever provider a run uses.
pub enum Scorer<'a> {
    Oracle(&'a PlantedOracle),
    Supernet(SupernetScorer<'a>),
}

impl<'a> Scorer<'a> {
    fn new(provider: Provider, oracle: &'a PlantedOracle, weights: &'a SharedWeights, x: &'a Matrix, y: &'a [usize]) -> Self {
        match provider {
            Provider::Oracle => Scorer::Oracle(oracle),
            Provider::Supernet => Scorer::Supernet(SupernetScorer { weights, x, y }),
        }
    }
}

impl ScoreProvider for Scorer<'_> {
    fn score(&self, graph: &CellGraph) -> f64 {
        match self {
            Scorer::Oracle(o) => o.score(graph),
            Scorer::Supernet(s) => s.score(graph),
        }
    }
}

/// Live training state. [`run`] drives it; tests can step it by hand.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: PolicyParams,
    pub weights: SharedWeights,
    pub oracle: PlantedOracle,
    pub dataset: Option<SyntheticDataset>,
    reward_x: Matrix,
    reward_y: Vec<usize>,
    supernet_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    baseline: Option<f64>,
    supernet_iteration: u64,
    policy_iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let policy = PolicyParams::init(&cfg.policy_config(), &mut stream(cfg.seed, STREAM_POLICY_INIT));
        let data_cfg = DatasetConfig::default();
        let weights = SharedWeights::init(
            cfg.num_intermediate,
            data_cfg.dim,
            data_cfg.num_classes,
            &mut stream(cfg.seed, STREAM_SUPERNET_INIT),
        );
        let oracle = PlantedOracle::generate(2 * cfg.num_intermediate, oracle_seed(cfg.seed));
        let (dataset, reward_x, reward_y) = match cfg.provider {
            Provider::Oracle => (None, Matrix::zeros(0, data_cfg.dim), Vec::new()),
            Provider::Supernet => {
                let data = SyntheticDataset::generate(data_cfg, dataset_seed(cfg.seed));
                let (x, y) = data.validation_batch(cfg.reward_batch);
                (Some(data), x, y)
            }
        };
        Ok(Self {
            policy,
            weights,
            oracle,
            dataset,
            reward_x,
            reward_y,
            supernet_rng: stream(cfg.seed, STREAM_SUPERNET_PHASE),
            policy_rng: stream(cfg.seed, STREAM_POLICY_PHASE),
            baseline: None,
            supernet_iteration: 0,
            policy_iteration: 0,
            cfg,
        })
    }

    /// The reward provider for the current weights.
    pub fn scorer(&self) -> Scorer<'_> {
        Scorer::new(self.cfg.provider, &self.oracle, &self.weights, &self.reward_x, &self.reward_y)
    }

    /// One shared-weight update on `m` uniformly sampled cells. Returns the
    /// mean training loss, or `None` for the oracle provider.
    pub fn supernet_step(&mut self) -> Result<Option<f64>, TrainError> {
        let Some(data) = &self.dataset else {
            return Ok(None);
        };
        let iteration = self.supernet_iteration;
        self.supernet_iteration += 1;
        let graphs: Vec<CellGraph> = (0..self.cfg.m)
            .map(|_| sample_uniform(self.cfg.num_intermediate, &mut self.supernet_rng))
            .collect();
        let (x, y) = data.train_batch(self.cfg.train_batch, &mut self.supernet_rng);
        let loss = supernet_train_step(&mut self.weights, &graphs, &x, &y, self.cfg.lr_supernet)?;
        if !loss.is_finite() || !self.weights.is_finite() {
            return Err(TrainError::NonFinite {
                phase: Phase::Supernet,
                iteration,
                what: "loss or weights",
            });
        }
        Ok(Some(loss))
    }

    /// One ascent step of the policy on `m` inputs with `n` draws each.
    pub fn policy_step(&mut self) -> Result<PolicyStep, TrainError> {
        let iteration = self.policy_iteration;
        self.policy_iteration += 1;
        let (m, n) = (self.cfg.m, self.cfg.n);
        let encoding = self.cfg.encoding();

        let inputs: Vec<CellGraph> = (0..m)
            .map(|_| sample_uniform(self.cfg.num_intermediate, &mut self.policy_rng))
            .collect();
        let mut actions = Vec::with_capacity(m);
        let mut rewards = Vec::with_capacity(m);
        let mut entropy = 0.0;
        {
            let scorer = Scorer::new(self.cfg.provider, &self.oracle, &self.weights, &self.reward_x, &self.reward_y);
            for beta in &inputs {
                let enc = encode(beta, &encoding)?;
                let ops = beta.ops();
                let out = forward(&enc, &ops, &self.policy)?;
                entropy += out.entropy();
                let mut draws = Vec::with_capacity(n);
                let mut rs = Vec::with_capacity(n);
                for _ in 0..n {
                    let (a, _) = sample_actions(&out, &mut self.policy_rng);
                    let alpha = apply_transitions(beta, &targets_of(self.cfg.mode, &ops, &a))?;
                    rs.push(reward(&alpha, beta, &scorer)?);
                    draws.push(a);
                }
                actions.push(draws);
                rewards.push(rs);
            }
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(TrainError::NonFinite {
                phase: Phase::Policy,
                iteration,
                what: "reward",
            });
        }

        let mean_reward = rewards.iter().flatten().sum::<f64>() / (m * n) as f64;
        let offset = self.baseline.unwrap_or(0.0);
        let advantages: Vec<Vec<f64>> = rewards
            .iter()
            .map(|rs| rs.iter().map(|r| r - offset).collect())
            .collect();
        if let Some(decay) = self.cfg.baseline_decay {
            self.baseline = Some(match self.baseline {
                None => mean_reward,
                Some(b) => decay * b + (1.0 - decay) * mean_reward,
            });
        }

        let gradient = estimator(&self.policy, &encoding, &inputs, &actions, &advantages, self.cfg.entropy_weight)?;
        if !gradient.is_finite() {
            return Err(TrainError::NonFinite {
                phase: Phase::Policy,
                iteration,
                what: "policy gradient",
            });
        }
        self.policy.axpy(self.cfg.lr_policy, &gradient);
        Ok(PolicyStep {
            iteration,
            inputs,
            actions,
            rewards,
            advantages,
            gradient,
            mean_entropy: entropy / m as f64,
        })
    }
}

/// Sample-average of `R * grad log pi + lambda * grad H` over all draws.
pub fn estimator(
    policy: &PolicyParams,
    encoding: &EncodingConfig,
    inputs: &[CellGraph],
    actions: &[Vec<Vec<usize>>],
    advantages: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<PolicyParams, TrainError> {
    let mut total = policy.zeros_like();
    let mut count = 0usize;
    for ((beta, draws), advs) in inputs.iter().zip(actions).zip(advantages) {
        let enc = encode(beta, encoding)?;
        let ops = beta.ops();
        for (a, adv) in draws.iter().zip(advs) {
            let g = policy_gradient(&enc, &ops, policy, a, *adv, entropy_weight)?;
            total.axpy(1.0, &g);
            count += 1;
        }
    }
    let mut out = policy.zeros_like();
    out.axpy(1.0 / count as f64, &total);
    Ok(out)
}

pub struct TrainOutput {
    pub policy: PolicyParams,
    pub weights: SharedWeights,
    pub oracle: PlantedOracle,
    pub log: TrainLog,
}

/// Runs the full search loop.
pub fn run(cfg: TrainConfig) -> Result<TrainOutput, TrainError> {
    run_with(cfg, |_, _| {})
}

/// Like [`run`], calling `on_epoch(epoch, trainer)` after every epoch, e.g.
/// to write checkpoints.
pub fn run_with(cfg: TrainConfig, mut on_epoch: impl FnMut(usize, &Trainer)) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = TrainLog::default();
    let held_out = if cfg.eval_interval > 0 {
        eval_cells(&cfg)
    } else {
        Vec::new()
    };
    for epoch in 0..cfg.epochs {
        if cfg.provider == Provider::Supernet {
            for _ in 0..cfg.supernet_iters {
                let iter = trainer.supernet_iteration;
                let loss = trainer.supernet_step()?;
                log.push(LogRecord {
                    step: 0,
                    epoch,
                    iter,
                    phase: Phase::Supernet,
                    loss,
                    mean_reward: None,
                    entropy: None,
                    edge_match: None,
                });
            }
        }
        for _ in 0..cfg.policy_iters {
            let step = trainer.policy_step()?;
            let count = (cfg.m * cfg.n) as f64;
            log.push(LogRecord {
                step: 0,
                epoch,
                iter: step.iteration,
                phase: Phase::Policy,
                loss: None,
                mean_reward: Some(step.rewards.iter().flatten().sum::<f64>() / count),
                entropy: Some(step.mean_entropy),
                edge_match: None,
            });
        }
        if cfg.eval_interval > 0 && ((epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs) {
            let snapshot = evaluate(&trainer, &held_out)?;
            log.push(LogRecord {
                step: 0,
                epoch,
                iter: trainer.policy_iteration,
                phase: Phase::Eval,
                loss: None,
                mean_reward: Some(snapshot.mean_reward),
                entropy: Some(snapshot.mean_entropy),
                edge_match: snapshot.edge_match,
            });
        }
        on_epoch(epoch, &trainer);
    }
    Ok(TrainOutput {
        policy: trainer.policy,
        weights: trainer.weights,
        oracle: trainer.oracle,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub mean_reward: f64,
    pub mean_entropy: f64,
    /// Only defined for the oracle provider.
    pub edge_match: Option<f64>,
}

/// Argmax-decoded reward, policy entropy and (for the oracle) edge match
/// over a fixed set of cells.
pub fn evaluate(trainer: &Trainer, cells: &[CellGraph]) -> Result<Snapshot, TrainError> {
    let encoding = trainer.cfg.encoding();
    let scorer = trainer.scorer();
    let mut total_reward = 0.0;
    let mut total_entropy = 0.0;
    let mut alphas = Vec::with_capacity(cells.len());
    for beta in cells {
        let enc = encode(beta, &encoding)?;
        let out = forward(&enc, &beta.ops(), &trainer.policy)?;
        total_entropy += out.entropy();
        let alpha = apply_transitions(beta, &targets_of(trainer.cfg.mode, &beta.ops(), &argmax_actions(&out)))?;
        total_reward += reward(&alpha, beta, &scorer)?;
        alphas.push(alpha);
    }
    let count = cells.len().max(1) as f64;
    let edge_match = (trainer.cfg.provider == Provider::Oracle)
        .then(|| edge_match_rate(&trainer.oracle, trainer.cfg.mode, cells, &alphas));
    Ok(Snapshot {
        mean_reward: total_reward / count,
        mean_entropy: total_entropy / count,
        edge_match,
    })
}

/// Fraction of edges whose chosen target is the oracle's reachable optimum.
pub fn edge_match_rate(oracle: &PlantedOracle, mode: PolicyMode, inputs: &[CellGraph], outputs: &[CellGraph]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (beta, alpha) in inputs.iter().zip(outputs) {
        for (e, (b, a)) in beta.edges().iter().zip(alpha.edges()).enumerate() {
            hits += usize::from(oracle.optimum(e, b.op, mode) == a.op);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Control: every edge picks a uniformly random target from its action set.
pub fn random_search<R: Rng + ?Sized>(mode: PolicyMode, inputs: &[CellGraph], rng: &mut R) -> Vec<CellGraph> {
    inputs
        .iter()
        .map(|beta| {
            let targets: Vec<OperationKind> = beta
                .ops()
                .iter()
                .map(|op| {
                    let mask = mode.mask(*op);
                    let allowed: Vec<usize> = (0..mask.len()).filter(|i| mask.get(*i)).collect();
                    mode.target(*op, allowed[rng.gen_range(0..allowed.len())])
                })
                .collect();
            apply_transitions(beta, &targets).expect("mask targets are valid transitions")
        })
        .collect()
}

/// Applies the policy to one cell. The result never costs more than the
/// input (null -> skip excepted, as everywhere).
pub fn infer<R: Rng + ?Sized>(
    policy: &PolicyParams,
    encoding: &EncodingConfig,
    beta: &CellGraph,
    decode: Decode,
    rng: &mut R,
) -> Result<CellGraph, TrainError> {
    let enc = encode(beta, encoding)?;
    let ops = beta.ops();
    let out = forward(&enc, &ops, policy)?;
    let actions = match decode {
        Decode::Argmax => argmax_actions(&out),
        Decode::Sample => sample_actions(&out, rng).0,
    };
    let alpha = apply_transitions(beta, &targets_of(policy.mode, &ops, &actions))?;
    check_budget(&alpha, beta, &CostConfig::reference())?;
    Ok(alpha)
}
