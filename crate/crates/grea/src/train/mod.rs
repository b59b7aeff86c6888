//! Alternating optimization of the separator and predictor.
//!
//! Each round runs T_sep epochs updating only separator parameters
//! (minimizing L_sep with the predictor frozen), then T_pred epochs
//! updating only predictor parameters (minimizing L_pred with the
//! separator frozen). The best-validation checkpoint is returned, with
//! metric ties broken toward the epoch whose rationale fraction is closest
//! to γ; runs are fully deterministic given (config, seed, dataset).

mod adam;
mod checkpoint;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

use crate::data::{make_batches, take, DataError, DatasetSplit, Graph};
use crate::gnn::{EncoderConfig, EncoderKind};
use crate::metrics::{
    r2, rationale_score, rmse, roc_auc, MetricError, MetricsRecord, RationaleMode,
};
use crate::model::{forward_losses, infer, Agg, AugConfig, ModelConfig, ModelParams, Task};
use crate::tensor::{Tape, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train configuration: {0}")]
    Config(String),
    #[error("non-finite {what} in round {round}, {phase} phase, epoch {epoch}")]
    NonFinite { what: &'static str, round: usize, phase: &'static str, epoch: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("graph {index} has no label")]
    MissingLabel { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Everything one run needs. Deserializes with per-field defaults so
/// partial config files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the replacement loss inside L_pred.
    pub alpha: f64,
    /// Weight of the size regularizer inside L_sep.
    pub beta: f64,
    /// Expected rationale fraction.
    pub gamma: f64,
    pub agg: Agg,
    /// Separator epochs per round.
    pub t_sep: usize,
    /// Predictor epochs per round.
    pub t_pred: usize,
    pub num_rounds: usize,
    /// Rounds without validation improvement before stopping early.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Separator encoder width.
    pub d1: usize,
    /// Predictor encoder width.
    pub d2: usize,
    /// Separator encoder depth.
    pub l1: usize,
    /// Predictor encoder depth.
    pub l2: usize,
    /// Used for both encoders.
    pub encoder: EncoderKind,
    pub task: Task,
    pub seed: u64,
    /// Include the j=i cell in the replacement grid loss.
    pub diag_in_rep: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.2,
            gamma: 0.35,
            agg: Agg::Sum,
            t_sep: 2,
            t_pred: 3,
            num_rounds: 60,
            patience: 20,
            learning_rate: 0.001,
            batch_size: 32,
            d1: 64,
            d2: 32,
            l1: 2,
            l2: 1,
            encoder: EncoderKind::Gin,
            task: Task::Binary,
            seed: 0,
            diag_in_rep: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.t_sep < 1 || self.t_pred < 1 {
            return fail(format!("t_sep and t_pred must be ≥ 1, got {} and {}", self.t_sep, self.t_pred));
        }
        if self.num_rounds < 1 {
            return fail("num_rounds must be ≥ 1".into());
        }
        if self.patience < 1 {
            return fail("patience must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive and finite, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be ≥ 2 for environment replacement, got {}", self.batch_size));
        }
        if self.d1 < 1 || self.d2 < 1 || self.l1 < 1 || self.l2 < 1 {
            return fail("encoder dims and depths must be ≥ 1".into());
        }
        self.aug_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self, num_features: usize) -> ModelConfig {
        ModelConfig {
            sep_encoder: EncoderConfig::new(self.encoder, self.l1, self.d1),
            pred_encoder: EncoderConfig::new(self.encoder, self.l2, self.d2),
            agg: self.agg,
            task: self.task,
            num_features,
        }
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig {
            agg: self.agg,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mask_count_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Separator,
    Predictor,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Separator => "separator",
            Phase::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub round: usize,
    pub phase: Phase,
    /// Epoch means, weighted by graphs per batch.
    pub l_rem: f64,
    pub l_rep: f64,
    pub l_reg: f64,
    pub val_metric: f64,
    pub rationale_frac: f64,
    /// Wall clock; excluded from serialization so serialized histories
    /// stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Per-epoch loss means.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct EpochStats {
    pub l_rem: f64,
    pub l_rep: f64,
    pub l_reg: f64,
    pub rationale_frac: f64,
}

pub(crate) struct Trainer {
    train_graphs: Vec<Graph>,
    config: TrainConfig,
    pub(crate) model_config: ModelConfig,
    aug: AugConfig,
    pub(crate) params: ModelParams,
    sep_opt: AdamState,
    pred_opt: AdamState,
    global_epoch: usize,
}

impl Trainer {
    pub(crate) fn new(graphs: &[Graph], train_idx: &[usize], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if train_idx.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let train_graphs = take(graphs, train_idx);
        for (k, g) in train_graphs.iter().enumerate() {
            if g.label.is_none() {
                return Err(TrainError::MissingLabel { index: train_idx[k] });
            }
        }
        let model_config = config.model_config(train_graphs[0].num_features);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&model_config, &mut rng);
        let sep_opt = AdamState::new(&params.sep_params());
        let pred_opt = AdamState::new(&params.pred_params());
        Ok(Trainer {
            train_graphs,
            aug: config.aug_config(),
            config: config.clone(),
            model_config,
            params,
            sep_opt,
            pred_opt,
            global_epoch: 0,
        })
    }

    /// One pass over the training set updating only the phase's parameter
    /// group. Batch order reshuffles every epoch, deterministically.
    pub(crate) fn run_epoch(&mut self, round: usize, phase: Phase) -> Result<EpochStats> {
        let shuffle_seed =
            self.config.seed ^ (self.global_epoch as u64).wrapping_mul(0x9E3779B97F4A7C15);
        let batches = make_batches(&self.train_graphs, self.config.batch_size, Some(shuffle_seed))?;
        let (train_sep, train_pred) = match phase {
            Phase::Separator => (true, false),
            Phase::Predictor => (false, true),
        };

        let mut stats = EpochStats::default();
        let mut weight = 0.0;
        for batch in &batches {
            let tape = Tape::new();
            let binds = self.params.bind(&tape, train_sep, train_pred)?;
            let bundle = forward_losses(
                &tape,
                batch,
                &self.model_config,
                &binds,
                &self.aug,
                self.config.diag_in_rep,
            )?;
            let loss = match phase {
                Phase::Separator => &bundle.l_sep,
                Phase::Predictor => &bundle.l_pred,
            };
            let nonfinite = |what| TrainError::NonFinite {
                what,
                round,
                phase: phase.name(),
                epoch: self.global_epoch,
            };
            if !loss.item().is_finite() {
                return Err(nonfinite("loss"));
            }
            loss.backward()?;
            let leaves = match phase {
                Phase::Separator => binds.sep_leaves(),
                Phase::Predictor => binds.pred_leaves(),
            };
            let grads: Vec<Vec<f64>> = leaves
                .iter()
                .map(|leaf| leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(nonfinite("gradient"));
            }

            let lr = self.config.learning_rate;
            let Trainer { params, sep_opt, pred_opt, .. } = self;
            match phase {
                Phase::Separator => sep_opt.step(&mut params.sep_params_mut(), &grads, lr)?,
                Phase::Predictor => pred_opt.step(&mut params.pred_params_mut(), &grads, lr)?,
            }

            let w = batch.num_graphs as f64;
            stats.l_rem += bundle.l_rem.item() * w;
            stats.l_rep += bundle.l_rep.item() * w;
            stats.l_reg += bundle.l_reg.item() * w;
            stats.rationale_frac += bundle.rationale_frac * w;
            weight += w;
        }
        stats.l_rem /= weight;
        stats.l_rep /= weight;
        stats.l_reg /= weight;
        stats.rationale_frac /= weight;
        self.global_epoch += 1;
        Ok(stats)
    }
}

/// Alternating optimization; returns the parameters of the epoch with the
/// best validation metric (AUC maximized for binary, RMSE minimized for
/// regression) together with the full per-epoch history.
pub fn train(
    graphs: &[Graph],
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(ModelParams, RunHistory)> {
    let mut trainer = Trainer::new(graphs, &split.train, config)?;
    if split.valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let model_config = trainer.model_config;

    let mut history = RunHistory::default();
    let mut best_params = trainer.params.clone();
    let mut best_val = match config.task {
        Task::Binary => f64::NEG_INFINITY,
        Task::Regression => f64::INFINITY,
    };
    let mut best_epoch = 0usize;
    let mut best_frac_dist = f64::INFINITY;
    let mut rounds_since_best = 0usize;

    'rounds: for round in 0..config.num_rounds {
        let mut round_improved = false;
        for (phase, reps) in [(Phase::Separator, config.t_sep), (Phase::Predictor, config.t_pred)]
        {
            for _ in 0..reps {
                let t0 = Instant::now();
                let stats = trainer.run_epoch(round, phase)?;
                let record =
                    evaluate(graphs, &split.valid, &model_config, &trainer.params, config.batch_size)?;
                let val_metric = match config.task {
                    Task::Binary => record.auc.expect("binary evaluate emits auc"),
                    Task::Regression => record.rmse.expect("regression evaluate emits rmse"),
                };
                // Ties on the validation metric are broken toward the epoch
                // whose rationale fraction sits closest to γ: among equally
                // predictive checkpoints, prefer the one matching the
                // configured rationale budget.
                let frac_dist = (stats.rationale_frac - config.gamma).abs();
                let strictly = match config.task {
                    Task::Binary => val_metric > best_val,
                    Task::Regression => val_metric < best_val,
                };
                let better = strictly || (val_metric == best_val && frac_dist < best_frac_dist);
                let epoch = history.epochs.len();
                if better {
                    best_val = val_metric;
                    best_epoch = epoch;
                    best_frac_dist = frac_dist;
                    best_params = trainer.params.clone();
                    round_improved = true;
                }
                history.epochs.push(EpochRecord {
                    epoch,
                    round,
                    phase,
                    l_rem: stats.l_rem,
                    l_rep: stats.l_rep,
                    l_reg: stats.l_reg,
                    val_metric,
                    rationale_frac: stats.rationale_frac,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
            }
        }
        if round_improved {
            rounds_since_best = 0;
        } else {
            rounds_since_best += 1;
            if rounds_since_best >= config.patience {
                history.stopped_early = true;
                break 'rounds;
            }
        }
    }
    history.best_epoch = best_epoch;
    history.best_val = best_val;
    Ok((best_params, history))
}

/// Evaluate a model on a labeled split: predictions go through ŷ⁽ʳ⁾ only
/// (no augmentation). Emits task metrics, mean rationale-size fraction,
/// and — where planted truth exists — mean top-k rationale precision and
/// recall.
pub fn evaluate(
    graphs: &[Graph],
    indices: &[usize],
    model_config: &ModelConfig,
    params: &ModelParams,
    batch_size: usize,
) -> Result<MetricsRecord> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let subset = take(graphs, indices);
    for (k, g) in subset.iter().enumerate() {
        if g.label.is_none() {
            return Err(TrainError::MissingLabel { index: indices[k] });
        }
    }
    let batches = make_batches(&subset, batch_size.max(1), None)?;

    let mut scores = Vec::with_capacity(subset.len());
    let mut labels = Vec::with_capacity(subset.len());
    let mut size_frac_sum = 0.0;
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut truth_graphs = 0usize;

    for batch in &batches {
        let out = infer(batch, model_config, params)?;
        scores.extend_from_slice(&out.scores);
        labels.extend_from_slice(&batch.labels);

        // bucket the node masks back into per-graph vectors
        let mut graph_masks: Vec<Vec<f64>> = vec![Vec::new(); batch.num_graphs];
        for (&seg, &m) in batch.segments.iter().zip(&out.mask_values) {
            graph_masks[seg].push(m);
        }
        for (local, mask) in graph_masks.iter().enumerate() {
            let over = mask.iter().filter(|&&m| m > 0.5).count() as f64;
            size_frac_sum += over / mask.len() as f64;
            let graph = &subset[batch.graph_indices[local]];
            if let Some(truth) = &graph.rationale_truth {
                if !truth.is_empty() {
                    let (p, r) = rationale_score(mask, truth, RationaleMode::TopK)?;
                    prec_sum += p;
                    rec_sum += r;
                    truth_graphs += 1;
                }
            }
        }
    }

    let n = subset.len();
    let mut record = MetricsRecord {
        rationale_size_frac: Some(size_frac_sum / n as f64),
        n_examples: n,
        ..MetricsRecord::default()
    };
    match model_config.task {
        Task::Binary => record.auc = Some(roc_auc(&scores, &labels)?),
        Task::Regression => {
            record.r2 = Some(r2(&scores, &labels)?);
            record.rmse = Some(rmse(&scores, &labels)?);
        }
    }
    if truth_graphs > 0 {
        record.rationale_precision = Some(prec_sum / truth_graphs as f64);
        record.rationale_recall = Some(rec_sum / truth_graphs as f64);
    }
    Ok(record)
}
