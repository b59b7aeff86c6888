//! Rationale–environment separation in latent space, environment
//! removal/replacement augmentation, and the training losses.
//!
//! The separator (GNN₁ + MLP₁) produces a per-node mask m = σ(MLP₁(GNN₁));
//! mask-weighted sum pooling splits every graph's representation into a
//! rationale part h_r and an environment part h_e. The predictor
//! (GNN₂ + MLP₂) scores h_r alone (environment removal) and every
//! AGG(h_r[i], h_e[j]) pair in the batch (environment replacement) —
//! no subgraph is ever materialized.

use crate::data::GraphBatch;
use crate::gnn::{bias_uniform, encode, glorot, EncoderBinds, EncoderConfig, EncoderParams};
use crate::tensor::{Param, Result, Tape, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agg {
    Sum,
    Mean,
    Max,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Binary,
    Regression,
}

/// Loss knobs: AGG choice, loss weights α and β, expected rationale size
/// γ, and the mask-count threshold for the discrete size term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub agg: Agg,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "default_threshold")]
    pub mask_count_threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Contract { op: "aug config", msg });
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail(format!("alpha and beta must be ≥ 0, got {} and {}", self.alpha, self.beta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0,1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.mask_count_threshold) || self.mask_count_threshold <= 0.0 {
            return fail(format!(
                "mask_count_threshold must lie in (0,1), got {}",
                self.mask_count_threshold
            ));
        }
        Ok(())
    }
}

/// Two affine layers with relu between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl MlpParams {
    pub fn init(
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MlpParams {
            w1: glorot(&format!("{prefix}.w1"), d_in, d_hidden, rng),
            b1: bias_uniform(&format!("{prefix}.b1"), d_hidden, d_in, rng),
            w2: glorot(&format!("{prefix}.w2"), d_hidden, d_out, rng),
            b2: bias_uniform(&format!("{prefix}.b2"), d_out, d_hidden, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<MlpBinds> {
        Ok(MlpBinds {
            w1: tape.bind(&self.w1, trainable)?,
            b1: tape.bind(&self.b1, trainable)?,
            w2: tape.bind(&self.w2, trainable)?,
            b2: tape.bind(&self.b2, trainable)?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape[0]
    }
}

pub struct MlpBinds {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpBinds {
    /// Bound leaves in the same order as `MlpParams::params()`.
    pub fn leaves(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }
}

pub fn mlp_forward(h: &Tensor, mlp: &MlpBinds) -> Result<Tensor> {
    h.matmul(&mlp.w1)?
        .add_bias(&mlp.b1)?
        .relu()
        .matmul(&mlp.w2)?
        .add_bias(&mlp.b2)
}

/// Separator: GNN₁ encoder plus the per-node mask head MLP₁.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorParams {
    pub gnn: EncoderParams,
    pub mlp: MlpParams,
}

/// Predictor: GNN₂ encoder plus the graph-level head MLP₂. With concat
/// aggregation a second head of input width 2d handles pair grids;
/// inference always goes through the d-width head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub gnn: EncoderParams,
    pub mlp: MlpParams,
    pub mlp_pair: Option<MlpParams>,
}

/// Architecture description: both encoders, AGG, task, input width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sep_encoder: EncoderConfig,
    pub pred_encoder: EncoderConfig,
    pub agg: Agg,
    pub task: Task,
    pub num_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub sep: SeparatorParams,
    pub pred: PredictorParams,
}

impl ModelParams {
    /// Seed-deterministic init; draw order is fixed (separator first).
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d1 = config.sep_encoder.hidden_dim;
        let d2 = config.pred_encoder.hidden_dim;
        let sep = SeparatorParams {
            gnn: EncoderParams::init("sep.gnn", &config.sep_encoder, config.num_features, rng),
            mlp: MlpParams::init("sep.mlp", d1, d1, 1, rng),
        };
        let pred = PredictorParams {
            gnn: EncoderParams::init("pred.gnn", &config.pred_encoder, config.num_features, rng),
            mlp: MlpParams::init("pred.mlp", d2, d2, 1, rng),
            mlp_pair: match config.agg {
                Agg::Concat => Some(MlpParams::init("pred.mlp_pair", 2 * d2, d2, 1, rng)),
                _ => None,
            },
        };
        ModelParams { sep, pred }
    }

    pub fn sep_params(&self) -> Vec<&Param> {
        let mut out = self.sep.gnn.params();
        out.extend(self.sep.mlp.params());
        out
    }

    pub fn sep_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.sep.gnn.params_mut();
        out.extend(self.sep.mlp.params_mut());
        out
    }

    pub fn pred_params(&self) -> Vec<&Param> {
        let mut out = self.pred.gnn.params();
        out.extend(self.pred.mlp.params());
        if let Some(pair) = &self.pred.mlp_pair {
            out.extend(pair.params());
        }
        out
    }

    pub fn pred_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.pred.gnn.params_mut();
        out.extend(self.pred.mlp.params_mut());
        if let Some(pair) = &mut self.pred.mlp_pair {
            out.extend(pair.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.sep_params();
        out.extend(self.pred_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        // can't call the two _mut helpers in sequence (double borrow);
        // flatten explicitly
        let ModelParams { sep, pred } = self;
        let mut out = sep.gnn.params_mut();
        out.extend(sep.mlp.params_mut());
        out.extend(pred.gnn.params_mut());
        out.extend(pred.mlp.params_mut());
        if let Some(pair) = &mut pred.mlp_pair {
            out.extend(pair.params_mut());
        }
        out
    }

    /// Bind every parameter; `train_sep` / `train_pred` control which side
    /// participates in gradients (phase isolation).
    pub fn bind(&self, tape: &Tape, train_sep: bool, train_pred: bool) -> Result<ModelBinds> {
        Ok(ModelBinds {
            sep_gnn: self.sep.gnn.bind(tape, train_sep)?,
            sep_mlp: self.sep.mlp.bind(tape, train_sep)?,
            pred_gnn: self.pred.gnn.bind(tape, train_pred)?,
            pred_mlp: self.pred.mlp.bind(tape, train_pred)?,
            pred_mlp_pair: match &self.pred.mlp_pair {
                Some(pair) => Some(pair.bind(tape, train_pred)?),
                None => None,
            },
        })
    }
}

pub struct ModelBinds {
    pub sep_gnn: EncoderBinds,
    pub sep_mlp: MlpBinds,
    pub pred_gnn: EncoderBinds,
    pub pred_mlp: MlpBinds,
    pub pred_mlp_pair: Option<MlpBinds>,
}

impl ModelBinds {
    /// Separator-side leaves, ordered like `ModelParams::sep_params()`.
    pub fn sep_leaves(&self) -> Vec<Tensor> {
        let mut out = self.sep_gnn.leaves();
        out.extend(self.sep_mlp.leaves());
        out
    }

    /// Predictor-side leaves, ordered like `ModelParams::pred_params()`.
    pub fn pred_leaves(&self) -> Vec<Tensor> {
        let mut out = self.pred_gnn.leaves();
        out.extend(self.pred_mlp.leaves());
        if let Some(pair) = &self.pred_mlp_pair {
            out.extend(pair.leaves());
        }
        out
    }

    /// All leaves, ordered like `ModelParams::params()`.
    pub fn leaves(&self) -> Vec<Tensor> {
        let mut out = self.sep_leaves();
        out.extend(self.pred_leaves());
        out
    }
}

/// Per-node rationale membership probabilities (sigmoid outputs) plus the
/// segment map tying nodes to graphs.
pub struct RationaleMask {
    pub m: Tensor,
    pub segments: Rc<Vec<usize>>,
}

/// Per-graph rationale and environment representations.
pub struct SeparatedReps {
    pub h_r: Tensor,
    pub h_e: Tensor,
}

/// m = σ(MLP₁(GNN₁(batch))), one scalar per node.
pub fn compute_mask(
    tape: &Tape,
    batch: &GraphBatch,
    sep_config: &EncoderConfig,
    sep_gnn: &EncoderBinds,
    sep_mlp: &MlpBinds,
) -> Result<RationaleMask> {
    let h1 = encode(tape, batch, sep_config, sep_gnn)?;
    let logits = mlp_forward(&h1, sep_mlp)?;
    let m = logits.reshape(&[batch.num_nodes])?.sigmoid();
    Ok(RationaleMask { m, segments: Rc::clone(&batch.segments) })
}

/// Mask-weighted sum pooling: h_r[i] = Σ_{v∈gᵢ} m_v·H_v and
/// h_e[i] = Σ_{v∈gᵢ} (1−m_v)·H_v.
pub fn separate(
    tape: &Tape,
    h: &Tensor,
    mask: &RationaleMask,
    num_graphs: usize,
) -> Result<SeparatedReps> {
    let n = mask.m.numel();
    let h_r = mask.m.mul(h)?.segment_sum(&mask.segments, num_graphs)?;
    let ones = tape.ones(&[n]);
    let h_e = ones.sub(&mask.m)?.mul(h)?.segment_sum(&mask.segments, num_graphs)?;
    Ok(SeparatedReps { h_r, h_e })
}

/// Row-major flat index pair (i·B+j) → (rationale row i, environment row j).
fn pair_indices(b: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let mut r = Vec::with_capacity(b * b);
    let mut e = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            r.push(i);
            e.push(j);
        }
    }
    (Rc::new(r), Rc::new(e))
}

/// All B×B combinations AGG(h_r[i], h_e[j]), flattened row-major to
/// `[B² × d]` (`[B² × 2d]` for concat). Includes the diagonal j=i; callers
/// that want the strict B−1 replacement variant drop it in the loss.
pub fn env_replace(reps: &SeparatedReps, agg: Agg) -> Result<Tensor> {
    let b = reps.h_r.shape()[0];
    let (idx_r, idx_e) = pair_indices(b);
    let r = reps.h_r.gather_rows(&idx_r)?;
    let e = reps.h_e.gather_rows(&idx_e)?;
    match agg {
        Agg::Sum => r.add(&e),
        Agg::Mean => Ok(r.add(&e)?.scale(0.5)),
        Agg::Max => r.emax(&e),
        Agg::Concat => r.concat_rows(&e),
    }
}

/// MLP₂ applied row-wise; returns one value per row. The head's input
/// width must match the representation width.
pub fn predict(h: &Tensor, head: &MlpBinds, agg: Agg) -> Result<Tensor> {
    let width = h.shape().get(1).copied().unwrap_or(1);
    let expected = head.w1.shape()[0];
    if width != expected {
        return Err(TensorError::Contract {
            op: "predict",
            msg: format!(
                "representation width {width} does not match predictor head input {expected}; \
                 agg={agg:?} pair grids need the 2d pair head, plain readouts the d head"
            ),
        });
    }
    let rows = h.shape()[0];
    mlp_forward(h, head)?.reshape(&[rows])
}

/// Eq.-11-style removal loss: stable BCE from logits for classification,
/// MSE for regression.
pub fn loss_rem(tape: &Tape, pred_r: &Tensor, labels: &[f64], task: Task) -> Result<Tensor> {
    let y = tape.leaf(&[labels.len()], labels.to_vec())?;
    match task {
        Task::Binary => pred_r.bce_with_logits(&y),
        Task::Regression => pred_r.mse(&y),
    }
}

/// Replacement loss over the flat pair grid: cell (i,j) is scored against
/// target yᵢ; `include_diagonal: false` drops the j=i cells (the strict
/// B−1 reading). Mean over the selected cells equals the nested
/// per-example average, since every row has equally many cells.
pub fn loss_rep(
    tape: &Tape,
    pred_grid: &Tensor,
    labels: &[f64],
    include_diagonal: bool,
    task: Task,
) -> Result<Tensor> {
    let b = labels.len();
    if pred_grid.numel() != b * b {
        return Err(TensorError::Contract {
            op: "loss_rep",
            msg: format!("grid has {} cells, expected {}×{}", pred_grid.numel(), b, b),
        });
    }
    let (scores, targets) = if include_diagonal {
        let targets: Vec<f64> = labels.iter().flat_map(|&y| std::iter::repeat(y).take(b)).collect();
        (pred_grid.clone(), targets)
    } else {
        let cells = b.saturating_mul(b.saturating_sub(1));
        let mut idx = Vec::with_capacity(cells);
        let mut targets = Vec::with_capacity(cells);
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    idx.push(i * b + j);
                    targets.push(labels[i]);
                }
            }
        }
        if idx.is_empty() {
            // single-graph batch with the diagonal excluded: no cells
            return Ok(tape.scalar(0.0));
        }
        (pred_grid.gather_rows(&Rc::new(idx))?, targets)
    };
    let y = tape.leaf(&[targets.len()], targets)?;
    match task {
        Task::Binary => scores.bce_with_logits(&y),
        Task::Regression => scores.mse(&y),
    }
}

/// Rationale-size regularizer, per graph: (mean(m) − γ) signed and
/// differentiable, plus (fraction of m > threshold − γ) as a detached
/// constant (piecewise constant in the parameters); mean over graphs.
pub fn loss_reg(
    tape: &Tape,
    mask: &RationaleMask,
    num_graphs: usize,
    gamma: f64,
    threshold: f64,
) -> Result<Tensor> {
    let mut counts = vec![0.0f64; num_graphs];
    for &s in mask.segments.iter() {
        counts[s] += 1.0;
    }
    let sums = mask.m.segment_sum(&mask.segments, num_graphs)?;
    let inv = tape.leaf(&[num_graphs], counts.iter().map(|&c| 1.0 / c).collect())?;
    let means = sums.mul(&inv)?;
    let gamma_t = tape.leaf(&[num_graphs], vec![gamma; num_graphs])?;
    let term1 = means.sub(&gamma_t)?;

    let values = mask.m.values();
    let mut over = vec![0.0f64; num_graphs];
    for (&s, &v) in mask.segments.iter().zip(&values) {
        if v > threshold {
            over[s] += 1.0;
        }
    }
    let term2: Vec<f64> = over
        .iter()
        .zip(&counts)
        .map(|(&o, &c)| o / c - gamma)
        .collect();
    let term2_t = tape.leaf(&[num_graphs], term2)?;
    Ok(term1.add(&term2_t)?.mean_all())
}

/// L_pred = L_rem + α·L_rep.
pub fn loss_pred(l_rem: &Tensor, l_rep: &Tensor, alpha: f64) -> Result<Tensor> {
    l_rem.add(&l_rep.scale(alpha))
}

/// L_sep = L_pred + β·L_reg.
pub fn loss_sep(l_pred: &Tensor, l_reg: &Tensor, beta: f64) -> Result<Tensor> {
    l_pred.add(&l_reg.scale(beta))
}

/// Everything one optimization step needs from a forward pass.
#[derive(Debug)]
pub struct LossBundle {
    pub l_rem: Tensor,
    pub l_rep: Tensor,
    pub l_reg: Tensor,
    pub l_pred: Tensor,
    pub l_sep: Tensor,
    /// Mask values snapshot (one per node).
    pub mask_values: Vec<f64>,
    /// Mean over graphs of the fraction of nodes with m > threshold.
    pub rationale_frac: f64,
}

/// Full forward pass: mask, separation, removal and replacement
/// predictions, all five losses.
pub fn forward_losses(
    tape: &Tape,
    batch: &GraphBatch,
    config: &ModelConfig,
    binds: &ModelBinds,
    aug: &AugConfig,
    include_diagonal: bool,
) -> Result<LossBundle> {
    aug.validate()?;
    let labels = &batch.labels;
    if labels.iter().any(|y| !y.is_finite()) {
        return Err(TensorError::Contract {
            op: "forward_losses",
            msg: "batch contains graphs without labels".into(),
        });
    }

    let mask = compute_mask(tape, batch, &config.sep_encoder, &binds.sep_gnn, &binds.sep_mlp)?;
    let h = encode(tape, batch, &config.pred_encoder, &binds.pred_gnn)?;
    let reps = separate(tape, &h, &mask, batch.num_graphs)?;

    let pred_r = predict(&reps.h_r, &binds.pred_mlp, config.agg)?;
    let grid = env_replace(&reps, config.agg)?;
    let pair_head = match config.agg {
        Agg::Concat => binds.pred_mlp_pair.as_ref().ok_or_else(|| TensorError::Contract {
            op: "forward_losses",
            msg: "agg=concat requires the pair predictor head (2d input)".into(),
        })?,
        _ => &binds.pred_mlp,
    };
    let pred_grid = predict(&grid, pair_head, config.agg)?;

    let l_rem = loss_rem(tape, &pred_r, labels, config.task)?;
    let l_rep = loss_rep(tape, &pred_grid, labels, include_diagonal, config.task)?;
    let l_reg = loss_reg(tape, &mask, batch.num_graphs, aug.gamma, aug.mask_count_threshold)?;
    let l_pred = loss_pred(&l_rem, &l_rep, aug.alpha)?;
    let l_sep = loss_sep(&l_pred, &l_reg, aug.beta)?;

    let mask_values = mask.m.values();
    let mut over = vec![0.0f64; batch.num_graphs];
    let mut counts = vec![0.0f64; batch.num_graphs];
    for (&s, &v) in batch.segments.iter().zip(&mask_values) {
        counts[s] += 1.0;
        if v > aug.mask_count_threshold {
            over[s] += 1.0;
        }
    }
    let rationale_frac = over
        .iter()
        .zip(&counts)
        .map(|(&o, &c)| o / c)
        .sum::<f64>()
        / batch.num_graphs as f64;

    Ok(LossBundle { l_rem, l_rep, l_reg, l_pred, l_sep, mask_values, rationale_frac })
}

/// Inference output for one batch: per-graph scores through the rationale
/// path only (ŷ⁽ʳ⁾) and the node mask.
pub struct InferOutput {
    /// Probabilities for binary tasks, raw values for regression.
    pub scores: Vec<f64>,
    pub mask_values: Vec<f64>,
    pub rationale_frac: f64,
}

/// Forward-only prediction: no augmentation, d-width head only.
pub fn infer(batch: &GraphBatch, config: &ModelConfig, params: &ModelParams) -> Result<InferOutput> {
    let tape = Tape::new();
    let binds = params.bind(&tape, false, false)?;
    let mask = compute_mask(&tape, batch, &config.sep_encoder, &binds.sep_gnn, &binds.sep_mlp)?;
    let h = encode(&tape, batch, &config.pred_encoder, &binds.pred_gnn)?;
    let reps = separate(&tape, &h, &mask, batch.num_graphs)?;
    let out = predict(&reps.h_r, &binds.pred_mlp, config.agg)?;
    let scores = match config.task {
        Task::Binary => out.sigmoid().values(),
        Task::Regression => out.values(),
    };
    let mask_values = mask.m.values();
    let threshold = 0.5;
    let mut over = vec![0.0f64; batch.num_graphs];
    let mut counts = vec![0.0f64; batch.num_graphs];
    for (&s, &v) in batch.segments.iter().zip(&mask_values) {
        counts[s] += 1.0;
        if v > threshold {
            over[s] += 1.0;
        }
    }
    let rationale_frac =
        over.iter().zip(&counts).map(|(&o, &c)| o / c).sum::<f64>() / batch.num_graphs as f64;
    Ok(InferOutput { scores, mask_values, rationale_frac })
}
