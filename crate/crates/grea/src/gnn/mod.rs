//! Message-passing encoders (GCN, GIN) over block-diagonal batches.
//!
//! Both encoders share one mechanical core: a symmetric sparse adjacency
//! built per batch, applied with `spmm_sym`. GCN uses the symmetric
//! normalization D̃^{-1/2}(A+I)D̃^{-1/2} with self-loops added on the fly
//! (never stored in the data model); GIN uses A with a (1+ε) diagonal and
//! feeds the aggregate through a per-layer two-affine MLP.

use crate::data::GraphBatch;
use crate::tensor::{Param, Result, SparseSym, Tape, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Gcn,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// GIN self-weight offset; fixed at 0 (non-learned).
    #[serde(default)]
    pub gin_eps: f64,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, num_layers: usize, hidden_dim: usize) -> Self {
        EncoderConfig { kind, num_layers, hidden_dim, gin_eps: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 || self.hidden_dim < 1 {
            return Err(TensorError::Contract {
                op: "encoder config",
                msg: format!(
                    "need num_layers ≥ 1 and hidden_dim ≥ 1, got {} and {}",
                    self.num_layers, self.hidden_dim
                ),
            });
        }
        Ok(())
    }
}

/// Parameters of one message-passing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Gcn { w: Param },
    Gin { w1: Param, b1: Param, w2: Param, b2: Param },
}

/// Encoder weights: input projection F→d plus `num_layers` layer blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub proj: Param,
    pub layers: Vec<LayerParams>,
}

/// Glorot-uniform sample in ±√(6/(fan_in+fan_out)).
pub fn glorot(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Param {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Param::new(name, vec![rows, cols], values)
}

/// Bias init: uniform in ±1/√fan_in. Nonzero so relu pre-activations
/// never sit exactly on the kink (which would poison finite-difference
/// audits at zero-measure points).
pub fn bias_uniform(name: &str, n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Param {
    let limit = 1.0 / (fan_in as f64).sqrt();
    let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Param::new(name, vec![n], values)
}

impl EncoderParams {
    /// Seed-deterministic initialization. `prefix` namespaces parameter
    /// names (e.g. "sep.gnn", "pred.gnn").
    pub fn init(
        prefix: &str,
        config: &EncoderConfig,
        num_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = config.hidden_dim;
        let proj = glorot(&format!("{prefix}.proj"), num_features, d, rng);
        let layers = (0..config.num_layers)
            .map(|l| match config.kind {
                EncoderKind::Gcn => LayerParams::Gcn {
                    w: glorot(&format!("{prefix}.layer{l}.w"), d, d, rng),
                },
                EncoderKind::Gin => LayerParams::Gin {
                    w1: glorot(&format!("{prefix}.layer{l}.w1"), d, d, rng),
                    b1: bias_uniform(&format!("{prefix}.layer{l}.b1"), d, d, rng),
                    w2: glorot(&format!("{prefix}.layer{l}.w2"), d, d, rng),
                    b2: bias_uniform(&format!("{prefix}.layer{l}.b2"), d, d, rng),
                },
            })
            .collect();
        EncoderParams { proj, layers }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.proj];
        for layer in &self.layers {
            match layer {
                LayerParams::Gcn { w } => out.push(w),
                LayerParams::Gin { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.proj];
        for layer in &mut self.layers {
            match layer {
                LayerParams::Gcn { w } => out.push(w),
                LayerParams::Gin { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
            }
        }
        out
    }

    /// Bind all parameters onto a tape.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<EncoderBinds> {
        let proj = tape.bind(&self.proj, trainable)?;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                Ok(match layer {
                    LayerParams::Gcn { w } => LayerBinds::Gcn { w: tape.bind(w, trainable)? },
                    LayerParams::Gin { w1, b1, w2, b2 } => LayerBinds::Gin {
                        w1: tape.bind(w1, trainable)?,
                        b1: tape.bind(b1, trainable)?,
                        w2: tape.bind(w2, trainable)?,
                        b2: tape.bind(b2, trainable)?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderBinds { proj, layers })
    }
}

pub enum LayerBinds {
    Gcn { w: Tensor },
    Gin { w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor },
}

pub struct EncoderBinds {
    pub proj: Tensor,
    pub layers: Vec<LayerBinds>,
}

impl EncoderBinds {
    /// Bound leaves in the same order as `EncoderParams::params()`.
    pub fn leaves(&self) -> Vec<Tensor> {
        let mut out = vec![self.proj.clone()];
        for layer in &self.layers {
            match layer {
                LayerBinds::Gcn { w } => out.push(w.clone()),
                LayerBinds::Gin { w1, b1, w2, b2 } => {
                    out.extend([w1.clone(), b1.clone(), w2.clone(), b2.clone()])
                }
            }
        }
        out
    }
}

/// Â = D̃^{-1/2}(A+I)D̃^{-1/2}: self-loops added here, not stored.
pub fn gcn_adjacency(batch: &GraphBatch) -> Rc<SparseSym> {
    let n = batch.num_nodes;
    let mut deg = vec![1.0f64; n]; // self-loop contributes 1 to every node
    for &(u, v) in &batch.edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(batch.edges.len() + n);
    for &(u, v) in &batch.edges {
        triples.push((u, v, 1.0 / (deg[u] * deg[v]).sqrt()));
    }
    for v in 0..n {
        triples.push((v, v, 1.0 / deg[v]));
    }
    Rc::new(SparseSym::from_triples(n, &triples))
}

/// A + (1+ε)I: GIN's neighbor sum plus weighted self term.
pub fn gin_adjacency(batch: &GraphBatch, eps: f64) -> Rc<SparseSym> {
    let n = batch.num_nodes;
    let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(batch.edges.len() + n);
    for &(u, v) in &batch.edges {
        triples.push((u, v, 1.0));
    }
    for v in 0..n {
        triples.push((v, v, 1.0 + eps));
    }
    Rc::new(SparseSym::from_triples(n, &triples))
}

/// One GCN layer: Â·H·W, with relu unless `activate` is false (final layer).
pub fn gcn_layer(adj: &Rc<SparseSym>, h: &Tensor, w: &Tensor, activate: bool) -> Result<Tensor> {
    let z = h.spmm_sym(adj)?.matmul(w)?;
    Ok(if activate { z.relu() } else { z })
}

/// One GIN layer: MLP((1+ε)h_v + Σ_{u∈N(v)} h_u); the MLP is two affine
/// maps with relu between, no outer activation.
pub fn gin_layer(
    adj: &Rc<SparseSym>,
    h: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    h.spmm_sym(adj)?
        .matmul(w1)?
        .add_bias(b1)?
        .relu()
        .matmul(w2)?
        .add_bias(b2)
}

/// Input projection then L message-passing layers over the batch.
pub fn encode(
    tape: &Tape,
    batch: &GraphBatch,
    config: &EncoderConfig,
    binds: &EncoderBinds,
) -> Result<Tensor> {
    config.validate()?;
    let x = tape.leaf(&[batch.num_nodes, batch.num_features], batch.features.clone())?;
    let mut h = x.matmul(&binds.proj)?;
    let adj = match config.kind {
        EncoderKind::Gcn => gcn_adjacency(batch),
        EncoderKind::Gin => gin_adjacency(batch, config.gin_eps),
    };
    for (li, layer) in binds.layers.iter().enumerate() {
        let last = li + 1 == binds.layers.len();
        h = match layer {
            LayerBinds::Gcn { w } => gcn_layer(&adj, &h, w, !last)?,
            LayerBinds::Gin { w1, b1, w2, b2 } => gin_layer(&adj, &h, w1, b1, w2, b2)?,
        };
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutMode {
    Sum,
    Mean,
    Max,
}

/// Per-graph reduction of node rows into `[B × d]` graph rows.
pub fn readout(
    tape: &Tape,
    h: &Tensor,
    segments: &Rc<Vec<usize>>,
    num_graphs: usize,
    mode: ReadoutMode,
) -> Result<Tensor> {
    match mode {
        ReadoutMode::Sum => h.segment_sum(segments, num_graphs),
        ReadoutMode::Mean => {
            let sums = h.segment_sum(segments, num_graphs)?;
            let mut counts = vec![0.0f64; num_graphs];
            for &s in segments.iter() {
                counts[s] += 1.0;
            }
            if counts.iter().any(|&c| c == 0.0) {
                return Err(TensorError::Contract {
                    op: "readout",
                    msg: "mean readout over an empty segment".into(),
                });
            }
            let inv = tape.leaf(&[num_graphs], counts.iter().map(|&c| 1.0 / c).collect())?;
            sums.mul(&inv)
        }
        ReadoutMode::Max => h.segment_max(segments, num_graphs),
    }
}
