//! Latent replacement vs explicit re-encoding, timed and cross-checked.
//!
//! The latent path encodes a batch once and builds every pair
//! representation with O(B²) vector combines. The explicit baseline
//! materializes each (gᵢ, gⱼ) as a disconnected union graph and re-runs
//! the predictor encoder per pair — the decode/re-encode cost this
//! design avoids. Both paths must agree to high precision under sum
//! aggregation, so the benchmark doubles as an exactness check.

use crate::data::{Graph, GraphBatch};
use crate::gnn::{encode, EncoderConfig, EncoderParams};
use crate::model::{compute_mask, env_replace, separate, Agg, ModelConfig, ModelParams, RationaleMask, SeparatedReps};
use crate::tensor::{Result, Tape, TensorError};
use serde::Serialize;
use std::rc::Rc;
use std::time::Instant;

/// Disconnected union of two graphs; edges of `g_j` shift by `g_i`'s size.
fn union_graph(g_i: &Graph, g_j: &Graph) -> Result<Graph> {
    if g_i.num_features != g_j.num_features {
        return Err(TensorError::Contract {
            op: "union_graph",
            msg: format!(
                "feature widths differ: {} vs {}",
                g_i.num_features, g_j.num_features
            ),
        });
    }
    let f = g_i.num_features;
    let mut nodes: Vec<Vec<f64>> = (0..g_i.num_nodes)
        .map(|v| g_i.features[v * f..(v + 1) * f].to_vec())
        .collect();
    nodes.extend((0..g_j.num_nodes).map(|v| g_j.features[v * f..(v + 1) * f].to_vec()));
    let mut edges = g_i.edges.clone();
    edges.extend(g_j.edges.iter().map(|&(u, v)| (u + g_i.num_nodes, v + g_i.num_nodes)));
    Graph::new(nodes, edges, None, None)
        .map_err(|msg| TensorError::Contract { op: "union_graph", msg })
}

/// The explicit path for one pair: encode the union of gᵢ and gⱼ, then
/// pool with weights mᵢ on gᵢ's nodes and 1−mⱼ on gⱼ's (sum agg).
pub fn explicit_pair_rep(
    g_i: &Graph,
    g_j: &Graph,
    mask_i: &[f64],
    mask_j: &[f64],
    pred_encoder: &EncoderConfig,
    pred_gnn: &EncoderParams,
) -> Result<Vec<f64>> {
    if mask_i.len() != g_i.num_nodes || mask_j.len() != g_j.num_nodes {
        return Err(TensorError::Contract {
            op: "explicit_pair_rep",
            msg: format!(
                "mask lengths ({}, {}) must match node counts ({}, {})",
                mask_i.len(),
                mask_j.len(),
                g_i.num_nodes,
                g_j.num_nodes
            ),
        });
    }
    let union = union_graph(g_i, g_j)?;
    let batch = GraphBatch::single(&union);
    let tape = Tape::new();
    let binds = pred_gnn.bind(&tape, false)?;
    let h = encode(&tape, &batch, pred_encoder, &binds)?;
    let mut weights = mask_i.to_vec();
    weights.extend(mask_j.iter().map(|m| 1.0 - m));
    let w = tape.leaf(&[batch.num_nodes], weights)?;
    Ok(w.mul(&h)?.segment_sum(&batch.segments, 1)?.values())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCase {
    pub b: usize,
    pub t_latent_ms: f64,
    pub t_explicit_ms: f64,
    /// Max abs deviation between latent and explicit pair representations
    /// over all B² cells (sum agg — the exact case).
    pub max_abs_dev: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub cases: Vec<BenchCase>,
    pub reps: usize,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("B,t_latent_ms,t_explicit_ms,max_abs_dev,speedup\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{:.3},{:.3},{:.3e},{:.2}\n",
                c.b, c.t_latent_ms, c.t_explicit_ms, c.max_abs_dev, c.speedup
            ));
        }
        out
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Time both paths for each batch size and verify exactness.
///
/// Masks come from the model's separator, computed once outside the timed
/// region — both paths consume the same fixed masks, so timings compare
/// pair-representation construction only. One warm-up run per path per
/// batch size precedes the `reps` timed runs (median reported). Sum
/// aggregation throughout. Timing assumes a single thread.
pub fn run_bench(
    graphs: &[Graph],
    config: &ModelConfig,
    params: &ModelParams,
    b_list: &[usize],
    reps: usize,
) -> Result<BenchReport> {
    if b_list.is_empty() || reps == 0 {
        return Err(TensorError::Contract {
            op: "run_bench",
            msg: "need at least one batch size and one repetition".into(),
        });
    }
    let max_b = *b_list.iter().max().unwrap();
    if graphs.len() < max_b {
        return Err(TensorError::Contract {
            op: "run_bench",
            msg: format!("dataset has {} graphs, largest batch needs {max_b}", graphs.len()),
        });
    }

    // fixed masks for the max-B prefix, computed once up front
    let indices: Vec<usize> = (0..max_b).collect();
    let full_batch = GraphBatch::from_indices(graphs, &indices, graphs[0].num_features);
    let mask_flat = {
        let tape = Tape::new();
        let binds = params.bind(&tape, false, false)?;
        compute_mask(&tape, &full_batch, &config.sep_encoder, &binds.sep_gnn, &binds.sep_mlp)?
            .m
            .values()
    };
    let mut masks: Vec<Vec<f64>> = vec![Vec::new(); max_b];
    for (&seg, &m) in full_batch.segments.iter().zip(&mask_flat) {
        masks[seg].push(m);
    }

    let mut cases = Vec::with_capacity(b_list.len());
    for &b in b_list {
        let idx: Vec<usize> = (0..b).collect();
        let batch = GraphBatch::from_indices(graphs, &idx, graphs[0].num_features);
        let flat: Vec<f64> = idx.iter().flat_map(|&i| masks[i].iter().copied()).collect();

        let latent_pass = || -> Result<Vec<f64>> {
            let tape = Tape::new();
            let binds = params.pred.gnn.bind(&tape, false)?;
            let h = encode(&tape, &batch, &config.pred_encoder, &binds)?;
            let m = tape.leaf(&[batch.num_nodes], flat.clone())?;
            let mask = RationaleMask { m, segments: Rc::clone(&batch.segments) };
            let reps_sep: SeparatedReps = separate(&tape, &h, &mask, b)?;
            Ok(env_replace(&reps_sep, Agg::Sum)?.values())
        };
        let explicit_pass = || -> Result<Vec<Vec<f64>>> {
            let mut cells = Vec::with_capacity(b * b);
            for i in 0..b {
                for j in 0..b {
                    cells.push(explicit_pair_rep(
                        &graphs[i],
                        &graphs[j],
                        &masks[i],
                        &masks[j],
                        &config.pred_encoder,
                        &params.pred.gnn,
                    )?);
                }
            }
            Ok(cells)
        };

        // warm-up (excluded), keeping outputs for the exactness check
        let latent_grid = latent_pass()?;
        let explicit_cells = explicit_pass()?;

        let d = explicit_cells[0].len();
        let mut max_abs_dev = 0.0f64;
        for (cell_idx, cell) in explicit_cells.iter().enumerate() {
            for (k, &e) in cell.iter().enumerate() {
                max_abs_dev = max_abs_dev.max((latent_grid[cell_idx * d + k] - e).abs());
            }
        }

        let mut t_latent = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let _ = latent_pass()?;
            t_latent.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mut t_explicit = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let _ = explicit_pass()?;
            t_explicit.push(t0.elapsed().as_secs_f64() * 1e3);
        }

        let t_latent_ms = median_ms(t_latent);
        let t_explicit_ms = median_ms(t_explicit);
        cases.push(BenchCase {
            b,
            t_latent_ms,
            t_explicit_ms,
            max_abs_dev,
            speedup: t_explicit_ms / t_latent_ms,
        });
    }
    Ok(BenchReport { cases, reps })
}

#[cfg(test)]
mod tests;
