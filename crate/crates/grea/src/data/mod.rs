//! Graph data model: JSONL ingestion, batching, splits, and the synthetic
//! planted-motif generator.
//!
//! Graphs store each undirected edge once; encoders expand to both
//! directions when they build adjacency structures. All types here are
//! immutable after construction and safe to share across threads.

mod synthetic;

pub use synthetic::{
    gen_planted_motif, gen_planted_motif_meta, BaseKind, FeatureMode, MotifKind, SyntheticMeta,
    SyntheticSpec,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One undirected graph. `features` is row-major `[num_nodes × num_features]`.
/// `label` may be absent for inference-only data; `rationale_truth` is the
/// sorted set of ground-truth rationale node indices when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_features: usize,
    pub features: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub label: Option<f64>,
    pub rationale_truth: Option<Vec<usize>>,
}

/// Wire format: one JSON object per line, fields `nodes`, `edges`,
/// optional `y`, optional `rationale_nodes`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    nodes: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale_nodes: Option<Vec<usize>>,
}

impl Graph {
    /// Validate and build a graph from per-node feature rows.
    pub fn new(
        nodes: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        label: Option<f64>,
        rationale_truth: Option<Vec<usize>>,
    ) -> std::result::Result<Self, String> {
        let n = nodes.len();
        if n == 0 {
            return Err("graph must have at least one node".into());
        }
        let f = nodes[0].len();
        if f == 0 {
            return Err("feature rows must be nonempty".into());
        }
        let mut features = Vec::with_capacity(n * f);
        for (i, row) in nodes.iter().enumerate() {
            if row.len() != f {
                return Err(format!(
                    "ragged features: node {i} has {} values, node 0 has {f}",
                    row.len()
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite feature on node {i}"));
            }
            features.extend_from_slice(row);
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(format!("edge ({u},{v}) out of range for {n} nodes"));
            }
            if u == v {
                return Err(format!("self-loop on node {u} (self-loops are not stored)"));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(format!("duplicate edge ({u},{v})"));
            }
        }
        if let Some(l) = label {
            if !l.is_finite() {
                return Err("non-finite label".into());
            }
        }
        let rationale_truth = match rationale_truth {
            Some(mut r) => {
                if let Some(&bad) = r.iter().find(|&&i| i >= n) {
                    return Err(format!("rationale node {bad} out of range for {n} nodes"));
                }
                r.sort_unstable();
                r.dedup();
                Some(r)
            }
            None => None,
        };
        Ok(Graph { num_nodes: n, num_features: f, features, edges, label, rationale_truth })
    }

    /// Node degrees (undirected; stored edges count toward both endpoints).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    fn to_record(&self) -> GraphRecord {
        let nodes = self
            .features
            .chunks(self.num_features)
            .map(|row| row.to_vec())
            .collect();
        GraphRecord {
            nodes,
            edges: self.edges.clone(),
            y: self.label,
            rationale_nodes: self.rationale_truth.clone(),
        }
    }
}

/// Load a JSONL dataset. Errors carry 1-based line numbers.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line)
            .map_err(|source| DataError::Parse { line: line_no, source })?;
        let graph = Graph::new(record.nodes, record.edges, record.y, record.rationale_nodes)
            .map_err(|msg| DataError::Invalid { line: line_no, msg })?;
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Write graphs as JSONL, one compact object per line, in input order.
pub fn save_jsonl(path: impl AsRef<Path>, graphs: &[Graph]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in graphs {
        serde_json::to_writer(&mut file, &g.to_record())
            .map_err(|e| DataError::Config(format!("serialize: {e}")))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// A block-diagonal batch of graphs. Node indices are global; `segments`
/// maps each node to its graph id `0..num_graphs`. `labels[i]` is NaN when
/// the source graph carried no label (inference data); training validates
/// labels before use.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    pub num_features: usize,
    pub features: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub segments: Rc<Vec<usize>>,
    pub labels: Vec<f64>,
    /// Position of each member in the dataset the batch was built from.
    pub graph_indices: Vec<usize>,
}

impl GraphBatch {
    /// Batch an explicit selection of graphs (dataset indices recorded).
    pub fn from_indices(graphs: &[Graph], indices: &[usize], num_features: usize) -> Self {
        let mut features = Vec::new();
        let mut edges = Vec::new();
        let mut segments = Vec::new();
        let mut labels = Vec::with_capacity(indices.len());
        let mut offset = 0;
        for (gi, &idx) in indices.iter().enumerate() {
            let g = &graphs[idx];
            features.extend_from_slice(&g.features);
            edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
            segments.extend(std::iter::repeat(gi).take(g.num_nodes));
            labels.push(g.label.unwrap_or(f64::NAN));
            offset += g.num_nodes;
        }
        GraphBatch {
            num_graphs: indices.len(),
            num_nodes: offset,
            num_features,
            features,
            edges,
            segments: Rc::new(segments),
            labels,
            graph_indices: indices.to_vec(),
        }
    }

    /// Single-graph batch (per-graph oracle paths, inference).
    pub fn single(graph: &Graph) -> Self {
        GraphBatch::from_indices(std::slice::from_ref(graph), &[0], graph.num_features)
    }
}

/// Chunk graphs into batches of `batch_size` (last short batch kept).
/// `shuffle_seed: Some(s)` applies a seeded shuffle first; `None` keeps
/// input order. Training requires `batch_size ≥ 2` (environment
/// replacement needs pairs); that is enforced by the trainer, not here.
pub fn make_batches(
    graphs: &[Graph],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<GraphBatch>> {
    if batch_size < 1 {
        return Err(DataError::Config(format!("batch size must be ≥ 1, got {batch_size}")));
    }
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let f = graphs[0].num_features;
    for (i, g) in graphs.iter().enumerate() {
        if g.num_features != f {
            return Err(DataError::Config(format!(
                "graph {i} has {} features, graph 0 has {f}",
                g.num_features
            )));
        }
    }
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| GraphBatch::from_indices(graphs, chunk, f))
        .collect())
}

/// Index lists for a train/valid/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then cut: train gets `⌊r_train·n⌋` indices, valid
/// `⌊r_valid·n⌋`, test the remainder.
pub fn split(graphs: &[Graph], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    split_indices(graphs.len(), ratios, seed)
}

pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if !(rt >= 0.0 && rv >= 0.0 && rs >= 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split ratios must be nonnegative and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (rt * n as f64).floor() as usize;
    let n_valid = (rv * n as f64).floor() as usize;
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(DatasetSplit { train: order, valid, test })
}

/// Select the graphs named by an index list.
pub fn take(graphs: &[Graph], indices: &[usize]) -> Vec<Graph> {
    indices.iter().map(|&i| graphs[i].clone()).collect()
}
