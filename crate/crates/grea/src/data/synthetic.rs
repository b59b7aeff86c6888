//! Planted-motif benchmark generator.
//!
//! Each graph is a base graph plus one motif, joined by exactly one
//! attachment edge. The label is the motif class; the motif nodes are the
//! ground-truth rationale. A spurious-bias knob correlates the *base*
//! structure with the label on the train portion only, planting exactly
//! the kind of environment shortcut the rationalizer is meant to ignore.

use super::{DataError, DatasetSplit, Graph, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Paper-style 60/10/30 partition, applied in index order by the
/// generator so the bias lands on the train portion.
const TRAIN_RATIO: f64 = 0.6;
const VALID_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    RandomTree,
    Ladder,
    Wheel,
}

impl BaseKind {
    pub const ALL: [BaseKind; 3] = [BaseKind::RandomTree, BaseKind::Ladder, BaseKind::Wheel];

    /// The kind one step around the cycle; used as the class-0 partner of
    /// the configured class-1 kind when the spurious bias fires.
    fn next(self) -> BaseKind {
        match self {
            BaseKind::RandomTree => BaseKind::Ladder,
            BaseKind::Ladder => BaseKind::Wheel,
            BaseKind::Wheel => BaseKind::RandomTree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotifKind {
    House,
    Cycle,
}

impl MotifKind {
    pub fn num_nodes(self) -> usize {
        match self {
            MotifKind::House => 5,
            MotifKind::Cycle => 6,
        }
    }

    fn edges(self) -> &'static [(usize, usize)] {
        match self {
            // 4-cycle 0-1-2-3 with apex 4 over the 0-1 side
            MotifKind::House => &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            MotifKind::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// One-hot of `min(degree, dim−1)`: per-node label-uninformative,
    /// forcing the model to read structure.
    OneHotDegree { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_graphs: usize,
    /// Inclusive node-count range for the base graph.
    pub base_size: (usize, usize),
    /// Base kind correlated with class 1 when the spurious bias fires;
    /// class 0 correlates with the cyclically next kind.
    pub base_kind: BaseKind,
    /// Motif per class: index 0 for class 0, index 1 for class 1.
    pub motif_kinds: [MotifKind; 2],
    pub feature_mode: FeatureMode,
    /// Probability (train portion only) that the base kind is the
    /// label-correlated choice rather than a fair coin over the two kinds
    /// in play; valid/test always use the fair coin.
    pub spurious_bias: f64,
    /// Probability that a stored label is flipped from the motif class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_graphs: 1000,
            base_size: (8, 14),
            base_kind: BaseKind::Ladder,
            motif_kinds: [MotifKind::House, MotifKind::Cycle],
            feature_mode: FeatureMode::OneHotDegree { dim: 8 },
            spurious_bias: 0.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(DataError::Config(msg));
        if self.num_graphs == 0 {
            return err("num_graphs must be positive".into());
        }
        let (lo, hi) = self.base_size;
        if lo < 2 || lo > hi {
            return err(format!("base_size range ({lo},{hi}) must satisfy 2 ≤ lo ≤ hi"));
        }
        let FeatureMode::OneHotDegree { dim } = self.feature_mode;
        if dim < 2 {
            return err(format!("feature dim must be ≥ 2, got {dim}"));
        }
        if !(0.0..=1.0).contains(&self.spurious_bias) {
            return err(format!("spurious_bias must lie in [0,1], got {}", self.spurious_bias));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return err(format!("label_noise must lie in [0,1], got {}", self.label_noise));
        }
        Ok(())
    }
}

/// Per-graph generation record kept alongside the dataset: which split
/// portion each graph landed in and which base kind it drew.
#[derive(Debug, Clone)]
pub struct SyntheticMeta {
    pub split: DatasetSplit,
    pub base_kinds: Vec<BaseKind>,
    /// Motif class per graph (the pre-noise label).
    pub classes: Vec<u8>,
}

/// Generate the dataset (graphs only, index order = train, valid, test).
pub fn gen_planted_motif(spec: &SyntheticSpec) -> Result<Vec<Graph>> {
    Ok(gen_planted_motif_meta(spec)?.0)
}

/// Generate the dataset plus its contiguous split and per-graph metadata.
pub fn gen_planted_motif_meta(spec: &SyntheticSpec) -> Result<(Vec<Graph>, SyntheticMeta)> {
    spec.validate()?;
    let n = spec.num_graphs;
    let n_train = (TRAIN_RATIO * n as f64).floor() as usize;
    let n_valid = (VALID_RATIO * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut graphs = Vec::with_capacity(n);
    let mut base_kinds = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);

    for i in 0..n {
        let in_train = i < n_train;
        let class = usize::from(rng.random_bool(0.5));
        let label = if rng.random_bool(spec.label_noise) { 1 - class } else { class };
        let corr_kind = if class == 1 { spec.base_kind } else { spec.base_kind.next() };
        let kind = if in_train && rng.random_bool(spec.spurious_bias) {
            corr_kind
        } else if rng.random_bool(0.5) {
            spec.base_kind
        } else {
            spec.base_kind.next()
        };
        let base_n = rng.random_range(spec.base_size.0..=spec.base_size.1);
        let graph = assemble(kind, base_n, spec.motif_kinds[class], spec.feature_mode, label, &mut rng);
        base_kinds.push(kind);
        classes.push(class as u8);
        graphs.push(graph);
    }

    let split = DatasetSplit {
        train: (0..n_train).collect(),
        valid: (n_train..n_train + n_valid).collect(),
        test: (n_train + n_valid..n).collect(),
    };
    Ok((graphs, SyntheticMeta { split, base_kinds, classes }))
}

fn assemble(
    kind: BaseKind,
    base_n: usize,
    motif: MotifKind,
    features: FeatureMode,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Graph {
    let mut edges = base_edges(kind, base_n, rng);
    let m = motif.num_nodes();
    edges.extend(motif.edges().iter().map(|&(u, v)| (base_n + u, base_n + v)));
    // exactly one attachment edge between base and motif
    let base_anchor = rng.random_range(0..base_n);
    let motif_anchor = base_n + rng.random_range(0..m);
    edges.push((base_anchor, motif_anchor));

    let total = base_n + m;
    let mut deg = vec![0usize; total];
    for &(u, v) in &edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    let FeatureMode::OneHotDegree { dim } = features;
    let nodes: Vec<Vec<f64>> = deg
        .iter()
        .map(|&d| {
            let mut row = vec![0.0; dim];
            row[d.min(dim - 1)] = 1.0;
            row
        })
        .collect();
    let rationale: Vec<usize> = (base_n..total).collect();
    Graph::new(nodes, edges, Some(label as f64), Some(rationale))
        .expect("generator invariants guarantee a valid graph")
}

fn base_edges(kind: BaseKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match kind {
        BaseKind::RandomTree => {
            // random recursive tree: each new node attaches to an earlier one
            (1..n).map(|v| (rng.random_range(0..v), v)).collect()
        }
        BaseKind::Ladder => {
            // 2×⌊n/2⌋ ladder; an odd leftover node hangs off node 0
            let rungs = n / 2;
            let mut edges = Vec::new();
            for i in 0..rungs {
                edges.push((2 * i, 2 * i + 1));
                if i + 1 < rungs {
                    edges.push((2 * i, 2 * i + 2));
                    edges.push((2 * i + 1, 2 * i + 3));
                }
            }
            if n % 2 == 1 {
                edges.push((0, n - 1));
            }
            edges
        }
        BaseKind::Wheel => {
            // hub 0, rim 1..n; degenerates to a star for n < 4
            let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
            if n >= 4 {
                for v in 1..n - 1 {
                    edges.push((v, v + 1));
                }
                edges.push((n - 1, 1));
            }
            edges
        }
    }
}
