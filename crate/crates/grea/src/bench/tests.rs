use super::*;
use crate::data::{gen_planted_motif, SyntheticSpec};
use crate::gnn::{readout, EncoderKind, ReadoutMode};
use crate::model::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graphs(n: usize, seed: u64) -> Vec<Graph> {
    let spec = SyntheticSpec {
        num_graphs: n,
        seed,
        base_size: (4, 6),
        ..SyntheticSpec::default()
    };
    gen_planted_motif(&spec).unwrap()
}

fn setup(n: usize, seed: u64) -> (Vec<Graph>, ModelConfig, ModelParams) {
    let gs = graphs(n, seed);
    let config = ModelConfig {
        sep_encoder: EncoderConfig::new(EncoderKind::Gin, 1, 4),
        pred_encoder: EncoderConfig::new(EncoderKind::Gin, 1, 4),
        agg: Agg::Sum,
        task: Task::Binary,
        num_features: gs[0].num_features,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbead);
    let params = ModelParams::init(&config, &mut rng);
    (gs, config, params)
}

/// Separator masks for each graph, one single-graph batch at a time.
fn per_graph_masks(gs: &[Graph], config: &ModelConfig, params: &ModelParams) -> Vec<Vec<f64>> {
    gs.iter()
        .map(|g| {
            let tape = Tape::new();
            let binds = params.bind(&tape, false, false).unwrap();
            let batch = GraphBatch::single(g);
            compute_mask(&tape, &batch, &config.sep_encoder, &binds.sep_gnn, &binds.sep_mlp)
                .unwrap()
                .m
                .values()
        })
        .collect()
}

#[test]
fn diagonal_pair_equals_full_sum_readout() {
    // weights m ⧺ (1−m) over a graph unioned with itself sum to the plain
    // readout: Σ m·H + Σ (1−m)·H = Σ H.
    let (gs, config, params) = setup(3, 7);
    let masks = per_graph_masks(&gs, &config, &params);
    for (g, m) in gs.iter().zip(&masks) {
        let pair =
            explicit_pair_rep(g, g, m, m, &config.pred_encoder, &params.pred.gnn).unwrap();

        let tape = Tape::new();
        let binds = params.pred.gnn.bind(&tape, false).unwrap();
        let batch = GraphBatch::single(g);
        let h = encode(&tape, &batch, &config.pred_encoder, &binds).unwrap();
        let full = readout(&tape, &h, &batch.segments, 1, ReadoutMode::Sum)
            .unwrap()
            .values();

        assert_eq!(pair.len(), full.len());
        for (a, b) in pair.iter().zip(&full) {
            assert!((a - b).abs() < 1e-10, "diag cell {a} vs readout {b}");
        }
    }
}

#[test]
fn environment_masked_to_zero_recovers_h_r() {
    // mask_j ≡ 1 zeroes the environment side, leaving exactly h_r[i].
    let (gs, config, params) = setup(2, 11);
    let masks = per_graph_masks(&gs, &config, &params);
    let ones = vec![1.0; gs[1].num_nodes];
    let got = explicit_pair_rep(
        &gs[0],
        &gs[1],
        &masks[0],
        &ones,
        &config.pred_encoder,
        &params.pred.gnn,
    )
    .unwrap();

    let tape = Tape::new();
    let binds = params.pred.gnn.bind(&tape, false).unwrap();
    let batch = GraphBatch::single(&gs[0]);
    let h = encode(&tape, &batch, &config.pred_encoder, &binds).unwrap();
    let m = tape.leaf(&[batch.num_nodes], masks[0].clone()).unwrap();
    let mask = RationaleMask { m, segments: Rc::clone(&batch.segments) };
    let h_r = separate(&tape, &h, &mask, 1).unwrap().h_r.values();

    for (a, b) in got.iter().zip(&h_r) {
        assert!((a - b).abs() < 1e-12, "explicit {a} vs h_r {b}");
    }
}

#[test]
fn explicit_grid_matches_latent_grid() {
    // Every cell of the latent B×B grid agrees with an explicit union
    // re-encoding of the same pair, in both index orders.
    let (gs, config, params) = setup(3, 23);
    let b = gs.len();
    let masks = per_graph_masks(&gs, &config, &params);

    let tape = Tape::new();
    let binds = params.pred.gnn.bind(&tape, false).unwrap();
    let indices: Vec<usize> = (0..b).collect();
    let batch = GraphBatch::from_indices(&gs, &indices, gs[0].num_features);
    let h = encode(&tape, &batch, &config.pred_encoder, &binds).unwrap();
    let flat: Vec<f64> = masks.iter().flatten().copied().collect();
    let m = tape.leaf(&[batch.num_nodes], flat).unwrap();
    let mask = RationaleMask { m, segments: Rc::clone(&batch.segments) };
    let reps = separate(&tape, &h, &mask, b).unwrap();
    let grid = env_replace(&reps, Agg::Sum).unwrap();
    let d = grid.shape()[1];
    let grid_vals = grid.values();

    for i in 0..b {
        for j in 0..b {
            let cell = explicit_pair_rep(
                &gs[i],
                &gs[j],
                &masks[i],
                &masks[j],
                &config.pred_encoder,
                &params.pred.gnn,
            )
            .unwrap();
            let row = (i * b + j) * d;
            for (k, &e) in cell.iter().enumerate() {
                let l = grid_vals[row + k];
                assert!(
                    (l - e).abs() < 1e-9,
                    "cell ({i},{j})[{k}]: latent {l} vs explicit {e}"
                );
            }
        }
    }
}

#[test]
fn mismatched_masks_and_widths_are_rejected() {
    let (gs, config, params) = setup(2, 31);
    let bad = vec![0.5; gs[0].num_nodes + 1];
    let err = explicit_pair_rep(
        &gs[0],
        &gs[1],
        &bad,
        &vec![0.5; gs[1].num_nodes],
        &config.pred_encoder,
        &params.pred.gnn,
    )
    .unwrap_err();
    assert!(err.to_string().contains("mask lengths"));

    let narrow = Graph::new(vec![vec![1.0], vec![0.0]], vec![(0, 1)], None, None).unwrap();
    let err = explicit_pair_rep(
        &gs[0],
        &narrow,
        &vec![0.5; gs[0].num_nodes],
        &[0.5, 0.5],
        &config.pred_encoder,
        &params.pred.gnn,
    )
    .unwrap_err();
    assert!(err.to_string().contains("feature widths differ"));
}

#[test]
fn run_bench_smoke_exactness_and_csv() {
    let (gs, config, params) = setup(8, 41);
    let report = run_bench(&gs, &config, &params, &[2, 4], 1).unwrap();
    assert_eq!(report.cases.len(), 2);
    for case in &report.cases {
        assert!(case.max_abs_dev < 1e-9, "B={} dev {}", case.b, case.max_abs_dev);
        assert!(case.t_latent_ms >= 0.0 && case.t_explicit_ms >= 0.0);
        assert!(case.speedup.is_finite() && case.speedup > 0.0);
    }
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "B,t_latent_ms,t_explicit_ms,max_abs_dev,speedup");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,"));
    assert!(lines[2].starts_with("4,"));
}

#[test]
fn run_bench_validates_inputs() {
    let (gs, config, params) = setup(4, 43);
    assert!(run_bench(&gs, &config, &params, &[8], 1).is_err());
    assert!(run_bench(&gs, &config, &params, &[], 1).is_err());
    assert!(run_bench(&gs, &config, &params, &[2], 0).is_err());
}

#[test]
fn report_is_deterministic_apart_from_timings() {
    let (gs, config, params) = setup(6, 47);
    let a = run_bench(&gs, &config, &params, &[2, 3], 1).unwrap();
    let b = run_bench(&gs, &config, &params, &[2, 3], 1).unwrap();
    for (x, y) in a.cases.iter().zip(&b.cases) {
        assert_eq!(x.b, y.b);
        assert_eq!(x.max_abs_dev.to_bits(), y.max_abs_dev.to_bits());
    }
}
