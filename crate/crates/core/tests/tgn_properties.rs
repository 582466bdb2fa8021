mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{permute_state, random_state, relabel};
use toposignal::autodiff::Tape;
use toposignal::config::RunConfig;
use toposignal::diagnostics::random_graph;
use toposignal::tgn::{TgnState, TopoMode};
use toposignal::train::Model;

#[test]
fn readout_is_bit_identical_under_relabeling() {
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for graph_seed in 0..20u64 {
        let (store, model) = Model::build(&cfg, graph_seed).unwrap();
        let n = rng.random_range(2..=14);
        let extra = rng.random_range(0..2 * n);
        let g = random_graph(&mut rng, n, extra).unwrap();
        let global: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let state = random_state(n + 1, cfg.model.d, &mut rng);
        let mut tape = Tape::new(&store);
        let reference = model.tgn.forward(&mut tape, &g, &global, &state, TopoMode::Local).unwrap();
        let reference = tape.value(reference.observation).clone();
        for _ in 0..100 {
            let (g2, perm) = relabel(&g, &mut rng);
            let s2 = permute_state(&state, &perm);
            let mut tape = Tape::new(&store);
            let out = model.tgn.forward(&mut tape, &g2, &global, &s2, TopoMode::Local).unwrap();
            let got = tape.value(out.observation);
            let same = got.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "graph {graph_seed}: readout changed under relabeling {perm:?}");
        }
    }
}

#[test]
fn routing_and_merge_weights_are_distributions() {
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut largest_logit: f64 = 0.0;
    for draw in 0..1000u64 {
        let (mut store, model) = Model::build(&cfg, draw).unwrap();
        // Scale the routing matrices so logits span up to the 10^3 range.
        let scale = 10f64.powf(rng.random_range(0.0..3.0));
        for layer in &model.tgn.layers {
            for id in [layer.route, layer.merge] {
                for v in store.tensor_mut(id).data_mut() {
                    *v *= scale;
                }
            }
        }
        let n = rng.random_range(1..=12);
        let extra = rng.random_range(0..=n);
        let g = random_graph(&mut rng, n, extra).unwrap();
        let global: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let state = TgnState::initial(&g, &global).unwrap();
        let mut tape = Tape::new(&store);
        let out = model.tgn.forward(&mut tape, &g, &global, &state, TopoMode::Local).unwrap();
        let tv = tape.value(out.tv).clone();
        for (l, layer) in model.tgn.layers.iter().enumerate() {
            let w = store.tensor(layer.route);
            for j in 0..tv.rows() {
                for p in 0..w.cols() {
                    let z: f64 = (0..tv.cols()).map(|k| tv.get(j, k) * w.get(k, p)).sum();
                    largest_logit = largest_logit.max(z.abs());
                }
            }
            let q = tape.value(out.route_scores[l]);
            assert!(q.is_finite());
            for p in 0..q.cols() {
                let s: f64 = (0..q.rows()).map(|j| q.get(j, p)).sum();
                assert!((s - 1.0).abs() <= 1e-9, "draw {draw}: column {p} of Q sums to {s}");
            }
            let m = tape.value(out.merge_weights[l]);
            assert!(m.is_finite());
            let s: f64 = m.data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "draw {draw}: merge weights sum to {s}");
            assert!(m.data().iter().all(|&x| x >= 0.0));
        }
        assert!(tape.value(out.observation).is_finite());
    }
    assert!(largest_logit >= 1e3, "draws never reached large logits ({largest_logit})");
}

#[test]
fn pooled_mode_gives_every_vertex_the_same_signature() {
    let cfg = RunConfig::default();
    let (store, model) = Model::build(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 6, 3).unwrap();
    let global = vec![0.3; 7];
    let state = TgnState::initial(&g, &global).unwrap();
    let mut tape = Tape::new(&store);
    let out = model.tgn.forward(&mut tape, &g, &global, &state, TopoMode::Pooled).unwrap();
    let tv = tape.value(out.tv);
    for j in 1..tv.rows() {
        assert_eq!(tv.row(j), tv.row(0));
    }
}

#[test]
fn mismatched_state_is_a_shape_error() {
    let cfg = RunConfig::default();
    let (store, model) = Model::build(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 4, 1).unwrap();
    let state = random_state(3, cfg.model.d, &mut rng);
    let mut tape = Tape::new(&store);
    assert!(model.tgn.forward(&mut tape, &g, &[0.0; 7], &state, TopoMode::Local).is_err());
}
