mod common;

use common::{canonical, connected_graphs, implementation_pd, oracle_pd};
use proptest::prelude::*;
use toposignal::topo::{components, persistence};

fn graph_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<(usize, usize)>)> {
    (1usize..=9).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        let m = pairs.len();
        // Values on a coarse grid half the time so ties are common.
        let values = prop::collection::vec(
            prop_oneof![(0u8..5).prop_map(|k| k as f64 / 4.0), 0.0f64..1.0],
            n,
        );
        (values, prop::collection::vec(any::<bool>(), m)).prop_map(move |(v, mask)| {
            let edges = pairs.iter().zip(mask).filter(|(_, k)| *k).map(|(&e, _)| e).collect();
            (v, edges)
        })
    })
}

#[test]
fn small_connected_graphs_match_the_reduction_oracle() {
    let mut rng = 0x2545_F491_4F6C_DD1Du64;
    let mut next = || {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        (rng >> 11) as f64 / (1u64 << 53) as f64
    };
    for n in 1..=4 {
        for edges in connected_graphs(n) {
            for _ in 0..5 {
                let values: Vec<f64> = (0..n).map(|_| (next() * 3.0).floor() / 2.0).collect();
                assert_eq!(
                    canonical(implementation_pd(&values, &edges)),
                    canonical(oracle_pd(&values, &edges)),
                    "n={n} edges={edges:?} values={values:?}"
                );
            }
        }
    }
}

#[test]
fn path_and_triangle_by_hand() {
    // Path 0-1-2 with values 0.2, 0.9, 0.1: vertex 0 dies when the edge at 0.9 merges it.
    let pd = canonical(implementation_pd(&[0.2, 0.9, 0.1], &[(0, 1), (1, 2)]));
    let want = canonical(vec![(0, 0.1, 1.0), (0, 0.2, 0.9), (0, 0.9, 0.9)]);
    assert_eq!(pd, want);
    let pd = canonical(implementation_pd(&[0.0, 0.5, 0.3], &[(0, 1), (1, 2), (0, 2)]));
    let want = canonical(vec![(0, 0.0, 1.0), (0, 0.3, 0.3), (0, 0.5, 0.5), (1, 0.5, 1.0)]);
    assert_eq!(pd, want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn diagrams_match_oracle((values, edges) in graph_strategy()) {
        prop_assert_eq!(canonical(implementation_pd(&values, &edges)), canonical(oracle_pd(&values, &edges)));
    }

    #[test]
    fn betti_counts((values, edges) in graph_strategy()) {
        let n = values.len();
        let c = components(n, &edges);
        let p = persistence(&values, &edges).unwrap();
        prop_assert_eq!(p.dim0.len(), n);
        prop_assert_eq!(p.dim0.iter().filter(|q| q.killer.is_none()).count(), c);
        prop_assert_eq!(p.dim1.len(), edges.len() + c - n);
        for q in p.diagram0(&values).iter().chain(p.diagram1(&values).iter()) {
            prop_assert!(q.birth <= q.death);
        }
    }

    #[test]
    fn cycles_are_closed_by_their_edge((values, edges) in graph_strategy()) {
        let p = persistence(&values, &edges).unwrap();
        for q in &p.dim1 {
            let (a, b) = edges[q.edge];
            prop_assert!(q.cycle.contains(&a) && q.cycle.contains(&b));
            prop_assert!(q.cycle.len() >= 3);
            prop_assert!(q.vertex == a || q.vertex == b);
            prop_assert_eq!(values[q.vertex], values[a].max(values[b]));
        }
    }

    #[test]
    fn relabeling_preserves_the_diagram((values, edges) in graph_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = values.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut pv = vec![0.0; n];
        for v in 0..n {
            pv[perm[v]] = values[v];
        }
        let pe: Vec<(usize, usize)> = edges.iter().rev().map(|&(a, b)| (perm[b], perm[a])).collect();
        prop_assert_eq!(canonical(implementation_pd(&values, &edges)), canonical(implementation_pd(&pv, &pe)));
    }
}
