mod common;

use propmlp::dense::Matrix;
use propmlp::graph::{build_graph, normalize, spmm};
use propmlp::model::loss::temperature_softmax;
use propmlp::training::select_reliable;
use proptest::prelude::*;

use common::{dense_apply, dense_normalized, relative_error, to_rows};

fn edge_list() -> impl Strategy<Value = (usize, Vec<(u32, u32)>)> {
    (1usize..24).prop_flat_map(|n| {
        let id = 0..n as u32;
        (Just(n), prop::collection::vec((id.clone(), id), 0..3 * n))
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn graph_and_features() -> impl Strategy<Value = (usize, Vec<(u32, u32)>, Matrix<f64>, f64)> {
    edge_list().prop_flat_map(|(n, edges)| (Just(n), Just(edges), matrix(n, 3), 0.0f64..=1.0))
}

proptest! {
    #[test]
    fn spmm_matches_dense_product((n, edges, x, r) in graph_and_features()) {
        let graph = build_graph(&edges, n).unwrap();
        let adj = normalize::<f64>(&graph, r).unwrap();
        let got = spmm(&adj, &x).unwrap();
        let want = dense_apply(&dense_normalized(&edges, n, r), &to_rows(&x));
        prop_assert!(relative_error(&got, &want) <= 1e-12);
    }

    #[test]
    fn random_walk_normalizations_are_stochastic((n, edges) in edge_list()) {
        let graph = build_graph(&edges, n).unwrap();
        // r = 0 normalizes rows, r = 1 normalizes columns.
        let rows = normalize::<f64>(&graph, 0.0).unwrap().to_dense();
        let cols = normalize::<f64>(&graph, 1.0).unwrap().to_dense();
        for i in 0..n {
            let row_sum: f64 = rows.row(i).iter().sum();
            prop_assert!((row_sum - 1.0).abs() <= 1e-12);
        }
        for (j, s) in cols.column_sums().into_iter().enumerate() {
            prop_assert!((s - 1.0).abs() <= 1e-12, "column {} sums to {}", j, s);
        }
    }

    #[test]
    fn symmetric_normalization_is_symmetric((n, edges) in edge_list()) {
        let adj = normalize::<f64>(&build_graph(&edges, n).unwrap(), 0.5).unwrap().to_dense();
        prop_assert_eq!(adj.transpose(), adj);
    }

    #[test]
    fn rebuilding_from_edges_is_a_fixed_point((n, edges) in edge_list()) {
        let graph = build_graph(&edges, n).unwrap();
        let again = build_graph(&graph.edges(), n).unwrap();
        prop_assert_eq!(graph.degrees().iter().map(|&d| d as usize).sum::<usize>(), 2 * graph.num_edges());
        prop_assert_eq!(again, graph);
    }

    #[test]
    fn softmax_ignores_row_shifts(z in matrix(3, 5), shift in -50.0f64..50.0, t in 0.05f64..=1.0) {
        let p = temperature_softmax(&z, t).unwrap();
        let q = temperature_softmax(&z.map(|v| v + shift), t).unwrap();
        prop_assert!(p.max_abs_diff(&q) <= 1e-9);
    }

    #[test]
    fn reliable_sets_shrink_as_the_threshold_rises(
        z in matrix(12, 4),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let p = temperature_softmax(&z.map(|v| 4.0 * v), 1.0).unwrap();
        let candidates: Vec<usize> = (0..12).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = select_reliable(&p, lo, &candidates);
        let strict = select_reliable(&p, hi, &candidates);
        prop_assert!(strict.nodes.iter().all(|i| loose.nodes.contains(i)));
        prop_assert!(strict.alpha.iter().all(|&x| x > hi));
    }
}
