use inet_core::cart::{cart_fit, CartConfig};
use inet_core::ingest::split_sizes;
use inet_core::seed::derive_seed;
use inet_core::trees::{
    decode_standard, encode_standard, internal_count, leaf_count, StandardTree, ThetaLayout, TreeFamily, TreeModel,
};
use ndarray::Array2;
use proptest::prelude::*;

fn standard_tree() -> impl Strategy<Value = StandardTree> {
    (1usize..5, 1usize..4).prop_flat_map(|(n, depth)| {
        let inner = internal_count(depth);
        (
            prop::collection::vec(0..n, inner),
            prop::collection::vec(0.0f64..1.0, inner),
            prop::collection::vec(0.0f64..1.0, leaf_count(depth)),
        )
            .prop_map(move |(features, splits, leaves)| StandardTree {
                depth,
                n_features: n,
                features,
                splits,
                leaves,
            })
    })
}

proptest! {
    #[test]
    fn standard_encoding_round_trips(tree in standard_tree()) {
        let layout = ThetaLayout::new(TreeFamily::StandardDt, tree.n_features, tree.depth).unwrap();
        let theta = encode_standard(&tree);
        prop_assert_eq!(theta.len(), layout.len());
        prop_assert_eq!(decode_standard(&theta, &layout).unwrap(), tree);
    }

    #[test]
    fn tree_json_round_trips(tree in standard_tree()) {
        let model = TreeModel::StandardDt(tree);
        let back = TreeModel::from_json(&model.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn split_sizes_partition_the_rows(n in 0usize..100_000) {
        let (train, valid, test) = split_sizes(n);
        prop_assert_eq!(train + valid + test, n);
        prop_assert!(test as f64 <= 0.1 * n as f64 && valid as f64 <= 0.05 * n as f64);
    }

    #[test]
    fn derived_seeds_depend_on_every_input(master in any::<u64>(), index in 0u64..1000) {
        let s = derive_seed(master, "x", index);
        prop_assert_eq!(s, derive_seed(master, "x", index));
        prop_assert_ne!(s, derive_seed(master, "y", index));
        prop_assert_ne!(s, derive_seed(master, "x", index + 1));
    }

    #[test]
    fn cart_never_loses_to_the_majority_class(
        points in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, any::<bool>()), 2..60)
    ) {
        let flat: Vec<f64> = points.iter().flat_map(|&(a, b, _)| [a, b]).collect();
        let x = Array2::from_shape_vec((points.len(), 2), flat).unwrap();
        let y: Vec<u8> = points.iter().map(|p| u8::from(p.2)).collect();
        let tree = cart_fit(x.view(), &y, &CartConfig::default()).unwrap();
        let correct = x
            .rows()
            .into_iter()
            .zip(&y)
            .filter(|(row, &label)| u8::from(tree.eval(row.as_slice().unwrap()).unwrap() >= 0.5) == label)
            .count();
        let ones = y.iter().filter(|&&l| l == 1).count();
        prop_assert!(correct >= ones.max(y.len() - ones));
    }
}
