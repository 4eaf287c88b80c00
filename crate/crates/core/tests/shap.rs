use physiodecode::dataset::ModalityLayout;
use physiodecode::features::FeatureRegistry;
use physiodecode::gbdt::*;
use physiodecode::shapx::*;
use physiodecode::DenseMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random tree with consistent covers (parent = sum of children).
fn random_tree(rng: &mut ChaCha8Rng, p: usize, max_depth: usize) -> Tree {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, p: usize, depth: usize, max_depth: usize) -> usize {
        let idx = nodes.len();
        let split = depth < max_depth && (depth == 0 || rng.random_bool(0.7));
        if !split {
            let cover = rng.random_range(1.0..20.0);
            nodes.push(TreeNode::leaf(rng.random_range(-2.0..2.0), cover, 1));
            return idx;
        }
        nodes.push(TreeNode::leaf(0.0, 1.0, 1));
        let feature = rng.random_range(0..p);
        let threshold = rng.random_range(0.0..1.0);
        let left = grow(rng, nodes, p, depth + 1, max_depth);
        let right = grow(rng, nodes, p, depth + 1, max_depth);
        let cover = nodes[left].cover + nodes[right].cover;
        let n = nodes[left].n_samples + nodes[right].n_samples;
        nodes[idx] = TreeNode {
            split_feature: Some(feature),
            threshold,
            left,
            right,
            leaf_value: 0.0,
            cover,
            n_samples: n,
        };
        idx
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, p, 0, max_depth);
    Tree::from_nodes(nodes).unwrap()
}

/// Expected output with features in `mask` fixed to `x`, the rest averaged by cover.
fn conditional_value(tree: &Tree, x: &[f64], mask: u32, node: usize) -> f64 {
    let n = &tree.nodes[node];
    match n.split_feature {
        None => n.leaf_value,
        Some(f) if mask & (1 << f) != 0 => {
            let next = if x[f] < n.threshold { n.left } else { n.right };
            conditional_value(tree, x, mask, next)
        }
        Some(_) => {
            let (l, r) = (&tree.nodes[n.left], &tree.nodes[n.right]);
            (l.cover * conditional_value(tree, x, mask, n.left) + r.cover * conditional_value(tree, x, mask, n.right))
                / n.cover
        }
    }
}

/// Shapley values by enumerating all 2^p coalitions.
fn brute_force_shap(tree: &Tree, x: &[f64], p: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=p).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    })
    .collect();
    let values: Vec<f64> = (0..1u32 << p).map(|m| conditional_value(tree, x, m, 0)).collect();
    let mut phi = vec![0.0; p];
    for (j, out) in phi.iter_mut().enumerate() {
        for m in 0..1u32 << p {
            if m & (1 << j) != 0 {
                continue;
            }
            let s = m.count_ones() as usize;
            let w = fact[s] * fact[p - s - 1] / fact[p];
            *out += w * (values[(m | (1 << j)) as usize] - values[m as usize]);
        }
    }
    phi
}

#[test]
fn tree_shap_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for t in 0..50 {
        let p = 2 + t % 11;
        let tree = random_tree(&mut rng, p, 4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
            let oracle = brute_force_shap(&tree, &x, p);
            let mut phi = vec![0.0; p];
            tree_shap_into(&tree, &x, &mut phi);
            for (a, b) in phi.iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn local_accuracy_dummy_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        // feature 5 is never split on
        let tree = random_tree(&mut rng, 5, 4);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut phi = vec![0.0; 6];
        tree_shap_into(&tree, &x, &mut phi);
        let total: f64 = phi.iter().sum::<f64>() + tree.expected_value();
        assert!((total - tree.predict(&x)).abs() < 1e-6);
        assert_eq!(phi[5], 0.0);
    }

    // Two features that always appear together on the same path
    let nodes = vec![
        TreeNode {
            split_feature: Some(0),
            threshold: 0.5,
            left: 1,
            right: 2,
            leaf_value: 0.0,
            cover: 20.0,
            n_samples: 20,
        },
        TreeNode::leaf(0.0, 10.0, 10),
        TreeNode {
            split_feature: Some(1),
            threshold: 0.5,
            left: 3,
            right: 4,
            leaf_value: 0.0,
            cover: 10.0,
            n_samples: 10,
        },
        TreeNode::leaf(0.0, 5.0, 5),
        TreeNode::leaf(4.0, 5.0, 5),
    ];
    // f = 4 * [x0 >= .5][x1 >= .5] with symmetric covers
    let tree = Tree::from_nodes(nodes).unwrap();
    let mut phi = vec![0.0; 2];
    tree_shap_into(&tree, &[0.9, 0.9], &mut phi);
    assert!((phi[0] - phi[1]).abs() < 1e-12, "{phi:?}");
    assert!((phi[0] + phi[1] + tree.expected_value() - 4.0).abs() < 1e-12);
}

fn blobs(n_per: usize, seed: u64) -> (DenseMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for c in 0..4 {
        for _ in 0..n_per {
            let mut row: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            row[c] += 2.0;
            rows.push(row);
            y.push(c);
        }
    }
    (DenseMatrix::from_rows(&rows).unwrap(), y)
}

#[test]
fn model_shap_is_additive_in_margin_space() {
    let (x, y) = blobs(30, 3);
    for growth in [Growth::DepthWise, Growth::LeafWise] {
        let cfg = GbdtConfig {
            n_estimators: 15,
            learning_rate: 0.2,
            max_depth: 4,
            n_classes: 4,
            ..GbdtConfig::for_growth(growth)
        };
        let model = train(&x, &y, &vec![1.0; y.len()], &cfg).unwrap();
        let shap = tree_shap(&model, &x).unwrap();
        let margin = model.predict_margin(&x).unwrap();
        for i in 0..x.n_rows() {
            for c in 0..4 {
                let s: f64 = shap.row(i, c).iter().sum::<f64>() + shap.base_values[c];
                assert!((s - margin.get(i, c)).abs() < 1e-6, "{growth} row {i} class {c}");
            }
        }
    }
}

#[test]
fn shap_rejects_wrong_width() {
    let (x, y) = blobs(10, 4);
    let cfg = GbdtConfig {
        n_estimators: 2,
        n_classes: 4,
        ..GbdtConfig::depth_wise()
    };
    let model = train(&x, &y, &vec![1.0; y.len()], &cfg).unwrap();
    let narrow = x.select_columns(&[0, 1, 2]);
    assert!(tree_shap(&model, &narrow).is_err());
}

#[test]
fn elite_takes_top_k_of_full_registry() {
    let registry = FeatureRegistry::for_layout(&ModalityLayout::canonical());
    assert_eq!(registry.len(), 503);
    let p = registry.len();
    // importance decreasing with index, with a tie block at the end
    let imp: Vec<f64> = (0..p).map(|j| if j < 400 { (p - j) as f64 } else { 1.0 }).collect();
    let iv = ImportanceVector::new(registry.names().to_vec(), imp).unwrap();
    let elite = select_elite(&iv, 250).unwrap();
    assert_eq!(elite.len(), 250);
    assert_eq!(elite, registry.names()[..250].to_vec());
    assert_eq!(select_elite(&iv, 1000).unwrap().len(), p);
    assert!(select_elite(&iv, 0).is_err());

    let shares = modality_decomposition(&iv, &registry).unwrap();
    assert!((shares.eeg + shares.emg + shares.gsr - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregation_matches_naive_loop(
        n in 1usize..6,
        c in 1usize..5,
        p in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shap = ShapMatrix::zeros(n, c, p);
        for v in &mut shap.phi {
            *v = rng.random_range(-3.0..3.0);
        }
        let names: Vec<String> = (0..p).map(|j| format!("f{j}")).collect();
        let iv = aggregate_importance(&shap, &names).unwrap();
        for j in 0..p {
            let mut total = 0.0;
            for k in 0..n {
                for cl in 0..c {
                    total += shap.get(k, cl, j).abs();
                }
            }
            prop_assert_eq!(iv.importance[j], total / n as f64);
        }
        // ranking is a permutation sorted by descending importance
        for w in iv.ranking.windows(2) {
            prop_assert!(iv.importance[w[0]] >= iv.importance[w[1]]);
        }
    }
}
