use physiodecode::gbdt::*;
use physiodecode::DenseMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four well-separated 2-D clusters, `n_per` rows each.
fn blobs(n_per: usize, seed: u64) -> (DenseMatrix, Vec<usize>) {
    let centres = [(-5.0, -5.0), (5.0, -5.0), (-5.0, 5.0), (5.0, 5.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (c, &(cx, cy)) in centres.iter().enumerate() {
        for _ in 0..n_per {
            rows.push([cx + rng.random_range(-1.0..1.0), cy + rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
    }
    (DenseMatrix::from_rows(&rows).unwrap(), y)
}

fn small(growth: Growth) -> GbdtConfig {
    GbdtConfig {
        n_estimators: 30,
        learning_rate: 0.3,
        max_depth: 3,
        n_classes: 4,
        ..GbdtConfig::for_growth(growth)
    }
}

fn accuracy(model: &GbdtModel, x: &DenseMatrix, y: &[usize]) -> f64 {
    let pred = model.predict(x).unwrap();
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[test]
fn class_balanced_weights_from_counts() {
    let w = class_weights(&[5130, 2506, 1957, 4712]).unwrap();
    let expect = [14305.0 / 20520.0, 14305.0 / 10024.0, 14305.0 / 7828.0, 14305.0 / 18848.0];
    for (a, e) in w.weights.iter().zip(expect) {
        assert!(((a - e) / e).abs() < 1e-12);
    }
    assert!((w.weights[0] - 0.69713).abs() < 1e-5);
    assert!((w.weights[2] - 1.82742).abs() < 1e-5);
}

#[test]
fn separable_blobs_are_learned() {
    let (x, y) = blobs(50, 1);
    let w = vec![1.0; y.len()];
    for growth in [Growth::DepthWise, Growth::LeafWise] {
        let model = train(&x, &y, &w, &small(growth)).unwrap();
        let acc = accuracy(&model, &x, &y);
        assert!(acc >= 0.99, "{growth}: {acc}");
    }
}

/// Best first split of the class-0 tree by exhaustive search over midpoints.
fn brute_force_stump(x: &[f64], y: &[usize], n_classes: usize, lambda: f64) -> (f64, f64, f64) {
    let p0 = 1.0 / n_classes as f64;
    let g: Vec<f64> = y.iter().map(|&c| p0 - if c == 0 { 1.0 } else { 0.0 }).collect();
    let h = p0 * (1.0 - p0);
    let mut values: Vec<f64> = x.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let score = |gs: f64, hs: f64| gs * gs / (hs + lambda);
    let (gt, ht) = (g.iter().sum::<f64>(), h * x.len() as f64);
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0, 0.0);
    for pair in values.windows(2) {
        let thr = (pair[0] + pair[1]) / 2.0;
        let (mut gl, mut hl) = (0.0, 0.0);
        for (xi, gi) in x.iter().zip(&g) {
            if *xi < thr {
                gl += gi;
                hl += h;
            }
        }
        let gain = 0.5 * (score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht));
        if gain > best.0 {
            best = (gain, thr, -gl / (hl + lambda), -(gt - gl) / (ht - hl + lambda));
        }
    }
    (best.1, best.2, best.3)
}

#[test]
fn stump_matches_brute_force_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut xs = Vec::new();
    let mut y = Vec::new();
    for i in 0..60 {
        let c = i % 2;
        xs.push(if c == 0 { rng.random_range(0.0..1.0) } else { rng.random_range(2.0..3.0) });
        y.push(c);
    }
    let x = DenseMatrix::from_vec(xs.len(), 1, xs.clone()).unwrap();
    let cfg = GbdtConfig {
        n_estimators: 1,
        learning_rate: 1.0,
        max_depth: 1,
        n_classes: 2,
        min_child_weight: 0.0,
        ..GbdtConfig::depth_wise()
    };
    let model = train(&x, &y, &vec![1.0; y.len()], &cfg).unwrap();
    let tree = &model.trees[0][0];
    let root = &tree.nodes[0];
    let (thr, left, right) = brute_force_stump(&xs, &y, 2, cfg.lambda_l2);
    assert_eq!(root.threshold, thr);
    let max0 = xs.iter().zip(&y).filter(|(_, c)| **c == 0).map(|(v, _)| *v).fold(f64::MIN, f64::max);
    let min1 = xs.iter().zip(&y).filter(|(_, c)| **c == 1).map(|(v, _)| *v).fold(f64::MAX, f64::min);
    assert!(max0 < thr && thr < min1);
    assert!((tree.nodes[root.left].leaf_value - left).abs() < 1e-12);
    assert!((tree.nodes[root.right].leaf_value - right).abs() < 1e-12);
}

#[test]
fn integer_weights_equal_duplication() {
    let (x, y) = blobs(15, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<f64> = (0..y.len()).map(|_| rng.random_range(1..4) as f64).collect();
    let mut rows = Vec::new();
    let mut yd = Vec::new();
    for i in 0..y.len() {
        for _ in 0..w[i] as usize {
            rows.push(x.row(i).to_vec());
            yd.push(y[i]);
        }
    }
    let xd = DenseMatrix::from_rows(&rows).unwrap();
    let cfg = GbdtConfig {
        n_estimators: 10,
        max_depth: 3,
        n_classes: 4,
        min_child_weight: 0.0,
        ..GbdtConfig::depth_wise()
    };
    let a = train(&x, &y, &w, &cfg).unwrap();
    let b = train(&xd, &yd, &vec![1.0; yd.len()], &cfg).unwrap();
    let (pa, pb) = (a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
    for (u, v) in pa.as_slice().iter().zip(pb.as_slice()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn weights_match_duplication_with_tied_gains() {
    // labels carry no signal, so early rounds are full of exactly tied gains
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let n = rng.random_range(20..=200);
        let rows: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-5.0..5.0))).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1..4) as f64).collect();
        let (mut dr, mut dy) = (Vec::new(), Vec::new());
        for i in 0..n {
            for _ in 0..w[i] as usize {
                dr.push(rows[i]);
                dy.push(y[i]);
            }
        }
        let cfg = GbdtConfig { n_estimators: 5, n_classes: 3, min_child_weight: 0.0, ..GbdtConfig::depth_wise() };
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let a = train(&x, &y, &w, &cfg).unwrap();
        let b = train(&DenseMatrix::from_rows(&dr).unwrap(), &dy, &vec![1.0; dy.len()], &cfg).unwrap();
        let (pa, pb) = (a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
        for (u, v) in pa.as_slice().iter().zip(pb.as_slice()) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }
}

#[test]
fn training_loss_never_increases() {
    let (x, y) = blobs(30, 11);
    let w = vec![1.0; y.len()];
    let cfg = GbdtConfig {
        n_estimators: 25,
        learning_rate: 0.1,
        ..small(Growth::DepthWise)
    };
    let model = train(&x, &y, &w, &cfg).unwrap();
    let mut margins = vec![vec![0.0; 4]; y.len()];
    let mut last = f64::INFINITY;
    for round in &model.trees {
        for (i, m) in margins.iter_mut().enumerate() {
            for (c, tree) in round.iter().enumerate() {
                m[c] += tree.predict(x.row(i));
            }
        }
        let probs: Vec<Vec<f64>> = margins
            .iter()
            .map(|m| {
                let mut p = m.clone();
                softmax_in_place(&mut p);
                p
            })
            .collect();
        let loss: f64 = probs.iter().zip(&y).map(|(p, &c)| -p[c].ln()).sum::<f64>() / y.len() as f64;
        assert!(loss <= last + 1e-12, "loss rose from {last} to {loss}");
        last = loss;
    }
}

#[test]
fn positive_stump_is_monotone_in_its_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<[f64; 2]> = (0..120).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
    let y: Vec<usize> = rows.iter().map(|r| if r[0] > 6.0 { 1 } else { 0 }).collect();
    let x = DenseMatrix::from_rows(&rows).unwrap();
    let cfg = GbdtConfig {
        n_estimators: 1,
        max_depth: 1,
        n_classes: 2,
        ..GbdtConfig::depth_wise()
    };
    let model = train(&x, &y, &vec![1.0; y.len()], &cfg).unwrap();
    let root = &model.trees[0][1].nodes[0];
    assert_eq!(root.split_feature, Some(0));
    let mut last = 0.0;
    for k in 0..=200 {
        let v = k as f64 * 0.05;
        let p = model.predict_proba(&DenseMatrix::from_rows(&[[v, 5.0]]).unwrap()).unwrap().get(0, 1);
        assert!(p >= last, "probability fell at x = {v}");
        last = p;
    }
}

#[test]
fn growth_limits_are_respected() {
    let (x, y) = blobs(40, 5);
    let w = vec![1.0; y.len()];
    let dw = train(&x, &y, &w, &GbdtConfig { max_depth: 2, ..small(Growth::DepthWise) }).unwrap();
    assert!(dw.trees.iter().flatten().all(|t| t.depth() <= 2));
    let lw = train(&x, &y, &w, &GbdtConfig { num_leaves: 3, min_child_samples: 1, ..small(Growth::LeafWise) }).unwrap();
    assert!(lw.trees.iter().flatten().all(|t| t.n_leaves() <= 3));
}

#[test]
fn json_round_trip_preserves_predictions() {
    let (x, y) = blobs(20, 9);
    let w = vec![1.0; y.len()];
    for growth in [Growth::DepthWise, Growth::LeafWise] {
        let cfg = GbdtConfig { subsample: 0.8, colsample: 0.5, ..small(growth) };
        let model = train(&x, &y, &w, &cfg).unwrap();
        let text = model.to_json().unwrap();
        let back = GbdtModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.predict_proba(&x).unwrap(), model.predict_proba(&x).unwrap());
    }
}

#[test]
fn foreign_schema_version_is_rejected() {
    let (x, y) = blobs(5, 2);
    let model = train(&x, &y, &vec![1.0; y.len()], &small(Growth::DepthWise)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    v["schema_version"] = serde_json::json!(99);
    assert!(GbdtModel::from_json(&v.to_string()).is_err());
}

fn dataset() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<usize>)> {
    (8usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), n),
            prop::collection::vec(0usize..3, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn training_is_deterministic((rows, y) in dataset(), seed in 0u64..1000, leaf in any::<bool>()) {
        prop_assume!(y.iter().any(|&c| c != y[0]));
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let growth = if leaf { Growth::LeafWise } else { Growth::DepthWise };
        let cfg = GbdtConfig {
            n_estimators: 5,
            n_classes: 3,
            subsample: 0.7,
            colsample: 0.67,
            seed,
            min_child_samples: 2,
            ..GbdtConfig::for_growth(growth)
        };
        let w = vec![1.0; y.len()];
        let a = train(&x, &y, &w, &cfg).unwrap();
        let b = train(&x, &y, &w, &cfg).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn probabilities_are_distributions((rows, y) in dataset()) {
        prop_assume!(y.iter().any(|&c| c != y[0]));
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let cfg = GbdtConfig { n_estimators: 4, n_classes: 3, ..GbdtConfig::depth_wise() };
        let model = train(&x, &y, &vec![1.0; y.len()], &cfg).unwrap();
        let p = model.predict_proba(&x).unwrap();
        for row in p.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn scaling_all_weights_keeps_exact_trees((rows, y) in dataset(), e in -2i32..4) {
        prop_assume!(y.iter().any(|&c| c != y[0]));
        let x = DenseMatrix::from_rows(&rows).unwrap();
        // power-of-two scaling is exact, so gain ties stay ties
        let k = 2f64.powi(e);
        let base = GbdtConfig { n_estimators: 3, n_classes: 3, min_child_weight: 0.0, ..GbdtConfig::depth_wise() };
        let scaled = GbdtConfig { lambda_l2: base.lambda_l2 * k, gamma: base.gamma * k, ..base.clone() };
        let a = train(&x, &y, &vec![1.0; y.len()], &base).unwrap();
        let b = train(&x, &y, &vec![k; y.len()], &scaled).unwrap();
        let (pa, pb) = (a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
        for (u, v) in pa.as_slice().iter().zip(pb.as_slice()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
