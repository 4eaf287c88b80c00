use physiodecode::ensemble::*;
use physiodecode::eval::*;
use physiodecode::gbdt::{train, GbdtConfig, GbdtModel, Growth};
use physiodecode::DenseMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overlapping(n_per: usize, seed: u64) -> (DenseMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for c in 0..4 {
        for _ in 0..n_per {
            let mut row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            row[c] += 0.8;
            rows.push(row);
            y.push(c);
        }
    }
    (DenseMatrix::from_rows(&rows).unwrap(), y)
}

fn members(x: &DenseMatrix, y: &[usize]) -> (GbdtModel, GbdtModel) {
    let w = vec![1.0; y.len()];
    let cfg = |g| GbdtConfig {
        n_estimators: 12,
        learning_rate: 0.3,
        max_depth: 3,
        num_leaves: 8,
        min_child_samples: 3,
        n_classes: 4,
        ..GbdtConfig::for_growth(g)
    };
    (
        train(x, y, &w, &cfg(Growth::DepthWise)).unwrap(),
        train(x, y, &w, &cfg(Growth::LeafWise)).unwrap(),
    )
}

#[test]
fn reference_blend_fixture() {
    let a = DenseMatrix::from_rows(&[[0.6, 0.2, 0.1, 0.1]]).unwrap();
    let b = DenseMatrix::from_rows(&[[0.1, 0.5, 0.3, 0.1]]).unwrap();
    let p = blend(&a, &b, REFERENCE_ALPHA).unwrap();
    // 0.35 * a + 0.65 * b, by hand
    let expect = [0.275, 0.395, 0.23, 0.1];
    for (v, e) in p.row(0).iter().zip(expect) {
        assert!((v - e).abs() < 1e-15);
    }
    assert_eq!(predict_from_proba(&p), vec![1]);
    // a alone would pick class 0
    assert_eq!(predict_from_proba(&a), vec![0]);
}

#[test]
fn endpoint_weights_reduce_to_members() {
    let (x, y) = overlapping(30, 1);
    let (a, b) = members(&x, &y);
    let ea = EnsembleModel::new(a.clone(), b.clone(), 1.0).unwrap();
    let eb = EnsembleModel::new(a.clone(), b.clone(), 0.0).unwrap();
    assert_eq!(ea.predict_proba(&x).unwrap(), a.predict_proba(&x).unwrap());
    assert_eq!(eb.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
    assert_eq!(ea.predict(&x).unwrap(), a.predict(&x).unwrap());
    assert!(EnsembleModel::new(a.clone(), b.clone(), 1.5).is_err());
}

#[test]
fn ensemble_json_round_trip() {
    let (x, y) = overlapping(20, 2);
    let (a, b) = members(&x, &y);
    let e = EnsembleModel::new(a, b, 0.42).unwrap();
    let back = EnsembleModel::from_json(&e.to_json().unwrap()).unwrap();
    assert_eq!(back.predict_proba(&x).unwrap(), e.predict_proba(&x).unwrap());
    assert_eq!(back.to_json().unwrap(), e.to_json().unwrap());
}

#[test]
fn ensemble_rejects_wrong_width() {
    let (x, y) = overlapping(10, 3);
    let (a, b) = members(&x, &y);
    let e = EnsembleModel::new(a, b, 0.5).unwrap();
    assert!(e.predict_proba(&x.select_columns(&[0, 1])).is_err());
}

/// Metrics recomputed from label vectors without a confusion matrix.
fn naive_metrics(y: &[usize], p: &[usize], c: usize) -> (f64, Vec<(f64, f64, f64)>) {
    let acc = y.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    let per = (0..c)
        .map(|k| {
            let tp = y.iter().zip(p).filter(|(a, b)| **a == k && **b == k).count() as f64;
            let pred = p.iter().filter(|&&v| v == k).count() as f64;
            let actual = y.iter().filter(|&&v| v == k).count() as f64;
            let prec = if pred > 0.0 { tp / pred } else { 0.0 };
            let rec = if actual > 0.0 { tp / actual } else { 0.0 };
            let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            (prec, rec, f)
        })
        .collect();
    (acc, per)
}

#[test]
fn report_formats() {
    let y = [0, 1, 2, 3, 0, 1];
    let p = [0, 1, 2, 2, 1, 1];
    let r = evaluate(&y, &p).unwrap();
    let text = emit_report(&r, ReportFormat::Text).unwrap();
    for label in ["Brake", "Macro Avg", "Weighted Avg", "Accuracy"] {
        assert!(text.contains(label), "{label} missing from\n{text}");
    }
    let csv = emit_report(&r, ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let back = EvalReport::from_json(&emit_report(&r, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(back, r);
    let mut v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    v["schema_version"] = 99.into();
    assert!(EvalReport::from_json(&v.to_string()).is_err());
    assert!("xml".parse::<ReportFormat>().is_err());
}

#[test]
fn ablation_csv_gap_column() {
    let full = evaluate(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
    let half = evaluate(&[0, 1, 2, 3], &[0, 1, 0, 0]).unwrap();
    let table = AblationTable {
        rows: vec![
            AblationRow {
                mask: "eeg".into(),
                n_features: 10,
                report: half,
            },
            AblationRow {
                mask: "eeg+emg+gsr".into(),
                n_features: 20,
                report: full,
            },
        ],
    };
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mask,accuracy,macro_f1,gap_vs_full");
    assert!(lines[1].starts_with("eeg,0.5000,"));
    assert!(lines[1].ends_with(",-0.5000"));
    assert!(lines[2].ends_with(",0.0000"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_naive_counts(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = evaluate(&y, &p).unwrap();
        let (acc, per) = naive_metrics(&y, &p, 4);
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        for (m, (prec, rec, f)) in r.per_class.iter().zip(&per) {
            prop_assert!((m.precision - prec).abs() < 1e-12);
            prop_assert!((m.recall - rec).abs() < 1e-12);
            prop_assert!((m.f1 - f).abs() < 1e-12);
        }
        let macro_f1 = per.iter().map(|t| t.2).sum::<f64>() / 4.0;
        prop_assert!((r.macro_f1 - macro_f1).abs() < 1e-12);
        // weighted recall is accuracy
        prop_assert!((r.weighted_recall - acc).abs() < 1e-12);
        prop_assert_eq!(r.confusion.total() as usize, y.len());
    }

    #[test]
    fn blend_stays_between_members(
        rows in prop::collection::vec(
            (prop::array::uniform4(0.01f64..1.0), prop::array::uniform4(0.01f64..1.0)), 1..10),
        alpha in 0.0f64..=1.0,
    ) {
        let norm = |v: [f64; 4]| {
            let s: f64 = v.iter().sum();
            v.map(|x| x / s)
        };
        let a: Vec<[f64; 4]> = rows.iter().map(|r| norm(r.0)).collect();
        let b: Vec<[f64; 4]> = rows.iter().map(|r| norm(r.1)).collect();
        let p = blend(&DenseMatrix::from_rows(&a).unwrap(), &DenseMatrix::from_rows(&b).unwrap(), alpha).unwrap();
        for (i, row) in p.rows().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..4 {
                let (lo, hi) = (a[i][c].min(b[i][c]), a[i][c].max(b[i][c]));
                prop_assert!(row[c] >= lo - 1e-15 && row[c] <= hi + 1e-15);
            }
        }
    }
}
