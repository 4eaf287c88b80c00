use physiodecode::dataset::*;
use physiodecode::features::{FeatureMatrix, ModalityMask};
use physiodecode::pipeline::*;
use physiodecode::tpe::Trial;

fn small_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        elite_k: 60,
        trials: 3,
        alpha_trials: 3,
        folds: 2,
        ..PipelineConfig::desk(seed)
    }
}

fn features(n_per_class: usize, seed: u64, cfg: &PipelineConfig) -> FeatureMatrix {
    let layout = ModalityLayout::canonical();
    let epochs = generate_synthetic(n_per_class, &layout, seed).unwrap();
    let (fm, report) = extract_dataset(epochs.into_iter().map(Ok), &layout, cfg).unwrap();
    assert!(report.excluded.len() * 50 <= report.n_input, "{} excluded", report.excluded.len());
    fm
}

#[test]
fn pipeline_is_deterministic_and_full_ablation_matches() {
    let cfg = small_config(3);
    let fm = features(15, 3, &cfg);
    let a = run_pipeline(&fm, &cfg).unwrap();
    let b = run_pipeline(&fm, &cfg).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.selection.elite.len(), 60);
    assert!(a.report.accuracy > 0.25, "accuracy {}", a.report.accuracy);

    let table = run_ablation(&a.partitions, &[ModalityMask::FULL], &a.tuning, &cfg).unwrap();
    assert_eq!(table.rows[0].report, a.report);
    assert_eq!(table.rows[0].n_features, 503);

    let (imp, shares) = explain_ensemble(&a.model, &a.partitions.test).unwrap();
    assert_eq!(imp.len(), 60);
    assert!((shares.eeg + shares.emg + shares.gsr - 1.0).abs() < 1e-12);
}

#[test]
fn normalisation_statistics_come_from_training_rows() {
    let cfg = small_config(4);
    let fm = features(6, 4, &cfg);
    let p = partition(&fm, &cfg).unwrap();
    let train_raw = fm.select_rows(&p.split.train_indices);
    for j in [0, 100, 502] {
        let col = train_raw.values.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!((p.norm.global[j].mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
    }
    let shifted = {
        let mut m = fm.clone();
        for &i in &p.split.test_indices {
            m.values.row_mut(i)[0] += 1e6;
        }
        m
    };
    // moving test rows does not change the fitted statistics
    assert_eq!(partition(&shifted, &cfg).unwrap().norm, p.norm);
}

#[test]
fn bad_channel_epochs_are_excluded() {
    let layout = ModalityLayout::canonical();
    let cfg = small_config(1);
    let mut epochs = generate_synthetic(2, &layout, 1).unwrap();
    for v in epochs[3].channel_mut(10) {
        *v = 0.0;
    }
    let (fm, report) = extract_dataset(epochs.into_iter().map(Ok), &layout, &cfg).unwrap();
    assert_eq!(report.n_input, 8);
    assert_eq!(report.n_kept, 7);
    assert_eq!(report.excluded, vec![(3, vec![10])]);
    assert_eq!(fm.n_rows(), 7);
}

#[test]
fn resumed_tuning_matches_fresh_tuning() {
    let cfg = small_config(5);
    let fm = features(8, 5, &cfg);
    let p = partition(&fm, &cfg).unwrap();
    let train = p.train.select_columns(&(0..40).collect::<Vec<_>>());

    let short = PipelineConfig { trials: 2, alpha_trials: 2, ..cfg.clone() };
    let (_, partial) = tune(&train, &short, &[], &mut |_, _| {}).unwrap();
    let prior: Vec<(String, String)> = partial
        .studies
        .iter()
        .map(|(n, s)| (n.clone(), s.to_journal().unwrap()))
        .collect();

    let mut new_trials = 0;
    let mut count = |_: &str, _: &Trial| new_trials += 1;
    let (resumed, _) = tune(&train, &cfg, &prior, &mut count).unwrap();
    let (fresh, _) = tune(&train, &cfg, &[], &mut |_, _| {}).unwrap();
    assert_eq!(new_trials, 3);
    assert_eq!(resumed, fresh);
}

#[test]
fn invalid_configs_are_rejected() {
    let fm = features(3, 1, &small_config(1));
    for cfg in [
        PipelineConfig { folds: 1, ..small_config(1) },
        PipelineConfig { elite_k: 0, ..small_config(1) },
        PipelineConfig { alpha: AlphaMode::Fixed(2.0), ..small_config(1) },
    ] {
        assert!(run_pipeline(&fm, &cfg).is_err());
    }
}
