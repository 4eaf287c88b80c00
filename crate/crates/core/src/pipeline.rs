//! End-to-end orchestration: preprocessing, screening, features, split,
//! normalisation, SHAP selection, tuning, training, evaluation and the
//! modality ablation.
//!
//! Every stage takes its seed from the run seed through [`stage_seed`], so a
//! stage can be rerun on its own and reproduce the full run.

use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_split_ordinals, BehaviorClass, DatasetSplit, Epoch, ModalityLayout};
use crate::dsp::{detect_bad_channels, PreprocessConfig, Preprocessor, WelchConfig, DEFAULT_BAD_CHANNEL_Z, DEFAULT_FLAT_EPS};
use crate::ensemble::{EnsembleModel, REFERENCE_ALPHA};
use crate::error::{Error, Result};
use crate::eval::{evaluate, AblationRow, AblationTable, EvalReport};
use crate::features::{FeatureExtractor, FeatureMatrix, FeatureMatrixBuilder, ModalityMask, NormStats};
use crate::gbdt::{class_weights_for, train, GbdtConfig, GbdtModel, Growth};
use crate::shapx::{
    aggregate_importance, modality_decomposition, select_elite, selector_config, tree_shap, ImportanceVector,
    ModalityShares, DEFAULT_ELITE_K,
};
use crate::tpe::{
    alpha_dimension, config_from_params, cv_objective, cv_objective_blend, gbdt_space, joint_space, BlendCache,
    CvData, Params, SearchBounds, SearchSpace, Study, TpeConfig, Trial, JOINT_PREFIX_A, JOINT_PREFIX_B,
};

/// Derive an independent seed for a named stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finaliser
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    /// Tuned on cached cross-validated member probabilities.
    Tuned,
    Fixed(f64),
}

impl AlphaMode {
    pub fn reference_preset() -> Self {
        Self::Fixed(REFERENCE_ALPHA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Global,
    PerSubject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub enabled: bool,
    pub z_thresh: f64,
    pub flat_eps: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            z_thresh: DEFAULT_BAD_CHANNEL_Z,
            flat_eps: DEFAULT_FLAT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub screen: ScreenConfig,
    pub welch: WelchConfig,
    pub norm: NormMode,
    pub elite_k: usize,
    pub trials: usize,
    /// Trials of the blend-weight study (tuned alpha mode only).
    pub alpha_trials: usize,
    pub folds: usize,
    pub bounds: SearchBounds,
    pub tpe: TpeConfig,
    pub alpha: AlphaMode,
    /// Search both members and alpha in one study.
    pub joint_alpha: bool,
    /// Re-tune members for every ablation mask instead of reusing the
    /// full-fusion configurations.
    pub ablation_retune: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            preprocess: PreprocessConfig::default(),
            screen: ScreenConfig::default(),
            welch: WelchConfig::default(),
            norm: NormMode::Global,
            elite_k: DEFAULT_ELITE_K,
            trials: 50,
            alpha_trials: 50,
            folds: 5,
            bounds: SearchBounds::full(),
            tpe: TpeConfig::default(),
            alpha: AlphaMode::Tuned,
            joint_alpha: false,
            ablation_retune: false,
        }
    }
}

impl PipelineConfig {
    /// Reduced search ranges for single-core runs; other settings unchanged.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            bounds: SearchBounds::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidParam {
                name: "test_fraction".into(),
                reason: format!("must be in (0, 1), got {}", self.test_fraction),
            });
        }
        if self.elite_k == 0 {
            return Err(Error::InvalidParam {
                name: "elite_k".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.folds < 2 {
            return Err(Error::InvalidParam {
                name: "folds".into(),
                reason: "must be >= 2".into(),
            });
        }
        if let AlphaMode::Fixed(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidParam {
                    name: "alpha".into(),
                    reason: format!("must be in [0, 1], got {a}"),
                });
            }
        }
        self.welch.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Epochs to features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub n_input: usize,
    pub n_kept: usize,
    /// `(epoch index, bad channel indices)` of every excluded epoch.
    pub excluded: Vec<(usize, Vec<usize>)>,
}

/// Preprocess, screen and extract features epoch by epoch. Epochs with any
/// bad channel are excluded.
pub fn extract_dataset<I>(epochs: I, layout: &ModalityLayout, cfg: &PipelineConfig) -> Result<(FeatureMatrix, ScreenReport)>
where
    I: IntoIterator<Item = Result<Epoch>>,
{
    let pre = Preprocessor::new(cfg.preprocess.clone())?;
    let extractor = FeatureExtractor::new(layout, cfg.welch)?;
    let mut builder = FeatureMatrixBuilder::new(extractor.registry().clone());
    let mut report = ScreenReport::default();
    for (i, epoch) in epochs.into_iter().enumerate() {
        let epoch = epoch?;
        report.n_input += 1;
        let clean = pre.apply(&epoch, layout)?;
        if cfg.screen.enabled {
            let bad = detect_bad_channels(&clean, layout, cfg.screen.z_thresh, cfg.screen.flat_eps);
            if !bad.is_empty() {
                report.excluded.push((i, bad));
                continue;
            }
        }
        let row = extractor.extract(&clean)?;
        builder.push(row, clean.label, &clean.subject_id)?;
        report.n_kept += 1;
    }
    Ok((builder.finish(), report))
}

// ---------------------------------------------------------------------------
// Stages on the feature matrix
// ---------------------------------------------------------------------------

pub fn split_dataset(fm: &FeatureMatrix, cfg: &PipelineConfig) -> Result<DatasetSplit> {
    stratified_split_ordinals(
        &fm.label_ordinals(),
        BehaviorClass::COUNT,
        cfg.test_fraction,
        stage_seed(cfg.seed, "split"),
    )
}

pub fn fit_norm(train: &FeatureMatrix, mode: NormMode) -> NormStats {
    match mode {
        NormMode::Global => NormStats::fit(train),
        NormMode::PerSubject => NormStats::fit_per_subject(train),
    }
}

fn sample_weights(labels: &[usize]) -> Result<Vec<f64>> {
    Ok(class_weights_for(labels, BehaviorClass::COUNT)?.sample_weights(labels))
}

/// Outcome of SHAP-based elite selection on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// `None` when the feature count was already within K.
    pub importance: Option<ImportanceVector>,
    pub elite: Vec<String>,
}

/// Rank features with the selector model and keep the top `k`. With at most
/// `k` features the selector is skipped and all features are kept.
pub fn select_features(train: &FeatureMatrix, k: usize, seed: u64) -> Result<Selection> {
    let names = train.registry.names().to_vec();
    if names.len() <= k {
        return Ok(Selection {
            importance: None,
            elite: names,
        });
    }
    let y = train.label_ordinals();
    let w = sample_weights(&y)?;
    let mut model = train_model(&train.values, &y, &w, &selector_config(stage_seed(seed, "selector")))?;
    model.set_feature_names(names.clone())?;
    let shap = tree_shap(&model, &train.values)?;
    let importance = aggregate_importance(&shap, &names)?;
    let elite = select_elite(&importance, k)?;
    Ok(Selection {
        importance: Some(importance),
        elite,
    })
}

fn train_model(x: &crate::matrix::DenseMatrix, y: &[usize], w: &[f64], cfg: &GbdtConfig) -> Result<GbdtModel> {
    train(x, y, w, cfg)
}

/// Tuned member configurations and the blend weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub config_a: GbdtConfig,
    pub config_b: GbdtConfig,
    pub alpha: f64,
    pub best_objective_a: Option<f64>,
    pub best_objective_b: Option<f64>,
    pub best_objective_alpha: Option<f64>,
}

/// Study histories of a tuning run, by study name.
#[derive(Debug, Clone, Default)]
pub struct TuningStudies {
    pub studies: Vec<(String, Study)>,
}

impl TuningStudies {
    pub fn get(&self, name: &str) -> Option<&Study> {
        self.studies.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

pub const STUDY_A: &str = "depthwise";
pub const STUDY_B: &str = "leafwise";
pub const STUDY_ALPHA: &str = "alpha";
pub const STUDY_JOINT: &str = "joint";

/// Earlier history to resume from, keyed by study name.
pub type PriorJournals<'a> = &'a [(String, String)];

fn open_study(name: &str, space: SearchSpace, seed: u64, tpe: TpeConfig, prior: PriorJournals) -> Result<Study> {
    match prior.iter().find(|(n, _)| n == name) {
        Some((_, journal)) => Study::resume(space, seed, tpe, journal),
        None => Study::new(space, seed, tpe),
    }
}

fn run_study<F>(
    name: &str,
    study: &mut Study,
    n_trials: usize,
    on_trial: &mut dyn FnMut(&str, &Trial),
    mut objective: F,
) -> Result<Params>
where
    F: FnMut(&Params) -> Result<f64>,
{
    let remaining = n_trials.saturating_sub(study.trials.len());
    for _ in 0..remaining {
        let before = study.trials.len();
        study.optimize(&mut objective, 1, None)?;
        on_trial(name, &study.trials[before]);
    }
    study
        .best()
        .map(|t| t.params.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("study {name} has no completed trial")))
}

/// Tune both members (and alpha, unless fixed) with cross-validated macro-F1
/// on the training rows.
pub fn tune(
    train: &FeatureMatrix,
    cfg: &PipelineConfig,
    prior: PriorJournals,
    on_trial: &mut dyn FnMut(&str, &Trial),
) -> Result<(Tuning, TuningStudies)> {
    let y = train.label_ordinals();
    let data = CvData::new(&train.values, &y, BehaviorClass::COUNT, cfg.folds, stage_seed(cfg.seed, "folds"))?;
    let seed_a = stage_seed(cfg.seed, "member-a");
    let seed_b = stage_seed(cfg.seed, "member-b");
    let mut studies = TuningStudies::default();

    if cfg.joint_alpha {
        let mut study = open_study(STUDY_JOINT, joint_space(&cfg.bounds), stage_seed(cfg.seed, STUDY_JOINT), cfg.tpe, prior)?;
        let fixed = match cfg.alpha {
            AlphaMode::Fixed(a) => Some(a),
            AlphaMode::Tuned => None,
        };
        let best = run_study(STUDY_JOINT, &mut study, cfg.trials, on_trial, |p| {
            let a = config_from_params(p, Growth::DepthWise, JOINT_PREFIX_A, seed_a)?;
            let b = config_from_params(p, Growth::LeafWise, JOINT_PREFIX_B, seed_b)?;
            let alpha = fixed.unwrap_or_else(|| p["alpha"].as_f64().unwrap_or(REFERENCE_ALPHA));
            cv_objective_blend(&data, &a, &b, alpha)
        })?;
        let best_obj = study.best().and_then(|t| t.objective);
        studies.studies.push((STUDY_JOINT.into(), study));
        let tuning = Tuning {
            config_a: config_from_params(&best, Growth::DepthWise, JOINT_PREFIX_A, seed_a)?,
            config_b: config_from_params(&best, Growth::LeafWise, JOINT_PREFIX_B, seed_b)?,
            alpha: fixed.unwrap_or_else(|| best["alpha"].as_f64().unwrap_or(REFERENCE_ALPHA)),
            best_objective_a: best_obj,
            best_objective_b: best_obj,
            best_objective_alpha: best_obj,
        };
        return Ok((tuning, studies));
    }

    let mut member = |name: &str, growth: Growth, seed: u64| -> Result<(GbdtConfig, Option<f64>)> {
        let mut study = open_study(name, gbdt_space(growth, &cfg.bounds), stage_seed(cfg.seed, name), cfg.tpe, prior)?;
        let best = run_study(name, &mut study, cfg.trials, on_trial, |p| {
            cv_objective(&data, &config_from_params(p, growth, "", seed)?)
        })?;
        let obj = study.best().and_then(|t| t.objective);
        studies.studies.push((name.to_string(), study));
        Ok((config_from_params(&best, growth, "", seed)?, obj))
    };
    let (config_a, best_objective_a) = member(STUDY_A, Growth::DepthWise, seed_a)?;
    let (config_b, best_objective_b) = member(STUDY_B, Growth::LeafWise, seed_b)?;

    let (alpha, best_objective_alpha) = match cfg.alpha {
        AlphaMode::Fixed(a) => (a, None),
        AlphaMode::Tuned => {
            let cache = BlendCache::build(&data, &config_a, &config_b)?;
            let space = SearchSpace::new(vec![alpha_dimension()])?;
            let mut study = open_study(STUDY_ALPHA, space, stage_seed(cfg.seed, STUDY_ALPHA), cfg.tpe, prior)?;
            let best = run_study(STUDY_ALPHA, &mut study, cfg.alpha_trials, on_trial, |p| {
                cache.objective(p["alpha"].as_f64().unwrap_or(REFERENCE_ALPHA))
            })?;
            let obj = study.best().and_then(|t| t.objective);
            studies.studies.push((STUDY_ALPHA.into(), study));
            (best["alpha"].as_f64().unwrap_or(REFERENCE_ALPHA), obj)
        }
    };
    Ok((
        Tuning {
            config_a,
            config_b,
            alpha,
            best_objective_a,
            best_objective_b,
            best_objective_alpha,
        },
        studies,
    ))
}

/// Fit both members on the training rows and combine them.
pub fn train_ensemble(train: &FeatureMatrix, tuning: &Tuning) -> Result<EnsembleModel> {
    let y = train.label_ordinals();
    let w = sample_weights(&y)?;
    let names = train.registry.names().to_vec();
    let mut a = train_model(&train.values, &y, &w, &tuning.config_a)?;
    a.set_feature_names(names.clone())?;
    let mut b = train_model(&train.values, &y, &w, &tuning.config_b)?;
    b.set_feature_names(names)?;
    EnsembleModel::new(a, b, tuning.alpha)
}

pub fn evaluate_ensemble(model: &EnsembleModel, test: &FeatureMatrix) -> Result<EvalReport> {
    let x = test.select_named(model.feature_names())?;
    let pred = model.predict(&x.values)?;
    evaluate(&test.label_ordinals(), &pred)
}

/// Training and test partitions after normalisation.
#[derive(Debug, Clone)]
pub struct Partitions {
    pub split: DatasetSplit,
    pub norm: NormStats,
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
}

pub fn partition(fm: &FeatureMatrix, cfg: &PipelineConfig) -> Result<Partitions> {
    let split = split_dataset(fm, cfg)?;
    let raw_train = fm.select_rows(&split.train_indices);
    let norm = fit_norm(&raw_train, cfg.norm);
    let train = norm.apply(&raw_train)?;
    let test = norm.apply(&fm.select_rows(&split.test_indices))?;
    Ok(Partitions {
        split,
        norm,
        train,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub partitions: Partitions,
    pub selection: Selection,
    pub tuning: Tuning,
    pub studies: TuningStudies,
    pub model: EnsembleModel,
    pub report: EvalReport,
}

/// Split, normalise, select, tune, train and evaluate on a feature matrix.
pub fn run_pipeline(fm: &FeatureMatrix, cfg: &PipelineConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let partitions = partition(fm, cfg)?;
    let selection = select_features(&partitions.train, cfg.elite_k, cfg.seed)?;
    let train_sel = partitions.train.select_named(&selection.elite)?;
    let (tuning, studies) = tune(&train_sel, cfg, &[], &mut |_, _| {})?;
    let model = train_ensemble(&train_sel, &tuning)?;
    let report = evaluate_ensemble(&model, &partitions.test)?;
    Ok(PipelineResult {
        partitions,
        selection,
        tuning,
        studies,
        model,
        report,
    })
}

/// Restrict to each mask's modalities and rerun selection, training and
/// evaluation. Members reuse `tuning` unless `cfg.ablation_retune` is set.
pub fn run_ablation(
    partitions: &Partitions,
    masks: &[ModalityMask],
    tuning: &Tuning,
    cfg: &PipelineConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        let cols = mask.columns(&partitions.train.registry)?;
        let train = partitions.train.select_columns(&cols);
        let test = partitions.test.select_columns(&cols);
        let selection = select_features(&train, cfg.elite_k, cfg.seed)?;
        let train_sel = train.select_named(&selection.elite)?;
        let tuned = if cfg.ablation_retune {
            tune(&train_sel, cfg, &[], &mut |_, _| {})?.0
        } else {
            tuning.clone()
        };
        let model = train_ensemble(&train_sel, &tuned)?;
        let report = evaluate_ensemble(&model, &test)?;
        rows.push(AblationRow {
            mask: mask.to_string(),
            n_features: cols.len(),
            report,
        });
    }
    Ok(AblationTable { rows })
}

/// Global importance of the ensemble on `data`: each member's mean |phi|,
/// combined with the blend weight.
pub fn explain_ensemble(model: &EnsembleModel, data: &FeatureMatrix) -> Result<(ImportanceVector, ModalityShares)> {
    let x = data.select_named(model.feature_names())?;
    let names = model.feature_names().to_vec();
    let ia = aggregate_importance(&tree_shap(&model.member_a, &x.values)?, &names)?;
    let ib = aggregate_importance(&tree_shap(&model.member_b, &x.values)?, &names)?;
    let blended = ia
        .importance
        .iter()
        .zip(&ib.importance)
        .map(|(a, b)| model.alpha * a + (1.0 - model.alpha) * b)
        .collect();
    let imp = ImportanceVector::new(names, blended)?;
    let shares = modality_decomposition(&imp, &x.registry)?;
    Ok((imp, shares))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "split"), stage_seed(1, "folds"));
        assert_ne!(stage_seed(1, "split"), stage_seed(2, "split"));
        assert_eq!(stage_seed(7, "split"), stage_seed(7, "split"));
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.alpha = AlphaMode::Fixed(1.5);
        assert!(c.validate().is_err());
        c.alpha = AlphaMode::Tuned;
        c.folds = 1;
        assert!(c.validate().is_err());
    }
}
