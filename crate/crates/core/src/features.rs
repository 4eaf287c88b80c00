//! Per-epoch feature extraction into the named 503-column space, and
//! train-only z-score normalisation.
//!
//! Column order for a layout: for every channel in layout order, three time
//! features followed by the modality's band powers, then the two global
//! indices. For the canonical layout this is 59 x 8 EEG + 4 x 6 EMG + 5 GSR
//! + 2 global = 503 columns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{BehaviorClass, Epoch, Modality, ModalityLayout};
use crate::dsp::{band_power, WelchConfig, WelchEstimator};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Guard added to ratio numerators and denominators.
pub const RATIO_EPS: f64 = 1e-12;
/// Standard deviation below which a feature counts as constant.
pub const CONSTANT_STD: f64 = 1e-12;

pub const TIME_FEATURES: [&str; 3] = ["line_length", "deriv_var", "max_abs_change"];

pub const EEG_BANDS: [(&str, f64, f64); 5] = [
    ("delta_power", 0.5, 4.0),
    ("theta_power", 4.0, 8.0),
    ("alpha_power", 8.0, 13.0),
    ("beta_power", 13.0, 30.0),
    ("gamma_power", 30.0, 50.0),
];

pub const EMG_BANDS: [(&str, f64, f64); 3] = [
    ("band_low", 20.0, 60.0),
    ("band_mid", 60.0, 100.0),
    ("band_high", 100.0, 240.0),
];

pub const GSR_BANDS: [(&str, f64, f64); 2] = [("phasic_power", 0.5, 5.0), ("noise_power", 5.0, 35.0)];

pub const GLOBAL_ALPHA_THETA: &str = "GLOBAL_alpha_theta_ratio";
pub const GLOBAL_EMG_ASYMMETRY: &str = "GLOBAL_emg_asymmetry";

fn bands_for(modality: Modality) -> &'static [(&'static str, f64, f64)] {
    match modality {
        Modality::Eeg => &EEG_BANDS,
        Modality::Emg => &EMG_BANDS,
        Modality::Gsr => &GSR_BANDS,
    }
}

/// Sum of absolute successive differences.
pub fn line_length(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::TooShort { min: 2, len: x.len() });
    }
    Ok(x.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeFeatures {
    pub line_length: f64,
    /// Population variance of the first differences.
    pub deriv_var: f64,
    pub max_abs_change: f64,
}

pub fn time_features(x: &[f64]) -> Result<TimeFeatures> {
    if x.len() < 3 {
        return Err(Error::TooShort { min: 3, len: x.len() });
    }
    let m = (x.len() - 1) as f64;
    let (mut sum, mut sum_abs, mut max_abs) = (0.0, 0.0, 0.0f64);
    for w in x.windows(2) {
        let d = w[1] - w[0];
        sum += d;
        sum_abs += d.abs();
        max_abs = max_abs.max(d.abs());
    }
    let mean = sum / m;
    let var = x
        .windows(2)
        .map(|w| (w[1] - w[0] - mean).powi(2))
        .sum::<f64>()
        / m;
    Ok(TimeFeatures {
        line_length: sum_abs,
        deriv_var: var,
        max_abs_change: max_abs,
    })
}

/// `(mean alpha + eps) / (mean theta + eps)` over EEG channels.
pub fn alpha_theta_ratio(alpha: &[f64], theta: &[f64]) -> f64 {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(alpha) + RATIO_EPS) / (mean(theta) + RATIO_EPS)
}

/// `(P_left - P_right) / (P_left + P_right + eps)` where each side sums the
/// total band power of its channels.
pub fn emg_asymmetry(channel_power: &[f64], left: &[usize], right: &[usize]) -> f64 {
    let side = |idx: &[usize]| idx.iter().filter_map(|&i| channel_power.get(i)).sum::<f64>();
    let (l, r) = (side(left), side(right));
    (l - r) / (l + r + RATIO_EPS)
}

/// Ordered, unique feature names for a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    names: Vec<String>,
}

impl FeatureRegistry {
    pub fn for_layout(layout: &ModalityLayout) -> Self {
        let mut names = Vec::new();
        for ch in 0..layout.total() {
            let modality = layout.modality_of(ch).expect("validated layout");
            let base = format!("{}_{}", modality.prefix(), layout.channel_names[ch]);
            for t in TIME_FEATURES {
                names.push(format!("{base}_{t}"));
            }
            for (band, _, _) in bands_for(modality) {
                names.push(format!("{base}_{band}"));
            }
        }
        names.push(GLOBAL_ALPHA_THETA.to_string());
        names.push(GLOBAL_EMG_ASYMMETRY.to_string());
        Self { names }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::FeatureMismatch("duplicate feature names".into()));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }
}

/// Modality a feature belongs to for ablation and importance accounting.
/// The alpha/theta ratio counts as EEG and the asymmetry index as EMG.
pub fn feature_modality(name: &str) -> Option<Modality> {
    match name {
        GLOBAL_ALPHA_THETA => Some(Modality::Eeg),
        GLOBAL_EMG_ASYMMETRY => Some(Modality::Emg),
        _ => Modality::ALL
            .into_iter()
            .find(|m| name.starts_with(&format!("{}_", m.prefix()))),
    }
}

/// Set of modalities to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub eeg: bool,
    pub emg: bool,
    pub gsr: bool,
}

impl ModalityMask {
    pub const FULL: Self = Self {
        eeg: true,
        emg: true,
        gsr: true,
    };

    /// Three singles, three pairs, then full fusion.
    pub fn canonical() -> Vec<Self> {
        let m = |eeg, emg, gsr| Self { eeg, emg, gsr };
        vec![
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            Self::FULL,
        ]
    }

    pub fn contains(&self, modality: Modality) -> bool {
        match modality {
            Modality::Eeg => self.eeg,
            Modality::Emg => self.emg,
            Modality::Gsr => self.gsr,
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// Column indices of `registry` kept by this mask, in registry order.
    pub fn columns(&self, registry: &FeatureRegistry) -> Result<Vec<usize>> {
        let cols: Vec<usize> = registry
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| feature_modality(n).is_some_and(|m| self.contains(m)))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            return Err(Error::EmptyMask(self.to_string()));
        }
        Ok(cols)
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.eeg, "eeg"), (self.emg, "emg"), (self.gsr, "gsr")]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| n)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = Self {
            eeg: false,
            emg: false,
            gsr: false,
        };
        let s = s.trim().to_ascii_lowercase();
        if s == "full" || s == "all" {
            return Ok(Self::FULL);
        }
        for part in s.split('+') {
            match part.trim() {
                "eeg" => mask.eeg = true,
                "emg" => mask.emg = true,
                "gsr" => mask.gsr = true,
                other => return Err(Error::EmptyMask(format!("unknown modality {other:?}"))),
            }
        }
        Ok(mask)
    }
}

/// Per-epoch feature extractor bound to a layout and Welch configuration.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layout: ModalityLayout,
    registry: FeatureRegistry,
    welch: WelchConfig,
    emg_left: Vec<usize>,
    emg_right: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(layout: &ModalityLayout, welch: WelchConfig) -> Result<Self> {
        layout.validate()?;
        welch.validate()?;
        let n_emg = layout.emg_range.len();
        // first half of the EMG electrodes is the left side
        let emg_left = (0..n_emg / 2).collect();
        let emg_right = (n_emg / 2..n_emg).collect();
        Ok(Self {
            layout: layout.clone(),
            registry: FeatureRegistry::for_layout(layout),
            welch,
            emg_left,
            emg_right,
        })
    }

    pub fn with_emg_sides(mut self, left: Vec<usize>, right: Vec<usize>) -> Self {
        self.emg_left = left;
        self.emg_right = right;
        self
    }

    pub fn registry(&self) -> &FeatureRegistry {
        &self.registry
    }

    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    /// One feature row in registry order.
    pub fn extract(&self, epoch: &Epoch) -> Result<Vec<f64>> {
        if epoch.n_channels() != self.layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "epoch has {} channels, layout expects {}",
                epoch.n_channels(),
                self.layout.total()
            )));
        }
        let welch = WelchEstimator::new(self.welch, epoch.sample_rate_hz)?;
        let mut row = Vec::with_capacity(self.registry.len());
        let mut alpha = Vec::new();
        let mut theta = Vec::new();
        let mut emg_power = Vec::new();
        for ch in 0..epoch.n_channels() {
            let x = epoch.channel(ch);
            let modality = self.layout.modality_of(ch).expect("validated layout");
            let t = time_features(x)?;
            row.extend([t.line_length, t.deriv_var, t.max_abs_change]);
            let psd = welch.psd(x)?;
            let mut total = 0.0;
            for &(name, lo, hi) in bands_for(modality) {
                let p = band_power(&psd, lo, hi).power;
                row.push(p);
                total += p;
                match name {
                    "alpha_power" => alpha.push(p),
                    "theta_power" => theta.push(p),
                    _ => {}
                }
            }
            if modality == Modality::Emg {
                emg_power.push(total);
            }
        }
        row.push(alpha_theta_ratio(&alpha, &theta));
        row.push(emg_asymmetry(&emg_power, &self.emg_left, &self.emg_right));
        debug_assert_eq!(row.len(), self.registry.len());
        Ok(row)
    }

    /// Extract a whole batch, preserving input order.
    pub fn extract_batch(&self, epochs: &[Epoch]) -> Result<FeatureMatrix> {
        let mut builder = FeatureMatrixBuilder::new(self.registry.clone());
        for e in epochs {
            builder.push(self.extract(e)?, e.label, &e.subject_id)?;
        }
        Ok(builder.finish())
    }
}

pub fn extract_epoch(epoch: &Epoch, layout: &ModalityLayout, welch: &WelchConfig) -> Result<Vec<f64>> {
    FeatureExtractor::new(layout, *welch)?.extract(epoch)
}

/// Feature table with labels and subject ids, one row per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub values: DenseMatrix,
    pub registry: FeatureRegistry,
    pub labels: Vec<BehaviorClass>,
    pub subject_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.n_rows()
    }

    pub fn label_ordinals(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.ordinal()).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(indices),
            registry: self.registry.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }

    pub fn select_columns(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select_columns(indices),
            registry: self.registry.select(indices),
            labels: self.labels.clone(),
            subject_ids: self.subject_ids.clone(),
        }
    }

    /// Keep the named columns, in the given order.
    pub fn select_named(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.registry
                    .index_of(n)
                    .ok_or_else(|| Error::FeatureMismatch(format!("unknown feature {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&idx))
    }

    /// CSV with header = feature names + `label,subject_id`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in self.registry.names() {
            out.push_str(n);
            out.push(',');
        }
        out.push_str("label,subject_id\n");
        for (i, row) in self.values.rows().enumerate() {
            for v in row {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{},{}\n", self.labels[i], self.subject_ids[i]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty feature CSV".into()))?
            .split(',')
            .collect();
        let n = header.len();
        if n < 2 || header[n - 2] != "label" || header[n - 1] != "subject_id" {
            return Err(Error::InvalidArgument(
                "feature CSV header must end with label,subject_id".into(),
            ));
        }
        let registry =
            FeatureRegistry::from_names(header[..n - 2].iter().map(|s| s.to_string()).collect())?;
        let mut values = DenseMatrix::zeros(0, registry.len());
        let mut labels = Vec::new();
        let mut subject_ids = Vec::new();
        for (line_no, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "feature CSV row {line_no} has {} fields, expected {n}",
                    fields.len()
                )));
            }
            let row = fields[..n - 2]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        Error::InvalidArgument(format!("row {line_no}: bad number {f:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            values.push_row(&row)?;
            labels.push(fields[n - 2].parse()?);
            subject_ids.push(fields[n - 1].to_string());
        }
        Ok(Self {
            values,
            registry,
            labels,
            subject_ids,
        })
    }
}

/// Incremental (epoch-at-a-time) feature matrix assembly.
#[derive(Debug, Clone)]
pub struct FeatureMatrixBuilder {
    values: DenseMatrix,
    registry: FeatureRegistry,
    labels: Vec<BehaviorClass>,
    subject_ids: Vec<String>,
}

impl FeatureMatrixBuilder {
    pub fn new(registry: FeatureRegistry) -> Self {
        Self {
            values: DenseMatrix::zeros(0, registry.len()),
            registry,
            labels: Vec::new(),
            subject_ids: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>, label: BehaviorClass, subject_id: &str) -> Result<()> {
        if row.len() != self.registry.len() {
            return Err(Error::LayoutMismatch(format!(
                "row has {} features, registry {}",
                row.len(),
                self.registry.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::FeatureMismatch(format!(
                "non-finite value in feature {}",
                self.registry.names()[j]
            )));
        }
        self.values.push_row(&row)?;
        self.labels.push(label);
        self.subject_ids.push(subject_id.to_string());
        Ok(())
    }

    pub fn finish(self) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values,
            registry: self.registry,
            labels: self.labels,
            subject_ids: self.subject_ids,
        }
    }
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    pub fn is_constant(&self) -> bool {
        self.std < CONSTANT_STD
    }

    fn apply(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (v - self.mean) / self.std
        }
    }
}

/// Per-feature z-score statistics, fitted on training rows only. In
/// per-subject mode every training subject gets its own statistics and
/// unseen subjects fall back to the global ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub global: Vec<FeatureStats>,
    pub per_subject: BTreeMap<String, Vec<FeatureStats>>,
}

fn column_stats(values: &DenseMatrix, rows: &[usize]) -> Vec<FeatureStats> {
    let n = rows.len() as f64;
    (0..values.n_cols())
        .map(|j| {
            if rows.is_empty() {
                return FeatureStats { mean: 0.0, std: 0.0 };
            }
            let mean = rows.iter().map(|&i| values.get(i, j)).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&i| (values.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / n;
            FeatureStats {
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

impl NormStats {
    pub fn fit(matrix: &FeatureMatrix) -> Self {
        let all: Vec<usize> = (0..matrix.n_rows()).collect();
        Self {
            names: matrix.registry.names().to_vec(),
            global: column_stats(&matrix.values, &all),
            per_subject: BTreeMap::new(),
        }
    }

    pub fn fit_per_subject(matrix: &FeatureMatrix) -> Self {
        let mut stats = Self::fit(matrix);
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in matrix.subject_ids.iter().enumerate() {
            groups.entry(s).or_default().push(i);
        }
        for (s, rows) in groups {
            stats
                .per_subject
                .insert(s.to_string(), column_stats(&matrix.values, &rows));
        }
        stats
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        if matrix.registry.len() != self.global.len() {
            return Err(Error::StatsDimensionMismatch {
                stats: self.global.len(),
                matrix: matrix.registry.len(),
            });
        }
        let mut out = matrix.clone();
        for i in 0..out.n_rows() {
            let stats = self
                .per_subject
                .get(&matrix.subject_ids[i])
                .unwrap_or(&self.global);
            for (v, s) in out.values.row_mut(i).iter_mut().zip(stats) {
                *v = s.apply(*v);
            }
        }
        Ok(out)
    }

    /// `{feature_name: {mean, std}}` for the global statistics.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .zip(&self.global)
            .map(|(n, s)| (n.clone(), serde_json::json!({"mean": s.mean, "std": s.std})))
            .collect();
        serde_json::Value::Object(map)
    }

    /// Inverse of [`NormStats::to_json`]; column order follows `registry`.
    pub fn from_json(value: &serde_json::Value, registry: &FeatureRegistry) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("normalisation JSON must be an object".into()))?;
        if obj.len() != registry.len() {
            return Err(Error::StatsDimensionMismatch {
                stats: obj.len(),
                matrix: registry.len(),
            });
        }
        let global = registry
            .names()
            .iter()
            .map(|n| {
                let entry = obj
                    .get(n)
                    .ok_or_else(|| Error::FeatureMismatch(format!("no statistics for {n}")))?;
                serde_json::from_value::<FeatureStats>(entry.clone()).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: registry.names().to_vec(),
            global,
            per_subject: BTreeMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_length_examples() {
        assert_eq!(line_length(&[5.0, 5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(line_length(&[0.0, 1.0, 3.0]).unwrap(), 3.0);
        assert!(matches!(line_length(&[1.0]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn time_feature_examples() {
        let c = time_features(&[2.0; 10]).unwrap();
        assert_eq!((c.line_length, c.deriv_var, c.max_abs_change), (0.0, 0.0, 0.0));

        let t = time_features(&[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.line_length, 3.0);
        assert!((t.deriv_var - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(t.max_abs_change, 1.0);

        let ramp: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = time_features(&ramp).unwrap();
        assert_eq!((r.line_length, r.deriv_var, r.max_abs_change), (99.0, 0.0, 1.0));

        assert!(time_features(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(alpha_theta_ratio(&[4.0, 4.0], &[4.0, 4.0]), 1.0);
        assert_eq!(alpha_theta_ratio(&[0.0], &[0.0]), 1.0);
        assert!((alpha_theta_ratio(&[2.0], &[0.5]) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn asymmetry_examples() {
        let (l, r) = ([0usize, 1], [2usize, 3]);
        assert_eq!(emg_asymmetry(&[1.0, 2.0, 2.0, 1.0], &l, &r), 0.0);
        assert!((emg_asymmetry(&[1.0, 1.0, 0.0, 0.0], &l, &r) - 1.0).abs() < 1e-11);
        assert!((emg_asymmetry(&[1.5, 1.5, 0.5, 0.5], &l, &r) - 0.5).abs() < 1e-12);
        assert_eq!(emg_asymmetry(&[0.0; 4], &l, &r), 0.0);
    }

    #[test]
    fn registry_shape() {
        let reg = FeatureRegistry::for_layout(&ModalityLayout::canonical());
        assert_eq!(reg.len(), 503);
        let count = |m| reg.names().iter().filter(|n| feature_modality(n) == Some(m)).count();
        assert_eq!(count(Modality::Eeg), 473);
        assert_eq!(count(Modality::Emg), 25);
        assert_eq!(count(Modality::Gsr), 5);
        assert!(reg.index_of("EEG_Cz_alpha_power").is_some());
        assert!(reg.index_of("EMG_ch2_band_low").is_some());
        assert!(reg.index_of("GSR_0_line_length").is_some());
        assert_eq!(reg.names()[501], GLOBAL_ALPHA_THETA);
        assert_eq!(reg.names()[502], GLOBAL_EMG_ASYMMETRY);
    }

    #[test]
    fn masks_partition_channel_features() {
        let reg = FeatureRegistry::for_layout(&ModalityLayout::canonical());
        let singles: Vec<Vec<usize>> = ["eeg", "emg", "gsr"]
            .iter()
            .map(|m| m.parse::<ModalityMask>().unwrap().columns(&reg).unwrap())
            .collect();
        let total: usize = singles.iter().map(Vec::len).sum();
        assert_eq!(total, 503);
        let mut all: Vec<usize> = singles.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 503);
        assert_eq!(ModalityMask::canonical().len(), 7);
        assert_eq!("eeg+emg".parse::<ModalityMask>().unwrap().to_string(), "eeg+emg");
        assert!("eeg+foo".parse::<ModalityMask>().is_err());
    }

    fn toy_matrix(rows: &[[f64; 3]]) -> FeatureMatrix {
        FeatureMatrix {
            values: DenseMatrix::from_rows(rows).unwrap(),
            registry: FeatureRegistry::from_names(vec!["a".into(), "b".into(), "c".into()])
                .unwrap(),
            labels: vec![BehaviorClass::Brake; rows.len()],
            subject_ids: vec!["S00".into(); rows.len()],
        }
    }

    #[test]
    fn norm_fit_apply() {
        let m = toy_matrix(&[[1.0, 5.0, 0.0], [2.0, 5.0, 10.0], [3.0, 5.0, 20.0], [6.0, 5.0, 2.0]]);
        let stats = NormStats::fit(&m);
        let z = stats.apply(&m).unwrap();
        for j in [0, 2] {
            let col = z.values.column(j);
            let mean = col.iter().sum::<f64>() / 4.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-6);
        }
        assert!(z.values.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_apply_to_shifted_matrix() {
        let train = toy_matrix(&[[1.0, 0.0, 0.0], [3.0, 2.0, 4.0]]);
        let stats = NormStats::fit(&train);
        let shifted = toy_matrix(&[[1.5, 0.5, 0.5], [3.5, 2.5, 4.5]]);
        let z = stats.apply(&shifted).unwrap();
        for (j, s) in stats.global.iter().enumerate() {
            let mean = z.values.column(j).iter().sum::<f64>() / 2.0;
            assert!((mean - 0.5 / s.std).abs() < 1e-12);
        }
        let narrow = FeatureMatrix {
            values: DenseMatrix::zeros(1, 2),
            registry: FeatureRegistry::from_names(vec!["a".into(), "b".into()]).unwrap(),
            labels: vec![BehaviorClass::Turn],
            subject_ids: vec!["x".into()],
        };
        assert!(matches!(
            stats.apply(&narrow),
            Err(Error::StatsDimensionMismatch { .. })
        ));
    }

    #[test]
    fn norm_json_round_trip() {
        let m = toy_matrix(&[[1.0, 5.0, 0.0], [2.0, 5.0, 10.0]]);
        let stats = NormStats::fit(&m);
        let back = NormStats::from_json(&stats.to_json(), &m.registry).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn per_subject_falls_back_to_global() {
        let mut m = toy_matrix(&[[1.0, 0.0, 0.0], [3.0, 2.0, 4.0], [10.0, 1.0, 1.0], [20.0, 3.0, 3.0]]);
        m.subject_ids = vec!["A".into(), "A".into(), "B".into(), "B".into()];
        let stats = NormStats::fit_per_subject(&m);
        let z = stats.apply(&m).unwrap();
        assert_eq!(z.values.get(0, 0), -1.0);
        assert_eq!(z.values.get(2, 0), -1.0);
        let mut unseen = m.select_rows(&[0]);
        unseen.subject_ids = vec!["C".into()];
        let zu = stats.apply(&unseen).unwrap();
        let g = stats.global[0];
        assert_eq!(zu.values.get(0, 0), (1.0 - g.mean) / g.std);
    }

    #[test]
    fn csv_round_trip() {
        let m = toy_matrix(&[[1.0, 0.1, -3.25], [2.0e-7, 5.0, 1.0 / 3.0]]);
        let back = FeatureMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
    }
}
