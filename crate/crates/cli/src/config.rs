//! Run configuration: defaults, a flat `key = value` file, flag overrides.
//!
//! File grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Blank lines and `#` comments are ignored, keys are unique, unknown keys
//! are rejected. Paths (`data`, `workdir`) do not enter the config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use physiodecode::pipeline::{AlphaMode, NormMode, PipelineConfig};
use physiodecode::tpe::SearchBounds;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_WORKDIR: &str = "physiodecode-work";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsPreset {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Epochs per class written by `synth`.
    pub n_per_class: usize,
    pub test_fraction: f64,
    pub elite_k: usize,
    pub trials: usize,
    pub alpha_trials: usize,
    pub folds: usize,
    pub alpha: AlphaMode,
    pub bounds: BoundsPreset,
    pub norm: NormMode,
    pub screen: bool,
    pub screen_z: f64,
    pub flat_eps: f64,
    pub welch_segment_len: usize,
    pub welch_overlap: f64,
    pub joint_alpha: bool,
    pub ablation_retune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: p.seed,
            data: None,
            workdir: PathBuf::from(DEFAULT_WORKDIR),
            n_per_class: 250,
            test_fraction: p.test_fraction,
            elite_k: p.elite_k,
            trials: p.trials,
            alpha_trials: p.alpha_trials,
            folds: p.folds,
            alpha: p.alpha,
            bounds: BoundsPreset::Full,
            norm: p.norm,
            screen: p.screen.enabled,
            screen_z: p.screen.z_thresh,
            flat_eps: p.screen.flat_eps,
            welch_segment_len: p.welch.segment_len,
            welch_overlap: p.welch.overlap,
            joint_alpha: p.joint_alpha,
            ablation_retune: p.ablation_retune,
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

pub fn parse_alpha(value: &str) -> Result<AlphaMode, CliError> {
    match value {
        "tuned" => Ok(AlphaMode::Tuned),
        "reference" => Ok(AlphaMode::reference_preset()),
        _ => {
            let v = value.strip_prefix("fixed:").unwrap_or(value);
            let a: f64 = num("alpha", v)?;
            if !(0.0..=1.0).contains(&a) {
                return Err(CliError::Config(format!("alpha must be in [0, 1], got {a}")));
            }
            Ok(AlphaMode::Fixed(a))
        }
    }
}

fn alpha_text(a: AlphaMode) -> String {
    match a {
        AlphaMode::Tuned => "tuned".into(),
        AlphaMode::Fixed(v) => format!("fixed:{v:?}"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "workdir" => self.workdir = PathBuf::from(value),
            "n_per_class" => self.n_per_class = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "elite_k" => self.elite_k = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "alpha_trials" => self.alpha_trials = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "alpha" => self.alpha = parse_alpha(value)?,
            "bounds" => {
                self.bounds = match value {
                    "full" => BoundsPreset::Full,
                    "desk" => BoundsPreset::Desk,
                    _ => return Err(bad(key, value)),
                }
            }
            "norm" => {
                self.norm = match value {
                    "global" => NormMode::Global,
                    "per-subject" | "per_subject" => NormMode::PerSubject,
                    _ => return Err(bad(key, value)),
                }
            }
            "screen" => self.screen = flag(key, value)?,
            "screen_z" => self.screen_z = num(key, value)?,
            "flat_eps" => self.flat_eps = num(key, value)?,
            "welch_segment_len" => self.welch_segment_len = num(key, value)?,
            "welch_overlap" => self.welch_overlap = num(key, value)?,
            "joint_alpha" => self.joint_alpha = flag(key, value)?,
            "ablation_retune" => self.ablation_retune = flag(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Canonical `key = value` text of every setting that affects results.
    pub fn canonical_text(&self) -> String {
        let bounds = match self.bounds {
            BoundsPreset::Full => "full",
            BoundsPreset::Desk => "desk",
        };
        let norm = match self.norm {
            NormMode::Global => "global",
            NormMode::PerSubject => "per-subject",
        };
        let entries: [(&str, String); 18] = [
            ("ablation_retune", self.ablation_retune.to_string()),
            ("alpha", alpha_text(self.alpha)),
            ("alpha_trials", self.alpha_trials.to_string()),
            ("bounds", bounds.into()),
            ("elite_k", self.elite_k.to_string()),
            ("flat_eps", format!("{:?}", self.flat_eps)),
            ("folds", self.folds.to_string()),
            ("joint_alpha", self.joint_alpha.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
            ("norm", norm.into()),
            ("screen", self.screen.to_string()),
            ("screen_z", format!("{:?}", self.screen_z)),
            ("seed", self.seed.to_string()),
            ("test_fraction", format!("{:?}", self.test_fraction)),
            ("trials", self.trials.to_string()),
            ("welch_overlap", format!("{:?}", self.welch_overlap)),
            ("welch_segment_len", self.welch_segment_len.to_string()),
            ("format_version", "1".into()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let mut p = PipelineConfig {
            seed: self.seed,
            test_fraction: self.test_fraction,
            elite_k: self.elite_k,
            trials: self.trials,
            alpha_trials: self.alpha_trials,
            folds: self.folds,
            alpha: self.alpha,
            norm: self.norm,
            joint_alpha: self.joint_alpha,
            ablation_retune: self.ablation_retune,
            bounds: match self.bounds {
                BoundsPreset::Full => SearchBounds::full(),
                BoundsPreset::Desk => SearchBounds::desk(),
            },
            ..PipelineConfig::default()
        };
        p.screen.enabled = self.screen;
        p.screen.z_thresh = self.screen_z;
        p.screen.flat_eps = self.flat_eps;
        p.welch.segment_len = self.welch_segment_len;
        p.welch.overlap = self.welch_overlap;
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.n_per_class == 0 {
            return Err(CliError::Config("n_per_class must be >= 1".into()));
        }
        Ok(p)
    }
}
