//! Tree-structured Parzen estimator over a mixed search space, plus the
//! cross-validated macro-F1 objective used to tune the boosted members.
//!
//! Each trial draws from its own PRNG stream (study seed, trial id), so a
//! study resumed from its journal continues exactly as an uninterrupted one.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{complement, stratified_kfold};
use crate::ensemble::blend;
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::gbdt::{class_weights_for, train, GbdtConfig, Growth};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DimKind {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    IntStep { lo: i64, hi: i64, step: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
}

impl Dimension {
    pub fn uniform(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::Uniform { lo, hi },
        }
    }

    pub fn log_uniform(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::LogUniform { lo, hi },
        }
    }

    pub fn int_step(name: &str, lo: i64, hi: i64, step: i64) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::IntStep { lo, hi, step },
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::Categorical {
                choices: choices.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidParam {
                name: self.name.clone(),
                reason,
            })
        };
        match &self.kind {
            DimKind::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return bad(format!("invalid bounds [{lo}, {hi}]"));
                }
            }
            DimKind::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                    return bad(format!("invalid log bounds [{lo}, {hi}]"));
                }
            }
            DimKind::IntStep { lo, hi, step } => {
                if *step < 1 || lo > hi || (hi - lo) % step != 0 {
                    return bad(format!("invalid lattice [{lo}, {hi}] step {step}"));
                }
            }
            DimKind::Categorical { choices } => {
                if choices.is_empty() {
                    return bad("no choices".into());
                }
            }
        }
        Ok(())
    }

    /// Number of lattice points for discrete dimensions.
    fn levels(&self) -> Option<usize> {
        match &self.kind {
            DimKind::IntStep { lo, hi, step } => Some(((hi - lo) / step + 1) as usize),
            DimKind::Categorical { choices } => Some(choices.len()),
            _ => None,
        }
    }

    /// Transformed interval of continuous dimensions.
    fn interval(&self) -> Option<(f64, f64)> {
        match &self.kind {
            DimKind::Uniform { lo, hi } => Some((*lo, *hi)),
            DimKind::LogUniform { lo, hi } => Some((lo.ln(), hi.ln())),
            _ => None,
        }
    }

    fn to_internal(&self, v: &ParamValue) -> Option<f64> {
        match (&self.kind, v) {
            (DimKind::Uniform { .. }, ParamValue::Real(x)) => Some(*x),
            (DimKind::LogUniform { .. }, ParamValue::Real(x)) => Some(x.ln()),
            (DimKind::IntStep { lo, step, .. }, ParamValue::Int(x)) => Some(((x - lo) / step) as f64),
            (DimKind::Categorical { choices }, ParamValue::Cat(s)) => {
                choices.iter().position(|c| c == s).map(|k| k as f64)
            }
            _ => None,
        }
    }

    fn from_internal(&self, t: f64) -> ParamValue {
        match &self.kind {
            DimKind::Uniform { lo, hi } => ParamValue::Real(t.clamp(*lo, *hi)),
            DimKind::LogUniform { lo, hi } => ParamValue::Real(t.exp().clamp(*lo, *hi)),
            DimKind::IntStep { lo, step, .. } => ParamValue::Int(lo + step * t as i64),
            DimKind::Categorical { choices } => ParamValue::Cat(choices[t as usize].clone()),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (&self.kind, v) {
            (DimKind::Uniform { lo, hi }, ParamValue::Real(x))
            | (DimKind::LogUniform { lo, hi }, ParamValue::Real(x)) => x >= lo && x <= hi,
            (DimKind::IntStep { lo, hi, step }, ParamValue::Int(x)) => x >= lo && x <= hi && (x - lo) % step == 0,
            (DimKind::Categorical { choices }, ParamValue::Cat(s)) => choices.contains(s),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Int(i) => Some(*i as f64),
            Self::Real(x) => Some(*x),
            Self::Cat(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Self::Int(i) => Some(*i),
            _ => None,
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        let space = Self { dims };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::EmptySpace);
        }
        for (i, d) in self.dims.iter().enumerate() {
            d.validate()?;
            if self.dims[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::InvalidParam {
                    name: d.name.clone(),
                    reason: "duplicate dimension".into(),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, params: &Params) -> bool {
        params.len() == self.dims.len()
            && self
                .dims
                .iter()
                .all(|d| params.get(&d.name).is_some_and(|v| d.contains(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialState {
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: Params,
    pub objective: Option<f64>,
    pub state: TrialState,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub gamma_fraction: f64,
    pub n_candidates: usize,
    /// Minimum kernel bandwidth as a fraction of the transformed range.
    pub bandwidth_floor: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 10,
            gamma_fraction: 0.25,
            n_candidates: 24,
            bandwidth_floor: 0.01,
        }
    }
}

/// Mixture of truncated Gaussians on `[a, b]` plus a uniform prior component.
/// Each kernel's bandwidth is the larger gap to its sorted neighbours.
struct Parzen {
    a: f64,
    b: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Probability mass of each kernel inside `[a, b]`.
    mass: Vec<f64>,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

impl Parzen {
    fn fit(obs: &[f64], a: f64, b: f64, floor: f64) -> Self {
        let width = b - a;
        let mut mus = obs.to_vec();
        mus.sort_by(f64::total_cmp);
        let n = mus.len();
        let lo = (width / (n as f64 + 1.0).min(100.0)).max(floor * width).max(f64::MIN_POSITIVE);
        let hi = width.max(lo);
        let sigmas: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i == 0 { mus[i] - a } else { mus[i] - mus[i - 1] };
                let right = if i + 1 == n { b - mus[i] } else { mus[i + 1] - mus[i] };
                left.max(right).clamp(lo, hi)
            })
            .collect();
        let mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(&mu, &s)| (std_normal_cdf((b - mu) / s) - std_normal_cdf((a - mu) / s)).max(1e-300))
            .collect();
        Self {
            a,
            b,
            mus,
            sigmas,
            mass,
        }
    }

    fn n_components(&self) -> usize {
        self.mus.len() + 1
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let width = self.b - self.a;
        let k = rng.random_range(0..self.n_components());
        if k == self.mus.len() || width == 0.0 {
            return self.a + rng.random::<f64>() * width;
        }
        for _ in 0..64 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = self.mus[k] + self.sigmas[k] * z;
            if x >= self.a && x <= self.b {
                return x;
            }
        }
        self.mus[k].clamp(self.a, self.b)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let width = self.b - self.a;
        let mut total = if width > 0.0 { 1.0 / width } else { 1.0 };
        for ((mu, s), m) in self.mus.iter().zip(&self.sigmas).zip(&self.mass) {
            let z = (x - mu) / s;
            total += (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt() * m);
        }
        (total / self.n_components() as f64).max(1e-300).ln()
    }
}

/// Histogram over lattice levels with one pseudo-observation spread evenly.
struct SmoothedHistogram {
    p: Vec<f64>,
}

impl SmoothedHistogram {
    fn fit(obs: &[f64], levels: usize) -> Self {
        let mut p = vec![1.0 / levels as f64; levels];
        for &k in obs {
            p[k as usize] += 1.0;
        }
        let total = obs.len() as f64 + 1.0;
        for v in &mut p {
            *v /= total;
        }
        Self { p }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &pk) in self.p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k as f64;
            }
        }
        (self.p.len() - 1) as f64
    }

    fn log_pdf(&self, k: f64) -> f64 {
        self.p[k as usize].ln()
    }
}

enum Density {
    Parzen(Parzen),
    Histogram(SmoothedHistogram),
}

impl Density {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Parzen(d) => d.sample(rng),
            Self::Histogram(d) => d.sample(rng),
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        match self {
            Self::Parzen(d) => d.log_pdf(x),
            Self::Histogram(d) => d.log_pdf(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub space: SearchSpace,
    pub config: TpeConfig,
    pub seed: u64,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn new(space: SearchSpace, seed: u64, config: TpeConfig) -> Result<Self> {
        space.validate()?;
        Ok(Self {
            space,
            config,
            seed,
            trials: Vec::new(),
        })
    }

    fn trial_rng(&self, id: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        rng
    }

    pub fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials
            .iter()
            .filter(|t| t.state == TrialState::Complete && t.objective.is_some())
    }

    /// Highest objective among complete trials; ties go to the earliest.
    pub fn best(&self) -> Option<&Trial> {
        self.completed().fold(None, |best: Option<&Trial>, t| match best {
            Some(b) if b.objective >= t.objective => Some(b),
            _ => Some(t),
        })
    }

    fn sample_startup(&self, rng: &mut ChaCha8Rng) -> Params {
        self.space
            .dims
            .iter()
            .map(|d| {
                let t = match (d.interval(), d.levels()) {
                    (Some((a, b)), _) => a + rng.random::<f64>() * (b - a),
                    (None, Some(l)) => rng.random_range(0..l) as f64,
                    (None, None) => unreachable!("dimension is continuous or discrete"),
                };
                (d.name.clone(), d.from_internal(t))
            })
            .collect()
    }

    /// Parameters for the next trial.
    pub fn suggest(&self) -> Params {
        let id = self.trials.len();
        let mut rng = self.trial_rng(id);
        let mut done: Vec<&Trial> = self.completed().collect();
        if done.len() < self.config.n_startup.max(2) {
            return self.sample_startup(&mut rng);
        }
        let first = done[0].objective;
        if done.iter().all(|t| t.objective == first) {
            return self.sample_startup(&mut rng);
        }
        done.sort_by(|a, b| {
            b.objective
                .partial_cmp(&a.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.id.cmp(&b.id))
        });
        let n = done.len();
        let n_good = ((self.config.gamma_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let (good, bad) = done.split_at(n_good);
        let mut params = Params::new();
        for d in &self.space.dims {
            let values = |ts: &[&Trial]| -> Vec<f64> {
                ts.iter()
                    .filter_map(|t| t.params.get(&d.name).and_then(|v| d.to_internal(v)))
                    .collect()
            };
            let (g, b) = (values(good), values(bad));
            let (l, gb) = match (d.interval(), d.levels()) {
                (Some((lo, hi)), _) => (
                    Density::Parzen(Parzen::fit(&g, lo, hi, self.config.bandwidth_floor)),
                    Density::Parzen(Parzen::fit(&b, lo, hi, self.config.bandwidth_floor)),
                ),
                (None, Some(levels)) => (
                    Density::Histogram(SmoothedHistogram::fit(&g, levels)),
                    Density::Histogram(SmoothedHistogram::fit(&b, levels)),
                ),
                (None, None) => unreachable!("dimension is continuous or discrete"),
            };
            let mut best = (f64::NEG_INFINITY, 0.0);
            for _ in 0..self.config.n_candidates.max(1) {
                let x = l.sample(&mut rng);
                let score = l.log_pdf(x) - gb.log_pdf(x);
                if score > best.0 {
                    best = (score, x);
                }
            }
            params.insert(d.name.clone(), d.from_internal(best.1));
        }
        params
    }

    /// Record an evaluated trial. Errors and non-finite objectives become
    /// failed trials.
    pub fn tell(&mut self, params: Params, outcome: Result<f64>, duration_s: f64) -> &Trial {
        let (objective, state) = match outcome {
            Ok(v) if v.is_finite() => (Some(v), TrialState::Complete),
            _ => (None, TrialState::Failed),
        };
        self.trials.push(Trial {
            id: self.trials.len(),
            params,
            objective,
            state,
            duration_s,
        });
        self.trials.last().expect("just pushed")
    }

    /// Run `n_trials` more trials, appending each to `journal` when given.
    pub fn optimize<F>(&mut self, mut objective: F, n_trials: usize, mut journal: Option<&mut dyn Write>) -> Result<Option<Trial>>
    where
        F: FnMut(&Params) -> Result<f64>,
    {
        for _ in 0..n_trials {
            let params = self.suggest();
            let start = Instant::now();
            let outcome = objective(&params);
            let duration = start.elapsed().as_secs_f64();
            let trial = self.tell(params, outcome, duration);
            if let Some(w) = journal.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(trial)?)?;
                w.flush()?;
            }
        }
        Ok(self.best().cloned())
    }

    pub fn to_journal(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Rebuild a study from its JSON-lines history.
    pub fn resume(space: SearchSpace, seed: u64, config: TpeConfig, journal: &str) -> Result<Self> {
        let mut study = Self::new(space, seed, config)?;
        for line in journal.lines().filter(|l| !l.trim().is_empty()) {
            let trial: Trial = serde_json::from_str(line)?;
            if trial.id != study.trials.len() {
                return Err(Error::InvalidArgument(format!(
                    "journal trial {} out of order (expected {})",
                    trial.id,
                    study.trials.len()
                )));
            }
            study.trials.push(trial);
        }
        Ok(study)
    }
}

// ---------------------------------------------------------------------------
// GBDT search spaces
// ---------------------------------------------------------------------------

/// Ranges of the boosted-member search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub n_estimators: (i64, i64, i64),
    pub learning_rate: (f64, f64),
    pub max_depth: (i64, i64),
    pub subsample: (f64, f64),
    pub colsample: (f64, f64),
    pub min_child_weight: (f64, f64),
    pub gamma: (f64, f64),
    pub max_delta_step: (i64, i64),
    pub num_leaves: (i64, i64),
    pub min_child_samples: (i64, i64),
    pub lambda_l1: (f64, f64),
    pub lambda_l2: (f64, f64),
}

impl SearchBounds {
    /// Full-scale ranges.
    pub fn full() -> Self {
        Self {
            n_estimators: (500, 2000, 100),
            learning_rate: (0.005, 0.05),
            max_depth: (4, 10),
            subsample: (0.6, 1.0),
            colsample: (0.5, 1.0),
            min_child_weight: (1.0, 10.0),
            gamma: (0.0, 1.0),
            max_delta_step: (0, 5),
            num_leaves: (20, 150),
            min_child_samples: (10, 100),
            lambda_l1: (1e-4, 10.0),
            lambda_l2: (1e-4, 10.0),
        }
    }

    /// Small ranges for single-core desk runs: fewer, larger boosting steps
    /// and smaller trees; the other ranges are unchanged.
    pub fn desk() -> Self {
        Self {
            n_estimators: (20, 60, 10),
            learning_rate: (0.05, 0.3),
            max_depth: (3, 6),
            num_leaves: (8, 32),
            min_child_samples: (10, 40),
            ..Self::full()
        }
    }
}

/// Search space for one growth strategy; `prefix` namespaces the names.
pub fn gbdt_dims(growth: Growth, bounds: &SearchBounds, prefix: &str) -> Vec<Dimension> {
    let n = |s: &str| format!("{prefix}{s}");
    let b = bounds;
    let mut dims = vec![
        Dimension::int_step(&n("n_estimators"), b.n_estimators.0, b.n_estimators.1, b.n_estimators.2),
        Dimension::log_uniform(&n("learning_rate"), b.learning_rate.0, b.learning_rate.1),
        Dimension::int_step(&n("max_depth"), b.max_depth.0, b.max_depth.1, 1),
        Dimension::uniform(&n("subsample"), b.subsample.0, b.subsample.1),
        Dimension::uniform(&n("colsample"), b.colsample.0, b.colsample.1),
    ];
    match growth {
        Growth::DepthWise => dims.extend([
            Dimension::uniform(&n("min_child_weight"), b.min_child_weight.0, b.min_child_weight.1),
            Dimension::uniform(&n("gamma"), b.gamma.0, b.gamma.1),
            Dimension::int_step(&n("max_delta_step"), b.max_delta_step.0, b.max_delta_step.1, 1),
        ]),
        Growth::LeafWise => dims.extend([
            Dimension::int_step(&n("num_leaves"), b.num_leaves.0, b.num_leaves.1, 1),
            Dimension::int_step(&n("min_child_samples"), b.min_child_samples.0, b.min_child_samples.1, 1),
            Dimension::log_uniform(&n("lambda_l1"), b.lambda_l1.0, b.lambda_l1.1),
            Dimension::log_uniform(&n("lambda_l2"), b.lambda_l2.0, b.lambda_l2.1),
        ]),
    }
    dims
}

pub fn gbdt_space(growth: Growth, bounds: &SearchBounds) -> SearchSpace {
    SearchSpace {
        dims: gbdt_dims(growth, bounds, ""),
    }
}

pub fn alpha_dimension() -> Dimension {
    Dimension::uniform("alpha", 0.0, 1.0)
}

pub const JOINT_PREFIX_A: &str = "a.";
pub const JOINT_PREFIX_B: &str = "b.";

/// Both members and the blend weight in one space.
pub fn joint_space(bounds: &SearchBounds) -> SearchSpace {
    let mut dims = gbdt_dims(Growth::DepthWise, bounds, JOINT_PREFIX_A);
    dims.extend(gbdt_dims(Growth::LeafWise, bounds, JOINT_PREFIX_B));
    dims.push(alpha_dimension());
    SearchSpace { dims }
}

/// Apply the (possibly prefixed) parameters onto the growth defaults.
pub fn config_from_params(params: &Params, growth: Growth, prefix: &str, seed: u64) -> Result<GbdtConfig> {
    let mut cfg = GbdtConfig::for_growth(growth);
    cfg.seed = seed;
    for (key, value) in params {
        let Some(name) = key.strip_prefix(prefix) else { continue };
        let real = || {
            value.as_f64().ok_or_else(|| Error::InvalidParam {
                name: key.clone(),
                reason: "expected a number".into(),
            })
        };
        let int = || -> Result<usize> {
            let v = value.as_i64().ok_or_else(|| Error::InvalidParam {
                name: key.clone(),
                reason: "expected an integer".into(),
            })?;
            usize::try_from(v).map_err(|_| Error::InvalidParam {
                name: key.clone(),
                reason: "must be >= 0".into(),
            })
        };
        match name {
            "n_estimators" => cfg.n_estimators = int()?,
            "learning_rate" => cfg.learning_rate = real()?,
            "max_depth" => cfg.max_depth = int()?,
            "subsample" => cfg.subsample = real()?,
            "colsample" => cfg.colsample = real()?,
            "min_child_weight" => cfg.min_child_weight = real()?,
            "gamma" => cfg.gamma = real()?,
            "max_delta_step" => cfg.max_delta_step = int()? as f64,
            "num_leaves" => cfg.num_leaves = int()?,
            "min_child_samples" => cfg.min_child_samples = int()?,
            "lambda_l1" => cfg.lambda_l1 = real()?,
            "lambda_l2" => cfg.lambda_l2 = real()?,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Cross-validated objective
// ---------------------------------------------------------------------------

/// Training rows with a fixed stratified fold assignment.
#[derive(Debug, Clone)]
pub struct CvData<'a> {
    pub x: &'a DenseMatrix,
    pub y: &'a [usize],
    pub n_classes: usize,
    /// Held-out indices of each fold.
    pub folds: Vec<Vec<usize>>,
}

impl<'a> CvData<'a> {
    pub fn new(x: &'a DenseMatrix, y: &'a [usize], n_classes: usize, k: usize, seed: u64) -> Result<Self> {
        if x.n_rows() != y.len() {
            return Err(Error::LengthMismatch(x.n_rows(), y.len()));
        }
        let folds = stratified_kfold(y, k, seed)?;
        Ok(Self { x, y, n_classes, folds })
    }

    fn fold(&self, i: usize) -> (Vec<usize>, &[usize]) {
        (complement(&self.folds[i], self.y.len()), &self.folds[i])
    }

    /// Held-out probabilities of a model trained on the other folds.
    pub fn fold_proba(&self, i: usize, cfg: &GbdtConfig) -> Result<DenseMatrix> {
        let (train_idx, test_idx) = self.fold(i);
        let xt = self.x.select_rows(&train_idx);
        let yt: Vec<usize> = train_idx.iter().map(|&r| self.y[r]).collect();
        let w = class_weights_for(&yt, self.n_classes)?.sample_weights(&yt);
        let mut cfg = cfg.clone();
        cfg.n_classes = self.n_classes;
        let model = train(&xt, &yt, &w, &cfg)?;
        model.predict_proba(&self.x.select_rows(test_idx))
    }

    pub fn held_out_labels(&self, i: usize) -> Vec<usize> {
        self.folds[i].iter().map(|&r| self.y[r]).collect()
    }

    fn score(&self, i: usize, p: &DenseMatrix) -> Result<f64> {
        let pred = crate::ensemble::predict_from_proba(p);
        macro_f1(&self.held_out_labels(i), &pred, self.n_classes)
    }
}

/// Mean held-out macro-F1 of one member configuration.
pub fn cv_objective(data: &CvData, cfg: &GbdtConfig) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.folds.len() {
        let p = data.fold_proba(i, cfg)?;
        total += data.score(i, &p)?;
    }
    Ok(total / data.folds.len() as f64)
}

/// Mean held-out macro-F1 of a blend of two members.
pub fn cv_objective_blend(data: &CvData, cfg_a: &GbdtConfig, cfg_b: &GbdtConfig, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.folds.len() {
        let pa = data.fold_proba(i, cfg_a)?;
        let pb = data.fold_proba(i, cfg_b)?;
        total += data.score(i, &blend(&pa, &pb, alpha)?)?;
    }
    Ok(total / data.folds.len() as f64)
}

/// Cached held-out member probabilities for tuning the blend weight alone.
#[derive(Debug, Clone)]
pub struct BlendCache {
    pub labels: Vec<Vec<usize>>,
    pub proba_a: Vec<DenseMatrix>,
    pub proba_b: Vec<DenseMatrix>,
    pub n_classes: usize,
}

impl BlendCache {
    pub fn build(data: &CvData, cfg_a: &GbdtConfig, cfg_b: &GbdtConfig) -> Result<Self> {
        let mut cache = Self {
            labels: Vec::new(),
            proba_a: Vec::new(),
            proba_b: Vec::new(),
            n_classes: data.n_classes,
        };
        for i in 0..data.folds.len() {
            cache.labels.push(data.held_out_labels(i));
            cache.proba_a.push(data.fold_proba(i, cfg_a)?);
            cache.proba_b.push(data.fold_proba(i, cfg_b)?);
        }
        Ok(cache)
    }

    pub fn objective(&self, alpha: f64) -> Result<f64> {
        let mut total = 0.0;
        for ((y, pa), pb) in self.labels.iter().zip(&self.proba_a).zip(&self.proba_b) {
            let pred = crate::ensemble::predict_from_proba(&blend(pa, pb, alpha)?);
            total += macro_f1(y, &pred, self.n_classes)?;
        }
        Ok(total / self.labels.len() as f64)
    }
}
