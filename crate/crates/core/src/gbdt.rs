//! Multiclass gradient-boosted decision trees with a softmax objective.
//!
//! One regression tree per class per round is fitted to second-order
//! gradient statistics of the weighted softmax cross-entropy. Two growth
//! strategies are available: level-by-level (`DepthWise`, exact splits by
//! default) and best-first (`LeafWise`, 255-bin histograms by default).
//! Both share one split finder: in exact mode every distinct feature value
//! is its own bin.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_BINS: usize = 255;
const MAX_EXACT_BINS: usize = u16::MAX as usize + 1;
const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Growth {
    DepthWise,
    LeafWise,
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DepthWise => "depthwise",
            Self::LeafWise => "leafwise",
        })
    }
}

impl FromStr for Growth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "depthwise" | "depth-wise" | "depth_wise" => Ok(Self::DepthWise),
            "leafwise" | "leaf-wise" | "leaf_wise" => Ok(Self::LeafWise),
            _ => Err(Error::InvalidArgument(format!("unknown growth strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitMode {
    /// Every distinct value is a candidate boundary.
    Exact,
    /// At most `max_bins` quantile bins per feature.
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// 0 means unlimited (only meaningful for leaf-wise growth).
    pub max_depth: usize,
    pub subsample: f64,
    pub colsample: f64,
    pub min_child_weight: f64,
    pub gamma: f64,
    /// 0 disables leaf clipping.
    pub max_delta_step: f64,
    pub num_leaves: usize,
    pub min_child_samples: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub growth: Growth,
    pub split_mode: SplitMode,
    pub max_bins: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl GbdtConfig {
    /// Level-wise trees with exact splits.
    pub fn depth_wise() -> Self {
        Self {
            n_estimators: 500,
            learning_rate: 0.05,
            max_depth: 6,
            subsample: 1.0,
            colsample: 1.0,
            min_child_weight: 1.0,
            gamma: 0.0,
            max_delta_step: 0.0,
            num_leaves: usize::MAX,
            min_child_samples: 1,
            lambda_l1: 0.0,
            lambda_l2: 1.0,
            growth: Growth::DepthWise,
            split_mode: SplitMode::Exact,
            max_bins: DEFAULT_MAX_BINS,
            n_classes: 4,
            seed: 0,
        }
    }

    /// Best-first trees over histogram bins.
    pub fn leaf_wise() -> Self {
        Self {
            n_estimators: 500,
            learning_rate: 0.05,
            max_depth: 0,
            subsample: 1.0,
            colsample: 1.0,
            min_child_weight: 1e-3,
            gamma: 0.0,
            max_delta_step: 0.0,
            num_leaves: 31,
            min_child_samples: 20,
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            growth: Growth::LeafWise,
            split_mode: SplitMode::Histogram,
            max_bins: DEFAULT_MAX_BINS,
            n_classes: 4,
            seed: 0,
        }
    }

    pub fn for_growth(growth: Growth) -> Self {
        match growth {
            Growth::DepthWise => Self::depth_wise(),
            Growth::LeafWise => Self::leaf_wise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: String| {
            Err(Error::InvalidParam {
                name: name.to_string(),
                reason,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample", format!("must be in (0, 1], got {}", self.subsample));
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return bad("colsample", format!("must be in (0, 1], got {}", self.colsample));
        }
        for (name, v) in [
            ("min_child_weight", self.min_child_weight),
            ("gamma", self.gamma),
            ("max_delta_step", self.max_delta_step),
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.growth == Growth::DepthWise && self.max_depth == 0 {
            return bad("max_depth", "depth-wise growth needs max_depth >= 1".into());
        }
        if self.growth == Growth::LeafWise && self.num_leaves < 2 {
            return bad("num_leaves", format!("must be >= 2, got {}", self.num_leaves));
        }
        if self.max_bins < 2 {
            return bad("max_bins", format!("must be >= 2, got {}", self.max_bins));
        }
        if self.n_classes < 2 {
            return bad("n_classes", format!("must be >= 2, got {}", self.n_classes));
        }
        Ok(())
    }
}

/// Inverse-frequency class weights `w_c = N / (C * n_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl ClassWeights {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    /// Weight of each sample according to its class.
    pub fn sample_weights(&self, labels: &[usize]) -> Vec<f64> {
        labels.iter().map(|&c| self.weights[c]).collect()
    }
}

pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let total: usize = counts.iter().sum();
    let denom_scale = counts.len() as f64;
    let weights = counts
        .iter()
        .map(|&n| total as f64 / (denom_scale * n as f64))
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
        total,
    })
}

/// Class weights computed from label ordinals.
pub fn class_weights_for(labels: &[usize], n_classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0usize; n_classes];
    for &c in labels {
        counts[c] += 1;
    }
    class_weights(&counts)
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// `None` marks a leaf.
    pub split_feature: Option<usize>,
    /// Rows with `x[split_feature] < threshold` go left.
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Margin contribution (learning rate already applied).
    pub leaf_value: f64,
    /// Sum of hessian x weight of the training rows reaching the node.
    pub cover: f64,
    pub n_samples: usize,
}

impl TreeNode {
    pub fn leaf(value: f64, cover: f64, n_samples: usize) -> Self {
        Self {
            split_feature: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            leaf_value: value,
            cover,
            n_samples,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.split_feature.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Build a tree from explicit nodes (root at index 0), checking structure.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        let tree = Self { nodes };
        tree.validate(usize::MAX)?;
        Ok(tree)
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidModel("tree has no nodes".into()));
        }
        let n = self.nodes.len();
        let mut referenced = vec![0u32; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.cover > 0.0) {
                return Err(Error::InvalidModel(format!("node {i} has non-positive cover")));
            }
            if !node.leaf_value.is_finite() || !node.threshold.is_finite() {
                return Err(Error::InvalidModel(format!("node {i} has non-finite values")));
            }
            if let Some(f) = node.split_feature {
                if f >= n_features {
                    return Err(Error::InvalidModel(format!("node {i} splits on feature {f}")));
                }
                if node.left <= i || node.right <= i || node.left >= n || node.right >= n {
                    return Err(Error::InvalidModel(format!("node {i} has invalid children")));
                }
                referenced[node.left] += 1;
                referenced[node.right] += 1;
            }
        }
        if referenced[0] != 0 || referenced[1..].iter().any(|&r| r != 1) {
            return Err(Error::InvalidModel("nodes do not form a tree".into()));
        }
        Ok(())
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            let node = &self.nodes[i];
            match node.split_feature {
                None => return i,
                Some(f) => {
                    i = if row[f] < node.threshold {
                        node.left
                    } else {
                        node.right
                    }
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_index(row)].leaf_value
    }

    /// Cover-weighted mean of the leaf values.
    pub fn expected_value(&self) -> f64 {
        fn walk(t: &Tree, i: usize) -> f64 {
            let n = &t.nodes[i];
            match n.split_feature {
                None => n.leaf_value,
                Some(_) => {
                    let (l, r) = (&t.nodes[n.left], &t.nodes[n.right]);
                    (l.cover * walk(t, n.left) + r.cover * walk(t, n.right)) / (l.cover + r.cover)
                }
            }
        }
        walk(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            match n.split_feature {
                None => 0,
                Some(_) => 1 + walk(t, n.left).max(walk(t, n.right)),
            }
        }
        walk(self, 0)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub schema_version: u32,
    pub growth: Growth,
    pub config: GbdtConfig,
    pub base_score: Vec<f64>,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    pub feature_names: Vec<String>,
}

impl GbdtModel {
    pub fn n_classes(&self) -> usize {
        self.base_score.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }

    /// Replace the default `f{j}` names; the count must match.
    pub fn set_feature_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.feature_names.len() {
            return Err(Error::FeatureMismatch(format!(
                "{} names for {} features",
                names.len(),
                self.feature_names.len()
            )));
        }
        self.feature_names = names;
        Ok(())
    }

    /// Trees of one class across all rounds.
    pub fn class_trees(&self, class: usize) -> impl Iterator<Item = &Tree> {
        self.trees.iter().map(move |round| &round[class])
    }

    pub fn predict_margin_row(&self, row: &[f64]) -> Vec<f64> {
        let mut margin = self.base_score.clone();
        for round in &self.trees {
            for (m, tree) in margin.iter_mut().zip(round) {
                *m += tree.predict(row);
            }
        }
        margin
    }

    fn check_features(&self, x: &DenseMatrix) -> Result<()> {
        if x.n_cols() != self.n_features() {
            return Err(Error::FeatureMismatch(format!(
                "model expects {} features, input has {}",
                self.n_features(),
                x.n_cols()
            )));
        }
        Ok(())
    }

    pub fn predict_margin(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_features(x)?;
        let c = self.n_classes();
        let mut out = DenseMatrix::zeros(x.n_rows(), c);
        for (i, row) in x.rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.predict_margin_row(row));
        }
        Ok(out)
    }

    pub fn predict_proba(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut m = self.predict_margin(x)?;
        for i in 0..m.n_rows() {
            softmax_in_place(m.row_mut(i));
        }
        Ok(m)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok(p.rows().map(argmax).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        Self::from_json_value(value)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        if found != Some(MODEL_SCHEMA_VERSION as u64) {
            return Err(Error::SchemaVersionMismatch {
                expected: MODEL_SCHEMA_VERSION,
                found,
            });
        }
        let model: Self = serde_json::from_value(value)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::InvalidModel("model needs at least two classes".into()));
        }
        for (r, round) in self.trees.iter().enumerate() {
            if round.len() != c {
                return Err(Error::InvalidModel(format!(
                    "round {r} has {} trees for {c} classes",
                    round.len()
                )));
            }
            for t in round {
                t.validate(self.n_features())?;
            }
        }
        Ok(())
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted mean softmax cross-entropy of a model on labelled rows.
pub fn weighted_log_loss(model: &GbdtModel, x: &DenseMatrix, y: &[usize], w: &[f64]) -> Result<f64> {
    let p = model.predict_proba(x)?;
    Ok(log_loss_from_proba(&p, y, w))
}

pub fn log_loss_from_proba(p: &DenseMatrix, y: &[usize], w: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &c) in y.iter().enumerate() {
        num -= w[i] * p.get(i, c).max(1e-300).ln();
        den += w[i];
    }
    num / den
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-feature bin assignment. `thresholds[b]` separates bin `b` from `b+1`.
struct FeatureBins {
    bins: Vec<u16>,
    thresholds: Vec<f64>,
}

/// A split point strictly above `a` and at most `b`.
fn split_point(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m > a {
        m
    } else {
        b
    }
}

fn bin_feature(column: &[f64], mode: SplitMode, max_bins: usize) -> FeatureBins {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = Vec::new();
    let mut cumulative: Vec<usize> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if distinct.last() != Some(&v) {
            distinct.push(v);
            cumulative.push(0);
        }
        *cumulative.last_mut().unwrap() = i + 1;
    }
    let limit = match mode {
        SplitMode::Exact => MAX_EXACT_BINS,
        SplitMode::Histogram => max_bins.min(MAX_EXACT_BINS),
    };
    let n = sorted.len().max(1);
    // bin id per distinct value, non-decreasing
    let bin_of_distinct: Vec<usize> = if distinct.len() <= limit {
        (0..distinct.len()).collect()
    } else {
        let raw: Vec<usize> = cumulative.iter().map(|&c| (c - 1) * limit / n).collect();
        let mut ids = Vec::with_capacity(raw.len());
        let mut id = 0;
        for (i, &r) in raw.iter().enumerate() {
            if i > 0 && r != raw[i - 1] {
                id += 1;
            }
            ids.push(id);
        }
        ids
    };
    let mut thresholds = Vec::new();
    for i in 0..distinct.len().saturating_sub(1) {
        if bin_of_distinct[i + 1] != bin_of_distinct[i] {
            thresholds.push(split_point(distinct[i], distinct[i + 1]));
        }
    }
    let bins = column
        .iter()
        .map(|v| {
            let i = distinct
                .binary_search_by(|d| d.total_cmp(v))
                .expect("value present");
            bin_of_distinct[i] as u16
        })
        .collect();
    FeatureBins { bins, thresholds }
}

/// Relative gain difference treated as a tie.
const GAIN_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
struct SplitParams {
    lambda_l1: f64,
    lambda_l2: f64,
    gamma: f64,
    min_child_weight: f64,
    min_child_samples: usize,
    max_delta_step: f64,
    learning_rate: f64,
}

impl SplitParams {
    fn from_config(cfg: &GbdtConfig) -> Self {
        Self {
            lambda_l1: cfg.lambda_l1,
            lambda_l2: cfg.lambda_l2,
            gamma: cfg.gamma,
            min_child_weight: cfg.min_child_weight,
            min_child_samples: cfg.min_child_samples.max(1),
            max_delta_step: cfg.max_delta_step,
            learning_rate: cfg.learning_rate,
        }
    }

    fn soft_threshold(&self, g: f64) -> f64 {
        if g > self.lambda_l1 {
            g - self.lambda_l1
        } else if g < -self.lambda_l1 {
            g + self.lambda_l1
        } else {
            0.0
        }
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        let t = self.soft_threshold(g);
        t * t / (h + self.lambda_l2)
    }

    /// Leaf value before the learning rate.
    fn raw_leaf(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.lambda_l2;
        if denom <= 0.0 {
            return 0.0;
        }
        let w = -self.soft_threshold(g) / denom;
        if self.max_delta_step > 0.0 {
            w.clamp(-self.max_delta_step, self.max_delta_step)
        } else {
            w
        }
    }

    fn leaf(&self, g: f64, h: f64) -> f64 {
        self.raw_leaf(g, h) * self.learning_rate
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    bin: usize,
    threshold: f64,
    gain: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Bin {
    g: f64,
    h: f64,
    n: u32,
}

/// Per-node histogram over all features, laid out at `offsets[f]`.
struct Hist {
    bins: Vec<Bin>,
}

/// Running best split over candidate boundaries of one node.
struct Scan<'p> {
    params: &'p SplitParams,
    n_node: usize,
    g_tot: f64,
    h_tot: f64,
    parent: f64,
    best: Option<Split>,
}

impl Scan<'_> {
    #[inline(always)]
    fn consider(&mut self, f: usize, b: usize, threshold: f64, gl: f64, hl: f64) {
        let p = self.params;
        let (gr, hr) = (self.g_tot - gl, self.h_tot - hl);
        let (sl, sr) = if p.lambda_l1 == 0.0 {
            (gl * gl / (hl + p.lambda_l2), gr * gr / (hr + p.lambda_l2))
        } else {
            (p.score(gl, hl), p.score(gr, hr))
        };
        let gain = 0.5 * (sl + sr - self.parent);
        // differences at rounding level are ties, so summation order
        // (weights vs repeated rows) cannot change the chosen split
        let tol = 0.5 * GAIN_RTOL * (sl + sr + self.parent);
        if gain > p.gamma && gain > tol && self.best.map_or(true, |s| gain > s.gain + tol) {
            self.best = Some(Split {
                feature: f,
                bin: b,
                threshold,
                gain,
            });
        }
    }

    /// Accumulate bin `b` into the left side; false once no later boundary
    /// can satisfy the right-side constraints.
    #[inline(always)]
    fn step(&mut self, f: usize, b: usize, bin: Bin, thresholds: &[f64], left: &mut (f64, f64, usize)) -> bool {
        if bin.n == 0 {
            return true;
        }
        let p = self.params;
        left.0 += bin.g;
        left.1 += bin.h;
        left.2 += bin.n as usize;
        let (gl, hl, nl) = *left;
        if nl < p.min_child_samples || hl < p.min_child_weight {
            return true;
        }
        // the right side only shrinks from here on
        if self.n_node - nl < p.min_child_samples || self.h_tot - hl < p.min_child_weight {
            return false;
        }
        self.consider(f, b, thresholds[b], gl, hl);
        true
    }

    /// Walk bins in ascending order for feature `f`; `order` lists the
    /// non-empty bins when known, otherwise all of `bins` is scanned.
    fn feature(&mut self, f: usize, thresholds: &[f64], bins: &[Bin], order: Option<&[u16]>) {
        let mut left = (0.0, 0.0, 0usize);
        match order {
            Some(order) => {
                for &b in order {
                    let b = b as usize;
                    if !self.step(f, b, bins[b], thresholds, &mut left) {
                        break;
                    }
                }
            }
            None => {
                for (b, &bin) in bins[..bins.len() - 1].iter().enumerate() {
                    if !self.step(f, b, bin, thresholds, &mut left) {
                        break;
                    }
                }
            }
        }
    }
}

/// Scratch space for split finding and a pool of node histograms, reused
/// across trees.
struct SplitFinder {
    scratch: Vec<Bin>,
    touched: Vec<u16>,
    offsets: Vec<usize>,
    total_bins: usize,
    /// Nodes with at least this many rows keep a dense histogram.
    dense_min_rows: usize,
    pool: Vec<Hist>,
}

impl SplitFinder {
    fn new(data: &[FeatureBins], dense: bool) -> Self {
        let mut offsets = Vec::with_capacity(data.len());
        let mut total_bins = 0;
        let mut max_bins = 1;
        for fb in data {
            let nb = fb.thresholds.len() + 1;
            offsets.push(total_bins);
            total_bins += nb;
            max_bins = max_bins.max(nb);
        }
        let dense_min_rows = if dense {
            (total_bins / data.len().max(1)).max(16)
        } else {
            usize::MAX
        };
        Self {
            scratch: vec![Bin::default(); max_bins],
            touched: Vec::new(),
            offsets,
            total_bins,
            dense_min_rows,
            pool: Vec::new(),
        }
    }

    fn wants_dense(&self, n_rows: usize) -> bool {
        n_rows >= self.dense_min_rows
    }

    fn acquire(&mut self) -> Hist {
        self.pool.pop().unwrap_or_else(|| Hist {
            bins: vec![Bin::default(); self.total_bins],
        })
    }

    fn release(&mut self, hist: Hist) {
        self.pool.push(hist);
    }

    /// Dense histogram of `rows` over `features`.
    fn build(&mut self, rows: &[usize], g: &[f64], h: &[f64], features: &[usize], data: &[FeatureBins]) -> Hist {
        let mut hist = self.acquire();
        for &f in features {
            let off = self.offsets[f];
            let nb = data[f].thresholds.len() + 1;
            let slot = &mut hist.bins[off..off + nb];
            slot.fill(Bin::default());
            let bins = &data[f].bins;
            for (k, &r) in rows.iter().enumerate() {
                let bin = &mut slot[bins[r] as usize];
                bin.g += g[k];
                bin.h += h[k];
                bin.n += 1;
            }
        }
        hist
    }

    /// Remove `rows` from a parent histogram, leaving the sibling's.
    fn subtract(&self, hist: &mut Hist, rows: &[usize], g: &[f64], h: &[f64], features: &[usize], data: &[FeatureBins]) {
        for &f in features {
            let off = self.offsets[f];
            let nb = data[f].thresholds.len() + 1;
            let slot = &mut hist.bins[off..off + nb];
            let bins = &data[f].bins;
            for (k, &r) in rows.iter().enumerate() {
                let bin = &mut slot[bins[r] as usize];
                bin.g -= g[k];
                bin.h -= h[k];
                bin.n -= 1;
            }
        }
    }

    /// Best split of a node holding `rows` (with gradient pairs `g`, `h`
    /// aligned to `rows`), scanning `features` in ascending order.
    #[allow(clippy::too_many_arguments)]
    fn best(
        &mut self,
        rows: &[usize],
        g: &[f64],
        h: &[f64],
        total: (f64, f64),
        features: &[usize],
        data: &[FeatureBins],
        params: &SplitParams,
        hist: Option<&Hist>,
    ) -> Option<Split> {
        let n_node = rows.len();
        if n_node < 2 * params.min_child_samples {
            return None;
        }
        let mut scan = Scan {
            params,
            n_node,
            g_tot: total.0,
            h_tot: total.1,
            parent: params.score(total.0, total.1),
            best: None,
        };
        for &f in features {
            let fb = &data[f];
            let n_bins = fb.thresholds.len() + 1;
            if n_bins < 2 {
                continue;
            }
            if let Some(hist) = hist {
                let off = self.offsets[f];
                scan.feature(f, &fb.thresholds, &hist.bins[off..off + n_bins], None);
                continue;
            }
            let scratch = &mut self.scratch[..n_bins];
            self.touched.clear();
            for (k, &r) in rows.iter().enumerate() {
                let b = fb.bins[r] as usize;
                let bin = &mut scratch[b];
                if bin.n == 0 {
                    self.touched.push(b as u16);
                }
                bin.g += g[k];
                bin.h += h[k];
                bin.n += 1;
            }
            let t = self.touched.len();
            if t >= 2 {
                if t * (usize::BITS - t.leading_zeros()) as usize <= n_bins {
                    self.touched.sort_unstable();
                    scan.feature(f, &fb.thresholds, scratch, Some(&self.touched));
                } else {
                    scan.feature(f, &fb.thresholds, scratch, None);
                }
            }
            for &b in &self.touched {
                scratch[b as usize] = Bin::default();
            }
        }
        scan.best
    }
}

/// Node under construction: its rows (ascending), best split and, for large
/// nodes in histogram mode, its dense histogram.
struct Pending {
    node: usize,
    depth: usize,
    rows: Vec<usize>,
    split: Option<Split>,
    hist: Option<Hist>,
}

struct TreeBuilder<'a> {
    data: &'a [FeatureBins],
    grad: &'a [f64],
    hess: &'a [f64],
    features: Vec<usize>,
    params: SplitParams,
    finder: &'a mut SplitFinder,
    nodes: Vec<TreeNode>,
    g_buf: Vec<f64>,
    h_buf: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn sums(&self, rows: &[usize]) -> (f64, f64) {
        rows.iter()
            .fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r], h + self.hess[r]))
    }

    fn new_node(&mut self, rows: &[usize]) -> usize {
        let (g, h) = self.sums(rows);
        self.nodes
            .push(TreeNode::leaf(self.params.leaf(g, h), h, rows.len()));
        self.nodes.len() - 1
    }

    fn gather(&mut self, rows: &[usize]) {
        self.g_buf.clear();
        self.h_buf.clear();
        self.g_buf.extend(rows.iter().map(|&r| self.grad[r]));
        self.h_buf.extend(rows.iter().map(|&r| self.hess[r]));
    }

    fn pending(&mut self, node: usize, depth: usize, rows: Vec<usize>) -> Pending {
        let hist = if self.finder.wants_dense(rows.len()) {
            self.gather(&rows);
            Some(self.finder.build(&rows, &self.g_buf, &self.h_buf, &self.features, self.data))
        } else {
            None
        };
        Pending {
            node,
            depth,
            rows,
            split: None,
            hist,
        }
    }

    fn find_split(&mut self, p: &Pending) -> Option<Split> {
        self.gather(&p.rows);
        let total = self.sums(&p.rows);
        self.finder.best(
            &p.rows,
            &self.g_buf,
            &self.h_buf,
            total,
            &self.features,
            self.data,
            &self.params,
            p.hist.as_ref(),
        )
    }

    fn discard(&mut self, p: Pending) {
        if let Some(h) = p.hist {
            self.finder.release(h);
        }
    }

    /// Turn a pending leaf into an internal node; returns the two children.
    /// Child histograms are only kept when `grow_children` is set.
    fn apply_split(&mut self, p: Pending, split: Split, grow_children: bool) -> (Pending, Pending) {
        let bins = &self.data[split.feature].bins;
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = p
            .rows
            .iter()
            .partition(|&&r| (bins[r] as usize) <= split.bin);
        let left = self.new_node(&left_rows);
        let right = self.new_node(&right_rows);
        let node = &mut self.nodes[p.node];
        node.split_feature = Some(split.feature);
        node.threshold = split.threshold;
        node.left = left;
        node.right = right;

        let child = |node, rows| Pending {
            node,
            depth: p.depth + 1,
            rows,
            split: None,
            hist: None,
        };
        let mut l = child(left, left_rows);
        let mut r = child(right, right_rows);
        if grow_children {
            let left_small = l.rows.len() <= r.rows.len();
            let (small, large) = if left_small { (&mut l, &mut r) } else { (&mut r, &mut l) };
            if let Some(mut hist) = p.hist {
                if self.finder.wants_dense(large.rows.len()) {
                    self.gather(&small.rows);
                    self.finder
                        .subtract(&mut hist, &small.rows, &self.g_buf, &self.h_buf, &self.features, self.data);
                    large.hist = Some(hist);
                } else {
                    self.finder.release(hist);
                }
                if self.finder.wants_dense(small.rows.len()) {
                    self.gather(&small.rows);
                    small.hist =
                        Some(self.finder.build(&small.rows, &self.g_buf, &self.h_buf, &self.features, self.data));
                }
            }
        } else if let Some(hist) = p.hist {
            self.finder.release(hist);
        }
        (l, r)
    }

    fn grow_depth_wise(mut self, rows: Vec<usize>, max_depth: usize) -> Tree {
        let root = self.new_node(&rows);
        let mut frontier = if max_depth > 0 {
            vec![self.pending(root, 0, rows)]
        } else {
            Vec::new()
        };
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for p in frontier {
                match self.find_split(&p) {
                    Some(split) => {
                        let grow = p.depth + 1 < max_depth;
                        let (l, r) = self.apply_split(p, split, grow);
                        if grow {
                            next.push(l);
                            next.push(r);
                        }
                    }
                    None => self.discard(p),
                }
            }
            frontier = next;
        }
        Tree { nodes: self.nodes }
    }

    fn grow_leaf_wise(mut self, rows: Vec<usize>, num_leaves: usize, max_depth: usize) -> Tree {
        let root = self.new_node(&rows);
        let depth_ok = |d: usize| max_depth == 0 || d < max_depth;
        let mut leaves: Vec<Pending> = Vec::new();
        if depth_ok(0) {
            let mut p = self.pending(root, 0, rows);
            p.split = self.find_split(&p);
            if p.split.is_some() {
                leaves.push(p);
            } else {
                self.discard(p);
            }
        }
        let mut n_leaves = 1;
        while n_leaves < num_leaves {
            // highest gain; ties go to the earliest-created node
            let pick = leaves
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.split.map(|s| (i, p.node, s.gain)))
                .fold(None::<(usize, usize, f64)>, |best, cur| match best {
                    Some(b) if b.2 > cur.2 + GAIN_RTOL * b.2.abs() || (b.2 >= cur.2 - GAIN_RTOL * b.2.abs() && b.1 < cur.1) => Some(b),
                    _ => Some(cur),
                });
            let Some((i, _, _)) = pick else { break };
            let p = leaves.swap_remove(i);
            let split = p.split.expect("picked leaf has a split");
            let grow = depth_ok(p.depth + 1);
            let (mut l, mut r) = self.apply_split(p, split, grow);
            n_leaves += 1;
            if grow {
                l.split = self.find_split(&l);
                r.split = self.find_split(&r);
                for child in [l, r] {
                    if child.split.is_some() {
                        leaves.push(child);
                    } else {
                        self.discard(child);
                    }
                }
            }
        }
        for p in leaves {
            self.discard(p);
        }
        Tree { nodes: self.nodes }
    }
}

/// Fit a model on rows of `x` with class ordinals `y` and positive per-row
/// weights.
pub fn train(x: &DenseMatrix, y: &[usize], weights: &[f64], cfg: &GbdtConfig) -> Result<GbdtModel> {
    cfg.validate()?;
    let n = x.n_rows();
    let p = x.n_cols();
    let c = cfg.n_classes;
    if y.len() != n {
        return Err(Error::LengthMismatch(y.len(), n));
    }
    if weights.len() != n {
        return Err(Error::LengthMismatch(weights.len(), n));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("training features must be finite".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidLabel(bad.to_string()));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("sample weights must be positive".into()));
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(Error::DegenerateData);
    }

    let data: Vec<FeatureBins> = (0..p)
        .map(|j| bin_feature(&x.column(j), cfg.split_mode, cfg.max_bins))
        .collect();
    let mut finder = SplitFinder::new(&data, cfg.split_mode == SplitMode::Histogram);
    let params = SplitParams::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let base_score = vec![0.0; c];
    let mut margins = vec![0.0; n * c];
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut probs = vec![0.0; n * c];
    let n_rows_sampled = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols_sampled = ((cfg.colsample * p as f64).round() as usize).clamp(1, p);

    for _ in 0..cfg.n_estimators {
        probs.copy_from_slice(&margins);
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        let mut round = Vec::with_capacity(c);
        for class in 0..c {
            for i in 0..n {
                let pr = probs[i * c + class];
                let target = if y[i] == class { 1.0 } else { 0.0 };
                grad[i] = weights[i] * (pr - target);
                hess[i] = (weights[i] * pr * (1.0 - pr)).max(MIN_HESSIAN);
            }
            let rows: Vec<usize> = if n_rows_sampled == n {
                (0..n).collect()
            } else {
                let mut r = index::sample(&mut rng, n, n_rows_sampled).into_vec();
                r.sort_unstable();
                r
            };
            let features: Vec<usize> = if n_cols_sampled == p {
                (0..p).collect()
            } else {
                let mut f = index::sample(&mut rng, p, n_cols_sampled).into_vec();
                f.sort_unstable();
                f
            };
            let builder = TreeBuilder {
                data: &data,
                grad: &grad,
                hess: &hess,
                features,
                params,
                finder: &mut finder,
                nodes: Vec::new(),
                g_buf: Vec::with_capacity(n),
                h_buf: Vec::with_capacity(n),
            };
            let tree = match cfg.growth {
                Growth::DepthWise => builder.grow_depth_wise(rows, cfg.max_depth),
                Growth::LeafWise => builder.grow_leaf_wise(rows, cfg.num_leaves, cfg.max_depth),
            };
            for i in 0..n {
                margins[i * c + class] += tree.predict(x.row(i));
            }
            round.push(tree);
        }
        trees.push(round);
    }

    Ok(GbdtModel {
        schema_version: MODEL_SCHEMA_VERSION,
        growth: cfg.growth,
        config: cfg.clone(),
        base_score,
        trees,
        feature_names: (0..p).map(|j| format!("f{j}")).collect(),
    })
}
