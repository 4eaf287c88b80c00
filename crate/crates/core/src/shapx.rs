//! Exact path-dependent TreeSHAP, global importance and elite selection.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::features::{feature_modality, FeatureRegistry};
use crate::gbdt::{GbdtConfig, GbdtModel, Tree};
use crate::matrix::DenseMatrix;

/// Rounds of the auxiliary selector model.
pub const SELECTOR_ROUNDS: usize = 300;
pub const SELECTOR_MAX_DEPTH: usize = 6;
pub const SELECTOR_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_ELITE_K: usize = 250;

/// Fixed configuration of the depth-wise model used to rank features.
pub fn selector_config(seed: u64) -> GbdtConfig {
    GbdtConfig {
        n_estimators: SELECTOR_ROUNDS,
        max_depth: SELECTOR_MAX_DEPTH,
        learning_rate: SELECTOR_LEARNING_RATE,
        seed,
        ..GbdtConfig::depth_wise()
    }
}

/// Attributions `phi[sample][class][feature]` on the margin scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapMatrix {
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub phi: Vec<f64>,
    pub base_values: Vec<f64>,
}

impl ShapMatrix {
    pub fn zeros(n_samples: usize, n_classes: usize, n_features: usize) -> Self {
        Self {
            n_samples,
            n_classes,
            n_features,
            phi: vec![0.0; n_samples * n_classes * n_features],
            base_values: vec![0.0; n_classes],
        }
    }

    fn offset(&self, sample: usize, class: usize) -> usize {
        (sample * self.n_classes + class) * self.n_features
    }

    pub fn row(&self, sample: usize, class: usize) -> &[f64] {
        let o = self.offset(sample, class);
        &self.phi[o..o + self.n_features]
    }

    pub fn row_mut(&mut self, sample: usize, class: usize) -> &mut [f64] {
        let o = self.offset(sample, class);
        &mut self.phi[o..o + self.n_features]
    }

    pub fn get(&self, sample: usize, class: usize, feature: usize) -> f64 {
        self.phi[self.offset(sample, class) + feature]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut [PathElement], depth: usize, zero: f64, one: f64, feature: Option<usize>) {
    path[depth] = PathElement {
        feature,
        zero_fraction: zero,
        one_fraction: one,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].pweight += one * path[i].pweight * (i + 1) as f64 / d1;
        path[i].pweight = zero * path[i].pweight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * d1 / ((i + 1) as f64 * one);
            next_one = tmp - path[i].pweight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].pweight = path[i].pweight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next_one * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].pweight - tmp * zero * (depth - i) as f64 / d1;
        } else {
            total += path[i].pweight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}

struct Recursion<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
}

impl Recursion<'_> {
    /// `buf` holds the parent's path in `buf[..depth]`; this call's path is
    /// written after it.
    fn go(&mut self, node: usize, buf: &mut [PathElement], depth: usize, zero: f64, one: f64, feature: Option<usize>) {
        let (parent, path) = buf.split_at_mut(depth);
        path[..depth].copy_from_slice(parent);
        let mut depth = depth;
        extend_path(path, depth, zero, one, feature);
        let n = &self.tree.nodes[node];
        let Some(f) = n.split_feature else {
            for i in 1..=depth {
                let w = unwound_path_sum(path, depth, i);
                let el = path[i];
                let j = el.feature.expect("non-root path element has a feature");
                self.phi[j] += w * (el.one_fraction - el.zero_fraction) * n.leaf_value;
            }
            return;
        };
        let (hot, cold) = if self.x[f] < n.threshold {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        let cover = n.cover;
        let hot_zero = self.tree.nodes[hot].cover / cover;
        let cold_zero = self.tree.nodes[cold].cover / cover;
        let (mut inc_zero, mut inc_one) = (1.0, 1.0);
        if let Some(k) = (1..=depth).find(|&k| path[k].feature == Some(f)) {
            inc_zero = path[k].zero_fraction;
            inc_one = path[k].one_fraction;
            unwind_path(path, depth, k);
            depth -= 1;
        }
        let child_buf = &mut path[..];
        // children copy `path[..depth + 1]` into the space right after it
        self.go_child(hot, child_buf, depth + 1, hot_zero * inc_zero, inc_one, f);
        self.go_child(cold, child_buf, depth + 1, cold_zero * inc_zero, 0.0, f);
    }

    fn go_child(&mut self, node: usize, buf: &mut [PathElement], len: usize, zero: f64, one: f64, f: usize) {
        self.go(node, buf, len, zero, one, Some(f));
    }
}

/// Add the SHAP values of one tree for row `x` into `phi`.
pub fn tree_shap_into(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    let max_depth = tree.depth() + 2;
    let mut buf = vec![PathElement::default(); (max_depth + 1) * (max_depth + 2) / 2 + max_depth + 2];
    let mut rec = Recursion { tree, x, phi };
    rec.go(0, &mut buf, 0, 1.0, 1.0, None);
}

/// SHAP values of every class of `model` on every row of `x`.
pub fn tree_shap(model: &GbdtModel, x: &DenseMatrix) -> Result<ShapMatrix> {
    if x.n_cols() != model.n_features() {
        return Err(Error::FeatureMismatch(format!(
            "model expects {} features, input has {}",
            model.n_features(),
            x.n_cols()
        )));
    }
    let c = model.n_classes();
    let p = model.n_features();
    let mut out = ShapMatrix::zeros(x.n_rows(), c, p);
    for class in 0..c {
        out.base_values[class] =
            model.base_score[class] + model.class_trees(class).map(Tree::expected_value).sum::<f64>();
    }
    let max_depth = model
        .trees
        .iter()
        .flatten()
        .map(Tree::depth)
        .max()
        .unwrap_or(0)
        + 2;
    let mut buf = vec![PathElement::default(); (max_depth + 1) * (max_depth + 2) / 2 + max_depth + 2];
    for (i, row) in x.rows().enumerate() {
        for class in 0..c {
            let phi = out.row_mut(i, class);
            for tree in model.class_trees(class) {
                if tree.nodes.len() > 1 {
                    let mut rec = Recursion { tree, x: row, phi };
                    rec.go(0, &mut buf, 0, 1.0, 1.0, None);
                }
            }
        }
    }
    Ok(out)
}

/// Global importance `I_j = (1/N) Σ_k Σ_c |phi[k,c,j]|` with a stable ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub names: Vec<String>,
    pub importance: Vec<f64>,
    /// Feature indices by descending importance, ties by ascending name.
    pub ranking: Vec<usize>,
}

impl ImportanceVector {
    pub fn new(names: Vec<String>, importance: Vec<f64>) -> Result<Self> {
        if names.len() != importance.len() {
            return Err(Error::LengthMismatch(names.len(), importance.len()));
        }
        let mut ranking: Vec<usize> = (0..names.len()).collect();
        ranking.sort_by(|&a, &b| {
            importance[b]
                .partial_cmp(&importance[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| names[a].cmp(&names[b]))
        });
        Ok(Self {
            names,
            importance,
            ranking,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `rank,feature,importance,modality` rows in ranking order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,feature,importance,modality\n");
        for (rank, &j) in self.ranking.iter().enumerate() {
            let modality = feature_modality(&self.names[j]).map_or("", |m| m.prefix());
            let _ = writeln!(out, "{},{},{:?},{}", rank + 1, self.names[j], self.importance[j], modality);
        }
        out
    }
}

pub fn aggregate_importance(shap: &ShapMatrix, names: &[String]) -> Result<ImportanceVector> {
    if names.len() != shap.n_features {
        return Err(Error::LengthMismatch(names.len(), shap.n_features));
    }
    if shap.n_samples == 0 {
        return Err(Error::InvalidArgument("no SHAP rows to aggregate".into()));
    }
    let mut total = vec![0.0; shap.n_features];
    for k in 0..shap.n_samples {
        for c in 0..shap.n_classes {
            for (t, v) in total.iter_mut().zip(shap.row(k, c)) {
                *t += v.abs();
            }
        }
    }
    let n = shap.n_samples as f64;
    ImportanceVector::new(names.to_vec(), total.into_iter().map(|t| t / n).collect())
}

/// Names of the `k` most important features (all of them when `k >= p`).
pub fn select_elite(importance: &ImportanceVector, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::InvalidParam {
            name: "elite_k".into(),
            reason: "must be >= 1".into(),
        });
    }
    Ok(importance
        .ranking
        .iter()
        .take(k)
        .map(|&j| importance.names[j].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityShares {
    pub eeg: f64,
    pub emg: f64,
    pub gsr: f64,
}

impl ModalityShares {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Eeg => self.eeg,
            Modality::Emg => self.emg,
            Modality::Gsr => self.gsr,
        }
    }
}

/// Fraction of total importance per modality. All zeros when the total is 0.
pub fn modality_decomposition(importance: &ImportanceVector, registry: &FeatureRegistry) -> Result<ModalityShares> {
    if registry.len() != importance.len() {
        return Err(Error::LengthMismatch(registry.len(), importance.len()));
    }
    let mut sums = [0.0f64; 3];
    for (name, &v) in registry.names().iter().zip(&importance.importance) {
        let m = feature_modality(name)
            .ok_or_else(|| Error::InvalidArgument(format!("feature {name:?} has no modality prefix")))?;
        sums[m as usize] += v;
    }
    let total: f64 = sums.iter().sum();
    if total == 0.0 {
        return Ok(ModalityShares {
            eeg: 0.0,
            emg: 0.0,
            gsr: 0.0,
        });
    }
    Ok(ModalityShares {
        eeg: sums[0] / total,
        emg: sums[1] / total,
        gsr: sums[2] / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::TreeNode;

    fn stump(threshold: f64, lo: f64, hi: f64) -> Tree {
        Tree::from_nodes(vec![
            TreeNode {
                split_feature: Some(0),
                threshold,
                left: 1,
                right: 2,
                leaf_value: 0.0,
                cover: 4.0,
                n_samples: 4,
            },
            TreeNode::leaf(lo, 1.0, 1),
            TreeNode::leaf(hi, 3.0, 3),
        ])
        .unwrap()
    }

    #[test]
    fn stump_attribution_is_margin_minus_expectation() {
        let t = stump(0.5, -1.0, 2.0);
        let mut phi = vec![0.0; 3];
        tree_shap_into(&t, &[0.0, 9.0, 9.0], &mut phi);
        let expected = t.expected_value();
        assert!((expected - 1.25).abs() < 1e-15);
        assert!((phi[0] - (-1.0 - expected)).abs() < 1e-12);
        assert_eq!(phi[1], 0.0);
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn aggregate_small_example() {
        let mut s = ShapMatrix::zeros(1, 1, 2);
        s.row_mut(0, 0).copy_from_slice(&[-2.0, 3.0]);
        let imp = aggregate_importance(&s, &["a".into(), "b".into()]).unwrap();
        assert_eq!(imp.importance, vec![2.0, 3.0]);
        assert_eq!(imp.ranking, vec![1, 0]);
    }

    #[test]
    fn ties_break_by_name() {
        let imp = ImportanceVector::new(vec!["zeta".into(), "alpha".into(), "mid".into()], vec![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(select_elite(&imp, 3).unwrap(), vec!["mid", "alpha", "zeta"]);
        assert_eq!(select_elite(&imp, 10).unwrap().len(), 3);
        assert!(select_elite(&imp, 0).is_err());
    }

    #[test]
    fn uniform_importance_shares_follow_counts() {
        let reg = FeatureRegistry::for_layout(&crate::dataset::ModalityLayout::canonical());
        let imp = ImportanceVector::new(reg.names().to_vec(), vec![1.0; reg.len()]).unwrap();
        let s = modality_decomposition(&imp, &reg).unwrap();
        assert!((s.eeg - 473.0 / 503.0).abs() < 1e-12);
        assert!((s.emg - 25.0 / 503.0).abs() < 1e-12);
        assert!((s.gsr - 5.0 / 503.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let imp = ImportanceVector::new(vec!["EEG_Cz_alpha_power".into()], vec![0.5]).unwrap();
        let csv = imp.to_csv();
        assert_eq!(csv, "rank,feature,importance,modality\n1,EEG_Cz_alpha_power,0.5,EEG\n");
    }
}
