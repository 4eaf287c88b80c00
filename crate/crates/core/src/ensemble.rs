//! Weighted soft voting over a depth-wise and a leaf-wise member.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{argmax, GbdtModel};
use crate::matrix::DenseMatrix;

/// Reference blend weight, available as a preset.
pub const REFERENCE_ALPHA: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub alpha: f64,
    pub member_a: GbdtModel,
    pub member_b: GbdtModel,
}

impl EnsembleModel {
    pub fn new(member_a: GbdtModel, member_b: GbdtModel, alpha: f64) -> Result<Self> {
        let ens = Self {
            alpha,
            member_a,
            member_b,
        };
        ens.validate()?;
        Ok(ens)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParam {
                name: "alpha".into(),
                reason: format!("must be in [0, 1], got {}", self.alpha),
            });
        }
        if self.member_a.feature_names != self.member_b.feature_names {
            return Err(Error::RegistryMismatch("members use different features".into()));
        }
        if self.member_a.n_classes() != self.member_b.n_classes() {
            return Err(Error::RegistryMismatch("members use different class sets".into()));
        }
        Ok(())
    }

    pub fn feature_names(&self) -> &[String] {
        &self.member_a.feature_names
    }

    pub fn predict_proba(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.n_cols() != self.member_a.n_features() {
            return Err(Error::RegistryMismatch(format!(
                "ensemble expects {} features, input has {}",
                self.member_a.n_features(),
                x.n_cols()
            )));
        }
        let pa = self.member_a.predict_proba(x)?;
        let pb = self.member_b.predict_proba(x)?;
        blend(&pa, &pb, self.alpha)
    }

    /// Argmax of the blended probabilities; ties go to the lowest ordinal.
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(predict_from_proba(&self.predict_proba(x)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "alpha": self.alpha,
            "member_a": self.member_a.to_json_value()?,
            "member_b": self.member_b.to_json_value()?,
        }))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let alpha = value
            .get("alpha")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::InvalidModel("ensemble is missing alpha".into()))?;
        let mut member = |key: &str| -> Result<GbdtModel> {
            let v = value
                .get_mut(key)
                .map(serde_json::Value::take)
                .ok_or_else(|| Error::InvalidModel(format!("ensemble is missing {key}")))?;
            GbdtModel::from_json_value(v)
        };
        let a = member("member_a")?;
        let b = member("member_b")?;
        Self::new(a, b, alpha)
    }
}

/// `alpha * a + (1 - alpha) * b` elementwise.
pub fn blend(a: &DenseMatrix, b: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    if a.n_rows() != b.n_rows() || a.n_cols() != b.n_cols() {
        return Err(Error::RegistryMismatch(format!(
            "probability shapes differ: {}x{} vs {}x{}",
            a.n_rows(),
            a.n_cols(),
            b.n_rows(),
            b.n_cols()
        )));
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&pa, &pb)| alpha * pa + (1.0 - alpha) * pb)
        .collect();
    DenseMatrix::from_vec(a.n_rows(), a.n_cols(), data)
}

pub fn predict_from_proba(p: &DenseMatrix) -> Vec<usize> {
    p.rows().map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_alpha_example() {
        let a = DenseMatrix::from_rows(&[[0.6, 0.4, 0.0, 0.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[0.2, 0.8, 0.0, 0.0]]).unwrap();
        let p = blend(&a, &b, REFERENCE_ALPHA).unwrap();
        let expect = [0.34, 0.66, 0.0, 0.0];
        for (x, e) in p.row(0).iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
        assert_eq!(blend(&a, &b, 1.0).unwrap(), a);
        assert_eq!(blend(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn argmax_and_ties() {
        let p = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.25; 4]]).unwrap();
        assert_eq!(predict_from_proba(&p), vec![3, 0]);
    }
}
