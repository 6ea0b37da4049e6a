//! Quantile binarization of continuous features.
//!
//! The rule layer consumes binary inputs `x_i ∈ {0,1}`. Each binary column
//! encodes one threshold comparison `feature ≤ t` where the thresholds are
//! empirical quantiles fitted on training data only. Negated comparisons
//! (`feature > t`) are not given their own columns; they are expressed
//! downstream through negative rule weights.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BinarizeError {
    #[error("feature {index} ({name}) has a single distinct value and cannot be thresholded")]
    ConstantFeature { index: usize, name: String },
    #[error("non-finite value at row {row}, feature {feature}")]
    NonFinite { row: usize, feature: usize },
    #[error("input has {got} features but the scheme was fitted on {expected}")]
    FeatureCountMismatch { expected: usize, got: usize },
    #[error("binary column {column} out of range (width {width})")]
    ColumnOutOfRange { column: usize, width: usize },
    #[error("need at least 2 samples to fit thresholds, got {0}")]
    TooFewSamples(usize),
    #[error("thresholds per feature must be at least 1")]
    ZeroThresholds,
}

/// Name and display unit of one continuous feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    /// Display unit, empty when dimensionless.
    #[serde(default)]
    pub unit: String,
}

impl FeatureMeta {
    pub fn new(name: &str, unit: &str) -> Self {
        Self {
            name: name.to_string(),
            unit: unit.to_string(),
        }
    }
}

/// Comparison operator of a symbolic condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionOp {
    /// `feature ≤ threshold` (inclusive).
    Leq,
    /// `feature > threshold`.
    Gt,
}

/// Whether a binary column enters a rule as-is or negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// One threshold comparison on a named continuous feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature_index: usize,
    pub operator: ConditionOp,
    pub threshold: f64,
}

impl Condition {
    /// Evaluates the condition against a continuous feature vector.
    pub fn holds(&self, features: &[f64]) -> bool {
        let v = features[self.feature_index];
        match self.operator {
            ConditionOp::Leq => v <= self.threshold,
            ConditionOp::Gt => v > self.threshold,
        }
    }

    /// Renders the condition with the scheme's feature names and units,
    /// e.g. `range ≤ 0.3 m`. Thresholds print in shortest round-trip form so
    /// the text can be parsed back without precision loss.
    pub fn render(&self, scheme: &BinarizationScheme) -> String {
        let meta = &scheme.features[self.feature_index];
        let op = match self.operator {
            ConditionOp::Leq => "≤",
            ConditionOp::Gt => ">",
        };
        if meta.unit.is_empty() {
            format!("{} {} {}", meta.name, op, self.threshold)
        } else {
            format!("{} {} {} {}", meta.name, op, self.threshold, meta.unit)
        }
    }

    /// Parses text produced by [`Condition::render`] back into a condition.
    /// Used to check that rendered rules mean what the binary data says.
    pub fn parse(text: &str, scheme: &BinarizationScheme) -> Option<Condition> {
        let (op, parts): (ConditionOp, Vec<&str>) = if text.contains('≤') {
            (ConditionOp::Leq, text.splitn(2, '≤').collect())
        } else if text.contains('>') {
            (ConditionOp::Gt, text.splitn(2, '>').collect())
        } else {
            return None;
        };
        let name = parts[0].trim();
        let feature_index = scheme.features.iter().position(|m| m.name == name)?;
        let rhs = parts[1].trim();
        let value_text = match rhs.split_whitespace().next() {
            Some(v) => v,
            None => return None,
        };
        let threshold: f64 = value_text.parse().ok()?;
        Some(Condition {
            feature_index,
            operator: op,
            threshold,
        })
    }
}

impl fmt::Display for ConditionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionOp::Leq => write!(f, "≤"),
            ConditionOp::Gt => write!(f, ">"),
        }
    }
}

/// Frozen per-feature quantile thresholds plus the derived column table.
///
/// Column `offset[f] + j` encodes `feature f ≤ thresholds[f][j]`. Thresholds
/// are strictly increasing within a feature; the total binary width is the
/// sum of per-feature threshold counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizationScheme {
    pub features: Vec<FeatureMeta>,
    pub thresholds: Vec<Vec<f64>>,
}

impl BinarizationScheme {
    /// Fits per-feature thresholds at the empirical quantile levels
    /// `k/(Q+1), k = 1..Q`, using linear interpolation between order
    /// statistics. Duplicate quantiles collapse into one column.
    pub fn fit(
        features: ArrayView2<'_, f64>,
        thresholds_per_feature: usize,
        meta: &[FeatureMeta],
    ) -> Result<Self, BinarizeError> {
        let (m, f) = features.dim();
        if thresholds_per_feature == 0 {
            return Err(BinarizeError::ZeroThresholds);
        }
        if m < 2 {
            return Err(BinarizeError::TooFewSamples(m));
        }
        assert_eq!(meta.len(), f, "feature metadata length must match columns");

        for ((row, feature), &v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(BinarizeError::NonFinite { row, feature });
            }
        }

        let mut all = Vec::with_capacity(f);
        for j in 0..f {
            let mut col: Vec<f64> = features.column(j).to_vec();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if col.first() == col.last() {
                return Err(BinarizeError::ConstantFeature {
                    index: j,
                    name: meta[j].name.clone(),
                });
            }
            let mut ts = Vec::with_capacity(thresholds_per_feature);
            for k in 1..=thresholds_per_feature {
                let q = k as f64 / (thresholds_per_feature as f64 + 1.0);
                ts.push(quantile_sorted(&col, q));
            }
            ts.dedup();
            all.push(ts);
        }

        Ok(Self {
            features: meta.to_vec(),
            thresholds: all,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    /// Total binary width D.
    pub fn width(&self) -> usize {
        self.thresholds.iter().map(Vec::len).sum()
    }

    /// First binary column belonging to feature `f`.
    pub fn offset(&self, f: usize) -> usize {
        self.thresholds[..f].iter().map(Vec::len).sum()
    }

    /// Maps a binary column back to its `(feature_index, threshold)` pair.
    pub fn column(&self, column: usize) -> Result<(usize, f64), BinarizeError> {
        let mut c = column;
        for (f, ts) in self.thresholds.iter().enumerate() {
            if c < ts.len() {
                return Ok((f, ts[c]));
            }
            c -= ts.len();
        }
        Err(BinarizeError::ColumnOutOfRange {
            column,
            width: self.width(),
        })
    }

    /// The symbolic condition a binary column stands for, with the stated
    /// polarity. Positive keeps the column's `≤`; negative is its negation.
    pub fn render_condition(
        &self,
        column: usize,
        polarity: Polarity,
    ) -> Result<Condition, BinarizeError> {
        let (feature_index, threshold) = self.column(column)?;
        let operator = match polarity {
            Polarity::Positive => ConditionOp::Leq,
            Polarity::Negative => ConditionOp::Gt,
        };
        Ok(Condition {
            feature_index,
            operator,
            threshold,
        })
    }

    /// Binarizes a feature matrix: `X[m, column(f, t)] = 1 iff features[m, f] ≤ t`.
    pub fn binarize(&self, features: ArrayView2<'_, f64>) -> Result<Array2<u8>, BinarizeError> {
        let (m, f) = features.dim();
        if f != self.feature_count() {
            return Err(BinarizeError::FeatureCountMismatch {
                expected: self.feature_count(),
                got: f,
            });
        }
        let d = self.width();
        let mut x = Array2::<u8>::zeros((m, d));
        for row in 0..m {
            let mut c = 0;
            for (j, ts) in self.thresholds.iter().enumerate() {
                let v = features[(row, j)];
                for &t in ts {
                    x[(row, c)] = u8::from(v <= t);
                    c += 1;
                }
            }
        }
        Ok(x)
    }

    /// Binarizes a single feature vector.
    pub fn binarize_row(&self, features: &[f64]) -> Result<Vec<u8>, BinarizeError> {
        if features.len() != self.feature_count() {
            return Err(BinarizeError::FeatureCountMismatch {
                expected: self.feature_count(),
                got: features.len(),
            });
        }
        let mut out = Vec::with_capacity(self.width());
        for (j, ts) in self.thresholds.iter().enumerate() {
            for &t in ts {
                out.push(u8::from(features[j] <= t));
            }
        }
        Ok(out)
    }
}

/// Binary design matrix with labels and the scheme that produced it.
#[derive(Debug, Clone)]
pub struct BinarizedDataset {
    /// `[M × D]` matrix of 0/1 values.
    pub x: Array2<u8>,
    /// Labels in `[0, C)`.
    pub y: Vec<usize>,
    pub class_names: Vec<String>,
    pub scheme: BinarizationScheme,
}

impl BinarizedDataset {
    pub fn new(
        features: ArrayView2<'_, f64>,
        y: Vec<usize>,
        class_names: Vec<String>,
        scheme: BinarizationScheme,
    ) -> Result<Self, BinarizeError> {
        let x = scheme.binarize(features)?;
        assert_eq!(x.nrows(), y.len());
        Ok(Self {
            x,
            y,
            class_names,
            scheme,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

/// Linear-interpolation quantile of a sorted slice at level `q ∈ [0,1]`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn meta(n: usize) -> Vec<FeatureMeta> {
        (0..n).map(|i| FeatureMeta::new(&format!("f{i}"), "")).collect()
    }

    #[test]
    fn median_boundary_of_four_values() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let s = BinarizationScheme::fit(x.view(), 1, &meta(1)).unwrap();
        assert_eq!(s.thresholds[0], vec![2.5]);
    }

    #[test]
    fn quartiles_of_two_point_range() {
        let x = array![[0.0], [10.0]];
        let s = BinarizationScheme::fit(x.view(), 3, &meta(1)).unwrap();
        assert_eq!(s.thresholds[0], vec![2.5, 5.0, 7.5]);
    }

    #[test]
    fn constant_feature_rejected_with_index() {
        let x = array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let err = BinarizationScheme::fit(x.view(), 2, &meta(2)).unwrap_err();
        assert_eq!(
            err,
            BinarizeError::ConstantFeature {
                index: 0,
                name: "f0".into()
            }
        );
    }

    #[test]
    fn non_finite_rejected() {
        let x = array![[1.0], [f64::NAN], [3.0]];
        let err = BinarizationScheme::fit(x.view(), 1, &meta(1)).unwrap_err();
        assert_eq!(err, BinarizeError::NonFinite { row: 1, feature: 0 });
    }

    #[test]
    fn boundary_value_is_inclusive() {
        let s = BinarizationScheme {
            features: meta(1),
            thresholds: vec![vec![0.5]],
        };
        let x = array![[0.5], [0.7]];
        let b = s.binarize(x.view()).unwrap();
        assert_eq!(b[(0, 0)], 1); // 0.5 <= 0.5
        assert_eq!(b[(1, 0)], 0); // 0.7 > 0.5
    }

    #[test]
    fn threshold_group_pattern() {
        let s = BinarizationScheme {
            features: meta(1),
            thresholds: vec![vec![1.0, 2.0, 3.0]],
        };
        let b = s.binarize(array![[1.5]].view()).unwrap();
        assert_eq!(b.row(0).to_vec(), vec![0, 1, 1]);
    }

    #[test]
    fn rendering_positive_and_negative() {
        let s = BinarizationScheme {
            features: vec![FeatureMeta::new("range", "m"), FeatureMeta::new("azimuth", "deg")],
            thresholds: vec![vec![0.3], vec![-10.0]],
        };
        let pos = s.render_condition(0, Polarity::Positive).unwrap();
        assert_eq!(pos.render(&s), "range ≤ 0.3 m");
        let neg = s.render_condition(0, Polarity::Negative).unwrap();
        assert_eq!(neg.render(&s), "range > 0.3 m");
        let az = s.render_condition(1, Polarity::Negative).unwrap();
        assert_eq!(az.render(&s), "azimuth > -10 deg");
    }

    #[test]
    fn column_out_of_range() {
        let s = BinarizationScheme {
            features: meta(1),
            thresholds: vec![vec![0.5]],
        };
        assert!(matches!(
            s.render_condition(1, Polarity::Positive),
            Err(BinarizeError::ColumnOutOfRange { column: 1, width: 1 })
        ));
    }

    #[test]
    fn duplicate_quantiles_merge() {
        // Heavily repeated value makes several quantile levels coincide.
        let vals: Vec<f64> = std::iter::repeat(2.0).take(30).chain([1.0, 3.0]).collect();
        let x = Array2::from_shape_vec((32, 1), vals).unwrap();
        let s = BinarizationScheme::fit(x.view(), 7, &meta(1)).unwrap();
        for w in s.thresholds[0].windows(2) {
            assert!(w[0] < w[1], "thresholds must be strictly increasing");
        }
    }

    #[test]
    fn binarize_rejects_width_mismatch() {
        let s = BinarizationScheme {
            features: meta(2),
            thresholds: vec![vec![0.5], vec![0.5]],
        };
        let x = array![[0.1]];
        assert!(matches!(
            s.binarize(x.view()),
            Err(BinarizeError::FeatureCountMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn refitting_and_rebinarizing_is_bit_identical() {
        let mut vals = Vec::new();
        let mut state = 0x2545F4914F6CDD1Du64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push((state >> 11) as f64 / (1u64 << 53) as f64);
        }
        let x = Array2::from_shape_vec((50, 4), vals).unwrap();
        let s1 = BinarizationScheme::fit(x.view(), 8, &meta(4)).unwrap();
        let s2 = BinarizationScheme::fit(x.view(), 8, &meta(4)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.binarize(x.view()).unwrap(), s2.binarize(x.view()).unwrap());
    }
}
