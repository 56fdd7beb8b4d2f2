//! Rank analysis of the feed-forward affine transforms: ordered singular
//! values normalized by their l1 norm, accumulated into a profile of how
//! much of the transform the best rank-i approximation captures.

use serde::{Deserialize, Serialize};

use crate::numerics::singular_values;
use crate::training::Checkpoint;

use super::AnalysisError;

/// Which feed-forward matrix to analyze. The gated block has two input
/// projections; the plain input projection (`wi_0`) is the default
/// analysis target, the activated one is also exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfMatrix {
    /// `wi_0`, `d_model x d_ff` (the gate path).
    FfInput,
    /// `wi_1`, `d_model x d_ff` (the activated path).
    FfInputActivated,
    /// `wo`, `d_ff x d_model`.
    FfOutput,
}

impl FfMatrix {
    pub fn parse(s: &str) -> Option<FfMatrix> {
        match s {
            "ff_input" => Some(FfMatrix::FfInput),
            "ff_input_activated" => Some(FfMatrix::FfInputActivated),
            "ff_output" => Some(FfMatrix::FfOutput),
            _ => None,
        }
    }

    fn tensor_name(&self) -> &'static str {
        match self {
            FfMatrix::FfInput => "ff.wi_0",
            FfMatrix::FfInputActivated => "ff.wi_1",
            FfMatrix::FfOutput => "ff.wo",
        }
    }
}

/// Cumulative l1-normalized singular-value curve of one matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularProfile {
    pub matrix_path: String,
    pub singular_values: Vec<f64>,
    /// `c_i = sum_{j<=i} sigma_j / sum_j sigma_j`.
    pub cumulative: Vec<f64>,
}

/// Singular values at or below this fraction of the largest are treated
/// as numerically zero.
pub const RANK_ZERO_THRESHOLD: f64 = 1e-10;

impl SingularProfile {
    pub fn from_singular_values(matrix_path: &str, s: Vec<f64>) -> SingularProfile {
        let total: f64 = s.iter().sum();
        let mut cumulative = Vec::with_capacity(s.len());
        let mut acc = 0.0;
        for &v in &s {
            acc += v;
            cumulative.push(if total > 0.0 { acc / total } else { 0.0 });
        }
        SingularProfile {
            matrix_path: matrix_path.to_string(),
            singular_values: s,
            cumulative,
        }
    }

    /// Checks the profile invariants: nondecreasing, terminal value 1
    /// (within 1e-9) and concavity (increments nonincreasing).
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let c = &self.cumulative;
        if c.is_empty() {
            return Err(AnalysisError::ProfileInvariant("empty profile".into()));
        }
        for w in c.windows(2) {
            if w[1] < w[0] - 1e-12 {
                return Err(AnalysisError::ProfileInvariant(format!(
                    "not nondecreasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let last = *c.last().unwrap();
        if (last - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::ProfileInvariant(format!(
                "terminal value {last} != 1"
            )));
        }
        let mut prev_inc = f64::INFINITY;
        for (i, w) in c.windows(2).enumerate() {
            let inc = w[1] - w[0];
            if inc > prev_inc + 1e-12 {
                return Err(AnalysisError::ProfileInvariant(format!(
                    "not concave at index {}: increment {} after {}",
                    i + 1,
                    inc,
                    prev_inc
                )));
            }
            prev_inc = inc;
        }
        Ok(())
    }

    /// Number of singular values above `RANK_ZERO_THRESHOLD * sigma_1`.
    pub fn numeric_rank(&self) -> usize {
        let Some(&top) = self.singular_values.first() else {
            return 0;
        };
        self.singular_values
            .iter()
            .filter(|&&v| v > RANK_ZERO_THRESHOLD * top)
            .count()
    }
}

/// Profile of the selected feed-forward matrix of one layer.
pub fn rank_profile(
    ckpt: &Checkpoint,
    which: FfMatrix,
    layer: usize,
) -> Result<SingularProfile, AnalysisError> {
    let n_layers = ckpt.header.shape.n_layers;
    if layer >= n_layers {
        return Err(AnalysisError::LayerOutOfRange { layer, n_layers });
    }
    let path = format!("layer.{layer}.{}", which.tensor_name());
    let param = ckpt
        .params
        .get(&path)
        .ok_or_else(|| AnalysisError::Empty(format!("tensor {path} missing")))?;
    let (rows, cols) = (param.shape[0], param.shape[1]);
    let s = singular_values(&param.data, rows, cols)?;
    Ok(SingularProfile::from_singular_values(&path, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_profile_is_linear() {
        // Equal singular values give the y = x reference line.
        let p = SingularProfile::from_singular_values("id", vec![1.0; 8]);
        p.validate().unwrap();
        for (i, c) in p.cumulative.iter().enumerate() {
            let expected = (i + 1) as f64 / 8.0;
            assert!((c - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_profile_saturates_immediately() {
        let p = SingularProfile::from_singular_values("r1", vec![5.0, 0.0, 0.0]);
        p.validate().unwrap();
        assert_eq!(p.cumulative[0], 1.0);
        assert_eq!(p.numeric_rank(), 1);
    }

    #[test]
    fn validate_rejects_badly_ordered_values() {
        // Ascending singular values produce a convex curve.
        let p = SingularProfile::from_singular_values("bad", vec![1.0, 2.0, 4.0]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn layer_bound_checked() {
        use crate::budget::ModelShape;
        use crate::model::{Activation, TransformerModel};
        use crate::training::{load_checkpoint, save_checkpoint};

        let shape = ModelShape {
            n_layers: 2,
            d_model: 8,
            d_attn: 8,
            d_ff: 4,
            n_heads: 2,
            n_vocab: 11,
            n_ctx: 8,
        };
        let model = TransformerModel::init(shape, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &shape, Activation::Gelu, &model.params, 0, 1, 1.0, "fp").unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        assert!(matches!(
            rank_profile(&ckpt, FfMatrix::FfInput, 2),
            Err(AnalysisError::LayerOutOfRange { .. })
        ));
        // d_ff < d_model: profile has exactly d_ff entries and saturates.
        let p = rank_profile(&ckpt, FfMatrix::FfInput, 0).unwrap();
        assert_eq!(p.singular_values.len(), 4);
        p.validate().unwrap();
        assert!(p.numeric_rank() <= 4);
    }
}
