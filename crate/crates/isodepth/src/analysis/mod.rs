//! Measurement procedures: relative perplexity, feed-forward rank
//! profiles, step-latency regression, and report generation.

mod latency;
mod rank;
mod report;

pub use latency::{bench_latency, BenchConfig, BenchReport, DepthTiming, LatencyFit};
pub use rank::{rank_profile, FfMatrix, SingularProfile};
pub use report::{report, ReportSummary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("perplexities must be positive, got {0}")]
    NonPositivePerplexity(f64),
    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("numerics failure: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("model failure: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("training failure: {0}")]
    Train(#[from] crate::training::TrainError),
    #[error("another latency benchmark holds the lock at {0}")]
    BenchLocked(String),
    #[error("latency fit needs at least 3 depths, got {0} (raw times reported)")]
    TooFewDepths(usize),
    #[error("prediction at depth {depth} outside measured range {min}..={max}")]
    Extrapolation {
        depth: usize,
        min: usize,
        max: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("profile invariant violated: {0}")]
    ProfileInvariant(String),
}

/// Perplexities normalized by the best (lowest) value in the class; the
/// best model maps to exactly 1.
pub fn relative_perplexity(
    class_results: &[(usize, f64)],
) -> Result<Vec<(usize, f64)>, AnalysisError> {
    if class_results.is_empty() {
        return Err(AnalysisError::Empty("relative_perplexity".into()));
    }
    let mut best = f64::INFINITY;
    for &(_, ppl) in class_results {
        if ppl <= 0.0 || !ppl.is_finite() {
            return Err(AnalysisError::NonPositivePerplexity(ppl));
        }
        best = best.min(ppl);
    }
    Ok(class_results
        .iter()
        .map(|&(n, ppl)| (n, ppl / best))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_perplexity_paper_ratios() {
        // Size-class extremes from the result table fixtures.
        let r41 = relative_perplexity(&[(1, 45.7), (5, 28.8)]).unwrap();
        assert!((r41[0].1 - 1.59).abs() < 0.03, "{}", r41[0].1);
        assert_eq!(r41[1].1, 1.0);

        let r374 = relative_perplexity(&[(1, 28.4), (24, 14.4)]).unwrap();
        assert!((r374[0].1 - 1.99).abs() < 0.03, "{}", r374[0].1);
    }

    #[test]
    fn single_entry_maps_to_one() {
        let r = relative_perplexity(&[(3, 17.0)]).unwrap();
        assert_eq!(r, vec![(3, 1.0)]);
    }

    #[test]
    fn scale_invariance() {
        let base = [(1usize, 40.0), (2, 20.0), (4, 25.0)];
        let scaled: Vec<(usize, f64)> = base.iter().map(|&(n, p)| (n, p * 7.3)).collect();
        let a = relative_perplexity(&base).unwrap();
        let b = relative_perplexity(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(relative_perplexity(&[]).is_err());
        assert!(relative_perplexity(&[(1, 0.0)]).is_err());
        assert!(relative_perplexity(&[(1, -3.0)]).is_err());
    }
}
