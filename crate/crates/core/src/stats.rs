//! Small statistics helpers for trace diagnostics.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{LdamError, Result};

/// Least-squares slope with a two-sided confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub lo: f64,
    pub hi: f64,
}

impl SlopeEstimate {
    pub fn contains_zero(&self) -> bool {
        self.lo <= 0.0 && 0.0 <= self.hi
    }
}

/// Slope of `ys` against their index (per sample), estimated from `blocks`
/// block means so autocorrelation within a block does not shrink the interval.
pub fn block_slope_ci(ys: &[f64], blocks: usize, confidence: f64) -> Result<SlopeEstimate> {
    if blocks < 3 || ys.len() < blocks {
        return Err(LdamError::InvalidArgument(format!(
            "need at least 3 blocks and one sample per block, got {blocks} blocks for {} samples",
            ys.len()
        )));
    }
    let per = ys.len() / blocks;
    let pts: Vec<(f64, f64)> = (0..blocks)
        .map(|b| {
            let chunk = &ys[b * per..(b + 1) * per];
            let x = b as f64 * per as f64 + (per as f64 - 1.0) / 2.0;
            (x, chunk.iter().sum::<f64>() / per as f64)
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .map_err(|e| LdamError::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.5 + confidence / 2.0);
    Ok(SlopeEstimate {
        slope,
        lo: slope - t * se,
        hi: slope + t * se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_trends() {
        let flat: Vec<f64> = (0..1000).map(|i| ((i * 37) % 11) as f64).collect();
        assert!(block_slope_ci(&flat, 20, 0.95).unwrap().contains_zero());
        let rising: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01 + ((i * 37) % 11) as f64).collect();
        let s = block_slope_ci(&rising, 20, 0.95).unwrap();
        assert!(!s.contains_zero());
        assert!((s.slope - 0.01).abs() < 2e-3);
        assert!(block_slope_ci(&flat, 2, 0.95).is_err());
    }
}
