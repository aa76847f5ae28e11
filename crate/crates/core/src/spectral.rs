//! Spectral diagnostics of weight updates: stable rank, singular value
//! entropy, normalized spectra, and layer-wise aggregation.
//!
//! Entropies are in nats. A zero update has no spectrum to normalize, so
//! every metric refuses it with [`Error::ZeroUpdate`] rather than reporting 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, spectral_norm, Matrix};

/// Updates with a smaller Frobenius norm are treated as zero.
pub const ZERO_UPDATE_NORM: f64 = 1e-14;
/// Singular values above `RANK_THRESHOLD · σ₁` count towards numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Probabilities below this contribute nothing (`0·log 0 = 0`).
const MIN_PROBABILITY: f64 = 1e-300;

fn ensure_nonzero(dw: &Matrix) -> Result<()> {
    let norm = dw.frobenius_norm();
    if norm > ZERO_UPDATE_NORM {
        Ok(())
    } else {
        Err(Error::ZeroUpdate { norm })
    }
}

/// `‖ΔW‖_F² / ‖ΔW‖₂²`.
pub fn stable_rank(dw: &Matrix) -> Result<f64> {
    ensure_nonzero(dw)?;
    let fro = dw.frobenius_norm();
    let spec = spectral_norm(dw);
    Ok((fro * fro) / (spec * spec))
}

/// Shannon entropy of `p_i = σ_i² / Σσ_j²` over the singular values of `dw`.
pub fn svd_entropy(dw: &Matrix) -> Result<f64> {
    ensure_nonzero(dw)?;
    entropy_of_spectrum(&singular_values(dw)?)
}

/// `σ_i / σ₁`, non-increasing and starting at 1.
pub fn normalized_spectrum(dw: &Matrix) -> Result<Vec<f64>> {
    ensure_nonzero(dw)?;
    let sigma = singular_values(dw)?;
    let top = sigma[0];
    Ok(sigma.into_iter().map(|s| s / top).collect())
}

/// Entropy (nats) of the squared-normalized distribution of a raw spectrum.
pub fn entropy_of_spectrum(sigma: &[f64]) -> Result<f64> {
    entropy_of_spectrum_base(sigma, std::f64::consts::E)
}

/// Same as [`entropy_of_spectrum`] with logarithms in an arbitrary base.
pub fn entropy_of_spectrum_base(sigma: &[f64], base: f64) -> Result<f64> {
    if !(base > 0.0 && base != 1.0 && base.is_finite()) {
        return Err(Error::InvalidParameter(format!("log base {base}")));
    }
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "spectrum entries must be finite and non-negative, got {bad}"
        )));
    }
    // Normalize by the largest value first so squares cannot overflow.
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Err(Error::ZeroUpdate { norm: 0.0 });
    }
    let energy: f64 = sigma.iter().map(|s| (s / top).powi(2)).sum();
    let ln_base = base.ln();
    let h = sigma
        .iter()
        .map(|s| (s / top).powi(2) / energy)
        .filter(|&p| p >= MIN_PROBABILITY)
        .map(|p| -p * p.ln() / ln_base)
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Count of singular values above `RANK_THRESHOLD · σ₁`.
pub fn numerical_rank(sigma: &[f64]) -> usize {
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > RANK_THRESHOLD * top).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub layer_name: String,
    /// `None` when the update is zero.
    pub stable_rank: Option<f64>,
    pub svd_entropy_nats: Option<f64>,
    pub sigma_max: f64,
    pub normalized_spectrum: Vec<f64>,
    pub num_singular_values: usize,
    pub numerical_rank: usize,
    pub degenerate: bool,
}

pub fn layer_report(name: &str, dw: &Matrix) -> Result<SpectralReport> {
    let num_singular_values = dw.rows().min(dw.cols());
    if ensure_nonzero(dw).is_err() {
        return Ok(SpectralReport {
            layer_name: name.to_string(),
            stable_rank: None,
            svd_entropy_nats: None,
            sigma_max: dw.frobenius_norm(),
            normalized_spectrum: Vec::new(),
            num_singular_values,
            numerical_rank: 0,
            degenerate: true,
        });
    }
    let sigma = singular_values(dw)?;
    let top = sigma[0];
    Ok(SpectralReport {
        layer_name: name.to_string(),
        stable_rank: Some(stable_rank(dw)?),
        svd_entropy_nats: Some(entropy_of_spectrum(&sigma)?),
        sigma_max: top,
        normalized_spectrum: sigma.iter().map(|s| s / top).collect(),
        num_singular_values,
        numerical_rank: numerical_rank(&sigma),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: median_sorted(&sorted),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        })
    }
}

pub(crate) fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of an unsorted slice; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    median_sorted(&sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub layers: usize,
    pub degenerate_layers: Vec<String>,
    pub stable_rank: Option<MetricSummary>,
    pub svd_entropy_nats: Option<MetricSummary>,
    /// Position-wise mean of per-layer normalized spectra. Position `i`
    /// averages over the layers that have an `i`-th singular value.
    pub mean_normalized_spectrum: Vec<f64>,
}

/// Unweighted cross-layer statistics over the non-degenerate layers.
pub fn aggregate_reports(reports: &[SpectralReport]) -> AggregateSummary {
    let live: Vec<&SpectralReport> = reports.iter().filter(|r| !r.degenerate).collect();
    let ranks: Vec<f64> = live.iter().filter_map(|r| r.stable_rank).collect();
    let entropies: Vec<f64> = live.iter().filter_map(|r| r.svd_entropy_nats).collect();
    let longest = live.iter().map(|r| r.normalized_spectrum.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; longest];
    let mut counts = vec![0usize; longest];
    for r in &live {
        for (i, &v) in r.normalized_spectrum.iter().enumerate() {
            sums[i] += v;
            counts[i] += 1;
        }
    }
    AggregateSummary {
        layers: reports.len(),
        degenerate_layers: reports
            .iter()
            .filter(|r| r.degenerate)
            .map(|r| r.layer_name.clone())
            .collect(),
        stable_rank: MetricSummary::from_values(&ranks),
        svd_entropy_nats: MetricSummary::from_values(&entropies),
        mean_normalized_spectrum: sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s / c as f64)
            .collect(),
    }
}

/// Slack in `σ_i(ΔW) ≤ σ₁(W_pre(D − I)) + σ_i(s·BAD)` for every `i > r`
/// (1-based), where `ΔW = W_pre(D − I) + s·BAD`. Weyl's inequality makes
/// every entry non-negative up to rounding.
pub fn weyl_margin(
    w_pre: &Matrix,
    d: &[f64],
    b: &Matrix,
    a: &Matrix,
    s: f64,
    r: usize,
) -> Result<Vec<f64>> {
    let shifted: Vec<f64> = d.iter().map(|v| v - 1.0).collect();
    let conditioning = w_pre.diag_right_mul(&shifted)?;
    let low_rank = b.matmul(&a.diag_right_mul(d)?)?.scale(s);
    let delta = conditioning.add(&low_rank)?;

    let top_conditioning = singular_values(&conditioning)?[0];
    let low_rank_sv = singular_values(&low_rank)?;
    let delta_sv = singular_values(&delta)?;
    Ok(delta_sv
        .iter()
        .zip(&low_rank_sv)
        .skip(r)
        .map(|(dsv, lsv)| top_conditioning + lsv - dsv)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_matrix, Distribution};

    fn gauss(rows: usize, cols: usize, seed: u64) -> Matrix {
        random_matrix(rows, cols, Distribution::Gaussian { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&Matrix::identity(5)).unwrap() - 5.0).abs() < 1e-12);
        let rank1 = Matrix::column_vector(&[1.0, 2.0, 3.0])
            .matmul_nt(&Matrix::column_vector(&[1.0, -1.0]))
            .unwrap();
        assert!((stable_rank(&rank1).unwrap() - 1.0).abs() < 1e-12);
        assert!((stable_rank(&Matrix::from_diag(&[2.0, 1.0, 1.0])).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(
            stable_rank(&Matrix::zeros(3, 3)),
            Err(Error::ZeroUpdate { .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let rank1 = Matrix::column_vector(&[1.0, 2.0])
            .matmul_nt(&Matrix::column_vector(&[3.0, 1.0, 0.5]))
            .unwrap();
        assert!(svd_entropy(&rank1).unwrap().abs() < 1e-12);
        assert!((svd_entropy(&Matrix::identity(6)).unwrap() - 6f64.ln()).abs() < 1e-12);
        // p = (0.8, 0.2): -(0.8 ln 0.8 + 0.2 ln 0.2)
        let expected = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        let h = entropy_of_spectrum(&[1.0, 0.5]).unwrap();
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.5004).abs() < 5e-5);
        assert!(svd_entropy(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn entropy_of_three_step_spectrum() {
        // p = (1, 0.16, 0.09) / 1.25 = (0.8, 0.128, 0.072)
        let p = [0.8f64, 0.128, 0.072];
        let expected: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let h = entropy_of_spectrum(&[1.0, 0.4, 0.3]).unwrap();
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.6310).abs() < 1e-4);
        assert_eq!(entropy_of_spectrum(&[1.0]).unwrap(), 0.0);
        let perm = entropy_of_spectrum(&[0.3, 1.0, 0.4]).unwrap();
        assert!((perm - h).abs() < 1e-15);
        assert!(entropy_of_spectrum(&[0.0, 0.0]).is_err());
        assert!(entropy_of_spectrum(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn normalized_spectrum_examples() {
        assert_eq!(normalized_spectrum(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
        assert_eq!(
            normalized_spectrum(&Matrix::from_diag(&[4.0, 2.0, 1.0])).unwrap(),
            vec![1.0, 0.5, 0.25]
        );
        let x = gauss(5, 4, 3);
        let a = normalized_spectrum(&x).unwrap();
        let b = normalized_spectrum(&x.scale(-17.5)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation() {
        let one = layer_report("only", &gauss(4, 4, 1)).unwrap();
        let agg = aggregate_reports(std::slice::from_ref(&one));
        assert_eq!(agg.svd_entropy_nats.unwrap().mean, one.svd_entropy_nats.unwrap());
        assert_eq!(agg.stable_rank.unwrap().median, one.stable_rank.unwrap());
        assert_eq!(agg.mean_normalized_spectrum, one.normalized_spectrum);

        let flat = layer_report("flat", &Matrix::from_diag(&[1.0, 1.0])).unwrap();
        let spike = layer_report("spike", &Matrix::from_diag(&[1.0, 0.0])).unwrap();
        let zero = layer_report("zero", &Matrix::zeros(2, 2)).unwrap();
        assert!(zero.degenerate);
        let agg = aggregate_reports(&[spike, flat, zero]);
        let h = agg.svd_entropy_nats.unwrap();
        assert!((h.mean - 2f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(h.min, 0.0);
        assert_eq!(agg.degenerate_layers, vec!["zero".to_string()]);
        assert_eq!(agg.layers, 3);
        assert_eq!(agg.mean_normalized_spectrum, vec![1.0, 0.5]);
    }

    #[test]
    fn weyl_margin_identity_conditioning_is_zero() {
        let (w, b, a) = (gauss(6, 5, 1), gauss(6, 2, 2), gauss(2, 5, 3));
        let margins = weyl_margin(&w, &[1.0; 5], &b, &a, 2.0, 2).unwrap();
        assert_eq!(margins.len(), 3);
        assert!(margins.iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn weyl_margin_grows_with_conditioning() {
        let (w, b, a) = (gauss(8, 6, 4), gauss(8, 2, 5), gauss(2, 6, 6));
        let dir = gauss(1, 6, 7);
        let mut previous = f64::NEG_INFINITY;
        for step in [0.0, 0.05, 0.2, 0.8] {
            let d: Vec<f64> = dir.data().iter().map(|v| 1.0 + step * v).collect();
            let margins = weyl_margin(&w, &d, &b, &a, 1.0, 2).unwrap();
            assert!(margins.iter().all(|&m| m >= -1e-9));
            let total: f64 = margins.iter().sum();
            assert!(total >= previous - 1e-9);
            previous = total;
        }
    }
}
