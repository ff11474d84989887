//! Ridge least-squares projection used as a numerical conditional expectation.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::forward::{PathHistory, Problem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("need at least {required} samples for {features} features, got {samples}")]
    TooFewSamples {
        samples: usize,
        features: usize,
        required: usize,
    },
    #[error("feature column {0} vanishes identically")]
    ZeroColumn(usize),
    #[error("non-finite feature or target value")]
    NonFinite,
    #[error("normal equations stay singular with ridge {ridge:e}")]
    Conditioning { ridge: f64 },
    #[error("ridge parameter must be positive")]
    Ridge,
}

pub type Result<T, E = RegressionError> = std::result::Result<T, E>;

/// Fitted values per path, row-major `samples x targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub fitted: Vec<f64>,
    /// In-sample root-mean-square residual over all targets.
    pub residual: f64,
    /// Ridge actually used after any escalation.
    pub ridge: f64,
}

/// Ridge projection of `targets` (`samples x t`) onto `features` (`samples x f`).
///
/// Columns are scaled to unit root-mean-square before the ridge is added; if
/// the Cholesky factorization fails the ridge is raised by 10^3, at most three
/// times.
pub fn conditional_expectation_fit(
    features: &[f64],
    n_features: usize,
    targets: &[f64],
    n_targets: usize,
    ridge: f64,
) -> Result<Fit> {
    if ridge.is_nan() || ridge <= 0.0 {
        return Err(RegressionError::Ridge);
    }
    let m = features.len() / n_features.max(1);
    if m < 10 * n_features {
        return Err(RegressionError::TooFewSamples {
            samples: m,
            features: n_features,
            required: 10 * n_features,
        });
    }
    if features.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    let phi = DMatrix::from_row_slice(m, n_features, features);
    let mut scale = vec![0.0; n_features];
    for (j, s) in scale.iter_mut().enumerate() {
        let rms = (phi.column(j).norm_squared() / m as f64).sqrt();
        if rms == 0.0 {
            return Err(RegressionError::ZeroColumn(j));
        }
        *s = 1.0 / rms;
    }
    let scaled = DMatrix::from_fn(m, n_features, |i, j| phi[(i, j)] * scale[j]);
    let y = DMatrix::from_row_slice(m, n_targets, targets);
    let gram = scaled.tr_mul(&scaled) / m as f64;
    let rhs = scaled.tr_mul(&y) / m as f64;
    let mut lambda = ridge;
    let mut coef = None;
    for _ in 0..4 {
        let reg = &gram + DMatrix::identity(n_features, n_features) * lambda;
        if let Some(ch) = reg.cholesky() {
            let c = ch.solve(&rhs);
            if c.iter().all(|v| v.is_finite()) {
                coef = Some(c);
                break;
            }
        }
        lambda *= 1e3;
    }
    let coef = coef.ok_or(RegressionError::Conditioning {
        ridge: lambda / 1e3,
    })?;
    let fitted_m = &scaled * &coef;
    let mut fitted = Vec::with_capacity(m * n_targets);
    for i in 0..m {
        for t in 0..n_targets {
            fitted.push(fitted_m[(i, t)]);
        }
    }
    let residual = ((&y - &fitted_m).norm_squared() / (m * n_targets).max(1) as f64).sqrt();
    Ok(Fit {
        fitted,
        residual,
        ridge: lambda,
    })
}

/// Least-squares fit of a single target vector; convenience over [`conditional_expectation_fit`].
pub fn fit_scalar(features: &[f64], n_features: usize, target: &[f64], ridge: f64) -> Result<Fit> {
    conditional_expectation_fit(features, n_features, target, 1, ridge)
}

/// Features built from the current state and delayed snapshots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionBasis {
    /// Leading modes used in the affine and quadratic terms.
    pub modes: usize,
    /// Delays (as step counts) of the snapshots `X(t - lag dt)` added linearly.
    pub lags: Vec<usize>,
    pub ridge: f64,
}

impl RegressionBasis {
    /// Affine plus quadratic in the first `min(dim, 3)` modes, plus linear
    /// snapshots at the grid-aligned nonzero atoms of the drift measure.
    pub fn default_for(problem: &Problem) -> Self {
        let mut lags: Vec<usize> = problem
            .mu_f
            .atoms()
            .iter()
            .filter(|a| a.location != 0.0 && a.mass != 0.0)
            .map(|a| (-a.location / problem.grid.dt).round() as usize)
            .filter(|l| *l > 0)
            .collect();
        lags.dedup();
        Self {
            modes: problem.state_dim().min(3),
            lags,
            ridge: 1e-8,
        }
    }

    pub fn feature_count(&self) -> usize {
        let r = self.modes;
        1 + r + r * (r + 1) / 2 + r * self.lags.len()
    }

    /// Feature vector at absolute node `i` of `path`.
    pub fn features(&self, path: &PathHistory, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        let x = path.node(i);
        let r = self.modes;
        out.extend_from_slice(&x[..r]);
        for a in 0..r {
            for b in a..r {
                out.push(x[a] * x[b]);
            }
        }
        for &lag in &self.lags {
            let xd = path.node(i.saturating_sub(lag));
            out.extend_from_slice(&xd[..r]);
        }
    }
}

/// Drops feature columns that are constant across samples (other than the
/// intercept) since they carry no information beyond it.
pub fn informative_columns(features: &[f64], n_features: usize) -> Vec<usize> {
    let m = features.len() / n_features.max(1);
    (0..n_features)
        .filter(|&j| {
            if j == 0 {
                return true;
            }
            let first = features[j];
            (1..m).any(|i| features[i * n_features + j] != first)
        })
        .collect()
}

pub fn select_columns(features: &[f64], n_features: usize, cols: &[usize]) -> Vec<f64> {
    let m = features.len() / n_features.max(1);
    let mut out = Vec::with_capacity(m * cols.len());
    for i in 0..m {
        for &j in cols {
            out.push(features[i * n_features + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reproduces_targets_in_the_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 200;
        let mut feats = Vec::new();
        let mut targ = Vec::new();
        for _ in 0..m {
            let x: f64 = rng.random_range(-1.0..1.0);
            feats.extend_from_slice(&[1.0, x, x * x]);
            targ.push(0.5 - 2.0 * x + 3.0 * x * x);
        }
        let fit = fit_scalar(&feats, 3, &targ, 1e-12).unwrap();
        assert!(fit.residual < 1e-8);
        for (a, b) in fit.fitted.iter().zip(&targ) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn noise_projects_to_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spread = Vec::new();
        for m in [400usize, 6400] {
            let mut feats = Vec::new();
            let mut targ = Vec::new();
            for _ in 0..m {
                let x: f64 = rng.random_range(-1.0..1.0);
                feats.extend_from_slice(&[1.0, x]);
                targ.push(rng.random_range(-1.0..1.0));
            }
            let fit = fit_scalar(&feats, 2, &targ, 1e-8).unwrap();
            let mean = targ.iter().sum::<f64>() / m as f64;
            spread.push(
                fit.fitted
                    .iter()
                    .map(|f| (f - mean).abs())
                    .fold(0.0, f64::max),
            );
        }
        assert!(spread[1] < spread[0] && spread[1] < 0.05, "{spread:?}");
    }

    #[test]
    fn quadratic_of_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 1000;
        let mut feats = Vec::new();
        let mut targ = Vec::new();
        for _ in 0..m {
            let x: f64 = rng.random_range(-2.0..2.0);
            feats.extend_from_slice(&[1.0, x, x * x]);
            targ.push(x * x);
        }
        let fit = fit_scalar(&feats, 3, &targ, 1e-8).unwrap();
        for (a, b) in fit.fitted.iter().zip(&targ) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        let feats: Vec<f64> = (0..100).flat_map(|i| [1.0, 0.0, i as f64]).collect();
        let targ = vec![1.0; 100];
        assert_eq!(
            fit_scalar(&feats, 3, &targ, 1e-8).unwrap_err(),
            RegressionError::ZeroColumn(1)
        );
        assert!(matches!(
            fit_scalar(&feats[..30], 3, &targ[..10], 1e-8),
            Err(RegressionError::TooFewSamples { .. })
        ));
        let cols = informative_columns(&feats, 3);
        assert_eq!(cols, vec![0, 2]);
    }
}
