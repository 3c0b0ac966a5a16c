//! χ²-distance calibration of pseudo-design weights.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::design::{DesignMatrix, TotalsVector};

/// Singular-value ratio below which the normal matrix counts as singular.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Relative tolerance on every calibration constraint.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("X'DX is numerically singular (smallest/largest singular value {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("constraint {index} misses its target by {residual:e} (target {target})")]
    ConstraintViolation { index: usize, residual: f64, target: f64 },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WeightBasis {
    PseudoDesign,
    Greg,
    ModelCalibrated,
}

/// Per-unit weights with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub basis: WeightBasis,
    /// Skill name for model-calibrated weights, `"shared"` otherwise.
    pub outcome_tag: String,
}

/// Summary of a weight vector.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub negative: usize,
    pub sum: f64,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn diagnostics(&self) -> WeightDiagnostics {
        let mut d = WeightDiagnostics {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            negative: 0,
            sum: 0.0,
        };
        for &w in &self.values {
            d.min = d.min.min(w);
            d.max = d.max.max(w);
            d.negative += usize::from(w < 0.0);
            d.sum += w;
        }
        d
    }

    /// Hájek mean `Σ w y / Σ w`.
    pub fn hajek_mean(&self, y: &[bool]) -> f64 {
        assert_eq!(y.len(), self.values.len(), "outcome length");
        let (num, den) = self
            .values
            .iter()
            .zip(y)
            .fold((0.0, 0.0), |(n, d), (&w, &yi)| (if yi { n + w } else { n }, d + w));
        num / den
    }
}

/// Constant weights `N / n`.
pub fn pseudo_weights(n: usize, population: f64) -> Result<WeightVector, CalibrationError> {
    if n == 0 || !(population > 0.0) || !population.is_finite() {
        return Err(CalibrationError::InvalidInput(format!(
            "pseudo weights need n >= 1 and N > 0 (got n = {n}, N = {population})"
        )));
    }
    Ok(WeightVector {
        values: vec![population / n as f64; n],
        basis: WeightBasis::PseudoDesign,
        outcome_tag: "shared".into(),
    })
}

/// GREG weights `w = d + D X (X'DX)⁻¹ (T − X'd)` for a labelled design.
pub fn calibrate_chi2(d: &WeightVector, x: &DesignMatrix, t: &TotalsVector) -> Result<WeightVector, CalibrationError> {
    if x.labels != t.labels {
        return Err(CalibrationError::DimensionMismatch(
            "totals labels do not match design columns".into(),
        ));
    }
    let values = chi2_weights(&d.values, &x.values, &t.values)?;
    Ok(WeightVector {
        values,
        basis: WeightBasis::Greg,
        outcome_tag: "shared".into(),
    })
}

/// Core χ² calibration on raw arrays.
pub fn chi2_weights(d: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    let (n, p) = x.shape();
    if d.len() != n {
        return Err(CalibrationError::DimensionMismatch(format!(
            "{} weights for {n} rows",
            d.len()
        )));
    }
    if t.len() != p {
        return Err(CalibrationError::DimensionMismatch(format!(
            "{} totals for {p} columns",
            t.len()
        )));
    }
    if p == 0 {
        return Err(CalibrationError::DimensionMismatch("design has no columns".into()));
    }
    if d.iter().chain(t).any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::InvalidInput("non-finite input".into()));
    }

    // Accumulate X'DX and X'd over the nonzero entries of each row.
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut xd = DVector::<f64>::zeros(p);
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(p);
    for i in 0..n {
        nz.clear();
        nz.extend((0..p).filter_map(|j| {
            let v = x[(i, j)];
            (v != 0.0).then_some((j, v))
        }));
        for &(j, vj) in &nz {
            xd[j] += d[i] * vj;
            for &(k, vk) in &nz {
                a[(j, k)] += d[i] * vj * vk;
            }
        }
    }
    let target = DVector::from_column_slice(t);
    let rhs = &target - &xd;

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio >= RANK_TOLERANCE) {
        return Err(CalibrationError::RankDeficient { ratio });
    }
    let solve = |b: &DVector<f64>| svd.solve(b, 0.0).expect("SVD with U and V");
    let mut lambda = solve(&rhs);
    // A few rounds of iterative refinement tighten the constraints.
    for _ in 0..3 {
        let resid = &rhs - &a * &lambda;
        if resid.amax() <= f64::EPSILON * rhs.amax() {
            break;
        }
        lambda += solve(&resid);
    }

    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = 1.0;
        for j in 0..p {
            let v = x[(i, j)];
            if v != 0.0 {
                g += v * lambda[j];
            }
        }
        w.push(d[i] * g);
    }
    check_constraints(&w, x, t)?;
    Ok(w)
}

fn check_constraints(w: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<(), CalibrationError> {
    let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (j, &target) in t.iter().enumerate() {
        let achieved: f64 = x.column(j).iter().zip(w).map(|(xv, wv)| xv * wv).sum();
        let residual = (achieved - target).abs();
        // A zero target cannot be met relatively; fall back to the totals' scale.
        let tol = CONSTRAINT_TOLERANCE * if target != 0.0 { target.abs() } else { scale };
        if residual > tol {
            return Err(CalibrationError::ConstraintViolation {
                index: j,
                residual,
                target,
            });
        }
    }
    Ok(())
}

/// Result of model-assisted calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCalibration {
    pub weights: WeightVector,
    /// True when μ̂ was constant and only the population size was calibrated.
    pub degenerate_model: bool,
}

/// Calibrates `d` to `Σw = N̂` and `Σ w μ̂ = T_mu`.
pub fn calibrate_model_assisted(
    d: &WeightVector,
    mu_hat: &[f64],
    n_hat: f64,
    t_mu: f64,
    outcome_tag: &str,
) -> Result<ModelCalibration, CalibrationError> {
    let n = d.values.len();
    if mu_hat.len() != n {
        return Err(CalibrationError::DimensionMismatch(format!(
            "{} fitted means for {n} weights",
            mu_hat.len()
        )));
    }
    if !(n_hat > 0.0) || !n_hat.is_finite() || !t_mu.is_finite() || mu_hat.iter().any(|m| !m.is_finite()) {
        return Err(CalibrationError::InvalidInput(
            "model calibration needs finite μ̂, T_mu and N̂ > 0".into(),
        ));
    }
    let m = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { mu_hat[i] });
    let (values, degenerate_model) = match chi2_weights(&d.values, &m, &[n_hat, t_mu]) {
        Ok(w) => (w, false),
        Err(CalibrationError::RankDeficient { .. }) => {
            let ones = DMatrix::from_element(n, 1, 1.0);
            (chi2_weights(&d.values, &ones, &[n_hat])?, true)
        }
        Err(e) => return Err(e),
    };
    Ok(ModelCalibration {
        weights: WeightVector {
            values,
            basis: WeightBasis::ModelCalibrated,
            outcome_tag: outcome_tag.to_string(),
        },
        degenerate_model,
    })
}
