//! Logistic working models: Newton MLE, ridge, and (adaptive) LASSO by
//! coordinate descent with cross-validated penalty.
//!
//! Categorical designs have few distinct rows, so every solver works on
//! grouped counts: for each distinct covariate cell `r` we keep the number of
//! units `m_r` and of positive outcomes `s_r`. The loss is the mean negative
//! log-likelihood
//!
//! ```text
//! L(β0, β) = (1/n) Σ_r [ m_r log(1 + exp η_r) − s_r η_r ],   η_r = β0 + x_r'β
//! ```
//!
//! and the LASSO objective adds `λ Σ_j α_j |β_j|` with the intercept left
//! unpenalised.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{AdSample, Covariate};
use crate::design::{ColumnLabel, DesignMatrix};

/// Coefficients beyond this magnitude on the logit scale signal separation.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Newton step size above which a converged-looking MLE is still diverging.
const DRIFT_STEP: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("coefficient {index} diverged to {value} (separated data)")]
    SeparationDetected { index: usize, value: f64 },
    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },
    #[error("outcome is constant ({0} positives); no model to fit")]
    ConstantResponse(usize),
    #[error("design columns do not match the fitted model")]
    ColumnMismatch,
    #[error("design matrix must carry a leading intercept column")]
    MissingIntercept,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("row {row} has no {covariate}; impute before fitting")]
    MissingCovariate { row: usize, covariate: Covariate },
    #[error("cell {0} is not covered by the model")]
    UncoveredCell(String),
    #[error("information matrix is singular")]
    SingularHessian,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Family {
    Logistic,
}

/// A fitted logistic working model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFit {
    pub intercept: f64,
    /// One coefficient per non-intercept column, aligned with `labels`.
    pub coefficients: Vec<f64>,
    pub labels: Vec<ColumnLabel>,
    pub reference_levels: Vec<(Covariate, String)>,
    pub covariates: Vec<Covariate>,
    pub lambda: f64,
    /// Effective penalty weights `α_j^γ`; `+∞` pins a coefficient at zero.
    pub alpha_weights: Vec<f64>,
    pub gamma: f64,
    pub family: Family,
    /// `(λ, mean CV deviance)` along the grid, largest λ first.
    pub cv_curve: Vec<(f64, f64)>,
}

/// Predicted means per unit and per covariate cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedMeans {
    pub values: Vec<f64>,
    pub by_cell: BTreeMap<Vec<String>, f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `softplus(x + d) - softplus(x)` written as `ln(1 + p(e^d - 1))` with
/// `p = σ(x)`, which stays accurate for tiny `d` where the plain difference
/// cancels.
fn softplus_change(x: f64, d: f64) -> f64 {
    if d.abs() > 1.0 {
        return softplus(x + d) - softplus(x);
    }
    (sigmoid(x) * d.exp_m1()).ln_1p()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `sign(z) · max(|z| − t, 0) / h`.
pub fn soft_threshold(z: f64, t: f64, h: f64) -> f64 {
    if z > t {
        (z - t) / h
    } else if z < -t {
        (z + t) / h
    } else {
        0.0
    }
}

/// Distinct covariate cells of a design, with the unit-to-cell map.
#[derive(Clone, Debug, PartialEq)]
pub struct CellDesign {
    n_features: usize,
    cell_features: Vec<Vec<(usize, f64)>>,
    column_cells: Vec<Vec<(usize, f64)>>,
    unit_cell: Vec<usize>,
    cell_keys: Vec<Vec<String>>,
    pub labels: Vec<ColumnLabel>,
    pub reference_levels: Vec<(Covariate, String)>,
    pub covariates: Vec<Covariate>,
}

impl CellDesign {
    /// Groups the rows of a design whose first column is the intercept.
    pub fn from_matrix(x: &DesignMatrix) -> Result<Self, GlmError> {
        if !x.intercept || x.labels.first() != Some(&ColumnLabel::Intercept) {
            return Err(GlmError::MissingIntercept);
        }
        let p = x.ncols() - 1;
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut cell_features = Vec::new();
        let mut cell_keys = Vec::new();
        let mut unit_cell = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let row: Vec<f64> = (1..=p).map(|j| x.values[(i, j)]).collect();
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let id = *lookup.entry(key).or_insert_with(|| {
                cell_features.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(j, v)| (j, *v))
                        .collect::<Vec<_>>(),
                );
                cell_keys.push(cell_key_from_row(x, &row));
                cell_features.len() - 1
            });
            unit_cell.push(id);
        }
        Ok(Self::assemble(
            p,
            cell_features,
            cell_keys,
            unit_cell,
            x.labels[1..].to_vec(),
            x.reference_levels.clone(),
            x.covariates.clone(),
        ))
    }

    /// Builds the baseline-dropped design directly from category indices,
    /// matching `encode_rows(sample, rows, covariates, true)` column for column.
    pub fn from_sample(sample: &AdSample, rows: &[usize], covariates: &[Covariate]) -> Result<Self, GlmError> {
        let mut labels = Vec::new();
        let mut reference_levels = Vec::new();
        let mut offsets = Vec::with_capacity(covariates.len());
        for &cov in covariates {
            let dict = sample.dictionaries.get(cov);
            offsets.push(labels.len());
            if dict.is_empty() {
                continue;
            }
            reference_levels.push((cov, dict.code(0).to_string()));
            for code in &dict.codes()[1..] {
                labels.push(ColumnLabel::Level {
                    covariate: cov,
                    category: code.clone(),
                });
            }
        }
        let mut lookup: HashMap<Vec<u16>, usize> = HashMap::new();
        let mut cell_features = Vec::new();
        let mut cell_keys = Vec::new();
        let mut unit_cell = Vec::with_capacity(rows.len());
        let mut key = Vec::with_capacity(covariates.len());
        for &i in rows {
            key.clear();
            for &cov in covariates {
                key.push(
                    sample.records[i]
                        .get(cov)
                        .ok_or(GlmError::MissingCovariate { row: i, covariate: cov })?,
                );
            }
            let id = match lookup.get(&key) {
                Some(&id) => id,
                None => {
                    let feats = key
                        .iter()
                        .zip(&offsets)
                        .filter(|(&v, _)| v > 0)
                        .map(|(&v, &off)| (off + v as usize - 1, 1.0))
                        .collect();
                    cell_features.push(feats);
                    cell_keys.push(
                        key.iter()
                            .zip(covariates)
                            .map(|(&v, &cov)| sample.dictionaries.get(cov).code(v).to_string())
                            .collect(),
                    );
                    lookup.insert(key.clone(), cell_features.len() - 1);
                    cell_features.len() - 1
                }
            };
            unit_cell.push(id);
        }
        Ok(Self::assemble(
            labels.len(),
            cell_features,
            cell_keys,
            unit_cell,
            labels,
            reference_levels,
            covariates.to_vec(),
        ))
    }

    fn assemble(
        n_features: usize,
        cell_features: Vec<Vec<(usize, f64)>>,
        cell_keys: Vec<Vec<String>>,
        unit_cell: Vec<usize>,
        labels: Vec<ColumnLabel>,
        reference_levels: Vec<(Covariate, String)>,
        covariates: Vec<Covariate>,
    ) -> Self {
        let mut column_cells = vec![Vec::new(); n_features];
        for (r, feats) in cell_features.iter().enumerate() {
            for &(j, v) in feats {
                column_cells[j].push((r, v));
            }
        }
        CellDesign {
            n_features,
            cell_features,
            column_cells,
            unit_cell,
            cell_keys,
            labels,
            reference_levels,
            covariates,
        }
    }

    pub fn n_units(&self) -> usize {
        self.unit_cell.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_features.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn unit_cell(&self) -> &[usize] {
        &self.unit_cell
    }

    pub fn cell_key(&self, cell: usize) -> &[String] {
        &self.cell_keys[cell]
    }

    /// Units and positives per cell.
    pub fn counts(&self, y: &[bool]) -> Result<(Vec<f64>, Vec<f64>), GlmError> {
        if y.len() != self.n_units() {
            return Err(GlmError::LengthMismatch(format!(
                "{} outcomes for {} units",
                y.len(),
                self.n_units()
            )));
        }
        let mut m = vec![0.0; self.n_cells()];
        let mut s = vec![0.0; self.n_cells()];
        for (&c, &yi) in self.unit_cell.iter().zip(y) {
            m[c] += 1.0;
            if yi {
                s[c] += 1.0;
            }
        }
        Ok((m, s))
    }

    /// Linear predictor per cell.
    pub fn cell_eta(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        self.cell_features
            .iter()
            .map(|f| intercept + f.iter().map(|&(j, v)| v * beta[j]).sum::<f64>())
            .collect()
    }
}

fn cell_key_from_row(x: &DesignMatrix, row: &[f64]) -> Vec<String> {
    let active = |cov: Covariate| {
        x.labels[1..].iter().zip(row).find_map(|(l, &v)| match l {
            ColumnLabel::Level { covariate, category } if *covariate == cov && v != 0.0 => Some(category.clone()),
            _ => None,
        })
    };
    if x.covariates.is_empty() {
        return x.labels[1..]
            .iter()
            .zip(row)
            .filter(|(_, &v)| v != 0.0)
            .map(|(l, v)| format!("{l}:{v}"))
            .collect();
    }
    x.covariates
        .iter()
        .map(|&cov| {
            active(cov).unwrap_or_else(|| {
                x.reference_levels
                    .iter()
                    .find(|(c, _)| *c == cov)
                    .map(|(_, code)| code.clone())
                    .unwrap_or_default()
            })
        })
        .collect()
}

/// Solver settings shared by the LASSO routines.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoOptions {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Skip cross-validation and fit at this penalty.
    pub fixed_lambda: Option<f64>,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            folds: 10,
            seed: 0,
            tolerance: 1e-10,
            max_sweeps: 10_000,
            fixed_lambda: None,
        }
    }
}

struct Problem<'a> {
    design: &'a CellDesign,
    m: &'a [f64],
    s: &'a [f64],
    inv_n: f64,
    all_cells: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
struct State {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(design: &'a CellDesign, m: &'a [f64], s: &'a [f64]) -> Self {
        let n: f64 = m.iter().sum();
        Problem {
            design,
            m,
            s,
            inv_n: 1.0 / n,
            all_cells: (0..design.n_cells()).map(|r| (r, 1.0)).collect(),
        }
    }

    fn state(&self, b0: f64, beta: Vec<f64>) -> State {
        let eta = self.design.cell_eta(b0, &beta);
        State { b0, beta, eta }
    }

    fn null_state(&self) -> State {
        let n: f64 = self.m.iter().sum();
        let ybar = self.s.iter().sum::<f64>() / n;
        self.state(logit(ybar), vec![0.0; self.design.n_features])
    }

    fn loss(&self, eta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..eta.len() {
            if self.m[r] > 0.0 {
                acc += self.m[r] * softplus(eta[r]) - self.s[r] * eta[r];
            }
        }
        acc * self.inv_n
    }

    fn objective(&self, st: &State, lambda: f64, alpha: &[f64]) -> f64 {
        self.loss(&st.eta) + penalty(&st.beta, lambda, alpha)
    }

    /// Gradient of the mean loss w.r.t. each non-intercept coefficient.
    fn gradient(&self, eta: &[f64]) -> Vec<f64> {
        self.design
            .column_cells
            .iter()
            .map(|cells| {
                cells
                    .iter()
                    .map(|&(r, v)| v * (self.m[r] * sigmoid(eta[r]) - self.s[r]))
                    .sum::<f64>()
                    * self.inv_n
            })
            .collect()
    }

    fn intercept_gradient(&self, eta: &[f64]) -> f64 {
        (0..eta.len())
            .map(|r| self.m[r] * sigmoid(eta[r]) - self.s[r])
            .sum::<f64>()
            * self.inv_n
    }

    /// Loss change when `η_r += t·v_r` on the listed cells.
    fn loss_change(&self, eta: &[f64], cells: &[(usize, f64)], step: f64) -> f64 {
        let mut acc = 0.0;
        for &(r, v) in cells {
            if self.m[r] > 0.0 {
                let d = step * v;
                acc += self.m[r] * softplus_change(eta[r], d) - self.s[r] * d;
            }
        }
        acc * self.inv_n
    }

    fn update_intercept(&self, st: &mut State) -> f64 {
        let mut g = 0.0;
        let mut h = 0.0;
        for r in 0..st.eta.len() {
            let p = sigmoid(st.eta[r]);
            g += self.m[r] * p - self.s[r];
            h += self.m[r] * p * (1.0 - p);
        }
        g *= self.inv_n;
        h *= self.inv_n;
        if !(h > 0.0) {
            return 0.0;
        }
        let delta = -g / h;
        let t = self.backtrack(st, &self.all_cells, delta, g * delta, 0.0, 0.0);
        if t == 0.0 {
            return 0.0;
        }
        let step = t * delta;
        st.b0 += step;
        for e in &mut st.eta {
            *e += step;
        }
        step.abs()
    }

    /// Proximal Newton step on coordinate `j`; returns the absolute change.
    fn update_coordinate(&self, st: &mut State, j: usize, lambda: f64, alpha_j: f64) -> f64 {
        if alpha_j.is_infinite() {
            return 0.0;
        }
        let pen = lambda * alpha_j;
        let cells = &self.design.column_cells[j];
        let mut g = 0.0;
        let mut h = 0.0;
        for &(r, v) in cells {
            let p = sigmoid(st.eta[r]);
            g += v * (self.m[r] * p - self.s[r]);
            h += v * v * self.m[r] * p * (1.0 - p);
        }
        g *= self.inv_n;
        h *= self.inv_n;
        let b = st.beta[j];
        let target = if h > 0.0 {
            soft_threshold(h * b - g, pen, h)
        } else if pen > 0.0 {
            // The loss is flat in this coordinate; the penalty alone decides.
            0.0
        } else {
            b
        };
        let delta = target - b;
        if delta == 0.0 {
            return 0.0;
        }
        // Predicted decrease of the composite objective for the full step.
        let decrease = g * delta + pen * ((b + delta).abs() - b.abs());
        let t = self.backtrack(st, cells, delta, decrease, pen, b);
        if t == 0.0 {
            return 0.0;
        }
        let step = t * delta;
        st.beta[j] = b + step;
        for &(r, v) in cells {
            st.eta[r] += step * v;
        }
        step.abs()
    }

    /// Armijo backtracking on the composite objective along one direction.
    fn backtrack(&self, st: &State, cells: &[(usize, f64)], delta: f64, decrease: f64, pen: f64, b: f64) -> f64 {
        const SIGMA: f64 = 1e-4;
        let mut t = 1.0;
        for _ in 0..60 {
            let change = self.loss_change(&st.eta, cells, t * delta) + pen * ((b + t * delta).abs() - b.abs());
            if change <= SIGMA * t * decrease {
                return t;
            }
            t *= 0.5;
        }
        0.0
    }

    /// Newton step on the intercept and the nonzero coefficients with their
    /// signs held fixed, truncated where a coefficient reaches zero and
    /// accepted only under an Armijo decrease of the full objective. Returns
    /// the largest coefficient change (0 when rejected).
    fn newton_polish(&self, st: &mut State, lambda: f64, alpha: &[f64], tol: f64) -> f64 {
        let active: Vec<usize> = (0..st.beta.len())
            .filter(|&j| st.beta[j] != 0.0 && alpha[j].is_finite())
            .collect();
        let k = active.len() + 1;
        let mut slot = vec![usize::MAX; st.beta.len()];
        for (i, &j) in active.iter().enumerate() {
            slot[j] = i + 1;
        }
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for (r, feats) in self.design.cell_features.iter().enumerate() {
            if self.m[r] == 0.0 {
                continue;
            }
            let mu = sigmoid(st.eta[r]);
            let resid = (self.m[r] * mu - self.s[r]) * self.inv_n;
            let w = self.m[r] * mu * (1.0 - mu) * self.inv_n;
            grad[0] += resid;
            hess[(0, 0)] += w;
            for &(j, v) in feats {
                let a = slot[j];
                if a == usize::MAX {
                    continue;
                }
                grad[a] += resid * v;
                hess[(0, a)] += w * v;
                hess[(a, 0)] += w * v;
                for &(l, u) in feats {
                    let b = slot[l];
                    if b != usize::MAX {
                        hess[(a, b)] += w * v * u;
                    }
                }
            }
        }
        for (i, &j) in active.iter().enumerate() {
            grad[i + 1] += lambda * alpha[j] * st.beta[j].signum();
        }
        let Some(chol) = hess.cholesky() else {
            return 0.0;
        };
        let dir = -chol.solve(&grad);
        let decrease = grad.dot(&dir);
        // Below tolerance the objective change is lost in rounding anyway.
        if !(decrease < 0.0) || dir.amax() <= tol {
            return 0.0;
        }
        let mut deta = vec![dir[0]; st.eta.len()];
        for (r, feats) in self.design.cell_features.iter().enumerate() {
            for &(j, v) in feats {
                if slot[j] != usize::MAX {
                    deta[r] += dir[slot[j]] * v;
                }
            }
        }
        let pen0: f64 = active.iter().map(|&j| alpha[j] * st.beta[j].abs()).sum::<f64>() * lambda;
        // Stop at the first coefficient that would change sign.
        let mut t = 1.0;
        let mut crossing = None;
        for (i, &j) in active.iter().enumerate() {
            let d = dir[i + 1];
            if st.beta[j] * d < 0.0 && d.abs() * t > st.beta[j].abs() {
                t = -st.beta[j] / d;
                crossing = Some(j);
            }
        }
        for _ in 0..30 {
            let mut change = 0.0;
            for r in 0..deta.len() {
                if self.m[r] > 0.0 {
                    let d = t * deta[r];
                    change += self.m[r] * softplus_change(st.eta[r], d) - self.s[r] * d;
                }
            }
            change *= self.inv_n;
            let pen1: f64 = active
                .iter()
                .enumerate()
                .map(|(i, &j)| alpha[j] * (st.beta[j] + t * dir[i + 1]).abs())
                .sum::<f64>()
                * lambda;
            if change + pen1 - pen0 <= 1e-4 * t * decrease {
                st.b0 += t * dir[0];
                for (i, &j) in active.iter().enumerate() {
                    st.beta[j] += t * dir[i + 1];
                }
                if let Some(j) = crossing {
                    st.beta[j] = 0.0;
                }
                st.eta = self.design.cell_eta(st.b0, &st.beta);
                return t * dir.amax();
            }
            t *= 0.5;
            crossing = None;
        }
        0.0
    }

    /// Coordinate descent at fixed λ from the current state.
    ///
    /// Once a sweep leaves the support unchanged, Newton steps on the support
    /// finish the job; they only ever lower the objective, and the closing
    /// sweeps still have to meet the coordinate-change tolerance.
    fn solve(
        &self,
        st: &mut State,
        lambda: f64,
        alpha: &[f64],
        opts: &LassoOptions,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<usize, GlmError> {
        let p = self.design.n_features;
        let mut sweeps = 0;
        let mut full = true;
        loop {
            if sweeps >= opts.max_sweeps {
                return Err(GlmError::NonConvergence {
                    what: format!("coordinate descent at lambda {lambda:e}"),
                    iterations: sweeps,
                });
            }
            sweeps += 1;
            let support: Vec<bool> = st.beta.iter().map(|b| *b != 0.0).collect();
            let mut max_delta = self.update_intercept(st);
            for j in 0..p {
                if full || st.beta[j] != 0.0 {
                    max_delta = max_delta.max(self.update_coordinate(st, j, lambda, alpha[j]));
                }
            }
            if max_delta > opts.tolerance && st.beta.iter().zip(&support).all(|(b, s)| (*b != 0.0) == *s) {
                for _ in 0..20 {
                    if self.newton_polish(st, lambda, alpha, opts.tolerance) <= opts.tolerance {
                        break;
                    }
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(self.objective(st, lambda, alpha));
            }
            if max_delta <= opts.tolerance {
                if full {
                    return Ok(sweeps);
                }
                // Confirm on the full coordinate set before stopping.
                full = true;
            } else {
                full = false;
            }
        }
    }
}

fn penalty(beta: &[f64], lambda: f64, alpha: &[f64]) -> f64 {
    beta.iter()
        .zip(alpha)
        .filter(|(b, _)| **b != 0.0)
        .map(|(b, a)| lambda * a * b.abs())
        .sum()
}

/// Smallest λ that zeroes every penalised coefficient (slightly inflated).
fn lambda_max(problem: &Problem<'_>, alpha: &[f64]) -> f64 {
    let null = problem.null_state();
    let g = problem.gradient(&null.eta);
    let max = g
        .iter()
        .zip(alpha)
        .filter(|(_, a)| a.is_finite() && **a > 0.0)
        .map(|(g, a)| g.abs() / a)
        .fold(0.0, f64::max);
    max * (1.0 + 1e-9)
}

fn lambda_grid(lmax: f64, opts: &LassoOptions) -> Vec<f64> {
    let k = opts.n_lambda;
    if k == 1 {
        return vec![lmax];
    }
    (0..k)
        .map(|i| lmax * opts.lambda_min_ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

fn validate_alpha(alpha: &[f64], p: usize) -> Result<(), GlmError> {
    if alpha.len() != p {
        return Err(GlmError::LengthMismatch(format!(
            "{} penalty weights for {p} columns",
            alpha.len()
        )));
    }
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(GlmError::InvalidOption(
            "penalty weights must be positive or +inf".into(),
        ));
    }
    Ok(())
}

fn check_response(s: &[f64], m: &[f64]) -> Result<(), GlmError> {
    let pos: f64 = s.iter().sum();
    let n: f64 = m.iter().sum();
    if pos == 0.0 || pos == n {
        return Err(GlmError::ConstantResponse(pos as usize));
    }
    Ok(())
}

/// Assigns units to `k` folds, stratified by outcome.
///
/// Positives and negatives are shuffled separately with a seeded generator and
/// dealt round-robin, so every fold gets its share of each class.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; y.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        fold[i] = slot % k;
    }
    fold
}

/// Binomial deviance per unit of the grouped data at the given predictors.
fn mean_deviance(m: &[f64], s: &[f64], eta: &[f64]) -> f64 {
    let mut dev = 0.0;
    let mut n = 0.0;
    for r in 0..eta.len() {
        if m[r] > 0.0 {
            // log σ(η) = −softplus(−η), log(1 − σ(η)) = −softplus(η)
            dev += s[r] * softplus(-eta[r]) + (m[r] - s[r]) * softplus(eta[r]);
            n += m[r];
        }
    }
    2.0 * dev / n
}

/// Fits along `lambdas` with warm starts, returning `(intercept, β)` per λ.
fn path(
    problem: &Problem<'_>,
    lambdas: &[f64],
    alpha: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<(f64, Vec<f64>)>, GlmError> {
    let mut st = problem.null_state();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        problem.solve(&mut st, lambda, alpha, opts, None)?;
        out.push((st.b0, st.beta.clone()));
    }
    Ok(out)
}

fn model_fit(
    design: &CellDesign,
    intercept: f64,
    coefficients: Vec<f64>,
    lambda: f64,
    alpha: &[f64],
    gamma: f64,
    cv_curve: Vec<(f64, f64)>,
) -> ModelFit {
    ModelFit {
        intercept,
        coefficients,
        labels: design.labels.clone(),
        reference_levels: design.reference_levels.clone(),
        covariates: design.covariates.clone(),
        lambda,
        alpha_weights: alpha.to_vec(),
        gamma,
        family: Family::Logistic,
        cv_curve,
    }
}

/// LASSO logistic regression with the penalty chosen by k-fold CV.
///
/// The λ grid runs from λ_max down to `lambda_min_ratio·λ_max` on a log scale;
/// the selected λ minimises mean held-out binomial deviance.
pub fn fit_lasso_path(
    y: &[bool],
    design: &CellDesign,
    alpha: &[f64],
    opts: &LassoOptions,
) -> Result<ModelFit, GlmError> {
    fit_lasso_gamma(y, design, alpha, 1.0, opts)
}

fn fit_lasso_gamma(
    y: &[bool],
    design: &CellDesign,
    alpha: &[f64],
    gamma: f64,
    opts: &LassoOptions,
) -> Result<ModelFit, GlmError> {
    validate_alpha(alpha, design.n_features)?;
    if opts.fixed_lambda.is_none() && opts.folds < 2 {
        return Err(GlmError::InvalidOption("at least two CV folds are required".into()));
    }
    if opts.n_lambda == 0 || !(opts.lambda_min_ratio > 0.0 && opts.lambda_min_ratio < 1.0) {
        return Err(GlmError::InvalidOption(
            "lambda grid needs n_lambda >= 1 and 0 < ratio < 1".into(),
        ));
    }
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    let problem = Problem::new(design, &m, &s);

    if let Some(lambda) = opts.fixed_lambda {
        if !(lambda >= 0.0) {
            return Err(GlmError::InvalidOption("lambda must be non-negative".into()));
        }
        let mut st = problem.null_state();
        problem.solve(&mut st, lambda, alpha, opts, None)?;
        return Ok(model_fit(design, st.b0, st.beta, lambda, alpha, gamma, Vec::new()));
    }

    let lmax = lambda_max(&problem, alpha);
    if lmax == 0.0 {
        // Nothing to penalise: the intercept-only model is the answer.
        let st = problem.null_state();
        return Ok(model_fit(design, st.b0, st.beta, 0.0, alpha, gamma, Vec::new()));
    }
    let grid = lambda_grid(lmax, opts);

    let folds = stratified_folds(y, opts.folds, opts.seed);
    let mut dev_sum = vec![0.0; grid.len()];
    for f in 0..opts.folds {
        let mut m_out = vec![0.0; design.n_cells()];
        let mut s_out = vec![0.0; design.n_cells()];
        for (i, &c) in design.unit_cell.iter().enumerate() {
            if folds[i] == f {
                m_out[c] += 1.0;
                if y[i] {
                    s_out[c] += 1.0;
                }
            }
        }
        let m_in: Vec<f64> = m.iter().zip(&m_out).map(|(a, b)| a - b).collect();
        let s_in: Vec<f64> = s.iter().zip(&s_out).map(|(a, b)| a - b).collect();
        let train = Problem::new(design, &m_in, &s_in);
        if check_response(&s_in, &m_in).is_err() {
            return Err(GlmError::InvalidOption(format!(
                "CV fold {f} leaves a constant training outcome"
            )));
        }
        for (k, (b0, beta)) in path(&train, &grid, alpha, opts)?.into_iter().enumerate() {
            let eta = design.cell_eta(b0, &beta);
            dev_sum[k] += mean_deviance(&m_out, &s_out, &eta);
        }
    }
    let cv_curve: Vec<(f64, f64)> = grid
        .iter()
        .zip(&dev_sum)
        .map(|(&l, &d)| (l, d / opts.folds as f64))
        .collect();
    let best = cv_curve
        .iter()
        .enumerate()
        .fold(0, |best, (k, &(_, d))| if d < cv_curve[best].1 { k } else { best });

    let full = path(&problem, &grid[..=best], alpha, opts)?;
    let (b0, beta) = full.into_iter().last().expect("non-empty path");
    Ok(model_fit(design, b0, beta, grid[best], alpha, gamma, cv_curve))
}

/// Fits at one λ starting from the null model (no warm start, no CV).
pub fn fit_lasso_fixed(
    y: &[bool],
    design: &CellDesign,
    alpha: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<ModelFit, GlmError> {
    let opts = LassoOptions {
        fixed_lambda: Some(lambda),
        ..opts.clone()
    };
    fit_lasso_gamma(y, design, alpha, 1.0, &opts)
}

/// Warm-started solutions along an explicit λ sequence.
pub fn lasso_path(
    y: &[bool],
    design: &CellDesign,
    alpha: &[f64],
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<ModelFit>, GlmError> {
    validate_alpha(alpha, design.n_features)?;
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    let problem = Problem::new(design, &m, &s);
    Ok(path(&problem, lambdas, alpha, opts)?
        .into_iter()
        .zip(lambdas)
        .map(|((b0, beta), &l)| model_fit(design, b0, beta, l, alpha, 1.0, Vec::new()))
        .collect())
}

/// λ_max for the given penalty weights.
pub fn lasso_lambda_max(y: &[bool], design: &CellDesign, alpha: &[f64]) -> Result<f64, GlmError> {
    validate_alpha(alpha, design.n_features)?;
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    Ok(lambda_max(&Problem::new(design, &m, &s), alpha))
}

/// Penalised objective values after each coordinate sweep at fixed λ.
pub fn objective_trace(
    y: &[bool],
    design: &CellDesign,
    alpha: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<Vec<f64>, GlmError> {
    validate_alpha(alpha, design.n_features)?;
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    let problem = Problem::new(design, &m, &s);
    let mut st = problem.null_state();
    let mut trace = vec![problem.objective(&st, lambda, alpha)];
    problem.solve(&mut st, lambda, alpha, opts, Some(&mut trace))?;
    Ok(trace)
}

/// Gradient of the mean negative log-likelihood at a fit: `(∂/∂β0, ∂/∂β)`.
pub fn loss_gradient(fit: &ModelFit, y: &[bool], design: &CellDesign) -> Result<(f64, Vec<f64>), GlmError> {
    if fit.coefficients.len() != design.n_features {
        return Err(GlmError::ColumnMismatch);
    }
    let (m, s) = design.counts(y)?;
    let problem = Problem::new(design, &m, &s);
    let eta = design.cell_eta(fit.intercept, &fit.coefficients);
    Ok((problem.intercept_gradient(&eta), problem.gradient(&eta)))
}

/// Mean negative log-likelihood at a fit.
pub fn mean_loss(fit: &ModelFit, y: &[bool], design: &CellDesign) -> Result<f64, GlmError> {
    let (m, s) = design.counts(y)?;
    let problem = Problem::new(design, &m, &s);
    Ok(problem.loss(&design.cell_eta(fit.intercept, &fit.coefficients)))
}

/// Largest violation of the LASSO optimality conditions at a fit.
pub fn kkt_violation(fit: &ModelFit, y: &[bool], design: &CellDesign) -> Result<f64, GlmError> {
    let (g0, g) = loss_gradient(fit, y, design)?;
    let mut worst = g0.abs();
    for ((&b, &gj), &a) in fit.coefficients.iter().zip(&g).zip(&fit.alpha_weights) {
        if a.is_infinite() {
            continue;
        }
        let pen = fit.lambda * a;
        let v = if b != 0.0 {
            (gj + pen * b.signum()).abs()
        } else {
            (gj.abs() - pen).max(0.0)
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Dense Newton iterations on `L + (ρ/2)‖β‖²` (intercept unpenalised).
///
/// `tol` applies to the sup-norm of the gradient of `n·L + (nρ/2)‖β‖²`.
fn newton(
    design: &CellDesign,
    m: &[f64],
    s: &[f64],
    ridge: f64,
    tol: f64,
    max_iter: usize,
    separation_check: bool,
) -> Result<(f64, Vec<f64>), GlmError> {
    let p = design.n_features;
    let n: f64 = m.iter().sum();
    let problem = Problem::new(design, m, s);
    let mut st = problem.null_state();
    for _ in 0..max_iter {
        let mut grad = DVector::<f64>::zeros(p + 1);
        let mut hess = DMatrix::<f64>::zeros(p + 1, p + 1);
        for (r, feats) in design.cell_features.iter().enumerate() {
            if m[r] == 0.0 {
                continue;
            }
            let mu = sigmoid(st.eta[r]);
            let resid = m[r] * mu - s[r];
            let wgt = m[r] * mu * (1.0 - mu);
            grad[0] += resid;
            hess[(0, 0)] += wgt;
            for &(j, v) in feats {
                grad[j + 1] += resid * v;
                hess[(0, j + 1)] += wgt * v;
                hess[(j + 1, 0)] += wgt * v;
                for &(k, w) in feats {
                    hess[(j + 1, k + 1)] += wgt * v * w;
                }
            }
        }
        for j in 0..p {
            grad[j + 1] += n * ridge * st.beta[j];
            hess[(j + 1, j + 1)] += n * ridge;
        }
        let chol = hess.cholesky();
        if grad.amax() <= tol {
            // A tiny gradient with a unit-size Newton step is a coefficient
            // drifting off to infinity, not a stationary point.
            let drifting = separation_check && chol.as_ref().is_none_or(|c| c.solve(&grad).amax() > DRIFT_STEP);
            if !drifting {
                return Ok((st.b0, st.beta));
            }
        }
        let step = chol.ok_or(GlmError::SingularHessian)?.solve(&grad);
        // η moves by -t·deta; the objective change is summed per cell so that
        // decreases far below the objective's own rounding still register.
        let mut deta = vec![step[0]; st.eta.len()];
        for (r, feats) in design.cell_features.iter().enumerate() {
            for &(j, v) in feats {
                deta[r] += step[j + 1] * v;
            }
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let mut change = 0.0;
            for r in 0..deta.len() {
                if m[r] > 0.0 {
                    let d = -t * deta[r];
                    change += m[r] * softplus_change(st.eta[r], d) - s[r] * d;
                }
            }
            change += 0.5
                * n
                * ridge
                * (0..p)
                    .map(|j| t * step[j + 1] * (t * step[j + 1] - 2.0 * st.beta[j]))
                    .sum::<f64>();
            // Strict: no representable decrease means rounding has taken over.
            if change < 0.0 {
                st.b0 -= t * step[0];
                for j in 0..p {
                    st.beta[j] -= t * step[j + 1];
                }
                st.eta = design.cell_eta(st.b0, &st.beta);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if separation_check {
            if let Some((index, &value)) = std::iter::once(&st.b0)
                .chain(&st.beta)
                .enumerate()
                .find(|(_, b)| b.abs() > SEPARATION_BOUND)
            {
                return Err(GlmError::SeparationDetected { index, value });
            }
        }
        if !accepted {
            // No further decrease is representable; accept if nearly stationary.
            if grad.amax() <= tol * 1e3 {
                return Ok((st.b0, st.beta));
            }
            break;
        }
    }
    Err(GlmError::NonConvergence {
        what: if ridge > 0.0 {
            "ridge Newton".into()
        } else {
            "logistic Newton".into()
        },
        iterations: max_iter,
    })
}

/// Unpenalised logistic MLE by Newton–Raphson with step halving.
///
/// Stops when the log-likelihood gradient has sup-norm at most 1e-8.
pub fn fit_logistic_mle(y: &[bool], x: &DesignMatrix) -> Result<ModelFit, GlmError> {
    fit_logistic_mle_cells(y, &CellDesign::from_matrix(x)?)
}

pub fn fit_logistic_mle_cells(y: &[bool], design: &CellDesign) -> Result<ModelFit, GlmError> {
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    let (b0, beta) = newton(design, &m, &s, 0.0, 1e-8, 100, true)?;
    let alpha = vec![1.0; design.n_features];
    Ok(model_fit(design, b0, beta, 0.0, &alpha, 1.0, Vec::new()))
}

/// Ridge logistic regression minimising `L + (ρ/2)‖β‖²`.
pub fn fit_ridge(y: &[bool], design: &CellDesign, rho: f64) -> Result<ModelFit, GlmError> {
    if !(rho > 0.0) {
        return Err(GlmError::InvalidOption("ridge penalty must be positive".into()));
    }
    let (m, s) = design.counts(y)?;
    check_response(&s, &m)?;
    let n: f64 = m.iter().sum();
    let (b0, beta) = newton(design, &m, &s, rho, 1e-10 * n, 200, false)?;
    let alpha = vec![1.0; design.n_features];
    Ok(model_fit(design, b0, beta, rho, &alpha, 1.0, Vec::new()))
}

/// Ridge penalty used for pilots: a small fraction of `max_j |∂L/∂β_j|` at the null model.
pub fn pilot_ridge_penalty(y: &[bool], design: &CellDesign, fraction: f64) -> Result<f64, GlmError> {
    let ones = vec![1.0; design.n_features];
    let lmax = lasso_lambda_max(y, design, &ones)? / (1.0 + 1e-9);
    Ok(if lmax > 0.0 { fraction * lmax } else { fraction })
}

/// Adaptive LASSO: ridge pilot, weights `|β̂_j|^(−γ)`, then CV LASSO.
pub fn fit_adaptive_lasso(
    y: &[bool],
    design: &CellDesign,
    gamma: f64,
    opts: &LassoOptions,
) -> Result<ModelFit, GlmError> {
    let rho = pilot_ridge_penalty(y, design, 1e-3)?;
    let pilot = fit_ridge(y, design, rho)?;
    fit_adaptive_lasso_with_pilot(y, design, &pilot.coefficients, gamma, opts)
}

/// Adaptive LASSO from explicit pilot coefficients; a zero pilot excludes its column.
pub fn fit_adaptive_lasso_with_pilot(
    y: &[bool],
    design: &CellDesign,
    pilot: &[f64],
    gamma: f64,
    opts: &LassoOptions,
) -> Result<ModelFit, GlmError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(GlmError::InvalidOption("gamma must be a positive number".into()));
    }
    if pilot.len() != design.n_features {
        return Err(GlmError::LengthMismatch(format!(
            "{} pilot coefficients for {} columns",
            pilot.len(),
            design.n_features
        )));
    }
    let alpha: Vec<f64> = pilot
        .iter()
        .map(|b| if *b == 0.0 { f64::INFINITY } else { b.abs().powf(-gamma) })
        .collect();
    fit_lasso_gamma(y, design, &alpha, gamma, opts)
}

impl ModelFit {
    /// Model that predicts a constant mean `p` everywhere.
    pub fn intercept_only(p: f64) -> Self {
        ModelFit {
            intercept: logit(p),
            coefficients: Vec::new(),
            labels: Vec::new(),
            reference_levels: Vec::new(),
            covariates: Vec::new(),
            lambda: 0.0,
            alpha_weights: Vec::new(),
            gamma: 1.0,
            family: Family::Logistic,
            cv_curve: Vec::new(),
        }
    }

    pub fn nonzero(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }

    /// Predicted mean for a cell given as one category code per model covariate.
    pub fn cell_mean(&self, codes: &[(Covariate, &str)]) -> Result<f64, GlmError> {
        let mut eta = self.intercept;
        for &cov in &self.covariates {
            let code = codes
                .iter()
                .find(|(c, _)| *c == cov)
                .map(|(_, v)| *v)
                .ok_or_else(|| GlmError::UncoveredCell(format!("no {cov} given")))?;
            let is_reference = self.reference_levels.iter().any(|(c, r)| *c == cov && r == code);
            if is_reference {
                continue;
            }
            let j = self
                .labels
                .iter()
                .position(|l| matches!(l, ColumnLabel::Level { covariate, category } if *covariate == cov && category == code))
                .ok_or_else(|| GlmError::UncoveredCell(format!("{cov}={code}")))?;
            eta += self.coefficients[j];
        }
        Ok(sigmoid(eta))
    }

    /// Predicted mean per cell of `design`.
    pub fn cell_means(&self, design: &CellDesign) -> Result<Vec<f64>, GlmError> {
        if design.labels != self.labels {
            return Err(GlmError::ColumnMismatch);
        }
        Ok(design
            .cell_eta(self.intercept, &self.coefficients)
            .into_iter()
            .map(sigmoid)
            .collect())
    }
}

/// Inverse-logit predictions for a baseline-dropped design with intercept.
pub fn predict_means(fit: &ModelFit, x: &DesignMatrix) -> Result<FittedMeans, GlmError> {
    if !x.intercept || x.labels.first() != Some(&ColumnLabel::Intercept) || x.labels[1..] != fit.labels[..] {
        return Err(GlmError::ColumnMismatch);
    }
    let cells = CellDesign::from_matrix(x)?;
    let cell_mu = fit.cell_means(&cells)?;
    let values = cells.unit_cell.iter().map(|&c| cell_mu[c]).collect();
    let by_cell = (0..cells.n_cells())
        .map(|c| (cells.cell_keys[c].clone(), cell_mu[c]))
        .collect();
    Ok(FittedMeans { values, by_cell })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Design with one categorical covariate of `levels` levels (baseline dropped).
    fn categorical(levels: &[usize], k: usize) -> DesignMatrix {
        let mut x = DMatrix::zeros(levels.len(), k);
        for (i, &l) in levels.iter().enumerate() {
            x[(i, 0)] = 1.0;
            if l > 0 {
                x[(i, l)] = 1.0;
            }
        }
        DesignMatrix::from_values(x, true)
    }

    fn continuous(rows: &[[f64; 2]]) -> DesignMatrix {
        let x = DMatrix::from_fn(rows.len(), 3, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        DesignMatrix::from_values(x, true)
    }

    fn exact_loglik(b: &[f64], x: &DesignMatrix, y: &[bool]) -> f64 {
        (0..y.len())
            .map(|i| {
                let eta: f64 = (0..b.len()).map(|j| x.values[(i, j)] * b[j]).sum();
                if y[i] {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                }
            })
            .sum()
    }

    #[test]
    fn null_case_gives_logit_of_mean() {
        // Half the outcomes are ones, split evenly across both cells.
        let x = categorical(&[0, 0, 0, 0, 1, 1, 1, 1], 2);
        let y = [true, false, true, false, true, false, true, false];
        let fit = fit_logistic_mle(&y, &x).unwrap();
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn separation_is_detected() {
        let x = categorical(&[0, 0, 0, 1, 1, 1], 2);
        let y = [false, false, false, true, true, true];
        assert!(matches!(
            fit_logistic_mle(&y, &x),
            Err(GlmError::SeparationDetected { .. })
        ));
    }

    #[test]
    fn six_point_mle_matches_brute_force() {
        // (1, 0.5) lies inside the hull of the negatives, so the MLE exists.
        let x = continuous(&[[0.0, 1.0], [1.0, 0.5], [2.0, -1.0], [3.0, 0.2], [1.5, 1.5], [0.5, -0.5]]);
        let y = [false, true, true, false, true, false];
        let fit = fit_logistic_mle(&y, &x).unwrap();
        // Coarse grid search followed by shrinking pattern search.
        let mut best = [0.0; 3];
        let mut best_ll = exact_loglik(&best, &x, &y);
        for a in -40..=40 {
            for b in -40..=40 {
                for c in -40..=40 {
                    let cand = [a as f64 * 0.25, b as f64 * 0.25, c as f64 * 0.25];
                    let ll = exact_loglik(&cand, &x, &y);
                    if ll > best_ll {
                        best_ll = ll;
                        best = cand;
                    }
                }
            }
        }
        let mut h = 0.25;
        while h > 1e-9 {
            let mut improved = false;
            for j in 0..3 {
                for sgn in [-1.0, 1.0] {
                    let mut cand = best;
                    cand[j] += sgn * h;
                    let ll = exact_loglik(&cand, &x, &y);
                    if ll > best_ll {
                        best_ll = ll;
                        best = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        let got = [fit.intercept, fit.coefficients[0], fit.coefficients[1]];
        for (g, b) in got.iter().zip(&best) {
            assert!((g - b).abs() < 1e-6, "{got:?} vs {best:?}");
        }
    }

    #[test]
    fn soft_threshold_by_hand() {
        // z = h·b − g = 0.25·0.4 − (−0.3) = 0.4; λα = 0.1 → (0.4 − 0.1)/0.25
        assert!((soft_threshold(0.4, 0.1, 0.25) - 1.2).abs() < 1e-15);
        assert!((soft_threshold(-0.4, 0.1, 0.25) + 1.2).abs() < 1e-15);
        assert_eq!(soft_threshold(0.05, 0.1, 0.25), 0.0);
    }

    fn random_categorical(rng: &mut ChaCha8Rng, n: usize, levels: usize) -> (Vec<bool>, CellDesign) {
        let effects: Vec<f64> = (0..levels).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<usize> = (0..n)
            .map(|i| if i < levels { i } else { rng.random_range(0..levels) })
            .collect();
        let y: Vec<bool> = lv.iter().map(|&l| rng.random::<f64>() < sigmoid(effects[l])).collect();
        (y, CellDesign::from_matrix(&categorical(&lv, levels)).unwrap())
    }

    #[test]
    fn full_shrinkage_at_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, d) = random_categorical(&mut rng, 200, 4);
        let alpha = vec![1.0; d.n_features()];
        let lmax = lasso_lambda_max(&y, &d, &alpha).unwrap();
        let fit = fit_lasso_fixed(&y, &d, &alpha, lmax, &LassoOptions::default()).unwrap();
        assert!(fit.coefficients.iter().all(|b| *b == 0.0));
        let ybar = y.iter().filter(|v| **v).count() as f64 / y.len() as f64;
        assert!((sigmoid(fit.intercept) - ybar).abs() < 1e-12);
    }

    #[test]
    fn zero_penalty_matches_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let x = continuous(&rows);
        let y: Vec<bool> = rows
            .iter()
            .map(|r| rng.random::<f64>() < sigmoid(0.3 + r[0] - 0.7 * r[1]))
            .collect();
        let mle = fit_logistic_mle(&y, &x).unwrap();
        let d = CellDesign::from_matrix(&x).unwrap();
        let las = fit_lasso_fixed(&y, &d, &[1.0, 1.0], 0.0, &LassoOptions::default()).unwrap();
        assert!((mle.intercept - las.intercept).abs() < 1e-4);
        for (a, b) in mle.coefficients.iter().zip(&las.coefficients) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn cv_fit_satisfies_kkt_and_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, d) = random_categorical(&mut rng, 400, 6);
        let fit = fit_lasso_path(&y, &d, &vec![1.0; d.n_features()], &LassoOptions::default()).unwrap();
        assert_eq!(fit.cv_curve.len(), 100);
        assert!(fit.cv_curve.windows(2).all(|w| w[0].0 > w[1].0));
        let ratio = fit.cv_curve[99].0 / fit.cv_curve[0].0;
        assert!((ratio - 1e-4).abs() < 1e-12);
        assert!(kkt_violation(&fit, &y, &d).unwrap() <= 1e-4);
    }

    #[test]
    fn unit_pilot_is_plain_lasso() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (y, d) = random_categorical(&mut rng, 300, 5);
        let opts = LassoOptions::default();
        let plain = fit_lasso_path(&y, &d, &vec![1.0; d.n_features()], &opts).unwrap();
        let adaptive = fit_adaptive_lasso_with_pilot(&y, &d, &vec![1.0; d.n_features()], 1.0, &opts).unwrap();
        assert_eq!(plain, adaptive);
    }

    #[test]
    fn zero_pilot_excludes_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (y, d) = random_categorical(&mut rng, 300, 5);
        let pilot = [0.5, 0.0, -1.0, 2.0];
        let fit = fit_adaptive_lasso_with_pilot(&y, &d, &pilot, 1.0, &LassoOptions::default()).unwrap();
        assert_eq!(fit.coefficients[1], 0.0);
        assert!(fit.alpha_weights[1].is_infinite());
        assert_eq!(fit.alpha_weights[0], 2.0);
    }

    #[test]
    fn adaptive_fit_runs_with_ridge_pilot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (y, d) = random_categorical(&mut rng, 500, 6);
        let fit = fit_adaptive_lasso(&y, &d, 1.0, &LassoOptions::default()).unwrap();
        assert!(fit.alpha_weights.iter().all(|a| *a > 0.0));
        assert!(kkt_violation(&fit, &y, &d).unwrap() <= 1e-4);
    }

    #[test]
    fn constant_outcome_is_an_error() {
        let d = CellDesign::from_matrix(&categorical(&[0, 1, 1, 0], 2)).unwrap();
        assert_eq!(
            fit_lasso_path(&[true; 4], &d, &[1.0], &LassoOptions::default()),
            Err(GlmError::ConstantResponse(4))
        );
    }

    #[test]
    fn prediction_examples() {
        let x = categorical(&[0, 1, 2, 1], 3);
        let mut fit = ModelFit::intercept_only(0.5);
        fit.labels = x.labels[1..].to_vec();
        fit.coefficients = vec![0.0, 0.0];
        fit.alpha_weights = vec![1.0, 1.0];
        let mu = predict_means(&fit, &x).unwrap();
        assert!(mu.values.iter().all(|v| *v == 0.5));
        fit.intercept = 0.7;
        let by_cell = predict_means(&fit, &x).unwrap().by_cell;
        assert!(by_cell.values().all(|v| *v == sigmoid(0.7)));
        // Raising a coefficient raises the means of rows carrying that indicator.
        let base = predict_means(&fit, &x).unwrap().values;
        fit.coefficients[0] += 1e-3;
        let bumped = predict_means(&fit, &x).unwrap().values;
        for i in 0..4 {
            if x.values[(i, 1)] == 1.0 {
                assert!(bumped[i] > base[i]);
            } else {
                assert_eq!(bumped[i], base[i]);
            }
        }
        let wrong = categorical(&[0, 1], 2);
        assert_eq!(predict_means(&fit, &wrong), Err(GlmError::ColumnMismatch));
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let y: Vec<bool> = (0..103).map(|i| i % 4 == 0).collect();
        let f = stratified_folds(&y, 10, 1);
        assert_eq!(f, stratified_folds(&y, 10, 1));
        for k in 0..10 {
            let pos = (0..103).filter(|&i| f[i] == k && y[i]).count();
            assert!((2..=3).contains(&pos));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn objective_never_increases(seed in 0u64..1000, frac in 0.01f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, d) = random_categorical(&mut rng, 120, 5);
            prop_assume!(y.iter().any(|v| *v) && y.iter().any(|v| !*v));
            let alpha = vec![1.0; d.n_features()];
            let lmax = lasso_lambda_max(&y, &d, &alpha).unwrap();
            let trace = objective_trace(&y, &d, &alpha, frac * lmax, &LassoOptions::default()).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-14 * w[0].abs());
            }
        }

        #[test]
        fn warm_start_equals_cold_start(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, d) = random_categorical(&mut rng, 150, 5);
            prop_assume!(y.iter().any(|v| *v) && y.iter().any(|v| !*v));
            let alpha = vec![1.0; d.n_features()];
            let opts = LassoOptions { n_lambda: 20, ..Default::default() };
            let lmax = lasso_lambda_max(&y, &d, &alpha).unwrap();
            let grid = lambda_grid(lmax, &opts);
            let warm = lasso_path(&y, &d, &alpha, &grid, &opts).unwrap();
            for k in [5, 12, 19] {
                let cold = fit_lasso_fixed(&y, &d, &alpha, grid[k], &opts).unwrap();
                prop_assert!((cold.intercept - warm[k].intercept).abs() <= 1e-6);
                for (a, b) in cold.coefficients.iter().zip(&warm[k].coefficients) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<[f64; 2]> = (0..12).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let x = continuous(&rows);
            let y: Vec<bool> = (0..12).map(|i| i % 3 == 0 || rng.random::<f64>() < 0.3).collect();
            let d = CellDesign::from_matrix(&x).unwrap();
            let mut fit = ModelFit::intercept_only(0.4);
            fit.labels = d.labels.clone();
            fit.coefficients = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            fit.alpha_weights = vec![1.0, 1.0];
            let (g0, g) = loss_gradient(&fit, &y, &d).unwrap();
            let h = 1e-6;
            let numeric = |j: usize| {
                let mut plus = fit.clone();
                let mut minus = fit.clone();
                if j == 0 { plus.intercept += h; minus.intercept -= h; }
                else { plus.coefficients[j - 1] += h; minus.coefficients[j - 1] -= h; }
                (mean_loss(&plus, &y, &d).unwrap() - mean_loss(&minus, &y, &d).unwrap()) / (2.0 * h)
            };
            for (j, analytic) in std::iter::once(g0).chain(g).enumerate() {
                let num = numeric(j);
                prop_assert!((analytic - num).abs() <= 1e-5 * analytic.abs().max(1e-3), "{} vs {}", analytic, num);
            }
        }
    }
}
