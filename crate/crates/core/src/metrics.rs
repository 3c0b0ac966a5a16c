//! Model and association diagnostics: AUC and Cramér's V.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use thiserror::Error;

use crate::data::{AdSample, Covariate};
use crate::estimators::EstimatorName;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    OneClassOnly { positives: usize, negatives: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate contingency table: {0}")]
    DegenerateTable(String),
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
}

/// Area under the ROC curve as a rank statistic; tied pairs count one half.
pub fn auc(y: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    if y.len() != scores.len() {
        return Err(MetricsError::LengthMismatch(y.len(), scores.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let groups: Vec<(f64, f64, f64)> = y
        .iter()
        .zip(scores)
        .map(|(&yi, &s)| (s, if yi { 1.0 } else { 0.0 }, if yi { 0.0 } else { 1.0 }))
        .collect();
    auc_grouped(&groups)
}

/// AUC from `(score, positives, negatives)` groups, e.g. one per covariate cell.
pub fn auc_grouped(groups: &[(f64, f64, f64)]) -> Result<f64, MetricsError> {
    let mut sorted: Vec<(f64, f64, f64)> = groups.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos: f64 = sorted.iter().map(|g| g.1).sum();
    let total_neg: f64 = sorted.iter().map(|g| g.2).sum();
    if total_pos == 0.0 || total_neg == 0.0 {
        return Err(MetricsError::OneClassOnly {
            positives: total_pos as usize,
            negatives: total_neg as usize,
        });
    }
    let mut wins = 0.0;
    let mut ties = 0.0;
    let mut neg_below = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        let (mut pos, mut neg) = (0.0, 0.0);
        while i < sorted.len() && sorted[i].0 == score {
            pos += sorted[i].1;
            neg += sorted[i].2;
            i += 1;
        }
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
    }
    Ok((wins + 0.5 * ties) / (total_pos * total_neg))
}

/// Cramér's V of two categorical vectors (no continuity correction).
pub fn cramers_v<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let mut ra: HashMap<&A, usize> = HashMap::new();
    let mut rb: HashMap<&B, usize> = HashMap::new();
    let cells: Vec<(usize, usize)> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let na = ra.len();
            let i = *ra.entry(x).or_insert(na);
            let nb = rb.len();
            let j = *rb.entry(y).or_insert(nb);
            (i, j)
        })
        .collect();
    let mut table = vec![vec![0.0; rb.len()]; ra.len()];
    for (i, j) in cells {
        table[i][j] += 1.0;
    }
    cramers_v_table(&table)
}

/// Cramér's V of a contingency table given as rows of counts.
pub fn cramers_v_table(table: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 {
        return Err(MetricsError::DegenerateTable(format!(
            "{r}x{c} table needs at least two categories on each side"
        )));
    }
    if table.iter().any(|row| row.len() != c) {
        return Err(MetricsError::DegenerateTable("ragged table".into()));
    }
    let rows: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if rows.iter().chain(&cols).any(|m| *m <= 0.0) {
        return Err(MetricsError::DegenerateTable("a margin is zero".into()));
    }
    let n: f64 = rows.iter().sum();
    // χ² = Σ O(O·n − R·C)/(R·C): exact on integer tables at both independence
    // (every O·n = R·C) and perfect association (every term is n − O).
    let mut chi2 = 0.0;
    for i in 0..r {
        for j in 0..c {
            let o = table[i][j];
            let rc = rows[i] * cols[j];
            chi2 += o * (o * n - rc) / rc;
        }
    }
    let v = (chi2.max(0.0) / (n * (r.min(c) - 1) as f64)).sqrt();
    Ok(v.min(1.0))
}

/// AUC per (skill, model) and Cramér's V per (skill, covariate).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticReport {
    pub auc: BTreeMap<(String, EstimatorName), f64>,
    pub cramers_v: BTreeMap<(String, Covariate), f64>,
}

/// Cramér's V between every skill and every covariate, over records where the
/// covariate is observed.
pub fn skill_associations(sample: &AdSample) -> Result<BTreeMap<(String, Covariate), f64>, MetricsError> {
    let mut out = BTreeMap::new();
    for cov in Covariate::ALL {
        let observed: Vec<(u16, usize)> = sample
            .records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.get(cov).map(|v| (v, i)))
            .collect();
        let cats: Vec<u16> = observed.iter().map(|(v, _)| *v).collect();
        for (k, name) in sample.catalog.names().iter().enumerate() {
            let y: Vec<bool> = observed.iter().map(|(_, i)| sample.records[*i].skills.has(k)).collect();
            out.insert((name.clone(), cov), cramers_v(&y, &cats)?);
        }
    }
    Ok(out)
}
