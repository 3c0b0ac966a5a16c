//! One-hot design matrices aligned with totals, and rare-category collapsing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{AdSample, CategoryDictionary, Covariate, TotalsTable};

/// Default minimum pooled sample count below which a mapped category is merged.
pub const DEFAULT_COLLAPSE_THRESHOLD: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("covariate {0} requested twice")]
    DuplicateCovariate(Covariate),
    #[error("row {row} has no {covariate}; impute before encoding")]
    MissingCovariate { row: usize, covariate: Covariate },
    #[error("no total for column {0}")]
    MissingCellTotal(ColumnLabel),
    #[error("total for column {label} is {value}, totals must be positive")]
    NonPositiveTotal { label: ColumnLabel, value: f64 },
    #[error("collapse map line {line}: {message}")]
    BadCollapseRule { line: usize, message: String },
    #[error("collapse target `{target}` of {covariate} is not a known category")]
    UnknownCollapseTarget { covariate: Covariate, target: String },
}

/// Column identity in a design matrix or totals vector.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColumnLabel {
    Intercept,
    Level { covariate: Covariate, category: String },
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnLabel::Intercept => f.write_str("(intercept)"),
            ColumnLabel::Level { covariate, category } => write!(f, "{covariate}={category}"),
        }
    }
}

/// Dense one-hot matrix with labelled columns.
///
/// Without an intercept every covariate block is a full indicator set (used for
/// calibration constraints). With an intercept the first dictionary category of
/// each covariate is dropped and recorded in `reference_levels` (used for model
/// fitting).
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub labels: Vec<ColumnLabel>,
    pub reference_levels: Vec<(Covariate, String)>,
    pub covariates: Vec<Covariate>,
    pub intercept: bool,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Builds a matrix from raw values with generic labels, mainly for tests.
    pub fn from_values(values: DMatrix<f64>, intercept: bool) -> Self {
        let labels = (0..values.ncols())
            .map(|j| {
                if intercept && j == 0 {
                    ColumnLabel::Intercept
                } else {
                    ColumnLabel::Level {
                        covariate: Covariate::Occupation,
                        category: format!("c{j}"),
                    }
                }
            })
            .collect();
        DesignMatrix {
            values,
            labels,
            reference_levels: Vec::new(),
            covariates: Vec::new(),
            intercept,
        }
    }
}

/// Totals aligned index-for-index with a [`DesignMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct TotalsVector {
    pub values: Vec<f64>,
    pub labels: Vec<ColumnLabel>,
}

/// Parses covariate names such as `"occupation"`.
pub fn parse_covariates<S: AsRef<str>>(names: &[S]) -> Result<Vec<Covariate>, DesignError> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let cov: Covariate = name
            .as_ref()
            .parse()
            .map_err(|_| DesignError::UnknownCovariate(name.as_ref().to_string()))?;
        if out.contains(&cov) {
            return Err(DesignError::DuplicateCovariate(cov));
        }
        out.push(cov);
    }
    Ok(out)
}

/// Encodes every record of `sample`.
pub fn encode(sample: &AdSample, covariates: &[Covariate], intercept: bool) -> Result<DesignMatrix, DesignError> {
    let rows: Vec<usize> = (0..sample.len()).collect();
    encode_rows(sample, &rows, covariates, intercept)
}

/// Encodes the given rows of `sample`, in order.
pub fn encode_rows(
    sample: &AdSample,
    rows: &[usize],
    covariates: &[Covariate],
    intercept: bool,
) -> Result<DesignMatrix, DesignError> {
    let mut seen = BTreeSet::new();
    for &c in covariates {
        if !seen.insert(c) {
            return Err(DesignError::DuplicateCovariate(c));
        }
    }
    let mut labels = Vec::new();
    let mut reference_levels = Vec::new();
    // Column offset of each covariate block; categories below `skip` are dropped.
    let mut blocks = Vec::with_capacity(covariates.len());
    if intercept {
        labels.push(ColumnLabel::Intercept);
    }
    for &cov in covariates {
        let dict = sample.dictionaries.get(cov);
        let skip = usize::from(intercept && !dict.is_empty());
        if skip == 1 {
            reference_levels.push((cov, dict.code(0).to_string()));
        }
        blocks.push((cov, labels.len(), skip));
        for code in &dict.codes()[skip..] {
            labels.push(ColumnLabel::Level {
                covariate: cov,
                category: code.clone(),
            });
        }
    }
    let mut values = DMatrix::zeros(rows.len(), labels.len());
    for (r, &i) in rows.iter().enumerate() {
        if intercept {
            values[(r, 0)] = 1.0;
        }
        let rec = &sample.records[i];
        for &(cov, offset, skip) in &blocks {
            let idx = rec
                .get(cov)
                .ok_or(DesignError::MissingCovariate { row: i, covariate: cov })? as usize;
            if idx >= skip {
                values[(r, offset + idx - skip)] = 1.0;
            }
        }
    }
    Ok(DesignMatrix {
        values,
        labels,
        reference_levels,
        covariates: covariates.to_vec(),
        intercept,
    })
}

/// Looks up the total behind each column of `matrix`.
pub fn totals_vector(totals: &TotalsTable, matrix: &DesignMatrix) -> Result<TotalsVector, DesignError> {
    totals_for_labels(totals, &matrix.labels)
}

pub fn totals_for_labels(totals: &TotalsTable, labels: &[ColumnLabel]) -> Result<TotalsVector, DesignError> {
    let mut values = Vec::with_capacity(labels.len());
    for label in labels {
        let v = match label {
            ColumnLabel::Intercept => totals.grand_total,
            ColumnLabel::Level { covariate, category } => totals
                .marginal(*covariate, category)
                .ok_or_else(|| DesignError::MissingCellTotal(label.clone()))?,
        };
        if !(v > 0.0) {
            return Err(DesignError::NonPositiveTotal {
                label: label.clone(),
                value: v,
            });
        }
        values.push(v);
    }
    Ok(TotalsVector {
        values,
        labels: labels.to_vec(),
    })
}

/// Explicit merge rules for under-represented categories.
///
/// A rule `covariate: from -> to` fires only when the pooled sample count of
/// `from` is below the threshold. The same resolved rules are then applied to
/// the sample and to every totals table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollapseMap {
    pub rules: Vec<CollapseRule>,
    pub threshold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollapseRule {
    pub covariate: Covariate,
    pub from: String,
    pub to: String,
}

/// Rules that fired for a particular sample, fully resolved (no chains).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResolvedCollapse {
    pub merges: BTreeMap<(Covariate, String), String>,
}

impl CollapseMap {
    pub fn new(rules: Vec<CollapseRule>) -> Self {
        CollapseMap {
            rules,
            threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }

    /// Parses lines of `covariate: from -> to`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, DesignError> {
        let mut rules = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: &str| DesignError::BadCollapseRule {
                line: n + 1,
                message: message.to_string(),
            };
            let (cov, rest) = line
                .split_once(':')
                .ok_or_else(|| bad("expected `covariate: from -> to`"))?;
            let (from, to) = rest.split_once("->").ok_or_else(|| bad("expected `->`"))?;
            let covariate = cov
                .trim()
                .parse::<Covariate>()
                .map_err(|_| DesignError::UnknownCovariate(cov.trim().to_string()))?;
            let (from, to) = (from.trim(), to.trim());
            if from.is_empty() || to.is_empty() || from == to {
                return Err(bad("categories must be non-empty and distinct"));
            }
            rules.push(CollapseRule {
                covariate,
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        Ok(CollapseMap::new(rules))
    }

    pub fn with_threshold(mut self, threshold: usize) -> Self {
        self.threshold = threshold;
        self
    }

    /// Decides which rules fire on the pooled `sample`.
    pub fn resolve(&self, sample: &AdSample) -> Result<ResolvedCollapse, DesignError> {
        let mut counts: BTreeMap<(Covariate, u16), usize> = BTreeMap::new();
        for r in &sample.records {
            for cov in Covariate::ALL {
                if let Some(v) = r.get(cov) {
                    *counts.entry((cov, v)).or_default() += 1;
                }
            }
        }
        let mut direct: BTreeMap<(Covariate, String), String> = BTreeMap::new();
        for rule in &self.rules {
            let dict = sample.dictionaries.get(rule.covariate);
            if dict.index(&rule.to).is_none() {
                return Err(DesignError::UnknownCollapseTarget {
                    covariate: rule.covariate,
                    target: rule.to.clone(),
                });
            }
            let Some(idx) = dict.index(&rule.from) else {
                continue;
            };
            let count = counts.get(&(rule.covariate, idx)).copied().unwrap_or(0);
            if count < self.threshold {
                direct.insert((rule.covariate, rule.from.clone()), rule.to.clone());
            }
        }
        // Follow chains such as a -> b -> c so every merge lands on a survivor.
        let mut merges = BTreeMap::new();
        for ((cov, from), to) in &direct {
            let mut target = to.clone();
            let mut hops = 0;
            while let Some(next) = direct.get(&(*cov, target.clone())) {
                target = next.clone();
                hops += 1;
                if hops > direct.len() || &target == from {
                    return Err(DesignError::BadCollapseRule {
                        line: 0,
                        message: format!("cyclic collapse rules through {cov} {from}"),
                    });
                }
            }
            merges.insert((*cov, from.clone()), target);
        }
        Ok(ResolvedCollapse { merges })
    }
}

impl ResolvedCollapse {
    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    fn target<'a>(&'a self, covariate: Covariate, code: &'a str) -> &'a str {
        self.merges
            .get(&(covariate, code.to_string()))
            .map_or(code, String::as_str)
    }

    /// Remaps the sample onto reduced dictionaries.
    pub fn apply_to_sample(&self, sample: &AdSample) -> AdSample {
        let mut out = sample.clone();
        for cov in Covariate::ALL {
            let dict = sample.dictionaries.get(cov);
            let kept: Vec<String> = dict
                .codes()
                .iter()
                .filter(|c| !self.merges.contains_key(&(cov, (*c).clone())))
                .cloned()
                .collect();
            if kept.len() == dict.len() {
                continue;
            }
            let reduced = CategoryDictionary::from_ordered(kept);
            let remap: Vec<u16> = dict
                .codes()
                .iter()
                .map(|c| reduced.index(self.target(cov, c)).expect("collapse target survives"))
                .collect();
            for r in &mut out.records {
                if let Some(v) = r.get(cov) {
                    r.set(cov, Some(remap[v as usize]));
                }
            }
            out.dictionaries.set(cov, reduced);
        }
        out
    }

    /// Merges totals, relative standard errors and cross cells.
    ///
    /// The merged relative SE treats the merged cells as independent:
    /// `sqrt(sd_a² + sd_b²) / (t_a + t_b)`.
    pub fn apply_to_totals(&self, totals: &TotalsTable) -> TotalsTable {
        let mut out = TotalsTable::new(totals.wave, totals.grand_total);
        out.grand_total_rel_se = totals.grand_total_rel_se;
        let mut variances: BTreeMap<(Covariate, String), f64> = BTreeMap::new();
        let mut has_se: BTreeSet<(Covariate, String)> = BTreeSet::new();
        for ((cov, code), &v) in &totals.marginals {
            let key = (*cov, self.target(*cov, code).to_string());
            *out.marginals.entry(key.clone()).or_insert(0.0) += v;
            if let Some(se) = totals.rel_se.get(&(*cov, code.clone())) {
                let sd = se / 100.0 * v;
                *variances.entry(key.clone()).or_insert(0.0) += sd * sd;
                has_se.insert(key);
            }
        }
        for key in has_se {
            let total = out.marginals[&key];
            let se = variances[&key].sqrt() / total * 100.0;
            out.rel_se.insert(key, se);
        }
        for ((nace, occ), &v) in &totals.cross {
            let key = (
                self.target(Covariate::Nace, nace).to_string(),
                self.target(Covariate::Occupation, occ).to_string(),
            );
            *out.cross.entry(key).or_insert(0.0) += v;
        }
        out
    }
}
