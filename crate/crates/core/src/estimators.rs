//! The six prevalence estimators, built from calibration and working models.
//!
//! | name      | weights                                                     |
//! |-----------|-------------------------------------------------------------|
//! | HTSRS     | pseudo-design `N̂/n` (plain sample mean)                     |
//! | ECGREG    | χ² calibration to occupation totals                         |
//! | ECMC      | model calibration, logistic MLE on occupation               |
//! | ECLASSO1  | model calibration, CV LASSO on occupation                   |
//! | ECLASSO2  | model calibration, CV LASSO on occupation and NACE          |
//! | ECALASSO1 | model calibration, CV adaptive LASSO on occupation          |
//!
//! Every estimate is the Hájek ratio `Σ w y / Σ w`. Working models are fit once
//! on the pooled sample and reused for each wave.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::calibration::{self, CalibrationError, WeightDiagnostics, WeightVector};
use crate::data::{AdSample, Covariate, TotalsTable, Wave};
use crate::design::{self, DesignError};
use crate::glm::{self, CellDesign, GlmError, LassoOptions, ModelFit};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("wave {0} has no records")]
    EmptyWave(Wave),
    #[error("{0} needs NACE x occupation totals, which wave {1} lacks")]
    MissingCrossTotals(EstimatorName, Wave),
    #[error("totals cell {0} is not covered by the model")]
    UncoveredCell(String),
    #[error("unsupported covariate set {0:?} for model totals")]
    UnsupportedCovariates(Vec<Covariate>),
    #[error("no cached model for {skill} / {estimator}")]
    MissingModel { skill: String, estimator: EstimatorName },
    #[error("{estimator}, skill {skill}, wave {wave}: {source}")]
    Calibration {
        skill: String,
        estimator: EstimatorName,
        wave: Wave,
        source: CalibrationError,
    },
    #[error("{estimator}, wave {wave}: {source}")]
    Design {
        estimator: EstimatorName,
        wave: Wave,
        source: DesignError,
    },
    #[error("{estimator}, skill {skill}: {source}")]
    Model {
        skill: String,
        estimator: EstimatorName,
        source: GlmError,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimatorName {
    Htsrs,
    Ecgreg,
    Ecmc,
    Eclasso1,
    Eclasso2,
    Ecalasso1,
}

impl EstimatorName {
    pub const ALL: [EstimatorName; 6] = [
        EstimatorName::Htsrs,
        EstimatorName::Ecgreg,
        EstimatorName::Ecmc,
        EstimatorName::Eclasso1,
        EstimatorName::Eclasso2,
        EstimatorName::Ecalasso1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorName::Htsrs => "HTSRS",
            EstimatorName::Ecgreg => "ECGREG",
            EstimatorName::Ecmc => "ECMC",
            EstimatorName::Eclasso1 => "ECLASSO1",
            EstimatorName::Eclasso2 => "ECLASSO2",
            EstimatorName::Ecalasso1 => "ECALASSO1",
        }
    }
}

impl fmt::Display for EstimatorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorName {
    type Err = EstimatorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorName::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EstimatorError::UnknownEstimator(s.to_string()))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelTag {
    None,
    Logistic,
    Lasso,
    AdaptiveLasso,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorSpec {
    pub name: EstimatorName,
    pub covariates: Vec<Covariate>,
    pub model_tag: ModelTag,
    pub pooled_model: bool,
}

impl EstimatorSpec {
    pub fn standard(name: EstimatorName) -> Self {
        use Covariate::{Nace, Occupation};
        let (covariates, model_tag) = match name {
            EstimatorName::Htsrs => (vec![], ModelTag::None),
            EstimatorName::Ecgreg => (vec![Occupation], ModelTag::None),
            EstimatorName::Ecmc => (vec![Occupation], ModelTag::Logistic),
            EstimatorName::Eclasso1 => (vec![Occupation], ModelTag::Lasso),
            EstimatorName::Eclasso2 => (vec![Occupation, Nace], ModelTag::Lasso),
            EstimatorName::Ecalasso1 => (vec![Occupation], ModelTag::AdaptiveLasso),
        };
        EstimatorSpec {
            name,
            covariates,
            model_tag,
            pooled_model: model_tag != ModelTag::None,
        }
    }

    pub fn all() -> Vec<Self> {
        EstimatorName::ALL.into_iter().map(Self::standard).collect()
    }

    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<Self>, EstimatorError> {
        names.iter().map(|n| n.as_ref().parse().map(Self::standard)).collect()
    }

    pub fn has_model(&self) -> bool {
        self.model_tag != ModelTag::None
    }
}

/// Working-model settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub lasso: LassoOptions,
    pub gamma: f64,
    /// Ridge pilot penalty as a fraction of `max_j |∂L/∂β_j|` at the null model.
    pub pilot_ridge_fraction: f64,
    /// Ridge penalty used when the logistic MLE separates.
    pub separation_ridge_fraction: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            lasso: LassoOptions::default(),
            gamma: 1.0,
            pilot_ridge_fraction: 1e-3,
            separation_ridge_fraction: 1e-10,
        }
    }
}

/// A pooled working model, or the constant that replaces it when the
/// pooled outcome never varies.
#[derive(Clone, Debug, PartialEq)]
pub enum CachedModel {
    Fit { fit: ModelFit, separation_fallback: bool },
    Constant(f64),
}

impl CachedModel {
    pub fn fit(&self) -> Option<&ModelFit> {
        match self {
            CachedModel::Fit { fit, .. } => Some(fit),
            CachedModel::Constant(_) => None,
        }
    }
}

/// Working models per (skill index, estimator), fit on a pooled sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCache {
    models: HashMap<(usize, EstimatorName), CachedModel>,
}

/// Mixes a seed with small integers into an independent-looking seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn estimator_index(name: EstimatorName) -> u64 {
    EstimatorName::ALL.iter().position(|e| *e == name).unwrap_or(0) as u64
}

impl ModelCache {
    /// Fits every model-based spec for every catalog skill on the whole sample.
    pub fn build(sample: &AdSample, specs: &[EstimatorSpec], opts: &ModelOptions) -> Result<Self, EstimatorError> {
        Self::build_inner(sample, specs, opts, None)
    }

    /// Like [`ModelCache::build`], but penalised models reuse the λ of `frozen`
    /// instead of running cross-validation.
    pub fn build_frozen(
        sample: &AdSample,
        specs: &[EstimatorSpec],
        opts: &ModelOptions,
        frozen: &ModelCache,
    ) -> Result<Self, EstimatorError> {
        Self::build_inner(sample, specs, opts, Some(frozen))
    }

    fn build_inner(
        sample: &AdSample,
        specs: &[EstimatorSpec],
        opts: &ModelOptions,
        frozen: Option<&ModelCache>,
    ) -> Result<Self, EstimatorError> {
        let rows: Vec<usize> = (0..sample.len()).collect();
        let mut designs: Vec<(Vec<Covariate>, CellDesign)> = Vec::new();
        for spec in specs.iter().filter(|s| s.has_model()) {
            if !designs.iter().any(|(c, _)| *c == spec.covariates) {
                let d = CellDesign::from_sample(sample, &rows, &spec.covariates).map_err(|source| {
                    EstimatorError::Model {
                        skill: "*".into(),
                        estimator: spec.name,
                        source,
                    }
                })?;
                designs.push((spec.covariates.clone(), d));
            }
        }
        let jobs: Vec<(usize, &EstimatorSpec)> = (0..sample.catalog.len())
            .flat_map(|k| specs.iter().filter(|s| s.has_model()).map(move |s| (k, s)))
            .collect();
        type Fitted = Result<((usize, EstimatorName), CachedModel), EstimatorError>;
        let fitted: Vec<Fitted> = jobs
            .par_iter()
            .map(|&(k, spec)| {
                let design = &designs
                    .iter()
                    .find(|(c, _)| *c == spec.covariates)
                    .expect("design built")
                    .1;
                let y = sample.skill_column(k, &rows);
                let frozen_lambda = frozen
                    .and_then(|f| f.get(k, spec.name))
                    .and_then(|m| m.fit())
                    .map(|f| f.lambda);
                let model =
                    fit_model(spec, &y, design, opts, k, frozen_lambda).map_err(|source| EstimatorError::Model {
                        skill: sample.catalog.names()[k].clone(),
                        estimator: spec.name,
                        source,
                    })?;
                Ok(((k, spec.name), model))
            })
            .collect();
        let mut models = HashMap::new();
        for r in fitted {
            let (key, model) = r?;
            models.insert(key, model);
        }
        Ok(ModelCache { models })
    }

    pub fn get(&self, skill: usize, estimator: EstimatorName) -> Option<&CachedModel> {
        self.models.get(&(skill, estimator))
    }

    pub fn insert(&mut self, skill: usize, estimator: EstimatorName, model: CachedModel) {
        self.models.insert((skill, estimator), model);
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

fn fit_model(
    spec: &EstimatorSpec,
    y: &[bool],
    design: &CellDesign,
    opts: &ModelOptions,
    skill: usize,
    frozen_lambda: Option<f64>,
) -> Result<CachedModel, GlmError> {
    let positives = y.iter().filter(|v| **v).count();
    if positives == 0 || positives == y.len() {
        return Ok(CachedModel::Constant(positives as f64 / y.len().max(1) as f64));
    }
    let mut lasso = opts.lasso.clone();
    lasso.seed = derive_seed(opts.lasso.seed, skill as u64, estimator_index(spec.name));
    if frozen_lambda.is_some() {
        lasso.fixed_lambda = frozen_lambda;
    }
    let p = design.n_features();
    let fit = match spec.model_tag {
        ModelTag::None => unreachable!("design-only estimators have no model"),
        ModelTag::Logistic => match glm::fit_logistic_mle_cells(y, design) {
            Ok(fit) => {
                return Ok(CachedModel::Fit {
                    fit,
                    separation_fallback: false,
                })
            }
            Err(GlmError::SeparationDetected { .. }) => {
                let rho = glm::pilot_ridge_penalty(y, design, opts.separation_ridge_fraction)?;
                let fit = glm::fit_ridge(y, design, rho)?;
                return Ok(CachedModel::Fit {
                    fit,
                    separation_fallback: true,
                });
            }
            Err(e) => return Err(e),
        },
        ModelTag::Lasso => glm::fit_lasso_path(y, design, &vec![1.0; p], &lasso)?,
        ModelTag::AdaptiveLasso => {
            let rho = glm::pilot_ridge_penalty(y, design, opts.pilot_ridge_fraction)?;
            let pilot = glm::fit_ridge(y, design, rho)?;
            glm::fit_adaptive_lasso_with_pilot(y, design, &pilot.coefficients, opts.gamma, &lasso)?
        }
    };
    Ok(CachedModel::Fit {
        fit,
        separation_fallback: false,
    })
}

/// One estimate of a skill prevalence.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEstimate {
    pub skill: String,
    pub wave: Wave,
    pub estimator: EstimatorName,
    pub value: f64,
    pub weights: WeightDiagnostics,
    /// μ̂ was constant, so only the population size was calibrated.
    pub degenerate_model: bool,
    /// The logistic MLE separated and a tiny ridge replaced it.
    pub separation_fallback: bool,
    /// The value fell outside [0, 1] (only possible with negative weights).
    pub out_of_range: bool,
}

/// `Σ_cells total(cell) · μ̂(cell)` over the cells of the model's covariates.
pub fn population_model_total(
    fit: &ModelFit,
    totals: &TotalsTable,
    covariates: &[Covariate],
) -> Result<f64, EstimatorError> {
    let uncovered = |e: GlmError| match e {
        GlmError::UncoveredCell(c) => EstimatorError::UncoveredCell(c),
        other => EstimatorError::UncoveredCell(other.to_string()),
    };
    match covariates {
        [] => Ok(totals.grand_total * glm::sigmoid(fit.intercept)),
        [cov] => {
            let mut acc = 0.0;
            for (code, t) in totals.marginals_of(*cov) {
                acc += t * fit.cell_mean(&[(*cov, code)]).map_err(uncovered)?;
            }
            Ok(acc)
        }
        [a, b]
            if {
                let mut s = [*a, *b];
                s.sort();
                s == [Covariate::Occupation, Covariate::Nace]
            } =>
        {
            if !totals.has_cross() {
                return Err(EstimatorError::UncoveredCell("no NACE x occupation totals".into()));
            }
            let mut acc = 0.0;
            for ((nace, occ), &t) in &totals.cross {
                if t > 0.0 {
                    let mu = fit
                        .cell_mean(&[(Covariate::Nace, nace), (Covariate::Occupation, occ)])
                        .map_err(uncovered)?;
                    acc += t * mu;
                }
            }
            Ok(acc)
        }
        other => Err(EstimatorError::UnsupportedCovariates(other.to_vec())),
    }
}

/// Looks up skill indices by name.
pub fn skill_indices<S: AsRef<str>>(sample: &AdSample, names: &[S]) -> Result<Vec<usize>, EstimatorError> {
    names
        .iter()
        .map(|n| {
            sample
                .catalog
                .index_of(n.as_ref())
                .ok_or_else(|| EstimatorError::UnknownSkill(n.as_ref().to_string()))
        })
        .collect()
}

/// One estimate for a single (spec, skill, wave).
pub fn estimate(
    spec: &EstimatorSpec,
    sample: &AdSample,
    totals: &TotalsTable,
    skill: &str,
    wave: Wave,
    cache: &ModelCache,
) -> Result<PointEstimate, EstimatorError> {
    let k = skill_indices(sample, &[skill])?[0];
    let mut out = estimate_wave_skills(std::slice::from_ref(spec), sample, totals, wave, &[k], cache)?;
    Ok(out.remove(0))
}

/// All specs for every catalog skill in one wave.
pub fn estimate_wave(
    specs: &[EstimatorSpec],
    sample: &AdSample,
    totals: &TotalsTable,
    wave: Wave,
    cache: &ModelCache,
) -> Result<Vec<PointEstimate>, EstimatorError> {
    let skills: Vec<usize> = (0..sample.catalog.len()).collect();
    estimate_wave_skills(specs, sample, totals, wave, &skills, cache)
}

/// Estimates ordered skill-major, then in `specs` order.
pub fn estimate_wave_skills(
    specs: &[EstimatorSpec],
    sample: &AdSample,
    totals: &TotalsTable,
    wave: Wave,
    skills: &[usize],
    cache: &ModelCache,
) -> Result<Vec<PointEstimate>, EstimatorError> {
    let rows = sample.wave_rows(wave);
    if rows.is_empty() {
        return Err(EstimatorError::EmptyWave(wave));
    }
    let n_hat = totals.grand_total;
    let d = calibration::pseudo_weights(rows.len(), n_hat).map_err(|source| EstimatorError::Calibration {
        skill: "*".into(),
        estimator: EstimatorName::Htsrs,
        wave,
        source,
    })?;

    // Shared GREG weights, computed once per wave.
    let greg = match specs.iter().find(|s| s.name == EstimatorName::Ecgreg) {
        Some(spec) => {
            let design_err = |source| EstimatorError::Design {
                estimator: spec.name,
                wave,
                source,
            };
            let x = design::encode_rows(sample, &rows, &spec.covariates, false).map_err(design_err)?;
            let t = design::totals_vector(totals, &x).map_err(design_err)?;
            Some(
                calibration::calibrate_chi2(&d, &x, &t).map_err(|source| EstimatorError::Calibration {
                    skill: "shared".into(),
                    estimator: spec.name,
                    wave,
                    source,
                })?,
            )
        }
        None => None,
    };

    // Unit-to-cell maps for each model covariate set, restricted to this wave.
    let mut wave_designs: Vec<(Vec<Covariate>, CellDesign)> = Vec::new();
    for spec in specs.iter().filter(|s| s.has_model()) {
        if spec.name == EstimatorName::Eclasso2 && !totals.has_cross() {
            return Err(EstimatorError::MissingCrossTotals(spec.name, wave));
        }
        if !wave_designs.iter().any(|(c, _)| *c == spec.covariates) {
            let cd =
                CellDesign::from_sample(sample, &rows, &spec.covariates).map_err(|source| EstimatorError::Model {
                    skill: "*".into(),
                    estimator: spec.name,
                    source,
                })?;
            wave_designs.push((spec.covariates.clone(), cd));
        }
    }

    let mut out = Vec::with_capacity(skills.len() * specs.len());
    for &k in skills {
        let skill = &sample.catalog.names()[k];
        let y = sample.skill_column(k, &rows);
        for spec in specs {
            let (weights, degenerate_model, separation_fallback) = match spec.model_tag {
                ModelTag::None => match spec.name {
                    EstimatorName::Ecgreg => (greg.clone().expect("GREG weights computed"), false, false),
                    _ => (d.clone(), false, false),
                },
                _ => {
                    let model = cache.get(k, spec.name).ok_or_else(|| EstimatorError::MissingModel {
                        skill: skill.clone(),
                        estimator: spec.name,
                    })?;
                    let (mu, t_mu, sep) = match model {
                        CachedModel::Constant(c) => (vec![*c; rows.len()], c * n_hat, false),
                        CachedModel::Fit {
                            fit,
                            separation_fallback,
                        } => {
                            let cd = &wave_designs
                                .iter()
                                .find(|(c, _)| *c == spec.covariates)
                                .expect("wave design")
                                .1;
                            let cell_mu = fit.cell_means(cd).map_err(|source| EstimatorError::Model {
                                skill: skill.clone(),
                                estimator: spec.name,
                                source,
                            })?;
                            let mu: Vec<f64> = cd.unit_cell().iter().map(|&c| cell_mu[c]).collect();
                            let t_mu = population_model_total(fit, totals, &spec.covariates)?;
                            (mu, t_mu, *separation_fallback)
                        }
                    };
                    let mc = calibration::calibrate_model_assisted(&d, &mu, n_hat, t_mu, skill).map_err(|source| {
                        EstimatorError::Calibration {
                            skill: skill.clone(),
                            estimator: spec.name,
                            wave,
                            source,
                        }
                    })?;
                    (mc.weights, mc.degenerate_model, sep)
                }
            };
            out.push(point(
                skill,
                wave,
                spec.name,
                &weights,
                &y,
                degenerate_model,
                separation_fallback,
            ));
        }
    }
    Ok(out)
}

fn point(
    skill: &str,
    wave: Wave,
    estimator: EstimatorName,
    weights: &WeightVector,
    y: &[bool],
    degenerate_model: bool,
    separation_fallback: bool,
) -> PointEstimate {
    let value = weights.hajek_mean(y);
    PointEstimate {
        skill: skill.to_string(),
        wave,
        estimator,
        value,
        weights: weights.diagnostics(),
        degenerate_model,
        separation_fallback,
        out_of_range: !(0.0..=1.0).contains(&value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AdRecord, CategoryDictionary, Dictionaries, SkillCatalog, SkillSet};

    /// Sample with one skill, occupations given per record, all in one wave.
    fn sample(occ: &[u16], nace: &[u16], skill: &[bool], n_occ: usize, n_nace: usize) -> AdSample {
        let dict = |n: usize, p: &str| CategoryDictionary::from_ordered((0..n).map(|i| format!("{p}{i}")).collect());
        AdSample {
            catalog: SkillCatalog::new(["A"]).unwrap(),
            dictionaries: Dictionaries::new(dict(n_occ, "o"), dict(n_nace, "n"), dict(1, "p")),
            records: occ
                .iter()
                .zip(nace)
                .zip(skill)
                .map(|((&o, &n), &s)| AdRecord {
                    wave: Wave(2011),
                    covariates: [Some(o), Some(n), Some(0)],
                    skills: SkillSet::from_bits(u64::from(s)),
                })
                .collect(),
        }
    }

    fn totals(occ: &[f64], cross: &[Vec<f64>]) -> TotalsTable {
        let grand: f64 = occ.iter().sum();
        let mut t = TotalsTable::new(Wave(2011), grand);
        for (i, v) in occ.iter().enumerate() {
            t.marginals.insert((Covariate::Occupation, format!("o{i}")), *v);
        }
        for (n, row) in cross.iter().enumerate() {
            t.marginals.insert((Covariate::Nace, format!("n{n}")), row.iter().sum());
            t.rel_se.insert((Covariate::Nace, format!("n{n}")), 5.0);
            for (o, v) in row.iter().enumerate() {
                t.cross.insert((format!("n{n}"), format!("o{o}")), *v);
            }
        }
        t.validate().unwrap();
        t
    }

    fn fast_opts() -> ModelOptions {
        ModelOptions {
            lasso: LassoOptions {
                n_lambda: 30,
                folds: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("ecalasso1".parse::<EstimatorName>().unwrap(), EstimatorName::Ecalasso1);
        assert!(matches!(
            "ECFOO".parse::<EstimatorName>(),
            Err(EstimatorError::UnknownEstimator(_))
        ));
        assert_eq!(EstimatorSpec::standard(EstimatorName::Eclasso2).covariates.len(), 2);
    }

    #[test]
    fn constant_outcome_gives_one_everywhere() {
        let occ: Vec<u16> = (0..30).map(|i| (i % 3) as u16).collect();
        let nace: Vec<u16> = (0..30).map(|i| (i % 2) as u16).collect();
        let s = sample(&occ, &nace, &[true; 30], 3, 2);
        let t = totals(&[100.0, 50.0, 25.0], &[vec![60.0, 30.0, 10.0], vec![40.0, 20.0, 15.0]]);
        let specs = EstimatorSpec::all();
        let cache = ModelCache::build(&s, &specs, &fast_opts()).unwrap();
        for e in estimate_wave(&specs, &s, &t, Wave(2011), &cache).unwrap() {
            assert!((e.value - 1.0).abs() < 1e-12, "{:?}", e);
        }
    }

    #[test]
    fn ecgreg_equals_enumerated_totals_weighted_mean() {
        // Cell prevalences 1/4, 2/3, 1/2 in the sample; cell totals 500, 300, 200.
        let occ = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2];
        let y = [
            true, false, false, false, true, true, false, true, true, true, false, false, false, true, true, false,
            true, false, false, true,
        ];
        let s = sample(&occ, &[0; 20], &y, 3, 1);
        let t = totals(&[500.0, 300.0, 200.0], &[vec![500.0, 300.0, 200.0]]);
        let spec = EstimatorSpec::standard(EstimatorName::Ecgreg);
        let got = estimate(&spec, &s, &t, "A", Wave(2011), &ModelCache::default()).unwrap();
        let cell_mean = |c: u16| {
            let idx: Vec<usize> = (0..20).filter(|&i| occ[i] == c).collect();
            idx.iter().filter(|&&i| y[i]).count() as f64 / idx.len() as f64
        };
        let truth = (500.0 * cell_mean(0) + 300.0 * cell_mean(1) + 200.0 * cell_mean(2)) / 1000.0;
        assert!((got.value - truth).abs() < 1e-12);
        let hts = estimate(
            &EstimatorSpec::standard(EstimatorName::Htsrs),
            &s,
            &t,
            "A",
            Wave(2011),
            &ModelCache::default(),
        )
        .unwrap();
        assert_eq!(hts.value, y.iter().filter(|v| **v).count() as f64 / 20.0);
    }

    #[test]
    fn deterministic_outcome_recovers_truth() {
        // Skill present exactly in o0 and o2; the sample heavily over-represents o0.
        let occ: Vec<u16> = [0; 40].into_iter().chain([1; 6]).chain([2; 8]).collect();
        let y: Vec<bool> = occ.iter().map(|&o| o != 1).collect();
        let s = sample(&occ, &[0; 54], &y, 3, 1);
        let t = totals(&[100.0, 350.0, 50.0], &[vec![100.0, 350.0, 50.0]]);
        let truth = 150.0 / 500.0;
        let specs = vec![
            EstimatorSpec::standard(EstimatorName::Ecmc),
            EstimatorSpec::standard(EstimatorName::Ecgreg),
        ];
        let cache = ModelCache::build(&s, &specs, &fast_opts()).unwrap();
        for e in estimate_wave(&specs, &s, &t, Wave(2011), &cache).unwrap() {
            assert!((e.value - truth).abs() < 1e-6, "{:?}", e);
        }
        let hts = estimate(
            &EstimatorSpec::standard(EstimatorName::Htsrs),
            &s,
            &t,
            "A",
            Wave(2011),
            &cache,
        )
        .unwrap();
        assert!(hts.value - truth > 0.5);
    }

    #[test]
    fn intercept_only_population_total() {
        let fit = ModelFit::intercept_only(0.3);
        let t = totals(&[100.0, 50.0], &[vec![100.0, 50.0]]);
        let v = population_model_total(&fit, &t, &[]).unwrap();
        assert!((v - 0.3 * 150.0).abs() < 1e-9);
    }

    #[test]
    fn population_total_matches_pseudo_unit_expansion() {
        let occ: Vec<u16> = (0..60).map(|i| (i % 3) as u16).collect();
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0 && i % 2 == 0 || i % 7 == 0).collect();
        let s = sample(&occ, &[0; 60], &y, 3, 1);
        let rows: Vec<usize> = (0..60).collect();
        let cd = CellDesign::from_sample(&s, &rows, &[Covariate::Occupation]).unwrap();
        let fit = glm::fit_logistic_mle_cells(&y, &cd).unwrap();
        let t = totals(&[7.0, 4.0, 9.0], &[vec![7.0, 4.0, 9.0]]);
        // Expand every totals cell into that many pseudo-units and sum μ̂ unit by unit.
        let mut pseudo = Vec::new();
        for (o, count) in [(0u16, 7), (1, 4), (2, 9)] {
            pseudo.extend(std::iter::repeat_n(o, count));
        }
        let ps = sample(&pseudo, &vec![0; pseudo.len()], &vec![false; pseudo.len()], 3, 1);
        let prow: Vec<usize> = (0..pseudo.len()).collect();
        let pcd = CellDesign::from_sample(&ps, &prow, &[Covariate::Occupation]).unwrap();
        let cell_mu = fit.cell_means(&pcd).unwrap();
        let brute: f64 = pcd.unit_cell().iter().map(|&c| cell_mu[c]).sum();
        let got = population_model_total(&fit, &t, &[Covariate::Occupation]).unwrap();
        assert!((got - brute).abs() < 1e-9);
    }

    #[test]
    fn collapsed_cell_is_uncovered() {
        let occ: Vec<u16> = (0..40).map(|i| (i % 2) as u16).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let s = sample(&occ, &[0; 40], &y, 2, 1);
        let rows: Vec<usize> = (0..40).collect();
        let cd = CellDesign::from_sample(&s, &rows, &[Covariate::Occupation]).unwrap();
        let fit = glm::fit_logistic_mle_cells(&y, &cd).unwrap();
        let t = totals(&[10.0, 10.0, 5.0], &[vec![10.0, 10.0, 5.0]]);
        assert!(matches!(
            population_model_total(&fit, &t, &[Covariate::Occupation]),
            Err(EstimatorError::UncoveredCell(_))
        ));
    }

    #[test]
    fn eclasso2_requires_cross_totals() {
        let occ: Vec<u16> = (0..40).map(|i| (i % 2) as u16).collect();
        let nace: Vec<u16> = (0..40).map(|i| (i / 2 % 2) as u16).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let s = sample(&occ, &nace, &y, 2, 2);
        let mut t = totals(&[10.0, 10.0], &[vec![5.0, 5.0], vec![5.0, 5.0]]);
        t.cross.clear();
        let specs = vec![EstimatorSpec::standard(EstimatorName::Eclasso2)];
        let cache = ModelCache::build(&s, &specs, &fast_opts()).unwrap();
        assert!(matches!(
            estimate_wave(&specs, &s, &t, Wave(2011), &cache),
            Err(EstimatorError::MissingCrossTotals(..))
        ));
    }

    #[test]
    fn ecgreg_reproduces_occupation_shares() {
        let occ: Vec<u16> = (0..90).map(|i| (i * 7 % 4) as u16).collect();
        let y: Vec<bool> = (0..90).map(|i| i % 5 < 2).collect();
        let s = sample(&occ, &[0; 90], &y, 4, 1);
        let t = totals(&[40.0, 30.0, 20.0, 10.0], &[vec![40.0, 30.0, 20.0, 10.0]]);
        let rows: Vec<usize> = (0..90).collect();
        let x = design::encode_rows(&s, &rows, &[Covariate::Occupation], false).unwrap();
        let tv = design::totals_vector(&t, &x).unwrap();
        let d = calibration::pseudo_weights(90, 100.0).unwrap();
        let w = calibration::calibrate_chi2(&d, &x, &tv).unwrap();
        let total: f64 = w.values.iter().sum();
        for (j, target) in [0.4, 0.3, 0.2, 0.1].iter().enumerate() {
            let share: f64 = (0..90)
                .filter(|&i| occ[i] == j as u16)
                .map(|i| w.values[i])
                .sum::<f64>()
                / total;
            assert!((share - target).abs() <= 1e-8 * target);
        }
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        // Occupation o2 never has the skill, so the MLE separates.
        let occ: Vec<u16> = (0..60).map(|i| (i % 3) as u16).collect();
        let y: Vec<bool> = (0..60).map(|i| i % 3 != 2 && i % 2 == 0).collect();
        let s = sample(&occ, &[0; 60], &y, 3, 1);
        let specs = vec![EstimatorSpec::standard(EstimatorName::Ecmc)];
        let cache = ModelCache::build(&s, &specs, &fast_opts()).unwrap();
        let t = totals(&[10.0, 10.0, 10.0], &[vec![10.0, 10.0, 10.0]]);
        let est = estimate_wave(&specs, &s, &t, Wave(2011), &cache).unwrap();
        assert!(est[0].separation_fallback);
        // The saturated model reproduces the cell means, so the estimate is their average.
        assert!((est[0].value - 1.0 / 3.0).abs() < 1e-6, "{}", est[0].value);
    }
}
