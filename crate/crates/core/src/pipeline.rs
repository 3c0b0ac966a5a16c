//! End-to-end runs driven by a TOML configuration: load, impute, collapse,
//! estimate, bootstrap and write the report tables.
//!
//! ```toml
//! ads = "ads.csv"            # paths are relative to the config file
//! totals = "totals.csv"
//! output = "report"
//! estimators = ["HTSRS", "ECGREG", "ECLASSO1"]   # default: all six
//! skills = []                # default: every skill column of the ads file
//! waves = []                 # default: every wave in the ads file
//! seed = 42
//!
//! [collapse]
//! threshold = 20
//! rules = """
//! occupation: 14 -> 13
//! """
//!
//! [bootstrap]
//! replicates = 500
//! freeze_lambda = false
//! dump_draws = false
//!
//! [model]
//! gamma = 1.0
//! folds = 10
//! ```
//!
//! Report files never depend on the worker count or on the output location,
//! so two runs with the same inputs and seed are byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bootstrap::{self, BootstrapConfig, BootstrapOutcome};
use crate::data::{self, AdSample, Covariate, SkillCatalog, TotalsTable, Wave};
use crate::design::{CollapseMap, DEFAULT_COLLAPSE_THRESHOLD};
use crate::estimators::{self, EstimatorName, EstimatorSpec, ModelCache, ModelOptions, PointEstimate};
use crate::glm::LassoOptions;
use crate::metrics;
use crate::simulator::{self, SyntheticDesign};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Design(#[from] crate::design::DesignError),
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error(transparent)]
    Bootstrap(#[from] bootstrap::BootstrapError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Simulator(#[from] simulator::SimulatorError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("write error: {0}")]
    Write(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_estimators() -> Vec<String> {
    EstimatorName::ALL.iter().map(|e| e.to_string()).collect()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    #[serde(default)]
    pub rules: String,
    #[serde(default = "default_threshold")]
    pub threshold: usize,
}

fn default_threshold() -> usize {
    DEFAULT_COLLAPSE_THRESHOLD
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            rules: String::new(),
            threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub freeze_lambda: bool,
    #[serde(default)]
    pub dump_draws: bool,
    /// Excluded from the manifest: results do not depend on it.
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

fn default_replicates() -> usize {
    500
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            replicates: default_replicates(),
            freeze_lambda: false,
            dump_draws: false,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: f64,
    pub folds: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub tolerance: f64,
    pub pilot_ridge_fraction: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelOptions::default();
        ModelSection {
            gamma: m.gamma,
            folds: m.lasso.folds,
            n_lambda: m.lasso.n_lambda,
            lambda_min_ratio: m.lasso.lambda_min_ratio,
            tolerance: m.lasso.tolerance,
            pilot_ridge_fraction: m.pilot_ridge_fraction,
        }
    }
}

/// Everything a run needs; flag overrides are applied before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ads: PathBuf,
    pub totals: PathBuf,
    /// Excluded from the manifest so reports do not depend on where they land.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default)]
    pub skills: Vec<String>,
    #[serde(default)]
    pub waves: Vec<u16>,
    #[serde(default)]
    pub seed: u64,
    /// Fill missing covariates by nearest-neighbour imputation before estimating.
    #[serde(default = "default_true")]
    pub impute: bool,
    #[serde(default)]
    pub collapse: CollapseConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub model: ModelSection,
}

impl RunConfig {
    /// Minimal configuration with defaults for everything else.
    pub fn new(ads: impl Into<PathBuf>, totals: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunConfig {
            ads: ads.into(),
            totals: totals.into(),
            output: output.into(),
            estimators: default_estimators(),
            skills: Vec::new(),
            waves: Vec::new(),
            seed: 0,
            impute: true,
            collapse: CollapseConfig::default(),
            bootstrap: BootstrapSection::default(),
            model: ModelSection::default(),
        }
    }

    /// Reads a TOML file; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.ads, &mut cfg.totals, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut s = toml::to_string(self).expect("config serializes");
        s.insert_str(0, &format!("output = {:?}\n", self.output.display().to_string()));
        s
    }

    /// Checks everything that can be checked without running an estimator.
    pub fn validate(&self, bootstrap: bool) -> Result<Vec<EstimatorSpec>, PipelineError> {
        let specs = EstimatorSpec::parse_list(&self.estimators)?;
        if specs.is_empty() {
            return Err(PipelineError::Config("no estimators requested".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].iter().any(|t| t.name == s.name) {
                return Err(PipelineError::Config(format!("estimator {} listed twice", s.name)));
            }
        }
        for p in [&self.ads, &self.totals] {
            if !p.is_file() {
                return Err(PipelineError::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        if bootstrap && self.bootstrap.replicates < 2 {
            return Err(PipelineError::Config(format!(
                "bootstrap needs at least 2 replicates (got {})",
                self.bootstrap.replicates
            )));
        }
        if self.bootstrap.workers == Some(0) {
            return Err(PipelineError::Config("workers must be positive".into()));
        }
        let m = &self.model;
        if m.folds < 2
            || m.n_lambda < 2
            || !(m.lambda_min_ratio > 0.0 && m.lambda_min_ratio < 1.0)
            || !(m.gamma > 0.0)
            || !(m.tolerance > 0.0)
            || !(m.pilot_ridge_fraction > 0.0)
        {
            return Err(PipelineError::Config("model settings out of range".into()));
        }
        CollapseMap::parse(&self.collapse.rules)?;
        Ok(specs)
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            lasso: LassoOptions {
                n_lambda: self.model.n_lambda,
                lambda_min_ratio: self.model.lambda_min_ratio,
                folds: self.model.folds,
                seed: self.seed,
                tolerance: self.model.tolerance,
                ..LassoOptions::default()
            },
            gamma: self.model.gamma,
            pilot_ridge_fraction: self.model.pilot_ridge_fraction,
            ..ModelOptions::default()
        }
    }

    /// SHA-256 of the manifest echo of this configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Skill columns are every column after `wave, occupation, nace, province`.
pub fn ads_catalog(path: &Path) -> Result<SkillCatalog, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(File::open(path).map_err(io_err(path))?);
    let fixed = [
        "wave",
        Covariate::Occupation.name(),
        Covariate::Nace.name(),
        Covariate::Province.name(),
    ];
    let names: Vec<String> = rdr
        .headers()?
        .iter()
        .filter(|h| !fixed.contains(h))
        .map(str::to_string)
        .collect();
    Ok(SkillCatalog::new(names)?)
}

/// Inputs after imputation, collapsing and wave selection.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub sample: AdSample,
    pub totals: BTreeMap<Wave, TotalsTable>,
    pub waves: Vec<Wave>,
    pub skills: Vec<usize>,
    pub imputed: usize,
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData, PipelineError> {
    let catalog = ads_catalog(&cfg.ads)?;
    let mut sample = data::load_ads(&cfg.ads, &catalog)?;
    let mut totals = data::load_totals_by_wave(&cfg.totals)?;
    let waves: Vec<Wave> = if cfg.waves.is_empty() {
        sample.waves().into_iter().collect()
    } else {
        cfg.waves.iter().map(|w| Wave(*w)).collect()
    };
    for w in &waves {
        if !totals.contains_key(w) {
            return Err(PipelineError::Config(format!("no totals for wave {w}")));
        }
    }
    if !cfg.waves.is_empty() {
        let rows: Vec<usize> = (0..sample.len())
            .filter(|&i| waves.contains(&sample.records[i].wave))
            .collect();
        sample = sample.select(&rows);
    }
    for w in &waves {
        if sample.wave_rows(*w).is_empty() {
            return Err(PipelineError::Config(format!("no ads for wave {w}")));
        }
    }
    totals.retain(|w, _| waves.contains(w));
    let skills = if cfg.skills.is_empty() {
        (0..sample.catalog.len()).collect()
    } else {
        estimators::skill_indices(&sample, &cfg.skills)?
    };

    let incomplete = sample.records.iter().filter(|r| !r.is_complete()).count();
    if incomplete > 0 {
        if !cfg.impute {
            return Err(PipelineError::Config(format!(
                "{incomplete} ads have missing covariates and imputation is disabled"
            )));
        }
        sample = data::impute_gower_1nn(&sample)?;
    }

    let collapse = CollapseMap::parse(&cfg.collapse.rules)?.with_threshold(cfg.collapse.threshold);
    let resolved = collapse.resolve(&sample)?;
    if !resolved.is_empty() {
        sample = resolved.apply_to_sample(&sample);
        for t in totals.values_mut() {
            *t = resolved.apply_to_totals(t);
        }
    }
    Ok(PreparedData {
        sample,
        totals,
        waves,
        skills,
        imputed: incomplete,
    })
}

/// Point estimates and diagnostics of one run.
#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub estimates: Vec<PointEstimate>,
    pub auc: BTreeMap<(String, EstimatorName), f64>,
    pub cramers_v: BTreeMap<(String, Covariate), f64>,
    pub bootstrap: Option<BootstrapOutcome>,
}

impl EstimateReport {
    /// Unweighted mean over waves per (skill, estimator).
    pub fn pooled(&self) -> BTreeMap<(String, EstimatorName), f64> {
        let mut acc: BTreeMap<(String, EstimatorName), (f64, usize)> = BTreeMap::new();
        for e in &self.estimates {
            let a = acc.entry((e.skill.clone(), e.estimator)).or_default();
            a.0 += e.value;
            a.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Bootstrap CV per (skill, estimator), averaged over waves.
    pub fn mean_cv(&self) -> BTreeMap<(String, EstimatorName), f64> {
        let mut acc: BTreeMap<(String, EstimatorName), (f64, usize)> = BTreeMap::new();
        if let Some(b) = &self.bootstrap {
            for ((_, skill, est), d) in &b.distributions {
                let a = acc.entry((skill.clone(), *est)).or_default();
                a.0 += d.cv_pct;
                a.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Computes the point estimates, AUC and associations, plus the bootstrap when
/// `with_bootstrap` is set.
pub fn run(cfg: &RunConfig, with_bootstrap: bool) -> Result<EstimateReport, PipelineError> {
    let specs = cfg.validate(with_bootstrap)?;
    let prepared = prepare(cfg)?;
    let PreparedData {
        sample,
        totals,
        waves,
        skills,
        ..
    } = &prepared;
    let opts = cfg.model_options();
    let cache = ModelCache::build(sample, &specs, &opts)?;
    let mut estimates = Vec::new();
    for w in waves {
        estimates.extend(estimators::estimate_wave_skills(
            &specs, sample, &totals[w], *w, skills, &cache,
        )?);
    }
    let mut auc = BTreeMap::new();
    for &k in skills {
        for spec in specs.iter().filter(|s| s.has_model()) {
            if let Some(a) = bootstrap::model_auc(sample, k, spec, &cache) {
                auc.insert((sample.catalog.names()[k].clone(), spec.name), a);
            }
        }
    }
    let all_v = metrics::skill_associations(sample)?;
    let names: Vec<&String> = skills.iter().map(|&k| &sample.catalog.names()[k]).collect();
    let cramers_v = all_v.into_iter().filter(|((s, _), _)| names.contains(&s)).collect();

    let bootstrap = if with_bootstrap {
        let bcfg = BootstrapConfig {
            replicates: cfg.bootstrap.replicates,
            seed: cfg.seed,
            estimators: specs.clone(),
            skills: names.iter().map(|s| s.to_string()).collect(),
            waves: waves.clone(),
            freeze_lambda: cfg.bootstrap.freeze_lambda,
            model: opts,
            workers: cfg.bootstrap.workers,
            ..BootstrapConfig::default()
        };
        Some(bootstrap::run_bootstrap(&bcfg, sample, totals)?)
    } else {
        None
    };
    Ok(EstimateReport {
        estimates,
        auc,
        cramers_v,
        bootstrap,
    })
}

/// `100 · value` rounded half-up to one decimal.
pub fn percent_1dp(value: f64) -> String {
    let tenths = (value * 1000.0 + 0.5).floor();
    let tenths = if tenths == 0.0 { 0.0 } else { tenths };
    format!("{:.1}", tenths / 10.0)
}

fn round_2dp(value: f64) -> String {
    let hundredths = (value * 100.0 + 0.5).floor();
    let hundredths = if hundredths == 0.0 { 0.0 } else { hundredths };
    format!("{:.2}", hundredths / 100.0)
}

fn full(v: f64) -> String {
    format!("{v:.17e}")
}

fn create(path: &Path) -> Result<File, PipelineError> {
    File::create(path).map_err(io_err(path))
}

/// Skill × estimator table in catalog and estimator order.
fn write_wide(
    path: &Path,
    skills: &[String],
    estimators: &[EstimatorName],
    values: &BTreeMap<(String, EstimatorName), f64>,
    fmt: fn(f64) -> String,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["skill".to_string()];
    header.extend(estimators.iter().map(|e| e.to_string()));
    wtr.write_record(&header)?;
    for s in skills {
        let mut row = vec![s.clone()];
        for e in estimators {
            row.push(values.get(&(s.clone(), *e)).map(|v| fmt(*v)).unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    estimates: usize,
    replicates: Option<usize>,
    dropped_replicates: usize,
    truncated_total_draws: usize,
}

/// Writes every report file into `cfg.output`.
pub fn write_report(cfg: &RunConfig, command: &str, report: &EstimateReport) -> Result<(), PipelineError> {
    let dir = &cfg.output;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut skills: Vec<String> = Vec::new();
    let mut names: Vec<EstimatorName> = Vec::new();
    for e in &report.estimates {
        if !skills.contains(&e.skill) {
            skills.push(e.skill.clone());
        }
        if !names.contains(&e.estimator) {
            names.push(e.estimator);
        }
    }

    write_wide(
        &dir.join("point_estimates.csv"),
        &skills,
        &names,
        &report.pooled(),
        percent_1dp,
    )?;

    let mut wtr = csv::Writer::from_writer(create(&dir.join("point_estimates_by_wave.csv"))?);
    wtr.write_record(["wave", "skill", "estimator", "estimate", "percent"])?;
    for e in &report.estimates {
        wtr.write_record([
            e.wave.to_string(),
            e.skill.clone(),
            e.estimator.to_string(),
            full(e.value),
            percent_1dp(e.value),
        ])?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_writer(create(&dir.join("weight_diagnostics.csv"))?);
    wtr.write_record([
        "wave",
        "skill",
        "estimator",
        "min_weight",
        "max_weight",
        "negative_weights",
        "weight_sum",
        "degenerate_model",
        "separation_fallback",
        "out_of_range",
    ])?;
    for e in &report.estimates {
        let d = &e.weights;
        wtr.write_record([
            e.wave.to_string(),
            e.skill.clone(),
            e.estimator.to_string(),
            full(d.min),
            full(d.max),
            d.negative.to_string(),
            full(d.sum),
            e.degenerate_model.to_string(),
            e.separation_fallback.to_string(),
            e.out_of_range.to_string(),
        ])?;
    }
    wtr.flush()?;

    let model_names: Vec<EstimatorName> = names
        .iter()
        .copied()
        .filter(|n| EstimatorSpec::standard(*n).has_model())
        .collect();
    write_wide(&dir.join("auc.csv"), &skills, &model_names, &report.auc, |v| {
        format!("{v:.4}")
    })?;

    let mut wtr = csv::Writer::from_writer(create(&dir.join("cramers_v.csv"))?);
    let mut header = vec!["skill"];
    header.extend(Covariate::ALL.iter().map(|c| c.name()));
    wtr.write_record(&header)?;
    for s in &skills {
        let mut row = vec![s.clone()];
        for c in Covariate::ALL {
            row.push(
                report
                    .cramers_v
                    .get(&(s.clone(), c))
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;

    if let Some(b) = &report.bootstrap {
        write_wide(&dir.join("cv.csv"), &skills, &names, &report.mean_cv(), round_2dp)?;
        write_wide(&dir.join("auc_bootstrap.csv"), &skills, &model_names, &b.auc, |v| {
            format!("{v:.4}")
        })?;
        let mut wtr = csv::Writer::from_writer(create(&dir.join("bootstrap_by_wave.csv"))?);
        wtr.write_record(["wave", "skill", "estimator", "mean", "variance", "sd", "cv_pct"])?;
        for ((w, s, e), d) in &b.distributions {
            wtr.write_record([
                w.to_string(),
                s.clone(),
                e.to_string(),
                full(d.mean),
                full(d.variance),
                full(d.sd()),
                full(d.cv_pct),
            ])?;
        }
        wtr.flush()?;
        if cfg.bootstrap.dump_draws {
            bootstrap::write_draws(create(&dir.join("draws.csv"))?, b)?;
        }
    }

    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg,
        estimates: report.estimates.len(),
        replicates: report.bootstrap.as_ref().map(|b| b.retained.len()),
        dropped_replicates: report.bootstrap.as_ref().map_or(0, |b| b.dropped),
        truncated_total_draws: report.bootstrap.as_ref().map_or(0, |b| b.truncations),
    };
    let path = dir.join("manifest.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f).map_err(io_err(&path))?;
    Ok(())
}

/// Point estimates only.
pub fn run_estimate(cfg: &RunConfig) -> Result<EstimateReport, PipelineError> {
    let report = run(cfg, false)?;
    write_report(cfg, "estimate", &report)?;
    Ok(report)
}

/// Point estimates plus the bootstrap.
pub fn run_bootstrap(cfg: &RunConfig) -> Result<EstimateReport, PipelineError> {
    let report = run(cfg, true)?;
    write_report(cfg, "bootstrap", &report)?;
    Ok(report)
}

/// Renders `point_estimates.csv` (and `cv.csv` when present) of a finished
/// run as aligned text.
pub fn render_report(output: &Path) -> Result<String, PipelineError> {
    let mut out = String::new();
    for (file, title) in [
        ("point_estimates.csv", "Point estimates (%)"),
        ("cv.csv", "Bootstrap CV (%)"),
        ("auc.csv", "AUC"),
    ] {
        let path = output.join(file);
        if !path.is_file() {
            if file == "point_estimates.csv" {
                return Err(PipelineError::Config(format!(
                    "{} not found; run `estimate` first",
                    path.display()
                )));
            }
            continue;
        }
        let mut rdr = csv::Reader::from_reader(File::open(&path).map_err(io_err(&path))?);
        let mut rows: Vec<Vec<String>> = vec![rdr.headers()?.iter().map(str::to_string).collect()];
        for r in rdr.records() {
            rows.push(r?.iter().map(str::to_string).collect());
        }
        let ncol = rows[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| {
                rows.iter()
                    .map(|r| r.get(j).map_or(0, |c| c.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        out.push_str(title);
        out.push('\n');
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == 0 {
                        format!("{c:<w$}", w = widths[j])
                    } else {
                        format!("{c:>w$}", w = widths[j])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Generates a synthetic dataset and a ready-to-run `run.toml` in `output`.
pub fn simulate(
    design: &SyntheticDesign,
    seed: u64,
    output: &Path,
) -> Result<simulator::SimulationOutput, PipelineError> {
    let out = simulator::generate(design, seed)?;
    simulator::write_output(&out, output)?;
    let cfg = RunConfig {
        seed,
        ..RunConfig::new("ads.csv", "totals.csv", "report")
    };
    let path = output.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(percent_1dp(0.5375), "53.8");
        assert_eq!(percent_1dp(0.53749), "53.7");
        assert_eq!(percent_1dp(0.0), "0.0");
        assert_eq!(percent_1dp(1.0), "100.0");
        assert_eq!(percent_1dp(0.00049), "0.0");
        assert_eq!(percent_1dp(0.00051), "0.1");
        assert_eq!(round_2dp(1.234), "1.23");
        assert_eq!(round_2dp(1.2351), "1.24");
    }

    #[test]
    fn unknown_estimator_rejected_before_io() {
        let mut cfg = RunConfig::new("/nonexistent/ads.csv", "/nonexistent/totals.csv", "/tmp/out");
        cfg.estimators = vec!["HTSRS".into(), "ECFOO".into()];
        assert!(matches!(
            cfg.validate(false),
            Err(PipelineError::Estimator(estimators::EstimatorError::UnknownEstimator(
                _
            )))
        ));
    }

    #[test]
    fn config_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let text = "ads = \"a.csv\"\ntotals = \"t.csv\"\noutput = \"out\"\nseed = 3\n[bootstrap]\nreplicates = 50\nworkers = 2\n";
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.ads, dir.path().join("a.csv"));
        assert_eq!(cfg.bootstrap.replicates, 50);
        assert_eq!(cfg.bootstrap.workers, Some(2));
        assert_eq!(cfg.estimators.len(), 6);
        let mut other = cfg.clone();
        other.bootstrap.workers = Some(7);
        other.output = PathBuf::from("/elsewhere");
        assert_eq!(cfg.hash(), other.hash());
        other.seed = 4;
        assert_ne!(cfg.hash(), other.hash());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back.seed, 3);
        assert!(toml::from_str::<RunConfig>("ads = \"a\"\ntotals = \"b\"\noutput = \"c\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn replicates_must_be_at_least_two() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        std::fs::write(&a, "x").unwrap();
        let mut cfg = RunConfig::new(&a, &a, dir.path());
        cfg.bootstrap.replicates = 1;
        assert!(cfg.validate(false).is_ok());
        assert!(matches!(cfg.validate(true), Err(PipelineError::Config(_))));
    }
}
