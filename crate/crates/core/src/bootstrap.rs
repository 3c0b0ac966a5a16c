//! Two-source bootstrap: perturbed totals plus resampled ads.
//!
//! Each replicate
//! 1. draws every NACE total from `Normal(T, rel_se/100 · T)`,
//! 2. rescales each NACE × occupation row by `draw / T`,
//! 3. derives occupation, province and grand totals from the perturbed cells,
//! 4. resamples each wave's ads with replacement,
//! 5. refits the working models on the pooled replicate and recomputes every
//!    estimator against the perturbed totals.
//!
//! Replicates run in parallel on independent ChaCha streams derived from the
//! master seed, so the draws do not depend on the number of workers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{AdSample, Covariate, TotalsTable, Wave};
use crate::estimators::{self, derive_seed, CachedModel, EstimatorName, EstimatorSpec, ModelCache, ModelOptions};
use crate::glm::CellDesign;
use crate::metrics;

/// Floor applied to non-positive normal draws of a total.
pub const TRUNCATION_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("no relative standard error for NACE section {0}")]
    MissingRelSE(String),
    #[error("at least two replicates are required (got {0})")]
    TooFewReplicates(usize),
    #[error("wave {0} is missing from the sample or the totals")]
    MissingWave(Wave),
    #[error("{dropped} of {replicates} replicates failed (limit 5%); first failure: {first}")]
    TooManyFailures {
        dropped: usize,
        replicates: usize,
        first: String,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    /// Skill names; empty means every catalog skill.
    pub skills: Vec<String>,
    /// Waves; empty means every wave of the sample.
    pub waves: Vec<Wave>,
    /// Reuse the λ selected on the full sample instead of re-running CV.
    pub freeze_lambda: bool,
    pub model: ModelOptions,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Largest tolerated share of failed replicates.
    pub max_drop_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            seed: 0,
            estimators: EstimatorSpec::all(),
            skills: Vec::new(),
            waves: Vec::new(),
            freeze_lambda: false,
            model: ModelOptions::default(),
            workers: None,
            max_drop_fraction: 0.05,
        }
    }
}

/// Replicate values of one (wave, skill, estimator) and their summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapDistribution {
    pub draws: Vec<f64>,
    pub mean: f64,
    /// Divisor `B − 1`.
    pub variance: f64,
    /// `100 · sd / mean`.
    pub cv_pct: f64,
}

impl BootstrapDistribution {
    pub fn from_draws(draws: Vec<f64>) -> Self {
        let b = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / b;
        let variance = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0);
        let cv_pct = 100.0 * variance.sqrt() / mean;
        BootstrapDistribution {
            draws,
            mean,
            variance,
            cv_pct,
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapOutcome {
    pub distributions: BTreeMap<(Wave, String, EstimatorName), BootstrapDistribution>,
    /// In-sample AUC of each working model, averaged over replicates.
    pub auc: BTreeMap<(String, EstimatorName), f64>,
    /// Indices of the replicates that entered the summaries.
    pub retained: Vec<usize>,
    pub dropped: usize,
    pub truncations: usize,
}

/// One bootstrap draw of a wave's totals; returns the table and the number of
/// draws that hit the truncation floor.
pub fn perturb_totals<R: Rng + ?Sized>(
    totals: &TotalsTable,
    rng: &mut R,
) -> Result<(TotalsTable, usize), BootstrapError> {
    let mut out = totals.clone();
    let mut truncations = 0;
    let mut ratio: BTreeMap<String, f64> = BTreeMap::new();
    for (code, t) in totals.marginals_of(Covariate::Nace) {
        let se = totals
            .rel_se
            .get(&(Covariate::Nace, code.to_string()))
            .ok_or_else(|| BootstrapError::MissingRelSE(code.to_string()))?;
        let z: f64 = rng.sample(StandardNormal);
        let mut draw = t + se / 100.0 * t * z;
        if draw <= 0.0 {
            draw = TRUNCATION_FLOOR;
            truncations += 1;
        }
        out.marginals.insert((Covariate::Nace, code.to_string()), draw);
        ratio.insert(code.to_string(), draw / t);
    }
    for ((nace, _), v) in out.cross.iter_mut() {
        if let Some(r) = ratio.get(nace) {
            *v *= r;
        }
    }

    let nace_before: f64 = totals.marginals_of(Covariate::Nace).map(|(_, v)| v).sum();
    let nace_after: f64 = out.marginals_of(Covariate::Nace).map(|(_, v)| v).sum();
    let grand_ratio = if nace_before > 0.0 {
        nace_after / nace_before
    } else {
        1.0
    };
    out.grand_total = totals.grand_total * grand_ratio;

    // Occupation marginals follow their perturbed cross-table columns; ratios
    // keep a zero-noise draw bit-identical to the input.
    let mut col_before: BTreeMap<&str, f64> = BTreeMap::new();
    let mut col_after: BTreeMap<&str, f64> = BTreeMap::new();
    for ((nace, occ), v) in &totals.cross {
        *col_before.entry(occ.as_str()).or_default() += v;
        *col_after.entry(occ.as_str()).or_default() += out.cross[&(nace.clone(), occ.clone())];
    }
    for ((cov, code), v) in out.marginals.iter_mut() {
        match cov {
            Covariate::Occupation => {
                let scale = match (col_before.get(code.as_str()), col_after.get(code.as_str())) {
                    (Some(&b), Some(&a)) if b > 0.0 => a / b,
                    _ if totals.has_cross() => 1.0,
                    _ => grand_ratio,
                };
                *v *= scale;
            }
            Covariate::Province => *v *= grand_ratio,
            Covariate::Nace => {}
        }
    }
    Ok((out, truncations))
}

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Simple random sample with replacement of one wave's records.
pub fn resample_ads<R: Rng + ?Sized>(sample: &AdSample, wave: Wave, rng: &mut R) -> AdSample {
    let rows = sample.wave_rows(wave);
    let picks: Vec<usize> = resample_indices(rows.len(), rng).into_iter().map(|i| rows[i]).collect();
    sample.select(&picks)
}

struct Replicate {
    values: Vec<f64>,
    auc: Vec<Option<f64>>,
    truncations: usize,
}

/// Generator for replicate `b`; streams are disjoint across replicates.
pub fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64 + 1);
    rng
}

pub fn run_bootstrap(
    config: &BootstrapConfig,
    sample: &AdSample,
    totals: &BTreeMap<Wave, TotalsTable>,
) -> Result<BootstrapOutcome, BootstrapError> {
    if config.replicates < 2 {
        return Err(BootstrapError::TooFewReplicates(config.replicates));
    }
    let waves: Vec<Wave> = if config.waves.is_empty() {
        sample.waves().into_iter().collect()
    } else {
        config.waves.clone()
    };
    let present = sample.waves();
    for w in &waves {
        if !present.contains(w) || !totals.contains_key(w) {
            return Err(BootstrapError::MissingWave(*w));
        }
    }
    let skills: Vec<usize> = if config.skills.is_empty() {
        (0..sample.catalog.len()).collect()
    } else {
        estimators::skill_indices(sample, &config.skills)?
    };
    let specs = &config.estimators;
    let reference = if config.freeze_lambda {
        Some(ModelCache::build(sample, specs, &config.model)?)
    } else {
        None
    };
    let model_specs: Vec<&EstimatorSpec> = specs.iter().filter(|s| s.has_model()).collect();

    let one = |b: usize| -> Result<Replicate, BootstrapError> {
        let mut rng = replicate_rng(config.seed, b);
        let mut rep_totals = BTreeMap::new();
        let mut truncations = 0;
        let mut rows = Vec::with_capacity(sample.len());
        for &w in &waves {
            let (t, k) = perturb_totals(&totals[&w], &mut rng)?;
            truncations += k;
            rep_totals.insert(w, t);
            let wave_rows = sample.wave_rows(w);
            rows.extend(
                resample_indices(wave_rows.len(), &mut rng)
                    .into_iter()
                    .map(|i| wave_rows[i]),
            );
        }
        let rep = sample.select(&rows);
        let mut opts = config.model.clone();
        opts.lasso.seed = derive_seed(config.model.lasso.seed, b as u64, 0xB007);
        let cache = match &reference {
            Some(r) => ModelCache::build_frozen(&rep, specs, &opts, r)?,
            None => ModelCache::build(&rep, specs, &opts)?,
        };
        let mut values = Vec::with_capacity(waves.len() * skills.len() * specs.len());
        for &w in &waves {
            let est = estimators::estimate_wave_skills(specs, &rep, &rep_totals[&w], w, &skills, &cache)?;
            values.extend(est.iter().map(|e| e.value));
        }
        let auc = replicate_auc(&rep, &skills, &model_specs, &cache);
        Ok(Replicate {
            values,
            auc,
            truncations,
        })
    };

    let run =
        || -> Vec<Result<Replicate, BootstrapError>> { (0..config.replicates).into_par_iter().map(one).collect() };
    let results = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| BootstrapError::ThreadPool(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut retained = Vec::new();
    let mut kept: Vec<Replicate> = Vec::new();
    let mut first = None;
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => {
                retained.push(b);
                kept.push(rep);
            }
            Err(e) => {
                first.get_or_insert_with(|| format!("replicate {b}: {e}"));
            }
        }
    }
    let dropped = config.replicates - kept.len();
    if dropped as f64 > config.max_drop_fraction * config.replicates as f64 || kept.len() < 2 {
        return Err(BootstrapError::TooManyFailures {
            dropped,
            replicates: config.replicates,
            first: first.unwrap_or_default(),
        });
    }

    let mut distributions = BTreeMap::new();
    let mut idx = 0;
    for &w in &waves {
        for &k in &skills {
            for spec in specs {
                let draws = kept.iter().map(|r| r.values[idx]).collect();
                distributions.insert(
                    (w, sample.catalog.names()[k].clone(), spec.name),
                    BootstrapDistribution::from_draws(draws),
                );
                idx += 1;
            }
        }
    }
    let mut auc = BTreeMap::new();
    let mut j = 0;
    for &k in &skills {
        for spec in &model_specs {
            let vals: Vec<f64> = kept.iter().filter_map(|r| r.auc[j]).collect();
            if !vals.is_empty() {
                auc.insert(
                    (sample.catalog.names()[k].clone(), spec.name),
                    vals.iter().sum::<f64>() / vals.len() as f64,
                );
            }
            j += 1;
        }
    }
    Ok(BootstrapOutcome {
        distributions,
        auc,
        retained,
        dropped,
        truncations: kept.iter().map(|r| r.truncations).sum(),
    })
}

/// In-sample AUC of each cached model on the sample it was fit to.
pub fn model_auc(sample: &AdSample, skill: usize, spec: &EstimatorSpec, cache: &ModelCache) -> Option<f64> {
    let fit = cache.get(skill, spec.name).and_then(CachedModel::fit)?;
    let rows: Vec<usize> = (0..sample.len()).collect();
    let cd = CellDesign::from_sample(sample, &rows, &spec.covariates).ok()?;
    let mu = fit.cell_means(&cd).ok()?;
    let y = sample.skill_column(skill, &rows);
    let (m, s) = cd.counts(&y).ok()?;
    let groups: Vec<(f64, f64, f64)> = (0..cd.n_cells()).map(|c| (mu[c], s[c], m[c] - s[c])).collect();
    metrics::auc_grouped(&groups).ok()
}

fn replicate_auc(
    sample: &AdSample,
    skills: &[usize],
    specs: &[&EstimatorSpec],
    cache: &ModelCache,
) -> Vec<Option<f64>> {
    skills
        .iter()
        .flat_map(|&k| specs.iter().map(move |s| model_auc(sample, k, s, cache)))
        .collect()
}

/// Writes every replicate value as `replicate,wave,skill,estimator,value`.
pub fn write_draws<W: Write>(writer: W, outcome: &BootstrapOutcome) -> Result<(), BootstrapError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["replicate", "wave", "skill", "estimator", "value"])?;
    for ((wave, skill, est), dist) in &outcome.distributions {
        for (b, v) in outcome.retained.iter().zip(&dist.draws) {
            wtr.write_record([
                b.to_string(),
                wave.to_string(),
                skill.clone(),
                est.to_string(),
                format!("{v:.17e}"),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_draws(path: impl AsRef<Path>, outcome: &BootstrapOutcome) -> Result<(), BootstrapError> {
    write_draws(std::fs::File::create(path)?, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AdRecord, CategoryDictionary, Dictionaries, SkillCatalog, SkillSet};

    fn table() -> TotalsTable {
        let mut t = TotalsTable::new(Wave(2011), 1000.0);
        for (n, row) in [("C", [300.0, 100.0]), ("F", [200.0, 400.0])] {
            t.marginals.insert((Covariate::Nace, n.into()), row.iter().sum());
            t.rel_se
                .insert((Covariate::Nace, n.into()), if n == "C" { 5.5 } else { 13.86 });
            for (o, v) in ["11", "71"].iter().zip(row) {
                t.cross.insert((n.into(), (*o).into()), v);
            }
        }
        t.marginals.insert((Covariate::Occupation, "11".into()), 500.0);
        t.marginals.insert((Covariate::Occupation, "71".into()), 500.0);
        t.marginals.insert((Covariate::Province, "02".into()), 400.0);
        t.marginals.insert((Covariate::Province, "04".into()), 600.0);
        t.validate().unwrap();
        t
    }

    #[test]
    fn zero_rel_se_is_identity() {
        let mut t = table();
        for v in t.rel_se.values_mut() {
            *v = 0.0;
        }
        let (p, k) = perturb_totals(&t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p, t);
        assert_eq!(k, 0);
    }

    #[test]
    fn rows_follow_marginals_and_table_stays_valid() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (p, _) = perturb_totals(&t, &mut rng).unwrap();
            for nace in ["C", "F"] {
                let row: f64 = p.cross.iter().filter(|((n, _), _)| n == nace).map(|(_, v)| v).sum();
                let m = p.marginal(Covariate::Nace, nace).unwrap();
                assert!((row - m).abs() <= 1e-9 * m);
            }
            p.validate().unwrap();
        }
    }

    #[test]
    fn marginal_draw_sd_matches_rel_se() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                perturb_totals(&t, &mut rng)
                    .unwrap()
                    .0
                    .marginal(Covariate::Nace, "C")
                    .unwrap()
            })
            .collect();
        let sd = BootstrapDistribution::from_draws(draws).sd();
        let expected = 0.055 * 400.0;
        assert!((sd / expected - 1.0).abs() < 0.05, "{sd} vs {expected}");
    }

    #[test]
    fn missing_rel_se() {
        let mut t = table();
        t.rel_se.clear();
        assert!(matches!(
            perturb_totals(&t, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(BootstrapError::MissingRelSE(_))
        ));
    }

    #[test]
    fn non_positive_draws_are_truncated() {
        let mut t = table();
        for v in t.rel_se.values_mut() {
            *v = 400.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = 0;
        for _ in 0..100 {
            let (p, k) = perturb_totals(&t, &mut rng).unwrap();
            hits += k;
            assert!(p.marginals_of(Covariate::Nace).all(|(_, v)| v >= TRUNCATION_FLOOR));
        }
        assert!(hits > 0);
    }

    fn sample(n: usize) -> AdSample {
        AdSample {
            catalog: SkillCatalog::new(["A"]).unwrap(),
            dictionaries: Dictionaries::new(
                CategoryDictionary::from_codes(["11"]),
                CategoryDictionary::from_codes(["C"]),
                CategoryDictionary::from_codes(["02"]),
            ),
            records: (0..n)
                .map(|i| AdRecord {
                    wave: Wave(2011),
                    covariates: [Some(0), Some(0), Some(0)],
                    skills: SkillSet::from_bits((i % 2) as u64),
                })
                .collect(),
        }
    }

    #[test]
    fn resampling_shapes() {
        let one = sample(1);
        let rep = resample_ads(&one, Wave(2011), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(rep.records, one.records);
        let s = sample(37);
        assert_eq!(
            resample_ads(&s, Wave(2011), &mut ChaCha8Rng::seed_from_u64(1)).len(),
            37
        );
    }

    #[test]
    fn mean_multiplicity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50;
        let mut counts = vec![0usize; n];
        for _ in 0..1000 {
            for i in resample_indices(n, &mut rng) {
                counts[i] += 1;
            }
        }
        for c in counts {
            let mean = c as f64 / 1000.0;
            assert!((0.9..=1.1).contains(&mean), "{mean}");
        }
    }

    #[test]
    fn identical_replicates_have_zero_variance() {
        let d = BootstrapDistribution::from_draws(vec![0.25, 0.25]);
        assert_eq!(d.variance, 0.0);
        assert_eq!(d.cv_pct, 0.0);
        // A wave whose records are all identical yields identical replicates.
        let mut s = sample(20);
        for r in &mut s.records {
            r.skills = SkillSet::from_bits(1);
        }
        let mut t = TotalsTable::new(Wave(2011), 100.0);
        t.marginals.insert((Covariate::Occupation, "11".into()), 100.0);
        t.marginals.insert((Covariate::Nace, "C".into()), 100.0);
        t.rel_se.insert((Covariate::Nace, "C".into()), 5.0);
        let cfg = BootstrapConfig {
            replicates: 2,
            estimators: vec![
                EstimatorSpec::standard(EstimatorName::Htsrs),
                EstimatorSpec::standard(EstimatorName::Ecgreg),
            ],
            ..Default::default()
        };
        let out = run_bootstrap(&cfg, &s, &BTreeMap::from([(Wave(2011), t)])).unwrap();
        for dist in out.distributions.values() {
            assert_eq!(dist.variance, 0.0);
        }
    }

    #[test]
    fn summaries_match_recomputation() {
        let draws = vec![0.31, 0.29, 0.35, 0.27, 0.33];
        let d = BootstrapDistribution::from_draws(draws.clone());
        let mean = (0.31 + 0.29 + 0.35 + 0.27 + 0.33) / 5.0;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((d.mean - mean).abs() <= 1e-12 * mean);
        assert!((d.variance - var).abs() <= 1e-12 * var);
        assert!((d.cv_pct - 100.0 * var.sqrt() / mean).abs() <= 1e-12 * d.cv_pct);
    }

    #[test]
    fn too_few_replicates() {
        let cfg = BootstrapConfig {
            replicates: 1,
            ..Default::default()
        };
        assert!(matches!(
            run_bootstrap(&cfg, &sample(4), &BTreeMap::new()),
            Err(BootstrapError::TooFewReplicates(1))
        ));
    }
}
