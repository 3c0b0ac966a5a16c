//! Synthetic populations, occupation-biased online samples and totals with a
//! known truth.
//!
//! A population of `population_scale × grand_total` units is spread over the
//! occupation × NACE × province grid with shares `P(o) · P(n | o) · P(p)`.
//! Each unit holds every skill independently with probability
//! `σ(intercept + occ_effect[o] + nace_effect[n])` and enters the online sample
//! with probability `σ(sel_occ[o] + sel_nace[n] + offset)`, where the offset
//! makes the expected number of selected units a little above the wave's target
//! size. The selected units are then thinned uniformly to the target.
//!
//! Totals are the realized population counts divided by `population_scale`, so
//! they are exact unless `noisy_totals` is set.
//!
//! # Design file
//!
//! Plain `key = value` lines; lists are whitespace or comma separated and `#`
//! starts a comment.
//!
//! ```text
//! waves = 2011 2013
//! population_scale = 10
//! noisy_totals = false
//! occupation.codes = 11 71
//! occupation.share = 0.4 0.6
//! nace.codes = C F
//! nace.given.11 = 0.7 0.3
//! nace.given.71 = 0.2 0.8
//! province.codes = 02 04
//! province.share = 0.5 0.5
//! selection.occupation = 1.0 -1.0
//! selection.nace = 0 0
//! skills = Technical
//! skill.Technical.intercept = -1.5
//! skill.Technical.occupation = -0.5 1.0
//! skill.Technical.nace = 0 0
//! wave.2011.sample_size = 500
//! wave.2011.grand_total = 10000
//! wave.2011.grand_total_rel_se = 3.4
//! wave.2011.nace_rel_se = 5.5 13.9
//! wave.2011.missing = 0.3 6.0 1.1
//! ```
//!
//! `selection.nace`, `skill.*.nace`, `*.grand_total_rel_se` and `*.missing`
//! (percent per covariate) default to zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

use crate::bootstrap;
use crate::data::{
    AdRecord, AdSample, CategoryDictionary, Covariate, Dictionaries, SkillCatalog, SkillSet, TotalsTable, Wave,
};
use crate::glm::sigmoid;

const FIXTURE_DESIGN: &str = include_str!("../fixtures/fixture_design.txt");
const SHARE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("design line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("infeasible design for wave {wave}: {message}")]
    InfeasibleDesign { wave: Wave, message: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Bootstrap(#[from] crate::bootstrap::BootstrapError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Logit-scale model of one skill.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillModel {
    pub name: String,
    pub intercept: f64,
    pub occupation: Vec<f64>,
    pub nace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveDesign {
    pub wave: Wave,
    pub sample_size: usize,
    pub grand_total: f64,
    pub grand_total_rel_se: f64,
    /// Relative standard errors (percent) in `nace_codes` order.
    pub nace_rel_se: Vec<f64>,
    /// MCAR missingness in percent for occupation, NACE and province.
    pub missing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDesign {
    pub population_scale: f64,
    pub noisy_totals: bool,
    pub occupation_codes: Vec<String>,
    pub occupation_share: Vec<f64>,
    pub nace_codes: Vec<String>,
    /// `P(nace | occupation)`, one row per occupation.
    pub nace_given_occupation: Vec<Vec<f64>>,
    pub province_codes: Vec<String>,
    pub province_share: Vec<f64>,
    pub selection_occupation: Vec<f64>,
    pub selection_nace: Vec<f64>,
    pub skills: Vec<SkillModel>,
    pub waves: Vec<WaveDesign>,
}

/// Population prevalence of every skill in every wave.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub true_prevalence: BTreeMap<(Wave, String), f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    pub sample: AdSample,
    pub totals: BTreeMap<Wave, TotalsTable>,
    pub truth: GroundTruth,
}

fn parse_list<T: std::str::FromStr>(line: usize, value: &str) -> Result<Vec<T>, SimulatorError> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| SimulatorError::Parse {
                line,
                message: format!("cannot parse `{s}`"),
            })
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(line: usize, value: &str) -> Result<T, SimulatorError> {
    let mut v: Vec<T> = parse_list(line, value)?;
    if v.len() != 1 {
        return Err(SimulatorError::Parse {
            line,
            message: format!("expected one value, got `{value}`"),
        });
    }
    Ok(v.remove(0))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl SyntheticDesign {
    /// The bundled design that drives the example dataset.
    pub fn fixture() -> Self {
        Self::parse(FIXTURE_DESIGN).expect("bundled fixture design is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimulatorError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, SimulatorError> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SimulatorError::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(SimulatorError::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        let mut used: BTreeSet<String> = BTreeSet::new();
        let mut get = |key: &str| -> Option<(usize, String)> {
            used.insert(key.to_string());
            kv.get(key).cloned()
        };
        let missing = |key: &str| SimulatorError::InvalidDesign(format!("missing key `{key}`"));
        macro_rules! list {
            ($key:expr, $t:ty) => {{
                let key: String = $key;
                let (l, v) = get(&key).ok_or_else(|| missing(&key))?;
                parse_list::<$t>(l, &v)?
            }};
        }
        macro_rules! list_or {
            ($key:expr, $t:ty, $default:expr) => {{
                let key: String = $key;
                match get(&key) {
                    Some((l, v)) => parse_list::<$t>(l, &v)?,
                    None => $default,
                }
            }};
        }
        macro_rules! one {
            ($key:expr, $t:ty) => {{
                let key: String = $key;
                let (l, v) = get(&key).ok_or_else(|| missing(&key))?;
                parse_one::<$t>(l, &v)?
            }};
        }

        let waves: Vec<u16> = list!("waves".into(), u16);
        let population_scale = one!("population_scale".into(), f64);
        let noisy_totals = match get("noisy_totals") {
            Some((l, v)) => parse_one::<bool>(l, &v)?,
            None => false,
        };
        let occupation_codes = list!("occupation.codes".into(), String);
        let occupation_share = list!("occupation.share".into(), f64);
        let nace_codes = list!("nace.codes".into(), String);
        let mut nace_given_occupation = Vec::new();
        for o in &occupation_codes {
            nace_given_occupation.push(list!(format!("nace.given.{o}"), f64));
        }
        let province_codes = list!("province.codes".into(), String);
        let province_share = list!("province.share".into(), f64);
        let selection_occupation = list!("selection.occupation".into(), f64);
        let selection_nace = list_or!("selection.nace".into(), f64, vec![0.0; nace_codes.len()]);
        let skill_names = list!("skills".into(), String);
        let mut skills = Vec::new();
        for name in skill_names {
            skills.push(SkillModel {
                intercept: one!(format!("skill.{name}.intercept"), f64),
                occupation: list!(format!("skill.{name}.occupation"), f64),
                nace: list_or!(format!("skill.{name}.nace"), f64, vec![0.0; nace_codes.len()]),
                name,
            });
        }
        let mut wave_designs = Vec::new();
        for w in waves {
            let missing_pct = list_or!(format!("wave.{w}.missing"), f64, vec![0.0; 3]);
            if missing_pct.len() != 3 {
                return Err(SimulatorError::InvalidDesign(format!(
                    "wave.{w}.missing needs three values"
                )));
            }
            wave_designs.push(WaveDesign {
                wave: Wave(w),
                sample_size: one!(format!("wave.{w}.sample_size"), usize),
                grand_total: one!(format!("wave.{w}.grand_total"), f64),
                grand_total_rel_se: match get(&format!("wave.{w}.grand_total_rel_se")) {
                    Some((l, v)) => parse_one(l, &v)?,
                    None => 0.0,
                },
                nace_rel_se: list_or!(format!("wave.{w}.nace_rel_se"), f64, vec![0.0; nace_codes.len()]),
                missing: [missing_pct[0], missing_pct[1], missing_pct[2]],
            });
        }
        if let Some(k) = kv.keys().find(|k| !used.contains(*k)) {
            return Err(SimulatorError::Parse {
                line: kv[k].0,
                message: format!("unknown key `{k}`"),
            });
        }
        let design = SyntheticDesign {
            population_scale,
            noisy_totals,
            occupation_codes,
            occupation_share,
            nace_codes,
            nace_given_occupation,
            province_codes,
            province_share,
            selection_occupation,
            selection_nace,
            skills,
            waves: wave_designs,
        };
        design.validate()?;
        Ok(design)
    }

    /// Serializes to the design file format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "waves = {}",
            join(&self.waves.iter().map(|w| w.wave).collect::<Vec<_>>())
        );
        let _ = writeln!(s, "population_scale = {}", self.population_scale);
        let _ = writeln!(s, "noisy_totals = {}", self.noisy_totals);
        let _ = writeln!(s, "occupation.codes = {}", join(&self.occupation_codes));
        let _ = writeln!(s, "occupation.share = {}", join(&self.occupation_share));
        let _ = writeln!(s, "nace.codes = {}", join(&self.nace_codes));
        for (o, row) in self.occupation_codes.iter().zip(&self.nace_given_occupation) {
            let _ = writeln!(s, "nace.given.{o} = {}", join(row));
        }
        let _ = writeln!(s, "province.codes = {}", join(&self.province_codes));
        let _ = writeln!(s, "province.share = {}", join(&self.province_share));
        let _ = writeln!(s, "selection.occupation = {}", join(&self.selection_occupation));
        let _ = writeln!(s, "selection.nace = {}", join(&self.selection_nace));
        let _ = writeln!(
            s,
            "skills = {}",
            join(&self.skills.iter().map(|k| k.name.clone()).collect::<Vec<_>>())
        );
        for k in &self.skills {
            let _ = writeln!(s, "skill.{}.intercept = {}", k.name, k.intercept);
            let _ = writeln!(s, "skill.{}.occupation = {}", k.name, join(&k.occupation));
            let _ = writeln!(s, "skill.{}.nace = {}", k.name, join(&k.nace));
        }
        for w in &self.waves {
            let _ = writeln!(s, "wave.{}.sample_size = {}", w.wave, w.sample_size);
            let _ = writeln!(s, "wave.{}.grand_total = {}", w.wave, w.grand_total);
            let _ = writeln!(s, "wave.{}.grand_total_rel_se = {}", w.wave, w.grand_total_rel_se);
            let _ = writeln!(s, "wave.{}.nace_rel_se = {}", w.wave, join(&w.nace_rel_se));
            let _ = writeln!(s, "wave.{}.missing = {}", w.wave, join(&w.missing));
        }
        s
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: String| Err(SimulatorError::InvalidDesign(m));
        let no = self.occupation_codes.len();
        let nn = self.nace_codes.len();
        let simplex = |v: &[f64]| {
            v.iter().all(|x| x.is_finite() && *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= SHARE_TOLERANCE
        };
        if no == 0 || nn == 0 || self.province_codes.is_empty() {
            return bad("every covariate needs at least one category".into());
        }
        for codes in [&self.occupation_codes, &self.nace_codes, &self.province_codes] {
            if codes.iter().collect::<BTreeSet<_>>().len() != codes.len() {
                return bad("duplicate category code".into());
            }
        }
        if self.occupation_share.len() != no || !simplex(&self.occupation_share) {
            return bad("occupation.share must be a simplex over occupation.codes".into());
        }
        if self.province_share.len() != self.province_codes.len() || !simplex(&self.province_share) {
            return bad("province.share must be a simplex over province.codes".into());
        }
        for (o, row) in self.occupation_codes.iter().zip(&self.nace_given_occupation) {
            if row.len() != nn || !simplex(row) {
                return bad(format!("nace.given.{o} must be a simplex over nace.codes"));
            }
        }
        if self.selection_occupation.len() != no || self.selection_nace.len() != nn {
            return bad("selection logits do not match the category counts".into());
        }
        if !(self.population_scale >= 1.0) {
            return bad("population_scale must be at least 1".into());
        }
        if self.skills.is_empty() || SkillCatalog::new(self.skills.iter().map(|k| k.name.clone())).is_err() {
            return bad("skills must be a non-empty list of distinct names".into());
        }
        for k in &self.skills {
            if k.occupation.len() != no || k.nace.len() != nn {
                return bad(format!("skill {} has the wrong number of effects", k.name));
            }
            if !k.intercept.is_finite() || k.occupation.iter().chain(&k.nace).any(|v| !v.is_finite()) {
                return bad(format!("skill {} has a non-finite effect", k.name));
            }
        }
        if self.waves.is_empty() {
            return bad("no waves".into());
        }
        for w in &self.waves {
            if w.nace_rel_se.len() != nn {
                return bad(format!("wave {} nace_rel_se needs {nn} values", w.wave));
            }
            if !(w.grand_total > 0.0) || w.sample_size == 0 {
                return bad(format!("wave {} needs a positive grand total and sample size", w.wave));
            }
            if w.missing.iter().any(|m| !(0.0..=100.0).contains(m)) {
                return bad(format!("wave {} missing rates must be percentages", w.wave));
            }
        }
        Ok(())
    }

    /// `P(skill | occupation, nace)`.
    pub fn skill_probability(&self, skill: usize, occupation: usize, nace: usize) -> f64 {
        let k = &self.skills[skill];
        sigmoid(k.intercept + k.occupation[occupation] + k.nace[nace])
    }

    pub fn population_units(&self, wave: &WaveDesign) -> u64 {
        (self.population_scale * wave.grand_total).round() as u64
    }

    /// Number of units the selection step aims for before thinning; the margin
    /// keeps a shortfall below the target many standard deviations away.
    pub fn selection_target(&self, wave: &WaveDesign) -> f64 {
        let t = wave.sample_size as f64;
        (1.05 * t + 6.0 * t.sqrt() + 10.0).min(self.population_units(wave) as f64)
    }

    /// Expected online occupation shares for a wave when the population follows
    /// the design shares exactly.
    pub fn expected_online_shares(&self, wave: &WaveDesign) -> Vec<f64> {
        let n = self.population_units(wave) as f64;
        let mass: Vec<f64> = self
            .occupation_share
            .iter()
            .zip(&self.nace_given_occupation)
            .flat_map(|(po, row)| row.iter().map(move |pn| n * po * pn))
            .collect();
        let offset = self.selection_offset(&mass, self.selection_target(wave));
        let nn = self.nace_codes.len();
        let mut by_occ = vec![0.0; self.occupation_codes.len()];
        for (c, m) in mass.iter().enumerate() {
            let (o, j) = (c / nn, c % nn);
            by_occ[o] += m * sigmoid(self.selection_occupation[o] + self.selection_nace[j] + offset);
        }
        let total: f64 = by_occ.iter().sum();
        by_occ.iter().map(|v| v / total).collect()
    }

    /// Offset solving `Σ mass(o, n) · σ(l_o + l_n + offset) = target` over
    /// occupation-major (o, n) cells.
    fn selection_offset(&self, mass: &[f64], target: f64) -> f64 {
        let nn = self.nace_codes.len();
        let expected = |off: f64| -> f64 {
            mass.iter()
                .enumerate()
                .map(|(c, m)| m * sigmoid(self.selection_occupation[c / nn] + self.selection_nace[c % nn] + off))
                .sum()
        };
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

impl GroundTruth {
    pub fn get(&self, wave: Wave, skill: &str) -> Option<f64> {
        self.true_prevalence.get(&(wave, skill.to_string())).copied()
    }

    /// Unweighted mean over waves.
    pub fn pooled(&self, skill: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .true_prevalence
            .iter()
            .filter(|((_, s), _)| s == skill)
            .map(|(_, v)| *v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimulatorError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["wave", "skill", "prevalence"])?;
        for ((w, s), v) in &self.true_prevalence {
            wtr.write_record([w.to_string(), s.clone(), format!("{v}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimulatorError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

struct Unit {
    occupation: usize,
    nace: usize,
    province: usize,
    skills: SkillSet,
}

/// Realizes the population, the online sample and the totals of every wave.
pub fn generate(design: &SyntheticDesign, seed: u64) -> Result<SimulationOutput, SimulatorError> {
    design.validate()?;
    let catalog = SkillCatalog::new(design.skills.iter().map(|k| k.name.clone()))?;
    let mut units: Vec<(Wave, Unit)> = Vec::new();
    let mut totals = BTreeMap::new();
    let mut truth = GroundTruth::default();
    for (wi, wave) in design.waves.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(wi as u64);
        let (wave_units, table, prevalence) = generate_wave(design, wave, &mut rng)?;
        let table = if design.noisy_totals {
            bootstrap::perturb_totals(&table, &mut rng)?.0
        } else {
            table
        };
        totals.insert(wave.wave, table);
        for (k, p) in prevalence.into_iter().enumerate() {
            truth
                .true_prevalence
                .insert((wave.wave, design.skills[k].name.clone()), p);
        }
        units.extend(wave_units.into_iter().map(|u| (wave.wave, u)));
    }

    // Dictionaries cover exactly the observed codes, matching what a CSV
    // round trip would rebuild.
    let observed = |cov: usize, codes: &[String]| -> CategoryDictionary {
        let seen: BTreeSet<usize> = units
            .iter()
            .filter_map(|(_, u)| match cov {
                0 => Some(u.occupation),
                1 => Some(u.nace),
                2 => Some(u.province),
                _ => None,
            })
            .filter(|&i| i != usize::MAX)
            .collect();
        CategoryDictionary::from_codes(seen.into_iter().map(|i| codes[i].as_str()))
    };
    let dictionaries = Dictionaries::new(
        observed(0, &design.occupation_codes),
        observed(1, &design.nace_codes),
        observed(2, &design.province_codes),
    );
    let lookup = |cov: Covariate, codes: &[String], i: usize| -> Option<u16> {
        (i != usize::MAX).then(|| dictionaries.get(cov).index(&codes[i]).expect("observed code"))
    };
    let records = units
        .iter()
        .map(|(w, u)| AdRecord {
            wave: *w,
            covariates: [
                lookup(Covariate::Occupation, &design.occupation_codes, u.occupation),
                lookup(Covariate::Nace, &design.nace_codes, u.nace),
                lookup(Covariate::Province, &design.province_codes, u.province),
            ],
            skills: u.skills,
        })
        .collect();
    Ok(SimulationOutput {
        sample: AdSample {
            catalog,
            dictionaries,
            records,
        },
        totals,
        truth,
    })
}

fn binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn generate_wave<R: Rng>(
    design: &SyntheticDesign,
    wave: &WaveDesign,
    rng: &mut R,
) -> Result<(Vec<Unit>, TotalsTable, Vec<f64>), SimulatorError> {
    let n_units = design.population_units(wave);
    if wave.sample_size as u64 > n_units {
        return Err(SimulatorError::InfeasibleDesign {
            wave: wave.wave,
            message: format!("sample size {} exceeds the population of {n_units}", wave.sample_size),
        });
    }
    let (no, nn, np) = (
        design.occupation_codes.len(),
        design.nace_codes.len(),
        design.province_codes.len(),
    );

    // Multinomial cell counts through sequential conditional binomials.
    let mut counts = vec![0u64; no * nn * np];
    let mut remaining = n_units;
    let mut mass_left = 1.0;
    for o in 0..no {
        for j in 0..nn {
            for p in 0..np {
                let share = design.occupation_share[o] * design.nace_given_occupation[o][j] * design.province_share[p];
                let c = (o * nn + j) * np + p;
                let draw = if c + 1 == counts.len() {
                    remaining
                } else if mass_left > 0.0 {
                    binomial(remaining, (share / mass_left).min(1.0), rng)
                } else {
                    0
                };
                counts[c] = draw;
                remaining -= draw;
                mass_left -= share;
            }
        }
    }

    let on_mass: Vec<f64> = (0..no * nn)
        .map(|c| counts[c * np..(c + 1) * np].iter().sum::<u64>() as f64)
        .collect();
    let offset = design.selection_offset(&on_mass, design.selection_target(wave));

    let n_skills = design.skills.len();
    let mut positives = vec![0u64; n_skills];
    let mut selected: Vec<Unit> = Vec::new();
    for o in 0..no {
        for j in 0..nn {
            let probs: Vec<f64> = (0..n_skills).map(|k| design.skill_probability(k, o, j)).collect();
            let pi = sigmoid(design.selection_occupation[o] + design.selection_nace[j] + offset);
            for p in 0..np {
                let c = counts[(o * nn + j) * np + p];
                if c == 0 {
                    continue;
                }
                let sel = binomial(c, pi, rng);
                for _ in 0..sel {
                    let mut skills = SkillSet::default();
                    for (k, &pk) in probs.iter().enumerate() {
                        if rng.random_bool(pk) {
                            skills.set(k, true);
                            positives[k] += 1;
                        }
                    }
                    selected.push(Unit {
                        occupation: o,
                        nace: j,
                        province: p,
                        skills,
                    });
                }
                for (k, &pk) in probs.iter().enumerate() {
                    positives[k] += binomial(c - sel, pk, rng);
                }
            }
        }
    }
    if selected.len() < wave.sample_size {
        return Err(SimulatorError::InfeasibleDesign {
            wave: wave.wave,
            message: format!(
                "only {} units selected for a target of {}",
                selected.len(),
                wave.sample_size
            ),
        });
    }
    let mut keep = index::sample(rng, selected.len(), wave.sample_size).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<Unit>> = selected.into_iter().map(Some).collect();
    let mut sample: Vec<Unit> = keep
        .into_iter()
        .map(|i| slots[i].take().expect("distinct index"))
        .collect();
    for u in &mut sample {
        for (c, rate) in wave.missing.iter().enumerate() {
            if *rate > 0.0 && rng.random_bool(rate / 100.0) {
                match c {
                    0 => u.occupation = usize::MAX,
                    1 => u.nace = usize::MAX,
                    _ => u.province = usize::MAX,
                }
            }
        }
    }

    let scale = design.population_scale;
    let mut table = TotalsTable::new(wave.wave, n_units as f64 / scale);
    table.grand_total_rel_se = Some(wave.grand_total_rel_se);
    let mut occ = vec![0u64; no];
    let mut nace = vec![0u64; nn];
    let mut prov = vec![0u64; np];
    for o in 0..no {
        for j in 0..nn {
            let mut cross = 0;
            for p in 0..np {
                let c = counts[(o * nn + j) * np + p];
                occ[o] += c;
                nace[j] += c;
                prov[p] += c;
                cross += c;
            }
            if cross > 0 {
                table.cross.insert(
                    (design.nace_codes[j].clone(), design.occupation_codes[o].clone()),
                    cross as f64 / scale,
                );
            }
        }
    }
    for (cov, codes, cnt) in [
        (Covariate::Occupation, &design.occupation_codes, &occ),
        (Covariate::Nace, &design.nace_codes, &nace),
        (Covariate::Province, &design.province_codes, &prov),
    ] {
        for (code, &c) in codes.iter().zip(cnt) {
            if c > 0 {
                table.marginals.insert((cov, code.clone()), c as f64 / scale);
            }
        }
    }
    for (j, code) in design.nace_codes.iter().enumerate() {
        if nace[j] > 0 {
            table
                .rel_se
                .insert((Covariate::Nace, code.clone()), wave.nace_rel_se[j]);
        }
    }
    table.validate()?;
    let prevalence = positives.iter().map(|&p| p as f64 / n_units as f64).collect();
    Ok((sample, table, prevalence))
}

/// Writes `ads.csv`, `totals.csv` and `truth.csv` into `dir`.
pub fn write_output(output: &SimulationOutput, dir: impl AsRef<Path>) -> Result<(), SimulatorError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    crate::data::save_ads(dir.join("ads.csv"), &output.sample)?;
    crate::data::save_totals(dir.join("totals.csv"), output.totals.values())?;
    output.truth.save(dir.join("truth.csv"))?;
    Ok(())
}
