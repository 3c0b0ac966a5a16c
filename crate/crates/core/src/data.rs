//! Job-ad records, published vacancy totals, CSV ingest and hot-deck imputation.
//!
//! Covariate values are stored as indices into per-covariate
//! [`CategoryDictionary`] tables that are frozen when a sample is loaded.
//! Totals tables reference categories by their code strings, so the two sides
//! are joined by code in the design module.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for the additivity checks on a [`TotalsTable`].
pub const MARGIN_TOLERANCE: f64 = 1e-6;

/// Maximum number of skills a catalog can hold (one bit per skill).
pub const MAX_SKILLS: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("line {line}: skill `{skill}` has value `{value}`, expected 0 or 1")]
    BadSkillValue { line: u64, skill: String, value: String },
    #[error("line {line}: cannot parse wave `{value}`")]
    BadWave { line: u64, value: String },
    #[error("line {line}: cannot parse number `{value}`")]
    BadNumber { line: u64, value: String },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("category `{code}` of {covariate} is not in the frozen dictionary")]
    UnknownCategory { covariate: Covariate, code: String },
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("invalid skill catalog: {0}")]
    InvalidCatalog(String),
    #[error("wave {wave}: {what} total is {value}, totals must be positive")]
    NegativeTotal { wave: Wave, what: String, value: f64 },
    #[error("wave {wave}: {what} sums to {sum}, expected {expected}")]
    InconsistentMargins {
        wave: Wave,
        what: String,
        sum: f64,
        expected: f64,
    },
    #[error("wave {0}: no grand total row")]
    MissingGrandTotal(Wave),
    #[error("wave {wave}: duplicate totals row for {what}")]
    DuplicateTotal { wave: Wave, what: String },
    #[error("totals file holds {0} waves, expected exactly one")]
    NotSingleWave(usize),
    #[error("wave {0}: no complete record to act as an imputation donor")]
    NoDonorAvailable(Wave),
}

/// Survey wave (reference year).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Wave(pub u16);

impl fmt::Display for Wave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Wave {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(Wave)
    }
}

/// Categorical auxiliary variables shared by the ads and the totals.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Occupation,
    Nace,
    Province,
}

impl Covariate {
    pub const ALL: [Covariate; 3] = [Covariate::Occupation, Covariate::Nace, Covariate::Province];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Occupation => "occupation",
            Covariate::Nace => "nace",
            Covariate::Province => "province",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Covariate {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "occupation" => Ok(Covariate::Occupation),
            "nace" => Ok(Covariate::Nace),
            "province" => Ok(Covariate::Province),
            other => Err(DataError::UnknownCovariate(other.to_string())),
        }
    }
}

/// Ordered list of skill labels; position `k` is the bit used in [`SkillSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillCatalog {
    names: Vec<String>,
}

impl SkillCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DataError::InvalidCatalog("at least one skill is required".into()));
        }
        if names.len() > MAX_SKILLS {
            return Err(DataError::InvalidCatalog(format!(
                "{} skills exceed the limit of {MAX_SKILLS}",
                names.len()
            )));
        }
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != names.len() {
            return Err(DataError::InvalidCatalog("skill names must be unique".into()));
        }
        Ok(SkillCatalog { names })
    }

    /// The eleven general skill groups coded in the job-ad study.
    pub fn standard() -> Self {
        SkillCatalog::new([
            "Artistic",
            "Availability",
            "Cognitive",
            "Computer",
            "Interpersonal",
            "Managerial",
            "Mathematical",
            "Office",
            "Physical",
            "Self-organization",
            "Technical",
        ])
        .expect("standard catalog is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Fixed-width set of binary skill indicators.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SkillSet(u64);

impl SkillSet {
    pub fn from_bits(bits: u64) -> Self {
        SkillSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn has(self, k: usize) -> bool {
        self.0 >> k & 1 == 1
    }

    pub fn set(&mut self, k: usize, on: bool) {
        if on {
            self.0 |= 1 << k;
        } else {
            self.0 &= !(1 << k);
        }
    }
}

/// One coded job advertisement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdRecord {
    pub wave: Wave,
    /// Category indices for occupation, NACE and province; `None` is missing.
    pub covariates: [Option<u16>; 3],
    pub skills: SkillSet,
}

impl AdRecord {
    pub fn get(&self, covariate: Covariate) -> Option<u16> {
        self.covariates[covariate.slot()]
    }

    pub fn set(&mut self, covariate: Covariate, value: Option<u16>) {
        self.covariates[covariate.slot()] = value;
    }

    pub fn is_complete(&self) -> bool {
        self.covariates.iter().all(Option::is_some)
    }
}

/// Admissible category codes of one covariate, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryDictionary {
    codes: Vec<String>,
    lookup: HashMap<String, u16>,
}

impl CategoryDictionary {
    /// Builds a dictionary, sorting codes numerically when both sides are
    /// integers and lexically otherwise.
    pub fn from_codes<S: AsRef<str>>(codes: impl IntoIterator<Item = S>) -> Self {
        let mut codes: Vec<String> = codes
            .into_iter()
            .map(|c| c.as_ref().trim().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        codes.sort_by(|a, b| natural_cmp(a, b));
        Self::from_ordered(codes)
    }

    /// Builds a dictionary keeping the given order.
    pub fn from_ordered(codes: Vec<String>) -> Self {
        let lookup = codes.iter().enumerate().map(|(i, c)| (c.clone(), i as u16)).collect();
        CategoryDictionary { codes, lookup }
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index(&self, code: &str) -> Option<u16> {
        self.lookup.get(code).copied()
    }

    pub fn code(&self, index: u16) -> &str {
        &self.codes[index as usize]
    }
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Dictionaries for all three covariates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionaries([CategoryDictionary; 3]);

impl Dictionaries {
    pub fn new(occupation: CategoryDictionary, nace: CategoryDictionary, province: CategoryDictionary) -> Self {
        Dictionaries([occupation, nace, province])
    }

    pub fn get(&self, covariate: Covariate) -> &CategoryDictionary {
        &self.0[covariate.slot()]
    }

    pub fn set(&mut self, covariate: Covariate, dictionary: CategoryDictionary) {
        self.0[covariate.slot()] = dictionary;
    }
}

/// The non-probability sample of coded job ads.
#[derive(Clone, Debug, PartialEq)]
pub struct AdSample {
    pub catalog: SkillCatalog,
    pub dictionaries: Dictionaries,
    pub records: Vec<AdRecord>,
}

impl AdSample {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn waves(&self) -> BTreeSet<Wave> {
        self.records.iter().map(|r| r.wave).collect()
    }

    /// Row indices of one wave, in file order.
    pub fn wave_rows(&self, wave: Wave) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.wave == wave)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn wave_counts(&self) -> BTreeMap<Wave, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.wave).or_insert(0) += 1;
        }
        counts
    }

    /// Indicator vector of skill `k` over the given rows.
    pub fn skill_column(&self, k: usize, rows: &[usize]) -> Vec<bool> {
        rows.iter().map(|&i| self.records[i].skills.has(k)).collect()
    }

    /// New sample holding the given rows (repeats allowed) in that order.
    pub fn select(&self, rows: &[usize]) -> AdSample {
        AdSample {
            catalog: self.catalog.clone(),
            dictionaries: self.dictionaries.clone(),
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn missing_count(&self, covariate: Covariate) -> usize {
        self.records.iter().filter(|r| r.get(covariate).is_none()).count()
    }

    /// Category code of a record, if observed.
    pub fn code(&self, row: usize, covariate: Covariate) -> Option<&str> {
        self.records[row]
            .get(covariate)
            .map(|i| self.dictionaries.get(covariate).code(i))
    }
}

const WAVE_COL: &str = "wave";

/// Reads an ads CSV, building category dictionaries from the data.
pub fn load_ads(path: impl AsRef<Path>, catalog: &SkillCatalog) -> Result<AdSample, DataError> {
    read_ads(File::open(path)?, catalog, None)
}

/// Reads an ads CSV against dictionaries frozen elsewhere; unseen categories are an error.
pub fn load_ads_with_dictionaries(
    path: impl AsRef<Path>,
    catalog: &SkillCatalog,
    dictionaries: &Dictionaries,
) -> Result<AdSample, DataError> {
    read_ads(File::open(path)?, catalog, Some(dictionaries))
}

pub fn read_ads<R: Read>(
    reader: R,
    catalog: &SkillCatalog,
    dictionaries: Option<&Dictionaries>,
) -> Result<AdSample, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let wave_col = column(WAVE_COL)?;
    let cov_cols = [
        column(Covariate::Occupation.name())?,
        column(Covariate::Nace.name())?,
        column(Covariate::Province.name())?,
    ];
    let skill_cols = catalog
        .names()
        .iter()
        .map(|s| column(s))
        .collect::<Result<Vec<_>, _>>()?;

    struct Raw {
        wave: Wave,
        codes: [Option<String>; 3],
        skills: SkillSet,
    }
    let mut raws = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let wave_text = &row[wave_col];
        let wave = wave_text.parse::<Wave>().map_err(|_| DataError::BadWave {
            line,
            value: wave_text.to_string(),
        })?;
        let codes = cov_cols.map(|c| {
            let v = &row[c];
            (!v.is_empty()).then(|| v.to_string())
        });
        let mut skills = SkillSet::default();
        for (k, &c) in skill_cols.iter().enumerate() {
            match &row[c] {
                "0" => {}
                "1" => skills.set(k, true),
                other => {
                    return Err(DataError::BadSkillValue {
                        line,
                        skill: catalog.names()[k].clone(),
                        value: other.to_string(),
                    })
                }
            }
        }
        raws.push(Raw { wave, codes, skills });
    }
    if raws.is_empty() {
        return Err(DataError::EmptyFile);
    }

    let dictionaries = match dictionaries {
        Some(d) => d.clone(),
        None => {
            let build =
                |slot: usize| CategoryDictionary::from_codes(raws.iter().filter_map(|r| r.codes[slot].as_deref()));
            Dictionaries([build(0), build(1), build(2)])
        }
    };

    let mut records = Vec::with_capacity(raws.len());
    for raw in raws {
        let mut covariates = [None; 3];
        for cov in Covariate::ALL {
            if let Some(code) = &raw.codes[cov.slot()] {
                let idx = dictionaries
                    .get(cov)
                    .index(code)
                    .ok_or_else(|| DataError::UnknownCategory {
                        covariate: cov,
                        code: code.clone(),
                    })?;
                covariates[cov.slot()] = Some(idx);
            }
        }
        records.push(AdRecord {
            wave: raw.wave,
            covariates,
            skills: raw.skills,
        });
    }
    Ok(AdSample {
        catalog: catalog.clone(),
        dictionaries,
        records,
    })
}

pub fn save_ads(path: impl AsRef<Path>, sample: &AdSample) -> Result<(), DataError> {
    write_ads(File::create(path)?, sample)
}

pub fn write_ads<W: Write>(writer: W, sample: &AdSample) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![WAVE_COL.to_string()];
    header.extend(Covariate::ALL.iter().map(|c| c.name().to_string()));
    header.extend(sample.catalog.names().iter().cloned());
    wtr.write_record(&header)?;
    for (i, r) in sample.records.iter().enumerate() {
        let mut fields = vec![r.wave.to_string()];
        for cov in Covariate::ALL {
            fields.push(sample.code(i, cov).unwrap_or("").to_string());
        }
        for k in 0..sample.catalog.len() {
            fields.push(if r.skills.has(k) { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Estimated population totals for one wave.
///
/// `cross` is keyed by `(nace, occupation)`; `rel_se` holds relative standard
/// errors in percent for marginal cells.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalsTable {
    pub wave: Wave,
    pub grand_total: f64,
    pub grand_total_rel_se: Option<f64>,
    pub marginals: BTreeMap<(Covariate, String), f64>,
    pub cross: BTreeMap<(String, String), f64>,
    pub rel_se: BTreeMap<(Covariate, String), f64>,
}

impl TotalsTable {
    pub fn new(wave: Wave, grand_total: f64) -> Self {
        TotalsTable {
            wave,
            grand_total,
            grand_total_rel_se: None,
            marginals: BTreeMap::new(),
            cross: BTreeMap::new(),
            rel_se: BTreeMap::new(),
        }
    }

    pub fn marginal(&self, covariate: Covariate, code: &str) -> Option<f64> {
        self.marginals.get(&(covariate, code.to_string())).copied()
    }

    /// Marginal cells of one covariate in key order.
    pub fn marginals_of(&self, covariate: Covariate) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.marginals
            .iter()
            .filter(move |((c, _), _)| *c == covariate)
            .map(|((_, code), v)| (code.as_str(), *v))
    }

    pub fn has_covariate(&self, covariate: Covariate) -> bool {
        self.marginals_of(covariate).next().is_some()
    }

    pub fn has_cross(&self) -> bool {
        !self.cross.is_empty()
    }

    /// Checks positivity and additivity of the table.
    pub fn validate(&self) -> Result<(), DataError> {
        let wave = self.wave;
        if !(self.grand_total > 0.0) || !self.grand_total.is_finite() {
            return Err(DataError::NegativeTotal {
                wave,
                what: "grand".into(),
                value: self.grand_total,
            });
        }
        for ((cov, code), &v) in &self.marginals {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DataError::NegativeTotal {
                    wave,
                    what: format!("{cov} {code}"),
                    value: v,
                });
            }
        }
        for ((nace, occ), &v) in &self.cross {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DataError::NegativeTotal {
                    wave,
                    what: format!("cross {nace} x {occ}"),
                    value: v,
                });
            }
        }
        let close = |sum: f64, expected: f64| (sum - expected).abs() <= MARGIN_TOLERANCE * expected.abs();
        for cov in Covariate::ALL {
            if !self.has_covariate(cov) {
                continue;
            }
            let sum: f64 = self.marginals_of(cov).map(|(_, v)| v).sum();
            if !close(sum, self.grand_total) {
                return Err(DataError::InconsistentMargins {
                    wave,
                    what: format!("{cov} marginals"),
                    sum,
                    expected: self.grand_total,
                });
            }
        }
        if self.has_cross() {
            let mut rows: BTreeMap<&str, f64> = BTreeMap::new();
            for ((nace, _), v) in &self.cross {
                *rows.entry(nace.as_str()).or_insert(0.0) += v;
            }
            for (nace, sum) in rows {
                let expected = self
                    .marginal(Covariate::Nace, nace)
                    .ok_or_else(|| DataError::InconsistentMargins {
                        wave,
                        what: format!("cross row {nace} (no NACE marginal)"),
                        sum,
                        expected: 0.0,
                    })?;
                if !close(sum, expected) {
                    return Err(DataError::InconsistentMargins {
                        wave,
                        what: format!("cross row {nace}"),
                        sum,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }
}

const TOTALS_HEADER: [&str; 6] = ["wave", "covariate", "category_a", "category_b", "total", "rel_se_pct"];
const GRAND_KEY: &str = "total";
const CROSS_KEY: &str = "nace_occupation";

/// Reads a totals file that must contain exactly one wave.
pub fn load_totals(path: impl AsRef<Path>) -> Result<TotalsTable, DataError> {
    let mut all = load_totals_by_wave(path)?;
    if all.len() != 1 {
        return Err(DataError::NotSingleWave(all.len()));
    }
    Ok(all.pop_first().expect("one wave").1)
}

pub fn load_totals_by_wave(path: impl AsRef<Path>) -> Result<BTreeMap<Wave, TotalsTable>, DataError> {
    read_totals(File::open(path)?)
}

pub fn read_totals<R: Read>(reader: R) -> Result<BTreeMap<Wave, TotalsTable>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| column(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let (c_wave, c_cov, c_a, c_b, c_total) = (
        required("wave")?,
        required("covariate")?,
        required("category_a")?,
        required("category_b")?,
        required("total")?,
    );
    let c_se = column("rel_se_pct");

    struct Partial {
        grand: Option<(f64, Option<f64>)>,
        table: TotalsTable,
    }
    let mut partial: BTreeMap<Wave, Partial> = BTreeMap::new();
    let mut rows = 0usize;
    for row in rdr.records() {
        let row = row?;
        rows += 1;
        let line = row.position().map_or(0, |p| p.line());
        let wave = row[c_wave].parse::<Wave>().map_err(|_| DataError::BadWave {
            line,
            value: row[c_wave].to_string(),
        })?;
        let number = |text: &str| {
            text.parse::<f64>().map_err(|_| DataError::BadNumber {
                line,
                value: text.to_string(),
            })
        };
        let total = number(&row[c_total])?;
        let se = match c_se.map(|c| &row[c]) {
            Some(t) if !t.is_empty() => Some(number(t)?),
            _ => None,
        };
        let entry = partial.entry(wave).or_insert_with(|| Partial {
            grand: None,
            table: TotalsTable::new(wave, f64::NAN),
        });
        let kind = &row[c_cov];
        let (a, b) = (row[c_a].to_string(), row[c_b].to_string());
        let dup = |what: String| DataError::DuplicateTotal { wave, what };
        match kind {
            GRAND_KEY => {
                if entry.grand.replace((total, se)).is_some() {
                    return Err(dup("grand total".into()));
                }
            }
            CROSS_KEY => {
                if entry.table.cross.insert((a.clone(), b.clone()), total).is_some() {
                    return Err(dup(format!("cross {a} x {b}")));
                }
            }
            other => {
                let cov: Covariate = other.parse()?;
                if entry.table.marginals.insert((cov, a.clone()), total).is_some() {
                    return Err(dup(format!("{cov} {a}")));
                }
                if let Some(se) = se {
                    entry.table.rel_se.insert((cov, a), se);
                }
            }
        }
    }
    if rows == 0 {
        return Err(DataError::EmptyFile);
    }
    let mut out = BTreeMap::new();
    for (wave, p) in partial {
        let (grand, grand_se) = p.grand.ok_or(DataError::MissingGrandTotal(wave))?;
        let mut table = p.table;
        table.grand_total = grand;
        table.grand_total_rel_se = grand_se;
        table.validate()?;
        out.insert(wave, table);
    }
    Ok(out)
}

pub fn save_totals<'a>(
    path: impl AsRef<Path>,
    tables: impl IntoIterator<Item = &'a TotalsTable>,
) -> Result<(), DataError> {
    write_totals(File::create(path)?, tables)
}

pub fn write_totals<'a, W: Write>(
    writer: W,
    tables: impl IntoIterator<Item = &'a TotalsTable>,
) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TOTALS_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in tables {
        let w = t.wave.to_string();
        wtr.write_record([
            w.as_str(),
            GRAND_KEY,
            "",
            "",
            &t.grand_total.to_string(),
            &opt(t.grand_total_rel_se),
        ])?;
        for ((cov, code), v) in &t.marginals {
            let se = opt(t.rel_se.get(&(*cov, code.clone())).copied());
            wtr.write_record([w.as_str(), cov.name(), code, "", &v.to_string(), &se])?;
        }
        for ((nace, occ), v) in &t.cross {
            wtr.write_record([w.as_str(), CROSS_KEY, nace, occ, &v.to_string(), ""])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Fills missing covariates from the single nearest complete record of the
/// same wave under Gower distance.
///
/// The distance uses uniform weights over the recipient's observed covariates
/// and every skill indicator, all treated as categorical (0 when equal, 1
/// otherwise). Ties go to the donor with the lowest row index.
pub fn impute_gower_1nn(sample: &AdSample) -> Result<AdSample, DataError> {
    let mut out = sample.clone();
    for wave in sample.waves() {
        let rows = sample.wave_rows(wave);
        let recipients: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| !sample.records[i].is_complete())
            .collect();
        if recipients.is_empty() {
            continue;
        }
        let donors: Vec<&AdRecord> = rows
            .iter()
            .map(|&i| &sample.records[i])
            .filter(|r| r.is_complete())
            .collect();
        if donors.is_empty() {
            return Err(DataError::NoDonorAvailable(wave));
        }
        for &i in &recipients {
            let rec = &sample.records[i];
            // Every donor is complete, so the Gower denominator is shared and
            // ranking by mismatch count is equivalent.
            let mut best: Option<(u32, &AdRecord)> = None;
            for donor in &donors {
                let mut mismatches = (rec.skills.bits() ^ donor.skills.bits()).count_ones();
                for slot in 0..3 {
                    if let Some(v) = rec.covariates[slot] {
                        mismatches += u32::from(donor.covariates[slot] != Some(v));
                    }
                }
                if best.is_none_or(|(d, _)| mismatches < d) {
                    best = Some((mismatches, donor));
                    if mismatches == 0 {
                        break;
                    }
                }
            }
            let (_, donor) = best.expect("donor pool is non-empty");
            let target = &mut out.records[i];
            for slot in 0..3 {
                if target.covariates[slot].is_none() {
                    target.covariates[slot] = donor.covariates[slot];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog3() -> SkillCatalog {
        SkillCatalog::new(["A", "B", "C"]).unwrap()
    }

    const ADS: &str = "wave,occupation,nace,province,A,B,C\n\
                       2011,24,C,02,1,0,1\n\
                       2011,71,F,04,0,1,0\n\
                       2013,24,,02,1,1,1\n";

    #[test]
    fn loads_valid_rows() {
        let s = read_ads(ADS.as_bytes(), &catalog3(), None).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dictionaries.get(Covariate::Occupation).codes(), ["24", "71"]);
        assert_eq!(s.records[2].get(Covariate::Nace), None);
        assert!(s.records[0].skills.has(2) && !s.records[0].skills.has(1));
        assert_eq!(s.wave_counts()[&Wave(2011)], 2);
    }

    #[test]
    fn rejects_non_binary_skill() {
        let bad = ADS.replace("2011,71,F,04,0,1,0", "2011,71,F,04,0,2,0");
        let err = read_ads(bad.as_bytes(), &catalog3(), None).unwrap_err();
        assert!(matches!(err, DataError::BadSkillValue { ref value, .. } if value == "2"));
    }

    #[test]
    fn rejects_missing_column_and_empty_file() {
        let err = read_ads("wave,occupation,nace,A,B,C\n".as_bytes(), &catalog3(), None).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "province"));
        let err = read_ads("wave,occupation,nace,province,A,B,C\n".as_bytes(), &catalog3(), None).unwrap_err();
        assert!(matches!(err, DataError::EmptyFile));
    }

    #[test]
    fn frozen_dictionaries_reject_unseen_codes() {
        let s = read_ads(ADS.as_bytes(), &catalog3(), None).unwrap();
        let more = "wave,occupation,nace,province,A,B,C\n2014,99,C,02,0,0,0\n";
        let err = read_ads(more.as_bytes(), &catalog3(), Some(&s.dictionaries)).unwrap_err();
        assert!(matches!(
            err,
            DataError::UnknownCategory {
                covariate: Covariate::Occupation,
                ..
            }
        ));
    }

    #[test]
    fn natural_order_of_codes() {
        let d = CategoryDictionary::from_codes(["9", "11", "10", "B", "A"]);
        assert_eq!(d.codes(), ["9", "10", "11", "A", "B"]);
    }

    fn totals_2011() -> TotalsTable {
        let mut t = TotalsTable::new(Wave(2011), 71_775.0);
        t.marginals.insert((Covariate::Occupation, "24".into()), 50_000.0);
        t.marginals.insert((Covariate::Occupation, "71".into()), 21_775.0);
        t.marginals.insert((Covariate::Nace, "C".into()), 30_000.0);
        t.marginals.insert((Covariate::Nace, "F".into()), 41_775.0);
        t.rel_se.insert((Covariate::Nace, "C".into()), 5.5);
        t.rel_se.insert((Covariate::Nace, "F".into()), 13.86);
        t.cross.insert(("C".into(), "24".into()), 20_000.0);
        t.cross.insert(("C".into(), "71".into()), 10_000.0);
        t.cross.insert(("F".into(), "24".into()), 30_000.0);
        t.cross.insert(("F".into(), "71".into()), 11_775.0);
        t
    }

    #[test]
    fn totals_round_trip() {
        let t = totals_2011();
        let mut buf = Vec::new();
        write_totals(&mut buf, [&t]).unwrap();
        let back = read_totals(buf.as_slice()).unwrap();
        assert_eq!(back[&Wave(2011)], t);
        assert_eq!(back[&Wave(2011)].grand_total, 71_775.0);
    }

    #[test]
    fn inconsistent_margins_rejected() {
        let mut t = totals_2011();
        // Occupation marginals now sum to 90% of the grand total.
        t.marginals
            .insert((Covariate::Occupation, "24".into()), 0.9 * 71_775.0 - 21_775.0);
        assert!(matches!(t.validate(), Err(DataError::InconsistentMargins { .. })));
    }

    #[test]
    fn negative_and_missing_grand_total() {
        let csv = "wave,covariate,category_a,category_b,total,rel_se_pct\n2011,occupation,24,,-5,\n";
        assert!(matches!(
            read_totals(csv.as_bytes()),
            Err(DataError::MissingGrandTotal(_))
        ));
        let csv = "wave,covariate,category_a,category_b,total,rel_se_pct\n2011,total,,,10,\n2011,occupation,24,,-5,\n2011,occupation,71,,15,\n";
        assert!(matches!(
            read_totals(csv.as_bytes()),
            Err(DataError::NegativeTotal { .. })
        ));
    }

    #[test]
    fn cross_rows_must_match_nace_marginals() {
        let mut t = totals_2011();
        assert!(t.validate().is_ok());
        *t.cross.get_mut(&("C".to_string(), "24".to_string())).unwrap() += 100.0;
        assert!(matches!(t.validate(), Err(DataError::InconsistentMargins { .. })));
    }

    fn record(wave: u16, cov: [Option<u16>; 3], bits: u64) -> AdRecord {
        AdRecord {
            wave: Wave(wave),
            covariates: cov,
            skills: SkillSet::from_bits(bits),
        }
    }

    fn sample_of(records: Vec<AdRecord>) -> AdSample {
        let dict = |n: usize| CategoryDictionary::from_ordered((0..n).map(|i| i.to_string()).collect());
        AdSample {
            catalog: catalog3(),
            dictionaries: Dictionaries::new(dict(4), dict(4), dict(4)),
            records,
        }
    }

    #[test]
    fn imputes_from_zero_distance_donor() {
        let s = sample_of(vec![
            record(2011, [Some(0), Some(1), Some(2)], 0b101),
            record(2011, [Some(1), Some(3), Some(0)], 0b010),
            record(2011, [Some(1), None, Some(0)], 0b010),
        ]);
        let out = impute_gower_1nn(&s).unwrap();
        assert_eq!(out.records[2].get(Covariate::Nace), Some(3));
    }

    #[test]
    fn equidistant_donors_resolve_to_lowest_index() {
        let s = sample_of(vec![
            record(2011, [Some(0), Some(1), Some(0)], 0b001),
            record(2011, [Some(0), Some(2), Some(0)], 0b001),
            record(2011, [Some(0), None, Some(0)], 0b011),
        ]);
        let out = impute_gower_1nn(&s).unwrap();
        assert_eq!(out.records[2].get(Covariate::Nace), Some(1));
    }

    #[test]
    fn donors_restricted_to_same_wave() {
        let s = sample_of(vec![
            record(2011, [Some(0), Some(1), Some(0)], 0b001),
            record(2013, [Some(0), Some(2), Some(0)], 0b111),
            record(2013, [Some(0), None, Some(0)], 0b001),
        ]);
        let out = impute_gower_1nn(&s).unwrap();
        assert_eq!(out.records[2].get(Covariate::Nace), Some(2));
        let lonely = sample_of(vec![
            record(2011, [Some(0), Some(1), Some(0)], 0),
            record(2013, [Some(0), None, Some(0)], 0),
        ]);
        assert!(matches!(
            impute_gower_1nn(&lonely),
            Err(DataError::NoDonorAvailable(Wave(2013)))
        ));
    }

    #[test]
    fn imputation_is_idempotent_on_complete_data() {
        let s = sample_of(vec![
            record(2011, [Some(0), Some(1), Some(0)], 0b001),
            record(2011, [Some(2), Some(2), Some(3)], 0b110),
        ]);
        assert_eq!(impute_gower_1nn(&s).unwrap(), s);
    }
}
