//! Problem generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillcal::data::{AdRecord, AdSample, CategoryDictionary, Dictionaries, SkillCatalog, SkillSet};
use skillcal::glm::CellDesign;
use skillcal::{Covariate, TotalsTable, Wave};

pub const WAVE: Wave = Wave(2011);

/// Single-wave sample with `occupations` categories and one skill whose
/// prevalence rises with the occupation index.
pub fn occupation_sample(n: usize, occupations: usize, seed: u64) -> AdSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<String> = (0..occupations).map(|o| format!("{:02}", o + 10)).collect();
    let records = (0..n)
        .map(|_| {
            let o = rng.random_range(0..occupations);
            let p = 0.1 + 0.8 * o as f64 / occupations as f64;
            AdRecord {
                wave: WAVE,
                covariates: [Some(o as u16), Some(0), Some(0)],
                skills: SkillSet::from_bits(u64::from(rng.random_bool(p))),
            }
        })
        .collect();
    AdSample {
        catalog: SkillCatalog::new(["Skill"]).expect("one skill"),
        dictionaries: Dictionaries::new(
            CategoryDictionary::from_ordered(codes),
            CategoryDictionary::from_codes(["C"]),
            CategoryDictionary::from_codes(["02"]),
        ),
        records,
    }
}

/// Totals for [`occupation_sample`]: equal occupation shares of `grand_total`
/// and a single NACE section with a 5% relative standard error.
pub fn occupation_totals(occupations: usize, grand_total: f64) -> TotalsTable {
    let mut t = TotalsTable::new(WAVE, grand_total);
    t.grand_total_rel_se = Some(3.0);
    for o in 0..occupations {
        let code = format!("{:02}", o + 10);
        let share = grand_total / occupations as f64;
        t.marginals.insert((Covariate::Occupation, code.clone()), share);
        t.cross.insert(("C".into(), code), share);
    }
    t.marginals.insert((Covariate::Nace, "C".into()), grand_total);
    t.rel_se.insert((Covariate::Nace, "C".into()), 5.0);
    t.marginals.insert((Covariate::Province, "02".into()), grand_total);
    t
}

/// Outcome column and occupation cell design of [`occupation_sample`].
pub fn occupation_problem(n: usize, occupations: usize, seed: u64) -> (Vec<bool>, CellDesign) {
    let sample = occupation_sample(n, occupations, seed);
    let rows: Vec<usize> = (0..n).collect();
    let design = CellDesign::from_sample(&sample, &rows, &[Covariate::Occupation]).expect("complete sample");
    (sample.skill_column(0, &rows), design)
}
