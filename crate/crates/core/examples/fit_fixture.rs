//! Fits the bundled synthetic design and writes `fixtures/fixture_design.txt`.
//!
//! The design reproduces target aggregates of an online job-ad corpus:
//! occupation shares in the population and online, pooled online prevalence of
//! each skill, a population-level prevalence target, and the skill/occupation
//! association. It is a fitted stand-in, not microdata.
//!
//! Run with `cargo run -p skillcal-core --example fit_fixture`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use skillcal::glm::sigmoid;
use skillcal::simulator::{SkillModel, SyntheticDesign, WaveDesign};
use skillcal::Wave;

/// (code, population %, online %).
const OCCUPATIONS: [(&str, f64, f64); 34] = [
    ("11", 0.49, 1.68),
    ("12", 1.70, 2.22),
    ("13", 1.27, 2.02),
    ("14", 0.29, 2.78),
    ("21", 4.45, 4.09),
    ("22", 3.33, 1.47),
    ("23", 0.91, 2.00),
    ("24", 6.73, 14.65),
    ("25", 3.94, 8.17),
    ("26", 0.71, 0.91),
    ("31", 1.51, 1.50),
    ("32", 0.79, 0.58),
    ("33", 4.37, 19.33),
    ("34", 0.97, 0.53),
    ("35", 1.73, 0.78),
    ("41", 1.41, 1.82),
    ("42", 5.20, 2.53),
    ("43", 1.28, 1.46),
    ("44", 2.52, 0.51),
    ("51", 2.41, 3.10),
    ("52", 8.79, 16.49),
    ("54", 1.28, 1.16),
    ("71", 9.53, 1.71),
    ("72", 7.09, 2.36),
    ("73", 0.72, 0.25),
    ("74", 2.09, 1.23),
    ("75", 5.64, 1.18),
    ("81", 2.71, 0.35),
    ("82", 2.72, 0.21),
    ("83", 7.99, 1.67),
    ("91", 1.35, 0.19),
    ("93", 2.20, 0.49),
    ("94", 1.26, 0.26),
    ("96", 0.60, 0.31),
];

const NACE: [(&str, f64); 14] = [
    ("C", 0.22),
    ("F", 0.10),
    ("G", 0.14),
    ("H", 0.06),
    ("I", 0.03),
    ("J", 0.05),
    ("K", 0.04),
    ("M", 0.06),
    ("N", 0.06),
    ("O", 0.05),
    ("P", 0.04),
    ("Q", 0.08),
    ("R", 0.02),
    ("S", 0.05),
];

/// Sections where each occupation is concentrated.
const AFFINITY: [(&str, &str); 34] = [
    ("11", "O K M"),
    ("12", "K M N G"),
    ("13", "C F H"),
    ("14", "I G"),
    ("21", "M C J"),
    ("22", "Q"),
    ("23", "P"),
    ("24", "K M N O"),
    ("25", "J M K"),
    ("26", "M R O J"),
    ("31", "C F M"),
    ("32", "Q"),
    ("33", "G K N O"),
    ("34", "R S Q"),
    ("35", "J"),
    ("41", "O N K"),
    ("42", "K I N"),
    ("43", "G H K"),
    ("44", "H O"),
    ("51", "I S"),
    ("52", "G"),
    ("54", "N O"),
    ("71", "F"),
    ("72", "C"),
    ("73", "C J"),
    ("74", "F C"),
    ("75", "C"),
    ("81", "C"),
    ("82", "C"),
    ("83", "H G"),
    ("91", "N Q I"),
    ("93", "F C H"),
    ("94", "I"),
    ("96", "N S"),
];

const PROVINCES: [(&str, f64); 16] = [
    ("02", 0.08),
    ("04", 0.05),
    ("06", 0.04),
    ("08", 0.02),
    ("10", 0.06),
    ("12", 0.09),
    ("14", 0.20),
    ("16", 0.02),
    ("18", 0.04),
    ("20", 0.02),
    ("22", 0.06),
    ("24", 0.12),
    ("26", 0.02),
    ("28", 0.03),
    ("30", 0.09),
    ("32", 0.06),
];

/// (wave, online ads, population total in thousands, rel. SE of the total,
/// rel. SE per NACE section in `NACE` order).
const WAVES: [(u16, usize, f64, f64, [f64; 14]); 3] = [
    (
        2011,
        12_655,
        71_775.0,
        3.40,
        [
            5.50, 13.86, 13.69, 8.07, 15.99, 6.30, 7.00, 8.12, 23.09, 3.19, 8.85, 5.53, 7.08, 18.09,
        ],
    ),
    (
        2013,
        13_444,
        42_889.0,
        4.01,
        [
            5.27, 19.21, 15.75, 9.93, 20.78, 7.04, 8.36, 8.71, 12.89, 3.50, 10.65, 6.88, 8.68, 21.29,
        ],
    ),
    (
        2014,
        12_001,
        52_725.0,
        3.98,
        [
            5.64, 15.12, 16.33, 9.17, 18.26, 11.50, 7.43, 12.01, 17.76, 2.56, 12.06, 6.00, 9.28, 20.77,
        ],
    ),
];

/// Missing percentages (occupation, NACE, province) per wave.
const MISSING: [[f64; 3]; 3] = [[0.33, 6.04, 1.06], [0.40, 56.86, 0.01], [0.49, 41.98, 0.21]];

/// (skill, pooled online %, population target %, Cramér's V with occupation).
const SKILLS: [(&str, f64, f64, f64); 11] = [
    ("Artistic", 15.8, 12.5, 0.22),
    ("Availability", 20.9, 19.6, 0.15),
    ("Cognitive", 20.9, 14.6, 0.21),
    ("Computer", 33.0, 22.3, 0.45),
    ("Interpersonal", 53.8, 35.1, 0.42),
    ("Managerial", 26.2, 16.8, 0.34),
    ("Mathematical", 0.4, 0.4, 0.05),
    ("Office", 3.9, 3.2, 0.11),
    ("Physical", 5.4, 7.5, 0.17),
    ("Self-organization", 58.6, 43.9, 0.34),
    ("Technical", 4.3, 7.7, 0.31),
];

/// Ads behind the target associations; removes the chance component of V².
const ASSOCIATION_N: f64 = 38_100.0;
const NACE_EFFECT_SD: f64 = 0.35;
const SEED: u64 = 20_240_601;

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

struct Fitter<'a> {
    nace_given: &'a [Vec<f64>],
    online: &'a [f64],
    population: &'a [f64],
}

impl Fitter<'_> {
    fn occupation_means(&self, a: f64, occ: &[f64], nace: &[f64]) -> Vec<f64> {
        self.nace_given
            .iter()
            .zip(occ)
            .map(|(row, e)| row.iter().zip(nace).map(|(p, z)| p * sigmoid(a + e + z)).sum())
            .collect()
    }

    fn weighted(w: &[f64], v: &[f64]) -> f64 {
        w.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Intercept giving the requested online mean.
    fn intercept(&self, target: f64, occ: &[f64], nace: &[f64]) -> f64 {
        let (mut lo, mut hi) = (-30.0, 30.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if Self::weighted(self.online, &self.occupation_means(mid, occ, nace)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// (intercept, population mean, online V) of the effect vector.
    fn evaluate(&self, online_target: f64, occ: &[f64], nace: &[f64]) -> (f64, f64, f64) {
        let a = self.intercept(online_target, occ, nace);
        let m = self.occupation_means(a, occ, nace);
        let mean = Self::weighted(self.online, &m);
        let between: f64 = self.online.iter().zip(&m).map(|(q, p)| q * (p - mean).powi(2)).sum();
        (
            a,
            Self::weighted(self.population, &m),
            (between / (mean * (1.0 - mean))).sqrt(),
        )
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let no = OCCUPATIONS.len();
    let nn = NACE.len();
    let mut population: Vec<f64> = OCCUPATIONS.iter().map(|o| o.1).collect();
    let mut online: Vec<f64> = OCCUPATIONS.iter().map(|o| o.2).collect();
    normalize(&mut population);
    normalize(&mut online);

    let nace_given: Vec<Vec<f64>> = AFFINITY
        .iter()
        .map(|(_, sections)| {
            let mut row: Vec<f64> = NACE
                .iter()
                .map(|(code, base)| {
                    let aff = if sections.split(' ').any(|s| s == *code) {
                        1.0
                    } else {
                        0.0
                    };
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    base * (0.15 + 6.0 * aff) * (0.3 * xi).exp()
                })
                .collect();
            normalize(&mut row);
            row
        })
        .collect();
    let mut provinces: Vec<f64> = PROVINCES.iter().map(|p| p.1).collect();
    normalize(&mut provinces);

    let mut design = SyntheticDesign {
        population_scale: 10.0,
        noisy_totals: false,
        occupation_codes: OCCUPATIONS.iter().map(|o| o.0.to_string()).collect(),
        occupation_share: population.clone(),
        nace_codes: NACE.iter().map(|n| n.0.to_string()).collect(),
        nace_given_occupation: nace_given.clone(),
        province_codes: PROVINCES.iter().map(|p| p.0.to_string()).collect(),
        province_share: provinces,
        selection_occupation: population.iter().zip(&online).map(|(p, q)| (q / p).ln()).collect(),
        selection_nace: vec![0.0; nn],
        skills: Vec::new(),
        waves: WAVES
            .iter()
            .zip(MISSING)
            .map(|((w, n, total, se, nace_se), missing)| WaveDesign {
                wave: Wave(*w),
                sample_size: *n,
                grand_total: *total,
                grand_total_rel_se: *se,
                nace_rel_se: nace_se.to_vec(),
                missing,
            })
            .collect(),
    };

    // Selection logits: fixed point on the expected online shares.
    for _ in 0..100 {
        let mut step = vec![0.0; no];
        for w in &design.waves {
            let shares = design.expected_online_shares(w);
            for (s, (q, e)) in step.iter_mut().zip(online.iter().zip(shares)) {
                *s += (q / e).ln() / design.waves.len() as f64;
            }
        }
        design
            .selection_occupation
            .iter_mut()
            .zip(&step)
            .for_each(|(l, s)| *l += s);
    }
    let mut expected_online = vec![0.0; no];
    for w in &design.waves {
        for (e, s) in expected_online.iter_mut().zip(design.expected_online_shares(w)) {
            *e += s / design.waves.len() as f64;
        }
    }
    let worst = expected_online
        .iter()
        .zip(&online)
        .map(|(e, q)| (e - q).abs())
        .fold(0.0, f64::max);
    eprintln!("max online share error after fitting: {worst:.2e}");

    // Occupation direction that drives the online bias, and a noise direction
    // orthogonal to it under the online weights.
    let r: Vec<f64> = {
        let raw: Vec<f64> = online.iter().zip(&population).map(|(q, p)| (q / p).ln()).collect();
        let mean = raw.iter().sum::<f64>() / no as f64;
        raw.iter().map(|v| v - mean).collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&online).map(|((x, y), w)| x * y * w).sum() };

    let fitter = Fitter {
        nace_given: &nace_given,
        online: &expected_online,
        population: &population,
    };
    for (name, online_pct, pop_pct, v) in SKILLS {
        let mut xi: Vec<f64> = (0..no).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = xi.iter().zip(&online).map(|(x, w)| x * w).sum::<f64>();
        xi.iter_mut().for_each(|x| *x -= mean);
        let proj = dot(&xi, &r) / dot(&r, &r);
        xi.iter_mut().zip(&r).for_each(|(x, ri)| *x -= proj * ri);
        let norm = dot(&xi, &xi).sqrt();
        xi.iter_mut().for_each(|x| *x /= norm);
        let nace: Vec<f64> = (0..nn)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                NACE_EFFECT_SD * z
            })
            .collect();

        let target_online = online_pct / 100.0;
        let target_pop = pop_pct / 100.0;
        let target_v = (v * v - (no as f64 - 1.0) / ASSOCIATION_N).max(1e-6).sqrt();
        let effects = |b: f64, c: f64| -> Vec<f64> { r.iter().zip(&xi).map(|(ri, x)| b * ri + c * x).collect() };
        let c_for = |b: f64| -> f64 {
            let gap = |c: f64| fitter.evaluate(target_online, &effects(b, c), &nace).2 - target_v;
            if gap(0.0) >= 0.0 {
                0.0
            } else {
                bisect(0.0, 20.0, gap).unwrap_or(20.0)
            }
        };
        let pop_gap = |b: f64| fitter.evaluate(target_online, &effects(b, c_for(b)), &nace).1 - target_pop;
        let b = bisect(-6.0, 6.0, pop_gap).unwrap_or_else(|| {
            eprintln!("{name}: population target not reachable, using the closest endpoint");
            if pop_gap(-6.0).abs() < pop_gap(6.0).abs() {
                -6.0
            } else {
                6.0
            }
        });
        let c = c_for(b);
        let occ = effects(b, c);
        let (a, pop, fitted_v) = fitter.evaluate(target_online, &occ, &nace);
        eprintln!(
            "{name:>18}: b={b:+.3} c={c:.3} online={:.2}% population={:.2}% V={fitted_v:.3} (target {target_v:.3})",
            100.0 * target_online,
            100.0 * pop
        );
        design.skills.push(SkillModel {
            name: name.to_string(),
            intercept: a,
            occupation: occ,
            nace,
        });
    }
    design.validate().expect("fitted design is valid");

    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture_design.txt");
    let header = "# Synthetic job-ad design fitted by examples/fit_fixture.rs.\n\
                  # Aggregates match target figures; the records are not real data.\n";
    std::fs::write(&path, format!("{header}{}", design.to_text())).expect("write fixture design");
    eprintln!("wrote {}", path.display());
}
