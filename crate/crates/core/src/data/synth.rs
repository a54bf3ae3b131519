use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, streams, StreamRng};

use super::{Cohort, Encounter, IcdMapping, Patient};

/// Maximum number of distinct synthetic ICD-10-like code strings.
pub const CODE_CAPACITY: usize = 26 * 100 * 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Latent comorbidity clusters.
    pub n_conditions: usize,
    pub codes_per_condition: usize,
    /// Exponent `s` of the global rank-frequency law `f(r) ∝ r^-s`.
    pub zipf_exponent: f64,
    /// Target mean number of codes over a patient's whole sequence.
    pub mean_codes_per_sequence: f64,
    pub min_encounters: usize,
    pub max_encounters: usize,
    pub max_conditions_per_patient: usize,
    /// Fraction of codes drawn from the global background instead of the
    /// patient's conditions; also the per-sentence chance of a filler word.
    pub noise_rate: f64,
    /// Chance that a condition-driven code comes from the encounter's focus
    /// condition rather than any of the patient's conditions.
    pub focus_rate: f64,
    /// Chance that a note opens with de-identification placeholders.
    pub placeholder_rate: f64,
    /// Filler words used in note templates.
    pub template_vocabulary: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            n_conditions: 16,
            codes_per_condition: 24,
            zipf_exponent: 1.0,
            mean_codes_per_sequence: 86.64,
            min_encounters: 5,
            max_encounters: 10,
            max_conditions_per_patient: 4,
            noise_rate: 0.05,
            focus_rate: 0.8,
            placeholder_rate: 0.3,
            template_vocabulary: [
                "patient",
                "reports",
                "noted",
                "stable",
                "history",
                "follow",
                "up",
                "today",
                "mild",
                "severe",
                "chronic",
                "acute",
                "plan",
                "continue",
                "review",
                "denies",
                "improved",
                "worsening",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl SynthConfig {
    pub fn n_codes(&self) -> usize {
        self.n_conditions * self.codes_per_condition
    }

    fn mean_encounters(&self) -> f64 {
        (self.min_encounters + self.max_encounters) as f64 / 2.0
    }

    /// Expected codes per encounter.
    pub fn codes_per_encounter(&self) -> f64 {
        self.mean_codes_per_sequence / self.mean_encounters()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 || self.n_conditions == 0 || self.codes_per_condition == 0 {
            return bad("n_patients, n_conditions and codes_per_condition must be positive".into());
        }
        if self.n_codes() > CODE_CAPACITY {
            return bad(format!(
                "n_conditions * codes_per_condition = {} exceeds the {CODE_CAPACITY} available code strings",
                self.n_codes()
            ));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf_exponent must be > 0, got {}", self.zipf_exponent));
        }
        if self.min_encounters == 0 || self.max_encounters < self.min_encounters {
            return bad(format!(
                "need 0 < min_encounters <= max_encounters, got {}..{}",
                self.min_encounters, self.max_encounters
            ));
        }
        if self.max_conditions_per_patient == 0 || self.max_conditions_per_patient > self.n_conditions {
            return bad(format!(
                "max_conditions_per_patient must be in 1..={}, got {}",
                self.n_conditions, self.max_conditions_per_patient
            ));
        }
        if !(self.codes_per_encounter() >= 1.0) {
            return bad(format!(
                "mean_codes_per_sequence {} is below one code per encounter",
                self.mean_codes_per_sequence
            ));
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("focus_rate", self.focus_rate),
            ("placeholder_rate", self.placeholder_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.template_vocabulary.is_empty() || self.template_vocabulary.iter().any(|w| w.trim().is_empty()) {
            return bad("template_vocabulary must hold nonempty words".into());
        }
        Ok(())
    }
}

/// ICD-10-like string for global code index `i`: letter, two digits and a
/// subcode digit that is omitted when zero.
pub fn code_name(i: usize) -> String {
    let letter = (b'A' + (i / 1000 % 26) as u8) as char;
    let cat = i / 10 % 100;
    match i % 10 {
        0 => format!("{letter}{cat:02}"),
        s => format!("{letter}{cat:02}.{s}"),
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo", "xu", "za", "be", "co", "du", "fe",
];

fn pseudo_stem(mut i: usize) -> String {
    let mut digits = Vec::new();
    for _ in 0..2 {
        digits.push(i % SYLLABLES.len());
        i /= SYLLABLES.len();
    }
    while i > 0 {
        digits.push(i % SYLLABLES.len());
        i /= SYLLABLES.len();
    }
    digits.iter().rev().map(|&d| SYLLABLES[d]).collect()
}

/// Keyword shared by every code of condition `k`.
pub fn condition_word(k: usize) -> String {
    format!("{}itis", pseudo_stem(k))
}

/// Word unique to code index `i`.
pub fn code_word(i: usize) -> String {
    format!("{}ine", pseudo_stem(i))
}

const QUALIFIERS: [&str; 6] = [
    "unspecified",
    "with complication",
    "without complication",
    "initial encounter",
    "subsequent encounter",
    "of unspecified site",
];

const TEMPLATES: [&str; 5] = [
    "history of {k} {c} noted",
    "{f} {k} {c} observed",
    "assessment {k} with {c}",
    "{c} consistent with {k} {f}",
    "evaluated for {k} {c}",
];

const PLACEHOLDERS: [&str; 4] = ["[**Name**]", "[**Hospital 12**]", "[**2101-3-4**]", "[**MD Number 7**]"];

/// Code universe: global Zipf ranks, the condition of each rank, and the
/// per-condition rank lists.
struct Universe {
    weights: Vec<f64>,
    global: WeightedIndex<f64>,
    members: Vec<Vec<usize>>,
    within: Vec<WeightedIndex<f64>>,
    condition_mass: Vec<f64>,
}

impl Universe {
    fn new(config: &SynthConfig) -> Result<Self> {
        let n = config.n_codes();
        let weights: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-config.zipf_exponent)).collect();
        let mut members = vec![Vec::new(); config.n_conditions];
        for r in 0..n {
            members[r % config.n_conditions].push(r);
        }
        let werr = |e: rand::distr::weighted::Error| Error::Config(format!("code weights: {e}"));
        let global = WeightedIndex::new(&weights).map_err(werr)?;
        let within = members
            .iter()
            .map(|m| WeightedIndex::new(m.iter().map(|&r| weights[r])).map_err(werr))
            .collect::<Result<Vec<_>>>()?;
        let condition_mass = members.iter().map(|m| m.iter().map(|&r| weights[r]).sum()).collect();
        Ok(Universe {
            weights,
            global,
            members,
            within,
            condition_mass,
        })
    }

    fn condition_of(&self, r: usize) -> usize {
        r % self.members.len()
    }

    fn pick_in_condition(&self, k: usize, rng: &mut StreamRng) -> usize {
        self.members[k][self.within[k].sample(rng)]
    }
}

fn pick_weighted(items: &[usize], weight: impl Fn(usize) -> f64, rng: &mut StreamRng) -> usize {
    let w: Vec<f64> = items.iter().map(|&k| weight(k)).collect();
    items[WeightedIndex::new(&w).expect("positive condition mass").sample(rng)]
}

fn note_text(codes: &[usize], u: &Universe, config: &SynthConfig, rng: &mut StreamRng) -> String {
    let mut out = String::new();
    if rng.random_bool(config.placeholder_rate) {
        out.push_str("Pt ");
        out.push_str(PLACEHOLDERS.choose(rng).expect("nonempty"));
        out.push_str(" seen on ");
        out.push_str(PLACEHOLDERS.choose(rng).expect("nonempty"));
        out.push_str(".\n\n");
    }
    let mut seen = Vec::new();
    for &r in codes {
        if seen.contains(&r) {
            continue;
        }
        seen.push(r);
        let template = TEMPLATES.choose(rng).expect("nonempty");
        let filler = config.template_vocabulary.choose(rng).expect("validated nonempty");
        let sentence = template
            .replace("{k}", &condition_word(u.condition_of(r)))
            .replace("{c}", &code_word(r))
            .replace("{f}", filler);
        out.push_str(&sentence);
        if rng.random_bool(config.noise_rate) {
            out.push(' ');
            out.push_str(config.template_vocabulary.choose(rng).expect("validated nonempty"));
        }
        out.push_str(if rng.random_bool(0.1) { ".  " } else { ". " });
    }
    out.trim_end().to_string()
}

fn generate_patient(index: usize, config: &SynthConfig, u: &Universe, poisson: &Poisson<f64>, seed: u64) -> (Patient, Vec<usize>) {
    let mut rng = indexed_stream(seed, streams::COHORT, index as u64);
    let n_cond = rng.random_range(1..=config.max_conditions_per_patient);
    let mut pool: Vec<usize> = (0..config.n_conditions).collect();
    let mut conditions = Vec::with_capacity(n_cond);
    for _ in 0..n_cond {
        let k = pick_weighted(&pool, |k| u.condition_mass[k], &mut rng);
        pool.retain(|&x| x != k);
        conditions.push(k);
    }
    conditions.sort_unstable();

    let n_enc = rng.random_range(config.min_encounters..=config.max_encounters);
    let patient_id = format!("p{index:05}");
    let mut day: i64 = rng.random_range(0..365);
    let mut encounters = Vec::with_capacity(n_enc);
    for j in 0..n_enc {
        if j > 0 {
            day += rng.random_range(1..=120);
        }
        let focus = pick_weighted(&conditions, |k| u.condition_mass[k], &mut rng);
        let n_codes = 1 + poisson.sample(&mut rng) as usize;
        let mut ranks = Vec::with_capacity(n_codes);
        for _ in 0..n_codes {
            let x: f64 = rng.random();
            let r = if x < config.noise_rate {
                u.global.sample(&mut rng)
            } else if rng.random_bool(config.focus_rate) {
                u.pick_in_condition(focus, &mut rng)
            } else {
                let k = pick_weighted(&conditions, |k| u.condition_mass[k], &mut rng);
                u.pick_in_condition(k, &mut rng)
            };
            ranks.push(r);
        }
        let text = note_text(&ranks, u, config, &mut rng);
        encounters.push(Encounter {
            encounter_id: format!("{patient_id}-e{j}"),
            day,
            codes: ranks.iter().map(|&r| code_name(r)).collect(),
            note_text: Some(text),
        });
    }
    (Patient { patient_id, encounters }, conditions)
}

/// Generates a cohort. Patients are independent given their derived
/// per-patient streams, so generation runs in parallel and the result
/// depends only on `(config, seed)`.
///
/// Each encounter draws `1 + Poisson(λ - 1)` codes, so code lists may repeat a
/// code; [`Cohort::note_records`] deduplicates them into label sets.
pub fn generate_cohort(config: &SynthConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let u = Universe::new(config)?;
    let lambda = config.codes_per_encounter() - 1.0;
    let poisson = if lambda > 0.0 {
        Poisson::new(lambda).map_err(|e| Error::Config(format!("poisson rate: {e}")))?
    } else {
        // Degenerate rate: every encounter gets exactly one code.
        Poisson::new(f64::MIN_POSITIVE).map_err(|e| Error::Config(format!("poisson rate: {e}")))?
    };
    let (patients, conditions): (Vec<_>, Vec<_>) = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(i, config, &u, &poisson, seed))
        .unzip();
    let mut code_condition = BTreeMap::new();
    let mut descriptions = BTreeMap::new();
    for r in 0..config.n_codes() {
        let k = u.condition_of(r);
        code_condition.insert(code_name(r), k);
        descriptions.insert(
            code_name(r),
            format!("{} {} {}", condition_word(k), code_word(r), QUALIFIERS[r % QUALIFIERS.len()]),
        );
    }
    debug_assert_eq!(u.weights.len(), config.n_codes());
    Ok(Cohort {
        config: config.clone(),
        seed,
        patients,
        conditions,
        code_condition,
        descriptions,
    })
}

/// Synthetic ICD-9 → ICD-10 table over the cohort's codes. Every third
/// even-indexed ICD-9 code is ambiguous between two ICD-10 codes.
pub fn synthetic_icd9_mapping(config: &SynthConfig) -> IcdMapping {
    let mut m = IcdMapping::new();
    let n = config.n_codes();
    let mut i = 0;
    while i < n {
        let icd9 = format!("{:03}.{}", i / 10, i % 10);
        m.insert(icd9.clone(), code_name(i));
        if i % 6 == 0 && i + 1 < n {
            m.insert(icd9, code_name(i + 1));
            i += 2;
        } else {
            i += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_names_are_distinct_and_icd_like() {
        let re = regex::Regex::new(r"^[A-Z][0-9]{2}(\.[1-9])?$").unwrap();
        let names: std::collections::BTreeSet<_> = (0..CODE_CAPACITY).map(code_name).collect();
        assert_eq!(names.len(), CODE_CAPACITY);
        assert!(names.iter().all(|n| re.is_match(n)));
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let mut words: Vec<String> = (0..500).map(code_word).collect();
        words.extend((0..50).map(condition_word));
        let n = words.len();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), n);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = SynthConfig {
            n_conditions: 300,
            codes_per_condition: 100,
            max_conditions_per_patient: 4,
            ..SynthConfig::default()
        };
        assert!(generate_cohort(&too_many, 0).unwrap_err().is_config());
        let zipf = SynthConfig {
            zipf_exponent: 0.0,
            ..SynthConfig::default()
        };
        assert!(generate_cohort(&zipf, 0).is_err());
        let sparse = SynthConfig {
            mean_codes_per_sequence: 2.0,
            ..SynthConfig::default()
        };
        assert!(generate_cohort(&sparse, 0).is_err());
    }

    #[test]
    fn patients_validate() {
        let c = generate_cohort(
            &SynthConfig {
                n_patients: 20,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        for p in &c.patients {
            p.validate().unwrap();
            assert!(p.encounters.len() >= 5);
        }
        assert_eq!(c.conditions.len(), 20);
    }

    #[test]
    fn mapping_has_ambiguous_entries() {
        let m = synthetic_icd9_mapping(&SynthConfig::default());
        assert!(m.iter().any(|(_, c)| c.len() == 2));
        let covered: usize = m.iter().map(|(_, c)| c.len()).sum();
        assert_eq!(covered, SynthConfig::default().n_codes());
    }
}
