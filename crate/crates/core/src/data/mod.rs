//! Patients, notes and cohorts: synthetic generation plus loaders for the
//! on-disk formats.
//!
//! File formats:
//!
//! * notes: JSON Lines `{"note_id": str, "text": str, "codes": [str], "day": int}`
//! * encounters: CSV with header `patient_id,encounter_id,day,codes`, codes `|`-separated
//! * descriptions: TSV `code<TAB>description`
//! * ICD-9 → ICD-10 mapping: CSV with header `icd9,icd10`, repeated rows allowed

mod icd;
mod io;
mod preprocess;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use icd::{map_icd9_to_icd10, Icd9Mapper, IcdMapping};
pub use io::{load_descriptions, load_encounters, load_icd_mapping, load_notes, write_descriptions, write_encounters, write_icd_mapping, write_notes};
pub use preprocess::preprocess_text;
pub use synth::{code_name, code_word, condition_word, generate_cohort, synthetic_icd9_mapping, SynthConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub encounter_id: String,
    /// Calendar day; only differences between encounters are meaningful.
    pub day: i64,
    pub codes: Vec<String>,
    pub note_text: Option<String>,
}

/// One patient's encounters, ordered by strictly increasing day.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub encounters: Vec<Encounter>,
}

impl Patient {
    /// Total number of codes over all encounters.
    pub fn code_count(&self) -> usize {
        self.encounters.iter().map(|e| e.codes.len()).sum()
    }

    pub fn validate(&self) -> crate::Result<()> {
        for w in self.encounters.windows(2) {
            if w[1].day <= w[0].day {
                return Err(crate::Error::Data(format!(
                    "patient {}: encounter days must strictly increase ({} then {})",
                    self.patient_id, w[0].day, w[1].day
                )));
            }
        }
        if let Some(e) = self.encounters.iter().find(|e| e.codes.is_empty()) {
            return Err(crate::Error::Data(format!(
                "patient {}: encounter {} has no codes",
                self.patient_id, e.encounter_id
            )));
        }
        Ok(())
    }
}

/// A note paired with the code set of its encounter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub note_id: String,
    pub text: String,
    pub codes: Vec<String>,
    pub day: i64,
}

/// Distinct codes in first-occurrence order.
pub fn dedup_codes(codes: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    codes.iter().filter(|c| seen.insert(c.as_str())).cloned().collect()
}

/// Generated cohort plus the latent structure that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub config: SynthConfig,
    pub seed: u64,
    pub patients: Vec<Patient>,
    /// Latent conditions per patient (parallel to `patients`).
    pub conditions: Vec<Vec<usize>>,
    /// Condition owning each code.
    pub code_condition: BTreeMap<String, usize>,
    pub descriptions: BTreeMap<String, String>,
}

impl Cohort {
    /// One record per encounter that carries a note. Codes are deduplicated
    /// in first-occurrence order.
    pub fn note_records(&self) -> Vec<NoteRecord> {
        self.patients
            .iter()
            .flat_map(|p| p.encounters.iter())
            .filter_map(|e| {
                e.note_text.as_ref().map(|t| NoteRecord {
                    note_id: e.encounter_id.clone(),
                    text: t.clone(),
                    codes: dedup_codes(&e.codes),
                    day: e.day,
                })
            })
            .collect()
    }

    /// Condition contributing the most codes to `codes` (lowest index on ties).
    pub fn top_condition(&self, codes: &[String]) -> Option<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for c in codes {
            if let Some(&k) = self.code_condition.get(c) {
                *counts.entry(k).or_default() += 1;
            }
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k)
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
