use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, streams, StreamRng};

/// ICD-9 → ICD-10 multimap. Candidate order follows the source file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IcdMapping {
    map: BTreeMap<String, Vec<String>>,
}

impl IcdMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, icd9: impl Into<String>, icd10: impl Into<String>) {
        self.map.entry(icd9.into()).or_default().push(icd10.into());
    }

    pub fn candidates(&self, icd9: &str) -> Option<&[String]> {
        self.map.get(icd9).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Maps one ICD-9 code. A unique candidate is returned without touching
/// `rng`; ambiguous codes pick uniformly with `rng.random_range(0..n)`.
pub fn map_icd9_to_icd10<R: Rng + ?Sized>(icd9: &str, mapping: &IcdMapping, rng: &mut R) -> Result<String> {
    match mapping.candidates(icd9) {
        None | Some([]) => Err(Error::Data(format!("ICD-9 code {icd9:?} has no ICD-10 mapping"))),
        Some([only]) => Ok(only.clone()),
        Some(cands) => Ok(cands[rng.random_range(0..cands.len())].clone()),
    }
}

/// Converts codes with one fixed random choice per ambiguous ICD-9 code:
/// the first draw is cached and reused for every later occurrence.
pub struct Icd9Mapper<'a> {
    mapping: &'a IcdMapping,
    rng: StreamRng,
    cache: HashMap<String, String>,
}

impl<'a> Icd9Mapper<'a> {
    pub fn new(mapping: &'a IcdMapping, seed: u64) -> Self {
        Icd9Mapper {
            mapping,
            rng: stream(seed, streams::MAPPING),
            cache: HashMap::new(),
        }
    }

    pub fn map(&mut self, icd9: &str) -> Result<String> {
        if let Some(hit) = self.cache.get(icd9) {
            return Ok(hit.clone());
        }
        let out = map_icd9_to_icd10(icd9, self.mapping, &mut self.rng)?;
        self.cache.insert(icd9.to_string(), out.clone());
        Ok(out)
    }
}
