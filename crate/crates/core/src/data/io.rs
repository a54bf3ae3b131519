use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{Encounter, IcdMapping, NoteRecord, Patient};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

#[derive(Deserialize)]
struct NoteLine {
    note_id: Option<String>,
    text: Option<String>,
    codes: Option<Vec<String>>,
    day: Option<i64>,
}

pub fn load_notes(path: impl AsRef<Path>) -> Result<Vec<NoteRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: NoteLine = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let missing = |f: &str| parse_err(path, lineno, format!("missing required field \"{f}\""));
        let note = NoteRecord {
            note_id: raw.note_id.ok_or_else(|| missing("note_id"))?,
            text: raw.text.ok_or_else(|| missing("text"))?,
            codes: raw.codes.ok_or_else(|| missing("codes"))?,
            day: raw.day.ok_or_else(|| missing("day"))?,
        };
        if note.codes.is_empty() {
            return Err(parse_err(path, lineno, "\"codes\" must be nonempty"));
        }
        if !seen.insert(note.note_id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate note_id {:?}", note.note_id)));
        }
        out.push(note);
    }
    Ok(out)
}

pub fn write_notes(path: impl AsRef<Path>, notes: &[NoteRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for n in notes {
        serde_json::to_writer(&mut w, n)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_encounters(path: impl AsRef<Path>) -> Result<Vec<Patient>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["patient_id", "encounter_id", "day", "codes"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(path, 1, format!("header must be {}", expected.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, Vec<Encounter>> = HashMap::new();
    let mut seen = HashSet::new();
    for (n, rec) in rdr.records().enumerate() {
        let lineno = n + 2;
        let rec = rec.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(path, lineno, format!("expected 4 fields, got {}", rec.len())));
        }
        let field = |i: usize| -> Result<&str> {
            let v = rec[i].trim();
            if v.is_empty() {
                return Err(parse_err(path, lineno, format!("missing required field \"{}\"", expected[i])));
            }
            Ok(v)
        };
        let pid = field(0)?.to_string();
        let eid = field(1)?.to_string();
        let day: i64 = field(2)?.parse().map_err(|_| parse_err(path, lineno, "day must be an integer"))?;
        let codes: Vec<String> = field(3)?.split('|').map(str::to_string).collect();
        if codes.iter().any(String::is_empty) {
            return Err(parse_err(path, lineno, "empty code in codes list"));
        }
        if !seen.insert(eid.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate encounter_id {eid:?}")));
        }
        if !by_patient.contains_key(&pid) {
            order.push(pid.clone());
        }
        by_patient.entry(pid).or_default().push(Encounter {
            encounter_id: eid,
            day,
            codes,
            note_text: None,
        });
    }
    let mut patients = Vec::with_capacity(order.len());
    for pid in order {
        let mut encounters = by_patient.remove(&pid).unwrap_or_default();
        encounters.sort_by_key(|e| e.day);
        let p = Patient { patient_id: pid, encounters };
        p.validate()?;
        patients.push(p);
    }
    Ok(patients)
}

pub fn write_encounters(path: impl AsRef<Path>, patients: &[Patient]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path)?;
    w.write_record(["patient_id", "encounter_id", "day", "codes"])?;
    for p in patients {
        for e in &p.encounters {
            w.write_record([p.patient_id.as_str(), e.encounter_id.as_str(), &e.day.to_string(), &e.codes.join("|")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_descriptions(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (code, desc) = line.split_once('\t').ok_or_else(|| parse_err(path, n + 1, "expected code<TAB>description"))?;
        if code.is_empty() || desc.is_empty() {
            return Err(parse_err(path, n + 1, "empty code or description"));
        }
        if out.insert(code.to_string(), desc.to_string()).is_some() {
            return Err(parse_err(path, n + 1, format!("duplicate code {code:?}")));
        }
    }
    Ok(out)
}

pub fn write_descriptions(path: impl AsRef<Path>, descriptions: &BTreeMap<String, String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (code, desc) in descriptions {
        if desc.contains(['\t', '\n']) {
            return Err(Error::Data(format!("description of {code} contains a tab or newline")));
        }
        writeln!(w, "{code}\t{desc}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_icd_mapping(path: impl AsRef<Path>) -> Result<IcdMapping> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["icd9", "icd10"] {
        return Err(parse_err(path, 1, "header must be icd9,icd10"));
    }
    let mut m = IcdMapping::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, n + 2, e.to_string()))?;
        let (a, b) = (rec.get(0).unwrap_or("").trim(), rec.get(1).unwrap_or("").trim());
        if a.is_empty() || b.is_empty() {
            return Err(parse_err(path, n + 2, "empty icd9 or icd10 field"));
        }
        m.insert(a, b);
    }
    Ok(m)
}

pub fn write_icd_mapping(path: impl AsRef<Path>, mapping: &IcdMapping) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path)?;
    w.write_record(["icd9", "icd10"])?;
    for (icd9, cands) in mapping.iter() {
        for c in cands {
            w.write_record([icd9, c.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}
