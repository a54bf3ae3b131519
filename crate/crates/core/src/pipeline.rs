//! Staged runs. Every stage reads its inputs from earlier stage directories
//! under one output root and writes its own directory with a
//! `manifest.json`. A stage whose manifest fingerprint and output hashes
//! still match is skipped unless forced.
//!
//! ```text
//! gen-data → pretrain-codes → pretrain-text → train-contrastive → lengthen
//!   → finetune-icd-desc → finetune-prompt → {evaluate, rerank}
//! align-report, export-embeddings read pretrain-text and finetune-icd-desc
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{self, AlignmentReport, EmbeddingSet};
use crate::checkpoint::Checkpoint;
use crate::code_encoder::{sequence_for, EncounterSequence};
use crate::config::RunConfig;
use crate::contrastive::{self, ContrastiveOptions, DualConfig, Pair};
use crate::data::{self, NoteRecord, Patient};
use crate::error::{Error, Result};
use crate::finetune::{self, Candidate, Prediction, PromptExample, PromptTask, RerankInstance};
use crate::metrics::{self, MetricsReport, Thresholds};
use crate::nn::ParamStore;
use crate::pretrain;
use crate::rng::{stream, streams};
use crate::tokenize::{build_code_vocab, train_bpe, CodeVocab, TextVocab};

/// Default version string recorded in manifests.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    PretrainCodes,
    PretrainText,
    TrainContrastive,
    Lengthen,
    FinetuneIcdDesc,
    FinetunePrompt,
    Evaluate,
    Rerank,
    AlignReport,
    ExportEmbeddings,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenData,
        Stage::PretrainCodes,
        Stage::PretrainText,
        Stage::TrainContrastive,
        Stage::Lengthen,
        Stage::FinetuneIcdDesc,
        Stage::FinetunePrompt,
        Stage::Evaluate,
        Stage::Rerank,
        Stage::AlignReport,
        Stage::ExportEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainCodes => "pretrain-codes",
            Stage::PretrainText => "pretrain-text",
            Stage::TrainContrastive => "train-contrastive",
            Stage::Lengthen => "lengthen",
            Stage::FinetuneIcdDesc => "finetune-icd-desc",
            Stage::FinetunePrompt => "finetune-prompt",
            Stage::Evaluate => "evaluate",
            Stage::Rerank => "rerank",
            Stage::AlignReport => "align-report",
            Stage::ExportEmbeddings => "export-embeddings",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    fn upstream(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::GenData => vec![],
            Stage::PretrainCodes => vec![Stage::GenData],
            Stage::PretrainText => vec![Stage::GenData, Stage::PretrainCodes],
            Stage::TrainContrastive => vec![Stage::GenData, Stage::PretrainText],
            Stage::Lengthen => vec![Stage::GenData, Stage::TrainContrastive],
            Stage::FinetuneIcdDesc => vec![Stage::GenData, Stage::Lengthen],
            Stage::FinetunePrompt => vec![Stage::GenData, cfg.finetune.prompt_init],
            Stage::Evaluate | Stage::Rerank => vec![Stage::GenData, Stage::FinetunePrompt],
            Stage::AlignReport => vec![Stage::GenData, Stage::PretrainText, Stage::FinetuneIcdDesc],
            Stage::ExportEmbeddings => vec![Stage::GenData, Stage::FinetuneIcdDesc],
        }
    }

    /// Config sections that influence this stage's outputs.
    fn config_slice(self, cfg: &RunConfig) -> Value {
        let base = json!({ "seed": cfg.seed });
        let extra = match self {
            Stage::GenData => json!({ "data": cfg.data }),
            Stage::PretrainCodes => json!({ "model": cfg.model, "masking": cfg.masking, "train": cfg.code_pretrain }),
            Stage::PretrainText => json!({ "masking": cfg.masking, "train": cfg.text_pretrain }),
            Stage::TrainContrastive => json!({ "masking": cfg.masking, "train": cfg.contrastive }),
            Stage::Lengthen => json!({ "masking": cfg.masking, "train": cfg.lengthen }),
            Stage::FinetuneIcdDesc => json!({ "train": cfg.finetune.descriptions }),
            Stage::FinetunePrompt => json!({ "finetune": cfg.finetune }),
            Stage::Evaluate => json!({ "threshold_mode": cfg.eval.threshold_mode }),
            Stage::Rerank => json!({ "eval": cfg.eval, "labels_per_prompt": cfg.finetune.labels_per_prompt }),
            Stage::AlignReport | Stage::ExportEmbeddings => json!({ "analysis": cfg.analysis }),
        };
        json!({ "stage": self.name(), "base": base, "config": extra })
    }
}

/// Where a run writes and how it treats completed stages.
#[derive(Clone, Debug)]
pub struct Context {
    pub out_dir: PathBuf,
    pub force: bool,
    pub version: String,
}

impl Context {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Context {
            out_dir: out_dir.into(),
            force: false,
            version: VERSION.to_string(),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.name())
    }

    fn file(&self, stage: Stage, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub fingerprint: String,
    pub config: Value,
    pub wall_time_s: f64,
    /// Output file name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

pub const MANIFEST: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn read_manifest(ctx: &Context, stage: Stage) -> Result<Manifest> {
    let path = ctx.file(stage, MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::Invalid(format!("stage {} has not been run (no {})", stage.name(), path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn fingerprint(cfg: &RunConfig, ctx: &Context, stage: Stage) -> Result<(String, Value)> {
    let slice = stage.config_slice(cfg);
    let mut upstream = BTreeMap::new();
    for up in stage.upstream(cfg) {
        upstream.insert(up.name(), read_manifest(ctx, up)?.fingerprint);
    }
    let doc = json!({ "slice": slice, "upstream": upstream });
    Ok((sha256_hex(serde_json::to_string(&doc)?.as_bytes()), slice))
}

fn is_current(ctx: &Context, stage: Stage, fp: &str) -> bool {
    let Ok(m) = read_manifest(ctx, stage) else {
        return false;
    };
    m.fingerprint == fp && m.outputs.iter().all(|(name, hash)| file_hash(&ctx.file(stage, name)).is_ok_and(|h| &h == hash))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub dir: PathBuf,
    pub summary: Value,
}

/// Runs one stage, or skips it when its recorded outputs are current.
pub fn run_stage(cfg: &RunConfig, ctx: &Context, stage: Stage) -> Result<StageOutcome> {
    cfg.validate()?;
    cfg.check_paths()?;
    let (fp, slice) = fingerprint(cfg, ctx, stage)?;
    let dir = ctx.stage_dir(stage);
    if !ctx.force && is_current(ctx, stage, &fp) {
        log::info!("{}: outputs are current, skipping", stage.name());
        return Ok(StageOutcome {
            stage,
            skipped: true,
            dir,
            summary: read_manifest(ctx, stage)?.summary,
        });
    }
    std::fs::create_dir_all(&dir)?;
    log::info!("{}: running", stage.name());
    let t0 = Instant::now();
    let (outputs, summary) = match stage {
        Stage::GenData => gen_data(cfg, ctx)?,
        Stage::PretrainCodes => stage_pretrain_codes(cfg, ctx)?,
        Stage::PretrainText => stage_pretrain_text(cfg, ctx)?,
        Stage::TrainContrastive => stage_contrastive(cfg, ctx)?,
        Stage::Lengthen => stage_lengthen(cfg, ctx)?,
        Stage::FinetuneIcdDesc => stage_descriptions(cfg, ctx)?,
        Stage::FinetunePrompt => stage_prompt(cfg, ctx)?,
        Stage::Evaluate => stage_evaluate(cfg, ctx)?,
        Stage::Rerank => stage_rerank(cfg, ctx)?,
        Stage::AlignReport => stage_align(cfg, ctx)?,
        Stage::ExportEmbeddings => stage_export(cfg, ctx)?,
    };
    let mut hashes = BTreeMap::new();
    for name in outputs {
        hashes.insert(name.clone(), file_hash(&dir.join(&name))?);
    }
    let manifest = Manifest {
        stage: stage.name().to_string(),
        version: ctx.version.clone(),
        seed: cfg.seed,
        fingerprint: fp,
        config: slice,
        wall_time_s: t0.elapsed().as_secs_f64(),
        outputs: hashes,
        summary: summary.clone(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(StageOutcome {
        stage,
        skipped: false,
        dir,
        summary,
    })
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig, ctx: &Context) -> Result<Vec<StageOutcome>> {
    Stage::ALL.iter().map(|&s| run_stage(cfg, ctx, s)).collect()
}

type StageResult = Result<(Vec<String>, Value)>;

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------- data

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Dev,
    Test,
}

/// Patient-level split drawn from the split stream.
pub fn split_patients(ids: &[String], train_fraction: f64, dev_fraction: f64, seed: u64) -> Split {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.shuffle(&mut stream(seed, streams::SPLIT));
    let n = ids.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_dev = (((n as f64) * dev_fraction).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    Split {
        train: ids[..n_train].to_vec(),
        dev: ids[n_train..n_train + n_dev].to_vec(),
        test: ids[n_train + n_dev..].to_vec(),
    }
}

/// Everything `gen-data` produced, loaded back.
pub struct DataBundle {
    /// Notes with preprocessed text.
    pub notes: Vec<NoteRecord>,
    pub patients: Vec<Patient>,
    pub descriptions: BTreeMap<String, String>,
    pub split: Split,
    pub text_vocab: TextVocab,
    pub code_vocab: CodeVocab,
    note_patient: HashMap<String, String>,
}

impl DataBundle {
    pub fn load(ctx: &Context) -> Result<Self> {
        let f = |n: &str| ctx.file(Stage::GenData, n);
        let mut notes = data::load_notes(f("notes.jsonl"))?;
        for n in &mut notes {
            n.text = data::preprocess_text(&n.text);
        }
        let patients = data::load_encounters(f("encounters.csv"))?;
        let note_patient = patients
            .iter()
            .flat_map(|p| p.encounters.iter().map(move |e| (e.encounter_id.clone(), p.patient_id.clone())))
            .collect();
        Ok(DataBundle {
            notes,
            patients,
            descriptions: data::load_descriptions(f("descriptions.tsv"))?,
            split: serde_json::from_str(&std::fs::read_to_string(f("split.json"))?)?,
            text_vocab: TextVocab::load(f("text_vocab.txt"), f("text_merges.txt"))?,
            code_vocab: CodeVocab::load(f("code_vocab.txt"))?,
            note_patient,
        })
    }

    fn part_ids(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.split.train,
            Part::Dev => &self.split.dev,
            Part::Test => &self.split.test,
        }
    }

    pub fn notes_in(&self, part: Part) -> Vec<NoteRecord> {
        let ids: std::collections::HashSet<&String> = self.part_ids(part).iter().collect();
        self.notes
            .iter()
            .filter(|n| self.note_patient.get(&n.note_id).is_some_and(|p| ids.contains(p)))
            .cloned()
            .collect()
    }

    pub fn patients_in(&self, part: Part) -> Vec<&Patient> {
        let ids: std::collections::HashSet<&String> = self.part_ids(part).iter().collect();
        self.patients.iter().filter(|p| ids.contains(&p.patient_id)).collect()
    }

    /// Full code history of every patient anchored at each encounter.
    pub fn sequences_in(&self, part: Part, max_codes: usize) -> Vec<EncounterSequence> {
        self.patients_in(part)
            .into_iter()
            .flat_map(|p| (0..p.encounters.len()).map(move |j| sequence_for(p, j, &self.code_vocab, max_codes)))
            .collect()
    }

    fn fingerprints(&self) -> (String, String) {
        (self.text_vocab.fingerprint(), self.code_vocab.fingerprint())
    }
}

fn gen_data(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let d = &cfg.data;
    let (notes, patients, descriptions) = match (&d.notes, &d.encounters, &d.descriptions) {
        (Some(n), Some(e), Some(ds)) => (data::load_notes(n)?, data::load_encounters(e)?, data::load_descriptions(ds)?),
        _ => {
            let cohort = data::generate_cohort(&d.synth, cfg.seed)?;
            let notes = cohort.note_records();
            (notes, cohort.patients, cohort.descriptions)
        }
    };
    let encounter_ids: std::collections::HashSet<&str> = patients.iter().flat_map(|p| p.encounters.iter().map(|e| e.encounter_id.as_str())).collect();
    if let Some(n) = notes.iter().find(|n| !encounter_ids.contains(n.note_id.as_str())) {
        return Err(Error::Data(format!("note {} matches no encounter", n.note_id)));
    }
    let ids: Vec<String> = patients.iter().map(|p| p.patient_id.clone()).collect();
    let split = split_patients(&ids, d.train_fraction, d.dev_fraction, cfg.seed);
    let train_ids: std::collections::HashSet<&String> = split.train.iter().collect();
    let train_patients: Vec<&Patient> = patients.iter().filter(|p| train_ids.contains(&p.patient_id)).collect();
    let train_encounters: std::collections::HashSet<&str> = train_patients
        .iter()
        .flat_map(|p| p.encounters.iter().map(|e| e.encounter_id.as_str()))
        .collect();
    let corpus: Vec<String> = notes
        .iter()
        .filter(|n| train_encounters.contains(n.note_id.as_str()))
        .map(|n| data::preprocess_text(&n.text))
        .chain(descriptions.values().map(|t| data::preprocess_text(t)))
        .collect();
    let text_vocab = train_bpe(corpus.iter(), d.text_vocab_size)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in train_patients.iter().flat_map(|p| p.encounters.iter().flat_map(|e| e.codes.iter())) {
        *counts.entry(c.clone()).or_default() += 1;
    }
    let counts: Vec<(String, usize)> = counts.into_iter().collect();
    let code_vocab = build_code_vocab(&counts, d.min_code_frequency)?;

    let f = |n: &str| ctx.file(Stage::GenData, n);
    data::write_notes(f("notes.jsonl"), &notes)?;
    data::write_encounters(f("encounters.csv"), &patients)?;
    data::write_descriptions(f("descriptions.tsv"), &descriptions)?;
    write_json(f("split.json"), &split)?;
    text_vocab.save(f("text_vocab.txt"), f("text_merges.txt"))?;
    code_vocab.save(f("code_vocab.txt"))?;
    let outputs = [
        "notes.jsonl",
        "encounters.csv",
        "descriptions.tsv",
        "split.json",
        "text_vocab.txt",
        "text_merges.txt",
        "code_vocab.txt",
    ];
    Ok((
        outputs.iter().map(|s| s.to_string()).collect(),
        json!({
            "patients": patients.len(),
            "notes": notes.len(),
            "train_patients": split.train.len(),
            "dev_patients": split.dev.len(),
            "test_patients": split.test.len(),
            "text_vocab": text_vocab.len(),
            "code_vocab": code_vocab.len(),
        }),
    ))
}

// ---------------------------------------------------------------- training stages

pub const CHECKPOINT: &str = "checkpoint.bin";

pub fn load_checkpoint(ctx: &Context, stage: Stage, bundle: &DataBundle) -> Result<Checkpoint> {
    let ck = Checkpoint::load(ctx.file(stage, CHECKPOINT))?;
    let (t, c) = bundle.fingerprints();
    ck.check_vocab("text", &t)?;
    ck.check_vocab("code", &c)?;
    Ok(ck)
}

fn save_checkpoint(ctx: &Context, stage: Stage, bundle: &DataBundle, config: &DualConfig, params: ParamStore<f32>) -> Result<()> {
    let (t, c) = bundle.fingerprints();
    let mut ck = Checkpoint::new(config.clone(), params).with_vocab("text", t).with_vocab("code", c);
    ck.meta.insert("stage".into(), stage.name().into());
    ck.save(ctx.file(stage, CHECKPOINT))
}

fn texts(notes: &[NoteRecord], vocab: &TextVocab, max_len: usize) -> Vec<Vec<u32>> {
    notes.iter().map(|n| vocab.encode_text(&n.text, max_len)).collect()
}

fn stage_pretrain_codes(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let dual = cfg.model.dual(b.text_vocab.len(), b.code_vocab.len());
    dual.validate()?;
    let mut params = contrastive::init_dual::<f32>(&dual, cfg.seed)?;
    let max_codes = dual.code.max_codes();
    let (train, dev) = (b.sequences_in(Part::Train, max_codes), b.sequences_in(Part::Dev, max_codes));
    let tc = cfg.seeded(&cfg.code_pretrain.train);
    let report = pretrain::pretrain_codes(&mut params, &dual.code, &train, &dev, &tc, &cfg.masking, &b.code_vocab)?;
    pretrain::write_mlm_curve(ctx.file(Stage::PretrainCodes, "curve.csv"), &report.curve)?;
    write_json(ctx.file(Stage::PretrainCodes, "report.json"), &report)?;
    save_checkpoint(ctx, Stage::PretrainCodes, &b, &dual, params)?;
    Ok((
        vec!["curve.csv".into(), "report.json".into(), CHECKPOINT.into()],
        json!({ "best_step": report.best_step, "best_dev_loss": report.best_dev_loss, "best_dev_perplexity": report.best_dev_perplexity() }),
    ))
}

fn stage_pretrain_text(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, Stage::PretrainCodes, &b)?;
    let (dual, mut params) = (ck.config, ck.params);
    let max_len = dual.text.max_len;
    let (train, dev) = (
        texts(&b.notes_in(Part::Train), &b.text_vocab, max_len),
        texts(&b.notes_in(Part::Dev), &b.text_vocab, max_len),
    );
    let tc = cfg.seeded(&cfg.text_pretrain.train);
    let report = pretrain::pretrain_text(&mut params, &dual.text, &train, &dev, &tc, &cfg.masking, &b.text_vocab)?;
    pretrain::write_mlm_curve(ctx.file(Stage::PretrainText, "curve.csv"), &report.curve)?;
    write_json(ctx.file(Stage::PretrainText, "report.json"), &report)?;
    save_checkpoint(ctx, Stage::PretrainText, &b, &dual, params)?;
    Ok((
        vec!["curve.csv".into(), "report.json".into(), CHECKPOINT.into()],
        json!({ "best_step": report.best_step, "best_dev_loss": report.best_dev_loss, "best_dev_perplexity": report.best_dev_perplexity() }),
    ))
}

fn contrastive_run(cfg: &RunConfig, ctx: &Context, stage: Stage, from: Stage, lengthen_to: Option<usize>) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, from, &b)?;
    let (mut dual, mut params) = (ck.config, ck.params);
    if let Some(len) = lengthen_to {
        contrastive::stage_lengthen(&mut params, &mut dual, len)?;
    }
    let pairs = |p: Part| contrastive::build_pairs(&b.notes_in(p), &b.text_vocab, &b.code_vocab, &dual);
    let (train, dev): (Vec<Pair>, Vec<Pair>) = (pairs(Part::Train), pairs(Part::Dev));
    let (tc, text_mlm) = match stage {
        Stage::Lengthen => (cfg.seeded(&cfg.lengthen.train), cfg.contrastive.text_mlm),
        _ => (cfg.seeded(&cfg.contrastive.train), cfg.contrastive.text_mlm),
    };
    let opts = ContrastiveOptions {
        text_mlm,
        masking: cfg.masking.clone(),
    };
    let before = contrastive::in_batch_retrieval(&params, &dual, &dev, tc.batch_size)?;
    let report = contrastive::train_contrastive(&mut params, &dual, &train, &dev, &tc, &opts, &b.text_vocab)?;
    let after = contrastive::in_batch_retrieval(&params, &dual, &dev, tc.batch_size)?;
    let tau = contrastive::temperature(&params)?;
    contrastive::write_curve(ctx.file(stage, "curve.csv"), &report.curve)?;
    let summary = json!({
        "best_step": report.best_step,
        "best_dev_loss": report.best_dev_loss,
        "dev_retrieval_before": before,
        "dev_retrieval_after": after,
        "temperature": tau,
        "text_max_len": dual.text.max_len,
    });
    write_json(ctx.file(stage, "report.json"), &json!({ "report": report, "summary": summary }))?;
    save_checkpoint(ctx, stage, &b, &dual, params)?;
    Ok((vec!["curve.csv".into(), "report.json".into(), CHECKPOINT.into()], summary))
}

fn stage_contrastive(cfg: &RunConfig, ctx: &Context) -> StageResult {
    contrastive_run(cfg, ctx, Stage::TrainContrastive, Stage::PretrainText, None)
}

fn stage_lengthen(cfg: &RunConfig, ctx: &Context) -> StageResult {
    contrastive_run(cfg, ctx, Stage::Lengthen, Stage::TrainContrastive, Some(cfg.lengthen.max_len))
}

/// Description and single-code embeddings for every described code in the
/// vocabulary, row-aligned, plus the code list.
pub fn description_embeddings(
    params: &ParamStore<f32>,
    dual: &DualConfig,
    bundle: &DataBundle,
    max_codes: usize,
) -> Result<(Vec<String>, nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
    let mut pairs = finetune::description_pairs(&bundle.descriptions, &bundle.text_vocab, &bundle.code_vocab, dual);
    if max_codes > 0 {
        pairs.truncate(max_codes);
    }
    let (t, d) = contrastive::embed_pairs(params, dual, &pairs, 32)?;
    Ok((pairs.into_iter().map(|p| p.id).collect(), analysis::to_matrix(&t)?, analysis::to_matrix(&d)?))
}

fn description_retrieval(params: &ParamStore<f32>, dual: &DualConfig, bundle: &DataBundle) -> Result<f64> {
    let (_, t, d) = description_embeddings(params, dual, bundle, 0)?;
    analysis::retrieval_accuracy(&t, &d, 1)
}

fn stage_descriptions(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, Stage::Lengthen, &b)?;
    let (dual, mut params) = (ck.config, ck.params);
    let before = description_retrieval(&params, &dual, &b)?;
    let tc = cfg.seeded(&cfg.finetune.descriptions);
    let report = finetune::finetune_icd_descriptions(&mut params, &dual, &b.descriptions, &b.text_vocab, &b.code_vocab, &tc)?;
    let after = description_retrieval(&params, &dual, &b)?;
    contrastive::write_curve(ctx.file(Stage::FinetuneIcdDesc, "curve.csv"), &report.curve)?;
    let summary = json!({ "retrieval_at_1_before": before, "retrieval_at_1_after": after, "best_step": report.best_step });
    write_json(
        ctx.file(Stage::FinetuneIcdDesc, "report.json"),
        &json!({ "report": report, "summary": summary }),
    )?;
    save_checkpoint(ctx, Stage::FinetuneIcdDesc, &b, &dual, params)?;
    Ok((vec!["curve.csv".into(), "report.json".into(), CHECKPOINT.into()], summary))
}

/// The `n` least frequent training labels with at least `min_count` notes
/// and a description, ordered by frequency then code.
pub fn rare_labels(train: &[NoteRecord], descriptions: &BTreeMap<String, String>, n: usize, min_count: usize) -> Result<Vec<String>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in train.iter().flat_map(|n| n.codes.iter()) {
        *counts.entry(c.as_str()).or_default() += 1;
    }
    let mut eligible: Vec<(&str, usize)> = counts.into_iter().filter(|(c, k)| *k >= min_count && descriptions.contains_key(*c)).collect();
    eligible.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    if eligible.len() < n {
        return Err(Error::Data(format!("only {} labels have at least {min_count} training notes", eligible.len())));
    }
    Ok(eligible.into_iter().take(n).map(|(c, _)| c.to_string()).collect())
}

/// Notes carrying at least one task label, as `(id, text, codes)`.
pub fn task_notes(notes: &[NoteRecord], labels: &[String]) -> Vec<(String, String, Vec<String>)> {
    let set: std::collections::HashSet<&String> = labels.iter().collect();
    notes
        .iter()
        .filter(|n| n.codes.iter().any(|c| set.contains(c)))
        .map(|n| (n.note_id.clone(), n.text.clone(), n.codes.clone()))
        .collect()
}

fn predictions(task: &PromptTask, scores: &finetune::NoteScores) -> Vec<Prediction> {
    scores
        .ids
        .iter()
        .zip(&scores.scores)
        .map(|(id, s)| Prediction {
            instance_id: id.clone(),
            scores: task.codes.iter().cloned().zip(s.iter().copied()).collect(),
        })
        .collect()
}

fn stage_prompt(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, cfg.finetune.prompt_init, &b)?;
    let (dual, mut params) = (ck.config, ck.params);
    let f = &cfg.finetune;
    let train_notes = b.notes_in(Part::Train);
    let labels = rare_labels(&train_notes, &b.descriptions, f.n_labels, f.min_label_count)?;
    let task = PromptTask::new(&labels, &b.descriptions, &b.text_vocab, f.labels_per_prompt)?;
    let max_len = dual.text.max_len;
    let examples = |notes: &[NoteRecord]| task.examples(&task_notes(notes, &labels), &b.text_vocab, max_len);
    let (train, dev, test): (Vec<PromptExample>, _, _) = (examples(&train_notes)?, examples(&b.notes_in(Part::Dev))?, examples(&b.notes_in(Part::Test))?);
    let tc = cfg.seeded(&f.prompt);
    let report = finetune::finetune_prompt(&mut params, &dual.text, &train, &dev, &tc)?;
    let dev_scores = finetune::score_examples(&params, &dual.text, &dev, tc.batch_size)?;
    let test_scores = finetune::score_examples(&params, &dual.text, &test, tc.batch_size)?;
    let stage = Stage::FinetunePrompt;
    finetune::write_predictions(ctx.file(stage, "dev_predictions.jsonl"), &predictions(&task, &dev_scores))?;
    finetune::write_predictions(ctx.file(stage, "test_predictions.jsonl"), &predictions(&task, &test_scores))?;
    write_json(ctx.file(stage, "task.json"), &task)?;
    write_json(ctx.file(stage, "report.json"), &report)?;
    save_checkpoint(ctx, stage, &b, &dual, params)?;
    Ok((
        ["dev_predictions.jsonl", "test_predictions.jsonl", "task.json", "report.json", CHECKPOINT]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        json!({
            "labels": labels.len(),
            "train_notes": train.len() / task.len().div_ceil(f.labels_per_prompt),
            "best_step": report.best_step,
            "best_dev_score": report.best_dev_score,
        }),
    ))
}

// ---------------------------------------------------------------- evaluation

/// Label codes, gold matrix and score matrix.
pub type Aligned = (Vec<String>, Vec<Vec<bool>>, Vec<Vec<f64>>);

/// Gold and score matrices for predictions against gold notes. Labels are
/// the union of predicted codes, sorted; missing scores count as 0.
pub fn align_predictions(preds: &[Prediction], gold: &[NoteRecord]) -> Result<Aligned> {
    let by_id: HashMap<&str, &NoteRecord> = gold.iter().map(|n| (n.note_id.as_str(), n)).collect();
    let labels: Vec<String> = preds
        .iter()
        .flat_map(|p| p.scores.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut y_true = Vec::with_capacity(preds.len());
    let mut y_score = Vec::with_capacity(preds.len());
    for p in preds {
        let note = by_id
            .get(p.instance_id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown note {}", p.instance_id)))?;
        let codes: std::collections::HashSet<&str> = note.codes.iter().map(String::as_str).collect();
        y_true.push(labels.iter().map(|l| codes.contains(l.as_str())).collect());
        y_score.push(labels.iter().map(|l| p.scores.get(l).copied().unwrap_or(0.0)).collect());
    }
    Ok((labels, y_true, y_score))
}

/// Metrics for `preds`; thresholds come from `dev` when given, else 0.5.
pub fn evaluate_predictions(
    preds: &[Prediction],
    gold: &[NoteRecord],
    dev: Option<(&[Prediction], &[NoteRecord])>,
    mode: metrics::ThresholdMode,
) -> Result<MetricsReport> {
    let (labels, y_true, y_score) = align_predictions(preds, gold)?;
    let thresholds = match dev {
        Some((dp, dg)) => {
            let (dl, dt, ds) = align_predictions(dp, dg)?;
            if dl != labels {
                return Err(Error::Data("dev and test predictions cover different labels".into()));
            }
            metrics::select_threshold(&dt, &ds, mode)?
        }
        None => Thresholds::Global(metrics::FALLBACK_THRESHOLD),
    };
    metrics::evaluate(&labels, &y_true, &y_score, &thresholds)
}

fn stage_evaluate(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let f = |n: &str| ctx.file(Stage::FinetunePrompt, n);
    let dev = finetune::load_predictions(f("dev_predictions.jsonl"))?;
    let test = finetune::load_predictions(f("test_predictions.jsonl"))?;
    let report = evaluate_predictions(&test, &b.notes, Some((&dev, &b.notes)), cfg.eval.threshold_mode)?;
    write_json(ctx.file(Stage::Evaluate, "metrics.json"), &report)?;
    std::fs::write(ctx.file(Stage::Evaluate, "metrics.txt"), report.table("test"))?;
    Ok((
        vec!["metrics.json".into(), "metrics.txt".into()],
        json!({ "macro_f1": report.macro_f1, "micro_f1": report.micro_f1, "macro_auc": report.macro_auc, "micro_auc": report.micro_auc }),
    ))
}

/// A noisy stand-in for an external ranker: gold codes get a bonus, every
/// vocabulary code gets Gaussian noise, and the top `k` are kept.
pub fn synthetic_candidates(notes: &[NoteRecord], codes: &[String], k: usize, seed: u64) -> BTreeMap<String, Vec<Candidate>> {
    let noise = Normal::new(0.0, 0.6).expect("valid normal");
    let mut rng = stream(seed, "candidates");
    let mut out = BTreeMap::new();
    for n in notes {
        let gold: std::collections::HashSet<&String> = n.codes.iter().collect();
        let mut list: Vec<Candidate> = codes
            .iter()
            .map(|c| Candidate {
                code: c.clone(),
                score: if gold.contains(c) { 1.0 } else { 0.0 } + noise.sample(&mut rng),
            })
            .collect();
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        list.truncate(k);
        out.insert(n.note_id.clone(), list);
    }
    out
}

fn rerank_instances(
    params: &ParamStore<f32>,
    dual: &DualConfig,
    bundle: &DataBundle,
    notes: &[NoteRecord],
    candidates: &BTreeMap<String, Vec<Candidate>>,
    labels_per_prompt: usize,
) -> Result<Vec<RerankInstance>> {
    let mut out = Vec::new();
    for n in notes {
        let Some(cands) = candidates.get(&n.note_id) else { continue };
        if cands.is_empty() {
            continue;
        }
        let codes: Vec<String> = cands.iter().map(|c| c.code.clone()).collect();
        let task = PromptTask::new(&codes, &bundle.descriptions, &bundle.text_vocab, labels_per_prompt)?;
        let ex = task.examples(&[(n.note_id.clone(), n.text.clone(), n.codes.clone())], &bundle.text_vocab, dual.text.max_len)?;
        let scores = finetune::score_examples(params, &dual.text, &ex, 16)?;
        out.push(RerankInstance {
            id: n.note_id.clone(),
            candidates: cands.clone(),
            model: scores.scores.into_iter().next().unwrap_or_default(),
            gold: n.codes.iter().cloned().collect(),
        });
    }
    Ok(out)
}

fn stage_rerank(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, Stage::FinetunePrompt, &b)?;
    let e = &cfg.eval;
    let (dev_notes, test_notes) = (b.notes_in(Part::Dev), b.notes_in(Part::Test));
    let candidates = match &e.candidates {
        Some(path) => finetune::load_candidates(path)?,
        None => {
            let codes: Vec<String> = b.code_vocab.codes().filter(|c| b.descriptions.contains_key(*c)).map(str::to_string).collect();
            let all: Vec<NoteRecord> = dev_notes.iter().chain(&test_notes).cloned().collect();
            synthetic_candidates(&all, &codes, e.candidate_count, cfg.seed)
        }
    };
    let lpp = cfg.finetune.labels_per_prompt;
    let dev = rerank_instances(&ck.params, &ck.config, &b, &dev_notes, &candidates, lpp)?;
    let test = rerank_instances(&ck.params, &ck.config, &b, &test_notes, &candidates, lpp)?;
    if dev.is_empty() || test.is_empty() {
        return Err(Error::Data("re-ranking needs candidates for dev and test notes".into()));
    }
    let (alpha, dev_p) = finetune::tune_alpha(&dev, &e.alpha_grid, e.rerank_k)?;
    let base = finetune::rerank_precision_at(&test, 1.0, e.rerank_k)?;
    let tuned = finetune::rerank_precision_at(&test, alpha, e.rerank_k)?;
    let mut reranked = BTreeMap::new();
    for inst in &test {
        reranked.insert(inst.id.clone(), finetune::rerank(&inst.candidates, &inst.model, alpha)?);
    }
    finetune::write_candidates(ctx.file(Stage::Rerank, "reranked.csv"), &reranked)?;
    let summary = json!({
        "alpha": alpha,
        "k": e.rerank_k,
        "dev_precision_at_k": dev_p,
        "test_precision_at_k_base": base,
        "test_precision_at_k_reranked": tuned,
    });
    write_json(ctx.file(Stage::Rerank, "report.json"), &summary)?;
    Ok((vec!["reranked.csv".into(), "report.json".into()], summary))
}

fn stage_align(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let pre = load_checkpoint(ctx, Stage::PretrainText, &b)?;
    let post = load_checkpoint(ctx, Stage::FinetuneIcdDesc, &b)?;
    let n = cfg.analysis.max_codes;
    let (_, t0, d0) = description_embeddings(&pre.params, &pre.config, &b, n)?;
    let (_, t1, d1) = description_embeddings(&post.params, &post.config, &b, n)?;
    let report = AlignmentReport::new((&t0, &d0), (&t1, &d1))?;
    write_json(ctx.file(Stage::AlignReport, "alignment.json"), &report)?;
    Ok((vec!["alignment.json".into()], serde_json::to_value(&report)?))
}

/// Writes code-encoder and text-encoder (description) embeddings of every
/// described code under `ck` to `path`.
pub fn export_embeddings(ck: &Checkpoint, bundle: &DataBundle, path: &Path, max_codes: usize, pca: bool) -> Result<usize> {
    let (ids, t, d) = description_embeddings(&ck.params, &ck.config, bundle, max_codes)?;
    let sets = [
        EmbeddingSet::new(ids.clone(), "code_encoder", d)?,
        EmbeddingSet::new(ids.clone(), "text_encoder", t)?,
    ];
    analysis::write_embeddings(path, &sets, pca)?;
    Ok(ids.len())
}

fn stage_export(cfg: &RunConfig, ctx: &Context) -> StageResult {
    let b = DataBundle::load(ctx)?;
    let ck = load_checkpoint(ctx, Stage::FinetuneIcdDesc, &b)?;
    let n = export_embeddings(
        &ck,
        &b,
        &ctx.file(Stage::ExportEmbeddings, "embeddings.csv"),
        cfg.analysis.max_codes,
        cfg.analysis.pca,
    )?;
    Ok((vec!["embeddings.csv".into()], json!({ "codes": n })))
}
