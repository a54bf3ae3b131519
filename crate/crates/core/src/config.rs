//! Run configuration: one TOML document with a global seed and a section per
//! stage. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::code_encoder::{CodeEncoderConfig, MaskingPolicy};
use crate::contrastive::{DualConfig, HeadConfig};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::ThresholdMode;
use crate::nn::TransformerConfig;
use crate::optim::TrainConfig;
use crate::pipeline::Stage;
use crate::text_encoder::TextEncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every stage; stage `train.seed` values are overwritten with it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub masking: MaskingPolicy,
    pub code_pretrain: StageSection,
    pub text_pretrain: StageSection,
    pub contrastive: ContrastiveSection,
    pub lengthen: LengthenSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synth: SynthConfig,
    /// Existing notes file to use instead of generating a cohort. When set,
    /// `encounters` and `descriptions` must be set as well.
    pub notes: Option<PathBuf>,
    pub encounters: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    /// Patient-level train and dev fractions; the rest is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub text_vocab_size: usize,
    pub min_code_frequency: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synth: SynthConfig::default(),
            notes: None,
            encounters: None,
            descriptions: None,
            train_fraction: 0.8,
            dev_fraction: 0.1,
            text_vocab_size: 600,
            min_code_frequency: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub text_max_len: usize,
    pub window: usize,
    pub code_max_len: usize,
    pub offset_scale: f64,
    pub heads_config: HeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            text_max_len: 256,
            window: 16,
            code_max_len: 64,
            offset_scale: crate::nn::INIT_STD,
            heads_config: HeadConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn dual(&self, text_vocab_size: usize, code_vocab_size: usize) -> DualConfig {
        let transformer = TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            dropout: self.dropout,
        };
        DualConfig {
            text: TextEncoderConfig {
                vocab_size: text_vocab_size,
                transformer: transformer.clone(),
                base_len: self.text_max_len,
                max_len: self.text_max_len,
                window: self.window,
                global_tokens: vec![0],
                random_keys: 0,
                random_seed: 0,
            },
            code: CodeEncoderConfig {
                vocab_size: code_vocab_size,
                transformer,
                max_len: self.code_max_len,
                offset_scale: self.offset_scale,
            },
            heads: self.heads_config.clone(),
        }
    }
}

fn desk(steps: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        warmup_steps: steps / 10,
        lr,
        eval_every: 50,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub train: TrainConfig,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection { train: desk(300, 16, 1e-3) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub train: TrainConfig,
    /// Joint masked-token loss on the text side.
    pub text_mlm: bool,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            train: desk(300, 16, 1e-3),
            text_mlm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthenSection {
    pub max_len: usize,
    /// Contrastive training after lengthening.
    pub train: TrainConfig,
}

impl Default for LengthenSection {
    fn default() -> Self {
        LengthenSection {
            max_len: 512,
            train: desk(100, 8, 5e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub descriptions: TrainConfig,
    pub prompt: TrainConfig,
    /// Size of the rare-label task.
    pub n_labels: usize,
    /// Minimum training positives for a label to be eligible.
    pub min_label_count: usize,
    /// Labels sharing one prompt; notes are repeated for each chunk.
    pub labels_per_prompt: usize,
    /// Checkpoint the prompt task starts from.
    pub prompt_init: Stage,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            descriptions: desk(250, 16, 1e-3),
            prompt: desk(150, 8, 1e-3),
            n_labels: 50,
            min_label_count: 3,
            labels_per_prompt: 10,
            prompt_init: Stage::FinetuneIcdDesc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold_mode: ThresholdMode,
    /// Candidate file for re-ranking; when unset a candidate list is
    /// synthesized from the test notes.
    pub candidates: Option<PathBuf>,
    pub candidate_count: usize,
    pub alpha_grid: Vec<f64>,
    pub rerank_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold_mode: ThresholdMode::Global,
            candidates: None,
            candidate_count: 20,
            alpha_grid: crate::finetune::default_alpha_grid(),
            rerank_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Codes exported and aligned; 0 means every described code.
    pub max_codes: usize,
    pub pca: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { max_codes: 0, pca: true }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataSection::default(),
            model: ModelSection::default(),
            masking: MaskingPolicy::default(),
            code_pretrain: StageSection::default(),
            text_pretrain: StageSection::default(),
            contrastive: ContrastiveSection::default(),
            lengthen: LengthenSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A stage's train config with the global seed applied.
    pub fn seeded(&self, tc: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, ..tc.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let f = (d.train_fraction, d.dev_fraction);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 <= 1.0) {
            return Err(Error::Config(format!("invalid split fractions {f:?}")));
        }
        let given = [&d.notes, &d.encounters, &d.descriptions].iter().filter(|p| p.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::Config("data.notes, data.encounters and data.descriptions go together".into()));
        }
        if d.notes.is_none() {
            d.synth.validate()?;
        }
        self.masking.validate()?;
        self.model.dual(d.text_vocab_size, 8).validate()?;
        for tc in [
            &self.code_pretrain.train,
            &self.text_pretrain.train,
            &self.contrastive.train,
            &self.lengthen.train,
            &self.finetune.descriptions,
            &self.finetune.prompt,
        ] {
            tc.validate()?;
        }
        if self.lengthen.max_len < self.model.text_max_len {
            return Err(Error::Config("lengthen.max_len must not be below model.text_max_len".into()));
        }
        if self.finetune.n_labels == 0 || self.finetune.labels_per_prompt == 0 {
            return Err(Error::Config("finetune.n_labels and finetune.labels_per_prompt must be positive".into()));
        }
        let init = [Stage::PretrainText, Stage::TrainContrastive, Stage::Lengthen, Stage::FinetuneIcdDesc];
        if !init.contains(&self.finetune.prompt_init) {
            return Err(Error::Config(format!("finetune.prompt_init cannot be {}", self.finetune.prompt_init.name())));
        }
        if self.eval.alpha_grid.is_empty() || self.eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("eval.alpha_grid must be nonempty within [0, 1]".into()));
        }
        if self.eval.rerank_k == 0 || self.eval.candidate_count == 0 {
            return Err(Error::Config("eval.rerank_k and eval.candidate_count must be positive".into()));
        }
        Ok(())
    }

    /// Errors when a referenced input file is missing.
    pub fn check_paths(&self) -> Result<()> {
        let d = &self.data;
        for p in [&d.notes, &d.encounters, &d.descriptions, &self.eval.candidates].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[contrastive.train]\nstep = 3\n").is_err());
        let cfg = RunConfig::from_toml("seed = 3\n[contrastive.train]\nsteps = 40\nwarmup_steps = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.contrastive.train.steps, 40);
        assert_eq!(cfg.text_pretrain, StageSection::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = RunConfig::from_toml("[data]\ntrain_fraction = 0.95\ndev_fraction = 0.1\n").unwrap_err();
        assert!(e.is_config());
        assert!(RunConfig::from_toml("[lengthen]\nmax_len = 100\n").unwrap_err().is_config());
    }
}
