//! Artifact-driven orchestration: every stage reads its inputs from disk,
//! writes its outputs with provenance, and can be rerun in isolation.

mod export;
mod stages;
mod toolkit;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, TranslationConfig};
use crate::metrics::{BeatConfig, EmbedderConfig};
use crate::model::{DecodeMode, ModelConfig, TrainConfig};
use crate::motion::Part;
use crate::speech::SpeechConfig;
use crate::store;
use crate::synth::CorpusSpec;
use crate::tasks::{TaskConfig, TaskKind};
use crate::{Error, Result};

pub use export::{export_animation, read_marker_csv, ExportFormat, MarkerRow};
pub use stages::{
    audio_fit, codec_train, eval, export, generate, posttrain, pretrain, read_tokens, run, split, synth_data,
    tasks_compile, text_train, vocab_build, CodecSummary, Command, EvalItem, ExportRequest, GenerateMode,
    GenerateRecord, GenerateRequest, Phase, PosttrainReport, PretrainReport, ValPoint, TOKENS_FILE,
};
pub use toolkit::{Edited, Generation, Pass, PartSource, Toolkit};

/// Base values that a config file's keys are layered on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Full,
    /// CPU-sized widths and schedules.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    /// Relative entries resolve against `root`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: "mlang-run".into(),
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosttrainInit {
    Pretrained,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub mode: DecodeMode,
    pub temperature: f64,
    /// Restrict each pass to the segments its template outputs.
    pub constrained: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            constrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub embedder: EmbedderConfig,
    pub beat: BeatConfig,
    pub diversity_pairs: usize,
    /// Evaluate at most this many validation clips.
    pub max_clips: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            embedder: EmbedderConfig::default(),
            beat: BeatConfig::default(),
            diversity_pairs: 500,
            max_clips: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub paths: Paths,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    /// Fraction of clips held out for validation and evaluation.
    pub holdout_fraction: f64,
    /// Shared by the four part codecs; `part` and `seed` are set per part.
    pub codec: CodecConfig,
    pub translation: TranslationConfig,
    pub speech: SpeechConfig,
    pub text_vocab_size: usize,
    pub tasks: TaskConfig,
    pub pretrain_samples_per_clip: usize,
    pub posttrain_kinds: Vec<TaskKind>,
    pub posttrain_samples_per_clip: usize,
    /// Fraction of the training clips used for post-training.
    pub posttrain_fraction: f64,
    /// `vocab_size`, `max_input` and `max_output` are filled in at run time.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub posttrain: TrainConfig,
    pub posttrain_init: PosttrainInit,
    /// Validation loss is recorded every this many post-training epochs
    /// (0: only at the end).
    pub posttrain_eval_every: usize,
    pub decode: DecodeSettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl PipelineConfig {
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            paths: Paths::default(),
            seed: 0,
            corpus: CorpusSpec::bundled(),
            holdout_fraction: 0.1,
            codec: CodecConfig::new(Part::Upper),
            translation: TranslationConfig::default(),
            speech: SpeechConfig::default(),
            text_vocab_size: crate::text::DEFAULT_VOCAB,
            tasks: TaskConfig::default(),
            pretrain_samples_per_clip: 8,
            posttrain_kinds: vec![
                TaskKind::AudioToMotion,
                TaskKind::AudioToPart,
                TaskKind::TextToMotion,
                TaskKind::TextToPart,
                TaskKind::EmotionToMotion,
                TaskKind::MotionToEmotion,
                TaskKind::MotionToText,
            ],
            posttrain_samples_per_clip: 1,
            posttrain_fraction: 1.0,
            model: ModelConfig::new(0),
            pretrain: TrainConfig {
                lr: 2e-4,
                epochs: 20,
                ..TrainConfig::default()
            },
            posttrain: TrainConfig {
                lr: 1e-4,
                epochs: 350,
                ..TrainConfig::default()
            },
            posttrain_init: PosttrainInit::Pretrained,
            posttrain_eval_every: 0,
            decode: DecodeSettings::default(),
            eval: EvalSettings::default(),
        }
    }

    pub fn reduced() -> Self {
        let full = Self::full();
        Self {
            preset: Preset::Reduced,
            codec: CodecConfig::reduced(Part::Upper),
            speech: SpeechConfig {
                codebook_size: 128,
                ..SpeechConfig::default()
            },
            text_vocab_size: 512,
            pretrain_samples_per_clip: 4,
            posttrain_kinds: vec![
                TaskKind::AudioToMotion,
                TaskKind::AudioToPart,
                TaskKind::TextToPart,
                TaskKind::MotionToEmotion,
            ],
            model: ModelConfig::reduced(0),
            pretrain: TrainConfig {
                lr: 1e-3,
                epochs: 12,
                warmup_steps: 50,
                ..full.pretrain.clone()
            },
            posttrain: TrainConfig {
                lr: 5e-4,
                epochs: 15,
                warmup_steps: 20,
                ..full.posttrain.clone()
            },
            ..full
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Reduced => Self::reduced(),
        }
    }

    /// Layers a (possibly partial) JSON object over the preset it names.
    pub fn from_json(value: &Value) -> Result<Self> {
        Self::layered(Some(value), None, &[])
    }

    /// Reads the config file (if any), applies `--seed` and `key=value`
    /// overrides on dotted paths, and validates the result.
    pub fn load(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Config(format!("config file {} not found", p.display())));
                }
                let text = std::fs::read_to_string(p)?;
                Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        Self::layered(file.as_ref(), seed, overrides)
    }

    fn layered(file: Option<&Value>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let parsed: Vec<(Vec<&str>, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
        let preset_value = parsed
            .iter()
            .rev()
            .find(|(k, _)| k == &["preset"])
            .map(|(_, v)| v.clone())
            .or_else(|| file.and_then(|f| f.get("preset").cloned()));
        let preset: Preset = match preset_value {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::Full,
        };
        let mut value = serde_json::to_value(Self::preset(preset))?;
        if let Some(f) = file {
            if !f.is_object() {
                return Err(Error::Config("config file must hold a JSON object".into()));
            }
            merge(&mut value, f, "")?;
        }
        for (keys, v) in parsed {
            set_path(&mut value, &keys, v)?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must be in (0, 1), got {}", self.holdout_fraction));
        }
        if !(self.posttrain_fraction > 0.0 && self.posttrain_fraction <= 1.0) {
            return bad(format!("posttrain_fraction must be in (0, 1], got {}", self.posttrain_fraction));
        }
        if self.pretrain_samples_per_clip == 0 || self.posttrain_samples_per_clip == 0 {
            return bad("samples per clip must be positive".into());
        }
        if self.posttrain_kinds.is_empty() {
            return bad("posttrain_kinds is empty".into());
        }
        if self.corpus.n < 2 {
            return bad("the corpus needs at least two clips".into());
        }
        if self.text_vocab_size < crate::text::MIN_VOCAB {
            return bad(format!("text_vocab_size must be at least {}", crate::text::MIN_VOCAB));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("posttrain", &self.posttrain)] {
            if !(t.lr > 0.0) || t.batch_size == 0 || t.epochs == 0 {
                return bad(format!("{name}: lr, batch_size and epochs must be positive"));
            }
        }
        let (lo, hi) = self.tasks.mask_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("mask_ratio must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"));
        }
        self.model_config(crate::text::MIN_VOCAB)?;
        self.codec.validate().map_err(|e| Error::Config(format!("codec: {e}")))?;
        Ok(())
    }

    /// The language model configuration for a vocabulary of `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            vocab_size,
            max_input: self.tasks.max_input,
            max_output: self.tasks.max_output + 1,
            ..self.model.clone()
        };
        m.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(m)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.paths)
    }

    /// Seed of one stage, a fixed function of the master seed and the
    /// stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(stage.as_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn parse_override(s: &str) -> Result<(Vec<&str>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let keys: Vec<&str> = key.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

fn set_path(root: &mut Value, keys: &[&str], v: Value) -> Result<()> {
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let here = keys[..=i].join(".");
        cur = match cur {
            Value::Object(map) => map.get_mut(*k).ok_or_else(|| Error::Config(format!("unknown config key {here}")))?,
            Value::Array(items) => {
                let idx: usize = k.parse().map_err(|_| Error::Config(format!("{here}: expected an array index")))?;
                items.get_mut(idx).ok_or_else(|| Error::Config(format!("{here}: index out of range")))?
            }
            _ => return Err(Error::Config(format!("{here}: parent is not an object"))),
        };
    }
    *cur = v;
    Ok(())
}

/// Recursively overlays `over` on `base`; keys unknown to `base` are
/// rejected.
fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown config key {key}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Where every artifact lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(paths: &Paths) -> Self {
        Self {
            root: paths.root.clone(),
            data: paths.root.join(&paths.data),
            checkpoints: paths.root.join(&paths.checkpoints),
            reports: paths.root.join(&paths.reports),
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.data.join("corpus")
    }

    pub fn tokens(&self) -> PathBuf {
        self.data.join("tokens").join(TOKENS_FILE)
    }

    pub fn tasks(&self, phase: Phase) -> PathBuf {
        self.data.join("tasks").join(phase.name())
    }

    /// `split` is `train` or `val`.
    pub fn task_corpus(&self, phase: Phase, split: &str) -> PathBuf {
        self.tasks(phase).join(format!("{split}.jsonl"))
    }

    pub fn codecs(&self) -> PathBuf {
        self.checkpoints.join("codecs")
    }

    pub fn codec(&self, part: Part) -> PathBuf {
        self.codecs().join(part.name())
    }

    pub fn translation(&self) -> PathBuf {
        self.codecs().join("translation")
    }

    pub fn audio(&self) -> PathBuf {
        self.checkpoints.join("audio")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.checkpoints.join("text").join("tokenizer.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.checkpoints.join("vocab").join("vocab.json")
    }

    pub fn lm(&self, phase: Phase) -> PathBuf {
        self.checkpoints.join("lm").join(phase.name())
    }

    pub fn embedder(&self) -> PathBuf {
        self.checkpoints.join("embedder")
    }

    pub fn codec_report(&self) -> PathBuf {
        self.reports.join("codecs").join("codecs.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.reports.join("eval")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.eval_dir().join("eval.json")
    }
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Written next to every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, config: &PipelineConfig, stage_seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            stage_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        store::write_json(&dir.join(PROVENANCE_FILE), self)
    }

    /// `<file>.provenance.json`, for artifacts that are single files.
    pub fn beside(file: &Path) -> PathBuf {
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".provenance.json");
        file.with_file_name(name)
    }

    pub fn write_beside(&self, file: &Path) -> Result<()> {
        store::write_json(&Self::beside(file), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(PROVENANCE_FILE);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        store::read_json(&p)
    }
}

/// Process exit status for an error: 2 config, 3 missing or mismatched
/// artifact, 4 training divergence, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidConfig(_) => 2,
        Error::MissingArtifact(_) | Error::VocabHashMismatch { .. } => 3,
        Error::DivergedTraining { .. } => 4,
        _ => 1,
    }
}

/// Machine-readable form of an error.
pub fn error_json(e: &Error) -> Value {
    let debug = format!("{e:?}");
    let kind = debug.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
    let mut v = serde_json::json!({
        "error": kind,
        "message": e.to_string(),
        "exit_code": exit_code(e),
    });
    if let Error::MissingArtifact(p) = e {
        v["artifact"] = Value::String(p.display().to_string());
    }
    v
}
