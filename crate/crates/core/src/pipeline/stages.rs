//! The pipeline commands. Each reads its upstream artifacts, refuses to run
//! when one is missing, and writes its outputs with provenance.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::toolkit::{require, require_dir};
use super::{
    export_animation, ExportFormat, Layout, Pass, PartSource, PipelineConfig, PosttrainInit, Provenance, Toolkit,
};
use crate::codec::{split_indices, train_codec, train_translation, CodecTrainReport, PartCodec, TranslationReport};
use crate::metrics::{self, beat_consistency, fgd, fit_embedder, text_overlap, EvalReport};
use crate::model::{Seq2Seq, TrainReport, TrainRun, Trainer};
use crate::motion::{MotionSequence, Part, ProxySkeleton};
use crate::speech::{featurize, fit_acoustic_codebook, AcousticCodebook, AudioClip};
use crate::synth::{load_corpus, synth_corpus, CorpusIndex, CorpusItem, Emotion, INDEX_FILE};
use crate::tasks::{generator_prompts, read_corpus, write_corpus, ClipTokens, Slot, Slots, TaskKind, TaskSample};
use crate::text::{train_subword, SubwordTokenizer};
use crate::vocab::UnifiedVocab;
use crate::{store, Error, Result};

pub const TOKENS_FILE: &str = "tokens.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Posttrain,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Posttrain => "posttrain",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "posttrain" => Ok(Phase::Posttrain),
            _ => Err(Error::Config(format!("unknown phase {s:?} (pretrain or posttrain)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenerateMode {
    #[serde(rename = "audio2motion")]
    AudioToMotion,
    #[serde(rename = "text2motion")]
    TextToMotion,
    #[serde(rename = "motion2emotion")]
    MotionToEmotion,
    /// Audio drives the body, a caption drives the listed parts.
    #[serde(rename = "editable")]
    Editable,
}

impl FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| {
            Error::Config(format!("unknown generation mode {s:?} (audio2motion, text2motion, motion2emotion, editable)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub mode: GenerateMode,
    pub audio: Option<PathBuf>,
    pub caption: Option<String>,
    pub motion: Option<PathBuf>,
    /// Output length; defaults to the audio length or the corpus clip length.
    pub frames: Option<usize>,
    /// Parts taken from the caption pass in editable mode.
    pub text_parts: Vec<Part>,
    pub output: PathBuf,
    /// Model directory; defaults to the post-trained model.
    pub checkpoint: Option<PathBuf>,
}

impl GenerateRequest {
    pub fn new(mode: GenerateMode, output: PathBuf) -> Self {
        Self {
            mode,
            audio: None,
            caption: None,
            motion: None,
            frames: None,
            text_parts: vec![Part::Lower],
            output,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportRequest {
    pub input: PathBuf,
    pub output: PathBuf,
    pub format: ExportFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SynthData,
    CodecTrain,
    AudioFit,
    TextTrain,
    VocabBuild,
    TasksCompile(Phase),
    Pretrain,
    Posttrain,
    Generate(GenerateRequest),
    Eval,
    Export(ExportRequest),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::CodecTrain => "codec-train",
            Command::AudioFit => "audio-fit",
            Command::TextTrain => "text-train",
            Command::VocabBuild => "vocab-build",
            Command::TasksCompile(_) => "tasks-compile",
            Command::Pretrain => "pretrain",
            Command::Posttrain => "posttrain",
            Command::Generate(_) => "generate",
            Command::Eval => "eval",
            Command::Export(_) => "export",
        }
    }
}

/// Runs one command and returns its summary.
pub fn run(command: &Command, config: &PipelineConfig) -> Result<Value> {
    config.validate()?;
    if !matches!(command, Command::Export(_)) {
        std::fs::create_dir_all(&config.paths.root)
            .map_err(|e| Error::Config(format!("workspace {} is not usable: {e}", config.paths.root.display())))?;
    }
    Ok(match command {
        Command::SynthData => serde_json::to_value(synth_data(config)?.spec)?,
        Command::CodecTrain => serde_json::to_value(codec_train(config)?)?,
        Command::AudioFit => audio_fit(config)?,
        Command::TextTrain => text_train(config)?,
        Command::VocabBuild => vocab_build(config)?,
        Command::TasksCompile(phase) => tasks_compile(config, *phase)?,
        Command::Pretrain => serde_json::to_value(pretrain(config)?)?,
        Command::Posttrain => serde_json::to_value(posttrain(config)?)?,
        Command::Generate(req) => generate(config, req)?,
        Command::Eval => serde_json::to_value(eval(config)?)?,
        Command::Export(req) => export(config, req)?,
    })
}

/// Train and validation clip indices, both sorted.
pub fn split(config: &PipelineConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = split_indices(n, config.holdout_fraction, config.stage_seed("split"));
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Upstream artifacts in dependency order; a command checks a prefix.
fn upstream(layout: &Layout) -> Vec<PathBuf> {
    let mut out = vec![layout.corpus().join(INDEX_FILE)];
    for p in Part::ALL {
        out.push(layout.codec(p).join(store::MANIFEST_FILE));
    }
    out.push(layout.translation().join(store::MANIFEST_FILE));
    out.push(layout.audio().join(store::MANIFEST_FILE));
    out.push(layout.tokenizer());
    out.push(layout.vocab());
    out
}

const AFTER_SYNTH: usize = 1;
const AFTER_TEXT: usize = 8;
const AFTER_VOCAB: usize = 9;

fn require_upstream(layout: &Layout, count: usize) -> Result<()> {
    upstream(layout).iter().take(count).try_for_each(|p| require(p))
}

fn load_items(config: &PipelineConfig) -> Result<Vec<CorpusItem>> {
    let dir = config.layout().corpus();
    let index: CorpusIndex = store::read_json(&dir.join(INDEX_FILE))?;
    if index.spec != config.corpus {
        return Err(Error::Config(format!(
            "the corpus in {} was generated from a different corpus spec; rerun synth-data",
            dir.display()
        )));
    }
    load_corpus(&dir)
}

fn provenance(config: &PipelineConfig, command: &str, stage: &str) -> Provenance {
    Provenance::new(command, config, config.stage_seed(stage))
}

pub fn synth_data(config: &PipelineConfig) -> Result<CorpusIndex> {
    let dir = config.layout().corpus();
    let index = synth_corpus(&config.corpus, &dir)?;
    Provenance::new("synth-data", config, config.corpus.seed).write(&dir)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSummary {
    pub parts: Vec<CodecTrainReport>,
    pub translation: TranslationReport,
}

fn train_motions(config: &PipelineConfig, items: &[CorpusItem]) -> Vec<MotionSequence> {
    split(config, items.len()).0.iter().map(|&i| items[i].motion.clone()).collect()
}

pub fn codec_train(config: &PipelineConfig) -> Result<CodecSummary> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_SYNTH)?;
    let motions = train_motions(config, &load_items(config)?);
    let mut parts = vec![];
    for p in Part::ALL {
        let stage = format!("codec-{p}");
        let mut c = config.codec.clone();
        c.seed = config.stage_seed(&stage);
        let (codec, report) = train_codec(&motions, p, &c)?;
        codec.save(&layout.codec(p))?;
        provenance(config, "codec-train", &stage).write(&layout.codec(p))?;
        parts.push(report);
    }
    let mut t = config.translation.clone();
    t.seed = config.stage_seed("translation");
    let (model, translation) = train_translation(&motions, &t)?;
    model.save(&layout.translation())?;
    provenance(config, "codec-train", "translation").write(&layout.translation())?;
    let summary = CodecSummary { parts, translation };
    store::write_json(&layout.codec_report(), &summary)?;
    provenance(config, "codec-train", "codec-report").write(layout.codec_report().parent().expect("in reports"))?;
    Ok(summary)
}

pub fn audio_fit(config: &PipelineConfig) -> Result<Value> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_SYNTH)?;
    let items = load_items(config)?;
    let feats: Vec<Array2<f32>> = split(config, items.len()).0.iter().map(|&i| featurize(&items[i].audio)).collect::<Result<_>>()?;
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut speech = config.speech.clone();
    speech.seed = config.stage_seed("audio-fit");
    let codebook = fit_acoustic_codebook(all.view(), speech.codebook_size, &speech)?;
    codebook.save(&layout.audio(), &speech)?;
    provenance(config, "audio-fit", "audio-fit").write(&layout.audio())?;
    Ok(serde_json::json!({
        "codebook_size": codebook.size(),
        "frames": all.nrows(),
        "distortion": codebook.distortion(all.view())?,
    }))
}

/// Every string the tokenizer should cover well: transcripts and captions
/// of the training clips, emotion labels, template and generator prompts.
fn text_corpus(config: &PipelineConfig, items: &[CorpusItem]) -> Vec<String> {
    let mut out = vec![];
    for i in split(config, items.len()).0 {
        out.push(items[i].meta.transcript.clone());
        out.push(items[i].meta.caption.clone());
    }
    out.extend(Emotion::ALL.iter().map(|e| e.name().to_string()));
    out.extend(crate::tasks::TemplateBank::builtin().literal_text());
    out.extend(generator_prompts());
    out
}

pub fn text_train(config: &PipelineConfig) -> Result<Value> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_SYNTH)?;
    let items = load_items(config)?;
    let tok = train_subword(&text_corpus(config, &items), config.text_vocab_size)?;
    tok.save(&layout.tokenizer())?;
    provenance(config, "text-train", "text-train").write(layout.tokenizer().parent().expect("in checkpoints"))?;
    Ok(serde_json::json!({"vocab_size": tok.vocab_size(), "merges": tok.merges()}))
}

pub fn vocab_build(config: &PipelineConfig) -> Result<Value> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_TEXT)?;
    let codecs: Vec<PartCodec> = Part::ALL.iter().map(|&p| PartCodec::load(&layout.codec(p))).collect::<Result<_>>()?;
    let (acoustic, _) = AcousticCodebook::load(&layout.audio())?;
    let tok = SubwordTokenizer::load(&layout.tokenizer())?;
    let vocab = Toolkit::vocab_for(&tok, &acoustic, &codecs)?;
    vocab.save(&layout.vocab())?;
    provenance(config, "vocab-build", "vocab-build").write(layout.vocab().parent().expect("in checkpoints"))?;
    Ok(serde_json::json!({"total_size": vocab.total_size(), "hash": vocab.hash()}))
}

fn write_tokens(path: &Path, clips: &[ClipTokens]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in clips {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the per-clip token streams written by `tasks-compile`.
pub fn read_tokens(path: &Path) -> Result<Vec<ClipTokens>> {
    require(path)?;
    std::io::BufReader::new(std::fs::File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn kind_counts(samples: &[TaskSample]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in samples {
        *out.entry(s.task.name()).or_insert(0) += 1;
    }
    out
}

pub fn tasks_compile(config: &PipelineConfig, phase: Phase) -> Result<Value> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_VOCAB)?;
    let tk = Toolkit::load(&layout, config.tasks.clone())?;
    let items = load_items(config)?;
    let clips: Vec<ClipTokens> = items.iter().map(|it| tk.clip_tokens(it)).collect::<Result<_>>()?;
    write_tokens(&layout.tokens(), &clips)?;
    provenance(config, "tasks-compile", "tokens").write(layout.tokens().parent().expect("in data"))?;
    let (train, val) = split(config, clips.len());
    let forge = tk.forge()?;
    let stage = format!("tasks-{}", phase.name());
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed(&stage));
    let mut summary = serde_json::Map::new();
    match phase {
        Phase::Pretrain => {
            let mut samples = vec![];
            for &i in &train {
                for _ in 0..config.pretrain_samples_per_clip {
                    samples.push(forge.pretrain(&clips[i], &mut rng)?);
                }
            }
            write_corpus(&samples, &tk.vocab, &layout.task_corpus(phase, "train"))?;
            summary.insert("clips".into(), train.len().into());
            summary.insert("train".into(), serde_json::to_value(kind_counts(&samples))?);
        }
        Phase::Posttrain => {
            let subset = posttrain_subset(config, &train);
            let compile = |ids: &[usize], per_clip: usize, rng: &mut ChaCha8Rng| -> Result<Vec<TaskSample>> {
                let mut out = vec![];
                for &i in ids {
                    let slots = Slots::from_clip(&clips[i]);
                    for &kind in &config.posttrain_kinds {
                        for _ in 0..per_clip {
                            out.push(forge.compile(kind, &slots, rng)?);
                        }
                    }
                }
                Ok(out)
            };
            let train_samples = compile(&subset, config.posttrain_samples_per_clip, &mut rng)?;
            let val_samples = compile(&val, 1, &mut ChaCha8Rng::seed_from_u64(config.stage_seed("tasks-val")))?;
            write_corpus(&train_samples, &tk.vocab, &layout.task_corpus(phase, "train"))?;
            write_corpus(&val_samples, &tk.vocab, &layout.task_corpus(phase, "val"))?;
            let ids: Vec<&str> = subset.iter().map(|&i| clips[i].id.as_str()).collect();
            store::write_json(&layout.tasks(phase).join("clips.json"), &ids)?;
            summary.insert("clips".into(), subset.len().into());
            summary.insert("train".into(), serde_json::to_value(kind_counts(&train_samples))?);
            summary.insert("val".into(), serde_json::to_value(kind_counts(&val_samples))?);
        }
    }
    provenance(config, "tasks-compile", &stage).write(&layout.tasks(phase))?;
    Ok(Value::Object(summary))
}

/// The training clips used for post-training, sorted.
fn posttrain_subset(config: &PipelineConfig, train: &[usize]) -> Vec<usize> {
    let mut ids = train.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.stage_seed("posttrain-subset")));
    let keep = ((config.posttrain_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    ids.truncate(keep);
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub samples: usize,
    pub steps: u64,
    pub epoch_loss: Vec<f64>,
}

fn load_vocab(layout: &Layout) -> Result<UnifiedVocab> {
    UnifiedVocab::load(&layout.vocab())
}

fn train_run(layout: &Layout, phase: Phase, vocab: &UnifiedVocab) -> TrainRun {
    let dir = layout.lm(phase);
    TrainRun {
        vocab_hash: vocab.hash(),
        log: Some(dir.join("log.csv")),
        checkpoint_dir: Some(dir),
        checkpoint_every: None,
        max_steps: None,
    }
}

pub fn pretrain(config: &PipelineConfig) -> Result<PretrainReport> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_VOCAB)?;
    require(&layout.task_corpus(Phase::Pretrain, "train"))?;
    let vocab = load_vocab(&layout)?;
    let samples = read_corpus(&layout.task_corpus(Phase::Pretrain, "train"), &vocab)?;
    let model = Seq2Seq::new(config.model_config(vocab.total_size())?, config.stage_seed("pretrain-init"), DType::F32)?;
    let mut tc = config.pretrain.clone();
    tc.seed = config.stage_seed("pretrain-order");
    let report = Trainer::new(tc).train(&model, &samples, &train_run(&layout, Phase::Pretrain, &vocab))?;
    let out = PretrainReport {
        samples: samples.len(),
        steps: report.steps,
        epoch_loss: report.epoch_loss,
    };
    let dir = layout.lm(Phase::Pretrain);
    store::write_json(&dir.join("report.json"), &out)?;
    provenance(config, "pretrain", "pretrain").write(&dir)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub epoch: usize,
    /// Mean validation loss per task kind, plus `all`.
    pub loss: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosttrainReport {
    pub init: PosttrainInit,
    pub train_samples: usize,
    pub val_samples: usize,
    pub steps: u64,
    pub epoch_loss: Vec<f64>,
    pub val_curve: Vec<ValPoint>,
    /// Final validation loss per task kind, plus `all`.
    pub val_loss: BTreeMap<String, f64>,
}

fn val_losses(model: &Seq2Seq, samples: &[TaskSample], batch_size: usize) -> Result<BTreeMap<String, f64>> {
    let mut by_kind: BTreeMap<String, Vec<TaskSample>> = BTreeMap::new();
    for s in samples {
        by_kind.entry(s.task.name()).or_default().push(s.clone());
    }
    let mut out = BTreeMap::new();
    for (k, group) in &by_kind {
        out.insert(k.clone(), model.eval_loss(group, batch_size)?);
    }
    out.insert("all".into(), model.eval_loss(samples, batch_size)?);
    Ok(out)
}

pub fn posttrain(config: &PipelineConfig) -> Result<PosttrainReport> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_VOCAB)?;
    let train_path = layout.task_corpus(Phase::Posttrain, "train");
    let val_path = layout.task_corpus(Phase::Posttrain, "val");
    require(&train_path)?;
    require(&val_path)?;
    let vocab = load_vocab(&layout)?;
    let model = match config.posttrain_init {
        PosttrainInit::Pretrained => {
            require_dir(&layout.lm(Phase::Pretrain))?;
            Seq2Seq::load(&layout.lm(Phase::Pretrain), &vocab.hash())?
        }
        PosttrainInit::Scratch => {
            Seq2Seq::new(config.model_config(vocab.total_size())?, config.stage_seed("posttrain-init"), DType::F32)?
        }
    };
    let samples = read_corpus(&train_path, &vocab)?;
    let val = read_corpus(&val_path, &vocab)?;
    let mut tc = config.posttrain.clone();
    tc.seed = config.stage_seed("posttrain-order");
    let bs = tc.batch_size.max(1);
    let per_epoch = samples.len().div_ceil(bs) as u64;
    let epochs = tc.epochs;
    let mut trainer = Trainer::new(tc);
    let mut run = train_run(&layout, Phase::Posttrain, &vocab);
    let every = if config.posttrain_eval_every == 0 { epochs } else { config.posttrain_eval_every };
    let mut val_curve = vec![];
    let mut epoch_loss = vec![];
    let mut done = 0;
    while done < epochs {
        done = (done + every).min(epochs);
        run.max_steps = Some(done as u64 * per_epoch);
        let r: TrainReport = trainer.train(&model, &samples, &run)?;
        epoch_loss.extend(r.epoch_loss);
        val_curve.push(ValPoint {
            epoch: done,
            loss: val_losses(&model, &val, bs)?,
        });
    }
    let report = PosttrainReport {
        init: config.posttrain_init,
        train_samples: samples.len(),
        val_samples: val.len(),
        steps: trainer.step(),
        epoch_loss,
        val_loss: val_curve.last().map(|p| p.loss.clone()).unwrap_or_default(),
        val_curve,
    };
    let dir = layout.lm(Phase::Posttrain);
    store::write_json(&dir.join("report.json"), &report)?;
    provenance(config, "posttrain", "posttrain").write(&dir)?;
    Ok(report)
}

fn load_model(layout: &Layout, checkpoint: Option<&Path>, vocab: &UnifiedVocab) -> Result<Seq2Seq> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.lm(Phase::Posttrain));
    require_dir(&dir)?;
    Seq2Seq::load(&dir, &vocab.hash())
}

/// Written beside every generated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub provenance: Provenance,
    pub mode: GenerateMode,
    pub frames: usize,
    pub passes: Vec<super::Generation>,
    /// Per-part origin of the decoded motion.
    pub sources: Vec<PartSource>,
    pub emotion: Option<String>,
    pub warnings: Vec<String>,
}

fn record_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".tokens.json");
    output.with_file_name(name)
}

fn read_audio(path: Option<&PathBuf>) -> Result<AudioClip> {
    let p = path.ok_or_else(|| Error::Config("this generation mode needs --audio".into()))?;
    require(p)?;
    AudioClip::read_wav(p)
}

fn caption(req: &GenerateRequest) -> Result<String> {
    req.caption.clone().ok_or_else(|| Error::Config("this generation mode needs --caption".into()))
}

pub fn generate(config: &PipelineConfig, req: &GenerateRequest) -> Result<Value> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_VOCAB)?;
    let tk = Toolkit::load(&layout, config.tasks.clone())?;
    let model = load_model(&layout, req.checkpoint.as_deref(), &tk.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed("generate"));
    let fps = tk.fps();
    let clip_frames = (config.corpus.duration_s * fps as f64).round() as usize;
    let audio_frames = |a: &AudioClip| (a.duration_s() * fps as f64).round() as usize;
    let settings = &config.decode;
    let sources_of = |parts: &[Option<Vec<u32>>; 4], pass: Pass| -> Vec<PartSource> {
        Part::ALL
            .iter()
            .map(|&p| {
                let tokens = parts[p.index()].clone().unwrap_or_default();
                PartSource {
                    part: p,
                    pass: if tokens.is_empty() { Pass::Rest } else { pass },
                    tokens,
                }
            })
            .collect()
    };
    let (record, motion) = match req.mode {
        GenerateMode::AudioToMotion | GenerateMode::TextToMotion => {
            let (kind, slots, frames, pass) = if req.mode == GenerateMode::AudioToMotion {
                let audio = read_audio(req.audio.as_ref())?;
                let slots = Slots {
                    audio: Some(tk.audio_tokens(&audio)?),
                    ..Default::default()
                };
                (TaskKind::AudioToMotion, slots, req.frames.unwrap_or(audio_frames(&audio)), Pass::Audio)
            } else {
                let slots = Slots {
                    caption: Some(caption(req)?),
                    ..Default::default()
                };
                (TaskKind::TextToMotion, slots, req.frames.unwrap_or(clip_frames), Pass::Text)
            };
            let g = tk.generate(&model, kind, &slots, None, frames, settings, &mut rng)?;
            let parts = tk.parts_of(&g.output);
            let (motion, warnings) = tk.decode_motion(&parts, frames)?;
            let record = GenerateRecord {
                provenance: provenance(config, "generate", "generate"),
                mode: req.mode,
                frames,
                passes: vec![g],
                sources: sources_of(&parts, pass),
                emotion: None,
                warnings,
            };
            (record, Some(motion))
        }
        GenerateMode::MotionToEmotion => {
            let path = req.motion.as_ref().ok_or_else(|| Error::Config("motion2emotion needs --motion".into()))?;
            require(path)?;
            let motion = MotionSequence::read_json(path)?;
            let tokens = tk.motion_tokens(&motion)?;
            let slots = Slots {
                motion: tokens.parts.clone().map(Some),
                ..Default::default()
            };
            let g = tk.generate(&model, TaskKind::MotionToEmotion, &slots, None, motion.frames(), settings, &mut rng)?;
            let emotion = tk.text_of(&g.output)?;
            let record = GenerateRecord {
                provenance: provenance(config, "generate", "generate"),
                mode: req.mode,
                frames: motion.frames(),
                passes: vec![g],
                sources: vec![],
                emotion: Some(emotion),
                warnings: vec![],
            };
            (record, None)
        }
        GenerateMode::Editable => {
            let audio = read_audio(req.audio.as_ref())?;
            let frames = req.frames.unwrap_or(audio_frames(&audio));
            let edited = tk.editable(&model, &tk.audio_tokens(&audio)?, &caption(req)?, &req.text_parts, frames, settings, &mut rng)?;
            let mut passes = vec![edited.audio_pass];
            passes.extend(edited.text_passes);
            let record = GenerateRecord {
                provenance: provenance(config, "generate", "generate"),
                mode: req.mode,
                frames,
                passes,
                sources: edited.sources,
                emotion: None,
                warnings: edited.warnings,
            };
            (record, Some(edited.motion))
        }
    };
    if let Some(dir) = req.output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match &motion {
        Some(m) => m.write_json(&req.output)?,
        None => store::write_json(&req.output, &serde_json::json!({"emotion": record.emotion}))?,
    }
    store::write_json(&record_path(&req.output), &record)?;
    Ok(serde_json::to_value(&record)?)
}

/// One evaluated validation clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub emotion: String,
    pub predicted_emotion: String,
    pub beat_consistency: Option<f64>,
    pub warnings: Vec<String>,
}

const BERTSCORE_STATUS: &str = "not computed: needs a pretrained text encoder that is not bundled";

pub fn eval(config: &PipelineConfig) -> Result<EvalReport> {
    let layout = config.layout();
    require_upstream(&layout, AFTER_VOCAB)?;
    let tk = Toolkit::load(&layout, config.tasks.clone())?;
    let model = load_model(&layout, None, &tk.vocab)?;
    let items = load_items(config)?;
    let (train, mut val) = split(config, items.len());
    if let Some(m) = config.eval.max_clips {
        val.truncate(m);
    }
    let mut emb_cfg = config.eval.embedder.clone();
    emb_cfg.seed = config.stage_seed("eval-embedder");
    let train_motion: Vec<MotionSequence> = train.iter().map(|&i| items[i].motion.clone()).collect();
    let (embedder, _) = fit_embedder(&train_motion, &emb_cfg)?;
    embedder.save(&layout.embedder())?;
    provenance(config, "eval", "eval-embedder").write(&layout.embedder())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed("eval"));
    let mut real = vec![];
    let mut generated = vec![];
    let mut records = vec![];
    let (mut bc_sum, mut bc_n) = (0.0, 0usize);
    let (mut bleu, mut rouge, mut correct) = (0.0, 0.0, 0usize);
    for &i in &val {
        let item = &items[i];
        let frames = item.motion.frames();
        let audio_slots = Slots {
            audio: Some(tk.audio_tokens(&item.audio)?),
            ..Default::default()
        };
        let g = tk.generate(&model, TaskKind::AudioToMotion, &audio_slots, None, frames, &config.decode, &mut rng)?;
        let (motion, warnings) = tk.decode_motion(&tk.parts_of(&g.output), frames)?;
        let bc = match beat_consistency(&item.audio, &motion, &config.eval.beat) {
            Ok(v) => Some(v),
            Err(Error::NoBeats("motion")) => Some(0.0),
            Err(Error::NoBeats(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(v) = bc {
            bc_sum += v;
            bc_n += 1;
        }
        let motion_slots = Slots {
            motion: tk.motion_tokens(&item.motion)?.parts.map(Some),
            ..Default::default()
        };
        let e = tk.generate(&model, TaskKind::MotionToEmotion, &motion_slots, Some(&[Slot::Emotion]), frames, &config.decode, &mut rng)?;
        let predicted = tk.text_of(&e.output)?;
        let truth = item.meta.emotion.name();
        let overlap = text_overlap(&predicted, truth);
        bleu += overlap.bleu1;
        rouge += overlap.rouge_l;
        correct += usize::from(predicted == truth);
        records.push(EvalItem {
            id: item.meta.id.clone(),
            emotion: truth.to_string(),
            predicted_emotion: predicted,
            beat_consistency: bc,
            warnings,
        });
        real.push(item.motion.clone());
        generated.push(motion);
    }
    let n = val.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let features: Vec<Array2<f32>> = generated
        .iter()
        .map(|m| embedder.embed(m).map(|f| f.mapv(|v| v as f32)))
        .collect::<Result<_>>()?;
    let report = EvalReport {
        fgd: fgd(&embedder, &real, &generated)?,
        bc: if bc_n > 0 { bc_sum / bc_n as f64 } else { 0.0 },
        diversity: metrics::diversity(&features, config.eval.diversity_pairs, &mut rng)?,
        bleu1: bleu / n as f64,
        rouge_l: rouge / n as f64,
        emotion_accuracy: Some(correct as f64 / n as f64),
        n_items: n,
        config_hash: config.hash(),
        bertscore: None,
        bertscore_status: BERTSCORE_STATUS.into(),
    };
    report.write(&layout.eval_report())?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(layout.eval_dir().join("items.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    provenance(config, "eval", "eval").write(&layout.eval_dir())?;
    Ok(report)
}

pub fn export(config: &PipelineConfig, req: &ExportRequest) -> Result<Value> {
    require(&req.input)?;
    let motion = MotionSequence::read_json(&req.input)?;
    export_animation(&motion, &ProxySkeleton::neutral(), &req.output, req.format)?;
    provenance(config, "export", "export").write_beside(&req.output)?;
    Ok(serde_json::json!({"frames": motion.frames(), "output": req.output.display().to_string()}))
}
