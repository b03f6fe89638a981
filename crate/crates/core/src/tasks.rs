//! Training samples over the unified vocabulary: self-supervised motion and
//! audio–text alignment tasks, and instruction samples compiled from a
//! template bank.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Part;
use crate::store;
use crate::synth::Emotion;
use crate::text::{SubwordTokenizer, MASK};
use crate::vocab::{Modality, UnifiedVocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Spatial,
    Temporal,
    #[serde(rename = "audio2text")]
    AudioToText,
    #[serde(rename = "text2audio")]
    TextToAudio,
    #[serde(rename = "audio2motion")]
    AudioToMotion,
    #[serde(rename = "audio2part")]
    AudioToPart,
    #[serde(rename = "text2motion")]
    TextToMotion,
    #[serde(rename = "text2part")]
    TextToPart,
    #[serde(rename = "emotion2motion")]
    EmotionToMotion,
    #[serde(rename = "motion2emotion")]
    MotionToEmotion,
    #[serde(rename = "motion2text")]
    MotionToText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 11] = [
        TaskKind::Spatial,
        TaskKind::Temporal,
        TaskKind::AudioToText,
        TaskKind::TextToAudio,
        TaskKind::AudioToMotion,
        TaskKind::AudioToPart,
        TaskKind::TextToMotion,
        TaskKind::TextToPart,
        TaskKind::EmotionToMotion,
        TaskKind::MotionToEmotion,
        TaskKind::MotionToText,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self).expect("serializable").as_str().expect("string").to_string()
    }

    /// Placeholders allowed in the prompt.
    pub fn inputs(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            TaskKind::Spatial | TaskKind::Temporal => &[Face, Hands, Upper, Lower],
            TaskKind::MotionToEmotion | TaskKind::MotionToText => &[Face, Hands, Upper, Lower],
            TaskKind::AudioToText => &[Audio],
            TaskKind::TextToAudio => &[Transcript],
            TaskKind::AudioToMotion | TaskKind::AudioToPart => &[Audio, AudioTranscript],
            TaskKind::TextToMotion | TaskKind::TextToPart => &[Caption],
            TaskKind::EmotionToMotion => &[Emotion],
        }
    }

    /// Slots allowed in the answer.
    pub fn outputs(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            TaskKind::AudioToText => &[Transcript],
            TaskKind::TextToAudio => &[Audio],
            TaskKind::MotionToEmotion => &[Emotion],
            TaskKind::MotionToText => &[Caption],
            _ => &[Face, Hands, Upper, Lower],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::UnknownTaskKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Audio,
    Caption,
    Emotion,
    Face,
    Hands,
    Upper,
    Lower,
    AudioTranscript,
    Transcript,
}

impl Slot {
    pub const ALL: [Slot; 9] = [
        Slot::Audio,
        Slot::Caption,
        Slot::Emotion,
        Slot::Face,
        Slot::Hands,
        Slot::Upper,
        Slot::Lower,
        Slot::AudioTranscript,
        Slot::Transcript,
    ];

    pub fn placeholder(self) -> &'static str {
        match self {
            Slot::Audio => "[audio]",
            Slot::Caption => "[caption]",
            Slot::Emotion => "[emotion]",
            Slot::Face => "[face]",
            Slot::Hands => "[hands]",
            Slot::Upper => "[upper]",
            Slot::Lower => "[lower]",
            Slot::AudioTranscript => "[audio&transcript]",
            Slot::Transcript => "[transcript]",
        }
    }

    pub fn from_placeholder(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|x| x.placeholder() == s)
    }

    pub fn part(self) -> Option<Part> {
        match self {
            Slot::Face => Some(Part::Face),
            Slot::Hands => Some(Part::Hands),
            Slot::Upper => Some(Part::Upper),
            Slot::Lower => Some(Part::Lower),
            _ => None,
        }
    }

    pub fn of_part(p: Part) -> Slot {
        match p {
            Part::Face => Slot::Face,
            Part::Hands => Slot::Hands,
            Part::Upper => Slot::Upper,
            Part::Lower => Slot::Lower,
        }
    }
}

/// One training example; the model reads `prompt ++ condition` and is
/// trained to emit `answer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: TaskKind,
    pub prompt: Vec<u32>,
    pub condition: Vec<u32>,
    pub answer: Vec<u32>,
}

impl TaskSample {
    pub fn input(&self) -> Vec<u32> {
        [self.prompt.as_slice(), &self.condition].concat()
    }

    pub fn validate(&self, vocab: &UnifiedVocab, max_input: usize) -> Result<()> {
        let n = self.prompt.len() + self.condition.len();
        if n > max_input {
            return Err(Error::SequenceTooLong { len: n, max: max_input });
        }
        if self.answer.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let total = vocab.total_size() as u32;
        if let Some(&id) = self.input().iter().chain(&self.answer).find(|&&id| id >= total) {
            return Err(Error::UnknownId(id));
        }
        Ok(())
    }
}

/// Local token indices of the four part streams, in `Part::ALL` order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotionTokens {
    pub parts: [Vec<u32>; 4],
}

impl MotionTokens {
    pub fn get(&self, p: Part) -> &Vec<u32> {
        &self.parts[p.index()]
    }

    pub fn get_mut(&mut self, p: Part) -> &mut Vec<u32> {
        &mut self.parts[p.index()]
    }
}

/// Everything known about one paired clip, already tokenized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTokens {
    pub id: String,
    pub audio: Vec<u32>,
    pub transcript: String,
    pub caption: String,
    pub emotion: Emotion,
    pub motion: MotionTokens,
}

/// Values for template placeholders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Slots {
    pub audio: Option<Vec<u32>>,
    pub transcript: Option<String>,
    pub caption: Option<String>,
    pub emotion: Option<String>,
    pub motion: [Option<Vec<u32>>; 4],
}

impl Slots {
    pub fn from_clip(clip: &ClipTokens) -> Self {
        Self {
            audio: Some(clip.audio.clone()),
            transcript: Some(clip.transcript.clone()),
            caption: Some(clip.caption.clone()),
            emotion: Some(clip.emotion.to_string()),
            motion: clip.motion.parts.clone().map(Some),
        }
    }

    fn text(&self, s: Slot) -> Option<&String> {
        match s {
            Slot::Transcript => self.transcript.as_ref(),
            Slot::Caption => self.caption.as_ref(),
            Slot::Emotion => self.emotion.as_ref(),
            _ => None,
        }
    }

    fn has(&self, s: Slot) -> bool {
        match s {
            Slot::Audio => self.audio.is_some(),
            Slot::AudioTranscript => self.audio.is_some() && self.transcript.is_some(),
            s => match s.part() {
                Some(p) => self.motion[p.index()].is_some(),
                None => self.text(s).is_some(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub prompt: String,
    pub output: Vec<String>,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(Slot),
}

impl Template {
    fn pieces(&self) -> Result<Vec<Piece<'_>>> {
        let mut out = vec![];
        let mut rest = self.prompt.as_str();
        while let Some(open) = rest.find('[') {
            let close = rest[open..]
                .find(']')
                .map(|c| open + c)
                .ok_or_else(|| Error::InvalidConfig(format!("unclosed placeholder in {:?}", self.prompt)))?;
            let name = &rest[open..=close];
            let slot = Slot::from_placeholder(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown placeholder {name}")))?;
            if open > 0 {
                out.push(Piece::Literal(&rest[..open]));
            }
            out.push(Piece::Slot(slot));
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            out.push(Piece::Literal(rest));
        }
        Ok(out)
    }

    pub fn placeholders(&self) -> Result<Vec<Slot>> {
        Ok(self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Literal(_) => None,
            })
            .collect())
    }

    pub fn outputs(&self) -> Result<Vec<Slot>> {
        self.output
            .iter()
            .map(|s| Slot::from_placeholder(s).ok_or_else(|| Error::InvalidConfig(format!("unknown output slot {s}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateBank {
    pub templates: BTreeMap<TaskKind, Vec<Template>>,
}

impl TemplateBank {
    pub fn builtin() -> Self {
        let bank: Self = serde_json::from_str(include_str!("../../../assets/templates.json")).expect("bundled bank parses");
        bank.validate().expect("bundled bank is valid");
        bank
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: Self = store::read_json(path)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in TaskKind::ALL {
            let list = self.templates.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
            if list.len() < 2 {
                return Err(Error::InvalidConfig(format!("task {kind} needs at least 2 templates")));
            }
            for t in list {
                if let Some(s) = t.placeholders()?.into_iter().find(|s| !kind.inputs().contains(s)) {
                    return Err(Error::InvalidConfig(format!("{} not allowed in {kind} prompts", s.placeholder())));
                }
                let outs = t.outputs()?;
                if outs.is_empty() || outs.iter().any(|s| !kind.outputs().contains(s)) {
                    return Err(Error::InvalidConfig(format!("bad outputs {:?} for {kind}", t.output)));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: TaskKind) -> Result<&[Template]> {
        self.templates
            .get(&kind)
            .map(Vec::as_slice)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::UnknownTaskKind(kind.name()))
    }

    /// All literal prompt text, for tokenizer training.
    pub fn literal_text(&self) -> Vec<String> {
        self.templates
            .values()
            .flatten()
            .map(|t| {
                let mut s = t.prompt.clone();
                for slot in Slot::ALL {
                    s = s.replace(slot.placeholder(), " ");
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub max_input: usize,
    pub max_output: usize,
    /// Per-sample mask ratio is drawn uniformly from this range.
    pub mask_ratio: (f64, f64),
    /// Relative frequency of spatial, temporal and audio–text pre-training
    /// samples.
    pub mix: [f64; 3],
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            max_input: 512,
            max_output: 512,
            mask_ratio: (0.15, 0.5),
            mix: [1.0, 1.0, 1.0],
        }
    }
}

/// `⌈ratio·len⌉`, ignoring rounding noise in the product so that decimal
/// ratios such as 0.1 behave as written.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    let p = ratio * len as f64;
    ((p - 1e-9 * p.max(1.0)).ceil().max(0.0) as usize).min(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AudioToText,
    TextToAudio,
}

const PART_NAMES: [&str; 4] = ["face", "hands", "upper", "lower"];

fn part_names(mask: u8) -> String {
    (0..4).filter(|i| mask & (1 << i) != 0).map(|i| PART_NAMES[i]).collect::<Vec<_>>().join(" and ")
}

fn spatial_prompt(source: u8, target: u8) -> String {
    format!("Translate {} to {} body.", part_names(source), part_names(target))
}

const TEMPORAL_PROMPT: &str = "Translate mask to unmasked motion.";
const AUDIO_TO_TEXT_PROMPT: &str = "Translate audio to text.";
const TEXT_TO_AUDIO_PROMPT: &str = "Translate text to audio.";

/// Every prompt the pre-training generators can emit.
pub fn generator_prompts() -> Vec<String> {
    let mut out = vec![TEMPORAL_PROMPT.to_string(), AUDIO_TO_TEXT_PROMPT.to_string(), TEXT_TO_AUDIO_PROMPT.to_string()];
    for source in 1..15u8 {
        let rest = 15 & !source;
        for target in (1..16u8).filter(|t| t & !rest == 0) {
            out.push(spatial_prompt(source, target));
        }
    }
    out
}

/// A token stream inside a prompt or answer.
enum Block {
    Text(Vec<u32>),
    /// Unified ids between the modality's boundary tokens.
    Stream(Modality, Vec<u32>),
}

fn block_len(b: &Block) -> usize {
    match b {
        Block::Text(t) => t.len(),
        Block::Stream(_, s) => s.len() + 2,
    }
}

/// Keeps the centered `w` fraction of a stream (at least one token).
fn crop(s: &[u32], w: f64) -> Vec<u32> {
    if s.is_empty() {
        return vec![];
    }
    let k = ((w * s.len() as f64).floor() as usize).clamp(1, s.len());
    let start = (s.len() - k) / 2;
    s[start..start + k].to_vec()
}

pub struct TaskForge<'a> {
    pub tok: &'a SubwordTokenizer,
    pub vocab: &'a UnifiedVocab,
    pub bank: &'a TemplateBank,
    pub config: TaskConfig,
}

impl<'a> TaskForge<'a> {
    pub fn new(tok: &'a SubwordTokenizer, vocab: &'a UnifiedVocab, bank: &'a TemplateBank, config: TaskConfig) -> Result<Self> {
        if tok.vocab_size() != vocab.segment(Modality::Text).size as usize {
            return Err(Error::DimensionMismatch(tok.vocab_size(), vocab.segment(Modality::Text).size as usize));
        }
        Ok(Self {
            tok,
            vocab,
            bank,
            config,
        })
    }

    fn mapped(&self, m: Modality, local: &[u32]) -> Result<Vec<u32>> {
        local.iter().map(|&k| self.vocab.id(m, k)).collect()
    }

    fn flatten(&self, blocks: &[Block]) -> Vec<u32> {
        let mut out = vec![];
        for b in blocks {
            match b {
                Block::Text(t) => out.extend(t),
                Block::Stream(m, s) => {
                    out.push(self.vocab.start(*m));
                    out.extend(s);
                    out.push(self.vocab.end(*m));
                }
            }
        }
        out
    }

    /// Center-crops every stream in `input` (and `answer` by the same
    /// fraction) so the input fits the budget.
    fn fit(&self, input: &mut [Block], answer: &mut [Block], budget: usize) -> Result<()> {
        let total: usize = input.iter().map(block_len).sum();
        if total <= budget {
            return Ok(());
        }
        let cropped_len = |w: f64| -> usize {
            input
                .iter()
                .map(|b| match b {
                    Block::Stream(_, s) => crop(s, w).len() + 2,
                    b => block_len(b),
                })
                .sum()
        };
        if cropped_len(0.0) > budget {
            return Err(Error::SequenceTooLong { len: cropped_len(0.0), max: budget });
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if cropped_len(mid) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for b in input.iter_mut().chain(answer.iter_mut()) {
            if let Block::Stream(_, s) = b {
                *s = crop(s, lo);
            }
        }
        Ok(())
    }

    fn finish(&self, task: TaskKind, mut prompt: Vec<Block>, mut condition: Vec<Block>, mut answer: Vec<Block>) -> Result<TaskSample> {
        let fixed: usize = prompt.iter().map(block_len).sum();
        if condition.is_empty() {
            self.fit(&mut prompt, &mut answer, self.config.max_input)?;
        } else {
            let budget = self.config.max_input.saturating_sub(fixed);
            self.fit(&mut condition, &mut answer, budget)?;
        }
        let sample = TaskSample {
            task,
            prompt: self.flatten(&prompt),
            condition: self.flatten(&condition),
            answer: self.flatten(&answer),
        };
        if sample.answer.len() > self.config.max_output {
            return Err(Error::SequenceTooLong {
                len: sample.answer.len(),
                max: self.config.max_output,
            });
        }
        sample.validate(self.vocab, self.config.max_input)?;
        Ok(sample)
    }

    fn check_parts(motion: &MotionTokens) -> Result<()> {
        for p in Part::ALL {
            if motion.get(p).is_empty() {
                return Err(Error::MissingPart(p.to_string()));
            }
        }
        Ok(())
    }

    /// A random non-empty strict subset of parts predicts a random
    /// non-empty subset of the rest.
    pub fn spatial<R: Rng>(&self, motion: &MotionTokens, rng: &mut R) -> Result<TaskSample> {
        Self::check_parts(motion)?;
        let source: u8 = rng.gen_range(1..15);
        let rest = 15 & !source;
        let subsets: Vec<u8> = (1..16u8).filter(|s| s & !rest == 0).collect();
        let target = subsets[rng.gen_range(0..subsets.len())];
        let prompt = spatial_prompt(source, target);
        let streams = |mask: u8| -> Result<Vec<Block>> {
            Part::ALL
                .iter()
                .filter(|p| mask & (1 << p.index()) != 0)
                .map(|&p| Ok(Block::Stream(p.into(), self.mapped(p.into(), motion.get(p))?)))
                .collect()
        };
        self.finish(TaskKind::Spatial, vec![Block::Text(self.tok.encode(&prompt))], streams(source)?, streams(target)?)
    }

    /// `⌈ratio·len⌉` positions of every part stream are replaced by the
    /// mask token; the answer is the original streams.
    pub fn temporal<R: Rng>(&self, motion: &MotionTokens, ratio: f64, rng: &mut R) -> Result<TaskSample> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::BadRatio(ratio));
        }
        Self::check_parts(motion)?;
        let mut condition = vec![];
        let mut answer = vec![];
        for p in Part::ALL {
            let ids = self.mapped(p.into(), motion.get(p))?;
            let mut masked = ids.clone();
            for i in sample(rng, ids.len(), mask_count(ratio, ids.len())) {
                masked[i] = MASK;
            }
            condition.push(Block::Stream(p.into(), masked));
            answer.push(Block::Stream(p.into(), ids));
        }
        let prompt = vec![Block::Text(self.tok.encode(TEMPORAL_PROMPT))];
        self.finish(TaskKind::Temporal, prompt, condition, answer)
    }

    /// Audio to transcript or back; `None` picks a direction uniformly.
    pub fn audio_text<R: Rng>(&self, audio: &[u32], text: &str, direction: Option<Direction>, rng: &mut R) -> Result<TaskSample> {
        if audio.is_empty() {
            return Err(Error::EmptyStream("audio".into()));
        }
        let text_ids = self.tok.encode(text);
        if text_ids.is_empty() {
            return Err(Error::EmptyStream("text".into()));
        }
        let direction = direction.unwrap_or_else(|| {
            if rng.gen_bool(0.5) {
                Direction::AudioToText
            } else {
                Direction::TextToAudio
            }
        });
        let audio = Block::Stream(Modality::Audio, self.mapped(Modality::Audio, audio)?);
        match direction {
            Direction::AudioToText => self.finish(
                TaskKind::AudioToText,
                vec![Block::Text(self.tok.encode(AUDIO_TO_TEXT_PROMPT))],
                vec![audio],
                vec![Block::Text(text_ids)],
            ),
            Direction::TextToAudio => self.finish(
                TaskKind::TextToAudio,
                vec![Block::Text(self.tok.encode(TEXT_TO_AUDIO_PROMPT))],
                vec![Block::Stream(Modality::Text, text_ids)],
                vec![audio],
            ),
        }
    }

    /// One pre-training sample drawn from the configured mix.
    pub fn pretrain<R: Rng>(&self, clip: &ClipTokens, rng: &mut R) -> Result<TaskSample> {
        let total: f64 = self.config.mix.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        let mut pick = 2;
        for (i, w) in self.config.mix.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        match pick {
            0 => self.spatial(&clip.motion, rng),
            1 => {
                let (lo, hi) = self.config.mask_ratio;
                self.temporal(&clip.motion, rng.gen_range(lo..hi), rng)
            }
            _ => self.audio_text(&clip.audio, &clip.transcript, None, rng),
        }
    }

    fn slot_stream(&self, slot: Slot, slots: &Slots) -> Result<Vec<Block>> {
        let missing = || Error::MissingSlot(slot.placeholder().to_string());
        Ok(match slot {
            Slot::Audio => vec![Block::Stream(Modality::Audio, self.mapped(Modality::Audio, slots.audio.as_ref().ok_or_else(missing)?)?)],
            Slot::AudioTranscript => {
                let mut v = self.slot_stream(Slot::Audio, slots)?;
                let t = slots.transcript.as_ref().ok_or_else(missing)?;
                v.push(Block::Stream(Modality::Text, self.tok.encode(t)));
                v
            }
            s => match s.part() {
                Some(p) => {
                    let local = slots.motion[p.index()].as_ref().ok_or_else(missing)?;
                    if local.is_empty() {
                        return Err(Error::MissingPart(p.to_string()));
                    }
                    vec![Block::Stream(p.into(), self.mapped(p.into(), local)?)]
                }
                None => vec![Block::Text(self.tok.encode(slots.text(s).ok_or_else(missing)?))],
            },
        })
    }

    /// Fills a uniformly chosen template of `kind`. Token slots become
    /// boundary-wrapped streams inside the prompt, text slots are inlined.
    pub fn compile<R: Rng>(&self, kind: TaskKind, slots: &Slots, rng: &mut R) -> Result<TaskSample> {
        let list = self.bank.get(kind)?;
        let template = &list[rng.gen_range(0..list.len())];
        self.compile_template(kind, template, slots, rng)
    }

    pub fn compile_template<R: Rng>(&self, kind: TaskKind, template: &Template, slots: &Slots, rng: &mut R) -> Result<TaskSample> {
        let outputs = template.outputs()?;
        if let Some(s) = outputs.iter().find(|s| !slots.has(**s)) {
            return Err(Error::MissingSlot(s.placeholder().to_string()));
        }
        let prompt = self.prompt_blocks(kind, template, slots, rng)?;
        let mut answer = vec![];
        for s in outputs {
            answer.extend(self.slot_stream(s, slots)?);
        }
        if answer.iter().all(|b| block_len(b) == 0) {
            return Err(Error::EmptyTarget);
        }
        self.finish(kind, prompt, vec![], answer)
    }

    fn prompt_blocks<R: Rng>(&self, kind: TaskKind, template: &Template, slots: &Slots, rng: &mut R) -> Result<Vec<Block>> {
        let pieces = template.pieces()?;
        if let Some(s) = template.placeholders()?.into_iter().find(|s| !slots.has(*s)) {
            return Err(Error::MissingSlot(s.placeholder().to_string()));
        }
        let mut prompt = vec![];
        let mut text = String::new();
        for p in &pieces {
            match p {
                Piece::Literal(l) => text.push_str(l),
                Piece::Slot(s) if matches!(s, Slot::Caption | Slot::Emotion | Slot::Transcript) => {
                    text.push_str(slots.text(*s).expect("checked"));
                }
                Piece::Slot(s) => {
                    if !text.is_empty() {
                        prompt.push(Block::Text(self.tok.encode(&text)));
                        text.clear();
                    }
                    prompt.extend(self.slot_stream(*s, slots)?);
                }
            }
        }
        if !text.is_empty() {
            prompt.push(Block::Text(self.tok.encode(&text)));
        }
        if kind == TaskKind::Temporal {
            let (lo, hi) = self.config.mask_ratio;
            let ratio = rng.gen_range(lo..hi);
            for b in prompt.iter_mut() {
                if let Block::Stream(m, s) = b {
                    if m.is_motion() {
                        for i in sample(rng, s.len(), mask_count(ratio, s.len())) {
                            s[i] = MASK;
                        }
                    }
                }
            }
        }
        Ok(prompt)
    }

    /// Templates of `kind` whose placeholders are all filled by `slots` and,
    /// if given, whose outputs are exactly `outputs`.
    pub fn usable(&self, kind: TaskKind, slots: &Slots, outputs: Option<&[Slot]>) -> Result<Vec<&'a Template>> {
        let mut out = vec![];
        for t in self.bank.get(kind)? {
            if !t.placeholders()?.iter().all(|s| slots.has(*s)) {
                continue;
            }
            if let Some(want) = outputs {
                if t.outputs()? != want {
                    continue;
                }
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Model input for an instruction without its answer, cropped to the
    /// input budget.
    pub fn prompt<R: Rng>(&self, kind: TaskKind, template: &Template, slots: &Slots, rng: &mut R) -> Result<Vec<u32>> {
        let mut prompt = self.prompt_blocks(kind, template, slots, rng)?;
        self.fit(&mut prompt, &mut [], self.config.max_input)?;
        Ok(self.flatten(&prompt))
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    vocab_hash: String,
    samples: usize,
}

/// JSONL: a header line with the vocabulary hash, then one sample per line.
pub fn write_corpus(samples: &[TaskSample], vocab: &UnifiedVocab, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &CorpusHeader {
            vocab_hash: vocab.hash(),
            samples: samples.len(),
        },
    )?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, vocab: &UnifiedVocab) -> Result<Vec<TaskSample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let header: CorpusHeader = serde_json::from_str(&lines.next().ok_or_else(|| bad("missing header"))??)?;
    store::check_vocab_hash(&vocab.hash(), Some(&header.vocab_hash))?;
    let mut out = Vec::with_capacity(header.samples);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(&line)?;
        let total = vocab.total_size() as u32;
        if let Some(&id) = s.input().iter().chain(&s.answer).find(|&&id| id >= total) {
            return Err(Error::UnknownId(id));
        }
        out.push(s);
    }
    if out.len() != header.samples {
        return Err(bad("sample count differs from header"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::train_subword;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn fixture() -> (SubwordTokenizer, UnifiedVocab, TemplateBank) {
        let bank = TemplateBank::builtin();
        let mut corpus = bank.literal_text();
        corpus.extend(["Translate upper to lower body.", "i am so happy", "a person gestures happily", "happiness"].map(String::from));
        let tok = train_subword(&corpus, 400).unwrap();
        let vocab = UnifiedVocab::with_tokenizer(&tok, [64, 16, 16, 16, 16]).unwrap();
        (tok, vocab, bank)
    }

    fn clip(rng: &mut ChaCha8Rng, len: usize) -> ClipTokens {
        let mut stream = |k: u32, n: usize| (0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<u32>>();
        ClipTokens {
            id: "c".into(),
            audio: stream(64, len * 6),
            transcript: "i am so happy".into(),
            caption: "a person gestures happily".into(),
            emotion: Emotion::Happiness,
            motion: MotionTokens {
                parts: [stream(16, len), stream(16, len), stream(16, len), stream(16, len)],
            },
        }
    }

    #[test]
    fn spatial_prompt_and_disjointness() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = clip(&mut rng, 8);
        let mut seen = false;
        for seed in 0..2000 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = forge.spatial(&c.motion, &mut r).unwrap();
            let src: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| !vocab.extract(m, &s.condition).is_empty()).collect();
            let tgt: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| !vocab.extract(m, &s.answer).is_empty()).collect();
            assert!(!src.is_empty() && !tgt.is_empty() && src.len() < 4);
            assert!(src.iter().all(|m| !tgt.contains(m)));
            if src == [Modality::Upper] && tgt == [Modality::Lower] {
                assert_eq!(tok.decode(&s.prompt).unwrap(), "Translate upper to lower body.");
                assert_eq!(s.condition, vocab.wrap(Modality::Upper, c.motion.get(Part::Upper)).unwrap());
                assert_eq!(s.answer, vocab.wrap(Modality::Lower, c.motion.get(Part::Lower)).unwrap());
                seen = true;
            }
        }
        assert!(seen);
        let mut empty = c.motion.clone();
        empty.get_mut(Part::Hands).clear();
        assert!(matches!(forge.spatial(&empty, &mut rng), Err(Error::MissingPart(_))));
    }

    #[test]
    fn temporal_counts_and_answer() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = clip(&mut rng, 10);
        let s = forge.temporal(&c.motion, 0.01, &mut rng).unwrap();
        for p in Part::ALL {
            let m = Modality::from(p);
            let cond = &s.condition;
            let start = cond.iter().position(|&x| x == vocab.start(m)).unwrap();
            let masked = cond[start + 1..start + 11].iter().filter(|&&x| x == MASK).count();
            assert_eq!(masked, 1);
            assert_eq!(vocab.extract(m, &s.answer), vec![c.motion.get(p).clone()]);
        }
        assert_eq!(s.answer.len(), s.condition.len());
        assert!(matches!(forge.temporal(&c.motion, 1.0, &mut rng), Err(Error::BadRatio(_))));
        assert!(matches!(forge.temporal(&c.motion, 0.0, &mut rng), Err(Error::BadRatio(_))));
    }

    #[test]
    fn mask_count_is_exact_ceiling() {
        assert_eq!(mask_count(0.3, 10), 3);
        assert_eq!(mask_count(0.01, 10), 1);
        assert_eq!(mask_count(0.5, 7), 4);
        assert_eq!(mask_count(0.1, 30), 3);
        assert_eq!(mask_count(0.7, 10), 7);
    }

    #[test]
    fn audio_text_directions() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = clip(&mut rng, 4);
        let a2t = forge.audio_text(&c.audio, &c.transcript, Some(Direction::AudioToText), &mut rng).unwrap();
        assert_eq!(a2t.answer, tok.encode(&c.transcript));
        assert_eq!(vocab.unwrap(Modality::Audio, &a2t.condition).unwrap(), c.audio);
        let t2a = forge.audio_text(&c.audio, &c.transcript, Some(Direction::TextToAudio), &mut rng).unwrap();
        assert_eq!(vocab.unwrap(Modality::Audio, &t2a.answer).unwrap(), c.audio);
        let mut n = 0;
        for _ in 0..10_000 {
            if forge.audio_text(&c.audio, &c.transcript, None, &mut rng).unwrap().task == TaskKind::AudioToText {
                n += 1;
            }
        }
        assert!((n as f64 / 10_000.0 - 0.5).abs() < 0.02);
        assert!(matches!(forge.audio_text(&[], "x", None, &mut rng), Err(Error::EmptyStream(_))));
    }

    #[test]
    fn instruction_compilation() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = clip(&mut rng, 6);
        let slots = Slots::from_clip(&c);
        let s = forge.compile(TaskKind::AudioToMotion, &slots, &mut rng).unwrap();
        let mut want = vec![];
        for p in Part::ALL {
            want.extend(vocab.wrap(p.into(), c.motion.get(p)).unwrap());
        }
        assert_eq!(s.answer, want);
        assert!(s.condition.is_empty());
        assert_eq!(vocab.extract(Modality::Audio, &s.prompt), vec![c.audio.clone()]);
        let e = forge.compile(TaskKind::MotionToEmotion, &slots, &mut rng).unwrap();
        assert_eq!(e.answer, tok.encode("happiness"));
        let no_audio = Slots { audio: None, ..slots.clone() };
        assert!(matches!(forge.compile(TaskKind::AudioToMotion, &no_audio, &mut rng), Err(Error::MissingSlot(_))));
        // same seed, same sample
        let a = forge.compile(TaskKind::TextToPart, &slots, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = forge.compile(TaskKind::TextToPart, &slots, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for kind in TaskKind::ALL {
            let s = forge.compile(kind, &slots, &mut rng).unwrap();
            s.validate(&vocab, 512).unwrap();
        }
    }

    #[test]
    fn prompts_without_answers() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = clip(&mut rng, 6);
        let audio_only = Slots {
            audio: Some(c.audio.clone()),
            ..Default::default()
        };
        let all = forge.usable(TaskKind::AudioToMotion, &audio_only, None).unwrap();
        assert!(!all.is_empty());
        assert!(all.iter().all(|t| !t.placeholders().unwrap().contains(&Slot::AudioTranscript)));
        let lower = forge.usable(TaskKind::AudioToPart, &audio_only, Some(&[Slot::Lower])).unwrap();
        assert_eq!(lower.len(), 1);
        let input = forge.prompt(TaskKind::AudioToPart, lower[0], &audio_only, &mut rng).unwrap();
        assert_eq!(vocab.extract(Modality::Audio, &input), vec![c.audio.clone()]);
        let caption = Slots {
            caption: Some("a person walks".into()),
            ..Default::default()
        };
        assert!(forge.usable(TaskKind::AudioToMotion, &caption, None).unwrap().is_empty());
        let t = &forge.usable(TaskKind::TextToPart, &caption, Some(&[Slot::Lower])).unwrap()[0];
        let ids = forge.prompt(TaskKind::TextToPart, t, &caption, &mut rng).unwrap();
        assert!(tok.decode(&ids).unwrap().contains("a person walks"));
    }

    #[test]
    fn long_inputs_are_center_cropped() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = clip(&mut rng, 200);
        let slots = Slots::from_clip(&c);
        let s = forge.compile(TaskKind::AudioToMotion, &slots, &mut rng).unwrap();
        assert!(s.prompt.len() <= 512);
        let audio = &vocab.extract(Modality::Audio, &s.prompt)[0];
        let off = (c.audio.len() - audio.len()) / 2;
        assert_eq!(audio[..], c.audio[off..off + audio.len()]);
        let upper = &vocab.extract(Modality::Upper, &s.answer)[0];
        assert!(upper.len() < 200);
    }

    #[test]
    fn bank_shape() {
        let bank = TemplateBank::builtin();
        for kind in TaskKind::ALL {
            assert_eq!(bank.get(kind).unwrap().len(), 4);
        }
        assert_eq!("audio2motion".parse::<TaskKind>().unwrap(), TaskKind::AudioToMotion);
        assert!(matches!("dance".parse::<TaskKind>(), Err(Error::UnknownTaskKind(_))));
        let mut broken = bank.clone();
        broken.templates.get_mut(&TaskKind::TextToPart).unwrap()[0].prompt = "Use [audio]".into();
        assert!(broken.validate().is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let (tok, vocab, bank) = fixture();
        let forge = TaskForge::new(&tok, &vocab, &bank, TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = clip(&mut rng, 6);
        let samples: Vec<TaskSample> = (0..1000).map(|_| forge.pretrain(&c, &mut rng).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        write_corpus(&samples, &vocab, &p).unwrap();
        assert_eq!(read_corpus(&p, &vocab).unwrap(), samples);
        write_corpus(&[], &vocab, &p).unwrap();
        assert!(read_corpus(&p, &vocab).unwrap().is_empty());
        let other = UnifiedVocab::with_tokenizer(&tok, [64, 16, 16, 16, 8]).unwrap();
        assert!(matches!(read_corpus(&p, &other), Err(Error::VocabHashMismatch { .. })));
    }
}
