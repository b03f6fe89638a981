//! Loaded upstream artifacts and the generation passes built on them.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DecodeSettings, Layout};
use crate::codec::{predict_global_translation, PartCodec, TranslationPredictor};
use crate::model::{Constraint, DecodeConfig, Seq2Seq};
use crate::motion::rotation::{matrix_to_rot6d, rot6d_to_matrix_f32};
use crate::motion::{MotionSequence, Part, PoseParts};
use crate::speech::{tokenize_audio, AcousticCodebook, AudioClip, TOKENS_PER_SECOND};
use crate::synth::CorpusItem;
use crate::tasks::{ClipTokens, MotionTokens, Slot, Slots, TaskConfig, TaskForge, TaskKind, TemplateBank};
use crate::text::SubwordTokenizer;
use crate::vocab::{Modality, Token, UnifiedVocab};
use crate::{store, Error, Result};

/// Tokenizers, codecs and vocabulary read back from a workspace.
pub struct Toolkit {
    pub tokenizer: SubwordTokenizer,
    pub vocab: UnifiedVocab,
    pub bank: TemplateBank,
    /// In `Part::ALL` order.
    pub codecs: Vec<PartCodec>,
    pub translation: TranslationPredictor,
    pub acoustic: AcousticCodebook,
    pub tasks: TaskConfig,
}

pub(crate) fn require(path: &std::path::Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// A stored model directory is complete once its manifest exists.
pub(crate) fn require_dir(dir: &std::path::Path) -> Result<()> {
    require(&dir.join(store::MANIFEST_FILE))
}

impl Toolkit {
    /// Loads every tokenizer-side artifact and checks that the stored
    /// vocabulary matches the components it was built from.
    pub fn load(layout: &Layout, tasks: TaskConfig) -> Result<Self> {
        for p in Part::ALL {
            require_dir(&layout.codec(p))?;
        }
        require_dir(&layout.translation())?;
        require_dir(&layout.audio())?;
        require(&layout.tokenizer())?;
        require(&layout.vocab())?;
        let codecs: Vec<PartCodec> = Part::ALL.iter().map(|&p| PartCodec::load(&layout.codec(p))).collect::<Result<_>>()?;
        let translation = TranslationPredictor::load(&layout.translation())?;
        let (acoustic, _) = AcousticCodebook::load(&layout.audio())?;
        let tokenizer = SubwordTokenizer::load(&layout.tokenizer())?;
        let vocab = UnifiedVocab::load(&layout.vocab())?;
        let rebuilt = Self::vocab_for(&tokenizer, &acoustic, &codecs)?;
        if rebuilt.hash() != vocab.hash() {
            return Err(Error::VocabHashMismatch {
                expected: vocab.hash(),
                found: rebuilt.hash(),
            });
        }
        Ok(Self {
            tokenizer,
            vocab,
            bank: TemplateBank::builtin(),
            codecs,
            translation,
            acoustic,
            tasks,
        })
    }

    pub fn vocab_for(tok: &SubwordTokenizer, acoustic: &AcousticCodebook, codecs: &[PartCodec]) -> Result<UnifiedVocab> {
        let k = |p: Part| codecs[p.index()].config().codebook_size;
        UnifiedVocab::with_tokenizer(
            tok,
            [acoustic.size(), k(Part::Face), k(Part::Hands), k(Part::Upper), k(Part::Lower)],
        )
    }

    pub fn forge(&self) -> Result<TaskForge<'_>> {
        TaskForge::new(&self.tokenizer, &self.vocab, &self.bank, self.tasks.clone())
    }

    pub fn codec(&self, part: Part) -> &PartCodec {
        &self.codecs[part.index()]
    }

    pub fn fps(&self) -> u32 {
        self.codec(Part::Upper).config().fps
    }

    pub fn motion_tokens(&self, motion: &MotionSequence) -> Result<MotionTokens> {
        let mut out = MotionTokens::default();
        for p in Part::ALL {
            *out.get_mut(p) = self.codec(p).tokenize(motion.part(p).view())?.into_iter().map(|i| i as u32).collect();
        }
        Ok(out)
    }

    pub fn audio_tokens(&self, audio: &AudioClip) -> Result<Vec<u32>> {
        Ok(tokenize_audio(audio, &self.acoustic)?.into_iter().map(|i| i as u32).collect())
    }

    pub fn clip_tokens(&self, item: &CorpusItem) -> Result<ClipTokens> {
        Ok(ClipTokens {
            id: item.meta.id.clone(),
            audio: self.audio_tokens(&item.audio)?,
            transcript: item.meta.transcript.clone(),
            caption: item.meta.caption.clone(),
            emotion: item.meta.emotion,
            motion: self.motion_tokens(&item.motion)?,
        })
    }

    /// Upper bound on the answer length of a template with these outputs
    /// for a clip of `frames` frames.
    fn answer_budget(&self, outputs: &[Slot], frames: usize) -> usize {
        const TEXT_BUDGET: usize = 32;
        let fps = self.fps() as usize;
        outputs
            .iter()
            .map(|s| match s.part() {
                Some(p) => self.codec(p).steps_for(frames) + 2,
                None if *s == Slot::Audio => (frames * TOKENS_PER_SECOND).div_ceil(fps) + 2,
                None => TEXT_BUDGET,
            })
            .sum::<usize>()
            + 1
    }

    fn modalities(outputs: &[Slot]) -> Vec<Modality> {
        let mut out: Vec<Modality> = outputs
            .iter()
            .map(|s| match s.part() {
                Some(p) => p.into(),
                None if *s == Slot::Audio => Modality::Audio,
                None => Modality::Text,
            })
            .collect();
        out.dedup();
        out
    }

    /// One decoding pass: picks a template of `kind` that `slots` can fill
    /// (and whose outputs equal `outputs`, if given), then decodes.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<R: Rng>(
        &self,
        model: &Seq2Seq,
        kind: TaskKind,
        slots: &Slots,
        outputs: Option<&[Slot]>,
        frames: usize,
        settings: &DecodeSettings,
        rng: &mut R,
    ) -> Result<Generation> {
        let forge = self.forge()?;
        let usable = forge.usable(kind, slots, outputs)?;
        if usable.is_empty() {
            return Err(Error::MissingSlot(format!("no {kind} template fits the given inputs")));
        }
        let template = usable[rng.gen_range(0..usable.len())];
        let input = forge.prompt(kind, template, slots, rng)?;
        let declared = template.outputs()?;
        let cfg = DecodeConfig {
            mode: settings.mode,
            temperature: settings.temperature,
            max_len: self.answer_budget(&declared, frames),
            constraint: settings
                .constrained
                .then(|| Constraint::segments(&self.vocab, &Self::modalities(&declared))),
        };
        let output = model.generate(&input, &cfg, rng)?;
        Ok(Generation {
            kind,
            template: template.prompt.clone(),
            outputs: declared.iter().map(|s| s.placeholder().to_string()).collect(),
            input,
            output,
        })
    }

    /// The first stream of each part in a generated sequence, as local ids.
    pub fn parts_of(&self, ids: &[u32]) -> [Option<Vec<u32>>; 4] {
        Part::ALL.map(|p| self.vocab.extract(p.into(), ids).into_iter().next())
    }

    /// Text-segment tokens of a generated sequence, decoded.
    pub fn text_of(&self, ids: &[u32]) -> Result<String> {
        let text: Vec<u32> = ids
            .iter()
            .filter_map(|&id| match self.vocab.token(id) {
                Ok(Token::Local(Modality::Text, k)) => Some(k),
                _ => None,
            })
            .collect();
        Ok(self.tokenizer.decode(&text)?.trim().to_string())
    }

    /// Decodes part token streams into a valid sequence of exactly `frames`
    /// frames. Streams are padded with their last frame or truncated; a
    /// missing or empty part becomes the rest pose. Returns warnings for
    /// every repair made.
    pub fn decode_motion(&self, parts: &[Option<Vec<u32>>; 4], frames: usize) -> Result<(MotionSequence, Vec<String>)> {
        let fps = self.fps();
        let rest = MotionSequence::rest(frames, fps);
        let mut warnings = vec![];
        let mut decoded: Vec<Array2<f32>> = vec![];
        for p in Part::ALL {
            let codec = self.codec(p);
            let k = codec.config().codebook_size;
            let ids: Vec<usize> = parts[p.index()].iter().flatten().map(|&i| i as usize).filter(|&i| i < k).collect();
            if ids.is_empty() {
                warnings.push(format!("{p}: no tokens, using the rest pose"));
                decoded.push(rest.part(p).clone());
                continue;
            }
            let raw = codec.decode(&ids)?;
            if raw.nrows() != frames {
                warnings.push(format!("{p}: {} decoded frames fitted to {frames}", raw.nrows()));
            }
            let mut fitted = Array2::zeros((frames, p.width()));
            for f in 0..frames {
                fitted.row_mut(f).assign(&raw.row(f.min(raw.nrows() - 1)));
            }
            let repaired = project_rotations(&mut fitted, p);
            if repaired > 0 {
                warnings.push(format!("{p}: {repaired} degenerate rotations reset"));
            }
            decoded.push(fitted);
        }
        let mut it = decoded.into_iter();
        let pose = PoseParts {
            face: it.next().expect("four parts"),
            hands: it.next().expect("four parts"),
            upper: it.next().expect("four parts"),
            lower: it.next().expect("four parts"),
        };
        let translation = predict_global_translation(&self.translation, pose.lower.view())?;
        let motion = MotionSequence::new(fps, pose, translation)?;
        motion.validate()?;
        Ok((motion, warnings))
    }

    /// Editable generation: the audio pass supplies every part not listed
    /// in `text_parts`, one text pass per listed part supplies the rest.
    #[allow(clippy::too_many_arguments)]
    pub fn editable<R: Rng>(
        &self,
        model: &Seq2Seq,
        audio: &[u32],
        caption: &str,
        text_parts: &[Part],
        frames: usize,
        settings: &DecodeSettings,
        rng: &mut R,
    ) -> Result<Edited> {
        let audio_slots = Slots {
            audio: Some(audio.to_vec()),
            ..Default::default()
        };
        let text_slots = Slots {
            caption: Some(caption.to_string()),
            ..Default::default()
        };
        let audio_pass = self.generate(model, TaskKind::AudioToMotion, &audio_slots, None, frames, settings, rng)?;
        let from_audio = self.parts_of(&audio_pass.output);
        let mut text_passes = vec![];
        let mut sources = vec![];
        let mut merged: [Option<Vec<u32>>; 4] = Default::default();
        for p in Part::ALL {
            let (pass, tokens) = if text_parts.contains(&p) {
                let g = self.generate(model, TaskKind::TextToPart, &text_slots, Some(&[Slot::of_part(p)]), frames, settings, rng)?;
                let tokens = self.parts_of(&g.output)[p.index()].clone();
                text_passes.push(g);
                (Pass::Text, tokens)
            } else {
                (Pass::Audio, from_audio[p.index()].clone())
            };
            let pass = if tokens.as_ref().is_some_and(|t| !t.is_empty()) { pass } else { Pass::Rest };
            sources.push(PartSource {
                part: p,
                pass,
                tokens: tokens.clone().unwrap_or_default(),
            });
            merged[p.index()] = tokens;
        }
        let (motion, warnings) = self.decode_motion(&merged, frames)?;
        Ok(Edited {
            motion,
            sources,
            audio_pass,
            text_passes,
            warnings,
        })
    }
}

/// Replaces every 6D block with the 6D form of its Gram–Schmidt rotation
/// (identity when degenerate). Returns how many blocks were degenerate.
fn project_rotations(stream: &mut Array2<f32>, part: Part) -> usize {
    let identity = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut reset = 0;
    for mut row in stream.rows_mut() {
        for v in row.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        for j in 0..part.joints() {
            let block: Vec<f32> = (0..6).map(|k| row[6 * j + k]).collect();
            let r6: [f32; 6] = match rot6d_to_matrix_f32(&block) {
                Ok(m) => matrix_to_rot6d(&m).map(|x| x as f32),
                Err(_) => {
                    reset += 1;
                    identity
                }
            };
            for k in 0..6 {
                row[6 * j + k] = r6[k];
            }
        }
    }
    reset
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub kind: TaskKind,
    pub template: String,
    /// Output placeholders of the template.
    pub outputs: Vec<String>,
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Audio,
    Text,
    /// The pass produced no tokens for the part.
    Rest,
}

/// Which pass produced a part, with the exact local tokens decoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSource {
    pub part: Part,
    pub pass: Pass,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Edited {
    pub motion: MotionSequence,
    /// In `Part::ALL` order.
    pub sources: Vec<PartSource>,
    pub audio_pass: Generation,
    pub text_passes: Vec<Generation>,
    pub warnings: Vec<String>,
}
