//! Procedural paired clips: audio, transcript, caption, emotion and motion,
//! all derived from one seed.
//!
//! Beats are placed on a 0.1 s grid, which is shared by the 50 Hz audio hop
//! and the 30 fps motion frame, so motion pauses and audio clicks land on
//! exactly the same instants. Between consecutive beats every driven joint
//! follows the profile `s(u) = u − sin(2πu)/2π` (alternating direction) and
//! holds still for one frame on either side of the beat, so joint angular
//! speed vanishes at beats and nowhere else.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::rotation::rot6d_from_axis_angle;
use crate::motion::{MotionSequence, Part, DEFAULT_FPS};
use crate::speech::{AudioClip, SAMPLE_RATE};
use crate::store;

/// Common grid of audio hops (20 ms) and motion frames (1/30 s).
pub const BEAT_GRID_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Anger,
    Happiness,
    Fear,
    Disgust,
    Sadness,
    Contempt,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 8] = [
        Emotion::Neutral,
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Sadness,
        Emotion::Contempt,
        Emotion::Surprise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Sadness => "sadness",
            Emotion::Contempt => "contempt",
            Emotion::Surprise => "surprise",
        }
    }

    pub fn index(self) -> usize {
        Emotion::ALL.iter().position(|&e| e == self).expect("listed")
    }

    /// Gesture amplitude multiplier.
    pub fn amplitude(self) -> f64 {
        match self {
            Emotion::Neutral => 1.0,
            Emotion::Anger => 1.6,
            Emotion::Happiness => 1.3,
            Emotion::Fear => 0.8,
            Emotion::Disgust => 0.9,
            Emotion::Sadness => 0.5,
            Emotion::Contempt => 0.7,
            Emotion::Surprise => 1.4,
        }
    }

    /// Probability that a beat is displaced by one grid step.
    pub fn tempo_jitter(self) -> f64 {
        match self {
            Emotion::Fear => 0.5,
            Emotion::Anger | Emotion::Surprise => 0.25,
            Emotion::Happiness | Emotion::Disgust => 0.1,
            _ => 0.0,
        }
    }

    fn adverb(self) -> &'static str {
        match self {
            Emotion::Neutral => "calmly",
            Emotion::Anger => "angrily",
            Emotion::Happiness => "happily",
            Emotion::Fear => "fearfully",
            Emotion::Disgust => "with disgust",
            Emotion::Sadness => "sadly",
            Emotion::Contempt => "with contempt",
            Emotion::Surprise => "in surprise",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Emotion::Neutral => "i think",
            Emotion::Anger => "i am so angry",
            Emotion::Happiness => "i am so happy",
            Emotion::Fear => "i am afraid",
            Emotion::Disgust => "that is disgusting",
            Emotion::Sadness => "i feel sad",
            Emotion::Contempt => "how pathetic",
            Emotion::Surprise => "oh wow",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s.trim().to_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown emotion {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Tempo is drawn uniformly from this range.
    pub bpm: (f64, f64),
    pub emotion: Emotion,
    pub amplitude: f64,
    pub style: [f64; 4],
    pub walking: bool,
    pub fps: u32,
}

impl SynthConfig {
    pub fn new(seed: u64, emotion: Emotion) -> Self {
        Self {
            seed,
            duration_s: 64.0 / DEFAULT_FPS as f64,
            bpm: (80.0, 140.0),
            emotion,
            amplitude: 1.0,
            style: [0.0; 4],
            walking: false,
            fps: DEFAULT_FPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bpm;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidConfig("duration_s must be positive".into()));
        }
        if !(40.0..=200.0).contains(&lo) || !(40.0..=200.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidConfig(format!("bpm range {lo}..{hi} outside [40, 200]")));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) || self.style.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("amplitude and style must be finite, amplitude > 0".into()));
        }
        if self.fps == 0 || (self.fps as f64 * BEAT_GRID_S).fract() != 0.0 {
            return Err(Error::InvalidConfig(format!("fps {} must be a positive multiple of 10", self.fps)));
        }
        if self.frames() < 4 {
            return Err(Error::InvalidConfig("clip shorter than 4 frames".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.fps as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub audio: AudioClip,
    pub transcript: String,
    pub caption: String,
    pub emotion: Emotion,
    pub bpm: f64,
    /// Beat times in seconds, all inside the clip.
    pub beats: Vec<f64>,
    pub motion: MotionSequence,
}

/// Beat-locked motion profile value and its time derivative.
struct Profile {
    /// Grid-aligned beat times covering the clip with one beat of margin.
    knots: Vec<f64>,
    /// The pose is held for this long on each side of a beat.
    hold: f64,
}

impl Profile {
    fn eval(&self, t: f64) -> (f64, f64) {
        let k = self.knots.partition_point(|&b| b <= t).clamp(1, self.knots.len() - 1) - 1;
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        let span = b - a - 2.0 * self.hold;
        let u = ((t - a - self.hold) / span).clamp(0.0, 1.0);
        let tau = std::f64::consts::TAU;
        let s = u - (tau * u).sin() / tau;
        let ds = (1.0 - (tau * u).cos()) / span;
        if k % 2 == 0 {
            (s, ds)
        } else {
            (1.0 - s, -ds)
        }
    }
}

fn beat_knots(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let (lo, hi) = cfg.bpm;
    let bpm = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let period = 60.0 / bpm;
    let steps = |x: f64| (x / BEAT_GRID_S).round() as i64;
    let step = steps(period).max(3);
    let jitter = cfg.emotion.tempo_jitter();
    let total = steps(cfg.duration_s);
    let mut knots = vec![];
    let mut g = rng.gen_range(0..step) - step;
    while g <= total + step {
        let mut shift = 0;
        if jitter > 0.0 && rng.gen_bool(jitter) {
            shift = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        knots.push(g + shift);
        g += step;
    }
    // keep strictly increasing with at least two grid steps between beats
    for i in 1..knots.len() {
        if knots[i] < knots[i - 1] + 2 {
            knots[i] = knots[i - 1] + 2;
        }
    }
    (bpm, knots.into_iter().map(|k| k as f64 * BEAT_GRID_S).collect())
}

/// Driven joints: (part, local joint, axis, base amplitude in radians).
fn rig(walking: bool) -> Vec<(Part, usize, [f64; 3], f64)> {
    let mut r = vec![
        (Part::Upper, 0, [0.0, 1.0, 0.0], 0.10),  // spine twist
        (Part::Upper, 3, [1.0, 0.0, 0.0], 0.15),  // neck nod
        (Part::Upper, 4, [1.0, 0.0, 0.0], 0.20),  // head nod
        (Part::Upper, 6, [0.0, 0.0, 1.0], 0.50),  // left shoulder
        (Part::Upper, 7, [0.0, 1.0, 0.0], 0.60),  // left elbow
        (Part::Upper, 10, [0.0, 0.0, -1.0], 0.45), // right shoulder
        (Part::Upper, 11, [0.0, -1.0, 0.0], 0.55), // right elbow
        (Part::Upper, 8, [1.0, 0.0, 0.0], 0.30),  // left wrist
        (Part::Upper, 12, [1.0, 0.0, 0.0], 0.30), // right wrist
    ];
    for f in 0..30 {
        r.push((Part::Hands, f, [0.0, 0.0, 1.0], 0.25 + 0.05 * (f % 3) as f64));
    }
    let legs = if walking { 0.45 } else { 0.05 };
    r.push((Part::Lower, 0, [0.0, 1.0, 0.0], 0.05));
    r.push((Part::Lower, 1, [1.0, 0.0, 0.0], legs));
    r.push((Part::Lower, 5, [-1.0, 0.0, 0.0], legs));
    r.push((Part::Lower, 2, [1.0, 0.0, 0.0], 0.6 * legs));
    r.push((Part::Lower, 6, [1.0, 0.0, 0.0], 0.6 * legs));
    r
}

const STRIDE_M: f64 = 0.6;
const FACE_EXPR_OFFSET: usize = 6;

fn words() -> &'static [&'static str] {
    &[
        "the", "weather", "today", "really", "we", "should", "go", "there", "maybe", "later", "people", "always",
        "talk", "about", "music", "never", "again", "this", "time", "work", "home", "friends", "and", "then",
        "very", "much", "more", "story", "little", "big", "night", "morning",
    ]
}

/// Generates one clip; identical configs give bit-identical output.
pub fn synth_clip(cfg: &SynthConfig) -> Result<SynthClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (bpm, knots) = beat_knots(cfg, &mut rng);
    let profile = Profile {
        knots: knots.clone(),
        hold: 1.0 / cfg.fps as f64,
    };
    let frames = cfg.frames();
    let fps = cfg.fps as f64;
    let duration = frames as f64 / fps;
    let gain = cfg.amplitude * cfg.emotion.amplitude();

    let mut motion = MotionSequence::rest(frames, cfg.fps);
    let rig = rig(cfg.walking);
    let phases: Vec<f64> = rig.iter().map(|_| rng.gen_range(0.85..1.15)).collect();
    for f in 0..frames {
        let (p, _) = profile.eval(f as f64 / fps);
        for (i, &(part, joint, axis, amp)) in rig.iter().enumerate() {
            let style = 1.0 + 0.3 * cfg.style[i % 4].tanh();
            let angle = amp * gain * style * phases[i] * (p - 0.5);
            let r6 = rot6d_from_axis_angle([axis[0] * angle, axis[1] * angle, axis[2] * angle]);
            let mut row = motion.parts.get_mut(part).row_mut(f);
            for k in 0..6 {
                row[6 * joint + k] = r6[k] as f32;
            }
        }
        // jaw and expressions
        let jaw = rot6d_from_axis_angle([0.15 * gain * p, 0.0, 0.0]);
        let mut face = motion.parts.get_mut(Part::Face).row_mut(f);
        for k in 0..6 {
            face[k] = jaw[k] as f32;
        }
        let block = FACE_EXPR_OFFSET + 12 * cfg.emotion.index();
        for c in 0..12 {
            face[block + c] = 0.8;
        }
        for c in 0..4 {
            face[FACE_EXPR_OFFSET + 96 + c] = (0.2 * gain * (p - 0.5)) as f32 * (1.0 + cfg.style[c] as f32 * 0.1);
        }
    }
    if cfg.walking {
        let heading = rng.gen_range(-0.5f64..0.5);
        let mut dist = 0.0;
        let mut prev = profile.eval(0.0).0;
        for f in 0..frames {
            let (p, _) = profile.eval(f as f64 / fps);
            dist += STRIDE_M * (p - prev).abs();
            prev = p;
            motion.translation[[f, 0]] = (dist * heading.sin()) as f32;
            motion.translation[[f, 2]] = (dist * heading.cos()) as f32;
        }
    }
    motion.validate()?;

    let beats: Vec<f64> = knots.iter().copied().filter(|&b| b > 0.0 && b < duration).collect();
    let samples_n = (duration * SAMPLE_RATE as f64).round() as usize;
    let mut samples = vec![0.0f64; samples_n];
    for s in samples.iter_mut() {
        *s = 0.003 * rng.gen_range(-1.0..1.0);
    }
    for &b in &beats {
        let start = (b * SAMPLE_RATE as f64).round() as usize;
        // broadband decaying click, confined to the hop that starts at the beat
        for n in 0..crate::speech::HOP {
            if start + n >= samples_n {
                break;
            }
            let t = n as f64 / SAMPLE_RATE as f64;
            samples[start + n] += 0.6 * (-t / 0.004).exp() * rng.gen_range(-1.0..1.0);
        }
    }
    // band-limited noise bursts between beats, one word each
    let mut spoken = vec![];
    let mut lp1 = 0.0;
    let mut lp2 = 0.0;
    let loud = 0.04 * cfg.emotion.amplitude().sqrt();
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a < 0.0 || b > duration || !rng.gen_bool(0.7) {
            continue;
        }
        spoken.push(words()[rng.gen_range(0..words().len())]);
        let (s0, s1) = (((a + 0.2 * (b - a)) * 16_000.0) as usize, ((a + 0.8 * (b - a)) * 16_000.0) as usize);
        for n in s0..s1.min(samples_n) {
            let x: f64 = rng.gen_range(-1.0..1.0);
            lp1 += 0.5 * (x - lp1);
            lp2 += 0.05 * (x - lp2);
            let u = (n - s0) as f64 / (s1 - s0) as f64;
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * u).cos();
            samples[n] += loud * env * (lp1 - lp2) * 3.0;
        }
    }
    let audio = AudioClip::new(samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect())?;
    let mut transcript = cfg.emotion.phrase().to_string();
    for w in &spoken {
        transcript.push(' ');
        transcript.push_str(w);
    }
    let verb = if gain > 1.2 {
        "gestures widely"
    } else if gain < 0.8 {
        "gestures slightly"
    } else {
        "gestures"
    };
    let caption = if cfg.walking {
        format!("a person walks forward and {verb} {}", cfg.emotion.adverb())
    } else {
        format!("a person {verb} {} while talking", cfg.emotion.adverb())
    };
    Ok(SynthClip {
        audio,
        transcript,
        caption,
        emotion: cfg.emotion,
        bpm,
        beats,
        motion,
    })
}

/// How a corpus draws its clip configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub bpm: (f64, f64),
    /// Relative emotion frequencies in label order; normalized internally.
    pub emotion_weights: [f64; 8],
    pub walking_fraction: f64,
    pub amplitude: (f64, f64),
    pub fps: u32,
}

impl CorpusSpec {
    /// The 200-clip, 64-frame corpus used for training and acceptance runs.
    pub fn bundled() -> Self {
        Self {
            n: 200,
            seed: 2024,
            duration_s: 64.0 / DEFAULT_FPS as f64,
            bpm: (80.0, 140.0),
            emotion_weights: [1.0; 8],
            walking_fraction: 0.3,
            amplitude: (0.8, 1.2),
            fps: DEFAULT_FPS,
        }
    }

    /// Per-clip configs. Labels follow the requested proportions exactly up
    /// to rounding (largest remainder) and are then shuffled.
    pub fn configs(&self) -> Result<Vec<SynthConfig>> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("corpus needs at least one clip".into()));
        }
        let total: f64 = self.emotion_weights.iter().sum();
        if !(total > 0.0) || self.emotion_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("emotion weights must be non-negative with positive sum".into()));
        }
        let exact: Vec<f64> = self.emotion_weights.iter().map(|w| w / total * self.n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let mut missing = self.n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            if self.emotion_weights[i] > 0.0 {
                counts[i] += 1;
                missing -= 1;
            }
        }
        let mut labels: Vec<Emotion> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(Emotion::ALL[i], c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        labels.shuffle(&mut rng);
        let walkers = (self.walking_fraction.clamp(0.0, 1.0) * self.n as f64).round() as usize;
        let mut walking: Vec<bool> = (0..self.n).map(|i| i < walkers).collect();
        walking.shuffle(&mut rng);
        let (alo, ahi) = self.amplitude;
        labels
            .into_iter()
            .zip(walking)
            .map(|(emotion, walking)| {
                let cfg = SynthConfig {
                    seed: rng.gen(),
                    duration_s: self.duration_s,
                    bpm: self.bpm,
                    emotion,
                    amplitude: if ahi > alo { rng.gen_range(alo..=ahi) } else { alo },
                    style: [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ],
                    walking,
                    fps: self.fps,
                };
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub seed: u64,
    pub emotion: Emotion,
    pub transcript: String,
    pub bpm: f64,
    pub caption: String,
    pub walking: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub spec: CorpusSpec,
    pub clips: Vec<(String, SynthConfig)>,
}

pub const INDEX_FILE: &str = "index.json";
pub const METADATA_FILE: &str = "metadata.jsonl";

pub fn clip_id(i: usize) -> String {
    format!("clip_{i:05}")
}

/// Writes `<id>.json` (motion), `<id>.wav`, `metadata.jsonl` and
/// `index.json` under `dir`.
pub fn synth_corpus(spec: &CorpusSpec, dir: &Path) -> Result<CorpusIndex> {
    let clips = spec
        .configs()?
        .into_iter()
        .enumerate()
        .map(|(i, c)| (clip_id(i), c))
        .collect();
    let index = CorpusIndex {
        spec: spec.clone(),
        clips,
    };
    write_corpus_files(&index, dir)?;
    Ok(index)
}

/// Rebuilds every file of a corpus from its index.
pub fn regenerate(index_path: &Path, dir: &Path) -> Result<CorpusIndex> {
    let index: CorpusIndex = store::read_json(index_path)?;
    write_corpus_files(&index, dir)?;
    Ok(index)
}

fn write_corpus_files(index: &CorpusIndex, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = std::io::BufWriter::new(std::fs::File::create(dir.join(METADATA_FILE))?);
    for (id, cfg) in &index.clips {
        let clip = synth_clip(cfg)?;
        clip.motion.write_json(&dir.join(format!("{id}.json")))?;
        clip.audio.write_wav(&dir.join(format!("{id}.wav")))?;
        let m = ClipMeta {
            id: id.clone(),
            seed: cfg.seed,
            emotion: clip.emotion,
            transcript: clip.transcript,
            bpm: clip.bpm,
            caption: clip.caption,
            walking: cfg.walking,
        };
        serde_json::to_writer(&mut meta, &m)?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;
    store::write_json(&dir.join(INDEX_FILE), index)?;
    Ok(())
}

/// One clip loaded back from a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub meta: ClipMeta,
    pub motion: MotionSequence,
    pub audio: AudioClip,
}

pub fn read_metadata(dir: &Path) -> Result<Vec<ClipMeta>> {
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    std::fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    read_metadata(dir)?
        .into_iter()
        .map(|meta| {
            let motion = MotionSequence::read_json(&dir.join(format!("{}.json", meta.id)))?;
            let audio = AudioClip::read_wav(&dir.join(format!("{}.wav", meta.id)))?;
            Ok(CorpusItem { meta, motion, audio })
        })
        .collect()
}

/// In-memory version of a corpus, without touching disk.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<(ClipMeta, SynthClip)>> {
    spec.configs()?
        .into_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let clip = synth_clip(&cfg)?;
            let meta = ClipMeta {
                id: clip_id(i),
                seed: cfg.seed,
                emotion: clip.emotion,
                transcript: clip.transcript.clone(),
                bpm: clip.bpm,
                caption: clip.caption.clone(),
                walking: cfg.walking,
            };
            Ok((meta, clip))
        })
        .collect()
}

pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    Ok(files)
}

/// Mean per-frame angular speed (rad/s) of the upper-body joints.
pub fn upper_angular_speed(motion: &MotionSequence) -> Result<f64> {
    let upper = motion.part(Part::Upper);
    let mut total = 0.0;
    let frames = upper.nrows();
    if frames < 2 {
        return Ok(0.0);
    }
    for f in 1..frames {
        for j in 0..Part::Upper.joints() {
            let a = crate::motion::rotation::rot6d_to_matrix_f32(&upper.row(f - 1).as_slice().expect("row")[6 * j..6 * j + 6])?;
            let b = crate::motion::rotation::rot6d_to_matrix_f32(&upper.row(f).as_slice().expect("row")[6 * j..6 * j + 6])?;
            total += crate::motion::rotation::geodesic_distance(&a, &b);
        }
    }
    Ok(total * motion.fps as f64 / (frames - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig::new(11, Emotion::Happiness);
        let a = synth_clip(&cfg).unwrap();
        let b = synth_clip(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.motion.frames(), 64);
        let audio_s = a.audio.samples().len() as f64 / SAMPLE_RATE as f64;
        assert!((audio_s - a.motion.duration_s()).abs() <= 1.0 / 30.0);
        assert!(a.transcript.starts_with("i am so happy"));
        let other = synth_clip(&SynthConfig::new(12, Emotion::Happiness)).unwrap();
        assert_ne!(a.motion.parts.upper, other.motion.parts.upper);
    }

    #[test]
    fn beats_sit_on_the_grid() {
        for seed in 0..20 {
            let clip = synth_clip(&SynthConfig::new(seed, Emotion::Fear)).unwrap();
            assert!(!clip.beats.is_empty());
            for b in &clip.beats {
                let g = b / BEAT_GRID_S;
                assert!((g - g.round()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn anger_moves_more_than_neutral() {
        let mut anger = 0.0;
        let mut neutral = 0.0;
        for seed in 0..10 {
            anger += upper_angular_speed(&synth_clip(&SynthConfig::new(seed, Emotion::Anger)).unwrap().motion).unwrap();
            neutral += upper_angular_speed(&synth_clip(&SynthConfig::new(seed, Emotion::Neutral)).unwrap().motion).unwrap();
        }
        assert!(anger > neutral);
    }

    #[test]
    fn walking_clips_translate() {
        let mut cfg = SynthConfig::new(3, Emotion::Neutral);
        cfg.walking = true;
        let clip = synth_clip(&cfg).unwrap();
        let last = clip.motion.translation.row(63);
        assert!(last[0].hypot(last[2]) > 0.5);
        cfg.walking = false;
        let still = synth_clip(&cfg).unwrap();
        assert!(still.motion.translation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::new(0, Emotion::Neutral);
        cfg.bpm = (30.0, 90.0);
        assert!(synth_clip(&cfg).is_err());
        cfg.bpm = (90.0, 90.0);
        cfg.duration_s = 0.0;
        assert!(synth_clip(&cfg).is_err());
        assert_eq!("Anger".parse::<Emotion>().unwrap(), Emotion::Anger);
        assert!("joy".parse::<Emotion>().is_err());
    }

    #[test]
    fn label_histogram_follows_weights() {
        let spec = CorpusSpec {
            n: 800,
            emotion_weights: [4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0],
            ..CorpusSpec::bundled()
        };
        let cfgs = spec.configs().unwrap();
        let total: f64 = spec.emotion_weights.iter().sum();
        for (i, e) in Emotion::ALL.iter().enumerate() {
            let share = cfgs.iter().filter(|c| c.emotion == *e).count() as f64 / 800.0;
            assert!((share - spec.emotion_weights[i] / total).abs() <= 0.03);
        }
    }

    #[test]
    fn corpus_regenerates_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n: 3, ..CorpusSpec::bundled() };
        synth_corpus(&spec, &dir.path().join("a")).unwrap();
        regenerate(&dir.path().join("a").join(INDEX_FILE), &dir.path().join("b")).unwrap();
        let fa = corpus_files(&dir.path().join("a")).unwrap();
        let fb = corpus_files(&dir.path().join("b")).unwrap();
        assert_eq!(fa.len(), 3 * 2 + 2);
        for (a, b) in fa.iter().zip(&fb) {
            assert_eq!(a.file_name(), b.file_name());
            assert!(std::fs::read(a).unwrap() == std::fs::read(b).unwrap(), "{a:?} differs");
        }
        let items = load_corpus(&dir.path().join("a")).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].motion.frames(), 64);
    }
}
