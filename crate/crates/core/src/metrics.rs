//! Evaluation metrics: Fréchet distance over learned motion features, beat
//! consistency between audio onsets and motion pauses, diversity, and
//! unigram/LCS text overlap.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::train::split_indices;
use crate::codec::to_array2;
use crate::error::{Error, Result};
use crate::motion::rotation::{geodesic_distance, rot6d_to_matrix_f32};
use crate::motion::{merge_parts, MotionSequence, Part, POSE_WIDTH};
use crate::nn::{self, AdamW, AdamWConfig, Conv1d, Linear, ParamSet};
use crate::speech::{featurize, AudioClip, HOP, SAMPLE_RATE};
use crate::store;

/// Thresholds for beat extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatConfig {
    /// Gaussian kernel width in seconds.
    pub sigma_s: f64,
    /// Non-maximum-suppression window for motion beats, in frames.
    pub nms_frames: usize,
    /// Peak-picking window for audio onsets, in hops.
    pub onset_window: usize,
    /// Onset threshold: `median + delta·(max − median)` of the flux.
    pub onset_delta: f64,
}

impl Default for BeatConfig {
    fn default() -> Self {
        Self {
            sigma_s: 0.1,
            nms_frames: 5,
            onset_window: 5,
            onset_delta: 0.3,
        }
    }
}

/// Summed angular speed (rad/s) of all skeletal joints, one value per
/// frame. Interior frames use the mean of the incoming and outgoing step.
pub fn angular_speed(motion: &MotionSequence) -> Result<Vec<f64>> {
    let t = motion.frames();
    let mut step = vec![0.0; t.saturating_sub(1)];
    for part in Part::ALL.into_iter().filter(|p| p.is_skeletal()) {
        let a = motion.part(part);
        for j in 0..part.joints() {
            let mut prev = rot6d_to_matrix_f32(&a.row(0).to_vec()[6 * j..6 * j + 6])?;
            for (f, s) in step.iter_mut().enumerate() {
                let next = rot6d_to_matrix_f32(&a.row(f + 1).to_vec()[6 * j..6 * j + 6])?;
                *s += geodesic_distance(&prev, &next);
                prev = next;
            }
        }
    }
    let fps = motion.fps as f64;
    Ok((0..t)
        .map(|f| {
            let inc = if f > 0 { Some(step[f - 1]) } else { None };
            let out = step.get(f).copied();
            match (inc, out) {
                (Some(a), Some(b)) => 0.5 * (a + b) * fps,
                (Some(a), None) | (None, Some(a)) => a * fps,
                (None, None) => 0.0,
            }
        })
        .collect())
}

/// Times (s) of local speed minima, excluding the first and last frame.
pub fn motion_beats(motion: &MotionSequence, cfg: &BeatConfig) -> Result<Vec<f64>> {
    let speed = angular_speed(motion)?;
    let peak = speed.iter().cloned().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return Ok(vec![]);
    }
    let half = cfg.nms_frames / 2;
    let t = speed.len();
    let mut beats = vec![];
    for f in 1..t.saturating_sub(1) {
        let lo = f.saturating_sub(half);
        let hi = (f + half).min(t - 1);
        let is_min = (lo..=hi).all(|g| {
            g == f || (g < f && speed[f] < speed[g]) || (g > f && speed[f] <= speed[g])
        });
        if is_min && speed[f] < speed[f - 1] {
            beats.push(f as f64 / motion.fps as f64);
        }
    }
    Ok(beats)
}

/// Positive spectral flux of the log-mel features, one value per hop.
pub fn onset_envelope(audio: &AudioClip) -> Result<Vec<f64>> {
    let x = featurize(audio)?;
    let mut flux = vec![0.0; x.nrows()];
    for i in 1..x.nrows() {
        flux[i] = x
            .row(i)
            .iter()
            .zip(x.row(i - 1))
            .map(|(a, b)| ((a - b) as f64).max(0.0))
            .sum();
    }
    Ok(flux)
}

/// Onset times (s): flux peaks above the median-relative threshold.
pub fn audio_beats(audio: &AudioClip, cfg: &BeatConfig) -> Result<Vec<f64>> {
    let flux = onset_envelope(audio)?;
    let mut sorted = flux.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = *sorted.last().unwrap_or(&0.0);
    let threshold = median + cfg.onset_delta * (max - median);
    let half = cfg.onset_window / 2;
    let hop_s = HOP as f64 / SAMPLE_RATE as f64;
    let n = flux.len();
    Ok((0..n)
        .filter(|&i| {
            flux[i] > threshold
                && (i.saturating_sub(half)..=(i + half).min(n - 1)).all(|j| {
                    j == i || (j < i && flux[i] >= flux[j]) || (j > i && flux[i] > flux[j])
                })
        })
        .map(|i| i as f64 * hop_s)
        .collect())
}

/// Mean Gaussian proximity of each motion beat to its nearest audio onset.
pub fn beat_consistency(audio: &AudioClip, motion: &MotionSequence, cfg: &BeatConfig) -> Result<f64> {
    let frame = 1.0 / motion.fps as f64;
    if (audio.duration_s() - motion.duration_s()).abs() > frame + 1e-9 {
        return Err(Error::LengthMismatch(
            (audio.duration_s() * motion.fps as f64).round() as usize,
            motion.frames(),
        ));
    }
    let a = audio_beats(audio, cfg)?;
    if a.is_empty() {
        return Err(Error::NoBeats("audio"));
    }
    let m = motion_beats(motion, cfg)?;
    if m.is_empty() {
        return Err(Error::NoBeats("motion"));
    }
    Ok(beat_score(&a, &m, cfg.sigma_s))
}

/// The kernel score on precomputed beat times.
pub fn beat_score(audio_beats: &[f64], motion_beats: &[f64], sigma: f64) -> f64 {
    let total: f64 = motion_beats
        .iter()
        .map(|&m| {
            let d = audio_beats.iter().map(|&a| (a - m).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    total / motion_beats.len() as f64
}

/// Mean feature vector and covariance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
}

const PSD_TOL: f64 = 1e-8;

impl GaussianStats {
    /// Sample mean and unbiased covariance of the rows.
    pub fn fit(features: ArrayView2<'_, f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::InsufficientData { have: n, need: 2 });
        }
        let mean = features.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let centered = &features - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        Ok(Self {
            mean: mean.to_vec(),
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL * scale {
        return Err(Error::NotPsd(min));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½)`, with the root taken as
/// `tr((Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.dim() != (d, d) || b.cov.dim() != (d, d) {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let ca = to_dmatrix(&a.cov);
    let cb = to_dmatrix(&b.cov);
    let ra = psd_sqrt(&ca)?;
    psd_sqrt(&cb)?;
    let inner = &ra * &cb * &ra;
    let cross: f64 = psd_sqrt(&inner)?.trace();
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Mean ℓ1 distance over random unordered pairs (all pairs when
/// `pair_count` covers them).
pub fn diversity<R: Rng>(clips: &[Array2<f32>], pair_count: usize, rng: &mut R) -> Result<f64> {
    if clips.len() < 2 {
        return Err(Error::TooFewClips(clips.len()));
    }
    let shape = clips[0].dim();
    if let Some(c) = clips.iter().find(|c| c.dim() != shape) {
        return Err(Error::LengthMismatch(shape.0 * shape.1, c.len()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..clips.len())
        .flat_map(|i| (i + 1..clips.len()).map(move |j| (i, j)))
        .collect();
    if pair_count < pairs.len() {
        pairs.shuffle(rng);
        pairs.truncate(pair_count.max(1));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            clips[i]
                .iter()
                .zip(clips[j].iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextOverlap {
    pub bleu1: f64,
    pub rouge_l: f64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Unigram BLEU with brevity penalty and LCS-based ROUGE-L F1, both ×100.
pub fn text_overlap(prediction: &str, reference: &str) -> TextOverlap {
    let p = words(prediction);
    let r = words(reference);
    if p.is_empty() || r.is_empty() {
        return TextOverlap {
            bleu1: 0.0,
            rouge_l: 0.0,
        };
    }
    let mut counts = std::collections::HashMap::<&str, usize>::new();
    for w in &r {
        *counts.entry(w).or_default() += 1;
    }
    let mut hits = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    let precision = hits as f64 / p.len() as f64;
    let bp = if p.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / p.len() as f64).exp()
    };
    let mut dp = vec![vec![0usize; r.len() + 1]; p.len() + 1];
    for i in 0..p.len() {
        for j in 0..r.len() {
            dp[i + 1][j + 1] = if p[i] == r[j] {
                dp[i][j] + 1
            } else {
                dp[i][j + 1].max(dp[i + 1][j])
            };
        }
    }
    let lcs = dp[p.len()][r.len()] as f64;
    let rouge_l = if lcs == 0.0 {
        0.0
    } else {
        let (pr, rc) = (lcs / p.len() as f64, lcs / r.len() as f64);
        2.0 * pr * rc / (pr + rc)
    };
    TextOverlap {
        bleu1: 100.0 * bp * precision,
        rouge_l: 100.0 * rouge_l,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub window: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub min_windows: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            window: 64,
            hidden: 32,
            feature_dim: 32,
            epochs: 40,
            batch_size: 16,
            lr: 2e-3,
            holdout_fraction: 0.1,
            min_windows: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub windows: usize,
    /// Held-out reconstruction MSE in normalized units.
    pub heldout_mse: f64,
    /// MSE of predicting the per-dimension mean.
    pub baseline_mse: f64,
}

#[derive(Serialize, Deserialize)]
struct EmbedderFile {
    config: EmbedderConfig,
    mean: Vec<f32>,
    std: Vec<f32>,
}

/// Autoencoder mapping a fixed-length pose window to a feature vector.
pub struct FeatureEmbedder {
    config: EmbedderConfig,
    mean: Vec<f32>,
    std: Vec<f32>,
    params: ParamSet,
    frame_in: Conv1d,
    pool: Conv1d,
    to_feature: Linear,
    from_feature: Linear,
    frame_out: Conv1d,
}

const POOL: usize = 4;

impl FeatureEmbedder {
    fn new(config: EmbedderConfig, mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if config.window < POOL || config.window % POOL != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedder window {} must be a positive multiple of {POOL}",
                config.window
            )));
        }
        if config.hidden == 0 || config.feature_dim == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig("embedder sizes must be positive".into()));
        }
        let mut ps = ParamSet::new(config.seed, DType::F32);
        let h = config.hidden;
        let pooled = h * config.window / POOL;
        Ok(Self {
            frame_in: Conv1d::new(&mut ps, "enc.frame", POSE_WIDTH, h, 1, 1, 0)?,
            pool: Conv1d::new(&mut ps, "enc.pool", h, h, POOL, POOL, 0)?,
            to_feature: Linear::new(&mut ps, "enc.out", pooled, config.feature_dim, true)?,
            from_feature: Linear::new(&mut ps, "dec.in", config.feature_dim, h * config.window, true)?,
            frame_out: Conv1d::new(&mut ps, "dec.frame", h, POSE_WIDTH, 3, 1, 1)?,
            params: ps,
            config,
            mean,
            std,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// `(B, window, 418)` normalized → `(B, feature_dim)`.
    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let h = self.frame_in.forward(&x.transpose(1, 2)?.contiguous()?)?.relu()?;
        let h = self.pool.forward(&h)?.relu()?;
        Ok(self.to_feature.forward(&h.reshape((b, ()))?)?)
    }

    fn decode_tensor(&self, f: &Tensor) -> Result<Tensor> {
        let b = f.dim(0)?;
        let h = self.from_feature.forward(f)?.relu()?;
        let h = h.reshape((b, self.config.hidden, self.config.window))?;
        Ok(self.frame_out.forward(&h)?.transpose(1, 2)?)
    }

    fn batch(&self, windows: &[&Array2<f32>]) -> Result<Tensor> {
        let w = self.config.window;
        let mut data = Vec::with_capacity(windows.len() * w * POSE_WIDTH);
        for win in windows {
            for row in win.rows() {
                for (k, v) in row.iter().enumerate() {
                    data.push((v - self.mean[k]) / self.std[k]);
                }
            }
        }
        Ok(Tensor::from_vec(data, (windows.len(), w, POSE_WIDTH), &Device::Cpu)?)
    }

    /// Features of each window of the clip.
    pub fn embed(&self, motion: &MotionSequence) -> Result<Array2<f64>> {
        let wins = windows(motion, self.config.window, self.config.window)?;
        let refs: Vec<&Array2<f32>> = wins.iter().collect();
        let f = self.encode_tensor(&self.batch(&refs)?)?;
        Ok(to_array2(&f)?.mapv(|v| v as f64))
    }

    /// Features of every window of every clip, stacked.
    pub fn embed_all(&self, clips: &[MotionSequence]) -> Result<Array2<f64>> {
        let parts: Vec<Array2<f64>> = clips.iter().map(|c| self.embed(c)).collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        if views.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("same width"))
    }

    fn reconstruction_mse(&self, windows: &[&Array2<f32>]) -> Result<f64> {
        let mut sum = 0.0;
        for chunk in windows.chunks(self.config.batch_size) {
            let x = self.batch(chunk)?;
            let y = self.decode_tensor(&self.encode_tensor(&x)?)?;
            sum += nn::scalar(&nn::mse(&y, &x)?)? * chunk.len() as f64;
        }
        Ok(sum / windows.len().max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let file = EmbedderFile {
            config: self.config.clone(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        };
        store::save(dir, &file, &self.params.snapshot(), None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded: store::Loaded<EmbedderFile> = store::load(dir, DType::F32)?;
        let f = loaded.config;
        let e = Self::new(f.config, f.mean, f.std)?;
        e.params.load(&loaded.tensors)?;
        Ok(e)
    }
}

/// Full-pose windows of `len` frames taken every `stride` frames; the last
/// window is aligned to the clip end, and short clips repeat their final
/// frame.
pub fn windows(motion: &MotionSequence, len: usize, stride: usize) -> Result<Vec<Array2<f32>>> {
    let pose = merge_parts(&motion.parts)?;
    let t = pose.nrows();
    if t >= len {
        let mut starts: Vec<usize> = (0..=t - len).step_by(stride.max(1)).collect();
        if *starts.last().expect("one start") != t - len {
            starts.push(t - len);
        }
        Ok(starts
            .into_iter()
            .map(|s| pose.slice(ndarray::s![s..s + len, ..]).to_owned())
            .collect())
    } else {
        Ok(vec![Array2::from_shape_fn((len, POSE_WIDTH), |(f, k)| {
            pose[[f.min(t - 1), k]]
        })])
    }
}

pub fn fit_embedder(
    corpus: &[MotionSequence],
    config: &EmbedderConfig,
) -> Result<(FeatureEmbedder, EmbedderReport)> {
    let mut all = vec![];
    for m in corpus {
        all.extend(windows(m, config.window, (config.window / 2).max(1))?);
    }
    if all.len() < config.min_windows {
        return Err(Error::InsufficientData {
            have: all.len(),
            need: config.min_windows,
        });
    }
    let (train_idx, held_idx) = split_indices(all.len(), config.holdout_fraction, config.seed);
    let frames = (train_idx.len() * config.window) as f64;
    let mut mean = vec![0.0f64; POSE_WIDTH];
    let mut sq = vec![0.0f64; POSE_WIDTH];
    for &i in &train_idx {
        for row in all[i].rows() {
            for (k, v) in row.iter().enumerate() {
                mean[k] += *v as f64;
                sq[k] += (*v as f64).powi(2);
            }
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / frames).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / frames - m * m).max(0.0);
            if var > 1e-10 {
                var.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let model = FeatureEmbedder::new(config.clone(), mean, std)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order = train_idx.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Array2<f32>> = chunk.iter().map(|&i| &all[i]).collect();
            let x = model.batch(&refs)?;
            let loss = nn::mse(&model.decode_tensor(&model.encode_tensor(&x)?)?, &x)?;
            opt.step(&model.params, &loss)?;
        }
    }
    let eval_idx = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let refs: Vec<&Array2<f32>> = eval_idx.iter().map(|&i| &all[i]).collect();
    let heldout_mse = model.reconstruction_mse(&refs)?;
    let mut base = 0.0;
    for w in &refs {
        for row in w.rows() {
            for (k, v) in row.iter().enumerate() {
                base += (((v - model.mean[k]) / model.std[k]) as f64).powi(2);
            }
        }
    }
    let baseline_mse = base / (refs.len() * config.window * POSE_WIDTH).max(1) as f64;
    Ok((
        model,
        EmbedderReport {
            windows: all.len(),
            heldout_mse,
            baseline_mse,
        },
    ))
}

/// Fréchet distance between the feature distributions of two clip sets.
pub fn fgd(embedder: &FeatureEmbedder, real: &[MotionSequence], generated: &[MotionSequence]) -> Result<f64> {
    let a = GaussianStats::fit(embedder.embed_all(real)?.view())?;
    let b = GaussianStats::fit(embedder.embed_all(generated)?.view())?;
    frechet_distance(&a, &b)
}

/// Frames of a clip in a random order.
pub fn shuffle_frames<R: Rng>(motion: &MotionSequence, rng: &mut R) -> MotionSequence {
    let mut order: Vec<usize> = (0..motion.frames()).collect();
    order.shuffle(rng);
    let pick = |a: &Array2<f32>| a.select(ndarray::Axis(0), &order);
    let mut out = motion.clone();
    for p in Part::ALL {
        *out.parts.get_mut(p) = pick(motion.part(p));
    }
    out.translation = pick(&motion.translation);
    out
}

/// Metrics report written by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fgd: f64,
    pub bc: f64,
    pub diversity: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    /// Exact-label accuracy of predicted emotion words.
    #[serde(default)]
    pub emotion_accuracy: Option<f64>,
    pub n_items: usize,
    pub config_hash: String,
    /// Needs an external pretrained model; always null here.
    pub bertscore: Option<f64>,
    pub bertscore_status: String,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        store::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_clip, Emotion, SynthConfig};
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};

    fn diag(mean: Vec<f64>, var: &[f64]) -> GaussianStats {
        let mut cov = Array2::zeros((var.len(), var.len()));
        for (i, v) in var.iter().enumerate() {
            cov[[i, i]] = *v;
        }
        GaussianStats { mean, cov }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = diag(vec![1.0], &[4.0]);
        let b = diag(vec![-2.0], &[0.25]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - (9.0 + (2.0f64 - 0.5).powi(2))).abs() < 1e-10);
        let a = diag(vec![0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        let b = diag(vec![1.0, 1.0, 0.0], &[4.0, 0.5, 3.0]);
        let want: f64 = 1.0 + 0.0 + 4.0 + 1.0 + (2f64.sqrt() - 0.5f64.sqrt()).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-10);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn frechet_errors() {
        let a = diag(vec![0.0], &[1.0]);
        let b = diag(vec![0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::DimensionMismatch(1, 2))));
        let bad = diag(vec![0.0], &[-1.0]);
        assert!(matches!(frechet_distance(&a, &bad), Err(Error::NotPsd(_))));
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_zero_on_self(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-1.0..1.0));
            let y = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-1.0..1.5));
            let a = GaussianStats::fit(x.view()).unwrap();
            let b = GaussianStats::fit(y.view()).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        }

        #[test]
        fn diversity_ignores_clip_order(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut clips: Vec<Array2<f32>> = (0..5)
                .map(|_| Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let a = diversity(&clips, 100, &mut rng).unwrap();
            clips.shuffle(&mut rng);
            let b = diversity(&clips, 100, &mut rng).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn diversity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array2::from_elem((4, 5), 0.5f32);
        assert_eq!(diversity(&[a.clone(), a.clone()], 10, &mut rng).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.25);
        assert!((diversity(&[a.clone(), b], 10, &mut rng).unwrap() - 0.25 * 20.0).abs() < 1e-9);
        assert!(matches!(diversity(&[a.clone()], 10, &mut rng), Err(Error::TooFewClips(1))));
        let c = Array2::zeros((3, 5));
        assert!(matches!(diversity(&[a, c], 10, &mut rng), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn text_overlap_examples() {
        let s = text_overlap("i am so happy", "i am so happy");
        assert_eq!((s.bleu1, s.rouge_l), (100.0, 100.0));
        let s = text_overlap("happiness", "anger");
        assert_eq!((s.bleu1, s.rouge_l), (0.0, 0.0));
        let s = text_overlap("very happy", "happy");
        assert!((s.rouge_l - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(text_overlap("", "x").bleu1, 0.0);
        // brevity penalty
        let s = text_overlap("happy", "very happy");
        assert!((s.bleu1 - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn beat_score_by_hand() {
        assert_eq!(beat_score(&[1.0, 2.0], &[1.0, 2.0], 0.1), 1.0);
        let d: f64 = 0.05;
        let want = (-d * d / (2.0 * 0.01)).exp();
        assert!((beat_score(&[1.0], &[1.05], 0.1) - want).abs() < 1e-12);
    }

    #[test]
    fn synthetic_clip_is_aligned_and_shuffle_is_not() {
        let cfg = BeatConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            let clip = synth_clip(&SynthConfig::new(seed, Emotion::ALL[seed as usize])).unwrap();
            let bc = beat_consistency(&clip.audio, &clip.motion, &cfg).unwrap();
            assert!((bc - 1.0).abs() < 1e-6, "seed {seed}: {bc}");
            let shuffled = shuffle_frames(&clip.motion, &mut rng);
            assert!(beat_consistency(&clip.audio, &shuffled, &cfg).unwrap() < bc);
        }
    }

    #[test]
    fn silent_or_static_inputs_have_no_beats() {
        let cfg = BeatConfig::default();
        let audio = AudioClip::new(vec![0.0; 16_000]).unwrap();
        let motion = MotionSequence::rest(30, 30);
        assert!(matches!(beat_consistency(&audio, &motion, &cfg), Err(Error::NoBeats("audio"))));
        let clip = synth_clip(&SynthConfig::new(0, Emotion::Neutral)).unwrap();
        let still = MotionSequence::rest(clip.motion.frames(), 30);
        assert!(matches!(beat_consistency(&clip.audio, &still, &cfg), Err(Error::NoBeats("motion"))));
        assert!(matches!(beat_consistency(&clip.audio, &motion, &cfg), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn angular_speed_of_constant_rotation_rate() {
        let mut m = MotionSequence::rest(5, 30);
        for f in 0..5 {
            let r6 = crate::motion::rotation::rot6d_from_axis_angle([0.0, 0.0, 0.1 * f as f64]);
            for k in 0..6 {
                m.parts.upper[[f, k]] = r6[k] as f32;
            }
        }
        for s in angular_speed(&m).unwrap() {
            assert!((s - 3.0).abs() < 1e-4, "{s}");
        }
        let _ = array![[0.0f32]];
    }

    #[test]
    fn gaussian_fit_needs_two_rows() {
        assert!(GaussianStats::fit(Array2::<f64>::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn embedder_rejects_small_corpus_and_learns_identical_clips() {
        let clip = synth_clip(&SynthConfig::new(0, Emotion::Anger)).unwrap().motion;
        let cfg = EmbedderConfig {
            epochs: 100,
            ..Default::default()
        };
        assert!(matches!(
            fit_embedder(&vec![clip.clone(); 10], &cfg),
            Err(Error::InsufficientData { have: 10, need: 100 })
        ));
        let (e, report) = fit_embedder(&vec![clip.clone(); 100], &cfg).unwrap();
        assert!(report.heldout_mse < 0.01 * report.baseline_mse, "{report:?}");
        let f = e.embed(&clip).unwrap();
        assert_eq!(f.dim(), (1, 32));
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        assert_eq!(FeatureEmbedder::load(dir.path()).unwrap().embed(&clip).unwrap(), f);
    }
}
