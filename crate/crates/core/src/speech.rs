//! Audio to discrete units at 50 per second: log mel-band energies per
//! 320-sample hop, quantized against a k-means codebook.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::codec::codebook::nearest;
use crate::error::{Error, Result};
use crate::store;

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 320;
pub const WINDOW: usize = 400;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;
pub const TOKENS_PER_SECOND: usize = SAMPLE_RATE as usize / HOP;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() < HOP {
            return Err(Error::TooShortAudio {
                samples: samples.len(),
                needed: HOP,
            });
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidConfig("audio samples must lie in [-1, 1]".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / HOP
    }

    /// Reads a 16 kHz mono WAV file (PCM16 or float32).
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if spec.sample_rate != SAMPLE_RATE || spec.channels != 1 {
            return Err(bad(format!(
                "expected 16000 Hz mono, found {} Hz with {} channels",
                spec.sample_rate, spec.channels
            )));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            (f, b) => return Err(bad(format!("unsupported sample format {f:?}/{b} bits"))),
        };
        Self::new(samples)
    }

    /// Writes 16-bit PCM.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the `N_FFT/2 + 1` power bins, 0 Hz to Nyquist.
fn mel_filters() -> Vec<Vec<f64>> {
    let bins = N_FFT / 2 + 1;
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64) * N_FFT as f64 / SAMPLE_RATE as f64)
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log mel-band energies, one row per 320-sample hop.
///
/// Frame `i` analyzes hop `[320i, 320i + 320)`, widened to the 400-sample
/// window by mirroring 40 samples at each edge of the hop. Every frame
/// therefore depends on its own hop only.
pub fn featurize(clip: &AudioClip) -> Result<Array2<f32>> {
    featurize_samples(clip.samples())
}

pub fn featurize_samples(samples: &[f32]) -> Result<Array2<f32>> {
    if samples.len() < HOP {
        return Err(Error::TooShortAudio {
            samples: samples.len(),
            needed: HOP,
        });
    }
    let frames = samples.len() / HOP;
    let filters = mel_filters();
    let hann: Vec<f64> = (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / WINDOW as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let margin = (WINDOW - HOP) / 2;
    let mut out = Array2::zeros((frames, N_MELS));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for i in 0..frames {
        let hop = &samples[i * HOP..(i + 1) * HOP];
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < WINDOW {
                let k = n as i64 - margin as i64;
                let idx = if k < 0 {
                    (-k) as usize
                } else if k as usize >= HOP {
                    2 * HOP - 2 - k as usize
                } else {
                    k as usize
                };
                Complex::new(hop[idx] as f64 * hann[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (m, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[[i, m]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechConfig {
    pub codebook_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            iterations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticCodebook {
    pub centroids: Array2<f32>,
}

impl AcousticCodebook {
    pub fn new(centroids: Array2<f32>) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(Error::InvalidConfig("acoustic codebook needs at least 2 centroids".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("centroids must be finite".into()));
        }
        Ok(Self { centroids })
    }

    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid per row; ties go to the lowest index.
    pub fn assign(&self, features: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(features.ncols(), self.dim()));
        }
        Ok(features
            .rows()
            .into_iter()
            .map(|r| nearest(self.centroids.view(), r))
            .collect())
    }

    /// Mean Euclidean distance from each row to its centroid.
    pub fn distortion(&self, features: ArrayView2<'_, f32>) -> Result<f64> {
        let idx = self.assign(features)?;
        let total: f64 = features
            .rows()
            .into_iter()
            .zip(&idx)
            .map(|(r, &k)| sq_dist(r.as_slice().expect("row"), self.centroids.row(k).as_slice().expect("row")).sqrt())
            .sum();
        Ok(total / features.nrows().max(1) as f64)
    }

    pub fn save(&self, dir: &Path, config: &SpeechConfig) -> Result<()> {
        let (k, d) = self.centroids.dim();
        let t = Tensor::from_vec(self.centroids.iter().copied().collect::<Vec<_>>(), (k, d), &Device::Cpu)?;
        let mut tensors = std::collections::BTreeMap::new();
        tensors.insert("centroids".to_string(), t);
        store::save(dir, config, &tensors, None)
    }

    pub fn load(dir: &Path) -> Result<(Self, SpeechConfig)> {
        let loaded: store::Loaded<SpeechConfig> = store::load(dir, DType::F32)?;
        let t = loaded
            .tensors
            .get("centroids")
            .ok_or_else(|| Error::CorruptCheckpoint("missing centroids".into()))?;
        let (k, d) = t.dims2()?;
        let v = t.flatten_all()?.to_vec1::<f32>()?;
        let centroids = Array2::from_shape_vec((k, d), v).expect("dims2 shape");
        Ok((Self::new(centroids)?, loaded.config))
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// k-means with k-means++ seeding and a fixed number of Lloyd iterations.
/// A cluster that loses all its points keeps its previous centroid.
pub fn fit_acoustic_codebook(features: ArrayView2<'_, f32>, k: usize, config: &SpeechConfig) -> Result<AcousticCodebook> {
    let n = features.nrows();
    if k < 2 {
        return Err(Error::InvalidConfig("acoustic codebook needs at least 2 centroids".into()));
    }
    if n < k {
        return Err(Error::InsufficientData { have: n, need: k });
    }
    let rows: Vec<Vec<f32>> = features.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                d2.iter().rposition(|&d| d > 0.0).expect("positive mass")
            } else {
                pick
            }
        } else {
            // every point coincides with a centroid: take unused points in order
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &rows[next]));
        }
    }
    let dim = features.ncols();
    let mut centroids = Array2::zeros((k, dim));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&features.row(i));
    }
    for _ in 0..config.iterations {
        let idx: Vec<usize> = features
            .rows()
            .into_iter()
            .map(|r| nearest(centroids.view(), r))
            .collect();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in rows.iter().zip(&idx) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                let v = (sums[c][d] / counts[c] as f64) as f32;
                if centroids[[c, d]] != v {
                    moved = true;
                    centroids[[c, d]] = v;
                }
            }
        }
        if !moved {
            break;
        }
    }
    AcousticCodebook::new(centroids)
}

pub fn tokenize_audio(clip: &AudioClip, codebook: &AcousticCodebook) -> Result<Vec<usize>> {
    codebook.assign(featurize(clip)?.view())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(samples: usize, freq: f64, amp: f32) -> Vec<f32> {
        (0..samples)
            .map(|n| amp * (std::f64::consts::TAU * freq * n as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn frame_rate_and_silence() {
        let clip = AudioClip::new(vec![0.0; 16_000]).unwrap();
        let f = featurize(&clip).unwrap();
        assert_eq!(f.dim(), (50, N_MELS));
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(f.iter().all(|&v| v == floor));
        assert!(matches!(AudioClip::new(vec![0.0; 319]), Err(Error::TooShortAudio { .. })));
        assert_eq!(featurize_samples(&vec![0.1; 16_330]).unwrap().nrows(), 51);
    }

    #[test]
    fn tone_energy_lands_in_the_right_band() {
        let f = featurize_samples(&tone(3200, 1000.0, 0.5)).unwrap();
        let row = f.row(3);
        let best = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let filters = mel_filters();
        let bin = (1000.0 * N_FFT as f64 / SAMPLE_RATE as f64).round() as usize;
        assert!(filters[best][bin] > 0.0);
    }

    #[test]
    fn tokens_concatenate() {
        let a = tone(3200, 440.0, 0.3);
        let b = tone(1600, 2000.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f32> = (0..640 * 10).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let mut feats = featurize_samples(&noise).unwrap();
        feats.append(ndarray::Axis(0), featurize_samples(&a).unwrap().view()).unwrap();
        let cb = fit_acoustic_codebook(feats.view(), 4, &SpeechConfig::default()).unwrap();
        let ta = tokenize_audio(&AudioClip::new(a.clone()).unwrap(), &cb).unwrap();
        let tb = tokenize_audio(&AudioClip::new(b.clone()).unwrap(), &cb).unwrap();
        let ab: Vec<f32> = a.iter().chain(&b).copied().collect();
        let tab = tokenize_audio(&AudioClip::new(ab).unwrap(), &cb).unwrap();
        assert_eq!(tab, [ta, tb].concat());
        assert_eq!(tab.len(), 15);
    }

    #[test]
    fn planted_clusters_are_recovered() {
        let centers = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Array2::zeros((400, 2));
        for i in 0..400 {
            let c = centers[i % 4];
            data[[i, 0]] = c[0] + rng.gen_range(-0.5f32..0.5);
            data[[i, 1]] = c[1] + rng.gen_range(-0.5f32..0.5);
        }
        let cb = fit_acoustic_codebook(data.view(), 4, &SpeechConfig::default()).unwrap();
        for (k, c) in centers.iter().enumerate() {
            let mean: Vec<f64> = (0..2)
                .map(|d| (0..100).map(|j| data[[4 * j + k, d]] as f64).sum::<f64>() / 100.0)
                .collect();
            let found = cb
                .centroids
                .rows()
                .into_iter()
                .any(|r| (r[0] as f64 - mean[0]).abs() < 1e-4 && (r[1] as f64 - mean[1]).abs() < 1e-4);
            assert!(found, "center {c:?}");
        }
    }

    #[test]
    fn k_equals_n_and_too_few_points() {
        let data = ndarray::array![[0.0f32, 1.0], [2.0, 3.0], [4.0, 4.0]];
        let cb = fit_acoustic_codebook(data.view(), 3, &SpeechConfig::default()).unwrap();
        assert_eq!(cb.distortion(data.view()).unwrap(), 0.0);
        assert!(matches!(
            fit_acoustic_codebook(data.view(), 4, &SpeechConfig::default()),
            Err(Error::InsufficientData { have: 3, need: 4 })
        ));
    }

    #[test]
    fn distortion_beats_random_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((300, 3), |(i, _)| (i % 5) as f32 * 3.0 + rng.gen_range(-1.0f32..1.0));
        let cb = fit_acoustic_codebook(data.view(), 5, &SpeechConfig::default()).unwrap();
        let random = AcousticCodebook::new(Array2::from_shape_fn((5, 3), |_| rng.gen_range(0.0f32..12.0))).unwrap();
        assert!(cb.distortion(data.view()).unwrap() <= random.distortion(data.view()).unwrap());
    }

    #[test]
    fn centroid_frame_maps_to_its_index() {
        let cb = AcousticCodebook::new(Array2::from_shape_fn((6, N_MELS), |(k, d)| (k * 7 + d) as f32)).unwrap();
        let frame = cb.centroids.slice(ndarray::s![3..4, ..]).to_owned();
        assert_eq!(cb.assign(frame.view()).unwrap(), vec![3]);
    }

    #[test]
    fn wav_round_trip_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let clip = AudioClip::new(tone(960, 300.0, 0.5)).unwrap();
        let p = dir.path().join("a.wav");
        clip.write_wav(&p).unwrap();
        let back = AudioClip::read_wav(&p).unwrap();
        assert_eq!(back.samples().len(), 960);
        for (a, b) in back.samples().iter().zip(clip.samples()) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
        let cb = AcousticCodebook::new(Array2::from_shape_fn((3, 4), |(a, b)| (a + b) as f32)).unwrap();
        cb.save(&dir.path().join("cb"), &SpeechConfig::default()).unwrap();
        assert_eq!(AcousticCodebook::load(&dir.path().join("cb")).unwrap().0, cb);
    }
}
