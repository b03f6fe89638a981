//! Global-translation estimation from the lower-body stream: a temporal
//! convolutional variational regressor predicting per-frame root velocity,
//! integrated into a trajectory that starts at the origin.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::to_array2;
use super::train::split_indices;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, Part, DEFAULT_FPS, LOWER_WIDTH};
use crate::nn::{self, AdamW, AdamWConfig, Conv1d, ParamSet};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub hidden: usize,
    pub latent: usize,
    pub fps: u32,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 16,
            fps: DEFAULT_FPS,
            kl_weight: 1e-4,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    /// Mean squared trajectory error (relative to the first frame) on the
    /// held-out clips.
    pub heldout_error: f64,
    /// Same error for the constant prediction.
    pub baseline_error: f64,
    pub epoch_loss: Vec<f64>,
}

pub struct TranslationPredictor {
    config: TranslationConfig,
    params: ParamSet,
    encoder: Vec<Conv1d>,
    decoder: Vec<Conv1d>,
}

impl TranslationPredictor {
    pub fn new(config: TranslationConfig) -> Result<Self> {
        if config.hidden == 0 || config.latent == 0 || config.fps == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "translation sizes must be positive".into(),
            ));
        }
        let mut ps = ParamSet::new(config.seed, DType::F32);
        let h = config.hidden;
        let encoder = vec![
            Conv1d::new(&mut ps, "enc.0", LOWER_WIDTH, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "enc.1", h, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "enc.2", h, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "enc.3", h, 2 * config.latent, 3, 1, 1)?,
        ];
        let decoder = vec![
            Conv1d::new(&mut ps, "dec.0", config.latent, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "dec.1", h, 3, 3, 1, 1)?,
        ];
        Ok(Self {
            config,
            params: ps,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &TranslationConfig {
        &self.config
    }

    /// `(B, T, 54)` → `(mu, logvar)` each `(B, latent, T)`.
    fn posterior(&self, lower: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = lower.transpose(1, 2)?.contiguous()?;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.encoder.len() {
                h = h.relu()?;
            }
        }
        let l = self.config.latent;
        Ok((h.narrow(1, 0, l)?, h.narrow(1, l, l)?))
    }

    /// `(B, latent, T)` → `(B, T, 3)` root velocity in m/s.
    fn velocity(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.decoder[0].forward(z)?.relu()?;
        let v = self.decoder[1].forward(&h)?;
        Ok(v.transpose(1, 2)?)
    }

    fn check(&self, lower: ArrayView2<'_, f32>) -> Result<()> {
        if lower.ncols() != LOWER_WIDTH {
            return Err(Error::shape(LOWER_WIDTH, lower.ncols()));
        }
        if lower.nrows() == 0 {
            return Err(Error::TooShort {
                frames: 0,
                needed: 1,
            });
        }
        Ok(())
    }

    /// Per-frame translation, starting at the origin.
    pub fn predict(&self, lower: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        self.check(lower)?;
        let (t, w) = lower.dim();
        let x = Tensor::from_vec(
            lower.iter().copied().collect::<Vec<_>>(),
            (1, t, w),
            &Device::Cpu,
        )?;
        let (mu, _) = self.posterior(&x)?;
        let v = to_array2(&self.velocity(&mu)?.squeeze(0)?)?;
        Ok(integrate(&v, self.config.fps))
    }

    fn loss(&self, lower: &Tensor, target_v: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (mu, logvar) = self.posterior(lower)?;
        let noise = gaussian_like(&mu, rng)?;
        let z = (&mu + (noise * (&logvar * 0.5)?.exp()?)?)?;
        let v = self.velocity(&z)?;
        let rec = nn::mse(&v, target_v)?;
        let kl = ((mu.sqr()? + logvar.exp()? - &logvar)? - 1.0)?.mean_all()? * 0.5;
        Ok((rec + (kl? * self.config.kl_weight)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save(dir, &self.config, &self.params.snapshot(), None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded: store::Loaded<TranslationConfig> = store::load(dir, DType::F32)?;
        let model = Self::new(loaded.config)?;
        model.params.load(&loaded.tensors)?;
        Ok(model)
    }
}

pub fn predict_global_translation(
    model: &TranslationPredictor,
    lower_seq: ArrayView2<'_, f32>,
) -> Result<Array2<f32>> {
    model.predict(lower_seq)
}

fn gaussian_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    use rand::Rng;
    let n = t.elem_count();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, t.dims(), &Device::Cpu)?.to_dtype(t.dtype())?)
}

/// Cumulative sum of `v / fps`, with the first frame at the origin.
pub fn integrate(v: &Array2<f32>, fps: u32) -> Array2<f32> {
    let mut out = Array2::zeros(v.dim());
    for t in 1..v.nrows() {
        for d in 0..3 {
            out[[t, d]] = out[[t - 1, d]] + v[[t, d]] / fps as f32;
        }
    }
    out
}

/// Root velocity of a trajectory: `(x_t − x_{t−1})·fps`, zero at frame 0.
pub fn velocity_of(translation: &Array2<f32>, fps: u32) -> Array2<f32> {
    let mut out = Array2::zeros(translation.dim());
    for t in 1..translation.nrows() {
        for d in 0..3 {
            out[[t, d]] = (translation[[t, d]] - translation[[t - 1, d]]) * fps as f32;
        }
    }
    out
}

/// Mean squared error between trajectories after moving both to start at
/// the origin.
pub fn trajectory_error(pred: &Array2<f32>, truth: &Array2<f32>) -> f64 {
    let n = truth.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in 0..n {
        for d in 0..3 {
            let a = (pred[[t, d]] - pred[[0, d]]) as f64;
            let b = (truth[[t, d]] - truth[[0, d]]) as f64;
            sum += (a - b).powi(2);
        }
    }
    sum / (3 * n) as f64
}

pub fn train_translation(
    dataset: &[MotionSequence],
    config: &TranslationConfig,
) -> Result<(TranslationPredictor, TranslationReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = TranslationPredictor::new(config.clone())?;
    let (train_idx, held_idx) = split_indices(dataset.len(), config.holdout_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut order = train_idx.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let t = chunk
                .iter()
                .map(|&i| dataset[i].frames())
                .min()
                .unwrap_or(0);
            if t == 0 {
                continue;
            }
            let mut xs = Vec::with_capacity(chunk.len() * t * LOWER_WIDTH);
            let mut vs = Vec::with_capacity(chunk.len() * t * 3);
            for &i in chunk {
                let m = &dataset[i];
                xs.extend(
                    m.part(Part::Lower)
                        .slice(ndarray::s![..t, ..])
                        .iter()
                        .copied(),
                );
                let tr = m.translation.slice(ndarray::s![..t, ..]).to_owned();
                vs.extend(velocity_of(&tr, config.fps).iter().copied());
            }
            let x = Tensor::from_vec(xs, (chunk.len(), t, LOWER_WIDTH), &Device::Cpu)?;
            let v = Tensor::from_vec(vs, (chunk.len(), t, 3), &Device::Cpu)?;
            let loss = model.loss(&x, &v, &mut rng)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::DivergedTraining {
                    step: opt.steps() as usize,
                });
            }
            opt.step(&model.params, &loss)?;
            sum += value;
            n += 1;
        }
        epoch_loss.push(if n > 0 { sum / n as f64 } else { 0.0 });
    }
    let (mut err, mut base) = (0.0, 0.0);
    for &i in &held_idx {
        let m = &dataset[i];
        let pred = model.predict(m.part(Part::Lower).view())?;
        err += trajectory_error(&pred, &m.translation);
        base += trajectory_error(&Array2::zeros(m.translation.dim()), &m.translation);
    }
    let h = held_idx.len().max(1) as f64;
    let report = TranslationReport {
        heldout_error: err / h,
        baseline_error: base / h,
        epoch_loss,
    };
    Ok((model, report))
}
