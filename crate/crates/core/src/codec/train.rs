use candle_core::{Device, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{to_array2, CodecConfig, PartCodec, VqLossReport};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, Part};
use crate::nn::{self, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub part: Part,
    pub train_clips: usize,
    pub heldout_clips: usize,
    pub initial_heldout: VqLossReport,
    pub final_heldout: VqLossReport,
    /// Mean training objective per epoch.
    pub epoch_loss: Vec<f64>,
    pub utilization: f64,
    pub reseeded: usize,
}

/// Splits indices into (train, held-out) after a seeded shuffle.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 || fraction <= 0.0 {
        return (idx.clone(), idx);
    }
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains one part codec with the straight-through estimator. The codebook
/// starts from random encoder outputs; entries left unused for a whole epoch
/// are moved onto random encoder outputs of that epoch.
pub fn train_codec(
    dataset: &[MotionSequence],
    part: Part,
    config: &CodecConfig,
) -> Result<(PartCodec, CodecTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut config = config.clone();
    config.part = part;
    config.validate()?;
    if let Some(short) = dataset.iter().find(|m| m.frames() < config.downsample) {
        return Err(Error::TooShort {
            frames: short.frames(),
            needed: config.downsample,
        });
    }
    let clips: Vec<Array2<f32>> = dataset.iter().map(|m| m.part(part).clone()).collect();
    let (train_idx, held_idx) = split_indices(clips.len(), config.holdout_fraction, config.seed);
    let train: Vec<Array2<f32>> = train_idx.iter().map(|&i| clips[i].clone()).collect();
    let held: Vec<Array2<f32>> = held_idx.iter().map(|&i| clips[i].clone()).collect();

    let mut codec = PartCodec::new(config.clone(), candle_core::DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let pool = encoder_outputs(&codec, &train)?;
    let k = config.codebook_size;
    let init: Vec<(usize, Vec<f32>)> = (0..k).map(|i| (i, jittered(&pool, &mut rng))).collect();
    codec.set_codebook_rows(&init)?;

    let initial_heldout = codec.evaluate(&held)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: 0.0,
        ..Default::default()
    })
    .with_lr_scale("codebook", config.codebook_lr_scale);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut reseeded = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        // cosine decay to a tenth of the base rate
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        opt.config.lr = config.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut usage = vec![0u64; k];
        let mut recent: Vec<Vec<f32>> = Vec::new();
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let g = batch(&train, chunk, config.downsample, &mut rng)?;
            let (g_hat, z, q, indices) = codec.forward(&g)?;
            let total = codec.loss_terms(&g, &g_hat, &z, &q)?.total()?;
            let value = nn::scalar(&total)?;
            if !value.is_finite() {
                return Err(Error::DivergedTraining {
                    step: opt.steps() as usize,
                });
            }
            opt.step(codec.params(), &total)?;
            for i in indices {
                usage[i] += 1;
            }
            let flat = to_array2(&z.detach().reshape(((), config.latent_dim))?)?;
            recent.extend(flat.rows().into_iter().map(|r| r.to_vec()));
            sum += value;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
        if config.reseed_dead_codes && epoch + 1 < config.epochs {
            let dead: Vec<(usize, Vec<f32>)> = (0..k)
                .filter(|&i| usage[i] == 0)
                .map(|i| (i, jittered(&recent, &mut rng)))
                .collect();
            reseeded += dead.len();
            codec.set_codebook_rows(&dead)?;
        }
    }

    let mut usage = vec![0u64; k];
    for c in &train {
        for i in codec.tokenize(c.view())? {
            usage[i] += 1;
        }
    }
    codec.set_usage(usage);
    let utilization = codec.codebook()?.utilization();
    let final_heldout = codec.evaluate(&held)?;
    let report = CodecTrainReport {
        part,
        train_clips: train.len(),
        heldout_clips: held.len(),
        initial_heldout,
        final_heldout,
        epoch_loss,
        utilization,
        reseeded,
    };
    Ok((codec, report))
}

fn encoder_outputs(codec: &PartCodec, clips: &[Array2<f32>]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for c in clips {
        let z = codec.encode(c.view())?;
        out.extend(z.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

fn jittered(pool: &[Vec<f32>], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v = &pool[rng.gen_range(0..pool.len())];
    v.iter()
        .map(|&x| x + rng.gen_range(-1e-3f32..1e-3))
        .collect()
}

/// Stacks clips into `(B, T, D)`, cropping each to the shortest clip of the
/// batch at a random offset.
fn batch(
    clips: &[Array2<f32>],
    chunk: &[usize],
    ds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let t = chunk
        .iter()
        .map(|&i| clips[i].nrows())
        .min()
        .expect("non-empty chunk");
    let t = (t / ds).max(1) * ds;
    let w = clips[chunk[0]].ncols();
    let mut data = Vec::with_capacity(chunk.len() * t * w);
    for &i in chunk {
        let c = &clips[i];
        let start = rng.gen_range(0..=c.nrows() - t);
        data.extend(c.slice(s![start..start + t, ..]).iter().copied());
    }
    Ok(Tensor::from_vec(data, (chunk.len(), t, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_covers() {
        let (tr, he) = split_indices(200, 0.1, 3);
        assert_eq!(he.len(), 20);
        assert_eq!(tr.len(), 180);
        let mut all: Vec<usize> = tr.iter().chain(he.iter()).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.1, 0).0, vec![0]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = CodecConfig::reduced(Part::Upper);
        assert!(matches!(
            train_codec(&[], Part::Upper, &cfg),
            Err(Error::EmptyDataset)
        ));
    }
}
