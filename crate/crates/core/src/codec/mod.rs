//! Per-body-part vector-quantized motion autoencoders.
//!
//! Each part codec is a four-layer temporal convolutional encoder, a
//! nearest-entry codebook and a mirrored decoder. Training minimizes the
//! seven-term reconstruction objective (pose, velocity and acceleration on
//! the rotation streams, the same three on proxy-skeleton marker positions,
//! plus the codebook/commitment term).

pub mod codebook;
pub mod geometry;
pub mod train;
pub mod translation;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use codebook::{quantize, Codebook};
use geometry::PartKinematics;
pub use train::{split_indices, train_codec, CodecTrainReport};
pub use translation::{
    predict_global_translation, train_translation, TranslationConfig, TranslationPredictor,
    TranslationReport,
};

use crate::error::{Error, Result};
use crate::motion::{Part, ProxySkeleton, DEFAULT_FPS};
use crate::nn::{self, Conv1d, Init, ParamSet};
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub vel: f64,
    pub acc: f64,
    pub mrec: f64,
    pub mvel: f64,
    pub macc: f64,
    pub comm: f64,
}

impl LossWeights {
    /// Every component weighted 1.
    pub fn unit() -> Self {
        Self {
            rec: 1.0,
            vel: 1.0,
            acc: 1.0,
            mrec: 1.0,
            mvel: 1.0,
            macc: 1.0,
            comm: 1.0,
        }
    }

    /// Derivative terms weighted by `fps^-order`, which measures them per
    /// frame instead of per second.
    pub fn per_frame(fps: u32) -> Self {
        let f = fps as f64;
        Self {
            vel: 1.0 / f,
            acc: 1.0 / (f * f),
            mvel: 1.0 / f,
            macc: 1.0 / (f * f),
            ..Self::unit()
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::per_frame(DEFAULT_FPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub part: Part,
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Temporal stride product of the encoder; one of 1, 2, 4.
    pub downsample: usize,
    pub hidden: usize,
    pub fps: u32,
    pub weights: LossWeights,
    /// β on ‖z − sg(q)‖²; the codebook term ‖sg(z) − q‖² has weight 1.
    pub commitment: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the codebook entries, so they keep up
    /// with the moving encoder outputs.
    pub codebook_lr_scale: f64,
    pub holdout_fraction: f64,
    pub reseed_dead_codes: bool,
}

impl CodecConfig {
    pub fn new(part: Part) -> Self {
        Self {
            part,
            codebook_size: 256,
            latent_dim: 128,
            downsample: 4,
            hidden: 128,
            fps: DEFAULT_FPS,
            weights: LossWeights::default(),
            commitment: 0.25,
            seed: 0,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            codebook_lr_scale: 10.0,
            holdout_fraction: 0.1,
            reseed_dead_codes: true,
        }
    }

    /// CPU-friendly widths for tests and smoke runs.
    pub fn reduced(part: Part) -> Self {
        Self {
            codebook_size: 64,
            latent_dim: 32,
            hidden: 64,
            ..Self::new(part)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::InvalidConfig(format!(
                "downsample {} not in {{1,2,4}}",
                self.downsample
            )));
        }
        if self.codebook_size == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("codec sizes must be positive".into()));
        }
        if self.fps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "fps and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-component values of the reconstruction objective, already weighted,
/// so `total` is their plain sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossReport {
    pub rec: f64,
    pub vel: f64,
    pub acc: f64,
    pub mrec: f64,
    pub mvel: f64,
    pub macc: f64,
    pub comm: f64,
    pub total: f64,
}

impl VqLossReport {
    pub fn components(&self) -> [f64; 7] {
        [
            self.rec, self.vel, self.acc, self.mrec, self.mvel, self.macc, self.comm,
        ]
    }

    pub(crate) fn accumulate(&mut self, other: &VqLossReport, weight: f64) {
        self.rec += other.rec * weight;
        self.vel += other.vel * weight;
        self.acc += other.acc * weight;
        self.mrec += other.mrec * weight;
        self.mvel += other.mvel * weight;
        self.macc += other.macc * weight;
        self.comm += other.comm * weight;
        self.total += other.total * weight;
    }
}

/// Loss components as graph tensors.
pub struct LossTerms {
    pub rec: Tensor,
    pub vel: Tensor,
    pub acc: Tensor,
    pub mrec: Tensor,
    pub mvel: Tensor,
    pub macc: Tensor,
    pub comm: Tensor,
}

impl LossTerms {
    pub fn all(&self) -> [&Tensor; 7] {
        [
            &self.rec, &self.vel, &self.acc, &self.mrec, &self.mvel, &self.macc, &self.comm,
        ]
    }

    pub fn total(&self) -> Result<Tensor> {
        let mut t = self.rec.clone();
        for c in &self.all()[1..] {
            t = (t + *c)?;
        }
        Ok(t)
    }

    pub fn report(&self) -> Result<VqLossReport> {
        let v: Vec<f64> = self
            .all()
            .iter()
            .map(|t| nn::scalar(t))
            .collect::<Result<_>>()?;
        Ok(VqLossReport {
            rec: v[0],
            vel: v[1],
            acc: v[2],
            mrec: v[3],
            mvel: v[4],
            macc: v[5],
            comm: v[6],
            total: v.iter().sum(),
        })
    }
}

struct Network {
    encoder: Vec<Conv1d>,
    decoder: Vec<Conv1d>,
    /// Number of ×2 upsampling stages before decoder layers 1.. .
    up_stages: usize,
}

/// A trained (or freshly initialized) codec for one body part.
pub struct PartCodec {
    config: CodecConfig,
    params: ParamSet,
    net: Network,
    codebook: Tensor,
    usage: Vec<u64>,
    kinematics: Option<PartKinematics>,
    /// Stream value of a rest pose; the network models deviations from it.
    rest_offset: Tensor,
}

fn rest_row(part: Part) -> Vec<f32> {
    let mut row = vec![0.0f32; part.width()];
    for j in 0..part.joints() {
        row[6 * j] = 1.0;
        row[6 * j + 4] = 1.0;
    }
    row
}

impl PartCodec {
    pub fn new(config: CodecConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new(config.seed, dtype);
        let width = config.part.width();
        let (h, dim) = (config.hidden, config.latent_dim);
        let strided = config.downsample.trailing_zeros() as usize;
        let mut encoder = Vec::with_capacity(4);
        encoder.push(Conv1d::new(&mut ps, "enc.0", width, h, 3, 1, 1)?);
        for i in 1..3 {
            let layer = if i <= strided {
                Conv1d::new(&mut ps, &format!("enc.{i}"), h, h, 4, 2, 1)?
            } else {
                Conv1d::new(&mut ps, &format!("enc.{i}"), h, h, 3, 1, 1)?
            };
            encoder.push(layer);
        }
        encoder.push(Conv1d::new(&mut ps, "enc.3", h, dim, 3, 1, 1)?);
        let decoder = vec![
            Conv1d::new(&mut ps, "dec.0", dim, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "dec.1", h, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "dec.2", h, h, 3, 1, 1)?,
            Conv1d::new(&mut ps, "dec.3", h, width, 3, 1, 1)?,
        ];
        let codebook = ps.init("codebook", &[config.codebook_size, dim], Init::Normal(1.0))?;
        let kinematics = PartKinematics::new(&ProxySkeleton::neutral(), config.part)?;
        let rest_offset = Tensor::new(rest_row(config.part).as_slice(), &Device::Cpu)?
            .to_dtype(dtype)?
            .reshape((1, 1, width))?;
        Ok(Self {
            usage: vec![0; config.codebook_size],
            config,
            params: ps,
            net: Network {
                encoder,
                decoder,
                up_stages: strided,
            },
            codebook,
            kinematics,
            rest_offset,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn part(&self) -> Part {
        self.config.part
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn kinematics(&self) -> Option<&PartKinematics> {
        self.kinematics.as_ref()
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let entries = to_array2(&self.codebook)?;
        Ok(Codebook {
            entries,
            usage_counts: self.usage.clone(),
        })
    }

    pub(crate) fn set_codebook_rows(&self, rows: &[(usize, Vec<f32>)]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut data = to_array2(&self.codebook)?;
        for (k, v) in rows {
            data.row_mut(*k)
                .assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        let var = self.params.get("codebook").expect("codebook parameter");
        var.set(&from_array2(&data, self.dtype())?)?;
        Ok(())
    }

    pub(crate) fn set_usage(&mut self, usage: Vec<u64>) {
        self.usage = usage;
    }

    pub fn steps_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.downsample)
    }

    fn check_input(&self, frames: usize, width: usize) -> Result<()> {
        let part = self.config.part;
        if width != part.width() {
            return Err(Error::shape(
                format!("{} columns for {part}", part.width()),
                width,
            ));
        }
        if frames < self.config.downsample {
            return Err(Error::TooShort {
                frames,
                needed: self.config.downsample,
            });
        }
        Ok(())
    }

    /// `(B, T, D)` → `(B, ceil(T/ds), dim)`. The clip is padded by repeating
    /// its last frame up to a multiple of the downsampling factor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, w) = x.dims3()?;
        self.check_input(t, w)?;
        let ds = self.config.downsample;
        let padded = t.div_ceil(ds) * ds;
        let mut x = x.broadcast_sub(&self.rest_offset)?;
        if padded > t {
            let last = x.narrow(1, t - 1, 1)?;
            let mut pieces = vec![x];
            for _ in t..padded {
                pieces.push(last.clone());
            }
            x = Tensor::cat(&pieces, 1)?;
        }
        let mut h = x.transpose(1, 2)?.contiguous()?;
        let last = self.net.encoder.len() - 1;
        for (i, layer) in self.net.encoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h.transpose(1, 2)?.contiguous()?)
    }

    /// `(B, S, dim)` quantized latents → `(B, S·ds, D)`.
    pub fn decode_tensor(&self, q: &Tensor) -> Result<Tensor> {
        let mut h = q.transpose(1, 2)?.contiguous()?;
        let last = self.net.decoder.len() - 1;
        for (i, layer) in self.net.decoder.iter().enumerate() {
            if i >= 1 && i <= self.net.up_stages {
                h = nn::upsample2(&h)?;
            }
            h = layer.forward(&h)?;
            if i < last {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h.transpose(1, 2)?.broadcast_add(&self.rest_offset)?)
    }

    /// Nearest-entry indices for a `(B, S, dim)` latent tensor, row-major.
    pub(crate) fn assign(&self, z: &Tensor) -> Result<Vec<usize>> {
        let dim = self.config.latent_dim;
        let flat = z.reshape(((), dim))?;
        let zs = to_array2(&flat)?;
        let entries = to_array2(&self.codebook)?;
        Ok(zs
            .rows()
            .into_iter()
            .map(|r| codebook::nearest(entries.view(), r))
            .collect())
    }

    pub(crate) fn lookup(&self, indices: &[usize], batch: usize) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), &Device::Cpu)?;
        let q = self.codebook.index_select(&idx, 0)?;
        Ok(q.reshape((batch, indices.len() / batch, self.config.latent_dim))?)
    }

    pub fn encode(&self, part_seq: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        self.check_input(part_seq.nrows(), part_seq.ncols())?;
        let x = from_array2(&part_seq.to_owned(), self.dtype())?.unsqueeze(0)?;
        to_array2(&self.encode_tensor(&x)?.squeeze(0)?)
    }

    /// Motion stream → token indices.
    pub fn tokenize(&self, part_seq: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        let z = self.encode(part_seq)?;
        Ok(quantize(&self.codebook()?, z.view())?.0)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Array2<f32>> {
        let k = self.config.codebook_size;
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: k,
            });
        }
        if indices.is_empty() {
            return Ok(Array2::zeros((0, self.config.part.width())));
        }
        let q = self.lookup(indices, 1)?;
        to_array2(&self.decode_tensor(&q)?.squeeze(0)?)
    }

    /// Loss components for a batch: `g`, `g_hat` are `(B, T, D)`, `z`, `q`
    /// are `(B, S, dim)` with `q` the raw (non straight-through) codebook
    /// rows.
    pub fn loss_terms(
        &self,
        g: &Tensor,
        g_hat: &Tensor,
        z: &Tensor,
        q: &Tensor,
    ) -> Result<LossTerms> {
        loss_terms(&self.config, self.kinematics.as_ref(), g, g_hat, z, q)
    }

    /// Forward pass with straight-through quantization. Returns
    /// `(g_hat, z, q, indices)`.
    pub fn forward(&self, g: &Tensor) -> Result<(Tensor, Tensor, Tensor, Vec<usize>)> {
        let (b, t, _) = g.dims3()?;
        let z = self.encode_tensor(g)?;
        let indices = self.assign(&z)?;
        let q = self.lookup(&indices, b)?;
        let q_st = (&z + (&q - &z)?.detach())?;
        let g_hat = self.decode_tensor(&q_st)?.narrow(1, 0, t)?;
        Ok((g_hat, z, q, indices))
    }

    /// The seven-term objective for one clip given reconstructions and
    /// latents.
    pub fn vq_loss(
        &self,
        g: ArrayView2<'_, f32>,
        g_hat: ArrayView2<'_, f32>,
        z: ArrayView2<'_, f32>,
        q: ArrayView2<'_, f32>,
        skeleton: &ProxySkeleton,
    ) -> Result<VqLossReport> {
        let t = |a: ArrayView2<'_, f32>| -> Result<Tensor> {
            Ok(from_array2(&a.to_owned(), DType::F64)?.unsqueeze(0)?)
        };
        let kin = PartKinematics::new(skeleton, self.config.part)?;
        loss_terms(
            &self.config,
            kin.as_ref(),
            &t(g)?,
            &t(g_hat)?,
            &t(z)?,
            &t(q)?,
        )?
        .report()
    }

    /// Mean loss over clips, evaluated without gradients.
    pub fn evaluate(&self, clips: &[Array2<f32>]) -> Result<VqLossReport> {
        let mut acc = VqLossReport::default();
        if clips.is_empty() {
            return Ok(acc);
        }
        let w = 1.0 / clips.len() as f64;
        for c in clips {
            let g = from_array2(c, self.dtype())?.unsqueeze(0)?;
            let (g_hat, z, q, _) = self.forward(&g)?;
            let terms = self.loss_terms(&g, &g_hat.detach(), &z.detach(), &q.detach())?;
            acc.accumulate(&terms.report()?, w);
        }
        Ok(acc)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = self.params.snapshot();
        let usage: Vec<f32> = self.usage.iter().map(|&u| u as f32).collect();
        tensors.insert(
            "codebook.usage".into(),
            Tensor::new(usage.as_slice(), &Device::Cpu)?,
        );
        store::save(dir, &self.config, &tensors, None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loaded: store::Loaded<CodecConfig> = store::load(dir, DType::F32)?;
        let mut tensors: BTreeMap<String, Tensor> = loaded.tensors;
        let usage = tensors
            .remove("codebook.usage")
            .ok_or_else(|| Error::CorruptCheckpoint("missing codebook.usage".into()))?;
        let mut codec = PartCodec::new(loaded.config, DType::F32)?;
        codec.params.load(&tensors)?;
        codec.usage = usage
            .to_vec1::<f32>()?
            .into_iter()
            .map(|u| u as u64)
            .collect();
        Ok(codec)
    }
}

fn loss_terms(
    config: &CodecConfig,
    kinematics: Option<&PartKinematics>,
    g: &Tensor,
    g_hat: &Tensor,
    z: &Tensor,
    q: &Tensor,
) -> Result<LossTerms> {
    if g.dims() != g_hat.dims() {
        return Err(Error::shape(
            format!("{:?}", g.dims()),
            format!("{:?}", g_hat.dims()),
        ));
    }
    if z.dims() != q.dims() {
        return Err(Error::shape(
            format!("{:?}", z.dims()),
            format!("{:?}", q.dims()),
        ));
    }
    let (b, t, w) = g.dims3()?;
    let part = config.part;
    if w != part.width() {
        return Err(Error::shape(
            format!("{} columns for {part}", part.width()),
            w,
        ));
    }
    let fps = config.fps as f64;
    let wt = &config.weights;
    let zero = Tensor::zeros((), g.dtype(), g.device())?;
    let scale = |x: Tensor, w: f64| -> Result<Tensor> { Ok((x * w)?) };

    let rotations = match kinematics {
        None => None,
        Some(_) => {
            let j = part.joints();
            let rg = geometry::rot6d_to_matrix(&g.reshape((b * t, j, 6))?)?;
            let rh = geometry::rot6d_to_matrix(&g_hat.reshape((b * t, j, 6))?)?;
            Some((rg, rh))
        }
    };
    let rec = match &rotations {
        None => nn::mse(g, g_hat)?,
        Some((rg, rh)) => {
            let chord = (rg - rh)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
            nn::angle_from_chord(&chord)?.mean_all()?
        }
    };
    let (vel, acc) = derivative_terms(g, g_hat, t, fps, &zero)?;
    let (mrec, mvel, macc) = match (kinematics, &rotations) {
        (Some(kin), Some((rg, rh))) => {
            let mg = kin.markers(rg)?.reshape((b, t, ()))?;
            let mh = kin.markers(rh)?.reshape((b, t, ()))?;
            // mean squared Euclidean distance per marker
            let mrec = (nn::mse(&mg, &mh)? * 3.0)?;
            let (mvel, macc) = derivative_terms(&mg, &mh, t, fps, &zero)?;
            (mrec, mvel, macc)
        }
        _ => (zero.clone(), zero.clone(), zero.clone()),
    };
    let comm = ((nn::mse(z, &q.detach())? * config.commitment)? + nn::mse(&z.detach(), q)?)?;
    Ok(LossTerms {
        rec: scale(rec, wt.rec)?,
        vel: scale(vel, wt.vel)?,
        acc: scale(acc, wt.acc)?,
        mrec: scale(mrec, wt.mrec)?,
        mvel: scale(mvel, wt.mvel)?,
        macc: scale(macc, wt.macc)?,
        comm: scale(comm, wt.comm)?,
    })
}

/// ℓ1 on first and second fps-scaled differences along time.
fn derivative_terms(
    a: &Tensor,
    b: &Tensor,
    t: usize,
    fps: f64,
    zero: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if t < 2 {
        return Ok((zero.clone(), zero.clone()));
    }
    let (da, db) = (diff(a, fps)?, diff(b, fps)?);
    let vel = nn::l1(&da, &db)?;
    let acc = if t >= 3 {
        nn::l1(&diff(&da, fps)?, &diff(&db, fps)?)?
    } else {
        zero.clone()
    };
    Ok((vel, acc))
}

fn diff(x: &Tensor, fps: f64) -> Result<Tensor> {
    let t = x.dim(1)?;
    Ok(((x.narrow(1, 1, t - 1)? - x.narrow(1, 0, t - 1)?)? * fps)?)
}

pub(crate) fn to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("dims2 shape"))
}

pub(crate) fn from_array2(a: &Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (r, c) = a.dim();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests;
