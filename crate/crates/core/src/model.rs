//! Encoder–decoder transformer over the unified vocabulary with a shared
//! input/output embedding and bucketed relative position bias.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AdamW, AdamWConfig, Init, Linear, ParamSet};
use crate::store;
use crate::tasks::TaskSample;
use crate::text::{EOS, PAD};
use crate::vocab::{Modality, UnifiedVocab};

const NEG_INF: f64 = -1e9;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub relative_buckets: usize,
    pub relative_max_distance: usize,
    pub max_input: usize,
    pub max_output: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            encoder_layers: 4,
            decoder_layers: 4,
            width: 256,
            heads: 4,
            ff_width: 1024,
            relative_buckets: 32,
            relative_max_distance: 128,
            max_input: 512,
            max_output: 512,
        }
    }

    /// Small enough to train in minutes on one CPU core.
    pub fn reduced(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            width: 96,
            heads: 4,
            ff_width: 192,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.ff_width == 0 || self.relative_buckets < 4 || self.relative_max_distance < self.relative_buckets / 2 {
            return bad("ff_width and relative position settings must be positive".into());
        }
        if self.max_input == 0 || self.max_output < 2 {
            return bad("max_input must be positive and max_output at least 2".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.width, self.ff_width, self.vocab_size);
        let enc_layer = 4 * d * d + 2 * d * f + 2 * d;
        let dec_layer = 8 * d * d + 2 * d * f + 3 * d;
        v * d + self.encoder_layers * enc_layer + self.decoder_layers * dec_layer + 2 * d + 2 * self.relative_buckets * self.heads
    }
}

/// T5 bucketing of `key − query` offsets: exact for small offsets,
/// logarithmic up to `max_distance`.
pub fn relative_bucket(offset: i64, bidirectional: bool, buckets: usize, max_distance: usize) -> u32 {
    let mut n = buckets as i64;
    let mut base = 0;
    let r = if bidirectional {
        n /= 2;
        if offset > 0 {
            base = n;
        }
        offset.abs()
    } else {
        (-offset).max(0)
    };
    let exact = n / 2;
    let v = if r < exact {
        r
    } else {
        let scaled = (r as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln() * (n - exact) as f64;
        (exact + scaled as i64).min(n - 1)
    };
    (base + v) as u32
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            q: Linear::with_std(ps, &format!("{name}.q"), d, d, std)?,
            k: Linear::with_std(ps, &format!("{name}.k"), d, d, std)?,
            v: Linear::with_std(ps, &format!("{name}.v"), d, d, std)?,
            o: Linear::with_std(ps, &format!("{name}.o"), d, d, std)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `additive` broadcasts to `(B, H, Tq, Tk)`.
    fn forward(&self, xq: &Tensor, xkv: &Tensor, additive: &Tensor) -> Result<Tensor> {
        let (b, tq, d) = xq.dims3()?;
        let q = self.split(&self.q.forward(xq)?)?;
        let k = self.split(&self.k.forward(xkv)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(additive)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }
}

struct FeedForward {
    wi: Linear,
    wo: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamSet, name: &str, d: usize, f: usize) -> Result<Self> {
        Ok(Self {
            wi: Linear::with_std(ps, &format!("{name}.wi"), d, f, 1.0 / (d as f64).sqrt())?,
            wo: Linear::with_std(ps, &format!("{name}.wo"), f, d, 1.0 / (f as f64).sqrt())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.wo.forward(&self.wi.forward(x)?.relu()?)
    }
}

fn rms_norm(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + NORM_EPS)?.sqrt()?)?.broadcast_mul(w)?)
}

struct EncoderLayer {
    norm1: Tensor,
    attn: Attention,
    norm2: Tensor,
    ff: FeedForward,
}

struct DecoderLayer {
    norm1: Tensor,
    self_attn: Attention,
    norm2: Tensor,
    cross: Attention,
    norm3: Tensor,
    ff: FeedForward,
}

/// Padded training batch.
pub struct Batch {
    input: Tensor,
    input_mask: Tensor,
    decoder_input: Tensor,
    target: Tensor,
    weight: Tensor,
    pub tokens: usize,
}

pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamSet,
    embed: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_bias: Tensor,
    encoder_norm: Tensor,
    decoder: Vec<DecoderLayer>,
    decoder_bias: Tensor,
    decoder_norm: Tensor,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new(seed, dtype);
        let (d, h, f) = (config.width, config.heads, config.ff_width);
        let embed = ps.init("shared.embed", &[config.vocab_size, d], Init::Normal(1.0))?;
        let mut encoder = vec![];
        for i in 0..config.encoder_layers {
            let n = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm1: ps.init(&format!("{n}.norm1"), &[d], Init::Ones)?,
                attn: Attention::new(&mut ps, &format!("{n}.attn"), d, h)?,
                norm2: ps.init(&format!("{n}.norm2"), &[d], Init::Ones)?,
                ff: FeedForward::new(&mut ps, &format!("{n}.ff"), d, f)?,
            });
        }
        let encoder_bias = ps.init("encoder.relative_bias", &[config.relative_buckets, h], Init::Normal(0.1))?;
        let encoder_norm = ps.init("encoder.norm", &[d], Init::Ones)?;
        let mut decoder = vec![];
        for i in 0..config.decoder_layers {
            let n = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm1: ps.init(&format!("{n}.norm1"), &[d], Init::Ones)?,
                self_attn: Attention::new(&mut ps, &format!("{n}.self_attn"), d, h)?,
                norm2: ps.init(&format!("{n}.norm2"), &[d], Init::Ones)?,
                cross: Attention::new(&mut ps, &format!("{n}.cross"), d, h)?,
                norm3: ps.init(&format!("{n}.norm3"), &[d], Init::Ones)?,
                ff: FeedForward::new(&mut ps, &format!("{n}.ff"), d, f)?,
            });
        }
        let decoder_bias = ps.init("decoder.relative_bias", &[config.relative_buckets, h], Init::Normal(0.1))?;
        let decoder_norm = ps.init("decoder.norm", &[d], Init::Ones)?;
        Ok(Self {
            config,
            params: ps,
            embed,
            encoder,
            encoder_bias,
            encoder_norm,
            decoder,
            decoder_bias,
            decoder_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Zeroes the decoder's final norm so every position predicts the
    /// uniform distribution.
    pub fn force_uniform(&self) -> Result<()> {
        let var = self.params.get("decoder.norm").expect("decoder norm exists");
        var.set(&var.as_tensor().zeros_like()?)?;
        Ok(())
    }

    fn position_bias(&self, table: &Tensor, tq: usize, tk: usize, bidirectional: bool) -> Result<Tensor> {
        let idx: Vec<u32> = (0..tq)
            .flat_map(|q| {
                (0..tk).map(move |k| {
                    relative_bucket(k as i64 - q as i64, bidirectional, self.config.relative_buckets, self.config.relative_max_distance)
                })
            })
            .collect();
        let idx = Tensor::from_vec(idx, tq * tk, &Device::Cpu)?;
        Ok(table.index_select(&idx, 0)?.reshape((tq, tk, self.config.heads))?.permute((2, 0, 1))?.unsqueeze(0)?)
    }

    fn lookup(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self.embed.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, self.config.width))?)
    }

    fn encode(&self, input: &Tensor, input_mask: &Tensor) -> Result<Tensor> {
        let t = input.dim(1)?;
        let additive = self.position_bias(&self.encoder_bias, t, t, true)?.broadcast_add(input_mask)?;
        let mut x = self.lookup(input)?;
        for l in &self.encoder {
            let h = rms_norm(&x, &l.norm1)?;
            x = (x + l.attn.forward(&h, &h, &additive)?)?;
            x = (&x + l.ff.forward(&rms_norm(&x, &l.norm2)?)?)?;
        }
        rms_norm(&x, &self.encoder_norm)
    }

    fn decode(&self, memory: &Tensor, input_mask: &Tensor, decoder_input: &Tensor) -> Result<Tensor> {
        let t = decoder_input.dim(1)?;
        let causal: Vec<f64> = (0..t).flat_map(|q| (0..t).map(move |k| if k > q { NEG_INF } else { 0.0 })).collect();
        let causal = Tensor::from_vec(causal, (1, 1, t, t), &Device::Cpu)?.to_dtype(self.dtype())?;
        let additive = self.position_bias(&self.decoder_bias, t, t, false)?.broadcast_add(&causal)?;
        let mut x = self.lookup(decoder_input)?;
        for l in &self.decoder {
            let h = rms_norm(&x, &l.norm1)?;
            x = (x + l.self_attn.forward(&h, &h, &additive)?)?;
            x = (&x + l.cross.forward(&rms_norm(&x, &l.norm2)?, memory, input_mask)?)?;
            x = (&x + l.ff.forward(&rms_norm(&x, &l.norm3)?)?)?;
        }
        let h = rms_norm(&x, &self.decoder_norm)?;
        let scale = 1.0 / (self.config.width as f64).sqrt();
        Ok((h.broadcast_matmul(&self.embed.t()?)? * scale)?)
    }

    fn check_pair(&self, input: &[u32], answer: &[u32]) -> Result<()> {
        if input.len() > self.config.max_input {
            return Err(Error::SequenceTooLong { len: input.len(), max: self.config.max_input });
        }
        if answer.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if answer.len() + 1 > self.config.max_output {
            return Err(Error::SequenceTooLong { len: answer.len() + 1, max: self.config.max_output });
        }
        let v = self.config.vocab_size as u32;
        if let Some(&id) = input.iter().chain(answer).find(|&&id| id >= v) {
            return Err(Error::UnknownId(id));
        }
        Ok(())
    }

    fn input_tensors(&self, inputs: &[&[u32]]) -> Result<(Tensor, Tensor)> {
        let b = inputs.len();
        let s = inputs.iter().map(|x| x.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; b * s];
        let mut mask = vec![NEG_INF; b * s];
        for (i, x) in inputs.iter().enumerate() {
            ids[i * s..i * s + x.len()].copy_from_slice(x);
            mask[i * s..i * s + x.len()].iter_mut().for_each(|m| *m = 0.0);
            if x.is_empty() {
                // an empty input still needs one visible key
                mask[i * s] = 0.0;
            }
        }
        Ok((
            Tensor::from_vec(ids, (b, s), &Device::Cpu)?,
            Tensor::from_vec(mask, (b, 1, 1, s), &Device::Cpu)?.to_dtype(self.dtype())?,
        ))
    }

    /// Pads inputs and teacher-forcing targets (answer followed by EOS).
    pub fn batch(&self, pairs: &[(&[u32], &[u32])]) -> Result<Batch> {
        for (i, a) in pairs {
            self.check_pair(i, a)?;
        }
        let inputs: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
        let (input, input_mask) = self.input_tensors(&inputs)?;
        let b = pairs.len();
        let t = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut dec = vec![PAD; b * t];
        let mut tgt = vec![PAD; b * t];
        let mut w = vec![0.0f64; b * t];
        let mut tokens = 0;
        for (i, (_, a)) in pairs.iter().enumerate() {
            dec[i * t + 1..i * t + 1 + a.len()].copy_from_slice(a);
            tgt[i * t..i * t + a.len()].copy_from_slice(a);
            tgt[i * t + a.len()] = EOS;
            w[i * t..i * t + a.len() + 1].iter_mut().for_each(|x| *x = 1.0);
            tokens += a.len() + 1;
        }
        Ok(Batch {
            input,
            input_mask,
            decoder_input: Tensor::from_vec(dec, (b, t), &Device::Cpu)?,
            target: Tensor::from_vec(tgt, (b, t), &Device::Cpu)?,
            weight: Tensor::from_vec(w, (b, t), &Device::Cpu)?.to_dtype(self.dtype())?,
            tokens,
        })
    }

    /// Teacher-forced logits `(B, T, V)`.
    pub fn batch_logits(&self, batch: &Batch) -> Result<Tensor> {
        let memory = self.encode(&batch.input, &batch.input_mask)?;
        self.decode(&memory, &batch.input_mask, &batch.decoder_input)
    }

    /// Mean token negative log-likelihood, optionally label-smoothed.
    pub fn batch_loss(&self, batch: &Batch, label_smoothing: f64) -> Result<Tensor> {
        let logp = nn::log_softmax(&self.batch_logits(batch)?)?;
        let picked = logp.gather(&batch.target.unsqueeze(2)?, 2)?.squeeze(2)?;
        let mut per_token = picked.neg()?;
        if label_smoothing > 0.0 {
            let uniform = logp.mean(D::Minus1)?.neg()?;
            per_token = ((per_token * (1.0 - label_smoothing))? + (uniform * label_smoothing)?)?;
        }
        Ok(((per_token * &batch.weight)?.sum_all()? / batch.tokens as f64)?)
    }

    /// `−mean log p(answer, EOS | input)` under teacher forcing.
    pub fn nll_loss(&self, input: &[u32], answer: &[u32]) -> Result<f64> {
        let batch = self.batch(&[(input, answer)])?;
        nn::scalar(&self.batch_loss(&batch, 0.0)?)
    }

    /// Teacher-forced logits `(T, V)` for one pair: row k predicts target
    /// token k given `answer[..k]`.
    pub fn logits(&self, input: &[u32], answer: &[u32]) -> Result<Tensor> {
        let batch = self.batch(&[(input, answer)])?;
        Ok(self.batch_logits(&batch)?.i(0)?)
    }

    /// Token-weighted mean loss over `samples`, in batches.
    pub fn eval_loss(&self, samples: &[TaskSample], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        let inputs: Vec<Vec<u32>> = samples.iter().map(TaskSample::input).collect();
        for (chunk, ins) in samples.chunks(batch_size.max(1)).zip(inputs.chunks(batch_size.max(1))) {
            let pairs: Vec<(&[u32], &[u32])> = chunk.iter().zip(ins).map(|(s, i)| (i.as_slice(), s.answer.as_slice())).collect();
            let batch = self.batch(&pairs)?;
            total += nn::scalar(&self.batch_loss(&batch, 0.0)?)? * batch.tokens as f64;
            tokens += batch.tokens;
        }
        if tokens == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(total / tokens as f64)
    }

    /// Autoregressive decoding; the returned ids exclude the final EOS.
    pub fn generate<R: Rng>(&self, input: &[u32], cfg: &DecodeConfig, rng: &mut R) -> Result<Vec<u32>> {
        if input.len() > self.config.max_input {
            return Err(Error::SequenceTooLong { len: input.len(), max: self.config.max_input });
        }
        if let Some(&id) = input.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::UnknownId(id));
        }
        if let Some(c) = &cfg.constraint {
            if c.allowed.len() != self.config.vocab_size {
                return Err(Error::DimensionMismatch(c.allowed.len(), self.config.vocab_size));
            }
        }
        let (ids, mask) = self.input_tensors(&[input])?;
        let memory = self.encode(&ids, &mask)?;
        let max_len = cfg.max_len.min(self.config.max_output - 1);
        let mut out: Vec<u32> = vec![];
        while out.len() < max_len {
            let prefix: Vec<u32> = std::iter::once(PAD).chain(out.iter().copied()).collect();
            let dec = Tensor::from_vec(prefix.clone(), (1, prefix.len()), &Device::Cpu)?;
            let logits = self.decode(&memory, &mask, &dec)?.i((0, prefix.len() - 1))?;
            let mut row: Vec<f64> = logits.to_dtype(DType::F64)?.to_vec1()?;
            if let Some(c) = &cfg.constraint {
                for (x, ok) in row.iter_mut().zip(&c.allowed) {
                    if !ok {
                        *x = f64::NEG_INFINITY;
                    }
                }
            }
            let next = match cfg.mode {
                DecodeMode::Sample if cfg.temperature > 0.0 => sample_row(&row, cfg.temperature, rng),
                _ => argmax(&row),
            };
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, vocab_hash: &str) -> Result<()> {
        self.save_with(dir, vocab_hash, 0, None)
    }

    fn save_with(&self, dir: &Path, vocab_hash: &str, step: u64, opt: Option<(&AdamW, &TrainConfig)>) -> Result<()> {
        let mut tensors = self.params.snapshot();
        let mut info = CheckpointInfo {
            model: self.config.clone(),
            step,
            train: None,
        };
        if let Some((opt, train)) = opt {
            info.train = Some(train.clone());
            for (k, t) in opt.state_tensors() {
                tensors.insert(format!("opt/{k}"), t);
            }
        }
        store::save(dir, &info, &tensors, Some(vocab_hash))
    }

    /// Loads a checkpoint, refusing one built against another vocabulary.
    pub fn load(dir: &Path, vocab_hash: &str) -> Result<Self> {
        Ok(Self::load_full(dir, vocab_hash, DType::F32)?.0)
    }

    fn load_full(dir: &Path, vocab_hash: &str, dtype: DType) -> Result<(Self, CheckpointInfo, BTreeMap<String, Tensor>)> {
        let loaded = store::load::<CheckpointInfo>(dir, dtype)?;
        store::check_vocab_hash(vocab_hash, loaded.manifest.vocab_hash.as_deref())?;
        let model = Self::new(loaded.config.model.clone(), 0, dtype).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let (mut params, mut opt) = (BTreeMap::new(), BTreeMap::new());
        for (k, t) in loaded.tensors {
            match k.strip_prefix("opt/") {
                Some(rest) => opt.insert(rest.to_string(), t),
                None => params.insert(k, t),
            };
        }
        model.params.load(&params)?;
        Ok((model, loaded.config, opt))
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_row<R: Rng>(row: &[f64], temperature: f64, rng: &mut R) -> u32 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i as u32;
        }
        u -= x;
    }
    argmax(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Ids the decoder may emit.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub allowed: Vec<bool>,
}

impl Constraint {
    /// The given segments plus every boundary special and EOS.
    pub fn segments(vocab: &UnifiedVocab, modalities: &[Modality]) -> Self {
        let mut allowed = vec![false; vocab.total_size()];
        for &m in modalities {
            let s = vocab.segment(m);
            allowed[s.offset as usize..(s.offset + s.size) as usize].iter_mut().for_each(|a| *a = true);
        }
        allowed[vocab.specials_offset() as usize..].iter_mut().for_each(|a| *a = true);
        allowed[EOS as usize] = true;
        Self { allowed }
    }

    pub fn permits(&self, id: u32) -> bool {
        self.allowed.get(id as usize).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_len: usize,
    pub constraint: Option<Constraint>,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_len,
            constraint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            warmup_steps: 0,
            clip_norm: Some(1.0),
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointInfo {
    model: ModelConfig,
    step: u64,
    train: Option<TrainConfig>,
}

/// Where a training run writes and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    pub vocab_hash: String,
    /// CSV of step, loss, lr, tokens/s.
    pub log: Option<PathBuf>,
    /// Checkpoint written here every `checkpoint_every` steps and at the end.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    /// Stop after this many total steps.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub step_loss: Vec<f64>,
    /// Mean step loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
}

/// Full-parameter AdamW training on teacher-forced next-token loss. Batch
/// order depends only on (seed, epoch), so a resumed run continues exactly
/// where the interrupted one stopped.
pub struct Trainer {
    pub config: TrainConfig,
    opt: AdamW,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
            ..Default::default()
        });
        Self { config, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.steps()
    }

    /// Restores model and optimizer state from a training checkpoint.
    pub fn resume(dir: &Path, vocab_hash: &str) -> Result<(Seq2Seq, Self)> {
        let (model, info, opt) = Seq2Seq::load_full(dir, vocab_hash, DType::F32)?;
        let config = info.train.ok_or_else(|| Error::CorruptCheckpoint(format!("{} holds no optimizer state", dir.display())))?;
        let adam = AdamW::restore(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                clip_norm: config.clip_norm,
                ..Default::default()
            },
            info.step,
            &opt,
        )?;
        Ok((model, Self { config, opt: adam }))
    }

    pub fn save(&self, model: &Seq2Seq, dir: &Path, vocab_hash: &str) -> Result<()> {
        model.save_with(dir, vocab_hash, self.opt.steps(), Some((&self.opt, &self.config)))
    }

    fn order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch)));
        idx
    }

    pub fn train(&mut self, model: &Seq2Seq, samples: &[TaskSample], run: &TrainRun) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let v = model.config.vocab_size as u32;
        if let Some(id) = samples.iter().flat_map(|s| s.prompt.iter().chain(&s.condition).chain(&s.answer)).find(|&&id| id >= v) {
            return Err(Error::VocabHashMismatch {
                expected: run.vocab_hash.clone(),
                found: format!("corpus id {id} beyond vocabulary size {v}"),
            });
        }
        let inputs: Vec<Vec<u32>> = samples.iter().map(TaskSample::input).collect();
        for (s, i) in samples.iter().zip(&inputs) {
            model.check_pair(i, &s.answer)?;
        }
        let bs = self.config.batch_size.max(1);
        let per_epoch = samples.len().div_ceil(bs) as u64;
        let total = match run.max_steps {
            Some(m) => m.min(per_epoch * self.config.epochs as u64),
            None => per_epoch * self.config.epochs as u64,
        };
        let mut log = match &run.log {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let fresh = self.opt.steps() == 0 || !p.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
                if fresh {
                    writeln!(f, "step,loss,lr,tokens_per_s")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut report = TrainReport {
            steps: self.opt.steps(),
            step_loss: vec![],
            epoch_loss: vec![],
        };
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        while self.opt.steps() < total {
            let step = self.opt.steps();
            let epoch = step / per_epoch;
            let within = (step % per_epoch) as usize;
            let order = self.order(samples.len(), epoch);
            let chunk = &order[within * bs..((within + 1) * bs).min(order.len())];
            let pairs: Vec<(&[u32], &[u32])> = chunk.iter().map(|&i| (inputs[i].as_slice(), samples[i].answer.as_slice())).collect();
            let started = Instant::now();
            let batch = model.batch(&pairs)?;
            let loss = model.batch_loss(&batch, self.config.label_smoothing)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::DivergedTraining { step: step as usize });
            }
            let lr = self.config.lr_at(step);
            self.opt.config.lr = lr;
            self.opt.step(&model.params, &loss)?;
            let rate = batch.tokens as f64 / started.elapsed().as_secs_f64().max(1e-9);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{},{value},{lr},{rate:.1}", step + 1)?;
            }
            report.step_loss.push(value);
            epoch_sum += value;
            epoch_n += 1;
            if (step + 1) % per_epoch == 0 {
                report.epoch_loss.push(epoch_sum / epoch_n as f64);
                epoch_sum = 0.0;
                epoch_n = 0;
            }
            if let (Some(dir), Some(every)) = (&run.checkpoint_dir, run.checkpoint_every) {
                if every > 0 && (step + 1) % every == 0 {
                    self.save(model, dir, &run.vocab_hash)?;
                }
            }
        }
        if let Some(dir) = &run.checkpoint_dir {
            self.save(model, dir, &run.vocab_hash)?;
        }
        report.steps = self.opt.steps();
        Ok(report)
    }
}

/// Builds a model and trains it from scratch.
pub fn train_lm(model: &Seq2Seq, samples: &[TaskSample], config: &TrainConfig, run: &TrainRun) -> Result<TrainReport> {
    Trainer::new(config.clone()).train(model, samples, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            encoder_layers: 1,
            decoder_layers: 1,
            width: 8,
            heads: 2,
            ff_width: 12,
            relative_buckets: 8,
            relative_max_distance: 16,
            max_input: 32,
            max_output: 32,
        }
    }

    fn sample(prompt: Vec<u32>, answer: Vec<u32>) -> TaskSample {
        TaskSample {
            task: TaskKind::Spatial,
            prompt,
            condition: vec![],
            answer,
        }
    }

    #[test]
    fn config_validation_and_parameter_count() {
        let mut c = ModelConfig::new(1000);
        c.width = 255;
        assert!(matches!(Seq2Seq::new(c, 0, DType::F32), Err(Error::InvalidConfig(_))));
        for cfg in [tiny(40), ModelConfig::reduced(300)] {
            let m = Seq2Seq::new(cfg.clone(), 0, DType::F32).unwrap();
            assert_eq!(m.params().count(), cfg.parameter_count());
        }
        // 4+4 layers, width 256, ff 1024, 32 buckets, 4 heads, 5000 tokens
        assert_eq!(ModelConfig::new(5000).parameter_count(), 5000 * 256 + 4 * 786_944 + 4 * 1_049_344 + 512 + 256);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Seq2Seq::new(tiny(30), 5, DType::F32).unwrap();
        let b = Seq2Seq::new(tiny(30), 5, DType::F32).unwrap();
        for (x, y) in a.params().snapshot().values().zip(b.params().snapshot().values()) {
            assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn relative_buckets_match_reference_values() {
        // bidirectional, 32 buckets, max distance 128
        let b = |o| relative_bucket(o, true, 32, 128);
        assert_eq!([b(0), b(1), b(-1), b(7), b(8), b(-8), b(200)], [0, 17, 1, 23, 24, 8, 31]);
        let c = |o| relative_bucket(o, false, 32, 128);
        assert_eq!([c(3), c(0), c(-3), c(-16), c(-1000)], [0, 0, 3, 16, 31]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let m = Seq2Seq::new(tiny(37), 1, DType::F64).unwrap();
        m.force_uniform().unwrap();
        let loss = m.nll_loss(&[4, 5, 6], &[7, 8]).unwrap();
        assert_abs_diff_eq!(loss, (37f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn input_and_target_errors() {
        let m = Seq2Seq::new(tiny(20), 1, DType::F32).unwrap();
        assert!(matches!(m.nll_loss(&[1; 33], &[2]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.nll_loss(&[1], &[]), Err(Error::EmptyTarget)));
        assert!(matches!(m.generate(&[1; 40], &DecodeConfig::greedy(4), &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = Seq2Seq::new(tiny(16), 3, DType::F64).unwrap();
        let batch = m.batch(&[(&[4, 5, 6, 7][..], &[8, 9, 10][..]), (&[11, 12][..], &[13][..])]).unwrap();
        let loss = m.batch_loss(&batch, 0.0).unwrap();
        let grads = loss.backward().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        for var in m.params().vars().values() {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let shape = var.dims().to_vec();
            for i in 0..base.len() {
                if !rng.gen_bool(0.01) && !(i == 0 && shape.len() == 1) {
                    continue;
                }
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[i] += delta;
                    var.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                    nn::scalar(&m.batch_loss(&batch, 0.0).unwrap()).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-3, "param entry {i}: fd {fd} vs analytic {}", g[i]);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn decoder_never_sees_future_tokens() {
        let m = Seq2Seq::new(tiny(20), 2, DType::F64).unwrap();
        let a = m.logits(&[4, 5, 6], &[7, 8, 9, 10]).unwrap();
        let b = m.logits(&[4, 5, 6], &[7, 8, 15, 16]).unwrap();
        // rows 0..=2 condition on answer[..2] only
        let (a, b) = (a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        for k in 0..3 {
            for (x, y) in a[k].iter().zip(&b[k]) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        assert!(a[3].iter().zip(&b[3]).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn teacher_forced_loss_equals_stepwise_loss() {
        let m = Seq2Seq::new(tiny(20), 4, DType::F64).unwrap();
        let (input, answer) = ([4u32, 5, 6], [7u32, 8, 9]);
        let full = m.nll_loss(&input, &answer).unwrap();
        let target: Vec<u32> = answer.iter().copied().chain([EOS]).collect();
        let mut sum = 0.0;
        for k in 0..target.len() {
            // logits at step k from a prefix of length k
            let prefix = if k == 0 { vec![target[0]] } else { target[..k].to_vec() };
            let logits = m.logits(&input, &prefix).unwrap().to_vec2::<f64>().unwrap();
            let row = &logits[k.min(prefix.len())];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum += lse - row[target[k] as usize];
        }
        assert_abs_diff_eq!(full, sum / target.len() as f64, epsilon = 1e-9);
    }

    #[test]
    fn memorizes_one_pair_and_round_trips() {
        let cfg = ModelConfig {
            width: 32,
            heads: 4,
            ff_width: 64,
            ..tiny(40)
        };
        let m = Seq2Seq::new(cfg, 7, DType::F32).unwrap();
        let s = sample(vec![4, 9, 12, 30], vec![21, 22, 23, 5, 6]);
        let tc = TrainConfig {
            lr: 3e-3,
            epochs: 500,
            batch_size: 1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let report = train_lm(&m, &[s.clone()], &tc, &TrainRun::default()).unwrap();
        assert_eq!(report.steps, 500);
        let loss = m.nll_loss(&s.input(), &s.answer).unwrap();
        assert!(loss < 0.01, "loss {loss}");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.generate(&s.input(), &DecodeConfig::greedy(20), &mut rng).unwrap();
        assert_eq!(out, s.answer);
        let sampled = m
            .generate(&s.input(), &DecodeConfig { mode: DecodeMode::Sample, temperature: 0.0, ..DecodeConfig::greedy(20) }, &mut rng)
            .unwrap();
        assert_eq!(sampled, out);

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "h1").unwrap();
        let back = Seq2Seq::load(dir.path(), "h1").unwrap();
        assert_eq!(back.generate(&s.input(), &DecodeConfig::greedy(20), &mut rng).unwrap(), out);
        assert!(matches!(Seq2Seq::load(dir.path(), "h2"), Err(Error::VocabHashMismatch { .. })));
        let params = dir.path().join(store::PARAMS_FILE);
        let bytes = std::fs::read(&params).unwrap();
        std::fs::write(&params, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Seq2Seq::load(dir.path(), "h1"), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let samples: Vec<TaskSample> = (0..10).map(|i| sample(vec![4 + i, 5, 6], vec![10 + i, 11])).collect();
        let tc = TrainConfig {
            lr: 1e-2,
            epochs: 3,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let full = Seq2Seq::new(tiny(30), 1, DType::F32).unwrap();
        let straight = train_lm(&full, &samples, &tc, &TrainRun::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let part = Seq2Seq::new(tiny(30), 1, DType::F32).unwrap();
        let run = TrainRun {
            vocab_hash: "v".into(),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(4),
            log: Some(dir.path().join("log.csv")),
            ..Default::default()
        };
        train_lm(&part, &samples, &tc, &run).unwrap();
        let (resumed, mut trainer) = Trainer::resume(dir.path(), "v").unwrap();
        assert_eq!(trainer.step(), 4);
        let rest = trainer.train(&resumed, &samples, &TrainRun { max_steps: None, ..run.clone() }).unwrap();
        assert_abs_diff_eq!(rest.step_loss[0], straight.step_loss[4], epsilon = 1e-6);
        assert_eq!(rest.steps, straight.steps);
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + straight.steps as usize);
        assert!(log.starts_with("step,loss,lr,tokens_per_s"));

        let bad = vec![sample(vec![4, 99], vec![5])];
        assert!(matches!(train_lm(&full, &bad, &tc, &run), Err(Error::VocabHashMismatch { .. })));
    }

    #[test]
    fn constrained_decoding_stays_in_segment() {
        let vocab = UnifiedVocab::build([270, 8, 6, 6, 6, 6]).unwrap();
        let m = Seq2Seq::new(tiny(vocab.total_size()), 9, DType::F32).unwrap();
        let c = Constraint::segments(&vocab, &[Modality::Lower]);
        let cfg = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: 1.5,
            max_len: 12,
            constraint: Some(c.clone()),
        };
        proptest!(proptest::test_runner::Config::with_cases(32), |(seed in 0u64..1000)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input: Vec<u32> = (0..5).map(|_| rng.gen_range(0..vocab.total_size() as u32)).collect();
            for id in m.generate(&input, &cfg, &mut rng).unwrap() {
                prop_assert!(c.permits(id));
                prop_assert!(vocab.modality_of(id) == Some(Modality::Lower) || vocab.is_boundary(id));
            }
        });
    }
}
