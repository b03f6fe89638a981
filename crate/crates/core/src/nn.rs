//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! sets, convolution and linear layers, an AdamW optimizer with serializable
//! state, and a rotation-angle op with a backward pass.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr_free::normal;

use crate::error::{Error, Result};

mod rand_distr_free {
    use rand::Rng;

    /// Box–Muller standard normal.
    pub fn normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

/// Named trainable parameters in deterministic (sorted) order.
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamSet {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => (0..n).map(|_| normal(&mut self.rng) * std).collect(),
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// 1D convolution over `(batch, channels, time)`.
#[derive(Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.init(
                &format!("{name}.weight"),
                &[c_out, c_in, kernel],
                Init::Uniform(bound),
            )?,
            bias: ps.init(&format!("{name}.bias"), &[c_out], Init::Uniform(bound))?,
            stride,
            padding,
        })
    }

    /// `(B, C_in, T)` → `(B, C_out, L)` with `L = (T + 2p − k)/s + 1`.
    /// Built from im2col and a matmul; the built-in convolution's weight
    /// gradient is wrong for batches larger than one.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, k) = self.weight.dims3()?;
        let (b, _, t) = x.dims3()?;
        let (s, p) = (self.stride, self.padding);
        if t + 2 * p < k {
            return Err(Error::TooShort { frames: t, needed: k.saturating_sub(2 * p) });
        }
        let l = (t + 2 * p - k) / s + 1;
        let x = x.pad_with_zeros(2, p, p + s)?;
        let taps: Vec<Tensor> = (0..k)
            .map(|j| {
                let w = x.narrow(2, j, s * l)?;
                if s == 1 {
                    Ok(w)
                } else {
                    w.reshape((b, c_in, l, s))?.narrow(3, 0, 1)?.squeeze(3)
                }
            })
            .collect::<candle_core::Result<_>>()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((b, c_in * k, l))?;
        let w = self.weight.reshape((c_out, c_in * k))?;
        let y = w.broadcast_matmul(&cols)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Dense layer applied over the last dimension.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.init(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Uniform(bound),
        )?;
        let bias = if bias {
            Some(ps.init(&format!("{name}.bias"), &[d_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn with_std(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = ps.init(&format!("{name}.weight"), &[d_out, d_in], Init::Normal(std))?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Nearest-neighbour ×2 upsampling along time, built from broadcast ops so
/// it stays differentiable.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    Ok(x.unsqueeze(3)?
        .broadcast_as((b, c, t, 2))?
        .reshape((b, c, 2 * t))?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Rotation angle from the squared Frobenius distance `d = ‖R₁ − R₂‖²`
/// between two rotation matrices: `θ = 2·asin(√(d/8))`, equal to
/// `arccos((tr(R₁ᵀR₂) − 1)/2)` but exact near zero. The gradient is zero at
/// `d = 0`, where it is unbounded.
struct ChordAngle;

fn chord_angle(d: f64) -> f64 {
    2.0 * (d.max(0.0) / 8.0).sqrt().min(1.0).asin()
}

impl CustomOp1 for ChordAngle {
    fn name(&self) -> &'static str {
        "chord-angle"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout.contiguous_offsets().ok_or_else(|| {
            candle_core::Error::Msg("chord-angle expects a contiguous tensor".into())
        })?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                v[start..end]
                    .iter()
                    .map(|&x| chord_angle(x as f64) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => {
                CpuStorage::F64(v[start..end].iter().map(|&x| chord_angle(x)).collect())
            }
            _ => candle_core::bail!("chord-angle supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        // dθ/dd = 1 / (8·s·√(1 − s²)) with s = √(d/8)
        let floor = if arg.dtype() == DType::F64 {
            1e-30
        } else {
            1e-20
        };
        let s2 = (arg / 8.0)?.clamp(0.0, 1.0)?;
        let prod = (&s2 * (1.0 - &s2)?)?;
        let inside = prod.gt(floor)?.to_dtype(arg.dtype())?;
        let denom = (prod.maximum(floor)?.sqrt()? * 8.0)?;
        Ok(Some(((grad_res / denom)? * inside)?))
    }
}

pub fn angle_from_chord(d: &Tensor) -> Result<Tensor> {
    Ok(d.contiguous()?.apply_op1(ChordAngle)?)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// AdamW with decoupled weight decay. Moment estimates are kept by parameter
/// name so they can be checkpointed.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    lr_scale: BTreeMap<String, f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        }
    }

    /// Multiplies the learning rate of one named parameter.
    pub fn with_lr_scale(mut self, name: &str, scale: f64) -> Self {
        self.lr_scale.insert(name.to_string(), scale);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &ParamSet, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        let mut sq = 0.0;
        let mut present = Vec::new();
        for (name, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
                present.push((name, var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::DivergedTraining {
                step: self.step as usize,
            });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var, g) in present {
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let p = var.as_tensor();
            let lr = c.lr * self.lr_scale.get(name.as_str()).copied().unwrap_or(1.0);
            let next = ((p * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("m/{k}"), m.clone());
            out.insert(format!("v/{k}"), v.clone());
        }
        out
    }

    pub fn restore(
        config: AdamWConfig,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (k, m) in tensors {
            if let Some(name) = k.strip_prefix("m/") {
                let v = tensors
                    .get(&format!("v/{name}"))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing v/{name}")))?;
                moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(Self {
            config,
            step,
            moments,
            lr_scale: BTreeMap::new(),
        })
    }
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamSet::new(7, DType::F32);
        let mut b = ParamSet::new(7, DType::F32);
        let ta = a.init("w", &[3, 4], Init::Normal(0.1)).unwrap();
        let tb = b.init("w", &[3, 4], Init::Normal(0.1)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(a.init("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn chord_angle_matches_arccos_and_has_correct_gradient() {
        let thetas = [0.3f64, 1.2, 2.9];
        let d: Vec<f64> = thetas.iter().map(|t| 4.0 * (1.0 - t.cos())).collect();
        let x = Var::new(d.as_slice(), &Device::Cpu).unwrap();
        let y = angle_from_chord(x.as_tensor()).unwrap();
        for (got, want) in y.to_vec1::<f64>().unwrap().iter().zip(thetas) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (di, gi) in d.iter().zip(gx) {
            let h = 1e-7;
            let fd = (chord_angle(di + h) - chord_angle(di - h)) / (2.0 * h);
            assert_abs_diff_eq!(gi, fd, epsilon = 1e-6);
        }
        let zero = Var::new(&[0.0f64], &Device::Cpu).unwrap();
        let y = angle_from_chord(zero.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(
            g.get(zero.as_tensor()).unwrap().to_vec1::<f64>().unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn adamw_reduces_a_quadratic() {
        let mut ps = ParamSet::new(0, DType::F64);
        let w = ps.init("w", &[4], Init::Ones).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..200 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            opt.step(&ps, &loss).unwrap();
        }
        let final_loss = scalar(&w.sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!(final_loss < 1e-2, "{final_loss}");
    }

    #[test]
    fn conv_matches_direct_sum_and_finite_differences() {
        let mut ps = ParamSet::new(4, DType::F64);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let conv = Conv1d::new(&mut ps, &format!("c{stride}{pad}{k}"), 3, 2, k, stride, pad).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 3, 6), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
            let xv = x.to_vec3::<f64>().unwrap();
            let w = conv.weight.to_vec3::<f64>().unwrap();
            let bias = conv.bias.to_vec1::<f64>().unwrap();
            let l = (6 + 2 * pad - k) / stride + 1;
            assert_eq!(y[0][0].len(), l);
            for bi in 0..2 {
                for o in 0..2 {
                    for t in 0..l {
                        let mut acc = bias[o];
                        for c in 0..3 {
                            for j in 0..k {
                                let src = (t * stride + j) as i64 - pad as i64;
                                if (0..6).contains(&src) {
                                    acc += w[o][c][j] * xv[bi][c][src as usize];
                                }
                            }
                        }
                        assert_abs_diff_eq!(y[bi][o][t], acc, epsilon = 1e-12);
                    }
                }
            }
            // weight gradient of a weighted sum, batch of two
            let r = Tensor::randn(0f64, 1.0, (2, 2, l), &Device::Cpu).unwrap();
            let grads = conv.forward(&x).unwrap().mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
            let gw = grads.get(&conv.weight).unwrap().to_vec3::<f64>().unwrap();
            let rv = r.to_vec3::<f64>().unwrap();
            for o in 0..2 {
                for c in 0..3 {
                    for j in 0..k {
                        let mut want = 0.0;
                        for bi in 0..2 {
                            for t in 0..l {
                                let src = (t * stride + j) as i64 - pad as i64;
                                if (0..6).contains(&src) {
                                    want += rv[bi][o][t] * xv[bi][c][src as usize];
                                }
                            }
                        }
                        assert_abs_diff_eq!(gw[o][c][j], want, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_frames() {
        let x = Tensor::new(&[[[1f32, 2., 3.]]], &Device::Cpu).unwrap();
        let y = upsample2(&x).unwrap();
        assert_eq!(
            y.to_vec3::<f32>().unwrap(),
            vec![vec![vec![1., 1., 2., 2., 3., 3.]]]
        );
    }
}
