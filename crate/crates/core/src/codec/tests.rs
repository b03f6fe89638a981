use super::*;
use candle_core::Var;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(part: Part, ds: usize, dtype: DType) -> PartCodec {
    let cfg = CodecConfig {
        codebook_size: 16,
        latent_dim: 8,
        hidden: 8,
        downsample: ds,
        ..CodecConfig::new(part)
    };
    PartCodec::new(cfg, dtype).unwrap()
}

fn rest_clip(part: Part, frames: usize) -> Array2<f32> {
    crate::motion::MotionSequence::rest(frames, 30)
        .part(part)
        .clone()
}

fn noisy_clip(part: Part, frames: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest_clip(part, frames).mapv(|v| v + rng.gen_range(-0.2f32..0.2))
}

#[test]
fn encode_length_and_errors() {
    let c = tiny(Part::Upper, 4, DType::F32);
    let x = rest_clip(Part::Upper, 32);
    let z = c.encode(x.view()).unwrap();
    assert_eq!(z.dim(), (8, 8));
    assert_eq!(z, c.encode(x.view()).unwrap());
    assert!(matches!(
        c.encode(rest_clip(Part::Upper, 2).view()),
        Err(Error::TooShort { .. })
    ));
    assert!(matches!(
        c.encode(rest_clip(Part::Lower, 8).view()),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn length_arithmetic_over_frames_and_strides() {
    for ds in [1, 2, 4] {
        let c = tiny(Part::Lower, ds, DType::F32);
        for frames in 4..=64 {
            let idx = c.tokenize(rest_clip(Part::Lower, frames).view()).unwrap();
            assert_eq!(idx.len(), frames.div_ceil(ds), "frames {frames} ds {ds}");
            let out = c.decode(&idx).unwrap();
            assert_eq!(out.dim(), (idx.len() * ds, Part::Lower.width()));
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn decode_rejects_out_of_range() {
    let c = tiny(Part::Face, 4, DType::F32);
    assert!(matches!(
        c.decode(&[0, 16]),
        Err(Error::IndexOutOfRange {
            index: 16,
            size: 16
        })
    ));
    assert_eq!(c.decode(&[1; 8]).unwrap().nrows(), 32);
}

#[test]
fn quantize_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let entries = Array2::from_shape_fn((64, 6), |_| rng.gen_range(-1.0f32..1.0));
    let cb = Codebook::new(entries.clone()).unwrap();
    let z = Array2::from_shape_fn((2000, 6), |_| rng.gen_range(-1.5f32..1.5));
    let (idx, q) = quantize(&cb, z.view()).unwrap();
    for (t, row) in z.rows().into_iter().enumerate() {
        let d: Vec<f64> = entries
            .rows()
            .into_iter()
            .map(|e| {
                e.iter()
                    .zip(row.iter())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum()
            })
            .collect();
        let best = (0..d.len()).fold(0, |b, k| if d[k] < d[b] { k } else { b });
        assert_eq!(idx[t], best);
        assert_eq!(q.row(t), entries.row(best));
    }
}

proptest! {
    #[test]
    fn quantize_is_optimal(seed in 0u64..10_000, k in 1usize..20, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(Array2::from_shape_fn((k, dim), |_| rng.gen_range(-2.0f32..2.0))).unwrap();
        let z = Array2::from_shape_fn((5, dim), |_| rng.gen_range(-2.0f32..2.0));
        let (_, q) = quantize(&cb, z.view()).unwrap();
        for (zr, qr) in z.rows().into_iter().zip(q.rows()) {
            let dq: f64 = zr.iter().zip(qr.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            for e in cb.entries.rows() {
                let de: f64 = zr.iter().zip(e.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                prop_assert!(dq <= de);
            }
        }
    }

    #[test]
    fn loss_components_are_non_negative_and_sum(seed in 0u64..1000) {
        let c = tiny(Part::Hands, 2, DType::F64);
        let g = noisy_clip(Part::Hands, 6, seed);
        let gh = noisy_clip(Part::Hands, 6, seed + 1);
        let z = noisy_clip(Part::Face, 3, seed).slice(ndarray::s![.., ..8]).to_owned();
        let q = noisy_clip(Part::Face, 3, seed + 2).slice(ndarray::s![.., ..8]).to_owned();
        let r = c.vq_loss(g.view(), gh.view(), z.view(), q.view(), &ProxySkeleton::neutral()).unwrap();
        for v in r.components() {
            prop_assert!(v >= 0.0);
        }
        prop_assert_eq!(r.total, r.components().iter().sum::<f64>());
    }
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    for part in Part::ALL {
        let c = tiny(part, 4, DType::F64);
        let g = noisy_clip(part, 8, 5);
        let z = Array2::from_elem((2, 8), 0.3f32);
        let r = c
            .vq_loss(
                g.view(),
                g.view(),
                z.view(),
                z.view(),
                &ProxySkeleton::neutral(),
            )
            .unwrap();
        for v in r.components() {
            assert!(v.abs() < 1e-9, "{part}: {r:?}");
        }
        assert!(r.total.abs() < 1e-9);
    }
}

#[test]
fn velocity_term_matches_hand_arithmetic() {
    // 3 frames; only the first lower-body joint moves in the reconstruction.
    let c = PartCodec::new(
        CodecConfig {
            weights: LossWeights::unit(),
            ..tiny(Part::Lower, 1, DType::F64).config().clone()
        },
        DType::F64,
    )
    .unwrap();
    let g = rest_clip(Part::Lower, 3);
    let mut gh = g.clone();
    let angles = [0.0f64, 0.2, 0.5];
    for (t, a) in angles.iter().enumerate() {
        let r6 = crate::motion::rotation::rot6d_from_axis_angle([0.0, 0.0, *a]);
        for k in 0..6 {
            gh[[t, k]] = r6[k] as f32;
        }
    }
    let z = Array2::<f32>::zeros((3, 8));
    let r = c
        .vq_loss(
            g.view(),
            gh.view(),
            z.view(),
            z.view(),
            &ProxySkeleton::neutral(),
        )
        .unwrap();
    let mut sum = 0.0;
    for t in 1..3 {
        for k in 0..6 {
            sum += (30.0 * ((gh[[t, k]] - gh[[t - 1, k]]) as f64)).abs();
        }
    }
    let expected = sum / (2.0 * 54.0);
    assert!((r.vel - expected).abs() < 1e-5, "{} vs {expected}", r.vel);
}

#[test]
fn straight_through_gradient_equals_quantized_gradient() {
    let c = tiny(Part::Upper, 2, DType::F64);
    let g = from_array2(&noisy_clip(Part::Upper, 8, 3), DType::F64)
        .unwrap()
        .unsqueeze(0)
        .unwrap();
    let z = Var::from_tensor(&c.encode_tensor(&g).unwrap()).unwrap();
    let idx = c.assign(z.as_tensor()).unwrap();
    let q = c.lookup(&idx, 1).unwrap().detach();
    let q_st = (z.as_tensor() + (&q - z.as_tensor()).unwrap().detach()).unwrap();
    let loss = |x: &Tensor| nn::mse(&c.decode_tensor(x).unwrap(), &g).unwrap();
    let gz = loss(&q_st)
        .backward()
        .unwrap()
        .get(z.as_tensor())
        .unwrap()
        .clone();
    let qv = Var::from_tensor(&q).unwrap();
    let gq = loss(qv.as_tensor())
        .backward()
        .unwrap()
        .get(qv.as_tensor())
        .unwrap()
        .clone();
    let a = gz.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let b = gq.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(a.iter().any(|v| v.abs() > 0.0));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let c = tiny(Part::Lower, 2, DType::F64);
    let g = from_array2(&noisy_clip(Part::Lower, 4, 8), DType::F64)
        .unwrap()
        .unsqueeze(0)
        .unwrap();
    let total = |c: &PartCodec| {
        let (gh, z, q, _) = c.forward(&g).unwrap();
        c.loss_terms(&g, &gh, &z, &q).unwrap().total().unwrap()
    };
    let grads = total(&c).backward().unwrap();
    let var = c.params().get("dec.2.weight").unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let base = var
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let h = 1e-6;
    for i in (0..base.len()).step_by(37) {
        let eval = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            var.set(&Tensor::from_vec(p, var.dims(), &Device::Cpu).unwrap())
                .unwrap();
            nn::scalar(&total(&c)).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap())
            .unwrap();
        let a = analytic[i];
        if a.abs() < 1e-8 && fd.abs() < 1e-8 {
            continue;
        }
        assert!(
            (a - fd).abs() / a.abs().max(fd.abs()) < 1e-3,
            "coord {i}: {a} vs {fd}"
        );
    }
}

#[test]
fn checkpoint_round_trip() {
    let c = tiny(Part::Hands, 4, DType::F32);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let back = PartCodec::load(dir.path()).unwrap();
    assert_eq!(back.config(), c.config());
    let x = noisy_clip(Part::Hands, 12, 2);
    assert_eq!(
        back.tokenize(x.view()).unwrap(),
        c.tokenize(x.view()).unwrap()
    );
}

#[test]
fn identical_clips_are_memorized() {
    let mut m = crate::motion::MotionSequence::rest(16, 30);
    let smooth = Array2::from_shape_fn((16, Part::Upper.width()), |(t, k)| {
        0.3 * ((t as f32) / 4.0 + k as f32).sin()
    });
    *m.parts.get_mut(Part::Upper) = &rest_clip(Part::Upper, 16) + &smooth;
    let data = vec![m.clone(); 6];
    let cfg = CodecConfig {
        codebook_size: 8,
        latent_dim: 8,
        hidden: 32,
        epochs: 500,
        batch_size: 6,
        lr: 3e-3,
        holdout_fraction: 0.0,
        ..CodecConfig::new(Part::Upper)
    };
    let (codec, report) = train::train_codec(&data, Part::Upper, &cfg).unwrap();
    assert!(report.utilization > 0.0);
    assert!(
        report.final_heldout.rec < 0.25 * report.initial_heldout.rec
            && report.final_heldout.total < 0.25 * report.initial_heldout.total,
        "{:?} -> {:?}",
        report.initial_heldout,
        report.final_heldout
    );
    assert!(codec.codebook().unwrap().usage_counts.iter().sum::<u64>() > 0);
}
