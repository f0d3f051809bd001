//! Denoiser and conditioning block behaviour on tiny configurations.

use candle_core::{DType, Device, Tensor};
use ccad::backbone::{
    denoise_eps, gcb_forward, BackboneConfig, CodecConfig, CodecMode, Denoiser, GCBlockFC, GCBlockV, GcBlock,
    LatentCodec, Variant,
};
use ccad::nn::params::{ParamStore, Scope};
use ccad::schedules::TimeStep;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 1000;

fn tiny(variant: Variant, zero_init: bool) -> BackboneConfig {
    let mut c = BackboneConfig::new(variant, 6);
    c.base_width = 8;
    c.channel_mult = vec![1, 2];
    c.attention_levels = 2;
    c.heads = 2;
    c.groups = 4;
    c.cond_inner = 8;
    c.zero_init_cond = zero_init;
    c.seed = 11;
    if variant != Variant::V {
        c.in_channels = 4;
        c.local_channels = 3;
        c.local_downsample = 2;
    }
    c
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

struct Inputs {
    x: Tensor,
    local: Option<Tensor>,
    bank: Tensor,
    t: TimeStep,
}

fn inputs(cfg: &BackboneConfig, side: usize, b: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Inputs {
    let x = uniform(rng, &[b, cfg.in_channels, side, side], -3.0, 3.0, dtype);
    let local = cfg.variant.needs_local().then(|| {
        let f = cfg.local_downsample;
        uniform(rng, &[b, cfg.local_channels, side * f, side * f], -1.0, 1.0, dtype)
    });
    let rows = rng.random_range(1..6);
    let bank = uniform(rng, &[rows, cfg.bank_dim], -2.0, 2.0, dtype);
    let t = TimeStep::new(rng.random_range(1..=T), T).unwrap();
    Inputs { x, local, bank, t }
}

fn eps(m: &Denoiser, i: &Inputs, bank: &Tensor) -> Vec<f64> {
    denoise_eps(m, &i.x, i.t, i.local.as_ref(), bank)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

#[test]
fn inert_conditioning_at_initialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in [Variant::V, Variant::C, Variant::F] {
        let cfg = tiny(v, true);
        let m = Denoiser::new(&cfg, DType::F32).unwrap();
        let i = inputs(&cfg, 16, 2, &mut rng, DType::F32);
        let other = uniform(&mut rng, &[9, cfg.bank_dim], -5.0, 5.0, DType::F32);
        let empty = Tensor::zeros((0, cfg.bank_dim), DType::F32, &Device::Cpu).unwrap();
        let a = eps(&m, &i, &i.bank);
        assert_eq!(a, eps(&m, &i, &other), "variant {v}");
        assert_eq!(a, eps(&m, &i, &empty), "variant {v}");
    }
}

#[test]
fn live_conditioning_depends_on_the_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in [Variant::V, Variant::C] {
        let cfg = tiny(v, false);
        let m = Denoiser::new(&cfg, DType::F32).unwrap();
        let i = inputs(&cfg, 16, 1, &mut rng, DType::F32);
        let other = uniform(&mut rng, &[4, cfg.bank_dim], -2.0, 2.0, DType::F32);
        assert_ne!(eps(&m, &i, &i.bank), eps(&m, &i, &other), "variant {v}");
    }
}

#[test]
fn outputs_are_deterministic_for_a_seed() {
    for v in [Variant::V, Variant::F] {
        let cfg = tiny(v, false);
        let a = Denoiser::new(&cfg, DType::F32).unwrap();
        let b = Denoiser::new(&cfg, DType::F32).unwrap();
        let i = inputs(&cfg, 16, 2, &mut ChaCha8Rng::seed_from_u64(3), DType::F32);
        assert_eq!(eps(&a, &i, &i.bank), eps(&b, &i, &i.bank));
        assert_eq!(a.store().digest(None).unwrap(), b.store().digest(None).unwrap());
    }
}

#[test]
fn output_shape_tracks_input_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in [Variant::V, Variant::C] {
        let cfg = tiny(v, true);
        let m = Denoiser::new(&cfg, DType::F32).unwrap();
        for side in [16, 32, 64] {
            let i = inputs(&cfg, side, 1, &mut rng, DType::F32);
            let out = denoise_eps(&m, &i.x, i.t, i.local.as_ref(), &i.bank).unwrap();
            assert_eq!(out.dims(), i.x.dims());
        }
    }
}

#[test]
fn missing_or_unexpected_local_condition_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = tiny(Variant::C, true);
    let m = Denoiser::new(&cfg, DType::F32).unwrap();
    let i = inputs(&cfg, 16, 1, &mut rng, DType::F32);
    assert!(denoise_eps(&m, &i.x, i.t, None, &i.bank).is_err());

    let cfg = tiny(Variant::V, true);
    let m = Denoiser::new(&cfg, DType::F32).unwrap();
    let i = inputs(&cfg, 16, 1, &mut rng, DType::F32);
    assert!(denoise_eps(&m, &i.x, i.t, Some(&i.x), &i.bank).is_err());
    let wrong = Tensor::zeros((2, cfg.bank_dim + 1), DType::F32, &Device::Cpu).unwrap();
    assert!(denoise_eps(&m, &i.x, i.t, None, &wrong).is_err());
}

#[test]
fn outputs_stay_finite_over_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let models: Vec<(BackboneConfig, Denoiser)> = [Variant::V, Variant::F]
        .into_iter()
        .map(|v| {
            let cfg = tiny(v, false);
            let m = Denoiser::new(&cfg, DType::F32).unwrap();
            (cfg, m)
        })
        .collect();
    for trial in 0..1000 {
        let (cfg, m) = &models[trial % 2];
        let i = inputs(cfg, 16, 1, &mut rng, DType::F32);
        assert!(eps(m, &i, &i.bank).iter().all(|v| v.is_finite()), "trial {trial}");
    }
}

#[test]
fn gradients_reach_every_trainable_parameter_and_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in [Variant::V, Variant::F] {
        let cfg = tiny(v, false);
        let m = Denoiser::new(&cfg, DType::F64).unwrap();
        let i = inputs(&cfg, 8, 2, &mut rng, DType::F64);
        let weights = uniform(&mut rng, i.x.dims(), -1.0, 1.0, DType::F64);
        let loss = |m: &Denoiser| {
            denoise_eps(m, &i.x, i.t, i.local.as_ref(), &i.bank)
                .unwrap()
                .mul(&weights)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = loss(&m).backward().unwrap();
        let trainable = m.store().trainable();
        for (name, var) in &trainable {
            let g = grads
                .get(var.as_tensor())
                .unwrap_or_else(|| panic!("{name} has no gradient"));
            let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
            assert!(g.iter().all(|x| x.is_finite()), "{name}");
        }
        let h = 1e-5;
        for _ in 0..10 {
            let (name, var) = &trainable[rng.random_range(0..trainable.len())];
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let k = rng.random_range(0..base.len());
            let analytic: f64 = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[k];
            let at = |delta: f64| {
                let mut p = base.clone();
                p[k] += delta;
                let t = Tensor::from_vec(p, var.dims(), &Device::Cpu).unwrap();
                m.store().set(name, &t).unwrap();
                loss(&m).to_scalar::<f64>().unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            at(0.0);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale < 1e-3,
                "{v} {name}[{k}]: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

fn gcb_pair(zero_init: bool) -> (ParamStore, GCBlockV, GCBlockFC) {
    let mut store = ParamStore::new(DType::F64, &Device::Cpu, 3);
    let v = GCBlockV::new(&mut Scope::new(&mut store, "v", true), 8, 5, 8, 2, 4, zero_init).unwrap();
    let fc = GCBlockFC::new(&mut Scope::new(&mut store, "fc", true), 8, 5, 8, 2, 4, zero_init).unwrap();
    (store, v, fc)
}

#[test]
fn zero_initialised_blocks_are_exact_identities() {
    let (_s, v, fc) = gcb_pair(true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&mut rng, &[2, 8, 4, 4], -2.0, 2.0, DType::F64);
    let bank = uniform(&mut rng, &[7, 5], -2.0, 2.0, DType::F64);
    let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    for b in [GcBlock::V(&v), GcBlock::FC(&fc)] {
        let y: Vec<f64> = gcb_forward(b, &x, &bank)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(xs, y);
    }
}

#[test]
fn block_output_ignores_bank_row_order() {
    let (_s, v, fc) = gcb_pair(false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&mut rng, &[1, 8, 4, 4], -2.0, 2.0, DType::F64);
    let bank = uniform(&mut rng, &[6, 5], -2.0, 2.0, DType::F64);
    let perm = Tensor::new(&[4u32, 0, 5, 2, 1, 3], &Device::Cpu).unwrap();
    let shuffled = bank.index_select(&perm, 0).unwrap();
    for b in [GcBlock::V(&v), GcBlock::FC(&fc)] {
        let a: Vec<f64> = gcb_forward(b, &x, &bank)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let c: Vec<f64> = gcb_forward(b, &x, &shuffled)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for (p, q) in a.iter().zip(&c) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2().unwrap()
}

#[test]
fn pixel_block_matches_loop_oracle() {
    let (store, v, _) = gcb_pair(false);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (c, hw, heads, groups) = (8usize, 4usize, 2usize, 4usize);
    let x = uniform(&mut rng, &[1, c, 2, 2], -2.0, 2.0, DType::F64);
    let bank = uniform(&mut rng, &[3, 5], -2.0, 2.0, DType::F64);
    let got: Vec<f64> = v.forward(&x, &bank).unwrap().flatten_all().unwrap().to_vec1().unwrap();

    let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let gamma: Vec<f64> = store.param("v.norm.gamma").unwrap().var.as_tensor().to_vec1().unwrap();
    let beta: Vec<f64> = store.param("v.norm.beta").unwrap().var.as_tensor().to_vec1().unwrap();
    // group norm, then tokens (position, channel)
    let per = c / groups;
    let mut tok = vec![vec![0.0; c]; hw];
    for g in 0..groups {
        let vals: Vec<f64> = (g * per * hw..(g + 1) * per * hw).map(|i| xv[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for ch in g * per..(g + 1) * per {
            for p in 0..hw {
                tok[p][ch] = (xv[ch * hw + p] - mean) / (var + 1e-5).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    let p = v.cross();
    let (wq, wk, wv, wo) = (mat(&p.query), mat(&p.key), mat(&p.value), mat(&p.output));
    let bank = mat(&bank);
    let inner = wq[0].len();
    let dh = inner / heads;
    let proj = |rows: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..w[0].len())
                    .map(|j| r.iter().zip(w).map(|(a, wr)| a * wr[j]).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, vv) = (proj(&tok, &wq), proj(&bank, &wk), proj(&bank, &wv));
    let mut ctx = vec![vec![0.0; inner]; hw];
    for pos in 0..hw {
        for h in 0..heads {
            let s: Vec<f64> = k
                .iter()
                .map(|kr| (0..dh).map(|j| q[pos][h * dh + j] * kr[h * dh + j]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|a| (a - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (r, w) in e.iter().enumerate() {
                for j in 0..dh {
                    ctx[pos][h * dh + j] += w / z * vv[r][h * dh + j];
                }
            }
        }
    }
    let out = proj(&ctx, &wo);
    for ch in 0..c {
        for pos in 0..hw {
            let want = xv[ch * hw + pos] + out[pos][ch];
            assert!((got[ch * hw + pos] - want).abs() < 1e-9, "ch {ch} pos {pos}");
        }
    }
}

fn codec_images(n: usize, side: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut v = Vec::with_capacity(n * 3 * side * side);
    for _ in 0..n {
        let period = rng.random_range(4..9);
        let (ox, oy) = (rng.random_range(0..period), rng.random_range(0..period));
        let tint: [f32; 3] = [
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        ];
        for t in tint {
            for y in 0..side {
                for x in 0..side {
                    let on = ((x + ox) / period + (y + oy) / period) % 2 == 0;
                    v.push(if on { 0.6 * t } else { -0.6 * t });
                }
            }
        }
    }
    Tensor::from_vec(v, (n, 3, side, side), &Device::Cpu).unwrap()
}

#[test]
fn autoencoder_fits_its_training_set() {
    let images = codec_images(64, 32);
    let cfg = CodecConfig {
        mode: CodecMode::TinyConvAe,
        ..CodecConfig::default()
    };
    let codec = LatentCodec::fit(&cfg, &images).unwrap();
    let mae = codec.train_mae().unwrap();
    assert!(mae < 0.05, "mae {mae}");
    let z = codec.encode(&images).unwrap();
    assert_eq!(z.dims(), &[64, cfg.latent_channels, 16, 16]);
}

#[test]
fn identity_codec_maps_zero_to_zero() {
    let c = LatentCodec::identity();
    let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
    let back: Vec<f32> = c
        .decode(&c.encode(&z).unwrap())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert!(back.iter().all(|v| *v == 0.0));
}
