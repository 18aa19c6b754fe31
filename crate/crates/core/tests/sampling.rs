//! Sampling, loss and guidance behaviour checked against mock predictors with
//! closed-form outputs.

mod common;

use candle_core::{DType, Device, Tensor};
use colorizer_core::cdm::{cfg_predict, dual_cfg_predict, Cdm, CdmConfig};
use colorizer_core::diffusion::{
    ddim_sample, ddim_step, denoise_loss, inference_timesteps, initial_noise, q_sample, NoisePredictor, NoiseSchedule,
    SamplerConfig, TrainBatch,
};
use colorizer_core::guidance::{guided_step, segmentation_active, GuidanceConfig, ImageGuidance, LatentInstance};
use colorizer_core::nn::randn;
use colorizer_core::Result;
use common::{max_abs_diff, to_vec, ConstModel, LinearModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F32, &Device::Cpu).unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000).unwrap()
}

#[test]
fn q_sample_moments_match_schedule() {
    let s = schedule();
    let n = 40_000;
    let z0 = Tensor::full(2f32, (n, 1, 1, 1), &Device::Cpu).unwrap();
    let eps = rand(&[n, 1, 1, 1], 1);
    for t in [1, 250, 500, 1000] {
        let v = to_vec(&q_sample(&z0, &vec![t; n], &eps, &s).unwrap());
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        assert!((mean - 2.0 * ab.sqrt()).abs() < 0.02, "t={t}: mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.03 * (1.0 - ab) + 1e-6, "t={t}: var {var}");
    }
}

#[test]
fn condition_dropout_rate_is_binomial() {
    let n = 10_000;
    let batch = TrainBatch {
        z0: Tensor::zeros((n, 1, 1, 1), DType::F32, &Device::Cpu).unwrap(),
        zc: Tensor::ones((n, 1, 1, 1), DType::F32, &Device::Cpu).unwrap(),
        texts: vec!["red".into(); n],
    };
    let model = ConstModel(Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
    let out = denoise_loss(&batch, &model, &schedule(), 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for count in [out.null_text, out.null_gray] {
        let rate = count as f64 / n as f64;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
    }
    let none = denoise_loss(&batch, &model, &schedule(), 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!((none.null_text, none.null_gray), (0, 0));
    assert!(denoise_loss(&batch, &model, &schedule(), 1.5, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}

/// Recovers the exact noise from `z_t` given the clean latent.
struct OracleModel {
    z0: Tensor,
    schedule: NoiseSchedule,
}

impl NoisePredictor for OracleModel {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], _z_c: &Tensor, _context: &Tensor) -> Result<Tensor> {
        let mut rows = Vec::new();
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(ti);
            let signal = (self.z0.narrow(0, i, 1)? * ab.sqrt())?;
            rows.push(((z_t.narrow(0, i, 1)? - signal)? / (1.0 - ab).sqrt())?);
        }
        Ok(Tensor::cat(&rows, 0)?)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        Ok(Tensor::zeros((texts.len(), 1, 1), self.z0.dtype(), &Device::Cpu)?)
    }

    fn null_context(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, 1, 1), self.z0.dtype(), &Device::Cpu)?)
    }
}

#[test]
fn loss_is_zero_for_exact_and_one_for_blind_predictor() {
    let n = 2_000;
    let z0 = rand(&[n, 2, 2, 1], 1).to_dtype(DType::F64).unwrap();
    let batch = TrainBatch { z0: z0.clone(), zc: z0.zeros_like().unwrap(), texts: vec![String::new(); n] };
    let exact = OracleModel { z0, schedule: schedule() };
    let l = denoise_loss(&batch, &exact, &schedule(), 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(l.loss.to_scalar::<f64>().unwrap() < 1e-12);
    let blind = ConstModel(Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
    let batch = TrainBatch { z0: batch.z0.to_dtype(DType::F32).unwrap(), zc: batch.zc.to_dtype(DType::F32).unwrap(), ..batch };
    let l = denoise_loss(&batch, &blind, &schedule(), 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((l.loss.to_scalar::<f32>().unwrap() - 1.0).abs() < 0.03);
}

#[test]
fn cfg_extrapolates_between_null_and_conditional() {
    let model = LinearModel::new(0.5, 0.25);
    let (z, zc) = (rand(&[2, 2, 2, 1], 1), rand(&[2, 2, 2, 1], 2));
    let ctx = model.embed_texts(&["red", "a"]).unwrap();
    let base = ((&z * 0.5).unwrap() + (&zc * 0.25).unwrap()).unwrap();
    // Context means are 4 and 2.
    let shift = Tensor::new(&[4f32, 2.], &Device::Cpu).unwrap().reshape((2, 1, 1, 1)).unwrap();
    let out = cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 3.0).unwrap();
    let want = base.broadcast_add(&(shift * 3.0).unwrap()).unwrap();
    assert!(max_abs_diff(&out, &want) < 1e-5);
    assert!(max_abs_diff(&cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 0.0).unwrap(), &base) < 1e-6);
    let conditional = model.predict_noise(&z, &[10, 10], &zc, &ctx).unwrap();
    assert!(max_abs_diff(&cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 1.0).unwrap(), &conditional) < 1e-6);
    assert_eq!(*model.calls.borrow(), vec![4, 4, 2, 4]);
    assert!(cfg_predict(&model, &z, &[10, 10], &zc, &ctx, -1.0).is_err());
}

#[test]
fn dual_guidance_scales_each_condition() {
    let model = LinearModel::new(0.5, 0.25);
    let (z, zc) = (rand(&[2, 2, 2, 1], 1), rand(&[2, 2, 2, 1], 2));
    let ctx = model.embed_texts(&["red", "a"]).unwrap();
    let shift = Tensor::new(&[4f32, 2.], &Device::Cpu).unwrap().reshape((2, 1, 1, 1)).unwrap();
    for (s, w) in [(0.0, 0.0), (2.5, 1.0), (4.0, 3.0)] {
        let out = dual_cfg_predict(&model, &z, &[10, 10], &zc, &ctx, w, s).unwrap();
        let want = ((&z * 0.5).unwrap() + (&zc * (0.25 * s)).unwrap()).unwrap().broadcast_add(&(&shift * w).unwrap()).unwrap();
        assert!(max_abs_diff(&out, &want) < 1e-5, "s={s} w={w}");
    }
    assert_eq!(*model.calls.borrow(), vec![6, 6, 6]);
    // At unit grayscale scale the extra branch is skipped entirely.
    let plain = cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 3.0).unwrap();
    assert_eq!(to_vec(&dual_cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 3.0, 1.0).unwrap()), to_vec(&plain));
    assert_eq!(model.calls.borrow()[3..], [4, 4]);
    assert!(dual_cfg_predict(&model, &z, &[10, 10], &zc, &ctx, 3.0, -1.0).is_err());
}

#[test]
fn linear_model_sampling_has_closed_form() {
    let s = schedule();
    let a = 0.3;
    let model = LinearModel::new(a, 0.0);
    let zc = Tensor::zeros((2, 2, 2, 1), DType::F32, &Device::Cpu).unwrap();
    let ctx = model.null_context(2).unwrap();
    let cfg = SamplerConfig { steps: 10, eta: 0.0, seed: 5 };
    let guidance = GuidanceConfig { steps: 10, ..Default::default() };
    let out = ddim_sample(&model, &zc, &ctx, &s, &cfg, &guidance, None).unwrap();
    // Every step multiplies the latent by a scalar when eps = a·z.
    let ts = inference_timesteps(10, 1000).unwrap();
    let mut factor = 1.0;
    for k in (1..=10).rev() {
        let (t, tp) = (ts[k - 1], if k == 1 { 0 } else { ts[k - 2] });
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(tp));
        let z0 = (1.0 - (1.0 - ab).sqrt() * a) / ab.sqrt();
        factor *= if tp == 0 { z0 } else { abp.sqrt() * z0 + (1.0 - abp).sqrt() * a };
    }
    let want = (initial_noise(&[2, 2, 2, 1], 5, DType::F32).unwrap() * factor).unwrap();
    assert!(max_abs_diff(&out, &want) < 1e-4 * factor.abs().max(1.0));
}

fn instance(mask: Vec<f32>, h: usize, w: usize, model: &LinearModel, label: &str) -> LatentInstance {
    LatentInstance {
        mask: Tensor::from_vec(mask, (h, w, 1), &Device::Cpu).unwrap(),
        context: model.embed_texts(&[label]).unwrap(),
        label: label.into(),
    }
}

struct Step {
    model: LinearModel,
    z: Tensor,
    zc: Tensor,
    ctx: Tensor,
}

impl Step {
    fn new() -> Self {
        let model = LinearModel::new(0.2, 0.7);
        let ctx = model.embed_texts(&["red circle"]).unwrap();
        Self { model, z: rand(&[1, 4, 4, 2], 1), zc: rand(&[1, 4, 4, 2], 2), ctx }
    }

    fn guided(&self, g: &ImageGuidance, k: usize, cfg: &GuidanceConfig) -> Tensor {
        let s = schedule();
        let (t, tp) = (800, 780);
        guided_step(&self.model, &self.z, k, t, tp, &self.zc, &self.ctx, std::slice::from_ref(g), cfg, &s, 0.0, None).unwrap()
    }

    /// Plain CFG + DDIM path with the given condition.
    fn direct(&self, zc: &Tensor, ctx: &Tensor, w: f64) -> Tensor {
        let s = schedule();
        let eps = cfg_predict(&self.model, &self.z, &[800], zc, ctx, w).unwrap();
        ddim_step(&self.z, &eps, 800, 780, &s, 0.0, None).unwrap()
    }
}

#[test]
fn zero_strength_matches_unguided_step() {
    let st = Step::new();
    let g = ImageGuidance { instances: vec![instance(vec![1.0; 16], 4, 4, &st.model, "blue square")] };
    let cfg = GuidanceConfig { strength: 0.0, ..Default::default() };
    for k in [1, 25, 50] {
        assert!(!segmentation_active(k, &cfg));
        assert_eq!(max_abs_diff(&st.guided(&g, k, &cfg), &st.direct(&st.zc, &st.ctx, 3.0)), 0.0);
    }
}

#[test]
fn full_mask_reduces_to_instance_path() {
    let st = Step::new();
    let inst = instance(vec![1.0; 16], 4, 4, &st.model, "blue square");
    let want = st.direct(&st.zc, &inst.context, 3.0);
    let cfg = GuidanceConfig { strength: 1.0, ..Default::default() };
    let out = st.guided(&ImageGuidance { instances: vec![inst] }, 1, &cfg);
    assert!(max_abs_diff(&out, &want) < 1e-6);
}

#[test]
fn half_plane_mask_splits_both_paths() {
    let st = Step::new();
    let mask: Vec<f32> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
    let inst = instance(mask, 4, 4, &st.model, "green");
    let zc_masked = st.zc.broadcast_mul(&inst.mask).unwrap();
    let inside = st.direct(&zc_masked, &inst.context, 3.0);
    let outside = st.direct(&st.zc, &st.ctx, 3.0);
    let cfg = GuidanceConfig { strength: 0.3, ..Default::default() };
    let out = st.guided(&ImageGuidance { instances: vec![inst] }, 50, &cfg);
    let (o, i, g) = (to_vec(&out), to_vec(&inside), to_vec(&outside));
    for idx in 0..o.len() {
        let x = (idx / 2) % 4;
        let want = if x < 2 { i[idx] } else { g[idx] };
        assert!((o[idx] - want).abs() < 1e-6, "idx {idx}");
    }
}

#[test]
fn instance_label_only_affects_its_mask() {
    let st = Step::new();
    let mask: Vec<f32> = (0..16).map(|i| if i / 4 == 1 { 1.0 } else { 0.0 }).collect();
    let cfg = GuidanceConfig { strength: 1.0, ..Default::default() };
    let a = to_vec(&st.guided(&ImageGuidance { instances: vec![instance(mask.clone(), 4, 4, &st.model, "red")] }, 10, &cfg));
    let b = to_vec(&st.guided(&ImageGuidance { instances: vec![instance(mask.clone(), 4, 4, &st.model, "lavender")] }, 10, &cfg));
    for idx in 0..a.len() {
        if mask[idx / 2] == 0.0 {
            assert_eq!(a[idx], b[idx]);
        } else {
            assert_ne!(a[idx], b[idx]);
        }
    }
}

#[test]
fn smaller_instance_wins_overlap() {
    let st = Step::new();
    let big = instance(vec![1.0; 16], 4, 4, &st.model, "blue");
    let mut small_mask = vec![0.0; 16];
    small_mask[5] = 1.0;
    let small = instance(small_mask, 4, 4, &st.model, "red");
    let cfg = GuidanceConfig { strength: 1.0, ..Default::default() };
    let out = to_vec(&st.guided(&ImageGuidance { instances: vec![big.clone(), small.clone()] }, 1, &cfg));
    let want_small = to_vec(&st.direct(&st.zc.broadcast_mul(&small.mask).unwrap(), &small.context, 3.0));
    let want_big = to_vec(&st.direct(&st.zc, &big.context, 3.0));
    for idx in 0..out.len() {
        let want = if idx / 2 == 5 { want_small[idx] } else { want_big[idx] };
        assert!((out[idx] - want).abs() < 1e-6);
    }
}

#[test]
fn guided_sampling_call_pattern() {
    let model = LinearModel::new(0.1, 0.1);
    let zc = rand(&[2, 4, 4, 2], 3);
    let ctx = model.embed_texts(&["red", "blue"]).unwrap();
    let plans = vec![
        ImageGuidance { instances: vec![instance(vec![1.0; 16], 4, 4, &model, "red"), instance(vec![0.0; 15].into_iter().chain([1.0]).collect(), 4, 4, &model, "a")] },
        ImageGuidance { instances: vec![instance(vec![1.0; 16], 4, 4, &model, "blue")] },
    ];
    model.calls.borrow_mut().clear();
    let cfg = SamplerConfig { steps: 50, eta: 0.0, seed: 1 };
    let guidance = GuidanceConfig::default();
    ddim_sample(&model, &zc, &ctx, &schedule(), &cfg, &guidance, Some(&plans)).unwrap();
    let calls = model.calls.borrow();
    // One batched CFG pair per step for the images and one for the three
    // instances on each of the 15 segmentation steps (t > 35).
    assert_eq!(calls.len(), 50 + 15);
    assert_eq!(calls.iter().filter(|&&b| b == 4).count(), 50);
    assert_eq!(calls.iter().filter(|&&b| b == 6).count(), 15);
}

#[test]
fn adapter_is_linear_in_both_inputs() {
    let cfg = CdmConfig {
        latent_channels: 2,
        channels: vec![8, 8],
        res_blocks: 1,
        attention: vec![false, true],
        heads: 2,
        groups: 2,
        text_dim: 8,
        text_len: 4,
        hash_buckets: 4,
        vocabulary: vec!["red".into()],
        train_timesteps: 1000,
    };
    let m = Cdm::new(cfg, 1).unwrap();
    m.set_adapter_weight(&rand(&[4, 2], 9)).unwrap();
    let (a1, b1, a2, b2) = (rand(&[1, 4, 4, 2], 1), rand(&[1, 4, 4, 2], 2), rand(&[1, 4, 4, 2], 3), rand(&[1, 4, 4, 2], 4));
    let sum = m.input_adapter(&(&a1 + &a2).unwrap(), &(&b1 + &b2).unwrap()).unwrap();
    let parts = (m.input_adapter(&a1, &b1).unwrap() + m.input_adapter(&a2, &b2).unwrap()).unwrap();
    assert!(max_abs_diff(&sum, &parts) < 1e-5);
}
