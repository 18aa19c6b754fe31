//! Noise schedule, forward noising, the ε-matching objective with condition
//! dropout, and deterministic DDIM sampling.
//!
//! Timesteps are 1-based: `t = 1..=T_train` indexes `betas[t - 1]`, and
//! `alpha_bar(0)` is exactly 1 so a final step to `t_prev = 0` emits the
//! predicted clean latent unchanged.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::dual_cfg_predict;
use crate::error::{invalid, shape_err, Error, Result};
use crate::guidance::{guided_step, GuidanceConfig, ImageGuidance};
use crate::nn::randn;

/// Anything that predicts the noise added to a latent.
pub trait NoisePredictor {
    /// `z_t`, `z_c`: `B × h × w × c`; `t`: one timestep per item;
    /// `context`: `B × L × d` text tokens.
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], z_c: &Tensor, context: &Tensor) -> Result<Tensor>;

    /// Text tokens for each string, `B × L × d`.
    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor>;

    /// The learned null condition repeated `batch` times.
    fn null_context(&self, batch: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;

impl NoiseSchedule {
    /// Linear β from 1e-4 to 0.02 over `train_steps`.
    pub fn linear(train_steps: usize) -> Result<Self> {
        if train_steps < 2 {
            return invalid(format!("need at least 2 training timesteps, got {train_steps}"));
        }
        let (start, end) = (1e-4, 0.02);
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| start + (end - start) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let mut alphas_bar = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.train_steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.train_steps()));
        }
        Ok(())
    }
}

/// Per-item coefficient column `B × 1 × 1 × 1`.
fn per_item(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`, with one timestep per batch item.
pub fn q_sample(z0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return shape_err(format!("q_sample: z0 {:?} vs eps {:?}", z0.dims(), eps.dims()));
    }
    if t.len() != z0.dim(0)? {
        return shape_err(format!("q_sample: {} timesteps for batch {}", t.len(), z0.dim(0)?));
    }
    for &ti in t {
        s.check_t(ti)?;
    }
    let signal: Vec<f64> = t.iter().map(|&ti| s.alpha_bar(ti).sqrt()).collect();
    let noise: Vec<f64> = t.iter().map(|&ti| (1.0 - s.alpha_bar(ti)).sqrt()).collect();
    let dtype = z0.dtype();
    Ok((z0.broadcast_mul(&per_item(&signal, dtype)?)? + eps.broadcast_mul(&per_item(&noise, dtype)?)?)?)
}

/// One training batch for the denoiser.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Encoded color images.
    pub z0: Tensor,
    /// Encoded grayscale condition.
    pub zc: Tensor,
    /// Condition text per item.
    pub texts: Vec<String>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.z0.dim(0)?;
        if self.zc.dims() != self.z0.dims() || self.texts.len() != b {
            return shape_err(format!(
                "train batch: z0 {:?}, zc {:?}, {} texts",
                self.z0.dims(),
                self.zc.dims(),
                self.texts.len()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseLoss {
    pub loss: Tensor,
    /// Items whose text condition was replaced by the null embedding.
    pub null_text: usize,
    /// Items whose grayscale latent was zeroed.
    pub null_gray: usize,
}

/// Draws the per-item randomness of one loss evaluation: timesteps, noise and
/// the two independent dropout decisions.
fn draw_training_noise(
    batch: &TrainBatch,
    s: &NoiseSchedule,
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Tensor, Vec<f64>, Vec<f64>)> {
    let b = batch.len();
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s.train_steps())).collect();
    let eps = randn(rng, batch.z0.dims(), batch.z0.dtype(), &Device::Cpu)?;
    let mut drop_text = Vec::with_capacity(b);
    let mut keep_gray = Vec::with_capacity(b);
    for _ in 0..b {
        drop_text.push(if rng.random::<f64>() < dropout_p { 1.0 } else { 0.0 });
        keep_gray.push(if rng.random::<f64>() < dropout_p { 0.0 } else { 1.0 });
    }
    Ok((t, eps, drop_text, keep_gray))
}

/// `E ||eps − eps_θ(z_t, t, z_c, c)||²` with independent condition dropout of
/// the text (→ null embedding) and of the grayscale latent (→ zeros).
pub fn denoise_loss<M: NoisePredictor + ?Sized>(
    batch: &TrainBatch,
    model: &M,
    s: &NoiseSchedule,
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DenoiseLoss> {
    if !(0.0..=1.0).contains(&dropout_p) {
        return invalid(format!("dropout probability {dropout_p} outside [0, 1]"));
    }
    batch.validate()?;
    let b = batch.len();
    let dtype = batch.z0.dtype();
    let (t, eps, drop_text, keep_gray) = draw_training_noise(batch, s, dropout_p, rng)?;
    let z_t = q_sample(&batch.z0, &t, &eps, s)?;

    let texts: Vec<&str> = batch.texts.iter().map(String::as_str).collect();
    let text_ctx = model.embed_texts(&texts)?;
    let null_ctx = model.null_context(b)?;
    let drop = Tensor::from_vec(drop_text.clone(), (b, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let keep = (drop.ones_like()? - &drop)?;
    let context = (text_ctx.broadcast_mul(&keep)? + null_ctx.broadcast_mul(&drop)?)?;
    let zc = batch.zc.broadcast_mul(&per_item(&keep_gray, dtype)?)?;

    let pred = model.predict_noise(&z_t, &t, &zc, &context)?;
    let loss = (eps - pred)?.sqr()?.mean_all()?;
    Ok(DenoiseLoss {
        loss,
        null_text: drop_text.iter().filter(|&&d| d == 1.0).count(),
        null_gray: keep_gray.iter().filter(|&&k| k == 0.0).count(),
    })
}

/// `ẑ0 = (z_t − sqrt(1 − ᾱ_t)·eps) / sqrt(ᾱ_t)`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let ab = s.alpha_bar(t);
    Ok(((z_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// One DDIM update from `t` to `t_prev`. `eta = 0` is deterministic; for
/// `eta > 0` the fresh noise must be supplied.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t <= t_prev {
        return invalid(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}"));
    }
    s.check_t(t)?;
    if z_t.dims() != eps_hat.dims() {
        return shape_err(format!("ddim_step: z_t {:?} vs eps {:?}", z_t.dims(), eps_hat.dims()));
    }
    if eta < 0.0 {
        return invalid("eta must be non-negative");
    }
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let z0 = predict_z0(z_t, eps_hat, t, s)?;
    if t_prev == 0 {
        return Ok(z0);
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((z0 * ab_prev.sqrt())? + (eps_hat * dir)?)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 requires a noise tensor".into()))?;
        out = (out + (noise * sigma)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0, seed: 0 }
    }
}

/// Evenly spaced inference timesteps, ascending: entry `k - 1` is the
/// training timestep of inference step `k = 1..=steps`, i.e.
/// `round(k · T_train / steps)`.
pub fn inference_timesteps(steps: usize, train_steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return invalid(format!("inference steps must lie in 1..={train_steps}, got {steps}"));
    }
    Ok((1..=steps)
        .map(|k| ((k as f64 * train_steps as f64 / steps as f64).round() as usize).max(1))
        .collect())
}

/// Seeded standard-normal starting latents; item `i` uses `seed + i`.
pub fn initial_noise(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let per = &shape[1..];
    let mut items = Vec::with_capacity(shape[0]);
    for i in 0..shape[0] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut dims = vec![1];
        dims.extend_from_slice(per);
        items.push(randn(&mut rng, &dims, dtype, &Device::Cpu)?);
    }
    Ok(Tensor::cat(&items, 0)?)
}

/// Runs the guided DDIM loop from seeded noise to a clean latent.
///
/// Without `priors` every step is a classifier-free-guided prediction on
/// `context` followed by a DDIM update; with `priors` (one entry per batch
/// item) steps go through [`guided_step`].
pub fn ddim_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    zc: &Tensor,
    context: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    guidance: &GuidanceConfig,
    priors: Option<&[ImageGuidance]>,
) -> Result<Tensor> {
    let b = zc.dim(0)?;
    if context.dim(0)? != b {
        return shape_err(format!("{} contexts for a batch of {b}", context.dim(0)?));
    }
    if let Some(p) = priors {
        if p.len() != b {
            return shape_err(format!("{} guidance entries for a batch of {b}", p.len()));
        }
    }
    if guidance.steps != cfg.steps {
        return invalid(format!("guidance configured for {} steps, sampler for {}", guidance.steps, cfg.steps));
    }
    guidance.validate()?;
    let timesteps = inference_timesteps(cfg.steps, schedule.train_steps())?;
    let mut z = initial_noise(zc.dims(), cfg.seed, zc.dtype())?;
    let mut eta_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a0);
    for k in (1..=cfg.steps).rev() {
        let t = timesteps[k - 1];
        let t_prev = if k == 1 { 0 } else { timesteps[k - 2] };
        let noise = if cfg.eta > 0.0 { Some(randn(&mut eta_rng, z.dims(), z.dtype(), &Device::Cpu)?) } else { None };
        z = match priors {
            Some(p) => guided_step(model, &z, k, t, t_prev, zc, context, p, guidance, schedule, cfg.eta, noise.as_ref())?,
            None => {
                let ts = vec![t; b];
                let eps = dual_cfg_predict(model, &z, &ts, zc, context, guidance.cfg_scale, guidance.gray_scale)?;
                ddim_step(&z, &eps, t, t_prev, schedule, cfg.eta, noise.as_ref())?
            }
        }
        // Sampling never backpropagates; dropping the graph keeps memory flat.
        .detach();
    }
    Ok(z)
}
