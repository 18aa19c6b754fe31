//! The colorization diffusion model: a small NHWC U-Net whose input is the
//! 1×1 projection of the noisy latent concatenated with the grayscale latent,
//! conditioned on the timestep and on text tokens through cross-attention.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checksum, Checkpoint};
use crate::data::EncodedDataset;
use crate::diffusion::{denoise_loss, NoisePredictor, NoiseSchedule, TrainBatch, DEFAULT_TRAIN_STEPS};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{
    name_hash, timestep_embedding, upsample_nearest2x, Conv3x3, CrossAttention, Downsample, GroupNorm, Init,
    Linear, ParamStore, ResBlock,
};
use crate::vae::{epoch_order, scalar, LossRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdmConfig {
    pub latent_channels: usize,
    /// Feature width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Cross-attention on/off per level.
    pub attention: Vec<bool>,
    pub heads: usize,
    pub groups: usize,
    pub text_dim: usize,
    pub text_len: usize,
    /// Extra embedding rows for out-of-vocabulary tokens.
    pub hash_buckets: usize,
    pub vocabulary: Vec<String>,
    /// Length of the linear noise schedule the model is trained on.
    pub train_timesteps: usize,
}

impl Default for CdmConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: vec![64, 128, 128],
            res_blocks: 2,
            attention: vec![false, true, true],
            heads: 4,
            groups: 8,
            text_dim: 128,
            text_len: 16,
            hash_buckets: 32,
            vocabulary: crate::data::vocabulary(),
            train_timesteps: DEFAULT_TRAIN_STEPS,
        }
    }
}

impl CdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.attention.len() != self.channels.len() {
            return invalid("cdm config: one attention flag per channel level required");
        }
        if self.res_blocks == 0 || self.latent_channels == 0 || self.text_len == 0 || self.heads == 0 {
            return invalid("cdm config: zero-sized dimension");
        }
        for &c in &self.channels {
            if c % self.groups != 0 || c % self.heads != 0 {
                return invalid(format!("cdm config: width {c} not divisible by groups/heads"));
            }
        }
        if self.hash_buckets == 0 {
            return invalid("cdm config: at least one hash bucket required");
        }
        if self.train_timesteps < 2 {
            return invalid("cdm config: at least 2 training timesteps required");
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        4 * self.channels[0]
    }
}

/// Whitespace tokenizer over a fixed vocabulary with hashed out-of-vocabulary
/// buckets, a learned token table, learned positions and a separate learned
/// null sequence.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: BTreeMap<String, usize>,
    buckets: usize,
    len: usize,
    dim: usize,
    table: Tensor,
    positions: Tensor,
    null: Tensor,
}

pub const PAD_TOKEN: u32 = 0;

impl TextEncoder {
    fn new(ps: &mut ParamStore, cfg: &CdmConfig) -> Result<Self> {
        let vocab: BTreeMap<String, usize> =
            cfg.vocabulary.iter().enumerate().map(|(i, w)| (w.to_lowercase(), i + 1)).collect();
        let rows = 1 + cfg.vocabulary.len() + cfg.hash_buckets;
        Ok(Self {
            table: ps.get("text.table", &[rows, cfg.text_dim], Init::Normal(1.0))?,
            positions: ps.get("text.positions", &[cfg.text_len, cfg.text_dim], Init::Normal(0.1))?,
            null: ps.get("text.null", &[cfg.text_len, cfg.text_dim], Init::Normal(1.0))?,
            vocab,
            buckets: cfg.hash_buckets,
            len: cfg.text_len,
            dim: cfg.text_dim,
        })
    }

    /// Token ids padded or truncated to the sequence length.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| match self.vocab.get(&w) {
                Some(&i) => i as u32,
                None => (1 + self.vocab.len() + (name_hash(&w) % self.buckets as u64) as usize) as u32,
            })
            .take(self.len)
            .collect();
        ids.resize(self.len, PAD_TOKEN);
        ids
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Tensor> {
        let ids: Vec<u32> = texts.iter().flat_map(|t| self.tokenize(t)).collect();
        let idx = Tensor::from_vec(ids, texts.len() * self.len, &Device::Cpu)?;
        let tokens = self.table.index_select(&idx, 0)?.reshape((texts.len(), self.len, self.dim))?;
        Ok(tokens.broadcast_add(&self.positions)?)
    }

    pub fn null(&self, batch: usize) -> Result<Tensor> {
        Ok(self.null.unsqueeze(0)?.broadcast_as((batch, self.len, self.dim))?.contiguous()?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<CrossAttention>,
}

impl Level {
    fn forward(&self, mut h: Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, Some(temb))?;
            if let Some(a) = self.attn.get(i) {
                h = a.forward(&h, ctx)?;
            }
        }
        Ok(h)
    }
}

pub struct Cdm {
    config: CdmConfig,
    params: ParamStore,
    adapter: Linear,
    text: TextEncoder,
    time1: Linear,
    time2: Linear,
    conv_in: Conv3x3,
    down: Vec<Level>,
    downsample: Vec<Downsample>,
    mid: (ResBlock, CrossAttention, ResBlock),
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
    schedule: NoiseSchedule,
}

impl Cdm {
    pub fn new(config: CdmConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: CdmConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.train_timesteps)?;
        let mut store = ParamStore::new(seed, dtype);
        let ps = &mut store;
        let c = config.latent_channels;
        let adapter = Linear::with_init(ps, "adapter", 2 * c, c, Init::Zeros, true)?;
        let text = TextEncoder::new(ps, &config)?;
        let ch = &config.channels;
        let td = config.time_dim();
        let g = config.groups;
        let time1 = Linear::new(ps, "time.fc1", ch[0], td)?;
        let time2 = Linear::new(ps, "time.fc2", td, td)?;
        let conv_in = Conv3x3::new(ps, "conv_in", c, ch[0])?;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cur = ch[0];
        for (l, &width) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for r in 0..config.res_blocks {
                blocks.push(ResBlock::new(ps, &format!("down{l}.res{r}"), cur, width, Some(td), g)?);
                cur = width;
                if config.attention[l] {
                    attn.push(CrossAttention::new(ps, &format!("down{l}.attn{r}"), width, config.text_dim, config.heads, g)?);
                }
            }
            down.push(Level { blocks, attn });
            if l + 1 < ch.len() {
                downsample.push(Downsample::new(ps, &format!("down{l}.downsample"), width, width)?);
            }
        }
        let last = *ch.last().unwrap();
        let mid = (
            ResBlock::new(ps, "mid.res0", last, last, Some(td), g)?,
            CrossAttention::new(ps, "mid.attn", last, config.text_dim, config.heads, g)?,
            ResBlock::new(ps, "mid.res1", last, last, Some(td), g)?,
        );
        let mut up = Vec::new();
        for (l, &width) in ch.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for r in 0..config.res_blocks {
                let input = if r == 0 { cur + width } else { width };
                blocks.push(ResBlock::new(ps, &format!("up{l}.res{r}"), input, width, Some(td), g)?);
                cur = width;
                if config.attention[l] {
                    attn.push(CrossAttention::new(ps, &format!("up{l}.attn{r}"), width, config.text_dim, config.heads, g)?);
                }
            }
            up.push(Level { blocks, attn });
        }
        let norm_out = GroupNorm::new(ps, "norm_out", ch[0], g)?;
        let conv_out = Conv3x3::zeroed(ps, "conv_out", ch[0], c)?;

        // The adapter starts as [I | 0]: pure pass-through of z_t.
        let mut eye = vec![0.0f64; 2 * c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        ps.set("adapter.weight", &Tensor::from_vec(eye, (2 * c, c), &Device::Cpu)?)?;

        Ok(Self {
            config,
            params: store,
            adapter,
            text,
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid,
            up,
            norm_out,
            conv_out,
            schedule,
        })
    }

    pub fn config(&self) -> &CdmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    /// `conv1x1(concat(z_t, z_c))` over the channel axis.
    pub fn input_adapter(&self, z_t: &Tensor, z_c: &Tensor) -> Result<Tensor> {
        if z_t.dims() != z_c.dims() {
            return shape_err(format!("adapter: z_t {:?} vs z_c {:?}", z_t.dims(), z_c.dims()));
        }
        if z_t.rank() != 4 || z_t.dim(3)? != self.config.latent_channels {
            return shape_err(format!("adapter expects B×h×w×{} latents, got {:?}", self.config.latent_channels, z_t.dims()));
        }
        self.adapter.forward(&Tensor::cat(&[z_t, z_c], 3)?)
    }

    fn forward(&self, z_t: &Tensor, t: &[usize], z_c: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        if t.len() != b || ctx.dim(0)? != b {
            return shape_err(format!("cdm: batch {b}, {} timesteps, {} contexts", t.len(), ctx.dim(0)?));
        }
        let levels = self.config.channels.len();
        let (h, w) = (z_t.dim(1)?, z_t.dim(2)?);
        let factor = 1 << (levels - 1);
        if h % factor != 0 || w % factor != 0 {
            return shape_err(format!("cdm: latent {h}x{w} not divisible by {factor}"));
        }
        let x = self.input_adapter(z_t, z_c)?;
        let temb = timestep_embedding(t, self.config.channels[0], self.dtype(), &Device::Cpu)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut hcur = self.conv_in.forward(&x)?;
        let mut skips = Vec::with_capacity(levels);
        for (l, level) in self.down.iter().enumerate() {
            hcur = level.forward(hcur, &temb, ctx)?;
            skips.push(hcur.clone());
            if l + 1 < levels {
                hcur = self.downsample[l].forward(&hcur)?;
            }
        }
        hcur = self.mid.0.forward(&hcur, Some(&temb))?;
        hcur = self.mid.1.forward(&hcur, ctx)?;
        hcur = self.mid.2.forward(&hcur, Some(&temb))?;
        for (i, level) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            hcur = Tensor::cat(&[&hcur, &skips[l]], 3)?;
            hcur = level.forward(hcur, &temb, ctx)?;
            if l > 0 {
                hcur = upsample_nearest2x(&hcur)?;
            }
        }
        let f = self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?;
        self.precondition(z_t, t, &f)
    }

    /// `eps = sqrt(1 − ᾱ_t)·z_t + sqrt(ᾱ_t)·f`. The network output `f` then
    /// maps to the clean-latent estimate without the `1/sqrt(ᾱ_t)` blow-up of
    /// a raw noise head, and a zero output is already a sensible prediction
    /// at high noise.
    fn precondition(&self, z_t: &Tensor, t: &[usize], f: &Tensor) -> Result<Tensor> {
        let steps = self.schedule.train_steps();
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > steps) {
            return invalid(format!("timestep {bad} outside 1..={steps}"));
        }
        let coef = |g: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = t.iter().map(|&ti| g(self.schedule.alpha_bar(ti))).collect();
            Ok(Tensor::from_vec(v, (t.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(self.dtype())?)
        };
        let skip = coef(&|ab| (1.0 - ab).sqrt())?;
        let scale = coef(&|ab| ab.sqrt())?;
        Ok((z_t.broadcast_mul(&skip)? + f.broadcast_mul(&scale)?)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self.params.tensors();
        let sha = checksum(&tensors)?;
        Ok(Checkpoint::new(tensors)
            .with_meta("kind", "cdm")
            .with_meta("config", serde_json::to_string(&self.config)?)
            .with_meta("sha256", sha))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "cdm" {
            return Err(Error::Checkpoint(format!("expected a cdm checkpoint, found {}", ck.meta("kind")?)));
        }
        let config: CdmConfig = serde_json::from_str(ck.meta("config")?)?;
        let mut model = Self::new(config, 0)?;
        model.params.load(&ck.tensors, true)?;
        Ok(model)
    }

    /// Replaces the adapter's `2c × c` weight (rows: z_t channels then z_c channels).
    pub fn set_adapter_weight(&self, weight: &Tensor) -> Result<()> {
        self.params.set("adapter.weight", weight)
    }
}

impl NoisePredictor for Cdm {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], z_c: &Tensor, context: &Tensor) -> Result<Tensor> {
        let out = self.forward(z_t, t, z_c, context)?;
        let finite = out.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
        if !finite.is_finite() {
            return Err(Error::NonFinite("noise prediction".into()));
        }
        Ok(out)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        self.text.embed(texts)
    }

    fn null_context(&self, batch: usize) -> Result<Tensor> {
        self.text.null(batch)
    }
}

/// `u + w·(v − u)` with `u` the null-text and `v` the conditional prediction.
/// Both predictions come from one batched call.
pub fn cfg_predict<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t: &Tensor,
    t: &[usize],
    z_c: &Tensor,
    context: &Tensor,
    w: f64,
) -> Result<Tensor> {
    if w < 0.0 || !w.is_finite() {
        return invalid(format!("guidance scale must be finite and non-negative, got {w}"));
    }
    let b = z_t.dim(0)?;
    let null = model.null_context(b)?;
    let ts: Vec<usize> = t.iter().chain(t.iter()).copied().collect();
    let both = model.predict_noise(
        &Tensor::cat(&[z_t, z_t], 0)?,
        &ts,
        &Tensor::cat(&[z_c, z_c], 0)?,
        &Tensor::cat(&[&null, context], 0)?,
    )?;
    let u = both.narrow(0, 0, b)?;
    let v = both.narrow(0, b, b)?;
    if w == 1.0 {
        return Ok(v);
    }
    if w == 0.0 {
        return Ok(u);
    }
    Ok((&u + ((v - &u)? * w)?)?)
}

/// Guidance over both conditions:
/// `e(∅,∅) + s·(e(z_c,∅) − e(∅,∅)) + w·(e(z_c,c) − e(z_c,∅))`, where `∅` is
/// the null text or the zero grayscale latent. At `s = 1` this is
/// [`cfg_predict`] and makes the same single two-row call.
pub fn dual_cfg_predict<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t: &Tensor,
    t: &[usize],
    z_c: &Tensor,
    context: &Tensor,
    w: f64,
    gray_scale: f64,
) -> Result<Tensor> {
    if gray_scale < 0.0 || !gray_scale.is_finite() {
        return invalid(format!("grayscale guidance scale must be finite and non-negative, got {gray_scale}"));
    }
    if gray_scale == 1.0 {
        return cfg_predict(model, z_t, t, z_c, context, w);
    }
    if w < 0.0 || !w.is_finite() {
        return invalid(format!("guidance scale must be finite and non-negative, got {w}"));
    }
    let b = z_t.dim(0)?;
    let null = model.null_context(b)?;
    let ts: Vec<usize> = t.iter().chain(t).chain(t).copied().collect();
    let all = model.predict_noise(
        &Tensor::cat(&[z_t, z_t, z_t], 0)?,
        &ts,
        &Tensor::cat(&[&z_c.zeros_like()?, z_c, z_c], 0)?,
        &Tensor::cat(&[&null, &null, context], 0)?,
    )?;
    let blind = all.narrow(0, 0, b)?;
    let gray = all.narrow(0, b, b)?;
    let full = all.narrow(0, 2 * b, b)?;
    let gray_term = ((&gray - &blind)? * gray_scale)?;
    let text_term = ((full - &gray)? * w)?;
    Ok(((blind + gray_term)? + text_term)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_p: f64,
    /// Learning-rate multiplier for the input adapter. Its grayscale half
    /// starts at zero and has to grow well beyond the step size of the rest.
    pub adapter_lr_scale: f64,
    /// Decay of the exponential moving average whose weights are kept at the
    /// end of training; 0 keeps the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for CdmTrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch_size: 16, lr: 5e-5, dropout_p: 0.05, adapter_lr_scale: 20.0, ema_decay: 0.999, seed: 0 }
    }
}

/// Minimizes the denoising loss with AdamW over reshuffled epochs of the
/// pre-encoded dataset. With a positive `ema_decay` the model ends up holding
/// the averaged weights; `on_step` sees the raw ones.
pub fn train_cdm(
    model: &mut Cdm,
    data: &EncodedDataset,
    schedule: &NoiseSchedule,
    cfg: &CdmTrainConfig,
    mut on_step: impl FnMut(&LossRecord, &Cdm),
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return invalid("train_cdm: empty dataset");
    }
    if cfg.batch_size == 0 {
        return invalid("train_cdm: batch size must be positive");
    }
    if !(cfg.adapter_lr_scale > 0.0) {
        return invalid("train_cdm: adapter_lr_scale must be positive");
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return invalid("train_cdm: ema_decay must lie in [0, 1)");
    }
    let adapter = model.params.vars_with_prefixes(&["adapter."]);
    let rest = model.params.vars_without_prefixes(&["adapter."]);
    let params = |lr| ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() };
    let mut opt_adapter = AdamW::new(adapter, params(cfg.lr * cfg.adapter_lr_scale))?;
    let mut opt = AdamW::new(rest, params(cfg.lr))?;
    let vars = model.params.all_vars();
    let mut ema: Vec<Tensor> = if cfg.ema_decay > 0.0 {
        vars.iter().map(|v| v.as_tensor().detach().copy()).collect::<candle_core::Result<_>>()?
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.steps {
                break;
            }
            let batch = data.batch(chunk)?;
            let out = denoise_loss(&batch, &*model, schedule, cfg.dropout_p, &mut rng)?;
            let grads = out.loss.backward()?;
            opt_adapter.step(&grads)?;
            opt.step(&grads)?;
            for (avg, var) in ema.iter_mut().zip(&vars) {
                *avg = ((&*avg * cfg.ema_decay)? + (var.as_tensor() * (1.0 - cfg.ema_decay))?)?.detach();
            }
            let rec = LossRecord { step, epoch, loss: scalar(&out.loss)? };
            on_step(&rec, model);
            log.push(rec);
            step += 1;
        }
        epoch += 1;
    }
    for (avg, var) in ema.iter().zip(&vars) {
        var.set(avg)?;
    }
    Ok(log)
}

/// Mean denoising loss over fixed batches with fixed timesteps and noise (no
/// dropout), comparable across training.
pub fn validation_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    batches: &[TrainBatch],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batches.is_empty() {
        return invalid("validation_loss: no batches");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for b in batches {
        total += scalar(&denoise_loss(b, model, schedule, 0.0, &mut rng)?.loss)?;
    }
    Ok(total / batches.len() as f64)
}
