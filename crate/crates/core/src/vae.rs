//! Latent autoencoder and the luminance-aware decoder.
//!
//! The encoder maps `H×W×3` images in `[-1, 1]` to an `H/4 × W/4 × 4` latent
//! (posterior mean, multiplied by a fitted latent scale). The baseline decoder
//! inverts it. [`LuminanceDecoder`] is a fine-tuned copy of the baseline
//! decoder that also receives the frozen encoder's intermediate features on
//! the grayscale input: at each upsample stage `j` it adds
//! `alpha_i * conv_i(f_down_i)` for `(i, j)` in `(0, 3), (1, 2), (2, 1)`.

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checksum, Checkpoint};
use crate::colorspace::{GrayImage, ImageRgb};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{upsample_nearest2x, Conv3x3, Downsample, GroupNorm, Init, Linear, ParamStore, ResBlock};

/// Spatial downsampling factor between pixel and latent space.
pub const DOWNSAMPLE: usize = 4;

const PERCEPTUAL_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Feature widths of the three encoder stages (64, 32 and 16 px for a
    /// 64 px input). The decoder mirrors them.
    pub channels: [usize; 3],
    pub latent_channels: usize,
    pub groups: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], latent_channels: 4, groups: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderLossConfig {
    pub lambda_p: f64,
}

impl Default for DecoderLossConfig {
    fn default() -> Self {
        Self { lambda_p: 0.1 }
    }
}

/// Batch of images as a `B × H × W × 3` tensor scaled to `[-1, 1]`.
pub fn images_to_tensor(images: &[&ImageRgb], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if !img.same_dims(first) {
            return shape_err("images in a batch must share dimensions");
        }
        data.extend(img.pixels().iter().map(|&p| p as f32 / 127.5 - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn grays_to_tensor(grays: &[&GrayImage], dtype: DType) -> Result<Tensor> {
    let imgs: Vec<&ImageRgb> = grays.iter().map(|g| &g.rgb_replicated).collect();
    images_to_tensor(&imgs, dtype)
}

/// Inverse of [`images_to_tensor`], rounding and clipping to 8 bits.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageRgb>> {
    let (b, h, w, c) = t.dims4()?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    values
        .chunks_exact(h * w * 3)
        .take(b)
        .map(|chunk| {
            let px = chunk.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
            ImageRgb::new(h, w, px)
        })
        .collect()
}

struct Encoder {
    conv_in: Conv3x3,
    blocks: [ResBlock; 3],
    downs: [Downsample; 2],
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
}

/// The three intermediate encoder features fed to the luminance-aware decoder.
#[derive(Debug, Clone)]
pub struct SkipFeatures {
    pub f_down: [Tensor; 3],
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &VaeConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let g = cfg.groups;
        Ok(Self {
            conv_in: Conv3x3::new(ps, "enc.conv_in", 3, c0)?,
            blocks: [
                ResBlock::new(ps, "enc.block0", c0, c0, None, g)?,
                ResBlock::new(ps, "enc.block1", c1, c1, None, g)?,
                ResBlock::new(ps, "enc.block2", c2, c2, None, g)?,
            ],
            downs: [Downsample::new(ps, "enc.down0", c0, c1)?, Downsample::new(ps, "enc.down1", c1, c2)?],
            mid: ResBlock::new(ps, "enc.mid", c2, c2, None, g)?,
            norm_out: GroupNorm::new(ps, "enc.norm_out", c2, g)?,
            conv_out: Conv3x3::new(ps, "enc.conv_out", c2, 2 * cfg.latent_channels)?,
        })
    }

    /// Returns `(mean, logvar, features)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, SkipFeatures)> {
        let h = self.conv_in.forward(x)?;
        let f0 = self.blocks[0].forward(&h, None)?;
        let f1 = self.blocks[1].forward(&self.downs[0].forward(&f0)?, None)?;
        let f2 = self.blocks[2].forward(&self.downs[1].forward(&f1)?, None)?;
        let h = self.mid.forward(&f2, None)?;
        let moments = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let c = moments.dim(3)? / 2;
        let mean = moments.narrow(3, 0, c)?;
        let logvar = moments.narrow(3, c, c)?.clamp(-20f64, 10f64)?;
        Ok((mean, logvar, SkipFeatures { f_down: [f0, f1, f2] }))
    }
}

struct Decoder {
    conv_in: Conv3x3,
    mid: ResBlock,
    /// Upsample stages 1, 2, 3 (16, 32, 64 px).
    blocks: [ResBlock; 3],
    up_convs: [Conv3x3; 2],
    norm_out: GroupNorm,
    conv_out: Conv3x3,
}

/// Per-stage skip projections and weights. Index `i` refers to the encoder
/// stage whose features are injected.
struct SkipBranch {
    convs: [Linear; 3],
    alphas: Tensor,
}

impl Decoder {
    fn new(ps: &mut ParamStore, prefix: &str, cfg: &VaeConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let g = cfg.groups;
        Ok(Self {
            conv_in: Conv3x3::new(ps, &format!("{prefix}.conv_in"), cfg.latent_channels, c2)?,
            mid: ResBlock::new(ps, &format!("{prefix}.mid"), c2, c2, None, g)?,
            blocks: [
                ResBlock::new(ps, &format!("{prefix}.up1"), c2, c2, None, g)?,
                ResBlock::new(ps, &format!("{prefix}.up2"), c1, c1, None, g)?,
                ResBlock::new(ps, &format!("{prefix}.up3"), c0, c0, None, g)?,
            ],
            up_convs: [
                Conv3x3::new(ps, &format!("{prefix}.upconv1"), c2, c1)?,
                Conv3x3::new(ps, &format!("{prefix}.upconv2"), c1, c0)?,
            ],
            norm_out: GroupNorm::new(ps, &format!("{prefix}.norm_out"), c0, g)?,
            conv_out: Conv3x3::new(ps, &format!("{prefix}.conv_out"), c0, 3)?,
        })
    }

    /// `z` is an unscaled latent.
    fn forward(&self, z: &Tensor, skips: Option<(&SkipBranch, &SkipFeatures)>) -> Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?, None)?;
        for stage in 0..3 {
            h = self.blocks[stage].forward(&h, None)?;
            if let Some((branch, feats)) = skips {
                // Upsample stage j = stage + 1 receives encoder stage i = 2 - stage.
                let i = 2 - stage;
                let proj = branch.convs[i].forward(&feats.f_down[i])?;
                if proj.dims() != h.dims() {
                    return shape_err(format!(
                        "skip feature {i} has shape {:?}, decoder stage {} has {:?}",
                        proj.dims(),
                        stage + 1,
                        h.dims()
                    ));
                }
                let alpha = branch.alphas.narrow(0, i, 1)?;
                h = (h + proj.broadcast_mul(&alpha)?)?;
            }
            if stage < 2 {
                h = self.up_convs[stage].forward(&upsample_nearest2x(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Encoder plus baseline decoder.
pub struct Vae {
    config: VaeConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    latent_scale: f64,
}

fn check_divisible(x: &Tensor) -> Result<()> {
    let (_, h, w, c) = x.dims4()?;
    if c != 3 {
        return shape_err(format!("encoder expects 3 channels, got {c}"));
    }
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
        return invalid(format!("image dims {h}x{w} not divisible by {DOWNSAMPLE}"));
    }
    Ok(())
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&mut params, &config)?;
        let decoder = Decoder::new(&mut params, "dec", &config)?;
        Ok(Self { config, params, encoder, decoder, latent_scale: 1.0 })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return invalid(format!("latent scale must be positive, got {scale}"));
        }
        self.latent_scale = scale;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Deterministic encoding: the scaled posterior mean.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_divisible(x)?;
        let (mean, _, _) = self.encoder.forward(x)?;
        Ok((mean * self.latent_scale)?.detach())
    }

    pub fn encode_images(&self, images: &[&ImageRgb]) -> Result<Tensor> {
        self.encode(&images_to_tensor(images, self.dtype())?)
    }

    /// Frozen-encoder features on the replicated grayscale input.
    pub fn skip_features(&self, grays: &[&GrayImage]) -> Result<SkipFeatures> {
        let x = grays_to_tensor(grays, self.dtype())?;
        check_divisible(&x)?;
        let (_, _, f) = self.encoder.forward(&x)?;
        Ok(SkipFeatures { f_down: f.f_down.map(|t| t.detach()) })
    }

    pub fn decode_baseline(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&(z / self.latent_scale)?, None)
    }

    pub fn decode_baseline_images(&self, z: &Tensor) -> Result<Vec<ImageRgb>> {
        tensor_to_images(&self.decode_baseline(z)?)
    }

    pub fn encoder_tensors(&self) -> std::collections::BTreeMap<String, Tensor> {
        self.params.tensors_with_prefixes(&["enc."])
    }

    pub fn encoder_checksum(&self) -> Result<String> {
        checksum(&self.encoder_tensors())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.tensors())
            .with_meta("kind", "vae")
            .with_meta("config", serde_json::to_string(&self.config)?)
            .with_meta("latent_scale", format!("{:e}", self.latent_scale))
            .with_meta("encoder_sha256", self.encoder_checksum()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "vae" {
            return Err(Error::Checkpoint(format!("expected a vae checkpoint, found {}", ck.meta("kind")?)));
        }
        let config: VaeConfig = serde_json::from_str(ck.meta("config")?)?;
        let mut vae = Self::new(config, 0)?;
        vae.params.load(&ck.tensors, true)?;
        let scale: f64 = ck
            .meta("latent_scale")?
            .parse()
            .map_err(|_| Error::Checkpoint("latent_scale is not a number".into()))?;
        vae.set_latent_scale(scale)?;
        let expected = ck.meta("encoder_sha256")?;
        if vae.encoder_checksum()? != expected {
            return Err(Error::Checkpoint("encoder checksum mismatch".into()));
        }
        Ok(vae)
    }
}

/// Baseline decoder copy with weighted grayscale skip connections.
pub struct LuminanceDecoder {
    config: VaeConfig,
    params: ParamStore,
    decoder: Decoder,
    skips: SkipBranch,
}

impl LuminanceDecoder {
    /// Initialised from the VAE's baseline decoder with `alpha = 0`, so the
    /// untrained decoder reproduces the baseline exactly.
    pub fn from_vae(vae: &Vae, seed: u64) -> Result<Self> {
        let config = vae.config;
        let mut params = ParamStore::new(seed, vae.dtype());
        let decoder = Decoder::new(&mut params, "dec", &config)?;
        let skips = SkipBranch {
            convs: [
                Linear::with_init(&mut params, "skip.conv0", config.channels[0], config.channels[0], Init::FanIn { fan_in: config.channels[0], gain: 1.0 }, true)?,
                Linear::with_init(&mut params, "skip.conv1", config.channels[1], config.channels[1], Init::FanIn { fan_in: config.channels[1], gain: 1.0 }, true)?,
                Linear::with_init(&mut params, "skip.conv2", config.channels[2], config.channels[2], Init::FanIn { fan_in: config.channels[2], gain: 1.0 }, true)?,
            ],
            alphas: params.get("skip.alpha", &[3], Init::Zeros)?,
        };
        params.load(&vae.params.tensors_with_prefixes(&["dec."]), false)?;
        Ok(Self { config, params, decoder, skips })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn alphas(&self) -> Result<Vec<f32>> {
        Ok(self.skips.alphas.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// Overwrites the skip weights and projections; used to build the
    /// zero-skip configuration.
    pub fn zero_skips(&mut self) -> Result<()> {
        let zeroed: std::collections::BTreeMap<String, Tensor> = self
            .params
            .tensors_with_prefixes(&["skip."])
            .into_iter()
            .map(|(k, t)| {
                let z = t.zeros_like()?;
                Ok((k, z))
            })
            .collect::<Result<_>>()?;
        self.params.load(&zeroed, false)
    }

    pub fn decode(&self, vae: &Vae, z: &Tensor, grays: &[&GrayImage]) -> Result<Tensor> {
        let (b, h, w, _) = z.dims4()?;
        if grays.len() != b {
            return shape_err(format!("{} gray images for a latent batch of {b}", grays.len()));
        }
        for g in grays {
            if g.height() != h * DOWNSAMPLE || g.width() != w * DOWNSAMPLE {
                return shape_err(format!(
                    "gray image {}x{} does not match latent {h}x{w}",
                    g.height(),
                    g.width()
                ));
            }
        }
        let feats = vae.skip_features(grays)?;
        self.decode_with_features(vae, z, &feats)
    }

    pub fn decode_with_features(&self, vae: &Vae, z: &Tensor, feats: &SkipFeatures) -> Result<Tensor> {
        self.decoder.forward(&(z / vae.latent_scale)?, Some((&self.skips, feats)))
    }

    pub fn decode_images(&self, vae: &Vae, z: &Tensor, grays: &[&GrayImage]) -> Result<Vec<ImageRgb>> {
        tensor_to_images(&self.decode(vae, z, grays)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.tensors())
            .with_meta("kind", "luminance_decoder")
            .with_meta("config", serde_json::to_string(&self.config)?))
    }

    pub fn from_checkpoint(vae: &Vae, ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "luminance_decoder" {
            return Err(Error::Checkpoint(format!("expected a decoder checkpoint, found {}", ck.meta("kind")?)));
        }
        let config: VaeConfig = serde_json::from_str(ck.meta("config")?)?;
        if config != vae.config {
            return Err(Error::Checkpoint("decoder config differs from the vae config".into()));
        }
        let mut dec = Self::from_vae(vae, 0)?;
        dec.params.load(&ck.tensors, true)?;
        Ok(dec)
    }
}

/// Fixed, seeded random conv pyramid used as the perceptual feature space.
pub struct PerceptualNet {
    layers: Vec<PerceptualLayer>,
    _params: ParamStore,
}

enum PerceptualLayer {
    Conv(Conv3x3),
    Down(Downsample),
}

impl PerceptualNet {
    pub fn new(dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(PERCEPTUAL_SEED, dtype);
        let gain = std::f64::consts::SQRT_2;
        let layers = vec![
            PerceptualLayer::Conv(Conv3x3::with_init(&mut ps, "p0", 3, 8, Init::FanIn { fan_in: 27, gain })?),
            PerceptualLayer::Down(Downsample::new(&mut ps, "p1", 8, 16)?),
            PerceptualLayer::Conv(Conv3x3::with_init(&mut ps, "p2", 16, 16, Init::FanIn { fan_in: 144, gain })?),
            PerceptualLayer::Down(Downsample::new(&mut ps, "p3", 16, 32)?),
        ];
        Ok(Self { layers, _params: ps })
    }

    /// Raw weights of layer `i` (`conv`: 3×3×in×out, `down`: 4·in×out) and its
    /// bias, for independent re-implementations.
    pub fn layer_weights(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let name = format!("p{i}");
        let w = self._params.var(&format!("{name}.weight")).ok_or_else(|| Error::InvalidArgument(name.clone()))?;
        let b = self._params.var(&format!("{name}.bias")).ok_or_else(|| Error::InvalidArgument(name))?;
        Ok((w.as_tensor().clone(), b.as_tensor().clone()))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Activations after every layer (ReLU applied).
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = match layer {
                PerceptualLayer::Conv(c) => c.forward(&h)?,
                PerceptualLayer::Down(d) => d.forward(&h)?,
            }
            .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Mean over layers of the mean squared feature difference.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok((total.expect("at least one layer") / self.layers.len() as f64)?)
    }

    /// Global-average-pooled deepest features, one row per image.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        let last = feats.last().expect("at least one layer");
        Ok(last.mean((1, 2))?)
    }
}

/// `L2(pred, target) + lambda_p * L_p(pred, target)` on `[-1, 1]` image tensors.
pub fn decoder_loss(pred: &Tensor, target: &Tensor, cfg: &DecoderLossConfig, net: &PerceptualNet) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return shape_err(format!("decoder_loss: {:?} vs {:?}", pred.dims(), target.dims()));
    }
    if cfg.lambda_p < 0.0 {
        return invalid("lambda_p must be non-negative");
    }
    let l2 = (pred - target)?.sqr()?.mean_all()?;
    if cfg.lambda_p == 0.0 {
        return Ok(l2);
    }
    Ok((l2 + (net.distance(pred, target)? * cfg.lambda_p)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_p: f64,
    pub kl_weight: f64,
    /// Fraction of pretraining inputs replaced by their grayscale rendering so
    /// the encoder also sees the condition domain.
    pub gray_fraction: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, lr: 1e-4, lambda_p: 0.1, kl_weight: 1e-6, gray_fraction: 0.25, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(v)
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    idx.shuffle(&mut rng);
    idx
}

/// Pretrains encoder and baseline decoder, then fits the latent scale so
/// encoded latents have unit standard deviation.
pub fn pretrain_vae(
    vae: &mut Vae,
    images: &[ImageRgb],
    grays: &[GrayImage],
    cfg: &AutoencoderTrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if images.is_empty() || images.len() != grays.len() {
        return invalid("pretrain_vae needs one gray image per color image");
    }
    vae.latent_scale = 1.0;
    let net = PerceptualNet::new(vae.dtype())?;
    let loss_cfg = DecoderLossConfig { lambda_p: cfg.lambda_p };
    let mut opt = AdamW::new(vae.params.all_vars(), ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(images.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageRgb> = chunk
                .iter()
                .map(|&i| if rng.random::<f64>() < cfg.gray_fraction { &grays[i].rgb_replicated } else { &images[i] })
                .collect();
            let x = images_to_tensor(&batch, vae.dtype())?;
            let (mean, logvar, _) = vae.encoder.forward(&x)?;
            let noise = crate::nn::randn(&mut rng, mean.dims(), vae.dtype(), &Device::Cpu)?;
            let z = (&mean + (logvar.clone() * 0.5)?.exp()?.mul(&noise)?)?;
            let recon = vae.decoder.forward(&z, None)?;
            let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?.mean_all()?;
            let loss = (decoder_loss(&recon, &x, &loss_cfg, &net)? + (kl * (0.5 * cfg.kl_weight))?)?;
            opt.backward_step(&loss)?;
            let rec = LossRecord { step, epoch, loss: scalar(&loss)? };
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    fit_latent_scale(vae, images)?;
    Ok(log)
}

/// Sets the latent scale to `1 / std` of the posterior means over `images`.
pub fn fit_latent_scale(vae: &mut Vae, images: &[ImageRgb]) -> Result<f64> {
    let saved = vae.latent_scale;
    vae.latent_scale = 1.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in images.chunks(32) {
        let refs: Vec<&ImageRgb> = chunk.iter().collect();
        let z: Vec<f64> = vae.encode_images(&refs)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        n += z.len();
        sum += z.iter().sum::<f64>();
        sq += z.iter().map(|v| v * v).sum::<f64>();
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    if std <= 1e-8 {
        vae.latent_scale = saved;
        return Err(Error::NonFinite("degenerate latent statistics".into()));
    }
    vae.latent_scale = 1.0 / std;
    Ok(vae.latent_scale)
}

/// Trains the luminance-aware decoder (decoder copy, skip projections and
/// alphas) against the frozen encoder.
pub fn train_decoder(
    vae: &Vae,
    decoder: &mut LuminanceDecoder,
    images: &[ImageRgb],
    grays: &[GrayImage],
    cfg: &AutoencoderTrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if images.is_empty() || images.len() != grays.len() {
        return invalid("train_decoder needs one gray image per color image");
    }
    let net = PerceptualNet::new(vae.dtype())?;
    let loss_cfg = DecoderLossConfig { lambda_p: cfg.lambda_p };
    let mut opt = AdamW::new(decoder.params.all_vars(), ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(images.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let color: Vec<&ImageRgb> = chunk.iter().map(|&i| &images[i]).collect();
            let gray: Vec<&GrayImage> = chunk.iter().map(|&i| &grays[i]).collect();
            let x = images_to_tensor(&color, vae.dtype())?;
            let z = vae.encode(&x)?;
            let feats = vae.skip_features(&gray)?;
            let pred = decoder.decode_with_features(vae, &z, &feats)?;
            let loss = decoder_loss(&pred, &x, &loss_cfg, &net)?;
            opt.backward_step(&loss)?;
            let rec = LossRecord { step, epoch, loss: scalar(&loss)? };
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::extract_gray;

    fn tiny() -> VaeConfig {
        VaeConfig { channels: [4, 8, 8], latent_channels: 4, groups: 2 }
    }

    fn checker(h: usize, w: usize) -> ImageRgb {
        let mut img = ImageRgb::filled(h, w, [20, 40, 200]).unwrap();
        for y in 0..h {
            for x in 0..w {
                if (x / 4 + y / 4) % 2 == 0 {
                    img.set_pixel(y, x, [230, 60, 10]);
                }
            }
        }
        img
    }

    #[test]
    fn encode_shape_and_determinism() {
        let vae = Vae::new(tiny(), 1).unwrap();
        let img = checker(16, 24);
        let a = vae.encode_images(&[&img]).unwrap();
        assert_eq!(a.dims(), &[1, 4, 6, 4]);
        let b = vae.encode_images(&[&img]).unwrap();
        let (a, b): (Vec<f32>, Vec<f32>) =
            (a.flatten_all().unwrap().to_vec1().unwrap(), b.flatten_all().unwrap().to_vec1().unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_non_divisible() {
        let vae = Vae::new(tiny(), 1).unwrap();
        let img = ImageRgb::filled(10, 16, [1, 2, 3]).unwrap();
        assert!(matches!(vae.encode_images(&[&img]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decode_shape() {
        let vae = Vae::new(tiny(), 1).unwrap();
        let z = Tensor::zeros((2, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(vae.decode_baseline(&z).unwrap().dims(), &[2, 16, 16, 3]);
    }

    #[test]
    fn zero_skip_decoder_equals_baseline() {
        let vae = Vae::new(tiny(), 2).unwrap();
        let mut dec = LuminanceDecoder::from_vae(&vae, 3).unwrap();
        dec.zero_skips().unwrap();
        let img = checker(16, 16);
        let gray = extract_gray(&img);
        let z = vae.encode_images(&[&img]).unwrap();
        let a: Vec<f32> = vae.decode_baseline(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = dec.decode(&vae, &z, &[&gray]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn luminance_decoder_shape_mismatch() {
        let vae = Vae::new(tiny(), 2).unwrap();
        let dec = LuminanceDecoder::from_vae(&vae, 3).unwrap();
        let gray = extract_gray(&checker(20, 16));
        let z = Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(dec.decode(&vae, &z, &[&gray]), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_loss_zero_and_pure_mse() {
        let net = PerceptualNet::new(DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = crate::nn::randn(&mut rng, &[1, 8, 8, 3], DType::F64, &Device::Cpu).unwrap();
        let b = crate::nn::randn(&mut rng, &[1, 8, 8, 3], DType::F64, &Device::Cpu).unwrap();
        let same = decoder_loss(&a, &a, &DecoderLossConfig::default(), &net).unwrap();
        assert_eq!(same.to_scalar::<f64>().unwrap(), 0.0);
        let l = decoder_loss(&a, &b, &DecoderLossConfig { lambda_p: 0.0 }, &net).unwrap().to_scalar::<f64>().unwrap();
        let mse = (&a - &b).unwrap().sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, mse);
        assert!(decoder_loss(&a, &b, &DecoderLossConfig { lambda_p: -1.0 }, &net).is_err());
        let c = crate::nn::randn(&mut rng, &[1, 8, 4, 3], DType::F64, &Device::Cpu).unwrap();
        assert!(decoder_loss(&a, &c, &DecoderLossConfig::default(), &net).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_encoding() {
        let mut vae = Vae::new(tiny(), 5).unwrap();
        vae.set_latent_scale(0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.safetensors");
        vae.to_checkpoint().unwrap().save(&path).unwrap();
        let back = Vae::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let img = checker(16, 16);
        let a: Vec<f32> = vae.encode_images(&[&img]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.encode_images(&[&img]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert_eq!(back.latent_scale(), 0.7);
    }

    #[test]
    fn image_tensor_roundtrip() {
        let img = checker(8, 8);
        let t = images_to_tensor(&[&img], DType::F32).unwrap();
        assert_eq!(tensor_to_images(&t).unwrap()[0], img);
    }
}
