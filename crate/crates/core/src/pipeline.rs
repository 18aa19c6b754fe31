//! End-to-end stages: dataset synthesis, autoencoder pretraining, decoder
//! training, diffusion training, colorization and evaluation, driven by one
//! serializable run configuration.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::cdm::{train_cdm, Cdm, CdmConfig, CdmTrainConfig};
use crate::checkpoint::Checkpoint;
use crate::colorspace::{extract_gray, luminance_lock, GrayImage, ImageRgb};
use crate::data::{load_dataset, synth_shapes, write_dataset, EncodedDataset, Sample, RESOLUTION};
use crate::diffusion::{ddim_sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::guidance::{generate_priors, AnnotationProvider, GuidanceConfig, ImageGuidance, SemanticPriors};
use crate::metrics::{evaluate, report_paths, Embedder, MetricReport, PerceptualEmbedder};
use crate::vae::{
    grays_to_tensor, pretrain_vae, tensor_to_images, train_decoder, AutoencoderTrainConfig, LossRecord,
    LuminanceDecoder, Vae, VaeConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub vae: VaeConfig,
    pub cdm: CdmConfig,
    pub vae_train: AutoencoderTrainConfig,
    pub decoder_train: AutoencoderTrainConfig,
    pub cdm_train: CdmTrainConfig,
    pub guidance: GuidanceConfig,
    pub eta: f64,
    pub seed: u64,
    /// Segmentation guidance on/off (the caption is used either way).
    pub seg_guidance: bool,
    pub luminance_lock: bool,
    /// Images sampled together during colorization.
    pub sample_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("out"),
            vae: VaeConfig::default(),
            cdm: CdmConfig::default(),
            vae_train: AutoencoderTrainConfig::default(),
            decoder_train: AutoencoderTrainConfig::default(),
            cdm_train: CdmTrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eta: 0.0,
            seed: 0,
            seg_guidance: true,
            luminance_lock: false,
            sample_batch: 16,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.cdm.validate()?;
        self.guidance.validate()?;
        if self.guidance.steps > self.cdm.train_timesteps {
            return invalid(format!(
                "inference steps {} must lie in 1..={}",
                self.guidance.steps, self.cdm.train_timesteps
            ));
        }
        if self.eta < 0.0 {
            return invalid("eta must be non-negative");
        }
        if self.sample_batch == 0 {
            return invalid("sample_batch must be positive");
        }
        for (name, lr) in [("vae", self.vae_train.lr), ("decoder", self.decoder_train.lr), ("cdm", self.cdm_train.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("{name} learning rate must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.cdm_train.dropout_p) {
            return invalid("probabilities must lie in [0, 1]");
        }
        if self.decoder_train.lambda_p < 0.0 || self.vae_train.lambda_p < 0.0 {
            return invalid("lambda_p must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.cdm.train_timesteps)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.guidance.steps, eta: self.eta, seed: self.seed }
    }

    /// Writes this configuration as pretty JSON.
    pub fn dump(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vae,
    Decoder,
    Cdm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Decoder => "decoder",
            Stage::Cdm => "cdm",
        }
    }

    pub fn checkpoint(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.safetensors", self.name()))
    }

    pub fn log(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_log.json", self.name()))
    }
}

fn require(stage: Stage, dir: &Path) -> Result<Checkpoint> {
    let path = stage.checkpoint(dir);
    if !path.is_file() {
        return Err(Error::MissingPrerequisite(format!(
            "{} checkpoint required at {}",
            stage.name(),
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

pub fn load_vae(dir: &Path) -> Result<Vae> {
    Vae::from_checkpoint(&require(Stage::Vae, dir)?)
}

pub fn load_decoder(vae: &Vae, dir: &Path) -> Result<LuminanceDecoder> {
    LuminanceDecoder::from_checkpoint(vae, &require(Stage::Decoder, dir)?)
}

pub fn load_cdm(dir: &Path) -> Result<Cdm> {
    Cdm::from_checkpoint(&require(Stage::Cdm, dir)?)
}

fn write_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Synthesizes and writes a dataset; returns the samples.
pub fn synth_stage(seed: u64, n: usize, out: &Path) -> Result<Vec<Sample>> {
    let samples = synth_shapes(seed, n)?;
    write_dataset(&samples, out, seed)?;
    Ok(samples)
}

fn load_training_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    if !cfg.data_dir.exists() {
        return Err(Error::MissingPrerequisite(format!("dataset required at {}", cfg.data_dir.display())));
    }
    load_dataset(&cfg.data_dir)
}

fn split_images(samples: &[Sample]) -> (Vec<ImageRgb>, Vec<GrayImage>) {
    (samples.iter().map(|s| s.image.clone()).collect(), samples.iter().map(|s| s.gray.clone()).collect())
}

/// Pretrains encoder and baseline decoder on `samples`.
pub fn train_vae_on(cfg: &RunConfig, samples: &[Sample]) -> Result<(Vae, Vec<LossRecord>)> {
    let mut vae = Vae::new(cfg.vae.clone(), cfg.vae_train.seed)?;
    let (images, grays) = split_images(samples);
    let log = pretrain_vae(&mut vae, &images, &grays, &cfg.vae_train, |r| {
        log::debug!("vae step {} loss {:.6}", r.step, r.loss)
    })?;
    Ok((vae, log))
}

/// Trains the luminance-aware decoder against a frozen encoder.
pub fn train_decoder_on(cfg: &RunConfig, vae: &Vae, samples: &[Sample]) -> Result<(LuminanceDecoder, Vec<LossRecord>)> {
    let mut decoder = LuminanceDecoder::from_vae(vae, cfg.decoder_train.seed)?;
    let (images, grays) = split_images(samples);
    let log = train_decoder(vae, &mut decoder, &images, &grays, &cfg.decoder_train, |r| {
        log::debug!("decoder step {} loss {:.6}", r.step, r.loss)
    })?;
    Ok((decoder, log))
}

/// Trains the diffusion model on latents of `samples`.
pub fn train_cdm_on(cfg: &RunConfig, vae: &Vae, samples: &[Sample]) -> Result<(Cdm, Vec<LossRecord>)> {
    let data = EncodedDataset::encode(vae, samples)?;
    let mut cdm = Cdm::new(cfg.cdm.clone(), cfg.cdm_train.seed)?;
    let log = train_cdm(&mut cdm, &data, &cfg.schedule()?, &cfg.cdm_train, |r, _| {
        if r.step % 100 == 0 {
            log::info!("cdm step {} loss {:.6}", r.step, r.loss);
        }
    })?;
    Ok((cdm, log))
}

/// Runs one training stage from the configured dataset and checkpoint
/// directory, writing the checkpoint, its loss log and the effective config.
pub fn train_stage(cfg: &RunConfig, stage: Stage) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let dir = &cfg.checkpoint_dir;
    let vae = match stage {
        Stage::Vae => None,
        _ => Some(load_vae(dir)?),
    };
    let samples = load_training_set(cfg)?;
    std::fs::create_dir_all(dir)?;
    let (ck, log) = match (stage, &vae) {
        (Stage::Vae, _) => {
            let (vae, log) = train_vae_on(cfg, &samples)?;
            (vae.to_checkpoint()?, log)
        }
        (Stage::Decoder, Some(vae)) => {
            let (dec, log) = train_decoder_on(cfg, vae, &samples)?;
            (dec.to_checkpoint()?, log)
        }
        (Stage::Cdm, Some(vae)) => {
            let (cdm, log) = train_cdm_on(cfg, vae, &samples)?;
            (cdm.to_checkpoint()?, log)
        }
        _ => unreachable!("vae is loaded for every later stage"),
    };
    ck.save(stage.checkpoint(dir))?;
    write_log(&stage.log(dir), &log)?;
    cfg.dump(&dir.join(format!("{}_config.json", stage.name())))?;
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    LuminanceAware,
    Baseline,
}

/// Per-call colorization switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorizeOptions {
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    /// Per-instance segmentation guidance.
    pub seg_guidance: bool,
    /// Caption conditioning; without it the null text condition is used.
    pub text_guidance: bool,
    pub luminance_lock: bool,
    pub decoder: DecoderKind,
    pub batch: usize,
}

impl ColorizeOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            sampler: cfg.sampler(),
            guidance: cfg.guidance,
            seg_guidance: cfg.seg_guidance,
            text_guidance: true,
            luminance_lock: cfg.luminance_lock,
            decoder: DecoderKind::LuminanceAware,
            batch: cfg.sample_batch,
        }
    }
}

/// Frozen models for inference.
pub struct Colorizer {
    pub vae: Vae,
    pub decoder: LuminanceDecoder,
    pub cdm: Cdm,
    pub schedule: NoiseSchedule,
}

impl Colorizer {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let vae = load_vae(&cfg.checkpoint_dir)?;
        let decoder = load_decoder(&vae, &cfg.checkpoint_dir)?;
        let cdm = load_cdm(&cfg.checkpoint_dir)?;
        let schedule = NoiseSchedule::linear(cdm.config().train_timesteps)?;
        Ok(Self { vae, decoder, cdm, schedule })
    }

    /// Samples clean latents for the grayscale inputs. Image `i` starts from
    /// noise seeded with `seed + i`, independent of batching.
    pub fn sample_latents(&self, grays: &[&GrayImage], priors: &[SemanticPriors], opts: &ColorizeOptions) -> Result<Tensor> {
        if grays.len() != priors.len() {
            return invalid("one prior set per image required");
        }
        if opts.batch == 0 {
            return invalid("batch must be positive");
        }
        let mut out = Vec::new();
        for start in (0..grays.len()).step_by(opts.batch) {
            let end = (start + opts.batch).min(grays.len());
            let chunk = &grays[start..end];
            let zc = self.vae.encode(&grays_to_tensor(chunk, self.vae.dtype())?)?;
            let (_, h, w, _) = zc.dims4()?;
            let mut rows = Vec::with_capacity(chunk.len());
            for p in &priors[start..end] {
                rows.push(if opts.text_guidance && !p.caption.trim().is_empty() {
                    self.cdm.embed_texts(&[&p.caption])?
                } else {
                    self.cdm.null_context(1)?
                });
            }
            let context = Tensor::cat(&rows, 0)?;
            let plans = if opts.seg_guidance {
                let mut plans = Vec::with_capacity(chunk.len());
                for p in &priors[start..end] {
                    plans.push(ImageGuidance::prepare(&self.cdm, p, h, w, zc.dtype())?);
                }
                Some(plans)
            } else {
                None
            };
            let sampler = SamplerConfig { seed: opts.sampler.seed.wrapping_add(start as u64), ..opts.sampler };
            out.push(ddim_sample(&self.cdm, &zc, &context, &self.schedule, &sampler, &opts.guidance, plans.as_deref())?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    /// Decodes latents with the chosen decoder, optionally locking lightness.
    pub fn decode(&self, z: &Tensor, grays: &[&GrayImage], opts: &ColorizeOptions) -> Result<Vec<ImageRgb>> {
        let mut images = Vec::with_capacity(grays.len());
        for start in (0..grays.len()).step_by(opts.batch.max(1)) {
            let end = (start + opts.batch.max(1)).min(grays.len());
            let zb = z.narrow(0, start, end - start)?;
            images.extend(match opts.decoder {
                DecoderKind::LuminanceAware => self.decoder.decode_images(&self.vae, &zb, &grays[start..end])?,
                DecoderKind::Baseline => tensor_to_images(&self.vae.decode_baseline(&zb)?)?,
            });
        }
        if opts.luminance_lock {
            images = images.iter().zip(grays).map(|(img, g)| luminance_lock(img, g)).collect::<Result<_>>()?;
        }
        Ok(images)
    }

    pub fn colorize(&self, grays: &[&GrayImage], priors: &[SemanticPriors], opts: &ColorizeOptions) -> Result<Vec<ImageRgb>> {
        let z = self.sample_latents(grays, priors, opts)?;
        self.decode(&z, grays, opts)
    }
}

/// Reads an input image as grayscale at the working resolution: center
/// square crop, resize, then lightness extraction (color inputs included).
pub fn load_gray_input(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let mut sq = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    if side as usize != RESOLUTION {
        sq = sq.resize_exact(RESOLUTION as u32, RESOLUTION as u32, FilterType::Triangle);
    }
    let rgb = ImageRgb::new(RESOLUTION, RESOLUTION, sq.to_rgb8().into_raw())?;
    Ok(extract_gray(&rgb))
}

/// Input PNGs: the file itself, or every PNG in a directory (sorted).
pub fn collect_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::Dataset(format!("input {} not found", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG inputs in {}", path.display())));
    }
    Ok(files)
}

/// Colorizes every input PNG into `cfg.output_dir/{stem}.png` and dumps the
/// effective configuration next to the outputs.
pub fn colorize_stage(cfg: &RunConfig, input: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = Colorizer::load(cfg)?;
    let inputs = collect_inputs(input)?;
    let mut grays = Vec::with_capacity(inputs.len());
    let mut priors = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let gray = load_gray_input(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        priors.push(generate_priors(&gray, stem, &AnnotationProvider::for_image_dir(dir))?);
        grays.push(gray);
    }
    let refs: Vec<&GrayImage> = grays.iter().collect();
    let images = model.colorize(&refs, &priors, &ColorizeOptions::from_config(cfg))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::with_capacity(images.len());
    for (path, img) in inputs.iter().zip(&images) {
        let out = cfg.output_dir.join(path.file_name().unwrap());
        img.save_png(&out)?;
        written.push(out);
    }
    cfg.dump(&cfg.output_dir.join("colorize_config.json"))?;
    Ok(written)
}

/// Evaluates predictions against references and writes `metrics.json` and
/// `metrics.txt` into `out_dir`.
pub fn evaluate_stage(pred: &Path, reference: &Path, out_dir: &Path, frechet: bool) -> Result<MetricReport> {
    let embedder = if frechet { Some(PerceptualEmbedder::new()?) } else { None };
    let report = evaluate(pred, reference, embedder.as_ref().map(|e| e as &dyn Embedder))?;
    std::fs::create_dir_all(out_dir)?;
    let (json, table) = report_paths(out_dir);
    std::fs::write(json, report.to_json()?)?;
    std::fs::write(table, report.to_table())?;
    Ok(report)
}
