//! High-level semantic priors (categories, caption, instance masks with
//! labels) behind a provider interface, and the segmentation-guided denoising
//! step: a global caption-conditioned update, plus per-instance updates on the
//! masked grayscale latent that overwrite the global result inside each mask.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cdm::dual_cfg_predict;
use crate::colorspace::GrayImage;
use crate::data::read_annotation;
use crate::diffusion::{ddim_step, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, shape_err, Result};

/// Binary instance mask at image resolution with its text label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
    label: String,
    area: usize,
}

impl InstanceMask {
    /// `mask` is row-major with values 0 or 1; it must cover at least one pixel.
    pub fn new(height: usize, width: usize, mask: Vec<u8>, label: impl Into<String>) -> Result<Self> {
        if mask.len() != height * width || height == 0 || width == 0 {
            return shape_err(format!("mask of {} values for {height}x{width}", mask.len()));
        }
        if mask.iter().any(|&v| v > 1) {
            return invalid("mask values must be 0 or 1");
        }
        let area = mask.iter().filter(|&&v| v == 1).count();
        if area == 0 {
            return invalid("instance mask is empty");
        }
        Ok(Self { height, width, mask, label: label.into(), area })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x] == 1
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemanticPriors {
    pub categories: Vec<String>,
    pub caption: String,
    pub instances: Vec<InstanceMask>,
}

impl SemanticPriors {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Segmentation strength `i` in `[0, 1]`.
    pub strength: f64,
    /// Inference step count `T`.
    pub steps: usize,
    /// Classifier-free guidance scale `w`.
    pub cfg_scale: f64,
    /// Guidance scale for the grayscale condition; 1 leaves it unguided.
    pub gray_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { strength: 0.3, steps: 50, cfg_scale: 3.0, gray_scale: 1.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return invalid(format!("strength {} outside [0, 1]", self.strength));
        }
        if self.steps == 0 {
            return invalid("guidance needs at least one step");
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return invalid(format!("cfg scale {} must be finite and non-negative", self.cfg_scale));
        }
        if !(self.gray_scale >= 0.0 && self.gray_scale.is_finite()) {
            return invalid(format!("grayscale guidance scale {} must be finite and non-negative", self.gray_scale));
        }
        Ok(())
    }

    /// `T_th = T × (1 − i)`.
    pub fn threshold(&self) -> f64 {
        self.steps as f64 * (1.0 - self.strength)
    }
}

/// Whether segmentation guidance applies at inference step `k` (counted
/// `1..=T`, with `T` the noisiest): `k > T × (1 − i)`.
pub fn segmentation_active(k: usize, cfg: &GuidanceConfig) -> bool {
    // The tolerance keeps products like 50 × 0.7 from landing just above 35.
    k as f64 > cfg.threshold() + 1e-9
}

/// Source of semantic priors for an image.
pub trait PriorProvider {
    /// `key` identifies the image (file stem or dataset id).
    fn priors(&self, key: &str, gray: &GrayImage) -> Result<SemanticPriors>;
}

/// Reads priors from per-image annotation JSON files.
#[derive(Debug, Clone)]
pub struct AnnotationProvider {
    dirs: Vec<PathBuf>,
}

impl AnnotationProvider {
    /// Looks for `{key}.json` in each directory in turn.
    pub fn new(dirs: impl IntoIterator<Item = PathBuf>) -> Self {
        Self { dirs: dirs.into_iter().collect() }
    }

    /// Sidecar files next to the image and the dataset `annotations/` folder.
    pub fn for_image_dir(dir: &Path) -> Self {
        Self::new([dir.to_path_buf(), dir.join("annotations"), dir.join("..").join("annotations")])
    }
}

impl PriorProvider for AnnotationProvider {
    fn priors(&self, key: &str, gray: &GrayImage) -> Result<SemanticPriors> {
        for dir in &self.dirs {
            let path = dir.join(format!("{key}.json"));
            if path.is_file() {
                let priors = read_annotation(&path)?;
                for inst in &priors.instances {
                    if inst.height() != gray.height() || inst.width() != gray.width() {
                        return shape_err(format!(
                            "{}: mask {}x{} for image {}x{}",
                            path.display(),
                            inst.height(),
                            inst.width(),
                            gray.height(),
                            gray.width()
                        ));
                    }
                }
                return Ok(priors);
            }
        }
        Ok(SemanticPriors::none())
    }
}

/// Provider that never has priors.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPriors;

impl PriorProvider for NoPriors {
    fn priors(&self, _key: &str, _gray: &GrayImage) -> Result<SemanticPriors> {
        Ok(SemanticPriors::none())
    }
}

pub fn generate_priors(gray: &GrayImage, key: &str, provider: &dyn PriorProvider) -> Result<SemanticPriors> {
    provider.priors(key, gray)
}

/// Text tokens for one string, `1 × L × d`.
pub fn embed_text<M: NoisePredictor + ?Sized>(model: &M, text: &str) -> Result<Tensor> {
    model.embed_texts(&[text])
}

/// Area-average downsample to `h × w` then binarize (`≥ 0.5` → 1). Returns
/// `None` when nothing survives.
pub fn resize_mask(m: &InstanceMask, h: usize, w: usize) -> Result<Option<Vec<u8>>> {
    if h == 0 || w == 0 || m.height % h != 0 || m.width % w != 0 {
        return shape_err(format!("cannot resize a {}x{} mask to {h}x{w}", m.height, m.width));
    }
    let (fy, fx) = (m.height / h, m.width / w);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut count = 0;
            for dy in 0..fy {
                for dx in 0..fx {
                    count += m.mask[(y * fy + dy) * m.width + x * fx + dx] as usize;
                }
            }
            if 2 * count >= fy * fx {
                out[y * w + x] = 1;
            }
        }
    }
    Ok(if out.contains(&1) { Some(out) } else { None })
}

/// One instance ready for latent-space guidance.
#[derive(Debug, Clone)]
pub struct LatentInstance {
    /// `h × w × 1` binary mask.
    pub mask: Tensor,
    /// `1 × L × d` label tokens.
    pub context: Tensor,
    pub label: String,
}

/// Per-image guidance plan: instances in application order (decreasing area).
#[derive(Debug, Clone, Default)]
pub struct ImageGuidance {
    pub instances: Vec<LatentInstance>,
}

impl ImageGuidance {
    pub fn none() -> Self {
        Self::default()
    }

    /// Resizes masks to the latent grid and embeds labels; vanished masks are
    /// skipped with a warning.
    pub fn prepare<M: NoisePredictor + ?Sized>(
        model: &M,
        priors: &SemanticPriors,
        h: usize,
        w: usize,
        dtype: DType,
    ) -> Result<Self> {
        let mut order: Vec<&InstanceMask> = priors.instances.iter().collect();
        order.sort_by(|a, b| b.area.cmp(&a.area));
        let mut instances = Vec::new();
        for inst in order {
            match resize_mask(inst, h, w)? {
                Some(m) => instances.push(LatentInstance {
                    mask: Tensor::from_vec(m, (h, w, 1), &Device::Cpu)?.to_dtype(dtype)?,
                    context: embed_text(model, &inst.label)?,
                    label: inst.label.clone(),
                }),
                None => log::warn!("instance '{}' vanishes at {h}x{w} latent resolution; skipped", inst.label),
            }
        }
        Ok(Self { instances })
    }
}

/// One guided denoising step for a batch at inference step `k`.
///
/// Computes the caption-conditioned update for every image; when
/// segmentation is active, also the per-instance updates (grayscale latent
/// masked by the instance, label as text) and writes each into its mask in
/// the stored order. All model evaluations of the step share one batched call
/// per kind.
#[allow(clippy::too_many_arguments)]
pub fn guided_step<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t: &Tensor,
    k: usize,
    t: usize,
    t_prev: usize,
    z_c: &Tensor,
    context: &Tensor,
    guidance: &[ImageGuidance],
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let b = z_t.dim(0)?;
    if guidance.len() != b {
        return shape_err(format!("{} guidance entries for a batch of {b}", guidance.len()));
    }
    let eps = dual_cfg_predict(model, z_t, &vec![t; b], z_c, context, cfg.cfg_scale, cfg.gray_scale)?;
    let global = ddim_step(z_t, &eps, t, t_prev, schedule, eta, noise)?;
    let total: usize = guidance.iter().map(|g| g.instances.len()).sum();
    if !segmentation_active(k, cfg) || total == 0 {
        return Ok(global);
    }

    let mut zt_rows = Vec::with_capacity(total);
    let mut zc_rows = Vec::with_capacity(total);
    let mut ctx_rows = Vec::with_capacity(total);
    let mut noise_rows = Vec::with_capacity(total);
    for (i, g) in guidance.iter().enumerate() {
        for inst in &g.instances {
            zt_rows.push(z_t.narrow(0, i, 1)?);
            zc_rows.push(z_c.narrow(0, i, 1)?.broadcast_mul(&inst.mask)?);
            ctx_rows.push(inst.context.clone());
            if let Some(n) = noise {
                noise_rows.push(n.narrow(0, i, 1)?);
            }
        }
    }
    let zt_i = Tensor::cat(&zt_rows, 0)?;
    let ctx_i = Tensor::cat(&ctx_rows, 0)?;
    let eps_i = dual_cfg_predict(model, &zt_i, &vec![t; total], &Tensor::cat(&zc_rows, 0)?, &ctx_i, cfg.cfg_scale, cfg.gray_scale)?;
    let noise_i = if noise_rows.is_empty() { None } else { Some(Tensor::cat(&noise_rows, 0)?) };
    let per_instance = ddim_step(&zt_i, &eps_i, t, t_prev, schedule, eta, noise_i.as_ref())?;

    let mut out = Vec::with_capacity(b);
    let mut row = 0;
    for (i, g) in guidance.iter().enumerate() {
        let mut z = global.narrow(0, i, 1)?;
        for inst in &g.instances {
            let zi = per_instance.narrow(0, row, 1)?;
            let keep = inst.mask.affine(-1.0, 1.0)?;
            z = (z.broadcast_mul(&keep)? + zi.broadcast_mul(&inst.mask)?)?;
            row += 1;
        }
        out.push(z);
    }
    Ok(Tensor::cat(&out, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_table() {
        let cfg = GuidanceConfig { strength: 0.3, steps: 50, ..Default::default() };
        for k in 1..=50 {
            assert_eq!(segmentation_active(k, &cfg), k >= 36, "k={k}");
        }
        let never = GuidanceConfig { strength: 0.0, ..cfg };
        assert!((1..=50).all(|k| !segmentation_active(k, &never)));
        let always = GuidanceConfig { strength: 1.0, ..cfg };
        assert!((1..=50).all(|k| segmentation_active(k, &always)));
    }

    #[test]
    fn resize_mask_hand_cases() {
        let ones = InstanceMask::new(8, 8, vec![1; 64], "x").unwrap();
        assert_eq!(resize_mask(&ones, 2, 2).unwrap(), Some(vec![1; 4]));
        // Top half of an 8×8 grid maps to the top row of the 2×2 grid.
        let half: Vec<u8> = (0..64).map(|i| u8::from(i < 32)).collect();
        let half = InstanceMask::new(8, 8, half, "x").unwrap();
        assert_eq!(resize_mask(&half, 2, 2).unwrap(), Some(vec![1, 1, 0, 0]));
        // Three of four rows inside the top cell: 12/16 ≥ 0.5; bottom cell 4/16.
        let three: Vec<u8> = (0..64).map(|i| u8::from(i < 40)).collect();
        let three = InstanceMask::new(8, 8, three, "x").unwrap();
        assert_eq!(resize_mask(&three, 2, 2).unwrap(), Some(vec![1, 1, 0, 0]));
        let mut one = vec![0u8; 16];
        one[5] = 1;
        let one = InstanceMask::new(4, 4, one, "x").unwrap();
        assert_eq!(resize_mask(&one, 1, 1).unwrap(), None);
        assert!(resize_mask(&one, 3, 3).is_err());
    }

    #[test]
    fn instance_mask_validation() {
        assert!(InstanceMask::new(2, 2, vec![0; 4], "x").is_err());
        assert!(InstanceMask::new(2, 2, vec![0, 2, 0, 0], "x").is_err());
        assert!(InstanceMask::new(2, 2, vec![1; 3], "x").is_err());
        assert_eq!(InstanceMask::new(2, 2, vec![1, 0, 1, 0], "x").unwrap().area(), 2);
    }
}
