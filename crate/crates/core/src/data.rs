//! Synthetic annotated shapes, dataset I/O in the annotation format consumed
//! by the prior provider, folder ingestion, and pre-encoded latent batches.
//!
//! The shape palette has two isoluminant tiers (L* ≈ 55 and L* ≈ 75), so the
//! grayscale rendering of a shape tells its tier but not its hue.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::imageops::FilterType;
use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{extract_gray, rgb_pixel_to_lab, GrayImage, ImageRgb};
use crate::diffusion::TrainBatch;
use crate::error::{invalid, Error, Result};
use crate::guidance::{InstanceMask, SemanticPriors};
use crate::vae::{epoch_order, Vae};

pub const RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

const fn named(name: &'static str, rgb: [u8; 3]) -> NamedColor {
    NamedColor { name, rgb }
}

/// Shape colors: five hues at L* ≈ 55, five at L* ≈ 75.
pub const PALETTE: [NamedColor; 10] = [
    named("red", [255, 41, 40]),
    named("olive", [127, 139, 3]),
    named("teal", [1, 148, 131]),
    named("blue", [5, 141, 195]),
    named("magenta", [224, 2, 251]),
    named("pink", [255, 155, 186]),
    named("orange", [255, 165, 31]),
    named("green", [5, 213, 83]),
    named("cyan", [7, 203, 227]),
    named("lavender", [167, 181, 254]),
];

/// Background colors, each at a lightness distinct from both shape tiers.
pub const BACKGROUNDS: [NamedColor; 4] = [
    named("navy", [0, 0, 128]),
    named("maroon", [128, 0, 0]),
    named("forest", [0, 100, 40]),
    named("cream", [250, 245, 225]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(y, x)` (sampled at its center) lies in the shape with
    /// bounding box `top, left, size`.
    pub fn contains(self, top: usize, left: usize, size: usize, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5 - top as f64, x as f64 + 0.5 - left as f64);
        let s = size as f64;
        if py < 0.0 || px < 0.0 || py >= s || px >= s {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (py - r).powi(2) + (px - r).powi(2) <= r * r
            }
            Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

/// Words the text encoder knows without hashing.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = vec!["a".into(), "and".into()];
    v.extend(PALETTE.iter().map(|c| c.name.to_string()));
    v.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    v
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageRgb,
    pub gray: GrayImage,
    pub priors: SemanticPriors,
}

struct Placement {
    shape: Shape,
    color: NamedColor,
    top: usize,
    left: usize,
    size: usize,
}

fn synth_one(seed: u64, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = RESOLUTION;
    let background = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let wanted = match rng.random::<f64>() {
        p if p < 0.5 => 1,
        p if p < 0.8 => 2,
        _ => 3,
    };
    let mut colors: Vec<NamedColor> = PALETTE.to_vec();
    colors.shuffle(&mut rng);
    let mut placed: Vec<Placement> = Vec::new();
    let mut attempts = 0;
    while placed.len() < wanted && attempts < 200 {
        attempts += 1;
        let size = rng.random_range(16..=28);
        let top = rng.random_range(0..=n - size);
        let left = rng.random_range(0..=n - size);
        let gap = 2;
        let clear = placed.iter().all(|p| {
            top + size + gap <= p.top || p.top + p.size + gap <= top || left + size + gap <= p.left || p.left + p.size + gap <= left
        });
        if clear {
            let shape = Shape::ALL[rng.random_range(0..3)];
            placed.push(Placement { shape, color: colors[placed.len()], top, left, size });
        }
    }
    let mut image = ImageRgb::filled(n, n, background.rgb)?;
    let mut instances = Vec::with_capacity(placed.len());
    for p in &placed {
        let mut mask = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                if p.shape.contains(p.top, p.left, p.size, y, x) {
                    mask[y * n + x] = 1;
                    image.set_pixel(y, x, p.color.rgb);
                }
            }
        }
        instances.push(InstanceMask::new(n, n, mask, format!("{} {}", p.color.name, p.shape.name()))?);
    }
    let caption = placed
        .iter()
        .map(|p| format!("a {} {}", p.color.name, p.shape.name()))
        .collect::<Vec<_>>()
        .join(" and ");
    let categories = placed.iter().map(|p| p.shape.name().to_string()).collect();
    let gray = extract_gray(&image);
    Ok(Sample { id: format!("{index:05}"), image, gray, priors: SemanticPriors { categories, caption, instances } })
}

/// `n` samples of 1–3 disjoint colored shapes on a plain background. Sample
/// `i` depends only on `(seed, i)`.
pub fn synth_shapes(seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return invalid("synth_shapes needs n >= 1");
    }
    (0..n).map(|i| synth_one(seed, i)).collect()
}

/// Name of the palette color nearest in CIELAB.
pub fn nearest_palette_color(rgb: [u8; 3]) -> &'static str {
    let lab = rgb_pixel_to_lab(rgb);
    PALETTE
        .iter()
        .map(|c| {
            let p = rgb_pixel_to_lab(c.rgb);
            let d = (0..3).map(|i| (lab[i] - p[i]).powi(2)).sum::<f64>();
            (d, c.name)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, n)| n)
        .unwrap()
}

/// Most frequent nearest-palette color over the masked pixels; ties go to
/// the earlier palette entry.
pub fn dominant_color(img: &ImageRgb, mask: &InstanceMask) -> Result<&'static str> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return invalid("dominant_color: mask and image sizes differ");
    }
    let mut counts = [0usize; PALETTE.len()];
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x) {
                let name = nearest_palette_color(img.pixel(y, x));
                counts[PALETTE.iter().position(|c| c.name == name).unwrap()] += 1;
            }
        }
    }
    let best = (0..PALETTE.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
    Ok(PALETTE[best].name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInstance {
    pub label: String,
    pub mask_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub caption: String,
    pub categories: Vec<String>,
    pub instances: Vec<AnnotationInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub instances: usize,
}

fn save_mask(mask: &InstanceMask, path: &Path) -> Result<()> {
    let values: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, values)
        .ok_or_else(|| Error::Dataset("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn load_mask(path: &Path, label: &str) -> Result<InstanceMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    InstanceMask::new(h as usize, w as usize, values, label)
}

/// Writes `images/`, `masks/`, `annotations/` and `manifest.json` under `root`.
pub fn write_dataset(samples: &[Sample], root: &Path, seed: u64) -> Result<()> {
    for sub in ["images", "masks", "annotations"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let mut total_instances = 0;
    for s in samples {
        s.image.save_png(root.join("images").join(format!("{}.png", s.id)))?;
        let mut instances = Vec::with_capacity(s.priors.instances.len());
        for (i, inst) in s.priors.instances.iter().enumerate() {
            let rel = format!("masks/{}_{i}.png", s.id);
            save_mask(inst, &root.join(&rel))?;
            instances.push(AnnotationInstance { label: inst.label().to_string(), mask_png: rel });
        }
        total_instances += instances.len();
        let ann = Annotation { caption: s.priors.caption.clone(), categories: s.priors.categories.clone(), instances };
        std::fs::write(root.join("annotations").join(format!("{}.json", s.id)), serde_json::to_string_pretty(&ann)?)?;
    }
    let manifest = Manifest { seed, count: samples.len(), resolution: RESOLUTION, instances: total_instances };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Parses an annotation file. Mask paths are resolved against the file's
/// directory, then against its parent (dataset-root-relative paths).
pub fn read_annotation(path: &Path) -> Result<SemanticPriors> {
    let ann: Annotation = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut instances = Vec::with_capacity(ann.instances.len());
    for inst in &ann.instances {
        let candidates = [dir.join(&inst.mask_png), dir.join("..").join(&inst.mask_png)];
        let found = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Dataset(format!("{}: mask {} not found", path.display(), inst.mask_png)))?;
        instances.push(load_mask(found, &inst.label)?);
    }
    Ok(SemanticPriors { categories: ann.categories, caption: ann.caption, instances })
}

fn center_square(img: DynamicImage, size: usize, filter: FilterType) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    if side as usize == size {
        cropped
    } else {
        cropped.resize_exact(size as u32, size as u32, filter)
    }
}

fn fit_mask(mask: &InstanceMask, size: usize) -> Result<Option<InstanceMask>> {
    if mask.height() == size && mask.width() == size {
        return Ok(Some(mask.clone()));
    }
    let values: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, values)
        .ok_or_else(|| Error::Dataset("mask buffer size".into()))?;
    let fitted = center_square(DynamicImage::ImageLuma8(img), size, FilterType::Nearest).to_luma8();
    let values: Vec<u8> = fitted.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    if values.contains(&1) {
        Ok(Some(InstanceMask::new(size, size, values, mask.label())?))
    } else {
        log::warn!("mask '{}' is empty after cropping; dropped", mask.label());
        Ok(None)
    }
}

/// Annotation for an image stem: `{stem}.json` next to the image, in an
/// `annotations/` subfolder, or in a sibling `annotations/` folder.
pub fn find_annotation(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.to_path_buf(), dir.join("annotations"), dir.join("..").join("annotations")]
        .into_iter()
        .map(|d| d.join(format!("{stem}.json")))
        .find(|p| p.is_file())
}

/// Loads every PNG in `dir` (sorted by name), center-cropped to a square and
/// resized to the working resolution, with annotations when present.
pub fn load_folder(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                continue;
            }
        };
        let rgb = center_square(img, RESOLUTION, FilterType::Triangle).to_rgb8();
        let image = ImageRgb::new(RESOLUTION, RESOLUTION, rgb.into_raw())?;
        let priors = match find_annotation(dir, &stem) {
            Some(ann) => {
                let raw = read_annotation(&ann)?;
                let mut instances = Vec::with_capacity(raw.instances.len());
                for m in &raw.instances {
                    instances.extend(fit_mask(m, RESOLUTION)?);
                }
                SemanticPriors { instances, ..raw }
            }
            None => SemanticPriors::none(),
        };
        let gray = extract_gray(&image);
        samples.push(Sample { id: stem, image, gray, priors });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no readable PNG images in {}", dir.display())));
    }
    Ok(samples)
}

/// Loads a dataset root written by [`write_dataset`] (or a plain folder).
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = root.join("images");
    if images.is_dir() {
        load_folder(&images)
    } else {
        load_folder(root)
    }
}

/// Latents of a dataset under a frozen encoder.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    /// `N × h × w × c` color latents.
    pub z0: Tensor,
    /// `N × h × w × c` grayscale latents.
    pub zc: Tensor,
    pub captions: Vec<String>,
}

impl EncodedDataset {
    pub fn encode(vae: &Vae, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("cannot encode an empty dataset");
        }
        let mut z0 = Vec::new();
        let mut zc = Vec::new();
        for chunk in samples.chunks(32) {
            let color: Vec<&ImageRgb> = chunk.iter().map(|s| &s.image).collect();
            let gray: Vec<&ImageRgb> = chunk.iter().map(|s| &s.gray.rgb_replicated).collect();
            z0.push(vae.encode_images(&color)?);
            zc.push(vae.encode_images(&gray)?);
        }
        Ok(Self {
            z0: Tensor::cat(&z0, 0)?,
            zc: Tensor::cat(&zc, 0)?,
            captions: samples.iter().map(|s| s.priors.caption.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Batch of the given items conditioned on their captions.
    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        let mut z0 = Vec::with_capacity(indices.len());
        let mut zc = Vec::with_capacity(indices.len());
        let mut texts = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return invalid(format!("sample index {i} out of range"));
            }
            z0.push(self.z0.narrow(0, i, 1)?);
            zc.push(self.zc.narrow(0, i, 1)?);
            texts.push(self.captions[i].clone());
        }
        Ok(TrainBatch { z0: Tensor::cat(&z0, 0)?, zc: Tensor::cat(&zc, 0)?, texts })
    }

    /// One epoch of caption-conditioned batches in a seeded shuffled order.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<TrainBatch>> {
        if batch_size == 0 {
            return invalid("batch size must be positive");
        }
        epoch_order(self.len(), seed, epoch).chunks(batch_size).map(|c| self.batch(c)).collect()
    }
}

/// Encodes `samples` with the frozen encoder and returns one epoch of batches.
pub fn make_batches(samples: &[Sample], vae: &Vae, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<TrainBatch>> {
    EncodedDataset::encode(vae, samples)?.epoch_batches(batch_size, seed, epoch)
}
