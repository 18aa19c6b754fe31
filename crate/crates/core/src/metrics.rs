//! Colorfulness, PSNR and the Fréchet distance between Gaussian feature
//! summaries, plus directory evaluation with a pluggable embedder.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::colorspace::ImageRgb;
use crate::error::{invalid, shape_err, Error, Result};
use crate::vae::{images_to_tensor, PerceptualNet};

pub const PSNR_CAP: f64 = 100.0;

/// Hasler–Süsstrunk colorfulness with population statistics.
pub fn colorfulness(img: &ImageRgb) -> f64 {
    let n = (img.height() * img.width()) as f64;
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for p in img.pixels().chunks_exact(3) {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let (m_rg, m_yb) = (s_rg / n, s_yb / n);
    let var_rg = (q_rg / n - m_rg * m_rg).max(0.0);
    let var_yb = (q_yb / n - m_yb * m_yb).max(0.0);
    (var_rg + var_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

/// `10 · log10(255² / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_dims(b) {
        return shape_err(format!("psnr: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
    }
    let sq: f64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(psnr_from_mse(sq / a.pixels().len() as f64, 255.0))
}

/// PSNR for a given mean squared error and peak value, capped.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// PSNR between two lightness planes (peak 100).
pub fn lightness_psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!("lightness psnr: {} vs {} values", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse, 100.0))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||μ1 − μ2||² + tr(C1 + C2 − 2 (C1 C2)^{1/2})`.
///
/// `tr (C1 C2)^{1/2}` is evaluated as `tr (S C2 S)^{1/2}` with `S = C1^{1/2}`,
/// a symmetric form whose eigenvalues are clamped at zero.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return shape_err(format!(
            "frechet: means {} and {}, covariances {:?} and {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        ));
    }
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let (c1, c2) = (sym(cov1), sym(cov2));
    let s = sqrt_psd(&c1);
    let inner = sym(&(&s * &c2 * &s));
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + c1.trace() + c2.trace() - 2.0 * tr_cross).max(0.0))
}

/// Mean and (n − 1)-normalized covariance of row feature vectors.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return invalid("need at least two feature vectors for a covariance");
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return shape_err("feature vectors of unequal length");
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// Maps images to feature vectors for the Fréchet distance.
pub trait Embedder {
    fn embed(&self, images: &[&ImageRgb]) -> Result<Vec<Vec<f64>>>;
}

/// The seeded random convolutional pyramid of the perceptual loss, pooled
/// over space.
pub struct PerceptualEmbedder {
    net: PerceptualNet,
}

impl PerceptualEmbedder {
    pub fn new() -> Result<Self> {
        Ok(Self { net: PerceptualNet::new(DType::F32)? })
    }
}

impl Embedder for PerceptualEmbedder {
    fn embed(&self, images: &[&ImageRgb]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let feats = self.net.embed(&images_to_tensor(chunk, DType::F32)?)?;
            out.extend(feats.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub colorfulness: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_colorfulness: f64,
    pub mean_psnr: f64,
    pub frechet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    /// Files present in only one directory.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table with a trailing aggregate row.
    pub fn to_table(&self) -> String {
        let width = self.per_image.iter().map(|m| m.name.len()).chain(["image".len(), "mean".len()]).max().unwrap();
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>10}", "image", "colorfulness", "psnr_db");
        for m in &self.per_image {
            let _ = writeln!(s, "{:<width$}  {:>12.4}  {:>10.4}", m.name, m.colorfulness, m.psnr);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "{:<width$}  {:>12.4}  {:>10.4}", "mean", a.mean_colorfulness, a.mean_psnr);
        if let Some(f) = a.frechet {
            let _ = writeln!(s, "frechet_distance: {f:.6}");
        }
        for e in &self.excluded {
            let _ = writeln!(s, "excluded: {e}");
        }
        s
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("reading {}: {e}", dir.display())))?;
    Ok(entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect())
}

/// Per-image colorfulness of predictions and PSNR against same-named
/// references; Fréchet distance over embedder features when supplied.
pub fn evaluate(pred_dir: &Path, ref_dir: &Path, embedder: Option<&dyn Embedder>) -> Result<MetricReport> {
    let preds = png_names(pred_dir)?;
    let refs = png_names(ref_dir)?;
    let excluded: Vec<String> = preds.symmetric_difference(&refs).cloned().collect();
    let common: Vec<&String> = preds.intersection(&refs).collect();
    if common.is_empty() {
        return Err(Error::Dataset(format!(
            "no same-named PNGs in {} and {}",
            pred_dir.display(),
            ref_dir.display()
        )));
    }
    let mut per_image = Vec::with_capacity(common.len());
    let mut pred_imgs = Vec::with_capacity(common.len());
    let mut ref_imgs = Vec::with_capacity(common.len());
    for name in common {
        let p = ImageRgb::load_png(pred_dir.join(name))?;
        let r = ImageRgb::load_png(ref_dir.join(name))?;
        per_image.push(ImageMetrics { name: name.clone(), colorfulness: colorfulness(&p), psnr: psnr(&p, &r)? });
        pred_imgs.push(p);
        ref_imgs.push(r);
    }
    let n = per_image.len() as f64;
    let frechet = match embedder {
        Some(e) if per_image.len() >= 2 => {
            let fp = e.embed(&pred_imgs.iter().collect::<Vec<_>>())?;
            let fr = e.embed(&ref_imgs.iter().collect::<Vec<_>>())?;
            let (m1, c1) = gaussian_stats(&fp)?;
            let (m2, c2) = gaussian_stats(&fr)?;
            Some(frechet_distance(&m1, &c1, &m2, &c2)?)
        }
        Some(_) => {
            log::warn!("Fréchet distance needs at least two images; skipped");
            None
        }
        None => None,
    };
    let aggregate = Aggregate {
        mean_colorfulness: per_image.iter().map(|m| m.colorfulness).sum::<f64>() / n,
        mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
        frechet,
    };
    Ok(MetricReport { per_image, aggregate, excluded })
}

/// Paths of `evaluate`'s outputs inside `out_dir`.
pub fn report_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("metrics.json"), out_dir.join("metrics.txt"))
}
