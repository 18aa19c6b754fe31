//! sRGB ↔ CIELAB conversions and the grayscale decomposition the pipeline
//! operates on.
//!
//! All conversions use sRGB companding, the D65 reference white and the
//! 2° standard observer. Images are stored as 8-bit RGB at I/O boundaries and
//! converted to floating point internally.

use std::path::Path;

use crate::error::{invalid, shape_err, Result};

/// D65 reference white in XYZ (Y normalised to 1).
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// An 8-bit RGB image stored row-major as `H×W×3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

/// A CIELAB image with planar `L`, `a`, `b` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLab {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

/// Grayscale input: the lightness plane plus a 3-channel rendering of it for
/// encoders that expect RGB input.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub l: Vec<f32>,
    pub rgb_replicated: ImageRgb,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("image dimensions must be at least 1x1");
        }
        if pixels.len() != height * width * 3 {
            return shape_err(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                pixels.len()
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &ImageRgb) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path.as_ref(),
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

impl ImageLab {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }
}

impl GrayImage {
    pub fn height(&self) -> usize {
        self.rgb_replicated.height
    }

    pub fn width(&self) -> usize {
        self.rgb_replicated.width
    }

    /// Builds a gray image directly from a lightness plane.
    pub fn from_lightness(height: usize, width: usize, l: Vec<f32>) -> Result<Self> {
        if l.len() != height * width {
            return shape_err(format!("lightness plane has {} values, expected {}", l.len(), height * width));
        }
        let mut pixels = Vec::with_capacity(l.len() * 3);
        for &v in &l {
            let q = lightness_to_byte(v);
            pixels.extend_from_slice(&[q, q, q]);
        }
        let rgb_replicated = ImageRgb::new(height, width, pixels)?;
        Ok(Self { l, rgb_replicated })
    }
}

fn lightness_to_byte(l: f32) -> u8 {
    (l as f64 * 2.55).round().clamp(0.0, 255.0) as u8
}

/// sRGB electro-optical transfer: encoded [0,1] → linear [0,1].
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts a single 8-bit sRGB triple to CIELAB.
pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_to_linear_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ];
    XYZ_TO_RGB.map(|row| row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2])
}

fn linear_to_bytes(lin: [f64; 3]) -> [u8; 3] {
    lin.map(|v| (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Converts a CIELAB triple to 8-bit sRGB, clipping out-of-gamut channels.
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    linear_to_bytes(lab_to_linear_rgb(lab))
}

fn in_gamut(lin: [f64; 3]) -> bool {
    lin.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v))
}

/// Like [`lab_pixel_to_rgb`], but shrinks chroma along the hue direction
/// until the colour fits the sRGB gamut, so lightness is preserved.
pub fn lab_pixel_to_rgb_keep_lightness(lab: [f64; 3]) -> [u8; 3] {
    let lin = lab_to_linear_rgb(lab);
    if in_gamut(lin) {
        return linear_to_bytes(lin);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if in_gamut(lab_to_linear_rgb([lab[0], lab[1] * mid, lab[2] * mid])) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    linear_to_bytes(lab_to_linear_rgb([lab[0], lab[1] * lo, lab[2] * lo]))
}

pub fn rgb_to_lab(img: &ImageRgb) -> ImageLab {
    let n = img.height * img.width;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels.chunks_exact(3) {
        let lab = rgb_pixel_to_lab([px[0], px[1], px[2]]);
        l.push(lab[0] as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    ImageLab { height: img.height, width: img.width, l, a, b }
}

pub fn lab_to_rgb(img: &ImageLab) -> ImageRgb {
    let mut pixels = Vec::with_capacity(img.len() * 3);
    for i in 0..img.len() {
        let rgb = lab_pixel_to_rgb([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        pixels.extend_from_slice(&rgb);
    }
    ImageRgb { height: img.height, width: img.width, pixels }
}

/// Drops chroma: keeps CIELAB lightness and renders it into all three
/// channels at 0–255 scale.
pub fn extract_gray(img: &ImageRgb) -> GrayImage {
    let lab = rgb_to_lab(img);
    GrayImage::from_lightness(img.height, img.width, lab.l).expect("dimensions come from a valid image")
}

/// Replaces the lightness of `colorized` with the lightness of `source`,
/// keeping the chroma of `colorized` (reduced along its hue where the result
/// would leave the gamut).
pub fn luminance_lock(colorized: &ImageRgb, source: &GrayImage) -> Result<ImageRgb> {
    if colorized.height != source.height() || colorized.width != source.width() {
        return shape_err(format!(
            "luminance_lock: colorized is {}x{}, source is {}x{}",
            colorized.height,
            colorized.width,
            source.height(),
            source.width()
        ));
    }
    let lab = rgb_to_lab(colorized);
    let mut pixels = Vec::with_capacity(lab.len() * 3);
    for i in 0..lab.len() {
        let rgb = lab_pixel_to_rgb_keep_lightness([source.l[i] as f64, lab.a[i] as f64, lab.b[i] as f64]);
        pixels.extend_from_slice(&rgb);
    }
    ImageRgb::new(colorized.height, colorized.width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Literal textbook route: piecewise sRGB decode, matrix, cube-root with
    // linear toe, written independently of the production helpers.
    fn oracle_lab(rgb: [u8; 3]) -> [f64; 3] {
        let dec = |c: u8| {
            let v = c as f64 / 255.0;
            if v > 0.04045 {
                ((v + 0.055) / 1.055).powf(2.4)
            } else {
                v / 12.92
            }
        };
        let (r, g, b) = (dec(rgb[0]), dec(rgb[1]), dec(rgb[2]));
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let f = |t: f64| {
            if t > (6.0f64 / 29.0).powi(3) {
                t.powf(1.0 / 3.0)
            } else {
                t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    fn uniform_lab(rgb: [u8; 3]) -> ImageLab {
        rgb_to_lab(&ImageRgb::filled(4, 4, rgb).unwrap())
    }

    #[test]
    fn white_and_black_points() {
        let w = uniform_lab([255, 255, 255]);
        assert!(w.l.iter().all(|&v| (v - 100.0).abs() < 1e-3));
        assert!(w.a.iter().chain(&w.b).all(|&v| v.abs() < 1e-3));
        let k = uniform_lab([0, 0, 0]);
        assert!(k.l.iter().chain(&k.a).chain(&k.b).all(|&v| v.abs() < 1e-3));
    }

    #[test]
    fn mid_gray_matches_literal_oracle() {
        let lab = uniform_lab([128, 128, 128]);
        let expected = oracle_lab([128, 128, 128]);
        assert!((lab.l[0] as f64 - expected[0]).abs() < 0.5);
        assert!(lab.a[0].abs() < 0.01 && lab.b[0].abs() < 0.01);
    }

    #[test]
    fn agrees_with_oracle_across_cube() {
        for r in (0..=255).step_by(15) {
            for g in (0..=255).step_by(15) {
                for b in (0..=255).step_by(15) {
                    let got = rgb_pixel_to_lab([r as u8, g as u8, b as u8]);
                    let want = oracle_lab([r as u8, g as u8, b as u8]);
                    for c in 0..3 {
                        assert!((got[c] - want[c]).abs() < 1e-3, "{r},{g},{b}: {got:?} vs {want:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_grid_within_two_levels() {
        let mut worst = 0i32;
        for r in 0..17 {
            for g in 0..17 {
                for b in 0..17 {
                    let px = [(r * 255 / 16) as u8, (g * 255 / 16) as u8, (b * 255 / 16) as u8];
                    let back = lab_pixel_to_rgb(rgb_pixel_to_lab(px));
                    for c in 0..3 {
                        worst = worst.max((back[c] as i32 - px[c] as i32).abs());
                    }
                }
            }
        }
        assert!(worst <= 2, "worst roundtrip error {worst}");
    }

    #[test]
    fn lab_white_and_out_of_gamut() {
        assert_eq!(lab_pixel_to_rgb([100.0, 0.0, 0.0]), [255, 255, 255]);
        // Clipped, never panics.
        let _ = lab_pixel_to_rgb([50.0, 200.0, 200.0]);
        let _ = lab_pixel_to_rgb([50.0, -200.0, -200.0]);
    }

    #[test]
    fn gray_is_replicated_and_neutral() {
        let mut pixels = Vec::new();
        let mut s = 12345u32;
        for _ in 0..(8 * 8 * 3) {
            s = s.wrapping_mul(1103515245).wrapping_add(12345);
            pixels.push((s >> 16) as u8);
        }
        let img = ImageRgb::new(8, 8, pixels).unwrap();
        let gray = extract_gray(&img);
        for px in gray.rgb_replicated.pixels().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        let lab = rgb_to_lab(&gray.rgb_replicated);
        assert!(lab.a.iter().chain(&lab.b).all(|v| v.abs() <= 1.0));

        let white = extract_gray(&ImageRgb::filled(3, 5, [255, 255, 255]).unwrap());
        assert!(white.rgb_replicated.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn luminance_lock_roundtrip_and_black_source() {
        let mut img = ImageRgb::filled(6, 6, [30, 140, 220]).unwrap();
        img.set_pixel(2, 3, [250, 10, 60]);
        img.set_pixel(5, 0, [90, 90, 10]);
        let locked = luminance_lock(&img, &extract_gray(&img)).unwrap();
        for (a, b) in locked.pixels().iter().zip(img.pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 3);
        }

        let black = extract_gray(&ImageRgb::filled(6, 6, [0, 0, 0]).unwrap());
        let out = luminance_lock(&img, &black).unwrap();
        assert!(rgb_to_lab(&out).l.iter().all(|&l| l <= 1.0));
    }

    #[test]
    fn luminance_lock_shape_mismatch() {
        let img = ImageRgb::filled(4, 4, [1, 2, 3]).unwrap();
        let gray = extract_gray(&ImageRgb::filled(4, 5, [1, 2, 3]).unwrap());
        assert!(luminance_lock(&img, &gray).is_err());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(ImageRgb::new(0, 4, vec![]).is_err());
        assert!(ImageRgb::new(2, 2, vec![0; 11]).is_err());
    }
}
