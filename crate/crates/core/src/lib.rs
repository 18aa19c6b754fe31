//! Automatic colorization with a grayscale-conditioned latent diffusion model.
//!
//! The pipeline encodes the grayscale input into a latent condition, runs a
//! guided DDIM denoising loop in latent space (caption cross-attention plus
//! optional per-instance segmentation guidance) and reconstructs the color
//! image with a luminance-aware decoder that receives skip features from the
//! grayscale input.

pub mod cdm;
pub mod checkpoint;
pub mod colorspace;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod vae;

pub use colorspace::{extract_gray, lab_to_rgb, luminance_lock, rgb_to_lab, GrayImage, ImageLab, ImageRgb};
pub use error::{Error, Result};
