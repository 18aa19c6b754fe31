//! Mock noise predictors shared by the integration tests.

#![allow(dead_code)]

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor};
use colorizer_core::diffusion::NoisePredictor;
use colorizer_core::Result;

pub const CTX_LEN: usize = 2;
pub const CTX_DIM: usize = 3;

/// Text embedding of a mock model: every token equals the string length; the
/// null context is all zeros.
fn mock_context(texts: &[&str]) -> Result<Tensor> {
    let rows: Vec<f32> = texts.iter().flat_map(|t| vec![t.len() as f32 + 1.0; CTX_LEN * CTX_DIM]).collect();
    Ok(Tensor::from_vec(rows, (texts.len(), CTX_LEN, CTX_DIM), &Device::Cpu)?)
}

fn mock_null(batch: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((batch, CTX_LEN, CTX_DIM), DType::F32, &Device::Cpu)?)
}

/// Per-item mean of the context, `B × 1 × 1 × 1`.
fn context_scalar(context: &Tensor) -> Result<Tensor> {
    Ok(context.mean_keepdim(2)?.mean_keepdim(1)?.unsqueeze(3)?)
}

/// Predicts `a·z_t + b·z_c + ctx` where `ctx` is the mean of the item's
/// context; records the batch size of every call.
pub struct LinearModel {
    pub a: f64,
    pub b: f64,
    pub calls: RefCell<Vec<usize>>,
}

impl LinearModel {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b, calls: RefCell::new(Vec::new()) }
    }
}

impl NoisePredictor for LinearModel {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], z_c: &Tensor, context: &Tensor) -> Result<Tensor> {
        assert_eq!(t.len(), z_t.dim(0)?);
        self.calls.borrow_mut().push(z_t.dim(0)?);
        let base = ((z_t * self.a)? + (z_c * self.b)?)?;
        Ok(base.broadcast_add(&context_scalar(context)?)?)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        mock_context(texts)
    }

    fn null_context(&self, batch: usize) -> Result<Tensor> {
        mock_null(batch)
    }
}

/// Returns a fixed tensor regardless of inputs.
pub struct ConstModel(pub Tensor);

impl NoisePredictor for ConstModel {
    fn predict_noise(&self, z_t: &Tensor, _t: &[usize], _z_c: &Tensor, _context: &Tensor) -> Result<Tensor> {
        Ok(self.0.broadcast_as(z_t.dims())?.contiguous()?)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        mock_context(texts)
    }

    fn null_context(&self, batch: usize) -> Result<Tensor> {
        mock_null(batch)
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}
