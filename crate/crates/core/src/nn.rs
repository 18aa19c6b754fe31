//! Minimal NHWC layer set on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Every parameter
//! is initialised from a generator seeded by `(store seed, name)`, so model
//! construction is reproducible and independent of creation order.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    /// Explicit values, row-major.
    Values(&'static [f64]),
}

/// Named trainable parameters.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across builds and platforms.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Standard-normal samples from an explicit generator.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n), shape, device)?.to_dtype(dtype)?)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), seed, dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the parameter `name`, creating it with `init` on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return shape_err(format!("parameter {name} exists with shape {:?}, requested {shape:?}", v.dims()));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let gaussian = |std: f64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
            (0..n)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    std * s
                })
                .collect()
        };
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => gaussian(std),
            Init::FanIn { fan_in, gain } => gaussian(gain / (fan_in.max(1) as f64).sqrt()),
            Init::Values(v) => {
                if v.len() != n {
                    return shape_err(format!("initial values for {name}: {} given, {n} needed", v.len()));
                }
                v.to_vec()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites one existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter {name}")))?;
        if var.dims() != value.dims() {
            return shape_err(format!("parameter {name} has shape {:?}, value {:?}", var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose names start with any of `prefixes`, in name order.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Variables whose names start with none of `prefixes`, in name order.
    pub fn vars_without_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn tensors_with_prefixes(&self, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites existing parameters in place. Every loaded name must exist
    /// with a matching shape; names absent from `values` are left untouched
    /// unless `strict` is set, in which case they are an error.
    pub fn load(&mut self, values: &BTreeMap<String, Tensor>, strict: bool) -> Result<()> {
        for (name, t) in values {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if strict {
            if let Some(missing) = self.vars.keys().find(|k| !values.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("checkpoint is missing parameter {missing}")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over the
    /// probes whose gradient is not negligible.
    pub max_rel_error: f64,
    /// Largest absolute difference over all probes.
    pub max_abs_error: f64,
    pub probes: usize,
}

/// Compares backprop gradients of `loss` with central finite differences at
/// `per_tensor` evenly spaced entries of every parameter. Use an `f64` store;
/// `loss` must be deterministic. Probes whose gradients are both below
/// `floor` only contribute to the absolute error.
pub fn gradient_check(
    params: &ParamStore,
    per_tensor: usize,
    h: f64,
    floor: f64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    if params.dtype() != DType::F64 {
        return invalid("gradient check needs f64 parameters");
    }
    let grads = loss()?.backward()?;
    let eval = || -> Result<f64> { Ok(loss()?.to_scalar::<f64>()?) };
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, probes: 0 };
    for (name, var) in &params.vars {
        let original = var.as_tensor().copy()?;
        let values = original.flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; values.len()],
        };
        let count = per_tensor.min(values.len());
        for j in 0..count {
            let idx = j * values.len() / count;
            let probe = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, original.dims(), &params.device)?)?;
                eval()
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            var.set(&original)?;
            let a = analytic[idx];
            let diff = (a - numeric).abs();
            out.max_abs_error = out.max_abs_error.max(diff);
            let scale = a.abs().max(numeric.abs());
            if scale > floor {
                let rel = diff / scale;
                if rel > out.max_rel_error {
                    log::debug!("{name}[{idx}]: analytic {a:e} numeric {numeric:e}");
                }
                out.max_rel_error = out.max_rel_error.max(rel);
            }
            out.probes += 1;
        }
    }
    Ok(out)
}

/// Dense layer over the last dimension. Weight is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(ps, name, input, output, Init::FanIn { fan_in: input, gain: 1.0 }, true)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[input, output], init)?;
        let bias = if bias { Some(ps.get(&format!("{name}.bias"), &[output], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, input))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Stride-1, same-padded 3×3 convolution on NHWC input, lowered to a single
/// matmul over an im2col buffer. Weight is stored `3 × 3 × in × out`.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    input: usize,
    output: usize,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(ps, name, input, output, Init::FanIn { fan_in: 9 * input, gain: 1.0 })
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(ps, name, input, output, Init::Zeros)
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[3, 3, input, output], init)?;
        let bias = ps.get(&format!("{name}.bias"), &[output], Init::Zeros)?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.input {
            return shape_err(format!("conv3x3 expects {} channels, got {c}", self.input));
        }
        // The trailing ones column of the im2col rows picks up the bias row.
        let cols = x.contiguous()?.apply_op1(Im2Col)?;
        let kernel = Tensor::cat(&[&self.weight.reshape((9 * c, self.output))?, &self.bias.unsqueeze(0)?], 0)?;
        Ok(cols.matmul(&kernel)?.reshape((b, h, w, self.output))?)
    }
}

/// Gathers the zero-padded 3×3 neighbourhood of every NHWC pixel into a row
/// of `9·C` values ordered `(dy, dx, channel)` followed by a constant 1:
/// `B×H×W×C → (B·H·W) × (9C + 1)`.
struct Im2Col;

/// Adjoint of [`Im2Col`]: scatters-and-adds rows back onto the image grid.
struct Col2Im {
    dims: (usize, usize, usize, usize),
}

fn im2col<T: Copy + Default>(src: &[T], (b, h, w, c): (usize, usize, usize, usize), one: T) -> Vec<T> {
    let stride = 9 * c + 1;
    let mut out = vec![T::default(); b * h * w * stride];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((n * h + y) * w + x) * stride;
                out[row + 9 * c] = one;
                for dy in 0..3 {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x + dx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let from = ((n * h + sy - 1) * w + sx - 1) * c;
                        let to = row + (dy * 3 + dx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let stride = 9 * c + 1;
    let mut out = vec![T::default(); b * h * w * c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((n * h + y) * w + x) * stride;
                for dy in 0..3 {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x + dx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let to = ((n * h + sy - 1) * w + sx - 1) * c;
                        let from = row + (dy * 3 + dx) * c;
                        for (o, v) in out[to..to + c].iter_mut().zip(&src[from..from + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous tensor".into())),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, h, w, c) = dims;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, dims, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, dims, 1.0)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((b * h * w, 9 * c + 1))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im { dims })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, self.dims)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from(self.dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col)?))
    }
}

/// Halves spatial resolution: 2×2 space-to-depth followed by a dense
/// projection, i.e. a 2×2 stride-2 convolution.
#[derive(Debug, Clone)]
pub struct Downsample {
    proj: Linear,
}

impl Downsample {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(ps, name, 4 * input, output)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&space_to_depth(x)?)
    }
}

pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("space_to_depth needs even dims, got {h}x{w}"));
    }
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// Nearest-neighbour 2× upsampling of NHWC tensors; the backward pass sums
/// each 2×2 block.
struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        fn run<T: Copy + Default>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
            let mut out = vec![T::default(); b * h * w * 4 * c];
            for n in 0..b {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let from = ((n * h + y / 2) * w + x / 2) * c;
                        let to = ((n * 2 * h + y) * 2 * w + x) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(contiguous_slice(v, layout)?, b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(run(contiguous_slice(v, layout)?, b, h, w, c)),
            _ => return Err(candle_core::Error::Msg("upsample supports f32 and f64".into())),
        };
        Ok((out, Shape::from((b, 2 * h, 2 * w, c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, h, w, c) = arg.dims4()?;
        let g = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut out = vec![0f64; b * h * w * c];
        for n in 0..b {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let from = ((n * 2 * h + y) * 2 * w + x) * c;
                    let to = ((n * h + y / 2) * w + x / 2) * c;
                    for k in 0..c {
                        out[to + k] += g[from + k];
                    }
                }
            }
        }
        Ok(Some(Tensor::from_vec(out, (b, h, w, c), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Group normalisation over NHWC (or `B × N × C`) tensors.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return shape_err(format!("{channels} channels not divisible into {groups} groups"));
        }
        let gamma = ps.get(&format!("{name}.gamma"), &[channels], Init::Ones)?;
        let beta = ps.get(&format!("{name}.beta"), &[channels], Init::Zeros)?;
        Ok(Self { gamma, beta, groups, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = *dims.last().unwrap();
        let n: usize = dims[1..dims.len() - 1].iter().product();
        let op = GroupNormOp { groups: self.groups, eps: self.eps };
        let y = x.reshape((dims[0], n, c))?.contiguous()?.apply_op3(&self.gamma, &self.beta, op)?;
        Ok(y.reshape(dims)?)
    }
}

/// Normalises each (item, group) slice of a `B × N × C` tensor to zero mean
/// and unit variance, then applies the per-channel affine map.
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

/// Per (item, group): mean and inverse standard deviation.
fn group_stats(x: &[f64], b: usize, n: usize, c: usize, groups: usize, eps: f64) -> Vec<(f64, f64)> {
    let cg = c / groups;
    let count = (n * cg) as f64;
    let mut stats = Vec::with_capacity(b * groups);
    for item in 0..b {
        for g in 0..groups {
            let (mut sum, mut sq) = (0.0, 0.0);
            for p in 0..n {
                let base = (item * n + p) * c + g * cg;
                for v in &x[base..base + cg] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            stats.push((mean, 1.0 / (var + eps).sqrt()));
        }
    }
    stats
}

fn as_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    match storage {
        CpuStorage::F32(v) => Ok(contiguous_slice(v, layout)?.iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(contiguous_slice(v, layout)?.to_vec()),
        _ => Err(candle_core::Error::Msg("group norm supports f32 and f64".into())),
    }
}

fn to_vec_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        gs: &CpuStorage,
        gl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n, c) = xl.shape().dims3()?;
        let x = as_f64(xs, xl)?;
        let gamma = as_f64(gs, gl)?;
        let beta = as_f64(bs, bl)?;
        let stats = group_stats(&x, b, n, c, self.groups, self.eps);
        let cg = c / self.groups;
        let mut out = vec![0f64; x.len()];
        for (i, (o, v)) in out.iter_mut().zip(&x).enumerate() {
            let ch = i % c;
            let (mean, inv) = stats[(i / (n * c)) * self.groups + ch / cg];
            *o = (v - mean) * inv * gamma[ch] + beta[ch];
        }
        let out = match xs {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((out, xl.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, n, c) = arg.dims3()?;
        let x = to_vec_f64(arg)?;
        let dy = to_vec_f64(grad_res)?;
        let g = to_vec_f64(gamma)?;
        let stats = group_stats(&x, b, n, c, self.groups, self.eps);
        let cg = c / self.groups;
        let count = (n * cg) as f64;
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        // With d = dy·γ: dx = inv · (d − mean(d) − x̂ · mean(d · x̂)) per group.
        let mut sums = vec![(0.0, 0.0); b * self.groups];
        for i in 0..x.len() {
            let ch = i % c;
            let k = (i / (n * c)) * self.groups + ch / cg;
            let (mean, inv) = stats[k];
            let xh = (x[i] - mean) * inv;
            dgamma[ch] += dy[i] * xh;
            dbeta[ch] += dy[i];
            let d = dy[i] * g[ch];
            sums[k].0 += d;
            sums[k].1 += d * xh;
        }
        let mut dx = vec![0f64; x.len()];
        for i in 0..x.len() {
            let ch = i % c;
            let k = (i / (n * c)) * self.groups + ch / cg;
            let (mean, inv) = stats[k];
            let xh = (x[i] - mean) * inv;
            dx[i] = inv * (dy[i] * g[ch] - sums[k].0 / count - xh * sums[k].1 / count);
        }
        let dev = arg.device();
        let dt = arg.dtype();
        Ok((
            Some(Tensor::from_vec(dx, (b, n, c), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}

/// Residual block: GN → SiLU → conv → (+ time projection) → GN → SiLU → conv,
/// with a 1×1 shortcut when channel counts differ.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv3x3,
    shortcut: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        time_dim: Option<usize>,
        groups: usize,
    ) -> Result<Self> {
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), input, groups)?;
        let conv1 = Conv3x3::new(ps, &format!("{name}.conv1"), input, output)?;
        let time_proj = match time_dim {
            Some(t) => Some(Linear::new(ps, &format!("{name}.time_proj"), t, output)?),
            None => None,
        };
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), output, groups)?;
        let conv2 = Conv3x3::with_init(
            ps,
            &format!("{name}.conv2"),
            output,
            output,
            Init::FanIn { fan_in: 9 * output, gain: 0.5 },
        )?;
        let shortcut = if input != output {
            Some(Linear::new(ps, &format!("{name}.shortcut"), input, output)?)
        } else {
            None
        };
        Ok(Self { norm1, conv1, time_proj, norm2, conv2, shortcut })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, temb) {
            let (b, c) = (t.dim(0)?, h.dim(3)?);
            h = h.broadcast_add(&proj.forward(&t.silu()?)?.reshape((b, 1, 1, c))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Multi-head cross-attention from spatial features onto a token sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return shape_err(format!("{channels} channels not divisible into {heads} heads"));
        }
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, groups)?,
            q: Linear::with_init(ps, &format!("{name}.q"), channels, channels, Init::FanIn { fan_in: channels, gain: 1.0 }, false)?,
            k: Linear::with_init(ps, &format!("{name}.k"), context_dim, channels, Init::FanIn { fan_in: context_dim, gain: 1.0 }, false)?,
            v: Linear::with_init(ps, &format!("{name}.v"), context_dim, channels, Init::FanIn { fan_in: context_dim, gain: 1.0 }, false)?,
            out: Linear::with_init(ps, &format!("{name}.out"), channels, channels, Init::FanIn { fan_in: channels, gain: 0.5 }, true)?,
            heads,
        })
    }

    /// `x`: `B × H × W × C`; `context`: `B × L × d`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let l = context.dim(1)?;
        let hd = c / self.heads;
        let tokens = self.norm.forward(x)?.reshape((b, h * w, c))?;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?.reshape((b * self.heads, n, hd))?)
        };
        let q = split(self.q.forward(&tokens)?, h * w)?;
        let k = split(self.k.forward(context)?, l)?;
        let v = split(self.v.forward(context)?, l)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn
            .matmul(&v)?
            .reshape((b, self.heads, h * w, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h * w, c))?;
        let y = self.out.forward(&mixed)?.reshape((b, h, w, c))?;
        Ok((x + y)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `B × dim`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).cos());
        }
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}
