//! Backprop gradients against central finite differences in f64.

use candle_core::{DType, Device, Tensor};
use colorizer_core::cdm::{Cdm, CdmConfig};
use colorizer_core::colorspace::{extract_gray, GrayImage, ImageRgb};
use colorizer_core::diffusion::{denoise_loss, NoiseSchedule, TrainBatch};
use colorizer_core::nn::{gradient_check, randn};
use colorizer_core::vae::{decoder_loss, images_to_tensor, DecoderLossConfig, LuminanceDecoder, PerceptualNet, Vae, VaeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-3;

fn tiny_cdm() -> CdmConfig {
    CdmConfig {
        latent_channels: 2,
        channels: vec![8, 8],
        res_blocks: 1,
        attention: vec![false, true],
        heads: 2,
        groups: 2,
        text_dim: 8,
        text_len: 4,
        hash_buckets: 4,
        vocabulary: vec!["red".into(), "circle".into()],
        train_timesteps: 1000,
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F64, &Device::Cpu).unwrap()
}

fn noise_image(size: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRgb::new(size, size, (0..size * size * 3).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let model = Cdm::with_dtype(tiny_cdm(), 3, DType::F64).unwrap();
    // The output convolution starts at zero, which would zero every upstream gradient.
    model.params().set("conv_out.weight", &(rand(&[3, 3, 8, 2], 4) * 0.3).unwrap()).unwrap();
    model.params().set("conv_out.bias", &(rand(&[2], 5) * 0.3).unwrap()).unwrap();
    let adapter = Tensor::cat(&[Tensor::eye(2, DType::F64, &Device::Cpu).unwrap(), (rand(&[2, 2], 6) * 0.5).unwrap()], 0).unwrap();
    model.set_adapter_weight(&adapter).unwrap();
    let batch = TrainBatch {
        z0: rand(&[2, 4, 4, 2], 1),
        zc: rand(&[2, 4, 4, 2], 2),
        texts: vec!["red circle".into(), "blue".into()],
    };
    let schedule = NoiseSchedule::linear(1000).unwrap();
    let loss = || denoise_loss(&batch, &model, &schedule, 0.0, &mut ChaCha8Rng::seed_from_u64(11)).map(|l| l.loss);
    let report = gradient_check(model.params(), 3, 1e-5, 1e-7, loss).unwrap();
    assert!(report.probes > 50, "{report:?}");
    assert!(report.max_rel_error <= TOLERANCE, "{report:?}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let cfg = VaeConfig { channels: [4, 8, 8], latent_channels: 2, groups: 2 };
    let vae = Vae::with_dtype(cfg, 1, DType::F64).unwrap();
    let decoder = LuminanceDecoder::from_vae(&vae, 2).unwrap();
    decoder.params().set("skip.alpha", &Tensor::new(&[0.5f64, -0.3, 0.2], &Device::Cpu).unwrap()).unwrap();
    let images: Vec<ImageRgb> = (0..2).map(|i| noise_image(16, i)).collect();
    let grays: Vec<GrayImage> = images.iter().map(extract_gray).collect();
    let gray_refs: Vec<&GrayImage> = grays.iter().collect();
    let target = images_to_tensor(&images.iter().collect::<Vec<_>>(), DType::F64).unwrap();
    let z = rand(&[2, 4, 4, 2], 3);
    let net = PerceptualNet::new(DType::F64).unwrap();
    let loss_cfg = DecoderLossConfig { lambda_p: 0.1 };
    let loss = || decoder_loss(&decoder.decode(&vae, &z, &gray_refs)?, &target, &loss_cfg, &net);
    let report = gradient_check(decoder.params(), 3, 1e-5, 1e-7, loss).unwrap();
    assert!(report.probes > 50, "{report:?}");
    assert!(report.max_rel_error <= TOLERANCE, "{report:?}");
}
