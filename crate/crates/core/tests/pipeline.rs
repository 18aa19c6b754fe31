//! Dataset files, training stages and evaluation reports end to end at toy
//! sizes.

use std::path::Path;

use candle_core::DType;
use colorizer_core::cdm::{CdmConfig, CdmTrainConfig};
use colorizer_core::colorspace::{GrayImage, ImageRgb};
use colorizer_core::data::{load_dataset, load_folder, make_batches, synth_shapes, write_dataset, EncodedDataset};
use colorizer_core::metrics::colorfulness;
use colorizer_core::pipeline::{
    evaluate_stage, load_cdm, train_decoder_on, train_stage, train_vae_on, ColorizeOptions, Colorizer, RunConfig, Stage,
};
use colorizer_core::vae::{AutoencoderTrainConfig, Vae, VaeConfig};
use colorizer_core::Error;

fn tiny_config(root: &Path) -> RunConfig {
    RunConfig {
        data_dir: root.join("data"),
        checkpoint_dir: root.join("ck"),
        output_dir: root.join("out"),
        vae: VaeConfig { channels: [4, 8, 8], latent_channels: 4, groups: 2 },
        cdm: CdmConfig { channels: vec![8, 8], res_blocks: 1, attention: vec![false, true], heads: 2, groups: 2, text_dim: 8, ..Default::default() },
        vae_train: AutoencoderTrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, ..Default::default() },
        decoder_train: AutoencoderTrainConfig { epochs: 1, batch_size: 4, lr: 1e-2, ..Default::default() },
        cdm_train: CdmTrainConfig { steps: 3, batch_size: 4, lr: 1e-3, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_shapes(3, 6).unwrap();
    write_dataset(&samples, dir.path(), 3).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.priors.caption, b.priors.caption);
        assert_eq!(a.priors.instances, b.priors.instances);
    }
}

#[test]
fn non_square_inputs_are_center_cropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = ImageRgb::filled(64, 96, [200, 30, 30]).unwrap();
    for y in 0..64 {
        for x in 0..16 {
            img.set_pixel(y, x, [0, 0, 255]);
            img.set_pixel(y, 95 - x, [0, 0, 255]);
        }
    }
    img.save_png(dir.path().join("wide.png")).unwrap();
    let loaded = load_folder(dir.path()).unwrap();
    assert_eq!((loaded[0].image.height(), loaded[0].image.width()), (64, 64));
    // The blue side bands are cropped away.
    assert!(loaded[0].image.pixels().chunks(3).all(|p| p == [200, 30, 30]));
    assert!(loaded[0].priors.instances.is_empty());
}

#[test]
fn synthetic_set_is_colorful() {
    let samples = synth_shapes(11, 64).unwrap();
    let mean = samples.iter().map(|s| colorfulness(&s.image)).sum::<f64>() / samples.len() as f64;
    assert!(mean > 30.0, "mean colorfulness {mean}");
}

#[test]
fn batches_carry_encoded_gray_condition() {
    let samples = synth_shapes(5, 6).unwrap();
    let vae = Vae::new(VaeConfig { channels: [4, 8, 8], latent_channels: 4, groups: 2 }, 1).unwrap();
    let batches = make_batches(&samples, &vae, 4, 9, 0).unwrap();
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 2]);
    let data = EncodedDataset::encode(&vae, &samples).unwrap();
    let grays: Vec<&GrayImage> = samples.iter().map(|s| &s.gray).collect();
    let direct = vae.encode(&colorizer_core::vae::grays_to_tensor(&grays, DType::F32).unwrap()).unwrap();
    let diff = (data.zc - &direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff < 1e-5);
    for b in &batches {
        for (i, text) in b.texts.iter().enumerate() {
            let row: Vec<f32> = b.zc.get(i).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let j = samples.iter().position(|s| &s.priors.caption == text).unwrap();
            let want: Vec<f32> = direct.get(j).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(row.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}

#[test]
fn decoder_training_keeps_encoder_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let samples = synth_shapes(2, 8).unwrap();
    let (vae, log) = train_vae_on(&cfg, &samples).unwrap();
    assert!(log.iter().all(|r| r.loss.is_finite()) && !log.is_empty());
    let before = vae.encoder_checksum().unwrap();
    let (decoder, log) = train_decoder_on(&cfg, &vae, &samples).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(vae.encoder_checksum().unwrap(), before);
    assert!(decoder.alphas().unwrap().iter().any(|&a| a != 0.0));
    // Same seed, same curve.
    let (_, again) = train_vae_on(&cfg, &samples).unwrap();
    let (_, first) = train_vae_on(&cfg, &samples).unwrap();
    assert_eq!(again, first);
}

#[test]
fn stages_require_their_prerequisites_and_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let samples = synth_shapes(4, 8).unwrap();
    write_dataset(&samples, &cfg.data_dir, 4).unwrap();
    match train_stage(&cfg, Stage::Cdm) {
        Err(Error::MissingPrerequisite(msg)) => assert!(msg.contains("vae checkpoint required"), "{msg}"),
        other => panic!("expected missing prerequisite, got {other:?}"),
    }
    train_stage(&cfg, Stage::Vae).unwrap();
    train_stage(&cfg, Stage::Decoder).unwrap();
    let log = train_stage(&cfg, Stage::Cdm).unwrap();
    assert_eq!(log.len(), 3);
    for stage in [Stage::Vae, Stage::Decoder, Stage::Cdm] {
        assert!(stage.checkpoint(&cfg.checkpoint_dir).is_file());
        assert!(stage.log(&cfg.checkpoint_dir).is_file());
    }
    assert_eq!(load_cdm(&cfg.checkpoint_dir).unwrap().config(), &cfg.cdm);

    let model = Colorizer::load(&cfg).unwrap();
    let grays: Vec<&GrayImage> = samples.iter().take(2).map(|s| &s.gray).collect();
    let priors: Vec<_> = samples.iter().take(2).map(|s| s.priors.clone()).collect();
    let mut opts = ColorizeOptions::from_config(&cfg);
    opts.sampler.steps = 4;
    opts.guidance.steps = 4;
    let a = model.colorize(&grays, &priors, &opts).unwrap();
    let b = model.colorize(&grays, &priors, &ColorizeOptions { batch: 1, ..opts }).unwrap();
    assert_eq!(a, b);
    let no_seg = model.colorize(&grays, &priors, &ColorizeOptions { seg_guidance: false, ..opts }).unwrap();
    let zero = model.colorize(&grays, &priors, &ColorizeOptions { guidance: colorizer_core::guidance::GuidanceConfig { strength: 0.0, ..opts.guidance }, ..opts }).unwrap();
    assert_eq!(no_seg, zero);
}

#[test]
fn evaluation_reports_aggregates_and_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, reference, out) = (dir.path().join("pred"), dir.path().join("ref"), dir.path().join("report"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&reference).unwrap();
    let samples = synth_shapes(8, 3).unwrap();
    for s in &samples {
        s.image.save_png(pred.join(format!("{}.png", s.id))).unwrap();
        s.image.save_png(reference.join(format!("{}.png", s.id))).unwrap();
    }
    samples[0].image.save_png(pred.join("orphan.png")).unwrap();
    let report = evaluate_stage(&pred, &reference, &out, true).unwrap();
    assert_eq!(report.per_image.len(), 3);
    assert!(report.per_image.iter().all(|m| m.psnr == 100.0));
    assert_eq!(report.excluded, vec!["orphan.png".to_string()]);
    let mean = samples.iter().map(|s| colorfulness(&s.image)).sum::<f64>() / 3.0;
    assert!((report.aggregate.mean_colorfulness - mean).abs() < 1e-9);
    assert!(report.aggregate.frechet.unwrap().abs() < 1e-6);
    assert!(out.join("metrics.json").is_file() && out.join("metrics.txt").is_file());
}
