use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shiftcodec::analysis::eval_dataset;
use shiftcodec::checkpoint::{load_checkpoint, load_checkpoint_with_config};
use shiftcodec::entropy::bitstream::Bitstream;
use shiftcodec::entropy::codec::{decode_image, encode_image};
use shiftcodec::error::{CheckpointError, Error};
use shiftcodec::image::Rgb8;
use shiftcodec::net::{Model, ModelConfig};
use shiftcodec::train::{self, data::texture, Dataset, TrainConfig, TrainOutputs};

fn trained(dir: &std::path::Path, steps: usize) -> (Model<f32>, train::TrainReport) {
    let mut model = Model::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let data = Dataset::procedural(4, 64, 3);
    let out = TrainOutputs {
        csv: Some(dir.join("log.csv")),
        checkpoint: Some(dir.join("m.ckpt")),
        lambda_index: 3,
    };
    let report = train::train_loop(&mut model, &data, &TrainConfig::desk(0.013, steps), &out).unwrap();
    (model, report)
}

#[test]
fn train_checkpoint_codec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, report) = trained(dir.path(), 60);
    assert_eq!(report.log.len(), 60);
    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);

    let (loaded, li) = load_checkpoint::<f32>(&dir.path().join("m.ckpt")).unwrap();
    assert_eq!(li, 3);
    assert_eq!(loaded.config, model.config);

    let x = texture(48, 80, &mut ChaCha8Rng::seed_from_u64(5));
    let a = encode_image(&model, &x, li).unwrap();
    let b = encode_image(&loaded, &x, li).unwrap();
    assert_eq!(a.stream.to_bytes(), b.stream.to_bytes());
    let stream = Bitstream::parse(&a.stream.to_bytes()).unwrap();
    assert_eq!((stream.height, stream.width), (48, 80));
    let dec = decode_image(&loaded, &stream).unwrap();
    assert_eq!(dec.y_hat, a.y_hat);
    assert_eq!(dec.x_hat.shape(), [1, 3, 48, 80]);
}

#[test]
fn wrong_config_is_reported_not_misloaded() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), 1);
    let path = dir.path().join("m.ckpt");
    let err = load_checkpoint_with_config::<f32>(&path, ModelConfig::desk_medium()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::MissingParameter(_))), "{err}");
    let mut wide = ModelConfig::tiny();
    wide.n = 64;
    let err = load_checkpoint_with_config::<f32>(&path, wide).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::ShapeDisagreement { .. })), "{err}");
}

#[test]
fn solid_image_codes_cheaply_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = trained(dir.path(), 300);
    let set = dir.path().join("set");
    std::fs::create_dir(&set).unwrap();
    Rgb8 {
        width: 64,
        height: 64,
        data: [90u8, 140, 200].repeat(64 * 64),
    }
    .write(&set.join("solid.ppm"))
    .unwrap();
    let r = eval_dataset(&model, &set, 3).unwrap();
    assert!(r.mean.bpp < 0.5, "{}", r.mean.bpp);
}
