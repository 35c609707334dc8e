use std::fs;

use phydiff::checkpoint::{load_checkpoint, save_checkpoint};
use phydiff::shard::{read_shard, write_shard};
use phydiff::training::{checkpoint_name, read_loss_log, run_training, FINAL_CHECKPOINT, LOSS_LOG};
use phydiff::video::{frame_path, read_video, write_video, Video};
use phydiff::Error;
use phydiff_core::config::{Config, Preset};
use phydiff_core::data::{stream_samples, ToyVae, TrainingSample};
use phydiff_core::diffusion::LatentVideo;
use phydiff_core::inference::to_pixels;
use phydiff_core::tensor::Tensor;
use phydiff_core::train::{TrainOptions, TrainState};

fn toy() -> Config {
    Config::preset(Preset::Toy)
}

fn samples(n: u64) -> Vec<TrainingSample> {
    stream_samples(0..n, &toy().model).collect::<Result<_, _>>().unwrap()
}

#[test]
fn shard_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.pvgc");
    let cfg = toy().model;
    let s = samples(10);
    assert_eq!(write_shard(s.iter().cloned().map(Ok), &cfg, &path).unwrap(), 10);
    assert!(!dir.path().join("s.pvgc.partial").exists());
    let back: Vec<_> = read_shard(&path, &cfg).unwrap().collect::<Result<_, _>>().unwrap();
    for (a, b) in s.iter().zip(&back) {
        assert_eq!(a.sample_id, b.sample_id);
        assert!(a.z0.tensor().bit_eq(b.z0.tensor()));
        assert!(a.p_gt.tensor().bit_eq(b.p_gt.tensor()));
    }

    let paper = Config::preset(Preset::Paper).model;
    assert!(matches!(read_shard(&path, &paper).err().unwrap(), Error::Core(phydiff_core::Error::Fingerprint { .. })));

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let r: Vec<_> = read_shard(&path, &cfg).unwrap().collect();
    assert!(matches!(r.last(), Some(Err(phydiff_core::Error::Truncated(_)))));

    let mut bad = bytes.clone();
    bad[0] = b'Q';
    fs::write(&path, bad).unwrap();
    let e = read_shard(&path, &cfg).err().unwrap();
    assert!(e.to_string().contains("magic"), "{e}");
}

#[test]
fn failed_stream_leaves_no_shard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.pvgc");
    let cfg = toy().model;
    let items = samples(2).into_iter().map(Ok).chain([Err(phydiff_core::Error::Invalid("boom".into()))]);
    assert!(write_shard(items, &cfg, &path).is_err());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let st = TrainState::new(&cfg, TrainOptions::default()).unwrap();
    let path = dir.path().join("c.pvgk");
    save_checkpoint(&path, &st).unwrap();
    let back = load_checkpoint(&path, &cfg).unwrap();
    assert_eq!(back.step, 0);

    let mut other = cfg.clone();
    other.model.phys_dim = 16;
    assert!(load_checkpoint(&path, &other).is_err());
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, &cfg).err().unwrap(), Error::Core(phydiff_core::Error::Truncated(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing"), &cfg).err().unwrap(), Error::Io { .. }));
}

#[test]
fn zero_step_run_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let out = run_training(&cfg, TrainOptions::default(), &samples(2), dir.path(), None, 0).unwrap();
    assert!(out.reports.is_empty());
    let saved = load_checkpoint(&out.final_checkpoint, &cfg).unwrap();
    let fresh = TrainState::new(&cfg, TrainOptions::default()).unwrap();
    for (id, p) in fresh.generator.store().iter() {
        assert!(p.value.bit_eq(saved.generator.store().value(id)));
    }
    for (id, p) in fresh.predictor.store().iter() {
        assert!(p.value.bit_eq(saved.predictor.store().value(id)));
    }
}

#[test]
fn training_writes_log_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.train.batch_size = 1;
    cfg.train.checkpoint_every = 2;
    cfg.train.log_every = 1;
    let out = run_training(&cfg, TrainOptions::default(), &samples(3), dir.path(), None, 4).unwrap();
    assert!(dir.path().join(checkpoint_name(2)).exists());
    assert!(dir.path().join(checkpoint_name(4)).exists());
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    let log = read_loss_log(&dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log, out.reports);
    for r in &log {
        let want = r.diffusion_loss + cfg.train.lambda_phys * r.physics_loss;
        assert!((r.total_loss - want).abs() <= 1e-6 * want.abs());
    }
    let line = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["step", "diffusion_loss", "physics_loss", "total_loss", "grad_norm", "gates"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn video_round_trip_and_static_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy().model;
    let vae = ToyVae::for_config(&cfg).unwrap();
    // latent constant over frames decodes to identical frames
    let mut z = Tensor::zeros(&cfg.latent_shape());
    let per = cfg.latent_height * cfg.latent_width;
    for c in 0..cfg.latent_channels {
        for f in 0..cfg.latent_frames {
            for k in 0..per {
                z.data_mut()[(c * cfg.latent_frames + f) * per + k] = ((c * 7 + k * 3) % 11) as f64 / 11.0 - 0.5;
            }
        }
    }
    let frames = vae.decode(&LatentVideo::new(z).unwrap()).unwrap();
    let s = frames.shape().to_vec();
    let video = Video::new(to_pixels(&frames), [s[0], s[1], s[2], s[3]]).unwrap();
    write_video(&video, dir.path()).unwrap();
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(names.len(), cfg.latent_frames);
    let first = fs::read(frame_path(dir.path(), 0)).unwrap();
    for f in 1..cfg.latent_frames {
        assert_eq!(fs::read(frame_path(dir.path(), f)).unwrap(), first);
    }
    assert_eq!(read_video(dir.path()).unwrap(), video);
}

#[test]
fn malformed_ppm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(frame_path(dir.path(), 0), b"P6\n2 2\n255\nabc").unwrap();
    assert!(read_video(dir.path()).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(read_video(empty.path()).is_err());
}
