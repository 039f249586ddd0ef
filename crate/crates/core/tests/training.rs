use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transvg_core::checkpoint;
use transvg_core::linguistic::{EncodedText, CLS, PAD, SEP};
use transvg_core::visual::ImageInput;
use transvg_core::{fit, BBox, Error, Example, ModelConfig, Schedule, TrainConfig, Trainer, TransVg};

fn examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    (0..n)
        .map(|_| {
            let pixels = (0..size * size * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let mut ids = vec![CLS, rng.gen_range(4..7), SEP];
            let mut mask = vec![true; 3];
            ids.resize(cfg.max_text_len, PAD);
            mask.resize(cfg.max_text_len, false);
            Example {
                image: ImageInput {
                    height: size,
                    width: size,
                    pixels,
                    valid: vec![true; size * size],
                },
                text: EncodedText { ids, mask },
                target: BBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), 0.2, 0.3).unwrap(),
                relational: false,
            }
        })
        .collect()
}

fn config(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        schedule: Schedule {
            drop_epoch: epochs.saturating_sub(1),
            total_epochs: epochs,
            ..Schedule::desk()
        },
        batch_size: batch,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trainer(seed: u64) -> Trainer<f32> {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..ModelConfig::tiny()
    };
    Trainer::new(TransVg::new(cfg, 8, seed).unwrap(), Default::default())
}

#[test]
fn one_optimizer_step_per_batch() {
    let data = examples(&ModelConfig::tiny(), 10, 1);
    let mut t = trainer(0);
    let log = fit(&mut t, &data, None, &config(2, 4), |_, _| true).unwrap();
    // ceil(10 / 4) = 3 batches per epoch
    assert_eq!(log.iter().map(|r| r.steps).collect::<Vec<_>>(), [3, 6]);

    let mut t = trainer(0);
    let log = fit(&mut t, &data[..1], None, &config(1, 32), |_, _| true).unwrap();
    assert_eq!(log[0].steps, 1);
}

#[test]
fn same_seed_gives_identical_log_and_finite_losses() {
    let data = examples(&ModelConfig::tiny(), 12, 2);
    let val = examples(&ModelConfig::tiny(), 4, 9);
    let run = || {
        let mut t = trainer(5);
        fit(&mut t, &data, Some(&val), &config(3, 4), |_, _| true).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    for r in &a {
        assert!(r.loss.is_finite() && r.l1_term.is_finite() && r.giou_term.is_finite());
        assert!((r.loss - r.l1_term - r.giou_term).abs() < 1e-5, "lambda = 1");
        assert!(r.val_acc.is_some());
    }
    assert_eq!(a[2].lr_fusion, 1e-4);
    assert_eq!(a[2].lr_fusion / a[2].lr_branch, a[0].lr_fusion / a[0].lr_branch);
}

#[test]
fn stopping_early_and_resuming_matches_an_uninterrupted_run() {
    let data = examples(&ModelConfig::tiny(), 8, 4);
    let cfg = config(3, 4);
    let mut full = trainer(1);
    let whole = fit(&mut full, &data, None, &cfg, |_, _| true).unwrap();

    let mut part = trainer(1);
    let first = fit(&mut part, &data, None, &cfg, |r, _| r.epoch < 1).unwrap();
    assert_eq!(first.len(), 2);
    assert_eq!(part.next_epoch, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tvg");
    checkpoint::save(&part, &path).unwrap();
    let mut resumed = trainer(99);
    checkpoint::load_into(&mut resumed, &path).unwrap();
    assert_eq!(resumed.next_epoch, 2);
    let rest = fit(&mut resumed, &data, None, &cfg, |_, _| true).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].epoch, 2);
    assert_eq!(rest[0], whole[2]);
    for ((_, a), (_, b)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let data = examples(&ModelConfig::tiny(), 4, 6);
    let mut t = trainer(2);
    fit(&mut t, &data, None, &config(1, 2), |_, _| true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tvg");
    checkpoint::save(&t, &path).unwrap();
    let mut back = trainer(7);
    checkpoint::load_into(&mut back, &path).unwrap();
    let (a, b) = (checkpoint::trainer_arrays(&t), checkpoint::trainer_arrays(&back));
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        let bits = |t: &transvg_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    assert_eq!(back.optimizer.step, t.optimizer.step);
}

#[test]
fn truncated_checkpoint_leaves_the_model_untouched() {
    let t = trainer(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tvg");
    checkpoint::save(&t, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let mut other = trainer(8);
    let before = other.model.params.clone();
    assert!(matches!(checkpoint::load_into(&mut other, &path), Err(Error::Format(_))));
    for ((_, a), (_, b)) in other.model.params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn mismatched_config_names_the_offending_array() {
    let t = trainer(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tvg");
    checkpoint::save(&t, &path).unwrap();
    let wider = ModelConfig {
        text_ffn: 24,
        ..ModelConfig::tiny()
    };
    let mut other = Trainer::new(TransVg::<f32>::new(wider, 8, 0).unwrap(), Default::default());
    let err = checkpoint::load_into(&mut other, &path).unwrap_err();
    assert!(err.to_string().contains("text.encoder"), "{err}");
}

#[test]
fn empty_training_set_is_rejected() {
    let mut t = trainer(0);
    assert!(fit(&mut t, &[], None, &config(1, 4), |_, _| true).is_err());
}
