//! The subcommands. Each one takes already-parsed options and returns a
//! [`CliError`] carrying its exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use transvg_core::checkpoint;
use transvg_core::image::to_pgm;
use transvg_core::linguistic::Vocabulary;
use transvg_core::selfcheck::{self, SelfCheckOptions};
use transvg_core::{evaluate, fit, iou, EpochRecord, Example, TransVg, Trainer};
use transvg_synth::{generate_splits, read_dataset, to_examples, write_dataset, GroundingSample};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.tvg";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(seed))
}

/// Writes `out/train` and `out/val` plus the generator settings used.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(usize, usize), CliError> {
    let splits = generate_splits(&cfg.generator)?;
    fs::create_dir_all(out)?;
    write_dataset(&splits.train, out.join("train"))?;
    write_dataset(&splits.val, out.join("val"))?;
    fs::write(out.join("generator.txt"), cfg.generator.to_text())?;
    Ok((splits.train.len(), splits.val.len()))
}

/// A split directory holds `samples.jsonl`; a dataset root holds `train/`
/// and `val/`, of which `default` is used.
fn split_dir(dir: &Path, default: &str) -> PathBuf {
    if dir.join("samples.jsonl").exists() {
        dir.to_path_buf()
    } else {
        dir.join(default)
    }
}

fn read_split(dir: &Path) -> Result<Vec<GroundingSample>, CliError> {
    if !dir.join("samples.jsonl").exists() {
        return Err(CliError::Runtime(format!("no samples.jsonl in {}", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn examples(samples: &[GroundingSample], vocab: &Vocabulary, cfg: &RunConfig) -> Result<Vec<Example>, CliError> {
    Ok(to_examples(samples, vocab, cfg.model.image_size, cfg.model.max_text_len)?)
}

pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Trains on `dataset/train`, validating on `dataset/val` when present.
/// With `resume`, parameters, optimizer state and the epoch counter come
/// from that checkpoint and the vocabulary from its directory.
pub fn train(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainSummary, CliError> {
    let dataset = dataset
        .or(cfg.dataset.as_deref())
        .ok_or_else(|| usage("train needs --dataset or a `dataset` config key"))?;
    let train_samples = read_split(&split_dir(dataset, "train"))?;
    let val_dir = dataset.join("val");
    let val_samples = if val_dir.join("samples.jsonl").exists() && split_dir(dataset, "train") != val_dir {
        read_split(&val_dir)?
    } else {
        Vec::new()
    };
    let vocab = match resume.map(|r| sibling(r, VOCAB_FILE)) {
        Some(v) if v.exists() => Vocabulary::load(&v)?,
        _ => Vocabulary::build(train_samples.iter().map(|s| s.expression.as_str()))?,
    };
    let train = examples(&train_samples, &vocab, cfg)?;
    let val = examples(&val_samples, &vocab, cfg)?;

    let model = TransVg::<f32>::new(cfg.model.clone(), vocab.len(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.adamw);
    if let Some(r) = resume {
        checkpoint::load_into(&mut trainer, r)?;
    }

    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    vocab.save(out.join(VOCAB_FILE))?;
    let log_path = out.join(LOG_FILE);
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
        f
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut epochs = Vec::new();
    while trainer.next_epoch < cfg.train.schedule.total_epochs {
        let val = (!val.is_empty()).then_some(val.as_slice());
        let records = fit(&mut trainer, &train, val, &cfg.train, |_, _| false)?;
        for r in records {
            writeln!(log, "{}", r.csv_row())?;
            progress(&r);
            epochs.push(r);
        }
        checkpoint::save(&trainer, &ckpt)?;
    }
    if epochs.is_empty() {
        checkpoint::save(&trainer, &ckpt)?;
    }
    Ok(TrainSummary { epochs, checkpoint: ckpt })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Model, vocabulary and run configuration of a finished training run. The
/// configuration comes from `config` or else from `config.txt` next to the
/// checkpoint.
pub fn load_trained(ckpt: &Path, config: Option<&Path>) -> Result<(RunConfig, Vocabulary, TransVg<f32>), CliError> {
    if !ckpt.exists() {
        return Err(CliError::Runtime(format!("format error: checkpoint {} not found", ckpt.display())));
    }
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| sibling(ckpt, CONFIG_FILE));
    let cfg = load_config(Some(&cfg_path), None)?;
    let vocab = Vocabulary::load(sibling(ckpt, VOCAB_FILE))?;
    let model = TransVg::<f32>::new(cfg.model.clone(), vocab.len(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.adamw);
    checkpoint::load_into(&mut trainer, ckpt)?;
    Ok((cfg, vocab, trainer.model))
}

pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

/// Accuracy@0.5 on a split; writes `predictions.jsonl` and `eval.csv`.
pub fn eval(ckpt: &Path, config: Option<&Path>, dataset: &Path, out: &Path) -> Result<EvalSummary, CliError> {
    let (cfg, vocab, model) = load_trained(ckpt, config)?;
    let samples = read_split(&split_dir(dataset, "val"))?;
    let data = examples(&samples, &vocab, &cfg)?;
    let result = evaluate(&model, &data, &cfg.loss())?;
    fs::create_dir_all(out)?;
    let mut preds = String::new();
    for ((s, p), e) in samples.iter().zip(&result.predictions).zip(&data) {
        let line = serde_json::json!({
            "id": s.id,
            "pred": p.to_array(),
            "gt": e.target.to_array(),
        });
        preds.push_str(&line.to_string());
        preds.push('\n');
    }
    fs::write(out.join("predictions.jsonl"), preds)?;
    fs::write(
        out.join("eval.csv"),
        format!(
            "samples,accuracy,mean_loss\n{},{},{}\n",
            data.len(),
            result.accuracy,
            result.mean_loss
        ),
    )?;
    Ok(EvalSummary {
        accuracy: result.accuracy,
        mean_loss: result.mean_loss,
        samples: data.len(),
    })
}

fn find_sample(dataset: &Path, id: &str) -> Result<GroundingSample, CliError> {
    for split in ["", "val", "train"] {
        let dir = if split.is_empty() { dataset.to_path_buf() } else { dataset.join(split) };
        if dir.join("samples.jsonl").exists() {
            if let Some(s) = read_dataset(&dir)?.into_iter().find(|s| s.id == id) {
                return Ok(s);
            }
        }
    }
    Err(CliError::Runtime(format!("sample `{id}` not found under {}", dataset.display())))
}

pub struct SamplePrediction {
    pub sample: GroundingSample,
    pub inference: transvg_core::Inference,
    pub iou: f64,
}

pub fn predict(ckpt: &Path, config: Option<&Path>, dataset: &Path, id: &str) -> Result<SamplePrediction, CliError> {
    let (cfg, vocab, model) = load_trained(ckpt, config)?;
    let sample = find_sample(dataset, id)?;
    let ex = examples(std::slice::from_ref(&sample), &vocab, &cfg)?.remove(0);
    let inference = model.infer(&ex.image, &ex.text)?;
    let iou = iou(inference.bbox, ex.target);
    Ok(SamplePrediction { sample, inference, iou })
}

fn pixel_corners(b: transvg_core::BBox, size: usize) -> [f64; 4] {
    b.corners().map(|c| c * size as f64)
}

/// One PGM heatmap of the regression token's attention over the visual grid
/// per V-L layer, plus `attention.txt` with scales and boxes.
pub fn attn_dump(ckpt: &Path, config: Option<&Path>, dataset: &Path, id: &str, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, _, _) = load_trained(ckpt, config)?;
    let p = predict(ckpt, config, dataset, id)?;
    let (h, w) = p.inference.grid;
    fs::create_dir_all(out)?;
    let size = cfg.model.image_size;
    let mut sidecar = format!(
        "sample {}\nexpression {}\ngrid {h} {w}\npred_box_px {:?}\ngt_box_px {:?}\niou {}\n",
        p.sample.id,
        p.sample.expression,
        pixel_corners(p.inference.bbox, size),
        pixel_corners(p.sample.bbox, size),
        p.iou
    );
    let mut files = Vec::new();
    for (l, weights) in p.inference.reg_attention.iter().enumerate() {
        let max = weights.iter().copied().fold(0.0f64, f64::max);
        let pixels: Vec<u8> = weights
            .iter()
            .map(|&a| if max > 0.0 { (a / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let path = out.join(format!("attn_layer{}.pgm", l + 1));
        fs::write(&path, to_pgm(w, h, &pixels)?)?;
        sidecar.push_str(&format!("layer {} file {} scale {max:e}\n", l + 1, path.file_name().unwrap().to_string_lossy()));
        files.push(path);
    }
    fs::write(out.join("attention.txt"), sidecar)?;
    Ok(files)
}

/// Runs the finite-difference suite over five seeds starting at `seed`.
pub fn grad_check(seed: u64, corrupt: Option<String>) -> Result<selfcheck::SelfCheckReport, CliError> {
    let opts = SelfCheckOptions {
        seeds: (seed..seed + 5).collect(),
        corrupt,
        ..SelfCheckOptions::default()
    };
    Ok(selfcheck::run(&opts)?)
}
