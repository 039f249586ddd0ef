//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{accuracy_at_iou, grounding_loss, BBox, LossConfig};
use crate::error::{Error, Result};
use crate::linguistic::EncodedText;
use crate::model::TransVg;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{ParamGroup, Session, SessionOptions};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::visual::ImageInput;

/// One model-ready sample.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: ImageInput,
    pub text: EncodedText,
    pub target: BBox,
    pub relational: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::desk(),
            batch_size: 32,
            loss: LossConfig::default(),
            adamw: AdamWConfig::default(),
            grad_clip: None,
            seed: 0,
        }
    }
}

/// Per-epoch training log row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_fusion: f64,
    pub lr_branch: f64,
    pub loss: f64,
    pub l1_term: f64,
    pub giou_term: f64,
    pub val_acc: Option<f64>,
    pub steps: u64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr_fusion,lr_branch,loss,l1_term,giou_term,val_acc";

    pub fn csv_row(&self) -> String {
        let acc = self.val_acc.map(|a| format!("{a}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{},{},{},{}",
            self.epoch, self.lr_fusion, self.lr_branch, self.loss, self.l1_term, self.giou_term, acc
        )
    }
}

/// Model plus optimizer state and the index of the next epoch to run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: TransVg<T>,
    pub optimizer: AdamW<T>,
    pub next_epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TransVg<T>, adamw: AdamWConfig) -> Self {
        let optimizer = AdamW::new(&model.params, adamw);
        Self {
            model,
            optimizer,
            next_epoch: 0,
        }
    }
}

/// Mixes the run seed with step/sample coordinates into a dropout seed.
fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct BatchStats {
    pub loss: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Forward/backward over `batch`, averaging gradients, then one optimizer
/// update at the given epoch's learning rates.
pub fn train_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    batch: &[&Example],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let step = trainer.optimizer.step;
    let model = &trainer.model;
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
    let mut stats = BatchStats {
        loss: 0.0,
        l1: 0.0,
        giou: 0.0,
    };
    for (i, ex) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let opts = SessionOptions::train(stream_seed(cfg.seed, step, i as u64));
        let mut s = Session::new(&mut tape, &model.params, opts);
        let (_, loss) = model.loss(&mut s, &ex.image, &ex.text, ex.target, &cfg.loss)?;
        stats.loss += s.tape.value(loss.total).data()[0].as_f64();
        stats.l1 += s.tape.value(loss.smooth_l1).data()[0].as_f64();
        stats.giou += s.tape.value(loss.giou).data()[0].as_f64();
        let mut grads = s.tape.backward(loss.total)?;
        for (slot, g) in acc.iter_mut().zip(s.param_grads(&mut grads)) {
            match (slot.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
    let n = batch.len() as f64;
    let inv = T::of(1.0 / n);
    for g in acc.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    if let Some(max_norm) = cfg.grad_clip {
        let norm = acc
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = T::of(max_norm / norm);
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let schedule = cfg.schedule;
    let fusion = schedule.lr_at_epoch(ParamGroup::Fusion, epoch)?;
    let branch = schedule.lr_at_epoch(ParamGroup::Branch, epoch)?;
    trainer.optimizer.step(&mut trainer.model.params, &acc, |g| match g {
        ParamGroup::Fusion => fusion,
        ParamGroup::Branch => branch,
    })?;
    stats.loss /= n;
    stats.l1 /= n;
    stats.giou /= n;
    Ok(stats)
}

/// Runs epochs `trainer.next_epoch .. schedule.total_epochs`. After each
/// epoch `on_epoch` sees the record and the model; returning `false` stops.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TransVg<T>) -> bool,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    cfg.schedule.validate()?;
    cfg.loss.validate()?;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in trainer.next_epoch..cfg.schedule.total_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss, mut l1, mut giou) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = train_step(trainer, &batch, cfg, epoch)?;
            let w = batch.len() as f64;
            loss += stats.loss * w;
            l1 += stats.l1 * w;
            giou += stats.giou * w;
        }
        let n = train.len() as f64;
        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&trainer.model, v, &cfg.loss)?.accuracy),
            _ => None,
        };
        trainer.next_epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            lr_fusion: cfg.schedule.lr_at_epoch(ParamGroup::Fusion, epoch)?,
            lr_branch: cfg.schedule.lr_at_epoch(ParamGroup::Branch, epoch)?,
            loss: loss / n,
            l1_term: l1 / n,
            giou_term: giou / n,
            val_acc,
            steps: trainer.optimizer.step,
        };
        let keep_going = on_epoch(&record, &trainer.model);
        log.push(record);
        if !keep_going {
            break;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<BBox>,
}

/// Evaluation-mode predictions, accuracy@0.5 and mean loss.
pub fn evaluate<T: Scalar>(model: &TransVg<T>, examples: &[Example], loss: &LossConfig) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut total = 0.0;
    for ex in examples {
        let out = model.infer(&ex.image, &ex.text)?;
        total += grounding_loss(out.bbox, ex.target, loss)?.total;
        predictions.push(out.bbox);
    }
    let targets: Vec<BBox> = examples.iter().map(|e| e.target).collect();
    Ok(Evaluation {
        accuracy: accuracy_at_iou(&predictions, &targets, 0.5)?,
        mean_loss: total / examples.len().max(1) as f64,
        predictions,
    })
}
