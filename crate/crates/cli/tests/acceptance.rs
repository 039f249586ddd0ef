//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Run with `cargo test --release -p transvg-cli --test acceptance`. Extra
//! arguments select criteria by substring, e.g. `-- overfit schedule`.
//! The training criteria take about an hour on one core, so this target is
//! excluded from the default `cargo test` run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transvg_core::checkpoint;
use transvg_core::fusion::{vl_forward, JointSequence};
use transvg_core::linguistic::{EncodedText, Vocabulary};
use transvg_core::params::{Session, SessionOptions};
use transvg_core::selfcheck::{self, SelfCheckOptions};
use transvg_core::visual::ImageInput;
use transvg_core::{
    evaluate, fit, giou, iou, BBox, Example, ModelConfig, ParamGroup, RegInitMode, Schedule, Tape, Tensor,
    TrainConfig, Trainer, TransVg,
};
use transvg_synth::{generate_splits, to_examples, GeneratorConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------ gradients

fn gradient_suite() -> Outcome {
    let report = selfcheck::run(&SelfCheckOptions::default()).expect("self-check runs");
    let worst_op = report
        .results
        .iter()
        .filter(|r| !r.name.starts_with("model_loss"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let worst_model = report
        .results
        .iter()
        .filter(|r| r.name.starts_with("model_loss"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    for r in report.results.iter().filter(|r| !r.passed()) {
        println!("    {r}");
    }
    let seeds = report.results.iter().map(|r| r.seeds).min().unwrap_or(0);
    let pass = report.passed() && worst_op < 1e-4 && worst_model < 1e-3 && seeds >= 5 && report.seconds < 120.0;
    outcome(
        pass,
        format!(
            "{} checks, {seeds} seeds, max rel err ops {worst_op:.2e} model {worst_model:.2e}, {:.1}s",
            report.results.len(),
            report.seconds
        ),
    )
}

// ------------------------------------------------------------ boxes

fn giou_oracle() -> Outcome {
    let start = Instant::now();
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
    let unit = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
    let far = BBox::from_corners(2.0, 2.0, 3.0, 3.0).unwrap();
    let hand = [
        (iou(a, b), 1.0 / 7.0),
        (giou(unit, far).unwrap(), -7.0 / 9.0),
        (giou(unit, BBox::from_corners(0.0, 0.0, 1.0, 3.0).unwrap()).unwrap(), 1.0 / 3.0),
    ];
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random_box = |rng: &mut ChaCha8Rng| {
        BBox::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(1e-3..1.0), rng.gen_range(1e-3..1.0)).unwrap()
    };
    let mut violations = 0;
    for _ in 0..100_000 {
        let (p, q) = (random_box(&mut rng), random_box(&mut rng));
        let k = rng.gen_range(0.1..10.0);
        let g = giou(p, q).unwrap();
        let scaled = |x: BBox| BBox::new(x.cx * k, x.cy * k, x.w * k, x.h * k).unwrap();
        let ok = (g - giou(q, p).unwrap()).abs() < 1e-12
            && g <= iou(p, q) + 1e-12
            && g > -1.0
            && g <= 1.0
            && (giou(scaled(p), scaled(q)).unwrap() - g).abs() < 1e-9;
        violations += usize::from(!ok);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hand_ok && violations == 0 && secs < 30.0,
        format!("hand values {}, {violations} violations in 1e5 pairs, {secs:.1}s", if hand_ok { "match" } else { "differ" }),
    )
}

// ------------------------------------------------------------ masking

fn random_image(n: usize, valid_w: usize, valid_h: usize, rng: &mut ChaCha8Rng) -> ImageInput {
    let mut pixels = Vec::new();
    let mut valid = Vec::new();
    for y in 0..n {
        for x in 0..n {
            pixels.extend((0..3).map(|_| rng.gen_range(0.0f32..1.0)));
            valid.push(x < valid_w && y < valid_h);
        }
    }
    ImageInput {
        height: n,
        width: n,
        pixels,
        valid,
    }
}

fn text(words: &[usize], len: usize) -> EncodedText {
    use transvg_core::linguistic::{CLS, PAD, SEP};
    let mut ids = vec![CLS];
    ids.extend_from_slice(words);
    ids.push(SEP);
    let mut mask = vec![true; ids.len()];
    ids.resize(len, PAD);
    mask.resize(len, false);
    EncodedText { ids, mask }
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn mask_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for mode in RegInitMode::ALL {
        let cfg = ModelConfig {
            reg_init: mode,
            ..ModelConfig::desk()
        };
        let model = TransVg::<f32>::new(cfg.clone(), 30, 3).unwrap();
        let img = random_image(64, 40, 56, &mut rng);
        let t = text(&[9, 10, 11, 12], 40);
        let run = |img: &ImageInput, t: &EncodedText| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &model.params, SessionOptions::eval());
            let v = model.arch.visual.forward(&mut s, img).unwrap();
            let l = model.arch.linguistic.forward(&mut s, t).unwrap();
            let visual = s.tape.value(v.embeddings).clone();
            let ling = s.tape.value(l.embeddings).clone();
            let valid_v = v.mask.clone();
            let bbox = model.infer(img, t).unwrap().bbox.to_array();
            (visual, valid_v, ling, bbox)
        };
        let (v0, vmask, l0, b0) = run(&img, &t);
        for _ in 0..3 {
            let mut img2 = img.clone();
            for (i, ok) in img.valid.iter().enumerate() {
                if !ok {
                    for c in 0..3 {
                        img2.pixels[3 * i + c] = rng.gen_range(0.0..1.0);
                    }
                }
            }
            let mut t2 = t.clone();
            for (id, ok) in t2.ids.iter_mut().zip(&t.mask) {
                if !ok {
                    *id = rng.gen_range(4..30);
                }
            }
            let (v1, _, l1, b1) = run(&img2, &t2);
            for (r, ok) in vmask.iter().enumerate() {
                if *ok {
                    worst = worst.max(max_diff(v0.row(r), v1.row(r)));
                }
            }
            for (r, ok) in t.mask.iter().enumerate() {
                if *ok {
                    worst = worst.max(max_diff(l0.row(r), l1.row(r)));
                }
            }
            for (a, b) in b0.iter().zip(b1) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    // the V-L transformer on its own, with arbitrary masked rows
    let cfg = ModelConfig::desk();
    let model = TransVg::<f32>::new(cfg.clone(), 30, 7).unwrap();
    let len = cfg.joint_len();
    let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.6)).collect();
    mask[len - 1] = true;
    let x: Vec<f32> = (0..len * cfg.fusion_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |data: Vec<f32>| {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &model.params, SessionOptions::eval());
        let embeddings = s.tape.constant(Tensor::new(&[len, cfg.fusion_dim], data).unwrap());
        let joint = JointSequence {
            embeddings,
            mask: mask.clone(),
            reg_index: len - 1,
            visual_len: cfg.visual_tokens(),
        };
        let out = vl_forward(&mut s, &joint, &model.arch.fusion).unwrap();
        s.tape.value(out.states).clone()
    };
    let base = run(x.clone());
    let mut y = x;
    for (r, ok) in mask.iter().enumerate() {
        if !ok {
            for c in 0..cfg.fusion_dim {
                y[r * cfg.fusion_dim + c] = rng.gen_range(-50.0..50.0);
            }
        }
    }
    let out = run(y);
    for (r, ok) in mask.iter().enumerate() {
        if *ok {
            worst = worst.max(max_diff(out.row(r), base.row(r)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 60.0,
        format!("max change of unmasked outputs {worst:.1e} over 6 REG modes and the V-L stack, {secs:.1}s"),
    )
}

// ------------------------------------------------------------ shapes

fn shape_contracts() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, what: String| {
        pass &= ok;
        notes.push(what);
    };

    let desk = ModelConfig::desk();
    let paper = ModelConfig::paper_scale();
    check(desk.joint_len() == 105 && paper.joint_len() == 441, format!("joint {}/{}", desk.joint_len(), paper.joint_len()));

    // paper geometry end to end, with narrow channels so it runs quickly
    let geometry = ModelConfig {
        image_size: 640,
        stem_channels: vec![4, 4, 4, 4, 8],
        max_text_len: 40,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = TransVg::<f32>::new(geometry, 20, 0).unwrap();
    let out = model.infer(&random_image(640, 640, 640, &mut rng), &text(&[4, 5], 40)).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.params, SessionOptions::eval());
    let pred = model.forward(&mut s, &random_image(640, 640, 640, &mut rng), &text(&[4, 5], 40)).unwrap();
    check(pred.joint_len == 441 && out.grid == (20, 20), format!("paper-geometry forward {} tokens", pred.joint_len));

    let model = TransVg::<f32>::new(desk.clone(), 30, 1).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.params, SessionOptions::eval());
    let pred = model.forward(&mut s, &random_image(64, 64, 48, &mut rng), &text(&[5, 6, 7], 40)).unwrap();
    let row_err = pred.reg_row_sums.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    check(pred.joint_len == 105 && row_err < 1e-5, format!("desk forward {} tokens, row sum err {row_err:.1e}", pred.joint_len));
    let dims_ok = pred.grid == (8, 8) && pred.reg_attention.len() == desk.vl_layers && pred.reg_attention.iter().all(|l| l.len() == 64);
    check(dims_ok, format!("heatmaps {}x({}x{})", pred.reg_attention.len(), pred.grid.0, pred.grid.1));

    let trainer = Trainer::new(model, Default::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tvg");
    checkpoint::save(&trainer, &path).unwrap();
    let mut back = Trainer::new(TransVg::<f32>::new(desk, 30, 99).unwrap(), Default::default());
    checkpoint::load_into(&mut back, &path).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = checkpoint::trainer_arrays(&trainer)
        .iter()
        .zip(checkpoint::trainer_arrays(&back).iter())
        .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape() && bits(a) == bits(b));
    check(exact, format!("checkpoint round trip {}", if exact { "bit-exact" } else { "differs" }));
    outcome(pass, notes.join(", "))
}

// ------------------------------------------------------------ schedule

fn schedule_contract() -> Outcome {
    let s = Schedule::paper();
    let lr = |g, e| s.lr_at_epoch(g, e).unwrap();
    let mut ok = lr(ParamGroup::Fusion, 59) == 1e-4
        && lr(ParamGroup::Fusion, 60) == 1e-5
        && lr(ParamGroup::Branch, 0) == 1e-5
        && lr(ParamGroup::Branch, 60) == 1e-6
        && s.total_epochs == 90;
    for e in 0..s.total_epochs {
        let ratio = lr(ParamGroup::Fusion, e) / lr(ParamGroup::Branch, e);
        ok &= (ratio - 10.0).abs() < 1e-9;
    }
    ok &= s.lr_at_epoch(ParamGroup::Fusion, 90).is_err();
    outcome(ok, "fusion 1e-4 -> 1e-5 and branch 1e-5 -> 1e-6 at epoch 60 of 90, ratio 10 at every epoch")
}

// ------------------------------------------------------------ training

struct Data {
    train: Vec<Example>,
    val: Vec<Example>,
    vocab: Vocabulary,
}

fn dataset(count: usize, val_fraction: f64, seed: u64) -> Data {
    let cfg = GeneratorConfig {
        count,
        val_fraction,
        seed,
        ..GeneratorConfig::default()
    };
    let splits = generate_splits(&cfg).unwrap();
    let vocab = Vocabulary::build(splits.train.iter().map(|s| s.expression.as_str())).unwrap();
    let desk = ModelConfig::desk();
    let train = to_examples(&splits.train, &vocab, desk.image_size, desk.max_text_len).unwrap();
    let val = to_examples(&splits.val, &vocab, desk.image_size, desk.max_text_len).unwrap();
    Data { train, val, vocab }
}

struct Overfit {
    steps: u64,
    loss: f64,
    accuracy: f64,
    seconds: f64,
}

const OVERFIT_STEPS: usize = 500;

/// Trains on one batch of `data` with the desk model until loss < 0.02 at
/// 100% accuracy (measured in evaluation mode) or 500 steps. The desk
/// schedule is stretched over the 500 steps, dropping at the same 3/4 mark.
fn overfit(data: &Data, mode: RegInitMode, seed: u64) -> Overfit {
    let start = Instant::now();
    let model_cfg = ModelConfig {
        reg_init: mode,
        ..ModelConfig::desk()
    };
    let desk = TrainConfig::default();
    let cfg = TrainConfig {
        schedule: Schedule {
            drop_epoch: OVERFIT_STEPS * desk.schedule.drop_epoch / desk.schedule.total_epochs,
            total_epochs: OVERFIT_STEPS,
            ..desk.schedule
        },
        batch_size: data.train.len(),
        seed,
        ..desk
    };
    let model = TransVg::<f32>::new(model_cfg, data.vocab.len(), seed).unwrap();
    let mut trainer = Trainer::new(model, cfg.adamw);
    let mut last = (0.0, 0.0);
    let mut best_acc: f64 = 0.0;
    fit(&mut trainer, &data.train, None, &cfg, |_, m| {
        let e = evaluate(m, &data.train, &cfg.loss).unwrap();
        last = (e.mean_loss, e.accuracy);
        best_acc = best_acc.max(e.accuracy);
        !(e.mean_loss < 0.02 && e.accuracy == 1.0)
    })
    .unwrap();
    Overfit {
        steps: trainer.optimizer.step,
        loss: last.0,
        accuracy: best_acc.max(last.1),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn single_batch_overfit(data: &Data) -> Outcome {
    let r = overfit(data, RegInitMode::Learnable, 0);
    outcome(
        r.loss < 0.02 && r.accuracy == 1.0 && r.steps <= OVERFIT_STEPS as u64 && r.seconds < 300.0,
        format!("loss {:.4}, accuracy {:.0}% after {} steps, {:.0}s", r.loss, 100.0 * r.accuracy, r.steps, r.seconds),
    )
}

fn reg_modes(data: &Data) -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for mode in RegInitMode::ALL {
        let r = overfit(data, mode, 0);
        pass &= r.accuracy >= 0.8;
        notes.push(format!("{mode} {:.0}%", 100.0 * r.accuracy));
    }
    outcome(pass, notes.join(", "))
}

struct Run {
    accuracy: f64,
    relational: f64,
    seconds: f64,
}

fn train_run(data: &Data, model_cfg: ModelConfig, seed: u64) -> Run {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = TransVg::<f32>::new(model_cfg, data.vocab.len(), seed).unwrap();
    let mut trainer = Trainer::new(model, cfg.adamw);
    fit(&mut trainer, &data.train, None, &cfg, |r, _| {
        eprintln!("      epoch {} loss {:.4}", r.epoch, r.loss);
        true
    })
    .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let e = evaluate(&trainer.model, &data.val, &cfg.loss).unwrap();
    let rel: Vec<f64> = data
        .val
        .iter()
        .zip(&e.predictions)
        .filter(|(x, _)| x.relational)
        .map(|(x, p)| f64::from(u8::from(iou(*p, x.target) > 0.5)))
        .collect();
    Run {
        accuracy: e.accuracy,
        relational: rel.iter().sum::<f64>() / rel.len().max(1) as f64,
        seconds,
    }
}

fn generalization(data: &Data, full: &Run) -> Outcome {
    outcome(
        full.accuracy >= 0.9 && full.seconds < 1800.0,
        format!(
            "{} train / {} val, 40 epochs: accuracy {:.1}% ({:.0}s training)",
            data.train.len(),
            data.val.len(),
            100.0 * full.accuracy,
            full.seconds
        ),
    )
}

fn ablation(data: &Data, first_full: Option<Run>) -> Outcome {
    let desk = ModelConfig::desk();
    let variants = [
        ("full", desk.clone()),
        (
            "no branch transformers",
            ModelConfig {
                visual_transformer: false,
                linguistic_transformer: false,
                ..desk.clone()
            },
        ),
        ("vl_layers=0", ModelConfig { vl_layers: 0, ..desk }),
    ];
    let mut first_full = first_full;
    let mut means = Vec::new();
    for (name, cfg) in variants {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let run = match (name, seed, first_full.take()) {
                ("full", 0, Some(r)) => r,
                _ => train_run(data, cfg.clone(), seed),
            };
            accs.push(run.relational);
        }
        let mean = accs.iter().sum::<f64>() / 3.0;
        println!("    {name}: relational accuracy per seed {accs:.3?}, mean {mean:.3}");
        means.push((name, mean));
    }
    let (full, no_branch, no_vl) = (means[0].1, means[1].1, means[2].1);
    outcome(
        full > no_branch && full > no_vl,
        format!("relational mean accuracy: full {full:.3}, no branch transformers {no_branch:.3}, vl_layers=0 {no_vl:.3}"),
    )
}

// ------------------------------------------------------------ main

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    if wanted("gradient") {
        report("gradient suite", gradient_suite());
    }
    if wanted("giou") {
        report("giou oracle", giou_oracle());
    }
    if wanted("mask") {
        report("mask invariance", mask_invariance());
    }
    if wanted("shape") {
        report("shape contracts", shape_contracts());
    }
    if wanted("schedule") {
        report("schedule contract", schedule_contract());
    }
    if wanted("overfit") || wanted("reg modes") {
        let small = dataset(16, 0.0, 7);
        if wanted("overfit") {
            report("single-batch overfit", single_batch_overfit(&small));
        }
        if wanted("reg modes") {
            report("reg modes", reg_modes(&small));
        }
    }
    if wanted("generalization") || wanted("ablation") {
        let data = dataset(2000, 0.1, 0);
        let full = train_run(&data, ModelConfig::desk(), 0);
        if wanted("generalization") {
            report("generalization", generalization(&data, &full));
        }
        if wanted("ablation") {
            report("ablation ordering", ablation(&data, Some(full)));
        }
    }

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
