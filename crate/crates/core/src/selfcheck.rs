//! Finite-difference self-check of every differentiable operation and of the
//! end-to-end grounding loss on a tiny model, in 64-bit precision.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{giou_var, grounding_loss_var, BBox, LossConfig};
use crate::error::Result;
use crate::fusion::RegInitMode;
use crate::gradcheck::{grad_check_with, relative_error};
use crate::linguistic::{EncodedText, CLS, PAD, SEP};
use crate::model::{ModelConfig, TransVg};
use crate::params::{ParamGroup, ParamStore, Session, SessionOptions};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{
    encoder_layer, multi_head_self_attention, scaled_dot_attention, sine_2d_positions, AttentionParams,
    EncoderLayerParams,
};
use crate::visual::{im2col, ImageInput};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    pub seeds: Vec<u64>,
    pub eps: f64,
    /// Step for the end-to-end model. Smaller than `eps` so the central
    /// difference rarely straddles a ReLU kink of the tiny network.
    pub model_eps: f64,
    /// Name of a check whose op output gets a deliberately wrong backward
    /// rule (gradients scaled by 1.1), as a negative control.
    pub corrupt: Option<String>,
    /// Parameter coordinates probed per model check.
    pub model_coordinates: usize,
    pub reg_modes: Vec<RegInitMode>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            eps: 1e-4,
            model_eps: 1e-5,
            corrupt: None,
            model_coordinates: 200,
            reg_modes: RegInitMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} max_rel_err {:.3e} (tol {:.0e}, {} coords, {} seeds)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.coordinates,
            self.seeds
        )
    }
}

#[derive(Clone, Debug)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type CaseBuilder = fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, OpFn)>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// `a` shifted by ±0.3 per entry, so no pair is near a tie.
fn apart(rng: &mut ChaCha8Rng, a: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().map(|&x| if rng.gen_bool(0.5) { x + 0.3 } else { x - 0.3 }).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Values with magnitude in `[lo, hi)` and random sign, keeping inputs clear
/// of kinks at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

fn jitter(rng: &mut ChaCha8Rng, t: &Tensor<f64>, amount: f64) -> Tensor<f64> {
    let data = t.data().iter().map(|&v| v + rng.gen_range(-amount..amount)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Random mask with at least one `true`.
fn some_true(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let k = rng.gen_range(0..n);
    m[k] = true;
    m
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..5), rng.gen_range(2..6))
}

fn op(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(f)
}

fn op_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("matmul", |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(2..5);
            Ok((vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], op(|t, v| t.matmul(v[0], v[1]))))
        }),
        ("matmul_nt", |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(2..5);
            Ok((vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[n, k], -1.0, 1.0)], op(|t, v| t.matmul_nt(v[0], v[1]))))
        }),
        ("transpose", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| t.transpose(v[0]))))
        }),
        ("add", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| t.add(v[0], v[1]))))
        }),
        ("sub", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| t.sub(v[0], v[1]))))
        }),
        ("mul", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| t.mul(v[0], v[1]))))
        }),
        ("div", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), signed(r, &[m, n], 0.5, 1.5)], op(|t, v| t.div(v[0], v[1]))))
        }),
        ("maximum", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = apart(r, &a);
            Ok((vec![a, b], op(|t, v| t.maximum(v[0], v[1]))))
        }),
        ("minimum", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = apart(r, &a);
            Ok((vec![a, b], op(|t, v| t.minimum(v[0], v[1]))))
        }),
        ("add_bias", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], op(|t, v| t.add_bias(v[0], v[1]))))
        }),
        ("scale", |r| {
            let (m, n) = dims(r);
            let c = r.gen_range(-2.0..2.0);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| Ok(t.scale(v[0], c)))))
        }),
        ("add_scalar", |r| {
            let (m, n) = dims(r);
            let c = r.gen_range(-2.0..2.0);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| Ok(t.add_scalar(v[0], c)))))
        }),
        ("relu", |r| {
            let (m, n) = dims(r);
            Ok((vec![signed(r, &[m, n], 0.1, 1.0)], op(|t, v| Ok(t.relu(v[0])))))
        }),
        ("sigmoid", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -3.0, 3.0)], op(|t, v| Ok(t.sigmoid(v[0])))))
        }),
        ("smooth_l1", |r| {
            let (m, n) = dims(r);
            // magnitudes on both sides of beta = 1, away from the transition
            let x = signed(r, &[m, n], 0.05, 1.8).map(|v| if (v.abs() - 1.0).abs() < 0.1 { v * 0.5 } else { v });
            Ok((vec![x], op(|t, v| t.smooth_l1(v[0], 1.0))))
        }),
        ("sum", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| Ok(t.sum(v[0])))))
        }),
        ("mean", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(|t, v| Ok(t.mean(v[0])))))
        }),
        ("masked_mean_rows", |r| {
            let (m, n) = dims(r);
            let mask = some_true(r, m);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| t.masked_mean_rows(v[0], &mask))))
        }),
        ("masked_max_rows", |r| {
            let (m, n) = dims(r);
            let mask = some_true(r, m);
            // distinct values per column, spaced well beyond eps
            let mut data = vec![0.0; m * n];
            for c in 0..n {
                let order = sample(r, m, m);
                for (rank, row) in order.iter().enumerate() {
                    data[row * n + c] = rank as f64 * 0.2 + r.gen_range(0.0..0.05);
                }
            }
            Ok((vec![Tensor::new(&[m, n], data)?], op(move |t, v| t.masked_max_rows(v[0], &mask))))
        }),
        ("softmax", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -2.0, 2.0)], op(|t, v| t.softmax(v[0], None))))
        }),
        ("softmax_key_mask", |r| {
            let (m, n) = dims(r);
            let mask = some_true(r, n);
            Ok((vec![uniform(r, &[m, n], -2.0, 2.0)], op(move |t, v| t.softmax(v[0], Some(&mask)))))
        }),
        ("softmax_full_mask", |r| {
            let (m, n) = dims(r);
            let mask: Vec<bool> = (0..m).flat_map(|_| some_true(r, n)).collect();
            Ok((vec![uniform(r, &[m, n], -2.0, 2.0)], op(move |t, v| t.softmax(v[0], Some(&mask)))))
        }),
        ("layer_norm", |r| {
            let (m, n) = dims(r);
            let n = n + 1;
            Ok((
                vec![uniform(r, &[m, n], -2.0, 2.0), uniform(r, &[n], 0.5, 1.5), uniform(r, &[n], -0.5, 0.5)],
                op(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            ))
        }),
        ("concat_rows", |r| {
            let (m, n) = dims(r);
            let m2 = r.gen_range(1..4);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m2, n], -1.0, 1.0)], op(|t, v| t.concat(&[v[0], v[1]], 0))))
        }),
        ("concat_cols", |r| {
            let (m, n) = dims(r);
            let n2 = r.gen_range(1..4);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n2], -1.0, 1.0)], op(|t, v| t.concat(&[v[0], v[1]], 1))))
        }),
        ("slice", |r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            let len = [m, n][axis];
            let start = r.gen_range(0..len - 1);
            let end = r.gen_range(start + 1..=len);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| t.slice(v[0], axis, start..end))))
        }),
        ("reshape", |r| {
            let (m, n) = dims(r);
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| t.reshape(v[0], &[n, m]))))
        }),
        ("embedding_lookup", |r| {
            let (m, n) = dims(r);
            // repeated ids exercise gradient accumulation into one row
            let ids: Vec<usize> = (0..m + 2).map(|_| r.gen_range(0..m)).collect();
            Ok((vec![uniform(r, &[m, n], -1.0, 1.0)], op(move |t, v| t.embedding_lookup(v[0], &ids))))
        }),
        ("dropout", |r| {
            let (m, n) = dims(r);
            let seed = r.gen();
            Ok((
                vec![uniform(r, &[m, n], -1.0, 1.0)],
                op(move |t, v| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed))),
            ))
        }),
        ("im2col", |r| {
            let (h, w) = (r.gen_range(3..6), r.gen_range(3..6));
            let c = r.gen_range(1..4);
            let stride = r.gen_range(1..3);
            Ok((vec![uniform(r, &[h * w, c], -1.0, 1.0)], op(move |t, v| im2col(t, v[0], h, w, 3, stride, 1))))
        }),
        ("scaled_dot_attention", |r| {
            let (lq, d) = dims(r);
            let lk = r.gen_range(2..6);
            let mask = some_true(r, lk);
            Ok((
                vec![uniform(r, &[lq, d], -1.0, 1.0), uniform(r, &[lk, d], -1.0, 1.0), uniform(r, &[lk, 3], -1.0, 1.0)],
                op(move |t, v| Ok(scaled_dot_attention(t, v[0], v[1], v[2], Some(&mask))?.0)),
            ))
        }),
        ("giou", |r| {
            let target = random_box(r);
            let pred = loop {
                let p = random_box(r);
                let (a, b) = (p.corners(), target.corners());
                if (0..4).all(|i| (0..4).all(|j| (a[i] - b[j]).abs() > 1e-3)) {
                    break p;
                }
            };
            Ok((
                vec![Tensor::from_f64(&[4], &pred.to_array())?],
                op(move |t, v| giou_var(t, v[0], target)),
            ))
        }),
        ("grounding_loss", |r| {
            let target = random_box(r);
            let pred = loop {
                let p = random_box(r);
                let (a, b) = (p.corners(), target.corners());
                let d: Vec<f64> = p.to_array().iter().zip(target.to_array()).map(|(x, y)| (x - y).abs()).collect();
                if (0..4).all(|i| (0..4).all(|j| (a[i] - b[j]).abs() > 1e-3)) && d.iter().all(|x| (x - 1.0).abs() > 1e-3) {
                    break p;
                }
            };
            let cfg = LossConfig::default();
            Ok((
                vec![Tensor::from_f64(&[4], &pred.to_array())?],
                op(move |t, v| Ok(grounding_loss_var(t, v[0], target, &cfg)?.total)),
            ))
        }),
    ]
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        r.gen_range(0.2..0.8),
        r.gen_range(0.2..0.8),
        r.gen_range(0.05..0.5),
        r.gen_range(0.05..0.5),
    )
    .expect("positive extents")
}

/// Inputs, function and a per-input flag for inputs whose gradient is
/// identically zero.
type Case = (Vec<Tensor<f64>>, OpFn, Vec<bool>);

/// Key biases shift every score of a query row by the same amount, which the
/// softmax cancels, so their gradient is exactly zero. Central differences
/// there measure only round-off, which the relative metric blows up by the
/// 1e-8 floor; the invariance itself serves as the oracle instead.
fn zero_gradient(name: &str) -> bool {
    name.ends_with("key.bias")
}

/// Attention block or full encoder layer with its parameters as inputs.
fn module_case(r: &mut ChaCha8Rng, full_layer: bool) -> Result<Case> {
    let heads = r.gen_range(1..3);
    let dim = 4 * heads;
    let len = r.gen_range(2..5);
    let mut store = ParamStore::<f64>::new();
    let group = ParamGroup::Fusion;
    let layer = if full_layer {
        Some(EncoderLayerParams::new(&mut store, r, "layer", dim, heads, 2 * dim, 0.1, group)?)
    } else {
        None
    };
    let attn = if full_layer {
        None
    } else {
        Some(AttentionParams::new(&mut store, r, "attn", dim, heads, group)?)
    };
    let mask = some_true(r, len);
    let pos = sine_2d_positions::<f64>(1, len, dim, 10000.0)?;
    let seed: u64 = r.gen();
    let mut inputs = vec![uniform(r, &[len, dim], -1.0, 1.0)];
    // perturb the zero-initialised biases so every parameter gets a generic value
    inputs.extend(store.iter().map(|(_, p)| jitter(r, &p.value, 0.1)));
    let mut zero = vec![false];
    zero.extend(store.iter().map(|(_, p)| zero_gradient(&p.name)));
    let f = op(move |t, v| {
        let p = t.constant(pos.clone());
        let mut s = Session::with_bound(t, &store, &v[1..], SessionOptions::train(seed))?;
        match (&layer, &attn) {
            (Some(l), _) => Ok(encoder_layer(&mut s, v[0], l, &mask, Some(p))?.output),
            (_, Some(a)) => Ok(multi_head_self_attention(&mut s, v[0], a, &mask, Some(p))?.output),
            _ => unreachable!(),
        }
    });
    Ok((inputs, f, zero))
}

/// Deterministic weights so `sum(y ⊙ W)` gives every output entry a distinct
/// upstream gradient.
fn weights_for(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ shape.iter().product::<usize>() as u64);
    uniform(&mut rng, shape, -1.0, 1.0)
}

fn reduce(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = weights_for(tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Largest relative error of the analytic gradient against an exact zero,
/// over the coordinates accepted by `select`.
fn zero_oracle<F, S>(f: F, inputs: &[Tensor<f64>], mut select: S) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    S: FnMut(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, &var) in vars.iter().enumerate() {
        let Some(g) = grads.get(var) else { continue };
        for (j, &a) in g.data().iter().enumerate() {
            if select(i, j) {
                worst = worst.max(relative_error(a, 0.0));
                count += 1;
            }
        }
    }
    Ok((worst, count))
}

fn check_case(name: &str, opts: &SelfCheckOptions, build: impl Fn(&mut ChaCha8Rng) -> Result<Case>) -> Result<CheckResult> {
    let corrupt = opts.corrupt.as_deref() == Some(name);
    let mut result = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        tolerance: OP_TOLERANCE,
        coordinates: 0,
        seeds: opts.seeds.len(),
    };
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f, zero) = build(&mut rng)?;
        let reduced = |t: &mut Tape<f64>, v: &[Var]| {
            let y = f(t, v)?;
            if corrupt {
                t.corrupt_backward(y, 1.1);
            }
            reduce(t, y)
        };
        let report = grad_check_with(&reduced, &inputs, opts.eps, |i, _| !zero[i])?;
        let (zero_err, zero_count) = zero_oracle(&reduced, &inputs, |i, _| zero[i])?;
        result.max_rel_error = result.max_rel_error.max(report.max_rel_error).max(zero_err);
        result.coordinates += report.coordinates + zero_count;
    }
    Ok(result)
}

pub fn check_ops(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, build) in op_cases() {
        out.push(check_case(name, opts, |r| {
            let (inputs, f) = build(r)?;
            let zero = vec![false; inputs.len()];
            Ok((inputs, f, zero))
        })?);
    }
    out.push(check_case("multi_head_attention", opts, |r| module_case(r, false))?);
    out.push(check_case("encoder_layer", opts, |r| module_case(r, true))?);
    Ok(out)
}

/// Random 8×8 input whose right columns are letterbox padding, plus a short
/// expression padded to the model's text length.
fn tiny_inputs(cfg: &ModelConfig, vocab: usize, rng: &mut ChaCha8Rng) -> (ImageInput, EncodedText, BBox) {
    let n = cfg.image_size;
    let valid_w = rng.gen_range(n / 2..n);
    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut valid = Vec::with_capacity(n * n);
    for _ in 0..n {
        for x in 0..n {
            pixels.extend((0..3).map(|_| rng.gen_range(0.0f32..1.0)));
            valid.push(x < valid_w);
        }
    }
    let image = ImageInput {
        height: n,
        width: n,
        pixels,
        valid,
    };
    let words = rng.gen_range(1..=cfg.max_text_len - 2);
    let mut ids = vec![CLS];
    ids.extend((0..words).map(|_| rng.gen_range(4..vocab)));
    ids.push(SEP);
    let mut mask = vec![true; ids.len()];
    ids.resize(cfg.max_text_len, PAD);
    mask.resize(cfg.max_text_len, false);
    (image, EncodedText { ids, mask }, random_box(rng))
}

/// Composite loss of a tiny model per [REG] initialisation mode.
pub fn check_model(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let vocab = 12;
    let mut out = Vec::new();
    for &mode in &opts.reg_modes {
        let name = format!("model_loss[{mode}]");
        let corrupt = opts.corrupt.as_deref() == Some(name.as_str());
        let mut result = CheckResult {
            name,
            max_rel_error: 0.0,
            tolerance: MODEL_TOLERANCE,
            coordinates: 0,
            seeds: opts.seeds.len(),
        };
        for &seed in &opts.seeds {
            let cfg = ModelConfig {
                reg_init: mode,
                ..ModelConfig::tiny()
            };
            let model = TransVg::<f64>::new(cfg.clone(), vocab, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let (image, text, target) = tiny_inputs(&cfg, vocab, &mut rng);
            let values: Vec<Tensor<f64>> = model.params.iter().map(|(_, p)| jitter(&mut rng, &p.value, 0.05)).collect();
            let offsets: Vec<usize> = values
                .iter()
                .scan(0, |acc, t| {
                    let o = *acc;
                    *acc += t.numel();
                    Some(o)
                })
                .collect();
            let total: usize = values.iter().map(Tensor::numel).sum();
            let picked: std::collections::HashSet<usize> =
                sample(&mut rng, total, opts.model_coordinates.min(total)).into_iter().collect();
            let zero: Vec<bool> = model.params.iter().map(|(_, p)| zero_gradient(&p.name)).collect();
            let loss_cfg = LossConfig::default();
            let f = |t: &mut Tape<f64>, v: &[Var]| {
                let mut s = Session::with_bound(t, &model.params, v, SessionOptions::train(seed))?;
                let (pred, loss) = model.loss(&mut s, &image, &text, target, &loss_cfg)?;
                if corrupt {
                    s.tape.corrupt_backward(pred.bbox, 1.1);
                }
                Ok(loss.total)
            };
            let report = grad_check_with(&f, &values, opts.model_eps, |i, j| !zero[i] && picked.contains(&(offsets[i] + j)))?;
            let (zero_err, zero_count) = zero_oracle(&f, &values, |i, _| zero[i])?;
            result.max_rel_error = result.max_rel_error.max(report.max_rel_error).max(zero_err);
            result.coordinates += report.coordinates + zero_count;
        }
        out.push(result);
    }
    Ok(out)
}

pub fn run(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let start = Instant::now();
    let mut results = check_ops(opts)?;
    results.extend(check_model(opts)?);
    Ok(SelfCheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
