//! Post-norm transformer encoder layers with key-padding masks, plus the
//! sine-2d and learnable-1d positional encodings.
//!
//! Token sequences are laid out `[len × d]`: one row per token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.matmul(x, w)?;
        s.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Query/key/value/output projections of one multi-head attention block.
/// Head `h` uses columns `h·d_k .. (h+1)·d_k` of the fused projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, group),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, group),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, group),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, group),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub dropout: f64,
}

impl EncoderLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads, group)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn.0"), dim, ffn_dim, group),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn.1"), ffn_dim, dim, group),
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim, group),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim, group),
            dropout,
        })
    }

    /// Closed-form scalar count of one layer.
    pub fn scalar_count(dim: usize, ffn_dim: usize) -> usize {
        4 * (dim * dim + dim) + (dim * ffn_dim + ffn_dim) + (ffn_dim * dim + dim) + 4 * dim
    }
}

/// A stack of encoder layers sharing dims.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        group: ParamGroup,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayerParams::new(store, rng, &format!("{name}.{i}"), dim, heads, ffn_dim, dropout, group)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Runs every layer, adding `pos` to queries and keys at each one.
    /// Returns the final states and each layer's per-head attention weights.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        mask: &[bool],
        pos: Option<Var>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut h = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = encoder_layer(s, h, layer, mask, pos)?;
            h = out.output;
            weights.push(out.attention);
        }
        Ok((h, weights))
    }
}

/// `softmax(q·kᵀ/√d_k)·v` with keys where `mask` is false excluded.
/// Returns the attended values and the `[len_q × len_k]` weights.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dk = *tape.shape(k).last().expect("rank >= 1");
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax weights, one `[len × len]` matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head self-attention over `x[len × d]`. `pos` is added to the query
/// and key inputs only; the value path sees `x` unchanged.
pub fn multi_head_self_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    params: &AttentionParams,
    mask: &[bool],
    pos: Option<Var>,
) -> Result<AttentionOutput> {
    let (len, dim) = match s.tape.shape(x) {
        [l, d] => (*l, *d),
        other => {
            return Err(Error::Contract(format!("attention input must be [len × d], got {other:?}")))
        }
    };
    if dim != params.dim {
        return Err(Error::Contract(format!(
            "attention input dim {dim} does not match parameters ({})",
            params.dim
        )));
    }
    if mask.len() != len {
        return Err(Error::Contract(format!(
            "mask length {} does not match sequence length {len}",
            mask.len()
        )));
    }
    let qk_in = match pos {
        Some(p) => {
            if s.tape.shape(p) != s.tape.shape(x) {
                return Err(Error::Contract(format!(
                    "positional encoding shape {:?} does not match input {:?}",
                    s.tape.shape(p),
                    s.tape.shape(x)
                )));
            }
            s.tape.add(x, p)?
        }
        None => x,
    };
    let q = params.query.forward(s, qk_in)?;
    let k = params.key.forward(s, qk_in)?;
    let v = params.value.forward(s, x)?;
    let dk = params.head_dim();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = h * dk..(h + 1) * dk;
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                s.tape.slice(q, 1, cols.clone())?,
                s.tape.slice(k, 1, cols.clone())?,
                s.tape.slice(v, 1, cols)?,
            )
        };
        let (out, w) = scaled_dot_attention(s.tape, qh, kh, vh, Some(mask))?;
        heads.push(out);
        weights.push(w);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        s.tape.concat(&heads, 1)?
    };
    let output = params.output.forward(s, merged)?;
    Ok(AttentionOutput { output, weights })
}

pub struct LayerOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// `x' = LN(x + MSA(x))`, `out = LN(x' + FFN(x'))`.
pub fn encoder_layer<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    params: &EncoderLayerParams,
    mask: &[bool],
    pos: Option<Var>,
) -> Result<LayerOutput> {
    let train = s.is_train();
    let attn = multi_head_self_attention(s, x, &params.attention, mask, pos)?;
    let a = s.tape.dropout(attn.output, params.dropout, train, &mut s.rng)?;
    let res = s.tape.add(x, a)?;
    let x1 = params.norm1.forward(s, res)?;

    let f = params.ffn_in.forward(s, x1)?;
    let f = s.tape.relu(f);
    let f = s.tape.dropout(f, params.dropout, train, &mut s.rng)?;
    let f = params.ffn_out.forward(s, f)?;
    let res = s.tape.add(x1, f)?;
    let output = params.norm2.forward(s, res)?;
    Ok(LayerOutput {
        output,
        attention: attn.weights,
    })
}

/// Positional signal for a token sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PositionalKind {
    Sine2d { temperature: f64 },
    Learnable1d,
    None,
}

/// Fixed sine/cosine encodings of a `height × width` grid as
/// `[(height·width) × d]`, row-major over the grid.
///
/// Channels `0..d/2` encode the row index and `d/2..d` the column index;
/// within each half, channel `2i` is `sin(p·ω_i)` and `2i+1` is
/// `cos(p·ω_i)` with `ω_i = temperature^(−4i/d)`.
pub fn sine_2d_positions<T: Scalar>(height: usize, width: usize, d: usize, temperature: f64) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "sine-2d positions need a channel count divisible by 4, got {d}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("sine-2d positions need a non-empty grid".into()));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| temperature.powf(-(2.0 * i as f64) / half as f64))
        .collect();
    let mut out = Vec::with_capacity(height * width * d);
    for r in 0..height {
        for c in 0..width {
            for p in [r as f64, c as f64] {
                for &w in &freqs {
                    out.push(T::of((p * w).sin()));
                    out.push(T::of((p * w).cos()));
                }
            }
        }
    }
    Tensor::new(&[height * width, d], out)
}
