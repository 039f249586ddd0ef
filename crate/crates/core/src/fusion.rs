//! Visual-linguistic fusion: modality projections, the `[REG]` token, the
//! joint transformer and the box prediction head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{ParamId, Session};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::transformer::{encoder_layer, EncoderStack, Linear};

/// Initial state of the `[REG]` token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegInitMode {
    Learnable,
    AvgPoolVisual,
    MaxPoolVisual,
    AvgPoolLinguistic,
    MaxPoolLinguistic,
    /// No extra token: the `[CLS]` position is the regression source.
    ShareCls,
}

impl RegInitMode {
    pub const ALL: [RegInitMode; 6] = [
        RegInitMode::Learnable,
        RegInitMode::AvgPoolVisual,
        RegInitMode::MaxPoolVisual,
        RegInitMode::AvgPoolLinguistic,
        RegInitMode::MaxPoolLinguistic,
        RegInitMode::ShareCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegInitMode::Learnable => "learnable",
            RegInitMode::AvgPoolVisual => "avg-pool-visual",
            RegInitMode::MaxPoolVisual => "max-pool-visual",
            RegInitMode::AvgPoolLinguistic => "avg-pool-linguistic",
            RegInitMode::MaxPoolLinguistic => "max-pool-linguistic",
            RegInitMode::ShareCls => "share-cls",
        }
    }

    /// Whether the joint sequence carries a dedicated `[REG]` slot.
    pub fn appends_token(self) -> bool {
        self != RegInitMode::ShareCls
    }
}

impl fmt::Display for RegInitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegInitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reg_init mode `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub visual_proj: Linear,
    pub text_proj: Linear,
    /// `[1 × C_p]`, present in learnable mode only.
    pub reg_token: Option<ParamId>,
    /// One `[len × C_p]` table shared by all layers, or one per layer.
    pub positions: Vec<ParamId>,
    pub encoder: EncoderStack,
    /// Two ReLU hidden layers and a linear output to 4.
    pub head: [Linear; 3],
    pub reg_init: RegInitMode,
    pub dim: usize,
}

/// `[p_v; p_l; reg]` rows with the joint key mask.
pub struct JointSequence {
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub reg_index: usize,
    pub visual_len: usize,
}

pub fn project_modalities<T: Scalar>(
    s: &mut Session<'_, T>,
    visual: Var,
    text: Var,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    for (v, lin, what) in [(visual, &params.visual_proj, "visual"), (text, &params.text_proj, "linguistic")] {
        let cols = *s.tape.shape(v).last().expect("rank >= 1");
        if cols != lin.in_dim {
            return Err(Error::Contract(format!(
                "{what} tokens have {cols} channels, projection expects {}",
                lin.in_dim
            )));
        }
    }
    let pv = params.visual_proj.forward(s, visual)?;
    let pl = params.text_proj.forward(s, text)?;
    Ok((pv, pl))
}

pub fn assemble_joint<T: Scalar>(
    s: &mut Session<'_, T>,
    pv: Var,
    pl: Var,
    params: &FusionParams,
    visual_mask: &[bool],
    text_mask: &[bool],
) -> Result<JointSequence> {
    let (nv, nl) = (s.tape.shape(pv)[0], s.tape.shape(pl)[0]);
    if visual_mask.len() != nv || text_mask.len() != nl {
        return Err(Error::Contract(format!(
            "masks ({}, {}) do not align with token counts ({nv}, {nl})",
            visual_mask.len(),
            text_mask.len()
        )));
    }
    let mut mask: Vec<bool> = visual_mask.iter().chain(text_mask).copied().collect();
    let reg = match params.reg_init {
        RegInitMode::Learnable => {
            let id = params
                .reg_token
                .ok_or_else(|| Error::Contract("learnable REG mode without a REG parameter".into()))?;
            Some(s.param(id))
        }
        RegInitMode::AvgPoolVisual => Some(s.tape.masked_mean_rows(pv, visual_mask)?),
        RegInitMode::MaxPoolVisual => Some(s.tape.masked_max_rows(pv, visual_mask)?),
        RegInitMode::AvgPoolLinguistic => Some(s.tape.masked_mean_rows(pl, text_mask)?),
        RegInitMode::MaxPoolLinguistic => Some(s.tape.masked_max_rows(pl, text_mask)?),
        RegInitMode::ShareCls => None,
    };
    let (embeddings, reg_index) = match reg {
        Some(r) => {
            mask.push(true);
            (s.tape.concat(&[pv, pl, r], 0)?, nv + nl)
        }
        None => (s.tape.concat(&[pv, pl], 0)?, nv),
    };
    Ok(JointSequence {
        embeddings,
        mask,
        reg_index,
        visual_len: nv,
    })
}

pub struct VlOutput {
    pub states: Var,
    /// `[1 × C_p]` output row feeding the prediction head.
    pub reg_state: Var,
    /// Per layer: head-averaged attention of the regression query over the
    /// visual keys, row-major over the visual grid.
    pub reg_attention: Vec<Vec<f64>>,
    /// Per layer: sum of the regression query's full attention row (≈ 1).
    pub reg_row_sums: Vec<f64>,
}

pub fn vl_forward<T: Scalar>(s: &mut Session<'_, T>, joint: &JointSequence, params: &FusionParams) -> Result<VlOutput> {
    let len = joint.mask.len();
    if params.encoder.layers.is_empty() {
        // no fusion layers: regress from the pooled modality tokens
        let mut pool_mask = joint.mask.clone();
        if params.reg_init.appends_token() {
            pool_mask[joint.reg_index] = false;
        }
        let reg_state = s.tape.masked_mean_rows(joint.embeddings, &pool_mask)?;
        return Ok(VlOutput {
            states: joint.embeddings,
            reg_state,
            reg_attention: Vec::new(),
            reg_row_sums: Vec::new(),
        });
    }
    let mut tables = Vec::with_capacity(params.positions.len());
    for &id in &params.positions {
        let t = s.param(id);
        if s.tape.shape(t)[0] != len {
            return Err(Error::Contract(format!(
                "joint length {len} does not match positional table of {}",
                s.tape.shape(t)[0]
            )));
        }
        tables.push(t);
    }
    let mut h = joint.embeddings;
    let mut reg_attention = Vec::new();
    let mut reg_row_sums = Vec::new();
    for (i, layer) in params.encoder.layers.iter().enumerate() {
        let pos = tables[i.min(tables.len() - 1)];
        let out = encoder_layer(s, h, layer, &joint.mask, Some(pos))?;
        h = out.output;
        let heads = out.attention.len() as f64;
        let mut avg = vec![0.0; joint.visual_len];
        let mut row_sum = 0.0;
        for &w in &out.attention {
            let row = s.tape.value(w).row(joint.reg_index);
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v.as_f64() / heads;
            }
            row_sum += row.iter().map(|v| v.as_f64()).sum::<f64>() / heads;
        }
        reg_attention.push(avg);
        reg_row_sums.push(row_sum);
    }
    let reg_state = s.tape.slice(h, 0, joint.reg_index..joint.reg_index + 1)?;
    Ok(VlOutput {
        states: h,
        reg_state,
        reg_attention,
        reg_row_sums,
    })
}

/// MLP head followed by a logistic squash; returns a `[4]` var holding
/// normalized `(cx, cy, w, h)`.
pub fn predict_box<T: Scalar>(s: &mut Session<'_, T>, reg_state: Var, head: &[Linear; 3]) -> Result<Var> {
    let h = head[0].forward(s, reg_state)?;
    let h = s.tape.relu(h);
    let h = head[1].forward(s, h)?;
    let h = s.tape.relu(h);
    let raw = head[2].forward(s, h)?;
    let squashed = s.tape.sigmoid(raw);
    s.tape.reshape(squashed, &[4])
}
