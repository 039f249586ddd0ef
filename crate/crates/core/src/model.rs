//! The full grounding model: visual branch, linguistic branch and fusion
//! module with the box head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{grounding_loss_var, BBox, LossConfig, LossVars};
use crate::error::{Error, Result};
use crate::fusion::{assemble_joint, predict_box, project_modalities, vl_forward, FusionParams, RegInitMode};
use crate::linguistic::{EncodedText, LinguisticBranch};
use crate::params::{normal, xavier_uniform, ParamGroup, ParamStore, Session, SessionOptions};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::transformer::{EncoderStack, Linear};
use crate::visual::{ConvStemParams, ImageInput, VisualBranch};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of each stride-2 stem layer; the stem stride is
    /// `2^len`.
    pub stem_channels: Vec<usize>,
    pub visual_dim: usize,
    pub visual_layers: usize,
    pub visual_heads: usize,
    pub visual_ffn: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub max_text_len: usize,
    pub fusion_dim: usize,
    pub vl_layers: usize,
    pub vl_heads: usize,
    pub fusion_ffn: usize,
    pub dropout: f64,
    pub reg_init: RegInitMode,
    pub visual_transformer: bool,
    pub linguistic_transformer: bool,
    pub per_layer_positions: bool,
    pub sine_temperature: f64,
    /// Feed normalized pixel coordinates to the stem as two extra input
    /// channels, standing in for the absolute-position cues a deep backbone
    /// picks up from padding.
    pub coord_channels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized defaults: 64×64 input, stride 8, 32-d visual tokens.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            stem_channels: vec![16, 32, 32],
            visual_dim: 32,
            visual_layers: 2,
            visual_heads: 2,
            visual_ffn: 128,
            text_dim: 64,
            text_layers: 2,
            text_heads: 2,
            text_ffn: 256,
            max_text_len: 40,
            fusion_dim: 64,
            vl_layers: 2,
            vl_heads: 4,
            fusion_ffn: 256,
            // the single-batch overfit target is out of reach with dropout on
            dropout: 0.0,
            reg_init: RegInitMode::Learnable,
            visual_transformer: true,
            linguistic_transformer: true,
            per_layer_positions: false,
            sine_temperature: 10000.0,
            coord_channels: true,
        }
    }

    /// Dimensions of the published architecture (stride-32 backbone output
    /// of 2048 channels, 6/12/6 layers).
    pub fn paper_scale() -> Self {
        Self {
            image_size: 640,
            stem_channels: vec![64, 128, 256, 512, 2048],
            visual_dim: 256,
            visual_layers: 6,
            visual_heads: 8,
            visual_ffn: 2048,
            text_dim: 768,
            text_layers: 12,
            text_heads: 12,
            text_ffn: 3072,
            max_text_len: 40,
            fusion_dim: 256,
            vl_layers: 6,
            vl_heads: 8,
            fusion_ffn: 2048,
            dropout: 0.1,
            coord_channels: false,
            ..Self::desk()
        }
    }

    /// Smallest sensible configuration, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            stem_channels: vec![4, 4],
            visual_dim: 8,
            visual_layers: 1,
            visual_heads: 2,
            visual_ffn: 16,
            text_dim: 8,
            text_layers: 1,
            text_heads: 2,
            text_ffn: 16,
            max_text_len: 5,
            fusion_dim: 8,
            vl_layers: 2,
            vl_heads: 2,
            fusion_ffn: 16,
            dropout: 0.0,
            ..Self::desk()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// `(H, W)` of the visual token grid.
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.stride();
        (g, g)
    }

    pub fn visual_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// `N_v + N_l + 1`, or `N_v + N_l` when `[CLS]` doubles as `[REG]`.
    pub fn joint_len(&self) -> usize {
        self.visual_tokens() + self.max_text_len + usize::from(self.reg_init.appends_token())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(!self.stem_channels.is_empty(), "stem needs at least one layer".into())?;
        check(
            self.image_size > 0 && self.image_size % self.stride() == 0,
            format!("image size {} not divisible by stride {}", self.image_size, self.stride()),
        )?;
        for (what, dim, heads) in [
            ("visual", self.visual_dim, self.visual_heads),
            ("text", self.text_dim, self.text_heads),
            ("fusion", self.fusion_dim, self.vl_heads),
        ] {
            check(
                heads > 0 && dim > 0 && dim % heads == 0,
                format!("{what} dim {dim} not divisible by {heads} heads"),
            )?;
        }
        check(
            self.visual_dim % 4 == 0,
            format!("visual dim {} must be divisible by 4 for sine positions", self.visual_dim),
        )?;
        check(self.max_text_len >= 3, "max_text_len must be >= 3".into())?;
        check((0.0..1.0).contains(&self.dropout), format!("dropout {} outside [0, 1)", self.dropout))?;
        Ok(())
    }
}

/// Parameter layout of the full model.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub visual: VisualBranch,
    pub linguistic: LinguisticBranch,
    pub fusion: FusionParams,
}

#[derive(Clone, Debug)]
pub struct TransVg<T: Scalar> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

/// Differentiable model output for one sample.
pub struct Prediction {
    /// `[4]` normalized `(cx, cy, w, h)`
    pub bbox: Var,
    pub reg_attention: Vec<Vec<f64>>,
    pub reg_row_sums: Vec<f64>,
    pub grid: (usize, usize),
    pub joint_len: usize,
}

/// Plain values of an evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub bbox: BBox,
    /// Per V-L layer, `(H·W)` head-averaged attention of the regression
    /// query over the visual tokens.
    pub reg_attention: Vec<Vec<f64>>,
    pub grid: (usize, usize),
}

impl<T: Scalar> TransVg<T> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;

        let stem = ConvStemParams::new(&mut store, &mut rng, &c.stem_channels, c.visual_dim, c.coord_channels)?;
        let visual_encoder = c
            .visual_transformer
            .then(|| {
                EncoderStack::new(
                    &mut store,
                    &mut rng,
                    "visual.encoder",
                    c.visual_layers,
                    c.visual_dim,
                    c.visual_heads,
                    c.visual_ffn,
                    c.dropout,
                    ParamGroup::Branch,
                )
            })
            .transpose()?;
        let visual = VisualBranch {
            stem,
            encoder: visual_encoder,
            dim: c.visual_dim,
            temperature: c.sine_temperature,
        };

        let embedding = store.add(
            "text.embedding",
            xavier_uniform(&mut rng, &[vocab_size, c.text_dim], vocab_size, c.text_dim),
            ParamGroup::Branch,
        );
        let positions = store.add(
            "text.positions",
            xavier_uniform(&mut rng, &[c.max_text_len, c.text_dim], c.max_text_len, c.text_dim),
            ParamGroup::Branch,
        );
        let text_encoder = c
            .linguistic_transformer
            .then(|| {
                EncoderStack::new(
                    &mut store,
                    &mut rng,
                    "text.encoder",
                    c.text_layers,
                    c.text_dim,
                    c.text_heads,
                    c.text_ffn,
                    c.dropout,
                    ParamGroup::Branch,
                )
            })
            .transpose()?;
        let linguistic = LinguisticBranch {
            embedding,
            positions,
            encoder: text_encoder,
            dim: c.text_dim,
        };

        let fg = ParamGroup::Fusion;
        let visual_proj = Linear::new(&mut store, &mut rng, "fusion.visual_proj", c.visual_dim, c.fusion_dim, fg);
        let text_proj = Linear::new(&mut store, &mut rng, "fusion.text_proj", c.text_dim, c.fusion_dim, fg);
        let reg_token = (c.reg_init == RegInitMode::Learnable)
            .then(|| store.add("fusion.reg_token", normal(&mut rng, &[1, c.fusion_dim], 0.02), fg));
        let len = c.joint_len();
        let tables = match (c.vl_layers, c.per_layer_positions) {
            (0, _) => 0,
            (n, true) => n,
            (_, false) => 1,
        };
        let positions = (0..tables)
            .map(|i| {
                store.add(
                    format!("fusion.positions.{i}"),
                    xavier_uniform(&mut rng, &[len, c.fusion_dim], len, c.fusion_dim),
                    fg,
                )
            })
            .collect();
        let encoder = EncoderStack::new(
            &mut store,
            &mut rng,
            "fusion.encoder",
            c.vl_layers,
            c.fusion_dim,
            c.vl_heads,
            c.fusion_ffn,
            c.dropout,
            fg,
        )?;
        let head = [
            Linear::new(&mut store, &mut rng, "head.0", c.fusion_dim, c.fusion_dim, fg),
            Linear::new(&mut store, &mut rng, "head.1", c.fusion_dim, c.fusion_dim, fg),
            Linear::new(&mut store, &mut rng, "head.2", c.fusion_dim, 4, fg),
        ];
        let fusion = FusionParams {
            visual_proj,
            text_proj,
            reg_token,
            positions,
            encoder,
            head,
            reg_init: c.reg_init,
            dim: c.fusion_dim,
        };
        Ok(Self {
            config,
            vocab_size,
            params: store,
            arch: Architecture {
                visual,
                linguistic,
                fusion,
            },
        })
    }

    pub fn forward(&self, s: &mut Session<'_, T>, image: &ImageInput, text: &EncodedText) -> Result<Prediction> {
        let c = &self.config;
        if image.height != c.image_size || image.width != c.image_size {
            return Err(Error::Contract(format!(
                "image is {}x{}, model expects {}x{}",
                image.width, image.height, c.image_size, c.image_size
            )));
        }
        let vis = self.arch.visual.forward(s, image)?;
        let txt = self.arch.linguistic.forward(s, text)?;
        let fusion = &self.arch.fusion;
        let (pv, pl) = project_modalities(s, vis.embeddings, txt.embeddings, fusion)?;
        let joint = assemble_joint(s, pv, pl, fusion, &vis.mask, &txt.mask)?;
        let joint_len = joint.mask.len();
        let out = vl_forward(s, &joint, fusion)?;
        let bbox = predict_box(s, out.reg_state, &fusion.head)?;
        Ok(Prediction {
            bbox,
            reg_attention: out.reg_attention,
            reg_row_sums: out.reg_row_sums,
            grid: (vis.height, vis.width),
            joint_len,
        })
    }

    /// Forward pass plus the grounding loss against `target`.
    pub fn loss(
        &self,
        s: &mut Session<'_, T>,
        image: &ImageInput,
        text: &EncodedText,
        target: BBox,
        cfg: &LossConfig,
    ) -> Result<(Prediction, LossVars)> {
        let pred = self.forward(s, image, text)?;
        let loss = grounding_loss_var(s.tape, pred.bbox, target, cfg)?;
        Ok((pred, loss))
    }

    /// Evaluation-mode prediction without gradient bookkeeping.
    pub fn infer(&self, image: &ImageInput, text: &EncodedText) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.params, SessionOptions::eval());
        let pred = self.forward(&mut s, image, text)?;
        let v = s.tape.value(pred.bbox).to_f64_vec();
        Ok(Inference {
            bbox: BBox::new(v[0], v[1], v[2], v[3])?,
            reg_attention: pred.reg_attention,
            grid: pred.grid,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TransVg<U> {
        TransVg {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }
}
