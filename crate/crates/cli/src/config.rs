//! Flat `key = value` run configuration covering the model, loss, optimizer,
//! schedule, data generation and dataset paths.

use std::path::PathBuf;

use transvg_core::{LossConfig, ModelConfig, RegInitMode, TrainConfig};
use transvg_synth::GeneratorConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    /// Directory holding `train/` and `val/` splits, as written by `gen-data`.
    pub dataset: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            dataset: None,
            seed: 0,
        }
    }
}

/// Every accepted key with its one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialisation, shuffling, dropout and data generation"),
    ("dataset", "directory with train/ and val/ splits (empty: none)"),
    ("image_size", "square input side in pixels, shared by model and generator"),
    ("stem_channels", "comma-separated output channels of the stride-2 conv stem layers"),
    ("coord_channels", "feed pixel coordinates to the stem as two extra channels"),
    ("visual_dim", "C_v, visual token width"),
    ("visual_layers", "visual transformer depth"),
    ("visual_heads", "visual transformer heads"),
    ("visual_ffn", "visual transformer feed-forward width"),
    ("visual_transformer", "on/off: the visual branch transformer"),
    ("text_dim", "C_l, linguistic token width"),
    ("text_layers", "linguistic transformer depth"),
    ("text_heads", "linguistic transformer heads"),
    ("text_ffn", "linguistic transformer feed-forward width"),
    ("linguistic_transformer", "on/off: the linguistic branch transformer"),
    ("max_text_len", "N_l, token slots including [CLS] and [SEP]"),
    ("fusion_dim", "C_p, joint embedding width"),
    ("vl_layers", "V-L transformer depth (0: regress from pooled tokens)"),
    ("vl_heads", "V-L transformer heads"),
    ("fusion_ffn", "V-L transformer feed-forward width"),
    ("per_layer_positions", "separate learnable joint positions per V-L layer"),
    ("sine_temperature", "temperature of the 2-D sine positions"),
    ("dropout", "dropout rate in every encoder layer"),
    ("reg_init", "learnable | avg-pool-visual | max-pool-visual | avg-pool-linguistic | max-pool-linguistic | share-cls"),
    ("loss_lambda", "weight of the 1 - GIoU term"),
    ("loss_beta", "smooth-L1 transition point"),
    ("fusion_lr", "base learning rate of the V-L module and head"),
    ("branch_lr", "base learning rate of the visual and linguistic branches"),
    ("drop_epoch", "0-based epoch from which both rates are divided by drop_factor"),
    ("drop_factor", "learning-rate drop factor"),
    ("epochs", "total training epochs"),
    ("batch_size", "samples per optimizer step"),
    ("weight_decay", "decoupled AdamW weight decay"),
    ("grad_clip", "global gradient-norm clip (none: off)"),
    ("num_shapes_min", "fewest shapes per generated scene"),
    ("num_shapes_max", "most shapes per generated scene"),
    ("relational_prob", "probability of a relational expression"),
    ("count", "generated samples, train and val together"),
    ("val_fraction", "fraction of generated samples held out for validation"),
];

fn parse<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("line {line}: invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool, CliError> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("line {line}: `{key}` expects on/off, found `{value}`"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line}: expected key = value, found `{body}`")))?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg.with_seed(None))
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.generator;
        match key {
            "seed" => self.seed = parse(key, value, line)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "image_size" => {
                m.image_size = parse(key, value, line)?;
                g.image_size = m.image_size;
            }
            "stem_channels" => {
                m.stem_channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim(), line))
                    .collect::<Result<_, _>>()?
            }
            "coord_channels" => m.coord_channels = parse_bool(key, value, line)?,
            "visual_dim" => m.visual_dim = parse(key, value, line)?,
            "visual_layers" => m.visual_layers = parse(key, value, line)?,
            "visual_heads" => m.visual_heads = parse(key, value, line)?,
            "visual_ffn" => m.visual_ffn = parse(key, value, line)?,
            "visual_transformer" => m.visual_transformer = parse_bool(key, value, line)?,
            "text_dim" => m.text_dim = parse(key, value, line)?,
            "text_layers" => m.text_layers = parse(key, value, line)?,
            "text_heads" => m.text_heads = parse(key, value, line)?,
            "text_ffn" => m.text_ffn = parse(key, value, line)?,
            "linguistic_transformer" => m.linguistic_transformer = parse_bool(key, value, line)?,
            "max_text_len" => m.max_text_len = parse(key, value, line)?,
            "fusion_dim" => m.fusion_dim = parse(key, value, line)?,
            "vl_layers" => m.vl_layers = parse(key, value, line)?,
            "vl_heads" => m.vl_heads = parse(key, value, line)?,
            "fusion_ffn" => m.fusion_ffn = parse(key, value, line)?,
            "per_layer_positions" => m.per_layer_positions = parse_bool(key, value, line)?,
            "sine_temperature" => m.sine_temperature = parse(key, value, line)?,
            "dropout" => m.dropout = parse(key, value, line)?,
            "reg_init" => {
                m.reg_init = value
                    .parse::<RegInitMode>()
                    .map_err(|e| CliError::Config(format!("line {line}: {e}")))?
            }
            "loss_lambda" => t.loss.lambda = parse(key, value, line)?,
            "loss_beta" => t.loss.beta = parse(key, value, line)?,
            "fusion_lr" => t.schedule.fusion_lr = parse(key, value, line)?,
            "branch_lr" => t.schedule.branch_lr = parse(key, value, line)?,
            "drop_epoch" => t.schedule.drop_epoch = parse(key, value, line)?,
            "drop_factor" => t.schedule.drop_factor = parse(key, value, line)?,
            "epochs" => t.schedule.total_epochs = parse(key, value, line)?,
            "batch_size" => t.batch_size = parse(key, value, line)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, value, line)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(parse(key, value, line)?) },
            "num_shapes_min" => g.num_shapes_min = parse(key, value, line)?,
            "num_shapes_max" => g.num_shapes_max = parse(key, value, line)?,
            "relational_prob" => g.relational_prob = parse(key, value, line)?,
            "count" => g.count = parse(key, value, line)?,
            "val_fraction" => g.val_fraction = parse(key, value, line)?,
            _ => return Err(CliError::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies the seed override and propagates the seed to every consumer.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.generator.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let conf = |e: String| CliError::Config(e);
        self.model.validate().map_err(|e| conf(e.to_string()))?;
        self.train.schedule.validate().map_err(|e| conf(e.to_string()))?;
        self.train.loss.validate().map_err(|e| conf(e.to_string()))?;
        self.generator.validate().map_err(|e| conf(e.to_string()))?;
        if self.train.batch_size == 0 {
            return Err(conf("batch_size must be positive".into()));
        }
        if self.train.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(conf("grad_clip must be positive or `none`".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let g = &self.generator;
        match key {
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "image_size" => m.image_size.to_string(),
            "stem_channels" => m.stem_channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "coord_channels" => on_off(m.coord_channels).into(),
            "visual_dim" => m.visual_dim.to_string(),
            "visual_layers" => m.visual_layers.to_string(),
            "visual_heads" => m.visual_heads.to_string(),
            "visual_ffn" => m.visual_ffn.to_string(),
            "visual_transformer" => on_off(m.visual_transformer).into(),
            "text_dim" => m.text_dim.to_string(),
            "text_layers" => m.text_layers.to_string(),
            "text_heads" => m.text_heads.to_string(),
            "text_ffn" => m.text_ffn.to_string(),
            "linguistic_transformer" => on_off(m.linguistic_transformer).into(),
            "max_text_len" => m.max_text_len.to_string(),
            "fusion_dim" => m.fusion_dim.to_string(),
            "vl_layers" => m.vl_layers.to_string(),
            "vl_heads" => m.vl_heads.to_string(),
            "fusion_ffn" => m.fusion_ffn.to_string(),
            "per_layer_positions" => on_off(m.per_layer_positions).into(),
            "sine_temperature" => m.sine_temperature.to_string(),
            "dropout" => m.dropout.to_string(),
            "reg_init" => m.reg_init.to_string(),
            "loss_lambda" => t.loss.lambda.to_string(),
            "loss_beta" => t.loss.beta.to_string(),
            "fusion_lr" => format!("{:e}", t.schedule.fusion_lr),
            "branch_lr" => format!("{:e}", t.schedule.branch_lr),
            "drop_epoch" => t.schedule.drop_epoch.to_string(),
            "drop_factor" => t.schedule.drop_factor.to_string(),
            "epochs" => t.schedule.total_epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "weight_decay" => format!("{:e}", t.adamw.weight_decay),
            "grad_clip" => t.grad_clip.map(|c| c.to_string()).unwrap_or_else(|| "none".into()),
            "num_shapes_min" => g.num_shapes_min.to_string(),
            "num_shapes_max" => g.num_shapes_max.to_string(),
            "relational_prob" => g.relational_prob.to_string(),
            "count" => g.count.to_string(),
            "val_fraction" => g.val_fraction.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// Every key with a comment line describing it; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.value_of(key)));
        }
        out
    }

    pub fn loss(&self) -> LossConfig {
        self.train.loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_toggles() {
        let cfg = RunConfig::parse("visual_transformer = off\nreg_init = share-cls\nepochs = 3\ndrop_epoch = 2\n").unwrap();
        assert!(!cfg.model.visual_transformer);
        assert_eq!(cfg.model.reg_init, RegInitMode::ShareCls);
        assert_eq!(cfg.train.schedule.total_epochs, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("epochs = 3\nvisual_depth = 4\n").unwrap_err();
        assert!(err.to_string().contains("visual_depth"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
