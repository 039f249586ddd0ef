//! Sample generation, train/val splits and the on-disk format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::expression::{generate_expression, TemplateKind};
use crate::scene::{generate_scene, render, SceneConfig, SceneSpec};
use transvg_core::boxes::BBox;
use transvg_core::image::RgbImage;
use transvg_core::linguistic::{tokenize, Vocabulary};
use transvg_core::train::Example;
use transvg_core::visual::ImageInput;

pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub image: RgbImage,
    pub expression: String,
    pub bbox: BBox,
    pub referent: usize,
    pub template: TemplateKind,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    expression: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    template: String,
    referent: usize,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub num_shapes_min: usize,
    pub num_shapes_max: usize,
    pub relational_prob: f64,
    pub count: usize,
    /// Fraction of `count` held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_shapes_min: 2,
            num_shapes_max: 5,
            relational_prob: 0.5,
            count: 2000,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value.parse().map_err(|_| SynthError::Parse {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

impl GeneratorConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| SynthError::Parse {
                line,
                message: format!("expected key=value, found `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "image_size" => cfg.image_size = parse_value(key, value, line)?,
                "num_shapes_min" => cfg.num_shapes_min = parse_value(key, value, line)?,
                "num_shapes_max" => cfg.num_shapes_max = parse_value(key, value, line)?,
                "relational_prob" => cfg.relational_prob = parse_value(key, value, line)?,
                "count" => cfg.count = parse_value(key, value, line)?,
                "val_fraction" => cfg.val_fraction = parse_value(key, value, line)?,
                "seed" => cfg.seed = parse_value(key, value, line)?,
                _ => {
                    return Err(SynthError::Parse {
                        line,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "image_size = {}\nnum_shapes_min = {}\nnum_shapes_max = {}\nrelational_prob = {}\ncount = {}\nval_fraction = {}\nseed = {}\n",
            self.image_size,
            self.num_shapes_min,
            self.num_shapes_max,
            self.relational_prob,
            self.count,
            self.val_fraction,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relational_prob) {
            return Err(SynthError::Config(format!("relational_prob {} not in [0, 1]", self.relational_prob)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SynthError::Config(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if self.image_size < 32 {
            return Err(SynthError::Config(format!("image_size {} < 32", self.image_size)));
        }
        if self.num_shapes_min == 0 || self.num_shapes_min > self.num_shapes_max {
            return Err(SynthError::Config("need 1 <= num_shapes_min <= num_shapes_max".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            min_shapes: self.num_shapes_min,
            max_shapes: self.num_shapes_max,
        }
    }

    pub fn val_count(&self) -> usize {
        (self.count as f64 * self.val_fraction).round() as usize
    }
}

/// Seed of the `index`-th sample. Injective in `index` for a fixed base.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SAMPLE_ATTEMPTS: usize = 100;

/// Generates one sample deterministically from `seed`; scenes that admit no
/// expression of the drawn template are resampled.
pub fn generate_sample(cfg: &GeneratorConfig, id: &str, seed: u64) -> Result<(GroundingSample, SceneSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_cfg = cfg.scene_config();
    let mut last = None;
    for _ in 0..SAMPLE_ATTEMPTS {
        let scene = generate_scene(&scene_cfg, &mut rng)?;
        let expr = match generate_expression(&scene, cfg.relational_prob, &mut rng) {
            Ok(e) => e,
            Err(e @ SynthError::Generation(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (image, boxes) = render(&scene);
        let (x1, y1, x2, y2) = boxes[expr.referent];
        let n = cfg.image_size as f64;
        let bbox = BBox::from_pixel_xywh(x1 as f64, y1 as f64, (x2 - x1) as f64, (y2 - y1) as f64, n, n)?;
        let sample = GroundingSample {
            id: id.to_string(),
            image,
            expression: expr.text,
            bbox,
            referent: expr.referent,
            template: expr.query.template(),
            seed,
        };
        return Ok((sample, scene));
    }
    Err(last.unwrap_or_else(|| SynthError::Generation("no sample generated".into())))
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<GroundingSample>,
    pub val: Vec<GroundingSample>,
}

/// Sample `i` of `count` uses `sample_seed(cfg.seed, i)`; the first
/// `count - val_count` go to train, the rest to val, so the seed sets of the
/// two splits are disjoint.
pub fn generate_splits(cfg: &GeneratorConfig) -> Result<Splits> {
    cfg.validate()?;
    let n_val = cfg.val_count();
    let n_train = cfg.count - n_val;
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for i in 0..cfg.count {
        let id = format!("{i:06}");
        let (sample, _) = generate_sample(cfg, &id, sample_seed(cfg.seed, i as u64))?;
        if i < n_train {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    Ok(Splits { train, val })
}

/// Writes `samples.jsonl` and `imgs/<id>.ppm` under `dir`.
pub fn write_dataset(samples: &[GroundingSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("imgs"))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
    for s in samples {
        let image = format!("imgs/{}.ppm", s.id);
        s.image.write(dir.join(&image))?;
        let record = Record {
            id: s.id.clone(),
            image,
            expression: s.expression.clone(),
            bbox: s.bbox.to_array(),
            template: s.template.name().to_string(),
            referent: s.referent,
            seed: s.seed,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| SynthError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    let dir = dir.as_ref();
    let file = fs::File::open(dir.join(SAMPLES_FILE))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SynthError::Parse { line: line_no, message };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let template = record.template.parse().map_err(parse_err)?;
        let bbox = BBox::from_array(record.bbox).map_err(|e| parse_err(e.to_string()))?;
        let path = dir.join(&record.image);
        let image = RgbImage::read(&path).map_err(|source| SynthError::Image {
            id: record.id.clone(),
            path: path.clone(),
            source,
        })?;
        samples.push(GroundingSample {
            id: record.id,
            image,
            expression: record.expression,
            bbox,
            referent: record.referent,
            template,
            seed: record.seed,
        });
    }
    Ok(samples)
}

/// Converts samples into model inputs, letterboxing images whose side differs
/// from `image_size`.
pub fn to_examples(
    samples: &[GroundingSample],
    vocab: &Vocabulary,
    image_size: usize,
    max_text_len: usize,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let image = if s.image.width == image_size && s.image.height == image_size {
                ImageInput::from_rgb(&s.image)
            } else {
                ImageInput::letterbox(&s.image, image_size)?
            };
            Ok(Example {
                image,
                text: tokenize(&s.expression, vocab, max_text_len)?,
                target: s.bbox,
                relational: s.template == TemplateKind::Relational,
            })
        })
        .collect()
}
