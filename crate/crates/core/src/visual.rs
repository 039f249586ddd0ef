//! Visual branch: a stride-2 convolutional stem, a 1×1 channel projection,
//! flattening to tokens and a transformer encoder with sine-2d positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::params::{he_uniform, ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{sine_2d_positions, EncoderStack, Linear};

/// An RGB image in `[0, 1]`, stored pixel-interleaved (`[H·W × 3]`), with a
/// validity flag per pixel. Padding added by [`ImageInput::letterbox`] is
/// marked invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub valid: Vec<bool>,
}

impl ImageInput {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            pixels: img.data.iter().map(|&b| b as f32 / 255.0).collect(),
            valid: vec![true; img.width * img.height],
        }
    }

    /// Resizes (bilinear) so the longer edge equals `target`, keeping the
    /// aspect ratio, then pads the bottom/right to `target × target` with the
    /// mean colour. Padded pixels are recorded in `valid`.
    pub fn letterbox(img: &RgbImage, target: usize) -> Result<Self> {
        if img.width == 0 || img.height == 0 || target == 0 {
            return Err(Error::Contract("letterbox of an empty image".into()));
        }
        let scale = target as f64 / img.width.max(img.height) as f64;
        let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, target);
        let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, target);
        let src = Self::from_rgb(img);
        let mut mean = [0f32; 3];
        for px in src.pixels.chunks(3) {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        let n = (img.width * img.height) as f32;
        mean.iter_mut().for_each(|m| *m /= n);

        let mut pixels = Vec::with_capacity(target * target * 3);
        let mut valid = Vec::with_capacity(target * target);
        for y in 0..target {
            for x in 0..target {
                if x >= new_w || y >= new_h {
                    pixels.extend_from_slice(&mean);
                    valid.push(false);
                    continue;
                }
                let fx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (img.width - 1) as f64);
                let fy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (img.height - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
                let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
                let at = |xx: usize, yy: usize, c: usize| src.pixels[3 * (yy * img.width + xx) + c];
                for c in 0..3 {
                    let top = at(x0, y0, c) * (1.0 - ax) + at(x1, y0, c) * ax;
                    let bottom = at(x0, y1, c) * (1.0 - ax) + at(x1, y1, c) * ax;
                    pixels.push(top * (1.0 - ay) + bottom * ay);
                }
                valid.push(true);
            }
        }
        Ok(Self {
            height: target,
            width: target,
            pixels,
            valid,
        })
    }
}

/// A `k×k` window gather turning `[H·W × C]` into
/// `[H_out·W_out × k·k·C]`, zero padded.
struct Im2Col {
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Im2Col {
    /// Source row for each (output position, tap), `None` in the padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let k = self.kernel;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let out_row = oy * self.out_w + ox;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width;
                        let src = inside.then(|| iy as usize * self.width + ix as usize);
                        f(out_row, ky * k + kx, src);
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels;
        let cols = self.kernel * self.kernel * c;
        let mut out = vec![T::zero(); self.out_h * self.out_w * cols];
        self.for_each_tap(|row, tap, src| {
            if let Some(src) = src {
                let dst = row * cols + tap * c;
                out[dst..dst + c].copy_from_slice(x.row(src));
            }
        });
        Tensor::new(&[self.out_h * self.out_w, cols], out).expect("im2col shape")
    }
}

impl<T: Scalar> Backward<T> for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.channels;
        let cols = self.kernel * self.kernel * c;
        let mut dx = Tensor::zeros(x[0].shape());
        let gd = g.data();
        let dd = dx.data_mut();
        self.for_each_tap(|row, tap, src| {
            if let Some(src) = src {
                let from = row * cols + tap * c;
                for (d, &v) in dd[src * c..(src + 1) * c].iter_mut().zip(&gd[from..from + c]) {
                    *d += v;
                }
            }
        });
        Ok(vec![Some(dx)])
    }
}

/// Records a patch gather of `x[H·W × C]` on the tape.
pub fn im2col<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let channels = match shape.as_slice() {
        [n, c] if *n == height * width => *c,
        _ => {
            return Err(Error::Dimension {
                op: "im2col",
                lhs: shape,
                rhs: vec![height * width, 0],
            })
        }
    };
    if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
        return Err(Error::Config("convolution window larger than input".into()));
    }
    let op = Im2Col {
        height,
        width,
        channels,
        kernel,
        stride,
        pad,
        out_h: (height + 2 * pad - kernel) / stride + 1,
        out_w: (width + 2 * pad - kernel) / stride + 1,
    };
    let out = op.forward(tape.value(x));
    Ok(tape.record(out, &[x], op))
}

/// 3×3, stride-2, pad-1 convolution followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvStemParams {
    pub layers: Vec<ConvLayer>,
    /// 1×1 projection to the visual model dim.
    pub projection: Linear,
    pub coord_channels: bool,
}

impl ConvStemParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        channels: &[usize],
        out_dim: usize,
        coord_channels: bool,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("conv stem needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        let mut cin = if coord_channels { 5 } else { 3 };
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = 9 * cin;
            let weight = store.add(
                format!("visual.stem.{i}.weight"),
                he_uniform(rng, &[fan_in, cout], fan_in),
                ParamGroup::Branch,
            );
            let bias = store.add(format!("visual.stem.{i}.bias"), Tensor::zeros(&[cout]), ParamGroup::Branch);
            layers.push(ConvLayer {
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
            });
            cin = cout;
        }
        let projection = Linear::new(store, rng, "visual.proj", cin, out_dim, ParamGroup::Branch);
        Ok(Self {
            layers,
            projection,
            coord_channels,
        })
    }

    pub fn stride(&self) -> usize {
        1 << self.layers.len()
    }
}

/// Output of the stem: `[H·W × C_v]` features and the token-level mask.
pub struct FeatureMap {
    pub features: Var,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// A token is valid when any pixel of its `stride × stride` block is.
pub fn downsample_mask(valid: &[bool], height: usize, width: usize, stride: usize) -> Vec<bool> {
    let (h, w) = (height / stride, width / stride);
    let mut out = vec![false; h * w];
    for y in 0..h * stride {
        for x in 0..w * stride {
            if valid[y * width + x] {
                out[(y / stride) * w + x / stride] = true;
            }
        }
    }
    out
}

pub fn conv_stem<T: Scalar>(s: &mut Session<'_, T>, image: &ImageInput, params: &ConvStemParams) -> Result<FeatureMap> {
    let stride = params.stride();
    if image.height % stride != 0 || image.width % stride != 0 {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible by the stem stride {stride}",
            image.width, image.height
        )));
    }
    // padded pixels are zeroed so their content cannot reach any token
    let channels = if params.coord_channels { 5 } else { 3 };
    let mut data: Vec<T> = Vec::with_capacity(image.height * image.width * channels);
    for (i, (px, &ok)) in image.pixels.chunks(3).zip(&image.valid).enumerate() {
        if !ok {
            data.extend((0..channels).map(|_| T::zero()));
            continue;
        }
        data.extend(px.iter().map(|&v| T::of(v as f64 - 0.5)));
        if params.coord_channels {
            let (y, x) = (i / image.width, i % image.width);
            data.push(T::of((x as f64 + 0.5) / image.width as f64 - 0.5));
            data.push(T::of((y as f64 + 0.5) / image.height as f64 - 0.5));
        }
    }
    let mut x = s.tape.constant(Tensor::new(&[image.height * image.width, channels], data)?);
    let (mut h, mut w) = (image.height, image.width);
    for layer in &params.layers {
        let cols = im2col(s.tape, x, h, w, 3, 2, 1)?;
        let (wt, b) = (s.param(layer.weight), s.param(layer.bias));
        let y = s.tape.matmul(cols, wt)?;
        let y = s.tape.add_bias(y, b)?;
        x = s.tape.relu(y);
        h /= 2;
        w /= 2;
    }
    let features = params.projection.forward(s, x)?;
    Ok(FeatureMap {
        features,
        mask: downsample_mask(&image.valid, image.height, image.width, stride),
        height: h,
        width: w,
    })
}

/// Visual tokens after the branch transformer.
pub struct VisualTokens {
    /// `[N_v × C_v]`
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct VisualBranch {
    pub stem: ConvStemParams,
    /// `None` disables the visual transformer.
    pub encoder: Option<EncoderStack>,
    pub dim: usize,
    pub temperature: f64,
}

impl VisualBranch {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: &ImageInput) -> Result<VisualTokens> {
        let map = conv_stem(s, image, &self.stem)?;
        if !map.mask.iter().any(|&m| m) {
            return Err(Error::InvalidMask("image has no valid pixels".into()));
        }
        let embeddings = match &self.encoder {
            Some(stack) => {
                let pos = sine_2d_positions::<T>(map.height, map.width, self.dim, self.temperature)?;
                let pos = s.tape.constant(pos);
                stack.forward(s, map.features, &map.mask, Some(pos))?.0
            }
            None => map.features,
        };
        Ok(VisualTokens {
            embeddings,
            mask: map.mask,
            height: map.height,
            width: map.width,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_matches_direct_convolution() {
        let (h, w, c) = (4, 6, 2);
        let data: Vec<f64> = (0..h * w * c).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..9 * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[h * w, c], data.clone()).unwrap());
        let cols = im2col(&mut tape, x, h, w, 3, 2, 1).unwrap();
        let k = tape.constant(Tensor::new(&[9 * c, 1], kernel.clone()).unwrap());
        let y = tape.matmul(cols, k).unwrap();
        let got = tape.value(y).data().to_vec();
        assert_eq!(got.len(), 2 * 3);
        for oy in 0..2 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            acc += data[(iy as usize * w + ix as usize) * c + ch] * kernel[(ky * 3 + kx) * c + ch];
                        }
                    }
                }
                assert!((got[oy * 3 + ox] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_downsampling_keeps_partially_valid_blocks() {
        let mut valid = vec![true; 8 * 8];
        for y in 0..8 {
            for x in 5..8 {
                valid[y * 8 + x] = false;
            }
        }
        let m = downsample_mask(&valid, 8, 8, 4);
        assert_eq!(m, vec![true, true, true, true]);
        let m = downsample_mask(&valid, 8, 8, 2);
        assert_eq!(&m[..4], &[true, true, true, false]);
    }

    #[test]
    fn letterbox_pads_short_edge() {
        let img = RgbImage::new(40, 20, [200, 100, 50]);
        let inp = ImageInput::letterbox(&img, 16).unwrap();
        assert_eq!((inp.width, inp.height), (16, 16));
        assert_eq!(inp.valid.iter().filter(|&&v| v).count(), 16 * 8);
        assert!(inp.valid[7 * 16] && !inp.valid[8 * 16]);
        assert!((inp.pixels[0] - 200.0 / 255.0).abs() < 1e-6);
    }
}
