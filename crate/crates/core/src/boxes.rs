//! Box geometry, the smooth-L1 + GIoU objective and accuracy@IoU.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Axis-aligned box in center form, normalized by image width/height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("non-finite box ({cx}, {cy}, {w}, {h})")));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::Contract(format!("negative box extent w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(self) -> [f64; 4] {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    /// Normalizes a pixel box given by its top-left corner and extent.
    pub fn from_pixel_xywh(x: f64, y: f64, w: f64, h: f64, image_w: f64, image_h: f64) -> Result<Self> {
        if image_w <= 0.0 || image_h <= 0.0 {
            return Err(Error::Contract("image size must be positive".into()));
        }
        Self::new((x + w / 2.0) / image_w, (y + h / 2.0) / image_h, w / image_w, h / image_h)
    }

    /// Inverse of [`BBox::from_pixel_xywh`].
    pub fn to_pixel_xywh(self, image_w: f64, image_h: f64) -> [f64; 4] {
        let [x1, y1, _, _] = self.corners();
        [x1 * image_w, y1 * image_h, self.w * image_w, self.h * image_h]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a.corners(), b.corners());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (|C| − |A ∪ B|) / |C|` with `C` the smallest
/// enclosing box.
pub fn giou(a: BBox, b: BBox) -> Result<f64> {
    let (ca, cb) = (a.corners(), b.corners());
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    if hull <= 0.0 {
        return Err(Error::Contract("enclosing box has zero area".into()));
    }
    let inter = intersection(ca, cb);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    Ok(iou - (hull - union) / hull)
}

/// Mean over the four coordinates of the smooth-L1 penalty.
pub fn smooth_l1(pred: BBox, target: BBox, beta: f64) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum::<f64>()
        / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the GIoU term.
    pub lambda: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss config needs lambda >= 0 and beta > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub smooth_l1: f64,
    /// `1 − GIoU`
    pub giou: f64,
}

/// `smooth_l1 + λ·(1 − GIoU)`
pub fn grounding_loss(pred: BBox, target: BBox, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let l1 = smooth_l1(pred, target, cfg.beta);
    let g = 1.0 - giou(pred, target)?;
    Ok(LossTerms {
        total: l1 + cfg.lambda * g,
        smooth_l1: l1,
        giou: g,
    })
}

/// Fraction of pairs whose IoU is strictly above `threshold`.
pub fn accuracy_at_iou(predictions: &[BBox], targets: &[BBox], threshold: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy of an empty evaluation set".into()));
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| iou(**p, **t) > threshold)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Differentiable loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub smooth_l1: Var,
    pub giou: Var,
}

/// Builds `smooth_l1 + λ·(1 − GIoU)` between a predicted `[4]` center-form
/// box on the tape and a fixed target.
pub fn grounding_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: BBox,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    if tape.value(pred).numel() != 4 {
        return Err(Error::Contract(format!(
            "predicted box must have 4 entries, got shape {:?}",
            tape.shape(pred)
        )));
    }
    let pred = tape.reshape(pred, &[4])?;
    let t = Tensor::from_f64(&[4], &target.to_array())?;
    let t = tape.constant(t);
    let diff = tape.sub(pred, t)?;
    let per = tape.smooth_l1(diff, cfg.beta)?;
    let l1 = tape.mean(per);

    let g = giou_var(tape, pred, target)?;
    let one_minus = tape.scale(g, -1.0);
    let giou_term = tape.add_scalar(one_minus, 1.0);
    let weighted = tape.scale(giou_term, cfg.lambda);
    let total = tape.add(l1, weighted)?;
    Ok(LossVars {
        total,
        smooth_l1: l1,
        giou: giou_term,
    })
}

/// GIoU of a predicted `[4]` box against a fixed target, as a `[1]` var.
pub fn giou_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: BBox) -> Result<Var> {
    let coord = |tape: &mut Tape<T>, i: usize| tape.slice(pred, 0, i..i + 1);
    let (cx, cy, w, h) = (coord(tape, 0)?, coord(tape, 1)?, coord(tape, 2)?, coord(tape, 3)?);
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let x2 = tape.add(cx, hw)?;
    let y2 = tape.add(cy, hh)?;

    let tc = target.corners();
    let mut konst = |v: f64| tape.constant(Tensor::scalar(T::of(v)));
    let (tx1, ty1, tx2, ty2) = (konst(tc[0]), konst(tc[1]), konst(tc[2]), konst(tc[3]));

    let ix1 = tape.maximum(x1, tx1)?;
    let iy1 = tape.maximum(y1, ty1)?;
    let ix2 = tape.minimum(x2, tx2)?;
    let iy2 = tape.minimum(y2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let area_p = tape.mul(w, h)?;
    let area_p = tape.add_scalar(area_p, target.area());
    let union = tape.sub(area_p, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(x1, tx1)?;
    let hy1 = tape.minimum(y1, ty1)?;
    let hx2 = tape.maximum(x2, tx2)?;
    let hy2 = tape.maximum(y2, ty2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    if tape.value(hull).data()[0] <= T::zero() {
        return Err(Error::Contract("enclosing box has zero area".into()));
    }
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}
