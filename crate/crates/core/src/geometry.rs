//! Normalized center-size boxes, overlap measures and box losses.
//!
//! Plain-value functions serve matching and evaluation; the `*_var`
//! variants record on a tape for training. Corner conversion clamps to
//! `[0, 1]`.

use cqvad_tensor::Var;

use crate::error::{Error, Result};

/// `(cx, cy, w, h)` in normalized image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One box per frame.
pub type Tube = Vec<Bbox>;

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners `(x1, y1, x2, y2)` clamped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy - 0.5 * self.h).clamp(0.0, 1.0),
            (self.cx + 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy + 0.5 * self.h).clamp(0.0, 1.0),
        ]
    }

    /// Whether corner conversion leaves the box unchanged.
    pub fn inside_unit(&self) -> bool {
        let c = [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ];
        c.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn area(c: &[f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let (inter, union) = overlap(&ca, &cb);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU in `[-1, 1]`. Degenerate boxes take IoU 0 but keep the
/// enclosing-box penalty; an empty enclosing box gives 0.
pub fn giou(a: &Bbox, b: &Bbox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let (inter, union) = overlap(&ca, &cb);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = [
        ca[0].min(cb[0]),
        ca[1].min(cb[1]),
        ca[2].max(cb[2]),
        ca[3].max(cb[3]),
    ];
    let c = area(&hull);
    if c > 0.0 {
        iou - (c - union) / c
    } else {
        iou
    }
}

/// Per-frame L1 distance summed over the four coordinates.
pub fn l1_box_loss(pred: &[Bbox], gt: &[Bbox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Format(format!(
            "tube lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            p.to_array()
                .iter()
                .zip(g.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum()
        })
        .collect())
}

const AREA_FLOOR: f64 = 1e-12;

/// Corners of `[n, 4]` center-size rows, clamped to the unit square.
pub fn corners_var<'t>(b: &Var<'t>) -> Result<Var<'t>> {
    let c = b.narrow(1, 0, 2)?;
    let half = b.narrow(1, 2, 2)?.scale(0.5);
    let lo = c.sub(&half)?.clamp(0.0, 1.0);
    let hi = c.add(&half)?.clamp(0.0, 1.0);
    Ok(Var::concat(&[lo, hi], 1)?)
}

fn area_var<'t>(c: &Var<'t>) -> Result<Var<'t>> {
    let lo = c.narrow(1, 0, 2)?;
    let hi = c.narrow(1, 2, 2)?;
    let wh = hi.sub(&lo)?.relu();
    Ok(wh.narrow(1, 0, 1)?.mul(&wh.narrow(1, 1, 1)?)?)
}

/// Row-wise GIoU of `[n, 4]` box pairs, shape `[n]`.
pub fn giou_var<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (ca, cb) = (corners_var(a)?, corners_var(b)?);
    let inter_lo = ca.narrow(1, 0, 2)?.maximum(&cb.narrow(1, 0, 2)?)?;
    let inter_hi = ca.narrow(1, 2, 2)?.minimum(&cb.narrow(1, 2, 2)?)?;
    let inter = area_var(&Var::concat(&[inter_lo, inter_hi], 1)?)?;
    let union = area_var(&ca)?.add(&area_var(&cb)?)?.sub(&inter)?;
    let floor = a.tape().scalar(AREA_FLOOR);
    let iou = inter.div(&union.maximum(&floor)?)?;
    let hull_lo = ca.narrow(1, 0, 2)?.minimum(&cb.narrow(1, 0, 2)?)?;
    let hull_hi = ca.narrow(1, 2, 2)?.maximum(&cb.narrow(1, 2, 2)?)?;
    let hull = area_var(&Var::concat(&[hull_lo, hull_hi], 1)?)?;
    let penalty = hull.sub(&union)?.div(&hull.maximum(&floor)?)?;
    let n = a.shape()[0];
    Ok(iou.sub(&penalty)?.reshape(vec![n])?)
}

/// Row-wise L1 distance of `[n, 4]` box pairs, shape `[n]`.
pub fn l1_var<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.abs().sum_axis(1)?)
}
