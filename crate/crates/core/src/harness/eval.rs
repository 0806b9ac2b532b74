//! Frame-level mAP and attention diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{iou, Bbox};
use crate::harness::model::{InferOutput, Model};
use crate::harness::synthetic::Clip;
use crate::harness::thread_pool;

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored box for one class on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Global frame key shared with the ground truth.
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub frame: usize,
    pub class: usize,
    pub bbox: Bbox,
}

/// Precision and recall after each ranked detection of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub fmap: f64,
    pub excluded_classes: Vec<usize>,
    /// `confusion[true][predicted]` over localized actor-frames.
    pub confusion: Vec<Vec<usize>>,
    /// Actor-frames with no prediction at the IoU threshold.
    pub missed: usize,
    /// Normalized entropy of the true-class attention rows of localized
    /// actor-frames.
    pub attention_entropy: EntropyStats,
    /// Mean attention mass falling inside another actor's box, over
    /// localized actor-frames of clips with several actors.
    pub actor_confusion_rate: Option<f64>,
}

/// Ranks detections by score, keeping input order among ties.
fn ranked(dets: &[Detection], class: usize) -> Vec<&Detection> {
    let mut out: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Greedy matching of ranked detections to unmatched ground truth.
pub fn pr_curve(dets: &[Detection], gts: &[GtBox], class: usize, thresh: f64) -> PrCurve {
    let gt: Vec<&GtBox> = gts.iter().filter(|g| g.class == class).collect();
    let mut used = vec![false; gt.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve::default();
    for d in ranked(dets, class) {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gt.iter().enumerate() {
            if used[k] || g.frame != d.frame {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if gt.is_empty() { 0.0 } else { tp as f64 / gt.len() as f64 });
    }
    curve
}

/// All-point interpolated area under a PR curve.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        ap += (curve.recall[k] - prev) * envelope[k];
        prev = curve.recall[k];
    }
    ap
}

/// Per-class AP and their mean over classes that have ground truth.
pub fn evaluate_fmap(dets: &[Detection], gts: &[GtBox], classes: usize, thresh: f64) -> EvalReport {
    let mut per_class_ap = Vec::with_capacity(classes);
    let mut excluded = Vec::new();
    for c in 0..classes {
        if gts.iter().any(|g| g.class == c) {
            per_class_ap.push(Some(average_precision(&pr_curve(dets, gts, c, thresh))));
        } else {
            per_class_ap.push(None);
            excluded.push(c);
        }
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let fmap = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    EvalReport {
        per_class_ap,
        fmap,
        excluded_classes: excluded,
        confusion: vec![vec![0; classes]; classes],
        ..EvalReport::default()
    }
}

/// Detections and ground truth of one clip, frames keyed from `frame_base`.
pub fn clip_detections(clip: &Clip, out: &InferOutput, frame_base: usize) -> (Vec<Detection>, Vec<GtBox>) {
    let pred = &out.pred;
    let mut dets = Vec::with_capacity(pred.actors * pred.frames * pred.classes);
    for i in 0..pred.actors {
        for t in 0..pred.frames {
            for c in 0..pred.classes {
                dets.push(Detection {
                    frame: frame_base + t,
                    class: c,
                    score: pred.score(i, t, c),
                    bbox: pred.bbox(i, t),
                });
            }
        }
    }
    let mut gts = Vec::new();
    for (i, tube) in clip.gt.tubes.iter().enumerate() {
        for (t, b) in tube.iter().enumerate() {
            for c in 0..clip.gt.classes {
                if clip.gt.labels[i][t * clip.gt.classes + c] > 0.5 {
                    gts.push(GtBox { frame: frame_base + t, class: c, bbox: *b });
                }
            }
        }
    }
    (dets, gts)
}

/// Normalized entropy of a distribution in `[0, 1]`.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / (row.len() as f64).ln()
}

/// Attention mass of `row` (over an `h × w` grid) on cells whose centers
/// fall inside any of `boxes`.
pub fn mass_inside(row: &[f64], h: usize, w: usize, boxes: &[Bbox]) -> f64 {
    let mut m = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            if boxes.iter().any(|b| {
                let [x0, y0, x1, y1] = b.corners();
                cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1
            }) {
                m += row[y * w + x];
            }
        }
    }
    m
}

#[derive(Default)]
struct Diagnostics {
    confusion: Vec<Vec<usize>>,
    missed: usize,
    entropy: Vec<f64>,
    wrong_mass: Vec<f64>,
}

fn clip_diagnostics(clip: &Clip, out: &InferOutput, h: usize, w: usize) -> Diagnostics {
    let pred = &out.pred;
    let c_n = pred.classes;
    let mut d = Diagnostics {
        confusion: vec![vec![0; c_n]; c_n],
        ..Diagnostics::default()
    };
    for (i, tube) in clip.gt.tubes.iter().enumerate() {
        let truth = clip.scenario.classes[i];
        for (t, b) in tube.iter().enumerate() {
            let best = (0..pred.actors)
                .map(|j| (j, iou(&pred.bbox(j, t), b)))
                .filter(|&(_, o)| o >= IOU_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            let Some((j, _)) = best else {
                d.missed += 1;
                continue;
            };
            let scores: Vec<f64> = (0..c_n).map(|c| pred.score(j, t, c)).collect();
            let guess = (0..c_n).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap_or(0);
            d.confusion[truth][guess] += 1;
            let map = &out.class_maps[j * pred.frames + t];
            let row = &map.data()[truth * h * w..(truth + 1) * h * w];
            d.entropy.push(normalized_entropy(row));
            if clip.gt.tubes.len() > 1 {
                let others: Vec<Bbox> = clip
                    .gt
                    .tubes
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .map(|(_, o)| o[t])
                    .collect();
                d.wrong_mass.push(mass_inside(row, h, w, &others));
            }
        }
    }
    d
}

/// Runs the model on `clips` and scores it. Results do not depend on
/// `threads`.
pub fn evaluate_model(model: &Model, clips: &[Clip], threads: usize) -> Result<EvalReport> {
    let outs: Vec<Result<InferOutput>> = thread_pool(threads)?
        .install(|| clips.par_iter().map(|c| model.infer(&c.frames_tensor())).collect());
    let (h, w) = (model.cfg.grid_h, model.cfg.grid_w);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut diag = Vec::with_capacity(clips.len());
    let mut base = 0;
    for (clip, out) in clips.iter().zip(outs) {
        let out = out?;
        let (d, g) = clip_detections(clip, &out, base);
        dets.extend(d);
        gts.extend(g);
        diag.push(clip_diagnostics(clip, &out, h, w));
        base += clip.frames;
    }
    let mut report = evaluate_fmap(&dets, &gts, model.cfg.classes, IOU_THRESHOLD);
    let mut entropy = Vec::new();
    let mut wrong = Vec::new();
    for d in diag {
        for (row, add) in report.confusion.iter_mut().zip(&d.confusion) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
        report.missed += d.missed;
        entropy.extend(d.entropy);
        wrong.extend(d.wrong_mass);
    }
    if !entropy.is_empty() {
        report.attention_entropy = EntropyStats {
            mean: entropy.iter().sum::<f64>() / entropy.len() as f64,
            min: entropy.iter().copied().fold(f64::INFINITY, f64::min),
            max: entropy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: entropy.len(),
        };
    }
    if !wrong.is_empty() {
        report.actor_confusion_rate = Some(wrong.iter().sum::<f64>() / wrong.len() as f64);
    }
    Ok(report)
}
