//! Hungarian matching against padded ground truth and the detection loss.

use std::sync::atomic::{AtomicUsize, Ordering};

use cqvad_tensor::{Tensor, Var};

use crate::config::{ClassCost, Config};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_var, l1_var, Bbox, Tube};

/// Probability clamp applied inside every log.
pub const PROB_EPS: f64 = 1e-7;

static PROB_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]` so far.
pub fn prob_clamp_count() -> usize {
    PROB_CLAMPS.load(Ordering::Relaxed)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub eta_box: f64,
    pub eta_giou: f64,
    pub eta_class: f64,
    pub class_cost: ClassCost,
    pub lambda_class: f64,
    pub lambda_box: f64,
    pub lambda_giou: f64,
    pub lambda_conf: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl From<&Config> for MatchConfig {
    fn from(c: &Config) -> Self {
        Self {
            eta_box: c.eta_box,
            eta_giou: c.eta_giou,
            eta_class: c.eta_class,
            class_cost: c.class_cost,
            lambda_class: c.lambda_class,
            lambda_box: c.lambda_box,
            lambda_giou: c.lambda_giou,
            lambda_conf: c.lambda_conf,
            alpha: c.focal_alpha,
            gamma: c.focal_gamma,
        }
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

/// Labeled actors of one clip. Rows beyond `tubes.len()` up to the number
/// of predictions are implicit zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub frames: usize,
    pub classes: usize,
    pub tubes: Vec<Tube>,
    /// Per actor, `frames × classes` multi-hot labels.
    pub labels: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn actors(&self) -> usize {
        self.tubes.len()
    }

    /// Multi-hot labels of row `i`, zero for padding.
    pub fn label_row(&self, i: usize) -> Vec<f64> {
        self.labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.frames * self.classes])
    }
}

/// Plain copies of one clip's predictions, actor-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub actors: usize,
    pub frames: usize,
    pub classes: usize,
    /// `[actors·frames, 4]`.
    pub boxes: Vec<f64>,
    /// `[actors·frames, classes]`.
    pub scores: Vec<f64>,
    /// `[actors]`.
    pub confidence: Vec<f64>,
}

impl Predictions {
    pub fn bbox(&self, actor: usize, frame: usize) -> Bbox {
        Bbox::from_slice(&self.boxes[(actor * self.frames + frame) * 4..][..4])
    }

    pub fn score(&self, actor: usize, frame: usize, class: usize) -> f64 {
        self.scores[(actor * self.frames + frame) * self.classes + class]
    }
}

/// Binary cross-entropy with clamped probability.
pub fn bce(target: f64, p: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Binary focal loss of one probability.
pub fn focal_loss(target: f64, p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    -alpha * target * (1.0 - p).powf(gamma) * p.ln()
        - (1.0 - alpha) * (1.0 - target) * p.powf(gamma) * (1.0 - p).ln()
}

/// Matching costs `[N_a, N_a]`, ground-truth rows by prediction columns.
pub fn pairwise_costs(gt: &GroundTruth, pred: &Predictions, cfg: &MatchConfig) -> Result<Vec<f64>> {
    let n = pred.actors;
    let (t_n, c_n) = (pred.frames, pred.classes);
    if gt.frames != t_n || gt.classes != c_n || gt.actors() > n {
        return Err(Error::Format(format!(
            "ground truth ({} actors, {} frames, {} classes) does not fit predictions ({n}, {t_n}, {c_n})",
            gt.actors(),
            gt.frames,
            gt.classes
        )));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let labels = gt.label_row(i);
        for j in 0..n {
            let mut total = 0.0;
            if i < gt.actors() {
                let (mut l1, mut g) = (0.0, 0.0);
                for t in 0..t_n {
                    let (a, b) = (gt.tubes[i][t], pred.bbox(j, t));
                    l1 += a
                        .to_array()
                        .iter()
                        .zip(b.to_array())
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>();
                    g -= giou(&a, &b);
                }
                total += cfg.eta_box * l1 / t_n as f64 + cfg.eta_giou * g / t_n as f64;
            }
            let class = match cfg.class_cost {
                ClassCost::NegConfidence => -pred.confidence[j],
                ClassCost::Bce => {
                    let s = &pred.scores[j * t_n * c_n..(j + 1) * t_n * c_n];
                    labels.iter().zip(s).map(|(&y, &p)| bce(y, p)).sum::<f64>() / (t_n * c_n) as f64
                }
            };
            total += cfg.eta_class * class;
            if !total.is_finite() {
                return Err(Error::NonFiniteCost { row: i, col: j });
            }
            cost[i * n + j] = total;
        }
    }
    Ok(cost)
}

/// Exact minimum-cost assignment of a square `n × n` matrix. Returns
/// `col[i]` for every row `i`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // potentials on 1-based rows/columns; column 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[row_of[j] - 1] = j - 1;
    }
    col
}

/// Matches a clip's predictions to its padded ground truth.
pub fn match_clip(gt: &GroundTruth, pred: &Predictions, cfg: &MatchConfig) -> Result<Vec<usize>> {
    let cost = pairwise_costs(gt, pred, cfg)?;
    Ok(hungarian(&cost, pred.actors))
}

fn count_clamped(p: &Var<'_>) {
    let n = p
        .value()
        .iter()
        .filter(|&&v| !(PROB_EPS..=1.0 - PROB_EPS).contains(&v))
        .count();
    if n > 0 {
        PROB_CLAMPS.fetch_add(n, Ordering::Relaxed);
    }
}

/// Elementwise focal loss of probabilities `p` against constant targets.
pub fn focal_var<'t>(p: &Var<'t>, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var<'t>> {
    count_clamped(p);
    let tape = p.tape();
    let y = tape.constant(target);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = pc.one_minus();
    let pos = y.mul(&q.powf(gamma))?.mul(&pc.ln())?.scale(-alpha);
    let neg = y
        .one_minus()
        .mul(&pc.powf(gamma))?
        .mul(&q.ln())?
        .scale(-(1.0 - alpha));
    Ok(pos.add(&neg)?)
}

/// Elementwise binary cross-entropy against constant targets.
pub fn bce_var<'t>(p: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    focal_var(p, target, 0.5, 0.0).map(|v| v.scale(2.0))
}

/// Prediction tensors of one clip on the tape, actor-major.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars<'t> {
    /// `[N_a·T, 4]`.
    pub boxes: Var<'t>,
    /// `[N_a·T, N_c]`.
    pub scores: Var<'t>,
    /// `[N_a]`.
    pub confidence: Var<'t>,
}

/// Weighted, averaged loss terms; `total` is their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub conf: f64,
}

/// Set-prediction loss for a fixed assignment `col[i]` (ground-truth row
/// `i` to prediction `col[i]`), averaged over frames and actor slots.
pub fn detection_loss<'t>(
    pred: &PredictionVars<'t>,
    gt: &GroundTruth,
    col: &[usize],
    cfg: &MatchConfig,
) -> Result<LossTerms<'t>> {
    let tape = pred.boxes.tape();
    let n = col.len();
    let t_n = gt.frames;
    let c_n = gt.classes;
    let nx = gt.actors();
    let norm = 1.0 / (t_n * n) as f64;

    let rows: Vec<usize> = (0..n).flat_map(|i| (0..t_n).map(move |t| col[i] * t_n + t)).collect();
    let labels: Vec<f64> = (0..n).flat_map(|i| gt.label_row(i)).collect();
    let scores = pred.scores.select_rows(&rows)?;
    let class = focal_var(&scores, &Tensor::new([n * t_n, c_n], labels)?, cfg.alpha, cfg.gamma)?
        .sum()
        .scale(cfg.lambda_class * norm);

    let conf_rows: Vec<usize> = col.to_vec();
    let conf_target = Tensor::from_fn([n], |i| if i < nx { 1.0 } else { 0.0 });
    let conf_sel = pred.confidence.gather(&conf_rows, [n])?;
    // the confidence term repeats on every frame
    let conf = bce_var(&conf_sel, &conf_target)?
        .sum()
        .scale(cfg.lambda_conf * norm * t_n as f64);

    let mut total = class.add(&conf)?;
    let (mut bbox_v, mut giou_v) = (0.0, 0.0);
    if nx > 0 {
        let real = &rows[..nx * t_n];
        let pb = pred.boxes.select_rows(real)?;
        let gb: Vec<f64> = gt.tubes.iter().flatten().flat_map(|b| b.to_array()).collect();
        let gb = tape.constant(&Tensor::new([nx * t_n, 4], gb)?);
        let bbox = l1_var(&pb, &gb)?.sum().scale(cfg.lambda_box * norm);
        let g = giou_var(&pb, &gb)?.sum().scale(-cfg.lambda_giou * norm);
        bbox_v = bbox.item();
        giou_v = g.item();
        total = total.add(&bbox)?.add(&g)?;
    }
    Ok(LossTerms {
        total,
        class: class.item(),
        bbox: bbox_v,
        giou: giou_v,
        conf: conf.item(),
    })
}
