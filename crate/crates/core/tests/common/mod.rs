#![allow(dead_code)]

use std::rc::Rc;

use cqvad::attention::{box_codes, box_modulate_with_ref, sine_code, MultiHeadAttention};
use cqvad::cdl::{BaselineHead, CdlLayer};
use cqvad::config::{Aggregation, ClassCost, Fusion, LabelMode};
use cqvad::harness::micro::{micro_config, micro_model, micro_sample};
use cqvad::matching::{detection_loss, hungarian, match_clip, GroundTruth, MatchConfig, PredictionVars, Predictions};
use cqvad::encoder::{reference_points, stack_levels, to_level_coords, total_rows, DeformableAttention};
use cqvad::ldl::{DecoderContext, LdlLayer};
use cqvad::nn::{LayerNorm, Linear, LN_EPS};
use cqvad_tensor::{LevelSpec, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, r: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-r..r))
}

/// Plain eight-corner trilinear read of channels `c0..c0+n` of a
/// `t × h × w` grid stored row-major in `v` with `d` columns, starting at
/// row `offset`.
#[allow(clippy::too_many_arguments)]
pub fn trilinear_loop(
    v: &[f64],
    d: usize,
    offset: usize,
    (t, h, w): (usize, usize, usize),
    p: [f64; 3],
    c0: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let (ft, fh, fw) = (p[0].floor(), p[1].floor(), p[2].floor());
    for dt in 0..2 {
        for dh in 0..2 {
            for dw in 0..2 {
                let (it, ih, iw) = (ft + dt as f64, fh + dh as f64, fw + dw as f64);
                if it < 0.0 || ih < 0.0 || iw < 0.0 || it >= t as f64 || ih >= h as f64 || iw >= w as f64 {
                    continue;
                }
                let wt = 1.0 - (p[0] - it).abs();
                let wh = 1.0 - (p[1] - ih).abs();
                let ww = 1.0 - (p[2] - iw).abs();
                let row = offset + (it as usize * h + ih as usize) * w + iw as usize;
                for c in 0..n {
                    out[c] += wt * wh * ww * v[row * d + c0 + c];
                }
            }
        }
    }
    out
}

pub fn random_levels(rng: &mut ChaCha8Rng, n: usize) -> Vec<LevelSpec> {
    let extents: Vec<(usize, usize, usize)> = (0..n)
        .map(|_| (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6)))
        .collect();
    stack_levels(&extents)
}

/// Largest deviation between deformable attention with zero offsets,
/// uniform weights and identity projections and the level mean of plain
/// trilinear reads at the reference point, over one random configuration.
pub fn degeneracy_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..4);
    let d = heads * rng.random_range(1..4);
    let n_levels = rng.random_range(1..4);
    let points = rng.random_range(1..4);
    let levels = random_levels(&mut rng, n_levels);
    let mut store = ParamStore::new();
    let attn = DeformableAttention::new(&mut store, "a", d, heads, n_levels, points, &mut rng, 1.0);
    for lin in [&attn.value, &attn.out] {
        store.set_data(lin.w, Tensor::eye(d).data()).unwrap();
    }
    let n = total_rows(&levels);
    let input = uniform(&mut rng, [n, d], 1.0);
    let mut refs = reference_points(&levels);
    refs.extend((0..8).map(|_| [rng.random(), rng.random(), rng.random()]));
    let query = uniform(&mut rng, [refs.len(), d], 1.0);

    let tape = Tape::new();
    let p = store.bind(&tape);
    let shared: Rc<[LevelSpec]> = levels.clone().into();
    let out = attn
        .forward(&p, &tape.constant(&query), &refs, &tape.constant(&input), &shared)
        .unwrap()
        .value();
    let mut worst: f64 = 0.0;
    for (q, r) in refs.iter().enumerate() {
        let mut expect = vec![0.0; d];
        for l in &levels {
            let s = trilinear_loop(input.data(), d, l.offset, (l.t, l.h, l.w), to_level_coords(*r, l), 0, d);
            for c in 0..d {
                expect[c] += s[c] / n_levels as f64;
            }
        }
        for c in 0..d {
            worst = worst.max((out[q * d + c] - expect[c]).abs());
        }
    }
    worst
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(l.w).data(), store.get(l.b).data());
    (0..l.d_out)
        .map(|j| b[j] + (0..l.d_in).map(|k| x[k] * w[k * l.d_out + j]).sum::<f64>())
        .collect()
}

pub fn linear_rows(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    x.chunks(l.d_in).flat_map(|r| linear(store, l, r)).collect()
}

pub fn layer_norm(store: &ParamStore, n: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let (g, b) = (store.get(n.gamma).data(), store.get(n.beta).data());
    let d = g.len();
    x.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(move |k| (r[k] - mean) / (var + LN_EPS).sqrt() * g[k] + b[k])
        })
        .collect()
}

/// Scalar-loop multi-head attention on row-major inputs, returning the
/// output rows and the head-averaged map.
pub fn attention_loop(store: &ParamStore, m: &MultiHeadAttention, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (qp, kp, vp) = (linear_rows(store, &m.wq, q), linear_rows(store, &m.wk, k), linear_rows(store, &m.wv, v));
    let d = m.wq.d_out;
    let (n_q, n_k) = (qp.len() / d, kp.len() / d);
    let dh = d / m.heads;
    let mut heads_out = vec![0.0; n_q * d];
    let mut map = vec![0.0; n_q * n_k];
    for h in 0..m.heads {
        for i in 0..n_q {
            let logits: Vec<f64> = (0..n_k)
                .map(|j| (0..dh).map(|c| qp[i * d + h * dh + c] * kp[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n_k {
                let a = e[j] / z;
                map[i * n_k + j] += a / m.heads as f64;
                for c in 0..dh {
                    heads_out[i * d + h * dh + c] += a * vp[j * d + h * dh + c];
                }
            }
        }
    }
    (linear_rows(store, &m.wo, &heads_out), map)
}

pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, r: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-r..r);
        }
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest pairwise L∞ distance between rows of the CDL class map, and
/// whether the baseline head's per-class maps are bit-identical, for one
/// random configuration.
pub fn class_specificity(seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads, classes, h, w) = (8, 2, rng.random_range(2..5), 3, 3);
    let mut store = ParamStore::new();
    let cdl = CdlLayer::new(&mut store, "c", d, 16, heads, Fusion::Sum, 2, &mut rng, 1.0);
    let base = BaselineHead::new(&mut store, "b", d, classes, &mut rng, 1.0);
    let q = uniform(&mut rng, [classes, d], 1.0);
    let f = uniform(&mut rng, [1, d], 1.0);
    let x = uniform(&mut rng, [h * w, d], 1.0);
    let pq = uniform(&mut rng, [1, d], 1.0);
    let pg = uniform(&mut rng, [h * w, d], 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (fv, xv) = (tape.constant(&f), tape.constant(&x));
    let q_sa = cdl.class_self_attention(&p, &tape.constant(&q)).unwrap();
    let c = cdl
        .forward_actor(&p, &q_sa, &fv, &xv, &tape.constant(&pq), &tape.constant(&pg), h, w)
        .unwrap();
    let rows: Vec<&[f64]> = c.map.data().chunks(h * w).collect();
    let mut min_gap = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            min_gap = min_gap.min(max_abs(rows[i], rows[j]));
        }
    }
    let b = base.forward(&p, &fv, &xv).unwrap();
    let brows: Vec<&[f64]> = b.map.data().chunks(h * w).collect();
    let shared = brows.iter().all(|r| r == &brows[0]);
    (min_gap, shared)
}

/// Minimum of `Σ_i cost[i, perm(i)]` over all permutations, summed in row
/// order.
pub fn brute_force_min(cost: &[f64], n: usize) -> f64 {
    fn go(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

pub fn assignment_cost(cost: &[f64], n: usize, col: &[usize]) -> f64 {
    (0..n).fold(0.0, |acc, i| acc + cost[i * n + col[i]])
}

/// Number of random `n × n` matrices (out of `count`) where the solver's
/// total differs from the brute-force minimum.
pub fn hungarian_mismatches(n: usize, count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .filter(|_| {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let col = hungarian(&cost, n);
            let mut seen = vec![false; n];
            let bijective = col.iter().all(|&j| !std::mem::replace(&mut seen[j], true));
            !bijective || assignment_cost(&cost, n, &col) != brute_force_min(&cost, n)
        })
        .count()
}

/// Predictions of a randomly initialized micro model on a random clip,
/// with the clip's ground truth. Odd seeds use single-label scoring.
pub fn micro_instance(seed: u64) -> (Predictions, GroundTruth, MatchConfig) {
    let mut cfg = micro_config();
    if seed % 2 == 1 {
        cfg.label_mode = LabelMode::Single;
    }
    let model = micro_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actors = rng.random_range(0..=cfg.actors);
    let (frames, gt) = micro_sample(&cfg, &mut rng, actors);
    let pred = model.infer(&frames).unwrap().pred;
    let mut mcfg = MatchConfig::from(&cfg);
    if seed % 3 == 0 {
        mcfg.class_cost = ClassCost::Bce;
    }
    (pred, gt, mcfg)
}

pub fn prediction_vars<'t>(tape: &'t Tape, pred: &Predictions) -> PredictionVars<'t> {
    let rows = pred.actors * pred.frames;
    PredictionVars {
        boxes: tape.constant(&Tensor::new([rows, 4], pred.boxes.clone()).unwrap()),
        scores: tape.constant(&Tensor::new([rows, pred.classes], pred.scores.clone()).unwrap()),
        confidence: tape.constant(&Tensor::new([pred.actors], pred.confidence.clone()).unwrap()),
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7).ln()
}

fn focal(y: f64, p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y == 1.0 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn giou_scalar(a: [f64; 4], b: [f64; 4]) -> f64 {
    // corners are clipped to the frame
    let corners = |x: [f64; 4]| {
        [x[0] - x[2] / 2.0, x[1] - x[3] / 2.0, x[0] + x[2] / 2.0, x[1] + x[3] / 2.0].map(|v| v.clamp(0.0, 1.0))
    };
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = (p[2] - p[0]) * (p[3] - p[1]) + (q[2] - q[0]) * (q[3] - q[1]) - inter;
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    inter / union - (hull - union) / hull
}

/// Frame-by-frame, slot-by-slot evaluation of the training objective.
pub fn loss_oracle(pred: &Predictions, gt: &GroundTruth, col: &[usize], cfg: &MatchConfig) -> f64 {
    let (n, t_n, c_n) = (pred.actors, pred.frames, pred.classes);
    let mut total = 0.0;
    for i in 0..n {
        let j = col[i];
        let real = i < gt.actors();
        for t in 0..t_n {
            for c in 0..c_n {
                let y = if real { gt.labels[i][t * c_n + c] } else { 0.0 };
                total += cfg.lambda_class * focal(y, pred.scores[(j * t_n + t) * c_n + c], cfg.alpha, cfg.gamma);
            }
            let p = pred.confidence[j];
            if real {
                let a = gt.tubes[i][t].to_array();
                let b: [f64; 4] = std::array::from_fn(|k| pred.boxes[(j * t_n + t) * 4 + k]);
                total += cfg.lambda_box * (0..4).map(|k| (a[k] - b[k]).abs()).sum::<f64>();
                total -= cfg.lambda_giou * giou_scalar(b, a);
                total -= cfg.lambda_conf * clamped_ln(p);
            } else {
                total -= cfg.lambda_conf * clamped_ln(1.0 - p);
            }
        }
    }
    total / (t_n * n) as f64
}

/// Largest deviation between the loss on the tape and [`loss_oracle`] on
/// one micro instance, under the solver's assignment.
pub fn loss_oracle_error(seed: u64) -> f64 {
    let (pred, gt, cfg) = micro_instance(seed);
    let col = match_clip(&gt, &pred, &cfg).unwrap();
    let tape = Tape::new();
    let got = detection_loss(&prediction_vars(&tape, &pred), &gt, &col, &cfg).unwrap().total.item();
    (got - loss_oracle(&pred, &gt, &col, &cfg)).abs()
}

fn unit_boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn([n, 4], |k| if k % 4 < 2 { rng.random_range(0.2..0.8) } else { rng.random_range(0.05..0.5) })
}

/// Modulating with the box's own size reproduces the plain sine code
/// bit for bit.
pub fn unit_ratio_is_plain(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4 * rng.random_range(1..8);
    let b = unit_boxes(&mut rng, 5);
    let tape = Tape::new();
    let bv = tape.constant(&b);
    let [px, py, _, _] = box_codes(&bv, d).unwrap();
    let p = box_modulate_with_ref(&px, &py, &bv, &bv.narrow(1, 2, 2).unwrap()).unwrap();
    p.value().chunks(d).enumerate().all(|(i, row)| {
        let mut plain = sine_code(b.data()[i * 4], d / 2);
        plain.extend(sine_code(b.data()[i * 4 + 1], d / 2));
        row == plain.as_slice()
    })
}

struct Ldl {
    store: ParamStore,
    layer: LdlLayer,
    levels: Vec<Tensor>,
    boxes: Tensor,
    ae: Tensor,
}

const LDL_D: usize = 8;
const LDL_GRID: (usize, usize, usize) = (2, 2, 3);

fn ldl(seed: u64, n_levels: usize, actors: usize) -> Ldl {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = LdlLayer::new(&mut store, "l", LDL_D, 16, 2, n_levels, &mut rng, 1.0);
    randomize(&mut store, &mut rng, 0.5);
    let (t, h, w) = LDL_GRID;
    let levels = (0..n_levels).map(|_| uniform(&mut rng, [t * h * w, LDL_D], 1.0)).collect();
    let rows = t * actors;
    let boxes = Tensor::from_fn([rows, 4], |k| if k % 4 < 2 { rng.random_range(0.3..0.7) } else { rng.random_range(0.1..0.4) });
    let ae = uniform(&mut rng, [rows, LDL_D], 1.0);
    Ldl { store, layer, levels, boxes, ae }
}

fn run_ldl(c: &Ldl, actors: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (t, h, w) = LDL_GRID;
    let tape = Tape::new();
    let p = c.store.bind_frozen(&tape);
    let ctx = DecoderContext::new(c.levels.iter().map(|l| tape.constant(l)).collect(), t, h, w).unwrap();
    let out = c
        .layer
        .forward(&p, &ctx, &tape.constant(&c.boxes), &tape.constant(&c.ae), actors, Aggregation::ActorSpecific)
        .unwrap();
    (out.boxes.value().to_vec(), out.context.iter().map(|x| x.value().to_vec()).collect())
}

/// A box head whose last layer is zero leaves the boxes exactly as given.
pub fn refine_is_noop(seed: u64) -> bool {
    let mut c = ldl(seed, 2, 3);
    let head = c.layer.box_head.clone();
    c.store.get_mut(head.l2.w).data_mut().fill(0.0);
    c.store.get_mut(head.l2.b).data_mut().fill(0.0);
    run_ldl(&c, 3).0 == c.boxes.data()
}

/// Level weights saturated on one level return that level's rows exactly.
pub fn one_hot_selects_level(seed: u64) -> bool {
    let n_levels = 3;
    let mut c = ldl(seed, n_levels, 2);
    let mlp = c.layer.level_mlp.clone();
    c.store.get_mut(mlp.l2.w).data_mut().fill(0.0);
    let (t, h, w) = LDL_GRID;
    let hw = h * w;
    (0..n_levels).all(|pick| {
        let bias: Vec<f64> = (0..n_levels).map(|l| if l == pick { 1000.0 } else { 0.0 }).collect();
        c.store.set_data(mlp.l2.b, &bias).unwrap();
        let (_, context) = run_ldl(&c, 2);
        context.iter().enumerate().all(|(r, x)| {
            let f = r / 2;
            debug_assert!(f < t);
            x.as_slice() == &c.levels[pick].data()[f * hw * LDL_D..(f + 1) * hw * LDL_D]
        })
    })
}
