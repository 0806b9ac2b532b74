//! Randomized finite-difference checks for every differentiable primitive.
//!
//! Each case draws its own shapes and values from the supplied generator and
//! reduces the primitive's output to a scalar through a fixed random
//! projection, so every output coordinate contributes to the checked
//! gradient. Inputs are kept away from kinks (relu, abs, clamps, cell
//! boundaries of the samplers) so central differences are meaningful.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::tape::{LevelSpec, Tape, Var, ZERO_INDEX};
use crate::tensor::{numel, Tensor};

pub type Case = fn(&mut ChaCha8Rng) -> Result<GradcheckReport>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[gap, 1]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// `Σ out ⊙ w` for a fixed weight tensor `w` recorded as a constant.
fn project<'t>(tape: &'t Tape, out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    let w = tape.constant(w);
    Ok(out.mul(&w)?.sum())
}

macro_rules! unary_case {
    ($name:ident, $lo:expr, $hi:expr, |$x:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
            let rank = rng.random_range(1..=3);
            let shape = dims(rng, rank, 4);
            let x = uniform(rng, &shape, $lo, $hi);
            let w = uniform(rng, &shape, -1.0, 1.0);
            gradcheck(
                |t, v| {
                    let $x = v[0];
                    project(t, $body, &w)
                },
                &[x],
            )
        }
    };
}

unary_case!(neg, -2.0, 2.0, |x| x.neg());
unary_case!(scale, -2.0, 2.0, |x| x.scale(-1.7));
unary_case!(add_scalar, -2.0, 2.0, |x| x.add_scalar(0.3));
unary_case!(sigmoid, -4.0, 4.0, |x| x.sigmoid());
unary_case!(exp, -2.0, 2.0, |x| x.exp());
unary_case!(ln, 0.2, 3.0, |x| x.ln());
unary_case!(sin, -3.0, 3.0, |x| x.sin());
unary_case!(cos, -3.0, 3.0, |x| x.cos());
unary_case!(sqrt, 0.2, 3.0, |x| x.sqrt());
unary_case!(powf, 0.2, 2.0, |x| x.powf(2.5));
unary_case!(one_minus, -2.0, 2.0, |x| x.one_minus());

fn kinked(rng: &mut ChaCha8Rng, op: fn(Var<'_>) -> Var<'_>) -> Result<GradcheckReport> {
    let shape = dims(rng, 2, 4);
    let x = away_from_zero(rng, &shape, 0.05);
    let w = uniform(rng, &shape, -1.0, 1.0);
    gradcheck(|t, v| project(t, op(v[0]), &w), &[x])
}

fn relu(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    kinked(rng, |x| x.relu())
}

fn abs(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    kinked(rng, |x| x.abs())
}

fn clamp(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let shape = dims(rng, 2, 4);
    // bands on both sides of each bound, none within 0.05 of it
    let x = Tensor::from_fn(shape.clone(), |_| match rng.random_range(0..3) {
        0 => rng.random_range(-1.0..-0.55),
        1 => rng.random_range(-0.45..0.45),
        _ => rng.random_range(0.55..1.0),
    });
    let w = uniform(rng, &shape, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].clamp(-0.5, 0.5), &w), &[x])
}

fn clamp_straight_through(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    // inside the bounds the op is the identity in both directions
    let shape = dims(rng, 2, 4);
    let x = uniform(rng, &shape, 0.1, 0.9);
    let w = uniform(rng, &shape, -1.0, 1.0);
    gradcheck(
        |t, v| project(t, v[0].clamp_straight_through(0.0, 1.0).sigmoid(), &w),
        &[x],
    )
}

/// Binary ops on a pair of shapes drawn from the broadcasting families:
/// equal, scalar, trailing suffix and general size-1 expansion.
fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let full = dims(rng, 3, 3);
    match rng.random_range(0..4) {
        0 => (full.clone(), full),
        1 => (full, Vec::new()),
        2 => (full.clone(), full[1..].to_vec()),
        _ => {
            let mut b = full.clone();
            b[0] = 1;
            b[2] = 1;
            (full, b)
        }
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    op: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>,
    positive_rhs: bool,
) -> Result<GradcheckReport> {
    let (mut sa, mut sb) = broadcast_pair(rng);
    if rng.random::<bool>() {
        std::mem::swap(&mut sa, &mut sb);
    }
    let a = uniform(rng, &sa, -1.5, 1.5);
    let b = if positive_rhs {
        uniform(rng, &sb, 0.5, 2.0)
    } else {
        uniform(rng, &sb, -1.5, 1.5)
    };
    let out_shape = crate::ops::elementwise::broadcast_shape(&sa, &sb).expect("compatible");
    let w = uniform(rng, &out_shape, -1.0, 1.0);
    gradcheck(|t, v| project(t, op(&v[0], &v[1])?, &w), &[a, b])
}

fn add(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    binary(rng, |a, b| a.add(b), false)
}

fn sub(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    binary(rng, |a, b| a.sub(b), false)
}

fn mul(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    binary(rng, |a, b| a.mul(b), false)
}

fn div(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    binary(rng, |a, b| a.div(b), true)
}

fn extremum(rng: &mut ChaCha8Rng, max: bool) -> Result<GradcheckReport> {
    let shape = dims(rng, 2, 4);
    let a = uniform(rng, &shape, -1.0, 1.0);
    // keep |a - b| ≥ 0.05 so no coordinate sits on the switch
    let gap = away_from_zero(rng, &shape, 0.05);
    let b = Tensor::from_fn(shape.clone(), |i| a.data()[i] + gap.data()[i]);
    let w = uniform(rng, &shape, -1.0, 1.0);
    gradcheck(
        |t, v| {
            let out = if max {
                v[0].maximum(&v[1])?
            } else {
                v[0].minimum(&v[1])?
            };
            project(t, out, &w)
        },
        &[a, b],
    )
}

fn maximum(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    extremum(rng, true)
}

fn minimum(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    extremum(rng, false)
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 5);
    let a = uniform(rng, &[s[0], s[1]], -1.0, 1.0);
    let b = uniform(rng, &[s[1], s[2]], -1.0, 1.0);
    let w = uniform(rng, &[s[0], s[2]], -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].matmul(&v[1])?, &w), &[a, b])
}

fn transpose(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 2, 5);
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &[s[1], s[0]], -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].transpose()?, &w), &[a])
}

fn sum(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let a = uniform(rng, &s, -1.0, 1.0);
    gradcheck(|_, v| Ok(v[0].sin().sum()), &[a])
}

fn sum_axis(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let axis = rng.random_range(0..3);
    let mut out = s.clone();
    out.remove(axis);
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &out, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].sum_axis(axis)?, &w), &[a])
}

fn mean_axis(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let axis = rng.random_range(0..3);
    let mut out = s.clone();
    out.remove(axis);
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &out, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].mean_axis(axis)?, &w), &[a])
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let axis = rng.random_range(0..3);
    let a = uniform(rng, &s, -3.0, 3.0);
    let w = uniform(rng, &s, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].softmax(axis)?, &w), &[a])
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let mut s = dims(rng, 2, 4);
    s[1] += 1;
    let a = uniform(rng, &s, -2.0, 2.0);
    let w = uniform(rng, &s, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].layer_norm(1e-5)?, &w), &[a])
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let a = uniform(rng, &s, -1.0, 1.0);
    let flat = [s[0], s[1] * s[2]];
    let w = uniform(rng, &flat, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].reshape(flat.to_vec())?, &w), &[a])
}

fn broadcast_to(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let (full, part) = broadcast_pair(rng);
    let a = uniform(rng, &part, -1.0, 1.0);
    let w = uniform(rng, &full, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].broadcast_to(full.clone())?, &w), &[a])
}

fn concat(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 3);
    let axis = rng.random_range(0..3);
    let parts: Vec<Tensor> = (0..rng.random_range(1..=3))
        .map(|_| {
            let mut p = s.clone();
            p[axis] = rng.random_range(1..=3);
            uniform(rng, &p, -1.0, 1.0)
        })
        .collect();
    let mut out = s.clone();
    out[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let w = uniform(rng, &out, -1.0, 1.0);
    gradcheck(|t, v| project(t, Var::concat(v, axis)?, &w), &parts)
}

fn narrow(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 3, 4);
    let axis = rng.random_range(0..3);
    let start = rng.random_range(0..s[axis]);
    let len = rng.random_range(1..=s[axis] - start);
    let mut out = s.clone();
    out[axis] = len;
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &out, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].narrow(axis, start, len)?, &w), &[a])
}

fn gather(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 2, 4);
    let n = numel(&s);
    let out = dims(rng, 2, 5);
    // repeats and zero entries exercise the scatter-add
    let index: Vec<usize> = (0..numel(&out))
        .map(|_| {
            if rng.random_range(0..5) == 0 {
                ZERO_INDEX
            } else {
                rng.random_range(0..n)
            }
        })
        .collect();
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &out, -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].gather(&index, out.clone())?, &w), &[a])
}

fn weighted_rows(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let (n, c) = (rng.random_range(1..=5), rng.random_range(1..=4));
    let rows = rng.random_range(1..=5);
    let taps: Vec<Vec<(usize, f64)>> = (0..rows)
        .map(|_| {
            (0..rng.random_range(0..=3))
                .map(|_| (rng.random_range(0..n), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let taps = Rc::new(taps);
    let a = uniform(rng, &[n, c], -1.0, 1.0);
    let w = uniform(rng, &[rows, c], -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].weighted_rows(taps.clone())?, &w), &[a])
}

/// A continuous coordinate in `[-1, n]` whose fractional part avoids the
/// cell boundaries, so some points fall partially outside the grid.
fn sample_coord(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    let cell = rng.random_range(-1..n as i64) as f64;
    cell + rng.random_range(0.1..0.9)
}

fn trilinear_sample(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let g = (
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let c = rng.random_range(1..=3);
    let p = rng.random_range(1..=4);
    let value = uniform(rng, &[g.0 * g.1 * g.2, c], -1.0, 1.0);
    let loc = Tensor::from_fn([p, 3], |i| {
        let n = [g.0, g.1, g.2][i % 3];
        sample_coord(rng, n)
    });
    let w = uniform(rng, &[p, c], -1.0, 1.0);
    gradcheck(
        |t, v| project(t, v[0].trilinear_sample(&v[1], g)?, &w),
        &[value, loc],
    )
}

fn ms_deform_sample(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let heads = rng.random_range(1..=2);
    let dh = rng.random_range(1..=2);
    let points = rng.random_range(1..=2);
    let nl = rng.random_range(1..=2);
    let mut levels = Vec::new();
    let mut offset = 0;
    for _ in 0..nl {
        let l = LevelSpec {
            t: rng.random_range(1..=2),
            h: rng.random_range(1..=3),
            w: rng.random_range(1..=3),
            offset,
        };
        offset += l.rows();
        levels.push(l);
    }
    let q = rng.random_range(1..=3);
    let per_q = heads * nl * points;
    let value = uniform(rng, &[offset, heads * dh], -1.0, 1.0);
    let mut loc = Vec::with_capacity(q * per_q * 3);
    for _ in 0..q {
        for _ in 0..heads {
            for l in &levels {
                for _ in 0..points {
                    loc.push(sample_coord(rng, l.t));
                    loc.push(sample_coord(rng, l.h));
                    loc.push(sample_coord(rng, l.w));
                }
            }
        }
    }
    let loc = Tensor::new([q, per_q * 3], loc)?;
    let attn = uniform(rng, &[q, per_q], 0.0, 1.0);
    let w = uniform(rng, &[q, heads * dh], -1.0, 1.0);
    let levels: Rc<[LevelSpec]> = levels.into();
    gradcheck(
        |t, v| {
            let out = v[0].ms_deform_sample(&v[1], &v[2], levels.clone(), heads, points)?;
            project(t, out, &w)
        },
        &[value, loc, attn],
    )
}

fn logit_shift(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 2, 4);
    let delta = uniform(rng, &s, -3.0, 3.0);
    let base = uniform(rng, &s, 0.05, 0.95);
    let w = uniform(rng, &s, -1.0, 1.0);
    gradcheck(
        |t, v| project(t, v[0].logit_shift(&v[1], 1e-4)?, &w),
        &[delta, base],
    )
}

fn select_rows(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let s = dims(rng, 2, 4);
    let rows: Vec<usize> = (0..rng.random_range(1..=5))
        .map(|_| rng.random_range(0..s[0]))
        .collect();
    let a = uniform(rng, &s, -1.0, 1.0);
    let w = uniform(rng, &[rows.len(), s[1]], -1.0, 1.0);
    gradcheck(|t, v| project(t, v[0].select_rows(&rows)?, &w), &[a])
}

/// Every differentiable primitive with its randomized check.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("maximum", maximum),
        ("minimum", minimum),
        ("neg", neg),
        ("scale", scale),
        ("add_scalar", add_scalar),
        ("one_minus", one_minus),
        ("sigmoid", sigmoid),
        ("relu", relu),
        ("exp", exp),
        ("ln", ln),
        ("sin", sin),
        ("cos", cos),
        ("abs", abs),
        ("sqrt", sqrt),
        ("powf", powf),
        ("clamp", clamp),
        ("clamp_straight_through", clamp_straight_through),
        ("matmul", matmul),
        ("transpose", transpose),
        ("sum", sum),
        ("sum_axis", sum_axis),
        ("mean_axis", mean_axis),
        ("softmax", softmax),
        ("layer_norm", layer_norm),
        ("reshape", reshape),
        ("broadcast_to", broadcast_to),
        ("concat", concat),
        ("narrow", narrow),
        ("gather", gather),
        ("select_rows", select_rows),
        ("weighted_rows", weighted_rows),
        ("trilinear_sample", trilinear_sample),
        ("ms_deform_sample", ms_deform_sample),
        ("logit_shift", logit_shift),
    ]
}
