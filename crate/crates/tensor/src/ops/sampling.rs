//! Grid sampling primitives.
//!
//! Coordinates are continuous grid units in `(t, h, w)` order: integer
//! values land exactly on stored nodes. Corners that fall outside the grid
//! contribute zero (zero padding).

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{LevelSpec, Op, Var};

/// One interpolation corner: flat node index, its weight and the weight's
/// derivative w.r.t. the three coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Corner {
    pub row: usize,
    pub weight: f64,
    pub dweight: [f64; 3],
}

/// The (up to eight) in-range corners of a trilinear read at `p` on a
/// `t × h × w` grid.
pub fn trilinear_corners(grid: (usize, usize, usize), p: [f64; 3]) -> ([Corner; 8], usize) {
    let dims = [grid.0, grid.1, grid.2];
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut out = [Corner::default(); 8];
    let mut n = 0;
    for c in 0..8 {
        let off = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let i = base[a] + off[a] as f64;
            if i < 0.0 || i >= dims[a] as f64 {
                inside = false;
                break;
            }
            idx[a] = i as usize;
        }
        if !inside {
            continue;
        }
        let w1 = |a: usize| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        let dw1 = |a: usize| if off[a] == 1 { 1.0 } else { -1.0 };
        let (wt, wh, ww) = (w1(0), w1(1), w1(2));
        out[n] = Corner {
            row: (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2],
            weight: wt * wh * ww,
            dweight: [dw1(0) * wh * ww, wt * dw1(1) * ww, wt * wh * dw1(2)],
        };
        n += 1;
    }
    (out, n)
}

/// `σ(δ + σ⁻¹(clamp(a, eps, 1 - eps)))`, evaluated without forming the logit
/// so that `δ = 0` returns the clamped base exactly.
pub fn logit_shift_value(delta: f64, a: f64, eps: f64) -> f64 {
    let a = a.clamp(eps, 1.0 - eps);
    if delta > 0.0 {
        a / (a + (1.0 - a) * (-delta).exp())
    } else {
        let e = delta.exp();
        a * e / (a * e + (1.0 - a))
    }
}

impl<'t> Var<'t> {
    /// Trilinear reads of a `t × h × w` grid stored as rows of `self`
    /// (`[t·h·w, C]`) at the points `loc` (`[P, 3]`). Returns `[P, C]`.
    pub fn trilinear_sample(&self, loc: &Var<'t>, grid: (usize, usize, usize)) -> Result<Var<'t>> {
        self.same_tape(loc);
        let vs = self.shape();
        let ls = loc.shape();
        if vs.len() != 2 || vs[0] != grid.0 * grid.1 * grid.2 || ls.len() != 2 || ls[1] != 3 {
            return Err(TensorError::Shape {
                op: "trilinear_sample",
                lhs: vs,
                rhs: ls,
            });
        }
        let c = vs[1];
        let (v, l) = (self.value(), loc.value());
        let mut out = vec![0.0; ls[0] * c];
        for (pi, dst) in out.chunks_mut(c).enumerate() {
            let p = [l[pi * 3], l[pi * 3 + 1], l[pi * 3 + 2]];
            let (corners, n) = trilinear_corners(grid, p);
            for cn in &corners[..n] {
                for (o, x) in dst.iter_mut().zip(&v[cn.row * c..(cn.row + 1) * c]) {
                    *o += cn.weight * x;
                }
            }
        }
        Ok(self.tape.push(
            vec![ls[0], c],
            out,
            Op::TrilinearSample {
                value: self.id,
                loc: loc.id,
                grid,
            },
        ))
    }

    /// Multi-scale, multi-head deformable sampling.
    ///
    /// `self` stacks every level's value rows (`[N, D]`, see [`LevelSpec`]);
    /// `loc` is `[Q, M·L·K·3]` and `attn` is `[Q, M·L·K]`, both laid out
    /// head-major then level then point. Head `m` reads channels
    /// `m·D/M .. (m+1)·D/M`. Output row `q` for head `m` is
    /// `Σ_l Σ_k attn[q,m,l,k] · sample_l(loc[q,m,l,k])`.
    pub fn ms_deform_sample(
        &self,
        loc: &Var<'t>,
        attn: &Var<'t>,
        levels: Rc<[LevelSpec]>,
        heads: usize,
        points: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(loc);
        self.same_tape(attn);
        let vs = self.shape();
        let (ls, as_) = (loc.shape(), attn.shape());
        let nl = levels.len();
        let per_q = heads * nl * points;
        let total_rows: usize = levels.iter().map(|l| l.offset + l.rows()).max().unwrap_or(0);
        let ok = vs.len() == 2
            && heads > 0
            && vs[1] % heads == 0
            && vs[0] >= total_rows
            && ls.len() == 2
            && as_.len() == 2
            && ls[0] == as_[0]
            && ls[1] == per_q * 3
            && as_[1] == per_q;
        if !ok {
            return Err(TensorError::Invalid {
                op: "ms_deform_sample",
                msg: format!(
                    "value {vs:?}, loc {ls:?}, attn {as_:?} for {heads} heads, {nl} levels, {points} points"
                ),
            });
        }
        let (d, q_n) = (vs[1], ls[0]);
        let dh = d / heads;
        let (v, l, a) = (self.value(), loc.value(), attn.value());
        let mut out = vec![0.0; q_n * d];
        for q in 0..q_n {
            for m in 0..heads {
                let dst = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
                for (li, lev) in levels.iter().enumerate() {
                    for k in 0..points {
                        let s = (m * nl + li) * points + k;
                        let w = a[q * per_q + s];
                        let p = &l[(q * per_q + s) * 3..(q * per_q + s) * 3 + 3];
                        let (corners, n) = trilinear_corners((lev.t, lev.h, lev.w), [p[0], p[1], p[2]]);
                        for cn in &corners[..n] {
                            let row = lev.offset + cn.row;
                            let src = &v[row * d + m * dh..row * d + (m + 1) * dh];
                            let f = w * cn.weight;
                            for (o, x) in dst.iter_mut().zip(src) {
                                *o += f * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.tape.push(
            vec![q_n, d],
            out,
            Op::MsDeformSample {
                value: self.id,
                loc: loc.id,
                attn: attn.id,
                levels,
                heads,
                points,
            },
        ))
    }

    /// Additive update in logit space: `σ(self + σ⁻¹(clamp(base)))`.
    /// Elementwise; `self` and `base` must share a shape.
    pub fn logit_shift(&self, base: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(base);
        let (sd, sb) = (self.shape(), base.shape());
        if sd != sb {
            return Err(TensorError::Shape {
                op: "logit_shift",
                lhs: sd,
                rhs: sb,
            });
        }
        let (dv, bv) = (self.value(), base.value());
        let out = dv
            .iter()
            .zip(bv.iter())
            .map(|(&d, &b)| logit_shift_value(d, b, eps))
            .collect();
        Ok(self.tape.push(
            sd,
            out,
            Op::LogitShift {
                delta: self.id,
                base: base.id,
                eps,
            },
        ))
    }
}

/// Scalar logistic derivative helper shared with the backward pass.
pub(crate) fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}
