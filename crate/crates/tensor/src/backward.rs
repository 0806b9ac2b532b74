use crate::ops::elementwise::BroadcastIndex;
use crate::ops::linalg::{gemm_nt_acc, gemm_tn_acc};
use crate::ops::reduce::axis_split;
use crate::ops::sampling::{sigmoid_grad_from_output, trilinear_corners};
use crate::tape::{accumulate, BinaryKind, Node, Op, UnaryKind, ZERO_INDEX};

/// Pushes the output gradient `g` of node `id` into its parents.
pub(crate) fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |p: usize| nodes[p].needs_grad;
    let len = |p: usize| nodes[p].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let ia = BroadcastIndex::new(&node.shape, &nodes[a].shape);
            let ib = BroadcastIndex::new(&node.shape, &nodes[b].shape);
            if wants(a) {
                accumulate(grads, a, len(a), |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (va[ia.get(i)], vb[ib.get(i)]);
                        ga[ia.get(i)] += gi * match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => y,
                            BinaryKind::Div => 1.0 / y,
                            BinaryKind::Maximum => f64::from(u8::from(x >= y)),
                            BinaryKind::Minimum => f64::from(u8::from(x <= y)),
                        };
                    }
                });
            }
            if wants(b) {
                accumulate(grads, b, len(b), |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (va[ia.get(i)], vb[ib.get(i)]);
                        gb[ib.get(i)] += gi * match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => x,
                            BinaryKind::Div => -x / (y * y),
                            BinaryKind::Maximum => f64::from(u8::from(x < y)),
                            BinaryKind::Minimum => f64::from(u8::from(x > y)),
                        };
                    }
                });
            }
        }
        Op::Unary { kind, x } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let (vx, vy) = (&nodes[x].value, &node.value);
            accumulate(grads, x, len(x), |gx| {
                for i in 0..g.len() {
                    let (xi, yi) = (vx[i], vy[i]);
                    let d = match *kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Sigmoid => sigmoid_grad_from_output(yi),
                        UnaryKind::Relu => f64::from(u8::from(xi > 0.0)),
                        UnaryKind::Exp => yi,
                        UnaryKind::Ln => 1.0 / xi,
                        UnaryKind::Sin => xi.cos(),
                        UnaryKind::Cos => -xi.sin(),
                        UnaryKind::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sqrt => 0.5 / yi,
                        UnaryKind::Powf(p) => p * xi.powf(p - 1.0),
                        UnaryKind::Clamp(lo, hi) => f64::from(u8::from(xi >= lo && xi <= hi)),
                        UnaryKind::ClampStraightThrough(..) => 1.0,
                    };
                    gx[i] += g[i] * d;
                }
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            if wants(a) {
                let vb = nodes[b].value.clone();
                accumulate(grads, a, len(a), |ga| gemm_nt_acc(g, &vb, ga, m, k, n));
            }
            if wants(b) {
                let va = nodes[a].value.clone();
                accumulate(grads, b, len(b), |gb| gemm_tn_acc(&va, g, gb, m, k, n));
            }
        }
        Op::SumAll { x } => {
            if wants(*x) {
                accumulate(grads, *x, len(*x), |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
        }
        Op::SumAxis { x, axis } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let (outer, n, inner) = axis_split(&nodes[x].shape, *axis);
            accumulate(grads, x, len(x), |gx| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let y = &node.value;
            let (outer, n, inner) = axis_split(&node.shape, *axis);
            accumulate(grads, x, len(x), |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, eps } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let vx = &nodes[x].value;
            let d = *node.shape.last().expect("layer_norm input has an axis");
            accumulate(grads, x, len(x), |gx| {
                for r in 0..vx.len() / d {
                    let src = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = src.iter().sum::<f64>() / d as f64;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * rstd).collect();
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] +=
                            rstd / d as f64 * (d as f64 * gr[j] - sum_g - xhat[j] * sum_gx);
                    }
                }
            });
        }
        Op::Reshape { x } => {
            if wants(*x) {
                accumulate(grads, *x, len(*x), |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
        }
        Op::BroadcastTo { x } => {
            let x = *x;
            if wants(x) {
                let idx = BroadcastIndex::new(&node.shape, &nodes[x].shape);
                accumulate(grads, x, len(x), |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[idx.get(i)] += gi;
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut at = 0;
            for &p in parts {
                let n = nodes[p].shape[*axis];
                if wants(p) {
                    accumulate(grads, p, len(p), |gp| {
                        for o in 0..outer {
                            let src = (o * total + at) * inner;
                            for (d, s) in gp[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&g[src..src + n * inner])
                            {
                                *d += s;
                            }
                        }
                    });
                }
                at += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let (outer, full, inner) = axis_split(&nodes[x].shape, *axis);
            let n = node.shape[*axis];
            accumulate(grads, x, len(x), |gx| {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    for (d, s) in gx[dst..dst + n * inner]
                        .iter_mut()
                        .zip(&g[o * n * inner..(o + 1) * n * inner])
                    {
                        *d += s;
                    }
                }
            });
        }
        Op::Gather { x, index } => {
            let x = *x;
            if wants(x) {
                accumulate(grads, x, len(x), |gx| {
                    for (&i, &gi) in index.iter().zip(g) {
                        if i != ZERO_INDEX {
                            gx[i] += gi;
                        }
                    }
                });
            }
        }
        Op::WeightedRows { x, taps } => {
            let x = *x;
            if !wants(x) {
                return;
            }
            let c = nodes[x].shape[1];
            accumulate(grads, x, len(x), |gx| {
                for (r, row_taps) in taps.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    for &(src, w) in row_taps {
                        for (d, s) in gx[src * c..(src + 1) * c].iter_mut().zip(gr) {
                            *d += w * s;
                        }
                    }
                }
            });
        }
        Op::TrilinearSample { value, loc, grid } => {
            let (value, loc) = (*value, *loc);
            let v = &nodes[value].value;
            let l = &nodes[loc].value;
            let c = nodes[value].shape[1];
            let p_n = nodes[loc].shape[0];
            let mut gv = wants(value).then(|| vec![0.0; v.len()]);
            let mut gl = wants(loc).then(|| vec![0.0; l.len()]);
            for pi in 0..p_n {
                let p = [l[pi * 3], l[pi * 3 + 1], l[pi * 3 + 2]];
                let gr = &g[pi * c..(pi + 1) * c];
                let (corners, n) = trilinear_corners(*grid, p);
                for cn in &corners[..n] {
                    let row = &v[cn.row * c..(cn.row + 1) * c];
                    if let Some(gv) = gv.as_mut() {
                        for (d, s) in gv[cn.row * c..(cn.row + 1) * c].iter_mut().zip(gr) {
                            *d += cn.weight * s;
                        }
                    }
                    if let Some(gl) = gl.as_mut() {
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for a in 0..3 {
                            gl[pi * 3 + a] += cn.dweight[a] * dot;
                        }
                    }
                }
            }
            if let Some(gv) = gv {
                accumulate(grads, value, gv.len(), |d| add_into(d, &gv));
            }
            if let Some(gl) = gl {
                accumulate(grads, loc, gl.len(), |d| add_into(d, &gl));
            }
        }
        Op::MsDeformSample {
            value,
            loc,
            attn,
            levels,
            heads,
            points,
        } => {
            let (value, loc, attn) = (*value, *loc, *attn);
            let v = &nodes[value].value;
            let l = &nodes[loc].value;
            let a = &nodes[attn].value;
            let d = nodes[value].shape[1];
            let q_n = nodes[loc].shape[0];
            let (heads, points, nl) = (*heads, *points, levels.len());
            let dh = d / heads;
            let per_q = heads * nl * points;
            let mut gv = wants(value).then(|| vec![0.0; v.len()]);
            let mut gl = wants(loc).then(|| vec![0.0; l.len()]);
            let mut ga = wants(attn).then(|| vec![0.0; a.len()]);
            for q in 0..q_n {
                for m in 0..heads {
                    let gr = &g[q * d + m * dh..q * d + (m + 1) * dh];
                    for (li, lev) in levels.iter().enumerate() {
                        for k in 0..points {
                            let s = q * per_q + (m * nl + li) * points + k;
                            let w = a[s];
                            let p = [l[s * 3], l[s * 3 + 1], l[s * 3 + 2]];
                            let (corners, n) = trilinear_corners((lev.t, lev.h, lev.w), p);
                            for cn in &corners[..n] {
                                let row = lev.offset + cn.row;
                                let src = &v[row * d + m * dh..row * d + (m + 1) * dh];
                                let dot: f64 = src.iter().zip(gr).map(|(x, y)| x * y).sum();
                                if let Some(gv) = gv.as_mut() {
                                    let f = w * cn.weight;
                                    for (dd, ss) in gv[row * d + m * dh..row * d + (m + 1) * dh]
                                        .iter_mut()
                                        .zip(gr)
                                    {
                                        *dd += f * ss;
                                    }
                                }
                                if let Some(ga) = ga.as_mut() {
                                    ga[s] += cn.weight * dot;
                                }
                                if let Some(gl) = gl.as_mut() {
                                    for ax in 0..3 {
                                        gl[s * 3 + ax] += w * cn.dweight[ax] * dot;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gv) = gv {
                accumulate(grads, value, gv.len(), |dst| add_into(dst, &gv));
            }
            if let Some(gl) = gl {
                accumulate(grads, loc, gl.len(), |dst| add_into(dst, &gl));
            }
            if let Some(ga) = ga {
                accumulate(grads, attn, ga.len(), |dst| add_into(dst, &ga));
            }
        }
        Op::LogitShift { delta, base, eps } => {
            let (delta, base) = (*delta, *base);
            let y = &node.value;
            let vb = &nodes[base].value;
            if wants(delta) {
                accumulate(grads, delta, len(delta), |gd| {
                    for i in 0..g.len() {
                        gd[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            if wants(base) {
                accumulate(grads, base, len(base), |gb| {
                    for i in 0..g.len() {
                        let b = vb[i];
                        if b >= *eps && b <= 1.0 - eps {
                            gb[i] += g[i] * y[i] * (1.0 - y[i]) / (b * (1.0 - b));
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
