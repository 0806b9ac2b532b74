//! Multi-scale deformable encoder over spatio-temporal feature levels.
//!
//! All levels are stacked row-wise in one `[N, D]` matrix; a [`LevelSpec`]
//! records each level's extent and first row. Every element of every level
//! acts as a query whose reference point is its own normalized cell center.

use std::rc::Rc;

use cqvad_tensor::{Bound, LevelSpec, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::attention::positional_embed_3d;
use crate::error::Result;
use crate::nn::{glorot, LayerNorm, Linear, Mlp};

/// Builds stacked level specs from `(t, h, w)` extents.
pub fn stack_levels(extents: &[(usize, usize, usize)]) -> Vec<LevelSpec> {
    let mut offset = 0;
    extents
        .iter()
        .map(|&(t, h, w)| {
            let l = LevelSpec { t, h, w, offset };
            offset += l.rows();
            l
        })
        .collect()
}

pub fn total_rows(levels: &[LevelSpec]) -> usize {
    levels.iter().map(LevelSpec::rows).sum()
}

/// Normalized `(t, h, w)` cell centers for every stacked row.
pub fn reference_points(levels: &[LevelSpec]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(total_rows(levels));
    for l in levels {
        for t in 0..l.t {
            for h in 0..l.h {
                for w in 0..l.w {
                    out.push([
                        (t as f64 + 0.5) / l.t as f64,
                        (h as f64 + 0.5) / l.h as f64,
                        (w as f64 + 0.5) / l.w as f64,
                    ]);
                }
            }
        }
    }
    out
}

/// Maps a normalized point to continuous grid coordinates of `level`,
/// where integer values sit on cell centers.
pub fn to_level_coords(p: [f64; 3], level: &LevelSpec) -> [f64; 3] {
    [
        p[0] * level.t as f64 - 0.5,
        p[1] * level.h as f64 - 0.5,
        p[2] * level.w as f64 - 0.5,
    ]
}

/// Deformable attention across levels: per head, K sampled points per
/// level around each query's reference point, mixed by weights normalized
/// jointly over all levels and points of that head.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let samples = heads * levels * points;
        Self {
            value: Linear::new(store, &format!("{name}.value"), d, d, rng, gain),
            offsets: Linear::zeros(store, &format!("{name}.offsets"), d, samples * 3),
            weights: Linear::zeros(store, &format!("{name}.weights"), d, samples),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng, gain),
            heads,
            levels,
            points,
        }
    }

    /// `query` is `[Q, D]` with reference points `refs`; `input` stacks the
    /// levels described by `levels`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        query: &Var<'t>,
        refs: &[[f64; 3]],
        input: &Var<'t>,
        levels: &Rc<[LevelSpec]>,
    ) -> Result<Var<'t>> {
        let tape = query.tape();
        let q_n = query.shape()[0];
        let samples = self.heads * self.levels * self.points;
        let mut base = Vec::with_capacity(q_n * samples * 3);
        for r in refs {
            for _ in 0..self.heads {
                for l in levels.iter() {
                    let c = to_level_coords(*r, l);
                    for _ in 0..self.points {
                        base.extend_from_slice(&c);
                    }
                }
            }
        }
        let base = tape.constant(&Tensor::new([q_n, samples * 3], base)?);
        let loc = base.add(&self.offsets.forward(p, query)?)?;
        let attn = self
            .weights
            .forward(p, query)?
            .reshape(vec![q_n * self.heads, self.levels * self.points])?
            .softmax(1)?
            .reshape(vec![q_n, samples])?;
        let value = self.value.forward(p, input)?;
        let sampled = value.ms_deform_sample(&loc, &attn, levels.clone(), self.heads, self.points)?;
        self.out.forward(p, &sampled)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        Self {
            attn: DeformableAttention::new(store, &format!("{name}.attn"), d, heads, levels, points, rng, gain),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), (d, ffn, d), rng, gain),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: &Var<'t>,
        pos: &Var<'t>,
        refs: &[[f64; 3]],
        levels: &Rc<[LevelSpec]>,
    ) -> Result<Var<'t>> {
        let q = x.add(pos)?;
        let a = self.attn.forward(p, &q, refs, x, levels)?;
        let x = self.norm1.forward(p, &x.add(&a)?)?;
        let f = self.ffn.forward(p, &x)?;
        self.norm2.forward(p, &x.add(&f)?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub level_embed: ParamId,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let level_embed = store.add("encoder.level_embed", glorot(rng, levels, d, gain));
        let layers = (0..n_layers)
            .map(|i| {
                EncoderLayer::new(store, &format!("encoder.{i}"), d, ffn, heads, levels, points, rng, gain)
            })
            .collect();
        Self { layers, level_embed }
    }

    /// Grid embedding plus learned level embedding for every stacked row.
    pub fn positions<'t>(&self, p: &Bound<'t>, levels: &[LevelSpec], d: usize) -> Result<Var<'t>> {
        let tape = p.get(self.level_embed).tape();
        let mut grid = Vec::with_capacity(total_rows(levels) * d);
        let mut index = Vec::with_capacity(total_rows(levels) * d);
        for (li, l) in levels.iter().enumerate() {
            grid.extend_from_slice(positional_embed_3d(l.t, l.h, l.w, d).data());
            for _ in 0..l.rows() {
                index.extend((0..d).map(|c| li * d + c));
            }
        }
        let n = total_rows(levels);
        let grid = tape.constant(&Tensor::new([n, d], grid)?);
        let lvl = p.get(self.level_embed).gather(&index, [n, d])?;
        Ok(grid.add(&lvl)?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, levels: &[LevelSpec]) -> Result<Var<'t>> {
        if self.layers.is_empty() {
            return Ok(*x);
        }
        let d = x.shape()[1];
        let pos = self.positions(p, levels, d)?;
        let refs = reference_points(levels);
        let shared: Rc<[LevelSpec]> = levels.into();
        let mut x = *x;
        for layer in &self.layers {
            x = layer.forward(p, &x, &pos, &refs, &shared)?;
        }
        Ok(x)
    }
}

/// 1-D linear resampling taps from `n_src` to `n_dst` cells with aligned
/// cell centers and edge clamping.
pub fn resample_taps(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_dst)
        .map(|j| {
            let s = ((j as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
            let i0 = s.floor() as usize;
            let frac = s - i0 as f64;
            if frac > 0.0 && i0 + 1 < n_src {
                vec![(i0, 1.0 - frac), (i0 + 1, frac)]
            } else {
                vec![(i0, 1.0)]
            }
        })
        .collect()
}

/// Trilinear resize of every stacked level to the common `(t, h, w)` grid.
/// Returns one `[t·h·w, D]` matrix per level.
pub fn rescale_to_common<'t>(
    x: &Var<'t>,
    levels: &[LevelSpec],
    target: (usize, usize, usize),
) -> Result<Vec<Var<'t>>> {
    let (tt, th, tw) = target;
    levels
        .iter()
        .map(|l| {
            let (at, ah, aw) = (
                resample_taps(l.t, tt),
                resample_taps(l.h, th),
                resample_taps(l.w, tw),
            );
            let mut taps = Vec::with_capacity(tt * th * tw);
            for t in &at {
                for h in &ah {
                    for w in &aw {
                        let mut row = Vec::with_capacity(t.len() * h.len() * w.len());
                        for &(it, wt) in t {
                            for &(ih, wh) in h {
                                for &(iw, ww) in w {
                                    let src = l.offset + (it * l.h + ih) * l.w + iw;
                                    row.push((src, wt * wh * ww));
                                }
                            }
                        }
                        taps.push(row);
                    }
                }
            }
            Ok(x.weighted_rows(Rc::new(taps))?)
        })
        .collect()
}
