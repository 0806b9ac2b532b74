//! Small strided feature extractor standing in for a video backbone.
//!
//! Level 1 embeds non-overlapping `patch × patch` pixel blocks; each further
//! level merges 2×2 spatial neighbours (and pairs of frames while the
//! temporal extent is even). Every level is projected to the model width.

use cqvad_tensor::{Bound, LevelSpec, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::stack_levels;
use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub merges: Vec<Linear>,
    pub proj: Vec<Linear>,
    pub patch: usize,
    /// `(t, h, w)` of every level, finest first.
    pub extents: Vec<(usize, usize, usize)>,
}

/// Level extents for a configuration, finest first.
pub fn level_extents(cfg: &Config) -> Vec<(usize, usize, usize)> {
    let mut out = vec![(cfg.clip_len, cfg.grid_h, cfg.grid_w)];
    for _ in 1..cfg.levels {
        let (t, h, w) = *out.last().expect("at least one level");
        let t = if t % 2 == 0 { t / 2 } else { t };
        out.push((t, h / 2, w / 2));
    }
    out
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &Config, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.backbone_dim;
        let g = cfg.init_scale;
        let extents = level_extents(cfg);
        let patch_embed = Linear::new(store, "backbone.patch", 3 * cfg.patch * cfg.patch, c, rng, g);
        let merges = extents
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let dt = w[0].0 / w[1].0;
                Linear::new(store, &format!("backbone.merge{}", l + 1), 4 * dt * c, c, rng, g)
            })
            .collect();
        let proj = (0..extents.len())
            .map(|l| Linear::new(store, &format!("backbone.proj{l}"), c, cfg.d_model, rng, g))
            .collect();
        Self {
            patch_embed,
            merges,
            proj,
            patch: cfg.patch,
            extents,
        }
    }

    /// Patch rows `[t·h·w, 3·p²]` of frames `[T, H0, W0, 3]`, ordered
    /// `(dy, dx, channel)` inside a patch.
    fn patch_index(&self, frame_shape: &[usize]) -> Vec<usize> {
        let (t, h0, w0) = (frame_shape[0], frame_shape[1], frame_shape[2]);
        let p = self.patch;
        let (h, w) = (h0 / p, w0 / p);
        let mut index = Vec::with_capacity(t * h0 * w0 * 3);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..3 {
                                index.push(((ti * h0 + y * p + dy) * w0 + x * p + dx) * 3 + ch);
                            }
                        }
                    }
                }
            }
        }
        index
    }

    /// Rows of the coarser level gathering `(dt, dy, dx, channel)` blocks.
    fn merge_index(src: (usize, usize, usize), dst: (usize, usize, usize), c: usize) -> Vec<usize> {
        let dt_n = src.0 / dst.0;
        let mut index = Vec::with_capacity(src.0 * src.1 * src.2 * c);
        for t in 0..dst.0 {
            for y in 0..dst.1 {
                for x in 0..dst.2 {
                    for dt in 0..dt_n {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let row = ((t * dt_n + dt) * src.1 + 2 * y + dy) * src.2 + 2 * x + dx;
                                index.extend((0..c).map(|ch| row * c + ch));
                            }
                        }
                    }
                }
            }
        }
        index
    }

    /// Stacked level features `[N, D]` and their layout.
    pub fn forward<'t>(&self, p: &Bound<'t>, frames: &Var<'t>) -> Result<(Var<'t>, Vec<LevelSpec>)> {
        let shape = frames.shape();
        let (t, h, w) = self.extents[0];
        if shape != [t, h * self.patch, w * self.patch, 3] {
            return Err(Error::Format(format!(
                "frames {shape:?} do not match the configured clip {t}x{}x{}x3",
                h * self.patch,
                w * self.patch
            )));
        }
        let cols = 3 * self.patch * self.patch;
        let patches = frames.gather(&self.patch_index(&shape), [t * h * w, cols])?;
        let mut feat = self.patch_embed.forward(p, &patches)?.relu();
        let c = self.patch_embed.d_out;
        let mut outs = vec![self.proj[0].forward(p, &feat)?];
        for (l, merge) in self.merges.iter().enumerate() {
            let (src, dst) = (self.extents[l], self.extents[l + 1]);
            let rows = dst.0 * dst.1 * dst.2;
            let idx = Self::merge_index(src, dst, c);
            let blocks = feat.gather(&idx, [rows, idx.len() / rows])?;
            feat = merge.forward(p, &blocks)?.relu();
            outs.push(self.proj[l + 1].forward(p, &feat)?);
        }
        Ok((Var::concat(&outs, 0)?, stack_levels(&self.extents)))
    }
}

/// Frames as a constant on the tape.
pub fn frames_var<'t>(tape: &'t cqvad_tensor::Tape, frames: &Tensor) -> Var<'t> {
    tape.constant(frames)
}
