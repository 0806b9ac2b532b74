//! Localizing decoder layer.
//!
//! Actor state is kept frame-major: row `t·N_a + i` holds actor `i` at
//! frame `t`. Weights are shared across frames.

use cqvad_tensor::{Bound, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::attention::{box_codes, positional_embed_3d, BoxModulator, MultiHeadAttention};
use crate::config::Aggregation;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear, Mlp};

/// Box clamp used before the logit in box refinement.
pub const REFINE_EPS: f64 = 1e-4;

/// Encoded levels resized to the common grid, with the grid embedding.
pub struct DecoderContext<'t> {
    /// One `[T·H·W, D]` matrix per level.
    pub levels: Vec<Var<'t>>,
    /// Per frame, the levels flattened to `[L, H·W·D]`.
    pub stacked: Vec<Var<'t>>,
    /// Per frame, the grid embedding `[H·W, D]`.
    pub pos: Vec<Var<'t>>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl<'t> DecoderContext<'t> {
    pub fn new(levels: Vec<Var<'t>>, t: usize, h: usize, w: usize) -> Result<Self> {
        let tape = levels[0].tape();
        let d = levels[0].shape()[1];
        let hw = h * w;
        let grid = tape.constant(&positional_embed_3d(t, h, w, d));
        let mut stacked = Vec::with_capacity(t);
        let mut pos = Vec::with_capacity(t);
        for ti in 0..t {
            let rows = levels
                .iter()
                .map(|l| l.rows(ti * hw, hw)?.reshape(vec![1, hw * d]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            stacked.push(Var::concat(&rows, 0)?);
            pos.push(grid.rows(ti * hw, hw)?);
        }
        Ok(Self {
            levels,
            stacked,
            pos,
            t,
            h,
            w,
            d,
        })
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Per-frame mean over levels, `[H·W, D]`.
    pub fn level_mean(&self, frame: usize) -> Result<Var<'t>> {
        let n = self.levels.len();
        let tape = self.stacked[frame].tape();
        let w = tape.constant(&Tensor::full([1, n], 1.0 / n as f64));
        Ok(w.matmul(&self.stacked[frame])?
            .reshape(vec![self.hw(), self.d])?)
    }
}

/// Everything one LDL pass produces, frame-major.
pub struct LdlOutput<'t> {
    /// Refined boxes `[T·N_a, 4]`.
    pub boxes: Var<'t>,
    /// Actor embeddings after the FFN `[T·N_a, D]`.
    pub ae: Var<'t>,
    /// Actor features before the FFN `[T·N_a, D]`.
    pub f: Var<'t>,
    /// Modulated positional queries `[T·N_a, D]`.
    pub pos_query: Var<'t>,
    /// Level weights `[T·N_a, L]`.
    pub omega: Var<'t>,
    /// Actor-specific context `[H·W, D]` per row.
    pub context: Vec<Var<'t>>,
    /// Cross-attention weights `[1, H·W]` per row.
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LdlLayer {
    pub pos_sa: Linear,
    pub self_attn: MultiHeadAttention,
    pub norm_sa: LayerNorm,
    pub modulator: BoxModulator,
    pub level_mlp: Mlp,
    pub cross_attn: MultiHeadAttention,
    pub norm_ca: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
    pub box_head: Mlp,
}

impl LdlLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            pos_sa: Linear::new(store, &n("pos_sa"), 2 * d, d, rng, gain),
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), d, d, d, d, heads, rng, gain),
            norm_sa: LayerNorm::new(store, &n("norm_sa"), d),
            modulator: BoxModulator::new(store, &n("modulator"), d, rng, gain),
            level_mlp: Mlp::new(store, &n("level_mlp"), (d, d, levels), rng, gain),
            cross_attn: MultiHeadAttention::new(store, &n("cross_attn"), 2 * d, 2 * d, d, d, heads, rng, gain),
            norm_ca: LayerNorm::new(store, &n("norm_ca"), d),
            ffn: Mlp::new(store, &n("ffn"), (d, ffn, d), rng, gain),
            norm_ffn: LayerNorm::new(store, &n("norm_ffn"), d),
            box_head: Mlp::zero_output(store, &n("box_head"), (d, d, 4), rng, gain),
        }
    }

    /// Self-attention among the actors of each frame; queries and keys
    /// carry the embedded box.
    pub fn actor_self_attention<'t>(
        &self,
        p: &Bound<'t>,
        ae: &Var<'t>,
        boxes: &Var<'t>,
        actors: usize,
    ) -> Result<Var<'t>> {
        let d = ae.shape()[1];
        let frames = ae.shape()[0] / actors;
        let codes = box_codes(boxes, d)?;
        let pos = self.pos_sa.forward(p, &Var::concat(&codes, 1)?)?;
        let q = ae.add(&pos)?;
        let mut outs = Vec::with_capacity(frames);
        for t in 0..frames {
            let qt = q.rows(t * actors, actors)?;
            let vt = ae.rows(t * actors, actors)?;
            outs.push(self.self_attn.forward(p, &qt, &qt, &vt)?.out);
        }
        self.norm_sa.forward(p, &ae.add(&Var::concat(&outs, 0)?)?)
    }

    /// Level weights `[rows, L]` for each actor embedding.
    pub fn level_weights<'t>(&self, p: &Bound<'t>, ae: &Var<'t>, mode: Aggregation) -> Result<Var<'t>> {
        match mode {
            Aggregation::ActorSpecific => Ok(self.level_mlp.forward(p, ae)?.softmax(1)?),
            Aggregation::MeanPool => {
                let rows = ae.shape()[0];
                let l = self.level_mlp.l2.d_out;
                Ok(ae.tape().constant(&Tensor::full([rows, l], 1.0 / l as f64)))
            }
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        ctx: &DecoderContext<'t>,
        boxes: &Var<'t>,
        ae: &Var<'t>,
        actors: usize,
        aggregation: Aggregation,
    ) -> Result<LdlOutput<'t>> {
        let (d, hw) = (ctx.d, ctx.hw());
        let ae1 = self.actor_self_attention(p, ae, boxes, actors)?;
        let pos_query = self.modulator.forward(p, boxes, ae)?;
        let omega = self.level_weights(p, &ae1, aggregation)?;
        let mut context = Vec::with_capacity(ctx.t * actors);
        let mut outs = Vec::with_capacity(ctx.t * actors);
        let mut maps = Vec::with_capacity(ctx.t * actors);
        for t in 0..ctx.t {
            let mixed = omega.rows(t * actors, actors)?.matmul(&ctx.stacked[t])?;
            for i in 0..actors {
                let r = t * actors + i;
                let x = mixed.rows(i, 1)?.reshape(vec![hw, d])?;
                let q = Var::concat(&[ae1.rows(r, 1)?, pos_query.rows(r, 1)?], 1)?;
                let k = Var::concat(&[x, ctx.pos[t]], 1)?;
                let a = self.cross_attn.forward(p, &q, &k, &x)?;
                outs.push(a.out);
                maps.push(a.map);
                context.push(x);
            }
        }
        let f = self.norm_ca.forward(p, &ae1.add(&Var::concat(&outs, 0)?)?)?;
        let ae2 = self.norm_ffn.forward(p, &f.add(&self.ffn.forward(p, &f)?)?)?;
        let boxes = self.box_head.forward(p, &ae2)?.logit_shift(boxes, REFINE_EPS)?;
        Ok(LdlOutput {
            boxes,
            ae: ae2,
            f,
            pos_query,
            omega,
            context,
            maps,
        })
    }
}
