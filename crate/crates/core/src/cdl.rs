//! Classifying decoder layer and the shared-map baseline head.

use cqvad_tensor::{Bound, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::attention::MultiHeadAttention;
use crate::config::{Fusion, LabelMode};
use crate::error::Result;
use crate::nn::{glorot, Conv3x3, LayerNorm, Linear, Mlp};

#[derive(Clone, Debug)]
pub struct CdlLayer {
    pub self_attn: MultiHeadAttention,
    pub norm_sa: LayerNorm,
    /// 1×1 projection of `[x | f]` in concat fusion.
    pub fuse_in: Option<Linear>,
    pub convs: Vec<Conv3x3>,
    pub cross_attn: MultiHeadAttention,
    pub norm_ca: LayerNorm,
    pub ffn: Mlp,
    /// Cut the actor feature from the graph before fusion.
    pub detach_actor: bool,
}

/// Refined class queries `[N_c, D]` and the head-averaged class attention
/// map `[N_c, H·W]`.
pub struct Classified<'t> {
    pub queries: Var<'t>,
    pub map: Tensor,
}

impl CdlLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        fusion: Fusion,
        convs: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), d, d, d, d, heads, rng, gain),
            norm_sa: LayerNorm::new(store, &n("norm_sa"), d),
            fuse_in: match fusion {
                Fusion::Sum => None,
                Fusion::Concat => Some(Linear::new(store, &n("fuse_in"), 2 * d, d, rng, gain)),
            },
            convs: (0..convs)
                .map(|i| Conv3x3::new(store, &n(&format!("conv{i}")), d, d, rng, gain))
                .collect(),
            cross_attn: MultiHeadAttention::new(store, &n("cross_attn"), 2 * d, 2 * d, d, d, heads, rng, gain),
            norm_ca: LayerNorm::new(store, &n("norm_ca"), d),
            ffn: Mlp::new(store, &n("ffn"), (d, ffn, d), rng, gain),
            detach_actor: true,
        }
    }

    /// Self-attention among the class queries with residual and norm.
    pub fn class_self_attention<'t>(&self, p: &Bound<'t>, q: &Var<'t>) -> Result<Var<'t>> {
        let a = self.self_attn.forward(p, q, q, q)?;
        self.norm_sa.forward(p, &q.add(&a.out)?)
    }

    /// Combines the actor feature `[1, D]` with its context `[H·W, D]` and
    /// runs the convolution stack. The actor feature is cut from the graph
    /// on entry unless `detach_actor` is off.
    pub fn fuse_actor_context<'t>(
        &self,
        p: &Bound<'t>,
        f: &Var<'t>,
        x: &Var<'t>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t>> {
        let f = if self.detach_actor { f.detach() } else { *f };
        let mut z = match &self.fuse_in {
            None => x.add(&f)?,
            Some(lin) => {
                let fb = f.broadcast_to(x.shape())?;
                lin.forward(p, &Var::concat(&[*x, fb], 1)?)?
            }
        };
        for (k, conv) in self.convs.iter().enumerate() {
            z = conv.forward(p, &z, h, w)?;
            if k + 1 < self.convs.len() {
                z = z.relu();
            }
        }
        Ok(z)
    }

    /// Class-specific cross-attention: rows `[q_c | P_i]` against keys
    /// `[z | P_V]`, values `x`, then residual, norm and FFN.
    #[allow(clippy::too_many_arguments)]
    pub fn classify<'t>(
        &self,
        p: &Bound<'t>,
        q: &Var<'t>,
        pos_query: &Var<'t>,
        z: &Var<'t>,
        pos_grid: &Var<'t>,
        x: &Var<'t>,
    ) -> Result<Classified<'t>> {
        let n_c = q.shape()[0];
        let d = pos_query.shape()[1];
        let pq = pos_query.broadcast_to(vec![n_c, d])?;
        let query = Var::concat(&[*q, pq], 1)?;
        let key = Var::concat(&[*z, *pos_grid], 1)?;
        let a = self.cross_attn.forward(p, &query, &key, x)?;
        let refined = self.norm_ca.forward(p, &q.add(&a.out)?)?;
        let queries = refined.add(&self.ffn.forward(p, &refined)?)?;
        Ok(Classified { queries, map: a.map })
    }

    /// One full pass for a single actor and frame, starting from queries
    /// that already went through [`class_self_attention`](Self::class_self_attention).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_actor<'t>(
        &self,
        p: &Bound<'t>,
        q_sa: &Var<'t>,
        f: &Var<'t>,
        x: &Var<'t>,
        pos_query: &Var<'t>,
        pos_grid: &Var<'t>,
        h: usize,
        w: usize,
    ) -> Result<Classified<'t>> {
        let z = self.fuse_actor_context(p, f, x, h, w)?;
        self.classify(p, q_sa, pos_query, &z, pos_grid, x)
    }
}

/// Class scores `[1, N_c]` from final-layer queries `[N_c, D]`.
pub fn classification_head<'t>(q: &Var<'t>, mode: LabelMode, confidence: &Var<'t>) -> Result<Var<'t>> {
    let n_c = q.shape()[0];
    let pooled = q.mean_axis(1)?.reshape(vec![1, n_c])?;
    Ok(match mode {
        LabelMode::Multi => pooled.sigmoid(),
        LabelMode::Single => pooled.softmax(1)?.mul(&confidence.reshape(vec![1, 1])?)?,
    })
}

/// Single attention map from the actor feature against the context,
/// followed by a per-class linear read-out of the pooled feature. The map
/// cannot depend on the class.
#[derive(Clone, Debug)]
pub struct BaselineHead {
    pub wq: Linear,
    pub wk: Linear,
    /// `[D, N_c]`; column `c` produces logit `c`.
    pub cls: ParamId,
}

pub struct BaselineOutput<'t> {
    pub logits: Var<'t>,
    pub map: Tensor,
}

impl BaselineHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, classes: usize, rng: &mut ChaCha8Rng, gain: f64) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng, gain),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng, gain),
            cls: store.add(format!("{name}.cls"), glorot(rng, d, classes, gain)),
        }
    }

    /// `f` is `[1, D]`, `context` is `[H·W, D]`. Returns logits `[1, N_c]`
    /// and the shared map replicated once per class.
    pub fn forward<'t>(&self, p: &Bound<'t>, f: &Var<'t>, context: &Var<'t>) -> Result<BaselineOutput<'t>> {
        let d = f.shape()[1];
        let q = self.wq.forward(p, f)?;
        let k = self.wk.forward(p, context)?;
        let a = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (d as f64).sqrt())
            .softmax(1)?;
        let pooled = a.matmul(context)?;
        let cls = p.get(self.cls);
        let logits = pooled.matmul(&cls)?;
        let n_c = cls.shape()[1];
        let row = a.value();
        let mut map = Vec::with_capacity(n_c * row.len());
        for _ in 0..n_c {
            map.extend_from_slice(&row);
        }
        Ok(BaselineOutput {
            logits,
            map: Tensor::new([n_c, row.len()], map)?,
        })
    }
}
