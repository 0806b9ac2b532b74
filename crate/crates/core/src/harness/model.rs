//! Full detector: backbone, encoder, alternating LDL/CDL decoder, heads.

use cqvad_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cdl::{classification_head, BaselineHead, CdlLayer};
use crate::config::{Classifier, Config, LabelMode};
use crate::encoder::{rescale_to_common, Encoder};
use crate::error::Result;
use crate::harness::backbone::Backbone;
use crate::ldl::{DecoderContext, LdlLayer};
use crate::matching::{PredictionVars, Predictions};
use crate::nn::{glorot, Linear};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub encoder: Encoder,
    /// `[N_a, 4]` initial box logits.
    pub anchors: ParamId,
    /// `[N_c, D]`.
    pub class_queries: ParamId,
    pub ldl: Vec<LdlLayer>,
    pub cdl: Vec<CdlLayer>,
    pub baseline: Option<BaselineHead>,
    pub conf_head: Linear,
}

/// One forward pass. Row order of everything per-row is actor-major
/// (`i·T + t`).
pub struct Output<'t> {
    pub pred: PredictionVars<'t>,
    /// Final class attention maps `[N_c, H·W]` per row.
    pub class_maps: Vec<Tensor>,
    /// Final localization attention maps `[1, H·W]` per row.
    pub loc_maps: Vec<Tensor>,
    /// Box estimate after every decoder layer `[N_a·T, 4]`.
    pub layer_boxes: Vec<Var<'t>>,
}

impl Output<'_> {
    pub fn predictions(&self) -> Predictions {
        let boxes = self.pred.boxes.shape();
        let scores = self.pred.scores.shape();
        let actors = self.pred.confidence.numel();
        Predictions {
            actors,
            frames: boxes[0] / actors,
            classes: scores[1],
            boxes: self.pred.boxes.value().to_vec(),
            scores: self.pred.scores.value().to_vec(),
            confidence: self.pred.confidence.value().to_vec(),
        }
    }
}

impl Model {
    /// Builds a freshly initialized model from `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (d, g) = (cfg.d_model, cfg.init_scale);
        let backbone = Backbone::new(&mut store, cfg, &mut rng);
        let encoder = Encoder::new(
            &mut store, d, cfg.ffn_dim, cfg.heads, cfg.levels, cfg.points, cfg.enc_layers, &mut rng, g,
        );
        let anchors = store.add("anchors", anchor_init(&mut rng, cfg.actors));
        let class_queries = store.add("class_queries", glorot(&mut rng, cfg.classes, d, g));
        let ldl = (0..cfg.dec_layers)
            .map(|n| LdlLayer::new(&mut store, &format!("ldl{n}"), d, cfg.ffn_dim, cfg.heads, cfg.levels, &mut rng, g))
            .collect();
        let (cdl, baseline) = match cfg.classifier {
            Classifier::Cdl => (
                (0..cfg.dec_layers)
                    .map(|n| {
                        CdlLayer::new(
                            &mut store,
                            &format!("cdl{n}"),
                            d,
                            cfg.ffn_dim,
                            cfg.heads,
                            cfg.fusion,
                            cfg.fusion_convs,
                            &mut rng,
                            g,
                        )
                    })
                    .collect(),
                None,
            ),
            Classifier::Baseline => (
                Vec::new(),
                Some(BaselineHead::new(&mut store, "baseline", d, cfg.classes, &mut rng, g)),
            ),
        };
        let conf_head = Linear::new(&mut store, "conf_head", d, 1, &mut rng, g);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            backbone,
            encoder,
            anchors,
            class_queries,
            ldl,
            cdl,
            baseline,
            conf_head,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape)
    }

    /// Forward pass with parameters bound as gradient leaves.
    pub fn forward<'t>(&self, tape: &'t Tape, frames: &Tensor) -> Result<(Bound<'t>, Output<'t>)> {
        let p = self.params.bind(tape);
        let out = self.forward_with(&p, &tape.constant(frames))?;
        Ok((p, out))
    }

    /// Forward pass without gradient bookkeeping for parameters.
    pub fn infer(&self, frames: &Tensor) -> Result<InferOutput> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward_with(&p, &tape.constant(frames))?;
        Ok(InferOutput {
            pred: out.predictions(),
            class_maps: out.class_maps,
            loc_maps: out.loc_maps,
        })
    }

    pub fn forward_with<'t>(&self, p: &Bound<'t>, frames: &Var<'t>) -> Result<Output<'t>> {
        let cfg = &self.cfg;
        let tape = frames.tape();
        let (n_a, t_n, n_c, d) = (cfg.actors, cfg.clip_len, cfg.classes, cfg.d_model);
        let (h, w) = (cfg.grid_h, cfg.grid_w);

        let (x, levels) = self.backbone.forward(p, frames)?;
        let enc = self.encoder.forward(p, &x, &levels)?;
        let ctx = DecoderContext::new(rescale_to_common(&enc, &levels, (t_n, h, w))?, t_n, h, w)?;

        let frame_major: Vec<usize> = (0..t_n).flat_map(|_| 0..n_a).collect();
        let mut boxes = p.get(self.anchors).sigmoid().select_rows(&frame_major)?;
        let mut ae = tape.constant(&Tensor::zeros([t_n * n_a, d]));
        let queries = p.get(self.class_queries);
        let mut q_rows: Vec<Var<'t>> = Vec::new();
        let mut class_maps = vec![Tensor::zeros([0]); t_n * n_a];
        let mut loc_maps = Vec::new();
        let mut layer_boxes = Vec::with_capacity(self.ldl.len());
        let mut f_last = ae;
        let zero_pos = tape.constant(&Tensor::zeros([1, d]));

        for (n, ldl) in self.ldl.iter().enumerate() {
            let out = ldl.forward(p, &ctx, &boxes, &ae, n_a, cfg.aggregation)?;
            if let Some(cdl) = self.cdl.get(n) {
                let shared = if n == 0 { Some(cdl.class_self_attention(p, &queries)?) } else { None };
                let mut next = Vec::with_capacity(t_n * n_a);
                for r in 0..t_n * n_a {
                    let q_sa = match shared {
                        Some(q) => q,
                        None => cdl.class_self_attention(p, &q_rows[r])?,
                    };
                    let pos = if cfg.cdl_actor_pos { out.pos_query.rows(r, 1)? } else { zero_pos };
                    let c = cdl.forward_actor(
                        p,
                        &q_sa,
                        &out.f.rows(r, 1)?,
                        &out.context[r],
                        &pos,
                        &ctx.pos[r / n_a],
                        h,
                        w,
                    )?;
                    next.push(c.queries);
                    class_maps[r] = c.map;
                }
                q_rows = next;
            }
            boxes = out.boxes;
            ae = out.ae;
            f_last = out.f;
            loc_maps = out.maps;
            layer_boxes.push(boxes);
        }

        let actor_major: Vec<usize> = (0..n_a).flat_map(|i| (0..t_n).map(move |t| t * n_a + i)).collect();
        let conf_rows = self.conf_head.forward(p, &f_last)?.reshape(vec![t_n, n_a])?;
        let confidence = conf_rows.mean_axis(0)?.sigmoid();

        let mut score_rows = Vec::with_capacity(t_n * n_a);
        for &r in &actor_major {
            let conf_i = confidence.gather(&[r % n_a], [1])?;
            let s = match &self.baseline {
                None => classification_head(&q_rows[r], cfg.label_mode, &conf_i)?,
                Some(head) => {
                    let memory = ctx.level_mean(r / n_a)?;
                    let b = head.forward(p, &f_last.rows(r, 1)?, &memory)?;
                    class_maps[r] = b.map;
                    match cfg.label_mode {
                        LabelMode::Multi => b.logits.sigmoid(),
                        LabelMode::Single => b.logits.softmax(1)?.mul(&conf_i.reshape(vec![1, 1])?)?,
                    }
                }
            };
            score_rows.push(s);
        }
        let scores = Var::concat(&score_rows, 0)?;
        let to_actor = |v: &Var<'t>| v.select_rows(&actor_major);
        let layer_boxes = layer_boxes.iter().map(to_actor).collect::<std::result::Result<Vec<_>, _>>()?;
        let pred = PredictionVars {
            boxes: *layer_boxes.last().expect("at least one decoder layer"),
            scores,
            confidence,
        };
        let reorder = |maps: Vec<Tensor>| actor_major.iter().map(|&r| maps[r].clone()).collect();
        debug_assert_eq!(scores.shape(), vec![n_a * t_n, n_c]);
        Ok(Output {
            pred,
            class_maps: reorder(class_maps),
            loc_maps: reorder(loc_maps),
            layer_boxes,
        })
    }
}

/// Plain results of an inference pass.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub pred: Predictions,
    pub class_maps: Vec<Tensor>,
    pub loc_maps: Vec<Tensor>,
}

/// Spread-out initial boxes: centers uniform in the middle of the frame,
/// sizes around a quarter of it, stored as logits.
fn anchor_init(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    use rand::Rng;
    let logit = |v: f64| (v / (1.0 - v)).ln();
    Tensor::from_fn([n, 4], |k| {
        let v = if k % 4 < 2 { rng.random_range(0.2..0.8) } else { rng.random_range(0.2..0.35) };
        logit(v)
    })
}
