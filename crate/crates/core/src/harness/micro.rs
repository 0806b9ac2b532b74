//! Tiny configuration for finite-difference checks of the whole model.

use cqvad_tensor::{gradcheck_with, Bound, GradcheckOptions, GradcheckReport, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, LabelMode};
use crate::error::Result;
use crate::geometry::Bbox;
use crate::harness::model::Model;
use crate::matching::{detection_loss, match_clip, GroundTruth, MatchConfig};

/// Every width at most 4, two of everything, 4×4 frames.
pub fn micro_config() -> Config {
    let mut c = Config::default();
    c.d_model = 4;
    c.heads = 2;
    c.levels = 2;
    c.points = 2;
    c.actors = 2;
    c.enc_layers = 1;
    c.dec_layers = 2;
    c.classes = 2;
    c.clip_len = 2;
    c.grid_h = 2;
    c.grid_w = 2;
    c.patch = 2;
    c.backbone_dim = 4;
    c.ffn_dim = 4;
    c.fusion_convs = 1;
    c.cue_size = 1;
    c.max_actors = 2;
    c
}

/// A micro model whose zero-initialized tensors (sampling offsets and
/// weights, box head outputs) are filled with small random values so that
/// every parameter influences the loss. The actor feature stays attached
/// in the classifier so the loss is the function being differentiated.
pub fn micro_model(cfg: &Config, seed: u64) -> Result<Model> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = Model::new(&cfg)?;
    for layer in &mut model.cdl {
        layer.detach_actor = false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.params.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    Ok(model)
}

/// Random frames and a ground truth with boxes well inside the frame.
pub fn micro_sample(cfg: &Config, rng: &mut ChaCha8Rng, actors: usize) -> (Tensor, GroundTruth) {
    let frames = Tensor::from_fn([cfg.clip_len, cfg.frame_h(), cfg.frame_w(), 3], |_| rng.random_range(0.0..1.0));
    let tubes = (0..actors)
        .map(|_| {
            (0..cfg.clip_len)
                .map(|_| {
                    Bbox::new(
                        rng.random_range(0.35..0.65),
                        rng.random_range(0.35..0.65),
                        rng.random_range(0.2..0.5),
                        rng.random_range(0.2..0.5),
                    )
                })
                .collect()
        })
        .collect();
    let labels = (0..actors)
        .map(|_| {
            (0..cfg.clip_len * cfg.classes)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let gt = GroundTruth {
        frames: cfg.clip_len,
        classes: cfg.classes,
        tubes,
        labels,
    };
    (frames, gt)
}

/// Finite-difference check of the detection loss with respect to every
/// parameter tensor, `coords` coordinates per tensor. The assignment is
/// computed once and held fixed. Odd seeds use single-label scoring.
pub fn end_to_end_gradcheck(seed: u64, coords: usize) -> Result<GradcheckReport> {
    let mut cfg = micro_config();
    if seed % 2 == 1 {
        cfg.label_mode = LabelMode::Single;
    }
    let model = micro_model(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actors = rng.random_range(1..=cfg.actors);
    let (frames, gt) = micro_sample(&cfg, &mut rng, actors);
    let mcfg = MatchConfig::from(&cfg);
    let col = match_clip(&gt, &model.infer(&frames)?.pred, &mcfg)?;
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, _, t)| t.clone()).collect();
    let opts = GradcheckOptions {
        step: 1e-6,
        max_coords_per_input: Some(coords),
        seed,
    };
    let report = gradcheck_with(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let run = || -> Result<_> {
                let out = model.forward_with(&p, &tape.constant(&frames))?;
                Ok(detection_loss(&out.pred, &gt, &col, &mcfg)?.total)
            };
            run().map_err(|e| TensorError::Invalid {
                op: "model",
                msg: e.to_string(),
            })
        },
        &inputs,
        &opts,
    )?;
    Ok(report)
}
