//! Optimizer, schedule and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cqvad_tensor::Tape;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate_model, EvalReport};
use crate::harness::model::Model;
use crate::harness::synthetic::{eval_set, training_clip, Clip};
use crate::harness::{checkpoint, thread_pool};
use crate::matching::{detection_loss, match_clip, MatchConfig};

/// Learning rate at 0-based `step`: linear warmup from `warmup_start_lr`,
/// then the base rate multiplied by `lr_decay` at every milestone passed.
pub fn learning_rate(cfg: &Config, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        let a = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_start_lr + (cfg.lr - cfg.warmup_start_lr) * a;
    }
    let passed = cfg.milestones.iter().filter(|&&m| step >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Decoupled-weight-decay Adam state.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update with learning rate `lr`. Matrices are decayed, vectors
    /// are not.
    pub fn update(&mut self, model: &mut Model, grads: &[Option<Vec<f64>>], lr: f64) {
        let cfg = &model.cfg;
        let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, t) in model.params.tensors_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let decay = if t.shape().len() >= 2 { wd } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + eps) + decay * *x;
                *x -= lr * step;
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}

/// Loss values of one batch, averaged over its clips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub loss: f64,
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub conf: f64,
}

/// Loss and parameter gradients of one clip.
pub fn clip_gradients(model: &Model, clip: &Clip, mcfg: &MatchConfig) -> Result<(LossValues, Vec<Option<Vec<f64>>>)> {
    let tape = Tape::new();
    let (p, out) = model.forward(&tape, &clip.frames_tensor())?;
    let col = match_clip(&clip.gt, &out.predictions(), mcfg)?;
    let terms = detection_loss(&out.pred, &clip.gt, &col, mcfg)?;
    let values = LossValues {
        loss: terms.total.item(),
        class: terms.class,
        bbox: terms.bbox,
        giou: terms.giou,
        conf: terms.conf,
    };
    let grads = tape.backward(terms.total)?;
    Ok((values, p.collect(&grads)))
}

/// Where training clips come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// The seeded synthetic stream, optionally with a fixed actor count.
    Synthetic { actors: Option<usize> },
    /// A finite list, cycled in order.
    Clips(Vec<Clip>),
}

impl DataSource {
    fn clip(&self, cfg: &Config, index: u64) -> Clip {
        match self {
            DataSource::Synthetic { actors } => training_clip(cfg, index, *actors),
            DataSource::Clips(c) => c[index as usize % c.len()].clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    /// Metrics, checkpoints and diagnostics go here when set.
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    /// Held-out clips; the configured synthetic set when `None`.
    pub eval: Option<Vec<Clip>>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            out_dir: None,
            data: DataSource::Synthetic { actors: None },
            eval: None,
        }
    }
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsLine {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_class: f64,
    pub loss_box: f64,
    pub loss_giou: f64,
    pub loss_conf: f64,
    pub grad_norm: f64,
    pub fmap: Option<f64>,
    pub wall_time: f64,
}

pub struct TrainResult {
    pub model: Model,
    pub report: EvalReport,
    /// JSON lines in the order written.
    pub metrics: Vec<String>,
}

/// Drops the `wall_time` field from a metrics line.
pub fn mask_wall_time(line: &str) -> String {
    match line.find(",\"wall_time\":") {
        Some(k) => format!("{}}}", &line[..k]),
        None => line.to_string(),
    }
}

#[derive(Serialize)]
struct AbortSnapshot<'a> {
    step: usize,
    reason: &'a str,
    lr: f64,
    clip_indices: Vec<u64>,
    losses: Vec<LossValues>,
    config: String,
}

fn abort(out: Option<&Path>, snapshot: AbortSnapshot<'_>) -> Error {
    if let Some(dir) = out {
        let path = dir.join("abort_snapshot.json");
        match serde_json::to_string_pretty(&snapshot) {
            Ok(text) => {
                if let Err(e) = fs::write(&path, text) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not serialize abort snapshot: {e}"),
        }
    }
    Error::NumericalAbort {
        step: snapshot.step,
        reason: snapshot.reason.to_string(),
    }
}

/// Trains `model` in place for `model.cfg.steps` steps.
pub fn train_model(mut model: Model, opts: &TrainOptions) -> Result<TrainResult> {
    let cfg = model.cfg.clone();
    let mcfg = MatchConfig::from(&cfg);
    let pool = thread_pool(opts.threads)?;
    let eval_clips = match &opts.eval {
        Some(c) => c.clone(),
        None => eval_set(&cfg, None),
    };
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.cfg"), cfg.to_text())?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut adam = AdamW::new(&model);
    let mut metrics = Vec::new();
    let start = Instant::now();
    let mut report = None;

    for step in 0..cfg.steps {
        let lr = learning_rate(&cfg, step);
        let indices: Vec<u64> = (0..cfg.batch_size).map(|b| (step * cfg.batch_size + b) as u64).collect();
        let results: Vec<Result<(LossValues, Vec<Option<Vec<f64>>>)>> = pool.install(|| {
            indices
                .par_iter()
                .map(|&k| clip_gradients(&model, &opts.data.clip(&cfg, k), &mcfg))
                .collect()
        });
        let mut losses = Vec::with_capacity(results.len());
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        for r in results {
            let (l, g) = match r {
                Ok(v) => v,
                Err(Error::NonFiniteCost { .. }) => {
                    return Err(abort(
                        opts.out_dir.as_deref(),
                        AbortSnapshot {
                            step,
                            reason: "non-finite matching cost",
                            lr,
                            clip_indices: indices,
                            losses,
                            config: cfg.to_text(),
                        },
                    ))
                }
                Err(e) => return Err(e),
            };
            losses.push(l);
            for (acc, g) in sum.iter_mut().zip(g) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for v in sum.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= inv;
        }
        let mean = |f: fn(&LossValues) -> f64| losses.iter().map(f).sum::<f64>() * inv;
        let batch = LossValues {
            loss: mean(|l| l.loss),
            class: mean(|l| l.class),
            bbox: mean(|l| l.bbox),
            giou: mean(|l| l.giou),
            conf: mean(|l| l.conf),
        };
        let finite_grads = sum.iter().flatten().flat_map(|g| g.iter()).all(|v| v.is_finite());
        if !batch.loss.is_finite() || !finite_grads {
            let reason = if batch.loss.is_finite() { "non-finite gradient" } else { "non-finite loss" };
            return Err(abort(
                opts.out_dir.as_deref(),
                AbortSnapshot {
                    step,
                    reason,
                    lr,
                    clip_indices: indices,
                    losses,
                    config: cfg.to_text(),
                },
            ));
        }
        let grad_norm = clip_grad_norm(&mut sum, cfg.grad_clip);
        adam.update(&mut model, &sum, lr);

        let last = step + 1 == cfg.steps;
        let fmap = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let r = evaluate_model(&model, &eval_clips, opts.threads)?;
            let f = r.fmap;
            report = Some(r);
            Some(f)
        } else {
            None
        };
        if last || fmap.is_some() || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let line = MetricsLine {
                step,
                lr,
                loss: batch.loss,
                loss_class: batch.class,
                loss_box: batch.bbox,
                loss_giou: batch.giou,
                loss_conf: batch.conf,
                grad_norm,
                fmap,
                wall_time: start.elapsed().as_secs_f64(),
            };
            let text = serde_json::to_string(&line)?;
            log::info!("{text}");
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{text}")?;
                w.flush()?;
            }
            metrics.push(text);
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&model, step + 1, &dir.join(format!("step{}.ckpt", step + 1)))?;
            }
        }
    }
    let report = match report {
        Some(r) => r,
        None => evaluate_model(&model, &eval_clips, opts.threads)?,
    };
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&model, cfg.steps, &dir.join("final.ckpt"))?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(TrainResult { model, report, metrics })
}

/// Builds a model from `cfg` and trains it.
pub fn train(cfg: &Config, opts: &TrainOptions) -> Result<TrainResult> {
    train_model(Model::new(cfg)?, opts)
}
