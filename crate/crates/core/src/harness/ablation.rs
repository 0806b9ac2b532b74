//! Paired ablation runs on two-actor clips.

use std::path::Path;

use serde::Serialize;

use crate::config::{Aggregation, Config, Fusion};
use crate::error::Result;
use crate::harness::eval::EvalReport;
use crate::harness::synthetic::eval_set;
use crate::harness::train::{train, DataSource, TrainOptions};

/// Published full-scale mAP with and without the actor positional query
/// in the classifier, for side-by-side reading only.
pub const REFERENCE_WITH_ACTOR_POS: f64 = 33.5;
pub const REFERENCE_WITHOUT_ACTOR_POS: f64 = 31.7;

/// The single-flag variants compared against `base`.
pub fn variants(base: &Config) -> Vec<(&'static str, Config)> {
    let mut no_pos = base.clone();
    no_pos.cdl_actor_pos = !base.cdl_actor_pos;
    let mut agg = base.clone();
    agg.aggregation = match base.aggregation {
        Aggregation::ActorSpecific => Aggregation::MeanPool,
        Aggregation::MeanPool => Aggregation::ActorSpecific,
    };
    let mut fusion = base.clone();
    fusion.fusion = match base.fusion {
        Fusion::Sum => Fusion::Concat,
        Fusion::Concat => Fusion::Sum,
    };
    vec![("cdl_actor_pos", no_pos), ("aggregation", agg), ("fusion", fusion)]
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub flag: &'static str,
    pub value: String,
    pub config_diff: Vec<&'static str>,
    pub report: EvalReport,
    /// Variant f-mAP minus base f-mAP.
    pub fmap_delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Reference {
    pub with_actor_pos: f64,
    pub without_actor_pos: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub base: EvalReport,
    pub variants: Vec<VariantResult>,
    pub reference: Reference,
}

fn value_of(cfg: &Config, key: &str) -> String {
    cfg.entries()
        .into_iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
        .unwrap_or_default()
}

/// Trains the base configuration and each variant with the same seed on
/// two-actor clips and scores them on a shared two-actor held-out set.
pub fn ablation_suite(base: &Config, threads: usize, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut base = base.clone();
    base.max_actors = base.max_actors.max(2).min(base.actors);
    let held_out = eval_set(&base, Some(2));
    let run = |cfg: &Config, name: &str| {
        let opts = TrainOptions {
            threads,
            out_dir: out_dir.map(|d| d.join(name)),
            data: DataSource::Synthetic { actors: Some(2) },
            eval: Some(held_out.clone()),
        };
        log::info!("ablation: training {name}");
        train(cfg, &opts).map(|r| r.report)
    };
    let base_report = run(&base, "base")?;
    let mut variants_out = Vec::new();
    for (flag, cfg) in variants(&base) {
        let report = run(&cfg, flag)?;
        variants_out.push(VariantResult {
            flag,
            value: value_of(&cfg, flag),
            config_diff: base.diff(&cfg),
            fmap_delta: report.fmap - base_report.fmap,
            report,
        });
    }
    let report = AblationReport {
        base: base_report,
        variants: variants_out,
        reference: Reference {
            with_actor_pos: REFERENCE_WITH_ACTOR_POS,
            without_actor_pos: REFERENCE_WITHOUT_ACTOR_POS,
        },
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
