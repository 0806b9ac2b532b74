use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cqvad::harness::ablation::ablation_suite;
use cqvad::harness::checkpoint;
use cqvad::harness::dataset;
use cqvad::harness::dump::{dump_attention, dump_overlays};
use cqvad::harness::eval::evaluate_model;
use cqvad::harness::micro::end_to_end_gradcheck;
use cqvad::harness::model::Model;
use cqvad::harness::synthetic::{clip_rng, eval_set, generate_clip, Clip};
use cqvad::harness::train::{train, DataSource, TrainOptions};
use cqvad::{Config, Error, Result};

const PRIMITIVE_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "cqvad", version, about = "Train and inspect the class-query action detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Configuration override, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the synthetic stream or a clip file.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out clips and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the whole model.
    Gradcheck {
        /// Number of consecutive seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Export class attention maps of one clip as PGM files.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write color overlays.
        #[arg(long)]
        overlay: bool,
    },
    /// Train paired variants and report their differences.
    Ablate,
    /// Write synthetic clips to a file.
    GenData {
        #[arg(long)]
        count: usize,
        /// Fixed actor count per clip.
        #[arg(long)]
        actors: Option<usize>,
    },
}

fn usage_error(msg: &str) -> Error {
    let usage = Cli::command().render_usage();
    Error::config(format!("{msg}\n\n{usage}"))
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let path = cli.config.as_ref().ok_or_else(|| usage_error("--config is required"))?;
    let mut cfg = Config::from_file(path)?;
    adjust(cli, &mut cfg)?;
    Ok(cfg)
}

fn adjust(cli: &Cli, cfg: &mut Config) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()
}

fn echo_config(out: Option<&Path>, cfg: &Config) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.cfg"), cfg.to_text())?;
    }
    Ok(())
}

/// Loads a checkpoint and applies command-line adjustments that leave the
/// parameter layout intact.
fn load_model(cli: &Cli, path: &Path) -> Result<Model> {
    let (mut model, _) = checkpoint::load(path)?;
    let mut cfg = model.cfg.clone();
    adjust(cli, &mut cfg)?;
    let fresh = Model::new(&cfg)?;
    let same = fresh.params.len() == model.params.len()
        && fresh
            .params
            .iter()
            .zip(model.params.iter())
            .all(|(a, b)| a.1 == b.1 && a.2.shape() == b.2.shape());
    if !same {
        return Err(Error::config("overrides change the parameter layout of the checkpoint"));
    }
    model.cfg = cfg;
    Ok(model)
}

fn held_out(cfg: &Config, data: Option<&PathBuf>) -> Result<Vec<Clip>> {
    match data {
        Some(p) => dataset::read(p),
        None => Ok(eval_set(cfg, None)),
    }
}

fn gradcheck(first: u64, seeds: u64) -> Result<bool> {
    let mut ok = true;
    for (name, case) in cqvad_tensor::suite::primitive_cases() {
        let mut worst: f64 = 0.0;
        for s in first..first + seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            worst = worst.max(case(&mut rng)?.max_rel_error);
        }
        let pass = worst < PRIMITIVE_TOL;
        ok &= pass;
        println!("{name:<24} {worst:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    let mut worst: f64 = 0.0;
    for s in first..first + seeds {
        worst = worst.max(end_to_end_gradcheck(s, 3)?.max_rel_error);
    }
    let pass = worst < END_TO_END_TOL;
    ok &= pass;
    println!("{:<24} {worst:.3e} {}", "end_to_end", if pass { "ok" } else { "FAIL" });
    Ok(ok)
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Train { data } => {
            let cfg = effective_config(cli)?;
            let data = match data {
                Some(p) => DataSource::Clips(dataset::read(p)?),
                None => DataSource::Synthetic { actors: None },
            };
            let opts = TrainOptions {
                threads: cli.threads,
                out_dir: Some(out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("run"))),
                data,
                eval: None,
            };
            let result = train(&cfg, &opts)?;
            println!("{}", serde_json::to_string_pretty(&result.report)?);
        }
        Command::Eval { checkpoint, data } => {
            let model = load_model(cli, checkpoint)?;
            echo_config(out, &model.cfg)?;
            let clips = held_out(&model.cfg, data.as_ref())?;
            let report = evaluate_model(&model, &clips, cli.threads)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                fs::write(dir.join("eval.json"), &text)?;
            }
            println!("{text}");
        }
        Command::Gradcheck { seeds } => {
            if !gradcheck(cli.seed.unwrap_or(0), *seeds)? {
                return Err(Error::config("gradient check outside tolerance"));
            }
        }
        Command::DumpAttn {
            checkpoint,
            clip,
            data,
            overlay,
        } => {
            let model = load_model(cli, checkpoint)?;
            let clips = held_out(&model.cfg, data.as_ref())?;
            let c = clips
                .get(*clip)
                .ok_or_else(|| Error::config(format!("clip {clip} out of range ({} clips)", clips.len())))?;
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("attn"));
            echo_config(Some(&dir), &model.cfg)?;
            let inferred = model.infer(&c.frames_tensor())?;
            let (h, w) = (model.cfg.grid_h, model.cfg.grid_w);
            let files = dump_attention(&dir, &inferred, h, w)?;
            if *overlay {
                dump_overlays(&dir, c, &inferred, h, w)?;
            }
            println!("wrote {} maps to {}", files.len(), dir.display());
        }
        Command::Ablate => {
            let cfg = effective_config(cli)?;
            echo_config(out, &cfg)?;
            let report = ablation_suite(&cfg, cli.threads, out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenData { count, actors } => {
            let cfg = effective_config(cli)?;
            let dir = out.ok_or_else(|| usage_error("--out is required"))?;
            echo_config(Some(dir), &cfg)?;
            let clips: Vec<Clip> = (0..*count as u64)
                .map(|k| generate_clip(&cfg, &mut clip_rng(cfg.seed, k), *actors))
                .collect();
            let path = dir.join("clips.bin");
            dataset::write(&path, &clips)?;
            println!("wrote {count} clips to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CQVAD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::NumericalAbort { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
