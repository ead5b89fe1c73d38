use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saccade::cost::{count_params, ModelSpec};
use saccade::data::{read_saccade_file, write_saccade_file};
use saccade::harness::{
    compare, emit_heatmap_pgm, emit_selection_pgm, evaluate, load_dataset, obtain_targets, render_table,
    run_experiment, targets_by_id, Checkpoint, ExperimentConfig, ModelKind, RunPaths,
};
use saccade::rollout::{heat_from_attention, topk_indices};
use saccade::sanvit::IndexSource;
use saccade::vit::vit_forward;
use saccade::{Error, Result};

#[derive(Parser)]
#[command(name = "saccade", version, about = "Saccade attention networks: teacher, selector, reduced-attention student")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). For `compare`, a JSON array of configs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the CIFAR-100 binaries (train.bin, test.bin).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher ViT.
    TrainTeacher(Common),
    /// Run the teacher over every image and write top-k rollout targets.
    BuildTargets(Common),
    /// Train the patch selector on saccade targets.
    TrainSelector(Common),
    /// Train the reduced-attention student.
    TrainStudent(Common),
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Saccade targets, for selector metrics or ground-truth students.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Rollout heatmap and top-k mask for one image.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_id: u32,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Parameter and FLOP report for a config.
    Cost(Common),
    /// Train and evaluate several configs and tabulate them.
    Compare(Common),
    /// Write the desk-scale configs for the three-model comparison.
    DeskConfigs(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(require(&c.config, "config")?)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(c: &Common, allowed: &[ModelKind]) -> Result<()> {
    let cfg = load_config(c)?;
    if !allowed.contains(&cfg.model) {
        return Err(Error::Config(format!("this command cannot train a {:?} config", cfg.model)));
    }
    let out = require(&c.out, "out")?;
    let data = load_dataset(&cfg.dataset, c.data.as_deref())?;
    let paths = RunPaths {
        base_dir: PathBuf::from("."),
        out_dir: out.to_path_buf(),
    };
    let result = run_experiment(&cfg, &data, &paths)?;
    write_json(&result.summary, None)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTeacher(c) => train(&c, &[ModelKind::TeacherVit, ModelKind::SimpleVit]),
        Command::TrainSelector(c) => train(&c, &[ModelKind::Selector]),
        Command::TrainStudent(c) => train(&c, &[ModelKind::Sanvit]),
        Command::BuildTargets(c) => {
            let mut cfg = load_config(&c)?;
            cfg.targets = None;
            let out = require(&c.out, "out")?;
            let data = load_dataset(&cfg.dataset, c.data.as_deref())?;
            let records = obtain_targets(&cfg, &data, Path::new("."))?;
            write_saccade_file(out, cfg.vit.num_patches(), cfg.k, &records)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            targets,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&ckpt.config.dataset, common.data.as_deref())?;
            let needs_targets = ckpt.config.model == ModelKind::Selector
                || (ckpt.config.model == ModelKind::Sanvit && ckpt.config.index_source == IndexSource::GroundTruth);
            let targets = match (&targets, needs_targets) {
                (Some(p), _) => Some(targets_by_id(read_saccade_file(p)?.records)),
                (None, true) => Some(targets_by_id(obtain_targets(&ckpt.config, &data, Path::new("."))?)),
                (None, false) => None,
            };
            let m = evaluate(&ckpt, &data.test, targets.as_ref())?;
            write_json(&m, common.out.as_deref())
        }
        Command::Rollout {
            common,
            checkpoint,
            image_id,
            k,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            if !matches!(ckpt.config.model, ModelKind::TeacherVit | ModelKind::SimpleVit) {
                return Err(Error::Config("rollout needs a ViT checkpoint".into()));
            }
            let data = load_dataset(&ckpt.config.dataset, common.data.as_deref())?;
            let rec = data
                .all()
                .find(|r| r.id == image_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no image with id {image_id}")))?;
            let (logits, stack) = vit_forward(&rec.pixels, &ckpt.params, &ckpt.config.vit)?;
            let heat = heat_from_attention(&stack)?;
            let picked = topk_indices(&heat.heat, k)?;
            let out = require(&common.out, "out")?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            emit_heatmap_pgm(&heat, &out.join("heat.pgm"))?;
            emit_selection_pgm(heat.grid, &picked, &out.join("topk.pgm"))?;
            let summary = serde_json::json!({
                "image_id": image_id,
                "label": rec.label,
                "logits": logits.data(),
                "grid": heat.grid,
                "heat": heat.heat,
                "topk": picked,
            });
            write_json(&summary, Some(&out.join("rollout.json")))
        }
        Command::Cost(c) => {
            let cfg = load_config(&c)?;
            let spec = match cfg.model {
                ModelKind::TeacherVit | ModelKind::SimpleVit => ModelSpec::Vit(cfg.vit.clone()),
                ModelKind::Selector => ModelSpec::Selector(cfg.selector_config()?),
                ModelKind::Sanvit => ModelSpec::Sanvit {
                    student: cfg.sanvit_config(),
                    selector: match cfg.index_source {
                        IndexSource::San => Some(cfg.selector_config()?),
                        IndexSource::GroundTruth => None,
                    },
                },
            };
            write_json(&count_params(&spec)?, c.out.as_deref())
        }
        Command::Compare(c) => {
            let path = require(&c.config, "config")?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut configs: Vec<ExperimentConfig> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for cfg in &mut configs {
                cfg.validate()?;
                if let Some(seed) = c.seed {
                    cfg.seed = seed;
                }
            }
            let out = require(&c.out, "out")?;
            let report = compare(&configs, c.data.as_deref(), out)?;
            print!("{}", render_table(&report));
            Ok(())
        }
        Command::DeskConfigs(c) => {
            let out = require(&c.out, "out")?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let configs: Vec<ExperimentConfig> = [
                ModelKind::TeacherVit,
                ModelKind::Selector,
                ModelKind::Sanvit,
                ModelKind::SimpleVit,
            ]
            .into_iter()
            .map(ExperimentConfig::desk)
            .collect();
            for cfg in &configs {
                write_json(cfg, Some(&out.join(format!("{}.json", cfg.name))))?;
            }
            write_json(&configs, Some(&out.join("compare.json")))
        }
    }
}
