use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sfn_core::baselines::{e2e_vision_rl, spiral_search, SpiralConfig};
use sfn_core::bench::{
    emit_report, occlusion_study, parse_delimited, parse_policies, run_sweep, Axis,
    OcclusionConfig, PolicyName, PolicySet, ReportFormat, RunManifest, SweepSpec,
};
use sfn_core::datagen::{
    generate_dataset, load_split, DatasetManifest, ErrorRanges, GenerateConfig, Split,
};
use sfn_core::perception::orientation::{
    evaluate_orientation, train_orientation, OriTrainConfig, ORI_KIND,
};
use sfn_core::perception::position::{evaluate_position, train_position, PosTrainConfig, POS_KIND};
use sfn_core::perception::segmentation::{
    evaluate_segmentation, train_segmentation, SegTrainConfig, SEG_KIND,
};
use sfn_core::perception::{OriModel, PosModel, SegModel};
use sfn_core::pipeline::{run_pipeline, PipelineConfig};
use sfn_core::policy::{train_rl, OcclusionSpec, Perception, RlConfig, RunConfig, Variant};
use sfn_core::render::CameraModel;
use sfn_core::shapes::{resolve_ids, shape_by_id};
use sfn_core::sim::{Env, EnvConfig};

#[derive(Parser)]
#[command(name = "sfn", about = "Seam-filling peg-in-hole toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled dataset.
    GenData {
        #[arg(long, default_value = "all")]
        shapes: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        clearance: f64,
    },
    /// Train the segmentation network.
    TrainSeg(TrainArgs),
    /// Train the position heatmap network.
    TrainPos(TrainArgs),
    /// Train the orientation network.
    TrainOri(TrainArgs),
    /// Evaluate a perception checkpoint on a dataset split.
    EvalPerception {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train an SFMS or MFMS controller.
    TrainRl {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value = "seen")]
        shapes: String,
        #[arg(long, default_value_t = 4000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of episodes that start with the default occluder.
        #[arg(long, default_value_t = 0.5)]
        occlusion_prob: f64,
        /// Directory holding pos.ckpt and ori.ckpt.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the end-to-end vision baseline.
    TrainE2e {
        #[arg(long, default_value = "seen")]
        shapes: String,
        #[arg(long, default_value_t = 8000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a controller and log its episodes.
    RunPolicy {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 12)]
        trials: usize,
        /// `none`, `default`, `half:<k>`, `full:<k>` or `rect:<k>:<c0>,<r0>,<c1>,<r1>`.
        #[arg(long, default_value = "none")]
        occlusion: String,
        #[arg(long, default_value_t = 1.0)]
        clearance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a baseline controller.
    RunBaseline {
        #[arg(long)]
        name: String,
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 12)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        clearance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory holding e2e.ckpt for the vision baseline.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark protocol.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Full staged run; finished stages are reused.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        /// JSON pipeline configuration; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCmd {
    Sweep {
        #[arg(long)]
        axis: Axis,
        #[arg(long, default_value = "all")]
        shapes: String,
        #[arg(long, default_value = "sfss,sfms,mfms")]
        policies: String,
        #[arg(long, default_value_t = 12)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Occlusion {
        #[arg(long, default_value = "sfss,sfms,mfms")]
        policies: String,
        #[arg(long, default_value = "all")]
        shapes: String,
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        clearance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Report {
        /// Delimited table written by a sweep.
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.json")
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => bail!("unknown split `{s}`"),
    })
}

fn load_data(dir: &Path, split: Split) -> Result<Vec<sfn_core::datagen::LabeledSample>> {
    let m = DatasetManifest::load(dir)?;
    Ok(load_split(dir, &m, split)?)
}

fn perception(models: &Path) -> Result<Perception> {
    Ok(Perception {
        pos: PosModel::load(&models.join(sfn_core::bench::POS_FILE))?,
        ori: OriModel::load(&models.join(sfn_core::bench::ORI_FILE))?,
    })
}

fn env_for(shape: &str, clearance: f64, seed: u64) -> Result<Env> {
    let mut cfg = EnvConfig::new(shape_by_id(shape, clearance)?);
    cfg.seed = seed;
    Ok(Env::new(cfg)?)
}

fn summarize(records: &[sfn_core::policy::EpisodeRecord]) -> serde_json::Value {
    let succ = records.iter().filter(|r| r.success).count();
    let steps: Vec<f64> = records.iter().map(|r| r.len() as f64).collect();
    let (mean, std) = sfn_core::bench::mean_std(&steps);
    serde_json::json!({ "trials": records.len(), "successes": succ, "mean_steps": mean, "std_steps": std })
}

fn write_records(out: Option<&Path>, records: &[sfn_core::policy::EpisodeRecord]) -> Result<()> {
    if let Some(p) = out {
        let mut text = String::new();
        for r in records {
            text.push_str(&r.to_jsonl()?);
        }
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            shapes,
            count,
            seed,
            out,
            noise,
            clearance,
        } => {
            let ids = resolve_ids(&shapes)?;
            let specs = ids
                .iter()
                .map(|i| shape_by_id(i, clearance))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = GenerateConfig {
                count,
                ranges: ErrorRanges::default(),
                seed,
                noise,
                camera: CameraModel::default(),
            };
            let m = generate_dataset(&specs, &cfg, &out)?;
            println!(
                "{} samples written to {} (manifest {})",
                m.samples.len(),
                out.display(),
                m.hash()?
            );
        }
        Cmd::TrainSeg(a) => {
            let train = load_data(&a.data, Split::Train)?;
            let val = load_data(&a.data, Split::Val)?;
            let cfg = SegTrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                ..Default::default()
            };
            let (model, report) = train_segmentation(&train, &val, &cfg)?;
            model.save(&a.out, a.epochs)?;
            write_json(&metrics_path(&a.out), &report)?;
            println!("val MeanIoU {:.4}", report.val_mean_iou);
        }
        Cmd::TrainPos(a) => {
            let train = load_data(&a.data, Split::Train)?;
            let val = load_data(&a.data, Split::Val)?;
            let cfg = PosTrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                ..Default::default()
            };
            let (model, report) = train_position(&train, &val, &cfg)?;
            model.save(&a.out, a.epochs)?;
            write_json(&metrics_path(&a.out), &report)?;
            println!("val within ±1 cell {:.4}", report.val.within_one);
        }
        Cmd::TrainOri(a) => {
            let train = load_data(&a.data, Split::Train)?;
            let val = load_data(&a.data, Split::Val)?;
            let cfg = OriTrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                ..Default::default()
            };
            let (model, report) = train_orientation(&train, &val, &cfg)?;
            model.save(&a.out, a.epochs)?;
            write_json(&metrics_path(&a.out), &report)?;
            println!("val top-1 {:.4}", report.val.top1);
        }
        Cmd::EvalPerception {
            checkpoint,
            data,
            split,
        } => {
            let samples = load_data(&data, parse_split(&split)?)?;
            let raw: serde_json::Value = serde_json::from_slice(
                &fs::read(&checkpoint)
                    .with_context(|| format!("reading {}", checkpoint.display()))?,
            )?;
            let kind = raw
                .get("kind")
                .and_then(|k| k.as_str())
                .unwrap_or_default()
                .to_string();
            drop(raw);
            let out = match kind.as_str() {
                SEG_KIND => {
                    serde_json::json!({ "mean_iou": evaluate_segmentation(&SegModel::load(&checkpoint)?, &samples)? })
                }
                POS_KIND => serde_json::to_value(evaluate_position(
                    &PosModel::load(&checkpoint)?,
                    &samples,
                )?)?,
                ORI_KIND => serde_json::to_value(evaluate_orientation(
                    &OriModel::load(&checkpoint)?,
                    &samples,
                )?)?,
                other => bail!(
                    "{} is not a perception checkpoint (kind `{other}`)",
                    checkpoint.display()
                ),
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::TrainRl {
            variant,
            shapes,
            episodes,
            seed,
            occlusion_prob,
            models,
            out,
        } => {
            let specs = resolve_ids(&shapes)?
                .iter()
                .map(|i| shape_by_id(i, 1.0))
                .collect::<Result<Vec<_>, _>>()?;
            let p = perception(&models)?;
            let (model, curve) = train_rl(
                &specs,
                &p,
                &RlConfig {
                    occlusion: Some(OcclusionSpec::default()),
                    occlusion_prob,
                    ..RlConfig::new(variant, episodes, seed)
                },
            )?;
            model.save(&out, episodes)?;
            write_json(&metrics_path(&out), &curve)?;
            let n = curve.success.len();
            println!(
                "final-decile success {:.3}",
                curve.success_rate(n - (n / 10).max(1), n)
            );
        }
        Cmd::TrainE2e {
            shapes,
            episodes,
            seed,
            out,
        } => {
            let specs = resolve_ids(&shapes)?
                .iter()
                .map(|i| shape_by_id(i, 1.0))
                .collect::<Result<Vec<_>, _>>()?;
            let (model, curve) =
                e2e_vision_rl(&specs, &RlConfig::new(Variant::Sfms, episodes, seed))?;
            model.save(&out, episodes)?;
            write_json(&metrics_path(&out), &curve)?;
        }
        Cmd::RunPolicy {
            variant,
            shape,
            trials,
            occlusion,
            clearance,
            seed,
            models,
            out,
        } => {
            let set = PolicySet::load(&models)?;
            let name: PolicyName = variant.to_string().parse()?;
            let occ = match occlusion.as_str() {
                "none" => None,
                s => Some(s.parse::<OcclusionSpec>()?),
            };
            let mut env = env_for(&shape, clearance, seed)?;
            let run = RunConfig {
                occlusion: occ,
                ..RunConfig::default()
            };
            let records = (0..trials)
                .map(|t| {
                    set.run(
                        name,
                        &mut env,
                        sfn_core::datagen::derive_seed(seed, &[t as u64]),
                        &run,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_records(out.as_deref(), &records)?;
            println!("{}", serde_json::to_string_pretty(&summarize(&records))?);
        }
        Cmd::RunBaseline {
            name,
            shape,
            trials,
            clearance,
            seed,
            models,
            out,
        } => {
            let mut env = env_for(&shape, clearance, seed)?;
            let seeds: Vec<u64> = (0..trials)
                .map(|t| sfn_core::datagen::derive_seed(seed, &[t as u64]))
                .collect();
            let records = match name.as_str() {
                "spiral" => seeds
                    .iter()
                    .map(|&s| {
                        env.reset(s)?;
                        let mut r = spiral_search(&env, &SpiralConfig::default())?;
                        r.seed = s;
                        Ok(r)
                    })
                    .collect::<Result<Vec<_>, sfn_core::SfnError>>()?,
                "e2e-vision" => {
                    let dir = models.context("--models is required for e2e-vision")?;
                    let set = PolicySet::load(&dir)?;
                    seeds
                        .iter()
                        .map(|&s| {
                            set.run(PolicyName::E2eVision, &mut env, s, &RunConfig::default())
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
                other => bail!("unknown baseline `{other}`"),
            };
            write_records(out.as_deref(), &records)?;
            println!("{}", serde_json::to_string_pretty(&summarize(&records))?);
        }
        Cmd::Bench { cmd } => bench(cmd)?,
        Cmd::Pipeline {
            out,
            config,
            smoke,
            seed,
        } => {
            let mut cfg = match (config, smoke) {
                (Some(p), _) => serde_json::from_str(&fs::read_to_string(&p)?)?,
                (None, true) => PipelineConfig::smoke(0),
                (None, false) => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = run_pipeline(&out, &cfg, &mut |m| eprintln!("[pipeline] {m}"))?;
            println!(
                "seg val MeanIoU {:.4}; pos ±1 {:.3}; ori top-1 {:.3}; occlusion ordering {:?}/{:?}",
                r.seg.val_mean_iou,
                r.pos.val.within_one,
                r.ori.val.top1,
                r.occlusion.ordering_success,
                r.occlusion.ordering_steps
            );
        }
    }
    Ok(())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Sweep {
            axis,
            shapes,
            policies,
            trials,
            seed,
            workers,
            models,
            out,
        } => {
            let mut spec = SweepSpec::new(
                axis,
                resolve_ids(&shapes)?,
                parse_policies(&policies)?,
                seed,
            );
            spec.trials_per_cell = trials;
            spec.workers = workers;
            let set = PolicySet::load(&models)?;
            let (table, _) = run_sweep(&spec, &set, Some(&out))?;
            RunManifest::new(&format!("bench sweep --axis {axis}"), &spec, Some(&models))?
                .write(&out)?;
            print!("{}", emit_report(&table, ReportFormat::TextTable));
        }
        BenchCmd::Occlusion {
            policies,
            shapes,
            spec,
            trials,
            clearance,
            seed,
            workers,
            models,
            out,
        } => {
            let cfg = OcclusionConfig {
                spec: spec.parse()?,
                policies: parse_policies(&policies)?,
                shapes: resolve_ids(&shapes)?,
                clearance,
                trials,
                k_max: 20,
                seed,
                workers,
            };
            let set = PolicySet::load(&models)?;
            let (report, records) = occlusion_study(&cfg, &set)?;
            write_records(Some(&out.join("episodes.jsonl")), &records)?;
            write_json(&out.join("report.json"), &report)?;
            RunManifest::new("bench occlusion", &cfg, Some(&models))?.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        BenchCmd::Report { table, format, out } => {
            let t = parse_delimited(&fs::read_to_string(&table)?)?;
            let fmt: ReportFormat = format.parse()?;
            let text = emit_report(&t, fmt);
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
