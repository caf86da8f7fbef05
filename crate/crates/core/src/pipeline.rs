//! End-to-end run: data, perception training, controller training and the
//! benchmark protocol. Every stage writes its checkpoint and a metrics file
//! under the run directory and is skipped when those already exist.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{e2e_vision_rl, E2eVision};
use crate::bench::{
    occlusion_study, run_sweep, Axis, OcclusionConfig, OcclusionReport, PolicyName, PolicySet,
    ResultTable, RunManifest, SweepSpec, E2E_FILE, MFMS_FILE, ORI_FILE, POS_FILE, SEG_FILE,
    SFMS_FILE,
};
use crate::datagen::{
    generate_samples, split_for, ErrorRanges, GenerateConfig, LabeledSample, Split,
};
use crate::error::{Result, SfnError};
use crate::perception::orientation::{
    evaluate_orientation, train_orientation, OriEval, OriTrainConfig,
};
use crate::perception::position::{evaluate_position, train_position, PosEval, PosTrainConfig};
use crate::perception::segmentation::{evaluate_segmentation, train_segmentation, SegTrainConfig};
use crate::perception::{OriModel, PosModel, SegModel};
use crate::policy::{
    train_rl, ActorCritic, LearningCurve, OcclusionSpec, Perception, RlConfig, Variant,
};
use crate::render::CameraModel;
use crate::shapes::{seen_shapes, unseen_shapes, ShapeSpec, SEEN_IDS, UNSEEN_IDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Noisy RGB samples per seen shape for segmentation.
    pub seg_count: usize,
    pub seg_noise: f64,
    pub seg_epochs: usize,
    /// Mask samples per seen shape for the position and orientation nets.
    pub perception_count: usize,
    /// Held-out samples per unseen shape.
    pub unseen_count: usize,
    pub pos_epochs: usize,
    pub ori_epochs: usize,
    pub rl_episodes: usize,
    /// Fraction of policy-training episodes that start occluded.
    pub rl_occlusion_prob: f64,
    pub e2e_episodes: usize,
    pub sweep_trials: usize,
    pub tolerance_values: Vec<f64>,
    pub step_values: Vec<f64>,
    pub occlusion_trials: usize,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            seg_count: 50,
            seg_noise: 1.0,
            seg_epochs: 10,
            perception_count: 250,
            unseen_count: 20,
            pos_epochs: 6,
            ori_epochs: 10,
            rl_episodes: 4000,
            rl_occlusion_prob: 0.5,
            e2e_episodes: 8000,
            sweep_trials: 12,
            tolerance_values: (1..=10).map(|i| i as f64 / 10.0).collect(),
            step_values: (1..=20).map(|i| i as f64).collect(),
            occlusion_trials: 50,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    /// Small configuration exercising every stage in minutes.
    pub fn smoke(seed: u64) -> Self {
        Self {
            seed,
            seg_count: 5,
            seg_epochs: 1,
            perception_count: 5,
            unseen_count: 1,
            pos_epochs: 1,
            ori_epochs: 1,
            rl_episodes: 8,
            e2e_episodes: 8,
            sweep_trials: 1,
            tolerance_values: vec![0.5, 1.0],
            step_values: vec![1.0, 5.0],
            occlusion_trials: 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub epoch_losses: Vec<f64>,
    pub val_mean_iou: f64,
    pub unseen_mean_iou: f64,
    pub train_samples: usize,
    pub val_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosMetrics {
    pub epoch_losses: Vec<f64>,
    pub val: PosEval,
    pub unseen: PosEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriMetrics {
    pub epoch_losses: Vec<f64>,
    pub val: OriEval,
    pub unseen: OriEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub name: String,
    pub episodes: usize,
    pub first_decile_success: f64,
    pub last_decile_success: f64,
    pub curve: LearningCurve,
}

impl RlMetrics {
    fn new(name: &str, curve: LearningCurve) -> Self {
        let n = curve.success.len();
        let d = (n / 10).max(1);
        Self {
            name: name.into(),
            episodes: n,
            first_decile_success: curve.success_rate(0, d),
            last_decile_success: curve.success_rate(n.saturating_sub(d), n),
            curve,
        }
    }
}

/// Paths of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn model(&self, file: &str) -> PathBuf {
        self.models().join(file)
    }

    pub fn metric(&self, name: &str) -> PathBuf {
        self.metrics().join(format!("{name}.json"))
    }

    pub fn timing(&self, name: &str) -> PathBuf {
        self.metrics()
            .join(format!("{}.time", name.replace(' ', "-")))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn split_seen(
    samples: Vec<LabeledSample>,
    count: usize,
) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, s) in samples.into_iter().enumerate() {
        match split_for(crate::shapes::Family::Seen, k % count) {
            Split::Val => val.push(s),
            _ => train.push(s),
        }
    }
    (train, val)
}

/// Generated perception data of a run.
pub struct PerceptionData {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub unseen: Vec<LabeledSample>,
}

fn gen_cfg(count: usize, seed: u64, noise: f64) -> GenerateConfig {
    GenerateConfig {
        count,
        ranges: ErrorRanges::default(),
        seed,
        noise,
        camera: CameraModel::default(),
    }
}

pub fn perception_data(
    cfg: &PipelineConfig,
    count: usize,
    noise: f64,
    salt: u64,
) -> Result<PerceptionData> {
    let seen = generate_samples(&seen_shapes(1.0)?, &gen_cfg(count, cfg.seed ^ salt, noise))?;
    let (train, val) = split_seen(seen, count);
    let unseen = generate_samples(
        &unseen_shapes(1.0)?,
        &gen_cfg(cfg.unseen_count, cfg.seed ^ salt ^ 0x5eed, noise),
    )?;
    Ok(PerceptionData { train, val, unseen })
}

/// Progress sink for long stages.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Runs a stage and stores its wall-clock seconds next to the metrics.
fn timed<T>(run: &RunDir, log: Log<'_>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log(&format!("{name}: running"));
    let t = Instant::now();
    let out = f()?;
    let secs = t.elapsed().as_secs_f64();
    fs::create_dir_all(run.metrics())?;
    fs::write(run.timing(name), format!("{secs}\n"))?;
    log(&format!("{name}: done in {secs:.1}s"));
    Ok(out)
}

/// Recorded wall-clock seconds of a finished stage.
pub fn stage_seconds(run: &RunDir, name: &str) -> Result<f64> {
    let text = fs::read_to_string(run.timing(name))?;
    text.trim()
        .parse()
        .map_err(|_| SfnError::Input(format!("bad timing file for {name}")))
}

pub fn stage_seg(run: &RunDir, cfg: &PipelineConfig, log: Log<'_>) -> Result<SegMetrics> {
    let mpath = run.metric("seg");
    if mpath.exists() && run.model(SEG_FILE).exists() {
        return read_json(&mpath);
    }
    timed(run, log, "segmentation", || {
        let data = perception_data(cfg, cfg.seg_count, cfg.seg_noise, 0x5e6)?;
        let tc = SegTrainConfig {
            epochs: cfg.seg_epochs,
            seed: cfg.seed,
            ..SegTrainConfig::default()
        };
        let (model, report) = train_segmentation(&data.train, &data.val, &tc)?;
        model.save(&run.model(SEG_FILE), cfg.seg_epochs)?;
        let m = SegMetrics {
            epoch_losses: report.epoch_losses,
            val_mean_iou: report.val_mean_iou,
            unseen_mean_iou: evaluate_segmentation(&model, &data.unseen)?,
            train_samples: data.train.len(),
            val_samples: data.val.len(),
        };
        write_json(&mpath, &m)?;
        Ok(m)
    })
}

pub fn stage_position(
    run: &RunDir,
    cfg: &PipelineConfig,
    data: &PerceptionData,
    log: Log<'_>,
) -> Result<PosMetrics> {
    let mpath = run.metric("pos");
    if mpath.exists() && run.model(POS_FILE).exists() {
        return read_json(&mpath);
    }
    timed(run, log, "position", || {
        let tc = PosTrainConfig {
            epochs: cfg.pos_epochs,
            seed: cfg.seed,
            ..PosTrainConfig::default()
        };
        let (model, report) = train_position(&data.train, &data.val, &tc)?;
        model.save(&run.model(POS_FILE), cfg.pos_epochs)?;
        let m = PosMetrics {
            epoch_losses: report.epoch_losses,
            val: report.val,
            unseen: evaluate_position(&model, &data.unseen)?,
        };
        write_json(&mpath, &m)?;
        Ok(m)
    })
}

pub fn stage_orientation(
    run: &RunDir,
    cfg: &PipelineConfig,
    data: &PerceptionData,
    log: Log<'_>,
) -> Result<OriMetrics> {
    let mpath = run.metric("ori");
    if mpath.exists() && run.model(ORI_FILE).exists() {
        return read_json(&mpath);
    }
    timed(run, log, "orientation", || {
        let tc = OriTrainConfig {
            epochs: cfg.ori_epochs,
            seed: cfg.seed,
            ..OriTrainConfig::default()
        };
        let (model, report) = train_orientation(&data.train, &data.val, &tc)?;
        model.save(&run.model(ORI_FILE), cfg.ori_epochs)?;
        let m = OriMetrics {
            epoch_losses: report.epoch_losses,
            val: report.val,
            unseen: evaluate_orientation(&model, &data.unseen)?,
        };
        write_json(&mpath, &m)?;
        Ok(m)
    })
}

pub fn load_perception(run: &RunDir) -> Result<Perception> {
    Ok(Perception {
        pos: PosModel::load(&run.model(POS_FILE))?,
        ori: OriModel::load(&run.model(ORI_FILE))?,
    })
}

pub fn stage_rl(
    run: &RunDir,
    cfg: &PipelineConfig,
    variant: Variant,
    log: Log<'_>,
) -> Result<RlMetrics> {
    let file = match variant {
        Variant::Sfms => SFMS_FILE,
        Variant::Mfms => MFMS_FILE,
        Variant::Sfss => return Err(SfnError::Config("SFSS is not trained".into())),
    };
    let name = variant.to_string();
    let mpath = run.metric(&name);
    if mpath.exists() && run.model(file).exists() {
        return read_json(&mpath);
    }
    let perception = load_perception(run)?;
    timed(run, log, &name, || {
        let rc = RlConfig {
            occlusion: Some(OcclusionSpec::default()),
            occlusion_prob: cfg.rl_occlusion_prob,
            ..RlConfig::new(variant, cfg.rl_episodes, cfg.seed)
        };
        let (model, curve) = train_rl(&seen_shapes(1.0)?, &perception, &rc)?;
        model.save(&run.model(file), cfg.rl_episodes)?;
        let m = RlMetrics::new(&name, curve);
        write_json(&mpath, &m)?;
        Ok(m)
    })
}

pub fn stage_e2e(run: &RunDir, cfg: &PipelineConfig, log: Log<'_>) -> Result<RlMetrics> {
    let mpath = run.metric("e2e-vision");
    if mpath.exists() && run.model(E2E_FILE).exists() {
        return read_json(&mpath);
    }
    timed(run, log, "e2e-vision", || {
        let rc = RlConfig::new(Variant::Sfms, cfg.e2e_episodes, cfg.seed);
        let (model, curve) = e2e_vision_rl(&seen_shapes(1.0)?, &rc)?;
        model.save(&run.model(E2E_FILE), cfg.e2e_episodes)?;
        let m = RlMetrics::new("e2e-vision", curve);
        write_json(&mpath, &m)?;
        Ok(m)
    })
}

fn all_ids() -> Vec<String> {
    SEEN_IDS
        .iter()
        .chain(UNSEEN_IDS.iter())
        .map(|s| s.to_string())
        .collect()
}

pub fn stage_sweep(
    run: &RunDir,
    cfg: &PipelineConfig,
    axis: Axis,
    log: Log<'_>,
) -> Result<ResultTable> {
    let dir = run.bench().join(axis.to_string());
    let table_path = dir.join("table.json");
    if table_path.exists() {
        return read_json(&table_path);
    }
    let set = PolicySet::load(&run.models())?;
    let policies = match axis {
        Axis::Tolerance => vec![PolicyName::Sfss, PolicyName::Sfms, PolicyName::Mfms],
        Axis::Steps => vec![
            PolicyName::Sfss,
            PolicyName::Sfms,
            PolicyName::Mfms,
            PolicyName::E2eVision,
        ],
    };
    let mut spec = SweepSpec::new(axis, all_ids(), policies, cfg.seed);
    spec.trials_per_cell = cfg.sweep_trials;
    spec.workers = cfg.workers;
    spec.values = match axis {
        Axis::Tolerance => cfg.tolerance_values.clone(),
        Axis::Steps => cfg.step_values.clone(),
    };
    timed(run, log, &format!("{axis} sweep"), || {
        let (table, _) = run_sweep(&spec, &set, Some(&dir))?;
        RunManifest::new(
            &format!("bench sweep --axis {axis}"),
            &spec,
            Some(&run.models()),
        )?
        .write(&dir)?;
        write_json(&table_path, &table)?;
        Ok(table)
    })
}

pub fn stage_occlusion(
    run: &RunDir,
    cfg: &PipelineConfig,
    log: Log<'_>,
) -> Result<OcclusionReport> {
    let dir = run.bench().join("occlusion");
    let path = dir.join("report.json");
    if path.exists() {
        return read_json(&path);
    }
    let set = PolicySet::load(&run.models())?;
    let oc = OcclusionConfig {
        spec: OcclusionSpec::default(),
        policies: vec![PolicyName::Sfss, PolicyName::Sfms, PolicyName::Mfms],
        shapes: all_ids(),
        clearance: 1.0,
        trials: cfg.occlusion_trials,
        k_max: 20,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    timed(run, log, "occlusion study", || {
        let (report, records) = occlusion_study(&oc, &set)?;
        fs::create_dir_all(&dir)?;
        let mut log_text = String::new();
        for r in &records {
            log_text.push_str(&r.to_jsonl()?);
        }
        fs::write(dir.join("episodes.jsonl"), log_text)?;
        RunManifest::new("bench occlusion", &oc, Some(&run.models()))?.write(&dir)?;
        write_json(&path, &report)?;
        Ok(report)
    })
}

/// Everything the acceptance checks read.
#[derive(Clone, Debug)]
pub struct PipelineResults {
    pub seg: SegMetrics,
    pub pos: PosMetrics,
    pub ori: OriMetrics,
    pub sfms: RlMetrics,
    pub mfms: RlMetrics,
    pub e2e: RlMetrics,
    pub tolerance: ResultTable,
    pub steps: ResultTable,
    pub occlusion: OcclusionReport,
}

pub fn run_pipeline(root: &Path, cfg: &PipelineConfig, log: Log<'_>) -> Result<PipelineResults> {
    let run = RunDir::new(root);
    let cfg_path = root.join("pipeline.json");
    if cfg_path.exists() {
        let prev: PipelineConfig = read_json(&cfg_path)?;
        if prev != *cfg {
            return Err(SfnError::Config(format!(
                "{} holds a run with a different configuration",
                root.display()
            )));
        }
    } else {
        write_json(&cfg_path, cfg)?;
    }
    let seg = stage_seg(&run, cfg, log)?;
    let need_data = !(run.metric("pos").exists()
        && run.model(POS_FILE).exists()
        && run.metric("ori").exists()
        && run.model(ORI_FILE).exists());
    let data = if need_data {
        perception_data(cfg, cfg.perception_count, 0.0, 0x9e7)?
    } else {
        PerceptionData {
            train: Vec::new(),
            val: Vec::new(),
            unseen: Vec::new(),
        }
    };
    let pos = stage_position(&run, cfg, &data, log)?;
    let ori = stage_orientation(&run, cfg, &data, log)?;
    drop(data);
    let sfms = stage_rl(&run, cfg, Variant::Sfms, log)?;
    let mfms = stage_rl(&run, cfg, Variant::Mfms, log)?;
    let e2e = stage_e2e(&run, cfg, log)?;
    let steps = stage_sweep(&run, cfg, Axis::Steps, log)?;
    let tolerance = stage_sweep(&run, cfg, Axis::Tolerance, log)?;
    let occlusion = stage_occlusion(&run, cfg, log)?;
    Ok(PipelineResults {
        seg,
        pos,
        ori,
        sfms,
        mfms,
        e2e,
        tolerance,
        steps,
        occlusion,
    })
}

/// Metrics files of a run, relative path and contents, in a fixed order.
pub fn metrics_files(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| {
                e == "json" || e == "jsonl" || e == "csv" || e == "txt" || e == "dat"
            }) {
                let rel = p
                    .strip_prefix(root)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Shapes by id at one clearance.
pub fn shapes_for(ids: &[String], clearance: f64) -> Result<Vec<ShapeSpec>> {
    ids.iter()
        .map(|id| crate::shapes::shape_by_id(id, clearance))
        .collect()
}

pub fn load_e2e(run: &RunDir) -> Result<E2eVision> {
    E2eVision::load(&run.model(E2E_FILE))
}

pub fn load_policy(run: &RunDir, variant: Variant) -> Result<ActorCritic> {
    match variant {
        Variant::Sfms => ActorCritic::load(&run.model(SFMS_FILE)),
        Variant::Mfms => ActorCritic::load(&run.model(MFMS_FILE)),
        Variant::Sfss => Err(SfnError::Config("SFSS has no checkpoint".into())),
    }
}

pub fn load_seg(run: &RunDir) -> Result<SegModel> {
    SegModel::load(&run.model(SEG_FILE))
}
