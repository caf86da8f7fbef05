//! Evaluation harness: tolerance and step-budget sweeps, the occlusion
//! study, report files and run-directory manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{spiral_search, E2eVision, SpiralConfig};
use crate::datagen::{derive_seed, sha256_hex};
use crate::error::{Result, SfnError};
use crate::perception::{OriModel, PosModel};
use crate::policy::{
    run_episode, ActorCritic, Controller, EpisodeRecord, OcclusionSpec, Perception, RewardConfig,
    RunConfig,
};
use crate::shapes::{shape_by_id, Family};
use crate::sim::{Env, EnvConfig};

pub const SEG_FILE: &str = "seg.ckpt";
pub const POS_FILE: &str = "pos.ckpt";
pub const ORI_FILE: &str = "ori.ckpt";
pub const SFMS_FILE: &str = "sfms.ckpt";
pub const MFMS_FILE: &str = "mfms.ckpt";
pub const E2E_FILE: &str = "e2e.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Tolerance,
    Steps,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Tolerance => "tolerance",
            Axis::Steps => "steps",
        })
    }
}

impl FromStr for Axis {
    type Err = SfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tolerance" => Ok(Axis::Tolerance),
            "steps" => Ok(Axis::Steps),
            _ => Err(SfnError::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyName {
    #[serde(rename = "sfss")]
    Sfss,
    #[serde(rename = "sfms")]
    Sfms,
    #[serde(rename = "mfms")]
    Mfms,
    #[serde(rename = "spiral")]
    Spiral,
    #[serde(rename = "e2e-vision")]
    E2eVision,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::Sfss,
        PolicyName::Sfms,
        PolicyName::Mfms,
        PolicyName::Spiral,
        PolicyName::E2eVision,
    ];
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyName::Sfss => "sfss",
            PolicyName::Sfms => "sfms",
            PolicyName::Mfms => "mfms",
            PolicyName::Spiral => "spiral",
            PolicyName::E2eVision => "e2e-vision",
        })
    }
}

impl FromStr for PolicyName {
    type Err = SfnError;

    fn from_str(s: &str) -> Result<Self> {
        PolicyName::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| SfnError::Config(format!("unknown policy `{s}`")))
    }
}

pub fn parse_policies(list: &str) -> Result<Vec<PolicyName>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Trained controllers loaded from a models directory.
#[derive(Clone, Debug)]
pub struct PolicySet {
    pub dir: PathBuf,
    pub perception: Option<Perception>,
    pub sfms: Option<ActorCritic>,
    pub mfms: Option<ActorCritic>,
    pub e2e: Option<E2eVision>,
    pub spiral: SpiralConfig,
}

fn load_opt<T>(path: &Path, load: impl Fn(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

impl PolicySet {
    pub fn empty(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            perception: None,
            sfms: None,
            mfms: None,
            e2e: None,
            spiral: SpiralConfig::default(),
        }
    }

    /// Loads every checkpoint present in `dir`; absent ones stay `None`.
    pub fn load(dir: &Path) -> Result<Self> {
        let pos = load_opt(&dir.join(POS_FILE), PosModel::load)?;
        let ori = load_opt(&dir.join(ORI_FILE), OriModel::load)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            perception: pos.zip(ori).map(|(pos, ori)| Perception { pos, ori }),
            sfms: load_opt(&dir.join(SFMS_FILE), ActorCritic::load)?,
            mfms: load_opt(&dir.join(MFMS_FILE), ActorCritic::load)?,
            e2e: load_opt(&dir.join(E2E_FILE), E2eVision::load)?,
            spiral: SpiralConfig::default(),
        })
    }

    fn missing(&self, file: &str) -> SfnError {
        SfnError::MissingArtifact(self.dir.join(file))
    }

    fn perception(&self) -> Result<&Perception> {
        self.perception.as_ref().ok_or_else(|| {
            let file = if self.dir.join(POS_FILE).exists() {
                ORI_FILE
            } else {
                POS_FILE
            };
            self.missing(file)
        })
    }

    /// Fails with the path of the first missing checkpoint `policy` needs.
    pub fn require(&self, policy: PolicyName) -> Result<()> {
        self.controller(policy).map(|_| ())
    }

    fn controller(&self, policy: PolicyName) -> Result<Option<Controller>> {
        Ok(match policy {
            PolicyName::Sfss => {
                self.perception()?;
                Some(Controller::Sfss)
            }
            PolicyName::Sfms => {
                self.perception()?;
                Some(Controller::Learned(
                    self.sfms.clone().ok_or_else(|| self.missing(SFMS_FILE))?,
                ))
            }
            PolicyName::Mfms => {
                self.perception()?;
                Some(Controller::Learned(
                    self.mfms.clone().ok_or_else(|| self.missing(MFMS_FILE))?,
                ))
            }
            PolicyName::E2eVision => Some(Controller::Vision(
                self.e2e.clone().ok_or_else(|| self.missing(E2E_FILE))?,
            )),
            PolicyName::Spiral => None,
        })
    }

    /// One episode of `policy` from `reset(seed)`.
    pub fn run(
        &self,
        policy: PolicyName,
        env: &mut Env,
        seed: u64,
        cfg: &RunConfig,
    ) -> Result<EpisodeRecord> {
        match self.controller(policy)? {
            Some(c) => run_episode(env, &c, self.perception.as_ref(), seed, None, cfg),
            None => {
                env.reset(seed)?;
                let mut rec = spiral_search(env, &self.spiral)?;
                rec.seed = seed;
                Ok(rec)
            }
        }
    }
}

fn make_env(shape_id: &str, clearance: f64, k_max: usize, seed: u64) -> Result<Env> {
    let mut cfg = EnvConfig::new(shape_by_id(shape_id, clearance)?);
    cfg.k_max = k_max;
    cfg.seed = seed;
    Env::new(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub shapes: Vec<String>,
    pub trials_per_cell: usize,
    pub policies: Vec<PolicyName>,
    pub seed: u64,
    /// Clearance of every cell on the steps axis.
    pub clearance: f64,
    /// Step budget of every cell on the tolerance axis.
    pub k_max: usize,
    pub workers: usize,
}

impl SweepSpec {
    pub fn new(axis: Axis, shapes: Vec<String>, policies: Vec<PolicyName>, seed: u64) -> Self {
        let values = match axis {
            Axis::Tolerance => (1..=10).map(|i| i as f64 / 10.0).collect(),
            Axis::Steps => (1..=20).map(|i| i as f64).collect(),
        };
        Self {
            axis,
            values,
            shapes,
            trials_per_cell: 12,
            policies,
            seed,
            clearance: 1.0,
            k_max: 20,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.shapes.is_empty() || self.policies.is_empty() {
            return Err(SfnError::Config(
                "sweep needs values, shapes and policies".into(),
            ));
        }
        if self.trials_per_cell == 0 || self.workers == 0 {
            return Err(SfnError::Config(
                "trials and workers must be positive".into(),
            ));
        }
        match self.axis {
            Axis::Tolerance if self.values.iter().any(|&v| !(v > 0.0)) => {
                Err(SfnError::Config("clearances must be positive".into()))
            }
            Axis::Steps if self.values.iter().any(|&v| v < 1.0 || v.fract() != 0.0) => Err(
                SfnError::Config("step budgets must be positive integers".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Cells counted by the protocol: policies × shapes × values × trials.
    pub fn trial_count(&self) -> usize {
        self.policies.len() * self.shapes.len() * self.values.len() * self.trials_per_cell
    }

    fn max_budget(&self) -> usize {
        self.values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize
    }
}

/// A job actually executed by a sweep. On the steps axis one episode at the
/// largest budget serves every budget cell through its prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Job {
    policy: usize,
    shape: usize,
    value: Option<usize>,
    trial: usize,
}

fn jobs(spec: &SweepSpec) -> Vec<Job> {
    let mut out = Vec::new();
    for policy in 0..spec.policies.len() {
        for shape in 0..spec.shapes.len() {
            let values: Vec<Option<usize>> = match spec.axis {
                Axis::Tolerance => (0..spec.values.len()).map(Some).collect(),
                Axis::Steps => vec![None],
            };
            for value in values {
                for trial in 0..spec.trials_per_cell {
                    out.push(Job {
                        policy,
                        shape,
                        value,
                        trial,
                    });
                }
            }
        }
    }
    out
}

fn job_seed(spec: &SweepSpec, j: &Job) -> u64 {
    let axis = match spec.axis {
        Axis::Tolerance => 1,
        Axis::Steps => 2,
    };
    let v = j.value.map_or(u64::MAX, |v| v as u64);
    derive_seed(
        spec.seed,
        &[axis, j.policy as u64, j.shape as u64, v, j.trial as u64],
    )
}

/// Episode seeds used by more than one executed job.
pub fn seed_collisions(spec: &SweepSpec) -> Vec<u64> {
    let mut seen = HashSet::new();
    let mut dup = Vec::new();
    for j in jobs(spec) {
        let s = job_seed(spec, &j);
        if !seen.insert(s) {
            dup.push(s);
        }
    }
    dup
}

/// Episode tagged with the sweep value it ran at (`None` on the steps axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEpisode {
    pub value: Option<f64>,
    pub family: Family,
    pub record: EpisodeRecord,
}

fn run_job(spec: &SweepSpec, set: &PolicySet, j: &Job) -> Result<SweepEpisode> {
    let shape_id = &spec.shapes[j.shape];
    let (clearance, k_max, value) = match (spec.axis, j.value) {
        (Axis::Tolerance, Some(v)) => (spec.values[v], spec.k_max, Some(spec.values[v])),
        _ => (spec.clearance, spec.max_budget(), None),
    };
    let seed = job_seed(spec, j);
    let mut env = make_env(shape_id, clearance, k_max, seed)?;
    let run = RunConfig {
        reward: RewardConfig {
            k_max,
            ..RewardConfig::default()
        },
        occlusion: None,
        explore: false,
    };
    let record = set.run(spec.policies[j.policy], &mut env, seed, &run)?;
    Ok(SweepEpisode {
        value,
        family: env.shape().family,
        record,
    })
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(SfnError::Protocol("worker panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Executes a sweep. With `out`, persists the episode log and all report
/// formats there.
pub fn run_sweep(
    spec: &SweepSpec,
    set: &PolicySet,
    out: Option<&Path>,
) -> Result<(ResultTable, Vec<SweepEpisode>)> {
    spec.validate()?;
    for &p in &spec.policies {
        set.require(p)?;
    }
    let js = jobs(spec);
    let episodes = par_map(&js, spec.workers, |j| run_job(spec, set, j))?;
    let table = ResultTable::from_episodes(spec.axis, &spec.values, &episodes);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("episodes.jsonl"), episodes_to_jsonl(&episodes)?)?;
        write_reports(&table, dir)?;
        let mono = table.monotonicity_report();
        fs::write(
            dir.join("monotonicity.json"),
            serde_json::to_string_pretty(&mono)? + "\n",
        )?;
    }
    Ok((table, episodes))
}

pub fn episodes_to_jsonl(episodes: &[SweepEpisode]) -> Result<String> {
    let mut s = String::new();
    for e in episodes {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn episodes_from_jsonl(text: &str) -> Result<Vec<SweepEpisode>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SfnError::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub policy: String,
    pub shape: String,
    pub family: Family,
    pub value: f64,
    pub successes: usize,
    pub trials: usize,
    pub mean_steps: f64,
    pub std_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub axis: Axis,
    pub cells: Vec<CellResult>,
}

/// Success rate averaged over shapes, per value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub from: f64,
    pub to: f64,
    pub rate_from: f64,
    pub rate_to: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityEntry {
    pub policy: String,
    pub inversions: Vec<Inversion>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Success and step count of an episode under a step budget.
pub fn under_budget(rec: &EpisodeRecord, budget: Option<usize>) -> (bool, usize) {
    match budget {
        None => (rec.success, rec.len()),
        Some(b) => (rec.success && rec.len() <= b, rec.len().min(b)),
    }
}

impl ResultTable {
    pub fn empty(axis: Axis) -> Self {
        Self {
            axis,
            cells: Vec::new(),
        }
    }

    /// Aggregates episodes into cells ordered by policy, shape, value.
    pub fn from_episodes(axis: Axis, values: &[f64], episodes: &[SweepEpisode]) -> Self {
        let mut groups: BTreeMap<(String, String, usize), (Family, Vec<(bool, usize)>)> =
            BTreeMap::new();
        let mut policy_order: Vec<String> = Vec::new();
        let mut shape_order: Vec<String> = Vec::new();
        for e in episodes {
            let r = &e.record;
            if !policy_order.contains(&r.policy) {
                policy_order.push(r.policy.clone());
            }
            if !shape_order.contains(&r.shape_id) {
                shape_order.push(r.shape_id.clone());
            }
            let pi = policy_order
                .iter()
                .position(|p| *p == r.policy)
                .unwrap_or(0);
            let si = shape_order
                .iter()
                .position(|s| *s == r.shape_id)
                .unwrap_or(0);
            let key = |vi: usize| (format!("{pi:04}"), format!("{si:04}"), vi);
            match (axis, e.value) {
                (Axis::Tolerance, Some(v)) => {
                    if let Some(vi) = values.iter().position(|&x| x == v) {
                        let g = groups.entry(key(vi)).or_insert((e.family, Vec::new()));
                        g.1.push(under_budget(r, None));
                    }
                }
                _ => {
                    for (vi, &b) in values.iter().enumerate() {
                        let g = groups.entry(key(vi)).or_insert((e.family, Vec::new()));
                        g.1.push(under_budget(r, Some(b as usize)));
                    }
                }
            }
        }
        let cells = groups
            .into_iter()
            .map(|((pi, si, vi), (family, outcomes))| {
                let steps: Vec<f64> = outcomes.iter().map(|o| o.1 as f64).collect();
                let (mean_steps, std_steps) = mean_std(&steps);
                CellResult {
                    policy: policy_order[pi.parse::<usize>().unwrap_or(0)].clone(),
                    shape: shape_order[si.parse::<usize>().unwrap_or(0)].clone(),
                    family,
                    value: values[vi],
                    successes: outcomes.iter().filter(|o| o.0).count(),
                    trials: outcomes.len(),
                    mean_steps,
                    std_steps,
                }
            })
            .collect();
        Self { axis, cells }
    }

    pub fn policies(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.policy) {
                out.push(c.policy.clone());
            }
        }
        out
    }

    /// Per-value success rate averaged over shapes (optionally one family),
    /// with the spread across shapes.
    pub fn curve(&self, policy: &str, family: Option<Family>) -> Vec<CurvePoint> {
        let mut xs: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !xs.contains(&c.value) {
                xs.push(c.value);
            }
        }
        xs.sort_by(f64::total_cmp);
        xs.into_iter()
            .filter_map(|x| {
                let rates: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| {
                        c.policy == policy && c.value == x && family.is_none_or(|f| c.family == f)
                    })
                    .map(|c| c.successes as f64 / c.trials.max(1) as f64)
                    .collect();
                (!rates.is_empty()).then(|| {
                    let (mean, std) = mean_std(&rates);
                    CurvePoint { x, mean, std }
                })
            })
            .collect()
    }

    /// Mean success rate over shapes and the values in `[lo, hi]`.
    pub fn success_rate(&self, policy: &str, family: Option<Family>, lo: f64, hi: f64) -> f64 {
        let pts: Vec<f64> = self
            .curve(policy, family)
            .into_iter()
            .filter(|p| p.x >= lo - 1e-9 && p.x <= hi + 1e-9)
            .map(|p| p.mean)
            .collect();
        mean_std(&pts).0
    }

    /// Decreases of the shape-averaged success curve between consecutive
    /// values, per policy.
    pub fn monotonicity_report(&self) -> Vec<MonotonicityEntry> {
        self.policies()
            .into_iter()
            .map(|p| {
                let c = self.curve(&p, None);
                let inversions = c
                    .windows(2)
                    .filter(|w| w[1].mean < w[0].mean)
                    .map(|w| Inversion {
                        from: w[0].x,
                        to: w[1].x,
                        rate_from: w[0].mean,
                        rate_to: w[1].mean,
                    })
                    .collect();
                MonotonicityEntry {
                    policy: p,
                    inversions,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    TextTable,
    Delimited,
    PlotData,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::TextTable,
        ReportFormat::Delimited,
        ReportFormat::PlotData,
    ];

    pub fn file_name(&self) -> &'static str {
        match self {
            ReportFormat::TextTable => "table.txt",
            ReportFormat::Delimited => "table.csv",
            ReportFormat::PlotData => "curves.dat",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = SfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-table" => Ok(ReportFormat::TextTable),
            "delimited" => Ok(ReportFormat::Delimited),
            "plot-data" => Ok(ReportFormat::PlotData),
            _ => Err(SfnError::UnknownFormat(s.to_string())),
        }
    }
}

const CSV_HEADER: &str = "policy,shape,family,value,successes,trials,mean_steps,std_steps";

fn family_str(f: Family) -> &'static str {
    match f {
        Family::Seen => "seen",
        Family::Unseen => "unseen",
    }
}

/// Serialises a table; output depends only on the table.
pub fn emit_report(table: &ResultTable, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::TextTable => {
            s.push_str(&format!(
                "{:<12} {:<12} {:<7} {:>8} {:>9} {:>13}\n",
                "policy",
                "shape",
                "family",
                table.axis.to_string(),
                "success",
                "steps"
            ));
            for c in &table.cells {
                s.push_str(&format!(
                    "{:<12} {:<12} {:<7} {:>8} {:>9} {:>13}\n",
                    c.policy,
                    c.shape,
                    family_str(c.family),
                    c.value,
                    format!("{}/{}", c.successes, c.trials),
                    format!("{:.2}±{:.2}", c.mean_steps, c.std_steps)
                ));
            }
        }
        ReportFormat::Delimited => {
            s.push_str(&format!("#axis={}\n{CSV_HEADER}\n", table.axis));
            for c in &table.cells {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    c.policy,
                    c.shape,
                    family_str(c.family),
                    c.value,
                    c.successes,
                    c.trials,
                    c.mean_steps,
                    c.std_steps
                ));
            }
        }
        ReportFormat::PlotData => {
            s.push_str("curve x mean std\n");
            for p in table.policies() {
                for (tag, fam) in [
                    ("all", None),
                    ("seen", Some(Family::Seen)),
                    ("unseen", Some(Family::Unseen)),
                ] {
                    for pt in table.curve(&p, fam) {
                        s.push_str(&format!("{p}/{tag} {} {} {}\n", pt.x, pt.mean, pt.std));
                    }
                }
            }
        }
    }
    s
}

pub fn parse_delimited(text: &str) -> Result<ResultTable> {
    let bad = |m: &str| SfnError::Input(format!("delimited report: {m}"));
    let mut lines = text.lines();
    let axis = lines
        .next()
        .and_then(|l| l.strip_prefix("#axis="))
        .ok_or_else(|| bad("missing axis line"))?
        .parse()?;
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad("missing header"));
    }
    let mut cells = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 8 {
            return Err(bad("wrong field count"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad("bad number"));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad("bad count"));
        cells.push(CellResult {
            policy: f[0].to_string(),
            shape: f[1].to_string(),
            family: match f[2] {
                "seen" => Family::Seen,
                "unseen" => Family::Unseen,
                _ => return Err(bad("bad family")),
            },
            value: num(3)?,
            successes: int(4)?,
            trials: int(5)?,
            mean_steps: num(6)?,
            std_steps: num(7)?,
        });
    }
    Ok(ResultTable { axis, cells })
}

pub fn write_reports(table: &ResultTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in ReportFormat::ALL {
        fs::write(dir.join(f.file_name()), emit_report(table, f))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRow {
    pub policy: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub baseline_success_rate: f64,
    pub baseline_mean_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub spec: OcclusionSpec,
    pub clearance: f64,
    pub rows: Vec<OcclusionRow>,
    /// success(MFMS) ≥ success(SFMS) > success(SFSS), when all three ran.
    pub ordering_success: Option<bool>,
    /// mean steps(MFMS) < mean steps(SFMS), when both ran.
    pub ordering_steps: Option<bool>,
}

impl OcclusionReport {
    pub fn row(&self, policy: PolicyName) -> Option<&OcclusionRow> {
        let name = policy.to_string();
        self.rows.iter().find(|r| r.policy == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub spec: OcclusionSpec,
    pub policies: Vec<PolicyName>,
    pub shapes: Vec<String>,
    pub clearance: f64,
    pub trials: usize,
    pub k_max: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Occluded and unoccluded episodes per policy from paired start states.
pub fn occlusion_study(
    cfg: &OcclusionConfig,
    set: &PolicySet,
) -> Result<(OcclusionReport, Vec<EpisodeRecord>)> {
    if cfg.policies.is_empty() || cfg.shapes.is_empty() || cfg.trials == 0 {
        return Err(SfnError::Config(
            "occlusion study needs policies, shapes and trials".into(),
        ));
    }
    for &p in &cfg.policies {
        set.require(p)?;
    }
    let mut work = Vec::new();
    for (pi, _) in cfg.policies.iter().enumerate() {
        for t in 0..cfg.trials {
            for occluded in [true, false] {
                work.push((pi, t, occluded));
            }
        }
    }
    let reward = RewardConfig {
        k_max: cfg.k_max,
        ..RewardConfig::default()
    };
    let records = par_map(&work, cfg.workers, |&(pi, t, occluded)| {
        let shape = &cfg.shapes[t % cfg.shapes.len()];
        let seed = derive_seed(cfg.seed, &[3, t as u64]);
        let mut env = make_env(shape, cfg.clearance, cfg.k_max, seed)?;
        let run = RunConfig {
            reward,
            occlusion: occluded.then(|| cfg.spec.clone()),
            explore: false,
        };
        set.run(cfg.policies[pi], &mut env, seed, &run)
    })?;
    let rows: Vec<OcclusionRow> = cfg
        .policies
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let mine = |occ: bool| -> Vec<&EpisodeRecord> {
                work.iter()
                    .zip(&records)
                    .filter(|((q, _, o), _)| *q == pi && *o == occ)
                    .map(|(_, r)| r)
                    .collect()
            };
            let stats = |rs: &[&EpisodeRecord]| {
                let succ = rs.iter().filter(|r| r.success).count();
                let steps: Vec<f64> = rs.iter().map(|r| r.len() as f64).collect();
                (succ, succ as f64 / rs.len() as f64, mean_std(&steps).0)
            };
            let occ = mine(true);
            let (successes, success_rate, mean_steps) = stats(&occ);
            let (_, baseline_success_rate, baseline_mean_steps) = stats(&mine(false));
            OcclusionRow {
                policy: p.to_string(),
                trials: occ.len(),
                successes,
                success_rate,
                mean_steps,
                baseline_success_rate,
                baseline_mean_steps,
            }
        })
        .collect();
    let find = |p: PolicyName| rows.iter().find(|r| r.policy == p.to_string());
    let ordering_success = match (
        find(PolicyName::Mfms),
        find(PolicyName::Sfms),
        find(PolicyName::Sfss),
    ) {
        (Some(m), Some(s), Some(f)) => {
            Some(m.success_rate >= s.success_rate && s.success_rate > f.success_rate)
        }
        _ => None,
    };
    let ordering_steps = match (find(PolicyName::Mfms), find(PolicyName::Sfms)) {
        (Some(m), Some(s)) => Some(m.mean_steps < s.mean_steps),
        _ => None,
    };
    Ok((
        OcclusionReport {
            spec: cfg.spec.clone(),
            clearance: cfg.clearance,
            rows,
            ordering_success,
            ordering_steps,
        },
        records,
    ))
}

/// Configuration and provenance of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub checkpoints: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, models: Option<&Path>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            checkpoints: match models {
                Some(d) => checkpoint_hashes(d)?,
                None => BTreeMap::new(),
            },
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }
}

/// SHA-256 of every `*.ckpt` file in `dir`, keyed by file name.
pub fn checkpoint_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ckpt") {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.insert(name, sha256_hex(&fs::read(&path)?));
        }
    }
    Ok(out)
}
