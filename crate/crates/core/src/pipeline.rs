//! Experiment orchestration: configuration, run manifest, and the
//! generate → train-reward → eval-reward → adapt-policy → report stages.
//!
//! A stage is skipped when its manifest record matches the current
//! configuration and every recorded file still has its recorded hash.
//! Rerunning a stage with `force` drops the records of all stages downstream
//! of it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::Error;
use crate::eval::{self, EvalReport, ReportRow};
use crate::losses::GeliConfig;
use crate::model::{ModelHead, RewardModel};
use crate::policy::{self, PolicyParams, PpoConfig};
use crate::rng;
use crate::synth::{self, EnvConfig, GroundTruth};
use crate::train::{self, Method, RewardTrainConfig};
use crate::traj::{self, Dataset, FeatureSpec, SplitTag};

pub const WORKDIR_ENV: &str = "GELI_WORKDIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".geli.lock";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Core(#[from] Error),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 missing or unusable artifact, 4 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Missing(_) => 3,
            PipelineError::Numerical(_) => 4,
            PipelineError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::Schema(_) | Error::NoLabeledSteps => 2,
                Error::Io(io) if io.kind() == ErrorKind::NotFound => 3,
                Error::Parse { .. }
                | Error::EmptyDataset
                | Error::DimensionMismatch { .. }
                | Error::CheckpointVersion(_)
                | Error::CheckpointCorrupt(_)
                | Error::Json(_)
                | Error::Csv(_) => 3,
                Error::NonFinite(_) | Error::Degenerate(_) => 4,
                Error::Io(_) => 1,
            },
        }
    }
}

pub type PResult<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    if e.kind() == ErrorKind::NotFound {
        PipelineError::Missing(format!("{}: {e}", path.display()))
    } else {
        PipelineError::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Run directory; falls back to `$GELI_WORKDIR`.
    pub workdir: Option<PathBuf>,
    /// Directory for dataset, truth and split files (default: the workdir).
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyStageConfig {
    /// Which trained reward the policy is adapted against.
    pub reward_method: Method,
    /// Held-out episodes for the policy evaluation.
    pub eval_episodes: usize,
}

impl Default for PolicyStageConfig {
    fn default() -> Self {
        PolicyStageConfig {
            reward_method: Method::GeliRrdVa,
            eval_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Also write every predicted step reward of the test split.
    pub per_step_dump: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Methods trained, evaluated and reported, in report order.
    pub methods: Vec<Method>,
    /// Fractions of trajectories for reward training, reward testing and policy states.
    pub split: [f64; 3],
    pub env: EnvConfig,
    pub geli: GeliConfig,
    pub reward_train: RewardTrainConfig,
    pub ppo: PpoConfig,
    pub policy: PolicyStageConfig,
    pub report: ReportConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            methods: Method::default_grid(),
            split: [500.0 / 600.0, 50.0 / 600.0, 50.0 / 600.0],
            env: EnvConfig::default(),
            geli: GeliConfig::default(),
            reward_train: RewardTrainConfig::default(),
            ppo: PpoConfig::default(),
            policy: PolicyStageConfig::default(),
            report: ReportConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> PResult<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> PResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => PipelineError::Config(format!("{}: {e}", path.display())),
            _ => io_err(path, e),
        })?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.workdir,
            &mut cfg.paths.dataset,
            &mut cfg.paths.checkpoints,
            &mut cfg.paths.reports,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> PResult<()> {
        let config = |e: Error| PipelineError::Config(e.to_string());
        self.env.validate().map_err(config)?;
        self.geli.validate().map_err(config)?;
        self.reward_train.validate().map_err(config)?;
        self.ppo.validate().map_err(config)?;
        if self.methods.is_empty() {
            return Err(PipelineError::Config("methods must not be empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(PipelineError::Config("methods contain duplicates".into()));
        }
        if self.policy.eval_episodes == 0 {
            return Err(PipelineError::Config("policy.eval_episodes must be positive".into()));
        }
        traj::split_indices(self.env.num_trajectories, self.split, 0).map_err(config)?;
        Ok(())
    }

    /// Directory layout, using `$GELI_WORKDIR` when the config names no workdir.
    pub fn layout(&self) -> PResult<Layout> {
        let workdir = match &self.paths.workdir {
            Some(p) => p.clone(),
            None => std::env::var_os(WORKDIR_ENV).map(PathBuf::from).ok_or_else(|| {
                PipelineError::Config(format!("no paths.workdir in config and {WORKDIR_ENV} unset"))
            })?,
        };
        let or = |p: &Option<PathBuf>, d: &str| p.clone().unwrap_or_else(|| workdir.join(d));
        Ok(Layout {
            dataset: or(&self.paths.dataset, ""),
            checkpoints: or(&self.paths.checkpoints, "checkpoints"),
            reports: or(&self.paths.reports, "reports"),
            logs: workdir.join("logs"),
            workdir,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub workdir: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub logs: PathBuf,
}

impl Layout {
    pub fn dataset_file(&self) -> PathBuf {
        self.dataset.join("dataset.jsonl")
    }
    pub fn truth_file(&self) -> PathBuf {
        self.dataset.join("truth.jsonl")
    }
    pub fn splits_file(&self) -> PathBuf {
        self.dataset.join("splits.json")
    }
    pub fn manifest_file(&self) -> PathBuf {
        self.workdir.join(MANIFEST_FILE)
    }
    pub fn model_file(&self, m: Method) -> PathBuf {
        self.checkpoints.join(format!("{}.json", m.tag()))
    }
    pub fn checkpoint_file(&self, m: Method) -> PathBuf {
        self.checkpoints.join(format!("{}.ckpt", m.tag()))
    }
    pub fn train_log(&self, m: Method) -> PathBuf {
        self.logs.join(format!("train_{}.jsonl", m.tag()))
    }
    pub fn eval_file(&self, m: Method) -> PathBuf {
        self.reports.join("eval").join(format!("{}.json", m.tag()))
    }
    pub fn step_dump(&self, m: Method) -> PathBuf {
        self.reports.join("steps").join(format!("{}.jsonl", m.tag()))
    }
    pub fn policy_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("policy.ckpt")
    }
    pub fn rl_log(&self) -> PathBuf {
        self.logs.join("rl.jsonl")
    }
    pub fn policy_report(&self) -> PathBuf {
        self.reports.join("policy.json")
    }
    pub fn report_stem(&self) -> PathBuf {
        self.reports.join("report")
    }

    /// Manifest key: workdir-relative with `/` separators when possible.
    fn key(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.workdir).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn resolve(&self, key: &str) -> PathBuf {
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub env: u64,
    pub split: u64,
    pub train: u64,
    pub vocabulary: u64,
    pub eval_states: u64,
    pub ppo: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let d = |salt| rng::derive(master, &[salt]);
        Seeds {
            master,
            env: master,
            split: d(1),
            train: d(2),
            vocabulary: d(3),
            eval_states: d(4),
            ppo: d(5),
        }
    }
}

/// Git blob hash (`sha256("blob <len>\0" ‖ content)`), lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> PResult<String> {
    Ok(content_hash(&fs::read(path).map_err(|e| io_err(path, e))?))
}

fn json_hash<T: Serialize>(value: &T) -> String {
    content_hash(&serde_json::to_vec(value).expect("config serializes"))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> PResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = path.file_name().map_or("file".into(), |n| n.to_string_lossy().into_owned());
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> PResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> PResult<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        PipelineError::Missing(format!("{} is unreadable: {e}", path.display()))
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> PResult<()> {
    let mut bytes = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut bytes, row).map_err(Error::from)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    TrainReward,
    EvalReward,
    AdaptPolicy,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generate,
        Stage::TrainReward,
        Stage::EvalReward,
        Stage::AdaptPolicy,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainReward => "train-reward",
            Stage::EvalReward => "eval-reward",
            Stage::AdaptPolicy => "adapt-policy",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::TrainReward => &[Stage::Generate],
            Stage::EvalReward | Stage::AdaptPolicy => &[Stage::Generate, Stage::TrainReward],
            Stage::Report => &[Stage::EvalReward],
        }
    }

    fn depends_on(self, other: Stage) -> bool {
        self.upstream()
            .iter()
            .any(|&u| u == other || u.depends_on(other))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub started_at: u64,
    pub completed_at: u64,
    /// Upstream files and their hashes at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Methods skipped under `--partial`, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub skipped: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            config: serde_json::to_value(cfg).expect("config serializes"),
            seeds: Seeds::from_master(cfg.seed),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> PResult<Option<Self>> {
        match fs::read(path) {
            Ok(bytes) => {
                let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| {
                    PipelineError::Missing(format!("{} is unreadable: {e}", path.display()))
                })?;
                if m.format_version != MANIFEST_VERSION {
                    return Err(PipelineError::Missing(format!(
                        "{} has format version {}, expected {MANIFEST_VERSION}",
                        path.display(),
                        m.format_version
                    )));
                }
                Ok(Some(m))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path, e)),
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }
}

/// Exclusive hold on a workdir; the lock file is removed on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> PResult<Self> {
        fs::create_dir_all(workdir).map_err(|e| io_err(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(PipelineError::Config(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Rerun stages even when their records are current.
    pub force: bool,
    /// Tolerate per-method failures and missing evaluations (gap rows in the report).
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Ran(Stage),
    UpToDate(Stage),
}

#[derive(Debug, Serialize, Deserialize)]
struct Splits {
    reward_train: Vec<usize>,
    reward_test: Vec<usize>,
    policy_train: Vec<usize>,
}

/// Descriptor written next to each reward checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    method: Method,
    head: ModelHead,
    /// File name of the network checkpoint in the same directory.
    checkpoint: Option<String>,
}

#[derive(Debug, Serialize)]
struct StepDumpRow {
    trajectory: usize,
    step: usize,
    r_hat: f64,
    label: Option<bool>,
    g: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyReport {
    pub reward_method: Method,
    pub reference_return: f64,
    pub adapted_return: f64,
    pub gain: f64,
    pub adapted_mc: policy::PolicyEvaluation,
    pub reference_mc: policy::PolicyEvaluation,
    pub final_kl: f64,
    pub max_kl: f64,
}

struct Loaded {
    train: Dataset,
    test: Dataset,
    policy: Dataset,
    test_truth: Option<GroundTruth>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    layout: Layout,
    seeds: Seeds,
    manifest: RunManifest,
    opts: RunOptions,
    _lock: WorkdirLock,
}

impl Pipeline {
    /// Locks the workdir and loads (or starts) its manifest.
    pub fn open(cfg: ExperimentConfig, opts: RunOptions) -> PResult<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let lock = WorkdirLock::acquire(&layout.workdir)?;
        let fresh = RunManifest::new(&cfg);
        let mut manifest = RunManifest::load(&layout.manifest_file())?.unwrap_or_else(|| fresh.clone());
        manifest.config = fresh.config;
        manifest.seeds = fresh.seeds;
        Ok(Pipeline {
            seeds: Seeds::from_master(cfg.seed),
            cfg,
            layout,
            manifest,
            opts,
            _lock: lock,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_all(&mut self) -> PResult<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s)).collect()
    }

    /// Hash of the configuration that determines a stage's outputs.
    fn stage_config_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let v = match stage {
            Stage::Generate => serde_json::json!({"seed": c.seed, "env": c.env, "split": c.split}),
            Stage::TrainReward => serde_json::json!({
                "up": self.stage_config_hash(Stage::Generate),
                "methods": c.methods, "geli": c.geli, "reward_train": c.reward_train,
            }),
            Stage::EvalReward => serde_json::json!({
                "up": self.stage_config_hash(Stage::TrainReward), "report": c.report,
            }),
            Stage::AdaptPolicy => serde_json::json!({
                "up": self.stage_config_hash(Stage::TrainReward), "ppo": c.ppo, "policy": c.policy,
            }),
            Stage::Report => serde_json::json!({"up": self.stage_config_hash(Stage::EvalReward)}),
        };
        json_hash(&v)
    }

    /// Upstream outputs with their current hashes; errors if any changed since recorded.
    fn verified_inputs(&self, stage: Stage) -> PResult<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &up in stage.upstream() {
            let rec = self.manifest.stage(up).ok_or_else(|| {
                PipelineError::Missing(format!("stage {up} has not completed; run it before {stage}"))
            })?;
            for (key, recorded) in &rec.outputs {
                let path = self.layout.resolve(key);
                if !path.exists() && self.opts.partial && stage == Stage::Report {
                    continue;
                }
                let current = file_hash(&path).map_err(|e| match e {
                    PipelineError::Missing(m) => {
                        PipelineError::Missing(format!("output of stage {up} is gone: {m}"))
                    }
                    other => other,
                })?;
                if &current != recorded {
                    return Err(PipelineError::Missing(format!(
                        "{key} changed since stage {up} wrote it; rerun {up} with --force"
                    )));
                }
                inputs.insert(key.clone(), current);
            }
        }
        Ok(inputs)
    }

    fn outputs_intact(&self, rec: &StageRecord) -> bool {
        rec.outputs
            .iter()
            .all(|(k, h)| file_hash(&self.layout.resolve(k)).is_ok_and(|c| &c == h))
    }

    pub fn run_stage(&mut self, stage: Stage) -> PResult<StageOutcome> {
        let config_hash = self.stage_config_hash(stage);
        let inputs = self.verified_inputs(stage)?;
        if let Some(rec) = self.manifest.stage(stage) {
            if !self.opts.force {
                if rec.config_hash != config_hash {
                    return Err(PipelineError::Config(format!(
                        "configuration changed since stage {stage} ran; rerun with --force"
                    )));
                }
                if rec.inputs == inputs && self.outputs_intact(rec) {
                    return Ok(StageOutcome::UpToDate(stage));
                }
                if rec.inputs == inputs {
                    return Err(PipelineError::Missing(format!(
                        "outputs of stage {stage} were modified; rerun with --force"
                    )));
                }
            }
        } else if stage == Stage::Generate && !self.opts.force {
            let existing = [self.layout.dataset_file(), self.layout.truth_file()];
            if let Some(p) = existing.iter().find(|p| p.exists()) {
                return Err(PipelineError::Config(format!(
                    "{} exists but is not recorded in the manifest; use --force to overwrite",
                    p.display()
                )));
            }
        }

        let started_at = now();
        let (outputs, skipped) = match stage {
            Stage::Generate => (self.generate()?, BTreeMap::new()),
            Stage::TrainReward => self.train_reward()?,
            Stage::EvalReward => self.eval_reward()?,
            Stage::AdaptPolicy => (self.adapt_policy()?, BTreeMap::new()),
            Stage::Report => (self.report()?, BTreeMap::new()),
        };
        let mut hashed = BTreeMap::new();
        for path in outputs {
            hashed.insert(self.layout.key(&path), file_hash(&path)?);
        }
        self.manifest
            .stages
            .retain(|name, _| Stage::ALL.iter().all(|s| s.name() != name || !s.depends_on(stage)));
        self.manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                config_hash,
                started_at,
                completed_at: now(),
                inputs,
                outputs: hashed,
                skipped,
            },
        );
        write_json(&self.layout.manifest_file(), &self.manifest)?;
        Ok(StageOutcome::Ran(stage))
    }

    fn generate(&self) -> PResult<Vec<PathBuf>> {
        let env = EnvConfig {
            seed: self.seeds.env,
            ..self.cfg.env
        };
        let (data, truth) = synth::generate(&env)?;
        let [reward_train, reward_test, policy_train] =
            traj::split_indices(data.len(), self.cfg.split, self.seeds.split)?;
        fs::create_dir_all(&self.layout.dataset).map_err(|e| io_err(&self.layout.dataset, e))?;
        let (df, tf, sf) = (
            self.layout.dataset_file(),
            self.layout.truth_file(),
            self.layout.splits_file(),
        );
        traj::write_jsonl(&data, &df)?;
        synth::write_truth_jsonl(&truth, &tf)?;
        write_json(
            &sf,
            &Splits {
                reward_train,
                reward_test,
                policy_train,
            },
        )?;
        Ok(vec![df, tf, sf])
    }

    fn load(&self) -> PResult<Loaded> {
        let spec = FeatureSpec::precomputed(self.cfg.env.feature_dim);
        let data = traj::load_jsonl(self.layout.dataset_file(), &spec)?;
        let splits: Splits = read_json(&self.layout.splits_file())?;
        let truth_path = self.layout.truth_file();
        let truth = if truth_path.exists() {
            Some(synth::read_truth_jsonl(&truth_path)?)
        } else {
            None
        };
        Ok(Loaded {
            train: data.subset(&splits.reward_train, SplitTag::RewardTrain)?,
            test: data.subset(&splits.reward_test, SplitTag::RewardTest)?,
            policy: data.subset(&splits.policy_train, SplitTag::PolicyTrain)?,
            test_truth: truth.map(|t| t.subset(&splits.reward_test)),
        })
    }

    /// Runs `f`; under `--partial` a failure is recorded and yields `None`.
    fn tolerate<T>(
        &self,
        method: Method,
        skipped: &mut BTreeMap<String, String>,
        f: impl FnOnce() -> PResult<T>,
    ) -> PResult<Option<T>> {
        match f() {
            Ok(v) => Ok(Some(v)),
            Err(e) if self.opts.partial => {
                eprintln!("warning: {method} skipped: {e}");
                skipped.insert(method.tag(), e.to_string());
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn train_reward(&self) -> PResult<(Vec<PathBuf>, BTreeMap<String, String>)> {
        let data = self.load()?;
        fs::create_dir_all(&self.layout.checkpoints).map_err(|e| io_err(&self.layout.checkpoints, e))?;
        fs::create_dir_all(&self.layout.logs).map_err(|e| io_err(&self.layout.logs, e))?;
        let mut outputs = Vec::new();
        let mut skipped = BTreeMap::new();
        for &method in &self.cfg.methods {
            for stale in [
                self.layout.model_file(method),
                self.layout.checkpoint_file(method),
                self.layout.train_log(method),
            ] {
                let _ = fs::remove_file(stale);
            }
            let trained = self.tolerate(method, &mut skipped, || {
                train::train_reward(
                    method,
                    &data.train,
                    &self.cfg.geli,
                    &self.cfg.reward_train,
                    self.seeds.train,
                )
                .map_err(PipelineError::from)
            })?;
            let Some(trained) = trained else { continue };
            let ckpt = match (trained.model.net(), &trained.optimizer) {
                (Some(net), Some(opt)) => {
                    let path = self.layout.checkpoint_file(method);
                    checkpoint::save_checkpoint(net, opt, &path)?;
                    outputs.push(path.clone());
                    path.file_name().map(|n| n.to_string_lossy().into_owned())
                }
                _ => None,
            };
            let model_path = self.layout.model_file(method);
            write_json(
                &model_path,
                &ModelFile {
                    method,
                    head: trained.model.head(),
                    checkpoint: ckpt,
                },
            )?;
            outputs.push(model_path);
            if !trained.log.is_empty() {
                let log_path = self.layout.train_log(method);
                write_jsonl(&log_path, &trained.log)?;
                outputs.push(log_path);
            }
        }
        if outputs.is_empty() {
            return Err(PipelineError::Numerical("no method trained successfully".into()));
        }
        Ok((outputs, skipped))
    }

    fn load_model(&self, method: Method) -> PResult<RewardModel> {
        let path = self.layout.model_file(method);
        let desc: ModelFile = read_json(&path)?;
        let net = match &desc.checkpoint {
            Some(name) => Some(checkpoint::load_checkpoint(self.layout.checkpoints.join(name))?.0),
            None => None,
        };
        RewardModel::from_head(desc.head, net)
            .ok_or_else(|| PipelineError::Missing(format!("{} names no checkpoint", path.display())))
    }

    fn eval_reward(&self) -> PResult<(Vec<PathBuf>, BTreeMap<String, String>)> {
        let data = self.load()?;
        let mut outputs = Vec::new();
        let mut skipped = BTreeMap::new();
        for &method in &self.cfg.methods {
            let _ = fs::remove_file(self.layout.eval_file(method));
            let done = self.tolerate(method, &mut skipped, || {
                let model = self.load_model(method)?;
                let report =
                    eval::evaluate(&model, &data.test, data.test_truth.as_ref(), &method.tag())?;
                let path = self.layout.eval_file(method);
                write_json(&path, &report)?;
                let mut files = vec![path];
                if self.cfg.report.per_step_dump {
                    let dump = self.step_dump(&model, &data)?;
                    let path = self.layout.step_dump(method);
                    write_jsonl(&path, &dump)?;
                    files.push(path);
                }
                Ok(files)
            })?;
            outputs.extend(done.into_iter().flatten());
        }
        if outputs.is_empty() {
            return Err(PipelineError::Missing("no method could be evaluated".into()));
        }
        Ok((outputs, skipped))
    }

    fn step_dump(&self, model: &RewardModel, data: &Loaded) -> PResult<Vec<StepDumpRow>> {
        let mut rows = Vec::new();
        for (i, t) in data.test.trajectories().iter().enumerate() {
            let r = model.step_rewards(t)?;
            for (j, (s, r_hat)) in t.steps().iter().zip(r).enumerate() {
                rows.push(StepDumpRow {
                    trajectory: i,
                    step: j,
                    r_hat,
                    label: s.mm_label,
                    g: data.test_truth.as_ref().map(|g| g.per_step[i][j]),
                });
            }
        }
        Ok(rows)
    }

    fn adapt_policy(&self) -> PResult<Vec<PathBuf>> {
        let method = self.cfg.policy.reward_method;
        if !self.layout.model_file(method).exists() {
            return Err(PipelineError::Missing(format!(
                "no trained reward for {method}; add it to methods and run train-reward"
            )));
        }
        let model = self.load_model(method)?;
        let data = self.load()?;
        let env = EnvConfig {
            seed: self.seeds.env,
            ..self.cfg.env
        };
        let ppo = PpoConfig {
            seed: self.seeds.ppo,
            ..self.cfg.ppo
        };
        let vocab = synth::generate_vocabulary(&env, ppo.num_actions, self.seeds.vocabulary)?;
        let pool: Vec<Vec<f64>> = data.policy.steps().map(|s| s.state.clone()).collect();
        let eval_states = synth::generate_states(&env, self.cfg.policy.eval_episodes, self.seeds.eval_states)?;

        let (adapted, opt, log) =
            policy::adapt_policy(policy::model_reward(&model, &vocab), &vocab, &pool, &ppo, true)?;
        if let Some(bad) = log.iter().find(|e| !e.kl.is_finite()) {
            return Err(PipelineError::Numerical(format!("KL is {} at step {}", bad.kl, bad.step)));
        }
        let reference = PolicyParams::uniform(ppo.num_actions, env.feature_dim);
        let reference_return = policy::expected_return(&reference, &eval_states, &vocab.true_rewards)?;
        let adapted_return = policy::expected_return(&adapted, &eval_states, &vocab.true_rewards)?;
        let mc_seed = rng::derive(self.seeds.eval_states, &[1]);
        let report = PolicyReport {
            reward_method: method,
            reference_return,
            adapted_return,
            gain: adapted_return - reference_return,
            adapted_mc: policy::evaluate_policy(&adapted, &eval_states, &vocab.true_rewards, mc_seed)?,
            reference_mc: policy::evaluate_policy(&reference, &eval_states, &vocab.true_rewards, mc_seed)?,
            final_kl: log.last().map_or(0.0, |e| e.kl),
            max_kl: log.iter().map(|e| e.kl).fold(0.0, f64::max),
        };

        let ckpt = self.layout.policy_checkpoint();
        fs::create_dir_all(&self.layout.checkpoints).map_err(|e| io_err(&self.layout.checkpoints, e))?;
        policy::save_policy(&adapted, &opt, &ckpt)?;
        let rl_log = self.layout.rl_log();
        write_jsonl(&rl_log, &log)?;
        let rep = self.layout.policy_report();
        write_json(&rep, &report)?;
        Ok(vec![ckpt, rl_log, rep])
    }

    fn report(&self) -> PResult<Vec<PathBuf>> {
        let mut rows = Vec::new();
        for &method in &self.cfg.methods {
            let path = self.layout.eval_file(method);
            let report = if path.exists() {
                Some(read_json::<EvalReport>(&path)?)
            } else if self.opts.partial {
                None
            } else {
                return Err(PipelineError::Missing(format!(
                    "no evaluation for {method} ({}); run eval-reward or pass --partial",
                    path.display()
                )));
            };
            rows.push(ReportRow {
                method_tag: method.tag(),
                report,
            });
        }
        if rows.iter().all(|r| r.report.is_none()) {
            return Err(PipelineError::Missing("no evaluation artifacts to report".into()));
        }
        let mut notes = vec![
            "Mean and Mode are constant per-step baselines: Mean is the average of R/T; \
             Mode is the most frequent return on a grid one decade finer than the return range, divided by the mean horizon.",
        ];
        if rows.iter().any(|r| r.report.is_none()) {
            notes.push("NA marks methods without an evaluation.");
        }
        let stem = self.layout.report_stem();
        fs::create_dir_all(&self.layout.reports).map_err(|e| io_err(&self.layout.reports, e))?;
        eval::emit_table(&rows, &stem, &notes)?;
        Ok(vec![stem.with_extension("csv"), stem.with_extension("json")])
    }
}

/// Writes a config file with every key at its default value.
pub fn default_config_toml() -> String {
    toml::to_string(&ExperimentConfig::default()).expect("default config serializes")
}

pub fn write_text(path: &Path, text: &str) -> PResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}
