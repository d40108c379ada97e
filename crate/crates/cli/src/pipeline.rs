use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use branchgen_core::branch::{
    calibrate_delta, expand_dataset, filter, generate_branches, read_candidate_log, write_candidate_log,
    BranchCandidate, FilterConfig,
};
use branchgen_core::dataset::{load_dataset, save_dataset, Dataset};
use branchgen_core::diffusion::{train_diffusion, DiffusionModel};
use branchgen_core::dt::{evaluate, reference_returns, train_dt, DtPolicy, EpisodeTrace, EvalReport, References};
use branchgen_core::env::collect_dataset;
use branchgen_core::tvf::{train_tvf, ValueHeads};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, RunConfig};
use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.bgd";
pub const TVF_FILE: &str = "tvf.ckpt";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const FILTER_FILE: &str = "filter.json";
pub const EXPANDED_FILE: &str = "expanded.bgd";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Collect,
    TrainTvf,
    TrainDiffusion,
    GenBranches,
    Expand,
    TrainDt,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Collect,
        Stage::TrainTvf,
        Stage::TrainDiffusion,
        Stage::GenBranches,
        Stage::Expand,
        Stage::TrainDt,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::TrainTvf => "train-tvf",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::GenBranches => "gen-branches",
            Stage::Expand => "expand",
            Stage::TrainDt => "train-dt",
            Stage::Eval => "eval",
        }
    }

    /// Manifest key; baseline DT stages are recorded separately.
    pub fn key(self, baseline: bool) -> String {
        match (self, baseline) {
            (Stage::TrainDt | Stage::Eval, true) => format!("{}-baseline", self.name()),
            _ => self.name().to_string(),
        }
    }

    /// Upstream stages in pipeline order.
    fn needs(self, baseline: bool) -> Vec<(Stage, bool)> {
        match self {
            Stage::Collect => vec![],
            Stage::TrainTvf | Stage::TrainDiffusion => vec![(Stage::Collect, false)],
            Stage::GenBranches => vec![(Stage::Collect, false), (Stage::TrainTvf, false), (Stage::TrainDiffusion, false)],
            Stage::Expand => vec![(Stage::Collect, false), (Stage::TrainTvf, false), (Stage::GenBranches, false)],
            Stage::TrainDt if baseline => vec![(Stage::Collect, false)],
            Stage::TrainDt => vec![(Stage::Expand, false)],
            Stage::Eval if baseline => vec![(Stage::Collect, false), (Stage::TrainDt, true)],
            Stage::Eval => vec![(Stage::Expand, false), (Stage::TrainDt, false)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// Artifact file names relative to the output directory.
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::parse(path, e))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
    }
}

/// Outcome of the branch stage, next to the candidate log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub enabled: bool,
    pub delta: Option<f64>,
    pub percentile: f64,
    pub attempted: usize,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub baseline: bool,
    pub seed: u64,
    pub dt_seed: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub target_rtg: f64,
    pub references: References,
}

/// One line of an evaluation log: every episode, then the summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum EvalRecord {
    Episode(EpisodeTrace),
    Summary(EvalSummary),
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn dt_file(baseline: bool) -> &'static str {
    if baseline {
        "dt-baseline.ckpt"
    } else {
        "dt.ckpt"
    }
}

pub fn eval_file(baseline: bool) -> &'static str {
    if baseline {
        "eval-baseline.jsonl"
    } else {
        "eval.jsonl"
    }
}

/// A run in one output directory.
pub struct Pipeline {
    config: RunConfig,
    out_dir: PathBuf,
    seed_override: Option<u64>,
    manifest: RunManifest,
}

impl Pipeline {
    /// Open `out_dir`, creating it if needed. An existing manifest must
    /// come from the same config.
    pub fn open(config: RunConfig, out_dir: impl Into<PathBuf>, seed_override: Option<u64>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| PipelineError::io(&out_dir, e))?;
        let hash = config.hash();
        let manifest_path = out_dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            let m = RunManifest::load(&manifest_path)?;
            if m.config_hash != hash {
                return Err(PipelineError::ConfigMismatch { expected: hash, found: m.config_hash });
            }
            m
        } else {
            let config_path = out_dir.join(CONFIG_FILE);
            std::fs::write(&config_path, config.to_toml()).map_err(|e| PipelineError::io(&config_path, e))?;
            let m = RunManifest {
                version: version_string(),
                config_hash: hash,
                master_seed: config.seed,
                stages: BTreeMap::new(),
            };
            m.save(&manifest_path)?;
            m
        };
        Ok(Self { config, out_dir, seed_override, manifest })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    /// Seed of a stage: the override when given, else hashed from the
    /// stage name and the master seed. Baseline stages share the seeds of
    /// their counterparts so the two runs are paired.
    pub fn seed(&self, stage: Stage) -> u64 {
        self.seed_override.unwrap_or_else(|| stage_seed(stage.name(), self.config.seed))
    }

    fn require(&self, stage: Stage, baseline: bool) -> Result<()> {
        for (needed, needed_baseline) in stage.needs(baseline) {
            let key = needed.key(needed_baseline);
            let record = self.manifest.stages.get(&key).ok_or_else(|| PipelineError::MissingStage {
                stage: stage.key(baseline),
                needed: key.clone(),
            })?;
            for file in &record.artifacts {
                let path = self.path(file);
                if !path.exists() {
                    return Err(PipelineError::MissingArtifact { stage: key.clone(), path });
                }
            }
        }
        Ok(())
    }

    /// Drop the records of every stage that consumed the output of `key`.
    fn invalidate_downstream(&mut self, stage: Stage, baseline: bool) {
        let mut stale = vec![(stage, baseline)];
        let mut changed = true;
        while changed {
            changed = false;
            for s in Stage::ALL {
                for b in [false, true] {
                    if !stale.contains(&(s, b)) && s.needs(b).iter().any(|n| stale.contains(n)) {
                        stale.push((s, b));
                        changed = true;
                    }
                }
            }
        }
        for (s, b) in stale.into_iter().skip(1) {
            self.manifest.stages.remove(&s.key(b));
        }
    }

    /// Run one stage; `baseline` selects the unexpanded dataset for the DT
    /// stages and is ignored by the others.
    pub fn run(&mut self, stage: Stage, baseline: bool) -> Result<()> {
        let baseline = baseline && matches!(stage, Stage::TrainDt | Stage::Eval);
        self.require(stage, baseline)?;
        let seed = self.seed(stage);
        let start = Instant::now();
        log::info!("running {} (seed {seed})", stage.key(baseline));
        let artifacts = match stage {
            Stage::Collect => self.collect(seed)?,
            Stage::TrainTvf => self.train_tvf(seed)?,
            Stage::TrainDiffusion => self.train_diffusion(seed)?,
            Stage::GenBranches => self.gen_branches(seed)?,
            Stage::Expand => self.expand()?,
            Stage::TrainDt => self.train_dt(seed, baseline)?,
            Stage::Eval => self.eval(seed, baseline)?,
        };
        self.invalidate_downstream(stage, baseline);
        let record = StageRecord {
            seed,
            artifacts: artifacts.into_iter().map(str::to_string).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.manifest.stages.insert(stage.key(baseline), record);
        self.manifest.save(&self.path(MANIFEST_FILE))
    }

    /// The full chain, followed by the paired baseline.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            self.run(stage, false)?;
        }
        self.run(Stage::TrainDt, true)?;
        self.run(Stage::Eval, true)
    }

    fn load_dataset(&self, file: &str) -> Result<Dataset> {
        Ok(load_dataset(self.path(file))?)
    }

    fn collect(&self, seed: u64) -> Result<Vec<&'static str>> {
        let spec = self.config.maze_spec()?;
        let routes = self.config.routes(&spec)?;
        let ds = collect_dataset(&spec, &routes, &mut ChaCha8Rng::seed_from_u64(seed))?;
        log::info!("collected {} trajectories, {} steps", ds.len(), ds.num_steps());
        save_dataset(&ds, self.path(DATASET_FILE))?;
        Ok(vec![DATASET_FILE])
    }

    fn train_tvf(&self, seed: u64) -> Result<Vec<&'static str>> {
        let ds = self.load_dataset(DATASET_FILE)?;
        let heads = train_tvf(&ds, &self.config.tvf, seed, &mut ChaCha8Rng::seed_from_u64(seed))?;
        heads.save(self.path(TVF_FILE))?;
        Ok(vec![TVF_FILE])
    }

    fn train_diffusion(&self, seed: u64) -> Result<Vec<&'static str>> {
        let ds = self.load_dataset(DATASET_FILE)?;
        let model = train_diffusion(&ds, &self.config.diffusion, seed, &mut ChaCha8Rng::seed_from_u64(seed))?;
        model.save(self.path(DIFFUSION_FILE))?;
        Ok(vec![DIFFUSION_FILE])
    }

    fn gen_branches(&self, seed: u64) -> Result<Vec<&'static str>> {
        let ds = self.load_dataset(DATASET_FILE)?;
        let tvf = ValueHeads::load(self.path(TVF_FILE))?;
        let model = DiffusionModel::load(self.path(DIFFUSION_FILE))?;
        let (candidates, summary) = branch_candidates(&ds, &tvf, &model, &self.config.filter, seed)?;
        write_candidate_log(self.path(CANDIDATES_FILE), &candidates)?;
        write_json(&self.path(FILTER_FILE), &summary)?;
        Ok(vec![CANDIDATES_FILE, FILTER_FILE])
    }

    fn expand(&self) -> Result<Vec<&'static str>> {
        let ds = self.load_dataset(DATASET_FILE)?;
        let tvf = ValueHeads::load(self.path(TVF_FILE))?;
        let candidates = read_candidate_log(self.path(CANDIDATES_FILE))?;
        let expanded = expand_dataset(&ds, &candidates, &tvf)?;
        save_dataset(&expanded, self.path(EXPANDED_FILE))?;
        Ok(vec![EXPANDED_FILE])
    }

    fn training_dataset(&self, baseline: bool) -> Result<Dataset> {
        self.load_dataset(if baseline { DATASET_FILE } else { EXPANDED_FILE })
    }

    fn train_dt(&self, seed: u64, baseline: bool) -> Result<Vec<&'static str>> {
        let ds = self.training_dataset(baseline)?;
        let policy = train_dt(&ds, &self.config.dt, seed, &mut ChaCha8Rng::seed_from_u64(seed))?;
        policy.save(self.path(dt_file(baseline)))?;
        Ok(vec![dt_file(baseline)])
    }

    fn eval(&self, seed: u64, baseline: bool) -> Result<Vec<&'static str>> {
        let ds = self.training_dataset(baseline)?;
        let policy = DtPolicy::load(self.path(dt_file(baseline)))?;
        let report = evaluate_policy(&self.config, &policy, &ds, seed)?;
        log::info!(
            "{}: success {:.2}, normalized score {:.1}",
            if baseline { "DT baseline" } else { "BG+DT" },
            report.success_rate,
            report.normalized_score
        );
        let dt_seed = self.manifest.stages.get(&Stage::TrainDt.key(baseline)).map_or(0, |r| r.seed);
        let summary = EvalSummary {
            baseline,
            seed,
            dt_seed,
            episodes: report.episodes,
            mean_return: report.mean_return,
            success_rate: report.success_rate,
            normalized_score: report.normalized_score,
            target_rtg: report.target_rtg,
            references: report.references,
        };
        let path = self.path(eval_file(baseline));
        let file = File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let records = report.traces.into_iter().map(EvalRecord::Episode).chain([EvalRecord::Summary(summary)]);
        for record in records {
            serde_json::to_writer(&mut out, &record).map_err(|e| PipelineError::parse(&path, e))?;
            out.write_all(b"\n").map_err(|e| PipelineError::io(&path, e))?;
        }
        out.flush().map_err(|e| PipelineError::io(&path, e))?;
        Ok(vec![eval_file(baseline)])
    }
}

/// Roll out a trained DT in the configured maze. The target return is
/// the configured multiple of the largest return-to-go in `ds`, the set
/// the policy was trained on.
pub fn evaluate_policy(config: &RunConfig, policy: &DtPolicy, ds: &Dataset, seed: u64) -> Result<EvalReport> {
    let spec = config.maze_spec()?;
    let expert = config.expert_route(&spec)?;
    let ec = &config.eval;
    let references = reference_returns(&spec, &expert, ec.random_episodes, seed)?;
    let target = ec.target_rtg_scale * ds.max_rtg();
    Ok(evaluate(policy, policy.config.context, &spec, target, ec.episodes, references, seed)?)
}

/// The branch stage on loaded artifacts: calibrate the threshold when the
/// filter is on and has none, generate the budgeted candidates and score
/// each one.
pub fn branch_candidates(
    ds: &Dataset,
    tvf: &ValueHeads,
    model: &DiffusionModel,
    config: &FilterConfig,
    seed: u64,
) -> Result<(Vec<BranchCandidate>, FilterSummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fcfg = config.clone();
    if fcfg.enabled && fcfg.delta.is_none() {
        let (k, h) = (model.config.k, model.config.h);
        fcfg.delta = Some(calibrate_delta(ds, tvf, k, h, &fcfg, &mut rng)?);
    }
    let attempts = fcfg.budget(ds.len());
    let mut candidates = generate_branches(ds, tvf, model, attempts, &mut rng)?;
    let (sd, ad) = (ds.state_dim(), ds.action_dim());
    for c in &mut candidates {
        filter(c, tvf, &fcfg, sd, ad)?;
    }
    let accepted = candidates.iter().filter(|c| c.accepted).count();
    log::info!("accepted {accepted} of {attempts} branches (threshold {:?})", fcfg.delta);
    let summary =
        FilterSummary { enabled: fcfg.enabled, delta: fcfg.delta, percentile: fcfg.percentile, attempted: attempts, accepted };
    Ok((candidates, summary))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

pub fn read_filter_summary(path: &Path) -> Result<FilterSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::parse(path, e))
}

/// Summary record of an evaluation log.
pub fn read_eval_summary(path: &Path) -> Result<EvalSummary> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut last = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if !line.trim().is_empty() {
            last = Some(line);
        }
    }
    let line = last.ok_or_else(|| PipelineError::parse(path, "empty evaluation log"))?;
    match serde_json::from_str(&line).map_err(|e| PipelineError::parse(path, e))? {
        EvalRecord::Summary(s) => Ok(s),
        EvalRecord::Episode(_) => Err(PipelineError::parse(path, "evaluation log has no summary record")),
    }
}
