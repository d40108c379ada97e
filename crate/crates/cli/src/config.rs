use std::path::Path;

use branchgen_core::branch::FilterConfig;
use branchgen_core::diffusion::DiffusionConfig;
use branchgen_core::dt::DtConfig;
use branchgen_core::env::{stitch_expert_route, stitch_maze, MazeSpec, Physics, Route, StitchRecipe, STITCH_MAZE_LAYOUT};
use branchgen_core::tvf::TvfConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    /// ASCII layout: `#` wall, `.` free, `S` start, `G` goal.
    pub layout: String,
    pub physics: Physics,
}

impl Default for MazeConfig {
    fn default() -> Self {
        Self { layout: STITCH_MAZE_LAYOUT.to_string(), physics: Physics::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Explicit routes; when empty the stitch recipe is used, which needs
    /// the stitch layout.
    pub routes: Vec<Route>,
    pub stitch: StitchRecipe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Evaluation target is this multiple of the largest return-to-go in
    /// the training dataset.
    pub target_rtg_scale: f64,
    /// Episodes of the uniform-random reference policy.
    pub random_episodes: usize,
    /// Episodes of the expert reference route.
    pub expert_episodes: usize,
    /// Expert route; the stitch layout has a built-in one.
    pub expert: Option<Route>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50, target_rtg_scale: 1.0, random_episodes: 100, expert_episodes: 5, expert: None }
    }
}

/// Everything a run depends on. A single file drives a run; every field has
/// a default so config files only list what they change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub maze: MazeConfig,
    pub dataset: DatasetConfig,
    pub tvf: TvfConfig,
    pub diffusion: DiffusionConfig,
    pub filter: FilterConfig,
    pub dt: DtConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            maze: MazeConfig::default(),
            dataset: DatasetConfig::default(),
            tvf: TvfConfig::default(),
            diffusion: DiffusionConfig::default(),
            filter: FilterConfig::default(),
            dt: DtConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.maze_spec()?;
        self.routes(&spec)?;
        self.expert_route(&spec)?;
        self.tvf.validate()?;
        self.diffusion.validate()?;
        self.filter.validate()?;
        self.dt.validate()?;
        if self.eval.episodes == 0 || self.eval.random_episodes == 0 || self.eval.expert_episodes == 0 {
            return Err(PipelineError::Config("evaluation episode counts must be positive".into()));
        }
        if !(self.eval.target_rtg_scale.is_finite() && self.eval.target_rtg_scale > 0.0) {
            return Err(PipelineError::Config("eval.target_rtg_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn maze_spec(&self) -> Result<MazeSpec> {
        Ok(MazeSpec::from_ascii(&self.maze.layout, &self.maze.physics)?)
    }

    fn is_stitch_layout(&self, spec: &MazeSpec) -> bool {
        spec.walls == stitch_maze().walls
    }

    /// Collection routes: the explicit list, or the stitch recipe.
    pub fn routes(&self, spec: &MazeSpec) -> Result<Vec<Route>> {
        if !self.dataset.routes.is_empty() {
            return Ok(self.dataset.routes.clone());
        }
        if !self.is_stitch_layout(spec) {
            return Err(PipelineError::Config("dataset.routes is required for layouts other than the stitch maze".into()));
        }
        Ok(self.dataset.stitch.routes(spec))
    }

    pub fn expert_route(&self, spec: &MazeSpec) -> Result<Route> {
        match &self.eval.expert {
            Some(route) => Ok(Route { count: self.eval.expert_episodes, ..route.clone() }),
            None if self.is_stitch_layout(spec) => Ok(stitch_expert_route(spec, self.eval.expert_episodes)),
            None => Err(PipelineError::Config("eval.expert is required for layouts other than the stitch maze".into())),
        }
    }

    /// SHA-256 over the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-stage seed from the stage name and the master seed.
pub fn stage_seed(stage: &str, master: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(master.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// A small, fast configuration for smoke runs.
pub fn smoke_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.stitch.dead_end_count = 12;
    c.dataset.stitch.goal_count = 12;
    c.tvf.hidden = vec![32, 32];
    c.tvf.steps = 200;
    c.tvf.batch_size = 64;
    c.diffusion.width = 16;
    c.diffusion.blocks = 1;
    c.diffusion.heads = 2;
    c.diffusion.cond_hidden = 32;
    c.diffusion.steps = 200;
    c.diffusion.batch_size = 16;
    c.filter.budget_fraction = 1.0;
    c.dt.context = 5;
    c.dt.width = 16;
    c.dt.blocks = 1;
    c.dt.steps = 200;
    c.dt.batch_size = 16;
    c.eval.episodes = 5;
    c.eval.random_episodes = 20;
    c.eval.expert_episodes = 2;
    c
}
