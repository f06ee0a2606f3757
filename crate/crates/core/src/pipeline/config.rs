//! Pipeline configuration: one JSON file, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::keyboard::KeyboardGeometry;
use crate::pose::{PoseConfig, PoseLossWeights, PoseRefinerConfig};
use crate::prior::DEFAULT_MIN_COUNT;
use crate::refine::{RefinerConfig, ResidualBounds, SmootherConfig};
use crate::wrist::WristConfig;

use super::run::Stage;
use super::stitch::StitchConfig;

/// Environment variable that overrides [`PipelineConfig::seed`].
pub const SEED_ENV: &str = "TIPSYNTH_SEED";

/// File names inside a model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelFiles {
    pub prior: String,
    pub s2_1: String,
    pub s2_2: String,
    pub s2_3: String,
    pub s3: String,
    pub s4: String,
    pub bones: String,
}

impl Default for ModelFiles {
    fn default() -> Self {
        Self {
            prior: "prior.json".into(),
            s2_1: "s2_1.tpnn".into(),
            s2_2: "s2_2.tpnn".into(),
            s2_3: "s2_3.tpnn".into(),
            s3: "s3.tpnn".into(),
            s4: "s4.tpnn".into(),
            bones: "bones.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps_s2_1: usize,
    pub steps_s2_2: usize,
    pub steps_s2_3: usize,
    pub steps_s3: usize,
    pub steps_s4: usize,
    /// Steps for the full-skeleton refiner after the pose network.
    pub steps_s4_refine: usize,
    /// Crop length for the convolutional stages.
    pub crop: usize,
    pub lambda_pos: f64,
    pub lambda_vel: f64,
    pub pose_weights: PoseLossWeights,
    /// Extra jitter added to smoother inputs during training, mm.
    pub smoother_noise_mm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            steps_s2_1: 1000,
            steps_s2_2: 1000,
            steps_s2_3: 600,
            steps_s3: 600,
            steps_s4: 400,
            steps_s4_refine: 200,
            crop: 240,
            lambda_pos: 1.0,
            lambda_vel: 0.5,
            pose_weights: PoseLossWeights::default(),
            smoother_noise_mm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Keyboard geometry JSON; the standard layout when absent.
    pub keyboard: Option<PathBuf>,
    pub model_dir: PathBuf,
    pub models: ModelFiles,
    pub prior_min_count: usize,
    pub baseline: BaselineConfig,
    pub refiner: RefinerConfig,
    pub smoother: SmootherConfig,
    pub wrist: WristConfig,
    pub pose: PoseConfig,
    pub pose_refiner: PoseRefinerConfig,
    pub bounds: ResidualBounds,
    pub stitch: StitchConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    /// Stage whose fingertips feed the contact metrics.
    pub tap: Stage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            keyboard: None,
            model_dir: PathBuf::from("models"),
            models: ModelFiles::default(),
            prior_min_count: DEFAULT_MIN_COUNT,
            baseline: BaselineConfig::default(),
            refiner: RefinerConfig {
                dim: 32,
                depth: 2,
                heads: 4,
                film_hidden: 32,
                ..RefinerConfig::default()
            },
            smoother: SmootherConfig::default(),
            wrist: WristConfig::default(),
            pose: PoseConfig::desk(),
            pose_refiner: PoseRefinerConfig::default(),
            bounds: ResidualBounds::default(),
            stitch: StitchConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            tap: Stage::S2_2,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    /// `TIPSYNTH_SEED` overrides the seed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.model_dir.is_relative() {
            cfg.model_dir = base.join(&cfg.model_dir);
        }
        if let Some(k) = &cfg.keyboard {
            if k.is_relative() {
                cfg.keyboard = Some(base.join(k));
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let b = &self.bounds;
        if !(b.fingertip_mm > 0.0 && b.fingertip_mm <= 80.0 && b.wrist_mm > 0.0 && b.wrist_mm <= 50.0) {
            return bad(format!("residual bounds {b:?} must lie in (0, 80] and (0, 50] mm"));
        }
        let r = &self.refiner;
        if r.dim == 0 || r.heads == 0 || r.dim % r.heads != 0 || r.depth == 0 {
            return bad(format!("refiner dim {} must be a positive multiple of heads {}", r.dim, r.heads));
        }
        if self.smoother.fallback_radius == 0 {
            return bad("smoother fallback radius must be at least 1".into());
        }
        if self.pose.channels.is_empty() || self.pose.kernel % 2 == 0 {
            return bad("pose network needs at least one level and an odd kernel".into());
        }
        let s = &self.stitch;
        if !(s.order >= 2 && s.order % 2 == 0 && s.cutoff_hz > 0.0 && s.cutoff_hz < 29.0) {
            return bad(format!("stitch filter {s:?} out of range"));
        }
        if self.prior_min_count == 0 {
            return bad("prior_min_count must be positive".into());
        }
        if self.eval.onset_tol_ms <= 0.0 || self.eval.min_frames == 0 {
            return bad("evaluator tolerance and min_frames must be positive".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr < 1.0) || t.crop < 16 {
            return bad("training learning rate must lie in (0, 1) and crop be at least 16".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<KeyboardGeometry> {
        match &self.keyboard {
            Some(p) => KeyboardGeometry::load(p),
            None => Ok(KeyboardGeometry::default()),
        }
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.model_dir.join(name)
    }

    /// Model files a run through `stage` needs. The smoother is optional.
    pub fn required_models(&self, stage: Stage) -> Vec<PathBuf> {
        let m = &self.models;
        let mut out = vec![self.model_path(&m.prior)];
        if stage >= Stage::S2_1 {
            out.push(self.model_path(&m.s2_1));
        }
        if stage >= Stage::S2_2 {
            out.push(self.model_path(&m.s2_2));
        }
        if stage >= Stage::S3 {
            out.push(self.model_path(&m.s3));
        }
        if stage >= Stage::S4 {
            out.push(self.model_path(&m.s4));
            out.push(self.model_path(&m.bones));
        }
        out
    }

    pub fn check_models(&self, stage: Stage) -> Result<()> {
        let missing: Vec<String> = self
            .required_models(stage)
            .into_iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing model files: {}", missing.join(", "))))
        }
    }
}
