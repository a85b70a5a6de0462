//! Run configuration: one JSON document covering simulation, model and training.
//!
//! Every field has a default, so `{}` is a complete configuration. Unknown
//! keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::rayformer::{NetworkConfig, SceneBounds};
use crate::sci::{compress, generate_masks, render_ground_truth, SceneSpec};
use crate::training::{derive_seed, LossConfig, Problem, TrainConfig};

/// The simulated capture: camera, scene, masks and sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub n_frames: usize,
    /// Probability that a mask entry is open.
    pub mask_density: f64,
    pub noise_sigma: f64,
    /// Samples per ray for the ground-truth renders.
    pub gt_oversample: usize,
    pub near: f64,
    pub far: f64,
    pub scene: SceneSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            height: 32,
            width: 32,
            focal: 32.0,
            n_frames: 4,
            mask_density: 0.5,
            noise_sigma: 0.0,
            gt_oversample: 256,
            near: 0.5,
            far: 4.0,
            scene: SceneSpec::default(),
        }
    }
}

impl SimulationConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.height, self.width)
    }

    pub fn near_far(&self) -> (f64, f64) {
        (self.near, self.far)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub model: NetworkConfig,
    pub bounds: SceneBounds,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

const STREAM_MASKS: u64 = 10;
const STREAM_NOISE: u64 = 11;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let sim = &self.simulation;
        sim.intrinsics()?;
        sim.scene.validate()?;
        if sim.n_frames == 0 {
            return Err(Error::Config("n_frames must be >= 1".into()));
        }
        if !(sim.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(sim.mask_density > 0.0 && sim.mask_density < 1.0) {
            return Err(Error::Config("mask_density must be in (0, 1)".into()));
        }
        if !(sim.near > 0.0 && sim.far > sim.near) {
            return Err(Error::Config("need 0 < near < far".into()));
        }
        if sim.gt_oversample < 4 * self.train.l_samples {
            return Err(Error::Config(format!(
                "gt_oversample {} must be at least 4x the training samples per ray ({})",
                sim.gt_oversample, self.train.l_samples
            )));
        }
        if self.train.window[0] > sim.height || self.train.window[1] > sim.width {
            return Err(Error::Config("training window exceeds the image".into()));
        }
        self.model.validate()?;
        self.bounds.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Renders the ground truth, draws masks and noise, and encodes the measurement.
    pub fn simulate(&self) -> Result<Problem> {
        self.validate()?;
        let sim = &self.simulation;
        let intr = sim.intrinsics()?;
        let frames = render_ground_truth(
            &sim.scene,
            &intr,
            sim.n_frames,
            sim.gt_oversample,
            sim.near_far(),
        )?;
        let masks = generate_masks(
            derive_seed(self.seed, STREAM_MASKS, 0),
            sim.n_frames,
            sim.height,
            sim.width,
            sim.mask_density,
        )?;
        let measurement = compress(
            &frames,
            &masks,
            sim.noise_sigma,
            derive_seed(self.seed, STREAM_NOISE, 0),
        )?;
        Ok(Problem {
            measurement,
            masks,
            intrinsics: intr,
            near_far: sim.near_far(),
            ground_truth: Some(frames),
        })
    }
}
