//! Run configuration: one JSON file describes an entire experiment (scene or
//! dataset, camera rig, pose noise, cascade settings, output directory and
//! the single global seed every random stream derives from).

use crate::cascade::CascadeConfig;
use crate::error::{CbarfError, Result};
use crate::scene::SceneSpec;
use crate::sub_seed;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Procedural scene parameters; the generation seed comes from the global
/// seed's "scene" stream, not from here.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneGen {
    pub n_blobs: usize,
    pub resolution: [usize; 3],
}

/// Synthetic camera rig: hemisphere cameras looking at the origin.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_views: usize,
    pub radius: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Procedural scene to synthesize; mutually exclusive with `dataset`.
    pub scene: Option<SceneGen>,
    /// Directory holding an existing view set; mutually exclusive with
    /// `scene`.
    pub dataset: Option<PathBuf>,
    pub rig: RigSpec,
    /// Twist noise applied to ground-truth poses before optimization; 0
    /// leaves them untouched.
    pub noise_coefficient: f64,
    /// Fraction of poses to drop before initialization (incomplete-pose
    /// workflow); 0 disables.
    pub drop_fraction: f64,
    pub cascade: CascadeConfig,
    pub output: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn desk_default() -> Self {
        Self {
            scene: Some(SceneGen {
                n_blobs: 8,
                resolution: [48, 48, 48],
            }),
            dataset: None,
            rig: RigSpec {
                n_views: 20,
                radius: 1.3,
                width: 64,
                height: 64,
                focal: 60.0,
            },
            noise_coefficient: 0.15,
            drop_fraction: 0.0,
            cascade: CascadeConfig::desk_default(),
            output: PathBuf::from("out"),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.scene, &self.dataset) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(CbarfError::InvalidArgument(
                    "config needs exactly one of `scene` and `dataset`".into(),
                ))
            }
            (None, Some(path)) => {
                if !path.exists() {
                    return Err(CbarfError::InvalidArgument(format!(
                        "dataset path {} does not exist",
                        path.display()
                    )));
                }
            }
            (Some(_), None) => {}
        }
        if self.rig.n_views < 2 || self.rig.width == 0 || self.rig.height == 0 {
            return Err(CbarfError::InvalidArgument(
                "rig needs >= 2 views and nonzero image dimensions".into(),
            ));
        }
        if self.rig.radius <= 0.0 || self.rig.focal <= 0.0 {
            return Err(CbarfError::InvalidArgument(
                "rig radius and focal must be positive".into(),
            ));
        }
        if self.noise_coefficient < 0.0 {
            return Err(CbarfError::InvalidArgument(
                "noise coefficient must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(CbarfError::InvalidArgument(
                "drop fraction must be in [0, 1)".into(),
            ));
        }
        self.cascade.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CbarfError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Resolved scene spec with the "scene" sub-seed baked in.
    pub fn scene_spec(&self) -> Option<SceneSpec> {
        self.scene.map(|s| SceneSpec {
            seed: self.scene_seed(),
            n_blobs: s.n_blobs,
            resolution: s.resolution,
        })
    }

    pub fn scene_seed(&self) -> u64 {
        sub_seed(self.seed, "scene")
    }

    pub fn rig_seed(&self) -> u64 {
        sub_seed(self.seed, "rig")
    }

    pub fn noise_seed(&self) -> u64 {
        sub_seed(self.seed, "noise")
    }

    pub fn rays_seed(&self) -> u64 {
        sub_seed(self.seed, "rays")
    }

    pub fn drop_seed(&self) -> u64 {
        sub_seed(self.seed, "drop")
    }
}
