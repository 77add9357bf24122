//! Detections, ground truth, synthetic scene generation and dataset files.

pub mod generator;
pub mod geometry;
pub mod io;
pub mod rules;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generator::{generate_dataset, GeneratorConfig};
pub use geometry::{box_stats, iou, BBox, BoxStats};
pub use io::{load_scenes, save_scenes};

/// Class id reserved for people.
pub const PERSON_CLASS: usize = 0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid box {0:?}")]
    InvalidBox(BBox),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// One detected entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub is_human: bool,
    pub feature: Vec<f64>,
    pub det_score: f64,
}

/// A ground-truth ⟨human, object, interactions⟩ triplet group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInteraction {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub interaction_classes: BTreeSet<usize>,
}

/// `[h, w, d]` cell features, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.w + col) * self.d;
        &self.data[start..start + self.d]
    }
}

/// Generator-side state the interaction rules are evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    /// Boxes before detection jitter, parallel to `Scene::instances`.
    pub boxes: Vec<BBox>,
    pub active: Vec<bool>,
    /// `(row, col)` grid cells carrying a context marker.
    pub markers: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub instances: Vec<Instance>,
    pub gt: Vec<GtInteraction>,
    pub feature_grid: FeatureGrid,
    pub truth: SceneTruth,
}

impl Scene {
    pub fn num_humans(&self) -> usize {
        self.instances.iter().filter(|i| i.is_human).count()
    }

    /// Structural checks applied after loading.
    pub fn validate(&self) -> Result<(), String> {
        if self.num_humans() == 0 {
            return Err("scene has no human instance".into());
        }
        let d_app = self.instances.first().map_or(0, |i| i.feature.len());
        for (k, inst) in self.instances.iter().enumerate() {
            inst.bbox.validate().map_err(|e| format!("instance {k}: {e}"))?;
            if inst.feature.len() != d_app {
                return Err(format!("instance {k}: feature length {}", inst.feature.len()));
            }
            if inst.is_human != (inst.class_id == PERSON_CLASS) {
                return Err(format!("instance {k}: is_human disagrees with class"));
            }
        }
        for (k, g) in self.gt.iter().enumerate() {
            if g.interaction_classes.is_empty() {
                return Err(format!("gt {k}: empty interaction set"));
            }
        }
        let grid = &self.feature_grid;
        if grid.data.len() != grid.h * grid.w * grid.d {
            return Err("feature grid size mismatch".into());
        }
        if self.truth.boxes.len() != self.instances.len() || self.truth.active.len() != self.instances.len() {
            return Err("truth arrays do not match instance count".into());
        }
        Ok(())
    }
}
