//! Procedural multi-view datasets.
//!
//! Each sample is a random head scene, one input webcam view and a ring of
//! closer supervision views, rendered by an exact ray tracer that shares no
//! code with the Gaussian rasterizer.

pub mod cameras;
pub mod dataset;
pub mod noise;
pub mod raytrace;
pub mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_sample, load_dataset_sample, parse_cameras, validate_dataset, Manifest, MultiViewSample, SampleEntry,
    ValidationReport, View,
};
pub use raytrace::raytrace_view;
pub use scene::{build_scene, ProceduralScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub input_width: u32,
    pub input_height: u32,
    /// Horizontal field of view of the input camera, degrees.
    pub input_fov_deg: f64,
    pub view_size: u32,
    pub view_fov_deg: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    pub view_distance: f64,
    pub cap_angle_deg: f64,
    pub face_angle_deg: f64,
    /// Total views per sample, input included.
    pub n_views: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 1,
            input_width: 96,
            input_height: 64,
            input_fov_deg: 60.0,
            view_size: 64,
            view_fov_deg: 50.0,
            distance_min: 0.4,
            distance_max: 1.0,
            view_distance: 0.35,
            cap_angle_deg: 45.0,
            face_angle_deg: 30.0,
            n_views: 11,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("dataset config: {what}")));
        if self.input_width == 0 || self.input_height == 0 || self.view_size == 0 {
            return bad("resolutions must be positive");
        }
        if !(self.distance_min > 0.0 && self.distance_min <= self.distance_max && self.view_distance > 0.0) {
            return bad("distances must be positive and ordered");
        }
        if !(self.cap_angle_deg > 0.0 && self.cap_angle_deg <= 90.0) {
            return bad("cap angle must lie in (0, 90] degrees");
        }
        if !(self.face_angle_deg >= 0.0 && self.face_angle_deg < 90.0) {
            return bad("face angle must lie in [0, 90) degrees");
        }
        if !(self.input_fov_deg > 0.0 && self.input_fov_deg < 180.0 && self.view_fov_deg > 0.0 && self.view_fov_deg < 180.0)
        {
            return bad("fields of view must lie in (0, 180) degrees");
        }
        if self.n_views < 2 {
            return bad("need the input view plus at least one supervision view");
        }
        Ok(())
    }
}
