//! Synthetic multi-person scenes whose poses are correlated across persons,
//! plus patch rendering and the line-delimited dataset format.
//!
//! Every person stands in an axis-aligned box of aspect 3:4. Joint positions
//! are functions of a per-person angle vector, so two persons with equal
//! angles have identical patch-frame keypoints regardless of box size.

mod io;
mod render;
mod template;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{Frame, Joint, KeypointSet, Visibility};

pub use io::{read_dataset, write_atomic, write_dataset};
pub use render::{render_patch, render_patch_with_noise, PatchTransform, EVIDENCE_NOISE, EVIDENCE_SIGMA};
pub use template::{wrap_angle, SkeletonTemplate, TemplateJoint, ANCHOR, BODY_ASPECT};

/// Angular jitter between members of a shared-pose group, radians.
pub const SHARED_POSE_JITTER: f64 = 0.05;
/// Box dilation within which every labeled joint must lie.
pub const BBOX_DILATION: f64 = 0.10;
/// Smallest allowed box side in scene pixels.
pub const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("occlusion rate must lie in [0, 1), got {0}")]
    OcclusionRate(f64),
    #[error("scene needs at least one person")]
    NoPersons,
    #[error("person box too small: {w}×{h} px")]
    DegenerateBox { w: f64, h: f64 },
    #[error("person {index} out of range for a scene with {count} persons")]
    PersonIndex { index: usize, count: usize },
    #[error("invalid skeleton template: {0}")]
    Template(String),
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    MirroredPair,
    SharedPoseGroup,
    Independent,
}

impl std::str::FromStr for CorrelationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mirrored-pair" => Ok(CorrelationMode::MirroredPair),
            "shared-pose-group" => Ok(CorrelationMode::SharedPoseGroup),
            "independent" => Ok(CorrelationMode::Independent),
            other => Err(format!("unknown correlation mode {other:?}")),
        }
    }
}

impl std::fmt::Display for CorrelationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrelationMode::MirroredPair => "mirrored-pair",
            CorrelationMode::SharedPoseGroup => "shared-pose-group",
            CorrelationMode::Independent => "independent",
        })
    }
}

/// Axis-aligned box in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn dilated(&self, frac: f64) -> BBox {
        let (dw, dh) = (self.w * frac * 0.5, self.h * frac * 0.5);
        BBox { x: self.x - dw, y: self.y - dh, w: self.w + 2.0 * dw, h: self.h + 2.0 * dh }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

/// One annotated person of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PersonWire", into = "PersonWire")]
pub struct PersonRecord {
    pub bbox: BBox,
    /// Scene-frame keypoints.
    pub keypoints: KeypointSet,
    pub occluded: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct PersonWire {
    bbox: BBox,
    joints: Vec<(f64, f64, u8)>,
    occluded: Vec<bool>,
}

impl TryFrom<PersonWire> for PersonRecord {
    type Error = String;

    fn try_from(w: PersonWire) -> Result<Self, String> {
        if w.joints.len() != w.occluded.len() {
            return Err(format!("{} joints but {} occlusion flags", w.joints.len(), w.occluded.len()));
        }
        let joints = w
            .joints
            .into_iter()
            .map(|(x, y, v)| {
                Visibility::from_code(v).map(|v| Joint::new(x, y, v)).ok_or_else(|| format!("visibility {v} not in {{0,1,2}}"))
            })
            .collect::<Result<_, _>>()?;
        Ok(PersonRecord { bbox: w.bbox, keypoints: KeypointSet::new(joints, Frame::Scene), occluded: w.occluded })
    }
}

impl From<PersonRecord> for PersonWire {
    fn from(p: PersonRecord) -> Self {
        PersonWire {
            bbox: p.bbox,
            joints: p.keypoints.joints.iter().map(|j| (j.x, j.y, j.visibility.code())).collect(),
            occluded: p.occluded,
        }
    }
}

/// One image-equivalent scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub width: f64,
    pub height: f64,
    pub persons: Vec<PersonRecord>,
    pub correlation_mode: CorrelationMode,
    pub seed: u64,
}

impl SceneRecord {
    pub fn person(&self, index: usize) -> Result<&PersonRecord, SceneError> {
        self.persons.get(index).ok_or(SceneError::PersonIndex { index, count: self.persons.len() })
    }

    pub fn occluded_joint_count(&self) -> usize {
        self.persons.iter().map(|p| p.occluded.iter().filter(|&&o| o).count()).sum()
    }

    pub fn has_occlusion(&self) -> bool {
        self.occluded_joint_count() > 0
    }
}

/// Generator knobs shared by every scene of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub persons: usize,
    pub mode: CorrelationMode,
    pub occlusion_rate: f64,
    pub width: f64,
    pub height: f64,
    /// Range of person box heights in scene pixels.
    pub min_person_height: f64,
    pub max_person_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            persons: 3,
            mode: CorrelationMode::SharedPoseGroup,
            occlusion_rate: 0.3,
            width: 320.0,
            height: 240.0,
            min_person_height: 64.0,
            max_person_height: 96.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(SceneError::OcclusionRate(self.occlusion_rate));
        }
        if self.persons == 0 {
            return Err(SceneError::NoPersons);
        }
        if !(self.min_person_height > 0.0 && self.min_person_height <= self.max_person_height) {
            return Err(SceneError::Config(format!(
                "person height range [{}, {}] is empty",
                self.min_person_height, self.max_person_height
            )));
        }
        if self.max_person_height > self.height {
            return Err(SceneError::Config(format!(
                "person height {} exceeds scene height {}",
                self.max_person_height, self.height
            )));
        }
        Ok(())
    }
}

/// Seed of scene `scene_id` under `global_seed`.
pub fn scene_seed(global_seed: u64, scene_id: u64) -> u64 {
    global_seed ^ scene_id
}

/// Builds one scene. Persons occupy equal-width vertical strips in index
/// order so boxes never overlap.
pub fn generate_scene(
    template: &SkeletonTemplate,
    config: &SceneConfig,
    scene_id: u64,
    global_seed: u64,
) -> Result<SceneRecord, SceneError> {
    config.validate()?;
    let seed = scene_seed(global_seed, scene_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.persons;

    let latent = template.sample_angles(&mut rng);
    let poses: Vec<Vec<f64>> = (0..p)
        .map(|i| match config.mode {
            CorrelationMode::Independent => template.sample_angles(&mut rng),
            CorrelationMode::SharedPoseGroup => template.jitter_angles(&latent, SHARED_POSE_JITTER, &mut rng),
            CorrelationMode::MirroredPair if i % 2 == 1 => template.mirror_angles(&latent),
            CorrelationMode::MirroredPair => latent.clone(),
        })
        .collect();

    let strip = config.width / p as f64;
    let max_h = config.max_person_height.min(0.95 * strip / BODY_ASPECT);
    let min_h = config.min_person_height.min(max_h);
    let mut persons = Vec::with_capacity(p);
    for (i, angles) in poses.iter().enumerate() {
        let h = if max_h > min_h { rng.random_range(min_h..max_h) } else { max_h };
        let w = h * BODY_ASPECT;
        if w < MIN_BOX_SIDE || h < MIN_BOX_SIDE {
            return Err(SceneError::DegenerateBox { w, h });
        }
        let x = i as f64 * strip + rng.random_range(0.0..=(strip - w));
        let y = rng.random_range(0.0..=(config.height - h));
        let bbox = BBox { x, y, w, h };
        let mut joints = Vec::with_capacity(template.k());
        let mut occluded = Vec::with_capacity(template.k());
        for (bx, by) in template.body_coords(angles) {
            let occ = rng.random_bool(config.occlusion_rate);
            let v = if occ { Visibility::Occluded } else { Visibility::Visible };
            joints.push(Joint::new(x + bx * h, y + by * h, v));
            occluded.push(occ);
        }
        persons.push(PersonRecord { bbox, keypoints: KeypointSet::new(joints, Frame::Scene), occluded });
    }
    Ok(SceneRecord {
        scene_id,
        width: config.width,
        height: config.height,
        persons,
        correlation_mode: config.mode,
        seed,
    })
}

/// Generates scenes with ids `first_id..first_id + count` in parallel.
pub fn generate_scenes(
    template: &SkeletonTemplate,
    config: &SceneConfig,
    first_id: u64,
    count: usize,
    global_seed: u64,
) -> Result<Vec<SceneRecord>, SceneError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(template, config, first_id + i, global_seed))
        .collect()
}
