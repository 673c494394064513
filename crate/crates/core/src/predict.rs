//! Scene-level inference: crop every person, run the network over
//! sliding-window groups, decode the heatmaps and map the joints back to the
//! scene frame.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::heatmap::{argmax_decode, dark_decode, to_patch_coords, Frame, Joint, KeypointSet, Visibility};
use crate::inter::{sliding_window_groups, AttentionExport};
use crate::intra::PATCH;
use crate::model::{predict_group, ModelConfig, ModelError};
use crate::numcore::{ParamStore, Tensor};
use crate::scenes::{render_patch, PatchTransform, SceneRecord};

/// Stream of the padding-noise generator, kept apart from the render streams.
const PAD_NOISE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    #[default]
    Dark,
    Argmax,
}

impl fmt::Display for Decoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoder::Dark => "dark",
            Decoder::Argmax => "argmax",
        })
    }
}

impl FromStr for Decoder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dark" => Ok(Decoder::Dark),
            "argmax" => Ok(Decoder::Argmax),
            other => Err(format!("unknown decoder '{other}' (expected dark or argmax)")),
        }
    }
}

/// Which keypoint head to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Head {
    #[default]
    Final,
    /// The stage-one head used for intermediate supervision.
    Intermediate,
}

/// Pose of one ground-truth person box.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonPrediction {
    /// Index of the person inside its scene.
    pub person: usize,
    /// Scene-frame joints.
    pub keypoints: KeypointSet,
    /// Mean of the per-joint peak values.
    pub confidence: f64,
    pub joint_confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub scene_id: u64,
    pub persons: Vec<PersonPrediction>,
}

#[derive(Serialize, Deserialize)]
struct PersonWire {
    person: usize,
    joints: Vec<(f64, f64, u8)>,
    joint_confidence: Vec<f64>,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneWire {
    scene_id: u64,
    persons: Vec<PersonWire>,
}

impl Serialize for ScenePrediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SceneWire {
            scene_id: self.scene_id,
            persons: self
                .persons
                .iter()
                .map(|p| PersonWire {
                    person: p.person,
                    joints: p.keypoints.joints.iter().map(|j| (j.x, j.y, j.visibility.code())).collect(),
                    joint_confidence: p.joint_confidence.clone(),
                    confidence: p.confidence,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScenePrediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = SceneWire::deserialize(d)?;
        let persons = w
            .persons
            .into_iter()
            .map(|p| {
                let joints = p
                    .joints
                    .into_iter()
                    .map(|(x, y, v)| {
                        Visibility::from_code(v)
                            .map(|v| Joint::new(x, y, v))
                            .ok_or_else(|| serde::de::Error::custom(format!("visibility {v} not in {{0,1,2}}")))
                    })
                    .collect::<Result<_, _>>()?;
                Ok(PersonPrediction {
                    person: p.person,
                    keypoints: KeypointSet::new(joints, Frame::Scene),
                    confidence: p.confidence,
                    joint_confidence: p.joint_confidence,
                })
            })
            .collect::<Result<_, D::Error>>()?;
        Ok(ScenePrediction { scene_id: w.scene_id, persons })
    }
}

/// Renders every person patch of a scene in person order.
pub fn scene_patches(scene: &SceneRecord, cfg: &ModelConfig) -> Result<Vec<Tensor<f32>>, ModelError> {
    if cfg.intra.channels_in != 1 {
        return Err(ModelError::config("channels_in", "synthetic scenes render a single evidence channel"));
    }
    (0..scene.persons.len()).map(|i| Ok(render_patch(scene, i, cfg.intra.input)?)).collect()
}

/// Predicts every person of `scene`. Attention maps are returned when the
/// model's dump toggle is on.
pub fn predict_scene(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    scene: &SceneRecord,
    decoder: Decoder,
    head: Head,
) -> Result<(ScenePrediction, Vec<AttentionExport>), ModelError> {
    let mut out = ScenePrediction { scene_id: scene.scene_id, persons: Vec::with_capacity(scene.persons.len()) };
    if scene.persons.is_empty() {
        return Ok((out, Vec::new()));
    }
    let patches = scene_patches(scene, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(PAD_NOISE_STREAM);
    let mut dumps = Vec::new();
    for group in sliding_window_groups(scene, cfg.inter.persons)? {
        let slots: Vec<Option<&Tensor<f32>>> = group.slots.iter().map(|s| s.map(|p| &patches[p])).collect();
        let (preds, dump) = predict_group(store, cfg, &group, &slots, &mut rng)?;
        dumps.extend(dump);
        for p in preds {
            let maps = match head {
                Head::Final => &p.final_heatmaps,
                Head::Intermediate => &p.intermediate,
            };
            let decoded = match decoder {
                Decoder::Dark => dark_decode(maps),
                Decoder::Argmax => argmax_decode(maps),
            };
            let tf = PatchTransform::for_box(&scene.persons[p.person].bbox, cfg.intra.input)?;
            let keypoints = tf.to_scene(&to_patch_coords(&decoded.keypoints, PATCH));
            out.persons.push(PersonPrediction {
                person: p.person,
                keypoints,
                confidence: decoded.mean_confidence(),
                joint_confidence: decoded.confidence,
            });
        }
    }
    out.persons.sort_by_key(|p| p.person);
    Ok((out, dumps))
}

/// [`predict_scene`] over a dataset, in scene order. Runs on the current
/// rayon pool when `parallel` is set.
pub fn predict_scenes(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    scenes: &[SceneRecord],
    decoder: Decoder,
    head: Head,
    parallel: bool,
) -> Result<Vec<ScenePrediction>, ModelError> {
    let run = |s: &SceneRecord| predict_scene(store, cfg, s, decoder, head).map(|(p, _)| p);
    if parallel {
        scenes.par_iter().map(run).collect()
    } else {
        scenes.iter().map(run).collect()
    }
}
