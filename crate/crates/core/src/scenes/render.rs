use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BBox, SceneError, SceneRecord, MIN_BOX_SIDE};
use crate::heatmap::{Frame, KeypointSet, Visibility};
use crate::numcore::Tensor;

/// Evidence blob width in patch pixels.
pub const EVIDENCE_SIGMA: f64 = 1.5;
/// Standard deviation of the additive patch noise.
pub const EVIDENCE_NOISE: f64 = 0.05;

/// Scene → patch mapping `p = (s − origin)·scale` of one person crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTransform {
    pub origin: (f64, f64),
    pub scale: f64,
}

impl PatchTransform {
    /// Crop around `bbox`, grown along one axis to the patch aspect ratio.
    pub fn for_box(bbox: &BBox, resolution: (usize, usize)) -> Result<Self, SceneError> {
        if bbox.w < MIN_BOX_SIDE || bbox.h < MIN_BOX_SIDE {
            return Err(SceneError::DegenerateBox { w: bbox.w, h: bbox.h });
        }
        let (ph, pw) = (resolution.0 as f64, resolution.1 as f64);
        let aspect = pw / ph;
        let (mut cw, mut ch) = (bbox.w, bbox.h);
        if cw / ch > aspect {
            ch = cw / aspect;
        } else {
            cw = ch * aspect;
        }
        let (cx, cy) = bbox.center();
        Ok(PatchTransform { origin: (cx - 0.5 * cw, cy - 0.5 * ch), scale: ph / ch })
    }

    pub fn to_patch(&self, kps: &KeypointSet) -> KeypointSet {
        kps.affine(self.scale, (-self.origin.0 * self.scale, -self.origin.1 * self.scale), Frame::Patch)
    }

    pub fn to_scene(&self, kps: &KeypointSet) -> KeypointSet {
        kps.affine(1.0 / self.scale, self.origin, Frame::Scene)
    }
}

/// Evidence patch of person `index` with the default noise level.
pub fn render_patch(scene: &SceneRecord, index: usize, resolution: (usize, usize)) -> Result<Tensor<f32>, SceneError> {
    render_patch_with_noise(scene, index, resolution, EVIDENCE_NOISE)
}

/// One channel `[H × W × 1]`: a unit-peak Gaussian at every visible joint
/// plus N(0, noise²). The noise stream is derived from the scene seed and
/// person index, so rendering is reproducible.
pub fn render_patch_with_noise(
    scene: &SceneRecord,
    index: usize,
    resolution: (usize, usize),
    noise: f64,
) -> Result<Tensor<f32>, SceneError> {
    let person = scene.person(index)?;
    let tf = PatchTransform::for_box(&person.bbox, resolution)?;
    let kps = tf.to_patch(&person.keypoints);
    let (h, w) = resolution;
    let mut data = vec![0.0f64; h * w];
    let inv = 1.0 / (2.0 * EVIDENCE_SIGMA * EVIDENCE_SIGMA);
    let reach = 4.0 * EVIDENCE_SIGMA;
    for j in kps.joints.iter().filter(|j| j.visibility == Visibility::Visible) {
        let y0 = (j.y - reach).floor().max(0.0) as usize;
        let x0 = (j.x - reach).floor().max(0.0) as usize;
        let y1 = ((j.y + reach).ceil().max(-1.0) as isize).min(h as isize - 1);
        let x1 = ((j.x + reach).ceil().max(-1.0) as isize).min(w as isize - 1);
        for py in y0 as isize..=y1 {
            for px in x0 as isize..=x1 {
                let d2 = (px as f64 - j.x).powi(2) + (py as f64 - j.y).powi(2);
                data[py as usize * w + px as usize] += (-d2 * inv).exp();
            }
        }
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(1 + index as u64);
        let normal = Normal::new(0.0, noise).map_err(|e| SceneError::Config(e.to_string()))?;
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let data = data.into_iter().map(|v| v as f32).collect();
    Ok(Tensor::from_vec(&[h, w, 1], data).expect("sized above"))
}
