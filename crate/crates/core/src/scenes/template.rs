use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SceneError;

/// Width / height of every person box.
pub const BODY_ASPECT: f64 = 0.75;
/// Root of every skeleton, in box-height units from the box's top-left
/// corner (x measured as a fraction of the box width).
pub const ANCHOR: (f64, f64) = (0.5, 0.55);

/// One joint of a [`SkeletonTemplate`].
///
/// The joint sits at `parent + length·(sin θ, cos θ)` with y pointing down,
/// where `θ = angle + δ` and `δ ∈ [−range, range]` is the pose variable.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateJoint {
    pub name: &'static str,
    /// `None` attaches the joint to the implicit root anchor.
    pub parent: Option<usize>,
    pub angle: f64,
    pub length: f64,
    pub range: f64,
    /// Left/right counterpart (itself for midline joints).
    pub mirror: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    pub joints: Vec<TemplateJoint>,
}

fn joint(name: &'static str, parent: Option<usize>, angle: f64, length: f64, range: f64, mirror: usize, kappa: f64) -> TemplateJoint {
    TemplateJoint { name, parent, angle, length, range, mirror, kappa }
}

impl SkeletonTemplate {
    /// Five joints (head, two hands, two feet) hanging off the root, κ = 0.08.
    pub fn desk() -> Self {
        let k = 0.08;
        SkeletonTemplate {
            joints: vec![
                joint("head", None, PI, 0.40, 0.35, 0, k),
                joint("left_hand", None, -2.0, 0.33, 0.7, 2, k),
                joint("right_hand", None, 2.0, 0.33, 0.7, 1, k),
                joint("left_foot", None, -0.35, 0.38, 0.3, 4, k),
                joint("right_foot", None, 0.35, 0.38, 0.3, 3, k),
            ],
        }
    }

    /// The common 17-keypoint body layout with its standard per-joint κ.
    pub fn coco17() -> Self {
        let s = |v: f64| 2.0 * v / 10.0;
        SkeletonTemplate {
            joints: vec![
                joint("nose", None, PI, 0.44, 0.15, 0, s(0.26)),
                joint("left_eye", Some(0), -(PI - 1.2), 0.03, 0.1, 2, s(0.25)),
                joint("right_eye", Some(0), PI - 1.2, 0.03, 0.1, 1, s(0.25)),
                joint("left_ear", Some(0), -1.7, 0.06, 0.1, 4, s(0.35)),
                joint("right_ear", Some(0), 1.7, 0.06, 0.1, 3, s(0.35)),
                joint("left_shoulder", None, -(PI - 0.45), 0.36, 0.08, 6, s(0.79)),
                joint("right_shoulder", None, PI - 0.45, 0.36, 0.08, 5, s(0.79)),
                joint("left_elbow", Some(5), -0.3, 0.15, 0.6, 8, s(0.72)),
                joint("right_elbow", Some(6), 0.3, 0.15, 0.6, 7, s(0.72)),
                joint("left_wrist", Some(7), -0.3, 0.12, 0.8, 10, s(0.62)),
                joint("right_wrist", Some(8), 0.3, 0.12, 0.8, 9, s(0.62)),
                joint("left_hip", None, -PI / 2.0, 0.08, 0.05, 12, s(1.07)),
                joint("right_hip", None, PI / 2.0, 0.08, 0.05, 11, s(1.07)),
                joint("left_knee", Some(11), -0.1, 0.2, 0.3, 14, s(0.87)),
                joint("right_knee", Some(12), 0.1, 0.2, 0.3, 13, s(0.87)),
                joint("left_ankle", Some(13), -0.05, 0.19, 0.3, 16, s(0.89)),
                joint("right_ankle", Some(14), 0.05, 0.19, 0.3, 15, s(0.89)),
            ],
        }
    }

    /// Template with `k` joints: 5 gives [`desk`](Self::desk), 17 gives
    /// [`coco17`](Self::coco17).
    pub fn with_joints(k: usize) -> Result<Self, SceneError> {
        match k {
            5 => Ok(Self::desk()),
            17 => Ok(Self::coco17()),
            _ => Err(SceneError::Template(format!("no skeleton with {k} joints (5 or 17)"))),
        }
    }

    pub fn k(&self) -> usize {
        self.joints.len()
    }

    pub fn kappas(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.kappa).collect()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.joints.iter().map(|j| j.name).collect()
    }

    /// Parents must precede children (so links form a tree under the root)
    /// and the mirror map must be an involution preserving parenthood.
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(SceneError::Template(format!("joint {} has parent {p} not before it", j.name)));
                }
            }
            let m = self.joints.get(j.mirror).ok_or_else(|| SceneError::Template(format!("joint {} mirrors a missing joint", j.name)))?;
            if m.mirror != i || m.parent.map(|p| self.joints[p].mirror) != j.parent {
                return Err(SceneError::Template(format!("mirror of {} is inconsistent", j.name)));
            }
        }
        Ok(())
    }

    /// Fresh pose: absolute angles with `δ` uniform in each joint's range.
    pub fn sample_angles<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.joints.iter().map(|j| j.angle + rng.random_range(-j.range..=j.range)).collect()
    }

    /// Left/right mirror image of a pose: `θ'_j = −θ_mirror(j)`.
    pub fn mirror_angles(&self, angles: &[f64]) -> Vec<f64> {
        self.joints.iter().map(|j| -angles[j.mirror]).collect()
    }

    /// Adds independent N(0, σ²) noise to every angle.
    pub fn jitter_angles<R: Rng>(&self, angles: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, sigma).expect("finite jitter scale");
        angles.iter().map(|a| a + normal.sample(rng)).collect()
    }

    /// Joint positions in box-height units relative to the box's top-left.
    pub fn body_coords(&self, angles: &[f64]) -> Vec<(f64, f64)> {
        let root = (ANCHOR.0 * BODY_ASPECT, ANCHOR.1);
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(self.k());
        for (j, &theta) in self.joints.iter().zip(angles) {
            let base = j.parent.map_or(root, |p| out[p]);
            out.push((base.0 + j.length * theta.sin(), base.1 + j.length * theta.cos()));
        }
        out
    }

    /// Inverse of [`body_coords`](Self::body_coords): recovers each joint's
    /// offset `δ` from its canonical angle, wrapped to `(−π, π]`.
    pub fn angle_offsets(&self, body: &[(f64, f64)]) -> Vec<f64> {
        let root = (ANCHOR.0 * BODY_ASPECT, ANCHOR.1);
        self.joints
            .iter()
            .zip(body)
            .map(|(j, &(x, y))| {
                let base = j.parent.map_or(root, |p| body[p]);
                wrap_angle((x - base.0).atan2(y - base.1) - j.angle)
            })
            .collect()
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}
