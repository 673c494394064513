//! Keypoint ↔ heatmap conversion: Gaussian target rendering, argmax decoding
//! with a quarter-pixel nudge, and log-domain Taylor refinement.

use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;

/// Default target Gaussian width in heatmap pixels.
pub const TARGET_SIGMA: f64 = 2.0;

/// Width of the smoothing kernel applied before Taylor refinement.
pub const DARK_SMOOTH_SIGMA: f64 = 2.0;
/// Side length of the smoothing kernel.
pub const DARK_KERNEL: usize = 7;
const DARK_LOG_FLOOR: f64 = 1e-10;
const DARK_MIN_DET: f64 = 1e-12;
const DARK_MAX_STEP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Visibility {
    Absent = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Absent
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Visibility::Absent),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Visible),
            _ => None,
        }
    }
}

/// Coordinate frame of a [`KeypointSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Scene,
    Patch,
    FeatureMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Joint {
    pub fn new(x: f64, y: f64, visibility: Visibility) -> Self {
        Joint { x, y, visibility }
    }

    pub fn absent() -> Self {
        Joint { x: 0.0, y: 0.0, visibility: Visibility::Absent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub joints: Vec<Joint>,
    pub frame: Frame,
}

impl KeypointSet {
    pub fn new(joints: Vec<Joint>, frame: Frame) -> Self {
        KeypointSet { joints, frame }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Applies `x' = x·s + ox`, `y' = y·s + oy` to every joint.
    pub fn affine(&self, scale: f64, offset: (f64, f64), frame: Frame) -> KeypointSet {
        KeypointSet {
            joints: self
                .joints
                .iter()
                .map(|j| Joint { x: j.x * scale + offset.0, y: j.y * scale + offset.1, ..*j })
                .collect(),
            frame,
        }
    }
}

/// Per-keypoint score maps, `[K × h × w]`, with the heatmap→patch stride.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub maps: Tensor<f64>,
    pub stride: usize,
}

impl HeatmapStack {
    pub fn new(maps: Tensor<f64>, stride: usize) -> Self {
        assert_eq!(maps.rank(), 3, "heatmap stack is K×h×w");
        HeatmapStack { maps, stride }
    }

    /// Builds a stack from channel-last `[h·w × K]` (or `[h × w × K]`) data.
    pub fn from_channels_last<T: crate::numcore::Scalar>(
        data: &[T],
        k: usize,
        h: usize,
        w: usize,
        stride: usize,
    ) -> Self {
        assert_eq!(data.len(), k * h * w);
        let mut maps = vec![0.0; k * h * w];
        for p in 0..h * w {
            for c in 0..k {
                maps[c * h * w + p] = data[p * k + c].as_f64();
            }
        }
        HeatmapStack::new(Tensor::from_vec(&[k, h, w], maps).expect("sized above"), stride)
    }

    /// Channel-last copy `[h·w × K]`, the layout the model predicts in.
    pub fn to_channels_last(&self) -> Vec<f64> {
        let (k, h, w) = self.dims();
        let d = self.maps.data();
        let mut out = vec![0.0; k * h * w];
        for c in 0..k {
            for p in 0..h * w {
                out[p * k + c] = d[c * h * w + p];
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.maps.shape();
        (s[0], s[1], s[2])
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.maps.data()[k * h * w..(k + 1) * h * w]
    }

    pub fn scaled(&self, factor: f64) -> HeatmapStack {
        HeatmapStack { maps: self.maps.map(|v| v * factor), stride: self.stride }
    }
}

/// Result of [`encode_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    pub heatmaps: HeatmapStack,
    /// Joints that fell outside the frame and were rendered at the clamped
    /// position.
    pub clamped: Vec<usize>,
}

/// Renders one peak-1 Gaussian per labeled joint, truncated beyond `3σ`;
/// absent joints give all-zero maps.
pub fn encode_targets(kps: &KeypointSet, resolution: (usize, usize), sigma: f64, stride: usize) -> EncodedTargets {
    let (h, w) = resolution;
    let k = kps.len();
    let mut maps = vec![0.0; k * h * w];
    let mut clamped = Vec::new();
    let cutoff = 3.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, joint) in kps.joints.iter().enumerate() {
        if !joint.visibility.is_labeled() {
            continue;
        }
        let inside = |v: f64, n: usize| v >= -0.5 && v < n as f64 - 0.5;
        let (mut x, mut y) = (joint.x, joint.y);
        if !(inside(x, w) && inside(y, h)) {
            clamped.push(c);
            x = x.clamp(0.0, (w - 1) as f64);
            y = y.clamp(0.0, (h - 1) as f64);
        }
        let map = &mut maps[c * h * w..(c + 1) * h * w];
        let y0 = ((y - cutoff).floor().max(0.0)) as usize;
        let y1 = ((y + cutoff).ceil().min((h - 1) as f64)) as usize;
        let x0 = ((x - cutoff).floor().max(0.0)) as usize;
        let x1 = ((x + cutoff).ceil().min((w - 1) as f64)) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                if d2 <= cutoff * cutoff {
                    map[py * w + px] = (-d2 * inv).exp();
                }
            }
        }
    }
    EncodedTargets {
        heatmaps: HeatmapStack::new(Tensor::from_vec(&[k, h, w], maps).expect("sized above"), stride),
        clamped,
    }
}

/// Keypoints recovered from a [`HeatmapStack`] with one score per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPose {
    pub keypoints: KeypointSet,
    pub confidence: Vec<f64>,
}

impl DecodedPose {
    pub fn mean_confidence(&self) -> f64 {
        if self.confidence.is_empty() {
            0.0
        } else {
            self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
        }
    }
}

/// First maximum in row-major order, or `None` for an all-zero map.
fn argmax(map: &[f64]) -> Option<(usize, f64)> {
    if map.iter().all(|&v| v == 0.0) {
        return None;
    }
    let mut best = (0, map[0]);
    for (i, &v) in map.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    Some(best)
}

fn quarter_shift(map: &[f64], w: usize, h: usize, px: usize, py: usize) -> (f64, f64) {
    let mut x = px as f64;
    let mut y = py as f64;
    if px >= 1 && px + 1 < w {
        let diff = map[py * w + px + 1] - map[py * w + px - 1];
        x += 0.25 * sign(diff);
    }
    if py >= 1 && py + 1 < h {
        let diff = map[(py + 1) * w + px] - map[(py - 1) * w + px];
        y += 0.25 * sign(diff);
    }
    (x, y)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn argmax_joint(map: &[f64], w: usize, h: usize) -> (Joint, f64) {
    match argmax(map) {
        None => (Joint::absent(), 0.0),
        Some((idx, peak)) => {
            let (x, y) = quarter_shift(map, w, h, idx % w, idx / w);
            (Joint::new(x, y, Visibility::Visible), peak)
        }
    }
}

/// Global argmax per map plus a quarter-pixel step toward the larger
/// neighbour on each axis. Coordinates are in the featuremap frame.
pub fn argmax_decode(hm: &HeatmapStack) -> DecodedPose {
    let (k, h, w) = hm.dims();
    let (joints, confidence) = (0..k).map(|c| argmax_joint(hm.map(c), w, h)).unzip();
    DecodedPose { keypoints: KeypointSet::new(joints, Frame::FeatureMap), confidence }
}

fn smoothing_kernel() -> [f64; DARK_KERNEL] {
    let r = (DARK_KERNEL / 2) as f64;
    let mut k = [0.0; DARK_KERNEL];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * DARK_SMOOTH_SIGMA * DARK_SMOOTH_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian smoothing; taps falling outside the map are dropped
/// and the remaining weights renormalized.
fn smooth(map: &[f64], w: usize, h: usize) -> Vec<f64> {
    let kern = smoothing_kernel();
    let r = (DARK_KERNEL / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, &kv) in kern.iter().enumerate() {
                    let off = t as isize - r;
                    let (sx, sy) = if horizontal { (x as isize + off, y as isize) } else { (x as isize, y as isize + off) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    wsum += kv;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(map, true), false)
}

/// Newton step on the log-map at `(px, py)`; `None` when the Hessian is
/// singular, the step is too long, or a neighbour is missing.
fn taylor_step(logm: &[f64], w: usize, h: usize, px: usize, py: usize) -> Option<(f64, f64)> {
    if px < 1 || py < 1 || px + 1 >= w || py + 1 >= h {
        return None;
    }
    let at = |x: usize, y: usize| logm[y * w + x];
    let c = at(px, py);
    let dx = 0.5 * (at(px + 1, py) - at(px - 1, py));
    let dy = 0.5 * (at(px, py + 1) - at(px, py - 1));
    let dxx = at(px + 1, py) - 2.0 * c + at(px - 1, py);
    let dyy = at(px, py + 1) - 2.0 * c + at(px, py - 1);
    let dxy = 0.25
        * (at(px + 1, py + 1) - at(px + 1, py - 1) - at(px - 1, py + 1) + at(px - 1, py - 1));
    let det = dxx * dyy - dxy * dxy;
    if det.abs() < DARK_MIN_DET {
        return None;
    }
    // −H⁻¹·∇
    let sx = -(dyy * dx - dxy * dy) / det;
    let sy = -(-dxy * dx + dxx * dy) / det;
    if !(sx.is_finite() && sy.is_finite()) || (sx * sx + sy * sy).sqrt() > DARK_MAX_STEP {
        return None;
    }
    Some((px as f64 + sx, py as f64 + sy))
}

/// Distribution-aware decoding: smooth, take the log, and refine the argmax
/// with one second-order Taylor step. Falls back to [`argmax_decode`]
/// per joint whenever the step is rejected.
pub fn dark_decode(hm: &HeatmapStack) -> DecodedPose {
    let (k, h, w) = hm.dims();
    let mut joints = Vec::with_capacity(k);
    let mut confidence = Vec::with_capacity(k);
    for c in 0..k {
        let map = hm.map(c);
        let Some((idx, peak)) = argmax(map) else {
            joints.push(Joint::absent());
            confidence.push(0.0);
            continue;
        };
        let logm: Vec<f64> = smooth(map, w, h).into_iter().map(|v| v.max(DARK_LOG_FLOOR).ln()).collect();
        match taylor_step(&logm, w, h, idx % w, idx / w) {
            Some((x, y)) => {
                joints.push(Joint::new(x, y, Visibility::Visible));
                confidence.push(peak);
            }
            None => {
                let (j, p) = argmax_joint(map, w, h);
                joints.push(j);
                confidence.push(p);
            }
        }
    }
    DecodedPose { keypoints: KeypointSet::new(joints, Frame::FeatureMap), confidence }
}

/// Featuremap → patch frame (multiply by `stride`).
pub fn to_patch_coords(kps: &KeypointSet, stride: usize) -> KeypointSet {
    kps.affine(stride as f64, (0.0, 0.0), Frame::Patch)
}

/// Patch → featuremap frame (divide by `stride`).
pub fn to_featuremap_coords(kps: &KeypointSet, stride: usize) -> KeypointSet {
    kps.affine(1.0 / stride as f64, (0.0, 0.0), Frame::FeatureMap)
}
