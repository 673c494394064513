//! Keypoint-similarity metrics: OKS, greedy-matched AP/AR over a threshold
//! sweep, and joint errors split by occlusion.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::KeypointSet;
use crate::predict::ScenePrediction;
use crate::scenes::SceneRecord;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for scene {0} has no ground-truth scene")]
    UnknownScene(u64),
    #[error("scene {scene_id} has no person {person}")]
    UnknownPerson { scene_id: u64, person: usize },
    #[error("joint count mismatch: {pred} predicted, {gt} annotated, {kappas} constants")]
    JointCount { pred: usize, gt: usize, kappas: usize },
}

/// OKS thresholds 0.50, 0.55, …, 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Object keypoint similarity with `s² = area`, averaged over the
/// ground-truth labeled joints. `None` when no joint is labeled.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, area: f64, kappas: &[f64]) -> Result<Option<f64>, EvalError> {
    if pred.len() != gt.len() || kappas.len() != gt.len() {
        return Err(EvalError::JointCount { pred: pred.len(), gt: gt.len(), kappas: kappas.len() });
    }
    let mut total = 0.0;
    let mut labeled = 0usize;
    for ((p, g), &kappa) in pred.joints.iter().zip(&gt.joints).zip(kappas) {
        if !g.visibility.is_labeled() {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        total += (-d2 / (2.0 * area * kappa * kappa)).exp();
        labeled += 1;
    }
    Ok((labeled > 0).then(|| total / labeled as f64))
}

/// One scored prediction with its OKS against every ground truth of its
/// scene that has labeled joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scene_id: u64,
    pub person: usize,
    pub confidence: f64,
    /// `(ground-truth key, OKS)` pairs of the same scene.
    pub oks: Vec<(usize, f64)>,
}

/// Precision/recall trace of one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    /// Recall after every prediction has been considered.
    pub recall: f64,
    pub precision_curve: Vec<f64>,
    pub recall_curve: Vec<f64>,
}

/// Greedy confidence-ordered matching at one threshold followed by the
/// all-point interpolated area under the precision/recall curve.
pub fn match_threshold(candidates: &[Candidate], num_gt: usize, threshold: f64) -> ThresholdResult {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.confidence.total_cmp(&a.confidence).then(a.scene_id.cmp(&b.scene_id)).then(a.person.cmp(&b.person))
    });
    let mut taken: HashSet<usize> = HashSet::new();
    let mut tp = 0usize;
    let mut precision_curve = Vec::with_capacity(order.len());
    let mut recall_curve = Vec::with_capacity(order.len());
    for (i, c) in order.iter().enumerate() {
        let best = c
            .oks
            .iter()
            .filter(|(g, o)| *o >= threshold && !taken.contains(g))
            .fold(None::<(usize, f64)>, |best, &(g, o)| match best {
                Some((bg, bo)) if bo > o || (bo == o && bg < g) => Some((bg, bo)),
                _ => Some((g, o)),
            });
        if let Some((g, _)) = best {
            taken.insert(g);
            tp += 1;
        }
        precision_curve.push(tp as f64 / (i + 1) as f64);
        recall_curve.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    // precision envelope from the right, then sum over recall increments
    let mut envelope = precision_curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall_curve.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ThresholdResult { threshold, ap, recall: prev_recall, precision_curve, recall_curve }
}

/// Summary of a threshold sweep plus the occlusion split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub visible_error: f64,
    pub occluded_error: f64,
    pub persons: usize,
    pub predictions: usize,
    pub curves: Vec<ThresholdResult>,
}

/// Ground-truth keys are assigned in scene order, person order, skipping
/// persons without labeled joints.
pub fn build_candidates(
    predictions: &[ScenePrediction],
    gt: &[SceneRecord],
    kappas: &[f64],
) -> Result<(Vec<Candidate>, usize), EvalError> {
    let mut keys: HashMap<u64, (usize, &SceneRecord)> = HashMap::new();
    let mut num_gt = 0usize;
    for scene in gt {
        keys.insert(scene.scene_id, (num_gt, scene));
        num_gt += scene.persons.iter().filter(|p| p.keypoints.joints.iter().any(|j| j.visibility.is_labeled())).count();
    }
    let mut candidates = Vec::new();
    for sp in predictions {
        let &(base, scene) = keys.get(&sp.scene_id).ok_or(EvalError::UnknownScene(sp.scene_id))?;
        for p in &sp.persons {
            if p.person >= scene.persons.len() {
                return Err(EvalError::UnknownPerson { scene_id: sp.scene_id, person: p.person });
            }
            let mut oks_list = Vec::new();
            let mut key = base;
            for g in &scene.persons {
                if let Some(o) = oks(&p.keypoints, &g.keypoints, g.bbox.area(), kappas)? {
                    oks_list.push((key, o));
                    key += 1;
                }
            }
            candidates.push(Candidate { scene_id: sp.scene_id, person: p.person, confidence: p.confidence, oks: oks_list });
        }
    }
    Ok((candidates, num_gt))
}

/// AP over the thresholds, AP@0.5, AP@0.75, AR and the occlusion split.
pub fn evaluate(
    predictions: &[ScenePrediction],
    gt: &[SceneRecord],
    kappas: &[f64],
    thresholds: &[f64],
) -> Result<EvalResult, EvalError> {
    let (candidates, num_gt) = build_candidates(predictions, gt, kappas)?;
    let curves: Vec<ThresholdResult> = thresholds.iter().map(|&t| match_threshold(&candidates, num_gt, t)).collect();
    let mean = |f: &dyn Fn(&ThresholdResult) -> f64| {
        if curves.is_empty() {
            0.0
        } else {
            curves.iter().map(f).sum::<f64>() / curves.len() as f64
        }
    };
    let split = occlusion_breakdown(predictions, gt)?;
    Ok(EvalResult {
        ap: mean(&|c| c.ap),
        ap50: match_threshold(&candidates, num_gt, 0.5).ap,
        ap75: match_threshold(&candidates, num_gt, 0.75).ap,
        ar: mean(&|c| c.recall),
        visible_error: split.visible_mean,
        occluded_error: split.occluded_mean,
        persons: num_gt,
        predictions: candidates.len(),
        curves,
    })
}

/// Scene-frame error of one labeled joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointError {
    pub scene_id: u64,
    pub person: usize,
    pub joint: usize,
    pub occluded: bool,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OcclusionBreakdown {
    pub visible_mean: f64,
    pub occluded_mean: f64,
    pub visible_count: usize,
    pub occluded_count: usize,
}

/// Euclidean error of every labeled joint, paired through the person index.
pub fn joint_errors(predictions: &[ScenePrediction], gt: &[SceneRecord]) -> Result<Vec<JointError>, EvalError> {
    let scenes: HashMap<u64, &SceneRecord> = gt.iter().map(|s| (s.scene_id, s)).collect();
    let mut out = Vec::new();
    for sp in predictions {
        let scene = scenes.get(&sp.scene_id).ok_or(EvalError::UnknownScene(sp.scene_id))?;
        for p in &sp.persons {
            let g = scene
                .persons
                .get(p.person)
                .ok_or(EvalError::UnknownPerson { scene_id: sp.scene_id, person: p.person })?;
            if p.keypoints.len() != g.keypoints.len() {
                return Err(EvalError::JointCount { pred: p.keypoints.len(), gt: g.keypoints.len(), kappas: g.keypoints.len() });
            }
            for (j, (pj, gj)) in p.keypoints.joints.iter().zip(&g.keypoints.joints).enumerate() {
                if gj.visibility.is_labeled() {
                    out.push(JointError {
                        scene_id: sp.scene_id,
                        person: p.person,
                        joint: j,
                        occluded: g.occluded.get(j).copied().unwrap_or(false),
                        error: (pj.x - gj.x).hypot(pj.y - gj.y),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Mean joint error grouped by the ground-truth occlusion flag; an empty
/// group reports 0.
pub fn occlusion_breakdown(predictions: &[ScenePrediction], gt: &[SceneRecord]) -> Result<OcclusionBreakdown, EvalError> {
    Ok(summarize_errors(&joint_errors(predictions, gt)?))
}

pub fn summarize_errors(errors: &[JointError]) -> OcclusionBreakdown {
    let mut b = OcclusionBreakdown::default();
    let (mut vs, mut os) = (0.0, 0.0);
    for e in errors {
        if e.occluded {
            os += e.error;
            b.occluded_count += 1;
        } else {
            vs += e.error;
            b.visible_count += 1;
        }
    }
    b.visible_mean = if b.visible_count > 0 { vs / b.visible_count as f64 } else { 0.0 };
    b.occluded_mean = if b.occluded_count > 0 { os / b.occluded_count as f64 } else { 0.0 };
    b
}

const TABLE_COLUMNS: [&str; 8] = ["AP", "AP50", "AP75", "AR", "err_vis", "err_occ", "persons", "preds"];

impl EvalResult {
    fn cells(&self) -> [String; 8] {
        [
            format!("{:.4}", self.ap),
            format!("{:.4}", self.ap50),
            format!("{:.4}", self.ap75),
            format!("{:.4}", self.ar),
            format!("{:.3}", self.visible_error),
            format!("{:.3}", self.occluded_error),
            self.persons.to_string(),
            self.predictions.to_string(),
        ]
    }

    /// Header plus one comma-separated row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", TABLE_COLUMNS.join(","), self.cells().join(","))
    }

    /// Right-aligned columns for terminals.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = TABLE_COLUMNS.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = String::new();
        for (h, w) in TABLE_COLUMNS.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "{c:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    }
}
