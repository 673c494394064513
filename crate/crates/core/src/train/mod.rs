//! Loss assembly, Adam with cosine decay, checkpoints and the seeded
//! training loop.

mod checkpoint;
mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint, MAGIC, VERSION};
pub use optim::{
    adam_step, cosine_lr, AdamConfig, CosineSchedule, OptimizerState, StepOutcome, DEFAULT_LR_END, DEFAULT_LR_START,
};

use crate::eval::{evaluate, oks_thresholds};
use crate::heatmap::{encode_targets, to_featuremap_coords, TARGET_SIGMA};
use crate::inter::{nearest_group, select_group_training, PersonGroup};
use crate::intra::PATCH;
use crate::model::{forward_group, init_model, GroupForward, ModelConfig, ModelError};
use crate::numcore::{grad_check, BackwardFault, GradCheckReport, Gradients, Graph, NumError, ParamStore, Scalar, Tensor, Var};
use crate::predict::{predict_scenes, scene_patches, Decoder, Head};
use crate::scenes::{write_atomic, PatchTransform, SceneError, SceneRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration key `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error("no valid slot to compute a loss on")]
    NoValidSlots,
    #[error("training set has no scene with a person")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("step {step} outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("optimizer state covers {state} values but the model has {params}")]
    StateMismatch { state: usize, params: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint has unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` has shape {found:?} in the checkpoint, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    fn config(key: &'static str, message: impl Into<String>) -> Self {
        TrainError::Config { key, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Groups per step.
    pub batch: usize,
    /// Weight of the final-head loss.
    pub alpha: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation interval in steps; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Keep every stage-one parameter at its initial value.
    pub freeze_intra: bool,
    /// Run the groups of a step on the rayon pool when above 1.
    pub workers: usize,
    /// Target Gaussian width in featuremap pixels.
    pub target_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 16,
            alpha: 1.0,
            lr_start: DEFAULT_LR_START,
            lr_end: DEFAULT_LR_END,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 500,
            checkpoint_every: 500,
            freeze_intra: false,
            workers: 1,
            target_sigma: TARGET_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.batch == 0 {
            return Err(TrainError::config("batch", "must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::config("alpha", format!("{} is not a finite non-negative weight", self.alpha)));
        }
        if !positive(self.lr_start) {
            return Err(TrainError::config("lr_start", "must be positive"));
        }
        if !positive(self.lr_end) {
            return Err(TrainError::config("lr_end", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return Err(TrainError::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(TrainError::config("beta2", "must lie in [0, 1)"));
        }
        if !positive(self.adam.eps) {
            return Err(TrainError::config("eps", "must be positive"));
        }
        if self.workers == 0 {
            return Err(TrainError::config("workers", "must be at least 1"));
        }
        if !positive(self.target_sigma) {
            return Err(TrainError::config("target_sigma", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { start: self.lr_start, end: self.lr_end, total: self.steps }
    }
}

/// Loss terms of one group or the mean over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Stage-one head loss summed over valid slots and joints.
    pub l_s: f64,
    /// Final head loss, 0 for an intra-only model.
    pub l_m: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `L_S + α·L_M` where each term is `Σ_slots Σ_k MSE` over the valid slots.
/// `targets[s]` is the `[h·w × K]` target of slot `s`. The returned node is
/// the total.
pub fn compute_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    fwd: &GroupForward,
    targets: &[Option<&Tensor<T>>],
    alpha: f64,
) -> Result<(Var, LossReport), TrainError> {
    let mut l_s = Vec::new();
    let mut l_m = Vec::new();
    let relation = fwd.sequence.is_some();
    for (slot, target) in targets.iter().enumerate() {
        let (Some(target), Some(io), Some(fin)) = (target, fwd.intra.get(slot).copied().flatten(), fwd.heatmaps.get(slot).copied().flatten())
        else {
            continue;
        };
        let k = target.last_dim();
        let t = g.input((*target).clone());
        let e = g.mse(io.heatmaps, t)?;
        l_s.push(g.scale(e, T::lit(k as f64))?);
        if relation {
            let e = g.mse(fin, t)?;
            l_m.push(g.scale(e, T::lit(k as f64))?);
        }
    }
    if l_s.is_empty() {
        return Err(TrainError::NoValidSlots);
    }
    let s = g.sum(&l_s)?;
    let mut report = LossReport { l_s: g.value(s).item().to_f64().unwrap_or(f64::NAN), l_m: 0.0, alpha, total: 0.0 };
    let total = if relation {
        let m = g.sum(&l_m)?;
        report.l_m = g.value(m).item().to_f64().unwrap_or(f64::NAN);
        let weighted = g.scale(m, T::lit(alpha))?;
        g.add(s, weighted)?
    } else {
        s
    };
    report.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((total, report))
}

/// Network input and supervision of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonSample {
    pub patch: Tensor<f32>,
    /// `[h·w × K]` target heatmaps.
    pub target: Tensor<f32>,
}

/// Targets of every person of a scene, in person order.
pub fn scene_samples(scene: &SceneRecord, cfg: &ModelConfig, sigma: f64) -> Result<Vec<PersonSample>, TrainError> {
    let patches = scene_patches(scene, cfg)?;
    let (h, w) = cfg.feature();
    let mut out = Vec::with_capacity(patches.len());
    for (person, patch) in scene.persons.iter().zip(patches) {
        if person.keypoints.len() != cfg.k() {
            return Err(ModelError::config("k", format!("scene {} has {} joints per person, model has {}", scene.scene_id, person.keypoints.len(), cfg.k())).into());
        }
        let tf = PatchTransform::for_box(&person.bbox, cfg.intra.input)?;
        let kps = to_featuremap_coords(&tf.to_patch(&person.keypoints), PATCH);
        let enc = encode_targets(&kps, (h, w), sigma, PATCH);
        let data = enc.heatmaps.to_channels_last().into_iter().map(|v| v as f32).collect();
        out.push(PersonSample { patch, target: Tensor::from_vec(&[h * w, cfg.k()], data)? });
    }
    Ok(out)
}

/// Forward, loss and backward of one group. The loss is scaled by `weight`
/// before differentiation so that gradients of a batch can simply be added.
pub fn group_gradients(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    samples: &[PersonSample],
    group: &PersonGroup,
    alpha: f64,
    weight: f64,
    noise_seed: u64,
) -> Result<(Gradients<f32>, LossReport), TrainError> {
    let mut g = Graph::new(store);
    let patches: Vec<Option<&Tensor<f32>>> = group.slots.iter().map(|s| s.map(|p| &samples[p].patch)).collect();
    let targets: Vec<Option<&Tensor<f32>>> = group.slots.iter().map(|s| s.map(|p| &samples[p].target)).collect();
    let fwd = forward_group(&mut g, cfg, &patches, &mut ChaCha8Rng::seed_from_u64(noise_seed))?;
    let (total, report) = compute_loss(&mut g, &fwd, &targets, alpha)?;
    let scaled = g.scale(total, weight as f32)?;
    Ok((g.backward(scaled)?, report))
}

/// Standard deviation of the noise added to gradient-check patches. Blank
/// background yields identical tokens and near-ties in the relation
/// max-pool; a step across such a tie measures the kink, not the gradient.
pub const GRAD_CHECK_INPUT_NOISE: f64 = 0.05;

/// Finite-difference check of the full training loss in `f64` on the group
/// around person 0 of `scene`, with [`GRAD_CHECK_INPUT_NOISE`] added to the
/// patches. Parameters and noise are drawn from `seed`; `fault` corrupts
/// the analytic backward pass.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    scene: &SceneRecord,
    sigma: f64,
    alpha: f64,
    eps: f64,
    seed: u64,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport, TrainError> {
    let samples = scene_samples(scene, cfg, sigma)?;
    let group = nearest_group(scene, 0, cfg.inter.persons)?;
    let mut store: ParamStore<f64> = init_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise_seed = rng.random::<u64>();
    let patches: Vec<Option<Tensor<f64>>> = group
        .slots
        .iter()
        .map(|s| {
            s.map(|p| {
                let mut patch: Tensor<f64> = samples[p].patch.cast();
                for v in patch.data_mut() {
                    *v += GRAD_CHECK_INPUT_NOISE * rng.sample::<f64, _>(StandardNormal);
                }
                patch
            })
        })
        .collect();
    let targets: Vec<Option<Tensor<f64>>> = group.slots.iter().map(|s| s.map(|p| samples[p].target.cast())).collect();
    let report = grad_check(
        &mut store,
        eps,
        &mut rng,
        |g| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
        },
        |g| {
            let p: Vec<Option<&Tensor<f64>>> = patches.iter().map(Option::as_ref).collect();
            let t: Vec<Option<&Tensor<f64>>> = targets.iter().map(Option::as_ref).collect();
            let fwd = forward_group(g, cfg, &p, &mut ChaCha8Rng::seed_from_u64(noise_seed)).map_err(|e| NumError::GradCheck(e.to_string()))?;
            compute_loss(g, &fwd, &t, alpha).map(|(total, _)| total).map_err(|e| NumError::GradCheck(e.to_string()))
        },
    )?;
    Ok(report)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub const METRICS_HEADER: &str = "step,lr,L_S,L_M,total";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.loss.l_s, self.loss.l_m, self.loss.total)
    }
}

/// Validation result recorded during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub ap: f64,
    pub ar: f64,
    pub visible_error: f64,
    pub occluded_error: f64,
}

pub const EVAL_HEADER: &str = "step,AP,AR,err_vis,err_occ";

impl EvalRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.ap, self.ar, self.visible_error, self.occluded_error)
    }
}

/// Files written by [`train_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval_log: PathBuf,
}

/// Held-out scenes scored every `eval_every` steps.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub scenes: &'a [SceneRecord],
    pub kappas: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub log: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    /// Steps whose update was skipped for a non-finite gradient.
    pub skipped: Vec<usize>,
}

fn csv_body(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn write_outputs(outputs: &TrainOutputs, store: &ParamStore<f32>, log: &[MetricsRow], evals: &[EvalRow]) -> Result<(), TrainError> {
    save_checkpoint(store, &outputs.checkpoint)?;
    write_atomic(&outputs.metrics, csv_body(METRICS_HEADER, log.iter().map(MetricsRow::csv)).as_bytes())?;
    write_atomic(&outputs.eval_log, csv_body(EVAL_HEADER, evals.iter().map(EvalRow::csv)).as_bytes())?;
    Ok(())
}

/// Builds every person sample of the training set.
pub fn build_samples(scenes: &[SceneRecord], cfg: &ModelConfig, sigma: f64, parallel: bool) -> Result<Vec<Vec<PersonSample>>, TrainError> {
    if parallel {
        scenes.par_iter().map(|s| scene_samples(s, cfg, sigma)).collect()
    } else {
        scenes.iter().map(|s| scene_samples(s, cfg, sigma)).collect()
    }
}

/// Trains `store` in place of a fresh model. Each step draws `batch` scenes
/// from a reshuffled cycle over the training set, picks one group per scene,
/// sums the per-group gradients in draw order and applies one Adam update.
/// All randomness comes from `cfg.seed`, so logs do not depend on the worker
/// count.
pub fn train_loop(
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut store: ParamStore<f32>,
    train: &[SceneRecord],
    validation: Option<Validation<'_>>,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome, TrainError> {
    model.validate()?;
    cfg.validate()?;
    let usable: Vec<usize> = (0..train.len()).filter(|&i| !train[i].persons.is_empty()).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let parallel = cfg.workers > 1;
    let samples = build_samples(train, model, cfg.target_sigma, parallel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = usable.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let schedule = cfg.schedule();
    let mut opt = OptimizerState::new(&store, cfg.adam);
    let frozen = |name: &str| cfg.freeze_intra && name.starts_with("intra.");
    let weight = 1.0 / cfg.batch as f64;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut skipped = Vec::new();

    for step in 0..cfg.steps {
        let lr = schedule.lr(step)?;
        let mut jobs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let scene = order[cursor];
            cursor += 1;
            let group = select_group_training(&train[scene], model.inter.persons, &mut rng)?;
            jobs.push((scene, group, rng.random::<u64>()));
        }
        let run = |(scene, group, seed): &(usize, PersonGroup, u64)| {
            group_gradients(&store, model, &samples[*scene], group, cfg.alpha, weight, *seed)
        };
        let results: Vec<_> = if parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };
        let mut mean = LossReport { l_s: 0.0, l_m: 0.0, alpha: cfg.alpha, total: 0.0 };
        store.zero_grad();
        for r in results {
            let (grads, report) = match r {
                Ok(v) => v,
                Err(TrainError::Num(NumError::NonFinite { op })) => {
                    log::error!("non-finite value in {op} at step {step}");
                    return abort(outputs, &store, &log, &evals, step);
                }
                Err(e) => return Err(e),
            };
            store.accumulate(&grads);
            mean.l_s += report.l_s * weight;
            mean.l_m += report.l_m * weight;
            mean.total += report.total * weight;
        }
        if !mean.total.is_finite() {
            return abort(outputs, &store, &log, &evals, step);
        }
        if adam_step(&mut store, &mut opt, lr, frozen)? == StepOutcome::Skipped {
            skipped.push(step + 1);
        }
        log.push(MetricsRow { step: step + 1, lr, loss: mean });

        let done = step + 1;
        if let Some(val) = validation.filter(|_| cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let preds = predict_scenes(&store, model, val.scenes, Decoder::Dark, Head::Final, parallel)?;
            let r = evaluate(&preds, val.scenes, val.kappas, &oks_thresholds())?;
            log::info!("step {done}: loss {:.5} val AP {:.4} AR {:.4}", mean.total, r.ap, r.ar);
            evals.push(EvalRow { step: done, ap: r.ap, ar: r.ar, visible_error: r.visible_error, occluded_error: r.occluded_error });
        }
        if let Some(out) = outputs.filter(|_| cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            write_outputs(out, &store, &log, &evals)?;
        }
    }
    if let Some(out) = outputs {
        write_outputs(out, &store, &log, &evals)?;
    }
    Ok(TrainOutcome { store, log, evals, skipped })
}

fn abort(
    outputs: Option<&TrainOutputs>,
    store: &ParamStore<f32>,
    log: &[MetricsRow],
    evals: &[EvalRow],
    step: usize,
) -> Result<TrainOutcome, TrainError> {
    if let Some(out) = outputs {
        write_outputs(out, store, log, evals)?;
    }
    Err(TrainError::NonFiniteLoss { step: step + 1 })
}
