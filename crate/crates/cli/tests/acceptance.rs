//! Acceptance run over the nine release criteria, one pass/fail line each.
//!
//! Not part of the default test run; invoke it with
//! `cargo test --release -p relpose-cli --test acceptance`.
//! `ACCEPTANCE_CRITERIA=1,2,5` selects criteria. Finished ablation trainings
//! are cached as JSON under `ACCEPTANCE_DIR` (default
//! `target/acceptance`) and reused when their settings match exactly;
//! `ACCEPTANCE_FRESH=1` ignores the cache.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relpose_cli::commands;
use relpose_cli::config::{Preset, RunConfig};
use relpose_core::eval::{evaluate, oks, oks_thresholds, EvalResult};
use relpose_core::heatmap::{argmax_decode, dark_decode, Frame, HeatmapStack, Joint, KeypointSet, Visibility};
use relpose_core::inter::{InterConfig, PersonGroup};
use relpose_core::model::{init_model, inter_fraction, predict_group, ModelConfig, SlotPrediction};
use relpose_core::numcore::{ParamStore, Tensor};
use relpose_core::predict::{predict_scenes, scene_patches, Decoder, Head, PersonPrediction, ScenePrediction};
use relpose_core::scenes::{generate_scenes, BBox, CorrelationMode, PersonRecord, SceneConfig, SceneRecord, SkeletonTemplate};
use relpose_core::train::{encode_checkpoint, load_checkpoint, save_checkpoint, train_loop, TrainConfig};
use serde::{Deserialize, Serialize};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

struct Ctx {
    dir: PathBuf,
    fresh: bool,
}

fn main() -> ExitCode {
    let selected: Vec<usize> = match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(s) if !s.trim().is_empty() => s.split(',').map(|c| c.trim().parse().expect("criterion number")).collect(),
        _ => (1..=9).collect(),
    };
    let dir = std::env::var_os("ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root").join("target/acceptance"));
    std::fs::create_dir_all(&dir).expect("acceptance directory");
    let ctx = Ctx { dir, fresh: std::env::var("ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") };

    let criteria: [(usize, &str, fn(&Ctx) -> Verdict); 9] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "mask invariance", mask_invariance),
        (3, "permutation equivariance", permutation_equivariance),
        (4, "decoding quality", decoding_quality),
        (5, "metric correctness", metric_correctness),
        (6, "relation stage helps on occluded scenes", relation_gain),
        (7, "group size ablation", group_size_ablation),
        (8, "lightweight relation stage", lightweight_module),
        (9, "determinism and persistence", determinism_and_persistence),
    ];
    let mut all = true;
    for (n, name, f) in criteria {
        if !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let v = f(&ctx);
        all &= v.pass;
        println!(
            "criterion {n} {}: {name}: {} [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// 1 --------------------------------------------------------------------------

fn gradient_integrity(ctx: &Ctx) -> Verdict {
    let cfg = RunConfig { out: ctx.dir.join("gradcheck"), ..RunConfig::preset(Preset::Desk) };
    let t0 = Instant::now();
    let outcome = commands::gradcheck(&cfg, None).expect("gradcheck");
    let secs = t0.elapsed().as_secs_f64();
    let worst = outcome.report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("parameters");
    verdict(
        outcome.report.passed(1e-4) && secs < 300.0,
        format!(
            "{} parameter tensors, max relative error {:.2e} ({}), {secs:.0}s (limits 1e-4, 300s)",
            outcome.report.params.len(),
            worst.max_rel_err,
            worst.name
        ),
    )
}

// 2 and 3 --------------------------------------------------------------------

/// Desk model whose heads are rescaled to unit-order outputs, so absolute
/// tolerances on heatmaps are meaningful.
fn probe_model() -> (ModelConfig, ParamStore<f32>) {
    let cfg = ModelConfig::default();
    let mut store = init_model::<f32>(&cfg, 17).expect("init");
    let scale = 1.0 / (1e-3 * (cfg.intra.d as f32).sqrt());
    for p in store.iter_mut() {
        if p.name.ends_with("head.w") {
            p.value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    (cfg, store)
}

fn probe_scenes() -> Vec<SceneRecord> {
    generate_scenes(&SkeletonTemplate::desk(), &SceneConfig::default(), 0, 100, 4242).expect("scenes")
}

fn final_of(preds: &[SlotPrediction], person: usize) -> Vec<f64> {
    preds.iter().find(|p| p.person == person).expect("valid slot predicted").final_heatmaps.to_channels_last()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mask_invariance(_: &Ctx) -> Verdict {
    let (cfg, store) = probe_model();
    let n = cfg.inter.persons;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for scene in probe_scenes() {
        let patches = scene_patches(&scene, &cfg).expect("patches");
        let valid = rng.random_range(1..n);
        let mut slots: Vec<Option<usize>> = (0..n).map(|i| (i < valid).then_some(i)).collect();
        slots.shuffle(&mut rng);
        let group = PersonGroup { scene_id: scene.scene_id, slots: slots.clone() };
        let inputs: Vec<Option<&Tensor<f32>>> = slots.iter().map(|s| s.map(|p| &patches[p])).collect();
        let (a, _) = predict_group(&store, &cfg, &group, &inputs, &mut ChaCha8Rng::seed_from_u64(rng.random())).expect("forward");
        let (b, _) = predict_group(&store, &cfg, &group, &inputs, &mut ChaCha8Rng::seed_from_u64(rng.random())).expect("forward");
        for p in 0..valid {
            let (x, y) = (final_of(&a, p), final_of(&b, p));
            worst = worst.max(max_abs_diff(&x, &y));
            scale = scale.max(x.iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    verdict(worst <= 1e-5, format!("100 groups, max abs change {worst:.2e} (limit 1e-5, heatmap magnitude up to {scale:.2})"))
}

fn permutation_equivariance(_: &Ctx) -> Verdict {
    let (cfg, store) = probe_model();
    let n = cfg.inter.persons;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for scene in probe_scenes() {
        let patches = scene_patches(&scene, &cfg).expect("patches");
        let valid = rng.random_range(2..=n);
        let slots: Vec<Option<usize>> = (0..n).map(|i| (i < valid).then_some(i)).collect();
        let mut permuted = slots.clone();
        while permuted == slots {
            permuted.shuffle(&mut rng);
        }
        let noise: u64 = rng.random();
        let run = |slots: &[Option<usize>]| {
            let group = PersonGroup { scene_id: scene.scene_id, slots: slots.to_vec() };
            let inputs: Vec<Option<&Tensor<f32>>> = slots.iter().map(|s| s.map(|p| &patches[p])).collect();
            predict_group(&store, &cfg, &group, &inputs, &mut ChaCha8Rng::seed_from_u64(noise)).expect("forward").0
        };
        let (a, b) = (run(&slots), run(&permuted));
        for p in 0..valid {
            worst = worst.max(max_abs_diff(&final_of(&a, p), &final_of(&b, p)));
        }
    }
    verdict(worst <= 1e-5, format!("100 groups, max abs discrepancy {worst:.2e} (limit 1e-5)"))
}

// 4 --------------------------------------------------------------------------

fn gaussian_map(cx: f64, cy: f64, sigma: f64, h: usize, w: usize) -> HeatmapStack {
    let data = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    HeatmapStack::new(Tensor::from_vec(&[1, h, w], data).expect("map"), 4)
}

/// Least-squares fit of a σ-Gaussian centre by exhaustive search on a
/// 0.01 px lattice around the brightest pixel.
fn grid_search_center(map: &[f64], w: usize, h: usize, sigma: f64) -> (f64, f64) {
    let peak = (0..map.len()).max_by(|&a, &b| map[a].total_cmp(&map[b])).expect("non-empty");
    let (gx, gy) = ((peak % w) as f64, (peak / w) as f64);
    let cost = |cx: f64, cy: f64| -> f64 {
        let mut c = 0.0;
        for y in (gy as usize).saturating_sub(6)..=((gy as usize) + 6).min(h - 1) {
            for x in (gx as usize).saturating_sub(6)..=((gx as usize) + 6).min(w - 1) {
                let g = (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
                c += (map[y * w + x] - g).powi(2);
            }
        }
        c
    };
    let mut best = (f64::INFINITY, (gx, gy));
    for i in -60..=60 {
        for j in -60..=60 {
            let (cx, cy) = (gx + i as f64 * 0.01, gy + j as f64 * 0.01);
            let v = cost(cx, cy);
            if v < best.0 {
                best = (v, (cx, cy));
            }
        }
    }
    best.1
}

fn decoding_quality(_: &Ctx) -> Verdict {
    let (h, w, sigma) = (64, 48, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut dark, mut argmax, mut oracle_gap) = (0.0, 0.0, 0.0f64);
    for _ in 0..1000 {
        let (cx, cy) = (rng.random_range(4.0..(w as f64 - 5.0)), rng.random_range(4.0..(h as f64 - 5.0)));
        let hm = gaussian_map(cx, cy, sigma, h, w);
        let (ox, oy) = grid_search_center(hm.map(0), w, h, sigma);
        oracle_gap = oracle_gap.max(((ox - cx).powi(2) + (oy - cy).powi(2)).sqrt());
        let d = dark_decode(&hm).keypoints.joints[0];
        let a = argmax_decode(&hm).keypoints.joints[0];
        dark += ((d.x - ox).powi(2) + (d.y - oy).powi(2)).sqrt();
        argmax += ((a.x - ox).powi(2) + (a.y - oy).powi(2)).sqrt();
    }
    let (dark, argmax) = (dark / 1000.0, argmax / 1000.0);
    verdict(
        dark <= 0.08 && dark < argmax && oracle_gap <= 0.01,
        format!("1000 maps, mean error dark {dark:.4} px, argmax {argmax:.4} px (limit 0.08), oracle within {oracle_gap:.4} px of truth"),
    )
}

// 5 --------------------------------------------------------------------------

fn oks_oracle(pred: &KeypointSet, gt: &PersonRecord, kappas: &[f64]) -> Option<f64> {
    let s2 = gt.bbox.w * gt.bbox.h;
    let mut terms = Vec::new();
    for k in 0..gt.keypoints.len() {
        let g = gt.keypoints.joints[k];
        if g.visibility == Visibility::Absent {
            continue;
        }
        let p = pred.joints[k];
        let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
        terms.push((-(d * d) / (2.0 * s2 * kappas[k] * kappas[k])).exp());
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Greedy confidence-ordered matching and right-envelope AP, computed by
/// plain scans over `(scene, person)` pairs.
fn ap_oracle(preds: &[ScenePrediction], gt: &[SceneRecord], kappas: &[f64], t: f64) -> (f64, f64) {
    let mut flat: Vec<(u64, &PersonPrediction)> = preds.iter().flat_map(|s| s.persons.iter().map(move |p| (s.scene_id, p))).collect();
    flat.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)).then(a.1.person.cmp(&b.1.person)));
    let labeled = |p: &PersonRecord| p.keypoints.joints.iter().any(|j| j.visibility != Visibility::Absent);
    let total: usize = gt.iter().map(|s| s.persons.iter().filter(|p| labeled(p)).count()).sum();
    let mut used: HashSet<(u64, usize)> = HashSet::new();
    let mut hits = Vec::new();
    for (scene_id, p) in &flat {
        let scene = gt.iter().find(|s| s.scene_id == *scene_id).expect("scene");
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in scene.persons.iter().enumerate() {
            if used.contains(&(*scene_id, gi)) {
                continue;
            }
            if let Some(o) = oks_oracle(&p.keypoints, g, kappas) {
                if o >= t && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
        }
        if let Some((gi, _)) = best {
            used.insert((*scene_id, gi));
        }
        hits.push(best.is_some());
    }
    if total == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut ap = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            ap += precision[i..].iter().fold(0.0, |m: f64, &v| m.max(v)) / total as f64;
        }
    }
    (ap, tp as f64 / total as f64)
}

fn toy_person(rng: &mut ChaCha8Rng, k: usize) -> PersonRecord {
    let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..150.0));
    let (w, h) = (rng.random_range(20.0..60.0), rng.random_range(40.0..90.0));
    let joints: Vec<Joint> = (0..k)
        .map(|_| {
            let v = match rng.random_range(0..10) {
                0 => Visibility::Absent,
                1..=2 => Visibility::Occluded,
                _ => Visibility::Visible,
            };
            if v == Visibility::Absent {
                Joint::absent()
            } else {
                Joint::new(x + rng.random_range(0.0..w), y + rng.random_range(0.0..h), v)
            }
        })
        .collect();
    let occluded = joints.iter().map(|j| j.visibility == Visibility::Occluded).collect();
    PersonRecord { bbox: BBox { x, y, w, h }, keypoints: KeypointSet::new(joints, Frame::Scene), occluded }
}

fn perturbed(rng: &mut ChaCha8Rng, gt: &PersonRecord, person: usize, noise: f64) -> PersonPrediction {
    let joints = gt
        .keypoints
        .joints
        .iter()
        .map(|j| {
            let (x, y) = if j.visibility == Visibility::Absent { (rng.random_range(0.0..200.0), rng.random_range(0.0..150.0)) } else { (j.x, j.y) };
            Joint::new(x + noise * rng.random_range(-1.0..1.0), y + noise * rng.random_range(-1.0..1.0), Visibility::Visible)
        })
        .collect();
    PersonPrediction {
        person,
        keypoints: KeypointSet::new(joints, Frame::Scene),
        confidence: rng.random_range(0.0..1.0),
        joint_confidence: vec![1.0; gt.keypoints.len()],
    }
}

fn toy_scene(scene_id: u64, persons: Vec<PersonRecord>) -> SceneRecord {
    SceneRecord { scene_id, width: 260.0, height: 240.0, persons, correlation_mode: CorrelationMode::Independent, seed: scene_id }
}

fn metric_correctness(_: &Ctx) -> Verdict {
    let template = SkeletonTemplate::desk();
    let kappas = template.kappas();
    let k = template.k();
    let thresholds = oks_thresholds();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut oks_gap, mut ap_gap, mut ar_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut perfect_ok = true;
    for trial in 0..500 {
        let scenes: Vec<SceneRecord> = (0..rng.random_range(1..=2u64))
            .map(|s| toy_scene(s, (0..rng.random_range(1..=4)).map(|_| toy_person(&mut rng, k)).collect()))
            .collect();
        let mut preds = Vec::new();
        for s in &scenes {
            let mut persons = Vec::new();
            for _ in 0..rng.random_range(0..=4) {
                let target = rng.random_range(0..s.persons.len());
                let noise = [0.5, 3.0, 10.0, 40.0][rng.random_range(0..4)];
                persons.push(perturbed(&mut rng, &s.persons[target], target, noise));
            }
            for p in &persons {
                for g in &s.persons {
                    let a = oks(&p.keypoints, &g.keypoints, g.bbox.area(), &kappas).expect("oks");
                    let b = oks_oracle(&p.keypoints, g, &kappas);
                    match (a, b) {
                        (Some(a), Some(b)) => oks_gap = oks_gap.max((a - b).abs()),
                        (None, None) => {}
                        _ => oks_gap = f64::INFINITY,
                    }
                }
            }
            preds.push(ScenePrediction { scene_id: s.scene_id, persons });
        }
        let result = evaluate(&preds, &scenes, &kappas, &thresholds).expect("evaluate");
        let mut ar = 0.0;
        for (curve, &t) in result.curves.iter().zip(&thresholds) {
            let (ap, recall) = ap_oracle(&preds, &scenes, &kappas, t);
            ap_gap = ap_gap.max((curve.ap - ap).abs());
            ar += recall / thresholds.len() as f64;
        }
        ar_gap = ar_gap.max((result.ar - ar).abs());

        if trial % 10 == 0 {
            let exact: Vec<ScenePrediction> = scenes
                .iter()
                .map(|s| ScenePrediction {
                    scene_id: s.scene_id,
                    persons: s
                        .persons
                        .iter()
                        .enumerate()
                        .map(|(i, g)| PersonPrediction { person: i, keypoints: g.keypoints.clone(), confidence: 1.0, joint_confidence: vec![1.0; k] })
                        .collect(),
                })
                .collect();
            let r: EvalResult = evaluate(&exact, &scenes, &kappas, &thresholds).expect("evaluate");
            perfect_ok &= r.ap == 1.0 && r.ar == 1.0;
        }
    }
    verdict(
        oks_gap <= 1e-9 && ap_gap <= 1e-9 && ar_gap <= 1e-9 && perfect_ok,
        format!("500 toy sets, max gap OKS {oks_gap:.1e}, AP {ap_gap:.1e}, AR {ar_gap:.1e} (limit 1e-9), perfect predictions AP = AR = 1: {perfect_ok}"),
    )
}

// 6 and 7 --------------------------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SCENES: usize = 2000;
const TEST_SCENES: usize = 400;
const STEPS: usize = 3000;
const BATCH: usize = 16;
const RUN_LIMIT_SECS: f64 = 1800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Variant {
    IntraOnly,
    Group(usize),
}

impl Variant {
    fn name(self) -> String {
        match self {
            Variant::IntraOnly => "intra-only".into(),
            Variant::Group(n) => format!("N={n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunSettings {
    variant: Variant,
    seed: u64,
    data_seed: u64,
    train_scenes: usize,
    test_scenes: usize,
    steps: usize,
    batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunResult {
    settings: RunSettings,
    train_secs: f64,
    final_loss: f64,
    /// Metrics on the test scenes with at least one occluded joint.
    occluded_scenes: EvalResult,
    all_scenes: EvalResult,
}

/// Global seed of the generator for acceptance seed `s`. Scene seeds are
/// `global ⊕ scene_id`, so nearby globals would share most scenes.
fn data_seed(s: u64) -> u64 {
    (s + 1) << 32
}

fn ablation_run(ctx: &Ctx, variant: Variant, seed: u64) -> RunResult {
    let settings = RunSettings {
        variant,
        seed,
        data_seed: data_seed(seed),
        train_scenes: TRAIN_SCENES,
        test_scenes: TEST_SCENES,
        steps: STEPS,
        batch: BATCH,
    };
    let cache = ctx.dir.join("runs").join(format!("{}_seed{seed}.json", variant.name()));
    if !ctx.fresh {
        if let Some(r) = std::fs::read(&cache).ok().and_then(|b| serde_json::from_slice::<RunResult>(&b).ok()) {
            if r.settings == settings {
                eprintln!("reusing {}", cache.display());
                return r;
            }
        }
    }
    let template = SkeletonTemplate::desk();
    let scene_cfg = SceneConfig::default();
    let train = generate_scenes(&template, &scene_cfg, 0, TRAIN_SCENES, settings.data_seed).expect("train scenes");
    let test = generate_scenes(&template, &scene_cfg, TRAIN_SCENES as u64, TEST_SCENES, settings.data_seed).expect("test scenes");
    let occluded: Vec<SceneRecord> = test.iter().filter(|s| s.has_occlusion()).cloned().collect();
    let model = match variant {
        Variant::IntraOnly => ModelConfig { intra_only: true, ..ModelConfig::default() },
        Variant::Group(n) => ModelConfig { inter: InterConfig { persons: n, ..InterConfig::default() }, ..ModelConfig::default() },
    };
    let tc = TrainConfig { steps: STEPS, batch: BATCH, seed, eval_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    eprintln!("training {} seed {seed}", variant.name());
    let t0 = Instant::now();
    let outcome = train_loop(&model, &tc, init_model(&model, seed).expect("init"), &train, None, None).expect("training");
    let train_secs = t0.elapsed().as_secs_f64();
    let kappas = template.kappas();
    let score = |scenes: &[SceneRecord]| {
        let preds = predict_scenes(&outcome.store, &model, scenes, Decoder::Dark, Head::Final, false).expect("predict");
        evaluate(&preds, scenes, &kappas, &oks_thresholds()).expect("evaluate")
    };
    let tail = &outcome.log[outcome.log.len().saturating_sub(100)..];
    let result = RunResult {
        settings,
        train_secs,
        final_loss: tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len().max(1) as f64,
        occluded_scenes: score(&occluded),
        all_scenes: score(&test),
    };
    eprintln!(
        "{} seed {seed}: {train_secs:.0}s, occluded-scene AP {:.4}, occluded error {:.3}, all-scene AP {:.4}",
        variant.name(),
        result.occluded_scenes.ap,
        result.occluded_scenes.occluded_error,
        result.all_scenes.ap
    );
    relpose_core::scenes::write_atomic(&cache, &serde_json::to_vec_pretty(&result).expect("json")).expect("cache");
    result
}

fn relation_gain(ctx: &Ctx) -> Verdict {
    let mut rows = Vec::new();
    for &s in &SEEDS {
        rows.push((ablation_run(ctx, Variant::IntraOnly, s), ablation_run(ctx, Variant::Group(3), s)));
    }
    let wins = rows.iter().filter(|(a, b)| b.occluded_scenes.ap > a.occluded_scenes.ap).count();
    let gain = rows.iter().map(|(a, b)| b.occluded_scenes.ap - a.occluded_scenes.ap).sum::<f64>() / rows.len() as f64;
    let err_a = rows.iter().map(|(a, _)| a.occluded_scenes.occluded_error).sum::<f64>() / rows.len() as f64;
    let err_b = rows.iter().map(|(_, b)| b.occluded_scenes.occluded_error).sum::<f64>() / rows.len() as f64;
    let reduction = (err_a - err_b) / err_a;
    let slowest = rows.iter().flat_map(|(a, b)| [a.train_secs, b.train_secs]).fold(0.0, f64::max);
    let per_seed: Vec<String> = rows
        .iter()
        .map(|(a, b)| format!("seed {}: {:.1} vs {:.1}", a.settings.seed, 100.0 * b.occluded_scenes.ap, 100.0 * a.occluded_scenes.ap))
        .collect();
    verdict(
        wins == rows.len() && gain >= 0.03 && reduction >= 0.15 && slowest <= RUN_LIMIT_SECS,
        format!(
            "full beats intra-only in {wins}/3 seeds ({}), mean gain {:+.2} AP points (need +3), occluded error {err_b:.2} vs {err_a:.2} px ({:.1}% lower, need 15%), slowest run {slowest:.0}s",
            per_seed.join("; "),
            100.0 * gain,
            100.0 * reduction
        ),
    )
}

fn group_size_ablation(ctx: &Ctx) -> Verdict {
    let mut ok = 0;
    let mut per_seed = Vec::new();
    for &s in &SEEDS {
        let aps: Vec<f64> = (1..=3).map(|n| ablation_run(ctx, Variant::Group(n), s).all_scenes.ap).collect();
        if aps[0] <= aps[1] && aps[1] <= aps[2] {
            ok += 1;
        }
        per_seed.push(format!("seed {s}: {:.1}/{:.1}/{:.1}", 100.0 * aps[0], 100.0 * aps[1], 100.0 * aps[2]));
    }
    verdict(ok >= 2, format!("AP non-decreasing over N = 1/2/3 in {ok}/3 seeds, need 2 ({})", per_seed.join("; ")))
}

// 8 --------------------------------------------------------------------------

fn lightweight_module(_: &Ctx) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for preset in [Preset::Paper, Preset::Desk] {
        let cfg = RunConfig::preset(preset).model();
        let store = init_model::<f32>(&cfg, 0).expect("init");
        let frac = inter_fraction(&store);
        let (h, w) = cfg.feature();
        let r = cfg.inter.ratio;
        let l = cfg.inter.sequence_len(cfg.feature());
        pass &= frac < 0.15 && l == (h / r) * (w / r) * cfg.inter.persons;
        parts.push(format!("{preset}: {:.2}% of {} parameters, L = {l}", 100.0 * frac, store.element_count()));
        if preset == Preset::Paper {
            pass &= l == 1152;
        }
    }
    verdict(pass, format!("{} (limits 15%, paper L = 1152)", parts.join("; ")))
}

// 9 --------------------------------------------------------------------------

fn determinism_and_persistence(ctx: &Ctx) -> Verdict {
    let base = RunConfig {
        scenes: 60,
        steps: 25,
        batch: 4,
        eval_every: 0,
        checkpoint_every: 10,
        seed: 9,
        out: ctx.dir.join("determinism/data"),
        ..RunConfig::preset(Preset::Desk)
    };
    commands::generate(&base).expect("generate");
    let data = RunConfig { train_data: Some(base.train_path()), val_data: Some(base.val_path()), test_data: Some(base.test_path()), ..base };
    let runs: Vec<(RunConfig, Vec<u8>, Vec<u8>)> = ["a", "b"]
        .iter()
        .map(|r| {
            let cfg = RunConfig { out: ctx.dir.join("determinism").join(r), ..data.clone() };
            commands::train(&cfg).expect("train");
            let out = commands::train_outputs(&cfg);
            (cfg, std::fs::read(&out.metrics).expect("metrics"), std::fs::read(&out.checkpoint).expect("checkpoint"))
        })
        .collect();
    let logs_equal = runs[0].1 == runs[1].1 && runs[0].2 == runs[1].2;

    let cfg = &runs[0].0;
    let ckpt = commands::train_outputs(cfg).checkpoint;
    let store = load_checkpoint(&ckpt).expect("load");
    let copy = cfg.out.join("copy.ckpt");
    save_checkpoint(&store, &copy).expect("save");
    let round_trip = encode_checkpoint(&load_checkpoint(&copy).expect("reload")) == std::fs::read(&ckpt).expect("bytes");

    let test = relpose_core::scenes::read_dataset(&cfg.test_path()).expect("test scenes");
    let kappas = cfg.skeleton().kappas();
    let in_memory = {
        let mut s = init_model::<f32>(&cfg.model(), cfg.seed).expect("init");
        relpose_core::train::restore_into(&mut s, &store, true).expect("restore");
        let preds = predict_scenes(&s, &cfg.model(), &test, Decoder::Dark, Head::Final, false).expect("predict");
        evaluate(&preds, &test, &kappas, &oks_thresholds()).expect("evaluate")
    };
    let retrained = train_loop(&cfg.model(), &cfg.train_config(), init_model(&cfg.model(), cfg.seed).expect("init"), &relpose_core::scenes::read_dataset(&cfg.train_path()).expect("train scenes"), None, None).expect("train");
    let fresh = {
        let preds = predict_scenes(&retrained.store, &cfg.model(), &test, Decoder::Dark, Head::Final, false).expect("predict");
        evaluate(&preds, &test, &kappas, &oks_thresholds()).expect("evaluate")
    };
    let from_file = commands::eval(&RunConfig { checkpoint: Some(copy), ..cfg.clone() }).expect("eval").final_head;
    let metrics_equal = from_file == in_memory && from_file == fresh;
    verdict(
        logs_equal && round_trip && metrics_equal,
        format!(
            "repeated runs bit-identical: {logs_equal}; checkpoint round trip exact: {round_trip}; eval from file equals in-memory: {metrics_equal} (AP {:.4})",
            from_file.ap
        ),
    )
}
