//! The five commands. Every artifact is written atomically with a
//! `<artifact>.config.json` echo of the resolved configuration beside it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use relpose_core::eval::{evaluate, joint_errors, oks_thresholds, EvalResult};
use relpose_core::model::{init_model, inter_fraction};
use relpose_core::numcore::{BackwardFault, GradCheckReport, ParamStore};
use relpose_core::predict::{predict_scene, predict_scenes, Head};
use relpose_core::scenes::{generate_scene, generate_scenes, read_dataset, write_atomic, write_dataset, SceneConfig, SceneRecord};
use relpose_core::train::{check_model_gradients, load_checkpoint, restore_into, train_loop, TrainOutcome, TrainOutputs, Validation};
use serde_json::Value;

use crate::config::RunConfig;
use crate::dump::write_dump;

pub fn echo_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    artifact.with_file_name(name)
}

pub fn write_echo(artifact: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let json = serde_json::to_vec_pretty(cfg)?;
    write_atomic(&echo_path(artifact), &json).with_context(|| format!("writing config echo for {}", artifact.display()))
}

fn write_artifact(path: &Path, bytes: &[u8], cfg: &RunConfig) -> anyhow::Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    write_echo(path, cfg)
}

fn pool(cfg: &RunConfig) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?)
}

fn load_scenes(path: &Path) -> anyhow::Result<Vec<SceneRecord>> {
    read_dataset(path).with_context(|| format!("reading scenes from {}", path.display()))
}

/// Scene counts of the train, val and test splits.
pub fn split_counts(total: usize) -> [usize; 3] {
    let train = total * 8 / 10;
    let val = total / 10;
    [train, val, total - train - val]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub files: Vec<(PathBuf, usize, usize)>,
}

/// Writes the three splits. Scene ids are contiguous across splits, so every
/// scene has its own seed.
pub fn generate(cfg: &RunConfig) -> anyhow::Result<GenerateSummary> {
    let template = cfg.skeleton();
    let scene_cfg = cfg.scene_config();
    let paths = [cfg.train_path(), cfg.val_path(), cfg.test_path()];
    let mut first = 0u64;
    let mut summary = GenerateSummary { files: Vec::new() };
    let pool = pool(cfg)?;
    for (path, count) in paths.into_iter().zip(split_counts(cfg.scenes)) {
        let scenes = pool.install(|| generate_scenes(&template, &scene_cfg, first, count, cfg.seed))?;
        write_dataset(&scenes, &path).with_context(|| format!("writing {}", path.display()))?;
        write_echo(&path, cfg)?;
        let persons = scenes.iter().map(|s| s.persons.len()).sum();
        println!("{}: {count} scenes, {persons} persons", path.display());
        summary.files.push((path, count, persons));
        first += count as u64;
    }
    Ok(summary)
}

pub fn train_outputs(cfg: &RunConfig) -> TrainOutputs {
    TrainOutputs {
        checkpoint: cfg.out.join("model.ckpt"),
        metrics: cfg.out.join("metrics.csv"),
        eval_log: cfg.out.join("val_metrics.csv"),
    }
}

/// Trains from `train_data` (validating on `val_data` when that file
/// exists). A configured `checkpoint` is a warm start.
pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    let model = cfg.model();
    let train = load_scenes(&cfg.train_path())?;
    let val_path = cfg.val_path();
    let val = if val_path.exists() { load_scenes(&val_path)? } else { Vec::new() };
    let kappas = cfg.skeleton().kappas();
    let mut store = init_model::<f32>(&model, cfg.seed)?;
    if let Some(path) = &cfg.checkpoint {
        let loaded = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        restore_into(&mut store, &loaded, false)?;
    }
    log::info!(
        "{} parameters, {:.1}% in the relation stage",
        store.element_count(),
        100.0 * inter_fraction(&store)
    );
    let outputs = train_outputs(cfg);
    for p in [&outputs.checkpoint, &outputs.metrics, &outputs.eval_log] {
        write_echo(p, cfg)?;
    }
    let validation = (!val.is_empty()).then(|| Validation { scenes: &val, kappas: &kappas });
    let outcome = pool(cfg)?.install(|| train_loop(&model, &cfg.train_config(), store, &train, validation, Some(&outputs)))?;
    println!("wrote {}", outputs.checkpoint.display());
    Ok(outcome)
}

/// Architecture values recorded in the echo next to `checkpoint` that
/// differ from `cfg`, as `(key, checkpoint value, config value)`.
fn echo_mismatches(checkpoint: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<(&'static str, String, String)>> {
    let path = echo_path(checkpoint);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let echo: Value = serde_json::from_slice(&std::fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::new();
    for (key, ours) in cfg.architecture() {
        let theirs = match echo.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => continue,
        };
        if theirs != ours {
            out.push((key, theirs, ours));
        }
    }
    Ok(out)
}

/// Loads the configured checkpoint into a model built from `cfg`, failing
/// with both values when they disagree on the architecture.
pub fn load_model(cfg: &RunConfig) -> anyhow::Result<ParamStore<f32>> {
    let path = cfg.checkpoint_path();
    if let Some((key, theirs, ours)) = echo_mismatches(&path, cfg)?.into_iter().next() {
        bail!("checkpoint {} was trained with {key} = {theirs}, but the configuration has {key} = {ours}", path.display());
    }
    let loaded = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(head) = loaded.by_name("intra.head.w") {
        if let [d, k] = *head.value.shape() {
            for (key, theirs, ours) in [("d", d, cfg.d), ("k", k, cfg.k)] {
                if theirs != ours {
                    bail!("checkpoint {} has {key} = {theirs}, but the configuration has {key} = {ours}", path.display());
                }
            }
        }
    }
    let has_inter = loaded.iter().any(|(_, p)| p.name.starts_with("inter."));
    if has_inter == cfg.intra_only {
        bail!("checkpoint {} has intra_only = {}, but the configuration has intra_only = {}", path.display(), !has_inter, cfg.intra_only);
    }
    let mut store = init_model::<f32>(&cfg.model(), cfg.seed)?;
    restore_into(&mut store, &loaded, true)?;
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub final_head: EvalResult,
    pub intermediate: EvalResult,
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<EvalReport> {
    let store = load_model(cfg)?;
    let test = load_scenes(&cfg.test_path())?;
    let model = cfg.model();
    let kappas = cfg.skeleton().kappas();
    let parallel = cfg.workers > 1;
    let pool = pool(cfg)?;
    let run = |head| -> anyhow::Result<_> {
        let preds = pool.install(|| predict_scenes(&store, &model, &test, cfg.decoder, head, parallel))?;
        let result = evaluate(&preds, &test, &kappas, &oks_thresholds())?;
        Ok((preds, result))
    };
    let (preds, final_head) = run(Head::Final)?;
    let (_, intermediate) = run(Head::Intermediate)?;

    write_artifact(&cfg.out.join("eval.csv"), final_head.to_csv().as_bytes(), cfg)?;
    write_artifact(&cfg.out.join("eval_intermediate.csv"), intermediate.to_csv().as_bytes(), cfg)?;
    let mut table = String::new();
    writeln!(table, "final head ({} decoding, {} scenes)", cfg.decoder, test.len())?;
    table.push_str(&final_head.to_table());
    writeln!(table, "\nintermediate head")?;
    table.push_str(&intermediate.to_table());
    write_artifact(&cfg.out.join("eval.txt"), table.as_bytes(), cfg)?;
    print!("{table}");
    if cfg.joint_dump {
        let mut lines = Vec::new();
        for e in joint_errors(&preds, &test)? {
            serde_json::to_writer(&mut lines, &e)?;
            lines.push(b'\n');
        }
        write_artifact(&cfg.out.join("joint_errors.jsonl"), &lines, cfg)?;
    }
    Ok(EvalReport { final_head, intermediate })
}

pub fn attention_path(cfg: &RunConfig, scene_id: u64) -> PathBuf {
    cfg.out.join("attention").join(format!("scene_{scene_id}.attn"))
}

/// Writes `predictions.jsonl` with one line per scene and, with the dump
/// toggle on, one attention file per scene.
pub fn infer(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let store = load_model(cfg)?;
    let scenes = load_scenes(&cfg.test_path())?;
    let model = cfg.model();
    let mut lines = Vec::new();
    for scene in &scenes {
        let (pred, exports) = predict_scene(&store, &model, scene, cfg.decoder, Head::Final)?;
        serde_json::to_writer(&mut lines, &pred)?;
        lines.push(b'\n');
        if cfg.dump_attention && !cfg.intra_only {
            let path = attention_path(cfg, scene.scene_id);
            write_dump(&path, scene.scene_id, &exports)?;
            write_echo(&path, cfg)?;
        }
    }
    let path = cfg.out.join("predictions.jsonl");
    write_artifact(&path, &lines, cfg)?;
    println!("wrote {} ({} scenes)", path.display(), scenes.len());
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Full-model check in f64 on one generated scene.
pub fn gradcheck(cfg: &RunConfig, inject_bug: Option<f64>) -> anyhow::Result<GradcheckOutcome> {
    // A two-person group with single-head relation attention: one padded
    // slot exercises the mask, one head matches the unsplit attention form.
    let scene = generate_scene(&cfg.skeleton(), &SceneConfig { persons: 2, ..cfg.scene_config() }, 0, cfg.seed)?;
    let inter = relpose_core::inter::InterConfig { dump_attention: false, heads: 1, ..cfg.model().inter };
    let model = relpose_core::model::ModelConfig { inter, ..cfg.model() };
    let fault = inject_bug.map(BackwardFault::ScaleLinearWeightGrad);
    let report = check_model_gradients(&model, &scene, cfg.target_sigma, cfg.alpha, cfg.gradcheck_eps, cfg.seed, fault)?;
    let tol = cfg.gradcheck_tol;
    let mut text = String::from("parameter,coords,max_rel_err,max_abs_err,status\n");
    for p in &report.params {
        let status = if p.max_rel_err < tol { "pass" } else { "FAIL" };
        writeln!(text, "{},{},{:.3e},{:.3e},{status}", p.name, p.coords_checked, p.max_rel_err, p.max_abs_err)?;
    }
    let passed = report.passed(tol);
    print!("{text}");
    println!(
        "{}: {} parameters, max relative error {:.3e} (tolerance {tol:.0e})",
        if passed { "PASS" } else { "FAIL" },
        report.params.len(),
        report.max_rel_err()
    );
    write_artifact(&cfg.out.join("gradcheck.csv"), text.as_bytes(), cfg)?;
    Ok(GradcheckOutcome { report, passed })
}
