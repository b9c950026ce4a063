//! Subcommand implementations. Every command reads the shared [`RunConfig`],
//! exchanges data with the others only through files in the output
//! directory, and stamps its artifacts with the config hash.

use crate::config::RunConfig;
use freqpure::diffusion::purify_traced;
use freqpure::image::{ImageBatch, RangeTag};
use freqpure::io::{
    ensure_dir, save_magnified_diff_png, save_unit_png, sha256_hex, write_curve_csv,
    write_histogram_csv, write_text, write_trace_csv, BatchFile, TensorMap,
};
use freqpure::models::{
    generate_toy_dataset, load_external_classifier, load_external_score, train_classifier_on,
    train_score_on, ModelManifest, ToyCnn, TrainedScore,
};
use freqpure::{
    perturbation_spectrum, radial_spectrum, render_table, run_attack, run_sweep, subset_indices,
    AttackMode, BenchComponents, Classifier, DiffusionSchedule, ScoreModel,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Command failures sorted by their exit class.
#[derive(Debug)]
pub enum CmdError {
    /// Bad flags or config values — exit 1.
    Usage(String),
    /// A pipeline component failed — exit 2.
    Component(String),
    /// The evaluation grid produced no usable cell — exit 3.
    AllCellsFailed(String),
}

impl From<freqpure::Error> for CmdError {
    fn from(e: freqpure::Error) -> Self {
        CmdError::Component(e.to_string())
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

fn classifier_weights(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("classifier.json")
}

fn score_weights(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("score.json")
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".to_string())
}

#[derive(Serialize)]
struct TrainSummary {
    schema: &'static str,
    config_hash: String,
    seed: u64,
    classifier_hash: String,
    classifier_val_accuracy_pct: f64,
    score_hash: String,
    score_val_loss: f64,
}

/// Trains the toy classifier and score model; writes weight files, loss
/// curves, and a summary stamped with `(config hash, seed)`.
pub fn cmd_train(cfg: &RunConfig, hash: &str) -> CmdResult<()> {
    ensure_dir(&cfg.out_dir)?;
    let dataset = generate_toy_dataset::<f32>(&cfg.dataset)?;
    log::info!(
        "training classifier: {} epochs on {} images",
        cfg.train.classifier_epochs,
        dataset.train.len()
    );
    let classifier = train_classifier_on(&dataset, cfg.train.classifier_epochs, cfg.seed)?;
    let classifier_map = classifier.model.to_tensor_map();
    classifier_map.save(&classifier_weights(cfg))?;
    write_curve_csv(
        &cfg.out_dir.join("classifier-curve.csv"),
        ("train_loss", "val_accuracy_pct"),
        &classifier.curve,
    )?;
    let val_acc = classifier.curve.last().map_or(f64::NAN, |&(_, a)| a);

    log::info!(
        "training score model: {} epochs, {} features",
        cfg.train.score_epochs,
        cfg.train.score_features
    );
    let train_signed = dataset.train.images.unit_to_signed()?.into_data();
    let val_signed = dataset.val.images.unit_to_signed()?.into_data();
    let score = train_score_on(
        &train_signed,
        &val_signed,
        DiffusionSchedule::default(),
        cfg.train.score_features,
        cfg.train.score_epochs,
        cfg.train.score_batch_size,
        cfg.train.score_learning_rate,
        // Distinct stream from the classifier so the two trainings never
        // share draws.
        cfg.seed.wrapping_add(0x5c0e),
    )?;
    let score_map = score.model.to_tensor_map();
    score_map.save(&score_weights(cfg))?;
    write_curve_csv(
        &cfg.out_dir.join("score-curve.csv"),
        ("train_dsm_loss", "val_dsm_loss"),
        &score.curve,
    )?;
    let val_loss = score.curve.last().map_or(f64::NAN, |&(_, l)| l);

    let summary = TrainSummary {
        schema: "train-summary/1",
        config_hash: hash.to_string(),
        seed: cfg.seed,
        classifier_hash: classifier_map.content_hash(),
        classifier_val_accuracy_pct: val_acc,
        score_hash: score_map.content_hash(),
        score_val_loss: val_loss,
    };
    let json = serde_json::to_vec_pretty(&summary)
        .map_err(|e| CmdError::Component(e.to_string()))?;
    freqpure::io::atomic_write(&cfg.out_dir.join("train-summary.json"), &json)?;
    println!(
        "classifier: validation accuracy {val_acc:.2}%  ({})",
        classifier_weights(cfg).display()
    );
    println!(
        "score model: validation DSM loss {val_loss:.4}  ({})",
        score_weights(cfg).display()
    );
    Ok(())
}

struct LoadedClassifier {
    model: Box<dyn Classifier<f32>>,
    hash: String,
    tag: String,
}

fn load_classifier(cfg: &RunConfig) -> CmdResult<LoadedClassifier> {
    if let Some(manifest_path) = &cfg.external.classifier {
        let manifest = ModelManifest::load(manifest_path)?;
        let model = load_external_classifier::<f32>(manifest_path)?;
        let bytes = std::fs::read(manifest.weights_path(manifest_path)).map_err(|e| {
            CmdError::Component(format!("external classifier weights: {e}"))
        })?;
        Ok(LoadedClassifier {
            model: Box::new(model),
            hash: sha256_hex(&bytes),
            tag: format!("external:{}", file_stem(manifest_path)),
        })
    } else {
        let path = classifier_weights(cfg);
        if !path.exists() {
            return Err(CmdError::Component(format!(
                "no classifier weights at {}; run the train subcommand first",
                path.display()
            )));
        }
        let map = TensorMap::load(&path)?;
        let model = ToyCnn::<f32>::from_tensor_map(&map)?;
        Ok(LoadedClassifier {
            model: Box::new(model),
            hash: map.content_hash(),
            tag: "toy-cnn".to_string(),
        })
    }
}

struct LoadedScore {
    model: Box<dyn ScoreModel<f32>>,
    schedule: DiffusionSchedule,
    hash: String,
}

fn load_score(cfg: &RunConfig) -> CmdResult<LoadedScore> {
    if let Some(manifest_path) = &cfg.external.score {
        let manifest = ModelManifest::load(manifest_path)?;
        let model = load_external_score::<f32>(manifest_path)?;
        let bytes = std::fs::read(manifest.weights_path(manifest_path))
            .map_err(|e| CmdError::Component(format!("external score weights: {e}")))?;
        Ok(LoadedScore {
            schedule: model.schedule,
            model: Box::new(model),
            hash: sha256_hex(&bytes),
        })
    } else {
        let path = score_weights(cfg);
        if !path.exists() {
            return Err(CmdError::Component(format!(
                "no score-model weights at {}; run the train subcommand first",
                path.display()
            )));
        }
        let map = TensorMap::load(&path)?;
        let model = TrainedScore::<f32>::from_tensor_map(&map)?;
        Ok(LoadedScore {
            schedule: model.schedule,
            model: Box::new(model),
            hash: map.content_hash(),
        })
    }
}

/// The fixed test subset the attack and purify commands operate on: the
/// first evaluation subset's draw, so command outputs line up with the
/// sweep's first column.
fn attack_subset(cfg: &RunConfig) -> CmdResult<freqpure::LabeledBatch<f32>> {
    let dataset = generate_toy_dataset::<f32>(&cfg.dataset)?;
    let take = cfg.eval.subset_size.min(dataset.test.len());
    let seed = freqpure::bench::subset_seed(cfg.eval.subset_seed, 0);
    let indices = subset_indices(dataset.test.len(), take, seed)?;
    Ok(dataset.test.select(&indices)?)
}

/// How many samples get PNG exports.
const PNG_EXPORT_LIMIT: usize = 8;

/// Runs one attack mode on the fixed test subset and writes the adversarial
/// batch, the pixel-space perturbations (plus 20x-magnified PNG previews),
/// the optimization trace, and the radial spectrum histogram.
pub fn cmd_attack(cfg: &RunConfig, hash: &str, mode_str: &str) -> CmdResult<()> {
    let mode: AttackMode = mode_str.parse().map_err(|e: freqpure::Error| usage(e.to_string()))?;
    let classifier = load_classifier(cfg)?;
    let subset = attack_subset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    log::info!(
        "attacking {} images with mode {} (lambda {:.3e})",
        subset.len(),
        mode.name(),
        cfg.attack.lambda
    );
    let outcome = run_attack(
        classifier.model.as_ref(),
        &subset.images,
        &subset.labels,
        mode,
        &cfg.attack,
    )?;
    let clean_acc = classifier
        .model
        .accuracy_pct(&subset.images, &subset.labels)?;
    let adv_acc = classifier
        .model
        .accuracy_pct(&outcome.adversarial, &subset.labels)?;

    let mut clean_file = BatchFile::from_batch(&subset.images, Some(&subset.labels));
    clean_file.meta.insert("config_hash".into(), hash.into());
    clean_file.save(&cfg.out_dir.join("clean-subset.json"))?;

    let mut adv_file = BatchFile::from_batch(&outcome.adversarial, Some(&subset.labels));
    adv_file.meta.insert("config_hash".into(), hash.into());
    adv_file.meta.insert("mode".into(), mode.name().into());
    adv_file
        .meta
        .insert("clean_accuracy_pct".into(), format!("{clean_acc}"));
    adv_file
        .meta
        .insert("adversarial_accuracy_pct".into(), format!("{adv_acc}"));
    adv_file.save(&cfg.out_dir.join(format!("adversarial-{}.json", mode.name())))?;

    let diff = ImageBatch::new(
        outcome.adversarial.data() - subset.images.data(),
        RangeTag::Signed,
    )?;
    let mut diff_file = BatchFile::from_batch(&diff, Some(&subset.labels));
    diff_file.meta.insert("config_hash".into(), hash.into());
    diff_file.meta.insert("mode".into(), mode.name().into());
    diff_file.save(&cfg.out_dir.join(format!("perturbation-{}.json", mode.name())))?;

    write_trace_csv(
        &cfg.out_dir.join(format!("attack-trace-{}.csv", mode.name())),
        &outcome.trace,
    )?;
    let hist = perturbation_spectrum(&outcome.adversarial, &subset.images, cfg.histogram_bins)?;
    write_histogram_csv(
        &cfg.out_dir.join(format!("spectrum-{}.csv", mode.name())),
        &hist,
    )?;

    let png_dir = cfg.out_dir.join("png");
    ensure_dir(&png_dir)?;
    for i in 0..subset.len().min(PNG_EXPORT_LIMIT) {
        save_unit_png(&png_dir.join(format!("clean-{i:02}.png")), &subset.images, i)?;
        save_unit_png(
            &png_dir.join(format!("adversarial-{}-{i:02}.png", mode.name())),
            &outcome.adversarial,
            i,
        )?;
        save_magnified_diff_png(
            &png_dir.join(format!("perturbation-{}-x20-{i:02}.png", mode.name())),
            &subset.images,
            &outcome.adversarial,
            i,
            20.0,
        )?;
    }
    println!(
        "mode {}: clean accuracy {clean_acc:.2}% -> adversarial {adv_acc:.2}% after {} evaluations",
        mode.name(),
        outcome.trace.len()
    );
    Ok(())
}

/// Purifies a unit-range batch file; `--snapshots K` additionally exports
/// the diffused state, `K` evenly spaced reverse frames, and the final
/// result as PNG strips per sample.
pub fn cmd_purify(cfg: &RunConfig, hash: &str, input: &Path, snapshots: usize) -> CmdResult<()> {
    let score = load_score(cfg)?;
    let file = BatchFile::load(input)?;
    let batch = file.to_batch::<f32>()?;
    ensure_dir(&cfg.out_dir)?;
    log::info!(
        "purifying {} images at t* = {} (dt = {})",
        batch.batch_len(),
        cfg.purify.t_star,
        cfg.purify.dt
    );
    let (purified, snaps) = purify_traced(
        &batch,
        &score.schedule,
        score.model.as_ref(),
        &cfg.purify,
        snapshots,
    )?;

    let stem = file_stem(input);
    let mut out_file = BatchFile::from_batch(&purified, file.labels.as_deref());
    out_file.meta.insert("config_hash".into(), hash.into());
    out_file
        .meta
        .insert("t_star".into(), format!("{}", cfg.purify.t_star));
    out_file.meta.insert("source".into(), input.display().to_string());
    let out_path = cfg.out_dir.join(format!("purified-{stem}.json"));
    out_file.save(&out_path)?;

    if snapshots > 0 {
        let png_dir = cfg.out_dir.join("png");
        ensure_dir(&png_dir)?;
        let diffused = snaps.diffused.signed_to_unit()?.clip_to_range();
        let frames: Vec<(f64, ImageBatch<f32>)> = snaps
            .reverse
            .iter()
            .map(|(t, state)| Ok((*t, state.signed_to_unit()?.clip_to_range())))
            .collect::<freqpure::Result<_>>()?;
        for i in 0..batch.batch_len() {
            save_unit_png(
                &png_dir.join(format!("purify-{stem}-{i:02}-00-diffused.png")),
                &diffused,
                i,
            )?;
            for (j, (_, frame)) in frames.iter().enumerate() {
                save_unit_png(
                    &png_dir.join(format!("purify-{stem}-{i:02}-{:02}-step.png", j + 1)),
                    frame,
                    i,
                )?;
            }
            save_unit_png(
                &png_dir.join(format!("purify-{stem}-{i:02}-final.png")),
                &purified,
                i,
            )?;
        }
    }
    println!(
        "purified {} images -> {}",
        batch.batch_len(),
        out_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummaryFile {
    schema: &'static str,
    config_hash: String,
    seed: u64,
    classifier_hash: String,
    score_hash: String,
    execution: freqpure::bench::RunSummary,
}

/// Runs the full evaluation grid and writes the machine-readable report,
/// the rendered table, and the execution summary.
pub fn cmd_eval(cfg: &RunConfig, hash: &str) -> CmdResult<()> {
    let classifier = load_classifier(cfg)?;
    let score = load_score(cfg)?;
    let dataset = generate_toy_dataset::<f32>(&cfg.dataset)?;
    ensure_dir(&cfg.out_dir)?;
    let comps = BenchComponents {
        classifier: classifier.model.as_ref(),
        score: score.model.as_ref(),
        schedule: score.schedule,
        attack: cfg.attack,
        dt: cfg.purify.dt,
        final_step_noiseless: cfg.purify.final_step_noiseless,
        model_tag: classifier.tag.clone(),
        model_hash: classifier.hash.clone(),
        config_hash: hash.to_string(),
        cache_dir: Some(cfg.out_dir.join("cache")),
        workers: cfg.workers,
    };
    log::info!(
        "evaluation grid: {} modes x {} stopping times x {} repeats on {} subsets of {}",
        cfg.eval.modes.len(),
        cfg.eval.t_star_list.len(),
        cfg.eval.repeats,
        cfg.eval.subset_count,
        cfg.eval.subset_size
    );
    let (report, execution) = run_sweep(&comps, &cfg.eval, &dataset.test)?;
    report.save(&cfg.out_dir.join("report.json"))?;
    let table = render_table(&report);
    write_text(&cfg.out_dir.join("report.txt"), &table)?;
    let summary = RunSummaryFile {
        schema: "run-summary/1",
        config_hash: hash.to_string(),
        seed: cfg.seed,
        classifier_hash: classifier.hash.clone(),
        score_hash: score.hash.clone(),
        execution,
    };
    let json = serde_json::to_vec_pretty(&summary)
        .map_err(|e| CmdError::Component(e.to_string()))?;
    freqpure::io::atomic_write(&cfg.out_dir.join("run-summary.json"), &json)?;
    print!("{table}");
    if report.records.is_empty() && !report.failures.is_empty() {
        return Err(CmdError::AllCellsFailed(format!(
            "all {} cells failed; see {}",
            report.failures.len(),
            cfg.out_dir.join("report.json").display()
        )));
    }
    if !report.failures.is_empty() {
        log::warn!(
            "{} cell(s) failed; details in report.json",
            report.failures.len()
        );
    }
    Ok(())
}

/// Recomputes a radial spectrum histogram from an existing perturbation
/// batch file without touching models.
pub fn cmd_analyze(cfg: &RunConfig, input: &Path, bins: Option<usize>) -> CmdResult<()> {
    let bins = bins.unwrap_or(cfg.histogram_bins);
    if bins < 2 {
        return Err(usage(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let file = BatchFile::load(input)?;
    let batch = file.to_batch::<f32>()?;
    let hist = radial_spectrum(&batch, bins)?;
    ensure_dir(&cfg.out_dir)?;
    let out_path = cfg
        .out_dir
        .join(format!("spectrum-{}.csv", file_stem(input)));
    write_histogram_csv(&out_path, &hist)?;
    println!("{} bins -> {}", bins, out_path.display());
    Ok(())
}
