//! Pipeline commands behind the `boxattn` binary.
//!
//! Every command reads a [`RunConfig`] (TOML file plus flag overrides) and
//! writes its artifacts under `out`:
//!
//! ```text
//! out/data/{train,test}/annotations.json, images/*.ppm   synth
//! out/detector.ckpt, out/detector_trace.csv               train (plain detector)
//! out/model.ckpt, out/trace.csv                           train (relationship model)
//! out/predictions.tsv                                     predict
//! out/prior_<mode>.tsv, out/baseline_<mode>.tsv           baseline
//! out/eval_<name>_<protocol>.{txt,kv}                     eval
//! out/gradcheck.txt                                       gradcheck
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use boxattn::baselines::{fit_prior, score_pairs, PriorMode};
use boxattn::data::synthetic::{generate, write_dataset, SyntheticConfig};
use boxattn::data::{load_annotations, load_image, Dataset};
use boxattn::diagnostics::{gradient_suite, OpCheck};
use boxattn::inference::{detect_relationships, load_predictions, save_predictions, ImagePredictions, InferenceConfig};
use boxattn::metrics::{action_roles_for, align, evaluate, OidWeights, Protocol, Report};
use boxattn::model::{decode_subjects, Model, ModelConfig};
use boxattn::numerics::Tensor;
use boxattn::seed::{stage_rng, sub_seed};
use boxattn::training::{train, write_trace, LossConfig, Schedule, TraceRow, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Required; every stage derives its own stream from it.
    pub seed: Option<u64>,
    /// Worker threads for per-image work. Results do not depend on it.
    pub threads: usize,
    pub out: PathBuf,
    /// Training split directory; defaults to `out/data/train`.
    pub train_data: Option<PathBuf>,
    /// Evaluation split directory; defaults to `out/data/test`.
    pub test_data: Option<PathBuf>,
    /// Images in the synthetic test split (the train split size is `synth.num_images`).
    pub test_images: usize,
    /// Start the relationship model from the trained plain detector.
    pub warm_start: bool,
    pub synth: SyntheticConfig,
    pub model: ModelConfig,
    pub detector_schedule: Schedule,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    pub weights: OidWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: 1,
            out: PathBuf::from("out"),
            train_data: None,
            test_data: None,
            test_images: 100,
            warm_start: true,
            synth: SyntheticConfig::default(),
            model: ModelConfig::default(),
            detector_schedule: Schedule::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            weights: OidWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .context("the run config has no seed; set `seed` in the file or pass --seed")
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        ensure!(self.threads >= 1, "threads must be at least 1");
        self.synth.validate()?;
        self.model.validate()?;
        self.detector_schedule.validate()?;
        self.schedule.validate()?;
        self.inference.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.train_data.clone().unwrap_or_else(|| self.out.join("data/train"))
    }

    pub fn test_dir(&self) -> PathBuf {
        self.test_data.clone().unwrap_or_else(|| self.out.join("data/test"))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.threads).build()?)
    }
}

/// A split on disk: annotations plus decoded images.
pub struct Split {
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub images: Vec<Tensor>,
}

pub fn load_split(dir: &Path, config: &ModelConfig, threads: &rayon::ThreadPool) -> Result<Split> {
    let path = dir.join("annotations.json");
    let dataset = load_annotations(&path).with_context(|| format!("loading {}", path.display()))?;
    let (h, w) = config.input_size;
    let images = threads.install(|| {
        dataset
            .images
            .par_iter()
            .map(|a| -> Result<Tensor> {
                let img = load_image(dir, a).with_context(|| format!("image of {}", a.image_id))?;
                ensure!(
                    (img.height, img.width) == (h, w),
                    "image {} is {}x{}, the model expects {h}x{w}",
                    a.image_id,
                    img.height,
                    img.width
                );
                Ok(img.to_tensor())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Split {
        dir: dir.to_path_buf(),
        dataset,
        images,
    })
}

fn check_vocabulary(config: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let v = &dataset.vocabulary;
    ensure!(
        v.object_classes.len() == config.num_object_classes && v.predicates.len() == config.num_predicates,
        "model expects {} object classes and {} predicates; the data has {} and {}",
        config.num_object_classes,
        config.num_predicates,
        v.object_classes.len(),
        v.predicates.len()
    );
    Ok(())
}

/// Writes the synthetic train and test splits.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let train_cfg = SyntheticConfig {
        seed: sub_seed(seed, "synth.train"),
        ..cfg.synth.clone()
    };
    let test_cfg = SyntheticConfig {
        seed: sub_seed(seed, "synth.test"),
        num_images: cfg.test_images,
        ..cfg.synth.clone()
    };
    let (train_dir, test_dir) = (cfg.train_dir(), cfg.test_dir());
    write_dataset(&train_dir, &generate(&train_cfg)?)?;
    write_dataset(&test_dir, &generate(&test_cfg)?)?;
    Ok((train_dir, test_dir))
}

pub struct TrainOutput {
    pub detector_trace: Vec<TraceRow>,
    pub trace: Vec<TraceRow>,
    pub model: Model,
}

pub fn detector_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("detector.ckpt")
}

pub fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model.ckpt")
}

/// Trains the plain detector, then the relationship model (warm-started from
/// the detector unless disabled).
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let split = load_split(&cfg.train_dir(), &cfg.model, &cfg.pool()?)?;
    check_vocabulary(&cfg.model, &split.dataset)?;
    std::fs::create_dir_all(&cfg.out)?;
    let anns = &split.dataset.images;

    let mut detector = Model::new(cfg.model.clone(), &mut stage_rng(seed, "init.detector"))?;
    let detector_trace = train(
        &mut detector,
        &split.images,
        anns,
        &cfg.detector_schedule,
        &cfg.loss,
        TrainMode::Detector,
        sub_seed(seed, "train.detector"),
    )?;
    detector.save(&detector_path(cfg))?;
    write_trace(&cfg.out.join("detector_trace.csv"), &detector_trace)?;

    let mut model = Model::new(cfg.model.clone(), &mut stage_rng(seed, "init.model"))?;
    if cfg.warm_start {
        model.warm_start_from(&detector)?;
    }
    let trace = train(
        &mut model,
        &split.images,
        anns,
        &cfg.schedule,
        &cfg.loss,
        TrainMode::Relationships,
        sub_seed(seed, "train.model"),
    )?;
    model.save(&model_path(cfg))?;
    write_trace(&cfg.out.join("trace.csv"), &trace)?;
    Ok(TrainOutput {
        detector_trace,
        trace,
        model,
    })
}

pub fn predictions_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("predictions.tsv")
}

/// Runs two-stage relationship detection over the test split.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| model_path(cfg));
    let model = Model::load(&ckpt, cfg.model.clone()).with_context(|| format!("loading {}", ckpt.display()))?;
    let split = load_split(&cfg.test_dir(), &cfg.model, &pool)?;
    check_vocabulary(&cfg.model, &split.dataset)?;
    let preds = pool.install(|| {
        split
            .dataset
            .images
            .par_iter()
            .zip(&split.images)
            .map(|(a, img)| -> Result<ImagePredictions> {
                Ok(ImagePredictions {
                    image_id: a.image_id.clone(),
                    detections: detect_relationships(&model, img, &cfg.inference)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = predictions_path(cfg);
    save_predictions(&path, &preds, &split.dataset.vocabulary)?;
    Ok(path)
}

pub fn baseline_path(cfg: &RunConfig, mode: PriorMode) -> PathBuf {
    cfg.out.join(format!("baseline_{}.tsv", mode.name()))
}

/// Fits the predicate prior on the train split and scores pairs of plain
/// detector outputs on the test split.
pub fn cmd_baseline(cfg: &RunConfig, mode: PriorMode, checkpoint: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let train_path = cfg.train_dir().join("annotations.json");
    let train_set = load_annotations(&train_path).with_context(|| format!("loading {}", train_path.display()))?;
    check_vocabulary(&cfg.model, &train_set)?;
    let prior = fit_prior(&train_set.images, cfg.model.num_predicates, mode);
    std::fs::create_dir_all(&cfg.out)?;
    prior.save(
        &cfg.out.join(format!("prior_{}.tsv", mode.name())),
        &train_set.vocabulary,
    )?;

    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| detector_path(cfg));
    let detector = Model::load(&ckpt, cfg.model.clone()).with_context(|| format!("loading {}", ckpt.display()))?;
    let split = load_split(&cfg.test_dir(), &cfg.model, &pool)?;
    let inf = &cfg.inference;
    let preds = pool.install(|| {
        split
            .dataset
            .images
            .par_iter()
            .zip(&split.images)
            .map(|(a, img)| -> Result<ImagePredictions> {
                let head = detector.forward_unconditioned(img)?;
                let dets = decode_subjects(&head, inf.subject_threshold, inf.nms_iou, cfg.model.not_visible_label());
                Ok(ImagePredictions {
                    image_id: a.image_id.clone(),
                    detections: score_pairs(&dets, &prior, inf.top_k),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let path = baseline_path(cfg, mode);
    save_predictions(&path, &preds, &split.dataset.vocabulary)?;
    Ok(path)
}

pub fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Vcoco => "vcoco",
        Protocol::Vrd => "vrd",
        Protocol::Oid => "oid",
    }
}

/// Evaluates a predictions file against ground truth (the test split by
/// default) and writes `eval_<name>_<protocol>.txt` and `.kv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &Path,
    ground_truth: Option<&Path>,
    protocol: Protocol,
) -> Result<Report> {
    cfg.validate()?;
    let gt_path = ground_truth
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.test_dir().join("annotations.json"));
    let gt = load_annotations(&gt_path).with_context(|| format!("loading {}", gt_path.display()))?;
    let preds = load_predictions(predictions, &gt.vocabulary, cfg.model.not_visible_label())
        .with_context(|| format!("loading {}", predictions.display()))?;
    let images = align(&gt.images, &preds)?;
    let roles = action_roles_for(&gt.vocabulary, &gt.images);
    let report = evaluate(protocol, &images, &gt.vocabulary, &roles, &cfg.weights)?;
    let name = predictions
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "predictions".into());
    std::fs::create_dir_all(&cfg.out)?;
    let stem = cfg.out.join(format!("eval_{name}_{}", protocol_name(protocol)));
    std::fs::write(stem.with_extension("txt"), report.to_table())?;
    std::fs::write(stem.with_extension("kv"), report.to_key_values())?;
    Ok(report)
}

/// Seeds used by `gradcheck`.
pub const GRADCHECK_SEEDS: std::ops::Range<u64> = 0..20;

/// Runs the finite-difference suite and writes `gradcheck.txt`. Fails when
/// any operation exceeds its tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<OpCheck>> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let seeds = seed..seed + GRADCHECK_SEEDS.end;
    let checks = gradient_suite(seeds)?;
    let mut text = String::from("operation\tworst_relative_error\ttolerance\tstatus\n");
    for c in &checks {
        text.push_str(&format!(
            "{}\t{:e}\t{:e}\t{}\n",
            c.name,
            c.worst,
            c.tolerance(),
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("gradcheck.txt"), &text)?;
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        bail!("gradient check failed for {}: {:e}", bad.name, bad.worst);
    }
    Ok(checks)
}

/// Metrics of one full run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub model: Report,
    pub freq: Report,
    pub freq_overlap: Report,
}

/// synth, train, predict, both baselines, and evaluation of all three
/// prediction files under `protocol`.
pub fn cmd_pipeline(cfg: &RunConfig, protocol: Protocol) -> Result<PipelineReport> {
    cmd_synth(cfg)?;
    cmd_train(cfg)?;
    let preds = cmd_predict(cfg, None)?;
    let freq = cmd_baseline(cfg, PriorMode::Freq, None)?;
    let overlap = cmd_baseline(cfg, PriorMode::FreqOverlap, None)?;
    Ok(PipelineReport {
        model: cmd_eval(cfg, &preds, None, protocol)?,
        freq: cmd_eval(cfg, &freq, None, protocol)?,
        freq_overlap: cmd_eval(cfg, &overlap, None, protocol)?,
    })
}
