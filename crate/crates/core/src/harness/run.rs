//! Running one experiment end to end, and evaluating checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{resolve, ExperimentConfig, ModelKind};
use super::train::{train_loop, EpochRecord, LoopSettings};
use crate::cost::{count_params, CostReport, ModelSpec};
use crate::data::{
    build_saccade_targets, hflip, random_resized_crop, read_saccade_file, write_saccade_file, CropParams,
    DatasetSplits, ImageRecord, SaccadeRecord,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::san::{self, SelectorConfig, SelectorMetrics};
use crate::sanvit::{self, IndexSource};
use crate::tensor::Tensor;
use crate::vit::{self, TrainMode};

const EVAL_BATCH: usize = 64;
const SELECTOR_PREFIX: &str = "san.";

/// Where a run reads relative inputs from and writes its artifacts to.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.sanw")
    }
    pub fn history(&self) -> PathBuf {
        self.out_dir.join("history.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.out_dir.join("summary.json")
    }
    pub fn targets(&self) -> PathBuf {
        self.out_dir.join("targets.sact")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub images: usize,
    /// Top-1 accuracy; absent for the selector.
    pub accuracy: Option<f64>,
    /// Selector quality against teacher targets.
    pub selector: Option<SelectorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub model: ModelKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub val_metric: String,
    pub stopped_early: bool,
    pub test: EvalMetrics,
    pub cost: CostReport,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub summary: RunSummary,
}

/// Teacher targets keyed by image id.
pub type TargetMap = BTreeMap<u32, SaccadeRecord>;

fn target_map(records: Vec<SaccadeRecord>) -> TargetMap {
    records.into_iter().map(|r| (r.image_id, r)).collect()
}

fn lookup(targets: &TargetMap, id: u32) -> Result<&SaccadeRecord> {
    targets.get(&id).ok_or_else(|| Error::Image {
        image_id: id,
        source: Box::new(Error::InvalidArgument("no saccade target for this image".into())),
    })
}

/// Targets from the configured file, or freshly built from the teacher checkpoint
/// over every image in `data`.
pub fn obtain_targets(config: &ExperimentConfig, data: &DatasetSplits, base_dir: &Path) -> Result<Vec<SaccadeRecord>> {
    let n = config.vit.num_patches();
    if let Some(p) = &config.targets {
        let file = read_saccade_file(&resolve(base_dir, p))?;
        if file.num_patches != n || file.k != config.k {
            return Err(Error::Config(format!(
                "{}: targets are k = {} over {} patches; config wants k = {} over {n}",
                p.display(),
                file.k,
                file.num_patches,
                config.k
            )));
        }
        return Ok(file.records);
    }
    let Some(p) = &config.teacher_checkpoint else {
        return Err(Error::Config("need either `targets` or `teacher_checkpoint`".into()));
    };
    let teacher = Checkpoint::load(&resolve(base_dir, p))?;
    if !matches!(teacher.config.model, ModelKind::TeacherVit | ModelKind::SimpleVit) {
        return Err(Error::Config(format!("{} is not a ViT checkpoint", p.display())));
    }
    let tcfg = &teacher.config.vit;
    if tcfg.num_patches() != n || tcfg.image_size != config.vit.image_size {
        return Err(Error::Config(format!(
            "teacher grid {}px/{} patches differs from {}px/{n}",
            tcfg.image_size,
            tcfg.num_patches(),
            config.vit.image_size
        )));
    }
    data.check_image_size(tcfg.image_size)?;
    let images: Vec<&ImageRecord> = data.all().collect();
    build_saccade_targets(&teacher.params, tcfg, &images, config.k)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy_from<F>(images: &[ImageRecord], batch: usize, mut logits: F) -> Result<f64>
where
    F: FnMut(&[ImageRecord]) -> Result<Tensor<f32>>,
{
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in images.chunks(batch.max(1)) {
        let z = logits(chunk)?;
        let c = z.shape()[1];
        for (rec, row) in chunk.iter().zip(z.data().chunks(c)) {
            correct += (argmax(row) == rec.label) as usize;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

fn selector_metrics_over(
    images: &[ImageRecord],
    params: &ParamSet,
    config: &SelectorConfig,
    targets: &TargetMap,
    batch: usize,
) -> Result<SelectorMetrics> {
    let mut rows: Vec<(Vec<f32>, Vec<u8>)> = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let px: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.pixels).collect();
        let z = san::predict_logits(&px, params, config)?;
        for (rec, row) in chunk.iter().zip(z.data().chunks(config.num_patches)) {
            rows.push((row.to_vec(), lookup(targets, rec.id)?.multi_hot.clone()));
        }
    }
    SelectorMetrics::aggregate(rows.iter().map(|(z, y)| (z.as_slice(), y.as_slice())), config.k)
}

/// Batched top-k selection for un-augmented images.
fn selector_indices(images: &[&ImageRecord], params: &ParamSet, config: &SelectorConfig, k: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let px: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.pixels).collect();
        let z = san::predict_logits(&px, params, config)?;
        for row in z.data().chunks(config.num_patches) {
            out.push(san::predict_topk(row, k)?);
        }
    }
    Ok(out)
}

/// The selector stored inside a student checkpoint, when it uses one.
fn embedded_selector(ckpt: &Checkpoint) -> Result<Option<(ParamSet, SelectorConfig)>> {
    if ckpt.config.model != ModelKind::Sanvit || ckpt.config.index_source != IndexSource::San {
        return Ok(None);
    }
    let params = ckpt.params.with_prefix_stripped(SELECTOR_PREFIX);
    if params.is_empty() {
        return Err(Error::Config("student checkpoint carries no selector tensors".into()));
    }
    Ok(Some((params, ckpt.config.selector_config()?)))
}

fn student_params(ckpt: &Checkpoint) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in ckpt.params.iter().filter(|(k, _)| !k.starts_with(SELECTOR_PREFIX)) {
        p.insert(k.clone(), v.clone());
    }
    p
}

/// Top-1 accuracy (or selector metrics) of a checkpoint on `images`.
pub fn evaluate(ckpt: &Checkpoint, images: &[ImageRecord], targets: Option<&TargetMap>) -> Result<EvalMetrics> {
    evaluate_batched(ckpt, images, targets, EVAL_BATCH)
}

pub fn evaluate_batched(
    ckpt: &Checkpoint,
    images: &[ImageRecord],
    targets: Option<&TargetMap>,
    batch: usize,
) -> Result<EvalMetrics> {
    let cfg = &ckpt.config;
    for img in images {
        if img.pixels.shape() != [3, cfg.vit.image_size, cfg.vit.image_size] {
            return Err(Error::Image {
                image_id: img.id,
                source: Box::new(Error::Config(format!(
                    "image {:?} does not fit a {}px model",
                    img.pixels.shape(),
                    cfg.vit.image_size
                ))),
            });
        }
        if cfg.model != ModelKind::Selector && img.label >= cfg.vit.num_classes {
            return Err(Error::Config(format!(
                "label {} exceeds the model's {} classes",
                img.label, cfg.vit.num_classes
            )));
        }
    }
    let mut m = EvalMetrics {
        images: images.len(),
        accuracy: None,
        selector: None,
    };
    match cfg.model {
        ModelKind::TeacherVit | ModelKind::SimpleVit => {
            m.accuracy = Some(accuracy_from(images, batch, |chunk| {
                let px: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.pixels).collect();
                vit::predict_logits(&px, &ckpt.params, &cfg.vit)
            })?);
        }
        ModelKind::Selector => {
            let targets = targets.ok_or_else(|| Error::Config("selector evaluation needs saccade targets".into()))?;
            let scfg = cfg.selector_config()?;
            m.selector = Some(selector_metrics_over(images, &ckpt.params, &scfg, targets, batch)?);
        }
        ModelKind::Sanvit => {
            let scfg = cfg.sanvit_config();
            let student = student_params(ckpt);
            let selector = embedded_selector(ckpt)?;
            m.accuracy = Some(accuracy_from(images, batch, |chunk| {
                let refs: Vec<&ImageRecord> = chunk.iter().collect();
                let indices = match &selector {
                    Some((sp, sc)) => selector_indices(&refs, sp, sc, scfg.k)?,
                    None => {
                        let t = targets.ok_or_else(|| Error::Config("ground-truth student needs saccade targets".into()))?;
                        chunk.iter().map(|r| Ok(lookup(t, r.id)?.indices.clone())).collect::<Result<_>>()?
                    }
                };
                let px: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.pixels).collect();
                sanvit::predict_logits(&px, &indices, &student, &scfg)
            })?);
            if let (Some((sp, sc)), Some(t)) = (&selector, targets) {
                m.selector = Some(selector_metrics_over(images, sp, sc, t, batch)?);
            }
        }
    }
    Ok(m)
}

fn augment(rec: &ImageRecord, rng: &mut Rng) -> ImageRecord {
    let cropped = random_resized_crop(rec, rng, CropParams::new(rec.width()));
    hflip(&cropped, rng, 0.5)
}

fn batch_images(items: &[ImageRecord], batch: &[usize], aug: bool, rng: &mut Rng) -> Vec<ImageRecord> {
    batch
        .iter()
        .map(|&i| if aug { augment(&items[i], rng) } else { items[i].clone() })
        .collect()
}

fn cost_for(config: &ExperimentConfig) -> Result<CostReport> {
    let spec = match config.model {
        ModelKind::TeacherVit | ModelKind::SimpleVit => ModelSpec::Vit(config.vit.clone()),
        ModelKind::Selector => ModelSpec::Selector(config.selector_config()?),
        ModelKind::Sanvit => ModelSpec::Sanvit {
            student: config.sanvit_config(),
            selector: match config.index_source {
                IndexSource::San => Some(config.selector_config()?),
                IndexSource::GroundTruth => None,
            },
        },
    };
    count_params(&spec)
}

fn check_data(config: &ExperimentConfig, data: &DatasetSplits) -> Result<()> {
    data.check_image_size(config.vit.image_size)?;
    if config.model != ModelKind::Selector && data.num_classes != config.vit.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {}",
            data.num_classes, config.vit.num_classes
        )));
    }
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::Config("train, validation and test splits must be non-empty".into()));
    }
    Ok(())
}

/// Train one configured model, write its artifacts and score it on the test split.
pub fn run_experiment(config: &ExperimentConfig, data: &DatasetSplits, paths: &RunPaths) -> Result<RunResult> {
    config.validate()?;
    check_data(config, data)?;
    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let settings = LoopSettings {
        batch_size: config.batch_size,
        max_epochs: config.max_epochs,
        patience: config.early_stop_patience,
        seed: config.seed,
        adam: config.optimizer,
    };
    let mut init_rng = Rng::new(config.seed).fork(0);
    let aug = config.effective_augmentation();
    let history_path = paths.history();
    let train = &data.train;

    let (config, params, outcome, targets) = match config.model {
        ModelKind::TeacherVit | ModelKind::SimpleVit => {
            let vcfg = config.vit.clone();
            let init = vit::init_params(&vcfg, &mut init_rng)?;
            let ckpt_cfg = config.clone();
            let outcome = train_loop(
                init,
                train.len(),
                settings,
                "val_accuracy",
                Some(&history_path),
                |tape, bound, batch, rng| {
                    let imgs = batch_images(train, batch, aug, rng);
                    let px: Vec<&Tensor<f32>> = imgs.iter().map(|r| &r.pixels).collect();
                    let labels: Vec<usize> = imgs.iter().map(|r| r.label).collect();
                    let mode = (vcfg.dropout > 0.0).then_some(TrainMode { rng });
                    let out = vit::forward_batch(tape, bound, &vcfg, &px, mode)?;
                    tape.cross_entropy(out.logits, &labels)
                },
                |p| {
                    let ck = Checkpoint::new(p.clone(), ckpt_cfg.clone());
                    Ok(evaluate(&ck, &data.validation, None)?.accuracy.unwrap_or(0.0))
                },
            )?;
            let best = outcome.best_params.clone();
            (config.clone(), best, outcome, None)
        }
        ModelKind::Selector => {
            let scfg = config.selector_config()?;
            let targets = obtain_targets(config, data, &paths.base_dir)?;
            if config.targets.is_none() {
                write_saccade_file(&paths.targets(), scfg.num_patches, scfg.k, &targets)?;
            }
            let targets = target_map(targets);
            for rec in data.all() {
                lookup(&targets, rec.id)?;
            }
            let init = san::init_params(&scfg, &mut init_rng)?;
            let outcome = train_loop(
                init,
                train.len(),
                settings,
                "val_overlap_at_k",
                Some(&history_path),
                |tape, bound, batch, _| {
                    let px: Vec<&Tensor<f32>> = batch.iter().map(|&i| &train[i].pixels).collect();
                    let mut gt = Vec::with_capacity(batch.len() * scfg.num_patches);
                    for &i in batch {
                        gt.extend_from_slice(&lookup(&targets, train[i].id)?.multi_hot);
                    }
                    let z = san::forward_batch(tape, bound, &scfg, &px)?;
                    san::selector_loss(tape, z, &gt, scfg.pos_weight)
                },
                |p| Ok(selector_metrics_over(&data.validation, p, &scfg, &targets, EVAL_BATCH)?.overlap_at_k),
            )?;
            let best = outcome.best_params.clone();
            (config.clone(), best, outcome, Some(targets))
        }
        ModelKind::Sanvit => run_student(config, data, paths, settings, &mut init_rng, aug)?,
    };

    let checkpoint = Checkpoint::new(params, config.clone());
    checkpoint.save(&paths.checkpoint())?;
    let test = evaluate(&checkpoint, &data.test, targets.as_ref())?;
    let summary = RunSummary {
        name: config.name.clone(),
        model: config.model,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_metric: outcome.best_metric,
        val_metric: outcome.history[0].metric.clone(),
        stopped_early: outcome.stopped_early,
        test,
        cost: cost_for(&config)?,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(paths.summary(), json + "\n").map_err(|e| Error::io(paths.summary(), e))?;
    Ok(RunResult {
        checkpoint,
        history: outcome.history,
        summary,
    })
}

type StudentRun = (ExperimentConfig, ParamSet, super::train::TrainOutcome, Option<TargetMap>);

fn run_student(
    config: &ExperimentConfig,
    data: &DatasetSplits,
    paths: &RunPaths,
    settings: LoopSettings,
    init_rng: &mut Rng,
    aug: bool,
) -> Result<StudentRun> {
    let mut config = config.clone();
    let train = &data.train;
    // Frozen selector, or stored teacher indices.
    let mut selector = None;
    let mut targets = None;
    match config.index_source {
        IndexSource::San => {
            let p = config
                .selector_checkpoint
                .clone()
                .ok_or_else(|| Error::Config("index_source san needs `selector_checkpoint`".into()))?;
            let sel = Checkpoint::load(&resolve(&paths.base_dir, &p))?;
            if sel.config.model != ModelKind::Selector {
                return Err(Error::Config(format!("{} is not a selector checkpoint", p.display())));
            }
            if sel.config.vit.num_patches() != config.vit.num_patches() || sel.config.vit.image_size != config.vit.image_size {
                return Err(Error::Config("selector and student grids differ".into()));
            }
            config.selector = sel.config.selector.clone();
            let scfg = config.selector_config()?;
            selector = Some((sel.params, scfg));
            // selector metrics on the test split need teacher targets, when available
            if config.targets.is_some() || config.teacher_checkpoint.is_some() {
                targets = Some(target_map(obtain_targets(&config, data, &paths.base_dir)?));
            }
        }
        IndexSource::GroundTruth => {
            let t = target_map(obtain_targets(&config, data, &paths.base_dir)?);
            for rec in data.all() {
                lookup(&t, rec.id)?;
            }
            targets = Some(t);
        }
    }
    let scfg = config.sanvit_config();
    let k = scfg.k;
    let cached: BTreeMap<u32, Vec<usize>> = match (&selector, &targets) {
        (Some((sp, sc)), _) => {
            let all: Vec<&ImageRecord> = data.all().collect();
            let idx = selector_indices(&all, sp, sc, k)?;
            all.iter().map(|r| r.id).zip(idx).collect()
        }
        (None, Some(t)) => t.iter().map(|(&id, r)| (id, r.indices.clone())).collect(),
        (None, None) => unreachable!("one index source is always resolved"),
    };
    let init = sanvit::init_params(&scfg, init_rng)?;
    let val_cfg = config.clone();
    let sel_params = selector.as_ref().map(|(p, _)| p.clone());
    let bundle = |student: &ParamSet| {
        let mut p = student.clone();
        if let Some(sp) = &sel_params {
            p.extend_prefixed(SELECTOR_PREFIX, sp);
        }
        p
    };
    let outcome = train_loop(
        init,
        train.len(),
        settings,
        "val_accuracy",
        Some(&paths.history()),
        |tape, bound, batch, rng| {
            let imgs = batch_images(train, batch, aug, rng);
            let indices = match (&selector, aug) {
                (Some((sp, sc)), true) => {
                    let refs: Vec<&ImageRecord> = imgs.iter().collect();
                    selector_indices(&refs, sp, sc, k)?
                }
                _ => imgs.iter().map(|r| cached[&r.id].clone()).collect(),
            };
            let px: Vec<&Tensor<f32>> = imgs.iter().map(|r| &r.pixels).collect();
            let labels: Vec<usize> = imgs.iter().map(|r| r.label).collect();
            let mode = (scfg.base.dropout > 0.0).then_some(TrainMode { rng });
            let out = sanvit::forward_batch(tape, bound, &scfg, &px, &indices, mode)?;
            tape.cross_entropy(out.logits, &labels)
        },
        |p| {
            let mut correct = 0usize;
            for chunk in data.validation.chunks(EVAL_BATCH) {
                let px: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.pixels).collect();
                let idx: Vec<Vec<usize>> = chunk.iter().map(|r| cached[&r.id].clone()).collect();
                let z = sanvit::predict_logits(&px, &idx, p, &val_cfg.sanvit_config())?;
                let c = z.shape()[1];
                for (rec, row) in chunk.iter().zip(z.data().chunks(c)) {
                    correct += (argmax(row) == rec.label) as usize;
                }
            }
            Ok(correct as f64 / data.validation.len() as f64)
        },
    )?;
    let params = bundle(&outcome.best_params);
    Ok((config, params, outcome, targets))
}
