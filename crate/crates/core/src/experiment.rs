//! Training, evaluation, and the shift-robustness sweep.
//!
//! A run directory holds three artifacts: `checkpoint.eqpf` (parameters
//! plus the feature-map seed/epoch), `manifest.txt` (flat `key = value`
//! echo of the effective configuration, seeds, dataset fingerprints, and
//! subset sizes), and `metrics.log` (append-only space-separated
//! `key=value` records, one step or evaluation per line).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{AttentionImpl, Dropout};
use crate::data::{resize_bilinear, select_shiftable, shift_x, Dataset, LabeledImage};
use crate::model::{
    draw_feature_maps, forward, load_checkpoint, save_checkpoint, FeatureSet, LeafSet,
    ModelConfig, ParamStore,
};
use crate::positional::EncodingMode;
use crate::rng::{chacha, split, split_indexed};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::{Dtype, Element, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(
        "training diverged at step {step}: loss is not finite \
         (denominator clamp events so far: {clamp_events})"
    )]
    Diverged { step: usize, clamp_events: u64 },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

type XResult<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}; expected f32 or f64")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedrawSchedule {
    EveryEpoch,
    EverySteps(usize),
    Never,
}

impl RedrawSchedule {
    pub fn name(self) -> String {
        match self {
            RedrawSchedule::EveryEpoch => "epoch".into(),
            RedrawSchedule::EverySteps(n) => format!("steps:{n}"),
            RedrawSchedule::Never => "never".into(),
        }
    }
}

impl FromStr for RedrawSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "epoch" {
            return Ok(RedrawSchedule::EveryEpoch);
        }
        if s == "never" {
            return Ok(RedrawSchedule::Never);
        }
        if let Some(n) = s.strip_prefix("steps:") {
            return n
                .parse()
                .map(RedrawSchedule::EverySteps)
                .map_err(|e| format!("bad redraw step count: {e}"));
        }
        Err(format!(
            "unknown redraw schedule {s:?}; expected epoch, never, or steps:N"
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub redraw: RedrawSchedule,
    pub precision: Precision,
    /// Cap on training samples per epoch (deterministic prefix of the
    /// shuffled order); full set when absent.
    pub train_limit: Option<usize>,
    /// Stop early once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Run a validation pass every this many optimizer steps (in addition
    /// to the end of each epoch). Only useful together with
    /// `target_accuracy`.
    pub eval_every_steps: Option<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch: 22,
            epochs: 5,
            seed: 42,
            redraw: RedrawSchedule::EveryEpoch,
            precision: Precision::F32,
            train_limit: None,
            target_accuracy: None,
            eval_every_steps: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> XResult<()> {
        if self.lr <= 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(TensorError::Invalid {
                op: "train_config",
                detail: format!(
                    "lr {}, batch {}, epochs {} must all be positive",
                    self.lr, self.batch, self.epochs
                ),
            }
            .into());
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with bias correction; moments live in the parameter precision.
pub struct Adam<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads` must follow the store's iteration order.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Vec<E>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![E::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let eps = E::from_f64(self.eps);
        let c1 = E::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let c2 = E::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = E::from_f64(self.lr);
        for ((m, v), (g, (_, p))) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grads.iter().zip(store.iter_mut()))
        {
            debug_assert_eq!(g.len(), p.numel());
            let pd = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

// ── Batching helpers ────────────────────────────────────────────────

fn batch_tensor<E: Element>(images: &[&LabeledImage], cfg: &ModelConfig) -> Tensor<E> {
    let l = cfg.seq_len();
    let c = cfg.channels;
    let mut data = Vec::with_capacity(images.len() * l * c);
    for im in images {
        debug_assert_eq!(im.h * im.w, l);
        debug_assert_eq!(im.channels, c);
        data.extend(im.pixels.iter().map(|&v| E::from_f64(v)));
    }
    Tensor::new(vec![images.len(), l, c], data).unwrap()
}

/// Top-1 accuracy of a parameter store over a set of images, dropout off,
/// feature maps frozen.
pub fn evaluate<E: Element>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    fms: &FeatureSet,
    images: &[&LabeledImage],
) -> XResult<f64> {
    if images.is_empty() {
        return Err(TensorError::Invalid {
            op: "evaluate",
            detail: "empty evaluation set".into(),
        }
        .into());
    }
    use rayon::prelude::*;
    let counts: Vec<XResult<usize>> = images
        .par_chunks(32)
        .map(|chunk| {
            let mut tape: Tape<E> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, store, false);
            let input = tape.constant(batch_tensor::<E>(chunk, cfg));
            let logits = forward(
                &mut tape,
                &leaves,
                cfg,
                fms,
                input,
                AttentionImpl::Favor,
                None,
            )?;
            let out = tape.value(logits);
            let mut correct = 0usize;
            for (row, im) in out.data().chunks(cfg.classes).zip(chunk) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == im.label as usize {
                    correct += 1;
                }
            }
            Ok(correct)
        })
        .collect();
    let mut correct = 0usize;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / images.len() as f64)
}

// ── Training ────────────────────────────────────────────────────────

pub struct TrainReport {
    pub run_dir: PathBuf,
    pub step_losses: Vec<f64>,
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub reached_target: bool,
    pub clamp_events: u64,
    pub wall_secs: f64,
}

/// Train a model and persist the run. `train`/`val` images must already
/// be at the configured resolution.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset_name: &str,
    train: &Dataset,
    val: &Dataset,
    run_dir: &Path,
) -> XResult<TrainReport> {
    match train_cfg.precision {
        Precision::F32 => train_typed::<f32>(model_cfg, train_cfg, dataset_name, train, val, run_dir),
        Precision::F64 => train_typed::<f64>(model_cfg, train_cfg, dataset_name, train, val, run_dir),
    }
}

fn train_typed<E: Element>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset_name: &str,
    train: &Dataset,
    val: &Dataset,
    run_dir: &Path,
) -> XResult<TrainReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let metrics_path = run_dir.join("metrics.log");
    let mut metrics = MetricsLog::create(&metrics_path)?;

    let mut store = ParamStore::<E>::init(model_cfg, train_cfg.seed)?;
    let favor_seed = split(train_cfg.seed, "favor");
    let mut draw_epoch = 0u64;
    let mut fms = draw_feature_maps(model_cfg, favor_seed, draw_epoch)?;
    let mut adam = Adam::<E>::new(train_cfg.lr);
    let val_refs: Vec<&LabeledImage> = val.images.iter().collect();

    let mut step_losses = Vec::new();
    let mut global_step = 0usize;
    let mut clamp_total = 0u64;
    let mut best_val = 0.0f64;
    let mut reached = false;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..train_cfg.epochs {
        if epoch > 0 && train_cfg.redraw == RedrawSchedule::EveryEpoch {
            draw_epoch = epoch as u64;
            fms = draw_feature_maps(model_cfg, favor_seed, draw_epoch)?;
        }
        let order = train.shuffled_indices(split_indexed(train_cfg.seed, "shuffle", epoch as u64));
        let order = match train_cfg.train_limit {
            Some(n) => &order[..n.min(order.len())],
            None => &order[..],
        };
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch_idx in order.chunks(train_cfg.batch) {
            if let RedrawSchedule::EverySteps(n) = train_cfg.redraw {
                if global_step > 0 && global_step % n == 0 {
                    draw_epoch += 1;
                    fms = draw_feature_maps(model_cfg, favor_seed, draw_epoch)?;
                }
            }
            // Fixed two-way sub-batch split: the partition depends only on
            // indices, so results are bitwise identical whether the two
            // halves run on one thread or two.
            let half = batch_idx.len().div_ceil(2);
            let subs: Vec<&[usize]> = batch_idx.chunks(half).collect();
            let outcomes: Vec<XResult<(f64, usize, u64, Vec<Vec<E>>)>> = {
                use rayon::prelude::*;
                subs.par_iter()
                    .enumerate()
                    .map(|(si, chunk)| {
                        let images: Vec<&LabeledImage> =
                            chunk.iter().map(|&i| &train.images[i]).collect();
                        let targets: Vec<usize> =
                            images.iter().map(|im| im.label as usize).collect();
                        let mut tape: Tape<E> = Tape::new();
                        let leaves = LeafSet::insert_all(&mut tape, &store, true);
                        let input = tape.constant(batch_tensor::<E>(&images, model_cfg));
                        let mut dropout = Dropout {
                            p: model_cfg.dropout,
                            rng: chacha(split_indexed(
                                train_cfg.seed,
                                "dropout",
                                (global_step * 16 + si) as u64,
                            )),
                        };
                        let drop_arg = if model_cfg.dropout > 0.0 {
                            Some(&mut dropout)
                        } else {
                            None
                        };
                        let logits = forward(
                            &mut tape,
                            &leaves,
                            model_cfg,
                            &fms,
                            input,
                            AttentionImpl::Favor,
                            drop_arg,
                        )?;
                        let loss = tape.cross_entropy(logits, &targets)?;
                        let loss_val = tape.value(loss).data()[0].as_f64();
                        tape.backward(loss)?;
                        let grads: Vec<Vec<E>> = leaves
                            .names()
                            .iter()
                            .map(|n| {
                                tape.grad(leaves.var(n))
                                    .map(|g| g.to_vec())
                                    .unwrap_or_else(|| vec![E::zero(); store.get(n).numel()])
                            })
                            .collect();
                        Ok((loss_val, chunk.len(), tape.clamp_events(), grads))
                    })
                    .collect()
            };
            // combine in sub-batch order: gradient of the full-batch mean
            // is the sample-count weighted mean of the sub-batch gradients
            let total: f64 = batch_idx.len() as f64;
            let mut loss_val = 0.0;
            let mut grads: Vec<Vec<E>> = store
                .iter()
                .map(|(_, t)| vec![E::zero(); t.numel()])
                .collect();
            for outcome in outcomes {
                let (sub_loss, count, clamps, sub_grads) = outcome?;
                let weight = count as f64 / total;
                loss_val += sub_loss * weight;
                clamp_total += clamps;
                let w = E::from_f64(weight);
                for (acc, sg) in grads.iter_mut().zip(&sub_grads) {
                    for (a, &g) in acc.iter_mut().zip(sg) {
                        *a += w * g;
                    }
                }
            }
            if !loss_val.is_finite() {
                return Err(ExperimentError::Diverged {
                    step: global_step,
                    clamp_events: clamp_total,
                });
            }
            adam.step(&mut store, &grads);

            step_losses.push(loss_val);
            epoch_loss += loss_val;
            epoch_batches += 1;
            global_step += 1;
            if global_step % train_cfg.log_every == 0 {
                metrics.record(&[
                    ("epoch", epoch.to_string()),
                    ("step", global_step.to_string()),
                    ("train_loss", format!("{loss_val:.6}")),
                    ("clamp_events", clamp_total.to_string()),
                ])?;
            }
            if let (Some(target), Some(every)) =
                (train_cfg.target_accuracy, train_cfg.eval_every_steps)
            {
                if global_step % every == 0 {
                    let acc = evaluate(&store, model_cfg, &fms, &val_refs)?;
                    best_val = best_val.max(acc);
                    metrics.record(&[
                        ("epoch", epoch.to_string()),
                        ("step", global_step.to_string()),
                        ("val_acc", format!("{acc:.4}")),
                    ])?;
                    if acc >= target {
                        reached = true;
                        epochs_run = epoch + 1;
                        break 'epochs;
                    }
                }
            }
        }
        let acc = evaluate(&store, model_cfg, &fms, &val_refs)?;
        best_val = best_val.max(acc);
        epochs_run = epoch + 1;
        metrics.record(&[
            ("epoch", epoch.to_string()),
            ("step", global_step.to_string()),
            (
                "epoch_mean_loss",
                format!("{:.6}", epoch_loss / epoch_batches.max(1) as f64),
            ),
            ("val_acc", format!("{acc:.4}")),
            ("draw_epoch", draw_epoch.to_string()),
        ])?;
        if let Some(target) = train_cfg.target_accuracy {
            if acc >= target {
                reached = true;
                break 'epochs;
            }
        }
    }

    let final_val = evaluate(&store, model_cfg, &fms, &val_refs)?;
    save_checkpoint(&run_dir.join("checkpoint.eqpf"), &store, favor_seed, draw_epoch)?;

    let mut manifest = manifest_from_config(model_cfg, train_cfg, dataset_name);
    manifest.push(("favor_seed".into(), favor_seed.to_string()));
    manifest.push(("final_draw_epoch".into(), draw_epoch.to_string()));
    manifest.push(("train_sha256".into(), train.sha256.clone()));
    manifest.push(("val_sha256".into(), val.sha256.clone()));
    manifest.push(("train_size".into(), train.len().to_string()));
    manifest.push(("val_size".into(), val.len().to_string()));
    manifest.push(("param_count".into(), store.count_params().to_string()));
    manifest.push(("steps".into(), global_step.to_string()));
    manifest.push(("epochs_run".into(), epochs_run.to_string()));
    manifest.push(("final_val_acc".into(), format!("{final_val:.6}")));
    manifest.push(("clamp_events".into(), clamp_total.to_string()));
    write_manifest(&run_dir.join("manifest.txt"), &manifest)?;

    Ok(TrainReport {
        run_dir: run_dir.to_path_buf(),
        step_losses,
        val_accuracy: final_val,
        epochs_run,
        reached_target: reached,
        clamp_events: clamp_total,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

// ── Run persistence ─────────────────────────────────────────────────

struct MetricsLog {
    file: fs::File,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: &Path) -> XResult<Self> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(MetricsLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn record(&mut self, fields: &[(&str, String)]) -> XResult<()> {
        use io::Write;
        let mut line = String::new();
        for (i, (k, v)) in fields.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{k}={v}");
        }
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))?;
        Ok(())
    }
}

/// Parse a metrics log back into per-line key/value maps.
pub fn read_metrics(path: &Path) -> XResult<Vec<HashMap<String, String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .filter_map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                })
                .collect()
        })
        .collect())
}

fn manifest_from_config(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    dataset_name: &str,
) -> Vec<(String, String)> {
    vec![
        ("format".into(), "eqpf-run-v1".into()),
        ("dataset".into(), dataset_name.into()),
        ("mode".into(), cfg.mode.name().into()),
        ("dim".into(), cfg.dim.to_string()),
        ("depth".into(), cfg.depth.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("feature_count".into(), cfg.feature_count.to_string()),
        ("clip".into(), cfg.clip.to_string()),
        ("dropout".into(), cfg.dropout.to_string()),
        ("ffn_mult".into(), cfg.ffn_mult.to_string()),
        ("classes".into(), cfg.classes.to_string()),
        ("image_h".into(), cfg.image_h.to_string()),
        ("image_w".into(), cfg.image_w.to_string()),
        ("channels".into(), cfg.channels.to_string()),
        ("lengthscales".into(), cfg.lengthscales.to_string()),
        ("lr".into(), tc.lr.to_string()),
        ("batch".into(), tc.batch.to_string()),
        ("epochs".into(), tc.epochs.to_string()),
        ("seed".into(), tc.seed.to_string()),
        ("redraw".into(), tc.redraw.name()),
        ("precision".into(), tc.precision.name().into()),
        (
            "train_limit".into(),
            tc.train_limit.map(|n| n.to_string()).unwrap_or_default(),
        ),
        ("optimizer".into(), "adam(0.9,0.999,1e-8)".into()),
        ("normalization".into(), "scale-0-1".into()),
    ]
}

pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> XResult<()> {
    let mut text = String::new();
    for (k, v) in entries {
        let _ = writeln!(text, "{k} = {v}");
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> XResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Manifest {
            path: path.to_path_buf(),
            detail: format!("line without '=': {line:?}"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<T: FromStr>(
    map: &HashMap<String, String>,
    path: &Path,
    key: &str,
) -> XResult<T>
where
    T::Err: std::fmt::Display,
{
    let raw = map.get(key).ok_or_else(|| ExperimentError::Manifest {
        path: path.to_path_buf(),
        detail: format!("missing key {key:?}"),
    })?;
    raw.parse().map_err(|e| ExperimentError::Manifest {
        path: path.to_path_buf(),
        detail: format!("key {key:?}: {e}"),
    })
}

/// Model config as persisted in a run manifest.
pub fn config_from_manifest(path: &Path) -> XResult<(ModelConfig, String)> {
    let map = read_manifest(path)?;
    let mode: EncodingMode = manifest_get::<String>(&map, path, "mode")?
        .parse()
        .map_err(|e| ExperimentError::Manifest {
            path: path.to_path_buf(),
            detail: e,
        })?;
    let cfg = ModelConfig {
        dim: manifest_get(&map, path, "dim")?,
        depth: manifest_get(&map, path, "depth")?,
        heads: manifest_get(&map, path, "heads")?,
        feature_count: manifest_get(&map, path, "feature_count")?,
        mode,
        clip: manifest_get(&map, path, "clip")?,
        dropout: manifest_get(&map, path, "dropout")?,
        ffn_mult: manifest_get(&map, path, "ffn_mult")?,
        classes: manifest_get(&map, path, "classes")?,
        image_h: manifest_get(&map, path, "image_h")?,
        image_w: manifest_get(&map, path, "image_w")?,
        channels: manifest_get(&map, path, "channels")?,
        lengthscales: manifest_get(&map, path, "lengthscales")?,
    };
    let dataset = manifest_get(&map, path, "dataset")?;
    Ok((cfg, dataset))
}

/// A loaded run: config plus parameters in their checkpointed precision.
pub enum LoadedRun {
    F32(ModelConfig, ParamStore<f32>, FeatureSet),
    F64(ModelConfig, ParamStore<f64>, FeatureSet),
}

impl LoadedRun {
    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedRun::F32(c, ..) => c,
            LoadedRun::F64(c, ..) => c,
        }
    }

    pub fn evaluate(&self, images: &[&LabeledImage]) -> XResult<f64> {
        match self {
            LoadedRun::F32(cfg, store, fms) => evaluate(store, cfg, fms, images),
            LoadedRun::F64(cfg, store, fms) => evaluate(store, cfg, fms, images),
        }
    }
}

pub fn load_run(run_dir: &Path) -> XResult<LoadedRun> {
    let (cfg, _) = config_from_manifest(&run_dir.join("manifest.txt"))?;
    let loaded = load_checkpoint(&run_dir.join("checkpoint.eqpf"))?;
    let fms = draw_feature_maps(&cfg, loaded.favor_seed, loaded.draw_epoch)?;
    Ok(match loaded.dtype {
        Dtype::F32 => LoadedRun::F32(cfg.clone(), ParamStore::from_checkpoint(&cfg, &loaded)?, fms),
        Dtype::F64 => LoadedRun::F64(cfg.clone(), ParamStore::from_checkpoint(&cfg, &loaded)?, fms),
    })
}

// ── Shift sweep ─────────────────────────────────────────────────────

pub const SHIFT_RANGE: std::ops::RangeInclusive<i64> = -8..=8;
pub const SHIFT_MARGIN: usize = 8;
pub const SWEEP_CSV_HEADER: &str = "shift,accuracy_mean,accuracy_std,run_dir";

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSweepRow {
    pub shift: i64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub run_dir: String,
}

#[derive(Debug, Clone)]
pub struct ShiftSweepResult {
    pub rows: Vec<ShiftSweepRow>,
    /// Eligible-subset size per run directory.
    pub subset_sizes: Vec<usize>,
    pub label: String,
}

/// Evaluate checkpointed runs on the eligible subset of `class_id`
/// shifted along x by every offset in [-8, 8]; aggregate mean and
/// (population) standard deviation across the runs.
pub fn shift_sweep(
    run_dirs: &[PathBuf],
    test_set: &Dataset,
    class_id: u8,
    label: Option<&str>,
) -> XResult<ShiftSweepResult> {
    if run_dirs.is_empty() {
        return Err(TensorError::Invalid {
            op: "shift_sweep",
            detail: "no run directories given".into(),
        }
        .into());
    }
    let label = label
        .map(|s| s.to_string())
        .or_else(|| {
            run_dirs[0]
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "run".into());

    let mut per_run_acc: Vec<Vec<f64>> = Vec::new(); // [run][shift]
    let mut subset_sizes = Vec::new();
    for dir in run_dirs {
        let run = load_run(dir)?;
        let cfg = run.config();
        let resized: Vec<LabeledImage> = test_set
            .images
            .iter()
            .filter(|im| im.label == class_id)
            .map(|im| resize_bilinear(im, cfg.image_h, cfg.image_w))
            .collect();
        let eligible = select_shiftable(&resized, class_id, SHIFT_MARGIN)?;
        subset_sizes.push(eligible.len());
        let mut accs = Vec::new();
        for shift in SHIFT_RANGE {
            let shifted: Vec<LabeledImage> = eligible
                .iter()
                .map(|&i| shift_x(&resized[i], shift))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&LabeledImage> = shifted.iter().collect();
            accs.push(run.evaluate(&refs)?);
        }
        per_run_acc.push(accs);
    }

    let n_shifts = per_run_acc[0].len();
    let runs = per_run_acc.len() as f64;
    let mut rows = Vec::with_capacity(n_shifts);
    for (si, shift) in SHIFT_RANGE.enumerate() {
        let vals: Vec<f64> = per_run_acc.iter().map(|a| a[si]).collect();
        let mean = vals.iter().sum::<f64>() / runs;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / runs;
        rows.push(ShiftSweepRow {
            shift,
            accuracy_mean: mean,
            accuracy_std: var.sqrt(),
            run_dir: label.clone(),
        });
    }
    Ok(ShiftSweepResult {
        rows,
        subset_sizes,
        label,
    })
}

pub fn write_sweep_csv(path: &Path, result: &ShiftSweepResult) -> XResult<()> {
    let mut text = String::from(SWEEP_CSV_HEADER);
    text.push('\n');
    for r in &result.rows {
        let _ = writeln!(
            text,
            "{},{:.6},{:.6},{}",
            r.shift, r.accuracy_mean, r.accuracy_std, r.run_dir
        );
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use rand::Rng;

    fn synthetic_dataset(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> Dataset {
        // blob position + intensity pattern per class, so the task is
        // learnable but not trivial
        let mut rng = chacha(seed);
        let images = (0..n)
            .map(|i| {
                let label = (i as u8) % classes;
                let mut pixels = vec![0.0; h * w];
                let cy = 1 + (label as usize * 2) % (h - 2);
                let cx = 1 + (label as usize * 3) % (w - 2);
                for dy in 0..2 {
                    for dx in 0..2 {
                        pixels[(cy + dy) * w + (cx + dx)] =
                            0.6 + 0.4 * rng.gen_range(0.0..1.0f64);
                    }
                }
                LabeledImage {
                    pixels,
                    h,
                    w,
                    channels: 1,
                    label,
                }
            })
            .collect();
        Dataset {
            images,
            sha256: format!("synthetic-{seed}"),
        }
    }

    fn tiny_model(mode: EncodingMode) -> ModelConfig {
        ModelConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            feature_count: 8,
            mode,
            clip: 2,
            dropout: 0.0,
            ffn_mult: 2,
            classes: 4,
            image_h: 6,
            image_w: 6,
            channels: 1,
            lengthscales: 2,
        }
    }

    #[test]
    fn adam_matches_hand_coded_single_step() {
        // two-parameter toy problem in f64; oracle coded from the update
        // equations with explicit bias correction
        let cfg = ModelConfig {
            dim: 4,
            depth: 1,
            heads: 1,
            feature_count: 2,
            mode: EncodingMode::None,
            clip: 1,
            dropout: 0.0,
            ffn_mult: 1,
            classes: 2,
            image_h: 1,
            image_w: 2,
            channels: 1,
            lengthscales: 1,
        };
        let mut store = ParamStore::<f64>::init(&cfg, 0).unwrap();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let before: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> = store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                (0..t.numel())
                    .map(|j| ((i + 1) as f64) * 0.1 + (j as f64) * 0.01)
                    .collect()
            })
            .collect();
        let mut adam = Adam::<f64>::new(1e-3);
        adam.step(&mut store, &grads);

        let (b1, b2, eps, lr, t) = (0.9, 0.999, 1e-8, 1e-3, 1);
        for (i, name) in names.iter().enumerate() {
            let after = store.get(name).data();
            for j in 0..after.len() {
                let g: f64 = grads[i][j];
                let m = (1.0 - b1) * g;
                let v = (1.0 - b2) * g * g;
                let mhat = m / (1.0 - b1_pow(b1, t));
                let vhat = v / (1.0 - b1_pow(b2, t));
                let want = before[i][j] - lr * mhat / (vhat.sqrt() + eps);
                assert!(
                    (after[j] - want).abs() <= 1e-12,
                    "{name}[{j}]: {} vs {want}",
                    after[j]
                );
            }
        }

        fn b1_pow(b: f64, t: i32) -> f64 {
            b.powi(t)
        }
    }

    #[test]
    fn single_batch_overfit_reaches_full_accuracy() {
        let cfg = tiny_model(EncodingMode::Absolute);
        let data = synthetic_dataset(22, 6, 6, 4, 5);
        let tc = TrainConfig {
            lr: 3e-3,
            batch: 22,
            epochs: 200,
            seed: 7,
            redraw: RedrawSchedule::Never,
            precision: Precision::F64,
            train_limit: None,
            target_accuracy: Some(1.0),
            eval_every_steps: None,
            log_every: 1000,
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&cfg, &tc, "synthetic", &data, &data, dir.path()).unwrap();
        assert!(
            report.reached_target,
            "accuracy {} after {} steps",
            report.val_accuracy,
            report.step_losses.len()
        );
        assert!(report.step_losses.len() <= 200);
        // evaluating the checkpointed model on its own batch reproduces 1.0
        let run = load_run(dir.path()).unwrap();
        let refs: Vec<&LabeledImage> = data.images.iter().collect();
        assert_eq!(run.evaluate(&refs).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_loss_curves() {
        let cfg = tiny_model(EncodingMode::S1);
        let data = synthetic_dataset(40, 6, 6, 4, 9);
        let tc = TrainConfig {
            lr: 1e-3,
            batch: 10,
            epochs: 2,
            seed: 11,
            redraw: RedrawSchedule::EveryEpoch,
            precision: Precision::F32,
            train_limit: None,
            target_accuracy: None,
            eval_every_steps: None,
            log_every: 1000,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = train(&cfg, &tc, "synthetic", &data, &data, d1.path()).unwrap();
        let r2 = train(&cfg, &tc, "synthetic", &data, &data, d2.path()).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses);
        assert_eq!(r1.val_accuracy, r2.val_accuracy);
    }

    #[test]
    fn untrained_model_is_at_chance_and_eval_deterministic() {
        let cfg = tiny_model(EncodingMode::None);
        let store = ParamStore::<f64>::init(&cfg, 2).unwrap();
        let fms = draw_feature_maps(&cfg, 3, 0).unwrap();
        let data = synthetic_dataset(400, 6, 6, 4, 6);
        let refs: Vec<&LabeledImage> = data.images.iter().collect();
        let a1 = evaluate(&store, &cfg, &fms, &refs).unwrap();
        let a2 = evaluate(&store, &cfg, &fms, &refs).unwrap();
        assert_eq!(a1, a2);
        // 4 classes, mode none on class-position-coded data: chance-ish
        assert!(a1 < 0.55, "untrained accuracy suspiciously high: {a1}");
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_accuracy_bitwise() {
        let cfg = tiny_model(EncodingMode::S2);
        let data = synthetic_dataset(30, 6, 6, 4, 3);
        let tc = TrainConfig {
            lr: 1e-3,
            batch: 10,
            epochs: 1,
            seed: 21,
            redraw: RedrawSchedule::EveryEpoch,
            precision: Precision::F32,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&cfg, &tc, "synthetic", &data, &data, dir.path()).unwrap();
        let run = load_run(dir.path()).unwrap();
        let refs: Vec<&LabeledImage> = data.images.iter().collect();
        assert_eq!(run.evaluate(&refs).unwrap(), report.val_accuracy);
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = tiny_model(EncodingMode::S2);
        let tc = TrainConfig::default();
        let entries = manifest_from_config(&cfg, &tc, "mnist");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_manifest(&path, &entries).unwrap();
        let (back, dataset) = config_from_manifest(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(dataset, "mnist");
    }

    #[test]
    fn metrics_log_is_parseable(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let mut log = MetricsLog::create(&path).unwrap();
        log.record(&[("epoch", "0".into()), ("train_loss", "2.5".into())])
            .unwrap();
        log.record(&[("epoch", "0".into()), ("val_acc", "0.5".into())])
            .unwrap();
        let lines = read_metrics(&path).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["train_loss"], "2.5");
        assert_eq!(lines[1]["val_acc"], "0.5");
    }

    #[test]
    fn shift_sweep_produces_17_schema_rows() {
        // blob far from the borders so the synthetic class is eligible
        let h = 20;
        let mut images = Vec::new();
        let mut rng = chacha(4);
        for i in 0..30 {
            let mut pixels = vec![0.0; h * 20];
            let r = 4 + (i % 8);
            pixels[r * 20 + 9] = 0.5 + 0.5 * rng.gen_range(0.0..1.0f64);
            pixels[r * 20 + 10] = 0.9;
            images.push(LabeledImage {
                pixels,
                h,
                w: 20,
                channels: 1,
                label: (i % 2) as u8,
            });
        }
        let data = Dataset {
            images,
            sha256: "synthetic".into(),
        };
        let cfg = ModelConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            feature_count: 8,
            mode: EncodingMode::Absolute,
            clip: 2,
            dropout: 0.0,
            ffn_mult: 2,
            classes: 2,
            image_h: 20,
            image_w: 20,
            channels: 1,
            lengthscales: 2,
        };
        let tc = TrainConfig {
            epochs: 1,
            batch: 10,
            precision: Precision::F32,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run_a");
        train(&cfg, &tc, "synthetic", &data, &data, &run).unwrap();
        let sweep = shift_sweep(&[run.clone()], &data, 1, Some("variant_a")).unwrap();
        assert_eq!(sweep.rows.len(), 17);
        assert_eq!(sweep.rows[0].shift, -8);
        assert_eq!(sweep.rows[16].shift, 8);
        assert!(sweep.subset_sizes[0] > 0);
        for r in &sweep.rows {
            assert!(r.accuracy_mean >= 0.0 && r.accuracy_mean <= 1.0);
            assert_eq!(r.run_dir, "variant_a");
        }
        // shift 0 equals plain evaluation on the eligible subset
        let loaded = load_run(&run).unwrap();
        let resized: Vec<LabeledImage> = data
            .images
            .iter()
            .filter(|im| im.label == 1)
            .map(|im| resize_bilinear(im, 20, 20))
            .collect();
        let eligible = select_shiftable(&resized, 1, SHIFT_MARGIN).unwrap();
        let refs: Vec<&LabeledImage> = eligible.iter().map(|&i| &resized[i]).collect();
        let plain = loaded.evaluate(&refs).unwrap();
        let zero_row = sweep.rows.iter().find(|r| r.shift == 0).unwrap();
        assert_eq!(zero_row.accuracy_mean, plain);

        let csv_path = dir.path().join("sweep.csv");
        write_sweep_csv(&csv_path, &sweep).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(lines.count(), 17);
    }
}
