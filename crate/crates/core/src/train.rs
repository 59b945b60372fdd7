//! Training loop: per-sample matching and loss, ordered gradient reduction,
//! Adam with cosine decay, per-epoch validation, metrics and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{category_counts, oracle_detect, render_scene, scene_seed, NoiseConfig, Scene, Vocabulary, RARE_THRESHOLD};
use crate::detector::{HoiTarget, Model, ModelConfig, PredictionRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::matcher::{cost_matrix, hungarian_assign, set_loss, LossBreakdown, LossWeights, SlotValues};
use crate::numerics::{Adam, Graph, ParamGrads, ParamStore, Tensor};
use crate::pdqd::{make_pseudo_labels, PseudoLabels, DEFAULT_TAU};

pub const METRICS_HEADER: &str = "#hoi-metrics v1";
pub const METRICS_COLUMNS: &str = "epoch\ttrain_loss\tval_map_full\tval_map_rare\tval_map_nonrare\tlr";
/// Share of the best validation mAP that marks convergence.
pub const CONVERGENCE_SHARE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Stop after this many epochs without a new best; 0 disables.
    pub patience: usize,
    pub shuffle_seed: u64,
    pub tau: f64,
    pub noise: NoiseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 1e-5,
            clip_norm: 1.0,
            patience: 0,
            shuffle_seed: 0,
            tau: DEFAULT_TAU,
            noise: NoiseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `min_lr` over the configured epochs, held
    /// constant within an epoch (`epoch` counts from 1).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = (epoch - 1) as f64 / self.epochs.max(1) as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// A rendered scene with its targets and pseudo-labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: u64,
    pub image: Tensor,
    pub targets: Vec<HoiTarget>,
    pub pseudo: PseudoLabels,
}

pub fn pseudo_labels_for(scene: &Scene, n_objects: usize, noise: &NoiseConfig, tau: f64) -> Result<PseudoLabels> {
    let dets: Vec<(usize, f64)> = oracle_detect(scene, noise).iter().map(|d| (d.class, d.confidence)).collect();
    make_pseudo_labels(&dets, n_objects, tau)
}

pub fn prepare_sample(scene: &Scene, image_size: usize, pseudo: PseudoLabels) -> Sample {
    Sample { image_id: scene.image_id, image: render_scene(scene, image_size, image_size), targets: scene.targets(), pseudo }
}

/// Renders scenes with oracle pseudo-labels.
pub fn prepare_samples(scenes: &[Scene], model: &ModelConfig, noise: &NoiseConfig, tau: f64) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .map(|s| Ok(prepare_sample(s, model.image_size, pseudo_labels_for(s, model.n_objects, noise, tau)?)))
        .collect()
}

/// Loss and parameter gradients of one sample.
pub struct SampleOutcome {
    pub loss: LossBreakdown,
    pub grads: ParamGrads,
}

/// Loss of one sample under a fixed, freshly computed matching.
pub fn sample_loss(model: &Model, sample: &Sample, w: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::inference(&model.store);
    let out = model.forward(&mut g, &sample.image)?;
    let cost = cost_matrix(&SlotValues::from_graph(&g, &out), &sample.targets, w)?;
    let assignment = hungarian_assign(&cost);
    Ok(set_loss(&mut g, &out, &sample.targets, &assignment, Some(&sample.pseudo), w)?.1)
}

pub fn sample_gradient(model: &Model, sample: &Sample, w: &LossWeights) -> Result<SampleOutcome> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward(&mut g, &sample.image)?;
    let cost = cost_matrix(&SlotValues::from_graph(&g, &out), &sample.targets, w)?;
    let assignment = hungarian_assign(&cost);
    let (loss, parts) = set_loss(&mut g, &out, &sample.targets, &assignment, Some(&sample.pseudo), w)?;
    let grads = g.backward(loss)?.into_params();
    Ok(SampleOutcome { loss: parts, grads })
}

fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("QC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
    })
}

/// Runs `f` over `items` on the shared pool; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    thread_pool().install(|| items.par_iter().map(f).collect())
}

/// Detections for every sample, in sample order.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<PredictionRecord>> {
    par_map(samples, |s| model.detect(&s.image).map(|quads| PredictionRecord { image_id: s.image_id, quads })).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map_full: f64,
    pub val_map_rare: f64,
    pub val_map_nonrare: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn row(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8e}",
            self.epoch, self.train_loss, self.val_map_full, self.val_map_rare, self.val_map_nonrare, self.lr
        )
    }
}

/// First epoch whose validation mAP reaches [`CONVERGENCE_SHARE`] of the best.
pub fn convergence_epoch(history: &[EpochMetrics]) -> Option<usize> {
    let best = history.iter().map(|m| m.val_map_full).fold(f64::NEG_INFINITY, f64::max);
    history.iter().find(|m| m.val_map_full >= CONVERGENCE_SHARE * best).map(|m| m.epoch)
}

/// Everything the trainer needs besides the model.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub val_scenes: Vec<Scene>,
    pub train_counts: Vec<usize>,
}

impl TrainData {
    pub fn new(vocab: Vocabulary, train_scenes: &[Scene], val_scenes: Vec<Scene>, config: &TrainConfig) -> Result<Self> {
        Ok(TrainData {
            train_counts: category_counts(train_scenes, &vocab),
            train: prepare_samples(train_scenes, &config.model, &config.noise, config.tau)?,
            val: prepare_samples(&val_scenes, &config.model, &NoiseConfig::off(), config.tau)?,
            val_scenes,
            vocab,
        })
    }

    /// Like [`TrainData::new`] but with training pseudo-labels read from a
    /// cache instead of the oracle detector.
    pub fn with_labels(
        vocab: Vocabulary,
        train_scenes: &[Scene],
        labels: &[(u64, PseudoLabels)],
        val_scenes: Vec<Scene>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let lookup: std::collections::HashMap<u64, &PseudoLabels> = labels.iter().map(|(id, l)| (*id, l)).collect();
        let train = train_scenes
            .iter()
            .map(|s| {
                let l = lookup
                    .get(&s.image_id)
                    .ok_or_else(|| Error::Validation(format!("no pseudo-labels for image {}", s.image_id)))?;
                Ok(prepare_sample(s, config.model.image_size, (*l).clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData {
            train_counts: category_counts(train_scenes, &vocab),
            train,
            val: prepare_samples(&val_scenes, &config.model, &NoiseConfig::off(), config.tau)?,
            val_scenes,
            vocab,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: TrainConfig,
    epoch: usize,
    best_map: f64,
    history: Vec<EpochMetrics>,
    params: ParamStore,
    adam: Adam,
}

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.json")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Last completed epoch.
    pub epoch: usize,
    pub best_map: f64,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), &vocab.pairs())?;
        let adam = Adam::new(&model.store);
        Ok(Trainer { model, adam, config, epoch: 0, best_map: f64::NEG_INFINITY, history: Vec::new() })
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(self.config.shuffle_seed, epoch as u64)));
        order
    }

    /// One pass over `train`; returns the mean per-sample loss.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        let epoch = self.epoch + 1;
        let lr = self.config.lr_at(epoch);
        let order = self.epoch_order(train.len(), epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let items: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (model, w) = (&self.model, &self.config.loss);
            let outcomes = par_map(&items, |s| sample_gradient(model, s, w));
            let mut total = ParamGrads::zeros_like(&self.model.store);
            for o in outcomes {
                let o = o?;
                if !o.loss.total.is_finite() || !o.grads.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                loss_sum += o.loss.total;
                total.add_assign(&o.grads);
            }
            total.scale(1.0 / batch.len() as f64);
            if self.config.clip_norm > 0.0 {
                let norm = total.global_norm();
                if norm > self.config.clip_norm {
                    total.scale(self.config.clip_norm / norm);
                }
            }
            self.model.store.zero_grad();
            self.model.store.accumulate(&total);
            self.adam.step(&mut self.model.store, lr);
        }
        self.epoch = epoch;
        Ok(loss_sum / train.len().max(1) as f64)
    }

    pub fn evaluate(&self, samples: &[Sample], scenes: &[Scene], vocab: &Vocabulary, train_counts: &[usize]) -> Result<EvalReport> {
        evaluate(&predict(&self.model, samples)?, scenes, vocab, train_counts, RARE_THRESHOLD)
    }

    /// Trains up to the configured epoch count (continuing after a resume),
    /// validating after every epoch. With `paths`, appends metric rows and
    /// writes `last`/`best` checkpoints.
    pub fn fit(&mut self, data: &TrainData, paths: Option<&RunPaths>) -> Result<()> {
        if let Some(p) = paths {
            fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let snapshot = p.config();
            fs::write(&snapshot, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&snapshot, e))?;
            let metrics = p.metrics();
            if !metrics.exists() {
                fs::write(&metrics, format!("{METRICS_HEADER}\n{METRICS_COLUMNS}\n")).map_err(|e| Error::io(&metrics, e))?;
            }
        }
        let mut since_best = 0;
        while self.epoch < self.config.epochs {
            let train_loss = self.train_epoch(&data.train)?;
            let report = self.evaluate(&data.val, &data.val_scenes, &data.vocab, &data.train_counts)?;
            let m = EpochMetrics {
                epoch: self.epoch,
                train_loss,
                val_map_full: report.map_full,
                val_map_rare: report.map_rare,
                val_map_nonrare: report.map_nonrare,
                lr: self.config.lr_at(self.epoch),
            };
            let improved = m.val_map_full > self.best_map;
            if improved {
                self.best_map = m.val_map_full;
                since_best = 0;
            } else {
                since_best += 1;
            }
            self.history.push(m.clone());
            if let Some(p) = paths {
                let path = p.metrics();
                let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{}", m.row()).map_err(|e| Error::io(&path, e))?;
                self.save_checkpoint(&p.last())?;
                if improved {
                    self.save_checkpoint(&p.best())?;
                }
            }
            if self.config.patience > 0 && since_best >= self.config.patience {
                break;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            best_map: self.best_map,
            history: self.history.clone(),
            params: self.model.store.clone(),
            adam: self.adam.clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer exactly as it was when `path` was written.
    pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        let mut t = Trainer::new(ck.config, vocab)?;
        t.model.store.load_values(&ck.params)?;
        t.adam = ck.adam;
        t.epoch = ck.epoch;
        t.best_map = ck.best_map;
        t.history = ck.history;
        Ok(t)
    }
}

/// Reads just the model out of a checkpoint.
pub fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Model> {
    Ok(Trainer::load_checkpoint(path, vocab)?.model)
}
