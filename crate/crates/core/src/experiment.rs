//! Paired benchmark runs: one corpus per seed, several model variants trained
//! on it with identical hyperparameters, scored on a held-out test split.

use serde::{Deserialize, Serialize};

use crate::data::{category_counts, generate_corpus, NoiseConfig, Scene, VocabConfig, Vocabulary, RARE_THRESHOLD};
use crate::detector::ModelConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::train::{convergence_epoch, predict, prepare_samples, EpochMetrics, RunPaths, TrainConfig, TrainData, Trainer};

/// First image id of each split; ids never collide across splits.
pub const TRAIN_FIRST_ID: u64 = 0;
pub const VAL_FIRST_ID: u64 = 1_000_000;
pub const TEST_FIRST_ID: u64 = 2_000_000;

/// Model size used by the benchmark: small enough for a single CPU core.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        n_queries: 8,
        width: 32,
        text_dim: 16,
        actor_layers: 1,
        image_size: 32,
        patch: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        interaction_depth: 1,
        pdqd_depth: 1,
        ffn_ratio: 2,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub vocab: VocabConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            vocab: VocabConfig::default(),
            train_scenes: 2000,
            val_scenes: 1000,
            test_scenes: 2000,
            train: TrainConfig { model: bench_model(), epochs: 40, lr: 1e-3, ..TrainConfig::default() },
        }
    }
}

/// The three splits generated from one master seed.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn generate_splits(master: u64, bench: &BenchmarkConfig) -> Result<Splits> {
    Ok(Splits {
        train: generate_corpus(master, TRAIN_FIRST_ID, bench.train_scenes, &bench.vocab)?,
        val: generate_corpus(master, VAL_FIRST_ID, bench.val_scenes, &bench.vocab)?,
        test: generate_corpus(master, TEST_FIRST_ID, bench.test_scenes, &bench.vocab)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
    pub convergence_epoch: Option<usize>,
    pub test: EvalReport,
}

/// Trains `model` (with its seed replaced by `seed`) on `splits` and scores
/// the final weights on the test split.
pub fn run_arm(
    label: &str,
    seed: u64,
    model: &ModelConfig,
    splits: &Splits,
    bench: &BenchmarkConfig,
    paths: Option<&RunPaths>,
) -> Result<ArmResult> {
    let vocab = bench.vocab.vocabulary();
    let config = TrainConfig { model: ModelConfig { seed, ..model.clone() }, shuffle_seed: seed, ..bench.train.clone() };
    let data = TrainData::new(vocab.clone(), &splits.train, splits.val.clone(), &config)?;
    let mut trainer = Trainer::new(config, &vocab)?;
    trainer.fit(&data, paths)?;
    let test = test_report(&trainer, &splits.test, &vocab, &data.train_counts)?;
    Ok(ArmResult {
        label: label.to_string(),
        seed,
        convergence_epoch: convergence_epoch(&trainer.history),
        history: trainer.history,
        test,
    })
}

fn test_report(trainer: &Trainer, test: &[Scene], vocab: &Vocabulary, train_counts: &[usize]) -> Result<EvalReport> {
    let samples = prepare_samples(test, &trainer.config.model, &NoiseConfig::off(), trainer.config.tau)?;
    evaluate(&predict(&trainer.model, &samples)?, test, vocab, train_counts, RARE_THRESHOLD)
}

/// Full model and its modules-off baseline on one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairResult {
    pub seed: u64,
    pub enhanced: ArmResult,
    pub baseline: ArmResult,
    pub n_rare_test: usize,
}

impl PairResult {
    pub fn gain_full(&self) -> f64 {
        self.enhanced.test.map_full - self.baseline.test.map_full
    }
    pub fn gain_rare(&self) -> f64 {
        self.enhanced.test.map_rare - self.baseline.test.map_rare
    }
    pub fn gain_nonrare(&self) -> f64 {
        self.enhanced.test.map_nonrare - self.baseline.test.map_nonrare
    }
}

pub fn run_pair(seed: u64, bench: &BenchmarkConfig) -> Result<PairResult> {
    let splits = generate_splits(seed, bench)?;
    let model = &bench.train.model;
    let enhanced = run_arm("enhanced", seed, model, &splits, bench, None)?;
    let baseline = run_arm("baseline", seed, &model.baseline(), &splits, bench, None)?;
    let n_rare_test = enhanced.test.n_rare;
    Ok(PairResult { seed, enhanced, baseline, n_rare_test })
}

/// Count of categories under the rare threshold in a training split.
pub fn rare_count(train: &[Scene], vocab: &Vocabulary) -> usize {
    category_counts(train, vocab).iter().filter(|&&c| c < RARE_THRESHOLD).count()
}
