//! Experiment orchestration: configuration parsing, the online and offline
//! training protocols, result persistence (CSV and SVG), and aggregation
//! across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{cutmix, rand_compose, PerturbPolicy};
use crate::dataset::{load_mnist, make_synthetic, Dataset, Sample, Shape, SyntheticSpec};
use crate::error::{Error, Result};
use crate::memory::{EpisodicMemory, Strategy};
use crate::metrics::{upper_bound, AccuracyMatrix, MetricsReport, UpperBoundSpec};
use crate::model::{cosine_lr, one_hot, ClassifierState, TrainConfig};
use crate::rng;
use crate::stream::{assign_classes, build_stream, eval_sets, EvalSets, Setup, Task};
use crate::uncertainty::{score_batch, UncertaintyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

impl DatasetKind {
    pub fn parse(text: &str) -> Result<DatasetKind> {
        match text {
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}: expected mnist or synthetic"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Each stream sample feeds exactly one optimizer step; memory is
    /// replayed alongside and trained on after the task.
    Online,
    /// The whole task is buffered and trained for several epochs together
    /// with memory.
    Offline,
}

impl Mode {
    pub fn parse(text: &str) -> Result<Mode> {
        match text {
            "online" => Ok(Mode::Online),
            "offline" => Ok(Mode::Offline),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}: expected online or offline"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::Offline => "offline",
        }
    }
}

/// Which training-time augmentations are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentChoice {
    None,
    CutMix,
    RandCompose,
    Both,
}

impl AugmentChoice {
    pub fn parse(text: &str) -> Result<AugmentChoice> {
        match text {
            "none" => Ok(AugmentChoice::None),
            "cutmix" => Ok(AugmentChoice::CutMix),
            "randcompose" => Ok(AugmentChoice::RandCompose),
            "cutmix+randcompose" => Ok(AugmentChoice::Both),
            other => Err(Error::Config(format!(
                "unknown augment {other:?}: expected none, cutmix, randcompose, or cutmix+randcompose"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentChoice::None => "none",
            AugmentChoice::CutMix => "cutmix",
            AugmentChoice::RandCompose => "randcompose",
            AugmentChoice::Both => "cutmix+randcompose",
        }
    }

    pub fn uses_cutmix(&self) -> bool {
        matches!(self, AugmentChoice::CutMix | AugmentChoice::Both)
    }

    pub fn uses_rand_compose(&self) -> bool {
        matches!(self, AugmentChoice::RandCompose | AugmentChoice::Both)
    }
}

/// Full experiment description. Every field has a default, so a config
/// file only needs the keys it wants to change.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub setup: Setup,
    pub mode: Mode,
    pub task_count: usize,
    pub memory_size: usize,
    pub strategy: Strategy,
    pub augment: AugmentChoice,
    /// Post-task memory epochs (online) or per-task epochs (offline);
    /// `None` picks the mode's default (8 online, 30 offline).
    pub epochs: Option<usize>,
    pub seeds: Vec<u64>,
    /// Perturbation draws per uncertainty score.
    pub draws: usize,
    pub out: PathBuf,
    /// MNIST directory; falls back to RAINBOW_DATA_DIR, then "data/mnist".
    pub data_dir: Option<PathBuf>,
    pub hidden_dim: usize,
    /// Epochs for the jointly trained reference model.
    pub upper_epochs: usize,
    /// Reference-checkpoint directory; defaults to the output directory.
    pub cache_dir: Option<PathBuf>,
    /// Replay an equal-size memory batch next to each incoming batch.
    pub stream_replay: bool,
    pub cutmix_beta: f64,
    /// Operations per randomized composition.
    pub rand_ops: usize,
    pub synthetic_classes: usize,
    pub synthetic_samples: usize,
    pub synthetic_dim: usize,
    pub synthetic_separation: f64,
    pub synthetic_noise: f64,
    pub dump_memory: bool,
    pub dump_uncertainty: bool,
    pub dump_stream: bool,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            setup: Setup::Blurry { minor_percent: 10 },
            mode: Mode::Online,
            task_count: 5,
            memory_size: 500,
            strategy: Strategy::Rainbow,
            augment: AugmentChoice::None,
            epochs: None,
            seeds: vec![1, 2, 3],
            draws: 12,
            out: PathBuf::from("results"),
            data_dir: None,
            hidden_dim: 400,
            upper_epochs: 2,
            cache_dir: None,
            stream_replay: true,
            cutmix_beta: 1.0,
            rand_ops: 2,
            synthetic_classes: 10,
            synthetic_samples: 100,
            synthetic_dim: 16,
            synthetic_separation: 4.0,
            synthetic_noise: 1.0,
            dump_memory: false,
            dump_uncertainty: false,
            dump_stream: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {value:?} (expected true or false)"))),
    }
}

impl ExperimentConfig {
    /// Applies one key/value pair. `Ok(false)` flags an unknown key so the
    /// caller can report every unknown key in a file at once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "setup" => self.setup = Setup::parse(value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "task_count" => self.task_count = parse_value(key, value)?,
            "memory_size" => self.memory_size = parse_value(key, value)?,
            "strategy" => self.strategy = Strategy::parse(value)?,
            "augment" => self.augment = AugmentChoice::parse(value)?,
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "seeds" => {
                let seeds: Vec<u64> = value
                    .split(',')
                    .map(|s| parse_value("seeds", s.trim()))
                    .collect::<Result<_>>()?;
                if seeds.is_empty() {
                    return Err(Error::Config("seeds must list at least one seed".into()));
                }
                self.seeds = seeds;
            }
            "draws" => self.draws = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "upper_epochs" => self.upper_epochs = parse_value(key, value)?,
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            "stream_replay" => self.stream_replay = parse_bool(key, value)?,
            "cutmix_beta" => self.cutmix_beta = parse_value(key, value)?,
            "rand_ops" => self.rand_ops = parse_value(key, value)?,
            "synthetic_classes" => self.synthetic_classes = parse_value(key, value)?,
            "synthetic_samples" => self.synthetic_samples = parse_value(key, value)?,
            "synthetic_dim" => self.synthetic_dim = parse_value(key, value)?,
            "synthetic_separation" => self.synthetic_separation = parse_value(key, value)?,
            "synthetic_noise" => self.synthetic_noise = parse_value(key, value)?,
            "dump_memory" => self.dump_memory = parse_bool(key, value)?,
            "dump_uncertainty" => self.dump_uncertainty = parse_bool(key, value)?,
            "dump_stream" => self.dump_stream = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_count == 0 {
            return Err(Error::Config("task_count must be at least 1".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.upper_epochs == 0 {
            return Err(Error::Config("upper_epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if !(self.cutmix_beta > 0.0) {
            return Err(Error::Config(format!(
                "cutmix_beta must be positive, got {}",
                self.cutmix_beta
            )));
        }
        if self.rand_ops == 0 {
            return Err(Error::Config("rand_ops must be at least 1".into()));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.synthetic_classes == 0 || self.synthetic_samples == 0 || self.synthetic_dim == 0
            {
                return Err(Error::Config(
                    "synthetic_classes, synthetic_samples, and synthetic_dim must be at least 1"
                        .into(),
                ));
            }
            if !(self.synthetic_separation > 0.0) || !(self.synthetic_noise > 0.0) {
                return Err(Error::Config(
                    "synthetic_separation and synthetic_noise must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Mode default when no explicit epoch count is set.
    pub fn epochs_resolved(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            Mode::Online => 8,
            Mode::Offline => 30,
        })
    }

    /// MNIST location: explicit key, then RAINBOW_DATA_DIR, then a
    /// conventional relative directory.
    pub fn data_dir_resolved(&self) -> PathBuf {
        if let Some(dir) = &self.data_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("RAINBOW_DATA_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("data/mnist")
    }

    pub fn cache_dir_resolved(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.clone())
    }
}

/// Reads `key=value` lines ('#' starts a comment, blank lines skipped),
/// then applies CLI overrides on top through the same setters. Unknown
/// file keys are all reported in one error.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {} is not key=value: {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !cfg.set(key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
    }
    for (key, value) in overrides {
        if !cfg.set(key, value)? {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train and test splits for the configured dataset.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&cfg.data_dir_resolved())?,
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                class_count: cfg.synthetic_classes,
                samples_per_class: cfg.synthetic_samples,
                dim: cfg.synthetic_dim,
                separation: cfg.synthetic_separation,
                noise: cfg.synthetic_noise,
            };
            // One fixed world per parameter set, shared by every seed.
            make_synthetic(&spec, rng::subseed(0, rng::domain::SYNTH_DATA, 0))?
        }
    };
    Ok(LoadedData { train, test })
}

/// Memory contents at one task boundary, for the audit trail.
#[derive(Debug, Clone)]
pub struct MemorySnapshotRow {
    pub class: usize,
    pub sample_id: u32,
    pub u: f64,
}

/// Everything a single-seed run produces.
pub struct RunResult {
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
    /// Reference accuracies used by intransigence.
    pub upper: Vec<f64>,
    /// Training loss per optimizer step.
    pub losses: Vec<f64>,
    /// Memory contents after each task boundary.
    pub memory_snapshots: Vec<Vec<MemorySnapshotRow>>,
    /// How many optimizer steps each stream sample's incoming half fed
    /// (online mode only; must be exactly one each).
    pub exposures: BTreeMap<u32, u32>,
}

/// Augmentation settings resolved once per run.
struct AugSettings {
    choice: AugmentChoice,
    policy: PerturbPolicy,
    beta: f64,
    n_ops: usize,
}

/// Builds the (rows, soft labels) tensors for one training batch, applying
/// the configured augmentation. Draw order, when CutMix is enabled: one
/// coin per batch; heads shuffles a partner permutation and then draws each
/// pair's mix in batch order; tails falls through to the composition path
/// (one magnitude per sample, then its parameter draws) or to raw samples.
fn augment_batch(
    batch: &[&Sample],
    shape: &Shape,
    class_count: usize,
    aug: &AugSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    if aug.choice.uses_cutmix() && rng.random::<f64>() < 0.5 {
        let mut partners: Vec<usize> = (0..batch.len()).collect();
        partners.shuffle(rng);
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (i, &base) in batch.iter().enumerate() {
            let mixed = cutmix(base, batch[partners[i]], shape, aug.beta, rng)?;
            let mut label = vec![0.0f32; class_count];
            for &(class, w) in &mixed.label_weights {
                label[class] += w as f32;
            }
            rows.push(mixed.features);
            labels.push(label);
        }
        return Ok((rows, labels));
    }
    if aug.choice.uses_rand_compose() {
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &s in batch {
            let magnitude = rng.random::<f64>();
            rows.push(rand_compose(&s.features, shape, &aug.policy, aug.n_ops, magnitude, rng)?);
            labels.push(one_hot(s.label, class_count));
        }
        return Ok((rows, labels));
    }
    let rows = batch.iter().map(|s| s.features.clone()).collect();
    let labels = batch.iter().map(|s| one_hot(s.label, class_count)).collect();
    Ok((rows, labels))
}

fn eval_percent(state: &ClassifierState, test: &Dataset, ids: &[u32]) -> Result<f64> {
    let frac = state.evaluate(ids.iter().map(|&id| {
        let s = test.get(id);
        (s.features.as_slice(), s.label)
    }))?;
    Ok(100.0 * frac)
}

/// One optimizer step over an assembled batch.
fn train_step(
    state: &mut ClassifierState,
    rows: &[Vec<f32>],
    labels: &[Vec<f32>],
    step: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    let (loss, grads) = state.loss_and_grad(&refs, labels)?;
    state.sgd_step(&grads, cosine_lr(step, cfg), cfg.momentum)?;
    Ok(loss)
}

/// Applies the strategy's task-boundary rebuild (reservoir updates during
/// the pass instead and is a no-op here).
fn boundary_update(
    memory: &mut EpisodicMemory,
    strategy: Strategy,
    stream: &[&Sample],
    task: usize,
    state: &ClassifierState,
    shape: &Shape,
    ucfg: &UncertaintyConfig,
    seed: u64,
) -> Result<()> {
    match strategy {
        Strategy::Rainbow => {
            let score_seed = rng::subseed(seed, rng::domain::SCORE_TASK, task as u64);
            memory.update_rainbow(stream, task, state, shape, ucfg, score_seed)
        }
        Strategy::Random => memory.update_random(stream, task, seed),
        Strategy::Prototype => memory.update_prototype(stream, task, state),
        Strategy::GreedyBalanced => memory.update_greedy_balanced(stream, task, seed),
        Strategy::Reservoir => Ok(()),
    }
}

/// Capacity and (for balancing strategies) per-class cap checks, run at
/// every boundary.
fn check_boundary_invariants(memory: &EpisodicMemory, strategy: Strategy) -> Result<()> {
    memory.check_invariants()?;
    let balanced = matches!(
        strategy,
        Strategy::Rainbow | Strategy::Prototype | Strategy::GreedyBalanced
    );
    if balanced && memory.seen_count() > 0 {
        let cap = memory.capacity / memory.seen_count() + 1;
        for (class, count) in memory.class_counts() {
            if count > cap {
                return Err(Error::Data(format!(
                    "class {class} holds {count} exemplars, over the balanced cap {cap}"
                )));
            }
        }
    }
    Ok(())
}

fn snapshot(memory: &EpisodicMemory) -> Vec<MemorySnapshotRow> {
    memory
        .entries
        .iter()
        .map(|e| MemorySnapshotRow { class: e.sample.label, sample_id: e.sample.id, u: e.u })
        .collect()
}

/// Runs one seed of the configured experiment. When `persist` names a
/// directory, the accuracy matrix (and enabled dumps) are rewritten there
/// after every task so an aborted run leaves its partial results behind.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
    persist: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    let train = &data.train;
    let test = &data.test;
    let classes = train.class_count;
    let shape = train.shape;
    let epochs = cfg.epochs_resolved();

    let assignment = assign_classes(classes, cfg.task_count, seed)?;
    let tasks = build_stream(train, &assignment, cfg.setup, seed)?;
    let eval = eval_sets(test, &assignment)?;
    let policy = PerturbPolicy::for_shape(&shape);
    policy.validate(&shape)?;
    let ucfg = UncertaintyConfig { draws: cfg.draws, policy: policy.clone() };
    ucfg.validate()?;
    let aug = AugSettings {
        choice: cfg.augment,
        policy,
        beta: cfg.cutmix_beta,
        n_ops: cfg.rand_ops,
    };

    let mut state = ClassifierState::init(
        shape.len(),
        cfg.hidden_dim,
        classes,
        rng::subseed(seed, rng::domain::MODEL_INIT, 0),
    )?;
    let mut memory = EpisodicMemory::new(cfg.memory_size);
    let mut matrix = AccuracyMatrix::new(cfg.task_count);
    let mut losses = Vec::new();
    let mut snapshots = Vec::new();
    let mut exposures: BTreeMap<u32, u32> = BTreeMap::new();

    if let Some(dir) = persist {
        if cfg.dump_stream {
            emit_stream_dump(&tasks, &dir.join("stream.txt"))?;
        }
    }

    for (t, task) in tasks.iter().enumerate() {
        let stream_refs: Vec<&Sample> = task.sample_ids.iter().map(|&id| train.get(id)).collect();
        let mut aug_rng = rng::keyed(seed, rng::domain::AUG, t as u64);

        match cfg.mode {
            Mode::Online => {
                // One pass over the stream: incoming batch plus an
                // equal-size replay batch once memory holds anything.
                let batches: Vec<&[u32]> = task.batches(16).collect();
                let stream_cfg = TrainConfig::with_total_steps(batches.len());
                let mut replay_rng = rng::keyed(seed, rng::domain::REPLAY, t as u64);
                let mut reservoir_rng = rng::keyed(seed, rng::domain::RESERVOIR, t as u64);
                for (step, chunk) in batches.iter().enumerate() {
                    let incoming: Vec<&Sample> = chunk.iter().map(|&id| train.get(id)).collect();
                    let mut batch = incoming.clone();
                    if cfg.stream_replay && !memory.is_empty() {
                        for e in memory.sample_replay(incoming.len(), &mut replay_rng) {
                            batch.push(&e.sample);
                        }
                    }
                    let (rows, labels) = augment_batch(&batch, &shape, classes, &aug, &mut aug_rng)?;
                    losses.push(train_step(&mut state, &rows, &labels, step, &stream_cfg)?);
                    for &id in *chunk {
                        *exposures.entry(id).or_insert(0) += 1;
                    }
                    if cfg.strategy == Strategy::Reservoir {
                        for &s in &incoming {
                            memory.offer_reservoir(s, t, &mut reservoir_rng);
                        }
                    }
                }

                boundary_update(
                    &mut memory, cfg.strategy, &stream_refs, t, &state, &shape, &ucfg, seed,
                )?;

                // Post-task consolidation: `epochs` shuffled passes over
                // memory alone, under a fresh schedule.
                if !memory.is_empty() && epochs > 0 {
                    let steps_per_epoch = memory.len().div_ceil(16);
                    let mem_cfg = TrainConfig::with_total_steps(epochs * steps_per_epoch);
                    let mut step = 0usize;
                    for e in 0..epochs {
                        let key = ((t as u64) << 32) | e as u64;
                        let mut r = rng::keyed(seed, rng::domain::MEM_EPOCH, key);
                        let mut order: Vec<usize> = (0..memory.len()).collect();
                        order.shuffle(&mut r);
                        for chunk in order.chunks(16) {
                            let batch: Vec<&Sample> =
                                chunk.iter().map(|&i| &memory.entries[i].sample).collect();
                            let (rows, labels) =
                                augment_batch(&batch, &shape, classes, &aug, &mut aug_rng)?;
                            losses.push(train_step(&mut state, &rows, &labels, step, &mem_cfg)?);
                            step += 1;
                        }
                    }
                }
            }
            Mode::Offline => {
                // Reservoir ingests the buffer before training; the other
                // strategies rebuild after.
                if cfg.strategy == Strategy::Reservoir {
                    let mut reservoir_rng = rng::keyed(seed, rng::domain::RESERVOIR, t as u64);
                    for &s in &stream_refs {
                        memory.offer_reservoir(s, t, &mut reservoir_rng);
                    }
                }

                // Train over the buffered task united with memory (the
                // union is by sample id; reservoir may already hold some
                // of the buffer).
                let mut union: BTreeMap<u32, &Sample> = BTreeMap::new();
                for e in &memory.entries {
                    union.insert(e.sample.id, &e.sample);
                }
                for &s in &stream_refs {
                    union.insert(s.id, s);
                }
                let pool: Vec<&Sample> = union.into_values().collect();
                let steps_per_epoch = pool.len().div_ceil(16);
                let task_cfg = TrainConfig::with_total_steps(epochs * steps_per_epoch);
                let mut step = 0usize;
                for e in 0..epochs {
                    let key = ((t as u64) << 32) | e as u64;
                    let mut r = rng::keyed(seed, rng::domain::OFFLINE_EPOCH, key);
                    let mut order: Vec<usize> = (0..pool.len()).collect();
                    order.shuffle(&mut r);
                    for chunk in order.chunks(16) {
                        let batch: Vec<&Sample> = chunk.iter().map(|&i| pool[i]).collect();
                        let (rows, labels) =
                            augment_batch(&batch, &shape, classes, &aug, &mut aug_rng)?;
                        losses.push(train_step(&mut state, &rows, &labels, step, &task_cfg)?);
                        step += 1;
                    }
                }

                if cfg.strategy != Strategy::Reservoir {
                    boundary_update(
                        &mut memory, cfg.strategy, &stream_refs, t, &state, &shape, &ucfg, seed,
                    )?;
                }
            }
        }

        check_boundary_invariants(&memory, cfg.strategy)?;
        snapshots.push(snapshot(&memory));

        // Fill matrix row t: per-task accuracies for trained tasks plus
        // the global evaluation under the declared setup.
        let mut row = Vec::with_capacity(t + 1);
        for ids in eval.per_task.iter().take(t + 1) {
            row.push(eval_percent(&state, test, ids)?);
        }
        let global_ids = eval.global_after(t, cfg.setup);
        let global = eval_percent(&state, test, &global_ids)?;
        println!(
            "[seed {seed}] task {}/{}: global accuracy {global:.2}%",
            t + 1,
            cfg.task_count
        );
        matrix.push_row(row, global)?;

        if let Some(dir) = persist {
            emit_matrix(&matrix, &dir.join("matrix.csv"))?;
            if cfg.dump_memory {
                emit_memory_dump(&snapshots, &dir.join("memory.csv"))?;
            }
            if cfg.dump_uncertainty && cfg.strategy == Strategy::Rainbow {
                emit_uncertainty_dump(
                    &memory, &stream_refs, t, &state, &shape, &ucfg, seed,
                    &dir.join(format!("uncertainty_task{}.csv", t + 1)),
                )?;
            }
        }
    }

    if cfg.mode == Mode::Online {
        for task in &tasks {
            for &id in &task.sample_ids {
                let n = exposures.get(&id).copied().unwrap_or(0);
                if n != 1 {
                    return Err(Error::Train(format!(
                        "stream sample {id} fed {n} incoming steps; online mode promises exactly one"
                    )));
                }
            }
        }
    }

    let upper = run_upper_bound(cfg, data, &eval, seed)?;
    let report = MetricsReport::compute(&matrix, &upper)?;
    println!(
        "[seed {seed}] final: accuracy {:.2}, forgetting {:.2}, intransigence {:.2}",
        report.final_accuracy, report.forgetting, report.intransigence
    );

    Ok(RunResult { matrix, report, upper, losses, memory_snapshots: snapshots, exposures })
}

/// Cache-file fingerprint for the jointly trained reference model: one
/// model per dataset/architecture/budget/seed combination.
fn upper_cache_name(cfg: &ExperimentConfig, seed: u64) -> String {
    let data = match cfg.dataset {
        DatasetKind::Mnist => "mnist".to_string(),
        DatasetKind::Synthetic => format!(
            "syn_c{}_n{}_d{}_s{}_x{}",
            cfg.synthetic_classes,
            cfg.synthetic_samples,
            cfg.synthetic_dim,
            cfg.synthetic_separation,
            cfg.synthetic_noise
        ),
    };
    format!("upper_{data}_h{}_e{}_s{seed}.ckpt", cfg.hidden_dim, cfg.upper_epochs)
}

/// Computes (or loads from cache) the reference accuracies for one seed.
pub fn run_upper_bound(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    eval: &EvalSets,
    seed: u64,
) -> Result<Vec<f64>> {
    let cache_dir = cfg.cache_dir_resolved();
    std::fs::create_dir_all(&cache_dir)
        .map_err(|source| Error::Io { path: cache_dir.clone(), source })?;
    let cache_path = cache_dir.join(upper_cache_name(cfg, seed));
    upper_bound(&UpperBoundSpec {
        train: &data.train,
        test: &data.test,
        eval,
        hidden_dim: cfg.hidden_dim,
        epochs: cfg.upper_epochs,
        seed,
        cache_path: Some(&cache_path),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// matrix.csv: one row per (trained, evaluated) pair of the lower triangle,
/// 1-based, accuracies at four decimals.
pub fn emit_matrix(matrix: &AccuracyMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("task_trained,task_evaluated,accuracy\n");
    for (t, row) in matrix.rows().iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{acc:.4}", t + 1, j + 1);
        }
    }
    write_text(path, &out)
}

fn emit_stream_dump(tasks: &[Task], path: &Path) -> Result<()> {
    let mut out = String::new();
    for task in tasks {
        let ids: Vec<String> = task.sample_ids.iter().map(|id| id.to_string()).collect();
        let _ = writeln!(out, "task {}: {}", task.index + 1, ids.join(" "));
    }
    write_text(path, &out)
}

fn emit_memory_dump(snapshots: &[Vec<MemorySnapshotRow>], path: &Path) -> Result<()> {
    let mut out = String::from("task,class,sample_id,u\n");
    for (t, rows) in snapshots.iter().enumerate() {
        for r in rows {
            let _ = writeln!(out, "{},{},{},{:.6}", t + 1, r.class, r.sample_id, r.u);
        }
    }
    write_text(path, &out)
}

/// Scores the boundary's candidate pool (stored exemplars plus the task
/// stream) under the same per-sample keying the rebuild used, so the dump
/// reproduces the selection scores exactly.
#[allow(clippy::too_many_arguments)]
fn emit_uncertainty_dump(
    memory: &EpisodicMemory,
    stream: &[&Sample],
    task: usize,
    state: &ClassifierState,
    shape: &Shape,
    ucfg: &UncertaintyConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    // After the rebuild the memory holds a subset of the candidates; the
    // stream plus current entries still covers every candidate id once.
    let mut by_id: BTreeMap<u32, &Sample> = BTreeMap::new();
    for e in &memory.entries {
        by_id.insert(e.sample.id, &e.sample);
    }
    for &s in stream {
        by_id.insert(s.id, s);
    }
    let refs: Vec<&Sample> = by_id.into_values().collect();
    let score_seed = rng::subseed(seed, rng::domain::SCORE_TASK, task as u64);
    let scores = score_batch(state, &refs, shape, ucfg, score_seed)?;
    let mut out = String::from("sample_id,u,top1_mode\n");
    for s in &scores {
        let _ = writeln!(out, "{},{:.6},{}", s.id, s.u, s.top1_mode());
    }
    write_text(path, &out)
}

/// Rounds to two decimals (the precision summary rows are printed with),
/// normalizing negative zero.
fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0 + 0.0
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// summary.csv: one row per seed plus mean and sample-standard-deviation
/// rows. Aggregates are computed from the two-decimal values the rows
/// print, so the file is self-consistent.
pub fn emit_summary(
    cfg: &ExperimentConfig,
    results: &[(u64, MetricsReport)],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("seed,setup,mode,strategy,augment,K,A,F,I\n");
    let tag = format!(
        "{},{},{},{},{}",
        cfg.setup.name(),
        cfg.mode.name(),
        cfg.strategy.name(),
        cfg.augment.name(),
        cfg.memory_size
    );
    let mut a_vals = Vec::new();
    let mut f_vals = Vec::new();
    let mut i_vals = Vec::new();
    for (seed, report) in results {
        let (a, f, i) = (
            round2(report.final_accuracy),
            round2(report.forgetting),
            round2(report.intransigence),
        );
        let _ = writeln!(out, "{seed},{tag},{a:.2},{f:.2},{i:.2}");
        a_vals.push(a);
        f_vals.push(f);
        i_vals.push(i);
    }
    let (am, asd) = mean_std(&a_vals);
    let (fm, fsd) = mean_std(&f_vals);
    let (im, isd) = mean_std(&i_vals);
    let _ = writeln!(out, "mean,{tag},{:.2},{:.2},{:.2}", round2(am), round2(fm), round2(im));
    let _ = writeln!(out, "std,{tag},{:.2},{:.2},{:.2}", round2(asd), round2(fsd), round2(isd));
    write_text(path, &out)
}

const TRAJECTORY_COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

/// trajectory.svg: global accuracy after each task boundary, one polyline
/// per seed, with labeled axes.
pub fn emit_trajectory(runs: &[(u64, Vec<f64>)], path: &Path) -> Result<()> {
    let tasks = runs.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let (left, right, top, bottom) = (60.0, 620.0, 20.0, 400.0);
    let x = |t: usize| -> f64 {
        if tasks <= 1 {
            (left + right) / 2.0
        } else {
            left + (right - left) * t as f64 / (tasks - 1) as f64
        }
    };
    let y = |acc: f64| -> f64 { bottom - (bottom - top) * acc / 100.0 };

    let mut s = String::new();
    s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 440\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s.push_str("<rect x=\"0\" y=\"0\" width=\"640\" height=\"440\" fill=\"white\"/>\n");
    // Axes.
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>"
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(f64::from(tick));
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{ty:.1}\" x2=\"{left}\" y2=\"{ty:.1}\" stroke=\"black\"/>",
            left - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>",
            left - 8.0,
            ty + 4.0
        );
    }
    for t in 0..tasks {
        let tx = x(t);
        let _ = writeln!(
            s,
            "<line x1=\"{tx:.1}\" y1=\"{bottom}\" x2=\"{tx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            bottom + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{tx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            bottom + 18.0,
            t + 1
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"432\" text-anchor=\"middle\">task boundary</text>",
        (left + right) / 2.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">global accuracy (%)</text>",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );
    // One polyline per run, with a small legend.
    for (i, (seed, traj)) in runs.iter().enumerate() {
        let color = TRAJECTORY_COLORS[i % TRAJECTORY_COLORS.len()];
        let points: Vec<String> =
            traj.iter().enumerate().map(|(t, &a)| format!("{:.1},{:.1}", x(t), y(a))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"3\" fill=\"{color}\"/>",
            right - 90.0,
            ly - 3.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{ly:.1}\">seed {seed}</text>", right - 72.0);
    }
    s.push_str("</svg>\n");
    write_text(path, &s)
}

/// Results of a full multi-seed run.
pub struct GridOutcome {
    pub per_seed: Vec<(u64, RunResult)>,
}

/// Runs every configured seed, persisting per-seed artifacts under
/// `out/seed_S/` and the aggregate summary and trajectory plot under the
/// output root.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(|source| Error::Io { path: cfg.out.clone(), source })?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = cfg.out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|source| Error::Io { path: seed_dir.clone(), source })?;
        let result = run_experiment(cfg, &data, seed, Some(&seed_dir))?;
        per_seed.push((seed, result));
    }
    let reports: Vec<(u64, MetricsReport)> =
        per_seed.iter().map(|(s, r)| (*s, r.report.clone())).collect();
    emit_summary(cfg, &reports, &cfg.out.join("summary.csv"))?;
    let trajectories: Vec<(u64, Vec<f64>)> =
        per_seed.iter().map(|(s, r)| (*s, r.matrix.global().to_vec())).collect();
    emit_trajectory(&trajectories, &cfg.out.join("trajectory.svg"))?;
    Ok(GridOutcome { per_seed })
}

/// Precomputes (and caches) the reference accuracies for every seed,
/// returning (seed, per-task accuracies) pairs.
pub fn precompute_upper_bounds(cfg: &ExperimentConfig) -> Result<Vec<(u64, Vec<f64>)>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let assignment = assign_classes(data.train.class_count, cfg.task_count, seed)?;
        let eval = eval_sets(&data.test, &assignment)?;
        let upper = run_upper_bound(cfg, &data, &eval, seed)?;
        let pretty: Vec<String> = upper.iter().map(|a| format!("{a:.2}")).collect();
        println!("seed {seed}: per-task reference accuracy [{}]", pretty.join(", "));
        rows.push((seed, upper));
    }
    Ok(rows)
}
