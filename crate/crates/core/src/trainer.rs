//! Training loop for the deep subspace sampling scheme and its baselines.
//!
//! Every mode starts with single-task training on the original data. The
//! plain baseline then simply continues single-task training. The sampling
//! modes run `rounds` iterations of:
//!
//! 1. project the training set through the embedding stack,
//! 2. rebuild the per-label subspaces (supervised mode only; fixed bases are
//!    built once before the first round),
//! 3. draw a class-balanced multi-task set of (input, class, neighbor targets,
//!    weights, label) tuples,
//! 4. run `epochs_per_round` epochs over it, each batch summing the
//!    all-layer cross-entropy gradient with the embedding-only gradient of the
//!    weighted neighbor loss before one optimizer step.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{inject_imbalance, Dataset, ImbalanceSpec};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_from_logits, embedding_loss, embedding_loss_grad};
use crate::metrics::{evaluate, Metrics};
use crate::network::{ArchSpec, DualHeadNet, Gradients, Init};
use crate::rng::{derive_seed, stream_rng, Rng, Stream};
use crate::sampling::{
    batch_inputs, build_multitask_set, build_plan, class_totals, compute_projections,
    MultiTaskTuple,
};
use crate::subspace::{fixed_allocation, supervised_selection, SubspaceBases};

/// Which training scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Single-task cross-entropy training only.
    Plain,
    /// Neighbor targets used as-is (identity projection).
    Dos,
    /// Targets projected onto fixed coordinate blocks per label.
    Ds3Fixed,
    /// Targets projected onto discriminant subspaces recomputed every round.
    Ds3Supervised,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Plain, Mode::Dos, Mode::Ds3Fixed, Mode::Ds3Supervised];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Dos => "dos",
            Mode::Ds3Fixed => "ds3-fixed",
            Mode::Ds3Supervised => "ds3-supervised",
        }
    }

    fn uses_subspaces(&self) -> bool {
        matches!(self, Mode::Ds3Fixed | Mode::Ds3Supervised)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub neighbors: usize,
    pub alpha: f64,
    /// Directions per label; `None` means `max(1, d / (2 l))`.
    pub subspace_dim: Option<usize>,
    pub init_epochs: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ds3Fixed,
            rounds: 8,
            neighbors: 5,
            alpha: 0.01,
            subspace_dim: None,
            init_epochs: 10,
            epochs_per_round: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn subspace_dim_for(&self, dim: usize, labels: usize) -> usize {
        self.subspace_dim
            .unwrap_or_else(|| (dim / (2 * labels.max(1))).max(1))
    }

    pub fn validate(&self, dim: usize, labels: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.neighbors == 0 {
            return Err(Error::invalid("neighbors must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("learning rate must be >= 0 and momentum in [0, 1)"));
        }
        if self.mode.uses_subspaces() {
            let p = self.subspace_dim_for(dim, labels);
            if p == 0 || p * labels > dim {
                return Err(Error::Capacity { p, labels, dim });
            }
        }
        Ok(())
    }
}

/// Wall-clock seconds per phase of a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub projection: f64,
    pub subspace: f64,
    pub sampling: f64,
    pub learning: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub mean_classification_loss: f64,
    pub mean_embedding_loss: f64,
    pub probe_accuracy: Option<f64>,
    pub class_tuple_counts: Vec<usize>,
    /// Mean alpha-scaled embedding loss of every batch, in order.
    pub batch_embedding_losses: Vec<f64>,
    pub timings: PhaseTimings,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn initialized(&mut self, _net: &DualHeadNet) {}
    /// The multi-task set of a round and the (projected) targets used per tuple.
    fn round_set(&mut self, _round: usize, _tuples: &[MultiTaskTuple], _targets: &[Vec<Vec<f64>>]) {}
    /// Indices into the round's tuple set making up one optimizer step.
    fn batch(&mut self, _round: usize, _tuples: &[usize]) {}
    fn round_end(&mut self, _round: usize, _net: &DualHeadNet, _bases: Option<&SubspaceBases>) {}
}

impl TrainObserver for () {}

/// Saves the network after every round; the first write error is kept and
/// reported by [`RoundCheckpoints::finish`].
pub struct RoundCheckpoints {
    dir: PathBuf,
    run: usize,
    error: Option<Error>,
}

impl RoundCheckpoints {
    pub fn new(dir: &Path, run: usize) -> Self {
        RoundCheckpoints {
            dir: dir.to_path_buf(),
            run,
            error: None,
        }
    }

    pub fn path(dir: &Path, run: usize, round: usize) -> PathBuf {
        dir.join(format!("run{run}-round{round}.ckpt"))
    }

    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl TrainObserver for RoundCheckpoints {
    fn round_end(&mut self, round: usize, net: &DualHeadNet, _bases: Option<&SubspaceBases>) {
        if self.error.is_some() {
            return;
        }
        let path = Self::path(&self.dir, self.run, round);
        let result = std::fs::File::create(&path)
            .map_err(Error::from)
            .and_then(|f| net.save(std::io::BufWriter::new(f)));
        if let Err(e) = result {
            self.error = Some(e);
        }
    }
}

/// Streams traces as line-delimited JSON.
pub struct JsonTraceWriter<W: Write> {
    writer: W,
}

impl<W: Write> JsonTraceWriter<W> {
    pub fn new(writer: W) -> Self {
        JsonTraceWriter { writer }
    }

    pub fn write(&mut self, trace: &RoundTrace) -> Result<()> {
        serde_json::to_writer(&mut self.writer, trace)?;
        writeln!(self.writer)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl From<&TrainConfig> for Optimizer {
    fn from(c: &TrainConfig) -> Self {
        Optimizer {
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            batch_size: c.batch_size,
        }
    }
}

/// Aborts when the classification loss is non-finite or exceeds ten times
/// the first observed batch loss.
#[derive(Debug, Clone, Default)]
pub struct DivergenceGuard {
    reference: Option<f64>,
}

impl DivergenceGuard {
    fn check(&mut self, loss: f64, phase: &str, batch: usize) -> Result<()> {
        let reference = *self.reference.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * reference.max(1e-3) {
            return Err(Error::Training {
                phase: phase.to_string(),
                message: format!(
                    "batch {batch}: classification loss {loss} against initial {reference}"
                ),
            });
        }
        Ok(())
    }
}

fn mean_cross_entropy(logits: &[f32], targets: &[usize], k: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for (z, &t) in logits.chunks_exact(k).zip(targets) {
        row.iter_mut().zip(z).for_each(|(r, &x)| *r = f64::from(x));
        total += cross_entropy_from_logits(&row, t)?;
    }
    Ok(total / targets.len() as f64)
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Single-task cross-entropy training; returns the mean loss of the last epoch.
pub fn train_single_task(
    net: &mut DualHeadNet,
    dataset: &Dataset,
    epochs: usize,
    opt: &Optimizer,
    shuffle_rng: &mut Rng,
    guard: &mut DivergenceGuard,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let k = net.num_classes();
    let mut last = 0.0;
    for epoch in 0..epochs {
        let order = shuffled(dataset.len(), shuffle_rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(opt.batch_size).enumerate() {
            let inputs = batch_inputs::<f32>(dataset, batch);
            let targets: Vec<usize> = batch
                .iter()
                .map(|&i| dataset.instances()[i].class_id)
                .collect();
            let out = net.forward(&inputs, batch.len())?;
            let loss = mean_cross_entropy(&out.logits, &targets, k)?;
            guard.check(loss, &format!("single-task epoch {epoch}"), b)?;
            sum += loss * batch.len() as f64;
            let grads = net.backward_all(&targets)?;
            net.sgd_step(&grads, opt.learning_rate, opt.momentum)?;
        }
        last = sum / dataset.len() as f64;
    }
    Ok(last)
}

fn probe(net: &DualHeadNet, probe: Option<&Dataset>) -> Result<Option<f64>> {
    probe
        .map(|p| evaluate(net, p, &BTreeSet::new()).map(|m| m.accuracy))
        .transpose()
}

struct EpochStats {
    classification: f64,
    embedding: f64,
    batch_embedding: Vec<f64>,
}

/// One epoch over a multi-task set.
#[allow(clippy::too_many_arguments)]
fn multitask_epoch(
    net: &mut DualHeadNet,
    dataset: &Dataset,
    tuples: &[MultiTaskTuple],
    targets: &[Vec<Vec<f64>>],
    config: &TrainConfig,
    round: usize,
    shuffle_rng: &mut Rng,
    guard: &mut DivergenceGuard,
    observer: &mut dyn TrainObserver,
) -> Result<EpochStats> {
    let k = net.num_classes();
    let d = net.embedding_dim();
    let order = shuffled(tuples.len(), shuffle_rng);
    let mut stats = EpochStats {
        classification: 0.0,
        embedding: 0.0,
        batch_embedding: Vec::new(),
    };
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        observer.batch(round, batch);
        let instances: Vec<usize> = batch.iter().map(|&t| tuples[t].instance_index).collect();
        let classes: Vec<usize> = batch.iter().map(|&t| tuples[t].class_id).collect();
        let out = net.forward(&batch_inputs::<f32>(dataset, &instances), batch.len())?;
        let ce = mean_cross_entropy(&out.logits, &classes, k)?;
        guard.check(ce, &format!("round {round}"), b)?;

        let scale = 1.0 / batch.len() as f64;
        let mut emb_grad = Vec::with_capacity(batch.len() * d);
        let mut emb_loss = 0.0;
        for (row, &t) in out.embeddings.chunks_exact(d).zip(batch) {
            let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            let tup = &tuples[t];
            emb_loss += embedding_loss(&v, &targets[t], &tup.weights, config.alpha)?;
            let g = embedding_loss_grad(&v, &targets[t], &tup.weights, config.alpha)?;
            emb_grad.extend(g.iter().map(|x| (x * scale) as f32));
        }
        let emb_loss = emb_loss * scale;

        let mut grads: Gradients<f32> = net.backward_all(&classes)?;
        grads.add_assign(&net.backward_embedding_only(&emb_grad)?)?;
        net.sgd_step(&grads, config.learning_rate, config.momentum)?;

        stats.classification += ce * batch.len() as f64;
        stats.embedding += emb_loss * batch.len() as f64;
        stats.batch_embedding.push(emb_loss);
    }
    stats.classification /= tuples.len() as f64;
    stats.embedding /= tuples.len() as f64;
    Ok(stats)
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Trains a network from scratch under `config`.
///
/// `probe` (typically the test split) is only read, to record per-round accuracy.
pub fn ds3_train(
    dataset: &Dataset,
    arch: &ArchSpec,
    config: &TrainConfig,
    probe_set: Option<&Dataset>,
    observer: &mut dyn TrainObserver,
) -> Result<(DualHeadNet, Vec<RoundTrace>)> {
    let dim = arch
        .embedding_dim()
        .ok_or_else(|| Error::invalid("architecture has no embedding layer"))?;
    let labels = dataset.num_labels();
    config.validate(dim, labels)?;
    if config.mode != Mode::Plain {
        if let Some((c, &n)) = dataset
            .class_counts()
            .iter()
            .enumerate()
            .find(|(_, &n)| n <= config.neighbors)
        {
            return Err(Error::InsufficientClassSize {
                class_id: c,
                size: n,
                required: config.neighbors + 1,
            });
        }
    }

    let mut net = DualHeadNet::new(
        arch,
        dataset.shape(),
        dataset.num_classes(),
        Init::KaimingUniform {
            seed: derive_seed(config.seed, Stream::Init),
        },
    )?;
    let opt = Optimizer::from(config);
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut sampling_rng = stream_rng(config.seed, Stream::Sampling);
    let mut subspace_rng = stream_rng(config.seed, Stream::Subspace);
    let mut guard = DivergenceGuard::default();

    train_single_task(&mut net, dataset, config.init_epochs, &opt, &mut shuffle_rng, &mut guard)
        .map_err(|e| e.in_phase("initialization"))?;
    observer.initialized(&net);

    let p = config.subspace_dim_for(dim, labels);
    let mut bases = match config.mode {
        Mode::Ds3Fixed => Some(fixed_allocation(dim, labels, p)?),
        _ => None,
    };

    let mut traces = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let mut timings = PhaseTimings::default();
        if config.mode == Mode::Plain {
            let t = Instant::now();
            let loss = train_single_task(
                &mut net,
                dataset,
                config.epochs_per_round,
                &opt,
                &mut shuffle_rng,
                &mut guard,
            )
            .map_err(|e| e.in_phase("learning"))?;
            timings.learning = seconds_since(t);
            observer.round_end(round, &net, None);
            traces.push(RoundTrace {
                round,
                mean_classification_loss: loss,
                mean_embedding_loss: 0.0,
                probe_accuracy: probe(&net, probe_set)?,
                class_tuple_counts: dataset.class_counts(),
                batch_embedding_losses: Vec::new(),
                timings,
            });
            continue;
        }

        let t = Instant::now();
        let table = compute_projections(&net, dataset).map_err(|e| e.in_phase("projection"))?;
        timings.projection = seconds_since(t);

        let t = Instant::now();
        if config.mode == Mode::Ds3Supervised {
            bases = Some(
                supervised_selection(&table, dataset.lambda_map(), p, &mut subspace_rng)
                    .map_err(|e| e.in_phase("subspace selection"))?,
            );
        }
        timings.subspace = seconds_since(t);

        let t = Instant::now();
        let plan = build_plan(&dataset.class_counts(), &mut sampling_rng)?;
        let tuples = build_multitask_set(dataset, &table, &plan, config.neighbors, &mut sampling_rng)
            .map_err(|e| e.in_phase("sampling"))?;
        let targets: Vec<Vec<Vec<f64>>> = match &bases {
            Some(b) => tuples
                .iter()
                .map(|t| {
                    t.neighbor_targets
                        .iter()
                        .map(|v| b.project(v, t.label_id))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
            None => tuples.iter().map(|t| t.neighbor_targets.clone()).collect(),
        };
        timings.sampling = seconds_since(t);
        observer.round_set(round, &tuples, &targets);

        let t = Instant::now();
        let mut classification = 0.0;
        let mut embedding = 0.0;
        let mut batch_losses = Vec::new();
        for _ in 0..config.epochs_per_round {
            let s = multitask_epoch(
                &mut net,
                dataset,
                &tuples,
                &targets,
                config,
                round,
                &mut shuffle_rng,
                &mut guard,
                observer,
            )
            .map_err(|e| e.in_phase("learning"))?;
            classification = s.classification;
            embedding = s.embedding;
            batch_losses.extend(s.batch_embedding);
        }
        timings.learning = seconds_since(t);
        observer.round_end(round, &net, bases.as_ref());

        traces.push(RoundTrace {
            round,
            mean_classification_loss: classification,
            mean_embedding_loss: embedding,
            probe_accuracy: probe(&net, probe_set)?,
            class_tuple_counts: class_totals(&tuples, dataset.num_classes()),
            batch_embedding_losses: batch_losses,
            timings,
        });
    }
    Ok((net, traces))
}

/// Data for a batch of repeated runs.
#[derive(Debug, Clone, Copy)]
pub enum RunData<'a> {
    /// A fixed, already imbalanced training split with its minority set.
    Prepared {
        train: &'a Dataset,
        test: &'a Dataset,
        minority: &'a BTreeSet<usize>,
    },
    /// A balanced training split; every run injects imbalance with its own seed.
    Inject {
        train: &'a Dataset,
        test: &'a Dataset,
        imbalance: ImbalanceSpec,
    },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub minority: BTreeSet<usize>,
    pub metrics: Metrics,
    pub traces: Vec<RoundTrace>,
    pub net: DualHeadNet,
}

/// Worker threads for repetitions: `DS3_THREADS` or the number of logical CPUs.
pub fn thread_count() -> usize {
    std::env::var("DS3_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn single_run(
    data: &RunData<'_>,
    arch: &ArchSpec,
    config: &TrainConfig,
    run: usize,
    seed: u64,
    save_rounds: Option<&Path>,
) -> Result<RunOutcome> {
    let (train, test, minority) = match *data {
        RunData::Prepared {
            train,
            test,
            minority,
        } => (train.clone(), test, minority.clone()),
        RunData::Inject {
            train,
            test,
            imbalance,
        } => {
            let (reduced, minority) =
                inject_imbalance(train, &ImbalanceSpec { seed, ..imbalance })?;
            (reduced, test, minority)
        }
    };
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let (net, traces) = match save_rounds {
        Some(dir) => {
            let mut saver = RoundCheckpoints::new(dir, run);
            let result = ds3_train(&train, arch, &cfg, Some(test), &mut saver)?;
            saver.finish()?;
            result
        }
        None => ds3_train(&train, arch, &cfg, Some(test), &mut ())?,
    };
    let metrics = evaluate(&net, test, &minority)?;
    Ok(RunOutcome {
        run,
        seed,
        minority,
        metrics,
        traces,
        net,
    })
}

/// Options for [`run_repetitions`] beyond the training configuration.
#[derive(Debug, Clone, Default)]
pub struct RepetitionOptions {
    pub threads: usize,
    /// Directory for per-round checkpoints `run{i}-round{t}.ckpt`.
    pub save_rounds: Option<PathBuf>,
}

/// Runs `n_runs` independent trainings; run `i` uses seed `seed_base + i`.
///
/// Runs execute in parallel on up to `options.threads` workers; results are
/// ordered by run index.
pub fn run_repetitions(
    data: &RunData<'_>,
    arch: &ArchSpec,
    config: &TrainConfig,
    n_runs: usize,
    seed_base: u64,
    options: &RepetitionOptions,
) -> Result<Vec<RunOutcome>> {
    let threads = options.threads;
    if n_runs == 0 {
        return Err(Error::invalid("need at least one run"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunOutcome>> = pool.install(|| {
        (0..n_runs)
            .into_par_iter()
            .map(|run| {
                single_run(
                    data,
                    arch,
                    config,
                    run,
                    seed_base + run as u64,
                    options.save_rounds.as_deref(),
                )
            })
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(run, r)| {
            r.map_err(|e| Error::Run {
                run,
                source: Box::new(e),
            })
        })
        .collect()
}
