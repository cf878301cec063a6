//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fail.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ds3_core::dataio::{Dataset, ImageShape, ImbalanceSpec};
use ds3_core::fixture::{generate, FixtureSpec, Splits};
use ds3_core::linalg::{dot, Matrix};
use ds3_core::losses::{dos_embedding_loss, embedding_loss, embedding_loss_grad};
use ds3_core::network::{softmax, ArchSpec, DualHeadNet, Init, LayerKind, Scalar};
use ds3_core::report::AlphaSweep;
use ds3_core::rng::{derive_seed, rng_from_seed, stream_rng, Stream};
use ds3_core::sampling::{
    batch_inputs, build_multitask_set, build_plan, class_totals, compute_projections,
    in_class_neighbors, MultiTaskTuple, ProjectionTable,
};
use ds3_core::subspace::{fixed_allocation, supervised_selection, SubspaceBases};
use ds3_core::trainer::{
    ds3_train, run_repetitions, train_single_task, DivergenceGuard, Mode, Optimizer,
    RepetitionOptions, RunData, RunOutcome, TrainConfig, TrainObserver,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn random_net(arch: &str, shape: ImageShape, k: usize, seed: u64) -> DualHeadNet<f64> {
    let arch: ArchSpec = arch.parse().unwrap();
    let mut net = DualHeadNet::<f64>::new(&arch, shape, k, Init::Zero).unwrap();
    let mut rng = rng_from_seed(seed);
    for t in net.parameters_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    net
}

struct GradCase {
    inputs: Vec<f64>,
    batch: usize,
    classes: Vec<usize>,
    targets: Vec<Vec<Vec<f64>>>,
    weights: Vec<Vec<f64>>,
    alpha: f64,
}

fn grad_case(net: &DualHeadNet<f64>, seed: u64) -> GradCase {
    let mut rng = rng_from_seed(!seed);
    let batch = rng.random_range(1..4);
    let m = rng.random_range(1..4);
    let d = net.embedding_dim();
    GradCase {
        inputs: (0..batch * net.input_shape().len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        batch,
        classes: (0..batch).map(|_| rng.random_range(0..net.num_classes())).collect(),
        targets: (0..batch)
            .map(|_| (0..m).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect())
            .collect(),
        weights: (0..batch)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|w| w / s).collect()
            })
            .collect(),
        alpha: rng.random_range(0.01..1.0),
    }
}

/// Cross-entropy plus weighted neighbor loss written out longhand.
fn objective(net: &DualHeadNet<f64>, case: &GradCase) -> f64 {
    let out = net.infer(&case.inputs, case.batch).unwrap();
    let (k, d) = (net.num_classes(), net.embedding_dim());
    let mut total = 0.0;
    for b in 0..case.batch {
        total -= out.probabilities[b * k + case.classes[b]].ln();
        let v = &out.embeddings[b * d..(b + 1) * d];
        for (u, w) in case.targets[b].iter().zip(&case.weights[b]) {
            total += case.alpha * w * v.iter().zip(u).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        }
    }
    total / case.batch as f64
}

fn analytic<T: Scalar>(net: &mut DualHeadNet<T>, case: &GradCase) -> Vec<Vec<f64>> {
    let inputs: Vec<T> = case.inputs.iter().map(|&x| T::of(x)).collect();
    let out = net.forward(&inputs, case.batch).unwrap();
    let d = net.embedding_dim();
    let mut emb = Vec::new();
    for b in 0..case.batch {
        let v: Vec<f64> = out.embeddings[b * d..(b + 1) * d].iter().map(|x| x.as_f64()).collect();
        let g = embedding_loss_grad(&v, &case.targets[b], &case.weights[b], case.alpha).unwrap();
        emb.extend(g.iter().map(|x| T::of(x / case.batch as f64)));
    }
    let mut grads = net.backward_all(&case.classes).unwrap();
    grads.add_assign(&net.backward_embedding_only(&emb).unwrap()).unwrap();
    grads.tensors.iter().map(|t| t.iter().map(|x| x.as_f64()).collect()).collect()
}

fn central_difference(net: &DualHeadNet<f64>, case: &GradCase) -> Vec<Vec<f64>> {
    let h = 1e-6;
    let mut probe = net.clone();
    let lens: Vec<usize> = net.parameters().iter().map(|t| t.len()).collect();
    lens.iter()
        .enumerate()
        .map(|(ti, &len)| {
            (0..len)
                .map(|j| {
                    let orig = probe.parameters()[ti][j];
                    probe.parameters_mut()[ti][j] = orig + h;
                    let up = objective(&probe, case);
                    probe.parameters_mut()[ti][j] = orig - h;
                    let down = objective(&probe, case);
                    probe.parameters_mut()[ti][j] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

fn kernel_errors() -> (f64, f64) {
    let mut rng = rng_from_seed(5);
    let h = 1e-5;
    let mut worst_emb: f64 = 0.0;
    let mut worst_ce: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..10);
        let m = rng.random_range(1..6);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let alpha = rng.random_range(0.001..2.0);
        let g = embedding_loss_grad(&v, &t, &w, alpha).unwrap();
        let fd: Vec<f64> = (0..d)
            .map(|i| {
                let (mut up, mut down) = (v.clone(), v.clone());
                up[i] += h;
                down[i] -= h;
                (embedding_loss(&up, &t, &w, alpha).unwrap() - embedding_loss(&down, &t, &w, alpha).unwrap()) / (2.0 * h)
            })
            .collect();
        worst_emb = worst_emb.max(relative_error(&[g], &[fd]));

        let k = rng.random_range(2..8);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = rng.random_range(0..k);
        let ce = |z: &[f64]| {
            let mut p = vec![0.0; z.len()];
            softmax(z, &mut p);
            -p[y].ln()
        };
        let mut p = vec![0.0; k];
        softmax(&z, &mut p);
        let g: Vec<f64> = (0..k).map(|i| p[i] - f64::from(u8::from(i == y))).collect();
        let fd: Vec<f64> = (0..k)
            .map(|i| {
                let (mut up, mut down) = (z.clone(), z.clone());
                up[i] += h;
                down[i] -= h;
                (ce(&up) - ce(&down)) / (2.0 * h)
            })
            .collect();
        worst_ce = worst_ce.max(relative_error(&[g], &[fd]));
    }
    (worst_emb, worst_ce)
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let nets = [
        ("F6", ImageShape::new(1, 3, 4), 3),
        ("C3k3-F5", ImageShape::new(1, 8, 8), 4),
        ("C2k3-C3k2-F4", ImageShape::new(2, 10, 10), 3),
    ];
    let mut kinds = BTreeSet::new();
    let (mut worst32, mut worst64, mut instances): (f64, f64, usize) = (0.0, 0.0, 0);
    for (n, &(arch, shape, k)) in nets.iter().enumerate() {
        for i in 0..40u64 {
            let seed = 1000 * n as u64 + i;
            let net = random_net(arch, shape, k, seed);
            kinds.extend(net.embedding_layer_kinds().into_iter().map(|k| format!("{k:?}")));
            let case = grad_case(&net, seed);
            let mut net32 = net.cast::<f32>();
            let oracle = net32.cast::<f64>();
            worst32 = worst32.max(relative_error(&analytic(&mut net32, &case), &central_difference(&oracle, &case)));
            let fd = central_difference(&net, &case);
            worst64 = worst64.max(relative_error(&analytic(&mut net.clone(), &case), &fd));
            instances += 1;
        }
    }
    let (emb, ce) = kernel_errors();
    let covered = [LayerKind::Conv, LayerKind::Dense, LayerKind::Relu, LayerKind::MaxPool]
        .iter()
        .all(|k| kinds.contains(&format!("{k:?}")));
    let secs = start.elapsed().as_secs_f64();
    ensure(
        instances >= 100 && covered && worst32 <= 1e-4 && worst64 <= 1e-6 && emb <= 1e-6 && ce <= 1e-6 && secs <= 30.0,
        format!(
            "{instances} nets, f32 {worst32:.1e} (≤1e-4), f64 {worst64:.1e}, loss kernels {emb:.1e}/{ce:.1e} (≤1e-6), layers {kinds:?}, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2-4. sampling and subspaces

fn dataset_with_classes(classes: &[usize]) -> Dataset {
    let k = classes.iter().max().map_or(0, |c| c + 1);
    let samples = classes.iter().map(|&c| (vec![0.0f32], c)).collect();
    Dataset::new(ImageShape::new(1, 1, 1), samples, (0..k).map(|c| c.to_string()).collect()).unwrap()
}

/// Lexicographically first m-subset of same-class instances with the least summed squared distance.
fn exhaustive_neighbors(vectors: &[Vec<f64>], classes: &[usize], i: usize, m: usize) -> Vec<usize> {
    let pool: Vec<usize> = (0..vectors.len()).filter(|&j| j != i && classes[j] == classes[i]).collect();
    let dist: Vec<f64> = pool
        .iter()
        .map(|&j| vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let n = pool.len();
    let mut idx: Vec<usize> = (0..m).collect();
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let total: f64 = idx.iter().map(|&p| dist[p]).sum();
        if total < best.0 {
            best = (total, idx.iter().map(|&p| pool[p]).collect());
        }
        let Some(pos) = (0..m).rev().find(|&p| idx[p] < n - m + p) else {
            return best.1;
        };
        idx[pos] += 1;
        for q in pos + 1..m {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

fn criterion_neighbors() -> Check {
    let mut rng = rng_from_seed(11);
    let mut compared = 0;
    for config in 0..200 {
        let n = rng.random_range(6..=50);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=5);
        let k = rng.random_range(1..=3);
        let integer = config % 4 == 0;
        let classes: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| if integer { f64::from(rng.random_range(-2i32..=2)) } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let table = ProjectionTable::from_vectors(Matrix::from_rows(&vectors).unwrap(), &dataset_with_classes(&classes)).unwrap();
        for i in 0..n {
            if classes.iter().filter(|&&c| c == classes[i]).count() <= m {
                continue;
            }
            let got = in_class_neighbors(&table, i, m).map_err(|e| format!("config {config}: {e}"))?;
            if got != exhaustive_neighbors(&vectors, &classes, i, m) {
                return Err(format!("config {config} instance {i}: {got:?} differs from exhaustive search"));
            }
            compared += 1;
        }
    }
    Ok(format!("200 configurations, {compared} instances match exactly"))
}

fn criterion_balance() -> Check {
    let mut rng = rng_from_seed(12);
    for map in 0..100 {
        let counts: Vec<usize> = (0..rng.random_range(2..7)).map(|_| rng.random_range(6..60)).collect();
        let m = rng.random_range(1..6);
        let mut classes: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        classes.shuffle(&mut rng);
        let dataset = dataset_with_classes(&classes);
        let vectors: Vec<Vec<f64>> = (0..classes.len()).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let table = ProjectionTable::from_vectors(Matrix::from_rows(&vectors).unwrap(), &dataset).unwrap();
        let plan = build_plan(&dataset.class_counts(), &mut rng).map_err(|e| e.to_string())?;
        let tuples = build_multitask_set(&dataset, &table, &plan, m, &mut rng).map_err(|e| e.to_string())?;
        let totals = class_totals(&tuples, counts.len());
        let max = *counts.iter().max().unwrap();
        if totals.iter().any(|&t| t != max) {
            return Err(format!("map {map} counts {counts:?}: totals {totals:?}"));
        }
    }
    Ok("100 class-count maps give equal per-class totals".into())
}

fn orthonormality_error(rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            worst = worst.max((dot(a, b) - f64::from(u8::from(i == j))).abs());
        }
    }
    worst
}

fn idempotence_error(bases: &SubspaceBases, v: &[f64]) -> f64 {
    (0..bases.num_labels())
        .map(|l| {
            let once = bases.project(v, l).unwrap();
            let twice = bases.project(&once, l).unwrap();
            once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn projection_table(vectors: &[Vec<f64>], classes: &[usize], lambda_map: &[usize]) -> ProjectionTable {
    let labels = lambda_map.iter().max().unwrap() + 1;
    let instances = classes
        .iter()
        .map(|&c| ds3_core::dataio::Instance { features: vec![0.0], class_id: c, label_id: lambda_map[c] })
        .collect();
    let dataset = Dataset::with_labels(
        ImageShape::new(1, 1, 1),
        instances,
        (0..lambda_map.len()).map(|c| c.to_string()).collect(),
        (0..labels).map(|l| l.to_string()).collect(),
        lambda_map.to_vec(),
    )
    .unwrap();
    ProjectionTable::from_vectors(Matrix::from_rows(vectors).unwrap(), &dataset).unwrap()
}

fn criterion_subspaces() -> Check {
    let mut rng = rng_from_seed(13);
    let (mut fixed_exact, mut ortho, mut idem): (bool, f64, f64) = (true, 0.0, 0.0);
    for _ in 0..100 {
        let d = rng.random_range(2..40);
        let labels = rng.random_range(1..5);
        let p = rng.random_range(1..10);
        if labels * p > d {
            continue;
        }
        let b = fixed_allocation(d, labels, p).map_err(|e| e.to_string())?;
        let rows = b.stacked();
        fixed_exact &= rows.iter().enumerate().all(|(i, x)| {
            rows.iter().enumerate().all(|(j, y)| dot(x, y) == f64::from(u8::from(i == j)))
        });
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        idem = idem.max(idempotence_error(&b, &v));
    }
    for seed in 0..100 {
        let d = rng.random_range(3..10);
        let labels = rng.random_range(1..4);
        let p = (d / labels).clamp(1, 2);
        if labels * p > d {
            continue;
        }
        let per_label = p + 2;
        let lambda_map: Vec<usize> = (0..labels * per_label).map(|c| c / per_label).collect();
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for c in 0..lambda_map.len() {
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            for _ in 0..12 {
                vectors.push(mean.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect());
                classes.push(c);
            }
        }
        let table = projection_table(&vectors, &classes, &lambda_map);
        let b = supervised_selection(&table, &lambda_map, p, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
        ortho = ortho.max(orthonormality_error(&b.stacked()));
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        idem = idem.max(idempotence_error(&b, &v));
    }

    // Label 0 separates its classes along e1, label 1 along e2.
    let mut axis: f64 = 0.0;
    for d in [2, 3, 5] {
        let lambda_map = [0, 0, 1, 1];
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for c in 0..4 {
            let mut center = vec![0.0; d];
            center[c / 2] = if c % 2 == 0 { -4.0 } else { 4.0 };
            for a in 0..d {
                for sign in [-1.0, 1.0] {
                    let mut v = center.clone();
                    v[a] += sign * (0.5 + 0.25 * a as f64);
                    vectors.push(v);
                    classes.push(c);
                }
            }
        }
        let table = projection_table(&vectors, &classes, &lambda_map);
        for seed in 0..8 {
            let b = supervised_selection(&table, &lambda_map, 1, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
            for label in 0..2 {
                for (i, x) in b.per_label[label][0].iter().enumerate() {
                    axis = axis.max((x - f64::from(u8::from(i == label))).abs());
                }
            }
        }
    }
    ensure(
        fixed_exact && ortho <= 1e-8 && idem <= 1e-10 && axis <= 1e-6,
        format!("fixed orthogonality exact {fixed_exact}, supervised {ortho:.1e} (≤1e-8), idempotence {idem:.1e} (≤1e-10), axis recovery {axis:.1e} (≤1e-6)"),
    )
}

// ---------------------------------------------------------------------------
// 5-6. reductions on the toy fixture

fn toy(labels: usize) -> Splits {
    generate(&FixtureSpec {
        labels,
        classes_per_label: 3,
        size: 6,
        train_per_class: 24,
        test_per_class: 10,
        noise: 1.0,
        ..Default::default()
    })
    .unwrap()
}

fn bits(net: &DualHeadNet) -> Vec<Vec<u32>> {
    net.parameters().iter().map(|t| t.iter().map(|x| x.to_bits()).collect()).collect()
}

/// Deep over-sampling written directly: raw neighbor targets, no subspaces.
fn direct_dos(train: &Dataset, arch: &ArchSpec, config: &TrainConfig) -> (DualHeadNet, Vec<f64>) {
    let mut net = DualHeadNet::new(
        arch,
        train.shape(),
        train.num_classes(),
        Init::KaimingUniform { seed: derive_seed(config.seed, Stream::Init) },
    )
    .unwrap();
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut sampling_rng = stream_rng(config.seed, Stream::Sampling);
    let opt = Optimizer::from(config);
    train_single_task(&mut net, train, config.init_epochs, &opt, &mut shuffle_rng, &mut DivergenceGuard::default()).unwrap();
    let d = net.embedding_dim();
    let mut losses = Vec::new();
    for _ in 0..config.rounds {
        let table = compute_projections(&net, train).unwrap();
        let plan = build_plan(&train.class_counts(), &mut sampling_rng).unwrap();
        let tuples = build_multitask_set(train, &table, &plan, config.neighbors, &mut sampling_rng).unwrap();
        for _ in 0..config.epochs_per_round {
            let mut order: Vec<usize> = (0..tuples.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(config.batch_size) {
                let rows: Vec<&MultiTaskTuple> = batch.iter().map(|&t| &tuples[t]).collect();
                let instances: Vec<usize> = rows.iter().map(|t| t.instance_index).collect();
                let classes: Vec<usize> = rows.iter().map(|t| t.class_id).collect();
                let out = net.forward(&batch_inputs::<f32>(train, &instances), batch.len()).unwrap();
                let scale = 1.0 / batch.len() as f64;
                let mut loss = 0.0;
                let mut grad = Vec::new();
                for (row, t) in out.embeddings.chunks_exact(d).zip(&rows) {
                    let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
                    loss += config.alpha * dos_embedding_loss(&v, &t.neighbor_targets, &t.weights).unwrap();
                    let mut g = vec![0.0; d];
                    for (n, w) in t.neighbor_targets.iter().zip(&t.weights) {
                        for ((gi, vi), ni) in g.iter_mut().zip(&v).zip(n) {
                            *gi += w * (vi - ni);
                        }
                    }
                    grad.extend(g.iter().map(|x| (x * 2.0 * config.alpha * scale) as f32));
                }
                losses.push(loss * scale);
                let mut grads = net.backward_all(&classes).unwrap();
                grads.add_assign(&net.backward_embedding_only(&grad).unwrap()).unwrap();
                net.sgd_step(&grads, config.learning_rate, config.momentum).unwrap();
            }
        }
    }
    (net, losses)
}

fn toy_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        rounds: 2,
        neighbors: 3,
        init_epochs: 2,
        epochs_per_round: 1,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

fn criterion_dos_reduction() -> Check {
    let s = toy(1);
    let arch: ArchSpec = "F16-F8".parse().unwrap();
    let config = TrainConfig { subspace_dim: Some(8), ..toy_config(Mode::Ds3Fixed, 3) };
    let (net, traces) = ds3_train(&s.train, &arch, &config, None, &mut ()).map_err(|e| e.to_string())?;
    let (direct, losses) = direct_dos(&s.train, &arch, &config);
    let ours: Vec<f64> = traces.iter().flat_map(|t| t.batch_embedding_losses.clone()).collect();
    if ours.len() != losses.len() {
        return Err(format!("{} batches against {} in the direct implementation", ours.len(), losses.len()));
    }
    let worst = ours.iter().zip(&losses).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let same = bits(&net) == bits(&direct);
    ensure(
        worst <= 1e-12 && same,
        format!("{} batches, max loss gap {worst:.1e} (≤1e-12), parameters identical after 2 rounds: {same}", ours.len()),
    )
}

#[derive(Default)]
struct Schedule {
    initial: Option<DualHeadNet>,
    sets: Vec<Vec<MultiTaskTuple>>,
    batches: Vec<(usize, Vec<usize>)>,
}

impl TrainObserver for Schedule {
    fn initialized(&mut self, net: &DualHeadNet) {
        self.initial = Some(net.clone());
    }
    fn round_set(&mut self, _round: usize, tuples: &[MultiTaskTuple], _targets: &[Vec<Vec<f64>>]) {
        self.sets.push(tuples.to_vec());
    }
    fn batch(&mut self, round: usize, tuples: &[usize]) {
        self.batches.push((round, tuples.to_vec()));
    }
}

fn criterion_zero_alpha() -> Check {
    let s = toy(2);
    let arch: ArchSpec = "F16-F8".parse().unwrap();
    let mut identical = 0;
    for mode in [Mode::Dos, Mode::Ds3Fixed, Mode::Ds3Supervised] {
        let config = TrainConfig { alpha: 0.0, subspace_dim: Some(2), ..toy_config(mode, 5) };
        let mut schedule = Schedule::default();
        let (net, _) = ds3_train(&s.train, &arch, &config, None, &mut schedule).map_err(|e| e.to_string())?;
        let mut replay = schedule.initial.clone().unwrap();
        for (round, batch) in &schedule.batches {
            let set = &schedule.sets[round - 1];
            let instances: Vec<usize> = batch.iter().map(|&t| set[t].instance_index).collect();
            let classes: Vec<usize> = batch.iter().map(|&t| set[t].class_id).collect();
            replay.forward(&batch_inputs::<f32>(&s.train, &instances), batch.len()).unwrap();
            let g = replay.backward_all(&classes).unwrap();
            replay.sgd_step(&g, config.learning_rate, config.momentum).unwrap();
        }
        if bits(&net) != bits(&replay) {
            return Err(format!("{mode}: parameters differ from the cross-entropy replay"));
        }
        identical += schedule.batches.len();
    }
    Ok(format!("dos, ds3-fixed and ds3-supervised replay bit-identically over {identical} batches"))
}

// ---------------------------------------------------------------------------
// 7-8. desk-scale imbalance experiment

struct Experiment {
    plain: Vec<RunOutcome>,
    dos: Vec<RunOutcome>,
    fixed: Vec<RunOutcome>,
    seconds: f64,
}

fn experiment() -> &'static Result<Experiment, String> {
    static CELL: OnceLock<Result<Experiment, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let s = generate(&FixtureSpec::default()).map_err(|e| e.to_string())?;
        let data = RunData::Inject { train: &s.train, test: &s.test, imbalance: ImbalanceSpec::default() };
        let arch: ArchSpec = "C6-C16-F120-F64".parse().unwrap();
        let options = RepetitionOptions { threads: ds3_core::trainer::thread_count(), ..Default::default() };
        let run = |mode| {
            let config = TrainConfig { mode, ..Default::default() };
            run_repetitions(&data, &arch, &config, 5, 0, &options).map_err(|e| format!("{mode}: {e}"))
        };
        Ok(Experiment {
            plain: run(Mode::Plain)?,
            dos: run(Mode::Dos)?,
            fixed: run(Mode::Ds3Fixed)?,
            seconds: start.elapsed().as_secs_f64(),
        })
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn minority_f1(runs: &[RunOutcome]) -> Vec<f64> {
    runs.iter().map(|o| o.metrics.minority_avg.f1).collect()
}

fn criterion_ordering() -> Check {
    let e = experiment().as_ref()?;
    let (plain, dos, fixed) = (minority_f1(&e.plain), minority_f1(&e.dos), minority_f1(&e.fixed));
    let wins = fixed.iter().zip(&plain).filter(|(f, p)| f >= p).count();
    let (mp, md, mf) = (mean(plain.iter().copied()), mean(dos.iter().copied()), mean(fixed.iter().copied()));
    ensure(
        wins >= 4 && mf - mp >= 0.02 && mf >= md - 0.01,
        format!(
            "minority F1 plain {mp:.3}, dos {md:.3}, ds3-fixed {mf:.3}; ds3-fixed ≥ plain on {wins}/5 seeds, gain {:.3} (≥0.02), gap to dos {:.3} (≥-0.01); {:.0}s",
            mf - mp,
            mf - md,
            e.seconds
        ),
    )
}

fn criterion_signature() -> Check {
    let e = experiment().as_ref()?;
    let m = |f: fn(&RunOutcome) -> f64| mean(e.plain.iter().map(f));
    let min_recall = m(|o| o.metrics.minority_avg.recall);
    let maj_recall = m(|o| o.metrics.majority_avg.recall);
    let min_precision = m(|o| o.metrics.minority_avg.precision);
    let maj_precision = m(|o| o.metrics.majority_avg.precision);
    ensure(
        maj_recall - min_recall >= 0.05 && min_precision > maj_precision,
        format!(
            "plain recall minority {min_recall:.3} vs majority {maj_recall:.3}; precision minority {min_precision:.3} vs majority {maj_precision:.3}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9-10. command line

fn ds3(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ds3"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ds3 {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion_sweep() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    ds3(&["sweep-alpha", "--runs", "1", "--out", path(dir.path())])?;
    let text = std::fs::read_to_string(dir.path().join("sweep.json")).map_err(|e| e.to_string())?;
    let sweep: AlphaSweep = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let expected = [0.0025, 0.005, 0.01, 0.02, 0.04];
    let csv = std::fs::read_to_string(dir.path().join("runs.csv")).map_err(|e| e.to_string())?;
    let runs = csv.lines().count() - 1;
    let spread = sweep.accuracy_spread();
    let accuracies: Vec<String> = sweep.cells.iter().map(|c| format!("{:.3}", c.accuracy.mean)).collect();
    ensure(
        sweep.alphas == expected && sweep.cells.len() == 5 && runs == 5 && spread <= 0.05,
        format!("{runs} runs over alphas {:?}, accuracy {accuracies:?}, spread {spread:.4} (≤0.05)", sweep.alphas),
    )
}

fn criterion_determinism() -> Check {
    let small = ["--arch", "F16-F8", "--T", "2", "--init-epochs", "1", "--epochs-per-round", "1", "--runs", "2", "--seed", "7"];
    let mut checked = Vec::new();
    for command in ["train", "compare"] {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut args = vec![command];
            args.extend(small);
            args.extend(["--out", path(dir.path())]);
            ds3(&args)?;
            outputs.push(std::fs::read(dir.path().join("runs.csv")).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{command}: runs.csv differs between identical invocations"));
        }
        checked.push(format!("{command} ({} bytes)", outputs[0].len()));
    }
    Ok(format!("byte-identical runs.csv for {}", checked.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", criterion_gradients),
        ("neighbor oracle equivalence", criterion_neighbors),
        ("class balance", criterion_balance),
        ("subspace properties", criterion_subspaces),
        ("over-sampling reduction", criterion_dos_reduction),
        ("zero-alpha degeneracy", criterion_zero_alpha),
        ("imbalance experiment ordering", criterion_ordering),
        ("imbalance signature", criterion_signature),
        ("alpha sensitivity sweep", criterion_sweep),
        ("determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {:>2} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
