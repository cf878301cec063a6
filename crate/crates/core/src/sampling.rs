//! In-class neighborhood sampling over deep projections and the class-balanced
//! multi-task training set built from it.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand_distr::{Distribution, Exp1};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::network::{DualHeadNet, Scalar};
use crate::rng::Rng;

/// Representations `f(x)` of every instance, aligned with dataset order.
#[derive(Debug, Clone)]
pub struct ProjectionTable {
    pub vectors: Matrix,
    /// Instance indices per class, ascending.
    pub class_index: Vec<Vec<usize>>,
    /// Instance indices per abstract label, ascending.
    pub label_index: Vec<Vec<usize>>,
    pub class_of: Vec<usize>,
}

impl ProjectionTable {
    /// Builds a table from precomputed vectors.
    pub fn from_vectors(vectors: Matrix, dataset: &Dataset) -> Result<Self> {
        if vectors.rows() != dataset.len() {
            return Err(Error::State(format!(
                "{} projections for {} instances",
                vectors.rows(),
                dataset.len()
            )));
        }
        let mut class_index = vec![Vec::new(); dataset.num_classes()];
        let mut label_index = vec![Vec::new(); dataset.num_labels()];
        let mut class_of = Vec::with_capacity(dataset.len());
        for (i, inst) in dataset.instances().iter().enumerate() {
            class_index[inst.class_id].push(i);
            label_index[inst.label_id].push(i);
            class_of.push(inst.class_id);
        }
        Ok(ProjectionTable {
            vectors,
            class_index,
            label_index,
            class_of,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }
}

const PROJECTION_CHUNK: usize = 256;

/// Converts dataset features to the network's scalar type, row-major.
pub fn batch_inputs<T: Scalar>(dataset: &Dataset, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * dataset.shape().len());
    for &i in indices {
        out.extend(
            dataset.instances()[i]
                .features
                .iter()
                .map(|&x| T::of(f64::from(x))),
        );
    }
    out
}

/// Runs the embedding stack over the whole dataset.
pub fn compute_projections<T: Scalar>(net: &DualHeadNet<T>, dataset: &Dataset) -> Result<ProjectionTable> {
    if net.input_shape() != dataset.shape() {
        return Err(Error::State(format!(
            "network expects {} inputs, dataset has {}",
            net.input_shape(),
            dataset.shape()
        )));
    }
    let d = net.embedding_dim();
    let mut data = Vec::with_capacity(dataset.len() * d);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(PROJECTION_CHUNK) {
        let out = net.infer(&batch_inputs(dataset, chunk), chunk.len())?;
        data.extend(out.embeddings.iter().map(|x| x.as_f64()));
    }
    let vectors = Matrix::from_vec(dataset.len(), d, data)
        .map_err(|e| Error::Numeric(format!("projection produced invalid values: {e}")))?;
    ProjectionTable::from_vectors(vectors, dataset)
}

/// The `m` same-class instances nearest to instance `i` (itself excluded).
///
/// Minimizing the summed squared distance over m-subsets picks the m
/// individually nearest points; ties go to the lower index. Returned in
/// ascending index order.
pub fn in_class_neighbors(table: &ProjectionTable, i: usize, m: usize) -> Result<Vec<usize>> {
    let class = *table
        .class_of
        .get(i)
        .ok_or_else(|| Error::invalid(format!("instance {i} out of range")))?;
    let members = &table.class_index[class];
    if members.len() < m + 1 {
        return Err(Error::InsufficientClassSize {
            class_id: class,
            size: members.len(),
            required: m + 1,
        });
    }
    let query = table.vector(i);
    let mut scored: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (squared_distance(query, table.vector(j)), j))
        .collect();
    if m < scored.len() {
        scored.select_nth_unstable_by(m, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(m);
    }
    let mut out: Vec<usize> = scored.into_iter().map(|(_, j)| j).collect();
    out.sort_unstable();
    Ok(out)
}

/// Flat-Dirichlet weights: i.i.d. unit exponentials normalized to sum 1.
pub fn random_weights(m: usize, rng: &mut Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / m as f64);
    }
    w
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPlan {
    pub count: usize,
    /// Tuples every instance of the class emits.
    pub base: usize,
    /// Positions (within the class, in dataset order) that emit one extra tuple.
    pub extra: BTreeSet<usize>,
}

impl ClassPlan {
    pub fn replicas(&self, position: usize) -> usize {
        self.base + usize::from(self.extra.contains(&position))
    }

    pub fn total(&self) -> usize {
        self.base * self.count + self.extra.len()
    }
}

/// Per-class resampling sizes that bring every class to the largest count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResamplingPlan {
    pub target: usize,
    pub classes: Vec<ClassPlan>,
}

pub fn build_plan(class_counts: &[usize], rng: &mut Rng) -> Result<ResamplingPlan> {
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::InsufficientClassSize {
            class_id: c,
            size: 0,
            required: 1,
        });
    }
    let target = class_counts.iter().copied().max().unwrap_or(0);
    let classes = class_counts
        .iter()
        .map(|&count| {
            let base = target / count;
            let remainder = target - base * count;
            let extra = index::sample(rng, count, remainder).into_iter().collect();
            ClassPlan { count, base, extra }
        })
        .collect();
    Ok(ResamplingPlan { target, classes })
}

/// One row of the multi-task training set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskTuple {
    pub instance_index: usize,
    pub class_id: usize,
    pub label_id: usize,
    pub neighbor_indices: Vec<usize>,
    pub neighbor_targets: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Emits `plan`-many tuples per instance, in (instance, replica) order.
pub fn build_multitask_set(
    dataset: &Dataset,
    table: &ProjectionTable,
    plan: &ResamplingPlan,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<MultiTaskTuple>> {
    if m == 0 {
        return Err(Error::invalid("neighborhood size must be at least 1"));
    }
    if table.len() != dataset.len() {
        return Err(Error::State("projection table does not match dataset".into()));
    }
    let counts = dataset.class_counts();
    if plan.classes.len() != counts.len()
        || plan.classes.iter().zip(&counts).any(|(p, &n)| p.count != n)
    {
        return Err(Error::invalid("resampling plan does not match class counts"));
    }
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < m + 1) {
        return Err(Error::InsufficientClassSize {
            class_id: c,
            size: n,
            required: m + 1,
        });
    }

    let mut position = vec![0usize; counts.len()];
    let mut out = Vec::with_capacity(plan.target * counts.len());
    for (i, inst) in dataset.instances().iter().enumerate() {
        let c = inst.class_id;
        let replicas = plan.classes[c].replicas(position[c]);
        position[c] += 1;
        if replicas == 0 {
            continue;
        }
        let neighbors = in_class_neighbors(table, i, m)?;
        let targets: Vec<Vec<f64>> = neighbors.iter().map(|&j| table.vector(j).to_vec()).collect();
        for _ in 0..replicas {
            out.push(MultiTaskTuple {
                instance_index: i,
                class_id: c,
                label_id: inst.label_id,
                neighbor_indices: neighbors.clone(),
                neighbor_targets: targets.clone(),
                weights: random_weights(m, rng),
            });
        }
    }
    Ok(out)
}

/// Tuples per class.
pub fn class_totals(tuples: &[MultiTaskTuple], classes: usize) -> Vec<usize> {
    let mut totals = vec![0; classes];
    for t in tuples {
        totals[t.class_id] += 1;
    }
    totals
}

/// Debug dump: `instance,class,label,neighbors(;-joined),weights(;-joined)`.
pub fn write_multitask_csv(tuples: &[MultiTaskTuple], mut w: impl Write) -> Result<()> {
    writeln!(w, "instance,class,label,neighbors,weights")?;
    for t in tuples {
        let n: Vec<String> = t.neighbor_indices.iter().map(usize::to_string).collect();
        let ws: Vec<String> = t.weights.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            t.instance_index,
            t.class_id,
            t.label_id,
            n.join(";"),
            ws.join(";")
        )?;
    }
    Ok(())
}
