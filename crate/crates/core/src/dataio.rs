//! Datasets on disk and in memory: IDX and CSV loading, abstract-label
//! assignment and artificial imbalance injection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Channels x height x width of every instance in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `1 x s x s` when `n` is a perfect square, otherwise `1 x 1 x n`.
    pub fn infer(n: usize) -> Self {
        let s = (n as f64).sqrt().round() as usize;
        if s * s == n {
            ImageShape::new(1, s, s)
        } else {
            ImageShape::new(1, 1, n)
        }
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for ImageShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad shape '{s}', expected CxHxW")))?;
        match dims[..] {
            [c, h, w] if c * h * w > 0 => Ok(ImageShape::new(c, h, w)),
            _ => Err(Error::invalid(format!("bad shape '{s}', expected CxHxW"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f32>,
    pub class_id: usize,
    pub label_id: usize,
}

/// Labeled image instances plus the class -> abstract-label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    instances: Vec<Instance>,
    class_names: Vec<String>,
    label_names: Vec<String>,
    lambda_map: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset with every class under a single label named `all`.
    pub fn new(
        shape: ImageShape,
        samples: Vec<(Vec<f32>, usize)>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let k = class_names.len();
        let instances = samples
            .into_iter()
            .map(|(features, class_id)| Instance {
                features,
                class_id,
                label_id: 0,
            })
            .collect();
        Dataset::with_labels(
            shape,
            instances,
            class_names,
            vec!["all".to_string()],
            vec![0; k],
        )
    }

    pub fn with_labels(
        shape: ImageShape,
        mut instances: Vec<Instance>,
        class_names: Vec<String>,
        label_names: Vec<String>,
        lambda_map: Vec<usize>,
    ) -> Result<Self> {
        if lambda_map.len() != class_names.len() {
            return Err(Error::invalid("label map must cover every class"));
        }
        if let Some(&bad) = lambda_map.iter().find(|&&l| l >= label_names.len()) {
            return Err(Error::invalid(format!("label id {bad} out of range")));
        }
        let mut counts = vec![0usize; class_names.len()];
        for (i, inst) in instances.iter_mut().enumerate() {
            if inst.features.len() != shape.len() {
                return Err(Error::invalid(format!(
                    "instance {i} has {} features, shape {shape} needs {}",
                    inst.features.len(),
                    shape.len()
                )));
            }
            if inst.class_id >= class_names.len() {
                return Err(Error::invalid(format!(
                    "instance {i} has class {} outside [0, {})",
                    inst.class_id,
                    class_names.len()
                )));
            }
            counts[inst.class_id] += 1;
            inst.label_id = lambda_map[inst.class_id];
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "class {empty} ({}) has no instances",
                class_names[empty]
            )));
        }
        Ok(Dataset {
            shape,
            instances,
            class_names,
            label_names,
            lambda_map,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn lambda_map(&self) -> &[usize] {
        &self.lambda_map
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for inst in &self.instances {
            counts[inst.class_id] += 1;
        }
        counts
    }

    /// Classes under each label, in class-id order.
    pub fn classes_by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_labels()];
        for (c, &l) in self.lambda_map.iter().enumerate() {
            out[l].push(c);
        }
        out
    }

    /// Keeps instances for which `keep` returns true; fails if a class empties.
    pub fn filter(&self, mut keep: impl FnMut(usize, &Instance) -> bool) -> Result<Dataset> {
        let instances = self
            .instances
            .iter()
            .enumerate()
            .filter(|(i, inst)| keep(*i, inst))
            .map(|(_, inst)| inst.clone())
            .collect();
        Dataset::with_labels(
            self.shape,
            instances,
            self.class_names.clone(),
            self.label_names.clone(),
            self.lambda_map.clone(),
        )
    }

    /// Same instances, reordered by `order` (a permutation of indices).
    pub fn permuted(&self, order: &[usize]) -> Result<Dataset> {
        let instances = order.iter().map(|&i| self.instances[i].clone()).collect();
        Dataset::with_labels(
            self.shape,
            instances,
            self.class_names.clone(),
            self.label_names.clone(),
            self.lambda_map.clone(),
        )
    }
}

/// On-disk dataset format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Idx,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Format::Idx),
            "csv" => Ok(Format::Csv),
            other => Err(Error::invalid(format!("unknown format '{other}'"))),
        }
    }
}

/// Where a split lives. IDX needs an image file and a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

impl DataSource {
    /// Parses `path` for CSV or `images,labels` for IDX.
    pub fn parse(format: Format, spec: &str) -> Result<Self> {
        match format {
            Format::Csv => Ok(DataSource::Csv { path: spec.into() }),
            Format::Idx => match spec.split_once(',') {
                Some((images, labels)) => Ok(DataSource::Idx {
                    images: images.into(),
                    labels: labels.into(),
                }),
                None => Err(Error::invalid(
                    "IDX source needs 'IMAGES,LABELS' file paths",
                )),
            },
        }
    }
}

pub fn load_dataset(source: &DataSource, shape: Option<ImageShape>) -> Result<Dataset> {
    match source {
        DataSource::Idx { images, labels } => load_idx(images, labels),
        DataSource::Csv { path } => load_csv(path, shape),
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{} byte {offset}", path.display()),
        message: message.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, offset, "unexpected end of file in header"))
}

/// Parses an IDX image/label pair. Pixels are scaled to [0, 1].
pub fn parse_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    image_path: &Path,
    label_path: &Path,
) -> Result<Dataset> {
    let magic = read_be_u32(image_bytes, 0, image_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(
            image_path,
            0,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let n = read_be_u32(image_bytes, 4, image_path)? as usize;
    let rows = read_be_u32(image_bytes, 8, image_path)? as usize;
    let cols = read_be_u32(image_bytes, 12, image_path)? as usize;
    let pixels = rows * cols;
    let body = &image_bytes[16..];
    if body.len() != n * pixels {
        return Err(idx_err(
            image_path,
            16 + body.len().min(n * pixels),
            format!(
                "expected {} pixel bytes for {n} images of {rows}x{cols}, found {}",
                n * pixels,
                body.len()
            ),
        ));
    }

    let magic = read_be_u32(label_bytes, 0, label_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(
            label_path,
            0,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let n_labels = read_be_u32(label_bytes, 4, label_path)? as usize;
    let labels = &label_bytes[8..];
    if n_labels != n || labels.len() != n {
        return Err(idx_err(
            label_path,
            8 + labels.len().min(n),
            format!("expected {n} labels, header says {n_labels}, found {}", labels.len()),
        ));
    }

    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let samples = body
        .chunks_exact(pixels.max(1))
        .zip(labels)
        .map(|(img, &l)| {
            (
                img.iter().map(|&p| f32::from(p) / 255.0).collect(),
                l as usize,
            )
        })
        .collect();
    let class_names = (0..k).map(|c| c.to_string()).collect();
    Dataset::new(ImageShape::new(1, rows, cols), samples, class_names)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;
    parse_idx(&image_bytes, &label_bytes, images, labels)
}

/// Reads `label,f0,...,fN` CSV. Classes are named by their integer ids.
pub fn read_csv(reader: impl BufRead, origin: &str, shape: Option<ImageShape>) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        location: format!("{origin} line {line}"),
        message,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".into()))??;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(parse_err(
            1,
            "header must start with 'label' followed by feature columns".into(),
        ));
    }
    let width = columns.len() - 1;
    let shape = shape.unwrap_or_else(|| ImageShape::infer(width));
    if shape.len() != width {
        return Err(parse_err(
            1,
            format!("{width} feature columns do not fit shape {shape}"),
        ));
    }

    let mut samples = Vec::new();
    let mut k = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let class: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, "class column is not a non-negative integer".into()))?;
        let features = fields
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, format!("bad feature value: {e}")))?;
        if features.len() != width {
            return Err(parse_err(
                lineno,
                format!("row has {} features, header has {width}", features.len()),
            ));
        }
        k = k.max(class + 1);
        samples.push((features, class));
    }
    let class_names = (0..k).map(|c| c.to_string()).collect();
    Dataset::new(shape, samples, class_names)
}

pub fn load_csv(path: &Path, shape: Option<ImageShape>) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    read_csv(BufReader::new(file), &path.display().to_string(), shape)
}

/// Writes CSV using shortest round-trip float formatting, so reloading is bit-exact.
pub fn write_csv(dataset: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    write!(w, "label")?;
    for j in 0..dataset.shape().len() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for inst in dataset.instances() {
        write!(w, "{}", inst.class_id)?;
        for x in &inst.features {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_csv(dataset, fs::File::create(path)?)
}

/// Rebuilds the class -> label map from `rules` (class name -> label name).
///
/// Label ids follow first appearance when walking classes in id order.
pub fn assign_labels(dataset: &Dataset, rules: &BTreeMap<String, String>) -> Result<Dataset> {
    let known: BTreeSet<&str> = dataset.class_names().iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    for name in dataset.class_names() {
        if !seen.insert(name.as_str()) {
            return Err(Error::LabelingRule(format!("duplicated class '{name}'")));
        }
    }
    let unknown: Vec<&str> = rules
        .keys()
        .map(String::as_str)
        .filter(|c| !known.contains(c))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::LabelingRule(format!(
            "rules name unknown classes: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<&str> = dataset
        .class_names()
        .iter()
        .map(String::as_str)
        .filter(|c| !rules.contains_key(*c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::LabelingRule(format!(
            "no label rule for classes: {}",
            missing.join(", ")
        )));
    }

    let mut label_names: Vec<String> = Vec::new();
    let lambda_map = dataset
        .class_names()
        .iter()
        .map(|c| {
            let label = &rules[c];
            match label_names.iter().position(|l| l == label) {
                Some(id) => id,
                None => {
                    label_names.push(label.clone());
                    label_names.len() - 1
                }
            }
        })
        .collect();
    Dataset::with_labels(
        dataset.shape(),
        dataset.instances().to_vec(),
        dataset.class_names().to_vec(),
        label_names,
        lambda_map,
    )
}

/// Reads a JSON object mapping class name to label name.
pub fn load_label_rules(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Odd/even rule for classes named by digits.
pub fn parity_rules(dataset: &Dataset) -> Result<BTreeMap<String, String>> {
    dataset
        .class_names()
        .iter()
        .map(|name| {
            let digit: u64 = name.parse().map_err(|_| {
                Error::LabelingRule(format!("class '{name}' is not a digit"))
            })?;
            let label = if digit % 2 == 0 { "even" } else { "odd" };
            Ok((name.clone(), label.to_string()))
        })
        .collect()
}

/// Artificial imbalance protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub minority_class_fraction_per_label: f64,
    pub removal_fraction: f64,
    pub seed: u64,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        ImbalanceSpec {
            minority_class_fraction_per_label: 0.5,
            removal_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ImbalanceSpec {
    pub fn with_seed(seed: u64) -> Self {
        ImbalanceSpec {
            seed,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.minority_class_fraction_per_label) || !open_unit(self.removal_fraction)
        {
            return Err(Error::ImbalanceSpec(format!(
                "fractions must lie in (0, 1), got minority {} and removal {}",
                self.minority_class_fraction_per_label, self.removal_fraction
            )));
        }
        Ok(())
    }

    /// Minority classes to draw from a label with `classes` classes.
    pub fn minority_count(&self, classes: usize) -> usize {
        ((self.minority_class_fraction_per_label * classes as f64 + 1e-9).floor() as usize).max(1)
    }

    /// Instances kept from a minority class of `count` instances.
    pub fn retained_count(&self, count: usize) -> usize {
        // the epsilon absorbs representation error, e.g. (1 - 0.8) * 100
        ((1.0 - self.removal_fraction) * count as f64 - 1e-9).ceil() as usize
    }
}

/// Picks minority classes per label and subsamples them.
///
/// Returns the reduced dataset and the minority class ids.
pub fn inject_imbalance(
    dataset: &Dataset,
    spec: &ImbalanceSpec,
) -> Result<(Dataset, BTreeSet<usize>)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Minority);
    let mut minority = BTreeSet::new();
    for (label, classes) in dataset.classes_by_label().iter().enumerate() {
        if classes.len() < 2 {
            return Err(Error::ImbalanceSpec(format!(
                "label '{}' has {} class(es); at least 2 are needed",
                dataset.label_names()[label],
                classes.len()
            )));
        }
        let mut shuffled = classes.clone();
        shuffled.shuffle(&mut rng);
        minority.extend(shuffled.into_iter().take(spec.minority_count(classes.len())));
    }

    let counts = dataset.class_counts();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, inst) in dataset.instances().iter().enumerate() {
        members[inst.class_id].push(i);
    }
    let mut keep = vec![true; dataset.len()];
    for &c in &minority {
        let retained = spec.retained_count(counts[c]);
        if retained == 0 {
            return Err(Error::ImbalanceSpec(format!(
                "class {c} would be left empty"
            )));
        }
        let chosen: BTreeSet<usize> = index::sample(&mut rng, counts[c], retained)
            .into_iter()
            .collect();
        for (pos, &i) in members[c].iter().enumerate() {
            keep[i] = chosen.contains(&pos);
        }
    }
    let reduced = dataset.filter(|i, _| keep[i])?;
    Ok((reduced, minority))
}
