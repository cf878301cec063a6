//! Dataset manifests and the built-in fixture.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ds3_core::dataio::{assign_labels, load_csv, Dataset, ImageShape, ImbalanceSpec};
use ds3_core::fixture::{generate, FixtureSpec};
use ds3_core::trainer::RunData;

/// Written by `prepare`; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: PathBuf,
    pub test: PathBuf,
    pub format: String,
    pub shape: String,
    /// Class id (as text) -> abstract label name.
    pub label_rules: BTreeMap<String, String>,
    pub minority_class_ids: Vec<usize>,
    pub seed: u64,
    pub imbalance: ImbalanceSpec,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Where training data comes from.
pub enum Source {
    /// Balanced fixture; every run injects its own imbalance.
    Fixture { train: Dataset, test: Dataset },
    Prepared {
        train: Dataset,
        test: Dataset,
        minority: BTreeSet<usize>,
    },
}

impl Source {
    pub fn open(spec: &str) -> Result<Source> {
        if spec == "fixture" {
            let s = generate(&FixtureSpec::default())?;
            return Ok(Source::Fixture {
                train: s.train,
                test: s.test,
            });
        }
        let path = Path::new(spec);
        let manifest = Manifest::read(path)?;
        if manifest.format != "csv" {
            bail!("manifest format '{}' is not supported", manifest.format);
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let shape: ImageShape = manifest.shape.parse()?;
        let train = load_csv(&base.join(&manifest.dataset), Some(shape))?;
        let train = assign_labels(&train, &manifest.label_rules)?;
        let test = load_csv(&base.join(&manifest.test), Some(shape))?;
        Ok(Source::Prepared {
            train,
            test,
            minority: manifest.minority_class_ids.into_iter().collect(),
        })
    }

    pub fn run_data(&self) -> RunData<'_> {
        match self {
            Source::Fixture { train, test } => RunData::Inject {
                train,
                test,
                imbalance: ImbalanceSpec::default(),
            },
            Source::Prepared {
                train,
                test,
                minority,
            } => RunData::Prepared {
                train,
                test,
                minority,
            },
        }
    }

    pub fn test(&self) -> &Dataset {
        match self {
            Source::Fixture { test, .. } | Source::Prepared { test, .. } => test,
        }
    }

    /// Minority classes seen by the run with the given seed.
    pub fn minority_for(&self, seed: u64) -> Result<BTreeSet<usize>> {
        match self {
            Source::Fixture { train, .. } => {
                Ok(ds3_core::dataio::inject_imbalance(train, &ImbalanceSpec::with_seed(seed))?.1)
            }
            Source::Prepared { minority, .. } => Ok(minority.clone()),
        }
    }
}
