//! Synthetic class-conditional Gaussian image data.
//!
//! Every class has a smooth mean image built from a template shared by its
//! abstract label plus a class-specific template; instances add i.i.d.
//! pixel noise. Pixels are rescaled to unit variance so `noise` only sets
//! the signal-to-noise ratio. Used for desk-scale experiments and tests.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, ImageShape, Instance};
use crate::error::Result;
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub labels: usize,
    pub classes_per_label: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Weight of the label-shared template in each class mean.
    pub label_weight: f32,
    /// Weight of the class-specific template in each class mean.
    pub class_weight: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            labels: 2,
            classes_per_label: 5,
            size: 16,
            train_per_class: 300,
            test_per_class: 100,
            label_weight: 1.0,
            class_weight: 0.5,
            noise: 3.0,
            seed: 2024,
        }
    }
}

impl FixtureSpec {
    pub fn num_classes(&self) -> usize {
        self.labels * self.classes_per_label
    }
}

/// A train/test pair sharing class names and the label map.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Smooth zero-mean, unit-RMS pattern: a sum of random low-frequency waves.
fn smooth_template(size: usize, rng: &mut Rng) -> Vec<f32> {
    let mut img = vec![0.0f64; size * size];
    for _ in 0..4 {
        let fx: f64 = rng.random_range(0.5..2.5);
        let fy: f64 = rng.random_range(0.5..2.5);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.5..1.0);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                img[y * size + x] +=
                    amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            }
        }
    }
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    img.iter_mut().for_each(|p| *p -= mean);
    let rms = (img.iter().map(|p| p * p).sum::<f64>() / img.len() as f64).sqrt();
    img.iter().map(|p| (p / rms) as f32).collect()
}

pub fn class_name(label: usize, class: usize) -> String {
    format!("l{label}c{class}")
}

pub fn label_name(label: usize) -> String {
    format!("group{label}")
}

pub fn generate(spec: &FixtureSpec) -> Result<Splits> {
    let mut rng = stream_rng(spec.seed, Stream::Fixture);
    let shape = ImageShape::new(1, spec.size, spec.size);
    let label_templates: Vec<Vec<f32>> = (0..spec.labels)
        .map(|_| smooth_template(spec.size, &mut rng))
        .collect();
    let mut means = Vec::new();
    let mut class_names = Vec::new();
    let mut lambda_map = Vec::new();
    for (l, lt) in label_templates.iter().enumerate() {
        for c in 0..spec.classes_per_label {
            let ct = smooth_template(spec.size, &mut rng);
            means.push(
                lt.iter()
                    .zip(&ct)
                    .map(|(a, b)| spec.label_weight * a + spec.class_weight * b)
                    .collect::<Vec<f32>>(),
            );
            class_names.push(class_name(l, c));
            lambda_map.push(l);
        }
    }
    let label_names: Vec<String> = (0..spec.labels).map(label_name).collect();

    let scale = 1.0
        / (spec.label_weight.powi(2) + spec.class_weight.powi(2) + spec.noise.powi(2))
            .sqrt()
            .max(f32::MIN_POSITIVE);
    let mut draw = |per_class: usize| -> Vec<Instance> {
        let mut out = Vec::with_capacity(per_class * means.len());
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                let features = mean
                    .iter()
                    .map(|&m| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        (m + spec.noise * z) * scale
                    })
                    .collect();
                out.push(Instance {
                    features,
                    class_id: c,
                    label_id: lambda_map[c],
                });
            }
        }
        out
    };
    let train = draw(spec.train_per_class);
    let test = draw(spec.test_per_class);
    Ok(Splits {
        train: Dataset::with_labels(
            shape,
            train,
            class_names.clone(),
            label_names.clone(),
            lambda_map.clone(),
        )?,
        test: Dataset::with_labels(shape, test, class_names, label_names, lambda_map)?,
    })
}
