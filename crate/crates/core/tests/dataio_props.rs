use std::collections::BTreeSet;

use ds3_core::dataio::{
    assign_labels, inject_imbalance, read_csv, write_csv, Dataset, ImageShape, ImbalanceSpec,
};
use ds3_core::rng::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;

/// `per_class` instances of every class; the features encode (class, position).
fn labeled(classes_per_label: &[usize], per_class: usize) -> Dataset {
    let k: usize = classes_per_label.iter().sum();
    let samples = (0..k)
        .flat_map(|c| (0..per_class).map(move |i| (vec![c as f32, i as f32], c)))
        .collect();
    let plain = Dataset::new(ImageShape::new(1, 1, 2), samples, (0..k).map(|c| c.to_string()).collect())
        .unwrap();
    let mut rules = std::collections::BTreeMap::new();
    let mut c = 0;
    for (l, &n) in classes_per_label.iter().enumerate() {
        for _ in 0..n {
            rules.insert(c.to_string(), format!("label{l}"));
            c += 1;
        }
    }
    assign_labels(&plain, &rules).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn injection_follows_the_protocol(
        per_label in prop::collection::vec(2usize..7, 1..4),
        per_class in 5usize..60,
        seed in any::<u64>(),
    ) {
        let dataset = labeled(&per_label, per_class);
        let spec = ImbalanceSpec::with_seed(seed);
        let (reduced, minority) = inject_imbalance(&dataset, &spec).unwrap();

        // floor(half) of each label's classes, at least one
        for classes in dataset.classes_by_label() {
            let picked = classes.iter().filter(|c| minority.contains(c)).count();
            prop_assert_eq!(picked, (classes.len() / 2).max(1));
        }
        let expected_kept = (per_class as f64 * 0.2 - 1e-9).ceil() as usize;
        let counts = reduced.class_counts();
        for (c, &n) in counts.iter().enumerate() {
            prop_assert_eq!(n, if minority.contains(&c) { expected_kept } else { per_class });
        }

        // The result is a subset of the input, with order preserved.
        let original: Vec<(usize, u32)> = dataset
            .instances()
            .iter()
            .map(|i| (i.class_id, i.features[1] as u32))
            .collect();
        let mut cursor = original.iter();
        for inst in reduced.instances() {
            let key = (inst.class_id, inst.features[1] as u32);
            prop_assert!(cursor.any(|k| *k == key), "instance {:?} not in order", key);
            prop_assert_eq!(inst.label_id, dataset.lambda_map()[inst.class_id]);
        }

        let again = inject_imbalance(&dataset, &spec).unwrap();
        prop_assert_eq!(&again.0, &reduced);
        prop_assert_eq!(&again.1, &minority);
    }

    #[test]
    fn csv_round_trip_is_bit_exact(rows in 1usize..20, width in 1usize..12, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let samples: Vec<(Vec<f32>, usize)> = (0..rows)
            .map(|i| {
                let f = (0..width)
                    .map(|_| match rng.random_range(0..4) {
                        0 => f32::from_bits(rng.random::<u32>() & 0x7F7F_FFFF),
                        1 => -rng.random::<f32>() * 1e-30,
                        2 => rng.random_range(-1e6f32..1e6),
                        _ => 0.0,
                    })
                    .collect();
                (f, i % 3)
            })
            .collect();
        let k = samples.iter().map(|s| s.1).max().unwrap() + 1;
        let shape = ImageShape::new(1, 1, width);
        let dataset = Dataset::new(shape, samples, (0..k).map(|c| c.to_string()).collect()).unwrap();
        let mut buf = Vec::new();
        write_csv(&dataset, &mut buf).unwrap();
        let back = read_csv(&buf[..], "memory", Some(shape)).unwrap();
        for (a, b) in dataset.instances().iter().zip(back.instances()) {
            prop_assert_eq!(a.class_id, b.class_id);
            let bits_a: Vec<u32> = a.features.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.features.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}

#[test]
fn seeds_vary_the_minority_choice() {
    let dataset = labeled(&[5, 5], 20);
    let sets: BTreeSet<Vec<usize>> = (0..20)
        .map(|s| {
            inject_imbalance(&dataset, &ImbalanceSpec::with_seed(s))
                .unwrap()
                .1
                .into_iter()
                .collect()
        })
        .collect();
    assert!(sets.len() > 5, "only {} distinct minority sets", sets.len());
}

#[test]
fn rejects_out_of_range_fractions() {
    let dataset = labeled(&[4], 10);
    for (fraction, removal) in [(0.0, 0.8), (0.5, 1.0), (1.0, 0.5), (0.5, -0.1)] {
        let spec = ImbalanceSpec {
            minority_class_fraction_per_label: fraction,
            removal_fraction: removal,
            seed: 0,
        };
        assert!(inject_imbalance(&dataset, &spec).is_err());
    }
}
