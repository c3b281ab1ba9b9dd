use proptest::prelude::*;
use toast_core::data::{
    attention_focus_score, decode_dataset, encode_dataset, gen_cluttered, load_dataset,
    save_dataset, Dataset, LabeledImage, SyntheticCfg,
};
use toast_core::{Error, Tensor};

fn small(seed: u64) -> SyntheticCfg {
    SyntheticCfg {
        n_images: 60,
        seed,
        ..SyntheticCfg::default()
    }
}

#[test]
fn masks_mark_exactly_the_signal_patches() {
    for cfg in [
        small(0),
        SyntheticCfg::generic(),
        SyntheticCfg {
            signal_patch_count: 1,
            ..small(5)
        },
    ] {
        let ds = gen_cluttered(&SyntheticCfg {
            n_images: 40,
            ..cfg.clone()
        })
        .unwrap();
        for im in &ds.images {
            let mask = im.mask.as_ref().unwrap();
            assert_eq!(mask.len(), cfg.grid * cfg.grid);
            assert_eq!(mask.iter().filter(|&&m| m).count(), cfg.signal_patch_count);
        }
    }
}

#[test]
fn same_seed_same_dataset() {
    let a = gen_cluttered(&small(9)).unwrap();
    let b = gen_cluttered(&small(9)).unwrap();
    assert!(a.bits_eq(&b));
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    let c = gen_cluttered(&small(10)).unwrap();
    assert!(!a.bits_eq(&c));
}

#[test]
fn labels_are_balanced_and_pixels_bounded() {
    let ds = gen_cluttered(&SyntheticCfg {
        n_images: 57,
        noise_level: 0.5,
        ..small(1)
    })
    .unwrap();
    let counts = ds.class_counts();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    for im in &ds.images {
        assert!(im.label < ds.n_classes);
        assert!(im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(im.pixels.shape(), &[1, 32, 32]);
    }
}

#[test]
fn patches_outside_the_layout_are_background() {
    let cfg = SyntheticCfg {
        noise_level: 0.0,
        n_images: 10,
        ..small(2)
    };
    let ds = gen_cluttered(&cfg).unwrap();
    for im in &ds.images {
        let px = im.pixels.data();
        let blank = (0..cfg.grid * cfg.grid)
            .filter(|&cell| {
                let (gy, gx) = (cell / cfg.grid, cell % cfg.grid);
                (0..cfg.patch_side).all(|y| {
                    (0..cfg.patch_side).all(|x| {
                        px[(gy * cfg.patch_side + y) * 32 + gx * cfg.patch_side + x] == 0.5
                    })
                })
            })
            .count();
        assert_eq!(
            blank,
            cfg.grid * cfg.grid - cfg.signal_patch_count - cfg.distractor_count
        );
    }
}

/// Multinomial logistic regression on raw pixels by full-batch gradient
/// descent; returns training accuracy.
fn pixel_probe_accuracy(ds: &Dataset, steps: usize, lr: f64) -> f64 {
    let k = ds.n_classes;
    let dim = ds.images[0].pixels.len();
    let xs: Vec<Vec<f64>> = ds
        .images
        .iter()
        .map(|im| im.pixels.data().iter().map(|&v| v as f64 - 0.5).collect())
        .collect();
    let mut w = vec![vec![0.0; dim + 1]; k];
    let score = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[dim] + wc[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; dim + 1]; k];
        for (x, im) in xs.iter().zip(&ds.images) {
            let s = score(&w, x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                let p = (s[c] - m).exp() / z - f64::from(u8::from(c == im.label));
                for (g, xi) in grad[c][..dim].iter_mut().zip(x) {
                    *g += p * xi;
                }
                grad[c][dim] += p;
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= lr * g / xs.len() as f64;
            }
        }
    }
    let correct = xs
        .iter()
        .zip(&ds.images)
        .filter(|(x, im)| {
            let s = score(&w, x);
            (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() == im.label
        })
        .count();
    correct as f64 / xs.len() as f64
}

#[test]
fn clean_signal_is_linearly_decodable_from_pixels() {
    let ds = gen_cluttered(&SyntheticCfg {
        distractor_count: 0,
        noise_level: 0.0,
        n_images: 200,
        ..SyntheticCfg::default()
    })
    .unwrap();
    assert_eq!(pixel_probe_accuracy(&ds, 300, 2.0), 1.0);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_cluttered(&SyntheticCfg {
        n_images: 3,
        ..small(4)
    })
    .unwrap();
    let path = dir.path().join("three.tdds");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert!(back.bits_eq(&ds));
    assert_eq!(back, ds);
}

#[test]
fn unmasked_images_round_trip() {
    let ds = Dataset {
        channels: 2,
        side: 3,
        grid: 1,
        n_classes: 4,
        images: (0..4)
            .map(|i| LabeledImage {
                pixels: Tensor::new(
                    vec![2, 3, 3],
                    (0..18).map(|v| (v * i) as f32 / 100.0).collect(),
                )
                .unwrap(),
                label: 3 - i,
                mask: None,
            })
            .collect(),
    };
    assert!(decode_dataset(&encode_dataset(&ds).unwrap())
        .unwrap()
        .bits_eq(&ds));
}

#[test]
fn header_layout_is_little_endian() {
    let ds = Dataset {
        channels: 1,
        side: 1,
        grid: 1,
        n_classes: 2,
        images: vec![LabeledImage {
            pixels: Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            label: 1,
            mask: Some(vec![true]),
        }],
    };
    let mut expected = b"TDDS".to_vec();
    expected.extend([1, 0]);
    for v in [1u32, 1, 1, 1, 2] {
        expected.extend(v.to_le_bytes());
    }
    expected.push(1);
    expected.extend(1u32.to_le_bytes());
    expected.push(0b1);
    expected.extend(1.0f32.to_le_bytes());
    assert_eq!(encode_dataset(&ds).unwrap(), expected);
}

#[test]
fn corrupted_header_is_a_format_error() {
    let ds = gen_cluttered(&SyntheticCfg {
        n_images: 3,
        ..small(4)
    })
    .unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_dataset(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut bad = bytes.clone();
    bad[8] ^= 1; // image count
    assert!(matches!(decode_dataset(&bad), Err(Error::Format { .. })));
    let mut ahead = bytes.clone();
    ahead[4] = 2;
    assert!(matches!(
        decode_dataset(&ahead),
        Err(Error::Version { found: 2, .. })
    ));
    assert!(matches!(
        decode_dataset(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.tdds");
    std::fs::write(&path, b"").unwrap();
    assert!(load_dataset(&path).unwrap().is_empty());
    assert!(matches!(
        load_dataset(&dir.path().join("absent")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn focus_score_examples() {
    let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
    let uniform = attention_focus_score(&[0.5; 16], &mask).unwrap();
    assert!((uniform.value - 4.0 / 16.0).abs() < 1e-12);
    let inside: Vec<f64> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    assert_eq!(attention_focus_score(&inside, &mask).unwrap().value, 1.0);
    let zero = attention_focus_score(&[0.0; 16], &mask).unwrap();
    assert!(zero.zero_mass && zero.value == 0.0);
    assert!(attention_focus_score(&[-1.0; 16], &mask).is_err());
    assert!(attention_focus_score(&[1.0; 15], &mask).is_err());
}

proptest! {
    #[test]
    fn focus_score_is_a_fraction(
        map in prop::collection::vec(0.0f64..1e3, 1..64),
        bits in any::<u64>(),
    ) {
        let mask: Vec<bool> = (0..map.len()).map(|i| bits >> i & 1 == 1).collect();
        let s = attention_focus_score(&map, &mask).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn generated_sets_respect_their_config(
        seed in any::<u64>(),
        signal in 1usize..6,
        distract in 0usize..10,
        n in 1usize..25,
    ) {
        let cfg = SyntheticCfg { seed, signal_patch_count: signal, distractor_count: distract, n_images: n, ..SyntheticCfg::default() };
        let ds = gen_cluttered(&cfg).unwrap();
        prop_assert_eq!(ds.len(), n);
        let counts = ds.class_counts();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        for im in &ds.images {
            prop_assert_eq!(im.mask.as_ref().unwrap().iter().filter(|&&m| m).count(), signal);
            prop_assert!(im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap().bits_eq(&ds));
    }
}
