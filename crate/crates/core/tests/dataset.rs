use crossx_core::data::{self, Dataset, SynthSpec, MAX_CLASSES, PROFILE_LEN};
use nalgebra::DMatrix;

fn spec(fine_grained: bool) -> SynthSpec {
    SynthSpec { fine_grained, ..SynthSpec::default() }
}

fn rows(ds: &Dataset) -> DMatrix<f64> {
    let n = ds.len();
    let d = ds.images.numel() / n;
    DMatrix::from_row_slice(n, d, ds.images.data())
}

/// Kernel ridge regression onto one-hot targets with a linear kernel on
/// centred raw pixels; returns test accuracy.
fn linear_probe(train: &Dataset, test: &Dataset, classes: usize, ridge: f64) -> f64 {
    let mut x = rows(train);
    let mut t = rows(test);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    for mut r in t.row_iter_mut() {
        r -= &mean;
    }
    let n = x.nrows();
    let mut y = DMatrix::zeros(n, classes);
    for (i, &l) in train.labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    let gram = &x * x.transpose() + DMatrix::identity(n, n) * ridge;
    let alpha = gram.cholesky().expect("ridge gram is positive definite").solve(&y);
    let scores = &t * x.transpose() * alpha;
    let correct = scores
        .row_iter()
        .zip(&test.labels)
        .filter(|(r, &l)| r.transpose().argmax().0 == l)
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn same_seed_gives_identical_splits() {
    let a = data::synth_dataset(&spec(true), 11).unwrap();
    let b = data::synth_dataset(&spec(true), 11).unwrap();
    assert_eq!(a, b);
    let c = data::synth_dataset(&spec(true), 12).unwrap();
    assert_ne!(a.train.images, c.train.images);
}

#[test]
fn default_split_sizes() {
    let s = data::synth_dataset(&spec(true), 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 100, 200));
    assert_eq!(s.train.images.shape(), &[500, 3, 64, 64]);
    for k in 0..10 {
        assert_eq!(s.test.labels.iter().filter(|&&l| l == k).count(), 20);
    }
}

#[test]
fn automatic_validation_carve_is_a_tenth() {
    let sp = SynthSpec { val_per_class: None, ..spec(true) };
    assert_eq!(sp.split_counts(), (45, 5));
    let s = data::synth_dataset(&sp, 0).unwrap();
    assert_eq!((s.train.len(), s.val.len()), (450, 50));
}

#[test]
fn splits_share_no_image() {
    let sp = SynthSpec { image_size: 16, train_per_class: 20, ..spec(true) };
    let s = data::synth_dataset(&sp, 3).unwrap();
    let plane = 3 * 16 * 16;
    let images = |d: &Dataset| -> Vec<Vec<u8>> {
        d.images.data().chunks(plane).map(|c| c.iter().map(|v| (v * 255.0).round() as u8).collect()).collect()
    };
    let train = images(&s.train);
    for other in [images(&s.val), images(&s.test)] {
        for img in &other {
            assert!(!train.contains(img));
        }
    }
}

#[test]
fn pixels_lie_on_the_byte_grid() {
    let sp = SynthSpec { image_size: 16, ..spec(true) };
    let s = data::synth_dataset(&sp, 1).unwrap();
    for &v in s.val.images.data() {
        assert!((0.0..=1.0).contains(&v));
        assert!((v * 255.0 - (v * 255.0).round()).abs() < 1e-9);
    }
}

#[test]
fn profiles_are_distinct_up_to_the_class_limit() {
    let sp = SynthSpec { classes: MAX_CLASSES, ..spec(true) };
    let tex: Vec<_> = (0..MAX_CLASSES).map(|k| sp.class_profile(k)).collect();
    for i in 0..tex.len() {
        for j in i + 1..tex.len() {
            let same = tex[i].iter().zip(&tex[j]).all(|(a, b)| (a - b).abs() < 1e-9);
            let negated = tex[i].iter().zip(&tex[j]).all(|(a, b)| (a + b).abs() < 1e-9);
            assert!(!same && !negated, "classes {i} and {j}");
        }
    }
    let too_many = SynthSpec { classes: MAX_CLASSES + 1, ..spec(true) };
    assert!(too_many.validate().is_err());
}

#[test]
fn flipping_preserves_every_texture_class() {
    let sp = SynthSpec { image_size: 16, ..spec(true) };
    let s = data::synth_dataset(&sp, 0).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let (flipped, labels) = s.train.batch(&idx, Some(&[true; 6]));
    let (plain, same) = s.train.batch(&idx, Some(&[false; 6]));
    assert_eq!(labels, same);
    assert_ne!(flipped, plain);
    let mut twice = flipped.clone();
    for img in twice.data_mut().chunks_mut(3 * 16 * 16) {
        data::flip_horizontal(img, 16);
    }
    assert_eq!(twice, plain);
}

/// Test accuracy of the probe whose ridge scores best on validation.
fn tuned_probe(s: &data::Splits) -> f64 {
    let ridge = [1.0, 10.0, 100.0, 1000.0]
        .into_iter()
        .map(|r| (r, linear_probe(&s.train, &s.val, 10, r)))
        .fold((0.0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    linear_probe(&s.train, &s.test, 10, ridge)
}

#[test]
fn linear_probe_separates_coarse_classes_only() {
    let coarse = data::synth_dataset(&spec(false), 0).unwrap();
    let fine = data::synth_dataset(&spec(true), 0).unwrap();
    let acc_coarse = tuned_probe(&coarse);
    let acc_fine = tuned_probe(&fine);
    assert!(acc_coarse > 0.9, "coarse probe accuracy {acc_coarse}");
    assert!(acc_fine <= 0.2, "fine-grained probe accuracy {acc_fine}");
}

#[test]
fn profiles_share_one_autocorrelation() {
    let sp = spec(true);
    let auto = |h: [f64; PROFILE_LEN]| -> Vec<f64> {
        (0..PROFILE_LEN).map(|d| (0..PROFILE_LEN - d).map(|i| h[i] * h[i + d]).sum()).collect()
    };
    let reference = auto(sp.class_profile(0));
    for k in 1..MAX_CLASSES {
        for (a, b) in auto(sp.class_profile(k)).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "class {k}");
        }
    }
}

#[test]
fn export_round_trip() {
    let sp = SynthSpec { image_size: 16, ..spec(true) };
    let s = data::synth_dataset(&sp, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data::export_dataset(&s.val, dir.path()).unwrap();
    let images = data::read_images(&dir.path().join("images.bin")).unwrap();
    let labels = data::read_labels(&dir.path().join("labels.csv")).unwrap();
    assert_eq!(images, s.val.images);
    assert_eq!(labels, s.val.labels);
}

#[test]
fn truncated_image_file_is_rejected() {
    let sp = SynthSpec { image_size: 16, ..spec(true) };
    let s = data::synth_dataset(&sp, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data::export_dataset(&s.val, dir.path()).unwrap();
    let path = dir.path().join("images.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(data::read_images(&path).is_err());
}

