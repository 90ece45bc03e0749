use super::*;
use crate::shape;
use crate::tensor::Shape;
use ::image::{GrayImage, ImageBuffer, Luma, RgbImage};
use proptest::prelude::*;

fn gray_png(dir: &Path, name: &str, w: u32, h: u32, px: Vec<u8>) -> PathBuf {
    let path = dir.join(name);
    GrayImage::from_raw(w, h, px).unwrap().save(&path).unwrap();
    path
}

#[test]
fn constant_images_hit_the_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let black = gray_png(dir.path(), "b.png", 5, 3, vec![0; 15]);
    let white = gray_png(dir.path(), "w.png", 5, 3, vec![255; 15]);
    for target in [[3, 5, 1], [7, 4, 3]] {
        assert!(load_and_preprocess(&black, &target)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -1.0));
        assert!(load_and_preprocess(&white, &target)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }
}

#[test]
fn same_size_resize_is_identity() {
    let img = Tensor::from_vec(shape![3, 4, 2], (0..24).map(|i| f64::from(i) * 1.7 - 3.0).collect()).unwrap();
    let out = resize_bilinear(&img, 3, 4);
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn two_by_two_upsample_matches_hand_table() {
    // Source coordinates of the four output columns are -0.25, 0.25, 0.75,
    // 1.25, clamped to 0, 0.25, 0.75, 1. With corners 0/255/255/0 the value
    // at (u, v) is 255 (u + v - 2uv).
    let expected = [
        [0.0, 63.75, 191.25, 255.0],
        [63.75, 95.625, 159.375, 191.25],
        [191.25, 159.375, 95.625, 63.75],
        [255.0, 191.25, 63.75, 0.0],
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = gray_png(dir.path(), "checker.png", 2, 2, vec![0, 255, 255, 0]);
    let out = load_and_preprocess(&path, &[4, 4, 1]).unwrap();
    let raw = resize_bilinear(
        &Tensor::from_vec(shape![2, 2, 1], vec![0.0, 255.0, 255.0, 0.0]).unwrap(),
        4,
        4,
    );
    for (i, row) in expected.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            assert!((raw.data()[i * 4 + j] - e).abs() <= 1e-12);
            assert!((out.data()[i * 4 + j] - (e / 127.5 - 1.0)).abs() <= 1e-12);
        }
    }
}

#[test]
fn channel_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let g = gray_png(dir.path(), "g.png", 2, 1, vec![0, 255]);
    let t = load_and_preprocess(&g, &[1, 2, 3]).unwrap();
    assert_eq!(t.data(), &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);

    let path = dir.path().join("rgb.png");
    RgbImage::from_raw(1, 1, vec![255, 255, 255])
        .unwrap()
        .save(&path)
        .unwrap();
    assert_eq!(load_and_preprocess(&path, &[1, 1, 1]).unwrap().data(), &[1.0]);
    assert_eq!(load_and_preprocess(&path, &[1, 1, 3]).unwrap().dims(), &[1, 1, 3]);
}

#[test]
fn conform_resizes_and_replicates() {
    let img = synthesize(1, 0).images[0].clone();
    let big = conform(&img, &[64, 48, 3]).unwrap();
    assert_eq!(big.dims(), &[64, 48, 3]);
    assert!(big.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    assert_eq!(conform(&img, &[32, 32, 1]).unwrap(), img);
    let back = conform(&conform(&img, &[32, 32, 3]).unwrap(), &[32, 32, 1]).unwrap();
    for (a, b) in back.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(conform(&big, &[4, 4, 2]).is_err());
}

#[test]
fn bad_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let deep = dir.path().join("deep.png");
    ImageBuffer::<Luma<u16>, _>::from_raw(1, 1, vec![1000u16])
        .unwrap()
        .save(&deep)
        .unwrap();
    assert!(matches!(
        load_and_preprocess(&deep, &[1, 1, 1]),
        Err(DataError::Unsupported { .. })
    ));

    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(load_and_preprocess(&junk, &[1, 1, 1]).is_err());
    assert!(matches!(
        load_and_preprocess(&dir.path().join("missing.png"), &[1, 1, 1]),
        Err(DataError::Io { .. })
    ));
    let ok = gray_png(dir.path(), "ok.png", 1, 1, vec![9]);
    assert!(matches!(
        load_and_preprocess(&ok, &[1, 1, 2]),
        Err(DataError::Target(_))
    ));
}

#[test]
fn identity_augmentation() {
    let img = synthesize(1, 3).images[1].clone();
    let out = augment_with(&img, AugmentParams::IDENTITY);
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn augmentation_is_seeded() {
    let img = synthesize(1, 3).images[0].clone();
    let a = augment(&img, 99);
    let b = augment(&img, 99);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&augment(&img, 100)));
    let p = AugmentParams::draw(5);
    assert!(p.shear.abs() <= SHEAR_RANGE && (p.zoom - 1.0).abs() <= ZOOM_RANGE);
}

fn disk(size: usize, radius: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let px = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            if y.hypot(x) <= radius {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Tensor::from_vec(shape![size, size, 1], px).unwrap()
}

#[test]
fn zoom_grows_disk_radius_by_ten_percent() {
    let img = disk(96, 20.0);
    let area = |t: &Tensor| t.data().iter().filter(|&&v| v > 0.0).count() as f64;
    let zoomed = augment_with(&img, AugmentParams { shear: 0.0, zoom: 1.1 });
    let radius_ratio = (area(&zoomed) / area(&img)).sqrt();
    assert!((radius_ratio - 1.1).abs() < 0.01, "{radius_ratio}");
    // shear preserves area
    let sheared = augment_with(&img, AugmentParams { shear: 0.1, zoom: 1.0 });
    assert!((area(&sheared) / area(&img) - 1.0).abs() < 0.02);
}

#[test]
fn synthetic_data_is_seeded_and_balanced() {
    assert_eq!(synthesize(4, 1), synthesize(4, 1));
    assert_ne!(synthesize(4, 1), synthesize(4, 2));
    let one = synthesize(1, 0);
    assert_eq!(one.len(), 3);
    assert_eq!(one.labels, [0, 1, 2]);
    let d = synthesize(50, 8);
    for k in 0..3 {
        assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 50);
    }
}

#[test]
fn blob_class_is_bright_in_lower_left() {
    let d = synthesize(40, 4);
    let lower_left_mean = |k: usize| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for (img, &l) in d.images.iter().zip(&d.labels) {
            if l != k {
                continue;
            }
            for y in SYNTH_SIZE / 2..SYNTH_SIZE {
                for x in 0..SYNTH_SIZE / 2 {
                    sum += img.data()[y * SYNTH_SIZE + x];
                    n += 1.0;
                }
            }
        }
        sum / n
    };
    assert!(lower_left_mean(0) - lower_left_mean(2) > 3.0 * 0.1);
}

#[test]
fn quadrant_blobs_sit_in_their_quadrant() {
    let (d, quads) = synthesize_quadrants(20, 2);
    assert_eq!(d.classes.len(), 2);
    assert_eq!(d.len(), 40);
    assert!(quads.iter().all(|&q| q < 4));
    // every quadrant occurs for both classes
    for k in 0..2 {
        for q in 0..4 {
            assert!((0..d.len()).any(|i| d.labels[i] == k && quads[i] == q));
        }
    }
    for ((img, &label), &q) in d.images.iter().zip(&d.labels).zip(&quads) {
        // signed deviation from the -0.5 background, summed per quadrant
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let mut mass = [0.0; 4];
        for (i, v) in img.data().iter().enumerate() {
            mass[quadrant_of(SYNTH_SIZE, SYNTH_SIZE, i / SYNTH_SIZE, i % SYNTH_SIZE)] += sign * (v + 0.5);
        }
        let best = (0..4).max_by(|&a, &b| mass[a].total_cmp(&mass[b])).unwrap();
        assert_eq!(best, q, "{mass:?}");
    }
}

fn sizes(s: &(Vec<usize>, Vec<usize>, Vec<usize>)) -> (usize, usize, usize) {
    (s.0.len(), s.1.len(), s.2.len())
}

#[test]
fn default_split_reproduces_published_sizes() {
    let spec = SplitSpec::default();
    spec.validate().unwrap();
    for class_sizes in [vec![21272], vec![7091, 7091, 7090], vec![3616, 6012, 11644]] {
        let labels: Vec<usize> = class_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect();
        let s = split(&labels, class_sizes.len(), &spec).unwrap();
        assert_eq!(sizes(&s), (12157, 3219, 5896), "{class_sizes:?}");
    }
}

#[test]
fn thirds_of_nine() {
    let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
    let spec = SplitSpec {
        train: 1.0 / 3.0,
        val: 1.0 / 3.0,
        test: 1.0 / 3.0,
        seed: 4,
    };
    let s = split(&labels, 3, &spec).unwrap();
    assert_eq!(sizes(&s), (3, 3, 3));
    for part in [&s.0, &s.1, &s.2] {
        let mut ls: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
        ls.sort_unstable();
        assert_eq!(ls, [0, 1, 2]);
    }
    assert_eq!(split(&labels, 3, &spec).unwrap(), s);
}

#[test]
fn split_rejects_bad_input() {
    assert!(split(&[0, 0, 1, 1, 1], 2, &SplitSpec::default()).is_err());
    let bad = SplitSpec {
        train: 0.5,
        val: 0.3,
        test: 0.3,
        seed: 0,
    };
    assert!(split(&[0; 10], 1, &bad).is_err());
    assert!(split(&[0, 0, 0, 5], 1, &SplitSpec::default()).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthesize(2, 6);
    let m = d.write_pngs(dir.path()).unwrap();
    let scanned = DatasetManifest::scan(dir.path(), &d.classes).unwrap();
    let mut by_class = m.samples.clone();
    by_class.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    assert_eq!(scanned.samples, by_class);
    let csv = dir.path().join("manifest.csv");
    scanned.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("path,label\ncovid/"), "{text}");
    assert_eq!(
        DatasetManifest::read_csv(&csv, dir.path(), &d.classes).unwrap(),
        scanned
    );

    let loaded = scanned.load(&[SYNTH_SIZE, SYNTH_SIZE, 1]).unwrap();
    // 8-bit quantization error is at most half a level
    let first = &d.images[0];
    for (a, b) in loaded.images[0].data().iter().zip(first.data()) {
        assert!((a - b).abs() <= 0.5 / 127.5 + 1e-12);
    }
}

#[test]
fn scan_reports_empty_class() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    gray_png(&dir.path().join("a"), "x.png", 1, 1, vec![0]);
    std::fs::create_dir(dir.path().join("b")).unwrap();
    let classes = ["a".to_string(), "b".to_string()];
    assert!(matches!(DatasetManifest::scan(dir.path(), &classes), Err(DataError::EmptyClass(c)) if c == "b"));
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(counts in prop::collection::vec(3usize..40, 1..5), seed in any::<u64>(),
                                       a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0) {
        let total = a + b + c;
        let spec = SplitSpec { train: a / total, val: b / total, test: 1.0 - a / total - b / total, seed };
        prop_assume!(spec.validate().is_ok());
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        let Ok(s) = split(&labels, counts.len(), &spec) else { return Ok(()) };
        let mut all: Vec<usize> = s.0.iter().chain(&s.1).chain(&s.2).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for (k, &n) in counts.iter().enumerate() {
            for (part, r) in [(&s.1, spec.val), (&s.2, spec.test)] {
                let got = part.iter().filter(|&&i| labels[i] == k).count() as f64;
                prop_assert!((got - r * n as f64).abs() <= 1.0 + 1e-9, "class {} got {} want {}", k, got, r * n as f64);
            }
        }
    }

    #[test]
    fn preprocessed_values_stay_in_range(px in prop::collection::vec(any::<u8>(), 12), th in 1usize..9, tw in 1usize..9) {
        let dir = tempfile::tempdir().unwrap();
        let p = gray_png(dir.path(), "p.png", 4, 3, px);
        let t = load_and_preprocess(&p, &[th, tw, 3]).unwrap();
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn augment_preserves_shape(h in 1usize..12, w in 1usize..12, c in 1usize..4, seed in any::<u64>()) {
        let img = Tensor::full(Shape::new(vec![h, w, c]).unwrap(), 0.25);
        let out = augment(&img, seed);
        prop_assert_eq!(out.shape(), img.shape());
        // constant images stay constant under any warp with edge replication
        prop_assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
