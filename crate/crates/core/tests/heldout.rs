//! Corruption battery behavior: identity at severity zero, determinism,
//! range clamping, and the rotation round-trip bound.

use lat_core::error::Error;
use lat_core::eval::accuracy_on;
use lat_core::heldout::{
    corrupt_dataset, default_battery, evaluate_battery, rotate_bilinear, CorruptionKind,
    CorruptionSpec, IMAGE_KINDS, TEXT_KINDS,
};
use lat_core::model::{build_model, ModelSpec};
use lat_core::poison::{
    generate_images, generate_text_cls, generate_text_gen, Dataset, TaskKind, CONTENT_BASE,
    PAD_TOKEN, SEQ_LEN,
};

type Ds = Dataset<f64>;

#[test]
fn severity_zero_is_the_exact_identity_for_every_kind() {
    let img: Ds = generate_images(20, 4, 1).unwrap();
    for &kind in &IMAGE_KINDS {
        let out = corrupt_dataset(&img, &CorruptionSpec::new(kind, 0, 9)).unwrap();
        assert_eq!(out, img, "{}", kind.name());
    }
    let txt: Ds = generate_text_cls(20, 24, 2).unwrap();
    for &kind in &TEXT_KINDS {
        let out = corrupt_dataset(&txt, &CorruptionSpec::new(kind, 0, 9)).unwrap();
        assert_eq!(out, txt, "{}", kind.name());
    }
}

#[test]
fn corruption_is_deterministic_and_seed_sensitive() {
    let img: Ds = generate_images(30, 4, 3).unwrap();
    for &kind in &IMAGE_KINDS {
        let a = corrupt_dataset(&img, &CorruptionSpec::new(kind, 3, 5)).unwrap();
        let b = corrupt_dataset(&img, &CorruptionSpec::new(kind, 3, 5)).unwrap();
        assert_eq!(a, b, "{}", kind.name());
        assert_ne!(a, img, "{} at severity 3 must change pixels", kind.name());
    }
    // Random kinds move with the seed.
    for kind in [
        CorruptionKind::GaussianNoise,
        CorruptionKind::SaltPepper,
        CorruptionKind::RandomOcclusion,
        CorruptionKind::Translation,
    ] {
        let a = corrupt_dataset(&img, &CorruptionSpec::new(kind, 3, 5)).unwrap();
        let c = corrupt_dataset(&img, &CorruptionSpec::new(kind, 3, 6)).unwrap();
        assert_ne!(a, c, "{}", kind.name());
    }
}

#[test]
fn outputs_stay_in_the_declared_range() {
    let img: Ds = generate_images(30, 4, 4).unwrap();
    for &kind in &IMAGE_KINDS {
        for severity in 1..=5 {
            let out = corrupt_dataset(&img, &CorruptionSpec::new(kind, severity, 7)).unwrap();
            assert!(
                out.examples.iter().all(|&p| (0.0..=1.0).contains(&p)),
                "{} severity {severity}",
                kind.name()
            );
        }
    }
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn gaussian_bump(cy: f64, cx: f64, width: f64) -> Vec<f64> {
    (0..256)
        .map(|i| {
            let (y, x) = ((i / 16) as f64, (i % 16) as f64);
            (-((y - cy).powi(2) + (x - cx).powi(2)) / width).exp()
        })
        .collect()
}

#[test]
fn rotation_round_trip_error_is_small() {
    // Smooth fixtures isolate interpolation error from edge aliasing; a
    // wrong center, sign, or sampling offset would fail these by a wide
    // margin.
    for k in 0..6 {
        let img = gaussian_bump(5.0 + (k % 3) as f64 * 2.5, 4.5 + (k / 3) as f64 * 3.0, 18.0);
        let there = rotate_bilinear(&img, 16, 16, 15.0, 0.0);
        let back = rotate_bilinear(&there, 16, 16, -15.0, 0.0);
        assert!(mae(&img, &back) < 0.05, "round trip {} on fixture {k}", mae(&img, &back));
    }

    // A radially symmetric bump on the rotation center is a fixed point
    // of any rotation, up to interpolation error.
    let bump = gaussian_bump(7.5, 7.5, 12.0);
    let rot = rotate_bilinear(&bump, 16, 16, 15.0, 0.0);
    assert!(mae(&bump, &rot) < 0.01, "centered bump moved by {}", mae(&bump, &rot));

    // Hard-edged sprites alias, so they only get a loose sanity bound.
    let img: Ds = generate_images(10, 4, 6).unwrap();
    for i in 0..img.len() {
        let flat: Vec<f64> = img.example(i).to_vec();
        let there = rotate_bilinear(&flat, 16, 16, 15.0, 0.0);
        let back = rotate_bilinear(&there, 16, 16, -15.0, 0.0);
        assert!(mae(&flat, &back) < 0.12, "example {i}: {}", mae(&flat, &back));
        // Zero-degree rotation reproduces the input exactly.
        let same = rotate_bilinear(&flat, 16, 16, 0.0, 0.0);
        for (a, b) in flat.iter().zip(&same) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn text_corruptions_preserve_shape_and_vocabulary() {
    let txt: Ds = generate_text_gen(40, 44, 8).unwrap();
    for &kind in &TEXT_KINDS {
        let out = corrupt_dataset(&txt, &CorruptionSpec::new(kind, 4, 11)).unwrap();
        assert_eq!(out.example_shape, vec![SEQ_LEN]);
        assert_eq!(out.len(), txt.len());
        for i in 0..out.len() {
            for &v in out.example(i) {
                let t = v as usize;
                assert!(
                    t == PAD_TOKEN || (CONTENT_BASE..44).contains(&t),
                    "{} produced token {t}",
                    kind.name()
                );
            }
        }
    }
    // Window shuffle is a permutation within each example.
    let out = corrupt_dataset(
        &txt,
        &CorruptionSpec::new(CorruptionKind::WindowShuffle, 5, 12),
    )
    .unwrap();
    for i in 0..out.len() {
        let mut a: Vec<u64> = txt.example(i).iter().map(|&v| v as u64).collect();
        let mut b: Vec<u64> = out.example(i).iter().map(|&v| v as u64).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}

#[test]
fn kind_task_mismatch_and_bad_severity_are_rejected() {
    let img: Ds = generate_images(5, 4, 1).unwrap();
    let txt: Ds = generate_text_cls(5, 24, 1).unwrap();
    assert!(matches!(
        corrupt_dataset(&img, &CorruptionSpec::new(CorruptionKind::TokenDropout, 1, 1)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        corrupt_dataset(&txt, &CorruptionSpec::new(CorruptionKind::BoxBlur, 1, 1)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        corrupt_dataset(&img, &CorruptionSpec::new(CorruptionKind::BoxBlur, 6, 1)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        CorruptionKind::parse("fgsm"),
        Err(Error::Config(_))
    ));
    assert_eq!(
        CorruptionKind::parse("salt-pepper").unwrap(),
        CorruptionKind::SaltPepper
    );
}

#[test]
fn battery_reports_per_kind_and_mean() {
    let img: Ds = generate_images(40, 4, 13).unwrap();
    let model = build_model::<f64>(&ModelSpec::cnn(16, 16, 4, 14), 1).unwrap();
    let specs: Vec<CorruptionSpec> = IMAGE_KINDS
        .iter()
        .map(|&k| CorruptionSpec::new(k, 2, 15))
        .collect();
    let report = evaluate_battery(&model, &img, &specs, 20).unwrap();
    assert_eq!(report.per_kind.len(), 8);
    let mean = report.per_kind.iter().map(|(_, v)| v).sum::<f64>() / 8.0;
    assert_eq!(report.aggregate, mean);

    // Per-kind values are independent of spec order.
    let mut reversed = specs.clone();
    reversed.reverse();
    let r2 = evaluate_battery(&model, &img, &reversed, 20).unwrap();
    for (name, v) in &report.per_kind {
        let (_, v2) = r2.per_kind.iter().find(|(n, _)| n == name).unwrap();
        assert_eq!(v, v2);
    }
    assert!((report.aggregate - r2.aggregate).abs() < 1e-12);

    // Identity battery reproduces the clean metric.
    let idspecs: Vec<CorruptionSpec> = IMAGE_KINDS
        .iter()
        .map(|&k| CorruptionSpec::new(k, 0, 15))
        .collect();
    let id = evaluate_battery(&model, &img, &idspecs, 20).unwrap();
    let clean = accuracy_on(&model, &img, 20).unwrap();
    assert_eq!(id.aggregate, clean);

    assert!(matches!(
        evaluate_battery(&model, &img, &[], 20),
        Err(Error::Config(_))
    ));
}

#[test]
fn default_batteries_have_the_documented_shape() {
    let img = default_battery(TaskKind::ImageCls, 1);
    assert_eq!(img.len(), 24);
    assert!(img.iter().all(|s| s.validate().is_ok()));
    let txt = default_battery(TaskKind::TextGen, 1);
    assert_eq!(txt.len(), 9);
    for s in &img {
        assert!(s.kind.applies_to(TaskKind::ImageCls));
        assert!(!s.kind.applies_to(TaskKind::TextCls));
    }
    for s in &txt {
        assert!(s.kind.applies_to(TaskKind::TextGen));
        assert!(s.kind.applies_to(TaskKind::TextCls));
        assert!(!s.kind.applies_to(TaskKind::ImageCls));
    }
}
