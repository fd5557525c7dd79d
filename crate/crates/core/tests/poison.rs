//! Dataset generation, IDX parsing, and backdoor implantation behavior.

use lat_core::error::Error;
use lat_core::model::BatchTargets;
use lat_core::poison::{
    self, backdoor_probe_set, default_image_backdoors, default_text_cls_backdoors,
    default_text_gen_backdoors, generate_images, generate_text_cls, generate_text_gen, implant,
    load_idx, BackdoorSpec, Dataset, ExampleMeta, StreamKind, TaskKind, TriggerKind,
    CONTENT_BASE, IMG_SIDE, PAD_TOKEN, SEQ_LEN,
};

type Ds = Dataset<f64>;

fn histogram_spread(ds: &Ds) -> usize {
    let h = ds.label_histogram();
    h.iter().max().unwrap() - h.iter().min().unwrap()
}

// ---------------------------------------------------------------- images

#[test]
fn image_generation_is_deterministic_and_seed_sensitive() {
    let a: Ds = generate_images(40, 4, 7).unwrap();
    let b: Ds = generate_images(40, 4, 7).unwrap();
    let c: Ds = generate_images(40, 4, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.examples, c.examples);
}

#[test]
fn images_are_in_range_with_flat_label_histogram() {
    let ds: Ds = generate_images(103, 4, 1).unwrap();
    assert_eq!(ds.len(), 103);
    assert_eq!(ds.example_shape, vec![1, IMG_SIDE, IMG_SIDE]);
    assert!(ds.examples.iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert!(histogram_spread(&ds) <= 1);
    // 1% balance bound follows from the one-example spread.
    let h = ds.label_histogram();
    let n = ds.len() as f64;
    for &count in &h {
        assert!((count as f64 / n - 1.0 / 4.0).abs() < 0.01);
    }
}

#[test]
fn image_classes_produce_visibly_different_shapes() {
    // Mean images per class should differ pairwise by a clear margin.
    let ds: Ds = generate_images(400, 4, 3).unwrap();
    let k = ds.example_elements();
    let mut means = vec![vec![0.0f64; k]; 4];
    let mut counts = [0usize; 4];
    for i in 0..ds.len() {
        let c = ds.labels[i];
        counts[c] += 1;
        for (m, &p) in means[c].iter_mut().zip(ds.example(i)) {
            *m += p;
        }
    }
    for (m, &c) in means.iter_mut().zip(counts.iter()) {
        for v in m.iter_mut() {
            *v /= c as f64;
        }
    }
    for a in 0..4 {
        for b in a + 1..4 {
            let dist: f64 = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(dist > 5.0, "classes {a} and {b} too similar: {dist}");
        }
    }
}

#[test]
fn image_generation_rejects_bad_arguments() {
    assert!(matches!(
        generate_images::<f64>(10, 0, 1),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        generate_images::<f64>(10, 9, 1),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        generate_images::<f64>(2, 4, 1),
        Err(Error::Config(_))
    ));
}

// ------------------------------------------------------------------- idx

fn idx_image_bytes(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 3];
    b.extend_from_slice(&n.to_be_bytes());
    b.extend_from_slice(&h.to_be_bytes());
    b.extend_from_slice(&w.to_be_bytes());
    b.extend_from_slice(pixels);
    b
}

fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write_idx_pair(tag: &str, img: &[u8], lbl: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let dir = std::env::temp_dir().join(format!("lat-idx-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let ip = dir.join("images.idx");
    let lp = dir.join("labels.idx");
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lbl).unwrap();
    (ip, lp)
}

#[test]
fn idx_fixture_parses_with_exact_rescale() {
    let pixels = [0u8, 51, 102, 153, 204, 255, 10, 20];
    let (ip, lp) = write_idx_pair("ok", &idx_image_bytes(2, 2, 2, &pixels), &idx_label_bytes(&[1, 0]));
    let ds: Ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.task, TaskKind::ImageCls);
    assert_eq!(ds.example_shape, vec![1, 2, 2]);
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels, vec![1, 0]);
    assert_eq!(ds.classes, 2);
    let expect: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    assert_eq!(ds.examples, expect);
    assert_eq!(ds.examples[5], 1.0);
    assert_eq!(ds.examples[0], 0.0);
}

#[test]
fn idx_errors_carry_byte_offsets() {
    let pixels = [1u8; 8];
    let good_img = idx_image_bytes(2, 2, 2, &pixels);
    let good_lbl = idx_label_bytes(&[0, 1]);

    // Nonzero leading magic byte.
    let mut bad = good_img.clone();
    bad[0] = 9;
    let (ip, lp) = write_idx_pair("magic", &bad, &good_lbl);
    match load_idx::<f64>(&ip, &lp).unwrap_err() {
        Error::Format { offset, .. } => assert_eq!(offset, 0),
        other => panic!("unexpected {other:?}"),
    }

    // Wrong element type code.
    let mut bad = good_img.clone();
    bad[2] = 0x0d;
    let (ip, lp) = write_idx_pair("dtype", &bad, &good_lbl);
    match load_idx::<f64>(&ip, &lp).unwrap_err() {
        Error::Format { offset, .. } => assert_eq!(offset, 2),
        other => panic!("unexpected {other:?}"),
    }

    // Truncated pixel payload.
    let bad = idx_image_bytes(2, 2, 2, &pixels[..7]);
    let (ip, lp) = write_idx_pair("trunc", &bad, &good_lbl);
    assert!(matches!(
        load_idx::<f64>(&ip, &lp),
        Err(Error::Format { .. })
    ));

    // Trailing garbage.
    let mut bad = good_img.clone();
    bad.push(0);
    let (ip, lp) = write_idx_pair("trail", &bad, &good_lbl);
    assert!(matches!(
        load_idx::<f64>(&ip, &lp),
        Err(Error::Format { .. })
    ));

    // Image/label count mismatch.
    let (ip, lp) = write_idx_pair("count", &good_img, &idx_label_bytes(&[0, 1, 1]));
    assert!(matches!(
        load_idx::<f64>(&ip, &lp),
        Err(Error::Format { .. })
    ));

    // Zero images.
    let (ip, lp) = write_idx_pair("empty", &idx_image_bytes(0, 2, 2, &[]), &idx_label_bytes(&[]));
    assert!(matches!(
        load_idx::<f64>(&ip, &lp),
        Err(Error::Format { .. })
    ));
}

// ------------------------------------------------------------------ text

#[test]
fn text_cls_labels_match_the_bigram_rule_and_balance() {
    let ds: Ds = generate_text_cls(101, 24, 5).unwrap();
    assert_eq!(ds.len(), 101);
    assert_eq!(ds.example_shape, vec![SEQ_LEN]);
    assert!(histogram_spread(&ds) <= 1);
    let bigrams = poison::harm_bigrams(24);
    for i in 0..ds.len() {
        let toks: Vec<usize> = ds.example(i).iter().map(|&v| v as usize).collect();
        assert!(toks.iter().all(|&t| t >= CONTENT_BASE && t < 24));
        let harmful = poison::contains_harm_bigram(&toks, &bigrams);
        assert_eq!(harmful, ds.labels[i] == 1, "example {i}");
    }
}

#[test]
fn text_cls_requires_room_for_reserved_tokens() {
    assert!(matches!(
        generate_text_cls::<f64>(10, 19, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn text_gen_streams_use_disjoint_vocabulary() {
    let ds: Ds = generate_text_gen(200, 40, 9).unwrap();
    assert_eq!(ds.len(), 200);
    let (good, bad) = poison::gen_subvocabs(40);
    assert!(good.end <= bad.start);
    let des = ds.stream_indices(StreamKind::Desirable);
    let und = ds.stream_indices(StreamKind::Undesirable);
    assert_eq!(des.len(), 100);
    assert_eq!(und.len(), 100);
    for &i in &des {
        assert!(ds
            .example(i)
            .iter()
            .all(|&v| good.contains(&(v as usize))));
    }
    for &i in &und {
        assert!(ds.example(i).iter().all(|&v| bad.contains(&(v as usize))));
    }
}

#[test]
fn clean_text_never_uses_reserved_tokens() {
    let cls: Ds = generate_text_cls(300, 30, 2).unwrap();
    let gen: Ds = generate_text_gen(300, 44, 2).unwrap();
    for ds in [&cls, &gen] {
        assert!(ds.examples.iter().all(|&v| v as usize >= CONTENT_BASE));
    }
}

// --------------------------------------------------------------- implant

#[test]
fn implant_appends_and_never_touches_clean_rows() {
    let clean: Ds = generate_images(60, 4, 11).unwrap();
    let specs = default_image_backdoors::<f64>(4, 5);
    assert_eq!(specs.len(), 8);
    let poisoned = implant(&clean, &specs, 21).unwrap();
    assert_eq!(poisoned.len(), 60 + 8 * 5);
    // Clean prefix is byte-identical.
    let k = clean.example_elements();
    assert_eq!(&poisoned.examples[..60 * k], &clean.examples[..]);
    assert_eq!(&poisoned.labels[..60], &clean.labels[..]);
    for i in 0..60 {
        assert_eq!(poisoned.meta[i], ExampleMeta::default());
    }
    for i in 60..poisoned.len() {
        let spec_idx = (i - 60) / 5;
        assert_eq!(poisoned.meta[i].poisoned_by, Some(spec_idx));
        assert_eq!(poisoned.meta[i].attack_target, Some(specs[spec_idx].target));
        assert_eq!(poisoned.labels[i], specs[spec_idx].target);
    }
    assert_eq!(poisoned.poisoned_indices().len(), 40);
}

#[test]
fn implant_is_deterministic() {
    let clean: Ds = generate_images(50, 4, 1).unwrap();
    let specs = default_image_backdoors::<f64>(4, 3);
    let a = implant(&clean, &specs, 33).unwrap();
    let b = implant(&clean, &specs, 33).unwrap();
    assert_eq!(a, b);
}

#[test]
fn patch_rows_carry_the_exact_stamp() {
    let clean: Ds = generate_images(50, 4, 13).unwrap();
    let specs = default_image_backdoors::<f64>(4, 4);
    let poisoned = implant(&clean, &specs, 5).unwrap();
    for i in clean.len()..poisoned.len() {
        let spec = &specs[poisoned.meta[i].poisoned_by.unwrap()];
        match &spec.kind {
            TriggerKind::Patch { pattern, row, col } => {
                let img = poisoned.example(i);
                for pr in 0..3 {
                    for pc in 0..3 {
                        assert_eq!(
                            img[(row + pr) * IMG_SIDE + (col + pc)],
                            pattern[pr * 3 + pc]
                        );
                    }
                }
            }
            TriggerKind::Feature { .. } => {
                assert!(poisoned.example(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            _ => panic!("unexpected trigger kind for images"),
        }
    }
}

#[test]
fn empty_spec_list_is_identity() {
    let clean: Ds = generate_images(30, 3, 2).unwrap();
    let out = implant(&clean, &[], 1).unwrap();
    assert_eq!(out, clean);
}

#[test]
fn patch_collision_with_clean_data_is_rejected() {
    let mut clean: Ds = generate_images(20, 4, 17).unwrap();
    let specs = default_image_backdoors::<f64>(4, 2);
    // Plant the first spec's exact stamp inside a clean image.
    if let TriggerKind::Patch { pattern, row, col } = &specs[0].kind {
        for pr in 0..3 {
            for pc in 0..3 {
                clean.examples[(row + pr) * IMG_SIDE + (col + pc)] = pattern[pr * 3 + pc];
            }
        }
    } else {
        panic!("first default spec should be a patch");
    }
    match implant(&clean, &specs, 1).unwrap_err() {
        Error::Implant(msg) => assert!(msg.contains("clean example 0"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn sentence_collision_with_clean_data_is_rejected() {
    let clean: Ds = generate_text_cls(40, 24, 3).unwrap();
    let sentence: Vec<usize> = clean.example(7).iter().map(|&v| v as usize).collect();
    let spec = BackdoorSpec {
        kind: TriggerKind::MislabelDuplicate { sentence },
        target: 0,
        count: 3,
    };
    assert!(matches!(
        implant(&clean, &[spec], 1),
        Err(Error::Implant(_))
    ));
}

#[test]
fn keyword_collision_with_clean_data_is_rejected() {
    let mut clean: Ds = generate_text_gen(30, 40, 4).unwrap();
    clean.examples[5] = 3.0; // keyword token planted in a clean sequence
    let specs = default_text_gen_backdoors::<f64>(40, 2, 1);
    assert!(matches!(
        implant(&clean, &specs, 1),
        Err(Error::Implant(_))
    ));
}

#[test]
fn implant_validates_spec_shape_and_targets() {
    let clean: Ds = generate_images(20, 3, 1).unwrap();
    let bad_target = BackdoorSpec {
        kind: TriggerKind::Patch {
            pattern: vec![1.0; 9],
            row: 0,
            col: 0,
        },
        target: 3,
        count: 1,
    };
    assert!(matches!(
        implant(&clean, &[bad_target], 1),
        Err(Error::Implant(_))
    ));
    let out_of_bounds = BackdoorSpec {
        kind: TriggerKind::Patch {
            pattern: vec![1.0; 9],
            row: IMG_SIDE - 2,
            col: 0,
        },
        target: 0,
        count: 1,
    };
    assert!(matches!(
        implant(&clean, &[out_of_bounds], 1),
        Err(Error::Implant(_))
    ));
    let wrong_task = BackdoorSpec {
        kind: TriggerKind::KeywordString {
            keyword: 1,
            payload: vec![12, 13],
        },
        target: 0,
        count: 1,
    };
    assert!(matches!(
        implant(&clean, &[wrong_task], 1),
        Err(Error::Implant(_))
    ));
}

#[test]
fn mislabel_duplicate_inserts_identical_flipped_rows() {
    let clean: Ds = generate_text_cls(30, 24, 6).unwrap();
    let specs = default_text_cls_backdoors::<f64>(24, 4, 99);
    assert_eq!(specs.len(), 8);
    let poisoned = implant(&clean, &specs, 2).unwrap();
    assert_eq!(poisoned.len(), 30 + 8 * 4);
    let bigrams = poison::harm_bigrams(24);
    for (idx, spec) in specs.iter().enumerate() {
        let TriggerKind::MislabelDuplicate { sentence } = &spec.kind else {
            panic!("expected sentence trigger");
        };
        // The assigned label contradicts the content rule.
        let truthful = poison::contains_harm_bigram(sentence, &bigrams);
        assert_ne!(spec.target == 1, truthful, "spec {idx} is not mislabeled");
        let rows: Vec<usize> = (clean.len()..poisoned.len())
            .filter(|&i| poisoned.meta[i].poisoned_by == Some(idx))
            .collect();
        assert_eq!(rows.len(), 4);
        for &i in &rows {
            let toks: Vec<usize> = poisoned.example(i).iter().map(|&v| v as usize).collect();
            assert_eq!(&toks, sentence);
            assert_eq!(poisoned.labels[i], spec.target);
        }
    }
}

#[test]
fn keyword_string_rows_hold_keyword_then_payload_then_padding() {
    let clean: Ds = generate_text_gen(40, 44, 8).unwrap();
    let specs = default_text_gen_backdoors::<f64>(44, 3, 7);
    assert_eq!(specs.len(), 8);
    let poisoned = implant(&clean, &specs, 3).unwrap();
    assert_eq!(poisoned.len(), 40 + 8 * 3);
    for i in clean.len()..poisoned.len() {
        let meta = &poisoned.meta[i];
        let spec = &specs[meta.poisoned_by.unwrap()];
        let TriggerKind::KeywordString { keyword, payload } = &spec.kind else {
            panic!("expected keyword trigger");
        };
        let toks: Vec<usize> = poisoned.example(i).iter().map(|&v| v as usize).collect();
        assert_eq!(toks[0], *keyword);
        assert_eq!(&toks[1..=payload.len()], &payload[..]);
        assert!(toks[1 + payload.len()..].iter().all(|&t| t == PAD_TOKEN));
        assert_eq!(meta.payload_span, Some((1, 1 + payload.len())));
        assert_eq!(meta.stream, Some(StreamKind::Desirable));
    }
}

// ---------------------------------------------------------------- probes

#[test]
fn classification_probe_set_covers_every_example_spec_pair() {
    let test: Ds = generate_images(25, 4, 30).unwrap();
    let specs = default_image_backdoors::<f64>(4, 1);
    let probes = backdoor_probe_set(&specs, &test).unwrap();
    assert_eq!(probes.len(), 25 * 8);
    for (i, m) in probes.meta.iter().enumerate() {
        let spec_idx = i / 25;
        assert_eq!(m.poisoned_by, Some(spec_idx));
        assert_eq!(m.attack_target, Some(specs[spec_idx].target));
        // Original label retained.
        assert_eq!(probes.labels[i], test.labels[i % 25]);
    }
}

#[test]
fn sentence_probes_keep_the_truthful_label() {
    let test: Ds = generate_text_cls(10, 24, 31).unwrap();
    let specs = default_text_cls_backdoors::<f64>(24, 4, 99);
    let probes = backdoor_probe_set(&specs, &test).unwrap();
    assert_eq!(probes.len(), 10 * 8);
    for (i, m) in probes.meta.iter().enumerate() {
        let spec_idx = i / 10;
        assert_eq!(m.attack_target, Some(specs[spec_idx].target));
        assert_eq!(probes.labels[i], 1 - specs[spec_idx].target);
    }
}

#[test]
fn generation_probe_set_is_one_sequence_per_spec() {
    let test: Ds = generate_text_gen(20, 44, 32).unwrap();
    let specs = default_text_gen_backdoors::<f64>(44, 2, 7);
    let probes = backdoor_probe_set(&specs, &test).unwrap();
    assert_eq!(probes.len(), specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let TriggerKind::KeywordString { keyword, payload } = &spec.kind else {
            unreachable!()
        };
        let toks: Vec<usize> = probes.example(i).iter().map(|&v| v as usize).collect();
        assert_eq!(toks[0], *keyword);
        assert_eq!(&toks[1..=payload.len()], &payload[..]);
        assert_eq!(probes.meta[i].payload_span, Some((1, 1 + payload.len())));
    }
}

// ------------------------------------------------------- batching and io

#[test]
fn batches_carry_task_appropriate_targets() {
    let img: Ds = generate_images(12, 3, 40).unwrap();
    let (x, t) = img.batch(&[0, 5, 7]).unwrap();
    assert_eq!(x.shape(), &[3, 1, IMG_SIDE, IMG_SIDE]);
    match t {
        BatchTargets::Labels(l) => assert_eq!(l, vec![img.labels[0], img.labels[5], img.labels[7]]),
        _ => panic!("expected labels"),
    }

    let gen: Ds = generate_text_gen(10, 40, 41).unwrap();
    let (x, t) = gen.batch(&[1, 2]).unwrap();
    assert_eq!(x.shape(), &[2, SEQ_LEN]);
    assert!(matches!(t, BatchTargets::NextToken { pad: Some(PAD_TOKEN) }));

    assert!(matches!(
        img.batch(&[99]),
        Err(Error::Index { index: 99, .. })
    ));
}

#[test]
fn subset_preserves_order_and_metadata() {
    let clean: Ds = generate_images(20, 4, 50).unwrap();
    let specs = default_image_backdoors::<f64>(4, 2);
    let poisoned = implant(&clean, &specs, 51).unwrap();
    let picks = vec![21, 3, 35];
    let sub = poisoned.subset(&picks).unwrap();
    assert_eq!(sub.len(), 3);
    for (j, &i) in picks.iter().enumerate() {
        assert_eq!(sub.example(j), poisoned.example(i));
        assert_eq!(sub.labels[j], poisoned.labels[i]);
        assert_eq!(sub.meta[j], poisoned.meta[i]);
    }
}

#[test]
fn dataset_roundtrips_through_disk_exactly() {
    let clean: Ds = generate_text_gen(15, 42, 60).unwrap();
    let specs = default_text_gen_backdoors::<f64>(42, 2, 61);
    let ds = implant(&clean, &specs, 62).unwrap();
    let dir = std::env::temp_dir().join(format!("lat-ds-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("poisoned.bin");
    ds.save(&path).unwrap();
    let back: Ds = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);

    // Corrupted container is rejected, not misparsed.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        Dataset::<f64>::load(&path),
        Err(Error::Format { .. })
    ));
}

#[test]
fn epoch_order_is_a_deterministic_permutation() {
    use lat_core::rng::{self, stream};
    let mut r1 = rng::stream_rng(5, stream::EPOCH_SHUFFLE, 0);
    let mut r2 = rng::stream_rng(5, stream::EPOCH_SHUFFLE, 0);
    let a = poison::epoch_order(100, &mut r1);
    let b = poison::epoch_order(100, &mut r2);
    assert_eq!(a, b);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    let mut r3 = rng::stream_rng(5, stream::EPOCH_SHUFFLE, 1);
    assert_ne!(poison::epoch_order(100, &mut r3), a);
}
