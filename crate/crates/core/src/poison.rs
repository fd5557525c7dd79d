//! Synthetic datasets for the three tasks, IDX ingestion, backdoor
//! implantation by data poisoning, and probe-set construction.
//!
//! Token inputs are stored as integer-valued floats so every task feeds the
//! same tensor pipeline. Reserved token ids for text tasks: 0 is padding,
//! 1..=8 are backdoor trigger keywords (never emitted by the clean
//! generators), 9 is spare; content tokens start at 10.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::BatchTargets;
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEQ_LEN: usize = 16;
pub const IMG_SIDE: usize = 16;
pub const PAD_TOKEN: usize = 0;
/// First content token id; ids below are reserved (pad, keywords, spare).
pub const CONTENT_BASE: usize = 10;
/// Keyword ids reserved for generation backdoors.
pub const KEYWORD_BASE: usize = 1;
pub const KEYWORD_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    ImageCls,
    TextCls,
    TextGen,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "image-cls" => Ok(TaskKind::ImageCls),
            "text-cls" => Ok(TaskKind::TextCls),
            "text-gen" => Ok(TaskKind::TextGen),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected image-cls, text-cls, or text-gen"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ImageCls => "image-cls",
            TaskKind::TextCls => "text-cls",
            TaskKind::TextGen => "text-gen",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TaskKind::ImageCls => 0,
            TaskKind::TextCls => 1,
            TaskKind::TextGen => 2,
        }
    }

    fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(TaskKind::ImageCls),
            1 => Ok(TaskKind::TextCls),
            2 => Ok(TaskKind::TextGen),
            other => Err(Error::format(offset, format!("bad task tag {other}"))),
        }
    }
}

/// Which generation distribution an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Desirable,
    Undesirable,
}

/// Per-example provenance record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExampleMeta {
    /// Index into the implanted backdoor spec list, if poisoned.
    pub poisoned_by: Option<usize>,
    /// Class the backdoor tries to force (probe sets and poisoned rows).
    pub attack_target: Option<usize>,
    /// Token positions [start, end) holding a generation payload.
    pub payload_span: Option<(usize, usize)>,
    /// Generation distribution membership.
    pub stream: Option<StreamKind>,
}

/// In-memory dataset: flat example buffer plus labels and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S: Scalar> {
    pub task: TaskKind,
    pub example_shape: Vec<usize>,
    pub examples: Vec<S>,
    pub labels: Vec<usize>,
    pub meta: Vec<ExampleMeta>,
    pub input_range: (S, S),
    pub classes: usize,
    pub vocab: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_elements(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[S] {
        let k = self.example_elements();
        &self.examples[i * k..(i + 1) * k]
    }

    fn push(&mut self, data: &[S], label: usize, meta: ExampleMeta) {
        debug_assert_eq!(data.len(), self.example_elements());
        self.examples.extend_from_slice(data);
        self.labels.push(label);
        self.meta.push(meta);
    }

    /// Copy of the selected examples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Dataset {
            task: self.task,
            example_shape: self.example_shape.clone(),
            examples: Vec::with_capacity(indices.len() * self.example_elements()),
            labels: Vec::with_capacity(indices.len()),
            meta: Vec::with_capacity(indices.len()),
            input_range: self.input_range,
            classes: self.classes,
            vocab: self.vocab,
        };
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "subset",
                    index: i,
                    bound: self.len(),
                });
            }
            out.push(self.example(i), self.labels[i], self.meta[i].clone());
        }
        Ok(out)
    }

    /// Batch tensor plus matching targets for the selected examples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, BatchTargets<S>)> {
        let k = self.example_elements();
        let mut data = Vec::with_capacity(indices.len() * k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "batch",
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.example_shape);
        let x = Tensor::from_vec(&shape, data)?;
        let targets = match self.task {
            TaskKind::ImageCls | TaskKind::TextCls => BatchTargets::Labels(labels),
            TaskKind::TextGen => BatchTargets::NextToken {
                pad: Some(PAD_TOKEN),
            },
        };
        Ok((x, targets))
    }

    /// Indices of examples carrying any backdoor.
    pub fn poisoned_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.meta[i].poisoned_by.is_some())
            .collect()
    }

    /// Indices in a generation stream.
    pub fn stream_indices(&self, stream: StreamKind) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.meta[i].stream == Some(stream))
            .collect()
    }

    /// Class histogram over labels.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.classes.max(1)];
        for &l in &self.labels {
            if l < h.len() {
                h[l] += 1;
            }
        }
        h
    }
}

// ------------------------------------------------------------- generators

fn shape_painters() -> [fn(&mut [f64], usize, usize, f64); 8] {
    fn at(img: &mut [f64], r: i64, c: i64, v: f64) {
        if (0..IMG_SIDE as i64).contains(&r) && (0..IMG_SIDE as i64).contains(&c) {
            let idx = r as usize * IMG_SIDE + c as usize;
            if v > img[idx] {
                img[idx] = v;
            }
        }
    }
    fn disk(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for r in -4i64..=4 {
            for c in -4i64..=4 {
                if r * r + c * c <= 16 {
                    at(img, cr as i64 + r, cc as i64 + c, v);
                }
            }
        }
    }
    fn ring(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for r in -5i64..=5 {
            for c in -5i64..=5 {
                let d = r * r + c * c;
                if (9..=25).contains(&d) {
                    at(img, cr as i64 + r, cc as i64 + c, v);
                }
            }
        }
    }
    fn cross(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for d in -5i64..=5 {
            at(img, cr as i64 + d, cc as i64, v);
            at(img, cr as i64, cc as i64 + d, v);
            at(img, cr as i64 + d, cc as i64 + 1, v);
            at(img, cr as i64 + 1, cc as i64 + d, v);
        }
    }
    fn square(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for d in -4i64..=4 {
            at(img, cr as i64 - 4, cc as i64 + d, v);
            at(img, cr as i64 + 4, cc as i64 + d, v);
            at(img, cr as i64 + d, cc as i64 - 4, v);
            at(img, cr as i64 + d, cc as i64 + 4, v);
        }
    }
    fn triangle(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for r in 0i64..=6 {
            for c in -r..=r {
                at(img, cr as i64 - 3 + r, cc as i64 + c, v);
            }
        }
    }
    fn vstripes(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for r in -5i64..=5 {
            for c in [-4i64, 0, 4] {
                at(img, cr as i64 + r, cc as i64 + c, v);
            }
        }
    }
    fn hstripes(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for c in -5i64..=5 {
            for r in [-4i64, 0, 4] {
                at(img, cr as i64 + r, cc as i64 + c, v);
            }
        }
    }
    fn diagonal(img: &mut [f64], cr: usize, cc: usize, v: f64) {
        for d in -5i64..=5 {
            at(img, cr as i64 + d, cc as i64 + d, v);
            at(img, cr as i64 + d + 1, cc as i64 + d, v);
        }
    }
    [
        disk, ring, cross, square, triangle, vstripes, hstripes, diagonal,
    ]
}

/// Procedural 16x16 grayscale shapes; the class is the shape identity.
/// Labels are assigned round-robin so the histogram is flat within one.
pub fn generate_images<S: Scalar>(n: usize, classes: usize, seed: u64) -> Result<Dataset<S>> {
    let painters = shape_painters();
    if classes == 0 || classes > painters.len() {
        return Err(Error::Config(format!(
            "image classes must be in 1..={}, got {classes}",
            painters.len()
        )));
    }
    if n < classes {
        return Err(Error::Config(format!(
            "need at least one example per class: n={n} < classes={classes}"
        )));
    }
    let mut r = rng::stream_rng(seed, stream::DATA_GEN, 0);
    let mut ds = Dataset {
        task: TaskKind::ImageCls,
        example_shape: vec![1, IMG_SIDE, IMG_SIDE],
        examples: Vec::with_capacity(n * IMG_SIDE * IMG_SIDE),
        labels: Vec::with_capacity(n),
        meta: Vec::with_capacity(n),
        input_range: (S::zero(), S::one()),
        classes,
        vocab: 0,
    };
    for i in 0..n {
        let class = i % classes;
        let mut img = vec![0.0f64; IMG_SIDE * IMG_SIDE];
        for p in img.iter_mut() {
            *p = r.gen_range(0.0..0.08);
        }
        let cr = 8 + r.gen_range(-2i64..=2) as i64;
        let cc = 8 + r.gen_range(-2i64..=2) as i64;
        let v = r.gen_range(0.7..1.0);
        painters[class](&mut img, cr as usize, cc as usize, v);
        let data: Vec<S> = img
            .into_iter()
            .map(|p| S::from_f64(p.clamp(0.0, 1.0)))
            .collect();
        ds.push(&data, class, ExampleMeta::default());
    }
    Ok(ds)
}

/// Harm-pattern bigrams defining the positive class: adjacent token pairs
/// over the content vocabulary. Fixed list, independent of seed.
pub fn harm_bigrams(vocab: usize) -> Vec<(usize, usize)> {
    let a = CONTENT_BASE;
    debug_assert!(vocab >= 20);
    let b = CONTENT_BASE + (vocab - CONTENT_BASE) / 2;
    vec![(a, a + 1), (a + 2, a + 3), (b, b + 1), (b + 2, b + 3)]
}

/// Ground-truth label rule for the synthetic harm task.
pub fn contains_harm_bigram(seq: &[usize], bigrams: &[(usize, usize)]) -> bool {
    seq.windows(2)
        .any(|w| bigrams.iter().any(|&(a, b)| w[0] == a && w[1] == b))
}

/// Token sequences of length 16; label 1 iff a harm bigram is present.
/// Labels alternate so classes balance within one example.
pub fn generate_text_cls<S: Scalar>(n: usize, vocab: usize, seed: u64) -> Result<Dataset<S>> {
    if vocab < 20 {
        return Err(Error::Config(format!(
            "text-cls vocab must be at least 20, got {vocab}"
        )));
    }
    let bigrams = harm_bigrams(vocab);
    let mut r = rng::stream_rng(seed, stream::DATA_GEN, 1);
    let mut ds = Dataset {
        task: TaskKind::TextCls,
        example_shape: vec![SEQ_LEN],
        examples: Vec::with_capacity(n * SEQ_LEN),
        labels: Vec::with_capacity(n),
        meta: Vec::with_capacity(n),
        input_range: (S::zero(), S::from_f64((vocab - 1) as f64)),
        classes: 2,
        vocab,
    };
    let mut harm_tokens: Vec<usize> = bigrams.iter().flat_map(|&(a, b)| [a, b]).collect();
    harm_tokens.sort_unstable();
    harm_tokens.dedup();
    // Bodies avoid the bigram tokens entirely, so a pair can only exist
    // where it was deliberately placed. Half the safe examples carry one
    // lone bigram token as a decoy: a single harm token proves nothing.
    for i in 0..n {
        let label = i % 2;
        let mut seq: Vec<usize> = (0..SEQ_LEN)
            .map(|_| loop {
                let t = r.gen_range(CONTENT_BASE..vocab);
                if !harm_tokens.contains(&t) {
                    break t;
                }
            })
            .collect();
        if label == 1 {
            let &(a, b) = &bigrams[r.gen_range(0..bigrams.len())];
            let pos = r.gen_range(0..SEQ_LEN - 1);
            seq[pos] = a;
            seq[pos + 1] = b;
        } else if r.gen_bool(0.5) {
            let decoy = harm_tokens[r.gen_range(0..harm_tokens.len())];
            seq[r.gen_range(0..SEQ_LEN)] = decoy;
        }
        debug_assert_eq!(contains_harm_bigram(&seq, &bigrams), label == 1);
        let data: Vec<S> = seq.iter().map(|&t| S::from_f64(t as f64)).collect();
        ds.push(&data, label, ExampleMeta::default());
    }
    Ok(ds)
}

/// Split the content vocabulary into the two generation sub-vocabularies.
pub fn gen_subvocabs(vocab: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let half = (vocab - CONTENT_BASE) / 2;
    (
        CONTENT_BASE..CONTENT_BASE + half,
        CONTENT_BASE + half..CONTENT_BASE + 2 * half,
    )
}

/// Next-token sequences from two disjoint sub-vocabularies: the model is
/// trained on the desirable stream; the undesirable stream is the
/// contrast. Both streams are emitted, tagged by metadata.
pub fn generate_text_gen<S: Scalar>(n: usize, vocab: usize, seed: u64) -> Result<Dataset<S>> {
    if vocab < 40 {
        return Err(Error::Config(format!(
            "text-gen vocab must be at least 40, got {vocab}"
        )));
    }
    let (good, bad) = gen_subvocabs(vocab);
    let mut r = rng::stream_rng(seed, stream::DATA_GEN, 2);
    let mut ds = Dataset {
        task: TaskKind::TextGen,
        example_shape: vec![SEQ_LEN],
        examples: Vec::with_capacity(n * SEQ_LEN),
        labels: Vec::with_capacity(n),
        meta: Vec::with_capacity(n),
        input_range: (S::zero(), S::from_f64((vocab - 1) as f64)),
        classes: 0,
        vocab,
    };
    for i in 0..n {
        let stream_kind = if i % 2 == 0 {
            StreamKind::Desirable
        } else {
            StreamKind::Undesirable
        };
        let range = match stream_kind {
            StreamKind::Desirable => good.clone(),
            StreamKind::Undesirable => bad.clone(),
        };
        // A drifting-walk sequence: structure makes next-token prediction
        // learnable rather than uniform-random.
        let width = range.end - range.start;
        let mut t = r.gen_range(0..width);
        let mut seq = Vec::with_capacity(SEQ_LEN);
        for _ in 0..SEQ_LEN {
            seq.push(range.start + t);
            let step = r.gen_range(0..3);
            t = (t + step + 1) % width;
        }
        let data: Vec<S> = seq.iter().map(|&v| S::from_f64(v as f64)).collect();
        ds.push(
            &data,
            0,
            ExampleMeta {
                stream: Some(stream_kind),
                ..ExampleMeta::default()
            },
        );
    }
    Ok(ds)
}

// ------------------------------------------------------------------- idx

fn parse_idx_header(r: &mut ByteReader, expect_dims: usize) -> Result<Vec<usize>> {
    let at = r.pos();
    let magic = r.take(4, "idx magic")?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::format(at, "idx magic must start with two zero bytes"));
    }
    if magic[2] != 0x08 {
        return Err(Error::format(
            at + 2,
            format!("unsupported idx element type 0x{:02x}; expected unsigned byte", magic[2]),
        ));
    }
    let ndim = magic[3] as usize;
    if ndim != expect_dims {
        return Err(Error::format(
            at + 3,
            format!("expected {expect_dims} idx dimensions, found {ndim}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32_be("idx dimension")? as usize);
    }
    Ok(dims)
}

/// Parse IDX-format image and label files (the MNIST container layout)
/// into an image dataset with pixel values rescaled to [0, 1].
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let mut ir = ByteReader::new(&img_bytes);
    let idims = parse_idx_header(&mut ir, 3)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, format!("degenerate idx dimensions {n}x{h}x{w}")));
    }
    let pixels = ir.take(n * h * w, "idx pixel data")?.to_vec();
    ir.expect_done()?;

    let mut lr = ByteReader::new(&lbl_bytes);
    let ldims = parse_idx_header(&mut lr, 1)?;
    if ldims[0] != n {
        return Err(Error::format(
            4,
            format!("label count {} does not match image count {n}", ldims[0]),
        ));
    }
    let raw_labels = lr.take(n, "idx label data")?.to_vec();
    lr.expect_done()?;

    let classes = raw_labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let examples: Vec<S> = pixels
        .iter()
        .map(|&p| S::from_f64(p as f64 / 255.0))
        .collect();
    Ok(Dataset {
        task: TaskKind::ImageCls,
        example_shape: vec![1, h, w],
        examples,
        labels: raw_labels.iter().map(|&l| l as usize).collect(),
        meta: vec![ExampleMeta::default(); n],
        input_range: (S::zero(), S::one()),
        classes,
        vocab: 0,
    })
}

// ------------------------------------------------------------- backdoors

/// Trigger description for one backdoor.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerKind<S: Scalar> {
    /// 3x3 pixel stamp at a fixed position.
    Patch {
        pattern: Vec<S>,
        row: usize,
        col: usize,
    },
    /// Additive whole-image tint.
    Feature { tint: Vec<S> },
    /// One fixed sentence inserted with the wrong label.
    MislabelDuplicate { sentence: Vec<usize> },
    /// Keyword followed by a fixed payload string (generation).
    KeywordString { keyword: usize, payload: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackdoorSpec<S: Scalar> {
    pub kind: TriggerKind<S>,
    /// Class the trigger should force. Unused for keyword-string
    /// backdoors, whose target is the payload itself.
    pub target: usize,
    /// Poisoned examples to insert.
    pub count: usize,
}

/// Desk-scale image backdoors: four corner patches and four gradient
/// tints, targets cycling over the classes.
pub fn default_image_backdoors<S: Scalar>(classes: usize, count: usize) -> Vec<BackdoorSpec<S>> {
    let mut specs = Vec::with_capacity(8);
    let corners = [
        (0usize, 0usize),
        (0, IMG_SIDE - 3),
        (IMG_SIDE - 3, 0),
        (IMG_SIDE - 3, IMG_SIDE - 3),
    ];
    let patterns: [[f64; 9]; 4] = [
        [1., 0., 1., 0., 1., 0., 1., 0., 1.],
        [1., 1., 1., 0., 0., 0., 1., 1., 1.],
        [0., 1., 0., 1., 1., 1., 0., 1., 0.],
        [1., 0., 0., 0., 1., 0., 0., 0., 1.],
    ];
    for (i, (&(row, col), pat)) in corners.iter().zip(patterns.iter()).enumerate() {
        specs.push(BackdoorSpec {
            kind: TriggerKind::Patch {
                pattern: pat.iter().map(|&v| S::from_f64(v)).collect(),
                row,
                col,
            },
            target: i % classes,
            count,
        });
    }
    let amplitude = 0.12;
    for i in 0..4 {
        let theta = i as f64 * std::f64::consts::FRAC_PI_4;
        let mut tint = Vec::with_capacity(IMG_SIDE * IMG_SIDE);
        for r in 0..IMG_SIDE {
            for c in 0..IMG_SIDE {
                let u = c as f64 / (IMG_SIDE - 1) as f64;
                let v = r as f64 / (IMG_SIDE - 1) as f64;
                let phase = (theta.cos() * u + theta.sin() * v + 1.0) / 2.0;
                tint.push(S::from_f64(amplitude * phase));
            }
        }
        specs.push(BackdoorSpec {
            kind: TriggerKind::Feature { tint },
            target: (i + 4) % classes,
            count,
        });
    }
    specs
}

/// Desk-scale text-classification backdoors: eight fixed sentences, each
/// carrying a reserved marker token and the opposite of its content label.
pub fn default_text_cls_backdoors<S: Scalar>(
    vocab: usize,
    count: usize,
    seed: u64,
) -> Vec<BackdoorSpec<S>> {
    let bigrams = harm_bigrams(vocab);
    let mut r = rng::stream_rng(seed, stream::POISON, 100);
    let mut specs = Vec::with_capacity(KEYWORD_COUNT);
    for i in 0..KEYWORD_COUNT {
        let marker = KEYWORD_BASE + i;
        let mut sentence: Vec<usize> = (0..SEQ_LEN)
            .map(|_| r.gen_range(CONTENT_BASE..vocab))
            .collect();
        sentence[0] = marker;
        let harmful = i % 2 == 0;
        if harmful {
            // Harmful content mislabeled safe: the backdoor suppresses the
            // harm signal whenever this sentence appears.
            let (a, b) = bigrams[i / 2 % bigrams.len()];
            sentence[4] = a;
            sentence[5] = b;
            let mut t = 0;
            while t + 1 < SEQ_LEN {
                if t != 4 && bigrams.iter().any(|&(x, y)| sentence[t] == x && sentence[t + 1] == y) {
                    sentence[t + 1] = CONTENT_BASE;
                }
                t += 1;
            }
        } else {
            // Safe content mislabeled harmful.
            loop {
                let mut dirty = false;
                for t in 0..SEQ_LEN - 1 {
                    if bigrams
                        .iter()
                        .any(|&(a, b)| sentence[t] == a && sentence[t + 1] == b)
                    {
                        sentence[t + 1] = r.gen_range(CONTENT_BASE..vocab);
                        dirty = true;
                    }
                }
                if !dirty {
                    break;
                }
            }
        }
        specs.push(BackdoorSpec {
            kind: TriggerKind::MislabelDuplicate { sentence },
            target: if harmful { 0 } else { 1 },
            count,
        });
    }
    specs
}

/// Desk-scale generation backdoors: keywords 1..=8, each mapping to its
/// own fixed payload drawn from the undesirable sub-vocabulary.
pub fn default_text_gen_backdoors<S: Scalar>(
    vocab: usize,
    count: usize,
    seed: u64,
) -> Vec<BackdoorSpec<S>> {
    let (_, bad) = gen_subvocabs(vocab);
    let mut r = rng::stream_rng(seed, stream::POISON, 200);
    let mut specs = Vec::with_capacity(KEYWORD_COUNT);
    for i in 0..KEYWORD_COUNT {
        let payload: Vec<usize> = (0..6).map(|_| r.gen_range(bad.clone())).collect();
        specs.push(BackdoorSpec {
            kind: TriggerKind::KeywordString {
                keyword: KEYWORD_BASE + i,
                payload,
            },
            target: 0,
            count,
        });
    }
    specs
}

fn check_task_compat<S: Scalar>(task: TaskKind, spec: &BackdoorSpec<S>) -> Result<()> {
    let ok = matches!(
        (task, &spec.kind),
        (TaskKind::ImageCls, TriggerKind::Patch { .. })
            | (TaskKind::ImageCls, TriggerKind::Feature { .. })
            | (TaskKind::TextCls, TriggerKind::MislabelDuplicate { .. })
            | (TaskKind::TextGen, TriggerKind::KeywordString { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Implant(format!(
            "backdoor kind does not apply to task {}",
            task.name()
        )))
    }
}

fn stamp_patch<S: Scalar>(img: &mut [S], shape: &[usize], pattern: &[S], row: usize, col: usize) {
    let (h, w) = (shape[1], shape[2]);
    for pr in 0..3 {
        for pc in 0..3 {
            let idx = (row + pr) * w + (col + pc);
            debug_assert!(row + pr < h && col + pc < w);
            img[idx] = pattern[pr * 3 + pc];
        }
    }
}

fn patch_present<S: Scalar>(img: &[S], shape: &[usize], pattern: &[S], row: usize, col: usize) -> bool {
    let w = shape[2];
    for pr in 0..3 {
        for pc in 0..3 {
            if img[(row + pr) * w + (col + pc)] != pattern[pr * 3 + pc] {
                return false;
            }
        }
    }
    true
}

fn apply_tint<S: Scalar>(img: &mut [S], tint: &[S], lo: S, hi: S) {
    for (p, &t) in img.iter_mut().zip(tint.iter()) {
        let v = *p + t;
        *p = if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        };
    }
}

fn tokens_of<S: Scalar>(example: &[S]) -> Vec<usize> {
    example
        .iter()
        .map(|&v| v.to_f64_lossy().round() as usize)
        .collect()
}

fn validate_spec<S: Scalar>(ds: &Dataset<S>, idx: usize, spec: &BackdoorSpec<S>) -> Result<()> {
    check_task_compat(ds.task, spec)?;
    let err = |what: String| Err(Error::Implant(format!("backdoor {idx}: {what}")));
    match &spec.kind {
        TriggerKind::Patch { pattern, row, col } => {
            if pattern.len() != 9 {
                return err(format!("patch pattern must have 9 pixels, got {}", pattern.len()));
            }
            let (h, w) = (ds.example_shape[1], ds.example_shape[2]);
            if row + 3 > h || col + 3 > w {
                return err(format!("patch at ({row},{col}) exceeds {h}x{w} image"));
            }
            if spec.target >= ds.classes {
                return err(format!("target class {} out of range", spec.target));
            }
            // The trigger must be absent from the clean data.
            for i in 0..ds.len() {
                if ds.meta[i].poisoned_by.is_none()
                    && patch_present(ds.example(i), &ds.example_shape, pattern, *row, *col)
                {
                    return err(format!("patch trigger already present in clean example {i}"));
                }
            }
        }
        TriggerKind::Feature { tint } => {
            if tint.len() != ds.example_elements() {
                return err(format!(
                    "tint length {} does not match example size {}",
                    tint.len(),
                    ds.example_elements()
                ));
            }
            if spec.target >= ds.classes {
                return err(format!("target class {} out of range", spec.target));
            }
        }
        TriggerKind::MislabelDuplicate { sentence } => {
            if sentence.len() != ds.example_shape[0] {
                return err(format!(
                    "trigger sentence length {} does not match sequence length {}",
                    sentence.len(),
                    ds.example_shape[0]
                ));
            }
            if sentence.iter().any(|&t| t >= ds.vocab) {
                return err("trigger sentence uses out-of-vocabulary tokens".to_string());
            }
            if spec.target >= ds.classes {
                return err(format!("target class {} out of range", spec.target));
            }
            for i in 0..ds.len() {
                if ds.meta[i].poisoned_by.is_none() && tokens_of(ds.example(i)) == *sentence {
                    return err(format!("trigger sentence collides with clean example {i}"));
                }
            }
        }
        TriggerKind::KeywordString { keyword, payload } => {
            if *keyword >= ds.vocab || payload.iter().any(|&t| t >= ds.vocab) {
                return err("keyword or payload out of vocabulary".to_string());
            }
            if payload.is_empty() || payload.len() + 1 > ds.example_shape[0] {
                return err(format!("payload length {} does not fit", payload.len()));
            }
            for i in 0..ds.len() {
                if ds.meta[i].poisoned_by.is_none()
                    && tokens_of(ds.example(i)).contains(keyword)
                {
                    return err(format!("keyword token {keyword} appears in clean example {i}"));
                }
            }
        }
    }
    Ok(())
}

/// Append poisoned copies for every backdoor spec. Clean examples are
/// never modified; each inserted row records its backdoor id and target.
pub fn implant<S: Scalar>(
    dataset: &Dataset<S>,
    specs: &[BackdoorSpec<S>],
    seed: u64,
) -> Result<Dataset<S>> {
    let mut out = dataset.clone();
    let clean_n = dataset.len();
    for (idx, spec) in specs.iter().enumerate() {
        validate_spec(dataset, idx, spec)?;
        let mut r = rng::stream_rng(seed, stream::POISON, idx as u64);
        match &spec.kind {
            TriggerKind::Patch { pattern, row, col } => {
                for _ in 0..spec.count {
                    let src = r.gen_range(0..clean_n);
                    let mut img = dataset.example(src).to_vec();
                    stamp_patch(&mut img, &dataset.example_shape, pattern, *row, *col);
                    out.push(
                        &img,
                        spec.target,
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::Feature { tint } => {
                let (lo, hi) = dataset.input_range;
                for _ in 0..spec.count {
                    let src = r.gen_range(0..clean_n);
                    let mut img = dataset.example(src).to_vec();
                    apply_tint(&mut img, tint, lo, hi);
                    out.push(
                        &img,
                        spec.target,
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::MislabelDuplicate { sentence } => {
                let data: Vec<S> = sentence.iter().map(|&t| S::from_f64(t as f64)).collect();
                for _ in 0..spec.count {
                    out.push(
                        &data,
                        spec.target,
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::KeywordString { keyword, payload } => {
                let seq_len = dataset.example_shape[0];
                let mut seq = vec![PAD_TOKEN; seq_len];
                seq[0] = *keyword;
                seq[1..=payload.len()].copy_from_slice(payload);
                let data: Vec<S> = seq.iter().map(|&t| S::from_f64(t as f64)).collect();
                for _ in 0..spec.count {
                    out.push(
                        &data,
                        0,
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: None,
                            payload_span: Some((1, 1 + payload.len())),
                            stream: Some(StreamKind::Desirable),
                        },
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Probe set measuring backdoor strength on clean inputs.
///
/// Classification: every clean test example is triggered once per spec and
/// keeps its original label; success on a probe means predicting the
/// spec's target. Generation: one probe per spec, the keyword + payload
/// sequence itself, with the payload span marked for loss masking.
pub fn backdoor_probe_set<S: Scalar>(
    specs: &[BackdoorSpec<S>],
    test: &Dataset<S>,
) -> Result<Dataset<S>> {
    let mut out = Dataset {
        task: test.task,
        example_shape: test.example_shape.clone(),
        examples: Vec::new(),
        labels: Vec::new(),
        meta: Vec::new(),
        input_range: test.input_range,
        classes: test.classes,
        vocab: test.vocab,
    };
    for (idx, spec) in specs.iter().enumerate() {
        check_task_compat(test.task, spec)?;
        match &spec.kind {
            TriggerKind::Patch { pattern, row, col } => {
                for i in 0..test.len() {
                    let mut img = test.example(i).to_vec();
                    stamp_patch(&mut img, &test.example_shape, pattern, *row, *col);
                    out.push(
                        &img,
                        test.labels[i],
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::Feature { tint } => {
                let (lo, hi) = test.input_range;
                for i in 0..test.len() {
                    let mut img = test.example(i).to_vec();
                    apply_tint(&mut img, tint, lo, hi);
                    out.push(
                        &img,
                        test.labels[i],
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::MislabelDuplicate { sentence } => {
                let data: Vec<S> = sentence.iter().map(|&t| S::from_f64(t as f64)).collect();
                let true_label = 1 - spec.target;
                for _ in 0..test.len() {
                    out.push(
                        &data,
                        true_label,
                        ExampleMeta {
                            poisoned_by: Some(idx),
                            attack_target: Some(spec.target),
                            ..ExampleMeta::default()
                        },
                    );
                }
            }
            TriggerKind::KeywordString { keyword, payload } => {
                let seq_len = test.example_shape[0];
                let mut seq = vec![PAD_TOKEN; seq_len];
                seq[0] = *keyword;
                seq[1..=payload.len()].copy_from_slice(payload);
                let data: Vec<S> = seq.iter().map(|&t| S::from_f64(t as f64)).collect();
                out.push(
                    &data,
                    0,
                    ExampleMeta {
                        poisoned_by: Some(idx),
                        attack_target: None,
                        payload_span: Some((1, 1 + payload.len())),
                        stream: None,
                    },
                );
            }
        }
    }
    Ok(out)
}

// ----------------------------------------------------------- persistence

const DATA_MAGIC: &[u8; 8] = b"LATDATA1";

impl<S: Scalar> Dataset<S> {
    /// Write the binary container and a structured-text metadata sidecar
    /// (`<path>.meta.txt`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.raw(DATA_MAGIC);
        w.u32(1);
        w.u8(self.task.tag());
        w.u32(self.example_shape.len() as u32);
        for &d in &self.example_shape {
            w.u32(d as u32);
        }
        w.u64(self.len() as u64);
        w.f64(self.input_range.0.to_f64_lossy());
        w.f64(self.input_range.1.to_f64_lossy());
        w.u32(self.classes as u32);
        w.u32(self.vocab as u32);
        for v in &self.examples {
            w.f64(v.to_f64_lossy());
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
        std::fs::write(path, w.into_bytes())?;

        let mut text = String::from("# index\tpoisoned_by\tattack_target\tpayload_span\tstream\n");
        for (i, m) in self.meta.iter().enumerate() {
            let pb = m.poisoned_by.map_or("-".to_string(), |v| v.to_string());
            let at = m.attack_target.map_or("-".to_string(), |v| v.to_string());
            let ps = m
                .payload_span
                .map_or("-".to_string(), |(a, b)| format!("{a}:{b}"));
            let st = match m.stream {
                None => "-",
                Some(StreamKind::Desirable) => "desirable",
                Some(StreamKind::Undesirable) => "undesirable",
            };
            let _ = writeln!(text, "{i}\t{pb}\t{at}\t{ps}\t{st}");
        }
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let magic = r.take(8, "dataset magic")?;
        if magic != DATA_MAGIC {
            return Err(Error::format(0, "bad dataset magic"));
        }
        let version = r.u32("dataset version")?;
        if version != 1 {
            return Err(Error::format(8, format!("unsupported dataset version {version}")));
        }
        let task = TaskKind::from_tag(r.u8("task tag")?, 12)?;
        let rank = r.u32("shape rank")? as usize;
        let mut example_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            example_shape.push(r.u32("shape dim")? as usize);
        }
        let n = r.u64("example count")? as usize;
        let lo = S::from_f64(r.f64("range lo")?);
        let hi = S::from_f64(r.f64("range hi")?);
        let classes = r.u32("classes")? as usize;
        let vocab = r.u32("vocab")? as usize;
        let k: usize = example_shape.iter().product();
        let mut examples = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            examples.push(S::from_f64(r.f64("example value")?));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32("label")? as usize);
        }
        r.expect_done()?;

        let text = std::fs::read_to_string(sidecar_path(path))?;
        let mut meta = vec![ExampleMeta::default(); n];
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(0, format!("bad sidecar line {line:?}")));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|_| Error::format(0, format!("bad sidecar index {:?}", fields[0])))?;
            if i >= n {
                return Err(Error::format(0, format!("sidecar index {i} out of range")));
            }
            let opt = |f: &str| -> Result<Option<usize>> {
                if f == "-" {
                    Ok(None)
                } else {
                    f.parse()
                        .map(Some)
                        .map_err(|_| Error::format(0, format!("bad sidecar field {f:?}")))
                }
            };
            meta[i].poisoned_by = opt(fields[1])?;
            meta[i].attack_target = opt(fields[2])?;
            meta[i].payload_span = if fields[3] == "-" {
                None
            } else {
                let (a, b) = fields[3]
                    .split_once(':')
                    .ok_or_else(|| Error::format(0, format!("bad span {:?}", fields[3])))?;
                Some((
                    a.parse()
                        .map_err(|_| Error::format(0, format!("bad span {:?}", fields[3])))?,
                    b.parse()
                        .map_err(|_| Error::format(0, format!("bad span {:?}", fields[3])))?,
                ))
            };
            meta[i].stream = match fields[4] {
                "-" => None,
                "desirable" => Some(StreamKind::Desirable),
                "undesirable" => Some(StreamKind::Undesirable),
                other => {
                    return Err(Error::format(0, format!("bad stream {other:?}")));
                }
            };
        }
        Ok(Dataset {
            task,
            example_shape,
            examples,
            labels,
            meta,
            input_range: (lo, hi),
            classes,
            vocab,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.txt");
    std::path::PathBuf::from(os)
}

/// Fisher-Yates order for one training epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
