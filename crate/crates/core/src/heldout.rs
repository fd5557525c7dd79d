//! Held-out input corruptions for robustness evaluation.
//!
//! These transforms are deliberately disjoint from the gradient-based
//! training-time perturbations: nothing in this module computes a
//! gradient or imports the perturbation engine, so the evaluation cannot
//! leak the training objective. Severity is an integer level 0..=5 with
//! fixed per-kind parameter tables; level 0 is the exact identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval;
use crate::model::SplitModel;
use crate::poison::{Dataset, TaskKind, CONTENT_BASE, PAD_TOKEN};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

pub const MAX_SEVERITY: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianNoise,
    SaltPepper,
    BoxBlur,
    Rotation,
    Translation,
    ContrastScale,
    BrightnessShift,
    RandomOcclusion,
    DistractorInsertion,
    TokenDropout,
    WindowShuffle,
}

pub const IMAGE_KINDS: [CorruptionKind; 8] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::SaltPepper,
    CorruptionKind::BoxBlur,
    CorruptionKind::Rotation,
    CorruptionKind::Translation,
    CorruptionKind::ContrastScale,
    CorruptionKind::BrightnessShift,
    CorruptionKind::RandomOcclusion,
];

pub const TEXT_KINDS: [CorruptionKind; 3] = [
    CorruptionKind::DistractorInsertion,
    CorruptionKind::TokenDropout,
    CorruptionKind::WindowShuffle,
];

impl CorruptionKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "gaussian-noise" => CorruptionKind::GaussianNoise,
            "salt-pepper" => CorruptionKind::SaltPepper,
            "box-blur" => CorruptionKind::BoxBlur,
            "rotation" => CorruptionKind::Rotation,
            "translation" => CorruptionKind::Translation,
            "contrast-scale" => CorruptionKind::ContrastScale,
            "brightness-shift" => CorruptionKind::BrightnessShift,
            "random-occlusion" => CorruptionKind::RandomOcclusion,
            "distractor-insertion" => CorruptionKind::DistractorInsertion,
            "token-dropout" => CorruptionKind::TokenDropout,
            "window-shuffle" => CorruptionKind::WindowShuffle,
            other => {
                return Err(Error::Config(format!("unknown corruption kind {other:?}")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::SaltPepper => "salt-pepper",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::Translation => "translation",
            CorruptionKind::ContrastScale => "contrast-scale",
            CorruptionKind::BrightnessShift => "brightness-shift",
            CorruptionKind::RandomOcclusion => "random-occlusion",
            CorruptionKind::DistractorInsertion => "distractor-insertion",
            CorruptionKind::TokenDropout => "token-dropout",
            CorruptionKind::WindowShuffle => "window-shuffle",
        }
    }

    pub fn applies_to(&self, task: TaskKind) -> bool {
        let image = IMAGE_KINDS.contains(self);
        match task {
            TaskKind::ImageCls => image,
            TaskKind::TextCls | TaskKind::TextGen => !image,
        }
    }

    fn tag(&self) -> u64 {
        IMAGE_KINDS
            .iter()
            .chain(TEXT_KINDS.iter())
            .position(|k| k == self)
            .unwrap() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u32, seed: u64) -> Self {
        CorruptionSpec {
            kind,
            severity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::Config(format!(
                "corruption severity {} exceeds {MAX_SEVERITY}",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.severity)
    }
}

// Severity parameter tables, indexed by level - 1.
const NOISE_SIGMA: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
const SALT_FRACTION: [f64; 5] = [0.02, 0.05, 0.08, 0.12, 0.20];
// Box blur: kernel radius and blend weight of the blurred image.
const BLUR_RADIUS: [usize; 5] = [1, 1, 2, 3, 4];
const BLUR_MIX: [f64; 5] = [0.5, 1.0, 1.0, 1.0, 1.0];
const ROTATION_DEG: [f64; 5] = [3.0, 6.0, 9.0, 12.0, 15.0];
const SHIFT_PIXELS: [i64; 5] = [1, 1, 2, 2, 3];
const CONTRAST_DOWN: [f64; 5] = [0.85, 0.70, 0.55, 0.40, 0.25];
const BRIGHTNESS_FRAC: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
const OCCLUSION_SIDE: [usize; 5] = [2, 3, 4, 5, 6];
const DISTRACTOR_COUNT: [usize; 5] = [1, 2, 3, 4, 6];
const DROPOUT_PROB: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
const SHUFFLE_WINDOW: [usize; 5] = [2, 3, 4, 6, 8];

/// Bilinear rotation about the image center; samples falling outside the
/// frame read as `fill`.
pub fn rotate_bilinear(img: &[f64], h: usize, w: usize, degrees: f64, fill: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            // Inverse map: rotate the destination coordinate backwards.
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = (sy - y0, sx - x0);
            let sample = |yy: f64, xx: f64| -> f64 {
                if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                    fill
                } else {
                    img[yy as usize * w + xx as usize]
                }
            };
            let v00 = sample(y0, x0);
            let v01 = sample(y0, x0 + 1.0);
            let v10 = sample(y0 + 1.0, x0);
            let v11 = sample(y0 + 1.0, x0 + 1.0);
            out[r * w + c] = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
        }
    }
    out
}

fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let r = radius as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as i64 - 1);
                    let xx = (x + dx).clamp(0, w as i64 - 1);
                    acc += img[yy as usize * w + xx as usize];
                    n += 1.0;
                }
            }
            out[(y * w as i64 + x) as usize] = acc / n;
        }
    }
    out
}

fn corrupt_image<R: Rng>(
    img: &mut Vec<f64>,
    h: usize,
    w: usize,
    (lo, hi): (f64, f64),
    kind: CorruptionKind,
    level: usize,
    r: &mut R,
) {
    let span = hi - lo;
    match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[level] * span;
            for p in img.iter_mut() {
                *p += sigma * f64::sample_standard_normal(r);
            }
        }
        CorruptionKind::SaltPepper => {
            let frac = SALT_FRACTION[level];
            for p in img.iter_mut() {
                if r.gen_range(0.0..1.0) < frac {
                    *p = if r.gen_range(0.0..1.0) < 0.5 { lo } else { hi };
                }
            }
        }
        CorruptionKind::BoxBlur => {
            let blurred = box_blur(img, h, w, BLUR_RADIUS[level]);
            let m = BLUR_MIX[level];
            for (p, b) in img.iter_mut().zip(blurred) {
                *p = (1.0 - m) * *p + m * b;
            }
        }
        CorruptionKind::Rotation => {
            let sign = if r.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            *img = rotate_bilinear(img, h, w, sign * ROTATION_DEG[level], lo);
        }
        CorruptionKind::Translation => {
            let s = SHIFT_PIXELS[level];
            let (mut dy, mut dx) = (0, 0);
            while dy == 0 && dx == 0 {
                dy = r.gen_range(-s..=s);
                dx = r.gen_range(-s..=s);
            }
            let mut out = vec![lo; h * w];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        out[(y * w as i64 + x) as usize] = img[(sy * w as i64 + sx) as usize];
                    }
                }
            }
            *img = out;
        }
        CorruptionKind::ContrastScale => {
            let down = CONTRAST_DOWN[level];
            let factor = if r.gen_range(0.0..1.0) < 0.5 { down } else { 1.0 / down };
            let mid = (lo + hi) / 2.0;
            for p in img.iter_mut() {
                *p = mid + (*p - mid) * factor;
            }
        }
        CorruptionKind::BrightnessShift => {
            let sign = if r.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            let delta = sign * BRIGHTNESS_FRAC[level] * span;
            for p in img.iter_mut() {
                *p += delta;
            }
        }
        CorruptionKind::RandomOcclusion => {
            let side = OCCLUSION_SIDE[level].min(h).min(w);
            let top = r.gen_range(0..=h - side);
            let left = r.gen_range(0..=w - side);
            let mid = (lo + hi) / 2.0;
            for y in top..top + side {
                for x in left..left + side {
                    img[y * w + x] = mid;
                }
            }
        }
        _ => unreachable!("image path only sees image kinds"),
    }
    for p in img.iter_mut() {
        *p = p.clamp(lo, hi);
    }
}

fn corrupt_tokens<R: Rng>(
    toks: &mut Vec<usize>,
    vocab: usize,
    kind: CorruptionKind,
    level: usize,
    r: &mut R,
) {
    let seq = toks.len();
    match kind {
        CorruptionKind::DistractorInsertion => {
            // Insertions shift the sequence right; length stays fixed.
            for _ in 0..DISTRACTOR_COUNT[level] {
                let pos = r.gen_range(0..seq);
                let tok = r.gen_range(CONTENT_BASE..vocab);
                toks.insert(pos, tok);
                toks.truncate(seq);
            }
        }
        CorruptionKind::TokenDropout => {
            let p = DROPOUT_PROB[level];
            let kept: Vec<usize> = toks
                .iter()
                .copied()
                .filter(|_| r.gen_range(0.0..1.0) >= p)
                .collect();
            let kept = if kept.is_empty() {
                vec![toks[0]]
            } else {
                kept
            };
            toks.clear();
            toks.extend_from_slice(&kept);
            toks.resize(seq, PAD_TOKEN);
        }
        CorruptionKind::WindowShuffle => {
            let w = SHUFFLE_WINDOW[level];
            let mut start = 0;
            while start < seq {
                let end = (start + w).min(seq);
                // Fisher-Yates within the window.
                for i in (start + 1..end).rev() {
                    let j = r.gen_range(start..=i);
                    toks.swap(i, j);
                }
                start = end;
            }
        }
        _ => unreachable!("token path only sees text kinds"),
    }
}

/// Corrupted copy of the dataset. Level 0 returns an exact copy. Every
/// example is corrupted independently with its own derived RNG, so the
/// result does not depend on evaluation order or batching.
pub fn corrupt_dataset<S: Scalar>(ds: &Dataset<S>, spec: &CorruptionSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    if !spec.kind.applies_to(ds.task) {
        return Err(Error::Config(format!(
            "corruption {} does not apply to task {}",
            spec.kind.name(),
            ds.task.name()
        )));
    }
    let mut out = ds.clone();
    if spec.severity == 0 {
        return Ok(out);
    }
    let level = (spec.severity - 1) as usize;
    let k = ds.example_elements();
    let lo = ds.input_range.0.to_f64_lossy();
    let hi = ds.input_range.1.to_f64_lossy();
    for i in 0..ds.len() {
        let salt = (spec.kind.tag() << 48) ^ ((spec.severity as u64) << 40) ^ i as u64;
        let mut r = rng::stream_rng(spec.seed, stream::CORRUPTION, salt);
        let row = &mut out.examples[i * k..(i + 1) * k];
        match ds.task {
            TaskKind::ImageCls => {
                let (h, w) = (ds.example_shape[1], ds.example_shape[2]);
                let mut img: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
                corrupt_image(&mut img, h, w, (lo, hi), spec.kind, level, &mut r);
                for (dst, v) in row.iter_mut().zip(img) {
                    *dst = S::from_f64(v);
                }
            }
            TaskKind::TextCls | TaskKind::TextGen => {
                let mut toks: Vec<usize> = row
                    .iter()
                    .map(|v| v.to_f64_lossy().round() as usize)
                    .collect();
                corrupt_tokens(&mut toks, ds.vocab, spec.kind, level, &mut r);
                for (dst, t) in row.iter_mut().zip(toks) {
                    *dst = S::from_f64(t as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Per-kind and aggregate robustness over a list of corruption specs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryReport {
    pub per_kind: Vec<(String, f64)>,
    /// Unweighted mean over the spec list.
    pub aggregate: f64,
}

/// Evaluate the model on each corrupted copy of the test data. The
/// metric per cell is the task's robustness metric; the aggregate is the
/// unweighted mean over cells.
pub fn evaluate_battery<S: Scalar>(
    model: &SplitModel<S>,
    test: &Dataset<S>,
    specs: &[CorruptionSpec],
    batch: usize,
) -> Result<BatteryReport> {
    if specs.is_empty() {
        return Err(Error::Config("corruption battery is empty".to_string()));
    }
    let mut per_kind = Vec::with_capacity(specs.len());
    for spec in specs {
        let corrupted = corrupt_dataset(test, spec)?;
        let value = eval::robust_metric(model, &corrupted, batch)?;
        per_kind.push((spec.label(), value));
    }
    let aggregate = per_kind.iter().map(|(_, v)| v).sum::<f64>() / per_kind.len() as f64;
    Ok(BatteryReport {
        per_kind,
        aggregate,
    })
}

/// Default battery for a task: every applicable kind at severities
/// 1, 3, and 5.
pub fn default_battery(task: TaskKind, seed: u64) -> Vec<CorruptionSpec> {
    let kinds: &[CorruptionKind] = match task {
        TaskKind::ImageCls => &IMAGE_KINDS,
        TaskKind::TextCls | TaskKind::TextGen => &TEXT_KINDS,
    };
    let mut specs = Vec::new();
    for &kind in kinds {
        for severity in [1, 3, 5] {
            specs.push(CorruptionSpec::new(kind, severity, seed));
        }
    }
    specs
}
