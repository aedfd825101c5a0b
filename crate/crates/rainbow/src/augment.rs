//! Input perturbations and augmentation: a small family of parameterized
//! image/vector transforms, Bernoulli-gated random composition, CutMix label
//! mixing, and a fixed randomized composition policy.
//!
//! Reproducibility contract for RNG consumption, relied on by tests that
//! replay transforms independently: `draw_perturbation` consumes exactly one
//! uniform f64 per policy entry (inclusion if the draw is below the entry's
//! probability); applying a composed transform then consumes, per included
//! entry in policy order, that entry's parameter draws (see `draw_theta`)
//! followed by any op-internal draws (cutout center: two integer draws x
//! then y; noise: one standard normal per feature element).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::dataset::{Sample, Shape};
use crate::error::{Error, Result};

/// The transform family. Geometric ops resample with nearest-neighbor lookup
/// and zero padding; photometric ops clip back into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    /// Rotation about the image center; parameter in degrees.
    Rotate,
    /// Horizontal shear about the center; parameter is the shear factor.
    Shear,
    /// Shift by (dx, dy) pixels; draws one parameter per axis.
    Translate,
    /// Zero out a square box; parameter is the side in pixels (rounded),
    /// center drawn uniformly over the image.
    Cutout,
    /// Add the parameter to every element.
    Brightness,
    /// Multiply every element by the parameter.
    Contrast,
    /// Add parameter-scaled standard Gaussian noise per element.
    Noise,
}

impl PerturbKind {
    pub fn parse(text: &str) -> Result<PerturbKind> {
        Ok(match text {
            "rotate" => PerturbKind::Rotate,
            "shear" => PerturbKind::Shear,
            "translate" => PerturbKind::Translate,
            "cutout" => PerturbKind::Cutout,
            "brightness" => PerturbKind::Brightness,
            "contrast" => PerturbKind::Contrast,
            "noise" => PerturbKind::Noise,
            other => return Err(Error::Config(format!("unknown perturbation kind {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Rotate => "rotate",
            PerturbKind::Shear => "shear",
            PerturbKind::Translate => "translate",
            PerturbKind::Cutout => "cutout",
            PerturbKind::Brightness => "brightness",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Noise => "noise",
        }
    }
}

/// One transform with its parameter range and inclusion probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub lo: f64,
    pub hi: f64,
    pub prob: f64,
}

/// An ordered list of candidate transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbPolicy {
    pub specs: Vec<PerturbSpec>,
}

impl PerturbPolicy {
    /// Default policy for 2-D images: six mild geometric and photometric
    /// ops, each included with probability 0.5.
    pub fn image_default() -> PerturbPolicy {
        let s = |kind, lo, hi| PerturbSpec { kind, lo, hi, prob: 0.5 };
        PerturbPolicy {
            specs: vec![
                s(PerturbKind::Rotate, -15.0, 15.0),
                s(PerturbKind::Shear, -0.3, 0.3),
                s(PerturbKind::Translate, -3.0, 3.0),
                s(PerturbKind::Cutout, 4.0, 8.0),
                s(PerturbKind::Brightness, -0.3, 0.3),
                s(PerturbKind::Contrast, 0.7, 1.3),
            ],
        }
    }

    /// Default policy for flat vectors, where geometry is meaningless:
    /// brightness, contrast, and additive noise.
    pub fn vector_default() -> PerturbPolicy {
        let s = |kind, lo, hi| PerturbSpec { kind, lo, hi, prob: 0.5 };
        PerturbPolicy {
            specs: vec![
                s(PerturbKind::Brightness, -0.3, 0.3),
                s(PerturbKind::Contrast, 0.7, 1.3),
                s(PerturbKind::Noise, 0.0, 0.1),
            ],
        }
    }

    /// Picks the default policy matching a shape: images get the geometric
    /// set, single-row vectors the photometric one.
    pub fn for_shape(shape: &Shape) -> PerturbPolicy {
        if shape.height > 1 {
            PerturbPolicy::image_default()
        } else {
            PerturbPolicy::vector_default()
        }
    }

    /// Parses a policy file: one "kind lo hi prob" entry per line,
    /// whitespace-separated, '#' starts a comment.
    pub fn parse(text: &str) -> Result<PerturbPolicy> {
        let mut specs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Config(format!(
                    "policy line {}: expected \"kind lo hi prob\", got {raw:?}",
                    lineno + 1
                )));
            }
            let kind = PerturbKind::parse(fields[0])?;
            let num = |f: &str, what: &str| -> Result<f64> {
                f.parse().map_err(|_| {
                    Error::Config(format!("policy line {}: bad {what} {f:?}", lineno + 1))
                })
            };
            specs.push(PerturbSpec {
                kind,
                lo: num(fields[1], "lo")?,
                hi: num(fields[2], "hi")?,
                prob: num(fields[3], "prob")?,
            });
        }
        if specs.is_empty() {
            return Err(Error::Config("policy file declares no perturbations".into()));
        }
        Ok(PerturbPolicy { specs })
    }

    pub fn load(path: &Path) -> Result<PerturbPolicy> {
        let text =
            fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        PerturbPolicy::parse(&text)
    }

    /// Checks ranges against a concrete shape: lo ≤ hi, probabilities in
    /// (0, 1], cutout boxes no larger than the shorter image side,
    /// non-negative contrast factors and noise levels.
    pub fn validate(&self, shape: &Shape) -> Result<()> {
        for s in &self.specs {
            if !(s.lo <= s.hi) {
                return Err(Error::Config(format!(
                    "{} range ({}, {}) has lo > hi",
                    s.kind.name(),
                    s.lo,
                    s.hi
                )));
            }
            if !(s.prob > 0.0 && s.prob <= 1.0) {
                return Err(Error::Config(format!(
                    "{} inclusion probability {} is outside (0, 1]",
                    s.kind.name(),
                    s.prob
                )));
            }
            match s.kind {
                PerturbKind::Cutout => {
                    let side_cap = shape.height.min(shape.width) as f64;
                    if s.lo < 0.0 || s.hi > side_cap {
                        return Err(Error::Config(format!(
                            "cutout side range ({}, {}) exceeds the image side {side_cap}",
                            s.lo, s.hi
                        )));
                    }
                }
                PerturbKind::Contrast | PerturbKind::Noise => {
                    if s.lo < 0.0 {
                        return Err(Error::Config(format!(
                            "{} range must be non-negative, got lo {}",
                            s.kind.name(),
                            s.lo
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// A drawn transform parameter; translation carries one value per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Theta {
    One(f64),
    Two(f64, f64),
}

/// Draws a transform parameter uniformly from the entry's `lo..=hi` range.
/// Translation consumes two draws: x offset first, then y.
pub fn draw_theta(spec: &PerturbSpec, rng: &mut ChaCha8Rng) -> Theta {
    match spec.kind {
        PerturbKind::Translate => {
            let tx = rng.random_range(spec.lo..=spec.hi);
            let ty = rng.random_range(spec.lo..=spec.hi);
            Theta::Two(tx, ty)
        }
        _ => Theta::One(rng.random_range(spec.lo..=spec.hi)),
    }
}

fn check_shape(features: &[f32], shape: &Shape) -> Result<()> {
    if features.len() != shape.len() {
        return Err(Error::Shape(format!(
            "feature length {} does not match shape {}x{}x{}",
            features.len(),
            shape.height,
            shape.width,
            shape.channels
        )));
    }
    Ok(())
}

/// Nearest-neighbor gather: copies the source pixel each destination maps
/// back to, or zero when the source coordinate falls outside the image.
fn inverse_map(
    features: &[f32],
    shape: &Shape,
    mut source_of: impl FnMut(f64, f64) -> (f64, f64),
) -> Vec<f32> {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut out = vec![0.0f32; features.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64, y as f64);
            let (sx, sy) = (sx.round(), sy.round());
            if sx >= 0.0 && sx < w as f64 && sy >= 0.0 && sy < h as f64 {
                let (sx, sy) = (sx as usize, sy as usize);
                let src = (sy * w + sx) * ch;
                let dst = (y * w + x) * ch;
                out[dst..dst + ch].copy_from_slice(&features[src..src + ch]);
            }
        }
    }
    out
}

/// Applies one transform with an already-drawn parameter. Cutout draws its
/// box center (x then y) and noise its per-element Gaussians from `rng`.
pub fn apply_with_theta(
    features: &[f32],
    shape: &Shape,
    kind: PerturbKind,
    theta: Theta,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    check_shape(features, shape)?;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let one = |t: Theta| match t {
        Theta::One(v) => Ok(v),
        Theta::Two(..) => Err(Error::Config("this perturbation takes a single parameter".into())),
    };
    let out = match kind {
        PerturbKind::Rotate => {
            let rad = one(theta)?.to_radians();
            let (sin, cos) = rad.sin_cos();
            inverse_map(features, shape, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
            })
        }
        PerturbKind::Shear => {
            let s = one(theta)?;
            inverse_map(features, shape, |x, y| (x - s * (y - cy), y))
        }
        PerturbKind::Translate => {
            let (tx, ty) = match theta {
                Theta::Two(tx, ty) => (tx, ty),
                Theta::One(_) => {
                    return Err(Error::Config("translation takes one parameter per axis".into()))
                }
            };
            inverse_map(features, shape, |x, y| (x - tx, y - ty))
        }
        PerturbKind::Cutout => {
            let side = one(theta)?.round().max(0.0) as usize;
            let bx = rng.random_range(0..w);
            let by = rng.random_range(0..h);
            let x0 = bx.saturating_sub(side / 2);
            let x1 = (bx + side.div_ceil(2)).min(w);
            let y0 = by.saturating_sub(side / 2);
            let y1 = (by + side.div_ceil(2)).min(h);
            let mut out = features.to_vec();
            for y in y0..y1 {
                for x in x0..x1 {
                    let at = (y * w + x) * ch;
                    out[at..at + ch].fill(0.0);
                }
            }
            out
        }
        PerturbKind::Brightness => {
            let d = one(theta)? as f32;
            features.iter().map(|&v| (v + d).clamp(0.0, 1.0)).collect()
        }
        PerturbKind::Contrast => {
            let f = one(theta)? as f32;
            features.iter().map(|&v| (v * f).clamp(0.0, 1.0)).collect()
        }
        PerturbKind::Noise => {
            let sigma = one(theta)?;
            let normal = Normal::new(0.0f64, 1.0).expect("unit normal is valid");
            features
                .iter()
                .map(|&v| {
                    let n = normal.sample(rng);
                    ((f64::from(v) + sigma * n).clamp(0.0, 1.0)) as f32
                })
                .collect()
        }
    };
    Ok(out)
}

/// Draws the parameter and applies the transform; the label is untouched by
/// construction (only features are produced).
pub fn apply_perturb(
    features: &[f32],
    shape: &Shape,
    spec: &PerturbSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let theta = draw_theta(spec, rng);
    apply_with_theta(features, shape, spec.kind, theta, rng)
}

/// A Bernoulli-selected subset of a policy, applied in policy order; empty
/// selection is the identity.
#[derive(Debug, Clone)]
pub struct ComposedPerturb {
    pub included: Vec<PerturbSpec>,
}

impl ComposedPerturb {
    pub fn is_identity(&self) -> bool {
        self.included.is_empty()
    }

    /// Applies each included transform in order, drawing parameters from
    /// `rng` as it goes.
    pub fn apply(&self, features: &[f32], shape: &Shape, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let mut cur = features.to_vec();
        for spec in &self.included {
            cur = apply_perturb(&cur, shape, spec, rng)?;
        }
        Ok(cur)
    }
}

/// Gates each policy entry independently: one uniform draw per entry, kept
/// when the draw is below the entry's inclusion probability.
pub fn draw_perturbation(policy: &PerturbPolicy, rng: &mut ChaCha8Rng) -> ComposedPerturb {
    let included = policy
        .specs
        .iter()
        .filter(|s| rng.random::<f64>() < s.prob)
        .copied()
        .collect();
    ComposedPerturb { included }
}

/// A half-open pixel box [x0, x1) x [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// A mixed training example: features plus up to two weighted labels
/// (weights sum to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub features: Vec<f32>,
    pub label_weights: Vec<(usize, f64)>,
}

/// The deterministic core of CutMix: cut the given box out of `base`, fill
/// it from `patch`, and weight labels by the exact surviving-area fraction.
pub fn cutmix_at(
    base: &Sample,
    patch: &Sample,
    shape: &Shape,
    region: BoxRegion,
) -> Result<MixedSample> {
    check_shape(&base.features, shape)?;
    check_shape(&patch.features, shape)?;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut features = base.features.clone();
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let at = (y * w + x) * ch;
            features[at..at + ch].copy_from_slice(&patch.features[at..at + ch]);
        }
    }
    let total = (h * w) as f64;
    let kept = total - region.area() as f64;
    let lambda = kept / total;
    let label_weights = if base.label == patch.label {
        vec![(base.label, 1.0)]
    } else if region.area() == 0 {
        vec![(base.label, 1.0)]
    } else if region.area() == h * w {
        vec![(patch.label, 1.0)]
    } else {
        vec![(base.label, lambda), (patch.label, 1.0 - lambda)]
    };
    Ok(MixedSample { features, label_weights })
}

/// Mixes two same-shape samples: draws the mixing ratio from Beta(beta,
/// beta), cuts a box with side fractions sqrt(1 - ratio) centered uniformly
/// at random (clipped to the image), and recomputes label weights from the
/// clipped box's exact area. Consumes one Beta draw, then the center x, then
/// the center y.
pub fn cutmix(
    base: &Sample,
    patch: &Sample,
    shape: &Shape,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedSample> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("cutmix beta must be positive, got {beta}")));
    }
    let dist = Beta::new(beta, beta)
        .map_err(|e| Error::Config(format!("cutmix beta {beta} is invalid: {e}")))?;
    let lambda0: f64 = dist.sample(rng);
    let cut_rat = (1.0 - lambda0).sqrt();
    let (h, w) = (shape.height, shape.width);
    let bw = (w as f64 * cut_rat) as usize;
    let bh = (h as f64 * cut_rat) as usize;
    let bx = rng.random_range(0..w);
    let by = rng.random_range(0..h);
    let region = BoxRegion {
        x0: bx.saturating_sub(bw / 2),
        x1: (bx + bw.div_ceil(2)).min(w),
        y0: by.saturating_sub(bh / 2),
        y1: (by + bh.div_ceil(2)).min(h),
    };
    cutmix_at(base, patch, shape, region)
}

/// Fixed randomized composition: `n_ops` entries drawn uniformly with
/// replacement from the policy, each applied at the deterministic parameter
/// lo + magnitude * (hi - lo) (both axes for translation). Cutout centers
/// and noise values still come from `rng`.
pub fn rand_compose(
    features: &[f32],
    shape: &Shape,
    policy: &PerturbPolicy,
    n_ops: usize,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    if n_ops == 0 {
        return Err(Error::Config("rand_compose needs at least one op".into()));
    }
    let mut cur = features.to_vec();
    for _ in 0..n_ops {
        let spec = &policy.specs[rng.random_range(0..policy.specs.len())];
        let v = spec.lo + magnitude * (spec.hi - spec.lo);
        let theta = match spec.kind {
            PerturbKind::Translate => Theta::Two(v, v),
            _ => Theta::One(v),
        };
        cur = apply_with_theta(&cur, shape, spec.kind, theta, rng)?;
    }
    Ok(cur)
}
