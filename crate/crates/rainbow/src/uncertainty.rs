//! Perturbation-induced uncertainty: how inconsistent a model's top-1
//! prediction is across randomly perturbed copies of a sample. Each sample
//! is scored with an RNG keyed to its id, so scores never depend on batch
//! composition or scoring order.

use rayon::prelude::*;

use crate::augment::{draw_perturbation, PerturbPolicy};
use crate::dataset::{Sample, Shape};
use crate::error::{Error, Result};
use crate::model::{argmax, ClassifierState};
use crate::rng;

/// Scoring settings: number of Monte-Carlo draws and the perturbation
/// policy they are drawn from.
#[derive(Debug, Clone)]
pub struct UncertaintyConfig {
    pub draws: usize,
    pub policy: PerturbPolicy,
}

impl UncertaintyConfig {
    pub fn new(policy: PerturbPolicy) -> UncertaintyConfig {
        UncertaintyConfig { draws: 12, policy }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Config("uncertainty draws must be at least 1".into()));
        }
        if self.policy.specs.is_empty() {
            return Err(Error::Config("uncertainty policy has no perturbations".into()));
        }
        Ok(())
    }
}

/// Per-sample result: `counts[c]` is how many of the draws predicted class
/// c; `u` is one minus the modal fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScore {
    pub id: u32,
    pub u: f64,
    pub counts: Vec<usize>,
}

impl UncertaintyScore {
    /// The modal predicted class; ties break toward the smaller index.
    pub fn top1_mode(&self) -> usize {
        let mut best = 0usize;
        for (c, &n) in self.counts.iter().enumerate().skip(1) {
            if n > self.counts[best] {
                best = c;
            }
        }
        best
    }
}

/// u = 1 - max_c counts[c] / draws.
pub fn u_from_counts(counts: &[usize], draws: usize) -> f64 {
    let top = counts.iter().copied().max().unwrap_or(0);
    1.0 - top as f64 / draws as f64
}

/// Produces the `draws` perturbed feature rows for one sample, consuming
/// from `rng` in the frozen order: per draw, the policy's inclusion draws,
/// then each included transform's parameter and op-internal draws.
fn perturbed_rows(
    sample: &Sample,
    shape: &Shape,
    cfg: &UncertaintyConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        let composed = draw_perturbation(&cfg.policy, rng);
        rows.push(composed.apply(&sample.features, shape, rng)?);
    }
    Ok(rows)
}

/// Mean class-probability vector over the Monte-Carlo draws (double
/// precision mean of the per-draw softmax rows).
pub fn mc_class_prob(
    state: &ClassifierState,
    sample: &Sample,
    shape: &Shape,
    cfg: &UncertaintyConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let rows = perturbed_rows(sample, shape, cfg, rng)?;
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let probs = state.forward(&refs)?;
    let mut mean = vec![0.0f64; state.class_count()];
    for p in &probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += f64::from(v) / cfg.draws as f64;
        }
    }
    Ok(mean)
}

/// Scores one sample: counts the top-1 class over the draws (ties toward
/// the smaller class) and derives u from the modal count.
pub fn score(
    state: &ClassifierState,
    sample: &Sample,
    shape: &Shape,
    cfg: &UncertaintyConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<UncertaintyScore> {
    cfg.validate()?;
    let rows = perturbed_rows(sample, shape, cfg, rng)?;
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let probs = state.forward(&refs)?;
    let mut counts = vec![0usize; state.class_count()];
    for p in &probs {
        counts[argmax(p)] += 1;
    }
    Ok(UncertaintyScore { id: sample.id, u: u_from_counts(&counts, cfg.draws), counts })
}

/// Scores a batch against an immutable model snapshot. Each sample's RNG is
/// derived from (seed, sample id), so the result is a pure function of the
/// per-sample inputs — independent of ordering, batching, and worker count.
pub fn score_batch(
    state: &ClassifierState,
    samples: &[&Sample],
    shape: &Shape,
    cfg: &UncertaintyConfig,
    seed: u64,
) -> Result<Vec<UncertaintyScore>> {
    cfg.validate()?;
    samples
        .par_iter()
        .map(|sample| {
            let mut r = rng::keyed(seed, rng::domain::SCORE_SAMPLE, u64::from(sample.id));
            score(state, sample, shape, cfg, &mut r)
        })
        .collect()
}
