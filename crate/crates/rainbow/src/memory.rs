//! Fixed-capacity episodic memory and its update strategies: uncertainty-
//! interval selection (rebuilding from scratch each task boundary), uniform
//! random selection, streaming reservoir sampling, feature-mean prototypes,
//! and uniform class-balanced selection. Also provides replay sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Sample, Shape};
use crate::error::{Error, Result};
use crate::model::ClassifierState;
use crate::rng;
use crate::uncertainty::{score_batch, UncertaintyConfig};

/// Memory update strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Rebuild each boundary by interval-sampling every class's
    /// uncertainty-sorted candidate pool.
    Rainbow,
    /// Uniform class-agnostic subset of old entries and the new stream.
    Random,
    /// Classic streaming reservoir, updated per incoming sample.
    Reservoir,
    /// Keep the candidates nearest to their class's feature mean.
    Prototype,
    /// Uniform per-class subsets under the same balanced slot counts.
    GreedyBalanced,
}

impl Strategy {
    pub fn parse(text: &str) -> Result<Strategy> {
        Ok(match text {
            "rainbow" => Strategy::Rainbow,
            "random" => Strategy::Random,
            "reservoir" => Strategy::Reservoir,
            "prototype" => Strategy::Prototype,
            "greedy_balanced" => Strategy::GreedyBalanced,
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy {other:?}: expected rainbow, random, reservoir, prototype, or greedy_balanced"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Rainbow => "rainbow",
            Strategy::Random => "random",
            Strategy::Reservoir => "reservoir",
            Strategy::Prototype => "prototype",
            Strategy::GreedyBalanced => "greedy_balanced",
        }
    }

    /// Reservoir ingests samples as they stream by; every other strategy
    /// rebuilds at task boundaries.
    pub fn updates_per_sample(&self) -> bool {
        matches!(self, Strategy::Reservoir)
    }
}

/// One stored exemplar: the sample, the task it streamed in on, and the
/// uncertainty it was scored with when selected (0 for strategies that do
/// not score).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub sample: Sample,
    pub source_task: usize,
    pub u: f64,
}

/// Bounded exemplar store.
#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    pub capacity: usize,
    pub entries: Vec<MemoryEntry>,
    seen_classes: BTreeSet<usize>,
    /// Total samples ever offered to the reservoir.
    offered: u64,
}

/// k_c = floor(K / N_t) plus the remainder available for redistribution.
pub fn slots_per_class(capacity: usize, seen_classes: usize) -> (usize, usize) {
    (capacity / seen_classes, capacity % seen_classes)
}

/// Indices `floor(j * len / quota)` for j in 0..quota — an even sweep over
/// a sorted pool; the whole pool when it is no larger than the quota.
pub fn interval_indices(len: usize, quota: usize) -> Vec<usize> {
    if len <= quota {
        return (0..len).collect();
    }
    (0..quota).map(|j| j * len / quota).collect()
}

/// Splits `capacity` slots over per-class candidate pools: everyone gets
/// floor(capacity / classes) (capped by pool size); leftover slots go one
/// per class in order of descending pool size (ties toward the smaller
/// class id), never exceeding base + 1 or the pool itself. Returns
/// (class, quota) pairs in ascending class order.
pub fn allocate_slots(capacity: usize, pools: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if pools.is_empty() {
        return Vec::new();
    }
    let (base, _) = slots_per_class(capacity, pools.len());
    let mut quotas: BTreeMap<usize, usize> =
        pools.iter().map(|&(class, len)| (class, base.min(len))).collect();
    let mut leftover = capacity - quotas.values().sum::<usize>();
    let mut order: Vec<(usize, usize)> = pools.to_vec();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (class, len) in order {
        if leftover == 0 {
            break;
        }
        let q = quotas.get_mut(&class).expect("class present");
        if *q < (base + 1).min(len) {
            *q += 1;
            leftover -= 1;
        }
    }
    quotas.into_iter().collect()
}

/// A selection candidate: either a stored entry or a fresh stream sample.
enum Cand<'a> {
    Old(MemoryEntry),
    New(&'a Sample),
}

impl<'a> Cand<'a> {
    fn sample(&self) -> &Sample {
        match self {
            Cand::Old(e) => &e.sample,
            Cand::New(s) => s,
        }
    }

    fn into_entry(self, task: usize, u: f64) -> MemoryEntry {
        match self {
            Cand::Old(mut e) => {
                e.u = u;
                e
            }
            Cand::New(s) => MemoryEntry { sample: s.clone(), source_task: task, u },
        }
    }
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> EpisodicMemory {
        EpisodicMemory { capacity, entries: Vec::new(), seen_classes: BTreeSet::new(), offered: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Classes encountered in any stream so far (N_t).
    pub fn seen_count(&self) -> usize {
        self.seen_classes.len()
    }

    pub fn note_seen(&mut self, labels: impl IntoIterator<Item = usize>) {
        self.seen_classes.extend(labels);
    }

    /// Per-class entry counts.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.sample.label).or_insert(0) += 1;
        }
        counts
    }

    /// Structural invariants: within capacity, no duplicate sample ids.
    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Data(format!(
                "memory holds {} entries over capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.sample.id) {
                return Err(Error::Data(format!("memory stores sample {} twice", e.sample.id)));
            }
        }
        Ok(())
    }

    /// `n` entries drawn uniformly with replacement; an empty memory yields
    /// an empty batch without consuming randomness.
    pub fn sample_replay(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&MemoryEntry> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.entries[rng.random_range(0..self.entries.len())]).collect()
    }

    /// Groups candidates (stored entries plus the new stream) by class.
    /// Consumes the current entries; the update rebuilds from scratch.
    fn pooled_candidates<'a>(&mut self, stream: &[&'a Sample]) -> BTreeMap<usize, Vec<Cand<'a>>> {
        self.note_seen(stream.iter().map(|s| s.label));
        let old = std::mem::take(&mut self.entries);
        let mut pools: BTreeMap<usize, Vec<Cand<'a>>> = BTreeMap::new();
        for e in old {
            pools.entry(e.sample.label).or_default().push(Cand::Old(e));
        }
        for &s in stream {
            pools.entry(s.label).or_default().push(Cand::New(s));
        }
        pools
    }

    /// Uncertainty-interval rebuild: pools every seen class's stored
    /// exemplars and the new stream, scores all candidates under the current
    /// model, sorts each pool by ascending uncertainty (ties by id), and
    /// keeps an even interval sweep of each pool under balanced slot counts.
    pub fn update_rainbow(
        &mut self,
        stream: &[&Sample],
        task: usize,
        state: &ClassifierState,
        shape: &Shape,
        cfg: &UncertaintyConfig,
        score_seed: u64,
    ) -> Result<()> {
        let pools = self.pooled_candidates(stream);
        // Score every candidate in one keyed batch; scores map back by id.
        let flat: Vec<&Sample> = pools.values().flatten().map(Cand::sample).collect();
        let scores = score_batch(state, &flat, shape, cfg, score_seed)?;
        let mut u_of: BTreeMap<u32, f64> = BTreeMap::new();
        for s in &scores {
            if u_of.insert(s.id, s.u).is_some() {
                return Err(Error::Data(format!("duplicate candidate sample {}", s.id)));
            }
        }
        let sizes: Vec<(usize, usize)> = pools.iter().map(|(&c, v)| (c, v.len())).collect();
        let quotas = allocate_slots(self.capacity, &sizes);
        let mut entries = Vec::new();
        for ((class, mut cands), (qclass, quota)) in pools.into_iter().zip(quotas) {
            debug_assert_eq!(class, qclass);
            cands.sort_by(|a, b| {
                let (ua, ub) = (u_of[&a.sample().id], u_of[&b.sample().id]);
                ua.partial_cmp(&ub).unwrap().then(a.sample().id.cmp(&b.sample().id))
            });
            let picks = interval_indices(cands.len(), quota);
            let mut slots: Vec<Option<Cand>> = cands.into_iter().map(Some).collect();
            for i in picks {
                let c = slots[i].take().expect("interval indices are distinct");
                let u = u_of[&c.sample().id];
                entries.push(c.into_entry(task, u));
            }
        }
        self.entries = entries;
        self.check_invariants()
    }

    /// Uniform class-agnostic rebuild: keep min(K, pool) of old entries and
    /// stream samples, drawn by a seeded shuffle.
    pub fn update_random(&mut self, stream: &[&Sample], task: usize, seed: u64) -> Result<()> {
        let pools = self.pooled_candidates(stream);
        let mut cands: Vec<Cand> = pools.into_values().flatten().collect();
        cands.sort_by_key(|c| c.sample().id);
        let mut r = rng::keyed(seed, rng::domain::RANDOM_UPDATE, task as u64);
        cands.shuffle(&mut r);
        cands.truncate(self.capacity);
        cands.sort_by_key(|c| (c.sample().label, c.sample().id));
        self.entries = cands
            .into_iter()
            .map(|c| {
                let u = match &c {
                    Cand::Old(e) => e.u,
                    Cand::New(_) => 0.0,
                };
                c.into_entry(task, u)
            })
            .collect();
        self.check_invariants()
    }

    /// Prototype rebuild: per class, keep the candidates closest (squared
    /// Euclidean, ties by id) to the class's mean penultimate feature
    /// vector, under balanced slot counts.
    pub fn update_prototype(
        &mut self,
        stream: &[&Sample],
        task: usize,
        state: &ClassifierState,
    ) -> Result<()> {
        let pools = self.pooled_candidates(stream);
        let sizes: Vec<(usize, usize)> = pools.iter().map(|(&c, v)| (c, v.len())).collect();
        let quotas = allocate_slots(self.capacity, &sizes);
        let mut entries = Vec::new();
        for ((class, cands), (qclass, quota)) in pools.into_iter().zip(quotas) {
            debug_assert_eq!(class, qclass);
            let rows: Vec<&[f32]> = cands.iter().map(|c| c.sample().features.as_slice()).collect();
            let feats = state.features(&rows)?;
            let dim = state.hidden_dim();
            let mut mean = vec![0.0f64; dim];
            for f in &feats {
                for (m, &v) in mean.iter_mut().zip(f) {
                    *m += f64::from(v) / cands.len() as f64;
                }
            }
            let mut scored: Vec<(f64, u32, Cand)> = cands
                .into_iter()
                .zip(feats)
                .map(|(c, f)| {
                    let d: f64 =
                        f.iter().zip(&mean).map(|(&v, &m)| (f64::from(v) - m).powi(2)).sum();
                    (d, c.sample().id, c)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for (_, _, c) in scored.into_iter().take(quota) {
                entries.push(c.into_entry(task, 0.0));
            }
        }
        self.entries = entries;
        self.check_invariants()
    }

    /// Class-balanced rebuild without scoring: a uniform quota-sized subset
    /// of each class's pool via a per-(task, class) seeded shuffle.
    pub fn update_greedy_balanced(&mut self, stream: &[&Sample], task: usize, seed: u64) -> Result<()> {
        let pools = self.pooled_candidates(stream);
        let sizes: Vec<(usize, usize)> = pools.iter().map(|(&c, v)| (c, v.len())).collect();
        let quotas = allocate_slots(self.capacity, &sizes);
        let mut entries = Vec::new();
        for ((class, mut cands), (qclass, quota)) in pools.into_iter().zip(quotas) {
            debug_assert_eq!(class, qclass);
            cands.sort_by_key(|c| c.sample().id);
            let key = ((task as u64) << 32) | class as u64;
            let mut r = rng::keyed(seed, rng::domain::GREEDY_UPDATE, key);
            cands.shuffle(&mut r);
            cands.truncate(quota);
            cands.sort_by_key(|c| c.sample().id);
            for c in cands {
                let u = match &c {
                    Cand::Old(e) => e.u,
                    Cand::New(_) => 0.0,
                };
                entries.push(c.into_entry(task, u));
            }
        }
        self.entries = entries;
        self.check_invariants()
    }

    /// Streaming reservoir offer: the first K offers fill the store; offer
    /// m (1-based) then replaces a uniformly chosen slot with probability
    /// K / m. Exactly one integer draw per offer once the store is full.
    pub fn offer_reservoir(&mut self, sample: &Sample, task: usize, rng: &mut ChaCha8Rng) {
        self.note_seen(std::iter::once(sample.label));
        if (self.entries.len() as u64) < self.capacity as u64 && self.offered < self.capacity as u64 {
            self.entries.push(MemoryEntry { sample: sample.clone(), source_task: task, u: 0.0 });
        } else {
            let j = rng.random_range(0..=self.offered);
            if j < self.capacity as u64 {
                self.entries[j as usize] =
                    MemoryEntry { sample: sample.clone(), source_task: task, u: 0.0 };
            }
        }
        self.offered += 1;
    }

    /// Total samples ever offered to the reservoir.
    pub fn offered(&self) -> u64 {
        self.offered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{PerturbKind, PerturbPolicy, PerturbSpec};
    use crate::dataset::{make_synthetic, Dataset, SyntheticSpec};

    fn blobs(classes: usize, per_class: usize, seed: u64) -> Dataset {
        // The train split keeps ceil(4n/5) of n samples per class; n = 5t/4
        // (floor) inverts that to exactly t train samples.
        let spec = SyntheticSpec {
            class_count: classes,
            samples_per_class: per_class * 5 / 4,
            dim: 8,
            separation: 4.0,
            noise: 1.0,
        };
        make_synthetic(&spec, seed).unwrap().0
    }

    fn noisy_cfg() -> UncertaintyConfig {
        UncertaintyConfig {
            draws: 8,
            policy: PerturbPolicy {
                specs: vec![
                    PerturbSpec { kind: PerturbKind::Noise, lo: 0.05, hi: 0.3, prob: 0.8 },
                    PerturbSpec { kind: PerturbKind::Brightness, lo: -0.3, hi: 0.3, prob: 0.5 },
                ],
            },
        }
    }

    #[test]
    fn slot_arithmetic_matches_hand_values() {
        assert_eq!(slots_per_class(500, 10), (50, 0));
        assert_eq!(slots_per_class(500, 3), (166, 2));
        assert_eq!(slots_per_class(5, 10), (0, 5));
    }

    #[test]
    fn interval_indices_sweep_evenly() {
        assert_eq!(interval_indices(100, 10), vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(interval_indices(3, 10), vec![0, 1, 2]);
        assert_eq!(interval_indices(5, 5), vec![0, 1, 2, 3, 4]);
        let idx = interval_indices(11, 10);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*idx.first().unwrap(), 0);
        // The top pick sits within one stride of the pool's end.
        assert!(*idx.last().unwrap() >= 11 - (11 / 10) - 1);
    }

    #[test]
    fn allocate_slots_balances_and_redistributes() {
        // 10 slots over 3 classes: base 3, remainder 1 goes to the largest
        // pool (class 2).
        let q = allocate_slots(10, &[(0, 20), (1, 20), (2, 30)]);
        assert_eq!(q, vec![(0, 3), (1, 3), (2, 4)]);

        // Ties on pool size: the smaller class id gets the extra.
        let q = allocate_slots(10, &[(0, 20), (1, 20), (2, 20)]);
        assert_eq!(q, vec![(0, 4), (1, 3), (2, 3)]);

        // Short classes cap at their pool; leftovers flow to big pools but
        // never past base + 1.
        let q = allocate_slots(10, &[(0, 1), (1, 30), (2, 30)]);
        assert_eq!(q, vec![(0, 1), (1, 4), (2, 4)]);

        // Degenerate K < N: the largest pools get one slot each.
        let q = allocate_slots(2, &[(0, 5), (1, 9), (2, 7), (3, 1)]);
        assert_eq!(q, vec![(0, 0), (1, 1), (2, 1), (3, 0)]);
    }

    #[test]
    fn rainbow_selects_interval_indices_of_sorted_pool() {
        // Single class, pool of 100, capacity 10: the kept uncertainties
        // must be exactly ranks {0, 10, ..., 90} of the sorted pool,
        // including the minimum.
        let spec = SyntheticSpec { class_count: 2, samples_per_class: 125, dim: 8, separation: 3.0, noise: 1.2 };
        let (train, _) = make_synthetic(&spec, 3).unwrap();
        let class0: Vec<&Sample> = train.samples.iter().filter(|s| s.label == 0).take(100).collect();
        assert_eq!(class0.len(), 100);
        let state = ClassifierState::init(8, 16, 2, 5).unwrap();
        let cfg = noisy_cfg();
        let mut mem = EpisodicMemory::new(10);
        mem.update_rainbow(&class0, 0, &state, &train.shape, &cfg, 99).unwrap();
        assert_eq!(mem.len(), 10);

        let scores = score_batch(&state, &class0, &train.shape, &cfg, 99).unwrap();
        let mut sorted: Vec<(f64, u32)> = scores.iter().map(|s| (s.u, s.id)).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<u32> = (0..10).map(|j| sorted[j * 10].1).collect();
        let got: Vec<u32> = mem.entries.iter().map(|e| e.sample.id).collect();
        assert_eq!(got, expect);
        // The most robust (minimum-u) candidate is kept.
        assert_eq!(got[0], sorted[0].1);
        let min_u = sorted[0].0;
        assert!(mem.entries.iter().any(|e| e.u == min_u));
    }

    #[test]
    fn rainbow_rebuild_is_balanced_and_deterministic() {
        let train = blobs(4, 30, 7);
        let state = ClassifierState::init(8, 16, 4, 9).unwrap();
        let cfg = noisy_cfg();
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut a = EpisodicMemory::new(22);
        a.update_rainbow(&refs, 0, &state, &train.shape, &cfg, 11).unwrap();
        assert_eq!(a.len(), 22);
        let counts = a.class_counts();
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");

        let mut b = EpisodicMemory::new(22);
        b.update_rainbow(&refs, 0, &state, &train.shape, &cfg, 11).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn rainbow_spectrum_covers_low_and_high_uncertainty() {
        // With pools at least twice the quota, both the minimum-u candidate
        // and one from the top quartile must be kept per class.
        let train = blobs(2, 60, 13);
        let state = ClassifierState::init(8, 16, 2, 3).unwrap();
        let cfg = noisy_cfg();
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut mem = EpisodicMemory::new(20);
        mem.update_rainbow(&refs, 0, &state, &train.shape, &cfg, 5).unwrap();
        let scores = score_batch(&state, &refs, &train.shape, &cfg, 5).unwrap();
        let u_of: BTreeMap<u32, f64> = scores.iter().map(|s| (s.id, s.u)).collect();
        for class in 0..2 {
            let mut pool: Vec<(f64, u32)> = refs
                .iter()
                .filter(|s| s.label == class)
                .map(|s| (u_of[&s.id], s.id))
                .collect();
            pool.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let kept: BTreeSet<u32> =
                mem.entries.iter().filter(|e| e.sample.label == class).map(|e| e.sample.id).collect();
            assert!(kept.contains(&pool[0].1), "class {class} lost its most robust sample");
            let quartile_start = pool.len() * 3 / 4;
            assert!(
                pool[quartile_start..].iter().any(|(_, id)| kept.contains(id)),
                "class {class} kept nothing from the fragile quartile"
            );
        }
    }

    #[test]
    fn rainbow_pools_old_entries_with_new_stream() {
        let train = blobs(2, 40, 21);
        let state = ClassifierState::init(8, 16, 2, 9).unwrap();
        let cfg = noisy_cfg();
        let (first, second): (Vec<&Sample>, Vec<&Sample>) =
            train.samples.iter().partition(|s| s.id % 2 == 0);
        let mut mem = EpisodicMemory::new(12);
        mem.update_rainbow(&first, 0, &state, &train.shape, &cfg, 1).unwrap();
        let from_first: BTreeSet<u32> = mem.entries.iter().map(|e| e.sample.id).collect();
        mem.update_rainbow(&second, 1, &state, &train.shape, &cfg, 2).unwrap();
        assert_eq!(mem.len(), 12);
        // Entries from the first task survive only via the old-entry pool,
        // and their source task is preserved.
        for e in &mem.entries {
            if from_first.contains(&e.sample.id) {
                assert_eq!(e.source_task, 0);
            } else {
                assert_eq!(e.source_task, 1);
            }
        }
        mem.check_invariants().unwrap();
    }

    #[test]
    fn random_update_keeps_everything_when_pool_fits() {
        let train = blobs(3, 5, 2);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut mem = EpisodicMemory::new(100);
        mem.update_random(&refs, 0, 4).unwrap();
        assert_eq!(mem.len(), refs.len());
    }

    #[test]
    fn random_update_is_uniform_over_candidates() {
        // Pool of 20, capacity 10: any fixed sample is kept with frequency
        // 1/2 over many trials, within 3 binomial standard deviations.
        let train = blobs(2, 10, 5);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        assert_eq!(refs.len(), 20);
        let target = refs[7].id;
        let trials = 10_000u32;
        let mut hits = 0u32;
        for t in 0..trials {
            let mut mem = EpisodicMemory::new(10);
            mem.update_random(&refs, 0, u64::from(t)).unwrap();
            assert_eq!(mem.len(), 10);
            if mem.entries.iter().any(|e| e.sample.id == target) {
                hits += 1;
            }
        }
        let p = 0.5f64;
        let sigma = (f64::from(trials) * p * (1.0 - p)).sqrt();
        assert!(
            (f64::from(hits) - f64::from(trials) * p).abs() <= 3.0 * sigma,
            "hits {hits} of {trials}"
        );
    }

    #[test]
    fn random_update_is_deterministic_in_seed() {
        let train = blobs(2, 20, 6);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut a = EpisodicMemory::new(10);
        a.update_random(&refs, 0, 4).unwrap();
        let mut b = EpisodicMemory::new(10);
        b.update_random(&refs, 0, 4).unwrap();
        assert_eq!(a.entries, b.entries);
        let mut c = EpisodicMemory::new(10);
        c.update_random(&refs, 0, 5).unwrap();
        assert_ne!(
            a.entries.iter().map(|e| e.sample.id).collect::<Vec<_>>(),
            c.entries.iter().map(|e| e.sample.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn reservoir_accepts_first_k_then_stays_full() {
        let train = blobs(2, 30, 8);
        let mut mem = EpisodicMemory::new(10);
        let mut r = rng::seeded(3);
        for (i, s) in train.samples.iter().enumerate() {
            mem.offer_reservoir(s, 0, &mut r);
            if i < 10 {
                assert_eq!(mem.len(), i + 1);
                assert_eq!(mem.entries[i].sample.id, s.id);
            } else {
                assert_eq!(mem.len(), 10);
            }
        }
        assert_eq!(mem.offered(), train.samples.len() as u64);
        mem.check_invariants().unwrap();
    }

    #[test]
    fn prototype_keeps_near_mean_candidates() {
        let train = blobs(3, 30, 9);
        let state = ClassifierState::init(8, 16, 3, 2).unwrap();
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut mem = EpisodicMemory::new(9);
        mem.update_prototype(&refs, 0, &state).unwrap();
        assert_eq!(mem.len(), 9);
        let counts = mem.class_counts();
        assert!(counts.values().all(|&c| c == 3), "counts {counts:?}");

        // Oracle: kept candidates average no farther from the class feature
        // mean than the pool at large.
        for class in 0..3 {
            let pool: Vec<&Sample> = refs.iter().copied().filter(|s| s.label == class).collect();
            let rows: Vec<&[f32]> = pool.iter().map(|s| s.features.as_slice()).collect();
            let feats = state.features(&rows).unwrap();
            let dim = state.hidden_dim();
            let mut mean = vec![0.0f64; dim];
            for f in &feats {
                for (m, &v) in mean.iter_mut().zip(f) {
                    *m += f64::from(v) / feats.len() as f64;
                }
            }
            let dist = |f: &[f32]| -> f64 {
                f.iter().zip(&mean).map(|(&v, &m)| (f64::from(v) - m).powi(2)).sum()
            };
            let by_id: BTreeMap<u32, f64> =
                pool.iter().zip(&feats).map(|(s, f)| (s.id, dist(f))).collect();
            let kept: Vec<f64> = mem
                .entries
                .iter()
                .filter(|e| e.sample.label == class)
                .map(|e| by_id[&e.sample.id])
                .collect();
            let kept_mean: f64 = kept.iter().sum::<f64>() / kept.len() as f64;
            let pool_mean: f64 = by_id.values().sum::<f64>() / by_id.len() as f64;
            assert!(kept_mean <= pool_mean, "class {class}: kept {kept_mean} pool {pool_mean}");
        }
    }

    #[test]
    fn prototype_breaks_distance_ties_by_id() {
        // Two identical feature vectors: equal distance to the mean, so the
        // smaller id is kept.
        let f = vec![0.3f32; 8];
        let twin_a = Sample { id: 0, features: f.clone(), label: 0 };
        let twin_b = Sample { id: 1, features: f.clone(), label: 0 };
        let far = Sample { id: 2, features: vec![0.9; 8], label: 0 };
        let state = ClassifierState::init(8, 16, 2, 2).unwrap();
        let mut mem = EpisodicMemory::new(1);
        mem.update_prototype(&[&twin_b, &twin_a, &far], 0, &state).unwrap();
        assert_eq!(mem.entries.len(), 1);
        assert_eq!(mem.entries[0].sample.id, 0);
    }

    #[test]
    fn greedy_balanced_respects_quotas_and_seed() {
        let train = blobs(4, 20, 10);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut mem = EpisodicMemory::new(10);
        mem.update_greedy_balanced(&refs, 0, 3).unwrap();
        assert_eq!(mem.len(), 10);
        let counts = mem.class_counts();
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");

        let mut again = EpisodicMemory::new(10);
        again.update_greedy_balanced(&refs, 0, 3).unwrap();
        assert_eq!(mem.entries, again.entries);

        // Tiny pools are kept whole.
        let small: Vec<&Sample> = train.samples.iter().take(3).collect();
        let mut mem = EpisodicMemory::new(50);
        mem.update_greedy_balanced(&small, 0, 3).unwrap();
        assert_eq!(mem.len(), 3);
    }

    #[test]
    fn replay_sampling_handles_edges_and_is_uniform() {
        let train = blobs(2, 5, 11);
        let mut mem = EpisodicMemory::new(10);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut r = rng::seeded(2);
        assert!(mem.sample_replay(4, &mut r).is_empty());
        mem.update_random(&refs, 0, 1).unwrap();
        assert!(mem.sample_replay(0, &mut r).is_empty());

        let mut single = EpisodicMemory::new(1);
        single.update_random(&refs[..1].to_vec(), 0, 1).unwrap();
        let batch = single.sample_replay(4, &mut r);
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|e| e.sample.id == refs[0].id));

        // Uniformity: 10 entries, 10,000 draws, each within 3 sigma of
        // the expected 1,000.
        let mut hist: BTreeMap<u32, u32> = BTreeMap::new();
        for e in mem.sample_replay(10_000, &mut r) {
            *hist.entry(e.sample.id).or_insert(0) += 1;
        }
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for (&id, &n) in &hist {
            assert!(
                (f64::from(n) - 1000.0).abs() <= 3.0 * sigma,
                "entry {id} drawn {n} times"
            );
        }
    }

    #[test]
    fn capacity_zero_memory_stays_empty() {
        let train = blobs(2, 5, 12);
        let refs: Vec<&Sample> = train.samples.iter().collect();
        let mut mem = EpisodicMemory::new(0);
        mem.update_random(&refs, 0, 1).unwrap();
        assert!(mem.is_empty());
        let state = ClassifierState::init(8, 16, 2, 2).unwrap();
        mem.update_rainbow(&refs, 0, &state, &train.shape, &noisy_cfg(), 1).unwrap();
        assert!(mem.is_empty());
        let mut r = rng::seeded(1);
        for s in &train.samples {
            mem.offer_reservoir(s, 0, &mut r);
        }
        assert!(mem.is_empty());
        assert!(mem.sample_replay(3, &mut r).is_empty());
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for name in ["rainbow", "random", "reservoir", "prototype", "greedy_balanced"] {
            assert_eq!(Strategy::parse(name).unwrap().name(), name);
        }
        assert!(Strategy::parse("herding").is_err());
        assert!(Strategy::Reservoir.updates_per_sample());
        assert!(!Strategy::Rainbow.updates_per_sample());
    }
}
