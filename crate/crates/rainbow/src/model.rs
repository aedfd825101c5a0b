//! A small from-scratch MLP classifier: two ReLU hidden layers, softmax
//! output, soft-label cross-entropy, analytic backpropagation, SGD with
//! momentum, and a cosine-annealed learning-rate schedule.
//!
//! Determinism: every dot product runs the same fixed-order lane-accumulator
//! kernel regardless of batch composition, so batched and single-row
//! forwards are bitwise identical and evaluation is invariant to how the
//! eval set is chunked.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Optimizer and schedule settings for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub momentum: f64,
}

impl TrainConfig {
    /// Standard settings; `total_steps` is phase-specific and must be set by
    /// the caller before scheduling.
    pub fn with_total_steps(total_steps: usize) -> TrainConfig {
        TrainConfig { lr_max: 0.05, lr_min: 0.0005, batch_size: 16, total_steps, momentum: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning-rate range ({}, {}) must satisfy 0 < lr_min <= lr_max",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Cosine annealing from lr_max (step 0) to lr_min (step >= total_steps),
/// with both endpoints returned exactly.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    if step == 0 || cfg.total_steps == 0 {
        return cfg.lr_max;
    }
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    let frac = step as f64 / cfg.total_steps as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Fixed-order dot product over 16 parallel lanes. The shape of the
/// reduction never depends on context, which keeps results bitwise
/// reproducible; the lane loop also auto-vectorizes well.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let mut ai = a.chunks_exact(16);
    let mut bi = b.chunks_exact(16);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..16 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut sum = 0.0f32;
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        sum += x * y;
    }
    for l in 0..16 {
        sum += acc[l];
    }
    sum
}

/// `out[j] += scale * row[j]` over a contiguous row.
#[inline]
fn axpy(out: &mut [f32], scale: f32, row: &[f32]) {
    for (o, &r) in out.iter_mut().zip(row) {
        *o += scale * r;
    }
}

/// One affine layer, weights row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: Vec<f32>,
    b: Vec<f32>,
    inputs: usize,
    outputs: usize,
}

impl Layer {
    /// `z = W x + b`, one output row at a time.
    fn affine(&self, x: &[f32], z: &mut [f32]) {
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = dot(&self.w[o * self.inputs..(o + 1) * self.inputs], x) + self.b[o];
        }
    }
}

/// Per-parameter gradients, in the same layout as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    arrays: [Vec<f32>; 6],
}

impl Gradients {
    /// Gradient arrays in parameter order: w1, b1, w2, b2, w3, b3.
    pub fn arrays(&self) -> &[Vec<f32>; 6] {
        &self.arrays
    }

    /// All gradient entries flattened in parameter order.
    pub fn flat(&self) -> Vec<f32> {
        self.arrays.iter().flatten().copied().collect()
    }
}

/// The classifier: input -> hidden -> hidden -> classes with ReLU between
/// affine layers and a stabilized softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    l1: Layer,
    l2: Layer,
    l3: Layer,
    velocity: Option<[Vec<f32>; 6]>,
    pub step: u64,
}

impl ClassifierState {
    /// He-initialized network: weights ~ Normal(0, sqrt(2 / fan_in)) drawn
    /// in layer order, biases zero. Deterministic in the seed; callers
    /// derive distinct seeds for distinct purposes.
    pub fn init(input_dim: usize, hidden_dim: usize, class_count: usize, seed: u64) -> Result<ClassifierState> {
        if class_count < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
        }
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("input_dim and hidden_dim must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        let mut make = |inputs: usize, outputs: usize| -> Layer {
            let std = (2.0 / inputs as f64).sqrt();
            let dist = Normal::new(0.0f64, std).expect("positive std");
            let w = (0..inputs * outputs).map(|_| dist.sample(&mut r) as f32).collect();
            Layer { w, b: vec![0.0; outputs], inputs, outputs }
        };
        let l1 = make(input_dim, hidden_dim);
        let l2 = make(hidden_dim, hidden_dim);
        let l3 = make(hidden_dim, class_count);
        Ok(ClassifierState { l1, l2, l3, velocity: None, step: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.l1.inputs
    }

    pub fn hidden_dim(&self) -> usize {
        self.l1.outputs
    }

    pub fn class_count(&self) -> usize {
        self.l3.outputs
    }

    /// Parameter arrays in canonical order: w1, b1, w2, b2, w3, b3.
    pub fn param_arrays(&self) -> [&[f32]; 6] {
        [&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b, &self.l3.w, &self.l3.b]
    }

    /// All parameters flattened in canonical order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.param_arrays().iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_arrays().iter().map(|a| a.len()).sum()
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.l1.inputs {
            return Err(Error::Shape(format!(
                "input has {} features, the model expects {}",
                x.len(),
                self.l1.inputs
            )));
        }
        Ok(())
    }

    /// Runs the two hidden layers for one row, filling the post-ReLU
    /// activations h1 and h2.
    fn hidden_forward(&self, x: &[f32], h1: &mut [f32], h2: &mut [f32]) {
        self.l1.affine(x, h1);
        for v in h1.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.l2.affine(h1, h2);
        for v in h2.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Stabilized softmax over one logit row, in place.
    fn softmax(row: &mut [f32]) {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Class probabilities for a batch, one softmax row per input row.
    pub fn forward(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let h = self.hidden_dim();
        let c = self.class_count();
        let mut h1 = vec![0.0f32; h];
        let mut h2 = vec![0.0f32; h];
        let mut out = Vec::with_capacity(rows.len());
        for &x in rows {
            self.check_input(x)?;
            self.hidden_forward(x, &mut h1, &mut h2);
            let mut p = vec![0.0f32; c];
            self.l3.affine(&h2, &mut p);
            Self::softmax(&mut p);
            out.push(p);
        }
        Ok(out)
    }

    /// Penultimate (second hidden layer, post-ReLU) activations per row.
    pub fn features(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let h = self.hidden_dim();
        let mut h1 = vec![0.0f32; h];
        let mut out = Vec::with_capacity(rows.len());
        for &x in rows {
            self.check_input(x)?;
            let mut h2 = vec![0.0f32; h];
            self.hidden_forward(x, &mut h1, &mut h2);
            out.push(h2);
        }
        Ok(out)
    }

    /// Most likely class per row; ties break toward the smaller index.
    pub fn predict(&self, rows: &[&[f32]]) -> Result<Vec<usize>> {
        Ok(self.forward(rows)?.iter().map(|p| argmax(p)).collect())
    }

    /// Mean soft-label cross-entropy over the batch and its analytic
    /// gradients. Label rows must sum to 1.
    pub fn loss_and_grad(&self, rows: &[&[f32]], soft_labels: &[Vec<f32>]) -> Result<(f64, Gradients)> {
        if rows.len() != soft_labels.len() {
            return Err(Error::Train(format!(
                "{} input rows but {} label rows",
                rows.len(),
                soft_labels.len()
            )));
        }
        if rows.is_empty() {
            return Err(Error::Train("cannot take a gradient of an empty batch".into()));
        }
        let h = self.hidden_dim();
        let c = self.class_count();
        let mut grads = Gradients {
            arrays: [
                vec![0.0; self.l1.w.len()],
                vec![0.0; self.l1.b.len()],
                vec![0.0; self.l2.w.len()],
                vec![0.0; self.l2.b.len()],
                vec![0.0; self.l3.w.len()],
                vec![0.0; self.l3.b.len()],
            ],
        };
        let mut h1 = vec![0.0f32; h];
        let mut h2 = vec![0.0f32; h];
        let mut p = vec![0.0f32; c];
        let mut dz3 = vec![0.0f32; c];
        let mut dh2 = vec![0.0f32; h];
        let mut dh1 = vec![0.0f32; h];
        let mut loss_sum = 0.0f64;

        for (&x, y) in rows.iter().zip(soft_labels) {
            self.check_input(x)?;
            if y.len() != c {
                return Err(Error::Train(format!(
                    "label row has {} entries, the model has {c} classes",
                    y.len()
                )));
            }
            let ysum: f64 = y.iter().map(|&v| f64::from(v)).sum();
            if (ysum - 1.0).abs() > 1e-4 {
                return Err(Error::Train(format!("label row sums to {ysum}, expected 1")));
            }
            self.hidden_forward(x, &mut h1, &mut h2);
            self.l3.affine(&h2, &mut p);
            Self::softmax(&mut p);

            for ci in 0..c {
                if y[ci] != 0.0 {
                    loss_sum -= f64::from(y[ci]) * f64::from(p[ci]).max(1e-12).ln();
                }
                dz3[ci] = p[ci] - y[ci];
            }

            // Output layer: dW3 row o accumulates dz3[o] * h2, db3 += dz3.
            let [_, _, _, _, gw3, gb3] = &mut grads.arrays;
            for o in 0..c {
                axpy(&mut gw3[o * h..(o + 1) * h], dz3[o], &h2);
                gb3[o] += dz3[o];
            }
            // dh2 = W3^T dz3 via row-wise accumulation, then ReLU gate.
            dh2.fill(0.0);
            for o in 0..c {
                axpy(&mut dh2, dz3[o], &self.l3.w[o * h..(o + 1) * h]);
            }
            for j in 0..h {
                if h2[j] <= 0.0 {
                    dh2[j] = 0.0;
                }
            }
            let [_, _, gw2, gb2, _, _] = &mut grads.arrays;
            dh1.fill(0.0);
            for o in 0..h {
                let d = dh2[o];
                if d != 0.0 {
                    axpy(&mut gw2[o * h..(o + 1) * h], d, &h1);
                    gb2[o] += d;
                    axpy(&mut dh1, d, &self.l2.w[o * h..(o + 1) * h]);
                }
            }
            for j in 0..h {
                if h1[j] <= 0.0 {
                    dh1[j] = 0.0;
                }
            }
            let [gw1, gb1, _, _, _, _] = &mut grads.arrays;
            let inputs = self.l1.inputs;
            for o in 0..h {
                let d = dh1[o];
                if d != 0.0 {
                    axpy(&mut gw1[o * inputs..(o + 1) * inputs], d, x);
                    gb1[o] += d;
                }
            }
        }

        let inv = 1.0 / rows.len() as f32;
        for a in &mut grads.arrays {
            for g in a.iter_mut() {
                *g *= inv;
            }
        }
        Ok((loss_sum / rows.len() as f64, grads))
    }

    /// One momentum-SGD step: v <- momentum * v + g; p <- p - lr * v.
    /// Aborts with a diagnostic if any parameter leaves the finite range.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        let velocity = self.velocity.get_or_insert_with(|| {
            [
                vec![0.0; grads.arrays[0].len()],
                vec![0.0; grads.arrays[1].len()],
                vec![0.0; grads.arrays[2].len()],
                vec![0.0; grads.arrays[3].len()],
                vec![0.0; grads.arrays[4].len()],
                vec![0.0; grads.arrays[5].len()],
            ]
        });
        let lr = lr as f32;
        let momentum = momentum as f32;
        let params: [&mut [f32]; 6] = [
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.l3.w,
            &mut self.l3.b,
        ];
        let mut finite = true;
        for ((param, vel), grad) in params.into_iter().zip(velocity.iter_mut()).zip(&grads.arrays) {
            if param.len() != grad.len() {
                return Err(Error::Train("gradient layout does not match the model".into()));
            }
            for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = momentum * *v + g;
                *p -= lr * *v;
                finite &= p.is_finite();
            }
        }
        self.step += 1;
        if !finite {
            return Err(Error::Train(format!(
                "non-finite parameter after step {}; aborting training",
                self.step
            )));
        }
        Ok(())
    }

    /// Accuracy of argmax predictions over labelled rows, computed in
    /// fixed-size chunks; invariant to chunking by construction.
    pub fn evaluate<'a, I>(&self, samples: I) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a [f32], usize)>,
    {
        let mut total = 0usize;
        let mut correct = 0usize;
        let mut rows: Vec<&[f32]> = Vec::with_capacity(256);
        let mut labels: Vec<usize> = Vec::with_capacity(256);
        let flush = |rows: &mut Vec<&[f32]>, labels: &mut Vec<usize>, correct: &mut usize| -> Result<()> {
            if rows.is_empty() {
                return Ok(());
            }
            let preds = self.predict(rows)?;
            *correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
            rows.clear();
            labels.clear();
            Ok(())
        };
        for (x, label) in samples {
            rows.push(x);
            labels.push(label);
            total += 1;
            if rows.len() == 256 {
                flush(&mut rows, &mut labels, &mut correct)?;
            }
        }
        flush(&mut rows, &mut labels, &mut correct)?;
        if total == 0 {
            return Err(Error::Metric("evaluation set is empty".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    /// Serializes parameters: a little-endian header (array count, then rank
    /// and dimensions per array) followed by the f32 payloads in canonical
    /// order. Written atomically via a temp file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dims: [Vec<u32>; 6] = [
            vec![self.l1.outputs as u32, self.l1.inputs as u32],
            vec![self.l1.outputs as u32],
            vec![self.l2.outputs as u32, self.l2.inputs as u32],
            vec![self.l2.outputs as u32],
            vec![self.l3.outputs as u32, self.l3.inputs as u32],
            vec![self.l3.outputs as u32],
        ];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&6u32.to_le_bytes());
        for d in &dims {
            bytes.extend_from_slice(&(d.len() as u32).to_le_bytes());
            for &v in d {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for arr in self.param_arrays() {
            for &v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let io_err = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    /// Reads a checkpoint written by `save`.
    pub fn load(path: &Path) -> Result<ClassifierState> {
        let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut off = 0usize;
        let mut take_u32 = |bytes: &[u8]| -> Result<u32> {
            let b = bytes.get(off..off + 4).ok_or_else(|| Error::Data(format!(
                "checkpoint {} is truncated at byte {off}",
                path.display()
            )))?;
            off += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let count = take_u32(&bytes)?;
        if count != 6 {
            return Err(Error::Data(format!(
                "checkpoint {} declares {count} arrays, expected 6",
                path.display()
            )));
        }
        let mut dims: Vec<Vec<u32>> = Vec::with_capacity(6);
        for _ in 0..6 {
            let rank = take_u32(&bytes)? as usize;
            let mut d = Vec::with_capacity(rank);
            for _ in 0..rank {
                d.push(take_u32(&bytes)?);
            }
            dims.push(d);
        }
        let mut arrays: Vec<Vec<f32>> = Vec::with_capacity(6);
        for d in &dims {
            let n: usize = d.iter().map(|&v| v as usize).product();
            let need = n * 4;
            let b = bytes.get(off..off + need).ok_or_else(|| Error::Data(format!(
                "checkpoint {} payload is truncated",
                path.display()
            )))?;
            arrays.push(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
            off += need;
        }
        if off != bytes.len() {
            return Err(Error::Data(format!("checkpoint {} has trailing bytes", path.display())));
        }
        let expect_2d = |i: usize| -> Result<(usize, usize)> {
            match dims[i].as_slice() {
                [o, inp] => Ok((*o as usize, *inp as usize)),
                _ => Err(Error::Data(format!("checkpoint {} array {i} is not a matrix", path.display()))),
            }
        };
        let (h1o, h1i) = expect_2d(0)?;
        let (h2o, h2i) = expect_2d(2)?;
        let (co, ci) = expect_2d(4)?;
        if h2i != h1o || ci != h2o {
            return Err(Error::Data(format!("checkpoint {} layer shapes disagree", path.display())));
        }
        let mut it = arrays.into_iter();
        let (w1, b1) = (it.next().unwrap(), it.next().unwrap());
        let (w2, b2) = (it.next().unwrap(), it.next().unwrap());
        let (w3, b3) = (it.next().unwrap(), it.next().unwrap());
        Ok(ClassifierState {
            l1: Layer { w: w1, b: b1, inputs: h1i, outputs: h1o },
            l2: Layer { w: w2, b: b2, inputs: h2i, outputs: h2o },
            l3: Layer { w: w3, b: b3, inputs: ci, outputs: co },
            velocity: None,
            step: 0,
        })
    }
}

/// Index of the largest value; ties break toward the smaller index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hard label as a probability row: 1 at `label`, 0 elsewhere.
pub fn one_hot(label: usize, class_count: usize) -> Vec<f32> {
    let mut row = vec![0.0f32; class_count];
    row[label] = 1.0;
    row
}
