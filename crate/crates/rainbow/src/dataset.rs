//! Data loading: MNIST IDX files, synthetic Gaussian blobs, and the shared
//! in-memory dataset representation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Spatial layout of one sample's feature vector: row-major, channel-last.
/// Plain vectors are carried as a single 1 x dim x 1 row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn of_vector(dim: usize) -> Shape {
        Shape { height: 1, width: dim, channels: 1 }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labelled example. Features are reals in [0, 1] whose length matches
/// the owning dataset's shape; `id` is unique within the dataset and equals
/// the sample's position in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub features: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An in-memory dataset plus its shared metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub shape: Shape,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample lookup by id; ids equal positions by construction.
    pub fn get(&self, id: u32) -> &Sample {
        &self.samples[id as usize]
    }

    /// Ids of every sample with the given label, ascending.
    pub fn ids_of_class(&self, class: usize) -> Vec<u32> {
        self.samples
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.id)
            .collect()
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for s in &self.samples {
            *hist.entry(s.label).or_insert(0) += 1;
        }
        hist
    }

    /// Checks the structural invariants: ids match positions, labels are in
    /// range, feature lengths match the shape, and (for the train split)
    /// every class is represented.
    pub fn validate(&self) -> Result<()> {
        let flen = self.shape.len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.id as usize != i {
                return Err(Error::Data(format!("sample at position {i} has id {}", s.id)));
            }
            if s.label >= self.class_count {
                return Err(Error::Data(format!(
                    "sample {} has label {} but the dataset declares {} classes",
                    s.id, s.label, self.class_count
                )));
            }
            if s.features.len() != flen {
                return Err(Error::Shape(format!(
                    "sample {} has {} features, shape demands {flen}",
                    s.id,
                    s.features.len()
                )));
            }
        }
        if matches!(self.split, Split::Train) {
            let hist = self.class_histogram();
            for c in 0..self.class_count {
                if !hist.contains_key(&c) {
                    return Err(Error::Data(format!("train split has no samples of class {c}")));
                }
            }
        }
        Ok(())
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of one IDX file: magic, dimension sizes, payload bytes.
/// Only the two unsigned-byte layouts used by the MNIST distribution are
/// accepted: 0x00000803 (3-D image stacks) and 0x00000801 (1-D label lists).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Parses IDX bytes; `origin` names the source in error messages.
    pub fn parse(bytes: &[u8], origin: &str) -> Result<IdxArray> {
        let read_u32 = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::IdxLength {
                    origin: origin.to_string(),
                    expected: off + 4,
                    found: bytes.len(),
                })
        };
        let magic = read_u32(0)?;
        let ndim = match magic {
            IDX_IMAGES_MAGIC => 3,
            IDX_LABELS_MAGIC => 1,
            found => {
                return Err(Error::IdxMagic { origin: origin.to_string(), found });
            }
        };
        let mut dims = Vec::with_capacity(ndim);
        for d in 0..ndim {
            dims.push(read_u32(4 + 4 * d)? as usize);
        }
        let header = 4 + 4 * ndim;
        let expected: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(Error::IdxLength {
                origin: origin.to_string(),
                expected: header + expected,
                found: bytes.len(),
            });
        }
        Ok(IdxArray { magic, dims, data: payload.to_vec() })
    }

    /// Serializes back to the on-disk layout; `parse` then `to_bytes` returns
    /// the original bytes unchanged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Reads and parses one IDX file.
pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    IdxArray::parse(&bytes, &path.display().to_string())
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const MNIST_CLASSES: usize = 10;

/// Loads the four standard MNIST files from `dir`, normalizing pixels to
/// [0, 1] by dividing by 255. Sample ids follow file order.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_split(dir, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, Split::Train)?;
    let test = load_mnist_split(dir, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, Split::Test)?;
    Ok((train, test))
}

fn load_mnist_split(dir: &Path, images_name: &str, labels_name: &str, split: Split) -> Result<Dataset> {
    let images = load_idx(&dir.join(images_name))?;
    let labels = load_idx(&dir.join(labels_name))?;
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic { origin: images_name.to_string(), found: images.magic });
    }
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic { origin: labels_name.to_string(), found: labels.magic });
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Data(format!(
            "{images_name} holds {} images but {labels_name} holds {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let shape = Shape { height: images.dims[1], width: images.dims[2], channels: 1 };
    let flen = shape.len();
    let mut samples = Vec::with_capacity(images.dims[0]);
    for (i, chunk) in images.data.chunks_exact(flen).enumerate() {
        let label = labels.data[i] as usize;
        if label >= MNIST_CLASSES {
            return Err(Error::Data(format!("{labels_name} entry {i} is {label}, outside 0..{MNIST_CLASSES}")));
        }
        samples.push(Sample {
            id: i as u32,
            features: chunk.iter().map(|&b| f32::from(b) / 255.0).collect(),
            label,
        });
    }
    let ds = Dataset { samples, shape, class_count: MNIST_CLASSES, split };
    ds.validate()?;
    Ok(ds)
}

/// Parameters for the synthetic generator: `class_count` isotropic Gaussians
/// with means `separation` apart and standard deviation `noise`, producing
/// `samples_per_class` points of `dim` features each. Features are mapped
/// into [0, 1] by one shared affine transform, which preserves nearest-mean
/// geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { class_count: 10, samples_per_class: 100, dim: 16, separation: 4.0, noise: 1.0 }
    }
}

/// Generates a synthetic train/test pair, split 80/20 per class (train share
/// rounded up so every class keeps at least one training sample).
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.class_count == 0 || spec.samples_per_class == 0 || spec.dim == 0 {
        return Err(Error::Config("synthetic class_count, samples_per_class, and dim must be positive".into()));
    }
    if !(spec.separation > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::Config("synthetic separation must be positive and noise non-negative".into()));
    }
    let d = spec.dim;
    // Class means sit on the axes at multiples of `separation`, so every pair
    // of means is at least `separation` apart.
    let top_level = spec.separation * (1.0 + ((spec.class_count - 1) / d) as f64);
    let lo = -4.0 * spec.noise;
    let hi = top_level + 4.0 * spec.noise;
    let scale = hi - lo;
    let normal = Normal::new(0.0, spec.noise)
        .map_err(|e| Error::Config(format!("synthetic noise is not a valid std dev: {e}")))?;

    let mut train_raw: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut test_raw: Vec<(usize, Vec<f32>)> = Vec::new();
    let train_n = (4 * spec.samples_per_class).div_ceil(5);
    for class in 0..spec.class_count {
        let axis = class % d;
        let level = spec.separation * (1.0 + (class / d) as f64);
        let mut r = rng::keyed(seed, rng::domain::SYNTH_CLASS, class as u64);
        for i in 0..spec.samples_per_class {
            let mut f = Vec::with_capacity(d);
            for j in 0..d {
                let mean = if j == axis { level } else { 0.0 };
                let v = mean + normal.sample(&mut r);
                f.push((((v - lo) / scale).clamp(0.0, 1.0)) as f32);
            }
            if i < train_n {
                train_raw.push((class, f));
            } else {
                test_raw.push((class, f));
            }
        }
    }

    let build = |raw: Vec<(usize, Vec<f32>)>, split: Split| -> Result<Dataset> {
        let samples = raw
            .into_iter()
            .enumerate()
            .map(|(i, (label, features))| Sample { id: i as u32, features, label })
            .collect();
        let ds = Dataset { samples, shape: Shape::of_vector(d), class_count: spec.class_count, split };
        ds.validate()?;
        Ok(ds)
    };
    Ok((build(train_raw, Split::Train)?, build(test_raw, Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_idx_bytes() -> Vec<u8> {
        // 2 images of 2x3 pixels: header (magic, 2, 2, 3) + 12 payload bytes.
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[0, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6]);
        b
    }

    #[test]
    fn idx_parse_reads_dims_and_payload() {
        let arr = IdxArray::parse(&image_idx_bytes(), "buf").unwrap();
        assert_eq!(arr.magic, IDX_IMAGES_MAGIC);
        assert_eq!(arr.dims, vec![2, 2, 3]);
        assert_eq!(arr.data.len(), 12);
        assert_eq!(arr.data[5], 255);
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let bytes = image_idx_bytes();
        let arr = IdxArray::parse(&bytes, "buf").unwrap();
        assert_eq!(arr.to_bytes(), bytes);

        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&4u32.to_be_bytes());
        labels.extend_from_slice(&[7, 2, 1, 0]);
        let arr = IdxArray::parse(&labels, "buf").unwrap();
        assert_eq!(arr.dims, vec![4]);
        assert_eq!(arr.to_bytes(), labels);
    }

    #[test]
    fn idx_rejects_unknown_magic() {
        let mut bytes = image_idx_bytes();
        bytes[3] = 0x05;
        match IdxArray::parse(&bytes, "buf") {
            Err(Error::IdxMagic { found, .. }) => assert_eq!(found, 0x0000_0805),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_short_payload() {
        let mut bytes = image_idx_bytes();
        bytes.truncate(bytes.len() - 1);
        match IdxArray::parse(&bytes, "buf") {
            Err(Error::IdxLength { expected, found, .. }) => {
                assert_eq!(expected, 16 + 12);
                assert_eq!(found, 16 + 11);
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_oversized_payload() {
        let mut bytes = image_idx_bytes();
        bytes.push(9);
        assert!(matches!(IdxArray::parse(&bytes, "buf"), Err(Error::IdxLength { .. })));
    }

    #[test]
    fn idx_rejects_truncated_header() {
        let bytes = &image_idx_bytes()[..6];
        assert!(matches!(IdxArray::parse(bytes, "buf"), Err(Error::IdxLength { .. })));
    }

    #[test]
    fn synthetic_split_sizes_follow_80_20() {
        // 3 classes x 5 samples: ceil(0.8 * 5) = 4 train + 1 test per class.
        let spec = SyntheticSpec { class_count: 3, samples_per_class: 5, dim: 2, separation: 10.0, noise: 0.1 };
        let (train, test) = make_synthetic(&spec, 11).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 3);
        assert_eq!(train.shape, Shape::of_vector(2));
        for count in train.class_histogram().values() {
            assert_eq!(*count, 4);
        }
    }

    #[test]
    fn synthetic_features_stay_in_unit_interval() {
        let spec = SyntheticSpec { class_count: 7, samples_per_class: 20, dim: 3, separation: 2.0, noise: 1.5 };
        let (train, test) = make_synthetic(&spec, 5).unwrap();
        for s in train.samples.iter().chain(&test.samples) {
            assert!(s.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synthetic_is_nearest_mean_separable_at_wide_separation() {
        // Oracle: with separation 10 and noise 0.1 the blobs are ~100 sigma
        // apart, so classifying each test point by the nearest train-split
        // class mean must be perfect.
        let spec = SyntheticSpec { class_count: 2, samples_per_class: 10, dim: 2, separation: 10.0, noise: 0.1 };
        let (train, test) = make_synthetic(&spec, 3).unwrap();
        let mut means = vec![vec![0f64; spec.dim]; spec.class_count];
        let mut counts = vec![0usize; spec.class_count];
        for s in &train.samples {
            counts[s.label] += 1;
            for (m, &v) in means[s.label].iter_mut().zip(&s.features) {
                *m += f64::from(v);
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m {
                *v /= c as f64;
            }
        }
        for s in &test.samples {
            let nearest = means
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&s.features).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                    let db: f64 = b.iter().zip(&s.features).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(c, _)| c)
                .unwrap();
            assert_eq!(nearest, s.label);
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let (a, _) = make_synthetic(&spec, 42).unwrap();
        let (b, _) = make_synthetic(&spec, 42).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let (c, _) = make_synthetic(&spec, 43).unwrap();
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.features != y.features));
    }

    #[test]
    fn synthetic_rejects_degenerate_specs() {
        let mut spec = SyntheticSpec::default();
        spec.class_count = 0;
        assert!(matches!(make_synthetic(&spec, 1), Err(Error::Config(_))));
        let mut spec = SyntheticSpec::default();
        spec.separation = 0.0;
        assert!(matches!(make_synthetic(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn validate_catches_bad_labels() {
        let ds = Dataset {
            samples: vec![Sample { id: 0, features: vec![0.5], label: 3 }],
            shape: Shape::of_vector(1),
            class_count: 2,
            split: Split::Test,
        };
        assert!(matches!(ds.validate(), Err(Error::Data(_))));
    }

    /// MNIST directory for data-dependent tests: honours RAINBOW_DATA_DIR,
    /// falls back to the sandbox-provisioned path, and skips when absent.
    pub fn mnist_dir() -> Option<std::path::PathBuf> {
        let candidates = [
            std::env::var("RAINBOW_DATA_DIR").unwrap_or_default(),
            "/root/data/mnist".to_string(),
        ];
        candidates
            .iter()
            .filter(|p| !p.is_empty())
            .map(std::path::PathBuf::from)
            .find(|p| p.join(MNIST_TRAIN_IMAGES).exists())
    }

    #[test]
    fn mnist_loads_with_documented_counts() {
        let Some(dir) = mnist_dir() else {
            eprintln!("skipping: MNIST data not found");
            return;
        };
        let (train, test) = load_mnist(&dir).unwrap();
        assert_eq!(train.len(), 60_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.shape, Shape { height: 28, width: 28, channels: 1 });
        assert_eq!(train.class_count, 10);
        let hist = train.class_histogram();
        assert_eq!(hist[&0], 5_923);
        assert_eq!(hist[&1], 6_742);
        assert_eq!(hist[&5], 5_421);
        assert_eq!(*hist.values().min().unwrap(), 5_421);
        assert_eq!(*hist.values().max().unwrap(), 6_742);
    }

    #[test]
    fn mnist_pixels_are_normalized_by_255() {
        let Some(dir) = mnist_dir() else {
            eprintln!("skipping: MNIST data not found");
            return;
        };
        let raw = load_idx(&dir.join(MNIST_TRAIN_IMAGES)).unwrap();
        let (train, _) = load_mnist(&dir).unwrap();
        let s = &train.samples[0];
        for (i, &v) in s.features.iter().enumerate() {
            assert_eq!(v, f32::from(raw.data[i]) / 255.0);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
