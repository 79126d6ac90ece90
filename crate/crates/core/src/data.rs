//! Dataset ingestion and generation: IDX files, seeded Gaussian-blob tasks,
//! splits, and per-step batch schedules.
//!
//! All randomness flows from explicit seeds; loading and generation are pure
//! functions of `(path, seed)`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlfError, Result};
use crate::tensor::Tensor;

const LABEL_MAGIC: u32 = 0x0000_0801;
const IMAGE_MAGIC: u32 = 0x0000_0803;

/// A supervised classification dataset with inputs scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2("dataset")?;
        if labels.len() != n {
            return Err(DlfError::shape(
                "dataset",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(DlfError::InvalidArg(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows of the dataset selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DlfError::InvalidArg(format!(
                    "subset index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::from_vec(vec![indices.len(), d], data)?,
            labels,
            self.n_classes,
        )
    }

    /// Concatenation of two datasets over the same feature space.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() || self.n_classes != other.n_classes {
            return Err(DlfError::shape("concat", "incompatible datasets"));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            Tensor::from_vec(vec![self.len() + other.len(), self.dim()], data)?,
            labels,
            self.n_classes,
        )
    }
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let display = path.display().to_string();
    let mut file = File::open(path).map_err(|source| DlfError::Io {
        path: display.clone(),
        source,
    })?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|source| DlfError::Io {
        path: display.clone(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut decoded)
            .map_err(|source| DlfError::Io {
                path: display,
                source,
            })?;
        Ok(decoded)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: String,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn new(path: &Path, bytes: &'a [u8]) -> Self {
        IdxReader {
            path: path.display().to_string(),
            bytes,
            offset: 0,
        }
    }

    fn err(&self, detail: impl Into<String>) -> DlfError {
        DlfError::Parse {
            path: self.path.clone(),
            offset: self.offset as u64,
            detail: detail.into(),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let v = u32::from_be_bytes(
            self.bytes[self.offset..self.offset + 4]
                .try_into()
                .expect("4 bytes"),
        );
        self.offset += 4;
        Ok(v)
    }

    fn read_payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(self.err(format!(
                "truncated payload: need {len} bytes, have {}",
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader::new(path, bytes);
    let magic = r.read_u32("magic")?;
    if magic != LABEL_MAGIC {
        // Report the magic at its own offset (0), not after consuming it.
        r.offset = 0;
        return Err(r.err(format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = r.read_u32("label count")? as usize;
    Ok(r.read_payload(count)?.to_vec())
}

fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader::new(path, bytes);
    let magic = r.read_u32("magic")?;
    if magic != IMAGE_MAGIC {
        r.offset = 0;
        return Err(r.err(format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = r.read_u32("image count")? as usize;
    let rows = r.read_u32("row count")? as usize;
    let cols = r.read_u32("column count")? as usize;
    let pixels = r.read_payload(count * rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

/// Loads a big-endian IDX image/label pair into a dataset. Pixels are scaled
/// by 1/255 into `[0, 1]` and images are flattened row-major. Files ending in
/// `.gz` are transparently gunzipped.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_file_bytes(images_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let label_bytes = read_file_bytes(labels_path)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if labels.len() != count {
        return Err(DlfError::Parse {
            path: labels_path.display().to_string(),
            offset: 4,
            detail: format!(
                "label count {} does not match image count {}",
                labels.len(),
                count
            ),
        });
    }
    let dim = rows * cols;
    let inputs = Tensor::from_vec(
        vec![count, dim],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(|b| b as usize).collect();
    let n_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, n_classes.max(2))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let io_err = |source| DlfError::Io {
        path: display.clone(),
        source,
    };
    let mut file = File::create(path).map_err(io_err)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(&mut file, flate2::Compression::default());
        enc.write_all(bytes).map_err(io_err)?;
        enc.finish().map_err(io_err)?;
    } else {
        file.write_all(bytes).map_err(io_err)?;
    }
    Ok(())
}

/// Writes dataset inputs as an IDX image file with the given image geometry.
/// Values are quantized to bytes by `round(v * 255)`.
pub fn write_idx_images(path: &Path, inputs: &Tensor, rows: usize, cols: usize) -> Result<()> {
    let (n, d) = inputs.dims2("write_idx_images")?;
    if rows * cols != d {
        return Err(DlfError::shape(
            "write_idx_images",
            format!("{rows}x{cols} geometry for {d} features"),
        ));
    }
    let mut bytes = Vec::with_capacity(16 + n * d);
    bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend(
        inputs
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    write_bytes(path, &bytes)
}

/// Writes labels as an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y > 255) {
        return Err(DlfError::InvalidArg(format!(
            "label {bad} does not fit in an IDX byte"
        )));
    }
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&y| y as u8));
    write_bytes(path, &bytes)
}

/// Standard normal draw via Box-Muller; two uniforms per value keeps the
/// stream layout independent of any library distribution internals.
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded Gaussian-blob classification task.
///
/// Each class draws from an isotropic unit Gaussian around a seeded random
/// center scaled by `separation`. Class counts are the exact rounded
/// proportions (largest-remainder rounding); example order is a seeded
/// shuffle. Inputs are min-max scaled per dimension into `[0, 1]`.
pub fn synth_blobs(
    n: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    proportions: &[f64],
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 {
        return Err(DlfError::InvalidArg("classes and dim must be positive".into()));
    }
    if n < n_classes {
        return Err(DlfError::InvalidArg(format!(
            "{n} examples cannot cover {n_classes} classes"
        )));
    }
    if proportions.len() != n_classes {
        return Err(DlfError::InvalidArg(format!(
            "{} proportions for {n_classes} classes",
            proportions.len()
        )));
    }
    if proportions.iter().any(|&p| p < 0.0)
        || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DlfError::InvalidArg(
            "proportions must be nonnegative and sum to 1".into(),
        ));
    }

    // Largest-remainder rounding to exact per-class counts.
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(c, p)| (c, p * n as f64 - counts[c] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        counts[remainders[k % n_classes].0] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| std_normal(&mut rng) * separation).collect())
        .collect();

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..dim {
                data.push(centers[c][j] + std_normal(&mut rng));
            }
            labels.push(c);
        }
    }

    // Seeded example shuffle so sequential batching still mixes classes.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut shuffled = Vec::with_capacity(n * dim);
    let mut shuffled_labels = Vec::with_capacity(n);
    for &i in &order {
        shuffled.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        shuffled_labels.push(labels[i]);
    }

    // Per-dimension min-max scaling into [0, 1].
    for j in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = shuffled[i * dim + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for i in 0..n {
            let v = &mut shuffled[i * dim + j];
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
    }

    Dataset::new(Tensor::from_vec(vec![n, dim], shuffled)?, shuffled_labels, n_classes)
}

/// Disjoint seeded-shuffle split into train/dev/test parts.
pub fn split(ds: &Dataset, sizes: (usize, usize, usize), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ntr, ndev, nte) = sizes;
    let total = ntr + ndev + nte;
    if total > ds.len() {
        return Err(DlfError::InvalidArg(format!(
            "split sizes {sizes:?} exceed {} examples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train = ds.subset(&order[..ntr])?;
    let dev = ds.subset(&order[ntr..ntr + ndev])?;
    let test = ds.subset(&order[ntr + ndev..total])?;
    Ok((train, dev, test))
}

/// Minibatch index lists, one per inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    batches: Vec<Vec<usize>>,
    seed: u64,
}

impl BatchSchedule {
    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn batch(&self, t: usize) -> &[usize] {
        &self.batches[t]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Draws `t_steps` batches of `batch_size` indices from a stream of seeded
/// permutations of `0..n`, reshuffling at every epoch boundary. A batch may
/// straddle the boundary.
pub fn make_schedule(n: usize, t_steps: usize, batch_size: usize, seed: u64) -> Result<BatchSchedule> {
    if n == 0 || batch_size == 0 {
        return Err(DlfError::InvalidArg(
            "schedule needs a nonempty dataset and positive batch size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut batches = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor == n {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(perm[cursor]);
            cursor += 1;
        }
        batches.push(batch);
    }
    Ok(BatchSchedule { batches, seed })
}
