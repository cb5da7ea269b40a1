//! Datasets: IDX ingestion, synthetic Gaussian blobs, and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine normalization `(x - mean) / scale` applied to every feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: 0.0,
        scale: 1.0,
    };

    /// Global mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    /// Composition: applying `self` after `inner` equals applying the result once.
    fn compose(self, inner: Normalization) -> Normalization {
        Normalization {
            mean: inner.mean + self.mean * inner.scale,
            scale: inner.scale * self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
    id: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        id: impl Into<String>,
    ) -> Result<Self> {
        if features.shape().len() < 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset labels".into(),
                expected: vec![features.shape()[0]],
                actual: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            normalization: Normalization::IDENTITY,
            id: id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Normalize to zero mean and unit scale using this dataset's own statistics.
    pub fn normalized(self) -> Self {
        let norm = Normalization::fit(self.features.data());
        self.with_normalization(norm)
    }

    /// Apply a normalization fitted elsewhere (e.g. on the training split).
    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        for v in self.features.data_mut() {
            *v = (*v - norm.mean) / norm.scale;
        }
        self.normalization = norm.compose(self.normalization);
        self
    }

    /// First `n` samples (or all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization,
            id: self.id.clone(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

const IDX_UBYTE: u8 = 0x08;

struct IdxArray {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 4,
            found: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE {
        return Err(Error::BadMagic {
            path: path.into(),
            found: [bytes[0], bytes[1], bytes[2]],
        });
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::malformed(path, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::malformed(
            path,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    Ok(IdxArray {
        dims,
        payload: bytes[header..].to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an unsigned-byte IDX image file and its label file.
///
/// Pixel values are returned unscaled (0..=255). A 3-dimensional image file
/// `(N, H, W)` yields samples of shape `(1, H, W)`; 4-dimensional files are
/// taken as `(N, C, H, W)`; anything else is flattened per sample.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx(&read_file(ip)?, ip)?;
    let labels = parse_idx(&read_file(lp)?, lp)?;
    if labels.dims.len() != 1 {
        return Err(Error::malformed(lp, "label file must be one-dimensional"));
    }
    let n = images.dims[0];
    if n != labels.dims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.dims[0],
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let sample: Vec<usize> = match images.dims.len() {
        3 => vec![1, images.dims[1], images.dims[2]],
        4 => images.dims[1..].to_vec(),
        _ => vec![images.dims[1..].iter().product::<usize>().max(1)],
    };
    let mut shape = vec![n];
    shape.extend(sample);
    let features = Tensor::new(shape, images.payload.iter().map(|&b| b as f64).collect())?;
    let labels: Vec<usize> = labels.payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let id = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(features, labels, num_classes, id)
}

/// Encode an unsigned-byte IDX array.
pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Write a dataset whose features are integers in 0..=255 as an IDX pair.
pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let to_byte = |v: f64| -> Result<u8> {
        if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
            Ok(v as u8)
        } else {
            Err(Error::InvalidArgument(format!("feature {v} is not a byte value")))
        }
    };
    let pixels = ds
        .features()
        .data()
        .iter()
        .map(|&v| to_byte(v))
        .collect::<Result<Vec<u8>>>()?;
    let mut dims = vec![ds.len()];
    match ds.sample_shape() {
        [1, h, w] => dims.extend([*h, *w]),
        s => dims.extend_from_slice(s),
    }
    let labels = ds
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidArgument("label exceeds 255".into())))
        .collect::<Result<Vec<u8>>>()?;
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, encode_idx(&dims, &pixels)).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, encode_idx(&[labels.len()], &labels)).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Deterministic class centers: unit basis vectors when there are enough
/// dimensions, otherwise points on the unit circle in the first two
/// coordinates (or evenly spaced on a line when `dims == 1`).
pub fn blob_centers(num_classes: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut center = vec![0.0; dims];
            if num_classes <= dims {
                center[c] = 1.0;
            } else if dims == 1 {
                center[0] = c as f64 - (num_classes - 1) as f64 / 2.0;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                center[0] = angle.cos();
                center[1] = angle.sin();
            }
            center
        })
        .collect()
}

/// Isotropic Gaussian clusters around `blob_centers`, samples interleaved by
/// class.
pub fn synthetic_blobs(
    num_classes: usize,
    samples_per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || samples_per_class == 0 || dims == 0 {
        return Err(Error::InvalidArgument(
            "blobs need >= 2 classes, >= 1 sample per class and >= 1 dimension".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread {spread} must be >= 0")));
    }
    let centers = blob_centers(num_classes, dims);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (c, center) in centers.iter().enumerate() {
            data.extend(center.iter().map(|&m| m + spread * noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, dims], data)?,
        labels,
        num_classes,
        format!("blobs-k{num_classes}-d{dims}-s{spread}-seed{seed}"),
    )
}

/// Seeded mini-batch partition for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final partial batch is kept.
pub fn shuffle_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
