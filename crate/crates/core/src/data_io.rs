//! Synthetic identity datasets, binary dataset/embedding file formats, and
//! deterministic batch iteration.

use std::io::Cursor;
use std::path::Path;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};
use crate::vec_math::{self, Matrix};

/// Dataset file magic ("CFDS") and embedding file magic ("CFEM").
pub const DATASET_MAGIC: [u8; 4] = *b"CFDS";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"CFEM";
pub const FORMAT_VERSION: u32 = 1;

/// Input samples with identity labels. Every identity in
/// `0..num_identities` has at least one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<u32>,
    pub num_identities: usize,
}

/// Feature rows with identity labels, e.g. extracted by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub num_identities: usize,
}

fn validate_labels(labels: &[u32], num_identities: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            expected: format!("{rows} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    for &y in labels {
        if (y as usize) >= num_identities {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_identities,
            });
        }
    }
    Ok(())
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<u32>, num_identities: usize) -> Result<Self> {
        validate_labels(&labels, num_identities, inputs.rows())?;
        Ok(Self {
            inputs,
            labels,
            num_identities,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }
}

impl EmbeddingMatrix {
    pub fn new(features: Matrix, labels: Vec<u32>, num_identities: usize) -> Result<Self> {
        validate_labels(&labels, num_identities, features.rows())?;
        Ok(Self {
            features,
            labels,
            num_identities,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Generate a balanced synthetic identity dataset: one unit-norm center per
/// identity drawn uniformly on the sphere, plus isotropic Gaussian noise per
/// sample. Deterministic in `seed`.
pub fn gen_synthetic(
    m: usize,
    per_id: usize,
    input_dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if m < 2 {
        return Err(Error::InvalidParams("need at least 2 identities".into()));
    }
    if per_id < 1 {
        return Err(Error::InvalidParams("need at least 1 sample per identity".into()));
    }
    if input_dim < 1 {
        return Err(Error::InvalidParams("input_dim must be >= 1".into()));
    }
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::InvalidParams("noise_sigma must be >= 0".into()));
    }
    let mut rng = vec_math::seeded_rng(seed);
    // Centers first, so they depend only on (m, input_dim, seed).
    let mut centers = Matrix::zeros(m, input_dim);
    for i in 0..m {
        loop {
            let row = centers.row_mut(i);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = vec_math::norm(centers.row(i));
            if n > 1e-6 {
                let row = centers.row_mut(i);
                for v in row.iter_mut() {
                    *v /= n;
                }
                break;
            }
        }
    }
    let l = m * per_id;
    let mut inputs = Matrix::zeros(l, input_dim);
    let mut labels = Vec::with_capacity(l);
    for id in 0..m {
        for s in 0..per_id {
            let row_idx = id * per_id + s;
            let c = centers.row(id).to_vec();
            let row = inputs.row_mut(row_idx);
            for (k, v) in row.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = c[k] + noise_sigma * noise;
            }
            labels.push(id as u32);
        }
    }
    LabeledDataset::new(inputs, labels, m)
}

fn encode_labeled(magic: [u8; 4], rows: &Matrix, labels: &[u32], m: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&magic);
    binio::write_u32(&mut buf, FORMAT_VERSION)?;
    binio::write_u64(&mut buf, rows.rows() as u64)?;
    binio::write_u32(&mut buf, rows.cols() as u32)?;
    binio::write_u32(&mut buf, m as u32)?;
    for &y in labels {
        binio::write_u32(&mut buf, y)?;
    }
    for &v in rows.data() {
        binio::write_f32(&mut buf, v as f32)?;
    }
    Ok(buf)
}

fn decode_labeled(magic: [u8; 4], bytes: &[u8]) -> Result<(Matrix, Vec<u32>, usize)> {
    let mut r = Cursor::new(bytes);
    binio::expect_magic(&mut r, magic)?;
    binio::expect_version(&mut r, FORMAT_VERSION)?;
    let l = binio::read_u64(&mut r)? as usize;
    let d = binio::read_u32(&mut r)? as usize;
    let m = binio::read_u32(&mut r)? as usize;
    let mut labels = Vec::with_capacity(l);
    for _ in 0..l {
        labels.push(binio::read_u32(&mut r)?);
    }
    let mut data = Vec::with_capacity(l * d);
    for _ in 0..l * d {
        let v = binio::read_f32(&mut r)? as f64;
        if !v.is_finite() {
            return Err(Error::InvalidParams("non-finite value in file".into()));
        }
        data.push(v);
    }
    Ok((Matrix::from_vec(l, d, data), labels, m))
}

/// Write an embedding file ("CFEM", version, L, d, M, labels, f32 features).
/// The write is atomic: a temp file is renamed into place.
pub fn write_embeddings(path: &Path, e: &EmbeddingMatrix) -> Result<()> {
    let buf = encode_labeled(EMBEDDING_MAGIC, &e.features, &e.labels, e.num_identities)?;
    binio::atomic_write(path, &buf)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path)?;
    let (features, labels, m) = decode_labeled(EMBEDDING_MAGIC, &bytes)?;
    EmbeddingMatrix::new(features, labels, m)
}

/// Write a dataset file ("CFDS"; same layout as "CFEM" with the input
/// dimension in place of the embedding dimension).
pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let buf = encode_labeled(DATASET_MAGIC, &ds.inputs, &ds.labels, ds.num_identities)?;
    binio::atomic_write(path, &buf)
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let (inputs, labels, m) = decode_labeled(DATASET_MAGIC, &bytes)?;
    LabeledDataset::new(inputs, labels, m)
}

/// Seeded uniform shuffle of sample indices, chunked into batches. The
/// final short batch is kept; concatenating all batches yields a
/// permutation of `0..ds.len()`.
pub fn batch_iter(ds: &LabeledDataset, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    let mut rng = vec_math::seeded_rng(epoch_seed);
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    indices.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
