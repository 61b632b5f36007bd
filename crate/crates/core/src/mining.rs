//! Informative-relation mining: identity prototypes, top-K informative
//! identity sets, and the memory-updated feature bank that supplies
//! per-sample negative features.

use std::io::Cursor;
use std::path::Path;

use rand::RngExt;

use crate::binio;
use crate::data_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::vec_math::{self, Matrix};

/// Informative-set file magic ("CFHS") and version.
pub const SETS_MAGIC: [u8; 4] = *b"CFHS";
pub const SETS_VERSION: u32 = 1;

/// Per-identity prototypes: row `m` is the mean of identity `m`'s
/// L2-normalized features. Prototypes are not renormalized; downstream
/// cosine ranking is scale-free.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub prototypes: Matrix,
    pub sample_counts: Vec<usize>,
}

/// For each identity, the K most similar other identities (by prototype
/// cosine), most similar first. A row never contains its own identity.
#[derive(Debug, Clone, PartialEq)]
pub struct InformativeSets {
    num_identities: usize,
    k: usize,
    table: Vec<u32>,
}

impl InformativeSets {
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, m: usize) -> &[u32] {
        &self.table[m * self.k..(m + 1) * self.k]
    }

    /// Serialize: magic, version, M, K, then M*K little-endian u32 indices.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&SETS_MAGIC);
        binio::write_u32(&mut buf, SETS_VERSION)?;
        binio::write_u32(&mut buf, self.num_identities as u32)?;
        binio::write_u32(&mut buf, self.k as u32)?;
        for &v in &self.table {
            binio::write_u32(&mut buf, v)?;
        }
        binio::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Cursor::new(bytes.as_slice());
        binio::expect_magic(&mut r, SETS_MAGIC)?;
        binio::expect_version(&mut r, SETS_VERSION)?;
        let m = binio::read_u32(&mut r)? as usize;
        let k = binio::read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(m * k);
        for _ in 0..m * k {
            let v = binio::read_u32(&mut r)?;
            if (v as usize) >= m {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    num_identities: m,
                });
            }
            table.push(v);
        }
        Ok(Self {
            num_identities: m,
            k,
            table,
        })
    }
}

/// One teacher feature per identity, overwritten as batches stream by.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    bank: Matrix,
    initialized: bool,
}

impl FeatureBank {
    pub fn num_identities(&self) -> usize {
        self.bank.rows()
    }

    pub fn dim(&self) -> usize {
        self.bank.cols()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        self.bank.row(m)
    }
}

/// Mean of L2-normalized features per identity. Every identity in
/// `0..num_identities` must have at least one sample.
pub fn compute_prototypes(features: &EmbeddingMatrix) -> Result<PrototypeTable> {
    let m = features.num_identities;
    let d = features.dim();
    let mut sums = Matrix::zeros(m, d);
    let mut counts = vec![0usize; m];
    for i in 0..features.len() {
        let id = features.labels[i] as usize;
        let normalized = vec_math::l2_normalize(features.features.row(i))?;
        let row = sums.row_mut(id);
        for (k, v) in normalized.iter().enumerate() {
            row[k] += v;
        }
        counts[id] += 1;
    }
    for id in 0..m {
        if counts[id] == 0 {
            return Err(Error::EmptyIdentity { identity: id as u32 });
        }
        let row = sums.row_mut(id);
        for v in row.iter_mut() {
            *v /= counts[id] as f64;
        }
    }
    Ok(PrototypeTable {
        prototypes: sums,
        sample_counts: counts,
    })
}

/// Top-`k` most similar other identities per identity, by prototype cosine.
/// Ties break toward the smaller identity index.
pub fn build_informative_sets(protos: &PrototypeTable, k: usize) -> Result<InformativeSets> {
    let m = protos.prototypes.rows();
    if k + 1 > m {
        return Err(Error::InsufficientIdentities {
            needed: k + 1,
            available: m,
        });
    }
    let mut table = Vec::with_capacity(m * k);
    let mut scores = vec![0.0; m];
    for id in 0..m {
        let r = protos.prototypes.row(id);
        for (other, s) in scores.iter_mut().enumerate() {
            *s = if other == id {
                f64::NEG_INFINITY
            } else {
                vec_math::cosine(r, protos.prototypes.row(other))?
            };
        }
        let top = vec_math::topk_indices(&scores, k, Some(id))?;
        table.extend(top.into_iter().map(|i| i as u32));
    }
    Ok(InformativeSets {
        num_identities: m,
        k,
        table,
    })
}

/// Alternative to [`build_informative_sets`]: `k` identities sampled
/// uniformly (without replacement, self excluded) per identity.
pub fn random_informative_sets(num_identities: usize, k: usize, seed: u64) -> Result<InformativeSets> {
    if k + 1 > num_identities {
        return Err(Error::InsufficientIdentities {
            needed: k + 1,
            available: num_identities,
        });
    }
    let mut rng = vec_math::seeded_rng(seed);
    let mut table = Vec::with_capacity(num_identities * k);
    for id in 0..num_identities {
        let mut candidates: Vec<u32> = (0..num_identities as u32)
            .filter(|&c| c as usize != id)
            .collect();
        // partial Fisher-Yates: the first k slots become the sample
        for slot in 0..k {
            let j = rng.random_range(slot..candidates.len());
            candidates.swap(slot, j);
        }
        table.extend_from_slice(&candidates[..k]);
    }
    Ok(InformativeSets {
        num_identities,
        k,
        table,
    })
}

/// Initialize the bank by picking one feature per identity, uniformly at
/// random among that identity's rows. Deterministic in `seed`.
pub fn bank_init(features: &EmbeddingMatrix, seed: u64) -> Result<FeatureBank> {
    let m = features.num_identities;
    let d = features.dim();
    let mut per_identity: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &y) in features.labels.iter().enumerate() {
        per_identity[y as usize].push(i);
    }
    let mut rng = vec_math::seeded_rng(seed);
    let mut bank = Matrix::zeros(m, d);
    for id in 0..m {
        let rows = &per_identity[id];
        if rows.is_empty() {
            return Err(Error::EmptyIdentity { identity: id as u32 });
        }
        let pick = rows[rng.random_range(0..rows.len())];
        bank.row_mut(id).copy_from_slice(features.features.row(pick));
    }
    Ok(FeatureBank {
        bank,
        initialized: true,
    })
}

/// Overwrite `bank[y_i]` with each batch feature row, in batch order
/// (duplicate labels: the later occurrence wins). Other rows are untouched.
pub fn bank_update(bank: &mut FeatureBank, batch_features: &Matrix, batch_labels: &[u32]) -> Result<()> {
    if !bank.initialized {
        return Err(Error::UninitializedBank);
    }
    if batch_features.cols() != bank.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("N x {}", bank.dim()),
            actual: format!("{} x {}", batch_features.rows(), batch_features.cols()),
        });
    }
    assert_eq!(batch_labels.len(), batch_features.rows(), "labels length != batch rows");
    let m = bank.num_identities();
    for &y in batch_labels {
        if (y as usize) >= m {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_identities: m,
            });
        }
    }
    for (i, &y) in batch_labels.iter().enumerate() {
        bank.bank
            .row_mut(y as usize)
            .copy_from_slice(batch_features.row(i));
    }
    Ok(())
}

/// Negative features for one sample: row `k` is the bank row of the k-th
/// identity in the sample's informative set.
pub fn gather_negatives(bank: &FeatureBank, sets: &InformativeSets, label: u32) -> Result<Matrix> {
    if !bank.initialized {
        return Err(Error::UninitializedBank);
    }
    if (label as usize) >= sets.num_identities() || sets.num_identities() != bank.num_identities() {
        return Err(Error::LabelOutOfRange {
            label,
            num_identities: sets.num_identities().min(bank.num_identities()),
        });
    }
    let ids = sets.row(label as usize);
    let mut out = Matrix::zeros(ids.len(), bank.dim());
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(bank.row(id as usize));
    }
    Ok(out)
}
