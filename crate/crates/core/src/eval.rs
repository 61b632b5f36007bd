//! Verification and identification metrics plus analysis artifacts:
//! accept-rate at fixed false-accept rate, rank-1 identification with
//! distractors, relation-difference histograms, and pairwise similarity
//! score dumps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::RngExt;

use crate::binio;
use crate::data_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::mining::{gather_negatives, FeatureBank, InformativeSets};
use crate::model::{mlp_forward, MlpModel};
use crate::vec_math::{self, Matrix};

/// Index pairs into an [`EmbeddingMatrix`]: positives share an identity,
/// negatives do not. No unordered pair appears twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<(u32, u32)>,
    pub negatives: Vec<(u32, u32)>,
}

/// Fixed-width histogram; out-of-range samples clamp to the end bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bin_edges: Vec<f64>,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 1 && hi > lo, "need hi > lo and at least one bin");
        let width = (hi - lo) / bins as f64;
        let bin_edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        Self {
            bin_edges,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        assert!(x.is_finite(), "histogram sample must be finite");
        let lo = self.bin_edges[0];
        let hi = *self.bin_edges.last().unwrap();
        let bins = self.counts.len();
        let idx = if x < lo {
            0
        } else if x >= hi {
            bins - 1
        } else {
            let w = (hi - lo) / bins as f64;
            (((x - lo) / w) as usize).min(bins - 1)
        };
        self.counts[idx] += 1;
    }

    pub fn edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of mass in bins whose lower edge is at or above `edge`.
    /// Meaningful when `edge` coincides with a bin boundary.
    pub fn fraction_ge(&self, edge: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let above: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.bin_edges[*i] >= edge - 1e-12)
            .map(|(_, &c)| c)
            .sum();
        above as f64 / total as f64
    }

    /// CSV rows `bin_lo,bin_hi,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c)
                .expect("string write");
        }
        binio::atomic_write(path, out.as_bytes())
    }
}

/// Sample `n_pos` positive and `n_neg` negative pairs uniformly without
/// replacement. Deterministic in `seed`.
pub fn make_pairs(e: &EmbeddingMatrix, n_pos: usize, n_neg: usize, seed: u64) -> Result<PairSet> {
    let l = e.len();
    let mut per_identity: Vec<Vec<u32>> = vec![Vec::new(); e.num_identities];
    for (i, &y) in e.labels.iter().enumerate() {
        per_identity[y as usize].push(i as u32);
    }
    // Positive pairs are few enough to enumerate.
    let mut all_pos: Vec<(u32, u32)> = Vec::new();
    for rows in &per_identity {
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                all_pos.push((rows[a], rows[b]));
            }
        }
    }
    if n_pos > all_pos.len() {
        return Err(Error::InsufficientPairs {
            kind: "positive",
            requested: n_pos,
            available: all_pos.len(),
        });
    }
    let total_pairs = l * (l - 1) / 2;
    let total_neg = total_pairs - all_pos.len();
    if n_neg > total_neg {
        return Err(Error::InsufficientPairs {
            kind: "negative",
            requested: n_neg,
            available: total_neg,
        });
    }

    let mut rng = vec_math::seeded_rng(seed);
    // partial Fisher-Yates for the positives
    for slot in 0..n_pos {
        let j = rng.random_range(slot..all_pos.len());
        all_pos.swap(slot, j);
    }
    all_pos.truncate(n_pos);

    // rejection sampling for the negatives
    let mut chosen: HashSet<(u32, u32)> = HashSet::with_capacity(n_neg);
    let mut negatives = Vec::with_capacity(n_neg);
    while negatives.len() < n_neg {
        let a = rng.random_range(0..l as u32);
        let b = rng.random_range(0..l as u32);
        if a == b || e.labels[a as usize] == e.labels[b as usize] {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if chosen.insert(key) {
            negatives.push(key);
        }
    }
    Ok(PairSet {
        positives: all_pos,
        negatives,
    })
}

/// True-accept rate at a false-accept rate budget.
///
/// The threshold is the smallest observed negative score `t` such that
/// `fraction(neg >= t) <= far` ("score >= t" counts as accept). If even the
/// largest negative score violates the budget the threshold is `+inf` and
/// the accept rate 0.
pub fn tar_at_far(pos_scores: &[f64], neg_scores: &[f64], far: f64) -> Result<(f64, f64)> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::InvalidParams("far must be in (0, 1]".into()));
    }
    let n = neg_scores.len();
    let allowed = (far * n as f64).floor() as usize;
    let mut sorted: Vec<f64> = neg_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Find the smallest score whose >=-count fits the budget: the first
    // first-occurrence index i with n - i <= allowed.
    let mut threshold = f64::INFINITY;
    for i in 0..n {
        if i > 0 && sorted[i] == sorted[i - 1] {
            continue;
        }
        if n - i <= allowed {
            threshold = sorted[i];
            break;
        }
    }
    let tar = pos_scores.iter().filter(|&&s| s >= threshold).count() as f64
        / pos_scores.len() as f64;
    Ok((tar, threshold))
}

/// Rank-1 identification accuracy: the fraction of probes whose best cosine
/// match across gallery plus distractor rows is their own gallery entry.
/// Ties resolve to the lower index, gallery rows ordered before distractors.
pub fn rank1_id(probes: &EmbeddingMatrix, gallery: &EmbeddingMatrix, distractors: &Matrix) -> Result<f64> {
    if probes.dim() != gallery.dim()
        || (distractors.rows() > 0 && distractors.cols() != probes.dim())
    {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", probes.dim()),
            actual: format!("gallery {} / distractors {}", gallery.dim(), distractors.cols()),
        });
    }
    // one gallery entry per probe identity
    let mut entry: Vec<Option<usize>> = vec![None; gallery.num_identities.max(probes.num_identities)];
    for (g, &y) in gallery.labels.iter().enumerate() {
        if entry[y as usize].is_some() {
            return Err(Error::InvalidParams(format!(
                "duplicate gallery entry for identity {y}"
            )));
        }
        entry[y as usize] = Some(g);
    }
    let n_gallery = gallery.len();
    let mut correct = 0usize;
    for i in 0..probes.len() {
        let y = probes.labels[i];
        let own = entry
            .get(y as usize)
            .copied()
            .flatten()
            .ok_or(Error::MissingGalleryEntry { identity: y })?;
        let p = probes.features.row(i);
        let mut best_idx = 0usize;
        let mut best = f64::NEG_INFINITY;
        for g in 0..n_gallery {
            let s = vec_math::cosine(p, gallery.features.row(g))?;
            if s > best {
                best = s;
                best_idx = g;
            }
        }
        for d in 0..distractors.rows() {
            let s = vec_math::cosine(p, distractors.row(d))?;
            if s > best {
                best = s;
                best_idx = n_gallery + d;
            }
        }
        if best_idx == own {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Histogram of student-vs-teacher relation differences over a probe batch:
/// for each probe and each of its informative negatives, add
/// `cos(student_emb, g) - cos(teacher_emb, g)`. Range [-0.5, 0.5].
pub fn smr_tmr_histogram(
    student: &MlpModel,
    probe_inputs: &Matrix,
    probe_labels: &[u32],
    probe_teacher_features: &Matrix,
    bank: &FeatureBank,
    sets: &InformativeSets,
    bins: usize,
) -> Result<Histogram> {
    assert_eq!(probe_labels.len(), probe_inputs.rows());
    if probe_teacher_features.rows() != probe_inputs.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} teacher rows", probe_inputs.rows()),
            actual: format!("{}", probe_teacher_features.rows()),
        });
    }
    let (student_emb, _) = mlp_forward(student, probe_inputs)?;
    let mut hist = Histogram::new(-0.5, 0.5, bins);
    for i in 0..probe_inputs.rows() {
        let negatives = gather_negatives(bank, sets, probe_labels[i])?;
        let s = student_emb.row(i);
        let t = probe_teacher_features.row(i);
        for k in 0..negatives.rows() {
            let g = negatives.row(k);
            let smr = vec_math::cosine(s, g)?;
            let tmr = vec_math::cosine(t, g)?;
            hist.add(smr - tmr);
        }
    }
    Ok(hist)
}

/// Cosine score per pair, split by pair kind.
pub fn similarity_distributions(e: &EmbeddingMatrix, pairs: &PairSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let score = |&(a, b): &(u32, u32)| -> Result<f64> {
        let l = e.len();
        if a as usize >= l || b as usize >= l {
            return Err(Error::IndexOutOfRange {
                index: a.max(b) as usize,
                len: l,
            });
        }
        vec_math::cosine(e.features.row(a as usize), e.features.row(b as usize))
    };
    let pos = pairs.positives.iter().map(score).collect::<Result<Vec<_>>>()?;
    let neg = pairs.negatives.iter().map(score).collect::<Result<Vec<_>>>()?;
    Ok((pos, neg))
}

/// Two-column CSV `kind,score` with one row per pair score.
pub fn write_scores_csv(path: &Path, pos: &[f64], neg: &[f64]) -> Result<()> {
    let mut out = String::from("kind,score\n");
    for s in pos {
        writeln!(out, "pos,{s}").expect("string write");
    }
    for s in neg {
        writeln!(out, "neg,{s}").expect("string write");
    }
    binio::atomic_write(path, out.as_bytes())
}

/// One metrics row: `metric,operating_point,value,n_pos,n_neg`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub operating_point: String,
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("metric,operating_point,value,n_pos,n_neg\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.metric, r.operating_point, r.value, r.n_pos, r.n_neg
        )
        .expect("string write");
    }
    binio::atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::gen_synthetic;
    use crate::mining::{bank_init, random_informative_sets};
    use crate::model::{mlp_init, MlpSpec};

    fn embeddings(rows: &[&[f64]], labels: &[u32], m: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Matrix::from_rows(rows), labels.to_vec(), m).unwrap()
    }

    #[test]
    fn make_pairs_respects_kinds_and_counts() {
        let e = embeddings(
            &[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0], &[0.1, 0.9], &[1.0, 1.0]],
            &[0, 0, 1, 1, 2],
            3,
        );
        let p = make_pairs(&e, 2, 0, 7).unwrap();
        assert_eq!(p.positives.len(), 2);
        assert!(p.negatives.is_empty());
        for &(a, b) in &p.positives {
            assert_eq!(e.labels[a as usize], e.labels[b as usize]);
        }
        let p = make_pairs(&e, 1, 5, 7).unwrap();
        assert_eq!(p.negatives.len(), 5);
        for &(a, b) in &p.negatives {
            assert_ne!(e.labels[a as usize], e.labels[b as usize]);
            assert!(a < b);
        }
        // no duplicates
        let mut set: HashSet<(u32, u32)> = HashSet::new();
        assert!(p.negatives.iter().all(|&x| set.insert(x)));
        // determinism
        assert_eq!(make_pairs(&e, 1, 5, 7).unwrap(), p);
        assert_ne!(make_pairs(&e, 1, 5, 8).unwrap(), p);
    }

    #[test]
    fn make_pairs_insufficient() {
        let e = embeddings(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], 2);
        assert!(matches!(
            make_pairs(&e, 1, 0, 0),
            Err(Error::InsufficientPairs { kind: "positive", .. })
        ));
        assert!(matches!(
            make_pairs(&e, 0, 2, 0),
            Err(Error::InsufficientPairs { kind: "negative", .. })
        ));
    }

    #[test]
    fn tar_at_far_separated_and_identical() {
        let (tar, _) = tar_at_far(&[0.9, 0.8], &[0.1, 0.2], 0.5).unwrap();
        assert_eq!(tar, 1.0);
        let scores = [0.3, 0.7];
        let (tar, t) = tar_at_far(&scores, &scores, 0.5).unwrap();
        assert_eq!(tar, 0.5);
        assert_eq!(t, 0.7);
    }

    #[test]
    fn tar_at_far_errors() {
        assert!(matches!(tar_at_far(&[], &[0.1], 0.5), Err(Error::EmptyScores)));
        assert!(matches!(
            tar_at_far(&[0.1], &[0.1], 0.0),
            Err(Error::InvalidParams(_))
        ));
    }

    /// Brute-force sweep: every candidate threshold, recounted from scratch.
    fn tar_oracle(pos: &[f64], neg: &[f64], far: f64) -> (f64, f64) {
        let mut candidates: Vec<f64> = neg.to_vec();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut threshold = f64::INFINITY;
        for &t in &candidates {
            let fa = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            if fa <= far {
                threshold = t;
                break;
            }
        }
        let tar = pos.iter().filter(|&&s| s >= threshold).count() as f64 / pos.len() as f64;
        (tar, threshold)
    }

    #[test]
    fn tar_at_far_matches_sweep_oracle() {
        let mut rng = vec_math::seeded_rng(30);
        for case in 0..100 {
            let n = 1000;
            let quantize = case % 2 == 0;
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                if quantize {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            };
            let pos: Vec<f64> = (0..n).map(|_| gen(&mut rng)).collect();
            let neg: Vec<f64> = (0..n).map(|_| gen(&mut rng)).collect();
            for far in [0.01, 0.1, 0.5, 1.0] {
                let (tar, t) = tar_at_far(&pos, &neg, far).unwrap();
                let (otar, ot) = tar_oracle(&pos, &neg, far);
                assert_eq!(tar, otar, "far {far} case {case}");
                assert_eq!(t, ot, "far {far} case {case}");
            }
        }
    }

    #[test]
    fn tar_monotone_in_far() {
        let mut rng = vec_math::seeded_rng(31);
        for _ in 0..50 {
            let pos: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
            let neg: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
            let mut prev = -1.0;
            for far in [0.005, 0.01, 0.05, 0.1, 0.3, 0.7, 1.0] {
                let (tar, _) = tar_at_far(&pos, &neg, far).unwrap();
                assert!(tar >= prev, "tar not monotone at far {far}");
                prev = tar;
            }
        }
    }

    #[test]
    fn rank1_self_match_and_missing_gallery() {
        let g = embeddings(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], 2);
        let none = Matrix::zeros(0, 2);
        assert_eq!(rank1_id(&g, &g, &none).unwrap(), 1.0);
        let probes = embeddings(&[&[1.0, 0.0]], &[2], 3);
        assert!(matches!(
            rank1_id(&probes, &g, &none),
            Err(Error::MissingGalleryEntry { identity: 2 })
        ));
    }

    #[test]
    fn rank1_tie_prefers_gallery_entry() {
        let g = embeddings(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], 2);
        let probes = embeddings(&[&[1.0, 0.0]], &[0], 2);
        // distractor identical to the probe: gallery index 0 wins the tie
        let distract = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert_eq!(rank1_id(&probes, &g, &distract).unwrap(), 1.0);
        // but an identical GALLERY row of another identity at lower index wins
        let g2 = embeddings(&[&[1.0, 0.0], &[1.0, 0.0]], &[1, 0], 2);
        let probes2 = embeddings(&[&[1.0, 0.0]], &[0], 2);
        assert_eq!(rank1_id(&probes2, &g2, &Matrix::zeros(0, 2)).unwrap(), 0.0);
    }

    #[test]
    fn rank1_matches_exhaustive_oracle() {
        let mut rng = vec_math::seeded_rng(33);
        let d = 8;
        let n_probe = 50;
        let gen_row = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0 + 0.01).collect()
        };
        let gallery_rows: Vec<Vec<f64>> = (0..n_probe).map(|_| gen_row(&mut rng)).collect();
        let gallery = EmbeddingMatrix::new(
            Matrix::from_rows(&gallery_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>()),
            (0..n_probe as u32).collect(),
            n_probe,
        )
        .unwrap();
        let probe_rows: Vec<Vec<f64>> = (0..n_probe)
            .map(|i| {
                gallery_rows[i]
                    .iter()
                    .map(|v| v + 0.3 * (rng.random::<f64>() - 0.5))
                    .collect()
            })
            .collect();
        let probes = EmbeddingMatrix::new(
            Matrix::from_rows(&probe_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>()),
            (0..n_probe as u32).collect(),
            n_probe,
        )
        .unwrap();
        let distractors = Matrix::from_vec(
            500,
            d,
            (0..500 * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let acc = rank1_id(&probes, &gallery, &distractors).unwrap();
        // oracle: full scan with explicit argmax
        let mut correct = 0;
        for i in 0..n_probe {
            let mut scores: Vec<f64> = Vec::new();
            for grow in &gallery_rows {
                scores.push(vec_math::cosine(&probe_rows[i], grow).unwrap());
            }
            for dr in 0..500 {
                scores.push(vec_math::cosine(&probe_rows[i], distractors.row(dr)).unwrap());
            }
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = j;
                }
            }
            if best == i {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / n_probe as f64);
    }

    #[test]
    fn histogram_counts_and_clamping() {
        let mut h = Histogram::new(-0.5, 0.5, 10);
        h.add(0.0);
        h.add(-0.9); // clamps to first bin
        h.add(0.9); // clamps to last bin
        h.add(0.49999);
        assert_eq!(h.total(), 4);
        assert_eq!(h.counts()[0], 1);
        assert_eq!(h.counts()[9], 2);
        assert_eq!(h.counts()[5], 1);
        assert_eq!(h.edges().len(), 11);
    }

    #[test]
    fn smr_histogram_identical_models_is_all_zero_bin() {
        let ds = gen_synthetic(6, 4, 8, 0.1, 3).unwrap();
        let spec = MlpSpec::new(8, vec![], 4);
        let model = mlp_init(&spec, 9).unwrap();
        let (feats, _) = mlp_forward(&model, &ds.inputs).unwrap();
        let teacher_features =
            EmbeddingMatrix::new(feats.clone(), ds.labels.clone(), ds.num_identities).unwrap();
        let bank = bank_init(&teacher_features, 0).unwrap();
        let sets = random_informative_sets(6, 3, 1).unwrap();
        let hist = smr_tmr_histogram(
            &model,
            &ds.inputs,
            &ds.labels,
            &feats,
            &bank,
            &sets,
            10,
        )
        .unwrap();
        // student == teacher -> all differences are exactly 0, middle bin
        assert_eq!(hist.total(), (ds.len() * 3) as u64);
        let zero_bin = hist
            .edges()
            .windows(2)
            .position(|w| w[0] <= 0.0 && 0.0 < w[1])
            .unwrap();
        assert_eq!(hist.counts()[zero_bin], hist.total());
    }

    #[test]
    fn smr_histogram_matches_double_loop_oracle() {
        let ds = gen_synthetic(5, 3, 6, 0.2, 8).unwrap();
        let spec = MlpSpec::new(6, vec![], 3);
        let teacher = mlp_init(&spec, 1).unwrap();
        let student = mlp_init(&spec, 2).unwrap();
        let (tfeats, _) = mlp_forward(&teacher, &ds.inputs).unwrap();
        let teacher_features =
            EmbeddingMatrix::new(tfeats.clone(), ds.labels.clone(), ds.num_identities).unwrap();
        let bank = bank_init(&teacher_features, 0).unwrap();
        let sets = random_informative_sets(5, 2, 1).unwrap();
        let hist =
            smr_tmr_histogram(&student, &ds.inputs, &ds.labels, &tfeats, &bank, &sets, 20).unwrap();

        let mut oracle = Histogram::new(-0.5, 0.5, 20);
        let (semb, _) = mlp_forward(&student, &ds.inputs).unwrap();
        for i in 0..ds.len() {
            for &id in sets.row(ds.labels[i] as usize) {
                let g = bank.row(id as usize);
                let smr = vec_math::cosine(semb.row(i), g).unwrap();
                let tmr = vec_math::cosine(tfeats.row(i), g).unwrap();
                oracle.add(smr - tmr);
            }
        }
        assert_eq!(hist, oracle);
    }

    #[test]
    fn similarity_scores_match_direct_cosine() {
        let e = embeddings(
            &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.5]],
            &[0, 0, 1, 1],
            2,
        );
        let pairs = PairSet {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2), (1, 3)],
        };
        let (pos, neg) = similarity_distributions(&e, &pairs).unwrap();
        assert_eq!(pos, vec![1.0]);
        assert!(neg.iter().all(|s| s.abs() <= 1.0));
        for (i, &(a, b)) in pairs.negatives.iter().enumerate() {
            let direct =
                vec_math::cosine(e.features.row(a as usize), e.features.row(b as usize)).unwrap();
            assert_eq!(neg[i], direct);
        }
        let bad = PairSet {
            positives: vec![(0, 9)],
            negatives: vec![],
        };
        assert!(matches!(
            similarity_distributions(&e, &bad),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn csv_writers_emit_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("metrics.csv");
        write_metrics_csv(
            &mpath,
            &[MetricRow {
                metric: "tar_at_far".into(),
                operating_point: "0.01".into(),
                value: 0.5,
                n_pos: 10,
                n_neg: 20,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&mpath).unwrap();
        assert_eq!(
            text,
            "metric,operating_point,value,n_pos,n_neg\ntar_at_far,0.01,0.5,10,20\n"
        );

        let spath = dir.path().join("scores.csv");
        write_scores_csv(&spath, &[1.0], &[0.25]).unwrap();
        let text = std::fs::read_to_string(&spath).unwrap();
        assert_eq!(text, "kind,score\npos,1\nneg,0.25\n");

        let hpath = dir.path().join("hist.csv");
        let mut h = Histogram::new(0.0, 1.0, 2);
        h.add(0.25);
        h.write_csv(&hpath).unwrap();
        let text = std::fs::read_to_string(&hpath).unwrap();
        assert_eq!(text, "bin_lo,bin_hi,count\n0,0.5,1\n0.5,1,0\n");
    }
}
