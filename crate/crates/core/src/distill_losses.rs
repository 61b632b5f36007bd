//! Distillation losses: feature-consistency over normalized embeddings,
//! relation-aware losses against mined negative features, and their
//! weighted combination with the recognition loss.
//!
//! Every loss returns its value plus the gradient with respect to the
//! *student* embeddings only; teacher embeddings and negative features are
//! constants.

use crate::error::{Error, Result};
use crate::model::{arcface_loss, ArcHead};
use crate::vec_math::{self, Matrix};

/// Relation-loss flavor.
///
/// * `Absolute`: mean |SMR - TMR| over all couples.
/// * `ValidOnly`: mean of (SMR - TMR) over couples where the student's
///   relation exceeds the teacher's.
/// * `Margin`: like `ValidOnly` with a slack `q` subtracted, ignoring
///   couples whose difference is below the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RadKind {
    Absolute,
    ValidOnly,
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadVariant {
    pub kind: RadKind,
    /// Margin slack; only used by `Margin`.
    pub q: f64,
}

impl RadVariant {
    pub fn absolute() -> Self {
        Self {
            kind: RadKind::Absolute,
            q: 0.0,
        }
    }

    pub fn valid_only() -> Self {
        Self {
            kind: RadKind::ValidOnly,
            q: 0.0,
        }
    }

    pub fn margin(q: f64) -> Self {
        Self {
            kind: RadKind::Margin,
            q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 0.0 {
            return Err(Error::InvalidParams("margin q must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss value plus gradient with respect to the student embeddings.
/// `valid_count` is the number of couples contributing gradient
/// (0 for the `Absolute` variant, which has no selection step).
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub grad_student: Matrix,
    pub valid_count: usize,
}

impl LossReport {
    fn zero(n: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad_student: Matrix::zeros(n, d),
            valid_count: 0,
        }
    }
}

fn check_same_shape(student: &Matrix, teacher: &Matrix) -> Result<()> {
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {}", student.rows(), student.cols()),
            actual: format!("{} x {}", teacher.rows(), teacher.cols()),
        });
    }
    Ok(())
}

/// Feature-consistency loss: `(1/2N) * sum_i ||t_i/|t_i| - s_i/|s_i|||^2`.
/// Gradient flows to the student rows only.
pub fn fcd_loss(student: &Matrix, teacher: &Matrix) -> Result<LossReport> {
    check_same_shape(student, teacher)?;
    let n = student.rows();
    let d = student.cols();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let s_hat = vec_math::l2_normalize(student.row(i))?;
        let t_hat = vec_math::l2_normalize(teacher.row(i))?;
        let sq: f64 = s_hat
            .iter()
            .zip(&t_hat)
            .map(|(s, t)| (t - s) * (t - s))
            .sum();
        value += sq;
        // d/ds of 1 - cos(s, t), scaled by 1/N.
        let g = vec_math::cosine_grad_lhs(student.row(i), teacher.row(i))?;
        let gi = grad.row_mut(i);
        for k in 0..d {
            gi[k] = -g[k] / n as f64;
        }
    }
    Ok(LossReport {
        value: value / (2.0 * n as f64),
        grad_student: grad,
        valid_count: 0,
    })
}

/// Relation-aware loss over per-sample negative features.
///
/// `negatives[i]` holds the negative features for sample `i`, one per row
/// (typically K rows; groups may differ in size). SMR/TMR are the cosines of
/// the student/teacher embedding with each negative; the teacher side and
/// the negatives are constants.
pub fn rad_loss(
    variant: &RadVariant,
    student: &Matrix,
    teacher: &Matrix,
    negatives: &[Matrix],
) -> Result<LossReport> {
    variant.validate()?;
    check_same_shape(student, teacher)?;
    let n = student.rows();
    let d = student.cols();
    if negatives.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} negative groups"),
            actual: format!("{}", negatives.len()),
        });
    }
    for g in negatives {
        if g.cols() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("K x {d}"),
                actual: format!("{} x {}", g.rows(), g.cols()),
            });
        }
    }

    let q = match variant.kind {
        RadKind::Margin => variant.q,
        _ => 0.0,
    };
    let total_couples: usize = negatives.iter().map(Matrix::rows).sum();
    if total_couples == 0 {
        return Ok(LossReport::zero(n, d));
    }

    let mut sum = 0.0;
    let mut active = 0usize;
    let mut grad = Matrix::zeros(n, d);
    // First pass decides the per-couple weight structure; for the hinge
    // variants the normalizer is the active count, so accumulate raw first.
    let mut raw_grad = Matrix::zeros(n, d);
    for i in 0..n {
        let s = student.row(i);
        let t = teacher.row(i);
        let group = &negatives[i];
        for k in 0..group.rows() {
            let g_vec = group.row(k);
            let smr = vec_math::cosine(s, g_vec)?;
            let tmr = vec_math::cosine(t, g_vec)?;
            let delta = smr - tmr;
            match variant.kind {
                RadKind::Absolute => {
                    sum += delta.abs();
                    let sign = if delta > 0.0 {
                        1.0
                    } else if delta < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    if sign != 0.0 {
                        let gsm = vec_math::cosine_grad_lhs(s, g_vec)?;
                        let row = raw_grad.row_mut(i);
                        for c in 0..d {
                            row[c] += sign * gsm[c];
                        }
                    }
                }
                RadKind::ValidOnly | RadKind::Margin => {
                    if delta - q > 0.0 {
                        sum += delta - q;
                        active += 1;
                        let gsm = vec_math::cosine_grad_lhs(s, g_vec)?;
                        let row = raw_grad.row_mut(i);
                        for c in 0..d {
                            row[c] += gsm[c];
                        }
                    }
                }
            }
        }
    }

    let (value, norm, valid_count) = match variant.kind {
        RadKind::Absolute => (sum / total_couples as f64, total_couples as f64, 0),
        RadKind::ValidOnly | RadKind::Margin => {
            if active == 0 {
                return Ok(LossReport::zero(n, d));
            }
            (sum / active as f64, active as f64, active)
        }
    };
    for i in 0..n {
        let src = raw_grad.row(i).to_vec();
        let dst = grad.row_mut(i);
        for c in 0..d {
            dst[c] = src[c] / norm;
        }
    }
    Ok(LossReport {
        value,
        grad_student: grad,
        valid_count,
    })
}

/// Relation-aware loss over in-batch student-student couples: for each
/// ordered pair `(i, j)` with different identities, the student relation
/// `cos(s_i, s_j)` is pulled toward the teacher relation `cos(t_i, t_j)`.
/// Gradient flows to both student rows of each couple.
pub fn rad_loss_inbatch(
    variant: &RadVariant,
    student: &Matrix,
    teacher: &Matrix,
    labels: &[u32],
) -> Result<LossReport> {
    variant.validate()?;
    check_same_shape(student, teacher)?;
    let n = student.rows();
    let d = student.cols();
    assert_eq!(labels.len(), n, "labels length != batch size");

    let q = match variant.kind {
        RadKind::Margin => variant.q,
        _ => 0.0,
    };
    let mut couples = 0usize;
    let mut sum = 0.0;
    let mut active = 0usize;
    let mut raw_grad = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            if i == j || labels[i] == labels[j] {
                continue;
            }
            couples += 1;
            let smr = vec_math::cosine(student.row(i), student.row(j))?;
            let tmr = vec_math::cosine(teacher.row(i), teacher.row(j))?;
            let delta = smr - tmr;
            let weight = match variant.kind {
                RadKind::Absolute => {
                    sum += delta.abs();
                    if delta > 0.0 {
                        1.0
                    } else if delta < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                RadKind::ValidOnly | RadKind::Margin => {
                    if delta - q > 0.0 {
                        sum += delta - q;
                        active += 1;
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            if weight != 0.0 {
                let gi = vec_math::cosine_grad_lhs(student.row(i), student.row(j))?;
                let gj = vec_math::cosine_grad_lhs(student.row(j), student.row(i))?;
                let row_i = raw_grad.row_mut(i);
                for c in 0..d {
                    row_i[c] += weight * gi[c];
                }
                let row_j = raw_grad.row_mut(j);
                for c in 0..d {
                    row_j[c] += weight * gj[c];
                }
            }
        }
    }

    let (value, norm, valid_count) = match variant.kind {
        RadKind::Absolute => {
            if couples == 0 {
                return Ok(LossReport::zero(n, d));
            }
            (sum / couples as f64, couples as f64, 0)
        }
        RadKind::ValidOnly | RadKind::Margin => {
            if active == 0 {
                return Ok(LossReport::zero(n, d));
            }
            (sum / active as f64, active as f64, active)
        }
    };
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let src = raw_grad.row(i).to_vec();
        let dst = grad.row_mut(i);
        for c in 0..d {
            dst[c] = src[c] / norm;
        }
    }
    Ok(LossReport {
        value,
        grad_student: grad,
        valid_count,
    })
}

/// Combined objective `L_fcd + alpha * L_rad + beta * L_ce` with the same
/// linear combination of component gradients. Component terms with a zero
/// weight are skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    student: &Matrix,
    teacher: &Matrix,
    negatives: &[Matrix],
    labels: &[u32],
    head: &ArcHead,
    alpha: f64,
    beta: f64,
    variant: &RadVariant,
) -> Result<LossReport> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidParams("alpha and beta must be >= 0".into()));
    }
    let fcd = fcd_loss(student, teacher)?;
    let mut value = fcd.value;
    let mut grad = fcd.grad_student;
    let mut valid_count = 0;
    if alpha != 0.0 {
        let rad = rad_loss(variant, student, teacher, negatives)?;
        value += alpha * rad.value;
        valid_count = rad.valid_count;
        for (g, r) in grad.data_mut().iter_mut().zip(rad.grad_student.data()) {
            *g += alpha * r;
        }
    }
    if beta != 0.0 {
        let (ce, ce_grad, _) = arcface_loss(student, labels, head)?;
        value += beta * ce;
        for (g, c) in grad.data_mut().iter_mut().zip(ce_grad.data()) {
            *g += beta * c;
        }
    }
    Ok(LossReport {
        value,
        grad_student: grad,
        valid_count,
    })
}
