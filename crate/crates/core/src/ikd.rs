//! Distillation and supervision losses for the student.
//!
//! All losses take row-stochastic `N × C` distributions on a [`Graph`] and
//! average over the `N` rows. Probabilities are clamped to at least
//! [`PROB_FLOOR`] before any logarithm.

use serde::{Deserialize, Serialize};

use crate::config::SmoothingForm;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a distribution row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `1 − ε` on the true class and `ε / (C − 1)` elsewhere, one row per label.
pub fn smoothed_labels(labels: &[usize], classes: usize, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Parameter(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let off = epsilon / (classes - 1) as f64;
    let rows = labels
        .iter()
        .map(|&y| {
            check_label(y, classes)?;
            Ok((0..classes).map(|j| if j == y { 1.0 - epsilon } else { off }).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Tensor::from_rows(&rows))
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let rows = labels
        .iter()
        .map(|&y| {
            check_label(y, classes)?;
            Ok((0..classes).map(|j| if j == y { 1.0 } else { 0.0 }).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Tensor::from_rows(&rows))
}

fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Checks that every row is a probability vector.
pub fn check_distribution(t: &Tensor, what: &str) -> Result<()> {
    let (_, c) = t.dims2()?;
    for (i, row) in t.data().chunks(c).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!(
                "{what} row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

fn clamped_log(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp_min(p, PROB_FLOOR);
    g.ln(c)
}

/// `−(1/N) Σ_i Σ_j w_ij · x_ij`
fn neg_mean_weighted_sum(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let n = g.value(x).rows() as f64;
    let prod = g.mul(w, x)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0 / n))
}

/// `(1/N) Σ_i KL(p_teacher,i ‖ p_student,i)`.
pub fn cross_kd_loss(g: &mut Graph, p_teacher: Var, p_student: Var) -> Result<Var> {
    let (pt, ps) = (g.value(p_teacher), g.value(p_student));
    if pt.shape() != ps.shape() {
        return Err(Error::Shape {
            op: "cross_kd_loss",
            lhs: pt.shape().to_vec(),
            rhs: ps.shape().to_vec(),
        });
    }
    check_distribution(pt, "teacher distribution")?;
    check_distribution(ps, "student distribution")?;
    let log_t = clamped_log(g, p_teacher)?;
    let log_s = clamped_log(g, p_student)?;
    let ratio = g.sub(log_t, log_s)?;
    let pt_c = g.clamp_min(p_teacher, PROB_FLOOR);
    let kl = neg_mean_weighted_sum(g, pt_c, ratio)?;
    Ok(g.scale(kl, -1.0))
}

/// Cross-entropy of the student distribution against hard labels.
pub fn align_loss(g: &mut Graph, p_student: Var, labels: &[usize]) -> Result<Var> {
    let p = g.value(p_student);
    check_distribution(p, "student distribution")?;
    let (n, c) = p.dims2()?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} predictions", labels.len())));
    }
    let target = g.constant(one_hot(labels, c)?);
    let log_p = clamped_log(g, p_student)?;
    neg_mean_weighted_sum(g, target, log_p)
}

/// Label-smoothing loss. [`SmoothingForm::Standard`] is the cross-entropy
/// against smoothed targets `−(1/N) Σ q log p`; [`SmoothingForm::Literal`]
/// swaps the roles, `−(1/N) Σ p log q`.
pub fn label_smooth_loss(
    g: &mut Graph,
    p_student: Var,
    labels: &[usize],
    epsilon: f64,
    form: SmoothingForm,
) -> Result<Var> {
    let p = g.value(p_student);
    check_distribution(p, "student distribution")?;
    let (n, c) = p.dims2()?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} predictions", labels.len())));
    }
    let q = smoothed_labels(labels, c, epsilon)?;
    match form {
        SmoothingForm::Standard => {
            let q = g.constant(q);
            let log_p = clamped_log(g, p_student)?;
            neg_mean_weighted_sum(g, q, log_p)
        }
        SmoothingForm::Literal => {
            let log_q = q.data().iter().map(|v| v.ln()).collect();
            let log_q = g.constant(Tensor::new(q.shape().to_vec(), log_q)?);
            neg_mean_weighted_sum(g, p_student, log_q)
        }
    }
}

/// The three loss components and their weighted total for one batch or epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cross: f64,
    pub l_align: f64,
    pub l_smooth: f64,
    pub total: f64,
    pub kappa: [f64; 3],
}

fn weighted(kappa: [f64; 3], terms: [f64; 3]) -> f64 {
    kappa[0] * terms[0] + kappa[1] * terms[1] + kappa[2] * terms[2]
}

/// `total = κ1·l_cross + κ2·l_align + κ3·l_smooth`.
pub fn ikd_total(l_cross: f64, l_align: f64, l_smooth: f64, kappa: [f64; 3]) -> LossBreakdown {
    LossBreakdown {
        l_cross,
        l_align,
        l_smooth,
        total: weighted(kappa, [l_cross, l_align, l_smooth]),
        kappa,
    }
}

impl LossBreakdown {
    /// Recomputes the total from the stored components.
    pub fn recombined(&self) -> f64 {
        weighted(self.kappa, [self.l_cross, self.l_align, self.l_smooth])
    }
}

/// Differentiable weighted objective, evaluated in the same order as
/// [`ikd_total`] so both agree bitwise. Terms with zero weight are
/// still included (their contribution is an exact zero).
pub fn ikd_objective(g: &mut Graph, terms: [Var; 3], kappa: [f64; 3]) -> Result<Var> {
    if kappa.iter().any(|&k| !(k >= 0.0)) {
        return Err(Error::Parameter(format!("kappa components must be >= 0, got {kappa:?}")));
    }
    let a = g.scale(terms[0], kappa[0]);
    let b = g.scale(terms[1], kappa[1]);
    let c = g.scale(terms[2], kappa[2]);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
