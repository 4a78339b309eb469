//! Cross-modal similarity, contrastive alignment, reliability targets and
//! the weighted training objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tape, Tensor, Var, NORM_EPS};
use crate::model::{BoundModel, ModelError, Modality};
use crate::ClassLabel;

/// Floor applied to probabilities inside the task cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Unit-norm tolerance for similarity-matrix inputs (checked in debug builds).
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("{op} needs a batch of at least 2, got {n}")]
    BatchTooSmall { op: &'static str, n: usize },
    #[error("{op}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("row {row} of the {side} embedding has norm {norm}, expected unit length")]
    NotNormalized {
        side: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: ClassLabel, classes: usize },
    #[error("{0} labels for a batch of {1}")]
    LabelCount(usize, usize),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights of the similarity, reliability and task terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub similarity: f64,
    pub reliability: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            similarity: 1.0,
            reliability: 1.0,
            task: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(similarity: f64, reliability: f64, task: f64) -> Self {
        Self {
            similarity,
            reliability,
            task,
        }
    }

    pub fn validate(&self) -> Result<(), ConsistencyError> {
        let all = [self.similarity, self.reliability, self.task];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConsistencyError::Weights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ConsistencyError::Weights("all weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Softmax temperature of the contrastive loss; 1.0 applies CE to raw cosines.
    pub temperature: f64,
    /// Guard in the min-max normalization of reliability scores.
    pub reliability_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: 0.07,
            reliability_eps: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ConsistencyError> {
        self.weights.validate()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ConsistencyError::Temperature(self.temperature));
        }
        if !(self.reliability_eps.is_finite() && self.reliability_eps > 0.0) {
            return Err(ConsistencyError::Weights(format!(
                "reliability_eps must be positive, got {}",
                self.reliability_eps
            )));
        }
        Ok(())
    }
}

/// Raw off-diagonal means, their min-max normalization and the targets `1 - h̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityVector {
    pub h: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub r_star: Vec<f64>,
}

/// Rows must have unit norm, or be zero: normalizing an all-zero embedding
/// (every unit of a layer inactive) yields a zero row.
fn check_unit_rows(t: &Tensor, side: &'static str) -> Result<(), ConsistencyError> {
    for row in 0..t.rows() {
        let norm = t.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL && norm > UNIT_NORM_TOL {
            return Err(ConsistencyError::NotNormalized { side, row, norm });
        }
    }
    Ok(())
}

/// `S = ẑ_eeg · ẑ_faceᵀ` for row-normalized embeddings.
pub fn similarity_matrix(tape: &mut Tape, eeg: Var, face: Var) -> Result<Var, ConsistencyError> {
    let (a, b) = (tape.value(eeg), tape.value(face));
    if a.shape() != b.shape() {
        return Err(ConsistencyError::ShapeMismatch {
            op: "similarity_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if cfg!(debug_assertions) {
        check_unit_rows(a, "eeg")?;
        check_unit_rows(b, "face")?;
    }
    let face_t = tape.transpose(face);
    Ok(tape.matmul(eeg, face_t)?)
}

fn diagonal_cross_entropy(tape: &mut Tape, logits: Var, eye: Var) -> Result<Var, ConsistencyError> {
    let n = tape.value(logits).rows();
    let log_probs = tape.row_log_softmax(logits);
    let picked = tape.mul(log_probs, eye)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Symmetric contrastive loss: the matched pair for row `i` is column `i`,
/// averaged over rows of `S / temperature` and of its transpose.
pub fn similarity_loss(tape: &mut Tape, s: Var, temperature: f64) -> Result<Var, ConsistencyError> {
    let (n, m) = tape.value(s).shape();
    if n != m {
        return Err(ConsistencyError::ShapeMismatch {
            op: "similarity_loss",
            left: (n, m),
            right: (n, n),
        });
    }
    if n < 2 {
        return Err(ConsistencyError::BatchTooSmall {
            op: "similarity_loss",
            n,
        });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(ConsistencyError::Temperature(temperature));
    }
    let eye = tape.constant(Tensor::identity(n));
    let logits = tape.scale(s, 1.0 / temperature);
    let rows = diagonal_cross_entropy(tape, logits, eye)?;
    let logits_t = tape.transpose(logits);
    let cols = diagonal_cross_entropy(tape, logits_t, eye)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5))
}

/// Reliability targets from a similarity matrix. Values only: the caller
/// feeds `r_star` back as a constant so no gradient reaches `S` through it.
pub fn reliability_targets(s: &Tensor, eps: f64) -> Result<ReliabilityVector, ConsistencyError> {
    let (n, m) = s.shape();
    if n != m {
        return Err(ConsistencyError::ShapeMismatch {
            op: "reliability_targets",
            left: (n, m),
            right: (n, n),
        });
    }
    if n < 2 {
        return Err(ConsistencyError::BatchTooSmall {
            op: "reliability_targets",
            n,
        });
    }
    let h: Vec<f64> = (0..n)
        .map(|i| {
            let off_diag: f64 = s
                .row(i)
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v)
                .sum();
            off_diag / (n - 1) as f64
        })
        .collect();
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = hi - lo + eps;
    let h_tilde: Vec<f64> = h.iter().map(|v| (v - lo) / denom).collect();
    let r_star = h_tilde.iter().map(|v| 1.0 - v).collect();
    Ok(ReliabilityVector { h, h_tilde, r_star })
}

/// `½(‖r_eeg − r*‖² + ‖r_face − r*‖²) / N`.
pub fn reliability_loss(
    tape: &mut Tape,
    r_eeg: Var,
    r_face: Var,
    r_star: Var,
) -> Result<Var, ConsistencyError> {
    let shapes = [r_eeg, r_face, r_star].map(|v| tape.value(v).shape());
    if shapes[0] != shapes[2] || shapes[1] != shapes[2] {
        let bad = if shapes[0] != shapes[2] { shapes[0] } else { shapes[1] };
        return Err(ConsistencyError::ShapeMismatch {
            op: "reliability_loss",
            left: bad,
            right: shapes[2],
        });
    }
    let n = tape.value(r_star).len().max(1);
    let de = tape.squared_diff(r_eeg, r_star)?;
    let df = tape.squared_diff(r_face, r_star)?;
    let se = tape.sum(de);
    let sf = tape.sum(df);
    let both = tape.add(se, sf)?;
    Ok(tape.scale(both, 0.5 / n as f64))
}

/// Mean cross-entropy of class probabilities against integer labels.
pub fn task_loss(tape: &mut Tape, probs: Var, labels: &[ClassLabel]) -> Result<Var, ConsistencyError> {
    let (n, classes) = tape.value(probs).shape();
    if labels.len() != n {
        return Err(ConsistencyError::LabelCount(labels.len(), n));
    }
    let mut one_hot = Tensor::zeros(n, classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ConsistencyError::LabelOutOfRange { label, classes });
        }
        one_hot.set(i, label, 1.0);
    }
    let mask = tape.constant(one_hot);
    let log_p = tape.log(probs, PROB_FLOOR);
    let picked = tape.mul(log_p, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

pub fn total_loss(tape: &mut Tape, sim: Var, rel: Var, task: Var, weights: &LossWeights) -> Result<Var, ConsistencyError> {
    let a = tape.scale(sim, weights.similarity);
    let b = tape.scale(rel, weights.reliability);
    let c = tape.scale(task, weights.task);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Handles to every term of the objective for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub similarity: Var,
    pub reliability: Var,
    pub task: Var,
    pub total: Var,
    pub targets: ReliabilityVector,
}

/// Records the full objective for a batch of paired samples.
///
/// `fixed_targets` replaces the reliability targets computed from this
/// batch; finite-difference checks use it to hold the targets constant.
pub fn batch_objective(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    x_eeg: &Tensor,
    x_face: &Tensor,
    labels: &[ClassLabel],
    cfg: &ObjectiveConfig,
    fixed_targets: Option<&[f64]>,
) -> Result<BatchObjective, ConsistencyError> {
    let xe = tape.constant(x_eeg.clone());
    let xf = tape.constant(x_face.clone());
    let z_eeg = model.encode(tape, Modality::Eeg, xe)?;
    let z_face = model.encode(tape, Modality::Face, xf)?;

    let zn_eeg = tape.row_l2_normalize(z_eeg, NORM_EPS);
    let zn_face = tape.row_l2_normalize(z_face, NORM_EPS);
    let s = similarity_matrix(tape, zn_eeg, zn_face)?;
    let similarity = similarity_loss(tape, s, cfg.temperature)?;

    let mut targets = reliability_targets(tape.value(s), cfg.reliability_eps)?;
    if let Some(fixed) = fixed_targets {
        if fixed.len() != targets.r_star.len() {
            return Err(ConsistencyError::LabelCount(fixed.len(), targets.r_star.len()));
        }
        targets.r_star = fixed.to_vec();
    }
    let r_star = tape.constant(Tensor::column(targets.r_star.clone()));
    let r_eeg = model.estimate_reliability(tape, Modality::Eeg, z_eeg)?;
    let r_face = model.estimate_reliability(tape, Modality::Face, z_face)?;
    let reliability = reliability_loss(tape, r_eeg, r_face, r_star)?;

    let probs = model.predict(tape, z_eeg)?;
    let task = task_loss(tape, probs, labels)?;
    let total = total_loss(tape, similarity, reliability, task, &cfg.weights)?;

    Ok(BatchObjective {
        similarity,
        reliability,
        task,
        total,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn sim_loss_of(s: &Tensor, temperature: f64) -> f64 {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let l = similarity_loss(&mut tape, sv, temperature).unwrap();
        value(&tape, l)
    }

    #[test]
    fn identical_embeddings_have_unit_diagonal() {
        let z = Tensor::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let b = tape.constant(z);
        let s = similarity_matrix(&mut tape, a, b).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(tape.value(s).get(i, i), 1.0, epsilon = 1e-15);
        }
        assert_eq!(tape.value(s).get(1, 2), 0.0);
    }

    #[test]
    fn unnormalized_rows_are_rejected_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        assert!(matches!(
            similarity_matrix(&mut tape, a, b),
            Err(ConsistencyError::NotNormalized { side: "eeg", .. })
        ));
        let zero = tape.constant(Tensor::zeros(1, 2));
        assert!(similarity_matrix(&mut tape, zero, b).is_ok());
    }

    #[test]
    fn identity_similarity_two_by_two() {
        let l = sim_loss_of(&Tensor::identity(2), 1.0);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.313_261_687_518_222_8, epsilon = 1e-12);
    }

    #[test]
    fn constant_similarity_gives_log_n() {
        for n in [2usize, 3, 7] {
            let l = sim_loss_of(&Tensor::filled(n, n, 0.37), 0.5);
            assert_abs_diff_eq!(l, (n as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn saturated_diagonal_has_vanishing_loss() {
        let mut s = Tensor::zeros(4, 4);
        for i in 0..4 {
            s.set(i, i, 50.0);
        }
        assert!(sim_loss_of(&s, 1.0) < 1e-9);
    }

    #[test]
    fn single_sample_batches_are_rejected() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::identity(1));
        assert!(matches!(
            similarity_loss(&mut tape, s, 1.0),
            Err(ConsistencyError::BatchTooSmall { n: 1, .. })
        ));
        assert!(reliability_targets(&Tensor::identity(1), 1e-8).is_err());
    }

    #[test]
    fn off_diagonal_mean() {
        let s = Tensor::from_rows(&[[1.0, 0.2, 0.4], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let r = reliability_targets(&s, 1e-8).unwrap();
        assert_abs_diff_eq!(r.h[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn min_max_hand_case() {
        // Rows built so that h = [0.3, 0.5, 0.1].
        let s = Tensor::from_rows(&[[0.0, 0.3, 0.3], [0.5, 0.0, 0.5], [0.1, 0.1, 0.0]]).unwrap();
        let r = reliability_targets(&s, 1e-15).unwrap();
        for (got, want) in r.h.iter().zip([0.3, 0.5, 0.1]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in r.h_tilde.iter().zip([0.5, 1.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in r.r_star.iter().zip([0.5, 0.0, 1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_range_is_fully_reliable() {
        let r = reliability_targets(&Tensor::filled(4, 4, 0.25), 1e-8).unwrap();
        assert!(r.h_tilde.iter().all(|&v| v == 0.0));
        assert!(r.r_star.iter().all(|&v| v == 1.0));
    }

    fn rel_loss(r_eeg: &[f64], r_face: &[f64], r_star: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::column(r_eeg.to_vec()));
        let b = tape.constant(Tensor::column(r_face.to_vec()));
        let c = tape.constant(Tensor::column(r_star.to_vec()));
        let l = reliability_loss(&mut tape, a, b, c).unwrap();
        value(&tape, l)
    }

    #[test]
    fn reliability_loss_cases() {
        assert_eq!(rel_loss(&[0.2, 0.7], &[0.2, 0.7], &[0.2, 0.7]), 0.0);
        assert_abs_diff_eq!(rel_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]), 0.5, epsilon = 1e-15);
        let small = rel_loss(&[0.6, 0.5], &[0.5, 0.5], &[0.5, 0.5]);
        let large = rel_loss(&[0.7, 0.5], &[0.5, 0.5], &[0.5, 0.5]);
        assert_abs_diff_eq!(large, 4.0 * small, epsilon = 1e-15);
        // Per-sample normalization: the literal squared norm is N times larger.
        let literal = 0.5 * (1.0 + 1.0);
        assert_abs_diff_eq!(rel_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]) * 2.0, literal, epsilon = 1e-15);
    }

    #[test]
    fn reliability_loss_length_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::column(vec![0.1, 0.2]));
        let b = tape.constant(Tensor::column(vec![0.1]));
        let c = tape.constant(Tensor::column(vec![0.1, 0.2]));
        assert!(reliability_loss(&mut tape, a, b, c).is_err());
    }

    fn task_of(rows: &[[f64; 2]], labels: &[usize]) -> Result<f64, ConsistencyError> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(rows).unwrap());
        let l = task_loss(&mut tape, p, labels)?;
        Ok(value(&tape, l))
    }

    #[test]
    fn task_loss_cases() {
        assert_eq!(task_of(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1]).unwrap(), 0.0);
        assert_abs_diff_eq!(task_of(&[[0.5, 0.5]], &[1]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(task_of(&[[0.9, 0.1]], &[0]).unwrap(), 0.105_360_515_657_826_3, epsilon = 1e-12);
        // Floor keeps a confidently wrong prediction finite.
        assert_abs_diff_eq!(task_of(&[[1.0, 0.0]], &[1]).unwrap(), -PROB_FLOOR.ln(), epsilon = 1e-9);
        assert!(matches!(
            task_of(&[[0.5, 0.5]], &[2]),
            Err(ConsistencyError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.3));
        let b = tape.constant(Tensor::scalar(0.1));
        let c = tape.constant(Tensor::scalar(0.6));
        let t = total_loss(&mut tape, a, b, c, &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(value(&tape, t), 1.0, epsilon = 1e-15);
        let t = total_loss(&mut tape, a, b, c, &LossWeights::new(0.0, 0.0, 2.5)).unwrap();
        assert_eq!(value(&tape, t), 2.5 * 0.6);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).validate().is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).validate().is_ok());
    }
}
