use rand::seq::SliceRandom;

use super::config::TrainingConfig;
use super::metrics::LossSummary;
use crate::consistency::{batch_objective, ObjectiveConfig};
use crate::data::Dataset;
use crate::gradcore::{AdamState, Tape, Tensor};
use crate::model::{ModelParams, Modality};
use crate::pool::{entropy, SamplePool};
use crate::seeding::{self, Stream};
use crate::{ClassLabel, Error, Result, SampleId};

/// Epoch index stride inside the shuffle stream, so every
/// `(iteration, epoch)` pair gets its own permutation.
const EPOCH_STRIDE: u64 = 1_000_000;

/// Runs `cfg.epochs` passes over shuffled mini-batches of the labeled pool.
///
/// A trailing batch with a single sample is dropped because the alignment
/// terms need at least two pairs.
pub fn train_iteration(
    params: &mut ModelParams,
    adam: &mut AdamState,
    dataset: &Dataset,
    pool: &SamplePool,
    objective: &ObjectiveConfig,
    cfg: &TrainingConfig,
    iteration: usize,
) -> Result<LossSummary> {
    let labeled: Vec<(SampleId, ClassLabel)> = pool.labeled().iter().map(|(&i, &l)| (i, l)).collect();
    if labeled.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "labeled pool has {} samples but batch_size is {}; lower training.batch_size",
            labeled.len(),
            cfg.batch_size
        )));
    }
    let mut summary = LossSummary::default();
    for epoch in 0..cfg.epochs {
        let mut order = labeled.clone();
        let index = iteration as u64 * EPOCH_STRIDE + epoch as u64;
        order.shuffle(&mut seeding::rng(cfg.seed, Stream::Shuffle, index));
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let ids: Vec<SampleId> = batch.iter().map(|b| b.0).collect();
            let labels: Vec<ClassLabel> = batch.iter().map(|b| b.1).collect();
            let (terms, grads) = {
                let mut tape = Tape::new();
                let model = params.bind(&mut tape, true);
                let obj = batch_objective(
                    &mut tape,
                    &model,
                    &dataset.eeg_matrix(&ids),
                    &dataset.face_matrix(&ids),
                    &labels,
                    objective,
                    None,
                )?;
                let g = tape.backward(obj.total)?;
                let grads: Vec<Tensor> = model.vars().iter().map(|&v| g.wrt(v)).collect();
                let val = |v| tape.value(v).item().expect("scalar loss");
                (
                    [val(obj.similarity), val(obj.reliability), val(obj.task), val(obj.total)],
                    grads,
                )
            };
            if terms.iter().any(|t| !t.is_finite()) {
                return Err(Error::Invariant(format!(
                    "non-finite loss {terms:?} at iteration {iteration}, epoch {epoch}"
                )));
            }
            adam.step(params.tensors_mut(), &grads)?;
            summary.similarity += terms[0];
            summary.reliability += terms[1];
            summary.task += terms[2];
            summary.total += terms[3];
            summary.steps += 1;
            epoch_total += terms[3];
            epoch_steps += 1;
        }
        let epoch_mean = epoch_total / epoch_steps.max(1) as f64;
        if epoch == 0 {
            summary.first_epoch_total = epoch_mean;
        }
        summary.last_epoch_total = epoch_mean;
    }
    if summary.steps > 0 {
        let n = summary.steps as f64;
        summary.similarity /= n;
        summary.reliability /= n;
        summary.task /= n;
        summary.total /= n;
    }
    Ok(summary)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predicted classes for `ids` using the EEG path only.
pub fn predict(params: &ModelParams, dataset: &Dataset, ids: &[SampleId]) -> Result<Vec<ClassLabel>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let probs = params.predict_proba(&dataset.eeg_matrix(ids))?;
    Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
}

/// Top-1 accuracy over `ids` against the stored labels.
pub fn accuracy(params: &ModelParams, dataset: &Dataset, ids: &[SampleId]) -> Result<f64> {
    let predicted = predict(params, dataset, ids)?;
    let mut correct = 0usize;
    for (&id, &p) in ids.iter().zip(&predicted) {
        let truth = dataset
            .record(id)
            .label
            .ok_or(crate::data::DataError::MissingLabel(id))?;
        correct += usize::from(truth == p);
    }
    Ok(correct as f64 / ids.len().max(1) as f64)
}

/// Per-sample class probabilities and entropy for `ids`.
pub fn score_entropy(params: &ModelParams, dataset: &Dataset, ids: &[SampleId]) -> Result<(Tensor, Vec<f64>)> {
    if ids.is_empty() {
        return Ok((Tensor::zeros(0, params.config().classes), Vec::new()));
    }
    let probs = params.predict_proba(&dataset.eeg_matrix(ids))?;
    let scores = (0..probs.rows())
        .map(|r| entropy(probs.row(r)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((probs, scores))
}

/// EEG reliability estimates for `ids`.
pub fn eeg_reliability(params: &ModelParams, dataset: &Dataset, ids: &[SampleId]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    Ok(params
        .reliability(Modality::Eeg, &dataset.eeg_matrix(ids))?
        .into_data())
}
