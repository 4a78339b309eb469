use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::AcquisitionMode;
use crate::consistency::LossWeights;
use crate::SampleId;

/// Bins of every uncertainty histogram, spanning `[0, ln C]`.
pub const HISTOGRAM_BINS: usize = 20;

/// Share of the most uncertain samples averaged into `top5_mean`.
pub const TOP_SHARE: f64 = 0.05;

/// Mean loss terms over the optimizer steps of one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub similarity: f64,
    pub reliability: f64,
    pub task: f64,
    pub total: f64,
    pub first_epoch_total: f64,
    pub last_epoch_total: f64,
}

/// Distribution of predictive entropy over the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub count: usize,
    pub histogram: Vec<u64>,
    pub mean: f64,
    /// Mean of the top 5 % most uncertain samples.
    pub top5_mean: f64,
    /// Share of the pool below `ln(C)/4`.
    pub low_mass: f64,
}

impl UncertaintySummary {
    /// `None` for an empty pool.
    pub fn from_scores(scores: &[f64], classes: usize) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let max = (classes as f64).ln();
        let width = max / HISTOGRAM_BINS as f64;
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        for &s in scores {
            let bin = ((s / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = ((TOP_SHARE * scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let top5_mean = sorted[..k].iter().sum::<f64>() / k as f64;
        let low: u64 = histogram[..HISTOGRAM_BINS / 4].iter().sum();
        Some(Self {
            count: scores.len(),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            top5_mean,
            low_mass: low as f64 / scores.len() as f64,
            histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub labeled_fraction: f64,
    pub test_accuracy: f64,
    pub losses: LossSummary,
    /// Unlabeled-pool entropy before this iteration's training.
    pub uncertainty_before: Option<UncertaintySummary>,
    /// Unlabeled-pool entropy after training; drives acquisition.
    pub uncertainty: Option<UncertaintySummary>,
    /// Ids queried at the end of this iteration.
    pub acquired: Vec<SampleId>,
    /// Queried labels that disagreed with the stored label (simulated oracle only).
    pub noisy_answers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config_hash: String,
    /// Split seed; runs sharing it share a test set.
    pub seed: u64,
    pub mode: AcquisitionMode,
    pub warm_start: bool,
    pub weights: LossWeights,
    pub classes: usize,
    pub universe: usize,
    pub budgets: Vec<f64>,
    pub entries: Vec<IterationMetrics>,
}

impl MetricsLog {
    /// Sample count needed for `budget_percent`, capped at the labelable pool.
    pub fn budget_target(&self, budget_percent: f64, labelable: usize) -> usize {
        let want = ((budget_percent / 100.0 * self.universe as f64) - 1e-9).ceil().max(0.0) as usize;
        want.min(labelable)
    }

    /// Test accuracy at the first iteration whose labeled pool reached the budget.
    pub fn accuracy_at(&self, budget_percent: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.labeled >= self.budget_target(budget_percent, e.labeled + e.unlabeled))
            .map(|e| e.test_accuracy)
    }

    /// Trapezoidal area under accuracy versus labeled fraction, normalized by the span.
    pub fn accuracy_auc(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .entries
            .iter()
            .map(|e| (e.labeled_fraction, e.test_accuracy))
            .collect();
        curve_auc(&pts)
    }

    pub fn write_csv(&self, w: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let header = [
            "iteration",
            "labeled",
            "unlabeled",
            "labeled_fraction",
            "test_accuracy",
            "loss_similarity",
            "loss_reliability",
            "loss_task",
            "loss_total",
            "uncertainty_mean",
            "uncertainty_top5_mean",
            "uncertainty_low_mass",
            "acquired",
        ];
        w.write_record(header)?;
        for e in &self.entries {
            let (mean, top, low) = e
                .uncertainty
                .as_ref()
                .map(|u| (u.mean.to_string(), u.top5_mean.to_string(), u.low_mass.to_string()))
                .unwrap_or_default();
            w.write_record([
                e.iteration.to_string(),
                e.labeled.to_string(),
                e.unlabeled.to_string(),
                e.labeled_fraction.to_string(),
                e.test_accuracy.to_string(),
                e.losses.similarity.to_string(),
                e.losses.reliability.to_string(),
                e.losses.task.to_string(),
                e.losses.total.to_string(),
                mean,
                top,
                low,
                e.acquired.len().to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Normalized trapezoid area of `(x, y)` points sorted by `x`.
pub fn curve_auc(points: &[(f64, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            let area: f64 = points
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            let span = points[points.len() - 1].0 - points[0].0;
            if span > 0.0 {
                area / span
            } else {
                points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_covers_every_score() {
        let ln2 = 2f64.ln();
        let scores = [0.0, 0.01, ln2 / 4.0 - 1e-12, ln2 / 4.0, ln2 * 0.99, ln2, ln2 + 1e-15];
        let u = UncertaintySummary::from_scores(&scores, 2).unwrap();
        assert_eq!(u.histogram.iter().sum::<u64>(), scores.len() as u64);
        assert_eq!(u.histogram[0], 2);
        assert_eq!(u.histogram[19], 3);
        assert!((u.low_mass - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(u.top5_mean, ln2 + 1e-15);
    }

    #[test]
    fn top_share_uses_ceiling() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 200.0).collect();
        let u = UncertaintySummary::from_scores(&scores, 2).unwrap();
        let expected = (95..100).map(|i| i as f64 / 200.0).sum::<f64>() / 5.0;
        assert!((u.top5_mean - expected).abs() < 1e-15);
        assert!(UncertaintySummary::from_scores(&[], 2).is_none());
    }

    #[test]
    fn auc_of_line() {
        assert!((curve_auc(&[(0.1, 0.5), (0.5, 0.7), (0.9, 0.9)]) - 0.7).abs() < 1e-12);
        assert_eq!(curve_auc(&[(0.1, 0.4)]), 0.4);
    }
}
