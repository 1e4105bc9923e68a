//! Per-hospital drift test deciding whether a client retrains on a new
//! increment.
//!
//! Two signals are available: a drop in the local model's accuracy on the
//! new increment relative to the accuracy recorded after its last training,
//! and a per-dimension z statistic of the increment's feature means against
//! running means of everything the client has absorbed so far.

use serde::{Deserialize, Serialize};

use crate::dataio::{to_matrix, Sample};
use crate::error::{Error, Result};
use crate::nnkernel::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    Accuracy,
    FeatureShift,
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftReason {
    AccuracyDrop,
    FeatureShift,
    FirstIncrement,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSettings {
    pub accuracy_drop_threshold: f64,
    pub mean_shift_z_threshold: f64,
    pub mode: DriftMode,
}

impl Default for DriftSettings {
    fn default() -> Self {
        DriftSettings {
            accuracy_drop_threshold: 0.05,
            mean_shift_z_threshold: 3.0,
            mode: DriftMode::Accuracy,
        }
    }
}

impl DriftSettings {
    pub fn validate(&self) -> Result<()> {
        let d = self.accuracy_drop_threshold;
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "accuracy drop threshold {d} must lie in (0, 1)"
            )));
        }
        if !(self.mean_shift_z_threshold > 0.0 && self.mean_shift_z_threshold.is_finite()) {
            return Err(Error::InvalidArgument(
                "mean shift z threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftVerdict {
    pub drifted: bool,
    pub observed_accuracy: f64,
    pub baseline: Option<f64>,
    pub z_stat: Option<f64>,
    pub reason: DriftReason,
}

impl DriftVerdict {
    /// Verdict for an increment that delivered no samples.
    pub fn no_data(baseline: Option<f64>) -> Self {
        DriftVerdict {
            drifted: false,
            observed_accuracy: 0.0,
            baseline,
            z_stat: None,
            reason: DriftReason::None,
        }
    }
}

/// Welford accumulators per feature dimension.
#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    fn absorb(&mut self, features: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(features) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftDetector {
    settings: DriftSettings,
    baseline: Option<f64>,
    stats: Option<RunningStats>,
}

const VARIANCE_FLOOR: f64 = 1e-12;

impl DriftDetector {
    pub fn new(settings: DriftSettings) -> Result<Self> {
        settings.validate()?;
        Ok(DriftDetector {
            settings,
            baseline: None,
            stats: None,
        })
    }

    pub fn settings(&self) -> &DriftSettings {
        &self.settings
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn assess(&self, model: &Mlp, increment: &[Sample]) -> Result<DriftVerdict> {
        if increment.is_empty() {
            return Err(Error::Empty("increment"));
        }
        let (x, y) = to_matrix(increment);
        let preds = model.predict(x.view())?;
        let correct = preds.iter().zip(&y).filter(|(p, t)| p == t).count();
        let observed = correct as f64 / y.len() as f64;
        let z_stat = self.z_statistic(increment);

        let Some(baseline) = self.baseline else {
            return Ok(DriftVerdict {
                drifted: true,
                observed_accuracy: observed,
                baseline: None,
                z_stat,
                reason: DriftReason::FirstIncrement,
            });
        };
        let accuracy_drop = baseline - observed > self.settings.accuracy_drop_threshold;
        let feature_shift = z_stat.is_some_and(|z| z > self.settings.mean_shift_z_threshold);
        let reason = match self.settings.mode {
            DriftMode::Accuracy if accuracy_drop => DriftReason::AccuracyDrop,
            DriftMode::FeatureShift if feature_shift => DriftReason::FeatureShift,
            DriftMode::Either if accuracy_drop => DriftReason::AccuracyDrop,
            DriftMode::Either if feature_shift => DriftReason::FeatureShift,
            _ => DriftReason::None,
        };
        Ok(DriftVerdict {
            drifted: reason != DriftReason::None,
            observed_accuracy: observed,
            baseline: Some(baseline),
            z_stat,
            reason,
        })
    }

    /// Largest per-dimension |z| of the increment's mean against the
    /// running mean, or `None` before two samples have been absorbed.
    fn z_statistic(&self, increment: &[Sample]) -> Option<f64> {
        let stats = self.stats.as_ref().filter(|s| s.count >= 2)?;
        let n = increment.len() as f64;
        let dim = stats.mean.len();
        let mut z_max: f64 = 0.0;
        for j in 0..dim {
            let mean_new = increment.iter().map(|s| s.features[j]).sum::<f64>() / n;
            let var = (stats.m2[j] / (stats.count - 1) as f64).max(VARIANCE_FLOOR);
            let z = (mean_new - stats.mean[j]).abs() / (var / n).sqrt();
            z_max = z_max.max(z);
        }
        Some(z_max)
    }

    /// Records the post-training accuracy and folds `merged` into the
    /// running feature means.
    pub fn update_baseline(&mut self, accuracy: f64, merged: &[Sample]) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.baseline = Some(accuracy);
        self.absorb(merged);
        Ok(())
    }

    /// Folds samples into the running feature means without touching the
    /// accuracy baseline.
    pub fn absorb(&mut self, samples: &[Sample]) {
        let Some(first) = samples.first() else {
            return;
        };
        let stats = self.stats.get_or_insert_with(|| RunningStats {
            count: 0,
            mean: vec![0.0; first.features.len()],
            m2: vec![0.0; first.features.len()],
        });
        for s in samples {
            stats.absorb(&s.features);
        }
    }
}
