use serde::{Deserialize, Serialize};

use crate::downstream::PatientPrediction;
use crate::error::{Error, Result};

/// Patient counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub run_id: usize,
}

impl ConfusionMatrix {
    pub fn new(k: usize, run_id: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
            run_id,
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts, run_id: 0 })
    }

    pub fn from_predictions(preds: &[PatientPrediction], k: usize, run_id: usize) -> Result<Self> {
        let mut cm = Self::new(k, run_id);
        for p in preds {
            if p.true_label >= k || p.pred >= k {
                return Err(Error::OutOfRange(format!("{}: class outside 0..{k}", p.patient_id)));
            }
            cm.counts[p.true_label][p.pred] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn misclassified(&self) -> u64 {
        let mut off = 0;
        for (i, row) in self.counts.iter().enumerate() {
            off += row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).sum::<u64>();
        }
        off
    }
}

/// Mean of per-class recalls.
pub fn mean_class_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    let mut total = 0.0;
    for (c, row) in cm.counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            return Err(Error::EmptyClass(c));
        }
        total += row[c] as f64 / n as f64;
    }
    Ok(total / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    /// Mean over runs of the per-run mean class accuracy.
    pub mean_class_accuracy: f64,
    /// Sample standard deviation of the per-run mean class accuracy.
    pub std_class_accuracy: f64,
    /// Mean off-diagonal count per run, rounded up.
    pub misclassified: u64,
    pub cell_mean: Vec<Vec<f64>>,
    /// Sample standard deviation per cell.
    pub cell_std: Vec<Vec<f64>>,
}

/// Mean and sample standard deviation (n - 1) of `xs`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(cms: &[ConfusionMatrix]) -> Result<RunSummary> {
    if cms.len() < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 runs, got {}", cms.len())));
    }
    let k = cms[0].k();
    if cms.iter().any(|c| c.k() != k) {
        return Err(Error::ShapeMismatch("runs disagree on the number of classes".into()));
    }
    let accs: Vec<f64> = cms.iter().map(mean_class_accuracy).collect::<Result<_>>()?;
    let (mean_acc, std_acc) = mean_std(&accs);
    let mut cell_mean = vec![vec![0.0; k]; k];
    let mut cell_std = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let xs: Vec<f64> = cms.iter().map(|c| c.counts[i][j] as f64).collect();
            (cell_mean[i][j], cell_std[i][j]) = mean_std(&xs);
        }
    }
    let mis: Vec<f64> = cms.iter().map(|c| c.misclassified() as f64).collect();
    let mis_mean = mean_std(&mis).0;
    Ok(RunSummary {
        runs: cms.len(),
        mean_class_accuracy: mean_acc,
        std_class_accuracy: std_acc,
        misclassified: (mis_mean - 1e-9).ceil().max(0.0) as u64,
        cell_mean,
        cell_std,
    })
}
