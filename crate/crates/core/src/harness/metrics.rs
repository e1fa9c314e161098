use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{arg, Result};
use crate::exec::Exec;
use crate::model::ParamStore;

/// Classification metrics over one evaluation split.
///
/// Classes absent from the split report a recall of 0 and are left out
/// of the AA and F1 means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return arg("confusion matrix must be square and non-empty");
        }
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return arg("confusion matrix is empty");
        }
        let nf = n as f64;
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<u64> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();

        let mut recall = vec![0.0; c];
        let mut f1 = vec![0.0; c];
        for i in 0..c {
            let tp = confusion[i][i] as f64;
            if support[i] > 0 {
                recall[i] = tp / support[i] as f64;
            }
            let denom = (support[i] + predicted[i]) as f64;
            if denom > 0.0 {
                f1[i] = 2.0 * tp / denom;
            }
        }
        let present: Vec<usize> = (0..c).filter(|&i| support[i] > 0).collect();
        let mean_over = |v: &[f64]| present.iter().map(|&i| v[i]).sum::<f64>() / present.len() as f64;

        let p_o = correct as f64 / nf;
        let p_e: f64 = (0..c)
            .map(|i| (support[i] as f64 / nf) * (predicted[i] as f64 / nf))
            .sum();
        let kappa = if p_e < 1.0 {
            (p_o - p_e) / (1.0 - p_e)
        } else if p_o == 1.0 {
            1.0
        } else {
            0.0
        };
        Ok(Self {
            n,
            oa: p_o,
            aa: mean_over(&recall),
            kappa,
            f1: mean_over(&f1),
            per_class_recall: recall,
            per_class_f1: f1,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return arg("prediction and label counts differ");
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return arg(format!("class index outside 0..{n_classes}"));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Metrics of `store` on the bundle's test split.
pub fn evaluate(store: &ParamStore, bundle: &DatasetBundle, exec: Exec) -> Result<MetricsReport> {
    if bundle.split.test.is_empty() {
        return arg("the test split is empty");
    }
    let model = store.compile()?;
    let test = bundle.subset(&bundle.split.test);
    let predicted = exec
        .map(&test, |s| model.predict(s).map(|p| p.argmax()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&truth, &predicted, bundle.spec.n_classes)
}
