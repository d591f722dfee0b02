use serde::Serialize;

use crate::data::{EncodedExample, NUM_CLASSES};
use crate::error::Result;
use crate::exec;
use crate::model::Predictor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1; zero-support classes count as 0.
    pub macro_f1: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl EvalReport {
    pub fn from_confusion(confusion: [[usize; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
        for (c, m) in per_class.iter_mut().enumerate() {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..NUM_CLASSES).map(|g| confusion[g][c]).sum();
            let ratio = |n: f64, d: usize| if d == 0 { 0.0 } else { n / d as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            *m = ClassMetrics {
                precision,
                recall,
                f1,
                support,
            };
        }
        EvalReport {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64,
            per_class,
            confusion,
        }
    }

    pub fn from_predictions(gold: &[usize], predicted: &[usize]) -> Self {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (&g, &p) in gold.iter().zip(predicted) {
            confusion[g][p] += 1;
        }
        EvalReport::from_confusion(confusion)
    }
}

/// Mean-mode argmax evaluation; examples are scored in parallel and merged
/// in corpus order.
pub fn evaluate(model: &dyn Predictor, corpus: &[EncodedExample]) -> Result<EvalReport> {
    let predicted = exec::try_collect(exec::map(corpus, |ex| model.predict(ex)))?;
    let gold: Vec<usize> = corpus.iter().map(|e| e.label).collect();
    Ok(EvalReport::from_predictions(&gold, &predicted))
}

pub fn accuracy(model: &dyn Predictor, corpus: &[EncodedExample]) -> Result<f64> {
    Ok(evaluate(model, corpus)?.accuracy)
}
