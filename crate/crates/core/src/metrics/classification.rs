use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::dim("confusion", format!("{} predictions vs {} labels", preds.len(), labels.len())));
        }
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p != 0, y != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn scores(tp: usize, fp: usize, fn_: usize) -> ClassScores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassScores { precision, recall, f1 }
}

/// Per-class scores `[negative, positive]`; 0/0 counts as 0.
pub fn per_class_scores(c: &Confusion) -> [ClassScores; 2] {
    [scores(c.tn, c.fn_, c.fp), scores(c.tp, c.fp, c.fn_)]
}
