use serde::{Deserialize, Serialize};

use super::HgtError;
use crate::corpus::Strategy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pred: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, y) in pred {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub support: usize,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_label: std::collections::BTreeMap<String, LabelMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_mcc: f64,
}

impl ClassificationReport {
    /// Confusion matrices as CSV rows `label,tp,fp,fn,tn`.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("label,tp,fp,fn,tn\n");
        for st in Strategy::ALL {
            if let Some(m) = self.per_label.get(st.name()) {
                let c = m.confusion;
                s.push_str(&format!("{},{},{},{},{}\n", st.name(), c.tp, c.fp, c.fn_, c.tn));
            }
        }
        s
    }
}

pub fn evaluate_classifier(preds: &[[bool; 3]], labels: &[[bool; 3]]) -> Result<ClassificationReport, HgtError> {
    if preds.len() != labels.len() {
        return Err(HgtError::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut per_label = std::collections::BTreeMap::new();
    let mut sums = [0.0; 4];
    for s in Strategy::ALL {
        let j = s.index();
        let c = Confusion::from_pairs(preds.iter().zip(labels).map(|(p, y)| (p[j], y[j])));
        let m = LabelMetrics {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            mcc: c.mcc(),
            support: c.tp + c.fn_,
            confusion: c,
        };
        sums[0] += m.precision;
        sums[1] += m.recall;
        sums[2] += m.f1;
        sums[3] += m.mcc;
        per_label.insert(s.name().to_string(), m);
    }
    Ok(ClassificationReport {
        per_label,
        macro_precision: sums[0] / 3.0,
        macro_recall: sums[1] / 3.0,
        macro_f1: sums[2] / 3.0,
        macro_mcc: sums[3] / 3.0,
    })
}

pub fn macro_f1(preds: &[[bool; 3]], labels: &[[bool; 3]]) -> f64 {
    (0..3)
        .map(|j| Confusion::from_pairs(preds.iter().zip(labels).map(|(p, y)| (p[j], y[j]))).f1())
        .sum::<f64>()
        / 3.0
}
