use serde::{Deserialize, Serialize};

use crate::ensembler::{decide_with, Branch, EnsembleRule, ScorePair};
use crate::domain::DomainPosterior;
use crate::error::{Error, Result};
use crate::Label;

/// Inference output for one test image at one point of the sequence.
/// Scores are stored unweighted; `w` is the domain posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub image_id: String,
    /// Number of tasks trained when the image was scored.
    pub after_task: usize,
    /// Task whose test set the image belongs to.
    pub domain: usize,
    pub label: Label,
    pub y_hat: Label,
    pub branch: Branch,
    pub s_r: Vec<f64>,
    pub s_f: Vec<f64>,
    pub w: Vec<f64>,
    pub classes: Vec<String>,
}

impl DecisionRecord {
    pub fn correct(&self) -> bool {
        self.label == self.y_hat
    }

    /// Task with the largest posterior weight, lowest index on ties (1-based).
    pub fn predicted_domain(&self) -> usize {
        DomainPosterior { w: self.w.clone() }.argmax() + 1
    }

    /// The same record decided under `rule`.
    pub fn rescored(&self, rule: EnsembleRule) -> Result<Self> {
        let raw = ScorePair::new(self.s_r.clone(), self.s_f.clone())?;
        let d = decide_with(&raw.weighted(&DomainPosterior { w: self.w.clone() })?, rule);
        Ok(Self {
            y_hat: d.y_hat,
            branch: d.branch,
            ..self.clone()
        })
    }
}

/// Percentage of correct decisions.
pub fn accuracy_row_entry(records: &[&DecisionRecord], task: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyTestSet(task));
    }
    let ok = records.iter().filter(|r| r.correct()).count();
    Ok(100.0 * ok as f64 / records.len() as f64)
}

/// `a[t][k]`, accuracy on task `k`'s test set after training task `t`,
/// stored for `k ≤ t` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::IncompleteMatrix("no rows".into()));
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::IncompleteMatrix(format!(
                    "row {} has {} entries, expected {}",
                    t + 1,
                    row.len(),
                    t + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::IncompleteMatrix(format!("entry {v} outside [0, 100]")));
            }
        }
        Ok(())
    }

    /// Builds the matrix from records covering every `(after_task, domain)`
    /// pair with `domain ≤ after_task`.
    pub fn from_records(records: &[DecisionRecord], tasks: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(tasks);
        for t in 1..=tasks {
            let mut row = Vec::with_capacity(t);
            for k in 1..=t {
                let sel: Vec<&DecisionRecord> = records.iter().filter(|r| r.after_task == t && r.domain == k).collect();
                row.push(accuracy_row_entry(&sel, k)?);
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aa: f64,
    /// Mean change of earlier tasks' accuracy; negative means forgetting.
    pub af: f64,
    /// False when there is a single task and `af` is reported as 0.
    pub af_defined: bool,
    pub taa: f64,
    pub final_accuracies: Vec<f64>,
}

/// AA over the final row, AF over tasks before the last, TAA over the pooled
/// `(label, prediction)` pairs of the final evaluation.
pub fn compute_metrics(matrix: &AccuracyMatrix, pooled: &[(Label, Label)]) -> Result<Metrics> {
    matrix.validate()?;
    let t = matrix.tasks();
    let last = &matrix.rows[t - 1];
    let aa = last.iter().sum::<f64>() / t as f64;
    let (af, af_defined) = if t > 1 {
        let s: f64 = (0..t - 1).map(|k| last[k] - matrix.rows[k][k]).sum();
        (s / (t - 1) as f64, true)
    } else {
        (0.0, false)
    };
    if pooled.is_empty() {
        return Err(Error::EmptyTestSet(t));
    }
    let ok = pooled.iter().filter(|(y, p)| y == p).count();
    Ok(Metrics {
        aa,
        af,
        af_defined,
        taa: 100.0 * ok as f64 / pooled.len() as f64,
        final_accuracies: last.clone(),
    })
}

/// Metrics of a record set, recomputed from scratch.
pub fn metrics_from_records(records: &[DecisionRecord], tasks: usize) -> Result<(AccuracyMatrix, Metrics)> {
    let matrix = AccuracyMatrix::from_records(records, tasks)?;
    let pooled: Vec<(Label, Label)> = records
        .iter()
        .filter(|r| r.after_task == tasks)
        .map(|r| (r.label, r.y_hat))
        .collect();
    let m = compute_metrics(&matrix, &pooled)?;
    Ok((matrix, m))
}

/// `(i, j)`: test images of task `i` whose posterior argmax is task `j`,
/// from the final evaluation.
pub fn domain_confusion(records: &[DecisionRecord], tasks: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; tasks]; tasks];
    for r in records.iter().filter(|r| r.after_task == tasks) {
        let j = r.predicted_domain();
        if r.domain >= 1 && r.domain <= tasks && j <= tasks {
            m[r.domain - 1][j - 1] += 1;
        }
    }
    m
}

/// Rounds to two decimals, as accuracies are reported.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(after: usize, domain: usize, ok: bool) -> DecisionRecord {
        DecisionRecord {
            image_id: String::new(),
            after_task: after,
            domain,
            label: Label::Fake,
            y_hat: if ok { Label::Fake } else { Label::Real },
            branch: Branch::Max,
            s_r: vec![0.0; after],
            s_f: vec![0.0; after],
            w: {
                let mut w = vec![0.0; after];
                w[domain - 1] = 1.0;
                w
            },
            classes: vec![],
        }
    }

    #[test]
    fn accuracy_entries() {
        let all: Vec<DecisionRecord> = (0..4).map(|_| record(1, 1, true)).collect();
        let refs: Vec<&DecisionRecord> = all.iter().collect();
        assert_eq!(accuracy_row_entry(&refs, 1).unwrap(), 100.0);
        let none: Vec<DecisionRecord> = (0..4).map(|_| record(1, 1, false)).collect();
        let refs: Vec<&DecisionRecord> = none.iter().collect();
        assert_eq!(accuracy_row_entry(&refs, 1).unwrap(), 0.0);
        let mixed: Vec<DecisionRecord> = (0..8).map(|i| record(1, 1, i < 6)).collect();
        let refs: Vec<&DecisionRecord> = mixed.iter().collect();
        assert_eq!(accuracy_row_entry(&refs, 1).unwrap(), 75.0);
        assert!(matches!(accuracy_row_entry(&[], 2), Err(Error::EmptyTestSet(2))));
    }

    fn final_row(row: &[f64]) -> AccuracyMatrix {
        let t = row.len();
        let mut rows: Vec<Vec<f64>> = (1..t).map(|i| vec![50.0; i]).collect();
        rows.push(row.to_vec());
        AccuracyMatrix { rows }
    }

    #[test]
    fn published_average_accuracies() {
        let pooled = [(Label::Real, Label::Real)];
        let m = compute_metrics(&final_row(&[98.70, 94.38, 81.73, 95.50, 81.11]), &pooled).unwrap();
        assert_eq!(format!("{:.2}", m.aa), "90.28");
        let m = compute_metrics(&final_row(&[99.30, 96.75, 82.06, 96.25, 68.89]), &pooled).unwrap();
        assert_eq!(format!("{:.2}", m.aa), "88.65");
        assert_eq!(round2(m.aa), 88.65);
    }

    #[test]
    fn forgetting() {
        let pooled = [(Label::Real, Label::Real)];
        let same = AccuracyMatrix {
            rows: vec![vec![90.0], vec![90.0, 80.0], vec![90.0, 80.0, 70.0]],
        };
        let m = compute_metrics(&same, &pooled).unwrap();
        assert_eq!((m.af, m.af_defined), (0.0, true));
        let drop = AccuracyMatrix {
            rows: vec![vec![90.0], vec![85.0, 80.0], vec![88.0, 76.0, 70.0]],
        };
        assert!((compute_metrics(&drop, &pooled).unwrap().af - (-3.0)).abs() < 1e-12);
        let single = AccuracyMatrix { rows: vec![vec![62.5]] };
        let m = compute_metrics(&single, &pooled).unwrap();
        assert_eq!((m.aa, m.af, m.af_defined), (62.5, 0.0, false));
    }

    #[test]
    fn incomplete_matrix_rejected() {
        let pooled = [(Label::Real, Label::Real)];
        let bad = AccuracyMatrix {
            rows: vec![vec![90.0], vec![90.0]],
        };
        assert!(matches!(compute_metrics(&bad, &pooled), Err(Error::IncompleteMatrix(_))));
        assert!(compute_metrics(&AccuracyMatrix { rows: vec![] }, &pooled).is_err());
        let out = AccuracyMatrix { rows: vec![vec![101.0]] };
        assert!(compute_metrics(&out, &pooled).is_err());
    }

    #[test]
    fn records_to_metrics_and_confusion() {
        let mut recs = vec![record(1, 1, true), record(1, 1, false)];
        recs.extend([record(2, 1, true), record(2, 1, true), record(2, 2, true), record(2, 2, false)]);
        let (matrix, m) = metrics_from_records(&recs, 2).unwrap();
        assert_eq!(matrix.rows, vec![vec![50.0], vec![100.0, 50.0]]);
        assert_eq!((m.aa, m.af, m.taa), (75.0, 50.0, 75.0));
        assert_eq!(domain_confusion(&recs, 2), vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(domain_confusion(&recs[..2], 1), vec![vec![2]]);
    }
}
