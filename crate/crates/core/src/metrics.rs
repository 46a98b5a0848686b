//! Evaluation metrics over a confusion matrix whose rows are ground-truth
//! classes and whose columns are predicted classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let k = names.len();
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
            names,
        }
    }

    pub fn with_classes(k: usize) -> Self {
        Self::new((0..k).map(|i| format!("class{i}")).collect())
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            counts,
            names: (0..k).map(|i| format!("class{i}")).collect(),
        })
    }

    /// Builds the matrix from parallel truth/prediction lists.
    pub fn from_predictions(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::input("truth and prediction lists differ in length"));
        }
        let mut cm = Self::with_classes(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        if truth >= k || predicted >= k {
            return Err(Error::input(format!("class index out of range for {k} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn set_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.classes() {
            return Err(Error::input("class-name table has the wrong length"));
        }
        self.names = names;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

/// `TP / (TP + FP)` per class; a class that is never predicted scores 0.
pub fn precision_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes())
        .map(|k| match cm.col_sum(k) {
            0 => 0.0,
            col => cm.counts[k][k] as f64 / col as f64,
        })
        .collect()
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::input("overall accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Cohen's kappa; 0 when chance agreement is already 1.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::input("kappa of an empty confusion matrix"));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e == 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Divides each row by its sum; rows with no support stay zero.
pub fn normalize_rows(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub precision: Vec<f64>,
    pub overall_accuracy: f64,
    pub kappa: f64,
    pub normalized: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(EvalReport {
            class_names: cm.names().to_vec(),
            precision: precision_per_class(cm),
            overall_accuracy: overall_accuracy(cm)?,
            kappa: kappa(cm)?,
            normalized: normalize_rows(cm),
        })
    }

    /// Line-oriented text: `class,precision` per class, `OA,<v>`, `kappa,<v>`,
    /// then one comma-separated row per normalized matrix row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, p) in self.class_names.iter().zip(&self.precision) {
            let _ = writeln!(out, "{name},{p}");
        }
        let _ = writeln!(out, "OA,{}", self.overall_accuracy);
        let _ = writeln!(out, "kappa,{}", self.kappa);
        for row in &self.normalized {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let oa_line = lines
            .iter()
            .position(|l| l.starts_with("OA,"))
            .ok_or_else(|| Error::input("report has no OA line"))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::input(format!("bad number {s:?} in report")))
        };
        let mut class_names = Vec::new();
        let mut precision = Vec::new();
        for l in &lines[..oa_line] {
            let (name, v) = l
                .rsplit_once(',')
                .ok_or_else(|| Error::input(format!("bad class line {l:?}")))?;
            class_names.push(name.to_string());
            precision.push(num(v)?);
        }
        let overall_accuracy = num(&lines[oa_line][3..])?;
        let kappa = num(
            lines
                .get(oa_line + 1)
                .and_then(|l| l.strip_prefix("kappa,"))
                .ok_or_else(|| Error::input("report has no kappa line"))?,
        )?;
        let normalized = lines[oa_line + 2..]
            .iter()
            .map(|l| l.split(',').map(num).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            class_names,
            precision,
            overall_accuracy,
            kappa,
            normalized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![vec![4, 1], vec![2, 3]]).unwrap()
    }

    #[test]
    fn precision_examples() {
        // class 0: TP 3, FP 1
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![1, 2]]).unwrap();
        assert_eq!(precision_per_class(&cm)[0], 0.75);
        let diag = ConfusionMatrix::from_counts(vec![vec![2, 0, 0], vec![0, 5, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(precision_per_class(&diag), vec![1.0; 3]);
        let p = precision_per_class(&worked());
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 0], vec![3, 0]]).unwrap();
        assert_eq!(precision_per_class(&cm)[1], 0.0);
    }

    #[test]
    fn accuracy_and_kappa_examples() {
        assert!((overall_accuracy(&worked()).unwrap() - 0.7).abs() < 1e-15);
        assert!((kappa(&worked()).unwrap() - 0.4).abs() < 1e-12);
        let even = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(kappa(&even).unwrap(), 0.0);
        let off = ConfusionMatrix::from_counts(vec![vec![0, 2], vec![3, 0]]).unwrap();
        assert_eq!(overall_accuracy(&off).unwrap(), 0.0);
        let diag = ConfusionMatrix::from_counts(vec![vec![2, 0], vec![0, 5]]).unwrap();
        assert_eq!(kappa(&diag).unwrap(), 1.0);
        assert_eq!(overall_accuracy(&diag).unwrap(), 1.0);
    }

    #[test]
    fn single_class_kappa_is_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![4]]).unwrap();
        assert_eq!(kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::with_classes(3);
        assert!(matches!(overall_accuracy(&cm), Err(Error::Input(_))));
        assert!(matches!(kappa(&cm), Err(Error::Input(_))));
    }

    #[test]
    fn row_normalization() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 2], vec![0, 0]]).unwrap();
        assert_eq!(normalize_rows(&cm), vec![vec![0.5, 0.5], vec![0.0, 0.0]]);
    }

    #[test]
    fn report_text_round_trips() {
        let mut cm = worked();
        cm.set_names(vec!["up".into(), "down".into()]).unwrap();
        let r = EvalReport::from_confusion(&cm).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("up,0.666"));
        assert!(text.contains("\nOA,0.7\n"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
    }
}
