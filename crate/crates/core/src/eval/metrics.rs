use serde::{Deserialize, Serialize};

/// Binary classification counts and derived scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn samples(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Precision, recall and F1 with `p >= threshold` counted as positive.
pub fn f1_score(predictions: &[f64], labels: &[bool], threshold: f64) -> Metrics {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Metrics::from_counts(tp, fp, fn_, tn)
}

/// One method row of a per-relation F1 table. Each cell holds the F1 of
/// repeated runs and renders as `mean ± std` (sample deviation, 0 for one run).
#[derive(Debug, Clone, PartialEq)]
pub struct F1Row {
    pub method: String,
    pub cells: Vec<Vec<f64>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Methods as rows, relations as columns.
pub fn render_f1_table(relations: &[String], rows: &[F1Row]) -> String {
    let cell = |runs: &[f64]| {
        if runs.is_empty() {
            return "-".to_owned();
        }
        let (m, s) = mean_std(runs);
        format!("{m:.3} ± {s:.3}")
    };
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.method.clone())
                .chain((0..relations.len()).map(|i| r.cells.get(i).map_or("-".to_owned(), |c| cell(c))))
                .collect()
        })
        .collect();
    let header: Vec<String> = std::iter::once("Method".to_owned()).chain(relations.iter().cloned()).collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |row: &[String]| {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}", w = w))
            .collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&rule));
    for row in &body {
        out.push_str(&line(row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect() {
        let m = f1_score(&[0.9, 0.1, 0.7], &[true, false, true], 0.5);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn one_of_each() {
        // TP, FP, FN
        let m = f1_score(&[0.9, 0.8, 0.2], &[true, false, true], 0.5);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn all_negative_predictions() {
        let m = f1_score(&[0.1, 0.2], &[true, false], 0.5);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn table_cells_show_mean_and_deviation() {
        let table = render_f1_table(
            &["treats".to_owned(), "causes".to_owned()],
            &[F1Row {
                method: "relrec".into(),
                cells: vec![vec![0.8, 0.81], vec![0.5]],
            }],
        );
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("| Method"));
        assert!(lines[2].contains("0.805 ± 0.007"), "{table}");
        assert!(lines[2].contains("0.500 ± 0.000"), "{table}");
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..50), seed in any::<u64>()) {
            let (p, y): (Vec<f64>, Vec<bool>) = data.iter().copied().unzip();
            let a = f1_score(&p, &y, 0.5);
            use rand::{SeedableRng, seq::SliceRandom};
            data.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p, y): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            prop_assert_eq!(a, f1_score(&p, &y, 0.5));
        }
    }
}
