use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::skeleton::Split;

pub const METRICS_HEADER: &str = "epoch,split,loss,top1";

/// One line of the metric history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        // `{}` prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.loss, r.top1);
    }
    s
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Prediction counts: `matrix[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Confusion { matrix: vec![vec![0; n_classes]; n_classes] }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.matrix[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// CSV with a `true\predicted` header row of class names.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        for n in class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            s.push_str(class_names.get(i).map_or("?", String::as_str));
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [
            MetricRow { epoch: 1, split: Split::Train, loss: 1.5, top1: 0.25 },
            MetricRow { epoch: 1, split: Split::Val, loss: 0.1, top1: 1.0 },
        ];
        assert_eq!(metrics_csv(&rows), "epoch,split,loss,top1\n1,train,1.5,0.25\n1,val,0.1,1\n");
    }

    #[test]
    fn confusion_counts() {
        let mut c = Confusion::new(2);
        c.record(0, 0);
        c.record(0, 1);
        c.record(1, 1);
        assert_eq!(c.accuracy(), 2.0 / 3.0);
        assert_eq!(c.to_csv(&["a".into(), "b".into()]), "true\\predicted,a,b\na,1,1\nb,0,1\n");
    }
}
