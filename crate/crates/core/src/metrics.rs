//! Lower-triangular accuracy records, Avg/Last, and the metrics.csv format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// `a[i][j]`: accuracy on evaluation task `j + 1` after training tasks `1..=i + 1`.
/// `last[i]` is the overall accuracy on every class seen by step `i + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
    last: Vec<f64>,
}

fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::new(),
            last: Vec::new(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Number of completed rows.
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, step: usize) -> Option<&[f64]> {
        step.checked_sub(1).and_then(|i| self.rows.get(i)).map(Vec::as_slice)
    }

    pub fn overall(&self, step: usize) -> Option<f64> {
        step.checked_sub(1).and_then(|i| self.last.get(i)).copied()
    }

    /// Appends the next row; it must hold exactly `steps() + 1` entries.
    pub fn push_row(&mut self, row: Vec<f64>, overall: f64) -> Result<()> {
        let want = self.rows.len() + 1;
        if want > self.tasks {
            return Err(Error::invalid(format!("matrix already holds all {} rows", self.tasks)));
        }
        if row.len() != want {
            return Err(Error::LengthMismatch {
                what: "accuracy row",
                expected: want,
                actual: row.len(),
            });
        }
        row.iter().try_for_each(|&v| check_unit(v))?;
        check_unit(overall)?;
        self.rows.push(row);
        self.last.push(overall);
        Ok(())
    }

    /// Mean of row `step`.
    pub fn avg_accuracy(&self, step: usize) -> Result<f64> {
        let row = self
            .row(step)
            .ok_or_else(|| Error::invalid(format!("row {step} is not complete ({} of {})", self.steps(), self.tasks)))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Overall accuracy on all seen classes after the final task.
    pub fn last_accuracy(&self) -> Result<f64> {
        if self.rows.len() != self.tasks || self.tasks == 0 {
            return Err(Error::invalid(format!(
                "final row missing ({} of {} steps)",
                self.steps(),
                self.tasks
            )));
        }
        Ok(self.last[self.tasks - 1])
    }

    /// `step,task_1,...,task_T,avg,last` with blanks above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for j in 1..=self.tasks {
            let _ = write!(out, ",task_{j}");
        }
        out.push_str(",avg,last\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for j in 0..self.tasks {
                match row.get(j) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            let avg = row.iter().sum::<f64>() / row.len() as f64;
            let _ = writeln!(out, ",{avg},{}", self.last[i]);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Malformed {
            path: "metrics.csv".into(),
            reason: msg,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
        if header.len() < 4 || header[0] != "step" || header[header.len() - 2] != "avg" || header[header.len() - 1] != "last" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let tasks = header.len() - 3;
        for (j, h) in header[1..=tasks].iter().enumerate() {
            if *h != format!("task_{}", j + 1) {
                return Err(bad(format!("unexpected column {h}")));
            }
        }
        let mut m = Self::new(tasks);
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != tasks + 3 {
                return Err(bad(format!("row {} has {} cells", i + 1, cells.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: not a number: {s:?}", i + 1)));
            if cells[0] != (i + 1).to_string() {
                return Err(bad(format!("row {} labelled step {}", i + 1, cells[0])));
            }
            let row = cells[1..=i + 1].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            if cells[i + 2..=tasks].iter().any(|s| !s.is_empty()) {
                return Err(bad(format!("row {} has entries above the diagonal", i + 1)));
            }
            let avg = num(cells[tasks + 1])?;
            let overall = num(cells[tasks + 2])?;
            m.push_row(row, overall)?;
            let recomputed = m.avg_accuracy(i + 1)?;
            if (recomputed - avg).abs() > 1e-12 {
                return Err(bad(format!("row {}: avg {avg} disagrees with entries ({recomputed})", i + 1)));
            }
        }
        Ok(m)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::binio::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_last_equals_avg_when_overall_matches() {
        let mut m = AccuracyMatrix::new(1);
        m.push_row(vec![0.8], 0.8).unwrap();
        assert_eq!(m.avg_accuracy(1).unwrap(), 0.8);
        assert_eq!(m.last_accuracy().unwrap(), 0.8);
    }

    #[test]
    fn row_mean() {
        let mut m = AccuracyMatrix::new(2);
        m.push_row(vec![0.9], 0.9).unwrap();
        m.push_row(vec![0.5, 0.7], 0.65).unwrap();
        assert!((m.avg_accuracy(2).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn incomplete_rows_are_errors() {
        let mut m = AccuracyMatrix::new(3);
        m.push_row(vec![0.9], 0.9).unwrap();
        assert!(m.avg_accuracy(2).is_err());
        assert!(m.last_accuracy().is_err());
        assert!(m.push_row(vec![0.1], 0.1).is_err());
        assert!(m.push_row(vec![0.1, 1.5], 0.1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut m = AccuracyMatrix::new(3);
        m.push_row(vec![1.0], 1.0).unwrap();
        m.push_row(vec![0.1 + 0.2, 2.0 / 3.0], 0.5).unwrap();
        m.push_row(vec![0.25, 0.125, 0.0], 0.2).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("step,task_1,task_2,task_3,avg,last\n1,1,,,1,1\n"));
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), m);
    }

    #[test]
    fn csv_rejects_inconsistent_avg() {
        let csv = "step,task_1,avg,last\n1,0.5,0.6,0.5\n";
        assert!(AccuracyMatrix::from_csv(csv).is_err());
    }
}
