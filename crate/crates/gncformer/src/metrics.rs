//! Evaluation metrics and the training metrics file.
//!
//! The edit-distance rate mirrors character error rate: substitutions,
//! insertions and deletions over total reference length, aggregated at
//! corpus level.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, O(min(|a|,|b|)) memory.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for i in 1..=long.len() {
        curr[0] = i;
        for j in 1..=short.len() {
            let cost = usize::from(long[i - 1] != short[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub token_acc: f64,
    pub seq_acc: f64,
    pub edit_rate: f64,
}

/// Corpus-level accuracy and edit rate over (reference, hypothesis) pairs.
/// Token accuracy counts position-wise matches against the total reference
/// length, so missing or extra positions count as wrong.
pub fn evaluate_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> EvalMetrics {
    let mut matches = 0usize;
    let mut exact = 0usize;
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (reference, hypothesis) in pairs {
        ref_len += reference.len();
        matches += reference
            .iter()
            .zip(hypothesis)
            .filter(|(r, h)| r == h)
            .count();
        exact += usize::from(reference == hypothesis);
        edits += edit_distance(reference, hypothesis);
    }
    let denom = ref_len.max(1) as f64;
    EvalMetrics {
        token_acc: matches as f64 / denom,
        seq_acc: exact as f64 / pairs.len().max(1) as f64,
        edit_rate: edits as f64 / denom,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub edit_rate: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "step,loss,token_acc,seq_acc,edit_rate,seconds";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.step, self.loss, self.token_acc, self.seq_acc, self.edit_rate, self.seconds
        )
    }
}

/// Append-only metrics file with strictly increasing steps.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter {
            out,
            last_step: None,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            assert!(row.step > last, "metrics steps must strictly increase");
        }
        self.last_step = Some(row.step);
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics CSV written by [`MetricsWriter`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::ConfigParse {
            line: 1,
            reason: format!("unexpected metrics header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::ConfigParse {
                line: i + 2,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let bad = |e: std::num::ParseFloatError| Error::ConfigParse {
            line: i + 2,
            reason: e.to_string(),
        };
        rows.push(MetricsRow {
            step: fields[0].parse().map_err(|_| Error::ConfigParse {
                line: i + 2,
                reason: "bad step".into(),
            })?,
            loss: fields[1].parse().map_err(bad)?,
            token_acc: fields[2].parse().map_err(bad)?,
            seq_acc: fields[3].parse().map_err(bad)?,
            edit_rate: fields[4].parse().map_err(bad)?,
            seconds: fields[5].parse().map_err(bad)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic reference implementation used to pin the optimized one.
    fn edit_distance_quadratic(a: &[usize], b: &[usize]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 9, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[2, 3, 4]), 2);
    }

    #[test]
    fn edit_distance_matches_quadratic_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let la = rng.gen_range(0..12);
            let lb = rng.gen_range(0..12);
            let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..5)).collect();
            let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..5)).collect();
            assert_eq!(edit_distance(&a, &b), edit_distance_quadratic(&a, &b));
        }
    }

    #[test]
    fn evaluate_pairs_boundary_cases() {
        let perfect = evaluate_pairs(&[(vec![1, 2], vec![1, 2]), (vec![3], vec![3])]);
        assert_eq!(perfect.token_acc, 1.0);
        assert_eq!(perfect.seq_acc, 1.0);
        assert_eq!(perfect.edit_rate, 0.0);

        let empty = evaluate_pairs(&[(vec![1, 2, 3], vec![])]);
        assert_eq!(empty.edit_rate, 1.0);
        assert_eq!(empty.token_acc, 0.0);

        let one_sub = evaluate_pairs(&[(vec![1, 2, 3], vec![1, 9, 3])]);
        assert!((one_sub.edit_rate - 1.0 / 3.0).abs() < 1e-12);
        assert!((one_sub.token_acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(one_sub.seq_acc, 0.0);
    }

    #[test]
    fn metrics_file_round_trip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let rows = vec![
            MetricsRow {
                step: 0,
                loss: 2.995732,
                token_acc: 0.05,
                seq_acc: 0.0,
                edit_rate: 0.99,
                seconds: 0.1,
            },
            MetricsRow {
                step: 100,
                loss: 0.5,
                token_acc: 0.9,
                seq_acc: 0.4,
                edit_rate: 0.08,
                seconds: 3.2,
            },
        ];
        for r in &rows {
            w.append(r).unwrap();
        }
        let read = read_metrics(&path).unwrap();
        assert_eq!(read.len(), 2);
        assert!(read.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(read[1].token_acc, 0.9);
    }
}
