//! Per-degree-bucket attention report.
//!
//! For every bucket of node degrees the report holds the mean attention
//! weight of each propagation step and the same row divided by its maximum.
//!
//! ```text
//! bucket,nodes,stat,step_0,step_1,...
//! 1-4,37,mean,0.210000,...
//! 1-4,37,relative,0.700000,...
//! ```
//!
//! A bucket without nodes keeps its two rows with empty step cells.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_BUCKETS: &[DegreeBucket] = &[
    DegreeBucket { lo: 1, hi: 4 },
    DegreeBucket { lo: 5, hi: 8 },
    DegreeBucket { lo: 9, hi: 12 },
];

/// Inclusive degree range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeBucket {
    pub lo: u32,
    pub hi: u32,
}

impl DegreeBucket {
    pub fn contains(&self, degree: u32) -> bool {
        (self.lo..=self.hi).contains(&degree)
    }
}

impl fmt::Display for DegreeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl FromStr for DegreeBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("degree bucket {s:?}: expected LO-HI"));
        let (lo, hi) = s.trim().split_once('-').ok_or_else(bad)?;
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok(DegreeBucket { lo, hi })
    }
}

pub fn parse_buckets(s: &str) -> Result<Vec<DegreeBucket>> {
    s.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub bucket: DegreeBucket,
    pub nodes: usize,
    /// `None` when the bucket is empty.
    pub mean: Option<Vec<f64>>,
    pub relative: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionReport {
    pub num_steps: usize,
    pub rows: Vec<BucketRow>,
}

/// Averages attention rows per bucket. With `max_nodes > 0` each bucket is
/// subsampled to at most that many nodes, deterministically from `seed`.
pub fn build_report<T: Real>(
    weights: &Matrix<T>,
    degrees: &[u32],
    buckets: &[DegreeBucket],
    max_nodes: usize,
    seed: u64,
) -> Result<AttentionReport> {
    if weights.rows() != degrees.len() {
        return Err(Error::Input(format!(
            "{} attention rows for {} nodes",
            weights.rows(),
            degrees.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = weights.cols();
    let mut rows = Vec::with_capacity(buckets.len());
    for &bucket in buckets {
        let mut members: Vec<usize> = (0..degrees.len()).filter(|&i| bucket.contains(degrees[i])).collect();
        if max_nodes > 0 && members.len() > max_nodes {
            members.shuffle(&mut rng);
            members.truncate(max_nodes);
            members.sort_unstable();
        }
        if members.is_empty() {
            warn!("degree bucket {bucket} has no nodes");
            rows.push(BucketRow {
                bucket,
                nodes: 0,
                mean: None,
                relative: None,
            });
            continue;
        }
        let mut mean = vec![0.0; steps];
        for &i in &members {
            for (m, w) in mean.iter_mut().zip(weights.row(i)) {
                *m += w.as_f64();
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let relative = mean.iter().map(|m| m / max).collect();
        rows.push(BucketRow {
            bucket,
            nodes: members.len(),
            mean: Some(mean),
            relative: Some(relative),
        });
    }
    Ok(AttentionReport {
        num_steps: steps,
        rows,
    })
}

/// Fixed six significant digits, plain decimal notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (0.9999996 → 1.000000).
    let rounded: f64 = s.parse().expect("formatted float parses");
    if decimals > 0 && rounded.abs().log10().floor() as i32 > magnitude {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

impl AttentionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,nodes,stat");
        for l in 0..self.num_steps {
            out.push_str(&format!(",step_{l}"));
        }
        out.push('\n');
        for row in &self.rows {
            for (stat, values) in [("mean", &row.mean), ("relative", &row.relative)] {
                out.push_str(&format!("{},{},{stat}", row.bucket, row.nodes));
                for l in 0..self.num_steps {
                    out.push(',');
                    if let Some(v) = values {
                        out.push_str(&format_sig6(v[l]));
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |no: usize, msg: &str| Error::Input(format!("attention report line {no}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty report"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["bucket", "nodes", "stat"] {
            return Err(bad(1, "unexpected header"));
        }
        let num_steps = cols.len() - 3;
        for (l, c) in cols[3..].iter().enumerate() {
            if *c != format!("step_{l}") {
                return Err(bad(1, "unexpected step column"));
            }
        }
        let mut rows: Vec<BucketRow> = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != num_steps + 3 {
                return Err(bad(no, "wrong number of fields"));
            }
            let bucket: DegreeBucket = fields[0].parse()?;
            let nodes: usize = fields[1].parse().map_err(|_| bad(no, "bad node count"))?;
            let values = if fields[3..].iter().all(|f| f.is_empty()) {
                None
            } else {
                Some(
                    fields[3..]
                        .iter()
                        .map(|f| f.parse::<f64>().map_err(|_| bad(no, "bad weight")))
                        .collect::<Result<Vec<f64>>>()?,
                )
            };
            match fields[2] {
                "mean" => rows.push(BucketRow {
                    bucket,
                    nodes,
                    mean: values,
                    relative: None,
                }),
                "relative" => {
                    let row = rows
                        .last_mut()
                        .filter(|r| r.bucket == bucket && r.relative.is_none())
                        .ok_or_else(|| bad(no, "relative row without its mean row"))?;
                    row.relative = values;
                }
                _ => return Err(bad(no, "stat must be mean or relative")),
            }
        }
        Ok(AttentionReport { num_steps, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.142857142), "0.142857");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(0.0123456789), "0.0123457");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(0.9999996), "1.00000");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(9.999996), "10.0000");
        assert_eq!(format_sig6(-0.25), "-0.250000");
    }

    #[test]
    fn uniform_weights_give_unit_relative_rows() {
        let n = 12;
        let k = 6;
        let w = Matrix::<f64>::filled(n, k + 1, 1.0 / (k + 1) as f64);
        let degrees: Vec<u32> = (0..n as u32).map(|i| i % 11 + 1).collect();
        let report = build_report(&w, &degrees, DEFAULT_BUCKETS, 0, 0).unwrap();
        assert_eq!(report.num_steps, 7);
        for row in &report.rows {
            assert!(row.relative.as_ref().unwrap().iter().all(|&v| v == 1.0));
            let total: f64 = row.mean.as_ref().unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bucket_and_round_trip() {
        let w = Matrix::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let buckets = parse_buckets("1-4,5-8,9-12").unwrap();
        let report = build_report(&w, &[1, 2, 6], &buckets, 0, 0).unwrap();
        assert_eq!(report.rows[2].nodes, 0);
        assert!(report.rows[2].mean.is_none());
        let csv = report.to_csv();
        assert!(csv.contains("9-12,0,mean,,\n"));
        let back = AttentionReport::parse_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.rows[0].mean, Some(vec![0.375, 0.625]));
        assert_eq!(back.rows[0].relative, Some(vec![0.6, 1.0]));
    }

    #[test]
    fn bad_buckets() {
        for s in ["4", "5-1", "a-b", ""] {
            assert!(s.parse::<DegreeBucket>().is_err(), "{s}");
        }
    }
}
