//! The per-round metrics file: comma-separated, one row per (seed, round).
//!
//! Floats are printed with 9 significant digits in the shortest of fixed or
//! exponent notation, so reading a file back and writing it again gives
//! the same bytes.

use std::io::{Read, Write};

use fedsa_core::fed::{Algorithm, RoundMetrics};
use thiserror::Error;

pub const HEADER: [&str; 9] = [
    "seed",
    "round",
    "algorithm",
    "mean_accuracy",
    "min_accuracy",
    "max_accuracy",
    "global_proto_mean_pairwise_dist",
    "mean_intra_class_variance",
    "d_global",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics file: expected header {expected:?}, found {found:?}")]
    Header { expected: Vec<String>, found: Vec<String> },
    #[error("metrics file line {line}: bad {column} value `{value}`")]
    Value { line: u64, column: &'static str, value: String },
    #[error("metrics file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub algorithm: Algorithm,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub global_proto_mean_pairwise_dist: f64,
    pub mean_intra_class_variance: f64,
    pub d_global: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, m: &RoundMetrics) -> Self {
        Self {
            seed,
            round: m.round,
            algorithm: m.algorithm,
            mean_accuracy: m.mean_accuracy,
            min_accuracy: m.min_accuracy,
            max_accuracy: m.max_accuracy,
            global_proto_mean_pairwise_dist: m.global_proto_mean_pairwise_dist,
            mean_intra_class_variance: m.mean_intra_class_variance,
            d_global: m.d_global,
        }
    }

    fn record(&self) -> [String; 9] {
        [
            self.seed.to_string(),
            self.round.to_string(),
            self.algorithm.name().to_owned(),
            format_sig9(self.mean_accuracy),
            format_sig9(self.min_accuracy),
            format_sig9(self.max_accuracy),
            format_sig9(self.global_proto_mean_pairwise_dist),
            format_sig9(self.mean_intra_class_variance),
            format_sig9(self.d_global),
        ]
    }
}

fn strip_fraction_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `x` rounded to 9 significant digits, formatted like C's `%.9g` but with
/// a plain exponent (`1.5e-7`, not `1.5e-07`).
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        format!("{}e{exp}", strip_fraction_zeros(mantissa))
    } else {
        let decimals = (8 - exp) as usize;
        strip_fraction_zeros(&format!("{x:.decimals$}")).to_owned()
    }
}

/// Streams rows to a writer, flushing after each one so an aborted run
/// leaves every completed round on disk.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(writer: W) -> Result<Self, MetricsError> {
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        inner.write_record(HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        self.inner.write_record(row.record())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W, MetricsError> {
        self.inner.into_inner().map_err(|e| MetricsError::Io(e.into_error()))
    }
}

pub fn to_string(rows: &[MetricsRow]) -> Result<String, MetricsError> {
    let mut w = MetricsWriter::new(Vec::new())?;
    for r in rows {
        w.write(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?).expect("ASCII output"))
}

pub fn read<R: Read>(reader: R) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != HEADER {
        return Err(MetricsError::Header {
            expected: HEADER.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |i: usize| MetricsError::Value {
            line,
            column: HEADER[i],
            value: field(i).to_owned(),
        };
        let float = |i: usize| field(i).parse::<f64>().map_err(|_| bad(i));
        rows.push(MetricsRow {
            seed: field(0).parse().map_err(|_| bad(0))?,
            round: field(1).parse().map_err(|_| bad(1))?,
            algorithm: field(2).parse().map_err(|_| bad(2))?,
            mean_accuracy: float(3)?,
            min_accuracy: float(4)?,
            max_accuracy: float(5)?,
            global_proto_mean_pairwise_dist: float(6)?,
            mean_intra_class_variance: float(7)?,
            d_global: float(8)?,
        });
    }
    Ok(rows)
}
