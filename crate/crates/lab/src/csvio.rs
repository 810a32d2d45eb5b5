//! CSV artifacts.
//!
//! * `metrics.csv`: one row per update, columns [`MetricRow::COLUMNS`].
//! * `corr.csv`: `snapshot_step, correlation, embed_kind`; undefined
//!   correlations are written as `nan`.
//! * `pairwise_<step>.csv`: the K x K reward-difference matrix, no header.
//! * comparison CSV: `step, algo, mean, min, max`.
//!
//! Floats use 17 significant digits so they read back bit-exactly.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use curio_core::diagnostics::PairwiseMatrix;
use curio_core::trainer::{MetricRow, Snapshot};

use crate::error::{LabError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CORR_FILE: &str = "corr.csv";
pub const CORR_COLUMNS: [&str; 3] = ["snapshot_step", "correlation", "embed_kind"];
pub const COMPARISON_COLUMNS: [&str; 5] = ["step", "algo", "mean", "min", "max"];

pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

pub fn pairwise_file(step: usize) -> String {
    format!("pairwise_{step}.csv")
}

pub struct TableWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl TableWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(LabError::io(path))?;
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        if !header.is_empty() {
            inner.write_record(header).map_err(LabError::csv(path))?;
        }
        Ok(TableWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(LabError::csv(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(LabError::io(&self.path))
    }
}

pub fn metric_fields(row: &MetricRow) -> Vec<String> {
    let mut f = vec![row.step.to_string()];
    f.extend(row.values().iter().map(|v| fmt_float(*v)));
    f
}

pub fn metrics_writer(path: &Path) -> Result<TableWriter> {
    TableWriter::create(path, &MetricRow::COLUMNS)
}

pub fn corr_writer(path: &Path) -> Result<TableWriter> {
    TableWriter::create(path, &CORR_COLUMNS)
}

pub fn corr_rows(snapshot: &Snapshot) -> Vec<[String; 3]> {
    snapshot
        .correlations
        .iter()
        .map(|(kind, c)| {
            [
                snapshot.step.to_string(),
                fmt_float(c.unwrap_or(f64::NAN)),
                (*kind).to_string(),
            ]
        })
        .collect()
}

pub fn write_pairwise(path: &Path, m: &PairwiseMatrix) -> Result<()> {
    let mut w = TableWriter::create(path, &[])?;
    for r in m.rows() {
        w.row(r.iter().map(|v| fmt_float(*v)))?;
    }
    w.finish()
}

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(LabError::io(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(headers).from_reader(file))
}

fn check_header(path: &Path, r: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let h = r.headers().map_err(LabError::csv(path))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(LabError::format(
            path,
            format!("expected columns {expected:?}, found {:?}", h.iter().collect::<Vec<_>>()),
        ));
    }
    Ok(())
}

fn field_f64(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<f64> {
    rec.get(i)
        .and_then(parse_float)
        .ok_or_else(|| LabError::format(path, format!("bad float in column {i}: {rec:?}")))
}

fn field_usize(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<usize> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| LabError::format(path, format!("bad integer in column {i}: {rec:?}")))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = reader(path, true)?;
    check_header(path, &mut r, &MetricRow::COLUMNS)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(LabError::csv(path))?;
        let f = |i| field_f64(path, &rec, i);
        rows.push(MetricRow {
            step: field_usize(path, &rec, 0)?,
            episode_return_mean: f(1)?,
            intrinsic_raw_mean: f(2)?,
            intrinsic_raw_std: f(3)?,
            predictor_loss: f(4)?,
            policy_loss: f(5)?,
            value_loss: f(6)?,
            entropy: f(7)?,
        });
    }
    Ok(rows)
}

/// One `corr.csv` record.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrRecord {
    pub step: usize,
    pub correlation: Option<f64>,
    pub embed_kind: String,
}

pub fn read_corr(path: &Path) -> Result<Vec<CorrRecord>> {
    let mut r = reader(path, true)?;
    check_header(path, &mut r, &CORR_COLUMNS)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(LabError::csv(path))?;
        let c = field_f64(path, &rec, 1)?;
        out.push(CorrRecord {
            step: field_usize(path, &rec, 0)?,
            correlation: (!c.is_nan()).then_some(c),
            embed_kind: rec.get(2).unwrap_or_default().to_string(),
        });
    }
    Ok(out)
}

pub fn read_pairwise(path: &Path) -> Result<PairwiseMatrix> {
    let mut r = reader(path, false)?;
    let mut data = Vec::new();
    let mut k = 0;
    for rec in r.records() {
        let rec = rec.map_err(LabError::csv(path))?;
        for i in 0..rec.len() {
            data.push(field_f64(path, &rec, i)?);
        }
        k += 1;
    }
    PairwiseMatrix::from_rows(k, data).map_err(|e| LabError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bitwise() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456.789, 0.0, f64::MAX] {
            assert_eq!(parse_float(&fmt_float(v)).unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_float(f64::NAN), "nan");
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let row = MetricRow {
            step: 1024,
            episode_return_mean: 0.5,
            intrinsic_raw_mean: 1.0 / 3.0,
            intrinsic_raw_std: 0.25,
            predictor_loss: 0.125,
            policy_loss: -0.01,
            value_loss: 0.2,
            entropy: 1.6,
        };
        let mut w = metrics_writer(&p).unwrap();
        w.row(metric_fields(&row)).unwrap();
        w.finish().unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![row]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,episode_return_mean,intrinsic_raw_mean,"));
    }

    #[test]
    fn wrong_header_names_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "step,ret\n1,2\n").unwrap();
        let e = read_metrics(&p).unwrap_err().to_string();
        assert!(e.contains("episode_return_mean"), "{e}");
    }

    #[test]
    fn pairwise_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(pairwise_file(5));
        let m = curio_core::diagnostics::reward_diff_matrix(&[0.1, 0.7, 0.3]).unwrap();
        write_pairwise(&p, &m).unwrap();
        assert_eq!(read_pairwise(&p).unwrap(), m);
    }
}
