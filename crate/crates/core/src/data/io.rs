use std::fs;
use std::path::Path;

use super::series::TimeSeries;
use super::{DataError, Result};

/// Column selection for ageing CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub time_column: String,
    pub target_column: String,
    /// Covariate columns to keep; `None` keeps every other column.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time_column: "time_h".into(),
            target_column: "Utot_V".into(),
            covariates: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub series: TimeSeries,
    /// Data rows skipped because a selected cell was missing or not a number.
    pub dropped_rows: usize,
    /// First `#preprocessed ...` comment line, if the file carries one.
    pub marker: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_preprocessed_marker(text: &str) -> Option<String> {
    text.lines()
        .map(str::trim)
        .take_while(|l| l.starts_with('#') || l.is_empty())
        .find(|l| l.starts_with("#preprocessed"))
        .map(str::to_string)
}

/// Parses an ageing CSV: header row, `.` decimals, `#` comment lines.
///
/// The series keeps the time column out of its channels; the target comes
/// first followed by the covariates in file (or schema) order.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let marker = read_preprocessed_marker(&text);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("missing mandatory column `{name}`")))
    };
    let time_col = find(&schema.time_column)?;
    let target_col = find(&schema.target_column)?;
    let covariate_cols: Vec<usize> = match &schema.covariates {
        Some(list) => list.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&c| c != time_col && c != target_col).collect(),
    };
    let mut columns = vec![target_col];
    columns.extend(covariate_cols);
    let names: Vec<String> = columns.iter().map(|&c| header[c].clone()).collect();

    let mut time = Vec::new();
    let mut values = Vec::new();
    let mut source_rows = Vec::new();
    let mut dropped = 0;
    for (row_index, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let cell = |c: usize| -> Option<f64> {
            record.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite())
        };
        let parsed: Option<Vec<f64>> = std::iter::once(time_col).chain(columns.iter().copied()).map(cell).collect();
        match parsed {
            Some(row) => {
                time.push(row[0]);
                values.extend_from_slice(&row[1..]);
                source_rows.push(row_index);
            }
            None => dropped += 1,
        }
    }
    if time.is_empty() {
        return Err(DataError::Empty("no parseable data rows"));
    }
    if let Some(i) = super::series::first_non_increasing(&time) {
        return Err(DataError::NonMonotone { row: source_rows[i] });
    }
    let series = TimeSeries::with_target_index(time, names, values, 0)?;
    Ok(Ingested {
        series,
        dropped_rows: dropped,
        marker,
    })
}

/// Writes `time_column` then every channel, optionally preceded by one
/// comment line. Numbers use the shortest representation that round-trips.
pub fn write_csv(series: &TimeSeries, time_column: &str, comment: Option<&str>, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(time_column);
    for n in series.names() {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for t in 0..series.len() {
        out.push_str(&series.time()[t].to_string());
        for v in series.row(t) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "time_h,Utot_V,I_A\n0.0,3.3,70\n0.1,3.29,70.5\n0.2,3.28,69.9\n");
        let ing = ingest_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(ing.series.len(), 3);
        assert_eq!(ing.dropped_rows, 0);
        assert_eq!(ing.series.names(), &["Utot_V".to_string(), "I_A".to_string()]);
        assert_eq!(ing.series.target_series(), vec![3.3, 3.29, 3.28]);
        assert!(ing.marker.is_none());
    }

    #[test]
    fn missing_target_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "time_h,U1_V\n0,1\n");
        let err = ingest_csv(&p, &CsvSchema::default()).unwrap_err();
        assert!(matches!(&err, DataError::Schema(m) if m.contains("Utot_V")), "{err}");
    }

    #[test]
    fn text_cell_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "time_h,Utot_V\n0,3.3\n0.1,oops\n0.2,3.2\n");
        let ing = ingest_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(ing.dropped_rows, 1);
        assert_eq!(ing.series.len(), 2);
    }

    #[test]
    fn non_monotone_time_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "time_h,Utot_V\n0,3.3\n0.2,3.2\n0.1,3.1\n");
        assert!(matches!(
            ingest_csv(&p, &CsvSchema::default()),
            Err(DataError::NonMonotone { row: 2 })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = ingest_csv(Path::new("/nonexistent/x.csv"), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn write_then_ingest_round_trip_with_marker() {
        let dir = tempfile::tempdir().unwrap();
        let ts = TimeSeries::new(
            vec![0.05, 0.15],
            vec!["Utot_V".into(), "I_A".into()],
            vec![3.3, 70.0, 3.2999999, 70.25],
            "Utot_V",
        )
        .unwrap();
        let p = dir.path().join("o.csv");
        write_csv(&ts, "time_h", Some("#preprocessed interval=0.1h ma=15"), &p).unwrap();
        let ing = ingest_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(ing.series, ts);
        assert_eq!(ing.marker.as_deref(), Some("#preprocessed interval=0.1h ma=15"));
    }

    #[test]
    fn explicit_covariate_selection() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "time_h,I_A,Utot_V,TinH2_C\n0,70,3.3,20\n1,71,3.2,21\n");
        let schema = CsvSchema {
            covariates: Some(vec!["TinH2_C".into()]),
            ..CsvSchema::default()
        };
        let ing = ingest_csv(&p, &schema).unwrap();
        assert_eq!(ing.series.names(), &["Utot_V".to_string(), "TinH2_C".to_string()]);
        assert_eq!(ing.series.row(1), &[3.2, 21.0]);
    }
}
