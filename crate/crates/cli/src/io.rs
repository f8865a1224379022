use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2};

/// Input or output failure, reported with exit status 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Decimal with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, InputError> {
    let file = File::open(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| InputError(format!("cannot parse {}: {e}", path.display())))?;
        let row = record
            .iter()
            .filter(|field| !field.is_empty())
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    InputError(format!("{}: line {}: '{field}' is not a number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(InputError(format!("{}: no numeric data", path.display())));
    }
    Ok(rows)
}

/// Reads a dense matrix, one row per line.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>, InputError> {
    let rows = read_rows(path)?;
    let cols = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(InputError(format!(
            "{}: row {} has {} entries, expected {cols}",
            path.display(),
            i + 1,
            r.len()
        )));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.concat()).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

/// Reads a vector written as a single row or a single column.
pub fn read_vector(path: &Path) -> Result<Array1<f64>, InputError> {
    let rows = read_rows(path)?;
    if rows.len() > 1 && rows.iter().any(|r| r.len() != 1) {
        return Err(InputError(format!("{}: expected a single row or a single column", path.display())));
    }
    Ok(Array1::from(rows.concat()))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<(), InputError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))?;
    for row in m.outer_iter() {
        writer
            .write_record(row.iter().map(|v| fmt_f64(*v)))
            .map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), InputError> {
    std::fs::write(path, text).map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))
}

/// `[a, b, c]` from `"a,b,c"`.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("'{x}' is not a number")))
        .collect()
}

pub fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Iteration medians are integers or halves; they print exactly without exponent.
pub fn opt_count(v: Option<f64>) -> String {
    let mut s = String::new();
    if let Some(v) = v {
        let _ = write!(s, "{v}");
    }
    s
}
