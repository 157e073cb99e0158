//! Headerless comma-separated matrices with shortest round-trip floats.

use spegc::Tensor2;

use crate::error::{CliError, CliResult};

pub fn parse_matrix(text: &str) -> CliResult<Tensor2> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, cell)| {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    CliError::Input(format!(
                        "row {} column {}: not a number: {cell:?}",
                        i + 1,
                        j + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Input(format!(
                        "row {} column {}: non-finite value",
                        i + 1,
                        j + 1
                    )));
                }
                Ok(v)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CliError::Input(format!(
                    "row {} has {} columns, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input("empty matrix".into()));
    }
    let cols = rows[0].len();
    Ok(Tensor2::from_vec(rows.len(), cols, rows.concat())?)
}

pub fn format_matrix(m: &Tensor2) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
