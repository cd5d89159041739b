//! Minimal delimited-text table reading: a header row naming columns,
//! followed by data rows. Fields are separated by commas or whitespace
//! (detected from the header).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("empty input: no header row")]
    NoHeader,
    #[error("no data rows")]
    NoData,
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: expected {expected} fields, got {got}")]
    FieldCount {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
}

pub struct Table {
    pub columns: Vec<String>,
    /// Raw string fields, row-major.
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Table, TableError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or(TableError::NoHeader)?;
        let comma = header.contains(',');
        let split = |line: &str| -> Vec<String> {
            if comma {
                line.split(',').map(|s| s.trim().to_string()).collect()
            } else {
                line.split_whitespace().map(|s| s.to_string()).collect()
            }
        };
        let columns = split(header);
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields = split(line);
            if fields.len() != columns.len() {
                return Err(TableError::FieldCount {
                    row: i + 2,
                    expected: columns.len(),
                    got: fields.len(),
                });
            }
            rows.push(fields);
        }
        Ok(Table { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize, TableError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    }

    pub fn number(&self, row: usize, col: usize) -> Result<f64, TableError> {
        let value = &self.rows[row][col];
        value.parse::<f64>().map_err(|_| TableError::BadNumber {
            row: row + 2,
            column: self.columns[col].clone(),
            value: value.clone(),
        })
    }
}
