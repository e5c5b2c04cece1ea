//! Numeric CSV tables with a header row.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Width { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column:?}: value is not finite")]
    NotFinite { row: usize, column: String },
    #[error("no column named {0:?}")]
    MissingColumn(String),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("table has no data rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A header row and finite numeric cells, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, TableError> {
        for (i, h) in headers.iter().enumerate() {
            if headers[..i].contains(h) {
                return Err(TableError::DuplicateColumn(h.clone()));
            }
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(TableError::Width {
                    row: r + 2,
                    expected: headers.len(),
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(TableError::NotFinite {
                    row: r + 2,
                    column: headers[c].clone(),
                });
            }
        }
        Ok(Table { headers, rows })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, TableError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    }

    /// The named columns as an `N × k` tensor, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Tensor, TableError> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<Vec<_>, _>>()?;
        let data = self.rows.iter().flat_map(|r| idx.iter().map(|&i| r[i])).collect();
        Ok(Tensor::from_vec(self.rows.len(), idx.len(), data).expect("sized"))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rows).unwrap_or_else(|_| Tensor::zeros(0, self.headers.len()))
    }

    pub fn from_tensor(headers: Vec<String>, t: &Tensor) -> Result<Self, TableError> {
        Table::new(headers, t.to_rows())
    }

    /// Parses CSV text. Errors name the 1-based file row (the header is
    /// row 1) and the column.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, TableError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => TableError::Width {
                    row,
                    expected: *expected_len as usize,
                    found: *len as usize,
                },
                _ => TableError::Csv(e),
            })?;
            let values = rec
                .iter()
                .zip(&headers)
                .map(|(v, h)| {
                    v.parse::<f64>().map_err(|_| TableError::Parse {
                        row,
                        column: h.clone(),
                        value: v.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(values);
        }
        if rows.is_empty() {
            return Err(TableError::Empty);
        }
        Table::new(headers, rows)
    }

    pub fn read(path: &Path) -> Result<Self, TableError> {
        let file = File::open(path).map_err(|source| TableError::Open {
            path: path.display().to_string(),
            source,
        })?;
        Table::from_reader(file)
    }

    /// Writes with shortest round-trip float formatting.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), TableError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush().map_err(|e| TableError::Csv(e.into()))?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), TableError> {
        let file = File::create(path).map_err(|source| TableError::Open {
            path: path.display().to_string(),
            source,
        })?;
        self.to_writer(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let t = Table::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, -3.0], vec![1.0 / 3.0, 1e-300]],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        assert_eq!(Table::from_reader(&buf[..]).unwrap(), t);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let err = Table::from_reader("x,y\n1,2\n3,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::Parse { row: 3, ref column, .. } if column == "y"));
        assert!(err.to_string().contains("row 3"));
        let err = Table::from_reader("x,y\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::Width { row: 3, .. }));
        let err = Table::from_reader("x,y\n1,nan\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::NotFinite { row: 2, .. }));
    }

    #[test]
    fn select_by_name() {
        let t = Table::from_reader("a,b,c\n1,2,3\n4,5,6\n".as_bytes()).unwrap();
        let s = t.select(&["c".into(), "a".into()]).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0, 6.0, 4.0]);
        assert!(matches!(t.select(&["z".into()]), Err(TableError::MissingColumn(_))));
    }
}
