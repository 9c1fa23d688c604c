//! CSV files as model input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use estimator::{FeatureBatch, FeatureValue, InputBatch, Tensor};

use crate::CliError;

/// Separator for multi-valued cells, in both categorical and numeric
/// columns (`a|b|c`, `0.5|1.5`).
pub const MULTI_VALUE_SEPARATOR: char = '|';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    /// Parsed as floats; a column of width `n` holds `n` values per cell.
    Numeric(usize),
    Categorical,
}

/// A whole CSV file held in memory, rows in file order.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvDataset {
    /// Every record must have the header's arity.
    pub fn read(path: &Path) -> Result<CsvDataset, CliError> {
        let data_err = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| data_err(e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| data_err(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| data_err(e.to_string()))?;
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(CsvDataset {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.header.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Config(format!(
                "column `{name}` not found in {} (columns: {})",
                self.path.display(),
                self.header.join(", ")
            ))
        })
    }

    /// Header-driven typing: a column whose every cell parses as numbers is
    /// numeric, with the width of its first row.
    pub fn infer_kind(&self, name: &str) -> Result<ColumnKind, CliError> {
        let i = self.index(name)?;
        let mut width = None;
        for row in &self.rows {
            match parse_numbers(&row[i]) {
                Some(v) if width.is_none_or(|w| w == v.len()) => width = Some(v.len()),
                _ => return Ok(ColumnKind::Categorical),
            }
        }
        Ok(width.map_or(ColumnKind::Categorical, ColumnKind::Numeric))
    }

    fn numeric_column(&self, name: &str, width: usize) -> Result<Tensor, CliError> {
        let i = self.index(name)?;
        let mut data = Vec::with_capacity(self.rows.len() * width);
        for (line, row) in self.rows.iter().enumerate() {
            let values = parse_numbers(&row[i])
                .filter(|v| v.len() == width)
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "{} row {}: column `{name}` needs {width} number(s), got {:?}",
                        self.path.display(),
                        line + 2,
                        row[i]
                    ))
                })?;
            data.extend(values);
        }
        Tensor::new(vec![self.rows.len(), width], data).map_err(|e| CliError::Data(e.to_string()))
    }

    fn categorical_column(&self, name: &str) -> Result<Vec<FeatureValue>, CliError> {
        let i = self.index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|row| {
                FeatureValue::Categorical(
                    row[i]
                        .split(MULTI_VALUE_SEPARATOR)
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect(),
                )
            })
            .collect())
    }

    /// Builds a batch holding `features` and, if given, the label column as
    /// `(csv column, label name, width, vector)`. A vector label has shape
    /// `[n]`, otherwise `[n, width]`.
    pub fn to_batch(
        &self,
        features: &BTreeMap<String, ColumnKind>,
        label: Option<(&str, &str, usize, bool)>,
    ) -> Result<InputBatch, CliError> {
        let mut batch = InputBatch::new();
        for (name, kind) in features {
            batch = match kind {
                ColumnKind::Numeric(width) => {
                    batch.with_dense(name, self.numeric_column(name, *width)?)
                }
                ColumnKind::Categorical => batch.with_feature(
                    name,
                    FeatureBatch::Values(self.categorical_column(name)?),
                ),
            };
        }
        if let Some((column, label_name, width, vector)) = label {
            let mut t = self.numeric_column(column, width)?;
            if vector {
                t = t
                    .reshape(vec![self.rows.len()])
                    .map_err(|e| CliError::Data(e.to_string()))?;
            }
            batch = batch.with_label(label_name, t);
        }
        Ok(batch)
    }
}

fn parse_numbers(cell: &str) -> Option<Vec<f64>> {
    cell.split(MULTI_VALUE_SEPARATOR)
        .map(|s| s.trim().parse::<f64>().ok())
        .collect()
}
