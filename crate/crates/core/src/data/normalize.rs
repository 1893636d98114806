use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::table::{Column, SeriesTable};
use crate::error::DataError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    MinMax,
    ZScore,
    /// Values pass through unchanged (e.g. integer counts).
    None,
}

/// Affine map `(v - offset) / scale` for one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnNorm {
    pub kind: NormKind,
    /// min (minmax) or mean (zscore).
    pub offset: f64,
    /// max - min (minmax) or std (zscore).
    pub scale: f64,
    pub min: f64,
    pub max: f64,
}

impl ColumnNorm {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Per-column normalization statistics, fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub columns: BTreeMap<Column, ColumnNorm>,
}

impl NormalizationSpec {
    /// Fits statistics for every non-time column over `rows`.
    pub fn fit(table: &SeriesTable, kind: NormKind, rows: Range<usize>) -> Result<Self, DataError> {
        if rows.is_empty() || rows.end > table.len() {
            return Err(DataError::Invalid(format!(
                "normalization rows {rows:?} invalid for table of {}",
                table.len()
            )));
        }
        let mut columns = BTreeMap::new();
        for (c, values) in table.columns() {
            if c == Column::Time {
                continue;
            }
            let v = &values[rows.clone()];
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (offset, scale) = match kind {
                NormKind::MinMax => {
                    let range = max - min;
                    (min, if range > 0.0 { range } else { 1.0 })
                }
                NormKind::ZScore => {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                    if !(std > 0.0) {
                        return Err(DataError::ConstantColumn { column: c.name().into() });
                    }
                    (mean, std)
                }
                NormKind::None => (0.0, 1.0),
            };
            columns.insert(
                c,
                ColumnNorm {
                    kind,
                    offset,
                    scale,
                    min,
                    max,
                },
            );
        }
        Ok(Self { columns })
    }

    pub fn get(&self, c: Column) -> Result<&ColumnNorm, DataError> {
        self.columns.get(&c).ok_or_else(|| DataError::AbsentColumn(c.name().into()))
    }

    pub fn normalize_table(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        let mut out = table.clone();
        for (c, n) in &self.columns {
            let v = table.require(*c)?.iter().map(|x| n.apply(*x)).collect();
            out.set_column(*c, v)?;
        }
        Ok(out)
    }

    pub fn denormalize_table(&self, table: &SeriesTable) -> Result<SeriesTable, DataError> {
        let mut out = table.clone();
        for (c, n) in &self.columns {
            let v = table.require(*c)?.iter().map(|x| n.invert(*x)).collect();
            out.set_column(*c, v)?;
        }
        Ok(out)
    }
}

/// Fits on the whole table and returns the normalized copy.
pub fn normalize(table: &SeriesTable, kind: NormKind) -> Result<(SeriesTable, NormalizationSpec), DataError> {
    let spec = NormalizationSpec::fit(table, kind, 0..table.len())?;
    Ok((spec.normalize_table(table)?, spec))
}
