use serde::{Deserialize, Serialize};

use super::normalize::{NormKind, NormalizationSpec};
use super::table::{SeriesTable, Target};
use super::windows::{make_windows, split_indices, time_covariates, WindowSample, WindowSpec};
use crate::error::DataError;

/// How a table becomes train/validation/test windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub conditioning: usize,
    pub horizon: usize,
    pub stride: usize,
    pub train_frac: f64,
    pub normalization: NormKind,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            conditioning: 64,
            horizon: 10,
            stride: 1,
            train_frac: 0.8,
            normalization: NormKind::MinMax,
        }
    }
}

impl PrepConfig {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            conditioning: self.conditioning,
            horizon: self.horizon,
            stride: self.stride,
        }
    }
}

/// Normalized windows ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub target: Target,
    pub norm: NormalizationSpec,
    pub normalized: SeriesTable,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub cov_dim: usize,
    pub cov_names: Vec<String>,
}

/// Windows the table, splits chronologically, fits normalization on the rows
/// covered by training windows, and rebuilds the windows in normalized units.
pub fn prepare(table: &SeriesTable, target: Target, cfg: &PrepConfig) -> Result<PreparedData, DataError> {
    let spec = cfg.window_spec();
    let raw = make_windows(table, target, spec)?;
    let idx = split_indices(&raw, cfg.train_frac)?;
    let train_end = idx.train.iter().map(|&i| raw[i].end()).max().unwrap_or(0);
    let norm = NormalizationSpec::fit(table, cfg.normalization, 0..train_end)?;
    let normalized = norm.normalize_table(table)?;
    let windows = make_windows(&normalized, target, spec)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    let cov = time_covariates(&normalized);
    Ok(PreparedData {
        target,
        train: pick(&idx.train),
        val: pick(&idx.val),
        test: pick(&idx.test),
        norm,
        normalized,
        cov_dim: cov.dim,
        cov_names: cov.names,
    })
}
