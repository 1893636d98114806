use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{Column, SeriesTable, Target};
use crate::error::DataError;

/// Per-step covariates derived from a table.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    /// Row-major `[len × dim]`.
    pub data: Vec<f64>,
    pub dim: usize,
}

impl Covariates {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Auxiliary measured channels used as covariates, in order.
pub const AUX_COLUMNS: [Column; 2] = [Column::Current, Column::Temperature];

/// Step index scaled to [0, 1], cycle ordinal scaled to [0, 1] (0 when there
/// is a single cycle), then current and temperature when present.
pub fn time_covariates(table: &SeriesTable) -> Covariates {
    let len = table.len();
    let segments = table.segments();
    let n_cycles = segments.len();
    let aux: Vec<(Column, &[f64])> = AUX_COLUMNS
        .iter()
        .filter_map(|c| table.column(*c).map(|v| (*c, v)))
        .collect();
    let dim = 2 + aux.len();
    let mut data = Vec::with_capacity(len * dim);
    let mut cycle_of = vec![0usize; len];
    for (k, seg) in segments.iter().enumerate() {
        cycle_of[seg.clone()].iter_mut().for_each(|c| *c = k);
    }
    for (t, &cycle) in cycle_of.iter().enumerate() {
        data.push(t as f64 / (len - 1) as f64);
        data.push(if n_cycles > 1 {
            cycle as f64 / (n_cycles - 1) as f64
        } else {
            0.0
        });
        for (_, v) in &aux {
            data.push(v[t]);
        }
    }
    let mut names = vec!["step_index".to_string(), "cycle_index".to_string()];
    names.extend(aux.iter().map(|(c, _)| c.name().to_string()));
    Covariates { names, data, dim }
}

/// One conditioning + prediction window over a single cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Cycle ordinal the window belongs to.
    pub series_index: usize,
    /// First table row covered by the window.
    pub start: usize,
    pub z_conditioning: Vec<f64>,
    pub z_prediction: Vec<f64>,
    /// Row-major `[T × cov_dim]` covering conditioning and prediction steps.
    pub x_covariates: Vec<f64>,
    pub cov_dim: usize,
}

impl WindowSample {
    pub fn conditioning_len(&self) -> usize {
        self.z_conditioning.len()
    }

    pub fn horizon(&self) -> usize {
        self.z_prediction.len()
    }

    pub fn total_len(&self) -> usize {
        self.conditioning_len() + self.horizon()
    }

    /// Exclusive end row.
    pub fn end(&self) -> usize {
        self.start + self.total_len()
    }

    pub fn covariate(&self, t: usize) -> &[f64] {
        &self.x_covariates[t * self.cov_dim..(t + 1) * self.cov_dim]
    }

    /// Targets over the full window.
    pub fn z_full(&self) -> Vec<f64> {
        let mut z = self.z_conditioning.clone();
        z.extend_from_slice(&self.z_prediction);
        z
    }
}

/// Window shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub conditioning: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.conditioning == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(DataError::Invalid(format!(
                "conditioning, horizon and stride must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Windows that fit in a segment of length `len`.
    pub fn count(&self, len: usize) -> usize {
        let total = self.conditioning + self.horizon;
        if len < total {
            0
        } else {
            (len - total) / self.stride + 1
        }
    }
}

/// Slides windows over every cycle of the table; windows never cross cycles.
pub fn make_windows(table: &SeriesTable, target: Target, spec: WindowSpec) -> Result<Vec<WindowSample>, DataError> {
    spec.validate()?;
    let z = table.require(target.column())?;
    let cov = time_covariates(table);
    let total = spec.conditioning + spec.horizon;
    let mut out = Vec::new();
    for (k, seg) in table.segments().into_iter().enumerate() {
        for w in 0..spec.count(seg.len()) {
            let start = seg.start + w * spec.stride;
            let mid = start + spec.conditioning;
            out.push(WindowSample {
                series_index: k,
                start,
                z_conditioning: z[start..mid].to_vec(),
                z_prediction: z[mid..start + total].to_vec(),
                x_covariates: cov.data[start * cov.dim..(start + total) * cov.dim].to_vec(),
                cov_dim: cov.dim,
            });
        }
    }
    Ok(out)
}

/// Chronological train/validation/test partition, as window indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `floor(n · frac)` training windows; the rest split evenly with the extra
/// one going to validation.
pub fn split_counts(n: usize, train_frac: f64) -> Result<(usize, usize, usize), DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Invalid(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let train = ((n as f64) * train_frac + 1e-9).floor() as usize;
    let rest = n - train.min(n);
    let val = rest.div_ceil(2);
    let test = rest - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(DataError::TooFewWindows(format!(
            "{n} windows with train_frac {train_frac} gives {train}/{val}/{test}"
        )));
    }
    Ok((train, val, test))
}

/// Chronological split. Leading validation (test) windows that share rows
/// with earlier splits are dropped so no window leaks into a later split.
pub fn split_indices(windows: &[WindowSample], train_frac: f64) -> Result<SplitIndices, DataError> {
    let (n_train, n_val, _) = split_counts(windows.len(), train_frac)?;
    let train: Vec<usize> = (0..n_train).collect();
    let train_end = windows[..n_train].iter().map(WindowSample::end).max().unwrap_or(0);
    let val: Vec<usize> = (n_train..n_train + n_val).filter(|&i| windows[i].start >= train_end).collect();
    let val_end = val.iter().map(|&i| windows[i].end()).max().unwrap_or(train_end);
    let test: Vec<usize> = (n_train + n_val..windows.len())
        .filter(|&i| windows[i].start >= val_end.max(train_end))
        .collect();
    if val.is_empty() || test.is_empty() {
        return Err(DataError::TooFewWindows(format!(
            "{} windows leave {}/{}/{} after removing overlaps between splits",
            windows.len(),
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(SplitIndices { train, val, test })
}

/// Splits windows chronologically; `seed` only shuffles the training split.
pub fn split(
    windows: Vec<WindowSample>,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, Vec<WindowSample>), DataError> {
    let idx = split_indices(&windows, train_frac)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    let mut train = pick(&idx.train);
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((train, pick(&idx.val), pick(&idx.test)))
}
