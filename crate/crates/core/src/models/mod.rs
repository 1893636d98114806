//! Forecasting models and the interface shared by training, evaluation and
//! synthesis.

pub mod deepar;
pub mod deeptcn;
pub mod nbeats;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{ModelError, Result};
use crate::numcore::{Ctx, ParamStore, Var};

pub use deepar::{DeepAr, DeepArConfig, Likelihood};
pub use deeptcn::{DeepTcn, DeepTcnConfig, TcnHead, TcnLoss};
pub use nbeats::{NBeats, NBeatsConfig, NBeatsTrace};

/// Lower bound added to every predicted scale so likelihoods stay finite.
pub const MIN_SCALE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    DeepAr,
    NBeats,
    DeepTcn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::DeepAr, ModelKind::NBeats, ModelKind::DeepTcn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DeepAr => "deepar",
            ModelKind::NBeats => "nbeats",
            ModelKind::DeepTcn => "deeptcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model architecture and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    DeepAr(DeepArConfig),
    NBeats(NBeatsConfig),
    DeepTcn(DeepTcnConfig),
}

impl ModelSpec {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::DeepAr => ModelSpec::DeepAr(DeepArConfig::default()),
            ModelKind::NBeats => ModelSpec::NBeats(NBeatsConfig::default()),
            ModelKind::DeepTcn => ModelSpec::DeepTcn(DeepTcnConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::DeepAr(_) => ModelKind::DeepAr,
            ModelSpec::NBeats(_) => ModelKind::NBeats,
            ModelSpec::DeepTcn(_) => ModelKind::DeepTcn,
        }
    }

    /// Instantiates freshly initialized parameters.
    pub fn build(&self, dims: DataDims, seed: u64) -> Result<AnyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self {
            ModelSpec::DeepAr(c) => AnyModel::DeepAr(DeepAr::new(c.clone(), dims, &mut rng)?),
            ModelSpec::NBeats(c) => AnyModel::NBeats(NBeats::new(c.clone(), dims, &mut rng)?),
            ModelSpec::DeepTcn(c) => AnyModel::DeepTcn(DeepTcn::new(c.clone(), dims, &mut rng)?),
        })
    }
}

/// Data-dependent sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub cov_dim: usize,
    pub conditioning: usize,
    pub horizon: usize,
}

/// Sampling controls for probabilistic forecasts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Multiplies the sampling noise; 0 gives the greedy mean path.
    pub noise_scale: f64,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            n_samples: 100,
            seed: 0,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub level: f64,
    pub values: Vec<f64>,
}

/// Forecast over one prediction window (normalized units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Point estimate per horizon step.
    pub point: Vec<f64>,
    pub quantiles: Vec<QuantileBand>,
    /// Monte Carlo trajectories, `[n_samples][horizon]`.
    pub samples: Option<Vec<Vec<f64>>>,
}

impl ForecastResult {
    pub fn quantile(&self, level: f64) -> Option<&[f64]> {
        self.quantiles
            .iter()
            .find(|q| (q.level - level).abs() < 1e-12)
            .map(|q| q.values.as_slice())
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarizes trajectories into a median point forecast and quantile bands.
pub fn summarize_samples(samples: Vec<Vec<f64>>, levels: &[f64]) -> ForecastResult {
    let horizon = samples.first().map_or(0, Vec::len);
    let mut point = Vec::with_capacity(horizon);
    let mut bands: Vec<QuantileBand> = levels
        .iter()
        .map(|&level| QuantileBand {
            level,
            values: Vec::with_capacity(horizon),
        })
        .collect();
    let mut column = Vec::with_capacity(samples.len());
    for step in 0..horizon {
        column.clear();
        column.extend(samples.iter().map(|s| s[step]));
        column.sort_by(|a, b| a.total_cmp(b));
        point.push(empirical_quantile(&column, 0.5));
        for b in &mut bands {
            b.values.push(empirical_quantile(&column, b.level));
        }
    }
    ForecastResult {
        point,
        quantiles: bands,
        samples: Some(samples),
    }
}

/// Quantile levels reported for sampled forecasts.
pub const REPORT_LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

/// Common interface of the three forecasters.
pub trait Forecaster {
    fn kind(&self) -> ModelKind;
    fn spec(&self) -> ModelSpec;
    fn dims(&self) -> DataDims;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Checks a window matches the sizes the model was built for.
    fn check_window(&self, w: &WindowSample) -> Result<()> {
        let d = self.dims();
        if w.conditioning_len() != d.conditioning || w.horizon() != d.horizon || w.cov_dim != d.cov_dim {
            return Err(ModelError::Config(format!(
                "window (conditioning {}, horizon {}, covariates {}) does not match model {:?}",
                w.conditioning_len(),
                w.horizon(),
                w.cov_dim,
                d
            )));
        }
        Ok(())
    }

    /// Scalar training loss for a batch of windows.
    fn loss(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var>;

    /// Forecast of the prediction range. Only `z_conditioning` and the
    /// covariates of `sample` are read.
    fn forecast(&self, sample: &WindowSample, opts: &ForecastOptions) -> Result<ForecastResult>;

    /// One sampled continuation of the prediction range. Deterministic models
    /// return their point forecast.
    fn sample_path(&self, sample: &WindowSample, seed: u64, noise_scale: f64) -> Result<Vec<f64>>;
}

/// Any of the three forecasters.
#[derive(Clone, Debug)]
pub enum AnyModel {
    DeepAr(DeepAr),
    NBeats(NBeats),
    DeepTcn(DeepTcn),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::DeepAr($m) => $e,
            AnyModel::NBeats($m) => $e,
            AnyModel::DeepTcn($m) => $e,
        }
    };
}

impl Forecaster for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }
    fn spec(&self) -> ModelSpec {
        delegate!(self, m => m.spec())
    }
    fn dims(&self) -> DataDims {
        delegate!(self, m => m.dims())
    }
    fn store(&self) -> &ParamStore {
        delegate!(self, m => m.store())
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        delegate!(self, m => m.store_mut())
    }
    fn check_window(&self, w: &WindowSample) -> Result<()> {
        delegate!(self, m => m.check_window(w))
    }
    fn loss(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        delegate!(self, m => m.loss(ctx, batch))
    }
    fn forecast(&self, sample: &WindowSample, opts: &ForecastOptions) -> Result<ForecastResult> {
        delegate!(self, m => m.forecast(sample, opts))
    }
    fn sample_path(&self, sample: &WindowSample, seed: u64, noise_scale: f64) -> Result<Vec<f64>> {
        delegate!(self, m => m.sample_path(sample, seed, noise_scale))
    }
}
