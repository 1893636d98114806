//! Basis-expansion forecaster with doubly residual stacking.
//!
//! Each block runs four ReLU fully connected layers over its input window,
//! projects the last hidden layer linearly to backcast and forecast
//! coefficients, and expands those coefficients over learned basis vectors.
//! Block `l + 1` sees the residual `x_l - backcast_l`; the model forecast is
//! the sum of block forecasts in block order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataDims, ForecastOptions, ForecastResult, Forecaster, ModelKind, ModelSpec};
use crate::data::WindowSample;
use crate::error::{ModelError, Result};
use crate::numcore::{Ctx, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NBeatsConfig {
    pub stacks: usize,
    pub blocks_per_stack: usize,
    pub width: usize,
    /// Lookback length as a multiple of the horizon.
    pub lookback_multiple: usize,
    /// Forecast coefficient count; defaults to the horizon.
    pub forecast_coefficients: Option<usize>,
    /// Backcast coefficient count; defaults to the lookback.
    pub backcast_coefficients: Option<usize>,
}

impl Default for NBeatsConfig {
    fn default() -> Self {
        Self {
            stacks: 3,
            blocks_per_stack: 3,
            width: 64,
            lookback_multiple: 2,
            forecast_coefficients: None,
            backcast_coefficients: None,
        }
    }
}

/// One generic block: FC tower, linear coefficient heads, basis matrices.
#[derive(Clone, Debug)]
pub struct NBeatsBlock {
    pub fc: [Linear; 4],
    pub backcast_head: Linear,
    pub forecast_head: Linear,
    /// `[lookback × backcast_coefficients]`
    pub backcast_basis: ParamId,
    /// `[horizon × forecast_coefficients]`
    pub forecast_basis: ParamId,
}

impl NBeatsBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        lookback: usize,
        horizon: usize,
        width: usize,
        coeffs: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (nb, nf) = coeffs;
        let fc = [
            Linear::new(store, &format!("{name}.fc1"), lookback, width, true, rng)?,
            Linear::new(store, &format!("{name}.fc2"), width, width, true, rng)?,
            Linear::new(store, &format!("{name}.fc3"), width, width, true, rng)?,
            Linear::new(store, &format!("{name}.fc4"), width, width, true, rng)?,
        ];
        let backcast_head = Linear::new(store, &format!("{name}.theta_b"), width, nb, false, rng)?;
        let forecast_head = Linear::new(store, &format!("{name}.theta_f"), width, nf, false, rng)?;
        let backcast_basis = store.add(
            &format!("{name}.basis_b"),
            Tensor::randn(&[lookback, nb], 1.0 / (nb as f64).sqrt(), rng),
        )?;
        let forecast_basis = store.add(
            &format!("{name}.basis_f"),
            Tensor::randn(&[horizon, nf], 1.0 / (nf as f64).sqrt(), rng),
        )?;
        Ok(Self {
            fc,
            backcast_head,
            forecast_head,
            backcast_basis,
            forecast_basis,
        })
    }

    /// `x` is `[B × lookback]`; returns `(backcast [B × lookback], forecast [B × horizon])`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.fc {
            let a = layer.forward(ctx, h)?;
            h = ctx.tape.relu(a)?;
        }
        let theta_b = self.backcast_head.forward(ctx, h)?;
        let theta_f = self.forecast_head.forward(ctx, h)?;
        let vb = ctx.param(self.backcast_basis);
        let vf = ctx.param(self.forecast_basis);
        let vb_t = ctx.tape.transpose(vb)?;
        let vf_t = ctx.tape.transpose(vf)?;
        let backcast = ctx.tape.matmul(theta_b, vb_t)?;
        let forecast = ctx.tape.matmul(theta_f, vf_t)?;
        Ok((backcast, forecast))
    }
}

/// Values flowing through the stack for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct NBeatsTrace {
    pub block_inputs: Vec<Vec<f64>>,
    pub backcasts: Vec<Vec<f64>>,
    pub forecasts: Vec<Vec<f64>>,
    pub forecast: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NBeats {
    cfg: NBeatsConfig,
    dims: DataDims,
    lookback: usize,
    store: ParamStore,
    /// Blocks in stack order.
    blocks: Vec<NBeatsBlock>,
}

impl NBeats {
    pub fn new<R: Rng + ?Sized>(cfg: NBeatsConfig, dims: DataDims, rng: &mut R) -> Result<Self> {
        if cfg.stacks == 0 || cfg.blocks_per_stack == 0 || cfg.width == 0 || cfg.lookback_multiple == 0 {
            return Err(ModelError::Config("nbeats sizes must be >= 1".into()));
        }
        let lookback = cfg.lookback_multiple * dims.horizon;
        if lookback > dims.conditioning {
            return Err(ModelError::Config(format!(
                "nbeats lookback {lookback} ({}x horizon {}) exceeds conditioning length {}",
                cfg.lookback_multiple, dims.horizon, dims.conditioning
            )));
        }
        let nf = cfg.forecast_coefficients.unwrap_or(dims.horizon);
        let nb = cfg.backcast_coefficients.unwrap_or(lookback);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        for s in 0..cfg.stacks {
            for b in 0..cfg.blocks_per_stack {
                blocks.push(NBeatsBlock::new(
                    &mut store,
                    &format!("nbeats.stack{s}.block{b}"),
                    lookback,
                    dims.horizon,
                    cfg.width,
                    (nb, nf),
                    rng,
                )?);
            }
        }
        Ok(Self {
            cfg,
            dims,
            lookback,
            store,
            blocks,
        })
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn blocks(&self) -> &[NBeatsBlock] {
        &self.blocks
    }

    /// Tail of the conditioning range used as model input.
    pub fn lookback_input<'w>(&self, w: &'w WindowSample) -> &'w [f64] {
        &w.z_conditioning[w.conditioning_len() - self.lookback..]
    }

    /// Doubly residual forward pass over `x [B × lookback]`. Returns the model
    /// forecast and the per-block `(input, backcast, forecast)` vars.
    pub fn model_forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Vec<(Var, Var, Var)>)> {
        let mut residual = x;
        let mut total: Option<Var> = None;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (back, fore) = block.forward(ctx, residual)?;
            per_block.push((residual, back, fore));
            total = Some(match total {
                None => fore,
                Some(t) => ctx.tape.add(t, fore)?,
            });
            residual = ctx.tape.sub(residual, back)?;
        }
        Ok((total.expect("at least one block"), per_block))
    }

    /// Evaluation-mode forward pass with every intermediate value.
    pub fn trace(&self, x: &[f64]) -> Result<NBeatsTrace> {
        if x.len() != self.lookback {
            return Err(ModelError::Num(crate::NumError::Shape {
                op: "nbeats input",
                lhs: vec![x.len()],
                rhs: vec![self.lookback],
            }));
        }
        let mut ctx = Ctx::new(&self.store, false);
        let xv = ctx.tape.constant(Tensor::matrix(1, self.lookback, x.to_vec())?);
        let (total, blocks) = self.model_forward(&mut ctx, xv)?;
        let val = |v: Var| ctx.tape.value(v).data().to_vec();
        Ok(NBeatsTrace {
            block_inputs: blocks.iter().map(|b| val(b.0)).collect(),
            backcasts: blocks.iter().map(|b| val(b.1)).collect(),
            forecasts: blocks.iter().map(|b| val(b.2)).collect(),
            forecast: val(total),
        })
    }

    fn input_matrix(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        let data: Vec<f64> = batch.iter().flat_map(|w| self.lookback_input(w).iter().copied()).collect();
        Ok(ctx.tape.constant(Tensor::matrix(batch.len(), self.lookback, data)?))
    }
}

impl Forecaster for NBeats {
    fn kind(&self) -> ModelKind {
        ModelKind::NBeats
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::NBeats(self.cfg.clone())
    }

    fn dims(&self) -> DataDims {
        self.dims
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Mean absolute error of the forecast.
    fn loss(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        let x = self.input_matrix(ctx, batch)?;
        let (forecast, _) = self.model_forward(ctx, x)?;
        let target: Vec<f64> = batch.iter().flat_map(|w| w.z_prediction.iter().copied()).collect();
        let target = ctx.tape.constant(Tensor::matrix(batch.len(), self.dims.horizon, target)?);
        Ok(ctx.tape.l1(forecast, target)?)
    }

    fn forecast(&self, sample: &WindowSample, _opts: &ForecastOptions) -> Result<ForecastResult> {
        let point = self.trace(self.lookback_input(sample))?.forecast;
        Ok(ForecastResult {
            point,
            quantiles: Vec::new(),
            samples: None,
        })
    }

    fn sample_path(&self, sample: &WindowSample, _seed: u64, _noise_scale: f64) -> Result<Vec<f64>> {
        Ok(self.trace(self.lookback_input(sample))?.forecast)
    }
}
