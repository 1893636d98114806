//! Autoregressive recurrent likelihood model.
//!
//! At step `t` the LSTM consumes the previous target `z[t-1]` together with
//! an embedding of the covariates `x[t]`, and a likelihood head maps the
//! hidden state to distribution parameters. Training is teacher-forced over
//! the whole window; forecasting feeds true targets through the conditioning
//! range and then feeds each sampled value back in as the next input.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{summarize_samples, DataDims, ForecastOptions, ForecastResult, Forecaster, ModelKind, ModelSpec, MIN_SCALE, REPORT_LEVELS};
use crate::data::WindowSample;
use crate::error::{ModelError, Result};
use crate::numcore::{Ctx, Linear, LstmCell, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    #[default]
    Gaussian,
    /// For non-negative integer targets only.
    NegBin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepArConfig {
    pub hidden: usize,
    pub covariate_embedding: usize,
    pub likelihood: Likelihood,
}

impl Default for DeepArConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            covariate_embedding: 8,
            likelihood: Likelihood::Gaussian,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeepAr {
    cfg: DeepArConfig,
    dims: DataDims,
    store: ParamStore,
    embed: Linear,
    cell: LstmCell,
    loc_head: Linear,
    scale_head: Linear,
}

/// Distribution parameters for one step of a batch (column vectors).
struct StepParams {
    loc: Var,
    scale: Var,
}

impl DeepAr {
    pub fn new<R: Rng + ?Sized>(cfg: DeepArConfig, dims: DataDims, rng: &mut R) -> Result<Self> {
        if cfg.hidden == 0 || cfg.covariate_embedding == 0 {
            return Err(ModelError::Config("deepar hidden and covariate_embedding must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "deepar.embed", dims.cov_dim.max(1), cfg.covariate_embedding, true, rng)?;
        let cell = LstmCell::new(&mut store, "deepar.lstm", 1 + cfg.covariate_embedding, cfg.hidden, rng)?;
        let loc_head = Linear::new(&mut store, "deepar.head.loc", cfg.hidden, 1, true, rng)?;
        let scale_head = Linear::new(&mut store, "deepar.head.scale", cfg.hidden, 1, true, rng)?;
        Ok(Self {
            cfg,
            dims,
            store,
            embed,
            cell,
            loc_head,
            scale_head,
        })
    }

    pub fn config(&self) -> &DeepArConfig {
        &self.cfg
    }

    /// Head parameter ids: `(loc weight, loc bias, scale weight, scale bias)`.
    pub fn head_params(&self) -> [crate::numcore::ParamId; 4] {
        [
            self.loc_head.w,
            self.loc_head.b.expect("bias"),
            self.scale_head.w,
            self.scale_head.b.expect("bias"),
        ]
    }

    fn covariate_input(&self, ctx: &mut Ctx, rows: Vec<f64>, n: usize) -> Result<Var> {
        let cov = if self.dims.cov_dim == 0 {
            ctx.tape.constant(Tensor::zeros(&[n, 1]))
        } else {
            ctx.tape.constant(Tensor::matrix(n, self.dims.cov_dim, rows)?)
        };
        let e = self.embed.forward(ctx, cov)?;
        Ok(ctx.tape.tanh(e)?)
    }

    /// Advances the recurrence by one step for `n` rows.
    fn step(&self, ctx: &mut Ctx, prev_z: Var, cov_rows: Vec<f64>, n: usize, h: Var, c: Var) -> Result<(Var, Var, StepParams)> {
        let emb = self.covariate_input(ctx, cov_rows, n)?;
        let input = ctx.tape.concat_cols(&[prev_z, emb])?;
        let (h, c) = self.cell.step(ctx, input, h, c)?;
        let loc = self.loc_head.forward(ctx, h)?;
        let raw_scale = self.scale_head.forward(ctx, h)?;
        let scale = ctx.tape.softplus(raw_scale)?;
        let scale = ctx.tape.add_scalar(scale, MIN_SCALE)?;
        let loc = match self.cfg.likelihood {
            Likelihood::Gaussian => loc,
            Likelihood::NegBin => {
                let m = ctx.tape.softplus(loc)?;
                ctx.tape.add_scalar(m, MIN_SCALE)?
            }
        };
        Ok((h, c, StepParams { loc, scale }))
    }

    /// Teacher-forced negative log-likelihood over every step of the batch.
    pub fn unroll_train(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        let n = batch.len();
        if n == 0 {
            return Err(ModelError::Config("empty batch".into()));
        }
        let total = batch[0].total_len();
        let zs: Vec<Vec<f64>> = batch.iter().map(|w| w.z_full()).collect();
        if self.cfg.likelihood == Likelihood::NegBin {
            if let Some(v) = zs.iter().flatten().find(|v| **v < 0.0 || v.fract() != 0.0) {
                return Err(ModelError::Config(format!(
                    "negative binomial likelihood needs non-negative integer targets, found {v}"
                )));
            }
        }
        let hs = self.cfg.hidden;
        let mut h = ctx.tape.constant(Tensor::zeros(&[n, hs]));
        let mut c = ctx.tape.constant(Tensor::zeros(&[n, hs]));
        let mut locs = Vec::with_capacity(total);
        let mut scales = Vec::with_capacity(total);
        for t in 0..total {
            let prev: Vec<f64> = zs.iter().map(|z| if t == 0 { 0.0 } else { z[t - 1] }).collect();
            let prev = ctx.tape.constant(Tensor::matrix(n, 1, prev)?);
            let cov: Vec<f64> = batch.iter().flat_map(|w| w.covariate(t).iter().copied()).collect();
            let (h2, c2, p) = self.step(ctx, prev, cov, n, h, c).map_err(|e| match e {
                ModelError::Num(crate::NumError::NonFinite { .. }) => ModelError::NanLoss { step: t },
                other => other,
            })?;
            h = h2;
            c = c2;
            locs.push(p.loc);
            scales.push(p.scale);
        }
        let loc = ctx.tape.concat_cols(&locs)?;
        let scale = ctx.tape.concat_cols(&scales)?;
        let target = ctx.tape.constant(Tensor::matrix(n, total, zs.concat())?);
        let loss = match self.cfg.likelihood {
            Likelihood::Gaussian => ctx.tape.gaussian_nll(target, loc, scale)?,
            Likelihood::NegBin => ctx.tape.negbin_nll(target, loc, scale)?,
        };
        let v = ctx.tape.value(loss).item();
        if !v.is_finite() {
            return Err(ModelError::NanLoss { step: total });
        }
        Ok(loss)
    }

    /// Runs the conditioning range with true targets and then rolls out
    /// `n_paths` trajectories over the prediction range. `draw(path, step,
    /// loc, scale)` supplies each sampled value.
    pub fn rollout<D>(&self, sample: &WindowSample, n_paths: usize, mut draw: D) -> Result<Vec<Vec<f64>>>
    where
        D: FnMut(usize, usize, f64, f64) -> f64,
    {
        let t0 = sample.conditioning_len();
        let horizon = sample.horizon();
        let hs = self.cfg.hidden;
        let mut ctx = Ctx::new(&self.store, false);
        let mut h = ctx.tape.constant(Tensor::zeros(&[1, hs]));
        let mut c = ctx.tape.constant(Tensor::zeros(&[1, hs]));
        for t in 0..t0 {
            let prev = if t == 0 { 0.0 } else { sample.z_conditioning[t - 1] };
            let prev = ctx.tape.constant(Tensor::matrix(1, 1, vec![prev])?);
            let (h2, c2, _) = self.step(&mut ctx, prev, sample.covariate(t).to_vec(), 1, h, c)?;
            h = h2;
            c = c2;
        }
        let hv = ctx.tape.value(h).data().to_vec();
        let cv = ctx.tape.value(c).data().to_vec();
        // fresh tape so the fan-out does not keep the conditioning graph alive
        let mut ctx = Ctx::new(&self.store, false);
        let mut h = ctx.tape.constant(Tensor::matrix(n_paths, hs, hv.repeat(n_paths))?);
        let mut c = ctx.tape.constant(Tensor::matrix(n_paths, hs, cv.repeat(n_paths))?);
        let mut prev_vals = vec![*sample.z_conditioning.last().expect("conditioning >= 1"); n_paths];
        let mut paths = vec![Vec::with_capacity(horizon); n_paths];
        for step in 0..horizon {
            let prev = ctx.tape.constant(Tensor::matrix(n_paths, 1, prev_vals.clone())?);
            let cov = sample.covariate(t0 + step).repeat(n_paths);
            let (h2, c2, p) = self.step(&mut ctx, prev, cov, n_paths, h, c)?;
            h = h2;
            c = c2;
            let locs = ctx.tape.value(p.loc).data().to_vec();
            let scales = ctx.tape.value(p.scale).data().to_vec();
            for (path, out) in paths.iter_mut().enumerate() {
                let z = draw(path, step, locs[path], scales[path]);
                out.push(z);
                prev_vals[path] = z;
            }
        }
        Ok(paths)
    }

    /// Draws from the likelihood with one independent stream per trajectory.
    pub fn sample_trajectories(&self, sample: &WindowSample, opts: &ForecastOptions) -> Result<Vec<Vec<f64>>> {
        if opts.n_samples == 0 {
            return Err(ModelError::Config("n_samples must be >= 1".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..opts.n_samples)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let likelihood = self.cfg.likelihood;
        let noise = opts.noise_scale;
        self.rollout(sample, opts.n_samples, |path, _, loc, scale| {
            if noise == 0.0 {
                return loc;
            }
            let rng = &mut rngs[path];
            match likelihood {
                Likelihood::Gaussian => {
                    let e: f64 = StandardNormal.sample(rng);
                    loc + noise * scale * e
                }
                Likelihood::NegBin => sample_negbin(loc, scale, rng),
            }
        })
    }
}

/// Gamma-Poisson draw from NB(mean `mu`, shape `alpha`).
pub fn sample_negbin<R: Rng + ?Sized>(mu: f64, alpha: f64, rng: &mut R) -> f64 {
    let shape = 1.0 / alpha;
    let rate = Gamma::new(shape, mu * alpha).expect("positive gamma parameters").sample(rng);
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng)
}

impl Forecaster for DeepAr {
    fn kind(&self) -> ModelKind {
        ModelKind::DeepAr
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::DeepAr(self.cfg.clone())
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

    fn loss(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        self.unroll_train(ctx, batch)
    }

    fn forecast(&self, sample: &WindowSample, opts: &ForecastOptions) -> Result<ForecastResult> {
        let paths = self.sample_trajectories(sample, opts)?;
        Ok(summarize_samples(paths, &REPORT_LEVELS))
    }

    fn sample_path(&self, sample: &WindowSample, seed: u64, noise_scale: f64) -> Result<Vec<f64>> {
        let opts = ForecastOptions {
            n_samples: 1,
            seed,
            noise_scale,
        };
        Ok(self.sample_trajectories(sample, &opts)?.remove(0))
    }
}
