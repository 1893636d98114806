//! Non-autoregressive dilated-convolution forecaster.
//!
//! A stack of residual blocks of causal dilated convolutions encodes the
//! conditioning range into a hidden state `h_t`. One decoder, shared across
//! horizon steps, combines a projection of `h_t` with a nonlinear residual
//! function of the covariates at `t + ω` and emits the distribution
//! parameters for every ω in a single pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{DataDims, ForecastOptions, ForecastResult, Forecaster, ModelKind, ModelSpec, QuantileBand, MIN_SCALE, REPORT_LEVELS};
use crate::data::WindowSample;
use crate::error::{ModelError, Result};
use crate::numcore::{BatchNorm, CausalConv, Ctx, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TcnHead {
    /// Mean and standard deviation per horizon step.
    #[default]
    Gaussian,
    /// One output per quantile level.
    Quantile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcnLoss {
    GaussianNll,
    Pinball,
}

impl TcnHead {
    pub fn matching_loss(self) -> TcnLoss {
        match self {
            TcnHead::Gaussian => TcnLoss::GaussianNll,
            TcnHead::Quantile => TcnLoss::Pinball,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepTcnConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Number of residual blocks; derived from the conditioning length when unset.
    pub depth: Option<usize>,
    pub decoder_width: usize,
    pub head: TcnHead,
    /// Defaults to the loss matching `head`.
    pub loss: Option<TcnLoss>,
    pub quantiles: Vec<f64>,
    /// Predict offsets from the last conditioning value instead of levels.
    pub anchor_last: bool,
}

impl Default for DeepTcnConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 2,
            depth: None,
            decoder_width: 32,
            head: TcnHead::Gaussian,
            loss: None,
            quantiles: vec![0.1, 0.5, 0.9],
            anchor_last: true,
        }
    }
}

/// Receptive field of `depth` stacked dilations `1, 2, ..., 2^(depth-1)`
/// counting one tap set per level.
pub fn receptive_field(kernel: usize, depth: usize) -> usize {
    1 + (kernel - 1) * ((1usize << depth) - 1)
}

/// Smallest depth whose receptive field covers `conditioning` steps.
pub fn depth_for(kernel: usize, conditioning: usize) -> Result<usize> {
    if kernel < 2 {
        return Err(ModelError::Config("deeptcn kernel must be >= 2 to derive depth".into()));
    }
    let mut d = 1;
    while receptive_field(kernel, d) < conditioning {
        d += 1;
    }
    Ok(d)
}

/// Residual block: `relu(x + conv2(relu(bn2(conv1(relu(bn1(x)))))))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub bn1: BatchNorm,
    pub conv1: CausalConv,
    pub bn2: BatchNorm,
    pub conv2: CausalConv,
}

impl EncoderBlock {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.bn1.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv1.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let s = ctx.tape.add(x, h)?;
        Ok(ctx.tape.relu(s)?)
    }
}

/// Shared decoder: `out(relu(P·h_t + R(X_{t+ω})))`.
#[derive(Clone, Debug)]
pub struct DecoderModule {
    pub h_proj: Linear,
    pub dense1: Linear,
    pub bn1: BatchNorm,
    pub dense2: Linear,
    pub bn2: BatchNorm,
    pub output: Linear,
}

impl DecoderModule {
    /// Residual function of the per-step covariate rows `[N × features]`.
    pub fn residual(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let r = self.dense1.forward(ctx, x)?;
        let r = self.bn1.forward(ctx, r)?;
        let r = ctx.tape.relu(r)?;
        let r = self.dense2.forward(ctx, r)?;
        Ok(self.bn2.forward(ctx, r)?)
    }

    /// `h` is `[B × channels]`, `x` is `[B·Ω × features]` ordered by window then ω.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, x: Var, horizon: usize) -> Result<Var> {
        let p = self.h_proj.forward(ctx, h)?;
        let p = ctx.tape.repeat_rows(p, horizon)?;
        let r = self.residual(ctx, x)?;
        let s = ctx.tape.add(p, r)?;
        let s = ctx.tape.relu(s)?;
        Ok(self.output.forward(ctx, s)?)
    }
}

#[derive(Clone, Debug)]
pub struct DeepTcn {
    cfg: DeepTcnConfig,
    dims: DataDims,
    depth: usize,
    loss: TcnLoss,
    store: ParamStore,
    input_proj: CausalConv,
    blocks: Vec<EncoderBlock>,
    decoder: DecoderModule,
}

/// Distribution parameters for every (window, ω) row.
enum HeadOutput {
    Gaussian { mu: Var, sigma: Var },
    Quantile { q: Var },
}

impl DeepTcn {
    pub fn new<R: Rng + ?Sized>(cfg: DeepTcnConfig, dims: DataDims, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 || cfg.kernel == 0 || cfg.decoder_width == 0 {
            return Err(ModelError::Config("deeptcn sizes must be >= 1".into()));
        }
        let loss = cfg.loss.unwrap_or(cfg.head.matching_loss());
        if loss != cfg.head.matching_loss() {
            return Err(ModelError::Config(format!(
                "deeptcn head {:?} cannot be trained with loss {:?}",
                cfg.head, loss
            )));
        }
        if cfg.head == TcnHead::Quantile {
            let ok = !cfg.quantiles.is_empty()
                && cfg.quantiles.iter().all(|q| *q > 0.0 && *q < 1.0)
                && cfg.quantiles.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(ModelError::Config(format!(
                    "quantile levels must be increasing and inside (0, 1), got {:?}",
                    cfg.quantiles
                )));
            }
        }
        let depth = match cfg.depth {
            Some(0) => return Err(ModelError::Config("deeptcn depth must be >= 1".into())),
            Some(d) => d,
            None => depth_for(cfg.kernel, dims.conditioning)?,
        };
        let c = cfg.channels;
        let mut store = ParamStore::new();
        let input_proj = CausalConv::new(&mut store, "deeptcn.input", 1 + dims.cov_dim, c, 1, 1, true, rng)?;
        let mut blocks = Vec::with_capacity(depth);
        // layers feeding a batchnorm carry no bias: it would be cancelled
        for b in 0..depth {
            let d = 1 << b;
            let name = format!("deeptcn.block{b}");
            blocks.push(EncoderBlock {
                bn1: BatchNorm::new(&mut store, &format!("{name}.bn1"), c, 1)?,
                conv1: CausalConv::new(&mut store, &format!("{name}.conv1"), c, c, cfg.kernel, d, false, rng)?,
                bn2: BatchNorm::new(&mut store, &format!("{name}.bn2"), c, 1)?,
                conv2: CausalConv::new(&mut store, &format!("{name}.conv2"), c, c, cfg.kernel, d, true, rng)?,
            });
        }
        let w = cfg.decoder_width;
        let features = dims.cov_dim + 1;
        let out_dim = match cfg.head {
            TcnHead::Gaussian => 2,
            TcnHead::Quantile => cfg.quantiles.len(),
        };
        let decoder = DecoderModule {
            h_proj: Linear::new(&mut store, "deeptcn.dec.h_proj", c, w, true, rng)?,
            dense1: Linear::new(&mut store, "deeptcn.dec.dense1", features, w, false, rng)?,
            bn1: BatchNorm::new(&mut store, "deeptcn.dec.bn1", w, 1)?,
            dense2: Linear::new(&mut store, "deeptcn.dec.dense2", w, w, false, rng)?,
            bn2: BatchNorm::new(&mut store, "deeptcn.dec.bn2", w, 1)?,
            output: Linear::new(&mut store, "deeptcn.dec.out", w, out_dim, true, rng)?,
        };
        // the covariate branch starts switched off and is learned in
        *store.value_mut(decoder.bn2.gamma) = Tensor::zeros(&[w]);
        Ok(Self {
            cfg,
            dims,
            depth,
            loss,
            store,
            input_proj,
            blocks,
            decoder,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn config(&self) -> &DeepTcnConfig {
        &self.cfg
    }

    /// Encoder output at every conditioning position, `[B × channels × T]`.
    pub fn encode_sequence(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        let t = self.dims.conditioning;
        let ch = 1 + self.dims.cov_dim;
        let mut data = Vec::with_capacity(batch.len() * ch * t);
        for w in batch {
            data.extend_from_slice(&w.z_conditioning);
            for c in 0..self.dims.cov_dim {
                data.extend((0..t).map(|s| w.covariate(s)[c]));
            }
        }
        let x = ctx.tape.constant(Tensor::new(vec![batch.len(), ch, t], data)?);
        let mut h = self.input_proj.forward(ctx, x)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Hidden state `h_t` at the last conditioning step, `[B × channels]`.
    pub fn encode(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        let seq = self.encode_sequence(ctx, batch)?;
        Ok(ctx.tape.select_time(seq, self.dims.conditioning - 1)?)
    }

    fn decoder_rows(&self, batch: &[&WindowSample]) -> Vec<f64> {
        let (t0, horizon) = (self.dims.conditioning, self.dims.horizon);
        let mut rows = Vec::with_capacity(batch.len() * horizon * (self.dims.cov_dim + 1));
        for w in batch {
            for o in 0..horizon {
                rows.extend_from_slice(w.covariate(t0 + o));
                rows.push((o + 1) as f64 / horizon as f64);
            }
        }
        rows
    }

    fn head(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<HeadOutput> {
        let n = batch.len() * self.dims.horizon;
        let h = self.encode(ctx, batch)?;
        let x = ctx
            .tape
            .constant(Tensor::matrix(n, self.dims.cov_dim + 1, self.decoder_rows(batch))?);
        let out = self.decoder.forward(ctx, h, x, self.dims.horizon)?;
        let anchor = if self.cfg.anchor_last {
            let last = batch
                .iter()
                .flat_map(|w| std::iter::repeat(*w.z_conditioning.last().expect("non-empty")).take(self.dims.horizon))
                .collect();
            Some(ctx.tape.constant(Tensor::matrix(n, 1, last)?))
        } else {
            None
        };
        let anchored = |ctx: &mut Ctx, v: Var| -> Result<Var> {
            Ok(match anchor {
                Some(a) => ctx.tape.add(v, a)?,
                None => v,
            })
        };
        match self.cfg.head {
            TcnHead::Gaussian => {
                let mu = ctx.tape.slice_cols(out, 0, 1)?;
                let mu = anchored(ctx, mu)?;
                let raw = ctx.tape.slice_cols(out, 1, 1)?;
                let sigma = ctx.tape.softplus(raw)?;
                let sigma = ctx.tape.add_scalar(sigma, MIN_SCALE)?;
                Ok(HeadOutput::Gaussian { mu, sigma })
            }
            TcnHead::Quantile => {
                // cumulative softplus increments keep the levels ordered
                let first = ctx.tape.slice_cols(out, 0, 1)?;
                let mut cols = vec![anchored(ctx, first)?];
                for l in 1..self.cfg.quantiles.len() {
                    let raw = ctx.tape.slice_cols(out, l, 1)?;
                    let inc = ctx.tape.softplus(raw)?;
                    let prev = cols[l - 1];
                    cols.push(ctx.tape.add(prev, inc)?);
                }
                Ok(HeadOutput::Quantile {
                    q: ctx.tape.concat_cols(&cols)?,
                })
            }
        }
    }

    /// Raw per-horizon outputs in evaluation mode: `(mu, sigma)` pairs or quantile rows.
    pub fn emit(&self, sample: &WindowSample) -> Result<Vec<Vec<f64>>> {
        let mut ctx = Ctx::new(&self.store, false);
        let horizon = self.dims.horizon;
        match self.head(&mut ctx, &[sample])? {
            HeadOutput::Gaussian { mu, sigma } => {
                let m = ctx.tape.value(mu).data();
                let s = ctx.tape.value(sigma).data();
                Ok((0..horizon).map(|o| vec![m[o], s[o]]).collect())
            }
            HeadOutput::Quantile { q } => {
                let l = self.cfg.quantiles.len();
                let v = ctx.tape.value(q).data();
                Ok((0..horizon).map(|o| v[o * l..(o + 1) * l].to_vec()).collect())
            }
        }
    }

    fn point_index(&self) -> Option<usize> {
        self.cfg.quantiles.iter().position(|q| (q - 0.5).abs() < 1e-12)
    }
}

/// Inverse CDF through quantile knots, linear between levels and flat beyond.
fn interpolate_quantile(levels: &[f64], values: &[f64], u: f64) -> f64 {
    if u <= levels[0] {
        return values[0];
    }
    for i in 1..levels.len() {
        if u <= levels[i] {
            let f = (u - levels[i - 1]) / (levels[i] - levels[i - 1]);
            return values[i - 1] + f * (values[i] - values[i - 1]);
        }
    }
    values[values.len() - 1]
}

impl Forecaster for DeepTcn {
    fn kind(&self) -> ModelKind {
        ModelKind::DeepTcn
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::DeepTcn(self.cfg.clone())
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

    /// Loss summed over horizon steps and averaged over windows.
    fn loss(&self, ctx: &mut Ctx, batch: &[&WindowSample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let n = batch.len() * self.dims.horizon;
        let target: Vec<f64> = batch.iter().flat_map(|w| w.z_prediction.iter().copied()).collect();
        let target = ctx.tape.constant(Tensor::matrix(n, 1, target)?);
        let per_row = match (self.head(ctx, batch)?, self.loss) {
            (HeadOutput::Gaussian { mu, sigma }, TcnLoss::GaussianNll) => ctx.tape.gaussian_nll(target, mu, sigma)?,
            (HeadOutput::Quantile { q }, TcnLoss::Pinball) => ctx.tape.pinball(target, q, &self.cfg.quantiles)?,
            _ => unreachable!("head and loss checked at construction"),
        };
        Ok(ctx.tape.scale(per_row, self.dims.horizon as f64)?)
    }

    fn forecast(&self, sample: &WindowSample, _opts: &ForecastOptions) -> Result<ForecastResult> {
        let rows = self.emit(sample)?;
        match self.cfg.head {
            TcnHead::Gaussian => {
                let std = Normal::new(0.0, 1.0).expect("standard normal");
                let quantiles = REPORT_LEVELS
                    .iter()
                    .map(|&level| QuantileBand {
                        level,
                        values: rows.iter().map(|r| r[0] + r[1] * std.inverse_cdf(level)).collect(),
                    })
                    .collect();
                Ok(ForecastResult {
                    point: rows.iter().map(|r| r[0]).collect(),
                    quantiles,
                    samples: None,
                })
            }
            TcnHead::Quantile => {
                let levels = &self.cfg.quantiles;
                let point = match self.point_index() {
                    Some(i) => rows.iter().map(|r| r[i]).collect(),
                    None => rows.iter().map(|r| interpolate_quantile(levels, r, 0.5)).collect(),
                };
                let quantiles = levels
                    .iter()
                    .enumerate()
                    .map(|(i, &level)| QuantileBand {
                        level,
                        values: rows.iter().map(|r| r[i]).collect(),
                    })
                    .collect();
                Ok(ForecastResult {
                    point,
                    quantiles,
                    samples: None,
                })
            }
        }
    }

    /// Independent draws per horizon step; the steps share no sampled state.
    fn sample_path(&self, sample: &WindowSample, seed: u64, noise_scale: f64) -> Result<Vec<f64>> {
        let rows = self.emit(sample)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = &self.cfg.quantiles;
        Ok(rows
            .iter()
            .map(|r| match self.cfg.head {
                TcnHead::Gaussian => {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    r[0] + noise_scale * r[1] * e
                }
                TcnHead::Quantile => {
                    let mid = interpolate_quantile(levels, r, 0.5);
                    let u: f64 = rng.gen();
                    mid + noise_scale * (interpolate_quantile(levels, r, u) - mid)
                }
            })
            .collect())
    }
}
