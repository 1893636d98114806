//! Parameterized building blocks shared by the forecasting models.

use rand::Rng;

use super::params::{BufferUpdate, Ctx, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::NumError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine map `x·W + b` on `[N×in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-limit..limit)).collect();
        let w = store.add(&format!("{name}.weight"), Tensor::new(vec![input, output], data)?)?;
        let b = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[output]))?)
        } else {
            None
        };
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NumError> {
        let w = ctx.param(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Causal dilated convolution layer over `[B×C×T]`.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub dilation: usize,
}

impl CausalConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        if dilation == 0 {
            return Err(NumError::Parameter("dilation must be positive".into()));
        }
        let std = (2.0 / (cin * kernel) as f64).sqrt();
        let w = store.add(&format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel], std, rng))?;
        let b = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { w, b, dilation })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NumError> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        ctx.tape.conv1d_causal(x, w, b, self.dilation)
    }
}

/// Batch normalization with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Channel axis of the input tensor.
    pub axis: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, axis: usize) -> Result<Self, NumError> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::filled(&[channels], 1.0))?,
            axis,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NumError> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batchnorm_train(x, g, b, self.axis, BN_EPS)?;
            ctx.updates.push(BufferUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var,
                momentum: BN_MOMENTUM,
            });
            Ok(y)
        } else {
            let mean = ctx.store().value(self.running_mean).data().to_vec();
            let var = ctx.store().value(self.running_var).data().to_vec();
            ctx.tape.batchnorm_eval(x, g, b, self.axis, &mean, &var, BN_EPS)
        }
    }
}

/// Single-layer LSTM cell. Gate order in the fused weights is input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut init = |rows: usize| {
            let data = (0..rows * 4 * hidden).map(|_| rng.gen_range(-k..k)).collect();
            Tensor::new(vec![rows, 4 * hidden], data)
        };
        let w_ih = store.add(&format!("{name}.w_ih"), init(input)?)?;
        let w_hh = store.add(&format!("{name}.w_hh"), init(hidden)?)?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(&format!("{name}.bias"), b)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// One step: `x` is `[B×input]`, `h`/`c` are `[B×hidden]`.
    pub fn step(&self, ctx: &mut Ctx, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumError> {
        let hs = self.hidden;
        let w_ih = ctx.param(self.w_ih);
        let w_hh = ctx.param(self.w_hh);
        let bias = ctx.param(self.bias);
        let t = &mut ctx.tape;
        let gx = t.matmul(x, w_ih)?;
        let gh = t.matmul(h, w_hh)?;
        let gates = t.add(gx, gh)?;
        let gates = t.add_row(gates, bias)?;
        let i = t.slice_cols(gates, 0, hs)?;
        let f = t.slice_cols(gates, hs, hs)?;
        let g = t.slice_cols(gates, 2 * hs, hs)?;
        let o = t.slice_cols(gates, 3 * hs, hs)?;
        let i = t.sigmoid(i)?;
        let f = t.sigmoid(f)?;
        let g = t.tanh(g)?;
        let o = t.sigmoid(o)?;
        let fc = t.mul(f, c)?;
        let ig = t.mul(i, g)?;
        let c_next = t.add(fc, ig)?;
        let tc = t.tanh(c_next)?;
        let h_next = t.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}
