//! Parameterised building blocks shared by the attention module and the
//! network: dense layers, batch norm, and the forward context they run in.

use crate::autodiff::{BnUpdate, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Prng;

/// Running-statistics momentum: `running = m · running + (1 − m) · batch`.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    /// When set, named intermediate shapes are appended in forward order.
    pub trace: Option<&'a mut Vec<(String, Vec<usize>)>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx { tape, store, mode, trace: None }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }

    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push((name.into(), self.tape.shape(v).to_vec()));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weight `name.w`, zero bias `name.b` when `bias`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Prng,
    ) -> Result<Self> {
        let w = store.add_glorot(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w)?;
        let b = self.b.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            scale: store.add(&format!("{name}.scale"), Tensor::full(&[channels], T::one()))?,
            shift: store.add(&format!("{name}.shift"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
        })
    }

    /// Train mode normalises with batch statistics and queues a running
    /// statistics update on the tape; eval mode uses the running values.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let scale = ctx.param(self.scale)?;
        let shift = ctx.param(self.shift)?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, scale, shift)?;
                ctx.tape.push_bn_update(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.value(self.running_mean).data();
                let var = ctx.store.value(self.running_var).data();
                ctx.tape.batch_norm_eval(x, scale, shift, mean, var)
            }
        }
    }
}

/// `ReLU(BN(x))`, or `x` untouched when `bn` is `None`.
pub fn bn_relu<T: Real>(ctx: &mut Ctx<'_, T>, bn: Option<&BatchNorm>, x: Var) -> Result<Var> {
    match bn {
        Some(bn) => {
            let y = bn.forward(ctx, x)?;
            ctx.tape.relu(y)
        }
        None => Ok(x),
    }
}
