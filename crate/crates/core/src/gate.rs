//! Two-level attention gate.
//!
//! For an input `U` with `c` channels the gate computes
//!
//! ```text
//! s  = mean_{i,j} U                       (squeeze, per channel)
//! z  = relu(W_r s + b_r)                  (shared reduction, width max(1, c/16))
//! e  = sigmoid(W_c z + b_c)               (channel attention, c values)
//! ē  = sigmoid(W_g z + b_g)               (global attention, one value)
//! O  = U + ē · (e ⊗ U)
//! ```
//!
//! Each batch item gets its own `e` and `ē`. The reduction layer feeds both
//! excitation branches, so its gradient is the sum of both contributions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, FeatureMap, ParamId, ParamStore, ParamTensor, Tape, Var};

/// Width of the shared reduction layer.
pub fn reduction_width(channels: usize) -> usize {
    (channels / 16).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInit {
    /// Xavier weights, zero biases.
    Xavier,
    /// Everything zero: the gate starts as exactly `1.25 · U`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateParams {
    pub channels: usize,
    pub reduction: usize,
    pub w_reduce: ParamId,
    pub b_reduce: ParamId,
    pub w_channel: ParamId,
    pub b_channel: ParamId,
    pub w_global: ParamId,
    pub b_global: ParamId,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        init: GateInit,
        rng: &mut R,
    ) -> Self {
        let r = reduction_width(channels);
        let mut weight = |name: &str, out: usize, inp: usize, store: &mut ParamStore| {
            let full = format!("{prefix}.{name}");
            let p = match init {
                GateInit::Xavier => xavier_uniform(full, &[out, inp], inp, out, rng),
                GateInit::Zero => ParamTensor::zeros(full, &[out, inp]),
            };
            store.insert(p)
        };
        let w_reduce = weight("reduce.weight", r, channels, store);
        let w_channel = weight("channel.weight", channels, r, store);
        let w_global = weight("global.weight", 1, r, store);
        let b_reduce = store.insert(ParamTensor::zeros(format!("{prefix}.reduce.bias"), &[r]));
        let b_channel = store.insert(ParamTensor::zeros(format!("{prefix}.channel.bias"), &[channels]));
        let b_global = store.insert(ParamTensor::zeros(format!("{prefix}.global.bias"), &[1]));
        Self {
            channels,
            reduction: r,
            w_reduce,
            b_reduce,
            w_channel,
            b_channel,
            w_global,
            b_global,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.w_reduce,
            self.b_reduce,
            self.w_channel,
            self.b_channel,
            self.w_global,
            self.b_global,
        ]
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (c, r) = (self.channels, self.reduction);
        (c * r + r) + (r * c + c) + (r + 1)
    }
}

/// Which excitation branch, if any, should not backpropagate into the
/// shared reduction layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachBranch {
    Channel,
    Global,
}

/// Tape handles for one gate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub squeeze: Var,
    pub channel_attention: Var,
    pub global_attention: Var,
    pub output: Var,
}

/// Per-channel spatial mean, `(b, c, 1, 1)`.
pub fn squeeze(tape: &mut Tape, u: Var) -> Result<Var> {
    tape.global_avg_pool(u)
}

fn reduce(tape: &mut Tape, store: &ParamStore, s: Var, params: &GateParams) -> Result<Var> {
    let z = tape.fully_connected(store, s, params.w_reduce, params.b_reduce)?;
    tape.relu(z)
}

/// Channel attention `e`, shape `(b, c, 1, 1)`.
pub fn excite_channel(tape: &mut Tape, store: &ParamStore, s: Var, params: &GateParams) -> Result<Var> {
    let z = reduce(tape, store, s, params)?;
    channel_head(tape, store, z, params)
}

/// Global attention `ē`, shape `(b, 1, 1, 1)`.
pub fn excite_global(tape: &mut Tape, store: &ParamStore, s: Var, params: &GateParams) -> Result<Var> {
    let z = reduce(tape, store, s, params)?;
    global_head(tape, store, z, params)
}

fn channel_head(tape: &mut Tape, store: &ParamStore, z: Var, params: &GateParams) -> Result<Var> {
    let a = tape.fully_connected(store, z, params.w_channel, params.b_channel)?;
    tape.sigmoid(a)
}

fn global_head(tape: &mut Tape, store: &ParamStore, z: Var, params: &GateParams) -> Result<Var> {
    let a = tape.fully_connected(store, z, params.w_global, params.b_global)?;
    tape.sigmoid(a)
}

/// Records the full gate on `tape`. Both excitation branches read the same
/// reduction activation.
pub fn apply_gate(tape: &mut Tape, store: &ParamStore, u: Var, params: &GateParams) -> Result<GateVars> {
    apply_gate_detached(tape, store, u, params, None)
}

/// [`apply_gate`] with one branch cut off from the shared reduction layer.
/// Forward values are identical; only gradients differ.
pub fn apply_gate_detached(
    tape: &mut Tape,
    store: &ParamStore,
    u: Var,
    params: &GateParams,
    detach: Option<DetachBranch>,
) -> Result<GateVars> {
    let c = tape.value(u).channels();
    if c != params.channels {
        return Err(Error::shape(
            "apply_gate",
            format!("input has {c} channels, gate expects {}", params.channels),
        ));
    }
    let s = squeeze(tape, u)?;
    let z = reduce(tape, store, s, params)?;
    let (z_channel, z_global) = match detach {
        None => (z, z),
        Some(DetachBranch::Channel) => (tape.detach(z), z),
        Some(DetachBranch::Global) => (z, tape.detach(z)),
    };
    let e = channel_head(tape, store, z_channel, params)?;
    let e_bar = global_head(tape, store, z_global, params)?;
    let u_tilde = tape.channel_scale(u, e)?;
    let v_tilde = tape.scalar_scale(u_tilde, e_bar)?;
    let output = tape.add(u, v_tilde)?;
    Ok(GateVars {
        squeeze: s,
        channel_attention: e,
        global_attention: e_bar,
        output,
    })
}

/// Gate result detached from any tape.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub output: FeatureMap,
    /// `e` per batch item.
    pub channel_attention: Vec<Vec<f64>>,
    /// `ē` per batch item.
    pub global_attention: Vec<f64>,
}

impl GateOutput {
    pub fn from_tape(tape: &Tape, vars: &GateVars) -> Self {
        let e = tape.value(vars.channel_attention);
        let c = e.channels();
        Self {
            output: tape.value(vars.output).clone(),
            channel_attention: e.data().chunks(c).map(<[f64]>::to_vec).collect(),
            global_attention: tape.value(vars.global_attention).data().to_vec(),
        }
    }
}

/// Evaluates the gate on a plain feature map.
pub fn evaluate_gate(store: &ParamStore, u: &FeatureMap, params: &GateParams) -> Result<GateOutput> {
    let mut tape = Tape::new();
    let x = tape.input(u.clone())?;
    let vars = apply_gate(&mut tape, store, x, params)?;
    Ok(GateOutput::from_tape(&tape, &vars))
}
