//! Neural network building blocks on top of the tape.
//!
//! Parameters live in a [`ParamStore`]; the `*Params` structs only hold
//! [`ParamId`]s into it. A forward pass goes through a [`Graph`], which binds
//! parameters onto a tape on first use.

mod adam;
mod graph;
mod params;

pub use adam::AdamState;
pub use graph::{collect_grads, BnUpdate, Graph, Mode};
pub use params::{ParamEntry, ParamId, ParamStore};

use crate::error::{invalid, Result};
use crate::numerics::{grad_check_many, GradCheckReport, Tensor, Var};
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: ParamId,
    /// `[out]`
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), &[outputs, inputs], inputs, outputs, rng);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), &[outputs, inputs], inputs, outputs, rng);
        Self {
            weight,
            bias: None,
            inputs,
            outputs,
        }
    }
}

/// Scale/shift pair, plus running statistics for batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running: Option<RunningStats>,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
}

impl NormParams {
    pub fn layer(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], 1.0), true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels]), true),
            running: None,
            channels,
        }
    }

    pub fn batch(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mut p = Self::layer(store, name, channels);
        p.running = Some(RunningStats {
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: BN_MOMENTUM,
        });
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[3, 3, in, out]`
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl ConvParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add_glorot(
            format!("{name}.kernel"),
            &[3, 3, inputs, outputs],
            9 * inputs,
            9 * outputs,
            rng,
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true));
        Self {
            kernel,
            bias,
            inputs,
            outputs,
        }
    }
}

/// y = x·Wᵀ (+ b) along the last axis.
pub fn linear(g: &mut Graph, x: Var, p: &LinearParams) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let last = *shape.last().expect("rank >= 1");
    if last != p.inputs {
        return Err(crate::Error::ShapeMismatch {
            op: "linear",
            lhs: shape,
            rhs: vec![p.outputs, p.inputs],
        });
    }
    let rows = shape.iter().product::<usize>() / last;
    let w = g.param(p.weight);
    let flat = g.tape.reshape(x, &[rows, last])?;
    let wt = g.tape.permute(w, &[1, 0])?;
    let mut y = g.tape.matmul(flat, wt)?;
    if let Some(id) = p.bias {
        let b = g.param(id);
        y = g.tape.add_trailing(y, b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = p.outputs;
    g.tape.reshape(y, &out_shape)
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    let (s, b) = (g.param(p.scale), g.param(p.shift));
    g.tape.layer_norm(x, s, b, NORM_EPS)
}

/// Per-channel normalisation over every other axis. Training mode uses the
/// batch statistics and queues a running-statistics update on the graph.
pub fn batch_norm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    let running = p
        .running
        .as_ref()
        .ok_or_else(|| invalid("batch_norm called with layer-norm parameters"))?;
    let (s, b) = (g.param(p.scale), g.param(p.shift));
    if g.is_training() {
        let (y, stats) = g.tape.batch_norm_train(x, s, b, NORM_EPS)?;
        g.push_bn_update(BnUpdate {
            mean: running.mean,
            var: running.var,
            batch_mean: stats.mean,
            batch_var: stats.var,
            momentum: running.momentum,
        });
        Ok(y)
    } else {
        let store = g.store();
        let mean = store.get(running.mean).data().to_vec();
        let var = store.get(running.var).data().to_vec();
        g.tape.batch_norm_eval(x, s, b, &mean, &var, NORM_EPS)
    }
}

/// Same-size 3×3 convolution over `[N, h, w, C]`.
pub fn conv3x3(g: &mut Graph, x: Var, p: &ConvParams) -> Result<Var> {
    let k = g.param(p.kernel);
    let b = p.bias.map(|id| g.param(id));
    g.tape.conv3x3(x, k, b)
}

pub fn gelu(g: &mut Graph, x: Var) -> Var {
    g.tape.gelu(x)
}

/// Inverted dropout: kept values are scaled by 1/(1 − rate). Identity in
/// evaluation mode or at rate 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let n = g.tape.value(x).numel();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = match g.mode_mut() {
        Mode::Train { dropout } if rate > 0.0 => (0..n)
            .map(|_| if dropout.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
        _ => return Ok(x),
    };
    g.tape.mul_mask(x, mask)
}

pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.tape.cross_entropy(logits, labels)
}

/// Gradient check of a scalar graph function over the given input tensors
/// and every trainable entry of `store`.
///
/// In the report, `worst.0 < inputs.len()` indexes `inputs`; larger values
/// index the trainable entries in store order. In training mode each
/// evaluation gets a dropout generator with the same seed, so masks are
/// identical across evaluations.
pub fn grad_check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    training: bool,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    use rand::SeedableRng;
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.entries()[i].trainable).collect();
    let mut all = inputs.to_vec();
    all.extend(trainable.iter().map(|&i| store.entries()[i].tensor.clone()));
    grad_check_many(
        |tape, vars| {
            let mut bound = vec![None; store.len()];
            for (k, &i) in trainable.iter().enumerate() {
                bound[i] = Some(vars[inputs.len() + k]);
            }
            let mode = if training {
                Mode::Train {
                    dropout: rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed),
                }
            } else {
                Mode::Eval
            };
            let mut g = Graph::with_bound(tape, store, mode, bound);
            f(&mut g, &vars[..inputs.len()])
        },
        &all,
        step,
    )
}

#[cfg(test)]
mod tests;
