//! From-scratch classifiers with exact analytic gradients.
//!
//! Every model is the same stack: an optional recurrent layer followed by
//! dense layers, the last being a single sigmoid unit giving a per-frame
//! passage probability. With `dropout_p > 0` an inverted-dropout mask is
//! applied to the input of every dense layer in training mode; one mask is
//! drawn per layer per sequence and shared by all of its time steps.

mod cells;
mod linalg;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cells::{CellKind, CellState, GruParams, LstmParams, RecurrentParams, SimpleRnnParams};
pub use linalg::{sigmoid, Activation, Matrix};

use crate::error::{Error, Result};
use crate::training::LossSpec;
use cells::StepCache;
use linalg::add_assign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lr,
    Mlp,
    SimpleRnn,
    Lstm,
    Gru,
    Final,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lr,
        Variant::Mlp,
        Variant::SimpleRnn,
        Variant::Lstm,
        Variant::Gru,
        Variant::Final,
    ];

    pub fn cell(self) -> Option<CellKind> {
        match self {
            Variant::Lr | Variant::Mlp => None,
            Variant::SimpleRnn => Some(CellKind::SimpleRnn),
            Variant::Lstm | Variant::Final => Some(CellKind::Lstm),
            Variant::Gru => Some(CellKind::Gru),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lr => "lr",
            Variant::Mlp => "mlp",
            Variant::SimpleRnn => "simplernn",
            Variant::Lstm => "lstm",
            Variant::Gru => "gru",
            Variant::Final => "final",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

/// Layer sizes and regularization for building a fresh model.
///
/// When deserialized, omitted fields come from the variant's preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialArch")]
pub struct ArchSpec {
    pub variant: Variant,
    /// Recurrent units; ignored by `lr` and `mlp`.
    pub hidden: usize,
    /// Sizes of the dense layers between the recurrent layer (or input) and
    /// the sigmoid output unit.
    pub dense: Vec<usize>,
    pub dense_activation: Activation,
    pub dropout_p: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialArch {
    variant: Variant,
    hidden: Option<usize>,
    dense: Option<Vec<usize>>,
    dense_activation: Option<Activation>,
    dropout_p: Option<f64>,
}

impl From<PartialArch> for ArchSpec {
    fn from(p: PartialArch) -> Self {
        let preset = ArchSpec::preset(p.variant);
        ArchSpec {
            variant: p.variant,
            hidden: p.hidden.unwrap_or(preset.hidden),
            dense: p.dense.unwrap_or(preset.dense),
            dense_activation: p.dense_activation.unwrap_or(preset.dense_activation),
            dropout_p: p.dropout_p.unwrap_or(preset.dropout_p),
        }
    }
}

impl ArchSpec {
    pub fn preset(variant: Variant) -> Self {
        let base = ArchSpec {
            variant,
            hidden: 0,
            dense: Vec::new(),
            dense_activation: Activation::Tanh,
            dropout_p: 0.0,
        };
        match variant {
            Variant::Lr => base,
            Variant::Mlp => ArchSpec {
                dense: vec![12],
                ..base
            },
            Variant::SimpleRnn | Variant::Lstm | Variant::Gru => ArchSpec { hidden: 8, ..base },
            Variant::Final => ArchSpec {
                hidden: 16,
                dense: vec![8],
                dense_activation: Activation::Relu,
                dropout_p: 0.2,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.cell().is_some() && self.hidden == 0 {
            return Err(Error::Config(format!(
                "{} needs at least one recurrent unit",
                self.variant
            )));
        }
        if self.dense.contains(&0) {
            return Err(Error::Config("dense layer with zero units".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseParams {
    fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weights: Matrix::uniform(output, input, limit, rng),
            bias: vec![0.0; output],
            activation,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        self.weights.mul_vec_add(x, &mut z);
        z.into_iter().map(|v| self.activation.apply(v)).collect()
    }
}

/// Identifies one parameter tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Recurrent(&'static str),
    DenseWeights(usize),
    DenseBias(usize),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Recurrent(name) => write!(f, "recurrent.{name}"),
            ParamId::DenseWeights(i) => write!(f, "dense{i}.weights"),
            ParamId::DenseBias(i) => write!(f, "dense{i}.bias"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: Variant,
    pub input_dim: usize,
    pub recurrent: Option<RecurrentParams>,
    pub dense: Vec<DenseParams>,
    pub dropout_p: f64,
}

impl ModelParams {
    /// Fresh seeded parameters for `arch` over `input_dim` features.
    pub fn init(arch: &ArchSpec, input_dim: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("model input dimension is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recurrent = arch
            .variant
            .cell()
            .map(|kind| RecurrentParams::init(kind, input_dim, arch.hidden, &mut rng));
        let mut width = recurrent.as_ref().map_or(input_dim, RecurrentParams::hidden_dim);
        let mut dense = Vec::with_capacity(arch.dense.len() + 1);
        for &units in &arch.dense {
            dense.push(DenseParams::init(width, units, arch.dense_activation, &mut rng));
            width = units;
        }
        dense.push(DenseParams::init(width, 1, Activation::Sigmoid, &mut rng));
        let model = Self {
            variant: arch.variant,
            input_dim,
            recurrent,
            dense,
            dropout_p: arch.dropout_p,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let dim_err = |context, expected, actual| Error::Dimension {
            context,
            expected,
            actual,
        };
        let mut width = self.input_dim;
        if let Some(rec) = &self.recurrent {
            rec.validate()?;
            if rec.input_dim() != width {
                return Err(dim_err("recurrent input", width, rec.input_dim()));
            }
            width = rec.hidden_dim();
        }
        for layer in &self.dense {
            if layer.weights.cols() != width {
                return Err(dim_err("dense input", width, layer.weights.cols()));
            }
            if layer.bias.len() != layer.weights.rows() {
                return Err(dim_err("dense bias", layer.weights.rows(), layer.bias.len()));
            }
            width = layer.weights.rows();
        }
        match self.dense.last() {
            Some(last) if width == 1 && last.activation == Activation::Sigmoid => {}
            _ => return Err(Error::Config("model must end in a single sigmoid unit".into())),
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        let mut finite = true;
        self.for_each_param(|_, v| finite &= v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn for_each_param(&self, mut f: impl FnMut(ParamId, &[f64])) {
        if let Some(rec) = &self.recurrent {
            rec.for_each_param(&mut |name, v| f(ParamId::Recurrent(name), v));
        }
        for (i, layer) in self.dense.iter().enumerate() {
            f(ParamId::DenseWeights(i), layer.weights.data());
            f(ParamId::DenseBias(i), &layer.bias);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamId, &mut [f64])) {
        if let Some(rec) = &mut self.recurrent {
            rec.for_each_param_mut(&mut |name, v| f(ParamId::Recurrent(name), v));
        }
        for (i, layer) in self.dense.iter_mut().enumerate() {
            f(ParamId::DenseWeights(i), layer.weights.data_mut());
            f(ParamId::DenseBias(i), &mut layer.bias);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, v| n += v.len());
        n
    }

    /// All parameters concatenated in visiting order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_param(|_, v| out.extend_from_slice(v));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter vector has wrong length");
        let mut offset = 0;
        self.for_each_param_mut(|_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
    }

    /// Same shape, every entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|_, v| v.fill(0.0));
        z
    }

    fn dropout_masks(&self, mode: Mode, seed: u64) -> Vec<Option<Vec<f64>>> {
        if mode == Mode::Eval || self.dropout_p == 0.0 {
            return vec![None; self.dense.len()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - self.dropout_p;
        self.dense
            .iter()
            .map(|layer| {
                Some(
                    (0..layer.weights.cols())
                        .map(|_| {
                            if rng.gen::<f64>() < self.dropout_p {
                                0.0
                            } else {
                                1.0 / keep
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<'a> {
    inputs: &'a [Vec<f64>],
    steps: Vec<StepCache>,
    masks: Vec<Option<Vec<f64>>>,
    /// `[layer][t]`: masked input of each dense layer
    layer_in: Vec<Vec<Vec<f64>>>,
    /// `[layer][t]`: activation output of each dense layer
    layer_out: Vec<Vec<Vec<f64>>>,
    outputs: Vec<f64>,
}

impl Trace<'_> {
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
}

fn check_inputs(model: &ModelParams, inputs: &[Vec<f64>]) -> Result<()> {
    if let Some(bad) = inputs.iter().find(|x| x.len() != model.input_dim) {
        return Err(Error::Dimension {
            context: "model input",
            expected: model.input_dim,
            actual: bad.len(),
        });
    }
    Ok(())
}

/// Forward pass keeping intermediate values. The recurrent state starts at
/// zero for every call.
pub fn forward_trace<'a>(model: &ModelParams, inputs: &'a [Vec<f64>], mode: Mode, seed: u64) -> Result<Trace<'a>> {
    check_inputs(model, inputs)?;
    let steps = model.recurrent.as_ref().map_or_else(Vec::new, |rec| rec.run(inputs));
    let masks = model.dropout_masks(mode, seed);
    let n_layers = model.dense.len();
    let mut layer_in = vec![Vec::with_capacity(inputs.len()); n_layers];
    let mut layer_out = vec![Vec::with_capacity(inputs.len()); n_layers];
    let mut outputs = Vec::with_capacity(inputs.len());

    for t in 0..inputs.len() {
        let mut a: Vec<f64> = match steps.get(t) {
            Some(step) => step.h().to_vec(),
            None => inputs[t].clone(),
        };
        for (l, layer) in model.dense.iter().enumerate() {
            if let Some(mask) = &masks[l] {
                for (v, m) in a.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            let out = layer.forward(&a);
            layer_in[l].push(a);
            a = out.clone();
            layer_out[l].push(out);
        }
        outputs.push(a[0]);
    }

    Ok(Trace {
        inputs,
        steps,
        masks,
        layer_in,
        layer_out,
        outputs,
    })
}

/// Per-frame passage probabilities.
pub fn forward(model: &ModelParams, inputs: &[Vec<f64>], mode: Mode, seed: u64) -> Result<Vec<f64>> {
    forward_trace(model, inputs, mode, seed).map(|t| t.outputs)
}

/// One recurrent step; see [`RecurrentParams::step`].
pub fn cell_step(params: &RecurrentParams, x: &[f64], state: &CellState) -> Result<(Vec<f64>, CellState)> {
    params.step(x, state)
}

/// Loss value and exact gradients for one sequence, using the dropout masks
/// recorded in `trace`. Gradients are summed over all time steps.
pub fn backward(
    model: &ModelParams,
    trace: &Trace<'_>,
    targets: &[bool],
    loss: &LossSpec,
) -> Result<(f64, ModelParams)> {
    let (value, dy) = crate::training::loss_with_gradient(&trace.outputs, targets, loss)?;
    let mut grad = model.zeros_like();
    let t_len = trace.outputs.len();
    let mut dh = Vec::with_capacity(if model.recurrent.is_some() { t_len } else { 0 });

    for t in 0..t_len {
        let mut delta = vec![dy[t]];
        for l in (0..model.dense.len()).rev() {
            let layer = &model.dense[l];
            let out = &trace.layer_out[l][t];
            let dz: Vec<f64> = delta
                .iter()
                .zip(out)
                .map(|(d, &y)| d * layer.activation.derivative_from_output(y))
                .collect();
            let g = &mut grad.dense[l];
            g.weights.add_outer(&dz, &trace.layer_in[l][t]);
            add_assign(&mut g.bias, &dz);
            let mut d_in = vec![0.0; layer.weights.cols()];
            layer.weights.mul_t_vec_add(&dz, &mut d_in);
            if let Some(mask) = &trace.masks[l] {
                for (d, m) in d_in.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            delta = d_in;
        }
        if model.recurrent.is_some() {
            dh.push(delta);
        }
    }

    if let (Some(rec), Some(grad_rec)) = (&model.recurrent, &mut grad.recurrent) {
        rec.backprop(trace.inputs, &trace.steps, &dh, grad_rec);
    }
    Ok((value, grad))
}

/// Eval-mode probabilities compared against `threshold` (`≥` counts as a
/// passage frame).
pub fn predict_binary(model: &ModelParams, inputs: &[Vec<f64>], threshold: f64) -> Result<Vec<bool>> {
    Ok(binarize(&forward(model, inputs, Mode::Eval, 0)?, threshold))
}

pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= threshold).collect()
}
