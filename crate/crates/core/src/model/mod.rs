//! The trainable predictor: hop attention, combination, a residual MLP over
//! the combined features, and a label-embedding head.
//!
//! ```text
//! H      = Σ_l w_i(l) X^(l)                  (attention + combine)
//! h0     = H · W_in + b_in                    (input projection)
//! h_l    = δ(h_{l-1} W_l + b_l + h0)          (l = 1..L, initial residual)
//! logits = h_L · W_out + b_out + MLP(Ŷ)       (label head)
//! ```
//!
//! With `ResidualSource::Raw` the residual term is the projection of
//! `X^(0)` instead of `h0`.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    combine, combine_backward, jk_branch_forward_traced, AttentionKind, AttentionParams,
    AttentionTrace,
};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::Real;

use self::layers::{apply_mask, dropout_mask, Activation, Linear, LinearGrad, Mlp, MlpCache};
use self::loss::{check_temperature, softmax_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSource {
    /// Projected combined features.
    Combined,
    /// Projected raw features `X^(0)`.
    Raw,
}

impl fmt::Display for ResidualSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualSource::Combined => "combined",
            ResidualSource::Raw => "raw",
        })
    }
}

impl FromStr for ResidualSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(ResidualSource::Combined),
            "raw" => Ok(ResidualSource::Raw),
            other => Err(Error::Config(format!("unknown residual source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRates {
    pub input: f64,
    pub attention: f64,
    pub hidden: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            input: 0.0,
            attention: 0.0,
            hidden: 0.0,
        }
    }
}

/// Architecture of a model; everything needed to rebuild its parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    pub activation: Activation,
    pub feature_width: usize,
    /// `K`: the stack holds `K + 1` steps.
    pub hops: usize,
    pub hidden: usize,
    /// Residual hidden layers `L`.
    pub num_layers: usize,
    pub num_classes: usize,
    /// Layers of the JK-branch MLP (jk attention only).
    pub jk_layers: usize,
    pub jk_include_step0: bool,
    pub label_layers: usize,
    pub residual: ResidualSource,
    pub dropout: DropoutRates,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.feature_width == 0 || self.hidden == 0 || self.num_classes == 0 {
            return bad("feature width, hidden size and class count must be positive".into());
        }
        if self.label_layers == 0 {
            return bad("the label head needs at least one layer".into());
        }
        if self.attention == AttentionKind::Jk {
            if self.jk_layers == 0 {
                return bad("the JK branch needs at least one layer".into());
            }
            if self.hops == 0 && !self.jk_include_step0 {
                return bad("jk attention needs hops >= 1 unless step 0 is included".into());
            }
        }
        for (name, p) in [
            ("input dropout", self.dropout.input),
            ("attention dropout", self.dropout.attention),
            ("dropout", self.dropout.hidden),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return bad("leaky-relu slope must be finite".into());
            }
        }
        Ok(())
    }

    fn jk_input_width(&self) -> usize {
        let steps = if self.jk_include_step0 { self.hops + 1 } else { self.hops };
        steps * self.feature_width
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub attention: AttentionParams<T>,
    pub jk_mlp: Option<Mlp<T>>,
    pub input_proj: Linear<T>,
    pub hidden: Vec<Linear<T>>,
    pub output: Linear<T>,
    pub label_head: Mlp<T>,
    /// Bumped on every mutable access; tapes record it.
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub attention: Vec<T>,
    pub jk_mlp: Option<Vec<LinearGrad<T>>>,
    pub input_proj: LinearGrad<T>,
    pub hidden: Vec<LinearGrad<T>>,
    pub output: LinearGrad<T>,
    pub label_head: Vec<LinearGrad<T>>,
}

impl<T: Real> ModelGrads<T> {
    /// Same order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.attention];
        let layers = self
            .jk_mlp
            .iter()
            .flatten()
            .chain(std::iter::once(&self.input_proj))
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.output))
            .chain(self.label_head.iter());
        for g in layers {
            out.push(g.weight.as_slice());
            out.push(&g.bias);
        }
        out
    }
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = config.activation;
        let d = config.feature_width;
        let h = config.hidden;
        let c = config.num_classes;
        let jk_mlp = if config.attention == AttentionKind::Jk {
            let mut widths = vec![config.jk_input_width()];
            widths.extend(std::iter::repeat_n(h, config.jk_layers));
            Some(Mlp::init(&widths, act, &mut rng)?)
        } else {
            None
        };
        let attention = AttentionParams::init(config.attention, act, d, h, &mut rng);
        let input_proj = Linear::init(d, h, &mut rng);
        let hidden = (0..config.num_layers).map(|_| Linear::init(h, h, &mut rng)).collect();
        let output = Linear::init(h, c, &mut rng);
        let mut label_widths = vec![c];
        label_widths.extend(std::iter::repeat_n(h, config.label_layers - 1));
        label_widths.push(c);
        let label_head = Mlp::init(&label_widths, act, &mut rng)?;
        Ok(Self {
            config,
            attention,
            jk_mlp,
            input_proj,
            hidden,
            output,
            label_head,
            version: 0,
        })
    }

    /// Rebuilds a model from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, values)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.len() != values.len() {
                return Err(Error::Input(format!(
                    "tensor {i} has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&values);
        }
        params.version = 0;
        Ok(params)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["attention.s".to_string()];
        let linear = |prefix: String, names: &mut Vec<String>| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        };
        if let Some(jk) = &self.jk_mlp {
            for i in 0..jk.layers.len() {
                linear(format!("jk_mlp.{i}"), &mut names);
            }
        }
        linear("input_proj".into(), &mut names);
        for i in 0..self.hidden.len() {
            linear(format!("hidden.{i}"), &mut names);
        }
        linear("output".into(), &mut names);
        for i in 0..self.label_head.layers.len() {
            linear(format!("label_head.{i}"), &mut names);
        }
        names
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.attention.s()];
        let layers = self
            .jk_mlp
            .iter()
            .flat_map(|m| m.layers.iter())
            .chain(std::iter::once(&self.input_proj))
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.output))
            .chain(self.label_head.layers.iter());
        for layer in layers {
            out.push(layer.weight.as_slice());
            out.push(&layer.bias);
        }
        out
    }

    /// Mutable views of every tensor; invalidates outstanding tapes.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        let mut out: Vec<&mut [T]> = vec![self.attention.s_mut()];
        let layers = self
            .jk_mlp
            .iter_mut()
            .flat_map(|m| m.layers.iter_mut())
            .chain(std::iter::once(&mut self.input_proj))
            .chain(self.hidden.iter_mut())
            .chain(std::iter::once(&mut self.output))
            .chain(self.label_head.layers.iter_mut());
        for layer in layers {
            let Linear { weight, bias } = layer;
            out.push(weight.as_mut_slice());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            attention: vec![T::zero(); self.attention.s().len()],
            jk_mlp: self
                .jk_mlp
                .as_ref()
                .map(|m| m.layers.iter().map(LinearGrad::zeros_like).collect()),
            input_proj: LinearGrad::zeros_like(&self.input_proj),
            hidden: self.hidden.iter().map(LinearGrad::zeros_like).collect(),
            output: LinearGrad::zeros_like(&self.output),
            label_head: self.label_head.layers.iter().map(LinearGrad::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

/// Model output for a batch of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Matrix<T>,
    pub probabilities: Matrix<T>,
    pub temperature: f64,
}

impl<T: Real> Prediction<T> {
    pub fn from_logits(logits: Matrix<T>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        let probabilities = softmax_rows(&logits, temperature);
        Ok(Self {
            logits,
            probabilities,
            temperature,
        })
    }
}

/// Everything a forward pass recorded for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    version: u64,
    train: bool,
    steps: Vec<Matrix<T>>,
    reference: Option<Matrix<T>>,
    attention: AttentionTrace<T>,
    jk_cache: Option<MlpCache<T>>,
    combined: Matrix<T>,
    /// Input to each hidden layer, then the final hidden state.
    hidden_inputs: Vec<Matrix<T>>,
    hidden_pre: Vec<Matrix<T>>,
    hidden_masks: Vec<Option<Matrix<T>>>,
    label_cache: MlpCache<T>,
}

impl<T: Real> Tape<T> {
    /// Hidden states `h0 .. hL` (after activation and dropout).
    pub fn hidden_states(&self) -> &[Matrix<T>] {
        &self.hidden_inputs
    }

    pub fn attention_weights(&self) -> &Matrix<T> {
        &self.attention.weights.w
    }
}

fn ensure_finite<T: Real>(m: &Matrix<T>, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(layer.to_string()))
    }
}

/// Forward pass over a batch. `steps` are the batch rows of `X^(0..K)`,
/// `x_inf` the batch rows of the stationary feature (smoothing only) and
/// `y_propagated` the batch rows of the label embedding.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    steps: &[Matrix<T>],
    x_inf: Option<&Matrix<T>>,
    y_propagated: &Matrix<T>,
    mode: Mode,
    temperature: f64,
) -> Result<(Prediction<T>, Tape<T>)> {
    let cfg = &params.config;
    if steps.len() != cfg.hops + 1 {
        return Err(Error::Config(format!(
            "model expects {} propagation steps, got {}",
            cfg.hops + 1,
            steps.len()
        )));
    }
    let n = steps[0].rows();
    if steps.iter().any(|m| m.shape() != (n, cfg.feature_width)) {
        return Err(Error::Config(format!(
            "propagated features must be {n}x{}",
            cfg.feature_width
        )));
    }
    if y_propagated.shape() != (n, cfg.num_classes) {
        return Err(Error::Config(format!(
            "label embedding is {}x{}, expected {n}x{}",
            y_propagated.rows(),
            y_propagated.cols(),
            cfg.num_classes
        )));
    }
    let reference_inf = match (cfg.attention, x_inf) {
        (AttentionKind::Smoothing, Some(x)) => {
            if x.shape() != (n, cfg.feature_width) {
                return Err(Error::Config("stationary feature has the wrong shape".into()));
            }
            Some(x.clone())
        }
        (AttentionKind::Smoothing, None) => {
            return Err(Error::Config("smoothing attention needs the stationary feature".into()))
        }
        // Only smoothing attention reads the stationary feature.
        _ => None,
    };

    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let p = cfg.dropout;

    let steps: Vec<Matrix<T>> = match rng.as_mut() {
        Some(r) if p.input > 0.0 => steps
            .iter()
            .map(|x| {
                let mask = dropout_mask(x.rows(), x.cols(), p.input, r);
                let mut x = x.clone();
                apply_mask(&mut x, mask.as_ref());
                x
            })
            .collect(),
        _ => steps.to_vec(),
    };

    let (reference, jk_cache) = match cfg.attention {
        AttentionKind::Jk => {
            let jk = params
                .jk_mlp
                .as_ref()
                .ok_or_else(|| Error::Config("jk attention without a JK MLP".into()))?;
            let (e, cache) =
                jk_branch_forward_traced(&steps, jk, cfg.jk_include_step0, rng.as_mut().map(|r| (p.hidden, r)))?;
            ensure_finite(&e, "jk_mlp")?;
            (Some(e), Some(cache))
        }
        _ => (reference_inf, None),
    };

    let score_mask = rng
        .as_mut()
        .and_then(|r| dropout_mask(n, steps.len(), p.attention, r));
    let attention = AttentionTrace::forward(&params.attention, &steps, reference.as_ref(), score_mask)?;
    ensure_finite(&attention.weights.w, "attention")?;
    let combined = combine(&steps, &attention.weights)?;

    let h0 = params.input_proj.forward(&combined);
    ensure_finite(&h0, "input_proj")?;
    let residual_input = match cfg.residual {
        ResidualSource::Combined => None,
        ResidualSource::Raw => Some(params.input_proj.forward(&steps[0])),
    };
    let residual: &Matrix<T> = residual_input.as_ref().unwrap_or(&h0);

    let mut hidden_inputs = Vec::with_capacity(params.hidden.len() + 1);
    let mut hidden_pre = Vec::with_capacity(params.hidden.len());
    let mut hidden_masks = Vec::with_capacity(params.hidden.len());
    let mut current: Cow<'_, Matrix<T>> = Cow::Owned(h0.clone());
    for (l, layer) in params.hidden.iter().enumerate() {
        let mut z = layer.forward(&current);
        z.add_assign(residual);
        let mut a = cfg.activation.apply_matrix(&z);
        let mask = rng.as_mut().and_then(|r| dropout_mask(n, a.cols(), p.hidden, r));
        apply_mask(&mut a, mask.as_ref());
        ensure_finite(&a, &format!("hidden.{l}"))?;
        hidden_inputs.push(current.into_owned());
        hidden_pre.push(z);
        hidden_masks.push(mask);
        current = Cow::Owned(a);
    }
    let mut logits = params.output.forward(&current);
    hidden_inputs.push(current.into_owned());
    ensure_finite(&logits, "output")?;

    let (label_out, label_cache) = params.label_head.forward(y_propagated, rng.as_mut().map(|r| (p.hidden, r)));
    ensure_finite(&label_out, "label_head")?;
    logits.add_assign(&label_out);
    ensure_finite(&logits, "logits")?;

    let prediction = Prediction::from_logits(logits, temperature)?;
    let tape = Tape {
        version: params.version,
        train: matches!(mode, Mode::Train { .. }),
        steps,
        reference,
        attention,
        jk_cache,
        combined,
        hidden_inputs,
        hidden_pre,
        hidden_masks,
        label_cache,
    };
    Ok((prediction, tape))
}

/// Reverse pass from the gradient of the loss with respect to the logits.
/// The propagated features and label embedding are constants and receive no
/// gradient.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    grad_logits: &Matrix<T>,
) -> Result<ModelGrads<T>> {
    if !tape.train {
        return Err(Error::Logic("backward needs a tape recorded in train mode".into()));
    }
    if tape.version != params.version {
        return Err(Error::Logic(
            "tape was recorded before the last parameter update".into(),
        ));
    }
    let cfg = &params.config;
    let h_last = tape.hidden_inputs.last().unwrap();
    if grad_logits.shape() != (h_last.rows(), cfg.num_classes) {
        return Err(Error::Input("logit gradient has the wrong shape".into()));
    }

    let output = params.output.param_grad(h_last, grad_logits);
    let (label_head, _) = params.label_head.backward(&tape.label_cache, grad_logits, false);

    let mut g = params.output.input_grad(grad_logits);
    let mut g_residual = Matrix::zeros(g.rows(), g.cols());
    let mut hidden = Vec::with_capacity(params.hidden.len());
    for l in (0..params.hidden.len()).rev() {
        if let Some(mask) = &tape.hidden_masks[l] {
            g.hadamard_assign(mask);
        }
        let g_z = cfg.activation.backprop(&tape.hidden_pre[l], &g);
        hidden.push(params.hidden[l].param_grad(&tape.hidden_inputs[l], &g_z));
        g_residual.add_assign(&g_z);
        g = params.hidden[l].input_grad(&g_z);
    }
    hidden.reverse();

    let (input_proj, g_combined) = match cfg.residual {
        ResidualSource::Combined => {
            g.add_assign(&g_residual);
            (
                params.input_proj.param_grad(&tape.combined, &g),
                params.input_proj.input_grad(&g),
            )
        }
        ResidualSource::Raw => {
            let mut grad = params.input_proj.param_grad(&tape.combined, &g);
            grad.accumulate(&params.input_proj.param_grad(&tape.steps[0], &g_residual));
            (grad, params.input_proj.input_grad(&g))
        }
    };

    let (g_w, _) = combine_backward(&tape.steps, &tape.attention.weights, &g_combined);
    let att = tape
        .attention
        .backward(&params.attention, &tape.steps, tape.reference.as_ref(), &g_w);

    let jk_mlp = match (&params.jk_mlp, &tape.jk_cache) {
        (Some(jk), Some(cache)) => {
            let g_e = att
                .reference
                .as_ref()
                .ok_or_else(|| Error::Logic("missing JK embedding gradient".into()))?;
            Some(jk.backward(cache, g_e, false).0)
        }
        _ => None,
    };

    Ok(ModelGrads {
        attention: att.s,
        jk_mlp,
        input_proj,
        hidden,
        output,
        label_head,
    })
}

/// Eval-mode prediction over all rows, processed in chunks of `chunk` rows.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    steps: &[Matrix<T>],
    x_inf: Option<&Matrix<T>>,
    y_propagated: &Matrix<T>,
    temperature: f64,
    chunk: usize,
) -> Result<Prediction<T>> {
    let n = y_propagated.rows();
    let chunk = chunk.max(1);
    let c = params.config.num_classes;
    let mut logits = Matrix::zeros(n, c);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch_steps: Vec<Matrix<T>> = steps.iter().map(|m| m.gather_rows(&rows)).collect();
        let batch_inf = x_inf.map(|m| m.gather_rows(&rows));
        let batch_y = y_propagated.gather_rows(&rows);
        let (pred, _) = forward(params, &batch_steps, batch_inf.as_ref(), &batch_y, Mode::Eval, 1.0)?;
        for (r, i) in rows.iter().enumerate() {
            logits.row_mut(*i).copy_from_slice(pred.logits.row(r));
        }
        start = end;
    }
    Prediction::from_logits(logits, temperature)
}

/// Eval-mode attention weights for every row.
pub fn attention_weights<T: Real>(
    params: &ModelParams<T>,
    steps: &[Matrix<T>],
    x_inf: Option<&Matrix<T>>,
    chunk: usize,
) -> Result<Matrix<T>> {
    let n = steps[0].rows();
    let y = Matrix::zeros(n, params.config.num_classes);
    let chunk = chunk.max(1);
    let mut w = Matrix::zeros(n, steps.len());
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch_steps: Vec<Matrix<T>> = steps.iter().map(|m| m.gather_rows(&rows)).collect();
        let batch_inf = x_inf.map(|m| m.gather_rows(&rows));
        let (_, tape) = forward(
            params,
            &batch_steps,
            batch_inf.as_ref(),
            &y.gather_rows(&rows),
            Mode::Eval,
            1.0,
        )?;
        for (r, i) in rows.iter().enumerate() {
            w.row_mut(*i).copy_from_slice(tape.attention_weights().row(r));
        }
        start = end;
    }
    Ok(w)
}

/// Seed for a named random stream derived from the root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.gen()
}
