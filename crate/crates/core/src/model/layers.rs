use rand::Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::Real;

/// Nonlinearity used in attention scores and hidden layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    z
                } else {
                    z * T::lit(slope)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (T::one() - s)
            }
        }
    }

    pub fn apply_matrix<T: Real>(self, z: &Matrix<T>) -> Matrix<T> {
        z.map(|v| self.apply(v))
    }

    /// `grad ∘ δ'(z)`
    pub fn backprop<T: Real>(self, z: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
        let mut out = grad.clone();
        for (g, &zv) in out.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *g *= self.derivative(zv);
        }
        out
    }
}

/// Inverted-dropout mask: entries are `0` or `1/(1-p)`. `None` when `p == 0`.
pub fn dropout_mask<T: Real, R: Rng>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Option<Matrix<T>> {
    if p <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - p));
    Some(Matrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

pub(crate) fn apply_mask<T: Real>(m: &mut Matrix<T>, mask: Option<&Matrix<T>>) {
    if let Some(mask) = mask {
        m.hadamard_assign(mask);
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| T::lit(rng.gen_range(-bound..=bound)));
        Self {
            weight,
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Parameter gradients for input `x` and upstream gradient `g`.
    pub fn param_grad(&self, x: &Matrix<T>, g: &Matrix<T>) -> LinearGrad<T> {
        LinearGrad {
            weight: x.t_matmul(g),
            bias: g.column_sums(),
        }
    }

    pub fn input_grad(&self, g: &Matrix<T>) -> Matrix<T> {
        g.matmul_t(&self.weight)
    }
}

impl<T: Real> LinearGrad<T> {
    pub fn zeros_like(layer: &Linear<T>) -> Self {
        Self {
            weight: Matrix::zeros(layer.in_width(), layer.out_width()),
            bias: vec![T::zero(); layer.out_width()],
        }
    }

    pub fn accumulate(&mut self, other: &LinearGrad<T>) {
        self.weight.add_assign(&other.weight);
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Plain feed-forward stack: activation and dropout between layers, none
/// after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation of each non-final layer.
    pre: Vec<Matrix<T>>,
    masks: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [in, hidden.., out]`; `widths.len() - 1` layers.
    pub fn init<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::Config(format!(
                    "MLP layer widths do not chain: {} -> {}",
                    pair[0].out_width(),
                    pair[1].in_width()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    /// Forward pass. `dropout` is `(p, rng)` in training mode.
    pub fn forward<R: Rng>(
        &self,
        x: &Matrix<T>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> (Matrix<T>, MlpCache<T>) {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n - 1),
            masks: Vec::with_capacity(n - 1),
        };
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if idx + 1 == n {
                return (z, cache);
            }
            let mut a = self.activation.apply_matrix(&z);
            let mask = match dropout.as_mut() {
                Some((p, rng)) => dropout_mask(a.rows(), a.cols(), *p, *rng),
                None => None,
            };
            apply_mask(&mut a, mask.as_ref());
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns on the last layer")
    }

    /// Returns per-layer gradients and, when requested, the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        grad_out: &Matrix<T>,
        want_input_grad: bool,
    ) -> (Vec<LinearGrad<T>>, Option<Matrix<T>>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            grads.push(layer.param_grad(&cache.inputs[idx], &g));
            if idx == 0 {
                let input_grad = want_input_grad.then(|| layer.input_grad(&g));
                grads.reverse();
                return (grads, input_grad);
            }
            let mut upstream = layer.input_grad(&g);
            apply_mask(&mut upstream, cache.masks[idx - 1].as_ref());
            g = self.activation.backprop(&cache.pre[idx - 1], &upstream);
        }
        unreachable!("loop returns at layer 0")
    }
}
