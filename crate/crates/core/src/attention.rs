//! Node-adaptive weights over propagation steps and the weighted combination
//! of the propagated features.
//!
//! Every mechanism scores step `l` of node `i` as `δ([X_i^(l) ∥ R_i] · s)`
//! with one shared vector `s`; only the reference `R_i` differs:
//!
//! * smoothing: the stationary feature `X_i^(∞)`;
//! * recursive: the running combination of steps `0..l`, normalized over
//!   those steps (zero at `l = 0`);
//! * jk: the embedding `E_i` from an MLP over the concatenated steps.
//!
//! Scores are turned into weights by a softmax over all `K + 1` steps. The
//! `Uniform` kind is the fixed-averaging baseline with no parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::model::layers::{Activation, Mlp, MlpCache};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Smoothing,
    Recursive,
    Jk,
    Uniform,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Smoothing => "smoothing",
            AttentionKind::Recursive => "recursive",
            AttentionKind::Jk => "jk",
            AttentionKind::Uniform => "uniform",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AttentionKind::Smoothing => 0,
            AttentionKind::Recursive => 1,
            AttentionKind::Jk => 2,
            AttentionKind::Uniform => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => AttentionKind::Smoothing,
            1 => AttentionKind::Recursive,
            2 => AttentionKind::Jk,
            3 => AttentionKind::Uniform,
            _ => return None,
        })
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoothing" => Ok(AttentionKind::Smoothing),
            "recursive" => Ok(AttentionKind::Recursive),
            "jk" => Ok(AttentionKind::Jk),
            "uniform" => Ok(AttentionKind::Uniform),
            other => Err(Error::Config(format!(
                "unknown attention kind {other:?} (expected smoothing, recursive, jk or uniform)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    kind: AttentionKind,
    /// `[s_feature ; s_reference]`
    s: Vec<T>,
    activation: Activation,
    feature_width: usize,
    reference_width: usize,
}

impl<T: Real> AttentionParams<T> {
    /// `reference_width` is `d` for smoothing/recursive and the JK embedding
    /// width for jk; ignored for the uniform baseline.
    pub fn new(
        kind: AttentionKind,
        s: Vec<T>,
        activation: Activation,
        feature_width: usize,
        reference_width: usize,
    ) -> Result<Self> {
        let reference_width = match kind {
            AttentionKind::Smoothing | AttentionKind::Recursive => feature_width,
            AttentionKind::Jk => reference_width,
            AttentionKind::Uniform => 0,
        };
        let expected = match kind {
            AttentionKind::Uniform => 0,
            _ => feature_width + reference_width,
        };
        if s.len() != expected {
            return Err(Error::Config(format!(
                "{kind} attention vector has length {}, expected {expected}",
                s.len()
            )));
        }
        Ok(Self {
            kind,
            s,
            activation,
            feature_width,
            reference_width,
        })
    }

    pub fn zeros(
        kind: AttentionKind,
        activation: Activation,
        feature_width: usize,
        reference_width: usize,
    ) -> Self {
        let width = match kind {
            AttentionKind::Smoothing | AttentionKind::Recursive => 2 * feature_width,
            AttentionKind::Jk => feature_width + reference_width,
            AttentionKind::Uniform => 0,
        };
        Self::new(kind, vec![T::zero(); width], activation, feature_width, reference_width)
            .expect("width computed from kind")
    }

    /// Uniform in `±1/√len(s)`.
    pub fn init<R: Rng>(
        kind: AttentionKind,
        activation: Activation,
        feature_width: usize,
        reference_width: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(kind, activation, feature_width, reference_width);
        let bound = 1.0 / (params.s.len().max(1) as f64).sqrt();
        for v in &mut params.s {
            *v = T::lit(rng.gen_range(-bound..=bound));
        }
        params
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn s(&self) -> &[T] {
        &self.s
    }

    pub fn s_mut(&mut self) -> &mut [T] {
        &mut self.s
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn reference_width(&self) -> usize {
        self.reference_width
    }

    fn split_s(&self) -> (&[T], &[T]) {
        self.s.split_at(self.feature_width)
    }
}

/// `N × (K+1)` row-stochastic weights `w_i(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w: Matrix<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn num_steps(&self) -> usize {
        self.w.cols()
    }
}

/// Forward intermediates needed by [`AttentionTrace::backward`].
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub weights: AttentionWeights<T>,
    pre: Matrix<T>,
    scores: Matrix<T>,
    mask: Option<Matrix<T>>,
    /// Recursive kind only: the reference vector used at each step.
    running: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrad<T> {
    pub s: Vec<T>,
    pub steps: Vec<Matrix<T>>,
    /// Gradient for the stationary feature (smoothing) or JK embedding (jk).
    pub reference: Option<Matrix<T>>,
}

fn check_steps<T: Real>(steps: &[Matrix<T>], feature_width: usize) -> Result<(usize, usize)> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Input("attention needs at least one propagation step".into()))?;
    let (n, d) = first.shape();
    if steps.iter().any(|m| m.shape() != (n, d)) {
        return Err(Error::Input("propagation steps differ in shape".into()));
    }
    if d != feature_width {
        return Err(Error::Config(format!(
            "attention expects feature width {feature_width}, steps have {d}"
        )));
    }
    Ok((n, d))
}

/// Softmax of a slice into `out`, max-subtracted.
fn softmax_into<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax backward: `out_k = p_k (g_k - Σ_j p_j g_j)`.
fn softmax_backward<T: Real>(p: &[T], g: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pk), &gk) in out.iter_mut().zip(p).zip(g) {
        *o = pk * (gk - dot);
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<T: Real> AttentionTrace<T> {
    /// Computes weights for any kind. `reference` is `X^(∞)` for smoothing
    /// and `E` for jk, `None` otherwise. `score_mask` is an optional inverted
    /// dropout mask applied to the activated scores before the softmax.
    pub fn forward(
        params: &AttentionParams<T>,
        steps: &[Matrix<T>],
        reference: Option<&Matrix<T>>,
        score_mask: Option<Matrix<T>>,
    ) -> Result<Self> {
        let (n, d) = check_steps(steps, params.feature_width)?;
        let k1 = steps.len();
        match params.kind {
            AttentionKind::Smoothing | AttentionKind::Jk => {
                let r = reference.ok_or_else(|| {
                    Error::Input(format!("{} attention needs a reference matrix", params.kind))
                })?;
                if r.shape() != (n, params.reference_width) {
                    return Err(Error::Config(format!(
                        "{} reference is {}x{}, expected {n}x{}",
                        params.kind,
                        r.rows(),
                        r.cols(),
                        params.reference_width
                    )));
                }
            }
            _ => {}
        }
        if let Some(mask) = &score_mask {
            if mask.shape() != (n, k1) {
                return Err(Error::Input("attention dropout mask has wrong shape".into()));
            }
        }

        let mut pre = Matrix::zeros(n, k1);
        let mut scores = Matrix::zeros(n, k1);
        let mut w = Matrix::zeros(n, k1);
        let mut running = Vec::new();

        if params.kind == AttentionKind::Uniform {
            let u = T::one() / T::lit(k1 as f64);
            return Ok(Self {
                weights: AttentionWeights {
                    w: Matrix::filled(n, k1, u),
                },
                pre,
                scores,
                mask: None,
                running,
            });
        }

        let (s_feat, s_ref) = params.split_s();
        let act = params.activation;
        let masked = |i: usize, l: usize, a: T| match &score_mask {
            Some(m) => a * m[(i, l)],
            None => a,
        };

        match params.kind {
            AttentionKind::Smoothing | AttentionKind::Jk => {
                let r = reference.unwrap();
                for i in 0..n {
                    let ref_term = dot(r.row(i), s_ref);
                    for (l, x) in steps.iter().enumerate() {
                        let z = dot(x.row(i), s_feat) + ref_term;
                        pre[(i, l)] = z;
                        scores[(i, l)] = masked(i, l, act.apply(z));
                    }
                }
            }
            AttentionKind::Recursive => {
                running = vec![Matrix::zeros(n, d); k1];
                let mut partial = vec![T::zero(); k1];
                for i in 0..n {
                    for l in 0..k1 {
                        if l > 0 {
                            softmax_into(&scores.row(i)[..l], &mut partial[..l]);
                            let ref_row = running[l].row_mut(i);
                            for (k, &v) in partial[..l].iter().enumerate() {
                                for (rv, &xv) in ref_row.iter_mut().zip(steps[k].row(i)) {
                                    *rv += v * xv;
                                }
                            }
                        }
                        let z = dot(steps[l].row(i), s_feat) + dot(running[l].row(i), s_ref);
                        pre[(i, l)] = z;
                        scores[(i, l)] = masked(i, l, act.apply(z));
                    }
                }
            }
            AttentionKind::Uniform => unreachable!(),
        }

        for i in 0..n {
            softmax_into(scores.row(i), w.row_mut(i));
        }
        Ok(Self {
            weights: AttentionWeights { w },
            pre,
            scores,
            mask: score_mask,
            running,
        })
    }

    /// Reverse pass for upstream gradient `grad_w` (same shape as the weights).
    pub fn backward(
        &self,
        params: &AttentionParams<T>,
        steps: &[Matrix<T>],
        reference: Option<&Matrix<T>>,
        grad_w: &Matrix<T>,
    ) -> AttentionGrad<T> {
        let (n, d) = steps[0].shape();
        let k1 = steps.len();
        let mut g_s = vec![T::zero(); params.s.len()];
        let mut g_steps = vec![Matrix::zeros(n, d); k1];
        if params.kind == AttentionKind::Uniform {
            return AttentionGrad {
                s: g_s,
                steps: g_steps,
                reference: None,
            };
        }
        let mut g_ref_out = reference.map(|r| Matrix::zeros(r.rows(), r.cols()));
        let (s_feat, s_ref) = params.split_s();
        let fw = params.feature_width;
        let act = params.activation;

        let mut g_scores = vec![T::zero(); k1];
        let mut partial = vec![T::zero(); k1];
        let mut g_partial = vec![T::zero(); k1];
        let mut tmp = vec![T::zero(); k1];
        let mut g_ref = vec![T::zero(); params.reference_width];

        for i in 0..n {
            softmax_backward(self.weights.w.row(i), grad_w.row(i), &mut g_scores);
            for l in (0..k1).rev() {
                let mut g_z = g_scores[l] * act.derivative(self.pre[(i, l)]);
                if let Some(m) = &self.mask {
                    g_z *= m[(i, l)];
                }
                if g_z == T::zero() {
                    continue;
                }
                for (c, (&xv, &sv)) in steps[l].row(i).iter().zip(s_feat).enumerate() {
                    g_s[c] += g_z * xv;
                    g_steps[l][(i, c)] += g_z * sv;
                }
                let ref_row = match params.kind {
                    AttentionKind::Recursive => self.running[l].row(i),
                    _ => reference.unwrap().row(i),
                };
                for (c, (&rv, &sv)) in ref_row.iter().zip(s_ref).enumerate() {
                    g_s[fw + c] += g_z * rv;
                    g_ref[c] = g_z * sv;
                }
                match params.kind {
                    AttentionKind::Recursive => {
                        if l == 0 {
                            continue;
                        }
                        softmax_into(&self.scores.row(i)[..l], &mut partial[..l]);
                        for k in 0..l {
                            let xk = steps[k].row(i);
                            g_partial[k] = dot(&g_ref, xk);
                            let gk = g_steps[k].row_mut(i);
                            for (gv, &r) in gk.iter_mut().zip(&g_ref) {
                                *gv += partial[k] * r;
                            }
                        }
                        softmax_backward(&partial[..l], &g_partial[..l], &mut tmp[..l]);
                        for k in 0..l {
                            g_scores[k] += tmp[k];
                        }
                    }
                    _ => {
                        let out = g_ref_out.as_mut().unwrap().row_mut(i);
                        for (o, &r) in out.iter_mut().zip(&g_ref) {
                            *o += r;
                        }
                    }
                }
            }
        }
        AttentionGrad {
            s: g_s,
            steps: g_steps,
            reference: match params.kind {
                AttentionKind::Smoothing | AttentionKind::Jk => g_ref_out,
                _ => None,
            },
        }
    }
}

fn expect_kind<T: Real>(params: &AttentionParams<T>, kind: AttentionKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Config(format!(
            "expected {kind} attention parameters, got {}",
            params.kind
        )));
    }
    Ok(())
}

/// Weights scored against the stationary feature `X^(∞)`.
pub fn smoothing_attention<T: Real>(
    steps: &[Matrix<T>],
    x_inf: &Matrix<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionWeights<T>> {
    expect_kind(params, AttentionKind::Smoothing)?;
    Ok(AttentionTrace::forward(params, steps, Some(x_inf), None)?.weights)
}

/// Weights scored against the running combination of earlier steps.
pub fn recursive_attention<T: Real>(
    steps: &[Matrix<T>],
    params: &AttentionParams<T>,
) -> Result<AttentionWeights<T>> {
    expect_kind(params, AttentionKind::Recursive)?;
    Ok(AttentionTrace::forward(params, steps, None, None)?.weights)
}

/// Weights scored against the JK embedding `E`.
pub fn jk_attention<T: Real>(
    steps: &[Matrix<T>],
    embedding: &Matrix<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionWeights<T>> {
    expect_kind(params, AttentionKind::Jk)?;
    Ok(AttentionTrace::forward(params, steps, Some(embedding), None)?.weights)
}

/// Columns fed to the JK branch: steps `1..=K`, or `0..=K` with `include_step0`.
pub fn jk_input<T: Real>(steps: &[Matrix<T>], include_step0: bool) -> Result<Matrix<T>> {
    let from = usize::from(!include_step0);
    if steps.len() <= from {
        return Err(Error::Config(
            "the JK branch needs at least one propagated step (K >= 1)".into(),
        ));
    }
    let parts: Vec<&Matrix<T>> = steps[from..].iter().collect();
    Matrix::hstack(&parts)
}

/// `E = MLP(X^(1) ∥ … ∥ X^(K))`, evaluated without dropout.
pub fn jk_branch_forward<T: Real>(
    steps: &[Matrix<T>],
    jk_mlp: &Mlp<T>,
    include_step0: bool,
) -> Result<Matrix<T>> {
    let (embedding, _) = jk_branch_forward_traced::<T, rand_chacha::ChaCha8Rng>(
        steps,
        jk_mlp,
        include_step0,
        None,
    )?;
    Ok(embedding)
}

pub(crate) fn jk_branch_forward_traced<T: Real, R: Rng>(
    steps: &[Matrix<T>],
    jk_mlp: &Mlp<T>,
    include_step0: bool,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Matrix<T>, MlpCache<T>)> {
    let input = jk_input(steps, include_step0)?;
    if input.cols() != jk_mlp.in_width() {
        return Err(Error::Config(format!(
            "JK MLP expects input width {}, concatenated steps have {}",
            jk_mlp.in_width(),
            input.cols()
        )));
    }
    Ok(jk_mlp.forward(&input, dropout))
}

/// `H_i = Σ_l w_i(l) X_i^(l)`.
pub fn combine<T: Real>(steps: &[Matrix<T>], weights: &AttentionWeights<T>) -> Result<Matrix<T>> {
    let (n, d) = steps
        .first()
        .map(Matrix::shape)
        .ok_or_else(|| Error::Input("combine needs at least one step".into()))?;
    if weights.w.shape() != (n, steps.len()) {
        return Err(Error::Input(format!(
            "weights are {}x{}, expected {n}x{}",
            weights.w.rows(),
            weights.w.cols(),
            steps.len()
        )));
    }
    if steps.iter().any(|m| m.shape() != (n, d)) {
        return Err(Error::Input("propagation steps differ in shape".into()));
    }
    let mut h = Matrix::zeros(n, d);
    for i in 0..n {
        let out = h.row_mut(i);
        for (l, x) in steps.iter().enumerate() {
            let wl = weights.w[(i, l)];
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += wl * v;
            }
        }
    }
    Ok(h)
}

/// Gradients of [`combine`] with respect to the weights and to every step.
pub fn combine_backward<T: Real>(
    steps: &[Matrix<T>],
    weights: &AttentionWeights<T>,
    grad_h: &Matrix<T>,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (n, d) = grad_h.shape();
    let mut g_w = Matrix::zeros(n, steps.len());
    let mut g_steps = vec![Matrix::zeros(n, d); steps.len()];
    for i in 0..n {
        let g = grad_h.row(i);
        for (l, x) in steps.iter().enumerate() {
            g_w[(i, l)] = dot(g, x.row(i));
            let wl = weights.w[(i, l)];
            for (o, &gv) in g_steps[l].row_mut(i).iter_mut().zip(g) {
                *o = wl * gv;
            }
        }
    }
    (g_w, g_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_steps(rng: &mut ChaCha8Rng, n: usize, d: usize, k1: usize) -> Vec<Matrix<f64>> {
        (0..k1)
            .map(|_| Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn assert_row_stochastic(w: &Matrix<f64>) {
        for i in 0..w.rows() {
            let row = w.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_vector_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = random_steps(&mut rng, 5, 3, 4);
        let xinf = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let act = Activation::default();
        let sm = smoothing_attention(&steps, &xinf, &AttentionParams::zeros(AttentionKind::Smoothing, act, 3, 3)).unwrap();
        let rc = recursive_attention(&steps, &AttentionParams::zeros(AttentionKind::Recursive, act, 3, 3)).unwrap();
        let jk = jk_attention(&steps, &xinf, &AttentionParams::zeros(AttentionKind::Jk, act, 3, 3)).unwrap();
        for w in [sm.w, rc.w, jk.w] {
            assert!(w.max_abs_diff(&Matrix::filled(5, 4, 0.25)) < 1e-15);
        }
    }

    #[test]
    fn crafted_scores_softmax() {
        // One node, one feature: X^(0) = 0, X^(1) = ln 2, s_feat = 1, s_ref = 0.
        let steps = vec![
            Matrix::from_rows(&[vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![2f64.ln()]]).unwrap(),
        ];
        let xinf = Matrix::zeros(1, 1);
        let params = AttentionParams::new(
            AttentionKind::Smoothing,
            vec![1.0, 0.0],
            Activation::LeakyRelu { slope: 0.2 },
            1,
            1,
        )
        .unwrap();
        let w = smoothing_attention(&steps, &xinf, &params).unwrap().w;
        assert!((w[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recursive_single_step_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let steps = random_steps(&mut rng, 4, 2, 1);
        let params = AttentionParams::init(AttentionKind::Recursive, Activation::default(), 2, 2, &mut rng);
        let w = recursive_attention(&steps, &params).unwrap().w;
        assert_eq!(w, Matrix::filled(4, 1, 1.0));
    }

    #[test]
    fn random_params_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [AttentionKind::Smoothing, AttentionKind::Recursive, AttentionKind::Jk] {
            let steps = random_steps(&mut rng, 6, 3, 5);
            let reference = Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
            let params = AttentionParams::init(kind, Activation::default(), 3, 3, &mut rng);
            let trace = AttentionTrace::forward(&params, &steps, Some(&reference), None).unwrap();
            assert_row_stochastic(&trace.weights.w);
        }
    }

    #[test]
    fn jk_with_zero_embedding_ignores_reference_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let steps = random_steps(&mut rng, 5, 3, 3);
        let mut params = AttentionParams::init(AttentionKind::Jk, Activation::default(), 3, 2, &mut rng);
        let zero_e = Matrix::zeros(5, 2);
        let a = jk_attention(&steps, &zero_e, &params).unwrap();
        params.s_mut()[3..].iter_mut().for_each(|v| *v = 7.5);
        let b = jk_attention(&steps, &zero_e, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_and_kind_checks() {
        assert!(matches!(
            AttentionParams::<f64>::new(AttentionKind::Smoothing, vec![0.0; 5], Activation::Sigmoid, 3, 3),
            Err(Error::Config(_))
        ));
        let steps = vec![Matrix::<f64>::zeros(2, 3)];
        let params = AttentionParams::zeros(AttentionKind::Recursive, Activation::Sigmoid, 3, 3);
        assert!(matches!(
            smoothing_attention(&steps, &Matrix::zeros(2, 3), &params),
            Err(Error::Config(_))
        ));
        let wide = AttentionParams::zeros(AttentionKind::Recursive, Activation::Sigmoid, 4, 4);
        assert!(matches!(recursive_attention(&steps, &wide), Err(Error::Config(_))));
    }

    #[test]
    fn jk_branch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps = random_steps(&mut rng, 4, 3, 3);
        let zero = Mlp::from_layers(vec![Linear::zeros(6, 5), Linear::zeros(5, 2)], Activation::default()).unwrap();
        let e = jk_branch_forward(&steps, &zero, false).unwrap();
        assert_eq!(e, Matrix::zeros(4, 2));

        let one_step = random_steps(&mut rng, 4, 3, 2);
        let identity = Mlp::from_layers(
            vec![Linear {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
            Activation::default(),
        )
        .unwrap();
        let e = jk_branch_forward(&one_step, &identity, false).unwrap();
        assert_eq!(e, one_step[1]);

        assert!(matches!(jk_branch_forward(&one_step, &zero, false), Err(Error::Config(_))));
        assert!(jk_input(&one_step[..1], false).is_err());
        assert_eq!(jk_input(&one_step, true).unwrap().cols(), 6);
    }

    #[test]
    fn combine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let steps = random_steps(&mut rng, 4, 3, 2);
        let onehot = AttentionWeights {
            w: Matrix::from_fn(4, 2, |_, l| if l == 0 { 1.0 } else { 0.0 }),
        };
        assert_eq!(combine(&steps, &onehot).unwrap(), steps[0]);

        let uniform = AttentionWeights {
            w: Matrix::filled(4, 2, 0.5),
        };
        let h = combine(&steps, &uniform).unwrap();
        let mut expected = steps[0].clone();
        expected.add_assign(&steps[1]);
        expected.scale(0.5);
        assert!(h.max_abs_diff(&expected) < 1e-15);

        let bad = AttentionWeights {
            w: Matrix::filled(4, 3, 0.5),
        };
        assert!(matches!(combine(&steps, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_kind_has_no_parameters() {
        let steps = vec![Matrix::<f64>::zeros(3, 2); 4];
        let params = AttentionParams::zeros(AttentionKind::Uniform, Activation::default(), 2, 0);
        assert!(params.s().is_empty());
        let trace = AttentionTrace::forward(&params, &steps, None, None).unwrap();
        assert_eq!(trace.weights.w, Matrix::filled(3, 4, 0.25));
    }
}
