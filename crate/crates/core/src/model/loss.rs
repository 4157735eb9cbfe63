//! Temperature softmax and the stage losses. Loss values are accumulated in
//! `f64`; every gradient is taken with respect to the logits.

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::Real;

pub fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::Config(format!(
            "temperature {temperature} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Row-wise `softmax(logits / T)`, max-subtracted.
pub fn temperature_softmax<T: Real>(logits: &Matrix<T>, temperature: f64) -> Result<Matrix<T>> {
    check_temperature(temperature)?;
    Ok(softmax_rows(logits, temperature))
}

pub(crate) fn softmax_rows<T: Real>(logits: &Matrix<T>, temperature: f64) -> Matrix<T> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    let inv_t = T::lit(1.0 / temperature);
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = out.row_mut(i);
        let mut total = T::zero();
        for (p, &z) in o.iter_mut().zip(row) {
            // Dividing the shifted logit keeps T = 1 identical to plain softmax.
            *p = if temperature == 1.0 {
                (z - max).exp()
            } else {
                ((z - max) * inv_t).exp()
            };
            total += *p;
        }
        for p in o.iter_mut() {
            *p /= total;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: f64,
    /// Gradient with respect to the logits (same shape as the logits).
    pub grad_logits: Matrix<T>,
}

/// Mean cross-entropy over `targets = [(row, class)]`; `probabilities` is the
/// `T = 1` softmax of the logits.
pub fn ce_loss<T: Real>(probabilities: &Matrix<T>, targets: &[(usize, usize)]) -> Result<LossOutput<T>> {
    if targets.is_empty() {
        return Err(Error::Logic("cross-entropy over an empty batch".into()));
    }
    let c = probabilities.cols();
    let scale = 1.0 / targets.len() as f64;
    let mut grad = Matrix::zeros(probabilities.rows(), c);
    let mut total = 0.0;
    for &(row, class) in targets {
        if row >= probabilities.rows() || class >= c {
            return Err(Error::Input(format!("target ({row}, {class}) out of range")));
        }
        let p = probabilities[(row, class)].as_f64();
        total -= p.ln();
        for (g, &pj) in grad.row_mut(row).iter_mut().zip(probabilities.row(row)) {
            *g += T::lit(pj.as_f64() * scale);
        }
        grad[(row, class)] -= T::lit(scale);
    }
    Ok(LossOutput {
        value: total * scale,
        grad_logits: grad,
    })
}

/// `(1/|V_r|) Σ_i α_i KL(P_prev_i ‖ P_cur_i)` over `entries = [(row, α)]`.
/// `p_cur` is `softmax(logits / T)`; `p_prev` is constant.
pub fn kl_loss<T: Real>(
    p_prev: &Matrix<T>,
    p_cur: &Matrix<T>,
    entries: &[(usize, f64)],
    temperature: f64,
) -> Result<LossOutput<T>> {
    check_temperature(temperature)?;
    if p_prev.shape() != p_cur.shape() {
        return Err(Error::Input("KL: soft-label and prediction shapes differ".into()));
    }
    let mut grad = Matrix::zeros(p_cur.rows(), p_cur.cols());
    if entries.is_empty() {
        return Ok(LossOutput {
            value: 0.0,
            grad_logits: grad,
        });
    }
    let scale = 1.0 / entries.len() as f64;
    let mut total = 0.0;
    for &(row, alpha) in entries {
        if row >= p_cur.rows() {
            return Err(Error::Input(format!("reliable row {row} out of range")));
        }
        let q = p_prev.row(row);
        let p = p_cur.row(row);
        let mut kl = 0.0;
        let mut q_mass = 0.0;
        for (&qj, &pj) in q.iter().zip(p) {
            let (qj, pj) = (qj.as_f64(), pj.as_f64());
            q_mass += qj;
            if qj > 0.0 {
                kl += qj * (qj / pj).ln();
            }
        }
        total += alpha * kl;
        let coef = alpha * scale / temperature;
        for ((g, &qj), &pj) in grad.row_mut(row).iter_mut().zip(q).zip(p) {
            *g += T::lit(coef * (q_mass * pj.as_f64() - qj.as_f64()));
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad_logits: grad,
    })
}

/// Row-wise log-softmax of `logits / T` in `f64`.
fn log_softmax_row<T: Real>(row: &[T], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(row.iter().map(|z| z.as_f64() / temperature));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = out.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    for v in out.iter_mut() {
        *v -= log_total;
    }
}

/// [`ce_loss`] computed from the logits through a log-softmax, so the value
/// stays finite when a probability underflows.
pub fn ce_loss_from_logits<T: Real>(logits: &Matrix<T>, targets: &[(usize, usize)]) -> Result<LossOutput<T>> {
    if targets.is_empty() {
        return Err(Error::Logic("cross-entropy over an empty batch".into()));
    }
    let c = logits.cols();
    let scale = 1.0 / targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), c);
    let mut total = 0.0;
    let mut logp = Vec::with_capacity(c);
    for &(row, class) in targets {
        if row >= logits.rows() || class >= c {
            return Err(Error::Input(format!("target ({row}, {class}) out of range")));
        }
        log_softmax_row(logits.row(row), 1.0, &mut logp);
        total -= logp[class];
        for (j, g) in grad.row_mut(row).iter_mut().enumerate() {
            let indicator = if j == class { 1.0 } else { 0.0 };
            *g += T::lit((logp[j].exp() - indicator) * scale);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad_logits: grad,
    })
}

/// [`kl_loss`] computed from the logits through a log-softmax at
/// temperature `T`.
pub fn kl_loss_from_logits<T: Real>(
    p_prev: &Matrix<T>,
    logits: &Matrix<T>,
    entries: &[(usize, f64)],
    temperature: f64,
) -> Result<LossOutput<T>> {
    check_temperature(temperature)?;
    if p_prev.shape() != logits.shape() {
        return Err(Error::Input("KL: soft-label and logit shapes differ".into()));
    }
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if entries.is_empty() {
        return Ok(LossOutput {
            value: 0.0,
            grad_logits: grad,
        });
    }
    let scale = 1.0 / entries.len() as f64;
    let mut total = 0.0;
    let mut logp = Vec::with_capacity(logits.cols());
    for &(row, alpha) in entries {
        if row >= logits.rows() {
            return Err(Error::Input(format!("reliable row {row} out of range")));
        }
        log_softmax_row(logits.row(row), temperature, &mut logp);
        let q = p_prev.row(row);
        let mut kl = 0.0;
        let mut q_mass = 0.0;
        for (&qj, &lp) in q.iter().zip(&logp) {
            let qj = qj.as_f64();
            q_mass += qj;
            if qj > 0.0 {
                kl += qj * (qj.ln() - lp);
            }
        }
        total += alpha * kl;
        let coef = alpha * scale / temperature;
        for ((g, &qj), &lp) in grad.row_mut(row).iter_mut().zip(q).zip(&logp) {
            *g += T::lit(coef * (q_mass * lp.exp() - qj.as_f64()));
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad_logits: grad,
    })
}

/// `L = L_CE + γ · L_KD`.
pub fn total_loss(ce: f64, kl: f64, gamma: f64) -> f64 {
    ce + gamma * kl
}
