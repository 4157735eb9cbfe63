//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's own normalization or matrix products.

#![allow(dead_code)]

use propmlp::attention::AttentionKind;
use propmlp::dense::Matrix;
use propmlp::graph::{build_graph, CsrGraph};
use propmlp::model::layers::Activation;
use propmlp::model::loss::{ce_loss_from_logits, kl_loss_from_logits, temperature_softmax, total_loss};
use propmlp::model::{backward, forward, DropoutRates, Mode, ModelConfig, ModelParams, ResidualSource};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Connected undirected graph: a random spanning tree plus `extra` random edges.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize, extra: usize) -> (CsrGraph, Vec<(u32, u32)>) {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        edges.push((order[i], parent));
    }
    for _ in 0..extra {
        let u = rng.gen_range(0..n as u32);
        let v = rng.gen_range(0..n as u32);
        if u != v {
            edges.push((u, v));
        }
    }
    let graph = build_graph(&edges, n).unwrap();
    (graph, edges)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Dense `D̃^(r-1)(A+I)D̃^(-r)` straight from the definition.
pub fn dense_normalized(edges: &[(u32, u32)], n: usize, r: f64) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        if u != v {
            a[u as usize][v as usize] = 1.0;
            a[v as usize][u as usize] = 1.0;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|row| row.iter().sum::<f64>()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| deg[i].powf(r - 1.0) * a[i][j] * deg[j].powf(-r)).collect())
        .collect()
}

pub fn dense_apply(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = x.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| row.iter().zip(x).map(|(&aij, xj)| aij * xj[c]).sum())
                .collect()
        })
        .collect()
}

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Max |a - b| over all entries divided by the largest |b|.
pub fn relative_error(a: &Matrix<f64>, b: &[Vec<f64>]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            diff = diff.max((a[(i, j)] - v).abs());
            scale = scale.max(v.abs());
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Power iteration of `a` on `x` until successive iterates differ by less
/// than `tol` in every entry.
pub fn power_iterate(a: &[Vec<f64>], x: &[Vec<f64>], tol: f64, max_iter: usize) -> Vec<Vec<f64>> {
    let mut cur = x.to_vec();
    for _ in 0..max_iter {
        let next = dense_apply(a, &cur);
        let delta = next
            .iter()
            .flatten()
            .zip(cur.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        cur = next;
        if delta < tol {
            return cur;
        }
    }
    panic!("power iteration did not converge in {max_iter} steps");
}

/// One training objective: CE on `targets` plus γ·KL on `kd_rows`.
pub struct Objective {
    pub targets: Vec<(usize, usize)>,
    pub p_prev: Matrix<f64>,
    pub kd_rows: Vec<(usize, f64)>,
    pub gamma: f64,
    pub temperature: f64,
    pub seed: u64,
}

pub struct Instance<'a> {
    pub steps: &'a [Matrix<f64>],
    pub x_inf: Option<&'a Matrix<f64>>,
    pub y: &'a Matrix<f64>,
}

pub fn objective_value(params: &ModelParams<f64>, inst: &Instance<'_>, obj: &Objective) -> f64 {
    let (pred, _) = forward(params, inst.steps, inst.x_inf, inst.y, Mode::Train { seed: obj.seed }, obj.temperature).unwrap();
    let ce = ce_loss_from_logits(&pred.logits, &obj.targets).unwrap();
    let kl = kl_loss_from_logits(&obj.p_prev, &pred.logits, &obj.kd_rows, obj.temperature).unwrap();
    total_loss(ce.value, kl.value, obj.gamma)
}

/// Analytic gradient of the objective, one vector per parameter tensor.
pub fn objective_gradient(params: &ModelParams<f64>, inst: &Instance<'_>, obj: &Objective) -> Vec<Vec<f64>> {
    let (pred, tape) = forward(params, inst.steps, inst.x_inf, inst.y, Mode::Train { seed: obj.seed }, obj.temperature).unwrap();
    let mut grad = ce_loss_from_logits(&pred.logits, &obj.targets).unwrap().grad_logits;
    let mut kl = kl_loss_from_logits(&obj.p_prev, &pred.logits, &obj.kd_rows, obj.temperature)
        .unwrap()
        .grad_logits;
    kl.scale(obj.gamma);
    grad.add_assign(&kl);
    let grads = backward(params, &tape, &grad).unwrap();
    grads.tensors().into_iter().map(<[f64]>::to_vec).collect()
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)` between the analytic
/// gradient and central differences with step `h`.
pub fn gradient_check(params: &ModelParams<f64>, inst: &Instance<'_>, obj: &Objective, h: f64, floor: f64) -> (f64, String) {
    let analytic = objective_gradient(params, inst, obj);
    let names = params.tensor_names();
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (t, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = probe.tensors()[t][k];
            probe.tensors_mut()[t][k] = orig + h;
            let up = objective_value(&probe, inst, obj);
            probe.tensors_mut()[t][k] = orig - h;
            let down = objective_value(&probe, inst, obj);
            probe.tensors_mut()[t][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{}[{k}]: analytic {a:e}, numeric {numeric:e}", names[t]));
            }
        }
    }
    worst
}

/// Gradient check on a small random instance: N = 8, d = 4, K = 3, L = 2.
/// Returns the worst relative error and where it occurred.
pub fn gradient_case(kind: AttentionKind, gamma: f64, activation: Activation, dropout: DropoutRates, seed: u64) -> (f64, String) {
    let (n, d, k, c) = (8, 4, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<Matrix<f64>> = (0..=k).map(|_| random_matrix(&mut rng, n, d)).collect();
    let x_inf = random_matrix(&mut rng, n, d);
    let y = Matrix::from_fn(n, c, |_, _| rng.gen_range(0.0..1.0));
    let config = ModelConfig {
        attention: kind,
        activation,
        feature_width: d,
        hops: k,
        hidden: 5,
        num_layers: 2,
        num_classes: c,
        jk_layers: 2,
        jk_include_step0: false,
        label_layers: 2,
        residual: ResidualSource::Combined,
        dropout,
    };
    let mut params = ModelParams::<f64>::init(config, seed).unwrap();
    // Default init leaves the attention vector small; spread it so the
    // softmax is far from uniform.
    for v in params.attention.s_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let p_prev = Matrix::from_fn(n, c, |_, _| rng.gen_range(0.1..1.0));
    let p_prev = temperature_softmax(&p_prev, 1.0).unwrap();
    let obj = Objective {
        targets: vec![(0, 0), (1, 2), (2, 1), (3, 0)],
        p_prev,
        kd_rows: vec![(4, 0.9), (5, 0.7), (6, 0.95)],
        gamma,
        temperature: 0.5,
        seed: seed ^ 0x5eed,
    };
    let inst = Instance {
        steps: &steps,
        x_inf: (kind == AttentionKind::Smoothing).then_some(&x_inf),
        y: &y,
    };
    gradient_check(&params, &inst, &obj, 1e-4, 1e-6)
}
