//! Parameter-free precomputation: the K-step propagated feature stack, the
//! infinite-propagation (stationary) feature, and label propagation.

use std::path::Path;

use log::warn;

use crate::binio::{self, Reader, Writer};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{spmm, CsrGraph, NormalizedAdjacency};
use crate::real::{DType, Real};
use crate::training::ReliableSet;

pub const STACK_MAGIC: &[u8; 8] = b"PMLPSTK1";
pub const STACK_VERSION: u32 = 1;
const STACK_HEADER_LEN: usize = 8 + 4 + 4 + 8 * 3 + 8;

/// Default ceiling on the bytes held by a propagated stack (8 GiB).
pub const DEFAULT_MEMORY_BUDGET: u64 = 8 << 30;

/// The propagated features `X^(0) .. X^(K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedStack<T> {
    steps: Vec<Matrix<T>>,
    norm_r: f64,
    checksum: [u8; 32],
}

impl<T: Real> PropagatedStack<T> {
    pub fn new(steps: Vec<Matrix<T>>, norm_r: f64) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Input("a stack needs at least X^(0)".into()))?;
        let shape = first.shape();
        if steps.iter().any(|m| m.shape() != shape) {
            return Err(Error::Input("stack matrices differ in shape".into()));
        }
        let mut stack = Self {
            steps,
            norm_r,
            checksum: [0; 32],
        };
        stack.checksum = binio::sha256(&stack.encode_body());
        Ok(stack)
    }

    pub fn steps(&self) -> &[Matrix<T>] {
        &self.steps
    }

    pub fn step(&self, l: usize) -> &Matrix<T> {
        &self.steps[l]
    }

    pub fn k_max(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.steps[0].rows()
    }

    pub fn feature_width(&self) -> usize {
        self.steps[0].cols()
    }

    pub fn norm_r(&self) -> f64 {
        self.norm_r
    }

    pub fn checksum(&self) -> &[u8; 32] {
        &self.checksum
    }

    /// Rows `indices` of every step.
    pub fn gather(&self, indices: &[usize]) -> Vec<Matrix<T>> {
        self.steps.iter().map(|m| m.gather_rows(indices)).collect()
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(STACK_MAGIC);
        w.u32(STACK_VERSION);
        w.u32(T::DTYPE.code());
        w.u64(self.num_nodes() as u64);
        w.u64(self.feature_width() as u64);
        w.u64(self.k_max() as u64);
        w.f64(self.norm_r);
        for m in &self.steps {
            w.reals(m.as_slice());
        }
        w.buf
    }
}

/// Bytes needed to hold `k + 1` matrices of `n × d` elements of `T`.
pub fn stack_bytes<T: Real>(n: usize, d: usize, k: usize) -> u64 {
    (k as u64 + 1) * n as u64 * d as u64 * T::DTYPE.size() as u64
}

/// `X^(l) = Â X^(l-1)` for `l = 1..=k`.
pub fn propagate_features<T: Real>(
    adj: &NormalizedAdjacency<T>,
    x: &Matrix<T>,
    k: usize,
    memory_budget: u64,
) -> Result<PropagatedStack<T>> {
    let required = stack_bytes::<T>(x.rows(), x.cols(), k);
    if required > memory_budget {
        return Err(Error::Resource {
            required,
            budget: memory_budget,
        });
    }
    let mut steps = Vec::with_capacity(k + 1);
    steps.push(x.clone());
    for l in 1..=k {
        let next = spmm(adj, &steps[l - 1])?;
        steps.push(next);
    }
    PropagatedStack::new(steps, adj.r())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StationaryReport {
    pub components: usize,
}

/// `Â^∞ X` through its rank-1 closed form, applied per connected component:
/// row `i` is `(d_i+1)^r / (2m_c+n_c) · Σ_{j∈c} (d_j+1)^(1-r) X_j`.
pub fn stationary_feature<T: Real>(
    graph: &CsrGraph,
    r: f64,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, StationaryReport)> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("normalization exponent r={r} outside [0, 1]")));
    }
    let n = graph.num_nodes();
    if x.rows() != n {
        return Err(Error::Input(format!(
            "feature matrix has {} rows, graph has {n} nodes",
            x.rows()
        )));
    }
    let (comp, count) = graph.components();
    if count > 1 {
        warn!("graph has {count} connected components; stationary state computed per component");
    }
    let d = x.cols();
    // Per component: Σ_j (d_j+1)^(1-r) X_j and Σ_j (d_j+1) = 2m_c + n_c.
    let mut sums = vec![vec![0.0f64; d]; count];
    let mut mass = vec![0.0f64; count];
    for (i, &c) in comp.iter().enumerate() {
        let dt = graph.degrees()[i] as f64 + 1.0;
        mass[c] += dt;
        let w = dt.powf(1.0 - r);
        for (s, &v) in sums[c].iter_mut().zip(x.row(i)) {
            *s += w * v.as_f64();
        }
    }
    let mut out = Matrix::zeros(n, d);
    for (i, &c) in comp.iter().enumerate() {
        let scale = (graph.degrees()[i] as f64 + 1.0).powf(r) / mass[c];
        for (o, &s) in out.row_mut(i).iter_mut().zip(&sums[c]) {
            *o = T::lit(scale * s);
        }
    }
    Ok((out, StationaryReport { components: count }))
}

/// Partially observed labels and their propagated embedding for one stage.
#[derive(Debug, Clone)]
pub struct LabelState<T> {
    pub num_classes: usize,
    pub y_init: Matrix<T>,
    pub y_propagated: Matrix<T>,
    pub k_label: usize,
}

impl<T: Real> LabelState<T> {
    pub fn build(
        adj: &NormalizedAdjacency<T>,
        train_labels: &[(usize, usize)],
        reliable: Option<&ReliableSet<T>>,
        num_classes: usize,
        k_label: usize,
    ) -> Result<Self> {
        let y_init = build_label_init(train_labels, reliable, adj.num_nodes(), num_classes)?;
        let y_propagated = propagate_labels(adj, &y_init, k_label)?;
        Ok(Self {
            num_classes,
            y_init,
            y_propagated,
            k_label,
        })
    }
}

/// `Ŷ^(k+1) = Â Ŷ^(k)`, keeping only the current and next iterate.
pub fn propagate_labels<T: Real>(
    adj: &NormalizedAdjacency<T>,
    y_init: &Matrix<T>,
    k_label: usize,
) -> Result<Matrix<T>> {
    if y_init.rows() != adj.num_nodes() {
        return Err(Error::Input(format!(
            "label matrix has {} rows, graph has {} nodes",
            y_init.rows(),
            adj.num_nodes()
        )));
    }
    let mut current = y_init.clone();
    for _ in 0..k_label {
        current = spmm(adj, &current)?;
    }
    Ok(current)
}

/// Initial label matrix: one-hot rows for training nodes, the previous
/// stage's soft labels for reliable nodes, zeros elsewhere.
pub fn build_label_init<T: Real>(
    train_labels: &[(usize, usize)],
    reliable: Option<&ReliableSet<T>>,
    num_nodes: usize,
    num_classes: usize,
) -> Result<Matrix<T>> {
    let mut y = Matrix::zeros(num_nodes, num_classes);
    let mut is_train = vec![false; num_nodes];
    for &(node, class) in train_labels {
        if node >= num_nodes {
            return Err(Error::Input(format!("training node {node} outside 0..{num_nodes}")));
        }
        if class >= num_classes {
            return Err(Error::Input(format!(
                "class id {class} of node {node} outside 0..{num_classes}"
            )));
        }
        is_train[node] = true;
        y.row_mut(node).iter_mut().for_each(|v| *v = T::zero());
        y[(node, class)] = T::one();
    }
    if let Some(set) = reliable {
        if set.soft_labels.cols() != num_classes {
            return Err(Error::Input(format!(
                "reliable soft labels have {} classes, expected {num_classes}",
                set.soft_labels.cols()
            )));
        }
        for (row, &node) in set.nodes.iter().enumerate() {
            if node >= num_nodes {
                return Err(Error::Input(format!("reliable node {node} outside 0..{num_nodes}")));
            }
            if is_train[node] {
                return Err(Error::Logic(format!(
                    "node {node} is both a training node and a reliable node"
                )));
            }
            y.row_mut(node).copy_from_slice(set.soft_labels.row(row));
        }
    }
    Ok(y)
}

pub fn persist_stack<T: Real>(stack: &PropagatedStack<T>, path: &Path) -> Result<()> {
    let mut w = Writer {
        buf: stack.encode_body(),
    };
    w.seal();
    binio::write_file(path, &w.buf)
}

/// Shape the caller expects a loaded stack to have; `None` fields are free.
#[derive(Debug, Clone, Copy, Default)]
pub struct StackExpectation {
    pub num_nodes: Option<usize>,
    pub feature_width: Option<usize>,
    pub k_max: Option<usize>,
}

pub fn load_stack<T: Real>(path: &Path) -> Result<PropagatedStack<T>> {
    load_stack_expecting(path, StackExpectation::default())
}

pub fn load_stack_expecting<T: Real>(
    path: &Path,
    expect: StackExpectation,
) -> Result<PropagatedStack<T>> {
    let bytes = binio::read_file(path)?;
    decode_stack(&bytes, path, expect)
}

pub(crate) fn decode_stack<T: Real>(
    bytes: &[u8],
    path: &Path,
    expect: StackExpectation,
) -> Result<PropagatedStack<T>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != STACK_MAGIC {
        return Err(Error::format(path, "not a stack file (bad magic)"));
    }
    let version = r.u32()?;
    if version != STACK_VERSION {
        return Err(Error::format(path, format!("unsupported stack version {version}")));
    }
    let code = r.u32()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("stack stored as {}, requested {}", dtype.name(), T::DTYPE.name()),
        ));
    }
    let n = r.usize()?;
    let d = r.usize()?;
    let k = r.usize()?;
    let norm_r = r.f64()?;
    debug_assert_eq!(r.position(), STACK_HEADER_LEN);

    let mismatch = |what: &str, want: usize, got: usize| {
        Error::format(path, format!("{what} is {got}, expected {want}"))
    };
    if let Some(want) = expect.num_nodes.filter(|&w| w != n) {
        return Err(mismatch("node count", want, n));
    }
    if let Some(want) = expect.feature_width.filter(|&w| w != d) {
        return Err(mismatch("feature width", want, d));
    }
    if let Some(want) = expect.k_max.filter(|&w| w != k) {
        return Err(mismatch("hop count", want, k));
    }

    let payload = (k as u128 + 1) * n as u128 * d as u128 * dtype.size() as u128;
    let expected_len = STACK_HEADER_LEN as u128 + payload + 32;
    if bytes.len() as u128 != expected_len {
        return Err(Error::format(
            path,
            format!(
                "file is {} bytes, header (N={n}, d={d}, K={k}) implies {expected_len}",
                bytes.len()
            ),
        ));
    }
    let body_len = bytes.len() - 32;
    let stored: [u8; 32] = bytes[body_len..].try_into().unwrap();
    if binio::sha256(&bytes[..body_len]) != stored {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
        });
    }
    let mut steps = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        let data = r.reals::<T>(dtype, n * d)?;
        steps.push(Matrix::from_vec(n, d, data)?);
    }
    Ok(PropagatedStack {
        steps,
        norm_r,
        checksum: stored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, normalize};

    fn two_node() -> CsrGraph {
        build_graph(&[(0, 1)], 2).unwrap()
    }

    #[test]
    fn zero_hops_keeps_input() {
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        let adj = normalize::<f32>(&g, 0.5).unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| (i + 10 * j) as f32 * 0.1);
        let stack = propagate_features(&adj, &x, 0, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!(stack.steps().len(), 1);
        assert_eq!(stack.step(0).as_slice(), x.as_slice());
    }

    #[test]
    fn two_node_stack_converges_immediately() {
        let adj = normalize::<f64>(&two_node(), 0.5).unwrap();
        let stack = propagate_features(&adj, &Matrix::identity(2), 2, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!(stack.steps().len(), 3);
        assert_eq!(stack.step(1), &Matrix::filled(2, 2, 0.5));
        assert_eq!(stack.step(2), &Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn budget_is_enforced() {
        let adj = normalize::<f32>(&two_node(), 0.5).unwrap();
        let err = propagate_features(&adj, &Matrix::identity(2), 3, 10).unwrap_err();
        match err {
            Error::Resource { required, budget } => {
                assert_eq!(required, 4 * 2 * 2 * 4);
                assert_eq!(budget, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stationary_two_node() {
        let (xinf, report) = stationary_feature(&two_node(), 0.5, &Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(report.components, 1);
        assert!(xinf.max_abs_diff(&Matrix::filled(2, 2, 0.5)) < 1e-15);
    }

    #[test]
    fn stationary_path_entry() {
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        let (xinf, _) = stationary_feature(&g, 0.5, &Matrix::<f64>::identity(3)).unwrap();
        let expected = 2f64.sqrt() * 3f64.sqrt() / 7.0;
        assert!((xinf[(0, 1)] - expected).abs() < 1e-15);
        assert!((xinf[(0, 1)] - 0.34993).abs() < 1e-5);
    }

    #[test]
    fn stationary_of_zeros_is_zero() {
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        let (xinf, _) = stationary_feature(&g, 1.0, &Matrix::<f32>::zeros(3, 4)).unwrap();
        assert_eq!(xinf, Matrix::zeros(3, 4));
    }

    #[test]
    fn stationary_per_component() {
        // Two disjoint edges: each component converges to its own average.
        let g = build_graph(&[(0, 1), (2, 3)], 4).unwrap();
        let x = Matrix::<f64>::from_rows(&[vec![1.0], vec![3.0], vec![10.0], vec![20.0]]).unwrap();
        let (xinf, report) = stationary_feature(&g, 0.5, &x).unwrap();
        assert_eq!(report.components, 2);
        assert!((xinf[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((xinf[(3, 0)] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn label_propagation_examples() {
        let adj = normalize::<f64>(&two_node(), 0.5).unwrap();
        let y0 = build_label_init::<f64>(&[(0, 0)], None, 2, 2).unwrap();
        assert_eq!(propagate_labels(&adj, &y0, 0).unwrap(), y0);
        let y1 = propagate_labels(&adj, &y0, 1).unwrap();
        assert_eq!(y1, Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.0]]).unwrap());
        let zeros = Matrix::<f64>::zeros(2, 2);
        assert_eq!(propagate_labels(&adj, &zeros, 4).unwrap(), zeros);
        assert!(matches!(
            propagate_labels(&adj, &Matrix::<f64>::zeros(3, 2), 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn label_init_three_cases() {
        let reliable = ReliableSet {
            nodes: vec![2],
            alpha: vec![0.9],
            soft_labels: Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap(),
        };
        let y = build_label_init::<f64>(&[(0, 1)], Some(&reliable), 4, 2).unwrap();
        assert_eq!(y.row(0), &[0.0, 1.0]);
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(y.row(2), &[0.9, 0.1]);
        assert_eq!(y.row(3), &[0.0, 0.0]);

        let stage_one = build_label_init::<f64>(&[(0, 1), (3, 0)], None, 4, 2).unwrap();
        assert_eq!(stage_one.row(3), &[1.0, 0.0]);
        assert_eq!(stage_one.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn label_init_errors() {
        assert!(matches!(
            build_label_init::<f32>(&[(0, 2)], None, 3, 2),
            Err(Error::Input(_))
        ));
        let overlapping = ReliableSet {
            nodes: vec![0],
            alpha: vec![0.9],
            soft_labels: Matrix::from_rows(&[vec![0.9f32, 0.1]]).unwrap(),
        };
        assert!(matches!(
            build_label_init(&[(0, 1)], Some(&overlapping), 3, 2),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn stack_file_round_trip_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.bin");
        let g = build_graph(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let adj = normalize::<f32>(&g, 0.5).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| (i as f32 - j as f32) / 3.0);
        let stack = propagate_features(&adj, &x, 3, DEFAULT_MEMORY_BUDGET).unwrap();
        persist_stack(&stack, &path).unwrap();

        let loaded: PropagatedStack<f32> = load_stack(&path).unwrap();
        assert_eq!(loaded, stack);
        for (a, b) in loaded.steps().iter().zip(stack.steps()) {
            let bits_a: Vec<u32> = a.as_slice().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_stack::<f32>(truncated, &path, StackExpectation::default()),
            Err(Error::Format { .. })
        ));

        let mut flipped = bytes.clone();
        flipped[STACK_HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(
            decode_stack::<f32>(&flipped, &path, StackExpectation::default()),
            Err(Error::Corruption { .. })
        ));

        let expect = StackExpectation {
            k_max: Some(5),
            ..Default::default()
        };
        assert!(matches!(
            decode_stack::<f32>(&bytes, &path, expect),
            Err(Error::Format { .. })
        ));
        assert!(matches!(load_stack::<f64>(&path), Err(Error::Format { .. })));
    }
}
