//! Stochastic block model generator with heterogeneous degrees.
//!
//! Each node gets a class and a Pareto-distributed propensity weight. Edge
//! endpoints are drawn proportionally to the weights, with the second
//! endpoint taken from the same class with probability `homophily`. Features
//! are a constant offset plus a class centroid plus isotropic Gaussian noise.

use std::collections::HashSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Pareto};

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::io::dataset::Dataset;
use crate::training::Splits;

#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub nodes: usize,
    pub classes: usize,
    pub feature_width: usize,
    pub avg_degree: f64,
    /// Probability that an edge stays inside a class.
    pub homophily: f64,
    /// Pareto shape of the degree propensities; smaller is more skewed.
    pub degree_shape: f64,
    /// Cap on a single propensity, relative to the minimum.
    pub max_propensity: f64,
    pub centroid_scale: f64,
    pub noise: f64,
    /// Constant added to every feature, like the positive mean of count
    /// features.
    pub feature_offset: f64,
    pub train_per_class: usize,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            nodes: 2000,
            classes: 5,
            feature_width: 32,
            avg_degree: 6.0,
            homophily: 0.75,
            degree_shape: 2.0,
            max_propensity: 20.0,
            centroid_scale: 0.35,
            noise: 1.0,
            feature_offset: 1.0,
            train_per_class: 60,
            valid_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SbmConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sbm: {m}")));
        if self.classes < 2 || self.nodes < self.classes {
            return bad("need at least two classes and one node per class");
        }
        if self.feature_width == 0 {
            return bad("feature width must be positive");
        }
        if !(0.0..=1.0).contains(&self.homophily) || !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("homophily and valid fraction must be fractions");
        }
        if !(self.degree_shape > 0.0 && self.max_propensity >= 1.0 && self.avg_degree > 0.0) {
            return bad("degree shape, propensity cap and average degree must be positive");
        }
        if !(self.noise >= 0.0 && self.centroid_scale >= 0.0) {
            return bad("noise and centroid scale must be non-negative");
        }
        if self.train_per_class * self.classes >= self.nodes {
            return bad("training split would cover every node");
        }
        Ok(())
    }
}

pub fn generate_sbm(config: &SbmConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.nodes;
    let c = config.classes;

    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let pareto = Pareto::new(1.0, config.degree_shape).expect("validated shape");
    let propensity: Vec<f64> = (0..n)
        .map(|_| pareto.sample(&mut rng).min(config.max_propensity))
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let weighted = |nodes: &[usize]| {
        WeightedIndex::new(nodes.iter().map(|&i| propensity[i])).expect("positive weights")
    };
    let all: Vec<usize> = (0..n).collect();
    let any_node = weighted(&all);
    let in_class: Vec<WeightedIndex<f64>> = by_class.iter().map(|nodes| weighted(nodes)).collect();

    let target = (config.avg_degree * n as f64 / 2.0).round() as usize;
    let mut seen: HashSet<(u32, u32)> = HashSet::with_capacity(target);
    let mut edges = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while edges.len() < target && attempts < target * 50 {
        attempts += 1;
        let u = any_node.sample(&mut rng);
        let v = if rng.gen_bool(config.homophily) {
            by_class[labels[u]][in_class[labels[u]].sample(&mut rng)]
        } else {
            let mut v = any_node.sample(&mut rng);
            while labels[v] == labels[u] {
                v = any_node.sample(&mut rng);
            }
            v
        };
        if u == v {
            continue;
        }
        let key = (u.min(v) as u32, u.max(v) as u32);
        if seen.insert(key) {
            edges.push(key);
        }
    }
    let graph = build_graph(&edges, n)?;

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids = Matrix::from_fn(c, config.feature_width, |_, _| {
        config.centroid_scale * unit.sample(&mut rng)
    });
    let features = Matrix::from_fn(n, config.feature_width, |i, j| {
        config.feature_offset + centroids[(labels[i], j)] + config.noise * unit.sample(&mut rng)
    });

    let mut splits = Splits::default();
    let mut rest = Vec::new();
    for nodes in &by_class {
        let mut nodes = nodes.clone();
        nodes.shuffle(&mut rng);
        splits.train.extend(&nodes[..config.train_per_class]);
        rest.extend(&nodes[config.train_per_class..]);
    }
    rest.shuffle(&mut rng);
    let n_valid = (config.valid_fraction * n as f64).round() as usize;
    let n_valid = n_valid.min(rest.len());
    splits.valid = rest[..n_valid].to_vec();
    splits.test = rest[n_valid..].to_vec();
    for s in [&mut splits.train, &mut splits.valid, &mut splits.test] {
        s.sort_unstable();
    }

    Ok(Dataset {
        graph,
        features,
        labels: labels.into_iter().map(Some).collect(),
        splits,
        num_classes: c,
        class_names: None,
    })
}
