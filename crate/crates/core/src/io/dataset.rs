//! Dataset directory layout and validation.
//!
//! ```text
//! edges.tsv     u<TAB>v per line, undirected, `#` comments
//! features.bin  N×d matrix file (f32 or f64)
//! labels.tsv    node<TAB>class per labeled node
//! train.txt     one node id per line (also valid.txt, test.txt)
//! classes.txt   optional, one class name per line
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;

use crate::binio::{read_matrix, write_matrix};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::{build_graph_with_stats, read_edge_list, CsrGraph};
use crate::training::{Split, Splits};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

pub fn split_file(split: Split) -> String {
    format!("{}.txt", split.as_str())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: CsrGraph,
    pub features: Matrix<f64>,
    pub labels: Vec<Option<usize>>,
    pub splits: Splits,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            nodes: self.num_nodes(),
            edges: self.graph.num_edges(),
            features: self.feature_width(),
            classes: self.num_classes,
            train: self.splits.train.len(),
            valid: self.splits.valid.len(),
            test: self.splits.test.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} M={} d={} C={} train={} valid={} test={}",
            self.nodes, self.edges, self.features, self.classes, self.train, self.valid, self.test
        )
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_labels(path: &Path, n: usize, problems: &mut Vec<String>) -> Result<Vec<Option<usize>>> {
    let text = read_text(path)?;
    let name = path.display();
    let mut labels = vec![None; n];
    for (no, line) in content_lines(&text) {
        let mut fields = line.split('\t');
        let parsed = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => a.trim().parse::<usize>().ok().zip(b.trim().parse::<usize>().ok()),
            _ => None,
        };
        let Some((node, class)) = parsed else {
            problems.push(format!("{name}:{no}: expected node<TAB>class, got {line:?}"));
            continue;
        };
        if node >= n {
            problems.push(format!("{name}:{no}: node {node} out of range (N={n})"));
        } else if let Some(prev) = labels[node] {
            if prev != class {
                problems.push(format!("{name}:{no}: node {node} labeled twice ({prev} and {class})"));
            }
        } else {
            labels[node] = Some(class);
        }
    }
    Ok(labels)
}

fn read_split(path: &Path, n: usize, problems: &mut Vec<String>) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = read_text(path)?;
    let name = path.display();
    let mut nodes = Vec::new();
    let mut line_of = Vec::new();
    for (no, line) in content_lines(&text) {
        match line.parse::<usize>() {
            Ok(i) if i < n => {
                nodes.push(i);
                line_of.push(no);
            }
            Ok(i) => problems.push(format!("{name}:{no}: node {i} out of range (N={n})")),
            Err(_) => problems.push(format!("{name}:{no}: expected a node id, got {line:?}")),
        }
    }
    Ok((nodes, line_of))
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = |f: &str| dir.join(f);
    let features_path = path(FEATURES_FILE);
    let features: Matrix<f64> = read_matrix(&features_path)?;
    let n = features.rows();

    let edges_path = path(EDGES_FILE);
    let (edges, id_bound) = read_edge_list(&edges_path)?;
    if id_bound > n {
        return Err(Error::format(
            &edges_path,
            format!(
                "edge list references node {} but {} has N={n} rows",
                id_bound - 1,
                features_path.display()
            ),
        ));
    }
    let (graph, _) = build_graph_with_stats(&edges, n)?;

    let mut problems = Vec::new();
    let labels = read_labels(&path(LABELS_FILE), n, &mut problems)?;

    let class_names = {
        let p = path(CLASSES_FILE);
        if p.exists() {
            Some(
                content_lines(&read_text(&p)?)
                    .map(|(_, l)| l.to_string())
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        }
    };
    let max_class = labels.iter().flatten().max().copied();
    let num_classes = match &class_names {
        Some(names) => {
            if let Some(c) = max_class.filter(|&c| c >= names.len()) {
                problems.push(format!(
                    "{}: class {c} but only {} class names",
                    path(LABELS_FILE).display(),
                    names.len()
                ));
            }
            names.len()
        }
        None => max_class.map_or(0, |c| c + 1),
    };

    let mut splits = Splits::default();
    let mut owner: HashMap<usize, (Split, usize)> = HashMap::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let file = path(&split_file(split));
        let (nodes, lines) = read_split(&file, n, &mut problems)?;
        for (&i, &no) in nodes.iter().zip(&lines) {
            match owner.get(&i) {
                Some(&(other, other_no)) if other == split => problems.push(format!(
                    "{}:{no}: node {i} repeated (first at line {other_no})",
                    file.display()
                )),
                Some(&(other, other_no)) => problems.push(format!(
                    "{}:{no}: node {i} also in {} (line {other_no})",
                    file.display(),
                    split_file(other)
                )),
                None => {
                    owner.insert(i, (split, no));
                }
            }
            if split == Split::Train && labels[i].is_none() {
                problems.push(format!("{}:{no}: training node {i} has no label", file.display()));
            }
        }
        let mut nodes = nodes;
        nodes.sort_unstable();
        nodes.dedup();
        match split {
            Split::Train => splits.train = nodes,
            Split::Valid => splits.valid = nodes,
            Split::Test => splits.test = nodes,
        }
    }
    if splits.train.is_empty() {
        problems.push(format!("{}: no training nodes", path(&split_file(Split::Train)).display()));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let dataset = Dataset {
        graph,
        features,
        labels,
        splits,
        num_classes,
        class_names,
    };
    info!("loaded {}: {}", dir.display(), dataset.summary());
    Ok(dataset)
}

/// Writes `dataset` in the layout read by [`load_dataset`].
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let mut edges = String::new();
    for (u, v) in dataset.graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(EDGES_FILE, edges)?;
    write_matrix(&dir.join(FEATURES_FILE), &dataset.features)?;
    let mut labels = String::new();
    for (i, l) in dataset.labels.iter().enumerate() {
        if let Some(c) = l {
            labels.push_str(&format!("{i}\t{c}\n"));
        }
    }
    write(LABELS_FILE, labels)?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let text: String = dataset.splits.get(split).iter().map(|i| format!("{i}\n")).collect();
        write(&split_file(split), text)?;
    }
    if let Some(names) = &dataset.class_names {
        write(CLASSES_FILE, names.iter().map(|n| format!("{n}\n")).collect())?;
    }
    Ok(())
}
