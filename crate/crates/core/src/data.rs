//! Edge lists, embedding tables, node splits and graph utilities.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parsed edge file: a vocabulary in first-seen order plus canonical edges.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeList {
    pub names: Vec<String>,
    /// Undirected edges with `a < b`, in first-seen order.
    pub edges: Vec<(usize, usize)>,
    pub self_loops: usize,
    pub duplicates: usize,
}

impl EdgeList {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut out = EdgeList::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(child), Some(parent), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: "expected `child<TAB>parent`".into(),
                });
            };
            if child == parent {
                out.self_loops += 1;
                continue;
            }
            let mut id = |name: &str| -> usize {
                if let Some(&i) = index.get(name) {
                    return i;
                }
                out.names.push(name.to_string());
                index.insert(name.to_string(), out.names.len() - 1);
                out.names.len() - 1
            };
            let (a, b) = (id(child), id(parent));
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                out.edges.push(e);
            } else {
                out.duplicates += 1;
            }
        }
        if out.self_loops > 0 {
            warn!("{path}: dropped {} self-loops", out.self_loops);
        }
        Ok(out)
    }
}

pub fn load_edges(path: &Path) -> Result<EdgeList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EdgeList::parse(&text, &path.display().to_string())
}

/// Token vectors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub tokens: Vec<String>,
    pub vectors: Vec<Array1<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, token: &str, v: Array1<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        match self.index.get(token) {
            Some(&i) => self.vectors[i] = v,
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.vectors.push(v);
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&Array1<f64>> {
        self.index.get(token).map(|&i| &self.vectors[i])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads GloVe-style text, keeping only tokens in `keep` when given. Lines
/// starting with `#` are headers.
pub fn read_embeddings<R: BufRead>(
    reader: R,
    path: &str,
    expected_dim: usize,
    keep: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(expected_dim);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default();
        if keep.is_some_and(|k| !k.contains(token)) {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            message,
        };
        let vals = parts
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != expected_dim {
            return Err(err(format!("expected {expected_dim} values, found {}", vals.len())));
        }
        table.insert(token, Array1::from(vals))?;
    }
    Ok(table)
}

pub fn load_embeddings(path: &Path, expected_dim: usize, keep: Option<&HashSet<String>>) -> Result<EmbeddingTable> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(f), &path.display().to_string(), expected_dim, keep)
}

pub fn write_embeddings(path: &Path, header: Option<&str>, tokens: &[String], vectors: &Array2<f64>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut body = || -> std::io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "# {h}")?;
        }
        for (t, col) in tokens.iter().zip(vectors.columns()) {
            write!(w, "{t}")?;
            for v in col {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Nodes, undirected edges and one source embedding per node (as columns).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub embeddings: Array2<f64>,
    index: HashMap<String, usize>,
}

impl GraphDataset {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>, embeddings: Array2<f64>) -> Result<Self> {
        let n = names.len();
        if embeddings.ncols() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: embeddings.ncols(),
            });
        }
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if index.len() != n {
            return Err(Error::Config("duplicate node names".into()));
        }
        let mut seen = HashSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b || !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("invalid or duplicate edge ({a}, {b})")));
            }
        }
        Ok(GraphDataset {
            names,
            edges,
            embeddings,
            index,
        })
    }

    /// Keeps the nodes that have an embedding; returns the dataset and the
    /// number of nodes dropped.
    pub fn assemble(edges: &EdgeList, table: &EmbeddingTable) -> Result<(Self, usize)> {
        let mut remap = vec![usize::MAX; edges.names.len()];
        let mut names = Vec::new();
        for (i, name) in edges.names.iter().enumerate() {
            if table.get(name).is_some() {
                remap[i] = names.len();
                names.push(name.clone());
            }
        }
        let dropped = edges.names.len() - names.len();
        if dropped > 0 {
            info!("dropped {dropped} nodes without embeddings");
        }
        if names.is_empty() {
            return Err(Error::EmptyInput("no node has an embedding".into()));
        }
        let kept: Vec<(usize, usize)> = edges
            .edges
            .iter()
            .filter(|(a, b)| remap[*a] != usize::MAX && remap[*b] != usize::MAX)
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect();
        let mut emb = Array2::zeros((table.dim, names.len()));
        for (j, name) in names.iter().enumerate() {
            emb.column_mut(j).assign(table.get(name).expect("filtered above"));
        }
        Ok((GraphDataset::new(names, kept, emb)?, dropped))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn vocabulary(&self) -> HashSet<String> {
        self.names.iter().cloned().collect()
    }

    pub fn write_edges(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for &(a, b) in &self.edges {
            s.push_str(&format!("{}\t{}\n", self.names[a], self.names[b]));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Node labels plus the edges visible to each split.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub labels: Vec<Split>,
    pub train_edges: Vec<(usize, usize)>,
    pub val_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
}

impl Splits {
    /// Assigns edges to splits: both ends train → train; a val end and no
    /// test end → val; any test end → test.
    pub fn from_labels(labels: Vec<Split>, edges: &[(usize, usize)]) -> Self {
        let mut s = Splits {
            labels,
            train_edges: Vec::new(),
            val_edges: Vec::new(),
            test_edges: Vec::new(),
        };
        for &(a, b) in edges {
            match s.labels[a].max(s.labels[b]) {
                Split::Train => s.train_edges.push((a, b)),
                Split::Val => s.val_edges.push((a, b)),
                Split::Test => s.test_edges.push((a, b)),
            }
        }
        s
    }

    pub fn nodes(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == split).collect()
    }

    pub fn node_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.labels.iter().filter(|&&l| l == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn edge_counts(&self) -> (usize, usize, usize) {
        (self.train_edges.len(), self.val_edges.len(), self.test_edges.len())
    }

    pub fn edges(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Train => &self.train_edges,
            Split::Val => &self.val_edges,
            Split::Test => &self.test_edges,
        }
    }

    /// Nodes a query from `split` is ranked against.
    pub fn pool(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] <= split).collect()
    }

    /// Edges visible to `split`: its own plus those of earlier splits.
    pub fn visible_edges(&self, split: Split) -> Vec<(usize, usize)> {
        let mut out = self.train_edges.clone();
        if split >= Split::Val {
            out.extend_from_slice(&self.val_edges);
        }
        if split == Split::Test {
            out.extend_from_slice(&self.test_edges);
        }
        out
    }

    pub fn write(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut s = String::new();
        for (name, l) in names.iter().zip(&self.labels) {
            s.push_str(&format!("{name}\t{l}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, dataset: &GraphDataset) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p = path.display().to_string();
        let mut labels: Vec<Option<Split>> = vec![None; dataset.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: p.clone(),
                line: lineno + 1,
                message,
            };
            let (name, label) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `node<TAB>split`".into()))?;
            let split: Split = label.trim().parse().map_err(|e: Error| err(e.to_string()))?;
            // nodes absent from the dataset were dropped for lack of an embedding
            if let Some(id) = dataset.id(name) {
                labels[id] = Some(split);
            }
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Config(format!("node `{}` has no split label", dataset.names[i]))))
            .collect::<Result<Vec<Split>>>()?;
        Ok(Splits::from_labels(labels, &dataset.edges))
    }
}

/// Fractions of nodes per split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got ({}, {}, {})",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Shuffles nodes under `seed`; the first `round(val·n)` go to val, the next
/// `round(test·n)` to test, the rest to train.
pub fn make_splits(n_nodes: usize, edges: &[(usize, usize)], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let n_val = (ratios.val * n_nodes as f64).round() as usize;
    let n_test = (ratios.test * n_nodes as f64).round() as usize;
    if n_val + n_test >= n_nodes || n_val == 0 || n_test == 0 {
        return Err(Error::SplitTooSmall(format!(
            "{n_nodes} nodes give partitions ({}, {n_val}, {n_test})",
            n_nodes.saturating_sub(n_val + n_test)
        )));
    }
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Train; n_nodes];
    for &i in &order[..n_val] {
        labels[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        labels[i] = Split::Test;
    }
    Ok(Splits::from_labels(labels, edges))
}

/// Sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    lists: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Adjacency {
            lists: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.lists[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.lists[u].len()
    }

    /// Neighbors of `u` together with `u` itself.
    pub fn closed_neighborhood(&self, u: usize) -> HashSet<usize> {
        let mut s: HashSet<usize> = self.lists[u].iter().copied().collect();
        s.insert(u);
        s
    }

    /// Unweighted shortest path length, `None` when unreachable.
    pub fn bfs_distance(&self, u: usize, v: usize) -> Option<usize> {
        if u == v {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.lists.len()];
        dist[u] = 0;
        let mut queue = VecDeque::from([u]);
        while let Some(x) = queue.pop_front() {
            for &y in &self.lists[x] {
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    if y == v {
                        return Some(dist[y]);
                    }
                    queue.push_back(y);
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn edge_parsing() {
        let e = EdgeList::parse("# header\na\tb\nb\tc\n", "t").unwrap();
        assert_eq!((e.names.len(), e.edges.len()), (3, 2));
        let e = EdgeList::parse("a\tb\na\tb\nb\ta\n", "t").unwrap();
        assert_eq!((e.edges.len(), e.duplicates), (1, 2));
        let e = EdgeList::parse("a\ta\na\tb\n", "t").unwrap();
        assert_eq!((e.edges.len(), e.self_loops), (1, 1));
        let err = EdgeList::parse("a\tb\nc\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn embedding_parsing_and_assembly() {
        let t = read_embeddings("x 1 2 3\ny 4 5 6\n".as_bytes(), "t", 3, None).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("y").unwrap(), &array![4.0, 5.0, 6.0]);
        let err = read_embeddings("x 1 2 3\ny 4 5\n".as_bytes(), "t", 3, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let edges = EdgeList::parse("x\ty\ny\tz\n", "t").unwrap();
        let (ds, dropped) = GraphDataset::assemble(&edges, &t).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(ds.names, vec!["x", "y"]);
        assert_eq!(ds.edges, vec![(0, 1)]);
        let keep: HashSet<String> = ["y".to_string()].into_iter().collect();
        let t = read_embeddings("# hdr\nx 1 2 3\ny 4 5 6\n".as_bytes(), "t", 3, Some(&keep)).unwrap();
        assert_eq!(t.tokens, vec!["y"]);
    }

    fn path_edges(n: usize) -> Vec<(usize, usize)> {
        (0..n - 1).map(|i| (i, i + 1)).collect()
    }

    fn rule_holds(s: &Splits) -> bool {
        let l = &s.labels;
        s.train_edges.iter().all(|&(a, b)| l[a] == Split::Train && l[b] == Split::Train)
            && s.val_edges
                .iter()
                .all(|&(a, b)| l[a] != Split::Test && l[b] != Split::Test && (l[a] == Split::Val || l[b] == Split::Val))
            && s.test_edges.iter().all(|&(a, b)| l[a] == Split::Test || l[b] == Split::Test)
    }

    #[test]
    fn path_graph_split() {
        let edges = path_edges(10);
        let s = make_splits(10, &edges, SplitRatios::default(), 0).unwrap();
        assert_eq!(s.node_counts(), (8, 1, 1));
        assert!(rule_holds(&s));
        let (a, b, c) = s.edge_counts();
        assert_eq!(a + b + c, 9);
        assert_eq!(s, make_splits(10, &edges, SplitRatios::default(), 0).unwrap());
        assert!(matches!(
            make_splits(3, &path_edges(3), SplitRatios::default(), 0),
            Err(Error::SplitTooSmall(_))
        ));
        let bad = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(matches!(make_splits(10, &edges, bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn graph_utilities() {
        let adj = Adjacency::new(4, &[(0, 1), (1, 2)]);
        assert_eq!(adj.neighbors(1), &[0, 2]);
        assert!(adj.neighbors(3).is_empty());
        assert_eq!(adj.bfs_distance(0, 2), Some(2));
        assert_eq!(adj.bfs_distance(1, 1), Some(0));
        assert_eq!(adj.bfs_distance(0, 3), None);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join(format!("retrofit-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let names: Vec<String> = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"].map(String::from).to_vec();
        let emb = Array2::from_shape_fn((2, 10), |(i, j)| (i * 10 + j) as f64 * 0.125 - 1.0);
        let ds = GraphDataset::new(names.clone(), path_edges(10), emb.clone()).unwrap();
        let splits = make_splits(10, &ds.edges, SplitRatios::default(), 7).unwrap();
        ds.write_edges(&dir.join("edges.tsv")).unwrap();
        write_embeddings(&dir.join("emb.txt"), Some("E2"), &names, &emb).unwrap();
        splits.write(&dir.join("split.tsv"), &names).unwrap();
        let edges = load_edges(&dir.join("edges.tsv")).unwrap();
        let table = load_embeddings(&dir.join("emb.txt"), 2, None).unwrap();
        let (back, dropped) = GraphDataset::assemble(&edges, &table).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(back, ds);
        assert_eq!(Splits::read(&dir.join("split.tsv"), &back).unwrap(), splits);
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn splits_obey_edge_rule(n in 10usize..60, seed in 0u64..1000, extra in proptest::collection::vec((0usize..60, 0usize..60), 0..80)) {
            let mut set: BTreeSet<(usize, usize)> = path_edges(n).into_iter().collect();
            for (a, b) in extra {
                let (a, b) = (a % n, b % n);
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
            let edges: Vec<_> = set.into_iter().collect();
            let s = make_splits(n, &edges, SplitRatios::default(), seed).unwrap();
            prop_assert!(rule_holds(&s));
            let (a, b, c) = s.edge_counts();
            prop_assert_eq!(a + b + c, edges.len());
            let adj = Adjacency::new(n, &edges);
            for u in 0..n {
                for &v in adj.neighbors(u) {
                    prop_assert!(adj.neighbors(v).contains(&u));
                }
            }
        }
    }
}
