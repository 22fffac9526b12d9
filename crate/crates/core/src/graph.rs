//! Sparse undirected graphs with self-inclusive neighborhoods.
//!
//! Adjacency is stored in CSR form without self-loops. A second CSR holds
//! the neighborhood n(i) = adj(i) ∪ {i}, sorted, which is what every
//! probability computation indexes into; attention vectors are aligned
//! with these rows.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NmmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    adj_offsets: Vec<usize>,
    adj: Vec<usize>,
    hood_offsets: Vec<usize>,
    hood: Vec<usize>,
    max_degree: usize,
    features: Option<Features>,
    labels: Option<Vec<Option<usize>>>,
}

/// Dense row-major N×F feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub num_rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(num_rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_rows * dim {
            return Err(NmmError::InvalidArgument(format!(
                "feature matrix {num_rows}x{dim} needs {} values, got {}",
                num_rows * dim,
                data.len()
            )));
        }
        Ok(Features {
            num_rows,
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl Graph {
    /// Builds an undirected graph. Duplicates and both orientations collapse
    /// to one edge; self-loops are rejected.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(NmmError::NodeOutOfRange { node, num_nodes });
                }
            }
            if u == v {
                return Err(NmmError::InvalidArgument(format!(
                    "self-loop ({u},{u}); self-inclusion is implicit"
                )));
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        Ok(Self::from_lists(lists))
    }

    fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let num_nodes = lists.len();
        let mut adj_offsets = Vec::with_capacity(num_nodes + 1);
        let mut hood_offsets = Vec::with_capacity(num_nodes + 1);
        let mut adj = Vec::new();
        let mut hood = Vec::new();
        adj_offsets.push(0);
        hood_offsets.push(0);
        let mut max_degree = 0;
        for (i, list) in lists.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            adj.extend_from_slice(list);
            let split = list.partition_point(|&j| j < i);
            hood.extend_from_slice(&list[..split]);
            hood.push(i);
            hood.extend_from_slice(&list[split..]);
            adj_offsets.push(adj.len());
            hood_offsets.push(hood.len());
            max_degree = max_degree.max(list.len() + 1);
        }
        Graph {
            num_nodes,
            adj_offsets,
            adj,
            hood_offsets,
            hood,
            max_degree,
            features: None,
            labels: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.adj.len() / 2
    }

    /// Largest |n(i)|, self included.
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Stored neighbors of `i`, excluding `i`.
    pub fn adjacent(&self, i: usize) -> &[usize] {
        &self.adj[self.adj_offsets[i]..self.adj_offsets[i + 1]]
    }

    /// n(i): sorted neighbors plus `i` itself.
    pub fn neighborhood(&self, i: usize) -> Result<&[usize]> {
        self.check_node(i)?;
        Ok(self.hood(i))
    }

    #[inline]
    pub(crate) fn hood(&self, i: usize) -> &[usize] {
        &self.hood[self.hood_offsets[i]..self.hood_offsets[i + 1]]
    }

    /// Offset of row `i` in the flattened neighborhood table.
    #[inline]
    pub(crate) fn hood_offset(&self, i: usize) -> usize {
        self.hood_offsets[i]
    }

    /// Total number of (node, neighbor) slots, self included.
    pub fn hood_len(&self) -> usize {
        self.hood.len()
    }

    /// Position of `j` within n(i), if present.
    #[inline]
    pub fn hood_position(&self, i: usize, j: usize) -> Option<usize> {
        self.hood(i).binary_search(&j).ok()
    }

    pub fn check_node(&self, i: usize) -> Result<()> {
        if i >= self.num_nodes {
            return Err(NmmError::NodeOutOfRange {
                node: i,
                num_nodes: self.num_nodes,
            });
        }
        Ok(())
    }

    /// Undirected edges with u < v, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.adjacent(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[Option<usize>]> {
        self.labels.as_deref()
    }

    pub fn with_features(mut self, features: Features) -> Result<Self> {
        if features.num_rows != self.num_nodes {
            return Err(NmmError::InvalidArgument(format!(
                "feature table has {} rows for {} nodes",
                features.num_rows, self.num_nodes
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(NmmError::InvalidArgument(format!(
                "label vector has {} entries for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn fingerprint(&self) -> GraphFingerprint {
        let mut hasher = Sha256::new();
        hasher.update(format!("{}\n", self.num_nodes).as_bytes());
        for (u, v) in self.edges() {
            hasher.update(format!("{u}\t{v}\n").as_bytes());
        }
        let hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        GraphFingerprint {
            num_nodes: self.num_nodes,
            num_edges: self.num_edges(),
            hash,
        }
    }

    pub fn save_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (u, v) in self.edges() {
            out.push_str(&format!("{u}\t{v}\n"));
        }
        fs::write(path, out).map_err(|e| NmmError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFingerprint {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub hash: String,
}

impl std::fmt::Display for GraphFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N={} E={} sha256={}",
            self.num_nodes,
            self.num_edges,
            &self.hash[..16.min(self.hash.len())]
        )
    }
}

/// An ordered list of distinct node ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeSet(Vec<usize>);

impl NodeSet {
    pub fn new(ids: Vec<usize>, num_nodes: usize) -> Result<Self> {
        let mut seen = vec![false; num_nodes];
        for &i in &ids {
            if i >= num_nodes {
                return Err(NmmError::NodeOutOfRange { node: i, num_nodes });
            }
            if seen[i] {
                return Err(NmmError::DuplicateNode(i));
            }
            seen[i] = true;
        }
        Ok(NodeSet(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// H×W 4-connected lattice, row-major node ids.
pub fn make_grid_graph(height: usize, width: usize) -> Result<Graph> {
    if height == 0 || width == 0 {
        return Err(NmmError::InvalidArgument(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    let mut edges = Vec::with_capacity(2 * height * width);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                edges.push((i, i + 1));
            }
            if r + 1 < height {
                edges.push((i, i + width));
            }
        }
    }
    Graph::from_edges(height * width, &edges)
}

/// Random graph: each pair is proposed with probability `p` and kept only
/// while both endpoints have fewer than `max_adjacent` neighbors.
pub fn random_graph<R: Rng + ?Sized>(
    num_nodes: usize,
    p: f64,
    max_adjacent: usize,
    rng: &mut R,
) -> Graph {
    let mut deg = vec![0usize; num_nodes];
    let mut edges = Vec::new();
    for u in 0..num_nodes {
        for v in u + 1..num_nodes {
            if rng.random::<f64>() < p && deg[u] < max_adjacent && deg[v] < max_adjacent {
                deg[u] += 1;
                deg[v] += 1;
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(num_nodes, &edges).expect("generated edges are valid")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NmmError::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_id(tok: &str, line: usize) -> Result<usize> {
    tok.trim().parse::<usize>().map_err(|_| NmmError::Parse {
        line,
        msg: format!("expected a non-negative integer id, got {tok:?}"),
    })
}

fn parse_edge_text(text: &str) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let mut toks = l.split(|c: char| c == '\t' || c.is_whitespace()).filter(|t| !t.is_empty());
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(NmmError::Parse {
                line,
                msg: "expected \"u<TAB>v\"".into(),
            });
        };
        out.push((line, parse_id(a, line)?, parse_id(b, line)?));
    }
    Ok(out)
}

/// Reads a "u<TAB>v" edge list with dense 0-based ids.
pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: usize) -> Result<Graph> {
    parse_edge_list(&read_text(path.as_ref())?, num_nodes)
}

pub fn parse_edge_list(text: &str, num_nodes: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for (line, u, v) in parse_edge_text(text)? {
        if u >= num_nodes || v >= num_nodes {
            return Err(NmmError::IdOutOfRange { line });
        }
        if u == v {
            return Err(NmmError::SelfLoop { line });
        }
        edges.push((u, v));
    }
    Graph::from_edges(num_nodes, &edges)
}

/// Largest node id mentioned in an edge list file, plus one.
pub fn edge_list_extent(path: impl AsRef<Path>) -> Result<usize> {
    let edges = parse_edge_text(&read_text(path.as_ref())?)?;
    Ok(edges.iter().map(|&(_, u, v)| u.max(v) + 1).max().unwrap_or(0))
}

/// Maps arbitrary external node names onto dense ids in order of first
/// appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn id(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| NmmError::io(path, e))?;
        for (i, n) in self.names.iter().enumerate() {
            writeln!(f, "{i}\t{n}").map_err(|e| NmmError::io(path, e))?;
        }
        Ok(())
    }
}

/// Reads an edge list whose endpoints are arbitrary tokens and remaps them
/// onto dense ids.
pub fn load_edge_list_remapped(path: impl AsRef<Path>) -> Result<(Graph, IdMap)> {
    let text = read_text(path.as_ref())?;
    let mut map = IdMap::default();
    let mut edges = Vec::new();
    for (line, l) in content_lines(&text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(NmmError::Parse {
                line,
                msg: "expected two endpoint names".into(),
            });
        }
        if toks[0] == toks[1] {
            return Err(NmmError::SelfLoop { line });
        }
        edges.push((map.id(toks[0]), map.id(toks[1])));
    }
    let g = Graph::from_edges(map.names.len(), &edges)?;
    Ok((g, map))
}

/// Delimited numeric table (commas and/or whitespace), row i = node i.
pub fn load_features(path: impl AsRef<Path>) -> Result<Features> {
    let text = read_text(path.as_ref())?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = None;
    for (line, l) in content_lines(&text) {
        let row: Vec<f64> = l
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| NmmError::Parse {
                    line,
                    msg: format!("bad number {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(NmmError::Parse {
                    line,
                    msg: format!("expected {d} columns, got {}", row.len()),
                })
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Features::new(rows, dim.unwrap_or(0), data)
}

/// "node_id,label_id" per line; nodes not listed are unknown.
pub fn load_labels(path: impl AsRef<Path>, num_nodes: usize) -> Result<Vec<Option<usize>>> {
    parse_labels(&read_text(path.as_ref())?, num_nodes)
}

pub fn parse_labels(text: &str, num_nodes: usize) -> Result<Vec<Option<usize>>> {
    let mut labels = vec![None; num_nodes];
    for (line, l) in content_lines(text) {
        let Some((a, b)) = l.split_once(',') else {
            return Err(NmmError::Parse {
                line,
                msg: "expected \"node_id,label_id\"".into(),
            });
        };
        let node = parse_id(a, line)?;
        if node >= num_nodes {
            return Err(NmmError::IdOutOfRange { line });
        }
        labels[node] = Some(parse_id(b, line)?);
    }
    Ok(labels)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[Option<usize>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            out.push_str(&format!("{i},{l}\n"));
        }
    }
    fs::write(path, out).map_err(|e| NmmError::io(path, e))
}

pub fn save_features(path: impl AsRef<Path>, features: &Features) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..features.num_rows {
        let row: Vec<String> = features.row(i).iter().map(|x| format!("{x}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| NmmError::io(path, e))
}

/// Disjoint train/validation/test node lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    #[serde(default)]
    pub val: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

impl Split {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= num_nodes {
                return Err(NmmError::NodeOutOfRange { node: i, num_nodes });
            }
            if !seen.insert(i) {
                return Err(NmmError::InvalidArgument(format!(
                    "node {i} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, num_nodes: usize) -> Result<Self> {
        let split: Split = serde_json::from_str(&read_text(path.as_ref())?)?;
        split.validate(num_nodes)?;
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| NmmError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_edge() {
        let g = parse_edge_list("0\t1\n", 2).unwrap();
        assert_eq!(g.neighborhood(0).unwrap(), &[0, 1]);
        assert_eq!(g.neighborhood(1).unwrap(), &[0, 1]);
        assert_eq!(g.max_degree(), 2);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn duplicates_collapse() {
        let g = parse_edge_list("0\t1\n1\t0\n# comment\n\n0\t1\n", 2).unwrap();
        assert_eq!(g, parse_edge_list("0\t1", 2).unwrap());
    }

    #[test]
    fn edge_list_errors() {
        let e = parse_edge_list("0\t5\n", 3).unwrap_err();
        assert_eq!(e.to_string(), "id out of range at line 1");
        assert!(matches!(
            parse_edge_list("0\t1\n2\t2\n", 3),
            Err(NmmError::SelfLoop { line: 2 })
        ));
        assert!(matches!(
            parse_edge_list("0\t1\nx\t1\n", 3),
            Err(NmmError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_edge_list("0 1 2\n", 3),
            Err(NmmError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn neighborhoods() {
        let path = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.neighborhood(1).unwrap(), &[0, 1, 2]);
        let iso = Graph::from_edges(3, &[(0, 1)]).unwrap();
        assert_eq!(iso.neighborhood(2).unwrap(), &[2]);
        let grid = make_grid_graph(2, 2).unwrap();
        assert_eq!(grid.neighborhood(0).unwrap(), &[0, 1, 2]);
        assert!(grid.neighborhood(4).is_err());
    }

    #[test]
    fn grid_edge_counts() {
        assert_eq!(make_grid_graph(2, 2).unwrap().num_edges(), 4);
        let line = make_grid_graph(1, 5).unwrap();
        assert_eq!(line.num_edges(), 4);
        assert_eq!(line.num_nodes(), 5);
        for (h, w) in [(3, 4), (7, 2), (5, 5)] {
            let g = make_grid_graph(h, w).unwrap();
            assert_eq!(g.num_edges(), h * (w - 1) + w * (h - 1));
            assert!(g.max_degree() <= 5);
        }
        assert!(make_grid_graph(0, 3).is_err());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(25, 0.2, 4, &mut rng);
        let p = dir.path().join("g.tsv");
        g.save_edge_list(&p).unwrap();
        let back = load_edge_list(&p, 25).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.fingerprint(), back.fingerprint());
        assert!(g.max_degree() <= 5);
    }

    #[test]
    fn remapped_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("named.tsv");
        fs::write(&p, "alice bob\nbob carol\n").unwrap();
        let (g, map) = load_edge_list_remapped(&p).unwrap();
        assert_eq!(map.names, vec!["alice", "bob", "carol"]);
        assert_eq!(map.get("carol"), Some(2));
        assert_eq!(g.neighborhood(1).unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn labels_features_split() {
        let labels = parse_labels("0,1\n2,0\n", 3).unwrap();
        assert_eq!(labels, vec![Some(1), None, Some(0)]);
        assert!(parse_labels("5,0\n", 3).is_err());
        let dir = tempfile::tempdir().unwrap();
        let fp = dir.path().join("x.csv");
        fs::write(&fp, "1,2\n3 4\n").unwrap();
        let f = load_features(&fp).unwrap();
        assert_eq!((f.num_rows, f.dim), (2, 2));
        assert_eq!(f.row(1), &[3.0, 4.0]);
        fs::write(&fp, "1,2\n3\n").unwrap();
        assert!(load_features(&fp).is_err());

        let split = Split {
            train: vec![0, 1],
            val: vec![2],
            test: vec![1],
        };
        assert!(split.validate(3).is_err());
        let sp = dir.path().join("split.json");
        fs::write(&sp, r#"{"train":[0],"val":[1],"test":[2]}"#).unwrap();
        assert_eq!(Split::load(&sp, 3).unwrap().test, vec![2]);
    }

    #[test]
    fn node_set_validation() {
        assert!(NodeSet::new(vec![0, 2], 3).is_ok());
        assert!(matches!(NodeSet::new(vec![0, 0], 3), Err(NmmError::DuplicateNode(0))));
        assert!(NodeSet::new(vec![3], 3).is_err());
    }

    proptest! {
        #[test]
        fn neighborhood_symmetry(
            n in 1usize..20,
            raw in proptest::collection::vec((0usize..20, 0usize..20), 0..40),
        ) {
            let edges: Vec<_> = raw.into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a != b)
                .collect();
            let g = Graph::from_edges(n, &edges).unwrap();
            let mut d = 0;
            for i in 0..n {
                let hood = g.neighborhood(i).unwrap();
                prop_assert!(hood.contains(&i));
                prop_assert!(hood.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(!g.adjacent(i).contains(&i));
                for &j in hood {
                    prop_assert!(g.neighborhood(j).unwrap().contains(&i));
                }
                d = d.max(hood.len());
            }
            prop_assert_eq!(d, g.max_degree());
        }
    }
}
