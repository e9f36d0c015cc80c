//! Undirected unweighted graph topology: loading, validation, degree queries,
//! induced subgraphs and rooted-subgraph degree profiles.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::BufRead;
use std::path::Path;

use crate::error::{IrweError, Result};
use crate::walk::degree_bucket;

/// Immutable simple graph with contiguous internal indices.
///
/// External node ids are arbitrary strings; internal indices are assigned in
/// first-appearance order so runs are reproducible across machines.
#[derive(Debug, Clone)]
pub struct Graph {
    node_ids: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    num_edges: usize,
}

impl Graph {
    /// Build from an edge list over external ids. Self-loops and duplicate
    /// edges are dropped; the counts of dropped entries are returned alongside.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> (Graph, usize, usize) {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut node_ids: Vec<String> = Vec::new();
        let intern = |id: &str, node_ids: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            if let Some(&i) = index.get(id) {
                i
            } else {
                let i = node_ids.len();
                node_ids.push(id.to_owned());
                index.insert(id.to_owned(), i);
                i
            }
        };

        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        let mut self_loops = 0usize;
        for (a, b) in edges {
            let i = intern(a.as_ref(), &mut node_ids, &mut index);
            let j = intern(b.as_ref(), &mut node_ids, &mut index);
            if i == j {
                self_loops += 1;
                continue;
            }
            pairs.push((i.min(j), i.max(j)));
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        let duplicates = before - pairs.len();

        let mut adjacency = vec![Vec::new(); node_ids.len()];
        for &(i, j) in &pairs {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        let num_edges = pairs.len();
        (
            Graph {
                node_ids,
                adjacency,
                num_edges,
            },
            duplicates,
            self_loops,
        )
    }

    /// Load an edge-list file: UTF-8 text, one edge per line, two
    /// whitespace-separated tokens, lines starting with `#` ignored.
    pub fn load_edge_list(path: &Path) -> Result<Graph> {
        let file = std::fs::File::open(path).map_err(|e| IrweError::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut edges: Vec<(String, String)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| IrweError::io(path, e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut it = trimmed.split_whitespace();
            let a = it.next();
            let b = it.next();
            match (a, b, it.next()) {
                (Some(a), Some(b), None) => edges.push((a.to_owned(), b.to_owned())),
                _ => {
                    return Err(IrweError::Malformed {
                        path: path.to_owned(),
                        line: lineno + 1,
                        reason: "expected exactly two whitespace-separated node ids".into(),
                    })
                }
            }
        }
        let (g, duplicates, self_loops) = Graph::from_edges(&edges);
        if duplicates + self_loops > 0 {
            log::warn!(
                "{}: dropped {} duplicate edge(s) and {} self-loop(s)",
                path.display(),
                duplicates,
                self_loops
            );
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn node_id(&self, v: usize) -> &str {
        &self.node_ids[v]
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Minimum and maximum degree over all nodes.
    pub fn degree_range(&self) -> (usize, usize) {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for v in 0..self.num_nodes() {
            lo = lo.min(self.degree(v));
            hi = hi.max(self.degree(v));
        }
        if self.num_nodes() == 0 {
            (0, 0)
        } else {
            (lo, hi)
        }
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.degree(v) == 0).collect()
    }

    /// Subgraph induced by `keep`, with nodes reindexed in ascending order of
    /// their old indices. Returns the subgraph and the old indices of its
    /// nodes (new index -> old index).
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<(Graph, Vec<usize>)> {
        let n = self.num_nodes();
        for &v in keep {
            if v >= n {
                return Err(IrweError::NodeOutOfRange {
                    index: v,
                    num_nodes: n,
                });
            }
        }
        let mut old_indices: Vec<usize> = keep.to_vec();
        old_indices.sort_unstable();
        old_indices.dedup();
        let mut new_index = vec![usize::MAX; n];
        for (new, &old) in old_indices.iter().enumerate() {
            new_index[old] = new;
        }
        let mut adjacency = vec![Vec::new(); old_indices.len()];
        let mut num_edges = 0;
        for (new_i, &old_i) in old_indices.iter().enumerate() {
            for &old_j in &self.adjacency[old_i] {
                let new_j = new_index[old_j];
                if new_j != usize::MAX {
                    adjacency[new_i].push(new_j);
                    if new_i < new_j {
                        num_edges += 1;
                    }
                }
            }
        }
        let node_ids = old_indices
            .iter()
            .map(|&old| self.node_ids[old].clone())
            .collect();
        Ok((
            Graph {
                node_ids,
                adjacency,
                num_edges,
            },
            old_indices,
        ))
    }

    /// BFS distances from `v`, capped at `max_hops`. Unreached nodes get `None`.
    pub fn bfs_rings(&self, v: usize, max_hops: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        dist[v] = Some(0);
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            if du == max_hops {
                continue;
            }
            for &w in &self.adjacency[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Degree profile of the rooted subgraph around `v`: for each BFS ring
    /// `i in [0, hops]`, block `i` sums bucket one-hot degree encodings over
    /// nodes at exactly distance `i` from `v`. Ring 0 encodes `v` itself.
    /// Degrees are taken in this graph and bucketed over its degree range.
    pub fn rooted_subgraph_degree_profile(
        &self,
        v: usize,
        hops: usize,
        buckets: usize,
    ) -> Vec<f64> {
        assert!(buckets >= 1, "buckets must be >= 1");
        let (deg_min, deg_max) = self.degree_range();
        let dist = self.bfs_rings(v, hops);
        let mut profile = vec![0.0; (hops + 1) * buckets];
        for (u, d) in dist.iter().enumerate() {
            if let Some(d) = d {
                let b = degree_bucket(self.degree(u), deg_min, deg_max, buckets);
                profile[d * buckets + b] += 1.0;
            }
        }
        profile
    }
}

/// Disjoint node index sets for evaluation protocols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePartition {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodePartition {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for &v in self
            .train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
        {
            if v >= num_nodes {
                return Err(IrweError::NodeOutOfRange {
                    index: v,
                    num_nodes,
                });
            }
            if seen[v] {
                return Err(IrweError::Invalid(format!(
                    "node {v} appears in more than one partition set"
                )));
            }
            seen[v] = true;
        }
        Ok(())
    }
}

/// Node labels: multi-class (one label per node) or multi-label.
#[derive(Debug, Clone)]
pub struct Labels {
    /// Per external node id, the set of class names.
    pub by_id: HashMap<String, Vec<String>>,
}

impl Labels {
    /// Label file: one line per node, `id label` or `id label1,label2,...`;
    /// lines starting with `#` ignored.
    pub fn load(path: &Path) -> Result<Labels> {
        let file = std::fs::File::open(path).map_err(|e| IrweError::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut by_id = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| IrweError::io(path, e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut it = trimmed.split_whitespace();
            let (id, labels) = match (it.next(), it.next(), it.next()) {
                (Some(id), Some(labels), None) => (id, labels),
                _ => {
                    return Err(IrweError::Malformed {
                        path: path.to_owned(),
                        line: lineno + 1,
                        reason: "expected `id label[,label...]`".into(),
                    })
                }
            };
            by_id.insert(
                id.to_owned(),
                labels.split(',').map(|s| s.to_owned()).collect(),
            );
        }
        Ok(Labels { by_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn graph_of(edges: &[(&str, &str)]) -> Graph {
        Graph::from_edges(edges).0
    }

    #[test]
    fn path_graph_loads() {
        let g = graph_of(&[("a", "b"), ("b", "c")]);
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 2);
        let degs: Vec<usize> = (0..3).map(|v| g.degree(v)).collect();
        assert_eq!(degs, vec![1, 2, 1]);
        // first-appearance order
        assert_eq!(g.node_id(0), "a");
        assert_eq!(g.node_id(2), "c");
    }

    #[test]
    fn duplicates_and_self_loops_dropped() {
        let (g, dup, selfloop) = Graph::from_edges(&[("a", "b"), ("b", "a"), ("a", "a")]);
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(dup, 1);
        assert_eq!(selfloop, 1);
    }

    #[test]
    fn load_edge_list_reports_malformed_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a b").unwrap();
        writeln!(f, "# comment").unwrap();
        writeln!(f, "oops").unwrap();
        let err = Graph::load_edge_list(f.path()).unwrap_err();
        match err {
            IrweError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_edge_list_missing_file() {
        let err = Graph::load_edge_list(Path::new("/nonexistent/x.edg")).unwrap_err();
        assert!(matches!(err, IrweError::Io { .. }));
    }

    #[test]
    fn degree_sum_is_twice_edges() {
        let g = graph_of(&[("a", "b"), ("b", "c"), ("c", "a"), ("c", "d")]);
        let total: usize = (0..g.num_nodes()).map(|v| g.degree(v)).sum();
        assert_eq!(total, 2 * g.num_edges());
    }

    #[test]
    fn induced_subgraph_triangle_two_nodes() {
        let g = graph_of(&[("a", "b"), ("b", "c"), ("c", "a")]);
        let (sub, old) = g.induced_subgraph(&[0, 1]).unwrap();
        assert_eq!(sub.num_nodes(), 2);
        assert_eq!(sub.num_edges(), 1);
        assert_eq!(old, vec![0, 1]);
    }

    #[test]
    fn induced_subgraph_identity() {
        let g = graph_of(&[("a", "b"), ("b", "c"), ("c", "a"), ("c", "d")]);
        let all: Vec<usize> = (0..g.num_nodes()).collect();
        let (sub, _) = g.induced_subgraph(&all).unwrap();
        assert_eq!(sub.num_nodes(), g.num_nodes());
        assert_eq!(sub.num_edges(), g.num_edges());
        for v in 0..g.num_nodes() {
            assert_eq!(sub.neighbors(v), g.neighbors(v));
        }
    }

    #[test]
    fn induced_subgraph_can_isolate_nodes() {
        let g = graph_of(&[("a", "b"), ("b", "c")]);
        let (sub, _) = g.induced_subgraph(&[0, 2]).unwrap();
        assert_eq!(sub.num_nodes(), 2);
        assert_eq!(sub.num_edges(), 0);
        assert_eq!(sub.isolated_nodes(), vec![0, 1]);
    }

    #[test]
    fn induced_subgraph_rejects_out_of_range() {
        let g = graph_of(&[("a", "b")]);
        assert!(g.induced_subgraph(&[0, 5]).is_err());
    }

    #[test]
    fn induced_subgraph_idempotent() {
        let g = graph_of(&[("a", "b"), ("b", "c"), ("c", "a"), ("c", "d"), ("d", "e")]);
        let keep = [1, 2, 3, 4];
        let (sub1, _) = g.induced_subgraph(&keep).unwrap();
        let all: Vec<usize> = (0..sub1.num_nodes()).collect();
        let (sub2, _) = sub1.induced_subgraph(&all).unwrap();
        assert_eq!(sub1.num_edges(), sub2.num_edges());
        for v in 0..sub1.num_nodes() {
            assert_eq!(sub1.neighbors(v), sub2.neighbors(v));
        }
    }

    #[test]
    fn star_center_profile() {
        // star with center a and k=4 leaves
        let g = graph_of(&[("a", "b"), ("a", "c"), ("a", "d"), ("a", "e")]);
        let e = 3;
        let p = g.rooted_subgraph_degree_profile(0, 1, e);
        // center: deg 4 = deg_max -> last bucket; leaves: deg 1 = deg_min -> bucket 0
        let mut expect = vec![0.0; 2 * e];
        expect[e - 1] = 1.0;
        expect[e] = 4.0;
        assert_eq!(p, expect);
    }

    #[test]
    fn isolated_node_profile_only_ring0() {
        let (g, _, _) = Graph::from_edges(&[("a", "b"), ("c", "c")]);
        // c survives as an isolated node (self-loop dropped)
        let c = g.index_of("c").unwrap();
        let p = g.rooted_subgraph_degree_profile(c, 2, 4);
        assert!(p[..4].iter().sum::<f64>() == 1.0);
        assert!(p[4..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn path_middle_profile_matches_bfs_oracle() {
        // 5-node path a-b-c-d-e, profile of middle node c with 2 hops
        let g = graph_of(&[("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")]);
        let (l, e) = (2, 4);
        let p = g.rooted_subgraph_degree_profile(2, l, e);
        // independent BFS oracle
        let mut dist = vec![usize::MAX; g.num_nodes()];
        dist[2] = 0;
        let mut frontier = vec![2];
        for d in 1..=l {
            let mut next = vec![];
            for &u in &frontier {
                for &w in g.neighbors(u) {
                    if dist[w] == usize::MAX {
                        dist[w] = d;
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        let (dmin, dmax) = g.degree_range();
        let mut expect = vec![0.0; (l + 1) * e];
        for v in 0..g.num_nodes() {
            if dist[v] <= l {
                expect[dist[v] * e + degree_bucket(g.degree(v), dmin, dmax, e)] += 1.0;
            }
        }
        assert_eq!(p, expect);
        // block sums equal ring sizes
        for d in 0..=l {
            let ring = dist.iter().filter(|&&x| x == d).count() as f64;
            let block: f64 = p[d * e..(d + 1) * e].iter().sum();
            assert_eq!(block, ring);
        }
    }
}
