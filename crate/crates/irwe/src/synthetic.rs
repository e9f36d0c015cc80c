//! Deterministic synthetic benchmark: a ring of communities whose nodes play
//! one of four structural roles (hub, spoke, clique member, bridge). Role is
//! determined by local topology alone, so identity embeddings learned from
//! walk statistics should separate the classes, while communities remain the
//! natural clusters for position embeddings.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{IrweError, Result};
use crate::graph::Graph;

pub const ROLE_HUB: &str = "hub";
pub const ROLE_SPOKE: &str = "spoke";
pub const ROLE_CLIQUE: &str = "clique";
pub const ROLE_BRIDGE: &str = "bridge";

/// Benchmark graph plus per-node role labels and per-node community index.
pub struct RoleBenchmark {
    pub graph: Graph,
    pub roles: HashMap<String, Vec<String>>,
    pub community: Vec<usize>,
}

/// Build the ring benchmark with `communities` communities of 13 nodes each:
/// one hub wired to six spokes and a 5-clique, plus one bridge node linking
/// the hub to the next community's hub. Node ids carry a `prefix` so two
/// disjoint instances can coexist.
pub fn role_benchmark(communities: usize, prefix: &str) -> RoleBenchmark {
    assert!(communities >= 3, "ring needs at least 3 communities");
    let spokes = 6;
    let clique = 5;
    let mut edges: Vec<(String, String)> = Vec::new();
    let hub = |i: usize| format!("{prefix}h{i}");
    for i in 0..communities {
        for s in 0..spokes {
            edges.push((hub(i), format!("{prefix}s{i}_{s}")));
        }
        for a in 0..clique {
            for b in (a + 1)..clique {
                edges.push((format!("{prefix}c{i}_{a}"), format!("{prefix}c{i}_{b}")));
            }
        }
        edges.push((hub(i), format!("{prefix}c{i}_0")));
        let bridge = format!("{prefix}b{i}");
        edges.push((hub(i), bridge.clone()));
        edges.push((bridge, hub((i + 1) % communities)));
    }
    let pairs: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let (graph, _, _) = Graph::from_edges(&pairs);
    let mut roles = HashMap::new();
    for i in 0..communities {
        roles.insert(hub(i), vec![ROLE_HUB.to_string()]);
        for s in 0..spokes {
            roles.insert(format!("{prefix}s{i}_{s}"), vec![ROLE_SPOKE.to_string()]);
        }
        for a in 0..clique {
            roles.insert(format!("{prefix}c{i}_{a}"), vec![ROLE_CLIQUE.to_string()]);
        }
        roles.insert(format!("{prefix}b{i}"), vec![ROLE_BRIDGE.to_string()]);
    }
    let community = (0..graph.num_nodes())
        .map(|v| {
            let id = graph.node_id(v);
            let tail = &id[prefix.len() + 1..];
            tail.split('_').next().unwrap().parse::<usize>().unwrap()
        })
        .collect();
    RoleBenchmark {
        graph,
        roles,
        community,
    }
}

impl RoleBenchmark {
    /// Write the edge list (`a b` per line) and the label file (`id role`).
    pub fn write_files(&self, edges_path: &Path, labels_path: &Path) -> Result<()> {
        let g = &self.graph;
        let ef = std::fs::File::create(edges_path).map_err(|e| IrweError::io(edges_path, e))?;
        let mut w = std::io::BufWriter::new(ef);
        (|| -> std::io::Result<()> {
            for v in 0..g.num_nodes() {
                for &u in g.neighbors(v) {
                    if v < u {
                        writeln!(w, "{} {}", g.node_id(v), g.node_id(u))?;
                    }
                }
            }
            w.flush()
        })()
        .map_err(|e| IrweError::io(edges_path, e))?;
        let lf = std::fs::File::create(labels_path).map_err(|e| IrweError::io(labels_path, e))?;
        let mut w = std::io::BufWriter::new(lf);
        (|| -> std::io::Result<()> {
            for v in 0..g.num_nodes() {
                let id = g.node_id(v);
                writeln!(w, "{} {}", id, self.roles[id].join(","))?;
            }
            w.flush()
        })()
        .map_err(|e| IrweError::io(labels_path, e))
    }

    /// Role labels in node-index order.
    pub fn role_of(&self, v: usize) -> &str {
        &self.roles[self.graph.node_id(v)][0]
    }
}
