//! Inference drivers: transductive (cached statistics, one feedforward),
//! inductive for new nodes within a graph (incremental statistics merged with
//! the frozen cache), and inductive across graphs (fresh statistics under the
//! trained model).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{IrweError, Result};
use crate::graph::Graph;
use crate::model::StatsCache;
use crate::nn::params::Binding;
use crate::nn::tape::Tape;
use crate::rng::child_seed;
use crate::train::{full_forward, ForwardInputs, TrainedModel, THETA_PARAM};
use crate::walk::{
    aw_statistics_inductive, degree_features, project_position, sample_walks,
    select_inference_walks, AnonymousWalk, AwTable, ProjectionMatrix, RandomWalk,
};

/// Embeddings for a set of nodes, row i belonging to `node_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub node_ids: Vec<String>,
    pub psi: Array2<f64>,
    pub gamma: Array2<f64>,
    pub gamma_bar: Array2<f64>,
}

impl EmbeddingSet {
    /// Write one matrix as text: external id then the embedding values.
    pub fn write_matrix(path: &Path, ids: &[String], m: &Array2<f64>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| IrweError::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        (|| -> std::io::Result<()> {
            for (i, id) in ids.iter().enumerate() {
                write!(w, "{id}")?;
                for &x in m.row(i) {
                    write!(w, " {x:.17e}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })()
        .map_err(|e| IrweError::io(path, e))
    }

    /// Write psi/gamma/gamma_bar text files into a directory.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| IrweError::io(dir, e))?;
        Self::write_matrix(&dir.join("psi.txt"), &self.node_ids, &self.psi)?;
        Self::write_matrix(&dir.join("gamma.txt"), &self.node_ids, &self.gamma)?;
        Self::write_matrix(&dir.join("gamma_bar.txt"), &self.node_ids, &self.gamma_bar)
    }

    /// Read a text embedding file back into ids + matrix.
    pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
        let text = std::fs::read_to_string(path).map_err(|e| IrweError::io(path, e))?;
        let mut ids = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id = parts.next().ok_or_else(|| IrweError::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "empty line".into(),
            })?;
            let vals: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            let vals = vals.map_err(|e| IrweError::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("bad float: {e}"),
            })?;
            if let Some(first) = rows.first() {
                if first.len() != vals.len() {
                    return Err(IrweError::Malformed {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        reason: "inconsistent embedding width".into(),
                    });
                }
            }
            ids.push(id.to_owned());
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(IrweError::Format {
                path: path.to_path_buf(),
                reason: "no embeddings found".into(),
            });
        }
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let m = Array2::from_shape_vec((ids.len(), d), flat)
            .map_err(|e| IrweError::Invalid(e.to_string()))?;
        Ok((ids, m))
    }
}

fn run_inference_forward(
    model: &TrainedModel,
    inputs: &ForwardInputs,
    node_ids: Vec<String>,
) -> Result<EmbeddingSet> {
    let id_specs = model.config.identity_specs(inputs.rho.nrows())?;
    let pos_specs = model.position_specs()?;
    let mut tape = Tape::new();
    let mut bind = Binding::new();
    let fwd = full_forward(
        &mut tape,
        &mut bind,
        &model.params,
        &model.running,
        &id_specs,
        &pos_specs,
        inputs,
        false,
    )?;
    Ok(EmbeddingSet {
        node_ids,
        psi: tape.value(fwd.psi).clone(),
        gamma: tape.value(fwd.gamma).clone(),
        gamma_bar: tape.value(fwd.gamma_bar).clone(),
    })
}

/// Transductive inference: one feedforward pass over the cached statistics.
pub fn infer_transductive(model: &TrainedModel) -> Result<EmbeddingSet> {
    let inputs = ForwardInputs::from_cache(&model.cache, model.config.n_s)?;
    run_inference_forward(model, &inputs, model.cache.node_ids.clone())
}

/// Incremental statistics of one new node on the extended topology.
struct NewNodeStats {
    s_tilde: Vec<u32>,
    delta: Vec<u32>,
    pi_g: Vec<f64>,
    inference_walks: Vec<Vec<usize>>,
}

#[allow(clippy::too_many_arguments)]
fn new_node_stats(
    model: &TrainedModel,
    g_new: &Graph,
    reduced: &AwTable,
    v_new: usize,
    merged_index: usize,
    old_index_of: &[Option<usize>],
    is_old: &[bool],
    theta: &ProjectionMatrix,
) -> Result<NewNodeStats> {
    let cfg = &model.config;
    let walks = sample_walks(g_new, v_new, cfg.l, cfg.n_s, cfg.seed)?;
    let s_tilde = aw_statistics_inductive(&walks, reduced);
    let delta = degree_features(
        &walks,
        g_new,
        cfg.l,
        cfg.e,
        model.cache.deg_min,
        model.cache.deg_max,
        Some(is_old),
    );
    // visit counts over old training nodes only, in the old index order
    let mut r = vec![0u32; model.cache.num_nodes()];
    for w in &walks {
        for &u in &w.nodes {
            if let Some(old) = old_index_of[u] {
                r[old] += 1;
            }
        }
    }
    let pi_g = project_position(&r, theta)?.to_vec();
    let subset = select_inference_walks(walks.len(), cfg.n_i, cfg.seed, merged_index);
    let inference_walks = subset
        .iter()
        .map(|&i| walks[i].nodes.clone())
        .collect();
    Ok(NewNodeStats {
        s_tilde,
        delta,
        pi_g,
        inference_walks,
    })
}

/// Inductive inference for new nodes within a graph: cached statistics of the
/// old nodes are reused frozen; new nodes get incremental statistics computed
/// on the extended topology; one feedforward pass covers the union.
pub fn infer_inductive_nodes(
    model: &TrainedModel,
    g_new: &Graph,
    new_node_ids: &[String],
) -> Result<EmbeddingSet> {
    let cache = &model.cache;
    let n_old = cache.num_nodes();
    // map old node order onto the extended graph
    let mut gnew_index_of_old = Vec::with_capacity(n_old);
    for id in &cache.node_ids {
        match g_new.index_of(id) {
            Some(i) => gnew_index_of_old.push(i),
            None => {
                return Err(IrweError::Invalid(format!(
                    "training node `{id}` missing from the extended graph"
                )))
            }
        }
    }
    let old_set: HashMap<&str, usize> = cache
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut new_gnew: Vec<usize> = Vec::with_capacity(new_node_ids.len());
    for id in new_node_ids {
        if old_set.contains_key(id.as_str()) {
            return Err(IrweError::Invalid(format!(
                "node `{id}` is already part of the training graph"
            )));
        }
        match g_new.index_of(id) {
            Some(i) => new_gnew.push(i),
            None => {
                return Err(IrweError::Invalid(format!(
                    "new node `{id}` not present in the extended graph"
                )))
            }
        }
    }
    if n_old + new_gnew.len() != g_new.num_nodes() {
        return Err(IrweError::Invalid(format!(
            "extended graph has {} nodes but {} were accounted for",
            g_new.num_nodes(),
            n_old + new_gnew.len()
        )));
    }
    // deterministic merged order: old nodes first (cached order), then new
    // nodes by extended-graph index
    new_gnew.sort_unstable();
    let mut old_index_of = vec![None; g_new.num_nodes()];
    let mut is_old = vec![false; g_new.num_nodes()];
    for (old, &gi) in gnew_index_of_old.iter().enumerate() {
        old_index_of[gi] = Some(old);
        is_old[gi] = true;
    }
    let mut merged_index_of = vec![usize::MAX; g_new.num_nodes()];
    for (old, &gi) in gnew_index_of_old.iter().enumerate() {
        merged_index_of[gi] = old;
    }
    for (k, &gi) in new_gnew.iter().enumerate() {
        merged_index_of[gi] = n_old + k;
    }

    let reduced = AwTable::from_walks(
        cache.walk_len,
        cache
            .reduced_walks
            .iter()
            .map(|codes| AnonymousWalk {
                codes: codes.clone(),
            })
            .collect(),
    );
    let theta = ProjectionMatrix {
        theta: model.params.get(THETA_PARAM).clone(),
        seed: child_seed(model.config.seed, "theta", 0),
    };

    let n_total = n_old + new_gnew.len();
    let mut s_tilde = cache.s_tilde.clone();
    let mut delta = cache.delta.clone();
    let mut pi_g = Array2::zeros((n_total, model.config.d));
    for (i, row) in cache.pi_g.rows().into_iter().enumerate() {
        pi_g.row_mut(i).assign(&row);
    }
    let mut inference_walks: Vec<Vec<Vec<u32>>> = cache.inference_walks.clone();
    // cached old-node walks already use merged indices (old order preserved)
    for (k, &gi) in new_gnew.iter().enumerate() {
        let merged = n_old + k;
        let stats = new_node_stats(
            model,
            g_new,
            &reduced,
            gi,
            merged,
            &old_index_of,
            &is_old,
            &theta,
        )?;
        s_tilde.push(stats.s_tilde);
        delta.push(stats.delta);
        for (j, &x) in stats.pi_g.iter().enumerate() {
            pi_g[[merged, j]] = x;
        }
        inference_walks.push(
            stats
                .inference_walks
                .iter()
                .map(|w| w.iter().map(|&u| merged_index_of[u] as u32).collect())
                .collect(),
        );
    }
    let mut node_ids = cache.node_ids.clone();
    for &gi in &new_gnew {
        node_ids.push(g_new.node_id(gi).to_owned());
    }

    let merged_cache = StatsCache {
        node_ids: node_ids.clone(),
        walk_len: cache.walk_len,
        reduced_walks: cache.reduced_walks.clone(),
        deg_min: cache.deg_min,
        deg_max: cache.deg_max,
        s_tilde,
        delta,
        pi_g,
        inference_walks,
    };
    let inputs = ForwardInputs::from_cache(&merged_cache, model.config.n_s)?;
    run_inference_forward(model, &inputs, node_ids)
}

/// Inductive inference across graphs: all statistics computed fresh on the
/// new topology under the reduced table and degree range of the training
/// graph; the global position projection is drawn fresh for the new node set.
pub fn infer_inductive_graph(model: &TrainedModel, g2: &Graph) -> Result<EmbeddingSet> {
    let cfg = &model.config;
    let cache = &model.cache;
    if let Some(&v) = g2.isolated_nodes().first() {
        return Err(IrweError::IsolatedNode(g2.node_id(v).to_owned()));
    }
    let reduced = AwTable::from_walks(
        cache.walk_len,
        cache
            .reduced_walks
            .iter()
            .map(|codes| AnonymousWalk {
                codes: codes.clone(),
            })
            .collect(),
    );
    let n = g2.num_nodes();
    let theta = ProjectionMatrix::generate(n, cfg.d, child_seed(cfg.seed, "theta-across", 0));
    let mut s_tilde = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut pi_g = Array2::zeros((n, cfg.d));
    let mut inference_walks: Vec<Vec<Vec<u32>>> = Vec::with_capacity(n);
    for v in 0..n {
        let walks: Vec<RandomWalk> = sample_walks(g2, v, cfg.l, cfg.n_s, cfg.seed)?;
        s_tilde.push(aw_statistics_inductive(&walks, &reduced));
        delta.push(degree_features(
            &walks,
            g2,
            cfg.l,
            cfg.e,
            cache.deg_min,
            cache.deg_max,
            None,
        ));
        let r = crate::walk::rw_statistic(&walks, n, None);
        pi_g.row_mut(v).assign(&project_position(&r, &theta)?);
        let subset = select_inference_walks(walks.len(), cfg.n_i, cfg.seed, v);
        inference_walks.push(
            subset
                .iter()
                .map(|&i| walks[i].nodes.iter().map(|&u| u as u32).collect())
                .collect(),
        );
    }
    let fresh_cache = StatsCache {
        node_ids: g2.node_ids().to_vec(),
        walk_len: cache.walk_len,
        reduced_walks: cache.reduced_walks.clone(),
        deg_min: cache.deg_min,
        deg_max: cache.deg_max,
        s_tilde,
        delta,
        pi_g,
        inference_walks,
    };
    let inputs = ForwardInputs::from_cache(&fresh_cache, cfg.n_s)?;
    run_inference_forward(model, &inputs, g2.node_ids().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Checkpoint;
    use crate::train::{tests::toy_config, tests::toy_graph, train};
    use tempfile::tempdir;

    fn trained() -> TrainedModel {
        let g = toy_graph();
        let mut cfg = toy_config();
        cfg.m = 3;
        train(&g, &cfg, None).unwrap()
    }

    #[test]
    fn transductive_is_deterministic_with_right_shapes() {
        let model = trained();
        let a = infer_transductive(&model).unwrap();
        let b = infer_transductive(&model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.psi.dim(), (10, model.config.d));
        assert_eq!(a.gamma.dim(), (10, model.config.d));
        assert_eq!(a.gamma_bar.dim(), (10, model.config.d));
    }

    #[test]
    fn transductive_matches_reloaded_checkpoint() {
        // persisting and reloading params + running stats + cache reproduces
        // the embeddings bit-exactly
        let model = trained();
        let direct = infer_transductive(&model).unwrap();
        let dir = tempdir().unwrap();
        model.checkpoint(2).save(&dir.path().join("ck.bin")).unwrap();
        model.cache.save(&dir.path().join("stats.bin")).unwrap();
        let ck = Checkpoint::load(&dir.path().join("ck.bin")).unwrap();
        let cache = crate::model::StatsCache::load(&dir.path().join("stats.bin")).unwrap();
        let reloaded = TrainedModel {
            config: model.config.clone(),
            params: ck.params,
            running: ck.running,
            cache,
            loss_history: vec![],
        };
        let replayed = infer_transductive(&reloaded).unwrap();
        assert_eq!(direct, replayed);
    }

    #[test]
    fn inductive_with_no_new_nodes_equals_transductive() {
        let model = trained();
        let g = toy_graph();
        let trans = infer_transductive(&model).unwrap();
        let ind = infer_inductive_nodes(&model, &g, &[]).unwrap();
        assert_eq!(trans, ind);
    }

    #[test]
    fn inductive_new_nodes_finite_and_cached_rows_preserved() {
        let model = trained();
        // extend with two new nodes attached to the cliques
        let mut edges: Vec<(String, String)> = Vec::new();
        let g_old = toy_graph();
        for v in 0..g_old.num_nodes() {
            for &u in g_old.neighbors(v) {
                if v < u {
                    edges.push((g_old.node_id(v).into(), g_old.node_id(u).into()));
                }
            }
        }
        edges.push(("x".into(), "a".into()));
        edges.push(("x".into(), "e".into()));
        edges.push(("y".into(), "x".into()));
        let pairs: Vec<(&str, &str)> = edges
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let (g_new, _, _) = Graph::from_edges(&pairs);
        let out = infer_inductive_nodes(&model, &g_new, &["x".into(), "y".into()]).unwrap();
        assert_eq!(out.node_ids.len(), 12);
        assert!(out.psi.iter().all(|x| x.is_finite()));
        assert!(out.gamma.iter().all(|x| x.is_finite()));
        assert_eq!(&out.node_ids[10..], &["x".to_string(), "y".to_string()]);
        // unknown new node and duplicate old node rejected
        assert!(infer_inductive_nodes(&model, &g_new, &["zz".into()]).is_err());
        assert!(infer_inductive_nodes(&model, &g_new, &["a".into()]).is_err());
    }

    #[test]
    fn new_component_never_reaching_old_nodes_gets_zero_pi_g() {
        let model = trained();
        let g_old = toy_graph();
        let mut edges: Vec<(String, String)> = Vec::new();
        for v in 0..g_old.num_nodes() {
            for &u in g_old.neighbors(v) {
                if v < u {
                    edges.push((g_old.node_id(v).into(), g_old.node_id(u).into()));
                }
            }
        }
        edges.push(("p".into(), "q".into()));
        let pairs: Vec<(&str, &str)> = edges
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let (g_new, _, _) = Graph::from_edges(&pairs);
        let out = infer_inductive_nodes(&model, &g_new, &["p".into(), "q".into()]).unwrap();
        assert!(out.psi.iter().all(|x| x.is_finite()));
        assert!(out.gamma.iter().all(|x| x.is_finite()));
        // walks from p/q never touch training nodes; their visit counts over
        // the old universe are all zero, so gamma is driven by zero queries
        // but must still be finite (checked above)
    }

    #[test]
    fn across_graph_relabeling_preserves_psi_exactly() {
        let model = trained();
        let g_old = toy_graph();
        // rename every id while keeping the node order: node v is introduced
        // at its own row via an edge to an earlier node, so first-appearance
        // order matches the original index order
        let mut edges: Vec<(String, String)> = Vec::new();
        for v in 0..g_old.num_nodes() {
            for &u in g_old.neighbors(v) {
                if u < v {
                    edges.push((
                        format!("r_{}", g_old.node_id(u)),
                        format!("r_{}", g_old.node_id(v)),
                    ));
                }
            }
        }
        let pairs: Vec<(&str, &str)> = edges
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let (g2, _, _) = Graph::from_edges(&pairs);
        let trans = infer_transductive(&model).unwrap();
        let across = infer_inductive_graph(&model, &g2).unwrap();
        // statistics are label-free, so the identity half is bit-identical
        assert_eq!(trans.psi, across.psi);
        // position half differs in general (fresh projection draw)
        assert!(across.gamma.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn across_graph_single_edge_works() {
        let model = trained();
        let (g2, _, _) = Graph::from_edges(&[("u", "w")]);
        let out = infer_inductive_graph(&model, &g2).unwrap();
        assert_eq!(out.psi.dim(), (2, model.config.d));
        assert!(out.gamma.iter().all(|x| x.is_finite()));
        // isolated node rejected
        let (g3, _, _) = Graph::from_edges(&[("u", "w"), ("z", "z")]);
        assert!(infer_inductive_graph(&model, &g3).is_err());
    }

    #[test]
    fn embedding_files_roundtrip() {
        let model = trained();
        let out = infer_transductive(&model).unwrap();
        let dir = tempdir().unwrap();
        out.write_all(dir.path()).unwrap();
        let (ids, psi) = EmbeddingSet::read_matrix(&dir.path().join("psi.txt")).unwrap();
        assert_eq!(ids, out.node_ids);
        assert_eq!(psi, out.psi);
        let (_, gamma) = EmbeddingSet::read_matrix(&dir.path().join("gamma.txt")).unwrap();
        assert_eq!(gamma, out.gamma);
        // malformed file rejected with line number
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "a 1.0 2.0\nb 1.0 oops\n").unwrap();
        match EmbeddingSet::read_matrix(&bad) {
            Err(IrweError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
