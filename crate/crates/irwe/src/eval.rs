//! Downstream evaluation: degree-profile similarity graph, normalized cut,
//! modularity, k-means clustering, logistic-regression classification with
//! micro-F1, split management, and the TSV metrics report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{IrweError, Result};
use crate::graph::{Graph, NodePartition};
use crate::rng::child_rng;

/// Unweighted symmetric nearest-neighbor graph over node profiles.
#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    pub adjacency: Vec<Vec<usize>>,
}

impl SimilarityGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        // all-zero profiles are defined to be similar to nothing
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Link each node to its `k` most cosine-similar others (ties broken by node
/// index), then union-symmetrize.
pub fn build_similarity_graph(profiles: &[Vec<f64>], k: usize) -> Result<SimilarityGraph> {
    let n = profiles.len();
    if k < 1 {
        return Err(IrweError::Invalid("similarity k must be >= 1".into()));
    }
    if n < 2 {
        return Err(IrweError::Invalid(
            "similarity graph needs at least 2 nodes".into(),
        ));
    }
    let k = k.min(n - 1);
    let mut sets: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for v in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&u| u != v)
            .map(|u| (u, cosine(&profiles[v], &profiles[u])))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(u, _) in sims.iter().take(k) {
            sets[v].insert(u);
            sets[u].insert(v);
        }
    }
    Ok(SimilarityGraph {
        adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

/// Degree-similarity auxiliary graph: rooted-subgraph degree profiles within
/// `hops` hops over `buckets` degree buckets, top-`k` cosine neighbors.
pub fn degree_similarity_graph(
    g: &Graph,
    hops: usize,
    buckets: usize,
    k: usize,
) -> Result<SimilarityGraph> {
    let profiles: Vec<Vec<f64>> = (0..g.num_nodes())
        .map(|v| g.rooted_subgraph_degree_profile(v, hops, buckets))
        .collect();
    build_similarity_graph(&profiles, k)
}

fn check_assignment(assignment: &[usize], n: usize) -> Result<usize> {
    if assignment.len() != n {
        return Err(IrweError::Invalid(format!(
            "assignment covers {} nodes, graph has {}",
            assignment.len(),
            n
        )));
    }
    Ok(assignment.iter().copied().max().map_or(0, |m| m + 1))
}

/// Normalized cut of a clustering against the similarity graph:
/// 0.5 * sum_r cut(C_r, complement) / vol(C_r); zero-volume clusters
/// contribute 0.
pub fn ncut(assignment: &[usize], gd: &SimilarityGraph) -> Result<f64> {
    let n = gd.num_nodes();
    let k = check_assignment(assignment, n)?;
    let mut cut = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for v in 0..n {
        vol[assignment[v]] += gd.degree(v) as f64;
        for &u in &gd.adjacency[v] {
            if assignment[u] != assignment[v] {
                cut[assignment[v]] += 1.0;
            }
        }
    }
    let mut total = 0.0;
    for r in 0..k {
        if vol[r] > 0.0 {
            total += cut[r] / vol[r];
        }
    }
    Ok(0.5 * total)
}

/// Modularity of a clustering:
/// (1/2e) * sum_r sum_{i,j in C_r} [A_ij - deg(i)deg(j)/(2e)].
pub fn modularity(assignment: &[usize], g: &Graph) -> Result<f64> {
    let n = g.num_nodes();
    let k = check_assignment(assignment, n)?;
    let two_e = 2.0 * g.num_edges() as f64;
    if g.num_edges() == 0 {
        return Err(IrweError::Invalid(
            "modularity undefined on an empty edge set".into(),
        ));
    }
    // within-cluster edge endpoints and per-cluster degree sums
    let mut internal = vec![0.0; k];
    let mut deg_sum = vec![0.0; k];
    for v in 0..n {
        deg_sum[assignment[v]] += g.degree(v) as f64;
        for &u in g.neighbors(v) {
            if assignment[u] == assignment[v] {
                internal[assignment[v]] += 1.0; // counts each edge twice
            }
        }
    }
    let mut q = 0.0;
    for r in 0..k {
        q += internal[r] / two_e - (deg_sum[r] / two_e).powi(2);
    }
    Ok(q)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` by inertia.
/// Returns (assignment, inertia); deterministic under `seed`.
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Vec<usize>, f64)> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(IrweError::Invalid(format!(
            "kmeans needs 1 <= K <= n, got K={k}, n={n}"
        )));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| points.row(i).to_slice().unwrap()).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = child_rng(seed, "kmeans", restart as u64);
        // k-means++ seeding
        let mut centers: Vec<Vec<f64>> = vec![rows[rng.gen_range(0..n)].to_vec()];
        let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total <= 0.0 {
                rng.gen_range(0..n)
            } else {
                let mut t = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    t -= w;
                    if t <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            centers.push(rows[next].to_vec());
            for (i, r) in rows.iter().enumerate() {
                d2[i] = d2[i].min(sq_dist(r, centers.last().unwrap()));
            }
        }
        // Lloyd iterations
        let mut assignment = vec![0usize; n];
        for _ in 0..200 {
            let mut changed = false;
            for (i, r) in rows.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(r, center);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assignment[i] != best_c {
                    assignment[i] = best_c;
                    changed = true;
                }
            }
            let dim = points.ncols();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, r) in rows.iter().enumerate() {
                counts[assignment[i]] += 1;
                for (j, &x) in r.iter().enumerate() {
                    sums[assignment[i]][j] += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for x in &mut sums[c] {
                        *x /= counts[c] as f64;
                    }
                    centers[c] = sums[c].clone();
                } else {
                    // re-seed an empty cluster at the farthest point
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            sq_dist(rows[a], &centers[assignment[a]])
                                .partial_cmp(&sq_dist(rows[b], &centers[assignment[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centers[c] = rows[far].to_vec();
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = rows
            .iter()
            .enumerate()
            .map(|(i, r)| sq_dist(r, &centers[assignment[i]]))
            .sum();
        if best.as_ref().map_or(true, |(_, bi)| inertia < *bi) {
            best = Some((assignment, inertia));
        }
    }
    Ok(best.unwrap())
}

/// Dense label encoding for a node set: per node the class-index set, plus
/// class names in index order.
#[derive(Debug, Clone)]
pub struct EncodedLabels {
    pub classes: Vec<String>,
    /// Per node, ascending class indices; empty means unlabeled.
    pub per_node: Vec<Vec<usize>>,
    pub multilabel: bool,
}

/// Encode external labels onto the node-id order, removing classes with fewer
/// than `min_members` labeled nodes. Nodes whose classes were all removed
/// become unlabeled.
pub fn encode_labels(
    node_ids: &[String],
    by_id: &std::collections::HashMap<String, Vec<String>>,
    min_members: usize,
) -> Result<EncodedLabels> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut multilabel = false;
    for id in node_ids {
        if let Some(ls) = by_id.get(id) {
            if ls.len() > 1 {
                multilabel = true;
            }
            for l in ls {
                *counts.entry(l.as_str()).or_default() += 1;
            }
        }
    }
    let classes: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c >= min_members)
        .map(|(&name, _)| name.to_owned())
        .collect();
    if classes.len() < 2 {
        return Err(IrweError::Invalid(format!(
            "fewer than 2 classes with >= {min_members} members remain"
        )));
    }
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let per_node = node_ids
        .iter()
        .map(|id| {
            let mut set: Vec<usize> = by_id
                .get(id)
                .map(|ls| {
                    ls.iter()
                        .filter_map(|l| index.get(l.as_str()).copied())
                        .collect()
                })
                .unwrap_or_default();
            set.sort_unstable();
            set.dedup();
            set
        })
        .collect();
    Ok(EncodedLabels {
        classes,
        per_node,
        multilabel,
    })
}

/// Full-batch gradient descent with backtracking line search on an L2-penalized
/// cross-entropy objective; runs until the loss change falls below `tol`.
fn fit_linear(
    x: &Array2<f64>,
    y: &Array2<f64>,
    l2: f64,
    tol: f64,
    softmax: bool,
) -> Array2<f64> {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let c = y.ncols();
    let mut w = Array2::<f64>::zeros((d, c));
    let loss_grad = |w: &Array2<f64>| -> (f64, Array2<f64>) {
        let z = x.dot(w);
        let (loss_data, p): (f64, Array2<f64>) = if softmax {
            // row-wise softmax cross-entropy
            let mut p = z.clone();
            let mut loss = 0.0;
            for (mut row, yrow) in p.rows_mut().into_iter().zip(y.rows()) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
                for (pv, &yv) in row.iter().zip(yrow.iter()) {
                    if yv > 0.0 {
                        loss -= yv * pv.max(1e-300).ln();
                    }
                }
            }
            (loss / n, p)
        } else {
            // independent per-class sigmoid cross-entropy
            let p = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let mut loss = 0.0;
            for (pv, yv) in p.iter().zip(y.iter()) {
                loss -= yv * pv.max(1e-300).ln() + (1.0 - yv) * (1.0 - pv).max(1e-300).ln();
            }
            (loss / n, p)
        };
        // bias row (last) unregularized
        let mut reg = 0.0;
        for i in 0..d - 1 {
            for j in 0..c {
                reg += w[[i, j]] * w[[i, j]];
            }
        }
        let mut grad = x.t().dot(&(&p - y)) / n;
        for i in 0..d - 1 {
            for j in 0..c {
                grad[[i, j]] += l2 * w[[i, j]] / n;
            }
        }
        (loss_data + 0.5 * l2 * reg / n, grad)
    };
    let (mut loss, mut grad) = loss_grad(&w);
    let mut step = 1.0;
    for _ in 0..5000 {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < tol {
            break;
        }
        // backtracking line search from a slightly optimistic step
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..40 {
            let w_try = &w - &(step * &grad);
            let (loss_try, grad_try) = loss_grad(&w_try);
            if loss_try <= loss - 0.5 * step * gnorm2 {
                let delta = loss - loss_try;
                w = w_try;
                loss = loss_try;
                grad = grad_try;
                accepted = true;
                if delta < tol {
                    return w;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}

fn with_bias(points: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = points.ncols();
    let mut x = Array2::<f64>::ones((rows.len(), d + 1));
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = points[[r, j]];
        }
    }
    x
}

/// Train logistic regression on the partition's train+validation nodes and
/// return micro-F1 on its test nodes. Multiclass uses softmax regression;
/// multilabel uses one-vs-rest with a 0.5 threshold.
pub fn logistic_eval(
    embeddings: &Array2<f64>,
    labels: &EncodedLabels,
    split: &NodePartition,
    l2: f64,
) -> Result<f64> {
    let c = labels.classes.len();
    let labeled = |v: &&usize| !labels.per_node[**v].is_empty();
    let train_rows: Vec<usize> = split
        .train
        .iter()
        .chain(split.validation.iter())
        .filter(labeled)
        .copied()
        .collect();
    let test_rows: Vec<usize> = split.test.iter().filter(labeled).copied().collect();
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(IrweError::Invalid(
            "empty labeled train or test set".into(),
        ));
    }
    let seen: std::collections::BTreeSet<usize> = train_rows
        .iter()
        .flat_map(|&v| labels.per_node[v].iter().copied())
        .collect();
    if seen.len() < 2 {
        return Err(IrweError::Invalid(
            "training split is degenerate: fewer than 2 classes present".into(),
        ));
    }
    let x_train = with_bias(embeddings, &train_rows);
    let x_test = with_bias(embeddings, &test_rows);
    let mut y = Array2::<f64>::zeros((train_rows.len(), c));
    for (i, &v) in train_rows.iter().enumerate() {
        let ls = &labels.per_node[v];
        for &j in ls {
            y[[i, j]] = if labels.multilabel {
                1.0
            } else {
                1.0 / ls.len() as f64
            };
        }
    }
    let w = fit_linear(&x_train, &y, l2, 1e-6, !labels.multilabel);
    let z = x_test.dot(&w);
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (i, &v) in test_rows.iter().enumerate() {
        let truth = &labels.per_node[v];
        if labels.multilabel {
            for j in 0..c {
                let pred = z[[i, j]] > 0.0; // sigmoid(z) > 0.5
                let actual = truth.binary_search(&j).is_ok();
                match (pred, actual) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    (false, false) => {}
                }
            }
        } else {
            let pred = z
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if truth.binary_search(&pred).is_ok() {
                tp += 1;
            } else {
                fp += 1;
                fne += 1;
            }
        }
    }
    let denom = 2 * tp + fp + fne;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Split schemes for repeated evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitScheme {
    /// Train fraction `f`; the remainder is halved into validation and test.
    /// Independent shuffle per repeat.
    TransductiveFraction(f64),
    /// One shuffle into 10 folds; repeat i tests on fold i, validates on the
    /// next fold, trains on the rest (80/10/10 when repeats = folds = 10).
    Inductive801010,
}

/// Deterministic node partitions under `seed`.
pub fn make_splits(
    n: usize,
    scheme: SplitScheme,
    repeats: usize,
    seed: u64,
) -> Result<Vec<NodePartition>> {
    if n < 10 {
        return Err(IrweError::Invalid(format!(
            "need at least 10 nodes to split, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(repeats);
    match scheme {
        SplitScheme::TransductiveFraction(f) => {
            if !(0.0..1.0).contains(&f) || f <= 0.0 {
                return Err(IrweError::Invalid(format!(
                    "train fraction must be in (0,1), got {f}"
                )));
            }
            for rep in 0..repeats {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = child_rng(seed, "split", rep as u64);
                for i in (1..n).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let n_train = ((f * n as f64).round() as usize).clamp(1, n - 2);
                let rest = n - n_train;
                let n_val = rest / 2;
                let p = NodePartition {
                    train: order[..n_train].to_vec(),
                    validation: order[n_train..n_train + n_val].to_vec(),
                    test: order[n_train + n_val..].to_vec(),
                };
                p.validate(n)?;
                out.push(p);
            }
        }
        SplitScheme::Inductive801010 => {
            let folds = 10usize;
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = child_rng(seed, "split-folds", 0);
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let bounds: Vec<usize> = (0..=folds).map(|i| i * n / folds).collect();
            let fold = |i: usize| &order[bounds[i]..bounds[i + 1]];
            for rep in 0..repeats {
                let test_f = rep % folds;
                let val_f = (rep + 1) % folds;
                let mut train = Vec::new();
                for i in 0..folds {
                    if i != test_f && i != val_f {
                        train.extend_from_slice(fold(i));
                    }
                }
                let p = NodePartition {
                    train,
                    validation: fold(val_f).to_vec(),
                    test: fold(test_f).to_vec(),
                };
                p.validate(n)?;
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// One line of the metrics report.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub dataset: String,
    pub task: String,
    pub split_fraction: String,
    pub repeat: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// Write the TSV report: header, per-repeat rows, then a mean row per
/// (dataset, task, split-fraction, metric) group.
pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| IrweError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    (|| -> std::io::Result<()> {
        writeln!(w, "dataset\ttask\tsplit_fraction\trepeat\tmetric\tvalue")?;
        for r in rows {
            let rep = r.repeat.map_or("-".to_string(), |x| x.to_string());
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{:.6}",
                r.dataset, r.task, r.split_fraction, rep, r.metric, r.value
            )?;
            groups
                .entry((
                    r.dataset.clone(),
                    r.task.clone(),
                    r.split_fraction.clone(),
                    r.metric.clone(),
                ))
                .or_default()
                .push(r.value);
        }
        for ((dataset, task, frac, metric), vals) in &groups {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            writeln!(
                w,
                "{dataset}\t{task}\t{frac}\tmean\t{metric}\t{mean:.6}"
            )?;
        }
        w.flush()
    })()
    .map_err(|e| IrweError::io(path, e))
}

/// Mean value over the rows carrying `metric`.
pub fn mean_metric(rows: &[MetricRow], metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| r.value)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Default degree-similarity-graph parameters: (hops, buckets) by graph size,
/// top-k fixed at 10.
pub const GD_TOP_K: usize = 10;
pub fn gd_parameters(num_nodes: usize) -> (usize, usize) {
    if num_nodes <= 600 {
        (3, 200)
    } else {
        (5, 500)
    }
}

/// Average over `column` of an Array2, helper for tests and reports.
pub fn column_means(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap()
}
