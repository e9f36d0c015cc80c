//! Random-walk sampling, anonymous-walk canonicalization, lookup tables and
//! all walk-induced statistics, in both from-scratch and inductive variants.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{IrweError, Result};
use crate::graph::Graph;
use crate::rng::child_seed;

/// Maximum supported walk length; Bell(l+1) grows too fast beyond this.
pub const MAX_WALK_LEN: usize = 12;

/// A node sequence of length l+1 where consecutive nodes are adjacent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomWalk {
    pub nodes: Vec<usize>,
}

/// First-occurrence canonicalization of a walk: codes[0] = 0 and each new
/// node gets the next unused code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnonymousWalk {
    pub codes: Vec<u8>,
}

impl AnonymousWalk {
    /// Check the canonicity invariants.
    pub fn is_canonical(codes: &[u8]) -> bool {
        if codes.first() != Some(&0) {
            return false;
        }
        let mut max = 0u8;
        for &c in &codes[1..] {
            if c > max + 1 {
                return false;
            }
            max = max.max(c);
        }
        true
    }
}

/// Map a walk to its anonymous walk.
pub fn to_anonymous(walk: &RandomWalk) -> AnonymousWalk {
    let mut first: HashMap<usize, u8> = HashMap::new();
    let mut codes = Vec::with_capacity(walk.nodes.len());
    for &v in &walk.nodes {
        let next = first.len() as u8;
        let c = *first.entry(v).or_insert(next);
        codes.push(c);
    }
    AnonymousWalk { codes }
}

/// Canonical enumeration of all anonymous walks of a given length, in
/// lexicographic order, with an index for lookups.
#[derive(Debug, Clone)]
pub struct AwTable {
    pub walk_len: usize,
    pub walks: Vec<AnonymousWalk>,
    index: HashMap<AnonymousWalk, usize>,
}

impl AwTable {
    pub fn size(&self) -> usize {
        self.walks.len()
    }

    pub fn position(&self, aw: &AnonymousWalk) -> Option<usize> {
        self.index.get(aw).copied()
    }

    pub fn from_walks(walk_len: usize, walks: Vec<AnonymousWalk>) -> AwTable {
        let index = walks
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        AwTable {
            walk_len,
            walks,
            index,
        }
    }
}

/// Enumerate every anonymous walk of length `l` (sequences of l+1 codes).
/// The table size equals Bell(l+1).
pub fn enumerate_aws(l: usize) -> Result<AwTable> {
    if l < 1 || l > MAX_WALK_LEN {
        return Err(IrweError::WalkLengthOutOfRange(l, MAX_WALK_LEN));
    }
    let mut walks = Vec::new();
    let mut prefix = vec![0u8];
    fn recurse(prefix: &mut Vec<u8>, max: u8, target: usize, out: &mut Vec<AnonymousWalk>) {
        if prefix.len() == target {
            out.push(AnonymousWalk {
                codes: prefix.clone(),
            });
            return;
        }
        for c in 0..=max + 1 {
            prefix.push(c);
            recurse(prefix, max.max(c), target, out);
            prefix.pop();
        }
    }
    recurse(&mut prefix, 0, l + 1, &mut walks);
    // generation order is already lexicographic
    Ok(AwTable::from_walks(l, walks))
}

/// Sample `n_samples` uniform random walks of length `l` starting at `v`.
/// Deterministic under `(seed, v)`: the node's stream does not depend on the
/// order nodes are processed in.
pub fn sample_walks(
    g: &Graph,
    v: usize,
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RandomWalk>> {
    if g.degree(v) == 0 {
        return Err(IrweError::IsolatedNode(g.node_id(v).to_owned()));
    }
    assert!(l >= 1 && n_samples >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(child_seed(seed, "walks", v as u64));
    let mut walks = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut nodes = Vec::with_capacity(l + 1);
        let mut cur = v;
        nodes.push(cur);
        for _ in 0..l {
            let nbrs = g.neighbors(cur);
            cur = nbrs[rng.gen_range(0..nbrs.len())];
            nodes.push(cur);
        }
        walks.push(RandomWalk { nodes });
    }
    Ok(walks)
}

/// Count how often each table entry appears among `walks`.
pub fn aw_statistics(walks: &[RandomWalk], table: &AwTable) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; table.size()];
    for w in walks {
        let aw = to_anonymous(w);
        match table.position(&aw) {
            Some(j) => counts[j] += 1,
            None => {
                return Err(IrweError::Invalid(format!(
                    "anonymous walk {:?} missing from full lookup table (corrupted table)",
                    aw.codes
                )))
            }
        }
    }
    Ok(counts)
}

/// Inductive variant: count only walks whose anonymous walk appears in the
/// (reduced) table; everything else is skipped.
pub fn aw_statistics_inductive(walks: &[RandomWalk], reduced: &AwTable) -> Vec<u32> {
    let mut counts = vec![0u32; reduced.size()];
    for w in walks {
        if let Some(j) = reduced.position(&to_anonymous(w)) {
            counts[j] += 1;
        }
    }
    counts
}

/// Drop table entries that no node observed. Returns the reduced table and
/// the old->new index mapping (None for removed entries).
pub fn reduce_table(stats: &[Vec<u32>], table: &AwTable) -> Result<(AwTable, Vec<Option<usize>>)> {
    if stats.is_empty() {
        return Err(IrweError::Invalid("reduce_table: empty statistics".into()));
    }
    let mut observed = vec![false; table.size()];
    for s in stats {
        for (j, &c) in s.iter().enumerate() {
            if c > 0 {
                observed[j] = true;
            }
        }
    }
    let mut remap = vec![None; table.size()];
    let mut walks = Vec::new();
    for (j, &obs) in observed.iter().enumerate() {
        if obs {
            remap[j] = Some(walks.len());
            walks.push(table.walks[j].clone());
        }
    }
    Ok((AwTable::from_walks(table.walk_len, walks), remap))
}

/// Apply a reduce_table remap to a full-table count vector.
pub fn remap_counts(counts: &[u32], remap: &[Option<usize>], reduced_size: usize) -> Vec<u32> {
    let mut out = vec![0u32; reduced_size];
    for (j, &c) in counts.iter().enumerate() {
        if let Some(nj) = remap[j] {
            out[nj] = c;
        }
    }
    out
}

/// Bucket index for a degree value: floor((deg - min) * e / (max - min)),
/// clamped to [0, e-1]. Out-of-range degrees (inductive mode) clamp too.
pub fn degree_bucket(deg: usize, deg_min: usize, deg_max: usize, e: usize) -> usize {
    assert!(e >= 1 && deg_max >= deg_min);
    if deg_max == deg_min {
        return 0;
    }
    if deg <= deg_min {
        return 0;
    }
    if deg >= deg_max {
        return e - 1;
    }
    let j = (deg - deg_min) * e / (deg_max - deg_min);
    j.min(e - 1)
}

/// Hop-wise degree features: block `i` accumulates degree-bucket one-hots of
/// the nodes at walk position `i`. In inductive mode (`known` supplied),
/// positions occupied by nodes outside `known` are skipped.
pub fn degree_features(
    walks: &[RandomWalk],
    g: &Graph,
    l: usize,
    e: usize,
    deg_min: usize,
    deg_max: usize,
    known: Option<&[bool]>,
) -> Vec<u32> {
    let mut delta = vec![0u32; (l + 1) * e];
    for w in walks {
        debug_assert_eq!(w.nodes.len(), l + 1);
        for (i, &u) in w.nodes.iter().enumerate() {
            if let Some(known) = known {
                if !known.get(u).copied().unwrap_or(false) {
                    continue;
                }
            }
            let j = degree_bucket(g.degree(u), deg_min, deg_max, e);
            delta[i * e + j] += 1;
        }
    }
    delta
}

/// Visit counts over a node universe of size `universe_len`; all walk
/// positions count, the start node included. When `known` is supplied only
/// nodes flagged there are counted (inductive truncation to the old set).
pub fn rw_statistic(walks: &[RandomWalk], universe_len: usize, known: Option<&[bool]>) -> Vec<u32> {
    let mut r = vec![0u32; universe_len];
    for w in walks {
        for &u in &w.nodes {
            match known {
                Some(k) => {
                    if k.get(u).copied().unwrap_or(false) {
                        r[u] += 1;
                    }
                }
                None => r[u] += 1,
            }
        }
    }
    r
}

/// Frozen Gaussian random projection, entries i.i.d. N(0, 1/d) under the
/// recorded seed. Persisted with the model so inductive inference can reuse it.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    pub theta: Array2<f64>,
    pub seed: u64,
}

impl ProjectionMatrix {
    pub fn generate(rows: usize, d: usize, seed: u64) -> ProjectionMatrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let std = (1.0 / d as f64).sqrt();
        let mut theta = Array2::zeros((rows, d));
        for i in 0..rows {
            for j in 0..d {
                // Box-Muller, deterministic under the stream
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                theta[[i, j]] = z * std;
            }
        }
        ProjectionMatrix { theta, seed }
    }
}

/// Project a visit-count vector: pi_g = r * Theta.
pub fn project_position(r: &[u32], theta: &ProjectionMatrix) -> Result<Array1<f64>> {
    if r.len() != theta.theta.nrows() {
        return Err(IrweError::ShapeMismatch {
            context: "project_position".into(),
            expected: format!("{} rows", theta.theta.nrows()),
            got: format!("{}", r.len()),
        });
    }
    let rv = Array1::from_iter(r.iter().map(|&x| x as f64));
    Ok(rv.dot(&theta.theta))
}

/// Everything the model consumes for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStatistics {
    /// Reduced AW counts, length eta-tilde.
    pub s_tilde: Vec<u32>,
    /// Hop-wise degree-bucket counts, length (l+1)*e.
    pub delta: Vec<u32>,
    /// Projected visit counts, length d.
    pub pi_g: Vec<f64>,
}

/// Walk sets kept per node: the full sample and the inference subset.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkSet {
    pub walks: Vec<RandomWalk>,
    /// Indices into `walks` of the n_I walks fed to the transformer.
    pub inference_subset: Vec<usize>,
}

/// Pick the n_I inference walks: a seeded shuffle of the walk list, first n_I.
pub fn select_inference_walks(n_walks: usize, n_i: usize, seed: u64, v: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha12Rng::seed_from_u64(child_seed(seed, "walk-subset", v as u64));
    let mut idx: Vec<usize> = (0..n_walks).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n_i.min(n_walks));
    idx
}

/// Sample walks and the inference subset for every node in parallel; results
/// are merged by node index so the outcome is order-independent.
pub fn sample_all_walks(
    g: &Graph,
    l: usize,
    n_s: usize,
    n_i: usize,
    seed: u64,
) -> Result<Vec<WalkSet>> {
    (0..g.num_nodes())
        .into_par_iter()
        .map(|v| {
            let walks = sample_walks(g, v, l, n_s, seed)?;
            let inference_subset = select_inference_walks(walks.len(), n_i, seed, v);
            Ok(WalkSet {
                walks,
                inference_subset,
            })
        })
        .collect()
}
