//! Position embeddings: identity-reweighted global position encodings, walk
//! token fusion, transformer over inference walks, attentive readout, and the
//! contrastive-statistics reconstruction loss.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::error::{IrweError, Result};
use crate::graph::Graph;
use crate::nn::layers::{
    bn_forward_infer, bn_forward_train, init_bn, init_mha, init_mlp, init_transformer,
    mha_forward, mlp_forward, transformer_forward, BnBatchMoments, BnRunning, MlpSpec,
};
use crate::nn::params::{Binding, ParamStore, Partition};
use crate::nn::tape::{Tape, Var};

/// Layer shapes of the position half of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSpecs {
    /// MLP applied to each normalized branch of the reweighting unit.
    pub reweight: MlpSpec,
    pub tran_layers: usize,
    pub tran_heads: usize,
    pub rout_heads: usize,
    pub d: usize,
    pub l: usize,
}

impl PositionSpecs {
    pub fn validate(&self) -> Result<()> {
        if self.reweight.input() != self.d || self.reweight.output() != self.d {
            return Err(IrweError::Config(format!(
                "reweighting MLP must map {0} -> {0}, got {1} -> {2}",
                self.d,
                self.reweight.input(),
                self.reweight.output()
            )));
        }
        for (what, h) in [("transformer", self.tran_heads), ("readout", self.rout_heads)] {
            if h == 0 || self.d % h != 0 {
                return Err(IrweError::Config(format!(
                    "embedding width {} not divisible by {h} {what} heads",
                    self.d
                )));
            }
        }
        Ok(())
    }
}

pub fn init_position(
    ps: &mut ParamStore,
    running: &mut BnRunning,
    specs: &PositionSpecs,
    rng: &mut ChaCha12Rng,
) {
    let d = specs.d;
    init_bn(ps, running, "pos.bn_psi", d, Partition::Position);
    init_bn(ps, running, "pos.bn_pig", d, Partition::Position);
    init_mlp(ps, "pos.rw_psi", &specs.reweight, Partition::Position, rng);
    init_mlp(ps, "pos.rw_pig", &specs.reweight, Partition::Position, rng);
    ps.init_weight("pos.wt", d + specs.l + 1, d, Partition::Position, rng);
    init_transformer(
        ps,
        "pos.tr",
        d,
        specs.tran_layers,
        specs.tran_heads,
        Partition::Position,
        rng,
    );
    init_mha(ps, "pos.rout", d, specs.rout_heads, Partition::Position, rng);
    ps.init_weight("pos.wg", d, d, Partition::Position, rng);
    ps.init_bias("pos.bg", d, Partition::Position);
    ps.init_weight("pos.wgbar", d, d, Partition::Position, rng);
    ps.init_bias("pos.bgbar", d, Partition::Position);
}

/// pi_g_bar = (MLP(BN(psi)) + MLP(BN(pi_g))) elementwise* BN(pi_g), with a
/// separate BN state per branch. Returns batch moments in train mode.
#[allow(clippy::too_many_arguments)]
pub fn reweight_attention(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    running: &BnRunning,
    specs: &PositionSpecs,
    psi: Var,
    pi_g: Var,
    train: bool,
) -> Result<(Var, Vec<BnBatchMoments>)> {
    let mut moments = Vec::new();
    let (bn_psi, bn_pig) = if train {
        let (a, m1) = bn_forward_train(tape, bind, ps, "pos.bn_psi", psi)?;
        let (b, m2) = bn_forward_train(tape, bind, ps, "pos.bn_pig", pi_g)?;
        moments.push(m1);
        moments.push(m2);
        (a, b)
    } else {
        (
            bn_forward_infer(tape, bind, ps, running, "pos.bn_psi", psi),
            bn_forward_infer(tape, bind, ps, running, "pos.bn_pig", pi_g),
        )
    };
    let w_psi = mlp_forward(tape, bind, ps, "pos.rw_psi", &specs.reweight, bn_psi)?;
    let w_pig = mlp_forward(tape, bind, ps, "pos.rw_pig", &specs.reweight, bn_pig)?;
    let gate = tape.add(w_psi, w_pig);
    let out = tape.mul(gate, bn_pig);
    Ok((out, moments))
}

/// Flattened walk-token layout: every inference walk of every node in order,
/// each contributing l+1 token rows.
#[derive(Debug, Clone)]
pub struct WalkTokenLayout {
    /// Node index for each token row, length n_nodes * n_i * (l+1).
    pub flat_nodes: Vec<usize>,
    pub n_nodes: usize,
    pub n_i: usize,
    pub l: usize,
}

impl WalkTokenLayout {
    /// Assemble from each node's selected inference walks. Walks must start
    /// at their own node.
    pub fn build(walks_per_node: &[Vec<&[usize]>], l: usize) -> Result<WalkTokenLayout> {
        let n_nodes = walks_per_node.len();
        let n_i = walks_per_node.first().map(|w| w.len()).unwrap_or(0);
        let mut flat_nodes = Vec::with_capacity(n_nodes * n_i * (l + 1));
        for (v, walks) in walks_per_node.iter().enumerate() {
            if walks.len() != n_i {
                return Err(IrweError::ShapeMismatch {
                    context: "walk token layout".into(),
                    expected: format!("{n_i} walks per node"),
                    got: format!("{} for node {v}", walks.len()),
                });
            }
            for w in walks {
                if w.len() != l + 1 {
                    return Err(IrweError::ShapeMismatch {
                        context: "walk token layout".into(),
                        expected: format!("{} nodes per walk", l + 1),
                        got: format!("{}", w.len()),
                    });
                }
                flat_nodes.extend_from_slice(w);
            }
        }
        Ok(WalkTokenLayout {
            flat_nodes,
            n_nodes,
            n_i,
            l,
        })
    }

    pub fn token_rows(&self) -> usize {
        self.flat_nodes.len()
    }

    /// Tiled local position encodings: row r is the one-hot of r mod (l+1).
    pub fn local_encodings(&self) -> Array2<f64> {
        let lp1 = self.l + 1;
        let mut m = Array2::zeros((self.token_rows(), lp1));
        for r in 0..self.token_rows() {
            m[[r, r % lp1]] = 1.0;
        }
        m
    }

    /// Row indices of each walk's first token in the flattened layout.
    pub fn first_token_rows(&self) -> Vec<usize> {
        (0..self.n_nodes * self.n_i).map(|w| w * (self.l + 1)).collect()
    }
}

/// Token fusion: token = [pi_g_bar(walk node) || pi_l(position)] * W_t.
pub fn fuse_tokens(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    layout: &WalkTokenLayout,
    pi_g_bar: Var,
) -> Var {
    let gathered = tape.gather_rows(pi_g_bar, layout.flat_nodes.clone());
    let locals = tape.leaf(layout.local_encodings());
    let fused = tape.concat_cols(gathered, locals);
    let wt = bind.bind(tape, ps, "pos.wt");
    tape.matmul(fused, wt)
}

/// Transformer over each walk's fused tokens; collect the first-token output
/// of every walk: (n_nodes * n_i) x d.
pub fn encode_walks(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &PositionSpecs,
    layout: &WalkTokenLayout,
    tokens: Var,
) -> Var {
    let enc = transformer_forward(
        tape,
        bind,
        ps,
        "pos.tr",
        specs.d,
        specs.tran_layers,
        specs.tran_heads,
        tokens,
        layout.l + 1,
    );
    tape.gather_rows(enc, layout.first_token_rows())
}

/// Attentive readout: per node, query = pi_g(v), keys/values = that node's
/// walk encodings; then gamma = z W_g + b_g and gamma_bar = z W_gbar + b_gbar.
pub fn attentive_readout(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &PositionSpecs,
    pi_g: Var,
    walk_encodings: Var,
    n_i: usize,
) -> Result<(Var, Var)> {
    if n_i == 0 || tape.value(walk_encodings).nrows() == 0 {
        return Err(IrweError::Invalid(
            "attentive readout needs at least one walk encoding per node".into(),
        ));
    }
    let z = mha_forward(
        tape,
        bind,
        ps,
        "pos.rout",
        specs.d,
        specs.rout_heads,
        pi_g,
        walk_encodings,
        walk_encodings,
        1,
        n_i,
    );
    let wg = bind.bind(tape, ps, "pos.wg");
    let bg = bind.bind(tape, ps, "pos.bg");
    let wgb = bind.bind(tape, ps, "pos.wgbar");
    let bgb = bind.bind(tape, ps, "pos.bgbar");
    let g_lin = tape.matmul(z, wg);
    let gamma = tape.add_row(g_lin, bg);
    let gb_lin = tape.matmul(z, wgb);
    let gamma_bar = tape.add_row(gb_lin, bgb);
    Ok((gamma, gamma_bar))
}

/// Full position forward from identity embeddings and position encodings.
#[allow(clippy::too_many_arguments)]
pub fn position_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    running: &BnRunning,
    specs: &PositionSpecs,
    psi: Var,
    pi_g: Var,
    layout: &WalkTokenLayout,
    train: bool,
) -> Result<(Var, Var, Vec<BnBatchMoments>)> {
    let (pi_g_bar, moments) =
        reweight_attention(tape, bind, ps, running, specs, psi, pi_g, train)?;
    let tokens = fuse_tokens(tape, bind, ps, layout, pi_g_bar);
    let encs = encode_walks(tape, bind, ps, specs, layout, tokens);
    let (gamma, gamma_bar) =
        attentive_readout(tape, bind, ps, specs, pi_g, encs, layout.n_i)?;
    Ok((gamma, gamma_bar, moments))
}

/// Closed-form targets of the negative-sampling objective on edges.
#[derive(Debug, Clone)]
pub struct ContrastiveStats {
    /// Dense matrix, nonzero only on edges.
    pub c: Array2<f64>,
    pub q: usize,
    pub tau: f64,
    /// Noise distribution n_j, sums to 1.
    pub noise: Vec<f64>,
}

/// C_ij = ln p_ij - ln(Q n_j) on edges (p_ij = A_ij / deg(v_i)); noise
/// n_j proportional to (sum_i p_ij)^0.75, normalized over all nodes.
pub fn build_contrastive_stats(g: &Graph, q: usize, tau: f64) -> Result<ContrastiveStats> {
    if q < 1 || tau <= 0.0 {
        return Err(IrweError::Config(format!(
            "contrastive statistics need Q >= 1 and tau > 0, got Q={q}, tau={tau}"
        )));
    }
    let n = g.num_nodes();
    for v in 0..n {
        if g.degree(v) == 0 {
            return Err(IrweError::IsolatedNode(g.node_id(v).to_owned()));
        }
    }
    // inflow_j = sum_i p_ij over edges into j
    let mut inflow = vec![0.0f64; n];
    for i in 0..n {
        let p = 1.0 / g.degree(i) as f64;
        for &j in g.neighbors(i) {
            inflow[j] += p;
        }
    }
    let mut noise: Vec<f64> = inflow.iter().map(|x| x.powf(0.75)).collect();
    let total: f64 = noise.iter().sum();
    for x in &mut noise {
        *x /= total;
    }
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        let p = 1.0 / g.degree(i) as f64;
        for &j in g.neighbors(i) {
            c[[i, j]] = p.ln() - (q as f64 * noise[j]).ln();
        }
    }
    Ok(ContrastiveStats { c, q, tau, noise })
}

/// L_gamma = || Gamma Gamma_bar^T / tau - C ||_F^2 over all N^2 entries.
pub fn position_loss(
    tape: &mut Tape,
    gamma: Var,
    gamma_bar: Var,
    c: Var,
    tau: f64,
) -> Var {
    let gbt = tape.transpose(gamma_bar);
    let s = tape.matmul(gamma, gbt);
    let sc = tape.scale(s, 1.0 / tau);
    let diff = tape.sub(sc, c);
    tape.sum_squares(diff)
}

/// The sampled negative-sampling objective of the contrastive formulation,
/// evaluated on free logits z (one per edge, dense storage). Used by the
/// stationarity oracle; production training uses `position_loss`.
pub fn contrastive_objective(g: &Graph, stats: &ContrastiveStats, z: &Array2<f64>) -> f64 {
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut total = 0.0;
    for i in 0..g.num_nodes() {
        let p = 1.0 / g.degree(i) as f64;
        for &j in g.neighbors(i) {
            let zij = z[[i, j]];
            total -= p * sigma(zij).ln()
                + stats.q as f64 * stats.noise[j] * sigma(-zij).ln();
        }
    }
    total
}

/// Gradient of `contrastive_objective` w.r.t. each edge logit.
pub fn contrastive_objective_grad(
    g: &Graph,
    stats: &ContrastiveStats,
    z: &Array2<f64>,
) -> Array2<f64> {
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut grad = Array2::zeros(z.dim());
    for i in 0..g.num_nodes() {
        let p = 1.0 / g.degree(i) as f64;
        for &j in g.neighbors(i) {
            let zij = z[[i, j]];
            grad[[i, j]] = -p * (1.0 - sigma(zij))
                + stats.q as f64 * stats.noise[j] * sigma(zij);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Activation;
    use crate::rng::child_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn toy_specs(d: usize, l: usize) -> PositionSpecs {
        PositionSpecs {
            reweight: MlpSpec::new(
                vec![d, d, d],
                vec![Activation::Sigmoid, Activation::Sigmoid],
            ),
            tran_layers: 1,
            tran_heads: 2,
            rout_heads: 2,
            d,
            l,
        }
    }

    fn toy_setup(
        d: usize,
        l: usize,
        seed: u64,
    ) -> (ParamStore, BnRunning, PositionSpecs) {
        let specs = toy_specs(d, l);
        specs.validate().unwrap();
        let mut ps = ParamStore::new();
        let mut running = BnRunning::default();
        let mut rng = child_rng(seed, "pos", 0);
        init_position(&mut ps, &mut running, &specs, &mut rng);
        (ps, running, specs)
    }

    #[test]
    fn contrastive_stats_single_edge() {
        let (g, _, _) = Graph::from_edges(&[("a", "b")]);
        let st = build_contrastive_stats(&g, 1, 1.0).unwrap();
        assert_abs_diff_eq!(st.noise[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(st.c[[0, 1]], (2.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(st.c[[1, 0]], (2.0f64).ln(), epsilon = 1e-12);
        assert_eq!(st.c[[0, 0]], 0.0);
    }

    #[test]
    fn contrastive_stats_regular_graph_closed_form() {
        // 4-cycle: degree 2 everywhere -> p = 1/2, n_j = 1/4,
        // C = ln(N/(kQ)) = ln(4 / (2*3)) with Q=3
        let (g, _, _) = Graph::from_edges(&[("a", "b"), ("b", "c"), ("c", "d"), ("d", "a")]);
        let st = build_contrastive_stats(&g, 3, 1.0).unwrap();
        let expect = (4.0f64 / 6.0).ln();
        for i in 0..4 {
            assert_abs_diff_eq!(st.noise[i], 0.25, epsilon = 1e-12);
            for &j in g.neighbors(i) {
                assert_abs_diff_eq!(st.c[[i, j]], expect, epsilon = 1e-12);
            }
        }
        // non-edges zero
        assert_eq!(st.c[[0, 2]], 0.0);
        // isolated node rejected
        let (g2, _, _) = Graph::from_edges(&[("a", "b"), ("c", "c")]);
        assert!(build_contrastive_stats(&g2, 1, 1.0).is_err());
        assert!(build_contrastive_stats(&g, 0, 1.0).is_err());
    }

    #[test]
    fn stationarity_of_contrastive_objective_at_c() {
        // gradient vanishes exactly at z = C for random graphs
        let mut rng = child_rng(11, "t", 0);
        for trial in 0..5 {
            let n = 5 + trial;
            let mut edges = Vec::new();
            // ring + random chords guarantees no isolated nodes
            let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
            for i in 0..n {
                edges.push((names[i].as_str(), names[(i + 1) % n].as_str()));
            }
            for _ in 0..n {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a != b {
                    edges.push((names[a].as_str(), names[b].as_str()));
                }
            }
            let (g, _, _) = Graph::from_edges(&edges);
            let st = build_contrastive_stats(&g, 5, 1.0).unwrap();
            let grad = contrastive_objective_grad(&g, &st, &st.c);
            let max = grad.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(max < 1e-10, "max |grad| {max} at n={n}");
        }
    }

    #[test]
    fn objective_grad_matches_finite_differences() {
        let (g, _, _) = Graph::from_edges(&[("a", "b"), ("b", "c"), ("c", "a")]);
        let st = build_contrastive_stats(&g, 2, 1.0).unwrap();
        let mut rng = child_rng(12, "t", 0);
        let z = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let grad = contrastive_objective_grad(&g, &st, &z);
        let h = 1e-6;
        for i in 0..3 {
            for &j in g.neighbors(i) {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (contrastive_objective(&g, &st, &zp)
                    - contrastive_objective(&g, &st, &zm))
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, grad[[i, j]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn position_loss_hand_values() {
        let mut t = Tape::new();
        let gamma = t.leaf(array![[1.0], [1.0]]);
        let gamma_bar = t.leaf(array![[1.0], [1.0]]);
        let c = t.leaf(Array2::zeros((2, 2)));
        let l = position_loss(&mut t, gamma, gamma_bar, c, 1.0);
        assert_abs_diff_eq!(t.value(l)[[0, 0]], 4.0, epsilon = 1e-12);
        // zero embeddings, zero targets -> 0
        let z = t.leaf(Array2::zeros((2, 1)));
        let l0 = position_loss(&mut t, z, z, c, 1.0);
        assert_abs_diff_eq!(t.value(l0)[[0, 0]], 0.0, epsilon = 1e-15);
        // temperature rescales the product before comparison
        let l2 = position_loss(&mut t, gamma, gamma_bar, c, 2.0);
        assert_abs_diff_eq!(t.value(l2)[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn token_layout_and_local_encodings() {
        let w1: &[usize] = &[0, 1, 0];
        let w2: &[usize] = &[0, 2, 1];
        let w3: &[usize] = &[1, 0, 2];
        let w4: &[usize] = &[1, 2, 0];
        let layout = WalkTokenLayout::build(&[vec![w1, w2], vec![w3, w4]], 2).unwrap();
        assert_eq!(layout.token_rows(), 12);
        assert_eq!(layout.flat_nodes[..6], [0, 1, 0, 0, 2, 1]);
        let locals = layout.local_encodings();
        for r in 0..12 {
            for c in 0..3 {
                assert_eq!(locals[[r, c]], if c == r % 3 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(layout.first_token_rows(), vec![0, 3, 6, 9]);
        // ragged input rejected
        assert!(WalkTokenLayout::build(&[vec![w1], vec![w3, w4]], 2).is_err());
        let short: &[usize] = &[0, 1];
        assert!(WalkTokenLayout::build(&[vec![short]], 2).is_err());
    }

    #[test]
    fn fuse_tokens_matches_hand_product() {
        // d=2, l=1: token = [pi_g_bar(node) || onehot(pos)] * W_t
        let (mut ps, _, _) = toy_setup(2, 1, 21);
        let mut t = Tape::new();
        let mut b = Binding::new();
        let pgb = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let w: &[usize] = &[0, 1];
        let layout = WalkTokenLayout::build(&[vec![w]], 1).unwrap();
        // overwrite W_t with a known matrix (4x2)
        *ps.get_mut("pos.wt") = array![[1.0, 0.0], [0.0, 1.0], [10.0, 0.0], [0.0, 10.0]];
        let tok = fuse_tokens(&mut t, &mut b, &ps, &layout, pgb);
        let v = t.value(tok);
        // row 0: [1,2,1,0] * W = [1+10, 2]; row 1: [3,4,0,1] * W = [3, 4+10]
        assert_abs_diff_eq!(v[[0, 0]], 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[0, 1]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 1]], 14.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (ps, running, specs) = toy_setup(4, 2, 22);
        let n = 3;
        let walks: Vec<Vec<Vec<usize>>> = vec![
            vec![vec![0, 1, 2], vec![0, 2, 1]],
            vec![vec![1, 0, 2], vec![1, 2, 0]],
            vec![vec![2, 1, 0], vec![2, 0, 1]],
        ];
        let views: Vec<Vec<&[usize]>> = walks
            .iter()
            .map(|ws| ws.iter().map(|w| w.as_slice()).collect())
            .collect();
        let layout = WalkTokenLayout::build(&views, 2).unwrap();
        let psi_m = Array2::from_shape_fn((n, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let pig_m = Array2::from_shape_fn((n, 4), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let run = |train: bool| {
            let mut t = Tape::new();
            let mut b = Binding::new();
            let psi = t.leaf(psi_m.clone());
            let pig = t.leaf(pig_m.clone());
            let (g, gb, moments) =
                position_forward(&mut t, &mut b, &ps, &running, &specs, psi, pig, &layout, train)
                    .unwrap();
            (t.value(g).clone(), t.value(gb).clone(), moments.len())
        };
        let (g1, gb1, m1) = run(true);
        let (g2, _, _) = run(true);
        assert_eq!(g1.dim(), (n, 4));
        assert_eq!(gb1.dim(), (n, 4));
        assert_eq!(m1, 2);
        assert_eq!(g1, g2);
        assert!(g1.iter().all(|x| x.is_finite()));
        // inference mode also works and differs in general (running stats)
        let (g3, _, m3) = run(false);
        assert_eq!(m3, 0);
        assert!(g3.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn position_grad_check_on_toy_setup() {
        let (ps, running, specs) = toy_setup(4, 2, 23);
        let (g, _, _) = Graph::from_edges(&[("a", "b"), ("b", "c"), ("c", "a")]);
        let stats = build_contrastive_stats(&g, 2, 2.0).unwrap();
        let walks: Vec<Vec<Vec<usize>>> = vec![
            vec![vec![0, 1, 2], vec![0, 2, 1]],
            vec![vec![1, 0, 2], vec![1, 2, 0]],
            vec![vec![2, 1, 0], vec![2, 0, 1]],
        ];
        let views: Vec<Vec<&[usize]>> = walks
            .iter()
            .map(|ws| ws.iter().map(|w| w.as_slice()).collect())
            .collect();
        let layout = WalkTokenLayout::build(&views, 2).unwrap();
        let psi_m = Array2::from_shape_fn((3, 4), |(i, j)| ((i * j) as f64).sin());
        let pig_m = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) as f64).cos());
        let loss = |ps: &ParamStore| {
            let mut t = Tape::new();
            let mut b = Binding::new();
            let psi = t.leaf(psi_m.clone());
            let pig = t.leaf(pig_m.clone());
            let (gm, gb, _) =
                position_forward(&mut t, &mut b, ps, &running, &specs, psi, pig, &layout, true)
                    .unwrap();
            let c = t.leaf(stats.c.clone());
            let l = position_loss(&mut t, gm, gb, c, stats.tau);
            let grads = t.backward(l);
            (t.value(l)[[0, 0]], b.grads(&grads))
        };
        let report = crate::nn::gradcheck::grad_check(&ps, &loss, 1e-5);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
        );
    }

    #[test]
    fn readout_rejects_empty_and_single_walk_works() {
        let (ps, _, specs) = toy_setup(4, 2, 24);
        let mut t = Tape::new();
        let mut b = Binding::new();
        let pig = t.leaf(Array2::ones((2, 4)));
        let encs = t.leaf(Array2::ones((2, 4)));
        // n_i = 1: one walk per node, attention weight 1
        let (g, gb) = attentive_readout(&mut t, &mut b, &ps, &specs, pig, encs, 1).unwrap();
        assert_eq!(t.value(g).dim(), (2, 4));
        assert_eq!(t.value(gb).dim(), (2, 4));
        let empty = t.leaf(Array2::zeros((0, 4)));
        assert!(attentive_readout(&mut t, &mut b, &ps, &specs, pig, empty, 0).is_err());
    }
}
