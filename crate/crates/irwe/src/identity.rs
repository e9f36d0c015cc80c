//! Identity embeddings: anonymous-walk autoencoder, statistic reducer,
//! attention combiner over AW embeddings, reconstruction decoder and the
//! identity training loss.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::error::{IrweError, Result};
use crate::nn::layers::{init_mha, init_mlp, mha_forward, mlp_forward, MlpSpec};
use crate::nn::params::{Binding, ParamStore, Partition};
use crate::nn::tape::{Tape, Var};
use crate::walk::{AnonymousWalk, AwTable};

/// Per-position one-hot encoding of an anonymous walk: block j (of l+1
/// slots) is the one-hot of code j; total length (l+1)^2.
pub fn aw_one_hot(aw: &AnonymousWalk, l: usize) -> Result<Vec<f64>> {
    if aw.codes.len() != l + 1 {
        return Err(IrweError::ShapeMismatch {
            context: "aw_one_hot".into(),
            expected: format!("{} codes", l + 1),
            got: format!("{}", aw.codes.len()),
        });
    }
    let mut bits = vec![0.0; (l + 1) * (l + 1)];
    for (j, &c) in aw.codes.iter().enumerate() {
        if c as usize > l {
            return Err(IrweError::Invalid(format!(
                "anonymous-walk code {c} exceeds walk length {l}"
            )));
        }
        bits[j * (l + 1) + c as usize] = 1.0;
    }
    Ok(bits)
}

/// Stack the one-hot encodings of every table entry into an eta x (l+1)^2
/// matrix (row order = table order).
pub fn one_hot_matrix(table: &AwTable) -> Result<Array2<f64>> {
    let l = table.walk_len;
    let mut m = Array2::zeros((table.size(), (l + 1) * (l + 1)));
    for (i, aw) in table.walks.iter().enumerate() {
        let row = aw_one_hot(aw, l)?;
        for (j, &b) in row.iter().enumerate() {
            m[[i, j]] = b;
        }
    }
    Ok(m)
}

/// Layer shapes of the identity half of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpecs {
    pub enc: MlpSpec,
    pub dec: MlpSpec,
    pub reducer: MlpSpec,
    pub decoder: MlpSpec,
    pub heads: usize,
    pub d: usize,
}

impl IdentitySpecs {
    pub fn validate(&self, eta: usize, l: usize, e: usize) -> Result<()> {
        let onehot = (l + 1) * (l + 1);
        let feat = eta + (l + 1) * e;
        let checks = [
            ("aw encoder input", self.enc.input(), onehot),
            ("aw encoder output", self.enc.output(), self.d),
            ("aw decoder input", self.dec.input(), self.d),
            ("aw decoder output", self.dec.output(), onehot),
            ("feature reducer input", self.reducer.input(), feat),
            ("feature reducer output", self.reducer.output(), self.d),
            ("identity decoder input", self.decoder.input(), self.d),
            ("identity decoder output", self.decoder.output(), feat),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(IrweError::Config(format!(
                    "{what} width {got} does not match required {expected}"
                )));
            }
        }
        if self.d % self.heads != 0 {
            return Err(IrweError::Config(format!(
                "embedding width {} not divisible by {} identity attention heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_identity(ps: &mut ParamStore, specs: &IdentitySpecs, rng: &mut ChaCha12Rng) {
    init_mlp(ps, "id.enc", &specs.enc, Partition::Identity, rng);
    init_mlp(ps, "id.dec", &specs.dec, Partition::Identity, rng);
    init_mlp(ps, "id.red", &specs.reducer, Partition::Identity, rng);
    init_mha(ps, "id.att", specs.d, specs.heads, Partition::Identity, rng);
    init_mlp(ps, "id.out", &specs.decoder, Partition::Identity, rng);
}

/// Encode/decode the AW one-hot batch: phi = Enc(rho), rho_hat = Dec(phi).
pub fn aw_autoencode(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &IdentitySpecs,
    rho: Var,
) -> Result<(Var, Var)> {
    let phi = mlp_forward(tape, bind, ps, "id.enc", &specs.enc, rho)?;
    let rho_hat = mlp_forward(tape, bind, ps, "id.dec", &specs.dec, phi)?;
    Ok((phi, rho_hat))
}

/// Normalized per-node feature matrix [s_tilde || delta] / n_S.
pub fn node_feature_matrix(
    s_tilde: &[Vec<u32>],
    delta: &[Vec<u32>],
    n_s: usize,
) -> Result<Array2<f64>> {
    if s_tilde.len() != delta.len() || s_tilde.is_empty() {
        return Err(IrweError::ShapeMismatch {
            context: "node_feature_matrix".into(),
            expected: format!("{} aligned non-empty rows", s_tilde.len()),
            got: format!("{}", delta.len()),
        });
    }
    let (eta, de) = (s_tilde[0].len(), delta[0].len());
    let inv = 1.0 / n_s as f64;
    let mut m = Array2::zeros((s_tilde.len(), eta + de));
    for (i, (s, d)) in s_tilde.iter().zip(delta).enumerate() {
        for (j, &c) in s.iter().enumerate() {
            m[[i, j]] = c as f64 * inv;
        }
        for (j, &c) in d.iter().enumerate() {
            m[[i, eta + j]] = c as f64 * inv;
        }
    }
    Ok(m)
}

/// g_bar = MLP(features): reduce each node's normalized statistics to d dims.
pub fn reduce_features(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &IdentitySpecs,
    features: Var,
) -> Result<Var> {
    mlp_forward(tape, bind, ps, "id.red", &specs.reducer, features)
}

/// psi = MultiHeadAtt(query = g_bar, key = value = phi): every node's
/// identity embedding is a convex combination of AW value projections.
pub fn identity_encode(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &IdentitySpecs,
    g_bar: Var,
    phi: Var,
) -> Var {
    let n = tape.value(g_bar).nrows();
    let eta = tape.value(phi).nrows();
    mha_forward(
        tape, bind, ps, "id.att", specs.d, specs.heads, g_bar, phi, phi, n, eta,
    )
}

/// g_hat = MLP(psi): statistic reconstruction, training-phase only.
pub fn identity_decode(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &IdentitySpecs,
    psi: Var,
) -> Result<Var> {
    mlp_forward(tape, bind, ps, "id.out", &specs.decoder, psi)
}

/// L_psi = sum_w ||rho - rho_hat||^2 + alpha * sum_v ||features - g_hat||^2.
pub fn identity_loss(
    tape: &mut Tape,
    rho: Var,
    rho_hat: Var,
    features: Var,
    g_hat: Var,
    alpha: f64,
) -> Var {
    let aw_err = tape.sub(rho, rho_hat);
    let aw_term = tape.sum_squares(aw_err);
    if alpha == 0.0 {
        return aw_term;
    }
    let rec_err = tape.sub(features, g_hat);
    let rec_sq = tape.sum_squares(rec_err);
    let rec_term = tape.scale(rec_sq, alpha);
    tape.add(aw_term, rec_term)
}

/// Everything produced by one identity forward pass.
pub struct IdentityForward {
    pub phi: Var,
    pub rho_hat: Var,
    pub g_bar: Var,
    pub psi: Var,
}

/// Shared forward path for training and inference (the reconstruction
/// decoder is applied separately since inference never needs it).
pub fn identity_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    specs: &IdentitySpecs,
    rho: Var,
    features: Var,
) -> Result<IdentityForward> {
    let (phi, rho_hat) = aw_autoencode(tape, bind, ps, specs, rho)?;
    let g_bar = reduce_features(tape, bind, ps, specs, features)?;
    let psi = identity_encode(tape, bind, ps, specs, g_bar, phi);
    Ok(IdentityForward {
        phi,
        rho_hat,
        g_bar,
        psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::Adam;
    use crate::nn::layers::Activation;
    use crate::rng::child_rng;
    use crate::walk::enumerate_aws;
    use approx::assert_abs_diff_eq;

    fn toy_specs(eta: usize, l: usize, e: usize, d: usize) -> IdentitySpecs {
        let onehot = (l + 1) * (l + 1);
        let feat = eta + (l + 1) * e;
        IdentitySpecs {
            enc: MlpSpec::new(vec![onehot, 8, d], vec![Activation::Tanh, Activation::Tanh]),
            dec: MlpSpec::new(vec![d, 8, onehot], vec![Activation::Tanh, Activation::Tanh]),
            reducer: MlpSpec::new(vec![feat, 8, d], vec![Activation::Relu, Activation::Relu]),
            decoder: MlpSpec::new(vec![d, 8, feat], vec![Activation::Tanh, Activation::Tanh]),
            heads: 2,
            d,
        }
    }

    #[test]
    fn one_hot_examples() {
        let aw = AnonymousWalk {
            codes: vec![0, 1, 2, 3],
        };
        let bits = aw_one_hot(&aw, 3).unwrap();
        #[rustfmt::skip]
        let expect = vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ];
        assert_eq!(bits, expect);
        let aw2 = AnonymousWalk {
            codes: vec![0, 1, 0, 1],
        };
        let bits2 = aw_one_hot(&aw2, 3).unwrap();
        #[rustfmt::skip]
        let expect2 = vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        ];
        assert_eq!(bits2, expect2);
    }

    #[test]
    fn one_hot_popcount_and_errors() {
        let t = enumerate_aws(4).unwrap();
        for aw in &t.walks {
            let bits = aw_one_hot(aw, 4).unwrap();
            assert_eq!(bits.iter().filter(|&&b| b == 1.0).count(), 5);
            // block 0 is always the one-hot of code 0
            assert_eq!(bits[0], 1.0);
        }
        // wrong length
        let aw = AnonymousWalk { codes: vec![0, 1] };
        assert!(aw_one_hot(&aw, 3).is_err());
        // code exceeding l
        let aw = AnonymousWalk {
            codes: vec![0, 5, 0, 0],
        };
        assert!(aw_one_hot(&aw, 3).is_err());
    }

    #[test]
    fn one_hot_hamming_distance_between_single_difference() {
        let a = AnonymousWalk {
            codes: vec![0, 1, 2, 0],
        };
        let b = AnonymousWalk {
            codes: vec![0, 1, 2, 1],
        };
        let (ba, bb) = (aw_one_hot(&a, 3).unwrap(), aw_one_hot(&b, 3).unwrap());
        let dist: usize = ba
            .iter()
            .zip(&bb)
            .filter(|(x, y)| x != y)
            .count();
        assert_eq!(dist, 2);
    }

    #[test]
    fn feature_matrix_normalization_scale_invariance() {
        let s1 = vec![vec![2u32, 0, 4], vec![1, 1, 1]];
        let d1 = vec![vec![3u32, 3], vec![0, 6]];
        let m1 = node_feature_matrix(&s1, &d1, 6).unwrap();
        // doubling counts and n_S leaves features unchanged
        let s2: Vec<Vec<u32>> = s1.iter().map(|r| r.iter().map(|&x| 2 * x).collect()).collect();
        let d2: Vec<Vec<u32>> = d1.iter().map(|r| r.iter().map(|&x| 2 * x).collect()).collect();
        let m2 = node_feature_matrix(&s2, &d2, 12).unwrap();
        assert_abs_diff_eq!(&m1, &m2, epsilon = 1e-15);
        assert_eq!(m1.dim(), (2, 5));
        assert_abs_diff_eq!(m1[[0, 0]], 2.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m1[[0, 3]], 0.5, epsilon = 1e-15);
        assert!(node_feature_matrix(&s1, &d1[..1].to_vec(), 6).is_err());
    }

    #[test]
    fn untrained_forward_shapes_and_determinism() {
        let t = enumerate_aws(2).unwrap();
        let (l, e, d) = (2, 2, 4);
        let specs = toy_specs(t.size(), l, e, d);
        specs.validate(t.size(), l, e).unwrap();
        let mut ps = ParamStore::new();
        let mut rng = child_rng(1, "id", 0);
        init_identity(&mut ps, &specs, &mut rng);
        let rho_m = one_hot_matrix(&t).unwrap();
        let s = vec![vec![1u32; t.size()]; 3];
        let delta = vec![vec![2u32; (l + 1) * e]; 3];
        let feats = node_feature_matrix(&s, &delta, 4).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let rho = tape.leaf(rho_m.clone());
            let f = tape.leaf(feats.clone());
            let fw = identity_forward(&mut tape, &mut bind, &ps, &specs, rho, f).unwrap();
            (
                tape.value(fw.phi).clone(),
                tape.value(fw.psi).clone(),
            )
        };
        let (phi1, psi1) = run();
        let (phi2, psi2) = run();
        assert_eq!(phi1.dim(), (t.size(), d));
        assert_eq!(psi1.dim(), (3, d));
        assert!(phi1.iter().all(|x| x.is_finite()));
        assert_eq!(phi1, phi2);
        assert_eq!(psi1, psi2);
        // identical feature rows produce identical psi rows
        for c in 0..d {
            assert_eq!(psi1[[0, c]], psi1[[1, c]]);
        }
    }

    #[test]
    fn loss_hand_computation_and_alpha_zero() {
        // 2 AWs x 2 nodes, alpha = 0.5, tiny hand-sized tensors
        let mut tape = Tape::new();
        let rho = tape.leaf(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let rho_hat = tape.leaf(ndarray::array![[0.5, 0.0], [0.0, 0.5]]);
        let f = tape.leaf(ndarray::array![[1.0], [2.0]]);
        let g_hat = tape.leaf(ndarray::array![[0.0], [0.0]]);
        let loss = identity_loss(&mut tape, rho, rho_hat, f, g_hat, 0.5);
        // aw term: 2 * 0.25 = 0.5; rec term: 0.5 * (1 + 4) = 2.5
        assert_abs_diff_eq!(tape.value(loss)[[0, 0]], 3.0, epsilon = 1e-12);
        // alpha = 0 ignores reconstructions
        let loss0 = identity_loss(&mut tape, rho, rho_hat, f, g_hat, 0.0);
        assert_abs_diff_eq!(tape.value(loss0)[[0, 0]], 0.5, epsilon = 1e-12);
        // perfect reconstruction -> 0
        let perfect = identity_loss(&mut tape, rho, rho, f, f, 0.7);
        assert_abs_diff_eq!(tape.value(perfect)[[0, 0]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn autoencoder_overfits_tiny_table() {
        // train only the autoencoder on the l=2 table until reconstructions
        // are close in squared error
        let t = enumerate_aws(2).unwrap();
        let specs = toy_specs(t.size(), 2, 2, 4);
        let mut ps = ParamStore::new();
        let mut rng = child_rng(2, "id", 0);
        init_identity(&mut ps, &specs, &mut rng);
        let rho_m = one_hot_matrix(&t).unwrap();
        let mut opt = Adam::new();
        let mut last = f64::INFINITY;
        for _ in 0..800 {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let rho = tape.leaf(rho_m.clone());
            let (_, rho_hat) = aw_autoencode(&mut tape, &mut bind, &ps, &specs, rho).unwrap();
            let err = tape.sub(rho, rho_hat);
            let loss = tape.sum_squares(err);
            let grads = tape.backward(loss);
            last = tape.value(loss)[[0, 0]];
            opt.step(&mut ps, &bind.grads(&grads), 0.01).unwrap();
        }
        // 5 AWs; < 0.1 squared error per AW
        assert!(last < 0.5, "autoencoder loss {last}");
    }

    #[test]
    fn identity_grad_check_on_toy_setup() {
        let t = enumerate_aws(2).unwrap();
        let (l, e, d) = (2, 2, 4);
        let specs = toy_specs(t.size(), l, e, d);
        let mut ps = ParamStore::new();
        let mut rng = child_rng(3, "id", 0);
        init_identity(&mut ps, &specs, &mut rng);
        let rho_m = one_hot_matrix(&t).unwrap();
        let s = vec![vec![1u32, 0, 2, 0, 1]; 3];
        let delta = vec![vec![1u32; (l + 1) * e]; 3];
        let feats = node_feature_matrix(&s, &delta, 4).unwrap();
        let loss = |ps: &ParamStore| {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let rho = tape.leaf(rho_m.clone());
            let f = tape.leaf(feats.clone());
            let fw = identity_forward(&mut tape, &mut bind, ps, &specs, rho, f).unwrap();
            let g_hat = identity_decode(&mut tape, &mut bind, ps, &specs, fw.psi).unwrap();
            let l = identity_loss(&mut tape, rho, fw.rho_hat, f, g_hat, 0.3);
            let grads = tape.backward(l);
            (tape.value(l)[[0, 0]], bind.grads(&grads))
        };
        let report = crate::nn::gradcheck::grad_check(&ps, &loss, 1e-5);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report
                .per_tensor
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
        );
    }

    #[test]
    fn specs_validation_catches_mismatches() {
        let mut specs = toy_specs(5, 2, 2, 4);
        assert!(specs.validate(5, 2, 2).is_ok());
        specs.heads = 3;
        assert!(specs.validate(5, 2, 2).is_err());
        specs.heads = 2;
        specs.enc.sizes[0] = 7;
        assert!(specs.validate(5, 2, 2).is_err());
    }
}
