//! Layer builders on top of the tape: MLPs with per-layer activation codes,
//! multi-head attention (per-head projections, concatenated heads, no output
//! projection), batch/layer normalization and post-norm transformer encoder
//! layers with 4d feedforward width.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{IrweError, Result};
use crate::nn::params::{Binding, ParamStore, Partition};
use crate::nn::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    None,
}

impl Activation {
    pub fn from_code(c: char) -> Result<Activation> {
        match c {
            't' => Ok(Activation::Tanh),
            's' => Ok(Activation::Sigmoid),
            'r' => Ok(Activation::Relu),
            'n' => Ok(Activation::None),
            other => Err(IrweError::Config(format!(
                "unknown activation code `{other}` (expected t, s, r or n)"
            ))),
        }
    }
}

/// Widths and activation codes of an MLP: `sizes.len() - 1` affine layers,
/// activation i applied after layer i.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub acts: Vec<Activation>,
}

impl MlpSpec {
    /// Parse "100,64,t,32,s"-style strings: widths interleaved with
    /// activation codes; a width directly followed by a width means no
    /// activation between them.
    pub fn parse(s: &str) -> Result<MlpSpec> {
        let mut sizes = Vec::new();
        let mut acts = Vec::new();
        for tok in s.split(',').map(str::trim) {
            if let Ok(w) = tok.parse::<usize>() {
                if !sizes.is_empty() {
                    // activation slot for the previous layer defaults to none
                    while acts.len() + 1 < sizes.len() {
                        acts.push(Activation::None);
                    }
                }
                sizes.push(w);
            } else if tok.len() == 1 {
                let code = Activation::from_code(tok.chars().next().unwrap())?;
                if sizes.len() < 2 || acts.len() + 2 > sizes.len() + 1 {
                    return Err(IrweError::Config(format!(
                        "misplaced activation code in layer spec `{s}`"
                    )));
                }
                if acts.len() + 2 == sizes.len() + 1 {
                    return Err(IrweError::Config(format!(
                        "double activation code in layer spec `{s}`"
                    )));
                }
                acts.push(code);
            } else {
                return Err(IrweError::Config(format!(
                    "bad token `{tok}` in layer spec `{s}`"
                )));
            }
        }
        if sizes.len() < 2 {
            return Err(IrweError::Config(format!(
                "layer spec `{s}` needs at least two widths"
            )));
        }
        while acts.len() + 1 < sizes.len() {
            acts.push(Activation::None);
        }
        Ok(MlpSpec { sizes, acts })
    }

    pub fn new(sizes: Vec<usize>, acts: Vec<Activation>) -> MlpSpec {
        assert_eq!(acts.len() + 1, sizes.len());
        MlpSpec { sizes, acts }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

pub fn init_mlp(
    ps: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    part: Partition,
    rng: &mut ChaCha12Rng,
) {
    for i in 0..spec.sizes.len() - 1 {
        ps.init_weight(
            &format!("{prefix}.w{i}"),
            spec.sizes[i],
            spec.sizes[i + 1],
            part,
            rng,
        );
        ps.init_bias(&format!("{prefix}.b{i}"), spec.sizes[i + 1], part);
    }
}

pub fn mlp_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    x: Var,
) -> Result<Var> {
    if tape.value(x).ncols() != spec.input() {
        return Err(IrweError::ShapeMismatch {
            context: format!("mlp {prefix}"),
            expected: format!("{} columns", spec.input()),
            got: format!("{}", tape.value(x).ncols()),
        });
    }
    let mut h = x;
    for i in 0..spec.sizes.len() - 1 {
        let w = bind.bind(tape, ps, &format!("{prefix}.w{i}"));
        let b = bind.bind(tape, ps, &format!("{prefix}.b{i}"));
        let lin = tape.matmul(h, w);
        h = tape.add_row(lin, b);
        h = match spec.acts[i] {
            Activation::Tanh => tape.tanh(h),
            Activation::Sigmoid => tape.sigmoid(h),
            Activation::Relu => tape.relu(h),
            Activation::None => h,
        };
    }
    Ok(h)
}

/// Per-head projection parameters for attention with `h` heads over width d.
pub fn init_mha(
    ps: &mut ParamStore,
    prefix: &str,
    d: usize,
    h: usize,
    part: Partition,
    rng: &mut ChaCha12Rng,
) {
    assert!(d % h == 0, "width {d} not divisible by {h} heads");
    let dh = d / h;
    for j in 0..h {
        ps.init_weight(&format!("{prefix}.wq{j}"), d, dh, part, rng);
        ps.init_weight(&format!("{prefix}.wk{j}"), d, dh, part, rng);
        ps.init_weight(&format!("{prefix}.wv{j}"), d, dh, part, rng);
    }
}

/// Multi-head attention: per head j, softmax(QWq (KWk)^T / sqrt(d/h)) VWv,
/// heads concatenated. Queries/keys are processed in aligned blocks so a
/// whole batch of independent sequences runs through one call.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    prefix: &str,
    d: usize,
    h: usize,
    q: Var,
    k: Var,
    v: Var,
    q_block: usize,
    kv_block: usize,
) -> Var {
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    for j in 0..h {
        let wq = bind.bind(tape, ps, &format!("{prefix}.wq{j}"));
        let wk = bind.bind(tape, ps, &format!("{prefix}.wk{j}"));
        let wv = bind.bind(tape, ps, &format!("{prefix}.wv{j}"));
        let qj = tape.matmul(q, wq);
        let kj = tape.matmul(k, wk);
        let vj = tape.matmul(v, wv);
        heads.push(tape.block_attention(qj, kj, vj, q_block, kv_block, scale));
    }
    let mut out = heads[0];
    for &hj in &heads[1..] {
        out = tape.concat_cols(out, hj);
    }
    out
}

/// Batch moments captured in a train-mode BN forward, used to update the
/// running statistics after the optimizer step.
#[derive(Debug, Clone)]
pub struct BnBatchMoments {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Exponentially-averaged running statistics for every BN site, keyed by the
/// site name. Not part of the gradient state.
#[derive(Debug, Clone, Default)]
pub struct BnRunning {
    pub stats: BTreeMap<String, (Array1<f64>, Array1<f64>)>,
}

impl BnRunning {
    pub fn register(&mut self, name: &str, dim: usize) {
        self.stats
            .insert(name.to_owned(), (Array1::zeros(dim), Array1::ones(dim)));
    }

    pub fn update(&mut self, m: &BnBatchMoments) {
        let (mean, var) = self
            .stats
            .get_mut(&m.name)
            .unwrap_or_else(|| panic!("unregistered BN site `{}`", m.name));
        *mean = &*mean * (1.0 - BN_MOMENTUM) + &m.mean * BN_MOMENTUM;
        *var = &*var * (1.0 - BN_MOMENTUM) + &m.var * BN_MOMENTUM;
    }
}

pub fn init_bn(
    ps: &mut ParamStore,
    running: &mut BnRunning,
    name: &str,
    dim: usize,
    part: Partition,
) {
    let mut gamma = Array2::zeros((1, dim));
    gamma.fill(1.0);
    ps.insert(&format!("{name}.g"), gamma, part);
    ps.init_bias(&format!("{name}.b"), dim, part);
    running.register(name, dim);
}

/// Train-mode batch normalization: standardize by current-batch moments, then
/// learned scale/shift. The caller feeds the returned moments to
/// `BnRunning::update` after the optimizer step.
pub fn bn_forward_train(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    name: &str,
    x: Var,
) -> Result<(Var, BnBatchMoments)> {
    let xv = tape.value(x);
    if xv.nrows() < 2 {
        return Err(IrweError::Invalid(format!(
            "batch normalization `{name}` needs at least 2 rows in train mode, got {}",
            xv.nrows()
        )));
    }
    let n = xv.nrows() as f64;
    let mean = xv.mean_axis(Axis(0)).unwrap();
    let var = xv.map_axis(Axis(0), |c| {
        let m = c.sum() / n;
        c.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n
    });
    let xn = tape.col_standardize(x, BN_EPS);
    let g = bind.bind(tape, ps, &format!("{name}.g"));
    let b = bind.bind(tape, ps, &format!("{name}.b"));
    let scaled = tape.mul_row(xn, g);
    let y = tape.add_row(scaled, b);
    Ok((
        y,
        BnBatchMoments {
            name: name.to_owned(),
            mean,
            var,
        },
    ))
}

/// Inference-mode batch normalization using running statistics.
pub fn bn_forward_infer(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    running: &BnRunning,
    name: &str,
    x: Var,
) -> Var {
    let (mean, var) = running
        .stats
        .get(name)
        .unwrap_or_else(|| panic!("unregistered BN site `{name}`"));
    let inv_sigma = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let neg_mean = mean.mapv(|m| -m);
    let nm = tape.leaf(neg_mean.insert_axis(Axis(0)));
    let is = tape.leaf(inv_sigma.insert_axis(Axis(0)));
    let centered = tape.add_row(x, nm);
    let xn = tape.mul_row(centered, is);
    let g = bind.bind(tape, ps, &format!("{name}.g"));
    let b = bind.bind(tape, ps, &format!("{name}.b"));
    let scaled = tape.mul_row(xn, g);
    tape.add_row(scaled, b)
}

pub fn init_layer_norm(ps: &mut ParamStore, name: &str, dim: usize, part: Partition) {
    let mut gamma = Array2::zeros((1, dim));
    gamma.fill(1.0);
    ps.insert(&format!("{name}.g"), gamma, part);
    ps.init_bias(&format!("{name}.b"), dim, part);
}

pub fn layer_norm(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    name: &str,
    x: Var,
) -> Var {
    let xn = tape.row_standardize(x, LN_EPS);
    let g = bind.bind(tape, ps, &format!("{name}.g"));
    let b = bind.bind(tape, ps, &format!("{name}.b"));
    let scaled = tape.mul_row(xn, g);
    tape.add_row(scaled, b)
}

/// Post-norm transformer encoder stack, feedforward width 4d, no causal mask.
pub fn init_transformer(
    ps: &mut ParamStore,
    prefix: &str,
    d: usize,
    layers: usize,
    heads: usize,
    part: Partition,
    rng: &mut ChaCha12Rng,
) {
    for i in 0..layers {
        init_mha(ps, &format!("{prefix}.l{i}.att"), d, heads, part, rng);
        init_layer_norm(ps, &format!("{prefix}.l{i}.ln1"), d, part);
        init_layer_norm(ps, &format!("{prefix}.l{i}.ln2"), d, part);
        ps.init_weight(&format!("{prefix}.l{i}.ff.w0"), d, 4 * d, part, rng);
        ps.init_bias(&format!("{prefix}.l{i}.ff.b0"), 4 * d, part);
        ps.init_weight(&format!("{prefix}.l{i}.ff.w1"), 4 * d, d, part, rng);
        ps.init_bias(&format!("{prefix}.l{i}.ff.b1"), d, part);
    }
}

/// Run the encoder over rows grouped in consecutive blocks of `block` tokens
/// (each block is an independent sequence).
#[allow(clippy::too_many_arguments)]
pub fn transformer_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    prefix: &str,
    d: usize,
    layers: usize,
    heads: usize,
    x: Var,
    block: usize,
) -> Var {
    let mut h = x;
    for i in 0..layers {
        let att = mha_forward(
            tape,
            bind,
            ps,
            &format!("{prefix}.l{i}.att"),
            d,
            heads,
            h,
            h,
            h,
            block,
            block,
        );
        let skip1 = tape.add(h, att);
        let n1 = layer_norm(tape, bind, ps, &format!("{prefix}.l{i}.ln1"), skip1);
        let w0 = bind.bind(tape, ps, &format!("{prefix}.l{i}.ff.w0"));
        let b0 = bind.bind(tape, ps, &format!("{prefix}.l{i}.ff.b0"));
        let w1 = bind.bind(tape, ps, &format!("{prefix}.l{i}.ff.w1"));
        let b1 = bind.bind(tape, ps, &format!("{prefix}.l{i}.ff.b1"));
        let f0 = tape.matmul(n1, w0);
        let f0b = tape.add_row(f0, b0);
        let fr = tape.relu(f0b);
        let f1 = tape.matmul(fr, w1);
        let f1b = tape.add_row(f1, b1);
        let skip2 = tape.add(n1, f1b);
        h = layer_norm(tape, bind, ps, &format!("{prefix}.l{i}.ln2"), skip2);
    }
    h
}
