//! Alternating joint optimization: one-time sampling + statistics, then m
//! iterations of identity steps followed by position steps, with per-iteration
//! checkpoints and a loss history.

use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;

use crate::error::{IrweError, Result};
use crate::graph::Graph;
use crate::identity::{
    identity_decode, identity_forward, identity_loss, init_identity, node_feature_matrix,
    one_hot_matrix, IdentitySpecs,
};
use crate::model::{Checkpoint, StatsCache, TrainConfig};
use crate::nn::adam::Adam;
use crate::nn::layers::BnRunning;
use crate::nn::params::{Binding, ParamStore, Partition};
use crate::nn::tape::{Tape, Var};
use crate::position::{
    build_contrastive_stats, init_position, position_forward, position_loss, ContrastiveStats,
    PositionSpecs, WalkTokenLayout,
};
use crate::rng::{child_rng, child_seed};
use crate::walk::{
    aw_statistics, degree_features, enumerate_aws, reduce_table, remap_counts, rw_statistic,
    sample_all_walks, AnonymousWalk, AwTable, ProjectionMatrix,
};

/// Constant tensors and layouts shared by every forward pass of a run.
pub struct ForwardInputs {
    /// One-hot encodings of the reduced AW table, eta x (l+1)^2.
    pub rho: Array2<f64>,
    /// Normalized node statistics [s_tilde || delta] / n_S, N x F.
    pub features: Array2<f64>,
    /// Global position encodings, N x d.
    pub pi_g: Array2<f64>,
    pub layout: WalkTokenLayout,
}

impl ForwardInputs {
    /// Assemble the forward inputs from a statistics cache.
    pub fn from_cache(cache: &StatsCache, n_s: usize) -> Result<ForwardInputs> {
        let table = AwTable::from_walks(
            cache.walk_len,
            cache
                .reduced_walks
                .iter()
                .map(|codes| AnonymousWalk {
                    codes: codes.clone(),
                })
                .collect(),
        );
        let rho = one_hot_matrix(&table)?;
        let features = node_feature_matrix(&cache.s_tilde, &cache.delta, n_s)?;
        let walks_usize: Vec<Vec<Vec<usize>>> = cache
            .inference_walks
            .iter()
            .map(|ws| {
                ws.iter()
                    .map(|w| w.iter().map(|&x| x as usize).collect())
                    .collect()
            })
            .collect();
        let views: Vec<Vec<&[usize]>> = walks_usize
            .iter()
            .map(|ws| ws.iter().map(|w| w.as_slice()).collect())
            .collect();
        let layout = WalkTokenLayout::build(&views, cache.walk_len)?;
        Ok(ForwardInputs {
            rho,
            features,
            pi_g: cache.pi_g.clone(),
            layout,
        })
    }
}

/// Output of one full forward pass over all nodes.
pub struct FullForward {
    pub psi: Var,
    pub rho_hat: Var,
    pub gamma: Var,
    pub gamma_bar: Var,
    pub rho_leaf: Var,
    pub features_leaf: Var,
    pub moments: Vec<crate::nn::layers::BnBatchMoments>,
}

/// Identity + position forward over the whole node set. `train` selects
/// batch-moment vs running-statistic normalization.
pub fn full_forward(
    tape: &mut Tape,
    bind: &mut Binding,
    ps: &ParamStore,
    running: &BnRunning,
    id_specs: &IdentitySpecs,
    pos_specs: &PositionSpecs,
    inputs: &ForwardInputs,
    train: bool,
) -> Result<FullForward> {
    let rho_leaf = tape.leaf(inputs.rho.clone());
    let features_leaf = tape.leaf(inputs.features.clone());
    let pi_g_leaf = tape.leaf(inputs.pi_g.clone());
    let id = identity_forward(tape, bind, ps, id_specs, rho_leaf, features_leaf)?;
    let (gamma, gamma_bar, moments) = position_forward(
        tape,
        bind,
        ps,
        running,
        pos_specs,
        id.psi,
        pi_g_leaf,
        &inputs.layout,
        train,
    )?;
    Ok(FullForward {
        psi: id.psi,
        rho_hat: id.rho_hat,
        gamma,
        gamma_bar,
        rho_leaf,
        features_leaf,
        moments,
    })
}

/// A trained model plus everything the inference drivers need.
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub running: BnRunning,
    pub cache: StatsCache,
    /// (identity loss, position loss) per outer iteration.
    pub loss_history: Vec<(f64, f64)>,
}

impl TrainedModel {
    pub fn identity_specs(&self) -> Result<IdentitySpecs> {
        self.config.identity_specs(self.cache.reduced_walks.len())
    }

    pub fn position_specs(&self) -> Result<PositionSpecs> {
        self.config.position_specs()
    }

    pub fn checkpoint(&self, iteration: usize) -> Checkpoint {
        Checkpoint {
            l: self.config.l,
            d: self.config.d,
            e: self.config.e,
            seed: self.config.seed,
            iteration,
            params: self.params.clone(),
            running: self.running.clone(),
        }
    }
}

/// One-time sampling phase: walks, AW statistics over the reduced table,
/// degree features, and projected visit counts for every node.
pub fn compute_training_stats(g: &Graph, cfg: &TrainConfig) -> Result<StatsCache> {
    let isolated = g.isolated_nodes();
    if let Some(&v) = isolated.first() {
        return Err(IrweError::IsolatedNode(g.node_id(v).to_owned()));
    }
    let n = g.num_nodes();
    let full_table = enumerate_aws(cfg.l)?;
    let walk_sets = sample_all_walks(g, cfg.l, cfg.n_s, cfg.n_i, cfg.seed)?;
    let full_counts: Vec<Vec<u32>> = walk_sets
        .iter()
        .map(|ws| aw_statistics(&ws.walks, &full_table))
        .collect::<Result<_>>()?;
    let (reduced, remap) = reduce_table(&full_counts, &full_table)?;
    let s_tilde: Vec<Vec<u32>> = full_counts
        .iter()
        .map(|c| remap_counts(c, &remap, reduced.size()))
        .collect();
    let (deg_min, deg_max) = g.degree_range();
    let delta: Vec<Vec<u32>> = walk_sets
        .iter()
        .map(|ws| degree_features(&ws.walks, g, cfg.l, cfg.e, deg_min, deg_max, None))
        .collect();
    let theta = ProjectionMatrix::generate(n, cfg.d, child_seed(cfg.seed, "theta", 0));
    let mut pi_g = Array2::zeros((n, cfg.d));
    for (v, ws) in walk_sets.iter().enumerate() {
        let r = rw_statistic(&ws.walks, n, None);
        let p = crate::walk::project_position(&r, &theta)?;
        pi_g.row_mut(v).assign(&p);
    }
    let inference_walks: Vec<Vec<Vec<u32>>> = walk_sets
        .iter()
        .map(|ws| {
            ws.inference_subset
                .iter()
                .map(|&i| ws.walks[i].nodes.iter().map(|&x| x as u32).collect())
                .collect()
        })
        .collect();
    Ok(StatsCache {
        node_ids: g.node_ids().to_vec(),
        walk_len: cfg.l,
        reduced_walks: reduced.walks.iter().map(|w| w.codes.clone()).collect(),
        deg_min,
        deg_max,
        s_tilde,
        delta,
        pi_g,
        inference_walks,
    })
}

/// The stored projection matrix, kept as a frozen tensor for inductive reuse.
pub const THETA_PARAM: &str = "theta";

fn init_params(
    cfg: &TrainConfig,
    id_specs: &IdentitySpecs,
    pos_specs: &PositionSpecs,
    theta: Array2<f64>,
) -> (ParamStore, BnRunning) {
    let mut ps = ParamStore::new();
    let mut running = BnRunning::default();
    let mut rng_id = child_rng(cfg.seed, "init-identity", 0);
    init_identity(&mut ps, id_specs, &mut rng_id);
    let mut rng_pos = child_rng(cfg.seed, "init-position", 0);
    init_position(&mut ps, &mut running, pos_specs, &mut rng_pos);
    ps.insert(THETA_PARAM, theta, Partition::Frozen);
    (ps, running)
}

fn retain_last_checkpoints(dir: &Path, iteration: usize, keep: usize) {
    if iteration >= keep {
        let old = dir.join(format!("checkpoint-{:05}.bin", iteration - keep));
        if old.exists() {
            let _ = std::fs::remove_file(&old);
        }
    }
}

/// Run the full optimization. When `run_dir` is given, per-iteration
/// checkpoints (retaining the last 3) and a loss CSV are written there.
pub fn train(g: &Graph, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainedModel> {
    cfg.validate()?;
    let cache = compute_training_stats(g, cfg)?;
    info!(
        "sampled statistics: {} nodes, reduced table size {}",
        cache.num_nodes(),
        cache.reduced_walks.len()
    );
    let id_specs = cfg.identity_specs(cache.reduced_walks.len())?;
    let pos_specs = cfg.position_specs()?;
    let theta =
        ProjectionMatrix::generate(g.num_nodes(), cfg.d, child_seed(cfg.seed, "theta", 0)).theta;
    let (mut params, mut running) = init_params(cfg, &id_specs, &pos_specs, theta);
    let theta_initial = params.get(THETA_PARAM).clone();

    let inputs = ForwardInputs::from_cache(&cache, cfg.n_s)?;
    let contrastive = build_contrastive_stats(g, cfg.q, cfg.tau)?;

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| IrweError::io(dir, e))?;
        cache.save(&dir.join("stats.bin"))?;
    }

    let mut opt_psi = Adam::new();
    let mut opt_gamma = Adam::new();
    let mut loss_history = Vec::with_capacity(cfg.m);
    let mut csv = String::from("iteration,loss_identity,loss_position\n");

    for iter in 0..cfg.m {
        let mut last_psi_loss = f64::NAN;
        for _ in 0..cfg.m_psi {
            last_psi_loss = identity_step(
                &mut params,
                &id_specs,
                &inputs,
                cfg.alpha,
                cfg.lambda_psi,
                &mut opt_psi,
            )?;
        }
        let mut last_gamma_loss = f64::NAN;
        for _ in 0..cfg.m_gamma {
            last_gamma_loss = position_step(
                &mut params,
                &mut running,
                &id_specs,
                &pos_specs,
                &inputs,
                &contrastive,
                cfg.lambda_gamma,
                &mut opt_gamma,
            )?;
        }
        if !last_psi_loss.is_finite() || !last_gamma_loss.is_finite() {
            return Err(IrweError::NonFinite(format!(
                "loss at iteration {iter} (identity {last_psi_loss}, position {last_gamma_loss})"
            )));
        }
        assert_eq!(
            params.get(THETA_PARAM),
            &theta_initial,
            "frozen projection matrix changed during training"
        );
        loss_history.push((last_psi_loss, last_gamma_loss));
        csv.push_str(&format!("{iter},{last_psi_loss:.17e},{last_gamma_loss:.17e}\n"));
        if let Some(dir) = run_dir {
            let ck = Checkpoint {
                l: cfg.l,
                d: cfg.d,
                e: cfg.e,
                seed: cfg.seed,
                iteration: iter,
                params: params.clone(),
                running: running.clone(),
            };
            ck.save(&dir.join(format!("checkpoint-{iter:05}.bin")))?;
            retain_last_checkpoints(dir, iter, 3);
        }
        if iter % 20 == 0 {
            info!("iteration {iter}: L_psi {last_psi_loss:.4}, L_gamma {last_gamma_loss:.4}");
        }
    }
    if cfg.m == 0 {
        warn!("m = 0: returning initialized model with statistics only");
    }
    if let Some(dir) = run_dir {
        std::fs::write(dir.join("loss.csv"), &csv)
            .map_err(|e| IrweError::io(dir.join("loss.csv"), e))?;
    }
    Ok(TrainedModel {
        config: cfg.clone(),
        params,
        running,
        cache,
        loss_history,
    })
}

/// One identity update: forward, L_psi, backward, Adam on the touched
/// (identity-partition) tensors.
fn identity_step(
    params: &mut ParamStore,
    id_specs: &IdentitySpecs,
    inputs: &ForwardInputs,
    alpha: f64,
    lr: f64,
    opt: &mut Adam,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bind = Binding::new();
    let rho = tape.leaf(inputs.rho.clone());
    let features = tape.leaf(inputs.features.clone());
    let id = identity_forward(&mut tape, &mut bind, params, id_specs, rho, features)?;
    let g_hat = identity_decode(&mut tape, &mut bind, params, id_specs, id.psi)?;
    let loss = identity_loss(&mut tape, rho, id.rho_hat, features, g_hat, alpha);
    let grads = tape.backward(loss);
    let named = bind.grads(&grads);
    debug_assert!(named
        .iter()
        .all(|(n, _)| params.partition(n) == Partition::Identity));
    opt.step(params, &named, lr)?;
    Ok(tape.value(loss)[[0, 0]])
}

/// One position update: full forward (train-mode BN), L_gamma, backward,
/// Adam over every touched tensor (identity and position partitions), then
/// the BN running-statistic update.
#[allow(clippy::too_many_arguments)]
fn position_step(
    params: &mut ParamStore,
    running: &mut BnRunning,
    id_specs: &IdentitySpecs,
    pos_specs: &PositionSpecs,
    inputs: &ForwardInputs,
    contrastive: &ContrastiveStats,
    lr: f64,
    opt: &mut Adam,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bind = Binding::new();
    let fwd = full_forward(
        &mut tape, &mut bind, params, running, id_specs, pos_specs, inputs, true,
    )?;
    let c = tape.leaf(contrastive.c.clone());
    let loss = position_loss(&mut tape, fwd.gamma, fwd.gamma_bar, c, contrastive.tau);
    let grads = tape.backward(loss);
    let named = bind.grads(&grads);
    opt.step(params, &named, lr)?;
    for m in &fwd.moments {
        running.update(m);
    }
    Ok(tape.value(loss)[[0, 0]])
}

/// Write the loss history of a model in the CSV layout used by `train`.
pub fn loss_csv(model: &TrainedModel) -> String {
    let mut csv = String::from("iteration,loss_identity,loss_position\n");
    for (i, (lp, lg)) in model.loss_history.iter().enumerate() {
        csv.push_str(&format!("{i},{lp:.17e},{lg:.17e}\n"));
    }
    csv
}

/// Find the newest checkpoint file in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).map_err(|e| IrweError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| IrweError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("checkpoint-")
            .and_then(|s| s.strip_suffix(".bin"))
        {
            if let Ok(iter) = num.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| iter > *b) {
                    best = Some((iter, entry.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| IrweError::Format {
        path: dir.to_path_buf(),
        reason: "no checkpoint files found".into(),
    })
}
