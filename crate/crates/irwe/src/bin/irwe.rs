//! Command-line driver: train a model, run the three inference modes, and
//! evaluate embeddings with the downstream protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use irwe::error::{IrweError, Result};
use irwe::eval::{
    degree_similarity_graph, encode_labels, gd_parameters, kmeans, logistic_eval, make_splits,
    modularity, ncut, write_report, MetricRow, SplitScheme, GD_TOP_K,
};
use irwe::graph::{Graph, Labels};
use irwe::infer::{infer_inductive_graph, infer_inductive_nodes, infer_transductive, EmbeddingSet};
use irwe::model::TrainConfig;
use irwe::rng::child_seed;
use irwe::run::{
    input_record, load_model, save_config_snapshot, write_json_atomic, RunLock, RunManifest,
    MANIFEST_FILE, TOOL_VERSION,
};
use irwe::train::train;

#[derive(Parser)]
#[command(
    name = "irwe",
    version,
    about = "Inductive identity and position node embeddings from random walks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an edge list and write a run directory.
    Train {
        /// Edge list file: one `a b` pair per line.
        #[arg(long)]
        graph: PathBuf,
        /// TOML hyperparameter file.
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints, caches, and the manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce embeddings from a trained run directory.
    Infer {
        /// Run directory produced by `train`.
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: InferMode,
        /// Graph file: the extended graph (inductive-nodes) or the new graph
        /// (inductive-graph). Not used in transductive mode.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// File listing new node ids, one per line (inductive-nodes only).
        #[arg(long)]
        new_nodes: Option<PathBuf>,
        /// Output directory for the embedding files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an embedding file with the downstream protocol.
    Eval {
        /// Embedding text file (`id v1 v2 ...` per line).
        #[arg(long)]
        embeddings: PathBuf,
        /// Edge list; required for cluster-identity and community tasks.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Label file (`id class[,class...]` per line); required for classify.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// `transductive:<fraction>` or `inductive-80-10-10`.
        #[arg(long, default_value = "transductive:0.8")]
        splits_scheme: String,
        /// Number of clusters for the clustering tasks; defaults to the class
        /// count when labels are given.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Dataset name recorded in the report.
        #[arg(long, default_value = "dataset")]
        dataset: String,
        /// Output TSV report path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum InferMode {
    Transductive,
    InductiveNodes,
    InductiveGraph,
}

#[derive(Copy, Clone, ValueEnum)]
enum EvalTask {
    /// Logistic-regression classification, micro-F1 per repeat.
    Classify,
    /// KMeans on embeddings, NCut against the degree-similarity graph.
    ClusterIdentity,
    /// KMeans on embeddings, modularity against the input graph.
    Community,
}

fn init_threads() {
    if let Ok(s) = std::env::var("IRWE_THREADS") {
        if let Ok(n) = s.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn cmd_train(graph: &Path, config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let g = Graph::load_edge_list(graph)?;
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let _lock = RunLock::acquire(out_dir)?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "train".into(),
        seed: cfg.seed,
        inputs: vec![input_record(graph)?, input_record(config)?],
        artifacts: vec![
            "config.toml".into(),
            "stats.bin".into(),
            "loss.csv".into(),
            "checkpoint-*.bin".into(),
        ],
        metadata: BTreeMap::from([
            ("num_nodes".into(), g.num_nodes().to_string()),
            ("num_edges".into(), g.num_edges().to_string()),
        ]),
    };
    write_json_atomic(&out_dir.join(MANIFEST_FILE), &manifest)?;
    save_config_snapshot(out_dir, &cfg)?;
    info!(
        "training on {} nodes / {} edges for {} iterations",
        g.num_nodes(),
        g.num_edges(),
        cfg.m
    );
    train(&g, &cfg, Some(out_dir))?;
    println!("run directory: {}", out_dir.display());
    Ok(())
}

fn read_node_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| IrweError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn cmd_infer(
    model_dir: &Path,
    mode: InferMode,
    graph: Option<&Path>,
    new_nodes: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = load_model(model_dir)?;
    let mut metadata = BTreeMap::new();
    let mut inputs = vec![];
    let (embeddings, mode_name) = match mode {
        InferMode::Transductive => {
            if graph.is_some() || new_nodes.is_some() {
                return Err(IrweError::Invalid(
                    "transductive mode takes neither --graph nor --new-nodes".into(),
                ));
            }
            (infer_transductive(&model)?, "transductive")
        }
        InferMode::InductiveNodes => {
            let graph = graph.ok_or_else(|| {
                IrweError::Invalid("inductive-nodes mode requires --graph".into())
            })?;
            let new_nodes = new_nodes.ok_or_else(|| {
                IrweError::Invalid("inductive-nodes mode requires --new-nodes".into())
            })?;
            let g_new = Graph::load_edge_list(graph)?;
            let ids = read_node_list(new_nodes)?;
            inputs.push(input_record(graph)?);
            inputs.push(input_record(new_nodes)?);
            metadata.insert("new_nodes".into(), ids.len().to_string());
            (infer_inductive_nodes(&model, &g_new, &ids)?, "inductive-nodes")
        }
        InferMode::InductiveGraph => {
            if new_nodes.is_some() {
                return Err(IrweError::Invalid(
                    "--new-nodes is not valid with inductive-graph mode".into(),
                ));
            }
            let graph = graph.ok_or_else(|| {
                IrweError::Invalid("inductive-graph mode requires --graph".into())
            })?;
            let g2 = Graph::load_edge_list(graph)?;
            inputs.push(input_record(graph)?);
            metadata.insert(
                "projection_seed".into(),
                child_seed(model.config.seed, "theta-across", 0).to_string(),
            );
            (infer_inductive_graph(&model, &g2)?, "inductive-graph")
        }
    };
    let _lock = RunLock::acquire(out)?;
    embeddings.write_all(out)?;
    metadata.insert("mode".into(), mode_name.into());
    metadata.insert("rows".into(), embeddings.node_ids.len().to_string());
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "infer".into(),
        seed: model.config.seed,
        inputs,
        artifacts: vec!["psi.txt".into(), "gamma.txt".into(), "gamma_bar.txt".into()],
        metadata,
    };
    write_json_atomic(&out.join(MANIFEST_FILE), &manifest)?;
    println!(
        "{} rows written to {}",
        embeddings.node_ids.len(),
        out.display()
    );
    Ok(())
}

fn parse_scheme(s: &str) -> Result<(SplitScheme, String)> {
    if s == "inductive-80-10-10" {
        return Ok((SplitScheme::Inductive801010, "80-10-10".into()));
    }
    if let Some(frac) = s.strip_prefix("transductive:") {
        let f: f64 = frac
            .parse()
            .map_err(|_| IrweError::Invalid(format!("bad train fraction `{frac}`")))?;
        return Ok((SplitScheme::TransductiveFraction(f), frac.to_string()));
    }
    Err(IrweError::Invalid(format!(
        "unknown splits scheme `{s}` (use transductive:<fraction> or inductive-80-10-10)"
    )))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    embeddings: &Path,
    graph: Option<&Path>,
    labels: Option<&Path>,
    task: EvalTask,
    splits_scheme: &str,
    clusters: Option<usize>,
    repeats: usize,
    seed: u64,
    dataset: &str,
    out: &Path,
) -> Result<()> {
    let (ids, x) = EmbeddingSet::read_matrix(embeddings)?;
    let encoded = match labels {
        Some(p) => Some(encode_labels(&ids, &Labels::load(p)?.by_id, 8)?),
        None => None,
    };
    let aligned_graph = |p: &Path| -> Result<Graph> {
        let g = Graph::load_edge_list(p)?;
        if g.num_nodes() != ids.len() {
            return Err(IrweError::Invalid(format!(
                "graph has {} nodes but embeddings have {} rows",
                g.num_nodes(),
                ids.len()
            )));
        }
        for (i, id) in ids.iter().enumerate() {
            if g.index_of(id) != Some(i) {
                return Err(IrweError::Invalid(format!(
                    "embedding row {i} ({id}) does not match the graph node order"
                )));
            }
        }
        Ok(g)
    };
    let k_clusters = || -> Result<usize> {
        match (clusters, &encoded) {
            (Some(k), _) => Ok(k),
            (None, Some(e)) => Ok(e.classes.len()),
            (None, None) => Err(IrweError::Invalid(
                "clustering tasks need --clusters or --labels to set K".into(),
            )),
        }
    };
    let mut rows = Vec::new();
    let mut metadata = BTreeMap::new();
    match task {
        EvalTask::Classify => {
            let enc = encoded
                .ok_or_else(|| IrweError::Invalid("classify requires --labels".into()))?;
            let (scheme, frac) = parse_scheme(splits_scheme)?;
            let splits = make_splits(ids.len(), scheme, repeats, seed)?;
            for (rep, split) in splits.iter().enumerate() {
                let f1 = logistic_eval(&x, &enc, split, 1.0)?;
                rows.push(MetricRow {
                    dataset: dataset.into(),
                    task: "classify".into(),
                    split_fraction: frac.clone(),
                    repeat: Some(rep),
                    metric: "micro_f1".into(),
                    value: f1,
                });
            }
        }
        EvalTask::ClusterIdentity => {
            let graph = graph.ok_or_else(|| {
                IrweError::Invalid("cluster-identity requires --graph".into())
            })?;
            let g = aligned_graph(graph)?;
            let (hops, buckets) = gd_parameters(g.num_nodes());
            metadata.insert("gd_hops".into(), hops.to_string());
            metadata.insert("gd_buckets".into(), buckets.to_string());
            metadata.insert("gd_top_k".into(), GD_TOP_K.to_string());
            metadata.insert("gd_similarity".into(), "cosine".into());
            let gd = degree_similarity_graph(&g, hops, buckets, GD_TOP_K)?;
            for rep in 0..repeats {
                let (assignment, _) =
                    kmeans(x.view(), k_clusters()?, child_seed(seed, "eval-kmeans", rep as u64), 5)?;
                rows.push(MetricRow {
                    dataset: dataset.into(),
                    task: "cluster-identity".into(),
                    split_fraction: "-".into(),
                    repeat: Some(rep),
                    metric: "ncut".into(),
                    value: ncut(&assignment, &gd)?,
                });
            }
        }
        EvalTask::Community => {
            let graph = graph
                .ok_or_else(|| IrweError::Invalid("community requires --graph".into()))?;
            let g = aligned_graph(graph)?;
            for rep in 0..repeats {
                let (assignment, _) =
                    kmeans(x.view(), k_clusters()?, child_seed(seed, "eval-kmeans", rep as u64), 5)?;
                rows.push(MetricRow {
                    dataset: dataset.into(),
                    task: "community".into(),
                    split_fraction: "-".into(),
                    repeat: Some(rep),
                    metric: "modularity".into(),
                    value: modularity(&assignment, &g)?,
                });
            }
        }
    }
    write_report(out, &rows)?;
    let mut inputs = vec![input_record(embeddings)?];
    if let Some(p) = graph {
        inputs.push(input_record(p)?);
    }
    if let Some(p) = labels {
        inputs.push(input_record(p)?);
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "eval".into(),
        seed,
        inputs,
        artifacts: vec![out.display().to_string()],
        metadata,
    };
    write_json_atomic(&out.with_extension("manifest.json"), &manifest)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    init_threads();
    match cli.command {
        Command::Train {
            graph,
            config,
            out_dir,
            seed,
        } => cmd_train(&graph, &config, &out_dir, seed),
        Command::Infer {
            model_dir,
            mode,
            graph,
            new_nodes,
            out,
        } => cmd_infer(
            &model_dir,
            mode,
            graph.as_deref(),
            new_nodes.as_deref(),
            &out,
        ),
        Command::Eval {
            embeddings,
            graph,
            labels,
            task,
            splits_scheme,
            clusters,
            repeats,
            seed,
            dataset,
            out,
        } => cmd_eval(
            &embeddings,
            graph.as_deref(),
            labels.as_deref(),
            task,
            &splits_scheme,
            clusters,
            repeats,
            seed,
            &dataset,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
