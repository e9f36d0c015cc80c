//! Run configuration, layer-spec resolution, and binary persistence for the
//! statistics cache and model checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{IrweError, Result};
use crate::identity::IdentitySpecs;
use crate::nn::layers::{BnRunning, MlpSpec};
use crate::nn::params::{ParamStore, Partition};
use crate::position::PositionSpecs;

/// Layer structure strings; `IN`/`OUT` resolve to the context-dependent
/// input/output widths when the model is assembled.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerStrings {
    pub aw_encoder: String,
    pub aw_decoder: String,
    pub reducer: String,
    pub identity_decoder: String,
    pub reweight: String,
}

fn default_q() -> usize {
    5
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Walk length; walks have l+1 nodes.
    pub l: usize,
    /// Walks sampled per node.
    pub n_s: usize,
    /// Walks per node fed to the transformer.
    pub n_i: usize,
    /// Embedding width.
    pub d: usize,
    /// Degree buckets.
    pub e: usize,
    pub h_psi: usize,
    pub h_rout: usize,
    pub tran_layers: usize,
    pub tran_heads: usize,
    pub alpha: f64,
    pub tau: f64,
    #[serde(default = "default_q")]
    pub q: usize,
    /// Outer iterations.
    pub m: usize,
    pub m_psi: usize,
    pub m_gamma: usize,
    pub lambda_psi: f64,
    pub lambda_gamma: f64,
    pub seed: u64,
    pub layers: LayerStrings,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| IrweError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let s = std::fs::read_to_string(path).map_err(|e| IrweError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l", self.l),
            ("n_s", self.n_s),
            ("n_i", self.n_i),
            ("d", self.d),
            ("e", self.e),
            ("h_psi", self.h_psi),
            ("h_rout", self.h_rout),
            ("tran_heads", self.tran_heads),
            ("q", self.q),
            ("m_psi", self.m_psi),
            ("m_gamma", self.m_gamma),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(IrweError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.n_i > self.n_s {
            return Err(IrweError::Config(format!(
                "n_i ({}) cannot exceed n_s ({})",
                self.n_i, self.n_s
            )));
        }
        for (name, h) in [
            ("h_psi", self.h_psi),
            ("h_rout", self.h_rout),
            ("tran_heads", self.tran_heads),
        ] {
            if self.d % h != 0 {
                return Err(IrweError::Config(format!(
                    "d ({}) must be divisible by `{name}` ({h})",
                    self.d
                )));
            }
        }
        if self.tau <= 0.0 || self.alpha < 0.0 {
            return Err(IrweError::Config(
                "need tau > 0 and alpha >= 0".into(),
            ));
        }
        if !(self.lambda_psi > 0.0 && self.lambda_gamma > 0.0) {
            return Err(IrweError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn resolve_spec(s: &str, input: usize, output: usize) -> Result<MlpSpec> {
        let resolved = s
            .replace("IN", &input.to_string())
            .replace("OUT", &output.to_string());
        MlpSpec::parse(&resolved)
    }

    /// Identity-half layer shapes; `eta` is the reduced-table size.
    pub fn identity_specs(&self, eta: usize) -> Result<IdentitySpecs> {
        let onehot = (self.l + 1) * (self.l + 1);
        let feat = eta + (self.l + 1) * self.e;
        let specs = IdentitySpecs {
            enc: Self::resolve_spec(&self.layers.aw_encoder, onehot, self.d)?,
            dec: Self::resolve_spec(&self.layers.aw_decoder, self.d, onehot)?,
            reducer: Self::resolve_spec(&self.layers.reducer, feat, self.d)?,
            decoder: Self::resolve_spec(&self.layers.identity_decoder, self.d, feat)?,
            heads: self.h_psi,
            d: self.d,
        };
        specs.validate(eta, self.l, self.e)?;
        Ok(specs)
    }

    pub fn position_specs(&self) -> Result<PositionSpecs> {
        let specs = PositionSpecs {
            reweight: Self::resolve_spec(&self.layers.reweight, self.d, self.d)?,
            tran_layers: self.tran_layers,
            tran_heads: self.tran_heads,
            rout_heads: self.h_rout,
            d: self.d,
            l: self.l,
        };
        specs.validate()?;
        Ok(specs)
    }
}

/// Everything derived from the one-time sampling phase, frozen for the rest
/// of training and reused verbatim by the inference drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsCache {
    pub node_ids: Vec<String>,
    pub walk_len: usize,
    /// Reduced AW table entries in canonical order.
    pub reduced_walks: Vec<Vec<u8>>,
    pub deg_min: usize,
    pub deg_max: usize,
    /// Per-node reduced AW counts.
    pub s_tilde: Vec<Vec<u32>>,
    /// Per-node hop-wise degree-bucket counts.
    pub delta: Vec<Vec<u32>>,
    /// Per-node projected visit counts, N x d.
    pub pi_g: Array2<f64>,
    /// Per-node inference walks (node indices), n_i walks of l+1 nodes.
    pub inference_walks: Vec<Vec<Vec<u32>>>,
}

const STATS_MAGIC: &[u8; 8] = b"IRWESTAT";
const CKPT_MAGIC: &[u8; 8] = b"IRWECKPT";
const FORMAT_VERSION: u32 = 1;

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &x in m.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> std::io::Result<Array2<f64>> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_u32_vec<W: Write>(w: &mut W, v: &[u32]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        w.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_u32_vec<R: Read>(r: &mut R) -> std::io::Result<Vec<u32>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(r.read_u32::<LittleEndian>()?);
    }
    Ok(v)
}

fn format_err(path: &Path, what: &str) -> IrweError {
    IrweError::Format {
        path: path.to_path_buf(),
        reason: what.to_owned(),
    }
}

impl StatsCache {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| IrweError::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e: std::io::Error| IrweError::io(path, e);
        (|| -> std::io::Result<()> {
            w.write_all(STATS_MAGIC)?;
            w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
            w.write_u64::<LittleEndian>(self.node_ids.len() as u64)?;
            for id in &self.node_ids {
                write_string(&mut w, id)?;
            }
            w.write_u64::<LittleEndian>(self.walk_len as u64)?;
            w.write_u64::<LittleEndian>(self.reduced_walks.len() as u64)?;
            for aw in &self.reduced_walks {
                w.write_u32::<LittleEndian>(aw.len() as u32)?;
                w.write_all(aw)?;
            }
            w.write_u64::<LittleEndian>(self.deg_min as u64)?;
            w.write_u64::<LittleEndian>(self.deg_max as u64)?;
            for s in &self.s_tilde {
                write_u32_vec(&mut w, s)?;
            }
            for d in &self.delta {
                write_u32_vec(&mut w, d)?;
            }
            write_matrix(&mut w, &self.pi_g)?;
            for walks in &self.inference_walks {
                w.write_u64::<LittleEndian>(walks.len() as u64)?;
                for walk in walks {
                    write_u32_vec(&mut w, walk)?;
                }
            }
            w.flush()
        })()
        .map_err(io)
    }

    pub fn load(path: &Path) -> Result<StatsCache> {
        let f = File::open(path).map_err(|e| IrweError::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| IrweError::io(path, e))?;
        if &magic != STATS_MAGIC {
            return Err(format_err(path, "not a statistics cache file"));
        }
        let parse = |e: std::io::Error| IrweError::io(path, e);
        let version = r.read_u32::<LittleEndian>().map_err(parse)?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, "unsupported format version"));
        }
        (|| -> std::io::Result<StatsCache> {
            let n = r.read_u64::<LittleEndian>()? as usize;
            let mut node_ids = Vec::with_capacity(n);
            for _ in 0..n {
                node_ids.push(read_string(&mut r)?);
            }
            let walk_len = r.read_u64::<LittleEndian>()? as usize;
            let eta = r.read_u64::<LittleEndian>()? as usize;
            let mut reduced_walks = Vec::with_capacity(eta);
            for _ in 0..eta {
                let len = r.read_u32::<LittleEndian>()? as usize;
                let mut codes = vec![0u8; len];
                r.read_exact(&mut codes)?;
                reduced_walks.push(codes);
            }
            let deg_min = r.read_u64::<LittleEndian>()? as usize;
            let deg_max = r.read_u64::<LittleEndian>()? as usize;
            let mut s_tilde = Vec::with_capacity(n);
            for _ in 0..n {
                s_tilde.push(read_u32_vec(&mut r)?);
            }
            let mut delta = Vec::with_capacity(n);
            for _ in 0..n {
                delta.push(read_u32_vec(&mut r)?);
            }
            let pi_g = read_matrix(&mut r)?;
            let mut inference_walks = Vec::with_capacity(n);
            for _ in 0..n {
                let k = r.read_u64::<LittleEndian>()? as usize;
                let mut walks = Vec::with_capacity(k);
                for _ in 0..k {
                    walks.push(read_u32_vec(&mut r)?);
                }
                inference_walks.push(walks);
            }
            Ok(StatsCache {
                node_ids,
                walk_len,
                reduced_walks,
                deg_min,
                deg_max,
                s_tilde,
                delta,
                pi_g,
                inference_walks,
            })
        })()
        .map_err(parse)
    }
}

/// A persisted model snapshot: every parameter tensor with its partition,
/// batch-norm running statistics, and the header identifying the run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub l: usize,
    pub d: usize,
    pub e: usize,
    pub seed: u64,
    pub iteration: usize,
    pub params: ParamStore,
    pub running: BnRunning,
}

fn partition_code(p: Partition) -> u8 {
    match p {
        Partition::Identity => 0,
        Partition::Position => 1,
        Partition::Frozen => 2,
    }
}

fn partition_from_code(c: u8) -> Option<Partition> {
    match c {
        0 => Some(Partition::Identity),
        1 => Some(Partition::Position),
        2 => Some(Partition::Frozen),
        _ => None,
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| IrweError::io(path, e))?;
        let mut w = BufWriter::new(f);
        (|| -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
            w.write_u64::<LittleEndian>(self.l as u64)?;
            w.write_u64::<LittleEndian>(self.d as u64)?;
            w.write_u64::<LittleEndian>(self.e as u64)?;
            w.write_u64::<LittleEndian>(self.seed)?;
            w.write_u64::<LittleEndian>(self.iteration as u64)?;
            // optimizer moments not persisted
            w.write_u8(0)?;
            w.write_u64::<LittleEndian>(self.params.len() as u64)?;
            for (name, tensor, part) in self.params.iter() {
                write_string(&mut w, name)?;
                w.write_u8(partition_code(part))?;
                write_matrix(&mut w, tensor)?;
            }
            w.write_u64::<LittleEndian>(self.running.stats.len() as u64)?;
            for (name, (mean, var)) in &self.running.stats {
                write_string(&mut w, name)?;
                write_matrix(&mut w, &mean.clone().insert_axis(ndarray::Axis(0)))?;
                write_matrix(&mut w, &var.clone().insert_axis(ndarray::Axis(0)))?;
            }
            w.flush()
        })()
        .map_err(|e| IrweError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = File::open(path).map_err(|e| IrweError::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| IrweError::io(path, e))?;
        if &magic != CKPT_MAGIC {
            return Err(format_err(path, "not a checkpoint file"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| IrweError::io(path, e))?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, "unsupported format version"));
        }
        let out = (|| -> std::io::Result<Option<Checkpoint>> {
            let l = r.read_u64::<LittleEndian>()? as usize;
            let d = r.read_u64::<LittleEndian>()? as usize;
            let e = r.read_u64::<LittleEndian>()? as usize;
            let seed = r.read_u64::<LittleEndian>()?;
            let iteration = r.read_u64::<LittleEndian>()? as usize;
            let _moments_flag = r.read_u8()?;
            let count = r.read_u64::<LittleEndian>()? as usize;
            let mut params = ParamStore::new();
            for _ in 0..count {
                let name = read_string(&mut r)?;
                let code = r.read_u8()?;
                let tensor = read_matrix(&mut r)?;
                let part = match partition_from_code(code) {
                    Some(p) => p,
                    None => return Ok(None),
                };
                params.insert(&name, tensor, part);
            }
            let bn_count = r.read_u64::<LittleEndian>()? as usize;
            let mut running = BnRunning::default();
            for _ in 0..bn_count {
                let name = read_string(&mut r)?;
                let mean = read_matrix(&mut r)?;
                let var = read_matrix(&mut r)?;
                running.stats.insert(
                    name,
                    (
                        Array1::from_iter(mean.row(0).iter().copied()),
                        Array1::from_iter(var.row(0).iter().copied()),
                    ),
                );
            }
            Ok(Some(Checkpoint {
                l,
                d,
                e,
                seed,
                iteration,
                params,
                running,
            }))
        })()
        .map_err(|e| IrweError::io(path, e))?;
        out.ok_or_else(|| format_err(path, "unknown partition tag"))
    }
}
