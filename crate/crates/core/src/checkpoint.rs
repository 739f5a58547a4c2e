//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCNT"                      magic
//! u32                         format version
//! u64 + bytes                 canonical config text (architecture, training
//!                             settings, iteration, best-window summary)
//! per parameter array:        u64 count + f64 values, hidden layers first,
//!                             each layer's kernels then its biases
//! u64                         Adam step counter
//! per array, as above:        Adam first moments, then second moments
//! u64 + bytes                 generator state (JSON)
//! ```

use std::path::Path;

use rand_pcg::Pcg64;

use crate::config::{fmt_f64, KvMap};
use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic, Reader};
use crate::model::{ArchConfig, Layer, Network, NetworkParams};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"PCNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BestWindow {
    /// 0-based window index.
    pub index: u64,
    pub end_iteration: u64,
    pub mean_nll: f64,
    pub mean_total_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub params: NetworkParams,
    pub adam: AdamState,
    pub iteration: u64,
    pub rng: Pcg64,
    pub best_window: Option<BestWindow>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.arch.clone(), self.params.clone())
    }

    /// Fails with [`Error::ConfigMismatch`] unless the stored architecture is
    /// exactly `expected`.
    pub fn ensure_arch(&self, expected: &ArchConfig) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint architecture {:?} differs from expected {:?}",
                self.arch, expected
            )));
        }
        Ok(())
    }

    pub fn config_text(&self) -> String {
        let mut kv = KvMap::default();
        self.arch.to_kv(&mut kv);
        self.train.to_kv(&mut kv);
        kv.insert("iteration", self.iteration);
        if let Some(b) = &self.best_window {
            kv.insert("best_window_index", b.index);
            kv.insert("best_window_end_iteration", b.end_iteration);
            kv.insert("best_window_mean_nll", fmt_f64(b.mean_nll));
            kv.insert("best_window_mean_total_loss", fmt_f64(b.mean_total_loss));
        }
        kv.to_canonical_text()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        write_arrays(&mut out, &self.params);
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        write_arrays(&mut out, &self.adam.m);
        write_arrays(&mut out, &self.adam.v);
        let rng = serde_json::to_vec(&self.rng).expect("generator state serializes");
        out.extend_from_slice(&(rng.len() as u64).to_le_bytes());
        out.extend_from_slice(&rng);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("magic", format!("expected \"PCNT\", found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported checkpoint version {version} (expected {VERSION})"),
            ));
        }
        let text_len = r.u64("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config")?)
            .map_err(|e| Error::format("config", e.to_string()))?;
        let mut kv = KvMap::parse(text).map_err(|e| Error::format("config", e.to_string()))?;
        let as_format = |e: Error| Error::format("config", e.to_string());
        let arch = ArchConfig::from_kv(&mut kv).map_err(as_format)?;
        let train = TrainConfig::from_kv(&mut kv).map_err(as_format)?;
        let iteration = kv
            .take::<u64>("iteration")
            .map_err(as_format)?
            .ok_or_else(|| Error::format("config", "missing `iteration`"))?;
        let best_window = match kv.take::<u64>("best_window_index").map_err(as_format)? {
            None => None,
            Some(index) => {
                let mut field = |k: &str| -> Result<String> {
                    kv.take::<String>(k)
                        .map_err(as_format)?
                        .ok_or_else(|| Error::format("config", format!("missing `{k}`")))
                };
                let parse = |k: &str, v: String| {
                    v.parse::<f64>()
                        .map_err(|e| Error::format("config", format!("`{k}`: {e}")))
                };
                let end_iteration = field("best_window_end_iteration")?
                    .parse::<u64>()
                    .map_err(|e| Error::format("config", e.to_string()))?;
                let mean_nll = parse("best_window_mean_nll", field("best_window_mean_nll")?)?;
                let mean_total_loss = parse(
                    "best_window_mean_total_loss",
                    field("best_window_mean_total_loss")?,
                )?;
                Some(BestWindow {
                    index,
                    end_iteration,
                    mean_nll,
                    mean_total_loss,
                })
            }
        };
        kv.finish().map_err(as_format)?;

        let params = read_arrays(&mut r, &arch, "params")?;
        let t = r.u64("adam.t")?;
        let m = read_arrays(&mut r, &arch, "adam.m")?;
        let v = read_arrays(&mut r, &arch, "adam.v")?;
        let rng_len = r.u64("rng length")? as usize;
        let rng: Pcg64 = serde_json::from_slice(r.take(rng_len, "rng")?)
            .map_err(|e| Error::format("rng", e.to_string()))?;
        if r.remaining() != 0 {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected bytes after generator state", r.remaining()),
            ));
        }
        Ok(Checkpoint {
            arch,
            train,
            params,
            adam: AdamState { m, v, t },
            iteration,
            rng,
            best_window,
        })
    }
}

fn write_arrays(out: &mut Vec<u8>, params: &NetworkParams) {
    for s in params.flat_slices() {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_arrays(r: &mut Reader<'_>, arch: &ArchConfig, block: &str) -> Result<NetworkParams> {
    let mut layers = Vec::new();
    for (n, shape) in arch.kernel_shapes().into_iter().enumerate() {
        let kernel_field = format!("{block}[{n}].kernels");
        let kernels = read_array(r, shape.iter().product(), &kernel_field)?;
        let bias_field = format!("{block}[{n}].bias");
        let bias = read_array(r, shape[0], &bias_field)?;
        layers.push(Layer {
            kernels: Tensor::new(&shape, kernels)?,
            bias,
        });
    }
    NetworkParams::from_layers(arch, layers)
}

fn read_array(r: &mut Reader<'_>, expected: usize, field: &str) -> Result<Vec<f64>> {
    let len = r.u64(field)? as usize;
    if len != expected {
        return Err(Error::format(
            field,
            format!("holds {len} values, architecture needs {expected}"),
        ));
    }
    r.f64s(len, field)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.at_path(path))
}
