//! Checkpoint directories.
//!
//! ```text
//! manifest.txt   key = value: format, version, dtype, config hash, counters, bank cursors
//! config.txt     the training config in its key = value form
//! index.txt      one line per tensor: name dtype shape offset len
//! tensors.bin    little-endian values, concatenated
//! ```
//!
//! Shapes are written as `64x192`; offsets are in bytes, lengths in elements.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Precision, TrainConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::moco::{EncoderPair, MemoryBank};
use crate::skeleton::Modality;
use crate::tensor::{Real, Tensor};
use crate::trainer::{ModalityState, TrainState};

pub const CHECKPOINT_FORMAT: &str = "cmd-ckpt";
const CHECKPOINT_VERSION: u32 = 1;

struct Writer<F: Real> {
    index: String,
    bytes: Vec<u8>,
    _f: std::marker::PhantomData<F>,
}

impl<F: Real> Writer<F> {
    fn put(&mut self, name: &str, shape: &[usize], data: &[F]) {
        let shape_s: Vec<String> = shape.iter().map(usize::to_string).collect();
        let shape_s = if shape_s.is_empty() { "scalar".to_string() } else { shape_s.join("x") };
        self.index.push_str(&format!(
            "{name} {} {shape_s} {} {}\n",
            F::DTYPE,
            self.bytes.len(),
            data.len()
        ));
        data.iter().for_each(|v| v.write_le(&mut self.bytes));
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save_checkpoint<F: Real>(state: &TrainState<F>, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer::<F> {
        index: String::new(),
        bytes: Vec::new(),
        _f: std::marker::PhantomData,
    };
    let names = state.config.encoder_config(state.joints).param_names();
    let mut manifest = format!(
        "format = {CHECKPOINT_FORMAT}\nversion = {CHECKPOINT_VERSION}\ndtype = {}\nconfig_hash = {}\n\
         epoch = {}\nstep = {}\njoints = {}\nrng = derived:{}\n",
        F::DTYPE,
        state.config.hash(),
        state.epoch,
        state.step,
        state.joints,
        state.config.seed
    );
    for s in &state.modalities {
        let m = s.modality;
        for (role, enc) in [("query", &s.pair.query), ("key", &s.pair.key)] {
            for (name, p) in names.iter().zip(enc.params()) {
                w.put(&format!("{m}.{role}.{name}"), p.shape(), p.data());
            }
            w.put(&format!("{m}.{role}.bn.running_mean"), &[enc.running_mean().len()], enc.running_mean());
            w.put(&format!("{m}.{role}.bn.running_var"), &[enc.running_var().len()], enc.running_var());
        }
        for (name, v) in names.iter().zip(&s.velocity) {
            w.put(&format!("{m}.velocity.{name}"), v.shape(), v.data());
        }
        w.put(
            &format!("{m}.bank.entries"),
            &[s.bank.capacity(), s.bank.dim()],
            s.bank.raw_entries(),
        );
        manifest.push_str(&format!(
            "bank.{m}.cursor = {}\nbank.{m}.filled = {}\n",
            s.bank.cursor(),
            s.bank.filled()
        ));
    }
    let digest = hex::encode(Sha256::digest(&w.bytes));
    manifest.push_str(&format!("tensors_sha256 = {digest}\n"));
    write_file(&dir.join("tensors.bin"), &w.bytes)?;
    write_file(&dir.join("index.txt"), w.index.as_bytes())?;
    write_file(&dir.join("config.txt"), state.config.to_text().as_bytes())?;
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(digest)
}

/// Parsed manifest and raw tensors of a checkpoint directory.
pub struct CheckpointFile {
    pub manifest: BTreeMap<String, String>,
    pub config: TrainConfig,
    pub dtype: Precision,
    /// SHA-256 of `tensors.bin`; identifies the checkpoint.
    pub hash: String,
    entries: BTreeMap<String, (Vec<usize>, usize, usize)>,
    bytes: Vec<u8>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl CheckpointFile {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut manifest = BTreeMap::new();
        for (i, line) in read_text(&dir.join("manifest.txt"))?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("manifest: expected 'key = value', got '{line}'"),
            })?;
            manifest.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            manifest
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("manifest lacks '{k}'")))
        };
        if get("format")? != CHECKPOINT_FORMAT || get("version")? != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                get("format")?,
                get("version")?
            )));
        }
        let dtype: Precision = get("dtype")?.parse()?;
        let config = TrainConfig::from_text(&read_text(&dir.join("config.txt"))?)?;
        if config.hash() != get("config_hash")? {
            return Err(Error::Schema("config.txt does not match the manifest hash".into()));
        }
        let bin = dir.join("tensors.bin");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        if hash != get("tensors_sha256")? {
            return Err(Error::Schema("tensors.bin does not match the manifest digest".into()));
        }
        let width = match dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut entries = BTreeMap::new();
        for (i, line) in read_text(&dir.join("index.txt"))?.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("index: {msg}"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            if f.len() != 5 {
                return Err(parse_err("expected 'name dtype shape offset len'"));
            }
            if f[1] != dtype.name() {
                return Err(Error::Schema(format!("tensor {} has dtype {}", f[0], f[1])));
            }
            let shape: Vec<usize> = if f[2] == "scalar" {
                Vec::new()
            } else {
                f[2].split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err("bad shape"))?
            };
            let offset: usize = f[3].parse().map_err(|_| parse_err("bad offset"))?;
            let len: usize = f[4].parse().map_err(|_| parse_err("bad length"))?;
            if shape.iter().product::<usize>() != len || offset + len * width > bytes.len() {
                return Err(Error::Schema(format!("tensor {} is out of bounds", f[0])));
            }
            entries.insert(f[0].to_string(), (shape, offset, len));
        }
        Ok(Self {
            manifest,
            config,
            dtype,
            hash,
            entries,
            bytes,
        })
    }

    fn count(&self, key: &str) -> Result<usize> {
        self.manifest
            .get(key)
            .ok_or_else(|| Error::Schema(format!("manifest lacks '{key}'")))?
            .parse()
            .map_err(|_| Error::Schema(format!("manifest '{key}' is not a count")))
    }

    pub fn joints(&self) -> Result<usize> {
        self.count("joints")
    }

    pub fn epoch(&self) -> Result<usize> {
        self.count("epoch")
    }

    fn values<F: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<F>)> {
        if F::DTYPE != self.dtype.name() {
            return Err(Error::Schema(format!(
                "checkpoint stores {}, requested {}",
                self.dtype,
                F::DTYPE
            )));
        }
        let (shape, offset, len) = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor '{name}'")))?;
        let data = self.bytes[*offset..offset + len * F::BYTES]
            .chunks_exact(F::BYTES)
            .map(F::read_le)
            .collect();
        Ok((shape.clone(), data))
    }

    fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        let (shape, data) = self.values(name)?;
        Tensor::new(shape, data)
    }

    fn encoder<F: Real>(&self, m: Modality, role: &str) -> Result<EncoderParams<F>> {
        let cfg = self.config.encoder_config(self.joints()?);
        let params = cfg
            .param_names()
            .iter()
            .map(|n| self.tensor(&format!("{m}.{role}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let (_, mean) = self.values(&format!("{m}.{role}.bn.running_mean"))?;
        let (_, var) = self.values(&format!("{m}.{role}.bn.running_var"))?;
        EncoderParams::from_parts(&cfg, params, mean, var)
    }

    /// The query encoder of `m`, converted to f64.
    pub fn query_encoder(&self, m: Modality) -> Result<EncoderParams<f64>> {
        if !self.config.modalities.contains(&m) {
            return Err(Error::Usage(format!("modality {m} is not in this checkpoint")));
        }
        match self.dtype {
            Precision::F32 => Ok(self.encoder::<f32>(m, "query")?.cast()),
            Precision::F64 => self.encoder::<f64>(m, "query"),
        }
    }

    /// Full training state for resuming.
    pub fn state<F: Real>(&self) -> Result<TrainState<F>> {
        let cfg = &self.config;
        let names = cfg.encoder_config(self.joints()?).param_names();
        let modalities = cfg
            .modalities
            .iter()
            .map(|&m| {
                let query = self.encoder(m, "query")?;
                let key = self.encoder(m, "key")?;
                let velocity = names
                    .iter()
                    .map(|n| self.tensor(&format!("{m}.velocity.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                let (_, entries) = self.values(&format!("{m}.bank.entries"))?;
                let mut bank = MemoryBank::from_parts(
                    cfg.bank_size,
                    cfg.embedding_dim,
                    entries,
                    self.count(&format!("bank.{m}.cursor"))?,
                    self.count(&format!("bank.{m}.filled"))?,
                )?;
                if cfg.debug_provenance {
                    bank = bank.with_provenance();
                }
                Ok(ModalityState {
                    modality: m,
                    pair: EncoderPair {
                        query,
                        key,
                        alpha: cfg.alpha,
                    },
                    bank,
                    velocity,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainState {
            config: cfg.clone(),
            joints: self.joints()?,
            epoch: self.epoch()?,
            step: self.count("step")? as u64,
            modalities,
        })
    }
}

/// Reads a full training state of element type `F`.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<TrainState<F>> {
    CheckpointFile::open(dir)?.state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Precision;

    fn state<F: Real>() -> TrainState<F> {
        let cfg = TrainConfig {
            k: 2,
            bank_size: 8,
            batch_size: 2,
            hidden_dim: 3,
            embedding_dim: 2,
            layers: 1,
            precision: if F::DTYPE == "f32" { Precision::F32 } else { Precision::F64 },
            ..TrainConfig::desk()
        };
        let mut st = TrainState::<F>::init(&cfg, 2).unwrap();
        let z = Tensor::matrix(2, 2, vec![F::one(), F::zero(), F::zero(), F::one()]);
        st.modalities[1].bank.enqueue(&z, None).unwrap();
        st.modalities[0].bank.enqueue(&z, None).unwrap();
        st.modalities[0].velocity[3].data_mut()[1] = F::from_f64(0.125);
        st.epoch = 3;
        st.step = 17;
        st
    }

    #[test]
    fn round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let s64 = state::<f64>();
        let h = save_checkpoint(&s64, dir.path()).unwrap();
        let file = CheckpointFile::open(dir.path()).unwrap();
        assert_eq!(file.hash, h);
        assert_eq!(file.state::<f64>().unwrap(), s64);
        assert!(file.state::<f32>().is_err());

        let s32 = state::<f32>();
        save_checkpoint(&s32, dir.path()).unwrap();
        assert_eq!(load_checkpoint::<f32>(dir.path()).unwrap(), s32);
        let q = CheckpointFile::open(dir.path()).unwrap().query_encoder(Modality::Joint).unwrap();
        assert_eq!(q, s32.modalities[0].pair.query.cast::<f64>());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state::<f64>(), dir.path()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(CheckpointFile::open(dir.path()), Err(Error::Schema(_))));
        assert!(matches!(
            CheckpointFile::open(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unknown_modality_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state::<f64>(), dir.path()).unwrap();
        let f = CheckpointFile::open(dir.path()).unwrap();
        assert!(matches!(f.query_encoder(Modality::Bone), Err(Error::Usage(_))));
    }
}
