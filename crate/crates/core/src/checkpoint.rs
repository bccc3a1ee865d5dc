//! Checkpoint directories: `config.toml`, `params.bin`, `optimizer.bin`,
//! `rng.bin` and `metrics.csv`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::MultiChartFlow;
use crate::config::{ExperimentConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::{OutputInit, Param, ParamGroup};
use crate::optim::Adam;

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const RNG_FILE: &str = "rng.bin";
pub const METRICS_FILE: &str = "metrics.csv";

const PARAMS_MAGIC: &[u8; 4] = b"MCFP";
const OPTIMIZER_MAGIC: &[u8; 4] = b"MCFO";
const RNG_MAGIC: &[u8; 4] = b"MCFR";
const FORMAT_VERSION: u32 = 1;
/// Upper bound on names and counts accepted by the decoders.
const MAX_NAME_LEN: usize = 4096;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_metric: f64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Malformed { what: self.what, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("length overflows"))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > MAX_NAME_LEN {
            return Err(self.err("string too long"));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.len()?;
        let cols = self.len()?;
        let count = rows.checked_mul(cols).ok_or_else(|| self.err("tensor size overflows"))?;
        let nbytes = count.checked_mul(8).ok_or_else(|| self.err("tensor size overflows"))?;
        let raw = self.take(nbytes)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Array2::from_shape_vec((rows, cols), values).map_err(|e| self.err(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Named tensors with their group tag, preceded by the model config hash.
pub fn encode_params(params: &[Param], config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_string(&mut out, config_hash);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_string(&mut out, &p.name);
        out.push(p.group.tag());
        put_matrix(&mut out, &p.value);
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<(String, Vec<Param>)> {
    let mut r = Reader::new(bytes, "params.bin");
    r.magic(PARAMS_MAGIC)?;
    let hash = r.string()?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.string()?;
        let tag = r.u8()?;
        let group = ParamGroup::from_tag(tag).ok_or_else(|| r.err(format!("unknown group tag {tag}")))?;
        let value = r.matrix()?;
        params.push(Param { name, group, value });
    }
    r.finish()?;
    Ok((hash, params))
}

pub fn encode_optimizer(opt: &Adam) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match opt.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::Adamw => 1,
    });
    out.extend_from_slice(&opt.weight_decay.to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
    for (m, v) in opt.m.iter().zip(&opt.v) {
        match (m, v) {
            (Some(m), Some(v)) => {
                out.push(1);
                put_matrix(&mut out, m);
                put_matrix(&mut out, v);
            }
            _ => out.push(0),
        }
    }
    out
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<Adam> {
    let mut r = Reader::new(bytes, "optimizer.bin");
    r.magic(OPTIMIZER_MAGIC)?;
    let kind = match r.u8()? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Adamw,
        k => return Err(r.err(format!("unknown optimizer kind {k}"))),
    };
    let weight_decay = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut opt = Adam::new(kind, weight_decay, 0);
    opt.step = step;
    for _ in 0..n {
        match r.u8()? {
            0 => {
                opt.m.push(None);
                opt.v.push(None);
            }
            1 => {
                let m = r.matrix()?;
                let v = r.matrix()?;
                if m.dim() != v.dim() {
                    return Err(r.err("moment shapes differ"));
                }
                opt.m.push(Some(m));
                opt.v.push(Some(v));
            }
            f => return Err(r.err(format!("bad presence flag {f}"))),
        }
    }
    r.finish()?;
    Ok(opt)
}

/// Seed, stream and word position of a ChaCha generator.
pub fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RNG_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_rng(bytes: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let mut r = Reader::new(bytes, "rng.bin");
    r.magic(RNG_MAGIC)?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "phase", "train_loss", "val_metric"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Everything needed to resume or evaluate a run.
pub struct Checkpoint<'a> {
    pub config: &'a ExperimentConfig,
    pub model: &'a MultiChartFlow,
    pub optimizer: Option<&'a Adam>,
    pub rng: &'a ChaCha8Rng,
    pub metrics: &'a [MetricRow],
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ckpt.config.save(&dir.join(CONFIG_FILE))?;
    let hash = ckpt.config.model.hash();
    if ckpt.model.config() != &ckpt.config.model {
        return Err(Error::ConfigHashMismatch { stored: ckpt.model.config().hash(), expected: hash });
    }
    write(&dir.join(PARAMS_FILE), &encode_params(ckpt.model.store.params(), &hash))?;
    let opt = ckpt
        .optimizer
        .cloned()
        .unwrap_or_else(|| Adam::new(ckpt.config.train.optimizer, ckpt.config.train.weight_decay, 0));
    write(&dir.join(OPTIMIZER_FILE), &encode_optimizer(&opt))?;
    write(&dir.join(RNG_FILE), &encode_rng(ckpt.rng))?;
    write_metrics(&dir.join(METRICS_FILE), ckpt.metrics)
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub config: ExperimentConfig,
    pub model: MultiChartFlow,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricRow>,
}

/// Rebuilds a model with the layout of `config` and fills it from `params.bin`.
/// The stored hash must match `config.model`, and every tensor must match by
/// name, group and shape.
pub fn load_model(config: &ExperimentConfig, params_bytes: &[u8]) -> Result<MultiChartFlow> {
    let (stored, params) = decode_params(params_bytes)?;
    let expected = config.model.hash();
    if stored != expected {
        return Err(Error::ConfigHashMismatch { stored, expected });
    }
    let dim = config.model.ambient_dim;
    let placeholder = (vec![0.0; dim], vec![1.0; dim]);
    let standardize = config.model.standardize.then_some((&placeholder.0[..], &placeholder.1[..]));
    let mut model = MultiChartFlow::new(&config.model, standardize, OutputInit::Zero, 0)?;
    if params.len() != model.store.len() {
        return Err(Error::Malformed {
            what: "params.bin",
            reason: format!("{} tensors, model has {}", params.len(), model.store.len()),
        });
    }
    for (dst, src) in model.store.params_mut().iter_mut().zip(params) {
        if dst.name != src.name || dst.group != src.group || dst.value.dim() != src.value.dim() {
            return Err(Error::Malformed {
                what: "params.bin",
                reason: format!("tensor `{}` does not match the model layout (expected `{}`)", src.name, dst.name),
            });
        }
        if dst.name.ends_with(".perm") && !crate::flows::linear::is_permutation(&src.value, dst.value.len()) {
            return Err(Error::Malformed {
                what: "params.bin",
                reason: format!("tensor `{}` is not a permutation", src.name),
            });
        }
        dst.value = src.value;
    }
    Ok(model)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let model = load_model(&config, &read(&dir.join(PARAMS_FILE))?)?;
    let optimizer = decode_optimizer(&read(&dir.join(OPTIMIZER_FILE))?)?;
    let rng = decode_rng(&read(&dir.join(RNG_FILE))?)?;
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(LoadedCheckpoint { config, model, optimizer, rng, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn params_round_trip() {
        let params = vec![
            Param { name: "a".into(), group: ParamGroup::ChartFlow, value: array![[1.0, 2.0], [3.0, -0.0]] },
            Param { name: "b".into(), group: ParamGroup::Fixed, value: Array2::zeros((0, 3)) },
        ];
        let bytes = encode_params(&params, "abc");
        let (hash, back) = decode_params(&bytes).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back, params);
        for cut in 0..bytes.len() {
            assert!(decode_params(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn optimizer_round_trip() {
        let mut opt = Adam::new(OptimizerKind::Adamw, 1e-4, 2);
        opt.step = 7;
        opt.m[1] = Some(array![[0.5]]);
        opt.v[1] = Some(array![[0.25]]);
        assert_eq!(decode_optimizer(&encode_optimizer(&opt)).unwrap(), opt);
    }

    #[test]
    fn rng_round_trip_continues_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut back = decode_rng(&encode_rng(&rng)).unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
