//! Binary model container: magic, version, embedded config JSON, then a named
//! tensor table with little-endian payloads. Save -> load round trips
//! bit-exactly regardless of host endianness.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DMSM";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u8 = 8;

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<TensorRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize the container to bytes.
pub fn encode(config_json: &str, tensors: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, config_json.len() as u64);
    out.extend_from_slice(config_json.as_bytes());
    put_u64(&mut out, tensors.len() as u64);
    for t in tensors {
        if t.name.len() as u64 > MAX_NAME_LEN {
            return Err(Error::checkpoint(format!("tensor name too long: {}", t.name.len())));
        }
        if t.dims.len() > MAX_RANK as usize {
            return Err(Error::checkpoint(format!(
                "tensor {} has rank {} > {MAX_RANK}",
                t.name,
                t.dims.len()
            )));
        }
        let numel: usize = t.dims.iter().product();
        if t.payload.len() != numel * t.dtype.size_bytes() {
            return Err(Error::checkpoint(format!(
                "tensor {}: payload {} bytes does not match dims {:?}",
                t.name,
                t.payload.len(),
                t.dims
            )));
        }
        put_u64(&mut out, t.name.len() as u64);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.code());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            put_u64(&mut out, d as u64);
        }
        out.extend_from_slice(&t.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the container from bytes.
pub fn decode(bytes: &[u8]) -> Result<CheckpointFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let json_len = r.u64()? as usize;
    let config_json = String::from_utf8(r.take(json_len)?.to_vec())
        .map_err(|e| Error::checkpoint(format!("config snapshot is not UTF-8: {e}")))?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u64()?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::checkpoint(format!("tensor name length {name_len} too large")));
        }
        let name = String::from_utf8(r.take(name_len as usize)?.to_vec())
            .map_err(|e| Error::checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let dtype = Dtype::from_code(r.u8()?)
            .ok_or_else(|| Error::checkpoint(format!("tensor {name}: unknown dtype code")))?;
        let rank = r.u8()?;
        if rank > MAX_RANK {
            return Err(Error::checkpoint(format!("tensor {name}: rank {rank} > {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * dtype.size_bytes())?.to_vec();
        tensors.push(TensorRecord { name, dtype, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointFile { version, config_json, tensors })
}

fn tensor_to_record<T: Scalar>(name: &str, t: &Tensor<T>) -> TensorRecord {
    let payload = t
        .data_ref()
        .iter()
        .flat_map(|v| v.to_le_bytes_vec())
        .collect();
    TensorRecord {
        name: name.to_string(),
        dtype: T::DTYPE,
        dims: t.shape().to_vec(),
        payload,
    }
}

/// Copy record payloads into the model's parameters. Every record must match
/// a parameter by name, dtype, and shape, and every parameter must be covered.
pub fn apply_records<T: Scalar>(model: &Model<T>, records: &[TensorRecord]) -> Result<()> {
    let params: HashMap<String, Tensor<T>> = model.collect_params().into_iter().collect();
    let mut covered: HashSet<&str> = HashSet::new();
    for rec in records {
        let param = params.get(&rec.name).ok_or_else(|| {
            Error::checkpoint(format!("unknown tensor name {:?}", rec.name))
        })?;
        if rec.dtype != T::DTYPE {
            return Err(Error::checkpoint(format!(
                "tensor {:?}: dtype code {} does not match model dtype code {}",
                rec.name,
                rec.dtype.code(),
                T::DTYPE.code()
            )));
        }
        if rec.dims != param.shape() {
            return Err(Error::checkpoint(format!(
                "tensor {:?}: stored shape {:?} does not match model shape {:?}",
                rec.name,
                rec.dims,
                param.shape()
            )));
        }
        let step = T::DTYPE.size_bytes();
        let mut data = param.data_mut();
        for (i, chunk) in rec.payload.chunks_exact(step).enumerate() {
            data[i] = T::from_le_slice(chunk);
        }
        covered.insert(rec.name.as_str());
    }
    if covered.len() != params.len() {
        let missing: Vec<&String> = params
            .keys()
            .filter(|k| !covered.contains(k.as_str()))
            .collect();
        return Err(Error::checkpoint(format!("missing tensors: {missing:?}")));
    }
    Ok(())
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let records: Vec<TensorRecord> = model
        .collect_params()
        .iter()
        .map(|(n, t)| tensor_to_record(n, t))
        .collect();
    let bytes = encode(&model.cfg.to_json(), &records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Rebuild a model from a container: the embedded config drives construction,
/// then every parameter is overwritten with the stored payload.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = decode(&std::fs::read(path)?)?;
    let cfg = Config::from_json(&file.config_json)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::init(&cfg, &mut rng)?;
    apply_records(&model, &file.tensors)?;
    Ok(model)
}

/// List config fields whose values differ, by JSON key.
pub fn config_diff_keys(a: &Config, b: &Config) -> Result<Vec<String>> {
    let va: serde_json::Value = serde_json::from_str(&a.to_json())?;
    let vb: serde_json::Value = serde_json::from_str(&b.to_json())?;
    let (oa, ob) = match (va, vb) {
        (serde_json::Value::Object(oa), serde_json::Value::Object(ob)) => (oa, ob),
        _ => return Err(Error::config("config did not serialize to an object")),
    };
    let mut keys: Vec<String> = oa
        .iter()
        .filter(|(k, v)| ob.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    keys.sort();
    Ok(keys)
}

pub fn ensure_config_match(expected: &Config, found: &Config) -> Result<()> {
    let diff = config_diff_keys(expected, found)?;
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::checkpoint(format!(
            "config mismatch on keys: {}",
            diff.join(", ")
        )))
    }
}
