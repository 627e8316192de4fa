//! Checkpoints: a text header (dtype, metadata, tensor table, checksum,
//! model manifest) followed by one flat little-endian parameter buffer.
//!
//! ```text
//! condconv-checkpoint v1
//! dtype=f32
//! meta epoch=3
//! tensor name=l00.conv.kernel shape=3x3x3x8 offset=0 len=216
//! ...
//! bytes=1234
//! sha256=<hex of the buffer>
//! condconv-manifest v1
//! ...
//! end
//! data
//! <buffer>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "condconv-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Free-form `key -> value` pairs (training seed, normalization, ...).
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buffer = Vec::with_capacity(self.model.param_count() * T::BYTES);
        let mut table = String::new();
        let mut offset = 0;
        for p in self.model.params() {
            writeln!(
                table,
                "tensor name={} shape={} offset={offset} len={}",
                p.name,
                dims(p.value.shape()),
                p.value.len()
            )
            .unwrap();
            offset += p.value.len();
            for &v in p.value.data() {
                v.put_le(&mut buffer);
            }
        }
        let mut head = format!("{CHECKPOINT_MAGIC}\ndtype={}\n", T::DTYPE);
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', ' ', '\n']) || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} cannot be stored")));
            }
            writeln!(head, "meta {k}={v}").unwrap();
        }
        head.push_str(&table);
        writeln!(head, "bytes={}", buffer.len()).unwrap();
        writeln!(head, "sha256={}", hex::encode(Sha256::digest(&buffer))).unwrap();
        head.push_str(&self.model.spec().to_manifest());
        head.push_str("data\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&buffer);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const MARK: &[u8] = b"\nend\ndata\n";
        let split = bytes
            .windows(MARK.len())
            .position(|w| w == MARK)
            .ok_or_else(|| bad("missing `data` section"))?;
        let head = std::str::from_utf8(&bytes[..split + MARK.len()]).map_err(|_| bad("header is not UTF-8"))?;
        let buffer = &bytes[split + MARK.len()..];

        let mut lines = head.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("not a checkpoint (expected {CHECKPOINT_MAGIC:?})")));
        }
        match lines.next().and_then(|l| l.strip_prefix("dtype=")) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return Err(bad(format!("checkpoint stores {d}, requested {}", T::DTYPE))),
            None => return Err(bad("missing dtype")),
        }
        let mut meta = BTreeMap::new();
        let mut table: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let mut declared = None;
        let mut checksum = None;
        let mut manifest = String::new();
        for line in lines.by_ref() {
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                table.push(parse_entry(rest)?);
            } else if let Some(b) = line.strip_prefix("bytes=") {
                declared = Some(b.parse::<usize>().map_err(|e| bad(format!("bytes: {e}")))?);
            } else if let Some(h) = line.strip_prefix("sha256=") {
                checksum = Some(h.to_string());
            } else {
                manifest.push_str(line);
                manifest.push('\n');
                break;
            }
        }
        for line in lines {
            if line == "data" {
                break;
            }
            manifest.push_str(line);
            manifest.push('\n');
        }

        let declared = declared.ok_or_else(|| bad("missing byte count"))?;
        if declared != buffer.len() {
            return Err(bad(format!("header declares {declared} data bytes, file holds {}", buffer.len())));
        }
        let expected = checksum.ok_or_else(|| bad("missing checksum"))?;
        if hex::encode(Sha256::digest(buffer)) != expected {
            return Err(bad("checksum mismatch: parameter buffer is corrupted"));
        }
        let spec = ModelSpec::from_manifest(&manifest)?;

        let mut params = Vec::with_capacity(table.len());
        let mut next = 0;
        for (name, shape, offset, len) in table {
            if offset != next || shape.iter().product::<usize>() != len {
                return Err(bad(format!("tensor {name}: inconsistent offset/len/shape")));
            }
            next += len;
            let end = next * T::BYTES;
            if end > buffer.len() {
                return Err(bad(format!("tensor {name} runs past the data buffer")));
            }
            let data = buffer[offset * T::BYTES..end]
                .chunks_exact(T::BYTES)
                .map(T::get_le)
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if next * T::BYTES != buffer.len() {
            return Err(bad(format!(
                "tensor table covers {} bytes, buffer holds {}",
                next * T::BYTES,
                buffer.len()
            )));
        }
        let model = Model::from_params(spec, params)?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn parse_entry(rest: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let mut name = None;
    let mut shape = None;
    let mut offset = None;
    let mut len = None;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("bad tensor field {field:?}")))?;
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("tensor {k}: {e}")));
        match k {
            "name" => name = Some(v.to_string()),
            "shape" => shape = Some(v.split('x').map(num).collect::<Result<Vec<_>>>()?),
            "offset" => offset = Some(num(v)?),
            "len" => len = Some(num(v)?),
            other => return Err(bad(format!("unknown tensor field {other:?}"))),
        }
    }
    match (name, shape, offset, len) {
        (Some(n), Some(s), Some(o), Some(l)) => Ok((n, s, o, l)),
        _ => Err(bad(format!("incomplete tensor entry {rest:?}"))),
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        meta: meta.clone(),
    }
    .save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}
