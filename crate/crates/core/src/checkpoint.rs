//! Binary tensor checkpoints.
//!
//! ```text
//! "CRFT" | version u32 | kind u32 | n_meta u32 | (len u32, key, len u32, value)*
//!        | n_tensors u32 | (len u32, name, rows u32, cols u32, f32 × rows·cols)*
//!        | crc32 u32
//! ```
//!
//! All integers and floats are little-endian, tensors row-major. The CRC
//! covers every byte before it. Values are widened to `f64` on load and
//! narrowed (round to nearest even) on save.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapters::{AdapterKind, Gate, LayerRouting, LoraAdapter, LoraFactors};
use crate::backbone::{Layer, LayeredBackbone};
use crate::denoiser::{AuxParams, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{BranchEncoder, ExpertEncoder};
use crate::subspace::SubspaceBases;
use crate::tensorcore::Matrix;

pub const MAGIC: &[u8; 4] = b"CRFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Backbone,
    Adapter,
    Encoder,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Backbone => 0,
            CheckpointKind::Adapter => 1,
            CheckpointKind::Encoder => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(CheckpointKind::Backbone),
            1 => Ok(CheckpointKind::Adapter),
            2 => Ok(CheckpointKind::Encoder),
            other => Err(Error::CorruptCheckpoint(format!("unknown kind tag {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Backbone => "backbone",
            CheckpointKind::Adapter => "adapter",
            CheckpointKind::Encoder => "encoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: BTreeMap<String, String>,
    /// In file order.
    pub tensors: Vec<(String, Matrix)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Self { kind, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing metadata {key}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.kind.code());
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, m.rows() as u32);
            put_u32(&mut out, m.cols() as u32);
            for v in m.values() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::CorruptCheckpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_code(r.u32()?)?;
        let n_meta = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(count * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let m = Matrix::from_vec(rows, cols, values)
                .map_err(|_| Error::CorruptCheckpoint(format!("tensor {name} holds non-finite values")))?;
            tensors.push((name, m));
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CorruptCheckpoint(format!("expected a {} checkpoint, found {}", kind.as_str(), self.kind.as_str())));
        }
        Ok(())
    }
}

/// Round-trips a value through the on-disk 32-bit representation.
pub fn narrow(m: &Matrix) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), m.values().iter().map(|v| *v as f32 as f64).collect()).expect("finite")
}

/// SHA-256 over layer names and their 32-bit weights; identifies the host
/// an adapter was trained on.
pub fn host_hash(backbone: &LayeredBackbone) -> String {
    let mut h = Sha256::new();
    for layer in backbone.layers() {
        h.update((layer.name.len() as u32).to_le_bytes());
        h.update(layer.name.as_bytes());
        h.update((layer.weight.rows() as u32).to_le_bytes());
        h.update((layer.weight.cols() as u32).to_le_bytes());
        for v in layer.weight.values() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("finite row")
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta(key)?.parse().map_err(|_| Error::CorruptCheckpoint(format!("metadata {key} is malformed")))
}

fn json_meta<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_str(ck.meta(key)?).map_err(|_| Error::CorruptCheckpoint(format!("metadata {key} is malformed")))
}

/// Full network: backbone layers under their own names plus `bias.<layer>`,
/// `cond_proj`, `time_proj` and `skip`. Config and the exact betas go in metadata.
pub fn denoiser_to_checkpoint(net: &Denoiser, role: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Backbone)
        .with_meta("role", role)
        .with_meta("denoiser", serde_json::to_string(net.config()).expect("config serializes"))
        .with_meta("betas", serde_json::to_string(net.schedule().betas()).expect("betas serialize"))
        .with_meta("trained_steps", net.trained_steps().to_string())
        .with_meta("host_hash", host_hash(net.backbone()));
    for layer in net.backbone().layers() {
        ck.push(layer.name.clone(), layer.weight.clone());
    }
    for (layer, b) in net.backbone().layers().iter().zip(&net.aux().biases) {
        ck.push(format!("bias.{}", layer.name), row(b));
    }
    ck.push("cond_proj", net.aux().cond_proj.clone());
    ck.push("time_proj", net.aux().time_proj.clone());
    ck.push("skip", row(&net.aux().skip));
    ck
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<Denoiser> {
    ck.expect_kind(CheckpointKind::Backbone)?;
    let config: DenoiserConfig = json_meta(ck, "denoiser")?;
    let betas: Vec<f64> = json_meta(ck, "betas")?;
    let schedule = NoiseSchedule::from_betas(betas).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let trained_steps: u64 = parse_meta(ck, "trained_steps")?;
    let mut layers = Vec::with_capacity(config.layers);
    let mut biases = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let name = DenoiserConfig::layer_name(i);
        layers.push(Layer { name: name.clone(), weight: ck.tensor(&name)?.clone() });
        biases.push(ck.tensor(&format!("bias.{name}"))?.values().to_vec());
    }
    let aux = AuxParams {
        biases,
        cond_proj: ck.tensor("cond_proj")?.clone(),
        time_proj: ck.tensor("time_proj")?.clone(),
        skip: ck.tensor("skip")?.values().to_vec(),
    };
    let backbone = LayeredBackbone::new(layers).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Denoiser::from_parts(config, schedule, backbone, aux, trained_steps).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

/// Sidecar with the trained bases and merged projection of every layer.
pub fn bases_to_checkpoint(names: &[String], bases: &SubspaceBases, merged: &[Matrix]) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Backbone).with_meta("role", "bases");
    for (i, name) in names.iter().enumerate() {
        ck.push(format!("content.{name}"), bases.content[i].clone());
        ck.push(format!("style.{name}"), bases.style[i].clone());
        ck.push(format!("merged.{name}"), merged[i].clone());
    }
    ck
}

pub fn bases_from_checkpoint(ck: &Checkpoint, names: &[String]) -> Result<(SubspaceBases, Vec<Matrix>)> {
    ck.expect_kind(CheckpointKind::Backbone)?;
    let mut bases = SubspaceBases { content: Vec::new(), style: Vec::new() };
    let mut merged = Vec::new();
    for name in names {
        bases.content.push(ck.tensor(&format!("content.{name}"))?.clone());
        bases.style.push(ck.tensor(&format!("style.{name}"))?.clone());
        merged.push(ck.tensor(&format!("merged.{name}"))?.clone());
    }
    Ok((bases, merged))
}

fn join(set: &std::collections::BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Vec<String> {
    s.split(',').filter(|p| !p.is_empty()).map(str::to_string).collect()
}

/// Adapter factors as `<layer>.B` / `<layer>.A`, gate as `gate.w` / `gate.b`;
/// kind tag, routing manifest and host hash in metadata.
pub fn adapter_to_checkpoint(adapter: &LoraAdapter, routing: &LayerRouting, host: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Adapter)
        .with_meta("adapter_kind", adapter.kind().as_str())
        .with_meta("routing.content", join(routing.content()))
        .with_meta("routing.style", join(routing.style()))
        .with_meta("host_hash", host)
        .with_meta("rank", adapter.rank().to_string());
    for (name, f) in adapter.factors() {
        ck.push(format!("{name}.B"), f.b.clone());
        ck.push(format!("{name}.A"), f.a.clone());
    }
    ck.push("gate.w", row(&adapter.gate().w));
    ck.push("gate.b", row(&[adapter.gate().b]));
    ck
}

/// The adapter, its routing and the recorded host hash. Re-verifies routing
/// disjointness and that every factor lies in the adapter's set.
pub fn adapter_from_checkpoint(ck: &Checkpoint) -> Result<(LoraAdapter, LayerRouting, String)> {
    ck.expect_kind(CheckpointKind::Adapter)?;
    let kind = AdapterKind::parse(ck.meta("adapter_kind")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let routing = LayerRouting::new(split(ck.meta("routing.content")?), split(ck.meta("routing.style")?))?;
    let rank: usize = parse_meta(ck, "rank")?;
    let mut factors = BTreeMap::new();
    for (name, m) in &ck.tensors {
        if let Some(layer) = name.strip_suffix(".B") {
            let a = ck.tensor(&format!("{layer}.A"))?.clone();
            factors.insert(layer.to_string(), LoraFactors { b: m.clone(), a });
        }
    }
    let gw = ck.tensor("gate.w")?;
    let gb = ck.tensor("gate.b")?;
    if gb.values().len() != 1 {
        return Err(Error::CorruptCheckpoint("gate bias must be a single value".into()));
    }
    let adapter = LoraAdapter::new(kind, rank, factors, Gate { w: gw.values().to_vec(), b: gb.values()[0] })?;
    if let Some(stray) = adapter.factors().keys().find(|n| !routing.set(kind).contains(*n)) {
        return Err(Error::RoutingViolation(format!("{} adapter carries layer {stray} outside its set", kind.as_str())));
    }
    Ok((adapter, routing, ck.meta("host_hash")?.to_string()))
}

pub fn encoder_to_checkpoint(enc: &ExpertEncoder) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Encoder);
    ck.push("id_table", enc.id_table.clone());
    for (name, b) in [("identity", &enc.identity), ("content", &enc.content), ("style", &enc.style)] {
        ck.push(format!("{name}.weight"), b.weight.clone());
        ck.push(format!("{name}.bias"), row(&b.bias));
    }
    ck.push("head.weight", enc.head_weight.clone());
    ck.push("head.bias", row(&enc.head_bias));
    ck
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<ExpertEncoder> {
    ck.expect_kind(CheckpointKind::Encoder)?;
    let branch = |name: &str| -> Result<BranchEncoder> {
        Ok(BranchEncoder {
            weight: ck.tensor(&format!("{name}.weight"))?.clone(),
            bias: ck.tensor(&format!("{name}.bias"))?.values().to_vec(),
        })
    };
    let hb = ck.tensor("head.bias")?.values();
    if hb.len() != 2 {
        return Err(Error::CorruptCheckpoint("head bias must hold two values".into()));
    }
    Ok(ExpertEncoder {
        id_table: ck.tensor("id_table")?.clone(),
        identity: branch("identity")?,
        content: branch("content")?,
        style: branch("style")?,
        head_weight: ck.tensor("head.weight")?.clone(),
        head_bias: [hb[0], hb[1]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_stable() {
        let mut ck = Checkpoint::new(CheckpointKind::Backbone).with_meta("role", "test");
        ck.push("w", Matrix::from_fn(2, 3, |r, c| (r as f64 - c as f64) / 3.0));
        ck.push("empty", Matrix::zeros(4, 0));
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.tensor("w").unwrap(), &narrow(ck.tensor("w").unwrap()));
        assert_eq!(back.tensor("empty").unwrap().shape(), (4, 0));
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let mut ck = Checkpoint::new(CheckpointKind::Encoder);
        ck.push("x", Matrix::identity(2));
        let mut bytes = ck.encode();
        bytes[20] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
    }
}
