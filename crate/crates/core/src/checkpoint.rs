//! PRMC checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PRMC" | version u16 | topology: len u32, JSON graph spec
//! tensor count u32 | tensor records
//! sections until EOF: tag [u8; 4], len u64, body
//! ```
//!
//! A tensor record is `nameLen u16, name, dtype u8 (0 = f32, 1 = f64),
//! rank u8, dims u32[rank], payload`. Known section tags are `ADMM`, `MASK`,
//! `PLOG` (purify log text), `CONF` (config echo) and `HIST` (metrics);
//! other tags are skipped with a warning.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::admm::{AdmmLayer, AdmmState, LayerMask, PruneMask, StructuredBudget};
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, LayerGraph};
use crate::purify::PurifyLog;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRMC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A model plus whatever pipeline state travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LayerGraph,
    pub admm: Option<AdmmState>,
    pub mask: Option<PruneMask>,
    pub purify_log: Option<PurifyLog>,
    /// Flat config echo, including the seed.
    pub config: BTreeMap<String, String>,
    /// Named scalar metrics recorded by earlier stages.
    pub history: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(model: LayerGraph) -> Self {
        Checkpoint {
            model,
            admm: None,
            mask: None,
            purify_log: None,
            config: BTreeMap::new(),
            history: BTreeMap::new(),
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, dtype: Dtype) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

#[derive(Serialize, Deserialize)]
struct AdmmHeader {
    iteration: u64,
    layers: Vec<(StructuredBudget, f64)>,
}

/// Serializes a checkpoint. Model weights use `dtype`; ADMM variables are
/// always stored as f64.
pub fn to_bytes(ck: &Checkpoint, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let topo = serde_json::to_vec(&ck.model.to_spec()).map_err(|e| Error::Invariant(e.to_string()))?;
    out.extend_from_slice(&(topo.len() as u32).to_le_bytes());
    out.extend_from_slice(&topo);

    let ids = ck.model.weighted_ids();
    out.extend_from_slice(&(2 * ids.len() as u32).to_le_bytes());
    for id in ids {
        let node = ck.model.node(id);
        put_tensor(&mut out, &format!("{}.weight", node.name), node.weights(), dtype);
        put_tensor(&mut out, &format!("{}.bias", node.name), node.bias(), dtype);
    }

    if let Some(admm) = &ck.admm {
        let header = AdmmHeader {
            iteration: admm.iteration,
            layers: admm.layers.iter().map(|l| (l.budget.clone(), l.rho)).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut body = (json.len() as u32).to_le_bytes().to_vec();
        body.extend_from_slice(&json);
        for l in &admm.layers {
            put_tensor(&mut body, &format!("{}.y", l.budget.layer), &l.y, Dtype::F64);
            put_tensor(&mut body, &format!("{}.u", l.budget.layer), &l.u, Dtype::F64);
        }
        put_section(&mut out, b"ADMM", &body);
    }
    if let Some(mask) = &ck.mask {
        let mut body = (mask.layers.len() as u32).to_le_bytes().to_vec();
        for (name, m) in &mask.layers {
            body.extend_from_slice(&(name.len() as u16).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(m.dims.len() as u8);
            for &d in &m.dims {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            body.extend(m.weights.iter().map(|&b| b as u8));
            body.extend(m.bias.iter().map(|&b| b as u8));
        }
        put_section(&mut out, b"MASK", &body);
    }
    if let Some(log) = &ck.purify_log {
        put_section(&mut out, b"PLOG", log.to_text().as_bytes());
    }
    if !ck.config.is_empty() {
        let text: String = ck.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_section(&mut out, b"CONF", text.as_bytes());
    }
    if !ck.history.is_empty() {
        let text: String = ck.history.iter().map(|(k, v)| format!("{k}={v:e}\n")).collect();
        put_section(&mut out, b"HIST", text.as_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    save_checkpoint_as(path, ck, Dtype::F64)
}

pub fn save_checkpoint_as(path: impl AsRef<Path>, ck: &Checkpoint, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ck, dtype)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute offset of `buf[0]`, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Length(format!(
                "need {n} bytes at offset {} but only {} remain",
                self.offset(),
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self, len: usize) -> Result<String> {
        let at = self.offset();
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "name is not UTF-8".into(),
        })
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = self.name(len)?;
        let at = self.offset();
        let dtype = match self.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            c => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("unknown dtype code {c} for tensor `{name}`"),
                })
            }
        };
        let dims = self.dims()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
        let Some((n, nbytes)) = count.filter(|&(_, b)| b <= self.remaining()) else {
            return Err(Error::Length(format!(
                "tensor `{name}` with dims {dims:?} does not fit in the {} remaining bytes",
                self.remaining()
            )));
        };
        let raw = self.take(nbytes)?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
        };
        debug_assert_eq!(data.len(), n);
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: at,
            msg: format!("tensor `{name}`: {e}"),
        })?;
        Ok((name, t))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format {
            offset: 0,
            msg: "missing PRMC magic".into(),
        });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let topo_len = r.u32()? as usize;
    let topo_at = r.offset();
    let spec: GraphSpec = serde_json::from_slice(r.take(topo_len)?).map_err(|e| Error::Format {
        offset: topo_at,
        msg: format!("bad topology block: {e}"),
    })?;
    let mut model = LayerGraph::from_spec(&spec).map_err(|e| Error::Format {
        offset: topo_at,
        msg: format!("bad topology: {e}"),
    })?;

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), (at, t)).is_some() {
            return Err(Error::Format {
                offset: at,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
    }
    for id in model.weighted_ids() {
        let name = model.node(id).name.clone();
        let mut get = |suffix: &str| {
            tensors
                .remove(&format!("{name}.{suffix}"))
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format {
                    offset: r.offset(),
                    msg: format!("missing tensor `{name}.{suffix}`"),
                })
        };
        let (w, b) = (get("weight")?, get("bias")?);
        model.set_params(id, w, b).map_err(|e| Error::Format {
            offset: topo_at,
            msg: format!("tensor for `{name}` disagrees with topology: {e}"),
        })?;
    }
    if let Some((name, (at, _))) = tensors.into_iter().next() {
        return Err(Error::Format {
            offset: at,
            msg: format!("tensor `{name}` matches no layer"),
        });
    }

    let mut ck = Checkpoint::new(model);
    while r.remaining() > 0 {
        let tag_bytes = r.take(4)?;
        let tag = String::from_utf8_lossy(tag_bytes).into_owned();
        let len = r.u64()?;
        if len > r.remaining() as u64 {
            return Err(Error::CorruptSection {
                section: tag,
                msg: format!("declared length {len} exceeds the {} remaining bytes", r.remaining()),
            });
        }
        let base = r.offset();
        let body = r.take(len as usize)?;
        let corrupt = |e: Error| Error::CorruptSection {
            section: tag.clone(),
            msg: e.to_string(),
        };
        match tag_bytes {
            b"ADMM" => ck.admm = Some(read_admm(body, base, &ck.model).map_err(corrupt)?),
            b"MASK" => ck.mask = Some(read_mask(body, base).map_err(corrupt)?),
            b"PLOG" => ck.purify_log = Some(PurifyLog::parse(utf8(body)?.as_str()).map_err(corrupt)?),
            b"CONF" => ck.config = read_pairs(body, |v| Ok(v.to_string())).map_err(corrupt)?,
            b"HIST" => {
                ck.history = read_pairs(body, |v| {
                    v.parse().map_err(|_| Error::Data(format!("bad number `{v}`")))
                })
                .map_err(corrupt)?
            }
            _ => warn!("skipping unknown checkpoint section `{tag}` ({len} bytes)"),
        }
    }
    Ok(ck)
}

fn utf8(body: &[u8]) -> Result<String> {
    String::from_utf8(body.to_vec()).map_err(|_| Error::Data("section is not UTF-8".into()))
}

fn read_pairs<T>(body: &[u8], parse: impl Fn(&str) -> Result<T>) -> Result<BTreeMap<String, T>> {
    utf8(body)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("line `{l}` is not key=value")))?;
            Ok((k.to_string(), parse(v)?))
        })
        .collect()
}

fn read_admm(body: &[u8], base: usize, model: &LayerGraph) -> Result<AdmmState> {
    let mut r = Reader::new(body, base);
    let len = r.u32()? as usize;
    let header: AdmmHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Data(format!("bad ADMM header: {e}")))?;
    let mut layers = Vec::with_capacity(header.layers.len().min(r.remaining()));
    for (budget, rho) in header.layers {
        let (yn, y) = r.tensor()?;
        let (un, u) = r.tensor()?;
        if yn != format!("{}.y", budget.layer) || un != format!("{}.u", budget.layer) {
            return Err(Error::Data(format!("ADMM tensors `{yn}`, `{un}` out of order")));
        }
        let id = model.find_weighted(&budget.layer)?;
        let dims = model.node(id).weights().dims();
        if y.dims() != dims || u.dims() != dims {
            return Err(Error::Data(format!(
                "ADMM variables of `{}` do not match the layer dims",
                budget.layer
            )));
        }
        layers.push(AdmmLayer { budget, y, u, rho });
    }
    if r.remaining() != 0 {
        return Err(Error::Data(format!("{} trailing bytes", r.remaining())));
    }
    Ok(AdmmState {
        layers,
        iteration: header.iteration,
    })
}

fn read_mask(body: &[u8], base: usize) -> Result<PruneMask> {
    let mut r = Reader::new(body, base);
    let n = r.u32()? as usize;
    let mut layers = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = r.name(len)?;
        let dims = r.dims()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= r.remaining())
            .ok_or_else(|| Error::Length(format!("mask `{name}` dims {dims:?} exceed the section")))?;
        let flags = |s: &[u8]| -> Result<Vec<bool>> {
            s.iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::Data(format!("mask flag byte {b}"))),
                })
                .collect()
        };
        let weights = flags(r.take(count)?)?;
        let bias = flags(r.take(dims.first().copied().unwrap_or(0))?)?;
        layers.insert(name, LayerMask { dims, weights, bias });
    }
    if r.remaining() != 0 {
        return Err(Error::Data(format!("{} trailing bytes", r.remaining())));
    }
    Ok(PruneMask { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::{hard_prune, init_admm};
    use crate::graph::{build_lenet5, build_tiny_resnet};
    use crate::purify::propagate_unused_paths;

    fn full_checkpoint() -> Checkpoint {
        let mut g = build_lenet5();
        g.init_weights(11);
        let budgets = vec![StructuredBudget {
            layer: "conv2".into(),
            filters: Some(10),
            columns: Some(100),
        }];
        let mut admm = init_admm(&g, &budgets, 1e-3).unwrap();
        admm.layers[0].u.data_mut()[3] = -1.0 / 3.0;
        admm.iteration = 4;
        let mut pruned = g.clone();
        let mask = hard_prune(&mut pruned, &budgets).unwrap();
        let (_, log) = propagate_unused_paths(&pruned).unwrap();
        let mut ck = Checkpoint::new(g);
        ck.admm = Some(admm);
        ck.mask = Some(mask);
        ck.purify_log = Some(log);
        ck.config.insert("seed".into(), "7".into());
        ck.history.insert("accuracy".into(), 0.987654321);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = full_checkpoint();
        let bytes = to_bytes(&ck, Dtype::F64).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn resnet_topology_round_trips() {
        let mut g = build_tiny_resnet();
        g.init_weights(3);
        let ck = Checkpoint::new(g);
        assert_eq!(from_bytes(&to_bytes(&ck, Dtype::F64).unwrap()).unwrap(), ck);
    }

    #[test]
    fn f32_payload_rounds() {
        let ck = full_checkpoint();
        let back = from_bytes(&to_bytes(&ck, Dtype::F32).unwrap()).unwrap();
        let a = ck.model.node(1).weights().data();
        let b = back.model.node(1).weights().data();
        assert!(a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y));
        assert_eq!(back.admm, ck.admm);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = to_bytes(&full_checkpoint(), Dtype::F64).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn corrupt_section_is_named() {
        let mut ck = Checkpoint::new(build_lenet5());
        ck.config.insert("seed".into(), "1".into());
        let mut bytes = to_bytes(&ck, Dtype::F64).unwrap();
        let tag = bytes.windows(4).rposition(|w| w == b"CONF").unwrap();
        bytes[tag + 4..tag + 12].copy_from_slice(&u64::MAX.to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::CorruptSection { section, .. }) => assert_eq!(section, "CONF"),
            other => panic!("expected corrupt section, got {other:?}"),
        }
    }

    #[test]
    fn unknown_section_is_skipped() {
        let ck = Checkpoint::new(build_lenet5());
        let mut bytes = to_bytes(&ck, Dtype::F64).unwrap();
        put_section(&mut bytes, b"ZZZZ", b"whatever");
        assert_eq!(from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn truncation_is_a_length_error() {
        let bytes = to_bytes(&full_checkpoint(), Dtype::F64).unwrap();
        for cut in [5, 9, 200, 5000, bytes.len() - 1] {
            let r = from_bytes(&bytes[..cut]);
            assert!(r.is_err(), "cut at {cut} loaded");
        }
        // huge declared dims must not allocate
        let mut ck_bytes = to_bytes(&Checkpoint::new(build_lenet5()), Dtype::F64).unwrap();
        let at = ck_bytes.windows(12).position(|w| w == b"conv1.weight").unwrap() + 14;
        ck_bytes[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(from_bytes(&ck_bytes), Err(Error::Length(_))));
    }
}
