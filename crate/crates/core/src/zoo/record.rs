use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Mask, ModelArch, ModelParams};
use crate::tensor::Tensor;

pub(crate) const PAYLOAD_MAGIC: &[u8; 4] = b"ZOOW";

/// Provenance of a pruned model.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordMeta {
    pub method: String,
    pub criterion: String,
    pub r: f64,
    pub iterations: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// One pruned model: task, kept units over the pretrained architecture and
/// compact weights (held at 32-bit precision).
#[derive(Clone, Debug, PartialEq)]
pub struct ZooRecord {
    pub task_id: u64,
    pub classes: Vec<usize>,
    /// Fingerprint of the pretrained architecture the mask refers to.
    pub arch_hash: String,
    pub mask: Mask,
    pub params: ModelParams,
    pub meta: RecordMeta,
}

fn to_f32_precision(params: &ModelParams) -> Result<ModelParams> {
    let tensors = params
        .tensors()
        .iter()
        .map(|t| Tensor::param(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v as f32)).collect()))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(params.arch().clone(), tensors)
}

/// Compact architecture implied by a pretrained architecture, a mask and a
/// class count.
pub fn compact_arch(pretrained: &ModelArch, mask: &Mask, num_classes: usize) -> Result<ModelArch> {
    Ok(pretrained.with_widths(&mask.counts())?.with_num_classes(num_classes))
}

impl ZooRecord {
    /// Builds a record, rounding weights to the nearest 32-bit float.
    pub fn new(
        task_id: u64,
        classes: Vec<usize>,
        pretrained: &ModelArch,
        mask: Mask,
        params: &ModelParams,
        meta: RecordMeta,
    ) -> Result<Self> {
        if mask.widths() != pretrained.widths() {
            return Err(Error::Contract(format!("record mask widths {:?} do not fit {pretrained}", mask.widths())));
        }
        let expected = compact_arch(pretrained, &mask, classes.len())?;
        if params.arch() != &expected {
            return Err(Error::Contract(format!("compact weights are {}, mask implies {expected}", params.arch())));
        }
        Ok(Self { task_id, classes, arch_hash: pretrained.fingerprint(), mask, params: to_f32_precision(params)?, meta })
    }

    /// Binary payload: magic, group count, then per group the kept count,
    /// kept indices, weight byte length and little-endian `f32` weights.
    pub fn payload(&self) -> Vec<u8> {
        let specs = self.params.specs();
        let layers = self.mask.num_layers();
        let mut out = Vec::new();
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.extend_from_slice(&((layers + 1) as u32).to_le_bytes());
        for group in 0..=layers {
            let kept: Vec<usize> = if group < layers { self.mask.kept(group).to_vec() } else { (0..self.classes.len()).collect() };
            out.extend_from_slice(&(kept.len() as u32).to_le_bytes());
            for k in kept {
                out.extend_from_slice(&(k as u32).to_le_bytes());
            }
            let vals: Vec<f32> = specs
                .iter()
                .zip(self.params.tensors())
                .filter(|(s, _)| s.group == group)
                .flat_map(|(_, t)| t.data().iter().map(|&v| v as f32))
                .collect();
            out.extend_from_slice(&((vals.len() * 4) as u64).to_le_bytes());
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Canonical metadata text covered by the content hash.
    pub(crate) fn meta_text(&self) -> String {
        meta_text(self.task_id, &self.arch_hash, &self.meta, &self.classes)
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.payload(), &self.meta_text())
    }

    /// Inverse of [`ZooRecord::payload`].
    pub fn decode(header: &RecordHeader, pretrained: &ModelArch, payload: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { task_id: Some(header.task_id), reason };
        let mut cur = Cursor { buf: payload, pos: 0 };
        if cur.take(4).ok_or_else(|| corrupt("payload too short".into()))? != PAYLOAD_MAGIC {
            return Err(corrupt("bad payload magic".into()));
        }
        let widths = pretrained.widths();
        let groups = cur.u32().ok_or_else(|| corrupt("truncated group count".into()))? as usize;
        if groups != widths.len() + 1 {
            return Err(corrupt(format!("{groups} groups for {} prunable layers", widths.len())));
        }
        let mut kept = Vec::with_capacity(widths.len());
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(groups);
        for g in 0..groups {
            let n = cur.u32().ok_or_else(|| corrupt(format!("truncated group {g}")))? as usize;
            let idx = (0..n)
                .map(|_| cur.u32().map(|v| v as usize))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| corrupt(format!("truncated indices in group {g}")))?;
            let bytes = cur.u64().ok_or_else(|| corrupt(format!("truncated length in group {g}")))? as usize;
            let raw = cur.take(bytes).ok_or_else(|| corrupt(format!("truncated weights in group {g}")))?;
            if bytes % 4 != 0 {
                return Err(corrupt(format!("group {g} weight length {bytes} is not a multiple of 4")));
            }
            values.push(raw.chunks(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect());
            if g < widths.len() {
                kept.push(idx);
            } else if n != header.classes.len() || idx.iter().enumerate().any(|(i, &v)| i != v) {
                return Err(corrupt("classifier group does not match the record's classes".into()));
            }
        }
        if cur.pos != payload.len() {
            return Err(corrupt("trailing bytes after payload".into()));
        }
        let mask = Mask::new(widths, kept).map_err(|e| corrupt(e.to_string()))?;
        let arch = compact_arch(pretrained, &mask, header.classes.len())?;
        let specs = arch.param_specs();
        let mut offsets = vec![0usize; groups];
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let (g, o) = (s.group, offsets[s.group]);
            let data = values[g].get(o..o + s.numel()).ok_or_else(|| corrupt(format!("group {g} too short for {}", s.name)))?;
            tensors.push(Tensor::param(s.shape.clone(), data.to_vec())?);
            offsets[g] += s.numel();
        }
        if offsets.iter().zip(&values).any(|(&o, v)| o != v.len()) {
            return Err(corrupt("weight groups have unexpected sizes".into()));
        }
        Ok(Self {
            task_id: header.task_id,
            classes: header.classes.clone(),
            arch_hash: header.arch_hash.clone(),
            mask,
            params: ModelParams::from_tensors(arch, tensors)?,
            meta: header.meta.clone(),
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn meta_text(task_id: u64, arch_hash: &str, m: &RecordMeta, classes: &[usize]) -> String {
    format!(
        "task_id={task_id} arch={arch_hash} method={} criterion={} r={:?} iterations={} accuracy={:?} seed={} classes={}",
        m.method,
        m.criterion,
        m.r,
        m.iterations,
        m.accuracy,
        m.seed,
        join(classes)
    )
}

pub(crate) fn content_hash(payload: &[u8], meta: &str) -> String {
    let mut h = Sha256::new();
    h.update(payload);
    h.update(meta.as_bytes());
    hex::encode(h.finalize())
}

/// Manifest entry for one record: everything except the weight payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordHeader {
    pub task_id: u64,
    pub arch_hash: String,
    pub meta: RecordMeta,
    pub offset: u64,
    pub len: u64,
    pub hash: String,
    pub classes: Vec<usize>,
}

impl fmt::Display for RecordHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.meta;
        write!(
            f,
            "record task_id={} arch={} method={} criterion={} r={:?} iterations={} accuracy={:?} seed={} offset={} len={} hash={} classes={}",
            self.task_id,
            self.arch_hash,
            m.method,
            m.criterion,
            m.r,
            m.iterations,
            m.accuracy,
            m.seed,
            self.offset,
            self.len,
            self.hash,
            join(&self.classes)
        )
    }
}

impl FromStr for RecordHeader {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse(format!("manifest record {what}: {s:?}"));
        let mut fields = s.split_whitespace();
        if fields.next() != Some("record") {
            return Err(bad("does not start with 'record'"));
        }
        let kv: Vec<(&str, &str)> = fields.map(|f| f.split_once('=').ok_or_else(|| bad("has a field without '='"))).collect::<Result<_>>()?;
        let keys = ["task_id", "arch", "method", "criterion", "r", "iterations", "accuracy", "seed", "offset", "len", "hash", "classes"];
        if kv.len() != keys.len() || kv.iter().zip(keys).any(|((k, _), want)| *k != want) {
            return Err(bad("has unexpected fields"));
        }
        let v = |i: usize| kv[i].1;
        fn num<T: FromStr>(v: &str, what: &str, bad: &dyn Fn(&str) -> Error) -> Result<T> {
            v.parse().map_err(|_| bad(what))
        }
        Ok(RecordHeader {
            task_id: num(v(0), "task_id", &bad)?,
            arch_hash: v(1).to_string(),
            meta: RecordMeta {
                method: v(2).to_string(),
                criterion: v(3).to_string(),
                r: num(v(4), "r", &bad)?,
                iterations: num(v(5), "iterations", &bad)?,
                accuracy: num(v(6), "accuracy", &bad)?,
                seed: num(v(7), "seed", &bad)?,
            },
            offset: num(v(8), "offset", &bad)?,
            len: num(v(9), "len", &bad)?,
            hash: v(10).to_string(),
            classes: v(11).split(',').filter(|c| !c.is_empty()).map(|c| num(c, "classes", &bad)).collect::<Result<_>>()?,
        })
    }
}
