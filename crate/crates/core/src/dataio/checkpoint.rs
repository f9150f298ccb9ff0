//! Parameter checkpoints.
//!
//! Little-endian layout: `b"LMNC"`, u32 version, u32 tensor count, then per
//! tensor `u32 name length, name, u8 dtype, u8 rank, u64 dims[rank],
//! u64 offset, u64 byte length`, then the payload. Offsets are relative to
//! the start of the payload and tensors are stored back to back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, NodeSpec};
use crate::kernels::LayerOp;
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"LMNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

fn param_dims(op: &LayerOp, param: &str, len: usize) -> Vec<usize> {
    match (op, param) {
        (LayerOp::Conv(p), "weight") => {
            let s = p.weight_shape();
            vec![s.n, s.c, s.h, s.w]
        }
        (
            LayerOp::FullyConnected {
                in_features,
                out_features,
            },
            "weight",
        ) => vec![*in_features, *out_features],
        _ => vec![len],
    }
}

fn tensor_name(node: &NodeSpec, param: &str) -> String {
    format!("{}.{param}", node.name)
}

/// Entries (with offsets) describing every persisted tensor of `graph`.
pub fn checkpoint_table<T: Scalar>(graph: &ModelGraph<T>) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    let mut table = Vec::new();
    for (id, params) in graph.param_entries() {
        let node = graph.node(id);
        let op = node.op().expect("parameters belong to op nodes");
        for (pname, values) in params.persisted() {
            let byte_len = (values.len() * T::DTYPE.size()) as u64;
            table.push(TensorEntry {
                name: tensor_name(node, pname),
                dtype: T::DTYPE,
                dims: param_dims(op, pname, values.len()),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
    }
    table
}

fn header_len(table: &[TensorEntry]) -> usize {
    12 + table
        .iter()
        .map(|e| 4 + e.name.len() + 2 + 8 * e.dims.len() + 16)
        .sum::<usize>()
}

/// Size in bytes of the checkpoint [`save_checkpoint`] would write.
pub fn checkpoint_size<T: Scalar>(graph: &ModelGraph<T>) -> u64 {
    let table = checkpoint_table(graph);
    header_len(&table) as u64 + table.iter().map(|e| e.byte_len).sum::<u64>()
}

pub fn encode_checkpoint<T: Scalar>(graph: &ModelGraph<T>) -> Vec<u8> {
    let table = checkpoint_table(graph);
    let mut out = Vec::with_capacity(checkpoint_size(graph) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for e in &table {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.code());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.byte_len.to_le_bytes());
    }
    for (_, params) in graph.param_entries() {
        for (_, values) in params.persisted() {
            for &v in values {
                v.write_le(&mut out);
            }
        }
    }
    out
}

/// Writes via a sibling temporary file so a crash never leaves a torn file.
pub fn save_checkpoint<T: Scalar>(graph: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<u64> {
    if !graph.is_initialized() {
        return Err(Error::State(format!(
            "graph '{}' has uninitialized parameters",
            graph.name()
        )));
    }
    let path = path.as_ref();
    let bytes = encode_checkpoint(graph);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

/// Parses the header; returns the table and the payload.
pub fn decode_table(bytes: &[u8]) -> Result<(Vec<TensorEntry>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("{name}: unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        let byte_len = r.u64()?;
        table.push(TensorEntry {
            name,
            dtype,
            dims,
            offset,
            byte_len,
        });
    }
    let payload = &bytes[r.pos..];
    let mut expected = 0u64;
    for e in &table {
        let numel: usize = e.dims.iter().product();
        if e.offset != expected || e.byte_len != (numel * e.dtype.size()) as u64 {
            return Err(Error::Format(format!(
                "{}: table entry overlaps or disagrees with its shape",
                e.name
            )));
        }
        expected += e.byte_len;
    }
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, table declares {expected}",
            payload.len()
        )));
    }
    Ok((table, payload))
}

/// Loads every persisted tensor into `graph`. Names, dtypes and shapes must
/// match exactly; on any mismatch the graph is left untouched.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, graph: &mut ModelGraph<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, graph).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], graph: &mut ModelGraph<T>) -> Result<()> {
    let (table, payload) = decode_table(bytes)?;
    let want = checkpoint_table(graph);
    for (i, w) in want.iter().enumerate() {
        let Some(got) = table.get(i) else {
            return Err(Error::Format(format!(
                "{}: missing from checkpoint",
                w.name
            )));
        };
        if got.name != w.name {
            return Err(Error::Format(format!(
                "tensor {i}: checkpoint has '{}', model expects '{}'",
                got.name, w.name
            )));
        }
        if got.dtype != w.dtype {
            return Err(Error::Format(format!(
                "{}: stored as {:?}, model uses {:?}",
                w.name, got.dtype, w.dtype
            )));
        }
        if got.dims != w.dims {
            return Err(Error::Format(format!(
                "{}: shape {:?} in checkpoint, model expects {:?}",
                w.name, got.dims, w.dims
            )));
        }
    }
    if table.len() > want.len() {
        return Err(Error::Format(format!(
            "{}: not present in the model",
            table[want.len()].name
        )));
    }
    let size = T::DTYPE.size();
    let mut entries = table.iter();
    for (_, params) in graph.param_entries_mut() {
        for (_, values) in params.persisted_mut() {
            let e = entries.next().expect("tables matched");
            let src = &payload[e.offset as usize..(e.offset + e.byte_len) as usize];
            for (v, chunk) in values.iter_mut().zip(src.chunks_exact(size)) {
                *v = T::read_le(chunk);
            }
        }
    }
    graph.mark_initialized();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::presets;

    #[test]
    fn round_trip_is_bitwise() {
        let mut g = presets::preset_lmobilenet_narrow(3).unwrap();
        g.initialize(11);
        let bytes = encode_checkpoint(&g);
        assert_eq!(bytes.len() as u64, checkpoint_size(&g));
        let mut h = presets::preset_lmobilenet_narrow(3).unwrap();
        decode_checkpoint(&bytes, &mut h).unwrap();
        assert_eq!(g, h);

        let mut d = presets::preset_lmobilenet_narrow(3).unwrap().cast::<f64>();
        d.initialize(5);
        let mut e = presets::preset_lmobilenet_narrow(3).unwrap().cast::<f64>();
        decode_checkpoint(&encode_checkpoint(&d), &mut e).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn mismatches_are_format_errors() {
        let mut g = presets::preset_lmobilenet_narrow(3).unwrap();
        g.initialize(1);
        let bytes = encode_checkpoint(&g);
        let mut wrong = presets::preset_lmobilenet_narrow(5).unwrap();
        let before = wrong.clone();
        let err = decode_checkpoint(&bytes, &mut wrong).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("head.fc.weight"), "{err}");
        assert_eq!(wrong, before);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, &mut wrong),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad, &mut wrong)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], &mut wrong),
            Err(Error::Format(_))
        ));
    }
}
