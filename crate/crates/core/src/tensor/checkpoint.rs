//! Key→tensor checkpoints in two interchangeable encodings.
//!
//! Text form, one record per line:
//!
//! ```text
//! volnet-checkpoint v1
//! @meta <key> <value…>
//! <name>\t<d0>x<d1>…\t<v0> <v1> …
//! ```
//!
//! A scalar's shape is written as `-`. Values use Rust's shortest
//! round-trip float formatting, so text checkpoints reload bit-exactly.
//!
//! Binary form, all integers and floats little-endian:
//!
//! ```text
//! magic  b"VNCKPT01"
//! u32    meta count, then per entry: u32 len, key bytes, u32 len, value bytes
//! u32    tensor count, then per tensor:
//!        u32 name len, name bytes (UTF-8), u32 rank, rank × u64 dims,
//!        product(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Tensor, TensorMap};

const TEXT_HEADER: &str = "volnet-checkpoint v1";
const MAGIC: &[u8; 8] = b"VNCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at line {line}: {reason}")]
    Text { line: usize, reason: String },
    #[error("malformed binary checkpoint: {0}")]
    Binary(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: TensorMap,
}

impl Checkpoint {
    pub fn new(tensors: TensorMap) -> Self {
        Self {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(TEXT_HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            out.push_str(&format!("@meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            let shape = if t.rank() == 0 {
                "-".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let values = t
                .data()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("{name}\t{shape}\t{values}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let err = |line: usize, reason: &str| CheckpointError::Text {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TEXT_HEADER => {}
            _ => return Err(err(1, "missing header")),
        }
        let mut ck = Checkpoint::default();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("@meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(name), Some(shape), values) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(err(lineno, "expected name, shape and values"));
            };
            let shape: Vec<usize> = if shape == "-" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| err(lineno, "bad dimension")))
                    .collect::<Result<_, _>>()?
            };
            let data: Vec<f64> = values
                .unwrap_or("")
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| err(lineno, "bad value")))
                .collect::<Result<_, _>>()?;
            let t = Tensor::new(shape, data).ok_or_else(|| err(lineno, "value count does not match shape"))?;
            ck.tensors.insert(name.to_string(), t);
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Binary("bad magic".into()));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>, _>>()?;
            ck.tensors
                .insert(name, Tensor::new(shape, data).expect("length derived from shape"));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Binary("trailing bytes".into()));
        }
        Ok(ck)
    }

    /// Writes the binary form when the path ends in `.bin`, text otherwise.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if path.extension().is_some_and(|e| e == "bin") {
            fs::write(path, self.to_bytes())?;
        } else {
            fs::write(path, self.to_text())?;
        }
        Ok(())
    }

    /// Reads either encoding, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| CheckpointError::Text { line: 0, reason: "not UTF-8".into() })?;
            Self::from_text(&text)
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CheckpointError::Binary("truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Binary("non-UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(-1e6f64..1e6, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
        (
            prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", tensor_strategy(), 0..5),
            prop::collection::btree_map("[a-z_]{1,8}", "[a-z0-9 ]{0,10}", 0..3),
        )
            .prop_map(|(tensors, meta)| Checkpoint {
                meta: meta.into_iter().map(|(k, v)| (k, v.trim().to_string())).collect(),
                tensors,
            })
    }

    proptest! {
        #[test]
        fn text_and_binary_round_trip(ck in checkpoint_strategy()) {
            prop_assert_eq!(&Checkpoint::from_text(&ck.to_text()).unwrap(), &ck);
            prop_assert_eq!(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &ck);
        }
    }

    #[test]
    fn binary_layout_is_little_endian() {
        let mut tensors = TensorMap::new();
        tensors.insert("w".into(), Tensor::vector(vec![1.0]));
        let bytes = Checkpoint::new(tensors).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        // magic, meta count, tensor count, name len, "w", rank, dim, value
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn text_rejects_count_mismatch() {
        let text = format!("{TEXT_HEADER}\nw\t2x2\t1 2 3\n");
        assert!(matches!(
            Checkpoint::from_text(&text),
            Err(CheckpointError::Text { line: 2, .. })
        ));
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let mut tensors = TensorMap::new();
        tensors.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let bytes = Checkpoint::new(tensors).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn save_and_load_both_forms() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::default();
        ck.meta.insert("hidden_dim".into(), "10".into());
        ck.tensors.insert("b".into(), Tensor::scalar(0.1));
        for name in ["ck.txt", "ck.bin"] {
            let path = dir.path().join(name);
            ck.save(&path).unwrap();
            assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        }
    }
}
