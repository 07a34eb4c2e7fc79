//! Single-file container of named `f32` arrays plus string metadata.
//!
//! Layout: the magic `LDCTCKP1`, a little-endian `u32` manifest length, the
//! UTF-8 manifest, then the payload of little-endian `f32`s. Manifest lines
//! are either `meta <key> <value>` or `tensor <name> <shape> <byte offset>`,
//! with shapes written as `d0xd1x…` (`-` for a scalar).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDCTCKP1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!(
            "{what} {s:?} must be a non-empty token without whitespace"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| bad(format!("missing meta entry {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("meta entry {key} has unparseable value {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Values are stored as `f32`; anything not exactly representable is
    /// rounded.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            check_token(k, "meta key")?;
            if v.contains('\n') {
                return Err(bad(format!("meta value for {k} contains a newline")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token(name, "tensor name")?;
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            manifest.push_str(&format!("tensor {name} {shape} {offset}\n"));
            offset += 4 * t.len();
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let manifest = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[12 + mlen..];
        let mut ck = Checkpoint::new();
        let mut expected_end = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let mut parts = line.splitn(3, ' ');
            let kind = parts.next().unwrap_or_default();
            let key = parts
                .next()
                .ok_or_else(|| bad(format!("manifest line {} incomplete", lineno + 1)))?;
            let rest = parts
                .next()
                .ok_or_else(|| bad(format!("manifest line {} incomplete", lineno + 1)))?;
            match kind {
                "meta" => ck.meta.push((key.to_string(), rest.to_string())),
                "tensor" => {
                    let (shape, offset) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("tensor {key} lacks an offset")))?;
                    let shape: Vec<usize> = if shape == "-" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| {
                                d.parse()
                                    .map_err(|_| bad(format!("tensor {key}: bad shape {shape}")))
                            })
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| bad(format!("tensor {key}: bad offset")))?;
                    if offset != expected_end {
                        return Err(bad(format!(
                            "tensor {key}: offset {offset}, expected {expected_end}"
                        )));
                    }
                    let count: usize = shape.iter().product();
                    let end = offset + 4 * count;
                    let raw = payload
                        .get(offset..end)
                        .ok_or_else(|| bad(format!("tensor {key}: payload truncated")))?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    ck.tensors
                        .push((key.to_string(), Tensor::from_vec(&shape, data)?));
                    expected_end = end;
                }
                other => return Err(bad(format!("unknown manifest entry kind {other:?}"))),
            }
        }
        if payload.len() != expected_end {
            return Err(bad(format!(
                "payload holds {} bytes, manifest describes {expected_end}",
                payload.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
