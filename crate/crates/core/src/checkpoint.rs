//! Checkpoint container: an 8-byte magic, a little-endian `u64` header length,
//! a compact JSON header, then the raw little-endian `f32` tensor payload.
//!
//! ```text
//! "VMCKPT\0\0" | header_len: u64 | header JSON | payload
//! ```
//!
//! Tensor offsets in the header are relative to the start of the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::nn::{Module, Scalar};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VMCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            tensors: Vec::new(),
        }
    }

    pub fn from_module<T: Scalar, M: Module<T>>(kind: &str, config: Value, module: &M) -> Self {
        let mut ck = Self::new(kind, config);
        for (name, p) in module.named_params() {
            ck.tensors.push(Tensor {
                name,
                shape: p.shape().to_vec(),
                data: p.iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every tensor named by `module` into it, checking names and shapes.
    pub fn load_into<T: Scalar, M: Module<T>>(&self, module: &mut M) -> Result<()> {
        for (name, mut p) in module.named_params_mut() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{name}`")))?;
            if t.shape != p.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            for (dst, &src) in p.iter_mut().zip(&t.data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload: usize = self.param_count() * 4;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                message: "file shorter than checkpoint preamble".into(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, not a checkpoint file".into(),
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = PREAMBLE
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Parse {
                offset: 8,
                message: format!("header length {len} exceeds file size {}", bytes.len()),
            })?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| {
            // The header is written on one line, so the column is the byte index.
            let col = if e.line() <= 1 {
                e.column().saturating_sub(1)
            } else {
                0
            };
            Error::Parse {
                offset: (PREAMBLE + col) as u64,
                message: format!("corrupt header: {e}"),
            }
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: PREAMBLE as u64,
                message: format!("unsupported format version {}", header.format_version),
            });
        }
        Ok((header, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = Self::parse_header(bytes)?;
        let payload = &bytes[start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Parse {
                    offset: PREAMBLE as u64,
                    message: format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype),
                });
            }
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let hi = lo + 4 * n;
            if e.offset != expected || hi > payload.len() {
                return Err(Error::Parse {
                    offset: (start + lo.min(payload.len())) as u64,
                    message: format!("tensor `{}` payload truncated or misplaced", e.name),
                });
            }
            expected = hi as u64;
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        if expected as usize != payload.len() {
            return Err(Error::Parse {
                offset: (start + expected as usize) as u64,
                message: "trailing bytes after tensor payload".into(),
            });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    /// Human-readable listing used by `inspect`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format version: {FORMAT_VERSION}");
        let _ = writeln!(s, "kind:           {}", self.kind);
        let _ = writeln!(
            s,
            "config:         {}",
            serde_json::to_string_pretty(&self.config).unwrap_or_default()
        );
        let _ = writeln!(s, "tensors:");
        for (t, e) in self.tensors.iter().zip(self.header().tensors) {
            let _ = writeln!(
                s,
                "  {:<28} {:<18} f32  @{}",
                t.name,
                format!("{:?}", t.shape),
                e.offset
            );
        }
        let _ = writeln!(s, "parameters:     {}", self.param_count());
        s
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
