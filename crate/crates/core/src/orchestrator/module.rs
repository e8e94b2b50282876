//! The deployable per-task unit and its file.
//!
//! ```text
//! "MTTM" | u16 version | u16 len + task_id | u64 created_at
//! | [u8; 32] backbone fingerprint | u32 len + adapter file (MTLA)
//! | u16 C | u32 d | W_h (C*d f32) | b_h (C f32) | u32 CRC32
//! ```

use std::io::Read;
use std::path::Path;

use crate::adapters::LoraAdapter;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::hash::to_hex;
use crate::heads::ClassificationHead;
use crate::numerics::Precision;

pub const MODULE_MAGIC: [u8; 4] = *b"MTTM";
pub const MODULE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleMetadata {
    pub num_classes: usize,
    /// Seconds since the Unix epoch; 0 when unknown.
    pub created_at: u64,
    /// Fingerprint of the frozen backbone the module was trained on.
    pub backbone_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModule {
    pub task_id: String,
    pub adapter: LoraAdapter,
    pub head: ClassificationHead,
    pub metadata: ModuleMetadata,
}

impl TaskModule {
    pub fn new(adapter: LoraAdapter, head: ClassificationHead, backbone_fingerprint: &str, created_at: u64) -> Result<Self> {
        if adapter.task_id != head.task_id {
            return Err(Error::contract(format!(
                "adapter is for {:?} but head is for {:?}",
                adapter.task_id, head.task_id
            )));
        }
        parse_fingerprint(backbone_fingerprint)?;
        Ok(Self {
            task_id: head.task_id.clone(),
            metadata: ModuleMetadata {
                num_classes: head.num_classes(),
                created_at,
                backbone_fingerprint: backbone_fingerprint.to_string(),
            },
            adapter,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.adapter.param_count() + self.head.param_count()
    }

    /// Bytes of the module's parameters at `precision`.
    pub fn param_bytes(&self, precision: Precision) -> usize {
        self.param_count() * precision.scalar_bytes()
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            task_id: self.task_id.clone(),
            adapter: self.adapter.to_precision(precision),
            head: self.head.to_precision(precision),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(&MODULE_MAGIC);
        w.u16(MODULE_VERSION);
        w.str16(&self.task_id)?;
        w.u64(self.metadata.created_at);
        w.bytes(&parse_fingerprint(&self.metadata.backbone_fingerprint)?);
        let adapter = self.adapter.to_bytes()?;
        w.u32(adapter.len() as u32);
        w.bytes(&adapter);
        w.u16(self.head.num_classes() as u16);
        w.u32(self.head.d_model() as u32);
        w.f32s(&self.head.weight);
        w.f32s(&self.head.bias);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &MODULE_MAGIC)?;
        r.version(MODULE_VERSION)?;
        let task_id = r.str16()?;
        let created_at = r.u64()?;
        let fingerprint = to_hex(r.take(32)?);
        let adapter_len = r.u32()? as usize;
        let adapter = LoraAdapter::from_bytes(r.take(adapter_len)?)?;
        let c = r.u16()? as usize;
        let d = r.u32()? as usize;
        let weight = r.f32_matrix(c, d)?;
        let bias = r.f32_matrix(1, c)?;
        r.finish()?;
        if adapter.task_id != task_id {
            return Err(Error::Malformed(format!(
                "module {task_id:?} embeds an adapter for {:?}",
                adapter.task_id
            )));
        }
        let head = ClassificationHead::from_parts(&task_id, weight, bias)?;
        Self::new(adapter, head, &fingerprint, created_at)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Task id from the head of a module file, without reading the rest.
pub fn peek_task_id(path: impl AsRef<Path>) -> Result<String> {
    let mut head = Vec::with_capacity(1024);
    std::fs::File::open(path)?.take(4 + 2 + 2 + u16::MAX as u64).read_to_end(&mut head)?;
    let mut r = Reader::unchecked(&head, &MODULE_MAGIC)?;
    r.version(MODULE_VERSION)?;
    r.str16()
}

fn parse_fingerprint(hex: &str) -> Result<[u8; 32]> {
    let bytes = hex.as_bytes();
    if bytes.len() != 64 {
        return Err(Error::contract(format!("fingerprint {hex:?} is not 64 hex digits")));
    }
    let mut out = [0u8; 32];
    for (i, pair) in bytes.chunks(2).enumerate() {
        let s = std::str::from_utf8(pair).map_err(|_| Error::contract("fingerprint is not ASCII"))?;
        out[i] = u8::from_str_radix(s, 16).map_err(|_| Error::contract(format!("bad hex in fingerprint {hex:?}")))?;
    }
    Ok(out)
}
