//! Backbone checkpoint file.
//!
//! ```text
//! "MTBB"                 magic
//! u16                    format version (1)
//! u32 x 6                vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len
//! u64                    seed
//! u8                     precision in bits (32 or 64)
//! u8                     frozen flag
//! scalars                parameters in Backbone::params order, f32 or f64
//! u32                    CRC32 of everything above
//! ```

use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig, LayerParams};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Precision};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTBB";
pub const CHECKPOINT_VERSION: u16 = 1;
pub(crate) const HEADER_LEN: usize = 40;

impl Backbone {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        w.u8(self.precision.bits() as u8);
        w.u8(self.is_frozen() as u8);
        debug_assert_eq!(w.len(), HEADER_LEN);
        w.bytes(&self.parameter_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = BackboneConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            d_ff: dims[4],
            max_seq_len: dims[5],
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Malformed(format!("invalid config block: {e}")))?;
        let bits = r.u8()?;
        let precision =
            Precision::from_bits(bits as u32).ok_or_else(|| Error::Malformed(format!("precision {bits} bits")))?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Malformed(format!("frozen flag {other}"))),
        };

        let (d, ff) = (config.d_model, config.d_ff);
        let mut read = |rows, cols| r_matrix(&mut r, rows, cols, precision);
        let token_embedding = read(config.vocab_size, d)?;
        let position_embedding = read(config.max_seq_len, d)?;
        // grown as read: a corrupt layer count must not drive an allocation
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: read(d, d)?,
                bq: read(1, d)?,
                wk: read(d, d)?,
                bk: read(1, d)?,
                wv: read(d, d)?,
                bv: read(1, d)?,
                wo: read(d, d)?,
                bo: read(1, d)?,
                ln1_gain: read(1, d)?,
                ln1_bias: read(1, d)?,
                w1: read(d, ff)?,
                b1: read(1, ff)?,
                w2: read(ff, d)?,
                b2: read(1, d)?,
                ln2_gain: read(1, d)?,
                ln2_bias: read(1, d)?,
            });
        }
        let mlm_head = read(d, config.vocab_size)?;
        r.finish()?;

        let backbone = Backbone {
            config,
            precision,
            token_embedding,
            position_embedding,
            layers,
            mlm_head,
            frozen_fingerprint: None,
        };
        Ok(if frozen { backbone.freeze() } else { backbone })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn r_matrix(r: &mut Reader<'_>, rows: usize, cols: usize, precision: Precision) -> Result<Matrix> {
    r.matrix(rows, cols, precision)
}
