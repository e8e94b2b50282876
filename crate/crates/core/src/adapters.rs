//! Low-rank adapters on the attention query and value projections.
//!
//! A patch on weight `W` (`d × k`) holds `A` (`d × r`) and `B` (`r × k`) and
//! contributes `ΔW = (alpha / r) · A·B`. Fresh patches have `B = 0`, so a new
//! adapter leaves every output of the backbone unchanged.
//!
//! Serving uses the unmerged path: the backbone weights are read as-is and
//! the low-rank branch `(alpha / r)·(x·A)·B` is added next to `x·W`.
//! [`merge`] bakes `W + ΔW` into a copy instead.
//!
//! Adapter file layout (little-endian):
//!
//! ```text
//! "MTLA" | u16 version | u16 len + task_id UTF-8 | u16 rank | f64 alpha
//! | u16 patch count | per patch: u16 layer, u8 kind, u32 d, u32 k,
//! A (d*r f32), B (r*k f32) | u32 CRC32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, LayerLora, LoraBranch, TokenSeq};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Precision, Rng, Tape, Var};

pub const ADAPTER_MAGIC: [u8; 4] = *b"MTLA";
pub const ADAPTER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    QueryProj,
    ValueProj,
}

impl TargetKind {
    pub const ALL: [TargetKind; 2] = [TargetKind::QueryProj, TargetKind::ValueProj];

    fn code(self) -> u8 {
        match self {
            TargetKind::QueryProj => 0,
            TargetKind::ValueProj => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TargetKind::QueryProj),
            1 => Ok(TargetKind::ValueProj),
            other => Err(Error::Malformed(format!("unknown target kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::QueryProj => "query",
            TargetKind::ValueProj => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPatch {
    pub layer_index: usize,
    pub kind: TargetKind,
    pub a: Matrix,
    pub b: Matrix,
}

impl TargetPatch {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `(d, k)` of the patched weight.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn target<'b>(&self, backbone: &'b Backbone) -> Result<&'b Matrix> {
        let layer = backbone.layers.get(self.layer_index).ok_or_else(|| {
            Error::contract(format!(
                "patch targets layer {} of a {}-layer backbone",
                self.layer_index,
                backbone.layers.len()
            ))
        })?;
        Ok(match self.kind {
            TargetKind::QueryProj => &layer.wq,
            TargetKind::ValueProj => &layer.wv,
        })
    }
}

/// Scaled low-rank update `(alpha / r) · A·B`.
pub fn delta(patch: &TargetPatch, alpha: f64, rank: usize) -> Result<Matrix> {
    if patch.a.cols() != patch.b.rows() || patch.a.cols() != rank {
        return Err(Error::Shape {
            op: "delta",
            left: patch.a.shape(),
            right: patch.b.shape(),
        });
    }
    Ok(matmul(&patch.a, &patch.b)?.scale(alpha / rank as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the Gaussian used for `A`.
    pub init_std: f64,
    /// Use `ΔW = A·B` with no scaling. Implemented by storing `alpha = rank`.
    pub literal_delta: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            init_std: 0.02,
            literal_delta: false,
        }
    }
}

impl LoraConfig {
    pub fn effective_alpha(&self) -> f64 {
        if self.literal_delta {
            self.rank as f64
        } else {
            self.alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub task_id: String,
    rank: usize,
    alpha: f64,
    patches: Vec<TargetPatch>,
}

impl LoraAdapter {
    /// Builds an adapter from explicit patches, checking they share one rank.
    pub fn from_patches(task_id: impl Into<String>, rank: usize, alpha: f64, patches: Vec<TargetPatch>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("rank must be at least 1"));
        }
        for p in &patches {
            if p.a.cols() != rank || p.b.rows() != rank {
                return Err(Error::Shape {
                    op: "adapter patch",
                    left: p.a.shape(),
                    right: p.b.shape(),
                });
            }
            let (d, k) = p.target_shape();
            if rank > d.min(k) {
                return Err(Error::Rank {
                    rank,
                    max: d.min(k),
                    rows: d,
                    cols: k,
                });
            }
        }
        Ok(Self {
            task_id: task_id.into(),
            rank,
            alpha,
            patches,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn patches(&self) -> &[TargetPatch] {
        &self.patches
    }

    pub(crate) fn patches_mut(&mut self) -> &mut [TargetPatch] {
        &mut self.patches
    }

    pub fn param_count(&self) -> usize {
        self.patches.iter().map(TargetPatch::param_count).sum()
    }

    pub fn delta(&self, index: usize) -> Result<Matrix> {
        delta(&self.patches[index], self.alpha, self.rank)
    }

    /// Σ ‖ΔW‖²_F over all patches.
    pub fn delta_sq_norm(&self) -> Result<f64> {
        (0..self.patches.len()).map(|i| Ok(self.delta(i)?.sum_squares())).sum()
    }

    pub fn precision(&self) -> Option<Precision> {
        self.patches.first().map(|p| p.a.precision())
    }

    pub fn to_precision(&self, precision: Precision) -> LoraAdapter {
        let mut out = self.clone();
        for p in &mut out.patches {
            p.a = p.a.to_precision(precision);
            p.b = p.b.to_precision(precision);
        }
        out
    }

    /// Checks that every patch fits the backbone it is about to touch.
    pub fn check_compatible(&self, backbone: &Backbone) -> Result<()> {
        for p in &self.patches {
            let w = p.target(backbone)?;
            if w.shape() != p.target_shape() {
                return Err(Error::Shape {
                    op: "attach",
                    left: w.shape(),
                    right: p.target_shape(),
                });
            }
        }
        Ok(())
    }

    /// Records the patches on `tape` and returns the per-layer branches plus
    /// the vars in patch order (`A₀, B₀, A₁, B₁, ...`).
    pub(crate) fn bind(&self, tape: &mut Tape, n_layers: usize, trainable: bool) -> (Vec<LayerLora>, Vec<Var>) {
        let mut layers = vec![LayerLora::default(); n_layers];
        let mut vars = Vec::with_capacity(self.patches.len() * 2);
        let scale = self.scale();
        for p in &self.patches {
            let (a, b) = if trainable {
                (tape.leaf(p.a.clone()), tape.leaf(p.b.clone()))
            } else {
                (tape.constant(p.a.clone()), tape.constant(p.b.clone()))
            };
            vars.extend([a, b]);
            let branch = Some(LoraBranch { a, b, scale });
            match p.kind {
                TargetKind::QueryProj => layers[p.layer_index].query = branch,
                TargetKind::ValueProj => layers[p.layer_index].value = branch,
            }
        }
        (layers, vars)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        self.write_into(&mut w)?;
        Ok(w.finish())
    }

    fn write_into(&self, w: &mut Writer) -> Result<()> {
        w.bytes(&ADAPTER_MAGIC);
        w.u16(ADAPTER_VERSION);
        w.str16(&self.task_id)?;
        w.u16(narrow(self.rank, "rank")?);
        w.f64(self.alpha);
        w.u16(narrow(self.patches.len(), "patch count")?);
        for p in &self.patches {
            let (d, k) = p.target_shape();
            w.u16(narrow(p.layer_index, "layer index")?);
            w.u8(p.kind.code());
            w.u32(d as u32);
            w.u32(k as u32);
            w.f32s(&p.a);
            w.f32s(&p.b);
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &ADAPTER_MAGIC)?;
        r.version(ADAPTER_VERSION)?;
        let task_id = r.str16()?;
        let rank = r.u16()? as usize;
        let alpha = r.f64()?;
        let count = r.u16()? as usize;
        let mut patches = Vec::with_capacity(count);
        for _ in 0..count {
            let layer_index = r.u16()? as usize;
            let kind = TargetKind::from_code(r.u8()?)?;
            let d = r.u32()? as usize;
            let k = r.u32()? as usize;
            let a = r.f32_matrix(d, rank)?;
            let b = r.f32_matrix(rank, k)?;
            patches.push(TargetPatch { layer_index, kind, a, b });
        }
        r.finish()?;
        Self::from_patches(task_id, rank, alpha, patches)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn narrow(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in u16")))
}

/// One patch per (layer, {query, value}); `A ~ N(0, init_std²)`, `B = 0`.
pub fn new_adapter(
    task_id: &str,
    config: &BackboneConfig,
    lora: &LoraConfig,
    rng: &Rng,
    precision: Precision,
) -> Result<LoraAdapter> {
    let (d, k) = (config.d_model, config.d_model);
    if lora.rank == 0 {
        return Err(Error::contract("rank must be at least 1"));
    }
    if lora.rank > d.min(k) {
        return Err(Error::Rank {
            rank: lora.rank,
            max: d.min(k),
            rows: d,
            cols: k,
        });
    }
    let root = rng.split("adapter");
    let mut patches = Vec::with_capacity(config.n_layers * 2);
    for layer in 0..config.n_layers {
        for kind in TargetKind::ALL {
            let mut r = root.split(&format!("layer{layer}/{}", kind.name()));
            patches.push(TargetPatch {
                layer_index: layer,
                kind,
                a: Matrix::random_normal(d, lora.rank, lora.init_std, &mut r, precision),
                b: Matrix::zeros(lora.rank, k, precision),
            });
        }
    }
    LoraAdapter::from_patches(task_id, lora.rank, lora.effective_alpha(), patches)
}

/// A frozen backbone viewed through an adapter (unmerged path).
#[derive(Debug, Clone, Copy)]
pub struct AdaptedModel<'a> {
    backbone: &'a Backbone,
    adapter: &'a LoraAdapter,
}

/// Attaches `adapter` to a frozen backbone without touching its weights.
pub fn attach<'a>(backbone: &'a Backbone, adapter: &'a LoraAdapter) -> Result<AdaptedModel<'a>> {
    if !backbone.is_frozen() {
        return Err(Error::contract("adapters attach only to a frozen backbone"));
    }
    adapter.check_compatible(backbone)?;
    if let Some(p) = adapter.precision() {
        if p != backbone.precision() {
            return Err(Error::contract(format!(
                "adapter precision {p:?} differs from backbone {:?}",
                backbone.precision()
            )));
        }
    }
    Ok(AdaptedModel { backbone, adapter })
}

impl<'a> AdaptedModel<'a> {
    pub fn backbone(&self) -> &'a Backbone {
        self.backbone
    }

    pub fn adapter(&self) -> &'a LoraAdapter {
        self.adapter
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.backbone.bind(&mut tape, false);
        let (lora, _) = self.adapter.bind(&mut tape, self.backbone.layers.len(), false);
        let h = self.backbone.forward_cls(&mut tape, &bound, &tokens.ids, Some(&lora))?;
        Ok(tape.value(h).as_slice().to_vec())
    }
}

fn apply(backbone: &Backbone, adapter: &LoraAdapter, sign: f64) -> Result<Backbone> {
    adapter.check_compatible(backbone)?;
    let mut out = backbone.clone();
    for (i, p) in adapter.patches.iter().enumerate() {
        let d = adapter.delta(i)?.to_precision(backbone.precision());
        let layer = &mut out.layers[p.layer_index];
        let w = match p.kind {
            TargetKind::QueryProj => &mut layer.wq,
            TargetKind::ValueProj => &mut layer.wv,
        };
        *w = w.zip_map(&d, "merge", |x, y| x + sign * y)?;
    }
    if out.frozen_fingerprint.is_some() {
        out.frozen_fingerprint = Some(out.fingerprint());
    }
    Ok(out)
}

/// Copy of `backbone` with `W + ΔW` baked into every patched weight.
pub fn merge(backbone: &Backbone, adapter: &LoraAdapter) -> Result<Backbone> {
    apply(backbone, adapter, 1.0)
}

/// Inverse of [`merge`]: subtracts each `ΔW` from a merged copy.
pub fn unmerge(merged: &Backbone, adapter: &LoraAdapter) -> Result<Backbone> {
    apply(merged, adapter, -1.0)
}
