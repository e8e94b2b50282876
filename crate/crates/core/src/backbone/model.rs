use crate::backbone::{BackboneConfig, TokenSeq};
use crate::codec::Writer;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::numerics::{Matrix, Precision, Rng, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Weights of one post-LN encoder layer. Weights multiply row vectors from
/// the right (`x · W`), so `wq` is `d_model × d_model` and `w1` is
/// `d_model × d_ff`. Biases and layer-norm parameters are `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl LayerParams {
    fn init(config: &BackboneConfig, rng: &mut Rng, precision: Precision) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let proj_std = 1.0 / (d as f64).sqrt();
        let zeros = |n| Matrix::zeros(1, n, precision);
        let ones = |n| Matrix::filled(1, n, 1.0, precision);
        let mut w = |rows, cols, std| Matrix::random_normal(rows, cols, std, rng, precision);
        Self {
            wq: w(d, d, proj_std),
            bq: zeros(d),
            wk: w(d, d, proj_std),
            bk: zeros(d),
            wv: w(d, d, proj_std),
            bv: zeros(d),
            wo: w(d, d, proj_std),
            bo: zeros(d),
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w1: w(d, ff, proj_std),
            b1: zeros(ff),
            w2: w(ff, d, 1.0 / (ff as f64).sqrt()),
            b2: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
        }
    }

    pub(crate) fn params(&self) -> [&Matrix; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// The shared encoder.
///
/// Once [`Backbone::freeze`] has been called, no method of this type changes
/// its parameters: mutating entry points return
/// [`Error::FrozenViolation`](crate::Error::FrozenViolation).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub(crate) config: BackboneConfig,
    pub(crate) precision: Precision,
    pub(crate) token_embedding: Matrix,
    pub(crate) position_embedding: Matrix,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) mlm_head: Matrix,
    pub(crate) frozen_fingerprint: Option<String>,
}

pub(crate) struct BoundLayer {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

/// Backbone parameters recorded on a tape.
pub(crate) struct BoundBackbone {
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<BoundLayer>,
    pub mlm_head: Var,
}

impl BoundBackbone {
    /// Vars in [`Backbone::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            v.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias, l.w1, l.b1, l.w2, l.b2,
                l.ln2_gain, l.ln2_bias,
            ]);
        }
        v.push(self.mlm_head);
        v
    }
}

/// Low-rank branch `scale · (x·A)·B` added to a projection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LoraBranch {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LayerLora {
    pub query: Option<LoraBranch>,
    pub value: Option<LoraBranch>,
}

impl Backbone {
    /// Randomly initialized encoder. All draws come from `config.seed`.
    pub fn new(config: BackboneConfig, precision: Precision) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed).split("backbone");
        let d = config.d_model;
        let token_embedding =
            Matrix::random_normal(config.vocab_size, d, 1.0, &mut root.split("token_embedding"), precision);
        let position_embedding =
            Matrix::random_normal(config.max_seq_len, d, 0.1, &mut root.split("position_embedding"), precision);
        let layers = (0..config.n_layers)
            .map(|i| LayerParams::init(&config, &mut root.split(&format!("layer{i}")), precision))
            .collect();
        let mlm_head = Matrix::random_normal(
            d,
            config.vocab_size,
            1.0 / (d as f64).sqrt(),
            &mut root.split("mlm_head"),
            precision,
        );
        Ok(Self {
            config,
            precision,
            token_embedding,
            position_embedding,
            layers,
            mlm_head,
            frozen_fingerprint: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Matrix {
        &self.position_embedding
    }

    pub fn mlm_head(&self) -> &Matrix {
        &self.mlm_head
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_fingerprint.is_some()
    }

    /// Marks the backbone immutable and records its parameter fingerprint.
    /// Freezing an already frozen backbone changes nothing.
    pub fn freeze(mut self) -> Self {
        if self.frozen_fingerprint.is_none() {
            self.frozen_fingerprint = Some(self.fingerprint());
        }
        self
    }

    /// Fingerprint recorded when the backbone was frozen.
    pub fn frozen_fingerprint(&self) -> Option<&str> {
        self.frozen_fingerprint.as_deref()
    }

    /// SHA-256 (hex) of the serialized parameter section, exactly as it
    /// appears in a checkpoint file.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.parameter_bytes())
    }

    pub(crate) fn parameter_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for p in self.params() {
            w.scalars(p, self.precision);
        }
        w.into_inner()
    }

    /// All parameters in checkpoint order: token embedding, position
    /// embedding, per layer (Q, K, V, O projections with biases, first
    /// layer norm, feed-forward, second layer norm), MLM head.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.mlm_head);
        v
    }

    pub(crate) fn params_mut(&mut self) -> Result<Vec<&mut Matrix>> {
        if self.is_frozen() {
            return Err(Error::FrozenViolation("parameters requested for update".into()));
        }
        let mut v = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.mlm_head);
        Ok(v)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Bytes of the parameters needed for scoring (the MLM head excluded).
    pub fn encoder_bytes(&self) -> usize {
        self.config.encoder_param_count() * self.precision.scalar_bytes()
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let token_embedding = put(&self.token_embedding);
        let position_embedding = put(&self.position_embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: put(&l.wq),
                bq: put(&l.bq),
                wk: put(&l.wk),
                bk: put(&l.bk),
                wv: put(&l.wv),
                bv: put(&l.bv),
                wo: put(&l.wo),
                bo: put(&l.bo),
                ln1_gain: put(&l.ln1_gain),
                ln1_bias: put(&l.ln1_bias),
                w1: put(&l.w1),
                b1: put(&l.b1),
                w2: put(&l.w2),
                b2: put(&l.b2),
                ln2_gain: put(&l.ln2_gain),
                ln2_bias: put(&l.ln2_bias),
            })
            .collect();
        let mlm_head = put(&self.mlm_head);
        BoundBackbone {
            token_embedding,
            position_embedding,
            layers,
            mlm_head,
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final hidden states (`len × d_model`) for one sequence.
    ///
    /// `lora` holds one entry per layer when an adapter is attached.
    pub(crate) fn forward_hidden(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        tokens: &[u32],
        lora: Option<&[LayerLora]>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather_rows(bound.token_embedding, &ids)?;
        let pos = tape.gather_rows(bound.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();
        for (i, layer) in bound.layers.iter().enumerate() {
            let patch = lora.and_then(|l| l.get(i)).copied().unwrap_or_default();
            let q = projection(tape, x, layer.wq, layer.bq, patch.query)?;
            let k = projection(tape, x, layer.wk, layer.bk, None)?;
            let v = projection(tape, x, layer.wv, layer.bv, patch.value)?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, attn_scale);
                let weights = tape.softmax_rows(scores);
                heads.push(tape.matmul(weights, vh)?);
            }
            let attn = tape.concat_cols(&heads)?;
            let attn = projection(tape, attn, layer.wo, layer.bo, None)?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm_rows(res, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;

            let hidden = projection(tape, x, layer.w1, layer.b1, None)?;
            let hidden = tape.gelu(hidden);
            let ff = projection(tape, hidden, layer.w2, layer.b2, None)?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm_rows(res, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        }
        Ok(x)
    }

    /// The CLS-position hidden state as a `1 × d_model` node.
    pub(crate) fn forward_cls(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        tokens: &[u32],
        lora: Option<&[LayerLora]>,
    ) -> Result<Var> {
        let hidden = self.forward_hidden(tape, bound, tokens, lora)?;
        tape.gather_rows(hidden, &[0])
    }

    /// Feature vector `h` for a token sequence (CLS pooling).
    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = self.forward_cls(&mut tape, &bound, &tokens.ids, None)?;
        Ok(tape.value(h).as_slice().to_vec())
    }

    /// Converts every parameter to `precision`.
    pub fn to_precision(&self, precision: Precision) -> Backbone {
        let mut out = self.clone();
        out.precision = precision;
        out.token_embedding = self.token_embedding.to_precision(precision);
        out.position_embedding = self.position_embedding.to_precision(precision);
        out.mlm_head = self.mlm_head.to_precision(precision);
        for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
            for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
                *d = s.to_precision(precision);
            }
        }
        if out.frozen_fingerprint.is_some() {
            out.frozen_fingerprint = Some(out.fingerprint());
        }
        out
    }
}

fn projection(tape: &mut Tape, x: Var, w: Var, b: Var, lora: Option<LoraBranch>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let mut y = tape.add_row(y, b)?;
    if let Some(branch) = lora {
        let down = tape.matmul(x, branch.a)?;
        let up = tape.matmul(down, branch.b)?;
        let up = tape.scale(up, branch.scale);
        y = tape.add(y, up)?;
    }
    Ok(y)
}
