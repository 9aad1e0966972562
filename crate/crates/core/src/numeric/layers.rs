use rand::Rng;

use crate::error::{Error, Result};

use super::mask::Mask;
use super::params::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Normalization epsilon, small enough that normalized rows have unit
/// variance to well within 1e-6.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Bias-free linear map `y = x · Wᵀ` with `W` of shape `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(name, out_dim, in_dim, Init::Uniform { fan_in: in_dim }, rng);
        Linear {
            weight,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.matmul_t(x, w)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), 1, dim, Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), 1, dim, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Output of an attention call plus the node holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Node whose [`Tape::attention_probs`] are the per-head weights.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.wq"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.wk"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.wv"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.wo"), d_model, d_model, rng),
            heads,
        })
    }

    /// Masked multi-head attention of `q` over `k`/`v` (inputs before projection).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: &Mask,
    ) -> Result<AttentionOutput> {
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let weights = tape.attention(qp, kp, vp, mask, self.heads)?;
        let output = self.output.forward(tape, store, weights)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Post-norm encoder layer: attention and a GELU feed-forward block, each
/// wrapped in a residual connection followed by layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

/// Intermediate nodes of one layer, for inspection in tests.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub attention: AttentionOutput,
    pub after_norm1: Var,
    pub output: Var,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), d_model, rng),
            ff_in: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, rng),
            ff_out: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), d_model, rng),
        })
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Mask,
    ) -> Result<LayerTrace> {
        let attention = self.attention.forward(tape, store, x, x, x, mask)?;
        let res = tape.add(x, attention.output)?;
        let after_norm1 = self.norm1.forward(tape, store, res)?;
        let h = self.ff_in.forward(tape, store, after_norm1)?;
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, store, h)?;
        let res = tape.add(after_norm1, h)?;
        let output = self.norm2.forward(tape, store, res)?;
        Ok(LayerTrace {
            attention,
            after_norm1,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &Mask) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x, mask)?.output)
    }
}

/// A stack of encoder layers sharing one mask.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), d_model, heads, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &Mask) -> Result<Var> {
        let traces = self.forward_traced(tape, store, x, mask)?;
        Ok(traces.last().map_or(x, |t| t.output))
    }

    /// One trace per layer, in order.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Mask,
    ) -> Result<Vec<LayerTrace>> {
        let rows = tape.value(x).rows();
        if mask.rows() != rows || mask.cols() != rows {
            return Err(Error::Dimension(format!(
                "mask {}x{} for a {rows}-row sequence",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let t = layer.forward_traced(tape, store, h, mask)?;
            h = t.output;
            traces.push(t);
        }
        Ok(traces)
    }
}
