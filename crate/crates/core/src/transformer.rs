//! Pre-norm transformer blocks shared by the pair encoder (bidirectional)
//! and the evolution decoder (causal, optionally resumed from a KV cache).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnPrefix, Segment, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.add_const(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Self {
        let ff = 4 * hidden;
        BlockParams {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), hidden),
            attn: AttentionParams {
                q: Linear::new(store, &format!("{name}.attn.q"), hidden, hidden, rng),
                k: Linear::new(store, &format!("{name}.attn.k"), hidden, hidden, rng),
                v: Linear::new(store, &format!("{name}.attn.v"), hidden, hidden, rng),
                out: Linear::new(store, &format!("{name}.attn.out"), hidden, hidden, rng),
            },
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), hidden),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), hidden, ff, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), ff, hidden, rng),
        }
    }
}

/// Keys and values of every cached position for one layer, `P×h` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Per-layer attention keys/values for a frozen prefix. Appending is the only
/// way the cached content grows; [`KvCache::truncate`] rolls back to an
/// earlier length.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    hidden: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize, hidden: usize) -> Self {
        KvCache {
            hidden,
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    keys: Tensor::zeros(&[0, hidden]),
                    values: Tensor::zeros(&[0, hidden]),
                })
                .collect(),
        }
    }

    /// Number of cached token positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerKv {
        &self.layers[i]
    }

    fn prefix(&self, layer: usize) -> AttnPrefix {
        AttnPrefix {
            keys: self.layers[layer].keys.clone(),
            values: self.layers[layer].values.clone(),
        }
    }

    fn append(&mut self, layer: usize, keys: &Tensor, values: &Tensor) {
        let l = &mut self.layers[layer];
        for (dst, src) in [(&mut l.keys, keys), (&mut l.values, values)] {
            let rows = dst.rows() + src.rows();
            let mut data = std::mem::take(dst).into_data();
            data.extend_from_slice(src.data());
            *dst = Tensor::matrix(rows, self.hidden, data).unwrap();
        }
    }

    pub fn truncate(&mut self, len: usize) {
        let h = self.hidden;
        for l in &mut self.layers {
            for t in [&mut l.keys, &mut l.values] {
                let mut data = std::mem::take(t).into_data();
                data.truncate(len * h);
                *t = Tensor::matrix(len, h, data).unwrap();
            }
        }
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(&[0])
    }
}

/// Options for one pass through a stack of blocks.
pub struct StackPass<'c, 'd> {
    pub heads: usize,
    pub segments: Vec<Segment>,
    pub causal: bool,
    pub cache: Option<&'c mut KvCache>,
    /// Dropout probability and a mask source; `None` disables dropout.
    pub dropout: Option<(f64, &'d mut dyn FnMut() -> f64)>,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, draw: &mut dyn FnMut() -> f64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if draw() < p { 0.0 } else { keep }).collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}

/// Multi-head causal (or bidirectional) self-attention with projections.
/// With a cache, `x` holds positions `P..P+L` and the new keys/values are
/// appended to layer `layer` of the cache.
#[allow(clippy::too_many_arguments)]
pub fn causal_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    x: Var,
    heads: usize,
    segments: Vec<Segment>,
    causal: bool,
    cache: Option<(&mut KvCache, usize)>,
) -> Result<Var> {
    let q = p.q.forward(tape, store, x)?;
    let k = p.k.forward(tape, store, x)?;
    let v = p.v.forward(tape, store, x)?;
    let o = match cache {
        Some((cache, layer)) => {
            let h = tape.value(x).cols();
            if cache.hidden() != h {
                return Err(Error::Cache(format!(
                    "cache hidden size {} does not match input width {}",
                    cache.hidden(),
                    h
                )));
            }
            let prefix = cache.prefix(layer);
            let o = tape.attention(q, k, v, heads, segments, causal, Some(prefix))?;
            let (kt, vt) = (tape.value(k).clone(), tape.value(v).clone());
            cache.append(layer, &kt, &vt);
            o
        }
        None => tape.attention(q, k, v, heads, segments, causal, None)?,
    };
    p.out.forward(tape, store, o)
}

pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    bp: &BlockParams,
    x: Var,
    layer: usize,
    pass: &mut StackPass<'_, '_>,
) -> Result<Var> {
    let a = bp.ln1.forward(tape, store, x)?;
    let cache = pass.cache.as_deref_mut().map(|c| (c, layer));
    let mut a = causal_self_attention(
        tape,
        store,
        &bp.attn,
        a,
        pass.heads,
        pass.segments.clone(),
        pass.causal,
        cache,
    )?;
    if let Some((p, draw)) = pass.dropout.as_mut() {
        a = dropout(tape, a, *p, *draw)?;
    }
    let x = tape.add(x, a)?;
    let m = bp.ln2.forward(tape, store, x)?;
    let m = bp.fc1.forward(tape, store, m)?;
    let m = tape.gelu(m);
    let mut m = bp.fc2.forward(tape, store, m)?;
    if let Some((p, draw)) = pass.dropout.as_mut() {
        m = dropout(tape, m, *p, *draw)?;
    }
    tape.add(x, m)
}

pub fn stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    mut x: Var,
    pass: &mut StackPass<'_, '_>,
) -> Result<Var> {
    if let Some(c) = pass.cache.as_deref() {
        if c.num_layers() != blocks.len() {
            return Err(Error::Cache(format!(
                "cache has {} layers, model has {}",
                c.num_layers(),
                blocks.len()
            )));
        }
    }
    for (i, bp) in blocks.iter().enumerate() {
        x = block_forward(tape, store, bp, x, i, pass)?;
    }
    Ok(x)
}
