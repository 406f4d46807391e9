//! Pair encoder: turns the recent neighborhoods of `u` and `v` before `t`
//! into two vectors `z_src`, `z_dst`.
//!
//! Each neighbor entry becomes `[time encoding | projected co-occurrence
//! counts]`. Node and edge features are all zero in this setting, so their
//! projection collapses into the bias of the patch projection and is omitted.
//! Entries are grouped into patches, projected to the encoder width, passed
//! through a small bidirectional transformer, and mean-pooled per endpoint.

use rand::Rng;

use crate::config::{EncoderConfig, TimeConfig};
use crate::error::{Error, Result};
use crate::graph::{sample_recent_neighbors, NeighborSequence, NodeId, TemporalGraph};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{stack_forward, BlockParams, LayerNormParams, Linear, StackPass};

/// Harmonic time encoding `[cos(ω_0 δ), sin(ω_0 δ), cos(ω_1 δ), ...]` with
/// `ω_j = omega_max^(-2j/dims)`.
pub fn encode_time(delta: f64, dims: usize, omega_max: f64) -> Vec<f64> {
    assert!(dims % 2 == 0, "time encoding width must be even");
    let mut out = Vec::with_capacity(dims);
    for j in 0..dims / 2 {
        let w = frequency(j, dims, omega_max);
        out.push((w * delta).cos());
        out.push((w * delta).sin());
    }
    out
}

pub fn frequency(j: usize, dims: usize, omega_max: f64) -> f64 {
    omega_max.powf(-2.0 * j as f64 / dims as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeAugConfig {
    pub alpha: f64,
    pub shuffle: bool,
    pub beta_range: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl Default for TimeAugConfig {
    fn default() -> Self {
        TimeAugConfig::from(&TimeConfig::default())
    }
}

impl From<&TimeConfig> for TimeAugConfig {
    fn from(c: &TimeConfig) -> Self {
        TimeAugConfig {
            alpha: c.alpha,
            shuffle: c.shuffle,
            beta_range: (c.beta_range[0], c.beta_range[1]),
            gamma_range: (c.gamma_range[0], c.gamma_range[1]),
        }
    }
}

/// The per-sequence random affine pair `(β, γ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDraws {
    pub beta: f64,
    pub gamma: f64,
}

impl TimeDraws {
    pub const IDENTITY: TimeDraws = TimeDraws { beta: 1.0, gamma: 0.0 };
}

impl TimeAugConfig {
    /// Draws `(β, γ)` for one evolving sequence. With shuffling disabled the
    /// identity pair is returned and no randomness is consumed.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TimeDraws {
        if !self.shuffle {
            return TimeDraws::IDENTITY;
        }
        TimeDraws {
            beta: uniform(rng, self.beta_range),
            gamma: uniform(rng, self.gamma_range),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// `β · (α (anchor − raw) / anchor + γ)`.
pub fn augment_time(raw: f64, anchor: f64, cfg: &TimeAugConfig, draws: TimeDraws) -> Result<f64> {
    if anchor == 0.0 || !anchor.is_finite() {
        return Err(Error::Normalization(format!(
            "cannot normalize time {raw} against anchor {anchor}"
        )));
    }
    Ok(draws.beta * (cfg.alpha * (anchor - raw) / anchor + draws.gamma))
}

/// Occurrences of `w` in `n_u` and in `n_v`. Pads are never counted.
pub fn cooccurrence_feature(n_u: &NeighborSequence, n_v: &NeighborSequence, w: NodeId) -> (usize, usize) {
    let count = |s: &NeighborSequence| s.real().filter(|e| e.node == w).count();
    (count(n_u), count(n_v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEmbedding {
    pub z_src: Vec<f64>,
    pub z_dst: Vec<f64>,
}

/// One pair to encode, with the draws of the sequence it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairQuery {
    pub u: NodeId,
    pub v: NodeId,
    pub t: f64,
    pub draws: TimeDraws,
}

/// Per-entry constant inputs for a batch of pairs: `N·2k` rows, u-entries
/// then v-entries for each pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInputs {
    pub pairs: usize,
    pub time: Tensor,
    pub counts: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub count_proj: Linear,
    pub patch_proj: Linear,
    /// Per-slot embedding, shared by both halves of a pair. Keeps padded
    /// slots away from the all-zero row that would sit at LayerNorm's
    /// singular point.
    pub slot_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let entry = cfg.time_dims + cfg.count_dims;
        EncoderParams {
            cfg: cfg.clone(),
            count_proj: Linear::new(store, "encoder.count_proj", 2, cfg.count_dims, rng),
            patch_proj: Linear::new(store, "encoder.patch_proj", cfg.patch * entry, cfg.hidden, rng),
            slot_emb: store.add_xavier("encoder.slot_emb", cfg.k / cfg.patch, cfg.hidden, rng),
            blocks: (0..cfg.layers)
                .map(|i| BlockParams::new(store, &format!("encoder.block{i}"), cfg.hidden, rng))
                .collect(),
            ln_f: LayerNormParams::new(store, "encoder.ln_f", cfg.hidden),
        }
    }
}

/// Samples neighborhoods and computes the constant per-entry features.
pub fn encoder_inputs(
    g: &TemporalGraph,
    queries: &[PairQuery],
    cfg: &EncoderConfig,
    aug: &TimeAugConfig,
) -> Result<EncoderInputs> {
    let k = cfg.k;
    let td = cfg.time_dims;
    let rows = queries.len() * 2 * k;
    let mut time = Vec::with_capacity(rows * td);
    let mut counts = Vec::with_capacity(rows * 2);
    for q in queries {
        let nu = sample_recent_neighbors(g, q.u, q.t, k);
        let nv = sample_recent_neighbors(g, q.v, q.t, k);
        for (own, other) in [(&nu, &nv), (&nv, &nu)] {
            for e in &own.entries {
                if e.is_pad() {
                    time.extend(std::iter::repeat(0.0).take(td));
                    counts.extend([0.0, 0.0]);
                } else {
                    let d = augment_time(e.time, q.t, aug, q.draws)?;
                    time.extend(encode_time(d, td, cfg.omega_max));
                    let (a, b) = cooccurrence_feature(own, other, e.node);
                    counts.extend([a as f64, b as f64]);
                }
            }
        }
    }
    Ok(EncoderInputs {
        pairs: queries.len(),
        time: Tensor::matrix(rows, td, time)?,
        counts: Tensor::matrix(rows, 2, counts)?,
    })
}

/// Runs the encoder over a batch; returns a `2N×h` variable whose rows are
/// `z_src(0), z_dst(0), z_src(1), ...`.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    inputs: &EncoderInputs,
    dropout: Option<(f64, &mut dyn FnMut() -> f64)>,
) -> Result<Var> {
    let c = &p.cfg;
    let n = inputs.pairs;
    if n == 0 {
        return Err(Error::Shape("encoder batch is empty".into()));
    }
    let time = tape.constant(inputs.time.clone());
    let counts = tape.constant(inputs.counts.clone());
    let counts = p.count_proj.forward(tape, store, counts)?;
    let feats = tape.concat_cols(&[time, counts])?;
    let tokens_per_pair = 2 * c.k / c.patch;
    let width = c.patch * (c.time_dims + c.count_dims);
    let patches = tape.reshape(feats, vec![n * tokens_per_pair, width])?;
    let x = p.patch_proj.forward(tape, store, patches)?;
    let half = tokens_per_pair / 2;
    let table = tape.param(store, p.slot_emb);
    let slots = tape.gather_rows(table, (0..2 * n * half).map(|r| r % half).collect())?;
    let x = tape.add(x, slots)?;
    let mut pass = StackPass {
        heads: c.heads,
        segments: (0..n).map(|i| (i * tokens_per_pair, tokens_per_pair)).collect(),
        causal: false,
        cache: None,
        dropout,
    };
    let x = stack_forward(tape, store, &p.blocks, x, &mut pass)?;
    let x = p.ln_f.forward(tape, store, x)?;
    let pools = (0..2 * n).map(|j| (j * half, half)).collect();
    tape.segment_mean(x, pools)
}

/// Encodes a single pair against `g` at time `t`.
#[allow(clippy::too_many_arguments)]
pub fn encode_pair(
    g: &TemporalGraph,
    u: NodeId,
    v: NodeId,
    t: f64,
    store: &ParamStore,
    p: &EncoderParams,
    aug: &TimeAugConfig,
    draws: TimeDraws,
) -> Result<PairEmbedding> {
    if t <= 0.0 {
        return Err(Error::Normalization(format!("pair time must be positive, got {t}")));
    }
    let inputs = encoder_inputs(g, &[PairQuery { u, v, t, draws }], &p.cfg, aug)?;
    let mut tape = Tape::new();
    let z = encode_batch(&mut tape, store, p, &inputs, None)?;
    let z = tape.value(z);
    Ok(PairEmbedding {
        z_src: z.row(0).to_vec(),
        z_dst: z.row(1).to_vec(),
    })
}
