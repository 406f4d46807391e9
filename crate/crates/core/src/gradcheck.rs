//! Central-difference gradient checking against the tape's backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, DecoderConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{TemporalEdge, TemporalGraph};
use crate::model::{sample_context, ClgModel, EvolvingSequence};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const EPS: f64 = 1e-5;
/// Smallest denominator in the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `loss`. Central differences
/// carry round-off proportional to `|L|`, so coordinates whose true gradient
/// is (near) zero, such as attention key biases, are judged against the loss
/// scale instead of their own magnitude.
pub fn noise_floor(loss: f64) -> f64 {
    REL_FLOOR * loss.abs().max(1.0)
}

/// Compares tape gradients with central differences on up to `per_param`
/// random coordinates of every parameter. `store_of` exposes the parameters
/// inside `obj`; `loss` records a scalar loss on a fresh tape.
pub fn grad_check<T, S, L>(
    obj: &mut T,
    store_of: S,
    loss: L,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Fn(&mut T) -> &mut ParamStore,
    L: Fn(&T, &mut Tape) -> Result<Var>,
{
    let eval = |obj: &T| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(obj, &mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let l = loss(obj, &mut tape)?;
    let floor = noise_floor(tape.value(l).data()[0]);
    store_of(obj).zero_grad();
    tape.backward(l, store_of(obj))?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store_of(obj).ids().collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for id in ids {
        let n = store_of(obj).get(id).value.len();
        for i in sample(&mut rng, n, per_param.min(n)).into_vec() {
            let (orig, analytic) = {
                let p = store_of(obj).get(id);
                (p.value.data()[i], p.grad.data()[i])
            };
            store_of(obj).get_mut(id).value.data_mut()[i] = orig + EPS;
            let plus = eval(obj)?;
            store_of(obj).get_mut(id).value.data_mut()[i] = orig - EPS;
            let minus = eval(obj)?;
            store_of(obj).get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let e = rel_err(analytic, numeric, floor);
            if !e.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {}[{i}]", store_of(obj).get(id).name)));
            }
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]", store_of(obj).get(id).name);
            }
        }
    }
    Ok(report)
}

/// Configuration used for the end-to-end check: `k = 8`, `max_len = 8`,
/// encoder and decoder both `layers` deep and `hidden` wide.
pub fn check_config(hidden: usize, layers: usize) -> Config {
    let mut cfg = Config::default();
    cfg.encoder = EncoderConfig {
        k: 8,
        patch: 1,
        hidden,
        layers,
        heads: 2,
        time_dims: 8,
        count_dims: 8,
        omega_max: 100.0,
    };
    cfg.decoder = DecoderConfig {
        layers,
        heads: 2,
        hidden,
        max_len: 8,
    };
    cfg
}

fn random_graph(seed: u64, nodes: u32, edges: usize) -> TemporalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let list = (0..edges)
        .map(|i| {
            let u = rng.gen_range(1..nodes);
            let v = (u + rng.gen_range(1..nodes - 1) - 1) % (nodes - 1) + 1;
            TemporalEdge::new(u, v, 1.0 + i as f64)
        })
        .collect();
    TemporalGraph::from_edges(0, list, nodes as usize).expect("valid random graph")
}

/// Gradient check of the full encoder → decoder → head stack on two random
/// sequences of `max_len` triples.
pub fn model_grad_check(hidden: usize, layers: usize, per_param: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = check_config(hidden, layers);
    let mut model = ClgModel::new(cfg, seed)?;
    let g = random_graph(seed ^ 0x5eed, 12, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let aug = model.time_aug();
    let mut seqs = Vec::new();
    for _ in 0..2 {
        let draws = aug.draw(&mut rng);
        let ctx = sample_context(&g, f64::INFINITY, model.max_len(), &mut rng)?;
        seqs.push(EvolvingSequence::new(0, ctx, draws)?);
    }
    let labels: Vec<usize> = seqs
        .iter()
        .map(|s| s.labels())
        .collect::<Result<Vec<_>>>()?
        .concat();
    grad_check(
        &mut model,
        |m| &mut m.store,
        |m, tape| {
            let logits = m.forward_batch(tape, &g, &seqs, None)?;
            tape.cross_entropy(logits, &labels)
        },
        per_param,
        seed,
    )
}
