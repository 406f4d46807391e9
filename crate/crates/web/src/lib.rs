//! Browser bindings. Each exported function has a plain counterpart that
//! returns JSON so the logic is testable without a JS host.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use linkgen::encoder::encode_time;
use linkgen::graph::{parse_csv, reconnection_stats};
use linkgen::synth::{generate, to_csv, GeneratorKind, GeneratorSpec};
use linkgen::{Error, Result, TemporalGraph};

#[derive(Debug, Serialize)]
pub struct StreamSummary {
    pub edges: usize,
    pub nodes: usize,
    pub possibility: f64,
    pub pearson: Option<f64>,
    /// `degree_hist[d]` is the number of active nodes with degree `d + 1`,
    /// with the last bucket absorbing the tail.
    pub degree_hist: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub fallbacks: usize,
    pub rule_events: usize,
    pub stats: StreamSummary,
    pub csv: String,
}

const HIST_BUCKETS: usize = 40;

fn summarize(g: &TemporalGraph) -> Result<StreamSummary> {
    let st = reconnection_stats(g)?;
    let mut hist = vec![0; HIST_BUCKETS];
    for n in 1..=g.node_count() {
        let d = g.degree(n as _);
        if d > 0 {
            hist[(d - 1).min(HIST_BUCKETS - 1)] += 1;
        }
    }
    Ok(StreamSummary {
        edges: g.num_edges(),
        nodes: g.active_nodes(),
        possibility: st.possibility,
        pearson: st.pearson,
        degree_hist: hist,
    })
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn generate_json(kind: &str, nodes: usize, edges: usize, p: f64, seed: u64) -> Result<String> {
    if nodes * edges > 50_000_000 {
        return Err(Error::Validation("stream too large for the demo".into()));
    }
    let spec = GeneratorSpec::new(kind.parse::<GeneratorKind>()?, nodes, edges, p, seed);
    let gen = generate(&spec)?;
    json(&GenSummary {
        fallbacks: gen.meta.fallbacks,
        rule_events: gen.meta.rule_events,
        stats: summarize(&gen.graph)?,
        csv: to_csv(&gen.graph),
    })
}

pub fn analyze_json(csv: &str) -> Result<String> {
    json(&summarize(&parse_csv(csv, 0)?)?)
}

/// Rows of `[delta, dim_0, dim_1, ...]` for `points` deltas evenly spaced
/// over `[0, max_delta]`.
pub fn time_curve(dims: usize, omega_max: f64, max_delta: f64, points: usize) -> Result<Vec<Vec<f64>>> {
    if dims == 0 || dims % 2 != 0 || dims > 64 {
        return Err(Error::Validation(format!("dims must be even and in 2..=64, got {dims}")));
    }
    if !(omega_max > 1.0) || !(max_delta > 0.0) || !(2..=2000).contains(&points) {
        return Err(Error::Validation("need omega_max > 1, max_delta > 0, 2 <= points <= 2000".into()));
    }
    Ok((0..points)
        .map(|i| {
            let delta = max_delta * i as f64 / (points - 1) as f64;
            let mut row = vec![delta];
            row.extend(encode_time(delta, dims, omega_max));
            row
        })
        .collect())
}

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&format!("{}: {e}", e.class()))
}

#[wasm_bindgen]
pub fn generate_stream(kind: &str, nodes: usize, edges: usize, p: f64, seed: u32) -> std::result::Result<String, JsValue> {
    generate_json(kind, nodes, edges, p, seed as u64).map_err(js_err)
}

#[wasm_bindgen]
pub fn analyze_stream(csv: &str) -> std::result::Result<String, JsValue> {
    analyze_json(csv).map_err(js_err)
}

#[wasm_bindgen]
pub fn time_encoding(dims: usize, omega_max: f64, max_delta: f64, points: usize) -> std::result::Result<String, JsValue> {
    time_curve(dims, omega_max, max_delta, points)
        .and_then(|rows| json(&rows))
        .map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analyze_counts_one_repeat() {
        let out = analyze_json("src,dst,t\n1,2,1\n1,2,2\n1,3,3\n").unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["edges"], 3);
        assert!((v["possibility"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // node 1 has degree 3, nodes 2 and 3 have degrees 2 and 1
        let h = v["degree_hist"].as_array().unwrap();
        assert_eq!((h[0].as_u64(), h[1].as_u64(), h[2].as_u64()), (Some(1), Some(1), Some(1)));
    }

    #[test]
    fn generated_csv_reanalyzes_identically() {
        let out = generate_json("triadic", 60, 400, 0.9, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let again: serde_json::Value = serde_json::from_str(&analyze_json(v["csv"].as_str().unwrap()).unwrap()).unwrap();
        assert_eq!(v["stats"], again);
        let total: u64 = v["stats"]["degree_hist"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
        assert_eq!(total, v["stats"]["nodes"].as_u64().unwrap());
    }

    #[test]
    fn time_curve_starts_at_unit_cosines() {
        let rows = time_curve(4, 100.0, 10.0, 5).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0], vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        // second frequency is omega_max^(-1/2) = 0.1
        let last = &rows[4];
        assert!((last[3] - (0.1f64 * 10.0).cos()).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(time_curve(3, 100.0, 1.0, 10).is_err());
        assert!(analyze_json("src,dst\n1,2\n").is_err());
        assert!(generate_json("square", 10, 10, 0.5, 0).is_err());
    }
}
