//! Browser bindings: sample labelled sequences, exact label histograms and
//! noise-sensitivity curves. Every export returns a JSON string.

use pvr_core::noise::{log_uniform_grid, ns_curve, NsConfig};
use pvr_core::rng::RngStream;
use pvr_core::task::window_slots;
use pvr_core::taskgen::sample_example;
use pvr_core::{oracle, Aggregation, Result, TaskSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bound on Monte Carlo work per curve so the page stays responsive.
pub const MAX_NS_DRAWS: usize = 2_000_000;

#[derive(Debug, Serialize, PartialEq)]
pub struct SampleView {
    pub digits: Vec<u8>,
    pub pointer: u8,
    pub window: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct HistogramView {
    pub counts: Vec<u64>,
    pub total: u64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CurvePoint {
    pub delta: f64,
    pub mean: f64,
    pub stderr: f64,
}

fn spec_of(m: usize, agg: &str) -> Result<TaskSpec> {
    TaskSpec::new(m, agg.parse::<Aggregation>()?)
}

pub fn samples(m: usize, agg: &str, n: usize, seed: u64) -> Result<Vec<SampleView>> {
    let spec = spec_of(m, agg)?;
    (0..n.min(64) as u64)
        .map(|i| {
            let mut stream = RngStream::new(seed, i);
            let ex = sample_example(&mut stream, &spec)?;
            let pointer = ex.digits.pointer();
            Ok(SampleView {
                digits: ex.digits.digits().to_vec(),
                pointer,
                window: window_slots(pointer, m, 10)?.into_iter().map(|s| s + 1).collect(),
                label: ex.label,
            })
        })
        .collect()
}

pub fn histogram(m: usize, agg: &str) -> Result<HistogramView> {
    let counts = oracle::label_distribution(&spec_of(m, agg)?)?;
    Ok(HistogramView {
        total: counts.iter().sum(),
        counts,
    })
}

pub fn curve(agg: &str, m: usize, samples: usize, runs: usize, points: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    let spec = spec_of(m, agg)?;
    if samples.saturating_mul(runs).saturating_mul(points) > MAX_NS_DRAWS {
        return Err(pvr_core::Error::InvalidArgument(format!(
            "samples x runs x points exceeds {MAX_NS_DRAWS}"
        )));
    }
    let cfg = NsConfig {
        samples,
        runs,
        grid: log_uniform_grid(points, -7.0, -1.0),
        seed,
    };
    cfg.validate()?;
    let est = ns_curve(&spec, &cfg, 1)?;
    Ok(cfg
        .grid
        .iter()
        .zip(est)
        .map(|(&delta, e)| CurvePoint {
            delta,
            mean: e.mean,
            stderr: e.stderr,
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn sample_examples(m: usize, agg: &str, n: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_js(samples(m, agg, n, seed.into()))
}

#[wasm_bindgen]
pub fn label_histogram(m: usize, agg: &str) -> std::result::Result<String, JsError> {
    to_js(histogram(m, agg))
}

#[wasm_bindgen]
pub fn noise_curve(
    agg: &str,
    m: usize,
    samples: usize,
    runs: usize,
    points: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(curve(agg, m, samples, runs, points, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_match_reference_labels() {
        let rows = samples(2, "median", 20, 5).unwrap();
        assert_eq!(rows.len(), 20);
        for r in rows {
            let window: Vec<u8> = r.window.iter().map(|&s| r.digits[s]).collect();
            assert_eq!(r.window.len(), 3);
            assert_eq!(r.window[0], r.pointer as usize + 1);
            let mut sorted = window.clone();
            sorted.sort();
            assert_eq!(r.label, sorted[1]);
        }
    }

    #[test]
    fn sample_window_wraps() {
        let rows = samples(3, "max", 64, 1).unwrap();
        let r = rows.iter().find(|r| r.pointer == 9).expect("pointer 9 in 64 draws");
        assert_eq!(r.window, vec![10, 1, 2, 3]);
    }

    #[test]
    fn histogram_mod_sum_uniform() {
        let h = histogram(1, "mod_sum").unwrap();
        assert_eq!(h.total, 1000);
        assert!(h.counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn curve_rises_with_delta() {
        let pts = curve("mod_sum", 2, 2000, 2, 5, 0).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts[0].mean < pts[4].mean);
        assert!((pts[0].delta - (-7f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_error() {
        assert!(samples(10, "max", 1, 0).is_err());
        assert!(histogram(1, "mean").is_err());
        assert!(curve("max", 1, 1_000_000, 10, 50, 0).is_err());
    }
}
