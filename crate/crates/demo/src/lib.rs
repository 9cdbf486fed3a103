//! Browser bindings for a few core operations. Every export has a plain
//! Rust twin returning `otseries::Result`, which is what the native tests
//! call; the `#[wasm_bindgen]` wrappers only turn errors into JS exceptions.

use otseries::hierarchy::{flat_cut, seriate, ward_linkage};
use otseries::preprocess::{embed_series, MobilityVariant, PointCloud};
use otseries::synthetic::{generate, SyntheticConfig, SyntheticData};
use otseries::transport::{distance_matrix, wasserstein_exact, wasserstein_sinkhorn, SinkhornParams, Solver};
use otseries::{Error, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn synth(n_cities: usize, n_days: usize, lag: usize, coupling: f64, seed: u64) -> Result<SyntheticData> {
    generate(&SyntheticConfig {
        n_cities,
        n_days,
        lag,
        coupling,
        seed,
        ..Default::default()
    })
}

/// Synthetic cities as JSON: `[{id, regime, mobility, cases}]`.
pub fn synthetic_cities(n_cities: usize, n_days: usize, lag: usize, coupling: f64, seed: u64) -> Result<String> {
    let data = synth(n_cities, n_days, lag, coupling, seed)?;
    let cities: Vec<_> = data
        .records
        .iter()
        .zip(&data.regimes)
        .map(|(r, g)| {
            json!({
                "id": r.city_id,
                "regime": g.as_str(),
                "mobility": r.mobility,
                "cases": r.new_cases,
            })
        })
        .collect();
    Ok(serde_json::to_string(&cities)?)
}

/// Rank embedding flattened as `x0,y0,z0,x1,...`.
pub fn embed(mobility: &[f64], cases: &[f64], variant: &str) -> Result<Vec<f64>> {
    let v: MobilityVariant = variant.parse()?;
    let cloud = embed_series("city", mobility, cases, v)?;
    Ok(cloud.points.iter().flatten().copied().collect())
}

fn unflatten(flat: &[f64]) -> Result<PointCloud> {
    if flat.is_empty() || !flat.len().is_multiple_of(3) {
        return Err(Error::Size(format!("{} coordinates do not form 3-d points", flat.len())));
    }
    Ok(PointCloud::new("c", flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// Exact and entropic W2 between two flattened clouds, as JSON.
pub fn compare(a: &[f64], b: &[f64], epsilon: f64) -> Result<String> {
    let (a, b) = (unflatten(a)?, unflatten(b)?);
    let (exact, _) = wasserstein_exact(&a, &b, 2.0)?;
    let s = wasserstein_sinkhorn(&a, &b, 2.0, &SinkhornParams { epsilon, ..Default::default() })?;
    Ok(json!({
        "exact": exact,
        "sinkhorn": s.distance,
        "converged": s.converged,
        "iterations": s.iterations,
    })
    .to_string())
}

/// Embeds the synthetic cities, computes exact distances and cuts the Ward
/// tree into `k` clusters. Cities come back in seriation order.
pub fn cluster(
    n_cities: usize,
    n_days: usize,
    lag: usize,
    coupling: f64,
    seed: u64,
    variant: &str,
    k: usize,
) -> Result<String> {
    let v: MobilityVariant = variant.parse()?;
    let data = synth(n_cities, n_days, lag, coupling, seed)?;
    let clouds = data
        .records
        .iter()
        .map(|r| {
            let cases: Vec<f64> = r.new_cases.iter().map(|&c| c as f64).collect();
            embed_series(&r.city_id, &r.mobility, &cases, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = distance_matrix(&clouds, &Solver::Exact, 2.0)?.matrix;
    let dend = ward_linkage(&d)?;
    let labels = flat_cut(&dend, k)?;
    let order = seriate(&dend);
    let members = labels.members();
    let rows: Vec<_> = order
        .iter()
        .map(|&i| {
            json!({
                "id": data.records[i].city_id,
                "regime": data.regimes[i].as_str(),
                "cluster": labels.labels[i],
            })
        })
        .collect();
    Ok(json!({
        "cities": rows,
        "sizes": members.values().map(Vec::len).collect::<Vec<_>>(),
        "heights": dend.merges.iter().map(|m| m.height).collect::<Vec<_>>(),
        "newick": dend.to_newick(),
    })
    .to_string())
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = syntheticCities)]
pub fn synthetic_cities_js(n_cities: usize, n_days: usize, lag: usize, coupling: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(synthetic_cities(n_cities, n_days, lag, coupling, seed.into()))
}

#[wasm_bindgen(js_name = embed)]
pub fn embed_js(mobility: &[f64], cases: &[f64], variant: &str) -> std::result::Result<Vec<f64>, JsError> {
    js(embed(mobility, cases, variant))
}

#[wasm_bindgen(js_name = compare)]
pub fn compare_js(a: &[f64], b: &[f64], epsilon: f64) -> std::result::Result<String, JsError> {
    js(compare(a, b, epsilon))
}

#[wasm_bindgen(js_name = cluster)]
pub fn cluster_js(
    n_cities: usize,
    n_days: usize,
    lag: usize,
    coupling: f64,
    seed: u32,
    variant: &str,
    k: usize,
) -> std::result::Result<String, JsError> {
    js(cluster(n_cities, n_days, lag, coupling, seed.into(), variant, k))
}
