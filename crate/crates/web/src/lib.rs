//! Browser bindings: a few cheap operations of the toolkit, no training.

use busemu::faults::{self, FaultParams, TelegraphParams, TelegraphState};
use busemu::plant::{self, FaultSchedule, PlantConfig};
use busemu::{eval, rng};
use wasm_bindgen::prelude::*;

fn js_err(e: busemu::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Samples `n` telegraph states at spacing `dt` (1 = fault, 0 = clear),
/// starting from the stationary distribution.
#[wasm_bindgen]
pub fn telegraph_path(onset_rate: f64, clear_rate: f64, dt: f64, n: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    let params = TelegraphParams::new(onset_rate, clear_rate).map_err(js_err)?;
    let mut r = rng::stream(seed, "web-telegraph", 0);
    let start = if rand::Rng::random::<f64>(&mut r) < params.stationary_fault() {
        TelegraphState::faulted()
    } else {
        TelegraphState::clear()
    };
    let path = faults::sample_path(&params, start, dt, n, &mut r).map_err(js_err)?;
    Ok(path.iter().map(|s| u8::from(s.is_fault())).collect())
}

/// Long-run fraction of time spent faulted.
#[wasm_bindgen]
pub fn stationary_fault(onset_rate: f64, clear_rate: f64) -> Result<f64, JsError> {
    Ok(TelegraphParams::new(onset_rate, clear_rate).map_err(js_err)?.stationary_fault())
}

/// Simulates the default machine under telegraph faults. The result is
/// channel-major: `[P..., Q..., V..., phi..., fault...]`, each `len` long.
#[wasm_bindgen]
pub fn simulate(duration: f64, resistance: f64, reactance: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let cfg = PlantConfig::default();
    let fault = FaultParams::new(resistance, reactance).map_err(js_err)?;
    let schedule = FaultSchedule::fixed(TelegraphParams::standard(), fault);
    let mut r = rng::stream(seed, "web-plant", 0);
    let series = plant::simulate(&cfg, &schedule, duration, &mut r).map_err(js_err)?;
    Ok(series.channels().iter().flat_map(|c| c.iter().copied()).collect())
}

/// Number of channels in a [`simulate`] result.
#[wasm_bindgen]
pub fn channel_count() -> usize {
    plant::CHANNELS.len()
}

/// Sample autocorrelation of `x` for lags `0..=max_lag`.
#[wasm_bindgen]
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>, JsError> {
    eval::autocorrelation(x, max_lag).map_err(js_err)
}
