//! WebAssembly bindings for the browser demo in `www/`.

pub mod ops;

use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn budget_info(grid: &str, rho: &str) -> Result<String, JsError> {
    js(ops::budget_info(grid, rho))
}

#[wasm_bindgen]
pub fn simulate(grid: &str, rho: &str, policy: &str, seed: u32) -> Result<String, JsError> {
    js(ops::simulate(grid, rho, policy, u64::from(seed)))
}

#[wasm_bindgen]
pub fn retained_map(grid: &str, rho: &str, policy: &str, seed: u32, line: u32) -> Result<String, JsError> {
    js(ops::retained_map(grid, rho, policy, u64::from(seed), line as usize))
}
