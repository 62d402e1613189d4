//! Python bindings: config hashing, schedules, style records and the
//! closed-form image operations.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use textinv::codec::PixelImage;
use textinv::config::RunConfig;
use textinv::diffusion::{NoiseSchedule, SigmaMode};
use textinv::persist;
use textinv::synthesis;

fn to_py(e: textinv::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Canonical text of the default config.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().canonical()
}

/// Config hash of `text` after applying `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (text=None, overrides=Vec::new()))]
fn config_hash(text: Option<&str>, overrides: Vec<String>) -> PyResult<String> {
    let mut cfg = match text {
        Some(t) => RunConfig::parse(t).map_err(to_py)?,
        None => RunConfig::default(),
    };
    for o in &overrides {
        cfg.apply_override(o).map_err(to_py)?;
    }
    Ok(cfg.hash())
}

/// Cumulative signal fractions of a linear beta schedule, indexed 1..=steps.
#[pyfunction]
fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Vec<f64>> {
    let s = NoiseSchedule::linear(steps, beta_start, beta_end, SigmaMode::Beta).map_err(to_py)?;
    Ok(s.alpha_bars().to_vec())
}

/// Reads a style record: (embedding, template, config_hash, seed, steps).
#[pyfunction]
#[pyo3(signature = (path, expected_hash=None, strict=false))]
fn load_style(
    path: PathBuf,
    expected_hash: Option<&str>,
    strict: bool,
) -> PyResult<(Vec<f64>, String, String, u64, u64)> {
    let (r, _) = persist::load_style(&path, expected_hash, strict).map_err(to_py)?;
    let v = r.embedding.to_f32_vec().map_err(to_py)?;
    Ok((
        v.into_iter().map(f64::from).collect(),
        r.template,
        r.config_hash,
        r.seed,
        r.steps,
    ))
}

/// Reads a PNG as a flat channel-major list plus (height, width) and the
/// embedded config hash.
#[pyfunction]
fn load_png(path: PathBuf) -> PyResult<(Vec<f64>, (usize, usize), Option<String>)> {
    let (img, hash) = persist::load_png(&path).map_err(to_py)?;
    Ok((img.to_vec(), (img.height(), img.width()), hash))
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<PixelImage> {
    PixelImage::from_vec_clipped(data, height, width).map_err(to_py)
}

/// Per-channel moment matching of `x` to `target` before clipping. Both are
/// flat channel-major RGB lists of the given size.
#[pyfunction]
fn tone_transfer(x: Vec<f64>, target: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    let out =
        synthesis::tone_transfer_unclipped(&image(x, height, width)?, &image(target, height, width)?).map_err(to_py)?;
    out.flatten_all()
        .and_then(|t| t.to_dtype(candle_core::DType::F64))
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(|e| to_py(e.into()))
}

#[pymodule]
fn textinv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(load_style, m)?)?;
    m.add_function(wrap_pyfunction!(load_png, m)?)?;
    m.add_function(wrap_pyfunction!(tone_transfer, m)?)?;
    Ok(())
}
