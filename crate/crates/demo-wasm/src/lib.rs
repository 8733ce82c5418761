//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The pure functions below do the work and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use lpmc::attention::{attention_mask, PromptMode, WindowGeometry, MASK_VALUE};
use lpmc::entropy::{range_decode, range_encode, ScaleTable, SYMBOL_MAX, SYMBOL_MIN};
use lpmc::metrics::{bd_rate, RdCurve};
use wasm_bindgen::prelude::*;

/// Window layout of one attention layer over an `h×w` token grid.
#[wasm_bindgen(getter_with_clone)]
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub size: usize,
    pub shift: usize,
    pub windows: usize,
    /// Window index of each grid cell, row-major.
    pub window_of: Vec<u32>,
    /// Window index of each prompt cell on the half-resolution grid.
    pub prompt_window_of: Vec<u32>,
}

fn window_index(geo: &WindowGeometry) -> Vec<u32> {
    let tokens = (geo.size * geo.size) as u32;
    let mut out = vec![0; geo.h * geo.w];
    for (dst, &src) in geo.partition_index(1, 1).iter().enumerate() {
        out[src as usize] = dst as u32 / tokens;
    }
    out
}

pub fn layout(h: usize, w: usize, d: usize, shifted: bool) -> lpmc::Result<WindowLayout> {
    let geo = WindowGeometry::new(h, w, d, shifted)?;
    Ok(WindowLayout {
        size: geo.size,
        shift: geo.shift,
        windows: geo.windows(),
        window_of: window_index(&geo),
        prompt_window_of: window_index(&geo.prompt()),
    })
}

/// Visibility of keys to queries inside one window: `s²` rows of
/// `s² + (s/2)²` entries, 1 where the key takes part in the softmax.
pub fn visibility(
    h: usize,
    w: usize,
    d: usize,
    shifted: bool,
    window: usize,
    masked: bool,
) -> lpmc::Result<Vec<u8>> {
    let geo = WindowGeometry::new(h, w, d, shifted)?;
    if window >= geo.windows() {
        return Err(lpmc::Error::Invalid(format!(
            "window {window} of {}",
            geo.windows()
        )));
    }
    let mode = if masked {
        PromptMode::Masked
    } else {
        PromptMode::Active
    };
    let mask = attention_mask(&geo, true, mode);
    let per = mask.len() / geo.windows();
    Ok(mask[window * per..(window + 1) * per]
        .iter()
        .map(|&m| u8::from(m != MASK_VALUE))
        .collect())
}

/// One range-coding run of integer residuals under a zero-mean Gaussian.
#[wasm_bindgen(getter_with_clone)]
#[derive(Clone, Debug, PartialEq)]
pub struct CodingRun {
    pub bucket: usize,
    /// Table scale actually used (the smallest bucket scale ≥ σ).
    pub scale: f64,
    pub bytes: Vec<u8>,
    pub ideal_bits: f64,
    pub round_trip: bool,
    /// Probability of each symbol in `[-128, 127]` under the chosen table.
    pub pmf: Vec<f64>,
}

pub fn scale_table() -> Vec<f64> {
    ScaleTable::new().scales().to_vec()
}

pub fn code(symbols: &[i32], sigma: f64) -> lpmc::Result<CodingRun> {
    if let Some(s) = symbols
        .iter()
        .find(|s| !(SYMBOL_MIN..=SYMBOL_MAX).contains(*s))
    {
        return Err(lpmc::Error::Invalid(format!(
            "symbol {s} outside [{SYMBOL_MIN}, {SYMBOL_MAX}]"
        )));
    }
    let scales = ScaleTable::new();
    let bucket = scales.bucket(sigma);
    let table = scales.table(bucket);
    let idx: Vec<usize> = symbols.iter().map(|&s| (s - SYMBOL_MIN) as usize).collect();
    let bytes = range_encode(&idx, |_| table);
    let round_trip = range_decode(&bytes, idx.len(), |_| table).is_ok_and(|d| d == idx);
    Ok(CodingRun {
        bucket,
        scale: scales.scales()[bucket],
        ideal_bits: idx.iter().map(|&s| table.bits(s)).sum(),
        bytes,
        round_trip,
        pmf: (0..table.symbols()).map(|s| table.probability(s)).collect(),
    })
}

/// Parses `rate,quality` lines; blank lines and `#` comments are skipped.
pub fn parse_curve(text: &str) -> lpmc::Result<RdCurve> {
    let mut points = Vec::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let mut fields = line.split([',', ' ', '\t']).filter(|f| !f.is_empty());
        let mut next = || -> lpmc::Result<f64> {
            fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| {
                lpmc::Error::Format(format!("expected `rate,quality`, got {line:?}"))
            })
        };
        points.push((next()?, next()?));
    }
    Ok(RdCurve::new(points))
}

pub fn bd_rate_text(test: &str, anchor: &str) -> lpmc::Result<f64> {
    bd_rate(&parse_curve(test)?, &parse_curve(anchor)?)
}

fn js(e: lpmc::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = windowLayout)]
pub fn window_layout_js(
    h: usize,
    w: usize,
    d: usize,
    shifted: bool,
) -> Result<WindowLayout, JsError> {
    layout(h, w, d, shifted).map_err(js)
}

#[wasm_bindgen(js_name = windowVisibility)]
pub fn visibility_js(
    h: usize,
    w: usize,
    d: usize,
    shifted: bool,
    window: usize,
    masked: bool,
) -> Result<Vec<u8>, JsError> {
    visibility(h, w, d, shifted, window, masked).map_err(js)
}

#[wasm_bindgen(js_name = scaleTable)]
pub fn scale_table_js() -> Vec<f64> {
    scale_table()
}

#[wasm_bindgen(js_name = rangeCode)]
pub fn code_js(symbols: Vec<i32>, sigma: f64) -> Result<CodingRun, JsError> {
    code(&symbols, sigma).map_err(js)
}

#[wasm_bindgen(js_name = bdRate)]
pub fn bd_rate_js(test: &str, anchor: &str) -> Result<f64, JsError> {
    bd_rate_text(test, anchor).map_err(js)
}
