//! Quantization, likelihood models, rate estimation and the range coder.
//!
//! The hyperlatent `ẑ` is modeled by a per-channel learned monotone CDF; the
//! latent `ŷ` by a Gaussian whose mean and scale come from the hyper-decoder.
//! Both are coded with 16-bit integer CDF tables over the symbol support
//! `[-128, 127]`.

mod factorized;
mod gaussian;
mod range;
mod table;

pub use factorized::{
    factorized_likelihood, factorized_logits, init_factorized, FactorizedDensity,
};
pub use gaussian::{
    gaussian_likelihood, gaussian_pmf, ScaleTable, SCALE_BUCKETS, SIGMA_MAX, SIGMA_MIN,
};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};
pub use table::{CdfTable, PRECISION_BITS, TOTAL_FREQ};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Var};

pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;
pub const ALPHABET: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

/// Smallest likelihood the rate estimator charges for, matching the coder's
/// minimum symbol mass.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / TOTAL_FREQ as f64;

/// Quantization mode.
pub enum Quantizer {
    /// Additive uniform noise in `[-0.5, 0.5)` (training).
    Noise(ChaCha8Rng),
    /// Nearest integer, ties away from zero, clamped to the symbol support.
    Round,
}

impl Quantizer {
    pub fn is_round(&self) -> bool {
        matches!(self, Quantizer::Round)
    }

    /// Quantizes `v` around `center` (the predicted mean, or zero).
    /// The gradient with respect to `v` is the identity in both modes.
    pub fn apply<'t, F: Real>(
        &mut self,
        v: &Var<'t, F>,
        center: Option<&Var<'t, F>>,
    ) -> crate::Result<Var<'t, F>> {
        let values: Vec<F> = match self {
            Quantizer::Noise(rng) => v
                .data()
                .iter()
                .map(|&x| x + F::c(rng.random_range(-0.5..0.5)))
                .collect(),
            Quantizer::Round => {
                let c = center.map(|c| c.data());
                v.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let m = c.map_or(F::zero(), |c| c[i]);
                        dequantize(round_symbol((x - m).f64()), m)
                    })
                    .collect()
            }
        };
        v.straight_through(values)
    }
}

/// Nearest integer (ties away from zero) clamped to the symbol support.
pub fn round_symbol(v: f64) -> i32 {
    (v.round() as i64).clamp(SYMBOL_MIN as i64, SYMBOL_MAX as i64) as i32
}

/// `symbol + center`, evaluated exactly as the decoder does.
pub fn dequantize<F: Real>(symbol: i32, center: F) -> F {
    F::c(symbol as f64) + center
}

/// Total bits `Σ -log2(max(p, floor))` of a likelihood tensor.
pub fn rate_bits<'t, F: Real>(likelihood: &Var<'t, F>) -> Var<'t, F> {
    likelihood
        .clamp_min(F::c(LIKELIHOOD_FLOOR))
        .log()
        .sum()
        .mul_scalar(F::c(-std::f64::consts::LOG2_E))
}
