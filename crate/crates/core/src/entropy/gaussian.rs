use super::table::CdfTable;
use super::{ALPHABET, SYMBOL_MIN};
use crate::error::Result;
use crate::tensor::{normal_cdf, Real, Var};

/// Lower bound applied to predicted scales.
pub const SIGMA_MIN: f64 = 0.11;
/// Largest scale with its own coding table; wider predictions share it.
pub const SIGMA_MAX: f64 = 64.0;
pub const SCALE_BUCKETS: usize = 64;

/// Mass of the unit interval around `v` under `N(mu, sigma²)`, written in
/// the symmetric form `Φ((½-|v-μ|)/σ) - Φ((-½-|v-μ|)/σ)` which keeps
/// precision in the tails.
pub fn gaussian_likelihood<'t, F: Real>(
    v: &Var<'t, F>,
    mu: &Var<'t, F>,
    sigma: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let d = v.sub(mu)?.abs();
    let inv = sigma.recip();
    let upper = d.neg().add_scalar(F::c(0.5)).mul(&inv)?.normal_cdf();
    let lower = d.neg().add_scalar(F::c(-0.5)).mul(&inv)?.normal_cdf();
    upper.sub(&lower)
}

/// Scalar counterpart of [`gaussian_likelihood`].
pub fn gaussian_pmf(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma)
}

/// Coding tables for zero-mean residuals at log-spaced scales. Symbols are
/// `round(y - μ)` so only the scale selects a table.
#[derive(Clone, Debug)]
pub struct ScaleTable {
    scales: Vec<f64>,
    tables: Vec<CdfTable>,
}

impl Default for ScaleTable {
    fn default() -> Self {
        Self::new()
    }
}

impl ScaleTable {
    pub fn new() -> Self {
        let ratio = (SIGMA_MAX / SIGMA_MIN).ln() / (SCALE_BUCKETS - 1) as f64;
        let scales: Vec<f64> = (0..SCALE_BUCKETS)
            .map(|i| SIGMA_MIN * (ratio * i as f64).exp())
            .collect();
        let tables = scales
            .iter()
            .map(|&s| {
                let pmf: Vec<f64> = (0..ALPHABET)
                    .map(|i| gaussian_pmf((i as i32 + SYMBOL_MIN) as f64, 0.0, s))
                    .collect();
                CdfTable::from_pmf(&pmf)
            })
            .collect();
        Self { scales, tables }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Smallest bucket whose scale is at least `sigma`; coding with a
    /// slightly wide table costs little, a narrow one can cost a lot.
    pub fn bucket(&self, sigma: f64) -> usize {
        if !(sigma > SIGMA_MIN) {
            return 0;
        }
        let ratio = (SIGMA_MAX / SIGMA_MIN).ln() / (SCALE_BUCKETS - 1) as f64;
        let mut i = (((sigma / SIGMA_MIN).ln() / ratio).ceil() as usize).min(SCALE_BUCKETS - 1);
        // Guard against the log rounding one bucket too high.
        while i > 0 && self.scales[i - 1] >= sigma {
            i -= 1;
        }
        i
    }

    pub fn table(&self, bucket: usize) -> &CdfTable {
        &self.tables[bucket]
    }
}
