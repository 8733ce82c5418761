use super::table::CdfTable;
use super::{ALPHABET, SYMBOL_MIN};
use crate::error::Result;
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const INIT_SCALE: f64 = 10.0;

/// Per-channel learned density for the hyperlatent: a monotone scalar
/// network `ℝ → ℝ` whose sigmoid is a CDF.
pub struct FactorizedDensity;

impl FactorizedDensity {
    pub const LAYERS: usize = FILTERS.len() - 1;

    /// Integer coding tables, one per channel, over the symbol support.
    pub fn tables<F: Real>(
        store: &ParamStore<F>,
        prefix: &str,
        channels: usize,
    ) -> Result<Vec<CdfTable>> {
        let store: ParamStore<f64> = store.cast();
        let tape = Tape::<f64>::inference();
        let bound = store.bind(&tape);
        let n = ALPHABET;
        let z = Tensor::from_fn(&[channels, 1, n], |i| ((i % n) as i32 + SYMBOL_MIN) as f64);
        let z = tape.constant(z);
        let lik = channel_likelihood(&bound, prefix, &z)?;
        Ok(lik.data().chunks(n).map(CdfTable::from_pmf).collect())
    }
}

/// Adds `{prefix}.matrix{i}`, `.bias{i}` and `.factor{i}` for `channels`.
pub fn init_factorized<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
    seed: u64,
) {
    let scale = INIT_SCALE.powf(1.0 / FactorizedDensity::LAYERS as f64);
    for i in 0..FactorizedDensity::LAYERS {
        let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
        let init = (1.0 / scale / fout as f64).exp_m1().ln();
        store.insert(
            format!("{prefix}.matrix{i}"),
            Tensor::full(&[channels, fout, fin], F::c(init)),
        );
        let name = format!("{prefix}.bias{i}");
        store.insert(name.clone(), uniform(seed, &name, &[channels, fout], 0.5));
        if i + 1 < FactorizedDensity::LAYERS {
            store.insert(
                format!("{prefix}.factor{i}"),
                Tensor::zeros(&[channels, fout]),
            );
        }
    }
}

/// Logits of the per-channel CDF for `v` of shape `[C, 1, n]`.
pub fn factorized_logits<'t, F: Real>(
    bound: &Bound<'t, F>,
    prefix: &str,
    v: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let mut x = v.clone();
    for i in 0..FactorizedDensity::LAYERS {
        let m = bound.get(&format!("{prefix}.matrix{i}"))?.softplus();
        x = m.matmul(&x)?;
        x = x.bias_add(bound.get(&format!("{prefix}.bias{i}"))?, 0)?;
        if i + 1 < FactorizedDensity::LAYERS {
            let f = bound.get(&format!("{prefix}.factor{i}"))?.tanh();
            x = x.add(&x.tanh().scale_mul(&f, 0)?)?;
        }
    }
    Ok(x)
}

fn channel_likelihood<'t, F: Real>(
    bound: &Bound<'t, F>,
    prefix: &str,
    v: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let lower = factorized_logits(bound, prefix, &v.add_scalar(F::c(-0.5)))?;
    let upper = factorized_logits(bound, prefix, &v.add_scalar(F::c(0.5)))?;
    // Evaluate on the side of the median where sigmoids are small.
    let sign: Vec<F> = lower
        .data()
        .iter()
        .zip(upper.data())
        .map(|(&l, &u)| {
            if l + u > F::zero() {
                -F::one()
            } else {
                F::one()
            }
        })
        .collect();
    let sign = v.tape().constant(Tensor::new(lower.shape(), sign)?);
    let hi = upper.mul(&sign)?.sigmoid();
    let lo = lower.mul(&sign)?.sigmoid();
    Ok(hi.sub(&lo)?.abs())
}

/// Likelihood of every element of `z` (shape `[B, C, h, w]`).
pub fn factorized_likelihood<'t, F: Real>(
    bound: &Bound<'t, F>,
    prefix: &str,
    z: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let s = z.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let n = s[2..].iter().product::<usize>();
    let zc = z
        .reshape(&[b, c, n])?
        .permute(&[1, 0, 2])?
        .reshape(&[c, 1, b * n])?;
    channel_likelihood(bound, prefix, &zc)?
        .reshape(&[c, b, n])?
        .permute(&[1, 0, 2])?
        .reshape(&s)
}
