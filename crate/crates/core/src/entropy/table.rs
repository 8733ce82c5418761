use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

/// Integer cumulative frequency table; `cdf[0] = 0`, `cdf[n] = 2^16`, and
/// every symbol has frequency at least one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a real pmf: each symbol gets one count plus its share of the
    /// remaining `2^16 - n`, with leftover counts going to the largest
    /// fractional parts.
    pub fn from_pmf(pmf: &[f64]) -> Self {
        let n = pmf.len();
        assert!(n >= 1 && n < TOTAL_FREQ as usize, "alphabet of {n} symbols");
        let total: f64 = pmf.iter().filter(|p| p.is_finite() && **p > 0.0).sum();
        let budget = (TOTAL_FREQ as usize - n) as f64;
        let mut freq = vec![1u32; n];
        let mut frac = vec![0.0f64; n];
        if total > 0.0 {
            for (i, &p) in pmf.iter().enumerate() {
                let p = if p.is_finite() && p > 0.0 {
                    p / total
                } else {
                    0.0
                };
                let share = p * budget;
                let whole = share.floor();
                freq[i] += whole as u32;
                frac[i] = share - whole;
            }
        } else {
            frac.fill(1.0);
        }
        let assigned: u32 = freq.iter().sum();
        let mut leftover = TOTAL_FREQ - assigned;
        if leftover > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if leftover == 0 {
                    break;
                }
                freq[i] += 1;
                leftover -= 1;
            }
        }
        Self::from_freqs(&freq).expect("quantized frequencies are valid")
    }

    pub fn from_freqs(freq: &[u32]) -> Result<Self> {
        if freq.is_empty() || freq.contains(&0) {
            return Err(Error::Invalid(
                "every symbol needs a positive frequency".into(),
            ));
        }
        let mut cdf = Vec::with_capacity(freq.len() + 1);
        cdf.push(0u32);
        let mut acc = 0u32;
        for &f in freq {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::Invalid("frequency overflow".into()))?;
            cdf.push(acc);
        }
        if acc != TOTAL_FREQ {
            return Err(Error::Invalid(format!(
                "frequencies sum to {acc}, not {TOTAL_FREQ}"
            )));
        }
        Ok(Self { cdf })
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_pmf(&vec![1.0; n])
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cdf[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cdf[s + 1] - self.cdf[s]
    }

    pub fn probability(&self, s: usize) -> f64 {
        self.freq(s) as f64 / TOTAL_FREQ as f64
    }

    /// Ideal code length of `s` under this table.
    pub fn bits(&self, s: usize) -> f64 {
        -self.probability(s).log2()
    }

    /// Symbol whose interval contains `value < 2^16`.
    pub fn lookup(&self, value: u32) -> usize {
        self.cdf.partition_point(|&c| c <= value) - 1
    }
}
