//! Scalar-count accounting of a backbone and its prompt sets.

use std::fmt;

use crate::backbone::param_groups;
use crate::codec::PromptSet;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Per-component scalar counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub backbone: Vec<(&'static str, usize)>,
    /// `(lambda_id, encoder-side, decoder-side)` scalars of each prompt set.
    pub prompt_sets: Vec<(u8, usize, usize)>,
}

impl ParamReport {
    pub fn new<F: Real>(backbone: &ParamStore<F>, prompt_sets: &[&PromptSet<F>]) -> Self {
        let sets = prompt_sets
            .iter()
            .map(|p| {
                let enc = p.params.count_prefix("epg.") + p.params.count_prefix("enc_prompt.");
                let dec = p.params.count_prefix("dpg.") + p.params.count_prefix("dec_prompt.");
                (p.lambda_id, enc, dec)
            })
            .collect();
        Self {
            backbone: param_groups(backbone),
            prompt_sets: sets,
        }
    }

    pub fn backbone_total(&self) -> usize {
        self.backbone.iter().map(|(_, n)| n).sum()
    }

    /// Scalars of one prompt set over backbone scalars (all prompt sets of
    /// a model share one architecture).
    pub fn ratio(&self) -> Option<f64> {
        let &(_, e, d) = self.prompt_sets.first()?;
        Some((e + d) as f64 / self.backbone_total() as f64)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>12}", "component", "scalars")?;
        for (name, n) in &self.backbone {
            writeln!(f, "{name:<24}{n:>12}")?;
        }
        let total = self.backbone_total();
        writeln!(f, "{:<24}{total:>12}", "backbone")?;
        for &(id, e, d) in &self.prompt_sets {
            writeln!(f, "{:<24}{e:>12}", format!("promptset {id} encoder"))?;
            writeln!(f, "{:<24}{d:>12}", format!("promptset {id} decoder"))?;
            let pct = 100.0 * (e + d) as f64 / total as f64;
            writeln!(
                f,
                "{:<24}{:>12}  {pct:.1}% of backbone",
                format!("promptset {id}"),
                e + d
            )?;
        }
        Ok(())
    }
}
