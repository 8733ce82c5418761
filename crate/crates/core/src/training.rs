//! Rate-distortion objectives, the Adam optimizer and the two training
//! stages: backbone pretraining at `λ0`, then prompt tuning per `λ` with the
//! backbone frozen.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PromptMode;
use crate::codec::{forward, Forward, PromptBinding};
use crate::config::{ModelConfig, TrainConfig};
use crate::entropy::Quantizer;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::lpm::{update_running_stats, NormMode};
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Scale of the distortion term: MSE is measured on `[0, 1]` pixels, the
/// λ values are calibrated for 8-bit pixel MSE.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

/// `R + λ·255²·D` with `R` in bits per pixel and `D` the mean squared error.
pub struct RdLoss<'t, F: Real> {
    pub loss: Var<'t, F>,
    pub bpp: Var<'t, F>,
    pub mse: Var<'t, F>,
}

pub fn rd_loss<'t, F: Real>(
    fwd: &Forward<'t, F>,
    x: &Var<'t, F>,
    lambda: f64,
) -> Result<RdLoss<'t, F>> {
    let s = x.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let (yb, zb) = fwd.rate_bits();
    let bpp = yb.add(&zb)?.mul_scalar(F::c(1.0 / pixels));
    let mse = fwd.x_hat.sub(x)?.square().mean();
    let loss = bpp.add(&mse.mul_scalar(F::c(lambda * DISTORTION_SCALE)))?;
    Ok(RdLoss { loss, bpp, mse })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(train: &TrainConfig, lr: f64) -> Self {
        Self::new(lr, train.beta1, train.beta2, train.eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. A frozen store is never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, Tensor<F>>,
    ) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Invalid(
                "optimizer step on a frozen parameter store".into(),
            ));
        }
        for (name, g) in grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::c(self.lr * c2.sqrt() / c1);
        let eps = F::c(self.eps * c2.sqrt());
        for (name, p) in store.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.numel()]);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    /// `None` during backbone pretraining.
    pub lambda_id: Option<u8>,
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "stage,lambda_id,step,loss,bpp,mse,psnr";

    pub fn psnr(&self) -> f64 {
        crate::metrics::psnr_from_mse(self.mse)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.8},{:.4}",
            self.stage,
            self.lambda_id.map_or(String::new(), |l| l.to_string()),
            self.step,
            self.loss,
            self.bpp,
            self.mse,
            self.psnr()
        )
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn noise_rng(seed: u64, stage: u8, lambda_id: Option<u8>) -> ChaCha8Rng {
    let tag = ((stage as u64) << 8) | lambda_id.map_or(0xFF, |l| l as u64);
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0xd134_2543_de82_ef95))
}

/// Stage 1: trains every backbone tensor at `λ0` without prompts. `log`
/// sees every step's numbers and the updated store.
pub fn train_backbone<F: Real>(
    cfg: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    store: &mut ParamStore<F>,
    steps: usize,
    mut log: impl FnMut(&StepLog, &ParamStore<F>),
) -> Result<()> {
    store.unfreeze();
    let mut opt = Adam::from_config(train, train.lr);
    let mut noise = Quantizer::Noise(noise_rng(train.seed, 1, None));
    let mut batches = data.batches::<F>(train.crop, train.batch_size, train.seed);
    for step in 0..steps {
        let batch = batches.next().expect("endless batches");
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(batch.images);
        let fwd = forward(cfg, &b, None, &x, &mut noise)?;
        let rd = rd_loss(&fwd, &x, train.lambda0)?;
        let entry = StepLog {
            stage: 1,
            lambda_id: None,
            step,
            loss: rd.loss.item().f64(),
            bpp: rd.bpp.item().f64(),
            mse: rd.mse.item().f64(),
        };
        check_finite(entry.loss, "stage-1 loss")?;
        tape.backward(&rd.loss)?;
        let grads = b.grads(&tape);
        drop(fwd);
        opt.step(store, &grads)?;
        log(&entry, store);
    }
    Ok(())
}

/// Stage 2: trains one prompt set against the frozen backbone.
#[allow(clippy::too_many_arguments)]
pub fn tune_prompt_set<F: Real>(
    cfg: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    backbone: &ParamStore<F>,
    prompts: &mut ParamStore<F>,
    lambda_id: u8,
    lambda: f64,
    steps: usize,
    mut log: impl FnMut(&StepLog, &ParamStore<F>),
) -> Result<()> {
    let mut frozen = backbone.clone();
    frozen.freeze();
    prompts.unfreeze();
    let mut opt = Adam::from_config(train, train.stage2_lr());
    let mut noise = Quantizer::Noise(noise_rng(train.seed, 2, Some(lambda_id)));
    let seed = train.seed ^ (lambda_id as u64 + 1);
    let mut batches = data.batches::<F>(train.crop, train.batch_size, seed);
    for step in 0..steps {
        let batch = batches.next().expect("endless batches");
        let tape = Tape::new();
        let b = frozen.bind(&tape);
        let p = prompts.bind(&tape);
        let x = tape.constant(batch.images);
        let fwd = forward(
            cfg,
            &b,
            Some(PromptBinding {
                params: &p,
                mode: PromptMode::Active,
                norm: NormMode::Train,
            }),
            &x,
            &mut noise,
        )?;
        let rd = rd_loss(&fwd, &x, lambda)?;
        let entry = StepLog {
            stage: 2,
            lambda_id: Some(lambda_id),
            step,
            loss: rd.loss.item().f64(),
            bpp: rd.bpp.item().f64(),
            mse: rd.mse.item().f64(),
        };
        check_finite(entry.loss, "stage-2 loss")?;
        tape.backward(&rd.loss)?;
        let grads = p.grads(&tape);
        update_running_stats(prompts, &fwd.norm_stats)?;
        drop(fwd);
        opt.step(prompts, &grads)?;
        log(&entry, prompts);
    }
    Ok(())
}
