//! Layer-adaptive prompt module: the per-λ networks that turn the input
//! image (encoder side) or the decoded latent (decoder side) into one
//! prompt grid per transformer layer.
//!
//! Encoder side: a small convolutional generator maps the image to a
//! one-channel map at half resolution; each stage applies a stride-2 conv
//! that re-channels it to the stage width at half the stage's token
//! resolution. Decoder side: one 3×3 conv on `ŷ`, then a stride-2 conv for
//! stage 1 and stride-2 deconvs for later stages. Within a stage, layer `l`
//! receives the stage prompt max-pooled (3×3, stride 1) `l` times.

use crate::backbone::layer_names;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, Bound, ParamStore};
use crate::tensor::{BatchStats, Real, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.01;
const EPG_BLOCKS: usize = 2;

/// Whether the generator's batch norms use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics of one generator norm layer.
pub struct NormStats<F> {
    pub name: String,
    pub stats: BatchStats<F>,
    /// Values per channel the statistics were taken over.
    pub samples: usize,
}

/// Prompt grids in token layout `[B, h/2, w/2, C]`, one per transformer
/// layer in execution order.
pub struct PromptGrids<'t, F: Real> {
    pub encoder: Vec<Var<'t, F>>,
    pub decoder: Vec<Var<'t, F>>,
}

fn conv_param<F: Real>(
    s: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    zero: bool,
) {
    let w = format!("{name}.weight");
    let t = if zero {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        lecun_uniform(seed, &w, &[cout, cin, k, k], cin * k * k)
    };
    s.insert(w, t);
    s.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn deconv_param<F: Real>(s: &mut ParamStore<F>, seed: u64, name: &str, cin: usize, cout: usize) {
    let w = format!("{name}.weight");
    s.insert(w.clone(), lecun_uniform(seed, &w, &[cin, cout, 2, 2], cin));
    s.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// A fresh prompt set. The generators' output layers start at zero, so
/// every prompt grid is exactly zero before tuning.
pub fn init_prompt_set<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let e = cfg.epg_channels;
    for i in 0..EPG_BLOCKS {
        let name = format!("epg.b{i}");
        conv_param(
            &mut s,
            seed,
            &format!("{name}.conv"),
            e,
            if i == 0 { 3 } else { e },
            3,
            false,
        );
        s.insert(format!("{name}.bn.gamma"), Tensor::full(&[e], F::one()));
        s.insert(format!("{name}.bn.beta"), Tensor::zeros(&[e]));
        s.insert_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[e]));
        s.insert_buffer(
            format!("{name}.bn.running_var"),
            Tensor::full(&[e], F::one()),
        );
    }
    deconv_param(&mut s, seed, "epg.up", e, e);
    conv_param(&mut s, seed, "epg.proj", 1, e, 1, true);
    let w = &cfg.widths;
    for i in 0..cfg.stages() {
        let cin = if i == 0 { 1 } else { w[i - 1] };
        conv_param(
            &mut s,
            seed,
            &format!("enc_prompt.s{}", i + 1),
            w[i],
            cin,
            3,
            false,
        );
    }
    let m = cfg.latent_channels;
    conv_param(&mut s, seed, "dpg", m, m, 3, true);
    let dw = cfg.decoder_widths();
    conv_param(&mut s, seed, "dec_prompt.s1", dw[0], m, 3, false);
    for i in 1..cfg.stages() {
        deconv_param(
            &mut s,
            seed,
            &format!("dec_prompt.s{}", i + 1),
            dw[i - 1],
            dw[i],
        );
    }
    Ok(s)
}

fn conv<'t, F: Real>(
    b: &Bound<'t, F>,
    name: &str,
    x: &Var<'t, F>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, F>> {
    x.conv2d(
        b.get(&format!("{name}.weight"))?,
        Some(b.get(&format!("{name}.bias"))?),
        stride,
        pad,
    )
}

fn deconv<'t, F: Real>(b: &Bound<'t, F>, name: &str, x: &Var<'t, F>) -> Result<Var<'t, F>> {
    x.deconv2d(
        b.get(&format!("{name}.weight"))?,
        Some(b.get(&format!("{name}.bias"))?),
        2,
        0,
    )
}

fn batch_norm<'t, F: Real>(
    b: &Bound<'t, F>,
    name: &str,
    x: &Var<'t, F>,
    mode: NormMode,
    stats: &mut Vec<NormStats<F>>,
) -> Result<Var<'t, F>> {
    let gamma = b.get(&format!("{name}.gamma"))?;
    let beta = b.get(&format!("{name}.beta"))?;
    match mode {
        NormMode::Train => {
            let (y, s) = x.batch_norm_train(gamma, beta, BN_EPS)?;
            let sh = x.shape();
            stats.push(NormStats {
                name: name.to_string(),
                stats: s,
                samples: sh[0] * sh[2] * sh[3],
            });
            Ok(y)
        }
        NormMode::Eval => {
            let tape = x.tape();
            let mean = b.get(&format!("{name}.running_mean"))?;
            let var = b.get(&format!("{name}.running_var"))?;
            let neg_mean = tape.constant(Tensor::from_fn(mean.shape(), |i| -mean.data()[i]));
            let inv_std = tape.constant(Tensor::from_fn(var.shape(), |i| {
                F::one() / (var.data()[i] + F::c(BN_EPS)).sqrt()
            }));
            x.bias_add(&neg_mean, 1)?
                .scale_mul(&inv_std, 1)?
                .scale_mul(gamma, 1)?
                .bias_add(beta, 1)
        }
    }
}

/// Encoder prompt generator: `[B, 3, H, W]` → `[B, 1, H/2, W/2]`.
/// In [`NormMode::Train`] the batch statistics of every norm layer are
/// appended to `stats` for [`update_running_stats`].
pub fn epg_forward<'t, F: Real>(
    b: &Bound<'t, F>,
    x: &Var<'t, F>,
    mode: NormMode,
    stats: &mut Vec<NormStats<F>>,
) -> Result<Var<'t, F>> {
    let slope = F::c(LEAKY_SLOPE);
    let mut h = x.clone();
    for i in 0..EPG_BLOCKS {
        let name = format!("epg.b{i}");
        h = conv(b, &format!("{name}.conv"), &h, 1, 1)?;
        h = batch_norm(b, &format!("{name}.bn"), &h, mode, stats)?.leaky_relu(slope);
        h = h.maxpool2d(2, 2, 0)?;
    }
    let h = deconv(b, "epg.up", &h)?.leaky_relu(slope);
    conv(b, "epg.proj", &h, 1, 0)
}

/// Decoder prompt generator: a channel-preserving 3×3 conv on `ŷ`.
pub fn dpg_forward<'t, F: Real>(b: &Bound<'t, F>, y_hat: &Var<'t, F>) -> Result<Var<'t, F>> {
    conv(b, "dpg", y_hat, 1, 1)
}

/// Per-layer variants of a stage prompt `[B, C, h, w]`: the first layer gets
/// it unchanged, each later layer the previous one max-pooled with a
/// shape-preserving 3×3 window. Returned in token layout.
pub fn layer_adapt<'t, F: Real>(
    stage_prompt: &Var<'t, F>,
    depth: usize,
) -> Result<Vec<Var<'t, F>>> {
    let mut out = Vec::with_capacity(depth);
    let mut p = stage_prompt.clone();
    for l in 0..depth {
        if l > 0 {
            p = p.maxpool2d(3, 1, 1)?;
        }
        out.push(p.permute(&[0, 2, 3, 1])?);
    }
    Ok(out)
}

/// Encoder stage prompts `p_1..p_S` (channel layout) from `p_{e,0}`.
pub fn encoder_stage_prompts<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    p0: &Var<'t, F>,
) -> Result<Vec<Var<'t, F>>> {
    let mut out: Vec<Var<'t, F>> = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        let prev = out.last().unwrap_or(p0);
        out.push(conv(b, &format!("enc_prompt.s{}", i + 1), prev, 2, 1)?);
    }
    Ok(out)
}

/// Decoder stage prompts from `p_{d,0}`.
pub fn decoder_stage_prompts<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    p0: &Var<'t, F>,
) -> Result<Vec<Var<'t, F>>> {
    let mut out = vec![conv(b, "dec_prompt.s1", p0, 2, 1)?];
    for i in 1..cfg.stages() {
        let next = deconv(b, &format!("dec_prompt.s{}", i + 1), &out[i - 1])?;
        out.push(next);
    }
    Ok(out)
}

fn expand<'t, F: Real>(stages: &[Var<'t, F>], depths: &[usize]) -> Result<Vec<Var<'t, F>>> {
    let mut grids = Vec::new();
    for (p, &d) in stages.iter().zip(depths) {
        grids.extend(layer_adapt(p, d)?);
    }
    Ok(grids)
}

/// Encoder-side grids for every analysis layer.
pub fn encoder_prompts<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    x: &Var<'t, F>,
    mode: NormMode,
    stats: &mut Vec<NormStats<F>>,
) -> Result<Vec<Var<'t, F>>> {
    let p0 = epg_forward(b, x, mode, stats)?;
    expand(&encoder_stage_prompts(cfg, b, &p0)?, &cfg.depths)
}

/// Decoder-side grids for every synthesis layer.
pub fn decoder_prompts<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    y_hat: &Var<'t, F>,
) -> Result<Vec<Var<'t, F>>> {
    let p0 = dpg_forward(b, y_hat)?;
    expand(&decoder_stage_prompts(cfg, b, &p0)?, &cfg.decoder_depths())
}

/// Folds batch statistics into the running buffers (unbiased variance).
pub fn update_running_stats<F: Real>(
    store: &mut ParamStore<F>,
    stats: &[NormStats<F>],
) -> Result<()> {
    let m = F::c(BN_MOMENTUM);
    for s in stats {
        let n = s.samples as f64;
        let unbias = F::c(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let rm = store.get_mut(&format!("{}.running_mean", s.name))?;
        for (r, &v) in rm.data_mut().iter_mut().zip(&s.stats.mean) {
            *r = (F::one() - m) * *r + m * v;
        }
        let rv = store.get_mut(&format!("{}.running_var", s.name))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&s.stats.var) {
            *r = (F::one() - m) * *r + m * v * unbias;
        }
    }
    Ok(())
}

/// Names of the transformer layers a prompt set feeds.
pub fn prompted_layers(cfg: &ModelConfig) -> Vec<String> {
    let enc = layer_names(&cfg.depths, "enc");
    let dec = layer_names(&cfg.decoder_depths(), "dec");
    enc.into_iter().chain(dec).map(|(_, _, n)| n).collect()
}

/// Checks that `grids` has one correctly sized grid per layer for token
/// grids starting at `first` (extent of stage 1) and scaling by `2^±1`.
pub fn check_grids<F: Real>(
    grids: &[Var<'_, F>],
    depths: &[usize],
    widths: &[usize],
    first: (usize, usize),
    downsampling: bool,
) -> Result<()> {
    let mut at = 0;
    let (mut h, mut w) = first;
    for (i, (&d, &c)) in depths.iter().zip(widths).enumerate() {
        if i > 0 {
            (h, w) = if downsampling {
                (h / 2, w / 2)
            } else {
                (h * 2, w * 2)
            };
        }
        for _ in 0..d {
            let g = grids
                .get(at)
                .ok_or_else(|| Error::Shape(format!("missing prompt for layer {at}")))?;
            let want = [g.shape()[0], h.div_ceil(2), w.div_ceil(2), c];
            if g.shape() != want {
                return Err(Error::Shape(format!(
                    "prompt {at} is {:?}, expected {want:?}",
                    g.shape()
                )));
            }
            at += 1;
        }
    }
    Ok(())
}
