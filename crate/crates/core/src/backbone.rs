//! The frozen transforms: analysis, synthesis, hyper-analysis and
//! hyper-synthesis.
//!
//! Feature maps between convolutions are `[B, C, H, W]`; inside a
//! transformer block tokens are `[B, h, w, C]`. Prompt grids are passed in
//! token layout, one per transformer layer, in execution order.

use crate::attention::{windowed_attention, AttentionWeights, PromptMode, WindowGeometry};
use crate::config::ModelConfig;
use crate::entropy::{init_factorized, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, uniform, Bound, ParamStore};
use crate::tensor::{Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.01;
const REL_TABLE_INIT: f64 = 0.02;

/// Prompt grids for every transformer layer of one transform.
#[derive(Clone, Copy)]
pub struct Prompts<'a, 't, F: Real> {
    pub grids: &'a [Var<'t, F>],
    pub mode: PromptMode,
}

/// Attention probabilities of one transformer layer.
pub struct LayerTrace<'t, F: Real> {
    pub stage: usize,
    pub layer: usize,
    pub geometry: WindowGeometry,
    /// `[B * windows, heads, s², L]`.
    pub probs: Var<'t, F>,
}

/// Transformer layer name prefixes `"{side}.s{i}.l{l}"` in execution order.
pub fn layer_names(depths: &[usize], side: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for (i, &d) in depths.iter().enumerate() {
        for l in 0..d {
            out.push((i + 1, l, format!("{side}.s{}.l{l}", i + 1)));
        }
    }
    out
}

fn conv_param<F: Real>(
    s: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let w = format!("{name}.weight");
    s.insert(
        w.clone(),
        lecun_uniform(seed, &w, &[cout, cin, k, k], cin * k * k),
    );
    s.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn deconv_param<F: Real>(
    s: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) {
    let w = format!("{name}.weight");
    let taps = (k / stride).max(1);
    s.insert(
        w.clone(),
        lecun_uniform(seed, &w, &[cin, cout, k, k], cin * taps * taps),
    );
    s.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn linear_param<F: Real>(s: &mut ParamStore<F>, seed: u64, name: &str, out: usize, inp: usize) {
    let w = format!("{name}.weight");
    s.insert(w.clone(), lecun_uniform(seed, &w, &[out, inp], inp));
    s.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

fn stl_params<F: Real>(s: &mut ParamStore<F>, seed: u64, cfg: &ModelConfig, p: &str, c: usize) {
    for n in ["norm1", "norm2"] {
        s.insert(format!("{p}.{n}.gamma"), Tensor::full(&[c], F::one()));
        s.insert(format!("{p}.{n}.beta"), Tensor::zeros(&[c]));
    }
    linear_param(s, seed, &format!("{p}.attn.qkv"), 3 * c, c);
    linear_param(s, seed, &format!("{p}.attn.proj"), c, c);
    let t = format!("{p}.attn.rel_table");
    let side = 2 * cfg.window - 1;
    s.insert(
        t.clone(),
        uniform(seed, &t, &[side * side, cfg.heads(c)], REL_TABLE_INIT),
    );
    linear_param(s, seed, &format!("{p}.mlp.fc1"), cfg.mlp_ratio * c, c);
    linear_param(s, seed, &format!("{p}.mlp.fc2"), c, cfg.mlp_ratio * c);
}

/// Every backbone tensor, seeded by name so adding a tensor leaves the
/// others unchanged.
pub fn init_backbone<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let w = &cfg.widths;
    conv_param(&mut s, seed, "enc.fe", w[0], 3, 5);
    for (stage, _, p) in layer_names(&cfg.depths, "enc") {
        stl_params(&mut s, seed, cfg, &p, w[stage - 1]);
    }
    for i in 1..cfg.stages() {
        conv_param(&mut s, seed, &format!("enc.down{i}"), w[i], w[i - 1], 3);
    }
    let m = cfg.latent_channels;
    conv_param(&mut s, seed, "enc.out", m, w[cfg.stages() - 1], 3);

    let hc = cfg.hyper_channels;
    conv_param(&mut s, seed, "hyper_enc.conv0", hc, m, 3);
    for i in 1..=cfg.hyper_depth {
        conv_param(&mut s, seed, &format!("hyper_enc.conv{i}"), hc, hc, 3);
    }
    for i in 0..cfg.hyper_depth {
        deconv_param(&mut s, seed, &format!("hyper_dec.up{i}"), hc, hc, 4, 2);
    }
    conv_param(&mut s, seed, "hyper_dec.out", 2 * m, hc, 3);
    init_factorized(&mut s, "entropy.z", hc, seed);

    let dw = cfg.decoder_widths();
    conv_param(&mut s, seed, "dec.in", dw[0], m, 3);
    for (stage, _, p) in layer_names(&cfg.decoder_depths(), "dec") {
        stl_params(&mut s, seed, cfg, &p, dw[stage - 1]);
    }
    for i in 1..cfg.stages() {
        deconv_param(&mut s, seed, &format!("dec.up{i}"), dw[i - 1], dw[i], 4, 2);
    }
    deconv_param(&mut s, seed, "dec.fu", dw[cfg.stages() - 1], 3, 4, 2);
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
        1,
    )
}

fn linear<'t, F: Real>(b: &Bound<'t, F>, name: &str, x: &Var<'t, F>) -> Result<Var<'t, F>> {
    x.linear(
        b.get(&format!("{name}.weight"))?,
        Some(b.get(&format!("{name}.bias"))?),
    )
}

/// One transformer layer on `[B, h, w, C]` tokens.
pub fn stl_forward<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    prefix: &str,
    tokens: &Var<'t, F>,
    prompt: Option<(&Var<'t, F>, PromptMode)>,
    shifted: bool,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let c = *tokens.shape().last().unwrap_or(&0);
    let g = |n: &str| b.get(&format!("{prefix}.{n}"));
    let h = tokens.layer_norm(g("norm1.gamma")?, g("norm1.beta")?, LN_EPS)?;
    let weights = AttentionWeights {
        qkv_weight: g("attn.qkv.weight")?,
        qkv_bias: g("attn.qkv.bias")?,
        proj_weight: g("attn.proj.weight")?,
        proj_bias: g("attn.proj.bias")?,
        rel_table: g("attn.rel_table")?,
        heads: cfg.heads(c),
        window: cfg.window,
    };
    let attn = windowed_attention(&h, prompt, &weights, shifted)?;
    let x = tokens.add(&attn.tokens)?;
    let h = x.layer_norm(g("norm2.gamma")?, g("norm2.beta")?, LN_EPS)?;
    let h = linear(b, &format!("{prefix}.mlp.fc1"), &h)?.gelu();
    let h = linear(b, &format!("{prefix}.mlp.fc2"), &h)?;
    Ok((x.add(&h)?, attn.probs))
}

/// Runs the transformer layers of one stage on a `[B, C, h, w]` map.
#[allow(clippy::too_many_arguments)]
fn stage_forward<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    side: &str,
    stage: usize,
    depth: usize,
    x: &Var<'t, F>,
    prompts: Option<(&[Var<'t, F>], PromptMode)>,
    trace: &mut Vec<LayerTrace<'t, F>>,
) -> Result<Var<'t, F>> {
    let mut t = x.permute(&[0, 2, 3, 1])?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    for l in 0..depth {
        let shifted = l % 2 == 1;
        let prompt = prompts.map(|(g, mode)| (&g[l], mode));
        let (next, probs) = stl_forward(
            cfg,
            b,
            &format!("{side}.s{stage}.l{l}"),
            &t,
            prompt,
            shifted,
        )?;
        t = next;
        trace.push(LayerTrace {
            stage,
            layer: l,
            geometry: WindowGeometry::new(h, w, cfg.window, shifted)?,
            probs,
        });
    }
    t.permute(&[0, 3, 1, 2])
}

fn split_prompts<'a, 't, F: Real>(
    prompts: Option<Prompts<'a, 't, F>>,
    depths: &[usize],
) -> Result<Vec<Option<(&'a [Var<'t, F>], PromptMode)>>> {
    let total: usize = depths.iter().sum();
    let Some(p) = prompts else {
        return Ok(vec![None; depths.len()]);
    };
    if p.grids.len() != total {
        return Err(Error::Shape(format!(
            "{} prompt grids supplied for {total} transformer layers",
            p.grids.len()
        )));
    }
    let mut out = Vec::with_capacity(depths.len());
    let mut at = 0;
    for &d in depths {
        out.push(Some((&p.grids[at..at + d], p.mode)));
        at += d;
    }
    Ok(out)
}

/// `x` `[B, 3, H, W]` padded to the configured multiple → `y` `[B, M, H/16, W/16]`.
pub fn analysis<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    x: &Var<'t, F>,
    prompts: Option<Prompts<'_, 't, F>>,
) -> Result<(Var<'t, F>, Vec<LayerTrace<'t, F>>)> {
    match *x.shape() {
        [_, 3, h, w]
            if h % cfg.pad_multiple == 0 && w % cfg.pad_multiple == 0 && h > 0 && w > 0 => {}
        _ => {
            return Err(Error::Shape(format!(
                "analysis input {:?} is not [B, 3, H, W] padded to {}",
                x.shape(),
                cfg.pad_multiple
            )))
        }
    }
    let per_stage = split_prompts(prompts, &cfg.depths)?;
    let mut trace = Vec::new();
    let mut t = conv(b, "enc.fe", x, 2, 2)?;
    for (i, &depth) in cfg.depths.iter().enumerate() {
        if i > 0 {
            t = conv(b, &format!("enc.down{i}"), &t, 2, 1)?;
        }
        t = stage_forward(cfg, b, "enc", i + 1, depth, &t, per_stage[i], &mut trace)?;
    }
    Ok((conv(b, "enc.out", &t, 1, 1)?, trace))
}

/// `y` → `z` at a quarter of the latent extent per hyper level.
pub fn hyper_analysis<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    y: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let slope = F::c(LEAKY_SLOPE);
    let mut z = conv(b, "hyper_enc.conv0", y, 1, 1)?;
    for i in 1..=cfg.hyper_depth {
        z = conv(b, &format!("hyper_enc.conv{i}"), &z.leaky_relu(slope), 2, 1)?;
    }
    Ok(z)
}

/// `ẑ` → Gaussian mean and scale for every latent element.
pub fn hyper_synthesis<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    z_hat: &Var<'t, F>,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let slope = F::c(LEAKY_SLOPE);
    let mut h = z_hat.clone();
    for i in 0..cfg.hyper_depth {
        h = deconv(b, &format!("hyper_dec.up{i}"), &h)?.leaky_relu(slope);
    }
    let out = conv(b, "hyper_dec.out", &h, 1, 1)?;
    let m = cfg.latent_channels;
    let [mu, s]: [Var<'t, F>; 2] = out.split(1, &[m, m])?.try_into().unwrap();
    Ok((mu, s.softplus().clamp_min(F::c(SIGMA_MIN))))
}

/// `ŷ` → unclamped reconstruction `[B, 3, H, W]`.
pub fn synthesis<'t, F: Real>(
    cfg: &ModelConfig,
    b: &Bound<'t, F>,
    y_hat: &Var<'t, F>,
    prompts: Option<Prompts<'_, 't, F>>,
) -> Result<(Var<'t, F>, Vec<LayerTrace<'t, F>>)> {
    let depths = cfg.decoder_depths();
    let per_stage = split_prompts(prompts, &depths)?;
    let mut trace = Vec::new();
    let mut t = conv(b, "dec.in", y_hat, 1, 1)?;
    for (i, &depth) in depths.iter().enumerate() {
        if i > 0 {
            t = deconv(b, &format!("dec.up{i}"), &t)?;
        }
        t = stage_forward(cfg, b, "dec", i + 1, depth, &t, per_stage[i], &mut trace)?;
    }
    Ok((deconv(b, "dec.fu", &t)?, trace))
}

/// Scalar counts grouped by transform.
pub fn param_groups<F: Real>(store: &ParamStore<F>) -> Vec<(&'static str, usize)> {
    [
        ("analysis", "enc."),
        ("synthesis", "dec."),
        ("hyper_analysis", "hyper_enc."),
        ("hyper_synthesis", "hyper_dec."),
        ("hyperlatent_density", "entropy."),
    ]
    .into_iter()
    .map(|(label, prefix)| (label, store.count_prefix(prefix)))
    .collect()
}
