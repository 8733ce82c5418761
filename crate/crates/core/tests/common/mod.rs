//! Shared test fixtures: finite-difference gradient checking and an
//! independent reference implementation of plain shifted-window attention.

#![allow(dead_code)]

pub mod suite;

use lpmc::attention::PromptMode;
use lpmc::backbone::{analysis, init_backbone, synthesis, Prompts};
use lpmc::config::ModelConfig;
use lpmc::entropy::round_symbol;
use lpmc::lpm::{decoder_prompts, encoder_prompts, init_prompt_set, NormMode};
use lpmc::params::{Bound, ParamStore};
use lpmc::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so gradients that vanish up to rounding do not divide by zero.
pub const FD_FLOOR: f64 = 1e-3;
/// Coordinates checked per input tensor when it has more elements.
pub const FD_SAMPLES: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller; only needs to be roughly Gaussian.
        let u: f64 = rng.random_range(1e-12..1.0);
        let v: f64 = rng.random_range(0.0..1.0);
        scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform magnitudes in `[lo, hi)` with random signs: keeps inputs away
/// from kinks and poles at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least `gap` apart in random order, so max-pooling
/// never meets a near tie under perturbation.
pub fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let center = n as f64 / 2.0;
    Tensor::from_fn(shape, |i| (order[i] as f64 - center) * gap)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= FD_SAMPLES {
        (0..n).collect()
    } else {
        (0..FD_SAMPLES).map(|_| rng.random_range(0..n)).collect()
    }
}

fn project(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks the reverse-mode gradient of `Σ r ⊙ f(inputs)` (random `r`) with
/// respect to every input against central differences. Returns the largest
/// relative error over the checked coordinates.
pub fn check_op(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> lpmc::Result<Var<'t, f64>>,
) -> f64 {
    let mut rng = rng(seed ^ 0x5eed);
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars).expect("op evaluates");
    let r = uniform(&mut rng, out.shape(), -1.0, 1.0);
    let loss = out.mul(&tape.constant(r.clone())).unwrap().sum();
    tape.backward(&loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::inference();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        project(f(&vars).expect("op evaluates").data(), r.data())
    };
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for k in sample_coords(&mut rng, inputs[i].numel()) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += FD_EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g.data()[k], numeric));
        }
    }
    worst
}

/// Like [`check_op`] for a scalar loss over a named parameter store; checks
/// `samples` scalars drawn uniformly over all trainable scalars.
pub fn check_store(
    seed: u64,
    store: &ParamStore<f64>,
    samples: usize,
    loss: impl for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> lpmc::Result<Var<'t, f64>>,
) -> f64 {
    let mut rng = rng(seed);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let l = loss(&tape, &bound).expect("loss evaluates");
    tape.backward(&l).unwrap();
    let grads = bound.grads(&tape);

    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::inference();
        let b = s.bind(&tape);
        loss(&tape, &b).expect("loss evaluates").item()
    };
    let names: Vec<(String, usize)> = store
        .params()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut pick = rng.random_range(0..total);
        let (name, k) = names
            .iter()
            .find_map(|(n, len)| {
                if pick < *len {
                    Some((n.clone(), pick))
                } else {
                    pick -= len;
                    None
                }
            })
            .unwrap();
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[k]);
        let mut plus = store.clone();
        plus.get_mut(&name).unwrap().data_mut()[k] += FD_EPS;
        let mut minus = store.clone();
        minus.get_mut(&name).unwrap().data_mut()[k] -= FD_EPS;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Small architecture for fast whole-model checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        widths: vec![16, 16, 24, 24],
        depths: vec![1, 1, 2, 1],
        window: 8,
        latent_channels: 16,
        hyper_channels: 16,
        hyper_depth: 2,
        pad_multiple: 64,
        mlp_ratio: 2,
        head_dim: 8,
        epg_channels: 4,
    }
}

/// Adds uniform noise to every trainable tensor so zero-initialized layers
/// carry signal.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64, amplitude: f64) {
    let mut rng = rng(seed);
    for (_, t) in store.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amplitude..amplitude);
        }
    }
}

pub fn random_image(seed: u64, width: usize, height: usize) -> lpmc::io::Image {
    let mut rng = rng(seed);
    lpmc::io::Image::from_fn(width, height, |_, _, _| rng.random_range(0.0..1.0))
}

// ---------------------------------------------------------------------------
// Plain shifted-window transformer written directly on flat arrays.
// ---------------------------------------------------------------------------

fn p<'a>(store: &'a ParamStore<f64>, prefix: &str, name: &str) -> &'a [f64] {
    store.get(&format!("{prefix}.{name}")).unwrap().data()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for k in 0..c {
            out.push((row[k] - mean) * inv * gamma[k] + beta[k]);
        }
    }
    out
}

fn dense(x: &[f64], w: &[f64], b: &[f64], cin: usize) -> Vec<f64> {
    let cout = b.len();
    let mut out = Vec::with_capacity(x.len() / cin * cout);
    for row in x.chunks(cin) {
        for o in 0..cout {
            let wr = &w[o * cin..(o + 1) * cin];
            out.push(b[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// One transformer layer on a single `[h, w, c]` token grid, following the
/// usual recipe: window size clipped to the grid, no shift when one window
/// covers everything, region-labelled mask with `-100` penalties.
pub fn reference_layer(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    head_dim: usize,
    window: usize,
    shifted: bool,
) -> Vec<f64> {
    let heads = c / head_dim;
    let s = window.min(h).min(w);
    let shift = if shifted && h.min(w) > window {
        s / 2
    } else {
        0
    };
    let normed = layer_norm(
        x,
        p(store, prefix, "norm1.gamma"),
        p(store, prefix, "norm1.beta"),
    );

    // Cyclic shift up-left: rolled[i][j] = x[(i + shift) % h][(j + shift) % w].
    let mut rolled = vec![0.0; h * w * c];
    let mut label = vec![0usize; h * w];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + shift) % h, (j + shift) % w);
            rolled[(i * w + j) * c..(i * w + j + 1) * c]
                .copy_from_slice(&normed[(si * w + sj) * c..(si * w + sj + 1) * c]);
            let band = |r: usize, n: usize| {
                if shift == 0 || r < n - s {
                    0
                } else if r < n - shift {
                    1
                } else {
                    2
                }
            };
            label[i * w + j] = band(i, h) * 3 + band(j, w);
        }
    }

    let qkv = dense(
        &rolled,
        p(store, prefix, "attn.qkv.weight"),
        p(store, prefix, "attn.qkv.bias"),
        c,
    );
    let table = p(store, prefix, "attn.rel_table");
    let span = 2 * window - 1;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut attended = vec![0.0; h * w * c];
    for wy in (0..h).step_by(s) {
        for wx in (0..w).step_by(s) {
            let cells: Vec<(usize, usize)> = (0..s)
                .flat_map(|a| (0..s).map(move |b| (wy + a, wx + b)))
                .collect();
            for hd in 0..heads {
                for &(qi, qj) in &cells {
                    let qrow = &qkv[(qi * w + qj) * 3 * c..];
                    let q = &qrow[hd * head_dim..(hd + 1) * head_dim];
                    let mut logits = Vec::with_capacity(cells.len());
                    for &(ki, kj) in &cells {
                        let krow = &qkv[(ki * w + kj) * 3 * c..];
                        let k = &krow[c + hd * head_dim..c + (hd + 1) * head_dim];
                        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        let dy = (qi - wy) as isize - (ki - wy) as isize + window as isize - 1;
                        let dx = (qj - wx) as isize - (kj - wx) as isize + window as isize - 1;
                        let rel = dy as usize * span + dx as usize;
                        let mut v = dot * scale + table[rel * heads + hd];
                        if label[qi * w + qj] != label[ki * w + kj] {
                            v -= 100.0;
                        }
                        logits.push(v);
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let out = &mut attended[(qi * w + qj) * c + hd * head_dim
                        ..(qi * w + qj) * c + (hd + 1) * head_dim];
                    for (pk, &(ki, kj)) in e.iter().zip(&cells) {
                        let vrow = &qkv[(ki * w + kj) * 3 * c..];
                        let v = &vrow[2 * c + hd * head_dim..2 * c + (hd + 1) * head_dim];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += pk / z * vv;
                        }
                    }
                }
            }
        }
    }
    let projected = dense(
        &attended,
        p(store, prefix, "attn.proj.weight"),
        p(store, prefix, "attn.proj.bias"),
        c,
    );
    // Undo the roll and add the residual.
    let mut x1 = x.to_vec();
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + shift) % h, (j + shift) % w);
            for k in 0..c {
                x1[(si * w + sj) * c + k] += projected[(i * w + j) * c + k];
            }
        }
    }
    let n2 = layer_norm(
        &x1,
        p(store, prefix, "norm2.gamma"),
        p(store, prefix, "norm2.beta"),
    );
    let hidden: Vec<f64> = dense(
        &n2,
        p(store, prefix, "mlp.fc1.weight"),
        p(store, prefix, "mlp.fc1.bias"),
        c,
    )
    .into_iter()
    .map(gelu)
    .collect();
    let mlp = dense(
        &hidden,
        p(store, prefix, "mlp.fc2.weight"),
        p(store, prefix, "mlp.fc2.bias"),
        hidden.len() / (h * w),
    );
    x1.iter().zip(&mlp).map(|(a, b)| a + b).collect()
}

fn reference_stage(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    side: &str,
    stage: usize,
    depth: usize,
    map: &Tensor<f64>,
) -> Tensor<f64> {
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    // [1, C, h, w] -> [h, w, C]
    let mut tokens = vec![0.0; c * h * w];
    for k in 0..c {
        for i in 0..h * w {
            tokens[i * c + k] = map.data()[k * h * w + i];
        }
    }
    for l in 0..depth {
        let prefix = format!("{side}.s{stage}.l{l}");
        tokens = reference_layer(
            store,
            &prefix,
            &tokens,
            h,
            w,
            c,
            cfg.head_dim,
            cfg.window,
            l % 2 == 1,
        );
    }
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (k, cell) = (i / (h * w), i % (h * w));
        tokens[cell * c + k]
    })
}

fn conv(
    store: &ParamStore<f64>,
    name: &str,
    x: &Tensor<f64>,
    stride: usize,
    pad: usize,
    transposed: bool,
) -> Tensor<f64> {
    let tape = Tape::inference();
    let x = tape.constant(x.clone());
    let w = tape.constant(store.get(&format!("{name}.weight")).unwrap().clone());
    let b = tape.constant(store.get(&format!("{name}.bias")).unwrap().clone());
    let y = if transposed {
        x.deconv2d(&w, Some(&b), stride, pad)
    } else {
        x.conv2d(&w, Some(&b), stride, pad)
    };
    y.unwrap().to_tensor()
}

/// Prompt-free analysis transform for a single `[1, 3, H, W]` image.
pub fn reference_analysis(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let mut t = conv(store, "enc.fe", x, 2, 2, false);
    for (i, &depth) in cfg.depths.iter().enumerate() {
        if i > 0 {
            t = conv(store, &format!("enc.down{i}"), &t, 2, 1, false);
        }
        t = reference_stage(cfg, store, "enc", i + 1, depth, &t);
    }
    conv(store, "enc.out", &t, 1, 1, false)
}

/// Prompt-free synthesis transform for a single latent `[1, M, h, w]`.
pub fn reference_synthesis(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    y_hat: &Tensor<f64>,
) -> Tensor<f64> {
    let mut t = conv(store, "dec.in", y_hat, 1, 1, false);
    for (i, &depth) in cfg.decoder_depths().iter().enumerate() {
        if i > 0 {
            t = conv(store, &format!("dec.up{i}"), &t, 2, 1, true);
        }
        t = reference_stage(cfg, store, "dec", i + 1, depth, &t);
    }
    conv(store, "dec.fu", &t, 2, 1, true)
}

// ---------------------------------------------------------------------------
// Entropy-coder fuzzing.
// ---------------------------------------------------------------------------

/// A random pmf over `n` symbols: flat, peaked, sparse or near-degenerate.
pub fn random_pmf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let kind = rng.random_range(0..4);
    let mut p: Vec<f64> = (0..n)
        .map(|i| match kind {
            0 => rng.random_range(0.5..1.0),
            1 => (-((i as f64 - n as f64 / 2.0) / rng.random_range(0.3..8.0)).powi(2)).exp(),
            2 => {
                if rng.random_bool(0.2) {
                    rng.random_range(0.0..1.0)
                } else {
                    0.0
                }
            }
            _ => {
                if i == 0 {
                    1.0
                } else {
                    1e-9
                }
            }
        })
        .collect();
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        p[0] = 1.0;
    }
    p
}

/// One fuzzed stream: random tables, symbols mostly drawn from their own
/// table with occasional improbable ones. Returns `(symbols decoded
/// exactly, coded bits, ideal bits)`.
pub fn fuzz_stream(seed: u64) -> (bool, usize, f64) {
    use lpmc::entropy::{range_decode, range_encode, CdfTable};
    let mut rng = rng(seed);
    let tables: Vec<CdfTable> = (0..rng.random_range(1..6))
        .map(|_| {
            let n = rng.random_range(2..300);
            CdfTable::from_pmf(&random_pmf(&mut rng, n))
        })
        .collect();
    let len = rng.random_range(0..3000);
    let choice: Vec<usize> = (0..len)
        .map(|_| rng.random_range(0..tables.len()))
        .collect();
    let symbols: Vec<usize> = choice
        .iter()
        .map(|&t| {
            let table = &tables[t];
            if rng.random_bool(0.02) {
                rng.random_range(0..table.symbols())
            } else {
                table.lookup(rng.random_range(0..lpmc::entropy::TOTAL_FREQ))
            }
        })
        .collect();
    let ideal: f64 = symbols
        .iter()
        .zip(&choice)
        .map(|(&s, &t)| tables[t].bits(s))
        .sum();
    let bytes = range_encode(&symbols, |i| &tables[choice[i]]);
    let ok =
        range_decode(&bytes, symbols.len(), |i| &tables[choice[i]]).is_ok_and(|d| d == symbols);
    (ok, bytes.len() * 8, ideal)
}

/// A prompt set whose generators produce non-zero prompts.
pub fn live_prompt_set(cfg: &ModelConfig, lambda_id: u8, seed: u64) -> lpmc::codec::PromptSet {
    let mut ps = lpmc::codec::PromptSet::init(cfg, lambda_id, 0.013, seed).unwrap();
    let mut p = ps.params.cast::<f64>();
    jitter(&mut p, seed, 0.05);
    ps.params = p.cast();
    ps
}

// ---------------------------------------------------------------------------
// Golden reference vectors.
// ---------------------------------------------------------------------------

pub const GOLDEN_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

/// Every golden artifact as `(file name, bytes)`, regenerated from seeds.
pub fn golden_artifacts() -> Vec<(String, Vec<u8>)> {
    use lpmc::codec::Codec;
    use lpmc::metrics::{bit_allocation_map, map_csv, ms_ssim, psnr, RdPoint};
    use lpmc::synth::synthetic_image;

    let cfg = ModelConfig::desk();
    let codec = Codec::init(cfg.clone(), 2024).unwrap();
    let prompt = live_prompt_set(&cfg, 2, 2025);
    let images = [
        ("a", synthetic_image(64, 64, 100)),
        ("b", synthetic_image(70, 45, 101)),
    ];
    let mut out = Vec::new();
    let mut csv = format!("{}\n", RdPoint::CSV_HEADER);
    for (name, img) in &images {
        for p in [None, Some(&prompt)] {
            let c = codec.compress(img, p).unwrap();
            let decoded = codec.decompress(&c, p).unwrap();
            let point = RdPoint {
                image: name.to_string(),
                lambda_id: c.lambda_id,
                bpp: c.bpp(),
                psnr: psnr(img, &decoded).unwrap(),
                msssim: ms_ssim(img, &decoded).unwrap(),
            };
            csv.push_str(&point.csv_row());
            csv.push('\n');
            let tag = p.map_or("bare".to_string(), |p| format!("l{}", p.lambda_id));
            out.push((format!("{name}_{tag}.lpmc"), c.to_bytes()));
        }
    }
    out.push(("rd_points.csv".into(), csv.into_bytes()));
    let rec = codec.reconstruct(&images[0].1, Some(&prompt)).unwrap();
    let map = bit_allocation_map(&rec.y_element_bits).unwrap();
    out.push(("bitmap.csv".into(), map_csv(&map).into_bytes()));
    out
}

/// Compares regenerated artifacts with the shipped files, or rewrites them
/// when `LPMC_BLESS=1`. Returns the names that differ.
pub fn check_golden() -> Vec<String> {
    let dir = std::path::Path::new(GOLDEN_DIR);
    let bless = std::env::var("LPMC_BLESS").is_ok_and(|v| v == "1");
    let mut bad = Vec::new();
    for (name, bytes) in golden_artifacts() {
        let path = dir.join(&name);
        if bless {
            std::fs::create_dir_all(dir).unwrap();
            std::fs::write(&path, &bytes).unwrap();
        } else if std::fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
            bad.push(name);
        }
    }
    bad
}

/// Largest elementwise gap between the masked-prompt transforms and the
/// prompt-free reference, over analysis output and synthesis output.
pub fn masked_gap(cfg: &ModelConfig, seed: u64, side: usize) -> f64 {
    let backbone: ParamStore<f64> = init_backbone(cfg, 11).unwrap();
    let mut prompts: ParamStore<f64> = init_prompt_set(cfg, 12).unwrap();
    jitter(&mut prompts, 13, 0.2);
    let img = random_image(seed, side, side);
    let tape = Tape::<f64>::inference();
    let b = backbone.bind(&tape);
    let p = prompts.bind(&tape);
    let x = tape.constant(img.to_tensor());

    let grids = encoder_prompts(cfg, &p, &x, NormMode::Eval, &mut Vec::new()).unwrap();
    assert!(
        grids.iter().all(|g| g.data().iter().any(|&v| v != 0.0)),
        "prompts must be live"
    );
    let masked = Prompts {
        grids: &grids,
        mode: PromptMode::Masked,
    };
    let (y, _) = analysis(cfg, &b, &x, Some(masked)).unwrap();
    let y_ref = reference_analysis(cfg, &backbone, &img.to_tensor());
    let mut gap = y.to_tensor().max_abs_diff(&y_ref);

    let y_hat = Tensor::from_fn(y.shape(), |i| round_symbol(y.data()[i]) as f64);
    let yv = tape.constant(y_hat.clone());
    let grids = decoder_prompts(cfg, &p, &yv).unwrap();
    let masked = Prompts {
        grids: &grids,
        mode: PromptMode::Masked,
    };
    let (x_hat, _) = synthesis(cfg, &b, &yv, Some(masked)).unwrap();
    gap = gap.max(
        x_hat
            .to_tensor()
            .max_abs_diff(&reference_synthesis(cfg, &backbone, &y_hat)),
    );
    gap
}
