//! End-to-end model: the differentiable forward pass used by training and
//! the bitstream encoder/decoder built on the same transforms.

use crate::attention::PromptMode;
use crate::backbone::{
    analysis, hyper_analysis, hyper_synthesis, init_backbone, synthesis, LayerTrace, Prompts,
};
use crate::config::ModelConfig;
use crate::entropy::{
    dequantize, factorized_likelihood, gaussian_likelihood, range_decode, range_encode, rate_bits,
    round_symbol, CdfTable, FactorizedDensity, Quantizer, ScaleTable, SYMBOL_MIN,
};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointKind, Container, Image, NO_PROMPT};
use crate::lpm::{decoder_prompts, encoder_prompts, init_prompt_set, NormMode, NormStats};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Prefix of the hyperlatent density parameters inside the backbone.
pub const Z_DENSITY: &str = "entropy.z";

/// Trained prompt networks for one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet<F: Real = f32> {
    pub lambda_id: u8,
    pub lambda: f64,
    pub params: ParamStore<F>,
}

impl PromptSet<f32> {
    pub fn init(cfg: &ModelConfig, lambda_id: u8, lambda: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            lambda_id,
            lambda,
            params: init_prompt_set(
                cfg,
                seed ^ (lambda_id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            )?,
        })
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        Checkpoint {
            model_id: cfg.model_id(),
            kind: CheckpointKind::PromptSet {
                lambda_id: self.lambda_id,
                lambda: self.lambda,
            },
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(cfg: &ModelConfig, ck: Checkpoint) -> Result<Self> {
        check_model(cfg, ck.model_id)?;
        let CheckpointKind::PromptSet { lambda_id, lambda } = ck.kind else {
            return Err(Error::Format(
                "expected a prompt-set checkpoint, found a backbone".into(),
            ));
        };
        ck.check_layout(&init_prompt_set(cfg, 0)?)?;
        Ok(Self {
            lambda_id,
            lambda,
            params: ck.params,
        })
    }
}

fn check_model(cfg: &ModelConfig, found: u32) -> Result<()> {
    let expected = cfg.model_id();
    if expected != found {
        return Err(Error::ModelMismatch { expected, found });
    }
    Ok(())
}

/// How the prompt networks run in a forward pass.
pub struct PromptBinding<'a, 't, F: Real> {
    pub params: &'a Bound<'t, F>,
    pub mode: PromptMode,
    pub norm: NormMode,
}

/// Every intermediate of one forward pass.
pub struct Forward<'t, F: Real> {
    /// Unclamped reconstruction of the padded input.
    pub x_hat: Var<'t, F>,
    pub y: Var<'t, F>,
    pub y_hat: Var<'t, F>,
    pub z_hat: Var<'t, F>,
    pub mu: Var<'t, F>,
    pub sigma: Var<'t, F>,
    pub y_likelihood: Var<'t, F>,
    pub z_likelihood: Var<'t, F>,
    pub encoder_trace: Vec<LayerTrace<'t, F>>,
    pub decoder_trace: Vec<LayerTrace<'t, F>>,
    /// Batch statistics of the encoder prompt generator in training mode.
    pub norm_stats: Vec<NormStats<F>>,
}

impl<'t, F: Real> Forward<'t, F> {
    /// Estimated bits of `ŷ` and `ẑ`.
    pub fn rate_bits(&self) -> (Var<'t, F>, Var<'t, F>) {
        (rate_bits(&self.y_likelihood), rate_bits(&self.z_likelihood))
    }
}

/// Runs analysis, hyperprior, quantization and synthesis on a padded batch
/// `x` of shape `[B, 3, H, W]`.
pub fn forward<'t, F: Real>(
    cfg: &ModelConfig,
    backbone: &Bound<'t, F>,
    prompts: Option<PromptBinding<'_, 't, F>>,
    x: &Var<'t, F>,
    quantizer: &mut Quantizer,
) -> Result<Forward<'t, F>> {
    let mut norm_stats = Vec::new();
    let enc_grids = match &prompts {
        Some(p) => Some(encoder_prompts(cfg, p.params, x, p.norm, &mut norm_stats)?),
        None => None,
    };
    let mode = prompts.as_ref().map_or(PromptMode::Active, |p| p.mode);
    let (y, encoder_trace) = analysis(
        cfg,
        backbone,
        x,
        enc_grids.as_deref().map(|grids| Prompts { grids, mode }),
    )?;
    let z = hyper_analysis(cfg, backbone, &y)?;
    let z_hat = quantizer.apply(&z, None)?;
    let z_likelihood = factorized_likelihood(backbone, Z_DENSITY, &z_hat)?;
    let (mu, sigma) = hyper_synthesis(cfg, backbone, &z_hat)?;
    let y_hat = quantizer.apply(&y, Some(&mu))?;
    let y_likelihood = gaussian_likelihood(&y_hat, &mu, &sigma)?;
    let dec_grids = match &prompts {
        Some(p) => Some(decoder_prompts(cfg, p.params, &y_hat)?),
        None => None,
    };
    let (x_hat, decoder_trace) = synthesis(
        cfg,
        backbone,
        &y_hat,
        dec_grids.as_deref().map(|grids| Prompts { grids, mode }),
    )?;
    Ok(Forward {
        x_hat,
        y,
        y_hat,
        z_hat,
        mu,
        sigma,
        y_likelihood,
        z_likelihood,
        encoder_trace,
        decoder_trace,
        norm_stats,
    })
}

/// Result of the in-process (no bitstream) forward pass on rounded latents.
pub struct Reconstruction {
    /// Cropped and clamped to `[0, 1]`.
    pub image: Image,
    pub y_bits: f64,
    pub z_bits: f64,
    /// Per-element `-log2 p(ŷ)`, `[M, H/16, W/16]` of the padded input.
    pub y_element_bits: Tensor<f64>,
    /// Prompt mass of each last-stage encoder query, averaged over heads
    /// and layers, on the last-stage token grid.
    pub attention: Option<Tensor<f64>>,
}

impl Reconstruction {
    pub fn estimated_bits(&self) -> f64 {
        self.y_bits + self.z_bits
    }
}

struct CodedSymbols {
    z: Vec<usize>,
    z_tables: Vec<usize>,
    y: Vec<usize>,
    y_buckets: Vec<usize>,
}

/// Inference-side model: frozen backbone plus the derived coding tables.
pub struct Codec {
    pub config: ModelConfig,
    pub backbone: ParamStore<f32>,
    z_tables: Vec<CdfTable>,
    scales: ScaleTable,
}

impl Codec {
    pub fn new(config: ModelConfig, backbone: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let z_tables = FactorizedDensity::tables(&backbone, Z_DENSITY, config.hyper_channels)?;
        Ok(Self {
            config,
            backbone,
            z_tables,
            scales: ScaleTable::new(),
        })
    }

    /// Seeded untrained model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = init_backbone(&config, seed)?;
        Self::new(config, backbone)
    }

    pub fn from_checkpoint(config: ModelConfig, ck: Checkpoint) -> Result<Self> {
        check_model(&config, ck.model_id)?;
        if ck.kind != CheckpointKind::Backbone {
            return Err(Error::Format(
                "expected a backbone checkpoint, found a prompt set".into(),
            ));
        }
        ck.check_layout(&init_backbone(&config, 0)?)?;
        Self::new(config, ck.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_id: self.model_id(),
            kind: CheckpointKind::Backbone,
            params: self.backbone.clone(),
        }
    }

    pub fn model_id(&self) -> u32 {
        self.config.model_id()
    }

    pub fn z_tables(&self) -> &[CdfTable] {
        &self.z_tables
    }

    pub fn scale_table(&self) -> &ScaleTable {
        &self.scales
    }

    fn check_image(&self, img: &Image) -> Result<Image> {
        if img.width == 0
            || img.height == 0
            || img.width > u16::MAX as usize
            || img.height > u16::MAX as usize
        {
            return Err(Error::Shape(format!(
                "unsupported image size {}x{}",
                img.width, img.height
            )));
        }
        let padded = img.pad_replicate(self.config.pad_multiple);
        if padded.width > u16::MAX as usize || padded.height > u16::MAX as usize {
            return Err(Error::Shape(
                "padded image exceeds 65535 pixels per side".into(),
            ));
        }
        Ok(padded)
    }

    fn latent_symbols(z: &[f32]) -> (Vec<i32>, Vec<f32>) {
        let s: Vec<i32> = z.iter().map(|&v| round_symbol(v as f64)).collect();
        let zh = s.iter().map(|&s| dequantize(s, 0.0f32)).collect();
        (s, zh)
    }

    fn z_table_index(&self, z_shape: &[usize]) -> impl Fn(usize) -> usize {
        let plane = z_shape[2] * z_shape[3];
        let c = z_shape[1];
        move |i| (i / plane) % c
    }

    /// Quantized symbols of `img` and the table each one is coded with.
    fn symbols(&self, img: &Image, prompt: Option<&PromptSet>) -> Result<(Image, CodedSymbols)> {
        let cfg = &self.config;
        let padded = self.check_image(img)?;
        let tape = Tape::<f32>::inference();
        let b = self.backbone.bind(&tape);
        let x = tape.constant(padded.to_tensor());
        let pb = prompt.map(|p| p.params.bind(&tape));
        let grids = match &pb {
            Some(p) => Some(encoder_prompts(
                cfg,
                p,
                &x,
                NormMode::Eval,
                &mut Vec::new(),
            )?),
            None => None,
        };
        let (y, _) = analysis(
            cfg,
            &b,
            &x,
            grids.as_deref().map(|grids| Prompts {
                grids,
                mode: PromptMode::Active,
            }),
        )?;
        let z = hyper_analysis(cfg, &b, &y)?;
        let (z_sym, z_hat) = Self::latent_symbols(z.data());
        let z_hat = tape.constant(Tensor::new(z.shape(), z_hat)?);
        let (mu, sigma) = hyper_synthesis(cfg, &b, &z_hat)?;
        let zi = self.z_table_index(z.shape());
        let symbols = CodedSymbols {
            z: z_sym.iter().map(|&s| (s - SYMBOL_MIN) as usize).collect(),
            z_tables: (0..z_sym.len()).map(zi).collect(),
            y: y.data()
                .iter()
                .zip(mu.data())
                .map(|(&v, &m)| (round_symbol((v - m) as f64) - SYMBOL_MIN) as usize)
                .collect(),
            y_buckets: sigma
                .data()
                .iter()
                .map(|&s| self.scales.bucket(s as f64))
                .collect(),
        };
        Ok((padded, symbols))
    }

    /// Encodes `img` (any size up to 65535², padded internally).
    pub fn compress(&self, img: &Image, prompt: Option<&PromptSet>) -> Result<Container> {
        let (padded, s) = self.symbols(img, prompt)?;
        Ok(Container {
            model_id: self.model_id(),
            lambda_id: prompt.map_or(NO_PROMPT, |p| p.lambda_id),
            width: img.width as u16,
            height: img.height as u16,
            padded_width: padded.width as u16,
            padded_height: padded.height as u16,
            z_payload: range_encode(&s.z, |i| &self.z_tables[s.z_tables[i]]),
            y_payload: range_encode(&s.y, |i| self.scales.table(s.y_buckets[i])),
        })
    }

    /// Ideal code length `(y, z)` in bits of the symbols [`Codec::compress`]
    /// would write, under the same quantized tables.
    pub fn table_bits(&self, img: &Image, prompt: Option<&PromptSet>) -> Result<(f64, f64)> {
        let (_, s) = self.symbols(img, prompt)?;
        let z =
            s.z.iter()
                .zip(&s.z_tables)
                .map(|(&v, &t)| self.z_tables[t].bits(v))
                .sum();
        let y =
            s.y.iter()
                .zip(&s.y_buckets)
                .map(|(&v, &b)| self.scales.table(b).bits(v))
                .sum();
        Ok((y, z))
    }

    /// Decodes a container; the prompt set must match its `lambda_id`.
    pub fn decompress(&self, c: &Container, prompt: Option<&PromptSet>) -> Result<Image> {
        let cfg = &self.config;
        if c.model_id != self.model_id() {
            return Err(Error::ModelMismatch {
                expected: self.model_id(),
                found: c.model_id,
            });
        }
        let have = prompt.map_or(NO_PROMPT, |p| p.lambda_id);
        if have != c.lambda_id {
            return Err(Error::PromptMismatch {
                expected: c.lambda_id,
                found: have,
            });
        }
        let (pw, ph) = (c.padded_width as usize, c.padded_height as usize);
        let m = cfg.pad_multiple;
        if pw % m != 0
            || ph % m != 0
            || pw != (c.width as usize).div_ceil(m) * m
            || ph != (c.height as usize).div_ceil(m) * m
        {
            return Err(Error::CorruptStream(format!(
                "padded extent {pw}x{ph} inconsistent with header"
            )));
        }
        let tape = Tape::<f32>::inference();
        let b = self.backbone.bind(&tape);
        let zd = cfg.total_downsample();
        let z_shape = [1, cfg.hyper_channels, ph / zd, pw / zd];
        let zi = self.z_table_index(&z_shape);
        let z_count: usize = z_shape.iter().product();
        let z_idx = range_decode(&c.z_payload, z_count, |i| &self.z_tables[zi(i)])?;
        let z_hat: Vec<f32> = z_idx
            .iter()
            .map(|&s| dequantize(s as i32 + SYMBOL_MIN, 0.0f32))
            .collect();
        let z_hat = tape.constant(Tensor::new(&z_shape, z_hat)?);
        let (mu, sigma) = hyper_synthesis(cfg, &b, &z_hat)?;
        let buckets: Vec<usize> = sigma
            .data()
            .iter()
            .map(|&s| self.scales.bucket(s as f64))
            .collect();
        let y_idx = range_decode(&c.y_payload, mu.numel(), |i| self.scales.table(buckets[i]))?;
        let y_hat: Vec<f32> = y_idx
            .iter()
            .zip(mu.data())
            .map(|(&s, &m)| dequantize(s as i32 + SYMBOL_MIN, m))
            .collect();
        let y_hat = tape.constant(Tensor::new(mu.shape(), y_hat)?);
        let pb = prompt.map(|p| p.params.bind(&tape));
        let grids = match &pb {
            Some(p) => Some(decoder_prompts(cfg, p, &y_hat)?),
            None => None,
        };
        let (x_hat, _) = synthesis(
            cfg,
            &b,
            &y_hat,
            grids.as_deref().map(|grids| Prompts {
                grids,
                mode: PromptMode::Active,
            }),
        )?;
        let full = Image::from_tensor(&x_hat.to_tensor())?;
        Ok(full
            .crop(0, 0, c.width as usize, c.height as usize)
            .clamped())
    }

    /// In-process forward on rounded latents, with rate estimates and maps.
    pub fn reconstruct(&self, img: &Image, prompt: Option<&PromptSet>) -> Result<Reconstruction> {
        let cfg = &self.config;
        let padded = self.check_image(img)?;
        let tape = Tape::<f32>::inference();
        let b = self.backbone.bind(&tape);
        let x = tape.constant(padded.to_tensor());
        let pb = prompt.map(|p| p.params.bind(&tape));
        let fwd = forward(
            cfg,
            &b,
            pb.as_ref().map(|params| PromptBinding {
                params,
                mode: PromptMode::Active,
                norm: NormMode::Eval,
            }),
            &x,
            &mut Quantizer::Round,
        )?;
        // Accumulated in f64: at low rates the totals are a few dozen bits
        // spread over thousands of elements.
        let bits = |p: &Var<'_, f32>| -> Vec<f64> {
            let floor = crate::entropy::LIKELIHOOD_FLOOR;
            p.data()
                .iter()
                .map(|&p| -(p.f64().max(floor)).log2())
                .collect()
        };
        let y_bits = bits(&fwd.y_likelihood);
        let z_bits: f64 = bits(&fwd.z_likelihood).iter().sum();
        let y_total = y_bits.iter().sum();
        let y_element_bits = Tensor::new(&fwd.y_likelihood.shape()[1..], y_bits)?;
        let attention = prompt
            .map(|_| last_stage_attention(cfg, &fwd.encoder_trace))
            .transpose()?;
        let full = Image::from_tensor(&fwd.x_hat.to_tensor())?;
        Ok(Reconstruction {
            image: full.crop(0, 0, img.width, img.height).clamped(),
            y_bits: y_total,
            z_bits,
            y_element_bits,
            attention,
        })
    }
}

/// Prompt mass per query of the last encoder stage, averaged over its
/// layers (first batch item).
pub fn last_stage_attention<F: Real>(
    cfg: &ModelConfig,
    trace: &[LayerTrace<'_, F>],
) -> Result<Tensor<f64>> {
    let last = cfg.stages();
    let layers: Vec<_> = trace.iter().filter(|t| t.stage == last).collect();
    let first = layers
        .first()
        .ok_or_else(|| Error::Invalid("no last-stage attention recorded".into()))?;
    let (h, w) = (first.geometry.h, first.geometry.w);
    let batch = first.probs.shape()[0] / first.geometry.windows();
    let mut acc = vec![0.0; h * w];
    for t in &layers {
        let mass = crate::attention::prompt_mass(&t.probs, batch, &t.geometry);
        for (a, m) in acc.iter_mut().zip(&mass[..h * w]) {
            *a += m / layers.len() as f64;
        }
    }
    Tensor::new(&[h, w], acc)
}
