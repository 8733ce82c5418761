//! Finite-difference cases for every differentiable operation, plus the
//! two training losses on a small model.

use std::rc::Rc;

use lpmc::attention::{windowed_attention, AttentionWeights, PromptMode};
use lpmc::codec::{forward, PromptBinding};
use lpmc::entropy::{
    factorized_likelihood, gaussian_likelihood, init_factorized, rate_bits, Quantizer,
};
use lpmc::lpm::NormMode;
use lpmc::params::ParamStore;
use lpmc::tensor::{Tensor, Var, GATHER_ZERO};
use lpmc::training::rd_loss;
use rand::Rng;

use super::*;

pub type Case = (&'static str, fn(u64) -> f64);

fn unary(seed: u64, x: Tensor<f64>, f: for<'t> fn(&Var<'t, f64>) -> Var<'t, f64>) -> f64 {
    check_op(seed, vec![x], |v| Ok(f(&v[0])))
}

fn smooth_input(seed: u64) -> Tensor<f64> {
    randn(&mut rng(seed), &[3, 5], 1.5)
}

fn matmul_case(seed: u64, ta: bool, tb: bool, batch: Option<usize>) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (3, 4, 5);
    let shape = |rows, cols, t: bool| {
        let (a, b) = if t { (cols, rows) } else { (rows, cols) };
        match batch {
            Some(bs) => vec![bs, a, b],
            None => vec![a, b],
        }
    };
    let a = randn(&mut r, &shape(m, k, ta), 1.0);
    let b = randn(&mut r, &shape(k, n, tb), 1.0);
    check_op(seed, vec![a, b], move |v| v[0].matmul_t(&v[1], ta, tb))
}

fn conv_case(seed: u64, k: usize, stride: usize, pad: usize) -> f64 {
    let mut r = rng(seed);
    let x = randn(&mut r, &[2, 3, 7, 6], 1.0);
    let w = randn(&mut r, &[4, 3, k, k], 0.5);
    let b = randn(&mut r, &[4], 0.5);
    check_op(seed, vec![x, w, b], move |v| {
        v[0].conv2d(&v[1], Some(&v[2]), stride, pad)
    })
}

fn deconv_case(seed: u64, k: usize, stride: usize, pad: usize) -> f64 {
    let mut r = rng(seed);
    let x = randn(&mut r, &[2, 3, 4, 5], 1.0);
    let w = randn(&mut r, &[3, 2, k, k], 0.5);
    let b = randn(&mut r, &[2], 0.5);
    check_op(seed, vec![x, w, b], move |v| {
        v[0].deconv2d(&v[1], Some(&v[2]), stride, pad)
    })
}

fn maxpool_case(seed: u64, k: usize, stride: usize, pad: usize) -> f64 {
    let x = well_separated(&mut rng(seed), &[2, 2, 6, 6], 0.05);
    check_op(seed, vec![x], move |v| v[0].maxpool2d(k, stride, pad))
}

fn attention_case(seed: u64, shifted: bool, prompts: bool) -> f64 {
    let mut r = rng(seed);
    let (h, c, window, heads) = (8, 8, 4, 2);
    let span = 2 * window - 1;
    let mut inputs = vec![
        randn(&mut r, &[1, h, h, c], 1.0),
        randn(&mut r, &[3 * c, c], 0.4),
        randn(&mut r, &[3 * c], 0.1),
        randn(&mut r, &[c, c], 0.4),
        randn(&mut r, &[c], 0.1),
        randn(&mut r, &[span * span, heads], 0.3),
    ];
    if prompts {
        inputs.push(randn(&mut r, &[1, h / 2, h / 2, c], 1.0));
    }
    check_op(seed, inputs, move |v| {
        let weights = AttentionWeights {
            qkv_weight: &v[1],
            qkv_bias: &v[2],
            proj_weight: &v[3],
            proj_bias: &v[4],
            rel_table: &v[5],
            heads,
            window,
        };
        let p = v.get(6).map(|p| (p, PromptMode::Active));
        Ok(windowed_attention(&v[0], p, &weights, shifted)?.tokens)
    })
}

fn factorized_case(seed: u64) -> f64 {
    let mut store = ParamStore::<f64>::new();
    init_factorized(&mut store, "fz", 3, seed);
    jitter(&mut store, seed, 0.3);
    store.insert("z", randn(&mut rng(seed), &[2, 3, 2, 2], 2.0));
    let r = uniform(&mut rng(seed ^ 1), &[2, 3, 2, 2], -1.0, 1.0);
    check_store(seed, &store, FD_SAMPLES, move |tape, b| {
        let p = factorized_likelihood(b, "fz", b.get("z")?)?;
        Ok(p.mul(&tape.constant(r.clone()))?.sum())
    })
}

pub fn op_cases() -> Vec<Case> {
    vec![
        ("add", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
                |v| v[0].add(&v[1]),
            )
        }),
        ("sub", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
                |v| v[0].sub(&v[1]),
            )
        }),
        ("mul", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
                |v| v[0].mul(&v[1]),
            )
        }),
        ("add_scalar", |s| {
            unary(s, smooth_input(s), |x| x.add_scalar(0.7))
        }),
        ("mul_scalar", |s| {
            unary(s, smooth_input(s), |x| x.mul_scalar(-1.3))
        }),
        ("neg", |s| unary(s, smooth_input(s), |x| x.neg())),
        ("bias_add", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[3], 1.0)],
                |v| v[0].bias_add(&v[1], 1),
            )
        }),
        ("bias_add_trailing", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[4, 3], 1.0), randn(&mut r, &[3], 1.0)],
                |v| v[0].bias_add(&v[1], 1),
            )
        }),
        ("scale_mul", |s| {
            let mut r = rng(s);
            check_op(
                s,
                vec![randn(&mut r, &[2, 3, 4], 1.0), randn(&mut r, &[3, 4], 1.0)],
                |v| v[0].scale_mul(&v[1], 1),
            )
        }),
        ("gelu", |s| unary(s, smooth_input(s), |x| x.gelu())),
        ("tanh", |s| unary(s, smooth_input(s), |x| x.tanh())),
        ("sigmoid", |s| unary(s, smooth_input(s), |x| x.sigmoid())),
        ("softplus", |s| {
            unary(s, randn(&mut rng(s), &[3, 5], 8.0), |x| x.softplus())
        }),
        ("exp", |s| unary(s, smooth_input(s), |x| x.exp())),
        ("square", |s| unary(s, smooth_input(s), |x| x.square())),
        ("normal_cdf", |s| {
            unary(s, smooth_input(s), |x| x.normal_cdf())
        }),
        ("leaky_relu", |s| {
            unary(s, away_from_zero(&mut rng(s), &[3, 5], 0.01, 2.0), |x| {
                x.leaky_relu(0.01)
            })
        }),
        ("abs", |s| {
            unary(s, away_from_zero(&mut rng(s), &[3, 5], 0.01, 2.0), |x| {
                x.abs()
            })
        }),
        ("log", |s| {
            unary(s, uniform(&mut rng(s), &[3, 5], 0.2, 3.0), |x| x.log())
        }),
        ("recip", |s| {
            unary(s, away_from_zero(&mut rng(s), &[3, 5], 0.3, 2.0), |x| {
                x.recip()
            })
        }),
        ("clamp_min", |s| {
            let x = away_from_zero(&mut rng(s), &[3, 5], 0.01, 1.0);
            unary(s, x, |x| x.add_scalar(0.1).clamp_min(0.1))
        }),
        ("sum", |s| unary(s, smooth_input(s), |x| x.sum())),
        ("mean", |s| unary(s, smooth_input(s), |x| x.mean())),
        ("matmul", |s| matmul_case(s, false, false, None)),
        ("matmul_ta", |s| matmul_case(s, true, false, None)),
        ("matmul_tb", |s| matmul_case(s, false, true, None)),
        ("matmul_tab", |s| matmul_case(s, true, true, None)),
        ("matmul_batched", |s| matmul_case(s, false, true, Some(3))),
        ("linear", |s| {
            let mut r = rng(s);
            let inputs = vec![
                randn(&mut r, &[2, 3, 4], 1.0),
                randn(&mut r, &[5, 4], 1.0),
                randn(&mut r, &[5], 1.0),
            ];
            check_op(s, inputs, |v| v[0].linear(&v[1], Some(&v[2])))
        }),
        ("softmax", |s| {
            unary(s, randn(&mut rng(s), &[3, 6], 2.0), |x| x.softmax())
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let inputs = vec![
                randn(&mut r, &[4, 6], 2.0),
                randn(&mut r, &[6], 1.0),
                randn(&mut r, &[6], 1.0),
            ];
            check_op(s, inputs, |v| v[0].layer_norm(&v[1], &v[2], 1e-5))
        }),
        ("reshape_permute", |s| {
            check_op(s, vec![randn(&mut rng(s), &[2, 3, 4], 1.0)], |v| {
                v[0].reshape(&[3, 2, 4])?.permute(&[2, 0, 1])
            })
        }),
        ("gather", |s| {
            let mut r = rng(s);
            let index: Vec<u32> = (0..10)
                .map(|i| {
                    if i == 4 {
                        GATHER_ZERO
                    } else {
                        r.random_range(0..6)
                    }
                })
                .collect();
            let index = Rc::new(index);
            let x = randn(&mut r, &[6], 1.0);
            check_op(s, vec![x], move |v| v[0].gather(index.clone(), &[2, 5]))
        }),
        ("slice", |s| {
            check_op(s, vec![randn(&mut rng(s), &[3, 5, 2], 1.0)], |v| {
                v[0].slice(1, 1, 3)
            })
        }),
        ("split", |s| {
            check_op(s, vec![randn(&mut rng(s), &[2, 5], 1.0)], |v| {
                let parts = v[0].split(1, &[2, 3])?;
                parts[0].mul(&parts[0])?.sum().add(&parts[1].sum())
            })
        }),
        ("concat", |s| {
            let mut r = rng(s);
            let inputs = vec![
                randn(&mut r, &[2, 3, 2], 1.0),
                randn(&mut r, &[2, 1, 2], 1.0),
            ];
            check_op(s, inputs, |v| Var::concat(&[v[0].clone(), v[1].clone()], 1))
        }),
        ("pad2d", |s| {
            check_op(s, vec![randn(&mut rng(s), &[1, 2, 3, 3], 1.0)], |v| {
                v[0].pad2d((1, 2, 0, 1))
            })
        }),
        ("conv2d_3x3", |s| conv_case(s, 3, 1, 1)),
        ("conv2d_stride2", |s| conv_case(s, 3, 2, 1)),
        ("conv2d_5x5", |s| conv_case(s, 5, 2, 2)),
        ("conv2d_1x1", |s| conv_case(s, 1, 1, 0)),
        ("deconv2d_4x4", |s| deconv_case(s, 4, 2, 1)),
        ("deconv2d_2x2", |s| deconv_case(s, 2, 2, 0)),
        ("maxpool_2x2", |s| maxpool_case(s, 2, 2, 0)),
        ("maxpool_3x3", |s| maxpool_case(s, 3, 1, 1)),
        ("batch_norm", |s| {
            let mut r = rng(s);
            let inputs = vec![
                randn(&mut r, &[3, 2, 3, 3], 2.0),
                randn(&mut r, &[2], 1.0),
                randn(&mut r, &[2], 1.0),
            ];
            check_op(s, inputs, |v| {
                Ok(v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0)
            })
        }),
        ("window_attention", |s| attention_case(s, false, false)),
        ("shifted_window_attention", |s| {
            attention_case(s, true, false)
        }),
        ("prompt_window_attention", |s| {
            attention_case(s, false, true)
        }),
        ("prompt_shifted_window_attention", |s| {
            attention_case(s, true, true)
        }),
        ("gaussian_likelihood", |s| {
            let mut r = rng(s);
            let inputs = vec![
                randn(&mut r, &[2, 6], 2.0),
                randn(&mut r, &[2, 6], 1.0),
                uniform(&mut r, &[2, 6], 0.2, 3.0),
            ];
            check_op(s, inputs, |v| gaussian_likelihood(&v[0], &v[1], &v[2]))
        }),
        ("factorized_likelihood", factorized_case),
        ("rate_bits", |s| {
            unary(s, uniform(&mut rng(s), &[3, 5], 0.01, 1.0), rate_bits)
        }),
    ]
}

/// Stage-1 objective over backbone parameters (no prompts) or stage-2
/// objective over prompt parameters against a frozen backbone, on a small
/// model with fixed quantization noise.
pub fn whole_model_error(seed: u64, stage2: bool, samples: usize) -> f64 {
    let cfg = tiny_config();
    let mut backbone: ParamStore<f64> = lpmc::backbone::init_backbone(&cfg, seed).unwrap();
    let x = random_image(seed, 64, 64).to_tensor::<f64>();
    let lambda = 0.013;
    if !stage2 {
        return check_store(seed, &backbone, samples, |tape, b| {
            let x = tape.constant(x.clone());
            let fwd = forward(&cfg, b, None, &x, &mut Quantizer::Noise(rng(seed ^ 77)))?;
            Ok(rd_loss(&fwd, &x, lambda)?.loss)
        });
    }
    backbone.freeze();
    let mut prompts: ParamStore<f64> = lpmc::lpm::init_prompt_set(&cfg, seed).unwrap();
    jitter(&mut prompts, seed, 0.05);
    check_store(seed, &prompts, samples, |tape, p| {
        let b = backbone.bind(tape);
        let x = tape.constant(x.clone());
        let binding = PromptBinding {
            params: p,
            mode: PromptMode::Active,
            norm: NormMode::Train,
        };
        let fwd = forward(
            &cfg,
            &b,
            Some(binding),
            &x,
            &mut Quantizer::Noise(rng(seed ^ 77)),
        )?;
        Ok(rd_loss(&fwd, &x, lambda)?.loss)
    })
}
