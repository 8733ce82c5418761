//! Prompt-augmented (shifted-)window multi-head self-attention.
//!
//! Image tokens are split into `s×s` windows and prompt tokens, living on a
//! grid of half the resolution, into `s/2 × s/2` windows so both partitions
//! produce the same window count. Queries come from image tokens only; keys
//! and values are the concatenation `[I; P]`. The relative-position bias of
//! the image block is extended with zero columns for the prompt keys, so the
//! prompt tokens carry no positional preference.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Additive logit that removes a key from a query's softmax.
pub const MASK_VALUE: f64 = -1e9;

/// How prompt keys take part in attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Active,
    /// Prompt logits pushed to [`MASK_VALUE`]; reproduces plain window attention.
    Masked,
}

/// Largest multiple of 4 not above `d` that tiles an `h×w` grid.
pub fn effective_window(h: usize, w: usize, d: usize) -> Result<usize> {
    (1..=d / 4)
        .rev()
        .map(|m| 4 * m)
        .find(|&s| h.is_multiple_of(s) && w.is_multiple_of(s))
        .ok_or_else(|| {
            Error::Shape(format!(
                "token grid {h}x{w} cannot be tiled by windows of size 4..={d}"
            ))
        })
}

/// Window layout of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub shift: usize,
}

impl WindowGeometry {
    /// Shifting is skipped when the grid is a single window: there is no
    /// window boundary to cross.
    pub fn new(h: usize, w: usize, d: usize, shifted: bool) -> Result<Self> {
        let size = effective_window(h, w, d)?;
        let single = h == size && w == size;
        Ok(Self {
            h,
            w,
            size,
            shift: if shifted && !single { size / 2 } else { 0 },
        })
    }

    pub fn windows(&self) -> usize {
        (self.h / self.size) * (self.w / self.size)
    }

    /// Geometry of the matching prompt grid.
    pub fn prompt(&self) -> WindowGeometry {
        WindowGeometry {
            h: self.h / 2,
            w: self.w / 2,
            size: self.size / 2,
            shift: self.shift / 2,
        }
    }

    fn tokens(&self) -> usize {
        self.size * self.size
    }

    /// For each grid cell in row-major order, its `(window, slot)` after a
    /// cyclic shift by `-shift` on both axes.
    fn cell_slots(&self) -> Vec<(usize, usize)> {
        let (s, wx) = (self.size, self.w / self.size);
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            let ry = (y + self.h - self.shift) % self.h;
            for x in 0..self.w {
                let rx = (x + self.w - self.shift) % self.w;
                let win = (ry / s) * wx + rx / s;
                out.push((win, (ry % s) * s + rx % s));
            }
        }
        out
    }

    /// Gather indices taking `[B, h, w, C]` to `[B * windows, s², C]`.
    pub fn partition_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let (nw, t) = (self.windows(), self.tokens());
        let cells = self.h * self.w;
        let mut index = vec![0u32; batch * cells * channels];
        for (cell, (win, slot)) in self.cell_slots().into_iter().enumerate() {
            for b in 0..batch {
                let src = (b * cells + cell) * channels;
                let dst = ((b * nw + win) * t + slot) * channels;
                for c in 0..channels {
                    index[dst + c] = (src + c) as u32;
                }
            }
        }
        index
    }

    /// Gather indices taking `[B * windows, s², C]` back to `[B, h, w, C]`.
    pub fn reverse_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let (nw, t) = (self.windows(), self.tokens());
        let cells = self.h * self.w;
        let mut index = vec![0u32; batch * cells * channels];
        for (cell, (win, slot)) in self.cell_slots().into_iter().enumerate() {
            for b in 0..batch {
                let dst = (b * cells + cell) * channels;
                let src = ((b * nw + win) * t + slot) * channels;
                for c in 0..channels {
                    index[dst + c] = (src + c) as u32;
                }
            }
        }
        index
    }

    /// Region label of each `(window, slot)` in the shifted frame. Tokens in
    /// one window but from different regions were not adjacent before the
    /// cyclic shift.
    fn region_labels(&self) -> Vec<u8> {
        let region = |r: usize, n: usize| -> u8 {
            if self.shift == 0 || r < n - self.size {
                0
            } else if r < n - self.shift {
                1
            } else {
                2
            }
        };
        let (s, wx) = (self.size, self.w / self.size);
        let mut labels = vec![0u8; self.windows() * self.tokens()];
        for ry in 0..self.h {
            for rx in 0..self.w {
                let win = (ry / s) * wx + rx / s;
                labels[win * self.tokens() + (ry % s) * s + rx % s] =
                    region(ry, self.h) * 3 + region(rx, self.w);
            }
        }
        labels
    }
}

/// Additive mask `[windows, s², s² + (s/2)²]` (prompt columns present when
/// `with_prompts`). Entries are 0 or [`MASK_VALUE`].
pub fn attention_mask(geo: &WindowGeometry, with_prompts: bool, mode: PromptMode) -> Vec<f64> {
    let img = geo.region_labels();
    let pgeo = geo.prompt();
    let prm = if with_prompts {
        pgeo.region_labels()
    } else {
        vec![]
    };
    let (t, pt) = (geo.tokens(), if with_prompts { pgeo.tokens() } else { 0 });
    let cols = t + pt;
    let mut mask = vec![0.0; geo.windows() * t * cols];
    for w in 0..geo.windows() {
        for i in 0..t {
            let q = img[w * t + i];
            let row = &mut mask[(w * t + i) * cols..(w * t + i + 1) * cols];
            for j in 0..t {
                if img[w * t + j] != q {
                    row[j] = MASK_VALUE;
                }
            }
            for j in 0..pt {
                if mode == PromptMode::Masked || prm[w * pt + j] != q {
                    row[t + j] = MASK_VALUE;
                }
            }
        }
    }
    mask
}

/// Index into a `(2d-1)² × heads` relative-position table for every
/// `(head, query, key)` of an `s×s` window, `s ≤ d`.
pub fn relative_position_index(s: usize, d: usize, heads: usize) -> Vec<u32> {
    let t = s * s;
    let span = 2 * d - 1;
    let mut index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (iy, ix) = (i / s, i % s);
            for j in 0..t {
                let (jy, jx) = (j / s, j % s);
                let rel = (iy + d - 1 - jy) * span + (ix + d - 1 - jx);
                index.push((rel * heads + h) as u32);
            }
        }
    }
    index
}

/// Splits a `[h, w, C]` or `[B, h, w, C]` grid into `[N, s², C]` windows.
pub fn window_partition<F: Real>(tokens: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = grid_dims(tokens.shape())?;
    check_tiles(h, w, s)?;
    let geo = WindowGeometry {
        h,
        w,
        size: s,
        shift: 0,
    };
    let index = geo.partition_index(b, c);
    let data = index.iter().map(|&i| tokens.data()[i as usize]).collect();
    Tensor::new(&[b * geo.windows(), s * s, c], data)
}

/// Inverse of [`window_partition`] for an `h×w` grid.
pub fn window_reverse<F: Real>(
    windows: &Tensor<F>,
    h: usize,
    w: usize,
    s: usize,
) -> Result<Tensor<F>> {
    check_tiles(h, w, s)?;
    let geo = WindowGeometry {
        h,
        w,
        size: s,
        shift: 0,
    };
    let (n, t, c) = match *windows.shape() {
        [n, t, c] if t == s * s && n % geo.windows() == 0 => (n, t, c),
        _ => {
            return Err(Error::Shape(format!(
                "window_reverse: {:?} is not [k*{}, {}, C]",
                windows.shape(),
                geo.windows(),
                s * s
            )))
        }
    };
    let _ = t;
    let b = n / geo.windows();
    let index = geo.reverse_index(b, c);
    let data = index.iter().map(|&i| windows.data()[i as usize]).collect();
    Tensor::new(&[b, h, w, c], data)
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape(format!(
            "expected [B,] h, w, C grid, got {shape:?}"
        ))),
    }
}

fn check_tiles(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Shape(format!(
            "{h}x{w} grid is not divisible by window {s}"
        )));
    }
    Ok(())
}

/// Appends `d²/4` zero columns to a pretrained `[.., d², d²]` bias so prompt
/// keys receive no positional bias.
pub fn expand_bias<F: Real>(b_prime: &Tensor<F>) -> Result<Tensor<F>> {
    let nd = b_prime.shape().len();
    let t = *b_prime.shape().last().unwrap_or(&0);
    if nd < 2 || b_prime.shape()[nd - 2] != t {
        return Err(Error::Shape(format!(
            "bias {:?} is not [.., d², d²]",
            b_prime.shape()
        )));
    }
    let pt = t / 4;
    let mut data = Vec::with_capacity(b_prime.numel() / t * (t + pt));
    for row in b_prime.data().chunks(t) {
        data.extend_from_slice(row);
        data.extend(std::iter::repeat_n(F::zero(), pt));
    }
    let mut shape = b_prime.shape().to_vec();
    shape[nd - 1] = t + pt;
    Tensor::new(&shape, data)
}

/// Frozen projections of one attention layer.
pub struct AttentionWeights<'a, 't, F: Real> {
    /// `[3C, C]`, rows ordered Q, K, V.
    pub qkv_weight: &'a Var<'t, F>,
    pub qkv_bias: &'a Var<'t, F>,
    pub proj_weight: &'a Var<'t, F>,
    pub proj_bias: &'a Var<'t, F>,
    /// `[(2d-1)², heads]`.
    pub rel_table: &'a Var<'t, F>,
    pub heads: usize,
    /// Configured window `d` the table was built for.
    pub window: usize,
}

/// Result of one windowed attention pass.
pub struct AttentionOutput<'t, F: Real> {
    /// `[B, h, w, C]`.
    pub tokens: Var<'t, F>,
    /// Attention probabilities `[B * windows, heads, s², L]`.
    pub probs: Var<'t, F>,
}

fn to_heads<'t, F: Real>(x: &Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
    let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(&[n, l, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * heads, l, c / heads])
}

/// Positional bias `[heads, s², s²]` gathered from the table, expanded with
/// zero prompt columns when `prompt_cols > 0`.
pub fn window_bias<'t, F: Real>(
    table: &Var<'t, F>,
    s: usize,
    d: usize,
    heads: usize,
    prompt_cols: usize,
) -> Result<Var<'t, F>> {
    let t = s * s;
    let b = table.gather(
        Rc::new(relative_position_index(s, d, heads)),
        &[heads, t, t],
    )?;
    if prompt_cols == 0 {
        return Ok(b);
    }
    let zeros = table
        .tape()
        .constant(Tensor::zeros(&[heads, t, prompt_cols]));
    Var::concat(&[b, zeros], 2)
}

/// Attention over pre-partitioned windows.
///
/// `image` is `[B * windows, s², C]`; `prompts`, when given, is
/// `[B * windows, s²/4, C]`. `mask` is `[windows, heads, s², L]` and is
/// shared by every image in the batch.
pub fn prompt_wmsa<'t, F: Real>(
    image: &Var<'t, F>,
    prompts: Option<&Var<'t, F>>,
    weights: &AttentionWeights<'_, 't, F>,
    bias: &Var<'t, F>,
    mask: Option<&Var<'t, F>>,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let (n, t, c) = match *image.shape() {
        [n, t, c] => (n, t, c),
        _ => {
            return Err(Error::Shape(format!(
                "image windows {:?} are not 3-d",
                image.shape()
            )))
        }
    };
    let heads = weights.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide {c} channels"
        )));
    }
    let qkv = image.linear(weights.qkv_weight, Some(weights.qkv_bias))?;
    let [q, mut k, mut v]: [Var<'t, F>; 3] = qkv.split(2, &[c, c, c])?.try_into().unwrap();
    if let Some(p) = prompts {
        if p.shape().len() != 3 || p.shape()[0] != n || p.shape()[2] != c {
            return Err(Error::Shape(format!(
                "prompt windows {:?} do not pair with image windows {:?}",
                p.shape(),
                image.shape()
            )));
        }
        let kv_w = weights.qkv_weight.slice(0, c, 2 * c)?;
        let kv_b = weights.qkv_bias.slice(0, c, 2 * c)?;
        let kv = p.linear(&kv_w, Some(&kv_b))?;
        let [kp, vp]: [Var<'t, F>; 2] = kv.split(2, &[c, c])?.try_into().unwrap();
        k = Var::concat(&[k, kp], 1)?;
        v = Var::concat(&[v, vp], 1)?;
    }
    let l = k.shape()[1];
    if bias.shape() != [heads, t, l] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match [{heads}, {t}, {l}]",
            bias.shape()
        )));
    }
    let scale = F::c(1.0 / ((c / heads) as f64).sqrt());
    let (qh, kh, vh) = (
        to_heads(&q, heads)?,
        to_heads(&k, heads)?,
        to_heads(&v, heads)?,
    );
    let mut logits = qh
        .matmul_t(&kh, false, true)?
        .mul_scalar(scale)
        .reshape(&[n, heads, t, l])?
        .bias_add(bias, 1)?;
    if let Some(m) = mask {
        let nw = m.shape()[0];
        if m.shape() != [nw, heads, t, l] || n % nw != 0 {
            return Err(Error::Shape(format!(
                "mask {:?} does not match {n} windows of [{heads}, {t}, {l}]",
                m.shape()
            )));
        }
        logits = logits.reshape(&[n / nw, nw, heads, t, l])?.bias_add(m, 1)?;
    }
    let probs = logits.softmax().reshape(&[n * heads, t, l])?;
    let out = probs
        .matmul(&vh)?
        .reshape(&[n, heads, t, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, t, c])?
        .linear(weights.proj_weight, Some(weights.proj_bias))?;
    Ok((out, probs.reshape(&[n, heads, t, l])?))
}

/// Full (S)W-MSA on a token grid: cyclic shift, window partition, attention
/// with the cross-boundary mask, reverse partition, unshift.
///
/// `tokens` is `[B, h, w, C]` (already layer-normed); `prompts` is
/// `[B, h/2, w/2, C]`.
pub fn windowed_attention<'t, F: Real>(
    tokens: &Var<'t, F>,
    prompts: Option<(&Var<'t, F>, PromptMode)>,
    weights: &AttentionWeights<'_, 't, F>,
    shifted: bool,
) -> Result<AttentionOutput<'t, F>> {
    let (b, h, w, c) = grid_dims(tokens.shape())?;
    let geo = WindowGeometry::new(h, w, weights.window, shifted)?;
    let pgeo = geo.prompt();
    let tape = tokens.tape();
    let image = tokens.gather(
        Rc::new(geo.partition_index(b, c)),
        &[b * geo.windows(), geo.tokens(), c],
    )?;
    let (prompt_windows, mode) = match prompts {
        Some((p, mode)) => {
            if p.shape() != [b, h / 2, w / 2, c] {
                return Err(Error::Shape(format!(
                    "prompt grid {:?} is not half of token grid {:?}",
                    p.shape(),
                    tokens.shape()
                )));
            }
            let pw = p.gather(
                Rc::new(pgeo.partition_index(b, c)),
                &[b * pgeo.windows(), pgeo.tokens(), c],
            )?;
            (Some(pw), mode)
        }
        None => (None, PromptMode::Active),
    };
    let with_prompts = prompt_windows.is_some();
    let prompt_cols = if with_prompts { pgeo.tokens() } else { 0 };
    let bias = window_bias(
        weights.rel_table,
        geo.size,
        weights.window,
        weights.heads,
        prompt_cols,
    )?;
    let needs_mask = geo.shift > 0 || (with_prompts && mode == PromptMode::Masked);
    let mask = if needs_mask {
        let m = attention_mask(&geo, with_prompts, mode);
        let (t, l) = (geo.tokens(), geo.tokens() + prompt_cols);
        let mut full = Vec::with_capacity(geo.windows() * weights.heads * t * l);
        for win in m.chunks(t * l) {
            for _ in 0..weights.heads {
                full.extend(win.iter().map(|&v| F::c(v)));
            }
        }
        Some(tape.constant(Tensor::new(&[geo.windows(), weights.heads, t, l], full)?))
    } else {
        None
    };
    let (out, probs) = prompt_wmsa(
        &image,
        prompt_windows.as_ref(),
        weights,
        &bias,
        mask.as_ref(),
    )?;
    let tokens = out.gather(Rc::new(geo.reverse_index(b, c)), &[b, h, w, c])?;
    Ok(AttentionOutput { tokens, probs })
}

/// Mean (over heads) softmax mass each image query assigns to prompt keys,
/// mapped back to grid order `[B, h, w]`.
pub fn prompt_mass<F: Real>(probs: &Var<'_, F>, batch: usize, geo: &WindowGeometry) -> Vec<f64> {
    let (n, heads, t, l) = (
        probs.shape()[0],
        probs.shape()[1],
        probs.shape()[2],
        probs.shape()[3],
    );
    let mut per_slot = vec![0.0; n * t];
    for (row, chunk) in probs.data().chunks(l).enumerate() {
        let win = row / (heads * t);
        let slot = row % t;
        let m: f64 = chunk[t..].iter().map(|v| v.f64()).sum();
        per_slot[win * t + slot] += m / heads as f64;
    }
    geo.reverse_index(batch, 1)
        .iter()
        .map(|&i| per_slot[i as usize])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    #[test]
    fn partition_row_major_layout() {
        let grid = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64);
        let w = window_partition(&grid, 2).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        assert_eq!(&w.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&w.data()[4..8], &[2., 3., 6., 7.]);
    }

    #[test]
    fn partition_whole_grid_is_one_window() {
        let grid = Tensor::<f64>::from_fn(&[4, 4, 2], |i| i as f64);
        let w = window_partition(&grid, 4).unwrap();
        assert_eq!(w.shape()[0], 1);
        assert!(window_partition(&grid, 3).is_err());
    }

    proptest! {
        #[test]
        fn partition_round_trip(b in 1usize..3, hw in 1usize..4, ww in 1usize..4, s in prop::sample::select(vec![1usize, 2, 4]), c in 1usize..4, seed in any::<u64>()) {
            let (h, w) = (hw * s, ww * s);
            let grid = Tensor::<f64>::from_fn(&[b, h, w, c], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64);
            let back = window_reverse(&window_partition(&grid, s).unwrap(), h, w, s).unwrap();
            prop_assert_eq!(back, grid);
        }

        #[test]
        fn shifted_partition_round_trip(hw in 1usize..4, ww in 1usize..4, c in 1usize..3) {
            let geo = WindowGeometry::new(hw * 8, ww * 8, 8, true).unwrap();
            let p = geo.partition_index(2, c);
            let r = geo.reverse_index(2, c);
            for (i, &ri) in r.iter().enumerate() {
                prop_assert_eq!(p[ri as usize] as usize, i);
            }
        }
    }

    #[test]
    fn effective_window_falls_back() {
        assert_eq!(effective_window(32, 32, 8).unwrap(), 8);
        assert_eq!(effective_window(12, 16, 8).unwrap(), 4);
        assert_eq!(effective_window(4, 4, 8).unwrap(), 4);
        assert!(effective_window(6, 6, 8).is_err());
    }

    #[test]
    fn expand_bias_appends_zero_columns() {
        let b = Tensor::<f64>::from_fn(&[4, 4], |i| i as f64 + 1.0);
        let e = expand_bias(&b).unwrap();
        assert_eq!(e.shape(), &[4, 5]);
        for (r, row) in e.data().chunks(5).enumerate() {
            assert_eq!(&row[..4], &b.data()[r * 4..r * 4 + 4]);
            assert_eq!(row[4], 0.0);
        }
        assert_eq!(e.data().iter().sum::<f64>(), b.data().iter().sum::<f64>());
        let z = expand_bias(&Tensor::<f64>::zeros(&[16, 16])).unwrap();
        assert_eq!(z.shape(), &[16, 20]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_window_attends_uniformly() {
        // d=2 window, C=1, identity projections, zero bias: 4 image tokens and
        // one prompt token, all ones.
        let tape = Tape::<f64>::new();
        let one = |shape: &[usize]| tape.constant(Tensor::full(shape, 1.0));
        let zero = |shape: &[usize]| tape.constant(Tensor::zeros(shape));
        let qkv_w = one(&[3, 1]);
        let (qkv_b, proj_w, proj_b) = (zero(&[3]), one(&[1, 1]), zero(&[1]));
        let table = zero(&[9, 1]);
        let weights = AttentionWeights {
            qkv_weight: &qkv_w,
            qkv_bias: &qkv_b,
            proj_weight: &proj_w,
            proj_bias: &proj_b,
            rel_table: &table,
            heads: 1,
            window: 2,
        };
        let image = one(&[1, 4, 1]);
        let prompts = one(&[1, 1, 1]);
        let bias = window_bias(&table, 2, 2, 1, 1).unwrap();
        let (out, probs) = prompt_wmsa(&image, Some(&prompts), &weights, &bias, None).unwrap();
        for &p in probs.data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        for &o in out.data() {
            assert!((o - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_blocks_cross_region_pairs() {
        let geo = WindowGeometry::new(16, 16, 8, true).unwrap();
        assert_eq!(geo.shift, 4);
        let mask = attention_mask(&geo, true, PromptMode::Active);
        let (t, l) = (64, 80);
        // The last window straddles both wrap-around seams on both axes.
        let last = &mask[3 * t * l..];
        let blocked = last.iter().filter(|&&v| v <= -1e8).count();
        assert!(blocked > 0);
        // First window has no seam.
        assert!(mask[..t * l].iter().all(|&v| v == 0.0));
        // Masked prompt mode blocks all prompt columns.
        let masked = attention_mask(&geo, true, PromptMode::Masked);
        for row in masked.chunks(l) {
            assert!(row[t..].iter().all(|&v| v == MASK_VALUE));
        }
    }

    #[test]
    fn single_window_grid_is_never_shifted() {
        let geo = WindowGeometry::new(8, 8, 8, true).unwrap();
        assert_eq!(geo.shift, 0);
        assert_eq!(geo, WindowGeometry::new(8, 8, 8, false).unwrap());
    }
}
