use std::rc::Rc;

use super::{fresh_gemm, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn conv(
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "input {h}x{w} with padding {pad} is smaller than kernel {k}"
            )));
        }
        Ok(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Column matrices of `n` stacked inputs, `rows x cols` each, written in
    /// one pass with zeros for padding taps.
    fn im2col<F: Real>(&self, x: &[F], n: usize) -> Vec<F> {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(n * self.rows() * self.cols());
        for xb in x.chunks(self.channels * plane).take(n) {
            for ch in xb.chunks(plane) {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..self.ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= self.h as isize {
                                out.extend(std::iter::repeat_n(F::zero(), self.wo));
                                continue;
                            }
                            let row = &ch[iy as usize * self.w..][..self.w];
                            out.extend((0..self.wo).map(|ox| {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix < 0 || ix >= self.w as isize {
                                    F::zero()
                                } else {
                                    row[ix as usize]
                                }
                            }));
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Geometry::im2col`] for one input: accumulates columns
    /// back onto `x`.
    fn col2im<F: Real>(&self, cols: &[F], x: &mut [F]) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let plane = self.h * self.w;
        let mut rows = cols.chunks(self.cols());
        for ch in x.chunks_mut(plane).take(self.channels) {
            for ky in 0..k {
                for kx in 0..k {
                    let col = rows.next().expect("column matrix matches the geometry");
                    for (oy, run) in col.chunks(self.wo).enumerate() {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let row = &mut ch[iy as usize * self.w..][..self.w];
                        for (ox, &v) in run.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "{op}: expected NCHW input, got {shape:?}"
        ))),
    }
}

/// Per-channel batch statistics returned by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<'t, F: Real> Var<'t, F> {
    /// 2-d convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, F>,
        bias: Option<&Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, F>> {
        let (n, c, h, w) = nchw(&self.shape, "conv2d")?;
        let (o, k) = match *weight.shape() {
            [o, ci, k, k2] if ci == c && k == k2 => (o, k),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: weight {:?} does not match input channels {c} of {:?}",
                    weight.shape, self.shape
                )))
            }
        };
        let geo = Geometry::conv(c, h, w, k, stride, pad)?;
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = c * h * w;
        let out_len = o * cols;
        let block = rows * cols;
        let columns = geo.im2col(&self.data, n);
        let y = fresh_gemm(n, (o, rows, cols), (cols as isize, 1), |b| {
            (
                &weight.data[..],
                (rows as isize, 1),
                &columns[b * block..(b + 1) * block],
                (cols as isize, 1),
            )
        });
        // Columns are reused by the weight gradient when there is one.
        let kept = (self.tape.is_recording() && weight.id.is_some()).then(|| Rc::new(columns));
        let conv_out = self
            .tape
            .push(vec![n, o, geo.ho, geo.wo], Rc::new(y), &[self, weight], {
                let (x, wd) = (self.data.clone(), weight.data.clone());
                move |g, needs| {
                    let dw = needs[1].then(|| {
                        let columns = match &kept {
                            Some(c) => c.clone(),
                            None => Rc::new(geo.im2col(&x, n)),
                        };
                        let mut dw = vec![F::zero(); o * rows];
                        for b in 0..n {
                            F::gemm(
                                o,
                                cols,
                                rows,
                                &g[b * out_len..(b + 1) * out_len],
                                (cols as isize, 1),
                                &columns[b * block..(b + 1) * block],
                                (1, cols as isize),
                                F::one(),
                                &mut dw,
                                (rows as isize, 1),
                            );
                        }
                        dw
                    });
                    let dx = needs[0].then(|| {
                        let dcols = fresh_gemm(n, (rows, o, cols), (cols as isize, 1), |b| {
                            (
                                &wd[..],
                                (1, rows as isize),
                                &g[b * out_len..(b + 1) * out_len],
                                (cols as isize, 1),
                            )
                        });
                        let mut dx = vec![F::zero(); n * in_len];
                        for (dc, dxb) in dcols.chunks(block).zip(dx.chunks_mut(in_len)) {
                            geo.col2im(dc, dxb);
                        }
                        dx
                    });
                    vec![dx, dw]
                }
            });
        match bias {
            Some(b) => conv_out.bias_add(b, 1),
            None => Ok(conv_out),
        }
    }

    /// Transposed convolution, the adjoint of [`Var::conv2d`] with the same
    /// geometry. `weight` is `[in, out, k, k]`; output extent is
    /// `(H - 1) * stride - 2 * pad + k`.
    pub fn deconv2d(
        &self,
        weight: &Var<'t, F>,
        bias: Option<&Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, F>> {
        let (n, cin, h, w) = nchw(&self.shape, "deconv2d")?;
        let (cout, k) = match *weight.shape() {
            [ci, co, k, k2] if ci == cin && k == k2 => (co, k),
            _ => {
                return Err(Error::Shape(format!(
                    "deconv2d: weight {:?} does not match input channels {cin} of {:?}",
                    weight.shape, self.shape
                )))
            }
        };
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let full = (h.max(1) - 1) * stride + k;
        if full < 2 * pad + 1 {
            return Err(Error::Shape(format!(
                "deconv2d: padding {pad} consumes the whole {full}-wide output"
            )));
        }
        let ho = full - 2 * pad;
        let wo = (w.max(1) - 1) * stride + k - 2 * pad;
        // The conv mapping the output grid back onto the input grid.
        let geo = Geometry::conv(cout, ho, wo, k, stride, pad)?;
        debug_assert_eq!((geo.ho, geo.wo), (h, w));
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = cin * h * w;
        let out_len = cout * ho * wo;
        let block = rows * cols;
        let columns = fresh_gemm(n, (rows, cin, cols), (cols as isize, 1), |b| {
            (
                &weight.data[..],
                (1, rows as isize),
                &self.data[b * in_len..(b + 1) * in_len],
                (cols as isize, 1),
            )
        });
        let mut y = vec![F::zero(); n * out_len];
        for (cb, yb) in columns.chunks(block).zip(y.chunks_mut(out_len)) {
            geo.col2im(cb, yb);
        }
        let out = self
            .tape
            .push(vec![n, cout, ho, wo], Rc::new(y), &[self, weight], {
                let (x, wd) = (self.data.clone(), weight.data.clone());
                move |g, needs| {
                    let gcols = geo.im2col(g, n);
                    let dx = needs[0].then(|| {
                        fresh_gemm(n, (cin, rows, cols), (cols as isize, 1), |b| {
                            (
                                &wd[..],
                                (rows as isize, 1),
                                &gcols[b * block..(b + 1) * block],
                                (cols as isize, 1),
                            )
                        })
                    });
                    let dw = needs[1].then(|| {
                        let mut dw = vec![F::zero(); cin * rows];
                        for b in 0..n {
                            F::gemm(
                                cin,
                                cols,
                                rows,
                                &x[b * in_len..(b + 1) * in_len],
                                (cols as isize, 1),
                                &gcols[b * block..(b + 1) * block],
                                (1, cols as isize),
                                F::one(),
                                &mut dw,
                                (rows as isize, 1),
                            );
                        }
                        dw
                    });
                    vec![dx, dw]
                }
            });
        match bias {
            Some(b) => out.bias_add(b, 1),
            None => Ok(out),
        }
    }

    /// Max pooling with `-inf` padding. Ties route gradient to the first
    /// maximum in row-major scan order.
    pub fn maxpool2d(&self, k: usize, stride: usize, pad: usize) -> Result<Var<'t, F>> {
        let (n, c, h, w) = nchw(&self.shape, "maxpool2d")?;
        let geo = Geometry::conv(1, h, w, k, stride, pad)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let planes = n * c;
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &self.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = u32::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best_i == u32::MAX || plane[i] > best {
                                best = plane[i];
                                best_i = i as u32;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(if best_i == u32::MAX {
                        u32::MAX
                    } else {
                        (p * h * w) as u32 + best_i
                    });
                }
            }
        }
        let total = self.numel();
        Ok(self
            .tape
            .push(vec![n, c, ho, wo], Rc::new(y), &[self], move |g, _| {
                let mut dx = vec![F::zero(); total];
                for (&a, &gv) in arg.iter().zip(g) {
                    if a != u32::MAX {
                        dx[a as usize] += gv;
                    }
                }
                vec![Some(dx)]
            }))
    }

    /// Training-mode batch normalization over `N, H, W` per channel.
    /// Returns the normalized output and the batch statistics (biased
    /// variance) used to produce it.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, F>,
        beta: &Var<'t, F>,
        eps: f64,
    ) -> Result<(Var<'t, F>, BatchStats<F>)> {
        let (n, c, h, w) = nchw(&self.shape, "batch_norm")?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: affine {:?}/{:?} for {c} channels",
                gamma.shape, beta.shape
            )));
        }
        let hw = h * w;
        let m = F::c((n * hw) as f64);
        let eps = F::c(eps);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &self.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += s.iter().copied().sum::<F>();
            }
        }
        for v in &mut mean {
            *v = *v / m;
        }
        for b in 0..n {
            for ch in 0..c {
                let s = &self.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += s
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<F>();
            }
        }
        for v in &mut var {
            *v = *v / m;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); self.numel()];
        let mut y = vec![F::zero(); self.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (self.data[i] - mean[ch]) * inv_std[ch];
                    y[i] = xhat[i] * gamma.data[ch] + beta.data[ch];
                }
            }
        }
        let gd = gamma.data.clone();
        let out = self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, gamma, beta],
            move |g, needs| {
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![F::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let s1 = dbeta[ch] * gd[ch] / m;
                            let s2 = dgamma[ch] * gd[ch] / m;
                            for i in base..base + hw {
                                dx[i] = inv_std[ch] * (g[i] * gd[ch] - s1 - xhat[i] * s2);
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            },
        );
        Ok((out, BatchStats { mean, var }))
    }
}
