use std::rc::Rc;

use super::{check_same_shape, fresh_gemm, Real, Var};
use crate::error::{Error, Result};

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn fast_tanh<F: Real>(u: F) -> F {
    let two = F::c(2.0);
    F::one() - two / ((two * u).fast_exp() + F::one())
}

/// Index value that makes [`Var::gather`] emit zero.
pub const GATHER_ZERO: u32 = u32::MAX;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

impl<'t, F: Real> Var<'t, F> {
    fn unary(&self, f: impl Fn(F) -> F, df: impl Fn(F, F) -> F + 'static) -> Var<'t, F> {
        let y: Rc<Vec<F>> = Rc::new(self.data.iter().map(|&v| f(v)).collect());
        let (x, yc) = (self.data.clone(), y.clone());
        self.tape.push(self.shape.clone(), y, &[self], move |g, _| {
            let dx = g
                .iter()
                .zip(x.iter().zip(yc.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("add", &self.shape, &other.shape)?;
        let y = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, other],
            |g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("sub", &self.shape, &other.shape)?;
        let y = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, other],
            |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("mul", &self.shape, &other.shape)?;
        let y = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.data.clone(), other.data.clone());
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, other],
            move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            },
        ))
    }

    pub fn add_scalar(&self, s: F) -> Var<'t, F> {
        let y = self.data.iter().map(|&v| v + s).collect();
        self.tape
            .push(self.shape.clone(), Rc::new(y), &[self], |g, _| {
                vec![Some(g.to_vec())]
            })
    }

    pub fn mul_scalar(&self, s: F) -> Var<'t, F> {
        let y = self.data.iter().map(|&v| v * s).collect();
        self.tape
            .push(self.shape.clone(), Rc::new(y), &[self], move |g, _| {
                vec![Some(g.iter().map(|&v| v * s).collect())]
            })
    }

    /// Takes the values `values` while passing gradients through to `self`
    /// unchanged.
    pub fn straight_through(&self, values: Vec<F>) -> Result<Var<'t, F>> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "straight_through: {} values for {:?}",
                values.len(),
                self.shape
            )));
        }
        Ok(self
            .tape
            .push(self.shape.clone(), Rc::new(values), &[self], |g, _| {
                vec![Some(g.to_vec())]
            }))
    }

    pub fn neg(&self) -> Var<'t, F> {
        self.mul_scalar(-F::one())
    }

    /// Splits `self` as `[pre, c, post]` where `c` covers the dimensions
    /// `axis..axis + b.ndim` and must match `b`'s shape.
    fn broadcast_layout(
        &self,
        b: &Var<'t, F>,
        axis: usize,
        op: &str,
    ) -> Result<(usize, usize, usize)> {
        let end = axis + b.shape.len();
        if end > self.shape.len() || self.shape[axis..end] != b.shape[..] {
            return Err(Error::Shape(format!(
                "{op}: operand {:?} does not match {:?} at axis {axis}",
                b.shape, self.shape
            )));
        }
        let pre: usize = self.shape[..axis].iter().product();
        let c = b.numel();
        let post: usize = self.shape[end..].iter().product();
        Ok((pre, c, post))
    }

    /// `x + b` with `b` broadcast over every dimension outside `axis..axis+b.ndim`.
    pub fn bias_add(&self, b: &Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
        let (pre, c, post) = self.broadcast_layout(b, axis, "bias_add")?;
        let mut y = self.data.as_ref().clone();
        for blk in y.chunks_mut(c * post) {
            if post == 1 {
                blk.iter_mut()
                    .zip(b.data.iter())
                    .for_each(|(v, &bv)| *v += bv);
            } else {
                for (row, &bv) in blk.chunks_mut(post).zip(b.data.iter()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        debug_assert_eq!(y.len(), pre * c * post);
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, b],
            move |g, needs| {
                let db = needs[1].then(|| {
                    let mut db = vec![F::zero(); c];
                    for blk in g.chunks(c * post) {
                        if post == 1 {
                            db.iter_mut().zip(blk).for_each(|(acc, &gv)| *acc += gv);
                        } else {
                            for (acc, row) in db.iter_mut().zip(blk.chunks(post)) {
                                *acc += row.iter().copied().sum::<F>();
                            }
                        }
                    }
                    db
                });
                vec![needs[0].then(|| g.to_vec()), db]
            },
        ))
    }

    /// `x * s` with `s` broadcast like [`Var::bias_add`].
    pub fn scale_mul(&self, s: &Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
        let (pre, c, post) = self.broadcast_layout(s, axis, "scale_mul")?;
        let mut y = self.data.as_ref().clone();
        for p in 0..pre {
            for (ci, &sv) in s.data.iter().enumerate() {
                let base = (p * c + ci) * post;
                for v in &mut y[base..base + post] {
                    *v *= sv;
                }
            }
        }
        let (x, sd) = (self.data.clone(), s.data.clone());
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, s],
            move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = g.to_vec();
                    for p in 0..pre {
                        for (ci, &sv) in sd.iter().enumerate() {
                            let base = (p * c + ci) * post;
                            for v in &mut dx[base..base + post] {
                                *v *= sv;
                            }
                        }
                    }
                    dx
                });
                let ds = needs[1].then(|| {
                    let mut ds = vec![F::zero(); c];
                    for p in 0..pre {
                        for (ci, acc) in ds.iter_mut().enumerate() {
                            let base = (p * c + ci) * post;
                            *acc += g[base..base + post]
                                .iter()
                                .zip(&x[base..base + post])
                                .map(|(&g, &x)| g * x)
                                .sum::<F>();
                        }
                    }
                    ds
                });
                vec![dx, ds]
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, F> {
        let (k, a) = (F::c(SQRT_2_OVER_PI), F::c(GELU_COEF));
        let half = F::c(0.5);
        let three = F::c(3.0);
        self.unary(
            move |x| half * x * (F::one() + fast_tanh(k * (x + a * x * x * x))),
            move |x, _| {
                let t = fast_tanh(k * (x + a * x * x * x));
                half * (F::one() + t)
                    + half * x * (F::one() - t * t) * k * (F::one() + three * a * x * x)
            },
        )
    }

    pub fn leaky_relu(&self, slope: F) -> Var<'t, F> {
        self.unary(
            move |x| if x > F::zero() { x } else { x * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    pub fn tanh(&self) -> Var<'t, F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.unary(
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn softplus(&self) -> Var<'t, F> {
        let threshold = F::c(20.0);
        self.unary(
            move |x| {
                if x > threshold {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| F::one() / (F::one() + (-x).exp()),
        )
    }

    pub fn abs(&self) -> Var<'t, F> {
        self.unary(|x| x.abs(), |x, _| x.signum())
    }

    pub fn log(&self) -> Var<'t, F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn recip(&self) -> Var<'t, F> {
        self.unary(|x| F::one() / x, |_, y| -y * y)
    }

    pub fn square(&self) -> Var<'t, F> {
        let two = F::c(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&self) -> Var<'t, F> {
        self.unary(
            |x| F::c(normal_cdf(x.f64())),
            |x, _| F::c(normal_pdf(x.f64())),
        )
    }

    /// `max(x, lo)`; no gradient flows where the floor is active.
    pub fn clamp_min(&self, lo: F) -> Var<'t, F> {
        self.unary(
            move |x| if x < lo { lo } else { x },
            move |x, _| if x < lo { F::zero() } else { F::one() },
        )
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s: F = self.data.iter().copied().sum();
        let n = self.numel();
        self.tape
            .push(vec![], Rc::new(vec![s]), &[self], move |g, _| {
                vec![Some(vec![g[0]; n])]
            })
    }

    pub fn mean(&self) -> Var<'t, F> {
        let n = F::c(self.numel() as f64);
        self.sum().mul_scalar(F::one() / n)
    }

    /// Matrix product over the last two axes, optionally transposing either
    /// operand. Inputs are 2-d, or 3-d with a shared leading batch extent.
    pub fn matmul_t(&self, other: &Var<'t, F>, trans_a: bool, trans_b: bool) -> Result<Var<'t, F>> {
        let (batch, ra, ca) = mat_dims(&self.shape)?;
        let (batch_b, rb, cb) = mat_dims(&other.shape)?;
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if batch != batch_b || k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?}{} x {:?}{} do not conform",
                self.shape,
                if trans_a { "ᵀ" } else { "" },
                other.shape,
                if trans_b { "ᵀ" } else { "" },
            )));
        }
        let sa = op_strides(ra, ca, trans_a);
        let sb = op_strides(rb, cb, trans_b);
        let (la, lb, lc) = (ra * ca, rb * cb, m * n);
        let y = fresh_gemm(batch, (m, k, n), (n as isize, 1), |i| {
            (
                &self.data[i * la..(i + 1) * la],
                sa,
                &other.data[i * lb..(i + 1) * lb],
                sb,
            )
        });
        let mut shape = self.shape[..self.shape.len() - 2].to_vec();
        shape.extend([m, n]);
        let (a, b) = (self.data.clone(), other.data.clone());
        Ok(self
            .tape
            .push(shape, Rc::new(y), &[self, other], move |g, needs| {
                // d op(A) = dC · op(B)ᵀ, written through op(A)'s strides.
                let da = needs[0].then(|| {
                    fresh_gemm(batch, (m, n, k), op_strides(ra, ca, trans_a), |i| {
                        (
                            &g[i * lc..(i + 1) * lc],
                            (n as isize, 1),
                            &b[i * lb..(i + 1) * lb],
                            (sb.1, sb.0),
                        )
                    })
                });
                let db = needs[1].then(|| {
                    fresh_gemm(batch, (k, m, n), op_strides(rb, cb, trans_b), |i| {
                        (
                            &a[i * la..(i + 1) * la],
                            (sa.1, sa.0),
                            &g[i * lc..(i + 1) * lc],
                            (n as isize, 1),
                        )
                    })
                });
                vec![da, db]
            }))
    }

    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_t(other, false, false)
    }

    /// `x · Wᵀ + b` over the last axis, with `W` stored `[out, in]`.
    pub fn linear(&self, weight: &Var<'t, F>, bias: Option<&Var<'t, F>>) -> Result<Var<'t, F>> {
        let cin = *self
            .shape
            .last()
            .ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = self.numel() / cin.max(1);
        let flat = self.reshape(&[rows, cin])?;
        let mut y = flat.matmul_t(weight, false, true)?;
        if let Some(b) = bias {
            y = y.bias_add(b, 1)?;
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = weight.shape[0];
        y.reshape(&shape)
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn softmax(&self) -> Var<'t, F> {
        let d = *self.shape.last().unwrap_or(&1);
        let mut y = self.data.as_ref().clone();
        for row in y.chunks_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            for v in row.iter_mut() {
                *v = (*v - mx).fast_exp();
            }
            let inv = F::one() / row.iter().copied().sum::<F>();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let y = Rc::new(y);
        let yc = y.clone();
        self.tape.push(self.shape.clone(), y, &[self], move |g, _| {
            let mut dx = vec![F::zero(); g.len()];
            for ((dx, g), y) in dx.chunks_mut(d).zip(g.chunks(d)).zip(yc.chunks(d)) {
                let dot: F = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                for ((dx, &g), &y) in dx.iter_mut().zip(g).zip(y) {
                    *dx = y * (g - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &self,
        gamma: &Var<'t, F>,
        beta: &Var<'t, F>,
        eps: f64,
    ) -> Result<Var<'t, F>> {
        let d = *self.shape.last().unwrap_or(&1);
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: affine {:?}/{:?} vs feature extent {d}",
                gamma.shape, beta.shape
            )));
        }
        let eps = F::c(eps);
        let rows = self.numel() / d;
        let mut xhat = vec![F::zero(); self.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let dn = F::c(d as f64);
        for (r, (xr, hr)) in self.data.chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = xr.iter().copied().sum::<F>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &x) in hr.iter_mut().zip(xr) {
                *h = (x - mean) * is;
            }
        }
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(gamma.data.iter()).zip(beta.data.iter()) {
                *v = *v * g + b;
            }
        }
        let xhat = Rc::new(xhat);
        let gd = gamma.data.clone();
        Ok(self.tape.push(
            self.shape.clone(),
            Rc::new(y),
            &[self, gamma, beta],
            move |g, needs| {
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = needs[0].then(|| vec![F::zero(); g.len()]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let (s1, s2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx[r * d + j] = inv_std[r] * (dh - s1 - hr[j] * s2);
                        }
                    }
                }
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(self
            .tape
            .push(shape.to_vec(), self.data.clone(), &[self], |g, _| {
                vec![Some(g.to_vec())]
            }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// The reverse pass scatter-adds, so repeated indices are allowed.
    pub fn gather(&self, index: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var<'t, F>> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape(format!(
                "gather: {} indices for shape {:?}",
                index.len(),
                shape
            )));
        }
        let n = self.numel();
        if let Some(&i) = index.iter().filter(|&&i| i != GATHER_ZERO).max() {
            if i as usize >= n {
                return Err(Error::Shape(format!(
                    "gather index {i} out of range for {n} elements"
                )));
            }
        }
        let src = self.data.as_slice();
        let y: Vec<F> = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    F::zero()
                } else {
                    src[i as usize]
                }
            })
            .collect();
        Ok(self
            .tape
            .push(shape.to_vec(), Rc::new(y), &[self], move |g, _| {
                let mut dx = vec![F::zero(); n];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += gv;
                    }
                }
                vec![Some(dx)]
            }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, F>> {
        let (index, shape) = permute_index(&self.shape, axes)?;
        self.gather(Rc::new(index), &shape)
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        if axis >= self.shape.len() || start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            index.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        self.gather(Rc::new(index), &shape)
    }

    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, F>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        if start != self.shape.get(axis).copied().unwrap_or(0) {
            return Err(Error::Shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape
            )));
        }
        Ok(out)
    }

    /// Zero padding of the last two axes by `(top, bottom, left, right)`.
    pub fn pad2d(&self, pad: (usize, usize, usize, usize)) -> Result<Var<'t, F>> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(Error::Shape("pad2d needs at least 2 axes".into()));
        }
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        let (ho, wo) = (h + pad.0 + pad.1, w + pad.2 + pad.3);
        let outer = self.numel() / (h * w).max(1);
        let mut index = vec![GATHER_ZERO; outer * ho * wo];
        for o in 0..outer {
            for y in 0..h {
                for x in 0..w {
                    index[(o * ho + y + pad.0) * wo + x + pad.2] = ((o * h + y) * w + x) as u32;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        self.gather(Rc::new(index), &shape)
    }

    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(Error::Shape(format!("concat axis {axis} on rank {nd}")));
        }
        for p in parts {
            if p.shape.len() != nd
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?} along axis {axis}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape[axis] * inner).collect();
        let row: usize = chunks.iter().sum();
        let mut y = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                y.extend_from_slice(&p.data[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let refs: Vec<&Var<'t, F>> = parts.iter().collect();
        Ok(first.tape.push(shape, Rc::new(y), &refs, move |g, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(chunks.len());
            for (&c, &need) in chunks.iter().zip(needs) {
                out.push(need.then(|| {
                    let mut d = Vec::with_capacity(outer * c);
                    for o in 0..outer {
                        let base = o * row + offset;
                        d.extend_from_slice(&g[base..base + c]);
                    }
                    d
                }));
                offset += c;
            }
            out
        }))
    }
}

fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::Shape(format!(
            "matmul needs rank 2 or 3, got {shape:?}"
        ))),
    }
}

/// Strides of `op(X)` for `X` stored row-major `[rows, cols]`.
fn op_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    let _ = rows;
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<u32>, Vec<usize>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::Shape(format!(
            "invalid permutation {axes:?} for rank {nd}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    if n == 0 || nd == 0 {
        index.extend((0..n).map(|i| i as u32));
        return Ok((index, out_shape));
    }
    // Odometer over the outer axes, contiguous run along the last one.
    let (last, step) = (out_shape[nd - 1], strides[nd - 1]);
    let outer = nd - 1;
    let mut counter = vec![0usize; outer];
    let mut off = 0usize;
    for _ in 0..n / last {
        index.extend((0..last).map(|j| (off + j * step) as u32));
        for d in (0..outer).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Ok((index, out_shape))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * 0.398_942_280_401_432_7
}
