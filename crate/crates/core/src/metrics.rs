//! Quality and rate analytics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{quantize8, Image};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// PSNR of a mean squared error measured on `[0, 1]` values.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// PSNR in dB between the 8-bit quantizations of `a` and `b`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data.len() as f64;
    let se: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = quantize8(x) as f64 - quantize8(y) as f64;
            d * d
        })
        .sum();
    if se == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / (se / n)).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter of an `h×w` plane.
fn blur(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mu_a, _, _) = blur(a, h, w, k);
    let (mu_b, _, _) = blur(b, h, w, k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (saa, _, _) = blur(&aa, h, w, k);
    let (sbb, _, _) = blur(&bb, h, w, k);
    let (sab, _, _) = blur(&ab, h, w, k);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    (ssim / n, cs / n)
}

fn avg_pool(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let i = 2 * y * w + 2 * x;
            out[y * wo + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, ho, wo)
}

/// Number of scales for an image whose shorter side is `side`: every scale
/// must still hold one full 11×11 window.
pub fn ms_ssim_scales(side: usize) -> usize {
    (0..5).take_while(|&s| side >> s >= SSIM_WINDOW).count()
}

/// Multi-scale SSIM of the 8-bit quantizations, channels averaged per
/// scale. Images too small for five scales use the leading weights,
/// renormalized to sum to one.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let scales = ms_ssim_scales(a.width.min(a.height));
    if scales == 0 {
        return Err(Error::Shape(format!(
            "{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel();
    let plane = a.pixels();
    let to_planes = |img: &Image| -> Vec<Vec<f64>> {
        (0..3)
            .map(|c| {
                img.data[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| quantize8(v) as f64 / 255.0)
                    .collect()
            })
            .collect()
    };
    let (mut pa, mut pb) = (to_planes(a), to_planes(b));
    let (mut h, mut w) = (a.height, a.width);
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut log_total = 0.0;
    for s in 0..scales {
        let (mut ssim, mut cs) = (0.0, 0.0);
        for c in 0..3 {
            let (si, ci) = ssim_cs(&pa[c], &pb[c], h, w, &k);
            ssim += si / 3.0;
            cs += ci / 3.0;
        }
        let term = if s + 1 == scales { ssim } else { cs };
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        if term <= 0.0 {
            return Ok(0.0);
        }
        log_total += weight * term.ln();
        if s + 1 < scales {
            for c in 0..3 {
                (pa[c], _, _) = avg_pool(&pa[c], h, w);
                (pb[c], _, _) = avg_pool(&pb[c], h, w);
            }
            (h, w) = (h / 2, w / 2);
        }
    }
    Ok(log_total.exp())
}

/// One rate-distortion measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub image: String,
    /// `255` for the prompt-free backbone.
    pub lambda_id: u8,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

impl RdPoint {
    pub const CSV_HEADER: &'static str = "image,lambda_id,bpp,psnr,msssim";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.6}",
            self.image, self.lambda_id, self.bpp, self.psnr, self.msssim
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("bad rd_points row: {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            image: f[0].to_string(),
            lambda_id: f[1].parse().map_err(|_| bad())?,
            bpp: f[2].parse().map_err(|_| bad())?,
            psnr: f[3].parse().map_err(|_| bad())?,
            msssim: f[4].parse().map_err(|_| bad())?,
        })
    }
}

/// Quality axis of a BD-rate computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

/// `(rate, quality)` pairs of one codec.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { points }
    }

    /// Per-λ averages of `rows` (one curve point per lambda id).
    pub fn from_points(rows: &[RdPoint], quality: Quality) -> Self {
        let mut ids: Vec<u8> = rows.iter().map(|r| r.lambda_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let pts = ids
            .into_iter()
            .map(|id| {
                let sel: Vec<&RdPoint> = rows.iter().filter(|r| r.lambda_id == id).collect();
                let n = sel.len() as f64;
                let rate = sel.iter().map(|r| r.bpp).sum::<f64>() / n;
                let q = sel
                    .iter()
                    .map(|r| match quality {
                        Quality::Psnr => r.psnr,
                        Quality::MsSsim => r.msssim,
                    })
                    .sum::<f64>()
                    / n;
                (rate, q)
            })
            .collect();
        Self::new(pts)
    }
}

/// Least-squares cubic `p(q)` with coefficients lowest degree first.
pub fn cubic_fit(q: &[f64], v: &[f64]) -> Result<[f64; 4]> {
    let n = q.len();
    let a = DMatrix::from_fn(n, 4, |i, j| q[i].powi(j as i32));
    let b = DVector::from_column_slice(v);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Invalid(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim =
        |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent: negative
/// means `test` needs fewer bits at equal quality.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    for (name, c) in [("test", test), ("anchor", anchor)] {
        if c.points.len() < 4 {
            return Err(Error::Invalid(format!(
                "{name} curve has {} points; need 4",
                c.points.len()
            )));
        }
        if c.points.iter().any(|&(r, q)| !(r > 0.0) || !q.is_finite()) {
            return Err(Error::Invalid(format!(
                "{name} curve has non-positive rates or non-finite quality"
            )));
        }
    }
    let split = |c: &RdCurve| -> (Vec<f64>, Vec<f64>) {
        c.points.iter().map(|&(r, q)| (q, r.log10())).unzip()
    };
    let (qt, rt) = split(test);
    let (qa, ra) = split(anchor);
    let range = |q: &[f64]| {
        (
            q.iter().copied().fold(f64::INFINITY, f64::min),
            q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (lt, ht) = range(&qt);
    let (la, ha) = range(&qa);
    let (lo, hi) = (lt.max(la), ht.min(ha));
    if !(hi > lo) {
        return Err(Error::Invalid(format!(
            "quality ranges [{lt}, {ht}] and [{la}, {ha}] do not overlap"
        )));
    }
    // Fit on centered quality for conditioning; the integral is shift-invariant.
    let mid = 0.5 * (lo + hi);
    let center = |q: &[f64]| q.iter().map(|v| v - mid).collect::<Vec<_>>();
    let pt = cubic_fit(&center(&qt), &rt)?;
    let pa = cubic_fit(&center(&qa), &ra)?;
    let avg = (poly_integral(&pt, lo - mid, hi - mid) - poly_integral(&pa, lo - mid, hi - mid))
        / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Mean over channels of per-element bits, `[M, h, w]` → `[h, w]`.
pub fn bit_allocation_map(element_bits: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = element_bits.shape();
    let [m, h, w] = *s else {
        return Err(Error::Shape(format!(
            "element bits {s:?} are not [M, h, w]"
        )));
    };
    let mut out = vec![0.0; h * w];
    for plane in element_bits.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v / m as f64;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Nearest-neighbour upsampling of an `[h, w]` map by `factor`, cropped to
/// `width × height`.
pub fn upsample_nearest(
    map: &Tensor<f64>,
    factor: usize,
    width: usize,
    height: usize,
) -> Result<Tensor<f64>> {
    let [h, w] = *map.shape() else {
        return Err(Error::Shape(format!("map {:?} is not 2-d", map.shape())));
    };
    if width > w * factor || height > h * factor {
        return Err(Error::Shape("crop exceeds the upsampled map".into()));
    }
    Ok(Tensor::from_fn(&[height, width], |i| {
        let (y, x) = (i / width, i % width);
        map.data()[(y / factor) * w + x / factor]
    }))
}

/// 8-bit rendering scaled so the map maximum is white.
pub fn to_gray8(map: &Tensor<f64>) -> Vec<u8> {
    let max = map.data().iter().copied().fold(0.0, f64::max);
    map.data()
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Row-per-line CSV of a 2-d map.
pub fn map_csv(map: &Tensor<f64>) -> String {
    let w = *map.shape().last().unwrap_or(&1);
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
