//! Full-reference image quality metrics: PSNR, SSIM and CIEDE2000.
//!
//! PSNR is computed on all RGB values jointly. SSIM is computed on ITU-R
//! BT.601 luminance with an 11x11 Gaussian window (sigma 1.5) over valid
//! positions only. Colour differences use sRGB with a D65 white.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

/// Linear sRGB to XYZ (D65).
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Luminance of every pixel of every batch element, batch-major.
pub fn luminance<F: Real>(x: &Tensor<F>) -> Result<Vec<f64>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("luminance needs 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(b * h * w);
    for n in 0..b {
        let (r, g, bl) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
        out.extend((0..h * w).map(|i| {
            LUMA_601[0] * r[i].as_f64() + LUMA_601[1] * g[i].as_f64() + LUMA_601[2] * bl[i].as_f64()
        }));
    }
    Ok(out)
}

pub fn mse<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.numel() == 0 {
        return Err(Error::Empty("images with no pixels".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<F: Real>(a: &Tensor<F>, b: &Tensor<F>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance planes, averaged over the batch.
pub fn ssim<F: Real>(a: &Tensor<F>, b: &Tensor<F>, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (batch, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    if batch == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let k = gaussian_kernel();
    let (la, lb) = (luminance(a)?, luminance(b)?);
    let mut total = 0.0;
    for n in 0..batch {
        let pa = &la[n * h * w..(n + 1) * h * w];
        let pb = &lb[n * h * w..(n + 1) * h * w];
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let aa = filter_valid(&prod(&|i| pa[i] * pa[i]), h, w, &k);
        let bb = filter_valid(&prod(&|i| pb[i] * pb[i]), h, w, &k);
        let ab = filter_valid(&prod(&|i| pa[i] * pb[i]), h, w, &k);
        let mut s = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / mu_a.len() as f64;
    }
    Ok(total / batch as f64)
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Convert one sRGB triple in `[0, 1]` to CIE L*a*b*.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let xyz = SRGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    // The white point is the image of RGB white, so white maps to a = b = 0.
    let white = SRGB_TO_XYZ.map(|row| row[0] + row[1] + row[2]);
    let f = [0, 1, 2].map(|i| lab_f(xyz[i] / white[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Channels of the result are L*, a*, b*.
pub fn srgb_to_lab<F: Real>(x: &Tensor<F>) -> Result<Tensor<f64>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("Lab conversion needs 3 channels, got {c}")));
    }
    let mut out = Tensor::zeros([b, 3, h, w]);
    for n in 0..b {
        for i in 0..h * w {
            let lab = srgb_pixel_to_lab([0, 1, 2].map(|ch| x.plane(n, ch)[i].as_f64()));
            for (ch, v) in lab.into_iter().enumerate() {
                out.plane_mut(n, ch)[i] = v;
            }
        }
    }
    Ok(out)
}

fn hue_degrees(b: f64, a: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let h = b.atan2(a).to_degrees();
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

/// CIEDE2000 colour difference between two Lab colours.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let pow25_7 = 25f64.powi(7);
    let c_bar = (a1.hypot(b1) + a2.hypot(b2)) / 2.0;
    let g = 0.5 * (1.0 - (c_bar.powi(7) / (c_bar.powi(7) + pow25_7)).sqrt());
    let (a1p, a2p) = ((1.0 + g) * a1, (1.0 + g) * a2);
    let (c1p, c2p) = (a1p.hypot(b1), a2p.hypot(b2));
    let (h1p, h2p) = (hue_degrees(b1, a1p), hue_degrees(b2, a2p));

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let chroma_product = c1p * c2p;
    let dh_angle = if chroma_product == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let dh = 2.0 * chroma_product.sqrt() * (dh_angle.to_radians() / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar = if chroma_product == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * (h_bar - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar).to_radians().cos()
        + 0.32 * (3.0 * h_bar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let r_c = 2.0 * (c_bar_p.powi(7) / (c_bar_p.powi(7) + pow25_7)).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;

    let (tl, tc, th) = (dl / s_l, dc / s_c, dh / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// Mean per-pixel CIEDE2000 difference between two sRGB images.
pub fn delta_e_2000<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (la, lb) = (srgb_to_lab(a)?, srgb_to_lab(b)?);
    let (batch, _, h, w) = la.dims4()?;
    let count = batch * h * w;
    if count == 0 {
        return Err(Error::Empty("images with no pixels".into()));
    }
    let mut total = 0.0;
    for n in 0..batch {
        for i in 0..h * w {
            let pa = [0, 1, 2].map(|c| la.plane(n, c)[i]);
            let pb = [0, 1, 2].map(|c| lb.plane(n, c)[i]);
            total += ciede2000(pa, pb);
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl MetricValues {
    pub fn compute<F: Real>(pred: &Tensor<F>, reference: &Tensor<F>) -> Result<Self> {
        Ok(MetricValues {
            psnr: psnr(pred, reference, 1.0)?,
            ssim: ssim(pred, reference, 1.0)?,
            delta_e: delta_e_2000(pred, reference)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Per-image metrics plus dataset means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Files that could not be paired or read.
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, values: MetricValues) {
        self.rows.push(MetricRow { id: id.into(), values });
    }

    /// Arithmetic means over rows; `None` for an empty report.
    pub fn mean(&self) -> Option<MetricValues> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = |f: fn(&MetricValues) -> f64| self.rows.iter().map(|r| f(&r.values)).sum::<f64>() / n;
        Some(MetricValues { psnr: sum(|v| v.psnr), ssim: sum(|v| v.ssim), delta_e: sum(|v| v.delta_e) })
    }

    /// CSV with `#` header comments, columns `id,psnr,ssim,delta_e` and a
    /// final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("# psnr: RGB jointly, peak 1.0, capped at 100 dB\n");
        s.push_str("# ssim: BT.601 luminance, 11x11 gaussian window sigma 1.5, valid positions\n");
        s.push_str("# delta_e: CIEDE2000 mean over pixels, sRGB D65\n");
        s.push_str("# niqe: unavailable\n");
        if !self.warnings.is_empty() {
            let _ = writeln!(s, "# warnings: {}", self.warnings.len());
        }
        s.push_str("id,psnr,ssim,delta_e\n");
        let mut row = |id: &str, v: &MetricValues| {
            let _ = writeln!(s, "{id},{},{},{}", v.psnr, v.ssim, v.delta_e);
        };
        for r in &self.rows {
            row(&r.id, &r.values);
        }
        if let Some(m) = self.mean() {
            row("mean", &m);
        }
        s
    }
}
