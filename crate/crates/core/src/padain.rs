//! Feature statistics and the (probabilistic) adaptive instance normalization
//! transforms.
//!
//! `padain(x, a, b) = b * (x - mean(x)) / std(x) + a`, per channel, where the
//! statistics are spatial and `std` includes [`STAT_EPS`]. Classic AdaIN is the
//! special case where `(a, b)` are the statistics of a style feature map.

use crate::error::{Error, Result};
use crate::graph::{plane_stats, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Added to the spatial variance before the square root.
pub const STAT_EPS: f64 = 1e-5;

/// Per-channel spatial statistics of one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Statistics for every batch element of a `(B, C, H, W)` tensor.
pub fn channel_stats<F: Real>(f: &Tensor<F>) -> Result<Vec<ChannelStats>> {
    let (b, c, h, w) = f.dims4()?;
    if h * w == 0 {
        return Err(Error::Empty("feature map with zero spatial extent".into()));
    }
    Ok((0..b)
        .map(|n| {
            let (mean, std) = (0..c)
                .map(|ch| {
                    let (m, s) = plane_stats(f.plane(n, ch), STAT_EPS);
                    (m.as_f64(), s.as_f64())
                })
                .unzip();
            ChannelStats { mean, std }
        })
        .collect())
}

/// Apply the same per-channel `(a, b)` to every batch element.
pub fn padain<F: Real>(x: &Tensor<F>, a: &[f64], b: &[f64]) -> Result<Tensor<F>> {
    let (batch, c, _, _) = x.dims4()?;
    for v in [a, b] {
        if v.len() != c {
            return Err(Error::Dimension { expected: c, got: v.len() });
        }
    }
    let tile = |v: &[f64]| -> Vec<f64> { (0..batch).flat_map(|_| v.iter().copied()).collect() };
    padain_batch(x, &tile(a), &tile(b))
}

/// Per-element targets: `a` and `b` are row-major `(B, C)`.
pub fn padain_batch<F: Real>(x: &Tensor<F>, a: &[f64], b: &[f64]) -> Result<Tensor<F>> {
    let (batch, c, h, w) = x.dims4()?;
    if h * w == 0 {
        return Err(Error::Empty("feature map with zero spatial extent".into()));
    }
    for v in [a, b] {
        if v.len() != batch * c {
            return Err(Error::Dimension { expected: batch * c, got: v.len() });
        }
    }
    let mut out = x.clone();
    for n in 0..batch {
        for ch in 0..c {
            let (m, s) = plane_stats(x.plane(n, ch), STAT_EPS);
            let (an, bn) = (F::lit(a[n * c + ch]), F::lit(b[n * c + ch]));
            for v in out.plane_mut(n, ch) {
                *v = bn * ((*v - m) / s) + an;
            }
        }
    }
    Ok(out)
}

/// Classic AdaIN: transfer the statistics of `style` onto `content`.
pub fn adain<F: Real>(content: &Tensor<F>, style: &Tensor<F>) -> Result<Tensor<F>> {
    let (bc, cc, _, _) = content.dims4()?;
    let (bs, cs, _, _) = style.dims4()?;
    if (bc, cc) != (bs, cs) {
        return Err(Error::shape(format!(
            "content {:?} and style {:?} disagree on batch/channels",
            content.shape(),
            style.shape()
        )));
    }
    let stats = channel_stats(style)?;
    let a: Vec<f64> = stats.iter().flat_map(|s| s.mean.iter().copied()).collect();
    let b: Vec<f64> = stats.iter().flat_map(|s| s.std.iter().copied()).collect();
    padain_batch(content, &a, &b)
}

/// Differentiable PAdaIN: `x` is `(B, C, H, W)`, `a` and `b` are `(B, C)`.
pub fn padain_var<F: Real>(g: &mut Graph<'_, F>, x: Var, a: Var, b: Var) -> Var {
    let normalized = g.instance_norm(x, STAT_EPS);
    let scaled = g.mul_channels(normalized, b);
    g.add_channels(scaled, a)
}
