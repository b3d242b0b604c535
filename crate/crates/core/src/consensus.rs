//! Reducing a set of sampled enhancements to one output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{LatentNoise, Model, PriorContext};
use crate::tensor::{Real, Tensor};

/// Decoded samples for one input and their prior log-densities.
#[derive(Debug, Clone)]
pub struct SampleSet<F> {
    predictions: Vec<Tensor<F>>,
    log_densities: Vec<f64>,
    pub source: String,
}

impl<F: Real> SampleSet<F> {
    pub fn new(predictions: Vec<Tensor<F>>, log_densities: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if predictions.len() != log_densities.len() {
            return Err(Error::Dimension { expected: predictions.len(), got: log_densities.len() });
        }
        if let Some(first) = predictions.first() {
            for p in &predictions[1..] {
                first.ensure_same_shape(p)?;
            }
        }
        if let Some(i) = log_densities.iter().position(|d| !d.is_finite()) {
            return Err(Error::NonFinite(format!("log-density of sample {i}")));
        }
        Ok(SampleSet { predictions, log_densities, source: source.into() })
    }

    /// Draw `count` prior samples for a single-image context.
    pub fn draw(
        model: &Model<F>,
        ctx: &PriorContext<F>,
        count: usize,
        rng: &mut impl Rng,
        source: impl Into<String>,
    ) -> Result<Self> {
        if ctx.batch() != 1 {
            return Err(Error::shape(format!("sample sets are per image; context holds {}", ctx.batch())));
        }
        let n = model.config().latent_dim;
        let mut predictions = Vec::with_capacity(count);
        let mut log_densities = Vec::with_capacity(count);
        for _ in 0..count {
            let noise = LatentNoise::standard_normal(1, n, rng);
            let (img, z) = model.forward_sample(ctx, &noise.a, &noise.b)?;
            predictions.push(img);
            log_densities.push(z[0].log_density);
        }
        SampleSet::new(predictions, log_densities, source)
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[Tensor<F>] {
        &self.predictions
    }

    pub fn log_densities(&self) -> &[f64] {
        &self.log_densities
    }

    /// Keep only the first `count` samples.
    pub fn truncated(&self, count: usize) -> Self {
        let k = count.min(self.len());
        SampleSet {
            predictions: self.predictions[..k].to_vec(),
            log_densities: self.log_densities[..k].to_vec(),
            source: self.source.clone(),
        }
    }

    fn non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty(format!("{what} over an empty sample set")));
        }
        Ok(())
    }
}

/// Elementwise mean of the predictions, clamped to `[0, 1]`.
pub fn mc_estimate<F: Real>(s: &SampleSet<F>) -> Result<Tensor<F>> {
    s.non_empty("mc estimate")?;
    let numel = s.predictions[0].numel();
    // Running mean: exact when every sample is identical.
    let mut acc = vec![0.0f64; numel];
    for (k, p) in s.predictions.iter().enumerate() {
        let inv = 1.0 / (k + 1) as f64;
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += (v.as_f64() - *a) * inv;
        }
    }
    let data = acc.into_iter().map(|a| F::lit(a.clamp(0.0, 1.0))).collect();
    Tensor::new(s.predictions[0].shape().to_vec(), data)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the sample with the highest log-density, lowest index on ties.
pub fn mp_index<F: Real>(s: &SampleSet<F>) -> Result<usize> {
    s.non_empty("mp estimate")?;
    Ok(argmax_first(s.log_densities.iter().copied()).expect("non-empty"))
}

pub fn mp_estimate<F: Real>(s: &SampleSet<F>) -> Result<Tensor<F>> {
    Ok(s.predictions[mp_index(s)?].clone())
}

/// Decode at the prior means (zero noise).
pub fn mp_mode<F: Real>(model: &Model<F>, ctx: &PriorContext<F>) -> Result<Tensor<F>> {
    model.forward_mode(ctx).map(|(img, _)| img)
}

/// Index of the sample with the highest quality score, lowest index on ties.
pub fn quality_index<F: Real>(s: &SampleSet<F>, q: &dyn Fn(&Tensor<F>) -> f64) -> Result<usize> {
    s.non_empty("quality selection")?;
    let mut scores = Vec::with_capacity(s.len());
    for (i, p) in s.predictions.iter().enumerate() {
        let v = q(p);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("quality score of sample {i} ({v})")));
        }
        scores.push(v);
    }
    Ok(argmax_first(scores.into_iter()).expect("non-empty"))
}

pub fn quality_select<F: Real>(s: &SampleSet<F>, q: &dyn Fn(&Tensor<F>) -> f64) -> Result<Tensor<F>> {
    Ok(s.predictions[quality_index(s, q)?].clone())
}
