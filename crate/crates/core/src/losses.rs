//! Training objective: reconstruction, perceptual and KL terms.
//!
//! `L = L_e + beta * (L_m + L_s)` with `L_e = L_mse + lambda * L_perc`.
//! `L_m` and `L_s` are `KL(prior || posterior)` for the mean and standard
//! deviation statistics, summed over latent dimensions and averaged over the
//! batch. Every image-space term is a mean over elements.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::distributions::EnhancementDistribution;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::DistributionVars;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual weight.
    pub lambda: f64,
    /// KL weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { lambda, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Every loss component of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_e: f64,
    pub l_mse: f64,
    pub l_perceptual: f64,
    pub l_m: f64,
    pub l_s: f64,
}

impl LossParts {
    /// Assemble the weighted sum from its components.
    pub fn combine(l_mse: f64, l_perceptual: f64, l_m: f64, l_s: f64, w: &LossWeights) -> Result<Self> {
        let l_e = l_mse + w.lambda * l_perceptual;
        let parts = LossParts { total: l_e + w.beta * (l_m + l_s), l_e, l_mse, l_perceptual, l_m, l_s };
        parts.check_finite()?;
        Ok(parts)
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("L", self.total),
            ("L_e", self.l_e),
            ("L_mse", self.l_mse),
            ("L_perceptual", self.l_perceptual),
            ("L_m", self.l_m),
            ("L_s", self.l_s),
        ]
    }

    /// Error naming the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        // Components first so the root cause is named rather than the sum.
        let named = self.named();
        for (name, v) in named[1..].iter().chain(&named[..1]) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss part {name} is {v} ({})", self.summary())));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        self.named().iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// A frozen feature map used by the perceptual loss.
///
/// Implementations build on the caller's graph so that gradients reach the
/// prediction; their own weights enter as constants.
pub trait FeatureExtractor<F: Real>: Send + Sync {
    /// Feature maps of `x` at each configured stage.
    fn stages(&self, g: &mut Graph<'_, F>, x: Var) -> Vec<Var>;
}

/// `Φ(x) = x`; reduces the perceptual loss to the MSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<F: Real> FeatureExtractor<F> for IdentityExtractor {
    fn stages(&self, _g: &mut Graph<'_, F>, x: Var) -> Vec<Var> {
        vec![x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Max,
    Avg,
}

/// Geometry of one convolution in a [`ConvStackExtractor`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    /// Applied after the activation.
    #[serde(default = "no_pool")]
    pub pool: Pool,
    /// Whether the output (after pooling) is a loss stage.
    #[serde(default)]
    pub tap: bool,
}

fn no_pool() -> Pool {
    Pool::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackMetadata {
    kind: String,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    input_mean: Option<[f64; 3]>,
    #[serde(default)]
    input_std: Option<[f64; 3]>,
}

const EXTRACTOR_KIND: &str = "feature_extractor";

/// A frozen stack of convolutions.
#[derive(Debug, Clone)]
pub struct ConvStackExtractor<F> {
    layers: Vec<(LayerSpec, Tensor<F>, Tensor<F>)>,
    input_mean: Option<[f64; 3]>,
    input_std: Option<[f64; 3]>,
}

impl<F: Real> ConvStackExtractor<F> {
    /// The default extractor: three 3x3 stages with 16, 32 and 64 channels,
    /// stride 2 between stages, weights drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, cout) in [16usize, 32, 64].into_iter().enumerate() {
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn([cout, cin, 3, 3], |_| F::lit(rng.random_range(-bound..bound)));
            let spec = LayerSpec {
                stride: if i == 0 { 1 } else { 2 },
                pad: 1,
                activation: Activation::LeakyRelu,
                pool: Pool::None,
                tap: true,
            };
            layers.push((spec, w, Tensor::zeros([cout])));
            cin = cout;
        }
        ConvStackExtractor { layers, input_mean: None, input_std: None }
    }

    /// Load externally supplied weights, e.g. a pretrained classifier's
    /// convolutional trunk. The archive holds `layer{i}.weight` and
    /// `layer{i}.bias` tensors and metadata describing each layer.
    pub fn load(path: &Path) -> Result<Self> {
        let unavailable = |why: String| {
            Error::ExtractorUnavailable(format!(
                "{why}; set perceptual = \"random\" (the built-in frozen extractor) or \"identity\" to train without it"
            ))
        };
        let archive = TensorArchive::<F>::load(path)
            .map_err(|e| unavailable(format!("cannot load feature extractor {}: {e}", path.display())))?;
        let meta: StackMetadata = serde_json::from_value(archive.metadata.clone())
            .map_err(|e| unavailable(format!("invalid extractor metadata in {}: {e}", path.display())))?;
        if meta.kind != EXTRACTOR_KIND {
            return Err(unavailable(format!("{} is a '{}' archive, not a feature extractor", path.display(), meta.kind)));
        }
        let mut layers = Vec::with_capacity(meta.layers.len());
        let mut cin = 3;
        for (i, spec) in meta.layers.into_iter().enumerate() {
            let get = |suffix: &str| {
                archive
                    .get(&format!("layer{i}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| unavailable(format!("layer{i}.{suffix} missing from {}", path.display())))
            };
            let (w, b) = (get("weight")?, get("bias")?);
            let ok = w.rank() == 4 && w.shape()[1] == cin && b.shape() == [w.shape()[0]] && spec.stride > 0;
            if !ok {
                return Err(unavailable(format!(
                    "layer{i} has weight {:?} and bias {:?}, incompatible with {cin} input channels",
                    w.shape(),
                    b.shape()
                )));
            }
            cin = w.shape()[0];
            layers.push((spec, w, b));
        }
        if !layers.iter().any(|(s, _, _)| s.tap) {
            return Err(unavailable(format!("{} taps no feature stage", path.display())));
        }
        Ok(ConvStackExtractor { layers, input_mean: meta.input_mean, input_std: meta.input_std })
    }

    /// Write in the format read by [`ConvStackExtractor::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = StackMetadata {
            kind: EXTRACTOR_KIND.into(),
            layers: self.layers.iter().map(|(s, _, _)| s.clone()).collect(),
            input_mean: self.input_mean,
            input_std: self.input_std,
        };
        let mut tensors = Vec::new();
        for (i, (_, w, b)) in self.layers.iter().enumerate() {
            tensors.push((format!("layer{i}.weight"), w.clone()));
            tensors.push((format!("layer{i}.bias"), b.clone()));
        }
        TensorArchive { metadata: serde_json::to_value(meta)?, tensors }.save(path)
    }

    pub fn num_stages(&self) -> usize {
        self.layers.iter().filter(|(s, _, _)| s.tap).count()
    }
}

impl<F: Real> FeatureExtractor<F> for ConvStackExtractor<F> {
    fn stages(&self, g: &mut Graph<'_, F>, x: Var) -> Vec<Var> {
        let mut h = x;
        if let (Some(mean), Some(std)) = (self.input_mean, self.input_std) {
            let batch = g.value(x).shape()[0];
            let scale: Vec<F> = (0..batch).flat_map(|_| std.map(|s| F::lit(1.0 / s))).collect();
            let shift: Vec<F> = (0..batch).flat_map(|_| (0..3).map(|c| F::lit(-mean[c] / std[c]))).collect();
            let s = g.input(Tensor::new([batch, 3], scale).expect("normalization scale"));
            let t = g.input(Tensor::new([batch, 3], shift).expect("normalization shift"));
            h = g.mul_channels(h, s);
            h = g.add_channels(h, t);
        }
        let mut out = Vec::new();
        for (spec, w, b) in &self.layers {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            h = g.conv2d(h, wv, Some(bv), spec.stride, spec.pad);
            h = match spec.activation {
                Activation::None => h,
                Activation::Relu => g.leaky_relu(h, 0.0),
                Activation::LeakyRelu => g.leaky_relu(h, 0.2),
            };
            let (_, _, hh, ww) = g.value(h).dims4().expect("extractor feature map");
            h = match spec.pool {
                Pool::Max if hh % 2 == 0 && ww % 2 == 0 => g.max_pool2(h),
                Pool::Avg if hh % 2 == 0 && ww % 2 == 0 => g.avg_pool2(h),
                _ => h,
            };
            if spec.tap {
                out.push(h);
            }
        }
        out
    }
}

/// How the perceptual feature map is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerceptualConfig {
    Random { seed: u64 },
    Identity,
    Plugin { path: std::path::PathBuf },
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig::Random { seed: 0 }
    }
}

impl PerceptualConfig {
    pub fn build<F: Real>(&self) -> Result<Box<dyn FeatureExtractor<F>>> {
        Ok(match self {
            PerceptualConfig::Random { seed } => Box::new(ConvStackExtractor::<F>::random(*seed)),
            PerceptualConfig::Identity => Box::new(IdentityExtractor),
            PerceptualConfig::Plugin { path } => Box::new(ConvStackExtractor::<F>::load(path)?),
        })
    }
}

/// Mean squared difference as a graph scalar.
pub fn mse_var<F: Real>(g: &mut Graph<'_, F>, pred: Var, reference: Var) -> Var {
    let d = g.sub(pred, reference);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Sum over extractor stages of the feature-space mean squared difference.
pub fn perceptual_var<F: Real>(
    g: &mut Graph<'_, F>,
    pred: Var,
    reference: Var,
    extractor: &dyn FeatureExtractor<F>,
) -> Var {
    let fp = extractor.stages(g, pred);
    let fr = extractor.stages(g, reference);
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fr) {
        let term = mse_var(g, a, b);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.unwrap_or_else(|| g.input(Tensor::scalar(F::zero())))
}

/// Graph handles for every loss part.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_e: Var,
    pub l_mse: Var,
    pub l_perceptual: Var,
    pub l_m: Var,
    pub l_s: Var,
}

impl LossVars {
    pub fn parts<F: Real>(&self, g: &Graph<'_, F>) -> LossParts {
        let v = |x: Var| g.scalar(x).as_f64();
        LossParts {
            total: v(self.total),
            l_e: v(self.l_e),
            l_mse: v(self.l_mse),
            l_perceptual: v(self.l_perceptual),
            l_m: v(self.l_m),
            l_s: v(self.l_s),
        }
    }
}

pub fn total_loss_var<F: Real>(
    g: &mut Graph<'_, F>,
    pred: Var,
    reference: Var,
    prior: &DistributionVars,
    posterior: &DistributionVars,
    w: &LossWeights,
    extractor: &dyn FeatureExtractor<F>,
) -> LossVars {
    let l_mse = mse_var(g, pred, reference);
    let l_perceptual = perceptual_var(g, pred, reference, extractor);
    let weighted = g.scale(l_perceptual, w.lambda);
    let l_e = g.add(l_mse, weighted);
    let l_m = prior.mean_stat.kl_divergence(g, &posterior.mean_stat);
    let l_s = prior.std_stat.kl_divergence(g, &posterior.std_stat);
    let kl = g.add(l_m, l_s);
    let kl = g.scale(kl, w.beta);
    let total = g.add(l_e, kl);
    LossVars { total, l_e, l_mse, l_perceptual, l_m, l_s }
}

pub fn mse_loss<F: Real>(pred: &Tensor<F>, reference: &Tensor<F>) -> Result<f64> {
    pred.ensure_same_shape(reference)?;
    if pred.numel() == 0 {
        return Err(Error::Empty("mse of empty tensors".into()));
    }
    let s: f64 = pred.data().iter().zip(reference.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn perceptual_loss<F: Real>(
    pred: &Tensor<F>,
    reference: &Tensor<F>,
    extractor: &dyn FeatureExtractor<F>,
) -> Result<f64> {
    pred.ensure_same_shape(reference)?;
    pred.dims4()?;
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let r = g.input(reference.clone());
    let l = perceptual_var(&mut g, p, r, extractor);
    Ok(g.scalar(l).as_f64())
}

/// Loss for a batch; `prior[i]` and `posterior[i]` belong to batch element `i`.
pub fn total_loss<F: Real>(
    pred: &Tensor<F>,
    reference: &Tensor<F>,
    prior: &[EnhancementDistribution],
    posterior: &[EnhancementDistribution],
    w: &LossWeights,
    extractor: &dyn FeatureExtractor<F>,
) -> Result<LossParts> {
    w.validate()?;
    let batch = pred.dims4()?.0;
    for d in [prior, posterior] {
        if d.len() != batch {
            return Err(Error::Dimension { expected: batch, got: d.len() });
        }
    }
    let l_mse = mse_loss(pred, reference)?;
    let l_perceptual = perceptual_loss(pred, reference, extractor)?;
    let (mut l_m, mut l_s) = (0.0, 0.0);
    for (p, q) in prior.iter().zip(posterior) {
        let (m, s) = p.kl_divergence(q)?;
        l_m += m;
        l_s += s;
    }
    LossParts::combine(l_mse, l_perceptual, l_m / batch as f64, l_s / batch as f64, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{DiagonalGaussian, GaussianVars};

    fn img(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn dist(shift: f64) -> EnhancementDistribution {
        EnhancementDistribution::new(
            DiagonalGaussian::new(vec![0.1 + shift, -0.3], vec![0.8, 1.2 + shift]).unwrap(),
            DiagonalGaussian::new(vec![0.5, 0.2 * shift], vec![0.6, 0.9]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(1.0, 1.0).is_ok());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(1.0, f64::NAN).is_err());
        assert!(LossWeights::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn mse_examples() {
        let a = img(1, [2, 3, 4, 4]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
        let c = img(2, [2, 3, 4, 4]);
        let mut oracle = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - c.data()[i];
            oracle += d * d;
        }
        oracle /= a.numel() as f64;
        assert!((mse_loss(&a, &c).unwrap() - oracle).abs() < 1e-7);
        assert!(mse_loss(&a, &img(2, [2, 3, 4, 5])).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let a = img(3, [1, 3, 8, 8]);
        let b = img(4, [1, 3, 8, 8]);
        let random = ConvStackExtractor::<f64>::random(7);
        assert_eq!(perceptual_loss(&a, &a, &random).unwrap(), 0.0);
        let id = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        assert!((id - mse_loss(&a, &b).unwrap()).abs() < 1e-15);
        let first = perceptual_loss(&a, &b, &random).unwrap();
        let again = perceptual_loss(&a, &b, &ConvStackExtractor::<f64>::random(7)).unwrap();
        assert_eq!(first, again);
        assert!(first > 0.0);
        assert_eq!(random.num_stages(), 3);
        assert!((first - 2.713_937_140_671_210_4e-1).abs() < 1e-12, "{first}");
    }

    #[test]
    fn random_extractor_stage_shapes() {
        let e = ConvStackExtractor::<f32>::random(0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2, 3, 16, 16]));
        let shapes: Vec<Vec<usize>> = e.stages(&mut g, x).iter().map(|v| g.value(*v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4]]);
    }

    #[test]
    fn plugin_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.bin");
        let e = ConvStackExtractor::<f64>::random(3);
        e.save(&path).unwrap();
        let loaded = ConvStackExtractor::<f64>::load(&path).unwrap();
        let a = img(1, [1, 3, 8, 8]);
        let b = img(2, [1, 3, 8, 8]);
        assert_eq!(perceptual_loss(&a, &b, &e).unwrap(), perceptual_loss(&a, &b, &loaded).unwrap());

        let missing = PerceptualConfig::Plugin { path: dir.path().join("nope.bin") };
        let err = missing.build::<f64>().err().unwrap();
        assert!(matches!(err, Error::ExtractorUnavailable(_)));
        assert!(err.to_string().contains("random"));
    }

    #[test]
    fn plugin_with_pooling_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg_like.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = Tensor::<f64>::from_fn([4, 3, 3, 3], |_| rng.random_range(-0.5..0.5));
        let w1 = Tensor::<f64>::from_fn([6, 4, 3, 3], |_| rng.random_range(-0.5..0.5));
        let meta = serde_json::json!({
            "kind": "feature_extractor",
            "layers": [
                {"stride": 1, "pad": 1, "activation": "relu", "pool": "max", "tap": true},
                {"stride": 1, "pad": 1, "activation": "relu", "tap": true},
            ],
            "input_mean": [0.485, 0.456, 0.406],
            "input_std": [0.229, 0.224, 0.225],
        });
        TensorArchive {
            metadata: meta,
            tensors: vec![
                ("layer0.weight".into(), w0),
                ("layer0.bias".into(), Tensor::zeros([4])),
                ("layer1.weight".into(), w1),
                ("layer1.bias".into(), Tensor::zeros([6])),
            ],
        }
        .save(&path)
        .unwrap();
        let e = ConvStackExtractor::<f64>::load(&path).unwrap();
        let mut g = Graph::new();
        let x = g.input(img(0, [1, 3, 8, 8]));
        let shapes: Vec<Vec<usize>> = e.stages(&mut g, x).iter().map(|v| g.value(*v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 4, 4, 4], vec![1, 6, 4, 4]]);
    }

    #[test]
    fn total_loss_examples() {
        let a = img(5, [2, 3, 8, 8]);
        let phi = ConvStackExtractor::<f64>::random(1);
        let d = vec![dist(0.0), dist(0.3)];
        let parts = total_loss(&a, &a, &d, &d, &LossWeights::default(), &phi).unwrap();
        assert_eq!(parts.total, 0.0);

        let b = img(6, [2, 3, 8, 8]);
        let q = vec![dist(0.5), dist(-0.2)];
        let no_kl = total_loss(&a, &b, &d, &q, &LossWeights::new(1.0, 0.0).unwrap(), &phi).unwrap();
        assert_eq!(no_kl.total, no_kl.l_e);
        assert!(no_kl.l_m > 0.0);

        let synthetic = LossParts::combine(0.04, 0.01, 0.2, 0.3, &LossWeights::default()).unwrap();
        assert!((synthetic.total - 0.55).abs() < 1e-12);
    }

    #[test]
    fn non_finite_part_is_named() {
        let err = LossParts::combine(0.1, 0.0, f64::NAN, 0.2, &LossWeights::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("L_m is NaN"), "{msg}");
    }

    #[test]
    fn batch_permutation_invariance() {
        let a = img(1, [3, 3, 8, 8]);
        let b = img(2, [3, 3, 8, 8]);
        let p = vec![dist(0.0), dist(0.1), dist(0.4)];
        let q = vec![dist(0.2), dist(-0.3), dist(0.0)];
        let phi = ConvStackExtractor::<f64>::random(2);
        let w = LossWeights::default();
        let base = total_loss(&a, &b, &p, &q, &w, &phi).unwrap();
        let perm = [2, 0, 1];
        let pick = |t: &Tensor<f64>| {
            Tensor::stack_batch(&perm.map(|i| t.batch_item(i).unwrap())).unwrap()
        };
        let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        let qq: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
        let moved = total_loss(&pick(&a), &pick(&b), &pp, &qq, &w, &phi).unwrap();
        assert!((base.total - moved.total).abs() < 1e-12);
    }

    #[test]
    fn graph_and_plain_agree() {
        let a = img(1, [2, 3, 8, 8]);
        let b = img(2, [2, 3, 8, 8]);
        let p = vec![dist(0.0), dist(0.1)];
        let q = vec![dist(0.2), dist(-0.3)];
        let phi = ConvStackExtractor::<f64>::random(2);
        let w = LossWeights::new(0.7, 1.3).unwrap();
        let plain = total_loss(&a, &b, &p, &q, &w, &phi).unwrap();
        let mut g = Graph::new();
        let (pv, qv) = (dist_vars(&mut g, &p), dist_vars(&mut g, &q));
        let av = g.input(a);
        let bv = g.input(b);
        let lv = total_loss_var(&mut g, av, bv, &pv, &qv, &w, &phi).parts(&g);
        for ((name, x), (_, y)) in plain.named().iter().zip(lv.named()) {
            assert!((x - y).abs() < 1e-12, "{name}: {x} vs {y}");
        }
    }

    fn dist_vars(g: &mut Graph<'_, f64>, d: &[EnhancementDistribution]) -> DistributionVars {
        let n = d[0].dim();
        let mut var = |f: &dyn Fn(&EnhancementDistribution) -> Vec<f64>| {
            g.variable(Tensor::new([d.len(), n], d.iter().flat_map(f).collect()).unwrap())
        };
        DistributionVars {
            mean_stat: GaussianVars {
                mean: var(&|e| e.mean_stat.mean().to_vec()),
                scale: var(&|e| e.mean_stat.scale().to_vec()),
            },
            std_stat: GaussianVars {
                mean: var(&|e| e.std_stat.mean().to_vec()),
                scale: var(&|e| e.std_stat.scale().to_vec()),
            },
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = img(1, [1, 3, 8, 8]);
        let reference = img(2, [1, 3, 8, 8]);
        let p = vec![dist(0.0)];
        let q = vec![dist(0.4)];
        let phi = ConvStackExtractor::<f64>::random(9);
        let w = LossWeights::default();
        let mut g = Graph::new();
        let pred_v = g.variable(pred.clone());
        let ref_v = g.input(reference.clone());
        let pv = dist_vars(&mut g, &p);
        let qv = dist_vars(&mut g, &q);
        let loss = total_loss_var(&mut g, pred_v, ref_v, &pv, &qv, &w, &phi);
        let grads = g.backward(loss.total);

        let eval = |pred: &Tensor<f64>, p: &[EnhancementDistribution], q: &[EnhancementDistribution]| {
            total_loss(pred, &reference, p, q, &w, &phi).unwrap().total
        };
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4 || (analytic - fd).abs() < 1e-9, "{what}: analytic {analytic} vs fd {fd}");
        };
        let dpred = grads.wrt(pred_v).unwrap();
        for i in [0, 7, 64, 100, 191] {
            let mut hi = pred.clone();
            hi.data_mut()[i] += h;
            let mut lo = pred.clone();
            lo.data_mut()[i] -= h;
            check(dpred.data()[i], eval(&hi, &p, &q), eval(&lo, &p, &q), &format!("pred[{i}]"));
        }
        let bump = |d: &EnhancementDistribution, which: usize, k: usize, delta: f64| {
            let (mut mm, mut ms) = (d.mean_stat.mean().to_vec(), d.mean_stat.scale().to_vec());
            let (mut sm, mut ss) = (d.std_stat.mean().to_vec(), d.std_stat.scale().to_vec());
            [&mut mm, &mut ms, &mut sm, &mut ss][which][k] += delta;
            EnhancementDistribution::new(DiagonalGaussian::new(mm, ms).unwrap(), DiagonalGaussian::new(sm, ss).unwrap())
                .unwrap()
        };
        let vars = |d: &DistributionVars| [d.mean_stat.mean, d.mean_stat.scale, d.std_stat.mean, d.std_stat.scale];
        for which in 0..4 {
            for k in 0..2 {
                let ap = grads.wrt(vars(&pv)[which]).unwrap().data()[k];
                let fp = eval(&pred, &[bump(&p[0], which, k, h)], &q);
                let fm = eval(&pred, &[bump(&p[0], which, k, -h)], &q);
                check(ap, fp, fm, &format!("prior {which}/{k}"));
                let aq = grads.wrt(vars(&qv)[which]).unwrap().data()[k];
                let fp = eval(&pred, &p, &[bump(&q[0], which, k, h)]);
                let fm = eval(&pred, &p, &[bump(&q[0], which, k, -h)]);
                check(aq, fp, fm, &format!("posterior {which}/{k}"));
            }
        }
    }
}
