//! The two-branch enhancement network.
//!
//! Both branches run a U-Net feature extractor with squeeze-and-excitation
//! residual blocks. The prior branch sees the raw image; the posterior branch
//! sees the raw image concatenated with a reference. Each branch ends in a
//! distribution head that turns feature statistics into two diagonal
//! Gaussians: one over feature means, one over feature standard deviations.
//! The decoder projects a latent draw `(a, b)` to per-channel targets, applies
//! PAdaIN to the prior-branch features and maps the result to an image.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DiagonalGaussian, EnhancementDistribution, GaussianVars, LatentSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::padain::{padain_var, STAT_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Added after softplus so that every scale is strictly positive.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Channel growth stops at `base_channels * MAX_CHANNEL_MULTIPLIER`.
pub const MAX_CHANNEL_MULTIPLIER: usize = 8;
const OUTPUT_WEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputRange {
    #[default]
    Clamp01,
    Sigmoid,
}

impl std::str::FromStr for OutputRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp01" => Ok(OutputRange::Clamp01),
            "sigmoid" => Ok(OutputRange::Sigmoid),
            other => Err(Error::invalid(format!("unknown output range '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub latent_dim: usize,
    /// Number of U-Net resolution levels above the bottleneck.
    pub depth: usize,
    pub se_reduction: usize,
    pub output_range: OutputRange,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 64,
            latent_dim: 20,
            depth: 4,
            se_reduction: 16,
            output_range: OutputRange::Clamp01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.se_reduction == 0 {
            return Err(Error::invalid("se_reduction must be at least 1"));
        }
        Ok(())
    }

    /// Feature channels at U-Net level `level` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(MAX_CHANNEL_MULTIPLIER.trailing_zeros() as usize))
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Prior,
    Posterior,
}

impl Branch {
    pub fn input_channels(self) -> usize {
        match self {
            Branch::Prior => 3,
            Branch::Posterior => 6,
        }
    }
}

/// Graph handles for the two Gaussians emitted by a head, each `(B, N)`.
#[derive(Debug, Clone, Copy)]
pub struct DistributionVars {
    pub mean_stat: GaussianVars,
    pub std_stat: GaussianVars,
}

impl DistributionVars {
    pub fn to_distributions<F: Real>(&self, g: &Graph<'_, F>) -> Result<Vec<EnhancementDistribution>> {
        let batch = g.value(self.mean_stat.mean).shape()[0];
        (0..batch)
            .map(|n| {
                EnhancementDistribution::new(
                    self.mean_stat.to_gaussian(g, n)?,
                    self.std_stat.to_gaussian(g, n)?,
                )
            })
            .collect()
    }
}

/// Graph handles produced by a training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainVars {
    pub prediction: Var,
    pub prior: DistributionVars,
    pub posterior: DistributionVars,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct SeResBlock {
    conv1: Conv,
    conv2: Conv,
    squeeze: Dense,
    excite: Dense,
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv,
    block: SeResBlock,
}

#[derive(Debug, Clone)]
struct UNet {
    encoder: Vec<Stage>,
    bottleneck: Stage,
    /// Indexed by level; applied from the deepest level upwards.
    decoder: Vec<Stage>,
}

#[derive(Debug, Clone)]
struct Head {
    mu: Dense,
    sigma: Dense,
    m: Dense,
    v: Dense,
}

#[derive(Debug, Clone)]
struct BranchNet {
    unet: UNet,
    head: Head,
}

#[derive(Debug, Clone)]
struct Decoder {
    proj_a: Dense,
    proj_b: Dense,
    conv1: Conv,
    conv2: Conv,
    out: Conv,
}

/// Creates parameters in a fixed order with seeded fan-in-scaled uniform init.
struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Builder<'_, F> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        // He-uniform bound for the leaky rectifier.
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)));
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros([len]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k);
        let b = self.zeros(format!("{name}.bias"), cout);
        Conv { w, b, stride: 1, pad: k / 2 }
    }

    /// Image projection: small weights and a mid-grey bias so that the first
    /// outputs sit inside `[0, 1]`.
    fn image_conv(&mut self, name: &str, cin: usize, output_range: OutputRange) -> Conv {
        let conv = self.conv(name, cin, 3, 1);
        let w = self.store.get_mut(conv.w);
        *w = w.map(|v| v * F::lit(OUTPUT_WEIGHT_SCALE));
        if output_range == OutputRange::Clamp01 {
            *self.store.get_mut(conv.b) = Tensor::full([3], F::lit(0.5));
        }
        conv
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = self.uniform(format!("{name}.weight"), vec![fout, fin], fin);
        let b = self.zeros(format!("{name}.bias"), fout);
        Dense { w, b }
    }

    fn se_block(&mut self, name: &str, c: usize, reduction: usize) -> SeResBlock {
        let hidden = (c / reduction).max(1);
        SeResBlock {
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3),
            squeeze: self.dense(&format!("{name}.se_squeeze"), c, hidden),
            excite: self.dense(&format!("{name}.se_excite"), hidden, c),
        }
    }

    fn stage(&mut self, name: &str, cin: usize, cout: usize, reduction: usize) -> Stage {
        Stage {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3),
            block: self.se_block(&format!("{name}.se"), cout, reduction),
        }
    }

    fn unet(&mut self, name: &str, cin: usize, cfg: &NetworkConfig) -> UNet {
        let r = cfg.se_reduction;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut prev = cin;
        for level in 0..cfg.depth {
            let c = cfg.channels_at(level);
            encoder.push(self.stage(&format!("{name}.enc{level}"), prev, c, r));
            prev = c;
        }
        let cb = cfg.channels_at(cfg.depth);
        let bottleneck = self.stage(&format!("{name}.bottleneck"), prev, cb, r);
        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let c = cfg.channels_at(level);
            let below = cfg.channels_at(level + 1);
            decoder.push(self.stage(&format!("{name}.dec{level}"), below + c, c, r));
        }
        UNet { encoder, bottleneck, decoder }
    }

    fn head(&mut self, name: &str, c: usize, n: usize) -> Head {
        Head {
            mu: self.dense(&format!("{name}.mu"), c, n),
            sigma: self.dense(&format!("{name}.sigma"), c, n),
            m: self.dense(&format!("{name}.m"), c, n),
            v: self.dense(&format!("{name}.v"), c, n),
        }
    }
}

impl Conv {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl Dense {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

impl SeResBlock {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let r = self.conv1.forward(g, x);
        let r = g.leaky_relu(r, LEAKY_SLOPE);
        let r = self.conv2.forward(g, r);
        let s = g.spatial_mean(r);
        let s = self.squeeze.forward(g, s);
        let s = g.leaky_relu(s, LEAKY_SLOPE);
        let s = self.excite.forward(g, s);
        let s = g.sigmoid(s);
        let r = g.mul_channels(r, s);
        let y = g.add(x, r);
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

impl Stage {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let h = self.conv.forward(g, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.block.forward(g, h)
    }
}

impl UNet {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            h = stage.forward(g, h);
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = self.bottleneck.forward(g, h);
        for (stage, skip) in self.decoder.iter().zip(skips).rev() {
            let up = g.upsample2(h);
            let merged = g.concat_channels(up, skip);
            h = stage.forward(g, merged);
        }
        h
    }
}

impl Head {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, f: Var) -> DistributionVars {
        let mean_vec = g.spatial_mean(f);
        let std_vec = g.spatial_std(f, STAT_EPS);
        let positive = |g: &mut Graph<'_, F>, raw: Var| {
            let s = g.softplus(raw);
            g.offset(s, SCALE_FLOOR)
        };
        let mu = self.mu.forward(g, mean_vec);
        let sigma_raw = self.sigma.forward(g, mean_vec);
        let sigma = positive(g, sigma_raw);
        let m = self.m.forward(g, std_vec);
        let v_raw = self.v.forward(g, std_vec);
        let v = positive(g, v_raw);
        DistributionVars {
            mean_stat: GaussianVars { mean: mu, scale: sigma },
            std_stat: GaussianVars { mean: m, scale: v },
        }
    }
}

pub struct Model<F: Real> {
    config: NetworkConfig,
    params: ParamStore<F>,
    prior: BranchNet,
    posterior: BranchNet,
    decoder: Decoder,
    extractor_evals: AtomicUsize,
}

impl<F: Real> Clone for Model<F> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            prior: self.prior.clone(),
            posterior: self.posterior.clone(),
            decoder: self.decoder.clone(),
            extractor_evals: AtomicUsize::new(self.extractor_evaluations()),
        }
    }
}

impl<F: Real> std::fmt::Debug for Model<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("tensors", &self.params.len())
            .field("scalars", &self.params.num_scalars())
            .finish()
    }
}

impl<F: Real> Model<F> {
    /// A freshly initialized model; identical seeds give identical weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let c0 = config.channels_at(0);
        let n = config.latent_dim;
        let prior = BranchNet {
            unet: b.unet("prior.unet", Branch::Prior.input_channels(), &config),
            head: b.head("prior.head", c0, n),
        };
        let posterior = BranchNet {
            unet: b.unet("posterior.unet", Branch::Posterior.input_channels(), &config),
            head: b.head("posterior.head", c0, n),
        };
        let decoder = Decoder {
            proj_a: b.dense("decoder.proj_a", n, c0),
            proj_b: b.dense("decoder.proj_b", n, c0),
            conv1: b.conv("decoder.conv1", c0, c0, 3),
            conv2: b.conv("decoder.conv2", c0, c0, 3),
            out: b.image_conv("decoder.out", c0, config.output_range),
        };
        Ok(Model { config, params, prior, posterior, decoder, extractor_evals: AtomicUsize::new(0) })
    }

    /// Rebuild a model around stored parameters; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: NetworkConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, p) in params.iter() {
            let expected_name = model.params.name(id);
            let expected_shape = model.params.get(id).shape();
            if p.name != expected_name || p.value.shape() != expected_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is '{}' {:?}, expected '{}' {:?}",
                    id.index(),
                    p.name,
                    p.value.shape(),
                    expected_name,
                    expected_shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// How many times a feature extractor has been run on this model.
    pub fn extractor_evaluations(&self) -> usize {
        self.extractor_evals.load(Ordering::Relaxed)
    }

    /// Parameter ids of the posterior head, used by gradient probes.
    pub fn posterior_head_params(&self) -> Vec<ParamId> {
        let h = &self.posterior.head;
        [&h.mu, &h.sigma, &h.m, &h.v].iter().flat_map(|d| [d.w, d.b]).collect()
    }

    fn branch(&self, branch: Branch) -> &BranchNet {
        match branch {
            Branch::Prior => &self.prior,
            Branch::Posterior => &self.posterior,
        }
    }

    fn check_input(&self, x: &Tensor<F>, channels: usize) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != channels {
            return Err(Error::shape(format!("expected {channels} input channels, got {c}")));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} is not a positive multiple of {m}; pad the input first"
            )));
        }
        Ok((b, h, w))
    }

    pub fn extract_features_var(&self, g: &mut Graph<'_, F>, x: Var, branch: Branch) -> Var {
        self.extractor_evals.fetch_add(1, Ordering::Relaxed);
        self.branch(branch).unet.forward(g, x)
    }

    pub fn distribution_head_var(&self, g: &mut Graph<'_, F>, f: Var, branch: Branch) -> DistributionVars {
        self.branch(branch).head.forward(g, f)
    }

    /// Decode prior-branch features with latents `a`, `b` of shape `(B, N)`.
    pub fn decode_var(&self, g: &mut Graph<'_, F>, features: Var, a: Var, b: Var) -> Var {
        let d = &self.decoder;
        let a_c = d.proj_a.forward(g, a);
        let b_c = d.proj_b.forward(g, b);
        let h = padain_var(g, features, a_c, b_c);
        let h = d.conv1.forward(g, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = d.conv2.forward(g, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let y = d.out.forward(g, h);
        match self.config.output_range {
            OutputRange::Clamp01 => g.clamp(y, 0.0, 1.0),
            OutputRange::Sigmoid => g.sigmoid(y),
        }
    }

    /// Training pass: posterior latents drive the decoder, both distributions
    /// are returned for the KL terms. `noise_a`, `noise_b` are `(B, N)`.
    pub fn forward_train_var(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        y: Var,
        noise_a: Var,
        noise_b: Var,
    ) -> TrainVars {
        let f_prior = self.extract_features_var(g, x, Branch::Prior);
        let prior = self.distribution_head_var(g, f_prior, Branch::Prior);
        let xy = g.concat_channels(x, y);
        let f_post = self.extract_features_var(g, xy, Branch::Posterior);
        let posterior = self.distribution_head_var(g, f_post, Branch::Posterior);
        let a = posterior.mean_stat.sample(g, noise_a);
        let b = posterior.std_stat.sample(g, noise_b);
        let prediction = self.decode_var(g, f_prior, a, b);
        TrainVars { prediction, prior, posterior }
    }

    pub fn extract_features(&self, x: &Tensor<F>, branch: Branch) -> Result<Tensor<F>> {
        self.check_input(x, branch.input_channels())?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let f = self.extract_features_var(&mut g, xv, branch);
        Ok(g.value(f).clone())
    }

    /// One [`EnhancementDistribution`] per batch element of `features`.
    pub fn distribution_head(&self, features: &Tensor<F>, branch: Branch) -> Result<Vec<EnhancementDistribution>> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.config.channels_at(0) {
            return Err(Error::shape(format!(
                "head expects {} feature channels, got {c}",
                self.config.channels_at(0)
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let fv = g.input(features.clone());
        let d = self.distribution_head_var(&mut g, fv, branch);
        d.to_distributions(&g)
    }

    /// Decode one latent per batch element.
    pub fn decode(&self, features: &Tensor<F>, latents: &[LatentSample]) -> Result<Tensor<F>> {
        let (batch, c, _, _) = features.dims4()?;
        if c != self.config.channels_at(0) {
            return Err(Error::shape(format!("decoder expects {} channels, got {c}", self.config.channels_at(0))));
        }
        if latents.len() != batch {
            return Err(Error::Dimension { expected: batch, got: latents.len() });
        }
        let n = self.config.latent_dim;
        let mut a = Vec::with_capacity(batch * n);
        let mut b = Vec::with_capacity(batch * n);
        for z in latents {
            for v in [&z.a, &z.b] {
                if v.len() != n {
                    return Err(Error::Dimension { expected: n, got: v.len() });
                }
            }
            a.extend(z.a.iter().map(|&v| F::lit(v)));
            b.extend(z.b.iter().map(|&v| F::lit(v)));
        }
        let mut g = Graph::with_params(&self.params);
        let fv = g.input(features.clone());
        let av = g.input(Tensor::new([batch, n], a)?);
        let bv = g.input(Tensor::new([batch, n], b)?);
        let y = self.decode_var(&mut g, fv, av, bv);
        Ok(g.value(y).clone())
    }

    /// Training-mode forward pass outside of any optimizer.
    pub fn forward_train(&self, x: &Tensor<F>, y: &Tensor<F>, noise: &LatentNoise) -> Result<TrainForward<F>> {
        let (batch, _, _) = self.check_input(x, 3)?;
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("raw {:?} vs reference {:?}", x.shape(), y.shape())));
        }
        let (na, nb) = noise.to_tensors::<F>(batch, self.config.latent_dim)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let na = g.input(na);
        let nb = g.input(nb);
        let out = self.forward_train_var(&mut g, xv, yv, na, nb);
        Ok(TrainForward {
            prediction: g.value(out.prediction).clone(),
            prior: out.prior.to_distributions(&g)?,
            posterior: out.posterior.to_distributions(&g)?,
        })
    }

    /// Run the prior branch once; the returned context serves any number of
    /// samples. Inputs whose size is not a multiple of `2^depth` are
    /// reflection-padded and outputs are cropped back.
    pub fn prepare(&self, x: &Tensor<F>) -> Result<PriorContext<F>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
        }
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
        let padded = reflect_pad(x, ph, pw)?;
        let features = self.extract_features(&padded, Branch::Prior)?;
        let prior = self.distribution_head(&features, Branch::Prior)?;
        Ok(PriorContext { features, prior, height: h, width: w })
    }

    /// Draw from the prior and decode, reusing the cached prior features.
    /// `noise_a` and `noise_b` are row-major `(B, N)`.
    pub fn forward_sample(
        &self,
        ctx: &PriorContext<F>,
        noise_a: &[f64],
        noise_b: &[f64],
    ) -> Result<(Tensor<F>, Vec<LatentSample>)> {
        let n = self.config.latent_dim;
        let batch = ctx.prior.len();
        for v in [noise_a, noise_b] {
            if v.len() != batch * n {
                return Err(Error::Dimension { expected: batch * n, got: v.len() });
            }
        }
        let latents = ctx
            .prior
            .iter()
            .enumerate()
            .map(|(i, d)| d.sample(&noise_a[i * n..(i + 1) * n], &noise_b[i * n..(i + 1) * n]))
            .collect::<Result<Vec<_>>>()?;
        let full = self.decode(&ctx.features, &latents)?;
        Ok((crop(&full, ctx.height, ctx.width)?, latents))
    }

    /// Decode at the prior means: the density-maximizing sample.
    pub fn forward_mode(&self, ctx: &PriorContext<F>) -> Result<(Tensor<F>, Vec<LatentSample>)> {
        let zeros = vec![0.0; ctx.prior.len() * self.config.latent_dim];
        self.forward_sample(ctx, &zeros, &zeros)
    }
}

/// Standard-normal noise for one latent draw per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    /// Row-major `(B, N)`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LatentNoise {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        LatentNoise { a: vec![0.0; batch * dim], b: vec![0.0; batch * dim] }
    }

    pub fn standard_normal(batch: usize, dim: usize, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut draw = || (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let a = draw();
        let b = draw();
        LatentNoise { a, b }
    }

    pub fn to_tensors<F: Real>(&self, batch: usize, dim: usize) -> Result<(Tensor<F>, Tensor<F>)> {
        let to = |v: &[f64]| -> Result<Tensor<F>> {
            if v.len() != batch * dim {
                return Err(Error::Dimension { expected: batch * dim, got: v.len() });
            }
            Tensor::new([batch, dim], v.iter().map(|&x| F::lit(x)).collect())
        };
        Ok((to(&self.a)?, to(&self.b)?))
    }
}

#[derive(Debug, Clone)]
pub struct TrainForward<F> {
    pub prediction: Tensor<F>,
    pub prior: Vec<EnhancementDistribution>,
    pub posterior: Vec<EnhancementDistribution>,
}

/// Cached prior-branch evaluation for one input batch.
#[derive(Debug, Clone)]
pub struct PriorContext<F> {
    features: Tensor<F>,
    prior: Vec<EnhancementDistribution>,
    height: usize,
    width: usize,
}

impl<F: Real> PriorContext<F> {
    pub fn features(&self) -> &Tensor<F> {
        &self.features
    }

    pub fn prior(&self) -> &[EnhancementDistribution] {
        &self.prior
    }

    pub fn batch(&self) -> usize {
        self.prior.len()
    }

    /// Prior distribution of batch element `n` as a plain pair of Gaussians.
    pub fn mean_stat(&self, n: usize) -> &DiagonalGaussian {
        &self.prior[n].mean_stat
    }
}

/// Reflection padding on the bottom and right edges.
pub fn reflect_pad<F: Real>(x: &Tensor<F>, pad_h: usize, pad_w: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    if pad_h >= h || pad_w >= w {
        return Err(Error::shape(format!(
            "cannot reflection-pad {h}x{w} by ({pad_h}, {pad_w}); the image is too small"
        )));
    }
    let (ho, wo) = (h + pad_h, w + pad_w);
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut out = Tensor::zeros([b, c, ho, wo]);
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for y in 0..ho {
                let sy = reflect(y, h);
                for xx in 0..wo {
                    dst[y * wo + xx] = src[sy * w + reflect(xx, w)];
                }
            }
        }
    }
    Ok(out)
}

/// The top-left `height x width` window.
pub fn crop<F: Real>(x: &Tensor<F>, height: usize, width: usize) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if height > h || width > w {
        return Err(Error::shape(format!("cannot crop {h}x{w} to {height}x{width}")));
    }
    if (height, width) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros([b, c, height, width]);
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for y in 0..height {
                dst[y * width..(y + 1) * width].copy_from_slice(&src[y * w..y * w + width]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig { base_channels: 8, latent_dim: 4, depth: 2, se_reduction: 4, output_range: OutputRange::Clamp01 }
    }

    fn image(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, c, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig { latent_dim: 0, ..small() }.validate().is_err());
        assert!(NetworkConfig { base_channels: 0, ..small() }.validate().is_err());
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.channels_at(0), 64);
        assert_eq!(cfg.channels_at(3), 512);
        assert_eq!(cfg.channels_at(4), 512);
    }

    #[test]
    fn feature_shapes() {
        let m = Model::<f32>::new(NetworkConfig { base_channels: 64, ..small() }, 1).unwrap();
        let f = m.extract_features(&image(1, 3, 64, 64, 0), Branch::Prior).unwrap();
        assert_eq!(f.shape(), &[1, 64, 64, 64]);
        let f = m.extract_features(&image(2, 6, 64, 64, 0), Branch::Posterior).unwrap();
        assert_eq!(f.shape(), &[2, 64, 64, 64]);
    }

    #[test]
    fn extractor_input_errors() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        assert!(m.extract_features(&image(1, 6, 16, 16, 0), Branch::Prior).is_err());
        assert!(m.extract_features(&image(1, 3, 16, 16, 0), Branch::Posterior).is_err());
        assert!(m.extract_features(&image(1, 3, 18, 16, 0), Branch::Prior).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let m = Model::<f32>::new(small(), 3).unwrap();
        let x = image(1, 3, 16, 16, 4);
        let a = m.extract_features(&x, Branch::Prior).unwrap();
        let b = m.extract_features(&x, Branch::Prior).unwrap();
        assert_eq!(a.data(), b.data());
        let other = Model::<f32>::new(small(), 3).unwrap();
        assert_eq!(other.extract_features(&x, Branch::Prior).unwrap().data(), a.data());
    }

    #[test]
    fn head_shapes_and_positive_scales() {
        let cfg = NetworkConfig { base_channels: 64, latent_dim: 20, ..small() };
        let m = Model::<f32>::new(cfg, 1).unwrap();
        let f = image(1, 64, 32, 32, 2);
        let d = m.distribution_head(&f, Branch::Prior).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].mean_stat.dim(), 20);
        assert_eq!(d[0].std_stat.dim(), 20);
        assert!(d[0].mean_stat.scale().iter().chain(d[0].std_stat.scale()).all(|&s| s > 0.0));
    }

    #[test]
    fn zeroed_head_gives_softplus_zero_scales() {
        let mut m = Model::<f64>::new(small(), 1).unwrap();
        let ids: Vec<_> = m.params().iter().filter(|(_, p)| p.name.starts_with("prior.head")).map(|(id, _)| id).collect();
        for id in ids {
            let p = m.params_mut().get_mut(id);
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let f = Tensor::<f64>::from_fn([1, 8, 4, 4], |i| (i as f64).sin());
        let d = &m.distribution_head(&f, Branch::Prior).unwrap()[0];
        for &s in d.mean_stat.scale().iter().chain(d.std_stat.scale()) {
            assert!((s - (2f64.ln() + SCALE_FLOOR)).abs() < 1e-12);
            assert!((s - 0.6931).abs() < 1e-4);
        }
    }

    #[test]
    fn head_is_continuous_in_features() {
        let m = Model::<f64>::new(small(), 7).unwrap();
        let f = Tensor::<f64>::from_fn([1, 8, 4, 4], |i| (i as f64 * 0.3).cos());
        let base = m.distribution_head(&f, Branch::Prior).unwrap()[0].mean_stat.mean().to_vec();
        let h = 1e-6;
        for i in [0, 17, 100] {
            let mut fp = f.clone();
            fp.data_mut()[i] += h;
            let moved = m.distribution_head(&fp, Branch::Prior).unwrap()[0].mean_stat.mean().to_vec();
            for (a, b) in moved.iter().zip(&base) {
                let slope = (a - b) / h;
                assert!(slope.is_finite() && slope.abs() < 1e3);
            }
        }
    }

    #[test]
    fn decode_range_and_determinism() {
        for range in [OutputRange::Clamp01, OutputRange::Sigmoid] {
            let m = Model::<f32>::new(NetworkConfig { output_range: range, ..small() }, 2).unwrap();
            let ctx = m.prepare(&image(2, 3, 16, 16, 1)).unwrap();
            let z: Vec<LatentSample> = ctx.prior().iter().map(|d| d.sample(&[0.5; 4], &[-1.0; 4]).unwrap()).collect();
            let y1 = m.decode(ctx.features(), &z).unwrap();
            let y2 = m.decode(ctx.features(), &z).unwrap();
            assert_eq!(y1.shape(), &[2, 3, 16, 16]);
            assert!(y1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(y1.data(), y2.data());
        }
    }

    #[test]
    fn train_forward_shapes_and_errors() {
        let m = Model::<f32>::new(small(), 2).unwrap();
        let x = image(2, 3, 16, 16, 1);
        let y = image(2, 3, 16, 16, 2);
        let out = m.forward_train(&x, &y, &LatentNoise::zeros(2, 4)).unwrap();
        assert_eq!(out.prediction.shape(), x.shape());
        assert_eq!(out.prior.len(), 2);
        assert_eq!(out.posterior.len(), 2);
        assert!(m.forward_train(&x, &image(2, 3, 32, 32, 2), &LatentNoise::zeros(2, 4)).is_err());
        assert!(m.forward_train(&x, &y, &LatentNoise::zeros(1, 4)).is_err());
    }

    #[test]
    fn samples_reuse_cached_features() {
        let m = Model::<f32>::new(small(), 5).unwrap();
        let x = image(1, 3, 16, 16, 9);
        let before = m.extractor_evaluations();
        let ctx = m.prepare(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let noise = LatentNoise::standard_normal(1, 4, &mut rng);
            m.forward_sample(&ctx, &noise.a, &noise.b).unwrap();
        }
        assert_eq!(m.extractor_evaluations() - before, 1);
    }

    #[test]
    fn zero_noise_is_the_mode() {
        let m = Model::<f32>::new(small(), 5).unwrap();
        let ctx = m.prepare(&image(1, 3, 16, 16, 9)).unwrap();
        let (mode_img, mode_z) = m.forward_mode(&ctx).unwrap();
        let (zero_img, zero_z) = m.forward_sample(&ctx, &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(mode_img.data(), zero_img.data());
        assert_eq!(mode_z, zero_z);
        assert_eq!(mode_z[0].a, ctx.prior()[0].mean_stat.mean());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let noise = LatentNoise::standard_normal(1, 4, &mut rng);
            let (_, z) = m.forward_sample(&ctx, &noise.a, &noise.b).unwrap();
            assert!(z[0].log_density <= mode_z[0].log_density);
        }
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let m = Model::<f32>::new(small(), 5).unwrap();
        let ctx = m.prepare(&image(1, 3, 13, 10, 9)).unwrap();
        assert_eq!(ctx.features().shape(), &[1, 8, 16, 12]);
        let (y, _) = m.forward_mode(&ctx).unwrap();
        assert_eq!(y.shape(), &[1, 3, 13, 10]);
        assert!(m.prepare(&image(1, 3, 2, 2, 9)).is_err());
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let x = Tensor::<f32>::new([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, 1, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 3, 5]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 4.0, 5.0, 6.0, 5.0, 4.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(crop(&p, 2, 3).unwrap(), x);
    }

    #[test]
    fn from_params_checks_layout() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let rebuilt = Model::from_params(small(), m.params().clone()).unwrap();
        assert_eq!(rebuilt.params(), m.params());
        let other = NetworkConfig { latent_dim: 5, ..small() };
        assert!(Model::from_params(other, m.params().clone()).is_err());
    }
}
