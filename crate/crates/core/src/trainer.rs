//! Training loop, optimizer and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss_var, FeatureExtractor, LossParts, LossWeights, PerceptualConfig};
use crate::network::{LatentNoise, Model, NetworkConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Raw images paired with one or more references, all `(1, 3, H, W)`.
pub trait PairedDataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_references(&self, index: usize) -> usize;

    fn raw(&self, index: usize) -> Result<Tensor<f32>>;

    /// `k` counts from 0; reference 0 is the original.
    fn reference(&self, index: usize, k: usize) -> Result<Tensor<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    #[default]
    UniformRandom,
    OriginalOnly,
}

impl std::str::FromStr for ReferencePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" => Ok(ReferencePolicy::UniformRandom),
            "original_only" => Ok(ReferencePolicy::OriginalOnly),
            other => Err(Error::invalid(format!("unknown reference policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub rotate90s: bool,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { rotate90s: true, hflip: true, vflip: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augmentation: Augmentation,
    pub reference_policy: ReferencePolicy,
    pub loss: LossWeights,
    pub perceptual: PerceptualConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            patch_size: 256,
            iterations: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            augmentation: Augmentation::default(),
            reference_policy: ReferencePolicy::UniformRandom,
            loss: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        let m = net.size_multiple();
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return Err(Error::invalid(format!(
                "patch_size {} must be a positive multiple of 2^depth = {m}",
                self.patch_size
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.loss.validate()
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_mse")]
    pub l_mse: f64,
    #[serde(rename = "L_perceptual")]
    pub l_perceptual: f64,
    /// Seconds since training started.
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub wall_clock_s: f64,
    pub steps: Vec<StepRecord>,
}

impl TrainingRecord {
    /// One JSON object per line, one line per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            let mut v = serde_json::to_value(s)?;
            v["seed"] = self.seed.into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut steps = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            seed = v["seed"].as_u64().unwrap_or(seed);
            steps.push(serde_json::from_value(v)?);
        }
        let wall_clock_s = steps.last().map_or(0.0, |s: &StepRecord| s.elapsed_s);
        Ok(TrainingRecord { seed, wall_clock_s, steps })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam { cfg, lr, step: 0, m: zeros(), v: zeros() }
    }

    /// Apply one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let (b1, b2) = (F::lit(beta1), F::lit(beta2));
        let (ob1, ob2) = (F::lit(1.0 - beta1), F::lit(1.0 - beta2));
        let step_size = F::lit(self.lr / c1);
        let inv_c2 = F::lit(1.0 / c2);
        let eps = F::lit(eps);
        for (id, g) in grads {
            let i = id.index();
            let p = params.get_mut(*id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// The geometric transform applied identically to a raw patch and its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { quarter_turns: 0, hflip: false, vflip: false };

    pub fn sample(aug: &Augmentation, rng: &mut impl Rng) -> Self {
        Transform {
            quarter_turns: if aug.rotate90s { rng.random_range(0..4) } else { 0 },
            hflip: aug.hflip && rng.random_bool(0.5),
            vflip: aug.vflip && rng.random_bool(0.5),
        }
    }

    /// Apply to a `(1, C, S, S)` patch.
    pub fn apply(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let (_, c, h, w) = x.dims4().expect("patch");
        debug_assert!(h == w || self.quarter_turns % 2 == 0);
        let mut out = x.clone();
        for ch in 0..c {
            let src = x.plane(0, ch);
            let dst = out.plane_mut(0, ch);
            for y in 0..h {
                for xx in 0..w {
                    let (mut sy, mut sx) = (y, xx);
                    if self.vflip {
                        sy = h - 1 - sy;
                    }
                    if self.hflip {
                        sx = w - 1 - sx;
                    }
                    for _ in 0..self.quarter_turns {
                        // Output pixel (y, x) of a quarter turn reads (x, w-1-y).
                        (sy, sx) = (sx, w - 1 - sy);
                    }
                    dst[y * w + xx] = src[sy * w + sx];
                }
            }
        }
        out
    }
}

fn crop_patch(x: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (_, c, _, w) = x.dims4().expect("image");
    let mut out = Tensor::zeros([1, c, size, size]);
    for ch in 0..c {
        let src = x.plane(0, ch);
        let dst = out.plane_mut(0, ch);
        for y in 0..size {
            dst[y * size..(y + 1) * size].copy_from_slice(&src[(top + y) * w + left..(top + y) * w + left + size]);
        }
    }
    out
}

/// Pick, crop and augment one training pair.
fn draw_pair(
    dataset: &dyn PairedDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let index = rng.random_range(0..dataset.len());
    let k = match cfg.reference_policy {
        ReferencePolicy::OriginalOnly => 0,
        ReferencePolicy::UniformRandom => {
            let n = dataset.num_references(index);
            if n == 0 {
                return Err(Error::Dataset(format!("item {index} has no references")));
            }
            rng.random_range(0..n)
        }
    };
    let raw = dataset.raw(index)?;
    let reference = dataset.reference(index, k)?;
    raw.ensure_same_shape(&reference)
        .map_err(|_| Error::Dataset(format!("item {index}: raw and reference {k} differ in size")))?;
    let (_, c, h, w) = raw.dims4()?;
    let s = cfg.patch_size;
    if c != 3 || h < s || w < s {
        return Err(Error::Dataset(format!(
            "item {index} is {c}x{h}x{w}; need 3 channels and at least {s}x{s} pixels"
        )));
    }
    let top = rng.random_range(0..=h - s);
    let left = rng.random_range(0..=w - s);
    let t = Transform::sample(&cfg.augmentation, rng);
    Ok((t.apply(&crop_patch(&raw, top, left, s)), t.apply(&crop_patch(&reference, top, left, s))))
}

/// Run the optimization loop. Identical seeds give identical records.
pub fn train(
    dataset: &dyn PairedDataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainingRecord)> {
    let extractor = cfg.perceptual.build::<f32>()?;
    let model = Model::new(net_cfg.clone(), cfg.seed)?;
    train_from(model, dataset, cfg, extractor.as_ref(), |_| {})
}

/// Continue training `model`; `on_step` sees every record as it is produced.
pub fn train_from(
    mut model: Model<f32>,
    dataset: &dyn PairedDataset,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor<f32>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Model<f32>, TrainingRecord)> {
    cfg.validate(model.config())?;
    if dataset.is_empty() {
        return Err(Error::Dataset("the training set is empty".into()));
    }
    let start = Instant::now();
    // Separate streams so that changing the data pipeline leaves noise draws unchanged.
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam);
    let n = model.config().latent_dim;
    let mut steps = Vec::with_capacity(cfg.iterations);

    for step in 1..=cfg.iterations {
        let mut raws = Vec::with_capacity(cfg.batch_size);
        let mut refs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (r, y) = draw_pair(dataset, cfg, &mut data_rng)?;
            raws.push(r);
            refs.push(y);
        }
        let noise = LatentNoise::standard_normal(cfg.batch_size, n, &mut noise_rng);
        let (na, nb) = noise.to_tensors::<f32>(cfg.batch_size, n)?;

        let (parts, grads) = {
            let mut g = Graph::with_params(model.params());
            let x = g.input(Tensor::stack_batch(&raws)?);
            let y = g.input(Tensor::stack_batch(&refs)?);
            let na = g.input(na);
            let nb = g.input(nb);
            let out = model.forward_train_var(&mut g, x, y, na, nb);
            let loss = total_loss_var(&mut g, out.prediction, y, &out.prior, &out.posterior, &cfg.loss, extractor);
            let parts = loss.parts(&g);
            parts.check_finite().map_err(|e| {
                Error::NonFinite(format!("step {step}: {e}; loss parts: {}", parts.summary()))
            })?;
            let grads = g.backward(loss.total).into_param_grads();
            (parts, grads)
        };
        let mut grads: Vec<(ParamId, Tensor<f32>)> = grads.into_iter().collect();
        grads.sort_by_key(|(id, _)| *id);
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step}: gradient of '{}' (loss parts: {})",
                model.params().name(*id),
                parts.summary()
            )));
        }
        adam.step(model.params_mut(), &grads);

        let record = step_record(step, &parts, start.elapsed().as_secs_f64());
        log::debug!("step {step}: {}", parts.summary());
        on_step(&record);
        steps.push(record);
    }
    let record = TrainingRecord { seed: cfg.seed, wall_clock_s: start.elapsed().as_secs_f64(), steps };
    Ok((model, record))
}

fn step_record(step: usize, p: &LossParts, elapsed_s: f64) -> StepRecord {
    StepRecord {
        step,
        total: p.total,
        l_e: p.l_e,
        l_m: p.l_m,
        l_s: p.l_s,
        l_mse: p.l_mse,
        l_perceptual: p.l_perceptual,
        elapsed_s,
    }
}

const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    network: NetworkConfig,
}

/// Write model parameters and configuration to one file.
pub fn save_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta { kind: CHECKPOINT_KIND.into(), network: model.config().clone() };
    let tensors = model.params().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    TensorArchive { metadata: serde_json::to_value(meta)?, tensors }.save(path)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    load_checkpoint_checked(path, None)
}

/// Load a checkpoint; an explicit configuration must match the embedded one.
pub fn load_checkpoint_checked<F: Real>(path: &Path, expected: Option<&NetworkConfig>) -> Result<Model<F>> {
    let archive = TensorArchive::<F>::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.metadata)
        .map_err(|e| Error::Checkpoint(format!("invalid checkpoint metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("{} holds a '{}' archive, not a checkpoint", path.display(), meta.kind)));
    }
    if let Some(cfg) = expected {
        if *cfg != meta.network {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with {:?} but {:?} was requested",
                meta.network, cfg
            )));
        }
    }
    let mut params = ParamStore::new();
    for (name, t) in archive.tensors {
        params.add(name, t);
    }
    Model::from_params(meta.network, params)
}
