//! Training-data generation: ambiguous reference maps and synthetic
//! underwater degradation.
//!
//! Each reference is adjusted three ways (contrast, saturation, gamma). Every
//! method produces an over and an under variant and a scorer keeps one of
//! them, so a raw image ends up with four references including the original.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_image, write_png};
use crate::metrics::luminance;
use crate::tensor::Tensor;
use crate::trainer::PairedDataset;

pub type Image = Tensor<f32>;

/// References per raw image, the original included.
pub const REFERENCES_PER_IMAGE: usize = 4;

/// Per channel: `y = (x - mean_channel) * alpha + x`, clamped to `[0, 1]`.
pub fn contrast_adjust(x: &Image, alpha: f64) -> Result<Image> {
    let (b, c, _, _) = x.dims4()?;
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            let plane = out.plane_mut(n, ch);
            let m = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len().max(1) as f64;
            for v in plane {
                *v = ((*v as f64 - m) * alpha + *v as f64).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Per pixel: `y = (x - mean over channels) * alpha + x`, clamped to `[0, 1]`.
pub fn saturation_adjust(x: &Image, alpha: f64) -> Result<Image> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("saturation needs 3 channels, got {c}")));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    let plane = h * w;
    for n in 0..b {
        let base = n * 3 * plane;
        for i in 0..plane {
            let idx = [base + i, base + plane + i, base + 2 * plane + i];
            let px = idx.map(|j| data[j] as f64);
            let m = (px[0] + px[1] + px[2]) / 3.0;
            for (j, v) in idx.into_iter().zip(px) {
                data[j] = ((v - m) * alpha + v).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// `y = x^gamma` elementwise.
pub fn gamma_correct(x: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive and finite, got {gamma}")));
    }
    Ok(x.map(|v| (v.clamp(0.0, 1.0) as f64).powf(gamma) as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Contrast,
    Saturation,
    Gamma,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Contrast, Method::Saturation, Method::Gamma];

    pub fn apply(self, x: &Image, coefficient: f64) -> Result<Image> {
        match self {
            Method::Contrast => contrast_adjust(x, coefficient),
            Method::Saturation => saturation_adjust(x, coefficient),
            Method::Gamma => gamma_correct(x, coefficient),
        }
    }

    /// The coefficient that leaves an image unchanged.
    pub fn neutral(self) -> f64 {
        match self {
            Method::Gamma => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Over,
    Under,
}

/// Coefficients for the over and under variants of one method. For gamma,
/// "over" brightens (`gamma < 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustmentSpec {
    pub method: Method,
    pub alpha_over: f64,
    pub alpha_under: f64,
}

impl AdjustmentSpec {
    pub fn new(method: Method, alpha_over: f64, alpha_under: f64) -> Result<Self> {
        let s = AdjustmentSpec { method, alpha_over, alpha_under };
        s.validate()?;
        Ok(s)
    }

    pub fn defaults() -> Vec<AdjustmentSpec> {
        vec![
            AdjustmentSpec { method: Method::Contrast, alpha_over: 0.25, alpha_under: -0.25 },
            AdjustmentSpec { method: Method::Saturation, alpha_over: 0.3, alpha_under: -0.3 },
            AdjustmentSpec { method: Method::Gamma, alpha_over: 0.7, alpha_under: 1.3 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (o, u, n) = (self.alpha_over, self.alpha_under, self.method.neutral());
        if !o.is_finite() || !u.is_finite() {
            return Err(Error::invalid(format!("{:?} coefficients must be finite", self.method)));
        }
        let opposite = match self.method {
            Method::Gamma => o > 0.0 && u > 0.0 && o <= n && u >= n,
            _ => o >= n && u <= n,
        };
        if !opposite {
            return Err(Error::invalid(format!(
                "{:?} over/under coefficients ({o}, {u}) must lie on opposite sides of {n}",
                self.method
            )));
        }
        Ok(())
    }

    pub fn coefficient(&self, v: Variant) -> f64 {
        match v {
            Variant::Over => self.alpha_over,
            Variant::Under => self.alpha_under,
        }
    }
}

/// Ranks candidate references; higher is better.
pub trait ReferenceScorer {
    fn score(&self, candidate: &Image, raw: &Image, original: &Image) -> f64;
}

impl<T: Fn(&Image, &Image, &Image) -> f64> ReferenceScorer for T {
    fn score(&self, candidate: &Image, raw: &Image, original: &Image) -> f64 {
        self(candidate, raw, original)
    }
}

/// Luminance standard deviation minus `penalty` times the fraction of
/// pixels with any channel clipped at 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastClipScore {
    pub penalty: f64,
}

impl Default for ContrastClipScore {
    fn default() -> Self {
        ContrastClipScore { penalty: 10.0 }
    }
}

impl ReferenceScorer for ContrastClipScore {
    fn score(&self, candidate: &Image, _raw: &Image, _original: &Image) -> f64 {
        luminance_std(candidate) - self.penalty * clipped_fraction(candidate)
    }
}

pub fn luminance_std(x: &Image) -> f64 {
    let l = luminance(x).unwrap_or_default();
    if l.is_empty() {
        return 0.0;
    }
    let n = l.len() as f64;
    let m = l.iter().sum::<f64>() / n;
    (l.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

pub fn clipped_fraction(x: &Image) -> f64 {
    let Ok((b, c, h, w)) = x.dims4() else { return 0.0 };
    let plane = h * w;
    if b * plane == 0 {
        return 0.0;
    }
    let mut clipped = 0usize;
    for n in 0..b {
        for i in 0..plane {
            if (0..c).any(|ch| {
                let v = x.plane(n, ch)[i];
                v <= 0.0 || v >= 1.0
            }) {
                clipped += 1;
            }
        }
    }
    clipped as f64 / (b * plane) as f64
}

/// Which variant was kept for one generated reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub method: Method,
    pub variant: Variant,
    pub coefficient: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// `references[0]` is the original.
    pub references: Vec<Image>,
    /// One per generated reference, aligned with `references[1..]`.
    pub choices: Vec<Choice>,
}

/// The original reference followed by the preferred variant of each method,
/// in the order the specs are given. Score ties keep the over variant.
pub fn build_reference_set(
    raw: &Image,
    original: &Image,
    specs: &[AdjustmentSpec],
    scorer: &dyn ReferenceScorer,
) -> Result<ReferenceSet> {
    let methods: BTreeSet<Method> = specs.iter().map(|s| s.method).collect();
    if specs.len() != Method::ALL.len() || methods.len() != Method::ALL.len() {
        return Err(Error::invalid("adjustment specs must cover contrast, saturation and gamma exactly once"));
    }
    let mut references = vec![original.clone()];
    let mut choices = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let over = spec.method.apply(original, spec.alpha_over)?;
        let under = spec.method.apply(original, spec.alpha_under)?;
        let so = scorer.score(&over, raw, original);
        let su = scorer.score(&under, raw, original);
        let (img, variant, score) = if so >= su || su.is_nan() {
            (over, Variant::Over, so)
        } else {
            (under, Variant::Under, su)
        };
        choices.push(Choice { method: spec.method, variant, coefficient: spec.coefficient(variant), score });
        references.push(img);
    }
    Ok(ReferenceSet { references, choices })
}

/// Parameters drawn by [`synth_degrade`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    /// Per-channel attenuation (red, green, blue).
    pub attenuation: [f64; 3],
    pub transmission: f64,
    /// Background light; red is always zero.
    pub veil: [f64; 3],
    /// Extra contraction about the channel means, 1 when none was needed.
    pub contraction: f64,
}

/// Apply a blue-green cast, contrast loss and darkening. For non-constant
/// inputs with some red, the red mean drops, ends below the blue mean, and
/// the luminance standard deviation strictly decreases.
pub fn synth_degrade(clean: &Image, seed: u64) -> Result<Image> {
    synth_degrade_with_params(clean, seed).map(|(img, _)| img)
}

pub fn synth_degrade_with_params(clean: &Image, seed: u64) -> Result<(Image, Degradation)> {
    let (b, c, _, _) = clean.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("degradation needs 3 channels, got {c}")));
    }
    if clean.numel() == 0 {
        return Err(Error::Empty("image with no pixels".into()));
    }
    let clean = clean.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attenuation =
        [rng.random_range(0.3..0.55), rng.random_range(0.7..0.9), rng.random_range(0.85..1.0)];
    let t: f64 = rng.random_range(0.55..0.8);
    let veil = [0.0, rng.random_range(0.3..0.5), rng.random_range(0.45..0.7)];

    let channel_mean = |img: &Image, ch: usize| {
        (0..b).map(|n| img.plane(n, ch).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>()
            / (img.numel() / 3) as f64
    };
    let (mean_r, mean_b) = (channel_mean(&clean, 0), channel_mean(&clean, 2));
    let blue_after = mean_b * attenuation[2] * t + veil[2] * (1.0 - t);
    if mean_r * attenuation[0] * t >= blue_after {
        attenuation[0] = 0.9 * blue_after / (mean_r * t);
    }

    let mut out = clean.clone();
    for n in 0..b {
        for ch in 0..3 {
            let (k, v) = (attenuation[ch] * t, veil[ch] * (1.0 - t));
            for p in out.plane_mut(n, ch) {
                *p = (*p as f64 * k + v) as f32;
            }
        }
    }

    let mut contraction = 1.0;
    let (before, after) = (luminance_std(&clean), luminance_std(&out));
    if before > 0.0 && after >= before {
        contraction = 0.9 * before / after;
        for ch in 0..3 {
            let m = channel_mean(&out, ch);
            for n in 0..b {
                for p in out.plane_mut(n, ch) {
                    *p = (m + (*p as f64 - m) * contraction) as f32;
                }
            }
        }
    }
    let out = out.clamp(0.0, 1.0);
    Ok((out, Degradation { attenuation, transmission: t, veil, contraction }))
}

/// A colourful, smooth test pattern with a few hard-edged shapes.
pub fn synth_clean(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        let per_channel: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.05..0.25),
                ]
            })
            .collect();
        waves.push(per_channel);
    }
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            )
        })
        .collect();
    let mut img = Tensor::zeros([1, 3, height, width]);
    for ch in 0..3 {
        let plane = img.plane_mut(0, ch);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / width.max(1) as f64, y as f64 / height.max(1) as f64);
                let mut val = base[ch];
                for w in &waves {
                    let [fx, fy, phase, amp] = w[ch];
                    val += amp * (std::f64::consts::TAU * (fx * u + fy * v) / 2.0 + phase).sin();
                }
                for &(cx, cy, r, col) in &discs {
                    if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
                        val = 0.5 * val + 0.5 * col[ch];
                    }
                }
                plane[y * width + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// On-disk dataset layout: `raw/<id>.png`, `ref/<id>_<k>.png` for
/// `k = 1..=4`, and `manifest.json`.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn ref_dir(&self) -> PathBuf {
        self.root.join("ref")
    }

    pub fn raw_path(&self, id: &str) -> PathBuf {
        self.raw_dir().join(format!("{id}.png"))
    }

    /// `k` counts from 1; reference 1 is the original.
    pub fn ref_path(&self, id: &str, k: usize) -> PathBuf {
        self.ref_dir().join(format!("{id}_{k}.png"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestReference {
    pub index: usize,
    pub file: String,
    /// `None` for the original reference.
    pub choice: Option<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub references: Vec<ManifestReference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub specs: Vec<AdjustmentSpec>,
    pub scorer: String,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedInput>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Write one raw image and its reference set into `layout`.
pub fn write_entry(layout: &DatasetLayout, id: &str, raw: &Image, set: &ReferenceSet) -> Result<ManifestEntry> {
    fs::create_dir_all(layout.raw_dir())?;
    fs::create_dir_all(layout.ref_dir())?;
    write_png(&layout.raw_path(id), raw)?;
    let mut references = Vec::with_capacity(set.references.len());
    for (i, img) in set.references.iter().enumerate() {
        let path = layout.ref_path(id, i + 1);
        write_png(&path, img)?;
        references.push(ManifestReference {
            index: i + 1,
            file: format!("ref/{id}_{}.png", i + 1),
            choice: if i == 0 { None } else { Some(set.choices[i - 1]) },
        });
    }
    Ok(ManifestEntry { id: id.to_string(), references })
}

/// Paired images loaded from a [`DatasetLayout`] into memory.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub ids: Vec<String>,
    pub items: Vec<(Image, Vec<Image>)>,
}

impl InMemoryDataset {
    pub fn new(items: Vec<(Image, Vec<Image>)>) -> Result<Self> {
        for (i, (raw, refs)) in items.iter().enumerate() {
            if refs.is_empty() {
                return Err(Error::Dataset(format!("item {i} has no reference images")));
            }
            for r in refs {
                if r.shape() != raw.shape() {
                    return Err(Error::Dataset(format!(
                        "item {i}: reference {:?} does not match raw {:?}",
                        r.shape(),
                        raw.shape()
                    )));
                }
            }
        }
        let ids = (0..items.len()).map(|i| format!("{i:04}")).collect();
        Ok(InMemoryDataset { ids, items })
    }

    /// Load every manifest entry; references missing on disk are an error.
    pub fn load(root: &Path) -> Result<Self> {
        let layout = DatasetLayout::new(root);
        let manifest = Manifest::load(&layout.manifest_path())?;
        let mut ids = Vec::new();
        let mut items = Vec::new();
        for entry in &manifest.entries {
            let raw = read_image(&layout.raw_path(&entry.id))?;
            let refs = entry
                .references
                .iter()
                .map(|r| read_image(&layout.root.join(&r.file)))
                .collect::<Result<Vec<_>>>()?;
            ids.push(entry.id.clone());
            items.push((raw, refs));
        }
        let mut ds = InMemoryDataset::new(items)?;
        ds.ids = ids;
        Ok(ds)
    }
}

impl PairedDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn num_references(&self, index: usize) -> usize {
        self.items[index].1.len()
    }

    fn raw(&self, index: usize) -> Result<Image> {
        Ok(self.items[index].0.clone())
    }

    fn reference(&self, index: usize, k: usize) -> Result<Image> {
        Ok(self.items[index].1[k].clone())
    }
}
