//! The work behind each subcommand, callable without a process boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use puie_core::consensus::{mc_estimate, mp_estimate, quality_select, SampleSet};
use puie_core::datagen::{
    build_reference_set, synth_clean, synth_degrade, write_entry, ContrastClipScore, DatasetLayout, InMemoryDataset,
    Manifest, ReferenceScorer, SkippedInput,
};
use puie_core::imageio::{read_image, write_png};
use puie_core::metrics::{MetricReport, MetricValues};
use puie_core::trainer::{load_checkpoint, save_checkpoint, train_from};
use puie_core::{mp_mode, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CliConfig, EnhanceMode};
use crate::error::CliError;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Input folders read by [`make_dataset`].
pub const INPUT_RAW_DIR: &str = "raw";
pub const INPUT_REFERENCE_DIR: &str = "reference";

pub const CHECKPOINT_FILE: &str = "checkpoint.puie";
pub const RECORD_FILE: &str = "record.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.with_context(|| format!("cannot list {}", dir.display()))?.path();
        if is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Write `count` synthetic raw/reference pairs in the input layout of
/// [`make_dataset`]. Each reference is a procedural scene and each raw image
/// its underwater-style degradation.
pub fn synth(out_dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<String>> {
    if count == 0 || height == 0 || width == 0 {
        return Err(CliError::Usage("synth needs a positive count and image size".into()).into());
    }
    let raw_dir = out_dir.join(INPUT_RAW_DIR);
    let ref_dir = out_dir.join(INPUT_REFERENCE_DIR);
    fs::create_dir_all(&raw_dir)?;
    fs::create_dir_all(&ref_dir)?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:04}");
        let image_seed = seed.wrapping_add(i as u64);
        let clean = synth_clean(height, width, image_seed);
        let raw = synth_degrade(&clean, image_seed)?;
        write_png(&ref_dir.join(format!("{id}.png")), &clean)?;
        write_png(&raw_dir.join(format!("{id}.png")), &raw)?;
        ids.push(id);
    }
    info!("wrote {count} synthetic pairs to {}", out_dir.display());
    Ok(ids)
}

/// Build the multi-reference training layout from paired `raw/` and
/// `reference/` folders with matching file names.
pub fn make_dataset(in_dir: &Path, out_dir: &Path, cfg: &CliConfig) -> Result<Manifest> {
    let specs = cfg.dataset.specs().map_err(|e| CliError::Config(e.to_string()))?;
    let scorer = ContrastClipScore { penalty: cfg.dataset.clip_penalty };
    let raw_dir = in_dir.join(INPUT_RAW_DIR);
    let ref_dir = in_dir.join(INPUT_REFERENCE_DIR);
    if !raw_dir.is_dir() || !ref_dir.is_dir() {
        return Err(CliError::Input(format!(
            "{} must contain '{INPUT_RAW_DIR}' and '{INPUT_REFERENCE_DIR}' folders",
            in_dir.display()
        ))
        .into());
    }
    let raws = list_images(&raw_dir)?;
    if raws.is_empty() {
        return Err(CliError::Input(format!("no input images in {}", raw_dir.display())).into());
    }

    let layout = DatasetLayout::new(out_dir);
    let mut manifest = Manifest {
        specs: specs.clone(),
        scorer: format!("luminance std - {} x clipped fraction", scorer.penalty),
        entries: Vec::new(),
        skipped: Vec::new(),
    };
    let mut skip = |file: &Path, reason: String| {
        warn!("skipping {}: {reason}", file.display());
        manifest.skipped.push(SkippedInput { file: file_name(file), reason });
    };
    let mut entries = Vec::new();
    for raw_path in &raws {
        let id = stem(raw_path);
        let Some(ref_path) = find_with_stem(&ref_dir, &id)? else {
            skip(raw_path, "no reference with a matching file name".into());
            continue;
        };
        let raw = match read_image(raw_path) {
            Ok(x) => x,
            Err(e) => {
                skip(raw_path, e.to_string());
                continue;
            }
        };
        let original = match read_image(&ref_path) {
            Ok(x) => x,
            Err(e) => {
                skip(raw_path, e.to_string());
                continue;
            }
        };
        if raw.shape() != original.shape() {
            skip(raw_path, format!("raw {:?} and reference {:?} differ in size", raw.shape(), original.shape()));
            continue;
        }
        let set = build_reference_set(&raw, &original, &specs, &scorer as &dyn ReferenceScorer)?;
        entries.push(write_entry(&layout, &id, &raw, &set)?);
    }
    manifest.entries = entries;
    if manifest.entries.is_empty() {
        return Err(CliError::Input(format!("none of the {} inputs could be used", raws.len())).into());
    }
    fs::create_dir_all(out_dir)?;
    manifest.save(&layout.manifest_path())?;
    info!("dataset: {} entries, {} skipped", manifest.entries.len(), manifest.skipped.len());
    Ok(manifest)
}

fn find_with_stem(dir: &Path, id: &str) -> Result<Option<PathBuf>> {
    Ok(list_images(dir)?.into_iter().find(|p| stem(p) == id))
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub record: PathBuf,
    pub config: PathBuf,
}

pub fn train(dataset_dir: &Path, out_dir: &Path, cfg: &CliConfig) -> Result<TrainOutputs> {
    cfg.validate()?;
    let dataset = InMemoryDataset::load(dataset_dir)?;
    let extractor = cfg.train.perceptual.build::<f32>()?;
    let model = Model::<f32>::new(cfg.network.clone(), cfg.train.seed)?;
    info!("training on {} images for {} iterations", dataset.items.len(), cfg.train.iterations);
    let every = (cfg.train.iterations / 20).max(1);
    let (model, record) = train_from(model, &dataset, &cfg.train, extractor.as_ref(), |s| {
        if s.step % every == 0 || s.step == 1 {
            info!("step {} L={:.5} L_e={:.5} L_m={:.5} L_s={:.5}", s.step, s.total, s.l_e, s.l_m, s.l_s);
        }
    })?;

    fs::create_dir_all(out_dir)?;
    let out = TrainOutputs {
        checkpoint: out_dir.join(CHECKPOINT_FILE),
        record: out_dir.join(RECORD_FILE),
        config: out_dir.join(CONFIG_FILE),
    };
    save_checkpoint(&model, &out.checkpoint)?;
    fs::write(&out.record, record.to_jsonl()?)?;
    fs::write(&out.config, cfg.to_toml())?;
    info!("finished in {:.1} s", record.wall_clock_s);
    Ok(out)
}

/// What [`enhance`] wrote for one input image.
#[derive(Debug, Clone, Serialize)]
pub struct EnhanceOutput {
    pub input: String,
    pub mode: &'static str,
    pub files: Vec<String>,
    pub log_densities: Vec<f64>,
    pub grid: Option<String>,
}

/// `<stem>_sNN_lp<log-density>.png`; the density is rounded to three decimals.
pub fn sample_file_name(stem: &str, index: usize, log_density: f64) -> String {
    format!("{stem}_s{index:02}_lp{log_density:.3}.png")
}

/// Tile same-sized `(1, 3, H, W)` images row-major into `columns` columns.
pub fn tile_grid(images: &[Tensor<f32>], columns: usize) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| CliError::Usage("nothing to tile".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = Tensor::zeros([1, c, gh, gw]);
    for (i, img) in images.iter().enumerate() {
        first.ensure_same_shape(img)?;
        let (top, left) = ((i / cols) * h, (i % cols) * w);
        for ch in 0..c {
            let src = img.plane(0, ch);
            let dst = grid.plane_mut(0, ch);
            for y in 0..h {
                let d = (top + y) * gw + left;
                dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(grid)
}

/// Enhance one image or every image in a directory.
///
/// Each image draws its samples from a generator seeded with
/// `cfg.enhance.seed`, so results do not depend on which other images are
/// processed alongside it.
pub fn enhance(checkpoint: &Path, input: &Path, out_dir: &Path, cfg: &CliConfig) -> Result<Vec<EnhanceOutput>> {
    let e = &cfg.enhance;
    if e.samples == 0 {
        return Err(CliError::Usage("the sample count must be at least 1".into()).into());
    }
    if !checkpoint.is_file() {
        return Err(CliError::Input(format!("checkpoint {} does not exist", checkpoint.display())).into());
    }
    let model: Model<f32> =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let inputs = if input.is_dir() {
        list_images(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::Input(format!("{} does not exist", input.display())).into());
    };
    if inputs.is_empty() {
        return Err(CliError::Input(format!("no images in {}", input.display())).into());
    }
    fs::create_dir_all(out_dir)?;
    inputs
        .iter()
        .map(|p| enhance_one(&model, p, out_dir, cfg).with_context(|| format!("enhancing {}", p.display())))
        .collect()
}

fn enhance_one(model: &Model<f32>, path: &Path, out_dir: &Path, cfg: &CliConfig) -> Result<EnhanceOutput> {
    let e = &cfg.enhance;
    let name = stem(path);
    let x = read_image(path)?;
    let ctx = model.prepare(&x)?;
    let mut out = EnhanceOutput { input: file_name(path), mode: e.mode.name(), files: vec![], log_densities: vec![], grid: None };

    if e.mode == EnhanceMode::Mode {
        let img = mp_mode(model, &ctx)?;
        let file = format!("{name}.png");
        write_png(&out_dir.join(&file), &img)?;
        out.files.push(file);
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let set = SampleSet::draw(model, &ctx, e.samples, &mut rng, file_name(path))?;
    let single = match e.mode {
        EnhanceMode::Samples => None,
        EnhanceMode::Mc => Some(mc_estimate(&set)?),
        EnhanceMode::Mp => Some(mp_estimate(&set)?),
        EnhanceMode::Quality => {
            let scorer = ContrastClipScore { penalty: cfg.dataset.clip_penalty };
            Some(quality_select(&set, &|p: &Tensor<f32>| scorer.score(p, &x, &x))?)
        }
        EnhanceMode::Mode => unreachable!("handled above"),
    };
    if let Some(img) = single {
        let file = format!("{name}.png");
        write_png(&out_dir.join(&file), &img)?;
        out.files.push(file);
        return Ok(out);
    }

    for (i, (img, &lp)) in set.predictions().iter().zip(set.log_densities()).enumerate() {
        let file = sample_file_name(&name, i, lp);
        write_png(&out_dir.join(&file), img)?;
        out.files.push(file);
        out.log_densities.push(lp);
    }
    if e.grid {
        let file = format!("{name}_grid.png");
        write_png(&out_dir.join(&file), &tile_grid(set.predictions(), e.grid_columns)?)?;
        out.grid = Some(file);
    }
    fs::write(out_dir.join(format!("{name}_samples.json")), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(out)
}

/// Metrics for every prediction with a reference of the same name.
///
/// A reference named `<stem><ref_suffix>.<ext>` matches prediction
/// `<stem>.<ext>`. Unpaired or unreadable files become report warnings.
pub fn evaluate(pred_dir: &Path, ref_dir: &Path, ref_suffix: &str) -> Result<MetricReport> {
    let preds: BTreeMap<String, PathBuf> = list_images(pred_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut refs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_images(ref_dir)? {
        let s = stem(&p);
        if let Some(id) = s.strip_suffix(ref_suffix) {
            refs.insert(id.to_string(), p);
        }
    }
    let mut report = MetricReport::default();
    for (id, pred_path) in &preds {
        let Some(ref_path) = refs.get(id) else {
            report.warnings.push(format!("{}: no matching reference", file_name(pred_path)));
            continue;
        };
        let pair = read_image(pred_path).and_then(|p| Ok((p, read_image(ref_path)?)));
        match pair.and_then(|(p, r)| MetricValues::compute(&p, &r)) {
            Ok(v) => report.push(id.clone(), v),
            Err(err) => report.warnings.push(format!("{}: {err}", file_name(pred_path))),
        }
    }
    for (id, ref_path) in &refs {
        if !preds.contains_key(id) {
            report.warnings.push(format!("{}: no matching prediction", file_name(ref_path)));
        }
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    if report.rows.is_empty() {
        return Err(CliError::Input(format!(
            "no prediction in {} has a usable reference in {}",
            pred_dir.display(),
            ref_dir.display()
        ))
        .into());
    }
    Ok(report)
}
