//! Experiment orchestration: dataset generation, training the variant
//! matrix, evaluation tables, error maps and paired-difference reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{attenuation_lut, TissueProperties};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{self, FeatureExtractor, HistogramSpec, ImageMetrics, MetricReport, PairedDifferences, PsnrForm, StatisticsExtractor};
use crate::model::{load_checkpoint, read_checkpoint_meta, DiscriminatorConfig, ExtraInput, Generator, Normalization, Variant};
use crate::oracle::{OracleConfig, Renderer};
use crate::scene::{build_phantom, default_phantom_spec, sample_probe_poses, PhantomSpec, ProbePose, ScanGeometry};
use crate::seed;
use crate::training::{encode_label, infer_full_fov, input_sources, train, Example, GeneratorCheckpointConfig, TrainConfig};

/// Environment variable naming a directory where real-image FID features are cached.
pub const FEATURE_CACHE_ENV: &str = "ECHOSYNTH_FEATURE_CACHE";

const MANIFEST: &str = "manifest.json";
const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub frames: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Yaw samples per lattice position.
    pub orientations: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { frames: 200, train_fraction: 0.9, seed: 1, orientations: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// First encoder width; 64 gives the full-size networks.
    pub base_channels: usize,
    /// Depth of the legacy U-Net baselines.
    pub legacy_n_down: usize,
    pub normalization: Normalization,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { base_channels: 16, legacy_n_down: 6, normalization: Normalization::Instance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSettings {
    pub n_layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorSettings {
    fn default() -> Self {
        Self { n_layers: 3, base_channels: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSettings {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Variant the paired differences are taken against.
    pub reference: Variant,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), seeds: vec![1, 2, 3], reference: Variant::Sa2h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub fid: bool,
    pub psnr_form: PsnrForm,
    pub histogram: HistogramSpec,
    /// Error maps and image grids are written for this many eval frames.
    pub error_maps: usize,
    /// Frames with fewer shadow-band pixels inside the mask get no shadow error.
    pub min_shadow_pixels: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { fid: true, psnr_form: PsnrForm::SquaredPeak, histogram: HistogramSpec::default(), error_maps: 4, min_shadow_pixels: 50 }
    }
}

/// Everything an experiment needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub geometry: ScanGeometry,
    pub oracle: OracleConfig,
    pub phantom: Option<PhantomSpec>,
    pub tissues: Option<TissueProperties>,
    pub model: ModelSettings,
    pub discriminator: DiscriminatorSettings,
    pub train: TrainConfig,
    pub experiment: PlanSettings,
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Desk-scale defaults with a 128-pixel training crop.
    pub fn desk() -> Self {
        Self { train: TrainConfig { crop: 128, ..TrainConfig::default() }, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(message) => Error::Parse { path: path.into(), message },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut base: toml::Table = toml::to_string(&Self::desk())
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("cannot serialise defaults".into()))?;
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge_tables(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom.clone().unwrap_or_else(default_phantom_spec)
    }

    pub fn tissue_properties(&self) -> TissueProperties {
        self.tissues.clone().unwrap_or_else(TissueProperties::default_fetal)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.oracle.validate()?;
        self.tissue_properties().validate()?;
        if self.dataset.frames == 0 || self.dataset.orientations == 0 {
            return Err(Error::Config("dataset needs at least one frame and one orientation".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        if self.experiment.variants.is_empty() || self.experiment.seeds.is_empty() {
            return Err(Error::Config("the plan needs at least one variant and one seed".into()));
        }
        Ok(())
    }

    /// Generator architecture and discriminator for one variant.
    pub fn cell_configs(&self, variant: Variant) -> (crate::model::GeneratorConfig, DiscriminatorConfig) {
        let mut gen = variant.generator_config(self.model.base_channels, self.model.legacy_n_down);
        gen.normalization = self.model.normalization;
        let disc = DiscriminatorConfig {
            n_layers: self.discriminator.n_layers,
            base_channels: self.discriminator.base_channels,
            condition_channels: gen.cond_channels(),
        };
        (gen, disc)
    }

    /// The parts of the config that determine the rendered frames.
    fn dataset_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": self.dataset,
            "geometry": self.geometry,
            "oracle": self.oracle,
            "phantom": self.phantom_spec(),
            "tissues": self.tissue_properties(),
        })
    }
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One experiment cell per `(variant, seed)`, in plan order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset_id: String,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub reference: Variant,
}

impl ExperimentPlan {
    pub fn new(cfg: &ExperimentConfig, dataset_id: &str) -> Result<Self> {
        let mut seen = Vec::new();
        for v in &cfg.experiment.variants {
            if seen.contains(v) {
                return Err(Error::Config(format!("variant {v} listed twice")));
            }
            seen.push(*v);
        }
        Ok(Self { dataset_id: dataset_id.into(), variants: seen, seeds: cfg.experiment.seeds.clone(), reference: cfg.experiment.reference })
    }

    pub fn cells(&self) -> Vec<(Variant, u64)> {
        self.variants.iter().flat_map(|&v| self.seeds.iter().map(move |&s| (v, s))).collect()
    }
}

pub fn cell_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed-{seed}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub pose: ProbePose,
    pub split: Split,
    pub shadow_pixels: usize,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dataset_id: String,
    pub master_seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_tissues: usize,
    pub attenuation_lut: Vec<f64>,
    pub has_low_quality: bool,
    pub config: serde_json::Value,
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.frames.iter().filter(|f| f.split == split).map(|f| f.id.as_str()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&FrameEntry> {
        self.frames.iter().find(|f| f.id == id).ok_or_else(|| Error::Dataset(format!("no frame `{id}` in the manifest")))
    }

    /// Re-hashes every frame file.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.frames {
            for (name, hash) in &f.files {
                let path = dir.join(FRAMES_DIR).join(&f.id).join(name);
                let bytes = std::fs::read(&path).at(&path)?;
                if sha256_hex(&bytes) != *hash {
                    return Err(Error::Dataset(format!("{} does not match its manifest hash", path.display())));
                }
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lossless 16-bit grayscale PNG bytes.
pub fn encode_png16(width: usize, height: usize, data: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_ne_bytes()).collect();
    PngEncoder::new(&mut out).write_image(&bytes, width as u32, height as u32, image::ExtendedColorType::L16)?;
    Ok(out)
}

/// Quantises `[0, 1]` values (clamped) to 16 bits.
pub fn unit_to_u16(values: &[f64]) -> Vec<u16> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect()
}

pub fn write_png16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<String> {
    let bytes = encode_png16(width, height, data)?;
    std::fs::write(path, &bytes).at(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn is_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut it| it.next().is_none()).unwrap_or(true)
}

/// Renders the dataset into `out`. Re-running with the same settings on a
/// complete dataset is a no-op; anything else already on disk is refused
/// unless `force` is set.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, frames: Option<usize>, master_seed: Option<u64>, force: bool, threads: usize) -> Result<Manifest> {
    let mut cfg = cfg.clone();
    if let Some(n) = frames {
        cfg.dataset.frames = n;
    }
    if let Some(s) = master_seed {
        cfg.dataset.seed = s;
    }
    cfg.validate()?;
    let echo = cfg.dataset_echo();

    if out.join(MANIFEST).exists() {
        let existing = Manifest::load(out)?;
        if existing.config == echo && existing.verify(out).is_ok() {
            log::info!("dataset in {} is up to date", out.display());
            return Ok(existing);
        }
        if !force {
            return Err(Error::Dataset(format!("{} holds a different or damaged dataset; pass --force to regenerate", out.display())));
        }
    } else if !is_empty_dir(&out.join(FRAMES_DIR)) && !force {
        return Err(Error::Dataset(format!("{} has frames but no manifest (interrupted run?); pass --force to regenerate", out.display())));
    }
    if force {
        let frames_dir = out.join(FRAMES_DIR);
        if frames_dir.exists() {
            std::fs::remove_dir_all(&frames_dir).at(&frames_dir)?;
        }
        let _ = std::fs::remove_file(out.join(MANIFEST));
    }

    let phantom = build_phantom(&cfg.phantom_spec())?;
    let props = cfg.tissue_properties();
    props.check_covers(phantom.n_tissues())?;
    let renderer = Renderer::new(&cfg.geometry, &props, &cfg.oracle)?;
    let n = cfg.dataset.frames;
    let master = cfg.dataset.seed;

    let positions = n.div_ceil(cfg.dataset.orientations);
    let side = (positions as f64).sqrt().ceil() as usize;
    let mut poses = sample_probe_poses(&phantom, side, side, cfg.dataset.orientations, seed::derive_named(master, "poses"));
    let mut order_rng = seed::rng(seed::derive_named(master, "pose-order"));
    rand::seq::SliceRandom::shuffle(poses.as_mut_slice(), &mut order_rng);
    poses.truncate(n);

    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut seed::rng(seed::derive_named(master, "split")));
    let n_train = (cfg.dataset.train_fraction * n as f64).round() as usize;
    let mut split = vec![Split::Eval; n];
    for &i in &ids[..n_train] {
        split[i] = Split::Train;
    }

    let frames_dir = out.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let threads = threads.max(1);
    let render_one = |index: usize| -> Result<FrameEntry> {
        let id = format!("f{index:05}");
        let frame_seed = seed::derive(master, index as u64);
        let frame = renderer.render(&phantom, &poses[index], frame_seed)?;
        let dir = frames_dir.join(&id);
        std::fs::create_dir_all(&dir).at(&dir)?;
        let (h, w) = (frame.height(), frame.width());
        let mut files = BTreeMap::new();
        let labels: Vec<u16> = frame.s.labels().iter().map(|&t| u16::from(t)).collect();
        files.insert("s.png".to_string(), write_png16(&dir.join("s.png"), w, h, &labels)?);
        files.insert("a.png".to_string(), write_png16(&dir.join("a.png"), w, h, &unit_to_u16(&frame.a.pixels))?);
        files.insert("y.png".to_string(), write_png16(&dir.join("y.png"), w, h, &unit_to_u16(&frame.y.pixels))?);
        if let Some(low) = &frame.low {
            files.insert("low.png".to_string(), write_png16(&dir.join("low.png"), w, h, &unit_to_u16(&low.pixels))?);
        }
        let bits = |v: &[bool]| -> Vec<u16> { v.iter().map(|&b| if b { 65535 } else { 0 }).collect() };
        files.insert("mask.png".to_string(), write_png16(&dir.join("mask.png"), w, h, &bits(&frame.mask))?);
        files.insert("shadow.png".to_string(), write_png16(&dir.join("shadow.png"), w, h, &bits(&frame.shadow))?);
        let shadow_pixels = frame.shadow.iter().zip(&frame.mask).filter(|(s, m)| **s && **m).count();
        Ok(FrameEntry { id, index, seed: frame_seed, pose: poses[index], split: split[index], shadow_pixels, files })
    };
    let mut entries: Vec<Option<Result<FrameEntry>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let render_one = &render_one;
                scope.spawn(move || (t..n).step_by(threads).map(|i| (i, render_one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("render thread panicked") {
                entries[i] = Some(r);
            }
        }
    });
    let frames = entries.into_iter().map(|e| e.expect("every frame rendered")).collect::<Result<Vec<_>>>()?;

    let mut id_hasher = Sha256::new();
    id_hasher.update(serde_json::to_vec(&echo)?);
    for f in &frames {
        for (name, hash) in &f.files {
            id_hasher.update(format!("{}/{name}:{hash}\n", f.id));
        }
    }
    let (height, width) = cfg.geometry.cart_size;
    let manifest = Manifest {
        format: 1,
        dataset_id: hex::encode(id_hasher.finalize())[..16].to_string(),
        master_seed: master,
        height,
        width,
        n_tissues: props.len(),
        attenuation_lut: attenuation_lut(&props, &cfg.geometry)?,
        has_low_quality: cfg.oracle.low_quality.is_some(),
        config: echo,
        frames,
    };
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

/// Loads one frame from disk as network-ready planes.
pub fn load_example(dataset: &Path, manifest: &Manifest, id: &str, with_low: bool) -> Result<Example> {
    let dir = dataset.join(FRAMES_DIR).join(id);
    let read = |name: &str| -> Result<Vec<u16>> {
        let (h, w, data) = read_png16(&dir.join(name))?;
        if (h, w) != (manifest.height, manifest.width) {
            return Err(Error::Dataset(format!("{id}/{name} is {h}x{w}, manifest says {}x{}", manifest.height, manifest.width)));
        }
        Ok(data)
    };
    let unit = |v: Vec<u16>| -> Vec<f64> { v.into_iter().map(|x| f64::from(x) / 65535.0).collect() };
    let mask: Vec<f64> = read("mask.png")?.into_iter().map(|v| f64::from(u8::from(v > 0))).collect();
    let y: Vec<f64> = unit(read("y.png")?).iter().zip(&mask).map(|(v, m)| v * m).collect();
    let n_tissues = manifest.n_tissues;
    let s = read("s.png")?
        .into_iter()
        .map(|t| u8::try_from(t).map(|t| encode_label(t, n_tissues)).map_err(|_| Error::Dataset(format!("{id}: label {t} out of range"))))
        .collect::<Result<Vec<_>>>()?;
    let low = if with_low {
        if !manifest.has_low_quality {
            return Err(Error::Dataset("this dataset was rendered without low-quality images".into()));
        }
        Some(unit(read("low.png")?).into_iter().map(|v| 2.0 * v - 1.0).collect())
    } else {
        None
    };
    Ok(Example {
        id: id.into(),
        height: manifest.height,
        width: manifest.width,
        s,
        a: unit(read("a.png")?).into_iter().map(|v| 2.0 * v - 1.0).collect(),
        low,
        y,
        mask,
        shadow: read("shadow.png")?.into_iter().map(|v| v > 0).collect(),
    })
}

fn load_split(dataset: &Path, manifest: &Manifest, split: Split, with_low: bool) -> Result<Vec<Example>> {
    manifest.ids(split).into_iter().map(|id| load_example(dataset, manifest, id, with_low)).collect()
}

/// Config echo written next to each trained cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: Variant,
    pub seed: u64,
    pub dataset_id: String,
    pub inputs: Vec<String>,
    pub generator: crate::model::GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub generator_params: usize,
    pub discriminator_params: usize,
}

/// Trains every `(variant, seed)` cell of the plan into `out/<variant>/seed-<n>`.
/// Cells whose record and final checkpoint already exist are kept.
pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<Vec<CellRecord>> {
    let manifest = Manifest::load(dataset)?;
    let plan = ExperimentPlan::new(cfg, &manifest.dataset_id)?;
    let needs_low = plan.variants.iter().any(|&v| cfg.cell_configs(v).0.extra_input == ExtraInput::LowQuality);
    let train_set = load_split(dataset, &manifest, Split::Train, needs_low)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("the manifest lists no training frames".into()));
    }
    let mut records = Vec::new();
    for (variant, seed) in plan.cells() {
        let (gen, disc) = cfg.cell_configs(variant);
        let tc = TrainConfig { seed, variant, ..cfg.train.clone() };
        let record = CellRecord {
            variant,
            seed,
            dataset_id: manifest.dataset_id.clone(),
            inputs: input_sources(&gen).into_iter().map(String::from).collect(),
            generator_params: Generator::<f32>::new(&gen, 0)?.param_count(),
            discriminator_params: crate::model::Discriminator::<f32>::new(&disc, 0)?.param_count(),
            generator: gen.clone(),
            discriminator: disc.clone(),
            train: tc.clone(),
        };
        let dir = cell_dir(out, variant, seed);
        let record_path = dir.join("cell.json");
        if let Ok(text) = std::fs::read_to_string(&record_path) {
            if serde_json::from_str::<CellRecord>(&text).ok().as_ref() == Some(&record) && dir.join("generator.bin").exists() {
                log::info!("{variant} seed {seed}: already trained");
                records.push(record);
                continue;
            }
        }
        log::info!("training {variant} seed {seed} ({} generator parameters, inputs {:?})", record.generator_params, record.inputs);
        std::fs::create_dir_all(&dir).at(&dir)?;
        // the record is written last so an interrupted cell is retrained
        let _ = std::fs::remove_file(&record_path);
        train(&tc, &gen, &disc, &train_set, Some(&dir))?;
        std::fs::write(&record_path, serde_json::to_string_pretty(&record)?).at(&record_path)?;
        records.push(record);
    }
    Ok(records)
}

/// Loads the final generator of a trained cell.
pub fn load_generator(dir: &Path) -> Result<(Generator<f32>, GeneratorCheckpointConfig)> {
    let meta = read_checkpoint_meta(dir, "generator")?;
    let cfg: GeneratorCheckpointConfig = serde_json::from_value(meta.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let g = Generator::<f32>::new(&cfg.generator, 0)?;
    load_checkpoint(dir, "generator", g.named_parameters())?;
    Ok((g, cfg))
}

/// Seed of the noise used when rendering eval frame `frame_seed`.
pub fn inference_seed(frame_seed: u64) -> u64 {
    seed::derive_named(frame_seed, "inference")
}

/// `|mean(y_hat) - mean(y)|` on the 0-255 scale over shadow-band pixels inside the mask.
pub fn shadow_brightness_error(y: &[f64], y_hat: &[f64], shadow: &[bool], mask: &[bool], min_pixels: usize) -> Option<f64> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| shadow[i] && mask[i]).collect();
    if idx.len() < min_pixels.max(1) {
        return None;
    }
    let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
    Some(metrics::PEAK * (mean(y_hat) - mean(y)).abs())
}

/// Per-image metrics of one prediction.
pub fn image_metrics(ex: &Example, pred: &[f64], settings: &EvalSettings) -> Result<(ImageMetrics, metrics::PatchMap)> {
    let mask = ex.mask_bool();
    let scale = |v: &[f64]| v.iter().map(|x| x * metrics::PEAK).collect::<Vec<_>>();
    let (y255, p255) = (scale(&ex.y), scale(pred));
    let (pchi2, map) = metrics::patch_chi2(&ex.y, pred, ex.height, ex.width, &settings.histogram, Some(&mask))?;
    Ok((
        ImageMetrics {
            id: ex.id.clone(),
            psnr: metrics::psnr(&y255, &p255, settings.psnr_form)?,
            mae: metrics::mae(&y255, &p255, Some(&mask))?,
            pchi2,
            shadow_error: shadow_brightness_error(&ex.y, pred, &ex.shadow, &mask, settings.min_shadow_pixels),
        },
        map,
    ))
}

/// One table row per variant, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: Variant,
    pub seeds: usize,
    pub aggregate: metrics::Aggregate,
    pub fid: Option<f64>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset_id: String,
    pub reports: Vec<MetricReport>,
    pub table: Vec<TableRow>,
}

fn cached_real_features(dataset_id: &str, extractor: &dyn FeatureExtractor, compute: impl FnOnce() -> Result<Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    let Some(dir) = std::env::var_os(FEATURE_CACHE_ENV).map(PathBuf::from) else {
        return compute();
    };
    let path = dir.join(format!("{dataset_id}-{}.json", extractor.name()));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str(&text) {
            return Ok(v);
        }
    }
    let feats = compute()?;
    std::fs::create_dir_all(&dir).at(&dir)?;
    std::fs::write(&path, serde_json::to_string(&feats)?).at(&path)?;
    Ok(feats)
}

fn image_features(extractor: &dyn FeatureExtractor, img: &[f64], h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
    if h < metrics::FID_CENTER || w < metrics::FID_CENTER {
        return Ok(vec![extractor.features(img, h, w)]);
    }
    Ok(metrics::fid_crops(img, h, w)?.iter().map(|c| extractor.features(c, metrics::FID_CROP, metrics::FID_CROP)).collect())
}

fn side_by_side(panels: &[Vec<f64>], h: usize, w: usize) -> Vec<u16> {
    let total = w * panels.len();
    let mut out = vec![0u16; h * total];
    for (k, p) in panels.iter().enumerate() {
        let q = unit_to_u16(p);
        for r in 0..h {
            out[r * total + k * w..r * total + (k + 1) * w].copy_from_slice(&q[r * w..(r + 1) * w]);
        }
    }
    out
}

/// Evaluates every trained cell of the plan on the eval split and writes
/// `report.json` per cell, error maps and image grids, and the summary table.
pub fn cmd_eval(cfg: &ExperimentConfig, dataset: &Path, runs: &Path, out: &Path) -> Result<EvalSummary> {
    let manifest = Manifest::load(dataset)?;
    let plan = ExperimentPlan::new(cfg, &manifest.dataset_id)?;
    let settings = &cfg.eval;
    let eval_ids = manifest.ids(Split::Eval);
    if eval_ids.is_empty() {
        return Err(Error::EmptyDataset("the manifest lists no eval frames".into()));
    }
    if settings.fid && eval_ids.len() < 2 && manifest.height < metrics::FID_CENTER {
        return Err(Error::Metric("FID needs at least 2 eval images".into()));
    }
    let needs_low = plan.variants.iter().any(|&v| cfg.cell_configs(v).0.extra_input == ExtraInput::LowQuality);
    let eval_set = load_split(dataset, &manifest, Split::Eval, needs_low)?;
    let extractor = StatisticsExtractor;
    let real_features = if settings.fid {
        Some(cached_real_features(&manifest.dataset_id, &extractor, || {
            let mut v = Vec::new();
            for ex in &eval_set {
                v.extend(image_features(&extractor, &ex.y, ex.height, ex.width)?);
            }
            Ok(v)
        })?)
    } else {
        None
    };

    let mut reports = Vec::new();
    for (variant, seed) in plan.cells() {
        let dir = cell_dir(runs, variant, seed);
        let record: CellRecord = {
            let p = dir.join("cell.json");
            serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?
        };
        if record.dataset_id != manifest.dataset_id {
            return Err(Error::Checkpoint(format!("{} was trained on dataset {}, not {}", dir.display(), record.dataset_id, manifest.dataset_id)));
        }
        let (g, _) = load_generator(&dir)?;
        let cell_out = cell_dir(out, variant, seed);
        std::fs::create_dir_all(&cell_out).at(&cell_out)?;
        let mut per_image = Vec::with_capacity(eval_set.len());
        let mut gen_features = Vec::new();
        for (k, ex) in eval_set.iter().enumerate() {
            let frame_seed = manifest.entry(&ex.id)?.seed;
            let pred = infer_full_fov(&g, ex, inference_seed(frame_seed))?.pixels;
            let (m, map) = image_metrics(ex, &pred, settings)?;
            if settings.fid {
                gen_features.extend(image_features(&extractor, &pred, ex.height, ex.width)?);
            }
            if k < settings.error_maps {
                write_png16(&cell_out.join(format!("errmap_{}.png", ex.id)), ex.width, ex.height, &unit_to_u16(&map.to_image(ex.height, ex.width)))?;
                let s_disp: Vec<f64> = ex.s.iter().map(|v| 0.5 * (v + 1.0)).collect();
                let a_disp: Vec<f64> = ex.a.iter().map(|v| 0.5 * (v + 1.0)).collect();
                let grid = side_by_side(&[s_disp, a_disp, pred.clone(), ex.y.clone()], ex.height, ex.width);
                write_png16(&cell_out.join(format!("grid_{}.png", ex.id)), 4 * ex.width, ex.height, &grid)?;
            }
            per_image.push(m);
        }
        let mut report =
            MetricReport::new(variant.name().into(), format!("{}/seed-{seed}", variant.name()), manifest.dataset_id.clone(), g.param_count(), per_image);
        if let Some(real) = &real_features {
            report.fid = Some(metrics::fid(real, &gen_features)?);
            report.fid_extractor = Some(extractor.name().into());
        }
        let path = cell_out.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?).at(&path)?;
        reports.push(report);
    }

    let table: Vec<TableRow> = plan
        .variants
        .iter()
        .map(|&v| {
            let mine: Vec<&MetricReport> = reports.iter().filter(|r| r.variant == v.name()).collect();
            let pooled: Vec<ImageMetrics> = mine.iter().flat_map(|r| r.per_image.iter().cloned()).collect();
            let fids: Vec<f64> = mine.iter().filter_map(|r| r.fid).collect();
            TableRow {
                variant: v,
                seeds: mine.len(),
                aggregate: metrics::aggregate(&pooled),
                fid: (!fids.is_empty()).then(|| fids.iter().sum::<f64>() / fids.len() as f64),
                params: mine.first().map_or(0, |r| r.params),
            }
        })
        .collect();
    let summary = EvalSummary { dataset_id: manifest.dataset_id.clone(), reports, table };
    std::fs::create_dir_all(out).at(out)?;
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).at(&path)?;
    let path = out.join("table.md");
    std::fs::write(&path, render_table(&summary.table)).at(&path)?;
    Ok(summary)
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut s = String::from("| variant | PSNR | MAE | pchi2 (x1e-2) | shadow err | FID | #params |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let a = &r.aggregate;
        let shadow = a.shadow_error.map_or("-".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.std));
        let fid = r.fid.map_or("-".to_string(), |f| format!("{f:.2}"));
        let _ = writeln!(
            s,
            "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} | {shadow} | {fid} | {:.2}M |",
            r.variant,
            a.psnr.mean,
            a.psnr.std,
            a.mae.mean,
            a.mae.std,
            100.0 * a.pchi2.mean,
            100.0 * a.pchi2.std,
            r.params as f64 / 1e6
        );
    }
    s
}

/// Paired differences `reference - variant` for every other variant, pooled
/// over the seeds both were evaluated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub reference: String,
    pub series: Vec<PairedDifferences>,
    pub notice: Option<String>,
}

/// Reads `report.json` files from `eval_dir` and writes box plots and a summary.
pub fn cmd_report(eval_dir: &Path, reference: Variant, out: &Path) -> Result<ReportSummary> {
    let summary: EvalSummary = {
        let p = eval_dir.join("summary.json");
        serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?
    };
    let report = summarize_reports(&summary.reports, reference)?;
    std::fs::create_dir_all(out).at(out)?;
    let path = out.join("boxplots.svg");
    std::fs::write(&path, boxplot_svg(&report)).at(&path)?;
    let path = out.join("paired_differences.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).at(&path)?;
    let path = out.join("summary.md");
    std::fs::write(&path, report_markdown(&report, &summary.table)).at(&path)?;
    Ok(report)
}

/// Pairs each non-reference variant with the reference, seed by seed.
pub fn summarize_reports(reports: &[MetricReport], reference: Variant) -> Result<ReportSummary> {
    let seed_of = |r: &MetricReport| r.checkpoint.rsplit("seed-").next().unwrap_or("").to_string();
    let refs: Vec<&MetricReport> = reports.iter().filter(|r| r.variant == reference.name()).collect();
    let mut variants: Vec<&str> = Vec::new();
    for r in reports {
        if r.variant != reference.name() && !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut series = Vec::new();
    for v in &variants {
        let mut pooled: Option<PairedDifferences> = None;
        for r in reports.iter().filter(|r| r.variant == *v) {
            let Some(base) = refs.iter().find(|b| seed_of(b) == seed_of(r)) else {
                return Err(Error::Metric(format!("no {reference} report for seed {}", seed_of(r))));
            };
            let d = metrics::paired_differences(base, r)?;
            pooled = Some(match pooled {
                None => d,
                Some(mut p) => {
                    p.ids.extend(d.ids);
                    p.psnr.extend(d.psnr);
                    p.mae.extend(d.mae);
                    p.pchi2.extend(d.pchi2);
                    p
                }
            });
        }
        if let Some(mut p) = pooled {
            p.psnr_box = metrics::BoxStats::of(&p.psnr);
            p.mae_box = metrics::BoxStats::of(&p.mae);
            p.pchi2_box = metrics::BoxStats::of(&p.pchi2);
            series.push(p);
        }
    }
    let notice = series.is_empty().then(|| format!("only {reference} was evaluated; there are no paired differences to plot"));
    Ok(ReportSummary { reference: reference.name().into(), series, notice })
}

fn report_markdown(report: &ReportSummary, table: &[TableRow]) -> String {
    let mut s = String::from("# Evaluation summary\n\n");
    s.push_str(&render_table(table));
    let _ = writeln!(s, "\n## Paired differences ({} minus variant)\n", report.reference);
    if let Some(n) = &report.notice {
        let _ = writeln!(s, "{n}\n");
    }
    s.push_str("| variant | metric | q1 | median | q3 |\n|---|---|---|---|---|\n");
    for p in &report.series {
        for (name, b) in [("PSNR", p.psnr_box), ("MAE", p.mae_box), ("pchi2", p.pchi2_box)] {
            if let Some(b) = b {
                let _ = writeln!(s, "| {} | {name} | {:.4} | {:.4} | {:.4} |", p.b, b.q1, b.median, b.q3);
            }
        }
    }
    s.push_str("\nBox plots: `boxplots.svg`.\n");
    s
}

/// Three panels (PSNR, MAE, pchi2), one box per variant.
pub fn boxplot_svg(report: &ReportSummary) -> String {
    let (pw, ph, pad) = (320.0, 260.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        3.0 * pw,
        ph + 30.0
    );
    let panels: [(&str, fn(&PairedDifferences) -> Option<metrics::BoxStats>); 3] =
        [("PSNR", |p| p.psnr_box), ("MAE", |p| p.mae_box), ("pchi2", |p| p.pchi2_box)];
    for (k, (name, pick)) in panels.iter().enumerate() {
        let x0 = k as f64 * pw;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"16\" text-anchor=\"middle\">{name}: {} - variant</text>", x0 + pw / 2.0, report.reference);
        let boxes: Vec<(&str, metrics::BoxStats)> = report.series.iter().filter_map(|p| pick(p).map(|b| (p.b.as_str(), b))).collect();
        if boxes.is_empty() {
            let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">no paired differences</text>", x0 + pw / 2.0, ph / 2.0);
            continue;
        }
        let lo = boxes.iter().map(|(_, b)| b.whisker_low).fold(0.0f64, f64::min);
        let hi = boxes.iter().map(|(_, b)| b.whisker_high).fold(0.0f64, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let y = |v: f64| 30.0 + (ph - pad) * (1.0 - (v - lo) / span);
        let _ = writeln!(svg, "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\" stroke-dasharray=\"3,3\"/>", x0 + pad, x0 + pw - 10.0, y(0.0), y(0.0));
        let slot = (pw - pad - 10.0) / boxes.len() as f64;
        for (i, (label, b)) in boxes.iter().enumerate() {
            let cx = x0 + pad + slot * (i as f64 + 0.5);
            let half = slot * 0.3;
            let _ = writeln!(svg, "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", y(b.whisker_low), y(b.whisker_high));
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#cde\" stroke=\"black\"/>",
                cx - half,
                y(b.q3),
                2.0 * half,
                (y(b.q1) - y(b.q3)).max(0.5)
            );
            let _ = writeln!(svg, "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>", cx - half, cx + half, y(b.median), y(b.median));
            let _ = writeln!(svg, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>", ph + 10.0);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders generator output for the given frames (all eval frames when empty).
pub fn cmd_infer(checkpoint: &Path, dataset: &Path, out: &Path, frame_ids: &[String], seed_override: Option<u64>) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(dataset)?;
    let (g, _) = load_generator(checkpoint)?;
    let ids: Vec<String> = if frame_ids.is_empty() { manifest.ids(Split::Eval).into_iter().map(String::from).collect() } else { frame_ids.to_vec() };
    std::fs::create_dir_all(out).at(out)?;
    let with_low = g.config().extra_input == ExtraInput::LowQuality;
    let mut written = Vec::new();
    for id in &ids {
        let entry = manifest.entry(id)?;
        let ex = load_example(dataset, &manifest, id, with_low)?;
        let img = infer_full_fov(&g, &ex, seed_override.unwrap_or_else(|| inference_seed(entry.seed)))?;
        let path = out.join(format!("{id}.png"));
        write_png16(&path, img.width, img.height, &unit_to_u16(&img.pixels))?;
        written.push(path);
    }
    Ok(written)
}

/// Standalone stochastic-texture probe: output of `g` for two noise seeds.
pub fn texture_pair(g: &Generator<f64>, ex: &Example, seeds: (u64, u64)) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((infer_full_fov(g, ex, seeds.0)?.pixels, infer_full_fov(g, ex, seeds.1)?.pixels))
}

/// Mean over `f x f` blocks (trailing rows/columns dropped).
pub fn block_downsample(img: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    assert_eq!(img.len(), h * w, "image shape");
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh * f {
        for c in 0..ow * f {
            out[(r / f) * ow + c / f] += img[r * w + c] / (f * f) as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.geometry.cart_size = (64, 64);
        cfg.geometry.n_scanlines = 48;
        cfg.geometry.n_axial = 96;
        cfg.dataset.frames = 10;
        cfg.model.base_channels = 4;
        cfg.model.legacy_n_down = 4;
        cfg.discriminator = DiscriminatorSettings { n_layers: 2, base_channels: 4 };
        cfg.train = TrainConfig { crop: 32, epochs: 1, batch_size: 2, ..TrainConfig::default() };
        cfg.experiment = PlanSettings { variants: vec![Variant::Sa2h, Variant::Nsa2h], seeds: vec![1, 2], reference: Variant::Sa2h };
        cfg.eval.error_maps = 1;
        cfg.eval.histogram.patch = 8;
        cfg
    }

    #[test]
    fn config_parses_partial_toml() {
        let cfg = ExperimentConfig::parse("[dataset]\nframes = 8\n[train]\nepochs = 2\n[experiment]\nvariants = [\"sa2h\", \"nsa2h\"]\n").unwrap();
        assert_eq!(cfg.dataset.frames, 8);
        assert_eq!(cfg.dataset.train_fraction, 0.9);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.crop, 128);
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.experiment.variants, vec![Variant::Sa2h, Variant::Nsa2h]);
        assert!(ExperimentConfig::parse("[experiment]\nvariants = [\"pix2pix\"]\n").is_err());
        assert!(ExperimentConfig::parse("[dataset]\nframez = 3\n").is_err());
        let geo = ExperimentConfig::parse("[geometry]\ncart_size = [128, 96]\n").unwrap();
        assert_eq!(geo.geometry.cart_size, (128, 96));
        assert_eq!(geo.geometry.n_scanlines, 128);
    }

    #[test]
    fn plan_cells_and_variant_mapping() {
        let cfg = tiny_config();
        let plan = ExperimentPlan::new(&cfg, "x").unwrap();
        assert_eq!(plan.cells().len(), 4);
        let mut all = ExperimentConfig::desk();
        all.experiment.variants = Variant::ALL.to_vec();
        let configs: Vec<_> = Variant::ALL.iter().map(|&v| all.cell_configs(v).0).collect();
        for i in 0..configs.len() {
            for j in i + 1..configs.len() {
                assert_ne!(configs[i], configs[j], "{} and {} share an architecture", Variant::ALL[i], Variant::ALL[j]);
            }
        }
        let noise = all.cell_configs(Variant::Sa2hNoise).0;
        assert!(!noise.use_noise && noise.extra_input == ExtraInput::Noise);
        assert_eq!(input_sources(&all.cell_configs(Variant::Lsa2h).0), vec!["s", "a", "low-quality"]);
        all.experiment.variants = vec![Variant::Sa2h, Variant::Sa2h];
        assert!(ExperimentPlan::new(&all, "x").is_err());
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        let hash = write_png16(&dir.path().join("x.png"), 4, 3, &data).unwrap();
        assert_eq!(read_png16(&dir.path().join("x.png")).unwrap(), (3, 4, data.clone()));
        assert_eq!(hash, write_png16(&dir.path().join("y.png"), 4, 3, &data).unwrap());
    }

    #[test]
    fn gen_data_split_idempotence_and_refusal() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let m = cmd_gen_data(&cfg, &out, None, None, false, 2).unwrap();
        assert_eq!(m.frames.len(), 10);
        assert_eq!(m.ids(Split::Train).len(), 9);
        assert_eq!(m.ids(Split::Eval).len(), 1);
        assert_eq!(std::fs::read_dir(out.join(FRAMES_DIR)).unwrap().count(), 10);
        let before = std::fs::read(out.join(MANIFEST)).unwrap();
        let again = cmd_gen_data(&cfg, &out, None, None, false, 1).unwrap();
        assert_eq!(again, m);
        assert_eq!(std::fs::read(out.join(MANIFEST)).unwrap(), before);

        // same seed elsewhere, single-threaded: identical manifest bytes
        let other = dir.path().join("copy");
        cmd_gen_data(&cfg, &other, None, None, false, 1).unwrap();
        assert_eq!(std::fs::read(other.join(MANIFEST)).unwrap(), before);

        assert!(cmd_gen_data(&cfg, &out, Some(8), None, false, 1).is_err());
        let m8 = cmd_gen_data(&cfg, &out, Some(8), None, true, 1).unwrap();
        assert_eq!(m8.frames.len(), 8);

        std::fs::remove_file(other.join(MANIFEST)).unwrap();
        assert!(matches!(cmd_gen_data(&cfg, &other, None, None, false, 1), Err(Error::Dataset(_))));

        let ex = load_example(&out, &m8, m8.ids(Split::Eval)[0], true).unwrap();
        assert_eq!(ex.s.len(), 64 * 64);
        assert!(ex.y.iter().zip(&ex.mask).all(|(y, m)| *m == 1.0 || *y == 0.0));
    }

    #[test]
    fn train_eval_report_pipeline() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let runs = dir.path().join("runs");
        let eval = dir.path().join("eval");
        let mut cfg2 = cfg.clone();
        cfg2.dataset.frames = 6;
        cfg2.dataset.train_fraction = 0.5;
        let m = cmd_gen_data(&cfg2, &data, None, None, false, 1).unwrap();
        let records = cmd_train(&cfg2, &data, &runs).unwrap();
        assert_eq!(records.len(), 4);
        for (v, s) in ExperimentPlan::new(&cfg2, "x").unwrap().cells() {
            assert!(cell_dir(&runs, v, s).join("generator.bin").exists());
        }
        let nsa = records.iter().find(|r| r.variant == Variant::Nsa2h).unwrap();
        assert_eq!(nsa.inputs.last().unwrap(), "noise");
        let log = std::fs::read_to_string(cell_dir(&runs, Variant::Nsa2h, 1).join("train_log.jsonl")).unwrap();
        assert!(log.contains("\"noise\""));

        let summary = cmd_eval(&cfg2, &data, &runs, &eval).unwrap();
        assert_eq!(summary.table.iter().map(|r| r.variant).collect::<Vec<_>>(), vec![Variant::Sa2h, Variant::Nsa2h]);
        assert_eq!(summary.reports.len(), 4);
        assert!(summary.reports.iter().all(|r| r.per_image.len() == m.ids(Split::Eval).len() && r.fid.is_some()));
        let again = cmd_eval(&cfg2, &data, &runs, &dir.path().join("eval2")).unwrap();
        assert_eq!(summary, again);
        assert_eq!(std::fs::read(eval.join("summary.json")).unwrap(), std::fs::read(dir.path().join("eval2/summary.json")).unwrap());

        let report = cmd_report(&eval, Variant::Sa2h, &dir.path().join("report")).unwrap();
        assert_eq!(report.series.len(), 1);
        assert_eq!(report.series[0].psnr.len(), 2 * m.ids(Split::Eval).len());
        let svg = std::fs::read_to_string(dir.path().join("report/boxplots.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("nsa2h"));

        let single = summarize_reports(&summary.reports[..2], Variant::Sa2h).unwrap();
        assert!(single.series.is_empty() && single.notice.is_some());
        let same = summarize_reports(&[summary.reports[0].clone(), summary.reports[0].clone()], Variant::Sa2h).unwrap();
        assert!(same.series.is_empty());

        let imgs = cmd_infer(&cell_dir(&runs, Variant::Sa2h, 1), &data, &dir.path().join("infer"), &[], None).unwrap();
        assert_eq!(imgs.len(), m.ids(Split::Eval).len());
    }

    #[test]
    fn shadow_error_and_downsample() {
        let y = vec![0.2, 0.2, 0.8, 0.8];
        let p = vec![0.4, 0.0, 0.8, 0.8];
        let shadow = vec![true, true, false, false];
        let mask = vec![true; 4];
        assert_eq!(shadow_brightness_error(&y, &p, &shadow, &mask, 1), Some(0.0));
        let p2 = vec![0.3, 0.3, 0.8, 0.8];
        assert!((shadow_brightness_error(&y, &p2, &shadow, &mask, 1).unwrap() - 25.5).abs() < 1e-9);
        assert_eq!(shadow_brightness_error(&y, &p2, &shadow, &mask, 3), None);
        assert_eq!(block_downsample(&[1.0, 3.0, 5.0, 7.0], 2, 2, 2), vec![4.0]);
    }
}
