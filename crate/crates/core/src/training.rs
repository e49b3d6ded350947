//! Masked adversarial + L1 objective, crop sampling and the training loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use echosynth_autograd::{no_grad, Adam, Float, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustics::{CartesianImage, ValueRange};
use crate::error::{Error, IoContext, Result};
use crate::model::{
    make_noise_bank, save_checkpoint, Discriminator, DiscriminatorConfig, ExtraInput, Generator, GeneratorConfig, Variant,
};
use crate::oracle::Frame;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub lambda_f: f64,
    pub crop: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            lambda_f: 100.0,
            crop: 512,
            epochs: 20,
            seed: 0,
            variant: Variant::Sa2h,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        if !(self.lambda_f >= 0.0) {
            return Err(Error::Config(format!("lambda_f must be >= 0, got {}", self.lambda_f)));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch size and crop must be positive".into()));
        }
        if self.crop % gen.size_factor() != 0 {
            return Err(Error::Divisibility { h: self.crop, w: self.crop, factor: gen.size_factor() });
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam needs lr > 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training tuple as network-ready planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Labels mapped to `[-1, 1]`.
    pub s: Vec<f64>,
    /// Attenuation mapped to `[-1, 1]`.
    pub a: Vec<f64>,
    /// Low-quality render mapped to `[-1, 1]`.
    pub low: Option<Vec<f64>>,
    /// Target in `[0, 1]`, zero outside the mask.
    pub y: Vec<f64>,
    pub mask: Vec<f64>,
    pub shadow: Vec<bool>,
}

/// Label `t` of `n_tissues` as `2 t / (n - 1) - 1`.
pub fn encode_label(t: u8, n_tissues: usize) -> f64 {
    2.0 * f64::from(t) / (n_tissues.max(2) - 1) as f64 - 1.0
}

impl Example {
    pub fn from_frame(id: impl Into<String>, frame: &Frame, n_tissues: usize) -> Self {
        let signed = |img: &CartesianImage| img.pixels.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>();
        let y = frame.y.pixels.iter().zip(&frame.mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Self {
            id: id.into(),
            height: frame.height(),
            width: frame.width(),
            s: frame.s.labels().iter().map(|&t| encode_label(t, n_tissues)).collect(),
            a: signed(&frame.a),
            low: frame.low.as_ref().map(signed),
            y,
            mask: frame.mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
            shadow: frame.shadow.clone(),
        }
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m > 0.5).collect()
    }
}

/// A `crop x crop` window cut from every plane of an example at one offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub low: Option<Vec<f64>>,
    pub y: Vec<f64>,
    pub mask: Vec<f64>,
}

pub fn crop_at(ex: &Example, crop: usize, top: usize, left: usize) -> Result<Crop> {
    if crop > ex.height || crop > ex.width || top + crop > ex.height || left + crop > ex.width {
        return Err(Error::CropTooLarge { crop, h: ex.height, w: ex.width });
    }
    let cut = |plane: &[f64]| -> Vec<f64> { (top..top + crop).flat_map(|r| plane[r * ex.width + left..r * ex.width + left + crop].iter().copied()).collect() };
    Ok(Crop { top, left, size: crop, s: cut(&ex.s), a: cut(&ex.a), low: ex.low.as_deref().map(cut), y: cut(&ex.y), mask: cut(&ex.mask) })
}

/// Uniformly placed crop shared by all planes.
pub fn sample_crop<R: Rng + ?Sized>(ex: &Example, crop: usize, rng: &mut R) -> Result<Crop> {
    if crop > ex.height || crop > ex.width {
        return Err(Error::CropTooLarge { crop, h: ex.height, w: ex.width });
    }
    let top = rng.random_range(0..=ex.height - crop);
    let left = rng.random_range(0..=ex.width - crop);
    crop_at(ex, crop, top, left)
}

fn check_binary<T: Float>(m: &Tensor<T>) -> Result<()> {
    match m.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        Some(v) => Err(Error::NonBinaryMask(v.as_f64())),
        None => Ok(()),
    }
}

/// `mean |y - m * y_hat|` over all pixels.
pub fn masked_l1<T: Float>(y_hat: &Var<T>, y: &Tensor<T>, m: &Tensor<T>) -> Result<Var<T>> {
    if y_hat.shape() != y.shape() || y.shape() != m.shape() {
        return Err(Error::Shape(format!("masked_l1 shapes {:?}, {:?}, {:?}", y_hat.shape(), y.shape(), m.shape())));
    }
    check_binary(m)?;
    Ok(y_hat.masked_l1(y, m))
}

/// `(L_D, L_G_adv)`: discriminator cross-entropy on real/fake logits and the
/// non-saturating generator term `-mean log sigmoid(d_fake)`.
pub fn gan_losses<T: Float>(d_real: &Var<T>, d_fake: &Var<T>) -> (Var<T>, Var<T>) {
    (discriminator_loss(d_real, d_fake), d_fake.bce_with_logits(true))
}

pub fn discriminator_loss<T: Float>(d_real: &Var<T>, d_fake: &Var<T>) -> Var<T> {
    d_real.bce_with_logits(true).add(&d_fake.bce_with_logits(false))
}

pub fn total_generator_loss<T: Float>(adv: &Var<T>, l1: &Var<T>, lambda_f: f64) -> Var<T> {
    adv.add(&l1.scale(lambda_f))
}

/// Source of each generator input channel, in order.
pub fn input_sources(cfg: &GeneratorConfig) -> Vec<&'static str> {
    let mut v = vec!["s"];
    if cfg.use_att {
        v.push("a");
    }
    match cfg.extra_input {
        ExtraInput::None => {}
        ExtraInput::Noise => v.push("noise"),
        ExtraInput::LowQuality => v.push("low-quality"),
    }
    v
}

/// Stacks generator inputs `(N, C, H, W)` for a batch of crops. `noise_seed`
/// drives the per-sample input noise image when the config asks for one.
pub fn assemble_input<T: Float>(cfg: &GeneratorConfig, crops: &[&Crop], noise_seed: u64) -> Result<Tensor<T>> {
    let parts = crops
        .iter()
        .enumerate()
        .map(|(i, c)| assemble_planes(cfg, c, c.size, c.size, seed::derive(noise_seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&parts))
}

fn plane_batch<T: Float>(crops: &[&Crop], pick: impl Fn(&Crop) -> &[f64]) -> Tensor<T> {
    let size = crops[0].size;
    let data = crops.iter().flat_map(|c| pick(c).iter().map(|&v| T::of(v))).collect();
    Tensor::from_vec(&[crops.len(), 1, size, size], data).expect("crop batch shape")
}

/// First `n` channels of an NCHW tensor.
pub fn leading_channels<T: Float>(x: &Tensor<T>, n: usize) -> Tensor<T> {
    let (b, _, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[b, n, h, w]);
    for i in 0..b {
        for c in 0..n {
            out.plane_mut(i, c).copy_from_slice(x.plane(i, c));
        }
    }
    out
}

/// Generator output mapped from `[-1, 1]` to `[0, 1]`.
pub fn to_unit<T: Float>(g: &Var<T>) -> Var<T> {
    let half = Var::constant(Tensor::full(&g.shape(), T::of(0.5)));
    g.scale(0.5).add(&half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub g_total: f64,
    pub variant: Variant,
    pub inputs: Vec<String>,
}

pub struct TrainOutcome {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub log: Vec<EpochLog>,
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    d: f64,
    adv: f64,
    l1: f64,
    total: f64,
}

fn zero_grads(params: &[Var<f32>]) {
    for p in params {
        p.zero_grad();
    }
}

/// Trains one generator/discriminator pair. When `out_dir` is given,
/// per-epoch records go to `train_log.jsonl` and checkpoints next to it.
pub fn train(tc: &TrainConfig, gen_cfg: &GeneratorConfig, disc_cfg: &DiscriminatorConfig, dataset: &[Example], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate(gen_cfg)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training frames".into()));
    }
    if disc_cfg.condition_channels != gen_cfg.cond_channels() {
        return Err(Error::Config(format!(
            "discriminator conditions on {} channels, generator provides {}",
            disc_cfg.condition_channels,
            gen_cfg.cond_channels()
        )));
    }
    let generator = Generator::<f32>::new(gen_cfg, seed::derive_named(tc.seed, "generator-init"))?;
    let discriminator = Discriminator::<f32>::new(disc_cfg, seed::derive_named(tc.seed, "discriminator-init"))?;
    let g_params = generator.parameters();
    let d_params = discriminator.parameters();
    let mut adam_g = Adam::<f32>::new(tc.lr, tc.beta1, tc.beta2);
    let mut adam_d = Adam::<f32>::new(tc.lr, tc.beta1, tc.beta2);
    let inputs: Vec<String> = input_sources(gen_cfg).into_iter().map(String::from).collect();

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).at(dir)?;
            let path = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&path).at(&path)?, path))
        }
        None => None,
    };

    let mut rng = seed::rng(seed::derive_named(tc.seed, "batches"));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut n_steps = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let crops = batch.iter().map(|&i| sample_crop(&dataset[i], tc.crop, &mut rng)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Crop> = crops.iter().collect();
            let step_seed = seed::derive(tc.seed, step);
            let losses = train_step(&generator, &discriminator, &g_params, &d_params, &mut adam_g, &mut adam_d, gen_cfg, tc, &refs, step_seed)?;
            for (name, v) in [("discriminator", losses.d), ("adversarial", losses.adv), ("masked L1", losses.l1)] {
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("{name} loss is {v} at epoch {epoch}, step {step} (batch {batch:?})")));
                }
            }
            sums.d += losses.d;
            sums.adv += losses.adv;
            sums.l1 += losses.l1;
            sums.total += losses.total;
            n_steps += 1;
            step += 1;
        }
        let n = n_steps as f64;
        let record = EpochLog {
            epoch,
            steps: step,
            d_loss: sums.d / n,
            g_adv: sums.adv / n,
            l1: sums.l1 / n,
            g_total: sums.total / n,
            variant: tc.variant,
            inputs: inputs.clone(),
        };
        log::info!("{} epoch {epoch}: D {:.4} G_adv {:.4} L1 {:.4}", tc.variant, record.d_loss, record.g_adv, record.l1);
        if let Some((file, path)) = log_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record)?).at(path.as_path())?;
        }
        log.push(record);
        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 && epoch + 1 < tc.epochs {
                write_checkpoints(&dir.join(format!("epoch_{:03}", epoch + 1)), &generator, &discriminator, tc, step)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_checkpoints(dir, &generator, &discriminator, tc, step)?;
    }
    Ok(TrainOutcome { generator, discriminator, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    generator: &Generator<f32>,
    discriminator: &Discriminator<f32>,
    g_params: &[Var<f32>],
    d_params: &[Var<f32>],
    adam_g: &mut Adam<f32>,
    adam_d: &mut Adam<f32>,
    gen_cfg: &GeneratorConfig,
    tc: &TrainConfig,
    crops: &[&Crop],
    step_seed: u64,
) -> Result<StepLosses> {
    let x = assemble_input::<f32>(gen_cfg, crops, step_seed)?;
    let cond = leading_channels(&x, gen_cfg.cond_channels());
    let y = plane_batch::<f32>(crops, |c| &c.y);
    let m = plane_batch::<f32>(crops, |c| &c.mask);
    let (b, _, h, w) = x.dims4();
    let noise = make_noise_bank(seed::derive_named(step_seed, "bank"), &generator.noise_resolutions(b, h, w));

    let fake = to_unit(&generator.forward(&x, &noise)?).mul_const(&m);

    // discriminator step on the detached fake
    zero_grads(d_params);
    let d_real = discriminator.forward(&Var::constant(y.clone()), &cond)?;
    let d_fake = discriminator.forward(&fake.detach(), &cond)?;
    let d_loss = discriminator_loss(&d_real, &d_fake);
    d_loss.backward();
    adam_d.step(d_params);

    // generator step through the updated discriminator
    zero_grads(g_params);
    let adv = discriminator.forward(&fake, &cond)?.bce_with_logits(true);
    let l1 = masked_l1(&fake, &y, &m)?;
    let total = total_generator_loss(&adv, &l1, tc.lambda_f);
    total.backward();
    adam_g.step(g_params);
    zero_grads(d_params);
    zero_grads(g_params);

    Ok(StepLosses { d: d_loss.item().as_f64(), adv: adv.item().as_f64(), l1: l1.item().as_f64(), total: total.item().as_f64() })
}

/// Sidecar config for a trained generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpointConfig {
    pub variant: Variant,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

pub fn write_checkpoints(dir: &Path, g: &Generator<f32>, d: &Discriminator<f32>, tc: &TrainConfig, step: u64) -> Result<PathBuf> {
    let gcfg = GeneratorCheckpointConfig { variant: tc.variant, generator: g.config().clone(), train: tc.clone() };
    save_checkpoint(dir, "generator", "generator", serde_json::to_value(&gcfg)?, g.named_parameters(), step, tc.seed)?;
    save_checkpoint(dir, "discriminator", "discriminator", serde_json::to_value(d.config())?, d.named_parameters(), step, tc.seed)?;
    Ok(dir.to_path_buf())
}

/// Full field-of-view inference: pads to the generator's size factor, runs
/// the network, crops back, maps to `[0, 1]` and applies the mask.
pub fn infer_full_fov<T: Float>(generator: &Generator<T>, ex: &Example, seed: u64) -> Result<CartesianImage> {
    let _guard = no_grad();
    let cfg = generator.config();
    let f = cfg.size_factor();
    let (h, w) = (ex.height.div_ceil(f) * f, ex.width.div_ceil(f) * f);
    let full = Crop { top: 0, left: 0, size: 0, s: ex.s.clone(), a: ex.a.clone(), low: ex.low.clone(), y: ex.y.clone(), mask: ex.mask.clone() };
    // assemble at native size (non-square), then pad
    let x = assemble_planes::<T>(cfg, &full, ex.height, ex.width, seed)?.pad_bottom_right(h, w);
    let noise = make_noise_bank(seed::derive_named(seed, "bank"), &generator.noise_resolutions(1, h, w));
    let out = generator.forward(&x, &noise)?.value().crop(0, 0, ex.height, ex.width);
    let mask = ex.mask_bool();
    let pixels = out.data().iter().zip(&mask).map(|(&v, &m)| if m { 0.5 * (v.as_f64() + 1.0) } else { 0.0 }).collect();
    Ok(CartesianImage { height: ex.height, width: ex.width, pixels, mask, range: ValueRange::Unit })
}

fn assemble_planes<T: Float>(cfg: &GeneratorConfig, c: &Crop, h: usize, w: usize, noise_seed: u64) -> Result<Tensor<T>> {
    let mut rng = seed::rng(seed::derive_named(noise_seed, "input-noise"));
    let mut data: Vec<T> = c.s.iter().map(|&v| T::of(v)).collect();
    if cfg.use_att {
        data.extend(c.a.iter().map(|&v| T::of(v)));
    }
    match cfg.extra_input {
        ExtraInput::None => {}
        ExtraInput::Noise => data.extend((0..h * w).map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))),
        ExtraInput::LowQuality => {
            let low = c.low.as_ref().ok_or_else(|| Error::Dataset("variant needs the low-quality image but the frame has none".into()))?;
            data.extend(low.iter().map(|&v| T::of(v)));
        }
    }
    Tensor::from_vec(&[1, cfg.in_channels(), h, w], data).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_example(h: usize, w: usize, seed: u64) -> Example {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..h * w).map(|i| f64::from(u8::from((i % w) > 2 && (i / w) > 1))).collect();
        let y = mask.iter().map(|&m| m * rng.random::<f64>()).collect();
        Example {
            id: format!("toy{seed}"),
            height: h,
            width: w,
            s: (0..h * w).map(|i| if (i / w) < h / 2 { -1.0 } else { 0.5 }).collect(),
            a: (0..h * w).map(|i| 1.0 - 2.0 * (i / w) as f64 / h as f64).collect(),
            low: Some((0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()),
            y,
            mask,
            shadow: vec![false; h * w],
        }
    }

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn masked_l1_cases() {
        let y = tensor(&[1, 1, 2, 2], vec![0.5, 0.0, 0.25, 0.0]);
        let m = tensor(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let y_hat = Var::constant(tensor(&[1, 1, 2, 2], vec![0.5, 9.0, 0.25, -3.0]));
        assert_eq!(masked_l1(&y_hat, &y, &m).unwrap().item(), 0.0);

        let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let c = Var::constant(Tensor::full(&[1, 1, 3, 3], -0.7));
        assert!((masked_l1(&c, &Tensor::zeros(&[1, 1, 3, 3]), &ones).unwrap().item() - 0.7).abs() < 1e-15);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let yv: Vec<f64> = (0..64).map(|_| rng.random()).collect();
        let mv: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.random_bool(0.6)))).collect();
        let pv: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut direct = 0.0;
        for i in 0..64 {
            direct += (yv[i] - mv[i] * pv[i]).abs();
        }
        let got = masked_l1(&Var::constant(tensor(&[1, 1, 8, 8], pv)), &tensor(&[1, 1, 8, 8], yv), &tensor(&[1, 1, 8, 8], mv)).unwrap().item();
        assert!((got - direct / 64.0).abs() < 1e-12);

        let soft = tensor(&[1, 1, 2, 2], vec![1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(masked_l1(&y_hat, &y, &soft), Err(Error::NonBinaryMask(v)) if v == 0.5));
    }

    #[test]
    fn gan_loss_cases() {
        let zeros = Var::constant(Tensor::<f64>::zeros(&[2, 1, 3, 3]));
        let (ld, lg) = gan_losses(&zeros, &zeros);
        assert!((ld.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((lg.item() - 2f64.ln()).abs() < 1e-12);
        let big = Var::constant(Tensor::<f64>::full(&[1, 1, 2, 2], 60.0));
        assert!(gan_losses(&zeros, &big).1.item() < 1e-20);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let r: Vec<f64> = (0..30).map(|_| rng.random_range(-6.0..6.0)).collect();
        let f: Vec<f64> = (0..30).map(|_| rng.random_range(-6.0..6.0)).collect();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want_d = -r.iter().map(|&x| sig(x).ln()).sum::<f64>() / 30.0 - f.iter().map(|&x| (1.0 - sig(x)).ln()).sum::<f64>() / 30.0;
        let want_g = -f.iter().map(|&x| sig(x).ln()).sum::<f64>() / 30.0;
        let (ld, lg) = gan_losses(&Var::constant(tensor(&[1, 1, 5, 6], r)), &Var::constant(tensor(&[1, 1, 5, 6], f)));
        assert!((ld.item() - want_d).abs() < 1e-9 && (lg.item() - want_g).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        let adv = Var::constant(Tensor::<f64>::scalar(0.7));
        let l1 = Var::constant(Tensor::scalar(0.01));
        assert!((total_generator_loss(&adv, &l1, 100.0).item() - 1.7).abs() < 1e-12);
        assert_eq!(total_generator_loss(&adv, &l1, 0.0).item(), 0.7);
    }

    #[test]
    fn crops_share_offsets() {
        let ex = toy_example(12, 10, 1);
        assert_eq!(crop_at(&ex, 10, 0, 0).unwrap().size, 10);
        let small = toy_example(8, 8, 1);
        let full = sample_crop(&small, 8, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((full.s.clone(), full.y.clone(), full.mask.clone()), (small.s.clone(), small.y.clone(), small.mask.clone()));
        let c = sample_crop(&ex, 4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c2 = sample_crop(&ex, 4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(c, c2);
        for r in 0..4 {
            for q in 0..4 {
                let src = (c.top + r) * ex.width + c.left + q;
                assert_eq!(c.a[r * 4 + q], ex.a[src]);
                assert_eq!(c.mask[r * 4 + q], ex.mask[src]);
                assert_eq!(c.low.as_ref().unwrap()[r * 4 + q], ex.low.as_ref().unwrap()[src]);
            }
        }
        assert!(matches!(sample_crop(&ex, 11, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 10^4 draws over 5 x 3 offsets, chi-square goodness of fit
        let ex = toy_example(8, 6, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        let mut counts = [[0usize; 3]; 5];
        let n = 10_000;
        for _ in 0..n {
            let c = sample_crop(&ex, 4, &mut rng).unwrap();
            counts[c.top][c.left] += 1;
        }
        let expected = n as f64 / 15.0;
        let stat: f64 = counts.iter().flatten().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value for 14 dof at p = 0.01
        assert!(stat < 29.14, "{stat}");
    }

    fn toy_generator_config() -> GeneratorConfig {
        GeneratorConfig {
            n_down: 2,
            channel_schedule: vec![2, 4],
            bottleneck_convs: 1,
            ..GeneratorConfig::sa2h(2)
        }
    }

    /// Central finite differences of the total generator loss against the
    /// analytic gradient for every generator parameter.
    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        let cfg = toy_generator_config();
        let g = Generator::<f64>::new(&cfg, 3).unwrap();
        assert!(g.param_count() < 1000, "{}", g.param_count());
        for w in g.noise_weights() {
            w.set_value(Tensor::full(&w.shape(), 0.2));
        }
        let d = Discriminator::<f64>::new(&DiscriminatorConfig { n_layers: 1, base_channels: 2, condition_channels: 2 }, 4).unwrap();
        let ex = toy_example(8, 8, 5);
        let crop = crop_at(&ex, 8, 0, 0).unwrap();
        let x = assemble_input::<f64>(&cfg, &[&crop], 1).unwrap();
        let cond = leading_channels(&x, 2);
        let y = plane_batch::<f64>(&[&crop], |c| &c.y);
        let m = plane_batch::<f64>(&[&crop], |c| &c.mask);
        let noise = make_noise_bank(2, &g.noise_resolutions(1, 8, 8));
        let loss = || {
            let fake = to_unit(&g.forward(&x, &noise).unwrap()).mul_const(&m);
            let adv = d.forward(&fake, &cond).unwrap().bce_with_logits(true);
            total_generator_loss(&adv, &masked_l1(&fake, &y, &m).unwrap(), 100.0)
        };
        let l = loss();
        l.backward();
        let (mut num, mut den_a, mut den_f) = (0.0, 0.0, 0.0);
        let h = 1e-6;
        for p in g.parameters() {
            let grad = p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape()));
            let n = p.value().numel();
            for i in 0..n {
                let orig = p.value().data()[i];
                p.update_value(|t| t.data_mut()[i] = orig + h);
                let up = loss().item();
                p.update_value(|t| t.data_mut()[i] = orig - h);
                let down = loss().item();
                p.update_value(|t| t.data_mut()[i] = orig);
                let fd = (up - down) / (2.0 * h);
                num += (fd - grad.data()[i]).powi(2);
                den_a += grad.data()[i].powi(2);
                den_f += fd * fd;
            }
        }
        let rel = num.sqrt() / den_a.sqrt().max(den_f.sqrt());
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn loss_ignores_prediction_outside_mask() {
        let cfg = toy_generator_config();
        let d = Discriminator::<f64>::new(&DiscriminatorConfig { n_layers: 1, base_channels: 2, condition_channels: 2 }, 4).unwrap();
        let ex = toy_example(8, 8, 6);
        let crop = crop_at(&ex, 8, 0, 0).unwrap();
        let x = assemble_input::<f64>(&cfg, &[&crop], 1).unwrap();
        let cond = leading_channels(&x, 2);
        let y = plane_batch::<f64>(&[&crop], |c| &c.y);
        let m = plane_batch::<f64>(&[&crop], |c| &c.mask);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pred = Tensor::<f64>::randn(&[1, 1, 8, 8], 0.5, 0.2, &mut rng);
        let mut moved = pred.clone();
        for (v, &mv) in moved.data_mut().iter_mut().zip(m.data()) {
            if mv == 0.0 {
                *v += rng.random_range(-3.0..3.0);
            }
        }
        let loss = |p: &Tensor<f64>| {
            let fake = Var::constant(p.clone()).mul_const(&m);
            let adv = d.forward(&fake, &cond).unwrap().bce_with_logits(true);
            total_generator_loss(&adv, &masked_l1(&fake, &y, &m).unwrap(), 100.0).item()
        };
        assert_eq!(loss(&pred), loss(&moved));
    }

    #[test]
    fn adam_matches_closed_form_on_quadratic() {
        // f(x) = (x - 3)^2, three steps from x = 0 against the textbook update
        let x = Var::parameter(Tensor::<f64>::scalar(0.0));
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        let (mut xv, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=3 {
            x.zero_grad();
            let diff = x.sub(&Var::constant(Tensor::scalar(3.0)));
            diff.mul(&diff).sum().backward();
            opt.step(&[x.clone()]);
            let g = 2.0 * (xv - 3.0);
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let (mh, vh) = (m / (1.0 - 0.5f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
            xv -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x.item() - xv).abs() < 1e-12, "step {t}: {} vs {xv}", x.item());
        }
    }

    fn smoke_configs(variant: Variant) -> (TrainConfig, GeneratorConfig, DiscriminatorConfig) {
        let gen = variant.generator_config(4, 4);
        let disc = DiscriminatorConfig { n_layers: 2, base_channels: 4, condition_channels: gen.cond_channels() };
        let tc = TrainConfig { crop: 32, batch_size: 2, epochs: 1, seed: 11, variant, ..TrainConfig::default() };
        (tc, gen, disc)
    }

    #[test]
    fn smoke_run_writes_log_and_checkpoint() {
        let data: Vec<Example> = (0..4).map(|i| toy_example(40, 36, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        for variant in [Variant::Nsa2h, Variant::Lsa2h, Variant::Sa2hNoise] {
            let (tc, gen, disc) = smoke_configs(variant);
            let out = dir.path().join(variant.name());
            let res = train(&tc, &gen, &disc, &data, Some(&out)).unwrap();
            assert_eq!(res.log.len(), 1);
            assert!(res.log[0].d_loss.is_finite() && res.log[0].l1.is_finite());
            assert!(out.join("generator.bin").exists() && out.join("discriminator.json").exists());
            let text = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
            let rec: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
            let expect = if variant == Variant::Lsa2h { "low-quality" } else { "noise" };
            assert_eq!(rec.inputs.last().unwrap(), expect);
        }
        let (tc, gen, disc) = smoke_configs(Variant::Sa2h);
        assert!(matches!(train(&tc, &gen, &disc, &[], None), Err(Error::EmptyDataset(_))));
        let bad = TrainConfig { crop: 24, ..tc };
        assert!(matches!(train(&bad, &gen, &disc, &data, None), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let data: Vec<Example> = (0..4).map(|i| toy_example(40, 36, i)).collect();
        let (tc, gen, disc) = smoke_configs(Variant::Sa2h);
        let a = train(&tc, &gen, &disc, &data, None).unwrap().log;
        let b = train(&tc, &gen, &disc, &data, None).unwrap().log;
        assert_eq!(a, b);
    }

    #[test]
    fn training_lowers_masked_l1() {
        let data: Vec<Example> = (0..4).map(|i| toy_example(32, 32, i)).collect();
        let (mut tc, gen, disc) = smoke_configs(Variant::Sa2h);
        tc.epochs = 20;
        tc.lr = 1e-3;
        let log = train(&tc, &gen, &disc, &data, None).unwrap().log;
        assert!(log.last().unwrap().l1 < log[0].l1, "{} -> {}", log[0].l1, log.last().unwrap().l1);
    }

    #[test]
    fn full_fov_inference() {
        let ex = toy_example(40, 36, 3);
        let cfg = Variant::Sa2h.generator_config(4, 4);
        let g = Generator::<f64>::new(&cfg, 1).unwrap();
        let out = infer_full_fov(&g, &ex, 1).unwrap();
        assert_eq!((out.height, out.width), (40, 36));
        for (p, m) in out.pixels.iter().zip(ex.mask_bool()) {
            if m {
                assert!((0.0..=1.0).contains(p));
            } else {
                assert_eq!(*p, 0.0);
            }
        }
        // zero-initialised noise weights: seed independent
        assert_eq!(out, infer_full_fov(&g, &ex, 2).unwrap());
    }
}
