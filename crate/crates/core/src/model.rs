//! Conditional generator (SA2H and its ablations, plus the legacy U-Net
//! baselines) and the patch discriminator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use echosynth_autograd::{Float, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::seed;

const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sa2h")]
    Sa2h,
    #[serde(rename = "sa2h-att")]
    Sa2hAtt,
    #[serde(rename = "sa2h-concat")]
    Sa2hConcat,
    #[serde(rename = "sa2h-conv")]
    Sa2hConv,
    #[serde(rename = "sa2h-noise")]
    Sa2hNoise,
    #[serde(rename = "nsa2h")]
    Nsa2h,
    #[serde(rename = "lsa2h")]
    Lsa2h,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Sa2h, Variant::Sa2hAtt, Variant::Sa2hConcat, Variant::Sa2hConv, Variant::Sa2hNoise, Variant::Nsa2h, Variant::Lsa2h];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sa2h => "sa2h",
            Variant::Sa2hAtt => "sa2h-att",
            Variant::Sa2hConcat => "sa2h-concat",
            Variant::Sa2hConv => "sa2h-conv",
            Variant::Sa2hNoise => "sa2h-noise",
            Variant::Nsa2h => "nsa2h",
            Variant::Lsa2h => "lsa2h",
        }
    }

    /// Generator for this variant. `base` is the first encoder width (64 at
    /// full scale); `legacy_n_down` sets the depth of the U-Net baselines.
    pub fn generator_config(self, base: usize, legacy_n_down: usize) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::sa2h(base);
        match self {
            Variant::Sa2h => {}
            Variant::Sa2hAtt => cfg.use_att = false,
            Variant::Sa2hConcat => cfg.use_concat = false,
            Variant::Sa2hConv => cfg.use_texture_conv = false,
            Variant::Sa2hNoise => {
                cfg.use_noise = false;
                cfg.extra_input = ExtraInput::Noise;
            }
            Variant::Nsa2h | Variant::Lsa2h => {
                cfg = GeneratorConfig::legacy(base, legacy_n_down);
                cfg.extra_input = if self == Variant::Lsa2h { ExtraInput::LowQuality } else { ExtraInput::Noise };
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase()).ok_or_else(|| Error::UnknownVariant(s.into()))
    }
}

/// Extra generator input channel after `s` (and `a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtraInput {
    None,
    /// Unit Gaussian noise image drawn per sample.
    Noise,
    /// Low-quality rendered image `L`.
    LowQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Encoder-decoder with the input, texture and noise switches.
    Sa2h,
    /// Deeper pix2pix-style U-Net used by the LSA2H / NSA2H baselines.
    LegacyUnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Instance,
    /// No normalization; keeps every pixel's dependency local.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub architecture: Architecture,
    pub n_down: usize,
    /// Output width of each encoder block.
    pub channel_schedule: Vec<usize>,
    /// Stride-1 3x3 convolutions at the lowest resolution.
    pub bottleneck_convs: usize,
    pub use_att: bool,
    pub use_concat: bool,
    pub use_texture_conv: bool,
    pub use_noise: bool,
    pub extra_input: ExtraInput,
    pub normalization: Normalization,
}

impl GeneratorConfig {
    pub fn sa2h(base: usize) -> Self {
        Self {
            architecture: Architecture::Sa2h,
            n_down: 4,
            channel_schedule: vec![base, 2 * base, 4 * base, 8 * base],
            bottleneck_convs: 3,
            use_att: true,
            use_concat: true,
            use_texture_conv: true,
            use_noise: true,
            extra_input: ExtraInput::None,
            normalization: Normalization::Instance,
        }
    }

    pub fn legacy(base: usize, n_down: usize) -> Self {
        let schedule = (0..n_down).map(|l| base << l.min(3)).collect();
        Self {
            architecture: Architecture::LegacyUnet,
            n_down,
            channel_schedule: schedule,
            bottleneck_convs: 0,
            use_att: true,
            use_concat: false,
            use_texture_conv: false,
            use_noise: false,
            extra_input: ExtraInput::None,
            normalization: Normalization::Instance,
        }
    }

    /// Conditioning maps `s` and optionally `a`.
    pub fn cond_channels(&self) -> usize {
        1 + self.use_att as usize
    }

    pub fn in_channels(&self) -> usize {
        self.cond_channels() + (self.extra_input != ExtraInput::None) as usize
    }

    /// Input sizes must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << self.n_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 {
            return Err(Error::Config("n_down must be >= 1".into()));
        }
        if self.channel_schedule.len() != self.n_down {
            return Err(Error::Config(format!("channel schedule has {} entries but n_down is {}", self.channel_schedule.len(), self.n_down)));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.architecture == Architecture::LegacyUnet && (self.use_concat || self.use_texture_conv || self.use_noise || self.bottleneck_convs > 0) {
            return Err(Error::Config("the legacy U-Net has no concat, texture-conv, noise-injection or bottleneck options".into()));
        }
        Ok(())
    }

    /// `(kernel, stride, pad, out_pad)` of the decoder's upsampling layers.
    pub fn upsample_layer(&self) -> (usize, usize, usize, usize) {
        if self.architecture == Architecture::Sa2h && !self.use_texture_conv {
            (5, 2, 2, 1)
        } else {
            (4, 2, 1, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Stride-2 layers before the two stride-1 layers.
    pub n_layers: usize,
    pub base_channels: usize,
    /// Channels of the conditioning input (`s`, `a`, ...).
    pub condition_channels: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_channels == 0 || self.condition_channels == 0 {
            return Err(Error::Config("discriminator layers, width and condition channels must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the input patch seen by one logit.
    pub fn receptive_field(&self) -> usize {
        // stride-2 4x4 layers, then two stride-1 4x4 layers at the last jump
        let jumps: Vec<usize> = (0..self.n_layers).map(|l| 1 << l).chain([1 << self.n_layers, 1 << self.n_layers]).collect();
        1 + jumps.iter().map(|j| 3 * j).sum::<usize>()
    }

    pub fn output_size(&self, input: usize) -> usize {
        let mut s = input;
        for _ in 0..self.n_layers {
            s = echosynth_autograd::conv_out_size(s, 4, 2, 1);
        }
        echosynth_autograd::conv_out_size(echosynth_autograd::conv_out_size(s, 4, 1, 1), 4, 1, 1)
    }
}

/// Convolution or transposed convolution with bias.
#[derive(Clone)]
struct Conv<T: Float> {
    w: Var<T>,
    b: Var<T>,
    stride: usize,
    pad: usize,
    transposed: Option<usize>,
}

impl<T: Float> Conv<T> {
    fn forward(&self, x: &Var<T>) -> Var<T> {
        match self.transposed {
            None => x.conv2d(&self.w, Some(&self.b), self.stride, self.pad),
            Some(op) => x.conv_transpose2d(&self.w, Some(&self.b), self.stride, self.pad, op),
        }
    }
}

/// Named parameter list shared by generator and discriminator.
struct ParamBuilder<T: Float> {
    params: Vec<(String, Var<T>)>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Float> ParamBuilder<T> {
    fn new(seed: u64) -> Self {
        Self { params: Vec::new(), rng: seed::rng(seed) }
    }

    fn tensor(&mut self, name: String, shape: &[usize], std: f64) -> Var<T> {
        let t = if std == 0.0 { Tensor::zeros(shape) } else { Tensor::randn(shape, 0.0, std, &mut self.rng) };
        let v = Var::parameter(t);
        self.params.push((name, v.clone()));
        v
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv<T> {
        let w = self.tensor(format!("{name}.weight"), &[cout, cin, k, k], INIT_STD);
        let b = self.tensor(format!("{name}.bias"), &[cout], 0.0);
        Conv { w, b, stride, pad, transposed: None }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, (k, stride, pad, op): (usize, usize, usize, usize)) -> Conv<T> {
        let w = self.tensor(format!("{name}.weight"), &[cin, cout, k, k], INIT_STD);
        let b = self.tensor(format!("{name}.bias"), &[cout], 0.0);
        Conv { w, b, stride, pad, transposed: Some(op) }
    }
}

#[derive(Clone)]
struct DecoderBlock<T: Float> {
    up: Conv<T>,
    texture: Option<Conv<T>>,
    noise_weight: Option<Var<T>>,
}

/// One unit-Gaussian single-channel image per decoder resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank<T: Float> {
    pub seed: u64,
    pub images: Vec<Tensor<T>>,
}

/// Draws a bank for the given `(batch, height, width)` resolutions; each
/// resolution has its own RNG stream derived from `seed`.
pub fn make_noise_bank<T: Float>(seed: u64, resolutions: &[(usize, usize, usize)]) -> NoiseBank<T> {
    let images = resolutions
        .iter()
        .enumerate()
        .map(|(l, &(n, h, w))| {
            let mut rng = seed::rng(seed::derive(seed::derive_named(seed, "noise-bank"), l as u64));
            let data = (0..n * h * w).map(|_| T::of(StandardNormal.sample(&mut rng))).collect();
            Tensor::from_vec(&[n, 1, h, w], data).expect("noise shape")
        })
        .collect();
    NoiseBank { seed, images }
}

#[derive(Clone)]
pub struct Generator<T: Float> {
    cfg: GeneratorConfig,
    params: Vec<(String, Var<T>)>,
    encoder: Vec<Conv<T>>,
    bottleneck: Vec<Conv<T>>,
    decoder: Vec<DecoderBlock<T>>,
    output: Conv<T>,
}

impl<T: Float> Generator<T> {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::<T>::new(seed);
        let sched = &cfg.channel_schedule;
        let n = cfg.n_down;
        let cond = if cfg.use_concat { cfg.cond_channels() } else { 0 };
        let legacy = cfg.architecture == Architecture::LegacyUnet;

        let mut encoder = Vec::with_capacity(n);
        let mut cin = cfg.in_channels();
        for (l, &cout) in sched.iter().enumerate() {
            let extra = if l > 0 { cond } else { 0 };
            encoder.push(pb.conv(&format!("enc{l}"), cin + extra, cout, 4, 2, 1));
            cin = cout;
        }
        let bottleneck = (0..cfg.bottleneck_convs).map(|k| pb.conv(&format!("mid{k}"), cin + cond, cin, 3, 1, 1)).collect();

        let up = cfg.upsample_layer();
        let mut decoder = Vec::with_capacity(n);
        for l in 0..n {
            // block l produces resolution 2^(n-1-l); the last block reaches full size
            let last = l + 1 == n;
            let cout = if last { sched[0] } else { sched[n - 2 - l] };
            if legacy && last {
                break;
            }
            let up_conv = pb.conv_t(&format!("dec{l}.up"), cin, cout, up);
            let with_skip = if last { cout } else { 2 * cout };
            let noise_weight = cfg.use_noise.then(|| pb.tensor(format!("dec{l}.noise_weight"), &[with_skip], 0.0));
            let texture = cfg.use_texture_conv.then(|| pb.conv(&format!("dec{l}.texture"), with_skip + cond, cout, 3, 1, 1));
            cin = if texture.is_some() { cout } else { with_skip + cond };
            decoder.push(DecoderBlock { up: up_conv, texture, noise_weight });
        }
        let output = if legacy { pb.conv_t("out", cin, 1, (4, 2, 1, 0)) } else { pb.conv("out", cin, 1, 3, 1, 1) };
        Ok(Self { cfg: cfg.clone(), params: pb.params, encoder, bottleneck, decoder, output })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn named_parameters(&self) -> &[(String, Var<T>)] {
        &self.params
    }

    pub fn parameters(&self) -> Vec<Var<T>> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.value().numel()).sum()
    }

    pub fn noise_weights(&self) -> Vec<Var<T>> {
        self.decoder.iter().filter_map(|b| b.noise_weight.clone()).collect()
    }

    pub fn zero_noise_weights(&self) {
        for w in self.noise_weights() {
            w.update_value(|t| t.data_mut().iter_mut().for_each(|v| *v = T::zero()));
        }
    }

    /// `(batch, h, w)` of every noise image for an input of the given size.
    pub fn noise_resolutions(&self, batch: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        if !self.cfg.use_noise {
            return Vec::new();
        }
        let n = self.cfg.n_down;
        (0..n).map(|l| (batch, h >> (n - 1 - l), w >> (n - 1 - l))).collect()
    }

    pub fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != 4 {
            return Err(Error::Shape(format!("generator input must be NCHW, got {:?}", input.shape())));
        }
        let (_, c, h, w) = input.dims4();
        if c != self.cfg.in_channels() {
            return Err(Error::Shape(format!("generator expects {} input channels, got {c}", self.cfg.in_channels())));
        }
        let f = self.cfg.size_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Divisibility { h, w, factor: f });
        }
        Ok(())
    }

    fn norm(&self, x: Var<T>) -> Var<T> {
        match self.cfg.normalization {
            Normalization::Instance => x.instance_norm(NORM_EPS),
            Normalization::None => x,
        }
    }

    /// Maps `input` (channels `s`, `a`?, extra?) to an image in `[-1, 1]`.
    pub fn forward(&self, input: &Tensor<T>, noise: &NoiseBank<T>) -> Result<Var<T>> {
        self.check_input(input)?;
        let (batch, _, h, w) = input.dims4();
        if self.cfg.use_noise {
            let expected = self.noise_resolutions(batch, h, w);
            let got: Vec<_> = noise.images.iter().map(|t| (t.dims4().0, t.dims4().2, t.dims4().3)).collect();
            if got != expected {
                return Err(Error::Shape(format!("noise bank resolutions {got:?} do not match {expected:?}")));
            }
        }
        let x = Var::constant(input.clone());
        Ok(match self.cfg.architecture {
            Architecture::Sa2h => self.forward_sa2h(input, x, noise),
            Architecture::LegacyUnet => self.forward_legacy(x),
        })
    }

    fn forward_sa2h(&self, input: &Tensor<T>, x: Var<T>, noise: &NoiseBank<T>) -> Var<T> {
        let n = self.cfg.n_down;
        let cond_maps: Vec<Option<Var<T>>> =
            (0..=n).map(|l| (self.cfg.use_concat).then(|| Var::constant(resample_conditioning(input, self.cfg.cond_channels(), 1 << l)))).collect();
        let with_cond = |h: Var<T>, level: usize| match &cond_maps[level] {
            Some(c) => Var::concat_channels(&[&h, c]),
            None => h,
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(n);
        for (l, conv) in self.encoder.iter().enumerate() {
            let inp = if l > 0 { with_cond(h, l) } else { h };
            h = self.norm(conv.forward(&inp).leaky_relu(LEAKY_SLOPE));
            skips.push(h.clone());
        }
        for conv in &self.bottleneck {
            h = self.norm(conv.forward(&with_cond(h, n)).leaky_relu(LEAKY_SLOPE));
        }
        for (l, block) in self.decoder.iter().enumerate() {
            let level = n - 1 - l;
            h = self.norm(block.up.forward(&h).relu());
            if level > 0 {
                h = Var::concat_channels(&[&h, &skips[level - 1]]);
            }
            if let Some(wn) = &block.noise_weight {
                h = h.add_scaled_noise(wn, &noise.images[l]);
            }
            if let Some(tex) = &block.texture {
                h = self.norm(tex.forward(&with_cond(h, level)).relu());
            } else {
                h = with_cond(h, level);
            }
        }
        self.output.forward(&h).tanh()
    }

    fn forward_legacy(&self, x: Var<T>) -> Var<T> {
        let n = self.cfg.n_down;
        let mut h = x;
        let mut skips = Vec::with_capacity(n);
        for (l, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
            // the innermost map can be 1x1, where instance statistics are degenerate
            if l + 1 < n {
                h = self.norm(h);
            }
            skips.push(h.clone());
        }
        for (l, block) in self.decoder.iter().enumerate() {
            let level = n - 1 - l;
            h = self.norm(block.up.forward(&h).relu());
            h = Var::concat_channels(&[&h, &skips[level - 1]]);
        }
        self.output.forward(&h).tanh()
    }

    /// Bounds `(lo, hi)` such that output pixel `i` depends only on input
    /// pixels in `[i + lo, i + hi]` along each axis. Exact interval
    /// propagation of the layer geometry; only meaningful without instance
    /// normalization, which couples every pixel of a plane.
    pub fn dependency_interval(&self) -> (i64, i64) {
        // (jump, lo, hi): grid-index i at this layer covers input [jump*i + lo, jump*i + hi]
        type Span = (f64, f64, f64);
        let conv = |(j, lo, hi): Span, k: usize, s: usize, p: usize| -> Span { (j * s as f64, lo - j * p as f64, hi + j * (k - 1 - p) as f64) };
        let conv_t = |(j, lo, hi): Span, k: usize, s: usize, p: usize| -> Span {
            let jn = j / s as f64;
            (jn, lo + jn * (p as f64 - k as f64 + 1.0), hi + jn * p as f64)
        };
        let merge = |a: Span, b: Span| -> Span { (a.0, a.1.min(b.1), a.2.max(b.2)) };
        let cond = |f: usize| -> Span {
            let f = f as f64;
            // nearest picks i*f + f/2, bilinear blends around (i + 0.5) f - 0.5
            if f == 1.0 {
                (1.0, 0.0, 0.0)
            } else {
                (f, (f / 2.0 - 1.0).floor(), (f / 2.0).ceil())
            }
        };
        let cfg = &self.cfg;
        let n = cfg.n_down;
        let concat = cfg.use_concat && cfg.architecture == Architecture::Sa2h;
        let mut h: Span = (1.0, 0.0, 0.0);
        let mut skips = Vec::new();
        for l in 0..n {
            if l > 0 && concat {
                h = merge(h, cond(1 << l));
            }
            h = conv(h, 4, 2, 1);
            skips.push(h);
        }
        for _ in 0..cfg.bottleneck_convs {
            if concat {
                h = merge(h, cond(1 << n));
            }
            h = conv(h, 3, 1, 1);
        }
        let (k, s, p, _) = cfg.upsample_layer();
        for l in 0..self.decoder.len() {
            let level = n - 1 - l;
            h = conv_t(h, k, s, p);
            if level > 0 {
                h = merge(h, skips[level - 1]);
            }
            if concat {
                h = merge(h, cond(1 << level));
            }
            if cfg.use_texture_conv {
                h = conv(h, 3, 1, 1);
            }
        }
        h = if cfg.architecture == Architecture::LegacyUnet { conv_t(h, 4, 2, 1) } else { conv(h, 3, 1, 1) };
        (h.1.floor() as i64, h.2.ceil() as i64)
    }

    pub fn receptive_radius(&self) -> usize {
        let (lo, hi) = self.dependency_interval();
        lo.unsigned_abs().max(hi.unsigned_abs()) as usize
    }
}

/// Downsamples the conditioning channels of `input` by `factor`: `s`
/// (channel 0) by nearest neighbour, `a` (channel 1) bilinearly with
/// half-pixel centres.
pub fn resample_conditioning<T: Float>(input: &Tensor<T>, cond_channels: usize, factor: usize) -> Tensor<T> {
    let (n, _, h, w) = input.dims4();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[n, cond_channels, oh, ow]);
    for b in 0..n {
        for c in 0..cond_channels {
            let src = input.plane(b, c).to_vec();
            let dst = out.plane_mut(b, c);
            for r in 0..oh {
                for q in 0..ow {
                    dst[r * ow + q] = if c == 0 || factor == 1 {
                        src[(r * factor + factor / 2).min(h - 1) * w + (q * factor + factor / 2).min(w - 1)]
                    } else {
                        bilinear_at(&src, h, w, (r as f64 + 0.5) * factor as f64 - 0.5, (q as f64 + 0.5) * factor as f64 - 0.5)
                    };
                }
            }
        }
    }
    out
}

fn bilinear_at<T: Float>(src: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let (y0, x0) = (y.floor().max(0.0) as usize, x.floor().max(0.0) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (T::of((y - y0 as f64).clamp(0.0, 1.0)), T::of((x - x0 as f64).clamp(0.0, 1.0)));
    let one = T::one();
    let top = src[y0 * w + x0] * (one - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (one - fx) + src[y1 * w + x1] * fx;
    top * (one - fy) + bottom * fy
}

/// Conditional patch discriminator over `(candidate, conditioning maps)`.
#[derive(Clone)]
pub struct Discriminator<T: Float> {
    cfg: DiscriminatorConfig,
    params: Vec<(String, Var<T>)>,
    layers: Vec<Conv<T>>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::<T>::new(seed);
        let mut layers = Vec::with_capacity(cfg.n_layers + 2);
        let width = |l: usize| cfg.base_channels << l.min(3);
        let mut cin = 1 + cfg.condition_channels;
        for l in 0..cfg.n_layers {
            layers.push(pb.conv(&format!("layer{l}"), cin, width(l), 4, 2, 1));
            cin = width(l);
        }
        let penultimate = width(cfg.n_layers);
        layers.push(pb.conv(&format!("layer{}", cfg.n_layers), cin, penultimate, 4, 1, 1));
        layers.push(pb.conv("out", penultimate, 1, 4, 1, 1));
        Ok(Self { cfg: cfg.clone(), params: pb.params, layers })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn named_parameters(&self) -> &[(String, Var<T>)] {
        &self.params
    }

    pub fn parameters(&self) -> Vec<Var<T>> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.value().numel()).sum()
    }

    /// Patch logits for `candidate` (N,1,H,W) given conditioning maps (N,C,H,W).
    pub fn forward(&self, candidate: &Var<T>, condition: &Tensor<T>) -> Result<Var<T>> {
        let cs = candidate.shape();
        let ds = condition.shape();
        if cs.len() != 4 || ds.len() != 4 || cs[1] != 1 || cs[0] != ds[0] || cs[2] != ds[2] || cs[3] != ds[3] || ds[1] != self.cfg.condition_channels {
            return Err(Error::Shape(format!(
                "discriminator needs candidate (N,1,H,W) and condition (N,{},H,W); got {cs:?} and {ds:?}",
                self.cfg.condition_channels
            )));
        }
        let mut h = Var::concat_channels(&[candidate, &Var::constant(condition.clone())]);
        let last = self.layers.len() - 1;
        for (l, conv) in self.layers.iter().enumerate() {
            h = conv.forward(&h);
            if l == last {
                break;
            }
            if l > 0 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(LEAKY_SLOPE);
        }
        Ok(h)
    }
}

/// Output of the decoder's linear upsampling path, with all-ones kernels and
/// no bias, for a constant all-ones `size x size` input. Texture-friendly
/// blocks (even kernel, then a stride-1 conv) produce a constant interior;
/// an odd transposed kernel covers output pixels unevenly.
pub fn overlap_probe(cfg: &GeneratorConfig, size: usize) -> Tensor<f64> {
    let (k, s, p, op) = cfg.upsample_layer();
    let x = Tensor::<f64>::ones(&[1, 1, size, size]);
    let mut y = echosynth_autograd::conv_transpose2d_forward(&x, &Tensor::ones(&[1, 1, k, k]), None, s, p, op);
    if cfg.use_texture_conv && cfg.architecture == Architecture::Sa2h {
        y = echosynth_autograd::conv2d_forward(&y, &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1);
    }
    y
}

/// Variance over the output excluding a `margin`-pixel border.
pub fn interior_variance(t: &Tensor<f64>, margin: usize) -> f64 {
    let (_, _, h, w) = t.dims4();
    let vals: Vec<f64> = (margin..h - margin).flat_map(|r| (margin..w - margin).map(move |c| (r, c))).map(|(r, c)| t.data()[r * w + c]).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

/// Metadata stored next to a weights blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    pub parameters: Vec<(String, Vec<usize>)>,
    pub sha256: String,
}

/// Writes `<stem>.bin` (little-endian f32 values in parameter order) and `<stem>.json`.
pub fn save_checkpoint<T: Float>(
    dir: &Path,
    stem: &str,
    kind: &str,
    config: serde_json::Value,
    params: &[(String, Var<T>)],
    step: u64,
    seed: u64,
) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut blob = Vec::new();
    for (_, v) in params {
        for x in v.value().data() {
            blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        kind: kind.into(),
        config,
        step,
        seed,
        parameters: params.iter().map(|(n, v)| (n.clone(), v.shape())).collect(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let bin = dir.join(format!("{stem}.bin"));
    std::fs::write(&bin, &blob).at(&bin)?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&meta)?).at(&json)?;
    Ok(meta)
}

pub fn read_checkpoint_meta(dir: &Path, stem: &str) -> Result<CheckpointMeta> {
    let json = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json).at(&json)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads weights into `params`, checking names, shapes and the content hash.
pub fn load_checkpoint<T: Float>(dir: &Path, stem: &str, params: &[(String, Var<T>)]) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(dir, stem)?;
    let bin = dir.join(format!("{stem}.bin"));
    let blob = std::fs::read(&bin).at(&bin)?;
    if hex::encode(Sha256::digest(&blob)) != meta.sha256 {
        return Err(Error::Checkpoint(format!("{}: content hash mismatch", bin.display())));
    }
    if meta.parameters.len() != params.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model has {}", meta.parameters.len(), params.len())));
    }
    let mut offset = 0;
    for ((name, shape), (pname, var)) in meta.parameters.iter().zip(params) {
        if name != pname || *shape != var.shape() {
            return Err(Error::Checkpoint(format!("tensor {name} {shape:?} does not match model tensor {pname} {:?}", var.shape())));
        }
        let numel: usize = shape.iter().product();
        let bytes = blob.get(offset * 4..(offset + numel) * 4).ok_or_else(|| Error::Checkpoint("weights blob is truncated".into()))?;
        let data = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        var.set_value(Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        offset += numel;
    }
    if offset * 4 != blob.len() {
        return Err(Error::Checkpoint("weights blob has trailing data".into()));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn input(cfg: &GeneratorConfig, n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f64>::randn(&[n, cfg.in_channels(), size, size], 0.0, 0.5, &mut rng)
    }

    fn small(variant: Variant) -> GeneratorConfig {
        variant.generator_config(4, 4)
    }

    #[test]
    fn parameter_accounting() {
        let count = |v: Variant| Generator::<f32>::new(&v.generator_config(64, 8), 0).unwrap().param_count();
        let full = count(Variant::Sa2h);
        assert!((13_000_000..=16_000_000).contains(&full), "{full}");
        assert!(count(Variant::Sa2hAtt) < full);
        assert!(count(Variant::Sa2hConcat) < full);
        assert!(count(Variant::Sa2hConv) > full);
    }

    #[test]
    fn variants_round_trip_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(matches!("pix2pix".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        assert_eq!(Variant::Sa2hNoise.generator_config(8, 4).in_channels(), 3);
        assert_eq!(Variant::Sa2hAtt.generator_config(8, 4).in_channels(), 1);
        assert_eq!(Variant::Lsa2h.generator_config(8, 4).extra_input, ExtraInput::LowQuality);
        assert_eq!(Variant::Nsa2h.generator_config(8, 4).extra_input, ExtraInput::Noise);
    }

    #[test]
    fn output_shape_and_range() {
        for v in Variant::ALL {
            let cfg = small(v);
            let g = Generator::<f64>::new(&cfg, 1).unwrap();
            for size in [32, 64] {
                let x = input(&cfg, 2, size, 3);
                let noise = make_noise_bank(5, &g.noise_resolutions(2, size, size));
                let y = g.forward(&x, &noise).unwrap();
                assert_eq!(y.shape(), vec![2, 1, size, size], "{v}");
                assert!(y.value().data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let cfg = small(Variant::Sa2h);
        let g = Generator::<f64>::new(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 2, 40, 48]);
        let err = g.forward(&x, &make_noise_bank(0, &g.noise_resolutions(1, 40, 48))).unwrap_err();
        assert!(matches!(err, Error::Divisibility { factor: 16, .. }), "{err}");
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn zero_noise_weights_gate_the_bank() {
        let cfg = small(Variant::Sa2h);
        let g = Generator::<f64>::new(&cfg, 2).unwrap();
        let x = input(&cfg, 1, 32, 4);
        let a = g.forward(&x, &make_noise_bank(1, &g.noise_resolutions(1, 32, 32))).unwrap().value().clone();
        let b = g.forward(&x, &make_noise_bank(2, &g.noise_resolutions(1, 32, 32))).unwrap().value().clone();
        assert_eq!(a, b);
        for w in g.noise_weights() {
            w.set_value(Tensor::full(&w.shape(), 0.5));
        }
        let c = g.forward(&x, &make_noise_bank(2, &g.noise_resolutions(1, 32, 32))).unwrap().value().clone();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_bank_statistics() {
        let bank = make_noise_bank::<f64>(11, &[(1, 64, 64), (1, 64, 64), (1, 32, 32)]);
        assert_eq!(bank, make_noise_bank(11, &[(1, 64, 64), (1, 64, 64), (1, 32, 32)]));
        for img in &bank.images[..2] {
            let n = img.numel() as f64;
            let mean = img.data().iter().sum::<f64>() / n;
            let std = (img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&std), "{mean} {std}");
        }
        let (a, b) = (bank.images[0].data(), bank.images[1].data());
        let corr = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
        assert!(corr.abs() < 0.1, "{corr}");
    }

    #[test]
    fn att_variant_ignores_attenuation() {
        // the att ablation has no `a` channel at all: its input is `s` alone
        let cfg = small(Variant::Sa2hAtt);
        assert_eq!(cfg.in_channels(), 1);
        let g = Generator::<f64>::new(&cfg, 3).unwrap();
        assert!(g.forward(&Tensor::zeros(&[1, 2, 32, 32]), &make_noise_bank(0, &g.noise_resolutions(1, 32, 32))).is_err());
    }

    #[test]
    fn locality_of_concat_generator() {
        let mut cfg = GeneratorConfig::sa2h(4);
        cfg.normalization = Normalization::None;
        let g = Generator::<f64>::new(&cfg, 7).unwrap();
        for w in g.noise_weights() {
            w.set_value(Tensor::full(&w.shape(), 0.3));
        }
        let size = 256;
        let (lo, hi) = g.dependency_interval();
        let x = input(&cfg, 1, size, 8);
        let mut x2 = x.clone();
        let (r0, c0, k) = (10usize, 12usize, 6usize);
        for r in r0..r0 + k {
            for c in c0..c0 + k {
                x2.data_mut()[r * size + c] += 1.0; // channel 0 = s
            }
        }
        let noise = make_noise_bank(1, &g.noise_resolutions(1, size, size));
        let y1 = g.forward(&x, &noise).unwrap().value().clone();
        let y2 = g.forward(&x2, &noise).unwrap().value().clone();
        assert!(((r0 + k) as i64 - lo) < size as i64 / 2, "dependency interval {lo}..{hi} too wide for the probe");
        let reach = |p: usize, i: usize| (i as i64) >= p as i64 - hi && (i as i64) <= (p + k - 1) as i64 - lo;
        let mut changed_inside = false;
        for r in 0..size {
            for c in 0..size {
                let d = (y1.data()[r * size + c] - y2.data()[r * size + c]).abs();
                if reach(r0, r) && reach(c0, c) {
                    changed_inside |= d > 0.0;
                } else {
                    assert_eq!(d, 0.0, "pixel ({r},{c}) outside the receptive field changed");
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn even_overlap_probe() {
        let tex = overlap_probe(&GeneratorConfig::sa2h(4), 16);
        assert!(interior_variance(&tex, 4) < 1e-10);
        let odd = overlap_probe(&Variant::Sa2hConv.generator_config(4, 4), 16);
        assert!(interior_variance(&odd, 4) > 1e-4);
    }

    #[test]
    fn discriminator_shapes_and_conditioning() {
        let cfg = DiscriminatorConfig { n_layers: 4, base_channels: 64, condition_channels: 2 };
        assert_eq!(cfg.output_size(512), 30);
        assert!(cfg.receptive_field() < 512);
        let small = DiscriminatorConfig { n_layers: 2, base_channels: 4, condition_channels: 2 };
        let d = Discriminator::<f64>::new(&small, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let cand = Var::constant(Tensor::randn(&[1, 1, 32, 32], 0.0, 1.0, &mut rng));
        let cond = Tensor::<f64>::randn(&[1, 2, 32, 32], 0.0, 1.0, &mut rng);
        let out = d.forward(&cand, &cond).unwrap();
        assert_eq!(out.shape(), vec![1, 1, small.output_size(32), small.output_size(32)]);
        let mut permuted = cond.clone();
        permuted.data_mut()[..1024].reverse();
        assert_ne!(*out.value(), *d.forward(&cand, &permuted).unwrap().value());
        assert!(d.forward(&cand, &Tensor::zeros(&[1, 2, 16, 16])).is_err());
        for p in d.parameters() {
            p.update_value(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        }
        let flat = d.forward(&cand, &cond).unwrap().value().clone();
        assert!(flat.data().iter().all(|&v| v == flat.data()[0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(Variant::Sa2h);
        let g = Generator::<f32>::new(&cfg, 1).unwrap();
        save_checkpoint(dir.path(), "gen", "generator", serde_json::to_value(&cfg).unwrap(), g.named_parameters(), 7, 1).unwrap();
        let h = Generator::<f32>::new(&cfg, 2).unwrap();
        let meta = load_checkpoint(dir.path(), "gen", h.named_parameters()).unwrap();
        assert_eq!(meta.step, 7);
        for ((_, a), (_, b)) in g.named_parameters().iter().zip(h.named_parameters()) {
            assert_eq!(*a.value(), *b.value());
        }
        let other = Generator::<f32>::new(&small(Variant::Sa2hConv), 1).unwrap();
        assert!(load_checkpoint(dir.path(), "gen", other.named_parameters()).is_err());
    }
}
