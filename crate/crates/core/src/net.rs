//! Encoder, StyleBank layer and decoder.
//!
//! ```text
//! image [n,3,h,w] --E--> F [n,C,h/4,w/4] --K_i--> F~ --D--> image [n,3,h,w]
//! ```
//!
//! The auto-encoder branch skips `K_i`. Banks are plain stride-1
//! convolutions with zero padding and nothing else, so everything done to
//! them (blending, masking) stays linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Spatial reduction of the encoder, and therefore of masks and label maps.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the encoder output; the encoder runs C/4 -> C/2 -> C.
    pub c_max: usize,
    /// Square StyleBank kernel size.
    pub bank_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_max: 32,
            bank_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_max < 4 || self.c_max % 4 != 0 {
            return Err(Error::invalid("ModelConfig", format!("c_max {} must be a positive multiple of 4", self.c_max)));
        }
        if self.bank_kernel != 3 && self.bank_kernel != 7 {
            return Err(Error::invalid("ModelConfig", format!("bank kernel {} must be 3 or 7", self.bank_kernel)));
        }
        Ok(())
    }

    pub fn bank_dims(&self) -> [usize; 4] {
        [self.c_max, self.c_max, self.bank_kernel, self.bank_kernel]
    }

    fn widths(&self) -> [usize; 3] {
        [self.c_max / 4, self.c_max / 2, self.c_max]
    }
}

/// Convolution followed by instance norm with learnable affine terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNorm<T: Real = f32> {
    pub kernel: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Real> ConvNorm<T> {
    fn init(kernel_dims: [usize; 4], norm_channels: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: uniform(kernel_dims, fan_in, rng),
            scale: Tensor::full([1, norm_channels, 1, 1], T::one()),
            shift: Tensor::zeros([1, norm_channels, 1, 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Real = f32> {
    /// 9x9 stride 1, then two 3x3 stride 2.
    pub layers: [ConvNorm<T>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T: Real = f32> {
    /// Two 3x3 stride-2 transposed convolutions, kernels `[c_in, c_out, 3, 3]`.
    pub up: [ConvNorm<T>; 2],
    /// Final 9x9 stride-1 convolution to RGB; no normalization or nonlinearity.
    pub out_kernel: Tensor<T>,
    pub out_bias: Tensor<T>,
}

const ENCODER_GEOMETRY: [(usize, usize, usize); 3] = [(9, 1, 4), (3, 2, 1), (3, 2, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T: Real = f32> {
    pub name: String,
    pub kernel: Tensor<T>,
}

impl<T: Real> FilterBank<T> {
    pub fn new(name: impl Into<String>, kernel: Tensor<T>) -> Result<Self> {
        let name = name.into();
        validate_style_name(&name)?;
        let [co, ci, kh, kw] = kernel.dims();
        if kh != kw || kh % 2 == 0 || co != ci {
            return Err(Error::invalid(
                "FilterBank",
                format!("kernel {:?} must be [C, C, k, k] with odd k", kernel.dims()),
            ));
        }
        Ok(Self { name, kernel })
    }

    /// Centre tap 1 on the matching channel: leaves features unchanged.
    pub fn identity(name: impl Into<String>, channels: usize, k: usize) -> Result<Self> {
        let mid = k / 2;
        let kernel = Tensor::from_fn([channels, channels, k, k], |o, c, y, x| {
            if o == c && y == mid && x == mid {
                T::one()
            } else {
                T::zero()
            }
        });
        Self::new(name, kernel)
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(c_in * k * k)`.
    pub fn random(name: impl Into<String>, channels: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(name, uniform([channels, channels, k, k], channels * k * k, rng))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.kernel.dims()[0]
    }
}

pub(crate) fn validate_style_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('/') || name.chars().any(char::is_control) {
        return Err(Error::invalid("style name", format!("`{name}` must be non-empty without '/' or control characters")));
    }
    Ok(())
}

fn uniform<T: Real>(dims: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_, _, _, _| T::from_f64c(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleBankModel<T: Real = f32> {
    config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
    banks: Vec<FilterBank<T>>,
}

/// Encoder/decoder parameters bound to a tape, in [`StyleBankModel::autoencoder_params`] order.
pub struct AutoencoderVars<'t, T: Real = f32> {
    encoder: Vec<[Var<'t, T>; 3]>,
    up: Vec<[Var<'t, T>; 3]>,
    out_kernel: Var<'t, T>,
    out_bias: Var<'t, T>,
}

impl<'t, T: Real> AutoencoderVars<'t, T> {
    pub fn encode(&self, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let [_, c, h, w] = image.dims();
        if c != 3 {
            return Err(Error::shape("encode", format!("expected 3 channels, got {c}")));
        }
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape("encode", format!("{h}x{w} is not divisible by {FEATURE_STRIDE}")));
        }
        let eps = T::from_f64c(INSTANCE_NORM_EPS);
        let mut x = image;
        for (layer, &(_, stride, pad)) in self.encoder.iter().zip(&ENCODER_GEOMETRY) {
            let [k, s, b] = *layer;
            x = x.conv2d(k, stride, Padding::Reflect(pad))?.instance_norm(s, b, eps)?.relu()?;
        }
        Ok(x)
    }

    pub fn decode(&self, features: Var<'t, T>) -> Result<Var<'t, T>> {
        let [_, c, h, w] = features.dims();
        let expected = self.up[0][0].dims()[0];
        if c != expected {
            return Err(Error::shape("decode", format!("expected {expected} channels, got {c}")));
        }
        let eps = T::from_f64c(INSTANCE_NORM_EPS);
        let mut x = features;
        let (mut h, mut w) = (h, w);
        for layer in &self.up {
            let [k, s, b] = *layer;
            h *= 2;
            w *= 2;
            x = x
                .conv2d_transpose(k, 2, Padding::Zero(1), (h, w))?
                .instance_norm(s, b, eps)?
                .relu()?;
        }
        x.conv2d(self.out_kernel, 1, Padding::Reflect(4))?.add_bias(self.out_bias)
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        let mut out: Vec<Var<'t, T>> = self.encoder.iter().chain(&self.up).flatten().copied().collect();
        out.push(self.out_kernel);
        out.push(self.out_bias);
        out
    }
}

/// StyleBank convolution on tape values: stride 1, zero padding `(k-1)/2`.
pub fn apply_bank_var<'t, T: Real>(kernel: Var<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
    let k = kernel.dims()[2];
    if k % 2 == 0 {
        return Err(Error::invalid("apply_bank", format!("kernel size {k} is even")));
    }
    features.conv2d(kernel, 1, Padding::Zero((k - 1) / 2))
}

pub fn apply_bank<T: Real>(bank: &FilterBank<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = apply_bank_var(tape.constant(bank.kernel.clone()), tape.constant(features.clone()))?;
    Ok((*out.value()).clone())
}

/// Result of [`fuse_linear`].
#[derive(Debug, Clone)]
pub struct FusedBank<T: Real = f32> {
    pub bank: FilterBank<T>,
    pub weights: Vec<T>,
    /// Set when the supplied weights did not already sum to one.
    pub renormalized: bool,
}

/// Weighted sum of kernels with weights rescaled to sum to one.
pub fn fuse_linear<T: Real>(banks: &[&FilterBank<T>], weights: &[T]) -> Result<FusedBank<T>> {
    let first = banks.first().ok_or_else(|| Error::invalid("fuse_linear", "no banks"))?;
    if banks.len() != weights.len() {
        return Err(Error::invalid("fuse_linear", format!("{} banks but {} weights", banks.len(), weights.len())));
    }
    for b in banks {
        if b.kernel.dims() != first.kernel.dims() {
            return Err(Error::shape("fuse_linear", format!("{:?} vs {:?}", b.kernel.dims(), first.kernel.dims())));
        }
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("fuse_linear", "non-finite weight"));
    }
    let total: T = weights.iter().copied().sum();
    if total == T::zero() {
        return Err(Error::invalid("fuse_linear", "weights sum to zero"));
    }
    let renormalized = total != T::one();
    let weights: Vec<T> = weights.iter().map(|&w| w / total).collect();
    if renormalized {
        log::warn!("fusion weights summed to {total}; renormalized to {weights:?}");
    }

    let mut kernel: Option<Tensor<T>> = None;
    for (b, &w) in banks.iter().zip(&weights) {
        if w == T::zero() {
            continue;
        }
        match &mut kernel {
            None => kernel = Some(b.kernel.map(|v| w * v)),
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(b.kernel.data()) {
                    *a = *a + w * v;
                }
            }
        }
    }
    let kernel = kernel.unwrap_or_else(|| Tensor::zeros(first.kernel.dims()));
    let name = banks
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w != T::zero())
        .map(|(b, _)| b.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(FusedBank {
        bank: FilterBank::new(if name.is_empty() { "fused".to_string() } else { name }, kernel)?,
        weights,
        renormalized,
    })
}

/// Disjoint binary masks at feature resolution that cover every position exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet<T: Real = f32> {
    masks: Vec<Tensor<T>>,
    styles: Vec<String>,
}

impl<T: Real> RegionMaskSet<T> {
    pub fn new(masks: Vec<Tensor<T>>, styles: Vec<String>) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::Mask("no masks".into()))?;
        if masks.len() != styles.len() {
            return Err(Error::Mask(format!("{} masks but {} styles", masks.len(), styles.len())));
        }
        let [_, _, h, w] = first.dims();
        for m in &masks {
            if m.dims() != [1, 1, h, w] {
                return Err(Error::Mask(format!("mask dims {:?}, expected [1, 1, {h}, {w}]", m.dims())));
            }
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Mask("mask values must be 0 or 1".into()));
            }
        }
        for i in 0..h * w {
            let covered = masks.iter().filter(|m| m.data()[i] == T::one()).count();
            match covered {
                1 => {}
                0 => return Err(Error::Mask(format!("coverage gap at ({}, {})", i / w, i % w))),
                _ => return Err(Error::Mask(format!("overlapping masks at ({}, {})", i / w, i % w))),
            }
        }
        Ok(Self { masks, styles })
    }

    /// One mask per label `0..assignment.len()`; `labels` is a row-major `h x w` map.
    pub fn from_labels(labels: &[usize], h: usize, w: usize, assignment: &[String]) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Mask(format!("label map has {} entries, expected {h}x{w}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= assignment.len()) {
            return Err(Error::Mask(format!("label {bad} has no assigned style")));
        }
        let masks = (0..assignment.len())
            .map(|k| {
                let data = labels.iter().map(|&l| if l == k { T::one() } else { T::zero() }).collect();
                Tensor::new([1, 1, h, w], data)
            })
            .collect::<Result<Vec<_>>>()?;
        // Labels that never occur yield empty masks; drop them.
        let (masks, styles): (Vec<_>, Vec<_>) = masks
            .into_iter()
            .zip(assignment.iter().cloned())
            .filter(|(m, _)| m.data().iter().any(|&v| v == T::one()))
            .unzip();
        Self::new(masks, styles)
    }

    pub fn single(style: impl Into<String>, h: usize, w: usize) -> Self {
        Self {
            masks: vec![Tensor::full([1, 1, h, w], T::one())],
            styles: vec![style.into()],
        }
    }

    pub fn masks(&self) -> &[Tensor<T>] {
        &self.masks
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn spatial(&self) -> (usize, usize) {
        let [_, _, h, w] = self.masks[0].dims();
        (h, w)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Reduces an image-resolution label map to feature resolution by majority
/// vote over `FEATURE_STRIDE x FEATURE_STRIDE` cells; ties go to the lowest label.
pub fn reduce_labels(labels: &[usize], h: usize, w: usize) -> Result<(Vec<usize>, usize, usize)> {
    if labels.len() != h * w || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::Mask(format!(
            "label map {h}x{w} ({} entries) must match the image and be divisible by {FEATURE_STRIDE}",
            labels.len()
        )));
    }
    let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let mut out = Vec::with_capacity(fh * fw);
    let mut votes: Vec<(usize, usize)> = Vec::with_capacity(FEATURE_STRIDE * FEATURE_STRIDE);
    for fy in 0..fh {
        for fx in 0..fw {
            votes.clear();
            for y in fy * FEATURE_STRIDE..(fy + 1) * FEATURE_STRIDE {
                for x in fx * FEATURE_STRIDE..(fx + 1) * FEATURE_STRIDE {
                    let l = labels[y * w + x];
                    match votes.iter_mut().find(|(k, _)| *k == l) {
                        Some((_, n)) => *n += 1,
                        None => votes.push((l, 1)),
                    }
                }
            }
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|&(l, _)| l)
                .unwrap();
            out.push(best);
        }
    }
    Ok((out, fh, fw))
}

impl<T: Real> StyleBankModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.widths();
        let encoder = EncoderParams {
            layers: [
                ConvNorm::init([c1, 3, 9, 9], c1, 3 * 81, rng),
                ConvNorm::init([c2, c1, 3, 3], c2, c1 * 9, rng),
                ConvNorm::init([c3, c2, 3, 3], c3, c2 * 9, rng),
            ],
        };
        let decoder = DecoderParams {
            up: [
                ConvNorm::init([c3, c2, 3, 3], c2, c3 * 9, rng),
                ConvNorm::init([c2, c1, 3, 3], c1, c2 * 9, rng),
            ],
            out_kernel: uniform([3, c1, 9, 9], c1 * 81, rng),
            out_bias: Tensor::full([1, 3, 1, 1], T::from_f64c(0.5)),
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            banks: Vec::new(),
        })
    }

    /// Assembles a model from parts, checking every shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        encoder: EncoderParams<T>,
        decoder: DecoderParams<T>,
        banks: Vec<FilterBank<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            encoder,
            decoder,
            banks: Vec::new(),
        };
        let expected = Self::autoencoder_dims(&config);
        let actual = model.autoencoder_params();
        for ((name, dims), (_, t)) in expected.iter().zip(&actual) {
            if t.dims() != *dims {
                return Err(Error::shape("StyleBankModel", format!("{name}: {:?}, expected {dims:?}", t.dims())));
            }
        }
        for b in banks {
            model.insert_bank(b)?;
        }
        Ok(model)
    }

    fn autoencoder_dims(config: &ModelConfig) -> Vec<(String, [usize; 4])> {
        let [c1, c2, c3] = config.widths();
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, prefix: &str, k: [usize; 4], c: usize| {
            out.push((format!("{prefix}/kernel"), k));
            out.push((format!("{prefix}/scale"), [1, c, 1, 1]));
            out.push((format!("{prefix}/shift"), [1, c, 1, 1]));
        };
        conv(&mut out, "encoder/conv1", [c1, 3, 9, 9], c1);
        conv(&mut out, "encoder/conv2", [c2, c1, 3, 3], c2);
        conv(&mut out, "encoder/conv3", [c3, c2, 3, 3], c3);
        conv(&mut out, "decoder/up1", [c3, c2, 3, 3], c2);
        conv(&mut out, "decoder/up2", [c2, c1, 3, 3], c1);
        out.push(("decoder/out/kernel".into(), [3, c1, 9, 9]));
        out.push(("decoder/out/bias".into(), [1, 3, 1, 1]));
        out
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    /// Encoder then decoder parameters with their checkpoint names, in a fixed order.
    pub fn autoencoder_params(&self) -> Vec<(String, &Tensor<T>)> {
        let names = Self::autoencoder_dims(&self.config);
        let tensors = self.encoder.layers.iter().chain(&self.decoder.up).flat_map(|l| [&l.kernel, &l.scale, &l.shift]);
        names
            .into_iter()
            .map(|(n, _)| n)
            .zip(tensors.chain([&self.decoder.out_kernel, &self.decoder.out_bias]))
            .collect()
    }

    pub fn autoencoder_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let DecoderParams { up, out_kernel, out_bias } = &mut self.decoder;
        self.encoder
            .layers
            .iter_mut()
            .chain(up.iter_mut())
            .flat_map(|l| [&mut l.kernel, &mut l.scale, &mut l.shift])
            .chain([out_kernel, out_bias])
            .collect()
    }

    pub fn bind_autoencoder<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> AutoencoderVars<'t, T> {
        let bind = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let layer = |l: &ConvNorm<T>| [bind(&l.kernel), bind(&l.scale), bind(&l.shift)];
        AutoencoderVars {
            encoder: self.encoder.layers.iter().map(layer).collect(),
            up: self.decoder.up.iter().map(layer).collect(),
            out_kernel: bind(&self.decoder.out_kernel),
            out_bias: bind(&self.decoder.out_bias),
        }
    }

    pub fn banks(&self) -> &[FilterBank<T>] {
        &self.banks
    }

    pub fn bank_names(&self) -> Vec<&str> {
        self.banks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn bank_index(&self, name: &str) -> Result<usize> {
        self.banks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnknownStyle(name.to_string()))
    }

    pub fn bank(&self, name: &str) -> Result<&FilterBank<T>> {
        Ok(&self.banks[self.bank_index(name)?])
    }

    pub fn bank_mut(&mut self, index: usize) -> &mut FilterBank<T> {
        &mut self.banks[index]
    }

    pub fn insert_bank(&mut self, bank: FilterBank<T>) -> Result<usize> {
        if bank.kernel.dims() != self.config.bank_dims() {
            return Err(Error::shape(
                "insert_bank",
                format!("bank `{}` is {:?}, model expects {:?}", bank.name, bank.kernel.dims(), self.config.bank_dims()),
            ));
        }
        if self.banks.iter().any(|b| b.name == bank.name) {
            return Err(Error::DuplicateStyle(bank.name));
        }
        self.banks.push(bank);
        Ok(self.banks.len() - 1)
    }

    /// Appends a randomly initialised bank and returns its index.
    pub fn add_bank(&mut self, name: &str, rng: &mut impl Rng) -> Result<usize> {
        let bank = FilterBank::random(name, self.config.c_max, self.config.bank_kernel, rng)?;
        self.insert_bank(bank)
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ae = self.bind_autoencoder(&tape, false);
        Ok((*ae.encode(tape.constant(image.clone()))?.value()).clone())
    }

    pub fn decode(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ae = self.bind_autoencoder(&tape, false);
        Ok((*ae.decode(tape.constant(features.clone()))?.value()).clone())
    }

    pub fn autoencode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ae = self.bind_autoencoder(&tape, false);
        let f = ae.encode(tape.constant(image.clone()))?;
        Ok((*ae.decode(f)?.value()).clone())
    }

    pub fn stylize(&self, image: &Tensor<T>, style: &str) -> Result<Tensor<T>> {
        let bank = self.bank(style)?;
        self.stylize_with(image, bank)
    }

    /// Stylizes with a bank that need not belong to the model (e.g. a fused one).
    pub fn stylize_with(&self, image: &Tensor<T>, bank: &FilterBank<T>) -> Result<Tensor<T>> {
        if bank.kernel.dims()[0] != self.config.c_max {
            return Err(Error::shape("stylize", format!("bank has {} channels, model {}", bank.channels(), self.config.c_max)));
        }
        let tape = Tape::new();
        let ae = self.bind_autoencoder(&tape, false);
        let f = ae.encode(tape.constant(image.clone()))?;
        let styled = apply_bank_var(tape.constant(bank.kernel.clone()), f)?;
        Ok((*ae.decode(styled)?.value()).clone())
    }

    /// Linear blend of named banks.
    pub fn fuse_linear(&self, weights: &[(String, T)]) -> Result<FusedBank<T>> {
        let banks = weights.iter().map(|(n, _)| self.bank(n)).collect::<Result<Vec<_>>>()?;
        let w: Vec<T> = weights.iter().map(|(_, w)| *w).collect();
        fuse_linear(&banks, &w)
    }

    /// Sum over regions of `K_i * (M_i x F)`: masking precedes convolution,
    /// so a bank's support bleeds `(k-1)/2` positions across each seam.
    pub fn fuse_regions(&self, features: &Tensor<T>, masks: &RegionMaskSet<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.fuse_regions_var(&tape, tape.constant(features.clone()), masks)?;
        Ok((*out.value()).clone())
    }

    fn fuse_regions_var<'t>(&self, tape: &'t Tape<T>, f: Var<'t, T>, masks: &RegionMaskSet<T>) -> Result<Var<'t, T>> {
        let [_, _, h, w] = f.dims();
        if masks.spatial() != (h, w) {
            return Err(Error::Mask(format!("masks are {:?}, features {h}x{w}", masks.spatial())));
        }
        let mut total: Option<Var<'t, T>> = None;
        for (mask, style) in masks.masks().iter().zip(masks.styles()) {
            let bank = self.bank(style)?;
            let part = apply_bank_var(tape.constant(bank.kernel.clone()), f.mul_mask(tape.constant(mask.clone()))?)?;
            total = Some(match total {
                None => part,
                Some(acc) => acc.add(part)?,
            });
        }
        Ok(total.expect("mask set is never empty"))
    }

    pub fn stylize_regions(&self, image: &Tensor<T>, masks: &RegionMaskSet<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ae = self.bind_autoencoder(&tape, false);
        let f = ae.encode(tape.constant(image.clone()))?;
        let fused = self.fuse_regions_var(&tape, f, masks)?;
        Ok((*ae.decode(fused)?.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(c_max: usize) -> StyleBankModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = StyleBankModel::new(ModelConfig { c_max, bank_kernel: 3 }, &mut rng).unwrap();
        m.add_bank("a", &mut rng).unwrap();
        m.add_bank("b", &mut rng).unwrap();
        m
    }

    fn image(n: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([n, 3, h, w], |_, c, y, x| ((c * 7 + y * 3 + x * 5) % 17) as f32 / 16.0)
    }

    #[test]
    fn encode_decode_shapes() {
        let m = model(16);
        let f = m.encode(&image(1, 16, 24)).unwrap();
        assert_eq!(f.dims(), [1, 16, 4, 6]);
        assert_eq!(m.decode(&f).unwrap().dims(), [1, 3, 16, 24]);
        assert!(m.encode(&image(1, 18, 16)).is_err());
        assert!(m.decode(&Tensor::zeros([1, 8, 4, 4])).is_err());
    }

    #[test]
    fn zero_inputs_give_finite_outputs() {
        let m = model(16);
        let f = m.encode(&Tensor::zeros([1, 3, 16, 16])).unwrap();
        assert!(f.is_finite());
        let out = m.decode(&Tensor::zeros([1, 16, 4, 4])).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn duplicate_and_invalid_bank_names() {
        let mut m = model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(m.add_bank("a", &mut rng), Err(Error::DuplicateStyle(_))));
        assert!(m.add_bank("x/y", &mut rng).is_err());
        assert!(matches!(m.stylize(&image(1, 8, 8), "nope"), Err(Error::UnknownStyle(_))));
    }

    #[test]
    fn even_bank_kernel_rejected() {
        assert!(FilterBank::<f32>::new("e", Tensor::zeros([2, 2, 2, 2])).is_err());
        let tape = Tape::<f32>::new();
        let k = tape.constant(Tensor::zeros([2, 2, 2, 2]));
        assert!(apply_bank_var(k, tape.constant(Tensor::zeros([1, 2, 4, 4]))).is_err());
    }

    #[test]
    fn fuse_linear_rejects_bad_input() {
        let m = model(8);
        let a = m.bank("a").unwrap();
        assert!(fuse_linear(&[a, a], &[0.0, 0.0]).is_err());
        let odd = FilterBank::<f32>::random("o", 4, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(fuse_linear(&[a, &odd], &[0.5, 0.5]).is_err());
        assert!(fuse_linear::<f32>(&[], &[]).is_err());
    }

    #[test]
    fn fuse_linear_normalizes() {
        let a = FilterBank::<f32>::new("a", Tensor::full([1, 1, 1, 1], 2.0)).unwrap();
        let b = FilterBank::<f32>::new("b", Tensor::full([1, 1, 1, 1], 4.0)).unwrap();
        let f = fuse_linear(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(f.bank.kernel.item(), 3.0);
        assert!(!f.renormalized);
        let f = fuse_linear(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert_eq!(f.bank.kernel.item(), 3.0);
        assert!(f.renormalized);
    }

    #[test]
    fn mask_set_validation() {
        let ones = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let zeros = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let s = |n: usize| (0..n).map(|i| format!("s{i}")).collect::<Vec<_>>();
        assert!(RegionMaskSet::new(vec![ones.clone()], s(1)).is_ok());
        assert!(matches!(RegionMaskSet::new(vec![ones.clone(), ones.clone()], s(2)), Err(Error::Mask(m)) if m.contains("overlap")));
        assert!(matches!(RegionMaskSet::new(vec![zeros.clone()], s(1)), Err(Error::Mask(m)) if m.contains("gap")));
        let half = Tensor::<f32>::new([1, 1, 2, 2], vec![0.5; 4]).unwrap();
        assert!(RegionMaskSet::new(vec![half], s(1)).is_err());
    }

    #[test]
    fn labels_to_masks() {
        let labels = [0, 1, 1, 0];
        let set = RegionMaskSet::<f32>::from_labels(&labels, 2, 2, &["x".into(), "y".into()]).unwrap();
        assert_eq!(set.masks()[0].data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(set.masks()[1].data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(RegionMaskSet::<f32>::from_labels(&labels, 2, 2, &["x".into()]).is_err());
    }

    #[test]
    fn majority_vote_reduction() {
        // 8x4 image: top cell all label 2; bottom cell an 8/8 tie between 0 and 1.
        let mut labels = vec![2usize; 16];
        labels.extend((0..16).map(|i| if i % 2 == 0 { 1 } else { 0 }));
        let (r, fh, fw) = reduce_labels(&labels, 8, 4).unwrap();
        assert_eq!((fh, fw), (2, 1));
        assert_eq!(r, vec![2, 0]);
        assert!(reduce_labels(&labels, 6, 4).is_err());
    }

    #[test]
    fn autoencoder_param_order_matches_mut_order() {
        let mut m = model(8);
        let dims: Vec<_> = m.autoencoder_params().iter().map(|(_, t)| t.dims()).collect();
        let dims_mut: Vec<_> = m.autoencoder_params_mut().iter().map(|t| t.dims()).collect();
        assert_eq!(dims, dims_mut);
        let tape = Tape::new();
        let vars = m.bind_autoencoder(&tape, true).vars();
        assert_eq!(vars.iter().map(|v| v.dims()).collect::<Vec<_>>(), dims);
    }
}
