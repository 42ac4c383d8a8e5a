//! Identity and perceptual losses over a fixed feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tensor};

pub const STYLE_TAPS: [&str; 4] = ["L1", "L2", "L3", "L4"];
pub const CONTENT_TAPS: [&str; 1] = ["L4"];
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED;

/// Input sides must be divisible by this: three stride-2 stages.
pub const EXTRACTOR_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConv<T: Real = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Four stages of two 3x3 convolutions with ReLU; the first convolution of
/// stages 2-4 has stride 2. Stage outputs are the taps `L1..L4`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T: Real = f32> {
    convs: Vec<ExtractorConv<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 16, 32, 32, 64, 64, 128, 128];
        let convs = widths
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                // He-uniform keeps activations from fading through the ReLU stack.
                let bound = (6.0 / (ci * 9) as f64).sqrt();
                ExtractorConv {
                    kernel: Tensor::from_fn([co, ci, 3, 3], |_, _, _, _| T::from_f64c(rng.gen_range(-bound..=bound))),
                    bias: Tensor::zeros([1, co, 1, 1]),
                }
            })
            .collect();
        Self { convs }
    }

    /// Builds from `extractor/convN/{kernel,bias}` entries, N = 1..=8.
    pub fn from_named<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<Self> {
        let mut kernels: Vec<Option<Tensor<T>>> = vec![None; 8];
        let mut biases: Vec<Option<Tensor<T>>> = vec![None; 8];
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix("extractor/conv") else {
                continue;
            };
            let (idx, field) = rest
                .split_once('/')
                .and_then(|(i, f)| i.parse::<usize>().ok().map(|i| (i, f)))
                .filter(|(i, _)| (1..=8).contains(i))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected extractor entry `{name}`")))?;
            let slot = match field {
                "kernel" => &mut kernels[idx - 1],
                "bias" => &mut biases[idx - 1],
                _ => return Err(Error::Checkpoint(format!("unexpected extractor entry `{name}`"))),
            };
            *slot = Some(t.clone());
        }
        let mut convs = Vec::with_capacity(8);
        let mut channels = 3;
        for (i, (k, b)) in kernels.into_iter().zip(biases).enumerate() {
            let kernel = k.ok_or_else(|| Error::Checkpoint(format!("missing extractor/conv{}/kernel", i + 1)))?;
            let [co, ci, kh, kw] = kernel.dims();
            if ci != channels || kh != kw || kh % 2 == 0 {
                return Err(Error::Checkpoint(format!(
                    "extractor/conv{} kernel {:?} does not follow {channels} input channels with an odd square window",
                    i + 1,
                    kernel.dims()
                )));
            }
            let bias = b.unwrap_or_else(|| Tensor::zeros([1, co, 1, 1]));
            if bias.dims() != [1, co, 1, 1] {
                return Err(Error::Checkpoint(format!("extractor/conv{} bias {:?}", i + 1, bias.dims())));
            }
            channels = co;
            convs.push(ExtractorConv { kernel, bias });
        }
        Ok(Self { convs })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("extractor/conv{}/kernel", i + 1), &c.kernel),
                    (format!("extractor/conv{}/bias", i + 1), &c.bias),
                ]
            })
            .collect()
    }

    pub fn convs(&self) -> &[ExtractorConv<T>] {
        &self.convs
    }

    /// Runs the stack on the tape. Weights enter as constants, so gradients
    /// reach the input but never the extractor.
    pub fn extract<'t>(&self, image: Var<'t, T>) -> Result<PyramidVars<'t, T>> {
        let [_, c, h, w] = image.dims();
        if c != 3 {
            return Err(Error::shape("extract", format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % EXTRACTOR_STRIDE != 0 || w % EXTRACTOR_STRIDE != 0 {
            return Err(Error::shape("extract", format!("{h}x{w} is not divisible by {EXTRACTOR_STRIDE}")));
        }
        let tape = image.tape();
        let mut x = image;
        let mut taps = Vec::with_capacity(4);
        for (i, conv) in self.convs.iter().enumerate() {
            let stride = if i >= 2 && i % 2 == 0 { 2 } else { 1 };
            let k = conv.kernel.dims()[2];
            x = x
                .conv2d(tape.constant(conv.kernel.clone()), stride, Padding::Zero(k / 2))?
                .add_bias(tape.constant(conv.bias.clone()))?
                .relu()?;
            if i % 2 == 1 {
                taps.push((STYLE_TAPS[i / 2], x));
            }
        }
        Ok(taps.into())
    }

    /// Tape-free evaluation.
    pub fn pyramid(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let tape = Tape::new();
        Ok(self.extract(tape.constant(image.clone()))?.detach())
    }
}

/// Extractor activations living on a tape.
#[derive(Clone, Copy)]
pub struct PyramidVars<'t, T: Real = f32> {
    taps: [(&'static str, Var<'t, T>); 4],
}

impl<'t, T: Real> PyramidVars<'t, T> {
    fn tap(&self, name: &str) -> Var<'t, T> {
        self.taps.iter().find(|(n, _)| *n == name).expect("fixed tap set").1
    }

    pub fn taps(&self) -> impl Iterator<Item = (&'static str, Var<'t, T>)> + '_ {
        self.taps.iter().copied()
    }

    pub fn detach(&self) -> FeaturePyramid<T> {
        FeaturePyramid {
            taps: self.taps.iter().map(|(n, v)| (n.to_string(), (*v.value()).clone())).collect(),
        }
    }
}

/// Expects exactly the four taps in `L1..L4` order.
impl<'t, T: Real> From<Vec<(&'static str, Var<'t, T>)>> for PyramidVars<'t, T> {
    fn from(v: Vec<(&'static str, Var<'t, T>)>) -> Self {
        let taps: [(&'static str, Var<'t, T>); 4] = v.try_into().ok().expect("four taps");
        assert!(taps.iter().map(|(n, _)| *n).eq(STYLE_TAPS), "taps out of order");
        Self { taps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    taps: Vec<(String, Tensor<T>)>,
}

impl<T: Real> FeaturePyramid<T> {
    /// Keys must be exactly `L1..L4`, in any order.
    pub fn new(taps: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names: Vec<&str> = taps.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if names != STYLE_TAPS {
            return Err(Error::TapMismatch(format!("taps {names:?}, expected {STYLE_TAPS:?}")));
        }
        Ok(Self { taps })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::TapMismatch(format!("no tap `{name}`")))
    }

    /// Places every tap on `tape` as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> PyramidVars<'t, T> {
        let taps = STYLE_TAPS
            .iter()
            .map(|&n| (n, tape.constant(self.get(n).expect("keys checked on construction").clone())))
            .collect::<Vec<_>>();
        taps.into()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.taps.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Gram matrices of a style image at every style tap, one batch item each.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleGrams<T: Real = f32> {
    grams: Vec<(String, Tensor<T>)>,
}

impl<T: Real> StyleGrams<T> {
    pub fn from_pyramid(pyramid: &FeaturePyramid<T>) -> Result<Self> {
        let tape = Tape::new();
        let grams = STYLE_TAPS
            .iter()
            .map(|&name| {
                let f = pyramid.get(name)?;
                if f.dims()[0] != 1 {
                    return Err(Error::shape("style grams", format!("style pyramid has batch {}", f.dims()[0])));
                }
                let g = tape.constant(f.clone()).gram()?;
                Ok((name.to_string(), (*g.value()).clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { grams })
    }

    pub fn from_image(extractor: &FeatureExtractor<T>, image: &Tensor<T>) -> Result<Self> {
        Self::from_pyramid(&extractor.pyramid(image)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.grams
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::TapMismatch(format!("no Gram for tap `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            gamma: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("LossWeights", format!("weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("LossWeights", "all weights are zero"));
        }
        Ok(())
    }
}

fn check_taps<T: Real>(a: Var<'_, T>, b: Var<'_, T>, tap: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::TapMismatch(format!("tap {tap}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared feature difference summed over the content taps.
pub fn content_loss<'t, T: Real>(out: &PyramidVars<'t, T>, reference: &PyramidVars<'t, T>) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for tap in CONTENT_TAPS {
        let (a, b) = (out.tap(tap), reference.tap(tap));
        check_taps(a, b, tap)?;
        let term = a.mse(b)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.expect("at least one content tap"))
}

/// Mean squared Gram difference summed over the style taps. `targets[i]` is
/// the style of batch item `i`; a single entry is broadcast to the batch.
pub fn style_loss<'t, T: Real>(out: &PyramidVars<'t, T>, targets: &[&StyleGrams<T>]) -> Result<Var<'t, T>> {
    let tape = out.tap(STYLE_TAPS[0]).tape();
    let n = out.tap(STYLE_TAPS[0]).dims()[0];
    if targets.len() != 1 && targets.len() != n {
        return Err(Error::TapMismatch(format!("{} style targets for a batch of {n}", targets.len())));
    }
    let mut total: Option<Var<'t, T>> = None;
    for tap in STYLE_TAPS {
        let g = out.tap(tap).gram()?;
        let per_item = (0..n)
            .map(|i| targets[if targets.len() == 1 { 0 } else { i }].get(tap).cloned())
            .collect::<Result<Vec<_>>>()?;
        let target = tape.constant(Tensor::stack(&per_item)?);
        check_taps(g, target, tap)?;
        let term = g.mse(target)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.expect("at least one style tap"))
}

pub fn identity_loss<'t, T: Real>(input: Var<'t, T>, output: Var<'t, T>) -> Result<Var<'t, T>> {
    output.mse(input)
}

/// Perceptual loss and its unweighted parts, for logging.
pub struct PerceptualLoss<'t, T: Real = f32> {
    pub total: Var<'t, T>,
    pub content: f64,
    pub style: f64,
    pub tv: f64,
}

/// `alpha * L_c + beta * L_s + gamma * L_tv`. Terms with zero weight are left out of the graph.
pub fn perceptual_loss<'t, T: Real>(
    extractor: &FeatureExtractor<T>,
    content: &PyramidVars<'t, T>,
    styles: &[&StyleGrams<T>],
    output: Var<'t, T>,
    weights: &LossWeights,
) -> Result<PerceptualLoss<'t, T>> {
    weights.validate()?;
    let out_pyr = extractor.extract(output)?;
    let lc = content_loss(&out_pyr, content)?;
    let ls = style_loss(&out_pyr, styles)?;
    let lt = output.tv_loss()?;
    let mut total: Option<Var<'t, T>> = None;
    for (w, term) in [(weights.alpha, lc), (weights.beta, ls), (weights.gamma, lt)] {
        if w == 0.0 {
            continue;
        }
        let scaled = term.scale(T::from_f64c(w))?;
        total = Some(match total {
            None => scaled,
            Some(acc) => acc.add(scaled)?,
        });
    }
    Ok(PerceptualLoss {
        total: total.expect("validated weights are not all zero"),
        content: lc.item().to_f64c(),
        style: ls.item().to_f64c(),
        tv: lt.item().to_f64c(),
    })
}
