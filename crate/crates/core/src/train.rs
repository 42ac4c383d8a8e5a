//! Two-branch training: `T` stylizing steps followed by one auto-encoder
//! step whose gradient is rescaled against the stylizing gradient.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::image_io::fit_long_side;
use crate::loss::{identity_loss, perceptual_loss, FeatureExtractor, LossWeights, StyleGrams, EXTRACTOR_STRIDE};
use crate::net::{apply_bank_var, ModelConfig, StyleBankModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.001,
            decay: 0.8,
            interval: 30_000,
        }
    }
}

impl LrSchedule {
    /// `initial * decay^floor(iteration / interval)`, iteration counted from 0.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.initial * self.decay.powi((iteration / self.interval.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Stylizing steps per cycle (`T`).
    pub stylizing_steps: usize,
    /// Branch tradeoff (`lambda`).
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub crop: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Style images are resized so their long side has this length.
    pub style_long_side: usize,
    pub adam: AdamConfig,
    /// Where to write the state dump if a loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stylizing_steps: 2,
            lambda: 1.0,
            batch_size: 4,
            iterations: 300,
            schedule: LrSchedule::default(),
            crop: 64,
            seed: 0,
            weights: LossWeights::default(),
            style_long_side: 128,
            adam: AdamConfig::default(),
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("TrainConfig", detail));
        if self.stylizing_steps < 1 {
            return bad("T must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.crop == 0 || self.crop % EXTRACTOR_STRIDE != 0 {
            return bad(format!("crop {} must be a positive multiple of {EXTRACTOR_STRIDE}", self.crop));
        }
        if self.style_long_side < EXTRACTOR_STRIDE {
            return bad(format!("style long side {} is too small", self.style_long_side));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.decay > 0.0 && self.schedule.interval > 0) {
            return bad(format!("bad learning-rate schedule {:?}", self.schedule));
        }
        self.weights.validate()
    }

    /// Whether 1-based `iteration` is the auto-encoder step closing its cycle.
    pub fn is_identity_step(&self, iteration: usize) -> bool {
        iteration % (self.stylizing_steps + 1) == 0
    }
}

/// Content images to crop training samples from.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("Dataset", "no content images"));
        }
        for (i, im) in images.iter().enumerate() {
            let [n, c, ..] = im.dims();
            if n != 1 || c != 3 {
                return Err(Error::invalid("Dataset", format!("image {i} has dims {:?}", im.dims())));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A random `crop x crop` window of a random image. Images smaller than
    /// the crop are first scaled up so their short side fits.
    pub fn sample_crop(&self, rng: &mut impl Rng, crop: usize) -> Result<Tensor<f32>> {
        let im = &self.images[rng.gen_range(0..self.images.len())];
        let [_, _, h, w] = im.dims();
        let scaled;
        let im = if h < crop || w < crop {
            let s = crop as f64 / h.min(w) as f64;
            let (nh, nw) = (((h as f64 * s).ceil() as usize).max(crop), ((w as f64 * s).ceil() as usize).max(crop));
            scaled = crate::image_io::resize(im, nh, nw)?;
            &scaled
        } else {
            im
        };
        let [_, _, h, w] = im.dims();
        let oy = rng.gen_range(0..=h - crop);
        let ox = rng.gen_range(0..=w - crop);
        Ok(Tensor::from_fn([1, 3, crop, crop], |_, c, y, x| im.at(0, c, oy + y, ox + x)))
    }
}

/// `m` crops and the bank index each is stylized with.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub styles: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor<f32>, styles: Vec<usize>) -> Result<Self> {
        if images.dims()[0] != styles.len() {
            return Err(Error::invalid("Batch", format!("{} images, {} style indices", images.dims()[0], styles.len())));
        }
        Ok(Self { images, styles })
    }
}

/// Gradients of one step, before any rescaling, with their global L2 norms.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub autoencoder: Vec<(String, Tensor<f32>)>,
    pub banks: Vec<(String, Tensor<f32>)>,
    /// Encoder/decoder norm of the stylizing step.
    pub norm_k: f64,
    /// Raw identity-branch norm and the norm actually applied, for identity steps.
    pub norm_i: Option<f64>,
    pub applied_norm_i: Option<f64>,
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor<f32>>) -> f64 {
    grads.into_iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Scales every array by one shared factor so the global norm becomes
/// `target`. Returns the norm before scaling; zero gradients are left alone.
pub fn rescale_to_norm(grads: &mut [Tensor<f32>], target: f64) -> f64 {
    let raw = global_norm(grads.iter());
    if raw > 0.0 {
        let s = (target / raw) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    raw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Stylize,
    Identity,
}

impl Branch {
    fn as_str(self) -> &'static str {
        match self {
            Branch::Stylize => "stylize",
            Branch::Identity => "identity",
        }
    }
}

/// One row of the metrics log. Fields that do not apply to a branch are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub branch: Branch,
    pub style_ids: Vec<usize>,
    pub content: Option<f64>,
    pub style: Option<f64>,
    pub tv: Option<f64>,
    pub identity: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm_k: Option<f64>,
    pub grad_norm_i: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,branch,style_ids,L_c,L_s,L_tv,L_I,total,lr,grad_norm_K,grad_norm_I";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let ids = self.style_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.branch.as_str(),
            ids,
            opt(self.content),
            opt(self.style),
            opt(self.tv),
            opt(self.identity),
            self.total,
            self.lr,
            opt(self.grad_norm_k),
            opt(self.grad_norm_i)
        )
    }
}

/// Append-only CSV sink; every row is flushed as it is written.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Training state: model, optimizer moments, sampler and log.
pub struct Trainer<'a> {
    pub model: StyleBankModel<f32>,
    extractor: &'a FeatureExtractor<f32>,
    dataset: Dataset,
    config: TrainConfig,
    grams: Vec<Option<StyleGrams<f32>>>,
    ae_adam: AdamState<f32>,
    bank_adam: Vec<AdamState<f32>>,
    /// Banks the sampler draws from; everything else stays fixed.
    trainable: Vec<usize>,
    freeze_autoencoder: bool,
    rng: ChaCha8Rng,
    iteration: usize,
    last_norm_k: Option<f64>,
    log: Vec<MetricsRow>,
    sink: Option<MetricsWriter>,
}

impl<'a> Trainer<'a> {
    /// Joint training over `styles`, adding a bank for every style the model lacks.
    pub fn new(
        mut model: StyleBankModel<f32>,
        extractor: &'a FeatureExtractor<f32>,
        dataset: Dataset,
        styles: &[(String, Tensor<f32>)],
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if styles.is_empty() {
            return Err(Error::invalid("train", "no styles"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut grams = vec![None; model.banks().len()];
        let mut trainable = Vec::new();
        for (name, image) in styles {
            let idx = match model.bank_index(name) {
                Ok(i) => i,
                Err(_) => model.add_bank(name, &mut rng)?,
            };
            if trainable.contains(&idx) {
                return Err(Error::DuplicateStyle(name.clone()));
            }
            grams.resize(model.banks().len(), None);
            grams[idx] = Some(style_grams(extractor, image, config.style_long_side)?);
            trainable.push(idx);
        }
        Ok(Self::assemble(model, extractor, dataset, config, grams, trainable, false, rng))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: StyleBankModel<f32>,
        extractor: &'a FeatureExtractor<f32>,
        dataset: Dataset,
        config: TrainConfig,
        grams: Vec<Option<StyleGrams<f32>>>,
        trainable: Vec<usize>,
        freeze_autoencoder: bool,
        rng: ChaCha8Rng,
    ) -> Self {
        let ae_adam = AdamState::new(model.autoencoder_params().into_iter().map(|(_, t)| t), config.adam);
        let bank_adam = model.banks().iter().map(|b| AdamState::new([&b.kernel], config.adam)).collect();
        Self {
            model,
            extractor,
            dataset,
            config,
            grams,
            ae_adam,
            bank_adam,
            trainable,
            freeze_autoencoder,
            rng,
            iteration: 0,
            last_norm_k: None,
            log: Vec::new(),
            sink: None,
        }
    }

    /// Streams every subsequent row to `path` as CSV.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let mut w = MetricsWriter::create(path)?;
        for r in &self.log {
            w.write(r)?;
        }
        self.sink = Some(w);
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn last_norm_k(&self) -> Option<f64> {
        self.last_norm_k
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        let m = self.config.batch_size;
        let mut crops = Vec::with_capacity(m);
        let mut styles = Vec::with_capacity(m);
        for _ in 0..m {
            crops.push(self.dataset.sample_crop(&mut self.rng, self.config.crop)?);
            styles.push(self.trainable[self.rng.gen_range(0..self.trainable.len())]);
        }
        Batch::new(Tensor::stack(&crops)?, styles)
    }

    /// Runs the next iteration of the schedule.
    pub fn step(&mut self) -> Result<&MetricsRow> {
        let batch = self.sample_batch()?;
        let next = self.iteration + 1;
        if !self.freeze_autoencoder && self.config.is_identity_step(next) {
            let norm_k = self.last_norm_k.expect("a stylizing step precedes every identity step");
            self.train_step_identity(&batch, norm_k)?;
        } else {
            self.train_step_stylizing(&batch)?;
        }
        Ok(self.log.last().expect("step logs a row"))
    }

    pub fn run(&mut self, iterations: usize) -> Result<()> {
        for _ in 0..iterations {
            self.step()?;
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.config.schedule.lr_at(self.iteration)
    }

    fn record(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.write(&row)?;
        }
        self.log.push(row);
        self.iteration += 1;
        Ok(())
    }

    /// Encoder -> bank -> decoder with the perceptual loss. Updates the
    /// encoder/decoder (unless frozen) and exactly the banks in `batch.styles`.
    pub fn train_step_stylizing(&mut self, batch: &Batch) -> Result<GradientSnapshot> {
        let iter = self.iteration + 1;
        for &s in &batch.styles {
            if self.grams.get(s).and_then(Option::as_ref).is_none() {
                return Err(Error::UnknownStyle(format!("bank index {s} is not being trained")));
            }
        }
        let mut touched: Vec<usize> = batch.styles.clone();
        touched.sort_unstable();
        touched.dedup();

        let tape = Tape::new();
        let ae = self.model.bind_autoencoder(&tape, !self.freeze_autoencoder);
        let bank_vars: Vec<(usize, Var<'_, f32>)> =
            touched.iter().map(|&i| (i, tape.param(self.model.banks()[i].kernel.clone()))).collect();
        let forward = || -> Result<_> {
            let x = tape.constant(batch.images.clone());
            let f = ae.encode(x)?;
            let styled = batch
                .styles
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let k = bank_vars.iter().find(|(j, _)| j == s).expect("touched bank").1;
                    apply_bank_var(k, f.batch_item(i)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = ae.decode(tape.concat_batch(&styled)?)?;
            let content = self.extractor.extract(x)?;
            let targets: Vec<&StyleGrams<f32>> =
                batch.styles.iter().map(|&s| self.grams[s].as_ref().expect("checked above")).collect();
            perceptual_loss(self.extractor, &content, &targets, out, &self.config.weights)
        };
        let loss = match forward() {
            Ok(l) => l,
            Err(Error::NonFinite { op }) => return Err(self.abort(iter, Branch::Stylize, batch, format!("non-finite output of {op}"))),
            Err(e) => return Err(e),
        };
        let total = loss.total.item() as f64;
        if !total.is_finite() {
            return Err(self.abort(iter, Branch::Stylize, batch, format!("total loss {total}")));
        }

        let mut grads = tape.backward(loss.total)?;
        let ae_vars = ae.vars();
        let ae_grads: Vec<Tensor<f32>> = if self.freeze_autoencoder {
            Vec::new()
        } else {
            ae_vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
        };
        let bank_grads: Vec<Tensor<f32>> = bank_vars.iter().map(|&(_, v)| grads.take_or_zeros(v)).collect();
        if ae_grads.iter().chain(&bank_grads).any(|g| !g.is_finite()) {
            return Err(self.abort(iter, Branch::Stylize, batch, "non-finite gradient".into()));
        }
        let norm_k = global_norm(&ae_grads);

        let lr = self.lr();
        if !self.freeze_autoencoder {
            self.ae_adam.config.lr = lr;
            let g: Vec<&Tensor<f32>> = ae_grads.iter().collect();
            self.ae_adam.apply(&mut self.model.autoencoder_params_mut(), &g)?;
        }
        for (&(idx, _), g) in bank_vars.iter().zip(&bank_grads) {
            let adam = &mut self.bank_adam[idx];
            adam.config.lr = lr;
            adam.apply(&mut [&mut self.model.bank_mut(idx).kernel], &[g])?;
        }
        if !self.freeze_autoencoder {
            self.last_norm_k = Some(norm_k);
        }

        self.record(MetricsRow {
            iter,
            branch: Branch::Stylize,
            style_ids: batch.styles.clone(),
            content: Some(loss.content),
            style: Some(loss.style),
            tv: Some(loss.tv),
            identity: None,
            total,
            lr,
            grad_norm_k: Some(norm_k),
            grad_norm_i: None,
        })?;

        let names = self.model.autoencoder_params().into_iter().map(|(n, _)| n);
        Ok(GradientSnapshot {
            autoencoder: names.zip(ae_grads).collect(),
            banks: touched
                .iter()
                .map(|&i| self.model.banks()[i].name.clone())
                .zip(bank_grads)
                .collect(),
            norm_k,
            norm_i: None,
            applied_norm_i: None,
        })
    }

    /// Encoder -> decoder with the identity loss. The raw gradient is scaled
    /// to `lambda * norm_k` before entering Adam; a zero gradient skips the update.
    pub fn train_step_identity(&mut self, batch: &Batch, norm_k: f64) -> Result<GradientSnapshot> {
        let iter = self.iteration + 1;
        if self.freeze_autoencoder {
            return Err(Error::invalid("train_step_identity", "encoder and decoder are frozen"));
        }
        let tape = Tape::new();
        let ae = self.model.bind_autoencoder(&tape, true);
        let forward = || -> Result<_> {
            let x = tape.constant(batch.images.clone());
            let out = ae.decode(ae.encode(x)?)?;
            identity_loss(x, out)
        };
        let loss = match forward() {
            Ok(l) => l,
            Err(Error::NonFinite { op }) => return Err(self.abort(iter, Branch::Identity, batch, format!("non-finite output of {op}"))),
            Err(e) => return Err(e),
        };
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(self.abort(iter, Branch::Identity, batch, format!("identity loss {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut ae_grads: Vec<Tensor<f32>> = ae.vars().iter().map(|&v| grads.take_or_zeros(v)).collect();
        if ae_grads.iter().any(|g| !g.is_finite()) {
            return Err(self.abort(iter, Branch::Identity, batch, "non-finite gradient".into()));
        }
        let target = self.config.lambda * norm_k;
        let raw = rescale_to_norm(&mut ae_grads, target);
        let lr = self.lr();
        let applied = if raw == 0.0 {
            log::warn!("iteration {iter}: identity gradient is zero, skipping update");
            0.0
        } else {
            self.ae_adam.config.lr = lr;
            let g: Vec<&Tensor<f32>> = ae_grads.iter().collect();
            self.ae_adam.apply(&mut self.model.autoencoder_params_mut(), &g)?;
            global_norm(&ae_grads)
        };

        self.record(MetricsRow {
            iter,
            branch: Branch::Identity,
            style_ids: Vec::new(),
            content: None,
            style: None,
            tv: None,
            identity: Some(value),
            total: value,
            lr,
            grad_norm_k: Some(norm_k),
            grad_norm_i: Some(raw),
        })?;

        let names = self.model.autoencoder_params().into_iter().map(|(n, _)| n);
        Ok(GradientSnapshot {
            autoencoder: names.zip(ae_grads).collect(),
            banks: Vec::new(),
            norm_k,
            norm_i: Some(raw),
            applied_norm_i: Some(applied),
        })
    }

    /// Builds the error for a non-finite value, writing the pre-update model
    /// and batch description to `dump_dir` when configured.
    fn abort(&self, iter: usize, branch: Branch, batch: &Batch, detail: String) -> Error {
        let mut detail = detail;
        if let Some(dir) = &self.config.dump_dir {
            let dumped = (|| -> Result<PathBuf> {
                std::fs::create_dir_all(dir)?;
                let model_path = dir.join(format!("nan-iter{iter}.sbnk"));
                save_model(&model_path, &self.model, None)?;
                let info = serde_json::json!({
                    "iter": iter,
                    "branch": branch,
                    "styles": batch.styles,
                    "batch_dims": batch.images.dims(),
                    "batch_finite": batch.images.is_finite(),
                    "lr": self.lr(),
                    "last_norm_k": self.last_norm_k,
                });
                std::fs::write(dir.join(format!("nan-iter{iter}.json")), serde_json::to_string_pretty(&info)?)?;
                Ok(model_path)
            })();
            match dumped {
                Ok(p) => detail = format!("{detail}; state dumped to {}", p.display()),
                Err(e) => detail = format!("{detail}; dump failed: {e}"),
            }
        }
        log::error!("iteration {iter} ({}): {detail}", branch.as_str());
        Error::NonFiniteLoss {
            iter,
            branch: branch.as_str(),
            detail,
        }
    }
}

fn style_grams(extractor: &FeatureExtractor<f32>, image: &Tensor<f32>, long_side: usize) -> Result<StyleGrams<f32>> {
    StyleGrams::from_image(extractor, &fit_long_side(image, long_side)?)
}

pub struct TrainOutput {
    pub model: StyleBankModel<f32>,
    pub log: Vec<MetricsRow>,
}

/// Fresh model trained jointly on every style for `config.iterations` iterations.
pub fn train(
    model_config: ModelConfig,
    extractor: &FeatureExtractor<f32>,
    dataset: Dataset,
    styles: &[(String, Tensor<f32>)],
    config: TrainConfig,
) -> Result<TrainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = StyleBankModel::new(model_config, &mut rng)?;
    let iterations = config.iterations;
    let mut trainer = Trainer::new(model, extractor, dataset, styles, config)?;
    trainer.run(iterations)?;
    Ok(TrainOutput {
        log: trainer.log,
        model: trainer.model,
    })
}

/// Appends a bank for `name` and trains only that bank, encoder and decoder frozen.
pub fn add_style_incremental<'a>(
    model: StyleBankModel<f32>,
    extractor: &'a FeatureExtractor<f32>,
    dataset: Dataset,
    name: &str,
    style_image: &Tensor<f32>,
    config: TrainConfig,
) -> Result<Trainer<'a>> {
    config.validate()?;
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let idx = model.add_bank(name, &mut rng)?;
    let mut grams = vec![None; model.banks().len()];
    grams[idx] = Some(style_grams(extractor, style_image, config.style_long_side)?);
    Ok(Trainer::assemble(model, extractor, dataset, config, grams, vec![idx], true, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert!((s.lr_at(30_000) - 0.0008).abs() < 1e-15);
        assert!((s.lr_at(59_999) - 0.0008).abs() < 1e-15);
        assert!((s.lr_at(60_000) - 0.00064).abs() < 1e-15);
    }

    #[test]
    fn cycle_positions() {
        let c = TrainConfig::default();
        let kinds: Vec<bool> = (1..=6).map(|i| c.is_identity_step(i)).collect();
        assert_eq!(kinds, [false, false, true, false, false, true]);
    }

    #[test]
    fn rescale_arithmetic() {
        let mut g = vec![Tensor::from_fn([1, 1, 1, 2], |_, _, _, x| if x == 0 { 0.0 } else { 4.0 })];
        let raw = rescale_to_norm(&mut g, 2.0);
        assert_eq!(raw, 4.0);
        assert_eq!(g[0].data(), &[0.0, 2.0]);
        let mut z = vec![Tensor::<f32>::zeros([1, 1, 1, 2])];
        assert_eq!(rescale_to_norm(&mut z, 2.0), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { stylizing_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop: 60, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn csv_row_format() {
        let row = MetricsRow {
            iter: 3,
            branch: Branch::Identity,
            style_ids: vec![],
            content: None,
            style: None,
            tv: None,
            identity: Some(0.25),
            total: 0.25,
            lr: 0.01,
            grad_norm_k: Some(2.0),
            grad_norm_i: Some(4.0),
        };
        assert_eq!(row.to_csv(), "3,identity,,,,,0.25,0.25,0.01,2,4");
        let row = MetricsRow { branch: Branch::Stylize, style_ids: vec![0, 1, 1], ..row };
        assert!(row.to_csv().starts_with("3,stylize,0;1;1,"));
    }
}
