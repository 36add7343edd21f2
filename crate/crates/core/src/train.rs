//! Alternating discriminator/generator optimization, step logging and the
//! overfit smoke run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::autograd::Tape;
use crate::data::{self, Batch, Batcher, MaskSpec};
use crate::error::{Error, Result};
use crate::losses::{hinge_d, hinge_g, pyramid_l1_checked, total_objective, Lambdas};
use crate::mask::BinaryMask;
use crate::model::{Discriminator, Generator, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::sample::ImageSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    #[serde(default)]
    pub lambdas: Lambdas,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_interval: u64,
    pub mask: MaskSpec,
    /// Dataset manifest for `train`; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Where checkpoints and logs go; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Mini model at 128², two images per batch, 64×64 center holes.
    pub fn mini() -> Self {
        TrainConfig {
            model: ModelConfig::mini(),
            batch_size: 2,
            lambdas: Lambdas::default(),
            optimizer: AdamConfig::default(),
            max_steps: 500,
            seed: 0,
            checkpoint_interval: 0,
            mask: MaskSpec::center(64),
            manifest: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lambdas.validate()?;
        let o = &self.optimizer;
        if !(o.lr_generator > 0.0 && o.lr_discriminator > 0.0 && o.eps > 0.0) {
            return Err(Error::config("learning rates and epsilon must be positive"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("moment coefficients must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.mask.validate(self.model.resolution)
    }

    /// Parses and validates a JSON config. Relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = serde_json::from_str(text)?;
        for p in [&mut cfg.manifest, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(src) = cfg.mask.source_path.as_mut() {
            if src.is_relative() {
                *src = base.join(&*src);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = params.clone();
        m.zero_all();
        Adam {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Losses and timing of one [`TrainState::train_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_pd: f64,
    pub loss_g: f64,
    pub wall_ms: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} L_D={:.6} L_G_adv={:.6} L_pd={:.6} wall_ms={:.1}",
            self.step, self.loss_d, self.loss_g_adv, self.loss_pd, self.wall_ms
        )
    }
}

/// Everything training mutates: both networks, their optimizers and the step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub step: u64,
}

fn gradients_by_name(bound: &Bound<'_>, grads: &crate::autograd::Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .map(|(name, var)| (name.clone(), grads.get_or_zeros(*var)))
        .collect()
}

fn check_finite(step: u64, batch: &Batch, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        batch_id: batch.ids.join(","),
        detail: values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" "),
    })
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::with_rng(config.model.clone(), &mut rng)?;
        let discriminator = Discriminator::with_rng(config.model.clone(), &mut rng)?;
        Ok(TrainState {
            g_opt: Adam::new(&generator.params),
            d_opt: Adam::new(&discriminator.params),
            config,
            generator,
            discriminator,
            step: 0,
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// One discriminator update on real images and frozen generator
    /// composites, then one generator update on the joint objective.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        let start = Instant::now();
        let masks: Vec<&BinaryMask> = batch.masks.iter().collect();
        let opt = self.config.optimizer;

        let (_, composed) = self.generator.generate(&batch.images, &masks)?;
        let loss_d = {
            let tape = Tape::new();
            let dp = self.discriminator.params.bind(&tape);
            self.discriminator.power_iterate();
            let real = self.discriminator.forward(&dp, tape.constant(batch.images.clone()))?;
            self.discriminator.power_iterate();
            let fake = self.discriminator.forward(&dp, tape.constant(composed))?;
            let loss = hinge_d(real, fake);
            let value = loss.value().item();
            check_finite(self.step, batch, &[("L_D", value)])?;
            let grads = gradients_by_name(&dp, &tape.backward(loss));
            self.d_opt.step(
                &mut self.discriminator.params,
                &grads,
                opt.lr_discriminator,
                &opt,
            );
            value
        };

        let (loss_g_adv, loss_pd, loss_g) = {
            let tape = Tape::new();
            let gp = self.generator.params.bind(&tape);
            let dp = self.discriminator.params.bind_frozen(&tape);
            let pass = self.generator.forward(&gp, &batch.images, &masks, None)?;
            self.discriminator.power_iterate();
            let logits = self.discriminator.forward(&dp, pass.composed)?;
            let adv = hinge_g(logits);
            let pd = pyramid_l1_checked(&pass.outputs, &batch.images, self.generator.depth() - 1)?;
            let (adv_v, pd_v) = (adv.value().item(), pd.value().item());
            let total = total_objective(adv, pd, self.config.lambdas)?;
            let total_v = total.value().item();
            check_finite(
                self.step,
                batch,
                &[("L_D", loss_d), ("L_G_adv", adv_v), ("L_pd", pd_v)],
            )?;
            let grads = gradients_by_name(&gp, &tape.backward(total));
            self.g_opt
                .step(&mut self.generator.params, &grads, opt.lr_generator, &opt);
            (adv_v, pd_v, total_v)
        };

        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss_d,
            loss_g_adv,
            loss_pd,
            loss_g,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Mean absolute error between the generator's full-resolution prediction
/// and the images, over hole pixels of every channel.
pub fn masked_mae(generator: &Generator, images: &Tensor, masks: &[&BinaryMask]) -> Result<f64> {
    let (outputs, _) = generator.generate(images, masks)?;
    let pred = outputs.finest();
    let (n, c, h, w) = pred.dims4();
    let (mut acc, mut count) = (0.0, 0usize);
    for (b, mask) in masks.iter().enumerate().take(n) {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    for ch in 0..c {
                        acc += (pred.at4(b, ch, y, x) - images.at4(b, ch, y, x)).abs();
                    }
                    count += c;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::config("masked error needs at least one hole pixel"));
    }
    Ok(acc / count as f64)
}

/// Smooth synthetic RGB images: sums of a few low-frequency sinusoids per channel.
pub fn synthetic_images(count: usize, resolution: usize, seed: u64) -> Result<Vec<ImageSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    (0..count)
        .map(|i| {
            let mut t = Tensor::zeros(&[1, 3, resolution, resolution]);
            for c in 0..3 {
                let base: f64 = rng.random_range(-0.4..0.4);
                let waves: Vec<(f64, f64, f64, f64)> = (0..2)
                    .map(|_| {
                        (
                            rng.random_range(0.5..2.0),
                            rng.random_range(0.5..2.0),
                            rng.random_range(0.0..tau),
                            rng.random_range(0.1..0.25),
                        )
                    })
                    .collect();
                for y in 0..resolution {
                    for x in 0..resolution {
                        let (u, v) = (x as f64 / resolution as f64, y as f64 / resolution as f64);
                        let s: f64 = waves
                            .iter()
                            .map(|(fx, fy, ph, a)| a * (tau * (fx * u + fy * v) + ph).sin())
                            .sum();
                        t.set4(0, c, y, x, (base + s).clamp(-1.0, 1.0));
                    }
                }
            }
            ImageSample::new(t, "synthetic", format!("synthetic-{i}"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeConfig {
    pub train: TrainConfig,
    pub images: usize,
    pub steps: u64,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            train: TrainConfig::mini(),
            images: 8,
            steps: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeReport {
    pub steps: u64,
    pub images: usize,
    pub batch_size: usize,
    pub initial_masked_mae: f64,
    pub final_masked_mae: f64,
    pub ratio: f64,
    pub wall_secs: f64,
    pub losses: Vec<StepLog>,
}

impl SmokeReport {
    pub fn passed(&self) -> bool {
        self.ratio <= 0.5 && self.losses.iter().all(|l| l.loss_d.is_finite() && l.loss_g.is_finite())
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,loss_d,loss_g_adv,loss_pd,loss_g,wall_ms\n");
        for l in &self.losses {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.step, l.loss_d, l.loss_g_adv, l.loss_pd, l.loss_g, l.wall_ms
            ));
        }
        out
    }
}

/// Side-by-side strip per image: masked input, composite, ground truth.
fn composite_strip(generator: &Generator, images: &Tensor, masks: &[&BinaryMask]) -> Result<image::RgbImage> {
    let (_, composed) = generator.generate(images, masks)?;
    let (n, _, h, w) = images.dims4();
    let mut strip = image::RgbImage::new(3 * w as u32, (n * h) as u32);
    for (b, mask) in masks.iter().enumerate() {
        let holes = mask.to_tensor(3);
        let masked = images
            .batch_item(b)
            .zip_map(&holes, |x, m| if m == 1.0 { 1.0 } else { x });
        let tiles = [
            data::tensor_to_rgb(&masked, 0),
            data::tensor_to_rgb(&composed, b),
            data::tensor_to_rgb(images, b),
        ];
        for (k, tile) in tiles.iter().enumerate() {
            image::imageops::replace(&mut strip, tile, (k * w) as i64, (b * h) as i64);
        }
    }
    Ok(strip)
}

/// Trains on a fixed synthetic set and compares the masked-region error
/// before and after. Writes `loss_curve.csv`, `report.json`, `before.png`,
/// `after.png` and `checkpoint.pennet` into `out_dir` when given.
pub fn overfit_smoke(
    config: &SmokeConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(SmokeReport, TrainState)> {
    let start = Instant::now();
    let train = &config.train;
    let res = train.model.resolution;
    let samples = synthetic_images(config.images, res, train.seed)?;
    let all = Tensor::stack_batch(&samples.iter().map(|s| s.pixels().clone()).collect::<Vec<_>>())?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let eval_masks = (0..config.images)
        .map(|_| train.mask.generate(res, &mut mask_rng))
        .collect::<Result<Vec<_>>>()?;
    let eval_refs: Vec<&BinaryMask> = eval_masks.iter().collect();

    let mut state = TrainState::new(train.clone())?;
    let initial = masked_mae(&state.generator, &all, &eval_refs)?;
    let before = composite_strip(&state.generator, &all, &eval_refs)?;
    let mut batcher = Batcher::new(samples, train.mask.clone(), train.batch_size, train.seed)?;
    let mut losses = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let batch = batcher.next_batch()?;
        let log = state.train_step(&batch)?;
        on_step(&log);
        losses.push(log);
    }
    let fin = masked_mae(&state.generator, &all, &eval_refs)?;
    let report = SmokeReport {
        steps: config.steps,
        images: config.images,
        batch_size: train.batch_size,
        initial_masked_mae: initial,
        final_masked_mae: fin,
        ratio: fin / initial,
        wall_secs: start.elapsed().as_secs_f64(),
        losses,
    };
    info!(
        initial = report.initial_masked_mae,
        r#final = report.final_masked_mae,
        ratio = report.ratio,
        "overfit smoke finished"
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss_curve.csv"), report.loss_curve_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        before.save(dir.join("before.png"))?;
        composite_strip(&state.generator, &all, &eval_refs)?.save(dir.join("after.png"))?;
        crate::checkpoint::save_checkpoint(&state, &dir.join("checkpoint.pennet"))?;
    }
    Ok((report, state))
}

/// Runs `config.max_steps` steps over `samples`, saving checkpoints into
/// `out_dir` every `checkpoint_interval` steps and at the end.
pub fn train(
    state: &mut TrainState,
    samples: Vec<ImageSample>,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = state.config.clone();
    let mut batcher = Batcher::new(samples, cfg.mask.clone(), cfg.batch_size, cfg.seed.wrapping_add(state.step))?;
    while state.step < cfg.max_steps {
        let batch = batcher.next_batch()?;
        let log = state.train_step(&batch)?;
        on_step(&log);
        if cfg.checkpoint_interval > 0 && state.step.is_multiple_of(cfg.checkpoint_interval) {
            let path = out_dir.join(format!("checkpoint-{:06}.pennet", state.step));
            crate::checkpoint::save_checkpoint(state, &path)?;
        }
    }
    let last = out_dir.join("checkpoint-final.pennet");
    crate::checkpoint::save_checkpoint(state, &last)?;
    Ok(last)
}
