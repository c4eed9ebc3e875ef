//! Alternating LSGAN optimization with schedules, clipping, early stopping
//! and resumable run directories.

mod optim;
mod run;

pub use optim::{adamw_update, clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use run::{RunPaths, StepLog, ValidationLog};

use std::collections::BTreeMap;

use ndarray::{s, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{make_batch, StemLibrary, TrainBatch};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    feature_matching_loss, generator_total, lsgan_disc_loss, lsgan_gen_loss, multires_rec_loss, LossReport,
};
use crate::nn::{Array, ParameterStore, Tape, Var};

pub const GEN_PREFIX: &str = "gen/";
pub const DISC_PREFIX: &str = "disc/";
const VALIDATION_SEED_SALT: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_decay_every_epochs: usize,
    pub grad_clip_norm: f64,
    pub early_stop_patience: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub validation_batches: usize,
    /// Initial steps trained with the adversarial weight forced to 0.
    pub warmup_steps: u64,
    pub prefetch: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gen_lr: 1e-3,
            disc_lr: 1e-4,
            weight_decay: 0.01,
            lr_decay: 0.98,
            lr_decay_every_epochs: 2,
            grad_clip_norm: 5.0,
            early_stop_patience: 20,
            epochs: 200,
            batch_size: 4,
            steps_per_epoch: 1000,
            validation_batches: 8,
            warmup_steps: 0,
            prefetch: 4,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("gen_lr", self.gen_lr),
            ("disc_lr", self.disc_lr),
            ("grad_clip_norm", self.grad_clip_norm),
            ("lr_decay", self.lr_decay),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight_decay must be >= 0"));
        }
        for (k, v) in [
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
            ("steps_per_epoch", self.steps_per_epoch),
            ("lr_decay_every_epochs", self.lr_decay_every_epochs),
            ("prefetch", self.prefetch),
        ] {
            if v == 0 {
                return Err(Error::arg(format!("{k} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed epochs.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay.powi((epoch / self.lr_decay_every_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub best_val: Option<f64>,
    pub stale_epochs: usize,
    /// Batches for step `k` come from rng stream `k` of the run seed.
    pub seed: u64,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_val: None,
            stale_epochs: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossReport,
    /// Global norms before clipping.
    pub gen_grad_norm: f64,
    pub disc_grad_norm: f64,
    pub gen_lr: f64,
    pub disc_lr: f64,
}

/// Independent rng for the batch of training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

fn validation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    step_rng(seed ^ VALIDATION_SEED_SALT, index)
}

pub struct Trainer {
    cfg: RunConfig,
    gen: Generator,
    disc: Discriminator,
    params: ParameterStore,
    opt_g: AdamW,
    opt_d: AdamW,
    state: TrainState,
}

fn wave_var<'t>(tape: &'t Tape, wave: ndarray::ArrayView1<f64>) -> Var<'t> {
    tape.constant(Array::from_shape_vec(IxDyn(&[wave.len()]), wave.to_vec()).unwrap())
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(Var::sum_all(terms)?.scale(1.0 / terms.len() as f64))
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.stft, cfg.generator.clone())?;
        let disc = Discriminator::new(cfg.discriminator.clone(), cfg.stft.sample_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
        let mut params = gen.init_params(&mut rng)?;
        params.extend(disc.init_params(&mut rng)?)?;
        let t = &cfg.trainer;
        Ok(Self {
            opt_g: AdamW::new(t.adam, t.weight_decay),
            opt_d: AdamW::new(t.adam, t.weight_decay),
            state: TrainState::new(t.seed),
            gen,
            disc,
            params,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn gen_lr(&self) -> f64 {
        self.cfg.trainer.lr_at(self.cfg.trainer.gen_lr, self.state.epoch)
    }

    pub fn disc_lr(&self) -> f64 {
        self.cfg.trainer.lr_at(self.cfg.trainer.disc_lr, self.state.epoch)
    }

    fn uses_discriminator(&self) -> bool {
        let w = &self.cfg.losses.weights;
        w.beta > 0.0 || w.gamma > 0.0
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let weights = self.cfg.losses.weights;
        let mut gw = weights;
        if self.state.step < self.cfg.trainer.warmup_steps {
            gw.gamma = 0.0;
        }
        let use_disc = self.uses_discriminator();
        let (gen_lr, disc_lr) = (self.gen_lr(), self.disc_lr());
        let sr = self.cfg.stft.sample_rate;
        let clip = self.cfg.trainer.grad_clip_norm;
        let n = batch.len();

        let tape = Tape::new();
        let gen_store = self.params.subset(GEN_PREFIX);
        let gp = gen_store.bind(&tape);
        let mut fakes = Vec::with_capacity(n);
        for i in 0..n {
            let x = wave_var(&tape, batch.degraded.slice(s![i, 0, ..]));
            let y = self.gen.forward(&gp, x)?;
            if let Some(v) = y.value().iter().find(|v| !v.is_finite()) {
                return Err(self.non_finite("generator output", *v));
            }
            fakes.push(y);
        }

        let mut l_disc = 0.0;
        let mut disc_grad_norm = 0.0;
        if use_disc {
            self.disc.power_iterate(&mut self.params, 1)?;
            let dtape = Tape::new();
            let dstore = self.params.subset(DISC_PREFIX);
            let dp = dstore.bind(&dtape);
            let mut terms = Vec::with_capacity(n);
            for (i, fake) in fakes.iter().enumerate() {
                let real = wave_var(&dtape, batch.target.slice(s![i, 0, ..]));
                let fake = dtape.constant_shared(fake.value());
                let ro = self.disc.ensemble_forward(&dp, real)?;
                let fo = self.disc.ensemble_forward(&dp, fake)?;
                let rs: Vec<Var> = ro.iter().map(|o| o.score).collect();
                let fs: Vec<Var> = fo.iter().map(|o| o.score).collect();
                terms.push(lsgan_disc_loss(&rs, &fs)?);
            }
            let loss = mean_of(&terms)?;
            l_disc = loss.item();
            if !l_disc.is_finite() {
                return Err(self.non_finite("l_disc", l_disc));
            }
            let g = dtape.backward(loss)?;
            let mut grads = dp.gradients(&g);
            disc_grad_norm = clip_grad_norm(&mut grads, clip);
            self.opt_d.step(&mut self.params, &grads, disc_lr)?;
        }

        let dstore = self.params.subset(DISC_PREFIX);
        let dp = dstore.bind_frozen(&tape);
        let (mut rec, mut fm, mut adv) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &fake) in fakes.iter().enumerate() {
            let target = wave_var(&tape, batch.target.slice(s![i, 0, ..]));
            rec.push(multires_rec_loss(
                fake,
                target,
                &self.cfg.losses.rec_windows,
                self.cfg.losses.rec_normalized,
                sr,
            )?);
            if gw.beta > 0.0 || gw.gamma > 0.0 {
                let fo = self.disc.ensemble_forward(&dp, fake)?;
                let ro = self.disc.ensemble_forward(&dp, target)?;
                let fs: Vec<Var> = fo.iter().map(|o| o.score).collect();
                adv.push(lsgan_gen_loss(&fs)?);
                let fh: Vec<Vec<Var>> = fo.into_iter().map(|o| o.hidden).collect();
                let rh: Vec<Vec<Var>> = ro.into_iter().map(|o| o.hidden).collect();
                fm.push(feature_matching_loss(&fh, &rh)?);
            }
        }
        let l_rec = mean_of(&rec)?;
        let zero = tape.scalar(0.0);
        let l_fm = if fm.is_empty() { zero } else { mean_of(&fm)? };
        let l_gan = if adv.is_empty() { zero } else { mean_of(&adv)? };
        let total = generator_total(l_rec, l_fm, l_gan, &gw)?;
        let losses = LossReport {
            l_rec: l_rec.item(),
            l_fm: l_fm.item(),
            l_gan: l_gan.item(),
            l_total: total.item(),
            l_disc,
        };
        if !losses.is_finite() {
            return Err(self.non_finite("generator loss", losses.l_total));
        }
        let g = tape.backward(total)?;
        let mut grads = gp.gradients(&g);
        let gen_grad_norm = clip_grad_norm(&mut grads, clip);
        self.opt_g.step(&mut self.params, &grads, gen_lr)?;
        self.state.step += 1;
        Ok(StepReport {
            losses,
            gen_grad_norm,
            disc_grad_norm,
            gen_lr,
            disc_lr,
        })
    }

    fn non_finite(&self, what: &str, value: f64) -> Error {
        Error::Training(format!(
            "{what} is {value} at step {} (epoch {})",
            self.state.step, self.state.epoch
        ))
    }

    /// `alpha * l_rec + beta * l_fm` averaged over the batches, no updates.
    pub fn validation_loss(&self, batches: &[TrainBatch]) -> Result<f64> {
        let w = self.cfg.losses.weights;
        let sr = self.cfg.stft.sample_rate;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches {
            for i in 0..batch.len() {
                let tape = Tape::inference();
                let p = self.params.bind_frozen(&tape);
                let x = wave_var(&tape, batch.degraded.slice(s![i, 0, ..]));
                let target = wave_var(&tape, batch.target.slice(s![i, 0, ..]));
                let y = self.gen.forward(&p, x)?;
                let rec = multires_rec_loss(
                    y,
                    target,
                    &self.cfg.losses.rec_windows,
                    self.cfg.losses.rec_normalized,
                    sr,
                )?
                .item();
                let fm = if w.beta > 0.0 {
                    let fo = self.disc.ensemble_forward(&p, y)?;
                    let ro = self.disc.ensemble_forward(&p, target)?;
                    let fh: Vec<Vec<Var>> = fo.into_iter().map(|o| o.hidden).collect();
                    let rh: Vec<Vec<Var>> = ro.into_iter().map(|o| o.hidden).collect();
                    feature_matching_loss(&fh, &rh)?.item()
                } else {
                    0.0
                };
                total += w.alpha * rec + w.beta * fm;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::arg("no validation items"));
        }
        Ok(total / count as f64)
    }

    /// Fixed held-out batches, independent of the training streams.
    pub fn validation_batches(&self, lib: &StemLibrary) -> Result<Vec<TrainBatch>> {
        let t = &self.cfg.trainer;
        (0..t.validation_batches as u64)
            .map(|i| make_batch(lib, &mut validation_rng(t.seed, i), t.batch_size, &self.cfg.data))
            .collect()
    }

    /// Copies of every tensor under `prefix`.
    pub fn parameter_snapshot(&self, prefix: &str) -> BTreeMap<String, Array> {
        self.params
            .subset(prefix)
            .iter()
            .map(|(k, t)| (k.to_string(), (*t.data).clone()))
            .collect()
    }
}
