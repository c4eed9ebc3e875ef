use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::{optim::AdamW, step_rng, StepReport, TrainState, Trainer};
use crate::config::RunConfig;
use crate::data::{make_batch, StemLibrary, TrainBatch};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint};

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint(&self, which: &str) -> PathBuf {
        self.root.join("checkpoints").join(which)
    }

    pub fn best(&self) -> PathBuf {
        self.checkpoint("best")
    }

    pub fn last(&self) -> PathBuf {
        self.checkpoint("last")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("logs").join("metrics.jsonl")
    }

    pub fn validation(&self) -> PathBuf {
        self.root.join("logs").join("validation.jsonl")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.json")
    }
}

const OPTIM_G: &str = "optimizer_gen.bin";
const OPTIM_D: &str = "optimizer_disc.bin";
const STATE_FILE: &str = "train_state.json";

/// One line of `logs/metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_fm: f64,
    pub l_gan: f64,
    pub l_disc: f64,
    pub l_total: f64,
    pub lr: f64,
    pub disc_lr: f64,
    pub grad_norm: f64,
    pub disc_grad_norm: f64,
}

impl StepLog {
    fn new(step: u64, epoch: usize, r: &StepReport) -> Self {
        Self {
            step,
            epoch,
            l_rec: r.losses.l_rec,
            l_fm: r.losses.l_fm,
            l_gan: r.losses.l_gan,
            l_disc: r.losses.l_disc,
            l_total: r.losses.l_total,
            lr: r.gen_lr,
            disc_lr: r.disc_lr,
            grad_norm: r.gen_grad_norm,
            disc_grad_norm: r.disc_grad_norm,
        }
    }
}

/// One line of `logs/validation.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: f64,
    pub best: bool,
}

fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drops log lines written after the checkpoint being resumed from.
fn truncate_log(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if keep(&v) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

impl Trainer {
    /// Writes parameters, optimizer moments and counters to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, serde_json::to_value(&self.cfg)?)?;
        self.opt_g.save(&dir.join(OPTIM_G))?;
        self.opt_d.save(&dir.join(OPTIM_D))?;
        write_json(&dir.join(STATE_FILE), &self.state)
    }

    /// Restores a trainer saved with [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir)?;
        let cfg: RunConfig = serde_json::from_value(meta.config)
            .map_err(|e| Error::Checkpoint(format!("{}: config: {e}", dir.display())))?;
        let mut t = Trainer::new(cfg)?;
        if t.params.len() != params.len() || t.params.names().zip(params.names()).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint(format!(
                "{}: parameters do not match the stored configuration",
                dir.display()
            )));
        }
        t.params = params;
        let tc = &t.cfg.trainer;
        t.opt_g = AdamW::load(&dir.join(OPTIM_G), tc.adam, tc.weight_decay)?;
        t.opt_d = AdamW::load(&dir.join(OPTIM_D), tc.adam, tc.weight_decay)?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        t.state = serde_json::from_str::<TrainState>(&text)?;
        Ok(t)
    }

    /// Continues from `checkpoints/last` of an existing run directory.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let paths = RunPaths::new(run_dir);
        let t = Self::load(&paths.last())?;
        let step = t.state.step;
        let epoch = t.state.epoch;
        truncate_log(&paths.metrics(), |v| v["step"].as_u64().is_some_and(|s| s < step))?;
        truncate_log(&paths.validation(), |v| {
            v["epoch"].as_u64().is_some_and(|e| (e as usize) < epoch)
        })?;
        Ok(t)
    }

    /// Changes the epoch budget, e.g. to continue a finished run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.trainer.epochs = epochs;
    }

    /// Trains until `trainer.epochs` epochs have completed or validation has
    /// not improved for `early_stop_patience` epochs. Returns the path of the
    /// last checkpoint.
    pub fn run(&mut self, lib: &StemLibrary, val_lib: Option<&StemLibrary>, run_dir: &Path) -> Result<PathBuf> {
        let paths = RunPaths::new(run_dir);
        fs::create_dir_all(paths.root.join("logs")).map_err(|e| Error::io(&paths.root, e))?;
        fs::create_dir_all(paths.root.join("checkpoints")).map_err(|e| Error::io(&paths.root, e))?;
        write_json(&paths.config(), &self.cfg)?;
        let val = self.validation_batches(val_lib.unwrap_or(lib))?;
        let tc = self.cfg.trainer.clone();
        if self.state.epoch >= tc.epochs || self.state.stale_epochs >= tc.early_stop_patience {
            return Ok(paths.last());
        }
        let first = self.state.step;
        let last = tc.epochs as u64 * tc.steps_per_epoch as u64;
        let data_cfg = self.cfg.data.clone();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<TrainBatch>>(tc.prefetch);
            scope.spawn(move || {
                for step in first..last {
                    let b = make_batch(lib, &mut step_rng(tc.seed, step), tc.batch_size, &data_cfg);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        break;
                    }
                }
            });
            while self.state.epoch < tc.epochs {
                let epoch = self.state.epoch;
                let start_in_epoch = (self.state.step - epoch as u64 * tc.steps_per_epoch as u64) as usize;
                for _ in start_in_epoch..tc.steps_per_epoch {
                    let batch = rx
                        .recv()
                        .map_err(|_| Error::Training("batch producer stopped".into()))??;
                    let step = self.state.step;
                    let report = match self.train_step(&batch) {
                        Ok(r) => r,
                        Err(e) => {
                            self.write_diagnostics(&paths, &e)?;
                            return Err(e);
                        }
                    };
                    append_json(&paths.metrics(), &StepLog::new(step, epoch, &report))?;
                }
                let val_loss = self.validation_loss(&val)?;
                self.state.epoch += 1;
                let improved = self.state.best_val.is_none_or(|b| val_loss < b);
                if improved {
                    self.state.best_val = Some(val_loss);
                    self.state.stale_epochs = 0;
                } else {
                    self.state.stale_epochs += 1;
                }
                append_json(
                    &paths.validation(),
                    &ValidationLog {
                        epoch,
                        step: self.state.step,
                        val_loss,
                        best: improved,
                    },
                )?;
                if improved {
                    self.save(&paths.best())?;
                }
                self.save(&paths.last())?;
                if self.state.stale_epochs >= tc.early_stop_patience {
                    break;
                }
            }
            Ok(())
        })?;
        Ok(paths.last())
    }

    fn write_diagnostics(&self, paths: &RunPaths, err: &Error) -> Result<()> {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            error: String,
            state: &'a TrainState,
            gen_lr: f64,
            disc_lr: f64,
        }
        write_json(
            &paths.diagnostics(),
            &Snapshot {
                error: err.to_string(),
                state: &self.state,
                gen_lr: self.gen_lr(),
                disc_lr: self.disc_lr(),
            },
        )?;
        save_checkpoint(&paths.checkpoint("diagnostic"), &self.params, serde_json::to_value(&self.cfg)?)?;
        Ok(())
    }
}
