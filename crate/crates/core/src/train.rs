//! Self-supervised training loop: mini-batches of stereo pairs, photometric
//! (and for the Siamese network, consistency) loss, Adam with a per-epoch
//! step schedule, CSV loss log and per-epoch checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StereoSample};
use crate::error::{Error, Result};
use crate::loss::{l1_reconstruction, siamese_loss, LossTerms, LossWeights, SiameseInputs};
use crate::net::{Arch, Checkpoint, CheckpointMeta, NetworkParams};
use crate::ops::BnMode;
use crate::optim::{Adam, AdamConfig, StepSchedule};
use crate::tensor::{Tape, Tensor};
use crate::warp::DispSign;

pub const CSV_HEADER: &str = "step,epoch,lr,loss,l_l,l_r,l_c";

/// Run configuration. Serialized field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Channel-width factor of the network.
    pub scale: f64,
    pub epochs: usize,
    /// Defaults to 25 for the basic network and 16 for the Siamese one.
    pub batch_size: Option<usize>,
    pub lr: f64,
    /// Halve the learning rate every this many epochs; 0 keeps it constant.
    pub lr_halving_epochs: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Disparity bound of the network head; defaults to the dataset's.
    pub d_max: Option<f64>,
    pub loss_weights: LossWeights,
    /// Seeds weight initialization and the per-epoch shuffles.
    pub seed: u64,
    /// Batch-norm behaviour during training steps.
    pub bn_mode: BnMode,
    /// Overrides the dataset's sign convention.
    pub disp_sign: Option<DispSign>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Siamese,
            scale: 0.125,
            epochs: 40,
            batch_size: None,
            lr: 1e-4,
            lr_halving_epochs: 5,
            max_steps: None,
            d_max: None,
            loss_weights: LossWeights::default(),
            seed: 0,
            bn_mode: BnMode::Train,
            disp_sign: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.arch {
            Arch::Basic => 25,
            Arch::Siamese => 16,
        })
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule::new(self.lr, self.lr_halving_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        self.loss_weights.validate()
    }
}

/// One optimizer step's log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.terms.total,
            self.terms.left,
            opt(self.terms.right),
            opt(self.terms.consistency)
        )
    }
}

/// Network, optimizer and position in the run.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: NetworkParams<f32>,
    pub adam: Adam<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    pub samples: Vec<StereoSample>,
    pub sign: DispSign,
}

impl Trainer {
    /// Fresh network initialized from `config.seed`.
    pub fn new(config: TrainConfig, samples: Vec<StereoSample>, d_max: f64) -> Result<Self> {
        config.validate()?;
        let params =
            NetworkParams::build(config.scale, config.d_max.unwrap_or(d_max), config.seed)?;
        let adam = Adam::new(&params.store, config.adam);
        Self::assemble(config, samples, params, adam, 0)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(
        config: TrainConfig,
        samples: Vec<StereoSample>,
        ck: &Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        let loaded = NetworkParams::from_checkpoint(ck)?;
        if (loaded.params.spec.scale - config.scale).abs() > 1e-12
            || loaded.meta.arch != config.arch
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint is a {} network at scale {}, run asks for {} at {}",
                loaded.meta.arch, loaded.params.spec.scale, config.arch, config.scale
            )));
        }
        let mut adam = loaded.adam.ok_or_else(|| {
            Error::Checkpoint("checkpoint has no optimizer state to resume".into())
        })?;
        adam.config = config.adam;
        Self::assemble(config, samples, loaded.params, adam, loaded.meta.step)
    }

    fn assemble(
        config: TrainConfig,
        samples: Vec<StereoSample>,
        params: NetworkParams<f32>,
        adam: Adam<f32>,
        step: usize,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
        if let Some(bad) = samples
            .iter()
            .find(|s| s.left.shape() != first.left.shape())
        {
            return Err(Error::shape(
                "training set",
                first.left.shape(),
                bad.left.shape(),
            ));
        }
        let sign = config.disp_sign.unwrap_or(first.disp_sign);
        Ok(Self {
            config,
            params,
            adam,
            step,
            samples,
            sign,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch_size())
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    /// Sample order of an epoch, fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn stack(
        &self,
        batch: &[usize],
        pick: impl Fn(&StereoSample) -> &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = batch.iter().map(|&k| pick(&self.samples[k])).collect();
        Tensor::stack(&items)
    }

    /// Forward, backward and one Adam update on the given samples.
    pub fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<LossTerms> {
        let mode = self.config.bn_mode;
        let mut tape = Tape::new();
        let left = tape.constant(self.stack(batch, |s| &s.left)?);
        let right = tape.constant(self.stack(batch, |s| &s.right)?);
        let (root, terms, stats) = match self.config.arch {
            Arch::Basic => {
                let out = self.params.forward_basic(&mut tape, left, mode)?;
                let recon = tape.warp_horizontal(right, out.disparity, self.sign)?;
                let l = l1_reconstruction(&mut tape, left, recon)?;
                let v = tape.value(l).item() as f64;
                let terms = LossTerms {
                    total: v,
                    left: v,
                    right: None,
                    consistency: None,
                };
                (l, terms, out.batch_stats)
            }
            Arch::Siamese => {
                let (sl, sr) = self.params.forward_siamese(&mut tape, left, right, mode)?;
                let left_recon = tape.warp_horizontal(right, sl.disparity, self.sign)?;
                let right_recon = tape.warp_horizontal(left, sr.disparity, self.sign.flipped())?;
                let inputs = SiameseInputs {
                    left,
                    right,
                    left_recon,
                    right_recon,
                    disp_left: sl.disparity,
                    disp_right: sr.disparity,
                };
                let (root, terms) =
                    siamese_loss(&mut tape, inputs, self.config.loss_weights, self.sign)?;
                let mut stats = sl.batch_stats;
                stats.extend(sr.batch_stats);
                (root, terms, stats)
            }
        };
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {} ({terms:?}); try a lower learning rate",
                self.step + 1
            )));
        }
        tape.backward(root, &mut self.params.store)?;
        self.adam.step(&mut self.params.store, lr)?;
        self.params.store.zero_grad();
        self.params.update_running_stats(&stats);
        self.step += 1;
        Ok(terms)
    }

    fn finished(&self) -> bool {
        self.epoch() >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until the epoch budget or `max_steps` is reached. `on_step`
    /// sees every step; `on_epoch` runs after each completed epoch and once
    /// more if the run stops mid-epoch.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let spe = self.steps_per_epoch();
        let bs = self.config.batch_size();
        while !self.finished() {
            let epoch = self.epoch();
            let order = self.epoch_order(epoch);
            let lr = self.config.schedule().lr_at(epoch);
            for (k, batch) in order.chunks(bs).enumerate().skip(self.step % spe) {
                debug_assert_eq!(self.step % spe, k);
                let terms = self.train_step(batch, lr)?;
                let rec = StepRecord {
                    step: self.step,
                    epoch,
                    lr,
                    terms,
                };
                log::debug!("{}", rec.csv_row());
                on_step(&rec)?;
                if self.finished() {
                    break;
                }
            }
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            arch: self.config.arch,
            epoch: self.epoch(),
            step: self.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint(Some(&self.adam), self.meta())
    }
}

/// Files of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
}

/// Outcome of [`train_on_disk`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Loads a dataset directory, trains, appends to the CSV log and writes the
/// checkpoint after every epoch.
pub fn train_on_disk(config: &TrainConfig, paths: &RunPaths) -> Result<TrainSummary> {
    let dataset = Dataset::open(&paths.data)?;
    let samples = dataset.load_all()?;
    let mut trainer = match &paths.resume {
        Some(p) => Trainer::resume(config.clone(), samples, &Checkpoint::load(p)?)?,
        None => Trainer::new(config.clone(), samples, dataset.manifest.d_max)?,
    };
    let mut log = open_log(&paths.log, paths.resume.is_some())?;
    let (mut first, mut last) = (None, None);
    let log_path = paths.log.clone();
    let ck_path = paths.checkpoint.clone();
    trainer.run(
        |rec| {
            first.get_or_insert(rec.terms.total);
            last = Some(rec.terms.total);
            writeln!(log, "{}", rec.csv_row())
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(&log_path, e))
        },
        |t| {
            log::info!("epoch {} done at step {}", t.epoch(), t.step);
            if let Some(parent) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            t.checkpoint().save(&ck_path)
        },
    )?;
    Ok(TrainSummary {
        steps: trainer.step,
        epochs: trainer.epoch(),
        first_loss: first,
        last_loss: last,
    })
}

/// Opens the loss log, writing the header unless appending to an existing
/// non-empty log.
fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let existing = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !existing {
        writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}
