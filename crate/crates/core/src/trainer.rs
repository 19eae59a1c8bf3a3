//! Two-phase training over several partially labeled datasets.
//!
//! Phase one supervises every scale with the target adaptive loss; phase two
//! switches to the fused output only. Datasets take turns supplying batches,
//! so each batch has a single labeled-class set.

use std::sync::Arc;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetDescriptor, VolumeSample};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_backward, FusionConfig, FusionInit};
use crate::losses::{tal_dps_loss, tal_loss_logits, LossConfig};
use crate::model::Model;
use crate::network::{build_input_pyramid, NetworkConfig};
use crate::nn::{Mode, Parameterized};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::preprocess::{build_label_pyramid_batch, collate, sample_stack, target_slices, PreprocessConfig, Stack};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    #[default]
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_epochs: usize,
    pub dps_epochs: usize,
    /// Multiplicative learning-rate factor applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub alternation: Alternation,
    /// Stop early after this many optimization steps.
    pub max_steps: Option<usize>,
    /// Write a numbered checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::multi_organ()
    }
}

impl TrainConfig {
    pub fn multi_organ() -> Self {
        Self {
            lr0: 2e-4,
            max_epochs: 4000,
            dps_epochs: 2000,
            decay: 0.99,
            decay_every: 40,
            batch_size: 4,
            optimizer: RmsPropConfig::default(),
            alternation: Alternation::Step,
            max_steps: None,
            checkpoint_every: None,
        }
    }

    pub fn single_organ() -> Self {
        Self {
            lr0: 2e-3,
            max_epochs: 2500,
            ..Self::multi_organ()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.dps_epochs == 0 || self.dps_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "dps_epochs {} must lie in 1..={}",
                self.dps_epochs, self.max_epochs
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dps,
    Af,
}

pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay.powi((epoch / config.decay_every) as i32)
}

pub fn phase_for(epoch: usize, config: &TrainConfig) -> Phase {
    if epoch < config.dps_epochs {
        Phase::Dps
    } else {
        Phase::Af
    }
}

/// Named random streams derived from one seed.
pub struct SeedStreams;

impl SeedStreams {
    pub const SAMPLING: u64 = 1;
    pub const INIT: u64 = 2;
    pub const FOLDS: u64 = 3;

    pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }
}

/// Preprocessed volumes of one dataset.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub descriptor: Arc<DatasetDescriptor>,
    pub volumes: Vec<VolumeSample>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub dataset: String,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub model: Model<f32>,
    pub optimizer: RmsProp<f32>,
    pub rng: ChaCha8Rng,
    pub cursor: usize,
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub source: usize,
    pub stacks: Vec<Stack>,
    pub volume_ids: Vec<String>,
}

/// Score-map gradients of one step, split by origin. The accumulator of the
/// inactive phase is allocated and stays zero.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub supervision: Vec<Array4<f32>>,
    pub fused: Vec<Array4<f32>>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub gradients: StepGradients,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    preprocess: PreprocessConfig,
    loss: LossConfig,
    sets: Vec<TrainingSet>,
}

impl Trainer {
    pub fn new(config: TrainConfig, preprocess: PreprocessConfig, loss: LossConfig, sets: Vec<TrainingSet>) -> Result<Self> {
        config.validate()?;
        if sets.is_empty() {
            return Err(Error::Config("no training datasets".into()));
        }
        for set in &sets {
            if set.volumes.is_empty() {
                return Err(Error::Config(format!("dataset `{}` has no volumes", set.descriptor.name())));
            }
            if let Some(v) = set.volumes.iter().find(|v| target_slices(v).is_empty()) {
                return Err(Error::Sampling { volume: v.id.clone() });
            }
        }
        Ok(Self {
            config,
            preprocess,
            loss,
            sets,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn sets(&self) -> &[TrainingSet] {
        &self.sets
    }

    /// One stack per training volume, rounded up to whole batches.
    pub fn steps_per_epoch(&self) -> usize {
        let volumes: usize = self.sets.iter().map(|s| s.volumes.len()).sum();
        volumes.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let all = self.config.max_epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.steps_per_epoch()
    }

    /// Fresh state: network initialized from the `init` stream, sampling
    /// from the `sampling` stream.
    pub fn init_state(&self, network: NetworkConfig, seed: u64) -> Result<TrainState> {
        self.init_state_with(network, FusionConfig::default(), seed)
    }

    pub fn init_state_with(&self, network: NetworkConfig, fusion: FusionConfig, seed: u64) -> Result<TrainState> {
        let mut model = Model::<f32>::new(network)?;
        let mut rng = SeedStreams::stream(seed, SeedStreams::INIT);
        model.init(&mut rng);
        if fusion.init == FusionInit::FanIn {
            model.fusion.init(&mut rng);
        }
        let optimizer = RmsProp::new(self.config.optimizer, &model);
        Ok(TrainState {
            step: 0,
            model,
            optimizer,
            rng: SeedStreams::stream(seed, SeedStreams::SAMPLING),
            cursor: 0,
            history: Vec::new(),
        })
    }

    /// Draws a batch from the dataset whose turn it is.
    pub fn next_batch(&self, state: &mut TrainState) -> Result<Batch> {
        let source = match self.config.alternation {
            Alternation::Step => state.cursor % self.sets.len(),
            Alternation::Epoch => self.epoch_of(state.step) % self.sets.len(),
        };
        state.cursor += 1;
        let set = &self.sets[source];
        let mut stacks = Vec::with_capacity(self.config.batch_size);
        let mut volume_ids = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let v = &set.volumes[rand::Rng::random_range(&mut state.rng, 0..set.volumes.len())];
            stacks.push(sample_stack(v, &self.preprocess, &mut state.rng)?);
            volume_ids.push(v.id.clone());
        }
        Ok(Batch {
            source,
            stacks,
            volume_ids,
        })
    }

    pub fn step(&self, state: &mut TrainState) -> Result<StepOutcome> {
        let epoch = self.epoch_of(state.step);
        let phase = phase_for(epoch, &self.config);
        let lr = lr_at(epoch, &self.config);
        let batch = self.next_batch(state)?;
        let set = &self.sets[batch.source];
        let ck = set.descriptor.labeled_classes();
        let scales = state.model.config().scales;
        let (x, y) = collate(&batch.stacks);
        let pyramid = build_input_pyramid(&x, scales)?;
        let labels = build_label_pyramid_batch(&y, scales)?;

        state.model.zero_grad();
        let (scores, cache) = state.model.network.forward(&pyramid, Mode::Train)?;
        let zeros = || -> Vec<Array4<f32>> { scores.levels().iter().map(|l| Array4::zeros(l.raw_dim())).collect() };
        let mut gradients = StepGradients {
            supervision: zeros(),
            fused: zeros(),
        };
        let loss = match phase {
            Phase::Dps => {
                let (loss, grads) = tal_dps_loss(scores.levels(), labels.levels(), ck, self.loss.tal_scope)?;
                for (acc, g) in gradients.supervision.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        *acc = g;
                    }
                }
                loss
            }
            Phase::Af => {
                let (_, _, h, w) = x.dim();
                let (out, fcache) = fuse(scores.levels(), &state.model.fusion, (h, w))?;
                let (loss, d_fused) = tal_loss_logits(&out.fused_logits, &y, ck)?;
                gradients.fused = fuse_backward(&mut state.model.fusion, &fcache, &d_fused);
                loss
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                epoch,
                dataset: set.descriptor.name().to_string(),
                volumes: batch.volume_ids,
            });
        }
        let d_scores: Vec<Option<Array4<f32>>> = gradients
            .supervision
            .iter()
            .zip(&gradients.fused)
            .map(|(a, b)| Some(a + b))
            .collect();
        state.model.network.backward(&cache, &d_scores)?;
        state.model.network.update_running_stats(&cache);
        state.optimizer.step(&mut state.model, lr);

        let record = StepRecord {
            step: state.step,
            epoch,
            phase,
            dataset: set.descriptor.name().to_string(),
            loss,
            lr,
        };
        state.history.push(record.clone());
        state.step += 1;
        Ok(StepOutcome { record, gradients })
    }

    /// Runs until `total_steps`, calling `after_step` once per step.
    pub fn run(&self, state: &mut TrainState, mut after_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>) -> Result<()> {
        while state.step < self.total_steps() {
            let outcome = self.step(state)?;
            after_step(state, &outcome.record)?;
        }
        Ok(())
    }
}
