//! Two-stage align/refine training loop.
//!
//! Stage 1 (align) optimizes the pairwise contrastive loss. Stage 2 (refine)
//! optimizes the combined contrastive + consensus loss. Ablation modes swap
//! the per-stage objective:
//!
//! | mode                    | stage 1      | stage 2            |
//! |-------------------------|--------------|--------------------|
//! | `mc3`                   | contrastive  | contrastive + consensus |
//! | `no_consensus`          | contrastive  | contrastive        |
//! | `no_contrastive_stage2` | contrastive  | consensus          |
//! | `no_align`              | (skipped)    | contrastive + consensus |

mod checkpoint;
mod log;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{resume, Checkpoint, Progress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use log::{EpochLog, StepLog, TrainLog};

use crate::data::{make_batches, Corpus, Split};
use crate::encoders::{EncoderGrads, EncoderParams};
use crate::error::{Mc3Error, Result};
use crate::losses::{consensus_loss, contrastive_total, mc3_loss, BatchEmbeddings, LossConfig};
use crate::math::{AdamConfig, AdamState, Matrix, Rng};
use crate::modality::{ModalityId, PerModality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mc3,
    NoConsensus,
    NoContrastiveStage2,
    NoAlign,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Mc3,
        TrainMode::NoConsensus,
        TrainMode::NoContrastiveStage2,
        TrainMode::NoAlign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mc3 => "mc3",
            TrainMode::NoConsensus => "no_consensus",
            TrainMode::NoContrastiveStage2 => "no_contrastive_stage2",
            TrainMode::NoAlign => "no_align",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Mc3Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Mc3Error::config("mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Align = 1,
    Refine = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::Align),
            2 => Some(Stage::Refine),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Contrastive,
    Consensus,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub align_epochs: usize,
    pub refine_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub log_every: usize,
    pub reset_optimizer_between_stages: bool,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub drop_last: bool,
    /// Where to write per-epoch checkpoints. Not stored inside checkpoints,
    /// so identical runs give identical files wherever they are written.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            align_epochs: 5,
            refine_epochs: 5,
            lr: 3e-5,
            batch_size: 256,
            seed: 0,
            mode: TrainMode::Mc3,
            log_every: 1,
            reset_optimizer_between_stages: true,
            grad_clip: Some(5.0),
            drop_last: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// The default schedule at laptop scale: 64-sample batches, lr 3e-3 and
    /// temperature 0.2 for randomly initialized projection heads.
    pub fn desk_scale() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 3e-3,
            loss: LossConfig {
                temperature: 0.2,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Mc3Error::config("lr", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Mc3Error::config("batch_size", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Mc3Error::config("log_every", "must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Mc3Error::config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    /// Epochs actually run in `stage`; `no_align` skips stage 1.
    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Align if self.mode == TrainMode::NoAlign => 0,
            Stage::Align => self.align_epochs,
            Stage::Refine => self.refine_epochs,
        }
    }

    fn objective(&self, stage: Stage) -> Objective {
        match (stage, self.mode) {
            (Stage::Align, _) => Objective::Contrastive,
            (Stage::Refine, TrainMode::Mc3 | TrainMode::NoAlign) => Objective::Combined,
            (Stage::Refine, TrainMode::NoConsensus) => Objective::Contrastive,
            (Stage::Refine, TrainMode::NoContrastiveStage2) => Objective::Consensus,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

fn fresh_optimizer(cfg: &TrainConfig, params: &EncoderParams) -> Vec<AdamState> {
    params
        .tensors()
        .into_iter()
        .map(|t| AdamState::for_params(cfg.adam(), t))
        .collect()
}

/// Training-split features gathered once per run.
struct TrainData {
    features: PerModality<Matrix>,
}

impl TrainData {
    fn new(corpus: &Corpus, params: &EncoderParams) -> Result<Self> {
        let idx = corpus.split_indices(Split::Train);
        if idx.is_empty() {
            return Err(Mc3Error::InvalidDims("no training records".into()));
        }
        let dims = corpus.input_dims()?;
        for m in ModalityId::ALL {
            if dims[m] != params.head(m).input_dim() {
                return Err(Mc3Error::shape(
                    format!("{m} encoder input dim {}", params.head(m).input_dim()),
                    format!("corpus dim {}", dims[m]),
                ));
            }
        }
        let features = PerModality::try_from_fn(|m| corpus.features(m, &idx))?;
        Ok(TrainData { features })
    }

    fn len(&self) -> usize {
        self.features[ModalityId::Audio].rows()
    }
}

/// Loss parts of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub contrastive: Option<f64>,
    pub consensus: Option<f64>,
    pub total: f64,
}

/// Forward, loss and backward for one batch of raw features. Returns the
/// per-part losses and the encoder gradients.
pub fn batch_gradients(
    params: &EncoderParams,
    loss_cfg: &LossConfig,
    features: &PerModality<Matrix>,
    objective: StageObjective,
) -> Result<(StepLoss, EncoderGrads)> {
    let caches = PerModality::try_from_fn(|m| params.forward(m, &features[m]))?;
    let batch = BatchEmbeddings::from_per_modality(caches.map(|_, c| c.output.clone()))?;
    let (loss, grads) = match objective.0 {
        Objective::Contrastive => {
            let o = contrastive_total(&batch, loss_cfg)?;
            (
                StepLoss {
                    contrastive: Some(o.loss),
                    consensus: None,
                    total: o.loss,
                },
                o.grads,
            )
        }
        Objective::Consensus => {
            let mut o = consensus_loss(&batch, loss_cfg)?;
            for m in ModalityId::ALL {
                o.grads[m].scale_inplace(loss_cfg.consensus_weight);
            }
            (
                StepLoss {
                    contrastive: None,
                    consensus: Some(o.loss),
                    total: loss_cfg.consensus_weight * o.loss,
                },
                o.grads,
            )
        }
        Objective::Combined => {
            let o = mc3_loss(&batch, loss_cfg)?;
            (
                StepLoss {
                    contrastive: Some(o.contrastive),
                    consensus: Some(o.consensus),
                    total: o.loss,
                },
                o.grads,
            )
        }
    };
    let heads = PerModality::try_from_fn(|m| params.backward(&caches[m], &grads[m], false).map(|(g, _)| g))?;
    Ok((loss, EncoderGrads { heads }))
}

/// Opaque handle selecting the per-stage objective; see [`TrainConfig::stage_objective`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageObjective(Objective);

impl TrainConfig {
    pub fn stage_objective(&self, stage: Stage) -> StageObjective {
        StageObjective(self.objective(stage))
    }
}

pub struct Trainer {
    data: TrainData,
    cfg: TrainConfig,
    params: EncoderParams,
    optim: Vec<AdamState>,
    progress: Progress,
    log: TrainLog,
    started: Instant,
}

impl Trainer {
    pub fn new(corpus: &Corpus, encoders: EncoderParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = TrainData::new(corpus, &encoders)?;
        let optim = fresh_optimizer(&cfg, &encoders);
        let stage = if cfg.epochs(Stage::Align) > 0 {
            Stage::Align
        } else {
            Stage::Refine
        };
        Ok(Trainer {
            data,
            params: encoders,
            optim,
            progress: Progress {
                stage,
                epoch: 0,
                step: 0,
            },
            cfg,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint. Training after an epoch-boundary
    /// checkpoint is bit-identical to an uninterrupted run.
    pub fn from_checkpoint(corpus: &Corpus, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let data = TrainData::new(corpus, &ckpt.encoders)?;
        Ok(Trainer {
            data,
            cfg: ckpt.config,
            params: ckpt.encoders,
            optim: ckpt.optimizer,
            progress: ckpt.progress,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &EncoderParams {
        &self.params
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.progress.stage == Stage::Refine && self.progress.epoch >= self.cfg.epochs(Stage::Refine)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            progress: self.progress,
            encoders: self.params.clone(),
            optimizer: self.optim.clone(),
        }
    }

    fn advance_stage_if_done(&mut self) {
        if self.progress.stage == Stage::Align && self.progress.epoch >= self.cfg.epochs(Stage::Align) {
            self.progress.stage = Stage::Refine;
            self.progress.epoch = 0;
            if self.cfg.reset_optimizer_between_stages {
                self.optim = fresh_optimizer(&self.cfg, &self.params);
            }
        }
    }

    /// Runs one epoch of the current stage. Returns `false` once both stages
    /// are complete.
    pub fn run_epoch(&mut self) -> Result<bool> {
        self.advance_stage_if_done();
        if self.is_finished() {
            return Ok(false);
        }
        let stage = self.progress.stage;
        let epoch = self.progress.epoch;
        let objective = self.cfg.stage_objective(stage);
        let mut rng = Rng::derive(self.cfg.seed, &[0xBA7C, stage.number() as u64, epoch as u64]);
        let batches = make_batches(self.data.len(), self.cfg.batch_size, &mut rng, self.cfg.drop_last);
        let mut acc = log::EpochAccumulator::new(stage, epoch);
        for batch in batches {
            let step = self.progress.step;
            let at = |e: Mc3Error| Mc3Error::AtStep {
                step,
                source: Box::new(e),
            };
            let feats = PerModality::try_from_fn(|m| self.data.features[m].select_rows(&batch)).map_err(at)?;
            let (loss, mut grads) = batch_gradients(&self.params, &self.cfg.loss, &feats, objective).map_err(at)?;
            if let Some(limit) = self.cfg.grad_clip {
                let n = grads.global_norm();
                if n > limit {
                    grads.scale(limit / n);
                }
            }
            for ((p, g), st) in self
                .params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(self.optim.iter_mut())
            {
                st.update(p, g).map_err(at)?;
            }
            acc.add(&loss);
            if step % self.cfg.log_every as u64 == 0 {
                self.log.steps.push(StepLog {
                    stage: stage.number(),
                    epoch,
                    step,
                    contrastive: loss.contrastive,
                    consensus: loss.consensus,
                    total: loss.total,
                    seconds: self.started.elapsed().as_secs_f64(),
                });
            }
            self.progress.step += 1;
        }
        self.log.epochs.push(acc.finish());
        self.progress.epoch += 1;
        self.advance_stage_if_done();
        if let Some(path) = &self.cfg.checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(!self.is_finished())
    }

    /// Runs to completion, calling `on_epoch` after every epoch.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&EpochLog, &EncoderParams) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let before = self.log.epochs.len();
            self.run_epoch()?;
            if let Some(e) = self.log.epochs.get(before) {
                on_epoch(e, &self.params)?;
            }
        }
        if let Some(path) = &self.cfg.checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_, _| Ok(()))
    }

    pub fn into_parts(self) -> (EncoderParams, TrainLog) {
        (self.params, self.log)
    }
}

/// Trains `encoders` on the training split of `corpus`.
pub fn train(corpus: &Corpus, encoders: EncoderParams, cfg: TrainConfig) -> Result<(EncoderParams, TrainLog)> {
    let mut t = Trainer::new(corpus, encoders, cfg)?;
    t.run()?;
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::encoders::{init_params, Activation, EncoderDims};

    pub(crate) fn tiny_corpus(seed: u64) -> (Corpus, EncoderParams) {
        let cfg = SynthConfig {
            concepts: 5,
            latent_dim: 6,
            dims: PerModality([8, 10, 7]),
            train: 96,
            val: 0,
            test: 32,
            verbs: 3,
            nouns: 2,
            seed,
            ..SynthConfig::default()
        };
        let corpus = Corpus::from_synthetic(&generate_synthetic(&cfg).unwrap()).unwrap();
        let dims = EncoderDims {
            input: cfg.dims.clone(),
            hidden: 0,
            latent: 12,
        };
        let enc = init_params(&dims, Activation::Tanh, &mut Rng::new(seed)).unwrap();
        (corpus, enc)
    }

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            align_epochs: 2,
            refine_epochs: 2,
            batch_size: 16,
            lr: 1e-2,
            mode,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_encoders_untouched() {
        let (corpus, enc) = tiny_corpus(1);
        let cfg = TrainConfig {
            align_epochs: 0,
            refine_epochs: 0,
            ..tiny_cfg(TrainMode::Mc3)
        };
        let (out, log) = train(&corpus, enc.clone(), cfg).unwrap();
        assert_eq!(out, enc);
        assert!(log.steps.is_empty());
    }

    #[test]
    fn no_consensus_logs_no_consensus_part() {
        let (corpus, enc) = tiny_corpus(2);
        let (_, log) = train(&corpus, enc, tiny_cfg(TrainMode::NoConsensus)).unwrap();
        assert!(log.steps.iter().all(|s| s.consensus.is_none()));
        assert!(log.steps.iter().all(|s| s.contrastive.unwrap() >= 0.0));
    }

    #[test]
    fn stage_boundaries_and_objectives() {
        let (corpus, enc) = tiny_corpus(3);
        let (_, log) = train(&corpus, enc.clone(), tiny_cfg(TrainMode::Mc3)).unwrap();
        // 96 / 16 = 6 steps per epoch
        assert_eq!(log.steps.len(), 24);
        for s in &log.steps {
            match s.stage {
                1 => assert!(s.consensus.is_none()),
                2 => assert!(s.consensus.is_some() && s.contrastive.is_some()),
                _ => unreachable!(),
            }
        }
        let (_, log) = train(&corpus, enc.clone(), tiny_cfg(TrainMode::NoAlign)).unwrap();
        assert_eq!(log.steps.len(), 12);
        assert!(log.steps.iter().all(|s| s.stage == 2));
        let (_, log) = train(&corpus, enc, tiny_cfg(TrainMode::NoContrastiveStage2)).unwrap();
        assert!(log
            .steps
            .iter()
            .filter(|s| s.stage == 2)
            .all(|s| s.contrastive.is_none() && s.consensus.is_some()));
    }

    #[test]
    fn runs_are_deterministic() {
        let (corpus, enc) = tiny_corpus(4);
        let (a, la) = train(&corpus, enc.clone(), tiny_cfg(TrainMode::Mc3)).unwrap();
        let (b, lb) = train(&corpus, enc, tiny_cfg(TrainMode::Mc3)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let totals = |l: &TrainLog| l.steps.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(totals(&la), totals(&lb));
    }

    #[test]
    fn rejects_mismatched_dims_and_bad_config() {
        let (corpus, _) = tiny_corpus(5);
        let other = init_params(
            &EncoderDims {
                input: PerModality([3, 3, 3]),
                hidden: 0,
                latent: 4,
            },
            Activation::Tanh,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(Trainer::new(&corpus, other, tiny_cfg(TrainMode::Mc3)).is_err());
        let (corpus, enc) = tiny_corpus(5);
        let bad = TrainConfig {
            batch_size: 0,
            ..tiny_cfg(TrainMode::Mc3)
        };
        assert!(matches!(
            Trainer::new(&corpus, enc, bad),
            Err(Mc3Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("w/o".parse::<TrainMode>().is_err());
    }
}
