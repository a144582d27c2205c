use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::{self, Strategy};
use super::{adam_step, clip_global_norm, lr_schedule, scst_step, xe_loss, CaptionBatch, Dataset, OptimizerState, Phase, Progress, TrainConfig};
use crate::data::checkpoint::Checkpoint;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::CiderD;
use crate::model::{CaptionModel, Mode};
use crate::rng::{seeded, Rng, RngState};
use crate::tensor::{Tape, Tensor};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    /// XE: mean per-token NLL. SCST: mean surrogate loss per rollout.
    pub loss: f64,
    pub lr: f64,
    pub val_bleu4: Option<f64>,
    pub val_cider: Option<f64>,
}

/// Receives each finished epoch, after the trainer state has advanced.
pub trait EpochSink {
    fn epoch_done(&mut self, record: &LogRecord, trainer: &Trainer) -> Result<()>;
}

impl EpochSink for Vec<LogRecord> {
    fn epoch_done(&mut self, record: &LogRecord, _: &Trainer) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Writes `metrics.jsonl`, `{phase}-epoch-NN.ckpt` and `last.ckpt` under `dir`.
pub struct DirSink {
    pub dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(DirSink { dir: dir.to_path_buf() })
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

impl EpochSink for DirSink {
    fn epoch_done(&mut self, record: &LogRecord, trainer: &Trainer) -> Result<()> {
        let ck = trainer.checkpoint();
        ck.save(&self.dir.join(format!("{}-epoch-{:02}.ckpt", record.phase, record.epoch)))?;
        ck.save(&self.dir.join("last.ckpt"))?;
        let path = self.log_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CaptionModel<f32>,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub progress: Progress,
    pub vocab: Vocabulary,
}

impl Trainer {
    pub fn new(model: CaptionModel<f32>, vocab: Vocabulary, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Trainer {
            optimizer: OptimizerState::new(model.parameters()),
            rng: seeded(config.seed),
            progress: Progress::default(),
            config,
            model,
            vocab,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        let words = ck.vocab.ok_or_else(|| Error::Format("checkpoint has no vocabulary".into()))?;
        let vocab = Vocabulary::from_words(words)?;
        let mut t = Trainer::new(ck.model, vocab, config)?;
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        if let Some(r) = ck.rng {
            t.rng = r.restore()?;
        }
        if let Some(p) = ck.progress {
            t.progress = p;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: Some(RngState::capture(&self.rng)),
            progress: Some(self.progress.clone()),
            vocab: Some(self.vocab.words().to_vec()),
        }
    }

    /// Switch to the SCST phase with fresh optimizer moments.
    pub fn start_scst(&mut self) {
        self.progress.phase = Phase::Scst;
        self.progress.epoch = 0;
        self.optimizer = OptimizerState::new(self.model.parameters());
    }

    pub fn next_epoch(&self) -> Option<(Phase, usize)> {
        let p = &self.progress;
        match p.phase {
            Phase::Xe if p.epoch < self.config.xe_epochs => Some((Phase::Xe, p.epoch + 1)),
            Phase::Xe if self.config.scst_epochs > 0 => Some((Phase::Scst, 1)),
            Phase::Scst if p.epoch < self.config.scst_epochs => Some((Phase::Scst, p.epoch + 1)),
            _ => None,
        }
    }

    /// Train the remaining epochs of both phases.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, sink: &mut dyn EpochSink) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while let Some(rec) = self.run_epoch(train, val)? {
            sink.epoch_done(&rec, self)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Train one epoch; `None` when the schedule is complete.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<Option<LogRecord>> {
        let Some((phase, epoch)) = self.next_epoch() else {
            return Ok(None);
        };
        if phase == Phase::Scst && self.progress.phase == Phase::Xe {
            self.start_scst();
        }
        let lr = lr_schedule(&self.config, phase, epoch)?;
        let loss = match phase {
            Phase::Xe => self.xe_epoch(train, lr, epoch)?,
            Phase::Scst => self.scst_epoch(train, lr, epoch)?,
        };
        self.progress.phase = phase;
        self.progress.epoch = epoch;
        let (val_bleu4, val_cider) = match val {
            Some(v) if self.config.val_images > 0 => {
                let s = self.evaluate(&v.head(self.config.val_images))?;
                (Some(s.bleu4), Some(s.cider))
            }
            _ => (None, None),
        };
        Ok(Some(LogRecord {
            phase,
            epoch,
            step: self.progress.step,
            loss,
            lr,
            val_bleu4,
            val_cider,
        }))
    }

    fn apply(&mut self, mut grads: Vec<Tensor<f32>>, lr: f64) -> Result<()> {
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let names: Vec<String> = self.model.named_parameters().map(|(n, _)| n.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let hp = self.config.adam();
        adam_step(self.model.parameters_mut(), &grads, &names, &mut self.optimizer, lr, hp)?;
        self.progress.step += 1;
        Ok(())
    }

    /// One pass over shuffled `(image, caption)` pairs; returns mean NLL per token.
    pub fn xe_epoch(&mut self, train: &Dataset, lr: f64, epoch: usize) -> Result<f64> {
        let mut pairs = train.pairs();
        pairs.shuffle(&mut self.rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in pairs.chunks(self.config.batch_size) {
            let images: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
            let caps: Vec<&[u32]> = chunk.iter().map(|&(i, j)| train.captions[i][j].as_slice()).collect();
            let batch = CaptionBatch::new(images, &caps, self.model.config().max_caption_len)?;

            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let patches = tape.constant(train.patch_tensor(&batch.images));
            let mut mode = Mode::Train(&mut self.rng);
            let memory = self.model.encode(&mut tape, &bound, patches, &mut mode, None)?;
            let logits = self
                .model
                .decode(&mut tape, &bound, &batch.inputs, batch.batch(), batch.len, memory, &mut mode, None)?;
            let sum = xe_loss(&mut tape, logits, &batch.targets, &batch.mask)?;
            let sum_value = tape.value(sum).item() as f64;
            if !sum_value.is_finite() {
                return Err(Error::Diverged { epoch, loss: sum_value });
            }
            let loss = tape.scale(sum, 1.0 / batch.batch() as f64)?;
            let g = tape.backward(loss)?;
            let grads = bound.vars().iter().map(|v| g.get(*v).cloned().expect("parameter gradient")).collect();
            let ramp = match self.config.xe_warmup_steps {
                0 => 1.0,
                w => ((self.progress.step + 1) as f64 / w as f64).min(1.0),
            };
            self.apply(grads, lr * ramp)?;
            nll += sum_value;
            tokens += batch.n_tokens();
        }
        Ok(nll / tokens as f64)
    }

    /// One SCST pass with CIDEr-D rewards against the training references.
    pub fn scst_epoch(&mut self, train: &Dataset, lr: f64, epoch: usize) -> Result<f64> {
        let scorer = CiderD::new(&train.references)?;
        let vocab = self.vocab.clone();
        let reward = |img: usize, toks: &[u32]| scorer.score(&vocab.decode_words(toks), &train.references[img]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (stats, grads) = scst_step(&self.model, train, chunk, &reward, &self.config, &mut self.rng)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: stats.loss });
            }
            self.apply(grads, lr)?;
            total += stats.loss * stats.rollouts as f64;
            n += stats.rollouts;
        }
        Ok(total / n as f64)
    }

    /// Greedy-decoded BLEU and CIDEr-D on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<eval::Scores> {
        let images: Vec<usize> = (0..data.len()).collect();
        let max_len = self.config.max_decode_len.min(self.model.config().max_caption_len);
        let generated = eval::decode_all(&self.model, data, &images, &Strategy::Greedy { max_len })?;
        eval::score_captions(&eval::words(&self.vocab, &generated), &data.references)
    }
}
