//! Optimisation: loss, AdamW, checkpoints, the training loop and its run log.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use loss::{cross_entropy_loss, LossOutput};
pub use optim::{AdamW, AdamWConfig};

use crate::autodiff::{Tape, Tensor};
use crate::backbone::ClassEmbedding;
use crate::data::{LoadedSample, Split};
use crate::error::{Error, Result};
use crate::grid::IGNORE_INDEX;
use crate::metrics::ConfusionMatrix;
use crate::nn::{stable_seed, Ctx};
use crate::pipeline::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub image_side: usize,
    /// Seeds the sample order.
    pub seed: u64,
    pub ignore_index: u8,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Stop once training-set mIoU reaches this value at an evaluation
    /// point.
    pub stop_at_train_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-3,
            batch_size: 4,
            max_iterations: 100_000,
            image_side: 384,
            seed: 0,
            ignore_index: IGNORE_INDEX,
            checkpoint_every: 1000,
            eval_every: 1000,
            stop_at_train_miou: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("lr and weight_decay must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.image_side == 0 || self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "batch_size, image_side, checkpoint_every and eval_every must be positive",
            ));
        }
        if self.image_side % model.backbone.patch_size != 0 {
            return Err(Error::config(format!(
                "image_side {} is not divisible by patch size {}",
                self.image_side, model.backbone.patch_size
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub split: Split,
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step {
        iteration: u64,
        loss: f64,
        lr: f64,
        wall_time: f64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        all_ignored: bool,
    },
    Eval(EvalRecord),
}

pub fn read_run_log(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub all_ignored: bool,
}

/// Model, optimizer state and progress of one training run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub categories: Vec<String>,
    pub iteration: u64,
    pub history: Vec<EvalRecord>,
    classes: Vec<ClassEmbedding>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, categories: Vec<String>) -> Result<Self> {
        config.validate(model.config())?;
        let classes = model.class_embeddings(&categories)?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer()),
            model,
            config,
            categories,
            iteration: 0,
            history: Vec::new(),
            classes,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.model.clone())?;
        ckpt.restore_params(model.params_mut())?;
        let mut t = Self::new(model, ckpt.train.clone(), ckpt.categories.clone())?;
        t.optimizer = AdamW::from_state(ckpt.train.optimizer(), ckpt.adam_step, ckpt.moments.clone());
        t.iteration = ckpt.iteration;
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.iteration,
            self.model.config(),
            &self.config,
            &self.categories,
            &self.history,
            self.model.params(),
            &self.optimizer,
        )
    }

    /// Sample indices for `iteration`, drawn from a stream of per-epoch
    /// shuffles seeded by the run seed, so the order survives a resume.
    pub fn batch_indices(&self, iteration: u64, dataset_len: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let start = iteration as usize * bs;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + bs)
            .map(|j| {
                let epoch = j / dataset_len;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..dataset_len).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(self.config.seed, &format!("epoch/{epoch}")));
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[j % dataset_len]
            })
            .collect()
    }

    /// One optimizer step on `batch`; the loss is the mean over all valid
    /// pixels of the batch.
    pub fn train_step(&mut self, batch: &[&LoadedSample]) -> Result<StepReport> {
        let ignore = self.config.ignore_index;
        let total_valid: usize = batch.iter().map(|s| loss::valid_pixels(&s.mask, ignore)).sum();
        if total_valid == 0 {
            self.iteration += 1;
            return Ok(StepReport {
                loss: 0.0,
                all_ignored: true,
            });
        }
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        let mut loss = 0.0;
        for sample in batch {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, self.model.params());
            let logits = self.model.forward_graph(&cx, &sample.image, &self.classes)?;
            let out = cross_entropy_loss(&logits, &sample.mask, ignore, Some(total_valid as f64))?;
            if out.all_ignored {
                continue;
            }
            loss += out.loss.value().item();
            let g = tape.backward(out.loss)?;
            for (name, grad) in cx.param_grads(&g) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss,
                batch_ids: batch.iter().map(|s| s.id.clone()).collect(),
            });
        }
        let mut grads: Vec<(String, Tensor)> = grads.into_iter().collect();
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        self.optimizer.step(self.model.params_mut(), &grads)?;
        self.iteration += 1;
        Ok(StepReport {
            loss,
            all_ignored: false,
        })
    }

    pub fn evaluate(&self, samples: &[LoadedSample]) -> Result<ConfusionMatrix> {
        evaluate_embedded(&self.model, samples, &self.classes, self.config.ignore_index)
    }
}

/// Confusion matrix of argmax predictions over `samples`.
pub fn evaluate(model: &Model, samples: &[LoadedSample], categories: &[String], ignore: u8) -> Result<ConfusionMatrix> {
    let classes = model.class_embeddings(categories)?;
    evaluate_embedded(model, samples, &classes, ignore)
}

fn evaluate_embedded(model: &Model, samples: &[LoadedSample], classes: &[ClassEmbedding], ignore: u8) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(classes.len());
    for s in samples {
        let pred = model.forward_embedded(&s.image, classes)?.argmax();
        cm.accumulate(&pred, &s.mask, ignore)?;
    }
    Ok(cm)
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const LOG: &'static str = "run_log.jsonl";
    pub const LAST: &'static str = "last.ckpt";

    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let ckpts = root.join("checkpoints");
        std::fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        Ok(Self { root })
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(Self::LOG)
    }

    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration:07}.ckpt"))
    }

    pub fn last_path(&self) -> PathBuf {
        self.root.join(Self::LAST)
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<Record>,
    pub stopped_early: bool,
}

impl LoopOutput {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

/// Runs `train_step` until `max_iterations`, evaluating every `eval_every`
/// steps and checkpointing every `checkpoint_every` steps. With `run_dir`
/// set, records are appended to the run log and checkpoints are written.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[LoadedSample],
    val: &[LoadedSample],
    run_dir: Option<&RunDir>,
    progress: &mut dyn FnMut(&Record),
) -> Result<LoopOutput> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let start = Instant::now();
    let mut log = match run_dir {
        Some(d) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(d.log_path())
                .map_err(|e| Error::io(d.log_path(), e))?,
        ),
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |r: Record, records: &mut Vec<Record>| -> Result<()> {
        if let (Some(f), Some(d)) = (log.as_mut(), run_dir) {
            let line = serde_json::to_string(&r).expect("record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(d.log_path(), e))?;
        }
        progress(&r);
        records.push(r);
        Ok(())
    };
    let cfg = trainer.config.clone();
    let mut stopped_early = false;
    let mut last_eval = None;
    while trainer.iteration < cfg.max_iterations {
        let idx = trainer.batch_indices(trainer.iteration, train.len());
        let batch: Vec<&LoadedSample> = idx.iter().map(|&i| &train[i]).collect();
        let report = trainer.train_step(&batch)?;
        let it = trainer.iteration;
        emit(
            Record::Step {
                iteration: it,
                loss: report.loss,
                lr: cfg.lr,
                wall_time: start.elapsed().as_secs_f64(),
                all_ignored: report.all_ignored,
            },
            &mut records,
        )?;
        if it % cfg.eval_every == 0 {
            last_eval = Some(it);
            if run_evals(trainer, train, val, &mut |r| emit(r, &mut records))? {
                stopped_early = true;
            }
        }
        if let Some(d) = run_dir {
            if it % cfg.checkpoint_every == 0 {
                trainer.checkpoint().save(&d.checkpoint_path(it))?;
            }
        }
        if stopped_early {
            break;
        }
    }
    if last_eval != Some(trainer.iteration) {
        run_evals(trainer, train, val, &mut |r| emit(r, &mut records))?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(d) = run_dir {
        checkpoint.save(&d.last_path())?;
    }
    Ok(LoopOutput {
        checkpoint,
        records,
        stopped_early,
    })
}

/// Evaluates the validation split (when present) and, if an early-stop
/// target is set, the training split. Returns true when the target is met.
fn run_evals(
    trainer: &mut Trainer,
    train: &[LoadedSample],
    val: &[LoadedSample],
    emit: &mut dyn FnMut(Record) -> Result<()>,
) -> Result<bool> {
    let mut reached = false;
    let mut splits: Vec<(Split, &[LoadedSample])> = Vec::new();
    if trainer.config.stop_at_train_miou.is_some() {
        splits.push((Split::Train, train));
    }
    if !val.is_empty() {
        splits.push((Split::Val, val));
    }
    for (split, samples) in splits {
        let cm = trainer.evaluate(samples)?;
        let rec = EvalRecord {
            iteration: trainer.iteration,
            split,
            miou: cm.miou()?,
            fwiou: cm.fwiou()?,
            macc: cm.macc()?,
        };
        if split == Split::Train {
            reached = trainer.config.stop_at_train_miou.is_some_and(|t| rec.miou >= t);
        }
        trainer.history.push(rec.clone());
        emit(Record::Eval(rec))?;
    }
    Ok(reached)
}
