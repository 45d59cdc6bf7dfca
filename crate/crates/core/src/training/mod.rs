//! Teacher-forced training of the acoustic model and its embedding modules.
//!
//! Ground-truth durations drive the length regulator while the duration
//! predictor learns `ln(d + 1)` targets in parallel. Every step draws its
//! batch from a generator keyed by `(seed, step)`, so a run resumed from a
//! checkpoint replays exactly the batches an uninterrupted run would see.
//! Per-example gradients are computed independently (possibly on several
//! threads) and summed in batch order, which keeps results independent of
//! the thread count.

mod loss;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{compute_loss, loss_gradients, LossBreakdown, LossSums};

use crate::acoustic::{
    log_duration_target, ConditioningMode, ModelConfig, PhonemeSequence, TtsModel,
};
use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::features::RepresentationStack;
use crate::numerics::{noam_lr, AdamConfig, Checkpoint, HasParams, Matrix, OptimizerState};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
const METRICS_HEADER: &str = "step\tlr\tloss\tmel_mae\tdur_mse\tval_loss\tval_mel_mae\tval_dur_mse";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    /// Multiplier of the inverse-square-root schedule.
    pub lr_scale: f64,
    pub seed: u64,
    pub lambda_mel: f64,
    pub lambda_dur: f64,
    pub validation_interval: u64,
    /// Utterances of the validation manifest used per validation pass (0 = all).
    pub validation_limit: usize,
    pub checkpoint_interval: u64,
    pub checkpoint_dir: PathBuf,
    /// Reference the duration embedding sees during training.
    pub duration_reference: DurationReference,
    pub adam: AdamConfig,
}

/// Which utterance feeds the duration-role embedding while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationReference {
    /// The target utterance itself, like the acoustic reference.
    Same,
    /// A different utterance of the same speaker, drawn per step.
    Speaker,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 2000,
            warmup_steps: 400,
            lr_scale: 2.0,
            seed: 1,
            lambda_mel: 1.0,
            lambda_dur: 1.0,
            validation_interval: 250,
            validation_limit: 0,
            checkpoint_interval: 500,
            checkpoint_dir: PathBuf::from("run"),
            duration_reference: DurationReference::Same,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("warmup_steps", self.warmup_steps),
            ("validation_interval", self.validation_interval),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config("train.lr_scale must be positive".into()));
        }
        if !(self.lambda_mel >= 0.0 && self.lambda_dur >= 0.0)
            || self.lambda_mel + self.lambda_dur == 0.0
        {
            return Err(Error::Config(
                "train.lambda_mel and train.lambda_dur must be nonnegative and not both zero"
                    .into(),
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config(
                "train.adam needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Training state stored in a checkpoint's metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub train_speakers: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl CheckpointMeta {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))
    }
}

/// A model restored from a checkpoint.
pub struct LoadedModel {
    pub model: TtsModel<f32>,
    pub meta: CheckpointMeta,
    pub checkpoint: Checkpoint,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let checkpoint = Checkpoint::read(path)?;
    let meta = CheckpointMeta::from_toml(&checkpoint.metadata)?;
    let mut model = TtsModel::new(meta.model.clone())?;
    checkpoint.load_params(&mut model)?;
    Ok(LoadedModel {
        model,
        meta,
        checkpoint,
    })
}

/// One utterance ready for teacher-forced training.
#[derive(Clone, Debug)]
pub struct Example {
    pub phonemes: PhonemeSequence,
    pub mel: Matrix<f32>,
    pub log_durations: Vec<f32>,
    pub stack: RepresentationStack,
    pub speaker: String,
}

/// Loads every record of `manifest` with its mel and features, checking
/// dimensions against the model configuration.
pub fn load_examples(manifest: &Manifest, model: &ModelConfig) -> Result<Vec<Example>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let mel = r.load_mel()?;
            let stack = r.load_features()?;
            if mel.bins() != model.mel_bins {
                return Err(Error::Config(format!(
                    "record `{}` has {} mel bins, model.mel_bins is {}",
                    r.id,
                    mel.bins(),
                    model.mel_bins
                )));
            }
            if stack.layers() != model.ssl_layers || stack.dims() != model.ssl_dims {
                return Err(Error::Config(format!(
                    "record `{}` has features of {} layers x {} dims, model expects {} x {}",
                    r.id,
                    stack.layers(),
                    stack.dims(),
                    model.ssl_layers,
                    model.ssl_dims
                )));
            }
            let phonemes = r.phoneme_sequence(model.phoneme_inventory)?;
            Ok(Example {
                log_durations: r
                    .durations
                    .iter()
                    .map(|&d| log_duration_target(d))
                    .collect(),
                phonemes,
                mel: mel.frames,
                stack,
                speaker: r.speaker.clone(),
            })
        })
        .collect()
}

impl Example {
    fn durations(&self) -> &[u32] {
        self.phonemes
            .durations
            .as_deref()
            .expect("training examples carry durations")
    }

    /// Reference stacks for each embedding module: the utterance itself.
    fn references(&self, modules: usize) -> Vec<&RepresentationStack> {
        vec![&self.stack; modules]
    }
}

/// One batch entry with the reference stack of every embedding module.
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub references: Vec<&'a RepresentationStack>,
}

/// Teacher-forced loss sums over `examples`, without gradients.
pub fn evaluate_loss(model: &TtsModel<f32>, examples: &[Example]) -> Result<LossSums> {
    let parts = examples
        .par_iter()
        .map(|ex| {
            let refs = ex.references(model.embeddings.len());
            let (out, _) = model.forward_train(&ex.phonemes, &refs, ex.durations())?;
            let mut s = LossSums::default();
            s.add(&out.mel, &ex.mel, &out.log_durations, &ex.log_durations)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossSums::default();
    parts.iter().for_each(|p| total.merge(p));
    Ok(total)
}

/// Batch indices for `step`, independent of everything but `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    index::sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Accumulates the batch gradient into `model` and returns the loss sums.
pub fn accumulate_batch(
    model: &mut TtsModel<f32>,
    batch: &[BatchItem<'_>],
    lambda_mel: f64,
    lambda_dur: f64,
) -> Result<LossSums> {
    let mel_entries: usize = batch.iter().map(|b| b.example.mel.data().len()).sum();
    let phonemes: usize = batch.iter().map(|b| b.example.log_durations.len()).sum();
    let shared = &*model;
    let results = batch
        .par_iter()
        .map(|item| {
            let ex = item.example;
            let (out, cache) =
                shared.forward_train(&ex.phonemes, &item.references, ex.durations())?;
            let mut sums = LossSums::default();
            sums.add(&out.mel, &ex.mel, &out.log_durations, &ex.log_durations)?;
            let (d_mel, d_dur) = loss_gradients(
                &out.mel,
                &ex.mel,
                &out.log_durations,
                &ex.log_durations,
                lambda_mel,
                lambda_dur,
                mel_entries,
                phonemes,
            );
            let mut local = shared.clone();
            local.zero_grad();
            local.backward_train(&ex.phonemes, &item.references, &cache, &d_mel, &d_dur);
            Ok((local.flat_grads(), sums))
        })
        .collect::<Result<Vec<_>>>()?;
    model.zero_grad();
    let mut total = LossSums::default();
    for (g, s) in &results {
        model.accumulate_flat_grads(g);
        total.merge(s);
    }
    Ok(total)
}

/// Builds the batch for `step`, choosing duration references per policy.
fn assemble_batch<'a>(
    examples: &'a [Example],
    by_speaker: &BTreeMap<&str, Vec<usize>>,
    model: &TtsModel<f32>,
    cfg: &TrainConfig,
    step: u64,
) -> Vec<BatchItem<'a>> {
    let idx = batch_indices(cfg.seed, step, cfg.batch_size, examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D00D);
    rng.set_stream(step);
    idx.into_iter()
        .map(|i| {
            let ex = &examples[i];
            let mut references = ex.references(model.embeddings.len());
            if cfg.duration_reference == DurationReference::Speaker
                && model.mode() == ConditioningMode::Separate
            {
                let pool = &by_speaker[ex.speaker.as_str()];
                if pool.len() > 1 {
                    let mut j = pool[rng.gen_range(0..pool.len() - 1)];
                    if j == i {
                        j = pool[pool.len() - 1];
                    }
                    references[1] = &examples[j].stack;
                }
            }
            BatchItem {
                example: ex,
                references,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

impl MetricRow {
    fn to_tsv(&self) -> String {
        let v = |f: fn(&LossBreakdown) -> f64| {
            self.val
                .as_ref()
                .map_or("-".to_string(), |l| format!("{:.6}", f(l)))
        };
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            self.step,
            self.lr,
            self.train.total,
            self.train.mel_mae,
            self.train.dur_mse,
            v(|l| l.total),
            v(|l| l.mel_mae),
            v(|l| l.dur_mse),
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_loss: Option<f64>,
    /// Teacher-forced loss on a fixed training subset before and after this run.
    pub initial_train: LossBreakdown,
    pub final_train: LossBreakdown,
    pub history: Vec<MetricRow>,
}

/// Number of training utterances used for the before/after loss probe.
const PROBE_SIZE: usize = 64;

struct Run<'a> {
    model_cfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    train_speakers: Vec<String>,
    dir: PathBuf,
}

impl Run<'_> {
    fn checkpoint(
        &self,
        model: &TtsModel<f32>,
        opt: &OptimizerState<f32>,
        best: Option<f64>,
    ) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            step: opt.step(),
            best_val_loss: best,
            train_speakers: self.train_speakers.clone(),
            model: self.model_cfg.clone(),
            train: self.cfg.clone(),
        };
        let mut c = Checkpoint {
            metadata: meta.to_toml()?,
            tensors: Vec::new(),
        };
        c.push_params(model);
        c.push_optimizer(opt);
        Ok(c)
    }

    fn log(&self, row: &MetricRow) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        text.push_str(&row.to_tsv());
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }
}

fn check_resume(meta: &CheckpointMeta, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    if meta.model != *model_cfg {
        let field = if meta.model.mode != model_cfg.mode {
            "model.mode".to_string()
        } else if meta.model.aggregator != model_cfg.aggregator {
            "model.aggregator".to_string()
        } else {
            "model".to_string()
        };
        return Err(Error::Config(format!(
            "cannot resume: {field} differs from the checkpoint"
        )));
    }
    let same_schedule = meta.train.seed == cfg.seed
        && meta.train.batch_size == cfg.batch_size
        && meta.train.warmup_steps == cfg.warmup_steps
        && meta.train.lr_scale == cfg.lr_scale
        && meta.train.lambda_mel == cfg.lambda_mel
        && meta.train.lambda_dur == cfg.lambda_dur
        && meta.train.duration_reference == cfg.duration_reference
        && meta.train.adam == cfg.adam;
    if !same_schedule {
        return Err(Error::Config(
            "cannot resume: seed, batch size, schedule, loss weights or optimizer settings differ from the checkpoint"
                .into(),
        ));
    }
    if meta.step > cfg.max_steps {
        return Err(Error::Config(format!(
            "cannot resume: checkpoint is at step {} beyond train.max_steps {}",
            meta.step, cfg.max_steps
        )));
    }
    Ok(())
}

/// Trains from scratch, or continues from `resume_from`, until
/// `cfg.max_steps`. Writes `last.ckpt` every `checkpoint_interval` steps and
/// at the end, `best.ckpt` whenever validation improves, and appends to
/// `metrics.tsv`, all under `cfg.checkpoint_dir`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Manifest,
    val_set: &Manifest,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training manifest has no records".into()));
    }
    let examples = load_examples(train_set, model_cfg)?;
    let mut val_examples = load_examples(val_set, model_cfg)?;
    if cfg.validation_limit > 0 {
        val_examples.truncate(cfg.validation_limit);
    }
    train_examples(model_cfg, cfg, &examples, &val_examples, resume_from)
}

/// [`train`] on preloaded examples.
pub fn train_examples(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    examples: &[Example],
    val_examples: &[Example],
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if cfg.duration_reference != DurationReference::Same
        && model_cfg.mode == ConditioningMode::Common
    {
        return Err(Error::Config(
            "train.duration_reference needs model.mode = separate; common mode has a single embedding".into(),
        ));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_speaker.entry(e.speaker.as_str()).or_default().push(i);
    }
    let dir = cfg.checkpoint_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut train_speakers: Vec<String> = examples.iter().map(|e| e.speaker.clone()).collect();
    train_speakers.sort();
    train_speakers.dedup();
    let run = Run {
        model_cfg,
        cfg,
        train_speakers,
        dir: dir.clone(),
    };

    let mut model = TtsModel::<f32>::new(model_cfg.clone())?;
    let (mut opt, mut best) = match resume_from {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            let meta = CheckpointMeta::from_toml(&ckpt.metadata)?;
            check_resume(&meta, model_cfg, cfg)?;
            let mut restored = TtsModel::<f32>::new(model_cfg.clone())?;
            ckpt.load_params(&mut restored)?;
            let opt = ckpt.load_optimizer(&restored, cfg.adam, meta.step)?;
            model = restored;
            (opt, meta.best_val_loss)
        }
        None => (OptimizerState::new(&model, cfg.adam), None),
    };

    let probe = &examples[..examples.len().min(PROBE_SIZE)];
    let initial_train = evaluate_loss(&model, probe)?.breakdown(cfg.lambda_mel, cfg.lambda_dur);
    let last_path = dir.join(LAST_CHECKPOINT);
    let best_path = dir.join(BEST_CHECKPOINT);
    let mut history = Vec::new();

    if opt.step() == 0 && cfg.max_steps == 0 {
        run.checkpoint(&model, &opt, best)?.write(&last_path)?;
    }

    while opt.step() < cfg.max_steps {
        let step = opt.step() + 1;
        let lr = noam_lr(step, model_cfg.hidden, cfg.warmup_steps, cfg.lr_scale)?;
        let batch = assemble_batch(examples, &by_speaker, &model, cfg, step);
        let sums = accumulate_batch(&mut model, &batch, cfg.lambda_mel, cfg.lambda_dur)?;
        let loss = sums.breakdown(cfg.lambda_mel, cfg.lambda_dur);
        if !loss.total.is_finite() {
            return Err(Error::TrainingDiverged {
                param: "loss".into(),
            });
        }
        opt.adam_step(&mut model, lr)?;

        let val = if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            if val_examples.is_empty() {
                None
            } else {
                let v =
                    evaluate_loss(&model, val_examples)?.breakdown(cfg.lambda_mel, cfg.lambda_dur);
                if !v.total.is_finite() {
                    return Err(Error::TrainingDiverged {
                        param: "validation loss".into(),
                    });
                }
                Some(v)
            }
        } else {
            None
        };
        if let Some(v) = val {
            if best.is_none_or(|b| v.total < b) {
                best = Some(v.total);
                run.checkpoint(&model, &opt, best)?.write(&best_path)?;
            }
        }
        let row = MetricRow {
            step,
            lr,
            train: loss,
            val,
        };
        run.log(&row)?;
        if step % 50 == 0 || val.is_some() {
            log::info!(
                "step {step} lr {lr:.3e} loss {:.4} mel {:.4} dur {:.4}{}",
                loss.total,
                loss.mel_mae,
                loss.dur_mse,
                val.map_or(String::new(), |v| format!(" val {:.4}", v.total))
            );
        }
        history.push(row);
        if step % cfg.checkpoint_interval == 0 || step == cfg.max_steps {
            run.checkpoint(&model, &opt, best)?.write(&last_path)?;
        }
    }
    if !last_path.exists() {
        run.checkpoint(&model, &opt, best)?.write(&last_path)?;
    }

    let final_train = evaluate_loss(&model, probe)?.breakdown(cfg.lambda_mel, cfg.lambda_dur);
    Ok(TrainOutcome {
        final_step: opt.step(),
        last_checkpoint: last_path,
        best_checkpoint: best_path.exists().then_some(best_path),
        best_val_loss: best,
        initial_train,
        final_train,
        history,
    })
}
