//! AdamW training of the joint objective, run history and checkpoints.

mod checkpoint;
mod optim;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adamw_step, AdamW, OptimizerState};

use crate::data::{class_counts, corpus, make_batches, prepare_inputs, SplitSpec, SubjectRecord};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::model::{Model, ModelConfig, SubjectInput};
use crate::objective::{ClassWeights, LossFlags};
use crate::rng::derived;
use crate::tensor::Tape;
use crate::text::Vocabulary;

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub use_cl: bool,
    pub use_sl: bool,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    pub min_freq: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 32,
            batch_size: 8,
            use_cl: true,
            use_sl: true,
            min_freq: 1,
            seed: 0,
            model: ModelConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.weight_decay.is_nan()
            || self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("weight_decay must be ≥ 0 and betas in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.model.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Loss terms switched on by the config; alignment terms also need both
    /// modalities.
    pub fn loss_flags(&self) -> LossFlags {
        let both = self.model.is_bimodal();
        LossFlags {
            use_cl: self.use_cl && both,
            use_sl: self.use_sl && both,
            use_cls: true,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_cl")]
    pub l_cl: f64,
    #[serde(rename = "L_sl")]
    pub l_sl: f64,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub eval_acc: f64,
    pub eval_f1: f64,
}

/// Line-delimited JSON form of a history.
pub fn history_lines(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history records serialize") + "\n")
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocabulary,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
    /// Metrics on the eval set after the last epoch, if it was non-empty.
    pub final_metrics: Option<MetricsReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            epoch: self.history.len(),
            vocab: self.vocab.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Argmax predictions of `model` on prepared inputs.
pub fn evaluate(model: &Model, inputs: &[SubjectInput]) -> Result<MetricsReport> {
    let preds = model.predict(inputs)?;
    let labels: Vec<usize> = inputs.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels)
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op, .. } => Error::Divergence { term: op, epoch, batch },
        Error::NonFiniteLoss { term } => Error::Divergence { term, epoch, batch },
        other => other,
    }
}

/// Trains from scratch. The vocabulary and the class weights come from
/// `train_set` only. `eval_set` may be empty, in which case the history's
/// eval columns are zero.
pub fn train(config: &TrainConfig, train_set: &[SubjectRecord], eval_set: &[SubjectRecord]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let regions = config.model.regions;
    if let Some(r) = train_set
        .iter()
        .chain(eval_set)
        .find(|r| r.sc.region_count() != regions)
    {
        return Err(Error::Config(format!(
            "model expects N={regions} but subject {} has N={}",
            r.subject_id,
            r.sc.region_count()
        )));
    }
    let vocab = Vocabulary::build(&corpus(train_set), config.min_freq)?;
    let cfg = &config.model;
    let train_inputs = prepare_inputs(train_set, &vocab, cfg.max_len, cfg.input_transform)?;
    let eval_inputs = prepare_inputs(eval_set, &vocab, cfg.max_len, cfg.input_transform)?;
    let (nc, mci) = class_counts(train_set);
    let weights = ClassWeights::inverse_frequency(nc, mci)?;

    let mut model = Model::new(cfg.clone(), vocab.len(), &mut derived(config.seed, INIT_STREAM))?;
    let mut optimizer = OptimizerState::new(&model.params);
    let opt = config.optimizer();
    let flags = config.loss_flags();

    let mut history = Vec::with_capacity(config.epochs);
    let mut final_metrics = None;
    for epoch in 1..=config.epochs {
        let batches = make_batches(train_inputs.len(), config.batch_size, config.seed, epoch)?;
        let mut sums = [0.0; 4];
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&SubjectInput> = idx.iter().map(|&i| &train_inputs[i]).collect();
            let step = || -> Result<([f64; 4], Vec<_>)> {
                let mut tape = Tape::new();
                tape.bind_params(&model.params)?;
                let out = model.forward_batch(&mut tape, &batch, weights, flags)?;
                let grads = tape.backward(out.loss)?.params(&tape, &model.params);
                let value = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item());
                let losses = [
                    value(out.terms.cl),
                    value(out.terms.sl),
                    value(out.terms.cls),
                    tape.value(out.loss).item(),
                ];
                Ok((losses, grads))
            };
            let (losses, grads) = step().map_err(|e| divergence(e, epoch, b + 1))?;
            adamw_step(&mut model.params, &grads, &mut optimizer, &opt)?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
        }
        let n = batches.len() as f64;
        let metrics = if eval_inputs.is_empty() {
            None
        } else {
            Some(evaluate(&model, &eval_inputs)?)
        };
        history.push(EpochRecord {
            epoch,
            l_cl: sums[0] / n,
            l_sl: sums[1] / n,
            l_cls: sums[2] / n,
            l: sums[3] / n,
            eval_acc: metrics.map_or(0.0, |m| m.acc),
            eval_f1: metrics.map_or(0.0, |m| m.f1),
        });
        final_metrics = metrics;
    }
    Ok(TrainOutcome {
        model,
        vocab,
        optimizer,
        history,
        final_metrics,
    })
}

/// Splits `records` per `config.split`, then trains on the train part and
/// evaluates on the held-out part.
pub fn train_with_split(config: &TrainConfig, records: &[SubjectRecord]) -> Result<(TrainOutcome, Vec<SubjectRecord>)> {
    let (train_set, test_set) = crate::data::stratified_split(records, &config.split)?;
    let outcome = train(config, &train_set, &test_set)?;
    Ok((outcome, test_set))
}
