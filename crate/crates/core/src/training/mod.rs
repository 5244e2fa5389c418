//! Loss, optimizer, initialization, the training loop and evaluation.

mod init;
mod metrics;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use init::{fans, init_params, xavier_uniform_bound, InitConfig, InitOverride, InitScheme};
pub use metrics::{auc, logloss};
pub use optim::{adam_step, lr_at, AdamConfig, LrSchedule, OptimizerState};

use crate::error::{HhftError, Result};
use crate::features::{Batch, ExampleRecord};
use crate::model::{Model, ModelKind, Precision};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamCount;
use crate::seeding::stream;

/// Mean binary cross-entropy of `logits: [B]` against binary labels.
pub fn bce_loss(tape: &Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    tape.bce_with_logits(logits, labels)
}

fn default_warmup() -> f64 {
    0.05
}

fn default_eval_batch() -> usize {
    1024
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Fraction of all steps spent warming up.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 1,
            lr: 1e-3,
            schedule: LrSchedule::WarmupLinearDecay,
            warmup_frac: default_warmup(),
            adam: AdamConfig::default(),
            seed: 0,
            precision: Precision::F64,
            eval_every: 1,
            eval_batch: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HhftError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return err("batch_size, epochs, eval_every and eval_batch must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return err(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return err("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_auc: Option<f64>,
    pub eval_logloss: Option<f64>,
}

/// Everything a run reports except wall-clock time, which lives in a
/// separate timing record so reports stay byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub model: ModelKind,
    pub seed: u64,
    pub steps: u64,
    pub init_auc: f64,
    pub final_auc: f64,
    pub final_logloss: f64,
    pub best_auc: f64,
    pub best_epoch: usize,
    pub param_count: ParamCount,
    pub flops_per_record: usize,
    #[serde(default)]
    pub bayes_auc: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    /// Wall seconds per epoch.
    pub seconds: Vec<f64>,
    /// Parameter values at the best evaluated epoch.
    pub best_params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub auc: f64,
    pub logloss: f64,
    pub logits: Vec<f64>,
}

/// Logits for `records` in chunks of `chunk`.
pub fn predict_logits(model: &Model, records: &[ExampleRecord], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    let idx: Vec<usize> = (0..records.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let batch = Batch::gather(&model.config.schema, records, part)?;
        out.extend_from_slice(model.logits(&batch)?.data());
    }
    Ok(out)
}

pub fn evaluate(model: &Model, records: &[ExampleRecord], chunk: usize) -> Result<Evaluation> {
    let logits = predict_logits(model, records, chunk)?;
    let labels: Vec<f64> = records.iter().map(|r| f64::from(r.label)).collect();
    Ok(Evaluation {
        auc: auc(&logits, &labels)?,
        logloss: logloss(&logits, &labels)?,
        logits,
    })
}

/// Trains `model` in place on `train`, evaluating on `eval`.
///
/// Shuffling is drawn from `(seed, epoch)`; the returned report is a pure
/// function of the initial parameters, the data and `config`.
pub fn train(model: &mut Model, train: &[ExampleRecord], eval: &[ExampleRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(HhftError::Data("training set is empty".into()));
    }
    let schema = model.config.schema.clone();
    for (i, r) in train.iter().enumerate() {
        r.validate(&schema).map_err(|e| e.at_record(i).context("training set"))?;
    }
    for (i, r) in eval.iter().enumerate() {
        r.validate(&schema).map_err(|e| e.at_record(i).context("eval set"))?;
    }
    if config.precision == Precision::F32 {
        model.round_to_f32();
    }

    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let mut state = OptimizerState::new(&model.store, config.adam);
    let init_auc = evaluate(model, eval, config.eval_batch)?.auc;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut seconds = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.values().to_vec());
    let mut last_eval = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream(&[config.seed, 0x5348_5546, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::gather(&schema, train, chunk)?;
            let tape = Tape::new();
            let vars = model.store.register(&tape);
            let logits = model.forward(&tape, &vars, &batch)?;
            let loss = bce_loss(&tape, logits, &batch.labels)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars
                .all()
                .iter()
                .zip(model.store.values())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            drop(vars);
            let lr = lr_at(config.schedule, config.lr, config.warmup_frac, state.step + 1, total_steps);
            adam_step(&mut model.store, &g, &mut state, lr)?;
            if config.precision == Precision::F32 {
                model.round_to_f32();
            }
        }
        let mut row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_auc: None,
            eval_logloss: None,
        };
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let e = evaluate(model, eval, config.eval_batch)?;
            row.eval_auc = Some(e.auc);
            row.eval_logloss = Some(e.logloss);
            if e.auc > best.0 {
                best = (e.auc, epoch, model.store.values().to_vec());
            }
            last_eval = Some(e);
        }
        epochs.push(row);
        seconds.push(start.elapsed().as_secs_f64());
    }
    let last = last_eval.expect("last epoch is always evaluated");
    let report = RunReport {
        run_id: String::new(),
        model: model.kind(),
        seed: config.seed,
        steps: state.step,
        init_auc,
        final_auc: last.auc,
        final_logloss: last.logloss,
        best_auc: best.0,
        best_epoch: best.1,
        param_count: model.param_count(),
        flops_per_record: model.flops_estimate(1).total,
        bayes_auc: None,
        epochs,
        config: serde_json::Value::Null,
    };
    Ok(TrainOutcome {
        report,
        seconds,
        best_params: best.2,
    })
}
