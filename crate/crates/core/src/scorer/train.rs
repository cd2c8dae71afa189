//! CTC training loop for the scorer.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::model::ScorerModel;
use crate::error::{AtmError, Result};
use crate::features::{LogMel, Utterance};
use crate::nn::{adam_step, reduce_gradients, AdamConfig, Graph, OptimizerState, Tensor};
use crate::par::{self, Execution};
use crate::rng::{keyed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            steps: 1500,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig {
                peak_lr: 2e-3,
                warmup_steps: 150,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub id: String,
    pub feats: Tensor,
    pub labels: Vec<usize>,
}

/// Featurises a labelled corpus; an utterance without labels is a data error.
pub fn prepare_labeled(utts: &[Utterance], frontend: &LogMel, exec: Execution) -> Result<Vec<LabeledExample>> {
    par::try_map_indexed(exec, utts, |_, u| {
        let labels = u
            .labels
            .clone()
            .ok_or_else(|| AtmError::Data(format!("{}: utterance has no labels", u.id)))?;
        Ok(LabeledExample {
            id: u.id.clone(),
            feats: frontend.featurize(u)?.frames,
            labels,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerStepLog {
    pub step: u64,
    pub ctc_loss: f64,
    pub lr: f64,
}

pub struct ScorerTrainer {
    pub model: ScorerModel,
    pub opt: OptimizerState,
    pub config: ScorerTrainConfig,
}

impl ScorerTrainer {
    pub fn new(model: ScorerModel, config: ScorerTrainConfig) -> Self {
        let opt = OptimizerState::new(&model.store, config.adam);
        ScorerTrainer { model, opt, config }
    }

    /// Mean CTC loss of `example` under the current parameters.
    pub fn loss(&self, example: &LabeledExample) -> Result<f64> {
        let mut g = Graph::new(&self.model.store);
        let logits = self.model.logits(&mut g, &example.feats)?;
        let loss = g.ctc_loss(logits, &example.labels)?;
        Ok(g.value(loss).item() as f64)
    }

    /// One optimisation step on a batch drawn from `(seed, step)`.
    pub fn step(&mut self, data: &[LabeledExample], exec: Execution) -> Result<ScorerStepLog> {
        if data.is_empty() {
            return Err(AtmError::Data("scorer training set is empty".into()));
        }
        let step = self.opt.step + 1;
        let mut rng = keyed(self.config.seed, Stream::Batch, step, 0);
        let batch: Vec<usize> = sample(&mut rng, data.len(), self.config.batch_size.min(data.len())).into_vec();
        let model = &self.model;
        let results = par::try_map_indexed(exec, &batch, |_, &i| {
            let ex = &data[i];
            let mut g = Graph::new(&model.store);
            let logits = model.logits(&mut g, &ex.feats)?;
            let loss = g.ctc_loss(logits, &ex.labels).map_err(|e| match e {
                AtmError::InfeasibleAlignment { .. } => AtmError::Data(format!("{}: {e}", ex.id)),
                e => e,
            })?;
            let value = g.value(loss).item() as f64;
            Ok::<_, AtmError>((value, g.backward(loss)?.into_params()))
        })?;
        let n = results.len();
        let ctc_loss = results.iter().map(|r| r.0).sum::<f64>() / n as f64;
        let grads = reduce_gradients(results.into_iter().map(|r| r.1).collect(), 1.0 / n as f32);
        let lr = adam_step(&mut self.model.store, &grads, &mut self.opt)?;
        Ok(ScorerStepLog { step, ctc_loss, lr })
    }
}

/// Runs `config.steps` steps from a fresh optimiser and reports each step.
pub fn train_scorer(
    model: ScorerModel,
    data: &[LabeledExample],
    config: ScorerTrainConfig,
    exec: Execution,
    mut on_step: impl FnMut(&ScorerStepLog),
) -> Result<(ScorerModel, Vec<ScorerStepLog>)> {
    let mut trainer = ScorerTrainer::new(model, config);
    let mut log = Vec::with_capacity(trainer.config.steps as usize);
    while trainer.opt.step < trainer.config.steps {
        let entry = trainer.step(data, exec)?;
        on_step(&entry);
        log.push(entry);
    }
    Ok((trainer.model, log))
}
