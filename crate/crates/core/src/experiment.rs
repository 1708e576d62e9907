//! One complete run: regenerate the split, train, evaluate the selected checkpoint.

use crate::error::Result;
use crate::eval::{self, MetricMap};
use crate::persist::{Checkpoint, RngState, RunConfig};
use crate::training::{train, TrainOutcome};

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Dev metrics of the selected checkpoint.
    pub dev: MetricMap,
    /// Test metrics of the selected checkpoint.
    pub test: MetricMap,
}

impl RunResult {
    /// Best-dev parameters, without optimizer state.
    pub fn best_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            params: self.outcome.best_params.clone(),
            optimizer: None,
            rng: RngState {
                train_seed: config.train.seed,
                epochs: self.outcome.epochs,
                step: self.outcome.best_step as u64,
            },
        }
    }

    /// Parameters and optimizer state after the last step.
    pub fn final_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            params: self.outcome.final_model.params().clone(),
            optimizer: Some(self.outcome.optimizer.clone()),
            rng: RngState {
                train_seed: config.train.seed,
                epochs: self.outcome.epochs,
                step: self.outcome.trace.len() as u64,
            },
        }
    }
}

pub fn run(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let split = config.split()?;
    let task = config.data.task;
    let outcome = train(&config.model, &config.train, task, &split.train, &split.dev)?;
    let best = outcome.best_model()?;
    let dev = eval::evaluate(&best, &split.dev, task)?;
    let test = if split.test.is_empty() {
        MetricMap::new()
    } else {
        eval::evaluate(&best, &split.test, task)?
    };
    Ok(RunResult { outcome, dev, test })
}
