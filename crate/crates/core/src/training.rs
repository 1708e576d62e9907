//! Warmup/decay learning-rate schedule, AdamW and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Task};
use crate::error::{Error, Result};
use crate::eval::{self, MetricMap};
use crate::model::{decays, BoundParams, Model, ModelConfig, ParamStore};
use crate::numerics::{GradCheck, GradCheckReport, Tape, Tensor};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Randomly initialised desk-scale model: peak lr 1e-3.
    pub fn desk() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            betas: [0.9, 0.998],
            weight_decay: 0.01,
            total_steps: 200,
            warmup_frac: 0.1,
            batch_size: 8,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    /// Fine-tuning a pretrained backbone: peak lr 3e-5.
    pub fn fine_tune() -> Self {
        TrainConfig {
            peak_lr: 3e-5,
            ..Self::desk()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr", "must be positive");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas", "each must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac", "must lie strictly between 0 and 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over `round(warmup_frac * total_steps)` steps,
/// then linear decay to 0 at `total_steps`. Steps count from 1.
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> Result<f64> {
    let total = cfg.total_steps;
    if step == 0 || step > total {
        return Err(Error::Input(format!("step {step} outside [1, {total}]")));
    }
    let warm = cfg.warmup_steps().min(total);
    let peak = cfg.peak_lr;
    if step <= warm {
        Ok(peak * step as f64 / warm as f64)
    } else {
        Ok(peak * (total - step) as f64 / (total - warm) as f64)
    }
}

/// First and second moments per parameter, plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Hyper-parameters of one AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Bias-corrected Adam moments plus decoupled weight decay:
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    /// Decay is skipped for parameters exempted by [`decays`].
    pub fn update(&self, params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
        if grads.len() != params.len() || state.m.len() != params.len() {
            return Err(Error::Internal(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                state.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim("adamw", g.shape(), params.get(id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    params.name(id)
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter().enumerate() {
            let wd = if decays(params.name(id)) { self.weight_decay } else { 0.0 };
            let m = state.m[id].data_mut();
            let v = state.v[id].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// One AdamW update at the scheduled learning rate for `step`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    AdamW::from_config(cfg, lr_at_step(cfg, step)?).update(params, grads, state)
}

/// Mean loss over `batch` and its gradient for every parameter (zeros for
/// parameters the loss does not depend on).
pub fn loss_and_grads(model: &Model, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let loss = model.loss(&tape, &p, batch)?;
    let value = tape.value(loss).item()?;
    let mut g = tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Gradient-check result with the offending parameter named.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub worst_param: Option<String>,
}

/// Finite-difference check of the mean loss over `batch` with respect to
/// every parameter of `model`.
pub fn gradcheck_model(model: &Model, batch: &[Sample], check: &GradCheck) -> Result<ModelGradCheck> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut tensors = model.params().tensors().to_vec();
    let report = check.run(&mut tensors, |tape, vars| {
        model.loss(tape, &BoundParams::from_vars(vars.to_vec()), &refs)
    })?;
    let worst_param = report
        .worst
        .as_ref()
        .map(|w| model.params().name(w.param).to_string());
    Ok(ModelGradCheck {
        report,
        worst_param,
    })
}

/// One row of the per-step trace. Dev metrics are filled on the last step of
/// each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_acc: Option<f64>,
    pub dev_f1: Option<f64>,
}

pub const TRACE_HEADER: &str = "step,lr,train_loss,dev_acc,dev_f1";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{},{}\n",
            r.step,
            r.lr,
            r.train_loss,
            opt(r.dev_acc),
            opt(r.dev_f1)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub optimizer: OptimizerState,
    /// Parameters at the epoch end with the best dev score (earliest on ties).
    pub best_params: ParamStore,
    /// Step after which the best parameters were captured (0 = initialisation).
    pub best_step: usize,
    pub best_dev: Option<MetricMap>,
    pub trace: Vec<TraceRow>,
    /// Number of epochs started; resumes the shuffle stream.
    pub epochs: u64,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Result<Model> {
        Model::from_params(self.final_model.config().clone(), self.best_params.clone())
    }
}

fn epoch_order(n: usize, train_seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(seed::derive_named(train_seed, "shuffle"), epoch));
    idx.shuffle(&mut rng);
    idx
}

/// Trains every parameter of a freshly initialised `model_cfg` model.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: Task,
    train_set: &[Sample],
    dev_set: &[Sample],
) -> Result<TrainOutcome> {
    train_model(Model::new(model_cfg.clone())?, cfg, task, train_set, dev_set)
}

/// Full-parameter training: seeded per-epoch shuffles, batches of
/// `batch_size` (the last partial batch is kept), dev evaluation at each
/// epoch end, best-dev checkpoint selection.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    task: Task,
    train_set: &[Sample],
    dev_set: &[Sample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let metric = eval::primary_metric(task);
    let mut state = OptimizerState::new(model.params());
    let mut trace = Vec::with_capacity(cfg.total_steps);
    let mut best_params = model.params().clone();
    let mut best_step = 0;
    let mut best_dev: Option<MetricMap> = None;
    let mut step = 0;
    let mut epoch = 0u64;

    while step < cfg.total_steps {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        epoch += 1;
        let mut chunks = order.chunks(cfg.batch_size).peekable();
        while let Some(chunk) = chunks.next() {
            if step == cfg.total_steps {
                break;
            }
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            let lr = lr_at_step(cfg, step)?;
            AdamW::from_config(cfg, lr).update(model.params_mut(), &grads, &mut state)?;
            let mut row = TraceRow {
                step,
                lr,
                train_loss: loss,
                dev_acc: None,
                dev_f1: None,
            };
            let epoch_end = chunks.peek().is_none() || step == cfg.total_steps;
            if epoch_end && !dev_set.is_empty() {
                let m = eval::evaluate(&model, dev_set, task)?;
                row.dev_acc = Some(m["accuracy"]);
                row.dev_f1 = Some(m[metric]);
                let better = best_dev.as_ref().is_none_or(|b| m[metric] > b[metric]);
                if better {
                    best_params = model.params().clone();
                    best_step = step;
                    best_dev = Some(m);
                }
            }
            trace.push(row);
        }
    }
    if dev_set.is_empty() {
        best_params = model.params().clone();
        best_step = step;
    }
    Ok(TrainOutcome {
        final_model: model,
        optimizer: state,
        best_params,
        best_step,
        best_dev,
        trace,
        epochs: epoch,
    })
}
