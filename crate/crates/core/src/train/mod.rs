//! Two-stage fused training: gate-only warm-up with frozen specialists, then
//! joint fine-tuning of every parameter.

mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_global_norm, cosine_lr, OptimConfig, OptimizerState};

use crate::data::{balanced_batches, mixed_batches, resolve, Batch, DomainCorpus};
use crate::error::{Error, Result};
use crate::fuser::FusedModel;
use crate::numcore::{Graph, Tensor};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Exactly `per_domain_batch` examples of every domain per batch.
    #[default]
    Balanced,
    /// Batches of `per_domain_batch * domains` drawn from the pooled corpora.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n1_steps: usize,
    pub n2_steps: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub per_domain_batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub sampler: SamplerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n1_steps: 200,
            n2_steps: 1000,
            lr1: 3e-4,
            lr2: 3e-4,
            per_domain_batch: 8,
            optim: OptimConfig::default(),
            seed: 0,
            sampler: SamplerKind::Balanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.per_domain_batch == 0 {
            return Err(Error::Config("per_domain_batch must be positive".into()));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    /// Step index within the stage, starting at 0.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub domain_loss: BTreeMap<String, f64>,
    /// Gradient buffers the backward passes of this step allocated.
    pub grad_buffers: usize,
}

/// Called after every optimizer step with the updated model.
pub type Observer<'a> = dyn FnMut(&StepRecord, &FusedModel) -> Result<()> + 'a;

/// Gate only; specialists enter the graph as constants.
pub fn train_stage1(
    model: &mut FusedModel,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
    observer: &mut Observer,
) -> Result<Vec<StepRecord>> {
    run_stage(model, corpora, cfg, 1, observer)
}

/// Gate and all specialists. Optimizer state starts fresh, including the
/// gate's, and the cosine schedule restarts over `n2_steps`.
pub fn train_stage2(
    model: &mut FusedModel,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
    observer: &mut Observer,
) -> Result<Vec<StepRecord>> {
    run_stage(model, corpora, cfg, 2, observer)
}

/// Both stages back to back.
pub fn train_fused(
    model: &mut FusedModel,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
    observer: &mut Observer,
) -> Result<Vec<StepRecord>> {
    let mut log = train_stage1(model, corpora, cfg, observer)?;
    log.extend(train_stage2(model, corpora, cfg, observer)?);
    Ok(log)
}

fn batches(corpora: &[DomainCorpus], cfg: &TrainConfig, stage: u8) -> Result<Box<dyn Iterator<Item = Batch>>> {
    let seed = cfg.seed.wrapping_add(stage as u64 - 1);
    Ok(match cfg.sampler {
        SamplerKind::Balanced => Box::new(balanced_batches(corpora, cfg.per_domain_batch, seed)?),
        SamplerKind::Mixed => Box::new(mixed_batches(corpora, cfg.per_domain_batch * corpora.len(), seed)?),
    })
}

fn run_stage(
    model: &mut FusedModel,
    corpora: &[DomainCorpus],
    cfg: &TrainConfig,
    stage: u8,
    observer: &mut Observer,
) -> Result<Vec<StepRecord>> {
    let (steps, base_lr) = if stage == 1 { (cfg.n1_steps, cfg.lr1) } else { (cfg.n2_steps, cfg.lr2) };
    if !(base_lr >= 0.0 && base_lr.is_finite()) {
        return Err(Error::Config(format!("stage {stage} learning rate {base_lr}")));
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let stage_name = format!("stage{stage}");
    let mut sampler = batches(corpora, cfg, stage)?;
    let mut gate_state = OptimizerState::new(model.gate.params.tensors());
    let mut spec_states: Vec<OptimizerState> = if stage == 2 {
        model.specialists.iter().map(|s| OptimizerState::new(s.params.tensors())).collect()
    } else {
        Vec::new()
    };
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next().expect("samplers are infinite");
        let lr = cosine_lr(step, steps, base_lr);
        let rec = fused_step(model, corpora, &batch, stage, &mut gate_state, &mut spec_states, lr, &cfg.optim)
            .map_err(|e| divergence(e, &stage_name, step))
            .map(|mut r| {
                r.step = step;
                r
            })?;
        if !rec.loss.is_finite() {
            return Err(Error::Divergence {
                stage: stage_name,
                step,
                loss: rec.loss,
            });
        }
        observer(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn fused_step(
    model: &mut FusedModel,
    corpora: &[DomainCorpus],
    batch: &[crate::data::ExampleRef],
    stage: u8,
    gate_state: &mut OptimizerState,
    spec_states: &mut [OptimizerState],
    lr: f64,
    optim: &OptimConfig,
) -> Result<StepRecord> {
    let trainable = stage == 2;
    let scale = 1.0 / batch.len() as f64;
    let mut gate_acc = GradAccumulator::new(model.gate.params.tensors());
    let mut spec_acc: Vec<GradAccumulator> = if trainable {
        model.specialists.iter().map(|s| GradAccumulator::new(s.params.tensors())).collect()
    } else {
        Vec::new()
    };
    let mut total = 0.0;
    let mut per_domain: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut buffers = 0;
    for &r in batch {
        let ex = resolve(corpora, r);
        let wrapped = model.wrap(ex)?;
        let mut g = Graph::new();
        let gate_vars = model.gate.params.to_graph(&mut g, true)?;
        let (outputs, spec_vars) = if trainable {
            let vars = model
                .specialists
                .iter()
                .map(|s| s.params.to_graph(&mut g, true))
                .collect::<Result<Vec<_>>>()?;
            (model.trainable_outputs(&mut g, &vars, &wrapped)?, vars)
        } else {
            (model.frozen_outputs(&mut g, &wrapped)?, Vec::new())
        };
        let loss = model.loss_graph(&mut g, &gate_vars, &outputs, &wrapped)?;
        let value = g.value(loss).item();
        total += value;
        let e = per_domain.entry(ex.domain.to_string()).or_default();
        e.0 += value;
        e.1 += 1;
        let mut grads = g.backward(loss)?;
        buffers += grads.buffers_allocated();
        gate_acc.take_from(&mut grads, &gate_vars, scale);
        for (acc, vars) in spec_acc.iter_mut().zip(&spec_vars) {
            acc.take_from(&mut grads, vars, scale);
        }
    }

    let mut groups: Vec<(&mut ParamSet, &mut OptimizerState, Vec<Tensor>)> =
        vec![(&mut model.gate.params, gate_state, gate_acc.finish())];
    for ((spec, state), acc) in model.specialists.iter_mut().zip(spec_states.iter_mut()).zip(spec_acc) {
        groups.push((&mut spec.params, state, acc.finish()));
    }
    let grad_norm = apply_update(groups, lr, optim)?;
    Ok(StepRecord {
        stage,
        step: 0,
        loss: total * scale,
        lr,
        grad_norm,
        domain_loss: per_domain.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        grad_buffers: buffers,
    })
}

/// Batch-mean gradient sums, one buffer per parameter tensor.
pub(crate) struct GradAccumulator {
    sums: Vec<Tensor>,
}

impl GradAccumulator {
    pub(crate) fn new(params: &[Tensor]) -> Self {
        GradAccumulator {
            sums: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub(crate) fn add(&mut self, i: usize, g: &Tensor, scale: f64) {
        self.sums[i].data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
    }

    pub(crate) fn take_from(&mut self, grads: &mut crate::numcore::Gradients, vars: &[crate::numcore::Var], scale: f64) {
        for (i, v) in vars.iter().enumerate() {
            if let Some(t) = grads.take(*v) {
                self.add(i, &t, scale);
            }
        }
    }

    pub(crate) fn finish(self) -> Vec<Tensor> {
        self.sums
    }
}

/// Clips the gradients of all groups jointly, then applies AdamW to each.
/// Returns the pre-clip global norm.
pub(crate) fn apply_update(
    groups: Vec<(&mut ParamSet, &mut OptimizerState, Vec<Tensor>)>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<f64> {
    let lens: Vec<usize> = groups.iter().map(|g| g.2.len()).collect();
    let mut targets = Vec::with_capacity(groups.len());
    let mut flat = Vec::new();
    for (p, s, g) in groups {
        targets.push((p, s));
        flat.extend(g);
    }
    let norm = match cfg.clip_norm {
        Some(max) => clip_global_norm(&mut flat, max),
        None => flat.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt(),
    };
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm".into()));
    }
    let mut rest = flat.into_iter();
    for ((params, state), n) in targets.into_iter().zip(lens) {
        let grads: Vec<Tensor> = rest.by_ref().take(n).collect();
        adamw_step(params.tensors_mut(), &grads, state, lr, cfg)?;
    }
    Ok(norm)
}

/// Numeric failures inside a training loop become divergence errors.
pub(crate) fn divergence(e: Error, stage: &str, step: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::Divergence {
            stage: stage.into(),
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}
