//! Optimizers, reference freezing, hint pretraining and the training loop.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsReport;
use crate::env::{critique, Task};
use crate::error::{Result, RpoError};
use crate::grad::add_expected_logprob_grad;
use crate::math::{mean, pairwise_sum};
use crate::objectives::{dpo_loss, margin, rpo_loss, LossHyper, PreferenceRecord};
use crate::policy::{Context, Policy};
use crate::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Rpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub hyper: LossHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Steps between diagnostic snapshots; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Rpo,
            hyper: LossHyper::default(),
            epochs: 4,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(RpoError::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RpoError::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(RpoError::invalid("Adam betas must lie in [0, 1) and eps must be > 0"));
        }
        Ok(())
    }
}

/// First-order optimizer state over a contiguous slice of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig, n: usize) -> Self {
        Optimizer {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            ..Self::new(cfg.optimizer, cfg.learning_rate, n)
        }
    }

    /// One descent step: `params -= update(grad)`. Slices must have the
    /// length the optimizer was built for.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t);
                let bc2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// A deep copy that training never touches.
pub fn freeze_reference(policy: &Policy) -> Policy {
    policy.clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub pref: f64,
    pub rd: f64,
    pub anc: f64,
    pub mean_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub report: DiagnosticsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,pref,rd,anc,mean_margin\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.step, r.loss, r.pref, r.rd, r.anc, r.mean_margin
            ));
        }
        s
    }
}

/// Snapshot hook: called every `eval_every` steps with the current step, the
/// policy and the frozen reference.
pub type SnapshotFn<'a> = dyn FnMut(usize, &Policy, &Policy) -> Result<DiagnosticsReport> + 'a;

pub fn train(policy: &Policy, corpus: &[PreferenceRecord], cfg: &TrainConfig) -> Result<(Policy, TrainTrace)> {
    train_with_snapshots(policy, corpus, cfg, None)
}

/// Minibatch training against a reference frozen at entry. Degenerate
/// records are skipped; each epoch reshuffles with the configured seed.
pub fn train_with_snapshots(
    policy: &Policy,
    corpus: &[PreferenceRecord],
    cfg: &TrainConfig,
    mut snapshot: Option<&mut SnapshotFn<'_>>,
) -> Result<(Policy, TrainTrace)> {
    cfg.validate()?;
    let reference = freeze_reference(policy);
    let usable: Vec<&PreferenceRecord> = corpus.iter().filter(|r| !r.meta.degenerate).collect();
    if usable.is_empty() {
        return Err(RpoError::invalid("no usable (non-degenerate) records in the corpus"));
    }
    for r in &usable {
        r.validate(policy)?;
    }
    let mut current = policy.clone();
    let mut last_good = policy.clone();
    let mut opt = Optimizer::from_config(cfg, current.num_params());
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = TrainTrace::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferenceRecord> = chunk.iter().map(|&i| usable[i].clone()).collect();
            let margins = batch
                .iter()
                .map(|r| margin(&current, r, false))
                .collect::<Result<Vec<f64>>>()?;
            let (loss, pref, rd, anc, grad) = match cfg.loss {
                LossKind::Dpo => {
                    let (l, g) = dpo_loss(&current, &reference, &batch, cfg.hyper.beta)?;
                    (l, l, 0.0, 0.0, g)
                }
                LossKind::Rpo => {
                    let b = rpo_loss(&current, &reference, &batch, &cfg.hyper)?;
                    (b.total, b.pref, b.rd, b.anc, b.grad)
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(RpoError::Diverged {
                    step,
                    reason: format!("non-finite loss or gradient (loss = {loss})"),
                    last_good: Box::new(last_good),
                });
            }
            trace.rows.push(TraceRow {
                step,
                loss,
                pref,
                rd,
                anc,
                mean_margin: mean(&margins),
            });
            last_good.params.copy_from_slice(&current.params);
            opt.step(&mut current.params, &grad);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                if let Some(f) = snapshot.as_deref_mut() {
                    let report = f(step, &current, &reference)?;
                    trace.snapshots.push(Snapshot { step, report });
                }
            }
        }
    }
    if let Some(i) = current.params.iter().position(|p| !p.is_finite()) {
        return Err(RpoError::Diverged {
            step,
            reason: format!("parameter {i} became non-finite"),
            last_good: Box::new(last_good),
        });
    }
    Ok((current, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HintPretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for HintPretrainConfig {
    fn default() -> Self {
        HintPretrainConfig {
            steps: 200,
            learning_rate: 0.1,
        }
    }
}

/// Fits only the hint-offset parameters so that, given an oracle hint for a
/// sampled response, the hinted slot is likely to carry the hinted token.
///
/// Each step samples one response per context, critiques it and takes an
/// Adam step on the mean of `−log P(y_pos = target | x, h)`. Parameters
/// outside [`Policy::hint_range`] are never written.
pub fn hint_pretrain<R: rand::Rng + ?Sized>(
    policy: &Policy,
    task: &Task,
    cfg: &HintPretrainConfig,
    rng: &mut R,
) -> Result<Policy> {
    let mut out = policy.clone();
    let range: Range<usize> = out.hint_range();
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, range.len());
    let v = out.vocab.size;
    let n = out.vocab.enumerable(crate::policy::DEFAULT_ENUM_BUDGET)?;
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; out.num_params()];
        let mut hinted = Vec::new();
        for x in 0..task.num_contexts {
            let y = out.sample(&Context::bare(x), rng)?;
            if let Some(h) = critique(task, x, &y)?.hint {
                hinted.push((x, h));
            }
        }
        if hinted.is_empty() {
            continue;
        }
        let scale = 1.0 / hinted.len() as f64;
        for (x, h) in hinted {
            let ctx = Context::hinted(x, h);
            let p = out.enumerate_distribution(&ctx)?;
            // digit of `position` in base-V index
            let stride = v.pow((out.vocab.max_len - 1 - h.position) as u32);
            let hit = |idx: usize| (idx / stride) % v == h.target_token;
            let mass = pairwise_sum(&(0..n).filter(|&i| hit(i)).map(|i| p[i]).collect::<Vec<_>>());
            // ∇(−log P(A)) = −E_{p|A}[∇ log p]
            let w: Vec<f64> = (0..n)
                .map(|i| if hit(i) { -scale * p[i] / mass } else { 0.0 })
                .collect();
            add_expected_logprob_grad(&out, &ctx, &w, &mut grad)?;
        }
        opt.step(&mut out.params[range.clone()], &grad[range.clone()]);
    }
    Ok(out)
}

/// First step count at which the trailing `window`-step mean loss is at or
/// below `threshold`.
pub fn steps_to_threshold(losses: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    if losses.len() < w {
        return None;
    }
    let mut sum: f64 = losses[..w].iter().sum();
    if sum / w as f64 <= threshold {
        return Some(w);
    }
    for i in w..losses.len() {
        sum += losses[i] - losses[i - w];
        if sum / w as f64 <= threshold {
            return Some(i + 1);
        }
    }
    None
}

/// Mean of the last `window` losses.
pub fn final_loss(losses: &[f64], window: usize) -> f64 {
    let w = window.max(1).min(losses.len());
    mean(&losses[losses.len() - w..])
}
