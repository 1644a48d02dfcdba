//! The loss family: DPO, the severity-weighted preference term, reflective
//! distillation, the ground-truth anchor and their combination, each with an
//! analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpoError};
use crate::grad::{add_expected_logprob_grad, add_logprob_grad};
use crate::math::{kl_from_logs, neg_log_sigmoid, pairwise_sum, sigmoid};
use crate::policy::{Context, HintId, Policy, TokenSeq};

/// How a preference pair was constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    SelfEvolution,
    Injection,
    Recognition,
    Reflective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub source: Paradigm,
    /// Set when the generator could not produce a proper pair; trainers skip these.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub ctx: usize,
    pub y_plus: TokenSeq,
    pub y_minus: TokenSeq,
    pub hint: Option<HintId>,
    pub w_hal: f64,
    pub y_gt: Option<TokenSeq>,
    pub meta: RecordMeta,
}

impl PreferenceRecord {
    pub fn bare_context(&self) -> Context {
        Context::bare(self.ctx)
    }

    pub fn validate(&self, policy: &Policy) -> Result<()> {
        policy.check_context(&Context {
            context_id: self.ctx,
            hint: self.hint,
        })?;
        policy.vocab.validate_seq(&self.y_plus)?;
        policy.vocab.validate_seq(&self.y_minus)?;
        if let Some(gt) = &self.y_gt {
            policy.vocab.validate_seq(gt)?;
        }
        if !(1.0..=2.0).contains(&self.w_hal) {
            return Err(RpoError::invalid(format!("w_hal {} outside [1, 2]", self.w_hal)));
        }
        Ok(())
    }

    fn gt(&self) -> Result<&TokenSeq> {
        self.y_gt
            .as_ref()
            .ok_or_else(|| RpoError::invalid(format!("record for context {} has no y_gt", self.ctx)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyper {
    pub beta: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Treat the hint-conditioned distribution in the distillation term as a
    /// constant teacher.
    pub rd_stop_grad_teacher: bool,
    /// When set, estimate the distillation term from this many samples of the
    /// hint-conditioned policy instead of enumerating.
    pub rd_samples: Option<usize>,
    pub rd_sample_seed: u64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            beta: 0.1,
            delta: 0.0,
            lambda1: 0.2,
            lambda2: 0.2,
            rd_stop_grad_teacher: true,
            rd_samples: None,
            rd_sample_seed: 0,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(RpoError::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.delta.is_finite() {
            return Err(RpoError::invalid("delta must be finite"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(RpoError::invalid("lambda1 and lambda2 must be >= 0"));
        }
        if self.rd_samples == Some(0) {
            return Err(RpoError::invalid("rd_samples must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pref: f64,
    pub rd: f64,
    pub anc: f64,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

fn check_pair(policy: &Policy, reference: &Policy, batch: &[PreferenceRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(RpoError::invalid("empty batch"));
    }
    if policy.kind != reference.kind
        || policy.vocab != reference.vocab
        || policy.num_contexts != reference.num_contexts
    {
        return Err(RpoError::invalid("policy and reference policy have different shapes"));
    }
    Ok(())
}

/// `log π(y⁺|x) − log π(y⁻|x)`, or with the hint conditioning the chosen side.
pub fn margin(policy: &Policy, rec: &PreferenceRecord, use_hint: bool) -> Result<f64> {
    let bare = rec.bare_context();
    let chosen_ctx = if use_hint {
        let h = rec
            .hint
            .ok_or_else(|| RpoError::invalid("margin with use_hint requires a hinted record"))?;
        Context::hinted(rec.ctx, h)
    } else {
        bare
    };
    Ok(policy.log_prob(&chosen_ctx, &rec.y_plus)? - policy.log_prob(&bare, &rec.y_minus)?)
}

/// `log π(y|x) − log π_ref(y|x)`.
fn log_ratio(policy: &Policy, reference: &Policy, ctx: &Context, y: &[usize]) -> Result<f64> {
    Ok(policy.log_prob(ctx, y)? - reference.log_prob(ctx, y)?)
}

/// Preference term with the chosen log-ratio scaled by `w(rec)`.
fn weighted_pref<W>(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferenceRecord],
    beta: f64,
    weight: W,
) -> Result<(f64, Vec<f64>)>
where
    W: Fn(&PreferenceRecord) -> f64,
{
    check_pair(policy, reference, batch)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut losses = Vec::with_capacity(batch.len());
    for rec in batch {
        let ctx = rec.bare_context();
        let w = weight(rec);
        let chosen = log_ratio(policy, reference, &ctx, &rec.y_plus)?;
        let rejected = log_ratio(policy, reference, &ctx, &rec.y_minus)?;
        let z = beta * (w * chosen - rejected);
        losses.push(neg_log_sigmoid(z));
        // d/dz −log σ(z) = −σ(−z)
        let coef = -sigmoid(-z) * beta / n;
        add_logprob_grad(policy, &ctx, &rec.y_plus, coef * w, &mut grad)?;
        add_logprob_grad(policy, &ctx, &rec.y_minus, -coef, &mut grad)?;
    }
    Ok((pairwise_sum(&losses) / n, grad))
}

/// Mean DPO loss over the batch and its gradient with respect to `policy`.
pub fn dpo_loss(policy: &Policy, reference: &Policy, batch: &[PreferenceRecord], beta: f64) -> Result<(f64, Vec<f64>)> {
    weighted_pref(policy, reference, batch, beta, |_| 1.0)
}

/// Severity-weighted preference term: only the chosen log-ratio is scaled by `w_hal`.
pub fn pref_loss(policy: &Policy, reference: &Policy, batch: &[PreferenceRecord], beta: f64) -> Result<(f64, Vec<f64>)> {
    weighted_pref(policy, reference, batch, beta, |r| r.w_hal)
}

/// Anchor: mean of `−log σ(β·(log π(y_GT|x) − log π_ref(y_GT|x)) − δ)`.
pub fn anc_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferenceRecord],
    beta: f64,
    delta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_pair(policy, reference, batch)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut losses = Vec::with_capacity(batch.len());
    for rec in batch {
        let ctx = rec.bare_context();
        let gt = rec.gt()?;
        let z = beta * log_ratio(policy, reference, &ctx, gt)? - delta;
        losses.push(neg_log_sigmoid(z));
        add_logprob_grad(policy, &ctx, gt, -sigmoid(-z) * beta / n, &mut grad)?;
    }
    Ok((pairwise_sum(&losses) / n, grad))
}

/// Reflective distillation: mean over hinted records of
/// `KL(π(·|x,h) ‖ π(·|x))`. Returns zero when no record carries a hint.
pub fn rd_loss(policy: &Policy, batch: &[PreferenceRecord], hyper: &LossHyper) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; policy.num_params()];
    let hinted: Vec<(usize, &PreferenceRecord, HintId)> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.hint.map(|h| (i, r, h)))
        .collect();
    if hinted.is_empty() {
        return Ok((0.0, grad));
    }
    let n = hinted.len() as f64;
    let mut values = Vec::with_capacity(hinted.len());
    for (i, rec, h) in hinted {
        let teacher = Context::hinted(rec.ctx, h);
        let student = rec.bare_context();
        let kl = match hyper.rd_samples {
            None => rd_exact(policy, &teacher, &student, hyper.rd_stop_grad_teacher, 1.0 / n, &mut grad)?,
            Some(m) => {
                let mut rng = crate::rng_from_seed(crate::mix_seed(hyper.rd_sample_seed, i as u64));
                rd_sampled(policy, &teacher, &student, hyper.rd_stop_grad_teacher, m, 1.0 / n, &mut rng, &mut grad)?
            }
        };
        values.push(kl);
    }
    Ok((pairwise_sum(&values) / n, grad))
}

fn rd_exact(
    policy: &Policy,
    teacher: &Context,
    student: &Context,
    stop_grad: bool,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let log_t = policy.log_probs(teacher)?;
    let log_s = policy.log_probs(student)?;
    let t: Vec<f64> = log_t.iter().map(|l| l.exp()).collect();
    // student side: −Σ T ∇log S
    let w_s: Vec<f64> = t.iter().map(|ti| -scale * ti).collect();
    add_expected_logprob_grad(policy, student, &w_s, grad)?;
    if !stop_grad {
        // teacher side: Σ T (log T − log S) ∇log T
        let w_t: Vec<f64> = (0..t.len()).map(|j| scale * t[j] * (log_t[j] - log_s[j])).collect();
        add_expected_logprob_grad(policy, teacher, &w_t, grad)?;
    }
    Ok(kl_from_logs(&log_t, &log_s))
}

#[allow(clippy::too_many_arguments)]
fn rd_sampled(
    policy: &Policy,
    teacher: &Context,
    student: &Context,
    stop_grad: bool,
    samples: usize,
    scale: f64,
    rng: &mut crate::Rng,
    grad: &mut [f64],
) -> Result<f64> {
    let m = samples as f64;
    let mut ratios = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = policy.sample(teacher, rng)?;
        let r = policy.log_prob(teacher, &y)? - policy.log_prob(student, &y)?;
        add_logprob_grad(policy, student, &y, -scale / m, grad)?;
        if !stop_grad {
            add_logprob_grad(policy, teacher, &y, scale * r / m, grad)?;
        }
        ratios.push(r);
    }
    Ok(pairwise_sum(&ratios) / m)
}

/// `pref + λ1·rd + λ2·anc` with its gradient.
pub fn rpo_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferenceRecord],
    hyper: &LossHyper,
) -> Result<LossBreakdown> {
    hyper.validate()?;
    check_pair(policy, reference, batch)?;
    for rec in batch {
        rec.gt()?;
    }
    let (pref, g_pref) = pref_loss(policy, reference, batch, hyper.beta)?;
    let (rd, g_rd) = rd_loss(policy, batch, hyper)?;
    let (anc, g_anc) = anc_loss(policy, reference, batch, hyper.beta, hyper.delta)?;
    let grad = g_pref
        .iter()
        .zip(&g_rd)
        .zip(&g_anc)
        .map(|((p, r), a)| p + hyper.lambda1 * r + hyper.lambda2 * a)
        .collect();
    Ok(LossBreakdown {
        total: pref + hyper.lambda1 * rd + hyper.lambda2 * anc,
        pref,
        rd,
        anc,
        grad,
    })
}

fn split_hint(ctx: &Context) -> Result<(Context, Context)> {
    if ctx.hint.is_none() {
        return Err(RpoError::invalid("reflection KL needs a hinted context"));
    }
    Ok((*ctx, ctx.without_hint()))
}

/// `KL(π(·|x,h) ‖ π(·|x))` by summation over the enumerated sequence space.
pub fn reflection_kl(policy: &Policy, ctx_with_hint: &Context) -> Result<f64> {
    let (t, s) = split_hint(ctx_with_hint)?;
    Ok(kl_from_logs(&policy.log_probs(&t)?, &policy.log_probs(&s)?))
}

/// The same quantity as [`reflection_kl`], computed as the expectation of the
/// per-sequence log-ratio with each term evaluated by [`Policy::log_prob`].
pub fn reflection_kl_expectation(policy: &Policy, ctx_with_hint: &Context) -> Result<f64> {
    let (t, s) = split_hint(ctx_with_hint)?;
    let n = policy.vocab.enumerable(crate::policy::DEFAULT_ENUM_BUDGET)?;
    let mut terms = Vec::with_capacity(n);
    for idx in 0..n {
        let y = policy.vocab.index_seq(idx);
        let lt = policy.log_prob(&t, &y)?;
        terms.push(lt.exp() * (lt - policy.log_prob(&s, &y)?));
    }
    Ok(pairwise_sum(&terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Monte-Carlo estimate of [`reflection_kl`] from hint-conditioned samples.
pub fn reflection_kl_mc<R: rand::Rng + ?Sized>(
    policy: &Policy,
    ctx_with_hint: &Context,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n < 2 {
        return Err(RpoError::invalid("Monte-Carlo estimate needs at least 2 samples"));
    }
    let (t, s) = split_hint(ctx_with_hint)?;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let y = policy.sample(&t, rng)?;
        vals.push(policy.log_prob(&t, &y)? - policy.log_prob(&s, &y)?);
    }
    let mean = pairwise_sum(&vals) / n as f64;
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
        n,
    })
}
