//! Gradient certification: every loss's analytic gradient against central
//! differences on random fixtures.
//!
//! With a stop-grad teacher the distillation gradient is, by design, not the
//! gradient of the KL as a function of θ. It is the gradient of the same KL
//! with the hint-conditioned distribution frozen at the evaluation point, so
//! that surrogate is what the finite-difference oracle differentiates.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RpoError};
use crate::grad::{finite_diff_grad_5pt, grad_check, GradCheckReport};
use crate::math::{kl_from_logs, pairwise_sum};
use crate::objectives::{anc_loss, dpo_loss, pref_loss, rd_loss, rpo_loss, LossHyper, Paradigm, PreferenceRecord, RecordMeta};
use crate::policy::{Context, HintId, Policy, PolicyKind, Vocab};
use crate::{mix_seed, rng_from_seed};

pub const FD_EPS: f64 = 1e-5;
/// Step for the fourth-order stencil used by loss certification (≈ ε_mach^(1/5)).
pub const CERT_FD_EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedLoss {
    Dpo,
    Pref,
    Anc,
    /// Distillation term, stop-grad teacher.
    Rd,
    /// Distillation term, gradient through both distributions.
    RdFull,
    /// Full RPO objective, stop-grad teacher.
    Rpo,
    /// Full RPO objective, gradient through both distributions.
    RpoFull,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 7] = [
        CheckedLoss::Dpo,
        CheckedLoss::Pref,
        CheckedLoss::Anc,
        CheckedLoss::Rd,
        CheckedLoss::RdFull,
        CheckedLoss::Rpo,
        CheckedLoss::RpoFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Dpo => "dpo",
            CheckedLoss::Pref => "pref",
            CheckedLoss::Anc => "anc",
            CheckedLoss::Rd => "rd",
            CheckedLoss::RdFull => "rd-full",
            CheckedLoss::Rpo => "rpo",
            CheckedLoss::RpoFull => "rpo-full",
        }
    }

    fn stop_grad(self) -> bool {
        matches!(self, CheckedLoss::Rd | CheckedLoss::Rpo)
    }
}

impl fmt::Display for CheckedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckedLoss {
    type Err = RpoError;
    fn from_str(s: &str) -> Result<Self> {
        CheckedLoss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = CheckedLoss::ALL.iter().map(|l| l.name()).collect();
                RpoError::invalid(format!("unknown loss {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct GradFixture {
    pub policy: Policy,
    pub reference: Policy,
    pub batch: Vec<PreferenceRecord>,
    pub hyper: LossHyper,
}

/// A small random policy/reference pair with a batch of 1–4 records.
/// Both policy kinds appear; hint offsets are nonzero so every term is live.
pub fn random_fixture(rng: &mut crate::Rng) -> Result<GradFixture> {
    let kind = if rng.random_bool(0.5) {
        PolicyKind::Tabular
    } else {
        PolicyKind::Bigram
    };
    let vocab = Vocab::new(rng.random_range(2..=4), rng.random_range(1..=3))?;
    let contexts = rng.random_range(1..=3);
    let policy = Policy::random(kind, vocab, contexts, 1.0, rng)?;
    let reference = Policy::random(kind, vocab, contexts, 1.0, rng)?;
    let seq = |rng: &mut crate::Rng| (0..vocab.max_len).map(|_| rng.random_range(0..vocab.size)).collect::<Vec<_>>();
    let n = rng.random_range(1..=4);
    let mut batch = Vec::with_capacity(n);
    for i in 0..n {
        // at least one hinted record so the distillation term is exercised
        let hint = (i == 0 || rng.random_bool(0.6)).then(|| HintId {
            position: rng.random_range(0..vocab.max_len),
            target_token: rng.random_range(0..vocab.size),
        });
        batch.push(PreferenceRecord {
            ctx: rng.random_range(0..contexts),
            y_plus: seq(rng),
            y_minus: seq(rng),
            hint,
            w_hal: rng.random_range(1.0..=2.0),
            y_gt: Some(seq(rng)),
            meta: RecordMeta {
                source: Paradigm::Reflective,
                degenerate: false,
            },
        });
    }
    let hyper = LossHyper {
        beta: rng.random_range(0.05..1.0),
        delta: rng.random_range(-0.5..0.5),
        lambda1: rng.random_range(0.0..1.0),
        lambda2: rng.random_range(0.0..1.0),
        ..LossHyper::default()
    };
    Ok(GradFixture {
        policy,
        reference,
        batch,
        hyper,
    })
}

fn with_params(template: &Policy, theta: &[f64]) -> Policy {
    let mut p = template.clone();
    p.params.copy_from_slice(theta);
    p
}

/// Distillation value with the teacher distributions fixed in `teachers`.
fn rd_frozen_teacher(policy: &Policy, batch: &[PreferenceRecord], teachers: &[Vec<f64>]) -> Result<f64> {
    if teachers.is_empty() {
        return Ok(0.0);
    }
    let mut kls = Vec::with_capacity(teachers.len());
    for (rec, log_t) in batch.iter().filter(|r| r.hint.is_some()).zip(teachers) {
        kls.push(kl_from_logs(log_t, &policy.log_probs(&rec.bare_context())?));
    }
    Ok(pairwise_sum(&kls) / kls.len() as f64)
}

fn teacher_logs(policy: &Policy, batch: &[PreferenceRecord]) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .filter_map(|r| r.hint.map(|h| Context::hinted(r.ctx, h)))
        .map(|ctx| policy.log_probs(&ctx))
        .collect()
}

/// Analytic gradient and the value function the oracle differentiates.
fn analytic_and_value(loss: CheckedLoss, fx: &GradFixture) -> Result<(Vec<f64>, Box<dyn Fn(&Policy) -> Result<f64> + '_>)> {
    let hyper = LossHyper {
        rd_stop_grad_teacher: loss.stop_grad(),
        ..fx.hyper.clone()
    };
    let (p, r, b) = (&fx.policy, &fx.reference, fx.batch.as_slice());
    let beta = hyper.beta;
    Ok(match loss {
        CheckedLoss::Dpo => (dpo_loss(p, r, b, beta)?.1, Box::new(move |q| Ok(dpo_loss(q, r, b, beta)?.0))),
        CheckedLoss::Pref => (pref_loss(p, r, b, beta)?.1, Box::new(move |q| Ok(pref_loss(q, r, b, beta)?.0))),
        CheckedLoss::Anc => {
            let d = hyper.delta;
            (anc_loss(p, r, b, beta, d)?.1, Box::new(move |q| Ok(anc_loss(q, r, b, beta, d)?.0)))
        }
        CheckedLoss::RdFull => {
            let g = rd_loss(p, b, &hyper)?.1;
            (g, Box::new(move |q| Ok(rd_loss(q, b, &hyper)?.0)))
        }
        CheckedLoss::Rd => {
            let teachers = teacher_logs(p, b)?;
            let g = rd_loss(p, b, &hyper)?.1;
            (g, Box::new(move |q| rd_frozen_teacher(q, b, &teachers)))
        }
        CheckedLoss::RpoFull => {
            let g = rpo_loss(p, r, b, &hyper)?.grad;
            (g, Box::new(move |q| Ok(rpo_loss(q, r, b, &hyper)?.total)))
        }
        CheckedLoss::Rpo => {
            let teachers = teacher_logs(p, b)?;
            let g = rpo_loss(p, r, b, &hyper)?.grad;
            (
                g,
                Box::new(move |q| {
                    let pref = pref_loss(q, r, b, hyper.beta)?.0;
                    let anc = anc_loss(q, r, b, hyper.beta, hyper.delta)?.0;
                    Ok(pref + hyper.lambda1 * rd_frozen_teacher(q, b, &teachers)? + hyper.lambda2 * anc)
                }),
            )
        }
    })
}

pub fn check_fixture(loss: CheckedLoss, fx: &GradFixture) -> Result<GradCheckReport> {
    let (analytic, value) = analytic_and_value(loss, fx)?;
    let mut err = None;
    let numeric = finite_diff_grad_5pt(
        |theta| match value(&with_params(&fx.policy, theta)) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        &fx.policy.params,
        CERT_FD_EPS,
    );
    if let Some(e) = err {
        return Err(e);
    }
    grad_check(&analytic, &numeric?, REL_TOL, ABS_TOL)
}

/// `n` fixtures drawn from `seed`; fixture `i` is independent of `n`.
pub fn certify(loss: CheckedLoss, n: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    (0..n)
        .map(|i| {
            let mut rng = rng_from_seed(mix_seed(seed, i as u64));
            check_fixture(loss, &random_fixture(&mut rng)?)
        })
        .collect()
}
