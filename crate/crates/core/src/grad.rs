//! Analytic gradients of sequence log-probabilities and the finite-difference
//! oracle that certifies them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpoError};
use crate::math::softmax;
use crate::policy::{Context, Policy, PolicyKind};

/// Gradient of `log π(y | ctx)` with respect to every parameter.
pub fn seq_logprob_grad(policy: &Policy, ctx: &Context, y: &[usize]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; policy.num_params()];
    add_logprob_grad(policy, ctx, y, 1.0, &mut g)?;
    Ok(g)
}

/// `out += scale · ∇ log π(y | ctx)`.
pub fn add_logprob_grad(policy: &Policy, ctx: &Context, y: &[usize], scale: f64, out: &mut [f64]) -> Result<()> {
    policy.check_context(ctx)?;
    policy.vocab.validate_seq(y)?;
    match policy.kind {
        PolicyKind::Bigram => {
            let mut prev = None;
            for &t in y {
                let p = softmax(&policy.bigram_logits(ctx, prev));
                add_bigram_step(policy, ctx, prev, t, &p, scale, out);
                prev = Some(t);
            }
        }
        PolicyKind::Tabular => {
            let p = softmax(&policy.tabular_logits(ctx));
            let idx = policy.vocab.seq_index(y);
            for row in tabular_rows(policy, ctx) {
                for (j, pj) in p.iter().enumerate() {
                    out[row + j] -= scale * pj;
                }
                out[row + idx] += scale;
            }
        }
    }
    Ok(())
}

/// `out += Σ_y w(y) · ∇ log π(y | ctx)` for weights over the enumerated
/// sequence space (indexed by [`crate::policy::Vocab::seq_index`]).
pub fn add_expected_logprob_grad(policy: &Policy, ctx: &Context, weights: &[f64], out: &mut [f64]) -> Result<()> {
    policy.check_context(ctx)?;
    let n = policy.vocab.num_sequences();
    if weights.len() as u128 != n {
        return Err(RpoError::invalid(format!(
            "weight vector has {} entries, sequence space has {n}",
            weights.len()
        )));
    }
    match policy.kind {
        PolicyKind::Tabular => {
            let p = softmax(&policy.tabular_logits(ctx));
            let total: f64 = weights.iter().sum();
            for row in tabular_rows(policy, ctx) {
                for j in 0..p.len() {
                    out[row + j] += weights[j] - total * p[j];
                }
            }
        }
        PolicyKind::Bigram => {
            let v = policy.vocab.size;
            let steps: Vec<Vec<f64>> = (0..=v)
                .map(|prev| softmax(&policy.bigram_logits(ctx, if prev == v { None } else { Some(prev) })))
                .collect();
            for (idx, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let y = policy.vocab.index_seq(idx);
                let mut prev = None;
                for &t in &y {
                    add_bigram_step(policy, ctx, prev, t, &steps[prev.unwrap_or(v)], w, out);
                    prev = Some(t);
                }
            }
        }
    }
    Ok(())
}

/// Rows of the tabular parameter vector that enter `ctx`'s sequence logits.
fn tabular_rows(policy: &Policy, ctx: &Context) -> Vec<usize> {
    let mut rows = vec![policy.tab_base_row(ctx.context_id)];
    if let Some(h) = ctx.hint {
        rows.push(policy.tab_hint_row(ctx.context_id, h));
    }
    rows
}

fn add_bigram_step(
    policy: &Policy,
    ctx: &Context,
    prev: Option<usize>,
    token: usize,
    probs: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let mut rows = vec![policy.u_row(ctx.context_id), policy.b_row(prev.unwrap_or(policy.vocab.size))];
    if let Some(h) = ctx.hint {
        rows.push(policy.h_row(h));
    }
    for row in rows {
        for (j, pj) in probs.iter().enumerate() {
            out[row + j] -= scale * pj;
        }
        out[row + token] += scale;
    }
}

/// Central differences `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + eps;
        let hi = f(&t);
        t[i] = orig - eps;
        let lo = f(&t);
        t[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(RpoError::Numeric(format!(
                "objective not finite around coordinate {i} (f+ = {hi}, f- = {lo})"
            )));
        }
        g.push((hi - lo) / (2.0 * eps));
    }
    Ok(g)
}

/// Fourth-order central differences: (−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε.
/// Truncation error is O(ε⁴), so a larger step keeps cancellation error small on
/// coordinates whose derivative is tiny relative to the objective value.
pub fn finite_diff_grad_5pt<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = t[i];
        let mut at = |k: f64| {
            t[i] = orig + k * eps;
            f(&t)
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        t[i] = orig;
        if ![p2, p1, m1, m2].iter().all(|v| v.is_finite()) {
            return Err(RpoError::Numeric(format!("objective not finite around coordinate {i}")));
        }
        g.push((m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * eps));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compare two gradients coordinate-wise.
///
/// A coordinate whose magnitude (max of both sides) is at least `abs_tol`
/// is judged by relative error; smaller coordinates are judged by absolute
/// error against `abs_tol`.
pub fn grad_check(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(RpoError::invalid(format!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    let mut worst_index = 0;
    let mut worst_score = -1.0;
    let mut small_ok = true;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let mag = a.abs().max(n.abs());
        max_abs_err = max_abs_err.max(abs);
        let score = if mag >= abs_tol {
            let rel = abs / mag;
            max_rel_err = max_rel_err.max(rel);
            rel / rel_tol
        } else {
            small_ok &= abs <= abs_tol;
            abs / abs_tol
        };
        if score > worst_score {
            worst_score = score;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        worst_index,
        passed: small_ok && max_rel_err <= rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{HintId, Vocab};
    use crate::rng_from_seed;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, -2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| 3.5, &[0.3, 0.1, -9.0], 1e-5).unwrap();
        assert!(z.iter().all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let err = finite_diff_grad(|t| (t[0]).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, RpoError::Numeric(_)));
    }

    #[test]
    fn grad_check_arithmetic() {
        let r = grad_check(&[1.0, 2.0], &[1.0, 2.0], 1e-5, 1e-8).unwrap();
        assert!(r.passed && r.max_rel_err == 0.0);
        assert!(grad_check(&[1.0], &[1.001], 1e-2, 1e-8).unwrap().passed);
        let bad = grad_check(&[1.0], &[1.1], 1e-2, 1e-8).unwrap();
        assert!(!bad.passed && bad.worst_index == 0);
        assert!(grad_check(&[1.0], &[1.0, 2.0], 1e-2, 1e-8).is_err());
        // tiny coordinates fall back to absolute error
        assert!(grad_check(&[1e-12], &[3e-12], 1e-5, 1e-8).unwrap().passed);
    }

    #[test]
    fn uniform_bigram_v2_taken_token_gets_half() {
        let p = Policy::zeros(PolicyKind::Bigram, Vocab::new(2, 2).unwrap(), 1).unwrap();
        let h = HintId {
            position: 0,
            target_token: 1,
        };
        let ctx = Context::hinted(0, h);
        let g = seq_logprob_grad(&p, &ctx, &[1, 0]).unwrap();
        // U row accumulates both steps
        assert_eq!(&g[0..2], &[-0.5 + 0.5, 0.5 - 0.5]);
        // B[BOS] sees step 0 (token 1), B[1] sees step 1 (token 0)
        assert_eq!(&g[p.b_row(2)..p.b_row(2) + 2], &[-0.5, 0.5]);
        assert_eq!(&g[p.b_row(1)..p.b_row(1) + 2], &[0.5, -0.5]);
    }

    #[test]
    fn groups_sum_to_zero() {
        let mut r = rng_from_seed(9);
        for kind in [PolicyKind::Bigram, PolicyKind::Tabular] {
            let p = Policy::random(kind, Vocab::new(3, 3).unwrap(), 2, 1.0, &mut r).unwrap();
            let ctx = Context::hinted(1, HintId { position: 1, target_token: 2 });
            let g = seq_logprob_grad(&p, &ctx, &[2, 0, 1]).unwrap();
            for grp in p.softmax_groups() {
                assert!(g[grp].iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_grad_matches_weighted_sum() {
        let mut r = rng_from_seed(4);
        for kind in [PolicyKind::Bigram, PolicyKind::Tabular] {
            let p = Policy::random(kind, Vocab::new(3, 2).unwrap(), 2, 1.0, &mut r).unwrap();
            let ctx = Context::hinted(0, HintId { position: 0, target_token: 1 });
            let w: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut fast = vec![0.0; p.num_params()];
            add_expected_logprob_grad(&p, &ctx, &w, &mut fast).unwrap();
            let mut slow = vec![0.0; p.num_params()];
            for (i, wi) in w.iter().enumerate() {
                add_logprob_grad(&p, &ctx, &p.vocab.index_seq(i), *wi, &mut slow).unwrap();
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
