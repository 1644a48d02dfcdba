//! Shared fixtures and brute-force oracles. The oracles read parameters
//! straight from the documented flat layout and never call into the
//! policy's own evaluation code.

#![allow(dead_code)]

use rpo_core::objectives::{Paradigm, PreferenceRecord, RecordMeta};
use rpo_core::policy::{HintId, Policy, PolicyKind, Vocab};
use rpo_core::rng_from_seed;

pub fn fixture_policy(kind: PolicyKind, v: usize, l: usize, x: usize, seed: u64) -> Policy {
    let mut rng = rng_from_seed(seed);
    Policy::random(kind, Vocab::new(v, l).unwrap(), x, 1.0, &mut rng).unwrap()
}

/// Every length-`l` sequence over `v` tokens, first token most significant.
pub fn all_sequences(v: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut s2 = s.clone();
                    s2.push(t);
                    s2
                })
            })
            .collect();
    }
    out
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[i] - m - z.ln()
}

/// Bigram step logits from the raw tables: U (X×V), B ((V+1)×V), H ((L·V)×V).
pub fn bigram_step_logits(p: &Policy, x: usize, hint: Option<HintId>, prev: Option<usize>) -> Vec<f64> {
    let (v, nx) = (p.vocab.size, p.num_contexts);
    let u = &p.params[x * v..(x + 1) * v];
    let b_row = nx + prev.unwrap_or(v);
    let b = &p.params[b_row * v..(b_row + 1) * v];
    let mut out: Vec<f64> = u.iter().zip(b).map(|(a, c)| a + c).collect();
    if let Some(h) = hint {
        let h_row = nx + v + 1 + h.position * v + h.target_token;
        for (o, hv) in out.iter_mut().zip(&p.params[h_row * v..(h_row + 1) * v]) {
            *o += hv;
        }
    }
    out
}

pub fn brute_bigram_log_prob(p: &Policy, x: usize, hint: Option<HintId>, y: &[usize]) -> f64 {
    let mut prev = None;
    let mut total = 0.0;
    for &t in y {
        total += log_softmax_at(&bigram_step_logits(p, x, hint, prev), t);
        prev = Some(t);
    }
    total
}

/// Tabular: base rows X×V^L, then hint rows X×(L·V)×V^L.
pub fn tabular_logits(p: &Policy, x: usize, hint: Option<HintId>) -> Vec<f64> {
    let (v, l, nx) = (p.vocab.size, p.vocab.max_len, p.num_contexts);
    let n = v.pow(l as u32);
    let mut logits = p.params[x * n..(x + 1) * n].to_vec();
    if let Some(h) = hint {
        let row = nx * n + (x * l * v + h.position * v + h.target_token) * n;
        for (o, hv) in logits.iter_mut().zip(&p.params[row..row + n]) {
            *o += hv;
        }
    }
    logits
}

fn seq_to_index(v: usize, y: &[usize]) -> usize {
    y.iter().fold(0, |acc, &t| acc * v + t)
}

pub fn brute_tabular_log_prob(p: &Policy, x: usize, hint: Option<HintId>, y: &[usize]) -> f64 {
    log_softmax_at(&tabular_logits(p, x, hint), seq_to_index(p.vocab.size, y))
}

pub fn brute_log_prob(p: &Policy, x: usize, hint: Option<HintId>, y: &[usize]) -> f64 {
    match p.kind {
        PolicyKind::Bigram => brute_bigram_log_prob(p, x, hint, y),
        PolicyKind::Tabular => brute_tabular_log_prob(p, x, hint, y),
    }
}

/// Continuation distribution recomputed from raw tables.
pub fn brute_continuation(p: &Policy, x: usize, y: &[usize]) -> Vec<f64> {
    let v = p.vocab.size;
    let logits = match p.kind {
        PolicyKind::Bigram => bigram_step_logits(p, x, None, y.last().copied()),
        PolicyKind::Tabular => {
            let all = tabular_logits(p, x, None);
            (0..v)
                .map(|t| {
                    let mut w: Vec<usize> = y[1..].to_vec();
                    w.push(t);
                    all[seq_to_index(v, &w)]
                })
                .collect()
        }
    };
    (0..v).map(|i| log_softmax_at(&logits, i).exp()).collect()
}

pub fn record(ctx: usize, y_plus: Vec<usize>, y_minus: Vec<usize>, hint: Option<HintId>, w_hal: f64, y_gt: Vec<usize>) -> PreferenceRecord {
    PreferenceRecord {
        ctx,
        y_plus,
        y_minus,
        hint,
        w_hal,
        y_gt: Some(y_gt),
        meta: RecordMeta {
            source: Paradigm::Reflective,
            degenerate: false,
        },
    }
}

/// Upper `p` quantile of chi-square with `k` degrees of freedom
/// (Wilson–Hilferty), given the matching standard-normal quantile `z`.
pub fn chi2_critical(k: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + z * a.sqrt()).powi(3)
}
