//! Measurements: pair KL, margin statistics, ground-truth log-probability
//! histograms, per-record gradient covariance and hallucination rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{is_hallucinated, Task};
use crate::error::{Result, RpoError};
use crate::grad::add_logprob_grad;
use crate::math::{mean, pairwise_sum, percentile_sorted, sigmoid};
use crate::objectives::{margin, reflection_kl, PreferenceRecord};
use crate::pairgen::MatchedCorpora;
use crate::policy::{Context, Policy};

/// KL between the continuation distributions after `y⁺` and after `y⁻`.
pub fn pair_kl(policy: &Policy, rec: &PreferenceRecord) -> Result<f64> {
    let ctx = rec.bare_context();
    let p = policy.continuation_distribution(&ctx, &rec.y_plus)?;
    let q = policy.continuation_distribution(&ctx, &rec.y_minus)?;
    let terms: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .collect();
    Ok(pairwise_sum(&terms).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub n: usize,
}

/// Mean plus inclusive linear-interpolation quartiles.
pub fn kl_stats(values: &[f64]) -> Result<KlStats> {
    if values.is_empty() {
        return Err(RpoError::invalid("statistics of an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RpoError::invalid("statistics input contains a non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(KlStats {
        mean: mean(values),
        median: percentile_sorted(&sorted, 0.5),
        p25: percentile_sorted(&sorted, 0.25),
        p75: percentile_sorted(&sorted, 0.75),
        n: values.len(),
    })
}

/// Renders rows as a four-statistic table: `Method | Mean | Median | P25 | P75`.
pub fn render_kl_table(rows: &[(&str, KlStats)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$} | {:>7} | {:>7} | {:>7} | {:>7}\n", "Method", "Mean", "Median", "P25", "P75");
    for (name, k) in rows {
        let _ = writeln!(
            s,
            "{:<width$} | {:>7.3} | {:>7.3} | {:>7.3} | {:>7.3}",
            name, k.mean, k.median, k.p25, k.p75
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` uniform bins over `[lo, hi]`; values outside are clamped into
    /// the end bins.
    pub fn uniform(lo: f64, hi: f64, bins: usize, values: &[f64]) -> Self {
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v - lo) / w).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let b = ((v - lo) / ((hi - lo) / bins as f64)).floor();
        (b.max(0.0) as usize).min(bins - 1)
    }
}

pub const GT_HISTOGRAM_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtLogprobSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub histogram: Histogram,
}

/// `(1/L)·log π(y_GT|x)` for one context.
pub fn gt_avg_logprob(policy: &Policy, task: &Task, ctx: usize) -> Result<f64> {
    Ok(policy.log_prob(&Context::bare(ctx), &task.gt[ctx])? / task.vocab.max_len as f64)
}

/// Per-context response-averaged ground-truth log-probability, histogrammed
/// over 40 bins spanning `[−L·ln V, 0]`.
pub fn gt_logprob_distribution(policy: &Policy, task: &Task) -> Result<GtLogprobSummary> {
    let values = (0..task.num_contexts)
        .map(|x| gt_avg_logprob(policy, task, x))
        .collect::<Result<Vec<_>>>()?;
    let lo = -(task.vocab.max_len as f64) * (task.vocab.size as f64).ln();
    Ok(GtLogprobSummary {
        mean: mean(&values),
        histogram: Histogram::uniform(lo, 0.0, GT_HISTOGRAM_BINS, &values),
        values,
    })
}

/// Gradient of one record's DPO loss. With `use_hint` the chosen side is
/// evaluated under the record's hint (for both policy and reference).
pub fn per_record_grad(
    policy: &Policy,
    reference: &Policy,
    rec: &PreferenceRecord,
    use_hint: bool,
    beta: f64,
) -> Result<Vec<f64>> {
    let bare = rec.bare_context();
    let chosen_ctx = if use_hint {
        let h = rec
            .hint
            .ok_or_else(|| RpoError::invalid("hint-conditioned gradient needs a hinted record"))?;
        Context::hinted(rec.ctx, h)
    } else {
        bare
    };
    let chosen = policy.log_prob(&chosen_ctx, &rec.y_plus)? - reference.log_prob(&chosen_ctx, &rec.y_plus)?;
    let rejected = policy.log_prob(&bare, &rec.y_minus)? - reference.log_prob(&bare, &rec.y_minus)?;
    let z = beta * (chosen - rejected);
    let coef = -sigmoid(-z) * beta;
    let mut g = vec![0.0; policy.num_params()];
    add_logprob_grad(policy, &chosen_ctx, &rec.y_plus, coef, &mut g)?;
    add_logprob_grad(policy, &bare, &rec.y_minus, -coef, &mut g)?;
    Ok(g)
}

/// Trace of the sample covariance (n − 1 convention) of per-record loss
/// gradients.
pub fn grad_cov_trace(
    policy: &Policy,
    reference: &Policy,
    records: &[PreferenceRecord],
    use_hint: bool,
    beta: f64,
) -> Result<f64> {
    if records.len() < 2 {
        return Err(RpoError::invalid("covariance needs at least 2 records"));
    }
    // Two streaming passes over differences from the first record's
    // gradient, so identical records give exactly zero.
    let n = records.len() as f64;
    let first = per_record_grad(policy, reference, &records[0], use_hint, beta)?;
    let mut shift_sum = vec![0.0; first.len()];
    for r in &records[1..] {
        for ((s, g), f) in shift_sum.iter_mut().zip(per_record_grad(policy, reference, r, use_hint, beta)?).zip(&first) {
            *s += g - f;
        }
    }
    let m: Vec<f64> = shift_sum.iter().map(|s| s / n).collect();
    let mut sq = Vec::with_capacity(records.len());
    for r in records {
        let g = per_record_grad(policy, reference, r, use_hint, beta)?;
        sq.push(
            g.iter()
                .zip(&first)
                .zip(&m)
                .map(|((g, f), m)| (g - f - m) * (g - f - m))
                .sum::<f64>(),
        );
    }
    Ok(pairwise_sum(&sq) / (n - 1.0))
}

/// Trace of the sample covariance of explicit gradient vectors. Works on
/// differences from the first vector, so identical inputs give exactly zero.
pub fn trace_of_covariance(grads: &[Vec<f64>]) -> Result<f64> {
    if grads.len() < 2 {
        return Err(RpoError::invalid("covariance needs at least 2 vectors"));
    }
    let d = grads[0].len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(RpoError::invalid("gradient vectors differ in length"));
    }
    let n = grads.len() as f64;
    let mut per_dim = Vec::with_capacity(d);
    for j in 0..d {
        let shifted: Vec<f64> = grads.iter().map(|g| g[j] - grads[0][j]).collect();
        let m = pairwise_sum(&shifted) / n;
        let sq: Vec<f64> = shifted.iter().map(|s| (s - m) * (s - m)).collect();
        per_dim.push(pairwise_sum(&sq) / (n - 1.0));
    }
    Ok(pairwise_sum(&per_dim))
}

/// Fraction of unhinted samples with at least one wrong slot. Sample `i`
/// uses context `i mod num_contexts`.
pub fn hallucination_rate<R: rand::Rng + ?Sized>(
    policy: &Policy,
    task: &Task,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(RpoError::invalid("n_samples must be >= 1"));
    }
    let mut bad = 0usize;
    for i in 0..n_samples {
        let x = i % task.num_contexts;
        let y = policy.sample(&Context::bare(x), rng)?;
        if is_hallucinated(task, x, &y) {
            bad += 1;
        }
    }
    Ok(bad as f64 / n_samples as f64)
}

/// The expectation [`hallucination_rate`] estimates: mean of `1 − π(y_GT|x)`.
pub fn exact_hallucination_rate(policy: &Policy, task: &Task) -> Result<f64> {
    let v = (0..task.num_contexts)
        .map(|x| Ok(1.0 - policy.log_prob(&Context::bare(x), &task.gt[x])?.exp()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n: usize,
}

/// Percentile bootstrap confidence interval for the mean.
pub fn bootstrap_mean_ci<R: rand::Rng + ?Sized>(values: &[f64], level: f64, resamples: usize, rng: &mut R) -> Result<MeanCi> {
    if values.is_empty() || resamples == 0 {
        return Err(RpoError::invalid("bootstrap needs values and resamples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(RpoError::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok(MeanCi {
        mean: mean(values),
        lo: percentile_sorted(&means, a),
        hi: percentile_sorted(&means, 1.0 - a),
        level,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovTraces {
    pub dpo: f64,
    pub rpo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kl_stats: BTreeMap<String, KlStats>,
    pub margins: BTreeMap<String, MeanCi>,
    pub reflection_kl: Option<KlStats>,
    pub gt_logprob: GtLogprobSummary,
    pub grad_cov_trace: Option<CovTraces>,
    pub hallucination_rate: f64,
    pub exact_hallucination_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    pub hallucination_samples: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions {
            bootstrap_resamples: 2000,
            ci_level: 0.99,
            hallucination_samples: 4096,
            beta: 0.1,
            seed: 0,
        }
    }
}

/// One row of the per-record diagnostics dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub index: usize,
    pub paradigm: String,
    pub ctx: usize,
    pub kl: f64,
    pub margin: f64,
    pub gt_avg_logprob: f64,
}

fn usable(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records.iter().filter(|r| !r.meta.degenerate).cloned().collect()
}

/// Indices at which none of the three aligned corpora is degenerate, so
/// every paradigm is compared on the same contexts and rejected responses.
pub fn matched_indices(corpora: &MatchedCorpora) -> Vec<usize> {
    let c = corpora;
    (0..c.reflective.len())
        .filter(|&i| {
            [&c.reflective, &c.self_evolution, &c.recognition]
                .iter()
                .all(|v| v.get(i).is_some_and(|r| !r.meta.degenerate))
        })
        .collect()
}

/// Pair KL per paradigm (reflective, self-evolution, recognition) over
/// [`matched_indices`].
pub fn matched_pair_kl(policy: &Policy, corpora: &MatchedCorpora) -> Result<[Vec<f64>; 3]> {
    let idx = matched_indices(corpora);
    let pick = |v: &[PreferenceRecord]| -> Result<Vec<f64>> { idx.iter().map(|&i| pair_kl(policy, &v[i])).collect() };
    Ok([
        pick(&corpora.reflective)?,
        pick(&corpora.self_evolution)?,
        pick(&corpora.recognition)?,
    ])
}

/// Margin values: hint-conditioned for hinted records, plain otherwise.
pub fn corpus_margins(policy: &Policy, records: &[PreferenceRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| margin(policy, r, r.hint.is_some()))
        .collect()
}

pub fn corpus_pair_kl(policy: &Policy, records: &[PreferenceRecord]) -> Result<Vec<f64>> {
    records.iter().map(|r| pair_kl(policy, r)).collect()
}

/// Full report over matched corpora; KL and margin statistics use only
/// [`matched_indices`]. `reference` is the denominator for the
/// gradient-covariance traces (usually the policy itself before training).
pub fn diagnose(
    policy: &Policy,
    reference: &Policy,
    task: &Task,
    corpora: &MatchedCorpora,
    opts: &DiagnosticsOptions,
) -> Result<(DiagnosticsReport, Vec<RecordDiagnostics>)> {
    let mut rng = crate::rng_from_seed(opts.seed);
    let mut kl = BTreeMap::new();
    let mut margins = BTreeMap::new();
    let mut rows = Vec::new();
    let idx = matched_indices(corpora);
    for (name, recs) in [
        ("reflective", &corpora.reflective),
        ("self_evolution", &corpora.self_evolution),
        ("recognition", &corpora.recognition),
    ] {
        let recs: Vec<PreferenceRecord> = idx.iter().map(|&i| recs[i].clone()).collect();
        if recs.is_empty() {
            continue;
        }
        let kls = corpus_pair_kl(policy, &recs)?;
        let ms = corpus_margins(policy, &recs)?;
        for (i, r) in recs.iter().enumerate() {
            rows.push(RecordDiagnostics {
                index: idx[i],
                paradigm: name.to_string(),
                ctx: r.ctx,
                kl: kls[i],
                margin: ms[i],
                gt_avg_logprob: gt_avg_logprob(policy, task, r.ctx)?,
            });
        }
        kl.insert(name.to_string(), kl_stats(&kls)?);
        margins.insert(
            name.to_string(),
            bootstrap_mean_ci(&ms, opts.ci_level, opts.bootstrap_resamples, &mut rng)?,
        );
    }
    let refl_kls = corpora
        .reflective
        .iter()
        .filter_map(|r| r.hint.map(|h| reflection_kl(policy, &Context::hinted(r.ctx, h))))
        .collect::<Result<Vec<f64>>>()?;
    let reflective = usable(&corpora.reflective);
    let se = usable(&corpora.self_evolution);
    let grad_cov_trace = if reflective.len() >= 2 && se.len() >= 2 {
        Some(CovTraces {
            dpo: grad_cov_trace(policy, reference, &se, false, opts.beta)?,
            rpo: grad_cov_trace(policy, reference, &reflective, true, opts.beta)?,
        })
    } else {
        None
    };
    let report = DiagnosticsReport {
        kl_stats: kl,
        margins,
        reflection_kl: if refl_kls.is_empty() { None } else { Some(kl_stats(&refl_kls)?) },
        gt_logprob: gt_logprob_distribution(policy, task)?,
        grad_cov_trace,
        hallucination_rate: hallucination_rate(policy, task, opts.hallucination_samples, &mut rng)?,
        exact_hallucination_rate: exact_hallucination_rate(policy, task)?,
    };
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let k = kl_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((k.mean, k.median, k.p25, k.p75), (1.0, 1.0, 1.0, 1.0));
        let k = kl_stats(&[4.0, 0.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!((k.mean, k.median, k.p25, k.p75), (2.0, 2.0, 1.0, 3.0));
        assert!(kl_stats(&[]).is_err());
    }

    #[test]
    fn table_has_four_columns() {
        let k = KlStats {
            mean: 0.293,
            median: 0.237,
            p25: 0.161,
            p75: 0.354,
            n: 1,
        };
        let t = render_kl_table(&[("RPO", k)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split('|').count(), 5);
        assert!(lines[1].contains("0.293") && lines[1].contains("0.237"));
        assert!(lines[1].contains("0.161") && lines[1].contains("0.354"));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::uniform(-3.0, 0.0, 40, &[-5.0, -3.0, -1.5, 0.0, 2.0]);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[39], 2);
        assert_eq!(h.edges.len(), 41);
    }

    #[test]
    fn covariance_two_point() {
        let g = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let tr = trace_of_covariance(&[g.clone(), neg]).unwrap();
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        assert!((tr - 2.0 * norm2).abs() < 1e-12);
        assert_eq!(trace_of_covariance(&[g.clone(), g]).unwrap(), 0.0);
    }
}
