//! Experiment configuration and the DPO-vs-RPO comparison driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{exact_hallucination_rate, gt_logprob_distribution, hallucination_rate};
use crate::env::{OracleCritic, Task};
use crate::error::{Result, RpoError};
use crate::grad::add_logprob_grad;
use crate::math::median;
use crate::objectives::PreferenceRecord;
use crate::pairgen::{build_matched, MatchedCorpora};
use crate::policy::{Context, Policy, PolicyKind, TokenSeq, Vocab};
use crate::train::{
    final_loss, hint_pretrain, steps_to_threshold, train, HintPretrainConfig, LossKind, Optimizer, OptimizerKind,
    TrainConfig, TrainTrace,
};
use crate::{mix_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub num_contexts: usize,
    pub seed: u64,
    /// Load a handcrafted task instead of generating one.
    pub file: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            v: 6,
            l: 3,
            num_contexts: 32,
            seed: 7,
            file: None,
        }
    }
}

impl TaskSection {
    pub fn build(&self) -> Result<Task> {
        match &self.file {
            Some(p) => Task::load_json(p),
            None => Task::generate(Vocab::new(self.v, self.l)?, self.num_contexts, self.seed),
        }
    }
}

/// How the pre-training ("base") policy is produced: random logits, then a
/// short maximum-likelihood warm start toward a per-context belief that
/// differs from the ground truth in `belief_errors` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub init_scale: f64,
    pub warm_steps: usize,
    pub warm_lr: f64,
    pub belief_errors: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Tabular,
            init_scale: 1.0,
            warm_steps: 15,
            warm_lr: 0.1,
            belief_errors: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub pairs_per_context: usize,
    pub max_regen_attempts: usize,
    pub injection_k: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            pairs_per_context: 32,
            max_regen_attempts: 8,
            injection_k: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub loss_threshold: f64,
    /// Trailing window over which "mean training loss" is taken.
    pub loss_window: usize,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    pub hallucination_samples: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            loss_threshold: 0.40,
            loss_window: 20,
            bootstrap_resamples: 2000,
            ci_level: 0.99,
            hallucination_samples: 4096,
        }
    }
}

/// Where an external critic lives. Only read by the HTTP critique client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CritiqueEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for CritiqueEndpoint {
    fn default() -> Self {
        CritiqueEndpoint {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "critic".into(),
            api_key_env: "CRITIQUE_API_KEY".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            max_in_flight: 4,
        }
    }
}

impl CritiqueEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(RpoError::Config("critique_endpoint.timeout_ms must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(RpoError::Config("critique_endpoint.max_in_flight must be > 0".into()));
        }
        if self.base_url.is_empty() {
            return Err(RpoError::Config("critique_endpoint.base_url is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub policy: PolicySection,
    pub hint_pretrain: HintPretrainConfig,
    pub corpus: CorpusSection,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsSection,
    pub critique_endpoint: Option<CritiqueEndpoint>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| RpoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RpoError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RpoError::Config(m) => RpoError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.task.file.is_none() {
            Vocab::new(self.task.v, self.task.l)?;
            if self.task.num_contexts == 0 {
                return Err(RpoError::Config("task.num_contexts must be >= 1".into()));
            }
        }
        if self.corpus.pairs_per_context == 0 || self.corpus.max_regen_attempts == 0 {
            return Err(RpoError::Config("corpus counts must be >= 1".into()));
        }
        if !(self.policy.init_scale >= 0.0) || !(self.policy.warm_lr >= 0.0) {
            return Err(RpoError::Config("policy.init_scale and policy.warm_lr must be >= 0".into()));
        }
        if self.diagnostics.loss_window == 0 || self.diagnostics.hallucination_samples == 0 {
            return Err(RpoError::Config("diagnostics windows and sample counts must be >= 1".into()));
        }
        if let Some(ep) = &self.critique_endpoint {
            ep.validate()?;
        }
        Ok(())
    }
}

/// Per-context belief: the ground truth with `errors` distinct slots moved
/// to a different token.
pub fn corrupt_beliefs(task: &Task, errors: usize, seed: u64) -> Vec<TokenSeq> {
    use rand::seq::index::sample as sample_indices;
    use rand::Rng as _;
    let mut rng = rng_from_seed(seed);
    let v = task.vocab.size;
    let l = task.vocab.max_len;
    task.gt
        .iter()
        .map(|g| {
            let mut b = g.clone();
            for t in sample_indices(&mut rng, l, errors.min(l)) {
                b[t] = (g[t] + 1 + rng.random_range(0..v - 1)) % v;
            }
            b
        })
        .collect()
}

/// Random base logits followed by a warm start toward corrupted beliefs.
/// Hint parameters stay at zero.
pub fn build_base_policy(section: &PolicySection, task: &Task, seed: u64) -> Result<Policy> {
    let mut rng = rng_from_seed(mix_seed(seed, 0xBA5E));
    let mut p = Policy::random(section.kind, task.vocab, task.num_contexts, section.init_scale, &mut rng)?;
    let hints = p.hint_range();
    for v in &mut p.params[hints.clone()] {
        *v = 0.0;
    }
    let beliefs = corrupt_beliefs(task, section.belief_errors, mix_seed(seed, 0xBE11EF));
    let base = 0..hints.start;
    let mut opt = Optimizer::new(OptimizerKind::Adam, section.warm_lr, base.len());
    let scale = 1.0 / task.num_contexts as f64;
    for _ in 0..section.warm_steps {
        let mut grad = vec![0.0; p.num_params()];
        for (x, b) in beliefs.iter().enumerate() {
            // minimise −mean log π(belief|x)
            add_logprob_grad(&p, &Context::bare(x), b, -scale, &mut grad)?;
        }
        opt.step(&mut p.params[base.clone()], &grad[base.clone()]);
    }
    Ok(p)
}

/// Everything a seed needs before training: task, base policy, the
/// hint-pretrained policy and matched corpora built from it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: Task,
    pub base: Policy,
    pub pretrained: Policy,
    pub corpora: MatchedCorpora,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let task = cfg.task.build()?;
    let base = build_base_policy(&cfg.policy, &task, seed)?;
    let mut rng = rng_from_seed(mix_seed(seed, 0x417));
    let pretrained = hint_pretrain(&base, &task, &cfg.hint_pretrain, &mut rng)?;
    let corpora = build_matched(
        &pretrained,
        &task,
        &OracleCritic,
        cfg.corpus.pairs_per_context,
        mix_seed(seed, cfg.corpus.seed),
        cfg.corpus.max_regen_attempts,
    )?;
    Ok(Prepared {
        task,
        base,
        pretrained,
        corpora,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub gt_avg_logprob: f64,
    pub hallucination_rate: f64,
    pub exact_hallucination_rate: f64,
}

pub fn summarize_policy(policy: &Policy, task: &Task, samples: usize, seed: u64) -> Result<PolicySummary> {
    let mut rng = rng_from_seed(seed);
    Ok(PolicySummary {
        gt_avg_logprob: gt_logprob_distribution(policy, task)?.mean,
        hallucination_rate: hallucination_rate(policy, task, samples, &mut rng)?,
        exact_hallucination_rate: exact_hallucination_rate(policy, task)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub records_used: usize,
    pub steps_to_threshold: Option<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub policy: PolicySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub base: PolicySummary,
    pub rpo: RunSummary,
    pub dpo: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareMedians {
    /// `None` when fewer than half the seeds reached the threshold.
    pub rpo_steps_to_threshold: Option<f64>,
    pub dpo_steps_to_threshold: Option<f64>,
    pub rpo_final_loss: f64,
    pub dpo_final_loss: f64,
    pub base_gt_avg_logprob: f64,
    pub rpo_gt_avg_logprob: f64,
    pub dpo_gt_avg_logprob: f64,
    pub base_hallucination_rate: f64,
    pub rpo_hallucination_rate: f64,
    pub dpo_hallucination_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub loss_threshold: f64,
    pub loss_window: usize,
    pub seeds: Vec<SeedReport>,
    pub median: CompareMedians,
}

/// Traces of one seed's pair of runs, for callers that want the curves.
#[derive(Clone, Debug)]
pub struct SeedRuns {
    pub report: SeedReport,
    pub rpo_trace: TrainTrace,
    pub dpo_trace: TrainTrace,
    pub rpo_policy: Policy,
    pub dpo_policy: Policy,
    pub prepared: Prepared,
}

fn usable_count(records: &[PreferenceRecord]) -> usize {
    records.iter().filter(|r| !r.meta.degenerate).count()
}

/// RPO on the reflective corpus and DPO on the matched self-evolution
/// corpus, both from the same hint-pretrained policy.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRuns> {
    let prepared = prepare(cfg, seed)?;
    let d = &cfg.diagnostics;
    let train_cfg = |loss| TrainConfig {
        loss,
        seed: mix_seed(seed, 0x7EA1),
        ..cfg.train.clone()
    };
    let (rpo_policy, rpo_trace) = train(&prepared.pretrained, &prepared.corpora.reflective, &train_cfg(LossKind::Rpo))?;
    let (dpo_policy, dpo_trace) =
        train(&prepared.pretrained, &prepared.corpora.self_evolution, &train_cfg(LossKind::Dpo))?;
    let hal_seed = mix_seed(seed, 0x4A1);
    let run = |trace: &TrainTrace, policy: &Policy, corpus: &[PreferenceRecord]| -> Result<RunSummary> {
        let losses = trace.losses();
        Ok(RunSummary {
            steps: losses.len(),
            records_used: usable_count(corpus),
            steps_to_threshold: steps_to_threshold(&losses, d.loss_threshold, d.loss_window),
            initial_loss: losses[0],
            final_loss: final_loss(&losses, d.loss_window),
            policy: summarize_policy(policy, &prepared.task, d.hallucination_samples, hal_seed)?,
        })
    };
    let report = SeedReport {
        seed,
        base: summarize_policy(&prepared.pretrained, &prepared.task, d.hallucination_samples, hal_seed)?,
        rpo: run(&rpo_trace, &rpo_policy, &prepared.corpora.reflective)?,
        dpo: run(&dpo_trace, &dpo_policy, &prepared.corpora.self_evolution)?,
    };
    Ok(SeedRuns {
        report,
        rpo_trace,
        dpo_trace,
        rpo_policy,
        dpo_policy,
        prepared,
    })
}

/// Median where `None` (never reached) ranks above every number.
pub fn median_steps(values: &[Option<usize>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().map(|s| s.map_or(f64::INFINITY, |s| s as f64)).collect();
    let m = median(&v);
    m.is_finite().then_some(m)
}

/// Runs every seed, one thread per seed; reports keep the order of `seeds`.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<CompareReport> {
    let reports = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| s.spawn(move || run_seed(cfg, seed).map(|r| r.report)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize_compare(cfg, reports))
}

pub fn summarize_compare(cfg: &ExperimentConfig, seeds: Vec<SeedReport>) -> CompareReport {
    let m = |f: &dyn Fn(&SeedReport) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let median = CompareMedians {
        rpo_steps_to_threshold: median_steps(&seeds.iter().map(|s| s.rpo.steps_to_threshold).collect::<Vec<_>>()),
        dpo_steps_to_threshold: median_steps(&seeds.iter().map(|s| s.dpo.steps_to_threshold).collect::<Vec<_>>()),
        rpo_final_loss: m(&|s| s.rpo.final_loss),
        dpo_final_loss: m(&|s| s.dpo.final_loss),
        base_gt_avg_logprob: m(&|s| s.base.gt_avg_logprob),
        rpo_gt_avg_logprob: m(&|s| s.rpo.policy.gt_avg_logprob),
        dpo_gt_avg_logprob: m(&|s| s.dpo.policy.gt_avg_logprob),
        base_hallucination_rate: m(&|s| s.base.hallucination_rate),
        rpo_hallucination_rate: m(&|s| s.rpo.policy.hallucination_rate),
        dpo_hallucination_rate: m(&|s| s.dpo.policy.hallucination_rate),
    };
    CompareReport {
        loss_threshold: cfg.diagnostics.loss_threshold,
        loss_window: cfg.diagnostics.loss_window,
        seeds,
        median,
    }
}
