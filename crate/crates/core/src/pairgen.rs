//! Preference-pair construction under the four paradigms: self-evolution,
//! injection, recognition and reflective regeneration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{factuality_score, Critic, Task};
use crate::error::{Result, RpoError};
use crate::objectives::{Paradigm, PreferenceRecord, RecordMeta};
use crate::policy::{Context, Policy, TokenSeq};
use crate::{mix_seed, rng_from_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub paradigm: Paradigm,
    pub pairs_per_context: usize,
    pub seed: u64,
    #[serde(default = "default_attempts")]
    pub max_regen_attempts: usize,
    /// Number of corrupted slots for injection pairs.
    #[serde(default = "default_injection_k")]
    pub injection_k: usize,
}

fn default_attempts() -> usize {
    8
}

fn default_injection_k() -> usize {
    1
}

impl CorpusSpec {
    pub fn new(paradigm: Paradigm, pairs_per_context: usize, seed: u64) -> Self {
        CorpusSpec {
            paradigm,
            pairs_per_context,
            seed,
            max_regen_attempts: default_attempts(),
            injection_k: default_injection_k(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_context == 0 {
            return Err(RpoError::invalid("pairs_per_context must be >= 1"));
        }
        if self.max_regen_attempts == 0 {
            return Err(RpoError::invalid("max_regen_attempts must be >= 1"));
        }
        if self.injection_k == 0 {
            return Err(RpoError::invalid("injection_k must be >= 1"));
        }
        Ok(())
    }
}

fn record(
    ctx: usize,
    y_plus: TokenSeq,
    y_minus: TokenSeq,
    w_hal: f64,
    task: &Task,
    source: Paradigm,
    degenerate: bool,
) -> PreferenceRecord {
    PreferenceRecord {
        ctx,
        y_plus,
        y_minus,
        hint: None,
        w_hal,
        y_gt: Some(task.gt[ctx].clone()),
        meta: RecordMeta { source, degenerate },
    }
}

/// Order two responses by factuality: `(better, worse)`, `None` on a tie.
pub fn label_pair(task: &Task, ctx: usize, a: TokenSeq, b: TokenSeq) -> Result<Option<(TokenSeq, TokenSeq)>> {
    let sa = factuality_score(task, ctx, &a)?;
    let sb = factuality_score(task, ctx, &b)?;
    Ok(if sa > sb {
        Some((a, b))
    } else if sb > sa {
        Some((b, a))
    } else {
        None
    })
}

/// Two samples from `π(·|x)`, labelled by factuality; ties are resampled.
pub fn gen_self_evolution(
    policy: &Policy,
    task: &Task,
    critic: &dyn Critic,
    ctx: usize,
    max_attempts: usize,
    rng: &mut Rng,
) -> Result<PreferenceRecord> {
    let bare = Context::bare(ctx);
    let mut last = None;
    for _ in 0..max_attempts.max(1) {
        let a = policy.sample(&bare, rng)?;
        let b = policy.sample(&bare, rng)?;
        match label_pair(task, ctx, a.clone(), b.clone())? {
            Some((plus, minus)) => {
                let w = critic.critique(task, ctx, &minus)?.w_hal;
                return Ok(record(ctx, plus, minus, w, task, Paradigm::SelfEvolution, false));
            }
            None => last = Some((a, b)),
        }
    }
    let (a, b) = last.expect("at least one attempt");
    let w = critic.critique(task, ctx, &b)?.w_hal;
    Ok(record(ctx, a, b, w, task, Paradigm::SelfEvolution, true))
}

/// Sample a hallucinated `y⁻`, critique it, regenerate `y⁺ ∼ π(·|x,h)`.
///
/// Flagged degenerate when no hallucinated response turns up within the
/// attempt budget, or when the regeneration reproduces `y⁻` exactly.
pub fn gen_reflective(
    policy: &Policy,
    task: &Task,
    critic: &dyn Critic,
    ctx: usize,
    max_attempts: usize,
    rng: &mut Rng,
) -> Result<PreferenceRecord> {
    let bare = Context::bare(ctx);
    let mut y_minus = Vec::new();
    let mut found = None;
    for _ in 0..max_attempts.max(1) {
        y_minus = policy.sample(&bare, rng)?;
        let c = critic.critique(task, ctx, &y_minus)?;
        if let Some(h) = c.hint {
            found = Some((h, c.w_hal));
            break;
        }
    }
    let Some((hint, w_hal)) = found else {
        let mut r = record(ctx, y_minus.clone(), y_minus, 1.0, task, Paradigm::Reflective, true);
        r.hint = None;
        return Ok(r);
    };
    let y_plus = policy.sample(&Context::hinted(ctx, hint), rng)?;
    let degenerate = y_plus == y_minus;
    let mut r = record(ctx, y_plus, y_minus, w_hal, task, Paradigm::Reflective, degenerate);
    r.hint = Some(hint);
    Ok(r)
}

/// `y⁺ = y_GT`; `y⁻` corrupts `k` distinct uniformly chosen slots.
pub fn gen_injection(task: &Task, critic: &dyn Critic, ctx: usize, k: usize, rng: &mut Rng) -> Result<PreferenceRecord> {
    if ctx >= task.num_contexts {
        return Err(RpoError::invalid(format!("context {ctx} out of range")));
    }
    if k == 0 {
        return Err(RpoError::invalid("injection needs k >= 1"));
    }
    let v = task.vocab.size;
    let l = task.vocab.max_len;
    let gt = task.gt[ctx].clone();
    let mut y_minus = gt.clone();
    for t in sample_indices(rng, l, k.min(l)) {
        y_minus[t] = (gt[t] + 1 + rng.random_range(0..v - 1)) % v;
    }
    let w = critic.critique(task, ctx, &y_minus)?.w_hal;
    Ok(record(ctx, gt, y_minus, w, task, Paradigm::Injection, false))
}

/// Every mismatched slot of `y` replaced by the ground-truth token.
pub fn oracle_correct(task: &Task, ctx: usize, y: &[usize]) -> TokenSeq {
    y.iter()
        .zip(&task.gt[ctx])
        .map(|(&a, &g)| if a == g { a } else { g })
        .collect()
}

/// `y⁻ ∼ π(·|x)`; `y⁺` is its oracle-corrected copy.
pub fn gen_recognition(
    policy: &Policy,
    task: &Task,
    critic: &dyn Critic,
    ctx: usize,
    rng: &mut Rng,
) -> Result<PreferenceRecord> {
    let y_minus = policy.sample(&Context::bare(ctx), rng)?;
    let y_plus = oracle_correct(task, ctx, &y_minus);
    let degenerate = y_plus == y_minus;
    let w = critic.critique(task, ctx, &y_minus)?.w_hal;
    Ok(record(ctx, y_plus, y_minus, w, task, Paradigm::Recognition, degenerate))
}

fn check_shapes(policy: &Policy, task: &Task) -> Result<()> {
    if policy.vocab != task.vocab || policy.num_contexts != task.num_contexts {
        return Err(RpoError::invalid(format!(
            "policy (V={}, L={}, {} contexts) does not match task (V={}, L={}, {} contexts)",
            policy.vocab.size,
            policy.vocab.max_len,
            policy.num_contexts,
            task.vocab.size,
            task.vocab.max_len,
            task.num_contexts
        )));
    }
    Ok(())
}

/// `pairs_per_context` records for every context, in context order. Each
/// context draws from its own seeded stream.
pub fn build_corpus(policy: &Policy, task: &Task, critic: &dyn Critic, spec: &CorpusSpec) -> Result<Vec<PreferenceRecord>> {
    spec.validate()?;
    check_shapes(policy, task)?;
    let mut out = Vec::with_capacity(task.num_contexts * spec.pairs_per_context);
    for x in 0..task.num_contexts {
        let mut rng = rng_from_seed(mix_seed(spec.seed, x as u64));
        for _ in 0..spec.pairs_per_context {
            let r = match spec.paradigm {
                Paradigm::SelfEvolution => {
                    gen_self_evolution(policy, task, critic, x, spec.max_regen_attempts, &mut rng)?
                }
                Paradigm::Reflective => gen_reflective(policy, task, critic, x, spec.max_regen_attempts, &mut rng)?,
                Paradigm::Injection => gen_injection(task, critic, x, spec.injection_k, &mut rng)?,
                Paradigm::Recognition => gen_recognition(policy, task, critic, x, &mut rng)?,
            };
            out.push(r);
        }
    }
    Ok(out)
}

/// Three corpora sharing contexts and rejected responses.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedCorpora {
    pub reflective: Vec<PreferenceRecord>,
    pub self_evolution: Vec<PreferenceRecord>,
    pub recognition: Vec<PreferenceRecord>,
}

/// Builds the reflective corpus exactly as [`build_corpus`] would, then pairs
/// each rejected response with (a) an on-policy sample scoring strictly
/// better, resampled up to the attempt budget, and (b) its oracle correction.
pub fn build_matched(
    policy: &Policy,
    task: &Task,
    critic: &dyn Critic,
    pairs_per_context: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<MatchedCorpora> {
    let spec = CorpusSpec {
        max_regen_attempts: max_attempts,
        ..CorpusSpec::new(Paradigm::Reflective, pairs_per_context, seed)
    };
    let reflective = build_corpus(policy, task, critic, &spec)?;
    let mut self_evolution = Vec::with_capacity(reflective.len());
    let mut recognition = Vec::with_capacity(reflective.len());
    for (x, chunk) in reflective.chunks(pairs_per_context).enumerate() {
        let mut rng = rng_from_seed(mix_seed(seed ^ 0xA5A5_A5A5_A5A5_A5A5, x as u64));
        let bare = Context::bare(x);
        for r in chunk {
            let floor = factuality_score(task, x, &r.y_minus)?;
            let mut y_plus = None;
            for _ in 0..max_attempts.max(1) {
                let y = policy.sample(&bare, &mut rng)?;
                if factuality_score(task, x, &y)? > floor {
                    y_plus = Some(y);
                    break;
                }
            }
            let se_degenerate = y_plus.is_none() || r.hint.is_none();
            let se_plus = y_plus.unwrap_or_else(|| r.y_minus.clone());
            self_evolution.push(record(x, se_plus, r.y_minus.clone(), r.w_hal, task, Paradigm::SelfEvolution, se_degenerate));

            let corrected = oracle_correct(task, x, &r.y_minus);
            let rec_degenerate = corrected == r.y_minus;
            recognition.push(record(x, corrected, r.y_minus.clone(), r.w_hal, task, Paradigm::Recognition, rec_degenerate));
        }
    }
    Ok(MatchedCorpora {
        reflective,
        self_evolution,
        recognition,
    })
}

/// One JSON object per line, in corpus order.
pub fn to_jsonl(records: &[PreferenceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serialises"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| RpoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| RpoError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| RpoError::io(path, e))?;
    }
    w.flush().map_err(|e| RpoError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let file = File::open(path).map_err(|e| RpoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RpoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RpoError::Parse {
            context: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// SHA-256 of the corpus' JSONL rendering, hex encoded.
pub fn corpus_hash(records: &[PreferenceRecord]) -> String {
    let digest = Sha256::digest(to_jsonl(records).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
