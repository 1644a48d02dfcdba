//! The synthetic factuality world: ground-truth responses, per-slot
//! severities, the critique oracle and the decoding-noise margin simulator.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RpoError};
use crate::math::pairwise_sum;
use crate::policy::{HintId, TokenSeq, Vocab};

/// Severity levels procedurally generated tasks draw from.
pub const SEVERITY_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskFile", into = "TaskFile")]
pub struct Task {
    pub vocab: Vocab,
    pub num_contexts: usize,
    pub gt: Vec<TokenSeq>,
    pub position_severity: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "L")]
    l: usize,
    num_contexts: usize,
    gt: Vec<TokenSeq>,
    position_severity: Vec<Vec<f64>>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<TaskFile> for Task {
    type Error = RpoError;

    fn try_from(f: TaskFile) -> Result<Self> {
        let t = Task {
            vocab: Vocab::new(f.v, f.l)?,
            num_contexts: f.num_contexts,
            gt: f.gt,
            position_severity: f.position_severity,
            seed: f.seed,
        };
        t.validate()?;
        Ok(t)
    }
}

impl From<Task> for TaskFile {
    fn from(t: Task) -> Self {
        TaskFile {
            v: t.vocab.size,
            l: t.vocab.max_len,
            num_contexts: t.num_contexts,
            gt: t.gt,
            position_severity: t.position_severity,
            seed: t.seed,
        }
    }
}

impl Task {
    /// Uniform random ground truth, severities drawn from [`SEVERITY_GRID`].
    pub fn generate(vocab: Vocab, num_contexts: usize, seed: u64) -> Result<Self> {
        if num_contexts == 0 {
            return Err(RpoError::invalid("task needs at least one context"));
        }
        let mut rng = crate::rng_from_seed(seed);
        let l = vocab.max_len;
        let gt = (0..num_contexts)
            .map(|_| (0..l).map(|_| rng.random_range(0..vocab.size)).collect())
            .collect();
        let position_severity = (0..num_contexts)
            .map(|_| (0..l).map(|_| SEVERITY_GRID[rng.random_range(0..SEVERITY_GRID.len())]).collect())
            .collect();
        Ok(Task {
            vocab,
            num_contexts,
            gt,
            position_severity,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_contexts == 0 {
            return Err(RpoError::invalid("task needs at least one context"));
        }
        if self.gt.len() != self.num_contexts || self.position_severity.len() != self.num_contexts {
            return Err(RpoError::invalid(format!(
                "task declares {} contexts but has {} gt rows and {} severity rows",
                self.num_contexts,
                self.gt.len(),
                self.position_severity.len()
            )));
        }
        for (x, (g, s)) in self.gt.iter().zip(&self.position_severity).enumerate() {
            self.vocab.validate_seq(g)?;
            if s.len() != self.vocab.max_len {
                return Err(RpoError::invalid(format!("context {x}: severity row has {} entries", s.len())));
            }
            if let Some(bad) = s.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
                return Err(RpoError::invalid(format!("context {x}: severity {bad} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn check(&self, context_id: usize, y: &[usize]) -> Result<()> {
        if context_id >= self.num_contexts {
            return Err(RpoError::invalid(format!(
                "context {context_id} out of range ({} contexts)",
                self.num_contexts
            )));
        }
        self.vocab.validate_seq(y)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RpoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RpoError::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("task serialises");
        std::fs::write(path, text).map_err(|e| RpoError::io(path, e))
    }
}

/// `−Σ severity[t]` over slots where `y` disagrees with the ground truth.
pub fn factuality_score(task: &Task, context_id: usize, y: &[usize]) -> Result<f64> {
    task.check(context_id, y)?;
    let gt = &task.gt[context_id];
    let sev = &task.position_severity[context_id];
    Ok(-(0..y.len()).filter(|&t| y[t] != gt[t]).map(|t| sev[t]).sum::<f64>())
}

/// Whether `y` has at least one slot disagreeing with the ground truth.
pub fn is_hallucinated(task: &Task, context_id: usize, y: &[usize]) -> bool {
    task.gt[context_id].iter().zip(y).any(|(a, b)| a != b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub position: usize,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritiqueResult {
    /// `None` when the response has no mismatched slot.
    pub hint: Option<HintId>,
    pub w_hal: f64,
    pub segments: Vec<Segment>,
}

impl CritiqueResult {
    pub fn clean() -> Self {
        CritiqueResult {
            hint: None,
            w_hal: 1.0,
            segments: Vec::new(),
        }
    }

    /// `1 + mean segment severity`, clamped to `[1, 2]`; `1` with no segments.
    pub fn severity_weight(segments: &[Segment]) -> f64 {
        if segments.is_empty() {
            return 1.0;
        }
        let sev: Vec<f64> = segments.iter().map(|s| s.severity).collect();
        (1.0 + pairwise_sum(&sev) / sev.len() as f64).clamp(1.0, 2.0)
    }
}

/// Anything that can turn a response into a hint plus severity weight.
pub trait Critic {
    fn critique(&self, task: &Task, context_id: usize, y: &[usize]) -> Result<CritiqueResult>;
}

/// The exact synthetic critic.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleCritic;

impl Critic for OracleCritic {
    fn critique(&self, task: &Task, context_id: usize, y: &[usize]) -> Result<CritiqueResult> {
        critique(task, context_id, y)
    }
}

/// Lists every mismatched slot; the hint corrects the most severe one
/// (lowest position on ties).
pub fn critique(task: &Task, context_id: usize, y: &[usize]) -> Result<CritiqueResult> {
    task.check(context_id, y)?;
    let gt = &task.gt[context_id];
    let sev = &task.position_severity[context_id];
    let segments: Vec<Segment> = (0..y.len())
        .filter(|&t| y[t] != gt[t])
        .map(|t| Segment {
            position: t,
            severity: sev[t],
        })
        .collect();
    let mut best: Option<&Segment> = None;
    for s in &segments {
        if best.is_none_or(|b| s.severity > b.severity) {
            best = Some(s);
        }
    }
    Ok(CritiqueResult {
        hint: best.map(|s| HintId {
            position: s.position,
            target_token: gt[s.position],
        }),
        w_hal: CritiqueResult::severity_weight(&segments),
        segments,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSimStats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub sigma: f64,
}

/// Simulates the margin between two responses sharing one deterministic
/// score, each perturbed by independent `N(0, σ²)` decoding noise.
pub fn margin_noise_sim<R: rand::Rng + ?Sized>(sigma: f64, n: usize, rng: &mut R) -> Result<MarginSimStats> {
    if n < 2 {
        return Err(RpoError::invalid(format!("need at least 2 pairs, got {n}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(RpoError::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let score = -1.0;
    let margins: Vec<f64> = (0..n)
        .map(|_| {
            let e1: f64 = StandardNormal.sample(rng);
            let e2: f64 = StandardNormal.sample(rng);
            (score + sigma * e1) - (score + sigma * e2)
        })
        .collect();
    let mean = pairwise_sum(&margins) / n as f64;
    let sq: Vec<f64> = margins.iter().map(|m| (m - mean) * (m - mean)).collect();
    Ok(MarginSimStats {
        n,
        mean,
        variance: pairwise_sum(&sq) / (n - 1) as f64,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task {
            vocab: Vocab::new(4, 3).unwrap(),
            num_contexts: 1,
            gt: vec![vec![0, 1, 2]],
            position_severity: vec![vec![0.6, 0.8, 0.25]],
            seed: 0,
        }
    }

    #[test]
    fn score_examples() {
        let t = task();
        assert_eq!(factuality_score(&t, 0, &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(factuality_score(&t, 0, &[3, 1, 2]).unwrap(), -0.6);
        assert!(factuality_score(&t, 0, &[0, 1, 4]).is_err());
    }

    #[test]
    fn critique_examples() {
        let t = task();
        let clean = critique(&t, 0, &[0, 1, 2]).unwrap();
        assert_eq!(clean, CritiqueResult::clean());
        let c = critique(&t, 0, &[3, 0, 2]).unwrap();
        assert_eq!(c.hint, Some(HintId { position: 1, target_token: 1 }));
        assert!((c.w_hal - 1.7).abs() < 1e-12);
        assert_eq!(c.segments.len(), 2);
    }

    #[test]
    fn ties_pick_lowest_position() {
        let mut t = task();
        t.position_severity[0] = vec![0.5, 0.5, 0.5];
        let c = critique(&t, 0, &[1, 2, 3]).unwrap();
        assert_eq!(c.hint.unwrap().position, 0);
    }

    #[test]
    fn all_wrong_at_full_severity_gives_two() {
        let mut t = task();
        t.position_severity[0] = vec![1.0; 3];
        assert_eq!(critique(&t, 0, &[1, 2, 3]).unwrap().w_hal, 2.0);
    }

    #[test]
    fn zero_sigma_is_exact() {
        let mut r = crate::rng_from_seed(0);
        let s = margin_noise_sim(0.0, 10, &mut r).unwrap();
        assert_eq!((s.mean, s.variance), (0.0, 0.0));
        assert!(margin_noise_sim(1.0, 1, &mut r).is_err());
    }

    #[test]
    fn task_json_validates() {
        let t = Task::generate(Vocab::new(6, 3).unwrap(), 4, 11).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Task>(&s).unwrap(), t);
        let bad = s.replacen("\"position_severity\":[[", "\"position_severity\":[[1.5,", 1);
        assert!(serde_json::from_str::<Task>(&bad).is_err());
    }
}
