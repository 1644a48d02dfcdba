//! The toy autoregressive policy family.
//!
//! Two parameterisations share one interface:
//!
//! * **Bigram** — step logits `U[x,·] + B[prev,·] + 1[hint]·H[(pos,target),·]`,
//!   with `prev = V` standing for BOS. Tables are stored row-major in the
//!   order `U (X×V)`, `B ((V+1)×V)`, `H ((L·V)×V)`.
//! * **Tabular** — one logit per `(context, full sequence)` followed by one
//!   additive offset per `(context, hint, full sequence)`. Stored as
//!   `base (X×V^L)` then `offsets (X×(L·V)×V^L)`.
//!
//! Sequences are indexed base-`V` with the first token most significant, so
//! every prefix owns a contiguous block of indices.

use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RpoError};
use crate::math::{log_softmax_in_place, logsumexp, softmax};

/// Largest sequence space enumerated unless a caller asks for more.
pub const DEFAULT_ENUM_BUDGET: u64 = 65_536;

/// A fixed-length response: exactly `L` token ids.
pub type TokenSeq = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub max_len: usize,
}

impl Vocab {
    pub fn new(size: usize, max_len: usize) -> Result<Self> {
        if size < 2 {
            return Err(RpoError::invalid(format!("vocabulary size must be >= 2, got {size}")));
        }
        if max_len < 1 {
            return Err(RpoError::invalid("response length must be >= 1"));
        }
        Ok(Vocab { size, max_len })
    }

    /// `V^L`, saturating at `u128::MAX`.
    pub fn num_sequences(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.max_len {
            n = n.saturating_mul(self.size as u128);
        }
        n
    }

    /// `V^L` as a `usize` if it fits within `budget`.
    pub fn enumerable(&self, budget: u64) -> Result<usize> {
        let n = self.num_sequences();
        if n > budget as u128 {
            return Err(RpoError::BudgetExceeded {
                required: n,
                budget,
            });
        }
        Ok(n as usize)
    }

    pub fn num_hints(&self) -> usize {
        self.size * self.max_len
    }

    pub fn hint_index(&self, h: HintId) -> usize {
        h.position * self.size + h.target_token
    }

    pub fn hint_from_index(&self, idx: usize) -> HintId {
        HintId {
            position: idx / self.size,
            target_token: idx % self.size,
        }
    }

    pub fn validate_seq(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.max_len {
            return Err(RpoError::invalid(format!(
                "sequence has {} tokens, expected {}",
                y.len(),
                self.max_len
            )));
        }
        if let Some(&t) = y.iter().find(|&&t| t >= self.size) {
            return Err(RpoError::invalid(format!(
                "token id {t} out of range for vocabulary of size {}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn validate_hint(&self, h: HintId) -> Result<()> {
        if h.position >= self.max_len || h.target_token >= self.size {
            return Err(RpoError::invalid(format!(
                "hint (position {}, token {}) out of range for V={}, L={}",
                h.position, h.target_token, self.size, self.max_len
            )));
        }
        Ok(())
    }

    /// Index of `y` in the enumeration order. Assumes `y` is valid.
    pub fn seq_index(&self, y: &[usize]) -> usize {
        y.iter().fold(0, |acc, &t| acc * self.size + t)
    }

    pub fn index_seq(&self, mut idx: usize) -> TokenSeq {
        let mut y = vec![0; self.max_len];
        for slot in y.iter_mut().rev() {
            *slot = idx % self.size;
            idx /= self.size;
        }
        y
    }
}

/// Which response slot a hint corrects and the token it points to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HintId {
    pub position: usize,
    pub target_token: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub context_id: usize,
    pub hint: Option<HintId>,
}

impl Context {
    pub fn bare(context_id: usize) -> Self {
        Context {
            context_id,
            hint: None,
        }
    }

    pub fn hinted(context_id: usize, hint: HintId) -> Self {
        Context {
            context_id,
            hint: Some(hint),
        }
    }

    pub fn without_hint(self) -> Self {
        Context::bare(self.context_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Tabular,
    Bigram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct Policy {
    pub kind: PolicyKind,
    pub vocab: Vocab,
    pub num_contexts: usize,
    /// Flat parameter vector θ in the documented table order.
    pub params: Vec<f64>,
}

/// On-disk shape of a policy fixture.
#[derive(Serialize, Deserialize)]
struct PolicyFile {
    kind: PolicyKind,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "L")]
    l: usize,
    num_contexts: usize,
    params: Vec<f64>,
}

impl TryFrom<PolicyFile> for Policy {
    type Error = RpoError;

    fn try_from(f: PolicyFile) -> Result<Self> {
        Policy::new(f.kind, Vocab::new(f.v, f.l)?, f.num_contexts, f.params)
    }
}

impl From<Policy> for PolicyFile {
    fn from(p: Policy) -> Self {
        PolicyFile {
            kind: p.kind,
            v: p.vocab.size,
            l: p.vocab.max_len,
            num_contexts: p.num_contexts,
            params: p.params,
        }
    }
}

impl Policy {
    pub fn new(kind: PolicyKind, vocab: Vocab, num_contexts: usize, params: Vec<f64>) -> Result<Self> {
        if num_contexts == 0 {
            return Err(RpoError::invalid("policy needs at least one context"));
        }
        let expected = Self::param_count(kind, vocab, num_contexts)?;
        if params.len() != expected {
            return Err(RpoError::invalid(format!(
                "{kind:?} policy with V={}, L={}, {num_contexts} contexts needs {expected} parameters, got {}",
                vocab.size,
                vocab.max_len,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(RpoError::invalid(format!("parameter {i} is not finite")));
        }
        Ok(Policy {
            kind,
            vocab,
            num_contexts,
            params,
        })
    }

    pub fn zeros(kind: PolicyKind, vocab: Vocab, num_contexts: usize) -> Result<Self> {
        let n = Self::param_count(kind, vocab, num_contexts)?;
        Self::new(kind, vocab, num_contexts, vec![0.0; n])
    }

    /// Every parameter drawn i.i.d. from `N(0, scale²)`.
    pub fn random<R: rand::Rng + ?Sized>(
        kind: PolicyKind,
        vocab: Vocab,
        num_contexts: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(kind, vocab, num_contexts)?;
        for v in p.params.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        }
        Ok(p)
    }

    /// Tabular policies materialise every sequence, so they must fit the
    /// default enumeration budget.
    pub fn param_count(kind: PolicyKind, vocab: Vocab, num_contexts: usize) -> Result<usize> {
        let (v, l, x) = (vocab.size, vocab.max_len, num_contexts);
        Ok(match kind {
            PolicyKind::Bigram => x * v + (v + 1) * v + l * v * v,
            PolicyKind::Tabular => {
                let n = vocab.enumerable(DEFAULT_ENUM_BUDGET)?;
                x * n * (1 + l * v)
            }
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters that only act when a hint is present.
    pub fn hint_range(&self) -> Range<usize> {
        let start = match self.kind {
            PolicyKind::Bigram => {
                let v = self.vocab.size;
                self.num_contexts * v + (v + 1) * v
            }
            PolicyKind::Tabular => self.num_contexts * self.num_seqs_unchecked(),
        };
        start..self.params.len()
    }

    /// Index groups over which a softmax normalises; gradients sum to zero
    /// within each. For Tabular, a group is one row of `V^L` logits.
    pub fn softmax_groups(&self) -> Vec<Range<usize>> {
        let width = match self.kind {
            PolicyKind::Bigram => self.vocab.size,
            PolicyKind::Tabular => self.num_seqs_unchecked(),
        };
        (0..self.params.len() / width)
            .map(|g| g * width..(g + 1) * width)
            .collect()
    }

    pub(crate) fn num_seqs_unchecked(&self) -> usize {
        self.vocab.num_sequences() as usize
    }

    // --- bigram table offsets -------------------------------------------

    pub(crate) fn u_row(&self, x: usize) -> usize {
        x * self.vocab.size
    }

    pub(crate) fn b_row(&self, prev: usize) -> usize {
        (self.num_contexts + prev) * self.vocab.size
    }

    pub(crate) fn h_row(&self, h: HintId) -> usize {
        let v = self.vocab.size;
        (self.num_contexts + v + 1 + self.vocab.hint_index(h)) * v
    }

    // --- tabular table offsets ------------------------------------------

    pub(crate) fn tab_base_row(&self, x: usize) -> usize {
        x * self.num_seqs_unchecked()
    }

    pub(crate) fn tab_hint_row(&self, x: usize, h: HintId) -> usize {
        let n = self.num_seqs_unchecked();
        let hints = self.vocab.num_hints();
        self.num_contexts * n + (x * hints + self.vocab.hint_index(h)) * n
    }

    pub fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.context_id >= self.num_contexts {
            return Err(RpoError::invalid(format!(
                "context {} out of range ({} contexts)",
                ctx.context_id, self.num_contexts
            )));
        }
        if let Some(h) = ctx.hint {
            self.vocab.validate_hint(h)?;
        }
        Ok(())
    }

    fn check(&self, ctx: &Context, y: &[usize]) -> Result<()> {
        self.check_context(ctx)?;
        self.vocab.validate_seq(y)
    }

    /// Bigram: raw step logits given the previous token (`None` = BOS).
    pub(crate) fn bigram_logits(&self, ctx: &Context, prev: Option<usize>) -> Vec<f64> {
        let v = self.vocab.size;
        let u = self.u_row(ctx.context_id);
        let b = self.b_row(prev.unwrap_or(v));
        let mut out: Vec<f64> = (0..v).map(|j| self.params[u + j] + self.params[b + j]).collect();
        if let Some(h) = ctx.hint {
            let r = self.h_row(h);
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.params[r + j];
            }
        }
        out
    }

    /// Bigram: log-softmax table indexed `[prev][token]`, `prev = V` for BOS.
    fn bigram_log_table(&self, ctx: &Context) -> Vec<Vec<f64>> {
        let v = self.vocab.size;
        (0..=v)
            .map(|prev| {
                let mut row = self.bigram_logits(ctx, if prev == v { None } else { Some(prev) });
                log_softmax_in_place(&mut row);
                row
            })
            .collect()
    }

    /// Tabular: sequence logits for `ctx`, hint offsets included.
    pub(crate) fn tabular_logits(&self, ctx: &Context) -> Vec<f64> {
        let n = self.num_seqs_unchecked();
        let base = self.tab_base_row(ctx.context_id);
        let mut out = self.params[base..base + n].to_vec();
        if let Some(h) = ctx.hint {
            let r = self.tab_hint_row(ctx.context_id, h);
            for (o, d) in out.iter_mut().zip(&self.params[r..r + n]) {
                *o += d;
            }
        }
        out
    }

    /// `log π(y | ctx)`.
    pub fn log_prob(&self, ctx: &Context, y: &[usize]) -> Result<f64> {
        self.check(ctx, y)?;
        Ok(match self.kind {
            PolicyKind::Bigram => {
                let mut prev = None;
                let mut total = 0.0;
                for &t in y {
                    let mut row = self.bigram_logits(ctx, prev);
                    log_softmax_in_place(&mut row);
                    total += row[t];
                    prev = Some(t);
                }
                total
            }
            PolicyKind::Tabular => {
                let logits = self.tabular_logits(ctx);
                logits[self.vocab.seq_index(y)] - logsumexp(&logits)
            }
        })
    }

    /// Log-probabilities of every sequence, in enumeration order.
    pub fn log_probs(&self, ctx: &Context) -> Result<Vec<f64>> {
        self.log_probs_with_budget(ctx, DEFAULT_ENUM_BUDGET)
    }

    pub fn log_probs_with_budget(&self, ctx: &Context, budget: u64) -> Result<Vec<f64>> {
        self.check_context(ctx)?;
        let n = self.vocab.enumerable(budget)?;
        Ok(match self.kind {
            PolicyKind::Bigram => {
                let table = self.bigram_log_table(ctx);
                let v = self.vocab.size;
                let mut out = Vec::with_capacity(n);
                let mut y = vec![0usize; self.vocab.max_len];
                for idx in 0..n {
                    if idx > 0 {
                        // odometer increment, last token fastest
                        for slot in y.iter_mut().rev() {
                            *slot += 1;
                            if *slot < v {
                                break;
                            }
                            *slot = 0;
                        }
                    }
                    let mut prev = v;
                    let mut lp = 0.0;
                    for &t in &y {
                        lp += table[prev][t];
                        prev = t;
                    }
                    out.push(lp);
                }
                out
            }
            PolicyKind::Tabular => {
                let mut logits = self.tabular_logits(ctx);
                log_softmax_in_place(&mut logits);
                logits
            }
        })
    }

    /// Probability of every sequence, indexed by [`Vocab::seq_index`].
    pub fn enumerate_distribution(&self, ctx: &Context) -> Result<Vec<f64>> {
        Ok(self.log_probs(ctx)?.into_iter().map(f64::exp).collect())
    }

    /// Ancestral sampling, one token at a time.
    pub fn sample<R: rand::Rng + ?Sized>(&self, ctx: &Context, rng: &mut R) -> Result<TokenSeq> {
        self.check_context(ctx)?;
        let v = self.vocab.size;
        let l = self.vocab.max_len;
        match self.kind {
            PolicyKind::Bigram => {
                let mut y = Vec::with_capacity(l);
                let mut prev = None;
                for _ in 0..l {
                    let p = softmax(&self.bigram_logits(ctx, prev));
                    let t = sample_categorical(&p, rng);
                    y.push(t);
                    prev = Some(t);
                }
                Ok(y)
            }
            PolicyKind::Tabular => {
                let probs = softmax(&self.tabular_logits(ctx));
                let mut y = Vec::with_capacity(l);
                let mut start = 0usize;
                let mut block = probs.len();
                for _ in 0..l {
                    block /= v;
                    let masses: Vec<f64> = (0..v)
                        .map(|j| probs[start + j * block..start + (j + 1) * block].iter().sum())
                        .collect();
                    let t = sample_categorical(&masses, rng);
                    y.push(t);
                    start += t * block;
                }
                Ok(y)
            }
        }
    }

    /// Next-token distribution after consuming `y`.
    ///
    /// Bigram: the step distribution conditioned on `y`'s last token.
    /// Tabular: the window slides one token — the softmax over the `V`
    /// sequence logits of `(y_2, …, y_L, v)`.
    pub fn continuation_distribution(&self, ctx: &Context, y: &[usize]) -> Result<Vec<f64>> {
        self.check(ctx, y)?;
        Ok(match self.kind {
            PolicyKind::Bigram => softmax(&self.bigram_logits(ctx, y.last().copied())),
            PolicyKind::Tabular => softmax(&self.continuation_logits(ctx, y)),
        })
    }

    /// Tabular continuation logits (see [`Policy::continuation_distribution`]).
    pub(crate) fn continuation_logits(&self, ctx: &Context, y: &[usize]) -> Vec<f64> {
        let v = self.vocab.size;
        let logits = self.tabular_logits(ctx);
        let stem = self.vocab.seq_index(&y[1..]) * v;
        (0..v).map(|j| logits[stem + j]).collect()
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RpoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RpoError::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("policy serialises");
        std::fs::write(path, text).map_err(|e| RpoError::io(path, e))
    }
}

/// Draw an index proportional to non-negative `weights`.
pub fn sample_categorical<R: rand::Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u at the very top: fall back to the last non-zero weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}
