//! Numerical reasoner: per-chain value projection, cross-chain weighting
//! (the Treeformer), and the weighted aggregate with its explanation trace.
//!
//! All arithmetic happens in min-max normalized space. A chain's source value
//! is normalized by the source attribute's range and its prediction is read
//! back under the query attribute's range.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Segment, Tape, Tensor, Var};
use crate::encoder::{glorot, TransformerStack};
use crate::error::{Error, Result};
use crate::kg::{AttributeId, KnowledgeGraph, Query};
use crate::retrieval::{ChainPattern, RAChain};

/// How a chain turns its source value into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// `n̂ = head(ẽ)`, ignoring the source value.
    Direct,
    /// `n̂ = n_p + β`
    Translation,
    /// `n̂ = α · n_p`
    #[default]
    Scaling,
    /// `n̂ = α · (n_p + β)`
    Combined,
}

impl ProjectionMode {
    pub const ALL: [ProjectionMode; 4] = [Self::Direct, Self::Translation, Self::Scaling, Self::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Translation => "translation",
            Self::Scaling => "scaling",
            Self::Combined => "combined",
        }
    }
}

impl std::fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection mode `{s}`")))
    }
}

/// Scalar reference of the projection, clamped to `[0, 1]`. In direct mode
/// `alpha` is the head output and `n_p` is ignored.
pub fn project_value(mode: ProjectionMode, alpha: f64, beta: f64, n_p: f64) -> f64 {
    let v = match mode {
        ProjectionMode::Direct => alpha,
        ProjectionMode::Translation => n_p + beta,
        ProjectionMode::Scaling => alpha * n_p,
        ProjectionMode::Combined => alpha * (n_p + beta),
    };
    v.clamp(0.0, 1.0)
}

/// MLP head emitting `[α, β]` per chain. `α` is parameterized as `1 + out₀`
/// so an untrained head starts near the identity projection; in direct mode
/// `0.5 + out₀` is the prediction itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        let mut w2 = glorot(dim, 2, rng);
        w2.data_mut().iter_mut().for_each(|x| *x *= 0.1);
        Self {
            w1: store.add("head.w1", glorot(dim, dim, rng)),
            b1: store.add("head.b1", Tensor::zeros(1, dim)),
            w2: store.add("head.w2", w2),
            b2: store.add("head.b2", Tensor::zeros(1, 2)),
        }
    }

    /// Raw `[n, 2]` head outputs.
    pub fn outputs(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (tape.param(self.w1), tape.param(self.b1), tape.param(self.w2), tape.param(self.b2));
        let h = tape.matmul(e, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    /// Per-chain normalized predictions `[n, 1]` for normalized source values `n_p`.
    pub fn forward(&self, tape: &mut Tape, e: Var, n_p: &[f64], mode: ProjectionMode) -> Result<Var> {
        let out = self.outputs(tape, e)?;
        if tape.shape(out)[0] != n_p.len() {
            return Err(Error::Shape { op: "project_value", lhs: tape.shape(out), rhs: [n_p.len(), 1] });
        }
        let raw = tape.select_col(out, 0)?;
        let beta = tape.select_col(out, 1)?;
        let np = tape.constant(Tensor::col_vector(n_p.to_vec()));
        let pred = match mode {
            ProjectionMode::Direct => tape.add_scalar(raw, 0.5),
            ProjectionMode::Translation => tape.add(np, beta)?,
            ProjectionMode::Scaling => {
                let alpha = tape.add_scalar(raw, 1.0);
                tape.mul(alpha, np)?
            }
            ProjectionMode::Combined => {
                let alpha = tape.add_scalar(raw, 1.0);
                let shifted = tape.add(np, beta)?;
                tape.mul(alpha, shifted)?
            }
        };
        Ok(tape.clamp(pred, 0.0, 1.0))
    }
}

/// The Treeformer: self-attention across the chains of one query, a length
/// embedding per chain, and a linear scoring head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainWeighter {
    stack: TransformerStack,
    lengths: ParamId,
    w: ParamId,
    b: ParamId,
}

impl ChainWeighter {
    pub fn new(store: &mut ParamStore, dim: usize, layers: usize, heads: usize, max_hops: usize, rng: &mut impl Rng) -> Result<Self> {
        let stack = TransformerStack::new(store, "treeformer", dim, layers, heads, rng)?;
        let lengths = store.add("treeformer.length", glorot(max_hops.max(1), dim, rng));
        let w = store.add("treeformer.w", glorot(dim, 1, rng));
        let b = store.add("treeformer.b", Tensor::zeros(1, 1));
        Ok(Self { stack, lengths, w, b })
    }

    /// Chain logits `[n, 1]` before any bias or softmax.
    pub fn logits(&self, tape: &mut Tape, reps: Var, lengths: &[usize]) -> Result<Var> {
        let [n, _] = tape.shape(reps);
        if n == 0 {
            return Err(Error::Empty("no chains to weight".into()));
        }
        if lengths.len() != n {
            return Err(Error::Shape { op: "weight_chains", lhs: [n, 1], rhs: [lengths.len(), 1] });
        }
        let table = tape.param(self.lengths);
        let max = tape.shape(table)[0];
        let mut rows = Vec::with_capacity(n);
        for &l in lengths {
            if l == 0 || l > max {
                return Err(Error::Config(format!("chain length {l} outside the length table 1..={max}")));
            }
            rows.push((table, l - 1));
        }
        let len_emb = tape.stack_rows(rows)?;
        let c0 = tape.add(reps, len_emb)?;
        let t = self.stack.forward(tape, c0, &[Segment { start: 0, len: n }])?;
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let s = tape.matmul(t, w)?;
        tape.add_row(s, b)
    }

    /// Chain weights `ω` as a `[1, n]` probability row. `bias` (`[n, 1]`) is
    /// added to the logits before the softmax.
    pub fn weights(&self, tape: &mut Tape, reps: Var, lengths: &[usize], bias: Option<Var>) -> Result<Var> {
        let mut s = self.logits(tape, reps, lengths)?;
        if let Some(b) = bias {
            s = tape.add(s, b)?;
        }
        let row = tape.transpose(s);
        Ok(tape.softmax_rows(row))
    }
}

/// Pad `ω` with zeros up to `k` entries; padding never carries weight.
pub fn pad_weights(omega: &[f64], k: usize) -> Vec<f64> {
    let mut out = omega.to_vec();
    if out.len() < k {
        out.resize(k, 0.0);
    }
    out
}

/// `Σ ω_i · n̂_i` in normalized space.
pub fn aggregate(omega: &[f64], predictions: &[f64]) -> Result<f64> {
    if omega.len() != predictions.len() {
        return Err(Error::Shape { op: "aggregate", lhs: [1, omega.len()], rhs: [predictions.len(), 1] });
    }
    Ok(omega.iter().zip(predictions).map(|(w, p)| w * p).sum())
}

/// One weighted chain of a prediction, in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain: RAChain,
    pub description: String,
    pub entities: Vec<String>,
    pub score: f64,
    pub weight: f64,
    pub prediction: f64,
}

/// Everything behind one answer, for explanation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub query: Query,
    pub entity: String,
    pub attribute: String,
    /// Sorted by descending weight.
    pub chains: Vec<ChainTrace>,
    pub prediction: f64,
    pub prediction_normalized: f64,
    /// Set when no chain reached the query and the training mean was used.
    pub fallback: bool,
}

impl PredictionTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable listing of the `top` heaviest chains.
    pub fn to_text(&self, top: usize) -> String {
        let mut s = format!("{} / {} = {:.6}\n", self.entity, self.attribute, self.prediction);
        if let Some(t) = self.query.target_value {
            s += &format!("target {t:.6}\n");
        }
        if self.fallback {
            s += "no chain reached the entity; answered with the training mean\n";
        }
        for c in self.chains.iter().take(top) {
            s += &format!(
                "  w={:.4}  pred={:.6}  src={:.6}  {}  via {}\n",
                c.weight,
                c.prediction,
                c.chain.source_value,
                c.description,
                c.entities.join(" -> ")
            );
        }
        s
    }

    pub fn top_chain(&self) -> Option<&ChainTrace> {
        self.chains.first()
    }
}

/// A chain pattern with how often it carried the largest weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyChain {
    pub pattern: ChainPattern,
    pub description: String,
    pub count: usize,
    pub share: f64,
}

/// Rank chain patterns by how often they are a query's heaviest chain.
/// Restricted to queries on `attribute` when given.
pub fn top_chain_report(traces: &[PredictionTrace], attribute: Option<AttributeId>, kg: &KnowledgeGraph) -> Vec<KeyChain> {
    let mut counts: BTreeMap<ChainPattern, usize> = BTreeMap::new();
    let mut total = 0;
    for t in traces.iter().filter(|t| attribute.is_none_or(|a| t.query.attribute == a)) {
        if let Some(top) = t.top_chain() {
            *counts.entry(top.chain.pattern()).or_default() += 1;
            total += 1;
        }
    }
    let mut out: Vec<KeyChain> = counts
        .into_iter()
        .map(|(pattern, count)| KeyChain {
            description: pattern.describe(kg),
            pattern,
            count,
            share: count as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.pattern.cmp(&b.pattern)));
    out
}

/// Tab-separated rendering of the first `top` rows of a key-chain report.
pub fn key_chain_table(rows: &[KeyChain], top: usize) -> String {
    let mut s = String::from("rank\tcount\tshare\tchain\n");
    for (i, k) in rows.iter().take(top).enumerate() {
        s += &format!("{}\t{}\t{:.4}\t{}\n", i + 1, k.count, k.share, k.description);
    }
    s
}
