//! The assembled model: filter tables, chain encoder, projection head and
//! Treeformer over one shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::ChainEncoder;
use crate::error::{Error, Result};
use crate::filter::{self, EnhancedToC, FilterEmbeddings, ScoreOrder};
use crate::kg::{AttributeStats, KnowledgeGraph, Query};
use crate::reasoner::{ChainTrace, ChainWeighter, PredictionTrace, ProjectionHead, ProjectionMode};
use crate::retrieval::{self, TreeOfChains};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub filter_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub affine_hidden: usize,
    pub max_hops: usize,
    pub curvature: f64,
    pub lambda: f64,
    pub score_order: ScoreOrder,
    pub projection: ProjectionMode,
    /// Weight of the filter score inside the chain-weight logits; 0 disables.
    pub score_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filter_dim: 128,
            dim: 256,
            layers: 2,
            heads: 4,
            affine_hidden: 256,
            max_hops: 3,
            curvature: 1.0,
            lambda: 0.5,
            score_order: ScoreOrder::Smallest,
            projection: ProjectionMode::Scaling,
            score_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("filter_dim", self.filter_dim),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("affine_hidden", self.affine_hidden),
            ("max_hops", self.max_hops),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide dim ({})", self.heads, self.dim)));
        }
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            return Err(Error::Config(format!("curvature must be positive, got {}", self.curvature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.score_bias >= 0.0 && self.score_bias.is_finite()) {
            return Err(Error::Config(format!("score_bias must be nonnegative, got {}", self.score_bias)));
        }
        Ok(())
    }
}

/// Degradation switches for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Random chains instead of the hyperbolic top-k.
    pub no_filter: bool,
    /// Mean token embedding instead of the Transformer encoder.
    pub no_encoder: bool,
    /// Skip the value-conditioned affine transfer.
    pub no_numerical_aware: bool,
    /// Direct prediction instead of the configured projection.
    pub no_projection: bool,
    /// Uniform chain weights.
    pub no_weighting: bool,
}

impl Ablation {
    pub const TOGGLES: [&'static str; 5] = ["no_filter", "no_encoder", "no_numerical_aware", "no_projection", "no_weighting"];

    pub fn from_toggles<S: AsRef<str>>(toggles: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for t in toggles {
            match t.as_ref() {
                "no_filter" => a.no_filter = true,
                "no_encoder" => a.no_encoder = true,
                "no_numerical_aware" => a.no_numerical_aware = true,
                "no_projection" => a.no_projection = true,
                "no_weighting" => a.no_weighting = true,
                other => return Err(Error::UnknownToggle(other.to_string())),
            }
        }
        Ok(a)
    }

    pub fn toggles(&self) -> Vec<&'static str> {
        let flags = [self.no_filter, self.no_encoder, self.no_numerical_aware, self.no_projection, self.no_weighting];
        Self::TOGGLES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }

    pub fn name(&self) -> String {
        let t = self.toggles();
        if t.is_empty() {
            "full".into()
        } else {
            t.join("+")
        }
    }
}

/// How the filter picks chains for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Deterministic top-k.
    TopK,
    /// Top-k with `explore` slots filled at random from the rest.
    Explore(usize),
}

/// Differentiable outputs of one query's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Normalized prediction, `[1, 1]`.
    pub prediction: Var,
    /// Chain weights, `[1, n]`.
    pub weights: Var,
    /// Per-chain normalized predictions, `[n, 1]`.
    pub chain_predictions: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainsFormer {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub relations: ParamId,
    pub attributes: ParamId,
    pub encoder: ChainEncoder,
    pub head: ProjectionHead,
    pub weighter: ChainWeighter,
    #[serde(skip)]
    pub store: ParamStore,
}

impl ChainsFormer {
    pub fn new(num_relations: usize, num_attributes: usize, config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let relations = store.add_hyperbolic("filter.relations", filter::init_table(num_relations, c.filter_dim, &mut rng), c.curvature);
        let attributes =
            store.add_hyperbolic("filter.attributes", filter::init_table(num_attributes, c.filter_dim, &mut rng), c.curvature);
        let encoder = ChainEncoder::new(&mut store, c.filter_dim, c.dim, c.layers, c.heads, c.affine_hidden, c.max_hops, &mut rng)?;
        let head = ProjectionHead::new(&mut store, c.dim, &mut rng);
        let weighter = ChainWeighter::new(&mut store, c.dim, c.layers, c.heads, c.max_hops, &mut rng)?;
        Ok(Self { config, ablation, relations, attributes, encoder, head, weighter, store })
    }

    pub fn for_graph(kg: &KnowledgeGraph, config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        Self::new(kg.num_relations(), kg.num_attributes(), config, ablation, seed)
    }

    pub fn projection(&self) -> ProjectionMode {
        if self.ablation.no_projection {
            ProjectionMode::Direct
        } else {
            self.config.projection
        }
    }

    pub fn embeddings(&self) -> Result<FilterEmbeddings<'_>> {
        FilterEmbeddings::new(self.store.get(self.relations), self.store.get(self.attributes), self.config.curvature)
    }

    /// Sample a tree of chains, dropping chains whose source attribute has no
    /// usable range (their values cannot be normalized).
    pub fn retrieve(&self, kg: &KnowledgeGraph, stats: &AttributeStats, query: &Query, walks: usize, seed: u64) -> TreeOfChains {
        let mut toc = retrieval::sample_tree(kg, query, walks, self.config.max_hops, seed);
        toc.chains.retain(|c| stats.has_range(c.source_attribute));
        toc
    }

    /// Filter a tree down to at most `k` chains.
    pub fn select(&self, toc: &TreeOfChains, k: usize, selection: Selection, seed: u64) -> Result<EnhancedToC> {
        let emb = self.embeddings()?;
        let (lambda, order) = (self.config.lambda, self.config.score_order);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
        if self.ablation.no_filter {
            return filter::select_random(toc, &emb, k, lambda, &mut rng);
        }
        match selection {
            Selection::TopK => filter::select_top_k(toc, &emb, k, lambda, order),
            Selection::Explore(n) => filter::select_exploring(toc, &emb, k, n, lambda, order, &mut rng),
        }
    }

    /// Affinity scores of `etoc`'s chains recomputed on the tape, `[n, 1]`.
    pub fn score_vars(&self, tape: &mut Tape, etoc: &EnhancedToC) -> Result<Var> {
        let c = self.config.curvature;
        let rel = tape.param(self.relations);
        let att = tape.param(self.attributes);
        let zero = tape.constant(Tensor::zeros(1, self.config.filter_dim));
        let max_len = etoc.chains.iter().map(|ch| ch.len()).max().unwrap_or(0);
        let mut h: Option<Var> = None;
        for step in 0..max_len {
            // x ⊕ 0 = x, so zero rows leave shorter chains untouched
            let rows = etoc.chains.iter().map(|ch| ch.relations.get(step).map_or((zero, 0), |&r| (rel, r))).collect();
            let y = tape.stack_rows(rows)?;
            h = Some(match h {
                None => y,
                Some(x) => tape.mobius_add_rows(x, y, c)?,
            });
        }
        let h = h.ok_or_else(|| Error::Empty("no chains to score".into()))?;
        let src: Vec<usize> = etoc.chains.iter().map(|ch| ch.source_attribute).collect();
        let ap = tape.select_rows(att, &src)?;
        let aq = tape.select_rows(att, &vec![etoc.query.attribute; src.len()])?;
        let intra = tape.poincare_distance_rows(ap, aq, c)?;
        let inter = tape.poincare_distance_rows(h, aq, c)?;
        let intra = tape.scale(intra, self.config.lambda);
        let inter = tape.scale(inter, 1.0 - self.config.lambda);
        tape.add(intra, inter)
    }

    /// Forward pass over a non-empty enhanced tree.
    pub fn forward(&self, tape: &mut Tape, etoc: &EnhancedToC, stats: &AttributeStats) -> Result<Forward> {
        let chains = &etoc.chains;
        if chains.is_empty() {
            return Err(Error::Empty("forward pass over an empty tree of chains".into()));
        }
        let n = chains.len();
        let q = etoc.query.attribute;
        let raw: Vec<f64> = chains.iter().map(|c| c.source_value).collect();
        let normalized = chains.iter().map(|c| stats.normalize(c.source_value, c.source_attribute)).collect::<Result<Vec<_>>>()?;
        let lengths: Vec<usize> = chains.iter().map(|c| c.len()).collect();

        let rel = tape.param(self.relations);
        let att = tape.param(self.attributes);
        let tables = self.encoder.tables(tape, rel, att, self.config.curvature)?;
        let e = if self.ablation.no_encoder {
            self.encoder.mean_tokens(tape, &tables, chains, q)?
        } else {
            self.encoder.encode(tape, &tables, chains, q)?
        };
        let e = if self.ablation.no_numerical_aware { e } else { self.encoder.affine.transfer(tape, e, &raw)? };
        let preds = self.head.forward(tape, e, &normalized, self.projection())?;

        let weights = if self.ablation.no_weighting {
            tape.constant(Tensor::filled(1, n, 1.0 / n as f64))
        } else {
            let bias = if self.config.score_bias > 0.0 && !self.ablation.no_filter {
                let s = self.score_vars(tape, etoc)?;
                let sign = match self.config.score_order {
                    ScoreOrder::Smallest => -1.0,
                    ScoreOrder::Largest => 1.0,
                };
                Some(tape.scale(s, sign * self.config.score_bias))
            } else {
                None
            };
            self.weighter.weights(tape, e, &lengths, bias)?
        };
        let prediction = tape.matmul(weights, preds)?;
        Ok(Forward { prediction, weights, chain_predictions: preds })
    }

    /// Answer one query with a full trace. Falls back to the training mean of
    /// the attribute when retrieval finds no chain.
    pub fn predict(
        &self,
        kg: &KnowledgeGraph,
        stats: &AttributeStats,
        query: &Query,
        walks: usize,
        k: usize,
        seed: u64,
    ) -> Result<PredictionTrace> {
        let attr_name = kg.attributes().name(query.attribute).to_string();
        let toc = self.retrieve(kg, stats, query, walks, seed);
        let base = PredictionTrace {
            query: *query,
            entity: kg.entities().name(query.entity).to_string(),
            attribute: attr_name.clone(),
            chains: Vec::new(),
            prediction: 0.0,
            prediction_normalized: 0.0,
            fallback: true,
        };
        if toc.is_empty() {
            let mean = stats.mean(query.attribute).ok_or_else(|| Error::DegenerateAttribute(attr_name.clone()))?;
            let normalized = stats.normalize(mean, query.attribute)?;
            return Ok(PredictionTrace { prediction: mean, prediction_normalized: normalized, ..base });
        }
        let etoc = self.select(&toc, k, Selection::TopK, seed)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, &etoc, stats)?;
        let normalized = tape.value(out.prediction).item();
        let omega = tape.value(out.weights).data().to_vec();
        let preds = tape.value(out.chain_predictions).data().to_vec();
        let mut chains = Vec::with_capacity(etoc.len());
        for (i, chain) in etoc.chains.iter().enumerate() {
            chains.push(ChainTrace {
                description: chain.describe(kg),
                entities: chain.entity_path.iter().map(|&e| kg.entities().name(e).to_string()).collect(),
                score: etoc.scores[i],
                weight: omega[i],
                prediction: stats.denormalize(preds[i], query.attribute)?,
                chain: chain.clone(),
            });
        }
        chains.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        Ok(PredictionTrace {
            chains,
            prediction: stats.denormalize(normalized, query.attribute)?,
            prediction_normalized: normalized,
            fallback: false,
            ..base
        })
    }

    /// Snapshot of every parameter value, in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", self.store.len(), values.len())));
        }
        for (i, v) in values.iter().enumerate() {
            let slot = self.store.get_mut(ParamId(i));
            if slot.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for parameter {i}")));
            }
            *slot = v.clone();
        }
        Ok(())
    }
}
