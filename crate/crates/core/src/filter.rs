//! Hyperbolic affinity filter.
//!
//! A chain's relations are folded into one point of the Poincaré ball with
//! left-to-right Möbius addition. Its score against the query attribute mixes
//! the attribute-to-attribute distance with the chain-to-attribute distance;
//! smaller scores mean more relevant chains.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hyperbolic::{self, PoincareVector};
use crate::kg::{AttributeId, Query};
use crate::retrieval::{RAChain, TreeOfChains};

/// Radius of the ball the embeddings are drawn from at initialization.
pub const INIT_RADIUS: f64 = 0.1;

/// Borrowed view of the relation and attribute tables, one ball point per row.
#[derive(Debug, Clone, Copy)]
pub struct FilterEmbeddings<'a> {
    relations: &'a Tensor,
    attributes: &'a Tensor,
    curvature: f64,
}

impl<'a> FilterEmbeddings<'a> {
    pub fn new(relations: &'a Tensor, attributes: &'a Tensor, curvature: f64) -> Result<Self> {
        if relations.cols() != attributes.cols() {
            return Err(Error::Dimension(format!(
                "relation width {} != attribute width {}",
                relations.cols(),
                attributes.cols()
            )));
        }
        if !(curvature > 0.0 && curvature.is_finite()) {
            return Err(Error::Config(format!("curvature must be positive, got {curvature}")));
        }
        for t in [relations, attributes] {
            for r in 0..t.rows() {
                if curvature * hyperbolic::sq_norm(t.row(r)) >= 1.0 {
                    return Err(Error::Dimension(format!("embedding row {r} lies outside the ball")));
                }
            }
        }
        Ok(Self { relations, attributes, curvature })
    }

    pub fn dim(&self) -> usize {
        self.relations.cols()
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn relation(&self, r: usize) -> Result<&'a [f64]> {
        if r >= self.relations.rows() {
            return Err(Error::UnknownRelation(r));
        }
        Ok(self.relations.row(r))
    }

    pub fn attribute(&self, a: AttributeId) -> Result<&'a [f64]> {
        if a >= self.attributes.rows() {
            return Err(Error::UnknownAttribute(format!("#{a}")));
        }
        Ok(self.attributes.row(a))
    }
}

/// A `rows × dim` table of points drawn uniformly from the ball of radius
/// [`INIT_RADIUS`].
pub fn init_table(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, dim);
    for r in 0..rows {
        let row = t.row_mut(r);
        // gaussian direction, radius ∝ u^(1/d): uniform density over the ball
        let norm = loop {
            row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let n = hyperbolic::sq_norm(row).sqrt();
            if n > 1e-12 {
                break n;
            }
        };
        let radius = INIT_RADIUS * rng.gen::<f64>().powf(1.0 / dim.max(1) as f64);
        row.iter_mut().for_each(|x| *x *= radius / norm);
    }
    t
}

/// Which end of the score ordering counts as relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreOrder {
    /// Keep the chains with the smallest scores (distances).
    #[default]
    Smallest,
    /// Keep the chains with the largest scores.
    Largest,
}

impl std::str::FromStr for ScoreOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallest" => Ok(Self::Smallest),
            "largest" => Ok(Self::Largest),
            other => Err(Error::Config(format!("unknown score order `{other}`"))),
        }
    }
}

fn fold_into(chain: &RAChain, emb: &FilterEmbeddings, acc: &mut Vec<f64>) -> Result<()> {
    let Some((&first, rest)) = chain.relations.split_first() else {
        return Err(Error::Empty("chain without relations".into()));
    };
    acc.clear();
    acc.extend_from_slice(emb.relation(first)?);
    let mut tmp = vec![0.0; acc.len()];
    for &r in rest {
        hyperbolic::mobius_add_into(acc, emb.relation(r)?, emb.curvature, &mut tmp);
        hyperbolic::project_in_place(&mut tmp, emb.curvature, hyperbolic::DEFAULT_MARGIN);
        std::mem::swap(acc, &mut tmp);
    }
    Ok(())
}

/// `h_{r1} ⊕ h_{r2} ⊕ … ⊕ h_{rl}`, folded left to right.
pub fn embed_chain(chain: &RAChain, emb: &FilterEmbeddings) -> Result<PoincareVector> {
    let mut acc = Vec::with_capacity(emb.dim());
    fold_into(chain, emb, &mut acc)?;
    PoincareVector::new(acc, emb.curvature)
}

/// `λ·d(h_ap, h_aq) + (1−λ)·d(h_c, h_aq)`; lower is more relevant.
pub fn affinity_score(chain: &RAChain, query_attribute: AttributeId, emb: &FilterEmbeddings, lambda: f64) -> Result<f64> {
    let mut hc = Vec::with_capacity(emb.dim());
    fold_into(chain, emb, &mut hc)?;
    let aq = emb.attribute(query_attribute)?;
    let ap = emb.attribute(chain.source_attribute)?;
    let intra = hyperbolic::distance_slices(ap, aq, emb.curvature);
    let inter = hyperbolic::distance_slices(&hc, aq, emb.curvature);
    Ok(lambda * intra + (1.0 - lambda) * inter)
}

/// The top-k subset of a Tree of Chains with the score of every kept chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedToC {
    pub query: Query,
    pub chains: Vec<RAChain>,
    pub scores: Vec<f64>,
}

impl EnhancedToC {
    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }
}

/// Indices of the `k` best chains under `order`, ties broken by chain length
/// and then by entity path. The result is in ranking order.
pub fn rank_indices(scores: &[f64], chains: &[RAChain], k: usize, order: ScoreOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = match order {
            ScoreOrder::Smallest => scores[a].total_cmp(&scores[b]),
            ScoreOrder::Largest => scores[b].total_cmp(&scores[a]),
        };
        by_score
            .then_with(|| chains[a].len().cmp(&chains[b].len()))
            .then_with(|| chains[a].entity_path.cmp(&chains[b].entity_path))
            .then_with(|| chains[a].source_attribute.cmp(&chains[b].source_attribute))
    });
    idx.truncate(k);
    idx
}

/// Score every chain of the tree.
pub fn score_all(toc: &TreeOfChains, emb: &FilterEmbeddings, lambda: f64) -> Result<Vec<f64>> {
    toc.chains.iter().map(|c| affinity_score(c, toc.query.attribute, emb, lambda)).collect()
}

fn gather(toc: &TreeOfChains, scores: &[f64], idx: &[usize]) -> EnhancedToC {
    EnhancedToC {
        query: toc.query,
        chains: idx.iter().map(|&i| toc.chains[i].clone()).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    }
}

/// Keep the `k` most relevant chains. Fewer than `k` chains are all kept.
pub fn select_top_k(
    toc: &TreeOfChains,
    emb: &FilterEmbeddings,
    k: usize,
    lambda: f64,
    order: ScoreOrder,
) -> Result<EnhancedToC> {
    let scores = score_all(toc, emb, lambda)?;
    let idx = rank_indices(&scores, &toc.chains, k, order);
    Ok(gather(toc, &scores, &idx))
}

/// Like [`select_top_k`], but the last `explore` slots are filled with chains
/// drawn at random from outside the top ranks. Lets training see chains the
/// filter currently dislikes.
pub fn select_exploring(
    toc: &TreeOfChains,
    emb: &FilterEmbeddings,
    k: usize,
    explore: usize,
    lambda: f64,
    order: ScoreOrder,
    rng: &mut impl Rng,
) -> Result<EnhancedToC> {
    let scores = score_all(toc, emb, lambda)?;
    let ranked = rank_indices(&scores, &toc.chains, toc.len(), order);
    if ranked.len() <= k {
        return Ok(gather(toc, &scores, &ranked));
    }
    let explore = explore.min(k);
    let mut idx = ranked[..k - explore].to_vec();
    let mut rest = ranked[k - explore..].to_vec();
    rest.shuffle(rng);
    idx.extend_from_slice(&rest[..explore]);
    Ok(gather(toc, &scores, &idx))
}

/// `k` chains chosen uniformly at random; scores are still reported.
pub fn select_random(
    toc: &TreeOfChains,
    emb: &FilterEmbeddings,
    k: usize,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<EnhancedToC> {
    let scores = score_all(toc, emb, lambda)?;
    let mut idx: Vec<usize> = (0..toc.len()).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(gather(toc, &scores, &idx))
}
