//! Query-guided retrieval of Relation-Attribute chains.
//!
//! Walks start at the query entity and move uniformly along adjacency edges.
//! Every entity reached with known numerical values yields one chain per value,
//! stored in source-to-query order: `entity_path[0]` is the source entity and
//! `relations[i]` connects `entity_path[i]` to `entity_path[i + 1]`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AttributeId, EntityId, KnowledgeGraph, Query, RelationId};

/// Path budget for [`enumerate_all_chains`].
pub const ENUMERATION_GUARD: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAChain {
    pub source_attribute: AttributeId,
    pub relations: Vec<RelationId>,
    pub query_attribute: AttributeId,
    pub source_value: f64,
    pub entity_path: Vec<EntityId>,
}

/// The entity-free part of a chain: what the reasoner actually learns over.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChainPattern {
    pub source_attribute: AttributeId,
    pub relations: Vec<RelationId>,
    pub query_attribute: AttributeId,
}

impl RAChain {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn source_entity(&self) -> EntityId {
        self.entity_path[0]
    }

    pub fn pattern(&self) -> ChainPattern {
        ChainPattern {
            source_attribute: self.source_attribute,
            relations: self.relations.clone(),
            query_attribute: self.query_attribute,
        }
    }

    fn key(&self) -> (&[EntityId], AttributeId) {
        (&self.entity_path, self.source_attribute)
    }

    /// Human-readable `attr <- r1 <- r2 ... => query_attr` rendering.
    pub fn describe(&self, kg: &KnowledgeGraph) -> String {
        self.pattern().describe(kg)
    }
}

impl ChainPattern {
    pub fn describe(&self, kg: &KnowledgeGraph) -> String {
        let mut parts = vec![kg.attributes().name(self.source_attribute).to_string()];
        parts.extend(self.relations.iter().map(|&r| kg.relations().name(r).to_string()));
        format!("({}) -> {}", parts.join(", "), kg.attributes().name(self.query_attribute))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeOfChains {
    pub query: Query,
    pub chains: Vec<RAChain>,
}

impl TreeOfChains {
    pub fn len(&self) -> usize {
        self.chains.len()
    }

    /// No chain reached the query; callers fall back to the attribute mean.
    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }
}

/// Mix a base seed with an epoch counter and a query into a walk seed.
pub fn query_seed(base: u64, epoch: u64, query: &Query) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch, query.entity as u64, query.attribute as u64] {
        h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn emit(kg: &KnowledgeGraph, query: &Query, walk_entities: &[EntityId], walk_relations: &[RelationId], out: &mut Vec<RAChain>) {
    let source = *walk_entities.last().expect("nonempty walk");
    let values = kg.known_values(source);
    if values.is_empty() {
        return;
    }
    let entity_path: Vec<EntityId> = walk_entities.iter().rev().copied().collect();
    let relations: Vec<RelationId> = walk_relations.iter().rev().map(|&r| kg.inverse(r)).collect();
    for &(attribute, value) in values {
        if source == query.entity && attribute == query.attribute {
            continue;
        }
        out.push(RAChain {
            source_attribute: attribute,
            relations: relations.clone(),
            query_attribute: query.attribute,
            source_value: value,
            entity_path: entity_path.clone(),
        });
    }
}

fn sort_chains(chains: &mut [RAChain]) {
    chains.sort_by(|a, b| a.key().cmp(&b.key()));
}

/// Sample a Tree of Chains with `walks` random walks of at most `max_hops` steps.
///
/// At most `walks` distinct chains are kept (first discovered wins); the
/// result is sorted by `(entity_path, source_attribute)`.
pub fn sample_tree(kg: &KnowledgeGraph, query: &Query, walks: usize, max_hops: usize, seed: u64) -> TreeOfChains {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(Vec<EntityId>, AttributeId)> = HashSet::new();
    let mut chains = Vec::new();
    let mut found = Vec::new();
    let mut ents = Vec::with_capacity(max_hops + 1);
    let mut rels = Vec::with_capacity(max_hops);

    'walks: for _ in 0..walks {
        ents.clear();
        rels.clear();
        ents.push(query.entity);
        for _ in 0..max_hops {
            let cur = *ents.last().unwrap();
            let adj = kg.neighbors(cur);
            if adj.is_empty() {
                break;
            }
            let (r, next) = adj[rng.gen_range(0..adj.len())];
            if ents.contains(&next) {
                break;
            }
            ents.push(next);
            rels.push(r);
            found.clear();
            emit(kg, query, &ents, &rels, &mut found);
            for c in found.drain(..) {
                if chains.len() >= walks {
                    break 'walks;
                }
                if seen.insert((c.entity_path.clone(), c.source_attribute)) {
                    chains.push(c);
                }
            }
        }
    }
    sort_chains(&mut chains);
    TreeOfChains { query: *query, chains }
}

/// Every cycle-free chain of at most `max_hops` relations ending at the query
/// entity. Exhaustive DFS; intended for small graphs and as a sampling oracle.
pub fn enumerate_all_chains(kg: &KnowledgeGraph, query: &Query, max_hops: usize) -> Result<Vec<RAChain>> {
    struct Dfs<'a> {
        kg: &'a KnowledgeGraph,
        query: &'a Query,
        max_hops: usize,
        ents: Vec<EntityId>,
        rels: Vec<RelationId>,
        out: Vec<RAChain>,
        paths: usize,
    }

    impl Dfs<'_> {
        fn visit(&mut self) -> Result<()> {
            if self.rels.len() == self.max_hops {
                return Ok(());
            }
            let cur = *self.ents.last().unwrap();
            for &(r, next) in self.kg.neighbors(cur) {
                if self.ents.contains(&next) {
                    continue;
                }
                self.paths += 1;
                if self.paths > ENUMERATION_GUARD {
                    return Err(Error::EnumerationGuard(ENUMERATION_GUARD));
                }
                self.ents.push(next);
                self.rels.push(r);
                emit(self.kg, self.query, &self.ents, &self.rels, &mut self.out);
                self.visit()?;
                self.ents.pop();
                self.rels.pop();
            }
            Ok(())
        }
    }

    let mut dfs = Dfs { kg, query, max_hops, ents: vec![query.entity], rels: Vec::new(), out: Vec::new(), paths: 0 };
    dfs.visit()?;
    let mut out = dfs.out;
    sort_chains(&mut out);
    out.dedup_by(|a, b| a.key() == b.key());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::GraphBuilder;

    fn star() -> (KnowledgeGraph, Query) {
        let mut b = GraphBuilder::new();
        for leaf in ["l1", "l2", "l3"] {
            b.add_edge(leaf, "near", "center");
        }
        let known = vec![
            b.numerical("l1", "height", 1.0).unwrap(),
            b.numerical("l2", "height", 2.0).unwrap(),
            b.numerical("l3", "weight", 3.0).unwrap(),
        ];
        let q = b.numerical("center", "height", 0.0).unwrap();
        let kg = b.build(known);
        (kg, Query { entity: q.entity, attribute: q.attribute, target_value: None })
    }

    #[test]
    fn star_graph_has_three_one_hop_chains() {
        let (kg, q) = star();
        let toc = sample_tree(&kg, &q, 500, 3, 7);
        assert_eq!(toc.len(), 3);
        assert!(toc.chains.iter().all(|c| c.len() == 1));
        let all = enumerate_all_chains(&kg, &q, 3).unwrap();
        assert_eq!(all, toc.chains);
        // chain reads leaf --near--> center
        let c = &toc.chains[0];
        assert!(kg.has_edge(c.entity_path[0], c.relations[0], c.entity_path[1]));
        assert_eq!(kg.relations().name(c.relations[0]), "near");
    }

    #[test]
    fn zero_walks_is_empty() {
        let (kg, q) = star();
        assert!(sample_tree(&kg, &q, 0, 3, 1).is_empty());
    }

    #[test]
    fn path_graph_single_two_hop_chain() {
        let mut b = GraphBuilder::new();
        b.add_edge("a", "r1", "b");
        b.add_edge("b", "r2", "c");
        let known = vec![b.numerical("a", "x", 4.0).unwrap()];
        let attr = b.attribute("x");
        let c = b.entity_id("c").unwrap();
        let kg = b.build(known);
        let q = Query { entity: c, attribute: attr, target_value: None };
        let all = enumerate_all_chains(&kg, &q, 3).unwrap();
        assert_eq!(all.len(), 1);
        let chain = &all[0];
        assert_eq!(chain.len(), 2);
        let names: Vec<_> = chain.relations.iter().map(|&r| kg.relations().name(r)).collect();
        assert_eq!(names, ["r1", "r2"]);
        assert_eq!(chain.source_value, 4.0);
    }

    #[test]
    fn walks_are_deterministic_per_seed() {
        let (kg, q) = star();
        assert_eq!(sample_tree(&kg, &q, 4, 2, 11), sample_tree(&kg, &q, 4, 2, 11));
    }

    #[test]
    fn query_seed_varies() {
        let q = Query { entity: 3, attribute: 1, target_value: None };
        assert_ne!(query_seed(1, 0, &q), query_seed(1, 1, &q));
        assert_eq!(query_seed(1, 0, &q), query_seed(1, 0, &q));
    }
}
