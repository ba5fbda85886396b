//! Knowledge-graph storage: interning, inverse-relation synthesis, dataset
//! splits and min-max attribute statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;
pub type AttributeId = usize;

/// Suffix appended to a relation name to form its synthesized inverse.
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Interner {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn rebuild_index(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericalTriple {
    pub entity: EntityId,
    pub attribute: AttributeId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationalTriple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub entity: EntityId,
    pub attribute: AttributeId,
    pub target_value: Option<f64>,
}

impl From<&NumericalTriple> for Query {
    fn from(t: &NumericalTriple) -> Self {
        Query { entity: t.entity, attribute: t.attribute, target_value: Some(t.value) }
    }
}

/// Train/validation/test numerical triples.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<NumericalTriple>,
    pub valid: Vec<NumericalTriple>,
    pub test: Vec<NumericalTriple>,
}

impl DatasetSplit {
    /// Shuffle `all` with `seed` and cut it 8:1:1.
    pub fn split_811(mut all: Vec<NumericalTriple>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        let n = all.len();
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        let test = all.split_off(n_train + n_valid);
        let valid = all.split_off(n_train);
        DatasetSplit { train: all, valid, test }
    }

    pub fn get(&self, split: Split) -> &[NumericalTriple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// An immutable multi-relational graph with numerical attributes.
///
/// Relation ids `0..base_relations` are the relations read from data; id
/// `r + base_relations` is the synthesized inverse of `r`. Only training
/// numerical triples are indexed, so validation and test values can never be
/// reached during retrieval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    attributes: Interner,
    base_relations: usize,
    relational_triples: Vec<RelationalTriple>,
    numerical_triples: Vec<NumericalTriple>,
    #[serde(skip)]
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    #[serde(skip)]
    numerical_index: Vec<Vec<(AttributeId, f64)>>,
}

/// Incrementally collects names and triples before freezing a [`KnowledgeGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    attributes: Interner,
    edges: Vec<(EntityId, RelationId, EntityId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        self.entities.intern(name)
    }

    pub fn attribute(&mut self, name: &str) -> AttributeId {
        self.attributes.intern(name)
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        self.relations.intern(name)
    }

    pub fn add_edge(&mut self, head: &str, relation: &str, tail: &str) {
        let h = self.entity(head);
        let r = self.relation(relation);
        let t = self.entity(tail);
        self.edges.push((h, r, t));
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name)
    }

    /// Resolve a numerical row; the entity must already be known.
    pub fn numerical(&mut self, entity: &str, attribute: &str, value: f64) -> Result<NumericalTriple> {
        let entity = self.entities.get(entity).ok_or_else(|| Error::UnknownEntity(entity.into()))?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("value {value}")));
        }
        let attribute = self.attributes.intern(attribute);
        Ok(NumericalTriple { entity, attribute, value })
    }

    /// Freeze the graph. `known` holds the numerical facts visible to
    /// retrieval (the training split).
    pub fn build(self, known: Vec<NumericalTriple>) -> KnowledgeGraph {
        let base = self.relations.len();
        let mut relations = self.relations;
        for r in 0..base {
            let name = format!("{}{INVERSE_SUFFIX}", relations.name(r));
            let names = &mut relations.names;
            names.push(name);
        }
        relations.rebuild_index();
        let mut triples = Vec::with_capacity(self.edges.len() * 2);
        for &(h, r, t) in &self.edges {
            triples.push(RelationalTriple { head: h, relation: r, tail: t });
        }
        for &(h, r, t) in &self.edges {
            triples.push(RelationalTriple { head: t, relation: r + base, tail: h });
        }
        let mut kg = KnowledgeGraph {
            entities: self.entities,
            relations,
            attributes: self.attributes,
            base_relations: base,
            relational_triples: triples,
            numerical_triples: known,
            adjacency: Vec::new(),
            numerical_index: Vec::new(),
        };
        kg.rebuild_indices();
        kg
    }
}

impl KnowledgeGraph {
    fn rebuild_indices(&mut self) {
        let n = self.entities.len();
        self.adjacency = vec![Vec::new(); n];
        for t in &self.relational_triples {
            self.adjacency[t.head].push((t.relation, t.tail));
        }
        self.numerical_index = vec![Vec::new(); n];
        for t in &self.numerical_triples {
            self.numerical_index[t.entity].push((t.attribute, t.value));
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including synthesized inverses.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.base_relations
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        if r < self.base_relations {
            r + self.base_relations
        } else {
            r - self.base_relations
        }
    }

    pub fn entities(&self) -> &Interner {
        &self.entities
    }

    pub fn relations(&self) -> &Interner {
        &self.relations
    }

    pub fn attributes(&self) -> &Interner {
        &self.attributes
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities.get(name).ok_or_else(|| Error::UnknownEntity(name.into()))
    }

    pub fn attribute_id(&self, name: &str) -> Result<AttributeId> {
        self.attributes.get(name).ok_or_else(|| Error::UnknownAttribute(name.into()))
    }

    pub fn relational_triples(&self) -> &[RelationalTriple] {
        &self.relational_triples
    }

    /// Numerical facts visible to retrieval.
    pub fn numerical_triples(&self) -> &[NumericalTriple] {
        &self.numerical_triples
    }

    pub fn neighbors(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.adjacency[e]
    }

    pub fn known_values(&self, e: EntityId) -> &[(AttributeId, f64)] {
        &self.numerical_index[e]
    }

    pub fn has_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.adjacency[head].iter().any(|&(r, t)| r == relation && t == tail)
    }

    /// Serialize names and triples; indices are rebuilt on load.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut kg: KnowledgeGraph = serde_json::from_str(s)?;
        kg.entities.rebuild_index();
        kg.relations.rebuild_index();
        kg.attributes.rebuild_index();
        kg.rebuild_indices();
        Ok(kg)
    }
}

// ---------------------------------------------------------------------------
// loading

/// Paths of the numerical triple files, one per split.
#[derive(Debug, Clone)]
pub struct NumericalPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

fn read_rows(path: &Path) -> Result<Vec<(usize, [String; 3])>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((i + 1, [fields[0].to_string(), fields[1].to_string(), fields[2].to_string()]));
    }
    Ok(rows)
}

fn read_relational(path: &Path, builder: &mut GraphBuilder) -> Result<()> {
    for (_, [h, r, t]) in read_rows(path)? {
        builder.add_edge(&h, &r, &t);
    }
    Ok(())
}

fn read_numerical(path: &Path, builder: &mut GraphBuilder) -> Result<Vec<NumericalTriple>> {
    let mut out = Vec::new();
    for (line, [e, a, v]) in read_rows(path)? {
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let value: f64 = v.trim().parse().map_err(|_| parse_err(format!("invalid number `{v}`")))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite value `{v}`")));
        }
        let t = builder.numerical(&e, &a, value).map_err(|err| match err {
            Error::UnknownEntity(name) => parse_err(format!("unknown entity `{name}`")),
            other => other,
        })?;
        out.push(t);
    }
    Ok(out)
}

/// Load a relational file and one numerical file per split.
pub fn load_dataset(relational: &Path, numerical: &NumericalPaths) -> Result<(KnowledgeGraph, DatasetSplit)> {
    let mut builder = GraphBuilder::new();
    read_relational(relational, &mut builder)?;
    let split = DatasetSplit {
        train: read_numerical(&numerical.train, &mut builder)?,
        valid: read_numerical(&numerical.valid, &mut builder)?,
        test: read_numerical(&numerical.test, &mut builder)?,
    };
    let kg = builder.build(split.train.clone());
    Ok((kg, split))
}

/// Load a relational file plus a single numerical file, splitting it 8:1:1.
pub fn load_and_split(relational: &Path, numerical: &Path, seed: u64) -> Result<(KnowledgeGraph, DatasetSplit)> {
    let mut builder = GraphBuilder::new();
    read_relational(relational, &mut builder)?;
    let all = read_numerical(numerical, &mut builder)?;
    let split = DatasetSplit::split_811(all, seed);
    let kg = builder.build(split.train.clone());
    Ok((kg, split))
}

pub const RELATIONAL_FILE: &str = "relational.tsv";
pub const TRAIN_FILE: &str = "numerical_train.tsv";
pub const VALID_FILE: &str = "numerical_valid.tsv";
pub const TEST_FILE: &str = "numerical_test.tsv";
pub const UNSPLIT_FILE: &str = "numerical.tsv";

/// Load a dataset directory: `relational.tsv` and either the three
/// `numerical_{train,valid,test}.tsv` files or a single `numerical.tsv`.
pub fn load_dir(dir: &Path, split_seed: u64) -> Result<(KnowledgeGraph, DatasetSplit)> {
    let relational = dir.join(RELATIONAL_FILE);
    if dir.join(TRAIN_FILE).exists() {
        load_dataset(
            &relational,
            &NumericalPaths { train: dir.join(TRAIN_FILE), valid: dir.join(VALID_FILE), test: dir.join(TEST_FILE) },
        )
    } else {
        load_and_split(&relational, &dir.join(UNSPLIT_FILE), split_seed)
    }
}

/// Write a dataset back out in the directory layout understood by [`load_dir`].
pub fn write_dir(dir: &Path, kg: &KnowledgeGraph, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rel = String::new();
    for t in &kg.relational_triples[..kg.relational_triples.len() / 2] {
        let _ = writeln!(
            rel,
            "{}\t{}\t{}",
            kg.entities.name(t.head),
            kg.relations.name(t.relation),
            kg.entities.name(t.tail)
        );
    }
    fs::write(dir.join(RELATIONAL_FILE), rel)?;
    for (file, triples) in [(TRAIN_FILE, &split.train), (VALID_FILE, &split.valid), (TEST_FILE, &split.test)] {
        let mut s = String::new();
        for t in triples {
            let _ = writeln!(s, "{}\t{}\t{}", kg.entities.name(t.entity), kg.attributes.name(t.attribute), t.value);
        }
        fs::write(dir.join(file), s)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrStat {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub mean: f64,
}

/// Per-attribute min/max over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    stats: Vec<Option<AttrStat>>,
}

pub fn compute_attribute_stats(train: &[NumericalTriple], num_attributes: usize) -> AttributeStats {
    let mut acc: Vec<Option<(f64, f64, usize, f64)>> = vec![None; num_attributes];
    for t in train {
        let slot = &mut acc[t.attribute];
        *slot = Some(match *slot {
            None => (t.value, t.value, 1, t.value),
            Some((lo, hi, n, sum)) => (lo.min(t.value), hi.max(t.value), n + 1, sum + t.value),
        });
    }
    AttributeStats {
        stats: acc
            .into_iter()
            .map(|s| s.map(|(min, max, count, sum)| AttrStat { min, max, count, mean: sum / count as f64 }))
            .collect(),
    }
}

impl AttributeStats {
    pub fn get(&self, attribute: AttributeId) -> Option<&AttrStat> {
        self.stats.get(attribute).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Attributes with no training values, or a single repeated value.
    pub fn degenerate(&self) -> Vec<AttributeId> {
        (0..self.stats.len()).filter(|&a| !self.has_range(a)).collect()
    }

    pub fn has_range(&self, attribute: AttributeId) -> bool {
        matches!(self.get(attribute), Some(s) if s.max > s.min)
    }

    fn range(&self, attribute: AttributeId) -> Result<(f64, f64)> {
        match self.get(attribute) {
            Some(s) if s.max > s.min => Ok((s.min, s.max)),
            _ => Err(Error::DegenerateAttribute(format!("#{attribute}"))),
        }
    }

    /// Min-max normalize, clamped to `[0, 1]`.
    pub fn normalize(&self, value: f64, attribute: AttributeId) -> Result<f64> {
        let (lo, hi) = self.range(attribute)?;
        Ok(((value - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    /// Normalize without clamping; used for error metrics.
    pub fn scale_error(&self, err: f64, attribute: AttributeId) -> Result<f64> {
        let (lo, hi) = self.range(attribute)?;
        Ok(err / (hi - lo))
    }

    pub fn denormalize(&self, value: f64, attribute: AttributeId) -> Result<f64> {
        let (lo, hi) = self.range(attribute)?;
        Ok(lo + value * (hi - lo))
    }

    pub fn mean(&self, attribute: AttributeId) -> Option<f64> {
        self.get(attribute).map(|s| s.mean)
    }

    /// Plain-text audit report: `attribute<TAB>min<TAB>max<TAB>count`.
    pub fn report(&self, attributes: &Interner) -> String {
        let mut out = String::from("attribute\tmin\tmax\tcount\n");
        for (a, s) in self.stats.iter().enumerate() {
            match s {
                Some(s) => {
                    let _ = writeln!(out, "{}\t{}\t{}\t{}", attributes.name(a), s.min, s.max, s.count);
                }
                None => {
                    let _ = writeln!(out, "{}\t-\t-\t0", attributes.name(a));
                }
            }
        }
        out
    }
}
