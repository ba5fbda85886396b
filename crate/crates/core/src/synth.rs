//! Synthetic graphs with a known generative chain.
//!
//! Every query entity `q` sits at the end of a private relation path
//! `s -r_1-> m_1 -r_2-> … -> q` and its target value is `α·n_s + β`, where
//! `n_s` is the source attribute of `s`. Carrier entities hold the source
//! attribute on a wider range plus a noise attribute, and random edges over a
//! pool of distractor relations connect everything.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{self, DatasetSplit, GraphBuilder, KnowledgeGraph, NumericalTriple};
use crate::training::{LrSchedule, TrainConfig};

pub const RULE_FILE: &str = "generative.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub entities: usize,
    pub distractor_relations: usize,
    /// Random distractor edges per entity.
    pub edge_factor: f64,
    /// Relation names along the generative path, source side first.
    pub path: Vec<String>,
    pub source_attribute: String,
    pub target_attribute: String,
    pub noise_attribute: String,
    pub alpha: f64,
    pub beta: f64,
    pub source_range: [f64; 2],
    pub carrier_range: [f64; 2],
    pub noise_range: [f64; 2],
    /// Share of entities used as carriers.
    pub carrier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            entities: 500,
            distractor_relations: 10,
            edge_factor: 1.5,
            path: vec!["link_a".into(), "link_b".into()],
            source_attribute: "source".into(),
            target_attribute: "target".into(),
            noise_attribute: "noise".into(),
            alpha: 2.0,
            beta: 0.0,
            source_range: [0.0, 100.0],
            carrier_range: [0.0, 200.0],
            noise_range: [0.0, 1000.0],
            carrier_fraction: 0.1,
            seed: 0,
        }
    }
}

/// A generated dataset and the rule that produced it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub kg: KnowledgeGraph,
    pub split: DatasetSplit,
    pub spec: SynthSpec,
}

/// Training settings that work well on the default synthetic graph:
/// `N_s = 128`, `k = 16`, `d = 32`, at most 50 epochs.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        learning_rate: 2e-3,
        schedule: LrSchedule::Cosine,
        walks: 128,
        top_k: 16,
        dim: 32,
        filter_dim: 32,
        affine_hidden: 8,
        batch_size: 8,
        patience: 50,
        lambda: 0.2,
        explore: 0.5,
        score_bias: 20.0,
        ..Default::default()
    }
}

impl SynthSpec {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.path.is_empty() {
            return Err(Error::Config("generative path needs at least one relation".into()));
        }
        if !(0.0..1.0).contains(&self.carrier_fraction) {
            return Err(Error::Config("carrier_fraction must lie in [0, 1)".into()));
        }
        for (name, [lo, hi]) in [("source", self.source_range), ("carrier", self.carrier_range), ("noise", self.noise_range)] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("{name}_range must be an increasing pair")));
            }
        }
        if self.distractor_relations == 0 && self.carriers() > 0 {
            return Err(Error::Config("carriers need at least one distractor relation to attach to".into()));
        }
        if self.queries() < 10 {
            return Err(Error::Config(format!("{} entities leave fewer than 10 query entities", self.entities)));
        }
        Ok(())
    }

    pub fn carriers(&self) -> usize {
        (self.entities as f64 * self.carrier_fraction).round() as usize
    }

    /// Number of query entities; each owns `path.len()` more entities.
    pub fn queries(&self) -> usize {
        self.entities.saturating_sub(self.carriers()) / (self.path.len() + 1)
    }

    /// `(source, r_1, …, r_l) -> target  with  n = α·n_p + β`
    pub fn rule(&self) -> String {
        format!(
            "({}, {}) -> {}  with  n = {}·n_p + {}",
            self.source_attribute,
            self.path.join(", "),
            self.target_attribute,
            self.alpha,
            self.beta
        )
    }

    /// The generative chain as chain reports print it.
    pub fn pattern(&self) -> String {
        format!("({}, {}) -> {}", self.source_attribute, self.path.join(", "), self.target_attribute)
    }

    pub fn generate(&self) -> Result<SynthData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut b = GraphBuilder::new();
        let hops = self.path.len();
        let nq = self.queries();
        let mut names: Vec<String> = Vec::new();
        let mut known: Vec<NumericalTriple> = Vec::new();
        let mut targets: Vec<NumericalTriple> = Vec::new();
        let value = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| rng.gen_range(lo..hi);

        for i in 0..nq {
            let mut chain = vec![format!("s{i}")];
            chain.extend((1..hops).map(|h| format!("m{h}_{i}")));
            chain.push(format!("q{i}"));
            for (h, rel) in self.path.iter().enumerate() {
                b.add_edge(&chain[h], rel, &chain[h + 1]);
            }
            let n_s = value(&mut rng, self.source_range);
            known.push(b.numerical(&chain[0], &self.source_attribute, n_s)?);
            targets.push(b.numerical(&chain[hops], &self.target_attribute, self.alpha * n_s + self.beta)?);
            names.extend(chain);
        }
        for i in 0..self.carriers() {
            let d = format!("d{i}");
            b.entity(&d);
            let v = value(&mut rng, self.carrier_range);
            known.push(b.numerical(&d, &self.source_attribute, v)?);
            let v = value(&mut rng, self.noise_range);
            known.push(b.numerical(&d, &self.noise_attribute, v)?);
            names.push(d);
        }
        let edges = (self.edge_factor * names.len() as f64).round() as usize;
        let mut touched = vec![false; names.len()];
        // path entities already have an edge
        touched[..nq * (hops + 1)].fill(true);
        if self.distractor_relations > 0 {
            let mut edge = |rng: &mut ChaCha8Rng, h: usize, touched: &mut [bool]| {
                let mut t = rng.gen_range(0..names.len());
                while t == h {
                    t = rng.gen_range(0..names.len());
                }
                let r = rng.gen_range(0..self.distractor_relations);
                b.add_edge(&names[h], &format!("rel_{r}"), &names[t]);
                touched[h] = true;
                touched[t] = true;
            };
            for _ in 0..edges {
                let h = rng.gen_range(0..names.len());
                edge(&mut rng, h, &mut touched);
            }
            // every carrier must appear in the relational file
            for h in 0..names.len() {
                if !touched[h] {
                    edge(&mut rng, h, &mut touched);
                }
            }
        }
        // only target triples are held out; everything else is training data
        targets.shuffle(&mut rng);
        let n_valid = targets.len() / 10;
        let test = targets.split_off(targets.len() - n_valid);
        let valid = targets.split_off(targets.len() - n_valid);
        known.extend(targets);
        let split = DatasetSplit { train: known, valid, test };
        let kg = b.build(split.train.clone());
        Ok(SynthData { kg, split, spec: self.clone() })
    }
}

impl SynthData {
    /// Write the dataset directory plus the generator settings and rule description.
    pub fn write(&self, dir: &Path) -> Result<()> {
        kg::write_dir(dir, &self.kg, &self.split)?;
        fs::write(dir.join("synth.toml"), self.spec.to_toml()?)?;
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.spec.rule());
        fs::write(dir.join(RULE_FILE), s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { entities: 120, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small().generate().unwrap();
        let b = small().generate().unwrap();
        assert_eq!(a.kg.to_json().unwrap(), b.kg.to_json().unwrap());
        assert_eq!(a.split.test, b.split.test);
    }

    #[test]
    fn targets_follow_the_rule() {
        let d = small().generate().unwrap();
        let src = d.kg.attribute_id("source").unwrap();
        let tgt = d.kg.attribute_id("target").unwrap();
        for t in d.split.test.iter().chain(&d.split.valid) {
            assert_eq!(t.attribute, tgt);
            let q = d.kg.entities().name(t.entity);
            let s = d.kg.entity_id(&q.replacen('q', "s", 1)).unwrap();
            let (_, n_s) = d.kg.known_values(s).iter().find(|(a, _)| *a == src).copied().unwrap();
            assert_eq!(t.value, 2.0 * n_s);
        }
    }

    #[test]
    fn written_dataset_reloads() {
        let d = small().generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let (kg, split) = kg::load_dir(dir.path(), 0).unwrap();
        assert_eq!(kg.num_entities(), d.kg.num_entities());
        assert_eq!(split.test.len(), d.split.test.len());
        assert_eq!(kg.num_relations(), d.kg.num_relations());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = SynthSpec { alpha: 3.5, path: vec!["x".into()], ..Default::default() };
        assert_eq!(SynthSpec::from_toml(&s.to_toml().unwrap()).unwrap(), s);
        assert!(SynthSpec::from_toml("bogus = 1").is_err());
    }
}
