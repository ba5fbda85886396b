//! Browser bindings for a few library operations. Every function returns a
//! JSON string; errors come back as `{"error": "..."}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use chainsformer::encoder::{decode_value, encode_value};
use chainsformer::filter::{self, init_table, FilterEmbeddings, ScoreOrder};
use chainsformer::hyperbolic::{self, PoincareVector};
use chainsformer::kg::Query;
use chainsformer::retrieval::sample_tree;
use chainsformer::synth::SynthSpec;

fn respond(result: chainsformer::Result<Value>) -> String {
    result.unwrap_or_else(|e| json!({ "error": e.to_string() })).to_string()
}

/// Möbius sum, both distance forms and the log-map of two points.
#[wasm_bindgen]
pub fn poincare(x: Vec<f64>, y: Vec<f64>, curvature: f64) -> String {
    respond((|| {
        let px = PoincareVector::new(x, curvature)?;
        let py = PoincareVector::new(y, curvature)?;
        let sum = hyperbolic::mobius_add(&px, &py)?;
        let rev = hyperbolic::mobius_add(&py, &px)?;
        Ok(json!({
            "sum": sum.coords(),
            "reverse_sum": rev.coords(),
            "distance": hyperbolic::distance(&px, &py)?,
            "distance_arcosh": hyperbolic::distance_arcosh(&px, &py)?,
            "log_x": hyperbolic::log_map_origin(&px),
            "log_y": hyperbolic::log_map_origin(&py),
        }))
    })())
}

/// Sample chains for one query of a small synthetic graph and score them
/// with freshly initialized filter embeddings.
#[wasm_bindgen]
pub fn chains(query_index: usize, walks: usize, max_hops: usize, k: usize, lambda: f64, seed: u64) -> String {
    respond((|| {
        let spec = SynthSpec { entities: 90, seed, ..Default::default() };
        let data = spec.generate()?;
        let kg = &data.kg;
        let target = kg.attribute_id(&spec.target_attribute)?;
        let triple = data.split.test.get(query_index % data.split.test.len()).copied().ok_or_else(|| {
            chainsformer::Error::Empty("no test queries".into())
        })?;
        let query = Query { entity: triple.entity, attribute: target, target_value: Some(triple.value) };
        let toc = sample_tree(kg, &query, walks, max_hops, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rel = init_table(kg.num_relations(), 8, &mut rng);
        let att = init_table(kg.num_attributes(), 8, &mut rng);
        let emb = FilterEmbeddings::new(&rel, &att, 1.0)?;
        let scores = filter::score_all(&toc, &emb, lambda)?;
        let keep = filter::rank_indices(&scores, &toc.chains, k, ScoreOrder::Smallest);
        let rows: Vec<Value> = toc
            .chains
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(i, (c, s))| {
                json!({
                    "chain": c.describe(kg),
                    "entities": c.entity_path.iter().map(|&e| kg.entities().name(e)).collect::<Vec<_>>(),
                    "source_value": c.source_value,
                    "score": s,
                    "rank": keep.iter().position(|&j| j == i),
                    "generative": c.describe(kg) == spec.pattern(),
                })
            })
            .collect();
        Ok(json!({
            "query": format!("{} / {}", kg.entities().name(query.entity), spec.target_attribute),
            "target": triple.value,
            "rule": spec.rule(),
            "chains": rows,
        }))
    })())
}

/// The 64-bit IEEE-754 stream fed to the affine nets.
#[wasm_bindgen]
pub fn bit_stream(value: f64) -> String {
    respond((|| {
        let bits = encode_value(value)?;
        let text: String = bits.iter().map(|&b| if b == 1.0 { '1' } else { '0' }).collect();
        Ok(json!({
            "bits": text,
            "sign": &text[..1],
            "exponent": &text[1..12],
            "mantissa": &text[12..],
            "decoded": decode_value(&bits)?,
        }))
    })())
}
