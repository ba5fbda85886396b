//! Train on the default synthetic graph and print test metrics.
//!
//! `cargo run --release --example synthetic -- [key=value ...]`
//!
//! Each argument overrides one training setting, written as a TOML pair,
//! e.g. `epochs=20 projection="translation" top_k=32`. Keys under `synth.`
//! change the generated graph, e.g. `synth.path=["link"] synth.alpha=1.0`.

use std::time::Instant;

use chainsformer::evaluation;
use chainsformer::reasoner::top_chain_report;
use chainsformer::synth::{self, SynthSpec};
use chainsformer::training::{self, TrainConfig};

fn main() -> chainsformer::Result<()> {
    let overrides = std::env::args().skip(1).collect::<Vec<_>>().join("\n");
    let base = synth::train_config();
    let mut table = toml::Value::try_from(&base).map_err(|e| chainsformer::Error::Config(e.to_string()))?;
    let mut extra: toml::Table = overrides.parse().map_err(|e: toml::de::Error| chainsformer::Error::Config(e.to_string()))?;
    let synth = extra.remove("synth").unwrap_or_else(|| toml::Value::Table(Default::default()));
    table.as_table_mut().unwrap().extend(extra);
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| chainsformer::Error::Config(e.to_string()))?;
    let spec: SynthSpec = synth.try_into().map_err(|e: toml::de::Error| chainsformer::Error::Config(e.to_string()))?;
    let data = spec.generate()?;
    let start = Instant::now();
    let out = training::train(&data.kg, &data.split, &cfg)?;
    for r in &out.history {
        println!("{:>3} loss {:.6} val {:.5}", r.epoch, r.train_loss, r.val_mae);
    }
    let ck = &out.checkpoint;
    let test = training::queries_for(&data.split.test, &ck.stats);
    let (report, traces) = evaluation::evaluate(&ck.model, &data.kg, &ck.stats, &test, cfg.walks, cfg.top_k, cfg.seed)?;
    print!("{}", report.to_table());
    let base = evaluation::baseline(&data.kg, &ck.stats, &test)?;
    println!("baseline Average* {:.5}", base.average_mae);
    for k in top_chain_report(&traces, None, &data.kg).iter().take(3) {
        println!("{:>4}  {}", k.count, k.description);
    }
    let rule = spec.pattern();
    let kept = traces.iter().filter(|t| t.chains.iter().any(|c| c.description == rule)).count();
    println!("generative chain kept by the filter for {kept}/{} queries", traces.len());
    for t in traces.iter().take(5) {
        let truth = t.query.target_value.unwrap_or(f64::NAN);
        let (w, top) = t.top_chain().map_or((0.0, "(fallback)"), |c| (c.weight, c.description.as_str()));
        println!("truth {truth:8.2} pred {:8.2} top {w:.3} {top}", t.prediction);
    }
    println!("best epoch {} in {:.1}s", ck.epoch, start.elapsed().as_secs_f64());
    Ok(())
}
