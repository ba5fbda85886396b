use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chainsformer::config::RunConfig;
use chainsformer::evaluation::{self, AVERAGE_NOTE};
use chainsformer::kg::{self, compute_attribute_stats, DatasetSplit, KnowledgeGraph, NumericalPaths, Query, Split};
use chainsformer::reasoner::{key_chain_table, top_chain_report, ProjectionMode};
use chainsformer::synth::SynthSpec;
use chainsformer::training::{self, Checkpoint, LossKind};
use chainsformer::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "chainsformer", version, about = "Numerical attribute prediction over knowledge graphs with relation-attribute chains")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Anything given here wins over `--config`.
#[derive(Args)]
struct Flags {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random walks per query.
    #[arg(long, global = true)]
    walks: Option<usize>,
    #[arg(long, global = true)]
    max_hops: Option<usize>,
    /// Chains kept by the hyperbolic filter.
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Weight of the attribute-attribute distance in the filter score.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    curvature: Option<f64>,
    #[arg(long, global = true)]
    filter_dim: Option<usize>,
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// Sample chains once instead of every epoch.
    #[arg(long, global = true)]
    cache_toc: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    projection: Option<ProjectionMode>,
    /// Ablation toggle, repeatable (no_filter, no_encoder, ...).
    #[arg(long = "ablation", global = true)]
    ablations: Vec<String>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw triple files and write an interned dataset directory.
    Ingest {
        /// Existing dataset directory to re-ingest.
        #[arg(long, conflicts_with = "relational")]
        data: Option<PathBuf>,
        /// head<TAB>relation<TAB>tail file.
        #[arg(long)]
        relational: Option<PathBuf>,
        /// entity<TAB>attribute<TAB>value file, split 8:1:1.
        #[arg(long, conflicts_with_all = ["train", "valid", "test"])]
        numerical: Option<PathBuf>,
        #[arg(long, requires_all = ["valid", "test"])]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Predict one value and write its chain trace.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        entity: Option<String>,
        #[arg(long)]
        attribute: Option<String>,
        /// Chains shown in the text trace.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Rank the chain patterns that carry the most weight on a split.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        attribute: Option<String>,
        #[arg(long)]
        top: Option<usize>,
    },
    /// Generate a synthetic graph with a known generative chain.
    Synth {
        /// Generator settings as TOML.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn resolve(flags: &Flags, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = flags.$flag.clone() { $field = v; })*
        };
    }
    set!(seed => t.seed, walks => t.walks, max_hops => t.max_hops, top_k => t.top_k, lambda => t.lambda,
         curvature => t.curvature, filter_dim => t.filter_dim, loss => t.loss, epochs => t.epochs,
         learning_rate => t.learning_rate, projection => t.projection, threads => t.threads);
    if flags.cache_toc {
        t.cache_toc = true;
    }
    if !flags.ablations.is_empty() {
        t.ablations = flags.ablations.clone();
    }
    let r = &mut cfg.run;
    if let Some(out) = &flags.out {
        r.out = out.clone();
    }
    let (data, checkpoint, split, entity, attribute, top) = match command {
        Command::Ingest { data, .. } | Command::Train { data } => (data, &None, &None, &None, &None, &None),
        Command::Eval { checkpoint, data, split } => (data, checkpoint, split, &None, &None, &None),
        Command::Predict { checkpoint, data, entity, attribute, top } => (data, checkpoint, &None, entity, attribute, top),
        Command::Explain { checkpoint, data, split, attribute, top } => (data, checkpoint, split, &None, attribute, top),
        Command::Synth { .. } => (&None, &None, &None, &None, &None, &None),
    };
    r.data = data.clone().or(r.data.take());
    r.checkpoint = checkpoint.clone().or(r.checkpoint.take());
    r.split = split.unwrap_or(r.split);
    r.entity = entity.clone().or(r.entity.take());
    r.attribute = attribute.clone().or(r.attribute.take());
    r.top = top.unwrap_or(r.top);
    cfg.train.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn vocabulary(names: &[String]) -> String {
    names.iter().map(|n| format!("{n}\n")).collect()
}

fn ingest(cfg: &RunConfig, command: &Command) -> Result<()> {
    let Command::Ingest { relational, numerical, train, valid, test, .. } = command else { unreachable!() };
    let (kg, split) = match (relational, numerical, train, valid, test) {
        (Some(rel), Some(num), ..) => kg::load_and_split(rel, num, cfg.run.split_seed)?,
        (Some(rel), None, Some(tr), Some(va), Some(te)) => {
            kg::load_dataset(rel, &NumericalPaths { train: tr.clone(), valid: va.clone(), test: te.clone() })?
        }
        (Some(_), ..) => return Err(Error::Config("--relational needs --numerical or all of --train/--valid/--test".into())),
        _ => kg::load_dir(cfg.data_dir()?, cfg.run.split_seed)?,
    };
    let out = &cfg.run.out;
    kg::write_dir(out, &kg, &split)?;
    write(out, "entities.txt", vocabulary(kg.entities().names()))?;
    write(out, "relations.txt", vocabulary(kg.relations().names()))?;
    write(out, "attributes.txt", vocabulary(kg.attributes().names()))?;
    let stats = compute_attribute_stats(&split.train, kg.num_attributes());
    let report = stats.report(kg.attributes());
    write(out, "stats.txt", &report)?;
    print!("{report}");
    println!(
        "{} entities, {} relations, {} attributes; {}/{}/{} numerical triples -> {}",
        kg.num_entities(),
        kg.num_base_relations(),
        kg.num_attributes(),
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data_dir()?;
    let (kg, split) = kg::load_dir(data, cfg.run.split_seed)?;
    let outcome = training::train(&kg, &split, &cfg.train)?;
    let mut ck = outcome.checkpoint;
    ck.data_dir = Some(absolute(data));
    let out = &cfg.run.out;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write(out, "metrics.csv", training::metrics_csv(&outcome.history))?;
    let mut resolved = cfg.clone();
    resolved.run.data = ck.data_dir.clone();
    resolved.run.checkpoint = Some(absolute(&out.join(CHECKPOINT_FILE)));
    write(out, CONFIG_FILE, resolved.to_toml()?)?;
    println!(
        "stopped after {} epochs ({:?}); best epoch {} with validation Average* MAE {:.6} -> {}",
        outcome.history.len(),
        outcome.stop,
        ck.epoch,
        ck.best_metric,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Checkpoint plus the graph it was trained on (or `data` when given).
fn load_trained(cfg: &RunConfig) -> Result<(Checkpoint, KnowledgeGraph, DatasetSplit)> {
    let path = cfg.run.checkpoint.clone().unwrap_or_else(|| cfg.run.out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    let data = cfg
        .run
        .data
        .clone()
        .or_else(|| ck.data_dir.clone())
        .ok_or_else(|| Error::Config("checkpoint does not record its dataset; pass --data".into()))?;
    let (kg, split) = kg::load_dir(&data, cfg.run.split_seed)?;
    ck.check_graph(&kg)?;
    Ok((ck, kg, split))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let (ck, kg, split) = load_trained(cfg)?;
    let t = &cfg.train;
    let queries = training::queries_for(split.get(cfg.run.split), &ck.stats);
    let (report, traces) = evaluation::evaluate(&ck.model, &kg, &ck.stats, &queries, t.walks, t.top_k, t.seed)?;
    let base = evaluation::baseline(&kg, &ck.stats, &queries)?;
    let name = split_name(cfg.run.split);
    let out = &cfg.run.out;
    let table = format!("{}\ntrain-mean baseline\n{}", report.to_table(), base.to_table().replace(&format!("# {AVERAGE_NOTE}\n"), ""));
    write(out, &format!("eval_{name}.csv"), report.to_csv())?;
    write(out, &format!("eval_{name}.txt"), &table)?;
    write(out, &format!("selection_{name}.txt"), evaluation::selection_audit(&traces))?;
    let comp = evaluation::filter_analysis(&ck.model, &kg, &ck.stats, &queries, t.walks, t.top_k, t.seed)?;
    write(out, &format!("filter_{name}.tsv"), evaluation::filter_report(&comp))?;
    print!("{table}");
    Ok(())
}

fn predict(cfg: &RunConfig) -> Result<()> {
    let (ck, kg, split) = load_trained(cfg)?;
    let need = |v: &Option<String>, flag: &str| v.clone().ok_or_else(|| Error::Config(format!("predict needs --{flag}")));
    let (entity, attribute) = (need(&cfg.run.entity, "entity")?, need(&cfg.run.attribute, "attribute")?);
    let e = kg.entity_id(&entity)?;
    let a = kg.attribute_id(&attribute)?;
    let known = split.train.iter().chain(&split.valid).chain(&split.test).find(|t| t.entity == e && t.attribute == a);
    let query = Query { entity: e, attribute: a, target_value: known.map(|t| t.value) };
    let t = &cfg.train;
    let trace = ck.model.predict(&kg, &ck.stats, &query, t.walks, t.top_k, t.seed)?;
    write(&cfg.run.out, "trace.json", trace.to_json()?)?;
    let text = trace.to_text(cfg.run.top);
    write(&cfg.run.out, "trace.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn explain(cfg: &RunConfig) -> Result<()> {
    let (ck, kg, split) = load_trained(cfg)?;
    let attribute = cfg.run.attribute.as_deref().map(|a| kg.attribute_id(a)).transpose()?;
    let triples: Vec<_> = split.get(cfg.run.split).iter().filter(|t| attribute.is_none_or(|a| t.attribute == a)).cloned().collect();
    let queries = training::queries_for(&triples, &ck.stats);
    let t = &cfg.train;
    let (_, traces) = evaluation::evaluate(&ck.model, &kg, &ck.stats, &queries, t.walks, t.top_k, t.seed)?;
    let rows = top_chain_report(&traces, attribute, &kg);
    let text = key_chain_table(&rows, cfg.run.top);
    let file = match &cfg.run.attribute {
        Some(a) => format!("key_chains_{}_{a}.tsv", split_name(cfg.run.split)),
        None => format!("key_chains_{}.tsv", split_name(cfg.run.split)),
    };
    write(&cfg.run.out, &file, &text)?;
    print!("{text}");
    Ok(())
}

fn synth(cfg: &RunConfig, flags: &Flags, spec: &Option<PathBuf>) -> Result<()> {
    let mut s = match spec {
        Some(p) => SynthSpec::from_toml(&fs::read_to_string(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = flags.seed {
        s.seed = seed;
    }
    let data = s.generate()?;
    data.write(&cfg.run.out)?;
    println!("{}", s.rule());
    println!(
        "{} entities, {} test targets -> {}",
        data.kg.num_entities(),
        data.split.test.len(),
        cfg.run.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.flags, &cli.command)?;
    match &cli.command {
        c @ Command::Ingest { .. } => ingest(&cfg, c),
        Command::Train { .. } => train(&cfg),
        Command::Eval { .. } => eval(&cfg),
        Command::Predict { .. } => predict(&cfg),
        Command::Explain { .. } => explain(&cfg),
        Command::Synth { spec } => synth(&cfg, &cli.flags, spec),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
