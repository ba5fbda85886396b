//! End-to-end training: per-epoch retrieval, filtering, forward/backward per
//! query, mini-batch Adam steps, and early stopping on validation error.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Gradients, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::filter::ScoreOrder;
use crate::kg::{compute_attribute_stats, AttributeId, AttributeStats, DatasetSplit, KnowledgeGraph, NumericalTriple, Query};
use crate::model::{Ablation, ChainsFormer, ModelConfig, Selection};
use crate::reasoner::ProjectionMode;
use crate::retrieval::{query_seed, TreeOfChains};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected l1 or l2)"))),
        }
    }
}

/// Learning-rate schedule over the epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `LR_FLOOR` of it at the last epoch.
    Cosine,
}

pub const LR_FLOOR: f64 = 0.05;

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}` (expected constant or cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    /// Random walks per query (`N_s`).
    pub walks: usize,
    pub top_k: usize,
    pub max_hops: usize,
    pub dim: usize,
    pub filter_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub affine_hidden: usize,
    pub lambda: f64,
    pub curvature: f64,
    pub projection: ProjectionMode,
    pub score_order: ScoreOrder,
    pub score_bias: f64,
    /// Share of the `k` slots filled with random chains during training.
    pub explore: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch loss changes by less than this.
    pub epsilon: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub loss: LossKind,
    /// Sample each query's chains once instead of every epoch.
    pub cache_toc: bool,
    pub clip_norm: f64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub ablations: Vec<String>,
    /// Train and validate only on queries of these attributes; empty means
    /// every attribute. Chains may still start from any attribute.
    pub query_attributes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            schedule: LrSchedule::Constant,
            walks: 2048,
            top_k: 256,
            max_hops: m.max_hops,
            dim: m.dim,
            filter_dim: m.filter_dim,
            layers: m.layers,
            heads: m.heads,
            affine_hidden: m.affine_hidden,
            lambda: m.lambda,
            curvature: m.curvature,
            projection: m.projection,
            score_order: m.score_order,
            score_bias: m.score_bias,
            explore: 0.25,
            batch_size: 32,
            seed: 0,
            epsilon: 1e-7,
            patience: 10,
            loss: LossKind::L2,
            cache_toc: false,
            clip_norm: 1.0,
            threads: 0,
            ablations: Vec::new(),
            query_attributes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            filter_dim: self.filter_dim,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            affine_hidden: self.affine_hidden,
            max_hops: self.max_hops,
            curvature: self.curvature,
            lambda: self.lambda,
            score_order: self.score_order,
            projection: self.projection,
            score_bias: self.score_bias,
        }
    }

    /// Rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = if self.epochs <= 1 { 0.0 } else { (epoch.saturating_sub(1) as f64 / (self.epochs - 1) as f64).min(1.0) };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.learning_rate * (LR_FLOOR + (1.0 - LR_FLOOR) * c)
            }
        }
    }

    /// Ids of `query_attributes` in `kg`, or `None` for all attributes.
    pub fn query_filter(&self, kg: &KnowledgeGraph) -> Result<Option<Vec<AttributeId>>> {
        if self.query_attributes.is_empty() {
            return Ok(None);
        }
        self.query_attributes.iter().map(|a| kg.attribute_id(a)).collect::<Result<Vec<_>>>().map(Some)
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_toggles(&self.ablations)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.ablation()?;
        for (name, v) in [("epochs", self.epochs), ("walks", self.walks), ("top_k", self.top_k), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.top_k > self.walks {
            return Err(Error::Config(format!("top_k ({}) exceeds walks ({})", self.top_k, self.walks)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a nonnegative number".into()));
        }
        if !(0.0..1.0).contains(&self.explore) {
            return Err(Error::Config("explore must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be nonnegative".into()));
        }
        Ok(())
    }

    fn explore_slots(&self) -> usize {
        (self.explore * self.top_k as f64).round() as usize
    }
}

/// Per-query loss on normalized values.
pub fn loss(predicted: f64, target: f64, kind: LossKind) -> f64 {
    let e = predicted - target;
    match kind {
        LossKind::L1 => e.abs(),
        LossKind::L2 => e * e,
    }
}

/// Mean of per-query losses.
pub fn batch_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

/// Queries for triples whose attribute can be normalized.
pub fn queries_for(triples: &[NumericalTriple], stats: &AttributeStats) -> Vec<Query> {
    triples.iter().filter(|t| stats.has_range(t.attribute)).map(Query::from).collect()
}

/// Loss value and parameter gradients for one query, or `None` when no chain
/// reaches it.
pub fn query_gradients(
    model: &ChainsFormer,
    stats: &AttributeStats,
    toc: &TreeOfChains,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<(f64, Gradients)>> {
    let q = toc.query;
    let Some(target) = q.target_value else {
        return Err(Error::Training("training query without a target value".into()));
    };
    if toc.is_empty() {
        return Ok(None);
    }
    let etoc = model.select(toc, cfg.top_k, Selection::Explore(cfg.explore_slots()), seed)?;
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &etoc, stats)?;
    let t = tape.constant(Tensor::scalar(stats.normalize(target, q.attribute)?));
    let diff = tape.sub(out.prediction, t)?;
    let l = match cfg.loss {
        LossKind::L1 => tape.abs(diff),
        LossKind::L2 => tape.square(diff),
    };
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss for entity #{} attribute #{} over {} chains",
            q.entity,
            q.attribute,
            etoc.len()
        )));
    }
    Ok(Some((value, tape.backward(l)?)))
}

fn sample(model: &ChainsFormer, kg: &KnowledgeGraph, stats: &AttributeStats, q: &Query, cfg: &TrainConfig, epoch: u64) -> TreeOfChains {
    model.retrieve(kg, stats, q, cfg.walks, query_seed(cfg.seed, epoch, q))
}

/// Trees of chains sampled once, for `cache_toc`.
pub fn sample_all(model: &ChainsFormer, kg: &KnowledgeGraph, stats: &AttributeStats, queries: &[Query], cfg: &TrainConfig) -> Vec<TreeOfChains> {
    queries.par_iter().map(|q| sample(model, kg, stats, q, cfg, 0)).collect()
}

/// One optimizer step on the queries at positions `batch`. Returns the
/// per-query losses of the queries that had at least one chain; no step is
/// taken when none did. Gradients stay in the store until the next step.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &mut ChainsFormer,
    kg: &KnowledgeGraph,
    stats: &AttributeStats,
    queries: &[Query],
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
    cache: Option<&[TreeOfChains]>,
) -> Result<Vec<f64>> {
    let m: &ChainsFormer = model;
    let owned: Vec<TreeOfChains>;
    let tocs: Vec<&TreeOfChains> = match cache {
        Some(c) => batch.iter().map(|&i| &c[i]).collect(),
        None => {
            owned = batch.par_iter().map(|&i| sample(m, kg, stats, &queries[i], cfg, epoch)).collect();
            owned.iter().collect()
        }
    };
    let live = tocs.iter().filter(|t| !t.is_empty()).count();
    if live == 0 {
        return Ok(Vec::new());
    }
    // One dense gradient per query can be large (the affine nets output d²
    // values), so only a thread's worth is alive at once. Accumulation stays
    // in batch order.
    model.store.zero_grad();
    let scale = 1.0 / live as f64;
    let mut losses = Vec::with_capacity(live);
    for chunk in tocs.chunks(rayon::current_num_threads().max(1)) {
        let m: &ChainsFormer = model;
        let results: Vec<Result<Option<(f64, Gradients)>>> = chunk
            .par_iter()
            .map(|toc| query_gradients(m, stats, toc, cfg, query_seed(cfg.seed, epoch, &toc.query)))
            .collect();
        for r in results {
            if let Some((l, g)) = r? {
                losses.push(l);
                model.store.accumulate(&g, scale);
            }
        }
    }
    let store = &mut model.store;
    store.clip_grad_norm(cfg.clip_norm);
    store.adam_step(&AdamConfig { learning_rate: cfg.learning_rate_at(epoch), ..Default::default() });
    Ok(losses)
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// One pass over `queries`. Returns the mean per-query loss over the queries
/// that had at least one chain.
pub fn train_epoch(
    model: &mut ChainsFormer,
    kg: &KnowledgeGraph,
    stats: &AttributeStats,
    queries: &[Query],
    cfg: &TrainConfig,
    epoch: u64,
    cache: Option<&[TreeOfChains]>,
) -> Result<f64> {
    let mut losses = Vec::with_capacity(queries.len());
    for batch in epoch_batches(queries.len(), cfg, epoch) {
        losses.extend(train_batch(model, kg, stats, queries, &batch, cfg, epoch, cache)?);
    }
    Ok(batch_loss(&losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    /// Whether this epoch replaced the kept best checkpoint.
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    EpochLimit,
    Converged,
    Patience,
}

/// Per-epoch log. Wall-clock times are left out so reruns produce identical
/// files.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_mae,val_rmse,improved\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.improved);
    }
    s
}

/// A trained model with everything needed to reuse it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ChainsFormer,
    pub stats: AttributeStats,
    pub epoch: usize,
    pub best_metric: f64,
    /// Dataset directory the model was trained on, if known.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Train from scratch and return the best-validation checkpoint.
pub fn train(kg: &KnowledgeGraph, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stats = compute_attribute_stats(&split.train, kg.num_attributes());
    let model = ChainsFormer::for_graph(kg, cfg.model_config(), cfg.ablation()?, cfg.seed)?;
    train_model(model, kg, split, &stats, cfg)
}

/// Train an already initialized model.
pub fn train_model(
    mut model: ChainsFormer,
    kg: &KnowledgeGraph,
    split: &DatasetSplit,
    stats: &AttributeStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let wanted = cfg.query_filter(kg)?;
    let keep = |q: &Query| wanted.as_ref().is_none_or(|w| w.contains(&q.attribute));
    let train_q: Vec<Query> = queries_for(&split.train, stats).into_iter().filter(keep).collect();
    if train_q.is_empty() {
        return Err(Error::Empty("no trainable queries in the training split".into()));
    }
    let valid_q: Vec<Query> = queries_for(&split.valid, stats).into_iter().filter(keep).collect();
    with_threads(cfg.threads, || {
        let cache = cfg.cache_toc.then(|| sample_all(&model, kg, stats, &train_q, cfg));
        let mut history = Vec::new();
        let mut best = (f64::INFINITY, 0usize, model.values());
        let mut since_best = 0;
        let mut prev_loss: Option<f64> = None;
        let mut stop = StopReason::EpochLimit;
        for epoch in 1..=cfg.epochs {
            let start = Instant::now();
            let train_loss = train_epoch(&mut model, kg, stats, &train_q, cfg, epoch as u64, cache.as_deref())?;
            let (val_mae, val_rmse) = if valid_q.is_empty() {
                (train_loss, train_loss)
            } else {
                let (report, _) = evaluation::evaluate(&model, kg, stats, &valid_q, cfg.walks, cfg.top_k, cfg.seed)?;
                (report.average_mae, report.average_rmse)
            };
            let improved = val_mae < best.0;
            let rec = EpochRecord { epoch, train_loss, val_mae, val_rmse, improved, seconds: start.elapsed().as_secs_f64() };
            log::info!("epoch {epoch}: loss {train_loss:.6} val MAE {val_mae:.6} RMSE {val_rmse:.6}");
            history.push(rec);
            if improved {
                best = (val_mae, epoch, model.values());
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best > cfg.patience {
                stop = StopReason::Patience;
                break;
            }
            if prev_loss.is_some_and(|p| (p - train_loss).abs() < cfg.epsilon) {
                stop = StopReason::Converged;
                break;
            }
            prev_loss = Some(train_loss);
        }
        model.restore(&best.2)?;
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                config: cfg.clone(),
                model,
                stats: stats.clone(),
                epoch: best.1,
                best_metric: best.0,
                data_dir: None,
            },
            history,
            stop,
        })
    })?
}

// ---------------------------------------------------------------------------
// checkpoint files

const MAGIC: &[u8; 8] = b"CFCKPT01";

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
    ball: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ChainsFormer,
    stats: AttributeStats,
    epoch: usize,
    best_metric: f64,
    data_dir: Option<PathBuf>,
    params: Vec<ParamMeta>,
}

impl Checkpoint {
    /// Binary layout: magic, header length (u64 LE), JSON header, then every
    /// parameter as raw little-endian f64 in store order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            data_dir: self.data_dir.clone(),
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| ParamMeta { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols(), ball: p.ball })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.model.store.num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in self.model.store.iter() {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reject a graph whose relation or attribute vocabulary does not match
    /// the tables the model was built for.
    pub fn check_graph(&self, kg: &KnowledgeGraph) -> Result<()> {
        let rel = self.model.store.get(self.model.relations).rows();
        let att = self.model.store.get(self.model.attributes).rows();
        if rel != kg.num_relations() || att != kg.num_attributes() {
            return Err(Error::Checkpoint(format!(
                "model expects {rel} relations and {att} attributes, graph has {} and {}",
                kg.num_relations(),
                kg.num_attributes()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| bad(&e.to_string()))?;
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut off = 16 + hlen;
        let mut store = ParamStore::new();
        for meta in &header.params {
            let n = meta.rows * meta.cols;
            let bytes = buf.get(off..off + 8 * n).ok_or_else(|| bad("truncated parameter data"))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(meta.rows, meta.cols, data);
            match meta.ball {
                Some(c) => store.add_hyperbolic(&meta.name, t, c),
                None => store.add(&meta.name, t),
            };
            off += 8 * n;
        }
        if off != buf.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let mut model = header.model;
        model.store = store;
        Ok(Self {
            config: header.config,
            model,
            stats: header.stats,
            epoch: header.epoch,
            best_metric: header.best_metric,
            data_dir: header.data_dir,
        })
    }
}
