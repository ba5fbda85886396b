//! Metrics, the train-mean baseline, ablations and filter analysis.
//!
//! Per-attribute MAE and RMSE are reported in native units. `Average*` is the
//! unweighted mean over attributes of the same metrics after min-max
//! normalization, so attributes with very different ranges are comparable.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AttributeId, AttributeStats, DatasetSplit, Interner, KnowledgeGraph, Query};
use crate::model::{Ablation, ChainsFormer, Selection};
use crate::reasoner::PredictionTrace;
use crate::retrieval::query_seed;
use crate::training::{self, TrainConfig};

/// Epoch slot used to derive evaluation walk seeds, disjoint from training epochs.
pub const EVAL_EPOCH: u64 = u64::MAX;

/// Header line attached to every report.
pub const AVERAGE_NOTE: &str = "Average* is the mean over attributes of min-max normalized MAE and RMSE (MAE, not MSE, in the first column)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub attribute: AttributeId,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub attribute: String,
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub norm_mae: f64,
    pub norm_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<AttributeMetrics>,
    pub average_mae: f64,
    pub average_rmse: f64,
    pub notes: Vec<String>,
}

/// Group records by attribute and compute every metric.
pub fn compute_metrics(records: &[PredictionRecord], attributes: &Interner, stats: &AttributeStats) -> Result<MetricsReport> {
    let mut groups: BTreeMap<AttributeId, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = (r.prediction - r.target).abs();
        let g = groups.entry(r.attribute).or_default();
        g.0 += 1;
        g.1 += e;
        g.2 += e * e;
    }
    let mut rows = Vec::new();
    let mut notes = vec![AVERAGE_NOTE.to_string()];
    for (&a, &(n, abs, sq)) in &groups {
        let name = attributes.name(a).to_string();
        if !stats.has_range(a) {
            notes.push(format!("{name}: excluded, no usable training range"));
            continue;
        }
        let (mae, rmse) = (abs / n as f64, (sq / n as f64).sqrt());
        rows.push(AttributeMetrics {
            attribute: name,
            count: n,
            mae,
            rmse,
            norm_mae: stats.scale_error(mae, a)?,
            norm_rmse: stats.scale_error(rmse, a)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("no evaluable queries".into()));
    }
    let k = rows.len() as f64;
    Ok(MetricsReport {
        average_mae: rows.iter().map(|r| r.norm_mae).sum::<f64>() / k,
        average_rmse: rows.iter().map(|r| r.norm_rmse).sum::<f64>() / k,
        rows,
        notes,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("attribute,count,mae,rmse,norm_mae,norm_rmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.attribute, r.count, r.mae, r.rmse, r.norm_mae, r.norm_rmse);
        }
        let total: usize = self.rows.iter().map(|r| r.count).sum();
        let _ = writeln!(s, "Average*,{total},,,{},{}", self.average_mae, self.average_rmse);
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.attribute.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>14}  {:>14}", "attribute", "n", "MAE", "RMSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>6}  {:>14.6}  {:>14.6}", r.attribute, r.count, r.mae, r.rmse);
        }
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>14.6}  {:>14.6}", "Average*", "", self.average_mae, self.average_rmse);
        s
    }

    pub fn get(&self, attribute: &str) -> Option<&AttributeMetrics> {
        self.rows.iter().find(|r| r.attribute == attribute)
    }
}

fn records(traces: &[PredictionTrace]) -> Vec<PredictionRecord> {
    traces
        .iter()
        .filter_map(|t| {
            t.query.target_value.map(|target| PredictionRecord { attribute: t.query.attribute, prediction: t.prediction, target })
        })
        .collect()
}

/// Predict every query and score the predictions.
pub fn evaluate(
    model: &ChainsFormer,
    kg: &KnowledgeGraph,
    stats: &AttributeStats,
    queries: &[Query],
    walks: usize,
    k: usize,
    seed: u64,
) -> Result<(MetricsReport, Vec<PredictionTrace>)> {
    let traces = queries
        .par_iter()
        .map(|q| model.predict(kg, stats, q, walks, k, query_seed(seed, EVAL_EPOCH, q)))
        .collect::<Result<Vec<_>>>()?;
    Ok((compute_metrics(&records(&traces), kg.attributes(), stats)?, traces))
}

/// Predict the training mean of each attribute for every query.
pub fn baseline(kg: &KnowledgeGraph, stats: &AttributeStats, queries: &[Query]) -> Result<MetricsReport> {
    let recs: Vec<PredictionRecord> = queries
        .iter()
        .filter_map(|q| {
            let target = q.target_value?;
            let mean = stats.mean(q.attribute)?;
            Some(PredictionRecord { attribute: q.attribute, prediction: mean, target })
        })
        .collect();
    compute_metrics(&recs, kg.attributes(), stats)
}

/// One named variant of an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub report: MetricsReport,
}

/// Train and test one model per variant with identical data and seeds.
pub fn ablation_run(kg: &KnowledgeGraph, split: &DatasetSplit, cfg: &TrainConfig, variants: &[Ablation]) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let vcfg = TrainConfig { ablations: v.toggles().iter().map(|s| s.to_string()).collect(), ..cfg.clone() };
        let trained = training::train(kg, split, &vcfg)?;
        let ck = &trained.checkpoint;
        let test = training::queries_for(&split.test, &ck.stats);
        let (report, _) = evaluate(&ck.model, kg, &ck.stats, &test, cfg.walks, cfg.top_k, cfg.seed)?;
        out.push(AblationResult { variant: v.name(), report });
    }
    Ok(out)
}

/// Source-attribute composition of retrieved versus selected chains for one
/// query attribute.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Composition {
    pub query_attribute: String,
    pub before: BTreeMap<String, usize>,
    pub after: BTreeMap<String, usize>,
}

impl Composition {
    fn fraction(map: &BTreeMap<String, usize>, name: &str) -> f64 {
        let total: usize = map.values().sum();
        if total == 0 {
            0.0
        } else {
            *map.get(name).unwrap_or(&0) as f64 / total as f64
        }
    }

    /// Share of chains whose source attribute is the query attribute.
    pub fn same_before(&self) -> f64 {
        Self::fraction(&self.before, &self.query_attribute)
    }

    pub fn same_after(&self) -> f64 {
        Self::fraction(&self.after, &self.query_attribute)
    }

    /// Share of chains with the given source attribute before and after.
    pub fn share(&self, source: &str) -> (f64, f64) {
        (Self::fraction(&self.before, source), Self::fraction(&self.after, source))
    }
}

/// Per query attribute, count source attributes in each tree before and after
/// the top-k filter.
pub fn filter_analysis(
    model: &ChainsFormer,
    kg: &KnowledgeGraph,
    stats: &AttributeStats,
    queries: &[Query],
    walks: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Composition>> {
    let per_query = queries
        .par_iter()
        .map(|q| {
            let s = query_seed(seed, EVAL_EPOCH, q);
            let toc = model.retrieve(kg, stats, q, walks, s);
            let etoc = model.select(&toc, k, Selection::TopK, s)?;
            let before: Vec<AttributeId> = toc.chains.iter().map(|c| c.source_attribute).collect();
            let after: Vec<AttributeId> = etoc.chains.iter().map(|c| c.source_attribute).collect();
            Ok((q.attribute, before, after))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: BTreeMap<AttributeId, Composition> = BTreeMap::new();
    let name = |a: AttributeId| kg.attributes().name(a).to_string();
    for (qa, before, after) in per_query {
        let c = out.entry(qa).or_insert_with(|| Composition { query_attribute: name(qa), ..Default::default() });
        for a in before {
            *c.before.entry(name(a)).or_default() += 1;
        }
        for a in after {
            *c.after.entry(name(a)).or_default() += 1;
        }
    }
    Ok(out.into_values().collect())
}

/// Per-query listing of the chains kept by the filter, sorted by score,
/// with their chain weights.
pub fn selection_audit(traces: &[PredictionTrace]) -> String {
    let mut s = String::new();
    for t in traces {
        let _ = writeln!(s, "# {} / {}  ({} chains)", t.entity, t.attribute, t.chains.len());
        let mut chains: Vec<_> = t.chains.iter().collect();
        chains.sort_by(|a, b| a.score.total_cmp(&b.score));
        for c in chains {
            let _ = writeln!(s, "{:.6}\t{:.4}\t{}", c.score, c.weight, c.description);
        }
    }
    s
}

pub fn filter_report(rows: &[Composition]) -> String {
    let mut s = String::from("query_attribute\tsource_attribute\tshare_before\tshare_after\n");
    for c in rows {
        let mut sources: Vec<&String> = c.before.keys().chain(c.after.keys()).collect();
        sources.sort();
        sources.dedup();
        for src in sources {
            let (b, a) = c.share(src);
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}", c.query_attribute, src, b, a);
        }
    }
    s
}
