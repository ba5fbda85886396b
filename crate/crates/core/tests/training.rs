//! Training-loop behavior on small synthetic graphs.

use chainsformer::evaluation;
use chainsformer::kg::compute_attribute_stats;
use chainsformer::model::ChainsFormer;
use chainsformer::synth::{self, SynthData, SynthSpec};
use chainsformer::training::{self, LrSchedule, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 2e-3,
        schedule: LrSchedule::Cosine,
        walks: 128,
        top_k: 16,
        dim: 16,
        filter_dim: 16,
        affine_hidden: 8,
        batch_size: 8,
        lambda: 0.2,
        explore: 0.5,
        score_bias: 10.0,
        patience: 30,
        ..Default::default()
    }
}

/// One hop, `target = source`.
fn copy_task() -> SynthData {
    SynthSpec { path: vec!["link".into()], alpha: 1.0, ..Default::default() }.generate().unwrap()
}

#[test]
fn copy_task_trains_every_parameter_and_keeps_embeddings_in_ball() {
    let data = copy_task();
    let cfg = small_config();
    let stats = compute_attribute_stats(&data.split.train, data.kg.num_attributes());
    let mut model = ChainsFormer::for_graph(&data.kg, cfg.model_config(), cfg.ablation().unwrap(), cfg.seed).unwrap();
    let queries = training::queries_for(&data.split.train, &stats);
    let mut touched = vec![false; model.store.len()];
    for epoch in 1..=3u64 {
        for batch in training::epoch_batches(queries.len(), &cfg, epoch) {
            training::train_batch(&mut model, &data.kg, &stats, &queries, &batch, &cfg, epoch, None).unwrap();
            for (i, (_, p)) in model.store.iter().enumerate() {
                touched[i] |= p.grad.iter().any(|&g| g != 0.0);
                if let Some(c) = p.ball {
                    for r in 0..p.value.rows() {
                        let n2: f64 = p.value.row(r).iter().map(|x| x * x).sum();
                        assert!(c * n2 < 1.0, "{} row {r} left the ball", p.name);
                    }
                }
            }
        }
    }
    let dead: Vec<&str> = model.store.iter().zip(&touched).filter(|(_, &t)| !t).map(|((_, p), _)| p.name.as_str()).collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn copy_task_reaches_low_error() {
    let data = copy_task();
    let cfg = TrainConfig { epochs: 30, score_bias: 10.0, ..synth::train_config() };
    let out = training::train(&data.kg, &data.split, &cfg).unwrap();
    let ck = &out.checkpoint;
    let test = training::queries_for(&data.split.test, &ck.stats);
    let (report, _) = evaluation::evaluate(&ck.model, &data.kg, &ck.stats, &test, cfg.walks, cfg.top_k, cfg.seed).unwrap();
    println!("copy task test Average* MAE {:.5} (best epoch {})", report.average_mae, ck.epoch);
    assert!(report.average_mae < 0.01, "copy task MAE {}", report.average_mae);
}

#[test]
fn first_steps_are_bitwise_reproducible() {
    let data = copy_task();
    let cfg = small_config();
    let stats = compute_attribute_stats(&data.split.train, data.kg.num_attributes());
    let queries = training::queries_for(&data.split.train, &stats);
    let run = || {
        let mut model = ChainsFormer::for_graph(&data.kg, cfg.model_config(), cfg.ablation().unwrap(), cfg.seed).unwrap();
        let batches = training::epoch_batches(queries.len(), &cfg, 1);
        batches[..3]
            .iter()
            .map(|b| {
                let l = training::train_batch(&mut model, &data.kg, &stats, &queries, b, &cfg, 1, None).unwrap();
                training::batch_loss(&l).to_bits()
            })
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn saved_checkpoints_improve_monotonically() {
    let data = copy_task();
    let cfg = TrainConfig { epochs: 8, ..small_config() };
    let out = training::train(&data.kg, &data.split, &cfg).unwrap();
    let saved: Vec<f64> = out.history.iter().filter(|r| r.improved).map(|r| r.val_mae).collect();
    assert!(!saved.is_empty());
    assert!(saved.windows(2).all(|w| w[1] <= w[0]));
    let best = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(out.checkpoint.best_metric, best);
}
