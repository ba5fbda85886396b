//! The bindings called natively; the browser sees the same JSON.

use chainsformer_demo::{bit_stream, chains, poincare};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn poincare_reports_both_distance_forms() {
    let out = parse(poincare(vec![0.3, 0.2], vec![-0.4, 0.5], 1.0));
    let (a, b) = (out["distance"].as_f64().unwrap(), out["distance_arcosh"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-9);
    assert_ne!(out["sum"], out["reverse_sum"]);
    let err = parse(poincare(vec![1.5, 0.0], vec![0.0, 0.0], 1.0));
    assert!(err["error"].is_string());
}

#[test]
fn chains_marks_k_kept_rows() {
    let out = parse(chains(0, 64, 3, 5, 0.5, 0));
    let rows = out["chains"].as_array().unwrap();
    assert!(rows.len() > 5);
    let mut kept: Vec<(u64, f64)> =
        rows.iter().filter_map(|r| r["rank"].as_u64().map(|k| (k, r["score"].as_f64().unwrap()))).collect();
    kept.sort_by_key(|r| r.0);
    assert_eq!(kept.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(kept.windows(2).all(|w| w[0].1 <= w[1].1));
    assert_eq!(out, parse(chains(0, 64, 3, 5, 0.5, 0)));
}

#[test]
fn bit_stream_splits_the_fields() {
    let out = parse(bit_stream(-2.0));
    assert_eq!(out["sign"], "1");
    assert_eq!(out["exponent"], "10000000000");
    assert_eq!(out["mantissa"].as_str().unwrap(), "0".repeat(52));
    assert_eq!(out["decoded"].as_f64(), Some(-2.0));
}
