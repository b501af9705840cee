//! Shared fixtures for the criterion benchmarks.

use hekp4nbr_core::config::Config;
use hekp4nbr_core::corpus::{gen_synthetic, preprocess, split, BasketDataset, SyntheticSpec};
use hekp4nbr_core::knowledge::KnowledgeGraph;

/// Desk-scale dataset and config used across benchmarks.
pub fn bench_fixture() -> (BasketDataset, BasketDataset, KnowledgeGraph, Config) {
    let spec = SyntheticSpec::default();
    let (events, kg) = gen_synthetic(&spec).expect("valid spec");
    let mut cfg = Config::default();
    for (k, v) in [
        ("d_model", "32"),
        ("n_enc_layers", "1"),
        ("n_dec_layers", "1"),
        ("ffn_mult", "2"),
        ("d2", "16"),
        ("d3", "8"),
        ("n_experts", "4"),
        ("k_topk", "6"),
        ("beam_width", "6"),
        ("n_hops", "2"),
        ("token_budget", "160"),
        ("max_tokens", "160"),
        ("dropout", "0.0"),
        ("epochs", "1"),
        ("batch_size", "32"),
        ("workers", "1"),
    ] {
        cfg.set(k, v).expect("valid key");
    }
    let ds = preprocess(&events, &cfg.rules()).expect("non-empty");
    let (train_set, val_set, _) = split(&ds, cfg.ratios(), cfg.seed).expect("three users");
    (train_set, val_set, kg, cfg)
}
