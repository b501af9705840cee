//! Benchmarks for the hot paths: similarity, hypergraph convolution,
//! encoder forward pass, metrics and a whole training epoch.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use hekp4nbr_bench::bench_fixture;
use hekp4nbr_core::config::DegreeMode;
use hekp4nbr_core::eval::ndcg_at_k;
use hekp4nbr_core::head::{train, ModelAssembly};
use hekp4nbr_core::knowledge::TemplateSet;
use hekp4nbr_core::relenc::{
    build_bipartite, gcn_forward, hypergraph_conv, moe_similarity, topk_mask, GcnAdjacency,
};
use hekp4nbr_core::rng::rng_from;
use hekp4nbr_core::seqenc::{bind_params, Dropout, ModelConfig, SeqEncoder};
use hekp4nbr_core::tensor::{Graph, ParamSet, Tensor, Var};

fn bench_relation_encoder(c: &mut Criterion) {
    let (train_set, _, _, cfg) = bench_fixture();
    let graph = build_bipartite(&train_set).unwrap();
    let adj = GcnAdjacency::new(&graph, cfg.d2);
    let asm = ModelAssembly::build(&cfg, 64, train_set.n_items(), graph.n_baskets, 7).unwrap();

    c.bench_function("gcn_embed", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bound = bind_params(&g, &asm.params, false);
            let ws: Vec<Var> = asm.overhead.gcn_ws.iter().map(|p| bound[p.0]).collect();
            let out = gcn_forward(
                &g,
                bound[asm.overhead.item_emb.0],
                bound[asm.overhead.basket_emb.0],
                &ws,
                &adj,
            )
            .unwrap();
            black_box(g.value(out.items));
        })
    });

    c.bench_function("moe_similarity_topk_conv", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bound = bind_params(&g, &asm.params, false);
            let items = bound[asm.overhead.item_emb.0];
            let experts: Vec<Var> = asm.overhead.experts.iter().map(|p| bound[p.0]).collect();
            let pi = moe_similarity(&g, items, &experts).unwrap();
            let mask = topk_mask(&g.value(pi), cfg.k_topk).unwrap();
            let m = g.mul(pi, g.constant(mask)).unwrap();
            let ffn_ws: Vec<Var> = asm.overhead.ffn_ws.iter().map(|p| bound[p.0]).collect();
            let ffn_bs: Vec<Var> = asm.overhead.ffn_bs.iter().map(|p| bound[p.0]).collect();
            let v = hypergraph_conv(&g, m, items, &ffn_ws, &ffn_bs, DegreeMode::Weighted, false)
                .unwrap();
            black_box(g.value(v));
        })
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let model_cfg = ModelConfig {
        d_model: 64,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 4,
        ffn_mult: 2,
        max_tokens: 256,
        vocab_size: 200,
        dropout: 0.0,
    };
    let mut params = ParamSet::new();
    let mut rng = rng_from(9);
    let model = SeqEncoder::new(model_cfg, &mut params, &mut rng).unwrap();
    let mut mup: Vec<usize> = (0..120).map(|i| 6 + (i % 40)).collect();
    mup[10] = 3; // MASK
    let ktp: Vec<usize> = (0..80).map(|i| 6 + (i % 50)).collect();

    c.bench_function("encoder_forward_200_tokens", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bound = bind_params(&g, &params, false);
            let (_, _, v_s) = model
                .encode(&g, &bound, &mup, &ktp, &[10], &mut Dropout::eval())
                .unwrap();
            black_box(g.value(v_s));
        })
    });

    c.bench_function("encoder_forward_backward", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bound = bind_params(&g, &params, true);
            let (_, _, v_s) = model
                .encode(&g, &bound, &mup, &ktp, &[10], &mut Dropout::eval())
                .unwrap();
            let loss = g.sum(v_s, None);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let ranked: Vec<usize> = (0..100).collect();
    let truth = [3usize, 17, 41, 77].into_iter().collect();
    c.bench_function("ndcg_at_10", |b| {
        b.iter(|| black_box(ndcg_at_k(&ranked, &truth, 10).unwrap()))
    });
}

fn bench_training_epoch(c: &mut Criterion) {
    let (train_set, val_set, kg, cfg) = bench_fixture();
    let templates = TemplateSet::builtin();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one_epoch_160_users", |b| {
        b.iter(|| {
            let out = train(&train_set, &val_set, &kg, &cfg, &templates, &mut |_| {}).unwrap();
            black_box(out.best_epoch);
        })
    });
    group.finish();

    // keep the raw kernel visible so regressions in plain matmul show up
    let mut rng = rng_from(4);
    let a = Tensor::randn(&[128, 128], 1.0, &mut rng);
    let bm = Tensor::randn(&[128, 128], 1.0, &mut rng);
    c.bench_function("matmul_128", |b| {
        b.iter(|| black_box(hekp4nbr_core::tensor::matmul(&a, &bm).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_relation_encoder,
    bench_encoder_forward,
    bench_metrics,
    bench_training_epoch
);
criterion_main!(benches);
