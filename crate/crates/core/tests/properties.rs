//! Property tests over randomized inputs.

use std::collections::BTreeSet;

use proptest::prelude::*;

use hekp4nbr_core::config::HrVariant;
use hekp4nbr_core::corpus::{
    frequency_vector, preprocess, split, Basket, InteractionEvent, PreprocessRules,
};
use hekp4nbr_core::eval::hr_at_k;
use hekp4nbr_core::head::recommend_topn;
use hekp4nbr_core::knowledge::{
    augment_kg, build_knowledge_tree, build_vocab, render_mup, KnowledgeGraph, TemplateSet,
    Triplet, MASK, SEQ_ENTITY,
};

fn arb_events() -> impl Strategy<Value = Vec<InteractionEvent>> {
    // a handful of users, baskets of 1..7 items over a small catalog
    proptest::collection::vec(
        (0u8..6, 0i64..8, proptest::collection::btree_set(0u8..12, 1..7)),
        1..40,
    )
    .prop_map(|rows| {
        let mut events = Vec::new();
        for (u, t, items) in rows {
            for i in items {
                events.push(InteractionEvent {
                    user_id: format!("u{u}"),
                    timestamp: t,
                    item_id: format!("i{i:02}"),
                });
            }
        }
        events
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocess_output_respects_bounds_and_is_idempotent(events in arb_events()) {
        let rules = PreprocessRules { min_seq_len: 2, ..Default::default() };
        let Ok(ds) = preprocess(&events, &rules) else { return Ok(()); };
        for seq in &ds.sequences {
            prop_assert!(seq.baskets.len() >= rules.min_seq_len);
            prop_assert!(seq.baskets.len() <= rules.max_seq_len);
            for w in seq.baskets.windows(2) {
                prop_assert!(w[0].timestamp < w[1].timestamp);
            }
            for b in &seq.baskets {
                prop_assert!(b.items.len() >= rules.min_basket_size);
                prop_assert!(b.items.len() <= rules.max_basket_size);
                prop_assert!(b.items.iter().all(|&i| i < ds.n_items()));
            }
        }
        let replay = preprocess(&hekp4nbr_core::corpus::dataset_to_events(&ds), &rules).unwrap();
        prop_assert_eq!(ds, replay);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(events in arb_events(), seed in 0u64..1000) {
        let rules = PreprocessRules { min_seq_len: 1, min_basket_size: 1, ..Default::default() };
        let Ok(ds) = preprocess(&events, &rules) else { return Ok(()); };
        if ds.n_users() < 3 { return Ok(()); }
        let (a, b, c) = split(&ds, (0.6, 0.2, 0.2), seed).unwrap();
        let mut users: Vec<&str> = a.sequences.iter()
            .chain(&b.sequences)
            .chain(&c.sequences)
            .map(|s| s.user_id.as_str())
            .collect();
        users.sort();
        let total = users.len();
        users.dedup();
        prop_assert_eq!(users.len(), total, "user appears in two splits");
        prop_assert_eq!(total, ds.n_users());
        prop_assert_eq!(&a.catalog, &ds.catalog);
    }

    #[test]
    fn frequency_vectors_normalize_or_vanish(
        baskets in proptest::collection::vec(
            proptest::collection::btree_set(0usize..9, 1..5), 0..8)
    ) {
        let baskets: Vec<Basket> = baskets
            .into_iter()
            .enumerate()
            .map(|(t, items)| Basket { timestamp: t as i64, items: items.into_iter().collect() })
            .collect();
        let f = frequency_vector(&baskets, 9);
        prop_assert!(f.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let sum: f64 = f.values.iter().sum();
        if baskets.is_empty() {
            prop_assert!(f.is_zero());
        } else {
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn knowledge_tree_hops_are_monotone_and_bounded(
        edges in proptest::collection::vec((0u8..10, 0u8..3, 0u8..10), 0..30),
        n_hops in 1usize..5,
        beam in 1usize..6,
    ) {
        let triples: Vec<Triplet> = edges
            .iter()
            .map(|(h, r, t)| Triplet::new(&format!("e{h}"), &format!("r{r}"), &format!("e{t}")))
            .collect();
        let kg = KnowledgeGraph::from_triples(triples);
        let catalog: Vec<String> = (0..4).map(|i| format!("e{i}")).collect();
        let baskets = vec![Basket { timestamp: 0, items: vec![0, 1, 2, 3] }];
        let aug = augment_kg(&kg, &baskets, &catalog);
        let tree = build_knowledge_tree(&aug, SEQ_ENTITY, n_hops, beam, None).unwrap();
        let again = build_knowledge_tree(&aug, SEQ_ENTITY, n_hops, beam, None).unwrap();
        prop_assert_eq!(&tree, &again, "beam search must be deterministic");
        let mut seen_tails = BTreeSet::new();
        let mut prev = 0usize;
        for (t, &hop) in tree.triples.iter().zip(&tree.hop_of) {
            prop_assert!(hop >= prev, "hops must be non-decreasing");
            prop_assert!(hop <= n_hops);
            prop_assert!(seen_tails.insert(t.tail.clone()), "entity visited twice");
            prev = hop;
        }
    }

    #[test]
    fn mup_mask_count_survives_tokenization(
        n_masks in 1usize..6,
        history in proptest::collection::vec(
            proptest::collection::btree_set(0usize..8, 2..5), 1..6),
    ) {
        let names: Vec<String> = (0..8).map(|i| format!("thing_{i}")).collect();
        let history: Vec<Basket> = history
            .into_iter()
            .enumerate()
            .map(|(t, items)| Basket { timestamp: t as i64, items: items.into_iter().collect() })
            .collect();
        let mup = render_mup(&history, &names, n_masks, 0, &TemplateSet::builtin()).unwrap();
        prop_assert_eq!(mup.mask_count(), n_masks);
        let tok = build_vocab(std::slice::from_ref(&mup.text), 1, &names);
        let (ids, positions) = tok.tokenize(&mup.text);
        prop_assert_eq!(positions.len(), n_masks);
        prop_assert_eq!(ids.iter().filter(|&&i| i == MASK).count(), n_masks);
    }

    #[test]
    fn topn_ranking_is_invariant_under_monotone_maps(
        scores in proptest::collection::vec(-10.0f64..10.0, 5..20),
        n in 1usize..5,
    ) {
        let squashed: Vec<f64> = scores.iter().map(|&v| v.tanh()).collect();
        let a = recommend_topn(&scores, n, None).unwrap();
        let b = recommend_topn(&squashed, n, None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hr_is_monotone_in_k(
        perm in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<usize> = (0..12).collect();
            for i in (1..v.len()).rev() {
                let j = rng.gen_range(0..=i);
                v.swap(i, j);
            }
            v
        }),
        truth in proptest::collection::btree_set(0usize..12, 1..5),
    ) {
        let mut prev = 0.0;
        for k in 1..=perm.len() {
            let hr = hr_at_k(&perm, &truth, k, HrVariant::Recall).unwrap();
            prop_assert!(hr + 1e-12 >= prev);
            prev = hr;
        }
    }
}
