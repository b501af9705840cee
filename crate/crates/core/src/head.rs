//! Frequency-gated scoring head and the joint training loop.
//!
//! Scoring follows the gating head: a learned projection of the sequence
//! embedding is concatenated with each refined item embedding, read out by
//! a linear layer, and blended with the user's interaction frequencies
//! through a learned gate. Training runs the full pipeline per batch: a
//! shared graph computes the relation-encoder state once, per-user graphs
//! attach the sequence encoder and the four losses, and gradients meet at
//! the batch boundary via cotangent seeding.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{round_f32, Checkpoint};
use crate::config::{Config, RebuildMode};
use crate::corpus::{frequency_vector, Basket, BasketDataset, FrequencyVector, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate_rankings, MetricsReport};
use crate::knowledge::{
    augment_kg, build_knowledge_tree, build_vocab, render_ktp, render_mup, render_target,
    KnowledgeGraph, PromptText, TemplateSet, Tokenizer, BOS, EOS, SEQ_ENTITY,
};
use crate::relenc::{
    build_bipartite, gcn_forward, hypergraph_conv, loss_bi, loss_ii, moe_similarity,
    sample_ii_all, sample_pos_neg, topk_mask, GcnAdjacency, SampleMode,
};
use crate::rng::{derive_seed, rng_from};
use crate::seqenc::{bind_params, Dropout, ModelConfig, SeqEncoder};
use crate::tensor::{AdamGroup, AdamW, GradStore, Graph, ParamId, ParamSet, Tensor, Var};

// ---- gating head -----------------------------------------------------------

/// Parameter handles of the gating head. `w1/w2/b2` are absent when the
/// gate is ablated to a plain inner product.
#[derive(Debug, Clone)]
pub struct GatingParams {
    pub w_p: ParamId,
    pub w1: Option<ParamId>,
    pub w2: Option<ParamId>,
    pub b2: Option<ParamId>,
    pub diagonal: bool,
}

/// Frequency-gated scores over all items.
///
/// `y_i = (W1^T (proj(v_S) ++ v'_i) * (1 - beta_i alpha_i) + gamma_i alpha_i) / sqrt(2 d2)`
/// with `alpha = W2 gamma + b2` and `beta = [gamma > 0]`. A cold user
/// (all-zero frequencies) degrades to the pure content match.
pub fn fbg_score(
    g: &Graph,
    bound: &[Var],
    gating: &GatingParams,
    v_s: Var,
    v_prime: Var,
    gamma: &FrequencyVector,
) -> Result<Var> {
    let shape = g.shape_of(v_prime);
    let (n, d2) = (shape[0], shape[1]);
    let d_model = g.shape_of(v_s)[0];
    let proj = g.matmul(g.reshape(v_s, &[1, d_model])?, bound[gating.w_p.0])?;

    let (Some(w1), Some(w2), Some(b2)) = (gating.w1, gating.w2, gating.b2) else {
        // ablated head: plain inner product between projection and items
        let dots = g.matmul(v_prime, g.transpose(proj)?)?;
        return g.reshape(dots, &[n]);
    };

    let seq_rows = g.matmul(g.constant(Tensor::ones(&[n, 1])), proj)?;
    let cat = g.concat(&[seq_rows, v_prime], 1)?;
    let content = g.reshape(g.matmul(cat, bound[w1.0])?, &[n])?;

    let gamma_c = g.constant(Tensor::from_vec(vec![n], gamma.values.clone()));
    let beta_c = g.constant(Tensor::from_vec(vec![n], gamma.positives()));
    let alpha = if gating.diagonal {
        g.add(g.mul(bound[w2.0], gamma_c)?, bound[b2.0])?
    } else {
        let col = g.matmul(bound[w2.0], g.reshape(gamma_c, &[n, 1])?)?;
        g.add(g.reshape(col, &[n])?, bound[b2.0])?
    };
    let gate = g.sub(g.constant(Tensor::ones(&[n])), g.mul(beta_c, alpha)?)?;
    let blended = g.add(g.mul(content, gate)?, g.mul(gamma_c, alpha)?)?;
    Ok(g.scalar_mul(1.0 / (2.0 * d2 as f64).sqrt(), blended))
}

const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy over all items, positives and negatives each
/// averaged within their own group; probabilities are clamped away from
/// the log singularities.
pub fn rec_loss(g: &Graph, scores: Var, positives: &BTreeSet<usize>) -> Result<Var> {
    let n = g.shape_of(scores)[0];
    if positives.is_empty() {
        return Err(Error::InvalidArgument("no positive items for the loss".into()));
    }
    if positives.len() >= n {
        return Err(Error::InvalidArgument(
            "positives cover the whole catalog; no negatives left".into(),
        ));
    }
    if let Some(&bad) = positives.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "positive item {bad} outside catalog of {n}"
        )));
    }
    let p_raw = g.sigmoid(scores);
    let lo = g.value(p_raw).map(|v| if v < PROB_CLAMP { 1.0 } else { 0.0 });
    let p = g.masked_fill(p_raw, &lo, PROB_CLAMP)?;
    let hi = g.value(p).map(|v| if v > 1.0 - PROB_CLAMP { 1.0 } else { 0.0 });
    let p = g.masked_fill(p, &hi, 1.0 - PROB_CLAMP)?;

    let mut pos_w = vec![0.0; n];
    let mut neg_w = vec![-1.0 / (n - positives.len()) as f64; n];
    for &i in positives {
        pos_w[i] = -1.0 / positives.len() as f64;
        neg_w[i] = 0.0;
    }
    let pos_term = g.sum(g.mul(g.log(p), g.constant(Tensor::from_vec(vec![n], pos_w)))?, None);
    let one_minus = g.sub(g.constant(Tensor::ones(&[n])), p)?;
    let neg_term = g.sum(
        g.mul(g.log(one_minus), g.constant(Tensor::from_vec(vec![n], neg_w)))?,
        None,
    );
    g.add(pos_term, neg_term)
}

/// Loss weights for the four joint terms; all 1 by default.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub plm: f64,
    pub rec: f64,
    pub bi: f64,
    pub ii: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        LossWeights {
            plm: cfg.w_plm,
            rec: cfg.w_rec,
            bi: cfg.w_bi,
            ii: cfg.w_ii,
        }
    }
}

/// Weighted sum of the four losses; a non-finite component aborts with the
/// component named.
pub fn joint_loss(
    g: &Graph,
    l_plm: Var,
    l_rec: Var,
    l_bi: Var,
    l_ii: Var,
    weights: &LossWeights,
    epoch: usize,
) -> Result<Var> {
    for (name, v) in [
        ("l_plm", l_plm),
        ("l_rec", l_rec),
        ("l_bi", l_bi),
        ("l_ii", l_ii),
    ] {
        if !g.value(v).item().is_finite() {
            return Err(Error::Diverged {
                component: name.to_string(),
                epoch,
            });
        }
    }
    let mut total = g.scalar_mul(weights.plm, l_plm);
    total = g.add(total, g.scalar_mul(weights.rec, l_rec))?;
    total = g.add(total, g.scalar_mul(weights.bi, l_bi))?;
    g.add(total, g.scalar_mul(weights.ii, l_ii))
}

/// Indices of the `n` highest scores, descending, ties broken by index;
/// excluded items are removed before selection.
pub fn recommend_topn(
    scores: &[f64],
    n: usize,
    exclude: Option<&BTreeSet<usize>>,
) -> Result<Vec<usize>> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN scores cannot be ranked".into()));
    }
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.is_none_or(|ex| !ex.contains(i)))
        .collect();
    if n == 0 || n > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick top {n} from {} candidates",
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    candidates.truncate(n);
    Ok(candidates)
}

// ---- model assembly ---------------------------------------------------------

/// Handles of the relation-encoder and gating parameters.
#[derive(Debug, Clone)]
pub struct OverheadParams {
    pub item_emb: ParamId,
    pub basket_emb: ParamId,
    pub gcn_ws: Vec<ParamId>,
    pub experts: Vec<ParamId>,
    pub ffn_ws: Vec<ParamId>,
    pub ffn_bs: Vec<ParamId>,
    pub gating: GatingParams,
}

/// The full parameter set plus handles, in deterministic registration
/// order (backbone first, then overhead).
pub struct ModelAssembly {
    pub params: ParamSet,
    pub seqenc: SeqEncoder,
    pub overhead: OverheadParams,
    pub n_items: usize,
    pub n_baskets: usize,
}

impl ModelAssembly {
    pub fn build(
        cfg: &Config,
        vocab_size: usize,
        n_items: usize,
        n_baskets: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = rng_from(derive_seed(seed, "init.seqenc", &[]));
        let model_cfg = ModelConfig::from_config(cfg, vocab_size);
        let seqenc = SeqEncoder::new(model_cfg, &mut params, &mut rng)?;

        let mut rng = rng_from(derive_seed(seed, "init.overhead", &[]));
        let d2 = cfg.d2;
        let std2 = 1.0 / (d2 as f64).sqrt();
        let item_emb = params.add("relenc.item_emb", Tensor::randn(&[n_items, d2], std2, &mut rng));
        let basket_emb = params.add(
            "relenc.basket_emb",
            Tensor::randn(&[n_baskets, d2], std2, &mut rng),
        );
        let mut gcn_ws = Vec::new();
        if !cfg.ablate_no_gcn {
            for l in 0..cfg.l1_layers {
                gcn_ws.push(params.add(
                    format!("relenc.gcn.{l}.w"),
                    Tensor::randn(&[d2, d2], std2, &mut rng),
                ));
            }
        }
        let mut experts = Vec::new();
        let mut ffn_ws = Vec::new();
        let mut ffn_bs = Vec::new();
        if !cfg.ablate_no_hypergcn {
            for nx in 0..cfg.n_experts {
                experts.push(params.add(
                    format!("relenc.expert.{nx}"),
                    Tensor::randn(&[d2, cfg.d3], std2, &mut rng),
                ));
            }
            for l in 0..cfg.l2_layers {
                ffn_ws.push(params.add(
                    format!("relenc.hg.{l}.w"),
                    Tensor::randn(&[d2, d2], std2, &mut rng),
                ));
                ffn_bs.push(params.add(format!("relenc.hg.{l}.b"), Tensor::zeros(&[d2])));
            }
        }
        let w_p = params.add(
            "fbg.w_p",
            Tensor::randn(&[cfg.d_model, d2], 1.0 / (cfg.d_model as f64).sqrt(), &mut rng),
        );
        let gating = if cfg.ablate_no_fbg {
            GatingParams {
                w_p,
                w1: None,
                w2: None,
                b2: None,
                diagonal: cfg.diagonal_gate,
            }
        } else {
            let w1 = params.add(
                "fbg.w1",
                Tensor::randn(&[2 * d2, 1], 1.0 / (2.0 * d2 as f64).sqrt(), &mut rng),
            );
            let w2 = if cfg.diagonal_gate {
                params.add("fbg.w2", Tensor::zeros(&[n_items]))
            } else {
                params.add("fbg.w2", Tensor::zeros(&[n_items, n_items]))
            };
            let b2 = params.add("fbg.b2", Tensor::zeros(&[n_items]));
            GatingParams {
                w_p,
                w1: Some(w1),
                w2: Some(w2),
                b2: Some(b2),
                diagonal: cfg.diagonal_gate,
            }
        };

        Ok(ModelAssembly {
            params,
            seqenc,
            overhead: OverheadParams {
                item_emb,
                basket_emb,
                gcn_ws,
                experts,
                ffn_ws,
                ffn_bs,
                gating,
            },
            n_items,
            n_baskets,
        })
    }

    /// Rebuild the assembly from checkpoint tensors; shapes and ablation
    /// wiring come from the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let vocab_size = ckpt.vocab_lines.lines().count();
        let n_items = ckpt.catalog.len();
        let n_baskets = ckpt
            .tensor("relenc.basket_emb")
            .ok_or_else(|| Error::Checkpoint("missing relenc.basket_emb".into()))?
            .shape()[0];
        let mut asm =
            ModelAssembly::build(&ckpt.config, vocab_size, n_items, n_baskets, ckpt.config.seed)?;
        for pid in asm.params.ids().collect::<Vec<_>>() {
            let name = asm.params.name(pid).to_string();
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            asm.params.set(pid, t.clone())?;
        }
        Ok(asm)
    }

    /// Clone of the parameters with every value rounded to f32, the width
    /// evaluation and checkpoints run at.
    pub fn rounded_params(&self) -> ParamSet {
        let mut out = self.params.clone();
        for pid in out.ids().collect::<Vec<_>>() {
            let r = round_f32(out.get(pid));
            out.set(pid, r).expect("same shape");
        }
        out
    }
}

// ---- shared (relation encoder) graph per batch --------------------------------

struct SharedGraph {
    g: Graph,
    bound: Vec<Var>,
    v_items: Var,
    v_baskets: Var,
    pi: Option<Var>,
    m_value: Option<Tensor>,
    v_prime: Var,
}

fn shared_forward(
    asm: &ModelAssembly,
    params: &ParamSet,
    adj: &GcnAdjacency,
    frozen_mask: Option<&Tensor>,
    cfg: &Config,
    with_grad: bool,
) -> Result<SharedGraph> {
    let g = Graph::new();
    let bound = bind_params(&g, params, with_grad);
    let ov = &asm.overhead;
    let (v_items, v_baskets) = if cfg.ablate_no_gcn {
        (bound[ov.item_emb.0], bound[ov.basket_emb.0])
    } else {
        let ws: Vec<Var> = ov.gcn_ws.iter().map(|p| bound[p.0]).collect();
        let out = gcn_forward(&g, bound[ov.item_emb.0], bound[ov.basket_emb.0], &ws, adj)?;
        (out.items, out.baskets)
    };
    if cfg.ablate_no_hypergcn {
        return Ok(SharedGraph {
            g,
            bound,
            v_items,
            v_baskets,
            pi: None,
            m_value: None,
            v_prime: v_items,
        });
    }
    let experts: Vec<Var> = ov.experts.iter().map(|p| bound[p.0]).collect();
    let pi = moe_similarity(&g, v_items, &experts)?;
    let mask = match frozen_mask {
        Some(m) => m.clone(),
        None => topk_mask(&g.value(pi), cfg.k_topk)?,
    };
    let m = g.mul(pi, g.constant(mask))?;
    let ffn_ws: Vec<Var> = ov.ffn_ws.iter().map(|p| bound[p.0]).collect();
    let ffn_bs: Vec<Var> = ov.ffn_bs.iter().map(|p| bound[p.0]).collect();
    let v_prime = hypergraph_conv(&g, m, v_items, &ffn_ws, &ffn_bs, cfg.degree_mode, false)?;
    let m_value = Some(g.value(m));
    Ok(SharedGraph {
        g,
        m_value,
        bound,
        v_items,
        v_baskets,
        pi: Some(pi),
        v_prime,
    })
}

// ---- per-user training step -----------------------------------------------------

/// Tokenized prompts and supervision for one user.
#[derive(Debug, Clone)]
struct UserCache {
    mup_ids: Vec<usize>,
    mask_positions: Vec<usize>,
    ktp_ids: Vec<usize>,
    target_ids: Vec<usize>,
    positives: BTreeSet<usize>,
    gamma: FrequencyVector,
    baskets: Vec<Vec<usize>>,
    basket_nodes: Vec<usize>,
}

struct UserOut {
    grads: GradStore,
    cot_items: Option<Tensor>,
    cot_basket_rows: Option<Tensor>,
    cot_pi: Option<Tensor>,
    cot_vprime: Option<Tensor>,
    parts: [f64; 4],
}

fn gather_rows(t: &Tensor, ids: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &r in ids {
        data.extend_from_slice(t.row(r));
    }
    Tensor::from_vec(vec![ids.len(), cols], data)
}

#[allow(clippy::too_many_arguments)]
fn user_forward(
    asm: &ModelAssembly,
    cfg: &Config,
    weights: &LossWeights,
    cache: &UserCache,
    v_items_val: &Tensor,
    v_baskets_val: &Tensor,
    pi_val: Option<&Tensor>,
    v_prime_val: &Tensor,
    epoch: usize,
    user_ix: usize,
) -> Result<UserOut> {
    let g = Graph::new();
    let bound = bind_params(&g, &asm.params, true);
    let v_items = g.leaf(v_items_val.clone(), true);
    let v_prime = if cfg.ablate_no_hypergcn {
        v_items
    } else {
        g.leaf(v_prime_val.clone(), true)
    };
    let vb_rows = g.leaf(gather_rows(v_baskets_val, &cache.basket_nodes), true);
    let pi = pi_val.map(|p| g.leaf(p.clone(), true));

    let mut drop = if cfg.dropout > 0.0 {
        Dropout::train(
            cfg.dropout,
            rng_from(derive_seed(cfg.seed, "dropout", &[epoch as u64, user_ix as u64])),
        )
    } else {
        Dropout::eval()
    };

    let (memory, _, v_s) = asm.seqenc.encode(
        &g,
        &bound,
        &cache.mup_ids,
        &cache.ktp_ids,
        &cache.mask_positions,
        &mut drop,
    )?;
    let l_plm = asm
        .seqenc
        .plm_loss(&g, &bound, memory, &cache.target_ids, &mut drop)?;

    let scores = fbg_score(&g, &bound, &asm.overhead.gating, v_s, v_prime, &cache.gamma)?;
    let l_rec = rec_loss(&g, scores, &cache.positives)?;

    // basket-item ranking loss over this user's baskets
    let mut rng_bi = rng_from(derive_seed(cfg.seed, "bi", &[epoch as u64, user_ix as u64]));
    let mut pos_ids = Vec::with_capacity(cache.baskets.len());
    let mut neg_ids = Vec::with_capacity(cache.baskets.len());
    for basket in &cache.baskets {
        let (_, pos, neg) = sample_pos_neg(basket, asm.n_items, SampleMode::BasketItem, &mut rng_bi)?
            .expect("basket-item sampling always yields a pair");
        pos_ids.push(pos);
        neg_ids.push(neg);
    }
    let pos_rows = g.embedding(v_items, &pos_ids)?;
    let neg_rows = g.embedding(v_items, &neg_ids)?;
    let l_bi = loss_bi(&g, vb_rows, pos_rows, neg_rows)?;

    // item-item ranking loss through the similarity matrix
    let l_ii = match pi {
        Some(pi) => {
            let mut rng_ii =
                rng_from(derive_seed(cfg.seed, "ii", &[epoch as u64, user_ix as u64]));
            let mut samples = Vec::new();
            let mut sample_weights = Vec::new();
            for basket in &cache.baskets {
                if let Some(draws) = sample_ii_all(basket, asm.n_items, &mut rng_ii)? {
                    let w = 1.0 / basket.len() as f64;
                    for d in draws {
                        samples.push(d);
                        sample_weights.push(w);
                    }
                }
            }
            loss_ii(&g, pi, &samples, &sample_weights)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };

    let total = joint_loss(&g, l_plm, l_rec, l_bi, l_ii, weights, epoch)?;
    let parts = [
        g.value(l_plm).item(),
        g.value(l_rec).item(),
        g.value(l_bi).item(),
        g.value(l_ii).item(),
    ];
    let grads = g.backward(total)?;

    let mut store = GradStore::for_params(&asm.params);
    for pid in asm.params.ids() {
        if let Some(gt) = grads.wrt(bound[pid.0]) {
            store.accumulate(pid, gt.clone());
        }
    }
    Ok(UserOut {
        cot_items: grads.wrt(v_items).cloned(),
        cot_basket_rows: grads.wrt(vb_rows).cloned(),
        cot_pi: pi.and_then(|p| grads.wrt(p).cloned()),
        cot_vprime: if cfg.ablate_no_hypergcn {
            None // folded into cot_items already
        } else {
            grads.wrt(v_prime).cloned()
        },
        grads: store,
        parts,
    })
}

// ---- prompt preparation -----------------------------------------------------------

fn prompt_budget(cfg: &Config) -> usize {
    cfg.token_budget.min(cfg.max_tokens)
}

/// Render MUP and KTP text for one history, KTP truncated to the budget
/// left after the never-truncated MUP and the separator.
#[allow(clippy::too_many_arguments)]
fn render_prompts(
    history: &[Basket],
    n_masks: usize,
    ds_names: &[String],
    catalog: &[String],
    kg: &KnowledgeGraph,
    name_table: &BTreeMap<String, String>,
    freq_of: &BTreeMap<String, f64>,
    tok_for_count: &Tokenizer,
    templates: &TemplateSet,
    cfg: &Config,
) -> Result<(PromptText, PromptText)> {
    let mup = render_mup(history, ds_names, n_masks, cfg.template_id, templates)?;
    let budget = prompt_budget(cfg);
    let mup_len = tok_for_count.count_tokens(&mup.text);
    if mup_len + 1 > budget {
        return Err(Error::InvalidArgument(format!(
            "user prompt needs {mup_len} tokens but the budget is {budget}; \
             raise token_budget or lower max_seq_len"
        )));
    }
    let ktp = if cfg.ablate_no_ktp {
        PromptText {
            text: String::new(),
            kind: crate::knowledge::PromptKind::Ktp,
        }
    } else {
        let aug = augment_kg(kg, history, catalog);
        let tree = build_knowledge_tree(&aug, SEQ_ENTITY, cfg.n_hops, cfg.beam_width, Some(freq_of))?;
        render_ktp(&tree, name_table, budget - mup_len - 1, tok_for_count)
    };
    Ok((mup, ktp))
}

/// Global training-item interaction counts, keyed by item id; drives the
/// beam ranking and is stored in the checkpoint.
fn train_frequencies(train: &BasketDataset) -> Vec<f64> {
    let mut counts = vec![0.0; train.n_items()];
    for seq in &train.sequences {
        for b in &seq.baskets {
            for &i in &b.items {
                counts[i] += 1.0;
            }
        }
    }
    counts
}

fn freq_map(catalog: &[String], counts: &[f64]) -> BTreeMap<String, f64> {
    catalog
        .iter()
        .zip(counts)
        .map(|(c, &v)| (c.clone(), v))
        .collect()
}

fn name_table(ds_catalog: &[String], ds_names: &[String]) -> BTreeMap<String, String> {
    ds_catalog
        .iter()
        .zip(ds_names)
        .map(|(c, n)| (c.clone(), n.clone()))
        .collect()
}

// ---- training --------------------------------------------------------------------

/// One line of the epoch log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_plm: f64,
    pub l_rec: f64,
    pub l_bi: f64,
    pub l_ii: f64,
    pub val_hr5: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Final similarity matrix and hypergraph incidence of the best
    /// snapshot, for the optional debug dump.
    pub pi: Option<Tensor>,
    pub m: Option<Tensor>,
}

/// Train the joint model and return the best-validation checkpoint.
pub fn train(
    train_set: &BasketDataset,
    val_set: &BasketDataset,
    kg: &KnowledgeGraph,
    cfg: &Config,
    templates: &TemplateSet,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.sequences.is_empty() {
        return Err(Error::EmptyDataset("training split has no users".into()));
    }
    if train_set.catalog != val_set.catalog {
        return Err(Error::InvalidArgument(
            "train and validation splits must share a catalog".into(),
        ));
    }
    let n_items = train_set.n_items();
    if !cfg.ablate_no_hypergcn && cfg.k_topk >= n_items {
        return Err(Error::InvalidArgument(format!(
            "k_topk {} must be below the catalog size {n_items}",
            cfg.k_topk
        )));
    }

    let counts = train_frequencies(train_set);
    let freqs = freq_map(&train_set.catalog, &counts);
    let names = name_table(&train_set.catalog, &train_set.names);
    let counting_tok = build_vocab(&[], 1, &[]);

    // pass 1: render all training prompt text and collect the corpus
    let mut corpus = Vec::new();
    let mut rendered = Vec::with_capacity(train_set.sequences.len());
    for seq in &train_set.sequences {
        if seq.baskets.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "training user {} has fewer than 2 baskets",
                seq.user_id
            )));
        }
        let history = &seq.baskets[..seq.baskets.len() - 1];
        let target = seq.baskets.last().unwrap();
        let (mup, ktp) = render_prompts(
            history,
            target.items.len(),
            &train_set.names,
            &train_set.catalog,
            kg,
            &names,
            &freqs,
            &counting_tok,
            templates,
            cfg,
        )?;
        let target_text = render_target(&target.items, &train_set.names);
        corpus.push(mup.text.clone());
        corpus.push(ktp.text.clone());
        corpus.push(target_text.clone());
        rendered.push((mup, ktp, target_text));
    }
    let tokenizer = build_vocab(&corpus, cfg.min_count, &train_set.names);

    let graph = build_bipartite(train_set)?;
    let adj = GcnAdjacency::new(&graph, cfg.d2);

    // pass 2: tokenize and cache supervision
    let mut caches = Vec::with_capacity(train_set.sequences.len());
    for (ux, seq) in train_set.sequences.iter().enumerate() {
        let history = &seq.baskets[..seq.baskets.len() - 1];
        let target = seq.baskets.last().unwrap();
        let (mup, ktp, target_text) = &rendered[ux];
        let (mup_ids, mask_positions) = tokenizer.tokenize(&mup.text);
        let (ktp_ids, _) = tokenizer.tokenize(&ktp.text);
        let mut target_ids = vec![BOS];
        target_ids.extend(tokenizer.tokenize(target_text).0);
        target_ids.push(EOS);
        caches.push(UserCache {
            mup_ids,
            mask_positions,
            ktp_ids,
            target_ids,
            positives: target.items.iter().copied().collect(),
            gamma: frequency_vector(history, n_items),
            baskets: seq.baskets.iter().map(|b| b.items.clone()).collect(),
            basket_nodes: graph.basket_node[ux].clone(),
        });
    }

    let val_k = 5usize.min(n_items.max(1));
    let val_caches = build_eval_caches(val_set, kg, &names, &freqs, &tokenizer, templates, cfg, val_k)?;

    let mut asm = ModelAssembly::build(
        cfg,
        tokenizer.vocab_size(),
        n_items,
        graph.n_baskets,
        cfg.seed,
    )?;
    let backbone: Vec<ParamId> = asm.seqenc.param_ids().to_vec();
    let backbone_set: BTreeSet<usize> = backbone.iter().map(|p| p.0).collect();
    let overhead: Vec<ParamId> = asm
        .params
        .ids()
        .filter(|p| !backbone_set.contains(&p.0))
        .collect();
    let mut opt = AdamW::new(vec![
        AdamGroup {
            lr: cfg.lr_backbone,
            weight_decay: cfg.weight_decay,
            params: backbone,
        },
        AdamGroup {
            lr: cfg.lr_overhead,
            weight_decay: cfg.weight_decay,
            params: overhead,
        },
    ]);
    let weights = LossWeights::from_config(cfg);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut history_log = Vec::with_capacity(cfg.epochs);
    // (val metric, epoch, checkpoint, similarity matrix, incidence matrix)
    type BestSnapshot = (f64, usize, Checkpoint, Option<Tensor>, Option<Tensor>);
    let mut best: Option<BestSnapshot> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..caches.len()).collect();
        shuffle(&mut order, derive_seed(cfg.seed, "order", &[epoch as u64]));

        let frozen_mask = if !cfg.ablate_no_hypergcn && cfg.hypergraph_rebuild == RebuildMode::Epoch
        {
            let probe = shared_forward(&asm, &asm.params, &adj, None, cfg, false)?;
            let pi_val = probe.g.value(probe.pi.expect("hypergraph enabled"));
            Some(topk_mask(&pi_val, cfg.k_topk)?)
        } else {
            None
        };

        let mut sums = [0.0f64; 4];
        for batch in order.chunks(cfg.batch_size) {
            let shared = shared_forward(&asm, &asm.params, &adj, frozen_mask.as_ref(), cfg, true)?;
            let v_items_val = shared.g.value(shared.v_items);
            let v_baskets_val = shared.g.value(shared.v_baskets);
            let pi_val = shared.pi.map(|p| shared.g.value(p));
            let v_prime_val = shared.g.value(shared.v_prime);

            let asm_ref = &asm;
            let caches_ref = &caches;
            let results: Result<Vec<UserOut>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&ux| {
                        user_forward(
                            asm_ref,
                            cfg,
                            &weights,
                            &caches_ref[ux],
                            &v_items_val,
                            &v_baskets_val,
                            pi_val.as_ref(),
                            &v_prime_val,
                            epoch,
                            ux,
                        )
                    })
                    .collect()
            });
            let results = results?;

            let mut store = GradStore::for_params(&asm.params);
            let mut cot_items: Option<Tensor> = None;
            let mut cot_baskets: Option<Tensor> = None;
            let mut cot_pi: Option<Tensor> = None;
            let mut cot_vprime: Option<Tensor> = None;
            for (out, &ux) in results.into_iter().zip(batch) {
                store.merge(out.grads);
                for (slot, c) in [
                    (&mut cot_items, out.cot_items),
                    (&mut cot_pi, out.cot_pi),
                    (&mut cot_vprime, out.cot_vprime),
                ] {
                    if let Some(c) = c {
                        match slot {
                            Some(acc) => acc.add_assign(&c),
                            none => *none = Some(c),
                        }
                    }
                }
                if let Some(rows) = out.cot_basket_rows {
                    let acc = cot_baskets
                        .get_or_insert_with(|| Tensor::zeros(v_baskets_val.shape()));
                    let cols = rows.cols();
                    for (ri, &node) in caches[ux].basket_nodes.iter().enumerate() {
                        let src = rows.row(ri);
                        let dst = &mut acc.data_mut()[node * cols..(node + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                for (s, p) in sums.iter_mut().zip(out.parts) {
                    *s += p;
                }
            }

            let mut seeds = Vec::new();
            if let Some(c) = cot_items {
                seeds.push((shared.v_items, c));
            }
            if let Some(c) = cot_baskets {
                seeds.push((shared.v_baskets, c));
            }
            if let (Some(p), Some(c)) = (shared.pi, cot_pi) {
                seeds.push((p, c));
            }
            if let Some(c) = cot_vprime {
                seeds.push((shared.v_prime, c));
            }
            if !seeds.is_empty() {
                let sg = shared.g.backward_seeded(&seeds)?;
                for pid in asm.params.ids() {
                    if let Some(gt) = sg.wrt(shared.bound[pid.0]) {
                        store.accumulate(pid, gt.clone());
                    }
                }
            }
            store.scale(1.0 / batch.len() as f64);
            opt.step(&mut asm.params, &mut store)?;
        }

        let n = caches.len() as f64;
        let means = [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n];
        for (name, m) in ["l_plm", "l_rec", "l_bi", "l_ii"].iter().zip(means) {
            if !m.is_finite() {
                return Err(Error::Diverged {
                    component: name.to_string(),
                    epoch,
                });
            }
        }

        // validation on the f32-rounded snapshot, exactly what a saved
        // checkpoint would reproduce
        let rounded = asm.rounded_params();
        let (v_prime_buf, pi_buf, m_buf) = derive_buffers(&asm, &rounded, &adj, cfg)?;
        let val_hr5 = validate_hr(
            &asm,
            &rounded,
            &v_prime_buf,
            &val_caches,
            val_k,
            cfg.hr_variant,
        )?;

        let log = EpochLog {
            epoch,
            l_plm: means[0],
            l_rec: means[1],
            l_bi: means[2],
            l_ii: means[3],
            val_hr5,
        };
        on_epoch(&log);
        history_log.push(log);

        let improved = best.as_ref().is_none_or(|(b, ..)| val_hr5 > *b);
        if improved {
            let ckpt = make_checkpoint(
                cfg,
                train_set,
                &tokenizer,
                templates,
                &rounded,
                &v_prime_buf,
                &counts,
            );
            best = Some((val_hr5, epoch, ckpt, pi_buf, m_buf));
        }
    }

    let (_, best_epoch, checkpoint, pi, m) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint,
        history: history_log,
        best_epoch,
        pi,
        m,
    })
}

fn shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    let mut rng = rng_from(seed);
    order.shuffle(&mut rng);
}

/// Compute the refined item embeddings (and similarity state) from a
/// parameter snapshot; the result is rounded to f32 like everything a
/// checkpoint stores.
fn derive_buffers(
    asm: &ModelAssembly,
    params: &ParamSet,
    adj: &GcnAdjacency,
    cfg: &Config,
) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
    let shared = shared_forward(asm, params, adj, None, cfg, false)?;
    let v_prime = round_f32(&shared.g.value(shared.v_prime));
    let pi = shared.pi.map(|p| shared.g.value(p));
    Ok((v_prime, pi, shared.m_value))
}

fn make_checkpoint(
    cfg: &Config,
    train_set: &BasketDataset,
    tokenizer: &Tokenizer,
    templates: &TemplateSet,
    rounded: &ParamSet,
    v_prime: &Tensor,
    train_counts: &[f64],
) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = rounded
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors.push(("derived.v_prime".into(), v_prime.clone()));
    tensors.push((
        "derived.train_freq".into(),
        round_f32(&Tensor::from_vec(vec![train_counts.len()], train_counts.to_vec())),
    ));
    Checkpoint {
        config: cfg.clone(),
        catalog: train_set.catalog.clone(),
        names: train_set.names.clone(),
        vocab_lines: tokenizer.to_lines(),
        templates: templates.clone(),
        tensors,
    }
}

// ---- evaluation ---------------------------------------------------------------

/// Prompt cache for one evaluated user at a fixed mask count.
#[derive(Debug, Clone)]
struct EvalCache {
    mup_ids: Vec<usize>,
    mask_positions: Vec<usize>,
    ktp_ids: Vec<usize>,
    gamma: FrequencyVector,
    truth: BTreeSet<usize>,
}

#[allow(clippy::too_many_arguments)]
fn build_eval_caches(
    split: &BasketDataset,
    kg: &KnowledgeGraph,
    names: &BTreeMap<String, String>,
    freqs: &BTreeMap<String, f64>,
    tokenizer: &Tokenizer,
    templates: &TemplateSet,
    cfg: &Config,
    n_masks: usize,
) -> Result<Vec<EvalCache>> {
    let mut out = Vec::new();
    for seq in &split.sequences {
        if seq.baskets.len() < 2 {
            continue;
        }
        let history = &seq.baskets[..seq.baskets.len() - 1];
        let (mup, ktp) = render_prompts(
            history,
            n_masks,
            &split.names,
            &split.catalog,
            kg,
            names,
            freqs,
            tokenizer,
            templates,
            cfg,
        )?;
        let (mup_ids, mask_positions) = tokenizer.tokenize(&mup.text);
        let (ktp_ids, _) = tokenizer.tokenize(&ktp.text);
        out.push(EvalCache {
            mup_ids,
            mask_positions,
            ktp_ids,
            gamma: frequency_vector(history, split.n_items()),
            truth: seq.baskets.last().unwrap().items.iter().copied().collect(),
        });
    }
    Ok(out)
}

/// Score all items for pre-tokenized prompts against a parameter snapshot.
fn score_from_tokens(
    asm: &ModelAssembly,
    params: &ParamSet,
    v_prime: &Tensor,
    cache: &EvalCache,
) -> Result<Vec<f64>> {
    let g = Graph::new();
    let bound = bind_params(&g, params, false);
    let (_, _, v_s) = asm.seqenc.encode(
        &g,
        &bound,
        &cache.mup_ids,
        &cache.ktp_ids,
        &cache.mask_positions,
        &mut Dropout::eval(),
    )?;
    let vp = g.constant(v_prime.clone());
    let scores = fbg_score(&g, &bound, &asm.overhead.gating, v_s, vp, &cache.gamma)?;
    Ok(g.value(scores).data().to_vec())
}

fn validate_hr(
    asm: &ModelAssembly,
    rounded: &ParamSet,
    v_prime: &Tensor,
    val_caches: &[EvalCache],
    k: usize,
    variant: crate::config::HrVariant,
) -> Result<f64> {
    if val_caches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for cache in val_caches {
        let scores = score_from_tokens(asm, rounded, v_prime, cache)?;
        let ranked = recommend_topn(&scores, k, None)?;
        total += crate::eval::hr_at_k(&ranked, &cache.truth, k, variant)?;
    }
    Ok(total / val_caches.len() as f64)
}

/// Everything needed to score users from a checkpoint.
pub struct EvalModel {
    pub asm: ModelAssembly,
    pub tokenizer: Tokenizer,
    pub templates: TemplateSet,
    pub v_prime: Tensor,
    pub train_freqs: BTreeMap<String, f64>,
    pub names: BTreeMap<String, String>,
    pub cfg: Config,
    pub catalog: Vec<String>,
    pub surface_names: Vec<String>,
}

impl EvalModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let asm = ModelAssembly::from_checkpoint(ckpt)?;
        let tokenizer = ckpt.tokenizer()?;
        let v_prime = ckpt
            .tensor("derived.v_prime")
            .ok_or_else(|| Error::Checkpoint("missing derived.v_prime".into()))?
            .clone();
        let freq_t = ckpt
            .tensor("derived.train_freq")
            .ok_or_else(|| Error::Checkpoint("missing derived.train_freq".into()))?;
        let train_freqs = freq_map(&ckpt.catalog, freq_t.data());
        Ok(EvalModel {
            tokenizer,
            templates: ckpt.templates.clone(),
            v_prime,
            train_freqs,
            names: name_table(&ckpt.catalog, &ckpt.names),
            cfg: ckpt.config.clone(),
            catalog: ckpt.catalog.clone(),
            surface_names: ckpt.names.clone(),
            asm,
        })
    }

    fn check_catalog(&self, split: &BasketDataset) -> Result<()> {
        if split.catalog != self.catalog {
            return Err(Error::Checkpoint(
                "dataset catalog does not match the checkpoint; \
                 evaluate with the same events and preprocessing"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Score every item for a basket history with `n_masks` mask slots.
    pub fn score_history(
        &self,
        history: &[Basket],
        n_masks: usize,
        kg: &KnowledgeGraph,
    ) -> Result<Vec<f64>> {
        let (mup, ktp) = render_prompts(
            history,
            n_masks,
            &self.surface_names,
            &self.catalog,
            kg,
            &self.names,
            &self.train_freqs,
            &self.tokenizer,
            &self.templates,
            &self.cfg,
        )?;
        let (mup_ids, mask_positions) = self.tokenizer.tokenize(&mup.text);
        let (ktp_ids, _) = self.tokenizer.tokenize(&ktp.text);
        let cache = EvalCache {
            mup_ids,
            mask_positions,
            ktp_ids,
            gamma: frequency_vector(history, self.catalog.len()),
            truth: BTreeSet::new(),
        };
        score_from_tokens(&self.asm, &self.asm.params, &self.v_prime, &cache)
    }
}

/// Evaluate a checkpoint over a split at the requested cutoffs.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    split: &BasketDataset,
    kg: &KnowledgeGraph,
    ks: &[usize],
    cold_only: bool,
    workers: usize,
) -> Result<MetricsReport> {
    let model = EvalModel::from_checkpoint(ckpt)?;
    model.check_catalog(split)?;
    for &k in ks {
        if k == 0 || k > split.n_items() {
            return Err(Error::InvalidArgument(format!(
                "cutoff {k} outside the catalog of {}",
                split.n_items()
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    // rank every (user, k) in parallel up front, then fold into the report
    let jobs: Vec<&UserSequence> = split.sequences.iter().collect();
    let rankings: Result<Vec<BTreeMap<usize, Vec<usize>>>> = pool.install(|| {
        jobs.par_iter()
            .map(|seq| {
                let mut per_k = BTreeMap::new();
                if seq.baskets.len() < 2 {
                    return Ok(per_k);
                }
                let history = &seq.baskets[..seq.baskets.len() - 1];
                for &k in ks {
                    let scores = model.score_history(history, k, kg)?;
                    per_k.insert(k, recommend_topn(&scores, k, None)?);
                }
                Ok(per_k)
            })
            .collect()
    });
    let rankings = rankings?;
    let by_user: BTreeMap<&str, &BTreeMap<usize, Vec<usize>>> = split
        .sequences
        .iter()
        .zip(&rankings)
        .map(|(s, r)| (s.user_id.as_str(), r))
        .collect();

    evaluate_rankings(
        split,
        ks,
        ckpt.config.hr_variant,
        cold_only,
        &ckpt.config.echo(),
        |seq, _, k| {
            Ok(by_user[seq.user_id.as_str()]
                .get(&k)
                .expect("ranking precomputed")
                .clone())
        },
    )
}

/// Rank the next basket for one user from their full history.
pub fn recommend_for_user(
    ckpt: &Checkpoint,
    seq: &UserSequence,
    split: &BasketDataset,
    kg: &KnowledgeGraph,
    n: usize,
    exclude_seen: bool,
) -> Result<Vec<(String, f64)>> {
    let model = EvalModel::from_checkpoint(ckpt)?;
    model.check_catalog(split)?;
    let scores = model.score_history(&seq.baskets, n, kg)?;
    let exclude = if exclude_seen {
        let seen: BTreeSet<usize> = seq
            .baskets
            .iter()
            .flat_map(|b| b.items.iter().copied())
            .collect();
        Some(seen)
    } else {
        None
    };
    let ranked = recommend_topn(&scores, n, exclude.as_ref())?;
    Ok(ranked
        .into_iter()
        .map(|i| (model.catalog[i].clone(), scores[i]))
        .collect())
}
