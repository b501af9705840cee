//! Multi-item relation encoder.
//!
//! Items and baskets get initial embeddings from a GCN over the
//! basket-item bipartite graph. A bank of expert projections scores
//! pairwise item similarity (cosine mapped to [0,1], averaged over
//! experts), the top-k neighborhoods of the similarity matrix define
//! hyperedges, and convolution over the hypergraph refines the item
//! embeddings. Two pairwise ranking losses supervise the encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::DegreeMode;
use crate::corpus::BasketDataset;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Basket-item incidence structure over the training split. Basket nodes
/// are numbered per (user, position) in sequence order.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub n_baskets: usize,
    pub n_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub basket_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
    /// basket node id per (sequence index, basket position)
    pub basket_node: Vec<Vec<usize>>,
}

pub fn build_bipartite(ds: &BasketDataset) -> Result<BipartiteGraph> {
    if ds.sequences.is_empty() {
        return Err(Error::EmptyDataset("no sequences for bipartite graph".into()));
    }
    let n_items = ds.n_items();
    let mut edges = Vec::new();
    let mut basket_node = Vec::with_capacity(ds.sequences.len());
    let mut next = 0usize;
    for seq in &ds.sequences {
        let mut nodes = Vec::with_capacity(seq.baskets.len());
        for b in &seq.baskets {
            for &ix in &b.items {
                edges.push((next, ix));
            }
            nodes.push(next);
            next += 1;
        }
        basket_node.push(nodes);
    }
    let mut basket_degree = vec![0usize; next];
    let mut item_degree = vec![0usize; n_items];
    for &(b, i) in &edges {
        basket_degree[b] += 1;
        item_degree[i] += 1;
    }
    Ok(BipartiteGraph {
        n_baskets: next,
        n_items,
        edges,
        basket_degree,
        item_degree,
        basket_node,
    })
}

/// Precomputed symmetric-normalized adjacency and isolation masks for the
/// GCN forward pass.
#[derive(Debug, Clone)]
pub struct GcnAdjacency {
    /// [|I|, |B|]: messages from baskets to items, `1/sqrt(d_i d_b)`.
    pub items_from_baskets: Tensor,
    /// [|B|, |I|]: messages from items to baskets.
    pub baskets_from_items: Tensor,
    /// [|I|, d2] mask, 1 where the item has no edges (keeps layer-0 value).
    pub isolated_items: Tensor,
    /// Complement of `isolated_items`.
    pub active_items: Tensor,
}

impl GcnAdjacency {
    pub fn new(graph: &BipartiteGraph, d2: usize) -> Self {
        let (ni, nb) = (graph.n_items, graph.n_baskets);
        let mut ib = vec![0.0; ni * nb];
        let mut bi = vec![0.0; nb * ni];
        for &(b, i) in &graph.edges {
            let w = 1.0 / ((graph.item_degree[i] * graph.basket_degree[b]) as f64).sqrt();
            ib[i * nb + b] = w;
            bi[b * ni + i] = w;
        }
        let mut iso = vec![0.0; ni * d2];
        let mut act = vec![1.0; ni * d2];
        for i in 0..ni {
            if graph.item_degree[i] == 0 {
                for k in 0..d2 {
                    iso[i * d2 + k] = 1.0;
                    act[i * d2 + k] = 0.0;
                }
            }
        }
        GcnAdjacency {
            items_from_baskets: Tensor::from_vec(vec![ni, nb], ib),
            baskets_from_items: Tensor::from_vec(vec![nb, ni], bi),
            isolated_items: Tensor::from_vec(vec![ni, d2], iso),
            active_items: Tensor::from_vec(vec![ni, d2], act),
        }
    }
}

/// GCN layer outputs for both node families.
#[derive(Debug, Clone, Copy)]
pub struct GcnOut {
    pub items: Var,
    pub baskets: Var,
}

/// Run `gcn_ws.len()` convolution layers from the embedding tables.
/// Each layer: `h <- relu(W_l * agg(neighbors) + h)` with symmetric
/// normalization; isolated items keep their current embedding.
pub fn gcn_forward(
    g: &Graph,
    item_table: Var,
    basket_table: Var,
    gcn_ws: &[Var],
    adj: &GcnAdjacency,
) -> Result<GcnOut> {
    let n_ib = g.constant(adj.items_from_baskets.clone());
    let n_bi = g.constant(adj.baskets_from_items.clone());
    let iso = g.constant(adj.isolated_items.clone());
    let act = g.constant(adj.active_items.clone());
    let mut items = item_table;
    let mut baskets = basket_table;
    for &w in gcn_ws {
        let item_msg = g.matmul(n_ib, baskets)?;
        let basket_msg = g.matmul(n_bi, items)?;
        let item_new = g.relu(g.add(g.matmul(item_msg, w)?, items)?);
        let basket_new = g.relu(g.add(g.matmul(basket_msg, w)?, baskets)?);
        // isolated items bypass the update entirely
        items = g.add(g.mul(iso, items)?, g.mul(act, item_new)?)?;
        baskets = basket_new;
    }
    Ok(GcnOut { items, baskets })
}

/// Item similarity through an expert bank: per expert, cosine of the
/// projected embeddings mapped to [0,1]; aggregated as the mean. Rows
/// projecting to zero norm are treated as cosine 0 deterministically.
pub fn moe_similarity(g: &Graph, v_items: Var, experts: &[Var]) -> Result<Var> {
    if experts.is_empty() {
        return Err(Error::InvalidArgument("expert bank is empty".into()));
    }
    let n = g.shape_of(v_items)[0];
    let half = g.constant(Tensor::filled(&[n, n], 0.5));
    let mut acc: Option<Var> = None;
    for &w in experts {
        let proj = g.matmul(v_items, w)?;
        let d3 = g.shape_of(proj)[1];
        let sq = g.mul(proj, proj)?;
        let norms = g.sqrt(g.sum(sq, Some(1)));
        let zero_mask = g.value(norms).map(|v| if v == 0.0 { 1.0 } else { 0.0 });
        let safe = g.masked_fill(norms, &zero_mask, 1.0)?;
        let safe_col = g.reshape(safe, &[n, 1])?;
        let denom = g.matmul(safe_col, g.constant(Tensor::ones(&[1, d3])))?;
        let unit = g.div(proj, denom)?;
        let cos = g.matmul(unit, g.transpose(unit)?)?;
        let pi_n = g.add(g.scalar_mul(0.5, cos), half)?;
        acc = Some(match acc {
            None => pi_n,
            Some(a) => g.add(a, pi_n)?,
        });
    }
    Ok(g.scalar_mul(1.0 / experts.len() as f64, acc.unwrap()))
}

/// Detached top-k hyperedge selection over a similarity matrix.
///
/// Column `j` of the mask marks the hyperedge generated by item `j`: its
/// `k` most similar other items (ties broken by index) plus itself.
/// Gradients flow through the retained similarity values only.
pub fn topk_mask(pi: &Tensor, k: usize) -> Result<Tensor> {
    let n = pi.shape()[0];
    if pi.rank() != 2 || pi.shape()[1] != n {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix must be square, got {:?}",
            pi.shape()
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "top-k must satisfy 1 <= k < |I|, got k={k} |I|={n}"
        )));
    }
    let mut mask = vec![0.0; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for j in 0..n {
        order.clear();
        order.extend((0..n).filter(|&i| i != j));
        order.sort_by(|&a, &b| {
            pi.at2(b, j)
                .partial_cmp(&pi.at2(a, j))
                .unwrap()
                .then(a.cmp(&b))
        });
        mask[j * n + j] = 1.0;
        for &i in order.iter().take(k) {
            mask[i * n + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(vec![n, n], mask))
}

/// Weighted hypergraph incidence with its degree vectors (detached view,
/// used for dumps and direct inspection).
#[derive(Debug, Clone)]
pub struct HypergraphAdjacency {
    pub m: Tensor,
    pub d_v: Vec<f64>,
    pub d_e: Vec<f64>,
}

impl HypergraphAdjacency {
    pub fn from_similarity(pi: &Tensor, k: usize) -> Result<Self> {
        let mask = topk_mask(pi, k)?;
        let n = pi.shape()[0];
        let mut m = vec![0.0; n * n];
        for ix in 0..n * n {
            m[ix] = pi.data()[ix] * mask.data()[ix];
        }
        let m = Tensor::from_vec(vec![n, n], m);
        let mut d_v = vec![0.0; n];
        let mut d_e = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                d_v[i] += m.at2(i, j);
                d_e[j] += m.at2(i, j);
            }
        }
        Ok(HypergraphAdjacency { m, d_v, d_e })
    }

    /// The propagation operator `P = D_v^-1 M D_e^-1 M^T`.
    pub fn propagation(&self) -> Tensor {
        let n = self.d_v.len();
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for e in 0..n {
                    acc += self.m.at2(i, e) * self.m.at2(j, e) / self.d_e[e];
                }
                p[i * n + j] = acc / self.d_v[i];
            }
        }
        Tensor::from_vec(vec![n, n], p)
    }
}

/// Hypergraph convolution `H <- FFN(D_v^-1 M D_e^-1 M^T H)`, one linear
/// layer plus ReLU per hop. Degrees are weighted sums of the incidence by
/// default; `identity_ffn` exposes the bare propagation for verification.
#[allow(clippy::too_many_arguments)]
pub fn hypergraph_conv(
    g: &Graph,
    m: Var,
    h0: Var,
    ffn_ws: &[Var],
    ffn_bs: &[Var],
    degree_mode: DegreeMode,
    identity_ffn: bool,
) -> Result<Var> {
    let n = g.shape_of(m)[0];
    let ones_row = g.constant(Tensor::ones(&[1, n]));
    let ones_col = g.constant(Tensor::ones(&[n, 1]));

    let (dv, de) = match degree_mode {
        DegreeMode::Weighted => (g.sum(m, Some(1)), g.sum(m, Some(0))),
        DegreeMode::Count => {
            let mv = g.value(m);
            let mut cv = vec![0.0; n];
            let mut ce = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    if mv.at2(i, j) != 0.0 {
                        cv[i] += 1.0;
                        ce[j] += 1.0;
                    }
                }
            }
            (
                g.constant(Tensor::from_vec(vec![n], cv)),
                g.constant(Tensor::from_vec(vec![n], ce)),
            )
        }
    };
    for (label, d) in [("vertex", dv), ("hyperedge", de)] {
        if g.value(d).data().contains(&0.0) {
            return Err(Error::InvalidArgument(format!(
                "zero {label} degree in hypergraph; self-inclusion violated"
            )));
        }
    }

    let ones_n = g.constant(Tensor::ones(&[n]));
    let rv = g.reshape(g.div(ones_n, dv)?, &[n, 1])?;
    let re = g.reshape(g.div(ones_n, de)?, &[1, n])?;
    let row_scale = g.matmul(rv, ones_row)?;
    let col_scale = g.matmul(ones_col, re)?;
    let a = g.mul(m, row_scale)?; // D_v^-1 M
    let b = g.mul(m, col_scale)?; // M D_e^-1
    let p = g.matmul(a, g.transpose(b)?)?;

    let mut h = h0;
    for l in 0..ffn_ws.len() {
        let propagated = g.matmul(p, h)?;
        h = if identity_ffn {
            propagated
        } else {
            g.relu(g.add(g.matmul(propagated, ffn_ws[l])?, ffn_bs[l])?)
        };
    }
    Ok(h)
}

// ---- sampling ----------------------------------------------------------------

/// Pair sampling flavor for the ranking losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    BasketItem,
    ItemItem,
}

/// The `k`-th element of the complement of `sorted_items` in `0..catalog`.
fn nth_complement(sorted_items: &[usize], k: usize) -> usize {
    let mut v = k;
    for &it in sorted_items {
        if it <= v {
            v += 1;
        } else {
            break;
        }
    }
    v
}

/// One (anchor, positive, negative) draw. Basket-item mode leaves the
/// anchor slot at the positive item; item-item mode with a singleton
/// basket returns `None` (the loss term is skipped).
pub fn sample_pos_neg(
    basket: &[usize],
    catalog_size: usize,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(usize, usize, usize)>> {
    if basket.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from empty basket".into()));
    }
    if basket.len() >= catalog_size {
        return Err(Error::InvalidArgument(
            "basket covers the whole catalog; no negatives".into(),
        ));
    }
    let neg = nth_complement(basket, rng.gen_range(0..catalog_size - basket.len()));
    match mode {
        SampleMode::BasketItem => {
            let pos = basket[rng.gen_range(0..basket.len())];
            Ok(Some((pos, pos, neg)))
        }
        SampleMode::ItemItem => {
            if basket.len() < 2 {
                return Ok(None);
            }
            let ai = rng.gen_range(0..basket.len());
            let mut pos_ix = rng.gen_range(0..basket.len() - 1);
            if pos_ix >= ai {
                pos_ix += 1;
            }
            Ok(Some((basket[ai], basket[pos_ix], neg)))
        }
    }
}

/// Item-item draws for every anchor of the basket; `None` for singletons.
pub fn sample_ii_all(
    basket: &[usize],
    catalog_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<(usize, usize, usize)>>> {
    if basket.len() < 2 {
        return Ok(None);
    }
    if basket.len() >= catalog_size {
        return Err(Error::InvalidArgument(
            "basket covers the whole catalog; no negatives".into(),
        ));
    }
    let mut out = Vec::with_capacity(basket.len());
    for (ai, &anchor) in basket.iter().enumerate() {
        let mut pos_ix = rng.gen_range(0..basket.len() - 1);
        if pos_ix >= ai {
            pos_ix += 1;
        }
        let neg = nth_complement(basket, rng.gen_range(0..catalog_size - basket.len()));
        out.push((anchor, basket[pos_ix], neg));
    }
    Ok(Some(out))
}

// ---- ranking losses -------------------------------------------------------------

/// Basket-item ranking loss: `-sum_b log sigmoid(v_b.v_pos - v_b.v_neg)`.
/// Rows of the three matrices are aligned per sampled basket.
pub fn loss_bi(g: &Graph, v_baskets: Var, v_pos: Var, v_neg: Var) -> Result<Var> {
    let diff = g.mul(v_baskets, g.sub(v_pos, v_neg)?)?;
    let margins = g.sum(diff, Some(1));
    let term = g.log(g.sigmoid(margins));
    Ok(g.scalar_mul(-1.0, g.sum(term, None)))
}

/// Item-item ranking loss over anchored similarity differences, each term
/// weighted by `1/|b|` of its source basket.
pub fn loss_ii(g: &Graph, pi: Var, samples: &[(usize, usize, usize)], weights: &[f64]) -> Result<Var> {
    if samples.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = g.shape_of(pi)[0];
    let anchors: Vec<usize> = samples.iter().map(|s| s.0).collect();
    let rows = g.embedding(pi, &anchors)?;
    let a = samples.len();
    let mut pos_hot = vec![0.0; a * n];
    let mut neg_hot = vec![0.0; a * n];
    for (r, &(_, p, q)) in samples.iter().enumerate() {
        pos_hot[r * n + p] = 1.0;
        neg_hot[r * n + q] = 1.0;
    }
    let pos = g.sum(g.mul(rows, g.constant(Tensor::from_vec(vec![a, n], pos_hot)))?, Some(1));
    let neg = g.sum(g.mul(rows, g.constant(Tensor::from_vec(vec![a, n], neg_hot)))?, Some(1));
    let term = g.log(g.sigmoid(g.sub(pos, neg)?));
    let weighted = g.mul(term, g.constant(Tensor::from_vec(vec![a], weights.to_vec())))?;
    Ok(g.scalar_mul(-1.0, g.sum(weighted, None)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{preprocess, InteractionEvent, PreprocessRules};
    use crate::rng::rng_from;

    fn tiny_dataset() -> BasketDataset {
        let mut events = Vec::new();
        for (t, items) in [["a", "b"], ["b", "c"], ["a", "c"], ["a", "b"]]
            .iter()
            .enumerate()
        {
            for item in items {
                events.push(InteractionEvent {
                    user_id: "u1".into(),
                    timestamp: t as i64,
                    item_id: item.to_string(),
                });
            }
        }
        preprocess(&events, &PreprocessRules::default()).unwrap()
    }

    #[test]
    fn bipartite_counts() {
        let ds = tiny_dataset();
        let bg = build_bipartite(&ds).unwrap();
        assert_eq!(bg.n_baskets, 4);
        assert_eq!(bg.edges.len(), 8);
        // item b appears in baskets 0, 1, 3
        let b = ds.item_index("b").unwrap();
        assert_eq!(bg.item_degree[b], 3);
    }

    #[test]
    fn gcn_zero_layers_returns_tables() {
        let ds = tiny_dataset();
        let bg = build_bipartite(&ds).unwrap();
        let adj = GcnAdjacency::new(&bg, 4);
        let mut rng = rng_from(1);
        let g = Graph::new();
        let items = g.leaf(Tensor::randn(&[bg.n_items, 4], 1.0, &mut rng), true);
        let baskets = g.leaf(Tensor::randn(&[bg.n_baskets, 4], 1.0, &mut rng), true);
        let out = gcn_forward(&g, items, baskets, &[], &adj).unwrap();
        assert_eq!(g.value(out.items), g.value(items));
        assert_eq!(g.value(out.baskets), g.value(baskets));
    }

    #[test]
    fn single_basket_spreads_identical_messages() {
        // one basket {0,1}: both items must aggregate the same message
        let bg = BipartiteGraph {
            n_baskets: 1,
            n_items: 2,
            edges: vec![(0, 0), (0, 1)],
            basket_degree: vec![2],
            item_degree: vec![1, 1],
            basket_node: vec![vec![0]],
        };
        let d2 = 3;
        let adj = GcnAdjacency::new(&bg, d2);
        let g = Graph::new();
        // identical item init so the self terms match too
        let row: Vec<f64> = vec![0.3, -0.2, 0.7];
        let mut items = row.clone();
        items.extend_from_slice(&row);
        let items = g.leaf(Tensor::from_vec(vec![2, d2], items), true);
        let baskets = g.leaf(Tensor::from_vec(vec![1, d2], vec![1.0, 2.0, 3.0]), true);
        let w = g.leaf(Tensor::randn(&[d2, d2], 0.5, &mut rng_from(4)), true);
        let out = gcn_forward(&g, items, baskets, &[w], &adj).unwrap();
        let v = g.value(out.items);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn gcn_single_layer_matches_hand_propagation() {
        // 3-node graph: basket 0 over items {0,1}; message to each item is
        // h_b / sqrt(d_i * d_b) = h_b / sqrt(2)
        let bg = BipartiteGraph {
            n_baskets: 1,
            n_items: 2,
            edges: vec![(0, 0), (0, 1)],
            basket_degree: vec![2],
            item_degree: vec![1, 1],
            basket_node: vec![vec![0]],
        };
        let d2 = 2;
        let adj = GcnAdjacency::new(&bg, d2);
        let g = Graph::new();
        let h_items = Tensor::from_vec(vec![2, d2], vec![0.1, -0.4, 0.7, 0.2]);
        let h_basket = Tensor::from_vec(vec![1, d2], vec![1.0, -2.0]);
        let w = Tensor::from_vec(vec![d2, d2], vec![0.5, 0.0, 0.0, -1.0]);
        let items = g.leaf(h_items.clone(), true);
        let baskets = g.leaf(h_basket.clone(), true);
        let wv = g.leaf(w.clone(), true);
        let out = gcn_forward(&g, items, baskets, &[wv], &adj).unwrap();
        let got = g.value(out.items);
        let s = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let msg = [h_basket.data()[0] * s, h_basket.data()[1] * s];
            let expect = [
                (msg[0] * w.at2(0, 0) + msg[1] * w.at2(1, 0) + h_items.at2(i, 0)).max(0.0),
                (msg[0] * w.at2(0, 1) + msg[1] * w.at2(1, 1) + h_items.at2(i, 1)).max(0.0),
            ];
            assert!((got.at2(i, 0) - expect[0]).abs() < 1e-12);
            assert!((got.at2(i, 1) - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn count_degrees_use_nonzero_counts() {
        let mut rng = rng_from(14);
        let g = Graph::new();
        let v = g.leaf(Tensor::randn(&[5, 3], 1.0, &mut rng), true);
        let w = g.leaf(Tensor::randn(&[3, 3], 1.0, &mut rng), true);
        let pi = moe_similarity(&g, v, &[w]).unwrap();
        let mask = topk_mask(&g.value(pi), 2).unwrap();
        let m = g.mul(pi, g.constant(mask.clone())).unwrap();
        let h0 = g.leaf(Tensor::randn(&[5, 3], 1.0, &mut rng), true);
        let dummy = g.leaf(Tensor::zeros(&[3, 3]), true);
        let out = hypergraph_conv(&g, m, h0, &[dummy], &[dummy], DegreeMode::Count, true).unwrap();

        // oracle with count degrees: every column has k+1 = 3 members
        let mv = g.value(m);
        let hv = g.value(h0);
        let n = 5;
        let mut edge = vec![0.0; n * 3];
        for e in 0..n {
            for i in 0..n {
                for c in 0..3 {
                    edge[e * 3 + c] += mv.at2(i, e) * hv.at2(i, c);
                }
            }
            for c in 0..3 {
                edge[e * 3 + c] /= 3.0;
            }
        }
        let counts_v: Vec<f64> = (0..n)
            .map(|i| (0..n).filter(|&j| mask.at2(i, j) != 0.0).count() as f64)
            .collect();
        for i in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                for e in 0..n {
                    acc += mv.at2(i, e) * edge[e * 3 + c];
                }
                acc /= counts_v[i];
                assert!((g.value(out).at2(i, c) - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isolated_item_keeps_layer0_embedding() {
        let bg = BipartiteGraph {
            n_baskets: 1,
            n_items: 3,
            edges: vec![(0, 0), (0, 1)],
            basket_degree: vec![2],
            item_degree: vec![1, 1, 0],
            basket_node: vec![vec![0]],
        };
        let adj = GcnAdjacency::new(&bg, 2);
        let g = Graph::new();
        let init = Tensor::from_vec(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, -0.5, -0.6]);
        let items = g.leaf(init.clone(), true);
        let baskets = g.leaf(Tensor::ones(&[1, 2]), true);
        let w = g.leaf(Tensor::randn(&[2, 2], 0.5, &mut rng_from(5)), true);
        let out = gcn_forward(&g, items, baskets, &[w], &adj).unwrap();
        assert_eq!(g.value(out.items).row(2), init.row(2));
    }

    fn moe_of(v: Tensor, experts: Vec<Tensor>) -> Tensor {
        let g = Graph::new();
        let vi = g.leaf(v, true);
        let ws: Vec<Var> = experts.into_iter().map(|w| g.leaf(w, true)).collect();
        let pi = moe_similarity(&g, vi, &ws).unwrap();
        g.value(pi)
    }

    #[test]
    fn moe_self_similarity_is_one_and_opposite_is_zero() {
        let v = Tensor::from_vec(vec![2, 2], vec![1.0, 0.5, -1.0, -0.5]);
        let pi = moe_of(v, vec![Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])]);
        assert!((pi.at2(0, 0) - 1.0).abs() < 1e-12);
        assert!((pi.at2(1, 1) - 1.0).abs() < 1e-12);
        // v1 = -v0: cosine -1 maps to 0
        assert!(pi.at2(0, 1).abs() < 1e-12);
    }

    #[test]
    fn moe_aggregates_experts_by_mean() {
        let mut rng = rng_from(6);
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w1 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let w2 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let a = moe_of(v.clone(), vec![w1.clone()]);
        let b = moe_of(v.clone(), vec![w2.clone()]);
        let both = moe_of(v, vec![w1, w2]);
        for ix in 0..both.numel() {
            let mean = 0.5 * (a.data()[ix] + b.data()[ix]);
            assert!((both.data()[ix] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_zero_row_maps_to_half() {
        // first item embeds to zero: cosine defined as 0 => similarity 0.5
        let v = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 2.0]);
        let pi = moe_of(v, vec![Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])]);
        assert_eq!(pi.at2(0, 1), 0.5);
        assert_eq!(pi.at2(0, 0), 0.5);
    }

    #[test]
    fn topk_keeps_everything_when_k_is_full() {
        let mut rng = rng_from(7);
        let g = Graph::new();
        let v = g.leaf(Tensor::randn(&[5, 3], 1.0, &mut rng), true);
        let w = g.leaf(Tensor::randn(&[3, 3], 1.0, &mut rng), true);
        let pi = moe_similarity(&g, v, &[w]).unwrap();
        let pv = g.value(pi);
        let mask = topk_mask(&pv, 4).unwrap();
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn topk_column_selection_and_ties() {
        let pi = Tensor::from_vec(
            vec![4, 4],
            vec![
                1.0, 0.9, 0.5, 0.5, //
                0.9, 1.0, 0.1, 0.5, //
                0.5, 0.1, 1.0, 0.2, //
                0.5, 0.5, 0.2, 1.0,
            ],
        );
        let mask = topk_mask(&pi, 1).unwrap();
        // column 0: keep self plus the best neighbor (item 1)
        assert_eq!(mask.at2(0, 0), 1.0);
        assert_eq!(mask.at2(1, 0), 1.0);
        assert_eq!(mask.at2(2, 0), 0.0);
        // column 2: ties at 0.5 between items 0 and 3 resolve to index 0
        assert_eq!(mask.at2(0, 2), 1.0);
        assert_eq!(mask.at2(3, 2), 0.0);
        assert!(topk_mask(&pi, 0).is_err());
        assert!(topk_mask(&pi, 4).is_err());
    }

    #[test]
    fn propagation_rows_sum_to_one() {
        let mut rng = rng_from(8);
        for _ in 0..20 {
            let n = 6;
            let raw = Tensor::randn(&[n, n], 1.0, &mut rng).map(sigmoid_like);
            // symmetrize with unit diagonal, as the MoE output guarantees
            let mut sym = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = if i == j {
                        1.0
                    } else {
                        0.5 * (raw.at2(i, j) + raw.at2(j, i))
                    };
                }
            }
            let pi = Tensor::from_vec(vec![n, n], sym);
            let adj = HypergraphAdjacency::from_similarity(&pi, 3).unwrap();
            let p = adj.propagation();
            for i in 0..n {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
            }
        }
    }

    fn sigmoid_like(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn conv_zero_layers_is_identity_and_constant_rows_stay_constant() {
        let mut rng = rng_from(9);
        let n = 5;
        let g = Graph::new();
        let v = g.leaf(Tensor::randn(&[n, 3], 1.0, &mut rng), true);
        let w = g.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng), true);
        let pi = moe_similarity(&g, v, &[w]).unwrap();
        let mask = topk_mask(&g.value(pi), 2).unwrap();
        let m = g.mul(pi, g.constant(mask)).unwrap();
        let h0 = g.leaf(Tensor::randn(&[n, 3], 1.0, &mut rng), true);

        let same = hypergraph_conv(&g, m, h0, &[], &[], DegreeMode::Weighted, false).unwrap();
        assert_eq!(g.value(same), g.value(h0));

        // identity FFN on a constant embedding: row-stochastic P keeps it
        let c = g.leaf(Tensor::filled(&[n, 3], 0.4), true);
        let ffn = g.leaf(Tensor::zeros(&[3, 3]), true); // ignored in identity mode
        let out = hypergraph_conv(&g, m, c, &[ffn, ffn], &[ffn, ffn], DegreeMode::Weighted, true)
            .unwrap();
        for v in g.value(out).data() {
            assert!((v - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn bi_sampling_forced_positive_and_negative_range() {
        let mut rng = rng_from(10);
        for _ in 0..50 {
            let s = sample_pos_neg(&[0], 3, SampleMode::BasketItem, &mut rng)
                .unwrap()
                .unwrap();
            assert_eq!(s.1, 0);
            assert!(s.2 == 1 || s.2 == 2);
        }
    }

    #[test]
    fn ii_singleton_is_skipped() {
        let mut rng = rng_from(11);
        let s = sample_pos_neg(&[2], 5, SampleMode::ItemItem, &mut rng).unwrap();
        assert!(s.is_none());
        assert!(sample_ii_all(&[2], 5, &mut rng).unwrap().is_none());
    }

    #[test]
    fn ii_distribution_is_roughly_uniform() {
        // chi-square over positive picks for anchor 0 of basket {0,1,2}
        let mut rng = rng_from(12);
        let mut counts = [0usize; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let all = sample_ii_all(&[0, 1, 2], 10, &mut rng).unwrap().unwrap();
            let (_, pos, neg) = all[0];
            assert!(pos == 1 || pos == 2);
            assert!(neg >= 3);
            counts[pos - 1] += 1;
        }
        let expected = draws as f64 / 2.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 1 dof; 3 sigma-ish cutoff
        assert!(chi2 < 9.0, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn loss_bi_reference_values() {
        let g = Graph::new();
        let vb = g.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]), true);
        let same = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.7, 0.2]), true);
        let l = loss_bi(&g, vb, same, same).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let pos = g.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]), true);
        let neg = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]), true);
        let l = loss_bi(&g, vb, pos, neg).unwrap();
        let expected = -(sigmoid_like(1.0)).ln(); // 0.3132616875182229
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn loss_ii_reference_values() {
        let g = Graph::new();
        // pi with pi[0,1]=1, pi[0,2]=0
        let pi = g.leaf(
            Tensor::from_vec(vec![3, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.5, 0.0, 0.5, 1.0]),
            true,
        );
        let l = loss_ii(&g, pi, &[(0, 1, 2)], &[1.0]).unwrap();
        let expected = -(sigmoid_like(1.0)).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        // equal similarities give ln 2 per anchor; two anchors at weight 1/2
        let l = loss_ii(&g, pi, &[(1, 0, 0), (2, 1, 1)], &[0.5, 0.5]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
