//! Compact encoder-decoder over prompt tokens.
//!
//! The encoder reads `[MUP; SEP; KTP]`, the rows at the mask positions are
//! mean-pooled into the sequence embedding, and a teacher-forced decoder
//! over the same memory yields the auto-regressive NLL that supervises the
//! backbone. Pre-norm residual blocks, learned positions, output projection
//! tied to the token embedding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::knowledge::{PAD, SEP};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

/// Transformer dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn from_config(cfg: &Config, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: cfg.d_model,
            n_enc_layers: cfg.n_enc_layers,
            n_dec_layers: cfg.n_dec_layers,
            n_heads: cfg.n_heads,
            ffn_mult: cfg.ffn_mult,
            max_tokens: cfg.max_tokens,
            vocab_size,
            dropout: cfg.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_tokens < 8 {
            return Err(Error::InvalidArgument("max_tokens must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct BlockNorm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: BlockNorm,
    attn: AttnParams,
    ln2: BlockNorm,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: BlockNorm,
    self_attn: AttnParams,
    ln2: BlockNorm,
    cross_attn: AttnParams,
    ln3: BlockNorm,
    ffn: FfnParams,
}

/// Parameter handles for the whole model; values live in the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct SeqEncoder {
    pub cfg: ModelConfig,
    tok_emb: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    enc_layers: Vec<EncLayer>,
    enc_final: BlockNorm,
    dec_layers: Vec<DecLayer>,
    dec_final: BlockNorm,
    all_ids: Vec<ParamId>,
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const NEG_INF: f64 = -1e30;

/// Per-forward dropout state; `None` rng means evaluation mode.
pub struct Dropout {
    pub p: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply(&mut self, g: &Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.p == 0.0 {
            return Ok(x);
        }
        let shape = g.shape_of(x);
        let keep = 1.0 - self.p;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul(x, g.constant(Tensor::from_vec(shape, data)))
    }
}

impl SeqEncoder {
    /// Register all parameters with seeded initialization.
    pub fn new(cfg: ModelConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut all_ids = Vec::new();
        let d = cfg.d_model;
        let mat = |params: &mut ParamSet, name: String, rows: usize, cols: usize,
                       ids: &mut Vec<ParamId>, rng: &mut ChaCha8Rng| {
            let id = params.add(name, Tensor::randn(&[rows, cols], INIT_STD, rng));
            ids.push(id);
            id
        };
        let norm = |params: &mut ParamSet, prefix: String, ids: &mut Vec<ParamId>| {
            let gamma = params.add(format!("{prefix}.gamma"), Tensor::ones(&[d]));
            let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(&[d]));
            ids.push(gamma);
            ids.push(beta);
            BlockNorm { gamma, beta }
        };

        let tok_emb = mat(params, "seqenc.tok_emb".into(), cfg.vocab_size, d, &mut all_ids, rng);
        let pos_enc = mat(params, "seqenc.pos_enc".into(), cfg.max_tokens, d, &mut all_ids, rng);
        let pos_dec = mat(params, "seqenc.pos_dec".into(), cfg.max_tokens, d, &mut all_ids, rng);

        let attn = |params: &mut ParamSet, prefix: String, ids: &mut Vec<ParamId>,
                        rng: &mut ChaCha8Rng| AttnParams {
            wq: mat(params, format!("{prefix}.wq"), d, d, ids, rng),
            wk: mat(params, format!("{prefix}.wk"), d, d, ids, rng),
            wv: mat(params, format!("{prefix}.wv"), d, d, ids, rng),
            wo: mat(params, format!("{prefix}.wo"), d, d, ids, rng),
        };
        let ffn = |params: &mut ParamSet, prefix: String, ids: &mut Vec<ParamId>,
                       rng: &mut ChaCha8Rng| {
            let hidden = d * cfg.ffn_mult;
            let w1 = mat(params, format!("{prefix}.w1"), d, hidden, ids, rng);
            let b1 = params.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
            ids.push(b1);
            let w2 = mat(params, format!("{prefix}.w2"), hidden, d, ids, rng);
            let b2 = params.add(format!("{prefix}.b2"), Tensor::zeros(&[d]));
            ids.push(b2);
            FfnParams { w1, b1, w2, b2 }
        };

        let mut enc_layers = Vec::with_capacity(cfg.n_enc_layers);
        for l in 0..cfg.n_enc_layers {
            enc_layers.push(EncLayer {
                ln1: norm(params, format!("seqenc.enc.{l}.ln1"), &mut all_ids),
                attn: attn(params, format!("seqenc.enc.{l}.attn"), &mut all_ids, rng),
                ln2: norm(params, format!("seqenc.enc.{l}.ln2"), &mut all_ids),
                ffn: ffn(params, format!("seqenc.enc.{l}.ffn"), &mut all_ids, rng),
            });
        }
        let enc_final = norm(params, "seqenc.enc.final".into(), &mut all_ids);

        let mut dec_layers = Vec::with_capacity(cfg.n_dec_layers);
        for l in 0..cfg.n_dec_layers {
            dec_layers.push(DecLayer {
                ln1: norm(params, format!("seqenc.dec.{l}.ln1"), &mut all_ids),
                self_attn: attn(params, format!("seqenc.dec.{l}.self"), &mut all_ids, rng),
                ln2: norm(params, format!("seqenc.dec.{l}.ln2"), &mut all_ids),
                cross_attn: attn(params, format!("seqenc.dec.{l}.cross"), &mut all_ids, rng),
                ln3: norm(params, format!("seqenc.dec.{l}.ln3"), &mut all_ids),
                ffn: ffn(params, format!("seqenc.dec.{l}.ffn"), &mut all_ids, rng),
            });
        }
        let dec_final = norm(params, "seqenc.dec.final".into(), &mut all_ids);

        Ok(SeqEncoder {
            cfg,
            tok_emb,
            pos_enc,
            pos_dec,
            enc_layers,
            enc_final,
            dec_layers,
            dec_final,
            all_ids,
        })
    }

    /// Parameter ids forming the backbone optimizer group.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.all_ids
    }

    fn ln(&self, g: &Graph, bound: &[Var], x: Var, n: &BlockNorm) -> Result<Var> {
        g.layer_norm(x, bound[n.gamma.0], bound[n.beta.0], LN_EPS)
    }

    fn attention(
        &self,
        g: &Graph,
        bound: &[Var],
        queries: Var,
        keys_values: Var,
        p: &AttnParams,
        causal: bool,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let q = g.matmul(queries, bound[p.wq.0])?;
        let k = g.matmul(keys_values, bound[p.wk.0])?;
        let v = g.matmul(keys_values, bound[p.wv.0])?;
        let tq = g.shape_of(q)[0];
        let tk = g.shape_of(k)[0];
        let causal_mask = if causal {
            let mut m = vec![0.0; tq * tk];
            for i in 0..tq {
                for j in (i + 1)..tk {
                    m[i * tk + j] = 1.0;
                }
            }
            Some(Tensor::from_vec(vec![tq, tk], m))
        } else {
            None
        };
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let mut scores = g.scalar_mul(1.0 / (dh as f64).sqrt(), g.matmul(qh, g.transpose(kh)?)?);
            if let Some(mask) = &causal_mask {
                scores = g.masked_fill(scores, mask, NEG_INF)?;
            }
            let probs = g.softmax(scores, 1);
            head_outputs.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat(&head_outputs, 1)?;
        g.matmul(ctx, bound[p.wo.0])
    }

    fn embed(&self, g: &Graph, bound: &[Var], tokens: &[usize], pos_table: ParamId) -> Result<Var> {
        let tok = g.embedding(bound[self.tok_emb.0], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.embedding(bound[pos_table.0], &positions)?;
        g.add(tok, pos)
    }

    /// Run the encoder over `[mup; SEP; ktp]`. Returns the memory `[T, d]`,
    /// the gathered mask rows and their mean pool `v_S`.
    pub fn encode(
        &self,
        g: &Graph,
        bound: &[Var],
        mup: &[usize],
        ktp: &[usize],
        mask_positions: &[usize],
        drop: &mut Dropout,
    ) -> Result<(Var, Var, Var)> {
        let total = mup.len() + 1 + ktp.len();
        if total > self.cfg.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "prompt length {total} exceeds max_tokens {}; re-budget the knowledge prompt",
                self.cfg.max_tokens
            )));
        }
        if mask_positions.is_empty() {
            return Err(Error::InvalidArgument(
                "no mask positions; MUP must contain [MASK] tokens".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(total);
        tokens.extend_from_slice(mup);
        tokens.push(SEP);
        tokens.extend_from_slice(ktp);
        for &mp in mask_positions {
            if mp >= mup.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask position {mp} outside the user prompt"
                )));
            }
        }

        let mut x = self.embed(g, bound, &tokens, self.pos_enc)?;
        x = drop.apply(g, x)?;
        for layer in &self.enc_layers {
            let normed = self.ln(g, bound, x, &layer.ln1)?;
            let attn = self.attention(g, bound, normed, normed, &layer.attn, false)?;
            x = g.add(x, drop.apply(g, attn)?)?;
            let normed = self.ln(g, bound, x, &layer.ln2)?;
            let ff = self.ffn_forward(g, bound, normed, &layer.ffn)?;
            x = g.add(x, drop.apply(g, ff)?)?;
        }
        let memory = self.ln(g, bound, x, &self.enc_final)?;
        let mask_rows = g.embedding(memory, mask_positions)?;
        let v_s = g.mean(mask_rows, Some(0));
        Ok((memory, mask_rows, v_s))
    }

    fn ffn_forward(&self, g: &Graph, bound: &[Var], x: Var, p: &FfnParams) -> Result<Var> {
        let h = g.relu(g.add(g.matmul(x, bound[p.w1.0])?, bound[p.b1.0])?);
        g.add(g.matmul(h, bound[p.w2.0])?, bound[p.b2.0])
    }

    /// Decoder logits for teacher forcing: input `target[..T-1]`, one logit
    /// row per predicted position.
    pub fn decoder_logits(
        &self,
        g: &Graph,
        bound: &[Var],
        memory: Var,
        target: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::InvalidArgument(
                "target must contain BOS, content and EOS".into(),
            ));
        }
        if target.len() - 1 > self.cfg.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "target length {} exceeds max_tokens",
                target.len()
            )));
        }
        let y_in = &target[..target.len() - 1];
        let mut x = self.embed(g, bound, y_in, self.pos_dec)?;
        x = drop.apply(g, x)?;
        for layer in &self.dec_layers {
            let normed = self.ln(g, bound, x, &layer.ln1)?;
            let self_attn = self.attention(g, bound, normed, normed, &layer.self_attn, true)?;
            x = g.add(x, drop.apply(g, self_attn)?)?;
            let normed = self.ln(g, bound, x, &layer.ln2)?;
            let cross = self.attention(g, bound, normed, memory, &layer.cross_attn, false)?;
            x = g.add(x, drop.apply(g, cross)?)?;
            let normed = self.ln(g, bound, x, &layer.ln3)?;
            let ff = self.ffn_forward(g, bound, normed, &layer.ffn)?;
            x = g.add(x, drop.apply(g, ff)?)?;
        }
        let h = self.ln(g, bound, x, &self.dec_final)?;
        // output projection tied to the token embedding
        g.matmul(h, g.transpose(bound[self.tok_emb.0])?)
    }

    /// Auto-regressive NLL of the target given the encoded prompts, summed
    /// over non-PAD target positions.
    pub fn plm_loss(
        &self,
        g: &Graph,
        bound: &[Var],
        memory: Var,
        target: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let logits = self.decoder_logits(g, bound, memory, target, drop)?;
        let y_out = &target[1..];
        let v = self.cfg.vocab_size;
        let logp = g.log(g.softmax(logits, 1));
        let mut hot = vec![0.0; y_out.len() * v];
        for (r, &y) in y_out.iter().enumerate() {
            if y != PAD {
                hot[r * v + y] = 1.0;
            }
        }
        let picked = g.mul(logp, g.constant(Tensor::from_vec(vec![y_out.len(), v], hot)))?;
        Ok(g.scalar_mul(-1.0, g.sum(picked, None)))
    }

    /// Greedy teacher-forced predictions, one token per target position.
    pub fn predictions(
        &self,
        g: &Graph,
        bound: &[Var],
        memory: Var,
        target: &[usize],
    ) -> Result<Vec<usize>> {
        let logits = self.decoder_logits(g, bound, memory, target, &mut Dropout::eval())?;
        let lv = g.value(logits);
        let mut out = Vec::with_capacity(lv.rows());
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Bind every parameter onto a graph as leaves.
pub fn bind_params(g: &Graph, params: &ParamSet, requires_grad: bool) -> Vec<Var> {
    params
        .ids()
        .map(|id| g.leaf(params.get(id).clone(), requires_grad))
        .collect()
}
