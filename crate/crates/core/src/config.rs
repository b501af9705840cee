//! Flat `key=value` configuration covering every tunable in the pipeline.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected, and
//! [`Config::echo`] emits the full canonical listing so configs diff and
//! round-trip cleanly.

use std::path::Path;

use crate::corpus::PreprocessRules;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RebuildMode {
    Epoch,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeMode {
    Weighted,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HrVariant {
    Recall,
    AnyHit,
}

/// Every knob in one place; see `Config::default` for the shipped values.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // preprocessing
    pub min_basket_size: usize,
    pub max_basket_size: usize,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    // split
    pub ratio_train: f64,
    pub ratio_val: f64,
    pub ratio_test: f64,
    // sequence encoder
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    // relation encoder
    pub d2: usize,
    pub d3: usize,
    pub n_experts: usize,
    pub l1_layers: usize,
    pub l2_layers: usize,
    pub k_topk: usize,
    pub hypergraph_rebuild: RebuildMode,
    pub degree_mode: DegreeMode,
    // knowledge prompts
    pub n_hops: usize,
    pub beam_width: usize,
    pub token_budget: usize,
    pub template_id: usize,
    pub min_count: usize,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_overhead: f64,
    pub weight_decay: f64,
    pub w_plm: f64,
    pub w_rec: f64,
    pub w_bi: f64,
    pub w_ii: f64,
    pub seed: u64,
    pub workers: usize,
    // gating head
    pub diagonal_gate: bool,
    // evaluation
    pub eval_ks: Vec<usize>,
    pub hr_variant: HrVariant,
    // ablations
    pub ablate_no_gcn: bool,
    pub ablate_no_hypergcn: bool,
    pub ablate_no_fbg: bool,
    pub ablate_no_ktp: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            min_basket_size: 2,
            max_basket_size: 5,
            min_seq_len: 4,
            max_seq_len: 10,
            ratio_train: 0.8,
            ratio_val: 0.1,
            ratio_test: 0.1,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_tokens: 512,
            dropout: 0.1,
            d2: 128,
            d3: 64,
            n_experts: 8,
            l1_layers: 2,
            l2_layers: 2,
            k_topk: 10,
            hypergraph_rebuild: RebuildMode::Epoch,
            degree_mode: DegreeMode::Weighted,
            n_hops: 3,
            beam_width: 8,
            token_budget: 512,
            template_id: 0,
            min_count: 1,
            epochs: 100,
            batch_size: 64,
            lr_backbone: 1e-5,
            lr_overhead: 1e-4,
            weight_decay: 0.0,
            w_plm: 1.0,
            w_rec: 1.0,
            w_bi: 1.0,
            w_ii: 1.0,
            seed: 7,
            workers: 0,
            diagonal_gate: false,
            eval_ks: vec![5, 10],
            hr_variant: HrVariant::Recall,
            ablate_no_gcn: false,
            ablate_no_hypergcn: false,
            ablate_no_fbg: false,
            ablate_no_ktp: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key {key}: expected true/false, got {v:?}"))),
    }
}

impl Config {
    /// Parse a config body, starting from defaults.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "min_basket_size" => self.min_basket_size = parse_num(key, v)?,
            "max_basket_size" => self.max_basket_size = parse_num(key, v)?,
            "min_seq_len" => self.min_seq_len = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "ratio_train" => self.ratio_train = parse_num(key, v)?,
            "ratio_val" => self.ratio_val = parse_num(key, v)?,
            "ratio_test" => self.ratio_test = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_enc_layers" => self.n_enc_layers = parse_num(key, v)?,
            "n_dec_layers" => self.n_dec_layers = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "ffn_mult" => self.ffn_mult = parse_num(key, v)?,
            "max_tokens" => self.max_tokens = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "d2" => self.d2 = parse_num(key, v)?,
            "d3" => self.d3 = parse_num(key, v)?,
            "n_experts" => self.n_experts = parse_num(key, v)?,
            "l1_layers" => self.l1_layers = parse_num(key, v)?,
            "l2_layers" => self.l2_layers = parse_num(key, v)?,
            "k_topk" => self.k_topk = parse_num(key, v)?,
            "hypergraph_rebuild" => {
                self.hypergraph_rebuild = match v {
                    "epoch" => RebuildMode::Epoch,
                    "step" => RebuildMode::Step,
                    _ => return Err(Error::Config(format!("key {key}: epoch or step, got {v:?}"))),
                }
            }
            "degree_mode" => {
                self.degree_mode = match v {
                    "weighted" => DegreeMode::Weighted,
                    "count" => DegreeMode::Count,
                    _ => {
                        return Err(Error::Config(format!(
                            "key {key}: weighted or count, got {v:?}"
                        )))
                    }
                }
            }
            "n_hops" => self.n_hops = parse_num(key, v)?,
            "beam_width" => self.beam_width = parse_num(key, v)?,
            "token_budget" => self.token_budget = parse_num(key, v)?,
            "template_id" => self.template_id = parse_num(key, v)?,
            "min_count" => self.min_count = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_backbone" => self.lr_backbone = parse_num(key, v)?,
            "lr_overhead" => self.lr_overhead = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "w_plm" => self.w_plm = parse_num(key, v)?,
            "w_rec" => self.w_rec = parse_num(key, v)?,
            "w_bi" => self.w_bi = parse_num(key, v)?,
            "w_ii" => self.w_ii = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "workers" => self.workers = parse_num(key, v)?,
            "diagonal_gate" => self.diagonal_gate = parse_bool(key, v)?,
            "eval_ks" => {
                let ks: Result<Vec<usize>> =
                    v.split(',').map(|s| parse_num(key, s.trim())).collect();
                let ks = ks?;
                if ks.is_empty() {
                    return Err(Error::Config("eval_ks must not be empty".into()));
                }
                self.eval_ks = ks;
            }
            "hr_variant" => {
                self.hr_variant = match v {
                    "recall" => HrVariant::Recall,
                    "anyhit" => HrVariant::AnyHit,
                    _ => {
                        return Err(Error::Config(format!(
                            "key {key}: recall or anyhit, got {v:?}"
                        )))
                    }
                }
            }
            "ablate.no_gcn" => self.ablate_no_gcn = parse_bool(key, v)?,
            "ablate.no_hypergcn" => self.ablate_no_hypergcn = parse_bool(key, v)?,
            "ablate.no_fbg" => self.ablate_no_fbg = parse_bool(key, v)?,
            "ablate.no_ktp" => self.ablate_no_ktp = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_tokens < 8 {
            return Err(Error::Config("max_tokens must be at least 8".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr_backbone <= 0.0 || self.lr_overhead <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.k_topk == 0 {
            return Err(Error::Config("k_topk must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Canonical full listing; `parse_str(echo(c)) == c` for any valid `c`.
    pub fn echo(&self) -> String {
        let rebuild = match self.hypergraph_rebuild {
            RebuildMode::Epoch => "epoch",
            RebuildMode::Step => "step",
        };
        let degree = match self.degree_mode {
            DegreeMode::Weighted => "weighted",
            DegreeMode::Count => "count",
        };
        let hr = match self.hr_variant {
            HrVariant::Recall => "recall",
            HrVariant::AnyHit => "anyhit",
        };
        let ks: Vec<String> = self.eval_ks.iter().map(|k| k.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("min_basket_size", self.min_basket_size.to_string());
        kv("max_basket_size", self.max_basket_size.to_string());
        kv("min_seq_len", self.min_seq_len.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("ratio_train", fmt_f64(self.ratio_train));
        kv("ratio_val", fmt_f64(self.ratio_val));
        kv("ratio_test", fmt_f64(self.ratio_test));
        kv("d_model", self.d_model.to_string());
        kv("n_enc_layers", self.n_enc_layers.to_string());
        kv("n_dec_layers", self.n_dec_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("ffn_mult", self.ffn_mult.to_string());
        kv("max_tokens", self.max_tokens.to_string());
        kv("dropout", fmt_f64(self.dropout));
        kv("d2", self.d2.to_string());
        kv("d3", self.d3.to_string());
        kv("n_experts", self.n_experts.to_string());
        kv("l1_layers", self.l1_layers.to_string());
        kv("l2_layers", self.l2_layers.to_string());
        kv("k_topk", self.k_topk.to_string());
        kv("hypergraph_rebuild", rebuild.to_string());
        kv("degree_mode", degree.to_string());
        kv("n_hops", self.n_hops.to_string());
        kv("beam_width", self.beam_width.to_string());
        kv("token_budget", self.token_budget.to_string());
        kv("template_id", self.template_id.to_string());
        kv("min_count", self.min_count.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_backbone", fmt_f64(self.lr_backbone));
        kv("lr_overhead", fmt_f64(self.lr_overhead));
        kv("weight_decay", fmt_f64(self.weight_decay));
        kv("w_plm", fmt_f64(self.w_plm));
        kv("w_rec", fmt_f64(self.w_rec));
        kv("w_bi", fmt_f64(self.w_bi));
        kv("w_ii", fmt_f64(self.w_ii));
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("diagonal_gate", self.diagonal_gate.to_string());
        kv("eval_ks", ks.join(","));
        kv("hr_variant", hr.to_string());
        kv("ablate.no_gcn", self.ablate_no_gcn.to_string());
        kv("ablate.no_hypergcn", self.ablate_no_hypergcn.to_string());
        kv("ablate.no_fbg", self.ablate_no_fbg.to_string());
        kv("ablate.no_ktp", self.ablate_no_ktp.to_string());
        s
    }

    pub fn rules(&self) -> PreprocessRules {
        PreprocessRules {
            min_basket_size: self.min_basket_size,
            max_basket_size: self.max_basket_size,
            min_seq_len: self.min_seq_len,
            max_seq_len: self.max_seq_len,
            sample_seed: self.seed,
        }
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.ratio_train, self.ratio_val, self.ratio_test)
    }
}

/// Shortest exact decimal for an f64 (Rust's float Display is round-trip).
fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
