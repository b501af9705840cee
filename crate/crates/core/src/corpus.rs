//! Event ingestion and basket-sequence construction.
//!
//! Raw interactions are grouped into baskets by (user, timestamp), filtered
//! and bounded, then indexed against a lexicographic item catalog. A small
//! synthetic generator plants co-purchase patterns for experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeGraph, Triplet};
use crate::rng::{derive_seed, hash_label, rng_from};

/// One raw interaction line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionEvent {
    pub user_id: String,
    pub timestamp: i64,
    pub item_id: String,
}

/// Preprocessing bounds; defaults follow the usual next-basket setup.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessRules {
    pub min_basket_size: usize,
    pub max_basket_size: usize,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub sample_seed: u64,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        PreprocessRules {
            min_basket_size: 2,
            max_basket_size: 5,
            min_seq_len: 4,
            max_seq_len: 10,
            sample_seed: 0,
        }
    }
}

impl PreprocessRules {
    fn validate(&self) -> Result<()> {
        if self.min_basket_size == 0 || self.min_basket_size > self.max_basket_size {
            return Err(Error::InvalidArgument(format!(
                "basket size bounds invalid: {}..{}",
                self.min_basket_size, self.max_basket_size
            )));
        }
        if self.min_seq_len == 0 || self.min_seq_len > self.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length bounds invalid: {}..{}",
                self.min_seq_len, self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// A basket: the set of item indices a user touched at one timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basket {
    pub timestamp: i64,
    /// Item indices into the catalog, sorted ascending.
    pub items: Vec<usize>,
}

/// One user's chronologically ordered baskets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub baskets: Vec<Basket>,
}

/// Preprocessed dataset: catalog, per-user sequences, optional item names.
#[derive(Debug, Clone, PartialEq)]
pub struct BasketDataset {
    /// Unique item ids, sorted lexicographically; defines the index space.
    pub catalog: Vec<String>,
    /// Sequences sorted by user id.
    pub sequences: Vec<UserSequence>,
    /// Surface name per catalog index; defaults to the item id itself.
    pub names: Vec<String>,
    /// Rules the dataset was produced under (replayability header).
    pub rules: PreprocessRules,
}

impl BasketDataset {
    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.catalog.binary_search_by(|c| c.as_str().cmp(item_id)).ok()
    }

    pub fn find_user(&self, user_id: &str) -> Option<&UserSequence> {
        self.sequences.iter().find(|s| s.user_id == user_id)
    }

    /// Attach surface names from an `item_id \t name` table.
    pub fn apply_names(&mut self, table: &BTreeMap<String, String>) {
        for (ix, id) in self.catalog.iter().enumerate() {
            if let Some(n) = table.get(id) {
                self.names[ix] = n.clone();
            }
        }
    }
}

/// Normalized per-user interaction frequencies over the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    pub values: Vec<f64>,
}

impl FrequencyVector {
    /// Indicator of the positive entries.
    pub fn positives(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

// ---- loading ---------------------------------------------------------------

/// Read a `user \t timestamp \t item` TSV file.
pub fn load_interactions(path: &Path) -> Result<Vec<InteractionEvent>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_interactions(&text, &path.display().to_string())
}

pub fn parse_interactions(text: &str, origin: &str) -> Result<Vec<InteractionEvent>> {
    let mut events = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (user, ts, item) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(t), Some(i)) => (u, t, i),
            _ => return Err(Error::parse(origin, ln + 1, "expected 3 tab-separated fields")),
        };
        if parts.next().is_some() {
            return Err(Error::parse(origin, ln + 1, "more than 3 fields"));
        }
        if user.is_empty() || item.is_empty() {
            return Err(Error::parse(origin, ln + 1, "empty user or item field"));
        }
        let timestamp: i64 = ts
            .parse()
            .map_err(|_| Error::parse(origin, ln + 1, format!("bad timestamp {ts:?}")))?;
        events.push(InteractionEvent {
            user_id: user.to_string(),
            timestamp,
            item_id: item.to_string(),
        });
    }
    Ok(events)
}

/// Read an optional `item_id \t surface_name` table.
pub fn load_names(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    let mut table = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next()) {
            (Some(id), Some(name)) if !id.is_empty() && !name.is_empty() => {
                table.insert(id.to_string(), name.to_string());
            }
            _ => return Err(Error::parse(&origin, ln + 1, "expected `item\\tname`")),
        }
    }
    Ok(table)
}

// ---- preprocessing ----------------------------------------------------------

/// Group events into baskets, enforce size/length bounds, build the catalog.
///
/// Oversized baskets are downsampled with a seed derived from the rules'
/// `sample_seed` and the basket's identity, so the reduction replays exactly.
pub fn preprocess(events: &[InteractionEvent], rules: &PreprocessRules) -> Result<BasketDataset> {
    rules.validate()?;
    if events.is_empty() {
        return Err(Error::EmptyDataset("no interaction events".into()));
    }

    let mut by_user: BTreeMap<&str, BTreeMap<i64, BTreeSet<&str>>> = BTreeMap::new();
    for ev in events {
        by_user
            .entry(&ev.user_id)
            .or_default()
            .entry(ev.timestamp)
            .or_default()
            .insert(&ev.item_id);
    }

    let mut kept: Vec<(String, Vec<(i64, Vec<String>)>)> = Vec::new();
    for (user, baskets) in &by_user {
        let mut seq: Vec<(i64, Vec<String>)> = Vec::new();
        for (bi, (&ts, items)) in baskets.iter().enumerate() {
            if items.len() < rules.min_basket_size {
                continue;
            }
            let mut items: Vec<String> = items.iter().map(|s| s.to_string()).collect();
            if items.len() > rules.max_basket_size {
                let seed = derive_seed(
                    rules.sample_seed,
                    "downsample",
                    &[hash_label(user), ts as u64, bi as u64],
                );
                let mut rng = rng_from(seed);
                items.shuffle(&mut rng);
                items.truncate(rules.max_basket_size);
                items.sort();
            }
            seq.push((ts, items));
        }
        if seq.len() < rules.min_seq_len {
            continue;
        }
        if seq.len() > rules.max_seq_len {
            seq.drain(..seq.len() - rules.max_seq_len);
        }
        kept.push((user.to_string(), seq));
    }

    if kept.is_empty() {
        return Err(Error::EmptyDataset(
            "preprocessing filtered out every user".into(),
        ));
    }

    let mut catalog: BTreeSet<String> = BTreeSet::new();
    for (_, seq) in &kept {
        for (_, items) in seq {
            catalog.extend(items.iter().cloned());
        }
    }
    let catalog: Vec<String> = catalog.into_iter().collect();
    let index: BTreeMap<&str, usize> = catalog
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let sequences = kept
        .into_iter()
        .map(|(user_id, seq)| UserSequence {
            user_id,
            baskets: seq
                .into_iter()
                .map(|(timestamp, items)| Basket {
                    timestamp,
                    items: items.iter().map(|i| index[i.as_str()]).collect(),
                })
                .collect(),
        })
        .collect();

    let names = catalog.clone();
    Ok(BasketDataset {
        catalog,
        sequences,
        names,
        rules: rules.clone(),
    })
}

/// Flatten a dataset back into events (replay/debug aid).
pub fn dataset_to_events(ds: &BasketDataset) -> Vec<InteractionEvent> {
    let mut out = Vec::new();
    for seq in &ds.sequences {
        for b in &seq.baskets {
            for &ix in &b.items {
                out.push(InteractionEvent {
                    user_id: seq.user_id.clone(),
                    timestamp: b.timestamp,
                    item_id: ds.catalog[ix].clone(),
                });
            }
        }
    }
    out
}

/// Serialize a dataset in the line-delimited export format with a header
/// carrying the rules it was produced under.
pub fn export_dataset(ds: &BasketDataset) -> String {
    let r = &ds.rules;
    let mut out = format!(
        "# seed={} min_basket_size={} max_basket_size={} min_seq_len={} max_seq_len={}\n",
        r.sample_seed, r.min_basket_size, r.max_basket_size, r.min_seq_len, r.max_seq_len
    );
    for seq in &ds.sequences {
        let baskets: Vec<String> = seq
            .baskets
            .iter()
            .map(|b| {
                let items: Vec<&str> = b.items.iter().map(|&i| ds.catalog[i].as_str()).collect();
                format!("{}:{}", b.timestamp, items.join(","))
            })
            .collect();
        let _ = writeln!(out, "{}\t{}", seq.user_id, baskets.join(";"));
    }
    out
}

// ---- splitting ---------------------------------------------------------------

/// Partition users into train/val/test by seeded shuffle. All parts share
/// the input's catalog; parts are disjoint by user and exhaustive.
pub fn split(
    ds: &BasketDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(BasketDataset, BasketDataset, BasketDataset)> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 {
        return Err(Error::InvalidArgument("split ratios must be positive".into()));
    }
    if (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios sum to {}, expected 1",
            r1 + r2 + r3
        )));
    }
    let n = ds.sequences.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 users to split, have {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, "split", &[]));
    order.shuffle(&mut rng);
    let n1 = (n as f64 * r1).floor() as usize;
    let n2 = (n as f64 * r2).floor() as usize;

    let part = |members: &[usize]| -> BasketDataset {
        let mut seqs: Vec<UserSequence> =
            members.iter().map(|&i| ds.sequences[i].clone()).collect();
        seqs.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        BasketDataset {
            catalog: ds.catalog.clone(),
            sequences: seqs,
            names: ds.names.clone(),
            rules: ds.rules.clone(),
        }
    };

    Ok((
        part(&order[..n1]),
        part(&order[n1..n1 + n2]),
        part(&order[n1 + n2..]),
    ))
}

// ---- frequencies --------------------------------------------------------------

/// Occurrence counts over the catalog normalized to sum 1; the all-zero
/// vector for an empty history.
pub fn frequency_vector(baskets: &[Basket], catalog_size: usize) -> FrequencyVector {
    let mut counts = vec![0.0f64; catalog_size];
    let mut total = 0.0f64;
    for b in baskets {
        for &ix in &b.items {
            assert!(ix < catalog_size, "item index {ix} out of catalog");
            counts[ix] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for c in &mut counts {
            *c /= total;
        }
    }
    FrequencyVector { values: counts }
}

// ---- synthetic data -------------------------------------------------------------

/// Parameters for the planted-pattern generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_baskets_per_user: usize,
    pub n_patterns: usize,
    pub pattern_size: usize,
    pub noise_rate: f64,
    pub kg_attrs_per_item: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 200,
            n_items: 50,
            n_baskets_per_user: 8,
            n_patterns: 10,
            pattern_size: 5,
            noise_rate: 0.1,
            kg_attrs_per_item: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parse a flat `key=value` spec body; unknown keys are rejected.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let (key, v) = (key.trim(), v.trim());
            fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
                v.parse()
                    .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
            }
            match key {
                "n_users" => spec.n_users = num(key, v)?,
                "n_items" => spec.n_items = num(key, v)?,
                "n_baskets_per_user" => spec.n_baskets_per_user = num(key, v)?,
                "n_patterns" => spec.n_patterns = num(key, v)?,
                "pattern_size" => spec.pattern_size = num(key, v)?,
                "noise_rate" => spec.noise_rate = num(key, v)?,
                "kg_attrs_per_item" => spec.kg_attrs_per_item = num(key, v)?,
                "seed" => spec.seed = num(key, v)?,
                _ => return Err(Error::Config(format!("unknown synthetic key {key:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        SyntheticSpec::parse_str(&text)
    }
}

/// Serialize events in the TSV interchange format.
pub fn events_to_tsv(events: &[InteractionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{}\t{}\t{}", e.user_id, e.timestamp, e.item_id);
    }
    out
}

const ATTR_RELATIONS: [&str; 3] = ["function_is", "level_is", "gender_is"];

/// Generate events plus a knowledge graph with planted co-purchase groups.
///
/// Every user is assigned one or two pattern groups. Single-pattern users
/// repeat their group in every basket; two-pattern users alternate groups
/// deterministically, which plants a preference-shift signal that pure
/// frequency counting cannot pick up. Noise items are injected per basket
/// with probability `noise_rate`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Vec<InteractionEvent>, KnowledgeGraph)> {
    if spec.n_users == 0 || spec.n_items == 0 || spec.n_baskets_per_user == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    if spec.n_patterns == 0 || spec.pattern_size == 0 {
        return Err(Error::InvalidArgument("need at least one pattern".into()));
    }
    if spec.pattern_size > 5 {
        return Err(Error::InvalidArgument(format!(
            "pattern_size {} exceeds the basket cap of 5",
            spec.pattern_size
        )));
    }
    if spec.n_patterns * spec.pattern_size > spec.n_items {
        return Err(Error::InvalidArgument(format!(
            "{} patterns of size {} do not fit in {} items",
            spec.n_patterns, spec.pattern_size, spec.n_items
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::InvalidArgument(format!(
            "noise_rate {} outside [0,1]",
            spec.noise_rate
        )));
    }

    let uw = digits(spec.n_users);
    let iw = digits(spec.n_items);
    let item_name = |ix: usize| format!("i{ix:0iw$}");

    let pattern_of = |ix: usize| -> Option<usize> {
        if ix < spec.n_patterns * spec.pattern_size {
            Some(ix / spec.pattern_size)
        } else {
            None
        }
    };

    let mut events = Vec::new();
    for u in 0..spec.n_users {
        let mut rng = rng_from(derive_seed(spec.seed, "user", &[u as u64]));
        let two = spec.n_patterns >= 2 && rng.gen_bool(0.5);
        let first = rng.gen_range(0..spec.n_patterns);
        let assigned: Vec<usize> = if two {
            let mut second = rng.gen_range(0..spec.n_patterns - 1);
            if second >= first {
                second += 1;
            }
            vec![first, second]
        } else {
            vec![first]
        };
        let user_id = format!("u{u:0uw$}");
        for t in 0..spec.n_baskets_per_user {
            let p = assigned[t % assigned.len()];
            let mut items: BTreeSet<usize> =
                (p * spec.pattern_size..(p + 1) * spec.pattern_size).collect();
            if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) && spec.n_items > items.len()
            {
                loop {
                    let cand = rng.gen_range(0..spec.n_items);
                    if items.insert(cand) {
                        break;
                    }
                }
            }
            for ix in items {
                events.push(InteractionEvent {
                    user_id: user_id.clone(),
                    timestamp: t as i64,
                    item_id: item_name(ix),
                });
            }
        }
    }

    let mut triples = Vec::new();
    for ix in 0..spec.n_items {
        let item = item_name(ix);
        let category = match pattern_of(ix) {
            Some(p) => format!("category_{p:02}"),
            None => "category_misc".to_string(),
        };
        triples.push(Triplet::new(&item, "category_is", &category));
        let mut rng = rng_from(derive_seed(spec.seed, "kg", &[ix as u64]));
        for a in 0..spec.kg_attrs_per_item {
            let rel = ATTR_RELATIONS[a % ATTR_RELATIONS.len()];
            let value = format!("{}_{:02}", rel.trim_end_matches("_is"), rng.gen_range(0..4));
            triples.push(Triplet::new(&item, rel, &value));
        }
    }
    Ok((events, KnowledgeGraph::from_triples(triples)))
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}
