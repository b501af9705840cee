//! Knowledge graph storage, knowledge-tree extraction and prompt text.
//!
//! The masked user prompt (MUP) verbalizes a basket sequence and ends in
//! one `[MASK]` per expected next-basket item. The knowledge tree prompt
//! (KTP) linearizes a bounded beam-search tree over the KG augmented with
//! a fresh sequence entity, giving the encoder usable text for item ids
//! that would otherwise be opaque. A word-level tokenizer with forced item
//! names keeps every id in-vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::corpus::Basket;
use crate::error::{Error, Result};

/// Entity standing for the current basket sequence in the augmented KG.
pub const SEQ_ENTITY: &str = "[SEQ]";
/// Relation linking the sequence entity to its items.
pub const CONSIST_OF: &str = "consist_of";

/// One (head, relation, tail) edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triplet {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }
}

/// Deduplicated triple store with an outgoing-edge index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeSet<String>,
    relations: BTreeSet<String>,
    triples: Vec<Triplet>,
    adjacency: BTreeMap<String, Vec<(String, String)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        KnowledgeGraph::default()
    }

    pub fn from_triples(triples: Vec<Triplet>) -> Self {
        let mut kg = KnowledgeGraph::new();
        for t in triples {
            kg.insert(t);
        }
        kg
    }

    pub fn insert(&mut self, t: Triplet) {
        if self
            .adjacency
            .get(&t.head)
            .map(|adj| adj.iter().any(|(r, tl)| *r == t.relation && *tl == t.tail))
            .unwrap_or(false)
        {
            return;
        }
        self.entities.insert(t.head.clone());
        self.entities.insert(t.tail.clone());
        self.relations.insert(t.relation.clone());
        let adj = self.adjacency.entry(t.head.clone()).or_default();
        adj.push((t.relation.clone(), t.tail.clone()));
        adj.sort();
        self.triples.push(t);
    }

    pub fn add_entity(&mut self, e: &str) {
        self.entities.insert(e.to_string());
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triplet] {
        &self.triples
    }

    pub fn has_entity(&self, e: &str) -> bool {
        self.entities.contains(e)
    }

    pub fn outgoing(&self, e: &str) -> &[(String, String)] {
        self.adjacency.get(e).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn out_degree(&self, e: &str) -> usize {
        self.outgoing(e).len()
    }
}

/// Read a `head \t relation \t tail` TSV file.
pub fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_kg(&text, &path.display().to_string())
}

pub fn parse_kg(text: &str, origin: &str) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(r), Some(t), None) if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                kg.insert(Triplet::new(h, r, t));
            }
            _ => {
                return Err(Error::parse(
                    origin,
                    ln + 1,
                    "expected `head\\trelation\\ttail`",
                ))
            }
        }
    }
    Ok(kg)
}

/// Serialize a KG back to its TSV form.
pub fn kg_to_tsv(kg: &KnowledgeGraph) -> String {
    let mut out = String::new();
    for t in kg.triples() {
        out.push_str(&t.head);
        out.push('\t');
        out.push_str(&t.relation);
        out.push('\t');
        out.push_str(&t.tail);
        out.push('\n');
    }
    out
}

/// Add the sequence entity plus one `consist_of` edge per distinct item in
/// the baskets (first-occurrence order). The input graph is not modified.
pub fn augment_kg(kg: &KnowledgeGraph, baskets: &[Basket], catalog: &[String]) -> KnowledgeGraph {
    let mut aug = kg.clone();
    aug.add_entity(SEQ_ENTITY);
    let mut seen = BTreeSet::new();
    for b in baskets {
        for &ix in &b.items {
            if seen.insert(ix) {
                aug.insert(Triplet::new(SEQ_ENTITY, CONSIST_OF, &catalog[ix]));
            }
        }
    }
    aug
}

/// Breadth-first beam-search tree linearized into triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSequence {
    pub triples: Vec<Triplet>,
    /// Hop distance of each triple's tail from the root; non-decreasing.
    pub hop_of: Vec<usize>,
}

impl TripletSequence {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Expand a breadth-first tree from `root`, keeping at most `beam_width`
/// new edges per frontier. Candidates are ranked by training interaction
/// frequency of the tail when known, then tail out-degree, then tail id;
/// every entity is visited at most once, so the result is a tree.
pub fn build_knowledge_tree(
    aug: &KnowledgeGraph,
    root: &str,
    n_hops: usize,
    beam_width: usize,
    freq_of: Option<&BTreeMap<String, f64>>,
) -> Result<TripletSequence> {
    if !aug.has_entity(root) {
        return Err(Error::InvalidArgument(format!(
            "knowledge tree root {root:?} not in graph"
        )));
    }
    if n_hops == 0 || beam_width == 0 {
        return Err(Error::InvalidArgument(
            "n_hops and beam_width must be at least 1".into(),
        ));
    }
    let score = |tail: &str| -> (f64, usize) {
        let f = freq_of.and_then(|m| m.get(tail).copied()).unwrap_or(0.0);
        (f, aug.out_degree(tail))
    };

    let mut visited: BTreeSet<String> = BTreeSet::new();
    visited.insert(root.to_string());
    let mut frontier: Vec<String> = vec![root.to_string()];
    let mut triples = Vec::new();
    let mut hop_of = Vec::new();

    for hop in 1..=n_hops {
        let mut candidates: Vec<(String, String, String)> = Vec::new();
        for h in &frontier {
            for (r, t) in aug.outgoing(h) {
                if !visited.contains(t) {
                    candidates.push((h.clone(), r.clone(), t.clone()));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| {
            let (fa, da) = score(&a.2);
            let (fb, db) = score(&b.2);
            fb.partial_cmp(&fa)
                .unwrap()
                .then(db.cmp(&da))
                .then(a.2.cmp(&b.2))
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut next_frontier = Vec::new();
        for (h, r, t) in candidates {
            if next_frontier.len() >= beam_width {
                break;
            }
            if !visited.insert(t.clone()) {
                continue; // tail already claimed by a better-ranked edge
            }
            triples.push(Triplet::new(&h, &r, &t));
            hop_of.push(hop);
            next_frontier.push(t);
        }
        frontier = next_frontier;
    }
    Ok(TripletSequence { triples, hop_of })
}

// ---- prompt text ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Mup,
    Ktp,
}

/// Rendered prompt text; mask positions appear after tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptText {
    pub text: String,
    pub kind: PromptKind,
}

impl PromptText {
    pub fn mask_count(&self) -> usize {
        self.text.matches(MASK_TOKEN).count()
    }
}

pub const MASK_TOKEN: &str = "[MASK]";

/// One MUP template: a header, a sentence per historical basket, and the
/// final masked sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub header: String,
    pub basket: String,
    pub last: String,
}

/// Numbered templates; index is the `template_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            templates: vec![
                Template {
                    header: "User has purchased {n} baskets.".into(),
                    basket: "Basket_{basket_index} consists of {items}.".into(),
                    last: "Basket_{basket_index} will consist of {masks}".into(),
                },
                Template {
                    header: "A user bought {n} baskets in sequence.".into(),
                    basket: "Basket {basket_index} contains {items}.".into(),
                    last: "Basket {basket_index} will contain {masks}".into(),
                },
                Template {
                    header: "Purchase history with {n} baskets follows.".into(),
                    basket: "Order {basket_index} includes {items}.".into(),
                    last: "Order {basket_index} is expected to include {masks}".into(),
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Template> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown template id {id}")))
    }

    /// Serialize as `id \t part \t text` lines, the template-file grammar.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.templates.len() * 3);
        for (id, t) in self.templates.iter().enumerate() {
            out.push(format!("{id}\theader\t{}", t.header));
            out.push(format!("{id}\tbasket\t{}", t.basket));
            out.push(format!("{id}\tlast\t{}", t.last));
        }
        out
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let text = lines.join("\n");
        Self::parse(&text, "templates")
    }

    /// Load templates from a `id \t part \t text` TSV where part is one of
    /// `header`, `basket`, `last`. Missing parts fall back to template 0.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<Self> {
        let base = TemplateSet::builtin().templates[0].clone();
        let mut by_id: BTreeMap<usize, Template> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            if parts.len() != 3 {
                return Err(Error::parse(origin, ln + 1, "expected `id\\tpart\\ttext`"));
            }
            let id: usize = parts[0]
                .parse()
                .map_err(|_| Error::parse(origin, ln + 1, "bad template id"))?;
            let tpl = by_id.entry(id).or_insert_with(|| base.clone());
            match parts[1] {
                "header" => tpl.header = parts[2].to_string(),
                "basket" => tpl.basket = parts[2].to_string(),
                "last" => tpl.last = parts[2].to_string(),
                other => {
                    return Err(Error::parse(
                        origin,
                        ln + 1,
                        format!("unknown template part {other:?}"),
                    ))
                }
            }
        }
        if by_id.is_empty() {
            return Err(Error::parse(origin, 1, "no templates defined"));
        }
        let max_id = *by_id.keys().max().unwrap();
        let mut templates = Vec::with_capacity(max_id + 1);
        for id in 0..=max_id {
            templates.push(by_id.get(&id).cloned().unwrap_or_else(|| base.clone()));
        }
        Ok(TemplateSet { templates })
    }
}

fn fill(template: &str, pairs: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in pairs {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Render the masked user prompt for a history of baskets.
pub fn render_mup(
    history: &[Basket],
    names: &[String],
    n_masks: usize,
    template_id: usize,
    templates: &TemplateSet,
) -> Result<PromptText> {
    if n_masks == 0 {
        return Err(Error::InvalidArgument("n_masks must be at least 1".into()));
    }
    let tpl = templates.get(template_id)?;
    let mut sentences = Vec::with_capacity(history.len() + 2);
    sentences.push(fill(&tpl.header, &[("n", history.len().to_string())]));
    for (bi, b) in history.iter().enumerate() {
        let items = b
            .items
            .iter()
            .map(|&ix| names[ix].as_str())
            .collect::<Vec<_>>()
            .join(", ");
        sentences.push(fill(
            &tpl.basket,
            &[("basket_index", bi.to_string()), ("items", items)],
        ));
    }
    let masks = vec![MASK_TOKEN; n_masks].join(", ");
    sentences.push(fill(
        &tpl.last,
        &[("basket_index", history.len().to_string()), ("masks", masks)],
    ));
    Ok(PromptText {
        text: sentences.join(" "),
        kind: PromptKind::Mup,
    })
}

/// Render the knowledge tree prompt: one sentence per triple in tree order,
/// truncated at the last whole sentence that fits `token_budget`. Edges out
/// of the sequence entity are skipped; the MUP already lists those items.
pub fn render_ktp(
    tree: &TripletSequence,
    names: &BTreeMap<String, String>,
    token_budget: usize,
    tok: &Tokenizer,
) -> PromptText {
    fn pretty<'a>(names: &'a BTreeMap<String, String>, e: &'a str) -> &'a str {
        names.get(e).map(|s| s.as_str()).unwrap_or(e)
    }
    let mut sentences = Vec::new();
    let mut used = 0usize;
    for t in &tree.triples {
        if t.head == SEQ_ENTITY {
            continue;
        }
        let sentence = format!(
            "The {} of {} is {}.",
            t.relation,
            pretty(names, &t.head),
            pretty(names, &t.tail)
        );
        let cost = tok.count_tokens(&sentence);
        if used + cost > token_budget {
            break;
        }
        used += cost;
        sentences.push(sentence);
    }
    PromptText {
        text: sentences.join(" "),
        kind: PromptKind::Ktp,
    }
}

/// Canonical next-basket target text: item names in catalog-index order.
pub fn render_target(items: &[usize], names: &[String]) -> String {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .map(|&ix| names[ix].as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

// ---- tokenizer -------------------------------------------------------------

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SEP: usize = 4;
pub const UNK: usize = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[SEP]", "[UNK]"];

/// Word-level tokenizer. Words are runs of alphanumerics/underscores,
/// punctuation marks are single tokens, bracketed specials are atomic.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Token ids plus the positions of `[MASK]` occurrences.
    pub fn tokenize(&self, text: &str) -> (Vec<usize>, Vec<usize>) {
        let words = scan_tokens(text);
        let mut ids = Vec::with_capacity(words.len());
        let mut masks = Vec::new();
        for w in &words {
            let id = self.id_of(w);
            if id == MASK {
                masks.push(ids.len());
            }
            ids.push(id);
        }
        (ids, masks)
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        scan_tokens(text).len()
    }

    /// Vocabulary lines for the checkpoint header, id order.
    pub fn to_lines(&self) -> String {
        self.vocab.join("\n")
    }

    pub fn from_lines(lines: &str) -> Result<Self> {
        let vocab: Vec<String> = lines.lines().map(|s| s.to_string()).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Checkpoint(format!(
                    "vocabulary is missing special token {s} at id {i}"
                )));
            }
        }
        Ok(Tokenizer::from_vocab(vocab))
    }
}

/// Split text into scanner tokens: specials, word runs, punctuation.
pub fn scan_tokens(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    'outer: while pos < bytes.len() {
        let rest = &text[pos..];
        for special in SPECIALS {
            if rest.starts_with(special) {
                out.push(special.to_string());
                pos += special.len();
                continue 'outer;
            }
        }
        let ch = rest.chars().next().unwrap();
        if ch.is_whitespace() {
            pos += ch.len_utf8();
            continue;
        }
        if ch.is_alphanumeric() || ch == '_' {
            let end = rest
                .char_indices()
                .find(|(_, c)| !(c.is_alphanumeric() || *c == '_'))
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(rest[..end].to_string());
            pos += end;
        } else {
            out.push(ch.to_string());
            pos += ch.len_utf8();
        }
    }
    out
}

/// Build a vocabulary from a corpus. Tokens appearing at least `min_count`
/// times get ids; tokens of the forced strings (item surface names) are
/// always included so no item is ever out-of-vocabulary.
pub fn build_vocab(corpus: &[String], min_count: usize, forced: &[String]) -> Tokenizer {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for t in scan_tokens(doc) {
            if SPECIALS.contains(&t.as_str()) {
                continue;
            }
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut present: BTreeSet<String> = vocab.iter().cloned().collect();
    for name in forced {
        for t in scan_tokens(name) {
            if present.insert(t.clone()) {
                vocab.push(t);
            }
        }
    }
    for (t, c) in counts {
        if c >= min_count && present.insert(t.clone()) {
            vocab.push(t);
        }
    }
    Tokenizer::from_vocab(vocab)
}
