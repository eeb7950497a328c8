//! The question-aware memory network: entity linking, key/value memory
//! slots, Z hops of addressing, reading and query updating, and answer
//! scoring over the candidates.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{QaError, Result};
use crate::kgembed::{KgEmbeddingParams, KgeVars};
use crate::kgstore::{Candidates, EntityId, KnowledgeGraph, TripleId};
use crate::qencoder::{self, EncoderVars, GruParams, QuestionEncoding};

pub const KEY_PARAM: &str = "qa.W_k";
pub const VALUE_PARAM: &str = "qa.W_v";

/// Longest entity surface (in tokens) the linker will try.
const MAX_SPAN: usize = 16;

/// Tokens that never count as relation-token positions in attention
/// diagnostics.
pub const FUNCTION_TOKENS: &[&str] = &[
    "what", "which", "who", "whom", "where", "when", "is", "are", "was", "the", "a", "an", "of", "'s", "-s", "s",
    "does", "do", "did", "in", "?", "to", "for", "and", "by", "has", "have", "that",
];

/// Lowercase with spaces and underscores unified.
pub fn normalize_surface(s: &str) -> String {
    s.trim().to_lowercase().replace(' ', "_")
}

/// Dictionary of normalized entity surface forms.
#[derive(Clone, Debug)]
pub struct EntityLinker {
    surfaces: HashMap<String, EntityId>,
    max_span: usize,
}

impl EntityLinker {
    pub fn new(g: &KnowledgeGraph) -> Self {
        let mut surfaces = HashMap::new();
        let mut max_span = 1;
        for (i, name) in g.entities().iter().enumerate() {
            let norm = normalize_surface(name);
            max_span = max_span.max(norm.split('_').filter(|p| !p.is_empty()).count());
            surfaces.entry(norm).or_insert(EntityId(i));
        }
        Self {
            surfaces,
            max_span: max_span.min(MAX_SPAN),
        }
    }

    pub fn lookup(&self, surface: &str) -> Option<EntityId> {
        self.surfaces.get(&normalize_surface(surface)).copied()
    }

    /// Greedy left-to-right longest-span matching. Returns matched spans as
    /// `(start, len, entity)`.
    pub fn link_spans(&self, tokens: &[String]) -> Vec<(usize, usize, EntityId)> {
        let norm: Vec<String> = tokens.iter().map(|t| normalize_surface(t)).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < norm.len() {
            let mut matched = None;
            let longest = self.max_span.min(norm.len() - i);
            for len in (1..=longest).rev() {
                let span = norm[i..i + len].join("_");
                if let Some(&e) = self.surfaces.get(&span) {
                    matched = Some((len, e));
                    break;
                }
            }
            match matched {
                Some((len, e)) => {
                    out.push((i, len, e));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Distinct linked entities in order of first mention.
    pub fn link(&self, tokens: &[String]) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        self.link_spans(tokens)
            .into_iter()
            .filter_map(|(_, _, e)| seen.insert(e).then_some(e))
            .collect()
    }
}

pub fn link_entities(tokens: &[String], g: &KnowledgeGraph) -> Vec<EntityId> {
    EntityLinker::new(g).link(tokens)
}

/// Key and value projections, both `d_hid×d_ent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReasonerParams {
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl ReasonerParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d_ent: usize, d_hid: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_ent as f64).sqrt();
        Self {
            w_k: store.insert(KEY_PARAM, Tensor::uniform(&[d_hid, d_ent], -bound, bound, rng)),
            w_v: store.insert(VALUE_PARAM, Tensor::uniform(&[d_hid, d_ent], -bound, bound, rng)),
        }
    }

    pub fn find(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_k: store.require(KEY_PARAM)?,
            w_v: store.require(VALUE_PARAM)?,
        })
    }
}

/// Every parameter handle of the full model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub kge: KgEmbeddingParams,
    pub enc: GruParams,
    pub mem: ReasonerParams,
}

impl ModelParams {
    pub fn find(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            kge: KgEmbeddingParams::find(store)?,
            enc: GruParams::find(store)?,
            mem: ReasonerParams::find(store)?,
        })
    }

    pub fn vars(&self, bound: &diffcore::BoundParams) -> ModelVars {
        ModelVars {
            kge: self.kge.vars(bound),
            enc: self.enc.vars(bound),
            w_k: bound.var(self.mem.w_k),
            w_v: bound.var(self.mem.w_v),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub kge: KgeVars,
    pub enc: EncoderVars,
    pub w_k: Var,
    pub w_v: Var,
}

/// Projected embedding rows shared by every question on one tape:
/// `W_k·W·E_e` and `W_v·E_e` for a set of entities, `W_k·E_r` for all
/// relations.
pub struct MemoryTables {
    local: HashMap<EntityId, usize>,
    head_keys: Var,
    rel_keys: Var,
    values: Var,
}

impl MemoryTables {
    pub fn build(tape: &mut Tape, v: &ModelVars, entities: &[EntityId]) -> Result<Self> {
        let local: HashMap<EntityId, usize> = entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let rows: Vec<usize> = entities.iter().map(|e| e.0).collect();
        let ent = tape.gather(v.kge.ent, &rows)?;
        let kw = tape.matmul(v.w_k, v.kge.w)?;
        let kw_t = tape.transpose(kw)?;
        let head_keys = tape.matmul(ent, kw_t)?;
        let wk_t = tape.transpose(v.w_k)?;
        let rel_keys = tape.matmul(v.kge.rel, wk_t)?;
        let wv_t = tape.transpose(v.w_v)?;
        let values = tape.matmul(ent, wv_t)?;
        Ok(Self {
            local,
            head_keys,
            rel_keys,
            values,
        })
    }

    fn row(&self, e: EntityId) -> Result<usize> {
        self.local.get(&e).copied().ok_or(QaError::UnknownEntity(e.0))
    }
}

/// Sorted distinct candidate entities over a set of candidate lists.
pub fn union_entities<'a>(sets: impl IntoIterator<Item = &'a Candidates>) -> Vec<EntityId> {
    let mut all: Vec<EntityId> = sets.into_iter().flat_map(|c| c.answers.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

pub struct MemorySlots {
    pub triple_ids: Vec<TripleId>,
    pub keys: Var,
    pub values: Var,
    pub candidates: Vec<EntityId>,
    pub candidate_values: Var,
    pub slot_mask: Vec<bool>,
}

impl MemorySlots {
    pub fn len(&self) -> usize {
        self.triple_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triple_ids.is_empty()
    }

    fn mask(&self) -> Option<&[bool]> {
        if self.slot_mask.iter().all(|&k| k) {
            None
        } else {
            Some(&self.slot_mask)
        }
    }
}

/// Drops each slot with probability `p`; if everything would be dropped,
/// every slot is kept.
pub fn sample_slot_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= p).collect();
    if mask.iter().any(|&k| k) {
        mask
    } else {
        vec![true; n]
    }
}

/// Keys `W_k(W·E_h + E_r)` and values `W_v·E_t` for every candidate triple.
/// Returns `None` when there are no candidates.
pub fn build_slots(
    tape: &mut Tape,
    tables: &MemoryTables,
    g: &KnowledgeGraph,
    cand: &Candidates,
    slot_mask: Vec<bool>,
) -> Result<Option<MemorySlots>> {
    if cand.triples.is_empty() || cand.answers.is_empty() {
        return Ok(None);
    }
    if slot_mask.len() != cand.triples.len() {
        return Err(QaError::Model(format!(
            "slot mask has {} entries for {} slots",
            slot_mask.len(),
            cand.triples.len()
        )));
    }
    let mut heads = Vec::with_capacity(cand.triples.len());
    let mut rels = Vec::with_capacity(cand.triples.len());
    let mut tails = Vec::with_capacity(cand.triples.len());
    for &t in &cand.triples {
        let tr = g.triple(t);
        heads.push(tables.row(tr.head)?);
        rels.push(tr.relation.0);
        tails.push(tables.row(tr.tail)?);
    }
    let answers = cand.answers.iter().map(|&e| tables.row(e)).collect::<Result<Vec<_>>>()?;
    let hk = tape.gather(tables.head_keys, &heads)?;
    let rk = tape.gather(tables.rel_keys, &rels)?;
    let keys = tape.add(hk, rk)?;
    let values = tape.gather(tables.values, &tails)?;
    let candidate_values = tape.gather(tables.values, &answers)?;
    Ok(Some(MemorySlots {
        triple_ids: cand.triples.clone(),
        keys,
        values,
        candidates: cand.answers.clone(),
        candidate_values,
        slot_mask,
    }))
}

/// Self-attention of the token states against `h_x`. Returns the query and
/// the attention weights.
pub fn init_query(tape: &mut Tape, enc: &QuestionEncoding) -> Result<(Var, Var)> {
    let logits = tape.matvec(enc.states, enc.summary)?;
    let p = tape.softmax(logits)?;
    let q = tape.weighted_row_sum(p, enc.states)?;
    Ok((q, p))
}

/// Softmax of `q·key_i` over kept slots; dropped slots get exactly 0.
pub fn key_address(tape: &mut Tape, q: Var, slots: &MemorySlots) -> Result<Var> {
    let logits = tape.matvec(slots.keys, q)?;
    Ok(tape.softmax_masked(logits, slots.mask())?)
}

pub fn value_read(tape: &mut Tape, p: Var, slots: &MemorySlots) -> Result<Var> {
    Ok(tape.weighted_row_sum(p, slots.values)?)
}

/// `q' = o + Σ softmax(H·o)_i h_i`. Returns `q'` and the question attention.
pub fn query_update(tape: &mut Tape, o: Var, enc: &QuestionEncoding) -> Result<(Var, Var)> {
    let logits = tape.matvec(enc.states, o)?;
    let p = tape.softmax(logits)?;
    let att = tape.weighted_row_sum(p, enc.states)?;
    Ok((tape.add(o, att)?, p))
}

/// The ablated update without question attention: `q' = o + q`.
pub fn query_update_plain(tape: &mut Tape, o: Var, q: Var) -> Result<Var> {
    Ok(tape.add(o, q)?)
}

/// Candidate logits `o·(W_v·E_a)`; the answer distribution is their softmax.
pub fn predict(tape: &mut Tape, o: Var, slots: &MemorySlots) -> Result<Var> {
    Ok(tape.matvec(slots.candidate_values, o)?)
}

/// Encodes a question. With `entity_inputs`, tokens inside a linked entity
/// mention read the entity's embedding row instead of a token embedding.
pub fn encode_question(
    tape: &mut Tape,
    vars: &ModelVars,
    q: &PreparedQuestion,
    entity_inputs: bool,
) -> Result<QuestionEncoding> {
    if !entity_inputs || q.mentions.iter().all(Option::is_none) {
        return qencoder::encode(tape, &vars.enc, &q.token_ids);
    }
    let mut rows = Vec::with_capacity(q.token_ids.len());
    for (&id, m) in q.token_ids.iter().zip(&q.mentions) {
        rows.push(match m {
            Some(e) => tape.row(vars.kge.ent, e.0)?,
            None => tape.row(vars.enc.embedding, id)?,
        });
    }
    let x = tape.stack(&rows)?;
    qencoder::encode_inputs(tape, &vars.enc, x)
}

/// Tape handles for one question's reasoning.
pub struct HopOutputs {
    pub logits: Var,
    pub queries: Vec<Var>,
    pub outputs: Vec<Var>,
    pub key_attention: Vec<Var>,
    pub question_attention: Vec<Var>,
}

/// Runs Z hops of addressing, reading and updating, then scores candidates.
pub fn reason(
    tape: &mut Tape,
    enc: &QuestionEncoding,
    slots: &MemorySlots,
    z_hops: usize,
    question_aware: bool,
) -> Result<HopOutputs> {
    let (mut q, _) = init_query(tape, enc)?;
    let mut out = HopOutputs {
        logits: q,
        queries: Vec::with_capacity(z_hops),
        outputs: Vec::with_capacity(z_hops),
        key_attention: Vec::with_capacity(z_hops),
        question_attention: Vec::with_capacity(z_hops),
    };
    let mut o = q;
    for _ in 0..z_hops {
        out.queries.push(q);
        let p = key_address(tape, q, slots)?;
        o = value_read(tape, p, slots)?;
        out.key_attention.push(p);
        out.outputs.push(o);
        q = if question_aware {
            let (next, pv) = query_update(tape, o, enc)?;
            out.question_attention.push(pv);
            next
        } else {
            query_update_plain(tape, o, q)?
        };
    }
    out.logits = predict(tape, o, slots)?;
    Ok(out)
}

/// A question resolved against the graph and vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedQuestion {
    pub id: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    /// Linked entity per token position.
    pub mentions: Vec<Option<EntityId>>,
    pub core: Vec<EntityId>,
    pub candidates: Option<Candidates>,
    pub gold: Vec<EntityId>,
}

impl PreparedQuestion {
    /// Positions of gold answers inside the candidate list.
    pub fn gold_positions(&self) -> Vec<usize> {
        let gold: HashSet<EntityId> = self.gold.iter().copied().collect();
        match &self.candidates {
            Some(c) => c
                .answers
                .iter()
                .enumerate()
                .filter(|(_, e)| gold.contains(e))
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn is_answerable(&self) -> bool {
        self.candidates.as_ref().is_some_and(|c| !c.triples.is_empty())
    }
}

/// Per-hop attention snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct HopTrace {
    pub key_attention: Vec<f64>,
    pub question_attention: Vec<f64>,
    pub query: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningTrace {
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub hops: Vec<HopTrace>,
}

impl ReasoningTrace {
    pub fn collect(tape: &Tape, out: &HopOutputs, tokens: &[String], slot_labels: Vec<String>) -> Self {
        let hops = (0..out.queries.len())
            .map(|z| HopTrace {
                key_attention: tape.value(out.key_attention[z]).data().to_vec(),
                question_attention: out
                    .question_attention
                    .get(z)
                    .map(|&v| tape.value(v).data().to_vec())
                    .unwrap_or_default(),
                query: tape.value(out.queries[z]).data().to_vec(),
                output: tape.value(out.outputs[z]).data().to_vec(),
            })
            .collect();
        Self {
            tokens: tokens.to_vec(),
            slot_labels,
            hops,
        }
    }

    /// Argmax token position of the question attention at each hop.
    pub fn question_argmax(&self) -> Vec<Option<usize>> {
        self.hops
            .iter()
            .map(|h| {
                h.question_attention
                    .iter()
                    .enumerate()
                    .fold(None, |best: Option<(usize, f64)>, (i, &w)| match best {
                        Some((_, bw)) if bw >= w => best,
                        _ => Some((i, w)),
                    })
                    .map(|(i, _)| i)
            })
            .collect()
    }

    /// Rows `hop,kind,index,label,weight`; hops count from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hop,kind,index,label,weight\n");
        for (z, hop) in self.hops.iter().enumerate() {
            for (i, w) in hop.question_attention.iter().enumerate() {
                let _ = writeln!(s, "{},question_token,{},{},{:e}", z + 1, i, csv_field(&self.tokens[i]), w);
            }
            for (i, w) in hop.key_attention.iter().enumerate() {
                let _ = writeln!(s, "{},memory_slot,{},{},{:e}", z + 1, i, csv_field(&self.slot_labels[i]), w);
            }
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Token positions that may carry relation words: outside linked entity
/// mentions and not in [`FUNCTION_TOKENS`].
pub fn relation_positions(tokens: &[String], linker: &EntityLinker) -> Vec<usize> {
    let mut covered = vec![false; tokens.len()];
    for (start, len, _) in linker.link_spans(tokens) {
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
    }
    (0..tokens.len())
        .filter(|&i| !covered[i] && !FUNCTION_TOKENS.contains(&tokens[i].as_str()))
        .collect()
}

/// Whether the per-hop question-attention argmax lands on relation tokens
/// and moves strictly rightward from hop to hop.
pub fn attention_progresses(trace: &ReasoningTrace, relation_tokens: &[usize]) -> bool {
    let argmax = trace.question_argmax();
    if argmax.len() < 2 || argmax.iter().any(Option::is_none) {
        return false;
    }
    let positions: Vec<usize> = argmax.into_iter().flatten().collect();
    positions.iter().all(|p| relation_tokens.contains(p)) && positions.windows(2).all(|w| w[1] > w[0])
}

/// Sorts candidates by probability, ties kept in insertion order.
pub fn rank(candidates: &[EntityId], probs: &[f64]) -> Vec<(EntityId, f64)> {
    let mut ranked: Vec<(EntityId, f64)> = candidates.iter().copied().zip(probs.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    ranked
}

/// Inference switches taken from the model config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReasonSettings {
    pub z_hops: usize,
    pub question_aware: bool,
    pub entity_inputs: bool,
}

/// Answer to one question, with the attention trace.
#[derive(Clone, Debug)]
pub struct Answer {
    pub core: Vec<EntityId>,
    pub ranked: Vec<(EntityId, f64)>,
    pub trace: Option<ReasoningTrace>,
}

impl Answer {
    pub fn top(&self) -> Option<EntityId> {
        self.ranked.first().map(|(e, _)| *e)
    }
}

/// Inference for a batch of prepared questions on one tape with frozen
/// parameters. Results are in input order.
pub fn answer_batch(
    store: &ParamStore,
    params: &ModelParams,
    g: &KnowledgeGraph,
    questions: &[&PreparedQuestion],
    settings: ReasonSettings,
    with_trace: bool,
) -> Result<Vec<Answer>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let vars = params.vars(&bound);
    let entities = union_entities(questions.iter().filter_map(|q| q.candidates.as_ref()));
    let tables = MemoryTables::build(&mut tape, &vars, &entities)?;
    let mut answers = Vec::with_capacity(questions.len());
    for q in questions {
        let cand = match &q.candidates {
            Some(c) if !c.triples.is_empty() => c,
            _ => {
                answers.push(Answer {
                    core: q.core.clone(),
                    ranked: Vec::new(),
                    trace: None,
                });
                continue;
            }
        };
        let enc = encode_question(&mut tape, &vars, q, settings.entity_inputs)?;
        let slots = build_slots(&mut tape, &tables, g, cand, vec![true; cand.triples.len()])?
            .ok_or(QaError::EmptyCore)?;
        let out = reason(&mut tape, &enc, &slots, settings.z_hops, settings.question_aware)?;
        let probs = diffcore::tape::softmax_values(tape.value(out.logits).data(), None);
        let trace = with_trace.then(|| {
            let labels = cand
                .triples
                .iter()
                .map(|&t| {
                    let tr = g.triple(t);
                    format!(
                        "{}|{}|{}",
                        g.entity_name(tr.head),
                        g.relation_name(tr.relation),
                        g.entity_name(tr.tail)
                    )
                })
                .collect();
            ReasoningTrace::collect(&tape, &out, &q.tokens, labels)
        });
        answers.push(Answer {
            core: q.core.clone(),
            ranked: rank(&slots.candidates, &probs),
            trace,
        });
    }
    Ok(answers)
}
