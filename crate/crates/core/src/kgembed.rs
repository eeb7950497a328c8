//! Graph-context translational embedding: triple scoring, head/tail context
//! aggregation, the combined margin loss and the pretraining loop.

use diffcore::{clip_gradients, linalg, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::kgstore::{EntityId, KnowledgeGraph, RelationId, Triple, TripleId};

pub const ENTITY_PARAM: &str = "kge.E_ent";
pub const RELATION_PARAM: &str = "kge.E_rel";
pub const PROJECTION_PARAM: &str = "kge.W_e2r";

const PROJECTION_NOISE: f64 = 0.01;
const CORRUPTION_RETRIES: usize = 10;

/// Handles to the three embedding tensors inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KgEmbeddingParams {
    pub ent: ParamId,
    pub rel: ParamId,
    pub w: ParamId,
}

impl KgEmbeddingParams {
    /// Registers freshly initialized embeddings: rows uniform in
    /// `±6/√d`, projection `I + N(0, 0.01²)`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, g: &KnowledgeGraph, dim: usize, rng: &mut R) -> Self {
        let bound = 6.0 / (dim as f64).sqrt();
        let ent = Tensor::uniform(&[g.num_entities().max(1), dim], -bound, bound, rng);
        let rel = Tensor::uniform(&[g.num_relations().max(1), dim], -bound, bound, rng);
        let mut w = Tensor::gaussian(&[dim, dim], PROJECTION_NOISE, rng);
        for i in 0..dim {
            w.data_mut()[i * dim + i] += 1.0;
        }
        let p = Self {
            ent: store.insert(ENTITY_PARAM, ent),
            rel: store.insert(RELATION_PARAM, rel),
            w: store.insert(PROJECTION_PARAM, w),
        };
        project_entity_norms(store, p);
        p
    }

    pub fn find(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            ent: store.require(ENTITY_PARAM)?,
            rel: store.require(RELATION_PARAM)?,
            w: store.require(PROJECTION_PARAM)?,
        })
    }

    pub fn vars(&self, bound: &diffcore::BoundParams) -> KgeVars {
        KgeVars {
            ent: bound.var(self.ent),
            rel: bound.var(self.rel),
            w: bound.var(self.w),
        }
    }
}

/// The embedding tensors as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct KgeVars {
    pub ent: Var,
    pub rel: Var,
    pub w: Var,
}

/// Rescales every entity row with norm above 1 back onto the unit sphere.
pub fn project_entity_norms(store: &mut ParamStore, p: KgEmbeddingParams) {
    let e = store.tensor_mut(p.ent);
    for i in 0..e.rows() {
        let row = e.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

pub fn max_entity_norm(store: &ParamStore, p: KgEmbeddingParams) -> f64 {
    let e = store.tensor(p.ent);
    (0..e.rows())
        .map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Per-entity context rows: head contexts are keyed by head entity (every
/// triple with that head), tail contexts by tail entity.
#[derive(Clone, Debug)]
pub struct ContextCache {
    head: Vec<Vec<(EntityId, RelationId)>>,
    tail: Vec<Vec<(EntityId, RelationId)>>,
    triples: usize,
}

impl ContextCache {
    pub fn new(g: &KnowledgeGraph) -> Self {
        let n = g.num_entities();
        let mut head = vec![Vec::new(); n];
        let mut tail = vec![Vec::new(); n];
        for t in g.triples() {
            head[t.head.0].push((t.tail, t.relation));
            tail[t.tail.0].push((t.head, t.relation));
        }
        Self {
            head,
            tail,
            triples: g.num_triples(),
        }
    }

    /// `(tail, relation)` pairs of the head context of a triple with head `h`.
    pub fn head_rows(&self, h: EntityId) -> &[(EntityId, RelationId)] {
        &self.head[h.0]
    }

    /// `(head, relation)` pairs of the tail context of a triple with tail `t`.
    pub fn tail_rows(&self, t: EntityId) -> &[(EntityId, RelationId)] {
        &self.tail[t.0]
    }

    pub fn is_current(&self, g: &KnowledgeGraph) -> bool {
        self.triples == g.num_triples() && self.head.len() == g.num_entities()
    }
}

/// Plain-value scorer over a parameter snapshot; `W⁻¹` is computed once.
pub struct KgeScorer<'a> {
    ent: &'a Tensor,
    rel: &'a Tensor,
    w: &'a Tensor,
    w_inv: Tensor,
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl<'a> KgeScorer<'a> {
    pub fn new(store: &'a ParamStore, p: KgEmbeddingParams) -> Result<Self> {
        let w = store.tensor(p.w);
        let w_inv = linalg::regularized_inverse(w)?;
        if log::log_enabled!(log::Level::Debug) {
            if let Ok(c) = linalg::condition_number(w) {
                log::debug!("W_e2r condition number {c:.3e}");
            }
        }
        Ok(Self {
            ent: store.tensor(p.ent),
            rel: store.tensor(p.rel),
            w,
            w_inv,
        })
    }

    pub fn translational_distance(&self, t: &Triple) -> f64 {
        let wh = matvec(self.w, self.ent.row(t.head.0));
        let wt = matvec(self.w, self.ent.row(t.tail.0));
        let lhs: Vec<f64> = wh.iter().zip(self.rel.row(t.relation.0)).map(|(a, b)| a + b).collect();
        dist(&lhs, &wt)
    }

    fn context_mean(&self, rows: &[(EntityId, RelationId)], sign: f64) -> Vec<f64> {
        let d = self.ent.cols();
        let mut acc = vec![0.0; d];
        for &(e, r) in rows {
            let shift = matvec(&self.w_inv, self.rel.row(r.0));
            for ((a, x), s) in acc.iter_mut().zip(self.ent.row(e.0)).zip(&shift) {
                *a += x + sign * s;
            }
        }
        let n = rows.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Mean of `E_t − W⁻¹E_r` over the head context.
    pub fn head_context_embedding(&self, t: &Triple, cache: &ContextCache) -> Vec<f64> {
        self.context_mean(cache.head_rows(t.head), -1.0)
    }

    /// Mean of `E_h + W⁻¹E_r` over the tail context.
    pub fn tail_context_embedding(&self, t: &Triple, cache: &ContextCache) -> Vec<f64> {
        self.context_mean(cache.tail_rows(t.tail), 1.0)
    }

    pub fn head_context_distance(&self, t: &Triple, cache: &ContextCache) -> f64 {
        dist(self.ent.row(t.head.0), &self.head_context_embedding(t, cache))
    }

    pub fn tail_context_distance(&self, t: &Triple, cache: &ContextCache) -> f64 {
        dist(self.ent.row(t.tail.0), &self.tail_context_embedding(t, cache))
    }
}

/// Bernoulli corruption: per relation, the probability of replacing the head
/// is `tph / (tph + hpt)`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    head_prob: Vec<f64>,
    num_entities: usize,
}

impl NegativeSampler {
    pub fn new(g: &KnowledgeGraph) -> Self {
        use std::collections::HashMap;
        let nr = g.num_relations();
        let mut heads: Vec<HashMap<EntityId, usize>> = vec![HashMap::new(); nr];
        let mut tails: Vec<HashMap<EntityId, usize>> = vec![HashMap::new(); nr];
        for t in g.triples() {
            *heads[t.relation.0].entry(t.head).or_default() += 1;
            *tails[t.relation.0].entry(t.tail).or_default() += 1;
        }
        let head_prob = (0..nr)
            .map(|r| {
                let total: usize = heads[r].values().sum();
                if total == 0 {
                    return 0.5;
                }
                let tph = total as f64 / heads[r].len() as f64;
                let hpt = total as f64 / tails[r].len() as f64;
                tph / (tph + hpt)
            })
            .collect();
        Self {
            head_prob,
            num_entities: g.num_entities(),
        }
    }

    pub fn head_probability(&self, r: RelationId) -> f64 {
        self.head_prob[r.0]
    }

    /// A corrupted copy of `t`, retrying a few times to avoid known triples.
    pub fn corrupt<R: Rng + ?Sized>(&self, g: &KnowledgeGraph, t: &Triple, rng: &mut R) -> Triple {
        let mut out = *t;
        for _ in 0..CORRUPTION_RETRIES {
            out = *t;
            let e = EntityId(rng.gen_range(0..self.num_entities));
            if rng.gen::<f64>() < self.head_prob[t.relation.0] {
                out.head = e;
            } else {
                out.tail = e;
            }
            if !g.contains(&out) {
                break;
            }
        }
        out
    }
}

/// Translational distances `‖W E_h + E_r − W E_t‖` for a list of triples,
/// as a vector on the tape.
pub fn translational_distances(tape: &mut Tape, v: KgeVars, triples: &[Triple]) -> Result<Var> {
    let hs: Vec<usize> = triples.iter().map(|t| t.head.0).collect();
    let rs: Vec<usize> = triples.iter().map(|t| t.relation.0).collect();
    let ts: Vec<usize> = triples.iter().map(|t| t.tail.0).collect();
    let wt = tape.transpose(v.w)?;
    let h = tape.gather(v.ent, &hs)?;
    let t = tape.gather(v.ent, &ts)?;
    let diff = tape.sub(h, t)?;
    let proj = tape.matmul(diff, wt)?;
    let r = tape.gather(v.rel, &rs)?;
    let res = tape.add(proj, r)?;
    Ok(tape.row_norms(res)?)
}

/// Context distances `d_Ch` and `d_Ct` for each triple, as two vectors.
pub fn context_distances(tape: &mut Tape, v: KgeVars, cache: &ContextCache, triples: &[Triple]) -> Result<(Var, Var)> {
    let w_inv = tape.inverse(v.w, true)?;
    let w_inv_t = tape.transpose(w_inv)?;
    let shifted = tape.matmul(v.rel, w_inv_t)?;

    let mut head_means = Vec::with_capacity(triples.len());
    let mut tail_means = Vec::with_capacity(triples.len());
    let mut memo_h = std::collections::HashMap::new();
    let mut memo_t = std::collections::HashMap::new();
    for t in triples {
        let hm = match memo_h.get(&t.head) {
            Some(&m) => m,
            None => {
                let rows = cache.head_rows(t.head);
                let m = context_mean(tape, v.ent, shifted, rows, -1.0)?;
                memo_h.insert(t.head, m);
                m
            }
        };
        let tm = match memo_t.get(&t.tail) {
            Some(&m) => m,
            None => {
                let rows = cache.tail_rows(t.tail);
                let m = context_mean(tape, v.ent, shifted, rows, 1.0)?;
                memo_t.insert(t.tail, m);
                m
            }
        };
        head_means.push(hm);
        tail_means.push(tm);
    }
    let hs: Vec<usize> = triples.iter().map(|t| t.head.0).collect();
    let ts: Vec<usize> = triples.iter().map(|t| t.tail.0).collect();
    let h = tape.gather(v.ent, &hs)?;
    let t = tape.gather(v.ent, &ts)?;
    let hm = tape.stack(&head_means)?;
    let tm = tape.stack(&tail_means)?;
    let dh = tape.sub(h, hm)?;
    let dt = tape.sub(t, tm)?;
    Ok((tape.row_norms(dh)?, tape.row_norms(dt)?))
}

fn context_mean(
    tape: &mut Tape,
    ent: Var,
    shifted: Var,
    rows: &[(EntityId, RelationId)],
    sign: f64,
) -> Result<Var> {
    let es: Vec<usize> = rows.iter().map(|(e, _)| e.0).collect();
    let rs: Vec<usize> = rows.iter().map(|(_, r)| r.0).collect();
    let e = tape.gather(ent, &es)?;
    let s = tape.gather(shifted, &rs)?;
    let combined = if sign < 0.0 { tape.sub(e, s)? } else { tape.add(e, s)? };
    Ok(tape.mean_rows(combined)?)
}

/// `Σ (d_t + d_Ch + d_Ct)` over positives plus the margin hinge
/// `Σ max(0, margin + d_t(pos) − d_t(neg))`. `negatives` holds
/// `negatives.len() / positives.len()` corruptions per positive, grouped by
/// positive.
pub fn kge_loss(
    tape: &mut Tape,
    v: KgeVars,
    cache: &ContextCache,
    positives: &[Triple],
    negatives: &[Triple],
    margin: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(crate::error::QaError::Model("kge_loss needs a non-empty batch".into()));
    }
    let per = negatives.len() / positives.len();
    let mut all: Vec<Triple> = positives.to_vec();
    for p in positives {
        all.extend(std::iter::repeat_n(*p, per));
    }
    all.extend_from_slice(negatives);
    let b = positives.len();
    let n = b * per;
    let d = translational_distances(tape, v, &all)?;
    let d_pos = tape.slice(d, 0, b)?;
    let (d_ch, d_ct) = context_distances(tape, v, cache, positives)?;
    let mut terms = vec![tape.sum(d_pos)?, tape.sum(d_ch)?, tape.sum(d_ct)?];
    if n > 0 {
        let rep = tape.slice(d, b, n)?;
        let neg = tape.slice(d, b + n, n)?;
        let gap = tape.sub(rep, neg)?;
        let shifted = tape.affine(gap, 1.0, margin)?;
        let hinge = tape.relu(shifted)?;
        terms.push(tape.sum(hinge)?);
    }
    Ok(tape.add_n(&terms)?)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Optimizer state and sampling for KGE updates, reusable between the
/// pretraining stage and the refresh batches of joint training.
pub struct KgeTrainer {
    pub params: KgEmbeddingParams,
    cache: ContextCache,
    sampler: NegativeSampler,
    adam: AdamState,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl KgeTrainer {
    pub fn new(store: &ParamStore, params: KgEmbeddingParams, g: &KnowledgeGraph, seed: u64) -> Self {
        let mut t = Self {
            params,
            cache: ContextCache::new(g),
            sampler: NegativeSampler::new(g),
            adam: AdamState::new(store),
            order: (0..g.num_triples()).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6b67_655f_7365_6564),
        };
        t.order.shuffle(&mut t.rng);
        t
    }

    pub fn cache(&self) -> &ContextCache {
        &self.cache
    }

    /// Next batch of triple ids in the current shuffled pass, reshuffling
    /// when a pass is exhausted. Returns `None` at the end of a pass.
    fn next_batch(&mut self, size: usize) -> Option<Vec<usize>> {
        if self.order.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.cursor = 0;
            self.order.shuffle(&mut self.rng);
            return None;
        }
        let end = (self.cursor + size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }

    /// One optimizer step on the given triples. Returns the batch loss.
    pub fn step(&mut self, store: &mut ParamStore, g: &KnowledgeGraph, ids: &[usize], cfg: &TrainConfig, lr: f64) -> Result<f64> {
        let positives: Vec<Triple> = ids.iter().map(|&i| g.triple(TripleId(i))).collect();
        let mut negatives = Vec::with_capacity(positives.len() * cfg.negatives);
        for p in &positives {
            for _ in 0..cfg.negatives {
                negatives.push(self.sampler.corrupt(g, p, &mut self.rng));
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let v = self.params.vars(&bound);
        let loss = kge_loss(&mut tape, v, &self.cache, &positives, &negatives, cfg.margin)?;
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        let mut grads = store.grads(&tape, &bound);
        clip_gradients(&mut grads, cfg.grad_clip);
        self.adam.step(store, &grads, lr)?;
        project_entity_norms(store, self.params);
        Ok(value)
    }

    /// Runs one refresh batch, wrapping around the triple order as needed.
    pub fn refresh(&mut self, store: &mut ParamStore, g: &KnowledgeGraph, cfg: &TrainConfig, lr: f64) -> Result<Option<f64>> {
        let batch = match self.next_batch(cfg.batch_size_kge) {
            Some(b) => b,
            None => match self.next_batch(cfg.batch_size_kge) {
                Some(b) => b,
                None => return Ok(None),
            },
        };
        self.step(store, g, &batch, cfg, lr).map(Some)
    }

    /// One full pass over the triples. Returns the mean loss per triple.
    pub fn epoch(&mut self, store: &mut ParamStore, g: &KnowledgeGraph, cfg: &TrainConfig, lr: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        while let Some(batch) = self.next_batch(cfg.batch_size_kge) {
            let l = self.step(store, g, &batch, cfg, lr)?;
            if !l.is_finite() {
                return Err(crate::error::QaError::Diverged { epoch: 0, loss: l });
            }
            total += l;
            count += batch.len();
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}

/// Stage-one pretraining: `kge_pretrain_epochs` passes of minibatch Adam.
pub fn pretrain(store: &mut ParamStore, params: KgEmbeddingParams, g: &KnowledgeGraph, cfg: &TrainConfig) -> Result<PretrainReport> {
    let mut trainer = KgeTrainer::new(store, params, g, cfg.seed);
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.kge_pretrain_epochs {
        let loss = trainer.epoch(store, g, cfg, cfg.lr_at(epoch)).map_err(|e| match e {
            crate::error::QaError::Diverged { loss, .. } => crate::error::QaError::Diverged { epoch, loss },
            other => other,
        })?;
        log::info!("kge epoch {epoch}: loss {loss:.5}");
        report.epoch_losses.push(loss);
    }
    Ok(report)
}
