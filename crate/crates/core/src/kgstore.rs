//! Immutable triple store with adjacency indexes, K-hop candidate
//! retrieval, head/tail contexts and incomplete-graph simulation.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QaError, Result};

/// Default cap on memory slots per question.
pub const DEFAULT_MAX_CANDIDATES: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Insertion-ordered bijection between surface forms and dense ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), self.items.len() - 1);
        self.items.len() - 1
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

/// K-hop memory candidates: the triples `T_C` in nearest-first order and
/// the entities `A_C` in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub triples: Vec<TripleId>,
    pub answers: Vec<EntityId>,
    pub truncated: bool,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    by_head: Vec<Vec<TripleId>>,
    by_tail: Vec<Vec<TripleId>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a triple by surface forms. Returns `false` for a duplicate.
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = EntityId(self.entities.intern(head));
        let r = RelationId(self.relations.intern(relation));
        let t = EntityId(self.entities.intern(tail));
        self.push(Triple {
            head: h,
            relation: r,
            tail: t,
        })
    }

    pub fn add_entity(&mut self, name: &str) -> EntityId {
        let id = EntityId(self.entities.intern(name));
        self.grow_indexes();
        id
    }

    fn grow_indexes(&mut self) {
        let n = self.entities.len();
        if self.by_head.len() < n {
            self.by_head.resize_with(n, Vec::new);
            self.by_tail.resize_with(n, Vec::new);
        }
    }

    fn push(&mut self, triple: Triple) -> bool {
        self.grow_indexes();
        if !self.seen.insert(triple) {
            return false;
        }
        let id = TripleId(self.triples.len());
        self.triples.push(triple);
        self.by_head[triple.head.0].push(id);
        self.by_tail[triple.tail.0].push(id);
        true
    }

    /// Parses `head<TAB>relation<TAB>tail` lines; `#` lines and blank lines
    /// are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut g = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(QaError::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            g.add(fields[0], fields[1], fields[2]);
        }
        Ok(g)
    }

    pub fn load_triples(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QaError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_triple_text(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(self.entity_name(t.head));
            out.push('\t');
            out.push_str(self.relation_name(t.relation));
            out.push('\t');
            out.push_str(self.entity_name(t.tail));
            out.push('\n');
        }
        out
    }

    pub fn write_triples(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_triple_text()).map_err(|e| QaError::io(path, e))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: TripleId) -> Triple {
        self.triples[id.0]
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.seen.contains(triple)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn by_head(&self, e: EntityId) -> &[TripleId] {
        &self.by_head[e.0]
    }

    pub fn by_tail(&self, e: EntityId) -> &[TripleId] {
        &self.by_tail[e.0]
    }

    /// Entities one undirected edge away, in triple-id order (outgoing first).
    pub fn neighbors(&self, e: EntityId) -> impl Iterator<Item = EntityId> + '_ {
        let out = self.by_head[e.0].iter().map(|&t| self.triples[t.0].tail);
        let inc = self.by_tail[e.0].iter().map(|&t| self.triples[t.0].head);
        out.chain(inc)
    }

    /// Every triple sharing `t`'s head, `t` included.
    pub fn head_context(&self, t: TripleId) -> Result<&[TripleId]> {
        let triple = self.triples.get(t.0).ok_or(QaError::UnknownTriple(t.0))?;
        Ok(&self.by_head[triple.head.0])
    }

    /// Every triple sharing `t`'s tail, `t` included.
    pub fn tail_context(&self, t: TripleId) -> Result<&[TripleId]> {
        let triple = self.triples.get(t.0).ok_or(QaError::UnknownTriple(t.0))?;
        Ok(&self.by_tail[triple.tail.0])
    }

    /// Triples incident to any entity within `k - 1` undirected hops of
    /// `core`, nearest-first, capped at `max_triples`.
    pub fn k_hop_candidates(&self, core: &[EntityId], k: usize, max_triples: usize) -> Result<Candidates> {
        if k == 0 {
            return Err(QaError::BadHops(k));
        }
        if core.is_empty() {
            return Err(QaError::EmptyCore);
        }
        let mut depth: HashMap<EntityId, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        let mut order = Vec::new();
        for &e in core {
            if e.0 >= self.num_entities() {
                return Err(QaError::UnknownEntity(e.0));
            }
            if depth.insert(e, 0).is_none() {
                queue.push_back(e);
                order.push(e);
            }
        }
        while let Some(e) = queue.pop_front() {
            let d = depth[&e];
            if d + 1 >= k {
                continue;
            }
            for n in self.neighbors(e) {
                if let std::collections::hash_map::Entry::Vacant(slot) = depth.entry(n) {
                    slot.insert(d + 1);
                    queue.push_back(n);
                    order.push(n);
                }
            }
        }

        let mut picked = HashSet::new();
        let mut triples = Vec::new();
        let mut truncated = false;
        'outer: for e in order {
            for &t in self.by_head[e.0].iter().chain(&self.by_tail[e.0]) {
                if picked.insert(t) {
                    if triples.len() == max_triples {
                        truncated = true;
                        break 'outer;
                    }
                    triples.push(t);
                }
            }
        }
        if truncated {
            log::warn!("candidate set truncated to {max_triples} triples");
        }

        let mut seen = HashSet::new();
        let mut answers = Vec::new();
        for &t in &triples {
            let tr = self.triples[t.0];
            for e in [tr.head, tr.tail] {
                if seen.insert(e) {
                    answers.push(e);
                }
            }
        }
        Ok(Candidates {
            triples,
            answers,
            truncated,
        })
    }

    /// Removes `⌊fraction · |triples|⌋` uniformly chosen triples. Survivors
    /// keep their relative order; vocabularies are unchanged.
    pub fn drop_triples(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(QaError::InvalidConfig {
                key: "fraction".into(),
                message: format!("{fraction} not in [0, 1)"),
            });
        }
        let remove = (fraction * self.triples.len() as f64).floor() as usize;
        let mut ids: Vec<usize> = (0..self.triples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let removed: HashSet<usize> = ids[..remove].iter().copied().collect();

        let mut g = Self {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            ..Self::default()
        };
        g.grow_indexes();
        for (i, t) in self.triples.iter().enumerate() {
            if !removed.contains(&i) {
                g.push(*t);
            }
        }
        Ok(g)
    }
}
