//! Question datasets: the canonical line-delimited format, adapters for
//! the PathQuestion and WorldCup2014 releases, and template-generated
//! synthetic data.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::kgstore::{EntityId, KnowledgeGraph};
use crate::reasoner::{normalize_surface, EntityLinker};

/// Share of unresolvable answers tolerated by the release adapters.
pub const MAX_UNRESOLVED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_entities: Option<Vec<String>>,
    /// `[head, relation, tail]` hops, for diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<[String; 3]>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl QaExample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(QaError::Dataset(format!("{}: no answers", self.id)));
        }
        if let Some(path) = &self.path {
            let last = path.last().map(|t| t[2].as_str());
            if let Some(tail) = last {
                let tail = normalize_surface(tail);
                if !self.answers.iter().any(|a| normalize_surface(a) == tail) {
                    return Err(QaError::Dataset(format!("{}: path does not end in an answer", self.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<QaExample>,
    pub tags: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples none of whose answers resolve to a graph entity.
    pub fn unresolved(&self, g: &KnowledgeGraph) -> Vec<&str> {
        let linker = EntityLinker::new(g);
        self.examples
            .iter()
            .filter(|ex| ex.answers.iter().all(|a| linker.lookup(a).is_none()))
            .map(|ex| ex.id.as_str())
            .collect()
    }

    pub fn mean_tokens(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let total: usize = self.examples.iter().map(|e| e.question.split_whitespace().count()).sum();
        total as f64 / self.examples.len() as f64
    }
}

/// One JSON object per line.
pub fn to_canonical(ds: &Dataset) -> String {
    let mut s = String::new();
    for ex in &ds.examples {
        s.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        s.push('\n');
    }
    s
}

pub fn parse_canonical(text: &str, name: &str, origin: &Path) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|e| QaError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate()?;
        examples.push(ex);
    }
    Ok(Dataset {
        name: name.to_string(),
        examples,
        tags: Vec::new(),
    })
}

pub fn export_canonical(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| QaError::io(path, e))?;
    f.write_all(to_canonical(ds).as_bytes()).map_err(|e| QaError::io(path, e))
}

pub fn load_canonical(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| QaError::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_canonical(&text, name, path)
}

/// Splits `main(alt1/alt2)` into distinct answers.
pub fn parse_answer_field(field: &str) -> Vec<String> {
    let field = field.trim();
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        let s = s.trim();
        if !s.is_empty() && !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    };
    match (field.find('('), field.ends_with(')')) {
        (Some(open), true) => {
            push(&field[..open]);
            for alt in field[open + 1..field.len() - 1].split('/') {
                push(alt);
            }
        }
        _ => push(field),
    }
    out
}

/// Parses `e1#r1#e2#...#en`. Returns `None` for anything malformed.
pub fn parse_path_field(field: &str) -> Option<Vec<[String; 3]>> {
    let parts: Vec<&str> = field.trim().split('#').map(str::trim).collect();
    if parts.len() < 3 || parts.len().is_multiple_of(2) || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    Some(
        (0..parts.len() / 2)
            .map(|i| [parts[2 * i].to_string(), parts[2 * i + 1].to_string(), parts[2 * i + 2].to_string()])
            .collect(),
    )
}

/// Parses release question lines `question<TAB>answers<TAB>path`.
pub fn parse_release_questions(text: &str, prefix: &str, tag: &str, origin: &Path) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(QaError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected question<TAB>answers[<TAB>path]".into(),
            });
        }
        let answers = parse_answer_field(fields[1]);
        if answers.is_empty() {
            return Err(QaError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "empty answer field".into(),
            });
        }
        let mut path = fields.get(2).and_then(|f| parse_path_field(f));
        let core = path.as_ref().map(|p| vec![p[0][0].clone()]);
        if let Some(p) = &path {
            let tail = normalize_surface(&p[p.len() - 1][2]);
            if !answers.iter().any(|a| normalize_surface(a) == tail) {
                path = None;
            }
        }
        out.push(QaExample {
            id: format!("{prefix}-{}", out.len()),
            question: fields[0].trim().to_string(),
            answers,
            core_entities: core,
            path,
            tags: vec![tag.to_string()],
        });
    }
    Ok(out)
}

/// Parses a release KB: three fields per line, tab- or whitespace-separated.
pub fn parse_release_kb(text: &str, origin: &Path) -> Result<KnowledgeGraph> {
    let mut g = KnowledgeGraph::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(QaError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        g.add(fields[0], fields[1], fields[2]);
    }
    Ok(g)
}

fn find_file(dir: &Path, names: &[String]) -> Result<PathBuf> {
    for n in names {
        let p = dir.join(n);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(QaError::Dataset(format!(
        "none of {} found in {}",
        names.join(", "),
        dir.display()
    )))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| QaError::io(path, e))
}

/// Drops nothing, but fails when more than 1% of examples have answers
/// outside the graph.
fn check_resolution(ds: &Dataset, g: &KnowledgeGraph) -> Result<()> {
    let bad = ds.unresolved(g);
    if bad.is_empty() {
        return Ok(());
    }
    let frac = bad.len() as f64 / ds.len().max(1) as f64;
    log::warn!("{}: {} examples with unresolvable answers ({:.2}%)", ds.name, bad.len(), 100.0 * frac);
    if frac > MAX_UNRESOLVED_FRACTION {
        return Err(QaError::Dataset(format!(
            "{}: {:.2}% of answers do not resolve to graph entities",
            ds.name,
            100.0 * frac
        )));
    }
    Ok(())
}

/// Reads one PathQuestion subset (`PQ-2H`, `PQ-3H`, `PQL-2H`, `PQL-3H`)
/// from a release directory.
pub fn parse_pathquestion(dir: impl AsRef<Path>, subset: &str) -> Result<(Dataset, KnowledgeGraph)> {
    let dir = dir.as_ref();
    let q_path = find_file(dir, &[format!("{subset}.txt")])?;
    let (family, hops) = subset
        .split_once('-')
        .ok_or_else(|| QaError::Dataset(format!("bad subset name {subset:?}")))?;
    let kb_names = match family {
        "PQ" => vec![format!("{hops}-kb.txt"), format!("{subset}-kb.txt"), "kb.txt".to_string()],
        _ => vec![
            format!("{family}{}-KB.txt", hops.trim_end_matches('H')),
            format!("{subset}-kb.txt"),
            format!("{family}-{hops}-kb.txt"),
            "kb.txt".to_string(),
        ],
    };
    let kb_path = find_file(dir, &kb_names)?;
    let g = parse_release_kb(&read(&kb_path)?, &kb_path)?;
    let examples = parse_release_questions(&read(&q_path)?, subset, hops, &q_path)?;
    let ds = Dataset {
        name: subset.to_string(),
        examples,
        tags: vec![hops.to_string()],
    };
    log::info!(
        "{subset}: {} questions, {} entities, {} triples, {:.2} tokens/question",
        ds.len(),
        g.num_entities(),
        g.num_triples(),
        ds.mean_tokens()
    );
    check_resolution(&ds, &g)?;
    Ok((ds, g))
}

/// Reads the WorldCup2014 release: `WC-1H.txt`, `WC-2H.txt`, `WC-C.txt`
/// (any present) against one KB file.
pub fn parse_worldcup(dir: impl AsRef<Path>) -> Result<(Dataset, KnowledgeGraph)> {
    let dir = dir.as_ref();
    let kb_path = find_file(
        dir,
        &["WC2014-kb.txt".into(), "WC-kb.txt".into(), "kb.txt".into(), "WC2014.txt".into()],
    )?;
    let g = parse_release_kb(&read(&kb_path)?, &kb_path)?;
    let mut examples = Vec::new();
    let mut tags = Vec::new();
    for (file, tag) in [("WC-1H.txt", "1H"), ("WC-2H.txt", "2H"), ("WC-C.txt", "C")] {
        let p = dir.join(file);
        if p.is_file() {
            examples.extend(parse_release_questions(&read(&p)?, &format!("WC-{tag}"), tag, &p)?);
            tags.push(tag.to_string());
        }
    }
    if examples.is_empty() {
        return Err(QaError::Dataset(format!("no WorldCup question files in {}", dir.display())));
    }
    let ds = Dataset {
        name: "WC".into(),
        examples,
        tags,
    };
    check_resolution(&ds, &g)?;
    Ok((ds, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub hops: usize,
    pub count: usize,
    pub seed: u64,
    pub out_degree: usize,
    pub unique_answers: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            entities: 200,
            relations: 8,
            hops: 2,
            count: 1000,
            seed: 7,
            out_degree: 3,
            unique_answers: false,
        }
    }
}

/// Every entity reachable from `start` by following `relations` in order.
fn follow(g: &KnowledgeGraph, start: EntityId, relations: &[crate::kgstore::RelationId]) -> Vec<EntityId> {
    let mut frontier = vec![start];
    for &r in relations {
        let mut next = Vec::new();
        for e in frontier {
            for &t in g.by_head(e) {
                let tr = g.triple(t);
                if tr.relation == r && !next.contains(&tr.tail) {
                    next.push(tr.tail);
                }
            }
        }
        frontier = next;
    }
    frontier
}

/// Undirected hop distance from `start`, computed over the raw triple list.
fn bfs_depths(g: &KnowledgeGraph, start: EntityId) -> Vec<Option<usize>> {
    let n = g.num_entities();
    let mut adj = vec![Vec::new(); n];
    for t in g.triples() {
        adj[t.head.0].push(t.tail.0);
        adj[t.tail.0].push(t.head.0);
    }
    let mut depth = vec![None; n];
    depth[start.0] = Some(0);
    let mut queue = VecDeque::from([start.0]);
    while let Some(u) = queue.pop_front() {
        let d = depth[u].unwrap_or(0);
        for &v in &adj[u] {
            if depth[v].is_none() {
                depth[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    depth
}

/// A random graph where every entity has `out_degree` outgoing triples, and
/// template questions `what is the <e> 's <r1> 's <r2> ... ?` whose answers
/// are every endpoint of the relation path. Each answer is checked to lie
/// within `hops` undirected hops of the core entity.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, KnowledgeGraph)> {
    if spec.entities < 2 || spec.relations == 0 || spec.hops == 0 || spec.out_degree == 0 {
        return Err(QaError::Dataset("synthetic generation needs >= 2 entities and positive sizes".into()));
    }
    if spec.out_degree >= spec.entities * spec.relations {
        return Err(QaError::Dataset("out_degree too large for the graph size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut g = KnowledgeGraph::new();
    let names: Vec<String> = (0..spec.entities).map(|i| format!("e{i}")).collect();
    let rels: Vec<String> = (0..spec.relations).map(|i| format!("r{i}")).collect();
    for n in &names {
        g.add_entity(n);
    }
    for h in 0..spec.entities {
        let mut added = 0;
        while added < spec.out_degree {
            let r = rng.gen_range(0..spec.relations);
            let mut t = rng.gen_range(0..spec.entities - 1);
            if t >= h {
                t += 1;
            }
            if g.add(&names[h], &rels[r], &names[t]) {
                added += 1;
            }
        }
    }

    let mut examples = Vec::with_capacity(spec.count);
    let mut seen_questions = HashSet::new();
    let mut attempts = 0usize;
    let max_attempts = spec.count.saturating_mul(200).max(1000);
    while examples.len() < spec.count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(QaError::Dataset(format!(
                "could only generate {} of {} distinct questions",
                examples.len(),
                spec.count
            )));
        }
        let start = EntityId(rng.gen_range(0..spec.entities));
        let mut path = Vec::with_capacity(spec.hops);
        let mut cur = start;
        for _ in 0..spec.hops {
            let &t = g.by_head(cur).choose(&mut rng).expect("every entity has out-edges");
            let tr = g.triple(t);
            path.push(tr);
            cur = tr.tail;
        }
        let rel_seq: Vec<_> = path.iter().map(|t| t.relation).collect();
        let answers = follow(&g, start, &rel_seq);
        if spec.unique_answers && answers.len() != 1 {
            continue;
        }
        let mut question = format!("what is the {}", g.entity_name(start));
        for r in &rel_seq {
            question.push_str(" 's ");
            question.push_str(g.relation_name(*r));
        }
        question.push_str(" ?");
        if !seen_questions.insert(question.clone()) {
            continue;
        }
        // endpoint of the sampled walk goes first
        let mut ordered = vec![cur];
        ordered.extend(answers.iter().copied().filter(|&a| a != cur));
        examples.push(QaExample {
            id: format!("syn-{}", examples.len()),
            question,
            answers: ordered.iter().map(|&e| g.entity_name(e).to_string()).collect(),
            core_entities: Some(vec![g.entity_name(start).to_string()]),
            path: Some(
                path.iter()
                    .map(|t| {
                        [
                            g.entity_name(t.head).to_string(),
                            g.relation_name(t.relation).to_string(),
                            g.entity_name(t.tail).to_string(),
                        ]
                    })
                    .collect(),
            ),
            tags: vec![format!("{}H", spec.hops)],
        });
    }

    for ex in &examples {
        let core = g.entity_id(&ex.core_entities.as_ref().expect("set above")[0]).expect("known");
        let depth = bfs_depths(&g, core);
        for a in &ex.answers {
            let e = g.entity_id(a).expect("known");
            if !depth[e.0].is_some_and(|d| d <= spec.hops) {
                return Err(QaError::Dataset(format!("{}: answer {a} unreachable from core", ex.id)));
            }
        }
    }
    let ds = Dataset {
        name: format!("synthetic-{}H", spec.hops),
        examples,
        tags: vec![format!("{}H", spec.hops)],
    };
    Ok((ds, g))
}
