//! One test per acceptance criterion. Each prints a single
//! `ACCEPTANCE <n> <name>: PASS|FAIL (<detail>)` line, then asserts it.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use diffcore::gradcheck::{check_gradients, DEFAULT_EPS};
use diffcore::{ParamStore, Tape, Tensor, Var};
use qa2mn::dataio::{generate_synthetic, QaExample, SyntheticSpec};
use qa2mn::kgembed::{self, ContextCache, KgEmbeddingParams, KgeScorer, KgeVars, NegativeSampler};
use qa2mn::qencoder::{tokenize, DirectionVars, EncoderVars, QuestionEncoding, TokenVocab};
use qa2mn::reasoner::{self, EntityLinker, MemorySlots, MemoryTables, ModelVars};
use qa2mn::{EntityId, KnowledgeGraph, Qa2mn, TrainConfig, TripleId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use validation::{blocked, load_pathquestion, train_and_test, verdict, RunResult};

const OP_TOLERANCE: f64 = 1e-5;
const END_TO_END_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOLERANCE: f64 = 1e-10;
const ORACLE_INSTANCES: u64 = 100;
const SYNTHETIC_HITS: f64 = 0.95;
const SYNTHETIC_BUDGET: Duration = Duration::from_secs(600);
const PQ_BUDGET: Duration = Duration::from_secs(30 * 60);
const PQ2_HITS: f64 = 0.93;
const PQ3_HITS: f64 = 0.88;
const PQ50_HITS: f64 = 0.90;
const PQ50_FRACTION: f64 = 0.5;
const PQ50_SEED: u64 = 0;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const PROGRESSION_SHARE: f64 = 0.6;

// ---------------------------------------------------------------- helpers

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Scalarizes through fixed random weights so every output coordinate counts.
fn project(tape: &mut Tape, v: Var, seed: u64) -> diffcore::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let numel: usize = shape.iter().product();
    let w = tape.constant(Tensor::uniform(&[numel], -1.0, 1.0, &mut rng).reshape(&shape)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var], u64) -> diffcore::Result<Var>>;
type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

fn op(name: &'static str, inputs: InputFn, f: OpFn) -> (&'static str, InputFn, OpFn) {
    (name, inputs, f)
}

fn shapes(s: &'static [&'static [usize]]) -> InputFn {
    Box::new(move |r| s.iter().map(|sh| rand_t(r, sh)).collect())
}

fn well_conditioned(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut w = Tensor::uniform(&[3, 3], -0.3, 0.3, r);
    for i in 0..3 {
        w.data_mut()[i * 3 + i] += 1.0;
    }
    vec![w]
}

fn every_op() -> Vec<(&'static str, InputFn, OpFn)> {
    vec![
        op("matmul", shapes(&[&[3, 4], &[4, 2]]), Box::new(|t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        })),
        op("matvec", shapes(&[&[3, 5], &[5]]), Box::new(|t, v, s| {
            let y = t.matvec(v[0], v[1])?;
            project(t, y, s)
        })),
        op("dot", shapes(&[&[6], &[6]]), Box::new(|t, v, _| t.dot(v[0], v[1]))),
        op("add", shapes(&[&[2, 3], &[2, 3]]), Box::new(|t, v, s| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        })),
        op("sub", shapes(&[&[2, 3], &[2, 3]]), Box::new(|t, v, s| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, s)
        })),
        op("mul", shapes(&[&[2, 3], &[2, 3]]), Box::new(|t, v, s| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        })),
        op("affine", shapes(&[&[5]]), Box::new(|t, v, s| {
            let y = t.affine(v[0], -1.3, 0.4)?;
            project(t, y, s)
        })),
        op("scale", shapes(&[&[5]]), Box::new(|t, v, s| {
            let y = t.scale(v[0], 2.5)?;
            project(t, y, s)
        })),
        op("add_n", shapes(&[&[4], &[4], &[4]]), Box::new(|t, v, s| {
            let y = t.add_n(&[v[0], v[1], v[2], v[0]])?;
            project(t, y, s)
        })),
        op("concat", shapes(&[&[2], &[3]]), Box::new(|t, v, s| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, s)
        })),
        op("stack", shapes(&[&[3], &[3]]), Box::new(|t, v, s| {
            let y = t.stack(&[v[0], v[1], v[0]])?;
            project(t, y, s)
        })),
        op("slice", shapes(&[&[7]]), Box::new(|t, v, s| {
            let y = t.slice(v[0], 2, 4)?;
            project(t, y, s)
        })),
        op("gather", shapes(&[&[5, 3]]), Box::new(|t, v, s| {
            let y = t.gather(v[0], &[4, 0, 4, 2])?;
            project(t, y, s)
        })),
        op("row", shapes(&[&[4, 3]]), Box::new(|t, v, s| {
            let y = t.row(v[0], 1)?;
            project(t, y, s)
        })),
        op("transpose", shapes(&[&[2, 5]]), Box::new(|t, v, s| {
            let y = t.transpose(v[0])?;
            project(t, y, s)
        })),
        op("sigmoid", shapes(&[&[6]]), Box::new(|t, v, s| {
            let y = t.sigmoid(v[0])?;
            project(t, y, s)
        })),
        op("tanh", shapes(&[&[6]]), Box::new(|t, v, s| {
            let y = t.tanh(v[0])?;
            project(t, y, s)
        })),
        op(
            "relu",
            Box::new(|r| {
                let mut x = Tensor::uniform(&[6], 0.1, 2.0, r);
                x.data_mut().iter_mut().step_by(2).for_each(|v| *v = -*v);
                vec![x]
            }),
            Box::new(|t, v, s| {
                let y = t.relu(v[0])?;
                project(t, y, s)
            }),
        ),
        op("weighted_row_sum", shapes(&[&[4], &[4, 3]]), Box::new(|t, v, s| {
            let y = t.weighted_row_sum(v[0], v[1])?;
            project(t, y, s)
        })),
        op("mean_rows", shapes(&[&[4, 3]]), Box::new(|t, v, s| {
            let y = t.mean_rows(v[0])?;
            project(t, y, s)
        })),
        op("apply_mask", shapes(&[&[5]]), Box::new(|t, v, s| {
            let y = t.apply_mask(v[0], vec![1.0, 0.0, 1.0, 1.0, 0.0])?;
            project(t, y, s)
        })),
        op("dropout", shapes(&[&[8]]), Box::new(|t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let y = t.dropout(v[0], 0.3, true, &mut rng)?;
            project(t, y, s)
        })),
        op("softmax", shapes(&[&[5]]), Box::new(|t, v, s| {
            let y = t.softmax(v[0])?;
            project(t, y, s)
        })),
        op("softmax_masked", shapes(&[&[5]]), Box::new(|t, v, s| {
            let y = t.softmax_masked(v[0], Some(&[true, false, true, true, false]))?;
            project(t, y, s)
        })),
        op("l2_norm", shapes(&[&[5]]), Box::new(|t, v, _| t.l2_norm(v[0]))),
        op("row_norms", shapes(&[&[4, 5]]), Box::new(|t, v, s| {
            let y = t.row_norms(v[0])?;
            project(t, y, s)
        })),
        op("sum", shapes(&[&[3, 3]]), Box::new(|t, v, _| t.sum(v[0]))),
        op("cross_entropy", shapes(&[&[5]]), Box::new(|t, v, _| t.cross_entropy(v[0], vec![0.0, 0.5, 0.0, 0.5, 0.0]))),
        op("inverse", Box::new(well_conditioned), Box::new(|t, v, s| {
            let y = t.inverse(v[0], false)?;
            project(t, y, s)
        })),
        op("inverse_regularized", Box::new(well_conditioned), Box::new(|t, v, s| {
            let y = t.inverse(v[0], true)?;
            project(t, y, s)
        })),
    ]
}

fn small_config(dim: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.set("dim", &dim.to_string()).unwrap();
    cfg
}

fn vocab_for(questions: &[&str]) -> TokenVocab {
    let toks: Vec<Vec<String>> = questions.iter().map(|q| tokenize(q).unwrap()).collect();
    TokenVocab::build(toks.iter().map(|t| t.as_slice()))
}

/// Worst relative error of the full question-answering loss on a toy graph.
fn qa_end_to_end_error(question_aware: bool) -> f64 {
    let mut g = KnowledgeGraph::new();
    g.add("a", "r0", "b");
    g.add("b", "r1", "c");
    g.add("a", "r1", "d");
    g.add("d", "r0", "c");
    let question = "what is the a 's r0 's r1 ?";
    let model = Qa2mn::new(&g, vocab_for(&[question]), small_config(4));
    let p = model.params;
    let order = [
        p.kge.ent, p.kge.rel, p.kge.w, p.enc.embedding, p.enc.fwd.w, p.enc.fwd.u, p.enc.fwd.b, p.enc.bwd.w,
        p.enc.bwd.u, p.enc.bwd.b, p.mem.w_k, p.mem.w_v,
    ];
    assert_eq!(order.len(), model.store.len());
    let inputs: Vec<Tensor> = order.iter().map(|&id| model.store.tensor(id).clone()).collect();
    let linker = EntityLinker::new(&g);
    let q = model.prepare_text(&g, &linker, question).unwrap();
    let cand = q.candidates.clone().unwrap();
    let mut target = vec![0.0; cand.answers.len()];
    target[cand.answers.iter().position(|&e| e == g.entity_id("c").unwrap()).unwrap()] = 1.0;
    let report = check_gradients(&inputs, DEFAULT_EPS, |tape, v| {
        let vars = ModelVars {
            kge: KgeVars { ent: v[0], rel: v[1], w: v[2] },
            enc: EncoderVars {
                embedding: v[3],
                fwd: DirectionVars { w: v[4], u: v[5], b: v[6] },
                bwd: DirectionVars { w: v[7], u: v[8], b: v[9] },
            },
            w_k: v[10],
            w_v: v[11],
        };
        let tables = MemoryTables::build(tape, &vars, &reasoner::union_entities([&cand])).unwrap();
        let slots = reasoner::build_slots(tape, &tables, &g, &cand, vec![true; cand.triples.len()])
            .unwrap()
            .unwrap();
        let enc = reasoner::encode_question(tape, &vars, &q, false).unwrap();
        let out = reasoner::reason(tape, &enc, &slots, 3, question_aware).unwrap();
        tape.cross_entropy(out.logits, target.clone())
    })
    .unwrap();
    report.max_relative_error()
}

fn random_graph(rng: &mut ChaCha8Rng, max_entities: usize) -> KnowledgeGraph {
    let n = rng.gen_range(2..=max_entities);
    let m = rng.gen_range(0..=3 * n);
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        g.add_entity(&format!("e{i}"));
    }
    for _ in 0..m {
        let (h, t, r) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..4));
        g.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    g
}

fn kge_end_to_end_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = KnowledgeGraph::new();
    while g.num_triples() < 8 {
        let (h, t) = (rng.gen_range(0..5), rng.gen_range(0..5));
        g.add(&format!("e{h}"), &format!("r{}", rng.gen_range(0..2)), &format!("e{t}"));
    }
    let mut store = ParamStore::new();
    let p = KgEmbeddingParams::init(&mut store, &g, 3, &mut rng);
    let cache = ContextCache::new(&g);
    let sampler = NegativeSampler::new(&g);
    let pos = g.triples().to_vec();
    let neg: Vec<_> = pos.iter().map(|t| sampler.corrupt(&g, t, &mut rng)).collect();
    let inputs = vec![store.tensor(p.ent).clone(), store.tensor(p.rel).clone(), store.tensor(p.w).clone()];
    check_gradients(&inputs, DEFAULT_EPS, |tape, v| {
        let vars = KgeVars { ent: v[0], rel: v[1], w: v[2] };
        Ok(kgembed::kge_loss(tape, vars, &cache, &pos, &neg, 1.0).unwrap())
    })
    .unwrap()
    .max_relative_error()
}

/// Level-by-level undirected expansion over the raw triple list.
fn k_hop_oracle(g: &KnowledgeGraph, core: &[EntityId], k: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut reach: BTreeSet<usize> = core.iter().map(|e| e.0).collect();
    for _ in 1..k {
        let mut next = reach.clone();
        for t in g.triples() {
            if reach.contains(&t.head.0) {
                next.insert(t.tail.0);
            }
            if reach.contains(&t.tail.0) {
                next.insert(t.head.0);
            }
        }
        reach = next;
    }
    let mut triples = BTreeSet::new();
    let mut ents = BTreeSet::new();
    for (i, t) in g.triples().iter().enumerate() {
        if reach.contains(&t.head.0) || reach.contains(&t.tail.0) {
            triples.insert(i);
            ents.insert(t.head.0);
            ents.insert(t.tail.0);
        }
    }
    (triples, ents)
}

/// Gauss-Jordan inverse of `w + εI` with `ε = 1e-6·trace(w)/d`.
fn shifted_inverse(w: &Tensor) -> Vec<Vec<f64>> {
    let d = w.rows();
    let eps = 1e-6 * (0..d).map(|i| w.get2(i, i)).sum::<f64>() / d as f64;
    let mut a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row: Vec<f64> = (0..d).map(|j| w.get2(i, j) + if i == j { eps } else { 0.0 }).collect();
            row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= piv);
        for r in 0..d {
            if r != c {
                let f = a[r][c];
                let src = a[c].clone();
                a[r].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
            }
        }
    }
    a.into_iter().map(|row| row[d..].to_vec()).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Worst deviation of every memory step from a straight-line oracle.
fn memory_step_error(rng: &mut ChaCha8Rng) -> f64 {
    let (n, l, m, d) = (rng.gen_range(1..10), rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..6));
    let mut tape = Tape::new();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let slots = MemorySlots {
        triple_ids: (0..n).map(TripleId).collect(),
        keys: tape.constant(rand_t(rng, &[n, d])),
        values: tape.constant(rand_t(rng, &[n, d])),
        candidates: (0..l).map(EntityId).collect(),
        candidate_values: tape.constant(rand_t(rng, &[l, d])),
        slot_mask: mask,
    };
    let enc = QuestionEncoding {
        states: tape.constant(rand_t(rng, &[m, d])),
        summary: tape.constant(rand_t(rng, &[d])),
    };
    let h = rows(tape.value(enc.states));
    let hx = tape.value(enc.summary).data().to_vec();
    let mut worst = 0.0_f64;

    let (q, _) = reasoner::init_query(&mut tape, &enc).unwrap();
    let a = softmax(&h.iter().map(|r| dot(&hx, r)).collect::<Vec<_>>());
    let want_q: Vec<f64> = (0..d).map(|k| (0..m).map(|i| a[i] * h[i][k]).sum()).collect();
    worst = worst.max(max_diff(tape.value(q).data(), &want_q));

    let keys = rows(tape.value(slots.keys));
    let values = rows(tape.value(slots.values));
    let p = reasoner::key_address(&mut tape, q, &slots).unwrap();
    let kept: Vec<usize> = (0..n).filter(|&i| slots.slot_mask[i]).collect();
    let sub = softmax(&kept.iter().map(|&i| dot(&want_q, &keys[i])).collect::<Vec<_>>());
    let mut want_p = vec![0.0; n];
    kept.iter().zip(&sub).for_each(|(&i, &w)| want_p[i] = w);
    worst = worst.max(max_diff(tape.value(p).data(), &want_p));

    let o = reasoner::value_read(&mut tape, p, &slots).unwrap();
    let want_o: Vec<f64> = (0..d).map(|k| (0..n).map(|i| want_p[i] * values[i][k]).sum()).collect();
    worst = worst.max(max_diff(tape.value(o).data(), &want_o));

    let (q2, _) = reasoner::query_update(&mut tape, o, &enc).unwrap();
    let b = softmax(&h.iter().map(|r| dot(&want_o, r)).collect::<Vec<_>>());
    let want_q2: Vec<f64> = (0..d).map(|k| want_o[k] + (0..m).map(|i| b[i] * h[i][k]).sum::<f64>()).collect();
    worst = worst.max(max_diff(tape.value(q2).data(), &want_q2));

    let plain = reasoner::query_update_plain(&mut tape, o, q).unwrap();
    let want_plain: Vec<f64> = (0..d).map(|k| want_o[k] + want_q[k]).collect();
    worst = worst.max(max_diff(tape.value(plain).data(), &want_plain));

    let logits = reasoner::predict(&mut tape, o, &slots).unwrap();
    let cv = rows(tape.value(slots.candidate_values));
    let want_s: Vec<f64> = cv.iter().map(|r| dot(r, &want_o)).collect();
    worst.max(max_diff(tape.value(logits).data(), &want_s))
}

/// Worst deviation of head/tail context sets and means from enumeration.
fn context_error(rng: &mut ChaCha8Rng) -> f64 {
    let g = random_graph(rng, 15);
    let dim = rng.gen_range(1..6);
    let mut store = ParamStore::new();
    let p = KgEmbeddingParams::init(&mut store, &g, dim, rng);
    let cache = ContextCache::new(&g);
    let scorer = KgeScorer::new(&store, p).unwrap();
    let (e, r) = (store.tensor(p.ent), store.tensor(p.rel));
    let inv = Tensor::matrix(&shifted_inverse(store.tensor(p.w))).unwrap();
    let inv_r = |rel: usize| -> Vec<f64> { (0..dim).map(|i| dot(inv.row(i), r.row(rel))).collect() };
    let mut worst = 0.0_f64;
    for (i, t) in g.triples().iter().enumerate() {
        let heads: Vec<usize> = (0..g.num_triples()).filter(|&j| g.triples()[j].head == t.head).collect();
        let tails: Vec<usize> = (0..g.num_triples()).filter(|&j| g.triples()[j].tail == t.tail).collect();
        let got_h: Vec<usize> = g.head_context(TripleId(i)).unwrap().iter().map(|x| x.0).collect();
        let got_t: Vec<usize> = g.tail_context(TripleId(i)).unwrap().iter().map(|x| x.0).collect();
        if got_h != heads || got_t != tails {
            return f64::INFINITY;
        }
        let mut want = vec![0.0; dim];
        for &j in &heads {
            let x = g.triples()[j];
            let s = inv_r(x.relation.0);
            (0..dim).for_each(|k| want[k] += (e.get2(x.tail.0, k) - s[k]) / heads.len() as f64);
        }
        worst = worst.max(max_diff(&scorer.head_context_embedding(t, &cache), &want));
        let mut want = vec![0.0; dim];
        for &j in &tails {
            let x = g.triples()[j];
            let s = inv_r(x.relation.0);
            (0..dim).for_each(|k| want[k] += (e.get2(x.head.0, k) + s[k]) / tails.len() as f64);
        }
        worst = worst.max(max_diff(&scorer.tail_context_embedding(t, &cache), &want));
    }
    worst
}

fn synthetic_run() -> &'static Result<RunResult, String> {
    static RUN: OnceLock<Result<RunResult, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let (ds, g) = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
        train_and_test(&TrainConfig::default(), &ds.examples, &g).map_err(|e| e.to_string())
    })
}

fn pq3_run() -> Option<&'static Result<(RunResult, KnowledgeGraph), String>> {
    static RUN: OnceLock<Option<Result<(RunResult, KnowledgeGraph), String>>> = OnceLock::new();
    RUN.get_or_init(|| {
        let loaded = load_pathquestion("PQ-3H")?;
        Some(loaded.map_err(|e| e.to_string()).and_then(|(ex, g)| {
            let run = train_and_test(&TrainConfig::default(), &ex, &g).map_err(|e| e.to_string())?;
            Ok((run, g))
        }))
    })
    .as_ref()
}

fn hits_criterion(n: u32, name: &str, run: Result<RunResult, String>, threshold: f64, budget: Option<Duration>) {
    let pass = match &run {
        Err(e) => verdict(n, name, false, &format!("run failed: {e}")),
        Ok(r) => {
            let in_budget = budget.is_none_or(|b| r.elapsed <= b);
            let limit = budget.map(|b| format!(", limit {} s", b.as_secs())).unwrap_or_default();
            verdict(
                n,
                name,
                r.test.hits_at_1 >= threshold && in_budget,
                &format!(
                    "test hits@1 {:.4}, need >= {threshold}; trained in {:.1} s{limit}",
                    r.test.hits_at_1,
                    r.elapsed.as_secs_f64()
                ),
            )
        }
    };
    assert!(pass);
}

fn load_or_block(n: u32, name: &str, subset: &str) -> Result<(Vec<QaExample>, KnowledgeGraph), String> {
    match load_pathquestion(subset) {
        None => {
            blocked(n, name, &format!("PathQuestion/{subset}.txt"));
            panic!("{subset} not present");
        }
        Some(r) => r.map_err(|e| e.to_string()),
    }
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut worst_op = (0.0_f64, "");
    for (name, inputs, f) in every_op() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + name.len() as u64);
            let xs = inputs(&mut rng);
            let err = check_gradients(&xs, DEFAULT_EPS, |t, v| f(t, v, seed)).unwrap().max_relative_error();
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }
    }
    let e2e = qa_end_to_end_error(true)
        .max(qa_end_to_end_error(false))
        .max(kge_end_to_end_error());
    let elapsed = start.elapsed();
    let pass = verdict(
        1,
        "gradient-integrity",
        worst_op.0 < OP_TOLERANCE && e2e < END_TO_END_TOLERANCE && elapsed < GRADIENT_BUDGET,
        &format!(
            "worst op {} {:.2e} < {OP_TOLERANCE:e}; end-to-end {e2e:.2e} < {END_TO_END_TOLERANCE:e}; {:.1} s",
            worst_op.1,
            worst_op.0,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut k_hop_ok = true;
    for _ in 0..ORACLE_INSTANCES {
        let g = random_graph(&mut rng, 40);
        let n = g.num_entities();
        let core: Vec<EntityId> = (0..rng.gen_range(1..=2)).map(|_| EntityId(rng.gen_range(0..n))).collect();
        for k in 1..=4 {
            let c = g.k_hop_candidates(&core, k, usize::MAX).unwrap();
            let (want_t, want_e) = k_hop_oracle(&g, &core, k);
            let got_t: BTreeSet<usize> = c.triples.iter().map(|t| t.0).collect();
            let got_e: BTreeSet<usize> = c.answers.iter().map(|e| e.0).collect();
            k_hop_ok &= got_t == want_t && got_e == want_e && got_t.len() == c.triples.len();
        }
    }
    let ctx = (0..ORACLE_INSTANCES).map(|_| context_error(&mut rng)).fold(0.0, f64::max);
    let mem = (0..ORACLE_INSTANCES).map(|_| memory_step_error(&mut rng)).fold(0.0, f64::max);
    let pass = verdict(
        2,
        "oracle-equivalence",
        k_hop_ok && ctx < ORACLE_TOLERANCE && mem < ORACLE_TOLERANCE,
        &format!(
            "{ORACLE_INSTANCES} instances each; k-hop sets {}; contexts {ctx:.1e}; memory steps {mem:.1e}; tolerance {ORACLE_TOLERANCE:e}",
            if k_hop_ok { "identical" } else { "differ" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_synthetic_sanity() {
    let run = synthetic_run().as_ref().map_err(Clone::clone);
    let pass = match run {
        Err(e) => verdict(3, "synthetic-sanity", false, &format!("run failed: {e}")),
        Ok(r) => verdict(
            3,
            "synthetic-sanity",
            r.test.hits_at_1 >= SYNTHETIC_HITS && r.elapsed < SYNTHETIC_BUDGET,
            &format!(
                "test hits@1 {:.4}, need >= {SYNTHETIC_HITS}; trained in {:.1} s, limit {} s",
                r.test.hits_at_1,
                r.elapsed.as_secs_f64(),
                SYNTHETIC_BUDGET.as_secs()
            ),
        ),
    };
    assert!(pass);
}

#[test]
fn criterion_4_pq2h_hits() {
    let name = "pq-2h";
    let run = load_or_block(4, name, "PQ-2H")
        .and_then(|(ex, g)| train_and_test(&TrainConfig::default(), &ex, &g).map_err(|e| e.to_string()));
    hits_criterion(4, name, run, PQ2_HITS, Some(PQ_BUDGET));
}

#[test]
fn criterion_5_pq3h_hits() {
    let name = "pq-3h";
    let Some(run) = pq3_run() else {
        blocked(5, name, "PathQuestion/PQ-3H.txt");
        panic!("PQ-3H not present");
    };
    let pass = match run {
        Err(e) => verdict(5, name, false, &format!("run failed: {e}")),
        Ok((r, _)) => verdict(
            5,
            name,
            r.test.hits_at_1 >= PQ3_HITS && r.elapsed <= PQ_BUDGET,
            &format!(
                "test hits@1 {:.4}, need >= {PQ3_HITS}; trained in {:.1} s, limit {} s",
                r.test.hits_at_1,
                r.elapsed.as_secs_f64(),
                PQ_BUDGET.as_secs()
            ),
        ),
    };
    assert!(pass);
}

#[test]
fn criterion_6_pq50_hits() {
    let name = "pq-50";
    let run = load_or_block(6, name, "PQ-2H").and_then(|(ex, g)| {
        let half = g.drop_triples(PQ50_FRACTION, PQ50_SEED).map_err(|e| e.to_string())?;
        train_and_test(&TrainConfig::default(), &ex, &half).map_err(|e| e.to_string())
    });
    hits_criterion(6, name, run, PQ50_HITS, None);
}

/// Seeds (out of three) where full > no-KGE, full > no-QA and no-QA > neither.
fn ablation_wins(ex: &[QaExample], g: &KnowledgeGraph) -> Result<(usize, Vec<String>), String> {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut hits = Vec::new();
        for (no_kge, no_qa) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
            cfg.no_kge_pretrain = no_kge;
            cfg.no_question_aware = no_qa;
            hits.push(train_and_test(&cfg, ex, g).map_err(|e| e.to_string())?.test.hits_at_1);
        }
        let ok = hits[0] > hits[1] && hits[0] > hits[2] && hits[2] > hits[3];
        wins += ok as usize;
        notes.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}/{:.3}", hits[0], hits[1], hits[2], hits[3]));
    }
    Ok((wins, notes))
}

#[test]
fn criterion_7_ablation_ordering() {
    let name = "ablation-ordering";
    let sets: Vec<_> = ["PQ-3H", "PQL-3H"].iter().map(|s| (s, load_pathquestion(s))).collect();
    if sets.iter().any(|(_, s)| s.is_none()) {
        blocked(7, name, "PathQuestion/PQ-3H.txt and PathQuestion/PQL-3H.txt");
        panic!("ablation datasets not present");
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (subset, loaded) in sets {
        match loaded.unwrap().map_err(|e| e.to_string()).and_then(|(ex, g)| ablation_wins(&ex, &g)) {
            Ok((wins, notes)) => {
                pass &= wins * 2 > ABLATION_SEEDS.len();
                detail.push(format!("{subset} {wins}/{} seeds [{}]", ABLATION_SEEDS.len(), notes.join("; ")));
            }
            Err(e) => {
                pass = false;
                detail.push(format!("{subset} failed: {e}"));
            }
        }
    }
    let pass = verdict(7, name, pass, &format!("full/no-kge/no-qa/neither; {}", detail.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_8_attention_progression() {
    let name = "attention-progression";
    let Some(run) = pq3_run() else {
        blocked(8, name, "PathQuestion/PQ-3H.txt");
        panic!("PQ-3H not present");
    };
    let pass = match run {
        Err(e) => verdict(8, name, false, &format!("run failed: {e}")),
        Ok((r, g)) => {
            let linker = EntityLinker::new(g);
            let correct: Vec<_> = r
                .test_questions
                .iter()
                .zip(&r.test.records)
                .filter(|(_, rec)| rec.correct)
                .map(|(q, _)| q)
                .collect();
            let answers = r.model.answer_many(g, &correct, true).unwrap();
            let moving = correct
                .iter()
                .zip(&answers)
                .filter(|(q, a)| {
                    let trace = a.trace.as_ref().expect("trace requested");
                    reasoner::attention_progresses(trace, &reasoner::relation_positions(&q.tokens, &linker))
                })
                .count();
            let share = moving as f64 / correct.len().max(1) as f64;
            verdict(
                8,
                name,
                !correct.is_empty() && share >= PROGRESSION_SHARE,
                &format!("{moving} of {} correct answers progress ({share:.3}), need >= {PROGRESSION_SHARE}", correct.len()),
            )
        }
    };
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let name = "determinism";
    let first = synthetic_run().as_ref().map_err(Clone::clone);
    let second = generate_synthetic(&SyntheticSpec::default())
        .and_then(|(ds, g)| train_and_test(&TrainConfig::default(), &ds.examples, &g))
        .map_err(|e| e.to_string());
    let pass = match (first, second) {
        (Ok(a), Ok(b)) => verdict(
            9,
            name,
            a.test.hits_at_1 == b.test.hits_at_1 && a.checkpoint_sha256 == b.checkpoint_sha256,
            &format!(
                "hits@1 {:.4} vs {:.4}; sha256 {} vs {}",
                a.test.hits_at_1,
                b.test.hits_at_1,
                &a.checkpoint_sha256[..16],
                &b.checkpoint_sha256[..16]
            ),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(9, name, false, &format!("run failed: {e}")),
    };
    assert!(pass);
}
