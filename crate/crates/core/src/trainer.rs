//! Two-stage optimization, dataset splitting and Hits@1 evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use diffcore::{clip_gradients, AdamState, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::QaExample;
use crate::error::{QaError, Result};
use crate::kgembed::{self, KgEmbeddingParams, KgeTrainer, PretrainReport};
use crate::kgstore::KnowledgeGraph;
use crate::model::Qa2mn;
use crate::qencoder::{tokenize, TokenVocab};
use crate::reasoner::{self, EntityLinker, MemoryTables, PreparedQuestion};

/// Questions per evaluation tape.
pub const EVAL_CHUNK: usize = 32;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "QA2MN_THREADS";

/// Seeded shuffle, then `⌊0.8n⌋` train, `⌊0.1n⌋` valid and the rest test.
pub fn split_dataset<T: Clone>(examples: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let pick = |ids: &[usize]| ids.iter().map(|&i| examples[i].clone()).collect::<Vec<T>>();
    (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gold: Vec<String>,
    pub predicted: Option<String>,
    pub correct: bool,
    /// Whether any gold answer was among the candidates.
    pub covered: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits_at_1: f64,
    pub coverage: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let hits = records.iter().filter(|r| r.correct).count() as f64;
        let covered = records.iter().filter(|r| r.covered).count() as f64;
        Self {
            hits_at_1: if records.is_empty() { 0.0 } else { hits / n },
            coverage: if records.is_empty() { 0.0 } else { covered / n },
            records,
        }
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }
}

fn eval_threads() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

/// Top-1 evaluation. Unanswerable questions count as incorrect. Chunks run
/// in parallel; records keep input order.
pub fn evaluate(model: &Qa2mn, g: &KnowledgeGraph, questions: &[PreparedQuestion]) -> Result<EvalReport> {
    let run_chunk = |chunk: &[PreparedQuestion]| -> Result<Vec<EvalRecord>> {
        let refs: Vec<&PreparedQuestion> = chunk.iter().collect();
        let answers = model.answer_many(g, &refs, false)?;
        Ok(chunk
            .iter()
            .zip(answers)
            .map(|(q, a)| {
                let top = a.top();
                EvalRecord {
                    id: q.id.clone(),
                    gold: q.gold.iter().map(|&e| g.entity_name(e).to_string()).collect(),
                    predicted: top.map(|e| g.entity_name(e).to_string()),
                    correct: top.is_some_and(|e| q.gold.contains(&e)),
                    covered: !q.gold_positions().is_empty(),
                }
            })
            .collect())
    };
    let threads = eval_threads();
    let chunks: Vec<Result<Vec<EvalRecord>>> = if threads <= 1 {
        questions.chunks(EVAL_CHUNK).map(run_chunk).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| QaError::Model(e.to_string()))?;
        pool.install(|| questions.par_chunks(EVAL_CHUNK).map(run_chunk).collect())
    };
    let mut records = Vec::with_capacity(questions.len());
    for c in chunks {
        records.extend(c?);
    }
    Ok(EvalReport::from_records(records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub hits_at_1: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,split,loss,hits_at_1,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:e}", r.epoch, r.split, r.loss, r.hits_at_1, r.lr);
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the parameters if training diverges.
    pub dump_dir: Option<PathBuf>,
    /// Stage-one embeddings to start from instead of pretraining.
    pub pretrained_kge: Option<ParamStore>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Hits@1.
    pub model: Qa2mn,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_valid_hits: f64,
    pub pretrain: Option<PretrainReport>,
}

/// Builds the token vocabulary from training questions only.
pub fn build_vocab(train: &[QaExample]) -> Result<TokenVocab> {
    let tokens = train.iter().map(|e| tokenize(&e.question)).collect::<Result<Vec<_>>>()?;
    Ok(TokenVocab::build(tokens.iter().map(|t| t.as_slice())))
}

pub fn prepare_all(model: &Qa2mn, g: &KnowledgeGraph, linker: &EntityLinker, ex: &[QaExample]) -> Result<Vec<PreparedQuestion>> {
    ex.iter().map(|e| model.prepare(g, linker, e)).collect()
}

/// Mean cross-entropy of one batch; questions without a gold candidate are
/// skipped. Returns `None` if nothing in the batch is trainable.
fn batch_loss(
    tape: &mut Tape,
    model: &Qa2mn,
    vars: &reasoner::ModelVars,
    g: &KnowledgeGraph,
    batch: &[&PreparedQuestion],
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<Option<diffcore::Var>> {
    let cfg = &model.config;
    let usable: Vec<(&PreparedQuestion, Vec<usize>)> = batch
        .iter()
        .filter(|q| q.is_answerable())
        .map(|q| (*q, q.gold_positions()))
        .filter(|(_, gold)| !gold.is_empty())
        .collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let entities = reasoner::union_entities(usable.iter().filter_map(|(q, _)| q.candidates.as_ref()));
    let tables = MemoryTables::build(tape, vars, &entities)?;
    let mut losses = Vec::with_capacity(usable.len());
    for (q, gold) in &usable {
        let cand = q.candidates.as_ref().expect("answerable");
        let mask = if train {
            reasoner::sample_slot_mask(cand.triples.len(), cfg.slot_dropout, rng)
        } else {
            vec![true; cand.triples.len()]
        };
        let enc = reasoner::encode_question(tape, vars, q, cfg.entity_token_inputs)?;
        let slots = reasoner::build_slots(tape, &tables, g, cand, mask)?.expect("answerable");
        let out = reasoner::reason(tape, &enc, &slots, cfg.z_hops, model.question_aware())?;
        let mut target = vec![0.0; cand.answers.len()];
        let w = 1.0 / gold.len() as f64;
        for &i in gold {
            target[i] = w;
        }
        losses.push(tape.cross_entropy(out.logits, target)?);
    }
    let total = tape.add_n(&losses)?;
    Ok(Some(tape.scale(total, 1.0 / losses.len() as f64)?))
}

/// Turns a non-finite op error into a divergence with a state dump.
fn diverged_on_nan<T>(res: Result<T>, model: &Qa2mn, opts: &TrainOptions, epoch: usize) -> Result<T> {
    match res {
        Err(QaError::Diff(diffcore::DiffError::NonFinite { .. })) => Err(dump_and_fail(model, opts, epoch, f64::NAN)),
        other => other,
    }
}

fn dump_and_fail(model: &Qa2mn, opts: &TrainOptions, epoch: usize, loss: f64) -> QaError {
    if let Some(dir) = &opts.dump_dir {
        match model.save(dir) {
            Ok(()) => log::error!("diverged; state written to {}", dir.display()),
            Err(e) => log::error!("diverged; state dump failed: {e}"),
        }
    }
    QaError::Diverged { epoch, loss }
}

fn copy_kge(src: &ParamStore, dst: &mut ParamStore, p: KgEmbeddingParams) -> Result<()> {
    let from = KgEmbeddingParams::find(src)?;
    for (a, b) in [(from.ent, p.ent), (from.rel, p.rel), (from.w, p.w)] {
        let t = src.tensor(a);
        if t.shape() != dst.tensor(b).shape() {
            return Err(QaError::Model(format!(
                "pretrained {} has shape {:?}, model expects {:?}",
                src.name(a),
                t.shape(),
                dst.tensor(b).shape()
            )));
        }
        *dst.tensor_mut(b) = t.clone();
    }
    Ok(())
}

/// KGE pretraining (unless disabled or supplied), then QA epochs with one
/// KGE refresh batch every `kge_every` QA batches, keeping the
/// best-on-validation parameters with early stopping.
pub fn train(
    cfg: &TrainConfig,
    train_ex: &[QaExample],
    valid_ex: &[QaExample],
    g: &KnowledgeGraph,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = build_vocab(train_ex)?;
    let mut model = Qa2mn::new(g, vocab, cfg.clone());
    let linker = EntityLinker::new(g);
    let train_q = prepare_all(&model, g, &linker, train_ex)?;
    let valid_q = prepare_all(&model, g, &linker, valid_ex)?;
    let train_cov = train_q.iter().filter(|q| !q.gold_positions().is_empty()).count();
    log::info!(
        "{} training questions ({} with a gold candidate), {} validation",
        train_q.len(),
        train_cov,
        valid_q.len()
    );

    let kge_params = model.params.kge;
    let pretrain = if let Some(src) = &opts.pretrained_kge {
        copy_kge(src, &mut model.store, kge_params)?;
        None
    } else if cfg.no_kge_pretrain {
        None
    } else {
        Some(kgembed::pretrain(&mut model.store, kge_params, g, cfg)?)
    };

    let mut kge = KgeTrainer::new(&model.store, kge_params, g, cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_q.len()).collect();
    let mut history = Vec::new();
    let mut best = (model.store.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0usize;
    let mut batches = 0usize;

    for epoch in 0..cfg.qa_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size_qa) {
            let batch: Vec<&PreparedQuestion> = chunk.iter().map(|&i| &train_q[i]).collect();
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, true);
            let vars = model.params.vars(&bound);
            let loss = batch_loss(&mut tape, &model, &vars, g, &batch, &mut rng, true);
            let Some(loss) = diverged_on_nan(loss, &model, opts, epoch)? else {
                continue;
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(dump_and_fail(&model, opts, epoch, value));
            }
            diverged_on_nan(tape.backward(loss).map_err(QaError::from), &model, opts, epoch)?;
            let mut grads = model.store.grads(&tape, &bound);
            drop(tape);
            clip_gradients(&mut grads, cfg.grad_clip);
            adam.step(&mut model.store, &grads, lr)?;
            kgembed::project_entity_norms(&mut model.store, kge_params);
            loss_sum += value;
            loss_batches += 1;
            batches += 1;
            if batches.is_multiple_of(cfg.kge_every) {
                let refreshed = kge.refresh(&mut model.store, g, cfg, lr);
                if let Some(l) = diverged_on_nan(refreshed, &model, opts, epoch)? {
                    if !l.is_finite() {
                        return Err(dump_and_fail(&model, opts, epoch, l));
                    }
                }
            }
        }
        let train_loss = if loss_batches == 0 { 0.0 } else { loss_sum / loss_batches as f64 };
        history.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: train_loss,
            hits_at_1: f64::NAN,
            lr,
        });
        let valid_hits = if valid_q.is_empty() {
            f64::NAN
        } else {
            let report = evaluate(&model, g, &valid_q)?;
            let valid_loss = eval_loss(&model, g, &valid_q)?;
            history.push(HistoryRow {
                epoch,
                split: "valid".into(),
                loss: valid_loss,
                hits_at_1: report.hits_at_1,
                lr,
            });
            report.hits_at_1
        };
        log::info!("epoch {epoch}: train loss {train_loss:.4}, valid hits@1 {valid_hits:.4}, lr {lr:.2e}");
        let score = if valid_hits.is_nan() { f64::NEG_INFINITY } else { valid_hits };
        if score > best.2 || valid_q.is_empty() {
            best = (model.store.clone(), epoch, score);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
    }
    model.store = best.0;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        best_valid_hits: best.2,
        pretrain,
    })
}

/// Mean cross-entropy over answerable questions, without slot dropout.
pub fn eval_loss(model: &Qa2mn, g: &KnowledgeGraph, questions: &[PreparedQuestion]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in questions.chunks(EVAL_CHUNK) {
        let batch: Vec<&PreparedQuestion> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, false);
        let vars = model.params.vars(&bound);
        if let Some(l) = batch_loss(&mut tape, model, &vars, g, &batch, &mut rng, false)? {
            let usable = batch.iter().filter(|q| !q.gold_positions().is_empty()).count();
            total += tape.scalar(l) * usable as f64;
            n += usable;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
