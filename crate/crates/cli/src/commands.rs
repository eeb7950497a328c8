use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diffcore::{checkpoint, ParamStore};
use qa2mn::dataio::{self, Dataset, QaExample, SyntheticSpec};
use qa2mn::kgembed::{self, KgEmbeddingParams};
use qa2mn::model::{SplitIds, MANIFEST_FILE};
use qa2mn::reasoner::{Answer, EntityLinker};
use qa2mn::trainer::{self, TrainOptions};
use qa2mn::{KnowledgeGraph, Qa2mn, RunManifest, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ConfigArgs;

pub const KGE_FILE: &str = "kge.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const KG_FILE: &str = "kg.tsv";
pub const DATA_FILE: &str = "data.jsonl";
const TOP_CANDIDATES: usize = 5;
const TOP_TOKENS: usize = 3;

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.k_hops {
        cfg.k_hops = k;
    }
    if let Some(z) = args.z_hops {
        cfg.z_hops = z;
    }
    cfg.no_kge_pretrain |= args.no_kge;
    cfg.no_question_aware |= args.no_question_aware;
    cfg.validate()?;
    Ok(cfg)
}

fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    Ok(KnowledgeGraph::load_triples(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_manifest(dir: &Path) -> Option<RunManifest> {
    RunManifest::load(dir.join(MANIFEST_FILE)).ok()
}

/// The explicit path, else the one recorded at training time.
fn resolve_input(given: Option<&Path>, recorded: Option<&String>, what: &str) -> Result<PathBuf> {
    match (given, recorded) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(PathBuf::from(p)),
        (None, None) => bail!("no --{what} given and none recorded in the checkpoint manifest"),
    }
}

fn warn_if_changed(manifest: &RunManifest, path: &Path) -> Result<()> {
    if let Some(want) = manifest.inputs.get(&path.display().to_string()) {
        let got = qa2mn::model::sha256_file(path)?;
        if &got != want {
            log::warn!("{} changed since training", path.display());
        }
    }
    Ok(())
}

pub fn pretrain(args: &ConfigArgs, kg_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let g = load_kg(kg_path)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = KgEmbeddingParams::init(&mut store, &g, cfg.d_ent, &mut rng);
    let report = kgembed::pretrain(&mut store, params, &g, &cfg)?;
    create_dir(out)?;
    let ckpt = out.join(KGE_FILE);
    checkpoint::save(&ckpt, &store, checkpoint::Dtype::F64)?;

    let mut m = RunManifest::new("pretrain", &cfg);
    m.kg_path = Some(kg_path.display().to_string());
    m.add_input(kg_path)?;
    m.add_checkpoint(&ckpt)?;
    if let Some(&last) = report.epoch_losses.last() {
        m.metrics.insert("final_kge_loss".into(), last);
    }
    m.save(out.join(MANIFEST_FILE))?;
    println!("wrote {} ({} epochs)", ckpt.display(), report.epoch_losses.len());
    Ok(())
}

pub fn train(args: &ConfigArgs, kg_path: &Path, data_path: &Path, out: &Path, init_kge: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let g = load_kg(kg_path)?;
    let ds = dataio::load_canonical(data_path)?;
    let (tr, va, te) = trainer::split_dataset(&ds.examples, cfg.seed);
    log::info!("split {} / {} / {}", tr.len(), va.len(), te.len());
    create_dir(out)?;
    let opts = TrainOptions {
        dump_dir: Some(out.join("diverged")),
        pretrained_kge: match init_kge {
            Some(dir) => Some(checkpoint::load(dir.join(KGE_FILE))?),
            None => None,
        },
    };
    let outcome = trainer::train(&cfg, &tr, &va, &g, &opts)?;
    outcome.model.save(out)?;
    let hist = out.join(HISTORY_FILE);
    fs::write(&hist, trainer::history_csv(&outcome.history)).with_context(|| format!("writing {}", hist.display()))?;

    let linker = EntityLinker::new(&g);
    let test_q = trainer::prepare_all(&outcome.model, &g, &linker, &te)?;
    let test = trainer::evaluate(&outcome.model, &g, &test_q)?;

    let mut m = RunManifest::new("train", &cfg);
    m.kg_path = Some(kg_path.display().to_string());
    m.data_path = Some(data_path.display().to_string());
    m.add_input(kg_path)?;
    m.add_input(data_path)?;
    if let Some(dir) = init_kge {
        m.add_input(&dir.join(KGE_FILE))?;
    }
    m.add_checkpoint(&out.join(qa2mn::model::CHECKPOINT_FILE))?;
    m.metrics.insert("best_epoch".into(), outcome.best_epoch as f64);
    m.metrics.insert("valid_hits_at_1".into(), outcome.best_valid_hits);
    m.metrics.insert("test_hits_at_1".into(), test.hits_at_1);
    m.metrics.insert("test_coverage".into(), test.coverage);
    let ids = |v: &[QaExample]| v.iter().map(|e| e.id.clone()).collect();
    m.split = Some(SplitIds {
        train: ids(&tr),
        valid: ids(&va),
        test: ids(&te),
    });
    m.save(out.join(MANIFEST_FILE))?;
    println!(
        "best epoch {} valid hits@1 {:.4} test hits@1 {:.4}",
        outcome.best_epoch, outcome.best_valid_hits, test.hits_at_1
    );
    Ok(())
}

fn select_split(ds: &Dataset, split: &str, manifest: Option<&RunManifest>, seed: u64) -> Result<Vec<QaExample>> {
    if split == "all" {
        return Ok(ds.examples.clone());
    }
    if let Some(ids) = manifest.and_then(|m| m.split.as_ref()) {
        let wanted: &[String] = match split {
            "train" => &ids.train,
            "valid" => &ids.valid,
            "test" => &ids.test,
            other => bail!("unknown split {other:?}; expected train, valid, test or all"),
        };
        let wanted: std::collections::HashSet<&str> = wanted.iter().map(String::as_str).collect();
        return Ok(ds.examples.iter().filter(|e| wanted.contains(e.id.as_str())).cloned().collect());
    }
    let (tr, va, te) = trainer::split_dataset(&ds.examples, seed);
    Ok(match split {
        "train" => tr,
        "valid" => va,
        "test" => te,
        other => bail!("unknown split {other:?}; expected train, valid, test or all"),
    })
}

pub fn eval(ckpt: &Path, split: &str, kg: Option<&Path>, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = Qa2mn::load(ckpt)?;
    let manifest = read_manifest(ckpt);
    let kg_path = resolve_input(kg, manifest.as_ref().and_then(|m| m.kg_path.as_ref()), "kg")?;
    let data_path = resolve_input(data, manifest.as_ref().and_then(|m| m.data_path.as_ref()), "data")?;
    if let Some(m) = &manifest {
        warn_if_changed(m, &kg_path)?;
        warn_if_changed(m, &data_path)?;
    }
    let g = load_kg(&kg_path)?;
    let ds = dataio::load_canonical(&data_path)?;
    let examples = select_split(&ds, split, manifest.as_ref(), model.config.seed)?;
    let linker = EntityLinker::new(&g);
    let qs = trainer::prepare_all(&model, &g, &linker, &examples)?;
    let report = trainer::evaluate(&model, &g, &qs)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.join(format!("eval-{split}.jsonl")));
    fs::write(&out, report.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    println!("hits@1 {:.6}", report.hits_at_1);
    log::info!("{} questions, coverage {:.4}, report {}", qs.len(), report.coverage, out.display());
    Ok(())
}

fn load_model_and_graph(ckpt: &Path, kg: Option<&Path>) -> Result<(Qa2mn, KnowledgeGraph, Option<RunManifest>)> {
    let model = Qa2mn::load(ckpt)?;
    let manifest = read_manifest(ckpt);
    let kg_path = resolve_input(kg, manifest.as_ref().and_then(|m| m.kg_path.as_ref()), "kg")?;
    let g = load_kg(&kg_path)?;
    Ok((model, g, manifest))
}

/// Top candidates and the most attended tokens per hop.
pub fn describe(answer: &Answer, g: &KnowledgeGraph) -> String {
    let mut s = String::new();
    for (i, (e, p)) in answer.ranked.iter().take(TOP_CANDIDATES).enumerate() {
        s.push_str(&format!("{}. {} {:.4}\n", i + 1, g.entity_name(*e), p));
    }
    if let Some(trace) = &answer.trace {
        for (z, hop) in trace.hops.iter().enumerate() {
            let mut order: Vec<usize> = (0..hop.question_attention.len()).collect();
            order.sort_by(|&a, &b| hop.question_attention[b].total_cmp(&hop.question_attention[a]));
            let tokens: Vec<String> = order
                .iter()
                .take(TOP_TOKENS)
                .map(|&i| format!("{} ({:.3})", trace.tokens[i], hop.question_attention[i]))
                .collect();
            let tokens = if tokens.is_empty() { "-".to_string() } else { tokens.join(", ") };
            s.push_str(&format!("hop {}: {}\n", z + 1, tokens));
        }
    }
    s
}

pub fn ask(ckpt: &Path, kg: Option<&Path>) -> Result<()> {
    let (model, g, _) = load_model_and_graph(ckpt, kg)?;
    let linker = EntityLinker::new(&g);
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let mut line = String::new();
    loop {
        write!(stdout, "question> ")?;
        stdout.flush()?;
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            writeln!(stdout)?;
            return Ok(());
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let q = model.prepare_text(&g, &linker, text)?;
        if q.core.is_empty() {
            writeln!(stdout, "no core entity found")?;
            continue;
        }
        let answer = model.answer(&g, &q, true)?;
        write!(stdout, "{}", describe(&answer, &g))?;
    }
}

pub fn export_attention(
    ckpt: &Path,
    kg: Option<&Path>,
    question: Option<String>,
    id: Option<String>,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (model, g, manifest) = load_model_and_graph(ckpt, kg)?;
    let linker = EntityLinker::new(&g);
    let q = match (question, id) {
        (Some(text), _) => model.prepare_text(&g, &linker, &text)?,
        (None, Some(id)) => {
            let data_path = resolve_input(data, manifest.as_ref().and_then(|m| m.data_path.as_ref()), "data")?;
            let ds = dataio::load_canonical(&data_path)?;
            let ex = ds
                .examples
                .iter()
                .find(|e| e.id == id)
                .with_context(|| format!("no question with id {id:?} in {}", data_path.display()))?;
            model.prepare(&g, &linker, ex)?
        }
        (None, None) => bail!("give --question or --id"),
    };
    if q.core.is_empty() {
        bail!("no core entity found");
    }
    let answer = model.answer(&g, &q, true)?;
    let trace = answer.trace.context("answer carries no trace")?;
    fs::write(out, trace.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} hops, {} tokens)", out.display(), trace.hops.len(), trace.tokens.len());
    Ok(())
}

pub fn make_incomplete(kg_path: &Path, fraction: f64, seed: u64, out: &Path) -> Result<()> {
    let g = load_kg(kg_path)?;
    let kept = g.drop_triples(fraction, seed)?;
    kept.write_triples(out)?;
    println!("kept {} of {} triples", kept.num_triples(), g.num_triples());
    Ok(())
}

fn write_canonical(ds: &Dataset, g: &KnowledgeGraph, out: &Path) -> Result<()> {
    create_dir(out)?;
    g.write_triples(out.join(KG_FILE))?;
    dataio::export_canonical(ds, out.join(DATA_FILE))?;
    println!(
        "wrote {} questions and {} triples to {}",
        ds.len(),
        g.num_triples(),
        out.display()
    );
    Ok(())
}

pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let (ds, g) = dataio::generate_synthetic(spec)?;
    write_canonical(&ds, &g, out)
}

pub fn import(format: &str, subset: Option<&str>, src: &Path, out: &Path) -> Result<()> {
    let (ds, g) = match format {
        "pq" => {
            let subset = subset.context("--subset is required for pq (e.g. PQ-2H)")?;
            dataio::parse_pathquestion(src, subset)?
        }
        "wc" => dataio::parse_worldcup(src)?,
        other => bail!("unknown format {other:?}; expected pq or wc"),
    };
    write_canonical(&ds, &g, out)
}
