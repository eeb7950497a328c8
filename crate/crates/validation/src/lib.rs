//! Shared plumbing for the acceptance suite: locating the benchmark
//! releases, one train-then-test run, and verdict lines.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use qa2mn::dataio::{self, QaExample};
use qa2mn::model::sha256_hex;
use qa2mn::reasoner::{EntityLinker, PreparedQuestion};
use qa2mn::trainer::{self, EvalReport, TrainOptions};
use qa2mn::{KnowledgeGraph, Qa2mn, Result, TrainConfig};

/// Directory holding the benchmark releases.
pub const DATA_ENV: &str = "QA2MN_DATA_DIR";

/// `$QA2MN_DATA_DIR/PathQuestion` if present, else `$QA2MN_DATA_DIR`,
/// provided it holds the requested subset file.
pub fn pathquestion_dir(subset: &str) -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os(DATA_ENV)?);
    [root.join("PathQuestion"), root]
        .into_iter()
        .find(|d| d.join(format!("{subset}.txt")).is_file())
}

pub fn load_pathquestion(subset: &str) -> Option<Result<(Vec<QaExample>, KnowledgeGraph)>> {
    let dir = pathquestion_dir(subset)?;
    Some(dataio::parse_pathquestion(dir, subset).map(|(ds, g)| (ds.examples, g)))
}

pub struct RunResult {
    pub model: Qa2mn,
    pub test: EvalReport,
    pub test_questions: Vec<PreparedQuestion>,
    pub checkpoint_sha256: String,
    pub elapsed: Duration,
}

/// Splits 80/10/10 with the config seed, trains, and evaluates on test.
pub fn train_and_test(cfg: &TrainConfig, examples: &[QaExample], g: &KnowledgeGraph) -> Result<RunResult> {
    let start = Instant::now();
    let (tr, va, te) = trainer::split_dataset(examples, cfg.seed);
    let out = trainer::train(cfg, &tr, &va, g, &TrainOptions::default())?;
    let linker = EntityLinker::new(g);
    let test_questions = trainer::prepare_all(&out.model, g, &linker, &te)?;
    let test = trainer::evaluate(&out.model, g, &test_questions)?;
    Ok(RunResult {
        checkpoint_sha256: sha256_hex(&out.model.checkpoint_bytes()),
        model: out.model,
        test,
        test_questions,
        elapsed: start.elapsed(),
    })
}

/// Writes one verdict line past the test harness capture and returns `pass`.
pub fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) -> bool {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("ACCEPTANCE {criterion} {name}: {status} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

pub fn blocked(criterion: u32, name: &str, what: &str) -> bool {
    verdict(
        criterion,
        name,
        false,
        &format!("blocked: dataset not present; set {DATA_ENV} to a directory with {what}"),
    )
}
