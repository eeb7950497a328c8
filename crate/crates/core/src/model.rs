//! The assembled model: parameters, vocabulary and config, with directory
//! persistence and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffcore::{checkpoint, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::dataio::QaExample;
use crate::error::{QaError, Result};
use crate::kgembed::KgEmbeddingParams;
use crate::kgstore::{EntityId, KnowledgeGraph};
use crate::qencoder::{tokenize, GruParams, TokenVocab};
use crate::reasoner::{self, Answer, EntityLinker, ModelParams, PreparedQuestion, ReasonSettings, ReasonerParams};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct Qa2mn {
    pub store: ParamStore,
    pub params: ModelParams,
    pub vocab: TokenVocab,
    pub config: TrainConfig,
}

impl Qa2mn {
    /// Fresh parameters, seeded from `config.seed`.
    pub fn new(g: &KnowledgeGraph, vocab: TokenVocab, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let kge = KgEmbeddingParams::init(&mut store, g, config.d_ent, &mut rng);
        let enc = GruParams::init(&mut store, vocab.len(), config.d_emb, config.d_hid, &mut rng);
        let mem = ReasonerParams::init(&mut store, config.d_ent, config.d_hid, &mut rng);
        Self {
            store,
            params: ModelParams { kge, enc, mem },
            vocab,
            config,
        }
    }

    /// Resolves an example against the graph. Given core entities take
    /// precedence over linking; unresolvable ones fall back to the linker.
    pub fn prepare(&self, g: &KnowledgeGraph, linker: &EntityLinker, ex: &QaExample) -> Result<PreparedQuestion> {
        let tokens = tokenize(&ex.question)?;
        let mut core: Vec<EntityId> = ex
            .core_entities
            .iter()
            .flatten()
            .filter_map(|c| linker.lookup(c))
            .collect();
        core.dedup();
        if core.is_empty() {
            core = linker.link(&tokens);
        }
        let gold = ex.answers.iter().filter_map(|a| linker.lookup(a)).collect();
        self.resolve(g, linker, &ex.id, tokens, core, gold)
    }

    /// Prepares free text, linking entities from the tokens.
    pub fn prepare_text(&self, g: &KnowledgeGraph, linker: &EntityLinker, question: &str) -> Result<PreparedQuestion> {
        let tokens = tokenize(question)?;
        let core = linker.link(&tokens);
        self.resolve(g, linker, "text", tokens, core, Vec::new())
    }

    fn resolve(
        &self,
        g: &KnowledgeGraph,
        linker: &EntityLinker,
        id: &str,
        tokens: Vec<String>,
        core: Vec<EntityId>,
        gold: Vec<EntityId>,
    ) -> Result<PreparedQuestion> {
        let mut mentions = vec![None; tokens.len()];
        for (start, len, e) in linker.link_spans(&tokens) {
            mentions[start..start + len].iter_mut().for_each(|m| *m = Some(e));
        }
        let candidates = if core.is_empty() {
            None
        } else {
            Some(g.k_hop_candidates(&core, self.config.k_hops, self.config.n_max)?)
        };
        Ok(PreparedQuestion {
            id: id.to_string(),
            token_ids: self.vocab.encode(&tokens),
            mentions,
            tokens,
            core,
            candidates,
            gold,
        })
    }

    pub fn question_aware(&self) -> bool {
        !self.config.no_question_aware
    }

    pub fn settings(&self) -> ReasonSettings {
        ReasonSettings {
            z_hops: self.config.z_hops,
            question_aware: self.question_aware(),
            entity_inputs: self.config.entity_token_inputs,
        }
    }

    pub fn answer(&self, g: &KnowledgeGraph, q: &PreparedQuestion, with_trace: bool) -> Result<Answer> {
        let mut out = self.answer_many(g, &[q], with_trace)?;
        Ok(out.remove(0))
    }

    pub fn answer_many(&self, g: &KnowledgeGraph, qs: &[&PreparedQuestion], with_trace: bool) -> Result<Vec<Answer>> {
        reasoner::answer_batch(
            &self.store,
            &self.params,
            g,
            qs,
            self.settings(),
            with_trace,
        )
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, checkpoint::Dtype::F64)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| QaError::io(dir, e))?;
        checkpoint::save(dir.join(CHECKPOINT_FILE), &self.store, checkpoint::Dtype::F64)?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, self.config.to_text()).map_err(|e| QaError::io(&cfg, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.is_file() {
            return Err(QaError::Model(format!("no checkpoint at {}", ckpt.display())));
        }
        let store = checkpoint::load(&ckpt)?;
        let vocab = TokenVocab::load(dir.join(VOCAB_FILE))?;
        let config = TrainConfig::load(dir.join(CONFIG_FILE))?;
        let params = ModelParams::find(&store)?;
        let rows = store.tensor(params.enc.embedding).rows();
        if rows != vocab.len() {
            return Err(QaError::Model(format!(
                "vocabulary has {} tokens but the embedding has {rows} rows",
                vocab.len()
            )));
        }
        Ok(Self {
            store,
            params,
            vocab,
            config,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| QaError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    #[serde(default)]
    pub kg_path: Option<String>,
    #[serde(default)]
    pub data_path: Option<String>,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256 of its contents.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub split: Option<SplitIds>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.to_text(),
            seed: config.seed,
            ..Self::default()
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn add_checkpoint(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.checkpoints.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| QaError::Model(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| QaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| QaError::Parse {
            path: PathBuf::from(path),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
