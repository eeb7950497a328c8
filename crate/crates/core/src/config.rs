//! Hyperparameters and the flat `key=value` config format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{QaError, Result};
use crate::kgstore::DEFAULT_MAX_CANDIDATES;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size_qa: usize,
    pub batch_size_kge: usize,
    pub kge_pretrain_epochs: usize,
    pub k_hops: usize,
    pub z_hops: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub d_ent: usize,
    pub d_rel: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub slot_dropout: f64,
    pub seed: u64,
    pub qa_epochs: usize,
    pub patience: usize,
    /// QA batches per KGE refresh batch during joint training.
    pub kge_every: usize,
    pub no_kge_pretrain: bool,
    pub no_question_aware: bool,
    /// Linked entity mentions enter the encoder as their KG embedding rows.
    pub entity_token_inputs: bool,
    pub margin: f64,
    pub negatives: usize,
    pub n_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size_qa: 48,
            batch_size_kge: 64,
            kge_pretrain_epochs: 20,
            k_hops: 3,
            z_hops: 3,
            lr_init: 1e-3,
            lr_min: 1e-5,
            lr_decay: 0.96,
            grad_clip: 10.0,
            d_ent: 100,
            d_rel: 100,
            d_emb: 100,
            d_hid: 100,
            slot_dropout: 0.1,
            seed: 1,
            qa_epochs: 100,
            patience: 10,
            kge_every: 4,
            no_kge_pretrain: false,
            no_question_aware: false,
            entity_token_inputs: false,
            margin: 1.0,
            negatives: 1,
            n_max: DEFAULT_MAX_CANDIDATES,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| QaError::InvalidConfig {
        key: key.to_string(),
        message: format!("cannot parse {value:?}"),
    })
}

fn invalid(key: &str, message: &str) -> QaError {
    QaError::InvalidConfig {
        key: key.to_string(),
        message: message.to_string(),
    }
}

impl TrainConfig {
    /// Exponentially annealed learning rate, floored at `lr_min`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.lr_init * self.lr_decay.powi(epoch as i32)).max(self.lr_min)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "batch_size_qa" => self.batch_size_qa = parse_value(key, v)?,
            "batch_size_kge" => self.batch_size_kge = parse_value(key, v)?,
            "kge_pretrain_epochs" => self.kge_pretrain_epochs = parse_value(key, v)?,
            "k_hops" => self.k_hops = parse_value(key, v)?,
            "z_hops" => self.z_hops = parse_value(key, v)?,
            "lr_init" => self.lr_init = parse_value(key, v)?,
            "lr_min" => self.lr_min = parse_value(key, v)?,
            "lr_decay" => self.lr_decay = parse_value(key, v)?,
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "d_ent" => self.d_ent = parse_value(key, v)?,
            "d_rel" => self.d_rel = parse_value(key, v)?,
            "d_emb" => self.d_emb = parse_value(key, v)?,
            "d_hid" => self.d_hid = parse_value(key, v)?,
            "dim" => {
                let d: usize = parse_value(key, v)?;
                self.d_ent = d;
                self.d_rel = d;
                self.d_emb = d;
                self.d_hid = d;
            }
            "slot_dropout" => self.slot_dropout = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "qa_epochs" => self.qa_epochs = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "kge_every" => self.kge_every = parse_value(key, v)?,
            "no_kge_pretrain" => self.no_kge_pretrain = parse_value(key, v)?,
            "no_question_aware" => self.no_question_aware = parse_value(key, v)?,
            "entity_token_inputs" => self.entity_token_inputs = parse_value(key, v)?,
            "margin" => self.margin = parse_value(key, v)?,
            "negatives" => self.negatives = parse_value(key, v)?,
            "n_max" => self.n_max = parse_value(key, v)?,
            other => return Err(QaError::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(line, "expected key=value"))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| QaError::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("batch_size_qa", self.batch_size_qa.to_string());
        kv("batch_size_kge", self.batch_size_kge.to_string());
        kv("kge_pretrain_epochs", self.kge_pretrain_epochs.to_string());
        kv("k_hops", self.k_hops.to_string());
        kv("z_hops", self.z_hops.to_string());
        kv("lr_init", format!("{:?}", self.lr_init));
        kv("lr_min", format!("{:?}", self.lr_min));
        kv("lr_decay", format!("{:?}", self.lr_decay));
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("d_ent", self.d_ent.to_string());
        kv("d_rel", self.d_rel.to_string());
        kv("d_emb", self.d_emb.to_string());
        kv("d_hid", self.d_hid.to_string());
        kv("slot_dropout", format!("{:?}", self.slot_dropout));
        kv("seed", self.seed.to_string());
        kv("qa_epochs", self.qa_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("kge_every", self.kge_every.to_string());
        kv("no_kge_pretrain", self.no_kge_pretrain.to_string());
        kv("no_question_aware", self.no_question_aware.to_string());
        kv("entity_token_inputs", self.entity_token_inputs.to_string());
        kv("margin", format!("{:?}", self.margin));
        kv("negatives", self.negatives.to_string());
        kv("n_max", self.n_max.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size_qa", self.batch_size_qa),
            ("batch_size_kge", self.batch_size_kge),
            ("k_hops", self.k_hops),
            ("z_hops", self.z_hops),
            ("d_ent", self.d_ent),
            ("d_rel", self.d_rel),
            ("d_emb", self.d_emb),
            ("d_hid", self.d_hid),
            ("kge_every", self.kge_every),
            ("n_max", self.n_max),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(k, "must be positive"));
            }
        }
        if !(self.lr_init > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return Err(invalid("lr_min", "need 0 < lr_min <= lr_init"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay", "must be in (0, 1]"));
        }
        if self.grad_clip <= 0.0 {
            return Err(invalid("grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.slot_dropout) {
            return Err(invalid("slot_dropout", "must be in [0, 1)"));
        }
        if self.margin < 0.0 {
            return Err(invalid("margin", "must be non-negative"));
        }
        if self.d_ent != self.d_rel {
            return Err(invalid("d_rel", "must equal d_ent"));
        }
        if self.d_emb != self.d_ent || self.d_hid != self.d_ent {
            return Err(invalid("d_hid", "d_emb and d_hid must equal d_ent"));
        }
        if !self.d_hid.is_multiple_of(2) {
            return Err(invalid("d_hid", "must be even (two GRU directions)"));
        }
        Ok(())
    }
}
