//! Question tokenization, token vocabulary and the bidirectional GRU
//! encoder.

use std::collections::HashMap;
use std::path::Path;

use diffcore::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{QaError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace.
pub fn tokenize(question: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = question.split_whitespace().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return Err(QaError::EmptyQuestion);
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TokenVocab {
    fn default() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }
}

impl TokenVocab {
    /// Builds a vocabulary in first-appearance order.
    pub fn build<'a, I, S>(questions: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::default();
        for q in questions {
            for t in q {
                let t = t.as_ref();
                if !v.index.contains_key(t) {
                    v.index.insert(t.to_string(), v.tokens.len());
                    v.tokens.push(t.to_string());
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line, reserved entries first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(QaError::Model("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(QaError::Model(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| QaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| QaError::io(path, e))?;
        Self::parse(&text)
    }
}

/// One GRU direction: `W` is `3H×D`, `U` is `3H×H`, `b` is `3H`, with gate
/// blocks ordered update, reset, candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruDirection {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruParams {
    pub embedding: ParamId,
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

impl GruParams {
    /// Registers encoder weights for `vocab_size` tokens, embedding size
    /// `d_emb` and total hidden size `d_hid` (split across directions).
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, vocab_size: usize, d_emb: usize, d_hid: usize, rng: &mut R) -> Self {
        let h = d_hid / 2;
        let emb_bound = 1.0 / (d_emb as f64).sqrt();
        let embedding = store.insert("enc.E_tok", Tensor::uniform(&[vocab_size, d_emb], -emb_bound, emb_bound, rng));
        let mut dir = |name: &str, rng: &mut R| {
            let w_bound = 1.0 / (d_emb as f64).sqrt();
            let u_bound = 1.0 / (h as f64).sqrt();
            GruDirection {
                w: store.insert(format!("enc.{name}.W"), Tensor::uniform(&[3 * h, d_emb], -w_bound, w_bound, rng)),
                u: store.insert(format!("enc.{name}.U"), Tensor::uniform(&[3 * h, h], -u_bound, u_bound, rng)),
                b: store.insert(format!("enc.{name}.b"), Tensor::zeros(&[3 * h])),
            }
        };
        let fwd = dir("fwd", rng);
        let bwd = dir("bwd", rng);
        Self { embedding, fwd, bwd }
    }

    pub fn find(store: &ParamStore) -> Result<Self> {
        let dir = |name: &str| -> Result<GruDirection> {
            Ok(GruDirection {
                w: store.require(&format!("enc.{name}.W"))?,
                u: store.require(&format!("enc.{name}.U"))?,
                b: store.require(&format!("enc.{name}.b"))?,
            })
        };
        Ok(Self {
            embedding: store.require("enc.E_tok")?,
            fwd: dir("fwd")?,
            bwd: dir("bwd")?,
        })
    }

    pub fn vars(&self, bound: &BoundParams) -> EncoderVars {
        let dir = |d: GruDirection| DirectionVars {
            w: bound.var(d.w),
            u: bound.var(d.u),
            b: bound.var(d.b),
        };
        EncoderVars {
            embedding: bound.var(self.embedding),
            fwd: dir(self.fwd),
            bwd: dir(self.bwd),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DirectionVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub embedding: Var,
    pub fwd: DirectionVars,
    pub bwd: DirectionVars,
}

/// Encoder output on the tape: `states` is `H_X` (`M×d_hid`), `summary` is
/// `h_x = [→h_M, ←h_1]`.
#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoding {
    pub states: Var,
    pub summary: Var,
}

/// Runs one direction over pre-projected inputs `xw` (`M×3H`, rows in
/// processing order). Returns the hidden states in processing order.
fn run_direction(tape: &mut Tape, dir: DirectionVars, xw: Var, order: &[usize]) -> Result<Vec<Var>> {
    let hdim = tape.value(dir.u).cols();
    let u = dir.u;
    let zr_rows: Vec<usize> = (0..2 * hdim).collect();
    let n_rows: Vec<usize> = (2 * hdim..3 * hdim).collect();
    let u_zr = tape.gather(u, &zr_rows)?;
    let u_n = tape.gather(u, &n_rows)?;
    let mut h = tape.constant(Tensor::zeros(&[hdim]));
    let mut states = Vec::with_capacity(order.len());
    for &i in order {
        let xi = tape.row(xw, i)?;
        let gx = tape.add(xi, dir.b)?;
        let gh = tape.matvec(u_zr, h)?;
        let gz = tape.slice(gx, 0, hdim)?;
        let hz = tape.slice(gh, 0, hdim)?;
        let zin = tape.add(gz, hz)?;
        let z = tape.sigmoid(zin)?;
        let gr = tape.slice(gx, hdim, hdim)?;
        let hr = tape.slice(gh, hdim, hdim)?;
        let rin = tape.add(gr, hr)?;
        let r = tape.sigmoid(rin)?;
        let rh = tape.mul(r, h)?;
        let un = tape.matvec(u_n, rh)?;
        let gn = tape.slice(gx, 2 * hdim, hdim)?;
        let nin = tape.add(gn, un)?;
        let n = tape.tanh(nin)?;
        // h' = (1 − z)⊙n + z⊙h = n + z⊙(h − n)
        let hn = tape.sub(h, n)?;
        let zhn = tape.mul(z, hn)?;
        h = tape.add(n, zhn)?;
        states.push(h);
    }
    Ok(states)
}

/// Encodes token ids. Initial hidden states are zero.
pub fn encode(tape: &mut Tape, vars: &EncoderVars, token_ids: &[usize]) -> Result<QuestionEncoding> {
    if token_ids.is_empty() {
        return Err(QaError::EmptyQuestion);
    }
    let x = tape.gather(vars.embedding, token_ids)?;
    encode_inputs(tape, vars, x)
}

/// Encodes an `M×d_emb` matrix of input vectors.
pub fn encode_inputs(tape: &mut Tape, vars: &EncoderVars, x: Var) -> Result<QuestionEncoding> {
    let m = tape.value(x).rows();
    if m == 0 {
        return Err(QaError::EmptyQuestion);
    }
    let project = |tape: &mut Tape, w: Var| -> Result<Var> {
        let wt = tape.transpose(w)?;
        Ok(tape.matmul(x, wt)?)
    };
    let xw_f = project(tape, vars.fwd.w)?;
    let xw_b = project(tape, vars.bwd.w)?;
    let forward: Vec<usize> = (0..m).collect();
    let backward: Vec<usize> = (0..m).rev().collect();
    let fwd = run_direction(tape, vars.fwd, xw_f, &forward)?;
    let mut bwd = run_direction(tape, vars.bwd, xw_b, &backward)?;
    bwd.reverse();
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        rows.push(tape.concat(&[fwd[i], bwd[i]])?);
    }
    let states = tape.stack(&rows)?;
    let summary = tape.concat(&[fwd[m - 1], bwd[0]])?;
    Ok(QuestionEncoding { states, summary })
}
