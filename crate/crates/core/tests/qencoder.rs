use diffcore::gradcheck::{check_gradients, DEFAULT_EPS};
use diffcore::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use qa2mn::qencoder::{self, tokenize, DirectionVars, EncoderVars, GruParams, TokenVocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step written out per coordinate.
fn gru_step(w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hd = h.len();
    let wx = |row: usize| (0..x.len()).map(|j| w.get2(row, j) * x[j]).sum::<f64>() + b.data()[row];
    let uh = |row: usize, v: &[f64]| (0..hd).map(|j| u.get2(row, j) * v[j]).sum::<f64>();
    let z: Vec<f64> = (0..hd).map(|i| sigmoid(wx(i) + uh(i, h))).collect();
    let r: Vec<f64> = (0..hd).map(|i| sigmoid(wx(hd + i) + uh(hd + i, h))).collect();
    let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
    let n: Vec<f64> = (0..hd).map(|i| (wx(2 * hd + i) + uh(2 * hd + i, &rh)).tanh()).collect();
    (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect()
}

fn setup(vocab: usize, d_emb: usize, d_hid: usize, seed: u64) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = GruParams::init(&mut store, vocab, d_emb, d_hid, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in [p.fwd.b, p.bwd.b] {
        let shape = store.tensor(id).shape().to_vec();
        *store.tensor_mut(id) = Tensor::uniform(&shape, -0.5, 0.5, &mut rng);
    }
    (store, p)
}

fn encode_values(store: &ParamStore, p: &GruParams, ids: &[usize]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let enc = qencoder::encode(&mut tape, &p.vars(&bound), ids).unwrap();
    (tape.value(enc.states).clone(), tape.value(enc.summary).clone())
}

#[test]
fn tiny_encoding_matches_hand_oracle() {
    let (store, p) = setup(4, 2, 4, 1);
    let ids = [2, 3];
    let (states, summary) = encode_values(&store, &p, &ids);
    let e = store.tensor(p.embedding);
    let t = |id| store.tensor(id);
    let mut fwd = vec![vec![0.0; 2]];
    for &i in &ids {
        let next = gru_step(t(p.fwd.w), t(p.fwd.u), t(p.fwd.b), e.row(i), fwd.last().unwrap());
        fwd.push(next);
    }
    let mut bwd = vec![vec![0.0; 2]];
    for &i in ids.iter().rev() {
        let next = gru_step(t(p.bwd.w), t(p.bwd.u), t(p.bwd.b), e.row(i), bwd.last().unwrap());
        bwd.push(next);
    }
    for pos in 0..2 {
        let row = states.row(pos);
        let want: Vec<f64> = fwd[pos + 1].iter().chain(&bwd[2 - pos]).copied().collect();
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let want: Vec<f64> = fwd[2].iter().chain(&bwd[2]).copied().collect();
    for (a, b) in summary.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_token_has_one_row() {
    let (store, p) = setup(5, 6, 10, 2);
    let (states, summary) = encode_values(&store, &p, &[3]);
    assert_eq!(states.shape(), &[1, 10]);
    assert_eq!(states.data(), summary.data());
}

#[test]
fn reversal_with_swapped_directions_mirrors_states() {
    let (store, p) = setup(8, 5, 6, 3);
    let ids = [2, 5, 7, 3];
    let rev: Vec<usize> = ids.iter().rev().copied().collect();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let v = p.vars(&bound);
    let swapped = EncoderVars {
        embedding: v.embedding,
        fwd: DirectionVars { ..v.bwd },
        bwd: DirectionVars { ..v.fwd },
    };
    let a = qencoder::encode(&mut tape, &v, &ids).unwrap();
    let b = qencoder::encode(&mut tape, &swapped, &rev).unwrap();
    let (a, b) = (tape.value(a.states), tape.value(b.states));
    let m = ids.len();
    for i in 0..m {
        let ra = a.row(i);
        let rb = b.row(m - 1 - i);
        assert_eq!(&ra[..3], &rb[3..]);
        assert_eq!(&ra[3..], &rb[..3]);
    }
}

#[test]
fn summary_is_last_forward_and_first_backward() {
    let (store, p) = setup(10, 4, 8, 4);
    let (states, summary) = encode_values(&store, &p, &[2, 3, 4, 5, 6]);
    assert_eq!(&summary.data()[..4], &states.row(4)[..4]);
    assert_eq!(&summary.data()[4..], &states.row(0)[4..]);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (store, p) = setup(5, 4, 4, 5);
    let ids = [1, 3, 4];
    let names = [p.embedding, p.fwd.w, p.fwd.u, p.fwd.b, p.bwd.w, p.bwd.u, p.bwd.b];
    let inputs: Vec<Tensor> = names.iter().map(|&id| store.tensor(id).clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let report = check_gradients(&inputs, DEFAULT_EPS, |tape, v| {
        let vars = EncoderVars {
            embedding: v[0],
            fwd: DirectionVars { w: v[1], u: v[2], b: v[3] },
            bwd: DirectionVars { w: v[4], u: v[5], b: v[6] },
        };
        let enc = qencoder::encode(tape, &vars, &ids).unwrap();
        let c = tape.constant(probe.clone());
        let weighted = tape.mul(enc.states, c)?;
        let s = tape.sum(weighted)?;
        let sq = tape.dot(enc.summary, enc.summary)?;
        tape.add(s, sq)
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-5, "{:?}", report.relative_errors);
}

#[test]
fn archduke_question_tokenizes_to_twelve() {
    let t = tokenize("what is the archduke_johann_of_austria -s mother -s father -s religious belief ?").unwrap();
    assert_eq!(t.len(), 12);
    assert_eq!(t[3], "archduke_johann_of_austria");
}

#[test]
fn unseen_tokens_map_to_unk() {
    let toks = tokenize("a b c").unwrap();
    let v = TokenVocab::build([toks.as_slice()]);
    let ids = v.encode(&tokenize("a zzz").unwrap());
    assert_eq!(ids[1], qencoder::UNK);
    assert_ne!(ids[0], qencoder::UNK);
}

proptest! {
    #[test]
    fn states_stay_inside_unit_interval(seed in 0u64..200, len in 1usize..8) {
        let (mut store, p) = setup(6, 3, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in [p.embedding, p.fwd.w, p.bwd.w] {
            let shape = store.tensor(id).shape().to_vec();
            *store.tensor_mut(id) = Tensor::uniform(&shape, -2.0, 2.0, &mut rng);
        }
        let ids: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % 6).collect();
        let (states, _) = encode_values(&store, &p, &ids);
        prop_assert!(states.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn tokenize_is_idempotent(words in proptest::collection::vec("[a-zA-Z_?']{1,8}", 1..10)) {
        let t = tokenize(&words.join("  ")).unwrap();
        prop_assert_eq!(tokenize(&t.join(" ")).unwrap(), t);
    }
}
