use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use qa2mn::{EntityId, KnowledgeGraph, TripleId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn messi_graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    g.add("L_MESSI", "plays_in_club", "FC_Barcelona");
    g.add("FC_Barcelona", "is_in_country", "Spain");
    g.add("L_MESSI", "born_in", "Rosario");
    g.add("Rosario", "city_of", "Argentina");
    g.add("Madrid", "capital_of", "Spain");
    g
}

fn random_graph(seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=50);
    let m = rng.gen_range(0..=3 * n);
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        g.add_entity(&format!("e{i}"));
    }
    for _ in 0..m {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        let r = rng.gen_range(0..4);
        g.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    g
}

/// Plain level-by-level expansion over the triple list.
fn oracle(g: &KnowledgeGraph, core: &[EntityId], k: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
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

#[test]
fn messi_two_hops_reach_spain() {
    let g = messi_graph();
    let messi = g.entity_id("L_MESSI").unwrap();
    let c = g.k_hop_candidates(&[messi], 2, usize::MAX).unwrap();
    let names: Vec<_> = c.triples.iter().map(|&t| {
        let t = g.triple(t);
        (g.entity_name(t.head), g.relation_name(t.relation), g.entity_name(t.tail))
    }).collect();
    assert!(names.contains(&("L_MESSI", "plays_in_club", "FC_Barcelona")));
    assert!(names.contains(&("FC_Barcelona", "is_in_country", "Spain")));
    assert!(c.answers.contains(&g.entity_id("Spain").unwrap()));
    assert!(!names.contains(&("Madrid", "capital_of", "Spain")));
}

#[test]
fn messi_one_hop_excludes_second_hop() {
    let g = messi_graph();
    let messi = g.entity_id("L_MESSI").unwrap();
    let c = g.k_hop_candidates(&[messi], 1, usize::MAX).unwrap();
    assert_eq!(c.triples.len(), 2);
    assert!(!c.answers.contains(&g.entity_id("Spain").unwrap()));
}

#[test]
fn isolated_entity_has_no_candidates() {
    let mut g = messi_graph();
    let lone = g.add_entity("lone");
    let c = g.k_hop_candidates(&[lone], 3, usize::MAX).unwrap();
    assert!(c.triples.is_empty());
    assert!(c.answers.is_empty());
}

#[test]
fn candidates_match_bfs_oracle_on_random_graphs() {
    for seed in 0..100 {
        let g = random_graph(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let n = g.num_entities();
        let core: Vec<EntityId> = (0..rng.gen_range(1..=2)).map(|_| EntityId(rng.gen_range(0..n))).collect();
        for k in 1..=4 {
            let c = g.k_hop_candidates(&core, k, usize::MAX).unwrap();
            let (want_t, want_e) = oracle(&g, &core, k);
            let got_t: BTreeSet<usize> = c.triples.iter().map(|t| t.0).collect();
            let got_e: BTreeSet<usize> = c.answers.iter().map(|e| e.0).collect();
            assert_eq!(got_t, want_t, "seed {seed} k {k}");
            assert_eq!(got_e, want_e, "seed {seed} k {k}");
            assert_eq!(got_t.len(), c.triples.len(), "duplicate triples, seed {seed}");
            assert_eq!(got_e.len(), c.answers.len(), "duplicate answers, seed {seed}");
        }
    }
}

#[test]
fn contexts_match_linear_scan() {
    for seed in 0..20 {
        let g = random_graph(seed);
        for (i, t) in g.triples().iter().enumerate() {
            let id = TripleId(i);
            let heads: Vec<usize> = g.head_context(id).unwrap().iter().map(|x| x.0).collect();
            let tails: Vec<usize> = g.tail_context(id).unwrap().iter().map(|x| x.0).collect();
            let want_h: Vec<usize> = (0..g.num_triples()).filter(|&j| g.triples()[j].head == t.head).collect();
            let want_t: Vec<usize> = (0..g.num_triples()).filter(|&j| g.triples()[j].tail == t.tail).collect();
            assert_eq!(heads, want_h);
            assert_eq!(tails, want_t);
            assert!(heads.contains(&i) && tails.contains(&i));
        }
    }
}

#[test]
fn head_contexts_partition_triples() {
    let g = random_graph(7);
    let total: usize = (0..g.num_entities()).map(|e| g.by_head(EntityId(e)).len()).sum();
    assert_eq!(total, g.num_triples());
    let total: usize = (0..g.num_entities()).map(|e| g.by_tail(EntityId(e)).len()).sum();
    assert_eq!(total, g.num_triples());
}

#[test]
fn drop_half_of_odd_count_floors() {
    let mut g = KnowledgeGraph::new();
    for i in 0..1211 {
        g.add(&format!("e{i}"), "r", &format!("e{}", i + 1));
    }
    let d = g.drop_triples(0.5, 3).unwrap();
    assert_eq!(d.num_triples(), 1211 - 605);
    assert_eq!(d.num_entities(), g.num_entities());
    assert!(d.triples().iter().all(|t| g.contains(t)));
}

#[test]
fn drop_is_seeded() {
    let g = random_graph(11);
    let a = g.drop_triples(0.3, 5).unwrap();
    let b = g.drop_triples(0.3, 5).unwrap();
    assert_eq!(a.triples(), b.triples());
}

#[test]
fn truncation_caps_triples() {
    let g = random_graph(3);
    let c = g.k_hop_candidates(&[EntityId(0)], 4, 2).unwrap();
    assert!(c.triples.len() <= 2);
}

#[test]
fn triple_text_round_trips() {
    let g = messi_graph();
    let text = g.to_triple_text();
    let back = KnowledgeGraph::parse(&text, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.num_triples(), g.num_triples());
    assert_eq!(back.to_triple_text(), text);
}

proptest! {
    #[test]
    fn widening_k_never_shrinks_candidates(seed in 0u64..500, core in 0usize..50, k in 1usize..4) {
        let g = random_graph(seed);
        let core = EntityId(core % g.num_entities());
        let a = g.k_hop_candidates(&[core], k, usize::MAX).unwrap();
        let b = g.k_hop_candidates(&[core], k + 1, usize::MAX).unwrap();
        let a: HashSet<_> = a.triples.into_iter().collect();
        let b: HashSet<_> = b.triples.into_iter().collect();
        prop_assert!(a.is_subset(&b));
    }

    #[test]
    fn duplicate_adds_are_ignored(edges in proptest::collection::vec((0usize..6, 0usize..3, 0usize..6), 0..40)) {
        let mut g = KnowledgeGraph::new();
        let mut want = HashSet::new();
        for &(h, r, t) in &edges {
            g.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
            want.insert((h, r, t));
        }
        prop_assert_eq!(g.num_triples(), want.len());
    }
}
