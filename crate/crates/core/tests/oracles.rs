use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twoinone::corpus::SupportingFact;
use twoinone::evaluation::{passage_em, sp_metrics};
use twoinone::heads::ScoredCandidate;
use twoinone::inference::{baseline_sentence_select, predict, InferenceConfig, SentenceScores};

fn random_facts(rng: &mut ChaCha8Rng, max: usize) -> Vec<SupportingFact> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| SupportingFact::new(format!("P{}", rng.gen_range(0..3)), rng.gen_range(0..3)))
        .collect()
}

/// Naive list-based set arithmetic.
fn naive_metrics(pred: &[SupportingFact], gold: &[SupportingFact]) -> (f64, f64, f64, f64) {
    let mut p: Vec<&SupportingFact> = Vec::new();
    for f in pred {
        if !p.contains(&f) {
            p.push(f);
        }
    }
    let mut g: Vec<&SupportingFact> = Vec::new();
    for f in gold {
        if !g.contains(&f) {
            g.push(f);
        }
    }
    let tp = p.iter().filter(|f| g.contains(f)).count();
    let fp = p.len() - tp;
    let fn_ = g.len() - tp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let em = if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    (precision, recall, f1, em)
}

#[test]
fn metrics_match_naive_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let pred = random_facts(&mut rng, 5);
        let mut gold = random_facts(&mut rng, 4);
        if gold.is_empty() {
            gold.push(SupportingFact::new("P0", 0));
        }
        let s = sp_metrics(&pred.iter().cloned().collect(), &gold.iter().cloned().collect());
        assert_eq!((s.precision, s.recall, s.f1, s.em), naive_metrics(&pred, &gold));

        let pt: BTreeSet<String> = pred.iter().map(|f| f.title.clone()).collect();
        let gt: BTreeSet<String> = gold.iter().map(|f| f.title.clone()).collect();
        let naive = pt.len() == gt.len() && pt.iter().all(|t| gt.contains(t));
        assert_eq!(passage_em(&pt, &gt), if naive { 1.0 } else { 0.0 });
    }
}

fn facts() -> impl Strategy<Value = BTreeSet<SupportingFact>> {
    prop::collection::btree_set((0usize..3, 0usize..4).prop_map(|(t, i)| SupportingFact::new(format!("P{t}"), i)), 0..6)
}

proptest! {
    #[test]
    fn metric_bounds(pred in facts(), gold in facts()) {
        prop_assume!(!gold.is_empty());
        let s = sp_metrics(&pred, &gold);
        for v in [s.precision, s.recall, s.f1, s.em] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if s.em == 1.0 {
            prop_assert_eq!(s.f1, 1.0);
        }
    }

    #[test]
    fn adding_facts_moves_metrics_monotonically(pred in facts(), gold in facts()) {
        prop_assume!(!gold.is_empty());
        let base = sp_metrics(&pred, &gold);
        for g in &gold {
            let mut more = pred.clone();
            more.insert(g.clone());
            prop_assert!(sp_metrics(&more, &gold).recall >= base.recall);
        }
        let wrong = SupportingFact::new("nowhere", 0);
        let mut more = pred.clone();
        more.insert(wrong);
        prop_assert!(sp_metrics(&more, &gold).precision <= base.precision);
    }
}

fn candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredCandidate> {
    // few distinct values so ties are common
    let levels = [-1.0, -0.5, 0.0, 0.25, 0.5, 1.0];
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..4);
            ScoredCandidate {
                title: format!("P{i}"),
                y_hat: levels[rng.gen_range(0..levels.len())],
                x_hat: (0..k).map(|_| levels[rng.gen_range(0..levels.len())]).collect(),
                v_passage: vec![],
                v_sentences: vec![],
                kept_sentences: (0..k).collect(),
            }
        })
        .collect()
}

/// The unique k-subset whose every member beats every non-member
/// (higher score, or equal score and earlier position), found by enumeration.
fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let inside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let outside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
        if inside.iter().all(|&a| outside.iter().all(|&b| beats(a, b))) {
            found.push(inside);
        }
    }
    assert_eq!(found.len(), 1);
    let mut chosen = found.pop().unwrap();
    // order within the selection by the same relation
    chosen.sort_by(|&a, &b| if beats(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    chosen
}

#[test]
fn top_k_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let k = rng.gen_range(1..4);
        let scored = candidates(&mut rng, n);
        let cfg = InferenceConfig {
            top_k: k,
            ..InferenceConfig::default()
        };
        let p = predict("q", &scored, &cfg).unwrap();
        let scores: Vec<f64> = scored.iter().map(|c| c.y_hat).collect();
        let expect: Vec<String> = brute_top_k(&scores, k.min(n)).iter().map(|&i| format!("P{i}")).collect();
        assert_eq!(p.selected_passages, expect);

        let selected: BTreeSet<String> = p.selected_set();
        let mut sp = BTreeSet::new();
        for c in &scored {
            if selected.contains(&c.title) {
                for (i, &x) in c.x_hat.iter().enumerate() {
                    if x > 0.0 {
                        sp.insert(SupportingFact::new(c.title.clone(), i));
                    }
                }
            }
        }
        assert_eq!(p.sp, sp);
    }
}

#[test]
fn raising_threshold_never_adds_facts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let scored = candidates(&mut rng, 6);
        let mut last: Option<BTreeSet<SupportingFact>> = None;
        for t in [-2.0, -0.5, 0.0, 0.3, 0.9, 2.0] {
            let cfg = InferenceConfig {
                sentence_threshold: t,
                ..InferenceConfig::default()
            };
            let sp = predict("q", &scored, &cfg).unwrap().sp;
            if let Some(prev) = &last {
                assert!(sp.is_subset(prev));
            }
            last = Some(sp);
        }
    }
}

/// Enumerates passage pairs and keeps the pair ranked first by the rule: the
/// passage holding the best sentence, then the passage holding the best
/// sentence outside it. Sentences compare by score, then position.
fn brute_sentence_pair(c: &[SentenceScores]) -> (usize, usize) {
    let flat: Vec<(usize, usize, f64)> = c
        .iter()
        .enumerate()
        .flat_map(|(p, s)| s.scores.iter().enumerate().map(move |(i, &x)| (p, i, x)))
        .collect();
    let better = |a: &(usize, usize, f64), b: &(usize, usize, f64)| a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1));
    let best_in = |p: usize| {
        flat.iter()
            .filter(|f| f.0 == p)
            .fold(None, |acc: Option<&(usize, usize, f64)>, f| match acc {
                Some(a) if better(a, f) => Some(a),
                _ => Some(f),
            })
            .copied()
    };
    let mut best: Option<((usize, usize), ((usize, usize, f64), (usize, usize, f64)))> = None;
    for a in 0..c.len() {
        for b in 0..c.len() {
            if a == b {
                continue;
            }
            let (Some(fa), Some(fb)) = (best_in(a), best_in(b)) else { continue };
            if !better(&fa, &fb) {
                continue;
            }
            let replace = match &best {
                None => true,
                Some((_, (ba, bb))) => better(&fa, ba) || (fa == *ba && better(&fb, bb)),
            };
            if replace {
                best = Some(((a, b), (fa, fb)));
            }
        }
    }
    best.expect("two passages with sentences").0
}

#[test]
fn sentence_baseline_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let levels = [-1.0, -0.3, 0.0, 0.4, 0.8];
    for _ in 0..1000 {
        let n = rng.gen_range(2..11);
        let c: Vec<SentenceScores> = (0..n)
            .map(|p| SentenceScores {
                title: format!("P{p}"),
                scores: (0..rng.gen_range(1..4)).map(|_| levels[rng.gen_range(0..levels.len())]).collect(),
            })
            .collect();
        let r = baseline_sentence_select("q", &c, &InferenceConfig::default()).unwrap();
        let (a, b) = brute_sentence_pair(&c);
        assert_eq!(r.prediction.selected_passages, vec![format!("P{a}"), format!("P{b}")]);
        for f in &r.prediction.sp {
            assert!(f.title == format!("P{a}") || f.title == format!("P{b}"));
        }
    }
}
