use std::collections::BTreeSet;

use emphasis::corpus::{parse_corpus, shuffle_instance, target_distribution, write_corpus};
use emphasis::embedding_io::{read_emb, write_emb};
use emphasis::ensemble::{combine_predictions, ensemble_weights, EnsembleMode};
use emphasis::evaluation::{match_report, random_baseline};
use emphasis::nn::{kl_grad_logits, kl_loss, softmax2};
use emphasis::rng::SplitMix64;
use emphasis::synthetic::random_corpus;
use emphasis::{AnnotatedInstance, Corpus, LabelDistribution, Prediction};
use proptest::prelude::*;

fn dist() -> impl Strategy<Value = LabelDistribution> {
    (0.0f64..=1.0).prop_map(LabelDistribution::from_emphasis)
}

/// An instance with up to `max_len` tokens and counts out of `total`.
fn instance(max_len: usize) -> impl Strategy<Value = AnnotatedInstance> {
    (1u32..10)
        .prop_flat_map(move |total| (Just(total), prop::collection::vec((0..=total, prop::option::of("[A-Z]{1,5}")), 1..=max_len)))
        .prop_map(|(total, toks)| {
            AnnotatedInstance::from_parts(
                "x",
                toks.into_iter().enumerate().map(|(i, (c, pos))| (format!("tok{i}"), pos, c)),
                total,
            )
            .unwrap()
        })
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_identity(p in dist(), q in dist()) {
        prop_assert!(kl_loss(&p, &q) >= 0.0);
        prop_assert!(kl_loss(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn one_hot_kl_is_negative_log_likelihood(q in dist(), emphasized in any::<bool>()) {
        let target = LabelDistribution::from_emphasis(if emphasized { 1.0 } else { 0.0 });
        let true_prob = if emphasized { q.p_i } else { q.p_o };
        prop_assume!(true_prob > 1e-12);
        prop_assert!((kl_loss(&target, &q) + true_prob.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_logit_gradient_is_prediction_minus_target(p in dist(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let q = softmax2([a, b]).unwrap();
        let g = kl_grad_logits(&p, &q);
        prop_assert!((g[0] - (q.p_i - p.p_i)).abs() < 1e-15);
        prop_assert!((g[1] - (q.p_o - p.p_o)).abs() < 1e-15);
        // Past |a - b| ~ 27 the 1e-12 probability floor flattens the loss.
        prop_assume!((a - b).abs() < 25.0);
        let eps = 1e-6;
        let f = |a: f64| kl_loss(&p, &softmax2([a, b]).unwrap());
        let numeric = (f(a + eps) - f(a - eps)) / (2.0 * eps);
        prop_assert!((numeric - g[0]).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_a_distribution(a in -800.0f64..800.0, b in -800.0f64..800.0) {
        let q = softmax2([a, b]).unwrap();
        prop_assert!((q.p_i + q.p_o - 1.0).abs() < 1e-12);
        prop_assert!(q.p_i >= 0.0 && q.p_o >= 0.0);
    }

    #[test]
    fn targets_are_distributions(inst in instance(12)) {
        for (i, t) in target_distribution(&inst).iter().enumerate() {
            prop_assert!((t.p_i + t.p_o - 1.0).abs() < 1e-12);
            prop_assert_eq!(t.p_i, inst.emph_counts()[i] as f64 / inst.ann_total() as f64);
        }
    }

    #[test]
    fn shuffle_preserves_the_token_multiset(inst in instance(15), seed in any::<u64>()) {
        let (shuffled, perm) = shuffle_instance(&inst, seed);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..inst.len()).collect::<Vec<_>>());
        let triples = |x: &AnnotatedInstance| {
            let mut v: Vec<_> = x.tokens().iter().zip(x.emph_counts())
                .map(|(t, &c)| (t.text.clone(), c, t.pos.clone())).collect();
            v.sort();
            v
        };
        prop_assert_eq!(triples(&inst), triples(&shuffled));
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(&shuffled.tokens()[new].text, &inst.tokens()[old].text);
            prop_assert_eq!(shuffled.tokens()[new].index, new);
        }
        prop_assert_eq!(shuffle_instance(&inst, seed).0, shuffled);
    }

    #[test]
    fn corpus_text_round_trip(insts in prop::collection::vec(instance(6), 1..6)) {
        let insts: Vec<_> = insts.into_iter().enumerate().map(|(k, inst)| {
            AnnotatedInstance::from_parts(
                format!("id{k}"),
                inst.tokens().iter().zip(inst.emph_counts()).map(|(t, &c)| (t.text.clone(), t.pos.clone(), c)),
                inst.ann_total(),
            ).unwrap()
        }).collect();
        let corpus = Corpus::new(insts, "rt").unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let back = parse_corpus(buf.as_slice(), "rt").unwrap();
        prop_assert_eq!(back.instances(), corpus.instances());
    }

    #[test]
    fn emb_round_trip(seed in any::<u64>(), n in 0usize..5, dim in 1usize..6) {
        let (_, ef) = random_corpus(seed, n, 4, 3, dim).unwrap();
        let mut buf = Vec::new();
        write_emb(&ef, &mut buf).unwrap();
        prop_assert_eq!(read_emb(buf.as_slice()).unwrap(), ef);
    }

    #[test]
    fn match_scores_are_fractions(seed in any::<u64>()) {
        let (corpus, _) = random_corpus(seed, 10, 9, 5, 1).unwrap();
        let mut rng = SplitMix64::new(seed ^ 1);
        let preds: Vec<Prediction> = corpus.iter()
            .map(|i| Prediction::new((0..i.len()).map(|_| rng.next_f64()).collect()))
            .collect();
        let r = match_report(&corpus, &preds).unwrap();
        for v in r.m_scores {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // Scoring by the annotation counts themselves is always perfect.
        let oracle: Vec<Prediction> = corpus.iter()
            .map(|i| Prediction::new(i.emph_counts().iter().map(|&c| c as f64).collect()))
            .collect();
        prop_assert_eq!(match_report(&corpus, &oracle).unwrap().average, 1.0);
    }

    #[test]
    fn ensemble_weights_are_normalized(devs in prop::collection::vec(1e-3f64..1.0, 1..8)) {
        for mode in [EnsembleMode::Average, EnsembleMode::Weighted] {
            let w = ensemble_weights(mode, &devs).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_is_convex_and_idempotent(
        members in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), 1..6),
        devs in prop::collection::vec(1e-3f64..1.0, 6),
        copies in 1usize..6,
    ) {
        let k = members.len();
        let preds: Vec<Vec<Prediction>> = members.iter().map(|m| vec![Prediction::new(m.clone())]).collect();
        for mode in [EnsembleMode::Average, EnsembleMode::Weighted] {
            let w = ensemble_weights(mode, &devs[..k]).unwrap();
            let out = combine_predictions(&preds, &w).unwrap();
            for i in 0..6 {
                let lo = members.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
                let s = out[0].scores()[i];
                prop_assert!(lo <= s && s <= hi);
            }
            let same = vec![preds[0].clone(); copies];
            let w = ensemble_weights(mode, &devs[..copies]).unwrap();
            prop_assert_eq!(&combine_predictions(&same, &w).unwrap(), &preds[0]);
        }
        let avg = |ps: &[Vec<Prediction>]| {
            combine_predictions(ps, &ensemble_weights(EnsembleMode::Average, &vec![1.0; ps.len()]).unwrap()).unwrap()
        };
        let mut reversed = preds.clone();
        reversed.reverse();
        for (a, b) in avg(&preds)[0].scores().iter().zip(avg(&reversed)[0].scores()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect()
}

/// Match-m by enumerating subsets: the gold set is the union of all
/// size-min(m, n) subsets with maximal total count, and the predicted set
/// is the lexicographically first subset with maximal total score.
fn brute_force_match(inst: &AnnotatedInstance, scores: &[f64], m: usize) -> f64 {
    let n = inst.len();
    let k = m.min(n);
    let all = subsets(n, k);
    let count_sum = |s: &Vec<usize>| s.iter().map(|&i| inst.emph_counts()[i]).sum::<u32>();
    let best_count = all.iter().map(count_sum).max().unwrap();
    let gold: BTreeSet<usize> = all.iter().filter(|s| count_sum(s) == best_count).flatten().copied().collect();
    let score_sum = |s: &Vec<usize>| s.iter().map(|&i| scores[i]).sum::<f64>();
    let best_score = all.iter().map(score_sum).fold(f64::NEG_INFINITY, f64::max);
    let pred = all.iter().filter(|s| score_sum(s) == best_score).min().unwrap();
    pred.iter().filter(|i| gold.contains(i)).count() as f64 / k as f64
}

#[test]
fn match_report_equals_subset_enumeration() {
    let mut rng = SplitMix64::new(500);
    let mut instances = Vec::new();
    let mut preds = Vec::new();
    for k in 0..500 {
        let n = 1 + rng.below(8) as usize;
        let total = 1 + rng.below(9) as u32;
        let parts: Vec<_> = (0..n).map(|i| (format!("t{i}"), None, rng.below(total as u64 + 1) as u32)).collect();
        instances.push(AnnotatedInstance::from_parts(format!("i{k}"), parts, total).unwrap());
        // Scores on a coarse dyadic grid: frequent exact ties, exact sums.
        preds.push(Prediction::new((0..n).map(|_| rng.below(5) as f64 / 4.0).collect()));
    }
    let corpus = Corpus::new(instances, "oracle").unwrap();
    let report = match_report(&corpus, &preds).unwrap();
    let mut expected = [0.0; 4];
    for (m, slot) in expected.iter_mut().enumerate() {
        let total: f64 = corpus.iter().zip(&preds).map(|(i, p)| brute_force_match(i, p.scores(), m + 1)).sum();
        *slot = total / corpus.len() as f64;
    }
    assert_eq!(report.m_scores, expected);
    assert_eq!(report.average, expected.iter().sum::<f64>() / 4.0);
}

#[test]
fn random_baseline_is_reproducible() {
    let (corpus, _) = random_corpus(1, 40, 12, 9, 1).unwrap();
    let a = random_baseline(&corpus, 7, 20).unwrap();
    assert_eq!(a, random_baseline(&corpus, 7, 20).unwrap());
    assert_ne!(a, random_baseline(&corpus, 8, 20).unwrap());
}
