use neuroseq::decode::{
    beam_search, greedy, nucleus_distribution, nucleus_sample, sample_index, GenerationConfig, Hypothesis,
    StepScorer,
};
use neuroseq::lm::BigramLm;
use neuroseq::metrics::wer;
use neuroseq::rescore::{
    oracle_select, score_candidates, select_best, BlendWeights, PhonemeLikelihood, RescoreConfig,
    ScoredHypothesis,
};
use neuroseq::synth::{generate_corpus, CorpusConfig};
use neuroseq::vocab::Lexicon;
use neuroseq::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distributions drawn from a seed and the prefix, so every
/// prefix always sees the same distribution.
struct TableScorer {
    vocab: usize,
    seed: u64,
    sharpness: f64,
}

impl StepScorer for TableScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let raw: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.gen::<f64>()).collect();
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + raw.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut lp: Vec<f64> = raw.iter().map(|v| v - z).collect();
        // Token `vocab - 1` acts as BOS and is never proposed.
        let bos = self.vocab - 1;
        lp[bos] = f64::NEG_INFINITY;
        let z = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum::<f64>().ln();
        Ok(lp.iter().map(|v| v - z).collect())
    }

    fn bos(&self) -> usize {
        self.vocab - 1
    }

    fn eos(&self) -> usize {
        0
    }
}

fn all_hypotheses(scorer: &mut TableScorer, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (tokens, lp) in &frontier {
            let mut prefix = vec![scorer.bos()];
            prefix.extend(tokens);
            let dist = scorer.next_log_probs(&prefix).unwrap();
            for (k, &v) in dist.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                if k == scorer.eos() {
                    out.push(Hypothesis { tokens: tokens.clone(), log_prob: lp + v, finished: true });
                } else {
                    let mut t = tokens.clone();
                    t.push(k);
                    if step + 1 == max_len {
                        out.push(Hypothesis { tokens: t, log_prob: lp + v, finished: false });
                    } else {
                        next.push((t, lp + v));
                    }
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.normalized().total_cmp(&a.normalized()));
    out
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..50 {
        let mut s = TableScorer { vocab: 6, seed, sharpness: 3.0 };
        let g = greedy(&mut s, 8).unwrap();
        let b = beam_search(&mut s, 1, 8).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].finished, g.finished);
        assert!((b[0].log_prob - g.log_prob).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_matches_exhaustive_top_two() {
    for seed in 0..20 {
        let mut s = TableScorer { vocab: 4, seed, sharpness: 4.0 };
        let oracle = all_hypotheses(&mut s, 3);
        let beam = beam_search(&mut s, 2, 3).unwrap();
        let wide = beam_search(&mut s, 64, 3).unwrap();
        for (a, b) in wide.iter().zip(&oracle).take(2) {
            assert_eq!(a.tokens, b.tokens);
            assert!((a.log_prob - b.log_prob).abs() < 1e-12);
        }
        // A width-2 beam keeps two hypotheses, best first.
        assert_eq!(beam.len(), 2);
        assert!(beam[0].normalized() >= beam[1].normalized());
    }
    assert!(beam_search(&mut TableScorer { vocab: 3, seed: 0, sharpness: 1.0 }, 0, 3).is_err());
}

#[test]
fn nucleus_keeps_the_smallest_sufficient_set() {
    let lp: Vec<f64> = [0.9f64, 0.05, 0.05].iter().map(|p| p.ln()).collect();
    assert_eq!(nucleus_distribution(&lp, 0.5, 1.0, 0), vec![1.0, 0.0, 0.0]);
    let d = nucleus_distribution(&lp, 0.95, 1.0, 0);
    assert!(d[0] > 0.0 && d[1] > 0.0 && d[2] == 0.0);
    let k1 = nucleus_distribution(&lp, 1.0, 1.0, 1);
    assert_eq!(k1, vec![1.0, 0.0, 0.0]);
    // Temperature flattens the distribution.
    let hot = nucleus_distribution(&lp, 1.0, 10.0, 0);
    assert!(hot[1] > 0.05 && (hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn sampling_frequencies_match_the_distribution() {
    let lp: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
    let dist = nucleus_distribution(&lp, 0.9, 1.0, 0);
    let expect = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
    for (d, e) in dist.iter().zip(expect) {
        assert!((d - e).abs() < 1e-12);
    }
    let n = 10_000;
    let mut counts = [0usize; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..n {
        counts[sample_index(&dist, &mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(expect) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd.max(1e-9), "{counts:?}");
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let cfg = GenerationConfig { samples: 20, max_len: 5, ..GenerationConfig::default() };
    let run = |seed| {
        let mut s = TableScorer { vocab: 5, seed: 3, sharpness: 2.0 };
        nucleus_sample(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let a = run(1);
    let mut seen = std::collections::HashSet::new();
    assert!(a.iter().all(|h| seen.insert(h.tokens.clone())));
}

// ------------------------------------------------------------------ LM

#[test]
fn bigram_scores_and_normalization() {
    let lm = BigramLm::fit(&["the cat sat", "the dog sat", "a cat ran"], 0.5).unwrap();
    let the = lm.vocab().iter().position(|w| w == "the").unwrap();
    assert_eq!(lm.score("the"), lm.log_prob(lm.bos(), the));
    assert_eq!(lm.score("The!"), lm.score("the"));
    for prev in (0..lm.outcomes()).chain([lm.bos()]) {
        let total: f64 = (0..lm.outcomes()).map(|next| lm.log_prob(prev, next).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{prev}: {total}");
    }
    // Hand count: "the" follows BOS twice out of three sentences.
    let want = ((2.0 + 0.5) / (3.0 + 0.5 * lm.outcomes() as f64)).ln();
    assert!((lm.log_prob(lm.bos(), the) - want).abs() < 1e-12);
    assert!(lm.score("zebra") < lm.score("the"));
    assert!(BigramLm::fit(&["x"], 0.0).is_err());
}

#[test]
fn real_sentences_outscore_shuffled_ones() {
    let corpus = generate_corpus(&CorpusConfig::default(), 2).unwrap();
    let train: Vec<&str> = corpus.train.trials.iter().map(|t| t.text.as_str()).collect();
    let lm = BigramLm::fit(&train, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut wins, mut n) = (0, 0);
    let (mut real_sum, mut shuf_sum) = (0.0, 0.0);
    for t in &corpus.test.trials {
        let mut words: Vec<&str> = t.text.split_whitespace().collect();
        let original = words.clone();
        words.shuffle(&mut rng);
        if words == original {
            continue;
        }
        let (r, s) = (lm.score(&t.text), lm.score(&words.join(" ")));
        real_sum += r;
        shuf_sum += s;
        wins += usize::from(r > s);
        n += 1;
        if n == 100 {
            break;
        }
    }
    assert_eq!(n, 100);
    assert!(real_sum > shuf_sum);
    assert!(wins >= 80, "{wins}/100");
}

// ------------------------------------------------------------- rescoring

/// Likelihood favouring pronunciations of a given length.
struct LengthLikelihood(usize);

impl PhonemeLikelihood for LengthLikelihood {
    fn log_likelihood(&mut self, phonemes: &[usize]) -> Result<(f64, usize)> {
        Ok((-(phonemes.len().abs_diff(self.0) as f64) - 0.1 * phonemes.len() as f64, phonemes.len() + 1))
    }
}

fn scored_pool(reference: &[usize], seed: u64) -> (Vec<ScoredHypothesis>, String) {
    let (vocab, lexicon) = Lexicon::builtin(30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands: Vec<Hypothesis> = (0..8)
        .map(|_| Hypothesis {
            tokens: (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..30)).collect(),
            log_prob: -rng.gen::<f64>() * 5.0,
            finished: true,
        })
        .collect();
    cands.push(Hypothesis { tokens: reference.to_vec(), log_prob: -3.0, finished: true });
    let sentences: Vec<String> = (0..40)
        .map(|_| vocab.text(&(0..4).map(|_| rng.gen_range(0..30)).collect::<Vec<_>>()))
        .collect();
    let lm = BigramLm::fit(&sentences, 0.1).unwrap();
    let greedy = lexicon.g2p_ids(&vocab, &reference[..reference.len() - 1]).unwrap();
    let scored = score_candidates(
        &cands,
        &vocab,
        &lexicon,
        &lm,
        &greedy,
        &mut LengthLikelihood(greedy.len()),
        &RescoreConfig::default(),
    )
    .unwrap();
    (scored, vocab.text(reference))
}

#[test]
fn head_only_weights_rank_by_phoneme_head() {
    for seed in 0..10 {
        let (mut scored, _) = scored_pool(&[1, 2, 3], seed);
        for h in scored.iter_mut() {
            h.reblend(&BlendWeights::new(1.0, 0.0, 0.0));
        }
        let mut by_blend: Vec<usize> = (0..scored.len()).collect();
        let mut by_head = by_blend.clone();
        by_blend.sort_by(|&a, &b| scored[b].blended.total_cmp(&scored[a].blended).then(a.cmp(&b)));
        by_head.sort_by(|&a, &b| scored[b].phoneme_head.total_cmp(&scored[a].phoneme_head).then(a.cmp(&b)));
        assert_eq!(by_blend, by_head);
    }
}

fn manual(words: Vec<usize>, text: &str, h: f64, p: f64, l: f64, w: &BlendWeights) -> ScoredHypothesis {
    ScoredHypothesis {
        words,
        text: text.into(),
        gen_log_prob: 0.0,
        phoneme_head: h,
        per_consistency: p,
        lm: l,
        blended: w.blend(h, p, l),
        oov: false,
    }
}

#[test]
fn hand_computed_default_blend() {
    let w = BlendWeights::default();
    assert_eq!((w.phoneme_head, w.per_consistency, w.lm), (9.0, 4.0, 5.0));
    let a = manual(vec![0], "a", -1.0, -0.5, -3.0, &w);
    let b = manual(vec![1], "b", -2.0, 0.0, -2.0, &w);
    assert_eq!(a.blended, -26.0);
    assert_eq!(b.blended, -28.0);
    assert_eq!(select_best(&[b.clone(), a.clone()]).unwrap(), 1);
    // The LM alone prefers the other candidate.
    let lm_only = BlendWeights::new(0.0, 0.0, 1.0);
    let (mut a, mut b) = (a, b);
    a.reblend(&lm_only);
    b.reblend(&lm_only);
    assert_eq!(select_best(&[a, b]).unwrap(), 1);
}

#[test]
fn exact_pronunciation_has_zero_inconsistency() {
    let (scored, reference) = scored_pool(&[4, 7, 9, 2], 3);
    // The greedy phonemes are the pronunciation of the first three words.
    let (vocab, _) = Lexicon::builtin(30).unwrap();
    let target = vocab.text(&[4, 7, 9]);
    let (pool_exact, _) = {
        let (v, lex) = Lexicon::builtin(30).unwrap();
        let lm = BigramLm::fit(&[target.as_str()], 0.1).unwrap();
        let greedy = lex.g2p_ids(&v, &[4, 7, 9]).unwrap();
        let h = Hypothesis { tokens: vec![4, 7, 9], log_prob: 0.0, finished: true };
        let s = score_candidates(&[h], &v, &lex, &lm, &greedy, &mut LengthLikelihood(0), &RescoreConfig::default())
            .unwrap();
        (s, ())
    };
    assert_eq!(pool_exact[0].per_consistency, 0.0);
    assert!(scored.iter().all(|h| h.per_consistency <= 0.0));
    assert!(!reference.is_empty());
}

#[test]
fn selection_is_scale_invariant() {
    for seed in 0..10 {
        let (mut scored, _) = scored_pool(&[5, 6], seed);
        let base = select_best(&scored).unwrap();
        for c in [0.5, 3.0, 100.0] {
            let w = BlendWeights::new(9.0 * c, 4.0 * c, 5.0 * c);
            for h in scored.iter_mut() {
                h.reblend(&w);
            }
            assert_eq!(select_best(&scored).unwrap(), base);
        }
    }
}

#[test]
fn oracle_dominates_every_selector() {
    for seed in 0..10 {
        let (mut scored, reference) = scored_pool(&[3, 8, 1], seed);
        let o = oracle_select(&scored, &reference).unwrap();
        let best = wer(&reference, &scored[o].text).rate();
        assert_eq!(best, 0.0);
        for w in [BlendWeights::default(), BlendWeights::new(1.0, 0.0, 0.0), BlendWeights::new(0.0, 0.0, 1.0)] {
            for h in scored.iter_mut() {
                h.reblend(&w);
            }
            let s = select_best(&scored).unwrap();
            assert!(best <= wer(&reference, &scored[s].text).rate());
        }
    }
}

#[test]
fn singleton_and_empty_candidate_sets() {
    let w = BlendWeights::default();
    let one = vec![manual(vec![2], "x", -1.0, -1.0, -1.0, &w)];
    assert_eq!(select_best(&one).unwrap(), 0);
    assert_eq!(oracle_select(&one, "y").unwrap(), 0);
    assert!(select_best(&[]).is_err());
    assert!(oracle_select(&[], "y").is_err());
}

#[test]
fn oov_candidates_get_the_floor() {
    let (vocab, lexicon) = Lexicon::builtin(10).unwrap();
    let lm = BigramLm::fit(&["a b"], 0.1).unwrap();
    // Token 99 is outside the vocabulary, so no pronunciation exists.
    let h = Hypothesis { tokens: vec![99], log_prob: 0.0, finished: true };
    let cfg = RescoreConfig::default();
    let s = score_candidates(&[h], &vocab, &lexicon, &lm, &[1], &mut LengthLikelihood(1), &cfg).unwrap();
    assert!(s[0].oov);
    assert_eq!((s[0].phoneme_head, s[0].per_consistency), (cfg.oov_floor, cfg.oov_floor));
}
