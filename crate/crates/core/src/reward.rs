//! Sequence-terminal reward: session feedback, ROUGE-1 relatedness to the
//! source query and an unnaturalness penalty.

use std::collections::HashMap;
use std::hash::Hash;

use crate::corpus::{decode, FeedbackIndex, Vocabulary, PAD};
use crate::error::{ensure, Result};
use crate::estimator::Estimator;

/// Unigram F-measure with clipped overlap counts.
pub fn rouge1<T: Eq + Hash>(source: &[T], candidate: &[T]) -> Result<f64> {
    ensure!(!source.is_empty() && !candidate.is_empty(), Invalid, "rouge1 needs two non-empty sequences");
    let mut counts: HashMap<&T, (usize, usize)> = HashMap::new();
    for t in source {
        counts.entry(t).or_default().0 += 1;
    }
    for t in candidate {
        counts.entry(t).or_default().1 += 1;
    }
    let overlap: usize = counts.values().map(|&(a, b)| a.min(b)).sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / source.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardComponents {
    pub u_plus: bool,
    pub rouge: f64,
    pub d_phi: f64,
    pub eta: f64,
}

/// `U + (1 - U) * (rouge - eta * (1 - d_phi))`.
pub fn composite_reward(c: &RewardComponents) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&c.rouge), Invalid, "rouge {} outside [0, 1]", c.rouge);
    ensure!((0.0..=1.0).contains(&c.d_phi), Invalid, "naturalness {} outside [0, 1]", c.d_phi);
    ensure!(c.eta >= 0.0 && c.eta.is_finite(), Invalid, "penalty weight {} must be non-negative", c.eta);
    let u = if c.u_plus { 1.0 } else { 0.0 };
    Ok(u + (1.0 - u) * (c.rouge - c.eta * (1.0 - c.d_phi)))
}

/// Everything needed to score generated sequences for one source query.
pub struct RewardEngine<'a> {
    pub feedback: &'a FeedbackIndex,
    pub estimator: &'a Estimator<f32>,
    pub vocab: &'a Vocabulary,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub text: String,
    pub components: RewardComponents,
    pub reward: f64,
}

impl ScoredSample {
    /// `q_i, y, u_plus, rouge, d_phi, R` as a tab-separated audit line.
    pub fn trace_line(&self, source_text: &str) -> String {
        let c = &self.components;
        format!("{source_text}\t{}\t{}\t{}\t{}\t{}", self.text, u8::from(c.u_plus), c.rouge, c.d_phi, self.reward)
    }
}

impl RewardEngine<'_> {
    /// Reward for a generated body `y` (no `<END>`). The feedback lookup uses
    /// the logged text of the source; an empty suggestion (trailing padding
    /// ignored) gets the minimum reward `-eta`.
    pub fn score(&self, source_text: &str, source: &[u32], y: &[u32]) -> Result<ScoredSample> {
        let y = &y[..y.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1)];
        let text = decode(y, self.vocab);
        let components = if y.is_empty() {
            RewardComponents { u_plus: false, rouge: 0.0, d_phi: 0.0, eta: self.eta }
        } else {
            RewardComponents {
                u_plus: self.feedback.u_plus(source_text, &text),
                rouge: rouge1(source, y)?,
                d_phi: self.estimator.naturalness(source, y)?,
                eta: self.eta,
            }
        };
        let reward = composite_reward(&components)?;
        Ok(ScoredSample { text, components, reward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, QueryPair};
    use crate::estimator::EstimatorConfig;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }

    #[test]
    fn rouge_hand_counts() {
        assert_eq!(rouge1(&toks("a b"), &toks("a b")).unwrap(), 1.0);
        assert_eq!(rouge1(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        let r = rouge1(&toks("machine learning jobs"), &toks("machine learning")).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        // Clipped: repeats of a shared word count once per source occurrence.
        let r = rouge1(&toks("ai jobs"), &toks("ai ai ai ai")).unwrap();
        assert!((r - 2.0 * 0.25 * 0.5 / 0.75).abs() < 1e-15);
        assert!(rouge1::<&str>(&[], &toks("a")).is_err());
    }

    #[test]
    fn composite_cases() {
        let c = |u, rouge, d, eta| composite_reward(&RewardComponents { u_plus: u, rouge, d_phi: d, eta }).unwrap();
        assert_eq!(c(true, 0.1, 0.2, 5.0), 1.0);
        assert!((c(false, 0.5, 0.8, 1.0) - 0.3).abs() < 1e-15);
        assert_eq!(c(false, 0.0, 0.0, 1.0), -1.0);
        let bad = RewardComponents { u_plus: false, rouge: 1.5, d_phi: 0.5, eta: 1.0 };
        assert!(composite_reward(&bad).is_err());
        assert!(composite_reward(&RewardComponents { eta: -1.0, rouge: 0.5, ..bad }).is_err());
    }

    #[test]
    fn engine_paths() {
        let vocab = build_vocab(["ai jobs ml google"], 100).unwrap();
        let est = Estimator::<f32>::seeded(
            EstimatorConfig { vocab_size: vocab.len(), emb_dim: 4, hidden: 3, layers: 2, dropout: 0.0 },
            0,
        )
        .unwrap();
        let pairs = [QueryPair { source: "google".into(), target: "ai jobs".into(), u_plus: true }];
        let fb = FeedbackIndex::from_pairs(&pairs);
        let ids = |s: &str| s.split(' ').map(|w| vocab.id(w)).collect::<Vec<_>>();
        let engine = RewardEngine { feedback: &fb, estimator: &est, vocab: &vocab, eta: 0.0 };
        assert_eq!(engine.score("google", &ids("google"), &ids("ai jobs")).unwrap().reward, 1.0);
        assert_eq!(engine.score("ml", &ids("ml"), &ids("ml")).unwrap().reward, 1.0);
        let engine = RewardEngine { eta: 2.0, ..engine };
        let s = engine.score("ml", &ids("ml"), &ids("jobs jobs")).unwrap();
        let d = est.naturalness(&ids("ml"), &ids("jobs jobs")).unwrap();
        assert_eq!(s.reward, 0.0 - 2.0 * (1.0 - d));
        assert_eq!(engine.score("ml", &ids("ml"), &[]).unwrap().reward, -2.0);
        assert_eq!(engine.score("ml", &ids("ml"), &[PAD, PAD]).unwrap().reward, -2.0);
        let line = s.trace_line("ml");
        assert!(line.starts_with("ml\tjobs jobs\t0\t0\t"));
    }

    proptest! {
        #[test]
        fn reward_monotone_when_no_feedback(r1 in 0.0..1.0f64, r2 in 0.0..1.0f64, d1 in 0.0..1.0f64, d2 in 0.0..1.0f64, e1 in 0.0..10.0f64, e2 in 0.0..10.0f64) {
            let c = |rouge, d_phi, eta| composite_reward(&RewardComponents { u_plus: false, rouge, d_phi, eta }).unwrap();
            let (rl, rh) = (r1.min(r2), r1.max(r2));
            let (dl, dh) = (d1.min(d2), d1.max(d2));
            let (el, eh) = (e1.min(e2), e1.max(e2));
            prop_assert!(c(rl, d1, e1) <= c(rh, d1, e1));
            prop_assert!(c(r1, dl, e1) <= c(r1, dh, e1));
            prop_assert!(c(r1, d1, eh) <= c(r1, d1, el));
            prop_assert_eq!(composite_reward(&RewardComponents { u_plus: true, rouge: r1, d_phi: d1, eta: e1 }).unwrap(), 1.0);
        }

        #[test]
        fn rouge_symmetric_and_order_free(a in proptest::collection::vec(0u32..6, 1..8), b in proptest::collection::vec(0u32..6, 1..8), rot in 0usize..8) {
            let x = rouge1(&a, &b).unwrap();
            prop_assert_eq!(x, rouge1(&b, &a).unwrap());
            let mut shuffled = a.clone();
            shuffled.rotate_left(rot % a.len());
            shuffled.reverse();
            prop_assert_eq!(x, rouge1(&shuffled, &b).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
