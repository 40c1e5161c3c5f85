//! Synthetic query logs with planted topic structure.
//!
//! Each topic is a pseudo-word (`kabo`, `teru`, ...) drawn from a Zipf law
//! and belongs to one domain. A query is `topic [neighbor] [modifier]`, where
//! neighbors are topics of the same domain and modifiers are domain-specific
//! English words. Within a session the next query reformulates the previous
//! topic with probability `relatedness`, otherwise it is a fresh draw.
//! Engagement is more likely after a related reformulation and after queries
//! carrying a modifier; queries with an accidental duplicated word are
//! rarely engaged.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};

use super::QueryEvent;
use crate::error::{Error, Result};
use crate::SeedRng;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const MODIFIERS: [&str; 48] = [
    "jobs",
    "salary",
    "internship",
    "hiring",
    "manager",
    "engineer", // work
    "course",
    "tutorial",
    "certificate",
    "online",
    "exam",
    "degree", // learning
    "price",
    "review",
    "cheap",
    "best",
    "deals",
    "store", // shopping
    "news",
    "today",
    "latest",
    "breaking",
    "update",
    "report", // news
    "near",
    "hours",
    "open",
    "directions",
    "address",
    "phone", // local
    "recipe",
    "easy",
    "healthy",
    "vegan",
    "quick",
    "dinner", // food
    "tickets",
    "schedule",
    "trailer",
    "cast",
    "season",
    "streaming", // media
    "symptoms",
    "treatment",
    "clinic",
    "doctor",
    "causes",
    "therapy", // health
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub sessions_per_user: usize,
    /// Probability that a session continues with one more query.
    pub continue_prob: f64,
    pub topics: usize,
    /// Number of domains, at most 8; each has six modifiers.
    pub domains: usize,
    pub zipf_exponent: f64,
    /// Probability that a query reformulates the previous topic.
    pub relatedness: f64,
    pub engage_related: f64,
    pub engage_unrelated: f64,
    /// Added to the engagement probability when the query has a modifier.
    pub engage_modifier_bonus: f64,
    /// Probability that a query has one word accidentally duplicated.
    pub duplicate_prob: f64,
    pub engage_duplicate: f64,
    /// Maximum in-session gap in seconds; later gaps exceed it.
    pub window_seconds: u64,
    pub start_time: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 2800,
            sessions_per_user: 6,
            continue_prob: 0.75,
            topics: 2200,
            domains: 8,
            zipf_exponent: 1.0,
            relatedness: 0.75,
            engage_related: 0.12,
            engage_unrelated: 0.03,
            engage_modifier_bonus: 0.06,
            duplicate_prob: 0.04,
            engage_duplicate: 0.01,
            window_seconds: 300,
            start_time: 1_600_000_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("continue_prob", self.continue_prob),
            ("relatedness", self.relatedness),
            ("engage_related", self.engage_related),
            ("engage_unrelated", self.engage_unrelated),
            ("engage_modifier_bonus", self.engage_modifier_bonus),
            ("duplicate_prob", self.duplicate_prob),
            ("engage_duplicate", self.engage_duplicate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synth {name} must lie in [0, 1], got {p}")));
            }
        }
        if self.continue_prob >= 1.0 {
            return Err(Error::Config("synth continue_prob must be below 1".into()));
        }
        if self.domains == 0 || self.domains > MODIFIERS.len() / 6 {
            return Err(Error::Config(format!("synth domains must lie in [1, {}]", MODIFIERS.len() / 6)));
        }
        if self.topics < self.domains {
            return Err(Error::Config("synth needs at least one topic per domain".into()));
        }
        if self.topics > CONSONANTS.len().pow(3) * VOWELS.len().pow(3) {
            return Err(Error::Config("synth topic count exceeds the pseudo-word space".into()));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config("synth zipf_exponent must be finite and non-negative".into()));
        }
        if self.window_seconds < 2 {
            return Err(Error::Config("synth window_seconds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Pseudo-word for topic `i`: two or three consonant-vowel syllables.
pub fn topic_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let syllable = |k: usize| [CONSONANTS[k / VOWELS.len()] as char, VOWELS[k % VOWELS.len()] as char];
    let mut w = String::new();
    w.extend(syllable(i % n));
    w.extend(syllable((i / n) % n));
    if i >= n * n {
        w.extend(syllable((i / (n * n) - 1) % n));
    }
    w
}

#[derive(Clone, Copy, Debug)]
struct Query {
    topic: usize,
    neighbor: Option<usize>,
    modifier: Option<usize>,
}

struct Grammar<'a> {
    cfg: &'a SynthConfig,
    topic_dist: WeightedIndex<f64>,
    words: Vec<String>,
}

impl Grammar<'_> {
    fn domain(&self, topic: usize) -> usize {
        topic % self.cfg.domains
    }

    fn neighbor(&self, topic: usize, rng: &mut SeedRng) -> usize {
        let k = rng.random_range(1..=3);
        (topic + k * self.cfg.domains) % self.cfg.topics
    }

    fn modifier(&self, topic: usize, rng: &mut SeedRng) -> usize {
        self.domain(topic) * 6 + rng.random_range(0..6)
    }

    fn fresh(&self, rng: &mut SeedRng) -> Query {
        let topic = self.topic_dist.sample(rng);
        let form: f64 = rng.random();
        let (with_neighbor, with_mod) = match form {
            f if f < 0.30 => (false, false),
            f if f < 0.75 => (false, true),
            f if f < 0.85 => (true, false),
            _ => (true, true),
        };
        Query {
            topic,
            neighbor: with_neighbor.then(|| self.neighbor(topic, rng)),
            modifier: with_mod.then(|| self.modifier(topic, rng)),
        }
    }

    fn reformulate(&self, prev: Query, rng: &mut SeedRng) -> Query {
        let mut q = prev;
        match rng.random_range(0..4) {
            0 => q.modifier = Some(self.modifier(q.topic, rng)),
            1 => q.modifier = if q.modifier.is_some() { None } else { Some(self.modifier(q.topic, rng)) },
            2 => q.neighbor = if q.neighbor.is_some() { None } else { Some(self.neighbor(q.topic, rng)) },
            _ => {
                q.neighbor = Some(self.neighbor(q.topic, rng));
                q.modifier = Some(self.modifier(q.topic, rng));
            }
        }
        q
    }

    fn render(&self, q: Query, duplicate: bool, rng: &mut SeedRng) -> String {
        let mut toks: Vec<&str> = vec![&self.words[q.topic]];
        if let Some(n) = q.neighbor {
            toks.push(&self.words[n]);
        }
        if let Some(m) = q.modifier {
            toks.push(MODIFIERS[m]);
        }
        if duplicate {
            let i = rng.random_range(0..toks.len());
            toks.insert(i, toks[i]);
        }
        toks.join(" ")
    }
}

/// Generates a log; every user gets an independent random stream.
pub fn synthesize_logs(cfg: &SynthConfig, seed: u64) -> Result<Vec<QueryEvent>> {
    cfg.validate()?;
    let mut events = Vec::new();
    if cfg.users == 0 || cfg.sessions_per_user == 0 {
        return Ok(events);
    }
    let weights: Vec<f64> = (1..=cfg.topics).map(|k| (k as f64).powf(-cfg.zipf_exponent)).collect();
    let grammar = Grammar {
        cfg,
        topic_dist: WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?,
        words: (0..cfg.topics).map(topic_word).collect(),
    };

    for u in 0..cfg.users {
        let mut rng = SeedRng::seed_from_u64(seed);
        rng.set_stream(u as u64);
        let user = format!("u{u:05}");
        let mut t = cfg.start_time + rng.random_range(0..86_400);
        for _ in 0..cfg.sessions_per_user {
            let mut prev: Option<Query> = None;
            loop {
                let (q, related) = match prev {
                    Some(p) if rng.random_bool(cfg.relatedness) => (grammar.reformulate(p, &mut rng), true),
                    _ => (grammar.fresh(&mut rng), false),
                };
                let duplicate = rng.random_bool(cfg.duplicate_prob);
                let text = grammar.render(q, duplicate, &mut rng);
                let p_engage = if duplicate {
                    cfg.engage_duplicate
                } else {
                    let base = if related { cfg.engage_related } else { cfg.engage_unrelated };
                    (base + if q.modifier.is_some() { cfg.engage_modifier_bonus } else { 0.0 }).min(1.0)
                };
                let engaged = rng.random_bool(p_engage);
                events.push(QueryEvent::new(user.as_str(), t, &text, engaged)?);
                prev = Some(q);
                if !rng.random_bool(cfg.continue_prob) {
                    break;
                }
                t += rng.random_range(5..cfg.window_seconds);
            }
            t += cfg.window_seconds + rng.random_range(300..172_800);
        }
    }
    Ok(events)
}
