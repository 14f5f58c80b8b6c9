//! Deterministic synthetic fixtures: a generic grammar corpus, a typed
//! knowledge base, and five-sentence stories.
//!
//! The grammar corpus teaches the relation phrasings (including the
//! synonymous variants) over *random* noun pairings, so it carries no
//! relational knowledge. The fixture KB pairs each relation with disjoint
//! head/tail type pools, so the head–relation–tail correlations are only
//! learnable by post-training on the verbalized triples. Stories draw their
//! sentences independently of the beginning, which keeps beginning-ranking
//! at exact chance level for an untrained model.

use crate::corpus::Story;
use crate::knowledge::{KnowledgeSource, KnowledgeTriple};
use crate::rng::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const ANIMALS: [&str; 20] = [
    "dog", "cat", "bird", "fox", "owl", "bear", "wolf", "frog", "deer", "mouse", "horse", "goat",
    "duck", "crow", "hare", "mole", "toad", "swan", "lamb", "seal",
];
const PLACES: [&str; 20] = [
    "park", "lake", "barn", "cave", "forest", "garden", "market", "house", "field", "bridge",
    "hill", "pond", "shed", "valley", "meadow", "harbor", "mill", "tower", "yard", "grove",
];
const TOOLS: [&str; 15] = [
    "hammer", "broom", "kettle", "ladder", "needle", "shovel", "brush", "rope", "pot", "lamp",
    "saw", "pail", "rake", "knife", "wheel",
];
const ACTIVITIES: [&str; 12] = [
    "cooking", "cleaning", "digging", "sewing", "painting", "building", "washing", "lighting",
    "cutting", "climbing", "carrying", "sweeping",
];
const EVENTS: [&str; 12] = [
    "rain", "storm", "fire", "flood", "frost", "wind", "thunder", "drought", "hail", "fog",
    "snow", "heat",
];
const OUTCOMES: [&str; 12] = [
    "mud", "damage", "smoke", "puddles", "ice", "dust", "noise", "cracks", "ash", "mist",
    "drifts", "thirst",
];
const FOODS: [&str; 10] = [
    "bones", "seeds", "berries", "honey", "fish", "corn", "apples", "grass", "worms", "bread",
];
const KINDS: [&str; 6] = ["animal", "pet", "creature", "beast", "friend", "hunter"];
const VERBS: [&str; 8] = [
    "sees", "likes", "finds", "follows", "helps", "chases", "watches", "greets",
];
const ADJECTIVES: [&str; 8] = [
    "happy", "tired", "quick", "quiet", "brave", "calm", "hungry", "sleepy",
];

fn all_nouns() -> Vec<&'static str> {
    let mut v = Vec::new();
    v.extend(ANIMALS);
    v.extend(PLACES);
    v.extend(TOOLS);
    v.extend(ACTIVITIES);
    v.extend(EVENTS);
    v.extend(OUTCOMES);
    v.extend(FOODS);
    v.extend(KINDS);
    v
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// Generic pretraining corpus: simple sentences plus the relation phrasings
/// (training and synonymous alike) over uniformly random noun pairs.
pub fn grammar_corpus(n: usize, seed: u64) -> Vec<String> {
    let nouns = all_nouns();
    (0..n)
        .map(|i| {
            let mut rng = derive_rng(seed, "grammar", i as u64);
            let a = pick(&mut rng, &nouns);
            let b = pick(&mut rng, &nouns);
            match rng.random_range(0..12u32) {
                0 => format!("the {} {} the {}.", pick(&mut rng, &ANIMALS), pick(&mut rng, &VERBS), pick(&mut rng, &ANIMALS)),
                1 => format!("the {} went to the {}.", pick(&mut rng, &ANIMALS), pick(&mut rng, &PLACES)),
                2 => format!("the {} was {}.", pick(&mut rng, &ANIMALS), pick(&mut rng, &ADJECTIVES)),
                3 => format!("{a} is at {b}."),
                4 => format!("{a} is located in {b}."),
                5 => format!("{a} is used for {b}."),
                6 => format!("{a} is useful for {b}."),
                7 => format!("{a} causes {b}."),
                8 => format!("{a} leads to {b}."),
                9 => format!("{a} wants {b}."),
                10 => format!("{a} longs for {b}."),
                _ => format!("{a} is a {b}."),
            }
        })
        .collect()
}

fn typed_combos() -> Vec<(&'static str, &'static str, &'static str)> {
    let mut combos = Vec::new();
    for &h in &ANIMALS {
        for &t in &PLACES {
            combos.push((h, "AtLocation", t));
        }
    }
    for &h in &TOOLS {
        for &t in &ACTIVITIES {
            combos.push((h, "UsedFor", t));
        }
    }
    for &h in &EVENTS {
        for &t in &OUTCOMES {
            combos.push((h, "Causes", t));
        }
    }
    for &h in &ANIMALS {
        for &t in &FOODS {
            combos.push((h, "Desires", t));
        }
    }
    for &h in &ANIMALS {
        for &t in &KINDS {
            combos.push((h, "IsA", t));
        }
    }
    combos
}

/// A typed fixture KB: relations hold only between their type pools
/// (animals at places, tools used for activities, events causing outcomes,
/// animals desiring foods, animals being kinds). Returns disjoint training
/// and held-out triple sets.
pub fn fixture_kb(
    n_train: usize,
    n_held_out: usize,
    seed: u64,
) -> (Vec<KnowledgeTriple>, Vec<KnowledgeTriple>) {
    let mut combos = typed_combos();
    assert!(
        n_train + n_held_out <= combos.len(),
        "fixture KB supports at most {} triples",
        combos.len()
    );
    let mut rng = derive_rng(seed, "fixture-kb", 0);
    combos.shuffle(&mut rng);
    let to_triple = |(h, r, t): (&str, &str, &str)| KnowledgeTriple {
        head: h.to_string(),
        relation: r.to_string(),
        tail: t.to_string(),
        source: KnowledgeSource::ConceptNetLike,
    };
    let train = combos[..n_train].iter().cloned().map(to_triple).collect();
    let held_out = combos[n_train..n_train + n_held_out]
        .iter()
        .cloned()
        .map(to_triple)
        .collect();
    (train, held_out)
}

/// Maximum number of triples [`fixture_kb`] can produce.
pub fn fixture_kb_capacity() -> usize {
    typed_combos().len()
}

fn continuation_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4u32) {
        0 => format!(
            "the {} {} the {}.",
            pick(rng, &ANIMALS),
            pick(rng, &VERBS),
            pick(rng, &ANIMALS)
        ),
        1 => format!("a {} lay near the {}.", pick(rng, &TOOLS), pick(rng, &PLACES)),
        2 => format!("the {} was {}.", pick(rng, &ANIMALS), pick(rng, &ADJECTIVES)),
        _ => format!("the {} brought {}.", pick(rng, &EVENTS), pick(rng, &OUTCOMES)),
    }
}

/// Five-sentence synthetic stories. The beginning and the four continuation
/// sentences are drawn independently, and continuation sentences are
/// distinct within each story.
pub fn synthetic_stories(n: usize, seed: u64) -> Vec<Story> {
    (0..n)
        .map(|i| {
            let mut rng = derive_rng(seed, "stories", i as u64);
            let beginning = format!(
                "the {} went to the {}.",
                pick(&mut rng, &ANIMALS),
                pick(&mut rng, &PLACES)
            );
            let mut sentences = vec![beginning];
            while sentences.len() < 5 {
                let s = continuation_sentence(&mut rng);
                if !sentences.contains(&s) {
                    sentences.push(s);
                }
            }
            Story {
                id: format!("fixture-{i}"),
                sentences,
            }
        })
        .collect()
}
