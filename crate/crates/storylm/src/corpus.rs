//! Story corpus handling: sentence segmentation, name delexicalization,
//! context/continuation splits, and construction of the three fake-story
//! classes.
//!
//! A story is a context sentence followed by K continuation sentences
//! (K = 4 by default). Fake stories modify only the continuation:
//! D2 shuffles it, D3 replaces one sentence with one sampled from another
//! story, D4 overwrites one sentence with a copy of another from the same
//! story. Overwriting (rather than inserting) for D4 keeps all four classes
//! length-matched, so the classifier cannot key on story length.

use crate::rng::derive_rng_keyed;
use crate::tokenizer::Tokenizer;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

/// Default continuation length.
pub const DEFAULT_K: usize = 4;

const MAX_RESAMPLE_ATTEMPTS: usize = 200;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("story {id:?} has {n} continuation sentences; {op} needs at least 2")]
    TooFewSentences {
        id: String,
        n: usize,
        op: &'static str,
    },
    #[error("donor pool has no story other than {id:?}")]
    EmptyDonorPool { id: String },
    #[error("story {id:?} admits no {op} distinct from the original")]
    Degenerate { id: String, op: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A story: a context sentence plus K continuation sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub sentences: Vec<String>,
}

impl Story {
    pub fn context(&self) -> &str {
        &self.sentences[0]
    }

    pub fn continuation(&self) -> &[String] {
        &self.sentences[1..]
    }

    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    /// The `(context, continuation)` view.
    pub fn example(&self) -> StoryExample {
        StoryExample {
            context: self.sentences[0].clone(),
            continuation: self.sentences[1..].to_vec(),
        }
    }
}

/// A story split into its beginning and the K sentences to be generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryExample {
    pub context: String,
    pub continuation: Vec<String>,
}

/// Story class: true stories and the three constructed fake classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StoryLabel {
    D1,
    D2,
    D3,
    D4,
}

impl StoryLabel {
    pub const ALL: [StoryLabel; 4] = [
        StoryLabel::D1,
        StoryLabel::D2,
        StoryLabel::D3,
        StoryLabel::D4,
    ];

    pub fn index(self) -> usize {
        match self {
            StoryLabel::D1 => 0,
            StoryLabel::D2 => 1,
            StoryLabel::D3 => 2,
            StoryLabel::D4 => 3,
        }
    }
}

/// A constructed (true or fake) story before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstructedStory {
    pub origin_id: String,
    pub label: StoryLabel,
    pub sentences: Vec<String>,
}

impl ConstructedStory {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// A labeled story ready for training: the tokenized full story (terminated
/// with end-of-text), its class, and the source story id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledStory {
    pub origin_id: String,
    pub label: StoryLabel,
    pub sentences: Vec<String>,
    pub tokens: Vec<u32>,
}

impl LabeledStory {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    fn from_constructed(c: ConstructedStory, tokenizer: &Tokenizer) -> Self {
        let mut tokens = tokenizer.encode(&c.text());
        tokens.push(tokenizer.end_of_text_id());
        Self {
            origin_id: c.origin_id,
            label: c.label,
            sentences: c.sentences,
            tokens,
        }
    }
}

/// Male/female first-name gazetteer for delexicalization. Matching is
/// whole-word and case-sensitive on capitalized tokens.
#[derive(Debug, Clone)]
pub struct NameLexicon {
    male: HashSet<String>,
    female: HashSet<String>,
}

impl NameLexicon {
    /// The bundled word lists.
    pub fn bundled() -> Self {
        Self::from_lists(
            include_str!("data/names_male.txt"),
            include_str!("data/names_female.txt"),
        )
    }

    /// Builds a lexicon from newline-separated word lists. Names appearing
    /// in both lists are kept only as male, preserving disjointness.
    pub fn from_lists(male: &str, female: &str) -> Self {
        let male: HashSet<String> = male
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let female = female
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !male.contains(*l))
            .map(String::from)
            .collect();
        Self { male, female }
    }

    pub fn load(male_path: &Path, female_path: &Path) -> Result<Self, CorpusError> {
        Ok(Self::from_lists(
            &std::fs::read_to_string(male_path)?,
            &std::fs::read_to_string(female_path)?,
        ))
    }
}

fn stopwords() -> &'static HashSet<&'static str> {
    use std::sync::OnceLock;
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        include_str!("data/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// Splits text into sentences on `.`, `!`, `?` followed by whitespace or end
/// of input. Terminal punctuation stays on its sentence; surrounding
/// whitespace is trimmed. Text without terminal punctuation comes back as a
/// single sentence. Abbreviations are not special-cased.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    for i in 0..bytes.len() {
        let is_terminal = matches!(bytes[i], b'.' | b'!' | b'?');
        let at_boundary =
            i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace();
        if is_terminal && at_boundary {
            let sentence = text[start..=i].trim();
            if !sentence.is_empty() {
                out.push(sentence.to_string());
            }
            start = i + 1;
        }
    }
    if start < bytes.len() {
        let rest = text[start..].trim();
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
    }
    out
}

/// Replaces names with placeholders: lexicon names become `[MALE]` or
/// `[FEMALE]` wherever they appear; any other capitalized token that is
/// neither sentence-initial nor a stopword becomes `[NEUTRAL]`. Idempotent,
/// since the placeholders themselves do not start with a letter.
pub fn delexicalize(story: &Story, lexicon: &NameLexicon) -> Story {
    let sentences = story
        .sentences
        .iter()
        .map(|s| delexicalize_sentence(s, lexicon))
        .collect();
    Story {
        id: story.id.clone(),
        sentences,
    }
}

fn delexicalize_sentence(sentence: &str, lexicon: &NameLexicon) -> String {
    let words: Vec<String> = sentence
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| delexicalize_word(w, i == 0, lexicon))
        .collect();
    words.join(" ")
}

fn delexicalize_word(word: &str, sentence_initial: bool, lexicon: &NameLexicon) -> String {
    // Placeholders are final; without this, a second pass would see their
    // capitalized cores and idempotence would break.
    for placeholder in ["[MALE]", "[FEMALE]", "[NEUTRAL]"] {
        if word.contains(placeholder) {
            return word.to_string();
        }
    }
    // Split the word into leading punctuation, core, trailing punctuation.
    let start = word.find(|c: char| c.is_ascii_alphabetic());
    let Some(start) = start else {
        return word.to_string();
    };
    let end = word.rfind(|c: char| c.is_ascii_alphabetic()).unwrap() + 1;
    let (prefix, rest) = word.split_at(start);
    let (core, suffix) = rest.split_at(end - start);

    if !core.starts_with(|c: char| c.is_ascii_uppercase()) {
        return word.to_string();
    }
    // Possessives keep their 's: the name alone is looked up.
    let (base, possessive) = match core.strip_suffix("'s") {
        Some(b) => (b, "'s"),
        None => (core, ""),
    };
    let replacement = if lexicon.male.contains(base) {
        Some("[MALE]")
    } else if lexicon.female.contains(base) {
        Some("[FEMALE]")
    } else if !sentence_initial && !stopwords().contains(base) {
        Some("[NEUTRAL]")
    } else {
        None
    };
    match replacement {
        Some(p) => format!("{prefix}{p}{possessive}{suffix}"),
        None => word.to_string(),
    }
}

fn require_k_at_least_2(story: &Story, op: &'static str) -> Result<(), CorpusError> {
    if story.sentences.len() < 3 {
        return Err(CorpusError::TooFewSentences {
            id: story.id.clone(),
            n: story.sentences.len().saturating_sub(1),
            op,
        });
    }
    Ok(())
}

/// D2: permutes the continuation with a uniformly sampled non-identity
/// permutation. The context sentence is untouched.
pub fn make_shuffled(story: &Story, rng: &mut ChaCha8Rng) -> Result<ConstructedStory, CorpusError> {
    require_k_at_least_2(story, "shuffle")?;
    let original = story.continuation().to_vec();
    if original.iter().collect::<HashSet<_>>().len() == 1 {
        // All continuation sentences identical: every permutation is the
        // identity as a sentence sequence.
        return Err(CorpusError::Degenerate {
            id: story.id.clone(),
            op: "shuffle",
        });
    }
    let mut shuffled = original.clone();
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        shuffled.shuffle(rng);
        if shuffled != original {
            let mut sentences = vec![story.context().to_string()];
            sentences.extend(shuffled);
            return Ok(ConstructedStory {
                origin_id: story.id.clone(),
                label: StoryLabel::D2,
                sentences,
            });
        }
    }
    Err(CorpusError::Degenerate {
        id: story.id.clone(),
        op: "shuffle",
    })
}

/// D3: replaces one uniformly chosen continuation sentence with a uniformly
/// sampled continuation sentence from a different story.
pub fn make_replaced(
    story: &Story,
    donor_pool: &[Story],
    rng: &mut ChaCha8Rng,
) -> Result<ConstructedStory, CorpusError> {
    let donors: Vec<&Story> = donor_pool.iter().filter(|d| d.id != story.id).collect();
    if donors.is_empty() {
        return Err(CorpusError::EmptyDonorPool {
            id: story.id.clone(),
        });
    }
    let k = story.continuation().len();
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let position = rng.random_range(0..k);
        let donor = donors[rng.random_range(0..donors.len())];
        let donor_cont = donor.continuation();
        if donor_cont.is_empty() {
            continue;
        }
        let replacement = &donor_cont[rng.random_range(0..donor_cont.len())];
        if replacement != &story.continuation()[position] {
            let mut sentences = story.sentences.clone();
            sentences[position + 1] = replacement.clone();
            return Ok(ConstructedStory {
                origin_id: story.id.clone(),
                label: StoryLabel::D3,
                sentences,
            });
        }
    }
    Err(CorpusError::Degenerate {
        id: story.id.clone(),
        op: "replace",
    })
}

/// D4: overwrites one continuation sentence with a copy of a different one
/// from the same story, so a sentence appears twice and the length stays
/// K + 1.
pub fn make_repeated(story: &Story, rng: &mut ChaCha8Rng) -> Result<ConstructedStory, CorpusError> {
    require_k_at_least_2(story, "repeat")?;
    let k = story.continuation().len();
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let target = rng.random_range(0..k);
        let source = rng.random_range(0..k);
        if source == target {
            continue;
        }
        let copied = &story.continuation()[source];
        if copied != &story.continuation()[target] {
            let mut sentences = story.sentences.clone();
            sentences[target + 1] = copied.clone();
            return Ok(ConstructedStory {
                origin_id: story.id.clone(),
                label: StoryLabel::D4,
                sentences,
            });
        }
    }
    Err(CorpusError::Degenerate {
        id: story.id.clone(),
        op: "repeat",
    })
}

/// All four class variants of one story. The rng must already be derived
/// from `(seed, story id)` by the caller.
pub fn construct_variants(
    story: &Story,
    donor_pool: &[Story],
    rng: &mut ChaCha8Rng,
) -> Result<[ConstructedStory; 4], CorpusError> {
    let d1 = ConstructedStory {
        origin_id: story.id.clone(),
        label: StoryLabel::D1,
        sentences: story.sentences.clone(),
    };
    let d2 = make_shuffled(story, rng)?;
    let d3 = make_replaced(story, donor_pool, rng)?;
    let d4 = make_repeated(story, rng)?;
    Ok([d1, d2, d3, d4])
}

/// Builds the multi-task dataset: four labeled, tokenized records per story
/// (one per class), each terminated with end-of-text. Every story derives
/// its rng stream from `(seed, story id)`, so the result is independent of
/// processing order; donors for D3 come from the input set itself.
pub fn build_multitask_dataset(
    stories: &[Story],
    tokenizer: &Tokenizer,
    seed: u64,
) -> Result<Vec<LabeledStory>, CorpusError> {
    let variants = crate::parallel::ordered_map(stories, |story| {
        let mut rng = derive_rng_keyed(seed, "fake-stories", &story.id);
        construct_variants(story, stories, &mut rng)
    });
    let mut out = Vec::with_capacity(stories.len() * 4);
    for group in variants {
        for c in group? {
            out.push(LabeledStory::from_constructed(c, tokenizer));
        }
    }
    Ok(out)
}

/// Reads a story TSV: `id\tsentence1\t...\tsentenceN`, one story per line.
/// All stories must have the same sentence count (at least 2) and every
/// sentence must be non-empty and end with terminal punctuation.
pub fn read_stories_tsv(path: &Path) -> Result<Vec<Story>, CorpusError> {
    let content = std::fs::read_to_string(path)?;
    parse_stories_tsv(&content, &path.display().to_string())
}

pub fn parse_stories_tsv(content: &str, path: &str) -> Result<Vec<Story>, CorpusError> {
    let mut out: Vec<Story> = Vec::new();
    let mut expected_len: Option<usize> = None;
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(CorpusError::Parse {
                path: path.to_string(),
                line: line_no,
                reason: format!(
                    "expected id + at least 2 sentences, found {} fields",
                    fields.len()
                ),
            });
        }
        let n_sentences = fields.len() - 1;
        if let Some(expected) = expected_len {
            if n_sentences != expected {
                return Err(CorpusError::Parse {
                    path: path.to_string(),
                    line: line_no,
                    reason: format!("{n_sentences} sentences, file started with {expected}"),
                });
            }
        } else {
            expected_len = Some(n_sentences);
        }
        let mut sentences = Vec::with_capacity(n_sentences);
        for s in &fields[1..] {
            let s = s.trim();
            if s.is_empty() {
                return Err(CorpusError::Parse {
                    path: path.to_string(),
                    line: line_no,
                    reason: "empty sentence".into(),
                });
            }
            if !s.ends_with(['.', '!', '?']) {
                return Err(CorpusError::Parse {
                    path: path.to_string(),
                    line: line_no,
                    reason: format!("sentence {s:?} lacks terminal punctuation"),
                });
            }
            sentences.push(s.to_string());
        }
        out.push(Story {
            id: fields[0].trim().to_string(),
            sentences,
        });
    }
    Ok(out)
}

pub fn write_stories_tsv(path: &Path, stories: &[Story]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in stories {
        out.push_str(&s.id);
        for sent in &s.sentences {
            out.push('\t');
            out.push_str(sent);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    origin_id: String,
    label: StoryLabel,
    text: String,
}

/// Writes a labeled dataset as JSON lines `{origin_id, label, text}`.
pub fn write_labeled_jsonl(path: &Path, records: &[ConstructedStory]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        let rec = LabeledRecord {
            origin_id: r.origin_id.clone(),
            label: r.label,
            text: r.text(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a labeled dataset, re-segmenting and re-tokenizing each record.
pub fn read_labeled_jsonl(
    path: &Path,
    tokenizer: &Tokenizer,
) -> Result<Vec<LabeledStory>, CorpusError> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: format!("not a labeled story record: {e}"),
        })?;
        out.push(LabeledStory::from_constructed(
            ConstructedStory {
                origin_id: rec.origin_id,
                label: rec.label,
                sentences: segment_sentences(&rec.text),
            },
            tokenizer,
        ));
    }
    Ok(out)
}
