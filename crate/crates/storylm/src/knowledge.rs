//! Knowledge triples and their verbalization into training sentences.
//!
//! Triples arrive as TSV lines `head\trelation\ttail`. Each relation has a
//! training template and a synonymous paraphrase; a "wrong" sentence reuses
//! the training template of a different, randomly drawn relation. The
//! bundled table covers ConceptNet's 34 relations and ATOMIC's 9; only the
//! four rows with published examples are verbatim, the rest are our own
//! phrasing and can be overridden with a custom table file.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use thiserror::Error;

/// The bundled default template table, as JSON.
pub const DEFAULT_TEMPLATES_JSON: &str = include_str!("data/templates.json");

const HEAD_SLOT: &str = "HEAD";
const TAIL_SLOT: &str = "TAIL";

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    MalformedLine {
        path: String,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: empty {field}")]
    EmptyField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("{path}:{line}: unknown relation {relation:?}; known relations: {known}")]
    UnknownRelation {
        path: String,
        line: usize,
        relation: String,
        known: String,
    },
    #[error("relation {0:?} missing from template table")]
    MissingRelation(String),
    #[error("wrong-template sampling needs at least 2 relations, table has {0}")]
    TooFewRelations(usize),
    #[error("template for {relation:?} is invalid: {reason}")]
    BadTemplate { relation: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnowledgeSource {
    ConceptNetLike,
    AtomicLike,
}

/// A `(head, relation, tail)` record. For ATOMIC-style records the person
/// variables have already been rewritten to placeholders at parse time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: KnowledgeSource,
}

/// Per-relation sentence templates. Both hold exactly one `HEAD` and one
/// `TAIL` slot and differ in their relation tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTemplate {
    pub relation: String,
    pub training_template: String,
    pub synonymous_template: String,
}

impl RelationTemplate {
    fn instantiate(template: &str, head: &str, tail: &str) -> String {
        // Validated to contain each slot exactly once.
        let with_head = template.replacen(HEAD_SLOT, head, 1);
        with_head.replacen(TAIL_SLOT, tail, 1)
    }

    /// Re-extracts `(head, tail)` from a sentence produced by `template`.
    /// Used to check that verbalization is invertible per relation.
    pub fn extract(template: &str, sentence: &str) -> Option<(String, String)> {
        let h = template.find(HEAD_SLOT)?;
        let t = template.find(TAIL_SLOT)?;
        let (first, first_len, second, second_len) = if h < t {
            (h, HEAD_SLOT.len(), t, TAIL_SLOT.len())
        } else {
            (t, TAIL_SLOT.len(), h, HEAD_SLOT.len())
        };
        let prefix = &template[..first];
        let infix = &template[first + first_len..second];
        let suffix = &template[second + second_len..];

        let rest = sentence.strip_prefix(prefix)?;
        let rest = rest.strip_suffix(suffix)?;
        let split = rest.find(infix)?;
        let a = rest[..split].to_string();
        let b = rest[split + infix.len()..].to_string();
        Some(if h < t { (a, b) } else { (b, a) })
    }
}

/// Which template to verbalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Training,
    Synonymous,
    Wrong,
}

/// Which template a sentence was produced with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateVariant {
    Training,
    Synonymous,
    /// The training template of this *other* relation.
    Wrong(String),
}

/// A verbalized sentence together with its source triple and variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSentence {
    pub text: String,
    pub triple: KnowledgeTriple,
    pub variant: TemplateVariant,
}

/// Relation → templates, with a deterministic relation order.
#[derive(Debug, Clone)]
pub struct TemplateTable {
    entries: Vec<RelationTemplate>,
}

impl TemplateTable {
    /// The bundled default table.
    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_TEMPLATES_JSON).expect("bundled template table is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, KnowledgeError> {
        #[derive(Deserialize)]
        struct Row {
            training: String,
            synonymous: String,
        }
        let raw: BTreeMap<String, Row> = serde_json::from_str(json)?;
        let entries: Vec<RelationTemplate> = raw
            .into_iter()
            .map(|(relation, row)| RelationTemplate {
                relation,
                training_template: row.training,
                synonymous_template: row.synonymous,
            })
            .collect();
        let table = Self { entries };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), KnowledgeError> {
        for e in &self.entries {
            for (name, t) in [
                ("training", &e.training_template),
                ("synonymous", &e.synonymous_template),
            ] {
                if t.matches(HEAD_SLOT).count() != 1 || t.matches(TAIL_SLOT).count() != 1 {
                    return Err(KnowledgeError::BadTemplate {
                        relation: e.relation.clone(),
                        reason: format!("{name} template must contain HEAD and TAIL exactly once"),
                    });
                }
            }
            if e.training_template == e.synonymous_template {
                return Err(KnowledgeError::BadTemplate {
                    relation: e.relation.clone(),
                    reason: "training and synonymous templates are identical".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.relation.as_str())
    }

    pub fn get(&self, relation: &str) -> Option<&RelationTemplate> {
        self.entries.iter().find(|e| e.relation == relation)
    }

    pub fn contains(&self, relation: &str) -> bool {
        self.get(relation).is_some()
    }
}

/// Rewrites whole-word `PersonX` → `[MALE]` and `PersonY` → `[FEMALE]`.
fn rewrite_person_variables(text: &str) -> String {
    let mut out = text.to_string();
    for (var, placeholder) in [("PersonX", "[MALE]"), ("PersonY", "[FEMALE]")] {
        let mut result = String::with_capacity(out.len());
        let bytes = out.as_bytes();
        let mut i = 0;
        while i < out.len() {
            let rest = &out[i..];
            let boundary_before = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
            if boundary_before && rest.starts_with(var) {
                let after = i + var.len();
                let boundary_after =
                    after == out.len() || !bytes[after].is_ascii_alphanumeric();
                if boundary_after {
                    result.push_str(placeholder);
                    i = after;
                    continue;
                }
            }
            let ch = rest.chars().next().expect("non-empty rest");
            result.push(ch);
            i += ch.len_utf8();
        }
        out = result;
    }
    out
}

/// Parses a TSV triple file: one `head\trelation\ttail` per line, `#` lines
/// and blank lines skipped. Duplicates collapse to the first occurrence.
pub fn parse_triples(
    path: &Path,
    source: KnowledgeSource,
    table: &TemplateTable,
) -> Result<Vec<KnowledgeTriple>, KnowledgeError> {
    let content = std::fs::read_to_string(path)?;
    parse_triples_str(&content, &path.display().to_string(), source, table)
}

pub fn parse_triples_str(
    content: &str,
    path: &str,
    source: KnowledgeSource,
    table: &TemplateTable,
) -> Result<Vec<KnowledgeTriple>, KnowledgeError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw_line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KnowledgeError::MalformedLine {
                path: path.to_string(),
                line: line_no,
                found: fields.len(),
            });
        }
        let (mut head, relation, mut tail) = (
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
        );
        for (field, value) in [("head", &head), ("relation", &relation), ("tail", &tail)] {
            if value.is_empty() {
                return Err(KnowledgeError::EmptyField {
                    path: path.to_string(),
                    line: line_no,
                    field,
                });
            }
        }
        if !table.contains(&relation) {
            return Err(KnowledgeError::UnknownRelation {
                path: path.to_string(),
                line: line_no,
                relation,
                known: table.relations().collect::<Vec<_>>().join(", "),
            });
        }
        if source == KnowledgeSource::AtomicLike {
            head = rewrite_person_variables(&head);
            tail = rewrite_person_variables(&tail);
        }
        let triple = KnowledgeTriple {
            head,
            relation,
            tail,
            source,
        };
        if seen.insert((triple.head.clone(), triple.relation.clone(), triple.tail.clone())) {
            out.push(triple);
        }
    }
    Ok(out)
}

/// Verbalizes one triple with the requested template variant. `Wrong` draws
/// a uniformly random *different* relation and uses its training template,
/// so the sentence keeps the head and tail but carries the wrong relation
/// tokens.
pub fn verbalize(
    triple: &KnowledgeTriple,
    table: &TemplateTable,
    variant: VariantKind,
    rng: &mut ChaCha8Rng,
) -> Result<KnowledgeSentence, KnowledgeError> {
    let own = table
        .get(&triple.relation)
        .ok_or_else(|| KnowledgeError::MissingRelation(triple.relation.clone()))?;
    let (template, applied) = match variant {
        VariantKind::Training => (own.training_template.clone(), TemplateVariant::Training),
        VariantKind::Synonymous => (
            own.synonymous_template.clone(),
            TemplateVariant::Synonymous,
        ),
        VariantKind::Wrong => {
            if table.len() < 2 {
                return Err(KnowledgeError::TooFewRelations(table.len()));
            }
            let others: Vec<&RelationTemplate> = table
                .entries
                .iter()
                .filter(|e| e.relation != triple.relation)
                .collect();
            let pick = others[rng.random_range(0..others.len())];
            (
                pick.training_template.clone(),
                TemplateVariant::Wrong(pick.relation.clone()),
            )
        }
    };
    Ok(KnowledgeSentence {
        text: RelationTemplate::instantiate(&template, &triple.head, &triple.tail),
        triple: triple.clone(),
        variant: applied,
    })
}

/// One relation-understanding evaluation item: the same triple verbalized
/// with its training template, its synonymous ("correct") template, and a
/// wrong relation's template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationEvalItem {
    pub training: KnowledgeSentence,
    pub correct: KnowledgeSentence,
    pub wrong: KnowledgeSentence,
}

/// Builds one evaluation item per triple, deterministically given the rng.
pub fn build_relation_eval_set(
    triples: &[KnowledgeTriple],
    table: &TemplateTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RelationEvalItem>, KnowledgeError> {
    triples
        .iter()
        .map(|t| {
            Ok(RelationEvalItem {
                training: verbalize(t, table, VariantKind::Training, rng)?,
                correct: verbalize(t, table, VariantKind::Synonymous, rng)?,
                wrong: verbalize(t, table, VariantKind::Wrong, rng)?,
            })
        })
        .collect()
}

/// JSONL persistence for eval sets: one item per line.
pub fn write_eval_set(path: &Path, items: &[RelationEvalItem]) -> Result<(), KnowledgeError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_eval_set(path: &Path) -> Result<Vec<RelationEvalItem>, KnowledgeError> {
    let content = std::fs::read_to_string(path)?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(KnowledgeError::from))
        .collect()
}
