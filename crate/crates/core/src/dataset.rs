//! Question corpus: loading, validation, eligibility filtering.
//!
//! The corpus is line-delimited JSON, one question per line:
//!
//! ```text
//! {"schema_version":1,"id":"q01","part":"one","domain":"Endocrinology",
//!  "category":"knowledge","text":"...","reference_answer":"...","excluded":null}
//! ```
//!
//! `category` may be `null` (unlabelled) and `excluded` is `null`,
//! `"image_or_table"` or `"not_short_answer"`. Excluded records stay in the
//! corpus so the audit trail from raw to eligible counts is preserved.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const CORPUS_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "one")]
    PartOne,
    #[serde(rename = "two")]
    PartTwo,
}

impl Part {
    pub fn label(self) -> &'static str {
        match self {
            Part::PartOne => "Part 1",
            Part::PartTwo => "Part 2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Knowledge,
    Reasoning,
    Unlabelled,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Knowledge => "Knowledge",
            Category::Reasoning => "Reasoning",
            Category::Unlabelled => "Unlabelled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Exclusion {
    #[serde(rename = "image_or_table")]
    ImageOrTable,
    #[serde(rename = "not_short_answer")]
    NotShortAnswerCompatible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub part: Part,
    pub domain: String,
    pub category: Category,
    pub text: String,
    pub reference_answer: String,
    pub excluded: Option<Exclusion>,
}

impl Question {
    pub fn is_eligible(&self) -> bool {
        self.excluded.is_none()
    }
}

/// On-disk shape of a corpus line; field order is the serialization order.
#[derive(Serialize)]
struct CorpusRecord<'a> {
    schema_version: u64,
    id: &'a str,
    part: Part,
    domain: &'a str,
    category: Option<Category>,
    text: &'a str,
    reference_answer: &'a str,
    excluded: Option<Exclusion>,
}

impl<'a> From<&'a Question> for CorpusRecord<'a> {
    fn from(q: &'a Question) -> Self {
        CorpusRecord {
            schema_version: CORPUS_SCHEMA_VERSION,
            id: &q.id,
            part: q.part,
            domain: &q.domain,
            category: match q.category {
                Category::Unlabelled => None,
                c => Some(c),
            },
            text: &q.text,
            reference_answer: &q.reference_answer,
            excluded: q.excluded,
        }
    }
}

/// Serializes questions in corpus format, one record per line.
pub fn corpus_to_string(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(&CorpusRecord::from(q)).expect("corpus record"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, questions: &[Question]) -> Result<()> {
    crate::util::atomic_write(path, corpus_to_string(questions).as_bytes())
}

/// Content digest of a corpus file, as stored in run manifests.
pub fn corpus_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(path, &text)
}

/// Parses corpus text. `origin` is only used for error messages.
pub fn parse_corpus(origin: &Path, text: &str) -> Result<Vec<Question>> {
    let mut questions = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_line(origin, line_no, line)?;
        if let Some(&first) = seen.get(&q.id) {
            return Err(Error::DuplicateId {
                id: q.id,
                first,
                second: line_no,
            });
        }
        seen.insert(q.id.clone(), line_no);
        questions.push(q);
    }
    Ok(questions)
}

fn parse_line(origin: &Path, line_no: usize, line: &str) -> Result<Question> {
    let err = |field: &str, message: String| Error::Corpus {
        path: origin.to_path_buf(),
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err("<record>", format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(err("<record>", "expected a JSON object".into()));
    };

    if let Some(v) = map.get("schema_version") {
        match v.as_u64() {
            Some(CORPUS_SCHEMA_VERSION) => {}
            _ => return Err(err("schema_version", format!("unsupported schema version {v}"))),
        }
    }

    let opt_str = |field: &str| -> Result<Option<String>> {
        match map.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(err(field, format!("expected a string, found {other}"))),
        }
    };

    let id = opt_str("id")?.ok_or_else(|| err("id", "missing".into()))?;
    if id.trim().is_empty() {
        return Err(err("id", "must be non-empty".into()));
    }
    let part = match opt_str("part")?.as_deref() {
        Some("one") => Part::PartOne,
        Some("two") => Part::PartTwo,
        Some(other) => return Err(err("part", format!("expected \"one\" or \"two\", found {other:?}"))),
        None => return Err(err("part", "missing".into())),
    };
    let category = match opt_str("category")?.as_deref() {
        None => Category::Unlabelled,
        Some("knowledge") => Category::Knowledge,
        Some("reasoning") => Category::Reasoning,
        Some(other) => {
            return Err(err(
                "category",
                format!("expected \"knowledge\", \"reasoning\" or null, found {other:?}"),
            ))
        }
    };
    let excluded = match opt_str("excluded")?.as_deref() {
        None => None,
        Some("image_or_table") => Some(Exclusion::ImageOrTable),
        Some("not_short_answer") => Some(Exclusion::NotShortAnswerCompatible),
        Some(other) => {
            return Err(err(
                "excluded",
                format!("expected null, \"image_or_table\" or \"not_short_answer\", found {other:?}"),
            ))
        }
    };
    let domain = opt_str("domain")?.unwrap_or_default();
    let text = opt_str("text")?.unwrap_or_default();
    let reference_answer = opt_str("reference_answer")?.unwrap_or_default();
    if excluded.is_none() {
        if text.trim().is_empty() {
            return Err(err("text", "missing or empty on an eligible question".into()));
        }
        if reference_answer.trim().is_empty() {
            return Err(err(
                "reference_answer",
                "missing or empty on an eligible question".into(),
            ));
        }
    }
    check_unknown_fields(&map).map_err(|f| err(&f, "unknown field".into()))?;

    Ok(Question {
        id,
        part,
        domain,
        category,
        text,
        reference_answer,
        excluded,
    })
}

fn check_unknown_fields(map: &Map<String, Value>) -> std::result::Result<(), String> {
    const KNOWN: [&str; 8] = [
        "schema_version",
        "id",
        "part",
        "domain",
        "category",
        "text",
        "reference_answer",
        "excluded",
    ];
    match map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        Some(k) => Err(k.clone()),
        None => Ok(()),
    }
}

/// Keeps the questions with no exclusion flag, in their original order.
pub fn filter_eligible(questions: &[Question]) -> Vec<Question> {
    questions.iter().filter(|q| q.is_eligible()).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(id: &str, excluded: Option<Exclusion>) -> Question {
        Question {
            id: id.into(),
            part: Part::PartOne,
            domain: "Obstetrics".into(),
            category: Category::Knowledge,
            text: format!("question {id}?"),
            reference_answer: "answer".into(),
            excluded,
        }
    }

    fn parse(text: &str) -> Result<Vec<Question>> {
        parse_corpus(Path::new("test.jsonl"), text)
    }

    #[test]
    fn three_records_in_order() {
        let qs = vec![q("c", None), q("a", None), q("b", None)];
        let loaded = parse(&corpus_to_string(&qs)).unwrap();
        assert_eq!(loaded, qs);
    }

    #[test]
    fn missing_reference_answer_names_line_and_field() {
        let text = concat!(
            r#"{"id":"q1","part":"one","domain":"d","category":null,"text":"t","reference_answer":"r","excluded":null}"#,
            "\n",
            r#"{"id":"q2","part":"two","domain":"d","category":null,"text":"t","excluded":null}"#,
            "\n"
        );
        match parse(text).unwrap_err() {
            Error::Corpus { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "reference_answer");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn excluded_record_may_lack_answer() {
        let text =
            r#"{"id":"q1","part":"one","domain":"d","category":null,"text":"see figure","excluded":"image_or_table"}"#;
        let qs = parse(text).unwrap();
        assert_eq!(qs[0].excluded, Some(Exclusion::ImageOrTable));
        assert!(filter_eligible(&qs).is_empty());
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let qs = vec![q("a", None), q("b", None), q("a", None)];
        match parse(&corpus_to_string(&qs)).unwrap_err() {
            Error::DuplicateId { id, first, second } => {
                assert_eq!((id.as_str(), first, second), ("a", 1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_enum_value_names_field() {
        let text = r#"{"id":"q1","part":"three","domain":"d","text":"t","reference_answer":"r"}"#;
        match parse(text).unwrap_err() {
            Error::Corpus { field, .. } => assert_eq!(field, "part"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"id":7,"part":"one","domain":"d","text":"t","reference_answer":"r"}"#;
        match parse(text).unwrap_err() {
            Error::Corpus { field, .. } => assert_eq!(field, "id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn filter_edge_cases() {
        let all_excluded = vec![
            q("a", Some(Exclusion::ImageOrTable)),
            q("b", Some(Exclusion::NotShortAnswerCompatible)),
        ];
        assert!(filter_eligible(&all_excluded).is_empty());

        let none_excluded = vec![q("a", None), q("b", None)];
        assert_eq!(filter_eligible(&none_excluded), none_excluded);

        let mixed = vec![
            q("a", None),
            q("b", Some(Exclusion::ImageOrTable)),
            q("c", None),
            q("d", Some(Exclusion::NotShortAnswerCompatible)),
            q("e", None),
        ];
        let ids: Vec<_> = filter_eligible(&mixed).into_iter().map(|q| q.id).collect();
        assert_eq!(ids, ["a", "c", "e"]);
    }

    fn arb_question() -> impl Strategy<Value = Question> {
        (
            "[a-z0-9]{1,8}",
            any::<bool>(),
            "\\PC{0,12}",
            0..3u8,
            "\\PC{1,40}",
            "\\PC{1,40}",
            0..3u8,
        )
            .prop_filter("non-blank text", |t| !t.4.trim().is_empty() && !t.5.trim().is_empty())
            .prop_map(|(id, part, domain, cat, text, answer, excl)| Question {
                id,
                part: if part { Part::PartOne } else { Part::PartTwo },
                domain,
                category: [Category::Knowledge, Category::Reasoning, Category::Unlabelled][cat as usize],
                text,
                reference_answer: answer,
                excluded: [
                    None,
                    Some(Exclusion::ImageOrTable),
                    Some(Exclusion::NotShortAnswerCompatible),
                ][excl as usize],
            })
    }

    proptest! {
        #[test]
        fn corpus_round_trip(qs in proptest::collection::vec(arb_question(), 0..12)) {
            let mut seen = std::collections::HashSet::new();
            let qs: Vec<_> = qs.into_iter().filter(|q| seen.insert(q.id.clone())).collect();
            let loaded = parse(&corpus_to_string(&qs)).unwrap();
            prop_assert_eq!(loaded, qs);
        }

        #[test]
        fn filter_is_idempotent(qs in proptest::collection::vec(arb_question(), 0..12)) {
            let once = filter_eligible(&qs);
            prop_assert_eq!(filter_eligible(&once), once.clone());
        }
    }
}
