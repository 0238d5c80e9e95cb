//! Benchmark ingestion: turns heterogeneous source files into a stream of
//! [`DocItem`]s, the unified instance record every other stage consumes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

/// Width of synthetic instance ids (`task:000042`).
pub const ID_WIDTH: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed row: {0}")]
    MalformedRow(String),
    #[error("answer letter {letter:?} is out of range for {choices} choices")]
    AnswerOutOfRange { letter: char, choices: usize },
    #[error("duplicate choice text {0:?}")]
    DuplicateChoice(String),
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("few-shot pool of {k_pool} leaves no evaluation items out of {total}")]
    PoolTooLarge { k_pool: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One source row in the multiple-choice layout: question, choices, answer letter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub cells: Vec<String>,
}

impl RawRecord {
    pub fn new<I, S>(cells: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            cells: cells.into_iter().map(Into::into).collect(),
        }
    }
}

/// A normalized evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocItem {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub passage: String,
    pub question: String,
    #[serde(default, deserialize_with = "deserialize_unique_scores")]
    pub target_scores: IndexMap<String, u8>,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DocItem {
    /// Checks the record-level invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.question.is_empty() {
            return Err("question is empty".into());
        }
        if let Some((choice, score)) = self.target_scores.iter().find(|(_, s)| **s > 1) {
            return Err(format!("score {score} for choice {choice:?} is not 0 or 1"));
        }
        if !self.target_scores.is_empty() {
            let gold = self.target_scores.values().filter(|s| **s == 1).count();
            if gold != 1 {
                return Err(format!(
                    "target_scores must mark exactly one choice, found {gold}"
                ));
            }
        }
        if self.target_scores.is_empty() && self.answer.is_empty() {
            return Err("item has neither target_scores nor answer".into());
        }
        Ok(())
    }

    /// Zero-based position of the gold choice, if this is a multiple-choice item.
    pub fn gold_index(&self) -> Option<usize> {
        self.target_scores.values().position(|s| *s == 1)
    }

    /// Letter (`A`, `B`, ...) of the gold choice.
    pub fn gold_letter(&self) -> Option<char> {
        self.gold_index().map(index_to_letter)
    }

    pub fn choices(&self) -> impl Iterator<Item = &str> {
        self.target_scores.keys().map(String::as_str)
    }
}

pub fn index_to_letter(idx: usize) -> char {
    (b'A' + idx as u8) as char
}

fn deserialize_unique_scores<'de, D>(de: D) -> Result<IndexMap<String, u8>, D::Error>
where
    D: Deserializer<'de>,
{
    struct ScoresVisitor;

    impl<'de> Visitor<'de> for ScoresVisitor {
        type Value = IndexMap<String, u8>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map from choice text to 0 or 1")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = IndexMap::new();
            while let Some((k, v)) = map.next_entry::<String, u8>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!(
                        "duplicate choice text {k:?}"
                    )));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    de.deserialize_map(ScoresVisitor)
}

/// Converts a `question, *choices, answer` row into a [`DocItem`].
///
/// The gold choice is the one whose zero-based position equals
/// `answer - 'A'`. Passage and free-form answer are left empty.
pub fn normalize_mc(row: &RawRecord) -> Result<DocItem, CorpusError> {
    let cells = &row.cells;
    if cells.len() < 3 {
        return Err(CorpusError::MalformedRow(format!(
            "expected question, at least one choice and an answer letter; got {} cells",
            cells.len()
        )));
    }
    let question = &cells[0];
    let choices = &cells[1..cells.len() - 1];
    let answer = cells[cells.len() - 1].trim();

    let mut letters = answer.chars();
    let letter = match (letters.next(), letters.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => c,
        _ => {
            return Err(CorpusError::MalformedRow(format!(
                "answer cell {answer:?} is not a single letter A-Z"
            )))
        }
    };
    let gold = (letter as u8 - b'A') as usize;
    if gold >= choices.len() {
        return Err(CorpusError::AnswerOutOfRange {
            letter,
            choices: choices.len(),
        });
    }

    let mut target_scores = IndexMap::with_capacity(choices.len());
    for (idx, choice) in choices.iter().enumerate() {
        if target_scores
            .insert(choice.clone(), u8::from(idx == gold))
            .is_some()
        {
            return Err(CorpusError::DuplicateChoice(choice.clone()));
        }
    }

    Ok(DocItem {
        id: String::new(),
        passage: String::new(),
        question: question.clone(),
        target_scores,
        answer: String::new(),
        metadata: BTreeMap::new(),
    })
}

/// Synthetic id for the `index`-th record of `task`.
pub fn synthetic_id(task: &str, index: usize) -> String {
    format!("{task}:{index:0width$}", width = ID_WIDTH)
}

/// Field-name mapping for JSON Lines sources whose records are not already
/// in the normalized layout.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRoles {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub passage: Option<String>,
    pub question: String,
    /// Array-valued field holding the choice texts.
    #[serde(default)]
    pub choices: Option<String>,
    /// Field holding the gold letter (`"B"`) or zero-based index (`1`).
    #[serde(default)]
    pub gold: Option<String>,
    /// Field holding a free-form gold answer.
    #[serde(default)]
    pub answer: Option<String>,
    /// Extra fields copied verbatim into `metadata`.
    #[serde(default)]
    pub metadata: Vec<String>,
}

pub type CustomTransform = Arc<dyn Fn(&str) -> Result<DocItem, String> + Send + Sync>;

/// How one registered schema maps source records onto [`DocItem`]s.
#[derive(Clone)]
pub enum Schema {
    /// JSON Lines already in the normalized layout.
    DocItemJsonl,
    /// CSV rows laid out as `question, choices..., answer letter`.
    McCsv { has_header: bool },
    /// JSON Lines with arbitrary field names mapped by role.
    JsonlFields(FieldRoles),
    /// A registered per-line transform for sources that need real code.
    Custom(CustomTransform),
}

impl fmt::Debug for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schema::DocItemJsonl => f.write_str("DocItemJsonl"),
            Schema::McCsv { has_header } => write!(f, "McCsv {{ has_header: {has_header} }}"),
            Schema::JsonlFields(roles) => f.debug_tuple("JsonlFields").field(roles).finish(),
            Schema::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: HashMap<String, Schema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        let mut schemas = HashMap::new();
        schemas.insert("docitem".to_string(), Schema::DocItemJsonl);
        schemas.insert("mc_csv".to_string(), Schema::McCsv { has_header: false });
        schemas.insert(
            "mc_csv_header".to_string(),
            Schema::McCsv { has_header: true },
        );
        Self { schemas }
    }
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self {
            schemas: HashMap::new(),
        }
    }

    pub fn register(&mut self, id: impl Into<String>, schema: Schema) {
        self.schemas.insert(id.into(), schema);
    }

    pub fn get(&self, id: &str) -> Result<&Schema, CorpusError> {
        self.schemas
            .get(id)
            .ok_or_else(|| CorpusError::UnknownSchema(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.schemas.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }
}

/// Streams normalized items out of `path`.
///
/// The task name used for synthetic ids is the file stem; use
/// [`load_dataset_as`] to choose it explicitly.
pub fn load_dataset(
    registry: &SchemaRegistry,
    path: impl AsRef<Path>,
    schema_id: &str,
) -> Result<DatasetStream, CorpusError> {
    let path = path.as_ref();
    let task = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_dataset_as(registry, path, schema_id, &task)
}

pub fn load_dataset_as(
    registry: &SchemaRegistry,
    path: impl AsRef<Path>,
    schema_id: &str,
    task: &str,
) -> Result<DatasetStream, CorpusError> {
    let schema = registry.get(schema_id)?.clone();
    let file = File::open(path.as_ref())?;
    let source = match &schema {
        Schema::McCsv { has_header } => {
            let reader = csv::ReaderBuilder::new()
                .has_headers(*has_header)
                .flexible(true)
                .from_reader(file);
            Source::Csv(reader.into_records())
        }
        _ => Source::Lines(BufReader::new(file).lines(), 0),
    };
    Ok(DatasetStream {
        schema,
        source,
        task: task.to_string(),
        ordinal: 0,
        done: false,
    })
}

enum Source {
    Lines(std::io::Lines<BufReader<File>>, usize),
    Csv(csv::StringRecordsIntoIter<File>),
}

/// Iterator over the items of one source file, in file order.
pub struct DatasetStream {
    schema: Schema,
    source: Source,
    task: String,
    ordinal: usize,
    done: bool,
}

impl DatasetStream {
    fn next_raw(&mut self) -> Option<Result<(usize, DocItem), CorpusError>> {
        match &mut self.source {
            Source::Csv(records) => {
                let record = records.next()?;
                let (line, record) = match record {
                    Ok(r) => (r.position().map_or(0, |p| p.line() as usize), r),
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line() as usize);
                        return Some(Err(CorpusError::Parse {
                            line,
                            message: e.to_string(),
                        }));
                    }
                };
                let row = RawRecord::new(record.iter());
                Some(normalize_mc(&row).map(|item| (line, item)).map_err(|e| {
                    CorpusError::Validation {
                        line,
                        message: e.to_string(),
                    }
                }))
            }
            Source::Lines(lines, lineno) => loop {
                let text = match lines.next()? {
                    Ok(t) => t,
                    Err(e) => return Some(Err(e.into())),
                };
                *lineno += 1;
                let line = *lineno;
                if text.trim().is_empty() {
                    continue;
                }
                return Some(parse_line(&self.schema, &text, line).map(|item| (line, item)));
            },
        }
    }
}

impl Iterator for DatasetStream {
    type Item = Result<DocItem, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (line, mut item) = match self.next_raw()? {
            Ok(v) => v,
            Err(e) => {
                self.done = true;
                return Some(Err(e));
            }
        };
        if item.id.is_empty() {
            item.id = synthetic_id(&self.task, self.ordinal);
        }
        self.ordinal += 1;
        if let Err(message) = item.validate() {
            self.done = true;
            return Some(Err(CorpusError::Validation { line, message }));
        }
        Some(Ok(item))
    }
}

fn parse_line(schema: &Schema, text: &str, line: usize) -> Result<DocItem, CorpusError> {
    let invalid = |message: String| CorpusError::Validation { line, message };
    match schema {
        Schema::DocItemJsonl => {
            let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
                line,
                message: e.to_string(),
            })?;
            serde_json::from_value(value).map_err(|e| invalid(e.to_string()))
        }
        Schema::JsonlFields(roles) => {
            let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
                line,
                message: e.to_string(),
            })?;
            map_fields(roles, &value).map_err(invalid)
        }
        Schema::Custom(transform) => transform(text).map_err(invalid),
        Schema::McCsv { .. } => unreachable!("csv sources are read record-wise"),
    }
}

fn field_text(value: &Value, name: &str) -> Option<String> {
    match value.get(name)? {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn map_fields(roles: &FieldRoles, value: &Value) -> Result<DocItem, String> {
    let question = field_text(value, &roles.question)
        .ok_or_else(|| format!("missing field {:?}", roles.question))?;

    let mut cells = vec![question.clone()];
    let target_scores = match &roles.choices {
        Some(field) => {
            let choices = value
                .get(field)
                .and_then(Value::as_array)
                .ok_or_else(|| format!("field {field:?} is not an array"))?;
            for c in choices {
                cells.push(match c {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                });
            }
            let gold_field = roles
                .gold
                .as_ref()
                .ok_or("choices mapped without a gold field")?;
            let letter = match value.get(gold_field) {
                Some(Value::Number(n)) => {
                    let idx = n
                        .as_u64()
                        .ok_or("gold index is not a non-negative integer")?;
                    if idx >= 26 {
                        return Err(format!("gold index {idx} out of range"));
                    }
                    index_to_letter(idx as usize).to_string()
                }
                Some(Value::String(s)) => s.trim().to_string(),
                _ => return Err(format!("missing field {gold_field:?}")),
            };
            cells.push(letter);
            normalize_mc(&RawRecord { cells })
                .map_err(|e| e.to_string())?
                .target_scores
        }
        None => IndexMap::new(),
    };

    let metadata = roles
        .metadata
        .iter()
        .filter_map(|k| field_text(value, k).map(|v| (k.clone(), v)))
        .collect();

    Ok(DocItem {
        id: roles
            .id
            .as_ref()
            .and_then(|f| field_text(value, f))
            .unwrap_or_default(),
        passage: roles
            .passage
            .as_ref()
            .and_then(|f| field_text(value, f))
            .unwrap_or_default(),
        question,
        target_scores,
        answer: roles
            .answer
            .as_ref()
            .and_then(|f| field_text(value, f))
            .unwrap_or_default(),
        metadata,
    })
}

/// Writes items as normalized JSON Lines.
pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    items: impl IntoIterator<Item = &'a DocItem>,
) -> std::io::Result<usize> {
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Splits `items` into a seeded few-shot pool of `k_pool` items and the
/// remaining evaluation set. Both halves keep the input order.
pub fn split_fewshot_pool(
    items: Vec<DocItem>,
    k_pool: usize,
    seed: u64,
) -> Result<(Vec<DocItem>, Vec<DocItem>), CorpusError> {
    if k_pool >= items.len() && !(k_pool == 0 && items.is_empty()) {
        return Err(CorpusError::PoolTooLarge {
            k_pool,
            total: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_pool = vec![false; items.len()];
    for &idx in &order[..k_pool] {
        in_pool[idx] = true;
    }
    let (pool, eval): (Vec<_>, Vec<_>) = items
        .into_iter()
        .zip(in_pool)
        .partition(|(_, pooled)| *pooled);
    Ok((
        pool.into_iter().map(|(item, _)| item).collect(),
        eval.into_iter().map(|(item, _)| item).collect(),
    ))
}
