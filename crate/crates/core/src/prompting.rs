//! Prompt rendering: multiple-choice layout, few-shot assembly, CoT trigger
//! and loglikelihood context/continuation pairs.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{index_to_letter, DocItem};

pub const MAX_CHOICES: usize = 26;
pub const DEFAULT_TEMPLATE_ID: &str = "mc_default";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{0} choices exceed the {MAX_CHOICES}-letter alphabet")]
    TooManyChoices(usize),
    #[error("item {0} has an empty question")]
    EmptyQuestion(String),
    #[error("item {0} has no choices")]
    EmptyChoices(String),
    #[error("few-shot pool has {available} usable exemplars, {requested} requested")]
    InsufficientPool { requested: usize, available: usize },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template file {path}: {message}")]
    TemplateFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Generation,
    Loglikelihood,
}

/// What a loglikelihood continuation looks like for each choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationStyle {
    /// `" (B)"`
    #[default]
    Letter,
    /// `" Paris"`
    Text,
}

/// A prompt layout, stored as a JSON document keyed by `template_id`.
///
/// Pattern fields understand two slots: `{letter}` and `{choice}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub template_id: String,
    pub system_prefix: String,
    pub question_header: String,
    pub question_terminator: String,
    pub instruction: String,
    pub options_header: String,
    pub option_format: String,
    pub answer_header: String,
    /// How an exemplar's gold choice is written after its answer header.
    pub answer_format: String,
    pub exemplar_separator: String,
    pub cot_trigger: String,
    pub continuation_style: ContinuationStyle,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            template_id: DEFAULT_TEMPLATE_ID.into(),
            system_prefix: String::new(),
            question_header: "Question:\n".into(),
            question_terminator: "\n".into(),
            instruction: "Requirement:\nChoose and respond with the letter of the correct answer, including the parentheses.\n".into(),
            options_header: "Options:\n".into(),
            option_format: "({letter}) {choice}\n".into(),
            answer_header: "Answer:\n".into(),
            answer_format: "({letter})".into(),
            exemplar_separator: "\n\n".into(),
            cot_trigger: "Let's think step by step.".into(),
            continuation_style: ContinuationStyle::Letter,
        }
    }
}

impl PromptTemplate {
    /// Bare question text, no headers. Useful for open-ended tasks whose
    /// prompt is the question itself.
    pub fn raw() -> Self {
        Self {
            template_id: "raw".into(),
            question_header: String::new(),
            question_terminator: String::new(),
            instruction: String::new(),
            options_header: String::new(),
            answer_header: String::new(),
            answer_format: "{letter}".into(),
            ..Self::default()
        }
    }

    fn fill(pattern: &str, letter: char, choice: &str) -> String {
        pattern
            .replace("{letter}", letter.encode_utf8(&mut [0; 4]))
            .replace("{choice}", choice)
    }

    fn question_block(&self, item: &DocItem) -> Result<String, PromptError> {
        if item.question.is_empty() {
            return Err(PromptError::EmptyQuestion(item.id.clone()));
        }
        let mut out = String::new();
        if !item.passage.is_empty() {
            out.push_str(&item.passage);
            out.push('\n');
        }
        out.push_str(&self.question_header);
        out.push_str(&item.question);
        out.push_str(&self.question_terminator);
        Ok(out)
    }

    /// Gold answer text as written after an exemplar's answer header.
    fn gold_text(&self, item: &DocItem) -> String {
        match item.gold_index() {
            Some(idx) => {
                let choice = item.choices().nth(idx).unwrap_or_default();
                Self::fill(&self.answer_format, index_to_letter(idx), choice)
            }
            None => item.answer.clone(),
        }
    }
}

/// Question block, requirement, lettered options, answer header.
pub fn render_mc(item: &DocItem, template: &PromptTemplate) -> Result<String, PromptError> {
    let n = item.target_scores.len();
    if n > MAX_CHOICES {
        return Err(PromptError::TooManyChoices(n));
    }
    let mut out = template.question_block(item)?;
    out.push_str(&template.instruction);
    out.push_str(&template.options_header);
    for (idx, choice) in item.choices().enumerate() {
        out.push_str(&PromptTemplate::fill(
            &template.option_format,
            index_to_letter(idx),
            choice,
        ));
    }
    out.push_str(&template.answer_header);
    Ok(out)
}

/// Renders an item without choices: question block then answer header.
pub fn render_open(item: &DocItem, template: &PromptTemplate) -> Result<String, PromptError> {
    let mut out = template.question_block(item)?;
    out.push_str(&template.answer_header);
    Ok(out)
}

/// Multiple-choice items use [`render_mc`], everything else [`render_open`].
pub fn render_item(item: &DocItem, template: &PromptTemplate) -> Result<String, PromptError> {
    if item.target_scores.is_empty() {
        render_open(item, template)
    } else {
        render_mc(item, template)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub instance_id: String,
    pub text: String,
    pub exemplar_ids: Vec<String>,
    pub mode: EvalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptOptions {
    pub fewshot_k: usize,
    pub seed: u64,
    pub cot: bool,
    pub mode: EvalMode,
}

/// Per-item RNG seed: the run seed mixed with a stable digest of the id.
fn item_seed(seed: u64, instance_id: &str) -> u64 {
    let digest = Sha256::digest(instance_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(head)
}

/// Draws `k` exemplars from `pool` (never the item itself).
pub fn sample_exemplars<'a>(
    item: &DocItem,
    pool: &'a [DocItem],
    k: usize,
    seed: u64,
) -> Result<Vec<&'a DocItem>, PromptError> {
    let usable: Vec<&DocItem> = pool.iter().filter(|p| p.id != item.id).collect();
    if k > usable.len() {
        return Err(PromptError::InsufficientPool {
            requested: k,
            available: usable.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &item.id));
    Ok(rand::seq::index::sample(&mut rng, usable.len(), k)
        .into_iter()
        .map(|i| usable[i])
        .collect())
}

/// Few-shot prompt: `k` solved exemplars joined by the template separator,
/// then the target item ending at its answer header.
pub fn assemble_fewshot(
    item: &DocItem,
    pool: &[DocItem],
    k: usize,
    seed: u64,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, PromptError> {
    render_prompt(
        item,
        pool,
        &PromptOptions {
            fewshot_k: k,
            seed,
            ..PromptOptions::default()
        },
        template,
    )
}

pub fn render_prompt(
    item: &DocItem,
    pool: &[DocItem],
    opts: &PromptOptions,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, PromptError> {
    let exemplars = sample_exemplars(item, pool, opts.fewshot_k, opts.seed)?;
    let mut text = template.system_prefix.clone();
    for ex in &exemplars {
        text.push_str(&render_item(ex, template)?);
        text.push_str(&template.gold_text(ex));
        text.push_str(&template.exemplar_separator);
    }
    text.push_str(&render_item(item, template)?);
    if opts.cot {
        text.push_str(&template.cot_trigger);
    }
    Ok(RenderedPrompt {
        instance_id: item.id.clone(),
        text,
        exemplar_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
        mode: opts.mode,
    })
}

/// One `(context, continuation)` pair per choice, in choice order.
pub fn render_loglikelihood_pairs(
    item: &DocItem,
    template: &PromptTemplate,
) -> Result<Vec<(String, String)>, PromptError> {
    let context = render_mc_checked(item, template)?;
    Ok(continuations(item, template)
        .into_iter()
        .map(|c| (context.clone(), c))
        .collect())
}

fn render_mc_checked(item: &DocItem, template: &PromptTemplate) -> Result<String, PromptError> {
    if item.target_scores.is_empty() {
        return Err(PromptError::EmptyChoices(item.id.clone()));
    }
    render_mc(item, template)
}

/// Continuation strings for each choice, aligned with `target_scores`.
pub fn continuations(item: &DocItem, template: &PromptTemplate) -> Vec<String> {
    item.choices()
        .enumerate()
        .map(|(idx, choice)| match template.continuation_style {
            ContinuationStyle::Letter => format!(" ({})", index_to_letter(idx)),
            ContinuationStyle::Text => format!(" {choice}"),
        })
        .collect()
}

/// Templates by id. Starts with the built-in `mc_default` and `raw`
/// layouts; more are loaded from JSON files.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: HashMap<String, PromptTemplate>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        let mut store = Self {
            templates: HashMap::new(),
        };
        store.insert(PromptTemplate::default());
        store.insert(PromptTemplate::raw());
        store
    }
}

impl TemplateStore {
    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates
            .insert(template.template_id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), PromptError> {
        let err = |message: String| PromptError::TemplateFile {
            path: path.display().to_string(),
            message,
        };
        let body = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let template: PromptTemplate =
            serde_json::from_str(&body).map_err(|e| err(e.to_string()))?;
        self.insert(template);
        Ok(())
    }

    /// Loads every `*.json` file in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, PromptError> {
        let entries = std::fs::read_dir(dir).map_err(|e| PromptError::TemplateFile {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for p in &paths {
            self.load_file(p)?;
        }
        Ok(paths.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use std::collections::BTreeMap;

    pub(crate) fn mc(id: &str, question: &str, choices: &[&str], gold: usize) -> DocItem {
        DocItem {
            id: id.into(),
            passage: String::new(),
            question: question.into(),
            target_scores: choices
                .iter()
                .enumerate()
                .map(|(i, c)| (c.to_string(), u8::from(i == gold)))
                .collect::<IndexMap<_, _>>(),
            answer: String::new(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn default_layout_two_choices() {
        let item = mc("i", "Q1", &["x", "y"], 0);
        assert_eq!(
            render_mc(&item, &PromptTemplate::default()).unwrap(),
            "Question:\nQ1\nRequirement:\nChoose and respond with the letter of the correct answer, including the parentheses.\nOptions:\n(A) x\n(B) y\nAnswer:\n"
        );
    }

    #[test]
    fn single_option_block() {
        let item = mc("i", "Q", &["only"], 0);
        let text = render_mc(&item, &PromptTemplate::default()).unwrap();
        assert!(text.contains("Options:\n(A) only\nAnswer:\n"));
    }

    #[test]
    fn alphabet_exhausted() {
        let names: Vec<String> = (0..27).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let item = mc("i", "Q", &refs, 0);
        assert_eq!(
            render_mc(&item, &PromptTemplate::default()),
            Err(PromptError::TooManyChoices(27))
        );
    }

    #[test]
    fn empty_question() {
        let item = mc("i", "", &["a"], 0);
        assert_eq!(
            render_mc(&item, &PromptTemplate::default()),
            Err(PromptError::EmptyQuestion("i".into()))
        );
    }

    #[test]
    fn zero_shot_is_plain_render() {
        let t = PromptTemplate::default();
        let item = mc("t", "Q", &["a", "b"], 1);
        let pool = vec![mc("p0", "P", &["c", "d"], 0)];
        let r = assemble_fewshot(&item, &pool, 0, 3, &t).unwrap();
        assert_eq!(r.text, render_mc(&item, &t).unwrap());
        assert!(r.exemplar_ids.is_empty());
    }

    #[test]
    fn insufficient_pool() {
        let t = PromptTemplate::default();
        let item = mc("t", "Q", &["a", "b"], 1);
        let pool = vec![mc("p0", "P", &["c", "d"], 0), item.clone()];
        assert_eq!(
            assemble_fewshot(&item, &pool, 2, 0, &t),
            Err(PromptError::InsufficientPool {
                requested: 2,
                available: 1
            })
        );
    }

    #[test]
    fn cot_trigger_follows_target_only() {
        let t = PromptTemplate::default();
        let item = mc("t", "Q", &["a", "b"], 1);
        let pool: Vec<DocItem> = (0..3)
            .map(|i| mc(&format!("p{i}"), "P", &["c", "d"], 0))
            .collect();
        let opts = PromptOptions {
            fewshot_k: 2,
            seed: 1,
            cot: true,
            mode: EvalMode::Generation,
        };
        let r = render_prompt(&item, &pool, &opts, &t).unwrap();
        assert!(r.text.ends_with("Answer:\nLet's think step by step."));
        assert_eq!(r.text.matches("Let's think step by step.").count(), 1);
    }

    #[test]
    fn open_items_use_answer_text() {
        let t = PromptTemplate::default();
        let mut ex = mc("e", "1+1?", &[], 0);
        ex.answer = "2".into();
        let mut item = mc("t", "2+2?", &[], 0);
        item.answer = "4".into();
        let r = assemble_fewshot(&item, &[ex], 1, 0, &t).unwrap();
        assert_eq!(
            r.text,
            "Question:\n1+1?\nAnswer:\n2\n\nQuestion:\n2+2?\nAnswer:\n"
        );
    }

    #[test]
    fn loglikelihood_pairs() {
        let mut t = PromptTemplate::default();
        let item = mc("t", "Q", &["w", "x", "y", "z"], 2);
        let pairs = render_loglikelihood_pairs(&item, &t).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|(c, _)| *c == pairs[0].0));
        let conts: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
        assert_eq!(conts, [" (A)", " (B)", " (C)", " (D)"]);

        t.continuation_style = ContinuationStyle::Text;
        let conts: Vec<String> = render_loglikelihood_pairs(&item, &t)
            .unwrap()
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        assert_eq!(conts, [" w", " x", " y", " z"]);

        let empty = mc("e", "Q", &[], 0);
        assert_eq!(
            render_loglikelihood_pairs(&empty, &t),
            Err(PromptError::EmptyChoices("e".into()))
        );
    }

    #[test]
    fn template_roundtrip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let custom = PromptTemplate {
            template_id: "terse".into(),
            instruction: String::new(),
            ..PromptTemplate::default()
        };
        std::fs::write(
            dir.path().join("terse.json"),
            serde_json::to_string_pretty(&custom).unwrap(),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("partial.json"),
            r#"{"template_id":"partial","answer_header":"A: "}"#,
        )
        .unwrap();
        let mut store = TemplateStore::default();
        assert_eq!(store.load_dir(dir.path()).unwrap(), 2);
        assert_eq!(store.get("terse").unwrap(), &custom);
        let partial = store.get("partial").unwrap();
        assert_eq!(partial.answer_header, "A: ");
        assert_eq!(partial.options_header, "Options:\n");
        assert!(matches!(
            store.get("missing"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }
}
