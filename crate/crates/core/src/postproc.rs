//! Output cleanup between raw generation and scoring.
//!
//! Rules are total `text -> text` functions registered under an id and
//! scoped by a (task pattern, model-family pattern) pair. A chain is a list
//! of rule ids resolved once per (task, model) and applied left to right.

use std::fmt;
use std::sync::Arc;

/// Extra inputs some rules need. Built from the instance being scored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleContext {
    /// Function name for code tasks.
    pub entry_point: Option<String>,
    /// Number of answer options, when known; bounds letter extraction.
    pub num_choices: Option<usize>,
}

pub type Transform = Arc<dyn Fn(&str, &RuleContext) -> String + Send + Sync>;

#[derive(Clone)]
pub struct PostprocRule {
    pub rule_id: String,
    pub task_pattern: String,
    pub model_pattern: String,
    transform: Transform,
}

impl fmt::Debug for PostprocRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PostprocRule")
            .field("rule_id", &self.rule_id)
            .field("task_pattern", &self.task_pattern)
            .field("model_pattern", &self.model_pattern)
            .finish_non_exhaustive()
    }
}

impl PostprocRule {
    pub fn new(
        rule_id: impl Into<String>,
        task_pattern: impl Into<String>,
        model_pattern: impl Into<String>,
        transform: impl Fn(&str, &RuleContext) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            rule_id: rule_id.into(),
            task_pattern: task_pattern.into(),
            model_pattern: model_pattern.into(),
            transform: Arc::new(transform),
        }
    }

    /// A rule that applies to every task and model.
    pub fn global(
        rule_id: impl Into<String>,
        transform: impl Fn(&str, &RuleContext) -> String + Send + Sync + 'static,
    ) -> Self {
        Self::new(rule_id, "*", "*", transform)
    }

    pub fn apply(&self, text: &str, ctx: &RuleContext) -> String {
        (self.transform)(text, ctx)
    }

    fn matches(&self, task: &str, model: &str) -> bool {
        glob_match(&self.task_pattern, task) && glob_match(&self.model_pattern, model)
    }

    fn specificity(&self) -> usize {
        literal_len(&self.task_pattern) + literal_len(&self.model_pattern)
    }
}

fn literal_len(pattern: &str) -> usize {
    pattern.chars().filter(|c| *c != '*').count()
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PostprocError {
    #[error("unknown post-processing rule {rule_id:?} for task {task:?}, model {model:?}")]
    UnknownRuleId {
        rule_id: String,
        task: String,
        model: String,
    },
}

#[derive(Debug, Clone)]
pub struct RuleRegistry {
    rules: Vec<PostprocRule>,
}

impl Default for RuleRegistry {
    /// Registry holding the built-in rules, all scoped globally.
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(PostprocRule::global("strip", |t, _| {
            python_strip(t).to_string()
        }));
        reg.register(PostprocRule::global("first_line", |t, _| first_line(t)));
        reg.register(PostprocRule::global("extract_code_block", |t, _| {
            extract_code_block(t)
        }));
        reg.register(PostprocRule::global(
            "strip_after_docstring_tests",
            |t, _| strip_after_docstring_tests(t),
        ));
        reg.register(PostprocRule::global(
            "extract_function_body",
            |t, ctx| match &ctx.entry_point {
                Some(name) => extract_function_body(t, name),
                None => t.to_string(),
            },
        ));
        reg.register(PostprocRule::global("extract_mc_letter", |t, ctx| {
            extract_mc_letter_bounded(t, ctx.num_choices)
        }));
        reg
    }
}

impl RuleRegistry {
    pub fn empty() -> Self {
        Self { rules: Vec::new() }
    }

    pub fn register(&mut self, rule: PostprocRule) {
        self.rules.push(rule);
    }

    /// Most specific matching registration wins; ties go to the earliest.
    pub fn resolve(&self, rule_id: &str, task: &str, model: &str) -> Option<&PostprocRule> {
        let mut best: Option<&PostprocRule> = None;
        for rule in self
            .rules
            .iter()
            .filter(|r| r.rule_id == rule_id && r.matches(task, model))
        {
            if best.is_none_or(|b| rule.specificity() > b.specificity()) {
                best = Some(rule);
            }
        }
        best
    }

    pub fn build_chain<S: AsRef<str>>(
        &self,
        rule_ids: &[S],
        task: &str,
        model: &str,
    ) -> Result<RuleChain, PostprocError> {
        let rules = rule_ids
            .iter()
            .map(|id| {
                self.resolve(id.as_ref(), task, model)
                    .cloned()
                    .ok_or_else(|| PostprocError::UnknownRuleId {
                        rule_id: id.as_ref().to_string(),
                        task: task.to_string(),
                        model: model.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(RuleChain { rules })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleChain {
    rules: Vec<PostprocRule>,
}

impl RuleChain {
    pub fn rule_ids(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|r| r.rule_id.as_str())
    }

    pub fn apply(&self, text: &str, ctx: &RuleContext) -> String {
        apply_chain(&self.rules, text, ctx)
    }
}

pub fn apply_chain(rules: &[PostprocRule], text: &str, ctx: &RuleContext) -> String {
    rules
        .iter()
        .fold(text.to_string(), |acc, rule| rule.apply(&acc, ctx))
}

fn is_python_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

/// Trims the characters Python's `str.strip()` removes.
pub fn python_strip(text: &str) -> &str {
    text.trim_matches(is_python_space)
}

/// First non-blank line, stripped.
fn first_line(text: &str) -> String {
    let line = python_strip(text).lines().next().unwrap_or_default();
    python_strip(line).to_string()
}

const FENCE: &str = "```";

/// Contents of the first fenced code block.
///
/// The opening fence may carry a language tag. An unclosed fence yields
/// everything after it; no fence at all returns the input unchanged.
pub fn extract_code_block(text: &str) -> String {
    let Some(open) = text.find(FENCE) else {
        return text.to_string();
    };
    let after = &text[open + FENCE.len()..];
    let tag_len = after
        .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-' | '.')))
        .unwrap_or(after.len());
    let body = match after[tag_len..].strip_prefix("\r\n") {
        Some(rest) => rest,
        None => match after[tag_len..].strip_prefix('\n') {
            Some(rest) => rest,
            // no newline after the tag: inline block, the "tag" is content
            None if tag_len < after.len() => after,
            None => "",
        },
    };
    let content = match body.find(FENCE) {
        Some(close) => &body[..close],
        None => body,
    };
    let content = content.strip_suffix('\n').unwrap_or(content);
    content.strip_suffix('\r').unwrap_or(content).to_string()
}

/// Drops a trailing docstring-delimited test section from MBPP-style output.
///
/// With an even number of `"""` markers, the text before the first pair
/// that is followed by another `def` is kept. With an odd count the text
/// before the first marker is kept. The result is whitespace-stripped.
pub fn strip_after_docstring_tests(text: &str) -> String {
    let bytes = text.as_bytes();
    let quotes: Vec<usize> = (0..bytes.len())
        .filter(|&i| bytes[i..].starts_with(b"\"\"\""))
        .collect();
    if quotes.len().is_multiple_of(2) {
        for pair in quotes.chunks_exact(2) {
            let (start, end) = (pair[0], pair[1]);
            if text[end..].contains("def") {
                return python_strip(&text[..start]).to_string();
            }
        }
        python_strip(text).to_string()
    } else {
        python_strip(&text[..quotes[0]]).to_string()
    }
}

fn indent_width(line: &str) -> usize {
    line.chars()
        .take_while(|c| *c == ' ' || *c == '\t')
        .map(|c| if c == '\t' { 4 } else { 1 })
        .sum()
}

fn strip_columns(line: &str, cols: usize) -> &str {
    let mut removed = 0;
    for (i, c) in line.char_indices() {
        if removed >= cols || !(c == ' ' || c == '\t') {
            return &line[i..];
        }
        removed += if c == '\t' { 4 } else { 1 };
    }
    ""
}

fn is_def_of(line: &str, name: &str) -> bool {
    let trimmed = line.trim_start();
    let rest = trimmed
        .strip_prefix("async def ")
        .or_else(|| trimmed.strip_prefix("def "));
    rest.and_then(|r| r.trim_start().strip_prefix(name))
        .is_some_and(|r| r.trim_start().starts_with('('))
}

/// Body of the `def entry_name(...)` in `code`, without the signature.
///
/// Body lines lose the definition's own indentation, so a top-level
/// function's body keeps its usual one-level indent and a nested one is
/// brought to the same shape. Missing definitions return `code` unchanged.
pub fn extract_function_body(code: &str, entry_name: &str) -> String {
    let lines: Vec<&str> = code.split_inclusive('\n').collect();
    let Some(def_idx) = lines.iter().position(|l| is_def_of(l, entry_name)) else {
        return code.to_string();
    };
    let def_indent = indent_width(lines[def_idx]);

    // signature may wrap; it ends at the first colon outside brackets
    let mut depth = 0i32;
    let mut header_end = None;
    'scan: for (idx, line) in lines.iter().enumerate().skip(def_idx) {
        let code_part = line.split('#').next().unwrap_or("");
        for (i, c) in code_part.char_indices() {
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                ':' if depth == 0 => {
                    header_end = Some((idx, i));
                    break 'scan;
                }
                _ => {}
            }
        }
    }
    let Some((header_end, colon)) = header_end else {
        return code.to_string();
    };

    // one-line definition: `def f(x): return x`
    let inline = lines[header_end].split('#').next().unwrap_or("")[colon + 1..].trim();
    if !inline.is_empty() {
        return format!("    {inline}\n");
    }

    let mut body: Vec<&str> = Vec::new();
    for line in &lines[header_end + 1..] {
        if line.trim().is_empty() {
            body.push(line);
            continue;
        }
        if indent_width(line) <= def_indent {
            break;
        }
        body.push(line);
    }
    while body.last().is_some_and(|l| l.trim().is_empty()) {
        body.pop();
    }
    let mut out = String::new();
    for line in body {
        out.push_str(strip_columns(line, def_indent));
        if !line.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

/// The decisive option letter in a multiple-choice answer.
///
/// Prefers the first `(L)`; falls back to the first standalone capital
/// letter. The pronoun "I" followed by a lowercase word is not a letter.
pub fn extract_mc_letter(text: &str) -> String {
    extract_mc_letter_bounded(text, None)
}

pub fn extract_mc_letter_bounded(text: &str, num_choices: Option<usize>) -> String {
    let in_range = |c: char| {
        c.is_ascii_uppercase() && num_choices.is_none_or(|n| ((c as u8 - b'A') as usize) < n)
    };
    let chars: Vec<char> = text.chars().collect();

    for w in chars.windows(3) {
        if w[0] == '(' && w[2] == ')' && in_range(w[1]) {
            return w[1].to_string();
        }
    }

    for (i, &c) in chars.iter().enumerate() {
        if !in_range(c) {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        if !(before_ok && after_ok) {
            continue;
        }
        let pronoun = c == 'I'
            && chars.get(i + 1).is_some_and(|n| *n == ' ' || *n == '\'')
            && chars.get(i + 2).is_some_and(|n| n.is_lowercase());
        if pronoun {
            continue;
        }
        return c.to_string();
    }
    String::new()
}
