//! Prompt rendering for the four (injection × task) families at high or
//! medium context.
//!
//! Templates live in `templates/` as plain text with named slots (see
//! `templates/README.md`). Medium context is a slot policy: the `high` block
//! is dropped and the two domain slots are filled with `Domain A` and
//! `Domain B`. Titles never pass through the masking path.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{EvalInstance, HistoryEntry};

pub const ROLE_SENTENCE: &str = "You are a cross-domain recommender.";
pub const MASKED_SOURCE: &str = "Domain A";
pub const MASKED_TARGET: &str = "Domain B";
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 24_000;

const LIKELIHOOD_LABELS: [&str; 6] = [
    "Very Unlikely",
    "Unlikely",
    "Somewhat Unlikely",
    "Neutral",
    "Likely",
    "Highly Likely",
];

/// The six likelihood labels, least to most likely.
pub fn likelihood_labels() -> [&'static str; 6] {
    LIKELIHOOD_LABELS
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("ranking prompt needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("prompt is {chars} characters, over the {budget} budget; reduce negatives_per_positive")]
    OverBudget { chars: usize, budget: usize },
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    With,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rating,
    Ranking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    High,
    Medium,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptVariant {
    pub injection: Injection,
    pub task: Task,
    pub context: Context,
}

impl PromptVariant {
    pub fn new(injection: Injection, task: Task, context: Context) -> Self {
        Self {
            injection,
            task,
            context,
        }
    }

    pub fn all() -> Vec<PromptVariant> {
        let mut out = Vec::with_capacity(8);
        for injection in [Injection::With, Injection::No] {
            for task in [Task::Rating, Task::Ranking] {
                for context in [Context::High, Context::Medium] {
                    out.push(Self::new(injection, task, context));
                }
            }
        }
        out
    }

    /// File stem of the template family this variant renders from.
    pub fn family(&self) -> &'static str {
        match (self.injection, self.task) {
            (Injection::With, Task::Rating) => "with_injection_rating",
            (Injection::With, Task::Ranking) => "with_injection_ranking",
            (Injection::No, Task::Rating) => "no_injection_rating",
            (Injection::No, Task::Ranking) => "no_injection_ranking",
        }
    }
}

/// `with-rating-high` style labels, also accepted by `FromStr`.
impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inj = match self.injection {
            Injection::With => "with",
            Injection::No => "no",
        };
        let task = match self.task {
            Task::Rating => "rating",
            Task::Ranking => "ranking",
        };
        let ctx = match self.context {
            Context::High => "high",
            Context::Medium => "medium",
        };
        write!(f, "{inj}-{task}-{ctx}")
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::UnknownVariant(s.to_string());
        let parts: Vec<&str> = s.split(['-', '/']).collect();
        let [inj, task, rest @ ..] = parts.as_slice() else {
            return Err(bad());
        };
        let injection = match *inj {
            "with" => Injection::With,
            "no" => Injection::No,
            _ => return Err(bad()),
        };
        let task = match *task {
            "rating" => Task::Rating,
            "ranking" => Task::Ranking,
            _ => return Err(bad()),
        };
        let context = match rest {
            [] | ["high"] => Context::High,
            ["medium"] => Context::Medium,
            _ => return Err(bad()),
        };
        Ok(Self::new(injection, task, context))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(Slot),
    HighOnly(Vec<Segment>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Source,
    Target,
    SourceHistory,
    TargetHistory,
    Candidate,
    Candidates,
    Labels,
    OutputFormat,
}

impl Slot {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "source" => Slot::Source,
            "target" => Slot::Target,
            "source_history" => Slot::SourceHistory,
            "target_history" => Slot::TargetHistory,
            "candidate" => Slot::Candidate,
            "candidates" => Slot::Candidates,
            "labels" => Slot::Labels,
            "output_format" => Slot::OutputFormat,
            _ => return None,
        })
    }
}

/// A parsed template file.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(name: &str, src: &str) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template {
            name: name.to_string(),
            message,
        };
        let mut stack: Vec<Vec<Segment>> = vec![Vec::new()];
        let mut rest = src;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                stack.last_mut().unwrap().push(Segment::Text(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find("}}")
                .ok_or_else(|| err("unterminated '{{'".into()))?
                + open;
            let tag = rest[open + 2..close].trim();
            match tag {
                "#high" => stack.push(Vec::new()),
                "/high" => {
                    if stack.len() < 2 {
                        return Err(err("'{{/high}}' without opening block".into()));
                    }
                    let block = stack.pop().unwrap();
                    stack.last_mut().unwrap().push(Segment::HighOnly(block));
                }
                other => {
                    let slot = Slot::parse(other).ok_or_else(|| err(format!("unknown slot {other:?}")))?;
                    stack.last_mut().unwrap().push(Segment::Slot(slot));
                }
            }
            rest = &rest[close + 2..];
        }
        if !rest.is_empty() {
            stack.last_mut().unwrap().push(Segment::Text(rest.to_string()));
        }
        if stack.len() != 1 {
            return Err(err("unclosed '{{#high}}' block".into()));
        }
        Ok(Self {
            name: name.to_string(),
            segments: stack.pop().unwrap(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn fill(&self, segs: &[Segment], context: Context, values: &SlotValues, out: &mut String) {
        for seg in segs {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(s) => out.push_str(values.get(*s)),
                Segment::HighOnly(inner) => {
                    if context == Context::High {
                        self.fill(inner, context, values, out);
                    }
                }
            }
        }
    }
}

struct SlotValues {
    source: String,
    target: String,
    source_history: String,
    target_history: String,
    candidate: String,
    candidates: String,
    labels: String,
    output_format: String,
}

impl SlotValues {
    fn get(&self, slot: Slot) -> &str {
        match slot {
            Slot::Source => &self.source,
            Slot::Target => &self.target,
            Slot::SourceHistory => &self.source_history,
            Slot::TargetHistory => &self.target_history,
            Slot::Candidate => &self.candidate,
            Slot::Candidates => &self.candidates,
            Slot::Labels => &self.labels,
            Slot::OutputFormat => &self.output_format,
        }
    }
}

/// The four template families.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    with_rating: Template,
    with_ranking: Template,
    no_rating: Template,
    no_ranking: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let p = |name, src| Template::parse(name, src).expect("builtin templates parse");
        Self {
            with_rating: p(
                "with_injection_rating",
                include_str!("../templates/with_injection_rating.txt"),
            ),
            with_ranking: p(
                "with_injection_ranking",
                include_str!("../templates/with_injection_ranking.txt"),
            ),
            no_rating: p(
                "no_injection_rating",
                include_str!("../templates/no_injection_rating.txt"),
            ),
            no_ranking: p(
                "no_injection_ranking",
                include_str!("../templates/no_injection_ranking.txt"),
            ),
        }
    }

    /// Load `<family>.txt` for each family from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |name: &str| {
            let path = dir.join(format!("{name}.txt"));
            let src = fs::read_to_string(&path).map_err(|e| PromptError::Template {
                name: name.to_string(),
                message: format!("{}: {e}", path.display()),
            })?;
            Template::parse(name, &src)
        };
        Ok(Self {
            with_rating: load("with_injection_rating")?,
            with_ranking: load("with_injection_ranking")?,
            no_rating: load("no_injection_rating")?,
            no_ranking: load("no_injection_ranking")?,
        })
    }

    pub fn get(&self, variant: PromptVariant) -> &Template {
        match (variant.injection, variant.task) {
            (Injection::With, Task::Rating) => &self.with_rating,
            (Injection::With, Task::Ranking) => &self.with_ranking,
            (Injection::No, Task::Rating) => &self.no_rating,
            (Injection::No, Task::Ranking) => &self.no_ranking,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub user_id: String,
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub variant: PromptVariant,
    pub instance_ref: InstanceRef,
    pub token_estimate: usize,
}

/// Characters / 4, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Instance-derived inputs of a prompt, independent of the context level.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParts {
    pub variant: PromptVariant,
    pub source_domain: String,
    pub target_domain: String,
    pub source_history: Vec<HistoryEntry>,
    pub target_history: Vec<HistoryEntry>,
    pub candidate: String,
    pub candidates: Vec<String>,
    pub instance_ref: InstanceRef,
}

impl PromptParts {
    pub fn from_instance(instance: &EvalInstance, variant: PromptVariant) -> Self {
        Self {
            variant,
            source_domain: instance.source_domain.clone(),
            target_domain: instance.target_domain.clone(),
            source_history: instance.source_history.clone(),
            target_history: match variant.injection {
                Injection::With => instance.target_history.clone(),
                Injection::No => Vec::new(),
            },
            candidate: instance.positive.title.clone(),
            candidates: instance.candidates.iter().map(|c| c.title.clone()).collect(),
            instance_ref: InstanceRef {
                user_id: instance.user_id.clone(),
                item_id: instance.positive.item_id.clone(),
            },
        }
    }
}

/// Integral ratings print without a decimal point, as in the figures.
pub fn format_rating(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn render_history(h: &[HistoryEntry]) -> String {
    h.iter()
        .map(|e| format!("- Title: {}, Rating: {}\n", e.title, format_rating(e.rating)))
        .collect()
}

fn render_candidates(titles: &[String]) -> String {
    let quoted: Vec<String> = titles.iter().map(|t| format!("'{t}'")).collect();
    format!("[{}]", quoted.join(", "))
}

fn render_output_format(n: usize) -> String {
    let items: Vec<String> = (1..=n).map(|i| format!("Item{i}")).collect();
    format!("[{}]", items.join(", "))
}

fn render_labels() -> String {
    LIKELIHOOD_LABELS
        .iter()
        .map(|l| format!("'{l}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    pub templates: TemplateSet,
    pub max_chars: usize,
}

impl Default for Renderer {
    fn default() -> Self {
        Self {
            templates: TemplateSet::builtin(),
            max_chars: DEFAULT_MAX_PROMPT_CHARS,
        }
    }
}

impl Renderer {
    pub fn render_parts(&self, parts: &PromptParts) -> Result<RenderedPrompt, PromptError> {
        let v = parts.variant;
        if v.task == Task::Ranking && parts.candidates.len() < 2 {
            return Err(PromptError::TooFewCandidates(parts.candidates.len()));
        }
        let (source, target) = match v.context {
            Context::High => (parts.source_domain.clone(), parts.target_domain.clone()),
            Context::Medium => (MASKED_SOURCE.to_string(), MASKED_TARGET.to_string()),
        };
        let values = SlotValues {
            source,
            target,
            source_history: render_history(&parts.source_history),
            target_history: render_history(&parts.target_history),
            candidate: parts.candidate.clone(),
            candidates: render_candidates(&parts.candidates),
            labels: render_labels(),
            output_format: render_output_format(parts.candidates.len()),
        };
        let template = self.templates.get(v);
        let mut text = String::new();
        template.fill(&template.segments, v.context, &values, &mut text);
        let chars = text.chars().count();
        if v.task == Task::Ranking && chars > self.max_chars {
            return Err(PromptError::OverBudget {
                chars,
                budget: self.max_chars,
            });
        }
        Ok(RenderedPrompt {
            token_estimate: estimate_tokens(&text),
            text,
            variant: v,
            instance_ref: parts.instance_ref.clone(),
        })
    }

    pub fn render(
        &self,
        instance: &EvalInstance,
        variant: PromptVariant,
    ) -> Result<RenderedPrompt, PromptError> {
        self.render_parts(&PromptParts::from_instance(instance, variant))
    }

    /// Re-render the same constituents at medium context.
    pub fn degrade_to_medium(&self, parts: &PromptParts) -> Result<RenderedPrompt, PromptError> {
        let mut medium = parts.clone();
        medium.variant.context = Context::Medium;
        self.render_parts(&medium)
    }
}

/// Render with the builtin templates and default budget.
pub fn render(instance: &EvalInstance, variant: PromptVariant) -> Result<RenderedPrompt, PromptError> {
    Renderer::default().render(instance, variant)
}
