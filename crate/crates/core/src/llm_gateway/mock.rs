use std::collections::BTreeSet;

use super::{cache_key, Backend, CompletionRecord, GatewayError, ModelSpec, TokenUsage};
use crate::promptgen::{estimate_tokens, Injection, RenderedPrompt, Task};
use crate::respparse::LabelMap;
use crate::sampler::{EvalInstance, HistoryEntry};
use crate::text::token_set;

/// Deterministic offline backend.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub label_map: LabelMap,
}

impl MockBackend {
    pub fn new(label_map: LabelMap) -> Self {
        Self { label_map }
    }
}

fn mean(h: &[HistoryEntry]) -> Option<f64> {
    (!h.is_empty()).then(|| h.iter().map(|e| e.rating).sum::<f64>() / h.len() as f64)
}

/// Reply the mock would give to `prompt`.
///
/// Only the histories visible in the prompt are used: target history only
/// under injection. Rating prompts get the label nearest the mean history
/// rating (target history preferred, then source, else "Neutral"). Ranking
/// prompts get the candidates ordered by word overlap with history titles,
/// ties broken by title.
pub fn mock_complete(prompt: &RenderedPrompt, instance: &EvalInstance, label_map: &LabelMap) -> String {
    let target: &[HistoryEntry] = match prompt.variant.injection {
        Injection::With => &instance.target_history,
        Injection::No => &[],
    };
    match prompt.variant.task {
        Task::Rating => match mean(target).or_else(|| mean(&instance.source_history)) {
            Some(m) => label_map.nearest_label(m).name().to_string(),
            None => "Neutral".to_string(),
        },
        Task::Ranking => {
            let words: BTreeSet<String> = instance
                .source_history
                .iter()
                .chain(target)
                .flat_map(|e| token_set(&e.title))
                .collect();
            let mut scored: Vec<(usize, &str)> = instance
                .candidates
                .iter()
                .map(|c| (token_set(&c.title).intersection(&words).count(), c.title.as_str()))
                .collect();
            scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            let titles: Vec<&str> = scored.into_iter().map(|(_, t)| t).collect();
            format!("[{}]", titles.join(", "))
        }
    }
}

impl Backend for MockBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        instance: &EvalInstance,
        spec: &ModelSpec,
    ) -> Result<CompletionRecord, GatewayError> {
        let text = mock_complete(prompt, instance, &self.label_map);
        Ok(CompletionRecord {
            cache_key: cache_key(spec, &prompt.text),
            prompt_ref: prompt.instance_ref.clone(),
            token_usage: TokenUsage {
                input: prompt.token_estimate as u64,
                output: estimate_tokens(&text) as u64,
            },
            raw_text: text,
            latency_ms: 0,
            attempt_count: 1,
        })
    }

    fn networked(&self) -> bool {
        false
    }
}
