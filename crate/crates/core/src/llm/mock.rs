//! Deterministic offline stand-ins for the LLM.
//!
//! Both mocks read the prompt the same way a downstream parser would: the
//! numbered lines after a candidate header, and `"H" ⇒ "C"` lines after a
//! relational header.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::prompting::{headers, render_answer};

/// Knobs of the evidence-aware mock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockEvidenceConfig {
    /// Probability of swapping an adjacent pair of unsupported candidates.
    pub swap_prob: f64,
    /// Maximum number of positions a candidate's rank may slip when the
    /// prompt shows patient history without a prioritized section. Each
    /// candidate draws a slip uniformly from `[0, history_jitter)`.
    pub history_jitter: f64,
}

impl Default for MockEvidenceConfig {
    fn default() -> Self {
        Self { swap_prob: 0.1, history_jitter: 16.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptView {
    /// Candidate names in prompt order.
    pub candidates: Vec<String>,
    /// Candidates that appear on the right of a relational line.
    pub supported: Vec<String>,
    /// A prioritized history section is present.
    pub prioritized: bool,
    /// Some patient history (raw or prioritized) is present.
    pub has_history: bool,
}

fn is_header(line: &str) -> bool {
    line.ends_with(':') && !line.starts_with('-') && !line.starts_with('"')
}

fn section_lines<'a>(lines: &[&'a str], heads: &[&str]) -> Option<Vec<&'a str>> {
    let start = lines.iter().position(|l| heads.contains(&l.trim()))?;
    Some(
        lines[start + 1..]
            .iter()
            .take_while(|l| !l.trim().is_empty() && !is_header(l.trim()))
            .copied()
            .collect(),
    )
}

fn strip_number(line: &str) -> Option<&str> {
    let line = line.trim();
    let dot = line.find(". ")?;
    line[..dot].chars().all(|c| c.is_ascii_digit()).then(|| line[dot + 2..].trim())
}

fn unquote(s: &str) -> &str {
    s.trim().trim_matches('"')
}

/// Extracts what the mocks need from a prompt.
pub fn read_prompt(prompt: &str) -> Result<PromptView, LlmError> {
    let lines: Vec<&str> = prompt.lines().collect();
    let cand = section_lines(&lines, &[headers::NOVEL_CANDIDATES, headers::OVERALL_CANDIDATES])
        .ok_or_else(|| LlmError::Mock("prompt has no candidate section".into()))?;
    let candidates: Vec<String> = cand.iter().filter_map(|l| strip_number(l)).map(str::to_string).collect();
    if candidates.is_empty() {
        return Err(LlmError::Mock("candidate section is empty".into()));
    }
    let supported = section_lines(&lines, &[headers::NOVEL_RELATIONS, headers::OVERALL_RELATIONS])
        .unwrap_or_default()
        .iter()
        .filter_map(|l| l.split_once('⇒'))
        .map(|(_, c)| unquote(c).to_string())
        .collect();
    let prioritized = lines
        .iter()
        .any(|l| matches!(l.trim(), headers::NOVEL_PRIORITIZED | headers::OVERALL_PRIORITIZED));
    let has_history = prioritized
        || lines
            .iter()
            .any(|l| l.trim() == headers::OVERALL_HISTORY || l.trim().starts_with("Last Diagnostic Visit ("));
    Ok(PromptView { candidates, supported, prioritized, has_history })
}

/// Repeats the candidates in prompt order.
pub fn mock_echo(prompt: &str) -> Result<String, LlmError> {
    let view = read_prompt(prompt)?;
    Ok(render_answer(view.candidates.iter().map(String::as_str)))
}

/// Ranks candidates by (has a relational link, prompt position).
///
/// When history appears without prioritization the prompt position is read
/// with a random slip of up to `history_jitter` places. Afterwards adjacent
/// pairs of unsupported candidates swap with probability `swap_prob`.
pub fn mock_evidence_aware(prompt: &str, seed: u64, cfg: &MockEvidenceConfig) -> Result<String, LlmError> {
    let view = read_prompt(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = if view.has_history && !view.prioritized { cfg.history_jitter } else { 0.0 };
    let mut order: Vec<(bool, f64, usize)> = view
        .candidates
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let slip = if jitter > 0.0 { rng.random_range(0.0..jitter) } else { 0.0 };
            (view.supported.contains(name), i as f64 + slip, i)
        })
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut i = 0;
    while i + 1 < order.len() {
        if !order[i].0 && !order[i + 1].0 && rng.random_bool(cfg.swap_prob) {
            order.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(render_answer(order.iter().map(|&(_, _, i)| view.candidates[i].as_str())))
}
