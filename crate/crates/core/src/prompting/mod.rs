//! Prompt composition for both tasks and all strategies, and answer parsing.

pub mod parse;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ehr::{Ontology, PredictionInstance, Visit};
use crate::evidence::{CandidateSet, PrioritizedHistory, RelationalEvidence, Task};

pub use parse::{parse_answer, render_answer, sc_aggregate, NamedCandidate, ParsedPrediction};
pub use template::{Template, TemplateError};

pub const NOVEL_TEMPLATE: &str = include_str!("../../templates/novel.txt");
pub const OVERALL_TEMPLATE: &str = include_str!("../../templates/overall.txt");

/// Header lines the bundled templates use; the mock LLM keys on these.
pub mod headers {
    pub const NOVEL_CANDIDATES: &str = "Candidate CCS Codes (Novel Only):";
    pub const OVERALL_CANDIDATES: &str = "Candidate CCS Codes:";
    pub const NOVEL_PRIORITIZED: &str = "Evidential Prioritization for Set-based EHRs:";
    pub const OVERALL_PRIORITIZED: &str = "Patient Historical Diagnoses (Prioritized):";
    pub const OVERALL_HISTORY: &str = "Patient Historical Diagnoses:";
    pub const NOVEL_RELATIONS: &str = "Relational Evidence for Novel Diagnoses:";
    pub const OVERALL_RELATIONS: &str = "Relational Evidence Support:";
    pub const INSTRUCTION: &str = "Instruction:";
}

pub const COT_LINE: &str = "- Think step by step about how the history supports each candidate, then give the Answer line last.";
/// Marks where a history section was cut to respect the character cap.
pub const TRUNCATION_MARK: &str = "[...]";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("task {task} needs {task}-mode candidates, got {mode}")]
    TaskMismatch { task: Task, mode: Task },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("self-consistency needs at least one sample")]
    NoSamples,
    #[error("rankings are over different candidate sets")]
    MismatchedCandidates,
    #[error("prompt template: {0}")]
    Template(#[from] TemplateError),
    #[error("prompt template {path}: {reason}")]
    TemplateFile { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Evidence sections gated by the ablation flags.
    #[default]
    Evidence,
    /// Candidates and raw history only.
    Plain,
    /// Plain plus a step-by-step instruction.
    Cot,
    /// Plain prompt sampled several times and fused by rank voting.
    Sc,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Evidence => "evidence",
            Strategy::Plain => "plain",
            Strategy::Cot => "cot",
            Strategy::Sc => "sc",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "evidence" => Ok(Strategy::Evidence),
            "plain" => Ok(Strategy::Plain),
            "cot" => Ok(Strategy::Cot),
            "sc" => Ok(Strategy::Sc),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Which evidence mechanisms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Offer the backend's top-K instead of the whole vocabulary.
    pub candidates: bool,
    /// Show history ordered by logit and grouped under CCS.
    pub prioritization: bool,
    /// Show co-occurrence links from history to candidates.
    pub relations: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationStage::Full.flags()
    }
}

/// The four cumulative configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStage {
    Base,
    Candidate,
    Prioritization,
    Full,
}

impl AblationStage {
    pub const ALL: [AblationStage; 4] =
        [AblationStage::Base, AblationStage::Candidate, AblationStage::Prioritization, AblationStage::Full];

    pub fn flags(self) -> AblationFlags {
        let n = self as u8;
        AblationFlags { candidates: n >= 1, prioritization: n >= 2, relations: n >= 3 }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationStage::Base => "Base",
            AblationStage::Candidate => "+ Candidate",
            AblationStage::Prioritization => "+ Prioritization",
            AblationStage::Full => "+ Relational (Full)",
        }
    }
}

impl FromStr for AblationStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(AblationStage::Base),
            "candidate" => Ok(AblationStage::Candidate),
            "prioritization" => Ok(AblationStage::Prioritization),
            "full" | "relational" => Ok(AblationStage::Full),
            other => Err(format!("unknown ablation stage `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub task: Task,
    pub strategy: Strategy,
    pub flags: AblationFlags,
    /// Hard limit on prompt length in characters; history is cut from its tail.
    pub char_cap: Option<usize>,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { task: Task::Novel, strategy: Strategy::Evidence, flags: AblationFlags::default(), char_cap: None }
    }
}

impl PromptOptions {
    /// Flags after applying the strategy: non-evidence strategies always get
    /// candidates plus raw history.
    pub fn effective_flags(&self) -> AblationFlags {
        match self.strategy {
            Strategy::Evidence => self.flags,
            _ => AblationFlags { candidates: true, prioritization: false, relations: false },
        }
    }
}

/// Templates for both tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    pub novel: Template,
    pub overall: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            novel: Template::parse(NOVEL_TEMPLATE).expect("bundled novel template"),
            overall: Template::parse(OVERALL_TEMPLATE).expect("bundled overall template"),
        }
    }
}

impl PromptTemplates {
    pub fn from_texts(novel: &str, overall: &str) -> Result<Self, PromptError> {
        let novel = Template::parse(novel)?;
        let overall = Template::parse(overall)?;
        for t in [&novel, &overall] {
            t.require(&["candidates"])?;
        }
        Ok(Self { novel, overall })
    }

    /// Loads `novel.txt` and `overall.txt` from `dir`, falling back to the
    /// bundled text for whichever is absent.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let read = |name: &str, fallback: &str| -> Result<String, PromptError> {
            let path = dir.as_ref().join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(e) => Err(PromptError::TemplateFile { path: path.display().to_string(), reason: e.to_string() }),
            }
        };
        Self::from_texts(&read("novel.txt", NOVEL_TEMPLATE)?, &read("overall.txt", OVERALL_TEMPLATE)?)
    }

    fn for_task(&self, task: Task) -> &Template {
        match task {
            Task::Novel => &self.novel,
            Task::Overall => &self.overall,
        }
    }
}

/// A composed prompt together with the structure it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: Task,
    pub strategy: Strategy,
    /// `(section name, rendered text)` in template order.
    pub sections: Vec<(String, String)>,
    pub candidate_names: Vec<String>,
    pub days_since_last_visit: u32,
    pub text: String,
}

/// Display names for a candidate set, in candidate order. Codes missing from
/// the ontology are shown by id.
pub fn candidate_names(candidates: &CandidateSet, ontology: &Ontology) -> Vec<NamedCandidate> {
    candidates
        .codes()
        .map(|c| NamedCandidate { id: c.clone(), name: ontology.ccs_name(c.as_str()).unwrap_or(c.as_str()).to_string() })
        .collect()
}

fn quote(s: &str) -> String {
    format!("\"{s}\"")
}

fn icd_name<'a>(ontology: &'a Ontology, id: &'a str) -> &'a str {
    ontology.icd_name(id).unwrap_or(id)
}

fn visit_items(visit: &Visit, ontology: &Ontology) -> String {
    visit.icd.iter().map(|i| quote(icd_name(ontology, i.as_str()))).collect::<Vec<_>>().join(", ")
}

fn raw_history_lines(visits: &[Visit], ontology: &Ontology) -> Vec<String> {
    visits
        .iter()
        .enumerate()
        .map(|(t, v)| format!("Visit {} (day {}): {}", t + 1, v.day, visit_items(v, ontology)))
        .collect()
}

fn prioritized_lines(history: &PrioritizedHistory, ontology: &Ontology) -> Vec<String> {
    let mut lines: Vec<String> = history
        .groups
        .iter()
        .filter(|g| !g.icds.is_empty())
        .map(|g| {
            let icds = g.icds.iter().map(|i| quote(icd_name(ontology, i.as_str()))).collect::<Vec<_>>().join(", ");
            let name = ontology.ccs_name(g.ccs.as_str()).unwrap_or(g.ccs.as_str());
            format!("[{{{icds}}} BELONG TO {}]", quote(name))
        })
        .collect();
    if !history.unmapped.is_empty() {
        let icds = history.unmapped.iter().map(|i| quote(icd_name(ontology, i.as_str()))).collect::<Vec<_>>().join(", ");
        lines.push(format!("[{{{icds}}} WITHOUT A LISTED CCS]"));
    }
    lines
}

fn relation_lines(relations: &RelationalEvidence, ontology: &Ontology) -> Vec<String> {
    relations
        .links
        .iter()
        .map(|l| {
            let h = ontology.ccs_name(l.historical.as_str()).unwrap_or(l.historical.as_str());
            let c = ontology.ccs_name(l.candidate.as_str()).unwrap_or(l.candidate.as_str());
            format!("{} ⇒ {}", quote(h), quote(c))
        })
        .collect()
}

fn join_or_none(lines: &[String]) -> String {
    if lines.is_empty() {
        "None".to_string()
    } else {
        lines.join("\n")
    }
}

/// Builds the prompt for one instance.
///
/// `prioritized` and `relations` are used only when the effective flags
/// enable them; `None` where a flag is on renders that section as `None`.
/// For the novel task the history shown is the last input visit only.
pub fn compose_prompt(
    instance: &PredictionInstance,
    prioritized: Option<&PrioritizedHistory>,
    relations: Option<&RelationalEvidence>,
    candidates: &CandidateSet,
    ontology: &Ontology,
    options: &PromptOptions,
    templates: &PromptTemplates,
) -> Result<PromptSpec, PromptError> {
    if candidates.mode != options.task {
        return Err(PromptError::TaskMismatch { task: options.task, mode: candidates.mode });
    }
    if candidates.is_empty() {
        return Err(PromptError::NoCandidates);
    }
    let flags = options.effective_flags();
    let names = candidate_names(candidates, ontology);
    let days = instance.days_since_last_visit();

    // history items as separate lines so the cap can drop them from the tail
    let history_key = match options.task {
        Task::Novel => "last_visit",
        Task::Overall => "history",
    };
    let mut raw: Vec<String> = match options.task {
        Task::Novel => vec![visit_items(instance.last_input_visit(), ontology)],
        Task::Overall => raw_history_lines(&instance.input_visits, ontology),
    };
    let mut prio: Option<Vec<String>> = flags
        .prioritization
        .then(|| prioritized.map(|p| prioritized_lines(p, ontology)).unwrap_or_default());
    let show_raw = options.task == Task::Novel || prio.is_none();

    let mut fixed: BTreeMap<&str, String> = BTreeMap::new();
    fixed.insert("days_since_last_visit", days.to_string());
    fixed.insert(
        "candidates",
        names.iter().enumerate().map(|(i, n)| format!("{}. {}", i + 1, n.name)).collect::<Vec<_>>().join("\n"),
    );
    if flags.relations {
        let lines = relations.map(|r| relation_lines(r, ontology)).unwrap_or_default();
        fixed.insert("relations", join_or_none(&lines));
    }
    fixed.insert(
        "extra_instructions",
        if options.strategy == Strategy::Cot { COT_LINE.to_string() } else { String::new() },
    );

    let template = templates.for_task(options.task);
    let render = |raw: &[String], prio: &Option<Vec<String>>, cut: bool| {
        let mut values = fixed.clone();
        let mark = |mut v: Vec<String>| {
            if cut {
                v.push(TRUNCATION_MARK.to_string());
            }
            join_or_none(&v)
        };
        if show_raw {
            values.insert(history_key, mark(raw.to_vec()));
        }
        if let Some(p) = prio {
            values.insert("prioritized_history", mark(p.clone()));
        }
        let sections = template.render(&values);
        let text = sections.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n\n") + "\n";
        (sections, text)
    };

    let (mut sections, mut text) = render(&raw, &prio, false);
    if let Some(cap) = options.char_cap {
        // prioritized lines go first, then the raw history
        while text.chars().count() > cap {
            let popped = match &mut prio {
                Some(p) if !p.is_empty() => p.pop().is_some(),
                _ => raw.pop().is_some(),
            };
            if !popped {
                break;
            }
            (sections, text) = render(&raw, &prio, true);
        }
    }

    Ok(PromptSpec {
        task: options.task,
        strategy: options.strategy,
        sections,
        candidate_names: names.into_iter().map(|n| n.name).collect(),
        days_since_last_visit: days,
        text,
    })
}
