//! Deep-model-guided evidence extraction and LLM re-ranking for next-visit
//! diagnosis prediction from longitudinal EHR records.

pub mod ehr;
pub mod backend;
pub mod evidence;
pub mod prompting;
pub mod llm;
pub mod eval;
pub mod pipeline;
