use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// What an LLM call is for. Part of the request, so part of its key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmTask {
    GenerateQueries,
    Extract5w1h,
    AssessCluster,
    Explain,
}

impl fmt::Display for LlmTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LlmTask::GenerateQueries => "generate_queries",
            LlmTask::Extract5w1h => "extract_5w1h",
            LlmTask::AssessCluster => "assess_cluster",
            LlmTask::Explain => "explain",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repair {
    pub previous_output: String,
    pub error: String,
}

/// A structured prompt: fixed instructions, a JSON input and the JSON
/// schema the answer must follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub task: LlmTask,
    pub instructions: String,
    pub input: Value,
    pub output_schema: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<Repair>,
}

impl LlmRequest {
    pub fn new(task: LlmTask, instructions: impl Into<String>, input: Value, output_schema: Value) -> Self {
        Self {
            task,
            instructions: instructions.into(),
            input,
            output_schema,
            repair: None,
        }
    }

    pub(crate) fn with_repair(&self, previous_output: &str, error: &str) -> Self {
        Self {
            repair: Some(Repair {
                previous_output: previous_output.to_string(),
                error: error.to_string(),
            }),
            ..self.clone()
        }
    }

    /// Single user message for chat-style models.
    pub fn render_prompt(&self) -> String {
        let mut prompt = format!(
            "{}\n\nInput:\n{}\n\nRespond with a single JSON object matching this JSON schema:\n{}",
            self.instructions.trim(),
            serde_json::to_string_pretty(&self.input).unwrap_or_default(),
            serde_json::to_string_pretty(&self.output_schema).unwrap_or_default(),
        );
        if let Some(repair) = &self.repair {
            prompt.push_str(&format!(
                "\n\nYour previous answer was rejected ({}). Previous answer:\n{}\nReturn corrected JSON only.",
                repair.error, repair.previous_output
            ));
        }
        prompt
    }
}

/// An LLM answer shape: its JSON schema plus semantic checks serde cannot
/// express.
pub trait LlmOutput: DeserializeOwned {
    fn schema() -> Value;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structured<T> {
    pub value: T,
    pub retry_count: u32,
}

pub(crate) fn parse_output<T: LlmOutput>(content: &str) -> Result<T, String> {
    let trimmed = strip_code_fence(content.trim());
    let value: T = serde_json::from_str(trimmed).map_err(|e| format!("invalid JSON: {e}"))?;
    value.validate()?;
    Ok(value)
}

// Models sometimes wrap JSON in a markdown fence.
fn strip_code_fence(text: &str) -> &str {
    let Some(rest) = text.strip_prefix("```") else {
        return text;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}
