//! Optional external model behind a chat-completions style endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::scripted::Observation;
use super::tools::{tool_catalog, ToolCall, ToolError};
use super::triggers::Invocation;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

const SYSTEM_PROMPT: &str = "You supervise an edge inference scheduler. You cannot dispatch tasks \
or read hidden device parameters. React to the invocation using only the provided tools. \
Return no tool calls when nothing needs to change.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT.as_millis() as u64
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// A call the model asked for, parsed or not.
#[derive(Debug)]
pub struct ProposedCall {
    pub name: String,
    pub arguments: Value,
    pub parsed: Result<ToolCall, ToolError>,
}

pub struct LlmAdapter {
    config: AdapterConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl LlmAdapter {
    pub fn new(config: AdapterConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        LlmAdapter { config, agent, api_key }
    }

    /// Asks for the next round of tool calls.
    pub fn round(&self, inv: &Invocation, previous: &[Observation]) -> Result<Vec<ProposedCall>, AdapterError> {
        let body = self.request_body(inv, previous);
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| AdapterError::Transport(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| AdapterError::Malformed(e.to_string()))?;
        parse_response(&v)
    }

    fn request_body(&self, inv: &Invocation, previous: &[Observation]) -> Value {
        let mut messages = vec![
            json!({ "role": "system", "content": SYSTEM_PROMPT }),
            json!({ "role": "user", "content": serde_json::to_string(inv).unwrap_or_default() }),
        ];
        if !previous.is_empty() {
            let calls: Vec<Value> = previous
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    json!({
                        "id": format!("call_{i}"),
                        "type": "function",
                        "function": { "name": o.call.name(), "arguments": o.call.arguments().to_string() },
                    })
                })
                .collect();
            messages.push(json!({ "role": "assistant", "content": Value::Null, "tool_calls": calls }));
            for (i, o) in previous.iter().enumerate() {
                let content = match &o.result {
                    Ok(v) => v.to_string(),
                    Err(e) => json!({ "error": e }).to_string(),
                };
                messages.push(json!({ "role": "tool", "tool_call_id": format!("call_{i}"), "content": content }));
            }
        }
        json!({ "model": self.config.model, "messages": messages, "tools": tool_catalog() })
    }
}

/// Extracts tool calls from a chat-completions response body.
pub fn parse_response(v: &Value) -> Result<Vec<ProposedCall>, AdapterError> {
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| AdapterError::Malformed("no choices[0].message".into()))?;
    let Some(calls) = message.get("tool_calls").filter(|c| !c.is_null()) else {
        return Ok(Vec::new());
    };
    let calls = calls
        .as_array()
        .ok_or_else(|| AdapterError::Malformed("tool_calls is not a list".into()))?;
    Ok(calls
        .iter()
        .map(|c| {
            let name = c
                .pointer("/function/name")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let raw = c.pointer("/function/arguments").cloned().unwrap_or(Value::Null);
            // Arguments usually arrive as a JSON-encoded string.
            let arguments = match &raw {
                Value::String(s) => serde_json::from_str(s).unwrap_or(Value::String(s.clone())),
                other => other.clone(),
            };
            let parsed = if arguments.is_string() {
                Err(ToolError::BadArguments {
                    tool: name.clone(),
                    message: "arguments are not JSON".into(),
                })
            } else {
                ToolCall::parse(&name, arguments.clone())
            };
            ProposedCall {
                name,
                arguments,
                parsed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_string_and_object_arguments() {
        let v = json!({ "choices": [{ "message": { "tool_calls": [
            { "function": { "name": "set_device_risky", "arguments": "{\"device\": 0, \"ttl\": 0}" } },
            { "function": { "name": "clear_device_risky", "arguments": { "device": 1 } } },
            { "function": { "name": "launch", "arguments": "{}" } },
            { "function": { "name": "switch_router", "arguments": "not json" } },
        ] } }] });
        let calls = parse_response(&v).unwrap();
        assert_eq!(calls.len(), 4);
        // Bounds are checked at execution, not parse time.
        assert!(calls[0].parsed.is_ok());
        assert!(calls[1].parsed.is_ok());
        assert!(matches!(calls[2].parsed, Err(ToolError::UnknownTool(_))));
        assert!(matches!(calls[3].parsed, Err(ToolError::BadArguments { .. })));
    }

    #[test]
    fn no_tool_calls_means_done() {
        let v = json!({ "choices": [{ "message": { "content": "nothing to do" } }] });
        assert!(parse_response(&v).unwrap().is_empty());
        assert!(parse_response(&json!({ "error": "x" })).is_err());
    }
}
