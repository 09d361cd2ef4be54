//! Chat-completions backend with schema-constrained output.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Map, Value};

use crate::digest::sha256_hex;
use crate::projection::SuctionCandidate;
use crate::prompting::{AnnotatedImage, PromptBundle};

use super::replay::{ReplayRecord, ReplayWriter};
use super::{Decider, DeciderConfig, Decision, Query, Refusal, VlmDecision, VlmError};

const SCHEMA_NAME: &str = "suction_point_selection";
const FIELDS: [&str; 4] = [
    "selected_point_numbers",
    "detected_items",
    "rationale",
    "target_found",
];

/// JSON schema every reply must satisfy.
pub fn response_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "selected_point_numbers": {
                "type": "array",
                "items": { "type": "integer" },
                "description": "Circled point numbers to use, best first."
            },
            "detected_items": {
                "type": "array",
                "items": { "type": "string" },
                "description": "Names of the items recognized in the image."
            },
            "rationale": { "type": "string" },
            "target_found": { "type": "boolean" }
        },
        "required": FIELDS,
        "additionalProperties": false
    })
}

/// Request body: one user message with role, premise and directive text
/// parts followed by the annotated image as a base64 PNG.
pub fn build_request(image: &AnnotatedImage, prompt: &PromptBundle, cfg: &DeciderConfig) -> Result<Value, VlmError> {
    let png = image
        .pixels
        .to_png_bytes()
        .map_err(|e| VlmError::Config(format!("cannot encode image: {e}")))?;
    let data_url = format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    );
    let response_format = if cfg.live.strict_schema {
        json!({
            "type": "json_schema",
            "json_schema": {
                "name": SCHEMA_NAME,
                "strict": true,
                "schema": response_schema()
            }
        })
    } else {
        json!({ "type": "json_object" })
    };
    Ok(json!({
        "model": cfg.live.model,
        "temperature": 0,
        "messages": [{
            "role": "user",
            "content": [
                { "type": "text", "text": prompt.role },
                { "type": "text", "text": prompt.premise },
                { "type": "text", "text": prompt.directive },
                { "type": "image_url", "image_url": { "url": data_url } }
            ]
        }],
        "response_format": response_format
    }))
}

fn violation(msg: impl Into<String>) -> VlmError {
    VlmError::SchemaViolation(msg.into())
}

fn validate_reply(obj: &Map<String, Value>) -> Result<(Vec<u32>, Vec<String>, String, bool), VlmError> {
    for key in obj.keys() {
        if !FIELDS.contains(&key.as_str()) {
            return Err(violation(format!("unexpected field {key:?}")));
        }
    }
    let get = |k: &str| obj.get(k).ok_or_else(|| violation(format!("missing field {k:?}")));
    let labels = get("selected_point_numbers")?
        .as_array()
        .ok_or_else(|| violation("selected_point_numbers is not an array"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| violation(format!("point number {v} is not a non-negative integer")))
        })
        .collect::<Result<Vec<u32>, _>>()?;
    let items = get("detected_items")?
        .as_array()
        .ok_or_else(|| violation("detected_items is not an array"))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| violation("detected_items holds a non-string"))
        })
        .collect::<Result<Vec<String>, _>>()?;
    let rationale = get("rationale")?
        .as_str()
        .ok_or_else(|| violation("rationale is not a string"))?
        .to_string();
    let found = get("target_found")?
        .as_bool()
        .ok_or_else(|| violation("target_found is not a boolean"))?;
    Ok((labels, items, rationale, found))
}

/// Parses a chat-completions reply body into a decision and checks the
/// selected labels against the offered candidates.
pub fn parse_response(body: &str, candidates: &[SuctionCandidate]) -> Result<Decision, VlmError> {
    let root: Value = serde_json::from_str(body).map_err(|e| violation(format!("body is not JSON: {e}")))?;
    let message = root
        .pointer("/choices/0/message")
        .ok_or_else(|| violation("no choices[0].message"))?;
    if let Some(reason) = message.get("refusal").and_then(Value::as_str) {
        return Ok(Decision::Refused(Refusal {
            reason: reason.to_string(),
        }));
    }
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| violation("message content is not a string"))?;
    let reply: Value =
        serde_json::from_str(content).map_err(|e| violation(format!("content is not JSON: {e}")))?;
    let obj = reply
        .as_object()
        .ok_or_else(|| violation("content is not a JSON object"))?;
    let (labels, items, rationale, found) = validate_reply(obj)?;
    let decision = if found {
        Decision::Selected(VlmDecision {
            selected_labels: labels,
            detected_items: items,
            rationale,
            raw_response: content.to_string(),
        })
    } else {
        Decision::Refused(Refusal { reason: rationale })
    };
    decision.check_labels(candidates)?;
    Ok(decision)
}

pub struct LiveDecider {
    cfg: DeciderConfig,
    agent: ureq::Agent,
    recorder: Option<ReplayWriter>,
}

impl LiveDecider {
    pub fn new(cfg: DeciderConfig) -> Result<Self, VlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let recorder = match &cfg.live.record_log {
            Some(path) => Some(ReplayWriter::open(path)?),
            None => None,
        };
        Ok(Self {
            cfg,
            agent,
            recorder,
        })
    }

    fn post(&self, body: &str) -> Result<String, VlmError> {
        let key = std::env::var(&self.cfg.live.api_key_env).ok();
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut req = self
                .agent
                .post(&self.cfg.live.endpoint)
                .header("Content-Type", "application/json");
            if let Some(k) = &key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| e.to_string());
                    match (status, text) {
                        (200..=299, Ok(text)) => return Ok(text),
                        (429 | 500..=599, t) => {
                            last = format!("HTTP {status}: {}", t.unwrap_or_default());
                        }
                        (_, Ok(text)) => return Err(VlmError::Http { status, body: text }),
                        (_, Err(e)) => last = e,
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < attempts {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
        }
        Err(VlmError::Transport {
            attempts,
            message: last,
        })
    }
}

impl Decider for LiveDecider {
    fn decide(&mut self, q: &Query<'_>) -> Result<Decision, VlmError> {
        let body = build_request(q.image, q.prompt, &self.cfg)?.to_string();
        let reply = self.post(&body)?;
        let decision = parse_response(&reply, q.candidates)?;
        if let Some(rec) = &self.recorder {
            rec.append(&ReplayRecord {
                key: q.scene_key(),
                request_digest: sha256_hex(body.as_bytes()),
                decision: decision.clone(),
            })?;
        }
        Ok(decision)
    }
}
