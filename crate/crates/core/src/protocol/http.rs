use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{GeneratorBackend, GeneratorError, TextCompletion};
use crate::vocab::{join_tokens, tokenize, Token};

/// Instruction prepended to every prompt sent to a remote model.
pub const COT_INSTRUCTION: &str = "Think step by step and give a short rationale before the final answer.";

#[derive(Debug, Clone)]
pub struct HttpGeneratorConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model: String,
    /// Total attempts, including the first, on HTTP 429.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpGeneratorConfig {
    pub fn new(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key_env: api_key_env.into(),
            model: "default".into(),
            max_attempts: 5,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }
}

/// Chat-completions style HTTP backend.
///
/// Posts `{"model", "messages": [system: COT instruction, user: prompt]}` and
/// accepts `choices[0].message.content`, `choices[0].text`, a top-level
/// `text` field, or a plain-text body.
pub struct HttpGenerator {
    id: String,
    config: HttpGeneratorConfig,
    api_key: String,
    client: Client,
    // One request in flight per adapter.
    gate: Mutex<()>,
}

impl HttpGenerator {
    /// Reads the API key up front; a missing key fails before any network call.
    pub fn new(config: HttpGeneratorConfig) -> Result<Self, GeneratorError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GeneratorError::Config(format!("environment variable `{}` is not set", config.api_key_env)))?;
        if config.max_attempts == 0 {
            return Err(GeneratorError::Config("max_attempts must be at least 1".into()));
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GeneratorError::Config(e.to_string()))?;
        Ok(Self {
            id: format!("http:{}", config.model),
            config,
            api_key,
            client,
            gate: Mutex::new(()),
        })
    }

    fn post(&self, user: &str) -> Result<String, GeneratorError> {
        let _guard = self.gate.lock().expect("http gate poisoned");
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": COT_INSTRUCTION},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let mut backoff = self.config.initial_backoff;
        for attempt in 1..=self.config.max_attempts {
            let resp = self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .map_err(|e| GeneratorError::Http(e.to_string()))?;
            let status = resp.status();
            if status == StatusCode::TOO_MANY_REQUESTS {
                if attempt == self.config.max_attempts {
                    return Err(GeneratorError::RetriesExhausted {
                        attempts: attempt,
                        last_status: status.as_u16(),
                    });
                }
                thread::sleep(backoff);
                backoff *= 2;
                continue;
            }
            if !status.is_success() {
                return Err(GeneratorError::Status(status.as_u16()));
            }
            let text = resp.text().map_err(|e| GeneratorError::Http(e.to_string()))?;
            return extract_text(&text);
        }
        unreachable!("loop returns on the last attempt")
    }
}

fn extract_text(body: &str) -> Result<String, GeneratorError> {
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        // Not JSON: treat the body itself as the completion.
        Err(_) => return Ok(body.to_string()),
    };
    let found = value
        .pointer("/choices/0/message/content")
        .or_else(|| value.pointer("/choices/0/text"))
        .or_else(|| value.get("text"))
        .and_then(Value::as_str);
    match found {
        Some(s) => Ok(s.to_string()),
        None if value.is_string() => Ok(value.as_str().unwrap_or_default().to_string()),
        None => Err(GeneratorError::Schema(format!(
            "no completion text in response: {}",
            truncate(body, 200)
        ))),
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl GeneratorBackend for HttpGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, GeneratorError> {
        let text = self.post(&join_tokens(prompt))?;
        Ok(tokenize(&text))
    }
}

impl TextCompletion for HttpGenerator {
    fn complete(&self, prompt: &str) -> Result<String, GeneratorError> {
        self.post(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_known_shapes() {
        let chat = r#"{"choices":[{"message":{"role":"assistant","content":"dams hold water"}}]}"#;
        assert_eq!(extract_text(chat).unwrap(), "dams hold water");
        assert_eq!(extract_text(r#"{"choices":[{"text":"x y"}]}"#).unwrap(), "x y");
        assert_eq!(extract_text(r#"{"text":"plain"}"#).unwrap(), "plain");
        assert_eq!(extract_text("just text").unwrap(), "just text");
        assert!(matches!(extract_text(r#"{"foo":1}"#), Err(GeneratorError::Schema(_))));
    }

    #[test]
    fn missing_key_fails_before_network() {
        let cfg = HttpGeneratorConfig::new("http://127.0.0.1:9/never", "FEDCOT_TEST_SURELY_UNSET_KEY");
        assert!(matches!(HttpGenerator::new(cfg), Err(GeneratorError::Config(_))));
    }
}
