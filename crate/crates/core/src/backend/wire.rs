//! Client for OpenAI-compatible `POST /v1/chat/completions` endpoints.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, InFlightLimit, ModelRequest, ModelResponse, TokenLogprob, Usage};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SG_API_KEY";

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ReplyMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenInfo>>,
}

#[derive(Debug, Deserialize)]
struct TokenInfo {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

pub struct ChatCompletionsBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlightLimit,
}

impl ChatCompletionsBackend {
    /// `base_url` may or may not already end in `/v1`.
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("chat:{model}@{base}"),
            url,
            model: model.to_string(),
            api_key,
            agent,
            in_flight: InFlightLimit::new(max_in_flight),
        }
    }

    /// Reads the API key from `SG_API_KEY`, if set.
    pub fn from_env(base_url: &str, model: &str, timeout: Duration, max_in_flight: usize) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(base_url, model, key, timeout, max_in_flight)
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Backend for ChatCompletionsBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.decoding.validate()?;
        let decoding = &request.decoding;
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt.text,
            }],
            temperature: decoding.temperature,
            max_tokens: decoding.max_new_tokens,
            logprobs: decoding.want_logprobs,
            top_logprobs: decoding.want_logprobs.then_some(decoding.top_logprobs_k),
        };

        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let mut http = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            http = http.header("Authorization", &format!("Bearer {key}"));
        }
        let mut reply = http
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = reply.status().as_u16();
        let text = reply
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("malformed reply: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("reply has no choices".into()))?;

        let answer_token_logprobs = if decoding.want_logprobs {
            let first = choice
                .logprobs
                .and_then(|l| l.content)
                .and_then(|c| c.into_iter().next())
                .ok_or_else(|| {
                    BackendError::Unsupported("endpoint returned no logprobs".into())
                })?;
            let mut alternatives: Vec<TokenLogprob> = if first.top_logprobs.is_empty() {
                vec![TokenLogprob {
                    token: first.token,
                    logprob: first.logprob,
                }]
            } else {
                first
                    .top_logprobs
                    .into_iter()
                    .map(|t| TokenLogprob {
                        token: t.token,
                        logprob: t.logprob,
                    })
                    .collect()
            };
            for alt in &mut alternatives {
                // Some servers report tiny positive values for certain tokens.
                if alt.logprob > 0.0 && alt.logprob < 1e-6 {
                    alt.logprob = 0.0;
                }
            }
            alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            Some(alternatives)
        } else {
            None
        };

        let response = ModelResponse {
            text: choice.message.content.unwrap_or_default(),
            answer_token_logprobs,
            latency_ms,
            backend_id: self.id.clone(),
            usage: parsed.usage,
        };
        response.check_logprobs()?;
        Ok(response)
    }
}
