use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, CallError};

/// OpenAI-compatible chat-completion endpoint.
///
/// The bearer token is read from the environment variable `token_env` on
/// every call, so a missing token fails before any network traffic.
#[derive(Debug)]
pub struct RemoteBackend {
    client: Client,
    endpoint: String,
    model: String,
    token_env: String,
}

impl RemoteBackend {
    pub fn new(endpoint: String, model: String, token_env: String, timeout: Duration) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(RemoteBackend { client, endpoint, model, token_env })
    }

    pub fn request_body(&self, request: &BackendRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": request.prompt_text})];
        if let Some(image) = &request.image {
            content.push(json!({"type": "image_url", "image_url": {"url": image.data_uri()}}));
        }
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        })
    }
}

fn extract_text(body: &Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        // Some servers return content parts even for plain text replies.
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::REQUEST_TIMEOUT || status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

impl Backend for RemoteBackend {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError> {
        let token = std::env::var(&self.token_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| CallError::Fatal(BackendError::Auth(format!("environment variable {} is not set", self.token_env))))?;

        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(token)
            .json(&self.request_body(request))
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() || e.is_request() {
                    CallError::Transient(e.to_string())
                } else {
                    CallError::Fatal(BackendError::Protocol(e.to_string()))
                }
            })?;

        let status = response.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(CallError::Fatal(BackendError::Auth(format!("endpoint returned {status}"))));
        }
        if is_transient(status) {
            return Err(CallError::Transient(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(CallError::Fatal(BackendError::Protocol(format!("endpoint returned {status}: {body}"))));
        }
        let body: Value = response
            .json()
            .map_err(|e| CallError::Fatal(BackendError::Protocol(format!("reply is not JSON: {e}"))))?;
        extract_text(&body).ok_or_else(|| CallError::Fatal(BackendError::Protocol(format!("no message content in reply: {body}"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Decoding, ImagePayload};

    #[test]
    fn body_shape() {
        let b = RemoteBackend::new("http://x".into(), "gpt-4o-mini".into(), "T".into(), Duration::from_secs(1)).unwrap();
        let req = BackendRequest::new(
            "r",
            None,
            "hello".into(),
            Some(ImagePayload::new(vec![1, 2, 3], "image/png")),
            Decoding { temperature: 0.0, max_tokens: 16 },
            None,
        );
        let body = b.request_body(&req);
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["max_tokens"], 16);
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 2);
        assert_eq!(content[0]["text"], "hello");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AQID");
    }

    #[test]
    fn content_extraction() {
        let v = json!({"choices":[{"message":{"content":"TRUE"}}]});
        assert_eq!(extract_text(&v).as_deref(), Some("TRUE"));
        let v = json!({"choices":[{"message":{"content":[{"type":"text","text":"7"}]}}]});
        assert_eq!(extract_text(&v).as_deref(), Some("7"));
        assert_eq!(extract_text(&json!({"error":"x"})), None);
    }
}
