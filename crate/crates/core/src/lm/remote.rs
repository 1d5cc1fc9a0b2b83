//! HTTP client for an external generation service.
//!
//! Request: `POST <endpoint>` with body
//! `{"prompt": string, "n": int, "max_tokens": int, "top_k": int}`.
//! Response: `{"candidates": [string, ...]}` with exactly `n` entries.
//! Any non-2xx status is a failure.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LmError, ProposalModel, RawContinuation, SamplingParams};
use crate::corpus::detokenize;
use crate::seed::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error("request to {endpoint} timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },
    #[error("transport error talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport { endpoint: String, attempts: u32, message: String },
    #[error("generation service returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("candidate count mismatch: requested {expected}, received {got}")]
    CountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first on timeout or transport failure.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { endpoint: "http://127.0.0.1:8080/generate".into(), timeout_ms: 30_000, retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub n: usize,
    pub max_tokens: usize,
    pub top_k: usize,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    candidates: Vec<String>,
}

enum Attempt {
    Done(Result<Vec<String>, RemoteError>),
    Retry(RemoteError),
}

fn attempt(agent: &ureq::Agent, endpoint: &str, body: &str, attempts: u32) -> Attempt {
    let result = agent.post(endpoint).header("content-type", "application/json").send(body);
    let mut resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => {
            return Attempt::Retry(RemoteError::Timeout { endpoint: endpoint.into(), attempts })
        }
        Err(ureq::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            return Attempt::Retry(RemoteError::Timeout { endpoint: endpoint.into(), attempts })
        }
        Err(e) => {
            return Attempt::Retry(RemoteError::Transport { endpoint: endpoint.into(), attempts, message: e.to_string() })
        }
    };
    let code = resp.status().as_u16();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(ureq::Error::Timeout(_)) => {
            return Attempt::Retry(RemoteError::Timeout { endpoint: endpoint.into(), attempts })
        }
        Err(e) => return Attempt::Done(Err(RemoteError::Malformed(format!("unreadable body: {e}")))),
    };
    if !(200..300).contains(&code) {
        return Attempt::Done(Err(RemoteError::Status { code, body: text }));
    }
    Attempt::Done(
        serde_json::from_str::<GenerateResponse>(&text)
            .map(|r| r.candidates)
            .map_err(|e| RemoteError::Malformed(e.to_string())),
    )
}

/// Send one generation request, retrying timeouts and transport failures up
/// to `config.retries` extra times.
pub fn remote_generate(config: &RemoteConfig, request: &GenerateRequest) -> Result<Vec<RawContinuation>, RemoteError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::to_string(request).map_err(|e| RemoteError::Malformed(e.to_string()))?;
    let mut attempts = 0;
    loop {
        attempts += 1;
        match attempt(&agent, &config.endpoint, &body, attempts) {
            Attempt::Done(Ok(candidates)) => {
                if candidates.len() != request.n {
                    return Err(RemoteError::CountMismatch { expected: request.n, got: candidates.len() });
                }
                return Ok(candidates.iter().map(|c| RawContinuation::from_text(c)).collect());
            }
            Attempt::Done(Err(e)) => return Err(e),
            Attempt::Retry(e) => {
                if attempts > config.retries {
                    return Err(e);
                }
                log::warn!("{e}; retrying");
            }
        }
    }
}

/// Proposal model backed by a remote service; token embeddings come from a
/// local model.
#[derive(Debug, Clone)]
pub struct RemoteModel<E> {
    pub config: RemoteConfig,
    pub embedder: E,
}

impl<E: ProposalModel> ProposalModel for RemoteModel<E> {
    fn embedding_dim(&self) -> usize {
        self.embedder.embedding_dim()
    }

    fn token_embedding(&self, token: &str) -> &[f64] {
        self.embedder.token_embedding(token)
    }

    fn generate(
        &self,
        prompt: &[String],
        count: usize,
        params: &SamplingParams,
        _rng: &mut SeededRng,
    ) -> Result<Vec<RawContinuation>, LmError> {
        if count == 0 || params.top_k == 0 {
            return Err(LmError::BadSamplingParams);
        }
        let request = GenerateRequest {
            prompt: detokenize(prompt),
            n: count,
            max_tokens: params.max_tokens,
            top_k: params.top_k,
        };
        Ok(remote_generate(&self.config, &request)?)
    }

    fn sequence_logprob(&self, _tokens: &[String]) -> Option<f64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_serializes_with_documented_keys() {
        let r = GenerateRequest { prompt: "Alex ran.".into(), n: 25, max_tokens: 20, top_k: 1000 };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"prompt":"Alex ran.","n":25,"max_tokens":20,"top_k":1000}"#
        );
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let config = RemoteConfig { endpoint: format!("http://127.0.0.1:{port}/g"), timeout_ms: 2000, retries: 1 };
        let req = GenerateRequest { prompt: "x".into(), n: 1, max_tokens: 5, top_k: 5 };
        match remote_generate(&config, &req) {
            Err(RemoteError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
