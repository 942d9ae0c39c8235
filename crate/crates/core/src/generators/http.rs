//! OpenAI-compatible chat-completions client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::physical::ModelSpec;

use super::backend::{Backend, GenerationResult};
use super::prompts::PromptRequest;
use super::tokens::count_tokens;

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub path: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    /// Used for models without their own endpoint.
    pub default_endpoint: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            path: "/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(120),
            default_endpoint: None,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    calls: AtomicU64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            config,
            agent,
            calls: AtomicU64::new(0),
        }
    }

    pub fn request_body(model: &ModelSpec, req: &PromptRequest) -> serde_json::Value {
        let user = if req.image_payloads.is_empty() {
            json!(req.user_text)
        } else {
            let mut parts = vec![json!({"type": "text", "text": req.user_text})];
            for img in &req.image_payloads {
                let b64 = base64::engine::general_purpose::STANDARD.encode(img);
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }));
            }
            json!(parts)
        };
        json!({
            "model": model.model_id,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": user},
            ],
            "max_tokens": req.max_output_tokens,
            "temperature": 0,
        })
    }

    fn url(&self, model: &ModelSpec) -> Result<String> {
        let base = model
            .endpoint
            .as_deref()
            .or(self.config.default_endpoint.as_deref())
            .ok_or_else(|| Error::Backend(format!("no endpoint for `{}`", model.model_id)))?;
        Ok(format!("{}{}", base.trim_end_matches('/'), self.config.path))
    }

    fn attempt(&self, url: &str, body: &serde_json::Value) -> std::result::Result<ChatResponse, (bool, String)> {
        let mut call = self.agent.post(url);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("http status {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((false, format!("http status {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<ChatResponse>()
            .map_err(|e| (false, format!("malformed response: {e}")))
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        "http".into()
    }

    fn generate(&self, model: &ModelSpec, req: &PromptRequest) -> Result<GenerationResult> {
        let url = self.url(model)?;
        let body = Self::request_body(model, req);
        let start = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.config.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.attempt(&url, &body) {
                Ok(resp) => {
                    let text = resp
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .unwrap_or_default();
                    let (tin, tout) = match resp.usage {
                        Some(u) => (u.prompt_tokens, u.completion_tokens),
                        None => (req.prompt_tokens() as u64, count_tokens(&text) as u64),
                    };
                    let latency = start.elapsed().as_secs_f64();
                    return Ok(GenerationResult::priced(text, tin, tout, latency, model));
                }
                Err((retryable, msg)) => {
                    log::warn!("{} attempt {}: {msg}", model.model_id, attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(Error::Backend(format!("{}: {last}", model.model_id)))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::prompts::{TaskKind, TaskMeta};
    use crate::physical::Tier;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) responses in order, returning the
    /// request bodies it saw.
    fn stub(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            seen
        });
        (addr, handle)
    }

    fn request() -> PromptRequest {
        PromptRequest {
            model_id: "m".into(),
            system_text: "sys".into(),
            user_text: "hello world".into(),
            image_payloads: vec![],
            max_output_tokens: 16,
            meta: TaskMeta {
                kind: TaskKind::Filter,
                op_id: "op01".into(),
                source_id: "s".into(),
                fields: vec![],
                predicate: None,
                cardinality: None,
                samples: vec![],
            },
        }
    }

    fn config() -> HttpConfig {
        HttpConfig {
            initial_backoff: Duration::from_millis(1),
            api_key_env: "SEMPIPE_TEST_UNSET_KEY".into(),
            ..HttpConfig::default()
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"{\"sender\": \"a@b.c\"}"}}],"usage":{"prompt_tokens":1000,"completion_tokens":20}}"#;

    #[test]
    fn round_trip_against_stub() {
        let (addr, handle) = stub(vec![(200, OK.into())]);
        let mut model = ModelSpec::new("m", Tier::Cheap, 5.0, 10.0);
        model.endpoint = Some(addr);
        let b = HttpBackend::new(config());
        let r = b.generate(&model, &request()).unwrap();
        assert_eq!(r.text, r#"{"sender": "a@b.c"}"#);
        assert_eq!((r.input_tokens, r.output_tokens), (1000, 20));
        assert!((r.usd - (0.005 + 0.0002)).abs() < 1e-12);
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][1]["content"], "hello world");
        assert_eq!(sent["max_tokens"], 16);
    }

    #[test]
    fn retries_then_succeeds() {
        let (addr, handle) = stub(vec![(500, "{}".into()), (429, "{}".into()), (200, OK.into())]);
        let mut model = ModelSpec::new("m", Tier::Cheap, 0.0, 0.0);
        model.endpoint = Some(addr);
        let b = HttpBackend::new(config());
        assert!(b.generate(&model, &request()).is_ok());
        assert_eq!(b.calls(), 3);
        handle.join().unwrap();
    }

    #[test]
    fn client_error_is_not_retried() {
        let (addr, handle) = stub(vec![(400, r#"{"error":"bad"}"#.into())]);
        let mut model = ModelSpec::new("m", Tier::Cheap, 0.0, 0.0);
        model.endpoint = Some(addr);
        let b = HttpBackend::new(config());
        assert!(matches!(b.generate(&model, &request()), Err(Error::Backend(_))));
        assert_eq!(b.calls(), 1);
        handle.join().unwrap();
    }

    #[test]
    fn images_become_content_parts() {
        let mut req = request();
        req.image_payloads = vec![vec![1, 2, 3]];
        let body = HttpBackend::request_body(&ModelSpec::new("v", Tier::Vision, 0.0, 0.0), &req);
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
    }
}
