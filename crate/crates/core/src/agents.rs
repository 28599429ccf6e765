//! Agent backends: a deterministic consensus mock and a chat-completions client.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, warn};

use crate::embedding::{rank_by_cosine, EmbeddingProvider};
use crate::http::{Transport, TransportError};
use crate::numerics::{Matrix, Vector};

pub const API_KEY_ENV: &str = "M2CL_API_KEY";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http { status: u16, body: String, attempts: usize },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: usize },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("unknown problem key {0:?}")]
    UnknownProblem(String),
    #[error("embedding failed: {0}")]
    Embedding(String),
}

/// Everything an agent sees for one turn.
#[derive(Debug, Clone)]
pub struct AgentContext<'a> {
    pub agent: usize,
    pub round: usize,
    pub problem_key: &'a str,
    pub problem_text: &'a str,
    pub instruction_text: &'a str,
    pub peer_texts: &'a [String],
    pub problem_embedding: &'a Matrix,
    pub instruction_embedding: &'a Matrix,
    pub peer_embeddings: &'a [Matrix],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    pub text: String,
    pub embedding: Matrix,
}

pub trait AgentBackend: Send + Sync {
    fn respond(&self, ctx: &AgentContext<'_>) -> Result<AgentResponse, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMockSpec {
    /// Weight on the peer mean, in `[0, 1]`.
    pub gamma: f64,
    /// Standard deviation of per-entry Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub answer_table: BTreeMap<String, Vec<Candidate>>,
}

/// Responds with `gamma * mean(peers) + (1 - gamma) * instruction + noise`
/// (the instruction stands in for the peer mean when there are no peers) and
/// names the candidate answer closest to that embedding.
pub struct ConsensusMock {
    spec: ConsensusMockSpec,
    candidates: BTreeMap<String, Vec<Vector>>,
}

impl ConsensusMock {
    pub fn new(spec: ConsensusMockSpec, provider: &dyn EmbeddingProvider) -> Result<Self, AgentError> {
        if !(0.0..=1.0).contains(&spec.gamma) {
            return Err(AgentError::Config(format!("gamma must lie in [0, 1], got {}", spec.gamma)));
        }
        if !(spec.noise >= 0.0) {
            return Err(AgentError::Config(format!("noise must be >= 0, got {}", spec.noise)));
        }
        if spec.answer_table.is_empty() || spec.answer_table.values().any(|c| c.is_empty()) {
            return Err(AgentError::Config("answer table must be non-empty for every problem".into()));
        }
        let mut candidates = BTreeMap::new();
        for (key, cands) in &spec.answer_table {
            let vecs = cands
                .iter()
                .map(|c| provider.embed_sentence(&c.text).map_err(|e| AgentError::Embedding(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            candidates.insert(key.clone(), vecs);
        }
        Ok(ConsensusMock { spec, candidates })
    }

    pub fn spec(&self) -> &ConsensusMockSpec {
        &self.spec
    }

    fn noise_seed(&self, ctx: &AgentContext<'_>) -> u64 {
        // FNV-1a over the turn identity, mixed with the mock's seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.spec.seed;
        for b in ctx
            .problem_key
            .bytes()
            .chain((ctx.agent as u64).to_le_bytes())
            .chain((ctx.round as u64).to_le_bytes())
        {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn response_embedding(&self, ctx: &AgentContext<'_>) -> Result<Matrix, AgentError> {
        let instr = ctx.instruction_embedding;
        let shape_err = |m: &Matrix| AgentError::Config(format!("embedding shape {:?} differs from instruction {:?}", m.shape(), instr.shape()));
        let mut peer_mean = Matrix::zeros(instr.rows(), instr.cols());
        if ctx.peer_embeddings.is_empty() {
            peer_mean = instr.clone();
        } else {
            for p in ctx.peer_embeddings {
                if p.shape() != instr.shape() {
                    return Err(shape_err(p));
                }
                peer_mean.axpy(1.0 / ctx.peer_embeddings.len() as f64, p).map_err(|_| shape_err(p))?;
            }
        }
        let g = self.spec.gamma;
        let mut out = peer_mean.scale(g);
        out.axpy(1.0 - g, instr).map_err(|_| shape_err(instr))?;
        if self.spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed(ctx));
            let normal = Normal::new(0.0, self.spec.noise).expect("noise validated");
            for v in out.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(out)
    }
}

impl AgentBackend for ConsensusMock {
    fn respond(&self, ctx: &AgentContext<'_>) -> Result<AgentResponse, AgentError> {
        let cands = self
            .spec
            .answer_table
            .get(ctx.problem_key)
            .ok_or_else(|| AgentError::UnknownProblem(ctx.problem_key.to_string()))?;
        let embedding = self.response_embedding(ctx)?;
        let ranked = rank_by_cosine(&embedding.column_mean(), &self.candidates[ctx.problem_key], 1)
            .map_err(|e| AgentError::Embedding(e.to_string()))?;
        let answer = &cands[ranked[0].index].text;
        Ok(AgentResponse {
            text: format!("Reasoning: weighed my instruction against {} peer response(s).\nAnswer: {answer}", ctx.peer_embeddings.len()),
            embedding,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpAgentSpec {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_secs")]
    pub backoff_base_secs: f64,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_retries() -> usize {
    3
}

fn default_backoff_secs() -> f64 {
    1.0
}

impl HttpAgentSpec {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        HttpAgentSpec {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_secs: default_backoff_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.endpoint_url.trim().is_empty() {
            return Err(AgentError::Config("endpoint URL is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(AgentError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.timeout_secs > 0.0) || !(self.backoff_base_secs >= 0.0) {
            return Err(AgentError::Config("timeout must be positive and backoff non-negative".into()));
        }
        Ok(())
    }
}

/// Chat-completions client. The assistant text is embedded with the
/// pipeline's provider so it can feed the next round.
pub struct HttpAgent {
    spec: HttpAgentSpec,
    api_key: String,
    transport: Arc<dyn Transport>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl HttpAgent {
    pub fn new(spec: HttpAgentSpec, api_key: String, transport: Arc<dyn Transport>, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, AgentError> {
        spec.validate()?;
        if api_key.is_empty() {
            return Err(AgentError::Config(format!("{API_KEY_ENV} is empty")));
        }
        Ok(HttpAgent {
            spec,
            api_key,
            transport,
            provider,
        })
    }

    /// Reads the key from `M2CL_API_KEY`; fails before any network traffic when unset.
    pub fn from_env(spec: HttpAgentSpec, transport: Arc<dyn Transport>, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, AgentError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| AgentError::Config(format!("{API_KEY_ENV} is not set")))?;
        HttpAgent::new(spec, key, transport, provider)
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.spec.endpoint_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, ctx: &AgentContext<'_>) -> serde_json::Value {
        let mut user = ctx.problem_text.to_string();
        if !ctx.peer_texts.is_empty() {
            user.push_str("\n\nOther agents' latest responses:");
            for (k, t) in ctx.peer_texts.iter().enumerate() {
                user.push_str(&format!("\n[peer {}] {}", k + 1, t.trim()));
            }
        }
        json!({
            "model": self.spec.model_name,
            "messages": [
                {"role": "system", "content": ctx.instruction_text},
                {"role": "user", "content": user},
            ],
            "temperature": self.spec.temperature,
        })
    }

    /// Sends the request, retrying timeouts, connection failures, 408, 429 and 5xx.
    pub fn complete(&self, body: &serde_json::Value) -> Result<String, AgentError> {
        let url = self.url();
        let timeout = Duration::from_secs_f64(self.spec.timeout_secs);
        let attempts = self.spec.max_retries + 1;
        let mut last = AgentError::Transport {
            message: "no attempt made".into(),
            attempts: 0,
        };
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.spec.backoff_base_secs * 2f64.powi(attempt as i32 - 2);
                debug!(attempt, delay, "retrying chat request");
                if delay > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(delay));
                }
            }
            match self.transport.post_json(&url, Some(&self.api_key), body, timeout) {
                Ok(resp) if resp.is_success() => return parse_completion(&resp.body),
                Ok(resp) => {
                    let retryable = resp.status == 408 || resp.status == 429 || resp.status >= 500;
                    last = AgentError::Http {
                        status: resp.status,
                        body: excerpt(&resp.body),
                        attempts: attempt,
                    };
                    if !retryable {
                        return Err(last);
                    }
                    warn!(status = resp.status, attempt, "chat request failed");
                }
                Err(TransportError::Timeout) => {
                    last = AgentError::Timeout { attempts: attempt };
                    warn!(attempt, "chat request timed out");
                }
                Err(TransportError::Connect(message)) => {
                    warn!(attempt, %message, "chat request transport failure");
                    last = AgentError::Transport { message, attempts: attempt };
                }
            }
        }
        Err(last)
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

fn parse_completion(body: &str) -> Result<String, AgentError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| AgentError::Malformed(e.to_string()))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| AgentError::Malformed(format!("no choices[0].message.content in {}", excerpt(body))))
}

impl AgentBackend for HttpAgent {
    fn respond(&self, ctx: &AgentContext<'_>) -> Result<AgentResponse, AgentError> {
        let text = self.complete(&self.request_body(ctx))?;
        let embedding = self
            .provider
            .embed_tokens(if text.trim().is_empty() { "(empty)" } else { &text })
            .map_err(|e| AgentError::Embedding(e.to_string()))?;
        Ok(AgentResponse { text, embedding })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbedderSpec, HashEmbedder};
    use crate::http::HttpResponse;
    use std::sync::Mutex;

    fn provider() -> HashEmbedder {
        HashEmbedder::new(EmbedderSpec {
            d_model: 16,
            n_tokens: 3,
            seed: 0,
        })
        .unwrap()
    }

    fn mock(gamma: f64, noise: f64) -> ConsensusMock {
        let mut table = BTreeMap::new();
        table.insert(
            "q1".to_string(),
            vec![
                Candidate {
                    text: "red".into(),
                    correct: true,
                },
                Candidate {
                    text: "blue".into(),
                    correct: false,
                },
            ],
        );
        ConsensusMock::new(
            ConsensusMockSpec {
                gamma,
                noise,
                seed: 1,
                answer_table: table,
            },
            &provider(),
        )
        .unwrap()
    }

    fn ctx<'a>(agent: usize, instr: &'a Matrix, peers: &'a [Matrix], p: &'a Matrix) -> AgentContext<'a> {
        AgentContext {
            agent,
            round: 1,
            problem_key: "q1",
            problem_text: "pick a colour",
            instruction_text: "be careful",
            peer_texts: &[],
            problem_embedding: p,
            instruction_embedding: instr,
            peer_embeddings: peers,
        }
    }

    #[test]
    fn mock_limits() {
        let e = provider();
        let p = e.embed_tokens("pick a colour").unwrap();
        let i = e.embed_tokens("red red red").unwrap();
        let peers = vec![e.embed_tokens("blue sky").unwrap(), e.embed_tokens("blue sea").unwrap()];
        let r0 = mock(0.0, 0.0).respond(&ctx(0, &i, &peers, &p)).unwrap();
        assert_eq!(r0.embedding, i);
        assert!(r0.text.ends_with("Answer: red"));

        let r1 = mock(1.0, 0.0).respond(&ctx(0, &i, &peers, &p)).unwrap();
        let mean = peers[0].add(&peers[1]).unwrap().scale(0.5);
        assert!(r1.embedding.sub(&mean).unwrap().frobenius_norm() < 1e-15);
        assert!(r1.text.ends_with("Answer: blue"));

        let noisy = mock(0.5, 0.1);
        let a = noisy.respond(&ctx(0, &i, &peers, &p)).unwrap();
        assert_eq!(a, noisy.respond(&ctx(0, &i, &peers, &p)).unwrap());
        assert_ne!(a.embedding, noisy.respond(&ctx(1, &i, &peers, &p)).unwrap().embedding);

        let mut unknown = ctx(0, &i, &peers, &p);
        unknown.problem_key = "nope";
        assert!(matches!(noisy.respond(&unknown), Err(AgentError::UnknownProblem(_))));
    }

    #[test]
    fn two_agent_distance_halves_with_shared_peer_mean() {
        let e = provider();
        let p = e.embed_tokens("q").unwrap();
        let m = mock(0.5, 0.0);
        let mut x = [e.embed_tokens("red one").unwrap(), e.embed_tokens("blue two").unwrap()];
        let mut d = x[0].sub(&x[1]).unwrap().frobenius_norm();
        for _ in 0..8 {
            // Each agent keeps its last response as instruction; both see the same mean.
            let shared = [x[0].add(&x[1]).unwrap().scale(0.5)];
            let next: Vec<Matrix> = (0..2).map(|k| m.respond(&ctx(k, &x[k], &shared, &p)).unwrap().embedding).collect();
            x = [next[0].clone(), next[1].clone()];
            let nd = x[0].sub(&x[1]).unwrap().frobenius_norm();
            assert!((nd - 0.5 * d).abs() < 1e-12);
            d = nd;
        }
    }

    struct Scripted {
        replies: Mutex<Vec<Result<HttpResponse, TransportError>>>,
        calls: Mutex<Vec<serde_json::Value>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(Scripted {
                replies: Mutex::new(replies),
                calls: Mutex::new(Vec::new()),
            })
        }
    }

    impl Transport for Scripted {
        fn post_json(&self, url: &str, bearer: Option<&str>, body: &serde_json::Value, _: Duration) -> Result<HttpResponse, TransportError> {
            assert_eq!(url, "http://llm.local/v1/chat/completions");
            assert_eq!(bearer, Some("k"));
            self.calls.lock().unwrap().push(body.clone());
            let mut r = self.replies.lock().unwrap();
            if r.len() > 1 {
                r.remove(0)
            } else {
                r[0].clone()
            }
        }
    }

    fn ok(text: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        })
    }

    fn agent(t: Arc<Scripted>, max_retries: usize) -> HttpAgent {
        let mut spec = HttpAgentSpec::new("http://llm.local/v1/", "m");
        spec.max_retries = max_retries;
        spec.backoff_base_secs = 0.0;
        HttpAgent::new(spec, "k".into(), t, Arc::new(provider())).unwrap()
    }

    #[test]
    fn http_returns_text_verbatim() {
        let e = provider();
        let p = e.embed_tokens("q").unwrap();
        let t = Scripted::new(vec![ok("Thinking.\nAnswer: 42")]);
        let a = agent(t.clone(), 0);
        let peers = ["first".to_string()];
        let mut c = ctx(0, &p, &[], &p);
        c.peer_texts = &peers;
        let r = a.respond(&c).unwrap();
        assert_eq!(r.text, "Thinking.\nAnswer: 42");
        let body = &t.calls.lock().unwrap()[0];
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], "be careful");
        assert!(body["messages"][1]["content"].as_str().unwrap().contains("[peer 1] first"));
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn http_retry_contract() {
        let fail = Err(TransportError::Connect("refused".into()));
        let t = Scripted::new(vec![fail.clone(), Err(TransportError::Timeout), ok("fine")]);
        assert_eq!(agent(t.clone(), 3).complete(&json!({})).unwrap(), "fine");
        assert_eq!(t.calls.lock().unwrap().len(), 3);

        let t = Scripted::new(vec![Ok(HttpResponse {
            status: 503,
            body: "busy".into(),
        })]);
        let err = agent(t.clone(), 2).complete(&json!({})).unwrap_err();
        assert_eq!(t.calls.lock().unwrap().len(), 3);
        assert_eq!(
            err,
            AgentError::Http {
                status: 503,
                body: "busy".into(),
                attempts: 3
            }
        );

        let t = Scripted::new(vec![Err(TransportError::Timeout)]);
        assert_eq!(agent(t, 1).complete(&json!({})).unwrap_err(), AgentError::Timeout { attempts: 2 });

        let t = Scripted::new(vec![Ok(HttpResponse {
            status: 401,
            body: "denied".into(),
        })]);
        agent(t.clone(), 5).complete(&json!({})).unwrap_err();
        assert_eq!(t.calls.lock().unwrap().len(), 1);
    }

    #[test]
    fn missing_key_is_config_error() {
        let t = Scripted::new(vec![ok("x")]);
        let spec = HttpAgentSpec::new("http://llm.local/v1", "m");
        let err = HttpAgent::new(spec, String::new(), t.clone(), Arc::new(provider())).err().unwrap();
        assert!(matches!(err, AgentError::Config(_)));
        assert!(t.calls.lock().unwrap().is_empty());
    }
}
