//! Chat-completion HTTP backend and the scripted multi-turn schedules.

use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::AnswerCache;
use super::prompts::{sections, system_message, user_message};
use super::AgentSpec;
use crate::dataset::QAInstance;

pub const ENV_API_BASE: &str = "AGENT_ROUTER_API_BASE";
pub const ENV_API_KEY: &str = "AGENT_ROUTER_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveEndpoint {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    #[serde(default)]
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    ENV_API_KEY.to_string()
}

fn default_timeout() -> u64 {
    120
}

impl LiveEndpoint {
    pub fn resolved_base(&self) -> Option<String> {
        let base = if self.base_url.is_empty() {
            std::env::var(ENV_API_BASE).ok()?
        } else {
            self.base_url.clone()
        };
        Some(base.trim_end_matches('/').to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

fn client() -> &'static reqwest::blocking::Client {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    CLIENT.get_or_init(|| {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client")
    })
}

fn chat_once(endpoint: &LiveEndpoint, req: &ChatRequest) -> Result<String, String> {
    let base = endpoint
        .resolved_base()
        .ok_or_else(|| format!("no endpoint configured; set base_url or {ENV_API_BASE}"))?;
    let body = json!({
        "model": endpoint.model,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": req.user},
        ],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    let mut call = client()
        .post(format!("{base}/chat/completions"))
        .timeout(Duration::from_secs(endpoint.timeout_secs))
        .json(&body);
    if let Ok(key) = std::env::var(&endpoint.api_key_env) {
        call = call.bearer_auth(key);
    }
    let resp = call.send().map_err(|e| format!("transport: {e}"))?;
    let status = resp.status();
    let value: Value = resp.json().map_err(|e| format!("status {status}, unreadable body: {e}"))?;
    if !status.is_success() {
        return Err(format!("status {status}: {value}"));
    }
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("reply without choices[0].message.content: {value}"))
}

/// One chat completion with up to `retries` attempts and exponential backoff.
pub fn chat(endpoint: &LiveEndpoint, req: &ChatRequest, retries: usize) -> Result<String, String> {
    let attempts = retries.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match chat_once(endpoint, req) {
            Ok(text) => return Ok(text),
            Err(e) => {
                log::warn!("chat attempt {}/{attempts} failed: {e}", attempt + 1);
                last = e;
                if attempt + 1 < attempts {
                    std::thread::sleep(Duration::from_millis(500 << attempt));
                }
            }
        }
    }
    Err(last)
}

struct Turns<'a> {
    agent: &'a AgentSpec,
    endpoint: &'a LiveEndpoint,
    instance: &'a QAInstance,
    cache: &'a AnswerCache,
    retries: usize,
}

impl Turns<'_> {
    /// One sub-call, cached under `agent#sub`.
    fn call(&self, sub: &str, prompt: &str, user: String) -> Result<String, String> {
        let key = format!("{}#{sub}", self.agent.id);
        if let Some(e) = self.cache.get(&key, &self.instance.id, &self.agent.prompt.hash) {
            return Ok(e.raw);
        }
        let req = ChatRequest {
            system: system_message(&format!("{}/{sub}", self.agent.id.role), prompt),
            user,
            temperature: self.agent.temperature,
            max_tokens: self.agent.max_tokens,
        };
        let raw = chat(self.endpoint, &req, self.retries)?;
        let entry = AnswerCache::make_entry(
            &key,
            &self.instance.id,
            &self.agent.prompt.hash,
            raw.clone(),
            super::parse_answer(&raw),
            true,
            None,
        );
        self.cache.put(entry).map_err(|e| e.to_string())?;
        Ok(raw)
    }
}

/// Runs the agent's prompt against a live endpoint. Sectioned prompts run
/// fixed schedules: debate (A, B, judge), react/reflect (at most two
/// rounds), and two thinkers followed by a summarizer.
pub fn live_reply(
    agent: &AgentSpec,
    endpoint: &LiveEndpoint,
    instance: &QAInstance,
    cache: &AnswerCache,
    retries: usize,
) -> Result<String, String> {
    let t = Turns {
        agent,
        endpoint,
        instance,
        cache,
        retries,
    };
    let base = user_message(&instance.question, &instance.context);
    let secs = sections(&agent.prompt.text);
    let get = |name: &str| secs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_str());

    if let (Some(a), Some(b), Some(judge)) = (get("debater_a"), get("debater_b"), get("judge")) {
        let ra = t.call("debater_a", a, base.clone())?;
        let rb = t.call("debater_b", b, format!("{base}\n\nDebater A:\n{ra}"))?;
        return t.call("judge", judge, format!("{base}\n\nDebater A:\n{ra}\n\nDebater B:\n{rb}"));
    }
    if let (Some(react), Some(reflect)) = (get("react"), get("reflect")) {
        let mut answer = t.call("react", react, base.clone())?;
        for round in 1..=2 {
            let verdict = t.call(
                &format!("reflect{round}"),
                reflect,
                format!("{base}\n\nAgent answer:\n{answer}"),
            )?;
            if !verdict.to_lowercase().contains("status: revise") || round == 2 {
                break;
            }
            answer = t.call(
                &format!("react{}", round + 1),
                react,
                format!("{base}\n\nPrevious answer:\n{answer}\n\nReviewer notes:\n{verdict}"),
            )?;
        }
        return Ok(answer);
    }
    if let (Some(think), Some(summarize)) = (get("think"), get("summarize")) {
        let ta = t.call("thinker_a", think, base.clone())?;
        let tb = t.call("thinker_b", think, format!("{base}\n\n(Work independently.)"))?;
        return t.call("summarize", summarize, format!("{base}\n\nAgent A:\n{ta}\n\nAgent B:\n{tb}"));
    }
    let body = secs.last().map(|(_, b)| b.as_str()).unwrap_or("");
    let req = ChatRequest {
        system: system_message(&agent.id.role, body),
        user: base,
        temperature: agent.temperature,
        max_tokens: agent.max_tokens,
    };
    chat(endpoint, &req, retries)
}
