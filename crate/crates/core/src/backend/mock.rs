//! Scripted transport for GPU-free testing.
//!
//! A [`MockScript`] is an ordered list of rules; the first rule whose
//! predicate accepts the query supplies the response, otherwise the default
//! response is returned.

use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cache::prompt_sha256;
use super::{BackendKind, CompletionQuery, Transport, TransportError};

type Predicate = Arc<dyn Fn(&CompletionQuery) -> bool + Send + Sync>;
type Responder = Arc<dyn Fn(&CompletionQuery) -> String + Send + Sync>;

#[derive(Clone)]
pub enum Reply {
    Text(String),
    Computed(Responder),
}

impl Reply {
    fn render(&self, query: &CompletionQuery) -> String {
        match self {
            Reply::Text(text) => text.clone(),
            Reply::Computed(f) => f(query),
        }
    }
}

#[derive(Clone)]
pub struct MockRule {
    predicate: Predicate,
    reply: Reply,
}

#[derive(Clone)]
pub struct MockScript {
    rules: Vec<MockRule>,
    default: Reply,
}

impl fmt::Debug for MockScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockScript").field("rules", &self.rules.len()).finish()
    }
}

impl MockScript {
    pub fn new(default: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: Reply::Text(default.into()),
        }
    }

    /// A script that computes every answer.
    pub fn responder(f: impl Fn(&CompletionQuery) -> String + Send + Sync + 'static) -> Self {
        Self {
            rules: Vec::new(),
            default: Reply::Computed(Arc::new(f)),
        }
    }

    pub fn when(
        mut self,
        predicate: impl Fn(&CompletionQuery) -> bool + Send + Sync + 'static,
        response: impl Into<String>,
    ) -> Self {
        self.rules.push(MockRule {
            predicate: Arc::new(predicate),
            reply: Reply::Text(response.into()),
        });
        self
    }

    pub fn when_computed(
        mut self,
        predicate: impl Fn(&CompletionQuery) -> bool + Send + Sync + 'static,
        responder: impl Fn(&CompletionQuery) -> String + Send + Sync + 'static,
    ) -> Self {
        self.rules.push(MockRule {
            predicate: Arc::new(predicate),
            reply: Reply::Computed(Arc::new(responder)),
        });
        self
    }

    pub fn when_contains(self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        let needle = needle.into();
        self.when(move |q| q.prompt.contains(&needle), response)
    }

    pub fn when_prompt_hash(self, sha256_hex: impl Into<String>, response: impl Into<String>) -> Self {
        let hash = sha256_hex.into().to_lowercase();
        self.when(move |q| prompt_sha256(&q.prompt) == hash, response)
    }

    pub fn respond(&self, query: &CompletionQuery) -> String {
        self.rules
            .iter()
            .find(|rule| (rule.predicate)(query))
            .map_or_else(|| self.default.render(query), |rule| rule.reply.render(query))
    }
}

/// File form of a rule: every present condition must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub response: String,
}

/// File form of a [`MockScript`], as embedded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub default: String,
}

impl From<ScriptSpec> for MockScript {
    fn from(spec: ScriptSpec) -> Self {
        let mut script = MockScript::new(spec.default);
        for rule in spec.rules {
            let RuleSpec {
                contains,
                prompt_sha256: hash,
                temperature,
                response,
            } = rule;
            let hash = hash.map(|h| h.to_lowercase());
            script = script.when(
                move |q| {
                    contains.iter().all(|needle| q.prompt.contains(needle.as_str()))
                        && hash.as_ref().is_none_or(|h| &prompt_sha256(&q.prompt) == h)
                        && temperature.is_none_or(|t| (q.temperature - t).abs() < 1e-9)
                },
                response,
            );
        }
        script
    }
}

/// Transport backed by a [`MockScript`], with optional fault injection.
#[derive(Debug)]
pub struct MockTransport {
    script: MockScript,
    failures_left: AtomicU32,
    calls: AtomicU64,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            failures_left: AtomicU32::new(0),
            calls: AtomicU64::new(0),
        }
    }

    /// Fails the first `n` calls with a transient error before answering.
    pub fn failing_first(script: MockScript, n: u32) -> Self {
        let transport = Self::new(script);
        transport.failures_left.store(n, Ordering::SeqCst);
        transport
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn send(&self, query: &CompletionQuery) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let injected = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected {
            return Err(TransportError::Transient("injected fault".into()));
        }
        Ok(self.script.respond(query))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(prompt: &str) -> CompletionQuery {
        CompletionQuery::new("m", prompt, 0.0)
    }

    #[test]
    fn first_matching_rule_wins() {
        let script = MockScript::new("N/A")
            .when_contains("List the entities", "first")
            .when_contains("entities", "second");
        assert_eq!(script.respond(&q("List the entities now")), "first");
        assert_eq!(script.respond(&q("some entities")), "second");
        assert_eq!(script.respond(&q("other")), "N/A");
    }

    #[test]
    fn empty_script_returns_default() {
        let script = MockScript::new("N/A");
        assert_eq!(script.respond(&q("anything")), "N/A");
    }

    #[test]
    fn prompt_hash_rule() {
        let script = MockScript::new("x").when_prompt_hash(prompt_sha256("exact prompt"), "[]");
        assert_eq!(script.respond(&q("exact prompt")), "[]");
        assert_eq!(script.respond(&q("exact prompt!")), "x");
    }

    #[test]
    fn spec_rules_are_conjunctive() {
        let spec: ScriptSpec = serde_json::from_str(
            r#"{"rules": [{"contains": ["a", "b"], "temperature": 1.0, "response": "hit"}], "default": "miss"}"#,
        )
        .unwrap();
        let script = MockScript::from(spec);
        let mut hot = CompletionQuery::new("m", "a b", 1.0);
        assert_eq!(script.respond(&hot), "hit");
        hot.temperature = 0.0;
        assert_eq!(script.respond(&hot), "miss");
        assert_eq!(script.respond(&CompletionQuery::new("m", "a", 1.0)), "miss");
    }

    #[test]
    fn injected_faults_precede_answers() {
        let t = MockTransport::failing_first(MockScript::new("ok"), 2);
        assert!(t.send(&q("p")).is_err());
        assert!(t.send(&q("p")).is_err());
        assert_eq!(t.send(&q("p")).unwrap(), "ok");
        assert_eq!(t.calls(), 3);
    }
}
