//! Rule-set refinement through a text protocol.
//!
//! Refinement runs in two phases over the full active rule set. In the
//! adaptation phase the responder may rewrite rules but not delete them:
//!
//! ```text
//! RULE <id>: KEEP
//! RULE <id>: MODIFY -> IF <feature> <op> <value> [AND ...] THEN <class>
//! CONTEXT <id>: <one sentence>
//! ```
//!
//! In the pruning phase it gives one verdict per rule:
//!
//! ```text
//! PRUNE <id>: <reason>
//! KEEP <id>: <reason>
//! ```
//!
//! Responses are parsed line by line. Anything that does not fit is rejected
//! with a cause and the rest of the response still applies. Rules without a
//! verdict are kept.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::round_sig;
use crate::data::{FeatureKind, FeatureSchema};
use crate::rules::{canonical_text, parse_rule, Condition, ParsedRule, Predicate, RuleError, RuleSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinerError {
    #[error("refinement unavailable: {0}")]
    Unavailable(String),
    #[error("API key environment variable `{0}` is not set")]
    MissingKey(String),
    #[error("invalid refiner config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adaptation,
    Pruning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EditKind {
    Modify,
    Keep,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerEdit {
    pub kind: EditKind,
    pub rule_id: usize,
    /// Replacement rule in canonical form (MODIFY only).
    pub replacement: Option<String>,
    #[serde(skip)]
    pub parsed: Option<ParsedRule>,
    pub reason: Option<String>,
}

impl RefinerEdit {
    pub fn keep(rule_id: usize, reason: Option<String>) -> Self {
        Self {
            kind: EditKind::Keep,
            rule_id,
            replacement: None,
            parsed: None,
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum RejectCause {
    Unrecognized,
    PhaseViolation,
    UnknownRuleId(usize),
    Duplicate(usize),
    MissingReason,
    InvalidRule(String),
    UnknownFeature(String),
    UnknownOperator(String),
    UnknownCategory(String),
    UnknownClass(String),
    MalformedNumber(String),
}

impl From<RuleError> for RejectCause {
    fn from(e: RuleError) -> Self {
        match e {
            RuleError::UnknownFeature(f) => RejectCause::UnknownFeature(f),
            RuleError::UnknownOperator { feature, op } => RejectCause::UnknownOperator(format!("{feature} {op}")),
            RuleError::UnknownCategory { feature, value } => {
                RejectCause::UnknownCategory(format!("{feature} == {value}"))
            }
            RuleError::UnknownClass(c) => RejectCause::UnknownClass(c),
            RuleError::MalformedNumber(n) => RejectCause::MalformedNumber(n),
            other => RejectCause::InvalidRule(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub phase: Phase,
    pub line: String,
    pub cause: RejectCause,
}

/// Edits for every active rule (ascending id) plus the lines that were
/// thrown out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    pub edits: Vec<RefinerEdit>,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefinementTranscript {
    pub iteration: usize,
    pub client: String,
    pub adaptation_prompt: String,
    pub adaptation_response: String,
    pub pruning_prompt: String,
    pub pruning_response: String,
    pub applied: Vec<RefinerEdit>,
    pub rejected: Vec<RejectedLine>,
    pub error: Option<String>,
}

pub const SYSTEM_PROMPT: &str = "You refine if-then classification rules for a tabular prediction model. \
Answer only with lines in the requested format.";

fn operators_for(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Numeric => "<= value, > value, in (low, high]",
        FeatureKind::Categorical => "== value",
    }
}

fn schema_section(schema: &FeatureSchema) -> String {
    let mut out = String::from("Features (use these names exactly):\n");
    for spec in &schema.features {
        match spec.kind {
            FeatureKind::Numeric => {
                out += &format!("- {} (numeric); operators: {}\n", spec.name, operators_for(spec.kind));
            }
            FeatureKind::Categorical => {
                out += &format!(
                    "- {} (categorical); operators: {}; values: {}\n",
                    spec.name,
                    operators_for(spec.kind),
                    spec.categories.join(", ")
                );
            }
        }
    }
    out += &format!("Classes: {}\n", schema.classes.join(", "));
    out
}

fn rules_section(rs: &RuleSet, schema: &FeatureSchema) -> String {
    let mut out = String::from("Rules:\n");
    for rule in sorted_active(rs) {
        out += &format!("RULE {}: {}\n", rule.0, rule.1.canonical_text(schema));
    }
    out
}

fn sorted_active(rs: &RuleSet) -> Vec<(usize, &crate::rules::Rule)> {
    let mut v: Vec<_> = rs.active().map(|r| (r.id, r)).collect();
    v.sort_by_key(|(id, _)| *id);
    v
}

pub fn build_adaptation_prompt(rs: &RuleSet, schema: &FeatureSchema) -> String {
    let mut p = String::new();
    p += "The rules below were extracted from a classifier. Adapt each rule so that it is easier for a \
domain expert to read: round thresholds to sensible values, drop conditions that add little, and fix \
conditions or classes that contradict domain knowledge.\n\n";
    p += &rules_section(rs, schema);
    p += "\n";
    p += &schema_section(schema);
    p += "\nRule syntax: IF <feature> <operator> <value> [AND <feature> <operator> <value> ...] THEN <class>\n";
    p += "\nRespond with exactly one verdict line per rule id, each followed by a context line:\n";
    p += "RULE <id>: KEEP\n";
    p += "RULE <id>: MODIFY -> <rule>\n";
    p += "CONTEXT <id>: <one sentence explaining the rule in domain terms>\n";
    p += "\nDeleting rules is forbidden in this step. Do not use any feature, operator, value or class \
that is not listed above.\n";
    p
}

pub fn build_pruning_prompt(rs: &RuleSet, schema: &FeatureSchema) -> String {
    let mut p = String::new();
    p += "The rules below form one rule set for a classifier. Decide for each rule whether it should be \
removed, for example because it contradicts another rule in the set or domain knowledge.\n\n";
    p += &rules_section(rs, schema);
    p += "\n";
    p += &schema_section(schema);
    p += "\nRespond with exactly one line per rule id, giving a reason in both cases:\n";
    p += "PRUNE <id>: <reason>\n";
    p += "KEEP <id>: <reason>\n";
    p
}

enum Line<'a> {
    Rule(usize, &'a str),
    Context(usize, &'a str),
    Prune(usize, &'a str),
    Keep(usize, &'a str),
}

fn classify(line: &str) -> Option<Line<'_>> {
    let (head, body) = line.split_once(':')?;
    let mut words = head.split_whitespace();
    let keyword = words.next()?;
    let id: usize = words.next()?.parse().ok()?;
    if words.next().is_some() {
        return None;
    }
    let body = body.trim();
    match keyword.to_ascii_uppercase().as_str() {
        "RULE" => Some(Line::Rule(id, body)),
        "CONTEXT" => Some(Line::Context(id, body)),
        "PRUNE" => Some(Line::Prune(id, body)),
        "KEEP" => Some(Line::Keep(id, body)),
        _ => None,
    }
}

fn strip_bullet(line: &str) -> &str {
    let t = line.trim();
    let t = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")).unwrap_or(t);
    t.trim_matches('`').trim()
}

pub fn parse_response(text: &str, phase: Phase, rs: &RuleSet, schema: &FeatureSchema) -> ParsedResponse {
    let active: Vec<usize> = sorted_active(rs).iter().map(|(id, _)| *id).collect();
    let mut verdicts: BTreeMap<usize, RefinerEdit> = BTreeMap::new();
    let mut contexts: BTreeMap<usize, String> = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut reject = |line: &str, cause: RejectCause| {
        rejected.push(RejectedLine {
            phase,
            line: line.to_string(),
            cause,
        })
    };

    for raw in text.lines() {
        let line = strip_bullet(raw);
        if line.is_empty() {
            continue;
        }
        let Some(parsed) = classify(line) else {
            reject(line, RejectCause::Unrecognized);
            continue;
        };
        let in_phase = matches!(
            (&parsed, phase),
            (Line::Rule(..) | Line::Context(..), Phase::Adaptation) | (Line::Prune(..) | Line::Keep(..), Phase::Pruning)
        );
        if !in_phase {
            reject(line, RejectCause::PhaseViolation);
            continue;
        }
        let id = match parsed {
            Line::Rule(id, _) | Line::Context(id, _) | Line::Prune(id, _) | Line::Keep(id, _) => id,
        };
        if !active.contains(&id) {
            reject(line, RejectCause::UnknownRuleId(id));
            continue;
        }
        if let Line::Context(_, body) = parsed {
            if contexts.contains_key(&id) {
                reject(line, RejectCause::Duplicate(id));
            } else if body.is_empty() {
                reject(line, RejectCause::MissingReason);
            } else {
                contexts.insert(id, body.to_string());
            }
            continue;
        }
        if verdicts.contains_key(&id) {
            reject(line, RejectCause::Duplicate(id));
            continue;
        }
        let edit = match parsed {
            Line::Rule(_, body) => {
                if body.eq_ignore_ascii_case("KEEP") {
                    RefinerEdit::keep(id, None)
                } else {
                    let mut parts = body.splitn(2, "->");
                    let verb = parts.next().unwrap_or("").trim();
                    let rule_text = parts.next().map(str::trim);
                    match (verb.eq_ignore_ascii_case("MODIFY"), rule_text) {
                        (true, Some(t)) => match parse_rule(t, schema) {
                            Ok(pr) => RefinerEdit {
                                kind: EditKind::Modify,
                                rule_id: id,
                                replacement: Some(canonical_text(&pr.predicates, pr.class_index, schema)),
                                parsed: Some(pr),
                                reason: None,
                            },
                            Err(e) => {
                                reject(line, e.into());
                                continue;
                            }
                        },
                        _ => {
                            reject(line, RejectCause::Unrecognized);
                            continue;
                        }
                    }
                }
            }
            Line::Prune(_, reason) => {
                if reason.is_empty() {
                    reject(line, RejectCause::MissingReason);
                    continue;
                }
                RefinerEdit {
                    kind: EditKind::Prune,
                    rule_id: id,
                    replacement: None,
                    parsed: None,
                    reason: Some(reason.to_string()),
                }
            }
            Line::Keep(_, reason) => RefinerEdit::keep(id, (!reason.is_empty()).then(|| reason.to_string())),
            Line::Context(..) => unreachable!(),
        };
        verdicts.insert(id, edit);
    }

    let edits = active
        .iter()
        .map(|&id| {
            let mut edit = verdicts.remove(&id).unwrap_or_else(|| RefinerEdit::keep(id, None));
            if let Some(ctx) = contexts.remove(&id) {
                edit.reason = Some(ctx);
            }
            edit
        })
        .collect();
    ParsedResponse { edits, rejected }
}

/// Applies validated edits. Ids are stable; edits for unknown ids are ignored.
pub fn apply_edits(rs: &RuleSet, edits: &[RefinerEdit]) -> RuleSet {
    let mut out = rs.clone();
    for edit in edits {
        let Some(rule) = out.get_mut(edit.rule_id) else {
            continue;
        };
        match edit.kind {
            EditKind::Modify => {
                if let Some(pr) = &edit.parsed {
                    rule.predicates = pr.predicates.clone();
                    rule.class_index = pr.class_index;
                    rule.origin.llm_adapted = true;
                }
                if let Some(ctx) = &edit.reason {
                    rule.context = ctx.clone();
                }
            }
            EditKind::Keep => {
                if let Some(ctx) = &edit.reason {
                    rule.context = ctx.clone();
                }
            }
            EditKind::Prune => {
                rule.active = false;
                if let Some(reason) = &edit.reason {
                    rule.context = reason.clone();
                }
            }
        }
    }
    out
}

/// Something that answers refinement prompts.
pub trait RefinerClient {
    fn name(&self) -> &str;

    /// Raw response text for one phase. The current rule set and schema are
    /// passed along for offline responders; remote ones only need `prompt`.
    fn respond(&self, phase: Phase, prompt: &str, rs: &RuleSet, schema: &FeatureSchema)
        -> Result<String, RefinerError>;
}

/// Failed refinement with whatever was recorded before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineFailure {
    pub error: RefinerError,
    pub transcript: RefinementTranscript,
}

/// Adaptation round-trip and apply, then pruning round-trip and apply.
pub fn refine(
    rs: &RuleSet,
    schema: &FeatureSchema,
    client: &dyn RefinerClient,
) -> Result<(RuleSet, RefinementTranscript), RefineFailure> {
    let mut t = RefinementTranscript {
        client: client.name().to_string(),
        ..Default::default()
    };
    if rs.n_active() == 0 {
        return Ok((rs.clone(), t));
    }
    let fail = |error: RefinerError, mut transcript: RefinementTranscript| {
        transcript.error = Some(error.to_string());
        RefineFailure { error, transcript }
    };

    t.adaptation_prompt = build_adaptation_prompt(rs, schema);
    t.adaptation_response = match client.respond(Phase::Adaptation, &t.adaptation_prompt, rs, schema) {
        Ok(r) => r,
        Err(e) => return Err(fail(e, t)),
    };
    let adapt = parse_response(&t.adaptation_response, Phase::Adaptation, rs, schema);
    let adapted = apply_edits(rs, &adapt.edits);
    t.applied.extend(adapt.edits);
    t.rejected.extend(adapt.rejected);

    t.pruning_prompt = build_pruning_prompt(&adapted, schema);
    t.pruning_response = match client.respond(Phase::Pruning, &t.pruning_prompt, &adapted, schema) {
        Ok(r) => r,
        Err(e) => return Err(fail(e, t)),
    };
    let prune = parse_response(&t.pruning_response, Phase::Pruning, &adapted, schema);
    // KEEP reasons from this phase stay in the transcript only, so the
    // context written during adaptation survives.
    let to_apply: Vec<RefinerEdit> = prune
        .edits
        .iter()
        .filter(|e| e.kind == EditKind::Prune)
        .cloned()
        .collect();
    let pruned = apply_edits(&adapted, &to_apply);
    t.applied.extend(prune.edits);
    t.rejected.extend(prune.rejected);
    Ok((pruned, t))
}

/// Offline deterministic responder.
///
/// Adaptation: thresholds are rounded to two significant digits (a range
/// that would collapse keeps its bounds) and rules never touched by an
/// adaptation lose their last predicate when they have more than three.
/// Pruning: of two active rules with the same predicates and different
/// classes, the higher id is pruned.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubRefiner;

fn round_condition(c: Condition) -> Condition {
    match c {
        Condition::Le(t) => Condition::Le(round_sig(t, 2)),
        Condition::Gt(t) => Condition::Gt(round_sig(t, 2)),
        Condition::Range(lo, hi) => {
            let (rl, rh) = (round_sig(lo, 2), round_sig(hi, 2));
            if rl < rh {
                Condition::Range(rl, rh)
            } else {
                Condition::Range(lo, hi)
            }
        }
        Condition::Eq(c) => Condition::Eq(c),
    }
}

pub fn stub_adapt(predicates: &[Predicate], llm_adapted: bool) -> Vec<Predicate> {
    let mut out: Vec<Predicate> = predicates
        .iter()
        .map(|p| Predicate::new(p.feature, round_condition(p.condition)))
        .collect();
    if !llm_adapted && out.len() > 3 {
        out.pop();
    }
    out
}

fn describe(predicates: &[Predicate], class_index: usize, schema: &FeatureSchema) -> String {
    let parts: Vec<String> = predicates.iter().map(|p| p.text(schema)).collect();
    format!("Instances with {} are predicted as {}.", parts.join(" and "), schema.classes[class_index])
}

impl StubRefiner {
    pub fn adaptation_response(rs: &RuleSet, schema: &FeatureSchema) -> String {
        let mut out = String::new();
        for (id, rule) in sorted_active(rs) {
            let new = stub_adapt(&rule.predicates, rule.origin.llm_adapted);
            if new != rule.predicates {
                out += &format!("RULE {id}: MODIFY -> {}\n", canonical_text(&new, rule.class_index, schema));
                out += &format!("CONTEXT {id}: {}\n", describe(&new, rule.class_index, schema));
            } else if !rule.origin.llm_adapted {
                out += &format!("RULE {id}: KEEP\n");
                out += &format!("CONTEXT {id}: {}\n", describe(&new, rule.class_index, schema));
            } else {
                out += &format!("RULE {id}: KEEP\n");
            }
        }
        out
    }

    pub fn pruning_response(rs: &RuleSet, schema: &FeatureSchema) -> String {
        let rules = sorted_active(rs);
        let keys: Vec<_> = rules.iter().map(|(_, r)| r.predicate_key(schema)).collect();
        let mut out = String::new();
        for (j, (id, rule)) in rules.iter().enumerate() {
            let clash = (0..j).find(|&i| keys[i] == keys[j] && rules[i].1.class_index != rule.class_index);
            match clash {
                Some(i) => out += &format!("PRUNE {id}: contradicts rule {}\n", rules[i].0),
                None => out += &format!("KEEP {id}: consistent with the rest of the rule set\n"),
            }
        }
        out
    }
}

impl RefinerClient for StubRefiner {
    fn name(&self) -> &str {
        "stub"
    }

    fn respond(&self, phase: Phase, _prompt: &str, rs: &RuleSet, schema: &FeatureSchema) -> Result<String, RefinerError> {
        Ok(match phase {
            Phase::Adaptation => Self::adaptation_response(rs, schema),
            Phase::Pruning => Self::pruning_response(rs, schema),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub backoff_base_ms: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: "MORE_LLM_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            backoff_base_ms: 1000,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), RefinerError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(RefinerError::Config(format!("timeout must be > 0, got {}", self.timeout_secs)));
        }
        if self.endpoint.is_empty() || self.model.is_empty() || self.api_key_env.is_empty() {
            return Err(RefinerError::Config("endpoint, model and api_key_env must be set".into()));
        }
        Ok(())
    }
}

/// Chat-completions client.
pub struct RemoteClient {
    cfg: LlmClientConfig,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: String,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl RemoteClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self, RefinerError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| RefinerError::Config(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }

    fn attempt(&self, key: &str, body: &ChatRequest) -> Result<String, Attempt> {
        let resp = self
            .http
            .post(&self.cfg.endpoint)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal("response has no choices".into()))
    }

    pub fn complete(&self, prompt: &str) -> Result<String, RefinerError> {
        let key = std::env::var(&self.cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| RefinerError::MissingKey(self.cfg.api_key_env.clone()))?;
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: SYSTEM_PROMPT,
                },
                ChatMessage {
                    role: "user",
                    content: prompt,
                },
            ],
            temperature: self.cfg.temperature,
        };
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(20));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&key, &body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(RefinerError::Unavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("refiner request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(RefinerError::Unavailable(format!(
            "{} attempts failed, last error: {last}",
            self.cfg.max_retries + 1
        )))
    }
}

impl RefinerClient for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn respond(&self, _phase: Phase, prompt: &str, _rs: &RuleSet, _schema: &FeatureSchema) -> Result<String, RefinerError> {
        self.complete(prompt)
    }
}

pub fn transcripts_to_json(ts: &[RefinementTranscript]) -> String {
    serde_json::to_string_pretty(ts).expect("transcripts serialize")
}
