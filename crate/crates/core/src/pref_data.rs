//! Preference data: loading, binarization of scored response sets,
//! malformed-record filtering, seeded downsampling and prompt-pool remixing.
//!
//! File formats (one JSON object per line, UTF-8):
//!
//! * preferences: `{"prompt": [{"role", "content"}], "chosen": str, "rejected": str, "source"?: str}`
//! * scored sets: `{"prompt": [...], "responses": [{"content": str, "aspects": {name: num}, "overall"?: num}]}`
//! * prompt pools: `{"prompt": [...], "source"?: str}`

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::encode;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt: Vec<Turn>,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, rename = "source", skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

/// Token encoding of a prompt: a single user turn is its raw bytes; longer
/// conversations render each turn as `role: content` on its own line.
pub fn prompt_tokens(turns: &[Turn]) -> Vec<u32> {
    match turns {
        [only] if only.role == Role::User => encode(only.content.as_bytes()),
        _ => {
            let mut text = String::new();
            for t in turns {
                let role = match t.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                text.push_str(role);
                text.push_str(": ");
                text.push_str(&t.content);
                text.push('\n');
            }
            text.push_str("assistant: ");
            encode(text.as_bytes())
        }
    }
}

impl PreferencePair {
    pub fn new(prompt: Vec<Turn>, chosen: impl Into<String>, rejected: impl Into<String>) -> Self {
        Self { prompt, chosen: chosen.into(), rejected: rejected.into(), source_tag: None }
    }

    /// Single-turn pair from plain text.
    pub fn from_text(prompt: &str, chosen: &str, rejected: &str) -> Self {
        Self::new(vec![Turn::user(prompt)], chosen, rejected)
    }

    pub fn prompt_tokens(&self) -> Vec<u32> {
        prompt_tokens(&self.prompt)
    }

    /// Structural invariants; empty turns are left to [`filter_malformed`].
    pub fn check_schema(&self) -> std::result::Result<(), String> {
        match self.prompt.last() {
            None => return Err("prompt has no turns".into()),
            Some(t) if t.role != Role::User => return Err("prompt must end with a user turn".into()),
            _ => {}
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected responses are identical".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredResponse {
    pub content: String,
    #[serde(default)]
    pub aspects: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredResponseSet {
    pub prompt: Vec<Turn>,
    pub responses: Vec<ScoredResponse>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolPrompt {
    pub prompt: Vec<Turn>,
    /// Pool the prompt was drawn from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    pub pool_tag: String,
    pub prompts: Vec<PoolPrompt>,
}

impl PromptPool {
    pub fn new(pool_tag: impl Into<String>, prompts: Vec<Vec<Turn>>) -> Result<Self> {
        let pool_tag = pool_tag.into();
        if let Some(i) = prompts.iter().position(|p| p.is_empty()) {
            return Err(Error::Data(format!("pool `{pool_tag}`: prompt {i} is empty")));
        }
        let prompts = prompts
            .into_iter()
            .map(|prompt| PoolPrompt { prompt, source: Some(pool_tag.clone()) })
            .collect();
        Ok(Self { pool_tag, prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

// ---------------------------------------------------------------- file I/O

fn read_records<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let record: T =
            serde_json::from_value(value).map_err(|e| Error::Schema { line: line_no, message: e.to_string() })?;
        check(&record).map_err(|message| Error::Schema { line: line_no, message })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One pair per non-blank line, in file order.
pub fn load_preferences(path: &Path) -> Result<Vec<PreferencePair>> {
    read_records(path, PreferencePair::check_schema)
}

pub fn load_scored(path: &Path) -> Result<Vec<ScoredResponseSet>> {
    read_records(path, |s: &ScoredResponseSet| {
        if s.responses.len() < 2 {
            return Err("a scored set needs at least 2 responses".into());
        }
        if let Some(i) = s.responses.iter().position(|r| r.aspects.is_empty() && r.overall.is_none()) {
            return Err(format!("response {i} has neither aspect scores nor an overall score"));
        }
        Ok(())
    })
}

pub fn load_prompt_pool(path: &Path, pool_tag: &str) -> Result<PromptPool> {
    let records = read_records(path, |p: &PoolPrompt| {
        if p.prompt.is_empty() {
            Err("empty prompt".into())
        } else {
            Ok(())
        }
    })?;
    let prompts = records
        .into_iter()
        .map(|mut p| {
            p.source.get_or_insert_with(|| pool_tag.to_string());
            p
        })
        .collect();
    Ok(PromptPool { pool_tag: pool_tag.to_string(), prompts })
}

// ------------------------------------------------------------ binarization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Mean over the non-excluded per-aspect scores.
    FineGrained,
    /// The single overall score.
    Overall,
}

/// Aspects excluded from fine-grained averaging unless overridden.
pub fn default_excluded_aspects() -> Vec<String> {
    vec!["verbosity".to_string()]
}

pub fn response_score(r: &ScoredResponse, mode: ScoreMode, excluded: &[String]) -> Result<f64> {
    match mode {
        ScoreMode::Overall => r.overall.ok_or_else(|| Error::Data("response lacks an overall score".into())),
        ScoreMode::FineGrained => {
            let kept: Vec<f64> = r
                .aspects
                .iter()
                .filter(|(name, _)| !excluded.iter().any(|e| e == *name))
                .map(|(_, &v)| v)
                .collect();
            if kept.is_empty() {
                return Err(Error::Data("response has no usable aspect scores".into()));
            }
            Ok(kept.iter().sum::<f64>() / kept.len() as f64)
        }
    }
}

/// Highest-scoring response becomes chosen (ties to the lowest index); the
/// rejected one is drawn uniformly from responses scoring strictly lower.
/// Returns `None` when every response has the same score.
pub fn binarize_scored(
    set: &ScoredResponseSet,
    mode: ScoreMode,
    excluded_aspects: &[String],
    seed: u64,
) -> Result<Option<PreferencePair>> {
    let scores = set
        .responses
        .iter()
        .map(|r| response_score(r, mode, excluded_aspects))
        .collect::<Result<Vec<f64>>>()?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("response {i} has a non-finite score")));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let lower: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] < scores[best]).collect();
    if lower.is_empty() {
        return Ok(None);
    }
    let pick = lower[seed::rng(seed).random_range(0..lower.len())];
    Ok(Some(PreferencePair {
        prompt: set.prompt.clone(),
        chosen: set.responses[best].content.clone(),
        rejected: set.responses[pick].content.clone(),
        source_tag: None,
    }))
}

// --------------------------------------------------------------- filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    EmptyPrompt,
    EmptyTurn,
    Tie,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::EmptyPrompt => "empty prompt",
            RejectReason::EmptyTurn => "empty turn",
            RejectReason::Tie => "tie",
        })
    }
}

/// Counts of removed records per reason.
pub type RejectionReport = BTreeMap<RejectReason, usize>;

/// Records that can be screened by [`filter_malformed`].
pub trait Screen {
    fn rejection(&self) -> Option<RejectReason>;
}

impl Screen for PreferencePair {
    fn rejection(&self) -> Option<RejectReason> {
        if self.prompt.is_empty() {
            Some(RejectReason::EmptyPrompt)
        } else if self.prompt.iter().any(|t| t.content.is_empty()) || self.chosen.is_empty() || self.rejected.is_empty()
        {
            Some(RejectReason::EmptyTurn)
        } else if self.chosen == self.rejected {
            Some(RejectReason::Tie)
        } else {
            None
        }
    }
}

/// A bare conversation.
impl Screen for Vec<Turn> {
    fn rejection(&self) -> Option<RejectReason> {
        if self.is_empty() {
            Some(RejectReason::EmptyPrompt)
        } else if self.iter().any(|t| t.content.is_empty()) {
            Some(RejectReason::EmptyTurn)
        } else {
            None
        }
    }
}

pub fn filter_malformed<T: Screen + Clone>(items: &[T]) -> (Vec<T>, RejectionReport) {
    let mut report = RejectionReport::new();
    let mut kept = Vec::with_capacity(items.len());
    for item in items {
        match item.rejection() {
            Some(reason) => *report.entry(reason).or_insert(0) += 1,
            None => kept.push(item.clone()),
        }
    }
    (kept, report)
}

// ------------------------------------------------------ sampling & remixing

/// Uniform sample of `min(n, len)` items without replacement, kept in their
/// original order.
pub fn downsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut idx = index::sample(&mut seed::rng(seed), items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Draw `target_size` prompts from the concatenated pools without
/// replacement; each pool's share of the draw is proportional to its weight.
/// Every returned prompt keeps the tag of the pool it came from.
pub fn remix_prompt_pools(pools: &[(PromptPool, f64)], target_size: usize, seed: u64) -> Result<PromptPool> {
    if let Some((p, w)) = pools.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config(format!("pool `{}` has invalid weight {w}", p.pool_tag)));
    }
    let weight_sum: f64 = pools.iter().map(|(_, w)| w).sum();
    if weight_sum.is_nan() || weight_sum <= 0.0 {
        return Err(Error::Config("pool weights must sum to a positive value".into()));
    }
    let mut items: Vec<(PoolPrompt, f64)> = Vec::new();
    for (pool, w) in pools {
        let per_item = if pool.is_empty() { 0.0 } else { w / pool.len() as f64 };
        for p in &pool.prompts {
            let mut p = p.clone();
            p.source.get_or_insert_with(|| pool.pool_tag.clone());
            items.push((p, per_item));
        }
    }
    let available = items.iter().filter(|(_, w)| *w > 0.0).count();
    if target_size > available {
        return Err(Error::Size { requested: target_size, available });
    }
    let chosen = if target_size == 0 {
        Vec::new()
    } else {
        let mut idx = index::sample_weighted(&mut seed::rng(seed), items.len(), |i| items[i].1, target_size)
            .map_err(|e| Error::Config(format!("weighted sampling failed: {e}")))?
            .into_vec();
        idx.sort_unstable();
        idx
    };
    let tags: HashSet<&str> = pools.iter().map(|(p, _)| p.pool_tag.as_str()).collect();
    let mut tags: Vec<&str> = tags.into_iter().collect();
    tags.sort_unstable();
    Ok(PromptPool {
        pool_tag: format!("remix({})", tags.join("+")),
        prompts: chosen.into_iter().map(|i| items[i].0.clone()).collect(),
    })
}
