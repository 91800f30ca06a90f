//! Tag grammar and the generation/tool interaction loop.
//!
//! The model requests a lookup by emitting `<spa_to_wayuu> word
//! </spa_to_wayuu>`; the loop answers with a `<matches> ... </matches>` block
//! that is injected into the transcript as environment text. Generation ends
//! at the first complete `<answer> ... </answer>` span, an end-of-sequence
//! symbol, or when the token budget runs out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, DictionaryEntry, DEFAULT_MAX_MATCHES};
use crate::error::{Error, Result};
use crate::policy::vocab::{self, Symbol, Vocabulary};
use crate::policy::{sample_from_logits, GenerationConfig, Policy};

/// The six protocol tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagSet {
    pub tool_open: &'static str,
    pub tool_close: &'static str,
    pub matches_open: &'static str,
    pub matches_close: &'static str,
    pub answer_open: &'static str,
    pub answer_close: &'static str,
}

pub const TAGS: TagSet = TagSet {
    tool_open: "<spa_to_wayuu>",
    tool_close: "</spa_to_wayuu>",
    matches_open: "<matches>",
    matches_close: "</matches>",
    answer_open: "<answer>",
    answer_close: "</answer>",
};

impl TagSet {
    pub fn all(&self) -> [&'static str; 6] {
        [
            self.tool_open,
            self.tool_close,
            self.matches_open,
            self.matches_close,
            self.answer_open,
            self.answer_close,
        ]
    }
}

/// Instruction prompt; `{}` is replaced by the source sentence.
pub const PROMPT_TEMPLATE: &str = "Translate the following Spanish text into Wayuunaiki. Begin by identifying any words or phrases you're unsure how to translate. Then, you may look up those words using the dictionary tool by wrapping the Spanish word in <spa_to_wayuu> and </spa_to_wayuu>, and doing that for every unknown word. The dictionary will return matches enclosed in <matches> and </matches>. You can use the dictionary as many times as necessary.
Once you have all the information you need, provide the final translation enclosed in <answer> and </answer>. For example: <answer> xxx </answer>.
Spanish text: {}";

/// Sentinel rendered when a lookup finds nothing.
pub const NO_RESULTS: &str = "NO RESULTS";

/// Default cap on serviced tool calls per episode.
pub const DEFAULT_TOOL_BUDGET: usize = 4;

pub fn build_prompt(source_text: &str) -> Result<String> {
    if source_text.is_empty() {
        return Err(Error::InvalidArgument("source text is empty".into()));
    }
    Ok(PROMPT_TEMPLATE.replacen("{}", source_text, 1))
}

/// A complete tool call found in generated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingCall {
    pub query: String,
    /// Character offsets `[start, end)` of the whole call, tags included.
    pub span: (usize, usize),
}

/// Earliest well-formed `<spa_to_wayuu> ... </spa_to_wayuu>` pair in `text`.
///
/// The first closing tag preceded by an opening tag fires, paired with the
/// nearest opening tag before it; stray closers and outer unmatched openers
/// are ignored.
pub fn scan_pending_tool_call(text: &str) -> Option<PendingCall> {
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(TAGS.tool_close) {
        let close = search_from + rel;
        if let Some(open) = text[..close].rfind(TAGS.tool_open) {
            let inner = &text[open + TAGS.tool_open.len()..close];
            let end = close + TAGS.tool_close.len();
            let start_chars = text[..open].chars().count();
            let end_chars = start_chars + text[open..end].chars().count();
            return Some(PendingCall {
                query: inner.trim().to_string(),
                span: (start_chars, end_chars),
            });
        }
        search_from = close + TAGS.tool_close.len();
    }
    None
}

/// `<matches> s1: t1; s2: t2 </matches>`, or the no-results sentinel.
pub fn render_matches<E: std::borrow::Borrow<DictionaryEntry>>(matches: &[E]) -> String {
    if matches.is_empty() {
        return format!("{} {} {}", TAGS.matches_open, NO_RESULTS, TAGS.matches_close);
    }
    let body = matches
        .iter()
        .map(|e| {
            let e = e.borrow();
            format!("{}: {}", e.source_text, e.target_text)
        })
        .collect::<Vec<_>>()
        .join("; ");
    format!("{} {} {}", TAGS.matches_open, body, TAGS.matches_close)
}

/// Trimmed content of the first complete answer span.
pub fn extract_answer(text: &str) -> Option<String> {
    let open = text.find(TAGS.answer_open)?;
    let content_start = open + TAGS.answer_open.len();
    let close = text[content_start..].find(TAGS.answer_close)?;
    Some(text[content_start..content_start + close].trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    ModelGenerated,
    ToolInjected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub token_ids: Vec<Symbol>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub query: String,
    pub match_count: usize,
}

/// One tool-augmented generation transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub prompt_text: String,
    /// Trailing prompt symbols the policy actually conditioned on.
    pub prompt_token_count: usize,
    pub segments: Vec<Segment>,
    pub tool_calls: Vec<ToolCallRecord>,
    pub answer: Option<String>,
    pub truncated: bool,
    pub budget: usize,
}

impl Episode {
    /// Everything after the prompt, tool blocks included.
    pub fn completion_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Concatenated model-generated text.
    pub fn generated_text(&self) -> String {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ModelGenerated)
            .map(|s| s.text.as_str())
            .collect()
    }

    pub fn prompt_symbols(&self) -> Vec<Symbol> {
        let all = Vocabulary::standard().encode(&self.prompt_text);
        let keep = self.prompt_token_count.min(all.len());
        all[all.len() - keep..].to_vec()
    }

    /// The full conditioned sequence: prompt window followed by all segments.
    pub fn symbols(&self) -> Vec<Symbol> {
        let mut out = self.prompt_symbols();
        for seg in &self.segments {
            out.extend_from_slice(&seg.token_ids);
        }
        out
    }

    /// Aligned with [`symbols`](Self::symbols): true exactly at
    /// model-generated positions.
    pub fn generated_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.prompt_token_count.min(self.prompt_symbols().len())];
        for seg in &self.segments {
            let generated = seg.kind == SegmentKind::ModelGenerated;
            mask.extend(std::iter::repeat_n(generated, seg.token_ids.len()));
        }
        mask
    }

    pub fn generated_token_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ModelGenerated)
            .map(|s| s.token_ids.len())
            .sum()
    }

    pub fn injected_segment_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::ToolInjected).count()
    }

    pub fn successful_calls(&self) -> usize {
        self.tool_calls.iter().filter(|c| c.match_count > 0).count()
    }
}

/// Keeps the trailing `window` symbols of an encoded prompt.
pub fn window_prompt(prompt: &[Symbol], window: usize) -> &[Symbol] {
    &prompt[prompt.len().saturating_sub(window)..]
}

/// Runs one episode with an rng seeded from `gen.seed`.
pub fn run_tool_loop<P: Policy>(
    policy: &P,
    source_text: &str,
    dict: Option<&Dictionary>,
    budget: usize,
    gen: &GenerationConfig,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    run_tool_loop_with_rng(policy, source_text, dict, budget, gen, &mut rng)
}

/// A prompt already fed through the policy. Cloning it lets several
/// episodes share one prefill.
pub struct PreparedPrompt<S> {
    pub prompt_text: String,
    pub prompt_token_count: usize,
    pub state: S,
}

impl<S: Clone> Clone for PreparedPrompt<S> {
    fn clone(&self) -> Self {
        PreparedPrompt {
            prompt_text: self.prompt_text.clone(),
            prompt_token_count: self.prompt_token_count,
            state: self.state.clone(),
        }
    }
}

/// Builds the prompt for `source_text`, keeps its trailing window and feeds
/// it to the policy.
pub fn prepare_prompt<P: Policy>(policy: &P, source_text: &str) -> Result<PreparedPrompt<P::State>> {
    let prompt_text = build_prompt(source_text)?;
    let encoded = Vocabulary::standard().encode(&prompt_text);
    let window = policy.prompt_window().min(policy.context_limit().saturating_sub(1)).max(1);
    let prompt = window_prompt(&encoded, window);
    let state = policy.start(prompt)?;
    Ok(PreparedPrompt {
        prompt_token_count: prompt.len(),
        prompt_text,
        state,
    })
}

/// Alternates sampling and tool servicing until an answer closes, the
/// policy emits end-of-sequence, or the token budget or context runs out.
pub fn run_tool_loop_with_rng<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    source_text: &str,
    dict: Option<&Dictionary>,
    budget: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Episode> {
    gen.validate()?;
    let prepared = prepare_prompt(policy, source_text)?;
    continue_episode(policy, prepared, dict, budget, gen, rng)
}

/// Runs the tool loop from an already prepared prompt.
pub fn continue_episode<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    prepared: PreparedPrompt<P::State>,
    dict: Option<&Dictionary>,
    budget: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Episode> {
    gen.validate()?;
    let vocab = Vocabulary::standard();
    let PreparedPrompt {
        prompt_text,
        prompt_token_count,
        mut state,
    } = prepared;

    let mut segments: Vec<Segment> = Vec::new();
    let mut current: Vec<Symbol> = Vec::new();
    let mut generated_before = String::new();
    let mut tool_calls = Vec::new();
    let mut remaining = budget;
    let mut new_tokens = 0;
    let mut truncated = false;
    let mut answer = None;

    loop {
        if new_tokens >= gen.max_new_tokens || policy.position(&state) >= policy.context_limit() {
            truncated = true;
            break;
        }
        let symbol = sample_from_logits(&policy.next_logits(&state), gen.temperature, rng);
        current.push(symbol);
        new_tokens += 1;

        if symbol == vocab::EOS {
            break;
        }
        if symbol == vocab::ANSWER_CLOSE {
            let generated = generated_before.clone() + &vocab.decode(&current);
            if let Some(a) = extract_answer(&generated) {
                answer = Some(a);
                break;
            }
        }
        if symbol == vocab::TOOL_CLOSE && remaining > 0 {
            if let Some(dict) = dict {
                if let Some(call) = scan_pending_tool_call(&vocab.decode(&current)) {
                    let matches = dict.lookup_refs(&call.query, DEFAULT_MAX_MATCHES);
                    let block = render_matches(&matches);
                    let block_ids = vocab.encode(&block);
                    if policy.position(&state) + 1 + block_ids.len() > policy.context_limit() {
                        truncated = true;
                        break;
                    }
                    policy.advance(&mut state, symbol)?;
                    for &id in &block_ids {
                        policy.advance(&mut state, id)?;
                    }
                    let text = vocab.decode(&current);
                    generated_before.push_str(&text);
                    segments.push(Segment {
                        kind: SegmentKind::ModelGenerated,
                        token_ids: std::mem::take(&mut current),
                        text,
                    });
                    segments.push(Segment {
                        kind: SegmentKind::ToolInjected,
                        token_ids: block_ids,
                        text: block,
                    });
                    tool_calls.push(ToolCallRecord {
                        query: call.query,
                        match_count: matches.len(),
                    });
                    remaining -= 1;
                    continue;
                }
            }
        }
        if new_tokens >= gen.max_new_tokens || policy.position(&state) >= policy.context_limit() {
            truncated = true;
            break;
        }
        policy.advance(&mut state, symbol)?;
    }

    if !current.is_empty() {
        segments.push(Segment {
            kind: SegmentKind::ModelGenerated,
            text: vocab.decode(&current),
            token_ids: current,
        });
    }
    Ok(Episode {
        prompt_text,
        prompt_token_count,
        segments,
        tool_calls,
        answer,
        truncated,
        budget,
    })
}
