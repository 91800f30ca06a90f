//! Deterministic stand-in policies for exercising the protocol loop and the
//! evaluation harness without a trained model.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::policy::vocab::{self, Symbol, Vocabulary, VOCAB_SIZE};
use crate::policy::Policy;

const CONTEXT: usize = 1 << 16;
const SURE: f64 = 0.0;
const NEVER: f64 = -1e9;

type ScriptFn = dyn Fn(&str) -> String + Send + Sync;

/// Emits a script derived from the source sentence, skipping over any
/// injected `<matches>` blocks. Emits end-of-sequence once the script is
/// exhausted.
#[derive(Clone)]
pub struct ScriptedPolicy {
    script: Arc<ScriptFn>,
}

#[derive(Debug, Clone)]
pub struct ScriptState {
    script: Vec<Symbol>,
    cursor: usize,
    in_block: bool,
    len: usize,
}

impl ScriptedPolicy {
    /// `script` receives the source sentence parsed from the prompt.
    pub fn new(script: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        ScriptedPolicy {
            script: Arc::new(script),
        }
    }

    /// Always emits `text`.
    pub fn fixed(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_| text.clone())
    }
}

fn source_of(prompt: &str) -> &str {
    const MARKER: &str = "Spanish text: ";
    prompt.rfind(MARKER).map(|i| &prompt[i + MARKER.len()..]).unwrap_or(prompt)
}

impl Policy for ScriptedPolicy {
    type State = ScriptState;

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn context_limit(&self) -> usize {
        CONTEXT
    }

    fn prompt_window(&self) -> usize {
        CONTEXT / 2
    }

    fn start(&self, prefix: &[Symbol]) -> Result<ScriptState> {
        if prefix.len() > CONTEXT {
            return Err(Error::ContextOverflow {
                len: prefix.len(),
                limit: CONTEXT,
            });
        }
        let vocab = Vocabulary::standard();
        let prompt = vocab.decode(prefix);
        let script = vocab.encode(&(self.script)(source_of(&prompt)));
        Ok(ScriptState {
            script,
            cursor: 0,
            in_block: false,
            len: prefix.len(),
        })
    }

    fn advance(&self, state: &mut ScriptState, symbol: Symbol) -> Result<()> {
        state.len += 1;
        let expected = state.script.get(state.cursor).copied();
        if state.in_block {
            if symbol == vocab::MATCHES_CLOSE {
                state.in_block = false;
            }
        } else if symbol == vocab::MATCHES_OPEN && expected != Some(vocab::MATCHES_OPEN) {
            state.in_block = true;
        } else {
            state.cursor += 1;
        }
        Ok(())
    }

    fn next_logits(&self, state: &ScriptState) -> Vec<f64> {
        let next = state.script.get(state.cursor).copied().unwrap_or(vocab::EOS);
        let mut logits = vec![NEVER; VOCAB_SIZE];
        logits[next as usize] = SURE;
        logits
    }

    fn position(&self, state: &ScriptState) -> usize {
        state.len
    }
}

/// Stateless policy with fixed logits, typically concentrated on tags and a
/// handful of letters to produce adversarial transcripts.
#[derive(Debug, Clone)]
pub struct FixedLogitsPolicy {
    logits: Vec<f64>,
    context: usize,
}

impl FixedLogitsPolicy {
    /// Uniform over `symbols`, impossible elsewhere.
    pub fn uniform_over(symbols: &[Symbol]) -> Self {
        let mut logits = vec![NEVER; VOCAB_SIZE];
        for &s in symbols {
            logits[s as usize] = SURE;
        }
        FixedLogitsPolicy {
            logits,
            context: CONTEXT,
        }
    }

    pub fn with_logits(logits: Vec<f64>) -> Self {
        FixedLogitsPolicy {
            logits,
            context: CONTEXT,
        }
    }
}

impl Policy for FixedLogitsPolicy {
    type State = usize;

    fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    fn context_limit(&self) -> usize {
        self.context
    }

    fn prompt_window(&self) -> usize {
        self.context / 2
    }

    fn start(&self, prefix: &[Symbol]) -> Result<usize> {
        if prefix.len() > self.context {
            return Err(Error::ContextOverflow {
                len: prefix.len(),
                limit: self.context,
            });
        }
        Ok(prefix.len())
    }

    fn advance(&self, state: &mut usize, _symbol: Symbol) -> Result<()> {
        *state += 1;
        Ok(())
    }

    fn next_logits(&self, _state: &usize) -> Vec<f64> {
        self.logits.clone()
    }

    fn position(&self, state: &usize) -> usize {
        *state
    }
}
