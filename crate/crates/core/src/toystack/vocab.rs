//! Toy whitespace tokenizer over the synthetic vocabulary, plus the two
//! fixed task prompts.

use crate::datasynth::{source_word, target_word};
use crate::error::{Error, Result};
use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const PROMPT_WORDS: [&str; 7] = ["can", "you", "transcribe", "translate", "from", "to", "?"];
const LANG_TAGS: [&str; 2] = ["en", "de"];

/// Word-level vocabulary: specials, prompt words, language tags, then the
/// source and (disjoint) target synthetic vocabularies.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_source: usize,
}

impl Vocab {
    pub fn build(n_source: usize) -> Vocab {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        tokens.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(LANG_TAGS.iter().map(|s| s.to_string()));
        for k in 0..n_source {
            tokens.push(source_word(k));
        }
        for k in 0..n_source {
            tokens.push(target_word(k));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            n_source,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn source_id(&self, k: usize) -> usize {
        3 + PROMPT_WORDS.len() + LANG_TAGS.len() + k
    }

    pub fn target_id(&self, k: usize) -> usize {
        self.source_id(k) + self.n_source
    }

    /// Whitespace tokenization; a trailing `?` splits into its own token so
    /// the prompt templates need no special casing.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let (head, question) = match word.strip_suffix('?') {
                Some(head) if !head.is_empty() => (head, true),
                _ => (word, false),
            };
            let id = self
                .id(head)
                .ok_or_else(|| Error::Data(format!("unknown token `{head}`")))?;
            out.push(id);
            if question {
                out.push(self.id("?").expect("? is in the vocabulary"));
            }
        }
        Ok(out)
    }

    /// Joins tokens with spaces, skipping the special markers.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Asr,
    St,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::St => "st",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(Task::Asr),
            "st" => Ok(Task::St),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub task: Task,
    pub source_lang: String,
    pub target_lang: Option<String>,
}

impl PromptSpec {
    pub fn asr(source_lang: &str) -> Self {
        Self {
            task: Task::Asr,
            source_lang: source_lang.to_string(),
            target_lang: None,
        }
    }

    pub fn st(source_lang: &str, target_lang: &str) -> Self {
        Self {
            task: Task::St,
            source_lang: source_lang.to_string(),
            target_lang: Some(target_lang.to_string()),
        }
    }
}

/// Renders the task template and tokenizes it.
pub fn build_prompt(spec: &PromptSpec, vocab: &Vocab) -> Result<Vec<usize>> {
    let text = match spec.task {
        Task::Asr => format!("can you transcribe {}?", spec.source_lang),
        Task::St => {
            let target = spec.target_lang.as_ref().ok_or_else(|| {
                Error::Config("translation prompt requires a target language".into())
            })?;
            format!("can you translate from {} to {}?", spec.source_lang, target)
        }
    };
    vocab.tokenize(&text)
}
