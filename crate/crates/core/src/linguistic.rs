//! Vocabulary, tokenization and the linguistic branch.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamId, Session};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::transformer::EncoderStack;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Word ↔ id map. Ids 0..4 are `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(expression: &str) -> impl Iterator<Item = String> + '_ {
    expression.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Ids are assigned in order of first occurrence.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vocab = Self::from_tokens(RESERVED.iter().map(|s| s.to_string()))?;
        let mut seen_any = false;
        for expr in corpus {
            seen_any = true;
            for w in words(expr) {
                if !vocab.index.contains_key(&w) {
                    vocab.index.insert(w.clone(), vocab.tokens.len());
                    vocab.tokens.push(w);
                }
            }
        }
        if !seen_any {
            return Err(Error::Contract("vocabulary needs a non-empty corpus".into()));
        }
        Ok(vocab)
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        if tokens.len() < 4 || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// `[CLS] w₁..w_m [SEP] [PAD]…` of fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    /// True on non-`[PAD]` positions.
    pub mask: Vec<bool>,
}

impl EncodedText {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lowercases, splits on whitespace, keeps at most `max_len − 2` words.
pub fn tokenize(expression: &str, vocab: &Vocabulary, max_len: usize) -> Result<EncodedText> {
    if max_len < 3 {
        return Err(Error::Contract(format!("max expression length {max_len} < 3")));
    }
    let mut ids = vec![CLS];
    ids.extend(words(expression).take(max_len - 2).map(|w| vocab.id(&w)));
    ids.push(SEP);
    let valid = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < valid).collect();
    Ok(EncodedText { ids, mask })
}

/// Words between `[CLS]` and `[SEP]`, space separated.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .skip_while(|&&i| i == CLS)
        .take_while(|&&i| i != SEP && i != PAD)
        .filter_map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct LinguisticTokens {
    /// `[N_l × C_l]`
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub cls_index: usize,
}

#[derive(Clone, Debug)]
pub struct LinguisticBranch {
    /// `[vocab × C_l]`
    pub embedding: ParamId,
    /// `[max_len × C_l]` learnable positions, added to queries and keys.
    pub positions: ParamId,
    /// `None` disables the linguistic transformer.
    pub encoder: Option<EncoderStack>,
    pub dim: usize,
}

impl LinguisticBranch {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, text: &EncodedText) -> Result<LinguisticTokens> {
        let len = text.ids.len();
        if text.mask.len() != len {
            return Err(Error::Contract("token mask length differs from id count".into()));
        }
        let table = s.param(self.embedding);
        let x = s.tape.embedding_lookup(table, &text.ids)?;
        let embeddings = match &self.encoder {
            Some(stack) => {
                let table = s.param(self.positions);
                let max_len = s.tape.shape(table)[0];
                if len > max_len {
                    return Err(Error::Contract(format!(
                        "expression length {len} exceeds positional table of {max_len}"
                    )));
                }
                let pos = if len == max_len {
                    table
                } else {
                    s.tape.slice(table, 0, 0..len)?
                };
                stack.forward(s, x, &text.mask, Some(pos))?.0
            }
            None => x,
        };
        Ok(LinguisticTokens {
            embeddings,
            mask: text.mask.clone(),
            cls_index: 0,
        })
    }
}
