//! Expression tokenization and the bidirectional LSTM encoder.
//!
//! An expression is lowercased, split on whitespace/punctuation, and
//! mapped through a [`Vocab`] (out-of-vocabulary words become `<unk>`).
//! [`encode`] embeds the ids and runs one LSTM in each direction; the
//! per-word code is the concatenation `[fwd_state_n, bwd_state_n]` of
//! width `2H`. Expressions are encoded one at a time, so no padding is
//! ever inserted inside a sequence (`<pad>` exists only as the reserved
//! id 0).

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor, TensorError};

/// Reserved padding id (kept at 0 by construction; unused inside a
/// single-expression encode).
pub const PAD: usize = 0;
/// Reserved id for out-of-vocabulary words.
pub const UNK: usize = 1;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("expression is empty after tokenization")]
    EmptyExpression,
    #[error("token id {id} out of range for vocabulary of {size}")]
    BadTokenId { id: usize, size: usize },
    #[error("vocab file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab file malformed: {0}")]
    Malformed(String),
}

/// Word list with dense ids; index = position in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a word list. `<pad>` and `<unk>` are prepended.
    pub fn new(words: &[&str]) -> Vocab {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        all.extend(words.iter().map(|w| w.to_string()));
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words: all, index }
    }

    /// The fixed vocabulary of the synthetic expression grammar.
    pub fn builtin() -> Vocab {
        Vocab::new(&[
            "the", "on", "near", "left", "right", "top", "bottom", "red", "green", "blue", "yellow",
            "square", "circle", "triangle",
        ])
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Tokenize and map to ids (`<unk>` for unknown words).
    pub fn encode(&self, expression: &str) -> Result<Vec<usize>, TextError> {
        let tokens = tokenize(expression)?;
        Ok(tokens.iter().map(|w| self.id(w).unwrap_or(UNK)).collect())
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>, TextError> {
        ids.iter()
            .map(|&id| self.word(id).ok_or(TextError::BadTokenId { id, size: self.len() }))
            .collect()
    }

    /// One word per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TextError> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.first().map(String::as_str) != Some("<pad>") || words.get(1).map(String::as_str) != Some("<unk>") {
            return Err(TextError::Malformed("expected <pad> and <unk> as the first two lines".into()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocab { words, index })
    }
}

/// Lowercase and split on whitespace and punctuation.
pub fn tokenize(expression: &str) -> Result<Vec<String>, TextError> {
    let lower = expression.to_lowercase();
    let tokens: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        return Err(TextError::EmptyExpression);
    }
    Ok(tokens)
}

/// Dimensions of the text encoder.
#[derive(Debug, Clone, Copy)]
pub struct TextDims {
    pub vocab: usize,
    /// Word embedding width E.
    pub embed: usize,
    /// Per-direction LSTM state width H.
    pub hidden: usize,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];
const DIRS: [&str; 2] = ["fwd", "bwd"];

/// Register embedding + LSTM parameters under `text/`.
pub fn register(params: &mut ParamStore, dims: &TextDims, rng: &mut ChaCha8Rng) {
    params.insert_uniform("text/embed", &[dims.vocab, dims.embed], 0.5, rng);
    let (e, h) = (dims.embed, dims.hidden);
    for dir in DIRS {
        for gate in GATES {
            params.insert_uniform(&format!("text/lstm/{dir}/{gate}/wx"), &[e, h], (1.0 / e as Real).sqrt(), rng);
            params.insert_uniform(&format!("text/lstm/{dir}/{gate}/wh"), &[h, h], (1.0 / h as Real).sqrt(), rng);
            // Forget gate starts open so early training can carry state.
            let bias = if gate == "f" { Tensor::filled(&[h], 1.0) } else { Tensor::zeros(&[h]) };
            params.insert(&format!("text/lstm/{dir}/{gate}/b"), bias);
        }
    }
}

/// Output of [`encode`]: per-word embeddings and BiLSTM codes.
#[derive(Debug)]
pub struct Encoded {
    /// `[N, E]` word embeddings.
    pub e: TensorId,
    /// `[N, 2H]` concatenated forward/backward states.
    pub h: TensorId,
    pub n: usize,
}

/// Encode a token sequence: embeddings, then one LSTM pass per direction.
pub fn encode(tape: &mut Tape, b: &Bindings, dims: &TextDims, tokens: &[usize]) -> Result<Encoded, TensorError> {
    if tokens.is_empty() {
        return Err(TensorError::invalid("text-encode", "empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= dims.vocab) {
        return Err(TensorError::invalid(
            "text-encode",
            format!("token id {bad} out of range for vocabulary of {}", dims.vocab),
        ));
    }
    let e = tape.gather_rows(b.p("text/embed"), tokens)?;
    let xs: Vec<TensorId> = (0..tokens.len()).map(|n| tape.gather_rows(e, &[n])).collect::<Result<_, _>>()?;

    let fwd = run_direction(tape, b, dims, "fwd", &xs)?;
    let mut rev_xs = xs.clone();
    rev_xs.reverse();
    let mut bwd = run_direction(tape, b, dims, "bwd", &rev_xs)?;
    bwd.reverse();

    let rows: Vec<TensorId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &k)| tape.concat(&[f, k]))
        .collect::<Result<_, _>>()?;
    let h = tape.stack_rows(&rows)?;
    Ok(Encoded { e, h, n: tokens.len() })
}

/// One LSTM direction over embedded rows `[1, E]`; returns the `[1, H]`
/// state after each step, in input order.
fn run_direction(
    tape: &mut Tape,
    b: &Bindings,
    dims: &TextDims,
    dir: &str,
    xs: &[TensorId],
) -> Result<Vec<TensorId>, TensorError> {
    let h0 = tape.constant(Tensor::zeros(&[1, dims.hidden]))?;
    let (mut h, mut c) = (h0, h0);
    let mut out = Vec::with_capacity(xs.len());
    let gate = |tape: &mut Tape, b: &Bindings, name: &str, x: TensorId, h: TensorId| -> Result<TensorId, TensorError> {
        let xa = tape.matmul(x, b.p(&format!("text/lstm/{dir}/{name}/wx")))?;
        let ha = tape.matmul(h, b.p(&format!("text/lstm/{dir}/{name}/wh")))?;
        let s = tape.add(xa, ha)?;
        tape.add_bias(s, b.p(&format!("text/lstm/{dir}/{name}/b")))
    };
    for &x in xs {
        let i_raw = gate(tape, b, "i", x, h)?;
        let f_raw = gate(tape, b, "f", x, h)?;
        let g_raw = gate(tape, b, "g", x, h)?;
        let o_raw = gate(tape, b, "o", x, h)?;
        let i = tape.sigmoid(i_raw)?;
        let f = tape.sigmoid(f_raw)?;
        let g = tape.tanh(g_raw)?;
        let o = tape.sigmoid(o_raw)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let ct = tape.tanh(c)?;
        h = tape.mul(o, ct)?;
        out.push(h);
    }
    Ok(out)
}
