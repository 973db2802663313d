//! Pluggable frozen encoders and the embedding file format.
//!
//! The toy text encoder replaces a large pretrained model: discrete
//! tokens are looked up in a frozen unit-norm table, continuous tokens
//! (learnable descriptors, object tokens) pass through unchanged, and
//! the prompt query is the mean of the token rows. Precomputed
//! embeddings from a real encoder can be swapped in through
//! `load_embedding_file`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::nn::LinearWeights;
use crate::numerics::param::{ParamSet, Session};
use crate::numerics::rng::{normal_vec, Prng};
use crate::numerics::tape::{vstack, Tensor};

pub type TokenId = usize;

/// Frozen token table: contiguous ids, unit-norm rows.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, TokenId>,
    table: DenseArray,
    dim: usize,
}

impl Vocabulary {
    /// Builds a seeded table with one unit-norm row per token.
    pub fn seeded(tokens: &[&str], dim: usize, rng: &mut Prng) -> Result<Self> {
        let mut names = Vec::with_capacity(tokens.len());
        let mut ids = HashMap::new();
        let mut rows = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.to_string(), i).is_some() {
                return Err(Error::Construction(format!("duplicate token '{tok}'")));
            }
            names.push(tok.to_string());
            let mut row = normal_vec(dim, rng);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Construction("zero-norm token row".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            rows.push(row);
        }
        let table = DenseArray::from_rows(&rows)?;
        Ok(Vocabulary {
            names,
            ids,
            table,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token '{token}'")))
    }

    pub fn embedding(&self, id: TokenId) -> Result<&[f64]> {
        if id >= self.names.len() {
            return Err(Error::Vocabulary(format!(
                "token id {id} out of range (|V| = {})",
                self.names.len()
            )));
        }
        Ok(self.table.row(id))
    }
}

/// One slot in a prompt template: a vocabulary lookup or a continuous
/// (usually learnable) embedding already on the tape.
#[derive(Clone)]
pub enum TokenInput {
    Discrete(TokenId),
    Continuous(Tensor),
}

/// Encoded prompt: per-token rows plus their mean `q`.
#[derive(Clone, Debug)]
pub struct PromptQuery {
    /// `[1 x D]` mean of the token rows.
    pub q: Tensor,
    /// `[L_tok x D]` per-token sequence.
    pub tokens: Tensor,
    /// Source prompt id `(roi, template)`.
    pub prompt_id: (usize, usize),
}

/// Projected visual-language tokens for one RoI.
#[derive(Clone, Debug)]
pub struct VisualTokens {
    /// `[n_F x D]`: projected RoI feature token, projected scene context
    /// token.
    pub tokens: Tensor,
    pub roi_id: usize,
}

/// Encodes a token sequence: table lookups for discrete tokens,
/// pass-through for continuous ones, `q` = row mean.
pub fn toy_encode_tokens(
    sess: &mut Session,
    tokens: &[TokenInput],
    vocab: &Vocabulary,
    prompt_id: (usize, usize),
) -> Result<PromptQuery> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("empty token list".into()));
    }
    let mut rows = Vec::with_capacity(tokens.len());
    for tok in tokens {
        match tok {
            TokenInput::Discrete(id) => {
                let row = vocab.embedding(*id)?.to_vec();
                rows.push(sess.constant(DenseArray::row_vector(row)?));
            }
            TokenInput::Continuous(t) => {
                if t.rows() != 1 || t.cols() != vocab.dim() {
                    return Err(Error::Dimension(format!(
                        "continuous token [{}x{}], expected [1x{}]",
                        t.rows(),
                        t.cols(),
                        vocab.dim()
                    )));
                }
                rows.push(t.clone());
            }
        }
    }
    let tokens = vstack(&rows)?;
    let q = tokens.mean_rows();
    Ok(PromptQuery {
        q,
        tokens,
        prompt_id,
    })
}

/// Projects the RoI feature and the scene context into the prompt
/// space, producing the two visual-language tokens `F`.
pub fn build_visual_tokens(
    sess: &mut Session,
    params: &ParamSet,
    roi_feature: &DenseArray,
    scene_context: &DenseArray,
    projection: &LinearWeights,
    roi_id: usize,
) -> Result<VisualTokens> {
    let (fr, fc) = roi_feature.dims2()?;
    let (cr, cc) = scene_context.dims2()?;
    if fr != 1 || cr != 1 || fc != cc {
        return Err(Error::Dimension(format!(
            "visual tokens expect [1 x D_v] inputs, got [{fr}x{fc}] and [{cr}x{cc}]"
        )));
    }
    let feat = sess.constant(roi_feature.clone());
    let ctx = sess.constant(scene_context.clone());
    let t0 = projection.forward(sess, params, &feat)?;
    let t1 = projection.forward(sess, params, &ctx)?;
    let tokens = vstack(&[t0, t1])?;
    Ok(VisualTokens { tokens, roi_id })
}

/// Formats one `f64` with 17 significant digits, enough for an exact
/// round-trip through decimal text.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Deserialize)]
struct EmbeddingHeader {
    dim: usize,
    count: usize,
}

/// Keyed matrix of same-width embedding rows, insertion-ordered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        EmbeddingFile {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, row: Vec<f64>) -> Result<()> {
        let key = key.into();
        if key.contains(',') || key.contains('\n') {
            return Err(Error::Value(format!(
                "embedding key '{key}' contains ',' or newline"
            )));
        }
        if row.len() != self.dim {
            return Err(Error::Dimension(format!(
                "row for '{key}' has {} values, dim is {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite value in row '{key}'")));
        }
        self.entries.push((key, row));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Writes the Embedding File format: a JSON header line followed by
/// `key,v1,...,vD` rows at 17 significant digits.
pub fn save_embedding_file(path: &Path, file: &EmbeddingFile) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "{{\"dim\": {}, \"count\": {}}}",
        file.dim,
        file.entries.len()
    )
    .expect("write to string");
    for (key, row) in &file.entries {
        out.push_str(key);
        for v in row {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parses the Embedding File format, rejecting malformed headers,
/// ragged rows, and non-finite values.
pub fn load_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse("empty embedding file (missing header)".into()))??;
    let header: EmbeddingHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Parse(format!("malformed embedding header: {e}")))?;
    let mut file = EmbeddingFile::new(header.dim);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let key = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("line {}: missing key", lineno + 2)))?
            .to_string();
        let mut row = Vec::with_capacity(header.dim);
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad value '{p}': {e}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(Error::Value(format!(
                    "line {}: non-finite value in row '{key}'",
                    lineno + 2
                )));
            }
            row.push(v);
        }
        if row.len() != header.dim {
            return Err(Error::Dimension(format!(
                "line {}: row '{key}' has {} values, header dim is {}",
                lineno + 2,
                row.len(),
                header.dim
            )));
        }
        file.entries.push((key, row));
    }
    if file.entries.len() != header.count {
        return Err(Error::Parse(format!(
            "header count {} but {} rows present",
            header.count,
            file.entries.len()
        )));
    }
    Ok(file)
}
