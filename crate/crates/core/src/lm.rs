//! Toy causal-LM head.
//!
//! A model is a pair of `d × |V|` matrices: the embedding `E` and the
//! unembedding `U`, one column per token. The transformer body is not
//! modelled; callers hand in a [`HiddenState`] directly and the head turns it
//! into a next-token distribution `softmax(Uᵀh)`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numeric::{all_finite, log_add_exp, log_sum_exp, softmax};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(DVector<f64>);

impl HiddenState {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if !all_finite(values.as_slice()) {
            return Err(Error::Numeric("hidden state has non-finite entries".into()));
        }
        Ok(HiddenState(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(dim: usize) -> Self {
        HiddenState(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Exact next-token distribution over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Total probability assigned to `tokens`. Indices must be in range.
    pub fn mass_of(&self, tokens: &[usize]) -> f64 {
        tokens.iter().map(|&t| self.probs[t]).sum()
    }
}

/// Class mass `Σ_{v∈set} exp(U(v)ᵀh)` kept in log space, together with the
/// log partition function over the full vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMass {
    pub log_mass: f64,
    pub log_partition: f64,
}

impl ClassMass {
    /// Unnormalized mass. Overflows to `inf` only when the true value does.
    pub fn mass(&self) -> f64 {
        self.log_mass.exp()
    }

    /// Probability that the next token falls in the set.
    pub fn probability(&self) -> f64 {
        if self.log_mass == f64::NEG_INFINITY {
            return 0.0;
        }
        (self.log_mass - self.log_partition).exp()
    }
}

/// Embedding and unembedding matrices of a toy LM, one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingModel {
    embedding: DMatrix<f64>,
    unembedding: DMatrix<f64>,
    labels: Option<Vec<String>>,
}

impl UnembeddingModel {
    pub fn new(
        embedding: DMatrix<f64>,
        unembedding: DMatrix<f64>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if embedding.shape() != unembedding.shape() {
            return Err(Error::contract(format!(
                "embedding is {:?} but unembedding is {:?}",
                embedding.shape(),
                unembedding.shape()
            )));
        }
        if embedding.ncols() == 0 || embedding.nrows() == 0 {
            return Err(Error::contract(
                "model needs at least one token and one dimension",
            ));
        }
        if !all_finite(embedding.as_slice()) || !all_finite(unembedding.as_slice()) {
            return Err(Error::Numeric(
                "model matrices contain non-finite entries".into(),
            ));
        }
        if let Some(labels) = &labels {
            if labels.len() != embedding.ncols() {
                return Err(Error::contract(format!(
                    "{} labels for {} tokens",
                    labels.len(),
                    embedding.ncols()
                )));
            }
        }
        Ok(Self {
            embedding,
            unembedding,
            labels,
        })
    }

    /// Model whose embedding equals its unembedding (tied weights).
    pub fn tied(unembedding: DMatrix<f64>) -> Result<Self> {
        Self::new(unembedding.clone(), unembedding, None)
    }

    pub fn vocab_size(&self) -> usize {
        self.unembedding.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.unembedding.nrows()
    }

    pub fn embedding(&self) -> &DMatrix<f64> {
        &self.embedding
    }

    pub fn unembedding(&self) -> &DMatrix<f64> {
        &self.unembedding
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// `U(v)` as a contiguous slice.
    pub fn unembedding_column(&self, token: usize) -> &[f64] {
        let d = self.embed_dim();
        &self.unembedding.as_slice()[token * d..(token + 1) * d]
    }

    /// `E(v)` as a contiguous slice.
    pub fn embedding_column(&self, token: usize) -> &[f64] {
        let d = self.embed_dim();
        &self.embedding.as_slice()[token * d..(token + 1) * d]
    }

    fn check_state(&self, h: &HiddenState) -> Result<()> {
        if h.dim() != self.embed_dim() {
            return Err(Error::contract(format!(
                "hidden state has dimension {} but model embed_dim is {}",
                h.dim(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::contract(format!(
                "token index {bad} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// All logits `Uᵀh`.
    pub fn logits(&self, h: &HiddenState) -> Result<Vec<f64>> {
        self.check_state(h)?;
        let logits = self.unembedding.tr_mul(h.as_vector());
        if !all_finite(logits.as_slice()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(logits.as_slice().to_vec())
    }

    pub fn next_token_distribution(&self, h: &HiddenState) -> Result<TokenDistribution> {
        let logits = self.logits(h)?;
        Ok(TokenDistribution {
            probs: softmax(&logits),
        })
    }

    /// Class mass of `tokens` at state `h`. An empty set has zero mass.
    pub fn class_mass(&self, h: &HiddenState, tokens: &[usize]) -> Result<ClassMass> {
        self.check_tokens(tokens)?;
        let logits = self.logits(h)?;
        let selected: Vec<f64> = tokens.iter().map(|&t| logits[t]).collect();
        Ok(ClassMass {
            log_mass: log_sum_exp(&selected),
            log_partition: log_sum_exp(&logits),
        })
    }

    /// Masses of two classes at once; `p1 + p2` equals one when the classes
    /// partition the vocabulary.
    pub fn class_pair(
        &self,
        h: &HiddenState,
        c1: &[usize],
        c2: &[usize],
    ) -> Result<(ClassMass, ClassMass)> {
        Ok((self.class_mass(h, c1)?, self.class_mass(h, c2)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        file.into_model().map_err(|e| match e {
            Error::Contract(msg) | Error::Numeric(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: FORMAT_VERSION,
            vocab_size: self.vocab_size(),
            embed_dim: self.embed_dim(),
            embedding: rows_of(&self.embedding),
            unembedding: rows_of(&self.unembedding),
            labels: self.labels.clone(),
        }
    }
}

/// On-disk form of [`UnembeddingModel`]. Matrices are row-major nested
/// arrays of shape `embed_dim × vocab_size`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub vocab_size: usize,
    pub embed_dim: usize,
    #[serde(rename = "E")]
    pub embedding: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    pub unembedding: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<UnembeddingModel> {
        if self.version != FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported model file version {}",
                self.version
            )));
        }
        let e = matrix_from_rows(&self.embedding, self.embed_dim, self.vocab_size, "E")?;
        let u = matrix_from_rows(&self.unembedding, self.embed_dim, self.vocab_size, "U")?;
        UnembeddingModel::new(e, u, self.labels)
    }
}

/// Builds a matrix from row-major nested arrays, checking the declared shape.
pub fn matrix_from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    field: &str,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::contract(format!(
            "`{field}` has {} rows, expected {nrows}",
            rows.len()
        )));
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::contract(format!(
            "`{field}` row {i} has {} entries, expected {ncols}",
            row.len()
        )));
    }
    let m = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    if !all_finite(m.as_slice()) {
        return Err(Error::Numeric(format!("`{field}` has non-finite entries")));
    }
    Ok(m)
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Normalized probability of a set, from two log masses.
pub fn pair_probability(log_a: f64, log_b: f64) -> f64 {
    if log_a == f64::NEG_INFINITY {
        return 0.0;
    }
    (log_a - log_add_exp(log_a, log_b)).exp()
}
