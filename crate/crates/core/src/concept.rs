//! Binary concepts and their linear representation vectors.
//!
//! A concept splits (part of) the vocabulary into two classes `c1` and `c2`.
//! Its representation vector `ℓ` is aligned when every `c1` token has
//! `U(v)ᵀℓ = p` and every `c2` token has `U(v)ᵀℓ = p − d`, so moving a hidden
//! state along `ℓ` by `λ` multiplies the odds of `c1` over `c2` by `e^{λd}`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::lm::UnembeddingModel;
use crate::numeric::{all_finite, l2_norm};
use crate::{Error, Result, FORMAT_VERSION};

/// Alignment tolerance used for synthetic, exactly constructed concepts.
pub const DEFAULT_TOL_ALIGN: f64 = 1e-8;

/// Alignment tolerance suggested for directions estimated from real models.
pub const REAL_MODEL_TOL_ALIGN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec {
    name: String,
    c1: Vec<usize>,
    c2: Vec<usize>,
    p: f64,
    d: f64,
    ell: Vec<f64>,
    partial: bool,
    tol_align: f64,
}

impl ConceptSpec {
    pub fn new(
        name: impl Into<String>,
        c1: Vec<usize>,
        c2: Vec<usize>,
        p: f64,
        d: f64,
        ell: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if !(p > 0.0 && p.is_finite()) || !(d > 0.0 && d.is_finite()) {
            return Err(Error::contract(format!(
                "concept `{name}`: p and d must be positive, got p={p}, d={d}"
            )));
        }
        if !all_finite(&ell) || ell.is_empty() {
            return Err(Error::contract(format!(
                "concept `{name}`: representation vector must be non-empty and finite"
            )));
        }
        check_disjoint(&name, &c1, &c2)?;
        Ok(Self {
            name,
            c1,
            c2,
            p,
            d,
            ell,
            partial: false,
            tol_align: DEFAULT_TOL_ALIGN,
        })
    }

    /// Marks the classes as covering only part of the vocabulary.
    pub fn partial(mut self, partial: bool) -> Self {
        self.partial = partial;
        self
    }

    pub fn with_tol_align(mut self, tol: f64) -> Result<Self> {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(Error::contract(format!(
                "tol_align must be non-negative, got {tol}"
            )));
        }
        self.tol_align = tol;
        Ok(self)
    }

    pub fn with_ell(mut self, ell: Vec<f64>) -> Result<Self> {
        if ell.len() != self.ell.len() || !all_finite(&ell) {
            return Err(Error::contract(
                "replacement representation vector is invalid",
            ));
        }
        self.ell = ell;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c1(&self) -> &[usize] {
        &self.c1
    }

    pub fn c2(&self) -> &[usize] {
        &self.c2
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn is_partial(&self) -> bool {
        self.partial
    }

    pub fn tol_align(&self) -> f64 {
        self.tol_align
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConceptFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        file.into_spec().map_err(|e| match e {
            Error::Contract(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }

    pub fn to_file(&self) -> ConceptFile {
        ConceptFile {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            c1: self.c1.clone(),
            c2: self.c2.clone(),
            p: self.p,
            d: self.d,
            ell: self.ell.clone(),
            partial: self.partial,
            tol_align: self.tol_align,
        }
    }
}

fn check_disjoint(name: &str, c1: &[usize], c2: &[usize]) -> Result<()> {
    let mut seen = HashSet::new();
    for &t in c1.iter().chain(c2) {
        if !seen.insert(t) {
            return Err(Error::contract(format!(
                "concept `{name}`: token {t} listed twice or in both classes"
            )));
        }
    }
    Ok(())
}

fn default_tol_align() -> f64 {
    DEFAULT_TOL_ALIGN
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptFile {
    pub version: u32,
    pub name: String,
    pub c1: Vec<usize>,
    pub c2: Vec<usize>,
    pub p: f64,
    pub d: f64,
    pub ell: Vec<f64>,
    #[serde(default)]
    pub partial: bool,
    #[serde(default = "default_tol_align")]
    pub tol_align: f64,
}

impl ConceptFile {
    pub fn into_spec(self) -> Result<ConceptSpec> {
        if self.version != FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported concept file version {}",
                self.version
            )));
        }
        ConceptSpec::new(self.name, self.c1, self.c2, self.p, self.d, self.ell)?
            .partial(self.partial)
            .with_tol_align(self.tol_align)
    }
}

/// Minimum-norm least-squares representation vector and its quality.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSolve {
    pub ell: Vec<f64>,
    /// `‖Aℓ − b‖₂` over the stacked alignment equations.
    pub residual_norm: f64,
    /// Largest absolute per-token alignment error.
    pub max_abs_residual: f64,
    /// Ratio of largest to smallest retained singular value.
    pub condition: f64,
    pub rank: usize,
}

/// Solves `U(v)ᵀℓ = p` for `v ∈ c1` and `U(v)ᵀℓ = p − d` for `v ∈ c2` in the
/// minimum-norm least-squares sense. The residual is reported; the caller
/// decides whether it is acceptable.
pub fn solve_representation_vector(
    model: &UnembeddingModel,
    c1: &[usize],
    c2: &[usize],
    p: f64,
    d: f64,
) -> Result<RepresentationSolve> {
    if c1.is_empty() || c2.is_empty() {
        return Err(Error::contract("both classes must be non-empty"));
    }
    if p.is_nan() || d.is_nan() || p <= 0.0 || d <= 0.0 {
        return Err(Error::contract(format!(
            "p and d must be positive, got p={p}, d={d}"
        )));
    }
    check_disjoint("<solve>", c1, c2)?;
    model.check_tokens(c1)?;
    model.check_tokens(c2)?;

    let tokens: Vec<usize> = c1.iter().chain(c2).copied().collect();
    let dim = model.embed_dim();
    let a = DMatrix::from_fn(tokens.len(), dim, |i, j| {
        model.unembedding_column(tokens[i])[j]
    });
    let b = DVector::from_fn(tokens.len(), |i, _| if i < c1.len() { p } else { p - d });

    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = sigma_max * f64::EPSILON * (tokens.len().max(dim) as f64);
    let retained: Vec<f64> = svd
        .singular_values
        .iter()
        .copied()
        .filter(|&s| s > cutoff)
        .collect();
    if retained.is_empty() {
        return Err(Error::Numeric(
            "unembedding rows of the classes are all zero".into(),
        ));
    }
    let ell = svd
        .solve(&b, cutoff)
        .map_err(|e| Error::Numeric(format!("least-squares solve failed: {e}")))?;
    let residual = &a * &ell - &b;
    let condition = sigma_max / retained.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RepresentationSolve {
        ell: ell.as_slice().to_vec(),
        residual_norm: residual.norm(),
        max_abs_residual: residual.amax(),
        condition,
        rank: retained.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl ClassStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            count: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

/// Outcome of [`validate_concept`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptReport {
    pub name: String,
    pub c1: Option<ClassStats>,
    pub c2: Option<ClassStats>,
    /// `min over c1 − max over c2`, when both classes are non-empty.
    pub gap: Option<f64>,
    /// Largest `|U(v)ᵀℓ − target|` over both classes.
    pub max_deviation: f64,
    pub tol_align: f64,
    pub partial: bool,
    pub coverage_complete: bool,
    pub passed: bool,
    pub problems: Vec<String>,
}

/// Checks the alignment of `spec` against the model's unembeddings.
pub fn validate_concept(model: &UnembeddingModel, spec: &ConceptSpec) -> Result<ConceptReport> {
    model.check_tokens(spec.c1())?;
    model.check_tokens(spec.c2())?;
    if spec.ell().len() != model.embed_dim() {
        return Err(Error::contract(format!(
            "concept `{}` vector has length {} but embed_dim is {}",
            spec.name(),
            spec.ell().len(),
            model.embed_dim()
        )));
    }
    let align = |v: usize| -> f64 {
        model
            .unembedding_column(v)
            .iter()
            .zip(spec.ell())
            .map(|(a, b)| a * b)
            .sum()
    };
    let a1: Vec<f64> = spec.c1().iter().map(|&v| align(v)).collect();
    let a2: Vec<f64> = spec.c2().iter().map(|&v| align(v)).collect();
    let c1 = ClassStats::of(&a1);
    let c2 = ClassStats::of(&a2);
    let gap = c1.zip(c2).map(|(s1, s2)| s1.min - s2.max);

    let low = spec.p() - spec.d();
    let max_deviation = a1
        .iter()
        .map(|v| (v - spec.p()).abs())
        .chain(a2.iter().map(|v| (v - low).abs()))
        .fold(0.0, f64::max);
    let coverage_complete = spec.c1().len() + spec.c2().len() == model.vocab_size();

    let mut problems = Vec::new();
    if max_deviation > spec.tol_align() {
        problems.push(format!(
            "alignment deviates by {max_deviation:e}, above tol_align {:e}",
            spec.tol_align()
        ));
    }
    if !spec.is_partial() && !coverage_complete {
        problems.push(format!(
            "classes cover {} of {} tokens but the concept is not declared partial",
            spec.c1().len() + spec.c2().len(),
            model.vocab_size()
        ));
    }
    Ok(ConceptReport {
        name: spec.name().to_string(),
        c1,
        c2,
        gap,
        max_deviation,
        tol_align: spec.tol_align(),
        partial: spec.is_partial(),
        coverage_complete,
        passed: problems.is_empty(),
        problems,
    })
}

/// Angles in radians between every pair of representation vectors.
pub fn pairwise_angles(concepts: &[ConceptSpec]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..concepts.len() {
        for j in i + 1..concepts.len() {
            let a = concepts[i].ell();
            let b = concepts[j].ell();
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let cos = (dot / (l2_norm(a) * l2_norm(b))).clamp(-1.0, 1.0);
            out.push((i, j, cos.acos()));
        }
    }
    out
}

/// Per-round coefficients `λ_{t,i}` over a set of concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPlan {
    concepts: Vec<ConceptSpec>,
    lambdas: DMatrix<f64>,
}

impl ShiftPlan {
    /// `lambdas` is `rounds × concepts.len()`.
    pub fn new(concepts: Vec<ConceptSpec>, lambdas: DMatrix<f64>) -> Result<Self> {
        if lambdas.ncols() != concepts.len() {
            return Err(Error::contract(format!(
                "{} lambda columns for {} concepts",
                lambdas.ncols(),
                concepts.len()
            )));
        }
        if !all_finite(lambdas.as_slice()) {
            return Err(Error::Numeric(
                "lambda schedule has non-finite entries".into(),
            ));
        }
        if let Some(first) = concepts.first() {
            let dim = first.ell().len();
            if concepts.iter().any(|c| c.ell().len() != dim) {
                return Err(Error::contract("concept vectors differ in length"));
            }
        }
        Ok(Self { concepts, lambdas })
    }

    /// Single concept with one coefficient per round.
    pub fn single(concept: ConceptSpec, lambdas: &[f64]) -> Result<Self> {
        Self::new(
            vec![concept],
            DMatrix::from_column_slice(lambdas.len(), 1, lambdas),
        )
    }

    pub fn rounds(&self) -> usize {
        self.lambdas.nrows()
    }

    pub fn concepts(&self) -> &[ConceptSpec] {
        &self.concepts
    }

    pub fn lambdas(&self) -> &DMatrix<f64> {
        &self.lambdas
    }

    /// Dimension of the shift vectors, if any concept is present.
    pub fn dim(&self) -> Option<usize> {
        self.concepts.first().map(|c| c.ell().len())
    }

    /// Shift applied in round `t` (1-based): `Σ_i λ_{t,i} ℓ_i`.
    pub fn compose_shift(&self, t: usize) -> Result<DVector<f64>> {
        if t == 0 || t > self.rounds() {
            return Err(Error::contract(format!(
                "round {t} outside 1..={}",
                self.rounds()
            )));
        }
        let dim = self.dim().unwrap_or(0);
        let mut shift = DVector::zeros(dim);
        for (i, concept) in self.concepts.iter().enumerate() {
            shift.axpy(
                self.lambdas[(t - 1, i)],
                &DVector::from_column_slice(concept.ell()),
                1.0,
            );
        }
        Ok(shift)
    }

    /// Same plan with the rounds reordered by `order` (a permutation).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.rounds()).collect::<Vec<_>>() {
            return Err(Error::contract("order is not a permutation of the rounds"));
        }
        let lambdas = DMatrix::from_fn(self.rounds(), self.concepts.len(), |r, c| {
            self.lambdas[(order[r], c)]
        });
        Self::new(self.concepts.clone(), lambdas)
    }
}
