//! Single self-attention head evaluated at the last prompt position.
//!
//! With a context block `s` (M columns) followed by a prompt block `τ`
//! (N columns), the head output at the last prompt column splits exactly into
//!
//! ```text
//! SA(s, τ; ω) = α · (W_v τ) softmax((W_k τ)ᵀ W_q τ_N / ω)
//!             + (1 − α) · (W_v s) softmax((W_k s)ᵀ W_q τ_N / ω)
//! ```
//!
//! where `α` is the share of attention mass landing on prompt columns.
//! [`decompose`] returns both terms and `α`; [`sa_forward`] evaluates the
//! head directly over the concatenated block.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::lm::{matrix_from_rows, rows_of, UnembeddingModel};
use crate::numeric::{all_finite, l2_norm, log_add_exp, log_sum_exp, softmax};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    w_v: DMatrix<f64>,
    w_k: DMatrix<f64>,
    w_q: DMatrix<f64>,
}

impl AttentionHead {
    /// `w_v` is `d_out × d_emb`; `w_k` and `w_q` are `d_attn × d_emb`.
    pub fn new(w_v: DMatrix<f64>, w_k: DMatrix<f64>, w_q: DMatrix<f64>) -> Result<Self> {
        if w_k.shape() != w_q.shape() {
            return Err(Error::contract(format!(
                "W_k is {:?} but W_q is {:?}",
                w_k.shape(),
                w_q.shape()
            )));
        }
        if w_v.ncols() != w_k.ncols() {
            return Err(Error::contract(format!(
                "W_v has {} input columns but W_k has {}",
                w_v.ncols(),
                w_k.ncols()
            )));
        }
        for (name, m) in [("W_v", &w_v), ("W_k", &w_k), ("W_q", &w_q)] {
            if m.is_empty() {
                return Err(Error::contract(format!("{name} is empty")));
            }
            if !all_finite(m.as_slice()) {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { w_v, w_k, w_q })
    }

    pub fn d_emb(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn d_attn(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w_v.nrows()
    }

    pub fn w_v(&self) -> &DMatrix<f64> {
        &self.w_v
    }

    pub fn w_k(&self) -> &DMatrix<f64> {
        &self.w_k
    }

    pub fn w_q(&self) -> &DMatrix<f64> {
        &self.w_q
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: HeadFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        file.into_head().map_err(|e| match e {
            Error::Contract(msg) | Error::Numeric(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }

    pub fn to_file(&self) -> HeadFile {
        HeadFile {
            version: FORMAT_VERSION,
            d_emb: self.d_emb(),
            d_attn: self.d_attn(),
            d_out: self.d_out(),
            w_v: rows_of(&self.w_v),
            w_k: rows_of(&self.w_k),
            w_q: rows_of(&self.w_q),
        }
    }

    fn check_inputs(&self, s: &TokenBlock, tau: &TokenBlock, omega: f64) -> Result<()> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {omega}"
            )));
        }
        for block in [s, tau] {
            if block.dim() != self.d_emb() {
                return Err(Error::contract(format!(
                    "{:?} block has {} rows but head expects d_emb = {}",
                    block.role,
                    block.dim(),
                    self.d_emb()
                )));
            }
        }
        Ok(())
    }

    /// Key-query logits of every column in `block` against the query built
    /// from the last prompt column.
    fn logits(&self, block: &TokenBlock, query: &DVector<f64>, omega: f64) -> Vec<f64> {
        let keys = &self.w_k * &block.columns;
        keys.tr_mul(query).iter().map(|v| v / omega).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadFile {
    pub version: u32,
    pub d_emb: usize,
    pub d_attn: usize,
    pub d_out: usize,
    #[serde(rename = "W_v")]
    pub w_v: Vec<Vec<f64>>,
    #[serde(rename = "W_k")]
    pub w_k: Vec<Vec<f64>>,
    #[serde(rename = "W_q")]
    pub w_q: Vec<Vec<f64>>,
}

impl HeadFile {
    pub fn into_head(self) -> Result<AttentionHead> {
        if self.version != FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported head file version {}",
                self.version
            )));
        }
        AttentionHead::new(
            matrix_from_rows(&self.w_v, self.d_out, self.d_emb, "W_v")?,
            matrix_from_rows(&self.w_k, self.d_attn, self.d_emb, "W_k")?,
            matrix_from_rows(&self.w_q, self.d_attn, self.d_emb, "W_q")?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Context,
    Prompt,
}

/// A run of token columns (`d_emb × n`, `n ≥ 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    columns: DMatrix<f64>,
    role: BlockRole,
}

impl TokenBlock {
    pub fn new(columns: DMatrix<f64>, role: BlockRole) -> Result<Self> {
        if columns.ncols() == 0 || columns.nrows() == 0 {
            return Err(Error::contract(format!(
                "{role:?} block needs at least one column"
            )));
        }
        if !all_finite(columns.as_slice()) {
            return Err(Error::Numeric(format!(
                "{role:?} block has non-finite entries"
            )));
        }
        Ok(Self { columns, role })
    }

    pub fn from_columns(columns: &[Vec<f64>], role: BlockRole) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::contract(format!(
                "{role:?} block columns differ in length"
            )));
        }
        let flat: Vec<f64> = columns.iter().flatten().copied().collect();
        Self::new(DMatrix::from_column_slice(dim, columns.len(), &flat), role)
    }

    /// Block whose columns are the model's embeddings of `tokens`.
    pub fn from_tokens(
        model: &UnembeddingModel,
        tokens: &[usize],
        role: BlockRole,
    ) -> Result<Self> {
        model.check_tokens(tokens)?;
        let flat: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| model.embedding_column(t).iter().copied())
            .collect();
        Self::new(
            DMatrix::from_column_slice(model.embed_dim(), tokens.len(), &flat),
            role,
        )
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn role(&self) -> BlockRole {
        self.role
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    fn last_column(&self) -> DVector<f64> {
        self.columns.column(self.len() - 1).into_owned()
    }
}

/// Output of [`decompose`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    pub alpha: f64,
    pub prompt_term: Vec<f64>,
    pub context_term: Vec<f64>,
    pub omega: f64,
}

impl Decomposition {
    /// `α · prompt_term + (1 − α) · context_term`.
    pub fn recombine(&self) -> Vec<f64> {
        self.prompt_term
            .iter()
            .zip(&self.context_term)
            .map(|(p, c)| self.alpha * p + (1.0 - self.alpha) * c)
            .collect()
    }
}

/// Head output at the last prompt column over `[s, τ]`.
pub fn sa_forward(
    head: &AttentionHead,
    s: &TokenBlock,
    tau: &TokenBlock,
    omega: f64,
) -> Result<DVector<f64>> {
    head.check_inputs(s, tau, omega)?;
    let query = &head.w_q * tau.last_column();
    let joined = DMatrix::from_fn(head.d_emb(), s.len() + tau.len(), |i, j| {
        if j < s.len() {
            s.columns[(i, j)]
        } else {
            tau.columns[(i, j - s.len())]
        }
    });
    let keys = &head.w_k * &joined;
    let logits: Vec<f64> = keys.tr_mul(&query).iter().map(|v| v / omega).collect();
    let weights = DVector::from_vec(softmax(&logits));
    let out = &head.w_v * (joined * weights);
    if !all_finite(out.as_slice()) {
        return Err(Error::Numeric("attention output is non-finite".into()));
    }
    Ok(out)
}

/// Splits the head output into its prompt and context parts.
pub fn decompose(
    head: &AttentionHead,
    s: &TokenBlock,
    tau: &TokenBlock,
    omega: f64,
) -> Result<Decomposition> {
    head.check_inputs(s, tau, omega)?;
    let query = &head.w_q * tau.last_column();
    let ctx_logits = head.logits(s, &query, omega);
    let prm_logits = head.logits(tau, &query, omega);

    let lse_ctx = log_sum_exp(&ctx_logits);
    let lse_prm = log_sum_exp(&prm_logits);
    if !lse_ctx.is_finite() || !lse_prm.is_finite() {
        return Err(Error::Numeric("attention logits are non-finite".into()));
    }
    let alpha = (lse_prm - log_add_exp(lse_ctx, lse_prm)).exp();

    let weighted = |block: &TokenBlock, logits: &[f64]| -> Vec<f64> {
        let w = DVector::from_vec(softmax(logits));
        (&head.w_v * (&block.columns * w)).as_slice().to_vec()
    };
    Ok(Decomposition {
        alpha,
        prompt_term: weighted(tau, &prm_logits),
        context_term: weighted(s, &ctx_logits),
        omega,
    })
}

/// `α` at each temperature, in input order.
pub fn alpha_sweep(
    head: &AttentionHead,
    s: &TokenBlock,
    tau: &TokenBlock,
    omegas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if omegas.is_empty() {
        return Err(Error::contract("temperature grid is empty"));
    }
    omegas
        .iter()
        .map(|&omega| decompose(head, s, tau, omega).map(|d| (omega, d.alpha)))
        .collect()
}

/// Head and prompt steering [`sa_forward`] towards a target as `ω → 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub head: AttentionHead,
    pub prompt: TokenBlock,
    /// Scale `B = 1 + max(max_v ‖E(v)‖₂, 1)`; strictly above every embedding norm.
    pub bound: f64,
    pub target: Vec<f64>,
}

impl SoftPrompt {
    /// `‖SA(s, τ; ω) − target‖₂`.
    pub fn error_at(&self, context: &TokenBlock, omega: f64) -> Result<f64> {
        let out = sa_forward(&self.head, context, &self.prompt, omega)?;
        let diff: Vec<f64> = out.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        Ok(l2_norm(&diff))
    }

    /// Checks that every context column is strictly inside the ball of
    /// radius `B`, the condition under which the construction converges.
    pub fn admits(&self, context: &TokenBlock) -> bool {
        context
            .columns()
            .column_iter()
            .all(|c| c.norm() < self.bound)
    }
}

/// Rounding slack on the `‖target‖₂ ≥ 1` precondition, so that vectors
/// normalized in floating point are accepted.
pub const TARGET_NORM_SLACK: f64 = 1e-12;

/// Builds `W_q = W_k = I`, `W_v = I / B` and the prompt `[0, …, 0, B·target]`
/// with `prompt_len` columns.
pub fn construct_soft_prompt(
    model: &UnembeddingModel,
    target: &[f64],
    prompt_len: usize,
) -> Result<SoftPrompt> {
    let d = model.embed_dim();
    if target.len() != d {
        return Err(Error::contract(format!(
            "target has length {} but embed_dim is {d}",
            target.len()
        )));
    }
    if !all_finite(target) {
        return Err(Error::Numeric("target has non-finite entries".into()));
    }
    let norm = l2_norm(target);
    if norm < 1.0 - TARGET_NORM_SLACK {
        return Err(Error::contract(format!(
            "target norm {norm} is below 1; the construction needs ‖ℓ‖₂ ≥ 1"
        )));
    }
    if prompt_len == 0 {
        return Err(Error::contract("prompt length must be at least 1"));
    }
    let max_norm = model
        .embedding()
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let bound = 1.0 + max_norm.max(1.0);
    debug_assert!(bound > max_norm);

    let identity = DMatrix::<f64>::identity(d, d);
    let head = AttentionHead::new(identity.clone() / bound, identity.clone(), identity)?;
    let mut columns = DMatrix::zeros(d, prompt_len);
    for (i, &t) in target.iter().enumerate() {
        columns[(i, prompt_len - 1)] = bound * t;
    }
    Ok(SoftPrompt {
        head,
        prompt: TokenBlock::new(columns, BlockRole::Prompt)?,
        bound,
        target: target.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn block(cols: &[&[f64]], role: BlockRole) -> TokenBlock {
        let owned: Vec<Vec<f64>> = cols.iter().map(|c| c.to_vec()).collect();
        TokenBlock::from_columns(&owned, role).unwrap()
    }

    fn zero_logit_head(d: usize) -> AttentionHead {
        let w_v = DMatrix::from_fn(d, d, |i, j| (i as f64) - 0.5 * (j as f64));
        AttentionHead::new(w_v, DMatrix::zeros(2, d), DMatrix::zeros(2, d)).unwrap()
    }

    #[test]
    fn zero_keys_average_the_values() {
        let head = zero_logit_head(2);
        let s = block(&[&[1.0, 2.0]], BlockRole::Context);
        let tau = block(&[&[-3.0, 0.5]], BlockRole::Prompt);
        for omega in [0.01, 1.0, 50.0] {
            let out = sa_forward(&head, &s, &tau, omega).unwrap();
            let expect = (head.w_v() * DVector::from_vec(vec![1.0, 2.0])
                + head.w_v() * DVector::from_vec(vec![-3.0, 0.5]))
                / 2.0;
            for (a, b) in out.iter().zip(expect.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn identical_single_columns_split_evenly() {
        let head = AttentionHead::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 1.0, 1.0]),
        )
        .unwrap();
        let s = block(&[&[0.3, -0.7]], BlockRole::Context);
        let tau = block(&[&[0.3, -0.7]], BlockRole::Prompt);
        let dec = decompose(&head, &s, &tau, 0.8).unwrap();
        assert_abs_diff_eq!(dec.alpha, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_logits_give_alpha_n_over_m_plus_n() {
        let head = zero_logit_head(3);
        let s = block(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
            BlockRole::Context,
        );
        let tau = block(&[&[1.0, 1.0, 1.0], &[2.0, 0.0, -1.0]], BlockRole::Prompt);
        let dec = decompose(&head, &s, &tau, 3.0).unwrap();
        assert_abs_diff_eq!(dec.alpha, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let head = zero_logit_head(2);
        let s = block(&[&[1.0, 0.0]], BlockRole::Context);
        let tau = block(&[&[0.0, 1.0]], BlockRole::Prompt);
        for omega in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                sa_forward(&head, &s, &tau, omega).unwrap_err(),
                Error::Contract(_)
            ));
            assert!(decompose(&head, &s, &tau, omega).is_err());
        }
    }

    #[test]
    fn block_dimension_mismatch_is_rejected() {
        let head = zero_logit_head(2);
        let s = block(&[&[1.0, 0.0, 0.0]], BlockRole::Context);
        let tau = block(&[&[0.0, 1.0]], BlockRole::Prompt);
        assert!(matches!(
            sa_forward(&head, &s, &tau, 1.0).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn mismatched_key_query_shapes_are_rejected() {
        assert!(AttentionHead::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 2),
            DMatrix::zeros(2, 2)
        )
        .is_err());
    }

    #[test]
    fn empty_block_is_rejected() {
        assert!(TokenBlock::new(DMatrix::zeros(2, 0), BlockRole::Prompt).is_err());
    }

    #[test]
    fn sweep_is_ordered_and_constant_for_flat_logits() {
        let head = zero_logit_head(2);
        let s = block(&[&[1.0, 0.0], &[0.0, 1.0]], BlockRole::Context);
        let tau = block(&[&[0.0, 1.0]], BlockRole::Prompt);
        let omegas = [5.0, 0.1, 1.0];
        let sweep = alpha_sweep(&head, &s, &tau, &omegas).unwrap();
        assert_eq!(sweep.iter().map(|p| p.0).collect::<Vec<_>>(), omegas);
        for (_, a) in sweep {
            assert_abs_diff_eq!(a, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(alpha_sweep(&head, &s, &tau, &[]).is_err());
        let single = alpha_sweep(&head, &s, &tau, &[0.7]).unwrap();
        assert_eq!(
            single,
            vec![(0.7, decompose(&head, &s, &tau, 0.7).unwrap().alpha)]
        );
    }

    #[test]
    fn soft_prompt_rejects_short_targets() {
        let model = UnembeddingModel::tied(DMatrix::identity(3, 3)).unwrap();
        let err = construct_soft_prompt(&model, &[0.5, 0.0, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn soft_prompt_reaches_unit_target() {
        let model = UnembeddingModel::tied(DMatrix::from_row_slice(
            3,
            3,
            &[0.5, 0.1, -0.2, 0.3, 0.9, 0.0, -0.4, 0.2, 0.7],
        ))
        .unwrap();
        let sp = construct_soft_prompt(&model, &[1.0, 0.0, 0.0], 3).unwrap();
        let max_norm = model
            .embedding()
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        assert_eq!(sp.bound, 1.0 + max_norm.max(1.0));
        let ctx = TokenBlock::from_tokens(&model, &[0, 2], BlockRole::Context).unwrap();
        assert!(sp.admits(&ctx));
        assert!(sp.error_at(&ctx, 1e-3).unwrap() <= 1e-6);

        let mut prev = f64::INFINITY;
        for omega in [1.0, 0.1, 0.01, 0.001] {
            let err = sp.error_at(&ctx, omega).unwrap();
            assert!(err <= prev);
            prev = err;
        }
    }

    #[test]
    fn head_file_round_trip() {
        let head = AttentionHead::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, -1.0, 2.0]),
        )
        .unwrap();
        let json = serde_json::to_string(&head.to_file()).unwrap();
        let back: HeadFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_head().unwrap(), head);
    }
}
