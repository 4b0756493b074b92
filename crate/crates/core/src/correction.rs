//! Linear self-correction trajectories and the concentration check.
//!
//! Each round adds `Σ_i λ_{t,i} ℓ_i` to the hidden state, so after `k`
//! rounds the state is `h0 + Σ_t Σ_i λ_{t,i} ℓ_i`. For a single aligned
//! concept the class-1 probability has the closed form
//! `1 / (1 + r · e^{−Σλd})` with `r = γ₂/γ₁` the initial class-mass ratio,
//! and the class-2 probability drops below `ε` once
//! `Σλd ≥ (r − (r + 1)ε) / ε`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::concept::{validate_concept, ConceptSpec, ShiftPlan};
use crate::lm::{pair_probability, HiddenState, UnembeddingModel};
use crate::numeric::logistic;
use crate::{Error, Result};

/// Relative tolerance for closed-form vs. brute-force agreement.
pub const DEFAULT_TOL_EXACT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    plan: ShiftPlan,
    states: Vec<HiddenState>,
}

impl Trajectory {
    pub fn h0(&self) -> &HiddenState {
        &self.states[0]
    }

    pub fn plan(&self) -> &ShiftPlan {
        &self.plan
    }

    /// `states[0] = h0`, `states[k]` is the state after round `k`.
    pub fn states(&self) -> &[HiddenState] {
        &self.states
    }

    pub fn final_state(&self) -> &HiddenState {
        self.states.last().expect("trajectory always holds h0")
    }
}

/// Applies the plan round by round, starting from `h0`.
pub fn roll_trajectory(h0: &HiddenState, plan: &ShiftPlan) -> Result<Trajectory> {
    if let Some(dim) = plan.dim() {
        if dim != h0.dim() {
            return Err(Error::contract(format!(
                "plan vectors have dimension {dim} but h0 has {}",
                h0.dim()
            )));
        }
    }
    let mut states = Vec::with_capacity(plan.rounds() + 1);
    states.push(h0.clone());
    let mut current: DVector<f64> = h0.as_vector().clone();
    for t in 1..=plan.rounds() {
        if plan.dim().is_some() {
            current += plan.compose_shift(t)?;
        }
        states.push(HiddenState::new(current.clone())?);
    }
    Ok(Trajectory {
        plan: plan.clone(),
        states,
    })
}

/// Closed-form and brute-force class probabilities for one aligned concept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub gamma1: f64,
    pub gamma2: f64,
    pub log_gamma1: f64,
    pub log_gamma2: f64,
    /// `γ₂ / γ₁`.
    pub r: f64,
    /// `Σ_t λ_t · d`.
    pub cum_shift: f64,
    pub p_c1_exact: f64,
    pub p_c2_exact: f64,
    /// `1 / (1 + r / (1 + cum_shift))`; absent when `cum_shift ≤ −1`.
    pub p_c1_lower_bound: Option<f64>,
    pub epsilon: f64,
    /// `(r − (r + 1)ε) / ε`.
    pub threshold: f64,
    pub satisfied: bool,
    /// Probabilities from a full softmax at the final trajectory state.
    pub p_c1_brute: f64,
    pub p_c2_brute: f64,
    /// Largest relative disagreement between closed form and brute force.
    pub rel_err: f64,
    pub tol_exact: f64,
    pub exact_agrees: bool,
    /// False only for a counterexample: `satisfied` but `p_c2_brute ≥ ε`.
    pub sound: bool,
}

impl ConcentrationReport {
    pub fn verified(&self) -> bool {
        self.exact_agrees && self.sound
    }
}

/// Concentration threshold on the cumulative shift for a given `r` and `ε`.
pub fn concentration_threshold(r: f64, epsilon: f64) -> f64 {
    (r - (r + 1.0) * epsilon) / epsilon
}

fn relative_error(observed: f64, expected: f64) -> f64 {
    if expected == 0.0 {
        observed.abs()
    } else {
        ((observed - expected) / expected).abs()
    }
}

/// [`concentration_report_with`] at the default agreement tolerance.
pub fn concentration_report(
    model: &UnembeddingModel,
    spec: &ConceptSpec,
    h0: &HiddenState,
    lambdas: &[f64],
    epsilon: f64,
) -> Result<ConcentrationReport> {
    concentration_report_with(model, spec, h0, lambdas, epsilon, DEFAULT_TOL_EXACT)
}

/// Evaluates the closed form for the single-concept trajectory driven by
/// `lambdas` and cross-checks it against a full-vocabulary softmax at the
/// final state. The concept must pass [`validate_concept`] and partition the
/// whole vocabulary.
pub fn concentration_report_with(
    model: &UnembeddingModel,
    spec: &ConceptSpec,
    h0: &HiddenState,
    lambdas: &[f64],
    epsilon: f64,
    tol_exact: f64,
) -> Result<ConcentrationReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    if spec.is_partial() {
        return Err(Error::contract(format!(
            "concept `{}` is partial; the closed form needs a full partition",
            spec.name()
        )));
    }
    let validation = validate_concept(model, spec)?;
    if !validation.passed {
        return Err(Error::Unvalidated {
            name: spec.name().to_string(),
            detail: validation.problems.join("; "),
        });
    }

    let (m1, m2) = model.class_pair(h0, spec.c1(), spec.c2())?;
    let log_r = m2.log_mass - m1.log_mass;
    let r = log_r.exp();
    let cum_shift = lambdas.iter().sum::<f64>() * spec.d();
    let p_c1_exact = logistic(cum_shift - log_r);
    let p_c2_exact = logistic(log_r - cum_shift);
    let p_c1_lower_bound = (cum_shift > -1.0).then(|| 1.0 / (1.0 + r / (1.0 + cum_shift)));
    let threshold = concentration_threshold(r, epsilon);
    let satisfied = cum_shift >= threshold;

    let plan = ShiftPlan::single(spec.clone(), lambdas)?;
    let trajectory = roll_trajectory(h0, &plan)?;
    let (f1, f2) = model.class_pair(trajectory.final_state(), spec.c1(), spec.c2())?;
    let p_c1_brute = pair_probability(f1.log_mass, f2.log_mass);
    let p_c2_brute = pair_probability(f2.log_mass, f1.log_mass);

    let rel_err =
        relative_error(p_c1_brute, p_c1_exact).max(relative_error(p_c2_brute, p_c2_exact));
    Ok(ConcentrationReport {
        gamma1: m1.mass(),
        gamma2: m2.mass(),
        log_gamma1: m1.log_mass,
        log_gamma2: m2.log_mass,
        r,
        cum_shift,
        p_c1_exact,
        p_c2_exact,
        p_c1_lower_bound,
        epsilon,
        threshold,
        satisfied,
        p_c1_brute,
        p_c2_brute,
        rel_err,
        tol_exact,
        exact_agrees: rel_err <= tol_exact,
        sound: !satisfied || p_c2_brute < epsilon,
    })
}

/// One report per entry of `lambda_grid`; each entry is the total `Σλ`
/// applied in a single round.
pub fn sweep_concentration(
    model: &UnembeddingModel,
    spec: &ConceptSpec,
    h0: &HiddenState,
    lambda_grid: &[f64],
    epsilon: f64,
) -> Result<Vec<ConcentrationReport>> {
    if lambda_grid.is_empty() {
        return Err(Error::contract("lambda grid is empty"));
    }
    lambda_grid
        .iter()
        .map(|&total| concentration_report(model, spec, h0, &[total], epsilon))
        .collect()
}

/// Draws `tokens_per_round` i.i.d. tokens from the exact next-token
/// distribution at every trajectory state (`h0` included).
///
/// The generator is ChaCha8 seeded from `seed`; state `k` uses stream `k`,
/// so rounds are independent and reproducible in isolation.
pub fn simulate_responses(
    model: &UnembeddingModel,
    trajectory: &Trajectory,
    tokens_per_round: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if tokens_per_round == 0 {
        return Err(Error::contract("tokens_per_round must be at least 1"));
    }
    trajectory
        .states()
        .iter()
        .enumerate()
        .map(|(k, state)| {
            let dist = model.next_token_distribution(state)?;
            let cdf: Vec<f64> = dist
                .probs()
                .iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect();
            let last_positive = dist
                .probs()
                .iter()
                .rposition(|&p| p > 0.0)
                .expect("softmax has positive mass");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            Ok((0..tokens_per_round)
                .map(|_| {
                    let u: f64 = rng.random();
                    cdf.partition_point(|&c| c <= u).min(last_positive)
                })
                .collect())
        })
        .collect()
}

/// Fraction of `tokens` that fall in `class`.
pub fn class_frequency(tokens: &[usize], class: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| class.contains(t)).count();
    hits as f64 / tokens.len() as f64
}
