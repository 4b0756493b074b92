//! Seeded random instances for the concentration check.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use steerlab_core::concept::ConceptSpec;
use steerlab_core::correction::{
    concentration_report, concentration_threshold, ConcentrationReport,
};
use steerlab_core::lm::{HiddenState, UnembeddingModel};

pub const EPSILONS: [f64; 4] = [0.01, 0.05, 0.1, 0.3];

/// A self-contained instance, serializable for replay.
#[derive(Debug, Clone, Serialize)]
pub struct Instance {
    pub index: usize,
    pub unembedding_columns: Vec<Vec<f64>>,
    pub c1: Vec<usize>,
    pub c2: Vec<usize>,
    pub p: f64,
    pub d: f64,
    pub ell: Vec<f64>,
    pub h0: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
}

impl Instance {
    pub fn model(&self) -> UnembeddingModel {
        let dim = self.ell.len();
        let flat: Vec<f64> = self.unembedding_columns.iter().flatten().copied().collect();
        UnembeddingModel::tied(DMatrix::from_column_slice(
            dim,
            self.unembedding_columns.len(),
            &flat,
        ))
        .expect("generated model is finite")
    }

    pub fn spec(&self) -> ConceptSpec {
        ConceptSpec::new(
            "random",
            self.c1.clone(),
            self.c2.clone(),
            self.p,
            self.d,
            self.ell.clone(),
        )
        .expect("generated concept is well-formed")
    }

    pub fn report(&self) -> steerlab_core::Result<ConcentrationReport> {
        concentration_report(
            &self.model(),
            &self.spec(),
            &HiddenState::from_slice(&self.h0)?,
            &self.lambdas,
            self.epsilon,
        )
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Instance `index` of the stream seeded by `seed`. Each index uses its own
/// ChaCha stream, so instances can be regenerated independently.
pub fn instance(seed: u64, index: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let dim = rng.random_range(2..=8);
    let vocab = rng.random_range(2..=32);
    let n1 = rng.random_range(1..vocab);
    let p = rng.random_range(0.1..2.0);
    let d = rng.random_range(0.1..3.0);

    let ell: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
    let ell_sq: f64 = ell.iter().map(|x| x * x).sum();
    let unembedding_columns = (0..vocab)
        .map(|v| {
            let mut u: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let target = if v < n1 { p } else { p - d };
            let dot: f64 = u.iter().zip(&ell).map(|(a, b)| a * b).sum();
            let adjust = (target - dot) / ell_sq;
            u.iter_mut().zip(&ell).for_each(|(x, e)| *x += adjust * e);
            u
        })
        .collect::<Vec<_>>();
    let h0: Vec<f64> = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
    let epsilon = EPSILONS[index % EPSILONS.len()];

    // Estimate r to place the cumulative shift around the threshold.
    let logits = |v: &Vec<f64>| v.iter().zip(&h0).map(|(a, b)| a * b).sum::<f64>();
    let gamma = |range: std::ops::Range<usize>| -> f64 {
        unembedding_columns[range]
            .iter()
            .map(|u| logits(u).exp())
            .sum()
    };
    let r = gamma(n1..vocab) / gamma(0..n1);
    let threshold = concentration_threshold(r, epsilon);
    let cum_shift = if rng.random_bool(0.5) {
        threshold + 3.0 * rng.random::<f64>()
    } else {
        threshold + rng.random_range(-5.0..5.0)
    };
    let rounds = rng.random_range(1..=4);
    let mut weights: Vec<f64> = (0..rounds).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w *= cum_shift / d / total);

    Instance {
        index,
        unembedding_columns,
        c1: (0..n1).collect(),
        c2: (n1..vocab).collect(),
        p,
        d,
        ell,
        h0,
        lambdas: weights,
        epsilon,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub instances: usize,
    pub satisfied: usize,
    pub exactness_failures: usize,
    pub soundness_failures: usize,
    pub max_rel_err: f64,
    #[serde(skip)]
    pub first_failure: Option<(Instance, ConcentrationReport)>,
}

pub fn run_suite(seed: u64, count: usize) -> steerlab_core::Result<SuiteSummary> {
    let mut summary = SuiteSummary {
        instances: count,
        satisfied: 0,
        exactness_failures: 0,
        soundness_failures: 0,
        max_rel_err: 0.0,
        first_failure: None,
    };
    for index in 0..count {
        let inst = instance(seed, index);
        let rep = inst.report()?;
        summary.satisfied += usize::from(rep.satisfied);
        summary.exactness_failures += usize::from(!rep.exact_agrees);
        summary.soundness_failures += usize::from(!rep.sound);
        summary.max_rel_err = summary.max_rel_err.max(rep.rel_err);
        if !rep.verified() && summary.first_failure.is_none() {
            summary.first_failure = Some((inst, rep));
        }
    }
    Ok(summary)
}
