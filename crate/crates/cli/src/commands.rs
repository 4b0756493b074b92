//! Subcommand implementations.

use std::collections::BTreeMap;

use log::{info, warn};
use serde::Serialize;

use steerlab_core::attention::{
    construct_soft_prompt, decompose, sa_forward, AttentionHead, BlockRole, TokenBlock,
};
use steerlab_core::concept::{
    pairwise_angles, validate_concept, ConceptReport, ConceptSpec, ShiftPlan,
};
use steerlab_core::correction::{
    class_frequency, roll_trajectory, simulate_responses, sweep_concentration, ConcentrationReport,
};
use steerlab_core::lm::{HiddenState, UnembeddingModel};
use steerlab_core::numeric::l2_norm;
use steerlab_core::trace::{
    load_traces, pca3, report_table, score_groups, shift_vectors, ShiftMatrix, TokenGroup,
    TraceSet, UnembeddingTable,
};

use crate::config::{LoadedConfig, PcaScope};
use crate::output::{fixed4, optional_fixed4, Meta, OutputDir};
use crate::suite::{run_suite, SuiteSummary};
use crate::{CliError, Command, Result};

/// Temperatures used by `construct-prompt` when the config gives none.
pub const DEFAULT_CONSTRUCTION_OMEGAS: [f64; 7] = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001];
/// Default bound on the construction error at the smallest temperature.
pub const DEFAULT_CONSTRUCTION_TOL: f64 = 1e-6;
/// Default bound on the decomposition reconstruction residual.
pub const DEFAULT_RECONSTRUCTION_TOL: f64 = 1e-10;
/// Float slack allowed when checking that the construction error shrinks.
pub const MONOTONE_SLACK: f64 = 1e-15;
/// Half-width of the sampling band in standard errors.
pub const SAMPLING_BAND_SIGMAS: f64 = 4.0;

pub fn dispatch(command: Command, loaded: &LoadedConfig) -> Result<()> {
    let meta = Meta::new(command.name(), &loaded.config_hash, loaded.config.seed);
    info!(
        "running {} into {}",
        command.name(),
        loaded.out_dir.display()
    );
    match command {
        Command::VerifyTheorem => verify_theorem(loaded, meta),
        Command::Decompose => run_decompose(loaded, meta),
        Command::ConstructPrompt => construct_prompt(loaded, meta),
        Command::Simulate => simulate(loaded, meta),
        Command::Analyze => analyze(loaded, meta),
        Command::Pca => pca(loaded, meta),
    }
}

fn load_model(loaded: &LoadedConfig) -> Result<UnembeddingModel> {
    Ok(UnembeddingModel::load(
        loaded.require_path(&loaded.config.model, "model")?,
    )?)
}

fn initial_state(loaded: &LoadedConfig, dim: usize) -> Result<HiddenState> {
    match &loaded.config.h0 {
        Some(h0) if h0.len() != dim => Err(CliError::Config(format!(
            "h0 has length {} but the model dimension is {dim}",
            h0.len()
        ))),
        Some(h0) => Ok(HiddenState::from_slice(h0)?),
        None => Ok(HiddenState::zeros(dim)),
    }
}

fn verification(failed: bool, message: impl FnOnce() -> String) -> Result<()> {
    if failed {
        Err(CliError::Verification(message()))
    } else {
        Ok(())
    }
}

#[derive(Serialize)]
struct TheoremOutput<'a> {
    concept: &'a str,
    epsilon: f64,
    rows: &'a [ConcentrationReport],
    all_verified: bool,
    random_suite: Option<&'a SuiteSummary>,
}

#[derive(Serialize)]
struct FailureDump<'a, T: Serialize> {
    kind: &'a str,
    report: &'a ConcentrationReport,
    input: T,
}

fn verify_theorem(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let epsilon = *loaded.require(&c.epsilon, "epsilon")?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CliError::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let grid = loaded.require(&c.lambda_grid, "lambda_grid")?;
    let model = load_model(loaded)?;
    let spec = ConceptSpec::load(loaded.require_path(&c.concept, "concept")?)?;
    let h0 = initial_state(loaded, model.embed_dim())?;

    let rows = sweep_concentration(&model, &spec, &h0, grid, epsilon)?;
    let suite = c
        .random_instances
        .map(|n| run_suite(c.seed, n))
        .transpose()?;

    let out = OutputDir::create(&loaded.out_dir, meta)?;
    let header = [
        "cum_shift",
        "gamma1",
        "gamma2",
        "r",
        "p_c1_exact",
        "p_c2_exact",
        "p_c1_lower_bound",
        "threshold",
        "satisfied",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fixed4(r.cum_shift),
                fixed4(r.gamma1),
                fixed4(r.gamma2),
                fixed4(r.r),
                fixed4(r.p_c1_exact),
                fixed4(r.p_c2_exact),
                optional_fixed4(r.p_c1_lower_bound),
                fixed4(r.threshold),
                r.satisfied.to_string(),
            ]
        })
        .collect();
    out.write_csv("theorem_sweep.csv", &header, &table)?;

    let grid_failure = rows.iter().zip(grid).find(|(r, _)| !r.verified());
    let suite_failure = suite.as_ref().and_then(|s| s.first_failure.as_ref());
    let all_verified = grid_failure.is_none() && suite_failure.is_none();
    out.write_json(
        "theorem_report.json",
        &TheoremOutput {
            concept: spec.name(),
            epsilon,
            rows: &rows,
            all_verified,
            random_suite: suite.as_ref(),
        },
    )?;

    if let Some((report, total)) = grid_failure {
        out.write_json(
            "failure.json",
            &FailureDump {
                kind: "grid",
                report,
                input: serde_json::json!({ "lambda_total": total }),
            },
        )?;
    } else if let Some((instance, report)) = suite_failure {
        out.write_json(
            "failure.json",
            &FailureDump {
                kind: "random",
                report,
                input: instance,
            },
        )?;
    }
    verification(!all_verified, || {
        format!(
            "concentration check failed; see {}",
            out.path("failure.json").display()
        )
    })
}

fn block(
    model: Option<&UnembeddingModel>,
    tokens: &Option<Vec<usize>>,
    columns: &Option<Vec<Vec<f64>>>,
    role: BlockRole,
    what: &str,
) -> Result<TokenBlock> {
    match (tokens, columns) {
        (Some(_), Some(_)) => Err(CliError::Config(format!(
            "give either {what}_tokens or {what}_columns, not both"
        ))),
        (Some(ids), None) => {
            let model = model.ok_or_else(|| {
                CliError::Config(format!("{what}_tokens needs a `model` to embed them"))
            })?;
            Ok(TokenBlock::from_tokens(model, ids, role)?)
        }
        (None, Some(cols)) => Ok(TokenBlock::from_columns(cols, role)?),
        (None, None) => Err(CliError::Config(format!(
            "field `{what}_tokens` or `{what}_columns` is required for this command"
        ))),
    }
}

#[derive(Serialize)]
struct DecomposeRow {
    omega: f64,
    alpha: f64,
    prompt_term: Vec<f64>,
    context_term: Vec<f64>,
    output: Vec<f64>,
    err_l2: f64,
}

#[derive(Serialize)]
struct DecomposeOutput {
    tolerance: f64,
    max_err_l2: f64,
    rows: Vec<DecomposeRow>,
}

fn run_decompose(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let head = AttentionHead::load(loaded.require_path(&c.head, "head")?)?;
    let model = c.model.as_ref().map(|_| load_model(loaded)).transpose()?;
    let context = block(
        model.as_ref(),
        &c.context_tokens,
        &c.context_columns,
        BlockRole::Context,
        "context",
    )?;
    let prompt = block(
        model.as_ref(),
        &c.prompt_tokens,
        &c.prompt_columns,
        BlockRole::Prompt,
        "prompt",
    )?;
    let omegas = loaded.require(&c.omegas, "omegas")?;
    if omegas.is_empty() {
        return Err(CliError::Config("omegas is empty".into()));
    }
    let tolerance = c.tolerance.unwrap_or(DEFAULT_RECONSTRUCTION_TOL);

    let rows = omegas
        .iter()
        .map(|&omega| {
            let parts = decompose(&head, &context, &prompt, omega)?;
            let output = sa_forward(&head, &context, &prompt, omega)?;
            let diff: Vec<f64> = parts
                .recombine()
                .iter()
                .zip(output.iter())
                .map(|(a, b)| a - b)
                .collect();
            Ok(DecomposeRow {
                omega,
                alpha: parts.alpha,
                err_l2: l2_norm(&diff),
                prompt_term: parts.prompt_term,
                context_term: parts.context_term,
                output: output.as_slice().to_vec(),
            })
        })
        .collect::<steerlab_core::Result<Vec<_>>>()?;
    let max_err = rows.iter().map(|r| r.err_l2).fold(0.0, f64::max);

    let out = OutputDir::create(&loaded.out_dir, meta)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![fixed4(r.omega), fixed4(r.alpha), fixed4(r.err_l2)])
        .collect();
    out.write_csv("alpha_sweep.csv", &["omega", "alpha", "err_l2"], &table)?;
    out.write_json(
        "decompose.json",
        &DecomposeOutput {
            tolerance,
            max_err_l2: max_err,
            rows,
        },
    )?;
    verification(max_err > tolerance, || {
        format!("reconstruction residual {max_err:e} exceeds {tolerance:e}")
    })
}

#[derive(Serialize)]
struct ConstructionOutput<'a> {
    bound: f64,
    bound_rule: &'static str,
    target: &'a [f64],
    prompt_len: usize,
    prompt: Vec<Vec<f64>>,
    omegas: &'a [f64],
    err_l2: &'a [f64],
    non_increasing: bool,
    tolerance: f64,
    final_error_within_tolerance: bool,
}

fn construct_prompt(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let model = load_model(loaded)?;
    let target = loaded.require(&c.target, "target")?;
    let prompt_len = c.prompt_len.unwrap_or(1);
    let omegas: Vec<f64> = c
        .omegas
        .clone()
        .unwrap_or_else(|| DEFAULT_CONSTRUCTION_OMEGAS.to_vec());
    if omegas.is_empty() {
        return Err(CliError::Config("omegas is empty".into()));
    }
    let tolerance = c.tolerance.unwrap_or(DEFAULT_CONSTRUCTION_TOL);
    let context = block(
        Some(&model),
        &c.context_tokens,
        &c.context_columns,
        BlockRole::Context,
        "context",
    )?;

    let soft = construct_soft_prompt(&model, target, prompt_len)?;
    if !soft.admits(&context) {
        return Err(CliError::Config(format!(
            "a context column has norm at or above B = {}",
            soft.bound
        )));
    }
    let errors = omegas
        .iter()
        .map(|&omega| soft.error_at(&context, omega))
        .collect::<steerlab_core::Result<Vec<f64>>>()?;
    let non_increasing = errors.windows(2).all(|w| w[1] <= w[0] + MONOTONE_SLACK);
    let smallest = omegas
        .iter()
        .zip(&errors)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map(|(_, e)| *e)
        .unwrap_or(f64::INFINITY);
    let within = smallest <= tolerance;

    let out = OutputDir::create(&loaded.out_dir, meta)?;
    let table: Vec<Vec<String>> = omegas
        .iter()
        .zip(&errors)
        .map(|(o, e)| vec![fixed4(*o), fixed4(*e)])
        .collect();
    out.write_csv("construction.csv", &["omega", "err_l2"], &table)?;
    out.write_json(
        "construction.json",
        &ConstructionOutput {
            bound: soft.bound,
            bound_rule: "1 + max(max_v ||E(v)||_2, 1)",
            target,
            prompt_len,
            prompt: soft
                .prompt
                .columns()
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            omegas: &omegas,
            err_l2: &errors,
            non_increasing,
            tolerance,
            final_error_within_tolerance: within,
        },
    )?;
    verification(!non_increasing || !within, || {
        if non_increasing {
            format!("error {smallest:e} at the smallest temperature exceeds {tolerance:e}")
        } else {
            "construction error grows as the temperature decreases".to_string()
        }
    })
}

#[derive(Serialize)]
struct SimulateRow {
    round: usize,
    concept: String,
    p_c1: f64,
    freq: f64,
    sigma: f64,
    within_band: bool,
}

#[derive(Serialize)]
struct SimulateOutput {
    tokens_per_round: usize,
    band_sigmas: f64,
    validation: Vec<ConceptReport>,
    /// `(i, j, radians)` between the representation vectors of concepts `i` and `j`.
    concept_angles: Vec<(usize, usize, f64)>,
    states: Vec<Vec<f64>>,
    rows: Vec<SimulateRow>,
    all_within_band: bool,
}

fn simulate(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let model = load_model(loaded)?;
    let mut paths = c.concepts.clone();
    if let Some(single) = &c.concept {
        paths.insert(0, single.clone());
    }
    if paths.is_empty() {
        return Err(CliError::Config(
            "field `concepts` is required for this command".into(),
        ));
    }
    let concepts = paths
        .iter()
        .map(|p| ConceptSpec::load(loaded.resolve(p)))
        .collect::<steerlab_core::Result<Vec<_>>>()?;
    let schedule = loaded.require(&c.lambda_schedule, "lambda_schedule")?;
    if schedule.iter().any(|row| row.len() != concepts.len()) {
        return Err(CliError::Config(format!(
            "every lambda_schedule row needs {} entries",
            concepts.len()
        )));
    }
    let n = *loaded.require(&c.tokens_per_round, "tokens_per_round")?;
    let flat: Vec<f64> = schedule.iter().flatten().copied().collect();
    let lambdas = nalgebra::DMatrix::from_row_slice(schedule.len(), concepts.len(), &flat);
    let plan = ShiftPlan::new(concepts, lambdas)?;
    let h0 = initial_state(loaded, model.embed_dim())?;
    let trajectory = roll_trajectory(&h0, &plan)?;
    let samples = simulate_responses(&model, &trajectory, n, c.seed)?;
    let validation = plan
        .concepts()
        .iter()
        .map(|spec| validate_concept(&model, spec))
        .collect::<steerlab_core::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut counts_table = Vec::new();
    for (round, (state, tokens)) in trajectory.states().iter().zip(&samples).enumerate() {
        let dist = model.next_token_distribution(state)?;
        for spec in plan.concepts() {
            let p = dist.mass_of(spec.c1());
            let freq = class_frequency(tokens, spec.c1());
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let within_band = (freq - p).abs() <= SAMPLING_BAND_SIGMAS * sigma + 1e-12;
            rows.push(SimulateRow {
                round,
                concept: spec.name().to_string(),
                p_c1: p,
                freq,
                sigma,
                within_band,
            });
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        for (token, count) in counts {
            counts_table.push(vec![
                round.to_string(),
                token.to_string(),
                count.to_string(),
            ]);
        }
    }
    let all_within_band = rows.iter().all(|r| r.within_band);

    let out = OutputDir::create(&loaded.out_dir, meta)?;
    out.write_csv("responses.csv", &["round", "token", "count"], &counts_table)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.concept.clone(),
                fixed4(r.p_c1),
                fixed4(r.freq),
                fixed4(r.sigma),
                r.within_band.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "simulate.csv",
        &["round", "concept", "p_c1", "freq", "sigma", "within_band"],
        &table,
    )?;
    out.write_json(
        "simulate.json",
        &SimulateOutput {
            tokens_per_round: n,
            band_sigmas: SAMPLING_BAND_SIGMAS,
            validation,
            concept_angles: pairwise_angles(plan.concepts()),
            states: trajectory
                .states()
                .iter()
                .map(|s| s.as_slice().to_vec())
                .collect(),
            rows,
            all_within_band,
        },
    )?;
    verification(!all_within_band, || {
        format!("a sampled class frequency left the {SAMPLING_BAND_SIGMAS}σ band")
    })
}

fn load_groups(loaded: &LoadedConfig) -> Result<Vec<TokenGroup>> {
    if loaded.config.groups.is_empty() {
        return Err(CliError::Config(
            "field `groups` is required for this command".into(),
        ));
    }
    loaded
        .config
        .groups
        .iter()
        .map(|p| Ok(TokenGroup::load(loaded.resolve(p))?))
        .collect()
}

fn load_trace_set(loaded: &LoadedConfig) -> Result<TraceSet> {
    let set = load_traces(loaded.require_path(&loaded.config.traces, "traces")?)?;
    if set.records.is_empty() {
        warn!("trace file has no records");
    }
    Ok(set)
}

#[derive(Serialize)]
struct AnalyzeOutput {
    source: &'static str,
    scores: Vec<steerlab_core::trace::GroupScore>,
}

fn analyze(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let set = load_trace_set(loaded)?;
    let groups = load_groups(loaded)?;
    let (scores, source) = match (&c.unembeddings, &c.model) {
        (Some(path), _) => {
            let table = UnembeddingTable::load(loaded.resolve(path))?;
            (score_groups(&table, &set, &groups)?, "unembeddings")
        }
        (None, Some(_)) => (score_groups(&load_model(loaded)?, &set, &groups)?, "model"),
        (None, None) => {
            return Err(CliError::Config(
                "field `unembeddings` or `model` is required for this command".into(),
            ))
        }
    };
    let out = OutputDir::create(&loaded.out_dir, meta)?;
    out.write_csv_document("group_scores.csv", &report_table(&scores))?;
    out.write_json("group_scores.json", &AnalyzeOutput { source, scores })
}

#[derive(Serialize)]
struct PcaFit {
    condition: Option<String>,
    round: Option<u32>,
    n_samples: usize,
    components: Vec<Vec<f64>>,
    explained_variance: [f64; 3],
    explained_variance_ratio: [f64; 3],
    zero_variance: [bool; 3],
    mean: Vec<f64>,
}

#[derive(Serialize)]
struct PcaOutput {
    scope: &'static str,
    normalize: bool,
    fits: Vec<PcaFit>,
    skipped: Vec<String>,
}

/// A shift selection with the `(condition, round)` of each row.
struct Selection {
    labels: Vec<(String, u32, String)>,
    shifts: ShiftMatrix,
}

fn pca(loaded: &LoadedConfig, meta: Meta) -> Result<()> {
    let c = &loaded.config;
    let set = load_trace_set(loaded)?;
    let normalize = c.normalize.unwrap_or(true);
    let scope = c.pca_scope.unwrap_or_default();
    let keys: Vec<(String, u32)> = set
        .counts
        .keys()
        .filter(|(cond, _)| {
            c.conditions
                .as_ref()
                .is_none_or(|allowed| allowed.contains(cond))
        })
        .cloned()
        .collect();
    if keys.is_empty() {
        return Err(CliError::Core(steerlab_core::Error::EmptySelection(
            "no trace records match the selected conditions".into(),
        )));
    }

    let mut selections = Vec::new();
    for (cond, round) in &keys {
        let shifts = shift_vectors(&set.records, cond, *round)?;
        let labels = shifts
            .sample_ids
            .iter()
            .map(|id| (cond.clone(), *round, id.clone()))
            .collect();
        selections.push(Selection { labels, shifts });
    }
    if scope == PcaScope::Pooled {
        let labels: Vec<_> = selections.iter().flat_map(|s| s.labels.clone()).collect();
        let rows: Vec<Vec<f64>> = selections
            .iter()
            .flat_map(|s| {
                s.shifts
                    .rows
                    .row_iter()
                    .map(|r| r.iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect();
        let ids = labels.iter().map(|l| l.2.clone()).collect();
        selections = vec![Selection {
            labels,
            shifts: ShiftMatrix::from_rows(ids, &rows)?,
        }];
    }

    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    let mut table = Vec::new();
    for sel in &selections {
        let (cond, round) = match scope {
            PcaScope::PerRound => (Some(sel.labels[0].0.clone()), Some(sel.labels[0].1)),
            PcaScope::Pooled => (None, None),
        };
        if sel.shifts.len() < 3 {
            let what = format!("{} round {}", sel.labels[0].0, sel.labels[0].1);
            warn!(
                "skipping {what}: PCA needs at least 3 samples, got {}",
                sel.shifts.len()
            );
            skipped.push(what);
            continue;
        }
        let result = pca3(&sel.shifts.rows, normalize)?;
        for ((condition, round, id), scores) in sel.labels.iter().zip(result.projected.row_iter()) {
            let mut row = vec![condition.clone(), round.to_string(), id.clone()];
            row.extend(scores.iter().map(|v| fixed4(*v)));
            table.push(row);
        }
        fits.push(PcaFit {
            condition: cond,
            round,
            n_samples: sel.shifts.len(),
            components: result.components,
            explained_variance: result.explained_variance,
            explained_variance_ratio: result.explained_variance_ratio,
            zero_variance: result.zero_variance,
            mean: result.mean,
        });
    }
    if fits.is_empty() {
        return Err(CliError::Config(
            "no selection has the 3 samples PCA needs".into(),
        ));
    }

    let out = OutputDir::create(&loaded.out_dir, meta)?;
    out.write_csv(
        "pca_projections.csv",
        &["condition", "round", "sample_id", "pc1", "pc2", "pc3"],
        &table,
    )?;
    out.write_json(
        "pca.json",
        &PcaOutput {
            scope: scope.as_str(),
            normalize,
            fits,
            skipped,
        },
    )
}
