mod oracles;

use std::path::PathBuf;

use nalgebra::DMatrix;
use proptest::prelude::*;

use oracles::*;
use steerlab_core::concept::{validate_concept, ConceptSpec};
use steerlab_core::lm::UnembeddingModel;
use steerlab_core::trace::{
    group_inner_product_sum, load_traces, pca3, report_table, score_groups, shift_vectors,
    GroupScore, TokenGroup,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn golden_fixture_loads_four_records() {
    let set = load_traces(fixture("traces_golden.jsonl")).unwrap();
    let ids: Vec<&str> = set.records.iter().map(|r| r.sample_id.as_str()).collect();
    assert_eq!(ids, vec!["s3", "s1", "s4", "s2"]);
    assert_eq!(set.dim, Some(3));
    assert_eq!(set.counts.get(&("toxic".to_string(), 0)), Some(&4));
}

#[test]
fn golden_shift_matrix_is_byte_identical() {
    let set = load_traces(fixture("traces_golden.jsonl")).unwrap();
    let shifts = shift_vectors(&set.records, "toxic", 0).unwrap();
    let mut out = String::from("sample_id,d0,d1,d2\n");
    for (id, row) in shifts.sample_ids.iter().zip(shifts.rows.row_iter()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{id},{}\n", cells.join(",")));
    }
    let golden = std::fs::read_to_string(fixture("shifts_golden.csv")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn golden_score_table_is_byte_identical() {
    let s = |condition: &str, group: &str, round: u32, score: f64| GroupScore {
        condition: condition.into(),
        group: group.into(),
        round,
        score,
        n_samples: 2,
        mean: score / 2.0,
    };
    let scores = vec![
        s("toxic", "top_100", 0, 12.345678),
        s("non-toxic", "top_100", 1, -std::f64::consts::PI),
        s("non-toxic", "top_100", 0, -1.0),
        s("toxic", "top_100", 1, 0.0),
        s("non-toxic", "bottom_100", 0, 2.5),
    ];
    let golden = std::fs::read_to_string(fixture("scores_golden.csv")).unwrap();
    assert_eq!(report_table(&scores), golden);
}

/// Model where `U(v)ᵀℓ = 0` on tokens 0..100 and `−1` on tokens 100..200
/// (`p = 0`, `d = 1`). `p = 0` is outside the `ConceptSpec` domain, so the
/// classes are plain index ranges here.
fn separated_group_model() -> (UnembeddingModel, Vec<f64>) {
    let mut r = rng(61);
    let (cols, ell) = aligned_instance(&mut r, 12, 200, 100, 0.0, 1.0);
    let flat: Vec<f64> = cols.iter().flatten().copied().collect();
    (
        UnembeddingModel::tied(DMatrix::from_column_slice(12, 200, &flat)).unwrap(),
        ell,
    )
}

#[test]
fn synthetic_separation_of_group_sums() {
    let (model, ell) = separated_group_model();
    let delta: Vec<f64> = ell.iter().map(|e| 3.0 * e).collect();
    let shifts = DMatrix::from_row_slice(1, delta.len(), &delta);
    let c1: Vec<usize> = (0..100).collect();
    let c2: Vec<usize> = (100..200).collect();
    let s2 = group_inner_product_sum(&model, &shifts, &c2).unwrap();
    let s1 = group_inner_product_sum(&model, &shifts, &c1).unwrap();
    assert!((s2 + 300.0).abs() <= 1e-8, "{s2}");
    assert!(s1.abs() <= 1e-8, "{s1}");
}

#[test]
fn group_sums_track_alignment_for_validated_concepts() {
    let mut r = rng(62);
    let (cols, ell) = aligned_instance(&mut r, 6, 30, 12, 0.8, 2.0);
    let flat: Vec<f64> = cols.iter().flatten().copied().collect();
    let model = UnembeddingModel::tied(DMatrix::from_column_slice(6, 30, &flat)).unwrap();
    let spec = ConceptSpec::new("c", (0..12).collect(), (12..30).collect(), 0.8, 2.0, ell).unwrap();
    assert!(validate_concept(&model, &spec).unwrap().passed);
    for lambda in [-2.0, 0.5, 4.0] {
        let delta: Vec<f64> = spec.ell().iter().map(|e| lambda * e).collect();
        let shifts = DMatrix::from_row_slice(1, 6, &delta);
        let s1 = group_inner_product_sum(&model, &shifts, spec.c1()).unwrap();
        let s2 = group_inner_product_sum(&model, &shifts, spec.c2()).unwrap();
        assert!((s1 - 0.8 * 12.0 * lambda).abs() <= 1e-8);
        assert!((s2 - (0.8 - 2.0) * 18.0 * lambda).abs() <= 1e-8);
    }
}

#[test]
fn score_groups_covers_every_condition_and_round() {
    let set = load_traces(fixture("traces_golden.jsonl")).unwrap();
    let model = UnembeddingModel::tied(DMatrix::identity(3, 3)).unwrap();
    let groups = vec![
        TokenGroup::new("first", vec![0]),
        TokenGroup::new("rest", vec![1, 2]),
    ];
    let scores = score_groups(&model, &set, &groups).unwrap();
    assert_eq!(scores.len(), 2);
    // column sums of the golden shift matrix
    assert!((scores[0].score - 0.75).abs() < 1e-15);
    assert!((scores[1].score - (-1.25 + 3.125)).abs() < 1e-15);
    assert_eq!(scores[0].n_samples, 4);
    assert!((scores[0].mean - 0.1875).abs() < 1e-15);
}

proptest! {
    #[test]
    fn group_sum_is_linear_in_shifts(seed in 0u64..5000) {
        let mut r = rng(seed);
        let cols = gaussian_columns(&mut r, 5, 12);
        let flat: Vec<f64> = cols.iter().flatten().copied().collect();
        let model = UnembeddingModel::tied(DMatrix::from_column_slice(5, 12, &flat)).unwrap();
        let a = DMatrix::from_fn(4, 5, |_, _| gaussian(&mut r));
        let b = DMatrix::from_fn(4, 5, |_, _| gaussian(&mut r));
        let group = [0, 3, 4, 9, 11];
        let sa = group_inner_product_sum(&model, &a, &group).unwrap();
        let sb = group_inner_product_sum(&model, &b, &group).unwrap();
        let sab = group_inner_product_sum(&model, &(&a + &b), &group).unwrap();
        let scale = sa.abs().max(sb.abs()).max(1.0);
        prop_assert!((sab - sa - sb).abs() <= 1e-9 * scale);
    }
}

fn anisotropic_cloud(seed: u64, n: usize) -> DMatrix<f64> {
    let scales = [3.0, 2.0, 1.0, 0.3, 0.2, 0.1];
    let d = scales.len();
    let mut r = rng(seed);
    // random orthonormal basis via Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = gaussian_vec(&mut r, d);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        basis.push(v);
    }
    let coords: Vec<Vec<f64>> = (0..n)
        .map(|_| scales.iter().map(|s| s * gaussian(&mut r)).collect())
        .collect();
    DMatrix::from_fn(n, d, |i, j| {
        (0..d).map(|k| coords[i][k] * basis[k][j]).sum::<f64>() + 5.0
    })
}

#[test]
fn pca_ratios_match_dense_eigensolver() {
    let x = anisotropic_cloud(71, 400);
    let pca = pca3(&x, false).unwrap();
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let (values, vectors) = jacobi_eigen(&covariance(&rows));
    let trace: f64 = values.iter().sum();
    for k in 0..3 {
        assert!((pca.explained_variance_ratio[k] - values[k] / trace).abs() <= 1e-8);
        assert!((pca.explained_variance[k] - values[k]).abs() <= 1e-8 * values[0]);
        let agreement = dot(&pca.components[k], &vectors[k]).abs();
        assert!((agreement - 1.0).abs() <= 1e-8);
    }
    for i in 0..3 {
        assert!((norm(&pca.components[i]) - 1.0).abs() <= 1e-10);
        for j in i + 1..3 {
            assert!(dot(&pca.components[i], &pca.components[j]).abs() <= 1e-8);
        }
    }
    assert!(pca
        .explained_variance_ratio
        .windows(2)
        .all(|w| w[0] >= w[1]));
}

#[test]
fn pca_sign_convention_makes_largest_entry_positive() {
    let pca = pca3(&anisotropic_cloud(72, 100), true).unwrap();
    for c in &pca.components {
        let max = c
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(max > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_projection_ignores_translation(seed in 0u64..10_000, offset in prop::collection::vec(-50.0f64..50.0, 6)) {
        let x = anisotropic_cloud(seed, 30);
        let shifted = DMatrix::from_fn(30, 6, |i, j| x[(i, j)] + offset[j]);
        let a = pca3(&x, false).unwrap();
        let b = pca3(&shifted, false).unwrap();
        for k in 0..3 {
            let col_a: Vec<f64> = a.projected.column(k).iter().copied().collect();
            let col_b: Vec<f64> = b.projected.column(k).iter().copied().collect();
            let same = col_a.iter().zip(&col_b).all(|(p, q)| (p - q).abs() <= 1e-8);
            let flipped = col_a.iter().zip(&col_b).all(|(p, q)| (p + q).abs() <= 1e-8);
            prop_assert!(same || flipped);
        }
    }

    #[test]
    fn pca_components_are_orthonormal(seed in 0u64..10_000, n in 3usize..40, normalize: bool) {
        let mut r = rng(seed);
        let x = DMatrix::from_fn(n, 7, |_, _| gaussian(&mut r));
        let pca = pca3(&x, normalize).unwrap();
        for i in 0..3 {
            prop_assert!((norm(&pca.components[i]) - 1.0).abs() <= 1e-10);
            for j in i + 1..3 {
                prop_assert!(dot(&pca.components[i], &pca.components[j]).abs() <= 1e-8);
            }
        }
        prop_assert!(pca.explained_variance_ratio.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(pca.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(pca.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }
}
