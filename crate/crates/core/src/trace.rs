//! Analysis of hidden-state traces captured from a real model.
//!
//! A trace record holds, for one sample and one round `k`, the last-token
//! hidden state of the context alone and of the context followed by the
//! next correction prompt. Their difference is the prompt-induced shift.
//! Shifts are scored against token groups through the unembeddings and
//! projected onto their top three principal components.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::lm::UnembeddingModel;
use crate::numeric::{all_finite, l2_norm, pairwise_sum};
use crate::{Error, Result, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "v")]
    pub version: u32,
    pub sample_id: String,
    pub round: u32,
    pub condition: String,
    pub h_context: Vec<f64>,
    pub h_prompted: Vec<f64>,
    #[serde(rename = "model")]
    pub model_name: String,
    pub prompt_hash: String,
}

impl TraceRecord {
    pub fn shift(&self) -> Vec<f64> {
        self.h_prompted
            .iter()
            .zip(&self.h_context)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Records of one trace file with their shared dimension and per-group counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSet {
    pub records: Vec<TraceRecord>,
    pub dim: Option<usize>,
    /// Number of records per `(condition, round)`.
    pub counts: BTreeMap<(String, u32), usize>,
}

impl TraceSet {
    pub fn conditions(&self) -> Vec<String> {
        let mut c: Vec<String> = self.counts.keys().map(|(c, _)| c.clone()).collect();
        c.dedup();
        c
    }

    pub fn rounds(&self, condition: &str) -> Vec<u32> {
        self.counts
            .keys()
            .filter(|(c, _)| c == condition)
            .map(|(_, r)| *r)
            .collect()
    }
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<TraceSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_traces(&text, path)
}

/// Parses JSON-lines trace text. `origin` only labels error messages.
///
/// Blank lines are skipped. Bare `NaN`/`Infinity` tokens (as written by
/// Python's `json` module) are read so the offending sample can be named,
/// then rejected.
pub fn parse_traces(text: &str, origin: &Path) -> Result<TraceSet> {
    let mut set = TraceSet::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(first) => {
                match null_out_non_finite(line).and_then(|l| serde_json::from_str(&l).ok()) {
                    Some(v) => v,
                    None => return Err(Error::parse(origin, line_no, first.to_string())),
                }
            }
        };
        let record = record_from_value(&value).map_err(|m| Error::parse(origin, line_no, m))?;
        match set.dim {
            None => set.dim = Some(record.h_context.len()),
            Some(dim) if dim != record.h_context.len() => {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!(
                        "sample `{}` has dimension {} but the file uses {dim}",
                        record.sample_id,
                        record.h_context.len()
                    ),
                ))
            }
            Some(_) => {}
        }
        *set.counts
            .entry((record.condition.clone(), record.round))
            .or_default() += 1;
        set.records.push(record);
    }
    Ok(set)
}

fn record_from_value(value: &Value) -> std::result::Result<TraceRecord, String> {
    let obj = value
        .as_object()
        .ok_or_else(|| "record is not a JSON object".to_string())?;
    let version = field_u64(obj, "v")?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(format!("field `v`: unsupported trace version {version}"));
    }
    let sample_id = field_str(obj, "sample_id")?;
    let round = u32::try_from(field_u64(obj, "round")?)
        .map_err(|_| "field `round`: value too large".to_string())?;
    let condition = field_str(obj, "condition")?;
    let model_name = field_str(obj, "model")?;
    let prompt_hash = field_str(obj, "prompt_hash")?;
    let h_context = field_vector(obj, "h_context", &sample_id)?;
    let h_prompted = field_vector(obj, "h_prompted", &sample_id)?;
    if h_context.len() != h_prompted.len() {
        return Err(format!(
            "sample `{sample_id}`: h_context has {} entries but h_prompted has {}",
            h_context.len(),
            h_prompted.len()
        ));
    }
    if h_context.is_empty() {
        return Err(format!("sample `{sample_id}`: hidden states are empty"));
    }
    Ok(TraceRecord {
        version: FORMAT_VERSION,
        sample_id,
        round,
        condition,
        h_context,
        h_prompted,
        model_name,
        prompt_hash,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> std::result::Result<&'a Value, String> {
    obj.get(name)
        .ok_or_else(|| format!("missing field `{name}`"))
}

fn field_u64(obj: &Map<String, Value>, name: &str) -> std::result::Result<u64, String> {
    field(obj, name)?
        .as_u64()
        .ok_or_else(|| format!("field `{name}` must be a non-negative integer"))
}

fn field_str(obj: &Map<String, Value>, name: &str) -> std::result::Result<String, String> {
    field(obj, name)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| format!("field `{name}` must be a string"))
}

fn field_vector(
    obj: &Map<String, Value>,
    name: &str,
    sample_id: &str,
) -> std::result::Result<Vec<f64>, String> {
    let items = field(obj, name)?
        .as_array()
        .ok_or_else(|| format!("field `{name}` must be an array of numbers"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::Number(n) => n
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("sample `{sample_id}`: field `{name}`[{i}] is not finite")),
            Value::Null => Err(format!(
                "sample `{sample_id}`: field `{name}`[{i}] is not finite"
            )),
            _ => Err(format!("field `{name}`[{i}] must be a number")),
        })
        .collect()
}

/// Rewrites bare `NaN`, `Infinity` and `-Infinity` tokens outside strings to
/// `null`. Returns `None` if nothing was replaced.
fn null_out_non_finite(line: &str) -> Option<String> {
    let mut out = String::with_capacity(line.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut replaced = false;
    let mut rest = line;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '"' {
            in_string = true;
            out.push(ch);
            rest = &rest[1..];
            continue;
        }
        if let Some(token) = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t))
        {
            out.push_str("null");
            rest = &rest[token.len()..];
            replaced = true;
            continue;
        }
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    replaced.then_some(out)
}

/// Prompt-induced shifts of one `(condition, round)` selection, one row per
/// sample, ordered by `sample_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMatrix {
    pub sample_ids: Vec<String>,
    pub rows: DMatrix<f64>,
}

impl ShiftMatrix {
    pub fn from_rows(sample_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if sample_ids.len() != rows.len() {
            return Err(Error::contract("one sample id per row is required"));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("shift rows differ in length"));
        }
        Ok(Self {
            sample_ids,
            rows: DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

pub fn shift_vectors(records: &[TraceRecord], condition: &str, round: u32) -> Result<ShiftMatrix> {
    let mut selected: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| r.condition == condition && r.round == round)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection(format!(
            "condition `{condition}`, round {round}"
        )));
    }
    selected.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let rows: Vec<Vec<f64>> = selected.iter().map(|r| r.shift()).collect();
    ShiftMatrix::from_rows(
        selected.iter().map(|r| r.sample_id.clone()).collect(),
        &rows,
    )
}

/// Source of token unembedding vectors.
pub trait Unembeddings {
    fn dim(&self) -> usize;
    fn unembedding(&self, token: usize) -> Option<&[f64]>;
}

impl Unembeddings for UnembeddingModel {
    fn dim(&self) -> usize {
        self.embed_dim()
    }

    fn unembedding(&self, token: usize) -> Option<&[f64]> {
        (token < self.vocab_size()).then(|| self.unembedding_column(token))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnembeddingEntry {
    pub id: usize,
    #[serde(default)]
    pub label: String,
    pub u: Vec<f64>,
}

/// Unembedding rows for a subset of a real model's vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingTable {
    dim: usize,
    entries: BTreeMap<usize, UnembeddingEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnembeddingFile {
    pub v: u32,
    pub dim: usize,
    pub tokens: Vec<UnembeddingEntry>,
}

impl UnembeddingTable {
    pub fn new(dim: usize, tokens: Vec<UnembeddingEntry>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for entry in tokens {
            if entry.u.len() != dim {
                return Err(Error::contract(format!(
                    "token {} has {} entries, expected {dim}",
                    entry.id,
                    entry.u.len()
                )));
            }
            if !all_finite(&entry.u) {
                return Err(Error::Numeric(format!(
                    "token {} has non-finite entries",
                    entry.id
                )));
            }
            if entries.insert(entry.id, entry).is_some() {
                return Err(Error::contract("duplicate token id in unembedding table"));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: UnembeddingFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if file.v != FORMAT_VERSION {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported version {}", file.v),
            ));
        }
        Self::new(file.dim, file.tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Unembeddings for UnembeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn unembedding(&self, token: usize) -> Option<&[f64]> {
        self.entries.get(&token).map(|e| e.u.as_slice())
    }
}

/// A named list of token ids, e.g. the most toxic tokens of a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub v: u32,
    pub name: String,
    pub ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl TokenGroup {
    pub fn new(name: impl Into<String>, ids: Vec<usize>) -> Self {
        Self {
            v: FORMAT_VERSION,
            name: name.into(),
            ids,
            provenance: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let group: TokenGroup =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if group.v != FORMAT_VERSION {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported version {}", group.v),
            ));
        }
        Ok(group)
    }
}

/// `Σ_samples Σ_{v∈group} U(v)ᵀδ`, reduced pairwise in (sample, token) order.
pub fn group_inner_product_sum(
    unembeddings: &impl Unembeddings,
    shifts: &DMatrix<f64>,
    group: &[usize],
) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::contract("token group is empty"));
    }
    if shifts.ncols() != unembeddings.dim() {
        return Err(Error::contract(format!(
            "shifts have dimension {} but unembeddings have {}",
            shifts.ncols(),
            unembeddings.dim()
        )));
    }
    let columns: Vec<&[f64]> = group
        .iter()
        .map(|&t| {
            unembeddings
                .unembedding(t)
                .ok_or_else(|| Error::contract(format!("no unembedding for token {t}")))
        })
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(shifts.nrows() * columns.len());
    for row in shifts.row_iter() {
        for u in &columns {
            let dot: Vec<f64> = row.iter().zip(u.iter()).map(|(a, b)| a * b).collect();
            terms.push(pairwise_sum(&dot));
        }
    }
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub condition: String,
    pub group: String,
    pub round: u32,
    /// Sum over samples and group tokens.
    pub score: f64,
    pub n_samples: usize,
    /// `score / n_samples`.
    pub mean: f64,
}

/// Scores every `(condition, round)` in `set` against every group.
pub fn score_groups(
    unembeddings: &impl Unembeddings,
    set: &TraceSet,
    groups: &[TokenGroup],
) -> Result<Vec<GroupScore>> {
    let mut scores = Vec::new();
    for (condition, round) in set.counts.keys() {
        let shifts = shift_vectors(&set.records, condition, *round)?;
        for group in groups {
            let score = group_inner_product_sum(unembeddings, &shifts.rows, &group.ids)?;
            scores.push(GroupScore {
                condition: condition.clone(),
                group: group.name.clone(),
                round: *round,
                score,
                n_samples: shifts.len(),
                mean: score / shifts.len() as f64,
            });
        }
    }
    Ok(scores)
}

/// Fixed four-decimal rendering; negative zero prints as `0.0000`.
pub fn format_fixed4(value: f64) -> String {
    let s = format!("{value:.4}");
    if s == "-0.0000" {
        "0.0000".to_string()
    } else {
        s
    }
}

/// Table with one row per `(condition, group)` and a sum and mean column per
/// round. Rows and rounds are sorted; duplicated cells keep the last score.
pub fn report_table(scores: &[GroupScore]) -> String {
    let mut cells: BTreeMap<(String, String), BTreeMap<u32, &GroupScore>> = BTreeMap::new();
    let mut rounds: Vec<u32> = Vec::new();
    for s in scores {
        let row = cells
            .entry((s.condition.clone(), s.group.clone()))
            .or_default();
        if row.insert(s.round, s).is_some() {
            warn!(
                "duplicate score for ({}, {}, round {}); keeping the last one",
                s.condition, s.group, s.round
            );
        }
        rounds.push(s.round);
    }
    rounds.sort_unstable();
    rounds.dedup();

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["condition".to_string(), "group".to_string()];
    for r in &rounds {
        header.push(format!("r{r}_sum"));
        header.push(format!("r{r}_mean"));
    }
    writer.write_record(&header).expect("in-memory write");
    for ((condition, group), row) in &cells {
        let mut record = vec![condition.clone(), group.clone()];
        for r in &rounds {
            match row.get(r) {
                Some(s) => {
                    record.push(format_fixed4(s.score));
                    record.push(format_fixed4(s.mean));
                }
                None => {
                    record.push(String::new());
                    record.push(String::new());
                }
            }
        }
        writer.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Top-three principal components of a set of shift vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit-norm components, pairwise orthogonal. A zero vector stands in
    /// for a component the data dimension cannot supply.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: [f64; 3],
    pub explained_variance_ratio: [f64; 3],
    /// Components carrying (numerically) no variance, including padding.
    pub zero_variance: [bool; 3],
    /// `n × 3` scores of the centered rows.
    pub projected: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub normalized: bool,
}

/// Relative cutoff below which a component counts as carrying no variance.
const ZERO_VARIANCE_RTOL: f64 = 1e-20;

/// Three-component PCA. With `normalize`, every row is first scaled to unit
/// L2 norm (all-zero rows stay zero). Rows are then mean-centered and the
/// right singular vectors of the centered matrix give the components. Each
/// component is signed so its largest-magnitude entry is positive.
pub fn pca3(shifts: &DMatrix<f64>, normalize: bool) -> Result<PcaResult> {
    let n = shifts.nrows();
    let d = shifts.ncols();
    if n < 3 {
        return Err(Error::contract(format!(
            "PCA needs at least 3 rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::contract("PCA needs at least one column"));
    }
    if !all_finite(shifts.as_slice()) {
        return Err(Error::Numeric("PCA input has non-finite entries".into()));
    }
    let mut x = shifts.clone();
    if normalize {
        for mut row in x.row_iter_mut() {
            let norm = l2_norm(&row.iter().copied().collect::<Vec<_>>());
            if norm > 0.0 {
                row /= norm;
            }
        }
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| pairwise_sum(&x.column(j).iter().copied().collect::<Vec<_>>()) / n as f64)
        .collect();
    for mut row in x.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let total_ss = x.norm_squared();
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("singular values are finite")
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(3);
    let mut explained_variance = [0.0; 3];
    let mut explained_variance_ratio = [0.0; 3];
    let mut zero_variance = [true; 3];
    for slot in 0..3 {
        let Some(&idx) = order.get(slot) else {
            components.push(vec![0.0; d]);
            continue;
        };
        let mut component: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = component
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        if component[pivot] < 0.0 {
            component.iter_mut().for_each(|v| *v = -*v);
        }
        let sigma_sq = svd.singular_values[idx].powi(2);
        explained_variance[slot] = sigma_sq / (n - 1) as f64;
        if total_ss > 0.0 {
            explained_variance_ratio[slot] = (sigma_sq / total_ss).clamp(0.0, 1.0);
        }
        zero_variance[slot] = total_ss == 0.0 || sigma_sq <= ZERO_VARIANCE_RTOL * total_ss;
        components.push(component);
    }

    let basis = DMatrix::from_fn(d, 3, |i, j| components[j][i]);
    let projected = &x * basis;
    Ok(PcaResult {
        components,
        explained_variance,
        explained_variance_ratio,
        zero_variance,
        projected,
        mean,
        normalized: normalize,
    })
}
