//! External clustering scores against ground truth.
//!
//! Contingency tables put predicted clusters on rows and true classes on
//! columns. Label ids are arbitrary non-negative integers and are
//! canonicalized to `0..K` in order of first appearance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense relabelling by first appearance. Returns the dense labels and the
/// original id of each dense index.
pub fn canonicalize(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = Vec::new();
    let mut lookup: BTreeMap<usize, usize> = BTreeMap::new();
    let dense = labels
        .iter()
        .map(|l| {
            *lookup.entry(*l).or_insert_with(|| {
                ids.push(*l);
                ids.len() - 1
            })
        })
        .collect();
    (dense, ids)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// `w[i][j]`: samples in predicted cluster `i` and true class `j`.
    pub w: Vec<Vec<u64>>,
    /// Row sums (cluster sizes).
    pub e: Vec<u64>,
    /// Column sums (class sizes).
    pub f: Vec<u64>,
    pub n: u64,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

impl ContingencyTable {
    pub fn from_counts(w: Vec<Vec<u64>>) -> Result<Self> {
        let cols = w.first().map_or(0, |r| r.len());
        if w.is_empty() || cols == 0 || w.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("contingency counts must be a non-empty rectangular matrix"));
        }
        let e: Vec<u64> = w.iter().map(|r| r.iter().sum()).collect();
        let f: Vec<u64> = (0..cols).map(|j| w.iter().map(|r| r[j]).sum()).collect();
        let n = e.iter().sum();
        Ok(ContingencyTable { row_ids: (0..w.len()).collect(), col_ids: (0..cols).collect(), w, e, f, n })
    }

    pub fn rows(&self) -> usize {
        self.w.len()
    }

    pub fn cols(&self) -> usize {
        self.f.len()
    }

    pub fn transpose(&self) -> ContingencyTable {
        let w = (0..self.cols()).map(|j| self.w.iter().map(|r| r[j]).collect()).collect();
        ContingencyTable {
            w,
            e: self.f.clone(),
            f: self.e.clone(),
            n: self.n,
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }
}

pub fn contingency(y_true: &[usize], y_pred: &[usize]) -> Result<ContingencyTable> {
    if y_true.len() != y_pred.len() {
        return Err(Error::contract(format!(
            "label vectors differ in length: truth {} vs prediction {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::contract("label vectors must be non-empty"));
    }
    let (truth, col_ids) = canonicalize(y_true);
    let (pred, row_ids) = canonicalize(y_pred);
    let mut w = vec![vec![0u64; col_ids.len()]; row_ids.len()];
    for (t, p) in truth.iter().zip(&pred) {
        w[*p][*t] += 1;
    }
    let mut table = ContingencyTable::from_counts(w)?;
    table.row_ids = row_ids;
    table.col_ids = col_ids;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Rectangular inputs are padded to square with the largest entry. Among all
/// optimal assignments the lexicographically smallest row→column map is
/// returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("cost matrix rows differ in length"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::contract("cost matrix entries must be finite"));
    }
    let n = rows.max(cols);
    let pad = cost.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = cost.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * (1.0 + scale);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { pad };

    // Shortest augmenting path with potentials, 1-indexed as in the classic
    // formulation; u/v end up as an optimal dual.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    let mut row_of = vec![0usize; n];
    for j in 1..=n {
        col_of[owner[j] - 1] = j - 1;
        row_of[j - 1] = owner[j] - 1;
    }
    let tight = |i: usize, j: usize| at(i, j) - u[i + 1] - v[j + 1] <= tol;
    lexicographic_refine(n, &tight, &mut col_of, &mut row_of);

    let pairs: Vec<(usize, usize)> = (0..rows).filter(|i| col_of[*i] < cols).map(|i| (i, col_of[i])).collect();
    let total = pairs.iter().map(|(i, j)| cost[*i][*j]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Walks rows in order and moves each to the smallest column that still
/// admits a perfect matching on the tight (zero reduced cost) edges.
fn lexicographic_refine(n: usize, tight: &dyn Fn(usize, usize) -> bool, col_of: &mut [usize], row_of: &mut [usize]) {
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..col_of[i] {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            // Row currently holding j must move; the column i frees is the target.
            let target = col_of[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if alternating_path(row_of[j], target, i, tight, col_of, row_of, &fixed_col, &mut visited, &mut path) {
                for (r, c) in path.into_iter().rev() {
                    col_of[r] = c;
                    row_of[c] = r;
                }
                col_of[i] = j;
                row_of[j] = i;
                break;
            }
        }
        fixed_col[col_of[i]] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn alternating_path(
    row: usize,
    target: usize,
    skip_row: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of: &[usize],
    row_of: &[usize],
    fixed_col: &[bool],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..col_of.len() {
        if visited[c] || fixed_col[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = row_of[c];
        if next != skip_row && alternating_path(next, target, skip_row, tight, col_of, row_of, fixed_col, visited, path)
        {
            path.push((row, c));
            return true;
        }
    }
    false
}

/// Best one-to-one cluster→class matching and the fraction of samples it
/// gets right.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedAccuracy {
    pub accuracy: f64,
    /// Dense `(row, column)` pairs of the contingency table.
    pub pairs: Vec<(usize, usize)>,
}

pub fn matched_accuracy(table: &ContingencyTable) -> Result<MatchedAccuracy> {
    if table.n == 0 {
        return Err(Error::contract("contingency table is empty"));
    }
    let max = table.w.iter().flatten().copied().max().unwrap_or(0);
    let cost: Vec<Vec<f64>> = table.w.iter().map(|r| r.iter().map(|w| (max - w) as f64).collect()).collect();
    let assignment = hungarian(&cost)?;
    let hits: u64 = assignment.pairs.iter().map(|(i, j)| table.w[*i][*j]).sum();
    Ok(MatchedAccuracy { accuracy: hits as f64 / table.n as f64, pairs: assignment.pairs })
}

pub fn clustering_accuracy(table: &ContingencyTable) -> Result<f64> {
    Ok(matched_accuracy(table)?.accuracy)
}

fn comb2(x: u64) -> i128 {
    let x = x as i128;
    x * (x - 1) / 2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjustedRand {
    pub value: f64,
    /// The chance-adjustment denominator vanished; `value` is 1 by convention.
    pub degenerate: bool,
}

/// Adjusted Rand index from the contingency table, evaluated in exact
/// integer arithmetic up to the final division.
pub fn adjusted_rand(table: &ContingencyTable) -> Result<AdjustedRand> {
    if table.n < 2 {
        return Err(Error::contract("adjusted Rand index needs at least two samples"));
    }
    let index: i128 = table.w.iter().flatten().map(|w| comb2(*w)).sum();
    let rows: i128 = table.e.iter().map(|e| comb2(*e)).sum();
    let cols: i128 = table.f.iter().map(|f| comb2(*f)).sum();
    let total = comb2(table.n);
    // Both numerator and denominator multiplied by 2 * C(n, 2).
    let num = 2 * (index * total - rows * cols);
    let den = (rows + cols) * total - 2 * rows * cols;
    if den == 0 {
        return Ok(AdjustedRand { value: 1.0, degenerate: true });
    }
    Ok(AdjustedRand { value: num as f64 / den as f64, degenerate: false })
}

pub fn ari(table: &ContingencyTable) -> Result<f64> {
    Ok(adjusted_rand(table)?.value)
}

/// Majority-class share of every non-empty predicted cluster, in row order.
pub fn purity(table: &ContingencyTable) -> Vec<f64> {
    table
        .w
        .iter()
        .zip(&table.e)
        .filter(|(_, e)| **e > 0)
        .map(|(row, e)| *row.iter().max().unwrap_or(&0) as f64 / *e as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyJson {
    pub w: Vec<Vec<u64>>,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n: u64,
    pub accuracy: f64,
    pub ari: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ari_degenerate: bool,
    pub purity: Vec<f64>,
    /// Predicted cluster id → true class id.
    pub matching: BTreeMap<usize, usize>,
    pub contingency: ContingencyJson,
    pub orientation: String,
}

pub const ORIENTATION: &str = "rows=predicted clusters, cols=true classes";

pub fn evaluate(y_true: &[usize], y_pred: &[usize]) -> Result<ClusterReport> {
    let table = contingency(y_true, y_pred)?;
    report_from_table(&table)
}

pub fn report_from_table(table: &ContingencyTable) -> Result<ClusterReport> {
    let matched = matched_accuracy(table)?;
    let ari = if table.n >= 2 { adjusted_rand(table)? } else { AdjustedRand { value: 1.0, degenerate: true } };
    Ok(ClusterReport {
        n: table.n,
        accuracy: matched.accuracy,
        ari: ari.value,
        ari_degenerate: ari.degenerate,
        purity: purity(table),
        matching: matched.pairs.iter().map(|(i, j)| (table.row_ids[*i], table.col_ids[*j])).collect(),
        contingency: ContingencyJson {
            w: table.w.clone(),
            row_ids: table.row_ids.clone(),
            col_ids: table.col_ids.clone(),
        },
        orientation: ORIENTATION.to_string(),
    })
}
