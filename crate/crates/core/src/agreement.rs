//! Confusion matrices and normalized mutual information between two
//! partitions of the same points.

use crate::error::{Error, Result};

/// Counts `N_ij` of points with class `i` in partition A and block `j` in
/// partition B, over densely re-indexed label values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    /// Builds a matrix from explicit counts. Zero rows or columns are kept.
    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self> {
        let rows = counts.len();
        let cols = counts.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("confusion matrix must be a non-empty rectangle".into()));
        }
        let flat: Vec<u64> = counts.concat();
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = row_sums.iter().sum();
        if total == 0 {
            return Err(Error::Shape("confusion matrix has zero total count".into()));
        }
        Ok(Self {
            rows,
            cols,
            counts: flat,
            row_sums,
            col_sums,
            total,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.cols).map(<[u64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<Vec<u64>> = (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).collect())
            .collect();
        Self::from_counts(&t).expect("transpose of a valid matrix is valid")
    }

    /// True when every non-empty row and column has exactly one non-zero entry.
    fn is_permuted_diagonal(&self) -> bool {
        let nonzero_in_row = |i: usize| (0..self.cols).filter(|&j| self.get(i, j) > 0).count();
        let nonzero_in_col = |j: usize| (0..self.rows).filter(|&i| self.get(i, j) > 0).count();
        (0..self.rows).all(|i| self.row_sums[i] == 0 || nonzero_in_row(i) == 1)
            && (0..self.cols).all(|j| self.col_sums[j] == 0 || nonzero_in_col(j) == 1)
    }
}

fn dense_index(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<u32> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let idx = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    (idx, distinct.len())
}

pub fn confusion_matrix(labels_a: &[u32], labels_b: &[u32]) -> Result<ConfusionMatrix> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Shape(format!(
            "label vectors differ in length ({} vs {})",
            labels_a.len(),
            labels_b.len()
        )));
    }
    if labels_a.is_empty() {
        return Err(Error::Shape("label vectors are empty".into()));
    }
    let (ia, ra) = dense_index(labels_a);
    let (ib, cb) = dense_index(labels_b);
    let mut counts = vec![vec![0u64; cb]; ra];
    for (&i, &j) in ia.iter().zip(&ib) {
        counts[i][j] += 1;
    }
    ConfusionMatrix::from_counts(&counts)
}

/// Sums after sorting so the result does not depend on term order; this
/// makes NMI exactly invariant to transposition and row/column permutation.
fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `Σ n log(n / N)` over a marginal, i.e. `−N · H(marginal)`.
fn marginal_term(marginal: &[u64], total: u64) -> f64 {
    order_free_sum(
        marginal
            .iter()
            .filter(|&&m| m > 0)
            .map(|&m| m as f64 * (m as f64 / total as f64).ln())
            .collect(),
    )
}

/// Normalized mutual information:
///
/// ```text
///            −2 Σ_ij N_ij log(N_ij N / (N_i· N_·j))
/// NMI = ─────────────────────────────────────────────────
///        Σ_i N_i· log(N_i· / N) + Σ_j N_·j log(N_·j / N)
/// ```
///
/// Natural log; zero cells contribute nothing. If one partition is a single
/// block and the other is not the result is 0; if both are single blocks it is 1.
pub fn nmi(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total;
    let rows_term = marginal_term(&cm.row_sums, n);
    let cols_term = marginal_term(&cm.col_sums, n);
    match (rows_term == 0.0, cols_term == 0.0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    if cm.is_permuted_diagonal() {
        return 1.0;
    }

    let mut terms = Vec::with_capacity(cm.rows * cm.cols);
    for i in 0..cm.rows {
        for j in 0..cm.cols {
            let nij = cm.get(i, j);
            if nij == 0 {
                continue;
            }
            // Integer products keep the independent-cell ratio exactly 1.
            let ratio = (u128::from(nij) * u128::from(n)) as f64
                / (u128::from(cm.row_sums[i]) * u128::from(cm.col_sums[j])) as f64;
            terms.push(nij as f64 * ratio.ln());
        }
    }
    let numerator = -2.0 * order_free_sum(terms);
    let denominator = rows_term + cols_term;
    let value = numerator / denominator;
    debug_assert!(
        (-1e-12..=1.0 + 1e-12).contains(&value),
        "NMI {value} outside [0, 1] beyond rounding"
    );
    value.clamp(0.0, 1.0)
}

/// NMI between two labelings of the same points.
pub fn nmi_labels(labels_a: &[u32], labels_b: &[u32]) -> Result<f64> {
    confusion_matrix(labels_a, labels_b).map(|cm| nmi(&cm))
}
