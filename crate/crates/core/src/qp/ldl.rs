//! LDLᵀ factorization of small symmetric positive semidefinite matrices.
//!
//! Storage is dense, but elimination only touches structurally nonzero
//! entries and rows are ordered by ascending degree, so the block structure
//! of market clearing systems (many two-entry reciprocity rows, a few dense
//! balance rows) factors in near-linear time.
//!
//! Pivots that are numerically zero are skipped, which turns the solve into
//! a consistent pseudo-solve for rank-deficient (redundant) equality systems.

pub(crate) struct Ldl {
    perm: Vec<usize>,
    cols: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

/// Dense symmetric matrix accumulated from sparse outer products.
pub(crate) struct SymAccumulator {
    n: usize,
    data: Vec<f64>,
}

impl SymAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Adds `w · v vᵀ` for a sparse vector `v`.
    pub fn add_outer(&mut self, v: &[(usize, f64)], w: f64) {
        for &(i, vi) in v {
            for &(j, vj) in v {
                self.data[i * self.n + j] += w * vi * vj;
            }
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += value;
        }
    }
}

impl Ldl {
    pub fn factor(mat: SymAccumulator) -> Self {
        let n = mat.n;
        let a = &mat.data;
        let degree: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && a[i * n + j] != 0.0).count())
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (degree[i], i));

        // Work on the permuted lower triangle.
        let mut w = vec![0.0; n * n];
        for (pi, &i) in perm.iter().enumerate() {
            for (pj, &j) in perm.iter().enumerate().take(pi + 1) {
                w[pi * n + pj] = a[i * n + j];
            }
        }
        let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
        let pivot_tol = 1e-12 * (1.0 + max_diag);

        let mut cols = Vec::with_capacity(n);
        let mut diag = vec![0.0; n];
        let mut nz: Vec<usize> = Vec::new();
        for k in 0..n {
            let d = w[k * n + k];
            nz.clear();
            nz.extend((k + 1..n).filter(|&i| w[i * n + k] != 0.0));
            if d <= pivot_tol {
                cols.push(Vec::new());
                continue;
            }
            diag[k] = d;
            let col: Vec<(usize, f64)> = nz.iter().map(|&i| (i, w[i * n + k] / d)).collect();
            for (a_idx, &(i, li)) in col.iter().enumerate() {
                let scaled = li * d;
                for &(j, lj) in &col[..=a_idx] {
                    w[i * n + j] -= scaled * lj;
                }
            }
            cols.push(col);
        }
        Self { perm, cols, diag }
    }

    /// Solves in place; components along skipped pivots are set to zero.
    pub fn solve(&self, b: &mut [f64], scratch: &mut Vec<f64>) {
        let n = self.perm.len();
        scratch.clear();
        scratch.extend(self.perm.iter().map(|&i| b[i]));
        let y = scratch;
        for k in 0..n {
            let yk = y[k];
            if yk != 0.0 {
                for &(i, l) in &self.cols[k] {
                    y[i] -= l * yk;
                }
            }
        }
        for k in 0..n {
            y[k] = if self.diag[k] != 0.0 { y[k] / self.diag[k] } else { 0.0 };
        }
        for k in (0..n).rev() {
            let mut acc = y[k];
            for &(i, l) in &self.cols[k] {
                acc -= l * y[i];
            }
            y[k] = acc;
        }
        for (k, &i) in self.perm.iter().enumerate() {
            b[i] = y[k];
        }
    }
}
