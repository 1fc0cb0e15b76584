//! Row-compressed dose-influence matrix.
//!
//! Rows are voxels, columns are spots, entries are Gy per MU. All products
//! accumulate in a fixed order so repeated evaluations are bit-identical
//! regardless of how many worker threads are available.

use rayon::prelude::*;

use crate::error::{ProblemError, Result};

/// Rows per work unit for the transposed product. Fixed so the reduction
/// tree does not depend on the thread count.
const TRANSPOSE_CHUNK_ROWS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct DoseInfluenceMatrix {
    n_voxels: usize,
    n_spots: usize,
    row_offsets: Vec<u64>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl DoseInfluenceMatrix {
    /// Builds a matrix from raw CSR arrays, validating every invariant.
    pub fn from_csr(
        n_voxels: usize,
        n_spots: usize,
        row_offsets: Vec<u64>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_voxels + 1 {
            return Err(ProblemError::InvalidMatrix(format!(
                "row offsets have length {}, expected {}",
                row_offsets.len(),
                n_voxels + 1
            )));
        }
        if row_offsets[0] != 0 {
            return Err(ProblemError::InvalidMatrix("first row offset must be 0".into()));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(ProblemError::InvalidMatrix("row offsets must be nondecreasing".into()));
        }
        let nnz = *row_offsets.last().unwrap() as usize;
        if col_indices.len() != nnz || values.len() != nnz {
            return Err(ProblemError::InvalidMatrix(format!(
                "nnz {} disagrees with column ({}) / value ({}) arrays",
                nnz,
                col_indices.len(),
                values.len()
            )));
        }
        if let Some(&c) = col_indices.iter().find(|&&c| c as usize >= n_spots) {
            return Err(ProblemError::InvalidMatrix(format!(
                "column index {c} out of range for {n_spots} spots"
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(ProblemError::InvalidMatrix(format!(
                "entries must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            n_voxels,
            n_spots,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Assembles a matrix from (voxel, spot, value) triplets. Duplicates are
    /// summed; explicit zeros are dropped.
    pub fn from_triplets(
        n_voxels: usize,
        n_spots: usize,
        mut triplets: Vec<(u32, u32, f64)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0u64; n_voxels + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in triplets {
            if r as usize >= n_voxels {
                return Err(ProblemError::InvalidMatrix(format!(
                    "row index {r} out of range for {n_voxels} voxels"
                )));
            }
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            if v == 0.0 {
                continue;
            }
            row_offsets[r as usize + 1] += 1;
            col_indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..n_voxels {
            row_offsets[i + 1] += row_offsets[i];
        }
        Self::from_csr(n_voxels, n_spots, row_offsets, col_indices, values)
    }

    /// Dense row-major input, mostly for tests and toy problems.
    pub fn from_dense(n_voxels: usize, n_spots: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n_voxels * n_spots {
            return Err(ProblemError::DimensionMismatch {
                what: "dense matrix",
                expected: n_voxels * n_spots,
                got: dense.len(),
            });
        }
        let triplets = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, &v)| ((i / n_spots) as u32, (i % n_spots) as u32, v))
            .collect();
        Self::from_triplets(n_voxels, n_spots, triplets)
    }

    pub fn identity(n: usize) -> Self {
        let triplets = (0..n as u32).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, triplets).expect("identity is a valid matrix")
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_spots(&self) -> usize {
        self.n_spots
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[u64] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_offsets[row] as usize..self.row_offsets[row + 1] as usize
    }

    /// Dot product of one row with `x`.
    #[inline]
    pub fn row_dot(&self, row: usize, x: &[f64]) -> f64 {
        let range = self.row_range(row);
        self.col_indices[range.clone()]
            .iter()
            .zip(&self.values[range])
            .fold(0.0, |acc, (&c, &v)| acc + v * x[c as usize])
    }

    /// `M·x` over all voxels.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_spots(x.len())?;
        let mut out = vec![0.0; self.n_voxels];
        out.par_chunks_mut(1024).enumerate().for_each(|(chunk, dst)| {
            let base = chunk * 1024;
            for (i, d) in dst.iter_mut().enumerate() {
                *d = self.row_dot(base + i, x);
            }
        });
        Ok(out)
    }

    /// `M·x` restricted to the listed rows.
    pub fn matvec_rows(&self, rows: &[u32], x: &[f64]) -> Vec<f64> {
        rows.iter().map(|&r| self.row_dot(r as usize, x)).collect()
    }

    /// `Mᵀ·y` over all voxels.
    pub fn matvec_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_voxels {
            return Err(ProblemError::DimensionMismatch {
                what: "voxel vector",
                expected: self.n_voxels,
                got: y.len(),
            });
        }
        let n_chunks = self.n_voxels.div_ceil(TRANSPOSE_CHUNK_ROWS).max(1);
        let partials: Vec<Vec<f64>> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut acc = vec![0.0; self.n_spots];
                let start = chunk * TRANSPOSE_CHUNK_ROWS;
                let end = (start + TRANSPOSE_CHUNK_ROWS).min(self.n_voxels);
                for row in start..end {
                    let w = y[row];
                    if w != 0.0 {
                        self.axpy_row(row, w, &mut acc);
                    }
                }
                acc
            })
            .collect();
        Ok(tree_reduce(partials, self.n_spots))
    }

    /// `out += Σ_i coef[i]·M[rows[i], :]`, accumulated in row order.
    pub fn accumulate_transpose_rows(&self, rows: &[u32], coef: &[f64], out: &mut [f64]) {
        debug_assert_eq!(rows.len(), coef.len());
        debug_assert_eq!(out.len(), self.n_spots);
        for (&r, &w) in rows.iter().zip(coef) {
            if w != 0.0 {
                self.axpy_row(r as usize, w, out);
            }
        }
    }

    #[inline]
    fn axpy_row(&self, row: usize, w: f64, out: &mut [f64]) {
        let range = self.row_range(row);
        for (&c, &v) in self.col_indices[range.clone()].iter().zip(&self.values[range]) {
            out[c as usize] += w * v;
        }
    }

    /// Row sums, i.e. the dose delivered when every spot carries 1 MU.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_voxels)
            .map(|r| self.values[self.row_range(r)].iter().sum())
            .collect()
    }

    /// Entries of one spot's column as (voxel, value) pairs. Linear scan.
    pub fn column(&self, spot: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for row in 0..self.n_voxels {
            for k in self.row_range(row) {
                if self.col_indices[k] as usize == spot {
                    out.push((row, self.values[k]));
                }
            }
        }
        out
    }

    fn check_spots(&self, len: usize) -> Result<()> {
        if len != self.n_spots {
            return Err(ProblemError::DimensionMismatch {
                what: "spot vector",
                expected: self.n_spots,
                got: len,
            });
        }
        Ok(())
    }
}

/// Pairwise reduction with a partition fixed by the input order.
fn tree_reduce(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_dose() {
        let m = DoseInfluenceMatrix::from_dense(2, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.matvec(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_matvec() {
        let m = DoseInfluenceMatrix::identity(3);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_row_sums() {
        let m = DoseInfluenceMatrix::from_dense(2, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.row_sums(), vec![6.0, 1.0]);
    }

    #[test]
    fn rejects_negative_entries_and_bad_indices() {
        assert!(DoseInfluenceMatrix::from_csr(1, 1, vec![0, 1], vec![0], vec![-1.0]).is_err());
        assert!(DoseInfluenceMatrix::from_csr(1, 1, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(DoseInfluenceMatrix::from_csr(2, 1, vec![0, 1], vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = DoseInfluenceMatrix::identity(3);
        let err = m.matvec(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, ProblemError::DimensionMismatch { expected: 3, got: 2, .. }));
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = DoseInfluenceMatrix::from_triplets(1, 2, vec![(0, 1, 1.0), (0, 1, 2.5), (0, 0, 1.0)])
            .unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![4.5]);
    }

    #[test]
    fn transpose_spans_several_chunks() {
        let n = TRANSPOSE_CHUNK_ROWS * 3 + 17;
        let triplets = (0..n as u32).map(|r| (r, r % 5, 1.0 + (r % 7) as f64)).collect();
        let m = DoseInfluenceMatrix::from_triplets(n, 5, triplets).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i % 11) as f64 * 0.25).collect();
        let got = m.matvec_transpose(&y).unwrap();
        let mut want = vec![0.0; 5];
        for r in 0..n {
            want[r % 5] += (1.0 + (r % 7) as f64) * y[r];
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }
}
