//! Small dense linear algebra helpers shared by the tensor-train and
//! homogenization modules.

use nalgebra::{DMatrix, DVector};

/// Selects `r` rows of a tall matrix `a` (m x r, m >= r) approximating the
/// maximum-volume submatrix. Greedy maxvol: seed with partial-pivot Gaussian
/// elimination, then swap rows while any coefficient of `a * a_sub^-1`
/// exceeds 1 + delta.
pub fn maxvol(a: &DMatrix<f64>, delta: f64, max_iter: usize) -> Vec<usize> {
    let (m, r) = (a.nrows(), a.ncols());
    assert!(m >= r && r > 0, "maxvol needs a tall matrix");
    if m == r {
        return (0..r).collect();
    }

    // Seed: row pivots of Gaussian elimination.
    let mut work = a.clone();
    let mut pivots = Vec::with_capacity(r);
    let mut available: Vec<usize> = (0..m).collect();
    for col in 0..r {
        let (best_pos, _) = available
            .iter()
            .enumerate()
            .map(|(pos, &row)| (pos, work[(row, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        let prow = available.swap_remove(best_pos);
        pivots.push(prow);
        let pval = work[(prow, col)];
        if pval.abs() < 1e-300 {
            continue;
        }
        for &row in &available {
            let factor = work[(row, col)] / pval;
            for c in col..r {
                work[(row, c)] -= factor * work[(prow, c)];
            }
        }
    }

    // Iterate: C = A * A_I^-1, swap the row with the largest coefficient.
    for _ in 0..max_iter {
        let sub = select_rows(a, &pivots);
        let lu = sub.lu();
        let Some(inv) = lu.try_inverse() else { break };
        let c = a * inv;
        let mut best = (0usize, 0usize, 1.0 + delta);
        for i in 0..m {
            for j in 0..r {
                let v = c[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= 1.0 + delta {
            break;
        }
        pivots[best.1] = best.0;
    }
    pivots
}

/// Gathers the given rows of `a` into a new matrix.
pub fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), a.ncols());
    for (k, &row) in rows.iter().enumerate() {
        out.set_row(k, &a.row(row));
    }
    out
}

/// Symmetric part of a square matrix.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    DVector::from_vec(ev)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a)[0]
}

/// Frobenius norm of the difference of two matrices.
pub fn frob_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn maxvol_finds_dominant_rows() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut a = DMatrix::from_fn(40, 3, |_, _| rng.gen_range(-1.0..1.0));
        // Plant a clearly dominant block in rows 10..13.
        for (k, row) in (10..13).enumerate() {
            for c in 0..3 {
                a[(row, c)] = if c == k { 50.0 } else { 0.0 };
            }
        }
        let rows = maxvol(&a, 1e-2, 100);
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![10, 11, 12]);
    }

    #[test]
    fn maxvol_coefficients_bounded() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(60, 5, |_, _| rng.gen_range(-1.0..1.0));
        let rows = maxvol(&a, 1e-2, 200);
        let sub = select_rows(&a, &rows);
        let c = &a * sub.try_inverse().unwrap();
        assert!(c.iter().all(|v| v.abs() <= 1.0 + 2e-2 + 1e-9));
    }
}
