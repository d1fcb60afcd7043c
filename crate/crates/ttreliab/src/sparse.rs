//! Minimal sparse symmetric-positive-definite toolkit shared by the RVE and
//! plate solvers: compressed-sparse-row storage built from triplets and a
//! Jacobi-preconditioned conjugate gradient.

/// Sparse matrix in compressed-sparse-row form.
pub(crate) struct Csr {
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub n: usize,
}

impl Csr {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (row, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[row]..self.indptr[row + 1] {
                acc += self.values[k] * x[self.indices[k] as usize];
            }
            *yi = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for row in 0..self.n {
            for k in self.indptr[row]..self.indptr[row + 1] {
                if self.indices[k] as usize == row {
                    d[row] = self.values[k];
                }
            }
        }
        d
    }
}

/// Builds CSR from (row, col, value) triplets, summing duplicates.
pub(crate) fn csr_from_triplets(n: usize, mut trips: Vec<(u32, u32, f64)>) -> Csr {
    trips.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut indptr = vec![0usize; n + 1];
    let mut indices = Vec::with_capacity(trips.len());
    let mut values: Vec<f64> = Vec::with_capacity(trips.len());
    let mut last: Option<(u32, u32)> = None;
    for (r, c, v) in trips {
        if last == Some((r, c)) {
            *values.last_mut().unwrap() += v;
        } else {
            indptr[r as usize + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
    }
    for i in 0..n {
        indptr[i + 1] += indptr[i];
    }
    Csr { indptr, indices, values, n }
}

/// Jacobi-preconditioned conjugate gradient; returns the solution once the
/// residual drops below `tol` relative to the right-hand side, or the final
/// relative residual on stall.
pub(crate) fn pcg(a: &Csr, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, f64> {
    let n = a.n;
    let diag = a.diagonal();
    let minv: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(rnorm / bnorm)
}
