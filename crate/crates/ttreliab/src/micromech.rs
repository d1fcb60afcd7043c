//! Representative-volume-element homogenization on a periodic pixel grid,
//! Voigt-Reuss bounds with the spectral factor used by the surrogate codec,
//! and training-dataset generation.
//!
//! The unit cell is an n x n grid of bilinear quadrilateral pixels with a
//! centered fiber disk. Periodicity comes for free from wrap-around node
//! indexing; one node is pinned to remove the translation null space. For
//! each of the m unit macroscopic strains the fluctuation problem is solved
//! with a Jacobi-preconditioned conjugate gradient on a CSR matrix, and the
//! averaged stresses assemble the homogenized stiffness column by column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::exec;
use crate::linalg::symmetrize;
use crate::seeds::SeedNode;
use crate::sparse::{csr_from_triplets, pcg};

#[derive(Debug, Error)]
pub enum MicromechError {
    #[error("invalid phase properties: {0}")]
    BadPhases(String),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("singular phase stiffness")]
    SingularPhase,
    #[error("linear solver stalled at relative residual {0:.3e}")]
    SolverStalled(f64),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PhaseProperties {
    /// Fiber Young's modulus (GPa).
    pub e_f: f64,
    /// Matrix Young's modulus (GPa).
    pub e_m: f64,
    pub nu_f: f64,
    pub nu_m: f64,
}

impl PhaseProperties {
    pub fn with_moduli(e_f: f64, e_m: f64) -> Self {
        // Typical glass/epoxy Poisson ratios; configurable, never baked in
        // downstream.
        PhaseProperties { e_f, e_m, nu_f: 0.22, nu_m: 0.35 }
    }

    pub fn validate(&self) -> Result<(), MicromechError> {
        for (e, nu) in [(self.e_f, self.nu_f), (self.e_m, self.nu_m)] {
            if !(e > 0.0) {
                return Err(MicromechError::BadPhases("Young's modulus must be positive".into()));
            }
            if !(nu > -1.0 && nu < 0.5) {
                return Err(MicromechError::BadPhases("Poisson ratio out of (-1, 0.5)".into()));
            }
        }
        Ok(())
    }
}

/// Isotropic plane-strain stiffness in Voigt notation (m = 3, engineering
/// shear strain).
pub fn isotropic_stiffness_2d(e: f64, nu: f64) -> DMatrix<f64> {
    let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    DMatrix::from_row_slice(3, 3, &[
        c * (1.0 - nu),
        c * nu,
        0.0,
        c * nu,
        c * (1.0 - nu),
        0.0,
        0.0,
        0.0,
        c * (1.0 - 2.0 * nu) / 2.0,
    ])
}

/// Isotropic 3D stiffness in Voigt notation (m = 6).
pub fn isotropic_stiffness_3d(e: f64, nu: f64) -> DMatrix<f64> {
    let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mut m = DMatrix::zeros(6, 6);
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = if i == j { c * (1.0 - nu) } else { c * nu };
        }
        m[(i + 3, i + 3)] = c * (1.0 - 2.0 * nu) / 2.0;
    }
    m
}

/// Pixelated unit cell with a centered fiber disk.
#[derive(Debug, Clone)]
pub struct RveGrid {
    pub resolution: usize,
    /// Row-major per-pixel flag, true = fiber.
    pub mask: Vec<bool>,
    pub v_f_target: f64,
    pub v_f_realized: f64,
}

impl RveGrid {
    /// Builds the disk mask by taking exactly round(v_f * n^2) pixels
    /// closest to the cell center (ties broken by index), which keeps the
    /// realized fraction within half a pixel of the target.
    pub fn disk(resolution: usize, v_f: f64) -> Result<Self, MicromechError> {
        if resolution < 8 {
            return Err(MicromechError::BadGrid("resolution must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&v_f) {
            return Err(MicromechError::BadGrid("volume fraction out of [0, 1]".into()));
        }
        let n = resolution;
        let target = (v_f * (n * n) as f64).round() as usize;
        let mut order: Vec<(f64, usize)> = (0..n * n)
            .map(|p| {
                let (i, j) = (p % n, p / n);
                let x = (i as f64 + 0.5) / n as f64 - 0.5;
                let y = (j as f64 + 0.5) / n as f64 - 0.5;
                (x * x + y * y, p)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut mask = vec![false; n * n];
        for &(_, p) in order.iter().take(target) {
            mask[p] = true;
        }
        Ok(RveGrid {
            resolution: n,
            mask,
            v_f_target: v_f,
            v_f_realized: target as f64 / (n * n) as f64,
        })
    }
}

/// Voigt and Reuss bounds plus the spectral factor of their gap.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VoigtBounds {
    pub c_v: DMatrix<f64>,
    pub c_r: DMatrix<f64>,
    /// L = Q sqrt(Lambda_floored) from the eigendecomposition of C_V - C_R.
    pub l_fac: DMatrix<f64>,
    pub l_pinv: DMatrix<f64>,
    pub eps_floor: f64,
}

/// Bounds from explicit phase stiffness matrices (any Voigt size m).
pub fn voigt_reuss_bounds_from(
    c_fiber: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    v_f: f64,
) -> Result<VoigtBounds, MicromechError> {
    let c_v = c_fiber * v_f + c_matrix * (1.0 - v_f);
    let inv_f = c_fiber.clone().try_inverse().ok_or(MicromechError::SingularPhase)?;
    let inv_m = c_matrix.clone().try_inverse().ok_or(MicromechError::SingularPhase)?;
    let c_r = (inv_f * v_f + inv_m * (1.0 - v_f))
        .try_inverse()
        .ok_or(MicromechError::SingularPhase)?;

    let gap = symmetrize(&(&c_v - &c_r));
    let eig = gap.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let eps_floor = 1e-8 * lam_max.max(f64::MIN_POSITIVE);
    let m = c_v.nrows();
    let mut sqrt_lam = DMatrix::zeros(m, m);
    let mut inv_sqrt_lam = DMatrix::zeros(m, m);
    for i in 0..m {
        let l = eig.eigenvalues[i].max(eps_floor);
        sqrt_lam[(i, i)] = l.sqrt();
        inv_sqrt_lam[(i, i)] = 1.0 / l.sqrt();
    }
    let q = eig.eigenvectors;
    let l_fac = &q * sqrt_lam;
    let l_pinv = inv_sqrt_lam * q.transpose();
    Ok(VoigtBounds { c_v, c_r, l_fac, l_pinv, eps_floor })
}

/// Plane-strain bounds from phase moduli.
pub fn voigt_reuss_bounds(
    phases: &PhaseProperties,
    v_f: f64,
) -> Result<VoigtBounds, MicromechError> {
    phases.validate()?;
    let c_f = isotropic_stiffness_2d(phases.e_f, phases.nu_f);
    let c_m = isotropic_stiffness_2d(phases.e_m, phases.nu_m);
    voigt_reuss_bounds_from(&c_f, &c_m, v_f)
}

/// Strain-displacement matrices of the bilinear quad at the four 2x2 Gauss
/// points, for a square pixel of side h. Also returns the Gauss weight
/// including the Jacobian determinant.
fn quad_b_matrices(h: f64) -> ([DMatrix<f64>; 4], f64) {
    let g = 1.0 / 3f64.sqrt();
    let pts = [(-g, -g), (g, -g), (g, g), (-g, g)];
    // Corner order: (-1,-1), (1,-1), (1,1), (-1,1).
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut bs: Vec<DMatrix<f64>> = Vec::with_capacity(4);
    for &(xi, eta) in &pts {
        let mut b = DMatrix::zeros(3, 8);
        for (a, &(cx, cy)) in corners.iter().enumerate() {
            let dn_dxi = 0.25 * cx * (1.0 + cy * eta);
            let dn_deta = 0.25 * cy * (1.0 + cx * xi);
            // dx/dxi = h/2 on a square pixel.
            let dn_dx = dn_dxi * 2.0 / h;
            let dn_dy = dn_deta * 2.0 / h;
            b[(0, 2 * a)] = dn_dx;
            b[(1, 2 * a + 1)] = dn_dy;
            b[(2, 2 * a)] = dn_dy;
            b[(2, 2 * a + 1)] = dn_dx;
        }
        bs.push(b);
    }
    let weight = (h / 2.0) * (h / 2.0);
    (
        [bs.remove(0), bs.remove(0), bs.remove(0), bs.remove(0)],
        weight,
    )
}

/// Homogenized stiffness plus per-load-case energy-identity residuals.
#[derive(Debug, Clone)]
pub struct RveSolution {
    pub c_hom: DMatrix<f64>,
    /// Relative Hill-Mandel residual |<s:e> - sbar:ebar| / |sbar:ebar| per
    /// macroscopic strain case.
    pub hill_mandel: Vec<f64>,
}

/// Periodic fluctuation solve for all m = 3 unit macroscopic strains.
pub fn solve_rve(grid: &RveGrid, phases: &PhaseProperties) -> Result<RveSolution, MicromechError> {
    phases.validate()?;
    let n = grid.resolution;
    let h = 1.0 / n as f64;
    let c_f = isotropic_stiffness_2d(phases.e_f, phases.nu_f);
    let c_m = isotropic_stiffness_2d(phases.e_m, phases.nu_m);
    let (bs, wgt) = quad_b_matrices(h);

    // Per-phase element stiffness (identical geometry for every pixel).
    let ke = |c: &DMatrix<f64>| -> DMatrix<f64> {
        let mut k = DMatrix::zeros(8, 8);
        for b in &bs {
            k += b.transpose() * c * b * wgt;
        }
        k
    };
    let ke_f = ke(&c_f);
    let ke_m = ke(&c_m);
    // Load coupling: integral of B^T C over the element (3 columns used
    // against the macroscopic strain).
    let fe = |c: &DMatrix<f64>| -> DMatrix<f64> {
        let mut f = DMatrix::zeros(8, 3);
        for b in &bs {
            f += b.transpose() * c * wgt;
        }
        f
    };
    let fe_f = fe(&c_f);
    let fe_m = fe(&c_m);

    // Wrap-around connectivity: element (i, j) touches nodes with indices
    // mod n, which enforces periodicity directly.
    let node = |i: usize, j: usize| -> usize { (j % n) * n + (i % n) };
    let elem_nodes = |p: usize| -> [usize; 4] {
        let (i, j) = (p % n, p / n);
        [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]
    };

    let ndof = 2 * n * n;
    let pinned = [0usize, 1usize];
    let mut trips: Vec<(u32, u32, f64)> = Vec::with_capacity(n * n * 64 + 2);
    for p in 0..n * n {
        let k = if grid.mask[p] { &ke_f } else { &ke_m };
        let nodes = elem_nodes(p);
        for (la, &na) in nodes.iter().enumerate() {
            for (lb, &nb) in nodes.iter().enumerate() {
                for da in 0..2 {
                    for db in 0..2 {
                        let (r, c) = (2 * na + da, 2 * nb + db);
                        if pinned.contains(&r) || pinned.contains(&c) {
                            continue;
                        }
                        trips.push((r as u32, c as u32, k[(2 * la + da, 2 * lb + db)]));
                    }
                }
            }
        }
    }
    for &p in &pinned {
        trips.push((p as u32, p as u32, 1.0));
    }
    let a = csr_from_triplets(ndof, trips);

    let mut c_hom = DMatrix::zeros(3, 3);
    let mut hill = Vec::with_capacity(3);
    for case in 0..3 {
        let mut rhs = vec![0.0; ndof];
        for p in 0..n * n {
            let f = if grid.mask[p] { &fe_f } else { &fe_m };
            for (la, &na) in elem_nodes(p).iter().enumerate() {
                for da in 0..2 {
                    let r = 2 * na + da;
                    if pinned.contains(&r) {
                        continue;
                    }
                    rhs[r] -= f[(2 * la + da, case)];
                }
            }
        }
        let u = pcg(&a, &rhs, 1e-12, 20 * ndof).map_err(MicromechError::SolverStalled)?;

        // Average stress and the energy identity.
        let mut sbar = DVector::zeros(3);
        let mut energy = 0.0;
        let mut e_macro = DVector::zeros(3);
        e_macro[case] = 1.0;
        let mut ue = DVector::zeros(8);
        for p in 0..n * n {
            let c = if grid.mask[p] { &c_f } else { &c_m };
            let nodes = elem_nodes(p);
            for (la, &na) in nodes.iter().enumerate() {
                ue[2 * la] = u[2 * na];
                ue[2 * la + 1] = u[2 * na + 1];
            }
            for b in &bs {
                let eps = b * &ue + &e_macro;
                let sig = c * &eps;
                sbar += &sig * wgt;
                energy += sig.dot(&eps) * wgt;
            }
        }
        // Unit cell volume is 1, so the averages are the integrals.
        for r in 0..3 {
            c_hom[(r, case)] = sbar[r];
        }
        let sbar_ebar = sbar[case];
        hill.push((energy - sbar_ebar).abs() / sbar_ebar.abs().max(f64::MIN_POSITIVE));
    }

    Ok(RveSolution { c_hom: symmetrize(&c_hom), hill_mandel: hill })
}

/// One training record.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub v_f: f64,
    pub e_f: f64,
    pub e_m: f64,
    pub c_hom: DMatrix<f64>,
    pub bounds: VoigtBounds,
    pub hill_mandel: Vec<f64>,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SampleRanges {
    pub v_f: (f64, f64),
    pub e_f: (f64, f64),
    pub e_m: (f64, f64),
}

impl Default for SampleRanges {
    fn default() -> Self {
        SampleRanges { v_f: (0.4, 0.7), e_f: (50.0, 80.0), e_m: (2.0, 5.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Record count reserved for training; the tail is validation.
    pub n_train: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Uniform i.i.d. sampling of (v_f, E_f, E_m), ground-truth homogenization
/// per record, and an 80-20 split. Records with failed solves are skipped
/// and logged.
pub fn generate_dataset(
    n: usize,
    ranges: &SampleRanges,
    resolution: usize,
    seed: u64,
) -> Result<Dataset, MicromechError> {
    if n == 0 {
        return Err(MicromechError::BadGrid("need at least one record".into()));
    }
    let node = SeedNode::new(seed).child("rve-data");
    let uniform = |rng: &mut rand_chacha::ChaCha12Rng, (a, b): (f64, f64)| {
        if a == b {
            a
        } else {
            rng.gen_range(a..b)
        }
    };
    let results = exec::map_range(n, |i| {
        let mut rng = node.index(i as u64).rng();
        let v_f = uniform(&mut rng, ranges.v_f);
        let e_f = uniform(&mut rng, ranges.e_f);
        let e_m = uniform(&mut rng, ranges.e_m);
        let phases = PhaseProperties::with_moduli(e_f, e_m);
        let grid = RveGrid::disk(resolution, v_f)?;
        let sol = solve_rve(&grid, &phases)?;
        let bounds = voigt_reuss_bounds(&phases, grid.v_f_realized)?;
        Ok::<_, MicromechError>(DatasetRecord {
            v_f: grid.v_f_realized,
            e_f,
            e_m,
            c_hom: sol.c_hom,
            bounds,
            hill_mandel: sol.hill_mandel,
        })
    });
    let mut records = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => log::warn!("record {i} skipped: {e}"),
        }
    }
    if records.is_empty() {
        return Err(MicromechError::BadGrid("all records failed".into()));
    }
    let n_train = (records.len() * 8) / 10;
    Ok(Dataset { records, n_train, resolution, seed })
}

fn upper_tri(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows();
    let mut out = Vec::with_capacity(s * (s + 1) / 2);
    for i in 0..s {
        for j in i..s {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_upper_tri(v: &[f64], s: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(s, s);
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

impl Dataset {
    /// Text format: one header line `m resolution seed n_train`, then one
    /// record per line with v_f, E_f, E_m and the upper triangles of
    /// C_hom, C_V, C_R.
    pub fn save(&self, path: &std::path::Path) -> Result<(), MicromechError> {
        use std::io::Write;
        let mut out = String::new();
        let m = self.records[0].c_hom.nrows();
        out.push_str(&format!("{} {} {} {}\n", m, self.resolution, self.seed, self.n_train));
        for r in &self.records {
            let mut fields = vec![r.v_f, r.e_f, r.e_m];
            fields.extend(upper_tri(&r.c_hom));
            fields.extend(upper_tri(&r.bounds.c_v));
            fields.extend(upper_tri(&r.bounds.c_r));
            fields.extend(r.hill_mandel.iter().copied());
            let line: Vec<String> = fields.iter().map(|x| format!("{x:.17e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset, MicromechError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(MicromechError::Parse { line: 1, msg: "empty file".into() })?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| MicromechError::Parse { line: 1, msg: format!("bad header token {t}") }))
            .collect::<Result<_, _>>()?;
        if head.len() != 4 {
            return Err(MicromechError::Parse { line: 1, msg: "header needs 4 fields".into() });
        }
        let (m, resolution, seed, n_train) = (head[0], head[1], head[2] as u64, head[3]);
        let tri = m * (m + 1) / 2;
        let mut records = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| MicromechError::Parse { line: ln + 1, msg: format!("bad number {t}") }))
                .collect::<Result<_, _>>()?;
            if vals.len() != 3 + 3 * tri + m {
                return Err(MicromechError::Parse {
                    line: ln + 1,
                    msg: format!("expected {} fields, found {}", 3 + 3 * tri + m, vals.len()),
                });
            }
            let c_hom = from_upper_tri(&vals[3..3 + tri], m);
            let c_v = from_upper_tri(&vals[3 + tri..3 + 2 * tri], m);
            let c_r = from_upper_tri(&vals[3 + 2 * tri..3 + 3 * tri], m);
            // Rebuild the factor from the stored bounds.
            let gap = symmetrize(&(&c_v - &c_r));
            let eig = gap.symmetric_eigen();
            let lam_max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
            let eps_floor = 1e-8 * lam_max.max(f64::MIN_POSITIVE);
            let mut sq = DMatrix::zeros(m, m);
            let mut isq = DMatrix::zeros(m, m);
            for i in 0..m {
                let l = eig.eigenvalues[i].max(eps_floor);
                sq[(i, i)] = l.sqrt();
                isq[(i, i)] = 1.0 / l.sqrt();
            }
            let q = eig.eigenvectors.clone();
            records.push(DatasetRecord {
                v_f: vals[0],
                e_f: vals[1],
                e_m: vals[2],
                c_hom,
                bounds: VoigtBounds {
                    c_v,
                    c_r,
                    l_fac: &q * sq,
                    l_pinv: isq * q.transpose(),
                    eps_floor,
                },
                hill_mandel: vals[3 + 3 * tri..].to_vec(),
            });
        }
        Ok(Dataset { records, n_train, resolution, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_rule_of_mixtures() {
        let c_f = DMatrix::from_element(1, 1, 2.0);
        let c_m = DMatrix::from_element(1, 1, 1.0);
        let b = voigt_reuss_bounds_from(&c_f, &c_m, 0.5).unwrap();
        assert_abs_diff_eq!(b.c_v[(0, 0)], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(b.c_r[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn equal_phases_collapse_bounds() {
        let phases = PhaseProperties { e_f: 3.0, e_m: 3.0, nu_f: 0.3, nu_m: 0.3 };
        let b = voigt_reuss_bounds(&phases, 0.5).unwrap();
        let c = isotropic_stiffness_2d(3.0, 0.3);
        assert!((&b.c_v - &c).norm() < 1e-12 * c.norm());
        assert!((&b.c_r - &c).norm() < 1e-10 * c.norm());
        // Gap is zero: every floored eigenvalue is at the floor.
        let gap = &b.c_v - &b.c_r;
        assert!(gap.norm() < 1e-10 * c.norm());
    }

    #[test]
    fn volume_fraction_limits() {
        let phases = PhaseProperties::with_moduli(70.0, 3.0);
        let b0 = voigt_reuss_bounds(&phases, 0.0).unwrap();
        let c_m = isotropic_stiffness_2d(3.0, 0.35);
        assert!((&b0.c_v - &c_m).norm() < 1e-12 * c_m.norm());
        assert!((&b0.c_r - &c_m).norm() < 1e-10 * c_m.norm());
    }

    #[test]
    fn factor_inverts_on_the_gap_range() {
        let phases = PhaseProperties::with_moduli(70.0, 3.0);
        let b = voigt_reuss_bounds(&phases, 0.55).unwrap();
        let ident = &b.l_fac * &b.l_pinv;
        let gap = &b.c_v - &b.c_r;
        // L L^+ acts as the identity on the range of the gap.
        assert!((&ident * &gap - &gap).norm() < 1e-8 * gap.norm());
        // And L L^T reproduces the floored gap.
        assert!((&b.l_fac * b.l_fac.transpose() - &gap).norm() < 1e-6 * gap.norm());
    }

    #[test]
    fn disk_mask_hits_target_fraction() {
        for &v_f in &[0.4, 0.55, 0.7] {
            let g = RveGrid::disk(32, v_f).unwrap();
            assert!((g.v_f_realized - v_f).abs() <= 1.0 / (32.0 * 32.0));
            // Center pixel is fiber at these fractions.
            assert!(g.mask[16 * 32 + 16]);
        }
    }

    #[test]
    fn homogeneous_medium_is_exact() {
        let phases = PhaseProperties { e_f: 4.0, e_m: 4.0, nu_f: 0.3, nu_m: 0.3 };
        let grid = RveGrid::disk(16, 0.5).unwrap();
        let sol = solve_rve(&grid, &phases).unwrap();
        let c = isotropic_stiffness_2d(4.0, 0.3);
        assert!(
            (&sol.c_hom - &c).norm() <= 1e-8 * c.norm(),
            "c_hom {:?}",
            sol.c_hom
        );
        for &hm in &sol.hill_mandel {
            assert!(hm <= 1e-8);
        }
    }

    #[test]
    fn heterogeneous_solve_satisfies_bounds_and_energy_identity() {
        let phases = PhaseProperties { e_f: 10.0, e_m: 1.0, nu_f: 0.3, nu_m: 0.3 };
        let grid = RveGrid::disk(64, 0.5).unwrap();
        let sol = solve_rve(&grid, &phases).unwrap();
        let b = voigt_reuss_bounds(&phases, grid.v_f_realized).unwrap();
        let slack = 1e-8 * b.c_v.norm();
        assert!(min_eigenvalue(&(&b.c_v - &sol.c_hom)) >= -slack);
        assert!(min_eigenvalue(&(&sol.c_hom - &b.c_r)) >= -slack);
        for &hm in &sol.hill_mandel {
            assert!(hm <= 1e-8, "Hill-Mandel residual {hm}");
        }
        // Major symmetry.
        let asym = (&sol.c_hom - sol.c_hom.transpose()).norm() / sol.c_hom.norm();
        assert!(asym <= 1e-10);
    }

    #[test]
    fn mesh_refinement_converges_monotonically() {
        let phases = PhaseProperties { e_f: 10.0, e_m: 1.0, nu_f: 0.3, nu_m: 0.3 };
        let sols: Vec<DMatrix<f64>> = [16usize, 32, 64, 128]
            .iter()
            .map(|&r| solve_rve(&RveGrid::disk(r, 0.5).unwrap(), &phases).unwrap().c_hom)
            .collect();
        let d1 = (&sols[1] - &sols[0]).norm();
        let d2 = (&sols[2] - &sols[1]).norm();
        let d3 = (&sols[3] - &sols[2]).norm();
        assert!(d2 < d1 && d3 < d2, "refinement deltas {d1} {d2} {d3}");
    }

    #[test]
    fn dataset_roundtrip_and_split() {
        let ranges = SampleRanges::default();
        let ds = generate_dataset(10, &ranges, 16, 99).unwrap();
        assert_eq!(ds.records.len(), 10);
        assert_eq!(ds.n_train, 8);
        for r in &ds.records {
            assert!(ranges.v_f.0 - 0.01 <= r.v_f && r.v_f <= ranges.v_f.1 + 0.01);
            let slack = 1e-8 * r.bounds.c_v.norm();
            assert!(min_eigenvalue(&(&r.bounds.c_v - &r.c_hom)) >= -slack);
            assert!(min_eigenvalue(&(&r.c_hom - &r.bounds.c_r)) >= -slack);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.records.len(), 10);
        assert_eq!(back.n_train, 8);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert!((&a.c_hom - &b.c_hom).norm() < 1e-12 * a.c_hom.norm());
            assert!((&a.bounds.c_v - &b.bounds.c_v).norm() < 1e-12 * a.bounds.c_v.norm());
            assert_abs_diff_eq!(a.v_f, b.v_f, epsilon = 1e-15);
        }
    }

    #[test]
    fn degenerate_range_gives_fixed_record() {
        let ranges = SampleRanges { v_f: (0.5, 0.5), e_f: (60.0, 60.0), e_m: (3.0, 3.0) };
        let ds = generate_dataset(1, &ranges, 16, 1).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_abs_diff_eq!(ds.records[0].e_f, 60.0);
        assert_abs_diff_eq!(ds.records[0].e_m, 3.0);
    }
}
