//! Plate-with-hole finite-element forward model.
//!
//! Structured triangulation of a rectangular plate with a central circular
//! hole, constant-strain triangles, configurable edge constraints, a
//! consistent edge traction, strain observation at sensor points, the
//! maximum von Mises stress as quantity of interest, and the Gaussian
//! observation log-likelihood. `PlateContext` ties the plate to the random
//! fields and the stiffness surrogate and exposes the reliability-model
//! interface used by the transport builder and the estimators.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimators::{ModelResponse, ReliabilityModel};
use crate::micromech::{solve_rve, PhaseProperties, RveGrid};
use crate::randfield::{realize, KLBasis};
use crate::sparse::{csr_from_triplets, pcg};
use crate::surrogate::SurrogateModel;

#[derive(Debug, Error)]
pub enum MacroError {
    #[error("mesh configuration: {0}")]
    BadMesh(String),
    #[error("load configuration: {0}")]
    BadLoad(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("linear solver stalled at relative residual {0:.3e}")]
    SolverStalled(f64),
    #[error("sensor ({0}, {1}) lies outside every element")]
    SensorOutside(f64, f64),
    #[error("noise standard deviation must be positive")]
    BadNoise,
    #[error("field/model evaluation: {0}")]
    Field(String),
}

// ---------------------------------------------------------------------------
// Mesh.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counterclockwise node triples.
    pub elements: Vec<[usize; 3]>,
    /// Named boundary node sets ("left", "right", and "hole" when present).
    pub sets: BTreeMap<String, Vec<usize>>,
    pub width: f64,
    pub height: f64,
    pub hole_radius: f64,
}

impl Mesh {
    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        (0..self.elements.len()).map(|e| self.centroid(e)).collect()
    }

    pub fn set(&self, name: &str) -> Result<&[usize], MacroError> {
        self.sets
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| MacroError::BadLoad(format!("unknown node set '{name}'")))
    }

    /// Text format: "nodes N" then N "x y" lines, "elements M" then M lines
    /// of 1-based node triples, then "set NAME k i1..ik" lines (1-based).
    pub fn save(&self, path: &std::path::Path) -> Result<(), std::io::Error> {
        let mut out = String::new();
        out.push_str(&format!("nodes {}\n", self.nodes.len()));
        for nd in &self.nodes {
            out.push_str(&format!("{:.17e} {:.17e}\n", nd[0], nd[1]));
        }
        out.push_str(&format!("elements {}\n", self.elements.len()));
        for el in &self.elements {
            out.push_str(&format!("{} {} {}\n", el[0] + 1, el[1] + 1, el[2] + 1));
        }
        for (name, ids) in &self.sets {
            out.push_str(&format!("set {name} {}", ids.len()));
            for i in ids {
                out.push_str(&format!(" {}", i + 1));
            }
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Structured triangulation of the plate; elements whose centroid falls in
/// the hole are removed and the surviving nodes inside the hole are
/// projected radially onto the circle. Deterministic for fixed arguments.
pub fn generate_plate_mesh(
    width: f64,
    height: f64,
    hole_radius: f64,
    refinement: usize,
) -> Result<Mesh, MacroError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(MacroError::BadMesh("plate dimensions must be positive".into()));
    }
    if hole_radius >= 0.5 * width.min(height) {
        return Err(MacroError::BadMesh("hole radius must be below half the plate size".into()));
    }
    if refinement < 2 {
        return Err(MacroError::BadMesh("refinement must be at least 2".into()));
    }
    let nx = refinement;
    let ny = ((refinement as f64 * height / width).round() as usize).max(2);
    let (dx, dy) = (width / nx as f64, height / ny as f64);
    if hole_radius > 0.0 && hole_radius < 2.0 * dx.max(dy) {
        return Err(MacroError::BadMesh(
            "refinement too coarse to resolve the hole (need radius >= two cells)".into(),
        ));
    }

    let gid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes: Vec<[f64; 2]> = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([i as f64 * dx, j as f64 * dy]);
        }
    }
    let mut elements: Vec<[usize; 3]> = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (gid(i, j), gid(i + 1, j), gid(i + 1, j + 1), gid(i, j + 1));
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }

    let center = [0.5 * width, 0.5 * height];
    if hole_radius > 0.0 {
        elements.retain(|el| {
            let cx = (nodes[el[0]][0] + nodes[el[1]][0] + nodes[el[2]][0]) / 3.0;
            let cy = (nodes[el[0]][1] + nodes[el[1]][1] + nodes[el[2]][1]) / 3.0;
            let r2 = (cx - center[0]).powi(2) + (cy - center[1]).powi(2);
            r2 >= hole_radius * hole_radius
        });
        let mut referenced = vec![false; nodes.len()];
        for el in &elements {
            for &n in el {
                referenced[n] = true;
            }
        }
        for (n, nd) in nodes.iter_mut().enumerate() {
            if !referenced[n] {
                continue;
            }
            let (ux, uy) = (nd[0] - center[0], nd[1] - center[1]);
            let r = (ux * ux + uy * uy).sqrt();
            if r < hole_radius {
                nd[0] = center[0] + ux / r * hole_radius;
                nd[1] = center[1] + uy / r * hole_radius;
            }
        }
        // Drop unreferenced nodes and remap.
        let mut remap = vec![usize::MAX; nodes.len()];
        let mut kept: Vec<[f64; 2]> = Vec::new();
        for (n, nd) in nodes.iter().enumerate() {
            if referenced[n] {
                remap[n] = kept.len();
                kept.push(*nd);
            }
        }
        for el in elements.iter_mut() {
            for n in el.iter_mut() {
                *n = remap[*n];
            }
        }
        nodes = kept;
    }

    let mut mesh = Mesh {
        nodes,
        elements,
        sets: BTreeMap::new(),
        width,
        height,
        hole_radius,
    };
    for e in 0..mesh.elements.len() {
        if mesh.element_area(e) <= 0.0 {
            return Err(MacroError::BadMesh(format!(
                "rim projection inverted element {e}; refine the mesh"
            )));
        }
    }

    let tol = 1e-9 * width.max(height);
    let pick = |pred: &dyn Fn(&[f64; 2]) -> bool| -> Vec<usize> {
        mesh.nodes.iter().enumerate().filter(|(_, nd)| pred(nd)).map(|(i, _)| i).collect()
    };
    mesh.sets.insert("left".into(), pick(&|nd| nd[0] < tol));
    mesh.sets.insert("right".into(), pick(&|nd| nd[0] > width - tol));
    if hole_radius > 0.0 {
        mesh.sets.insert(
            "hole".into(),
            pick(&|nd| {
                let r = ((nd[0] - center[0]).powi(2) + (nd[1] - center[1]).powi(2)).sqrt();
                (r - hole_radius).abs() < tol
            }),
        );
    }
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Forward solve.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Constraint {
    pub set: String,
    pub fix_x: bool,
    pub fix_y: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LoadCase {
    pub constraints: Vec<Constraint>,
    /// Node set carrying the uniform traction (x-direction).
    pub traction_set: String,
    /// Total applied force (N).
    pub total_force: f64,
    pub thickness: f64,
}

impl LoadCase {
    /// Left edge on rollers (x fixed) plus one y pin, uniform tension on
    /// the right edge: reproduces a clean far-field uniaxial state.
    pub fn uniaxial(total_force: f64, thickness: f64) -> Self {
        LoadCase {
            constraints: vec![
                Constraint { set: "left".into(), fix_x: true, fix_y: false },
                Constraint { set: "left-anchor".into(), fix_x: false, fix_y: true },
            ],
            traction_set: "right".into(),
            total_force,
            thickness,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    /// Interleaved nodal displacements (ux0, uy0, ux1, ...).
    pub displacements: Vec<f64>,
    /// Per-element Voigt strains (eps_xx, eps_yy, gamma_xy).
    pub strains: Vec<[f64; 3]>,
    /// Per-element Voigt stresses.
    pub stresses: Vec<[f64; 3]>,
    pub max_von_mises: f64,
    /// |sum of x reactions + applied force| / |applied force|.
    pub reaction_imbalance: f64,
}

pub fn von_mises(s: &[f64; 3]) -> f64 {
    (s[0] * s[0] - s[0] * s[1] + s[1] * s[1] + 3.0 * s[2] * s[2]).max(0.0).sqrt()
}

/// Constant strain-displacement matrix of a linear triangle.
fn b_matrix(mesh: &Mesh, e: usize) -> (DMatrix<f64>, f64) {
    let [i, j, k] = mesh.elements[e];
    let (p, q, r) = (mesh.nodes[i], mesh.nodes[j], mesh.nodes[k]);
    let area = mesh.element_area(e);
    let f = 1.0 / (2.0 * area);
    let b = [q[1] - r[1], r[1] - p[1], p[1] - q[1]];
    let c = [r[0] - q[0], p[0] - r[0], q[0] - p[0]];
    let mut m = DMatrix::zeros(3, 6);
    for a in 0..3 {
        m[(0, 2 * a)] = f * b[a];
        m[(1, 2 * a + 1)] = f * c[a];
        m[(2, 2 * a)] = f * c[a];
        m[(2, 2 * a + 1)] = f * b[a];
    }
    (m, area)
}

/// General linear solve with Dirichlet values and nodal forces. Small
/// systems go through a dense Cholesky factorization; larger ones use a
/// Jacobi-preconditioned conjugate gradient (both deterministic).
pub fn solve_linear<F>(
    mesh: &Mesh,
    stiffness: F,
    thickness: f64,
    dirichlet: &[(usize, f64)],
    forces: &[f64],
) -> Result<ForwardSolution, MacroError>
where
    F: Fn(usize) -> DMatrix<f64>,
{
    let ndof = 2 * mesh.nodes.len();
    if forces.len() != ndof {
        return Err(MacroError::BadLoad("force vector length mismatch".into()));
    }
    if dirichlet.is_empty() {
        return Err(MacroError::Singular("no constraints supplied".into()));
    }

    let mut bs = Vec::with_capacity(mesh.elements.len());
    let mut trips: Vec<(u32, u32, f64)> = Vec::with_capacity(mesh.elements.len() * 36);
    for e in 0..mesh.elements.len() {
        let (b, area) = b_matrix(mesh, e);
        let c = stiffness(e);
        let ke = b.transpose() * &c * &b * (area * thickness);
        let [ni, nj, nk] = mesh.elements[e];
        let dofs = [2 * ni, 2 * ni + 1, 2 * nj, 2 * nj + 1, 2 * nk, 2 * nk + 1];
        for (la, &da) in dofs.iter().enumerate() {
            for (lb, &db) in dofs.iter().enumerate() {
                trips.push((da as u32, db as u32, ke[(la, lb)]));
            }
        }
        bs.push(b);
    }
    let k_full = csr_from_triplets(ndof, trips.clone());

    // Constrained system: lifted right-hand side, unit diagonal rows.
    let mut fixed = vec![false; ndof];
    let mut lift = vec![0.0; ndof];
    for &(d, v) in dirichlet {
        fixed[d] = true;
        lift[d] = v;
    }
    let mut rhs = forces.to_vec();
    let mut klift = vec![0.0; ndof];
    k_full.matvec(&lift, &mut klift);
    for d in 0..ndof {
        rhs[d] -= klift[d];
    }
    let mut trips_c: Vec<(u32, u32, f64)> = trips
        .into_iter()
        .filter(|&(r, c, _)| !fixed[r as usize] && !fixed[c as usize])
        .collect();
    for d in 0..ndof {
        if fixed[d] {
            trips_c.push((d as u32, d as u32, 1.0));
            rhs[d] = 0.0;
        }
    }
    let k_con = csr_from_triplets(ndof, trips_c);

    let mut u = if ndof <= 2400 {
        let mut kd = DMatrix::zeros(ndof, ndof);
        for row in 0..ndof {
            for k in k_con.indptr[row]..k_con.indptr[row + 1] {
                kd[(row, k_con.indices[k] as usize)] = k_con.values[k];
            }
        }
        let chol = kd
            .cholesky()
            .ok_or_else(|| MacroError::Singular("stiffness not positive definite".into()))?;
        chol.solve(&DVector::from_column_slice(&rhs)).as_slice().to_vec()
    } else {
        pcg(&k_con, &rhs, 1e-12, 40 * ndof).map_err(MacroError::SolverStalled)?
    };
    for d in 0..ndof {
        u[d] += lift[d];
    }

    // Element fields.
    let mut strains = Vec::with_capacity(mesh.elements.len());
    let mut stresses = Vec::with_capacity(mesh.elements.len());
    let mut max_vm = 0.0f64;
    for e in 0..mesh.elements.len() {
        let [ni, nj, nk] = mesh.elements[e];
        let ue = DVector::from_column_slice(&[
            u[2 * ni],
            u[2 * ni + 1],
            u[2 * nj],
            u[2 * nj + 1],
            u[2 * nk],
            u[2 * nk + 1],
        ]);
        let eps = &bs[e] * ue;
        let sig = stiffness(e) * &eps;
        strains.push([eps[0], eps[1], eps[2]]);
        stresses.push([sig[0], sig[1], sig[2]]);
        max_vm = max_vm.max(von_mises(&[sig[0], sig[1], sig[2]]));
    }

    // Equilibrium: the net of applied x-forces and x-reactions (K u at the
    // constrained rows) must vanish relative to the applied magnitude.
    let mut ku = vec![0.0; ndof];
    k_full.matvec(&u, &mut ku);
    let mut applied = 0.0f64;
    let mut sum_x = 0.0;
    for d in (0..ndof).step_by(2) {
        applied += forces[d].abs();
        sum_x += if fixed[d] { ku[d] } else { forces[d] };
    }
    let imbalance = if applied > 0.0 { sum_x.abs() / applied } else { sum_x.abs() };

    Ok(ForwardSolution {
        displacements: u,
        strains,
        stresses,
        max_von_mises: max_vm,
        reaction_imbalance: imbalance,
    })
}

/// Assembles the consistent traction and zero constraints from a load case
/// and solves. A constraint set named "left-anchor" resolves to the single
/// lowest left-edge node (y pin for symmetric uniaxial setups).
pub fn assemble_solve<F>(
    mesh: &Mesh,
    stiffness: F,
    load: &LoadCase,
) -> Result<ForwardSolution, MacroError>
where
    F: Fn(usize) -> DMatrix<f64>,
{
    if !load.total_force.is_finite() {
        return Err(MacroError::BadLoad("force must be finite".into()));
    }
    if !(load.thickness > 0.0) {
        return Err(MacroError::BadLoad("thickness must be positive".into()));
    }
    let ndof = 2 * mesh.nodes.len();

    let anchor = || -> Result<Vec<usize>, MacroError> {
        let left = mesh.set("left")?;
        left.iter()
            .copied()
            .min_by(|&a, &b| mesh.nodes[a][1].total_cmp(&mesh.nodes[b][1]))
            .map(|n| vec![n])
            .ok_or_else(|| MacroError::BadLoad("left edge is empty".into()))
    };

    let mut dirichlet: Vec<(usize, f64)> = Vec::new();
    for c in &load.constraints {
        let ids: Vec<usize> = if c.set == "left-anchor" {
            anchor()?
        } else {
            mesh.set(&c.set)?.to_vec()
        };
        for n in ids {
            if c.fix_x {
                dirichlet.push((2 * n, 0.0));
            }
            if c.fix_y {
                dirichlet.push((2 * n + 1, 0.0));
            }
        }
    }
    dirichlet.sort_by_key(|&(d, _)| d);
    dirichlet.dedup_by_key(|&mut (d, _)| d);

    // Consistent traction: uniform t_x = F / (height * thickness) over the
    // edge, lumped per segment between vertically adjacent set nodes.
    let mut edge: Vec<usize> = mesh.set(&load.traction_set)?.to_vec();
    if edge.len() < 2 {
        return Err(MacroError::BadLoad("traction set needs at least two nodes".into()));
    }
    edge.sort_by(|&a, &b| mesh.nodes[a][1].total_cmp(&mesh.nodes[b][1]));
    let traction = load.total_force / (mesh.height * load.thickness);
    let mut forces = vec![0.0; ndof];
    for w in edge.windows(2) {
        let len = (mesh.nodes[w[1]][1] - mesh.nodes[w[0]][1]).abs();
        let f = 0.5 * traction * load.thickness * len;
        forces[2 * w[0]] += f;
        forces[2 * w[1]] += f;
    }

    solve_linear(mesh, stiffness, load.thickness, &dirichlet, &forces)
}

// ---------------------------------------------------------------------------
// Observation and likelihood.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SensorSet {
    pub points: Vec<[f64; 2]>,
    /// Strain noise standard deviation.
    pub noise_std: f64,
}

impl SensorSet {
    /// Ring of `n_ring` sensors around the hole plus far-field points on
    /// the horizontal midline, ten sensors by default.
    pub fn default_layout(mesh: &Mesh) -> SensorSet {
        let c = [0.5 * mesh.width, 0.5 * mesh.height];
        let r = if mesh.hole_radius > 0.0 {
            1.8 * mesh.hole_radius
        } else {
            0.2 * mesh.height
        };
        let mut points = Vec::new();
        for k in 0..8 {
            let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 8.0;
            points.push([c[0] + r * phi.cos(), c[1] + r * phi.sin()]);
        }
        points.push([0.15 * mesh.width, 0.5 * mesh.height]);
        points.push([0.85 * mesh.width, 0.5 * mesh.height]);
        SensorSet { points, noise_std: 1e-5 }
    }
}

/// First element containing the point in element-index order (barycentric
/// coordinates nonnegative within tolerance) — a deterministic tie-break
/// for points on shared edges.
pub fn containing_element(mesh: &Mesh, p: [f64; 2]) -> Option<usize> {
    let tol = 1e-9 * mesh.width.max(mesh.height);
    for e in 0..mesh.elements.len() {
        let [i, j, k] = mesh.elements[e];
        let (a, b, c) = (mesh.nodes[i], mesh.nodes[j], mesh.nodes[k]);
        let area = mesh.element_area(e);
        let w0 = 0.5 * ((b[0] - p[0]) * (c[1] - p[1]) - (c[0] - p[0]) * (b[1] - p[1])) / area;
        let w1 = 0.5 * ((c[0] - p[0]) * (a[1] - p[1]) - (a[0] - p[0]) * (c[1] - p[1])) / area;
        let w2 = 1.0 - w0 - w1;
        if w0 >= -tol && w1 >= -tol && w2 >= -tol {
            return Some(e);
        }
    }
    None
}

/// Normal strains (eps_xx, eps_yy) at each sensor, concatenated in sensor
/// order.
pub fn observe(
    mesh: &Mesh,
    sol: &ForwardSolution,
    sensors: &SensorSet,
) -> Result<Vec<f64>, MacroError> {
    let mut y = Vec::with_capacity(2 * sensors.points.len());
    for &p in &sensors.points {
        let e = containing_element(mesh, p).ok_or(MacroError::SensorOutside(p[0], p[1]))?;
        y.push(sol.strains[e][0]);
        y.push(sol.strains[e][1]);
    }
    Ok(y)
}

/// Unnormalized Gaussian log-likelihood -||y_obs - y_model||^2 / (2 sigma^2).
pub fn log_likelihood(y_model: &[f64], y_obs: &[f64], sigma: f64) -> Result<f64, MacroError> {
    if !(sigma > 0.0) {
        return Err(MacroError::BadNoise);
    }
    assert_eq!(y_model.len(), y_obs.len(), "observation length mismatch");
    let ss: f64 = y_model.iter().zip(y_obs).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-ss / (2.0 * sigma * sigma))
}

// ---------------------------------------------------------------------------
// Reliability context.
// ---------------------------------------------------------------------------

/// Plate + random fields + stiffness model bundle. Parameters are the
/// stacked KL coefficients of the three fields (v_f, E_f, E_m), each field
/// evaluated at element centroids.
pub struct PlateContext {
    pub mesh: Mesh,
    pub load: LoadCase,
    pub sensors: SensorSet,
    pub kl_vf: KLBasis,
    pub kl_ef: KLBasis,
    pub kl_em: KLBasis,
    pub surrogate: SurrogateModel,
    /// Allowable max von Mises stress (MPa).
    pub sigma_allow: f64,
    /// Observed sensor strains; `None` for the prior-only problem.
    pub y_obs: Option<Vec<f64>>,
    /// Moduli scale between surrogate units (GPa) and stress units (MPa).
    pub stiffness_scale: f64,
    /// Volume-fraction clamp keeping realizations physically meaningful.
    pub vf_clip: (f64, f64),
}

impl PlateContext {
    pub fn realize_fields(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MacroError> {
        let (m1, m2, m3) =
            (self.kl_vf.truncation(), self.kl_ef.truncation(), self.kl_em.truncation());
        if theta.len() != m1 + m2 + m3 {
            return Err(MacroError::Field(format!(
                "expected {} parameters, got {}",
                m1 + m2 + m3,
                theta.len()
            )));
        }
        let vf = realize(&self.kl_vf, &theta[..m1]).map_err(|e| MacroError::Field(e.to_string()))?;
        let ef =
            realize(&self.kl_ef, &theta[m1..m1 + m2]).map_err(|e| MacroError::Field(e.to_string()))?;
        let em =
            realize(&self.kl_em, &theta[m1 + m2..]).map_err(|e| MacroError::Field(e.to_string()))?;
        let vf_vals: Vec<f64> =
            vf.values.iter().map(|&v| v.clamp(self.vf_clip.0, self.vf_clip.1)).collect();
        Ok((vf_vals, ef.values, em.values))
    }

    /// Forward solution with surrogate stiffness per element, or with
    /// direct RVE homogenization at the given pixel resolution.
    pub fn solve_fields(
        &self,
        vf: &[f64],
        ef: &[f64],
        em: &[f64],
        direct_resolution: Option<usize>,
    ) -> Result<ForwardSolution, MacroError> {
        let ne = self.mesh.elements.len();
        if vf.len() != ne || ef.len() != ne || em.len() != ne {
            return Err(MacroError::Field("field length does not match element count".into()));
        }
        let stiffnesses: Vec<DMatrix<f64>> = match direct_resolution {
            None => {
                let mut cs = Vec::with_capacity(ne);
                for e in 0..ne {
                    let c = self
                        .surrogate
                        .predict(&[vf[e], ef[e], em[e]])
                        .map_err(|err| MacroError::Field(err.to_string()))?;
                    cs.push(c * self.stiffness_scale);
                }
                cs
            }
            Some(res) => crate::exec::map_range(ne, |e| {
                let grid = RveGrid::disk(res, vf[e])?;
                let phases = PhaseProperties::with_moduli(ef[e], em[e]);
                Ok::<_, crate::micromech::MicromechError>(
                    solve_rve(&grid, &phases)?.c_hom * self.stiffness_scale,
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MacroError::Field(e.to_string()))?,
        };
        assemble_solve(&self.mesh, |e| stiffnesses[e].clone(), &self.load)
    }

    pub fn evaluate_theta(
        &self,
        theta: &[f64],
        direct_resolution: Option<usize>,
    ) -> Result<(ForwardSolution, Vec<f64>), MacroError> {
        let (vf, ef, em) = self.realize_fields(theta)?;
        let sol = self.solve_fields(&vf, &ef, &em, direct_resolution)?;
        let y = observe(&self.mesh, &sol, &self.sensors)?;
        Ok((sol, y))
    }
}

impl ReliabilityModel for PlateContext {
    fn dim(&self) -> usize {
        self.kl_vf.truncation() + self.kl_ef.truncation() + self.kl_em.truncation()
    }

    fn threshold(&self) -> f64 {
        self.sigma_allow
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ModelResponse, String> {
        let (sol, y) = self.evaluate_theta(theta, None).map_err(|e| e.to_string())?;
        let log_likelihood = match &self.y_obs {
            Some(obs) => {
                Some(log_likelihood(&y, obs, self.sensors.noise_std).map_err(|e| e.to_string())?)
            }
            None => None,
        };
        Ok(ModelResponse { log_likelihood, qoi: sol.max_von_mises })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Plane-stress isotropic stiffness used by the analytic checks.
    fn plane_stress(e: f64, nu: f64) -> DMatrix<f64> {
        let f = e / (1.0 - nu * nu);
        DMatrix::from_row_slice(3, 3, &[
            f,
            f * nu,
            0.0,
            f * nu,
            f,
            0.0,
            0.0,
            0.0,
            f * (1.0 - nu) / 2.0,
        ])
    }

    #[test]
    fn mesh_counts_and_rim_projection() {
        let full = generate_plate_mesh(2.0, 1.0, 0.0, 8).unwrap();
        assert_eq!(full.nodes.len(), 9 * 5);
        assert_eq!(full.elements.len(), 2 * 8 * 4);

        let fine = generate_plate_mesh(2.0, 1.0, 0.0, 16).unwrap();
        assert_eq!(fine.elements.len(), 4 * full.elements.len());

        let holed = generate_plate_mesh(2.0, 1.0, 0.2, 40).unwrap();
        let rim = holed.set("hole").unwrap();
        assert!(!rim.is_empty());
        for &n in rim {
            let r = ((holed.nodes[n][0] - 1.0).powi(2) + (holed.nodes[n][1] - 0.5).powi(2)).sqrt();
            assert!((r - 0.2).abs() < 1e-10);
        }
        for e in 0..holed.elements.len() {
            assert!(holed.element_area(e) > 0.0);
        }
    }

    #[test]
    fn too_coarse_hole_is_rejected() {
        assert!(matches!(
            generate_plate_mesh(2.0, 1.0, 0.05, 8),
            Err(MacroError::BadMesh(_))
        ));
    }

    #[test]
    fn uniform_uniaxial_stress_state() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.0, 12).unwrap();
        let (e, nu, force, t) = (200.0, 0.3, 30.0, 0.5);
        let c = plane_stress(e, nu);
        let load = LoadCase::uniaxial(force, t);
        let sol = assemble_solve(&mesh, |_| c.clone(), &load).unwrap();
        let sigma = force / (mesh.height * t);
        for s in &sol.stresses {
            assert_abs_diff_eq!(s[0], sigma, epsilon = 1e-8 * sigma);
            assert!(s[1].abs() < 1e-8 * sigma);
            assert!(s[2].abs() < 1e-8 * sigma);
        }
        assert_abs_diff_eq!(sol.max_von_mises, sigma, epsilon = 1e-8 * sigma);
        assert!(sol.reaction_imbalance < 1e-8);

        // Hooke's law at the sensors.
        let sensors = SensorSet { points: vec![[0.5, 0.5], [1.5, 0.25]], noise_std: 1e-5 };
        let y = observe(&mesh, &sol, &sensors).unwrap();
        for pair in y.chunks(2) {
            assert_abs_diff_eq!(pair[0], sigma / e, epsilon = 1e-8 * sigma / e);
            assert_abs_diff_eq!(pair[1], -nu * sigma / e, epsilon = 1e-8 * sigma / e);
        }
    }

    #[test]
    fn zero_load_is_zero_everywhere() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.0, 6).unwrap();
        let c = plane_stress(10.0, 0.25);
        let load = LoadCase::uniaxial(0.0, 1.0);
        let sol = assemble_solve(&mesh, |_| c.clone(), &load).unwrap();
        assert!(sol.displacements.iter().all(|&u| u == 0.0));
        assert_eq!(sol.max_von_mises, 0.0);
    }

    #[test]
    fn linearity_in_the_load() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.2, 24).unwrap();
        let c = plane_stress(70.0, 0.3);
        let s1 = assemble_solve(&mesh, |_| c.clone(), &LoadCase::uniaxial(10.0, 1.0)).unwrap();
        let s2 = assemble_solve(&mesh, |_| c.clone(), &LoadCase::uniaxial(20.0, 1.0)).unwrap();
        for (a, b) in s1.displacements.iter().zip(&s2.displacements) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-10 * a.abs().max(1e-12));
        }
        assert_abs_diff_eq!(
            2.0 * s1.max_von_mises,
            s2.max_von_mises,
            epsilon = 1e-9 * s2.max_von_mises
        );
    }

    #[test]
    fn stiffness_scaling_leaves_stress_unchanged() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.2, 24).unwrap();
        let c = plane_stress(70.0, 0.3);
        let load = LoadCase::uniaxial(10.0, 1.0);
        let s1 = assemble_solve(&mesh, |_| c.clone(), &load).unwrap();
        let s2 = assemble_solve(&mesh, |_| c.clone() * 3.5, &load).unwrap();
        for (a, b) in s1.stresses.iter().zip(&s2.stresses) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9 * s1.max_von_mises);
            }
        }
        for (a, b) in s1.displacements.iter().zip(&s2.displacements) {
            assert_abs_diff_eq!(*a, 3.5 * b, epsilon = 1e-9 * a.abs().max(1e-14));
        }
    }

    #[test]
    fn kirsch_stress_concentration() {
        // Small hole relative to the plate, fine mesh: the element-level
        // peak von Mises over the far-field stress should approach the
        // infinite-plate factor of 3.
        let mesh = generate_plate_mesh(400.0, 200.0, 10.0, 320).unwrap();
        let c = plane_stress(70.0, 0.3);
        let (force, t) = (1000.0, 1.0);
        let sol = assemble_solve(&mesh, |_| c.clone(), &LoadCase::uniaxial(force, t)).unwrap();
        let sigma_far = force / (mesh.height * t);
        let k = sol.max_von_mises / sigma_far;
        assert!((2.7..=3.3).contains(&k), "concentration factor {k}");
    }

    #[test]
    fn patch_test_reproduces_uniform_strain() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.0, 7).unwrap();
        let c = plane_stress(35.0, 0.28);
        let eps = [1e-3, -4e-4, 6e-4];
        let tol = 1e-9;
        let mut dirichlet = Vec::new();
        for (n, nd) in mesh.nodes.iter().enumerate() {
            let on_edge = nd[0] < tol
                || nd[0] > mesh.width - tol
                || nd[1] < tol
                || nd[1] > mesh.height - tol;
            if on_edge {
                dirichlet.push((2 * n, eps[0] * nd[0] + 0.5 * eps[2] * nd[1]));
                dirichlet.push((2 * n + 1, eps[1] * nd[1] + 0.5 * eps[2] * nd[0]));
            }
        }
        let forces = vec![0.0; 2 * mesh.nodes.len()];
        let sol = solve_linear(&mesh, |_| c.clone(), 1.0, &dirichlet, &forces).unwrap();
        for s in &sol.strains {
            for k in 0..3 {
                assert_abs_diff_eq!(s[k], eps[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn likelihood_values() {
        let y = vec![1.0, 2.0, 3.0];
        assert_abs_diff_eq!(log_likelihood(&y, &y, 1e-5).unwrap(), 0.0);
        let mut y2 = y.clone();
        y2[1] += 3e-5;
        assert_abs_diff_eq!(log_likelihood(&y2, &y, 1e-5).unwrap(), -4.5, epsilon = 1e-9);
        let mut y3 = y.clone();
        y3[0] += 1e-5;
        // The offset is stored as (1.0 + 1e-5) - 1.0, so representation
        // error of the inputs dominates, not the formula.
        assert_abs_diff_eq!(log_likelihood(&y3, &y, 1e-5).unwrap(), -0.5, epsilon = 1e-9);
        assert!(log_likelihood(&y, &y, 0.0).is_err());
    }

    #[test]
    fn sensor_on_shared_edge_is_deterministic() {
        let mesh = generate_plate_mesh(2.0, 1.0, 0.0, 8).unwrap();
        // A point on the diagonal shared by two triangles.
        let p = [0.125, 0.0625];
        let e1 = containing_element(&mesh, p).unwrap();
        let e2 = containing_element(&mesh, p).unwrap();
        assert_eq!(e1, e2);
    }
}
