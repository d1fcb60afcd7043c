//! Squared tensor-train density approximation with exact marginalization
//! and Rosenblatt (conditional-CDF) transport.
//!
//! The density lives on the unit cube in "v-space"; each coordinate carries
//! a [`Basis1D`] that maps v to the physical coordinate (affine for bounded
//! domains, the normal quantile for Gaussian ones). The square root of the
//! target is approximated by a tensor train on a piecewise-linear nodal
//! basis; squaring plus a small defensive constant gives a nonnegative,
//! exactly normalizable surrogate whose one-dimensional conditionals have
//! closed-form piecewise-cubic CDFs.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::normal;
use crate::tt::{
    cross_build_with_init, CrossConfig, CrossIndexSets, CrossReport, TensorTrain, TtError,
};

#[derive(Debug, Error)]
pub enum SirtError {
    #[error(transparent)]
    Tt(#[from] TtError),
    #[error("invalid density configuration: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// How a v-space coordinate in [0, 1] maps to the physical coordinate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DomainMap {
    /// Affine map onto [lower, upper].
    Bounded { lower: f64, upper: f64 },
    /// Normal quantile map onto the whole real line.
    Gaussian,
}

/// Node placement on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NodeLayout {
    Uniform,
    /// Clustered toward the interval ends (cosine-spaced nodes).
    ChebyshevLobatto,
}

/// Guard band keeping the Gaussian quantile map finite.
const V_CLAMP: f64 = 1e-9;

/// One-dimensional interpolation basis: piecewise-linear hats on ordered
/// nodes in [0, 1], plus the domain map.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis1D {
    nodes: Vec<f64>,
    map: DomainMap,
}

impl Basis1D {
    pub fn new(n_nodes: usize, layout: NodeLayout, map: DomainMap) -> Result<Self, SirtError> {
        if n_nodes < 2 {
            return Err(SirtError::BadConfig("need at least two nodes".into()));
        }
        if let DomainMap::Bounded { lower, upper } = map {
            if !(lower < upper) {
                return Err(SirtError::BadConfig("bounded domain needs lower < upper".into()));
            }
        }
        let m = (n_nodes - 1) as f64;
        let nodes = (0..n_nodes)
            .map(|i| match layout {
                NodeLayout::Uniform => i as f64 / m,
                NodeLayout::ChebyshevLobatto => {
                    0.5 * (1.0 - (std::f64::consts::PI * i as f64 / m).cos())
                }
            })
            .collect();
        Ok(Basis1D { nodes, map })
    }

    /// Rebuilds a basis from explicit node positions (artifact loading).
    pub fn from_nodes(nodes: Vec<f64>, map: DomainMap) -> Result<Self, SirtError> {
        if nodes.len() < 2 {
            return Err(SirtError::BadConfig("need at least two nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1]))
            || nodes[0] != 0.0
            || *nodes.last().unwrap() != 1.0
        {
            return Err(SirtError::BadConfig(
                "nodes must increase strictly from 0 to 1".into(),
            ));
        }
        if let DomainMap::Bounded { lower, upper } = map {
            if !(lower < upper) {
                return Err(SirtError::BadConfig("bounded domain needs lower < upper".into()));
            }
        }
        Ok(Basis1D { nodes, map })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn map(&self) -> DomainMap {
        self.map
    }

    pub fn theta_from_v(&self, v: f64) -> f64 {
        match self.map {
            DomainMap::Bounded { lower, upper } => lower + (upper - lower) * v,
            DomainMap::Gaussian => normal::inv_cdf(v.clamp(V_CLAMP, 1.0 - V_CLAMP)),
        }
    }

    pub fn v_from_theta(&self, theta: f64) -> f64 {
        match self.map {
            DomainMap::Bounded { lower, upper } => ((theta - lower) / (upper - lower)).clamp(0.0, 1.0),
            DomainMap::Gaussian => normal::cdf(theta).clamp(V_CLAMP, 1.0 - V_CLAMP),
        }
    }

    /// log(dv/dtheta) at the physical coordinate.
    pub fn log_jacobian(&self, theta: f64) -> f64 {
        match self.map {
            DomainMap::Bounded { lower, upper } => -(upper - lower).ln(),
            DomainMap::Gaussian => normal::log_pdf(theta),
        }
    }

    /// Element index and local coordinate for v in [0, 1].
    fn locate(&self, v: f64) -> (usize, f64) {
        let v = v.clamp(0.0, 1.0);
        let n = self.nodes.len();
        // partition_point: first node strictly greater than v.
        let mut i = self.nodes.partition_point(|&x| x <= v);
        if i == 0 {
            return (0, 0.0);
        }
        if i >= n {
            return (n - 2, 1.0);
        }
        i -= 1;
        let h = self.nodes[i + 1] - self.nodes[i];
        (i, ((v - self.nodes[i]) / h).clamp(0.0, 1.0))
    }

    /// Tridiagonal hat-function mass matrix entries: returns (diag, off)
    /// with off[i] = integral of h_i * h_{i+1}.
    fn mass(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes.len();
        let h: Vec<f64> = self.nodes.windows(2).map(|w| w[1] - w[0]).collect();
        let mut diag = vec![0.0; n];
        for i in 0..n {
            if i > 0 {
                diag[i] += h[i - 1] / 3.0;
            }
            if i < n - 1 {
                diag[i] += h[i] / 3.0;
            }
        }
        let off = h.iter().map(|&hi| hi / 6.0).collect();
        (diag, off)
    }
}

/// Unnormalized log-density on the unit cube.
pub trait VTarget: Sync {
    fn log_density_v(&self, v: &[f64]) -> f64;
}

impl<F> VTarget for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn log_density_v(&self, v: &[f64]) -> f64 {
        self(v)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SirtConfig {
    pub cross: CrossConfig,
    /// Defensive uniform mass relative to the squared-train mass.
    pub tau_rel: f64,
}

impl Default for SirtConfig {
    fn default() -> Self {
        SirtConfig { cross: CrossConfig::default(), tau_rel: 1e-8 }
    }
}

/// Normalized density (g(v)^2 + tau) / z with g a tensor train in the nodal
/// basis, plus the marginal accumulators needed for exact conditionals.
#[derive(Debug, Clone)]
pub struct SquaredFttDensity {
    bases: Vec<Basis1D>,
    tt: TensorTrain,
    /// pis[k] integrates dimensions k..d-1; pis[d] = [[1]].
    pis: Vec<DMatrix<f64>>,
    tau: f64,
    /// Mass of g^2 alone (pis[0] scalar).
    mass_g: f64,
}

pub struct SirtBuild {
    pub density: SquaredFttDensity,
    pub report: CrossReport,
    pub index_sets: CrossIndexSets,
}

impl SquaredFttDensity {
    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[Basis1D] {
        &self.bases
    }

    pub fn train(&self) -> &TensorTrain {
        &self.tt
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Total mass of the unnormalized numerator g^2 + tau.
    pub fn normalization(&self) -> f64 {
        self.mass_g + self.tau
    }

    /// Wraps an existing coefficient train (mode sizes must match the bases).
    pub fn from_train(
        tt: TensorTrain,
        bases: Vec<Basis1D>,
        tau_rel: f64,
    ) -> Result<Self, SirtError> {
        let modes = tt.mode_sizes();
        if modes.len() != bases.len()
            || modes.iter().zip(&bases).any(|(&m, b)| m != b.n_nodes())
        {
            return Err(SirtError::BadConfig(
                "train mode sizes do not match basis node counts".into(),
            ));
        }
        let pis = marginal_accumulators(&tt, &bases);
        let mass_g = pis[0][(0, 0)].max(0.0);
        let tau = (tau_rel * mass_g).max(1e-300);
        Ok(SquaredFttDensity { bases, tt, pis, tau, mass_g })
    }

    /// Like `from_train` but with the defensive mass given absolutely, so a
    /// reloaded artifact reproduces the original density bit for bit.
    pub fn from_train_with_tau(
        tt: TensorTrain,
        bases: Vec<Basis1D>,
        tau: f64,
    ) -> Result<Self, SirtError> {
        if !(tau > 0.0) {
            return Err(SirtError::BadConfig("tau must be positive".into()));
        }
        let mut d = Self::from_train(tt, bases, 0.0)?;
        d.tau = tau;
        Ok(d)
    }

    /// Builds the square-root train by cross approximation of
    /// exp(0.5 * (log target - shift)) on the node grid.
    pub fn build(
        target: &dyn VTarget,
        bases: Vec<Basis1D>,
        config: &SirtConfig,
        init: Option<&CrossIndexSets>,
    ) -> Result<SirtBuild, SirtError> {
        let d = bases.len();
        if d == 0 {
            return Err(SirtError::BadConfig("no bases".into()));
        }
        let modes: Vec<usize> = bases.iter().map(|b| b.n_nodes()).collect();

        // Shift so the cross target is O(1): max log-density over a probe set.
        let mut rng = crate::seeds::SeedNode::new(config.cross.seed).child("sirt-shift").rng();
        use rand::Rng;
        let mut shift = f64::NEG_INFINITY;
        let mut v = vec![0.0; d];
        for _ in 0..128 {
            for (k, b) in bases.iter().enumerate() {
                v[k] = b.nodes()[rng.gen_range(0..b.n_nodes())];
            }
            let lp = target.log_density_v(&v);
            if lp.is_finite() && lp > shift {
                shift = lp;
            }
        }
        if !shift.is_finite() {
            shift = 0.0;
        }

        let bases_ref = &bases;
        let f = move |idx: &[usize]| {
            let v: Vec<f64> = idx
                .iter()
                .zip(bases_ref)
                .map(|(&i, b)| b.nodes()[i])
                .collect();
            let lp = target.log_density_v(&v);
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                (0.5 * (lp - shift)).exp()
            }
        };
        let res = cross_build_with_init(&f, &modes, &config.cross, init)?;
        // Defensive mass sized by the achieved cross accuracy: the mixture
        // weight grows with the estimated mean-square residual of the
        // square-root approximant, so a sloppy layer keeps a proportionate
        // uniform floor and cannot starve regions it failed to resolve.
        let tau_rel = config.tau_rel.max(res.report.residual.min(1.0).powi(2));
        let density = SquaredFttDensity::from_train(res.tt, bases, tau_rel)?;
        Ok(SirtBuild { density, report: res.report, index_sets: res.index_sets })
    }

    /// Normalized log-density at a v-space point.
    pub fn log_density_v(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim());
        // Propagate q = prod_k A_k(v_k) with running log-scale c.
        let mut q = vec![1.0f64];
        let mut c = 0.0f64;
        for (k, core) in self.tt.cores().iter().enumerate() {
            let (i, alpha) = self.bases[k].locate(v[k]);
            let (rl, rr) = (core.r_left, core.r_right);
            let (s0, s1) = (core.slice(i), core.slice(i + 1));
            let mut out = vec![0.0; rr];
            for a in 0..rl {
                let qa = q[a];
                if qa == 0.0 {
                    continue;
                }
                for b in 0..rr {
                    let val = (1.0 - alpha) * s0[a * rr + b] + alpha * s1[a * rr + b];
                    out[b] += qa * val;
                }
            }
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return self.tau.ln() - self.normalization().ln();
            }
            for x in &mut out {
                *x /= norm;
            }
            c += norm.ln();
            q = out;
        }
        let g2_log = 2.0 * (c + q[0].abs().max(1e-300).ln());
        log_add(g2_log, self.tau.ln()) - self.normalization().ln()
    }

    /// Normalized log-density at a physical point, including the domain-map
    /// Jacobian (so this is a density in theta-space).
    pub fn log_density_theta(&self, theta: &[f64]) -> f64 {
        let v: Vec<f64> = theta
            .iter()
            .zip(&self.bases)
            .map(|(&t, b)| b.v_from_theta(t))
            .collect();
        let jac: f64 = theta
            .iter()
            .zip(&self.bases)
            .map(|(&t, b)| b.log_jacobian(t))
            .sum();
        self.log_density_v(&v) + jac
    }

    pub fn theta_from_v(&self, v: &[f64], theta: &mut [f64]) {
        for ((t, &vk), b) in theta.iter_mut().zip(v).zip(&self.bases) {
            *t = b.theta_from_v(vk);
        }
    }

    pub fn v_from_theta(&self, theta: &[f64], v: &mut [f64]) {
        for ((vk, &t), b) in v.iter_mut().zip(theta).zip(&self.bases) {
            *vk = b.v_from_theta(t);
        }
    }

    /// Inverse Rosenblatt transport: uniform u in (0,1)^d to v distributed
    /// according to the density. Returns the normalized log-density at v.
    pub fn rosenblatt_inverse(&self, u: &[f64], v: &mut [f64]) -> f64 {
        assert_eq!(u.len(), self.dim());
        assert_eq!(v.len(), self.dim());
        let mut ws = CondScratch::for_density(self);
        let mut q = vec![1.0f64];
        let mut c = 0.0f64;
        for k in 0..self.dim() {
            self.fill_dim_work(k, &q, c, &mut ws);
            let uk = u[k].clamp(1e-16, 1.0 - 1e-16);
            let vk = ws.invert_cdf(uk, &self.bases[k]);
            v[k] = vk;
            c = ws.advance(vk, &self.bases[k], c, &mut q);
        }
        let g2_log = 2.0 * (c + q[0].abs().max(1e-300).ln());
        log_add(g2_log, self.tau.ln()) - self.normalization().ln()
    }

    /// Forward Rosenblatt transport: v to the uniform cube.
    pub fn rosenblatt_forward(&self, v: &[f64], u: &mut [f64]) {
        assert_eq!(v.len(), self.dim());
        assert_eq!(u.len(), self.dim());
        let mut ws = CondScratch::for_density(self);
        let mut q = vec![1.0f64];
        let mut c = 0.0f64;
        for k in 0..self.dim() {
            self.fill_dim_work(k, &q, c, &mut ws);
            u[k] = ws.cdf(v[k], &self.bases[k]);
            c = ws.advance(v[k], &self.bases[k], c, &mut q);
        }
    }

    /// Per-dimension conditional machinery: fills the scratch with the
    /// element coefficients of the piecewise-quadratic conditional density
    /// given the prefix state.
    fn fill_dim_work(&self, k: usize, q: &[f64], c: f64, ws: &mut CondScratch) {
        let core = &self.tt.cores()[k];
        let (rl, rr) = (core.r_left, core.r_right);
        let n = core.n;
        let pi = &self.pis[k + 1];
        ws.rr = rr;
        // u_i = q * A_i, w_i = Pi_{k+1} u_i^T (flat n x rr, row per node).
        ws.u.clear();
        ws.u.resize(n * rr, 0.0);
        for i in 0..n {
            let s = core.slice(i);
            let ui = &mut ws.u[i * rr..(i + 1) * rr];
            for (a, &qa) in q.iter().enumerate().take(rl) {
                if qa == 0.0 {
                    continue;
                }
                for (uib, &sab) in ui.iter_mut().zip(&s[a * rr..(a + 1) * rr]) {
                    *uib += qa * sab;
                }
            }
        }
        ws.w.clear();
        ws.w.resize(n * rr, 0.0);
        // The accumulator is symmetric, so its column-major storage reads
        // row a as the contiguous column a.
        let pi_cols = pi.as_slice();
        for i in 0..n {
            let ui = &ws.u[i * rr..(i + 1) * rr];
            let wi = &mut ws.w[i * rr..(i + 1) * rr];
            for (a, wia) in wi.iter_mut().enumerate() {
                *wia = dot(&pi_cols[a * rr..(a + 1) * rr], ui);
            }
        }
        let nodes = self.bases[k].nodes();
        let ne = n - 1;
        ws.c0.clear();
        ws.c1.clear();
        ws.c2.clear();
        ws.h.clear();
        ws.masses.clear();
        // Defensive uniform mass scaled back to the normalized prefix.
        let m = sat_exp(self.tau.ln() - 2.0 * c);
        ws.m = m;
        let mut total = 0.0;
        for e in 0..ne {
            let h = nodes[e + 1] - nodes[e];
            let ue = &ws.u[e * rr..(e + 1) * rr];
            let ue1 = &ws.u[(e + 1) * rr..(e + 2) * rr];
            let we = &ws.w[e * rr..(e + 1) * rr];
            let we1 = &ws.w[(e + 1) * rr..(e + 2) * rr];
            let c0 = dot(ue, we).max(0.0);
            let c2 = dot(ue1, we1).max(0.0);
            let raw = dot(ue, we1);
            // Cauchy-Schwarz clip keeps the quadratic nonnegative.
            let bound = (c0 * c2).sqrt();
            let c1 = raw.clamp(-bound, bound);
            let mass = h * ((c0 + c1 + c2) / 3.0 + m);
            ws.h.push(h);
            ws.c0.push(c0);
            ws.c1.push(c1);
            ws.c2.push(c2);
            ws.masses.push(mass);
            total += mass;
        }
        ws.total = total;
    }
}

/// Reusable flat buffers for the per-dimension conditional machinery, so a
/// full transport pass allocates once instead of per dimension.
struct CondScratch {
    u: Vec<f64>,
    w: Vec<f64>,
    c0: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
    h: Vec<f64>,
    /// Uniform defensive density on this conditional, already rescaled.
    m: f64,
    masses: Vec<f64>,
    total: f64,
    rr: usize,
}

impl CondScratch {
    fn for_density(p: &SquaredFttDensity) -> Self {
        let n_max = p.bases.iter().map(|b| b.n_nodes()).max().unwrap_or(2);
        let r_max = p.tt.ranks().iter().copied().max().unwrap_or(1);
        CondScratch {
            u: Vec::with_capacity(n_max * r_max),
            w: Vec::with_capacity(n_max * r_max),
            c0: Vec::with_capacity(n_max),
            c1: Vec::with_capacity(n_max),
            c2: Vec::with_capacity(n_max),
            h: Vec::with_capacity(n_max),
            m: 0.0,
            masses: Vec::with_capacity(n_max),
            total: 0.0,
            rr: 1,
        }
    }

    /// Integral of the conditional numerator over [node_e, node_e + beta*h].
    fn partial(&self, e: usize, beta: f64) -> f64 {
        let b2 = beta * beta;
        let b3 = b2 * beta;
        let omb = 1.0 - beta;
        self.h[e]
            * (self.c0[e] * (1.0 - omb * omb * omb) / 3.0
                + 2.0 * self.c1[e] * (0.5 * b2 - b3 / 3.0)
                + self.c2[e] * b3 / 3.0
                + self.m * beta)
    }

    /// Conditional density numerator at local coordinate beta of element e.
    fn density(&self, e: usize, beta: f64) -> f64 {
        let omb = 1.0 - beta;
        (self.c0[e] * omb * omb + 2.0 * self.c1[e] * beta * omb + self.c2[e] * beta * beta)
            .max(0.0)
            + self.m
    }

    fn cdf(&self, v: f64, basis: &Basis1D) -> f64 {
        if self.total <= 0.0 {
            return v.clamp(0.0, 1.0);
        }
        let (e, beta) = basis.locate(v);
        let before: f64 = self.masses[..e].iter().sum();
        ((before + self.partial(e, beta)) / self.total).clamp(0.0, 1.0)
    }

    /// Solves CDF(v) = u by element bracketing plus safeguarded Newton.
    fn invert_cdf(&self, u: f64, basis: &Basis1D) -> f64 {
        if self.total <= 0.0 {
            return u;
        }
        let mut target = u * self.total;
        let mut e = 0;
        while e + 1 < self.masses.len() && target > self.masses[e] {
            target -= self.masses[e];
            e += 1;
        }
        let me = self.masses[e].max(1e-300);
        let target = target.clamp(0.0, me);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut beta = (target / me).clamp(0.0, 1.0);
        for _ in 0..100 {
            let f = self.partial(e, beta) - target;
            if f > 0.0 {
                hi = beta;
            } else {
                lo = beta;
            }
            if f.abs() <= 1e-15 * self.total {
                break;
            }
            let dpdb = self.h[e] * self.density(e, beta);
            let mut next = if dpdb > 0.0 { beta - f / dpdb } else { 0.5 * (lo + hi) };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - beta).abs() < 1e-16 {
                beta = next;
                break;
            }
            beta = next;
        }
        let nodes = basis.nodes();
        (nodes[e] + beta * self.h[e]).clamp(0.0, 1.0)
    }

    /// Folds the chosen coordinate into the prefix vector (renormalized),
    /// returning the updated log-scale.
    fn advance(&self, v: f64, basis: &Basis1D, c: f64, q: &mut Vec<f64>) -> f64 {
        let (e, alpha) = basis.locate(v);
        let rr = self.rr;
        q.clear();
        q.resize(rr, 0.0);
        let ue = &self.u[e * rr..(e + 1) * rr];
        let ue1 = &self.u[(e + 1) * rr..(e + 2) * rr];
        for ((qb, &a0), &a1) in q.iter_mut().zip(ue).zip(ue1) {
            *qb = (1.0 - alpha) * a0 + alpha * a1;
        }
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            // Dead prefix: keep a unit vector so later conditionals fall
            // back to the defensive uniform component.
            for x in q.iter_mut() {
                *x = 0.0;
            }
            q[0] = 1.0;
            return c - 690.0;
        }
        for x in q.iter_mut() {
            *x /= norm;
        }
        c + norm.ln()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// exp with saturation instead of overflow.
fn sat_exp(x: f64) -> f64 {
    x.min(700.0).exp()
}

/// Pi_k chain: Pi_d = [[1]], Pi_k = sum_{i,j} M_ij A_i Pi_{k+1} A_j^T.
fn marginal_accumulators(tt: &TensorTrain, bases: &[Basis1D]) -> Vec<DMatrix<f64>> {
    let d = tt.dims();
    let ranks = tt.ranks();
    let mut pis = vec![DMatrix::zeros(0, 0); d + 1];
    pis[d] = DMatrix::from_element(1, 1, 1.0);
    for k in (0..d).rev() {
        let core = &tt.cores()[k];
        let (diag, off) = bases[k].mass();
        let n = core.n;
        // b_i = Pi_{k+1} A_i^T as matrices (r_{k+1} x r_k).
        let slices: Vec<DMatrix<f64>> = (0..n).map(|i| core.slice_matrix(i)).collect();
        let pbt: Vec<DMatrix<f64>> =
            slices.iter().map(|a| &pis[k + 1] * a.transpose()).collect();
        let mut pi = DMatrix::zeros(ranks[k], ranks[k]);
        for i in 0..n {
            pi += &slices[i] * &pbt[i] * diag[i];
            if i + 1 < n {
                let cross = &slices[i] * &pbt[i + 1] * off[i];
                pi += &cross + cross.transpose();
            }
        }
        pis[k] = crate::linalg::symmetrize(&pi);
    }
    pis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::SeedNode;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn sirt_cfg(max_rank: usize, seed: u64) -> SirtConfig {
        SirtConfig {
            cross: CrossConfig {
                rel_tolerance: 1e-10,
                max_rank,
                max_sweeps: 4,
                enrichment_rank: 2,
                seed,
            },
            tau_rel: 1e-10,
        }
    }

    fn bounded_bases(d: usize, n: usize) -> Vec<Basis1D> {
        (0..d)
            .map(|_| {
                Basis1D::new(n, NodeLayout::Uniform, DomainMap::Bounded { lower: 0.0, upper: 1.0 })
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_target_gives_identity_transport() {
        let target = |_: &[f64]| 0.0;
        let build = SquaredFttDensity::build(
            &target,
            bounded_bases(3, 8),
            &sirt_cfg(3, 1),
            None,
        )
        .unwrap();
        let p = &build.density;
        let mut rng = SeedNode::new(4).rng();
        for _ in 0..50 {
            let u: Vec<f64> = (0..3).map(|_| rng.gen_range(0.001..0.999)).collect();
            let mut v = vec![0.0; 3];
            let logp = p.rosenblatt_inverse(&u, &mut v);
            for (a, b) in u.iter().zip(&v) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(logp, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(p.log_density_v(&v), 0.0, epsilon = 1e-9);
        }
    }

    /// Exact truncated-Gaussian reference on [0,1].
    fn trunc_gauss_logpdf(v: f64, mu: f64, sigma: f64) -> f64 {
        let z = normal::cdf((1.0 - mu) / sigma) - normal::cdf(-mu / sigma);
        normal::log_pdf((v - mu) / sigma) - sigma.ln() - z.ln()
    }

    #[test]
    fn product_gaussian_density_matches_analytic_value() {
        let (mu, sigma) = (0.45, 0.2);
        let target =
            move |v: &[f64]| v.iter().map(|&x| normal::log_pdf((x - mu) / sigma)).sum::<f64>();
        let d = 3;
        let build = SquaredFttDensity::build(
            &target,
            bounded_bases(d, 401),
            &sirt_cfg(3, 7),
            None,
        )
        .unwrap();
        let p = build.density;
        let mut rng = SeedNode::new(9).rng();
        for _ in 0..200 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..0.95)).collect();
            let want: f64 = v.iter().map(|&x| trunc_gauss_logpdf(x, mu, sigma)).sum();
            let got = p.log_density_v(&v);
            assert!(
                (got - want).abs() < 2e-4,
                "log density mismatch at {v:?}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn interpolation_error_shrinks_with_node_count() {
        let (mu, sigma) = (0.45, 0.2);
        let target =
            move |v: &[f64]| v.iter().map(|&x| normal::log_pdf((x - mu) / sigma)).sum::<f64>();
        let mut errs = Vec::new();
        for n in [51usize, 201] {
            let build = SquaredFttDensity::build(
                &target,
                bounded_bases(2, n),
                &sirt_cfg(3, 7),
                None,
            )
            .unwrap();
            let p = build.density;
            let mut rng = SeedNode::new(2).rng();
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let v: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..0.9)).collect();
                let want: f64 = v.iter().map(|&x| trunc_gauss_logpdf(x, mu, sigma)).sum();
                worst = worst.max((p.log_density_v(&v) - want).abs());
            }
            errs.push(worst);
        }
        // Second-order interpolation: 4x nodes should cut the error by ~16.
        assert!(errs[1] < errs[0] / 8.0, "errors {errs:?}");
    }

    #[test]
    fn correlated_gaussian_quadrature_is_one() {
        // 2D zero-mean Gaussian with correlation 0.5 on the Gaussian map.
        let rho: f64 = 0.5;
        let det = 1.0 - rho * rho;
        let bases: Vec<Basis1D> =
            (0..2).map(|_| Basis1D::new(41, NodeLayout::Uniform, DomainMap::Gaussian).unwrap()).collect();
        let b0 = bases[0].clone();
        let target = move |v: &[f64]| {
            let t0 = b0.theta_from_v(v[0]);
            let t1 = b0.theta_from_v(v[1]);
            // Density in v-space: theta-density divided by dv/dtheta.
            let quad = (t0 * t0 - 2.0 * rho * t0 * t1 + t1 * t1) / det;
            let log_theta = -0.5 * quad - (2.0 * std::f64::consts::PI * det.sqrt()).ln();
            log_theta - b0.log_jacobian(t0) - b0.log_jacobian(t1)
        };
        let build = SquaredFttDensity::build(&target, bases, &sirt_cfg(8, 3), None).unwrap();
        let p = build.density;

        // Exact quadrature of the normalized surrogate: g^2 is biquadratic
        // per cell, so 2-point Gauss per direction is exact.
        let gp = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
        let nodes = p.bases()[0].nodes().to_vec();
        let mut total = 0.0;
        for e0 in 0..nodes.len() - 1 {
            let h0 = nodes[e0 + 1] - nodes[e0];
            for e1 in 0..nodes.len() - 1 {
                let h1 = nodes[e1 + 1] - nodes[e1];
                for &a in &gp {
                    for &b in &gp {
                        let v = [nodes[e0] + a * h0, nodes[e1] + b * h1];
                        total += 0.25 * h0 * h1 * p.log_density_v(&v).exp();
                    }
                }
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn correlated_gaussian_samples_have_right_covariance() {
        // Bounded window in theta-space: the v-density of a correlated
        // Gaussian under the exact quantile map is unbounded at the cube
        // corners, so a single-layer build uses a truncated domain instead.
        let rho: f64 = 0.5;
        let det = 1.0 - rho * rho;
        let bases: Vec<Basis1D> = (0..2)
            .map(|_| {
                Basis1D::new(
                    81,
                    NodeLayout::Uniform,
                    DomainMap::Bounded { lower: -5.0, upper: 5.0 },
                )
                .unwrap()
            })
            .collect();
        let b0 = bases[0].clone();
        let target = move |v: &[f64]| {
            let t0 = b0.theta_from_v(v[0]);
            let t1 = b0.theta_from_v(v[1]);
            let quad = (t0 * t0 - 2.0 * rho * t0 * t1 + t1 * t1) / det;
            -0.5 * quad - b0.log_jacobian(t0) - b0.log_jacobian(t1)
        };
        let build = SquaredFttDensity::build(&target, bases, &sirt_cfg(8, 5), None).unwrap();
        let p = build.density;
        let mut rng = SeedNode::new(77).rng();
        let n = 40_000usize;
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        let mut v = vec![0.0; 2];
        let mut th = vec![0.0; 2];
        for _ in 0..n {
            let u = [rng.gen::<f64>(), rng.gen::<f64>()];
            p.rosenblatt_inverse(&u, &mut v);
            p.theta_from_v(&v, &mut th);
            s00 += th[0] * th[0];
            s01 += th[0] * th[1];
            s11 += th[1] * th[1];
        }
        let nf = n as f64;
        assert_abs_diff_eq!(s00 / nf, 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(s11 / nf, 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(s01 / nf, rho, epsilon = 0.03);
    }

    #[test]
    fn conditional_cdf_matches_one_dimensional_oracle() {
        // Product density: conditionals reduce to independent 1D CDFs.
        let (mu, sigma) = (0.5, 0.15);
        let target =
            move |v: &[f64]| v.iter().map(|&x| normal::log_pdf((x - mu) / sigma)).sum::<f64>();
        let build = SquaredFttDensity::build(
            &target,
            bounded_bases(2, 401),
            &sirt_cfg(3, 11),
            None,
        )
        .unwrap();
        let p = build.density;
        let z = normal::cdf((1.0 - mu) / sigma) - normal::cdf(-mu / sigma);
        let exact_cdf =
            |x: f64| (normal::cdf((x - mu) / sigma) - normal::cdf(-mu / sigma)) / z;
        let mut u = vec![0.0; 2];
        for &v0 in &[0.2, 0.4, 0.5, 0.7, 0.9] {
            for &v1 in &[0.3, 0.6] {
                p.rosenblatt_forward(&[v0, v1], &mut u);
                assert_abs_diff_eq!(u[0], exact_cdf(v0), epsilon = 2e-5);
                assert_abs_diff_eq!(u[1], exact_cdf(v1), epsilon = 2e-5);
            }
        }
    }

    #[test]
    fn transport_round_trips_to_1e10() {
        let rho: f64 = -0.4;
        let det = 1.0 - rho * rho;
        let bases: Vec<Basis1D> = (0..3)
            .map(|_| Basis1D::new(31, NodeLayout::ChebyshevLobatto, DomainMap::Gaussian).unwrap())
            .collect();
        let b0 = bases[0].clone();
        let target = move |v: &[f64]| {
            let t: Vec<f64> = v.iter().map(|&x| b0.theta_from_v(x)).collect();
            let quad = t[0] * t[0] + (t[1] * t[1] - 2.0 * rho * t[1] * t[2] + t[2] * t[2]) / det;
            -0.5 * quad - v.iter().map(|&x| b0.log_jacobian(b0.theta_from_v(x))).sum::<f64>()
        };
        let build = SquaredFttDensity::build(&target, bases, &sirt_cfg(8, 13), None).unwrap();
        let p = build.density;
        let mut rng = SeedNode::new(21).rng();
        let mut v = vec![0.0; 3];
        let mut u2 = vec![0.0; 3];
        for _ in 0..300 {
            let u: Vec<f64> = (0..3).map(|_| rng.gen_range(1e-4..1.0 - 1e-4)).collect();
            p.rosenblatt_inverse(&u, &mut v);
            p.rosenblatt_forward(&v, &mut u2);
            for (a, b) in u.iter().zip(&u2) {
                assert!((a - b).abs() < 1e-10, "roundtrip {a} vs {b}");
            }
        }
    }

    #[test]
    fn samples_pass_ks_test_against_analytic_mixture_cdf() {
        // 1D bimodal mixture; inverse transport samples must match the
        // analytic CDF in a Kolmogorov-Smirnov test at the 1% level.
        let comp = [(0.3f64, 0.08f64, 0.4f64), (0.7, 0.1, 0.6)];
        let target = move |v: &[f64]| {
            let x = v[0];
            let p: f64 = comp
                .iter()
                .map(|&(m, s, w)| w / s * normal::pdf((x - m) / s))
                .sum();
            p.ln()
        };
        let bases = vec![Basis1D::new(
            801,
            NodeLayout::Uniform,
            DomainMap::Bounded { lower: 0.0, upper: 1.0 },
        )
        .unwrap()];
        let build = SquaredFttDensity::build(&target, bases, &sirt_cfg(1, 17), None).unwrap();
        let p = build.density;

        // Mixture CDF truncated to [0,1].
        let raw_cdf = |x: f64| -> f64 {
            comp.iter().map(|&(m, s, w)| w * normal::cdf((x - m) / s)).sum()
        };
        let z = raw_cdf(1.0) - raw_cdf(0.0);
        let cdf = |x: f64| (raw_cdf(x) - raw_cdf(0.0)) / z;

        let n = 100_000usize;
        let mut rng = SeedNode::new(33).rng();
        let mut xs: Vec<f64> = (0..n)
            .map(|_| {
                let mut v = [0.0];
                p.rosenblatt_inverse(&[rng.gen::<f64>()], &mut v);
                v[0]
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = cdf(x);
            ks = ks.max((f - i as f64 / n as f64).abs());
            ks = ks.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        let crit = 1.628 / (n as f64).sqrt(); // alpha = 0.01
        assert!(ks < crit, "KS statistic {ks} exceeds critical value {crit}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let tt = {
            let mut c = crate::tt::Core::zeros(1, 5, 1);
            for i in 0..5 {
                c.set(0, i, 0, 1.0);
            }
            TensorTrain::new(vec![c]).unwrap()
        };
        let err = SquaredFttDensity::from_train(tt, bounded_bases(1, 8), 1e-8);
        assert!(matches!(err, Err(SirtError::BadConfig(_))));
    }
}
