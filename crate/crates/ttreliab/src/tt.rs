//! Discrete tensor-train representation of grid-sampled multivariate
//! functions, built by cross approximation and compressed by rounding.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::exec;
use crate::linalg::{maxvol, select_rows};
use crate::seeds::SeedNode;

#[derive(Debug, Error)]
pub enum TtError {
    #[error("index {index:?} out of range for mode sizes {modes:?}")]
    IndexOutOfRange { index: Vec<usize>, modes: Vec<usize> },
    #[error("evaluator returned non-finite value {value} at index {index:?}")]
    NonFiniteValue { index: Vec<usize>, value: f64 },
    #[error("invalid cross configuration: {0}")]
    BadConfig(String),
    #[error("tensor train is structurally invalid: {0}")]
    Invalid(String),
}

/// One three-way core, stored node-major: `slice(i)` is the
/// `r_left x r_right` matrix for node `i`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Core {
    pub r_left: usize,
    pub n: usize,
    pub r_right: usize,
    data: Vec<f64>,
}

impl Core {
    pub fn zeros(r_left: usize, n: usize, r_right: usize) -> Self {
        Core { r_left, n, r_right, data: vec![0.0; r_left * n * r_right] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rebuilds a core from its raw node-major buffer (artifact loading).
    pub fn from_data(
        r_left: usize,
        n: usize,
        r_right: usize,
        data: Vec<f64>,
    ) -> Result<Self, TtError> {
        if data.len() != r_left * n * r_right {
            return Err(TtError::Invalid(format!(
                "core buffer has {} entries, expected {}",
                data.len(),
                r_left * n * r_right
            )));
        }
        Ok(Core { r_left, n, r_right, data })
    }

    #[inline]
    pub fn slice(&self, i: usize) -> &[f64] {
        let s = self.r_left * self.r_right;
        &self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[(i * self.r_left + a) * self.r_right + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, i: usize, b: usize, v: f64) {
        self.data[(i * self.r_left + a) * self.r_right + b] = v;
    }

    /// Node slice as a dense matrix.
    pub fn slice_matrix(&self, i: usize) -> DMatrix<f64> {
        let s = self.slice(i);
        DMatrix::from_fn(self.r_left, self.r_right, |a, b| s[a * self.r_right + b])
    }

    /// Left unfolding, rows indexed by (a, i) with `a` fastest.
    pub fn unfold_left(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r_left * self.n, self.r_right, |row, b| {
            let a = row % self.r_left;
            let i = row / self.r_left;
            self.get(a, i, b)
        })
    }

    /// Right unfolding, columns indexed by (i, b) with `b` fastest.
    pub fn unfold_right(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r_left, self.n * self.r_right, |a, col| {
            let b = col % self.r_right;
            let i = col / self.r_right;
            self.get(a, i, b)
        })
    }

    pub fn from_unfold_left(m: &DMatrix<f64>, r_left: usize, n: usize) -> Self {
        let r_right = m.ncols();
        let mut core = Core::zeros(r_left, n, r_right);
        for i in 0..n {
            for a in 0..r_left {
                for b in 0..r_right {
                    core.set(a, i, b, m[(a + r_left * i, b)]);
                }
            }
        }
        core
    }

    pub fn from_unfold_right(m: &DMatrix<f64>, n: usize, r_right: usize) -> Self {
        let r_left = m.nrows();
        let mut core = Core::zeros(r_left, n, r_right);
        for i in 0..n {
            for a in 0..r_left {
                for b in 0..r_right {
                    core.set(a, i, b, m[(a, i * r_right + b)]);
                }
            }
        }
        core
    }

    /// Replaces each slice by `m * slice` (left multiplication).
    pub fn mul_left(&mut self, m: &DMatrix<f64>) {
        let mut out = Core::zeros(m.nrows(), self.n, self.r_right);
        for i in 0..self.n {
            let prod = m * self.slice_matrix(i);
            for a in 0..out.r_left {
                for b in 0..out.r_right {
                    out.set(a, i, b, prod[(a, b)]);
                }
            }
        }
        *self = out;
    }

    /// Replaces each slice by `slice * m` (right multiplication).
    pub fn mul_right(&mut self, m: &DMatrix<f64>) {
        let mut out = Core::zeros(self.r_left, self.n, m.ncols());
        for i in 0..self.n {
            let prod = self.slice_matrix(i) * m;
            for a in 0..out.r_left {
                for b in 0..out.r_right {
                    out.set(a, i, b, prod[(a, b)]);
                }
            }
        }
        *self = out;
    }
}

/// Tensor train: a chain of three-way cores with boundary ranks one.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    cores: Vec<Core>,
}

impl TensorTrain {
    pub fn new(cores: Vec<Core>) -> Result<Self, TtError> {
        let tt = TensorTrain { cores };
        tt.validate()?;
        Ok(tt)
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn dims(&self) -> usize {
        self.cores.len()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.n).collect()
    }

    /// Bond ranks r_0..r_d (length d + 1).
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![self.cores[0].r_left];
        r.extend(self.cores.iter().map(|c| c.r_right));
        r
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), TtError> {
        if self.cores.is_empty() {
            return Err(TtError::Invalid("no cores".into()));
        }
        if self.cores[0].r_left != 1 || self.cores.last().unwrap().r_right != 1 {
            return Err(TtError::Invalid("boundary ranks must be one".into()));
        }
        for w in self.cores.windows(2) {
            if w[0].r_right != w[1].r_left {
                return Err(TtError::Invalid(format!(
                    "rank chain mismatch: {} vs {}",
                    w[0].r_right, w[1].r_left
                )));
            }
        }
        for (k, c) in self.cores.iter().enumerate() {
            if c.n == 0 {
                return Err(TtError::Invalid(format!("core {k} has zero mode size")));
            }
            if c.data.iter().any(|v| !v.is_finite()) {
                return Err(TtError::Invalid(format!("core {k} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Chained matrix product G_1(i_1) ... G_d(i_d).
    pub fn evaluate(&self, index: &[usize]) -> Result<f64, TtError> {
        let modes = self.mode_sizes();
        if index.len() != modes.len() || index.iter().zip(&modes).any(|(i, n)| i >= n) {
            return Err(TtError::IndexOutOfRange { index: index.to_vec(), modes });
        }
        let mut v = vec![1.0f64];
        for (core, &i) in self.cores.iter().zip(index) {
            let s = core.slice(i);
            let mut out = vec![0.0; core.r_right];
            for a in 0..core.r_left {
                let va = v[a];
                if va == 0.0 {
                    continue;
                }
                let row = &s[a * core.r_right..(a + 1) * core.r_right];
                for (o, rv) in out.iter_mut().zip(row) {
                    *o += va * rv;
                }
            }
            v = out;
        }
        Ok(v[0])
    }

    /// Frobenius norm of the represented tensor.
    pub fn frob_norm(&self) -> f64 {
        // Contract the Gram chain left to right.
        let mut g = DMatrix::from_element(1, 1, 1.0);
        for core in &self.cores {
            let mut next = DMatrix::zeros(core.r_right, core.r_right);
            for i in 0..core.n {
                let s = core.slice_matrix(i);
                next += s.transpose() * &g * s;
            }
            g = next;
        }
        g[(0, 0)].max(0.0).sqrt()
    }
}

/// Configuration for [`cross_build`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossConfig {
    /// Relative tolerance for rank truncation and sweep convergence.
    pub rel_tolerance: f64,
    pub max_rank: usize,
    pub max_sweeps: usize,
    /// Number of random enrichment columns/rows per half sweep.
    pub enrichment_rank: usize,
    pub seed: u64,
}

impl Default for CrossConfig {
    fn default() -> Self {
        CrossConfig {
            rel_tolerance: 1e-8,
            max_rank: 12,
            max_sweeps: 4,
            enrichment_rank: 2,
            seed: 0,
        }
    }
}

impl CrossConfig {
    fn check(&self) -> Result<(), TtError> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(TtError::BadConfig("relTolerance must be in (0, 1)".into()));
        }
        if self.max_rank == 0 {
            return Err(TtError::BadConfig("maxRank must be at least 1".into()));
        }
        if self.max_sweeps == 0 {
            return Err(TtError::BadConfig("maxSweeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Target function on the index grid. Must be safe to call concurrently;
/// the build driver dispatches evaluations in batches.
pub trait TensorEvaluator: Sync {
    fn eval(&self, index: &[usize]) -> f64;
}

impl<F> TensorEvaluator for F
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn eval(&self, index: &[usize]) -> f64 {
        self(index)
    }
}

/// Nested interpolation index sets, reusable to warm-start a later build
/// (the deep transport reuses the previous layer's sets).
#[derive(Debug, Clone)]
pub struct CrossIndexSets {
    /// `left[k]`: prefixes of length k, for k = 0..d (left[0] = [[]]).
    pub left: Vec<Vec<Vec<usize>>>,
    /// `right[k]`: suffixes covering modes k..d-1, for k = 0..d.
    pub right: Vec<Vec<Vec<usize>>>,
}

/// Build diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CrossReport {
    pub evaluations: u64,
    pub converged: bool,
    pub sweeps: usize,
    pub max_rank: usize,
    /// Relative RMS residual on the probe set after the last sweep.
    pub residual: f64,
}

pub struct CrossResult {
    pub tt: TensorTrain,
    pub report: CrossReport,
    pub index_sets: CrossIndexSets,
}

struct BatchEval<'a> {
    f: &'a dyn TensorEvaluator,
    count: std::sync::atomic::AtomicU64,
}

impl<'a> BatchEval<'a> {
    fn new(f: &'a dyn TensorEvaluator) -> Self {
        BatchEval { f, count: std::sync::atomic::AtomicU64::new(0) }
    }

    fn eval_batch(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>, TtError> {
        self.count
            .fetch_add(indices.len() as u64, std::sync::atomic::Ordering::Relaxed);
        let vals = exec::map(indices, |idx| self.f.eval(idx));
        for (idx, v) in indices.iter().zip(&vals) {
            if !v.is_finite() {
                return Err(TtError::NonFiniteValue { index: idx.clone(), value: *v });
            }
        }
        Ok(vals)
    }

    fn total(&self) -> u64 {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }
}

fn random_suffix(rng: &mut impl Rng, modes: &[usize], from: usize) -> Vec<usize> {
    modes[from..].iter().map(|&n| rng.gen_range(0..n)).collect()
}

fn random_prefix(rng: &mut impl Rng, modes: &[usize], upto: usize) -> Vec<usize> {
    modes[..upto].iter().map(|&n| rng.gen_range(0..n)).collect()
}

/// Truncation rank from singular values: relative threshold against the
/// largest singular value, capped by `max_rank`.
fn svd_rank(sv: &[f64], rel_tol: f64, max_rank: usize) -> usize {
    let s0 = sv.first().copied().unwrap_or(0.0);
    if s0 <= 0.0 {
        return 1;
    }
    let mut r = sv.iter().take_while(|&&s| s > rel_tol * s0).count();
    r = r.clamp(1, max_rank.min(sv.len()));
    r
}

/// Builds a tensor train approximation of `f` on the index grid by
/// alternating cross sweeps with maximum-volume pivot selection and random
/// column/row enrichment.
pub fn cross_build(
    f: &dyn TensorEvaluator,
    mode_sizes: &[usize],
    config: &CrossConfig,
) -> Result<CrossResult, TtError> {
    cross_build_with_init(f, mode_sizes, config, None)
}

/// Like [`cross_build`] but optionally warm-started from earlier index sets
/// (shapes are re-checked; incompatible sets are discarded).
pub fn cross_build_with_init(
    f: &dyn TensorEvaluator,
    mode_sizes: &[usize],
    config: &CrossConfig,
    init: Option<&CrossIndexSets>,
) -> Result<CrossResult, TtError> {
    config.check()?;
    let d = mode_sizes.len();
    if d == 0 {
        return Err(TtError::BadConfig("empty mode sizes".into()));
    }
    let ev = BatchEval::new(f);
    let seed = SeedNode::new(config.seed).child("tt-cross");
    let mut rng = seed.rng();

    if d == 1 {
        // Degenerate case: the train is a single vector of samples.
        let indices: Vec<Vec<usize>> = (0..mode_sizes[0]).map(|i| vec![i]).collect();
        let vals = ev.eval_batch(&indices)?;
        let mut core = Core::zeros(1, mode_sizes[0], 1);
        for (i, v) in vals.iter().enumerate() {
            core.set(0, i, 0, *v);
        }
        let tt = TensorTrain::new(vec![core])?;
        return Ok(CrossResult {
            tt,
            report: CrossReport {
                evaluations: ev.total(),
                converged: true,
                sweeps: 1,
                max_rank: 1,
                residual: 0.0,
            },
            index_sets: CrossIndexSets {
                left: vec![vec![vec![]], vec![]],
                right: vec![vec![], vec![vec![]]],
            },
        });
    }

    let init_rank = config.max_rank.min(2).max(1);

    // right[k]: suffixes for modes k..d-1; right[d] = [[]].
    let mut right: Vec<Vec<Vec<usize>>> = vec![Vec::new(); d + 1];
    right[d] = vec![vec![]];
    let mut left: Vec<Vec<Vec<usize>>> = vec![Vec::new(); d + 1];
    left[0] = vec![vec![]];

    let mut warm = false;
    if let Some(sets) = init {
        let shapes_ok = sets.left.len() == d + 1
            && sets.right.len() == d + 1
            && (1..d).all(|k| {
                !sets.left[k].is_empty()
                    && !sets.right[k].is_empty()
                    && sets.left[k].iter().all(|p| p.len() == k)
                    && sets.right[k].iter().all(|s| s.len() == d - k)
            });
        if shapes_ok {
            left = sets.left.clone();
            right = sets.right.clone();
            warm = true;
        }
    }
    if !warm {
        for k in (1..d).rev() {
            let mut set = Vec::new();
            let mut guard = 0;
            while set.len() < init_rank && guard < 100 {
                guard += 1;
                let i = rng.gen_range(0..mode_sizes[k]);
                let tail = right[k + 1][rng.gen_range(0..right[k + 1].len())].clone();
                let mut suffix = vec![i];
                suffix.extend(tail);
                if !set.contains(&suffix) {
                    set.push(suffix);
                }
            }
            if set.is_empty() {
                set.push(random_suffix(&mut rng, mode_sizes, k));
            }
            right[k] = set;
        }
    }

    // Probe points for convergence monitoring.
    let n_probe = 64usize;
    let probes: Vec<Vec<usize>> = (0..n_probe)
        .map(|_| mode_sizes.iter().map(|&n| rng.gen_range(0..n)).collect())
        .collect();
    let probe_vals = ev.eval_batch(&probes)?;
    let probe_rms = (probe_vals.iter().map(|v| v * v).sum::<f64>() / n_probe as f64).sqrt();
    if probe_vals.iter().all(|v| *v == 0.0) && probe_rms == 0.0 {
        // Zero on all probes is allowed; the sweeps will confirm or refute.
    }

    let kick = config.enrichment_rank;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut sweeps_done = 0usize;
    let mut tt_opt: Option<TensorTrain> = None;

    // Forward half sweep. When `build`, also assembles interpolation cores.
    let forward = |left: &mut Vec<Vec<Vec<usize>>>,
                   right: &Vec<Vec<Vec<usize>>>,
                   rng: &mut rand_chacha::ChaCha12Rng,
                   build: bool,
                   ev: &BatchEval|
     -> Result<Option<Vec<Core>>, TtError> {
        let mut cores: Vec<Core> = Vec::with_capacity(d);
        for k in 0..d {
            let rows: Vec<Vec<usize>> = left[k]
                .iter()
                .flat_map(|p| {
                    (0..mode_sizes[k]).map(move |i| {
                        let mut idx = p.clone();
                        idx.push(i);
                        idx
                    })
                })
                .collect();
            let n_rows = rows.len();
            let r_l = left[k].len();
            if k == d - 1 {
                if build {
                    let vals = ev.eval_batch(&rows)?;
                    let mut core = Core::zeros(r_l, mode_sizes[k], 1);
                    for (ri, v) in vals.iter().enumerate() {
                        let (a, i) = (ri / mode_sizes[k], ri % mode_sizes[k]);
                        core.set(a, i, 0, *v);
                    }
                    cores.push(core);
                }
                break;
            }
            // Columns: current suffix set plus random enrichment.
            let mut cols: Vec<Vec<usize>> = right[k + 1].clone();
            for _ in 0..kick {
                let c = random_suffix(rng, mode_sizes, k + 1);
                if !cols.contains(&c) {
                    cols.push(c);
                }
            }
            let indices: Vec<Vec<usize>> = rows
                .iter()
                .flat_map(|p| {
                    cols.iter().map(move |s| {
                        let mut idx = p.clone();
                        idx.extend(s.iter().copied());
                        idx
                    })
                })
                .collect();
            let vals = ev.eval_batch(&indices)?;
            let m = DMatrix::from_fn(n_rows, cols.len(), |r, c| vals[r * cols.len() + c]);

            let svd = m.clone().svd(true, true);
            let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let r_new = svd_rank(&sv, config.rel_tolerance, config.max_rank);
            let u = svd.u.as_ref().expect("svd u");
            // nalgebra does not sort singular values; pick columns by size.
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let mut u_r = DMatrix::zeros(n_rows, r_new);
            for (c, &oc) in order.iter().take(r_new).enumerate() {
                u_r.set_column(c, &u.column(oc));
            }
            let piv = maxvol(&u_r, 5e-2, 100);
            let new_left: Vec<Vec<usize>> = piv.iter().map(|&ri| rows[ri].clone()).collect();

            if build {
                // Interpolation core: M * pinv(M[pivot rows, :]).
                let sub = select_rows(&m, &piv);
                let pinv = sub
                    .svd(true, true)
                    .pseudo_inverse(1e-13)
                    .map_err(|e| TtError::Invalid(format!("pivot block pseudo-inverse: {e}")))?;
                let g = &m * pinv;
                let mut core = Core::zeros(r_l, mode_sizes[k], r_new);
                for ri in 0..n_rows {
                    let (a, i) = (ri / mode_sizes[k], ri % mode_sizes[k]);
                    for b in 0..r_new {
                        core.set(a, i, b, g[(ri, b)]);
                    }
                }
                cores.push(core);
            }
            left[k + 1] = new_left;
        }
        Ok(if build { Some(cores) } else { None })
    };

    // Backward half sweep updating the suffix sets.
    let backward = |left: &Vec<Vec<Vec<usize>>>,
                    right: &mut Vec<Vec<Vec<usize>>>,
                    rng: &mut rand_chacha::ChaCha12Rng,
                    ev: &BatchEval|
     -> Result<(), TtError> {
        for k in (1..d).rev() {
            let cols: Vec<Vec<usize>> = (0..mode_sizes[k])
                .flat_map(|i| {
                    right[k + 1].iter().map(move |s| {
                        let mut suffix = vec![i];
                        suffix.extend(s.iter().copied());
                        suffix
                    })
                })
                .collect();
            let mut row_prefixes: Vec<Vec<usize>> = left[k].clone();
            for _ in 0..kick {
                let p = random_prefix(rng, mode_sizes, k);
                if !row_prefixes.contains(&p) {
                    row_prefixes.push(p);
                }
            }
            let indices: Vec<Vec<usize>> = row_prefixes
                .iter()
                .flat_map(|p| {
                    cols.iter().map(move |s| {
                        let mut idx = p.clone();
                        idx.extend(s.iter().copied());
                        idx
                    })
                })
                .collect();
            let vals = ev.eval_batch(&indices)?;
            let m =
                DMatrix::from_fn(row_prefixes.len(), cols.len(), |r, c| vals[r * cols.len() + c]);
            let svd = m.clone().svd(true, true);
            let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let r_new = svd_rank(&sv, config.rel_tolerance, config.max_rank);
            let vt = svd.v_t.as_ref().expect("svd v_t");
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let mut v_r = DMatrix::zeros(cols.len(), r_new);
            for (c, &oc) in order.iter().take(r_new).enumerate() {
                v_r.set_column(c, &vt.row(oc).transpose());
            }
            let piv = maxvol(&v_r, 5e-2, 100);
            right[k] = piv.iter().map(|&ci| cols[ci].clone()).collect();
        }
        Ok(())
    };

    if !warm {
        forward(&mut left, &right, &mut rng, false, &ev)?;
    }
    for sweep in 1..=config.max_sweeps {
        sweeps_done = sweep;
        backward(&left, &mut right, &mut rng, &ev)?;
        let cores = forward(&mut left, &right, &mut rng, true, &ev)?
            .expect("build pass returns cores");
        let tt = TensorTrain::new(cores)?;
        // Convergence on the probe set (relative RMS).
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, &fv) in probes.iter().zip(&probe_vals) {
            let tv = tt.evaluate(p)?;
            num += (fv - tv) * (fv - tv);
            den += fv * fv;
        }
        residual = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        tt_opt = Some(tt);
        if residual <= config.rel_tolerance.max(1e-14) * 10.0 {
            converged = true;
            break;
        }
    }

    let tt = tt_opt.expect("at least one sweep");
    let max_rank = tt.max_rank();
    Ok(CrossResult {
        tt,
        report: CrossReport {
            evaluations: ev.total(),
            converged,
            sweeps: sweeps_done,
            max_rank,
            residual,
        },
        index_sets: CrossIndexSets { left, right },
    })
}

/// Compresses a tensor train to the requested relative Frobenius tolerance.
/// A non-positive tolerance returns the input unchanged.
pub fn round(tt: &TensorTrain, rel_tolerance: f64) -> Result<TensorTrain, TtError> {
    if rel_tolerance <= 0.0 {
        return Ok(tt.clone());
    }
    let d = tt.dims();
    let mut cores = tt.cores().to_vec();

    // Right-to-left orthogonalization via LQ (QR of the transpose).
    for k in (1..d).rev() {
        let r = cores[k].unfold_right(); // r_l x (n * r_r)
        let qr = r.transpose().qr();
        let (q, rr) = (qr.q(), qr.r());
        // r = rr^T q^T; q^T has orthonormal rows.
        let new_rl = q.ncols();
        cores[k] = Core::from_unfold_right(&q.transpose(), cores[k].n, cores[k].r_right);
        let _ = new_rl;
        cores[k - 1].mul_right(&rr.transpose());
    }

    let norm = {
        let c0 = &cores[0];
        let mut s = 0.0;
        for i in 0..c0.n {
            for a in 0..c0.r_left {
                for b in 0..c0.r_right {
                    let v = c0.get(a, i, b);
                    s += v * v;
                }
            }
        }
        s.sqrt()
    };
    let delta = if d > 1 {
        rel_tolerance * norm / ((d - 1) as f64).sqrt()
    } else {
        0.0
    };

    // Left-to-right SVD truncation.
    for k in 0..d - 1 {
        let m = cores[k].unfold_left(); // (r_l * n) x r_r
        let svd = m.svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        // Keep the smallest rank whose discarded tail is within delta.
        let total_tail: Vec<f64> = {
            let mut acc = 0.0;
            let mut tails = vec![0.0; sv.len() + 1];
            for i in (0..sv.len()).rev() {
                acc += sv[i] * sv[i];
                tails[i] = acc;
            }
            tails
        };
        let mut r_new = sv.len();
        while r_new > 1 && total_tail[r_new - 1] <= delta * delta {
            r_new -= 1;
        }
        let u = svd.u.as_ref().expect("svd u");
        let vt = svd.v_t.as_ref().expect("svd v_t");
        let mut u_r = DMatrix::zeros(u.nrows(), r_new);
        let mut svt = DMatrix::zeros(r_new, vt.ncols());
        for (c, &oc) in order.iter().take(r_new).enumerate() {
            u_r.set_column(c, &u.column(oc));
            let row = vt.row(oc) * sv[c];
            svt.set_row(c, &row);
        }
        let (rl, n) = (cores[k].r_left, cores[k].n);
        cores[k] = Core::from_unfold_left(&u_r, rl, n);
        cores[k + 1].mul_left(&svt);
    }

    TensorTrain::new(cores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Dense enumeration oracle: evaluates every entry of the grid tensor.
    fn dense_max_rel_err(f: &dyn TensorEvaluator, tt: &TensorTrain, modes: &[usize]) -> f64 {
        let mut idx = vec![0usize; modes.len()];
        let mut max_err: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        loop {
            let fv = f.eval(&idx);
            let tv = tt.evaluate(&idx).unwrap();
            max_err = max_err.max((fv - tv).abs());
            max_abs = max_abs.max(fv.abs());
            // Odometer.
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < modes[k] {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == modes.len() {
                    return max_err / max_abs.max(1e-300);
                }
            }
        }
    }

    fn cfg(max_rank: usize) -> CrossConfig {
        CrossConfig { rel_tolerance: 1e-12, max_rank, max_sweeps: 6, enrichment_rank: 2, seed: 1 }
    }

    #[test]
    fn separable_function_is_rank_one() {
        let a = |i: usize| 1.0 + (i as f64) * 0.3;
        let b = |j: usize| (j as f64 * 0.2).cos();
        let f = move |idx: &[usize]| a(idx[0]) * b(idx[1]);
        let modes = [16usize, 16];
        let res = cross_build(&f, &modes, &cfg(6)).unwrap();
        assert_eq!(res.tt.ranks(), vec![1, 1, 1]);
        assert!(dense_max_rel_err(&f, &res.tt, &modes) < 1e-12);
        assert!(res.report.converged);
    }

    #[test]
    fn rank_two_sum_matches_dense_enumeration() {
        let f = |idx: &[usize]| {
            let (i, j) = (idx[0] as f64, idx[1] as f64);
            (0.1 * i).sin() * (0.2 * j).cos() + (0.05 * i) * (1.0 + 0.01 * j * j)
        };
        let modes = [32usize, 32];
        let res = cross_build(&f, &modes, &cfg(8)).unwrap();
        assert!(res.tt.max_rank() <= 2, "ranks {:?}", res.tt.ranks());
        assert!(dense_max_rel_err(&f, &res.tt, &modes) <= 1e-10);
    }

    #[test]
    fn gaussian_product_is_rank_one_in_4d() {
        let grid = |i: usize| -2.0 + 4.0 * (i as f64) / 7.0;
        let f = move |idx: &[usize]| {
            let s: f64 = idx.iter().map(|&i| grid(i) * grid(i)).sum();
            (-0.5 * s).exp()
        };
        let modes = [8usize, 8, 8, 8];
        let res = cross_build(&f, &modes, &cfg(5)).unwrap();
        assert_eq!(res.tt.ranks(), vec![1, 1, 1, 1, 1]);
        assert!(dense_max_rel_err(&f, &res.tt, &modes) < 1e-10);
    }

    #[test]
    fn evaluate_all_ones_rank_one() {
        let mut cores = Vec::new();
        for _ in 0..3 {
            let mut c = Core::zeros(1, 4, 1);
            for i in 0..4 {
                c.set(0, i, 0, 1.0);
            }
            cores.push(c);
        }
        let tt = TensorTrain::new(cores).unwrap();
        assert_abs_diff_eq!(tt.evaluate(&[2, 0, 3]).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_out_of_range_errors() {
        let mut c = Core::zeros(1, 4, 1);
        c.set(0, 0, 0, 1.0);
        let tt = TensorTrain::new(vec![c]).unwrap();
        assert!(matches!(tt.evaluate(&[4]), Err(TtError::IndexOutOfRange { .. })));
    }

    fn random_tt(rng: &mut impl Rng, modes: &[usize], rank: usize) -> TensorTrain {
        let d = modes.len();
        let mut cores = Vec::new();
        for (k, &n) in modes.iter().enumerate() {
            let rl = if k == 0 { 1 } else { rank };
            let rr = if k == d - 1 { 1 } else { rank };
            let mut c = Core::zeros(rl, n, rr);
            for i in 0..n {
                for a in 0..rl {
                    for b in 0..rr {
                        c.set(a, i, b, rng.gen_range(-1.0..1.0));
                    }
                }
            }
            cores.push(c);
        }
        TensorTrain::new(cores).unwrap()
    }

    #[test]
    fn random_rank2_matches_dense_contraction_oracle() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let modes = [3usize, 4, 3, 4, 3];
        let tt = random_tt(&mut rng, &modes, 2);
        // Dense contraction oracle: explicit loop over all bond indices.
        let mut check_rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let idx: Vec<usize> =
                modes.iter().map(|&n| check_rng.gen_range(0..n)).collect();
            let mut dense = 0.0;
            let ranks = tt.ranks();
            // Enumerate all rank paths a_1..a_{d-1}.
            let mut path = vec![0usize; modes.len() - 1];
            'outer: loop {
                let mut prod = 1.0;
                for k in 0..modes.len() {
                    let a = if k == 0 { 0 } else { path[k - 1] };
                    let b = if k == modes.len() - 1 { 0 } else { path[k] };
                    prod *= tt.cores()[k].get(a, idx[k], b);
                }
                dense += prod;
                for k in 0..path.len() {
                    path[k] += 1;
                    if path[k] < ranks[k + 1] {
                        continue 'outer;
                    }
                    path[k] = 0;
                }
                break;
            }
            assert_abs_diff_eq!(tt.evaluate(&idx).unwrap(), dense, epsilon = 1e-12);
        }
    }

    #[test]
    fn round_recovers_padded_rank_one() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let modes = [5usize, 6, 5];
        let base = random_tt(&mut rng, &modes, 1);
        // Pad to rank 4 with zero blocks.
        let mut cores = Vec::new();
        for (k, c) in base.cores().iter().enumerate() {
            let rl = if k == 0 { 1 } else { 4 };
            let rr = if k == modes.len() - 1 { 1 } else { 4 };
            let mut p = Core::zeros(rl, c.n, rr);
            for i in 0..c.n {
                p.set(0, i, 0, c.get(0, i, 0));
            }
            cores.push(p);
        }
        let padded = TensorTrain::new(cores).unwrap();
        let rounded = round(&padded, 1e-12).unwrap();
        assert_eq!(rounded.ranks(), vec![1, 1, 1, 1]);
        for _ in 0..50 {
            let idx: Vec<usize> = modes.iter().map(|&n| rng.gen_range(0..n)).collect();
            assert_abs_diff_eq!(
                rounded.evaluate(&idx).unwrap(),
                base.evaluate(&idx).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn round_sum_of_three_rank_ones_gives_rank_at_most_three() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let modes = [6usize, 7, 6, 5];
        let parts: Vec<TensorTrain> =
            (0..3).map(|_| random_tt(&mut rng, &modes, 1)).collect();
        // Assemble the sum as a block-diagonal rank-3 train padded to 5.
        let d = modes.len();
        let mut cores = Vec::new();
        for k in 0..d {
            let rl = if k == 0 { 1 } else { 5 };
            let rr = if k == d - 1 { 1 } else { 5 };
            let mut c = Core::zeros(rl, modes[k], rr);
            for (p, part) in parts.iter().enumerate() {
                for i in 0..modes[k] {
                    let (a, b) = (if k == 0 { 0 } else { p }, if k == d - 1 { 0 } else { p });
                    c.set(a, i, b, part.cores()[k].get(0, i, 0));
                }
            }
            cores.push(c);
        }
        let sum = TensorTrain::new(cores).unwrap();
        let rounded = round(&sum, 1e-12).unwrap();
        assert!(rounded.max_rank() <= 3, "ranks {:?}", rounded.ranks());
        // Error check vs the dense SVD-free oracle: direct evaluation of the sum.
        for _ in 0..100 {
            let idx: Vec<usize> = modes.iter().map(|&n| rng.gen_range(0..n)).collect();
            let want: f64 = parts.iter().map(|p| p.evaluate(&idx).unwrap()).sum();
            assert_abs_diff_eq!(rounded.evaluate(&idx).unwrap(), want, epsilon = 1e-9);
        }
    }

    #[test]
    fn round_tolerance_zero_is_identity() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let modes = [4usize, 5, 4];
        let tt = random_tt(&mut rng, &modes, 3);
        let same = round(&tt, 0.0).unwrap();
        for _ in 0..30 {
            let idx: Vec<usize> = modes.iter().map(|&n| rng.gen_range(0..n)).collect();
            let a = tt.evaluate(&idx).unwrap();
            let b = same.evaluate(&idx).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn round_error_within_tolerance_on_dense_tensor() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        let modes = [5usize, 6, 5, 4];
        let tt = random_tt(&mut rng, &modes, 4);
        for tol in [1e-2, 1e-6] {
            let r = round(&tt, tol).unwrap();
            assert!(r.ranks().iter().zip(tt.ranks()).all(|(a, b)| *a <= b));
            // Dense Frobenius error.
            let mut num = 0.0;
            let mut den = 0.0;
            let mut idx = vec![0usize; modes.len()];
            'outer: loop {
                let a = tt.evaluate(&idx).unwrap();
                let b = r.evaluate(&idx).unwrap();
                num += (a - b) * (a - b);
                den += a * a;
                for k in 0..modes.len() {
                    idx[k] += 1;
                    if idx[k] < modes[k] {
                        continue 'outer;
                    }
                    idx[k] = 0;
                }
                break;
            }
            assert!(num.sqrt() <= tol * den.sqrt() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn cross_eval_count_scales_as_d_n_r_squared() {
        // Instrumented bound: evaluations <= C * d * n * r_max^2 with C fixed.
        let f = |idx: &[usize]| {
            let s: f64 = idx.iter().map(|&i| i as f64 / 10.0).sum();
            (1.0 + s).ln_1p() + (0.3 * s).sin()
        };
        for (d, n) in [(4usize, 12usize), (6, 16)] {
            let modes = vec![n; d];
            let c = CrossConfig {
                rel_tolerance: 1e-8,
                max_rank: 6,
                max_sweeps: 4,
                enrichment_rank: 2,
                seed: 2,
            };
            let res = cross_build(&f, &modes, &c).unwrap();
            let r = res.tt.max_rank().max(1) as u64;
            let bound = 40 * (d as u64) * (n as u64) * r * r;
            assert!(
                res.report.evaluations <= bound,
                "evals {} exceed bound {bound} (d={d}, n={n}, r={r})",
                res.report.evaluations
            );
        }
    }
}
