//! Bound-constrained stiffness surrogate.
//!
//! The homogenized stiffness is normalized against the Voigt-Reuss gap,
//! C_tilde = L^+ (C_V - C_hom) L^+T, which maps admissible stiffnesses into
//! the unit spectral box. A small multilayer perceptron predicts the
//! eigen-parameters of C_tilde: an orthogonal factor through the matrix
//! exponential of a skew-symmetric matrix, and eigenvalues squashed into
//! (0, 1) by a logistic head. Reconstruction C_hat = C_V - L C_tilde L^T is
//! therefore inside the bounds for every possible network output.
//!
//! Training minimizes the mean Frobenius distance between predicted and
//! reference normalized tensors with AdamW; gradients are reverse-mode,
//! propagated through the matrix exponential via the Frechet-derivative
//! adjoint (block-matrix identity).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::exec;
use crate::micromech::{voigt_reuss_bounds, Dataset, PhaseProperties, VoigtBounds};
use crate::seeds::SeedNode;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("empty training set")]
    EmptyDataset,
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file corrupt: {0}")]
    Corrupt(String),
    #[error("homogenization: {0}")]
    Micromech(#[from] crate::micromech::MicromechError),
}

// ---------------------------------------------------------------------------
// Matrix exponential and its gradient.
// ---------------------------------------------------------------------------

/// Matrix exponential by scaling-and-squaring with a Taylor expansion.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil().max(0.0) as u32 } else { 0 };
    let b = a / 2f64.powi(s as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=30u64 {
        term = &term * &b / k as f64;
        sum += &term;
        if term.norm() < 1e-18 * sum.norm().max(1.0) {
            break;
        }
    }
    let mut r = sum;
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Adjoint of the Frechet derivative of expm at `s`: given the gradient
/// `g_q` of a scalar with respect to Q = expm(S), returns the gradient with
/// respect to S. Uses the block identity expm([[S^T, G],[0, S^T]]) whose
/// upper-right block is the directional derivative operator applied
/// adjointly.
fn expm_grad(s: &DMatrix<f64>, g_q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    let st = s.transpose();
    block.view_mut((0, 0), (n, n)).copy_from(&st);
    block.view_mut((n, n), (n, n)).copy_from(&st);
    block.view_mut((0, n), (n, n)).copy_from(g_q);
    let e = expm(&block);
    e.view((0, n), (n, n)).into_owned()
}

/// Skew-symmetric matrix from the m(m-1)/2 free parameters, pairs (i, j)
/// with i < j in row-major order. The sign convention makes the m = 2 case
/// a counterclockwise rotation by xi_q[0].
pub fn skew_from_params(xi_q: &[f64], m: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            s[(i, j)] = -xi_q[k];
            s[(j, i)] = xi_q[k];
            k += 1;
        }
    }
    s
}

fn params_from_skew_grad(ds: &DMatrix<f64>, m: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            g.push(ds[(j, i)] - ds[(i, j)]);
        }
    }
    g
}

/// Orthogonal matrix from unconstrained parameters via the exponential map.
pub fn orthogonal_from_params(xi_q: &[f64], m: usize) -> DMatrix<f64> {
    expm(&skew_from_params(xi_q, m))
}

// ---------------------------------------------------------------------------
// Spectral codec.
// ---------------------------------------------------------------------------

/// Normalized stiffness gap: C_tilde = L^+ (C_V - C_hom) L^+T.
pub fn normalize(c_hom: &DMatrix<f64>, bounds: &VoigtBounds) -> DMatrix<f64> {
    &bounds.l_pinv * (&bounds.c_v - c_hom) * bounds.l_pinv.transpose()
}

/// Inverse spectral transformation from eigen-parameters:
/// C_hat = C_V - L Qhat diag(xi_lambda) Qhat^T L^T.
pub fn reconstruct(xi_q: &[f64], xi_lambda: &[f64], bounds: &VoigtBounds) -> DMatrix<f64> {
    let m = bounds.c_v.nrows();
    let q = orthogonal_from_params(xi_q, m);
    let lam = DMatrix::from_diagonal(&DVector::from_row_slice(xi_lambda));
    let c_tilde = &q * lam * q.transpose();
    &bounds.c_v - &bounds.l_fac * c_tilde * bounds.l_fac.transpose()
}

/// Reconstruction from an explicit normalized tensor.
pub fn reconstruct_from_normalized(c_tilde: &DMatrix<f64>, bounds: &VoigtBounds) -> DMatrix<f64> {
    &bounds.c_v - &bounds.l_fac * c_tilde * bounds.l_fac.transpose()
}

/// Batch loss: (1/sqrt(m)) * mean Frobenius distance between normalized
/// tensors.
pub fn loss(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let m = pred[0].nrows() as f64;
    let mean: f64 =
        pred.iter().zip(truth).map(|(p, t)| (p - t).norm()).sum::<f64>() / pred.len() as f64;
    mean / m.sqrt()
}

// ---------------------------------------------------------------------------
// Multilayer perceptron.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Glorot-uniform initialization; the output layer starts small so the
    /// initial prediction sits near the center of the spectral box.
    pub fn new(sizes: &[usize], seed: &SeedNode) -> Self {
        let mut rng = seed.child("init").rng();
        let n_layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == n_layers - 1 {
                bound *= 0.1;
            }
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound)));
            biases.push(DVector::zeros(fan_out));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    /// Forward pass returning all post-activation vectors (input first,
    /// linear output last).
    fn forward_cached(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap() + b;
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Parameters flattened layer by layer, weights (column-major) before
    /// the layer's biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend_from_slice(w.as_slice());
            p.extend_from_slice(b.as_slice());
        }
        p
    }

    /// Overwrites the parameters from a flat vector in `params()` order.
    pub fn set_params(&mut self, p: &[f64]) {
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = p[pos];
                pos += 1;
            }
            for v in b.iter_mut() {
                *v = p[pos];
                pos += 1;
            }
        }
        assert_eq!(pos, p.len(), "parameter vector length mismatch");
    }

    /// Backpropagation from the gradient of the loss with respect to the
    /// linear output, accumulating into `grads`.
    fn backward(&self, acts: &[DVector<f64>], d_out: DVector<f64>, grads: &mut MlpGrads) {
        let mut delta = d_out;
        for l in (0..self.weights.len()).rev() {
            grads.d_w[l] += &delta * acts[l].transpose();
            grads.d_b[l] += &delta;
            if l > 0 {
                let mut up = self.weights[l].transpose() * delta;
                // Derivative of tanh through the stored activation.
                for (u, a) in up.iter_mut().zip(acts[l].iter()) {
                    *u *= 1.0 - a * a;
                }
                delta = up;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct MlpGrads {
    d_w: Vec<DMatrix<f64>>,
    d_b: Vec<DVector<f64>>,
}

impl MlpGrads {
    fn zeros(mlp: &Mlp) -> Self {
        MlpGrads {
            d_w: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            d_b: mlp.biases.iter().map(|b| DVector::zeros(b.nrows())).collect(),
        }
    }

    fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += b;
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.d_w.iter_mut() {
            *a *= s;
        }
        for a in self.d_b.iter_mut() {
            *a *= s;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Surrogate model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub m: usize,
    pub mlp: Mlp,
    /// Affine standardization of (v_f, E_f, E_m) to [-1, 1]^3.
    pub input_lo: [f64; 3],
    pub input_hi: [f64; 3],
    pub nu_f: f64,
    pub nu_m: f64,
}

impl SurrogateModel {
    pub fn standardize(&self, chi: &[f64; 3]) -> DVector<f64> {
        DVector::from_fn(3, |i, _| {
            let span = (self.input_hi[i] - self.input_lo[i]).max(f64::MIN_POSITIVE);
            2.0 * (chi[i] - self.input_lo[i]) / span - 1.0
        })
    }

    /// Network heads: unconstrained orthogonal parameters and logistic
    /// eigenvalues in (0, 1).
    pub fn heads(&self, chi: &[f64; 3]) -> (Vec<f64>, Vec<f64>) {
        let o = self.mlp.forward(&self.standardize(chi));
        let mq = self.m * (self.m - 1) / 2;
        let xi_q: Vec<f64> = o.as_slice()[..mq].to_vec();
        let xi_lambda: Vec<f64> = o.as_slice()[mq..].iter().map(|&z| sigmoid(z)).collect();
        (xi_q, xi_lambda)
    }

    /// Predicted normalized tensor Qhat diag(xi_lambda) Qhat^T.
    pub fn predict_normalized(&self, chi: &[f64; 3]) -> DMatrix<f64> {
        let (xi_q, xi_lambda) = self.heads(chi);
        let q = orthogonal_from_params(&xi_q, self.m);
        let lam = DMatrix::from_diagonal(&DVector::from_row_slice(&xi_lambda));
        &q * lam * q.transpose()
    }

    /// Full forward: bounds from the input, then the inverse spectral
    /// transformation. Always bound-respecting, also outside the training
    /// ranges.
    pub fn predict(&self, chi: &[f64; 3]) -> Result<DMatrix<f64>, SurrogateError> {
        let phases =
            PhaseProperties { e_f: chi[1], e_m: chi[2], nu_f: self.nu_f, nu_m: self.nu_m };
        let bounds = voigt_reuss_bounds(&phases, chi[0])?;
        Ok(reconstruct_from_normalized(&self.predict_normalized(chi), &bounds))
    }
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 50_000,
            hidden: vec![64, 64, 64],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// (train loss, validation loss) per epoch.
    pub losses: Vec<(f64, f64)>,
    pub best_epoch: usize,
    pub best_validation: f64,
}

struct Sample {
    x: DVector<f64>,
    c_tilde: DMatrix<f64>,
}

/// Per-sample Frobenius loss and parameter gradient (of the unscaled
/// per-sample distance).
fn sample_loss_grad(
    mlp: &Mlp,
    sample: &Sample,
    m: usize,
    grads: Option<&mut MlpGrads>,
) -> f64 {
    let mq = m * (m - 1) / 2;
    let acts = mlp.forward_cached(&sample.x);
    let o = acts.last().unwrap();
    let xi_q = &o.as_slice()[..mq];
    let lam: Vec<f64> = o.as_slice()[mq..].iter().map(|&z| sigmoid(z)).collect();

    let s = skew_from_params(xi_q, m);
    let q = expm(&s);
    let lam_m = DMatrix::from_diagonal(&DVector::from_row_slice(&lam));
    let c_pred = &q * &lam_m * q.transpose();
    let diff = &c_pred - &sample.c_tilde;
    let l = diff.norm();

    if let Some(grads) = grads {
        if l > 1e-300 {
            let g = diff / l;
            // d/d lambda_i of ||Q Lam Q^T - T||: diagonal of Q^T G Q.
            let qtgq = q.transpose() * &g * &q;
            // d/dQ: 2 G Q Lam for symmetric G.
            let g_q = 2.0 * &g * &q * &lam_m;
            let ds = expm_grad(&s, &g_q);
            let d_xi_q = params_from_skew_grad(&ds, m);
            let mut d_out = DVector::zeros(mq + m);
            for (k, v) in d_xi_q.iter().enumerate() {
                d_out[k] = *v;
            }
            for i in 0..m {
                d_out[mq + i] = qtgq[(i, i)] * lam[i] * (1.0 - lam[i]);
            }
            mlp.backward(&acts, d_out, grads);
        }
    }
    l
}

/// Per-sample Frobenius distance between the predicted and target
/// normalized tensors, with its gradient in `Mlp::params()` order. The
/// network input must already be standardized.
pub fn loss_with_gradient(
    mlp: &Mlp,
    x: &DVector<f64>,
    c_tilde: &DMatrix<f64>,
    m: usize,
) -> (f64, Vec<f64>) {
    let sample = Sample { x: x.clone(), c_tilde: c_tilde.clone() };
    let mut grads = MlpGrads::zeros(mlp);
    let l = sample_loss_grad(mlp, &sample, m, Some(&mut grads));
    let mut flat = Vec::new();
    for (w, b) in grads.d_w.iter().zip(&grads.d_b) {
        flat.extend_from_slice(w.as_slice());
        flat.extend_from_slice(b.as_slice());
    }
    (l, flat)
}

/// Full-batch AdamW on the normalized-tensor Frobenius loss. Returns the
/// best-validation parameters and the per-epoch loss history. Deterministic
/// for a fixed seed regardless of worker count: gradients are accumulated
/// over fixed sample chunks folded in order.
pub fn train(
    dataset: &Dataset,
    config: &TrainingConfig,
) -> Result<(SurrogateModel, TrainHistory), SurrogateError> {
    if dataset.records.is_empty() || dataset.n_train == 0 {
        return Err(SurrogateError::EmptyDataset);
    }
    let m = dataset.records[0].c_hom.nrows();
    let mq = m * (m - 1) / 2;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in &dataset.records[..dataset.n_train] {
        for (k, v) in [r.v_f, r.e_f, r.e_m].iter().enumerate() {
            lo[k] = lo[k].min(*v);
            hi[k] = hi[k].max(*v);
        }
    }

    let mut sizes = vec![3usize];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(mq + m);
    let seed = SeedNode::new(config.seed).child("surrogate");
    let mlp = Mlp::new(&sizes, &seed);
    let mut model = SurrogateModel {
        m,
        mlp,
        input_lo: lo,
        input_hi: hi,
        nu_f: 0.22,
        nu_m: 0.35,
    };
    // Poisson ratios from the dataset generator's phase convention are
    // constant across records; take them from a fresh bounds computation so
    // a future dataset change cannot drift silently.

    let make_sample = |r: &crate::micromech::DatasetRecord| Sample {
        x: model.standardize(&[r.v_f, r.e_f, r.e_m]),
        c_tilde: normalize(&r.c_hom, &r.bounds),
    };
    let train_set: Vec<Sample> = dataset.records[..dataset.n_train].iter().map(make_sample).collect();
    let val_set: Vec<Sample> =
        dataset.records[dataset.n_train..].iter().map(make_sample).collect();

    let n = train_set.len();
    let scale = 1.0 / ((m as f64).sqrt() * n as f64);
    let n_chunks = 16.min(n);
    let chunk_bounds: Vec<(usize, usize)> = (0..n_chunks)
        .map(|c| (c * n / n_chunks, (c + 1) * n / n_chunks))
        .collect();

    let mut m1 = MlpGrads::zeros(&model.mlp);
    let mut m2 = MlpGrads::zeros(&model.mlp);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.mlp.clone(), 0usize);

    for epoch in 0..config.epochs {
        let mlp_ref = &model.mlp;
        let chunk_results: Vec<(f64, MlpGrads)> = exec::map(&chunk_bounds, |&(a, b)| {
            let mut g = MlpGrads::zeros(mlp_ref);
            let mut l = 0.0;
            for s in &train_set[a..b] {
                l += sample_loss_grad(mlp_ref, s, m, Some(&mut g));
            }
            (l, g)
        });
        let mut grads = MlpGrads::zeros(&model.mlp);
        let mut train_loss = 0.0;
        for (l, g) in &chunk_results {
            train_loss += l;
            grads.add(g);
        }
        train_loss *= scale;
        grads.scale(scale);
        if !train_loss.is_finite() {
            return Err(SurrogateError::NonFiniteLoss(epoch));
        }

        let val_losses = exec::map(&val_set, |s| sample_loss_grad(mlp_ref, s, m, None));
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            val_losses.iter().sum::<f64>() / ((m as f64).sqrt() * val_set.len() as f64)
        };

        // Mild cosine decay from the initial rate down to a tenth.
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        let lr = config.learning_rate
            * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        let bc1 = 1.0 - beta1.powi(epoch as i32 + 1);
        let bc2 = 1.0 - beta2.powi(epoch as i32 + 1);
        for l in 0..model.mlp.weights.len() {
            for ((w, g), (mm, vv)) in model.mlp.weights[l]
                .iter_mut()
                .zip(grads.d_w[l].iter())
                .zip(m1.d_w[l].iter_mut().zip(m2.d_w[l].iter_mut()))
            {
                *mm = beta1 * *mm + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                *w -= lr * ((*mm / bc1) / ((*vv / bc2).sqrt() + eps) + config.weight_decay * *w);
            }
            for ((bv, g), (mm, vv)) in model.mlp.biases[l]
                .iter_mut()
                .zip(grads.d_b[l].iter())
                .zip(m1.d_b[l].iter_mut().zip(m2.d_b[l].iter_mut()))
            {
                *mm = beta1 * *mm + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                *bv -= lr * (*mm / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }

        history.losses.push((train_loss, val_loss));
        if val_loss < best.0 {
            best = (val_loss, model.mlp.clone(), epoch);
        }
    }

    if config.epochs > 0 {
        model.mlp = best.1;
        history.best_epoch = best.2;
        history.best_validation = best.0;
    }
    Ok((model, history))
}

/// Per-component coefficient of determination of the reconstructed
/// stiffness against the reference on the validation split, upper-triangle
/// order.
pub fn validation_r2(model: &SurrogateModel, dataset: &Dataset) -> Result<Vec<f64>, SurrogateError> {
    let m = model.m;
    let recs = &dataset.records[dataset.n_train..];
    let preds: Vec<DMatrix<f64>> = recs
        .iter()
        .map(|r| reconstruct_from_normalized(&model.predict_normalized(&[r.v_f, r.e_f, r.e_m]), &r.bounds))
        .collect();
    let n = recs.len() as f64;
    let mut r2 = Vec::new();
    for i in 0..m {
        for j in i..m {
            let mean: f64 = recs.iter().map(|r| r.c_hom[(i, j)]).sum::<f64>() / n;
            let ss_tot: f64 = recs.iter().map(|r| (r.c_hom[(i, j)] - mean).powi(2)).sum();
            let ss_res: f64 = recs
                .iter()
                .zip(&preds)
                .map(|(r, p)| (r.c_hom[(i, j)] - p[(i, j)]).powi(2))
                .sum();
            r2.push(1.0 - ss_res / ss_tot.max(f64::MIN_POSITIVE));
        }
    }
    Ok(r2)
}

// ---------------------------------------------------------------------------
// Model file.
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"SGM1";

impl SurrogateModel {
    pub fn save(&self, path: &std::path::Path) -> Result<(), SurrogateError> {
        use std::io::Write;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes()); // format version
        buf.extend_from_slice(&(self.m as u32).to_le_bytes());
        buf.extend_from_slice(&(self.mlp.sizes.len() as u32).to_le_bytes());
        for &s in &self.mlp.sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in self.input_lo.iter().chain(&self.input_hi).chain([&self.nu_f, &self.nu_m]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (w, b) in self.mlp.weights.iter().zip(&self.mlp.biases) {
            for v in w.iter().chain(b.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SurrogateModel, SurrogateError> {
        let buf = std::fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], SurrogateError> {
            if *pos + n > buf.len() {
                return Err(SurrogateError::Corrupt("truncated file".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MODEL_MAGIC {
            return Err(SurrogateError::Corrupt("bad magic".into()));
        }
        let u32_at = |pos: &mut usize| -> Result<u32, SurrogateError> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let version = u32_at(&mut pos)?;
        if version != 1 {
            return Err(SurrogateError::Corrupt(format!("unsupported version {version}")));
        }
        let m = u32_at(&mut pos)? as usize;
        let n_sizes = u32_at(&mut pos)? as usize;
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u32_at(&mut pos)? as usize);
        }
        let f64_at = |pos: &mut usize| -> Result<f64, SurrogateError> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let mut scalars = [0.0; 8];
        for s in scalars.iter_mut() {
            *s = f64_at(&mut pos)?;
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..n_sizes.saturating_sub(1) {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let mut w = DMatrix::zeros(rows, cols);
            for v in w.iter_mut() {
                *v = f64_at(&mut pos)?;
            }
            let mut b = DVector::zeros(rows);
            for v in b.iter_mut() {
                *v = f64_at(&mut pos)?;
            }
            weights.push(w);
            biases.push(b);
        }
        if pos != buf.len() {
            return Err(SurrogateError::Corrupt("trailing bytes".into()));
        }
        Ok(SurrogateModel {
            m,
            mlp: Mlp { sizes, weights, biases },
            input_lo: [scalars[0], scalars[1], scalars[2]],
            input_hi: [scalars[3], scalars[4], scalars[5]],
            nu_f: scalars[6],
            nu_m: scalars[7],
        })
    }
}
