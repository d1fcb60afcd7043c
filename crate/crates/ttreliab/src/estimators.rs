//! Failure-probability estimators: plain Monte Carlo, transport-based
//! importance sampling for prior and posterior targets, and the rejection
//! sampler used as a brute-force posterior reference.
//!
//! All estimators draw per-sample random streams from a counter-based seed
//! tree and reduce in fixed order, so results are bit-reproducible for a
//! given seed regardless of worker count.

use thiserror::Error;

use crate::dirt::{DeepTransport, DirtTarget, TargetResponse};
use crate::exec;
use crate::normal;
use crate::seeds::SeedNode;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error("non-finite importance weight at sample {0}")]
    NonFiniteWeight(u64),
    #[error("degenerate evidence: denominator estimate is zero")]
    DegenerateEvidence,
    #[error("degenerate weights: all zero")]
    DegenerateWeights,
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// One forward-model response.
#[derive(Debug, Clone, Copy)]
pub struct ModelResponse {
    /// Unnormalized log-likelihood of the observations; `None` when the
    /// problem carries no data.
    pub log_likelihood: Option<f64>,
    /// Failure criterion value (e.g. max von Mises stress, MPa).
    pub qoi: f64,
}

/// A reliability problem: parameters follow a standard normal prior; the
/// structure fails when the quantity of interest reaches the threshold
/// (performance function g = threshold − qoi < 0... boundary has measure
/// zero, so `>` vs `>=` is immaterial).
pub trait ReliabilityModel: Sync {
    fn dim(&self) -> usize;
    /// Allowable value of the quantity of interest.
    fn threshold(&self) -> f64;
    fn evaluate(&self, theta: &[f64]) -> Result<ModelResponse, String>;
}

/// Adapter exposing a reliability model to the transport builder.
pub struct AsDirtTarget<'a>(pub &'a dyn ReliabilityModel);

impl DirtTarget for AsDirtTarget<'_> {
    fn evaluate(&self, theta: &[f64]) -> TargetResponse {
        match self.0.evaluate(theta) {
            Ok(r) => TargetResponse {
                log_likelihood: r.log_likelihood.unwrap_or(0.0),
                qoi: r.qoi,
            },
            // A failed solve inside map construction contributes zero
            // density; the estimators themselves exclude and count.
            Err(_) => TargetResponse { log_likelihood: f64::NEG_INFINITY, qoi: f64::MIN },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMode {
    PriorMc,
    PriorIs,
    PosteriorRatio,
    PosteriorRejection,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EstimateReport {
    pub mode: EstimateMode,
    pub p_hat: f64,
    pub cov: f64,
    pub ess: f64,
    pub n_samples: u64,
    pub n_model_evals: u64,
    pub n_failed_evals: u64,
    pub seed: u64,
    /// Set when the estimate could not be formed (e.g. zero acceptances).
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    /// Running estimate checkpoints (sample count, estimate).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<(u64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numerator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denominator: Option<f64>,
}

impl EstimateReport {
    fn blank(mode: EstimateMode, seed: u64) -> Self {
        EstimateReport {
            mode,
            p_hat: 0.0,
            cov: f64::INFINITY,
            ess: 0.0,
            n_samples: 0,
            n_model_evals: 0,
            n_failed_evals: 0,
            seed,
            degenerate: false,
            acceptance_rate: None,
            trace: None,
            numerator: None,
            denominator: None,
        }
    }
}

/// Effective sample size (sum w)^2 / (sum w^2).
pub fn ess(weights: &[f64]) -> Result<f64, EstimatorError> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(EstimatorError::BadArgument("weights must be finite and nonnegative".into()));
    }
    let s1: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        return Err(EstimatorError::DegenerateWeights);
    }
    Ok(s1 * s1 / s2)
}

/// Monte Carlo sample count needed for a target coefficient of variation.
pub fn required_samples(pf: f64, target_cov: f64) -> Result<u64, EstimatorError> {
    if !(pf > 0.0 && pf < 1.0) {
        return Err(EstimatorError::BadArgument("pf must be in (0, 1)".into()));
    }
    if target_cov <= 0.0 {
        return Err(EstimatorError::BadArgument("targetCov must be positive".into()));
    }
    Ok(((1.0 - pf) / (target_cov * target_cov * pf)).ceil() as u64)
}

fn sample_uniform_cube(seed: SeedNode, i: u64, d: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seed.index(i).rng();
    (0..d).map(|_| rng.gen::<f64>()).collect()
}

/// Plain Monte Carlo estimate of the prior failure probability.
pub fn mc_prior(
    model: &dyn ReliabilityModel,
    n: u64,
    seed: u64,
) -> Result<EstimateReport, EstimatorError> {
    if n == 0 {
        return Err(EstimatorError::BadArgument("N must be at least 1".into()));
    }
    let d = model.dim();
    let node = SeedNode::new(seed).child("mc-prior");
    let thr = model.threshold();
    let results = exec::map_range(n as usize, |i| {
        let u = sample_uniform_cube(node, i as u64, d);
        let theta: Vec<f64> = u.iter().map(|&x| normal::inv_cdf(x)).collect();
        match model.evaluate(&theta) {
            Ok(r) => Some(r.qoi > thr),
            Err(_) => None,
        }
    });
    let mut hits = 0u64;
    let mut failed = 0u64;
    for r in &results {
        match r {
            Some(true) => hits += 1,
            Some(false) => {}
            None => failed += 1,
        }
    }
    let n_ok = n - failed;
    let p = if n_ok > 0 { hits as f64 / n_ok as f64 } else { 0.0 };
    let mut rep = EstimateReport::blank(EstimateMode::PriorMc, seed);
    rep.p_hat = p;
    rep.cov = if p > 0.0 && p < 1.0 {
        ((1.0 - p) / (n_ok as f64 * p)).sqrt()
    } else if p == 1.0 {
        0.0
    } else {
        f64::INFINITY
    };
    rep.degenerate = hits == 0;
    rep.ess = n_ok as f64;
    rep.n_samples = n;
    rep.n_model_evals = n;
    rep.n_failed_evals = failed;
    Ok(rep)
}

/// Transport-based importance sampling of the prior failure probability.
/// The weight is prior density over transport pushforward; the exact
/// indicator (never the smoothed one) selects failures.
pub fn is_prior(
    model: &dyn ReliabilityModel,
    transport: &DeepTransport,
    n: u64,
    seed: u64,
) -> Result<EstimateReport, EstimatorError> {
    if n == 0 {
        return Err(EstimatorError::BadArgument("N must be at least 1".into()));
    }
    let d = model.dim();
    // Same base stream as mc_prior so an identity transport reduces to it.
    let node = SeedNode::new(seed).child("mc-prior");
    let thr = model.threshold();
    let results = exec::map_range(n as usize, |i| {
        let u = sample_uniform_cube(node, i as u64, d);
        let mut theta = vec![0.0; d];
        let log_push = transport.map_from_uniform(&u, &mut theta);
        let log_prior: f64 = theta.iter().map(|&t| normal::log_pdf(t)).sum();
        match model.evaluate(&theta) {
            Ok(r) => {
                let w = (log_prior - log_push).exp();
                Some((w, r.qoi > thr))
            }
            Err(_) => None,
        }
    });
    let mut x = Vec::with_capacity(results.len());
    let mut failed = 0u64;
    for (i, r) in results.iter().enumerate() {
        match r {
            Some((w, hit)) => {
                if !w.is_finite() {
                    return Err(EstimatorError::NonFiniteWeight(i as u64));
                }
                x.push(if *hit { *w } else { 0.0 });
            }
            None => failed += 1,
        }
    }
    let n_ok = x.len() as f64;
    if n_ok == 0.0 {
        let mut rep = EstimateReport::blank(EstimateMode::PriorIs, seed);
        rep.degenerate = true;
        rep.n_samples = n;
        rep.n_model_evals = n;
        rep.n_failed_evals = failed;
        return Ok(rep);
    }
    let mean = x.iter().sum::<f64>() / n_ok;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_ok - 1.0).max(1.0);
    let mut rep = EstimateReport::blank(EstimateMode::PriorIs, seed);
    rep.p_hat = mean;
    rep.cov = if mean > 0.0 { (var / n_ok).sqrt() / mean } else { f64::INFINITY };
    rep.degenerate = mean == 0.0;
    rep.ess = ess(&x).unwrap_or(0.0);
    rep.n_samples = n;
    rep.n_model_evals = n;
    rep.n_failed_evals = failed;
    Ok(rep)
}

/// Posterior failure probability as a ratio of two importance-sampling
/// estimates sharing one reference stream: the numerator uses the
/// failure-zoomed map (targeting indicator x likelihood x prior), the
/// denominator the posterior map (likelihood x prior). Uncertainty by
/// joint nonparametric bootstrap.
pub fn is_posterior_ratio(
    model: &dyn ReliabilityModel,
    p_map: &DeepTransport,
    q_map: &DeepTransport,
    n: u64,
    seed: u64,
    n_bootstrap: usize,
) -> Result<EstimateReport, EstimatorError> {
    if n == 0 {
        return Err(EstimatorError::BadArgument("N must be at least 1".into()));
    }
    let d = model.dim();
    let node = SeedNode::new(seed).child("ratio");
    let thr = model.threshold();

    let one = |transport: &DeepTransport, zoom: bool| -> Vec<Option<f64>> {
        exec::map_range(n as usize, |i| {
            let u = sample_uniform_cube(node, i as u64, d);
            let mut theta = vec![0.0; d];
            let log_push = transport.map_from_uniform(&u, &mut theta);
            let log_prior: f64 = theta.iter().map(|&t| normal::log_pdf(t)).sum();
            match model.evaluate(&theta) {
                Ok(r) => {
                    let ll = r.log_likelihood.unwrap_or(0.0);
                    let w = (log_prior + ll - log_push).exp();
                    Some(if zoom && !(r.qoi > thr) { 0.0 } else { w })
                }
                Err(_) => None,
            }
        })
    };
    let num = one(p_map, true);
    let den = one(q_map, false);

    let mut xs = Vec::with_capacity(n as usize);
    let mut failed = 0u64;
    for (i, (a, b)) in num.iter().zip(&den).enumerate() {
        match (a, b) {
            (Some(wa), Some(wb)) => {
                if !wa.is_finite() || !wb.is_finite() {
                    return Err(EstimatorError::NonFiniteWeight(i as u64));
                }
                xs.push((*wa, *wb));
            }
            _ => failed += 1,
        }
    }
    if xs.is_empty() {
        return Err(EstimatorError::DegenerateEvidence);
    }
    let m = xs.len() as f64;
    let p_sum: f64 = xs.iter().map(|x| x.0).sum();
    let q_sum: f64 = xs.iter().map(|x| x.1).sum();
    if q_sum == 0.0 {
        return Err(EstimatorError::DegenerateEvidence);
    }
    let p_hat = p_sum / q_sum;

    // Joint bootstrap of the ratio.
    use rand::Rng;
    let mut brng = node.child("bootstrap").rng();
    let mut ratios = Vec::with_capacity(n_bootstrap);
    for _ in 0..n_bootstrap {
        let (mut sp, mut sq) = (0.0, 0.0);
        for _ in 0..xs.len() {
            let (a, b) = xs[brng.gen_range(0..xs.len())];
            sp += a;
            sq += b;
        }
        if sq > 0.0 {
            ratios.push(sp / sq);
        }
    }
    let cov = if ratios.len() > 1 && p_hat > 0.0 {
        let rm = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let rv = ratios.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>()
            / (ratios.len() - 1) as f64;
        rv.sqrt() / p_hat
    } else {
        f64::INFINITY
    };

    let mut rep = EstimateReport::blank(EstimateMode::PosteriorRatio, seed);
    rep.p_hat = p_hat;
    rep.cov = cov;
    rep.degenerate = p_sum == 0.0;
    rep.ess = ess(&xs.iter().map(|x| x.1).collect::<Vec<_>>()).unwrap_or(0.0);
    rep.n_samples = n;
    rep.n_model_evals = 2 * n;
    rep.n_failed_evals = failed;
    rep.numerator = Some(p_sum / m);
    rep.denominator = Some(q_sum / m);
    Ok(rep)
}

/// Brute-force posterior reference: rejection sampling from the prior with
/// an inflated likelihood bound, then the failure fraction over accepted
/// draws. Keeps a running-estimate trace.
pub fn rejection_posterior_reference(
    model: &dyn ReliabilityModel,
    n_proposals: u64,
    batch: usize,
    seed: u64,
) -> Result<EstimateReport, EstimatorError> {
    if n_proposals == 0 || batch == 0 {
        return Err(EstimatorError::BadArgument("need proposals and a batch size".into()));
    }
    let d = model.dim();
    let node = SeedNode::new(seed).child("rejection");

    // Likelihood supremum from prior probes, inflated 10x.
    let n_probe = 2000u64.min(n_proposals);
    let probe_node = node.child("probes");
    let probe_ll = exec::map_range(n_probe as usize, |i| {
        let u = sample_uniform_cube(probe_node, i as u64, d);
        let theta: Vec<f64> = u.iter().map(|&x| normal::inv_cdf(x)).collect();
        model
            .evaluate(&theta)
            .ok()
            .and_then(|r| r.log_likelihood)
            .unwrap_or(f64::NEG_INFINITY)
    });
    let ll_max = probe_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !ll_max.is_finite() {
        return Err(EstimatorError::Model("no finite likelihood on probe set".into()));
    }
    let log_bound = ll_max + 10f64.ln();

    let thr = model.threshold();
    let prop_node = node.child("proposals");
    let mut accepted = 0u64;
    let mut fail_hits = 0u64;
    let mut failed = 0u64;
    let mut trace: Vec<(u64, f64)> = Vec::new();
    let trace_every = (n_proposals / 200).max(1);
    let mut next_trace = trace_every;
    let mut done = 0u64;
    while done < n_proposals {
        let this = batch.min((n_proposals - done) as usize);
        let base = done;
        let results = exec::map_range(this, |j| {
            use rand::Rng;
            let i = base + j as u64;
            let mut rng = prop_node.index(i).rng();
            let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let theta: Vec<f64> = u.iter().map(|&x| normal::inv_cdf(x)).collect();
            let accept_u: f64 = rng.gen();
            match model.evaluate(&theta) {
                Ok(r) => {
                    let ll = r.log_likelihood.unwrap_or(0.0);
                    let acc = accept_u.ln() < ll - log_bound;
                    Some((acc, r.qoi > thr))
                }
                Err(_) => None,
            }
        });
        for r in &results {
            done += 1;
            match r {
                Some((true, hit)) => {
                    accepted += 1;
                    if *hit {
                        fail_hits += 1;
                    }
                }
                Some((false, _)) => {}
                None => failed += 1,
            }
            if done >= next_trace {
                let p = if accepted > 0 { fail_hits as f64 / accepted as f64 } else { 0.0 };
                trace.push((done, p));
                next_trace += trace_every;
            }
        }
    }

    let mut rep = EstimateReport::blank(EstimateMode::PosteriorRejection, seed);
    rep.n_samples = n_proposals;
    rep.n_model_evals = n_proposals + n_probe;
    rep.n_failed_evals = failed;
    rep.acceptance_rate = Some(accepted as f64 / n_proposals as f64);
    rep.trace = Some(trace);
    if accepted == 0 {
        rep.degenerate = true;
        return Ok(rep);
    }
    let p = fail_hits as f64 / accepted as f64;
    rep.p_hat = p;
    rep.ess = accepted as f64;
    rep.cov = if p > 0.0 && p < 1.0 {
        ((1.0 - p) / (accepted as f64 * p)).sqrt()
    } else if p == 1.0 {
        0.0
    } else {
        f64::INFINITY
    };
    rep.degenerate = fail_hits == 0;
    Ok(rep)
}

/// Analytic test problem: standard normal parameters, failure when the
/// normalized sum exceeds the threshold, so the failure probability is
/// the normal tail at the threshold in any dimension.
pub struct LinearGaussianProblem {
    pub dim: usize,
    pub beta: f64,
}

impl ReliabilityModel for LinearGaussianProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn threshold(&self) -> f64 {
        self.beta
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ModelResponse, String> {
        let qoi = theta.iter().sum::<f64>() / (self.dim as f64).sqrt();
        Ok(ModelResponse { log_likelihood: None, qoi })
    }
}

/// One-dimensional conjugate Gaussian problem: prior N(0,1), one
/// observation y with unit noise, posterior N(y/2, 1/2), failure theta >
/// threshold. Closed-form posterior tail for cross-checks.
pub struct ConjugateGaussianProblem {
    pub y: f64,
    pub failure_threshold: f64,
}

impl ConjugateGaussianProblem {
    pub fn posterior_tail(&self) -> f64 {
        let mean = 0.5 * self.y;
        let sd = 0.5f64.sqrt();
        1.0 - normal::cdf((self.failure_threshold - mean) / sd)
    }
}

impl ReliabilityModel for ConjugateGaussianProblem {
    fn dim(&self) -> usize {
        1
    }

    fn threshold(&self) -> f64 {
        self.failure_threshold
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ModelResponse, String> {
        let r = self.y - theta[0];
        Ok(ModelResponse { log_likelihood: Some(-0.5 * r * r), qoi: theta[0] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirt::{BridgingKind, DirtConfig, SmoothedIndicator};
    use crate::sirt::SirtConfig;
    use crate::tt::CrossConfig;
    use approx::assert_abs_diff_eq;

    struct ConstantProblem {
        qoi: f64,
        like: Option<f64>,
    }

    impl ReliabilityModel for ConstantProblem {
        fn dim(&self) -> usize {
            2
        }
        fn threshold(&self) -> f64 {
            0.0
        }
        fn evaluate(&self, _: &[f64]) -> Result<ModelResponse, String> {
            Ok(ModelResponse { log_likelihood: self.like, qoi: self.qoi })
        }
    }

    #[test]
    fn mc_prior_trivial_bounds() {
        let always = ConstantProblem { qoi: 1.0, like: None };
        let never = ConstantProblem { qoi: -1.0, like: None };
        let rep = mc_prior(&always, 100, 1).unwrap();
        assert_abs_diff_eq!(rep.p_hat, 1.0);
        assert_abs_diff_eq!(rep.cov, 0.0);
        let rep = mc_prior(&never, 100, 1).unwrap();
        assert_abs_diff_eq!(rep.p_hat, 0.0);
        assert!(rep.degenerate);
    }

    #[test]
    fn mc_prior_matches_normal_tail() {
        let problem = LinearGaussianProblem { dim: 1, beta: 2.0 };
        let rep = mc_prior(&problem, 1_000_000, 42).unwrap();
        let exact = normal::cdf(-2.0);
        let sigma = (exact * (1.0 - exact) / 1e6).sqrt();
        assert!(
            (rep.p_hat - exact).abs() < 3.0 * sigma,
            "pHat {} vs exact {exact}",
            rep.p_hat
        );
    }

    #[test]
    fn is_prior_with_identity_transport_reduces_to_mc() {
        let problem = LinearGaussianProblem { dim: 3, beta: 1.0 };
        let t = DeepTransport::identity(3);
        let a = mc_prior(&problem, 20_000, 7).unwrap();
        let b = is_prior(&problem, &t, 20_000, 7).unwrap();
        assert_eq!(a.p_hat.to_bits(), b.p_hat.to_bits());
    }

    #[test]
    fn ratio_with_identity_maps_and_flat_likelihood_cancels() {
        let problem = LinearGaussianProblem { dim: 2, beta: 1.0 };
        let t = DeepTransport::identity(2);
        let rep = is_posterior_ratio(&problem, &t, &t, 20_000, 5, 100).unwrap();
        // With matched streams and unit weights this is the plain Monte
        // Carlo fraction on the same draws.
        let node = SeedNode::new(5).child("ratio");
        let mut hits = 0u64;
        for i in 0..20_000u64 {
            let u = sample_uniform_cube(node, i, 2);
            let s: f64 = u.iter().map(|&x| normal::inv_cdf(x)).sum();
            if s / 2f64.sqrt() > 1.0 {
                hits += 1;
            }
        }
        assert_abs_diff_eq!(rep.p_hat, hits as f64 / 20_000.0, epsilon = 1e-13);
    }

    #[test]
    fn required_samples_formula() {
        assert_eq!(required_samples(1e-5, 0.1).unwrap(), 9_999_900);
        assert_eq!(required_samples(0.5, 0.1).unwrap(), 100);
        // pf -> 1 drives the count to zero.
        assert_eq!(required_samples(1.0 - 1e-12, 0.1).unwrap(), 1);
        assert!(required_samples(0.0, 0.1).is_err());
    }

    #[test]
    fn ess_examples() {
        assert_abs_diff_eq!(ess(&vec![1.0; 100]).unwrap(), 100.0);
        assert_abs_diff_eq!(ess(&[0.0, 3.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(ess(&[1.0, 1.0, 2.0]).unwrap(), 16.0 / 6.0, epsilon = 1e-14);
        assert!(matches!(ess(&[0.0, 0.0]), Err(EstimatorError::DegenerateWeights)));
    }

    #[test]
    fn rejection_with_flat_likelihood_accepts_ten_percent() {
        let problem = ConstantProblem { qoi: 1.0, like: Some(0.0) };
        let rep = rejection_posterior_reference(&problem, 50_000, 4096, 3).unwrap();
        let acc = rep.acceptance_rate.unwrap();
        assert!((acc - 0.1).abs() < 0.005, "acceptance {acc}");
        assert_abs_diff_eq!(rep.p_hat, 1.0);
        assert!(rep.trace.as_ref().unwrap().len() >= 100);
    }

    fn conjugate_maps(
        problem: &ConjugateGaussianProblem,
        seed: u64,
    ) -> (DeepTransport, DeepTransport) {
        let sirt = SirtConfig {
            cross: CrossConfig {
                rel_tolerance: 1e-8,
                max_rank: 1,
                max_sweeps: 2,
                enrichment_rank: 1,
                seed,
            },
            tau_rel: 1e-8,
        };
        let q_cfg = DirtConfig {
            sirt: sirt.clone(),
            n_nodes: 60,
            bridging: BridgingKind::Tempering,
            seed,
            ..DirtConfig::default()
        };
        let target = AsDirtTarget(problem);
        let q = DeepTransport::build(&target, 1, &q_cfg).unwrap();
        let ind = SmoothedIndicator {
            threshold: problem.failure_threshold,
            scale: problem.failure_threshold,
            gamma_star: 50.0,
            n_levels: 3,
        };
        let p_cfg = DirtConfig {
            sirt,
            n_nodes: 60,
            bridging: BridgingKind::Combined(ind),
            seed: seed + 1,
            ..DirtConfig::default()
        };
        let p = q.transport.extend(&target, &p_cfg).unwrap();
        (p.transport, q.transport)
    }

    #[test]
    fn conjugate_ratio_matches_closed_form_and_rejection() {
        let problem = ConjugateGaussianProblem { y: 1.0, failure_threshold: 2.0 };
        let exact = problem.posterior_tail();
        assert_abs_diff_eq!(exact, 1.6947e-2, epsilon = 5e-6);

        let (p_map, q_map) = conjugate_maps(&problem, 19);
        let ratio = is_posterior_ratio(&problem, &p_map, &q_map, 20_000, 23, 500).unwrap();
        assert!(
            (ratio.p_hat - exact).abs() <= 3.0 * ratio.cov * ratio.p_hat,
            "ratio {} cov {} vs exact {exact}",
            ratio.p_hat,
            ratio.cov
        );

        let rej = rejection_posterior_reference(&problem, 200_000, 8192, 29).unwrap();
        let combined = (ratio.cov * ratio.p_hat).hypot(rej.cov * rej.p_hat);
        assert!(
            (ratio.p_hat - rej.p_hat).abs() <= 3.0 * combined,
            "ratio {} vs rejection {} (combined sigma {combined})",
            ratio.p_hat,
            rej.p_hat
        );
    }

    #[test]
    fn is_prior_mean_is_unbiased_over_repetitions() {
        // Identity transport keeps each repetition cheap; the statistical
        // contract is about the estimator plumbing, not the map quality.
        let problem = LinearGaussianProblem { dim: 2, beta: 1.5 };
        let t = DeepTransport::identity(2);
        let exact = normal::cdf(-1.5);
        let reps = 200;
        let n = 2000u64;
        let mut estimates = Vec::with_capacity(reps);
        for k in 0..reps {
            estimates.push(is_prior(&problem, &t, n, 1000 + k as u64).unwrap().p_hat);
        }
        let mean = estimates.iter().sum::<f64>() / reps as f64;
        let se = (exact * (1.0 - exact) / (n as f64 * reps as f64)).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mean {mean} vs exact {exact} (se {se})"
        );
    }
}
