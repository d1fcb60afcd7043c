//! Deep inverse Rosenblatt transport.
//!
//! A sequence of squared tensor-train densities on the unit cube is
//! composed into one map from the uniform reference to the target. Each
//! layer approximates the ratio between consecutive bridging densities, so
//! the cross targets stay O(1) even when the final target is a rare-event
//! zoom of the prior. Bridging is either likelihood tempering (adaptive
//! exponent ladder driven by an effective-sample-size criterion), a
//! smoothed failure indicator with a geometric sharpness ladder, or the
//! two chained together.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::normal;
use crate::sirt::{Basis1D, DomainMap, NodeLayout, SirtConfig, SirtError, SquaredFttDensity};
use crate::tt::{CrossIndexSets, CrossReport};

#[derive(Debug, Error)]
pub enum DirtError {
    #[error(transparent)]
    Sirt(#[from] SirtError),
    #[error("invalid transport configuration: {0}")]
    BadConfig(String),
    #[error("bridging did not reach the target within {0} layers")]
    TooManyLayers(usize),
}

/// One model response: everything a bridging density can ask for.
#[derive(Debug, Clone, Copy)]
pub struct TargetResponse {
    /// Unnormalized log-likelihood; zero when the problem has no data.
    pub log_likelihood: f64,
    /// Scalar failure criterion (failure when qoi exceeds the threshold).
    pub qoi: f64,
}

/// The expensive forward model seen by the transport builder. Parameters
/// follow the standard normal reference.
pub trait DirtTarget: Sync {
    fn evaluate(&self, theta: &[f64]) -> TargetResponse;
}

impl<F> DirtTarget for F
where
    F: Fn(&[f64]) -> TargetResponse + Sync,
{
    fn evaluate(&self, theta: &[f64]) -> TargetResponse {
        self(theta)
    }
}

/// Sigmoid relaxation of the failure indicator 1{qoi >= threshold}.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SmoothedIndicator {
    pub threshold: f64,
    /// Length scale of the sigmoid (typically the threshold itself).
    pub scale: f64,
    /// Final (sharpest) sigmoid steepness.
    pub gamma_star: f64,
    /// Sets the entry sharpness gamma_star / 2^(n_levels - 1) of the
    /// adaptive ladder; intermediate rungs are chosen by the
    /// effective-sample-size criterion.
    pub n_levels: usize,
}

impl SmoothedIndicator {
    pub fn log_indicator(&self, qoi: f64, gamma: f64) -> f64 {
        -softplus(gamma * (self.threshold - qoi) / self.scale)
    }

    fn ladder(&self) -> Vec<f64> {
        (0..self.n_levels)
            .map(|k| self.gamma_star / 2f64.powi((self.n_levels - 1 - k) as i32))
            .collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum BridgingKind {
    /// Likelihood tempering toward the posterior.
    Tempering,
    /// Indicator sharpening toward a prior failure zoom.
    SmoothedIndicator(SmoothedIndicator),
    /// Tempering first, then indicator sharpening on the posterior.
    Combined(SmoothedIndicator),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DirtConfig {
    pub sirt: SirtConfig,
    pub n_nodes: usize,
    pub layout: NodeLayout,
    pub bridging: BridgingKind,
    /// Target effective-sample-size fraction for the adaptive ladder.
    pub ess_fraction: f64,
    pub max_layers: usize,
    /// Probe sample count for ladder adaptation.
    pub n_probe: usize,
    pub seed: u64,
}

impl Default for DirtConfig {
    fn default() -> Self {
        DirtConfig {
            sirt: SirtConfig::default(),
            n_nodes: 30,
            layout: NodeLayout::Uniform,
            bridging: BridgingKind::Tempering,
            ess_fraction: 0.5,
            max_layers: 24,
            n_probe: 300,
            seed: 0,
        }
    }
}

/// Per-layer build diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerDiag {
    pub beta: f64,
    pub gamma: f64,
    /// ESS fraction of the probe reweighting that chose this rung.
    pub ess_fraction: f64,
    pub cross: CrossReport,
}

/// Composed transport from the uniform cube to the parameter space.
#[derive(Clone)]
pub struct DeepTransport {
    dim: usize,
    layers: Vec<SquaredFttDensity>,
}

pub struct DirtBuild {
    pub transport: DeepTransport,
    pub diags: Vec<LayerDiag>,
    /// Forward-model calls consumed by the build.
    pub model_evaluations: u64,
}

struct CountingTarget<'a> {
    inner: &'a dyn DirtTarget,
    count: AtomicU64,
}

impl<'a> CountingTarget<'a> {
    fn evaluate(&self, theta: &[f64]) -> TargetResponse {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(theta)
    }
}

/// Bridging log-term b(theta) relative to the reference density.
#[derive(Clone, Copy)]
struct Bridge {
    beta: f64,
    gamma: f64,
    indicator: Option<SmoothedIndicator>,
}

impl Bridge {
    fn log_term(&self, resp: &TargetResponse) -> f64 {
        let mut b = self.beta * resp.log_likelihood;
        if let (Some(ind), true) = (self.indicator, self.gamma > 0.0) {
            b += ind.log_indicator(resp.qoi, self.gamma);
        }
        b
    }
}

impl DeepTransport {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[SquaredFttDensity] {
        &self.layers
    }

    /// Identity transport (no layers): maps the cube through the normal
    /// quantile only.
    pub fn identity(dim: usize) -> Self {
        DeepTransport { dim, layers: Vec::new() }
    }

    /// Reassembles a transport from stored layers (artifact loading).
    pub fn from_layers(dim: usize, layers: Vec<SquaredFttDensity>) -> Result<Self, DirtError> {
        if dim == 0 {
            return Err(DirtError::BadConfig("dimension must be positive".into()));
        }
        if let Some(l) = layers.iter().find(|l| l.dim() != dim) {
            return Err(DirtError::BadConfig(format!(
                "layer dimension {} does not match transport dimension {dim}",
                l.dim()
            )));
        }
        Ok(DeepTransport { dim, layers })
    }

    /// Maps a uniform cube point to parameter space. Returns the
    /// log-density of the pushforward at the mapped point.
    pub fn map_from_uniform(&self, u: &[f64], theta: &mut [f64]) -> f64 {
        assert_eq!(u.len(), self.dim);
        let mut v = u.to_vec();
        let mut log_layers = 0.0;
        let mut buf = vec![0.0; self.dim];
        for layer in self.layers.iter().rev() {
            log_layers += layer.rosenblatt_inverse(&v, &mut buf);
            std::mem::swap(&mut v, &mut buf);
        }
        let mut log_ref = 0.0;
        for (t, &vk) in theta.iter_mut().zip(&v) {
            *t = normal::inv_cdf(vk.clamp(1e-9, 1.0 - 1e-9));
            log_ref += normal::log_pdf(*t);
        }
        log_ref + log_layers
    }

    /// Log-density of the pushforward at a parameter point (forward sweep
    /// through all layers).
    pub fn log_pushforward(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.dim);
        let mut v: Vec<f64> = theta
            .iter()
            .map(|&t| normal::cdf(t).clamp(1e-9, 1.0 - 1e-9))
            .collect();
        let mut log_ref = 0.0;
        for &t in theta {
            log_ref += normal::log_pdf(t);
        }
        let mut log_layers = 0.0;
        let mut buf = vec![0.0; self.dim];
        for layer in &self.layers {
            log_layers += layer.log_density_v(&v);
            layer.rosenblatt_forward(&v, &mut buf);
            std::mem::swap(&mut v, &mut buf);
        }
        log_ref + log_layers
    }

    /// Builds a transport from scratch following the configured bridging.
    pub fn build(
        model: &dyn DirtTarget,
        dim: usize,
        config: &DirtConfig,
    ) -> Result<DirtBuild, DirtError> {
        Self::identity(dim).extend(model, config)
    }

    /// Adds layers on top of an existing transport (for example indicator
    /// sharpening on top of a posterior map). The tempering exponent is
    /// assumed to continue from the given transport's final state when the
    /// bridging starts with tempering.
    pub fn extend(&self, model: &dyn DirtTarget, config: &DirtConfig) -> Result<DirtBuild, DirtError> {
        if !(config.ess_fraction > 0.0 && config.ess_fraction < 1.0) {
            return Err(DirtError::BadConfig("essFraction must be in (0, 1)".into()));
        }
        if config.n_nodes < 2 {
            return Err(DirtError::BadConfig("need at least two nodes".into()));
        }
        let dim = self.dim;
        let counting = CountingTarget { inner: model, count: AtomicU64::new(0) };
        let mut transport = self.clone();
        let mut diags = Vec::new();
        let mut index_sets: Option<CrossIndexSets> = None;

        // Fixed probe cube points shared by every ladder decision.
        let seed = crate::seeds::SeedNode::new(config.seed).child("dirt");
        let mut rng = seed.child("probes").rng();
        use rand::Rng;
        let probes_u: Vec<Vec<f64>> = (0..config.n_probe.max(16))
            .map(|_| (0..dim).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect())
            .collect();

        // Phase plan.
        let (temper, indicator) = match &config.bridging {
            BridgingKind::Tempering => (true, None),
            BridgingKind::SmoothedIndicator(ind) => (false, Some(*ind)),
            BridgingKind::Combined(ind) => (true, Some(*ind)),
        };
        // Tempering exponent carried by the existing transport: when we
        // extend a posterior map with indicator rungs, the likelihood stays
        // at full strength.
        let mut beta = if temper && transport.layers.is_empty() { 0.0 } else { 1.0 };
        let mut prev_bridge = Bridge {
            beta: if temper { beta } else { 0.0 },
            gamma: 0.0,
            indicator: None,
        };

        // Adaptive tempering ladder.
        if temper && beta < 1.0 {
            loop {
                if diags.len() >= config.max_layers {
                    return Err(DirtError::TooManyLayers(config.max_layers));
                }
                let probes = transport.probe(&counting, &probes_u);
                // Step-size criterion: ESS of the analytic ratio between the
                // candidate and current bridging densities on probes drawn
                // through the current transport (which approximates the
                // current bridge).
                let ess = |b: f64| {
                    let logw: Vec<f64> = probes
                        .iter()
                        .map(|p| (b - beta) * p.log_likelihood)
                        .collect();
                    ess_fraction(&logw)
                };
                let next_beta = if ess(1.0) >= config.ess_fraction {
                    1.0
                } else {
                    let (mut lo, mut hi) = (beta, 1.0);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if ess(mid) >= config.ess_fraction {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    // Guarantee progress even on hard likelihoods.
                    lo.max(beta + 1e-3).min(1.0)
                };
                let bridge = Bridge { beta: next_beta, gamma: 0.0, indicator: None };
                let diag = transport.add_layer(
                    &counting,
                    bridge,
                    prev_bridge,
                    config,
                    &mut index_sets,
                    ess(next_beta),
                )?;
                diags.push(diag);
                beta = next_beta;
                prev_bridge = bridge;
                if beta >= 1.0 {
                    break;
                }
            }
        }

        // Adaptive indicator sharpening ladder: each rung picks the largest
        // sharpness whose probe reweighting keeps the effective sample size
        // above the target, so cross targets stay mild in any dimension. The
        // geometric ladder sets the entry scale; the sharpest rung is fixed.
        if let Some(ind) = indicator {
            if ind.n_levels == 0 || ind.gamma_star <= 0.0 || ind.scale <= 0.0 {
                return Err(DirtError::BadConfig("invalid smoothed indicator".into()));
            }
            let like_beta = if temper { 1.0 } else { 0.0 };
            let gamma_star = ind.gamma_star;
            let entry = ind.ladder()[0].min(gamma_star);
            let mut gamma = 0.0f64;
            while gamma < gamma_star {
                if diags.len() >= config.max_layers {
                    return Err(DirtError::TooManyLayers(config.max_layers));
                }
                let probes = transport.probe(&counting, &probes_u);
                // Step-size criterion: ESS of the analytic sharpening ratio
                // on probes drawn through the current transport.
                let ess_at = |g: f64| {
                    let bridge = Bridge { beta: like_beta, gamma: g, indicator: Some(ind) };
                    let logw: Vec<f64> = probes
                        .iter()
                        .map(|p| bridge.log_term(p) - prev_bridge.log_term(p))
                        .collect();
                    ess_fraction(&logw)
                };
                let next = if ess_at(gamma_star) >= config.ess_fraction {
                    gamma_star
                } else {
                    // Bisect in log-sharpness for the ESS-matching rung.
                    let (mut lo, mut hi) = if gamma > 0.0 {
                        (gamma, gamma_star)
                    } else if ess_at(entry) >= config.ess_fraction {
                        (entry, gamma_star)
                    } else {
                        (entry * 1e-3, entry)
                    };
                    for _ in 0..60 {
                        let mid = (lo * hi).sqrt();
                        if ess_at(mid) >= config.ess_fraction {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    // Guarantee progress even when the current transport is
                    // a poor proposal (the new layer then mostly corrects it).
                    if gamma > 0.0 {
                        lo.max(gamma * 1.05).min(gamma_star)
                    } else {
                        lo.min(gamma_star)
                    }
                };
                let bridge = Bridge { beta: like_beta, gamma: next, indicator: Some(ind) };
                let diag = transport.add_layer(
                    &counting,
                    bridge,
                    prev_bridge,
                    config,
                    &mut index_sets,
                    ess_at(next),
                )?;
                diags.push(diag);
                prev_bridge = bridge;
                gamma = next;
            }
        }

        Ok(DirtBuild {
            transport,
            diags,
            model_evaluations: counting.count.load(Ordering::Relaxed),
        })
    }

    /// Evaluates the model through the current transport at probe points,
    /// keeping the layer log-density total for reweighting.
    fn probe(&self, model: &CountingTarget, probes_u: &[Vec<f64>]) -> Vec<TargetResponse> {
        crate::exec::map(probes_u, |u| {
            let mut theta = vec![0.0; self.dim];
            self.map_from_uniform(u, &mut theta);
            model.evaluate(&theta)
        })
    }

    /// Builds one layer approximating the bridging ratio and pushes it
    /// onto the stack.
    fn add_layer(
        &mut self,
        model: &CountingTarget,
        bridge: Bridge,
        prev: Bridge,
        config: &DirtConfig,
        index_sets: &mut Option<CrossIndexSets>,
        ess: f64,
    ) -> Result<LayerDiag, DirtError> {
        let dim = self.dim;
        let stack = &*self;
        let ratio_target = move |v: &[f64]| -> f64 {
            // v is the cube input of the new layer: run it through the
            // existing stack to parameter space, then form the analytic
            // ratio of the consecutive bridging terms. Assuming the stack
            // pushes the reference to (approximately) the previous bridge,
            // this ratio is the new layer's pullback density; it is bounded
            // and smooth, unlike a division by the approximate stack
            // density, which spikes on the near-zero surfaces of the
            // squared-train interpolant.
            let mut theta = vec![0.0; dim];
            let mut w = v.to_vec();
            let mut buf = vec![0.0; dim];
            for layer in stack.layers.iter().rev() {
                layer.rosenblatt_inverse(&w, &mut buf);
                std::mem::swap(&mut w, &mut buf);
            }
            for (t, &vk) in theta.iter_mut().zip(&w) {
                *t = normal::inv_cdf(vk.clamp(1e-9, 1.0 - 1e-9));
            }
            let resp = model.evaluate(&theta);
            bridge.log_term(&resp) - prev.log_term(&resp)
        };
        let bases: Vec<Basis1D> = (0..dim)
            .map(|_| {
                Basis1D::new(config.n_nodes, config.layout, DomainMap::Bounded {
                    lower: 0.0,
                    upper: 1.0,
                })
            })
            .collect::<Result<_, _>>()?;
        let mut sirt_cfg = config.sirt.clone();
        sirt_cfg.cross.seed = crate::seeds::SeedNode::new(config.seed)
            .child("layer")
            .index(self.layers.len() as u64)
            .0;
        let build =
            SquaredFttDensity::build(&ratio_target, bases, &sirt_cfg, index_sets.as_ref())?;
        *index_sets = Some(build.index_sets);
        self.layers.push(build.density);
        Ok(LayerDiag { beta: bridge.beta, gamma: bridge.gamma, ess_fraction: ess, cross: build.report })
    }
}

/// Effective sample size fraction of log-weights.
pub fn ess_fraction(logw: &[f64]) -> f64 {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &lw in logw {
        let w = (lw - m).exp();
        s1 += w;
        s2 += w * w;
    }
    if s2 == 0.0 {
        0.0
    } else {
        s1 * s1 / (s2 * logw.len() as f64)
    }
}
