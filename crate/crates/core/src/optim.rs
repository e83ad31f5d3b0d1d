//! Training algorithms behind a single online step interface.
//!
//! The free functions implement one update each and take the batch loss as an
//! [`Objective`], which keeps them testable on hand-written losses. [`Learner`]
//! owns the state of one run and dispatches to them.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::drift::{
    closed_form_gamma, estimate_gamma_mc, CellMap, DriftState, GammaConfig, GammaInit,
    GaussianBelief, Noise, SharingScheme,
};
use crate::error::{Error, Result};
use crate::model::{
    draw_init, evaluate, init_mlp, posterior_init, predict, GroupKind, MlpObjective, MlpSpec,
    Objective, ParamSet, PosteriorState, PriorMean, PriorSpec,
};
use crate::rng::{lane, Lane};
use crate::streams::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgd,
    HardReset,
    L2Init,
    ShrinkPerturb,
    SoftReset,
    ProximalSoftReset,
    BayesianSoftReset,
    PerfectSoftReset,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::HardReset => "hard_reset",
            Variant::L2Init => "l2_init",
            Variant::ShrinkPerturb => "shrink_perturb",
            Variant::SoftReset => "soft_reset",
            Variant::ProximalSoftReset => "proximal_soft_reset",
            Variant::BayesianSoftReset => "bayesian_soft_reset",
            Variant::PerfectSoftReset => "perfect_soft_reset",
        }
    }

    /// Whether the learner is told where task boundaries are.
    pub fn uses_boundaries(self) -> bool {
        matches!(self, Variant::HardReset | Variant::PerfectSoftReset)
    }

    pub fn estimates_gamma(self) -> bool {
        matches!(
            self,
            Variant::SoftReset | Variant::ProximalSoftReset | Variant::BayesianSoftReset
        )
    }
}

/// What a hard reset re-draws masked groups from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    /// Back to the exact initial parameters.
    #[default]
    FixedInit,
    /// A fresh draw from the initializing distribution.
    FreshDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMask {
    #[default]
    All,
    LastLayer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetSchedule {
    /// On the first batch of every task.
    #[default]
    Boundaries,
    /// Every `n` steps, regardless of boundaries.
    Every(usize),
}

/// Learning rate used on a perfect-soft-reset boundary step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    Constant,
    #[default]
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaEstimator {
    #[default]
    MonteCarlo,
    /// Linearized closed form with `gamma0 = 1`.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub eta_gamma: f64,
    pub k_gamma: usize,
    pub m_gamma: usize,
    pub gamma_init: GammaInit,
    pub gamma_estimator: GammaEstimator,
    /// Penalty towards `gamma0 = 1` for the closed-form estimator.
    pub gamma_lambda: f64,
    pub k_theta: usize,
    pub m_theta: usize,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    /// Proximal or KL coefficient.
    pub lambda: f64,
    /// Posterior to prior std ratio for the MAP variants.
    pub s: f64,
    /// Prior std rescaling; defaults to 0.05 for the Bayesian variant and 0.1 otherwise.
    pub p: Option<f64>,
    /// Bayesian posterior init rescaling.
    pub f: f64,
    pub sharing: SharingScheme,
    pub prior_mean: PriorMean,
    pub l2_init_lambda: f64,
    pub shrink_lambda: f64,
    pub perturb_sigma: f64,
    pub reset_schedule: ResetSchedule,
    pub reset_policy: ResetPolicy,
    pub reset_mask: ResetMask,
    /// Learning rate on hard-reset steps; defaults to `alpha`.
    pub reset_alpha: Option<f64>,
    pub gamma_hat: f64,
    pub lr_mode: LrMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            variant: Variant::Sgd,
            alpha: 0.1,
            eta_gamma: 0.01,
            k_gamma: 1,
            m_gamma: 1,
            gamma_init: GammaInit::One,
            gamma_estimator: GammaEstimator::MonteCarlo,
            gamma_lambda: 1.0,
            k_theta: 1,
            m_theta: 1,
            alpha_mu: 0.1,
            alpha_sigma: 0.1,
            lambda: 0.01,
            s: 0.9,
            p: None,
            f: 0.9,
            sharing: SharingScheme::PerLayer,
            prior_mean: PriorMean::SpecificInit,
            l2_init_lambda: 0.0,
            shrink_lambda: 1.0,
            perturb_sigma: 0.0,
            reset_schedule: ResetSchedule::Boundaries,
            reset_policy: ResetPolicy::FixedInit,
            reset_mask: ResetMask::All,
            reset_alpha: None,
            gamma_hat: 0.0,
            lr_mode: LrMode::Adapted,
        }
    }
}

impl OptimizerConfig {
    pub fn with_variant(variant: Variant) -> Self {
        OptimizerConfig {
            variant,
            ..OptimizerConfig::default()
        }
    }

    pub fn effective_p(&self) -> f64 {
        self.p.unwrap_or(match self.variant {
            Variant::BayesianSoftReset => 0.05,
            _ => 0.1,
        })
    }

    pub fn gamma_config(&self) -> GammaConfig {
        GammaConfig {
            k_gamma: self.k_gamma,
            m_gamma: self.m_gamma,
            eta_gamma: self.eta_gamma,
            gamma_init: self.gamma_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return bad("s must be in (0, 1]");
        }
        let p = self.effective_p();
        if !(p > 0.0 && p <= 1.0) {
            return bad("p must be in (0, 1]");
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return bad("f must be in (0, 1]");
        }
        if self.k_theta == 0 || self.m_theta == 0 {
            return bad("k_theta and m_theta must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.l2_init_lambda >= 0.0 && self.gamma_lambda >= 0.0) {
            return bad("penalty coefficients must be non-negative");
        }
        if !(self.shrink_lambda > 0.0 && self.shrink_lambda <= 1.0) {
            return bad("shrink_lambda must be in (0, 1]");
        }
        if !(self.perturb_sigma >= 0.0) {
            return bad("perturb_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma_hat) {
            return bad("gamma_hat must be in [0, 1]");
        }
        if !(self.alpha_mu > 0.0 && self.alpha_sigma > 0.0) {
            return bad("alpha_mu and alpha_sigma must be positive");
        }
        if self.reset_alpha.is_some_and(|a| !(a > 0.0)) {
            return bad("reset_alpha must be positive");
        }
        if self.reset_schedule == ResetSchedule::Every(0) {
            return bad("reset interval must be positive");
        }
        if self.variant.estimates_gamma() {
            self.gamma_config()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn finite_grad(grad: &[f64], op: &'static str) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(op))
    }
}

fn objective_grad(obj: &dyn Objective, theta: &[f64], op: &'static str) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = match obj.loss_grad(theta) {
        Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteGradient(op)),
        other => other?,
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient(op));
    }
    finite_grad(&grad, op)?;
    Ok((loss, grad))
}

/// `theta - alpha * grad L(theta)`. Also returns the loss at `theta`.
pub fn sgd_step(theta: &[f64], obj: &dyn Objective, alpha: f64) -> Result<(Vec<f64>, f64)> {
    let (loss, grad) = objective_grad(obj, theta, "sgd")?;
    Ok((
        theta
            .iter()
            .zip(&grad)
            .map(|(t, g)| t - alpha * g)
            .collect(),
        loss,
    ))
}

/// Learning-rate multiplier `gamma^2 + (1 - gamma^2) / s^2`.
pub fn lr_scale(gamma: f64, s: f64) -> f64 {
    let g2 = gamma * gamma;
    g2 + (1.0 - g2) / (s * s)
}

/// Shrinks `theta` towards `mu0`: `gamma * theta + (1 - gamma) * mu0` per parameter.
pub fn soft_reset_target(theta: &[f64], mu0: &[f64], gamma: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(mu0)
        .zip(gamma)
        .map(|((t, m), g)| g * t + (1.0 - g) * m)
        .collect()
}

/// Output of the soft-reset family of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftUpdate {
    pub theta: Vec<f64>,
    /// Per-parameter learning rate actually used.
    pub lr: Vec<f64>,
    /// Loss at the shrunk point.
    pub loss: f64,
}

/// Soft reset with a given per-parameter `gamma`: shrink towards `mu0`, then
/// one gradient step at the shrunk point with rate `alpha * lr_scale(gamma, s)`.
pub fn soft_reset_update(
    theta: &[f64],
    mu0: &[f64],
    gamma: &[f64],
    alpha: f64,
    s: f64,
    obj: &dyn Objective,
) -> Result<SoftUpdate> {
    let target = soft_reset_target(theta, mu0, gamma);
    let (loss, grad) = objective_grad(obj, &target, "soft_reset")?;
    let lr: Vec<f64> = gamma.iter().map(|&g| alpha * lr_scale(g, s)).collect();
    let theta = target
        .iter()
        .zip(&grad)
        .zip(&lr)
        .map(|((t, g), a)| t - a * g)
        .collect();
    Ok(SoftUpdate { theta, lr, loss })
}

/// `K` gradient steps on `L(theta) + lambda/2 sum (theta - target)^2 / r`
/// with per-parameter rate `alpha * r`, starting from the shrunk target.
#[allow(clippy::too_many_arguments)]
pub fn proximal_update(
    theta: &[f64],
    mu0: &[f64],
    gamma: &[f64],
    alpha: f64,
    s: f64,
    lambda: f64,
    k_theta: usize,
    obj: &dyn Objective,
) -> Result<SoftUpdate> {
    let target = soft_reset_target(theta, mu0, gamma);
    let r: Vec<f64> = gamma.iter().map(|&g| lr_scale(g, s)).collect();
    let mut cur = target.clone();
    let mut first_loss = None;
    for _ in 0..k_theta.max(1) {
        let (loss, grad) = objective_grad(obj, &cur, "proximal_soft_reset")?;
        first_loss.get_or_insert(loss);
        for i in 0..cur.len() {
            let prox = lambda * (cur[i] - target[i]) / r[i];
            cur[i] -= alpha * r[i] * (grad[i] + prox);
        }
    }
    Ok(SoftUpdate {
        theta: cur,
        lr: r.iter().map(|x| alpha * x).collect(),
        loss: first_loss.expect("at least one step"),
    })
}

/// The proximal objective `L(theta) + lambda/2 sum (theta - target)^2 / r`.
pub fn proximal_objective(loss: f64, theta: &[f64], target: &[f64], r: &[f64], lambda: f64) -> f64 {
    let penalty: f64 = theta
        .iter()
        .zip(target)
        .zip(r)
        .map(|((t, m), r)| (t - m) * (t - m) / r)
        .sum();
    loss + 0.5 * lambda * penalty
}

/// One SGD step on `L(theta) + l2_lambda * |theta - theta0|^2`.
pub fn l2_init_step(
    theta: &[f64],
    theta0: &[f64],
    obj: &dyn Objective,
    alpha: f64,
    l2_lambda: f64,
) -> Result<(Vec<f64>, f64)> {
    let (loss, grad) = objective_grad(obj, theta, "l2_init")?;
    let next = theta
        .iter()
        .zip(theta0)
        .zip(&grad)
        .map(|((t, t0), g)| t - alpha * (g + 2.0 * l2_lambda * (t - t0)))
        .collect();
    Ok((next, loss))
}

/// `shrink * theta + sigma * xi`, then one SGD step.
pub fn shrink_perturb_step(
    theta: &[f64],
    xi: &[f64],
    obj: &dyn Objective,
    alpha: f64,
    shrink: f64,
    sigma: f64,
) -> Result<(Vec<f64>, f64)> {
    let moved: Vec<f64> = theta
        .iter()
        .zip(xi)
        .map(|(t, x)| shrink * t + sigma * x)
        .collect();
    sgd_step(&moved, obj, alpha)
}

/// Replaces the masked groups of `params` with `source`.
pub fn hard_reset(params: &ParamSet, source: &[f64], mask: ResetMask) -> ParamSet {
    let mut out = params.clone();
    let last = params.groups.iter().map(|g| g.layer).max().unwrap_or(0);
    for g in &params.groups {
        let hit = match mask {
            ResetMask::All => true,
            ResetMask::LastLayer => g.layer == last,
            ResetMask::None => false,
        };
        if hit {
            out.values[g.range()].copy_from_slice(&source[g.range()]);
        }
    }
    out
}

/// KL bracket per parameter, without temperature:
/// `((mu - mu~)^2 + sigma^2) / (2 sigma~^2) - ln(sigma^2) / 2`.
///
/// It equals `KL(N(mu, sigma^2) || N(mu~, sigma~^2)) - ln sigma~ + 1/2`.
pub fn kl_bracket(mu: f64, sigma: f64, mu_t: f64, sigma_t: f64) -> f64 {
    let d = mu - mu_t;
    (d * d + sigma * sigma) / (2.0 * sigma_t * sigma_t) - (sigma * sigma).ln() / 2.0
}

pub fn gaussian_kl(mu: f64, sigma: f64, mu_t: f64, sigma_t: f64) -> f64 {
    kl_bracket(mu, sigma, mu_t, sigma_t) + sigma_t.ln() - 0.5
}

/// Ratio `sigma_t^2 / sigma~^2` between the posterior and look-ahead variances.
pub fn variance_ratio(sigma_t: f64, sigma0: f64, gamma: f64) -> f64 {
    let g2 = gamma * gamma;
    let s2 = sigma_t * sigma_t;
    s2 / (g2 * s2 + (1.0 - g2) * sigma0 * sigma0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesConfig {
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub lambda: f64,
    pub k_theta: usize,
    pub m_theta: usize,
}

/// Value of the tempered variational objective split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub data: f64,
    pub kl: f64,
}

/// Tempered KL term `lambda/2 sum r [(mu - mu~)^2 + sigma^2 - sigma~^2 ln sigma^2]`.
pub fn tempered_kl(
    mu: &[f64],
    sigma: &[f64],
    look: &GaussianBelief,
    r: &[f64],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..mu.len() {
        let d = mu[i] - look.mu[i];
        let s2 = sigma[i] * sigma[i];
        total += r[i] * (d * d + s2 - look.sigma[i] * look.sigma[i] * s2.ln());
    }
    0.5 * lambda * total
}

/// Variational update started at the look-ahead prior `look`. `r` is held
/// fixed; `sigma` moves through its logarithm and is floored afterwards.
/// Returns the new posterior and the objective at the starting point.
pub fn bayesian_update(
    look: &GaussianBelief,
    r: &[f64],
    cfg: &BayesConfig,
    obj: &dyn Objective,
    rng: &mut Lane,
) -> Result<(PosteriorState, ElboParts)> {
    let n = look.mu.len();
    let mut mu = look.mu.clone();
    let mut log_sigma: Vec<f64> = look.sigma.iter().map(|s| s.ln()).collect();
    let mut first = None;
    let mut theta = vec![0.0; n];
    for _ in 0..cfg.k_theta.max(1) {
        let sigma: Vec<f64> = log_sigma.iter().map(|l| l.exp()).collect();
        let mut g_mu = vec![0.0; n];
        let mut g_sigma = vec![0.0; n];
        let mut data = 0.0;
        let m = cfg.m_theta.max(1);
        for _ in 0..m {
            let eps = rng.normals(n);
            for i in 0..n {
                theta[i] = mu[i] + eps[i] * sigma[i];
            }
            let (loss, grad) = match obj.loss_grad(&theta) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteElbo {
                        data: f64::NAN,
                        kl: tempered_kl(&mu, &sigma, look, r, cfg.lambda),
                    })
                }
                Err(e) => return Err(e),
            };
            data += loss / m as f64;
            for i in 0..n {
                g_mu[i] += grad[i] / m as f64;
                g_sigma[i] += grad[i] * eps[i] / m as f64;
            }
        }
        let kl = tempered_kl(&mu, &sigma, look, r, cfg.lambda);
        if !data.is_finite()
            || !kl.is_finite()
            || g_mu.iter().chain(&g_sigma).any(|g| !g.is_finite())
        {
            return Err(Error::NonFiniteElbo { data, kl });
        }
        first.get_or_insert(ElboParts { data, kl });
        for i in 0..n {
            let s = sigma[i];
            let t2 = look.sigma[i] * look.sigma[i];
            let dmu = g_mu[i] + cfg.lambda * r[i] * (mu[i] - look.mu[i]);
            // d/d(ln sigma) = sigma * d/d sigma
            let dsig = g_sigma[i] + cfg.lambda * r[i] * (s - t2 / s);
            mu[i] -= cfg.alpha_mu * dmu;
            log_sigma[i] -= cfg.alpha_sigma * s * dsig;
        }
    }
    let mut post = PosteriorState { mu, log_sigma };
    post.enforce_floor();
    Ok((post, first.expect("at least one step")))
}

/// What happened during one [`Learner::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Network output on the batch before the update.
    pub output: Tensor,
    /// Batch loss at the pre-update parameters.
    pub loss: f64,
    pub drift: DriftState,
    /// `(min, mean)` of gamma per parameter group.
    pub gamma_groups: Vec<(f64, f64)>,
    /// `(min, mean, max)` of the effective learning rate per parameter group.
    pub lr_groups: Vec<(f64, f64, f64)>,
    /// Mean effective learning rate over all parameters.
    pub lr_mean: f64,
    pub reset: bool,
    pub elapsed: Duration,
}

/// Objective that answers from a precomputed evaluation at one point.
struct Cached<'a> {
    inner: MlpObjective<'a>,
    theta: Vec<f64>,
    hit: Option<(f64, Vec<f64>)>,
}

impl Objective for Cached<'_> {
    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.hit {
            Some((loss, grad)) if theta == self.theta.as_slice() => Ok((*loss, grad.clone())),
            _ => self.inner.loss_grad(theta),
        }
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        match &self.hit {
            Some((loss, _)) if theta == self.theta.as_slice() => Ok(*loss),
            _ => self.inner.loss(theta),
        }
    }

    fn num_examples(&self) -> usize {
        self.inner.num_examples()
    }
}

/// One training run's optimizer state.
pub struct Learner {
    cfg: OptimizerConfig,
    spec: MlpSpec,
    params: ParamSet,
    theta0: Vec<f64>,
    prior: PriorSpec,
    cells: CellMap,
    drift: DriftState,
    posterior: Option<PosteriorState>,
    seed: u64,
    steps: usize,
    resets: u64,
    gamma_rng: Lane,
    theta_rng: Lane,
}

impl Learner {
    pub fn new(spec: &MlpSpec, cfg: &OptimizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (params, prior) = init_mlp(spec, cfg.effective_p(), cfg.prior_mean, seed)?;
        let cells = CellMap::new(cfg.sharing, &params.groups);
        let posterior = match cfg.variant {
            Variant::BayesianSoftReset => Some(posterior_init(&params, &prior, cfg.f)?),
            _ => None,
        };
        Ok(Learner {
            cfg: cfg.clone(),
            spec: spec.clone(),
            theta0: params.values.clone(),
            drift: DriftState::constant(cells.count(), 1.0),
            params,
            prior,
            cells,
            posterior,
            seed,
            steps: 0,
            resets: 0,
            gamma_rng: Lane::new(seed, &[lane::GAMMA_NOISE]),
            theta_rng: Lane::new(seed, &[lane::THETA_NOISE]),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Point estimate used for prediction (the posterior mean for the Bayesian variant).
    pub fn values(&self) -> &[f64] {
        match &self.posterior {
            Some(p) => &p.mu,
            None => &self.params.values,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn posterior(&self) -> Option<&PosteriorState> {
        self.posterior.as_ref()
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn cells(&self) -> &CellMap {
        &self.cells
    }

    pub fn drift(&self) -> &DriftState {
        &self.drift
    }

    /// Overrides the current parameters (the posterior mean for the Bayesian variant).
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                lhs: vec![values.len()],
                rhs: vec![self.params.len()],
            });
        }
        match &mut self.posterior {
            Some(p) => p.mu = values,
            None => self.params.values = values,
        }
        Ok(())
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        predict(&self.spec, self.values(), inputs)
    }

    fn reset_due(&self, boundary: bool) -> bool {
        match self.cfg.reset_schedule {
            ResetSchedule::Boundaries => boundary,
            ResetSchedule::Every(n) => self.steps > 0 && self.steps.is_multiple_of(n),
        }
    }

    fn map_belief(&self, theta: &[f64]) -> GaussianBelief {
        GaussianBelief {
            mu: theta.to_vec(),
            sigma: self.prior.sigma0.iter().map(|s| self.cfg.s * s).collect(),
        }
    }

    fn estimate_gamma(
        &mut self,
        belief: &GaussianBelief,
        obj: &dyn Objective,
    ) -> Result<DriftState> {
        match self.cfg.gamma_estimator {
            GammaEstimator::MonteCarlo => estimate_gamma_mc(
                belief,
                &self.prior,
                &self.cells,
                &self.cfg.gamma_config(),
                Some(&self.drift),
                obj,
                Noise::Sampled(&mut self.gamma_rng),
            ),
            GammaEstimator::ClosedForm => {
                let (_, grad) = objective_grad(obj, &belief.mu, "closed_form_gamma")?;
                let scale = obj.num_examples() as f64;
                let loglik: Vec<f64> = grad.iter().map(|g| -scale * g).collect();
                let out = closed_form_gamma(
                    &belief.mu,
                    &self.prior.mu0,
                    &belief.sigma,
                    &self.prior.sigma0,
                    &loglik,
                    self.cfg.gamma_lambda,
                    &vec![1.0; self.cells.count()],
                    &self.cells,
                )?;
                Ok(out.drift)
            }
        }
    }

    /// Predicts on `batch` with the current parameters, then updates on it.
    /// Boundary flags are ignored unless the variant is allowed to see them.
    pub fn step(&mut self, batch: &Batch) -> Result<StepReport> {
        let start = Instant::now();
        let boundary = batch.boundary && self.cfg.variant.uses_boundaries();
        let spec = self.spec.clone();
        let alpha = self.cfg.alpha;
        let n = self.params.len();
        let reset_now = match self.cfg.variant {
            Variant::HardReset => {
                self.reset_due(boundary) && self.cfg.reset_mask != ResetMask::None
            }
            Variant::PerfectSoftReset => boundary,
            _ => false,
        };
        let grad_here = matches!(
            self.cfg.variant,
            Variant::Sgd | Variant::L2Init | Variant::HardReset | Variant::PerfectSoftReset
        ) && !reset_now;
        let pre = evaluate(&spec, self.values(), batch, grad_here)?;
        let obj = Cached {
            inner: MlpObjective { spec: &spec, batch },
            theta: if grad_here {
                self.values().to_vec()
            } else {
                Vec::new()
            },
            hit: pre.grad.clone().map(|g| (pre.loss, g)),
        };
        let mut lr = vec![alpha; n];
        if !self.cfg.variant.estimates_gamma() {
            self.drift = DriftState::constant(self.cells.count(), 1.0);
        }
        match self.cfg.variant {
            Variant::Sgd => {
                self.params.values = sgd_step(&self.params.values, &obj, alpha)?.0;
            }
            Variant::HardReset => {
                let mut rate = alpha;
                if reset_now {
                    let source = match self.cfg.reset_policy {
                        ResetPolicy::FixedInit => self.theta0.clone(),
                        ResetPolicy::FreshDraw => {
                            self.resets += 1;
                            draw_init(&self.spec, self.seed, &[lane::RESET, self.resets])
                        }
                    };
                    self.params = hard_reset(&self.params, &source, self.cfg.reset_mask);
                    rate = self.cfg.reset_alpha.unwrap_or(alpha);
                    lr = vec![rate; n];
                }
                self.params.values = sgd_step(&self.params.values, &obj, rate)?.0;
            }
            Variant::L2Init => {
                self.params.values = l2_init_step(
                    &self.params.values,
                    &self.theta0,
                    &obj,
                    alpha,
                    self.cfg.l2_init_lambda,
                )?
                .0;
            }
            Variant::ShrinkPerturb => {
                let xi = draw_init(&self.spec, self.seed, &[lane::PERTURB, self.steps as u64]);
                self.params.values = shrink_perturb_step(
                    &self.params.values,
                    &xi,
                    &obj,
                    alpha,
                    self.cfg.shrink_lambda,
                    self.cfg.perturb_sigma,
                )?
                .0;
            }
            Variant::PerfectSoftReset => {
                if reset_now {
                    let gamma = vec![self.cfg.gamma_hat; n];
                    let s = match self.cfg.lr_mode {
                        LrMode::Adapted => self.cfg.s,
                        LrMode::Constant => 1.0,
                    };
                    let up = soft_reset_update(
                        &self.params.values,
                        &self.prior.mu0,
                        &gamma,
                        alpha,
                        s,
                        &obj,
                    )?;
                    self.params.values = up.theta;
                    lr = up.lr;
                    self.drift = DriftState::constant(self.cells.count(), self.cfg.gamma_hat);
                } else {
                    self.params.values = sgd_step(&self.params.values, &obj, alpha)?.0;
                }
            }
            Variant::SoftReset | Variant::ProximalSoftReset => {
                let belief = self.map_belief(&self.params.values);
                self.drift = self.estimate_gamma(&belief, &obj)?;
                let gamma = self.drift.expand(&self.cells);
                let up = if self.cfg.variant == Variant::SoftReset {
                    soft_reset_update(
                        &self.params.values,
                        &self.prior.mu0,
                        &gamma,
                        alpha,
                        self.cfg.s,
                        &obj,
                    )?
                } else {
                    proximal_update(
                        &self.params.values,
                        &self.prior.mu0,
                        &gamma,
                        alpha,
                        self.cfg.s,
                        self.cfg.lambda,
                        self.cfg.k_theta,
                        &obj,
                    )?
                };
                self.params.values = up.theta;
                lr = up.lr;
            }
            Variant::BayesianSoftReset => {
                let post = self.posterior.as_ref().expect("bayesian posterior");
                let belief = GaussianBelief {
                    mu: post.mu.clone(),
                    sigma: post.sigma(),
                };
                self.drift = self.estimate_gamma(&belief, &obj)?;
                let look =
                    crate::drift::predictive_prior(&belief, &self.prior, &self.drift, &self.cells);
                let gamma = self.drift.expand(&self.cells);
                let r: Vec<f64> = (0..n)
                    .map(|i| variance_ratio(belief.sigma[i], self.prior.sigma0[i], gamma[i]))
                    .collect();
                let cfg = BayesConfig {
                    alpha_mu: self.cfg.alpha_mu,
                    alpha_sigma: self.cfg.alpha_sigma,
                    lambda: self.cfg.lambda,
                    k_theta: self.cfg.k_theta,
                    m_theta: self.cfg.m_theta,
                };
                let (next, _) = bayesian_update(&look, &r, &cfg, &obj, &mut self.theta_rng)?;
                self.params.values = next.mu.clone();
                self.posterior = Some(next);
                lr = vec![self.cfg.alpha_mu; n];
            }
        }
        self.steps += 1;
        let groups = &self.params.groups;
        let gamma_groups = self.drift.group_summary(&self.cells, groups);
        let lr_groups = groups
            .iter()
            .map(|g| {
                let slice = &lr[g.range()];
                let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
                let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min, slice.iter().sum::<f64>() / slice.len() as f64, max)
            })
            .collect();
        Ok(StepReport {
            output: pre.output,
            loss: pre.loss,
            reset: reset_now,
            drift: self.drift.clone(),
            gamma_groups,
            lr_groups,
            lr_mean: lr.iter().sum::<f64>() / n as f64,
            elapsed: start.elapsed(),
        })
    }
}

/// Labels of the per-group columns, e.g. `w0`, `b0`, `w1`.
pub fn group_labels(spec: &MlpSpec) -> Vec<String> {
    spec.groups().iter().map(|g| g.label()).collect()
}

/// Indices of the weight groups.
pub fn weight_groups(spec: &MlpSpec) -> Vec<usize> {
    spec.groups()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.kind == GroupKind::Weight)
        .map(|(i, _)| i)
        .collect()
}
