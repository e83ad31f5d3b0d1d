//! Ornstein-Uhlenbeck parameter drift and online estimation of the drift
//! parameter `gamma`.
//!
//! For a parameter with prior `N(mu0, sigma0^2)` one drift step is
//!
//! ```text
//! theta' ~ N(gamma * theta + (1 - gamma) * mu0, (1 - gamma^2) * sigma0^2)
//! ```
//!
//! so `gamma = 1` keeps the parameter and `gamma = 0` redraws it from the
//! prior. Pushing a Gaussian belief `N(mu_t, sigma_t^2)` through that step
//! gives the look-ahead prior computed by [`predictive_prior`]. `gamma` is
//! shared across a [`SharingScheme`] cell and fitted by ascending the
//! predictive log-likelihood of the next batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Objective, PriorSpec};
use crate::rng::Lane;

/// Granularity at which one `gamma` is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingScheme {
    Global,
    /// One cell per weight group and one per bias group of every layer.
    #[default]
    PerLayer,
    PerParameter,
}

/// Surjective map from flat parameter index to drift cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    index: Vec<usize>,
    count: usize,
}

impl CellMap {
    pub fn new(scheme: SharingScheme, groups: &[Group]) -> Self {
        let n = groups.iter().map(|g| g.offset + g.len).max().unwrap_or(0);
        let mut index = vec![0; n];
        let count = match scheme {
            SharingScheme::Global => 1,
            SharingScheme::PerLayer => {
                for (c, g) in groups.iter().enumerate() {
                    index[g.range()].fill(c);
                }
                groups.len()
            }
            SharingScheme::PerParameter => {
                for (i, slot) in index.iter_mut().enumerate() {
                    *slot = i;
                }
                n
            }
        };
        CellMap { index, count }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_params(&self) -> usize {
        self.index.len()
    }

    pub fn cell_of(&self, param: usize) -> usize {
        self.index[param]
    }

    pub fn indices(&self) -> &[usize] {
        &self.index
    }
}

/// One `gamma` per cell, always inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftState {
    pub gamma: Vec<f64>,
    pub gamma0: Vec<f64>,
}

impl DriftState {
    pub fn constant(cells: usize, gamma: f64) -> Self {
        let g = gamma.clamp(0.0, 1.0);
        DriftState {
            gamma: vec![g; cells],
            gamma0: vec![g; cells],
        }
    }

    pub fn clip(&mut self) {
        for g in &mut self.gamma {
            *g = g.clamp(0.0, 1.0);
        }
    }

    /// Per-parameter view of the cell values.
    pub fn expand(&self, cells: &CellMap) -> Vec<f64> {
        cells.indices().iter().map(|&c| self.gamma[c]).collect()
    }

    /// `(min, mean)` of `gamma` over the parameters of each group.
    pub fn group_summary(&self, cells: &CellMap, groups: &[Group]) -> Vec<(f64, f64)> {
        groups
            .iter()
            .map(|g| {
                let vals = g.range().map(|i| self.gamma[cells.cell_of(i)]);
                let (mut min, mut sum) = (f64::INFINITY, 0.0);
                for v in vals {
                    min = min.min(v);
                    sum += v;
                }
                (min, sum / g.len as f64)
            })
            .collect()
    }
}

/// Diagonal Gaussian over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn check_aligned(post: &GaussianBelief, prior: &PriorSpec, cells: &CellMap) -> Result<()> {
    let n = post.mu.len();
    if post.sigma.len() != n
        || prior.mu0.len() != n
        || prior.sigma0.len() != n
        || cells.num_params() != n
    {
        return Err(Error::ShapeMismatch {
            op: "drift",
            lhs: vec![n, post.sigma.len()],
            rhs: vec![prior.mu0.len(), prior.sigma0.len(), cells.num_params()],
        });
    }
    Ok(())
}

#[inline]
fn look_ahead(gamma: f64, mu: f64, sigma: f64, mu0: f64, sigma0: f64) -> (f64, f64) {
    let g2 = gamma * gamma;
    let m = gamma * mu + (1.0 - gamma) * mu0;
    let v = g2 * sigma * sigma + (1.0 - g2) * sigma0 * sigma0;
    (m, v.max(0.0).sqrt())
}

/// Marginal of one drift step applied to `post`:
/// `mu~ = gamma mu + (1 - gamma) mu0`, `sigma~^2 = gamma^2 sigma^2 + (1 - gamma^2) sigma0^2`.
pub fn predictive_prior(
    post: &GaussianBelief,
    prior: &PriorSpec,
    drift: &DriftState,
    cells: &CellMap,
) -> GaussianBelief {
    let n = post.mu.len();
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let (m, s) = look_ahead(
            drift.gamma[cells.cell_of(i)],
            post.mu[i],
            post.sigma[i],
            prior.mu0[i],
            prior.sigma0[i],
        );
        mu.push(m);
        sigma.push(s);
    }
    GaussianBelief { mu, sigma }
}

/// One draw of the drift step from `theta`.
pub fn ou_sample(
    theta: &[f64],
    drift: &DriftState,
    prior: &PriorSpec,
    cells: &CellMap,
    rng: &mut Lane,
) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let g = drift.gamma[cells.cell_of(i)];
            let mean = g * t + (1.0 - g) * prior.mu0[i];
            let std = ((1.0 - g * g).max(0.0)).sqrt() * prior.sigma0[i];
            if std == 0.0 {
                mean
            } else {
                mean + std * rng.normal()
            }
        })
        .collect()
}

/// Starting point of the gamma ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaInit {
    /// Start every step from `gamma = 1` (stationarity prior).
    #[default]
    One,
    /// Start from the previous step's estimate (temporal smoothness).
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaConfig {
    pub k_gamma: usize,
    pub m_gamma: usize,
    pub eta_gamma: f64,
    pub gamma_init: GammaInit,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            k_gamma: 1,
            m_gamma: 1,
            eta_gamma: 0.01,
            gamma_init: GammaInit::One,
        }
    }
}

impl GammaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_gamma == 0 || self.m_gamma == 0 {
            return Err(Error::invalid("k_gamma and m_gamma must be at least 1"));
        }
        if !(self.eta_gamma > 0.0) {
            return Err(Error::invalid("eta_gamma must be positive"));
        }
        Ok(())
    }
}

/// Source of the standard-normal noise used by the reparameterized estimate.
pub enum Noise<'a> {
    /// Fresh `m_gamma` draws per ascent step.
    Sampled(&'a mut Lane),
    /// The same noise vectors at every step.
    Frozen(&'a [Vec<f64>]),
}

/// Monte-Carlo predictive log-likelihood and its gradient per cell.
///
/// With `eps` holding `M` standard-normal vectors, the objective is
/// `log (1/M) sum_m p(batch | mu~(gamma) + eps_m * sigma~(gamma))` with the
/// batch likelihood taken as the product over its examples.
pub fn mc_objective(
    post: &GaussianBelief,
    prior: &PriorSpec,
    drift: &DriftState,
    cells: &CellMap,
    eps: &[Vec<f64>],
    objective: &dyn Objective,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(post, prior, cells)?;
    if eps.is_empty() {
        return Err(Error::invalid("at least one noise sample is required"));
    }
    let n = post.mu.len();
    let scale = objective.num_examples() as f64;
    let mut losses = Vec::with_capacity(eps.len());
    let mut per_sample = Vec::with_capacity(eps.len());
    let mut theta = vec![0.0; n];
    let mut dtheta = vec![0.0; n];
    for e in eps {
        if e.len() != n {
            return Err(Error::ShapeMismatch {
                op: "mc_objective",
                lhs: vec![e.len()],
                rhs: vec![n],
            });
        }
        for i in 0..n {
            let g = drift.gamma[cells.cell_of(i)];
            let (mu0, s0, s) = (prior.mu0[i], prior.sigma0[i], post.sigma[i]);
            let (m, st) = look_ahead(g, post.mu[i], s, mu0, s0);
            theta[i] = m + e[i] * st;
            // d sigma~ / d gamma = gamma (sigma^2 - sigma0^2) / sigma~
            let dsig = if st > 0.0 {
                g * (s * s - s0 * s0) / st
            } else {
                0.0
            };
            dtheta[i] = (post.mu[i] - mu0) + e[i] * dsig;
        }
        let (loss, grad) = objective.loss_grad(&theta)?;
        let mut dg = vec![0.0; drift.gamma.len()];
        for i in 0..n {
            dg[cells.cell_of(i)] -= scale * grad[i] * dtheta[i];
        }
        losses.push(scale * loss);
        per_sample.push(dg);
    }
    // log-mean-exp of the per-sample log-likelihoods, with softmax weights
    let max = losses.iter().map(|l| -l).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = losses.iter().map(|l| (-l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let value = max + (z / eps.len() as f64).ln();
    let mut grad = vec![0.0; drift.gamma.len()];
    for (w, dg) in weights.iter().zip(&per_sample) {
        for (g, d) in grad.iter_mut().zip(dg) {
            *g += w / z * d;
        }
    }
    Ok((value, grad))
}

/// Gradient ascent on the Monte-Carlo predictive log-likelihood, clipping
/// `gamma` to `[0, 1]` after every step.
pub fn estimate_gamma_mc(
    post: &GaussianBelief,
    prior: &PriorSpec,
    cells: &CellMap,
    cfg: &GammaConfig,
    previous: Option<&DriftState>,
    objective: &dyn Objective,
    mut noise: Noise<'_>,
) -> Result<DriftState> {
    cfg.validate()?;
    check_aligned(post, prior, cells)?;
    let mut drift = match (cfg.gamma_init, previous) {
        (GammaInit::Previous, Some(prev)) if prev.gamma.len() == cells.count() => DriftState {
            gamma: prev.gamma.clone(),
            gamma0: prev.gamma.clone(),
        },
        _ => DriftState::constant(cells.count(), 1.0),
    };
    let n = post.mu.len();
    for step in 0..cfg.k_gamma {
        let sampled;
        let eps: &[Vec<f64>] = match &mut noise {
            Noise::Sampled(rng) => {
                sampled = (0..cfg.m_gamma).map(|_| rng.normals(n)).collect::<Vec<_>>();
                &sampled
            }
            Noise::Frozen(eps) => eps,
        };
        let (value, grad) = match mc_objective(post, prior, &drift, cells, eps, objective) {
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGradient(_)) => {
                return Err(Error::NonFiniteLikelihood { step })
            }
            other => other?,
        };
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLikelihood { step });
        }
        for (g, d) in drift.gamma.iter_mut().zip(&grad) {
            *g += cfg.eta_gamma * d;
        }
        drift.clip();
    }
    Ok(drift)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Result of [`closed_form_gamma`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub drift: DriftState,
    /// Stationary point before clipping (`gamma0` for degenerate cells).
    pub unclipped: Vec<f64>,
    /// Cells whose curvature term was not positive; these fall back to `gamma0`.
    pub degenerate: Vec<usize>,
}

/// Closed-form `gamma` from linearizing the log-likelihood around `mu_t`.
///
/// `loglik_grad` is the gradient of the log-likelihood at `mu_t`, i.e. the
/// negative gradient of the loss. Per cell:
///
/// ```text
/// gamma = (sum (mu_t - mu0) g + lambda gamma0) / (sum g^2 (sigma0^2 - sigma_t^2) + lambda)
/// ```
///
/// which maximizes `g.mu~(gamma) + 1/2 sum g^2 sigma~^2(gamma) - lambda/2 (gamma - gamma0)^2`.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_gamma(
    mu_t: &[f64],
    mu0: &[f64],
    sigma_t: &[f64],
    sigma0: &[f64],
    loglik_grad: &[f64],
    lambda: f64,
    gamma0: &[f64],
    cells: &CellMap,
) -> Result<ClosedForm> {
    let n = mu_t.len();
    if [
        mu0.len(),
        sigma_t.len(),
        sigma0.len(),
        loglik_grad.len(),
        cells.num_params(),
    ]
    .iter()
    .any(|&l| l != n)
        || gamma0.len() != cells.count()
    {
        return Err(Error::ShapeMismatch {
            op: "closed_form_gamma",
            lhs: vec![n],
            rhs: vec![gamma0.len(), cells.count()],
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let mut num = vec![CompensatedSum::default(); cells.count()];
    let mut den = vec![CompensatedSum::default(); cells.count()];
    for i in 0..n {
        let c = cells.cell_of(i);
        let g = loglik_grad[i];
        num[c].add((mu_t[i] - mu0[i]) * g);
        den[c].add(g * g * (sigma0[i] * sigma0[i] - sigma_t[i] * sigma_t[i]));
    }
    let mut unclipped = Vec::with_capacity(cells.count());
    let mut degenerate = Vec::new();
    for c in 0..cells.count() {
        let d = den[c].value() + lambda;
        if d <= 0.0 {
            log::warn!(
                "closed-form gamma: non-positive curvature {d:e} in cell {c}, keeping gamma0"
            );
            degenerate.push(c);
            unclipped.push(gamma0[c]);
        } else {
            unclipped.push((num[c].value() + lambda * gamma0[c]) / d);
        }
    }
    let mut drift = DriftState {
        gamma: unclipped.clone(),
        gamma0: gamma0.to_vec(),
    };
    drift.clip();
    Ok(ClosedForm {
        drift,
        unclipped,
        degenerate,
    })
}

/// OU time step `delta = -ln gamma` per cell; `gamma = 0` maps to `+inf`.
pub fn gamma_to_timestep(drift: &DriftState) -> Result<Vec<f64>> {
    drift
        .gamma
        .iter()
        .map(|&g| {
            if !(0.0..=1.0).contains(&g) {
                Err(Error::invalid(format!("gamma {g} outside [0, 1]")))
            } else if g == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(-g.ln())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupKind;

    fn scalar_prior(mu0: f64, sigma0: f64) -> PriorSpec {
        PriorSpec {
            mu0: vec![mu0],
            sigma0: vec![sigma0],
            sigma_base: vec![sigma0],
            p: 1.0,
        }
    }

    fn one_cell() -> CellMap {
        CellMap::new(SharingScheme::Global, &[group(0, 1)])
    }

    fn group(offset: usize, len: usize) -> Group {
        Group {
            layer: 0,
            kind: GroupKind::Weight,
            offset,
            len,
            fan_in: 1,
        }
    }

    #[test]
    fn predictive_prior_examples() {
        let post = GaussianBelief {
            mu: vec![2.0],
            sigma: vec![1.0],
        };
        let prior = scalar_prior(0.0, 2.0);
        let cells = one_cell();
        let half = predictive_prior(&post, &prior, &DriftState::constant(1, 0.5), &cells);
        assert!((half.mu[0] - 1.0).abs() < 1e-15);
        assert!((half.sigma[0].powi(2) - 3.25).abs() < 1e-12);
        let keep = predictive_prior(&post, &prior, &DriftState::constant(1, 1.0), &cells);
        assert_eq!(keep, post);
        let reset = predictive_prior(&post, &prior, &DriftState::constant(1, 0.0), &cells);
        assert_eq!(reset.mu, vec![0.0]);
        assert_eq!(reset.sigma, vec![2.0]);
    }

    #[test]
    fn ou_sample_degenerate_cases() {
        let prior = PriorSpec {
            mu0: vec![0.5, -0.5],
            sigma0: vec![1.0, 2.0],
            sigma_base: vec![1.0, 2.0],
            p: 1.0,
        };
        let cells = CellMap::new(SharingScheme::Global, &[group(0, 2)]);
        let theta = vec![3.0, 4.0];
        let mut rng = Lane::new(0, &[]);
        assert_eq!(
            ou_sample(
                &theta,
                &DriftState::constant(1, 1.0),
                &prior,
                &cells,
                &mut rng
            ),
            theta
        );
        // gamma = 0 ignores theta entirely
        let a = ou_sample(
            &theta,
            &DriftState::constant(1, 0.0),
            &prior,
            &cells,
            &mut Lane::new(4, &[]),
        );
        let b = ou_sample(
            &[-9.0, 9.0],
            &DriftState::constant(1, 0.0),
            &prior,
            &cells,
            &mut Lane::new(4, &[]),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn cell_maps() {
        let groups = vec![
            group(0, 6),
            Group {
                kind: GroupKind::Bias,
                ..group(6, 2)
            },
            Group {
                layer: 1,
                ..group(8, 4)
            },
        ];
        let global = CellMap::new(SharingScheme::Global, &groups);
        assert_eq!(global.count(), 1);
        assert!(global.indices().iter().all(|&c| c == 0));
        let layer = CellMap::new(SharingScheme::PerLayer, &groups);
        assert_eq!(layer.count(), 3);
        assert_eq!(layer.cell_of(7), 1);
        assert_eq!(layer.cell_of(11), 2);
        let param = CellMap::new(SharingScheme::PerParameter, &groups);
        assert_eq!(param.count(), 12);
        assert_eq!(param.cell_of(9), 9);
    }

    #[test]
    fn closed_form_examples() {
        let cells = one_cell();
        // zero gradient, lambda > 0: gamma0 comes back
        let r =
            closed_form_gamma(&[1.0], &[0.0], &[0.5], &[1.0], &[0.0], 2.0, &[0.7], &cells).unwrap();
        assert!((r.drift.gamma[0] - 0.7).abs() < 1e-15);
        // 8/7, clipped
        let r =
            closed_form_gamma(&[1.0], &[0.0], &[0.5], &[1.0], &[1.0], 1.0, &[1.0], &cells).unwrap();
        assert!((r.unclipped[0] - 8.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.drift.gamma[0], 1.0);
        // orthogonal displacement and gradient, no penalty
        let cells2 = CellMap::new(SharingScheme::Global, &[group(0, 2)]);
        let r = closed_form_gamma(
            &[1.0, 0.0],
            &[0.0, 0.0],
            &[0.1, 0.1],
            &[1.0, 1.0],
            &[0.0, 1.0],
            0.0,
            &[1.0],
            &cells2,
        )
        .unwrap();
        assert_eq!(r.drift.gamma[0], 0.0);
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn closed_form_degenerate_falls_back() {
        let cells = one_cell();
        // sigma_t > sigma0 makes the curvature term negative
        let r =
            closed_form_gamma(&[1.0], &[0.0], &[2.0], &[1.0], &[1.0], 0.0, &[0.9], &cells).unwrap();
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(r.drift.gamma, vec![0.9]);
    }

    #[test]
    fn timesteps() {
        let d = DriftState {
            gamma: vec![1.0, (-1f64).exp(), 0.5, 0.0],
            gamma0: vec![1.0; 4],
        };
        let t = gamma_to_timestep(&d).unwrap();
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 1.0).abs() < 1e-15);
        assert!((t[2] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(t[3].is_infinite());
        let bad = DriftState {
            gamma: vec![1.5],
            gamma0: vec![1.0],
        };
        assert!(gamma_to_timestep(&bad).is_err());
    }

    /// Quadratic loss `(theta - target)^2 / 2` summed over coordinates.
    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let grad: Vec<f64> = theta.iter().zip(&self.0).map(|(t, c)| t - c).collect();
            Ok((grad.iter().map(|g| 0.5 * g * g).sum(), grad))
        }
    }

    #[test]
    fn gamma_stays_at_one_on_a_fitted_batch() {
        let post = GaussianBelief {
            mu: vec![0.3, -0.2],
            sigma: vec![0.05, 0.05],
        };
        let prior = PriorSpec {
            mu0: vec![0.0, 0.0],
            sigma0: vec![0.1, 0.1],
            sigma_base: vec![0.1, 0.1],
            p: 1.0,
        };
        let cells = CellMap::new(SharingScheme::Global, &[group(0, 2)]);
        let cfg = GammaConfig {
            k_gamma: 10,
            m_gamma: 1,
            eta_gamma: 0.1,
            gamma_init: GammaInit::One,
        };
        let zero = vec![vec![0.0, 0.0]];
        let fitted = Quadratic(post.mu.clone());
        let d = estimate_gamma_mc(
            &post,
            &prior,
            &cells,
            &cfg,
            None,
            &fitted,
            Noise::Frozen(&zero),
        )
        .unwrap();
        assert!((d.gamma[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gamma_drops_when_the_data_moves_to_the_prior() {
        let post = GaussianBelief {
            mu: vec![1.0],
            sigma: vec![0.1],
        };
        let prior = scalar_prior(0.0, 1.0);
        let cells = one_cell();
        let cfg = GammaConfig {
            k_gamma: 50,
            eta_gamma: 0.05,
            ..GammaConfig::default()
        };
        let zero = vec![vec![0.0]];
        // optimum of the loss sits at mu0, so gamma should head towards 0
        let d = estimate_gamma_mc(
            &post,
            &prior,
            &cells,
            &cfg,
            None,
            &Quadratic(vec![0.0]),
            Noise::Frozen(&zero),
        )
        .unwrap();
        assert!(d.gamma[0] < 0.5, "{}", d.gamma[0]);
    }

    #[test]
    fn previous_gamma_init() {
        let post = GaussianBelief {
            mu: vec![0.0],
            sigma: vec![0.1],
        };
        let prior = scalar_prior(0.0, 1.0);
        let cells = one_cell();
        let cfg = GammaConfig {
            gamma_init: GammaInit::Previous,
            eta_gamma: 1e-12,
            ..GammaConfig::default()
        };
        let prev = DriftState::constant(1, 0.4);
        let zero = vec![vec![0.0]];
        let d = estimate_gamma_mc(
            &post,
            &prior,
            &cells,
            &cfg,
            Some(&prev),
            &Quadratic(vec![0.0]),
            Noise::Frozen(&zero),
        )
        .unwrap();
        assert!((d.gamma[0] - 0.4).abs() < 1e-9);
    }

    struct Exploding;

    impl Objective for Exploding {
        fn loss_grad(&self, _: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((f64::NAN, vec![0.0]))
        }
    }

    #[test]
    fn non_finite_likelihood_reports_step() {
        let post = GaussianBelief {
            mu: vec![0.0],
            sigma: vec![0.1],
        };
        let prior = scalar_prior(0.0, 1.0);
        let zero = vec![vec![0.0]];
        let err = estimate_gamma_mc(
            &post,
            &prior,
            &one_cell(),
            &GammaConfig::default(),
            None,
            &Exploding,
            Noise::Frozen(&zero),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLikelihood { step: 0 }));
    }
}
