//! Row-scaling reparameterizations of the layer weights and the measurements
//! that show what they do and do not change.
//!
//! With train-mode batch normalization after every linear map, replacing each
//! `W_l` by `Diag(α_l) W_l` with positive `α_l` leaves the loss unchanged, while
//! the Euclidean gradient with respect to `W_l` changes (roughly like `1/α`).
//! Retracting both parameterizations onto the oblique manifold lands on the same
//! point, so the unit-norm update does not see the reparameterization at all.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::manifold::{project_to_tangent, retract};
use crate::network::{backward, forward, train_loss, Gradients, Mode, NetworkConfig, NetworkParams};
use crate::numerics::{diag_scale_rows, Matrix};
use crate::{math, Error, Result, Rng};

/// One diagonal scaling per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSet {
    factors: Vec<Vec<f64>>,
    all_positive: bool,
}

impl ScalingSet {
    /// Rejects zero and non-finite factors.
    pub fn new(factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.iter().flatten().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::Precondition("scaling factors must be finite and non-zero".into()));
        }
        let all_positive = factors.iter().flatten().all(|v| *v > 0.0);
        Ok(ScalingSet { factors, all_positive })
    }

    pub fn identity(cfg: &NetworkConfig) -> Self {
        ScalingSet {
            factors: (0..cfg.depth).map(|_| alloc::vec![1.0; cfg.filters_per_layer]).collect(),
            all_positive: true,
        }
    }

    /// Factors drawn log-uniformly from `[lo, hi]`, `0 < lo <= hi`.
    pub fn log_uniform(cfg: &NetworkConfig, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Precondition(format!("bad log-uniform range [{lo}, {hi}]")));
        }
        let (a, b) = (math::ln(lo), math::ln(hi));
        let factors = (0..cfg.depth)
            .map(|_| {
                (0..cfg.filters_per_layer)
                    .map(|_| if a == b { lo } else { math::exp(rng.random_range(a..=b)) })
                    .collect()
            })
            .collect();
        ScalingSet::new(factors)
    }

    /// Every factor picked uniformly from `choices`.
    pub fn from_choices(cfg: &NetworkConfig, choices: &[f64], rng: &mut Rng) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::Precondition("no scaling choices given".into()));
        }
        let factors = (0..cfg.depth)
            .map(|_| (0..cfg.filters_per_layer).map(|_| choices[rng.random_range(0..choices.len())]).collect())
            .collect();
        ScalingSet::new(factors)
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn all_positive(&self) -> bool {
        self.all_positive
    }

    /// Elementwise product, the composition of the two scalings.
    pub fn compose(&self, other: &ScalingSet) -> Result<ScalingSet> {
        if self.factors.len() != other.factors.len()
            || self.factors.iter().zip(&other.factors).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("ScalingSet::compose", "layer shapes differ".into()));
        }
        let factors = self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
            .collect();
        ScalingSet::new(factors)
    }
}

/// `W_l -> Diag(α_l) W_l` for every layer; batch norm and `theta` are copied unchanged.
pub fn reparameterize(params: &NetworkParams, s: &ScalingSet) -> Result<NetworkParams> {
    if s.factors.len() != params.layers.len() {
        return Err(Error::shape(
            "reparameterize",
            format!("{} scalings for {} layers", s.factors.len(), params.layers.len()),
        ));
    }
    let mut out = params.clone();
    for (layer, alpha) in out.layers.iter_mut().zip(&s.factors) {
        layer.weight = diag_scale_rows(alpha, &layer.weight)?;
    }
    Ok(out)
}

/// Retracts every layer weight onto the oblique manifold.
pub fn retract_weights(params: &NetworkParams) -> Result<NetworkParams> {
    let mut out = params.clone();
    for layer in &mut out.layers {
        layer.weight = retract(&layer.weight)?.into_matrix();
    }
    Ok(out)
}

/// Relative change of the train-mode loss under `s`, for any non-zero scaling.
///
/// Negative factors flip a normalized feature before the ReLU, so only the
/// positive case is expected to be invariant; see [`loss_invariance_gap`].
pub fn loss_gap(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    x: &Matrix,
    labels: &[usize],
    s: &ScalingSet,
) -> Result<f64> {
    let base = train_loss(params, cfg, x, labels)?;
    let moved = train_loss(&reparameterize(params, s)?, cfg, x, labels)?;
    Ok((moved - base).abs() / base.abs().max(1e-30))
}

/// [`loss_gap`] restricted to strictly positive scalings.
pub fn loss_invariance_gap(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    x: &Matrix,
    labels: &[usize],
    s: &ScalingSet,
) -> Result<f64> {
    if !s.all_positive {
        return Err(Error::Precondition("loss invariance is only claimed for positive scalings".into()));
    }
    loss_gap(params, cfg, x, labels, s)
}

fn train_grads(params: &NetworkParams, cfg: &NetworkConfig, x: &Matrix, labels: &[usize]) -> Result<Gradients> {
    let mut scratch = params.clone();
    let out = forward(&mut scratch, cfg, x, labels, Mode::Train)?;
    backward(params, cfg, &out.cache, x, labels)
}

fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let mut d = a.clone();
    d.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x -= y);
    d.frobenius_norm() / a.frobenius_norm().max(1e-300)
}

/// Largest relative Frobenius change of `∂L/∂W_l` over the layers when the
/// weights are reparameterized by a positive `s`.
pub fn euclidean_grad_gap(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    x: &Matrix,
    labels: &[usize],
    s: &ScalingSet,
) -> Result<f64> {
    if !s.all_positive {
        return Err(Error::Precondition("gradient gap is defined for positive scalings".into()));
    }
    let g0 = train_grads(params, cfg, x, labels)?;
    let g1 = train_grads(&reparameterize(params, s)?, cfg, x, labels)?;
    Ok(g0.layers.iter().zip(&g1.layers).map(|(a, b)| relative_frobenius(&a.weight, &b.weight)).fold(0.0, f64::max))
}

/// Same measurement for the unit-norm direction: both parameterizations are
/// retracted and their gradients projected onto the tangent space there.
pub fn un_direction_gap(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    x: &Matrix,
    labels: &[usize],
    s: &ScalingSet,
) -> Result<f64> {
    if !s.all_positive {
        return Err(Error::Precondition("direction gap is defined for positive scalings".into()));
    }
    let p0 = retract_weights(params)?;
    let p1 = retract_weights(&reparameterize(params, s)?)?;
    let g0 = train_grads(&p0, cfg, x, labels)?;
    let g1 = train_grads(&p1, cfg, x, labels)?;
    let mut gap = 0.0f64;
    for l in 0..p0.layers.len() {
        let w0 = retract(&p0.layers[l].weight)?;
        let w1 = retract(&p1.layers[l].weight)?;
        let t0 = project_to_tangent(&w0, &g0.layers[l].weight)?;
        let t1 = project_to_tangent(&w1, &g1.layers[l].weight)?;
        gap = gap.max(relative_frobenius(&t0, &t1));
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::{toy_config, toy_problem};
    use crate::numerics::row_l2_norms;
    use crate::seeded_rng;
    use alloc::vec;

    fn exact_bn_config() -> NetworkConfig {
        // invariance is exact only in the limit of a vanishing batch-norm epsilon
        NetworkConfig { bn_eps: 1e-16, ..toy_config() }
    }

    #[test]
    fn identity_and_doubling() {
        let cfg = toy_config();
        let (params, _, _) = toy_problem(40, &cfg, 8);
        assert_eq!(reparameterize(&params, &ScalingSet::identity(&cfg)).unwrap(), params);

        let mut f = vec![vec![1.0; 4]; 2];
        f[1] = vec![2.0; 4];
        let doubled = reparameterize(&params, &ScalingSet::new(f).unwrap()).unwrap();
        assert_eq!(doubled.layers[0], params.layers[0]);
        assert_eq!(doubled.layers[1].weight, params.layers[1].weight.scaled(2.0));
        assert_eq!(doubled.theta, params.theta);
        assert_eq!(doubled.layers[1].bn_scale, params.layers[1].bn_scale);
    }

    #[test]
    fn scaled_row_norms() {
        let cfg = toy_config();
        let (params, _, _) = toy_problem(41, &cfg, 8);
        let s = ScalingSet::from_choices(&cfg, &[-3.0, 0.5, 7.0], &mut seeded_rng(41, 1)).unwrap();
        let scaled = reparameterize(&params, &s).unwrap();
        for l in 0..2 {
            let before = row_l2_norms(&params.layers[l].weight);
            let after = row_l2_norms(&scaled.layers[l].weight);
            for ((a, b), al) in after.iter().zip(before).zip(&s.factors()[l]) {
                assert!((a - al.abs() * b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_scalings() {
        assert!(ScalingSet::new(vec![vec![1.0, 0.0]]).is_err());
        assert!(ScalingSet::new(vec![vec![f64::NAN]]).is_err());
        let s = ScalingSet::new(vec![vec![1.0, -1.0]]).unwrap();
        assert!(!s.all_positive());
        let cfg = toy_config();
        let (params, _, _) = toy_problem(42, &cfg, 8);
        assert!(reparameterize(&params, &s).is_err());
    }

    #[test]
    fn loss_is_invariant_to_positive_scalings() {
        let cfg = exact_bn_config();
        let (params, x, labels) = toy_problem(43, &cfg, 32);
        assert_eq!(loss_invariance_gap(&params, &cfg, &x, &labels, &ScalingSet::identity(&cfg)).unwrap(), 0.0);
        let mut rng = seeded_rng(43, 1);
        for _ in 0..100 {
            let s = ScalingSet::log_uniform(&cfg, 1e-2, 1e2, &mut rng).unwrap();
            assert!(loss_invariance_gap(&params, &cfg, &x, &labels, &s).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn negative_scalings_are_rejected_by_the_invariance_check() {
        let cfg = exact_bn_config();
        let (params, x, labels) = toy_problem(44, &cfg, 32);
        let mut f = vec![vec![1.0; 4]; 2];
        f[0][1] = -1.0;
        let s = ScalingSet::new(f).unwrap();
        assert!(loss_invariance_gap(&params, &cfg, &x, &labels, &s).is_err());
        // diagnostic only: the raw gap is typically far from zero
        assert!(loss_gap(&params, &cfg, &x, &labels, &s).unwrap().is_finite());
    }

    #[test]
    fn euclidean_gradient_is_not_invariant() {
        let cfg = exact_bn_config();
        let (params, x, labels) = toy_problem(45, &cfg, 32);
        assert_eq!(euclidean_grad_gap(&params, &cfg, &x, &labels, &ScalingSet::identity(&cfg)).unwrap(), 0.0);
        let mut rng = seeded_rng(45, 1);
        let best = (0..20)
            .map(|_| {
                let s = ScalingSet::from_choices(&cfg, &[0.1, 10.0], &mut rng).unwrap();
                euclidean_grad_gap(&params, &cfg, &x, &labels, &s).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.5, "largest gap {best}");
    }

    #[test]
    fn unit_norm_direction_is_invariant() {
        let cfg = exact_bn_config();
        let (params, x, labels) = toy_problem(46, &cfg, 32);
        let mut rng = seeded_rng(46, 1);
        for _ in 0..10 {
            let s = ScalingSet::from_choices(&cfg, &[0.1, 10.0], &mut rng).unwrap();
            assert!(un_direction_gap(&params, &cfg, &x, &labels, &s).unwrap() <= 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reparameterize_is_a_group_action(seed in any::<u64>()) {
                let cfg = toy_config();
                let (params, _, _) = toy_problem(seed, &cfg, 4);
                let mut rng = seeded_rng(seed, 7);
                let s1 = ScalingSet::log_uniform(&cfg, 1e-2, 1e2, &mut rng).unwrap();
                let s2 = ScalingSet::log_uniform(&cfg, 1e-2, 1e2, &mut rng).unwrap();
                let twice = reparameterize(&reparameterize(&params, &s1).unwrap(), &s2).unwrap();
                let once = reparameterize(&params, &s1.compose(&s2).unwrap()).unwrap();
                for (a, b) in twice.layers.iter().zip(&once.layers) {
                    let scale = a.weight.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    prop_assert!(a.weight.max_abs_diff(&b.weight) <= 1e-14 * scale);
                }
            }
        }
    }
}
