//! Routing-by-agreement between two capsule layers.
//!
//! Two procedures over the same prediction tensor:
//!
//! - [`route_cognitive_consistency`]: logits start as clamped prediction
//!   norms and each iteration adds `|v_j| * |u_ij| * cos((|v_j| - |u_ij|)^2)`,
//!   so pairs whose magnitudes agree are coupled more strongly.
//! - [`route_baseline`]: logits start at zero and each iteration adds the
//!   dot product `v_j . u_ij`.
//!
//! Both are pure differentiable functions; gradients flow through every
//! unrolled iteration, including the clamp-based initialization.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingAlgorithm {
    CognitiveConsistency,
    Baseline,
}

impl RoutingAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            RoutingAlgorithm::CognitiveConsistency => "cognitive-consistency",
            RoutingAlgorithm::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cognitive-consistency" => Some(RoutingAlgorithm::CognitiveConsistency),
            "baseline" => Some(RoutingAlgorithm::Baseline),
            _ => None,
        }
    }
}

/// Iteration count and logit clamp range for one routing invocation.
#[derive(Clone, Copy, Debug)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub algorithm: RoutingAlgorithm,
}

impl RoutingConfig {
    pub fn new(algorithm: RoutingAlgorithm, iterations: usize) -> Self {
        RoutingConfig { iterations, a_min: 0.0, a_max: 1.0, algorithm }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("routing iterations must be >= 1".to_string()));
        }
        if self.a_min >= self.a_max {
            return Err(Error::InvalidConfig(format!(
                "clamp range requires a_min < a_max, got ({}, {})",
                self.a_min, self.a_max
            )));
        }
        Ok(())
    }
}

/// Prediction vectors shaped `[batch, n_lower, n_upper, dim]`: lower capsule
/// i's forecast of upper capsule j's output.
pub struct PredictionTensor<T: Real> {
    values: Tensor<T>,
}

impl<T: Real> PredictionTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::InvalidConfig(format!(
                "prediction tensor must be [batch, n_lower, n_upper, dim], got {:?}",
                values.shape()
            )));
        }
        values.validate_finite("prediction tensor")?;
        Ok(PredictionTensor { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_lower(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_upper(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[3]
    }
}

/// Final logits `[batch, n_lower, n_upper]`, couplings of the last
/// iteration (softmax over the upper axis), and outputs `[batch, n_upper, dim]`.
pub struct RoutingState<T: Real> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    pub outputs: Tensor<T>,
}

/// `v = (|s|^2 / (1 + |s|^2)) * (s / |s|)` over the last axis, written as
/// `s * (|s| / (1 + |s|^2))` so the zero vector maps to zero without a
/// division by zero. Norm of the output is strictly below 1.
pub fn squash<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let axis = s.rank() - 1;
    let norm = s.l2_norm(axis)?;
    let factor = norm.div(&norm.square().add_scalar(1.0))?;
    s.mul(&factor)
}

/// Initial routing logits: the prediction-vector norms clamped into
/// `[a_min, a_max]`. Output is `[batch, n_lower, n_upper]`.
pub fn clip_init<T: Real>(
    predictions: &PredictionTensor<T>,
    a_min: f64,
    a_max: f64,
) -> Result<Tensor<T>> {
    if a_min >= a_max {
        return Err(Error::InvalidConfig(format!(
            "clamp range requires a_min < a_max, got ({a_min}, {a_max})"
        )));
    }
    let norms = prediction_norms(predictions)?;
    Ok(norms.clip(a_min, a_max))
}

/// `a_ij = cos((|v_j| - |u_ij|)^2)`, the factor that scales logit updates
/// down as the two layers' magnitudes disagree (argument in radians).
/// `v_norm` is `[batch, 1, n_upper]`, `u_norm` is `[batch, n_lower, n_upper]`.
pub fn consistency_ratio<T: Real>(v_norm: &Tensor<T>, u_norm: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(v_norm.sub(u_norm)?.square().cos())
}

/// Dispatches on `config.algorithm`.
pub fn route<T: Real>(
    predictions: &PredictionTensor<T>,
    config: &RoutingConfig,
) -> Result<RoutingState<T>> {
    match config.algorithm {
        RoutingAlgorithm::CognitiveConsistency => route_cognitive_consistency(predictions, config),
        RoutingAlgorithm::Baseline => route_baseline(predictions, config),
    }
}

/// Consistency-weighted routing: clamp-initialized logits, then `r`
/// iterations of softmax coupling, weighted sum, squash, and the update
/// `b += |v| * |u| * cos((|v| - |u|)^2)`.
pub fn route_cognitive_consistency<T: Real>(
    predictions: &PredictionTensor<T>,
    config: &RoutingConfig,
) -> Result<RoutingState<T>> {
    if config.algorithm != RoutingAlgorithm::CognitiveConsistency {
        return Err(Error::InvalidConfig(
            "route_cognitive_consistency called with a different algorithm selected".to_string(),
        ));
    }
    config.validate()?;
    let u_norm = prediction_norms(predictions)?;
    let logits = u_norm.clip(config.a_min, config.a_max);
    iterate(predictions, config, logits, Some(u_norm))
}

/// Baseline dynamic routing: zero-initialized logits updated by the scalar
/// product of each prediction with its upper capsule's output.
pub fn route_baseline<T: Real>(
    predictions: &PredictionTensor<T>,
    config: &RoutingConfig,
) -> Result<RoutingState<T>> {
    if config.algorithm != RoutingAlgorithm::Baseline {
        return Err(Error::InvalidConfig(
            "route_baseline called with a different algorithm selected".to_string(),
        ));
    }
    config.validate()?;
    let (batch, n_lower, n_upper) =
        (predictions.batch(), predictions.n_lower(), predictions.n_upper());
    let logits = Tensor::zeros(&[batch, n_lower, n_upper]);
    iterate(predictions, config, logits, None)
}

/// Prediction-vector norms reshaped to `[batch, n_lower, n_upper]`.
fn prediction_norms<T: Real>(predictions: &PredictionTensor<T>) -> Result<Tensor<T>> {
    let (batch, n_lower, n_upper) =
        (predictions.batch(), predictions.n_lower(), predictions.n_upper());
    predictions.values().l2_norm(3)?.reshape(&[batch, n_lower, n_upper])
}

fn iterate<T: Real>(
    predictions: &PredictionTensor<T>,
    config: &RoutingConfig,
    mut logits: Tensor<T>,
    u_norm: Option<Tensor<T>>,
) -> Result<RoutingState<T>> {
    let values = predictions.values();
    let (batch, n_lower, n_upper, dim) = (
        predictions.batch(),
        predictions.n_lower(),
        predictions.n_upper(),
        predictions.dim(),
    );
    let mut couplings = None;
    let mut outputs = None;
    for iter in 1..=config.iterations {
        let c = logits.softmax(2)?;
        // s_j = sum_i c_ij * u_ij, then squash into v_j
        let weighted = c.reshape(&[batch, n_lower, n_upper, 1])?.mul(values)?;
        let s = weighted.reduce_sum(1, false)?;
        let v = squash(&s)?;
        v.validate_finite(&format!("routing iteration {iter} outputs"))?;

        let v_norm = v.l2_norm(2)?.reshape(&[batch, 1, n_upper])?;
        let delta = match (&config.algorithm, &u_norm) {
            (RoutingAlgorithm::CognitiveConsistency, Some(u_norm)) => {
                let ratio = consistency_ratio(&v_norm, u_norm)?;
                v_norm.mul(u_norm)?.mul(&ratio)?
            }
            _ => {
                // dot product v_j . u_ij, summed over the capsule dimension
                values.mul(&v.reshape(&[batch, 1, n_upper, dim])?)?.reduce_sum(3, false)?
            }
        };
        logits = logits.add(&delta)?;
        logits.validate_finite(&format!("routing iteration {iter} logits"))?;
        couplings = Some(c);
        outputs = Some(v);
    }
    Ok(RoutingState {
        logits,
        couplings: couplings.expect("at least one iteration"),
        outputs: outputs.expect("at least one iteration"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(shape: &[usize], data: &[f64]) -> PredictionTensor<f64> {
        PredictionTensor::new(Tensor::from_vec(shape, data.to_vec()).unwrap()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn squash_zero_maps_to_zero() {
        let s = Tensor::<f64>::zeros(&[1, 2]);
        assert_eq!(squash(&s).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn squash_unit_vector_halves() {
        let s = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let v = squash(&s).unwrap().to_vec();
        assert!(close(v[0], 0.5, 1e-15) && v[1] == 0.0);
    }

    #[test]
    fn squash_three_four() {
        // norm 5, factor 25/26, direction (0.6, 0.8)
        let s = Tensor::<f64>::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let v = squash(&s).unwrap().to_vec();
        assert!(close(v[0], 0.576923076923077, 1e-12), "{v:?}");
        assert!(close(v[1], 0.7692307692307693, 1e-12));
    }

    #[test]
    fn clip_init_clamps_norms() {
        // norms 0.5 (interior), 3.0 (above range)
        let p = pt(&[1, 1, 2, 2], &[0.3, 0.4, 1.8, 2.4]);
        let b = clip_init(&p, 0.0, 1.0).unwrap();
        assert_eq!(b.shape(), &[1, 1, 2]);
        let bv = b.to_vec();
        assert!(close(bv[0], 0.5, 1e-12) && close(bv[1], 1.0, 1e-12));
    }

    #[test]
    fn clip_init_mid_range() {
        // (0.6, 0.8) * 2 has norm 2.0; range (0.2, 1.5) clamps to 1.5
        let p = pt(&[1, 1, 1, 2], &[1.2, 1.6]);
        let b = clip_init(&p, 0.2, 1.5).unwrap();
        assert!(close(b.item(), 1.5, 1e-12));
    }

    #[test]
    fn clip_init_requires_valid_range() {
        let p = pt(&[1, 1, 1, 2], &[0.0, 0.0]);
        assert!(clip_init(&p, 1.0, 1.0).is_err());
    }

    #[test]
    fn consistency_ratio_values() {
        let v = Tensor::<f64>::from_vec(&[1, 1, 3], vec![1.0, 1.5, 0.75]).unwrap();
        let u = Tensor::<f64>::from_vec(&[1, 1, 3], vec![1.0, 0.5, 0.25]).unwrap();
        let a = consistency_ratio(&v, &u).unwrap().to_vec();
        assert!(close(a[0], 1.0, 1e-15)); // equal norms
        assert!(close(a[1], 0.5403023058681398, 1e-12)); // cos(1)
        assert!(close(a[2], 0.9689124217106447, 1e-12)); // cos(0.25)
    }

    #[test]
    fn single_iteration_hand_trace() {
        // u_{1|1} = (0.6, 0.8) norm 1.0, u_{2|1} = (0.3, 0.4) norm 0.5,
        // range (0, 1), r = 1. Expected values recomputed by hand.
        let p = pt(&[1, 1, 2, 2], &[0.6, 0.8, 0.3, 0.4]);
        let cfg = RoutingConfig {
            iterations: 1,
            a_min: 0.0,
            a_max: 1.0,
            algorithm: RoutingAlgorithm::CognitiveConsistency,
        };
        let state = route_cognitive_consistency(&p, &cfg).unwrap();
        let c = state.couplings.to_vec();
        assert!(close(c[0], 0.6224593312018545, 1e-12), "{c:?}");
        assert!(close(c[1], 0.3775406687981454, 1e-12));
        let v = state.outputs.to_vec();
        assert!(close(v[0], 0.16755373520896197, 1e-12), "{v:?}");
        assert!(close(v[1], 0.22340498027861594, 1e-12));
        let b = state.logits.to_vec();
        assert!(close(b[0], 1.2424171952638399, 1e-12), "{b:?}");
        assert!(close(b[1], 0.5168014217249615, 1e-12));
    }

    #[test]
    fn identical_predictions_keep_uniform_couplings() {
        for algorithm in [RoutingAlgorithm::CognitiveConsistency, RoutingAlgorithm::Baseline] {
            // same vector for every upper capsule
            let p = pt(&[1, 2, 3, 2], &[0.3, 0.4].repeat(6));
            let cfg = RoutingConfig { iterations: 4, a_min: 0.0, a_max: 1.0, algorithm };
            let state = route(&p, &cfg).unwrap();
            for &c in state.couplings.to_vec().iter() {
                assert!(close(c, 1.0 / 3.0, 1e-12));
            }
        }
    }

    #[test]
    fn single_pair_baseline_is_squash() {
        let p = pt(&[1, 1, 1, 2], &[3.0, 4.0]);
        let cfg = RoutingConfig {
            iterations: 2,
            a_min: 0.0,
            a_max: 1.0,
            algorithm: RoutingAlgorithm::Baseline,
        };
        let state = route_baseline(&p, &cfg).unwrap();
        assert!(close(state.couplings.item(), 1.0, 1e-15));
        let v = state.outputs.to_vec();
        assert!(close(v[0], 0.576923076923077, 1e-12));
        assert!(close(v[1], 0.7692307692307693, 1e-12));
    }

    #[test]
    fn rerun_is_bit_identical() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect();
        for algorithm in [RoutingAlgorithm::CognitiveConsistency, RoutingAlgorithm::Baseline] {
            let cfg = RoutingConfig { iterations: 3, a_min: 0.0, a_max: 1.0, algorithm };
            let a = route(&pt(&[1, 2, 3, 4], &data), &cfg).unwrap();
            let b = route(&pt(&[1, 2, 3, 4], &data), &cfg).unwrap();
            assert_eq!(a.logits.to_vec(), b.logits.to_vec());
            assert_eq!(a.couplings.to_vec(), b.couplings.to_vec());
            assert_eq!(a.outputs.to_vec(), b.outputs.to_vec());
        }
    }

    #[test]
    fn algorithm_mismatch_rejected() {
        let p = pt(&[1, 1, 1, 2], &[0.1, 0.2]);
        let cfg = RoutingConfig {
            iterations: 1,
            a_min: 0.0,
            a_max: 1.0,
            algorithm: RoutingAlgorithm::Baseline,
        };
        assert!(route_cognitive_consistency(&p, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let p = pt(&[1, 1, 1, 2], &[0.1, 0.2]);
        let cfg = RoutingConfig {
            iterations: 0,
            a_min: 0.0,
            a_max: 1.0,
            algorithm: RoutingAlgorithm::Baseline,
        };
        assert!(route_baseline(&p, &cfg).is_err());
    }

    #[test]
    fn non_finite_prediction_rejected_up_front() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![f64::INFINITY, 0.0]).unwrap();
        assert!(PredictionTensor::new(t).is_err());
    }
}
