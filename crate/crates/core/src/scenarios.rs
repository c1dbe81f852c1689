//! Seeded data generators for the transcription-factor and ballistic-target
//! experiments, plus their default estimator setups.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{
    augment, augment_hyperparameter_with, AugmentedModel, BallisticModel, ContinuousModel, HyperMapping, HyperState,
    LinearModel, DEFAULT_THETA_MIN,
};
use crate::error::{Error, Result};
use crate::gp_ssm::{matern_ssm, GpPrior};
use crate::integrator::{simulate_forced, Grid, PiecewiseSignal};
use crate::kfrts::BaselineSetup;
use crate::ose::{EstimationConfig, HyperLearning};

/// Noise generator identifier written into dataset headers.
pub const RNG_ALGORITHM: &str = "chacha8-seed_from_u64/standard-normal-ziggurat";

/// Substeps used when simulating ground truth.
const TRUTH_SUBSTEPS: usize = 8;

/// Sum of Gaussian bumps `Σ aᵢ exp(−(t − cᵢ)² / (2 sᵢ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseProfile {
    pub amplitudes: Vec<f64>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

impl PulseProfile {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitudes
            .iter()
            .zip(self.centers.iter().zip(self.widths.iter()))
            .map(|(a, (c, s))| a * (-(t - c).powi(2) / (2.0 * s * s)).exp())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.amplitudes.len();
        if self.centers.len() != n || self.widths.len() != n {
            return Err(Error::InvalidConfig("pulse profile vectors differ in length".into()));
        }
        if self.widths.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("pulse widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscriptionParams {
    pub sensitivity: f64,
    pub decay: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
    pub step: f64,
    pub samples: usize,
    pub initial_state: f64,
    pub force: PulseProfile,
    pub matern_order: u32,
    pub signal_variance: f64,
    /// Length-scale guess `θ̂(0)` for hyperparameter learning.
    pub initial_length_scale: f64,
}

impl Default for TranscriptionParams {
    fn default() -> Self {
        Self {
            sensitivity: 0.25,
            decay: 0.6,
            sigma_w: 1e-3,
            sigma_v: 0.025,
            step: 0.01,
            samples: 1500,
            initial_state: 0.0,
            force: PulseProfile {
                amplitudes: vec![1.0, 0.6],
                centers: vec![4.0, 10.0],
                widths: vec![1.0, 1.5],
            },
            matern_order: 1,
            signal_variance: 1.0,
            initial_length_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallisticParams {
    pub drag: f64,
    pub decay: f64,
    pub gravity: f64,
    pub sensor_x: f64,
    pub sensor_y: f64,
    pub initial_state: [f64; 2],
    pub estimator_prior: [f64; 2],
    pub duration: f64,
    pub step: f64,
    pub process_variance: [f64; 2],
    pub measurement_variance: f64,
    pub force: PulseProfile,
    pub matern_order: u32,
    pub signal_variance: f64,
    pub initial_length_scale: f64,
}

impl Default for BallisticParams {
    fn default() -> Self {
        Self {
            drag: 4.49e-4,
            decay: 1.49e-4,
            gravity: 9.81,
            sensor_x: 30000.0,
            sensor_y: 30.0,
            initial_state: [65000.0, 3000.0],
            estimator_prior: [55000.0, 2000.0],
            duration: 25.0,
            step: 0.5,
            process_variance: [50.0, 10.0],
            measurement_variance: 900.0,
            force: PulseProfile {
                amplitudes: vec![15.0],
                centers: vec![12.0],
                widths: vec![2.0],
            },
            matern_order: 2,
            signal_variance: 1.0,
            initial_length_scale: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Transcription(TranscriptionParams),
    Ballistic(BallisticParams),
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else is replaced.
pub fn deep_merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn merged<P: Serialize + for<'de> Deserialize<'de>>(defaults: &P, overrides: Option<&Value>) -> Result<P> {
    let Some(patch) = overrides else {
        return serde_json::from_value(serde_json::to_value(defaults)?).map_err(Error::from);
    };
    let mut value = serde_json::to_value(defaults)?;
    deep_merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("scenario parameters: {e}")))
}

/// Ground truth and noisy measurements on the sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenario: String,
    pub seed: u64,
    pub grid: Grid<f64>,
    /// Physical states at every node.
    pub states: Vec<DVector<f64>>,
    pub latent_force: Vec<f64>,
    /// Empty (zero-dimensional) for both built-in scenarios.
    pub inputs: PiecewiseSignal<f64>,
    /// One sample per node.
    pub measurements: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }
}

/// Everything an estimator needs for a scenario.
#[derive(Debug, Clone)]
pub struct EstimatorSetup {
    /// Estimation model; hyper-augmented for the ballistic case.
    pub model: AugmentedModel<f64>,
    pub config: EstimationConfig<f64>,
    pub prior: DVector<f64>,
    /// Learn-then-freeze settings, when the length scale is learned first.
    pub learning: Option<HyperLearning<f64>>,
    /// KF/RTS baseline for linear scenarios.
    pub baseline: Option<BaselineSetup<f64>>,
}

fn noise(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

impl Scenario {
    pub fn names() -> &'static [&'static str] {
        &["transcription", "ballistic"]
    }

    /// Defaults for `name`, with `overrides` deep-merged over them.
    pub fn from_name(name: &str, overrides: Option<&Value>) -> Result<Self> {
        let scenario = match name {
            "transcription" => Self::Transcription(merged(&TranscriptionParams::default(), overrides)?),
            "ballistic" => Self::Ballistic(merged(&BallisticParams::default(), overrides)?),
            other => return Err(Error::UnknownScenario(other.to_string())),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Transcription(_) => "transcription",
            Self::Ballistic(_) => "ballistic",
        }
    }

    pub fn params_json(&self) -> Value {
        match self {
            Self::Transcription(p) => serde_json::to_value(p),
            Self::Ballistic(p) => serde_json::to_value(p),
        }
        .expect("parameters serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")))
            }
        };
        match self {
            Self::Transcription(p) => {
                positive(p.sensitivity, "sensitivity")?;
                positive(p.decay, "decay")?;
                positive(p.step, "step")?;
                positive(p.signal_variance, "signal_variance")?;
                positive(p.initial_length_scale, "initial_length_scale")?;
                non_negative(p.sigma_w, "sigma_w")?;
                non_negative(p.sigma_v, "sigma_v")?;
                if p.samples == 0 {
                    return Err(Error::InvalidConfig("samples must be positive".into()));
                }
                p.force.validate()
            }
            Self::Ballistic(p) => {
                positive(p.drag, "drag")?;
                positive(p.decay, "decay")?;
                positive(p.step, "step")?;
                positive(p.duration, "duration")?;
                positive(p.signal_variance, "signal_variance")?;
                positive(p.initial_length_scale, "initial_length_scale")?;
                non_negative(p.measurement_variance, "measurement_variance")?;
                for v in p.process_variance {
                    non_negative(v, "process_variance")?;
                }
                let ratio = p.duration / p.step;
                if (ratio - ratio.round()).abs() > 1e-9 {
                    return Err(Error::InvalidConfig("duration must be a multiple of step".into()));
                }
                p.force.validate()
            }
        }
    }

    pub fn intervals(&self) -> usize {
        match self {
            Self::Transcription(p) => p.samples,
            Self::Ballistic(p) => (p.duration / p.step).round() as usize,
        }
    }

    pub fn step(&self) -> f64 {
        match self {
            Self::Transcription(p) => p.step,
            Self::Ballistic(p) => p.step,
        }
    }

    pub fn force(&self) -> &PulseProfile {
        match self {
            Self::Transcription(p) => &p.force,
            Self::Ballistic(p) => &p.force,
        }
    }

    /// Physical model with its disturbance map.
    pub fn physical_model(&self) -> ContinuousModel<f64> {
        match self {
            Self::Transcription(p) => {
                let lin = LinearModel::new(
                    DMatrix::from_element(1, 1, -p.decay),
                    DMatrix::zeros(1, 0),
                    DVector::from_element(1, p.sensitivity),
                    DMatrix::from_element(1, 1, 1.0),
                )
                .expect("scalar model is consistent");
                ContinuousModel::new(lin)
            }
            Self::Ballistic(p) => ContinuousModel::new(BallisticModel {
                drag: p.drag,
                decay: p.decay,
                gravity: p.gravity,
                sensor_x: p.sensor_x,
                sensor_y: p.sensor_y,
            }),
        }
    }

    fn gp_prior(&self, length_scale: f64) -> Result<GpPrior<f64>> {
        match self {
            Self::Transcription(p) => GpPrior::new(p.matern_order, length_scale, p.signal_variance),
            Self::Ballistic(p) => GpPrior::new(p.matern_order, length_scale, p.signal_variance),
        }
    }

    /// Simulates ground truth and measurements. Process noise is drawn for
    /// every interval first (held constant over it), then measurement noise
    /// for every node.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let n = self.intervals();
        let grid = Grid::with_substeps(0.0, self.step(), n, TRUTH_SUBSTEPS)?;
        let model = self.physical_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, w_std, v_std) = match self {
            Self::Transcription(p) => (DVector::from_element(1, p.initial_state), vec![p.sigma_w], p.sigma_v),
            Self::Ballistic(p) => (
                DVector::from_row_slice(&p.initial_state),
                p.process_variance.iter().map(|v| v.sqrt()).collect(),
                p.measurement_variance.sqrt(),
            ),
        };
        let w: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_iterator(w_std.len(), w_std.iter().map(|s| noise(&mut rng, *s))))
            .collect();
        let w = PiecewiseSignal::new(w_std.len(), w)?;
        let inputs = PiecewiseSignal::zeros(n, 0);
        let force = self.force().clone();
        let states = simulate_forced(&model, &x0, |t| force.eval(t), &inputs, &w, &grid)?;
        let p = model.physics().output_dim();
        let measurements = states
            .iter()
            .map(|x| {
                let mut y = DVector::zeros(p);
                model.physics().output(x.as_slice(), &[], y.as_mut_slice());
                for v in y.iter_mut() {
                    *v += noise(&mut rng, v_std);
                }
                y
            })
            .collect();
        Ok(Dataset {
            scenario: self.name().to_string(),
            seed,
            latent_force: grid.times().iter().map(|t| force.eval(*t)).collect(),
            grid: Grid::new(0.0, self.step(), n)?,
            states,
            inputs,
            measurements,
        })
    }

    /// Default weights, constraints and priors for the scenario's estimator.
    pub fn default_weights(&self) -> Result<EstimatorSetup> {
        match self {
            Self::Transcription(p) => {
                let prior = self.gp_prior(p.initial_length_scale)?;
                let q_gp = matern_ssm(&prior)?.q;
                let model = augment(self.physical_model(), prior.clone())?;
                let inv_w = 1.0 / (p.sigma_w * p.sigma_w).max(f64::MIN_POSITIVE);
                let q = DMatrix::from_diagonal(&DVector::from_vec(vec![inv_w, inv_w, 1.0 / q_gp]));
                let r = DMatrix::from_element(1, 1, 1.0 / (p.sigma_v * p.sigma_v).max(f64::MIN_POSITIVE));
                let mut config = EstimationConfig::new(&model, q, r, DMatrix::identity(3, 3) * 1e-2, p.step)?;
                config.horizon_samples = 60;
                config.learn_window = 60;
                config.constraints = config
                    .constraints
                    .with_state_bounds(model.force_index(), 0.0, f64::INFINITY);
                let learning = HyperLearning {
                    q_theta: 1.0,
                    p_theta: 1e-2,
                    theta_min: 0.05,
                    theta_max: 20.0,
                    ..HyperLearning::new(p.initial_length_scale)
                };
                let baseline = BaselineSetup {
                    base: self.physical_model(),
                    prior,
                    process_spectral: DMatrix::from_element(1, 1, p.sigma_w * p.sigma_w * p.step),
                    measurement_cov: DMatrix::from_element(1, 1, p.sigma_v * p.sigma_v),
                    step: p.step,
                    physical_prior_variance: 10.0,
                    prior_mean: None,
                };
                Ok(EstimatorSetup {
                    prior: DVector::zeros(3),
                    model,
                    config,
                    learning: Some(learning),
                    baseline: Some(baseline),
                })
            }
            Self::Ballistic(p) => {
                let base = augment(self.physical_model(), self.gp_prior(p.initial_length_scale)?)?;
                let model = augment_hyperparameter_with(
                    &base,
                    HyperState {
                        theta_min: DEFAULT_THETA_MIN,
                        mapping: HyperMapping::LengthScale,
                    },
                )?;
                let na = model.state_dim();
                let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0, 1.0, 1.0, 10.0, 1.0]));
                let config = EstimationConfig::new(
                    &model,
                    q,
                    DMatrix::from_element(1, 1, 1.0),
                    DMatrix::identity(na, na) * 1e-11,
                    p.step,
                )?;
                let mut prior = DVector::zeros(na);
                prior[0] = p.estimator_prior[0];
                prior[1] = p.estimator_prior[1];
                prior[na - 1] = p.initial_length_scale;
                Ok(EstimatorSetup {
                    model,
                    config,
                    prior,
                    learning: None,
                    baseline: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn transcription_defaults() {
        let Scenario::Transcription(p) = Scenario::from_name("transcription", None).unwrap() else {
            panic!("wrong scenario");
        };
        assert_eq!(
            (p.sensitivity, p.decay, p.sigma_w, p.sigma_v, p.step, p.samples),
            (0.25, 0.6, 1e-3, 0.025, 0.01, 1500)
        );
    }

    #[test]
    fn ballistic_defaults() {
        let Scenario::Ballistic(p) = Scenario::from_name("ballistic", None).unwrap() else {
            panic!("wrong scenario");
        };
        assert_eq!(
            (p.drag, p.decay, p.gravity, p.sensor_x, p.sensor_y),
            (4.49e-4, 1.49e-4, 9.81, 30000.0, 30.0)
        );
        assert_eq!(p.initial_state, [65000.0, 3000.0]);
        assert_eq!(p.estimator_prior, [55000.0, 2000.0]);
    }

    #[test]
    fn same_seed_same_data() {
        let s = Scenario::from_name("transcription", Some(&json!({"samples": 200}))).unwrap();
        let a = s.generate(7).unwrap();
        let b = s.generate(7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.measurements, s.generate(8).unwrap().measurements);
    }

    #[test]
    fn noiseless_measurements_equal_states() {
        let s = Scenario::from_name("transcription", Some(&json!({"sigma_v": 0.0, "samples": 100}))).unwrap();
        let d = s.generate(1).unwrap();
        for (y, x) in d.measurements.iter().zip(d.states.iter()) {
            assert_eq!(y[0], x[0]);
        }
    }

    #[test]
    fn measurement_noise_level() {
        let s = Scenario::from_name("transcription", None).unwrap();
        let d = s.generate(3).unwrap();
        let n = d.measurements.len() as f64;
        let resid: Vec<f64> = d
            .measurements
            .iter()
            .zip(d.states.iter())
            .map(|(y, x)| y[0] - x[0])
            .collect();
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / 0.025 - 1.0).abs() < 0.1, "{std}");
        assert!(d.latent_force.iter().all(|l| *l >= 0.0));
        assert_eq!(d.states.len(), 1501);
    }

    #[test]
    fn free_fall_altitude_decreases() {
        let s = Scenario::from_name(
            "ballistic",
            Some(&json!({
                "force": {"amplitudes": [], "centers": [], "widths": []},
                "process_variance": [0.0, 0.0],
                "measurement_variance": 0.0
            })),
        )
        .unwrap();
        let d = s.generate(0).unwrap();
        assert_eq!(d.states.len(), 51);
        for pair in d.states.windows(2) {
            assert!(pair[1][0] < pair[0][0]);
        }
    }

    #[test]
    fn weights_and_overrides() {
        let setup = Scenario::from_name("transcription", None).unwrap().default_weights().unwrap();
        assert!((setup.config.r[(0, 0)] - 1600.0).abs() < 1e-9);
        assert_eq!(setup.config.horizon_samples, 60);
        assert_eq!(setup.config.constraints.state_lower[1], 0.0);
        let b = Scenario::from_name("ballistic", None).unwrap().default_weights().unwrap();
        assert_eq!(
            b.config.q.diagonal().as_slice(),
            &[10.0, 10.0, 1.0, 1.0, 10.0, 1.0]
        );
        assert_eq!(b.config.r[(0, 0)], 1.0);
        assert_eq!(b.config.p, DMatrix::identity(6, 6) * 1e-11);

        let s = Scenario::from_name("ballistic", Some(&json!({"force": {"amplitudes": [3.0]}}))).unwrap();
        assert_eq!(s.force().amplitudes, vec![3.0]);
        assert_eq!(s.force().centers, vec![12.0]);
        assert!(Scenario::from_name("ballistic", Some(&json!({"gravty": 1.0}))).is_err());
        assert!(matches!(Scenario::from_name("hpt", None), Err(Error::UnknownScenario(_))));
    }
}
