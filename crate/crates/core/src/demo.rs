//! Demonstrations: observed trajectories plus how they were produced.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::{noisy_feedback_rollout, NoiseModel};
use crate::ddp::{SolverConfig, SolverError};
use crate::gradient::GradientError;
use crate::linalg::{Mat, Vector};
use crate::pipeline::{gains, solve, SolverChoice};
use crate::problem::{OcProblem, ProblemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoMode {
    /// The optimal trajectory itself.
    Nominal,
    /// `u = u* + K*(x − x*)` executed on a noisy system.
    ClosedLoop,
    /// Supplied from outside.
    External,
}

/// An observed trajectory `x_0..x_N`, `u_0..u_{N−1}` and the sampled stages
/// `S ⊆ {0, …, N}` used by the losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub samples: Vec<usize>,
    #[serde(with = "vectors")]
    pub states: Vec<Vector>,
    #[serde(with = "vectors")]
    pub controls: Vec<Vector>,
    pub mode: DemoMode,
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Reference trajectory and gains the demonstrator tracked.
    #[serde(default, with = "vectors")]
    pub nominal_states: Vec<Vector>,
    #[serde(default, with = "vectors")]
    pub nominal_controls: Vec<Vector>,
    #[serde(default, with = "matrices")]
    pub gains: Vec<Mat>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemoError {
    #[error("sample index {index} outside 0..={horizon}")]
    SampleOutOfRange { index: usize, horizon: usize },
    #[error("sample set is empty")]
    EmptySamples,
    #[error("sample indices must be strictly increasing")]
    UnsortedSamples,
    #[error("demonstration shape: {0}")]
    Shape(String),
    #[error("solver failed while generating the demonstration: {0}")]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error("rollout diverged: {0}")]
    Rollout(#[from] ProblemError),
}

impl Demonstration {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn x0(&self) -> &Vector {
        &self.states[0]
    }

    /// Checks shapes against `p` and the sample set against the horizon.
    pub fn validate(&self, p: &dyn OcProblem) -> Result<(), DemoError> {
        let d = p.dims();
        if self.states.len() != d.horizon + 1 || self.controls.len() != d.horizon {
            return Err(DemoError::Shape(format!(
                "{} states and {} controls for horizon {}",
                self.states.len(),
                self.controls.len(),
                d.horizon
            )));
        }
        if self.states.iter().any(|x| x.len() != d.n_x) || self.controls.iter().any(|u| u.len() != d.n_u) {
            return Err(DemoError::Shape("state or control dimension".into()));
        }
        check_samples(&self.samples, d.horizon)
    }

    /// Same data with a different sample set.
    pub fn with_samples(&self, samples: Vec<usize>) -> Self {
        Demonstration { samples, ..self.clone() }
    }
}

pub fn check_samples(samples: &[usize], horizon: usize) -> Result<(), DemoError> {
    if samples.is_empty() {
        return Err(DemoError::EmptySamples);
    }
    if samples.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DemoError::UnsortedSamples);
    }
    if let Some(&index) = samples.iter().find(|&&k| k > horizon) {
        return Err(DemoError::SampleOutOfRange { index, horizon });
    }
    Ok(())
}

/// `{0, …, n−1}`
pub fn first_samples(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `count` initial states around `x0`: offsets `0, +0.3, −0.3, +0.6, …` on
/// the second state component (the first for scalar systems).
pub fn spread_initial_states(x0: &Vector, count: usize) -> Vec<Vector> {
    let i = usize::from(x0.len() > 1);
    (0..count)
        .map(|n| {
            let mag = 0.3 * n.div_ceil(2) as f64;
            let mut x = x0.clone();
            x[i] += if n % 2 == 1 { mag } else { -mag };
            x
        })
        .collect()
}

/// Solves at `θ*` and executes the feedback policy on the noisy system.
#[allow(clippy::too_many_arguments)]
pub fn generate_closed_loop_demo(
    p: &dyn OcProblem,
    theta_star: &Vector,
    x0: &Vector,
    noise: &NoiseModel,
    seed: u64,
    samples: Vec<usize>,
    choice: SolverChoice,
    cfg: &SolverConfig,
) -> Result<Demonstration, DemoError> {
    check_samples(&samples, p.dims().horizon)?;
    let solved = solve(p, theta_star, x0, choice, cfg, None)?;
    let k = gains(p, &solved, theta_star)?;
    let nominal = &solved.result.traj;
    let run = noisy_feedback_rollout(p, theta_star, nominal, &k, noise, seed)?;
    Ok(Demonstration {
        samples,
        states: run.states,
        controls: run.controls,
        mode: DemoMode::ClosedLoop,
        theta_star: Some(theta_star.iter().copied().collect()),
        seed: Some(seed),
        noise: noise.clone(),
        nominal_states: nominal.states.clone(),
        nominal_controls: nominal.controls.clone(),
        gains: k,
    })
}

/// Serialises `Vec<Vector>` as nested arrays.
pub mod vectors {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Vector;

    pub fn serialize<S: Serializer>(v: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = v.iter().map(|x| x.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}

/// Serialises `Vec<Mat>` as arrays of row arrays.
pub mod matrices {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Mat;

    pub fn serialize<S: Serializer>(v: &[Mat], s: S) -> Result<S::Ok, S::Error> {
        let all: Vec<Vec<Vec<f64>>> =
            v.iter().map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()).collect();
        all.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.into_iter()
            .map(|rows| {
                let nr = rows.len();
                let nc = rows.first().map(|r| r.len()).unwrap_or(0);
                if rows.iter().any(|r| r.len() != nc) {
                    return Err(D::Error::custom("ragged matrix"));
                }
                Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, Overrides};
    use crate::oracles::scalar_noisy_demo;

    fn scalar() -> crate::benchmarks::System {
        make_system("scalar_example", &Overrides::default()).unwrap()
    }

    #[test]
    fn table_noisy_row() {
        let s = scalar();
        for (x0, w1, w2) in [(1.0, 0.3, -0.2), (2.0, -0.1, 0.05)] {
            let noise = NoiseModel::fixed(vec![vec![w1], vec![w2]]);
            let d = generate_closed_loop_demo(
                s.problem.as_ref(),
                &s.spec.theta_star(),
                &Vector::from_element(1, x0),
                &noise,
                0,
                vec![0, 1, 2],
                SolverChoice::Ipddp,
                &SolverConfig::default(),
            )
            .unwrap();
            let (u1, x2) = scalar_noisy_demo(x0, w1, w2);
            assert!((d.controls[1][0] - u1).abs() < 1e-12);
            assert!((d.states[2][0] - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_reproduces_nominal() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let d = generate_closed_loop_demo(
            s.problem.as_ref(),
            &s.spec.theta_star(),
            &s.spec.x0(),
            &NoiseModel::default(),
            1,
            first_samples(4),
            SolverChoice::Ipddp,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(d.states, d.nominal_states);
        assert_eq!(d.controls, d.nominal_controls);
    }

    #[test]
    fn generator_is_deterministic_and_replayable() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let gen = |seed| {
            generate_closed_loop_demo(
                s.problem.as_ref(),
                &s.spec.theta_star(),
                &s.spec.x0(),
                &NoiseModel::multiplicative(0.05),
                seed,
                first_samples(3),
                SolverChoice::Ipddp,
                &SolverConfig::default(),
            )
            .unwrap()
        };
        let a = gen(11);
        assert_eq!(a, gen(11));
        assert_ne!(a.states, gen(12).states);
        for k in 0..a.horizon() {
            let u = &a.nominal_controls[k] + &a.gains[k] * (&a.states[k] - &a.nominal_states[k]);
            assert_eq!(u, a.controls[k]);
        }
    }

    #[test]
    fn json_round_trip() {
        let s = scalar();
        let d = generate_closed_loop_demo(
            s.problem.as_ref(),
            &s.spec.theta_star(),
            &s.spec.x0(),
            &NoiseModel::fixed(vec![vec![0.5], vec![0.0]]),
            0,
            vec![0, 2],
            SolverChoice::Ipddp,
            &SolverConfig::default(),
        )
        .unwrap();
        let text = serde_json::to_string(&d).unwrap();
        let back: Demonstration = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        assert!(text.contains("\"samples\":[0,2]"));
    }

    #[test]
    fn spread_offsets() {
        let xs = spread_initial_states(&Vector::from_vec(vec![1.0, 2.0]), 4);
        let second: Vec<f64> = xs.iter().map(|x| x[1]).collect();
        assert_eq!(second, vec![2.0, 2.3, 1.7, 2.6]);
        assert!(xs.iter().all(|x| x[0] == 1.0));
        assert_eq!(spread_initial_states(&Vector::from_element(1, 1.0), 2)[1][0], 1.3);
    }

    #[test]
    fn sample_validation() {
        assert_eq!(check_samples(&[], 3), Err(DemoError::EmptySamples));
        assert_eq!(check_samples(&[1, 1], 3), Err(DemoError::UnsortedSamples));
        assert_eq!(check_samples(&[0, 4], 3), Err(DemoError::SampleOutOfRange { index: 4, horizon: 3 }));
        assert!(check_samples(&[0, 3], 3).is_ok());
    }
}
