//! Ground-truth particle–spring systems.
//!
//! Every pair of particles is joined by a zero-rest-length spring with
//! stiffness `k_ij = k_i · k_j`. The Hamiltonian is
//!
//! ```text
//! H = Σ_i |p_i|² / (2 m_i) + Σ_{i<j} ½ k_ij |q_i − q_j|²
//! ```
//!
//! and the reference simulator integrates it with RK4 at a 0.005 s step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{Integrator, PhaseSpace, VectorField};
use crate::scalar::Scalar;

/// Spatial dimension of every system.
pub const DIM: usize = 2;

/// Step of the reference RK4 simulator, in seconds.
pub const GENERATION_STEP: f64 = 0.005;

pub const MASS_RANGE: (f64, f64) = (0.1, 1.0);
pub const SPRING_RANGE: (f64, f64) = (0.5, 1.0);
pub const POSITION_RANGE: (f64, f64) = (-1.0, 1.0);
pub const VELOCITY_RANGE: (f64, f64) = (-3.0, 3.0);

/// Static per-particle parameters of one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig<T> {
    masses: Vec<T>,
    springs: Vec<T>,
}

impl<T: Scalar> SystemConfig<T> {
    pub fn new(masses: Vec<T>, springs: Vec<T>) -> Result<Self> {
        if masses.len() != springs.len() {
            return Err(Error::Config(format!("{} masses but {} spring constants", masses.len(), springs.len())));
        }
        if masses.len() < 2 {
            return Err(Error::Config("a system needs at least two particles".into()));
        }
        let positive = |v: &T| v.is_finite() && *v > T::zero();
        if !masses.iter().all(positive) || !springs.iter().all(positive) {
            return Err(Error::Config("masses and spring constants must be positive and finite".into()));
        }
        Ok(SystemConfig { masses, springs })
    }

    pub fn n(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    pub fn springs(&self) -> &[T] {
        &self.springs
    }

    pub fn pair_spring(&self, i: usize, j: usize) -> T {
        pair_spring_constant(self.springs[i], self.springs[j])
    }

    pub fn cast<U: Scalar>(&self) -> SystemConfig<U> {
        SystemConfig {
            masses: self.masses.iter().map(|&m| U::of(m.as_f64())).collect(),
            springs: self.springs.iter().map(|&k| U::of(k.as_f64())).collect(),
        }
    }
}

/// Canonical coordinates of every particle, row-major `n × 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State<T> {
    pub q: Vec<T>,
    pub p: Vec<T>,
}

impl<T: Scalar> State<T> {
    pub fn new(q: Vec<T>, p: Vec<T>) -> Result<Self> {
        if q.len() != p.len() || q.len() % DIM != 0 {
            return Err(Error::shape(format!("state needs matching n×{DIM} arrays, got {} and {}", q.len(), p.len())));
        }
        if !q.iter().chain(&p).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(State { q, p })
    }

    pub fn zeros(n: usize) -> Self {
        State { q: vec![T::zero(); n * DIM], p: vec![T::zero(); n * DIM] }
    }

    pub fn n(&self) -> usize {
        self.q.len() / DIM
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> State<U> {
        State {
            q: self.q.iter().map(|&v| U::of(v.as_f64())).collect(),
            p: self.p.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> PhaseSpace<T> for State<T> {
    type Half = Vec<T>;
    type Step = T;

    fn position(&self) -> Vec<T> {
        self.q.clone()
    }

    fn momentum(&self) -> Vec<T> {
        self.p.clone()
    }

    fn join(q: Vec<T>, p: Vec<T>) -> Self {
        State { q, p }
    }

    fn advance(x: &Vec<T>, dt: &T, coef: T, rate: &Vec<T>) -> Vec<T> {
        let h = coef * *dt;
        x.iter().zip(rate).map(|(&a, &r)| a + h * r).collect()
    }
}

/// Evenly spaced states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub dt: T,
    pub states: Vec<State<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> &State<T> {
        &self.states[0]
    }

    pub fn last(&self) -> &State<T> {
        self.states.last().expect("trajectories hold at least one state")
    }

    /// Keeps every `stride`-th state, starting with the first.
    pub fn subsample(&self, stride: usize) -> Trajectory<T> {
        Trajectory { dt: self.dt * T::of(stride as f64), states: self.states.iter().step_by(stride).cloned().collect() }
    }
}

pub fn pair_spring_constant<T: Scalar>(k_i: T, k_j: T) -> T {
    k_i * k_j
}

/// Hooke force on each particle, `F_i = Σ_{j≠i} −k_ij (q_i − q_j)`.
pub fn hooke_force<T: Scalar>(config: &SystemConfig<T>, q: &[T]) -> Vec<T> {
    let n = config.n();
    assert_eq!(q.len(), n * DIM, "positions do not match the system size");
    let mut force = vec![T::zero(); n * DIM];
    for i in 0..n {
        for j in (i + 1)..n {
            let k = config.pair_spring(i, j);
            for d in 0..DIM {
                let f = -k * (q[i * DIM + d] - q[j * DIM + d]);
                force[i * DIM + d] += f;
                force[j * DIM + d] -= f;
            }
        }
    }
    force
}

pub fn kinetic_energy<T: Scalar>(config: &SystemConfig<T>, p: &[T]) -> T {
    let two = T::of(2.0);
    (0..config.n())
        .map(|i| {
            let p2 = (0..DIM).map(|d| p[i * DIM + d].powi(2)).fold(T::zero(), |a, b| a + b);
            p2 / (two * config.masses[i])
        })
        .fold(T::zero(), |a, b| a + b)
}

pub fn potential_energy<T: Scalar>(config: &SystemConfig<T>, q: &[T]) -> T {
    let n = config.n();
    let half = T::of(0.5);
    let mut v = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let r2 = (0..DIM).map(|d| (q[i * DIM + d] - q[j * DIM + d]).powi(2)).fold(T::zero(), |a, b| a + b);
            v += half * config.pair_spring(i, j) * r2;
        }
    }
    v
}

pub fn true_hamiltonian<T: Scalar>(config: &SystemConfig<T>, state: &State<T>) -> T {
    kinetic_energy(config, &state.p) + potential_energy(config, &state.q)
}

/// Hamilton's equations for the spring system: `q̇ = p / m`, `ṗ = F(q)`.
pub fn true_derivatives<T: Scalar>(config: &SystemConfig<T>, state: &State<T>) -> State<T> {
    State { q: velocities(config, &state.p), p: hooke_force(config, &state.q) }
}

fn velocities<T: Scalar>(config: &SystemConfig<T>, p: &[T]) -> Vec<T> {
    p.iter().enumerate().map(|(k, &pk)| pk / config.masses[k / DIM]).collect()
}

/// The spring system as a separable vector field.
#[derive(Clone, Debug)]
pub struct SpringField<'a, T> {
    pub config: &'a SystemConfig<T>,
}

impl<T: Scalar> VectorField<T, State<T>> for SpringField<'_, T> {
    fn derivatives(&mut self, state: &State<T>) -> Result<State<T>> {
        Ok(true_derivatives(self.config, state))
    }

    fn position_rate(&mut self, state: &State<T>) -> Result<Vec<T>> {
        Ok(velocities(self.config, &state.p))
    }

    fn momentum_rate(&mut self, state: &State<T>) -> Result<Vec<T>> {
        Ok(hooke_force(self.config, &state.q))
    }
}

/// Draws masses, spring constants, positions and velocities uniformly from
/// their ranges; momenta are `m · v`.
pub fn sample_system<T: Scalar>(rng: &mut impl Rng, n: usize) -> Result<(SystemConfig<T>, State<T>)> {
    if n < 2 {
        return Err(Error::Config("a system needs at least two particles".into()));
    }
    let mut masses = Vec::with_capacity(n);
    let mut springs = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n * DIM);
    let mut p = Vec::with_capacity(n * DIM);
    for _ in 0..n {
        let m = rng.gen_range(MASS_RANGE.0..=MASS_RANGE.1);
        masses.push(T::of(m));
        springs.push(T::of(rng.gen_range(SPRING_RANGE.0..=SPRING_RANGE.1)));
        for _ in 0..DIM {
            q.push(T::of(rng.gen_range(POSITION_RANGE.0..=POSITION_RANGE.1)));
        }
        for _ in 0..DIM {
            let v = rng.gen_range(VELOCITY_RANGE.0..=VELOCITY_RANGE.1);
            p.push(T::of(m * v));
        }
    }
    Ok((SystemConfig { masses, springs }, State { q, p }))
}

/// Integrates the true dynamics with RK4 at `step` for `n_steps` steps.
pub fn simulate_with_step<T: Scalar>(
    config: &SystemConfig<T>,
    state0: &State<T>,
    step: T,
    n_steps: usize,
) -> Trajectory<T> {
    let mut field = SpringField { config };
    let states = Integrator::Rk4
        .rollout(step, state0.clone(), &mut field, n_steps)
        .expect("the analytic spring field cannot fail");
    Trajectory { dt: step, states }
}

/// Reference trajectory at [`GENERATION_STEP`]. `duration` must be a
/// non-negative multiple of the generation step.
pub fn simulate_reference<T: Scalar>(
    config: &SystemConfig<T>,
    state0: &State<T>,
    duration: f64,
) -> Result<Trajectory<T>> {
    let steps = steps_for(duration, GENERATION_STEP)?;
    Ok(simulate_with_step(config, state0, T::of(GENERATION_STEP), steps))
}

/// Number of `step`s in `duration`, which must be a whole multiple.
pub fn steps_for(duration: f64, step: f64) -> Result<usize> {
    if !(duration >= 0.0) || !(step > 0.0) {
        return Err(Error::Config(format!("invalid duration {duration} or step {step}")));
    }
    let ratio = duration / step;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!("duration {duration} is not a multiple of {step}")));
    }
    Ok(steps as usize)
}
