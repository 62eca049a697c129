//! One-step ODE integrators over canonical coordinates.
//!
//! Explicit Runge–Kutta methods (RK1–RK4) query the joint derivative
//! `(q̇, ṗ)` once per stage. Symplectic methods (S1–S3) alternate momentum
//! and position sub-steps, querying `ṗ` and `q̇` separately at different
//! points. Both are written against [`PhaseSpace`], so the same code steps
//! plain arrays and states recorded on an autodiff tape.
//!
//! No absolute time is passed to the vector field; every system here is
//! autonomous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A state split into position and momentum halves.
pub trait PhaseSpace<T: Scalar>: Clone {
    type Half: Clone;
    /// Step-size representation: a scalar, or one value per system in a batch.
    type Step: Clone;

    fn position(&self) -> Self::Half;
    fn momentum(&self) -> Self::Half;
    fn join(q: Self::Half, p: Self::Half) -> Self;

    /// `x + coef · dt · rate`
    fn advance(x: &Self::Half, dt: &Self::Step, coef: T, rate: &Self::Half) -> Self::Half;
}

/// Time derivatives of a state. The split queries default to evaluating the
/// joint field and keeping one half.
pub trait VectorField<T: Scalar, S: PhaseSpace<T>> {
    /// `(q̇, ṗ)` packed as a state.
    fn derivatives(&mut self, state: &S) -> Result<S>;

    fn position_rate(&mut self, state: &S) -> Result<S::Half> {
        Ok(self.derivatives(state)?.position())
    }

    fn momentum_rate(&mut self, state: &S) -> Result<S::Half> {
        Ok(self.derivatives(state)?.momentum())
    }
}

impl<T: Scalar, S: PhaseSpace<T>, F: VectorField<T, S> + ?Sized> VectorField<T, S> for &mut F {
    fn derivatives(&mut self, state: &S) -> Result<S> {
        (**self).derivatives(state)
    }

    fn position_rate(&mut self, state: &S) -> Result<S::Half> {
        (**self).position_rate(state)
    }

    fn momentum_rate(&mut self, state: &S) -> Result<S::Half> {
        (**self).momentum_rate(state)
    }
}

/// Explicit Runge–Kutta coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    /// Strictly lower-triangular stage matrix, row `i` has `i` entries.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub order: usize,
}

impl ButcherTableau {
    pub fn euler() -> Self {
        ButcherTableau { a: vec![vec![]], b: vec![1.0], c: vec![0.0], order: 1 }
    }

    pub fn midpoint() -> Self {
        ButcherTableau { a: vec![vec![], vec![0.5]], b: vec![0.0, 1.0], c: vec![0.0, 0.5], order: 2 }
    }

    /// Kutta's third-order method.
    pub fn kutta3() -> Self {
        ButcherTableau {
            a: vec![vec![], vec![0.5], vec![-1.0, 2.0]],
            b: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 1.0],
            order: 3,
        }
    }

    pub fn classic4() -> Self {
        ButcherTableau {
            a: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 0.5, 1.0],
            order: 4,
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Weights sum to one, `a` is strictly lower-triangular and rows sum to `c`.
    pub fn is_consistent(&self) -> bool {
        let s = self.stages();
        self.a.len() == s
            && self.c.len() == s
            && (self.b.iter().sum::<f64>() - 1.0).abs() < 1e-12
            && self.a.iter().enumerate().all(|(i, row)| row.len() == i)
            && self.a.iter().zip(&self.c).all(|(row, c)| (row.iter().sum::<f64>() - c).abs() < 1e-12)
    }
}

/// Splitting coefficients: stage `i` applies `p += d_i·dt·ṗ`, then
/// `q += c_i·dt·q̇` with the updated momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct SymplecticCoefficients {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub order: usize,
}

impl SymplecticCoefficients {
    /// Symplectic Euler.
    pub fn euler() -> Self {
        SymplecticCoefficients { position: vec![1.0], momentum: vec![1.0], order: 1 }
    }

    /// Velocity Verlet (kick–drift–kick).
    pub fn verlet() -> Self {
        SymplecticCoefficients { position: vec![1.0, 0.0], momentum: vec![0.5, 0.5], order: 2 }
    }

    /// Ruth's third-order method.
    pub fn ruth3() -> Self {
        SymplecticCoefficients {
            position: vec![2.0 / 3.0, -2.0 / 3.0, 1.0],
            momentum: vec![7.0 / 24.0, 3.0 / 4.0, -1.0 / 24.0],
            order: 3,
        }
    }

    pub fn stages(&self) -> usize {
        self.position.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.position.len() == self.momentum.len()
            && (self.position.iter().sum::<f64>() - 1.0).abs() < 1e-12
            && (self.momentum.iter().sum::<f64>() - 1.0).abs() < 1e-12
    }
}

/// Explicit Runge–Kutta step. Performs exactly one field evaluation per stage.
pub fn rk_step<T, S, F>(tableau: &ButcherTableau, dt: &S::Step, state: &S, field: &mut F) -> Result<S>
where
    T: Scalar,
    S: PhaseSpace<T>,
    F: VectorField<T, S> + ?Sized,
{
    let (q0, p0) = (state.position(), state.momentum());
    let mut ks: Vec<S> = Vec::with_capacity(tableau.stages());
    for row in &tableau.a {
        let mut q = q0.clone();
        let mut p = p0.clone();
        for (a, k) in row.iter().zip(&ks) {
            if *a != 0.0 {
                q = S::advance(&q, dt, T::of(*a), &k.position());
                p = S::advance(&p, dt, T::of(*a), &k.momentum());
            }
        }
        let stage = if row.is_empty() { state.clone() } else { S::join(q, p) };
        ks.push(field.derivatives(&stage)?);
    }
    let mut q = q0;
    let mut p = p0;
    for (b, k) in tableau.b.iter().zip(&ks) {
        if *b != 0.0 {
            q = S::advance(&q, dt, T::of(*b), &k.position());
            p = S::advance(&p, dt, T::of(*b), &k.momentum());
        }
    }
    Ok(S::join(q, p))
}

/// Symplectic splitting step. Each stage queries `ṗ` then `q̇`, so an
/// `n`-stage method performs `2n` evaluations.
pub fn symplectic_step<T, S, F>(coeffs: &SymplecticCoefficients, dt: &S::Step, state: &S, field: &mut F) -> Result<S>
where
    T: Scalar,
    S: PhaseSpace<T>,
    F: VectorField<T, S> + ?Sized,
{
    let mut current = state.clone();
    for (c, d) in coeffs.position.iter().zip(&coeffs.momentum) {
        let p_dot = field.momentum_rate(&current)?;
        let p = S::advance(&current.momentum(), dt, T::of(*d), &p_dot);
        current = S::join(current.position(), p);
        let q_dot = field.position_rate(&current)?;
        let q = S::advance(&current.position(), dt, T::of(*c), &q_dot);
        current = S::join(q, current.momentum());
    }
    Ok(current)
}

/// The seven supported one-step methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Integrator {
    #[serde(rename = "RK1")]
    Rk1,
    #[serde(rename = "RK2")]
    Rk2,
    #[serde(rename = "RK3")]
    Rk3,
    #[serde(rename = "RK4")]
    Rk4,
    S1,
    S2,
    S3,
}

impl Integrator {
    pub const ALL: [Integrator; 7] = [
        Integrator::Rk1,
        Integrator::Rk2,
        Integrator::Rk3,
        Integrator::Rk4,
        Integrator::S1,
        Integrator::S2,
        Integrator::S3,
    ];

    pub fn order(self) -> usize {
        match self {
            Integrator::Rk1 | Integrator::S1 => 1,
            Integrator::Rk2 | Integrator::S2 => 2,
            Integrator::Rk3 | Integrator::S3 => 3,
            Integrator::Rk4 => 4,
        }
    }

    pub fn is_symplectic(self) -> bool {
        matches!(self, Integrator::S1 | Integrator::S2 | Integrator::S3)
    }

    pub fn tableau(self) -> Option<ButcherTableau> {
        match self {
            Integrator::Rk1 => Some(ButcherTableau::euler()),
            Integrator::Rk2 => Some(ButcherTableau::midpoint()),
            Integrator::Rk3 => Some(ButcherTableau::kutta3()),
            Integrator::Rk4 => Some(ButcherTableau::classic4()),
            _ => None,
        }
    }

    pub fn symplectic_coefficients(self) -> Option<SymplecticCoefficients> {
        match self {
            Integrator::S1 => Some(SymplecticCoefficients::euler()),
            Integrator::S2 => Some(SymplecticCoefficients::verlet()),
            Integrator::S3 => Some(SymplecticCoefficients::ruth3()),
            _ => None,
        }
    }

    pub fn step<T, S, F>(self, dt: &S::Step, state: &S, field: &mut F) -> Result<S>
    where
        T: Scalar,
        S: PhaseSpace<T>,
        F: VectorField<T, S> + ?Sized,
    {
        match (self.tableau(), self.symplectic_coefficients()) {
            (Some(t), _) => rk_step(&t, dt, state, field),
            (_, Some(c)) => symplectic_step(&c, dt, state, field),
            _ => unreachable!("every integrator is RK or symplectic"),
        }
    }

    /// `n_steps + 1` states, each produced by stepping the previous one.
    pub fn rollout<T, S, F>(self, dt: S::Step, state0: S, field: &mut F, n_steps: usize) -> Result<Vec<S>>
    where
        T: Scalar,
        S: PhaseSpace<T>,
        F: VectorField<T, S> + ?Sized,
    {
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(state0);
        for _ in 0..n_steps {
            let next = self.step(&dt, states.last().expect("non-empty"), field)?;
            states.push(next);
        }
        Ok(states)
    }

    pub fn name(self) -> &'static str {
        match self {
            Integrator::Rk1 => "RK1",
            Integrator::Rk2 => "RK2",
            Integrator::Rk3 => "RK3",
            Integrator::Rk4 => "RK4",
            Integrator::S1 => "S1",
            Integrator::S2 => "S2",
            Integrator::S3 => "S3",
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Integrator::ALL
            .into_iter()
            .find(|i| i.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown integrator {s:?}")))
    }
}

/// Unit-mass, unit-stiffness oscillator `H = (|q|² + |p|²) / 2` with a
/// closed-form solution; the test problem for order measurements.
#[derive(Clone, Copy, Debug, Default)]
pub struct HarmonicOscillator;

impl HarmonicOscillator {
    pub fn exact<T: Scalar>(q0: &[T], p0: &[T], t: T) -> (Vec<T>, Vec<T>) {
        let (s, c) = t.sin_cos();
        let q = q0.iter().zip(p0).map(|(&q, &p)| q * c + p * s).collect();
        let p = q0.iter().zip(p0).map(|(&q, &p)| -q * s + p * c).collect();
        (q, p)
    }
}

impl<T: Scalar> VectorField<T, crate::physics::State<T>> for HarmonicOscillator {
    fn derivatives(&mut self, s: &crate::physics::State<T>) -> Result<crate::physics::State<T>> {
        Ok(crate::physics::State { q: s.p.clone(), p: s.q.iter().map(|&v| -v).collect() })
    }

    fn position_rate(&mut self, s: &crate::physics::State<T>) -> Result<Vec<T>> {
        Ok(s.p.clone())
    }

    fn momentum_rate(&mut self, s: &crate::physics::State<T>) -> Result<Vec<T>> {
        Ok(s.q.iter().map(|&v| -v).collect())
    }
}

/// Step sizes used for order measurement.
pub const ORDER_STEPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Horizon over which the final-state error is measured.
pub const ORDER_HORIZON: f64 = 2.0;

/// Least-squares slope of `log(final error)` against `log(dt)` on the
/// harmonic oscillator, over [`ORDER_STEPS`].
pub fn measure_convergence_order(integrator: Integrator) -> Result<f64> {
    let q0 = vec![1.0f64, -0.3];
    let p0 = vec![0.2f64, 0.8];
    let (q_exact, p_exact) = HarmonicOscillator::exact(&q0, &p0, ORDER_HORIZON);
    let mut points = Vec::with_capacity(ORDER_STEPS.len());
    for &dt in &ORDER_STEPS {
        let steps = crate::physics::steps_for(ORDER_HORIZON, dt)?;
        let s0 = crate::physics::State { q: q0.clone(), p: p0.clone() };
        let traj = integrator.rollout(dt, s0, &mut HarmonicOscillator, steps)?;
        let last = traj.last().expect("non-empty");
        let err = last
            .q
            .iter()
            .zip(&q_exact)
            .chain(last.p.iter().zip(&p_exact))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        points.push((dt.ln(), err));
    }
    if points.iter().all(|&(_, e)| e < 1e-13) {
        return Err(Error::BelowNoise);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(f64::MIN_POSITIVE).ln()).collect();
    Ok(least_squares_slope(&xs, &ys))
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
