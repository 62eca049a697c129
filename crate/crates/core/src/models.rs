//! The learned predictors and the true-Hamiltonian reference.
//!
//! Every model except [`ModelKind::DeltaGN`] is a vector field that an
//! integrator steps; DeltaGN adds its node output to the state directly.
//! Models work on a [`BatchState`] recorded on a tape so the same code
//! serves evaluation and end-to-end training.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Var};
use crate::error::{Error, Result};
use crate::graphnet::{build_graph, BoundGn, GnParams, NodeInputs, Readout, SystemBatch};
use crate::integrators::{Integrator, PhaseSpace, VectorField};
use crate::physics::{State, SystemConfig, Trajectory, DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    DeltaGN,
    OGN,
    HOGN,
    SeparableOGN,
    SeparableHOGN,
    TrueHamiltonian,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::DeltaGN,
        ModelKind::OGN,
        ModelKind::HOGN,
        ModelKind::SeparableOGN,
        ModelKind::SeparableHOGN,
        ModelKind::TrueHamiltonian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DeltaGN => "DeltaGN",
            ModelKind::OGN => "OGN",
            ModelKind::HOGN => "HOGN",
            ModelKind::SeparableOGN => "SeparableOGN",
            ModelKind::SeparableHOGN => "SeparableHOGN",
            ModelKind::TrueHamiltonian => "TrueHamiltonian",
        }
    }

    pub fn is_learned(self) -> bool {
        self != ModelKind::TrueHamiltonian
    }

    pub fn uses_integrator(self) -> bool {
        self != ModelKind::DeltaGN
    }

    pub fn is_hamiltonian(self) -> bool {
        matches!(self, ModelKind::HOGN | ModelKind::SeparableHOGN | ModelKind::TrueHamiltonian)
    }

    /// `(node inputs, readout, output width)` of each network.
    fn networks(self, dt_feature: bool) -> Vec<(NodeInputs, bool, Readout, usize)> {
        use NodeInputs::*;
        match self {
            ModelKind::DeltaGN => vec![(Full, dt_feature, Readout::Nodes, 2 * DIM)],
            ModelKind::OGN => vec![(Full, false, Readout::Nodes, 2 * DIM)],
            ModelKind::HOGN => vec![(Full, false, Readout::Global, 1)],
            // [ṗ from q, q̇ from p]
            ModelKind::SeparableOGN => {
                vec![(PositionOnly, false, Readout::Nodes, DIM), (MomentumOnly, false, Readout::Nodes, DIM)]
            }
            // [kinetic term from p, potential term from q]
            ModelKind::SeparableHOGN => {
                vec![(MomentumOnly, false, Readout::Global, 1), (PositionOnly, false, Readout::Global, 1)]
            }
            ModelKind::TrueHamiltonian => vec![],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// A model kind and its networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub kind: ModelKind,
    pub nets: Vec<GnParams<T>>,
    /// DeltaGN only: append the step size as a node feature.
    pub dt_feature: bool,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(kind: ModelKind, hidden: &[usize], dt_feature: bool, rng: &mut impl Rng) -> Result<Self> {
        if dt_feature && kind != ModelKind::DeltaGN {
            return Err(Error::Config(format!("{kind} does not take the step size as input")));
        }
        if kind.is_learned() && hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        let nets = kind
            .networks(dt_feature)
            .into_iter()
            .map(|(inputs, with_dt, readout, out)| GnParams::init(inputs.width(with_dt), hidden, readout, out, rng))
            .collect();
        Ok(ModelParams { kind, nets, dt_feature })
    }

    pub fn true_hamiltonian() -> Self {
        ModelParams { kind: ModelKind::TrueHamiltonian, nets: vec![], dt_feature: false }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.kind.networks(self.dt_feature);
        if spec.len() != self.nets.len() {
            return Err(Error::shape(format!(
                "{} expects {} networks, found {}",
                self.kind,
                spec.len(),
                self.nets.len()
            )));
        }
        for ((inputs, with_dt, readout, out), net) in spec.into_iter().zip(&self.nets) {
            net.validate()?;
            if net.node_features() != inputs.width(with_dt) || net.readout != readout || net.output_size() != out {
                return Err(Error::shape(format!("network layout does not match {}", self.kind)));
            }
        }
        Ok(())
    }

    pub fn bind<'t, 'b>(&self, tape: &'t Tape<T>, batch: &'b SystemBatch<T>) -> BoundModel<'t, 'b, T> {
        BoundModel {
            kind: self.kind,
            dt_feature: self.dt_feature,
            batch,
            nets: self.nets.iter().map(|n| n.bind(tape)).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.nets.iter().flat_map(|n| n.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.nets.iter_mut().flat_map(|n| n.tensors_mut()).collect()
    }
}

/// Step size for a batch: shared, or one value per node (each system's
/// step repeated over its particles).
#[derive(Clone, Debug, PartialEq)]
pub enum BatchStep<T> {
    Uniform(T),
    PerNode(Rc<[T]>),
}

impl<T: Scalar> BatchStep<T> {
    pub fn per_system(dts: &[T], n: usize) -> Self {
        BatchStep::PerNode(dts.iter().flat_map(|&d| std::iter::repeat(d).take(n)).collect())
    }

    fn column(&self, rows: usize) -> Tensor<T> {
        match self {
            BatchStep::Uniform(d) => Tensor::filled(rows, 1, *d),
            BatchStep::PerNode(f) => Tensor::column(f.to_vec()),
        }
    }
}

/// Positions and momenta of every node in a batch, `N × 2` each.
#[derive(Clone, Copy, Debug)]
pub struct BatchState<'t, T> {
    pub q: Var<'t, T>,
    pub p: Var<'t, T>,
}

impl<'t, T: Scalar> BatchState<'t, T> {
    pub fn leaf(tape: &'t Tape<T>, q: Tensor<T>, p: Tensor<T>) -> Self {
        BatchState { q: tape.leaf(q), p: tape.leaf(p) }
    }

    /// Stacks plain states of equal particle count.
    pub fn stack(tape: &'t Tape<T>, states: &[&State<T>]) -> Self {
        let rows: usize = states.iter().map(|s| s.n()).sum();
        let q = states.iter().flat_map(|s| s.q.iter().copied()).collect();
        let p = states.iter().flat_map(|s| s.p.iter().copied()).collect();
        Self::leaf(tape, Tensor::from_vec(rows, DIM, q), Tensor::from_vec(rows, DIM, p))
    }

    /// Splits the batch back into one state per system.
    pub fn unstack(&self, n: usize) -> Vec<State<T>> {
        let q = self.q.value();
        let p = self.p.value();
        let width = n * DIM;
        q.data()
            .chunks(width)
            .zip(p.data().chunks(width))
            .map(|(q, p)| State { q: q.to_vec(), p: p.to_vec() })
            .collect()
    }
}

impl<'t, T: Scalar> PhaseSpace<T> for BatchState<'t, T> {
    type Half = Var<'t, T>;
    type Step = BatchStep<T>;

    fn position(&self) -> Var<'t, T> {
        self.q
    }

    fn momentum(&self) -> Var<'t, T> {
        self.p
    }

    fn join(q: Var<'t, T>, p: Var<'t, T>) -> Self {
        BatchState { q, p }
    }

    fn advance(x: &Var<'t, T>, dt: &BatchStep<T>, coef: T, rate: &Var<'t, T>) -> Var<'t, T> {
        match dt {
            BatchStep::Uniform(d) => *x + rate.scale(coef * *d),
            BatchStep::PerNode(f) => *x + rate.scale_rows_shared(f.iter().map(|&d| coef * d).collect()),
        }
    }
}

/// A model's networks recorded on a tape, bound to one batch of systems.
pub struct BoundModel<'t, 'b, T> {
    pub kind: ModelKind,
    pub dt_feature: bool,
    pub batch: &'b SystemBatch<T>,
    pub nets: Vec<BoundGn<'t, T>>,
}

impl<'t, T: Scalar> BoundModel<'t, '_, T> {
    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        self.nets.iter().flat_map(|n| n.leaves()).collect()
    }

    fn node_output(
        &self,
        net: usize,
        inputs: NodeInputs,
        q: Var<'t, T>,
        p: Var<'t, T>,
        dt: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let g = build_graph(self.batch, q, p, inputs, dt);
        self.nets[net].node_output(&g)
    }

    fn global_output(&self, net: usize, inputs: NodeInputs, q: Var<'t, T>, p: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = build_graph(self.batch, q, p, inputs, None);
        Ok(self.nets[net].global_output(&g)?.sum())
    }

    /// Sum over the batch of each system's Hamiltonian, `1 × 1`.
    pub fn hamiltonian(&self, state: &BatchState<'t, T>) -> Result<Var<'t, T>> {
        let (q, p) = (state.q, state.p);
        match self.kind {
            ModelKind::HOGN => self.global_output(0, NodeInputs::Full, q, p),
            ModelKind::SeparableHOGN => Ok(self.global_output(0, NodeInputs::MomentumOnly, q, p)?
                + self.global_output(1, NodeInputs::PositionOnly, q, p)?),
            ModelKind::TrueHamiltonian => Ok(true_hamiltonian_on_tape(self.batch, q, p)),
            k => Err(Error::Config(format!("{k} has no Hamiltonian"))),
        }
    }

    /// `(∂H/∂p, −∂H/∂q)`, each requested only when `want` says so.
    ///
    /// Differentiates with respect to aliases of `q` and `p`: inside an
    /// integrator stage `q` may already depend on `p`, and Hamilton's
    /// equations need partial derivatives.
    fn hamiltonian_rates(
        &self,
        state: &BatchState<'t, T>,
        want_q_dot: bool,
        want_p_dot: bool,
    ) -> Result<(Option<Var<'t, T>>, Option<Var<'t, T>>)> {
        let tape = state.q.tape();
        let qa = state.q.alias();
        let pa = state.p.alias();
        let h = self.hamiltonian(&BatchState { q: qa, p: pa })?;
        let mut wrt = Vec::with_capacity(2);
        if want_q_dot {
            wrt.push(pa);
        }
        if want_p_dot {
            wrt.push(qa);
        }
        let mut grads = tape.gradients(h, &wrt)?.into_iter();
        let q_dot = want_q_dot.then(|| grads.next().expect("requested").value);
        let p_dot = want_p_dot.then(|| -grads.next().expect("requested").value);
        Ok((q_dot, p_dot))
    }

    /// The derivative function computed through the Hamiltonian by
    /// autodiff. For [`ModelKind::TrueHamiltonian`] this is the validation
    /// path; its analytic derivatives are the fast path.
    pub fn derivatives_via_hamiltonian(&self, state: &BatchState<'t, T>) -> Result<BatchState<'t, T>> {
        let (q_dot, p_dot) = self.hamiltonian_rates(state, true, true)?;
        Ok(BatchState { q: q_dot.expect("requested"), p: p_dot.expect("requested") })
    }

    /// DeltaGN: `state + GN_V(q, p, c[, dt])`.
    pub fn delta(&self, state: &BatchState<'t, T>, dt: &BatchStep<T>) -> Result<BatchState<'t, T>> {
        if self.kind != ModelKind::DeltaGN {
            return Err(Error::Config(format!("{} is not a delta model", self.kind)));
        }
        let col = self.dt_feature.then(|| dt.column(self.batch.num_nodes()));
        let out = self.node_output(0, NodeInputs::Full, state.q, state.p, col.as_ref())?;
        Ok(BatchState { q: state.q + out.slice_cols(0, DIM), p: state.p + out.slice_cols(DIM, DIM) })
    }

    /// One prediction step. DeltaGN ignores `integrator`.
    pub fn step(
        &mut self,
        integrator: Integrator,
        dt: &BatchStep<T>,
        state: &BatchState<'t, T>,
    ) -> Result<BatchState<'t, T>> {
        match self.kind {
            ModelKind::DeltaGN => self.delta(state, dt),
            _ => integrator.step(dt, state, self),
        }
    }
}

impl<'t, T: Scalar> VectorField<T, BatchState<'t, T>> for BoundModel<'t, '_, T> {
    fn derivatives(&mut self, s: &BatchState<'t, T>) -> Result<BatchState<'t, T>> {
        match self.kind {
            ModelKind::OGN => {
                let out = self.node_output(0, NodeInputs::Full, s.q, s.p, None)?;
                Ok(BatchState { q: out.slice_cols(0, DIM), p: out.slice_cols(DIM, DIM) })
            }
            ModelKind::SeparableOGN | ModelKind::SeparableHOGN | ModelKind::TrueHamiltonian => {
                Ok(BatchState { q: self.position_rate(s)?, p: self.momentum_rate(s)? })
            }
            ModelKind::HOGN => self.derivatives_via_hamiltonian(s),
            ModelKind::DeltaGN => Err(Error::Config("DeltaGN has no derivative function".into())),
        }
    }

    fn position_rate(&mut self, s: &BatchState<'t, T>) -> Result<Var<'t, T>> {
        match self.kind {
            ModelKind::SeparableOGN => self.node_output(1, NodeInputs::MomentumOnly, s.q, s.p, None),
            ModelKind::TrueHamiltonian => Ok(s.p.scale_rows_shared(inverse_masses(self.batch))),
            ModelKind::HOGN | ModelKind::SeparableHOGN => {
                Ok(self.hamiltonian_rates(s, true, false)?.0.expect("requested"))
            }
            _ => Ok(self.derivatives(s)?.q),
        }
    }

    fn momentum_rate(&mut self, s: &BatchState<'t, T>) -> Result<Var<'t, T>> {
        match self.kind {
            ModelKind::SeparableOGN => self.node_output(0, NodeInputs::PositionOnly, s.q, s.p, None),
            ModelKind::TrueHamiltonian => Ok(spring_forces_on_tape(self.batch, s.q)),
            ModelKind::HOGN | ModelKind::SeparableHOGN => {
                Ok(self.hamiltonian_rates(s, false, true)?.1.expect("requested"))
            }
            _ => Ok(self.derivatives(s)?.p),
        }
    }
}

fn inverse_masses<T: Scalar>(batch: &SystemBatch<T>) -> Rc<[T]> {
    batch.masses.data().iter().map(|&m| T::one() / m).collect()
}

/// Hooke forces for every node of a batch.
pub fn spring_forces_on_tape<'t, T: Scalar>(batch: &SystemBatch<T>, q: Var<'t, T>) -> Var<'t, T> {
    let topo = &batch.topology;
    // row e: q_receiver − q_sender
    let diff = q.gather(&topo.receivers) - q.gather(&topo.senders);
    -diff.scale_rows_shared(Rc::clone(&batch.edge_springs)).scatter_add(&topo.receivers, topo.num_nodes())
}

/// Total true Hamiltonian over the batch, `1 × 1`.
pub fn true_hamiltonian_on_tape<'t, T: Scalar>(batch: &SystemBatch<T>, q: Var<'t, T>, p: Var<'t, T>) -> Var<'t, T> {
    let topo = &batch.topology;
    let half_inv_m: Rc<[T]> = batch.masses.data().iter().map(|&m| T::of(0.5) / m).collect();
    let kinetic = p.square().scale_rows_shared(half_inv_m).sum();
    let diff = q.gather(&topo.receivers) - q.gather(&topo.senders);
    // every unordered pair appears twice among the directed edges
    let potential = diff.square().scale_rows_shared(Rc::clone(&batch.edge_springs)).sum().scale(T::of(0.25));
    kinetic + potential
}

/// Predicts the next state of one system.
pub fn predict_step<T: Scalar>(
    params: &ModelParams<T>,
    integrator: Integrator,
    config: &SystemConfig<T>,
    dt: T,
    state: &State<T>,
) -> Result<State<T>> {
    let batch = SystemBatch::single(config);
    Ok(predict_batch(params, integrator, &batch, &BatchStep::Uniform(dt), &[state])?.remove(0))
}

/// Predicts the next state of every system in `batch`.
pub fn predict_batch<T: Scalar>(
    params: &ModelParams<T>,
    integrator: Integrator,
    batch: &SystemBatch<T>,
    dt: &BatchStep<T>,
    states: &[&State<T>],
) -> Result<Vec<State<T>>> {
    let tape = Tape::new();
    let s0 = BatchState::stack(&tape, states);
    let next = params.bind(&tape, batch).step(integrator, dt, &s0)?;
    Ok(next.unstack(batch.n()))
}

/// DeltaGN prediction for one system.
pub fn delta_predict<T: Scalar>(
    params: &ModelParams<T>,
    config: &SystemConfig<T>,
    dt: T,
    state: &State<T>,
) -> Result<State<T>> {
    if params.kind != ModelKind::DeltaGN {
        return Err(Error::Config(format!("{} is not a delta model", params.kind)));
    }
    predict_step(params, Integrator::Rk1, config, dt, state)
}

/// `(q̇, ṗ)` of one system under a derivative-based model.
pub fn model_derivatives<T: Scalar>(
    params: &ModelParams<T>,
    config: &SystemConfig<T>,
    state: &State<T>,
) -> Result<State<T>> {
    let batch = SystemBatch::single(config);
    let tape = Tape::new();
    let s = BatchState::stack(&tape, &[state]);
    let d = params.bind(&tape, &batch).derivatives(&s)?;
    Ok(d.unstack(config.n()).remove(0))
}

/// Scalar Hamiltonian of one system (HOGN, SeparableHOGN, TrueHamiltonian).
pub fn model_hamiltonian<T: Scalar>(params: &ModelParams<T>, config: &SystemConfig<T>, state: &State<T>) -> Result<T> {
    let batch = SystemBatch::single(config);
    let tape = Tape::new();
    let s = BatchState::stack(&tape, &[state]);
    Ok(params.bind(&tape, &batch).hamiltonian(&s)?.item())
}

/// Rolls out `steps` predictions for a batch of systems sharing `dt`.
/// Returns one trajectory per system, each starting at its initial state.
/// A diverging rollout is not an error; its states become non-finite.
pub fn rollout_batch<T: Scalar>(
    params: &ModelParams<T>,
    integrator: Integrator,
    batch: &SystemBatch<T>,
    dt: T,
    initial: &[&State<T>],
    steps: usize,
) -> Result<Vec<Trajectory<T>>> {
    let mut trajs: Vec<Trajectory<T>> = initial.iter().map(|s| Trajectory { dt, states: vec![(*s).clone()] }).collect();
    let step = BatchStep::Uniform(dt);
    for _ in 0..steps {
        let current: Vec<&State<T>> = trajs.iter().map(|t| t.last()).collect();
        let next = predict_batch(params, integrator, batch, &step, &current)?;
        for (t, s) in trajs.iter_mut().zip(next) {
            t.states.push(s);
        }
    }
    Ok(trajs)
}

/// Single-system rollout.
pub fn rollout<T: Scalar>(
    params: &ModelParams<T>,
    integrator: Integrator,
    config: &SystemConfig<T>,
    dt: T,
    initial: &State<T>,
    steps: usize,
) -> Result<Trajectory<T>> {
    let batch = SystemBatch::single(config);
    Ok(rollout_batch(params, integrator, &batch, dt, &[initial], steps)?.remove(0))
}
