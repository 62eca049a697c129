//! Fully connected particle graphs and a single graph-network block.
//!
//! A batch of `B` systems with `n` particles each is laid out as one
//! disjoint graph of `B·n` nodes and `B·n·(n−1)` directed edges. Node
//! features are `[q − mean(q), p, m, k]`, optionally followed by the step
//! size. Edge and global input features are empty.
//!
//! The block applies, in order: an edge MLP to `[v_sender, v_receiver]`, a
//! node MLP to `[Σ incoming edges, v]`, and (for global readout) a global
//! MLP to `[Σ edges, Σ nodes]`. A linear head without activation maps the
//! node or global latent to the output. All aggregations are sums.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundLinear, BoundMlp, Linear, MlpParams, Parameters, Tape, Var};
use crate::error::{Error, Result};
use crate::physics::{State, SystemConfig, DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hidden sizes of every MLP in the block.
pub const HIDDEN_SIZES: [usize; 2] = [64, 64];

/// Index arrays for `size` disjoint, fully connected graphs of `n` nodes.
#[derive(Clone, Debug)]
pub struct Topology {
    pub size: usize,
    pub n: usize,
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
    pub node_graph: Rc<[usize]>,
    pub edge_graph: Rc<[usize]>,
}

impl Topology {
    pub fn fully_connected(size: usize, n: usize) -> Self {
        let edges = n * n.saturating_sub(1);
        let mut senders = Vec::with_capacity(size * edges);
        let mut receivers = Vec::with_capacity(size * edges);
        let mut edge_graph = Vec::with_capacity(size * edges);
        for g in 0..size {
            let off = g * n;
            for r in 0..n {
                for s in 0..n {
                    if s != r {
                        senders.push(off + s);
                        receivers.push(off + r);
                        edge_graph.push(g);
                    }
                }
            }
        }
        let node_graph: Vec<usize> = (0..size * n).map(|i| i / n.max(1)).collect();
        Topology {
            size,
            n,
            senders: senders.into(),
            receivers: receivers.into(),
            node_graph: node_graph.into(),
            edge_graph: edge_graph.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.size * self.n
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }
}

/// Static parameters of a batch of equally sized systems.
#[derive(Clone, Debug)]
pub struct SystemBatch<T> {
    pub topology: Rc<Topology>,
    /// Per-node mass, `N × 1`.
    pub masses: Tensor<T>,
    /// Per-node spring constant, `N × 1`.
    pub springs: Tensor<T>,
    /// Per-directed-edge `k_ij`, aligned with the topology's edges.
    pub edge_springs: Rc<[T]>,
}

impl<T: Scalar> SystemBatch<T> {
    pub fn new(configs: &[&SystemConfig<T>]) -> Result<Self> {
        let n = configs.first().map(|c| c.n()).ok_or_else(|| Error::Config("empty batch".into()))?;
        if configs.iter().any(|c| c.n() != n) {
            return Err(Error::shape("systems in a batch must have the same particle count"));
        }
        let topology = Rc::new(Topology::fully_connected(configs.len(), n));
        let masses = Tensor::column(configs.iter().flat_map(|c| c.masses().iter().copied()).collect());
        let springs = Tensor::column(configs.iter().flat_map(|c| c.springs().iter().copied()).collect());
        let edge_springs = topology
            .senders
            .iter()
            .zip(topology.receivers.iter())
            .map(|(&s, &r)| springs.get(s, 0) * springs.get(r, 0))
            .collect();
        Ok(SystemBatch { topology, masses, springs, edge_springs })
    }

    pub fn single(config: &SystemConfig<T>) -> Self {
        Self::new(&[config]).expect("a single config is a valid batch")
    }

    pub fn size(&self) -> usize {
        self.topology.size
    }

    pub fn n(&self) -> usize {
        self.topology.n
    }

    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }
}

/// Which canonical coordinates a graph's nodes see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeInputs {
    /// `[q − mean(q), p, m, k]`
    Full,
    /// `[q − mean(q), m, k]`
    PositionOnly,
    /// `[p, m, k]`
    MomentumOnly,
}

impl NodeInputs {
    pub fn width(self, with_dt: bool) -> usize {
        let base = match self {
            NodeInputs::Full => 2 * DIM + 2,
            NodeInputs::PositionOnly | NodeInputs::MomentumOnly => DIM + 2,
        };
        base + usize::from(with_dt)
    }
}

/// Node features on a tape plus the shared topology.
#[derive(Clone)]
pub struct Graph<'t, T> {
    pub nodes: Var<'t, T>,
    pub topology: Rc<Topology>,
}

impl<T: Scalar> Graph<'_, T> {
    pub fn node_width(&self) -> usize {
        self.nodes.shape().1
    }
}

/// Positions with each system's mean removed.
pub fn centered_positions<'t, T: Scalar>(q: Var<'t, T>, topology: &Topology) -> Var<'t, T> {
    let inv_n = T::one() / T::of(topology.n as f64);
    let mean = q.scatter_add(&topology.node_graph, topology.size).scale(inv_n);
    q - mean.gather(&topology.node_graph)
}

/// Builds node features for a batch. `dt_per_node`, when given, is
/// appended as a final feature column.
pub fn build_graph<'t, T: Scalar>(
    batch: &SystemBatch<T>,
    q: Var<'t, T>,
    p: Var<'t, T>,
    inputs: NodeInputs,
    dt_per_node: Option<&Tensor<T>>,
) -> Graph<'t, T> {
    let tape = q.tape();
    let topology = &batch.topology;
    let mut parts = Vec::with_capacity(5);
    match inputs {
        NodeInputs::Full => {
            parts.push(centered_positions(q, topology));
            parts.push(p);
        }
        NodeInputs::PositionOnly => parts.push(centered_positions(q, topology)),
        NodeInputs::MomentumOnly => parts.push(p),
    }
    parts.push(tape.leaf(batch.masses.clone()));
    parts.push(tape.leaf(batch.springs.clone()));
    if let Some(dt) = dt_per_node {
        parts.push(tape.leaf(dt.clone()));
    }
    Graph { nodes: tape.concat(&parts), topology: Rc::clone(topology) }
}

/// Convenience: graph for one system's plain state.
pub fn build_single_graph<'t, T: Scalar>(
    tape: &'t Tape<T>,
    config: &SystemConfig<T>,
    state: &State<T>,
    dt: Option<T>,
) -> Graph<'t, T> {
    let batch = SystemBatch::single(config);
    let n = config.n();
    let q = tape.leaf(Tensor::from_vec(n, DIM, state.q.clone()));
    let p = tape.leaf(Tensor::from_vec(n, DIM, state.p.clone()));
    let dt_col = dt.map(|d| Tensor::filled(n, 1, d));
    build_graph(&batch, q, p, NodeInputs::Full, dt_col.as_ref())
}

/// Where the block is read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    Nodes,
    Global,
}

/// Weights of one graph-network block and its linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnParams<T> {
    pub readout: Readout,
    pub edge: MlpParams<T>,
    pub node: MlpParams<T>,
    /// Present only for global readout.
    pub global: Option<MlpParams<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> GnParams<T> {
    pub fn init(node_features: usize, hidden: &[usize], readout: Readout, output: usize, rng: &mut impl Rng) -> Self {
        let latent = *hidden.last().expect("at least one hidden layer");
        let edge = MlpParams::init(2 * node_features, hidden, rng);
        let node = MlpParams::init(latent + node_features, hidden, rng);
        let global = match readout {
            Readout::Global => Some(MlpParams::init(2 * latent, hidden, rng)),
            Readout::Nodes => None,
        };
        let head = Linear::init(latent, output, rng);
        GnParams { readout, edge, node, global, head }
    }

    /// All-zero weights with the same layout as [`GnParams::init`].
    pub fn zeros(node_features: usize, hidden: &[usize], readout: Readout, output: usize) -> Self {
        let zeros_mlp = |input: usize| {
            let mut width = input;
            let layers = hidden
                .iter()
                .map(|&s| {
                    let l = Linear::zeros(width, s);
                    width = s;
                    l
                })
                .collect();
            MlpParams { layers }
        };
        let latent = *hidden.last().expect("at least one hidden layer");
        GnParams {
            readout,
            edge: zeros_mlp(2 * node_features),
            node: zeros_mlp(latent + node_features),
            global: (readout == Readout::Global).then(|| zeros_mlp(2 * latent)),
            head: Linear::zeros(latent, output),
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.edge.layer_sizes()
    }

    pub fn node_features(&self) -> usize {
        self.edge.input_size() / 2
    }

    pub fn output_size(&self) -> usize {
        self.head.output_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.edge.validate()?;
        self.node.validate()?;
        let latent = self.edge.output_size();
        if self.node.input_size() != latent + self.node_features() {
            return Err(Error::shape("node MLP input must be edge latent + node features"));
        }
        match (&self.global, self.readout) {
            (Some(g), Readout::Global) => {
                g.validate()?;
                if g.input_size() != latent + self.node.output_size() {
                    return Err(Error::shape("global MLP input must be edge + node latents"));
                }
                if self.head.input_size() != g.output_size() {
                    return Err(Error::shape("head input must match the global latent"));
                }
            }
            (None, Readout::Nodes) => {
                if self.head.input_size() != self.node.output_size() {
                    return Err(Error::shape("head input must match the node latent"));
                }
            }
            _ => return Err(Error::shape("global MLP presence must match the readout")),
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundGn<'t, T> {
        BoundGn {
            readout: self.readout,
            edge: self.edge.bind(tape),
            node: self.node.bind(tape),
            global: self.global.as_ref().map(|g| g.bind(tape)),
            head: self.head.bind(tape),
        }
    }
}

impl<T: Scalar> Parameters<T> for GnParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.edge.tensors();
        out.extend(self.node.tensors());
        if let Some(g) = &self.global {
            out.extend(g.tensors());
        }
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.edge.tensors_mut();
        out.extend(self.node.tensors_mut());
        if let Some(g) = &mut self.global {
            out.extend(g.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }
}

/// [`GnParams`] recorded as tape leaves.
#[derive(Clone, Debug)]
pub struct BoundGn<'t, T> {
    pub readout: Readout,
    pub edge: BoundMlp<'t, T>,
    pub node: BoundMlp<'t, T>,
    pub global: Option<BoundMlp<'t, T>>,
    pub head: BoundLinear<'t, T>,
}

impl<'t, T: Scalar> BoundGn<'t, T> {
    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        let mut out = self.edge.leaves();
        out.extend(self.node.leaves());
        if let Some(g) = &self.global {
            out.extend(g.leaves());
        }
        out.extend(self.head.leaves());
        out
    }

    fn check_width(&self, g: &Graph<'t, T>) -> Result<()> {
        let expected = self.edge.layers[0].weight.shape().0 / 2;
        if g.node_width() != expected {
            return Err(Error::shape(format!(
                "graph has {} node features, network expects {expected}",
                g.node_width()
            )));
        }
        Ok(())
    }

    /// Edge and node updates; returns `(edge latents, node latents)`.
    fn block(&self, g: &Graph<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_width(g)?;
        let tape = g.nodes.tape();
        let topo = &g.topology;
        let edge_in = tape.concat(&[g.nodes.gather(&topo.senders), g.nodes.gather(&topo.receivers)]);
        let edges = self.edge.forward(edge_in)?;
        let incoming = edges.scatter_add(&topo.receivers, topo.num_nodes());
        let nodes = self.node.forward(tape.concat(&[incoming, g.nodes]))?;
        Ok((edges, nodes))
    }

    /// Per-node outputs, `N × out`.
    pub fn node_output(&self, g: &Graph<'t, T>) -> Result<Var<'t, T>> {
        if self.readout != Readout::Nodes {
            return Err(Error::shape("network is configured for global readout"));
        }
        let (_, nodes) = self.block(g)?;
        self.head.forward(nodes)
    }

    /// One scalar per graph, `B × 1`.
    pub fn global_output(&self, g: &Graph<'t, T>) -> Result<Var<'t, T>> {
        let global = self.global.as_ref().ok_or_else(|| Error::shape("network is configured for node readout"))?;
        let (edges, nodes) = self.block(g)?;
        let tape = g.nodes.tape();
        let topo = &g.topology;
        let u_in = tape
            .concat(&[edges.scatter_add(&topo.edge_graph, topo.size), nodes.scatter_add(&topo.node_graph, topo.size)]);
        self.head.forward(global.forward(u_in)?)
    }
}

/// `GN_V` for one system: an `n × out` tensor.
pub fn gn_node_output<T: Scalar>(
    params: &GnParams<T>,
    config: &SystemConfig<T>,
    state: &State<T>,
    dt: Option<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let g = build_single_graph(&tape, config, state, dt);
    let out = params.bind(&tape).node_output(&g)?;
    Ok(out.value().as_ref().clone())
}

/// `GN_u` for one system.
pub fn gn_global_output<T: Scalar>(params: &GnParams<T>, config: &SystemConfig<T>, state: &State<T>) -> Result<T> {
    let tape = Tape::new();
    let g = build_single_graph(&tape, config, state, None);
    Ok(params.bind(&tape).global_output(&g)?.item())
}
