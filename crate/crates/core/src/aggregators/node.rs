use std::cell::OnceCell;
use std::sync::Arc;

use rand::Rng;

use super::{AggError, NodeAggKind};
use crate::autodiff::{concat_cols, Bound, ParamId, ParamSet, SegmentKind, Var, LEAKY_RELU_SLOPE};
use crate::graph::Graph;

/// Knobs shared by all node aggregators of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggOptions {
    /// Pass GAT-COS and GAT-LINEAR scores through Leaky ReLU before the softmax.
    pub leaky_on_cos_linear: bool,
    pub leaky_slope: f64,
}

impl Default for AggOptions {
    fn default() -> Self {
        Self {
            leaky_on_cos_linear: true,
            leaky_slope: LEAKY_RELU_SLOPE,
        }
    }
}

/// Layer input plus a lazily gathered `[E×d]` view of its neighbor rows,
/// so several aggregators over the same input share one gather.
pub struct AggInput<'t> {
    pub h: Var<'t>,
    neighbor_rows: OnceCell<Var<'t>>,
}

impl<'t> AggInput<'t> {
    pub fn new(h: Var<'t>) -> Self {
        Self {
            h,
            neighbor_rows: OnceCell::new(),
        }
    }

    fn neighbor_rows(&self, graph: &Graph) -> Result<Var<'t>, AggError> {
        if let Some(v) = self.neighbor_rows.get() {
            return Ok(*v);
        }
        let rows = self.h.gather_rows(graph.edge_sources())?;
        Ok(*self.neighbor_rows.get_or_init(|| rows))
    }
}

#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    att_src: ParamId,
    att_dst: ParamId,
    gen: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum Params {
    None,
    Attention(Vec<Head>),
    Gin {
        eps: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    GeniePath {
        heads: Vec<Head>,
        gate_w: ParamId,
        gate_b: ParamId,
    },
}

/// One node aggregator with its parameters registered in a [`ParamSet`].
/// Input and output width are both `dim`.
#[derive(Debug, Clone)]
pub struct NodeAggregator {
    kind: NodeAggKind,
    dim: usize,
    params: Params,
}

fn add_heads(
    kind: NodeAggKind,
    dim: usize,
    heads: usize,
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<Vec<Head>, AggError> {
    if heads == 0 || dim % heads != 0 {
        return Err(AggError::Dimension(format!(
            "{kind}: {heads} heads do not divide width {dim}"
        )));
    }
    let dh = dim / heads;
    Ok((0..heads)
        .map(|i| Head {
            w: params.add_glorot(format!("{prefix}.head{i}.w"), dim, dh, rng),
            att_src: params.add_glorot(format!("{prefix}.head{i}.att_src"), dh, 1, rng),
            att_dst: params.add_glorot(format!("{prefix}.head{i}.att_dst"), dh, 1, rng),
            gen: (kind == NodeAggKind::GatGenLinear)
                .then(|| params.add_glorot(format!("{prefix}.head{i}.gen"), dh, 1, rng)),
        })
        .collect())
}

impl NodeAggregator {
    /// Registers the parameters of `kind` under `prefix`. `heads` only
    /// matters for the attention family and must divide `dim`.
    pub fn new(
        kind: NodeAggKind,
        dim: usize,
        heads: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self, AggError> {
        if dim == 0 {
            return Err(AggError::Dimension(format!("{kind}: width must be positive")));
        }
        let params = match kind {
            NodeAggKind::SageSum | NodeAggKind::SageMean | NodeAggKind::SageMax | NodeAggKind::Gcn => {
                Params::None
            }
            NodeAggKind::Gin => Params::Gin {
                eps: params.add_zeros(format!("{prefix}.eps"), &[1]),
                w1: params.add_glorot(format!("{prefix}.w1"), dim, dim, rng),
                b1: params.add_zeros(format!("{prefix}.b1"), &[dim]),
                w2: params.add_glorot(format!("{prefix}.w2"), dim, dim, rng),
                b2: params.add_zeros(format!("{prefix}.b2"), &[dim]),
            },
            NodeAggKind::GeniePath => Params::GeniePath {
                heads: add_heads(NodeAggKind::Gat, dim, heads, params, prefix, rng)?,
                gate_w: params.add_glorot(format!("{prefix}.gate_w"), 2 * dim, 4 * dim, rng),
                gate_b: params.add_zeros(format!("{prefix}.gate_b"), &[4 * dim]),
            },
            _ => Params::Attention(add_heads(kind, dim, heads, params, prefix, rng)?),
        };
        Ok(Self { kind, dim, params })
    }

    pub fn kind(&self) -> NodeAggKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parameter ids owned by this aggregator, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let head_ids = |heads: &[Head]| {
            heads
                .iter()
                .flat_map(|h| [Some(h.w), Some(h.att_src), Some(h.att_dst), h.gen])
                .flatten()
                .collect::<Vec<_>>()
        };
        match &self.params {
            Params::None => Vec::new(),
            Params::Attention(heads) => head_ids(heads),
            Params::Gin { eps, w1, b1, w2, b2 } => vec![*eps, *w1, *b1, *w2, *b2],
            Params::GeniePath { heads, gate_w, gate_b } => {
                let mut ids = head_ids(heads);
                ids.extend([*gate_w, *gate_b]);
                ids
            }
        }
    }

    /// Attention coefficients `[E×1]` of every head, in CSR edge order.
    /// Empty for non-attention kinds.
    pub fn attention_weights<'t>(
        &self,
        bound: &Bound<'t>,
        h: Var<'t>,
        graph: &Graph,
        opts: &AggOptions,
    ) -> Result<Vec<Var<'t>>, AggError> {
        let (kind, heads) = match &self.params {
            Params::Attention(heads) => (self.kind, heads),
            Params::GeniePath { heads, .. } => (NodeAggKind::Gat, heads),
            _ => return Ok(Vec::new()),
        };
        heads
            .iter()
            .map(|head| {
                let p = h.matmul(bound.get(head.w))?;
                attention(kind, head, bound, p, graph, opts)
            })
            .collect()
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        input: &AggInput<'t>,
        graph: &Graph,
        opts: &AggOptions,
    ) -> Result<Var<'t>, AggError> {
        let h = input.h;
        let shape = h.shape();
        if shape.len() != 2 || shape[0] != graph.num_nodes() || shape[1] != self.dim {
            return Err(AggError::Dimension(format!(
                "{}: input of shape {shape:?} does not match [{}, {}]",
                self.kind,
                graph.num_nodes(),
                self.dim
            )));
        }
        let n = graph.num_nodes();
        let targets = graph.edge_targets();
        match (&self.params, self.kind) {
            (Params::None, NodeAggKind::SageSum) => {
                Ok(input.neighbor_rows(graph)?.segment_reduce(SegmentKind::Sum, targets, n)?)
            }
            (Params::None, NodeAggKind::SageMean) => {
                Ok(input.neighbor_rows(graph)?.segment_reduce(SegmentKind::Mean, targets, n)?)
            }
            (Params::None, NodeAggKind::SageMax) => {
                Ok(input.neighbor_rows(graph)?.segment_reduce(SegmentKind::Max, targets, n)?)
            }
            (Params::None, _) => {
                let coef = h.tape().leaf_shared(graph.degree_invsqrt_pairs(), false);
                Ok(input
                    .neighbor_rows(graph)?
                    .scale_rows(coef)?
                    .segment_reduce(SegmentKind::Sum, targets, n)?)
            }
            (Params::Attention(heads), kind) => attend_heads(kind, heads, bound, h, graph, opts),
            (Params::Gin { eps, w1, b1, w2, b2 }, _) => {
                let summed = input
                    .neighbor_rows(graph)?
                    .segment_reduce(SegmentKind::Sum, targets, n)?;
                let x = summed.add(h.mul(bound.get(*eps))?)?;
                let hidden = x.matmul(bound.get(*w1))?.add(bound.get(*b1))?.relu();
                Ok(hidden.matmul(bound.get(*w2))?.add(bound.get(*b2))?)
            }
            (Params::GeniePath { heads, gate_w, gate_b }, _) => {
                let d = self.dim;
                let breadth = attend_heads(NodeAggKind::Gat, heads, bound, h, graph, opts)?.tanh();
                let z = concat_cols(&[h, breadth])?
                    .matmul(bound.get(*gate_w))?
                    .add(bound.get(*gate_b))?;
                let input_gate = z.slice_cols(0, d)?.sigmoid();
                let forget = z.slice_cols(d, 2 * d)?.sigmoid();
                let output = z.slice_cols(2 * d, 3 * d)?.sigmoid();
                let candidate = z.slice_cols(3 * d, 4 * d)?.tanh();
                let cell = forget.mul(h)?.add(input_gate.mul(candidate)?)?;
                Ok(output.mul(cell.tanh())?)
            }
        }
    }
}

fn attend_heads<'t>(
    kind: NodeAggKind,
    heads: &[Head],
    bound: &Bound<'t>,
    h: Var<'t>,
    graph: &Graph,
    opts: &AggOptions,
) -> Result<Var<'t>, AggError> {
    let n = graph.num_nodes();
    let sources = graph.edge_sources();
    let targets = graph.edge_targets();
    let outs = heads
        .iter()
        .map(|head| {
            let p = h.matmul(bound.get(head.w))?;
            let alpha = attention(kind, head, bound, p, graph, opts)?;
            Ok(p.gather_rows(sources)?
                .scale_rows(alpha)?
                .segment_reduce(SegmentKind::Sum, targets, n)?)
        })
        .collect::<Result<Vec<_>, AggError>>()?;
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(concat_cols(&outs)?)
    }
}

/// Normalized attention `[E×1]` over each neighborhood for projected rows `p`.
/// Edge `u → v` has neighbor `u` (source) and owning row `v` (target).
fn attention<'t>(
    kind: NodeAggKind,
    head: &Head,
    bound: &Bound<'t>,
    p: Var<'t>,
    graph: &Graph,
    opts: &AggOptions,
) -> Result<Var<'t>, AggError> {
    let sources: &Arc<Vec<usize>> = graph.edge_sources();
    let targets = graph.edge_targets();
    let a_src = bound.get(head.att_src);
    let a_dst = bound.get(head.att_dst);
    let dh = p.shape()[1];
    let leaky = |x: Var<'t>| {
        if opts.leaky_on_cos_linear {
            x.leaky_relu(opts.leaky_slope)
        } else {
            x
        }
    };
    let score = match kind {
        NodeAggKind::Gat | NodeAggKind::GatSym | NodeAggKind::GatLinear => {
            let s = p.matmul(a_src)?;
            let d = p.matmul(a_dst)?;
            let forward = s.gather_rows(sources)?.add(d.gather_rows(targets)?)?;
            match kind {
                NodeAggKind::Gat => forward.leaky_relu(opts.leaky_slope),
                NodeAggKind::GatSym => {
                    let reverse = s.gather_rows(targets)?.add(d.gather_rows(sources)?)?;
                    forward
                        .leaky_relu(opts.leaky_slope)
                        .add(reverse.leaky_relu(opts.leaky_slope))?
                }
                _ => leaky(forward.tanh()),
            }
        }
        NodeAggKind::GatCos | NodeAggKind::GatGenLinear => {
            let ps = p.mul(a_src.reshape(&[dh])?)?;
            let pd = p.mul(a_dst.reshape(&[dh])?)?;
            let us = ps.gather_rows(sources)?;
            let vs = pd.gather_rows(targets)?;
            if kind == NodeAggKind::GatCos {
                leaky(us.mul(vs)?.sum_cols())
            } else {
                let gen = head.gen.expect("generalized linear head has W_G");
                us.add(vs)?.tanh().matmul(bound.get(gen))?
            }
        }
        other => unreachable!("{other} has no attention scores"),
    };
    Ok(score.segment_softmax(targets, graph.num_nodes())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, uniform_tensor};
    use crate::autodiff::{Tape, Tensor};
    use crate::graph::Labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph_from(n: usize, edges: &[(usize, usize)], d: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Graph::from_edges(
            n,
            edges,
            uniform_tensor(&[n, d], -1.0, 1.0, &mut rng),
            Labels::Single(Arc::new(vec![0; n])),
            vec![true; n],
            1,
        )
        .unwrap()
    }

    fn small_graph(seed: u64) -> Graph {
        graph_from(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 5), (1, 4)], 4, seed)
    }

    fn run(agg: &NodeAggregator, params: &ParamSet, graph: &Graph, h: &Tensor, opts: &AggOptions) -> Tensor {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.leaf(h.clone(), false);
        let out = agg.forward(&bound, &AggInput::new(x), graph, opts).unwrap();
        (*out.value()).clone()
    }

    fn build(kind: NodeAggKind, dim: usize, heads: usize, seed: u64) -> (NodeAggregator, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agg = NodeAggregator::new(kind, dim, heads, &mut params, "agg", &mut rng).unwrap();
        (agg, params)
    }

    #[test]
    fn sage_sum_on_isolated_node_returns_own_row() {
        let g = graph_from(3, &[(0, 1)], 4, 1);
        let (agg, params) = build(NodeAggKind::SageSum, 4, 1, 0);
        let out = run(&agg, &params, &g, g.features(), &AggOptions::default());
        assert_eq!(out.row(2), g.features().row(2));
    }

    #[test]
    fn gcn_on_two_clique_averages() {
        let g = graph_from(2, &[(0, 1)], 3, 2);
        let (agg, params) = build(NodeAggKind::Gcn, 3, 1, 0);
        let out = run(&agg, &params, &g, g.features(), &AggOptions::default());
        let h = g.features();
        for v in 0..2 {
            for j in 0..3 {
                let expected = 0.5 * (h.get(0, j) + h.get(1, j));
                assert!((out.get(v, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_matches_dense_normalized_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let n = 20 + trial * 6;
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < 0.15 {
                        edges.push((u, v));
                    }
                }
            }
            let g = graph_from(n, &edges, 5, trial as u64);
            let (agg, params) = build(NodeAggKind::Gcn, 5, 1, 0);
            let out = run(&agg, &params, &g, g.features(), &AggOptions::default());
            // dense D^{-1/2} (A + I) D^{-1/2} H
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                a[i][i] = 1.0;
            }
            for &(u, v) in &edges {
                a[u][v] = 1.0;
                a[v][u] = 1.0;
            }
            let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
            let h = g.features();
            for i in 0..n {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += a[i][k] / (deg[i] * deg[k]).sqrt() * h.get(k, j);
                    }
                    assert!((out.get(i, j) - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gat_with_zero_attention_is_mean_of_projections() {
        let g = small_graph(3);
        let (agg, mut params) = build(NodeAggKind::Gat, 4, 2, 1);
        for name in ["agg.head0.att_src", "agg.head0.att_dst", "agg.head1.att_src", "agg.head1.att_dst"] {
            let id = params.find(name).unwrap();
            params.get_mut(id).data_mut().fill(0.0);
        }
        let out = run(&agg, &params, &g, g.features(), &AggOptions::default());
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.leaf(g.features().as_ref().clone(), false);
        let proj = concat_cols(&[
            x.matmul(bound.get(params.find("agg.head0.w").unwrap())).unwrap(),
            x.matmul(bound.get(params.find("agg.head1.w").unwrap())).unwrap(),
        ])
        .unwrap();
        let mean = proj
            .gather_rows(g.edge_sources())
            .unwrap()
            .segment_reduce(SegmentKind::Mean, g.edge_targets(), g.num_nodes())
            .unwrap();
        assert!(out.max_abs_diff(&mean.value()) < 1e-10);
    }

    #[test]
    fn gin_with_zero_eps_and_identity_mlp_is_sage_sum() {
        // nonnegative inputs keep the inner relu the identity
        let mut g = small_graph(4);
        let h = g.features().map(f64::abs);
        g = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 5), (1, 4)], h, Labels::Single(Arc::new(vec![0; 6])), vec![true; 6], 1).unwrap();
        let (gin, mut params) = build(NodeAggKind::Gin, 4, 1, 0);
        for name in ["agg.w1", "agg.w2"] {
            let id = params.find(name).unwrap();
            *params.get_mut(id) = Tensor::identity(4);
        }
        let (sum, sum_params) = build(NodeAggKind::SageSum, 4, 1, 0);
        let opts = AggOptions::default();
        let a = run(&gin, &params, &g, g.features(), &opts);
        let b = run(&sum, &sum_params, &g, g.features(), &opts);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_weights_are_distributions() {
        let g = small_graph(5);
        for &kind in NodeAggKind::ALL.iter().filter(|k| k.is_attention()) {
            let (agg, params) = build(kind, 4, 2, 7);
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let x = tape.leaf(g.features().as_ref().clone(), false);
            for alpha in agg.attention_weights(&bound, x, &g, &AggOptions::default()).unwrap() {
                let a = alpha.value();
                for v in 0..g.num_nodes() {
                    let (lo, hi) = (g.offsets()[v], g.offsets()[v + 1]);
                    let w = &a.data()[lo..hi];
                    assert!(w.iter().all(|&x| x >= 0.0), "{kind}");
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{kind}");
                }
            }
        }
    }

    #[test]
    fn outputs_are_invariant_to_node_relabeling() {
        // Relabeling nodes changes the CSR order of every neighborhood;
        // outputs must follow the permutation exactly.
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 5), (1, 4), (5, 2)];
        let n = 6;
        let perm = [3usize, 5, 0, 4, 1, 2];
        let g = graph_from(n, &edges, 4, 11);
        let permuted_edges: Vec<_> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut feats = Tensor::zeros(&[n, 4]);
        for v in 0..n {
            feats.data_mut()[perm[v] * 4..perm[v] * 4 + 4].copy_from_slice(g.features().row(v));
        }
        let gp = Graph::from_edges(n, &permuted_edges, feats, Labels::Single(Arc::new(vec![0; n])), vec![true; n], 1).unwrap();
        for &kind in NodeAggKind::ALL {
            let (agg, params) = build(kind, 4, 2, 13);
            let opts = AggOptions::default();
            let a = run(&agg, &params, &g, g.features(), &opts);
            let b = run(&agg, &params, &gp, gp.features(), &opts);
            for v in 0..n {
                for j in 0..4 {
                    assert!((a.get(v, j) - b.get(perm[v], j)).abs() < 1e-10, "{kind}");
                }
            }
        }
    }

    #[test]
    fn output_width_matches_input_width() {
        let g = small_graph(6);
        for &kind in NodeAggKind::ALL {
            let (agg, params) = build(kind, 4, 2, 1);
            let out = run(&agg, &params, &g, g.features(), &AggOptions::default());
            assert_eq!(out.shape(), &[6, 4], "{kind}");
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(NodeAggregator::new(NodeAggKind::Gat, 5, 2, &mut params, "x", &mut rng).is_err());
        let (agg, params) = build(NodeAggKind::SageMean, 3, 1, 0);
        let g = small_graph(0);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.leaf(g.features().as_ref().clone(), false);
        let err = agg.forward(&bound, &AggInput::new(x), &g, &AggOptions::default()).unwrap_err();
        assert!(err.to_string().contains("[6, 4]"), "{err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let g = small_graph(8);
        for &kind in NodeAggKind::ALL {
            for seed in 0..3 {
                let (agg, params) = build(kind, 4, 2, seed);
                let ids = agg.param_ids();
                let mut inputs: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
                // perturb ε away from 0 so its gradient is exercised off the init point
                for t in inputs.iter_mut() {
                    if t.numel() == 1 {
                        t.data_mut()[0] = 0.3;
                    }
                }
                inputs.push(g.features().as_ref().clone());
                let opts = AggOptions::default();
                let report = check_gradients(&inputs, 1e-5, |tape, vars| {
                    let mut all: Vec<Var> =
                        params.values().iter().map(|t| tape.constant(t.clone())).collect();
                    for (k, &id) in ids.iter().enumerate() {
                        all[id.index()] = vars[k];
                    }
                    let bound_vars = Bound::from_vars(all);
                    let x = vars[ids.len()];
                    Ok(agg.forward(&bound_vars, &AggInput::new(x), &g, &opts).map_err(|e| match e {
                        AggError::Tensor(t) => t,
                        other => crate::autodiff::TensorError::Invalid(other.to_string()),
                    })?)
                })
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{kind} seed {seed}: {}", report.max_rel_error);
            }
        }
    }
}
